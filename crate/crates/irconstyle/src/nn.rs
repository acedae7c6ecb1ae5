//! Named parameters and the two layer kinds everything is built from.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// A named, trainable tensor. The name is unique within a model and is the
/// key used by the optimizer state, EMA pairing, and checkpoints.
pub struct Parameter<T: Scalar> {
    name: String,
    tensor: Tensor<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<T>) -> Result<Self> {
        Ok(Parameter {
            name: name.into(),
            tensor: Tensor::var(shape, data)?,
        })
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(name, shape, vec![T::zero(); n]).unwrap()
    }

    /// Uniform init in (−1/√fan_in, 1/√fan_in), drawn as f64 for
    /// seed-stable values across element types.
    pub fn uniform_fan_in(
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::cast_f64(rng.gen_range(-bound..bound)))
            .collect();
        Self::new(name, shape, data).unwrap()
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.tensor.grad()
    }

    pub fn clear_grad(&self) {
        self.tensor.clear_grad()
    }

    /// Replace the value (same shape); drops any accumulated gradient.
    pub fn set_data(&mut self, data: Vec<T>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(Error::Model(format!(
                "parameter {}: value count {} != {}",
                self.name,
                data.len(),
                self.numel()
            )));
        }
        self.tensor = Tensor::var(&self.tensor.shape().to_vec(), data)?;
        Ok(())
    }
}

pub struct Conv2d<T: Scalar> {
    pub weight: Parameter<T>,
    pub bias: Option<Parameter<T>>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Conv2d {
            weight: Parameter::uniform_fan_in(
                format!("{name}.weight"),
                &[out_ch, in_ch, kernel, kernel],
                fan_in,
                rng,
            ),
            bias: Some(Parameter::uniform_fan_in(
                format!("{name}.bias"),
                &[out_ch],
                fan_in,
                rng,
            )),
            stride,
            padding,
        }
    }

    /// Zero-initialized 1×1 conv; used by injectors that must start as identity.
    pub fn zeros_1x1(name: &str, in_ch: usize, out_ch: usize) -> Self {
        Conv2d {
            weight: Parameter::zeros(format!("{name}.weight"), &[out_ch, in_ch, 1, 1]),
            bias: Some(Parameter::zeros(format!("{name}.bias"), &[out_ch])),
            stride: 1,
            padding: 0,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv2d(
            self.weight.tensor(),
            self.bias.as_ref().map(|b| b.tensor()),
            self.stride,
            self.padding,
        )
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut v = vec![&self.weight];
        if let Some(b) = &self.bias {
            v.push(b);
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = vec![&mut self.weight];
        if let Some(b) = &mut self.bias {
            v.push(b);
        }
        v
    }
}

pub struct Linear<T: Scalar> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(name: &str, in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            weight: Parameter::uniform_fan_in(
                format!("{name}.weight"),
                &[out_dim, in_dim],
                in_dim,
                rng,
            ),
            bias: Parameter::uniform_fan_in(format!("{name}.bias"), &[out_dim], in_dim, rng),
        }
    }

    pub fn zeros(name: &str, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            weight: Parameter::zeros(format!("{name}.weight"), &[out_dim, in_dim]),
            bias: Parameter::zeros(format!("{name}.bias"), &[out_dim]),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.linear(self.weight.tensor(), Some(self.bias.tensor()))
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Check that two parameter lists pair up by name and shape.
pub fn check_paired<T: Scalar>(a: &[&Parameter<T>], b: &[&Parameter<T>]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Model(format!(
            "parameter count mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    for (pa, pb) in a.iter().zip(b) {
        if pa.name() != pb.name() {
            return Err(Error::Model(format!(
                "parameter name mismatch: {} vs {}",
                pa.name(),
                pb.name()
            )));
        }
        if pa.shape() != pb.shape() {
            return Err(Error::Model(format!(
                "parameter {} shape mismatch: {:?} vs {:?}",
                pa.name(),
                pa.shape(),
                pb.shape()
            )));
        }
    }
    Ok(())
}
