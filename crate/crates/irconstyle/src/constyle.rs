//! The ConStyle module: a siamese encoder / momentum-encoder pair, a FIFO
//! negative queue, and the three contrastive-side losses (InfoNCE, content,
//! style).
//!
//! The encoder maps degraded images to the query code `q`; the momentum
//! encoder maps clean images to the positive `k` and is updated only by EMA,
//! never by backprop. Each iteration pushes `q` into the queue and the whole
//! queue acts as negatives.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{check_paired, Conv2d, Linear, Parameter};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_LATENT_DIM: usize = 128;
pub const DEFAULT_QUEUE_CAPACITY: usize = 65_760;
pub const DEFAULT_TEMPERATURE: f64 = 0.07;
pub const DEFAULT_EMA_MOMENTUM: f64 = 0.999;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ConStyleConfig {
    /// Channel width of the first conv stage; stages emit [w, 2w, 4w].
    pub width: usize,
    /// Dimension of the latent code.
    pub latent_dim: usize,
    /// Hidden width of the projection MLP.
    pub mlp_hidden: usize,
    /// Number of stride-2 stages (and of emitted feature maps).
    pub stages: usize,
    pub negative_slope: f64,
}

impl Default for ConStyleConfig {
    fn default() -> Self {
        ConStyleConfig {
            width: 16,
            latent_dim: DEFAULT_LATENT_DIM,
            mlp_hidden: 2816,
            stages: 3,
            negative_slope: 0.2,
        }
    }
}

/// Encoder output: unit-norm latent code plus the per-scale intermediate
/// feature maps, together the "latent feature" handed to the restoration net.
#[derive(Clone)]
pub struct LatentBundle<T: Scalar> {
    /// (B, d), rows L2-normalized.
    pub code: Tensor<T>,
    /// One map per stage, at 1/2, 1/4, ... resolution with widths w, 2w, ...
    pub feature_maps: Vec<Tensor<T>>,
}

struct EncStage<T: Scalar> {
    down: Conv2d<T>,
    conv: Conv2d<T>,
}

/// Several strided convolutions followed by a two-layer MLP head.
pub struct ConStyleEncoder<T: Scalar> {
    cfg: ConStyleConfig,
    stages: Vec<EncStage<T>>,
    fc1: Linear<T>,
    fc2: Linear<T>,
}

impl<T: Scalar> ConStyleEncoder<T> {
    pub fn new(cfg: &ConStyleConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut stages = Vec::with_capacity(cfg.stages);
        let mut in_ch = 3;
        for s in 0..cfg.stages {
            let out_ch = cfg.width << s;
            stages.push(EncStage {
                down: Conv2d::new(&format!("stage{s}.down"), in_ch, out_ch, 3, 2, 1, rng),
                conv: Conv2d::new(&format!("stage{s}.conv"), out_ch, out_ch, 3, 1, 1, rng),
            });
            in_ch = out_ch;
        }
        let fc1 = Linear::new("mlp.fc1", in_ch, cfg.mlp_hidden, rng);
        let fc2 = Linear::new("mlp.fc2", cfg.mlp_hidden, cfg.latent_dim, rng);
        ConStyleEncoder {
            cfg: cfg.clone(),
            stages,
            fc1,
            fc2,
        }
    }

    pub fn config(&self) -> &ConStyleConfig {
        &self.cfg
    }

    /// (B,3,H,W) with H,W divisible by 2^stages -> latent bundle.
    pub fn encode(&self, images: &Tensor<T>) -> Result<LatentBundle<T>> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::dim(format!("encode: expected (B,3,H,W), got {s:?}")));
        }
        let div = 1 << self.cfg.stages;
        if s[2] % div != 0 || s[3] % div != 0 {
            return Err(Error::dim(format!(
                "encode: spatial dims of {s:?} not divisible by {div}"
            )));
        }
        let slope = T::cast_f64(self.cfg.negative_slope);
        let mut x = images.clone();
        let mut maps = Vec::with_capacity(self.cfg.stages);
        for stage in &self.stages {
            x = stage.down.forward(&x)?.leaky_relu(slope)?;
            x = stage.conv.forward(&x)?.leaky_relu(slope)?;
            maps.push(x.clone());
        }
        let pooled = x.global_avg_pool()?;
        let hidden = self.fc1.forward(&pooled)?.leaky_relu(slope)?;
        let code = self.fc2.forward(&hidden)?.normalize_rows()?;
        Ok(LatentBundle {
            code,
            feature_maps: maps,
        })
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut v = Vec::new();
        for s in &self.stages {
            v.extend(s.down.params());
            v.extend(s.conv.params());
        }
        v.extend(self.fc1.params());
        v.extend(self.fc2.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = Vec::new();
        for s in &mut self.stages {
            v.extend(s.down.params_mut());
            v.extend(s.conv.params_mut());
        }
        v.extend(self.fc1.params_mut());
        v.extend(self.fc2.params_mut());
        v
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Copy every parameter value from `other` (matched by name and shape).
    pub fn copy_from(&mut self, other: &ConStyleEncoder<T>) -> Result<()> {
        check_paired(&other.params(), &self.params())?;
        let src: Vec<Vec<T>> = other
            .params()
            .iter()
            .map(|p| p.tensor().data().to_vec())
            .collect();
        for (dst, data) in self.params_mut().into_iter().zip(src) {
            dst.set_data(data)?;
        }
        Ok(())
    }
}

/// θ_momentum ← m·θ_momentum + (1−m)·θ_encoder, elementwise over every pair.
pub fn ema_update<T: Scalar>(
    momentum: &mut ConStyleEncoder<T>,
    encoder: &ConStyleEncoder<T>,
    m: T,
) -> Result<()> {
    if m < T::zero() || m >= T::one() {
        return Err(Error::Contract(format!("ema momentum {m} not in [0,1)")));
    }
    check_paired(&momentum.params(), &encoder.params())?;
    let src: Vec<Vec<T>> = encoder
        .params()
        .iter()
        .map(|p| p.tensor().data().to_vec())
        .collect();
    let one_minus = T::one() - m;
    for (dst, enc) in momentum.params_mut().into_iter().zip(src) {
        let blended: Vec<T> = dst
            .tensor()
            .data()
            .iter()
            .zip(&enc)
            .map(|(old, new)| m * *old + one_minus * *new)
            .collect();
        dst.set_data(blended)?;
    }
    Ok(())
}

/// Fixed-capacity FIFO of unit-norm latent codes. Exposes the batch just
/// evicted (q1) and the batch about to be evicted next (q2).
pub struct NegativeQueue<T: Scalar> {
    capacity: usize,
    dim: usize,
    entries: VecDeque<Vec<T>>,
}

impl<T: Scalar> NegativeQueue<T> {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Config("queue capacity and dim must be positive".into()));
        }
        Ok(NegativeQueue {
            capacity,
            dim,
            entries: VecDeque::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &[T]> {
        self.entries.iter().map(|v| v.as_slice())
    }

    /// Rebuild from stored rows (checkpoint restore). Order is FIFO.
    pub fn restore(capacity: usize, dim: usize, rows: Vec<Vec<T>>) -> Result<Self> {
        let mut q = Self::new(capacity, dim)?;
        for r in rows {
            if r.len() != dim {
                return Err(Error::dim(format!(
                    "queue restore: row of {} values, dim {}",
                    r.len(),
                    dim
                )));
            }
            q.entries.push_back(r);
            if q.entries.len() > capacity {
                q.entries.pop_front();
            }
        }
        Ok(q)
    }

    /// Append a (B,d) batch of unit-norm codes. Returns (q1, q2): the batch
    /// evicted by this push and the oldest batch still resident. Both are
    /// absent while fewer than 2·B codes are stored.
    pub fn push(&mut self, codes: &Tensor<T>) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
        let s = codes.shape();
        if s.len() != 2 || s[1] != self.dim {
            return Err(Error::dim(format!(
                "queue push: expected (B,{}), got {s:?}",
                self.dim
            )));
        }
        let bsz = s[0];
        for i in 0..bsz {
            let row = &codes.data()[i * self.dim..(i + 1) * self.dim];
            let mut nrm = T::zero();
            for v in row {
                nrm += *v * *v;
            }
            if (nrm.sqrt().to_f64() - 1.0).abs() > 1e-4 {
                return Err(Error::Contract(format!(
                    "queue push: row {i} has norm {}, expected 1",
                    nrm.sqrt()
                )));
            }
            self.entries.push_back(row.to_vec());
        }
        let mut evicted: Vec<Vec<T>> = Vec::new();
        while self.entries.len() > self.capacity {
            evicted.push(self.entries.pop_front().unwrap());
        }
        if self.entries.len() < 2 * bsz {
            return Ok((None, None));
        }
        let q1 = if evicted.len() == bsz {
            Some(rows_to_tensor(&evicted, self.dim)?)
        } else {
            None
        };
        let front: Vec<Vec<T>> = self.entries.iter().take(bsz).cloned().collect();
        let q2 = Some(rows_to_tensor(&front, self.dim)?);
        Ok((q1, q2))
    }

    /// Snapshot of the whole queue as a constant (len, d) matrix.
    pub fn as_matrix(&self) -> Result<Tensor<T>> {
        if self.entries.is_empty() {
            return Err(Error::State("negative queue is empty".into()));
        }
        let rows: Vec<Vec<T>> = self.entries.iter().cloned().collect();
        rows_to_tensor(&rows, self.dim)
    }
}

fn rows_to_tensor<T: Scalar>(rows: &[Vec<T>], dim: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(rows.len() * dim);
    for r in rows {
        data.extend_from_slice(r);
    }
    Tensor::new(&[rows.len(), dim], data)
}

/// Positive scalar temperature for InfoNCE.
#[derive(Debug, Clone, Copy)]
pub struct Temperature<T: Scalar>(T);

impl<T: Scalar> Temperature<T> {
    pub fn new(t: T) -> Result<Self> {
        if t <= T::zero() {
            return Err(Error::Config(format!("temperature {t} must be positive")));
        }
        Ok(Temperature(t))
    }

    pub fn get(&self) -> T {
        self.0
    }
}

/// Which InfoNCE denominator/positive pairing to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfoNceConvention {
    /// Positive term included in the denominator (MoCo lineage). Default.
    Moco,
    /// Denominator is the negatives sum only.
    Literal,
    /// Positive is k′, the momentum encoding of the degraded image; the
    /// caller passes k′ in place of k. Denominator as in `Moco`.
    Dasr,
}

/// Mean over the batch of −log(exp(q·k/t) / denom), with the whole queue as
/// negatives. Numerically stabilized by a per-row constant shift.
pub fn info_nce<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    queue: &NegativeQueue<T>,
    t: Temperature<T>,
    convention: InfoNceConvention,
) -> Result<Tensor<T>> {
    if q.shape() != k.shape() || q.shape().len() != 2 {
        return Err(Error::dim(format!(
            "info_nce: q {:?} vs k {:?}",
            q.shape(),
            k.shape()
        )));
    }
    let (bsz, d) = (q.shape()[0], q.shape()[1]);
    if queue.is_empty() {
        return Err(Error::State("info_nce: negative queue is empty".into()));
    }
    if queue.dim() != d {
        return Err(Error::dim(format!(
            "info_nce: code dim {d} vs queue dim {}",
            queue.dim()
        )));
    }
    let inv_t = T::one() / t.get();
    let negatives = queue.as_matrix()?; // (n, d) constant
    let n_neg = negatives.shape()[0];
    // transpose to (d, n) for q·Qᵀ
    let mut qt = vec![T::zero(); d * n_neg];
    for i in 0..n_neg {
        for j in 0..d {
            qt[j * n_neg + i] = negatives.data()[i * d + j];
        }
    }
    let qt = Tensor::new(&[d, n_neg], qt)?;

    let pos = q.row_dot(k)?.scale(inv_t)?; // (B,)
    let neg = q.matmul(&qt)?.scale(inv_t)?; // (B,n)

    // per-row shift for stability; a constant, so it cancels in the gradient
    let mut shift = vec![T::zero(); bsz];
    for i in 0..bsz {
        let mut m = pos.data()[i];
        for v in &neg.data()[i * n_neg..(i + 1) * n_neg] {
            if *v > m {
                m = *v;
            }
        }
        shift[i] = m;
    }
    let shift_vec = Tensor::new(&[bsz], shift.clone())?;
    let mut shift_mat = Vec::with_capacity(bsz * n_neg);
    for s in &shift {
        shift_mat.extend(std::iter::repeat(*s).take(n_neg));
    }
    let shift_mat = Tensor::new(&[bsz, n_neg], shift_mat)?;

    let pos_sh = pos.sub(&shift_vec)?;
    let neg_sum = neg.sub(&shift_mat)?.exp()?.sum_axis1()?; // (B,)
    let denom = match convention {
        InfoNceConvention::Moco | InfoNceConvention::Dasr => pos_sh.exp()?.add(&neg_sum)?,
        InfoNceConvention::Literal => neg_sum,
    };
    denom.log()?.sub(&pos_sh)?.mean_all()
}

/// MSE between the batch-averaged gram matrices of k and q.
pub fn content_loss<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>) -> Result<Tensor<T>> {
    if q.shape() != k.shape() {
        return Err(Error::dim(format!(
            "content_loss: q {:?} vs k {:?}",
            q.shape(),
            k.shape()
        )));
    }
    q.gram()?.mse_loss(&k.gram()?)
}

/// Style loss value plus whether the queue was warm enough to compute it.
pub struct StyleLoss<T: Scalar> {
    pub value: Tensor<T>,
    pub active: bool,
}

/// −(MSE(G(q1),G(q)) + MSE(G(q2),G(q))); always ≤ 0. Inactive (zero) while
/// q1/q2 are unavailable. `clamp` optionally floors the value at −clamp,
/// cutting the gradient when it saturates.
pub fn style_loss<T: Scalar>(
    q: &Tensor<T>,
    q1: Option<&Tensor<T>>,
    q2: Option<&Tensor<T>>,
    clamp: Option<T>,
) -> Result<StyleLoss<T>> {
    let (q1, q2) = match (q1, q2) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Ok(StyleLoss {
                value: Tensor::scalar(T::zero()),
                active: false,
            })
        }
    };
    if q1.shape() != q.shape() || q2.shape() != q.shape() {
        return Err(Error::dim(format!(
            "style_loss: q {:?}, q1 {:?}, q2 {:?}",
            q.shape(),
            q1.shape(),
            q2.shape()
        )));
    }
    let gq = q.gram()?;
    let a = q1.gram()?.mse_loss(&gq)?;
    let b = q2.gram()?.mse_loss(&gq)?;
    let value = a.add(&b)?.scale(-T::one())?;
    if let Some(c) = clamp {
        if value.item()? < -c {
            return Ok(StyleLoss {
                value: Tensor::scalar(-c),
                active: true,
            });
        }
    }
    Ok(StyleLoss {
        value,
        active: true,
    })
}

/// Encoder, momentum encoder, and the negative queue as one unit.
pub struct ConStyle<T: Scalar> {
    pub encoder: ConStyleEncoder<T>,
    pub momentum: ConStyleEncoder<T>,
    pub queue: NegativeQueue<T>,
}

impl<T: Scalar> ConStyle<T> {
    pub fn new(cfg: &ConStyleConfig, queue_capacity: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = ConStyleEncoder::new(cfg, &mut rng);
        let mut momentum = ConStyleEncoder::new(cfg, &mut rng);
        momentum.copy_from(&encoder)?;
        let queue = NegativeQueue::new(queue_capacity, cfg.latent_dim)?;
        Ok(ConStyle {
            encoder,
            momentum,
            queue,
        })
    }

    /// Total trainable values across both encoders.
    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.momentum.param_count()
    }
}
