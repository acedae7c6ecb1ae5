//! Forward operators. Each builds a new tensor recording its inputs; the
//! matching gradient rules live in `backward.rs`. Shapes are strict: no
//! broadcasting anywhere.

use ndarray::{Array2, ArrayView2};

use super::{Op, Scalar, Tensor};
use crate::error::{Error, Result};

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{what}: shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape(self, other, "add")?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| *a + *b)
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Add(self.clone(), other.clone()),
        )
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape(self, other, "sub")?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| *a - *b)
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Sub(self.clone(), other.clone()),
        )
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape(self, other, "mul")?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| *a * *b)
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Mul(self.clone(), other.clone()),
        )
    }

    pub fn scale(&self, c: T) -> Result<Tensor<T>> {
        let data = self.data().iter().map(|a| *a * c).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Scale(self.clone(), c))
    }

    pub fn add_scalar(&self, c: T) -> Result<Tensor<T>> {
        let data = self.data().iter().map(|a| *a + c).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::AddScalar(self.clone()))
    }

    pub fn leaky_relu(&self, negative_slope: T) -> Result<Tensor<T>> {
        let data = self
            .data()
            .iter()
            .map(|a| if *a >= T::zero() { *a } else { *a * negative_slope })
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::LeakyRelu(self.clone(), negative_slope),
        )
    }

    pub fn exp(&self) -> Result<Tensor<T>> {
        let data = self.data().iter().map(|a| a.exp()).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Exp(self.clone()))
    }

    pub fn log(&self) -> Result<Tensor<T>> {
        if let Some(v) = self.data().iter().find(|v| **v <= T::zero()) {
            return Err(Error::Domain(format!("log of non-positive value {v}")));
        }
        let data = self.data().iter().map(|a| a.ln()).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Log(self.clone()))
    }

    /// (m,k) x (k,n) -> (m,n)
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(Error::dim(format!("matmul: shapes {a:?} x {b:?}")));
        }
        let av = ArrayView2::from_shape((a[0], a[1]), self.data()).unwrap();
        let bv = ArrayView2::from_shape((b[0], b[1]), other.data()).unwrap();
        let out = av.dot(&bv);
        Tensor::from_op(
            vec![a[0], b[1]],
            out.into_raw_vec_and_offset().0,
            Op::MatMul(self.clone(), other.clone()),
        )
    }

    /// x (B,in) with w (out,in) and optional b (out): x·wᵀ + b.
    pub fn linear(&self, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let (xs, ws) = (self.shape(), w.shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::dim(format!("linear: x {xs:?} vs w {ws:?}")));
        }
        let (bsz, out_dim) = (xs[0], ws[0]);
        if let Some(b) = b {
            if b.shape() != [out_dim] {
                return Err(Error::dim(format!(
                    "linear: bias {:?} vs out dim {out_dim}",
                    b.shape()
                )));
            }
        }
        let xv = ArrayView2::from_shape((bsz, xs[1]), self.data()).unwrap();
        let wv = ArrayView2::from_shape((out_dim, ws[1]), w.data()).unwrap();
        let mut y = xv.dot(&wv.t());
        if let Some(b) = b {
            for mut row in y.rows_mut() {
                for (v, bv) in row.iter_mut().zip(b.data()) {
                    *v += *bv;
                }
            }
        }
        Tensor::from_op(
            vec![bsz, out_dim],
            y.into_raw_vec_and_offset().0,
            Op::Linear {
                x: self.clone(),
                w: w.clone(),
                b: b.cloned(),
            },
        )
    }

    /// Batch-averaged gram matrix of (B,d): xᵀx / B, shape (d,d).
    pub fn gram(&self) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::dim(format!("gram: expected 2-d, got {s:?}")));
        }
        let (bsz, d) = (s[0], s[1]);
        let xv = ArrayView2::from_shape((bsz, d), self.data()).unwrap();
        let g = xv.t().dot(&xv).mapv(|v| v / T::cast_f64(bsz as f64));
        Tensor::from_op(
            vec![d, d],
            g.into_raw_vec_and_offset().0,
            Op::Gram(self.clone()),
        )
    }

    /// Per-row dot product of two (B,d) tensors -> (B,).
    pub fn row_dot(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape(self, other, "row_dot")?;
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::dim(format!("row_dot: expected 2-d, got {s:?}")));
        }
        let (bsz, d) = (s[0], s[1]);
        let mut out = vec![T::zero(); bsz];
        for i in 0..bsz {
            let mut acc = T::zero();
            for j in 0..d {
                acc += self.data()[i * d + j] * other.data()[i * d + j];
            }
            out[i] = acc;
        }
        Tensor::from_op(vec![bsz], out, Op::RowDot(self.clone(), other.clone()))
    }

    /// Dot product of two vectors -> scalar.
    pub fn dot(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape(self, other, "dot")?;
        if self.shape().len() != 1 {
            return Err(Error::dim(format!(
                "dot: expected vectors, got {:?}",
                self.shape()
            )));
        }
        let mut acc = T::zero();
        for (a, b) in self.data().iter().zip(other.data()) {
            acc += *a * *b;
        }
        Tensor::from_op(vec![], vec![acc], Op::Dot(self.clone(), other.clone()))
    }

    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<T>> {
        let (is, ws) = (self.shape(), weight.shape());
        if is.len() != 4 || ws.len() != 4 {
            return Err(Error::dim(format!("conv2d: input {is:?}, weight {ws:?}")));
        }
        if is[1] != ws[1] {
            return Err(Error::dim(format!(
                "conv2d: input channels {} != weight in-channels {} (input {is:?}, weight {ws:?})",
                is[1], ws[1]
            )));
        }
        if stride < 1 {
            return Err(Error::Contract("conv2d: stride must be >= 1".into()));
        }
        let (kh, kw) = (ws[2], ws[3]);
        if is[2] + 2 * padding < kh || is[3] + 2 * padding < kw {
            return Err(Error::dim(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {is:?} (pad {padding})"
            )));
        }
        if let Some(b) = bias {
            if b.shape() != [ws[0]] {
                return Err(Error::dim(format!(
                    "conv2d: bias {:?} vs out channels {}",
                    b.shape(),
                    ws[0]
                )));
            }
        }
        let (out, oshape) = conv2d_forward(
            self.data(),
            is,
            weight.data(),
            ws,
            bias.map(|b| b.data()),
            stride,
            padding,
        );
        Tensor::from_op(
            oshape,
            out,
            Op::Conv2d {
                input: self.clone(),
                weight: weight.clone(),
                bias: bias.cloned(),
                stride,
                padding,
            },
        )
    }

    /// (N, C·r², H, W) -> (N, C, H·r, W·r)
    pub fn pixel_shuffle(&self, r: usize) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 4 || s[1] % (r * r) != 0 {
            return Err(Error::dim(format!(
                "pixel_shuffle: channels of {s:?} not divisible by r²={}",
                r * r
            )));
        }
        let oshape = vec![s[0], s[1] / (r * r), s[2] * r, s[3] * r];
        let data = shuffle_forward(self.data(), s, r);
        Tensor::from_op(oshape, data, Op::PixelShuffle(self.clone(), r))
    }

    /// (N, C, H·r, W·r) -> (N, C·r², H, W)
    pub fn pixel_unshuffle(&self, r: usize) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 4 || s[2] % r != 0 || s[3] % r != 0 {
            return Err(Error::dim(format!(
                "pixel_unshuffle: spatial dims of {s:?} not divisible by r={r}"
            )));
        }
        let oshape = vec![s[0], s[1] * r * r, s[2] / r, s[3] / r];
        let data = unshuffle_forward(self.data(), s, r);
        Tensor::from_op(oshape, data, Op::PixelUnshuffle(self.clone(), r))
    }

    /// (N,C,H,W) -> (N,C): mean over the spatial extent.
    pub fn global_avg_pool(&self) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::dim(format!("global_avg_pool: got {s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let hw = T::cast_f64((h * w) as f64);
        let mut out = vec![T::zero(); n * c];
        for i in 0..n * c {
            let mut acc = T::zero();
            for v in &self.data()[i * h * w..(i + 1) * h * w] {
                acc += *v;
            }
            out[i] = acc / hw;
        }
        Tensor::from_op(vec![n, c], out, Op::GlobalAvgPool(self.clone()))
    }

    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        if parts.is_empty() {
            return Err(Error::Contract("concat: no inputs".into()));
        }
        let rank = parts[0].shape().len();
        if axis >= rank {
            return Err(Error::dim(format!("concat: axis {axis} out of rank {rank}")));
        }
        for p in parts {
            if p.shape().len() != rank {
                return Err(Error::dim("concat: rank mismatch"));
            }
            for (ax, (a, b)) in parts[0].shape().iter().zip(p.shape()).enumerate() {
                if ax != axis && a != b {
                    return Err(Error::dim(format!(
                        "concat: shapes {:?} vs {:?} differ off-axis",
                        parts[0].shape(),
                        p.shape()
                    )));
                }
            }
        }
        let mut oshape = parts[0].shape().to_vec();
        oshape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        let outer: usize = oshape[..axis].iter().product();
        let inner: usize = oshape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(oshape.iter().product());
        for o in 0..outer {
            for p in parts {
                let span = p.shape()[axis] * inner;
                out.extend_from_slice(&p.data()[o * span..(o + 1) * span]);
            }
        }
        Tensor::from_op(oshape, out, Op::Concat(parts.to_vec(), axis))
    }

    pub fn sum_all(&self) -> Result<Tensor<T>> {
        let mut acc = T::zero();
        for v in self.data() {
            acc += *v;
        }
        Tensor::from_op(vec![], vec![acc], Op::SumAll(self.clone()))
    }

    pub fn mean_all(&self) -> Result<Tensor<T>> {
        let n = T::cast_f64(self.numel() as f64);
        let mut acc = T::zero();
        for v in self.data() {
            acc += *v;
        }
        Tensor::from_op(vec![], vec![acc / n], Op::MeanAll(self.clone()))
    }

    /// (B,N) -> (B,): sum over the second axis.
    pub fn sum_axis1(&self) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::dim(format!("sum_axis1: expected 2-d, got {s:?}")));
        }
        let (bsz, n) = (s[0], s[1]);
        let mut out = vec![T::zero(); bsz];
        for i in 0..bsz {
            let mut acc = T::zero();
            for v in &self.data()[i * n..(i + 1) * n] {
                acc += *v;
            }
            out[i] = acc;
        }
        Tensor::from_op(vec![bsz], out, Op::SumAxis1(self.clone()))
    }

    /// Mean absolute error over all elements.
    pub fn l1_loss(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape(self, other, "l1_loss")?;
        let n = T::cast_f64(self.numel() as f64);
        let mut acc = T::zero();
        for (a, b) in self.data().iter().zip(other.data()) {
            acc += (*a - *b).abs();
        }
        Tensor::from_op(
            vec![],
            vec![acc / n],
            Op::L1Loss(self.clone(), other.clone()),
        )
    }

    /// Mean squared error over all elements.
    pub fn mse_loss(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape(self, other, "mse_loss")?;
        let n = T::cast_f64(self.numel() as f64);
        let mut acc = T::zero();
        for (a, b) in self.data().iter().zip(other.data()) {
            let d = *a - *b;
            acc += d * d;
        }
        Tensor::from_op(
            vec![],
            vec![acc / n],
            Op::MseLoss(self.clone(), other.clone()),
        )
    }

    pub fn frobenius_norm(&self) -> Result<Tensor<T>> {
        let mut acc = T::zero();
        for v in self.data() {
            acc += *v * *v;
        }
        Tensor::from_op(vec![], vec![acc.sqrt()], Op::FrobeniusNorm(self.clone()))
    }

    /// L2-normalize each row of a (B,d) tensor.
    pub fn normalize_rows(&self) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::dim(format!(
                "normalize_rows: expected 2-d, got {s:?}"
            )));
        }
        let (bsz, d) = (s[0], s[1]);
        let mut out = vec![T::zero(); bsz * d];
        for i in 0..bsz {
            let row = &self.data()[i * d..(i + 1) * d];
            let mut nrm = T::zero();
            for v in row {
                nrm += *v * *v;
            }
            let nrm = nrm.sqrt();
            if nrm <= T::zero() {
                return Err(Error::Domain(format!("normalize_rows: zero row {i}")));
            }
            for (o, v) in out[i * d..(i + 1) * d].iter_mut().zip(row) {
                *o = *v / nrm;
            }
        }
        Tensor::from_op(s.to_vec(), out, Op::NormalizeRows(self.clone()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::dim(format!(
                "reshape: {:?} -> {shape:?}",
                self.shape()
            )));
        }
        Tensor::from_op(shape.to_vec(), self.data().to_vec(), Op::Reshape(self.clone()))
    }

    /// (N,C,1,1) -> (N,C,h,w) by repetition.
    pub fn broadcast_spatial(&self, h: usize, w: usize) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 4 || s[2] != 1 || s[3] != 1 {
            return Err(Error::dim(format!("broadcast_spatial: got {s:?}")));
        }
        let (n, c) = (s[0], s[1]);
        let mut out = Vec::with_capacity(n * c * h * w);
        for v in self.data() {
            out.extend(std::iter::repeat(*v).take(h * w));
        }
        Tensor::from_op(vec![n, c, h, w], out, Op::BroadcastSpatial(self.clone()))
    }
}

pub(crate) fn conv_out_size(dim: usize, k: usize, stride: usize, padding: usize) -> usize {
    (dim + 2 * padding - k) / stride + 1
}

/// im2col over one sample: (C,H,W) -> (C·kh·kw, oh·ow)
pub(crate) fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Array2<T> {
    let oh = conv_out_size(h, kh, stride, padding);
    let ow = conv_out_size(w, kw, stride, padding);
    let mut col = Array2::<T>::zeros((c * kh * kw, oh * ow));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[[row, oy * ow + ox]] = x[(ci * h + iy as usize) * w + ix as usize];
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add of a column matrix back to (C,H,W); the adjoint of im2col.
pub(crate) fn col2im_add<T: Scalar>(
    col: &Array2<T>,
    dx: &mut [T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) {
    let oh = conv_out_size(h, kh, stride, padding);
    let ow = conv_out_size(w, kw, stride, padding);
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[(ci * h + iy as usize) * w + ix as usize] += col[[row, oy * ow + ox]];
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_forward<T: Scalar>(
    input: &[T],
    is: &[usize],
    weight: &[T],
    ws: &[usize],
    bias: Option<&[T]>,
    stride: usize,
    padding: usize,
) -> (Vec<T>, Vec<usize>) {
    let (n, c, h, w) = (is[0], is[1], is[2], is[3]);
    let (o, kh, kw) = (ws[0], ws[2], ws[3]);
    let oh = conv_out_size(h, kh, stride, padding);
    let ow = conv_out_size(w, kw, stride, padding);
    let wmat = ArrayView2::from_shape((o, c * kh * kw), weight).unwrap();
    let mut out = vec![T::zero(); n * o * oh * ow];
    for ni in 0..n {
        let col = im2col(
            &input[ni * c * h * w..(ni + 1) * c * h * w],
            c,
            h,
            w,
            kh,
            kw,
            stride,
            padding,
        );
        let y = wmat.dot(&col); // (o, oh*ow)
        let dst = &mut out[ni * o * oh * ow..(ni + 1) * o * oh * ow];
        for (d, v) in dst.iter_mut().zip(y.iter()) {
            *d = *v;
        }
        if let Some(b) = bias {
            for oi in 0..o {
                for v in dst[oi * oh * ow..(oi + 1) * oh * ow].iter_mut() {
                    *v += b[oi];
                }
            }
        }
    }
    (out, vec![n, o, oh, ow])
}

/// out[n][c][y·r+i][x·r+j] = in[n][c·r²+i·r+j][y][x]
pub(crate) fn shuffle_forward<T: Scalar>(x: &[T], s: &[usize], r: usize) -> Vec<T> {
    let (n, ci, h, w) = (s[0], s[1], s[2], s[3]);
    let co = ci / (r * r);
    let (ho, wo) = (h * r, w * r);
    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        for c in 0..co {
            for i in 0..r {
                for j in 0..r {
                    let cin = c * r * r + i * r + j;
                    for y in 0..h {
                        for xx in 0..w {
                            let src = ((ni * ci + cin) * h + y) * w + xx;
                            let dst = ((ni * co + c) * ho + y * r + i) * wo + xx * r + j;
                            out[dst] = x[src];
                        }
                    }
                }
            }
        }
    }
    out
}

/// out[n][c·r²+i·r+j][y][x] = in[n][c][y·r+i][x·r+j]
pub(crate) fn unshuffle_forward<T: Scalar>(x: &[T], s: &[usize], r: usize) -> Vec<T> {
    let (n, ci, h, w) = (s[0], s[1], s[2], s[3]);
    let co = ci * r * r;
    let (ho, wo) = (h / r, w / r);
    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        for c in 0..ci {
            for i in 0..r {
                for j in 0..r {
                    let cout = c * r * r + i * r + j;
                    for y in 0..ho {
                        for xx in 0..wo {
                            let src = ((ni * ci + c) * h + y * r + i) * w + xx * r + j;
                            let dst = ((ni * co + cout) * ho + y) * wo + xx;
                            out[dst] = x[src];
                        }
                    }
                }
            }
        }
    }
    out
}
