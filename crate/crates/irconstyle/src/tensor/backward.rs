//! Reverse pass: one walk over the recorded graph in reverse topological
//! order, accumulating gradients into every reachable variable.

use std::collections::{HashMap, HashSet};

use ndarray::ArrayView2;

use super::ops::{col2im_add, conv_out_size, im2col, shuffle_forward, unshuffle_forward};
use super::{op_inputs, Op, Scalar, Tensor};
use crate::error::{Error, Result};

impl<T: Scalar> Tensor<T> {
    /// Populate gradients on all variables reachable from this scalar.
    /// Repeated calls accumulate until `clear_grad`.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape()
            )));
        }
        let order = topo_order(self);
        let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
        grads.insert(self.id(), vec![T::one()]);

        for node in order.iter().rev() {
            let g = match grads.remove(&node.id()) {
                Some(g) => g,
                None => continue,
            };
            if node.is_variable() {
                node.accumulate_grad(&g);
            }
            propagate(node, &g, &mut grads);
        }
        Ok(())
    }
}

fn topo_order<T: Scalar>(root: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    // (node, expanded) pairs; post-order emit
    let mut stack = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !visited.insert(node.id()) {
            continue;
        }
        let inputs = op_inputs(node.op());
        stack.push((node.clone(), true));
        for inp in inputs {
            if inp.tracked() && !visited.contains(&inp.id()) {
                stack.push((inp, false));
            }
        }
    }
    order
}

fn accumulate<T: Scalar>(grads: &mut HashMap<u64, Vec<T>>, t: &Tensor<T>, g: Vec<T>) {
    if !t.tracked() {
        return;
    }
    match grads.get_mut(&t.id()) {
        Some(buf) => {
            for (b, v) in buf.iter_mut().zip(&g) {
                *b += *v;
            }
        }
        None => {
            grads.insert(t.id(), g);
        }
    }
}

fn propagate<T: Scalar>(node: &Tensor<T>, g: &[T], grads: &mut HashMap<u64, Vec<T>>) {
    match node.op() {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, a, g.to_vec());
            accumulate(grads, b, g.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(grads, a, g.to_vec());
            accumulate(grads, b, g.iter().map(|v| -*v).collect());
        }
        Op::Mul(a, b) => {
            accumulate(
                grads,
                a,
                g.iter().zip(b.data()).map(|(g, b)| *g * *b).collect(),
            );
            accumulate(
                grads,
                b,
                g.iter().zip(a.data()).map(|(g, a)| *g * *a).collect(),
            );
        }
        Op::Scale(a, c) => {
            accumulate(grads, a, g.iter().map(|v| *v * *c).collect());
        }
        Op::AddScalar(a) => {
            accumulate(grads, a, g.to_vec());
        }
        Op::LeakyRelu(a, s) => {
            accumulate(
                grads,
                a,
                g.iter()
                    .zip(a.data())
                    .map(|(g, x)| if *x >= T::zero() { *g } else { *g * *s })
                    .collect(),
            );
        }
        Op::Exp(a) => {
            accumulate(
                grads,
                a,
                g.iter().zip(node.data()).map(|(g, y)| *g * *y).collect(),
            );
        }
        Op::Log(a) => {
            accumulate(
                grads,
                a,
                g.iter().zip(a.data()).map(|(g, x)| *g / *x).collect(),
            );
        }
        Op::MatMul(a, b) => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            let gv = ArrayView2::from_shape((m, n), g).unwrap();
            let av = ArrayView2::from_shape((m, k), a.data()).unwrap();
            let bv = ArrayView2::from_shape((k, n), b.data()).unwrap();
            accumulate(grads, a, gv.dot(&bv.t()).into_raw_vec_and_offset().0);
            accumulate(grads, b, av.t().dot(&gv).into_raw_vec_and_offset().0);
        }
        Op::Linear { x, w, b } => {
            let (bsz, in_dim) = (x.shape()[0], x.shape()[1]);
            let out_dim = w.shape()[0];
            let gv = ArrayView2::from_shape((bsz, out_dim), g).unwrap();
            let xv = ArrayView2::from_shape((bsz, in_dim), x.data()).unwrap();
            let wv = ArrayView2::from_shape((out_dim, in_dim), w.data()).unwrap();
            accumulate(grads, x, gv.dot(&wv).into_raw_vec_and_offset().0);
            accumulate(grads, w, gv.t().dot(&xv).into_raw_vec_and_offset().0);
            if let Some(b) = b {
                let mut db = vec![T::zero(); out_dim];
                for row in 0..bsz {
                    for (d, v) in db.iter_mut().zip(&g[row * out_dim..(row + 1) * out_dim]) {
                        *d += *v;
                    }
                }
                accumulate(grads, b, db);
            }
        }
        Op::Gram(x) => {
            // G = xᵀx/B  =>  dX = x·(dG + dGᵀ)/B
            let (bsz, d) = (x.shape()[0], x.shape()[1]);
            let gv = ArrayView2::from_shape((d, d), g).unwrap();
            let sym = &gv + &gv.t();
            let xv = ArrayView2::from_shape((bsz, d), x.data()).unwrap();
            let inv_b = T::cast_f64(1.0 / bsz as f64);
            let dx = xv.dot(&sym).mapv(|v| v * inv_b);
            accumulate(grads, x, dx.into_raw_vec_and_offset().0);
        }
        Op::RowDot(a, b) => {
            let (bsz, d) = (a.shape()[0], a.shape()[1]);
            let mut da = vec![T::zero(); bsz * d];
            let mut db = vec![T::zero(); bsz * d];
            for i in 0..bsz {
                for j in 0..d {
                    da[i * d + j] = g[i] * b.data()[i * d + j];
                    db[i * d + j] = g[i] * a.data()[i * d + j];
                }
            }
            accumulate(grads, a, da);
            accumulate(grads, b, db);
        }
        Op::Dot(a, b) => {
            let g0 = g[0];
            accumulate(grads, a, b.data().iter().map(|v| g0 * *v).collect());
            accumulate(grads, b, a.data().iter().map(|v| g0 * *v).collect());
        }
        Op::Conv2d {
            input,
            weight,
            bias,
            stride,
            padding,
        } => {
            conv2d_backward(node, input, weight, bias.as_ref(), *stride, *padding, g, grads);
        }
        Op::PixelShuffle(x, r) => {
            accumulate(grads, x, unshuffle_forward(g, node.shape(), *r));
        }
        Op::PixelUnshuffle(x, r) => {
            accumulate(grads, x, shuffle_forward(g, node.shape(), *r));
        }
        Op::GlobalAvgPool(x) => {
            let s = x.shape();
            let hw = s[2] * s[3];
            let inv = T::cast_f64(1.0 / hw as f64);
            let mut dx = Vec::with_capacity(x.numel());
            for v in g {
                dx.extend(std::iter::repeat(*v * inv).take(hw));
            }
            accumulate(grads, x, dx);
        }
        Op::Concat(parts, axis) => {
            let oshape = node.shape();
            let outer: usize = oshape[..*axis].iter().product();
            let inner: usize = oshape[*axis + 1..].iter().product();
            let total_span = oshape[*axis] * inner;
            let mut offset = 0;
            for p in parts {
                let span = p.shape()[*axis] * inner;
                let mut dp = Vec::with_capacity(p.numel());
                for o in 0..outer {
                    let start = o * total_span + offset;
                    dp.extend_from_slice(&g[start..start + span]);
                }
                accumulate(grads, p, dp);
                offset += span;
            }
        }
        Op::SumAll(x) => {
            accumulate(grads, x, vec![g[0]; x.numel()]);
        }
        Op::MeanAll(x) => {
            let v = g[0] * T::cast_f64(1.0 / x.numel() as f64);
            accumulate(grads, x, vec![v; x.numel()]);
        }
        Op::SumAxis1(x) => {
            let (bsz, n) = (x.shape()[0], x.shape()[1]);
            let mut dx = Vec::with_capacity(bsz * n);
            for i in 0..bsz {
                dx.extend(std::iter::repeat(g[i]).take(n));
            }
            accumulate(grads, x, dx);
        }
        Op::L1Loss(a, b) => {
            let scale = g[0] * T::cast_f64(1.0 / a.numel() as f64);
            let da: Vec<T> = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| {
                    let d = *x - *y;
                    if d > T::zero() {
                        scale
                    } else if d < T::zero() {
                        -scale
                    } else {
                        T::zero()
                    }
                })
                .collect();
            accumulate(grads, b, da.iter().map(|v| -*v).collect());
            accumulate(grads, a, da);
        }
        Op::MseLoss(a, b) => {
            let scale = g[0] * T::cast_f64(2.0 / a.numel() as f64);
            let da: Vec<T> = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| scale * (*x - *y))
                .collect();
            accumulate(grads, b, da.iter().map(|v| -*v).collect());
            accumulate(grads, a, da);
        }
        Op::FrobeniusNorm(x) => {
            let norm = node.data()[0];
            if norm > T::zero() {
                let s = g[0] / norm;
                accumulate(grads, x, x.data().iter().map(|v| s * *v).collect());
            }
        }
        Op::NormalizeRows(x) => {
            let (bsz, d) = (x.shape()[0], x.shape()[1]);
            let y = node.data();
            let mut dx = vec![T::zero(); bsz * d];
            for i in 0..bsz {
                let xr = &x.data()[i * d..(i + 1) * d];
                let yr = &y[i * d..(i + 1) * d];
                let gr = &g[i * d..(i + 1) * d];
                let mut nrm = T::zero();
                for v in xr {
                    nrm += *v * *v;
                }
                let nrm = nrm.sqrt();
                let mut gy = T::zero();
                for (gv, yv) in gr.iter().zip(yr) {
                    gy += *gv * *yv;
                }
                for j in 0..d {
                    dx[i * d + j] = (gr[j] - gy * yr[j]) / nrm;
                }
            }
            accumulate(grads, x, dx);
        }
        Op::Reshape(x) => {
            accumulate(grads, x, g.to_vec());
        }
        Op::BroadcastSpatial(x) => {
            let s = node.shape();
            let hw = s[2] * s[3];
            let mut dx = vec![T::zero(); x.numel()];
            for (i, d) in dx.iter_mut().enumerate() {
                for v in &g[i * hw..(i + 1) * hw] {
                    *d += *v;
                }
            }
            accumulate(grads, x, dx);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward<T: Scalar>(
    node: &Tensor<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    g: &[T],
    grads: &mut HashMap<u64, Vec<T>>,
) {
    let is = input.shape();
    let ws = weight.shape();
    let (n, c, h, w) = (is[0], is[1], is[2], is[3]);
    let (o, kh, kw) = (ws[0], ws[2], ws[3]);
    let oh = conv_out_size(h, kh, stride, padding);
    let ow = conv_out_size(w, kw, stride, padding);
    let _ = node;

    let wmat = ArrayView2::from_shape((o, c * kh * kw), weight.data()).unwrap();
    let need_dx = input.tracked();
    let need_dw = weight.tracked();
    let mut dx = if need_dx {
        vec![T::zero(); input.numel()]
    } else {
        Vec::new()
    };
    let mut dw = ndarray::Array2::<T>::zeros((o, c * kh * kw));

    for ni in 0..n {
        let gy = ArrayView2::from_shape((o, oh * ow), &g[ni * o * oh * ow..(ni + 1) * o * oh * ow])
            .unwrap();
        if need_dw {
            let col = im2col(
                &input.data()[ni * c * h * w..(ni + 1) * c * h * w],
                c,
                h,
                w,
                kh,
                kw,
                stride,
                padding,
            );
            dw = dw + gy.dot(&col.t());
        }
        if need_dx {
            let dcol = wmat.t().dot(&gy); // (c·kh·kw, oh·ow)
            col2im_add(
                &dcol,
                &mut dx[ni * c * h * w..(ni + 1) * c * h * w],
                c,
                h,
                w,
                kh,
                kw,
                stride,
                padding,
            );
        }
    }
    if need_dx {
        accumulate(grads, input, dx);
    }
    if need_dw {
        accumulate(grads, weight, dw.into_raw_vec_and_offset().0);
    }
    if let Some(b) = bias {
        if b.tracked() {
            let mut db = vec![T::zero(); o];
            for ni in 0..n {
                for oi in 0..o {
                    let base = (ni * o + oi) * oh * ow;
                    for v in &g[base..base + oh * ow] {
                        db[oi] += *v;
                    }
                }
            }
            accumulate(grads, b, db);
        }
    }
}
