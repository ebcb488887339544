//! Dense kernels: same-padded convolution, 2×2 max-pooling, ReLU, inverted
//! dropout, fully-connected transform and softmax cross-entropy, each with its
//! exact backward pass.
//!
//! Convolution is cross-correlation (filters are not flipped). Activations are
//! `(batch, channels, rows, cols)`; filter banks are `(out, in, d, d)`.

use rand::Rng;

use crate::error::{contract, Error, Result};
use crate::tensor::Tensor4;

/// Row-major `c = a·b + beta·c` where `a` is `m×k` and `b` is `k×n`.
/// `a_t`/`b_t` mean the operand is stored transposed (`k×m` / `n×k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover the strided extents asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn check_conv_shapes(input: [usize; 4], filters: [usize; 4], bias_len: usize) -> Result<()> {
    let [_, m, _, _] = input;
    let [n, fm, d, d2] = filters;
    contract!(d == d2, "filters must be square, got {d}×{d2}");
    contract!(d % 2 == 1, "filter size must be odd for same padding, got {d}");
    contract!(fm == m, "filter bank expects {fm} input planes, input has {m}");
    contract!(bias_len == n, "bias length {bias_len} does not match {n} output planes");
    Ok(())
}

/// Unfolds one zero-padded sample `(m, h, w)` into `(m·d·d) × (h·w)` columns.
fn im2col(sample: &[f64], m: usize, h: usize, w: usize, d: usize, cols: &mut [f64]) {
    let pad = (d / 2) as isize;
    let hw = h * w;
    let mut row = 0;
    for k in 0..m {
        let plane = &sample[k * hw..(k + 1) * hw];
        for u in 0..d {
            for v in 0..d {
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dx = v as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let iy = y as isize + u as isize - pad;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if iy < 0 || iy >= h as isize || x_lo >= x_hi {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    out[..x_lo].fill(0.0);
                    let sx = (x_lo as isize + dx) as usize;
                    out[x_lo..x_hi].copy_from_slice(&src[sx..sx + (x_hi - x_lo)]);
                    out[x_hi..].fill(0.0);
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into a `(m, h, w)` sample.
fn col2im(cols: &[f64], m: usize, h: usize, w: usize, d: usize, sample: &mut [f64]) {
    let pad = (d / 2) as isize;
    let hw = h * w;
    let mut row = 0;
    for k in 0..m {
        let plane = &mut sample[k * hw..(k + 1) * hw];
        for u in 0..d {
            for v in 0..d {
                let src = &cols[row * hw..(row + 1) * hw];
                let dx = v as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let iy = y as isize + u as isize - pad;
                    if iy < 0 || iy >= h as isize || x_lo >= x_hi {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let sx = (x_lo as isize + dx) as usize;
                    for (o, g) in dst[sx..sx + (x_hi - x_lo)]
                        .iter_mut()
                        .zip(&src[y * w + x_lo..y * w + x_hi])
                    {
                        *o += g;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Same-padded 2-D convolution: `out[b,l,y,x] = bias[l] + Σ in_pad[b,k,y+u,x+v]·f[l,k,u,v]`.
pub fn conv2d_same(input: &Tensor4, filters: &Tensor4, bias: &[f64]) -> Result<Tensor4> {
    check_conv_shapes(input.dims(), filters.dims(), bias.len())?;
    let [b, m, h, w] = input.dims();
    let [n, _, d, _] = filters.dims();
    let (hw, kk) = (h * w, m * d * d);
    let mut out = Tensor4::zeros([b, n, h, w]);
    let mut cols = vec![0.0; kk * hw];
    for s in 0..b {
        im2col(input.item(s), m, h, w, d, &mut cols);
        let dst = out.item_mut(s);
        for (l, &bl) in bias.iter().enumerate() {
            dst[l * hw..(l + 1) * hw].fill(bl);
        }
        gemm(n, kk, hw, filters.data(), false, &cols, false, 1.0, dst);
    }
    Ok(out)
}

/// Gradients of [`conv2d_same`].
#[derive(Clone, Debug)]
pub struct ConvGrads {
    /// `None` when the caller asked to skip the input gradient.
    pub input: Option<Tensor4>,
    pub filters: Tensor4,
    pub bias: Vec<f64>,
}

pub fn conv2d_same_backward(
    input: &Tensor4,
    filters: &Tensor4,
    grad_out: &Tensor4,
    need_input_grad: bool,
) -> Result<ConvGrads> {
    check_conv_shapes(input.dims(), filters.dims(), filters.dims()[0])?;
    let [b, m, h, w] = input.dims();
    let [n, _, d, _] = filters.dims();
    contract!(
        grad_out.dims() == [b, n, h, w],
        "upstream gradient dims {:?} do not match forward output {:?}",
        grad_out.dims(),
        [b, n, h, w]
    );
    let (hw, kk) = (h * w, m * d * d);
    let mut g_filters = Tensor4::zeros(filters.dims());
    let mut g_bias = vec![0.0; n];
    let mut g_input = need_input_grad.then(|| Tensor4::zeros(input.dims()));
    let mut cols = vec![0.0; kk * hw];
    let mut g_cols = vec![0.0; kk * hw];
    for s in 0..b {
        let go = grad_out.item(s);
        for (l, gb) in g_bias.iter_mut().enumerate() {
            *gb += go[l * hw..(l + 1) * hw].iter().sum::<f64>();
        }
        im2col(input.item(s), m, h, w, d, &mut cols);
        gemm(n, hw, kk, go, false, &cols, true, 1.0, g_filters.data_mut());
        if let Some(gi) = g_input.as_mut() {
            gemm(kk, n, hw, filters.data(), true, go, false, 0.0, &mut g_cols);
            col2im(&g_cols, m, h, w, d, gi.item_mut(s));
        }
    }
    Ok(ConvGrads {
        input: g_input,
        filters: g_filters,
        bias: g_bias,
    })
}

/// Argmax bookkeeping from [`maxpool2`], consumed by [`maxpool2_backward`].
#[derive(Clone, Debug)]
pub struct PoolIndex {
    input_dims: [usize; 4],
    argmax: Vec<usize>,
}

/// Non-overlapping 2×2 max-pooling with stride 2.
pub fn maxpool2(input: &Tensor4) -> Result<(Tensor4, PoolIndex)> {
    let [b, c, h, w] = input.dims();
    contract!(h % 2 == 0 && w % 2 == 0, "max-pooling needs even spatial dims, got {h}×{w}");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor4::zeros([b, c, oh, ow]);
    let mut argmax = Vec::with_capacity(out.len());
    let src = input.data();
    let mut o = 0;
    for plane in 0..b * c {
        let base = plane * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = base + 2 * y * w + 2 * x;
                for idx in [
                    base + 2 * y * w + 2 * x + 1,
                    base + (2 * y + 1) * w + 2 * x,
                    base + (2 * y + 1) * w + 2 * x + 1,
                ] {
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                out.data_mut()[o] = src[best];
                argmax.push(best);
                o += 1;
            }
        }
    }
    Ok((
        out,
        PoolIndex {
            input_dims: input.dims(),
            argmax,
        },
    ))
}

pub fn maxpool2_backward(index: &PoolIndex, grad_out: &Tensor4) -> Result<Tensor4> {
    let [b, c, h, w] = index.input_dims;
    contract!(
        grad_out.dims() == [b, c, h / 2, w / 2],
        "pooling gradient dims {:?} do not match forward output",
        grad_out.dims()
    );
    let mut g = Tensor4::zeros(index.input_dims);
    for (&src, &gv) in index.argmax.iter().zip(grad_out.data()) {
        g.data_mut()[src] += gv;
    }
    Ok(g)
}

pub fn relu(x: &Tensor4) -> Tensor4 {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

/// Gradient of ReLU given the forward *input*; zero wherever the input was negative.
pub fn relu_backward(input: &Tensor4, grad_out: &Tensor4) -> Result<Tensor4> {
    contract!(
        input.dims() == grad_out.dims(),
        "relu gradient dims {:?} vs input {:?}",
        grad_out.dims(),
        input.dims()
    );
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor4::from_vec(input.dims(), data)
}

/// Survivor scale factors (`0` or `1/(1-rate)`); `None` in eval mode.
#[derive(Clone, Debug)]
pub struct DropoutMask {
    dims: [usize; 4],
    scale: Option<Vec<f64>>,
}

pub fn check_dropout_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    Ok(())
}

/// Inverted dropout. Identity when `train` is false or `rate` is 0.
pub fn dropout<R: Rng + ?Sized>(
    input: &Tensor4,
    rate: f64,
    train: bool,
    rng: &mut R,
) -> Result<(Tensor4, DropoutMask)> {
    check_dropout_rate(rate)?;
    if !train || rate == 0.0 {
        return Ok((
            input.clone(),
            DropoutMask {
                dims: input.dims(),
                scale: None,
            },
        ));
    }
    let keep = 1.0 / (1.0 - rate);
    let scale: Vec<f64> = (0..input.len())
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let mut out = input.clone();
    out.data_mut()
        .iter_mut()
        .zip(&scale)
        .for_each(|(v, s)| *v *= s);
    Ok((
        out,
        DropoutMask {
            dims: input.dims(),
            scale: Some(scale),
        },
    ))
}

pub fn dropout_backward(mask: &DropoutMask, grad_out: &Tensor4) -> Result<Tensor4> {
    contract!(mask.dims == grad_out.dims(), "dropout gradient dims mismatch");
    let mut g = grad_out.clone();
    if let Some(scale) = &mask.scale {
        g.data_mut().iter_mut().zip(scale).for_each(|(v, s)| *v *= s);
    }
    Ok(g)
}

/// `out[b] = input[b]·W + bias` with `W` stored row-major as `p × q`.
/// The input is flattened per leading index, so conv activations can be fed directly.
pub fn fc_forward(input: &Tensor4, weights: &[f64], bias: &[f64]) -> Result<Tensor4> {
    let b = input.dims()[0];
    let p = input.len().checked_div(b).unwrap_or(0);
    let q = bias.len();
    contract!(
        weights.len() == p * q,
        "fc weights hold {} values, expected {p}×{q}",
        weights.len()
    );
    let mut out = Tensor4::zeros([b, q, 1, 1]);
    for row in out.data_mut().chunks_mut(q.max(1)) {
        row.copy_from_slice(bias);
    }
    gemm(b, p, q, input.data(), false, weights, false, 1.0, out.data_mut());
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct FcGrads {
    /// Same dims as the forward input.
    pub input: Tensor4,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn fc_backward(input: &Tensor4, weights: &[f64], grad_out: &Tensor4) -> Result<FcGrads> {
    let b = input.dims()[0];
    let p = input.len().checked_div(b).unwrap_or(0);
    let q = grad_out.dims()[1];
    contract!(
        grad_out.dims() == [b, q, 1, 1] && weights.len() == p * q,
        "fc gradient dims {:?} do not match input {:?} and {} weights",
        grad_out.dims(),
        input.dims(),
        weights.len()
    );
    let mut g_w = vec![0.0; p * q];
    gemm(p, b, q, input.data(), true, grad_out.data(), false, 0.0, &mut g_w);
    let mut g_in = Tensor4::zeros(input.dims());
    gemm(b, q, p, grad_out.data(), false, weights, true, 0.0, g_in.data_mut());
    let mut g_b = vec![0.0; q];
    for row in grad_out.data().chunks(q.max(1)) {
        g_b.iter_mut().zip(row).for_each(|(a, g)| *a += g);
    }
    Ok(FcGrads {
        input: g_in,
        weights: g_w,
        bias: g_b,
    })
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)` and its
/// gradient w.r.t. the logits. `logits` is `[b, C, 1, 1]`.
pub fn softmax_xent(logits: &Tensor4, labels: &[usize]) -> Result<(f64, Tensor4)> {
    let [b, c, _, _] = logits.dims();
    contract!(labels.len() == b, "{} labels for {b} logit rows", labels.len());
    contract!(logits.len() == b * c, "logits must be [b, C, 1, 1], got {:?}", logits.dims());
    let mut grad = Tensor4::zeros(logits.dims());
    let mut loss = 0.0;
    let inv_b = 1.0 / b.max(1) as f64;
    for (s, &label) in labels.iter().enumerate() {
        contract!(label < c, "label {label} out of range for {c} classes");
        let row = logits.item(s);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[label];
        let g = grad.item_mut(s);
        for (gi, &z) in g.iter_mut().zip(row) {
            *gi = (z - log_z).exp() * inv_b;
        }
        g[label] -= inv_b;
    }
    Ok((loss * inv_b, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(dims: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor4 {
        Tensor4::from_fn(dims, |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct evaluation of the convolution sum, no unfolding.
    fn conv_naive(input: &Tensor4, f: &Tensor4, bias: &[f64]) -> Tensor4 {
        let [b, m, h, w] = input.dims();
        let [n, _, d, _] = f.dims();
        let p = (d / 2) as isize;
        Tensor4::from_fn([b, n, h, w], |[s, l, y, x]| {
            let mut acc = bias[l];
            for k in 0..m {
                for u in 0..d {
                    for v in 0..d {
                        let iy = y as isize + u as isize - p;
                        let ix = x as isize + v as isize - p;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += input.at([s, k, iy as usize, ix as usize]) * f.at([l, k, u, v]);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_all_ones_counts_overlap() {
        let input = Tensor4::filled([1, 1, 3, 3], 1.0);
        let f = Tensor4::filled([1, 1, 3, 3], 1.0);
        let out = conv2d_same(&input, &f, &[0.0]).unwrap();
        assert_eq!(out.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn conv_zero_filter_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = random([2, 3, 4, 6], &mut rng);
        let out = conv2d_same(&input, &Tensor4::zeros([2, 3, 5, 5]), &[0.0, 0.0]).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_delta_filter_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = random([1, 1, 5, 5], &mut rng);
        let mut f = Tensor4::zeros([1, 1, 3, 3]);
        *f.at_mut([0, 0, 1, 1]) = 1.0;
        let out = conv2d_same(&input, &f, &[0.0]).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn conv_matches_naive_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(b, m, n, h, w, d) in &[(2, 3, 4, 6, 5, 3), (1, 2, 2, 7, 7, 5), (3, 1, 2, 4, 4, 1), (1, 1, 1, 3, 2, 5)] {
            let input = random([b, m, h, w], &mut rng);
            let f = random([n, m, d, d], &mut rng);
            let bias: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let fast = conv2d_same(&input, &f, &bias).unwrap();
            let slow = conv_naive(&input, &f, &bias);
            assert!(fast.max_abs_diff(&slow) < 1e-12);
        }
    }

    #[test]
    fn conv_rejects_mismatched_shapes() {
        let input = Tensor4::zeros([1, 2, 4, 4]);
        assert!(matches!(
            conv2d_same(&input, &Tensor4::zeros([1, 3, 3, 3]), &[0.0]),
            Err(Error::Contract(_))
        ));
        assert!(conv2d_same(&input, &Tensor4::zeros([1, 2, 2, 2]), &[0.0]).is_err());
        assert!(conv2d_same(&input, &Tensor4::zeros([1, 2, 3, 3]), &[0.0, 0.0]).is_err());
    }

    #[test]
    fn conv_backward_one_pixel_is_outer_product() {
        // 1×1 input, 1×1 filter: dL/df = x·g, dL/dx = f·g.
        let input = Tensor4::from_vec([1, 1, 1, 1], vec![3.0]).unwrap();
        let f = Tensor4::from_vec([2, 1, 1, 1], vec![0.5, -2.0]).unwrap();
        let g = Tensor4::from_vec([1, 2, 1, 1], vec![1.5, 4.0]).unwrap();
        let grads = conv2d_same_backward(&input, &f, &g, true).unwrap();
        assert_eq!(grads.filters.data(), &[4.5, 12.0]);
        assert_eq!(grads.bias, vec![1.5, 4.0]);
        assert_eq!(grads.input.unwrap().data(), &[0.5 * 1.5 - 2.0 * 4.0]);
    }

    #[test]
    fn conv_backward_rejects_wrong_upstream() {
        let input = Tensor4::zeros([1, 1, 4, 4]);
        let f = Tensor4::zeros([2, 1, 3, 3]);
        assert!(conv2d_same_backward(&input, &f, &Tensor4::zeros([1, 2, 2, 2]), true).is_err());
    }

    #[test]
    fn maxpool_examples() {
        let t = Tensor4::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(maxpool2(&t).unwrap().0.data(), &[4.0]);
        let c = Tensor4::filled([2, 3, 4, 6], 0.7);
        assert!(maxpool2(&c).unwrap().0.data().iter().all(|&v| v == 0.7));
        assert!(maxpool2(&Tensor4::zeros([1, 1, 3, 4])).is_err());
    }

    #[test]
    fn maxpool_matches_window_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = random([2, 2, 4, 4], &mut rng);
        let (out, _) = maxpool2(&t).unwrap();
        for s in 0..2 {
            for c in 0..2 {
                for y in 0..2 {
                    for x in 0..2 {
                        let mut m = f64::NEG_INFINITY;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                m = m.max(t.at([s, c, 2 * y + dy, 2 * x + dx]));
                            }
                        }
                        assert_eq!(out.at([s, c, y, x]), m);
                    }
                }
            }
        }
    }

    #[test]
    fn relu_and_backward() {
        let x = Tensor4::from_vec([1, 1, 1, 3], vec![-2.0, 3.0, -0.5]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 3.0, 0.0]);
        let g = Tensor4::filled([1, 1, 1, 3], 1.0);
        assert_eq!(relu_backward(&x, &g).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn dropout_identity_cases_and_bad_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random([2, 3, 2, 2], &mut rng);
        assert_eq!(dropout(&x, 0.0, true, &mut rng).unwrap().0, x);
        assert_eq!(dropout(&x, 0.5, false, &mut rng).unwrap().0, x);
        assert!(matches!(dropout(&x, 1.0, true, &mut rng), Err(Error::Config(_))));
        assert!(dropout(&x, -0.1, true, &mut rng).is_err());
    }

    #[test]
    fn softmax_uniform_logits() {
        let logits = Tensor4::filled([3, 10, 1, 1], 0.3);
        let (loss, grad) = softmax_xent(&logits, &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        // each row of the gradient sums to zero
        for s in 0..3 {
            assert!(grad.item(s).iter().sum::<f64>().abs() < 1e-15);
        }
    }

    #[test]
    fn fc_forward_small() {
        let x = Tensor4::from_vec([1, 2, 1, 1], vec![1.0, 2.0]).unwrap();
        let w = [1.0, 0.0, -1.0, 0.5, 1.0, 2.0];
        let out = fc_forward(&x, &w, &[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(out.data(), &[2.0, 3.0, 3.0]);
    }
}
