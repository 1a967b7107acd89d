//! Forward kernels and their adjoints.
//!
//! Image-like tensors use `H×W×C` layout; convolution kernels are
//! `k×k×Cin×Cout`. The adjoint functions take the upstream gradient and
//! return the gradient for each input, and are what [`super::Tape`] replays.

use super::Tensor;
use crate::error::{Result, TsmError};

/// Spatial padding for [`conv2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero fill so the output keeps the input's height and width.
    Same,
    /// No padding; the output shrinks by `k - 1`.
    Valid,
}

fn expect_rank(t: &Tensor, rank: usize, context: &str) -> Result<()> {
    if t.rank() != rank {
        return Err(TsmError::dim(
            context,
            format!("expected rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

struct ConvGeometry {
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    k: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

fn conv_geometry(input: &Tensor, kernels: &Tensor, bias: &Tensor, padding: Padding) -> Result<ConvGeometry> {
    expect_rank(input, 3, "conv2d input")?;
    expect_rank(kernels, 4, "conv2d kernels")?;
    let (h, w, cin) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let ks = kernels.shape();
    let (k, cout) = (ks[0], ks[3]);
    if ks[1] != k {
        return Err(TsmError::dim(
            "conv2d kernels",
            format!("kernel must be square, got {ks:?}"),
        ));
    }
    if ks[2] != cin {
        return Err(TsmError::dim(
            "conv2d",
            format!("input has {cin} channels but kernels expect {}", ks[2]),
        ));
    }
    if bias.shape() != [cout] {
        return Err(TsmError::dim(
            "conv2d bias",
            format!("expected [{cout}], got {:?}", bias.shape()),
        ));
    }
    let (pad, out_h, out_w) = match padding {
        Padding::Same => {
            if k % 2 == 0 {
                return Err(TsmError::dim(
                    "conv2d",
                    format!("same padding needs an odd kernel, got {k}"),
                ));
            }
            ((k - 1) / 2, h, w)
        }
        Padding::Valid => {
            if k > h || k > w {
                return Err(TsmError::dim("conv2d", format!("kernel {k} larger than input {h}x{w}")));
            }
            (0, h - k + 1, w - k + 1)
        }
    };
    Ok(ConvGeometry {
        h,
        w,
        cin,
        cout,
        k,
        pad,
        out_h,
        out_w,
    })
}

/// Input row/column under kernel tap `tap` for output position `out`, if inside.
#[inline]
fn source_index(out: usize, tap: usize, pad: usize, extent: usize) -> Option<usize> {
    (out + tap).checked_sub(pad).filter(|&i| i < extent)
}

/// 2-D cross-correlation over an `H×W×Cin` input.
pub fn conv2d(input: &Tensor, kernels: &Tensor, bias: &Tensor, padding: Padding) -> Result<Tensor> {
    let g = conv_geometry(input, kernels, bias, padding)?;
    let x = input.data();
    let kw = kernels.data();
    let mut out = vec![0.0; g.out_h * g.out_w * g.cout];
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let o = &mut out[(oy * g.out_w + ox) * g.cout..][..g.cout];
            o.copy_from_slice(bias.data());
            for ky in 0..g.k {
                let Some(iy) = source_index(oy, ky, g.pad, g.h) else {
                    continue;
                };
                for kx in 0..g.k {
                    let Some(ix) = source_index(ox, kx, g.pad, g.w) else {
                        continue;
                    };
                    let px = &x[(iy * g.w + ix) * g.cin..][..g.cin];
                    let tap = &kw[(ky * g.k + kx) * g.cin * g.cout..][..g.cin * g.cout];
                    for (ci, &v) in px.iter().enumerate() {
                        let row = &tap[ci * g.cout..][..g.cout];
                        for (acc, &wv) in o.iter_mut().zip(row) {
                            *acc += v * wv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.out_h, g.out_w, g.cout], out)
}

/// Gradients of [`conv2d`] with respect to input, kernels and bias.
pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    padding: Padding,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = conv_geometry(input, kernels, bias, padding)?;
    if grad_out.shape() != [g.out_h, g.out_w, g.cout] {
        return Err(TsmError::dim("conv2d backward", "upstream gradient shape mismatch"));
    }
    let x = input.data();
    let kw = kernels.data();
    let go = grad_out.data();
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; kw.len()];
    let mut gb = vec![0.0; g.cout];
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let up = &go[(oy * g.out_w + ox) * g.cout..][..g.cout];
            for (b, &u) in gb.iter_mut().zip(up) {
                *b += u;
            }
            for ky in 0..g.k {
                let Some(iy) = source_index(oy, ky, g.pad, g.h) else {
                    continue;
                };
                for kx in 0..g.k {
                    let Some(ix) = source_index(ox, kx, g.pad, g.w) else {
                        continue;
                    };
                    let pix = (iy * g.w + ix) * g.cin;
                    let tap = (ky * g.k + kx) * g.cin * g.cout;
                    for ci in 0..g.cin {
                        let v = x[pix + ci];
                        let row = tap + ci * g.cout;
                        let mut acc = 0.0;
                        for co in 0..g.cout {
                            acc += kw[row + co] * up[co];
                            gk[row + co] += v * up[co];
                        }
                        gx[pix + ci] += acc;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), gx)?,
        Tensor::new(kernels.shape().to_vec(), gk)?,
        Tensor::new(bias.shape().to_vec(), gb)?,
    ))
}

/// Output extent of a pooling axis.
///
/// In ceil mode every window that starts inside the input is kept, so the
/// extent is `ceil(n / stride)` and border windows may be partial. This keeps
/// stride-2 pooling at exactly `ceil(n / 2)` for any kernel size.
pub fn pooled_extent(n: usize, kernel: usize, stride: usize, ceil_mode: bool) -> Option<usize> {
    if kernel == 0 || stride == 0 || n == 0 {
        return None;
    }
    if ceil_mode {
        Some(n.div_ceil(stride))
    } else if kernel > n {
        None
    } else {
        Some((n - kernel) / stride + 1)
    }
}

/// Result of [`maxpool2d`]: pooled values plus the flat input index of each maximum.
#[derive(Debug, Clone)]
pub struct Pooled {
    pub output: Tensor,
    pub argmax: Vec<usize>,
}

/// Per-channel window maximum over an `H×W×C` input.
pub fn maxpool2d(input: &Tensor, kernel: (usize, usize), stride: (usize, usize), ceil_mode: bool) -> Result<Pooled> {
    expect_rank(input, 3, "maxpool2d input")?;
    let (h, w, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (kh, kw) = kernel;
    let (sh, sw) = stride;
    let extent_err = || {
        TsmError::dim(
            "maxpool2d",
            format!("kernel {kh}x{kw} stride {sh}x{sw} does not fit input {h}x{w}"),
        )
    };
    let out_h = pooled_extent(h, kh, sh, ceil_mode).ok_or_else(extent_err)?;
    let out_w = pooled_extent(w, kw, sw, ceil_mode).ok_or_else(extent_err)?;
    let x = input.data();
    let mut out = vec![f64::NEG_INFINITY; out_h * out_w * c];
    let mut argmax = vec![0usize; out.len()];
    for oy in 0..out_h {
        let y0 = oy * sh;
        let y1 = (y0 + kh).min(h);
        for ox in 0..out_w {
            let x0 = ox * sw;
            let x1 = (x0 + kw).min(w);
            let base = (oy * out_w + ox) * c;
            for iy in y0..y1 {
                for ix in x0..x1 {
                    let src = (iy * w + ix) * c;
                    for ch in 0..c {
                        let v = x[src + ch];
                        if v > out[base + ch] {
                            out[base + ch] = v;
                            argmax[base + ch] = src + ch;
                        }
                    }
                }
            }
        }
    }
    // NaN inputs never win a comparison; route such windows to their first element.
    for (o, (v, a)) in out.iter_mut().zip(argmax.iter_mut()).enumerate() {
        if *v == f64::NEG_INFINITY {
            let ch = o % c;
            let cell = o / c;
            let (oy, ox) = (cell / out_w, cell % out_w);
            *a = ((oy * sh) * w + ox * sw) * c + ch;
            *v = x[*a];
        }
    }
    Ok(Pooled {
        output: Tensor::new(vec![out_h, out_w, c], out)?,
        argmax,
    })
}

pub fn maxpool2d_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.len() != argmax.len() {
        return Err(TsmError::dim("maxpool2d backward", "upstream gradient shape mismatch"));
    }
    let mut gx = vec![0.0; input_shape.iter().product()];
    for (&src, &g) in argmax.iter().zip(grad_out.data()) {
        gx[src] += g;
    }
    Tensor::new(input_shape.to_vec(), gx)
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor {
        shape: input.shape().to_vec(),
        data,
    }
}

pub fn sigmoid(input: &Tensor) -> Tensor {
    input.map(|v| {
        if v >= 0.0 {
            1.0 / (1.0 + (-v).exp())
        } else {
            let e = v.exp();
            e / (1.0 + e)
        }
    })
}

pub fn sigmoid_backward(output: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&s, &g)| g * s * (1.0 - s))
        .collect();
    Tensor {
        shape: output.shape().to_vec(),
        data,
    }
}

fn fc_check(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<(usize, usize)> {
    expect_rank(weights, 2, "fully_connected weights")?;
    let (d, k) = (weights.shape()[0], weights.shape()[1]);
    if input.shape() != [d] {
        return Err(TsmError::dim(
            "fully_connected",
            format!("input shape {:?} does not match weights {d}x{k}", input.shape()),
        ));
    }
    if bias.shape() != [k] {
        return Err(TsmError::dim(
            "fully_connected bias",
            format!("expected [{k}], got {:?}", bias.shape()),
        ));
    }
    Ok((d, k))
}

/// `y = Wᵀx + b` for `x: [D]`, `W: [D×K]`, `b: [K]`.
pub fn fully_connected(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (_, k) = fc_check(input, weights, bias)?;
    let mut y = bias.data().to_vec();
    for (&x, row) in input.data().iter().zip(weights.data().chunks_exact(k)) {
        for (acc, &w) in y.iter_mut().zip(row) {
            *acc += x * w;
        }
    }
    Tensor::new(vec![k], y)
}

pub fn fully_connected_backward(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (d, k) = fc_check(input, weights, bias)?;
    let g = grad_out.data();
    let mut gx = vec![0.0; d];
    let mut gw = vec![0.0; d * k];
    for (i, (&x, row)) in input.data().iter().zip(weights.data().chunks_exact(k)).enumerate() {
        let grow = &mut gw[i * k..][..k];
        let mut acc = 0.0;
        for j in 0..k {
            acc += row[j] * g[j];
            grow[j] = x * g[j];
        }
        gx[i] = acc;
    }
    Ok((
        Tensor::new(vec![d], gx)?,
        Tensor::new(vec![d, k], gw)?,
        Tensor::new(vec![k], g.to_vec())?,
    ))
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `-log softmax(logits)[label]` together with the softmax probabilities.
pub fn softmax_cross_entropy(logits: &Tensor, label: usize) -> Result<(f64, Vec<f64>)> {
    expect_rank(logits, 1, "softmax_cross_entropy logits")?;
    let k = logits.len();
    if label >= k {
        return Err(TsmError::Index {
            context: "softmax_cross_entropy label".into(),
            index: label,
            size: k,
        });
    }
    let z = logits.data();
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_total = z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    let loss = log_total - (z[label] - m);
    Ok((loss, softmax(z)))
}

/// Strides of `small` read while walking `large` row-major; broadcast axes get 0.
fn broadcast_strides(large: &[usize], small: &[usize]) -> Result<Vec<usize>> {
    if large.len() != small.len() || large.iter().zip(small).any(|(&l, &s)| s != l && s != 1) {
        return Err(TsmError::dim(
            "broadcast multiply",
            format!("shape {small:?} does not broadcast to {large:?}"),
        ));
    }
    let mut strides = vec![0; small.len()];
    let mut acc = 1;
    for axis in (0..small.len()).rev() {
        strides[axis] = if small[axis] == 1 { 0 } else { acc };
        acc *= small[axis];
    }
    Ok(strides)
}

/// Flat index into `b` for every flat index of `a`.
fn broadcast_map(a_shape: &[usize], b_shape: &[usize]) -> Result<Vec<usize>> {
    let strides = broadcast_strides(a_shape, b_shape)?;
    let n: usize = a_shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; a_shape.len()];
    for _ in 0..n {
        map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for axis in (0..idx.len()).rev() {
            idx[axis] += 1;
            if idx[axis] < a_shape[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
    Ok(map)
}

/// Entrywise `a ∘ b` where `b` repeats along its unit axes.
pub fn mul_broadcast(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let map = broadcast_map(a.shape(), b.shape())?;
    let bd = b.data();
    let data = a.data().iter().zip(&map).map(|(&x, &j)| x * bd[j]).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn mul_broadcast_backward(a: &Tensor, b: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    let map = broadcast_map(a.shape(), b.shape())?;
    let (ad, bd, g) = (a.data(), b.data(), grad_out.data());
    let mut ga = vec![0.0; ad.len()];
    let mut gb = vec![0.0; bd.len()];
    for (i, &j) in map.iter().enumerate() {
        ga[i] = g[i] * bd[j];
        gb[j] += g[i] * ad[i];
    }
    Ok((
        Tensor::new(a.shape().to_vec(), ga)?,
        Tensor::new(b.shape().to_vec(), gb)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_scalar_product() {
        let out = conv2d(
            &t(&[1, 1, 1], &[2.0]),
            &t(&[1, 1, 1, 1], &[3.0]),
            &t(&[1], &[0.0]),
            Padding::Same,
        )
        .unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.data(), &[6.0]);
    }

    #[test]
    fn conv_zero_input_yields_bias() {
        let input = Tensor::zeros(vec![5, 5, 2]).unwrap();
        let kernels = Tensor::new(vec![3, 3, 2, 2], (0..36).map(|i| i as f64 * 0.1 - 1.0).collect()).unwrap();
        let out = conv2d(&input, &kernels, &t(&[2], &[1.0, -1.0]), Padding::Same).unwrap();
        for px in out.data().chunks(2) {
            assert_eq!(px, &[1.0, -1.0]);
        }
    }

    #[test]
    fn conv_channel_mismatch() {
        let err = conv2d(
            &Tensor::zeros(vec![3, 3, 2]).unwrap(),
            &Tensor::zeros(vec![3, 3, 1, 4]).unwrap(),
            &Tensor::zeros(vec![4]).unwrap(),
            Padding::Same,
        );
        assert!(matches!(err, Err(TsmError::Dimension { .. })));
    }

    #[test]
    fn conv_valid_shrinks() {
        let out = conv2d(
            &Tensor::ones(vec![5, 4, 1]).unwrap(),
            &Tensor::ones(vec![3, 3, 1, 1]).unwrap(),
            &Tensor::zeros(vec![1]).unwrap(),
            Padding::Valid,
        )
        .unwrap();
        assert_eq!(out.shape(), &[3, 2, 1]);
        assert!(out.data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn pool_examples() {
        let p = maxpool2d(&t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]), (2, 2), (2, 2), false).unwrap();
        assert_eq!(p.output.data(), &[4.0]);
        let p = maxpool2d(&t(&[1, 4, 1], &[0.1, 0.9, 0.3, 0.5]), (1, 2), (1, 2), false).unwrap();
        assert_eq!(p.output.data(), &[0.9, 0.5]);
    }

    #[test]
    fn pool_ceil_mode_extents_halve() {
        for n in 1..40 {
            assert_eq!(pooled_extent(n, 3, 2, true), Some(n.div_ceil(2)));
            assert_eq!(pooled_extent(n, 2, 2, true), Some(n.div_ceil(2)));
        }
        assert_eq!(pooled_extent(2, 3, 2, false), None);
    }

    #[test]
    fn pool_kernel_too_large() {
        let err = maxpool2d(&Tensor::zeros(vec![2, 2, 1]).unwrap(), (3, 3), (2, 2), false);
        assert!(matches!(err, Err(TsmError::Dimension { .. })));
    }

    #[test]
    fn relu_examples() {
        assert_eq!(relu(&t(&[3], &[-1.0, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);
        assert!(relu(&t(&[4], &[-1.0, -2.0, -0.5, -3.0]))
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let g = relu_backward(&t(&[2], &[2.0, -1.0]), &t(&[2], &[1.0, 1.0]));
        assert_eq!(g.data(), &[1.0, 0.0]);
    }

    #[test]
    fn fc_examples() {
        let y = fully_connected(
            &t(&[2], &[1.0, 2.0]),
            &t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]),
            &t(&[2], &[0.0, 0.0]),
        )
        .unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
        let y = fully_connected(
            &t(&[2], &[1.0, 2.0]),
            &Tensor::zeros(vec![2, 2]).unwrap(),
            &t(&[2], &[5.0, -5.0]),
        )
        .unwrap();
        assert_eq!(y.data(), &[5.0, -5.0]);
        assert!(fully_connected(
            &t(&[3], &[1.0, 2.0, 3.0]),
            &Tensor::zeros(vec![2, 2]).unwrap(),
            &t(&[2], &[0.0, 0.0])
        )
        .is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let (loss, _) = softmax_cross_entropy(&t(&[2], &[0.0, 0.0]), 0).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        let (loss, probs) = softmax_cross_entropy(&t(&[2], &[1000.0, 0.0]), 0).unwrap();
        assert!(loss.is_finite() && loss.abs() < 1e-12);
        assert!(probs.iter().all(|p| p.is_finite()));
        assert!(matches!(
            softmax_cross_entropy(&t(&[2], &[0.0, 0.0]), 2),
            Err(TsmError::Index { .. })
        ));
    }

    #[test]
    fn broadcast_examples() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let out = mul_broadcast(&a, &t(&[2, 1], &[2.0, 0.0])).unwrap();
        assert_eq!(out.data(), &[2.0, 4.0, 0.0, 0.0]);
        let same = mul_broadcast(&a, &Tensor::ones(vec![1, 2]).unwrap()).unwrap();
        assert_eq!(same, a);
        assert!(mul_broadcast(&a, &t(&[3, 1], &[1.0, 1.0, 1.0])).is_err());
        assert!(mul_broadcast(&a, &t(&[2], &[1.0, 1.0])).is_err());
    }
}
