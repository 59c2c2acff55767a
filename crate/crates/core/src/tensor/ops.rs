//! Differentiable ops: convolution, batch norm, activations, resize, pooling.

use super::conv::{col2im, conv_out_dim, im2col};
use super::Var;
use crate::error::{Result, SodError};
use ndarray::{Array1, Array2, ArrayD, Axis};
use std::cell::RefCell;
use std::rc::Rc;

fn as4(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(SodError::Dimension(format!(
            "{what}: expected rank-4 tensor, got shape {shape:?}"
        )));
    }
    Ok((shape[0], shape[1], shape[2], shape[3]))
}

/// 2-D convolution with square stride/padding/dilation.
///
/// `x`: (N,C,H,W), `w`: (O,C,kh,kw), `b`: (O,).
pub fn conv2d(
    x: &Var,
    w: &Var,
    b: Option<&Var>,
    stride: usize,
    pad: usize,
    dil: usize,
) -> Result<Var> {
    let (n, c, h, wd) = as4(&x.shape(), "conv2d input")?;
    let (o, wc, kh, kw) = as4(&w.shape(), "conv2d weight")?;
    if wc != c {
        return Err(SodError::Dimension(format!(
            "conv2d: input has {c} channels but weight expects {wc}"
        )));
    }
    let ho = conv_out_dim(h, kh, stride, pad, dil);
    let wo = conv_out_dim(wd, kw, stride, pad, dil);

    let wmat = {
        let wd_ = w.data();
        wd_.to_owned()
            .into_shape((o, c * kh * kw))
            .expect("weight reshape")
    };
    let mut y = ArrayD::<f64>::zeros(vec![n, o, ho, wo]);
    {
        let xd = x.data();
        let x4 = xd.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        for ni in 0..n {
            let sample = x4.index_axis(Axis(0), ni);
            let col = im2col(&sample, kh, kw, stride, pad, dil, ho, wo);
            let prod = wmat.dot(&col); // (o, ho*wo)
            let mut ys = y.index_axis_mut(Axis(0), ni);
            for oi in 0..o {
                let row = prod.row(oi);
                let mut plane = ys.index_axis_mut(Axis(0), oi);
                for (dst, src) in plane.iter_mut().zip(row.iter()) {
                    *dst = *src;
                }
            }
        }
    }
    if let Some(b) = b {
        let bd = b.data();
        for oi in 0..o {
            let bias = bd[[oi]];
            y.index_axis_mut(Axis(1), oi).mapv_inplace(|v| v + bias);
        }
    }

    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = b {
        parents.push(b.clone());
    }
    let has_bias = b.is_some();
    Ok(Var::from_op(
        y,
        parents,
        Box::new(move |go, parents| {
            let xd = parents[0].data();
            let x4 = xd.view().into_dimensionality::<ndarray::Ix4>().unwrap();
            let wd_ = parents[1].data();
            let wmat = wd_
                .to_owned()
                .into_shape((o, c * kh * kw))
                .expect("weight reshape");
            let go4 = go.view().into_dimensionality::<ndarray::Ix4>().unwrap();

            let mut dx = ArrayD::<f64>::zeros(vec![n, c, h, wd]);
            let mut dwmat = Array2::<f64>::zeros((o, c * kh * kw));
            let mut db = Array1::<f64>::zeros(o);
            for ni in 0..n {
                let sample = x4.index_axis(Axis(0), ni);
                let col = im2col(&sample, kh, kw, stride, pad, dil, ho, wo);
                let go_mat = go4
                    .index_axis(Axis(0), ni)
                    .to_owned()
                    .into_shape((o, ho * wo))
                    .unwrap();
                dwmat = dwmat + go_mat.dot(&col.t());
                let dcol = wmat.t().dot(&go_mat);
                let mut dxs = dx.index_axis_mut(Axis(0), ni);
                let mut dxs3 = dxs.view_mut().into_dimensionality::<ndarray::Ix3>().unwrap();
                col2im(&dcol, &mut dxs3, kh, kw, stride, pad, dil, ho, wo);
                if has_bias {
                    for oi in 0..o {
                        db[oi] += go_mat.row(oi).sum();
                    }
                }
            }
            let dw = dwmat.into_shape(vec![o, c, kh, kw]).unwrap().into_dyn();
            let mut grads = vec![Some(dx), Some(dw)];
            if has_bias {
                grads.push(Some(db.into_dyn()));
            }
            grads
        }),
    ))
}

/// Batch normalization over (N,H,W) per channel.
///
/// `gamma`/`beta` are length-C vars; running stats are shared buffers updated
/// in training mode and used for normalization in eval mode.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm2d(
    x: &Var,
    gamma: &Var,
    beta: &Var,
    running_mean: &Rc<RefCell<Array1<f64>>>,
    running_var: &Rc<RefCell<Array1<f64>>>,
    training: bool,
    momentum: f64,
    eps: f64,
) -> Result<Var> {
    let (n, c, h, w) = as4(&x.shape(), "batch_norm2d input")?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(SodError::Dimension(format!(
            "batch_norm2d: gamma/beta must have length {c}"
        )));
    }
    let m = (n * h * w) as f64;
    let (mean, invstd) = if training {
        let xd = x.data();
        let mut mean = Array1::<f64>::zeros(c);
        let mut var = Array1::<f64>::zeros(c);
        for ci in 0..c {
            let plane = xd.index_axis(Axis(1), ci);
            let mu = plane.sum() / m;
            let v = plane.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / m;
            mean[ci] = mu;
            var[ci] = v;
        }
        {
            let mut rm = running_mean.borrow_mut();
            let mut rv = running_var.borrow_mut();
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            for ci in 0..c {
                rm[ci] = (1.0 - momentum) * rm[ci] + momentum * mean[ci];
                rv[ci] = (1.0 - momentum) * rv[ci] + momentum * var[ci] * unbias;
            }
        }
        let invstd = var.mapv(|v| 1.0 / (v + eps).sqrt());
        (mean, invstd)
    } else {
        let rm = running_mean.borrow().clone();
        let invstd = running_var.borrow().mapv(|v| 1.0 / (v + eps).sqrt());
        (rm, invstd)
    };

    let xhat = {
        let xd = x.data();
        let mut xhat = xd.to_owned();
        for ci in 0..c {
            let (mu, is) = (mean[ci], invstd[ci]);
            xhat.index_axis_mut(Axis(1), ci).mapv_inplace(|v| (v - mu) * is);
        }
        xhat
    };
    let mut y = xhat.clone();
    {
        let g = gamma.data();
        let b = beta.data();
        for ci in 0..c {
            let (gc, bc) = (g[[ci]], b[[ci]]);
            y.index_axis_mut(Axis(1), ci).mapv_inplace(|v| gc * v + bc);
        }
    }

    let xhat = Rc::new(xhat);
    let invstd = Rc::new(invstd);
    Ok(Var::from_op(
        y,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |go, parents| {
            let g = parents[1].data();
            let mut dbeta = Array1::<f64>::zeros(c);
            let mut dgamma = Array1::<f64>::zeros(c);
            for ci in 0..c {
                let go_c = go.index_axis(Axis(1), ci);
                let xh_c = xhat.index_axis(Axis(1), ci);
                dbeta[ci] = go_c.sum();
                dgamma[ci] = go_c.iter().zip(xh_c.iter()).map(|(a, b)| a * b).sum();
            }
            let mut dx = go.to_owned();
            for ci in 0..c {
                let gc = g[[ci]];
                let is = invstd[ci];
                if training {
                    let mean_dy = dbeta[ci] / m;
                    let mean_dyxh = dgamma[ci] / m;
                    let xh_c = xhat.index_axis(Axis(1), ci).to_owned();
                    let mut dx_c = dx.index_axis_mut(Axis(1), ci);
                    ndarray::Zip::from(&mut dx_c).and(&xh_c).for_each(|d, &xh| {
                        *d = gc * is * (*d - mean_dy - xh * mean_dyxh);
                    });
                } else {
                    dx.index_axis_mut(Axis(1), ci).mapv_inplace(|v| v * gc * is);
                }
            }
            vec![Some(dx), Some(dgamma.into_dyn()), Some(dbeta.into_dyn())]
        }),
    ))
}

pub fn relu(x: &Var) -> Var {
    let y = x.data().mapv(|v| v.max(0.0));
    Var::from_op(
        y,
        vec![x.clone()],
        Box::new(|go, parents| {
            let xd = parents[0].data();
            let mut dx = go.to_owned();
            ndarray::Zip::from(&mut dx).and(&*xd).for_each(|d, &x| {
                if x <= 0.0 {
                    *d = 0.0;
                }
            });
            vec![Some(dx)]
        }),
    )
}

pub fn sigmoid(x: &Var) -> Var {
    let y = x.data().mapv(|v| 1.0 / (1.0 + (-v).exp()));
    let y_saved = Rc::new(y.clone());
    Var::from_op(
        y,
        vec![x.clone()],
        Box::new(move |go, _| {
            let mut dx = go.to_owned();
            ndarray::Zip::from(&mut dx).and(&*y_saved).for_each(|d, &s| {
                *d *= s * (1.0 - s);
            });
            vec![Some(dx)]
        }),
    )
}

pub fn add(a: &Var, b: &Var) -> Result<Var> {
    if a.shape() != b.shape() {
        return Err(SodError::Dimension(format!(
            "add: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let y = &*a.data() + &*b.data();
    Ok(Var::from_op(
        y,
        vec![a.clone(), b.clone()],
        Box::new(|go, _| vec![Some(go.to_owned()), Some(go.to_owned())]),
    ))
}

/// Per-axis source indices and lerp weight, half-pixel convention
/// (align_corners=false), edge-clamped.
fn interp_axis(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let t = if hi > lo { src - lo as f64 } else { 0.0 };
            (lo, hi, t)
        })
        .collect()
}

/// Bilinear resize of a (N,C,H,W) tensor to (ho, wo).
pub fn bilinear_resize(x: &Var, ho: usize, wo: usize) -> Var {
    let shape = x.shape();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let ys = interp_axis(h, ho);
    let xs = interp_axis(w, wo);
    let mut y = ArrayD::<f64>::zeros(vec![n, c, ho, wo]);
    {
        let xd = x.data();
        for ni in 0..n {
            for ci in 0..c {
                for (oh, &(y0, y1, ty)) in ys.iter().enumerate() {
                    for (ow, &(x0, x1, tx)) in xs.iter().enumerate() {
                        let v = (1.0 - ty)
                            * ((1.0 - tx) * xd[[ni, ci, y0, x0]] + tx * xd[[ni, ci, y0, x1]])
                            + ty * ((1.0 - tx) * xd[[ni, ci, y1, x0]]
                                + tx * xd[[ni, ci, y1, x1]]);
                        y[[ni, ci, oh, ow]] = v;
                    }
                }
            }
        }
    }
    let ys = Rc::new(ys);
    let xs = Rc::new(xs);
    Var::from_op(
        y,
        vec![x.clone()],
        Box::new(move |go, _| {
            let mut dx = ArrayD::<f64>::zeros(vec![n, c, h, w]);
            for ni in 0..n {
                for ci in 0..c {
                    for (oh, &(y0, y1, ty)) in ys.iter().enumerate() {
                        for (ow, &(x0, x1, tx)) in xs.iter().enumerate() {
                            let g = go[[ni, ci, oh, ow]];
                            dx[[ni, ci, y0, x0]] += g * (1.0 - ty) * (1.0 - tx);
                            dx[[ni, ci, y0, x1]] += g * (1.0 - ty) * tx;
                            dx[[ni, ci, y1, x0]] += g * ty * (1.0 - tx);
                            dx[[ni, ci, y1, x1]] += g * ty * tx;
                        }
                    }
                }
            }
            vec![Some(dx)]
        }),
    )
}

/// Non-autograd bilinear resize for 2-D maps (prediction export, scoring).
pub fn bilinear_resize_2d(x: &ndarray::ArrayView2<f64>, ho: usize, wo: usize) -> Array2<f64> {
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let ys = interp_axis(h, ho);
    let xs = interp_axis(w, wo);
    let mut y = Array2::<f64>::zeros((ho, wo));
    for (oh, &(y0, y1, ty)) in ys.iter().enumerate() {
        for (ow, &(x0, x1, tx)) in xs.iter().enumerate() {
            y[[oh, ow]] = (1.0 - ty) * ((1.0 - tx) * x[[y0, x0]] + tx * x[[y0, x1]])
                + ty * ((1.0 - tx) * x[[y1, x0]] + tx * x[[y1, x1]]);
        }
    }
    y
}

/// Max pooling with square kernel/stride/padding (padding is -inf).
pub fn max_pool2d(x: &Var, k: usize, stride: usize, pad: usize) -> Var {
    let shape = x.shape();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let ho = conv_out_dim(h, k, stride, pad, 1);
    let wo = conv_out_dim(w, k, stride, pad, 1);
    let mut y = ArrayD::<f64>::zeros(vec![n, c, ho, wo]);
    let mut argmax = vec![0usize; n * c * ho * wo];
    {
        let xd = x.data();
        let mut flat = 0usize;
        for ni in 0..n {
            for ci in 0..c {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for ki in 0..k {
                            let ih = (oh * stride + ki) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for kj in 0..k {
                                let iw = (ow * stride + kj) as isize - pad as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                let v = xd[[ni, ci, ih as usize, iw as usize]];
                                if v > best {
                                    best = v;
                                    best_idx = ih as usize * w + iw as usize;
                                }
                            }
                        }
                        y[[ni, ci, oh, ow]] = best;
                        argmax[flat] = best_idx;
                        flat += 1;
                    }
                }
            }
        }
    }
    let argmax = Rc::new(argmax);
    Var::from_op(
        y,
        vec![x.clone()],
        Box::new(move |go, _| {
            let mut dx = ArrayD::<f64>::zeros(vec![n, c, h, w]);
            let mut flat = 0usize;
            for ni in 0..n {
                for ci in 0..c {
                    for oh in 0..ho {
                        for ow in 0..wo {
                            let idx = argmax[flat];
                            dx[[ni, ci, idx / w, idx % w]] += go[[ni, ci, oh, ow]];
                            flat += 1;
                        }
                    }
                }
            }
            vec![Some(dx)]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| {
            // Box-Muller
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
    }

    /// Central finite differences of a scalar-valued graph w.r.t. one leaf.
    fn finite_diff(
        leaf: &Var,
        f: &dyn Fn() -> f64,
        eps: f64,
    ) -> ArrayD<f64> {
        let base = leaf.data().clone();
        let mut grad = ArrayD::zeros(base.raw_dim());
        for idx in 0..base.len() {
            let mut plus = base.clone();
            plus.as_slice_mut().unwrap()[idx] += eps;
            leaf.set_data(plus);
            let fp = f();
            let mut minus = base.clone();
            minus.as_slice_mut().unwrap()[idx] -= eps;
            leaf.set_data(minus);
            let fm = f();
            grad.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * eps);
        }
        leaf.set_data(base);
        grad
    }

    fn scalar_sum_sq(v: &Var) -> f64 {
        v.data().iter().map(|x| x * x).sum::<f64>()
    }

    fn check_against_fd(leaf: &Var, forward: &dyn Fn() -> Var) {
        // loss = sum of squares of the op output
        let out = forward();
        let seed = out.data().mapv(|v| 2.0 * v);
        out.backward_with(seed);
        let analytic = leaf.grad().unwrap();
        let fd = finite_diff(leaf, &|| scalar_sum_sq(&forward()), 1e-5);
        for (a, b) in analytic.iter().zip(fd.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6 + 1e-5 * b.abs());
        }
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Var::leaf(randn(&mut rng, &[2, 3, 6, 6]), true);
        let w = Var::leaf(randn(&mut rng, &[4, 3, 3, 3]), true);
        let b = Var::leaf(randn(&mut rng, &[4]), true);
        for leaf in [&x, &w, &b] {
            x.zero_grad();
            w.zero_grad();
            b.zero_grad();
            check_against_fd(leaf, &|| conv2d(&x, &w, Some(&b), 1, 2, 2).unwrap());
        }
    }

    #[test]
    fn strided_conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Var::leaf(randn(&mut rng, &[1, 2, 8, 8]), true);
        let w = Var::leaf(randn(&mut rng, &[3, 2, 3, 3]), true);
        check_against_fd(&x, &|| conv2d(&x, &w, None, 2, 1, 1).unwrap());
    }

    #[test]
    fn batch_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Var::leaf(randn(&mut rng, &[2, 3, 4, 4]), true);
        let gamma = Var::leaf(randn(&mut rng, &[3]), true);
        let beta = Var::leaf(randn(&mut rng, &[3]), true);
        let rm = Rc::new(RefCell::new(Array1::zeros(3)));
        let rv = Rc::new(RefCell::new(Array1::ones(3)));
        for leaf in [&x, &gamma, &beta] {
            x.zero_grad();
            gamma.zero_grad();
            beta.zero_grad();
            let rm = rm.clone();
            let rv = rv.clone();
            check_against_fd(leaf, &|| {
                batch_norm2d(&x, &gamma, &beta, &rm, &rv, true, 0.1, 1e-5).unwrap()
            });
        }
    }

    #[test]
    fn bilinear_resize_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Var::leaf(randn(&mut rng, &[1, 2, 4, 4]), true);
        check_against_fd(&x, &|| bilinear_resize(&x, 7, 7));
        x.zero_grad();
        check_against_fd(&x, &|| bilinear_resize(&x, 2, 3));
    }

    #[test]
    fn bilinear_resize_of_constant_is_constant() {
        let x = Var::constant(ArrayD::from_elem(vec![1, 1, 3, 5], 0.7));
        let y = bilinear_resize(&x, 9, 11);
        assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn max_pool_matches_manual() {
        let x = Var::leaf(
            ArrayD::from_shape_vec(
                vec![1, 1, 4, 4],
                (0..16).map(|v| v as f64).collect(),
            )
            .unwrap(),
            true,
        );
        let y = max_pool2d(&x, 2, 2, 0);
        assert_eq!(y.shape(), vec![1, 1, 2, 2]);
        assert_eq!(y.data()[[0, 0, 0, 0]], 5.0);
        assert_eq!(y.data()[[0, 0, 1, 1]], 15.0);
        y.backward();
        let g = x.grad().unwrap();
        assert_eq!(g[[0, 0, 1, 1]], 1.0);
        assert_eq!(g[[0, 0, 0, 0]], 0.0);
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let x = Var::constant(ArrayD::zeros(vec![1, 3, 4, 4]));
        let w = Var::constant(ArrayD::zeros(vec![2, 4, 3, 3]));
        assert!(conv2d(&x, &w, None, 1, 1, 1).is_err());
    }
}
