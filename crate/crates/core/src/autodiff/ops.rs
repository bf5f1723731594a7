//! Elementwise, reduction, shape, and linear-map operations on [`Var`]s.
//!
//! Each op computes its forward value eagerly and registers a closure that
//! maps the output gradient to input gradients. Convolution and the other
//! spatial operators live in [`crate::nn`].

use crate::error::{Error, Result};
use crate::tensor::{self, Scalar, Tensor};

use super::Var;

fn same_shape<T: Scalar>(a: &Var<T>, b: &Var<T>, op: &str) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(Error::Shape(format!(
            "{op}: mismatched shapes {sa:?} vs {sb:?}"
        )));
    }
    Ok(())
}

pub fn add<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    same_shape(a, b, "add")?;
    let value = a.with_value(|av| b.with_value(|bv| av.add(bv)))?;
    Ok(a.tape().record(&[a, b], value, || {
        Box::new(|args| vec![Some(args.grad_out.clone()), Some(args.grad_out.clone())])
    }))
}

pub fn sub<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    same_shape(a, b, "sub")?;
    let value = a.with_value(|av| b.with_value(|bv| av.sub(bv)))?;
    Ok(a.tape().record(&[a, b], value, || {
        Box::new(|args| {
            vec![
                Some(args.grad_out.clone()),
                Some(args.grad_out.map(|g| -g)),
            ]
        })
    }))
}

pub fn mul<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    same_shape(a, b, "mul")?;
    let value = a.with_value(|av| b.with_value(|bv| av.mul(bv)))?;
    Ok(a.tape().record(&[a, b], value, || {
        Box::new(|args| {
            let ga = args.grad_out.mul(args.inputs[1]).expect("shape checked");
            let gb = args.grad_out.mul(args.inputs[0]).expect("shape checked");
            vec![Some(ga), Some(gb)]
        })
    }))
}

pub fn neg<T: Scalar>(a: &Var<T>) -> Var<T> {
    let value = a.with_value(|av| av.map(|v| -v));
    a.tape().record(&[a], value, || {
        Box::new(|args| vec![Some(args.grad_out.map(|g| -g))])
    })
}

pub fn scale<T: Scalar>(a: &Var<T>, c: f64) -> Var<T> {
    let cv = T::from_f64(c);
    let value = a.with_value(|av| av.scale(cv));
    a.tape().record(&[a], value, move || {
        Box::new(move |args| vec![Some(args.grad_out.scale(cv))])
    })
}

pub fn add_scalar<T: Scalar>(a: &Var<T>, c: f64) -> Var<T> {
    let cv = T::from_f64(c);
    let value = a.with_value(|av| av.map(|v| v + cv));
    a.tape().record(&[a], value, || {
        Box::new(|args| vec![Some(args.grad_out.clone())])
    })
}

/// Elementwise absolute value; the subgradient at 0 is taken as 0.
pub fn abs<T: Scalar>(a: &Var<T>) -> Var<T> {
    let value = a.with_value(|av| av.map(|v| v.abs()));
    a.tape().record(&[a], value, || {
        Box::new(|args| {
            let x = args.inputs[0];
            let g = args
                .grad_out
                .zip_with(x, |g, v| {
                    if v > T::ZERO {
                        g
                    } else if v < T::ZERO {
                        -g
                    } else {
                        T::ZERO
                    }
                })
                .expect("shape checked");
            vec![Some(g)]
        })
    })
}

/// Sum of all elements, shape `[1]`.
pub fn sum_all<T: Scalar>(a: &Var<T>) -> Var<T> {
    let value = a.with_value(|av| Tensor::scalar(av.sum()));
    a.tape().record(&[a], value, || {
        Box::new(|args| {
            let g = args.grad_out.data()[0];
            let shape = args.inputs[0].shape().to_vec();
            vec![Some(Tensor::filled(&shape, g).expect("valid shape"))]
        })
    })
}

/// Mean of all elements, shape `[1]`.
pub fn mean_all<T: Scalar>(a: &Var<T>) -> Var<T> {
    let n = a.numel();
    let value = a.with_value(|av| Tensor::scalar(av.mean()));
    a.tape().record(&[a], value, move || {
        Box::new(move |args| {
            let g = args.grad_out.data()[0] / T::from_f64(n as f64);
            let shape = args.inputs[0].shape().to_vec();
            vec![Some(Tensor::filled(&shape, g).expect("valid shape"))]
        })
    })
}

pub fn reshape<T: Scalar>(a: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
    let value = a.with_value(|av| av.reshaped(shape))?;
    let orig = a.shape();
    Ok(a.tape().record(&[a], value, move || {
        Box::new(move |args| {
            vec![Some(
                args.grad_out.reshaped(&orig).expect("same element count"),
            )]
        })
    }))
}

/// Concatenate `[N, C_i, H, W]` tensors along the channel axis.
pub fn concat_channels<T: Scalar>(parts: &[&Var<T>]) -> Result<Var<T>> {
    if parts.is_empty() {
        return Err(Error::Shape("concat of zero tensors".into()));
    }
    let first = parts[0].shape();
    if first.len() != 4 {
        return Err(Error::Shape(format!(
            "concat_channels expects rank-4 inputs, got {first:?}"
        )));
    }
    let (n, h, w) = (first[0], first[2], first[3]);
    let mut channels = Vec::with_capacity(parts.len());
    let mut total_c = 0;
    for p in parts {
        let s = p.shape();
        if s.len() != 4 || s[0] != n || s[2] != h || s[3] != w {
            return Err(Error::Shape(format!(
                "concat_channels: incompatible shapes {first:?} vs {s:?}"
            )));
        }
        channels.push(s[1]);
        total_c += s[1];
    }
    let plane = h * w;
    let mut data = vec![T::ZERO; n * total_c * plane];
    for ni in 0..n {
        let mut c_off = 0;
        for p in parts {
            p.with_value(|v| {
                let c = v.shape()[1];
                let src = &v.data()[ni * c * plane..(ni + 1) * c * plane];
                let dst_start = (ni * total_c + c_off) * plane;
                data[dst_start..dst_start + c * plane].copy_from_slice(src);
                c_off += c;
            });
        }
    }
    let value = Tensor::from_vec(&[n, total_c, h, w], data)?;
    let tape = parts[0].tape().clone();
    Ok(tape.record(parts, value, move || {
        Box::new(move |args| {
            let g = args.grad_out.data();
            let mut grads = Vec::with_capacity(channels.len());
            let mut c_off = 0;
            for &c in &channels {
                let mut part = vec![T::ZERO; n * c * plane];
                for ni in 0..n {
                    let src_start = (ni * total_c + c_off) * plane;
                    let dst_start = ni * c * plane;
                    part[dst_start..dst_start + c * plane]
                        .copy_from_slice(&g[src_start..src_start + c * plane]);
                }
                grads.push(Some(
                    Tensor::from_vec(&[n, c, h, w], part).expect("valid shape"),
                ));
                c_off += c;
            }
            grads
        })
    }))
}

/// `[M, K] x [K, N] -> [M, N]` matrix product.
pub fn matmul<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(Error::Shape(format!(
            "matmul: incompatible shapes {sa:?} x {sb:?}"
        )));
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let mut out = vec![T::ZERO; m * n];
    a.with_value(|av| b.with_value(|bv| tensor::matmul(av.data(), bv.data(), m, k, n, &mut out)));
    let value = Tensor::from_vec(&[m, n], out)?;
    Ok(a.tape().record(&[a, b], value, move || {
        Box::new(move |args| {
            let g = args.grad_out.data();
            let (av, bv) = (args.inputs[0], args.inputs[1]);
            let ga = args.needs[0].then(|| {
                let mut buf = vec![T::ZERO; m * k];
                tensor::matmul_abt(g, bv.data(), m, n, k, &mut buf);
                Tensor::from_vec(&[m, k], buf).expect("valid shape")
            });
            let gb = args.needs[1].then(|| {
                let mut buf = vec![T::ZERO; k * n];
                tensor::matmul_atb(av.data(), g, k, m, n, &mut buf);
                Tensor::from_vec(&[k, n], buf).expect("valid shape")
            });
            vec![ga, gb]
        })
    }))
}

/// Row-wise affine map: `out[r, o] = sum_k x[r, k] * w[o, k] + bias[o]`.
pub fn linear<T: Scalar>(x: &Var<T>, w: &Var<T>, bias: &Var<T>) -> Result<Var<T>> {
    let (sx, sw, sb) = (x.shape(), w.shape(), bias.shape());
    if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
        return Err(Error::Shape(format!(
            "linear: incompatible shapes x{sx:?} w{sw:?}"
        )));
    }
    if sb != [sw[0]] {
        return Err(Error::Shape(format!(
            "linear: bias shape {sb:?} does not match {} outputs",
            sw[0]
        )));
    }
    let (r, k, o) = (sx[0], sx[1], sw[0]);
    let mut out = vec![T::ZERO; r * o];
    x.with_value(|xv| {
        w.with_value(|wv| tensor::matmul_abt(xv.data(), wv.data(), r, k, o, &mut out))
    });
    bias.with_value(|bv| {
        for row in out.chunks_exact_mut(o) {
            for (y, &b) in row.iter_mut().zip(bv.data()) {
                *y += b;
            }
        }
    });
    let value = Tensor::from_vec(&[r, o], out)?;
    Ok(x.tape().record(&[x, w, bias], value, move || {
        Box::new(move |args| {
            let g = args.grad_out.data();
            let (xv, wv) = (args.inputs[0], args.inputs[1]);
            let gx = args.needs[0].then(|| {
                let mut buf = vec![T::ZERO; r * k];
                tensor::matmul(g, wv.data(), r, o, k, &mut buf);
                Tensor::from_vec(&[r, k], buf).expect("valid shape")
            });
            let gw = args.needs[1].then(|| {
                let mut buf = vec![T::ZERO; o * k];
                tensor::matmul_atb(g, xv.data(), o, r, k, &mut buf);
                Tensor::from_vec(&[o, k], buf).expect("valid shape")
            });
            let gb = args.needs[2].then(|| {
                let mut buf = vec![T::ZERO; o];
                for row in g.chunks_exact(o) {
                    for (acc, &gv) in buf.iter_mut().zip(row) {
                        *acc += gv;
                    }
                }
                Tensor::from_vec(&[o], buf).expect("valid shape")
            });
            vec![gx, gw, gb]
        })
    }))
}

/// Per-pixel linear map over channels:
/// `out[n, o, i, j] = sum_k w[o, k] * x[n, k, i, j] (+ bias[o])`.
///
/// This is mathematically a 1x1 convolution but runs through a separate
/// direct matrix route.
pub fn channel_linear<T: Scalar>(
    x: &Var<T>,
    w: &Var<T>,
    bias: Option<&Var<T>>,
) -> Result<Var<T>> {
    let (sx, sw) = (x.shape(), w.shape());
    if sx.len() != 4 || sw.len() != 2 || sw[1] != sx[1] {
        return Err(Error::Shape(format!(
            "channel_linear: incompatible shapes x{sx:?} w{sw:?}"
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [sw[0]] {
            return Err(Error::Shape(format!(
                "channel_linear: bias shape {:?} does not match {} outputs",
                b.shape(),
                sw[0]
            )));
        }
    }
    let (n, k, h, ww) = (sx[0], sx[1], sx[2], sx[3]);
    let o = sw[0];
    let plane = h * ww;
    let mut out = vec![T::ZERO; n * o * plane];
    x.with_value(|xv| {
        w.with_value(|wv| {
            for ni in 0..n {
                let xs = &xv.data()[ni * k * plane..(ni + 1) * k * plane];
                let os = &mut out[ni * o * plane..(ni + 1) * o * plane];
                tensor::matmul(wv.data(), xs, o, k, plane, os);
            }
        })
    });
    if let Some(b) = bias {
        b.with_value(|bv| {
            for ni in 0..n {
                for (oc, &bvv) in bv.data().iter().enumerate() {
                    let start = (ni * o + oc) * plane;
                    for y in &mut out[start..start + plane] {
                        *y += bvv;
                    }
                }
            }
        });
    }
    let value = Tensor::from_vec(&[n, o, h, ww], out)?;
    let mut inputs: Vec<&Var<T>> = vec![x, w];
    if let Some(b) = bias {
        inputs.push(b);
    }
    let has_bias = bias.is_some();
    Ok(x.tape().record(&inputs, value, move || {
        Box::new(move |args| {
            let g = args.grad_out.data();
            let (xv, wv) = (args.inputs[0], args.inputs[1]);
            let gx = args.needs[0].then(|| {
                let mut buf = vec![T::ZERO; n * k * plane];
                for ni in 0..n {
                    let gs = &g[ni * o * plane..(ni + 1) * o * plane];
                    let bs = &mut buf[ni * k * plane..(ni + 1) * k * plane];
                    tensor::matmul_atb(wv.data(), gs, k, o, plane, bs);
                }
                Tensor::from_vec(&[n, k, h, ww], buf).expect("valid shape")
            });
            let gw = args.needs[1].then(|| {
                let mut acc = vec![T::ZERO; o * k];
                let mut buf = vec![T::ZERO; o * k];
                for ni in 0..n {
                    let gs = &g[ni * o * plane..(ni + 1) * o * plane];
                    let xs = &xv.data()[ni * k * plane..(ni + 1) * k * plane];
                    tensor::matmul_abt(gs, xs, o, plane, k, &mut buf);
                    for (a, &b) in acc.iter_mut().zip(&buf) {
                        *a += b;
                    }
                }
                Tensor::from_vec(&[o, k], acc).expect("valid shape")
            });
            let mut grads = vec![gx, gw];
            if has_bias {
                let gb = args.needs[2].then(|| {
                    let mut buf = vec![T::ZERO; o];
                    for ni in 0..n {
                        for (oc, acc) in buf.iter_mut().enumerate() {
                            let start = (ni * o + oc) * plane;
                            for &gv in &g[start..start + plane] {
                                *acc += gv;
                            }
                        }
                    }
                    Tensor::from_vec(&[o], buf).expect("valid shape")
                });
                grads.push(gb);
            }
            grads
        })
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::rng::Rng;

    #[test]
    fn matmul_gradients_match_hand_values() {
        // y = sum(A B); dA = 1 B^T, dB = A^T 1
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.leaf(Tensor::from_vec(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let y = sum_all(&matmul(&a, &b).unwrap());
        y.backward().unwrap();
        assert_eq!(a.grad().unwrap().data(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(b.grad().unwrap().data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn concat_splits_gradient() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::filled(&[1, 1, 2, 2], 1.0).unwrap());
        let b = tape.leaf(Tensor::filled(&[1, 2, 2, 2], 2.0).unwrap());
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), vec![1, 3, 2, 2]);
        let y = sum_all(&scale(&c, 3.0));
        y.backward().unwrap();
        assert!(a.grad().unwrap().data().iter().all(|&v| v == 3.0));
        assert!(b.grad().unwrap().data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn abs_subgradient_zero_at_zero() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[3], vec![-2.0, 0.0, 3.0]).unwrap());
        let y = sum_all(&abs(&x));
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn linear_matches_manual() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap());
        let w = tape.leaf(Tensor::from_vec(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap());
        let b = tape.leaf(Tensor::from_vec(&[3], vec![0.5, -0.5, 0.0]).unwrap());
        let y = linear(&x, &w, &b).unwrap();
        assert_eq!(y.value().data(), &[1.5, 1.5, 3.0]);
    }

    #[test]
    fn channel_linear_shares_weights_across_pixels() {
        let tape = Tape::<f64>::new();
        let mut rng = Rng::new(4);
        let x = tape.leaf(Tensor::rand_normal(&[2, 3, 2, 2], 0.0, 1.0, &mut rng).unwrap());
        let w = tape.leaf(Tensor::rand_normal(&[4, 3], 0.0, 1.0, &mut rng).unwrap());
        let b = tape.leaf(Tensor::rand_normal(&[4], 0.0, 1.0, &mut rng).unwrap());
        let y = channel_linear(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.shape(), vec![2, 4, 2, 2]);
        // pick one pixel and verify the dot product by hand
        let (xv, wv, bv, yv) = (x.value(), w.value(), b.value(), y.value());
        let expect: f64 = (0..3).map(|k| wv.at(&[1, k]) * xv.at(&[0, k, 1, 0])).sum::<f64>()
            + bv.at(&[1]);
        assert!((yv.at(&[0, 1, 1, 0]) - expect).abs() < 1e-12);
    }
}
