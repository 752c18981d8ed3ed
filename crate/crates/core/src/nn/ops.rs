//! Forward and backward kernels for the layers the autoencoder uses.

use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Zero,
    Replicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub padding: Padding,
}

impl ConvGeometry {
    pub fn out_len(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// `table[o * kernel + t]` is the input coordinate read by output `o`
    /// through tap `t`, or `usize::MAX` for a zero-padded tap.
    fn taps(&self, n: usize) -> Vec<usize> {
        let out = self.out_len(n);
        let mut table = Vec::with_capacity(out * self.kernel);
        for o in 0..out {
            for t in 0..self.kernel {
                let p = (o * self.stride + t) as i64 - self.pad as i64;
                table.push(if p >= 0 && (p as usize) < n {
                    p as usize
                } else {
                    match self.padding {
                        Padding::Zero => usize::MAX,
                        Padding::Replicate => p.clamp(0, n as i64 - 1) as usize,
                    }
                });
            }
        }
        table
    }
}

/// Unfolds `x: [Cin, D, H, W]` into a `[Cin * k^3, out_voxels]` matrix whose
/// row `((ci * k + kz) * k + ky) * k + kx` holds the input value each output
/// voxel reads through that tap.
fn im2col(x: &Tensor, g: ConvGeometry) -> (Vec<f32>, [usize; 3]) {
    let (cin, [d, h, wd]) = (x.channels(), x.spatial());
    let k = g.kernel;
    let (od, oh, ow) = (g.out_len(d), g.out_len(h), g.out_len(wd));
    let (tz, ty, tx) = (g.taps(d), g.taps(h), g.taps(wd));
    let (isz, osz) = (d * h * wd, od * oh * ow);
    let mut cols = vec![0.0f32; cin * k * k * k * osz];
    let mut rows = cols.chunks_exact_mut(osz);
    for ci in 0..cin {
        let xin = &x.data[ci * isz..(ci + 1) * isz];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let row = rows.next().unwrap();
                    for oz in 0..od {
                        let iz = tz[oz * k + kz];
                        for oy in 0..oh {
                            let iy = ty[oy * k + ky];
                            if iz == usize::MAX || iy == usize::MAX {
                                continue;
                            }
                            let base = (iz * h + iy) * wd;
                            let out = &mut row[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                            for (ox, v) in out.iter_mut().enumerate() {
                                let ix = tx[ox * k + kx];
                                if ix != usize::MAX {
                                    *v = xin[base + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (cols, [od, oh, ow])
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
fn col2im(cols: &[f32], x_shape: &[usize], g: ConvGeometry) -> Vec<f32> {
    let (cin, d, h, wd) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let k = g.kernel;
    let (od, oh, ow) = (g.out_len(d), g.out_len(h), g.out_len(wd));
    let (tz, ty, tx) = (g.taps(d), g.taps(h), g.taps(wd));
    let (isz, osz) = (d * h * wd, od * oh * ow);
    let mut dx = vec![0.0f32; cin * isz];
    let mut rows = cols.chunks_exact(osz);
    for ci in 0..cin {
        let dxin = &mut dx[ci * isz..(ci + 1) * isz];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let row = rows.next().unwrap();
                    for oz in 0..od {
                        let iz = tz[oz * k + kz];
                        for oy in 0..oh {
                            let iy = ty[oy * k + ky];
                            if iz == usize::MAX || iy == usize::MAX {
                                continue;
                            }
                            let base = (iz * h + iy) * wd;
                            let src = &row[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                            for (ox, v) in src.iter().enumerate() {
                                let ix = tx[ox * k + kx];
                                if ix != usize::MAX {
                                    dxin[base + ix] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Row-major `c[m x n] = alpha * a[m x k] b[k x n] + beta * c`, with
/// explicit row and column strides for `a` and `b` so transposes are free.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (usize, usize),
    b: &[f32],
    b_strides: (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    assert!(c.len() >= m * n);
    // SAFETY: the slices cover every index the strides address: `a` is
    // m x k, `b` is k x n, `c` is m x n row-major, as asserted by callers.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// 3D convolution. `x: [Cin, D, H, W]`, `w: [Cout, Cin, k, k, k]`, `b: [Cout]`.
pub fn conv3d(x: &Tensor, w: &Tensor, b: &Tensor, g: ConvGeometry) -> Tensor {
    let cout = w.shape[0];
    assert_eq!(w.shape[1], x.channels(), "conv input channels");
    let r = w.data.len() / cout;
    let (cols, [od, oh, ow]) = im2col(x, g);
    let osz = od * oh * ow;
    let mut out = vec![0.0f32; cout * osz];
    for (co, o) in out.chunks_exact_mut(osz).enumerate() {
        o.fill(b.data[co]);
    }
    gemm(
        cout,
        r,
        osz,
        &w.data,
        (r, 1),
        &cols,
        (osz, 1),
        1.0,
        &mut out,
    );
    Tensor {
        shape: vec![cout, od, oh, ow],
        data: out,
    }
}

/// Gradients of [`conv3d`] with respect to input, weight and bias.
pub fn conv3d_backward(
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
    g: ConvGeometry,
    need_dx: bool,
) -> (Tensor, Tensor, Tensor) {
    let cout = w.shape[0];
    let r = w.data.len() / cout;
    let (cols, [od, oh, ow]) = im2col(x, g);
    let osz = od * oh * ow;
    let go = &grad_out.data;
    let db = go.chunks_exact(osz).map(|c| c.iter().sum()).collect();
    let mut dw = vec![0.0f32; w.data.len()];
    // dW = G * cols^T
    gemm(cout, osz, r, go, (osz, 1), &cols, (1, osz), 0.0, &mut dw);
    let dx = if need_dx {
        // dcols = W^T * G
        let mut dcols = vec![0.0f32; r * osz];
        gemm(r, cout, osz, &w.data, (1, r), go, (osz, 1), 0.0, &mut dcols);
        col2im(&dcols, &x.shape, g)
    } else {
        vec![0.0f32; x.data.len()]
    };
    (
        Tensor {
            shape: x.shape.clone(),
            data: dx,
        },
        Tensor {
            shape: w.shape.clone(),
            data: dw,
        },
        Tensor {
            shape: vec![cout],
            data: db,
        },
    )
}

/// Nearest-neighbour upsampling of a `[C, D, H, W]` map by an integer factor.
pub fn upsample(x: &Tensor, factor: usize) -> Tensor {
    let (c, [d, h, w]) = (x.channels(), x.spatial());
    let (od, oh, ow) = (d * factor, h * factor, w * factor);
    let mut out = Vec::with_capacity(c * od * oh * ow);
    for ch in 0..c {
        for z in 0..od {
            for y in 0..oh {
                let base = ((ch * d + z / factor) * h + y / factor) * w;
                for xo in 0..ow {
                    out.push(x.data[base + xo / factor]);
                }
            }
        }
    }
    Tensor {
        shape: vec![c, od, oh, ow],
        data: out,
    }
}

pub fn upsample_backward(x_shape: &[usize], grad_out: &Tensor, factor: usize) -> Tensor {
    let (c, d, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (od, oh, ow) = (d * factor, h * factor, w * factor);
    let mut dx = vec![0.0f32; c * d * h * w];
    let mut n = 0;
    for ch in 0..c {
        for z in 0..od {
            for y in 0..oh {
                let base = ((ch * d + z / factor) * h + y / factor) * w;
                for xo in 0..ow {
                    dx[base + xo / factor] += grad_out.data[n];
                    n += 1;
                }
            }
        }
    }
    Tensor {
        shape: x_shape.to_vec(),
        data: dx,
    }
}

/// `w: [out, in]` applied to the flattened input.
pub fn dense(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (n_out, n_in) = (w.shape[0], w.shape[1]);
    debug_assert_eq!(x.len(), n_in);
    let data = (0..n_out)
        .map(|o| {
            let row = &w.data[o * n_in..(o + 1) * n_in];
            b.data[o] + row.iter().zip(&x.data).map(|(a, b)| a * b).sum::<f32>()
        })
        .collect();
    Tensor {
        shape: vec![n_out],
        data,
    }
}

pub fn dense_backward(x: &Tensor, w: &Tensor, grad_out: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (n_out, n_in) = (w.shape[0], w.shape[1]);
    let mut dx = vec![0.0f32; n_in];
    let mut dw = vec![0.0f32; n_out * n_in];
    for o in 0..n_out {
        let go = grad_out.data[o];
        let row = &w.data[o * n_in..(o + 1) * n_in];
        let drow = &mut dw[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            dx[i] += go * row[i];
            drow[i] = go * x.data[i];
        }
    }
    (
        Tensor {
            shape: x.shape.clone(),
            data: dx,
        },
        Tensor {
            shape: w.shape.clone(),
            data: dw,
        },
        grad_out.clone(),
    )
}

#[inline]
pub fn softplus(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: (0..shape.iter().product::<usize>())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
        }
    }

    /// Direct evaluation of the convolution sum, one output at a time.
    fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, g: ConvGeometry) -> Tensor {
        let (cin, [d, h, wd]) = (x.channels(), x.spatial());
        let cout = w.shape[0];
        let k = g.kernel;
        let dims = [d, h, wd];
        let od = g.out_len(d);
        let oh = g.out_len(h);
        let ow = g.out_len(wd);
        let fetch = |ci: usize, p: [i64; 3]| -> f32 {
            let mut q = [0usize; 3];
            for a in 0..3 {
                if p[a] < 0 || p[a] >= dims[a] as i64 {
                    match g.padding {
                        Padding::Zero => return 0.0,
                        Padding::Replicate => q[a] = p[a].clamp(0, dims[a] as i64 - 1) as usize,
                    }
                } else {
                    q[a] = p[a] as usize;
                }
            }
            x.data[((ci * d + q[0]) * h + q[1]) * wd + q[2]]
        };
        let mut out = Tensor::zeros(&[cout, od, oh, ow]);
        for co in 0..cout {
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = b.data[co] as f64;
                        for ci in 0..cin {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let p = [
                                            (oz * g.stride + kz) as i64 - g.pad as i64,
                                            (oy * g.stride + ky) as i64 - g.pad as i64,
                                            (ox * g.stride + kx) as i64 - g.pad as i64,
                                        ];
                                        let wv =
                                            w.data[(((co * cin + ci) * k + kz) * k + ky) * k + kx];
                                        s += wv as f64 * fetch(ci, p) as f64;
                                    }
                                }
                            }
                        }
                        out.data[((co * od + oz) * oh + oy) * ow + ox] = s as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(stride, padding) in &[
            (1, Padding::Zero),
            (2, Padding::Replicate),
            (1, Padding::Replicate),
        ] {
            let g = ConvGeometry {
                kernel: 3,
                stride,
                pad: 1,
                padding,
            };
            let x = random(&[2, 6, 4, 5], &mut rng);
            let w = random(&[3, 2, 3, 3, 3], &mut rng);
            let b = random(&[3], &mut rng);
            let fast = conv3d(&x, &w, &b, g);
            let slow = conv_oracle(&x, &w, &b, g);
            assert_eq!(fast.shape, slow.shape);
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = ConvGeometry {
            kernel: 3,
            stride: 2,
            pad: 1,
            padding: Padding::Replicate,
        };
        let x = random(&[2, 4, 4, 4], &mut rng);
        let w = random(&[2, 2, 3, 3, 3], &mut rng);
        let b = random(&[2], &mut rng);
        let probe = random(&[2, 2, 2, 2], &mut rng);
        let loss = |x: &Tensor, w: &Tensor, b: &Tensor| -> f64 {
            conv3d(x, w, b, g)
                .data
                .iter()
                .zip(&probe.data)
                .map(|(a, p)| *a as f64 * *p as f64)
                .sum()
        };
        let (dx, dw, db) = conv3d_backward(&x, &w, &probe, g, true);
        let eps = 1e-2f32;
        for i in [0, 7, 33, 100] {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut xm = x.clone();
            xm.data[i] -= eps;
            let fd = (loss(&xp, &w, &b) - loss(&xm, &w, &b)) / (2.0 * eps as f64);
            assert!(
                (fd - dx.data[i] as f64).abs() < 1e-3,
                "dx[{i}] {fd} vs {}",
                dx.data[i]
            );
        }
        for i in [0, 13, 54, 107] {
            let mut wp = w.clone();
            wp.data[i] += eps;
            let mut wm = w.clone();
            wm.data[i] -= eps;
            let fd = (loss(&x, &wp, &b) - loss(&x, &wm, &b)) / (2.0 * eps as f64);
            assert!(
                (fd - dw.data[i] as f64).abs() < 1e-3,
                "dw[{i}] {fd} vs {}",
                dw.data[i]
            );
        }
        let sum0: f32 = probe.data[..8].iter().sum();
        assert!((db.data[0] - sum0).abs() < 1e-5);
    }

    #[test]
    fn upsample_roundtrip_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 3, 3, 3], &mut rng);
        let u = upsample(&x, 2);
        assert_eq!(u.shape, vec![2, 6, 6, 6]);
        assert_eq!(u.data[0], x.data[0]);
        let ones = Tensor::full(&u.shape, 1.0);
        let back = upsample_backward(&x.shape, &ones, 2);
        assert!(back.data.iter().all(|&v| v == 8.0));
    }

    #[test]
    fn dense_backward_is_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[5], &mut rng);
        let w = random(&[3, 5], &mut rng);
        let b = random(&[3], &mut rng);
        let y = dense(&x, &w, &b);
        let g = Tensor::full(&[3], 1.0);
        let (dx, dw, _) = dense_backward(&x, &w, &g);
        for i in 0..5 {
            let col: f32 = (0..3).map(|o| w.data[o * 5 + i]).sum();
            assert!((dx.data[i] - col).abs() < 1e-6);
        }
        assert_eq!(dw.data[5 + 2], x.data[2]);
        assert_eq!(y.shape, vec![3]);
    }
}
