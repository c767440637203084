//! Forward and backward kernels for the dense layers used by the
//! encoder–decoder networks. All kernels work on single `[C, H, W]` images.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Tensor;

/// Per-channel range of output columns/rows for which `i + d` stays inside
/// `[0, n)`.
#[inline]
fn valid_range(n: usize, d: isize) -> (usize, usize) {
    let lo = if d < 0 { (-d) as usize } else { 0 };
    let hi = if d > 0 { n.saturating_sub(d as usize) } else { n };
    (lo.min(n), hi.max(lo.min(n)))
}

/// Square-kernel convolution, stride 1, zero "same" padding.
/// `weight: [out, in, k, k]`, `bias: [out]`.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
    let (cin, h, w) = input.chw();
    let (cout, k) = (weight.shape()[0], weight.shape()[2]);
    debug_assert_eq!(weight.shape()[1], cin);
    let pad = (k / 2) as isize;
    let mut out = Tensor::zeros(&[cout, h, w]);
    let wd = weight.data();
    for o in 0..cout {
        let op = out.plane_mut(o);
        op.fill(bias.data()[o]);
        for i in 0..cin {
            let ip = input.plane(i);
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = valid_range(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = valid_range(w, dx);
                    let wv = wd[((o * cin + i) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let orow = &mut op[y * w + x0..y * w + x1];
                        let start = (sy * w) as isize + x0 as isize + dx;
                        let irow = &ip[start as usize..start as usize + (x1 - x0)];
                        for (a, b) in orow.iter_mut().zip(irow) {
                            *a += wv * b;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(d input, d weight, d bias)`.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    need_input: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (cin, h, w) = input.chw();
    let (cout, k) = (weight.shape()[0], weight.shape()[2]);
    let pad = (k / 2) as isize;
    let mut g_in = need_input.then(|| Tensor::zeros(&[cin, h, w]));
    let mut g_w = Tensor::zeros(weight.shape());
    let mut g_b = Tensor::zeros(&[cout]);
    let wd = weight.data();
    for o in 0..cout {
        let gp = grad_out.plane(o);
        g_b.data_mut()[o] = gp.iter().sum();
        for i in 0..cin {
            let ip = input.plane(i);
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = valid_range(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = valid_range(w, dx);
                    let widx = ((o * cin + i) * k + ky) * k + kx;
                    let wv = wd[widx];
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let grow = &gp[y * w + x0..y * w + x1];
                        let start = ((sy * w) as isize + x0 as isize + dx) as usize;
                        let irow = &ip[start..start + (x1 - x0)];
                        acc += grow.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
                    }
                    g_w.data_mut()[widx] = acc;
                    if let Some(gi) = g_in.as_mut() {
                        if wv == 0.0 {
                            continue;
                        }
                        let gip = gi.plane_mut(i);
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let start = ((sy * w) as isize + x0 as isize + dx) as usize;
                            let grow = &gp[y * w + x0..y * w + x1];
                            for (a, b) in gip[start..start + (x1 - x0)].iter_mut().zip(grow) {
                                *a += wv * b;
                            }
                        }
                    }
                }
            }
        }
    }
    (g_in, g_w, g_b)
}

/// Per-channel normalization over the spatial extent, no affine parameters.
/// Returns the output and the per-channel inverse standard deviations.
pub fn instance_norm(input: &Tensor, eps: f64) -> (Tensor, Vec<f64>) {
    let (c, h, w) = input.chw();
    let n = (h * w) as f64;
    let mut out = Tensor::zeros(&[c, h, w]);
    let mut inv_std = vec![0.0; c];
    for k in 0..c {
        let p = input.plane(k);
        let mean = p.iter().sum::<f64>() / n;
        let var = p.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let is = 1.0 / libm::sqrt(var + eps);
        inv_std[k] = is;
        for (o, v) in out.plane_mut(k).iter_mut().zip(p) {
            *o = (v - mean) * is;
        }
    }
    (out, inv_std)
}

pub fn instance_norm_backward(output: &Tensor, inv_std: &[f64], grad_out: &Tensor) -> Tensor {
    let (c, h, w) = output.chw();
    let n = (h * w) as f64;
    let mut g = Tensor::zeros(&[c, h, w]);
    for k in 0..c {
        let y = output.plane(k);
        let go = grad_out.plane(k);
        let mean_g = go.iter().sum::<f64>() / n;
        let mean_gy = go.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
        for ((gi, a), b) in g.plane_mut(k).iter_mut().zip(go).zip(y) {
            *gi = inv_std[k] * (a - mean_g - b * mean_gy);
        }
    }
    g
}

pub fn leaky_relu(input: &Tensor, slope: f64) -> Tensor {
    input.map(|v| if v > 0.0 { v } else { slope * v })
}

pub fn leaky_relu_backward(input: &Tensor, slope: f64, grad_out: &Tensor) -> Tensor {
    let mut g = grad_out.clone();
    for (gv, &x) in g.data_mut().iter_mut().zip(input.data()) {
        if x <= 0.0 {
            *gv *= slope;
        }
    }
    g
}

/// 2×2 average pooling; height and width must be even.
pub fn avg_pool2(input: &Tensor) -> Tensor {
    let (c, h, w) = input.chw();
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[c, ho, wo]);
    for k in 0..c {
        let ip = input.plane(k);
        let op = out.plane_mut(k);
        for y in 0..ho {
            for x in 0..wo {
                let i = 2 * y * w + 2 * x;
                op[y * wo + x] = 0.25 * (ip[i] + ip[i + 1] + ip[i + w] + ip[i + w + 1]);
            }
        }
    }
    out
}

pub fn avg_pool2_backward(grad_out: &Tensor) -> Tensor {
    let (c, ho, wo) = grad_out.chw();
    let (h, w) = (ho * 2, wo * 2);
    let mut g = Tensor::zeros(&[c, h, w]);
    for k in 0..c {
        let go = grad_out.plane(k);
        let gp = g.plane_mut(k);
        for y in 0..h {
            for x in 0..w {
                gp[y * w + x] = 0.25 * go[(y / 2) * wo + x / 2];
            }
        }
    }
    g
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2(input: &Tensor) -> Tensor {
    let (c, h, w) = input.chw();
    let (ho, wo) = (h * 2, w * 2);
    let mut out = Tensor::zeros(&[c, ho, wo]);
    for k in 0..c {
        let ip = input.plane(k);
        let op = out.plane_mut(k);
        for y in 0..ho {
            for x in 0..wo {
                op[y * wo + x] = ip[(y / 2) * w + x / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(grad_out: &Tensor) -> Tensor {
    let (c, ho, wo) = grad_out.chw();
    let (h, w) = (ho / 2, wo / 2);
    let mut g = Tensor::zeros(&[c, h, w]);
    for k in 0..c {
        let go = grad_out.plane(k);
        let gp = g.plane_mut(k);
        for y in 0..ho {
            for x in 0..wo {
                gp[(y / 2) * w + x / 2] += go[y * wo + x];
            }
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
        let (cin, h, w) = input.chw();
        let (cout, k) = (weight.shape()[0], weight.shape()[2]);
        let pad = (k / 2) as isize;
        let mut out = Tensor::zeros(&[cout, h, w]);
        for o in 0..cout {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut acc = bias.data()[o];
                    for i in 0..cin {
                        for ky in 0..k as isize {
                            for kx in 0..k as isize {
                                let (sy, sx) = (y + ky - pad, x + kx - pad);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                let wv = weight.data()
                                    [((o * cin + i) * k + ky as usize) * k + kx as usize];
                                acc += wv * input.at3(i, sy as usize, sx as usize);
                            }
                        }
                    }
                    out.set3(o, y as usize, x as usize, acc);
                }
            }
        }
        out
    }

    fn ramp(shape: &[usize], a: f64, b: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| libm::sin(a * i as f64 + b)).collect()).unwrap()
    }

    #[test]
    fn conv_matches_naive_loop() {
        let input = ramp(&[2, 5, 6], 0.37, 0.1);
        for k in [1usize, 3] {
            let weight = ramp(&[3, 2, k, k], 0.91, 0.4);
            let bias = ramp(&[3], 1.3, 0.0);
            let fast = conv2d(&input, &weight, &bias);
            let slow = naive_conv(&input, &weight, &bias);
            assert!(fast.max_abs_diff(&slow) < 1e-12);
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), g> is linear in x and in w, so the VJP must satisfy
        // <conv(x) - b, g> = <x, dX> = <w, dW>.
        let input = ramp(&[2, 4, 5], 0.21, 0.3);
        let weight = ramp(&[3, 2, 3, 3], 0.77, 0.9);
        let bias = Tensor::zeros(&[3]);
        let g = ramp(&[3, 4, 5], 0.53, 0.2);
        let out = conv2d(&input, &weight, &bias);
        let lhs: f64 = out.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let (gi, gw, _) = conv2d_backward(&input, &weight, &g, true);
        let via_x: f64 = input.data().iter().zip(gi.unwrap().data()).map(|(a, b)| a * b).sum();
        let via_w: f64 = weight.data().iter().zip(gw.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-10);
        assert!((lhs - via_w).abs() < 1e-10);
    }

    #[test]
    fn pool_and_upsample_are_adjoint_up_to_scale() {
        let x = ramp(&[2, 4, 4], 0.3, 0.0);
        let y = ramp(&[2, 2, 2], 0.7, 0.5);
        let lhs: f64 = avg_pool2(&x).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(avg_pool2_backward(&y).data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        let up = upsample2(&y);
        assert_eq!(up.shape(), &[2, 4, 4]);
        let lhs: f64 = up.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = y.data().iter().zip(upsample2_backward(&x).data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn instance_norm_zero_mean_unit_variance() {
        let x = ramp(&[3, 4, 4], 0.9, 0.2);
        let (y, _) = instance_norm(&x, 0.0);
        for k in 0..3 {
            let p = y.plane(k);
            let m: f64 = p.iter().sum::<f64>() / 16.0;
            let v: f64 = p.iter().map(|a| a * a).sum::<f64>() / 16.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-10);
        }
    }
}
