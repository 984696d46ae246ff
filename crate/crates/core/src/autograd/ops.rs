//! Primitive differentiable operations.

use super::{Graph, Var};
use crate::tensor::Tensor;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// tanh approximation of GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn conv_out(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Range of output columns whose tap `k` lands inside `[0, n)`.
fn valid_range(n: usize, out: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // i = o * stride + k - pad, need 0 <= i < n
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi_excl = if n + pad <= k { 0 } else { ((n + pad - k - 1) / stride + 1).min(out) };
    (lo, hi_excl.max(lo))
}

pub(crate) fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (cin, h, wd) = x.chw();
    let ws = w.shape();
    assert_eq!(ws.len(), 4, "conv weight must be [Cout, Cin, k, k]");
    let (cout, k) = (ws[0], ws[2]);
    assert_eq!(ws[1], cin, "conv input channels {} vs weight {:?}", cin, ws);
    assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "conv kernel larger than padded input");
    let oh = conv_out(h, k, stride, pad);
    let ow = conv_out(wd, k, stride, pad);
    let xd = x.data();
    let wdata = w.data();
    let mut out = vec![0.0; cout * oh * ow];
    for co in 0..cout {
        let plane = &mut out[co * oh * ow..(co + 1) * oh * ow];
        if let Some(b) = b {
            plane.fill(b.data()[co]);
        }
        for ci in 0..cin {
            let xin = &xd[ci * h * wd..(ci + 1) * h * wd];
            for ky in 0..k {
                let (oy0, oy1) = valid_range(h, oh, ky, stride, pad);
                for kx in 0..k {
                    let wv = wdata[((co * cin + ci) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox0, ox1) = valid_range(wd, ow, kx, stride, pad);
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let row = &xin[iy * wd..(iy + 1) * wd];
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            let off = ox0 + kx - pad;
                            for (o, &v) in orow[ox0..ox1].iter_mut().zip(&row[off..off + (ox1 - ox0)]) {
                                *o += wv * v;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                orow[ox] += wv * row[ox * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![cout, oh, ow], out)
}

/// Returns `(dx, dw, db)`.
fn conv2d_backward(gout: &Tensor, x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> (Tensor, Tensor, Tensor) {
    let (cin, h, wd) = x.chw();
    let (cout, oh, ow) = gout.chw();
    let k = w.shape()[2];
    let xd = x.data();
    let gd = gout.data();
    let wdata = w.data();
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; cout];
    for co in 0..cout {
        let gplane = &gd[co * oh * ow..(co + 1) * oh * ow];
        db[co] = gplane.iter().sum();
        for ci in 0..cin {
            let xin = &xd[ci * h * wd..(ci + 1) * h * wd];
            let dxin = &mut dx[ci * h * wd..(ci + 1) * h * wd];
            for ky in 0..k {
                let (oy0, oy1) = valid_range(h, oh, ky, stride, pad);
                for kx in 0..k {
                    let widx = ((co * cin + ci) * k + ky) * k + kx;
                    let wv = wdata[widx];
                    let (ox0, ox1) = valid_range(wd, ow, kx, stride, pad);
                    let mut acc = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        for ox in ox0..ox1 {
                            let ix = ox * stride + kx - pad;
                            let gv = grow[ox];
                            acc += gv * xin[iy * wd + ix];
                            dxin[iy * wd + ix] += gv * wv;
                        }
                    }
                    dw[widx] += acc;
                }
            }
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(w.shape().to_vec(), dw),
        Tensor::from_parts(vec![cout], db),
    )
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.custom(&[a, b], v, Box::new(|g, _, _| vec![g.clone(), g.clone()]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.custom(&[a, b], v, Box::new(|g, _, _| vec![g.clone(), g.scale(-1.0)]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.custom(&[a, b], v, Box::new(|g, _, p| vec![g.zip_map(p[1], |g, y| g * y), g.zip_map(p[0], |g, x| g * x)]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.custom(&[a], v, Box::new(move |g, _, _| vec![g.scale(s)]))
    }

    /// `x[C,H,W] * m[1,H,W]`, broadcasting the map across channels.
    pub fn mul_map(&mut self, x: Var, m: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        assert_eq!(self.shape(m), &[1, h, w], "mul_map: map shape");
        let xv = self.value(x);
        let mv = self.value(m);
        let hw = h * w;
        let v = Tensor::from_fn(&[c, h, w], |i| xv.data()[i] * mv.data()[i % hw]);
        self.custom(
            &[x, m],
            v,
            Box::new(move |g, _, p| {
                let (xv, mv) = (p[0], p[1]);
                let dx = Tensor::from_fn(&[c, h, w], |i| g.data()[i] * mv.data()[i % hw]);
                let mut dm = vec![0.0; hw];
                for (i, (&gv, &xv)) in g.data().iter().zip(xv.data()).enumerate() {
                    dm[i % hw] += gv * xv;
                }
                vec![dx, Tensor::from_parts(vec![1, h, w], dm)]
            }),
        )
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        self.custom(
            &[a],
            v,
            Box::new(|g, _, p| {
                vec![g.zip_map(p[0], |g, x| {
                    if x > 0.0 {
                        g
                    } else if x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                })]
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.custom(&[a], v, Box::new(|g, out, _| vec![g.zip_map(out, |g, s| g * s * (1.0 - s))]))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.custom(&[a], v, Box::new(|g, _, p| vec![g.zip_map(p[0], |g, x| g * gelu_grad(x))]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.custom(&[a], v, Box::new(|g, _, p| vec![g.zip_map(p[0], |g, x| if x > 0.0 { g } else { 0.0 })]))
    }

    /// `ln(a + eps)`.
    pub fn ln_eps(&mut self, a: Var, eps: f64) -> Var {
        let v = self.value(a).map(|x| (x + eps).ln());
        self.custom(&[a], v, Box::new(move |g, _, p| vec![g.zip_map(p[0], |g, x| g / (x + eps))]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let shape = self.shape(a).to_vec();
        self.custom(&[a], v, Box::new(move |g, _, _| vec![Tensor::full(&shape, g.item())]))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Concatenate `[C_i, H, W]` tensors along channels.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let (_, h, w) = self.value(parts[0]).chw();
        let chans: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (c, ph, pw) = self.value(p).chw();
                assert_eq!((ph, pw), (h, w), "concat: spatial mismatch");
                c
            })
            .collect();
        let mut data = Vec::with_capacity(chans.iter().sum::<usize>() * h * w);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let total: usize = chans.iter().sum();
        let v = Tensor::from_parts(vec![total, h, w], data);
        self.custom(
            parts,
            v,
            Box::new(move |g, _, _| {
                let mut off = 0;
                chans
                    .iter()
                    .map(|&c| {
                        let n = c * h * w;
                        let t = Tensor::from_parts(vec![c, h, w], g.data()[off..off + n].to_vec());
                        off += n;
                        t
                    })
                    .collect()
            }),
        )
    }

    /// 2D convolution with zero padding; `w` is `[Cout, Cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let v = conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad);
        let inputs: Vec<Var> = match b {
            Some(b) => vec![x, w, b],
            None => vec![x, w],
        };
        let has_bias = b.is_some();
        self.custom(
            &inputs,
            v,
            Box::new(move |g, _, p| {
                let (dx, dw, db) = conv2d_backward(g, p[0], p[1], stride, pad);
                if has_bias {
                    vec![dx, dw, db]
                } else {
                    vec![dx, dw]
                }
            }),
        )
    }

    /// Group normalization with per-channel affine `gamma`, `beta` (`[C]`).
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let xv = self.value(x);
        let (c, h, w) = xv.chw();
        assert!(groups > 0 && c % groups == 0, "group_norm: {c} channels, {groups} groups");
        let gsz = (c / groups) * h * w;
        let gam = self.value(gamma).data().to_vec();
        let bet = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; groups];
        for gi in 0..groups {
            let seg = &xv.data()[gi * gsz..(gi + 1) * gsz];
            let mu = seg.iter().sum::<f64>() / gsz as f64;
            let var = seg.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / gsz as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[gi] = is;
            for (o, v) in xhat[gi * gsz..(gi + 1) * gsz].iter_mut().zip(seg) {
                *o = (v - mu) * is;
            }
        }
        let hw = h * w;
        let out = Tensor::from_fn(&[c, h, w], |i| gam[i / hw] * xhat[i] + bet[i / hw]);
        self.custom(
            &[x, gamma, beta],
            out,
            Box::new(move |g, _, _| {
                let gd = g.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..gd.len() {
                    dgamma[i / hw] += gd[i] * xhat[i];
                    dbeta[i / hw] += gd[i];
                }
                let mut dx = vec![0.0; gd.len()];
                for gi in 0..groups {
                    let r = gi * gsz..(gi + 1) * gsz;
                    let dxhat: Vec<f64> = r.clone().map(|i| gd[i] * gam[i / hw]).collect();
                    let m1 = dxhat.iter().sum::<f64>() / gsz as f64;
                    let m2 = dxhat.iter().zip(&xhat[r.clone()]).map(|(a, b)| a * b).sum::<f64>() / gsz as f64;
                    for (j, i) in r.enumerate() {
                        dx[i] = inv_std[gi] * (dxhat[j] - m1 - xhat[i] * m2);
                    }
                }
                vec![
                    Tensor::from_parts(vec![c, h, w], dx),
                    Tensor::from_parts(vec![c], dgamma),
                    Tensor::from_parts(vec![c], dbeta),
                ]
            }),
        )
    }

    /// Per-channel `scale * x + shift`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let hw = h * w;
        let sc = self.value(scale).data().to_vec();
        let sh = self.value(shift).data();
        let xv = self.value(x);
        let out = Tensor::from_fn(&[c, h, w], |i| sc[i / hw] * xv.data()[i] + sh[i / hw]);
        self.custom(
            &[x, scale, shift],
            out,
            Box::new(move |g, _, p| {
                let mut dsc = vec![0.0; c];
                let mut dsh = vec![0.0; c];
                for (i, (&gv, &xv)) in g.data().iter().zip(p[0].data()).enumerate() {
                    dsc[i / hw] += gv * xv;
                    dsh[i / hw] += gv;
                }
                vec![
                    Tensor::from_fn(&[c, h, w], |i| g.data()[i] * sc[i / hw]),
                    Tensor::from_parts(vec![c], dsc),
                    Tensor::from_parts(vec![c], dsh),
                ]
            }),
        )
    }

    /// Nearest-neighbour upsampling by an integer factor, times `gain`.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize, gain: f64) -> Var {
        let (c, h, w) = self.value(x).chw();
        let (oh, ow) = (h * factor, w * factor);
        let xv = self.value(x);
        let out = Tensor::from_fn(&[c, oh, ow], |i| {
            let ch = i / (oh * ow);
            let r = i % (oh * ow);
            let (y, xx) = (r / ow, r % ow);
            gain * xv.data()[(ch * h + y / factor) * w + xx / factor]
        });
        self.custom(
            &[x],
            out,
            Box::new(move |g, _, _| {
                let mut dx = vec![0.0; c * h * w];
                for (i, &gv) in g.data().iter().enumerate() {
                    let ch = i / (oh * ow);
                    let r = i % (oh * ow);
                    let (y, xx) = (r / ow, r % ow);
                    dx[(ch * h + y / factor) * w + xx / factor] += gain * gv;
                }
                vec![Tensor::from_parts(vec![c, h, w], dx)]
            }),
        )
    }

    /// Crop a `[C, H, W]` tensor to rows `[0, h)` and columns `[0, w)`.
    pub fn crop_top_left(&mut self, x: Var, h: usize, w: usize) -> Var {
        let (c, ih, iw) = self.value(x).chw();
        assert!(h <= ih && w <= iw, "crop larger than input");
        let xv = self.value(x);
        let out = Tensor::from_fn(&[c, h, w], |i| {
            let ch = i / (h * w);
            let r = i % (h * w);
            xv.data()[(ch * ih + r / w) * iw + r % w]
        });
        self.custom(
            &[x],
            out,
            Box::new(move |g, _, _| {
                let mut dx = vec![0.0; c * ih * iw];
                for (i, &gv) in g.data().iter().enumerate() {
                    let ch = i / (h * w);
                    let r = i % (h * w);
                    dx[(ch * ih + r / w) * iw + r % w] = gv;
                }
                vec![Tensor::from_parts(vec![c, ih, iw], dx)]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{assert_grads_match, rand_tensor};

    #[test]
    fn conv_matches_direct_sum() {
        let x = rand_tensor(&[2, 5, 6], 1);
        let w = rand_tensor(&[3, 2, 3, 3], 2);
        let b = rand_tensor(&[3], 3);
        for &(stride, pad) in &[(1, 1), (2, 1), (1, 0), (2, 0)] {
            let y = conv2d_forward(&x, &w, Some(&b), stride, pad);
            let (_, oh, ow) = y.chw();
            for co in 0..3 {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.data()[co];
                        for ci in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * stride + ky) as i64 - pad as i64;
                                    let ix = (ox * stride + kx) as i64 - pad as i64;
                                    if iy < 0 || ix < 0 || iy >= 5 || ix >= 6 {
                                        continue;
                                    }
                                    acc += w.data()[((co * 2 + ci) * 3 + ky) * 3 + kx]
                                        * x.at3(ci, iy as usize, ix as usize);
                                }
                            }
                        }
                        assert!((y.at3(co, oy, ox) - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        assert_grads_match(
            &[rand_tensor(&[4, 6, 6], 11), rand_tensor(&[4, 4, 3, 3], 12), rand_tensor(&[4], 13)],
            |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1);
                let y = g.gelu(y);
                let gamma = g.constant(Tensor::full(&[4], 1.3));
                let beta = g.constant(Tensor::full(&[4], 0.2));
                let y = g.group_norm(y, gamma, beta, 2, 1e-5);
                let y = g.sigmoid(y);
                let y2 = g.mul(y, y);
                g.sum(y2)
            },
            1e-5,
        );
        // broadcasting, concat, upsample, affine
        assert_grads_match(
            &[rand_tensor(&[2, 3, 3], 21), rand_tensor(&[1, 3, 3], 22), rand_tensor(&[3], 23)],
            |g, v| {
                let y = g.mul_map(v[0], v[1]);
                let a = g.abs(y);
                let c = g.concat(&[a, v[1]]);
                let u = g.upsample_nearest(c, 2, 0.5);
                let shift = g.constant(Tensor::full(&[3], 0.1));
                let z = g.channel_affine(u, v[2], shift);
                let z = g.relu(z);
                let z = g.crop_top_left(z, 5, 4);
                let m = g.mean(z);
                let s = g.scale(m, 2.0);
                g.mul(s, s)
            },
            1e-5,
        );
    }
}
