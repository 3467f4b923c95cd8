//! Network layers with explicit forward caches and backward passes.
//!
//! Each layer holds indices into a [`ParamSet`]; `forward` returns the
//! output and whatever the backward pass needs, and `backward` accumulates
//! parameter gradients into a parameter-shaped set and returns the gradient
//! with respect to the layer input.

use crate::real::Real;
use crate::tensor::{Act, ParamSet};

pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn silu<T: Real>(x: &Act<T>) -> Act<T> {
    Act::from_vec(x.c, x.h, x.w, x.data.iter().map(|&v| v * sigmoid(v)).collect())
}

pub fn silu_vec<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

/// d silu(x) / dx = σ(x)(1 + x(1 − σ(x))).
fn silu_prime<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

pub fn silu_backward<T: Real>(x: &Act<T>, grad: &Act<T>) -> Act<T> {
    Act::from_vec(
        x.c,
        x.h,
        x.w,
        x.data
            .iter()
            .zip(&grad.data)
            .map(|(&v, &g)| g * silu_prime(v))
            .collect(),
    )
}

pub fn silu_backward_vec<T: Real>(x: &[T], grad: &[T]) -> Vec<T> {
    x.iter().zip(grad).map(|(&v, &g)| g * silu_prime(v)).collect()
}

/// Output columns `ox` whose tap `ox * s + kx - pad` lands inside `0..w`.
fn valid_cols(ow: usize, w: usize, s: usize, kx: usize, pad: isize) -> (usize, usize) {
    let first = pad - kx as isize;
    let lo = if first <= 0 { 0 } else { (first as usize).div_ceil(s) };
    let last = w as isize - 1 + pad - kx as isize;
    let hi = if last < 0 { 0 } else { (last as usize / s + 1).min(ow) };
    (lo.min(hi), hi)
}

/// Square 2-D convolution with zero padding `k / 2`.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: usize,
    pub bias: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
}

pub struct ConvCache<T> {
    /// im2col matrix (`cin·k² × oh·ow`); empty for 1×1 stride-1 convs,
    /// whose columns are the input itself.
    cols: Vec<T>,
    input: Option<Act<T>>,
    h: usize,
    w: usize,
}

impl Conv {
    /// Registers weights `[cout, cin, k, k]` and bias `[cout]`.
    pub fn new<T: Real>(
        params: &mut ParamSet<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        weight: Vec<T>,
    ) -> Self {
        let w = params.push(format!("{name}.weight"), vec![cout, cin, k, k], weight);
        let b = params.push(format!("{name}.bias"), vec![cout], vec![T::zero(); cout]);
        Self {
            weight: w,
            bias: b,
            cin,
            cout,
            k,
            stride,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_size(&self, n: usize) -> usize {
        let pad = self.k / 2;
        (n + 2 * pad - self.k) / self.stride + 1
    }

    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }

    fn im2col<T: Real>(&self, x: &Act<T>) -> Vec<T> {
        let (k, s, pad) = (self.k, self.stride, (self.k / 2) as isize);
        let (oh, ow) = (self.out_size(x.h), self.out_size(x.w));
        let zero = T::zero();
        let mut cols = Vec::with_capacity(self.fan_in() * oh * ow);
        for ci in 0..x.c {
            let plane = x.plane(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let (lo, hi) = valid_cols(ow, x.w, s, kx, pad);
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - pad;
                        if iy < 0 || iy >= x.h as isize {
                            cols.resize(cols.len() + ow, zero);
                            continue;
                        }
                        let src = &plane[iy as usize * x.w..(iy as usize + 1) * x.w];
                        cols.resize(cols.len() + lo, zero);
                        if s == 1 {
                            let off = (lo + kx) - pad as usize;
                            cols.extend_from_slice(&src[off..off + hi - lo]);
                        } else {
                            cols.extend((lo..hi).map(|ox| src[ox * s + kx - pad as usize]));
                        }
                        cols.resize(cols.len() + ow - hi, zero);
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Real>(&self, cols: &[T], h: usize, w: usize) -> Act<T> {
        let (k, s, pad) = (self.k, self.stride, (self.k / 2) as isize);
        let (oh, ow) = (self.out_size(h), self.out_size(w));
        let mut x = Act::zeros(self.cin, h, w);
        for ci in 0..self.cin {
            let plane = x.plane_mut(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                    let (lo, hi) = valid_cols(ow, w, s, kx, pad);
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row_dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        let row_src = &src[oy * ow..(oy + 1) * ow];
                        for ox in lo..hi {
                            let p = &mut row_dst[ox * s + kx - pad as usize];
                            *p = *p + row_src[ox];
                        }
                    }
                }
            }
        }
        x
    }

    pub fn forward<T: Real>(&self, p: &ParamSet<T>, x: &Act<T>) -> (Act<T>, ConvCache<T>) {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (oh, ow) = (self.out_size(x.h), self.out_size(x.w));
        let mut out = Act::zeros(self.cout, oh, ow);
        let bias = p.get(self.bias);
        for co in 0..self.cout {
            out.plane_mut(co).iter_mut().for_each(|v| *v = bias[co]);
        }
        let (cols, input) = if self.pointwise() {
            (Vec::new(), Some(x.clone()))
        } else {
            (self.im2col(x), None)
        };
        let b = if self.pointwise() { &x.data } else { &cols };
        T::gemm(
            self.cout,
            self.fan_in(),
            oh * ow,
            T::one(),
            p.get(self.weight),
            false,
            b,
            false,
            T::one(),
            &mut out.data,
        );
        (
            out,
            ConvCache {
                cols,
                input,
                h: x.h,
                w: x.w,
            },
        )
    }

    /// Accumulates weight and bias gradients; returns the input gradient
    /// when `need_input` is set.
    pub fn backward<T: Real>(
        &self,
        p: &ParamSet<T>,
        cache: &ConvCache<T>,
        grad: &Act<T>,
        grads: &mut ParamSet<T>,
        need_input: bool,
    ) -> Option<Act<T>> {
        let ohw = grad.hw();
        let cols = match &cache.input {
            Some(x) => &x.data,
            None => &cache.cols,
        };
        T::gemm(
            self.cout,
            ohw,
            self.fan_in(),
            T::one(),
            &grad.data,
            false,
            cols,
            true,
            T::one(),
            grads.get_mut(self.weight),
        );
        let db = grads.get_mut(self.bias);
        for co in 0..self.cout {
            db[co] = db[co] + grad.plane(co).iter().copied().sum::<T>();
        }
        if !need_input {
            return None;
        }
        let mut dcols = vec![T::zero(); self.fan_in() * ohw];
        T::gemm(
            self.fan_in(),
            self.cout,
            ohw,
            T::one(),
            p.get(self.weight),
            true,
            &grad.data,
            false,
            T::zero(),
            &mut dcols,
        );
        Some(if self.pointwise() {
            Act::from_vec(self.cin, cache.h, cache.w, dcols)
        } else {
            self.col2im(&dcols, cache.h, cache.w)
        })
    }
}

/// Group normalization with a per-channel affine transform.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: usize,
    pub beta: usize,
    pub channels: usize,
    pub groups: usize,
}

pub struct GroupNormCache<T> {
    xhat: Act<T>,
    inv_std: Vec<T>,
}

const GN_EPS: f64 = 1e-5;

impl GroupNorm {
    pub fn new<T: Real>(params: &mut ParamSet<T>, name: &str, channels: usize, groups: usize) -> Self {
        assert!(groups > 0 && channels.is_multiple_of(groups), "groups must divide channels");
        let gamma = params.push(format!("{name}.gamma"), vec![channels], vec![T::one(); channels]);
        let beta = params.push(format!("{name}.beta"), vec![channels], vec![T::zero(); channels]);
        Self {
            gamma,
            beta,
            channels,
            groups,
        }
    }

    pub fn forward<T: Real>(&self, p: &ParamSet<T>, x: &Act<T>) -> (Act<T>, GroupNormCache<T>) {
        let cg = self.channels / self.groups;
        let span = cg * x.hw();
        let n = T::of(span as f64);
        let (gamma, beta) = (p.get(self.gamma), p.get(self.beta));
        let mut xhat = Act::zeros(x.c, x.h, x.w);
        let mut out = Act::zeros(x.c, x.h, x.w);
        let mut inv_std = Vec::with_capacity(self.groups);
        for g in 0..self.groups {
            let xs = &x.data[g * span..(g + 1) * span];
            let mean = xs.iter().copied().sum::<T>() / n;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + T::of(GN_EPS)).sqrt();
            inv_std.push(is);
            for (i, &v) in xs.iter().enumerate() {
                let idx = g * span + i;
                let c = idx / x.hw();
                let xh = (v - mean) * is;
                xhat.data[idx] = xh;
                out.data[idx] = gamma[c] * xh + beta[c];
            }
        }
        (out, GroupNormCache { xhat, inv_std })
    }

    pub fn backward<T: Real>(
        &self,
        p: &ParamSet<T>,
        cache: &GroupNormCache<T>,
        grad: &Act<T>,
        grads: &mut ParamSet<T>,
    ) -> Act<T> {
        let hw = grad.hw();
        let cg = self.channels / self.groups;
        let span = cg * hw;
        let n = T::of(span as f64);
        let gamma = p.get(self.gamma);
        {
            let dg = grads.get_mut(self.gamma);
            for c in 0..self.channels {
                let s: T = grad
                    .plane(c)
                    .iter()
                    .zip(cache.xhat.plane(c))
                    .map(|(&g, &xh)| g * xh)
                    .sum();
                dg[c] = dg[c] + s;
            }
        }
        {
            let db = grads.get_mut(self.beta);
            for c in 0..self.channels {
                db[c] = db[c] + grad.plane(c).iter().copied().sum::<T>();
            }
        }
        let mut dx = Act::zeros(grad.c, grad.h, grad.w);
        for g in 0..self.groups {
            let range = g * span..(g + 1) * span;
            let dxhat: Vec<T> = range
                .clone()
                .map(|idx| grad.data[idx] * gamma[idx / hw])
                .collect();
            let xh = &cache.xhat.data[range.clone()];
            let sum_d: T = dxhat.iter().copied().sum();
            let sum_dx: T = dxhat.iter().zip(xh).map(|(&d, &x)| d * x).sum();
            let k = cache.inv_std[g] / n;
            for (i, idx) in range.enumerate() {
                dx.data[idx] = k * (n * dxhat[i] - sum_d - xh[i] * sum_dx);
            }
        }
        dx
    }
}

/// Dense layer `y = Wx + b` with `W` shaped `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<T: Real>(params: &mut ParamSet<T>, name: &str, din: usize, dout: usize, weight: Vec<T>) -> Self {
        let w = params.push(format!("{name}.weight"), vec![dout, din], weight);
        let b = params.push(format!("{name}.bias"), vec![dout], vec![T::zero(); dout]);
        Self {
            weight: w,
            bias: b,
            din,
            dout,
        }
    }

    pub fn forward<T: Real>(&self, p: &ParamSet<T>, x: &[T]) -> Vec<T> {
        let mut y = p.get(self.bias).to_vec();
        T::gemm(self.dout, self.din, 1, T::one(), p.get(self.weight), false, x, false, T::one(), &mut y);
        y
    }

    pub fn backward<T: Real>(&self, p: &ParamSet<T>, x: &[T], grad: &[T], grads: &mut ParamSet<T>) -> Vec<T> {
        T::gemm(self.dout, 1, self.din, T::one(), grad, false, x, false, T::one(), grads.get_mut(self.weight));
        let db = grads.get_mut(self.bias);
        for (d, &g) in db.iter_mut().zip(grad) {
            *d = *d + g;
        }
        let mut dx = vec![T::zero(); self.din];
        T::gemm(self.din, self.dout, 1, T::one(), p.get(self.weight), true, grad, false, T::zero(), &mut dx);
        dx
    }
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2<T: Real>(x: &Act<T>) -> Act<T> {
    let (h, w) = (2 * x.h, 2 * x.w);
    let mut out = Act::zeros(x.c, h, w);
    for c in 0..x.c {
        let src = x.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = src[(y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Real>(grad: &Act<T>) -> Act<T> {
    let (h, w) = (grad.h / 2, grad.w / 2);
    let mut out = Act::zeros(grad.c, h, w);
    for c in 0..grad.c {
        let src = grad.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..grad.h {
            for x in 0..grad.w {
                let d = &mut dst[(y / 2) * w + x / 2];
                *d = *d + src[y * grad.w + x];
            }
        }
    }
    out
}

/// Sinusoidal embedding of a scalar time, `dim` even: the first half are
/// sines and the second half cosines of `1000·t` at geometric frequencies.
pub fn time_embedding<T: Real>(t: f64, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let mut out = vec![T::zero(); dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = 1000.0 * t * freq;
        out[i] = T::of(arg.sin());
        out[half + i] = T::of(arg.cos());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize, k: f64) -> Act<f64> {
        Act::from_vec(c, h, w, (0..c * h * w).map(|i| (i as f64 * k).sin()).collect())
    }

    fn conv_naive(conv: &Conv, p: &ParamSet<f64>, x: &Act<f64>) -> Act<f64> {
        let pad = (conv.k / 2) as isize;
        let oh = (x.h + 2 * (conv.k / 2) - conv.k) / conv.stride + 1;
        let ow = (x.w + 2 * (conv.k / 2) - conv.k) / conv.stride + 1;
        let (wt, b) = (p.get(conv.weight), p.get(conv.bias));
        let mut out = Act::zeros(conv.cout, oh, ow);
        for co in 0..conv.cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b[co];
                    for ci in 0..conv.cin {
                        for ky in 0..conv.k {
                            for kx in 0..conv.k {
                                let iy = (oy * conv.stride + ky) as isize - pad;
                                let ix = (ox * conv.stride + kx) as isize - pad;
                                if iy >= 0 && ix >= 0 && (iy as usize) < x.h && (ix as usize) < x.w {
                                    s += wt[((co * conv.cin + ci) * conv.k + ky) * conv.k + kx]
                                        * x.data[(ci * x.h + iy as usize) * x.w + ix as usize];
                                }
                            }
                        }
                    }
                    out.data[(co * oh + oy) * ow + ox] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        for (k, stride, h, w) in [(3, 1, 6, 8), (3, 2, 6, 8), (1, 1, 6, 8), (3, 2, 5, 7), (3, 1, 1, 2), (1, 2, 3, 5)] {
            let mut p = ParamSet::<f64>::default();
            let wlen = 4 * 3 * k * k;
            let conv = Conv::new(&mut p, "c", 3, 4, k, stride, (0..wlen).map(|i| (i as f64 * 0.3).cos()).collect());
            p.get_mut(conv.bias).copy_from_slice(&[0.1, -0.2, 0.3, 0.0]);
            let x = ramp(3, h, w, 0.17);
            let (y, _) = conv.forward(&p, &x);
            let want = conv_naive(&conv, &p, &x);
            assert_eq!((y.c, y.h, y.w), (want.c, want.h, want.w));
            for (a, b) in y.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    /// Checks `<grad, J v>` against the finite difference of `<grad, f(x)>`
    /// along `v`, for the input gradient.
    fn directional(f: impl Fn(&Act<f64>) -> Act<f64>, x: &Act<f64>, g: &Act<f64>, dx: &Act<f64>) {
        let v = ramp(x.c, x.h, x.w, 0.731);
        let h = 1e-6;
        let shifted = |s: f64| {
            let xs = Act::from_vec(x.c, x.h, x.w, x.data.iter().zip(&v.data).map(|(a, b)| a + s * b).collect());
            f(&xs).data.iter().zip(&g.data).map(|(a, b)| a * b).sum::<f64>()
        };
        let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
        let an: f64 = dx.data.iter().zip(&v.data).map(|(a, b)| a * b).sum();
        assert!((fd - an).abs() <= 1e-7 * fd.abs().max(1.0), "{fd} vs {an}");
    }

    #[test]
    fn conv_input_gradient() {
        for (k, stride, h, w) in [(3, 1, 6, 6), (3, 2, 6, 6), (1, 1, 6, 6), (3, 2, 5, 7)] {
            let mut p = ParamSet::<f64>::default();
            let conv = Conv::new(&mut p, "c", 2, 3, k, stride, (0..6 * k * k).map(|i| (i as f64 * 0.7).sin()).collect());
            let x = ramp(2, h, w, 0.29);
            let (y, cache) = conv.forward(&p, &x);
            let g = ramp(y.c, y.h, y.w, 0.41);
            let mut grads = p.zeros_like();
            let dx = conv.backward(&p, &cache, &g, &mut grads, true).unwrap();
            directional(|xx| conv.forward(&p, xx).0, &x, &g, &dx);
        }
    }

    #[test]
    fn group_norm_input_gradient_and_statistics() {
        let mut p = ParamSet::<f64>::default();
        let gn = GroupNorm::new(&mut p, "n", 4, 2);
        p.get_mut(gn.gamma).copy_from_slice(&[1.5, 0.5, -1.0, 2.0]);
        p.get_mut(gn.beta).copy_from_slice(&[0.1, 0.2, 0.3, 0.4]);
        let x = ramp(4, 3, 3, 0.53);
        let (y, cache) = gn.forward(&p, &x);
        let xh = &cache.xhat.data[..18];
        assert!(xh.iter().sum::<f64>().abs() < 1e-12);
        let var = xh.iter().map(|v| v * v).sum::<f64>() / 18.0;
        assert!((var - 1.0).abs() < 1e-3);
        let g = ramp(4, 3, 3, 0.37);
        let mut grads = p.zeros_like();
        let dx = gn.backward(&p, &cache, &g, &mut grads);
        directional(|xx| gn.forward(&p, xx).0, &x, &g, &dx);
        assert_eq!(y.data.len(), 36);
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let x = ramp(2, 3, 4, 0.3);
        let g = ramp(2, 6, 8, 0.8);
        let lhs: f64 = upsample2(&x).data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&upsample2_backward(&g).data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn silu_derivative() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 4.0] {
            let h = 1e-6;
            let f = |v: f64| v * sigmoid(v);
            let fd = (f(x + h) - f(x - h)) / (2.0 * h);
            assert!((fd - silu_prime(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn time_embedding_layout() {
        let e: Vec<f64> = time_embedding(0.0, 8);
        assert_eq!(e, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        let e: Vec<f64> = time_embedding(0.37, 8);
        for i in 0..4 {
            assert!((e[i] * e[i] + e[4 + i] * e[4 + i] - 1.0).abs() < 1e-12);
        }
    }
}
