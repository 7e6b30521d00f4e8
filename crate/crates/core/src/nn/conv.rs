//! Convolution blocks over residual stacks and covariance pooling.

use super::{gemm, relu, Module, Param, Real};
use crate::error::{Error, Result};
use crate::rng::Rng;

const LN_EPS: f64 = 1e-5;

/// Activations of `p` patches, laid out `[channel][patch][row][col]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FMap<F> {
    pub c: usize,
    pub p: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<F>,
}

impl<F: Real> FMap<F> {
    pub fn zeros(c: usize, p: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            p,
            h,
            w,
            data: vec![F::zero(); c * p * h * w],
        }
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    /// Elements of channel `c`, patch `p`.
    pub fn plane(&self, c: usize, p: usize) -> &[F] {
        let n = self.hw();
        let off = (c * self.p + p) * n;
        &self.data[off..off + n]
    }

    pub fn plane_mut(&mut self, c: usize, p: usize) -> &mut [F] {
        let n = self.hw();
        let off = (c * self.p + p) * n;
        &mut self.data[off..off + n]
    }
}

fn im2col<F: Real>(x: &FMap<F>) -> Vec<F> {
    let (h, w) = (x.h, x.w);
    let n = x.p * h * w;
    let mut cols = vec![F::zero(); x.c * 9 * n];
    for ci in 0..x.c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * n..][..n];
                for p in 0..x.p {
                    let src = x.plane(ci, p);
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let dst = &mut row[(p * h + y) * w..][..w];
                        let src_row = &src[sy as usize * w..][..w];
                        match kx {
                            0 => dst[1..].copy_from_slice(&src_row[..w - 1]),
                            1 => dst.copy_from_slice(src_row),
                            _ => dst[..w - 1].copy_from_slice(&src_row[1..]),
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<F: Real>(cols: &[F], out: &mut FMap<F>) {
    let (h, w) = (out.h, out.w);
    let n = out.p * h * w;
    for ci in 0..out.c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * n..][..n];
                for p in 0..out.p {
                    let dst = out.plane_mut(ci, p);
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src = &row[(p * h + y) * w..][..w];
                        let dst_row = &mut dst[sy as usize * w..][..w];
                        let (d, s) = match kx {
                            0 => (&mut dst_row[..w - 1], &src[1..]),
                            1 => (&mut dst_row[..], src),
                            _ => (&mut dst_row[1..], &src[..w - 1]),
                        };
                        for (a, &b) in d.iter_mut().zip(s) {
                            *a = *a + b;
                        }
                    }
                }
            }
        }
    }
}

/// 3×3 convolution (zero padding) → per-patch layer normalization with
/// per-channel gain/bias → ReLU → optional 2×2 average pooling.
#[derive(Clone, Debug)]
pub struct ConvBlock<F> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub pool: bool,
    pub weight: Param<F>,
    pub bias: Param<F>,
    pub gain: Param<F>,
    pub shift: Param<F>,
}

pub struct ConvCache<F> {
    input_shape: (usize, usize, usize, usize),
    cols: Vec<F>,
    xhat: Vec<F>,
    inv_std: Vec<F>,
    act: Vec<F>,
}

impl<F: Real> ConvBlock<F> {
    pub fn new(prefix: &str, in_ch: usize, out_ch: usize, pool: bool, rng: &mut Rng) -> Self {
        let std = (2.0 / (in_ch * 9) as f64).sqrt();
        Self {
            in_ch,
            out_ch,
            pool,
            weight: Param::normal(format!("{prefix}.weight"), &[out_ch, in_ch, 3, 3], std, rng),
            bias: Param::zeros(format!("{prefix}.bias"), &[out_ch]),
            gain: Param::filled(format!("{prefix}.norm.gain"), &[out_ch], 1.0),
            shift: Param::zeros(format!("{prefix}.norm.shift"), &[out_ch]),
        }
    }

    pub fn forward(&self, x: &FMap<F>) -> Result<(FMap<F>, ConvCache<F>)> {
        if x.c != self.in_ch {
            return Err(Error::Shape(format!("conv block expects {} channels, got {}", self.in_ch, x.c)));
        }
        if self.pool && (!x.h.is_multiple_of(2) || !x.w.is_multiple_of(2)) {
            return Err(Error::Shape(format!("cannot pool a {}x{} map", x.h, x.w)));
        }
        let (p, hw) = (x.p, x.hw());
        let n = p * hw;
        let cols = im2col(x);
        let mut z = vec![F::zero(); self.out_ch * n];
        for (co, row) in z.chunks_exact_mut(n).enumerate() {
            row.fill(self.bias.value[co]);
        }
        gemm(false, false, self.out_ch, n, self.in_ch * 9, F::one(), &self.weight.value, &cols, F::one(), &mut z);

        // layer norm over (channel, row, col) of each patch
        let m = F::of((self.out_ch * hw) as f64);
        let eps = F::of(LN_EPS);
        let mut inv_std = vec![F::zero(); p];
        for (pi, inv) in inv_std.iter_mut().enumerate() {
            let mut sum = F::zero();
            for c in 0..self.out_ch {
                sum = sum + z[c * n + pi * hw..][..hw].iter().copied().sum::<F>();
            }
            let mean = sum / m;
            let mut var = F::zero();
            for c in 0..self.out_ch {
                for v in &mut z[c * n + pi * hw..][..hw] {
                    *v = *v - mean;
                    var = var + *v * *v;
                }
            }
            *inv = F::one() / (var / m + eps).sqrt();
            for c in 0..self.out_ch {
                for v in &mut z[c * n + pi * hw..][..hw] {
                    *v = *v * *inv;
                }
            }
        }
        let xhat = z;
        let mut act = vec![F::zero(); self.out_ch * n];
        for c in 0..self.out_ch {
            let (g, b) = (self.gain.value[c], self.shift.value[c]);
            for (a, &xh) in act[c * n..][..n].iter_mut().zip(&xhat[c * n..][..n]) {
                *a = relu(g * xh + b);
            }
        }

        let out = if self.pool {
            let (h2, w2) = (x.h / 2, x.w / 2);
            let mut out = FMap::zeros(self.out_ch, p, h2, w2);
            let quarter = F::of(0.25);
            for c in 0..self.out_ch {
                for pi in 0..p {
                    let src = &act[(c * p + pi) * hw..][..hw];
                    let dst = out.plane_mut(c, pi);
                    for y in 0..h2 {
                        for xx in 0..w2 {
                            let i = 2 * y * x.w + 2 * xx;
                            dst[y * w2 + xx] = (src[i] + src[i + 1] + src[i + x.w] + src[i + x.w + 1]) * quarter;
                        }
                    }
                }
            }
            out
        } else {
            FMap {
                c: self.out_ch,
                p,
                h: x.h,
                w: x.w,
                data: act.clone(),
            }
        };
        let cache = ConvCache {
            input_shape: (x.c, x.p, x.h, x.w),
            cols,
            xhat,
            inv_std,
            act,
        };
        Ok((out, cache))
    }

    /// Accumulates parameter gradients; returns the input gradient when asked.
    pub fn backward(&mut self, cache: ConvCache<F>, d_out: &FMap<F>, need_input: bool) -> Option<FMap<F>> {
        let (c_in, p, h, w) = cache.input_shape;
        let hw = h * w;
        let n = p * hw;
        let co = self.out_ch;

        let mut d = if self.pool {
            let w2 = w / 2;
            let mut d = vec![F::zero(); co * n];
            let quarter = F::of(0.25);
            for c in 0..co {
                for pi in 0..p {
                    let src = d_out.plane(c, pi);
                    let dst = &mut d[(c * p + pi) * hw..][..hw];
                    for y in 0..h {
                        for x in 0..w {
                            dst[y * w + x] = src[(y / 2) * w2 + x / 2] * quarter;
                        }
                    }
                }
            }
            d
        } else {
            d_out.data.clone()
        };
        for (dv, &a) in d.iter_mut().zip(&cache.act) {
            if a <= F::zero() {
                *dv = F::zero();
            }
        }
        // affine part of the norm
        for c in 0..co {
            let g = self.gain.value[c];
            let mut dg = F::zero();
            let mut db = F::zero();
            for (dv, &xh) in d[c * n..][..n].iter_mut().zip(&cache.xhat[c * n..][..n]) {
                dg = dg + *dv * xh;
                db = db + *dv;
                *dv = *dv * g;
            }
            self.gain.grad[c] = self.gain.grad[c] + dg;
            self.shift.grad[c] = self.shift.grad[c] + db;
        }
        // normalization
        let m = F::of((co * hw) as f64);
        for pi in 0..p {
            let mut s1 = F::zero();
            let mut s2 = F::zero();
            for c in 0..co {
                let off = c * n + pi * hw;
                for (dv, &xh) in d[off..off + hw].iter().zip(&cache.xhat[off..off + hw]) {
                    s1 = s1 + *dv;
                    s2 = s2 + *dv * xh;
                }
            }
            let inv = cache.inv_std[pi];
            for c in 0..co {
                let off = c * n + pi * hw;
                for (dv, &xh) in d[off..off + hw].iter_mut().zip(&cache.xhat[off..off + hw]) {
                    *dv = inv * (*dv - (s1 + xh * s2) / m);
                }
            }
        }
        // convolution
        let k = c_in * 9;
        gemm(false, true, co, k, n, F::one(), &d, &cache.cols, F::one(), &mut self.weight.grad);
        for c in 0..co {
            let s: F = d[c * n..][..n].iter().copied().sum();
            self.bias.grad[c] = self.bias.grad[c] + s;
        }
        if !need_input {
            return None;
        }
        let mut d_cols = cache.cols;
        gemm(true, false, k, n, co, F::one(), &self.weight.value, &d, F::zero(), &mut d_cols);
        let mut dx = FMap::zeros(c_in, p, h, w);
        col2im(&d_cols, &mut dx);
        Some(dx)
    }
}

impl<F: Real> Module<F> for ConvBlock<F> {
    fn visit(&self, f: &mut dyn FnMut(&Param<F>)) {
        f(&self.weight);
        f(&self.bias);
        f(&self.gain);
        f(&self.shift);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        f(&mut self.weight);
        f(&mut self.bias);
        f(&mut self.gain);
        f(&mut self.shift);
    }
}

/// Length of the flattened upper triangle of a `d`×`d` matrix.
pub fn triangle_len(d: usize) -> usize {
    d * (d + 1) / 2
}

pub struct CovCache<F> {
    centered: Vec<F>,
    c: usize,
    n: usize,
}

/// Per-patch unbiased channel covariance over spatial positions, flattened
/// as the row-major upper triangle (diagonal included).
/// Returns `[patch][triangle_len(c)]`.
pub fn covariance_tokens<F: Real>(x: &FMap<F>) -> Result<(Vec<F>, CovCache<F>)> {
    let (c, p, n) = (x.c, x.p, x.hw());
    if n < 2 {
        return Err(Error::Shape(format!("covariance needs at least 2 positions, got {n}")));
    }
    let t = triangle_len(c);
    let mut tokens = vec![F::zero(); p * t];
    let mut centered = vec![F::zero(); p * c * n];
    let mut cov = vec![F::zero(); c * c];
    let norm = F::one() / F::of((n - 1) as f64);
    for pi in 0..p {
        let xc = &mut centered[pi * c * n..][..c * n];
        for ch in 0..c {
            let src = x.plane(ch, pi);
            let mean = src.iter().copied().sum::<F>() / F::of(n as f64);
            for (d, &s) in xc[ch * n..][..n].iter_mut().zip(src) {
                *d = s - mean;
            }
        }
        gemm(false, true, c, c, n, norm, xc, xc, F::zero(), &mut cov);
        let tok = &mut tokens[pi * t..][..t];
        let mut k = 0;
        for i in 0..c {
            for j in i..c {
                tok[k] = cov[i * c + j];
                k += 1;
            }
        }
    }
    Ok((tokens, CovCache { centered, c, n }))
}

pub fn covariance_tokens_backward<F: Real>(cache: &CovCache<F>, d_tokens: &[F], p: usize, h: usize, w: usize) -> FMap<F> {
    let (c, n) = (cache.c, cache.n);
    let t = triangle_len(c);
    let mut dx = FMap::zeros(c, p, h, w);
    let mut sym = vec![F::zero(); c * c];
    let mut dxc = vec![F::zero(); c * n];
    let norm = F::one() / F::of((n - 1) as f64);
    for pi in 0..p {
        let dt = &d_tokens[pi * t..][..t];
        sym.fill(F::zero());
        let mut k = 0;
        for i in 0..c {
            for j in i..c {
                sym[i * c + j] = sym[i * c + j] + dt[k];
                sym[j * c + i] = sym[j * c + i] + dt[k];
                k += 1;
            }
        }
        // rows of the centred matrix sum to zero, so the mean subtraction
        // contributes nothing further
        let xc = &cache.centered[pi * c * n..][..c * n];
        gemm(false, false, c, n, c, norm, &sym, xc, F::zero(), &mut dxc);
        for ch in 0..c {
            dx.plane_mut(ch, pi).copy_from_slice(&dxc[ch * n..][..n]);
        }
    }
    dx
}
