//! Pre-norm transformer encoder over unordered token sets.
//!
//! Tokens of several images are stacked row-wise; `segments` delimits which
//! rows attend to each other. No positional information is added, so each
//! segment's output is equivariant to row permutations within it.

use super::{gemm, relu, softmax_rows, Module, Param, Real};
use crate::rng::Rng;

const LN_EPS: f64 = 1e-5;

/// `y = x W + b` with `W` stored `[in][out]`.
#[derive(Clone, Debug)]
pub struct Linear<F> {
    pub weight: Param<F>,
    pub bias: Param<F>,
}

impl<F: Real> Linear<F> {
    pub fn new(prefix: &str, d_in: usize, d_out: usize, std: f64, rng: &mut Rng) -> Self {
        Self {
            weight: Param::normal(format!("{prefix}.weight"), &[d_in, d_out], std, rng),
            bias: Param::zeros(format!("{prefix}.bias"), &[d_out]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn forward(&self, x: &[F], rows: usize) -> Vec<F> {
        let (di, d_o) = (self.d_in(), self.d_out());
        debug_assert_eq!(x.len(), rows * di);
        let mut y = Vec::with_capacity(rows * d_o);
        for _ in 0..rows {
            y.extend_from_slice(&self.bias.value);
        }
        gemm(false, false, rows, d_o, di, F::one(), x, &self.weight.value, F::one(), &mut y);
        y
    }

    /// Accumulates gradients; returns `dx` when requested.
    pub fn backward(&mut self, x: &[F], dy: &[F], rows: usize, need_input: bool) -> Option<Vec<F>> {
        let (di, d_o) = (self.d_in(), self.d_out());
        gemm(true, false, di, d_o, rows, F::one(), x, dy, F::one(), &mut self.weight.grad);
        for row in dy.chunks_exact(d_o) {
            for (g, &d) in self.bias.grad.iter_mut().zip(row) {
                *g = *g + d;
            }
        }
        need_input.then(|| {
            let mut dx = vec![F::zero(); rows * di];
            gemm(false, true, rows, di, d_o, F::one(), dy, &self.weight.value, F::zero(), &mut dx);
            dx
        })
    }
}

impl<F: Real> Module<F> for Linear<F> {
    fn visit(&self, f: &mut dyn FnMut(&Param<F>)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Layer normalization over the feature axis of each row.
#[derive(Clone, Debug)]
pub struct TokenNorm<F> {
    pub gain: Param<F>,
    pub shift: Param<F>,
}

pub struct NormCache<F> {
    xhat: Vec<F>,
    inv: Vec<F>,
}

impl<F: Real> TokenNorm<F> {
    pub fn new(prefix: &str, d: usize) -> Self {
        Self {
            gain: Param::filled(format!("{prefix}.gain"), &[d], 1.0),
            shift: Param::zeros(format!("{prefix}.shift"), &[d]),
        }
    }

    pub fn forward(&self, x: &[F]) -> (Vec<F>, NormCache<F>) {
        let d = self.gain.len();
        let rows = x.len() / d;
        let mut xhat = x.to_vec();
        let mut inv = vec![F::zero(); rows];
        let mut y = vec![F::zero(); x.len()];
        let nd = F::of(d as f64);
        for r in 0..rows {
            let row = &mut xhat[r * d..][..d];
            let mean = row.iter().copied().sum::<F>() / nd;
            let mut var = F::zero();
            for v in row.iter_mut() {
                *v = *v - mean;
                var = var + *v * *v;
            }
            let s = F::one() / (var / nd + F::of(LN_EPS)).sqrt();
            inv[r] = s;
            for (i, v) in row.iter_mut().enumerate() {
                *v = *v * s;
                y[r * d + i] = self.gain.value[i] * *v + self.shift.value[i];
            }
        }
        (y, NormCache { xhat, inv })
    }

    pub fn backward(&mut self, cache: &NormCache<F>, dy: &[F]) -> Vec<F> {
        let d = self.gain.len();
        let nd = F::of(d as f64);
        let mut dx = vec![F::zero(); dy.len()];
        for (r, &inv) in cache.inv.iter().enumerate() {
            let xh = &cache.xhat[r * d..][..d];
            let g = &dy[r * d..][..d];
            let mut s1 = F::zero();
            let mut s2 = F::zero();
            for i in 0..d {
                self.gain.grad[i] = self.gain.grad[i] + g[i] * xh[i];
                self.shift.grad[i] = self.shift.grad[i] + g[i];
                let dxh = g[i] * self.gain.value[i];
                s1 = s1 + dxh;
                s2 = s2 + dxh * xh[i];
            }
            for i in 0..d {
                let dxh = g[i] * self.gain.value[i];
                dx[r * d + i] = inv * (dxh - (s1 + xh[i] * s2) / nd);
            }
        }
        dx
    }
}

impl<F: Real> Module<F> for TokenNorm<F> {
    fn visit(&self, f: &mut dyn FnMut(&Param<F>)) {
        f(&self.gain);
        f(&self.shift);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        f(&mut self.gain);
        f(&mut self.shift);
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer<F> {
    pub heads: usize,
    pub norm1: TokenNorm<F>,
    pub qkv: Linear<F>,
    pub proj: Linear<F>,
    pub norm2: TokenNorm<F>,
    pub ff1: Linear<F>,
    pub ff2: Linear<F>,
}

pub struct LayerCache<F> {
    n1: NormCache<F>,
    a1: Vec<F>,
    qkv: Vec<F>,
    probs: Vec<Vec<F>>,
    ctx: Vec<F>,
    n2: NormCache<F>,
    a2: Vec<F>,
    hidden: Vec<F>,
    act: Vec<F>,
}

impl<F: Real> EncoderLayer<F> {
    pub fn new(prefix: &str, d: usize, heads: usize, ffn: usize, rng: &mut Rng) -> Self {
        assert_eq!(d % heads, 0, "model width must divide into heads");
        let std_in = (1.0 / d as f64).sqrt();
        Self {
            heads,
            norm1: TokenNorm::new(&format!("{prefix}.norm1"), d),
            qkv: Linear::new(&format!("{prefix}.attn.qkv"), d, 3 * d, std_in, rng),
            // residual branches start small so the stream is near identity
            proj: Linear::new(&format!("{prefix}.attn.proj"), d, d, 0.02, rng),
            norm2: TokenNorm::new(&format!("{prefix}.norm2"), d),
            ff1: Linear::new(&format!("{prefix}.ffn.fc1"), d, ffn, std_in, rng),
            ff2: Linear::new(&format!("{prefix}.ffn.fc2"), ffn, d, 0.02, rng),
        }
    }

    fn width(&self) -> usize {
        self.norm1.gain.len()
    }

    pub fn forward(&self, x: &[F], segments: &[(usize, usize)]) -> (Vec<F>, LayerCache<F>) {
        let d = self.width();
        let rows = x.len() / d;
        let dh = d / self.heads;
        let scale = F::one() / F::of((dh as f64).sqrt());

        let (a1, n1) = self.norm1.forward(x);
        let qkv = self.qkv.forward(&a1, rows);
        let mut ctx = vec![F::zero(); rows * d];
        let mut probs = Vec::with_capacity(segments.len() * self.heads);
        let mut q = Vec::new();
        let mut k = Vec::new();
        let mut v = Vec::new();
        let mut out = Vec::new();
        for &(start, len) in segments {
            for h in 0..self.heads {
                gather_head(&qkv, start, len, d, 0, h, dh, &mut q);
                gather_head(&qkv, start, len, d, 1, h, dh, &mut k);
                gather_head(&qkv, start, len, d, 2, h, dh, &mut v);
                let mut s = vec![F::zero(); len * len];
                gemm(false, true, len, len, dh, scale, &q, &k, F::zero(), &mut s);
                softmax_rows(&mut s, len);
                out.resize(len * dh, F::zero());
                gemm(false, false, len, dh, len, F::one(), &s, &v, F::zero(), &mut out);
                for r in 0..len {
                    ctx[(start + r) * d + h * dh..][..dh].copy_from_slice(&out[r * dh..][..dh]);
                }
                probs.push(s);
            }
        }
        let attn = self.proj.forward(&ctx, rows);
        let x1: Vec<F> = x.iter().zip(&attn).map(|(&a, &b)| a + b).collect();

        let (a2, n2) = self.norm2.forward(&x1);
        let hidden = self.ff1.forward(&a2, rows);
        let act: Vec<F> = hidden.iter().map(|&z| relu(z)).collect();
        let ff = self.ff2.forward(&act, rows);
        let y = x1.iter().zip(&ff).map(|(&a, &b)| a + b).collect();
        (
            y,
            LayerCache {
                n1,
                a1,
                qkv,
                probs,
                ctx,
                n2,
                a2,
                hidden,
                act,
            },
        )
    }

    pub fn backward(&mut self, cache: LayerCache<F>, dy: &[F], segments: &[(usize, usize)]) -> Vec<F> {
        let d = self.width();
        let rows = dy.len() / d;
        let dh = d / self.heads;
        let scale = F::one() / F::of((dh as f64).sqrt());

        // feed-forward branch
        let mut d_act = self.ff2.backward(&cache.act, dy, rows, true).expect("input grad");
        for (g, &z) in d_act.iter_mut().zip(&cache.hidden) {
            if z <= F::zero() {
                *g = F::zero();
            }
        }
        let d_a2 = self.ff1.backward(&cache.a2, &d_act, rows, true).expect("input grad");
        let d_n2 = self.norm2.backward(&cache.n2, &d_a2);
        let dx1: Vec<F> = dy.iter().zip(&d_n2).map(|(&a, &b)| a + b).collect();

        // attention branch
        let d_ctx = self.proj.backward(&cache.ctx, &dx1, rows, true).expect("input grad");
        let mut d_qkv = vec![F::zero(); rows * 3 * d];
        let (mut q, mut k, mut v, mut dctx_h) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut probs = cache.probs.iter();
        for &(start, len) in segments {
            for h in 0..self.heads {
                let a = probs.next().expect("one attention map per segment and head");
                gather_head(&cache.qkv, start, len, d, 0, h, dh, &mut q);
                gather_head(&cache.qkv, start, len, d, 1, h, dh, &mut k);
                gather_head(&cache.qkv, start, len, d, 2, h, dh, &mut v);
                dctx_h.clear();
                for r in 0..len {
                    dctx_h.extend_from_slice(&d_ctx[(start + r) * d + h * dh..][..dh]);
                }
                let mut da = vec![F::zero(); len * len];
                gemm(false, true, len, len, dh, F::one(), &dctx_h, &v, F::zero(), &mut da);
                let mut dv = vec![F::zero(); len * dh];
                gemm(true, false, len, dh, len, F::one(), a, &dctx_h, F::zero(), &mut dv);
                // softmax backward
                for r in 0..len {
                    let ar = &a[r * len..][..len];
                    let dr = &mut da[r * len..][..len];
                    let dot: F = ar.iter().zip(dr.iter()).map(|(&x, &y)| x * y).sum();
                    for (g, &p) in dr.iter_mut().zip(ar) {
                        *g = p * (*g - dot);
                    }
                }
                let mut dq = vec![F::zero(); len * dh];
                gemm(false, false, len, dh, len, scale, &da, &k, F::zero(), &mut dq);
                let mut dk = vec![F::zero(); len * dh];
                gemm(true, false, len, dh, len, scale, &da, &q, F::zero(), &mut dk);
                scatter_head(&mut d_qkv, start, len, d, 0, h, dh, &dq);
                scatter_head(&mut d_qkv, start, len, d, 1, h, dh, &dk);
                scatter_head(&mut d_qkv, start, len, d, 2, h, dh, &dv);
            }
        }
        let d_a1 = self.qkv.backward(&cache.a1, &d_qkv, rows, true).expect("input grad");
        let d_n1 = self.norm1.backward(&cache.n1, &d_a1);
        dx1.iter().zip(&d_n1).map(|(&a, &b)| a + b).collect()
    }
}

#[allow(clippy::too_many_arguments)]
fn gather_head<F: Real>(qkv: &[F], start: usize, len: usize, d: usize, which: usize, h: usize, dh: usize, out: &mut Vec<F>) {
    out.clear();
    for r in start..start + len {
        out.extend_from_slice(&qkv[r * 3 * d + which * d + h * dh..][..dh]);
    }
}

#[allow(clippy::too_many_arguments)]
fn scatter_head<F: Real>(dst: &mut [F], start: usize, len: usize, d: usize, which: usize, h: usize, dh: usize, src: &[F]) {
    for r in 0..len {
        let row = &mut dst[(start + r) * 3 * d + which * d + h * dh..][..dh];
        for (a, &b) in row.iter_mut().zip(&src[r * dh..][..dh]) {
            *a = *a + b;
        }
    }
}

impl<F: Real> Module<F> for EncoderLayer<F> {
    fn visit(&self, f: &mut dyn FnMut(&Param<F>)) {
        self.norm1.visit(f);
        self.qkv.visit(f);
        self.proj.visit(f);
        self.norm2.visit(f);
        self.ff1.visit(f);
        self.ff2.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<F>)) {
        self.norm1.visit_mut(f);
        self.qkv.visit_mut(f);
        self.proj.visit_mut(f);
        self.norm2.visit_mut(f);
        self.ff1.visit_mut(f);
        self.ff2.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng as _;

    #[test]
    fn encoder_layer_gradients() {
        let mut rng = seeded(5);
        let (d, heads, ffn) = (8, 2, 6);
        let mut layer = EncoderLayer::<f64>::new("l", d, heads, ffn, &mut rng);
        // larger residual weights so every path carries signal
        for v in layer.proj.weight.value.iter_mut().chain(layer.ff2.weight.value.iter_mut()) {
            *v *= 20.0;
        }
        let segments = [(0usize, 3usize), (3, 2)];
        let x: Vec<f64> = (0..5 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let probe: Vec<f64> = (0..5 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |l: &EncoderLayer<f64>, x: &[f64]| -> f64 {
            l.forward(x, &segments).0.iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = layer.forward(&x, &segments);
        let dx = layer.backward(cache, &probe, &segments);
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (loss(&layer, &xp) - loss(&layer, &xm)) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-6 * (1.0 + fd.abs()), "dx[{i}]: {fd} vs {}", dx[i]);
        }
        let mut grads = Vec::new();
        layer.visit(&mut |p| grads.push(p.clone()));
        for (pi, p) in grads.iter().enumerate() {
            for i in (0..p.len()).step_by(7) {
                let eval = |delta: f64| {
                    let mut l = layer.clone();
                    let mut k = 0;
                    l.visit_mut(&mut |q| {
                        if k == pi {
                            q.value[i] += delta;
                        }
                        k += 1;
                    });
                    loss(&l, &x)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                assert!((fd - p.grad[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{}[{i}]: {fd} vs {}", p.name, p.grad[i]);
            }
        }
    }

    #[test]
    fn permuting_rows_permutes_outputs() {
        let mut rng = seeded(9);
        let layer = EncoderLayer::<f64>::new("l", 8, 2, 6, &mut rng);
        let x: Vec<f64> = (0..4 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let perm = [2usize, 0, 3, 1];
        let xp: Vec<f64> = perm.iter().flat_map(|&r| x[r * 8..][..8].to_vec()).collect();
        let (y, _) = layer.forward(&x, &[(0, 4)]);
        let (yp, _) = layer.forward(&xp, &[(0, 4)]);
        for (i, &r) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!((yp[i * 8 + c] - y[r * 8 + c]).abs() < 1e-12);
            }
        }
    }
}
