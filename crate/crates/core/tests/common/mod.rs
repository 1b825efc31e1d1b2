//! Scalar-loop reference implementations shared by the integration suites.
//!
//! Everything here works on flat `f64` slices with explicit index
//! arithmetic and does not call into the library's kernels, apart from
//! the scalar GELU.

#![allow(dead_code)]

use msit::layers::ConvParams;
use msit::msno::SimParams;
use msit::mssa::MssaParams;
use msit::reparam::RimParams;
use msit::tensor::gelu_scalar;
use msit::{FourierEncoder, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Smooth test image with an edge, values inside `[0.2, 0.95]`.
pub fn smooth_image(h: usize, w: usize) -> Tensor<f64> {
    Tensor::from_fn(vec![1, 3, h, w], |i| {
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        let wave = (x as f64 * 0.7 + c as f64).sin() * (y as f64 * 0.45).cos();
        0.5 + 0.3 * wave + if 2 * x > w { 0.15 } else { 0.0 }
    })
}

/// Zero-padded size-preserving cross-correlation of one `[cin, h, w]` image.
pub fn conv(x: &[f64], cin: usize, h: usize, w: usize, p: &ConvParams<f64>) -> Vec<f64> {
    let s = p.weight.shape();
    let (cout, k) = (s[0], s[2]);
    assert_eq!(s[1], cin);
    let wt = p.weight.data();
    let r = (k / 2) as isize;
    let mut out = vec![0.0; cout * h * w];
    for o in 0..cout {
        let b = p.bias.as_ref().map_or(0.0, |b| b.data()[o]);
        for y in 0..h {
            for xx in 0..w {
                let mut acc = b;
                for i in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = y as isize + ky as isize - r;
                            let sx = xx as isize + kx as isize - r;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            acc += wt[((o * cin + i) * k + ky) * k + kx]
                                * x[(i * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
                out[(o * h + y) * w + xx] = acc;
            }
        }
    }
    out
}

fn pixel(c: f64, n: usize) -> f64 {
    ((c + 1.0) * n as f64 / 2.0 - 0.5).clamp(0.0, (n - 1) as f64)
}

/// Bilinear read of a `[c, h, w]` field at a normalised `(y, x)`.
pub fn bilinear(field: &[f64], c: usize, h: usize, w: usize, at: [f64; 2]) -> Vec<f64> {
    let (py, px) = (pixel(at[0], h), pixel(at[1], w));
    let (y0, x0) = (py.floor() as usize, px.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ty, tx) = (py - y0 as f64, px - x0 as f64);
    (0..c)
        .map(|ch| {
            let f = |y: usize, x: usize| field[(ch * h + y) * w + x];
            (1.0 - ty) * ((1.0 - tx) * f(y0, x0) + tx * f(y0, x1))
                + ty * ((1.0 - tx) * f(y1, x0) + tx * f(y1, x1))
        })
        .collect()
}

/// Index of the closest cell centre on an axis; ties go to the lower index.
pub fn nearest(c: f64, n: usize) -> usize {
    let mut best = 0;
    let mut dist = f64::INFINITY;
    for i in 0..n {
        let centre = -1.0 + (2 * i + 1) as f64 / n as f64;
        let d = (c - centre).abs();
        if d < dist {
            best = i;
            dist = d;
        }
    }
    best
}

pub fn centre(i: usize, n: usize) -> f64 {
    -1.0 + (2 * i + 1) as f64 / n as f64
}

/// Logit bias of one offset.
pub fn fourier_bias(enc: &FourierEncoder<f64>, d: [f64; 2]) -> f64 {
    let g = enc.freqs.shape()[0];
    let f = enc.freqs.data();
    let mw = enc.mix_weight.data();
    let tau = 2.0 * std::f64::consts::PI;
    let mut acc = enc.mix_bias.data()[0];
    for j in 0..g {
        for a in 0..2 {
            let phase = tau * f[2 * j + a] * d[a];
            acc += phase.sin() * mw[2 * j + a];
            acc += phase.cos() * mw[2 * g + 2 * j + a];
        }
    }
    acc
}

#[allow(clippy::too_many_arguments)]
/// Local multi-head attention over flat `[Q, C]`, `[Q, R, C]` buffers.
pub fn attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    bias: &[f64],
    nq: usize,
    r: usize,
    c: usize,
    heads: usize,
    scale: f64,
) -> Vec<f64> {
    let d = c / heads;
    let mut out = vec![0.0; nq * c];
    for qi in 0..nq {
        for h in 0..heads {
            let logits: Vec<f64> = (0..r)
                .map(|j| {
                    let dot: f64 = (0..d)
                        .map(|e| q[qi * c + h * d + e] * k[(qi * r + j) * c + h * d + e])
                        .sum();
                    bias[qi * r + j] + dot / scale
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = ex.iter().sum();
            for e in 0..d {
                out[qi * c + h * d + e] = (0..r)
                    .map(|j| ex[j] / z * v[(qi * r + j) * c + h * d + e])
                    .sum();
            }
        }
    }
    out
}

fn project(z: &[f64], c: usize, h: usize, w: usize, branches: &[ConvParams<f64>], fuse: &ConvParams<f64>) -> Vec<f64> {
    let mut cat = Vec::new();
    for b in branches {
        cat.extend(conv(z, c, h, w, b));
    }
    conv(&cat, branches.len() * c, h, w, fuse)
}

/// Attention latents `[Q, C]` of `queries` over a `[1, C, H, W]` latent.
pub fn mssa(
    z: &Tensor<f64>,
    queries: &[[f64; 2]],
    enc: &FourierEncoder<f64>,
    p: &MssaParams<f64>,
) -> Vec<f64> {
    let s = z.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let qf = project(z.data(), c, h, w, &p.proj_q, &p.fuse_q);
    let vf = project(z.data(), c, h, w, &p.proj_v, &p.fuse_v);
    let r = p.neighborhood;
    let rad = (r / 2) as isize;
    let nq = queries.len();
    let (mut qh, mut kh, mut vh, mut bias) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for &at in queries {
        qh.extend(bilinear(&qf, c, h, w, at));
        let (ay, ax) = (nearest(at[0], h) as isize, nearest(at[1], w) as isize);
        for dy in -rad..=rad {
            for dx in -rad..=rad {
                let y = (ay + dy).clamp(0, h as isize - 1) as usize;
                let x = (ax + dx).clamp(0, w as isize - 1) as usize;
                for ch in 0..c {
                    kh.push(qf[(ch * h + y) * w + x]);
                    vh.push(vf[(ch * h + y) * w + x]);
                }
                bias.push(fourier_bias(enc, [at[0] - centre(y, h), at[1] - centre(x, w)]));
            }
        }
    }
    attention(&qh, &kh, &vh, &bias, nq, r * r, c, p.heads, p.scale)
}

/// `W_ds(concat_i GELU(W_ss_i g_i)) ⊙ W_Z(concat_i g_i)` for `[1, c_i, h, w]` groups.
pub fn sim(groups: &[Tensor<f64>], p: &SimParams<f64>) -> Vec<f64> {
    let s = groups[0].shape();
    let (cg, h, w) = (s[1], s[2], s[3]);
    let t = groups.len();
    let mut stacked = Vec::new();
    let mut mixed = Vec::new();
    for (g, ss) in groups.iter().zip(&p.per_scale) {
        stacked.extend_from_slice(g.data());
        mixed.extend(conv(g.data(), cg, h, w, ss).into_iter().map(gelu_scalar));
    }
    let merged = conv(&mixed, t * cg, h, w, &p.cross_scale);
    let modulation = conv(&stacked, t * cg, h, w, &p.modulation);
    merged.iter().zip(&modulation).map(|(a, b)| a * b).collect()
}

/// `W + DW(W) ⊙ (W L + b)` over the `[Co * Ci, m, m]` stack.
pub fn rim(w: &Tensor<f64>, p: &RimParams<f64>) -> Vec<f64> {
    let s = w.shape();
    let (ch, m) = (s[0] * s[1], s[2]);
    let wd = w.data();
    let k = p.dw.data();
    let mut out = wd.to_vec();
    for c in 0..ch {
        let plane = &wd[c * m * m..(c + 1) * m * m];
        for y in 0..m {
            for x in 0..m {
                let mut d = 0.0;
                for dy in 0..3 {
                    for dx in 0..3 {
                        let (sy, sx) = (y + dy, x + dx);
                        if sy >= 1 && sx >= 1 && sy - 1 < m && sx - 1 < m {
                            d += k[c * 9 + dy * 3 + dx] * plane[(sy - 1) * m + sx - 1];
                        }
                    }
                }
                let pos = y * m + x;
                let a = match &p.linear {
                    Some(l) => {
                        l.bias.data()[pos]
                            + (0..m * m)
                                .map(|q| plane[q] * l.weight.data()[q * m * m + pos])
                                .sum::<f64>()
                    }
                    None => 1.0,
                };
                out[c * m * m + pos] += d * a;
            }
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
