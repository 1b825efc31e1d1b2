use super::Tensor;
use crate::coords::make_coord_grid;
use crate::error::{invalid, Result};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SampleMode {
    Nearest,
    Bilinear,
}

/// Four `(flat spatial index, weight)` taps of one continuous query.
///
/// Nearest sampling uses only the first tap; the rest carry weight zero.
pub type Taps<T> = [(usize, T); 4];

/// Continuous pixel position of a normalized coordinate on an axis of
/// `len` cell-centred samples, clamped to `[0, len - 1]`.
///
/// Positions within a few ulps of a lattice point snap onto it so that
/// grid-centre queries reproduce stored values exactly.
fn pixel_pos<T: Scalar>(c: T, len: usize) -> T {
    let n = T::of_usize(len);
    let half = T::of(0.5);
    let p = (c + T::one()) * n * half - half;
    let p = p.max(T::zero()).min(n - T::one());
    let r = p.round();
    let tol = T::epsilon() * T::of(64.0) * n.max(T::one());
    if (p - r).abs() <= tol {
        r
    } else {
        p
    }
}

fn axis_taps<T: Scalar>(c: T, len: usize, mode: SampleMode) -> [(usize, T); 2] {
    let p = pixel_pos(c, len);
    match mode {
        SampleMode::Nearest => {
            // ties go to the smaller index
            let i = (p - T::of(0.5)).ceil().max(T::zero());
            let i = i.to_usize().unwrap_or(0).min(len - 1);
            [(i, T::one()), (i, T::zero())]
        }
        SampleMode::Bilinear => {
            let f = p.floor();
            let i0 = f.to_usize().unwrap_or(0).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            let t = p - f;
            [(i0, T::one() - t), (i1, t)]
        }
    }
}

/// Interpolation taps for a `(y, x)` query on an `h x w` cell-centred grid.
///
/// Coordinates outside `[-1, 1]` are clamped to the border.
pub fn sample_taps<T: Scalar>(coord: [T; 2], h: usize, w: usize, mode: SampleMode) -> Taps<T> {
    let ty = axis_taps(coord[0], h, mode);
    let tx = axis_taps(coord[1], w, mode);
    [
        (ty[0].0 * w + tx[0].0, ty[0].1 * tx[0].1),
        (ty[0].0 * w + tx[1].0, ty[0].1 * tx[1].1),
        (ty[1].0 * w + tx[0].0, ty[1].1 * tx[0].1),
        (ty[1].0 * w + tx[1].0, ty[1].1 * tx[1].1),
    ]
}

/// Samples a `[1, C, H, W]` field at continuous coordinates, returning `[Q, C]`.
pub fn grid_sample<T: Scalar>(
    latent: &Tensor<T>,
    coords: &[[T; 2]],
    mode: SampleMode,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = latent.dims4()?;
    if n != 1 {
        return Err(invalid!("grid_sample expects a single field, got batch {}", n));
    }
    let plane = h * w;
    let d = latent.data();
    let mut out = Vec::with_capacity(coords.len() * c);
    for &q in coords {
        let taps = sample_taps(q, h, w, mode);
        for ch in 0..c {
            let base = ch * plane;
            let mut acc = T::zero();
            for &(idx, wt) in &taps {
                acc += wt * d[base + idx];
            }
            out.push(acc);
        }
    }
    Tensor::new(vec![coords.len(), c], out)
}

/// Output extent `floor(scale * len + 0.5)`, at least 1.
pub fn output_extent<T: Scalar>(len: usize, scale: T) -> Result<usize> {
    if !(scale > T::zero()) || !scale.is_finite() {
        return Err(invalid!("scale must be positive and finite, got {}", scale));
    }
    let v = (scale * T::of_usize(len) + T::of(0.5)).floor();
    Ok(v.to_usize().unwrap_or(0).max(1))
}

/// Bilinear resize of every image in a batch to `out_h x out_w`.
pub fn bilinear_resize_to<T: Scalar>(
    image: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    let (n, c, _, _) = image.dims4()?;
    let grid = make_coord_grid::<T>(out_h, out_w)?;
    let q = out_h * out_w;
    let mut data = Vec::with_capacity(n * c * q);
    for b in 0..n {
        let sampled = grid_sample(&image.batch_item(b)?, grid.coords(), SampleMode::Bilinear)?;
        for ch in 0..c {
            data.extend((0..q).map(|i| sampled.at2(i, ch)));
        }
    }
    Tensor::new(vec![n, c, out_h, out_w], data)
}

/// Bilinear resize by real-valued factors; output extents follow [`output_extent`].
pub fn bilinear_resize<T: Scalar>(image: &Tensor<T>, scale_h: T, scale_w: T) -> Result<Tensor<T>> {
    let (_, _, h, w) = image.dims4()?;
    bilinear_resize_to(image, output_extent(h, scale_h)?, output_extent(w, scale_w)?)
}

/// Cubic convolution kernel with `a = -0.5`.
pub fn cubic_weight<T: Scalar>(x: T) -> T {
    let a = T::of(-0.5);
    let x = x.abs();
    let two = T::of(2.0);
    let three = T::of(3.0);
    if x <= T::one() {
        ((a + two) * x - (a + three)) * x * x + T::one()
    } else if x < two {
        ((a * x - T::of(5.0) * a) * x + T::of(8.0) * a) * x - T::of(4.0) * a
    } else {
        T::zero()
    }
}

/// Per-output `(source indices, weights)` along one axis, half-pixel aligned.
fn cubic_axis<T: Scalar>(in_len: usize, out_len: usize) -> Vec<([usize; 4], [T; 4])> {
    let ratio = T::of_usize(in_len) / T::of_usize(out_len);
    let half = T::of(0.5);
    (0..out_len)
        .map(|o| {
            let src = (T::of_usize(o) + half) * ratio - half;
            let f = src.floor();
            let t = src - f;
            let base = f.to_isize().unwrap_or(0);
            let mut idx = [0usize; 4];
            let mut wts = [T::zero(); 4];
            for k in 0..4 {
                let i = (base + k as isize - 1).clamp(0, in_len as isize - 1);
                idx[k] = i as usize;
                wts[k] = cubic_weight(t - T::of_usize(k) + T::one());
            }
            (idx, wts)
        })
        .collect()
}

/// Separable bicubic resize to an explicit size (edge replication at borders).
pub fn bicubic_resize_to<T: Scalar>(
    image: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = image.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(invalid!("bicubic output must be non-empty"));
    }
    let cols = cubic_axis::<T>(w, out_w);
    let rows = cubic_axis::<T>(h, out_h);
    let d = image.data();
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    let mut tmp = vec![T::zero(); h * out_w];
    for plane in d.chunks(h * w) {
        for y in 0..h {
            let row = &plane[y * w..(y + 1) * w];
            for (x, (idx, wts)) in cols.iter().enumerate() {
                tmp[y * out_w + x] = (0..4).map(|k| wts[k] * row[idx[k]]).sum();
            }
        }
        for (idx, wts) in &rows {
            for x in 0..out_w {
                out.push((0..4).map(|k| wts[k] * tmp[idx[k] * out_w + x]).sum());
            }
        }
    }
    Tensor::new(vec![n, c, out_h, out_w], out)
}

pub fn bicubic_resize<T: Scalar>(image: &Tensor<T>, scale_h: T, scale_w: T) -> Result<Tensor<T>> {
    let (_, _, h, w) = image.dims4()?;
    bicubic_resize_to(image, output_extent(h, scale_h)?, output_extent(w, scale_w)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(c: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn(vec![1, c, h, w], |i| ((i * 37 + 11) % 23) as f64 * 0.13 - 1.1)
    }

    fn center(i: usize, n: usize) -> f64 {
        -1.0 + (2 * i + 1) as f64 / n as f64
    }

    #[test]
    fn lattice_points_are_exact() {
        let f = field(3, 5, 7);
        for mode in [SampleMode::Nearest, SampleMode::Bilinear] {
            for i in 0..5 {
                for j in 0..7 {
                    let s = grid_sample(&f, &[[center(i, 5), center(j, 7)]], mode).unwrap();
                    for c in 0..3 {
                        assert_eq!(s.at2(0, c), f.at4(0, c, i, j));
                    }
                }
            }
        }
    }

    #[test]
    fn bilinear_midpoint_is_mean() {
        let f = field(2, 4, 4);
        let x = 0.5 * (center(1, 4) + center(2, 4));
        let s = grid_sample(&f, &[[center(2, 4), x]], SampleMode::Bilinear).unwrap();
        for c in 0..2 {
            let m = 0.5 * (f.at4(0, c, 2, 1) + f.at4(0, c, 2, 2));
            assert!((s.at2(0, c) - m).abs() < 1e-15);
        }
    }

    #[test]
    fn random_queries_match_weight_enumeration() {
        let (h, w) = (4, 6);
        let f = field(3, h, w);
        let mut state = 12345u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.4 - 1.2
        };
        for _ in 0..100 {
            let q = [next(), next()];
            let got = grid_sample(&f, &[q], SampleMode::Bilinear).unwrap();
            // tent weights over every lattice point, positions clamped to the border
            let py = (((q[0] + 1.0) * h as f64 - 1.0) / 2.0).clamp(0.0, (h - 1) as f64);
            let px = (((q[1] + 1.0) * w as f64 - 1.0) / 2.0).clamp(0.0, (w - 1) as f64);
            for c in 0..3 {
                let mut acc = 0.0;
                for i in 0..h {
                    for j in 0..w {
                        let wy = (1.0 - (py - i as f64).abs()).max(0.0);
                        let wx = (1.0 - (px - j as f64).abs()).max(0.0);
                        acc += wy * wx * f.at4(0, c, i, j);
                    }
                }
                assert!((got.at2(0, c) - acc).abs() < 1e-12);
            }
            let near = grid_sample(&f, &[q], SampleMode::Nearest).unwrap();
            let (mut bi, mut bj, mut best) = (0, 0, f64::INFINITY);
            for i in 0..h {
                for j in 0..w {
                    let d = (py - i as f64).powi(2) + (px - j as f64).powi(2);
                    if d < best {
                        best = d;
                        bi = i;
                        bj = j;
                    }
                }
            }
            assert_eq!(near.at2(0, 0), f.at4(0, 0, bi, bj));
        }
    }

    #[test]
    fn bilinear_resize_identity_and_constant() {
        let img = Tensor::from_fn(vec![2, 3, 5, 4], |i| (i as f64 * 0.731).sin());
        assert_eq!(bilinear_resize(&img, 1.0, 1.0).unwrap(), img);
        let k = Tensor::<f64>::full(vec![1, 3, 5, 4], 0.37);
        for s in [0.5, 1.7, 2.0, 3.3] {
            let r = bilinear_resize(&k, s, s).unwrap();
            assert!(r.data().iter().all(|&v| (v - 0.37).abs() < 1e-15));
        }
        assert!(bilinear_resize(&img, 0.0, 1.0).is_err());
        assert!(bilinear_resize(&img, 1.0, -2.0).is_err());
    }

    #[test]
    fn bilinear_ramp_x2_hand_weights() {
        // 2x2 ramp [[0,1],[2,3]] upsampled to 4x4: output centres sit at
        // pixel positions -0.25, 0.25, 0.75, 1.25 on each axis, clamped to [0,1].
        let img = Tensor::<f64>::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let r = bilinear_resize(&img, 2.0, 2.0).unwrap();
        assert_eq!(r.shape(), &[1, 1, 4, 4]);
        let pos = [0.0, 0.25, 0.75, 1.0];
        for i in 0..4 {
            for j in 0..4 {
                let expect = 2.0 * pos[i] + pos[j];
                assert!((r.at4(0, 0, i, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn output_extent_rounds_half_up() {
        assert_eq!(output_extent(24, 1.7f64).unwrap(), 41);
        assert_eq!(output_extent(24, 2.6f64).unwrap(), 62);
        assert_eq!(output_extent(3, 0.1f64).unwrap(), 1);
        assert_eq!(output_extent(5, 0.5f64).unwrap(), 3);
    }

    #[test]
    fn bicubic_identity_and_constant() {
        let img = Tensor::from_fn(vec![1, 3, 6, 5], |i| (i as f64 * 0.37).cos());
        assert_eq!(bicubic_resize(&img, 1.0, 1.0).unwrap(), img);
        let k = Tensor::<f64>::full(vec![1, 1, 7, 9], 0.6);
        for s in [0.5, 0.37, 1.5, 2.0] {
            let r = bicubic_resize(&k, s, s).unwrap();
            assert!(r.data().iter().all(|&v| (v - 0.6).abs() < 1e-12));
        }
        assert!(bicubic_resize(&img, 0.0, 1.0).is_err());
    }

    #[test]
    fn bicubic_ramp_downscale_vs_separable_oracle() {
        let w = 8;
        let row: Vec<f64> = (0..w).map(|i| i as f64 * 0.1 + (i * i) as f64 * 0.01).collect();
        let img = Tensor::new(vec![1, 1, 1, w], row.clone()).unwrap();
        let r = bicubic_resize(&img, 1.0, 0.5).unwrap();
        assert_eq!(r.shape(), &[1, 1, 1, 4]);
        let kern = |x: f64| {
            let a = -0.5;
            let x = x.abs();
            if x <= 1.0 {
                (a + 2.0) * x.powi(3) - (a + 3.0) * x.powi(2) + 1.0
            } else if x < 2.0 {
                a * x.powi(3) - 5.0 * a * x.powi(2) + 8.0 * a * x - 4.0 * a
            } else {
                0.0
            }
        };
        for o in 0..4 {
            // source centre of output o in input pixel units
            let src = (o as f64 + 0.5) * 2.0 - 0.5;
            let mut acc = 0.0;
            for i in -3i64..(w as i64 + 3) {
                let v = row[i.clamp(0, w as i64 - 1) as usize];
                acc += kern(src - i as f64) * v;
            }
            assert!((r.at4(0, 0, 0, o) - acc).abs() < 1e-9, "o={o}");
        }
    }
}
