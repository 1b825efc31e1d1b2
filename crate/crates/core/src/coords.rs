//! Continuous coordinates over `[-1, 1]²`: pixel-centre grids, query cells,
//! nearest low-resolution anchors, local neighbourhoods and the Fourier
//! encoding of relative offsets.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Result};
use crate::init::kaiming_uniform;
use crate::tensor::Tensor;
use crate::Scalar;

/// Pixel-centre coordinates of an `height x width` lattice, row-major.
///
/// Point `(i, j)` sits at `(-1 + (2i + 1) / H, -1 + (2j + 1) / W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordGrid<T> {
    height: usize,
    width: usize,
    coords: Vec<[T; 2]>,
}

impl<T: Scalar> CoordGrid<T> {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn coords(&self) -> &[[T; 2]] {
        &self.coords
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Coordinate of lattice index `idx` (row-major).
    pub fn at(&self, idx: usize) -> [T; 2] {
        self.coords[idx]
    }
}

#[inline]
pub(crate) fn cell_center<T: Scalar>(i: usize, len: usize) -> T {
    -T::one() + T::of_usize(2 * i + 1) / T::of_usize(len)
}

pub fn make_coord_grid<T: Scalar>(h: usize, w: usize) -> Result<CoordGrid<T>> {
    if h == 0 || w == 0 {
        return Err(invalid!("coordinate grid needs positive extents, got {}x{}", h, w));
    }
    let ys: Vec<T> = (0..h).map(|i| cell_center(i, h)).collect();
    let xs: Vec<T> = (0..w).map(|j| cell_center(j, w)).collect();
    let coords = ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| [y, x]))
        .collect();
    Ok(CoordGrid {
        height: h,
        width: w,
        coords,
    })
}

/// Size of one query pixel in normalized units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell<T> {
    pub cell_h: T,
    pub cell_w: T,
}

impl<T: Scalar> Cell<T> {
    /// Cell of an `out_h x out_w` output grid: `(2 / out_h, 2 / out_w)`.
    pub fn for_output(out_h: usize, out_w: usize) -> Result<Self> {
        if out_h == 0 || out_w == 0 {
            return Err(invalid!("cell of an empty grid"));
        }
        Ok(Self {
            cell_h: T::of(2.0) / T::of_usize(out_h),
            cell_w: T::of(2.0) / T::of_usize(out_w),
        })
    }
}

fn nearest_on_axis<T: Scalar>(c: T, len: usize) -> usize {
    let n = T::of_usize(len);
    let half = T::of(0.5);
    let p = (c + T::one()) * n * half - half;
    let lo = p.floor().max(T::zero()).to_usize().unwrap_or(0).min(len - 1);
    let hi = (lo + 1).min(len - 1);
    let dlo = (c - cell_center::<T>(lo, len)).abs();
    let dhi = (c - cell_center::<T>(hi, len)).abs();
    if dhi < dlo {
        hi
    } else {
        lo
    }
}

/// Nearest low-resolution lattice point of every query; ties go top-left.
///
/// Returns the anchor coordinates and their row-major lattice indices.
pub fn nearest_lr_coords<T: Scalar>(
    queries: &[[T; 2]],
    lr_grid: &CoordGrid<T>,
) -> (Vec<[T; 2]>, Vec<usize>) {
    let (h, w) = (lr_grid.height, lr_grid.width);
    queries
        .iter()
        .map(|q| {
            let idx = nearest_on_axis(q[0], h) * w + nearest_on_axis(q[1], w);
            (lr_grid.coords[idx], idx)
        })
        .unzip()
}

/// Row-major `r x r` window of lattice indices centred at `anchor`, with
/// border indices duplicated where the window leaves the grid.
pub fn local_neighborhood<T: Scalar>(
    anchor: usize,
    lr_grid: &CoordGrid<T>,
    r: usize,
) -> Result<Vec<usize>> {
    if r.is_multiple_of(2) {
        return Err(invalid!("neighbourhood size must be odd, got {}", r));
    }
    let (h, w) = (lr_grid.height as isize, lr_grid.width as isize);
    let (ay, ax) = (anchor as isize / w, anchor as isize % w);
    let rad = (r / 2) as isize;
    let mut out = Vec::with_capacity(r * r);
    for dy in -rad..=rad {
        let y = (ay + dy).clamp(0, h - 1);
        for dx in -rad..=rad {
            let x = (ax + dx).clamp(0, w - 1);
            out.push((y * w + x) as usize);
        }
    }
    Ok(out)
}

/// Learnable Fourier encoding of relative offsets.
///
/// Each `(dy, dx)` offset expands to `2g` sines followed by `2g` cosines of
/// `2π ω_j · (dy, dx)` taken per component, then a linear map reduces the
/// `4g` features to one attention-logit bias per (query, key) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierEncoder<T> {
    /// `[g, 2]`, cycles per unit coordinate along y and x.
    pub freqs: Tensor<T>,
    /// `[4g, 1]`
    pub mix_weight: Tensor<T>,
    /// `[1]`
    pub mix_bias: Tensor<T>,
}

impl<T: Scalar> FourierEncoder<T> {
    pub fn new(freqs: Tensor<T>, mix_weight: Tensor<T>, mix_bias: Tensor<T>) -> Result<Self> {
        let (g, two) = freqs.dims2()?;
        if g == 0 || two != 2 {
            return Err(invalid!("frequencies must be [g>=1, 2], got {:?}", freqs.shape()));
        }
        if mix_weight.shape() != [4 * g, 1] || mix_bias.shape() != [1] {
            return Err(invalid!(
                "mix weights {:?}/{:?} do not match g = {}",
                mix_weight.shape(),
                mix_bias.shape(),
                g
            ));
        }
        Ok(Self {
            freqs,
            mix_weight,
            mix_bias,
        })
    }

    /// Standard-normal frequencies and a Kaiming-uniform mix.
    pub fn init<R: Rng>(g: usize, rng: &mut R) -> Result<Self> {
        let freqs = Tensor::from_fn(vec![g, 2], |_| T::of(rng.sample::<f64, _>(StandardNormal)));
        let mix_weight = kaiming_uniform(vec![4 * g, 1], 4 * g, rng);
        Self::new(freqs, mix_weight, Tensor::zeros(vec![1]))
    }

    pub fn num_freqs(&self) -> usize {
        self.freqs.shape()[0]
    }
}

/// Pre-linear features `[sin..., cos...]` of every offset, `[rows, 4g]`.
pub fn fourier_features<T: Scalar>(freqs: &Tensor<T>, offsets: &[[T; 2]]) -> Result<Tensor<T>> {
    let (g, two) = freqs.dims2()?;
    if two != 2 {
        return Err(invalid!("frequencies must be [g, 2]"));
    }
    let tau = T::TAU();
    let f = freqs.data();
    let mut out = Vec::with_capacity(offsets.len() * 4 * g);
    for d in offsets {
        let start = out.len();
        out.resize(start + 4 * g, T::zero());
        let row = &mut out[start..];
        for j in 0..g {
            for a in 0..2 {
                let (s, c) = (tau * f[2 * j + a] * d[a]).sin_cos();
                row[2 * j + a] = s;
                row[2 * g + 2 * j + a] = c;
            }
        }
    }
    Tensor::new(vec![offsets.len(), 4 * g], out)
}

/// Attention-logit biases for `queries x keys` offsets laid out query-major,
/// returned as `[queries, keys]`.
pub fn fourier_encode<T: Scalar>(
    enc: &FourierEncoder<T>,
    offsets: &[[T; 2]],
    keys_per_query: usize,
) -> Result<Tensor<T>> {
    if keys_per_query == 0 || !offsets.len().is_multiple_of(keys_per_query) {
        return Err(invalid!(
            "{} offsets do not split into rows of {}",
            offsets.len(),
            keys_per_query
        ));
    }
    let feats = fourier_features(&enc.freqs, offsets)?;
    let mixed = crate::tensor::matmul(&feats, &enc.mix_weight)?;
    let b = enc.mix_bias.data()[0];
    mixed
        .map(|v| v + b)
        .reshape(vec![offsets.len() / keys_per_query, keys_per_query])
}
