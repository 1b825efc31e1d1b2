//! Multi-scale self-attention: multi-kernel projections of the latent
//! field, coordinate-interpolated queries, neighbourhood keys and values,
//! and Fourier-biased multi-head attention.

use rand::Rng;

use crate::coords::{local_neighborhood, nearest_lr_coords, CoordGrid, FourierEncoder};
use crate::error::{invalid, shape_err, Result};
use crate::graph::{Graph, Var};
use crate::layers::{Binder, ConvParams};
use crate::tensor::{local_attention, sample_taps, PadMode, SampleMode, Taps, Tensor};
use crate::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct MssaParams<T> {
    /// Branch `i` has kernel size `2i + 1`.
    pub proj_q: Vec<ConvParams<T>>,
    /// `1 x 1`, `n_proj * C -> C`.
    pub fuse_q: ConvParams<T>,
    pub proj_v: Vec<ConvParams<T>>,
    pub fuse_v: ConvParams<T>,
    pub heads: usize,
    /// Logit divisor `M`.
    pub scale: T,
    /// Side `r` of the key window.
    pub neighborhood: usize,
}

impl<T: Scalar> MssaParams<T> {
    /// `scale = None` uses the square root of the head width.
    pub fn init<R: Rng>(
        channels: usize,
        n_proj: usize,
        heads: usize,
        neighborhood: usize,
        scale: Option<T>,
        rng: &mut R,
    ) -> Result<Self> {
        if n_proj == 0 {
            return Err(invalid!("at least one projection branch is required"));
        }
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(invalid!("{} heads do not divide {} channels", heads, channels));
        }
        if neighborhood.is_multiple_of(2) {
            return Err(invalid!("neighbourhood size must be odd, got {}", neighborhood));
        }
        let scale = scale.unwrap_or_else(|| T::of_usize(channels / heads).sqrt());
        if !(scale > T::zero()) {
            return Err(invalid!("attention scale must be positive"));
        }
        let branches = |rng: &mut R| -> Vec<ConvParams<T>> {
            (0..n_proj)
                .map(|i| ConvParams::init(channels, channels, 2 * i + 1, rng))
                .collect()
        };
        let proj_q = branches(rng);
        let fuse_q = ConvParams::init(n_proj * channels, channels, 1, rng);
        let proj_v = branches(rng);
        let fuse_v = ConvParams::init(n_proj * channels, channels, 1, rng);
        Ok(Self {
            proj_q,
            fuse_q,
            proj_v,
            fuse_v,
            heads,
            scale,
            neighborhood,
        })
    }

    pub fn n_proj(&self) -> usize {
        self.proj_q.len()
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        for (i, p) in self.proj_q.iter().enumerate() {
            p.visit(&format!("{prefix}.q.{i}"), f);
        }
        self.fuse_q.visit(&format!("{prefix}.q_fuse"), f);
        for (i, p) in self.proj_v.iter().enumerate() {
            p.visit(&format!("{prefix}.v.{i}"), f);
        }
        self.fuse_v.visit(&format!("{prefix}.v_fuse"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, p) in self.proj_q.iter_mut().enumerate() {
            p.visit_mut(&format!("{prefix}.q.{i}"), f);
        }
        self.fuse_q.visit_mut(&format!("{prefix}.q_fuse"), f);
        for (i, p) in self.proj_v.iter_mut().enumerate() {
            p.visit_mut(&format!("{prefix}.v.{i}"), f);
        }
        self.fuse_v.visit_mut(&format!("{prefix}.v_fuse"), f);
    }
}

/// Anchors, key windows and relative offsets of a set of HR queries.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionQuery<T> {
    pub hr_coords: Vec<[T; 2]>,
    pub anchor_indices: Vec<usize>,
    /// `Q * r²`, query-major.
    pub neighbors: Vec<usize>,
    /// `hr_coord[q] - lr_coord(neighbors[q * r² + j])`, same layout.
    pub offsets: Vec<[T; 2]>,
    pub r: usize,
}

impl<T: Scalar> AttentionQuery<T> {
    pub fn build(hr_coords: &[[T; 2]], lr_grid: &CoordGrid<T>, r: usize) -> Result<Self> {
        let (_, anchors) = nearest_lr_coords(hr_coords, lr_grid);
        let mut neighbors = Vec::with_capacity(hr_coords.len() * r * r);
        let mut offsets = Vec::with_capacity(hr_coords.len() * r * r);
        for (q, &a) in hr_coords.iter().zip(&anchors) {
            for idx in local_neighborhood(a, lr_grid, r)? {
                let c = lr_grid.at(idx);
                neighbors.push(idx);
                offsets.push([q[0] - c[0], q[1] - c[1]]);
            }
        }
        Ok(Self {
            hr_coords: hr_coords.to_vec(),
            anchor_indices: anchors,
            neighbors,
            offsets,
            r,
        })
    }

    pub fn len(&self) -> usize {
        self.hr_coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hr_coords.is_empty()
    }

    pub fn keys_per_query(&self) -> usize {
        self.r * self.r
    }
}

fn project_graph<T: Scalar>(
    g: &mut Graph<T>,
    bind: &Binder<T>,
    z: Var,
    branches: &[ConvParams<T>],
    fuse: &ConvParams<T>,
    prefix: &str,
    fuse_prefix: &str,
) -> Result<Var> {
    let mut outs = Vec::with_capacity(branches.len());
    for (i, b) in branches.iter().enumerate() {
        if b.kernel_size() % 2 == 0 {
            return Err(invalid!("projection kernels must be odd, got {}", b.kernel_size()));
        }
        outs.push(bind.conv(g, z, b, &format!("{prefix}.{i}"), PadMode::Zero)?);
    }
    let cat = g.concat(&outs, 1)?;
    bind.conv(g, cat, fuse, fuse_prefix, PadMode::Zero)
}

/// Every branch convolves the whole field; the concatenated outputs are
/// fused pointwise back to `C` channels.
pub fn multiscale_project<T: Scalar>(
    z: &Tensor<T>,
    branches: &[ConvParams<T>],
    fuse: &ConvParams<T>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let out = project_graph(&mut g, &Binder::plain(), zv, branches, fuse, "p", "f")?;
    Ok(g.value(out).clone())
}

/// Q- and V-fields of a latent, each `[1, C, H, W]`.
pub(crate) fn fields_graph<T: Scalar>(
    g: &mut Graph<T>,
    bind: &Binder<T>,
    z: Var,
    params: &MssaParams<T>,
    prefix: &str,
) -> Result<(Var, Var)> {
    let q = project_graph(
        g,
        bind,
        z,
        &params.proj_q,
        &params.fuse_q,
        &format!("{prefix}.q"),
        &format!("{prefix}.q_fuse"),
    )?;
    let v = project_graph(
        g,
        bind,
        z,
        &params.proj_v,
        &params.fuse_v,
        &format!("{prefix}.v"),
        &format!("{prefix}.v_fuse"),
    )?;
    Ok((q, v))
}

fn lattice_taps<T: Scalar>(indices: &[usize]) -> Vec<Taps<T>> {
    indices
        .iter()
        .map(|&i| [(i, T::one()), (i, T::zero()), (i, T::zero()), (i, T::zero())])
        .collect()
}

/// `(Q̂, K̂, V̂)` for the queries: `[Q, C]`, `[Q, r², C]`, `[Q, r², C]`.
pub(crate) fn qkv_graph<T: Scalar>(
    g: &mut Graph<T>,
    q_field: Var,
    v_field: Var,
    query: &AttentionQuery<T>,
) -> Result<(Var, Var, Var)> {
    let (_, c, h, w) = g.value(q_field).dims4()?;
    if g.value(v_field).shape() != g.value(q_field).shape() {
        return Err(shape_err!("Q- and V-fields differ"));
    }
    let taps = query
        .hr_coords
        .iter()
        .map(|&p| sample_taps(p, h, w, SampleMode::Bilinear))
        .collect();
    let q_hat = g.sample(q_field, taps)?;
    let shape = vec![query.len(), query.keys_per_query(), c];
    let k = g.sample(q_field, lattice_taps(&query.neighbors))?;
    let k_hat = g.reshape(k, shape.clone())?;
    let v = g.sample(v_field, lattice_taps(&query.neighbors))?;
    let v_hat = g.reshape(v, shape)?;
    Ok((q_hat, k_hat, v_hat))
}

/// Fourier logit bias `[Q, r²]` of the query offsets.
pub(crate) fn position_bias_graph<T: Scalar>(
    g: &mut Graph<T>,
    enc: &FourierEncoder<T>,
    query: &AttentionQuery<T>,
    prefix: &str,
) -> Result<Var> {
    let freqs = g.param(&format!("{prefix}.freqs"), &enc.freqs);
    let w = g.param(&format!("{prefix}.mix.weight"), &enc.mix_weight);
    let b = g.param(&format!("{prefix}.mix.bias"), &enc.mix_bias);
    let feats = g.fourier(freqs, query.offsets.clone())?;
    let logits = g.linear(feats, w, b)?;
    g.reshape(logits, vec![query.len(), query.keys_per_query()])
}

/// Attention latents `[Q, C]` for a query chunk, given the projected fields.
pub(crate) fn attend_graph<T: Scalar>(
    g: &mut Graph<T>,
    q_field: Var,
    v_field: Var,
    query: &AttentionQuery<T>,
    enc: &FourierEncoder<T>,
    params: &MssaParams<T>,
    fourier_prefix: &str,
) -> Result<Var> {
    let (q, k, v) = qkv_graph(g, q_field, v_field, query)?;
    let p = position_bias_graph(g, enc, query, fourier_prefix)?;
    g.attention(q, k, v, p, params.heads, params.scale)
}

/// Projects `z_ms` and gathers `(Q̂, K̂, V̂)`.
pub fn build_qkv<T: Scalar>(
    z_ms: &Tensor<T>,
    query: &AttentionQuery<T>,
    params: &MssaParams<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let mut g = Graph::new();
    let z = g.constant(z_ms.clone());
    let (qf, vf) = fields_graph(&mut g, &Binder::plain(), z, params, "mssa")?;
    let (q, k, v) = qkv_graph(&mut g, qf, vf, query)?;
    Ok((g.value(q).clone(), g.value(k).clone(), g.value(v).clone()))
}

/// Per head `h`: `softmax_j(P[q, j] + <Q̂_h[q], K̂_h[q, j]> / M) · V̂_h[q, ·]`,
/// heads concatenated.
pub fn attention_forward<T: Scalar>(
    q_hat: &Tensor<T>,
    k_hat: &Tensor<T>,
    v_hat: &Tensor<T>,
    pos_logits: &Tensor<T>,
    params: &MssaParams<T>,
) -> Result<Tensor<T>> {
    Ok(local_attention(q_hat, k_hat, v_hat, pos_logits, params.heads, params.scale)?.output)
}

/// Attention latents `[Q, C]` of `hr_queries` over the latent `z_ms`.
pub fn mssa_forward<T: Scalar>(
    z_ms: &Tensor<T>,
    hr_queries: &[[T; 2]],
    lr_grid: &CoordGrid<T>,
    enc: &FourierEncoder<T>,
    params: &MssaParams<T>,
) -> Result<Tensor<T>> {
    let (_, _, h, w) = z_ms.dims4()?;
    if (h, w) != (lr_grid.height(), lr_grid.width()) {
        return Err(shape_err!(
            "latent is {}x{} but the grid is {}x{}",
            h,
            w,
            lr_grid.height(),
            lr_grid.width()
        ));
    }
    let query = AttentionQuery::build(hr_queries, lr_grid, params.neighborhood)?;
    let mut g = Graph::new();
    let z = g.constant(z_ms.clone());
    let (qf, vf) = fields_graph(&mut g, &Binder::plain(), z, params, "mssa")?;
    let out = attend_graph(&mut g, qf, vf, &query, enc, params, "fourier")?;
    Ok(g.value(out).clone())
}
