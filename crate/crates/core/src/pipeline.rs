//! End-to-end model: encoder, multi-scale neural operator, multi-scale
//! attention, decoder and the bilinear skip path; plus PSNR and error maps.

use indexmap::{IndexMap, IndexSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::coords::{make_coord_grid, Cell, CoordGrid, FourierEncoder};
use crate::error::{invalid, shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{Binder, ConvParams, LinearParams};
use crate::msno::{msno_graph, FemParams, MscParams, MsnoParams, SimParams};
use crate::mssa::{attend_graph, fields_graph, AttentionQuery, MssaParams};
use crate::reparam::{RimParams, RimVariant, StageTag};
use crate::tensor::{bilinear_resize_to, grid_sample, output_extent, PadMode, SampleMode, Tensor};
use crate::Scalar;

/// Named parameter tensors in model order.
pub type ParamStore<T> = IndexMap<String, Tensor<T>>;

/// Smallest spatial extent the encoder accepts.
pub const MIN_INPUT: usize = 8;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Latent channels `C`.
    pub channels: usize,
    pub encoder_blocks: usize,
    /// Parallel MSC kernels `t`.
    pub msc_branches: usize,
    /// Projection branches per attention field.
    pub proj_branches: usize,
    /// Attention heads `u`.
    pub heads: usize,
    /// Fourier frequencies `g`.
    pub fourier_freqs: usize,
    /// Key window side `r`.
    pub neighborhood: usize,
    /// Logit divisor `M`; `None` is the square root of the head width.
    pub attn_scale: Option<f64>,
    pub decoder_hidden: usize,
    pub decoder_depth: usize,
    pub include_cell: bool,
    pub use_fem: bool,
    pub use_sim: bool,
    pub fem_stride: usize,
    pub rim_variant: RimVariant,
    /// Whether stage 2 keeps training the parameters RIM does not wrap.
    pub rim_train_non_wrapped: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            encoder_blocks: 4,
            msc_branches: 4,
            proj_branches: 4,
            heads: 4,
            fourier_freqs: 64,
            neighborhood: 3,
            attn_scale: None,
            decoder_hidden: 256,
            decoder_depth: 4,
            include_cell: true,
            use_fem: true,
            use_sim: true,
            fem_stride: 1,
            rim_variant: RimVariant::Rim,
            rim_train_non_wrapped: true,
        }
    }
}

fn cfg_err(key: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        msg: msg.into(),
    }
}

impl ModelConfig {
    /// A configuration small enough for finite-difference checks.
    pub fn micro() -> Self {
        Self {
            channels: 8,
            encoder_blocks: 1,
            msc_branches: 2,
            proj_branches: 2,
            heads: 2,
            fourier_freqs: 8,
            neighborhood: 3,
            decoder_hidden: 16,
            decoder_depth: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels;
        if c == 0 || !c.is_multiple_of(8) {
            return Err(cfg_err("channels", format!("{c} is not a positive multiple of 8")));
        }
        if self.msc_branches == 0 || !c.is_multiple_of(self.msc_branches) {
            return Err(cfg_err(
                "msc_branches",
                format!("{} does not divide {c} channels", self.msc_branches),
            ));
        }
        if self.heads == 0 || !c.is_multiple_of(self.heads) {
            return Err(cfg_err("heads", format!("{} does not divide {c} channels", self.heads)));
        }
        if self.proj_branches == 0 {
            return Err(cfg_err("proj_branches", "must be at least 1"));
        }
        if self.fourier_freqs == 0 {
            return Err(cfg_err("fourier_freqs", "must be at least 1"));
        }
        if self.neighborhood.is_multiple_of(2) {
            return Err(cfg_err("neighborhood", "must be odd"));
        }
        if let Some(m) = self.attn_scale {
            if !(m > 0.0 && m.is_finite()) {
                return Err(cfg_err("attn_scale", "must be positive"));
            }
        }
        if self.decoder_hidden == 0 && self.decoder_depth > 0 {
            return Err(cfg_err("decoder_hidden", "must be positive"));
        }
        Ok(())
    }
}

/// Stem convolution, residual blocks and tail convolution with a skip
/// from the stem.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub stem: ConvParams<T>,
    pub blocks: Vec<(ConvParams<T>, ConvParams<T>)>,
    pub tail: ConvParams<T>,
}

impl<T: Scalar> EncoderParams<T> {
    pub fn init<R: Rng>(channels: usize, blocks: usize, rng: &mut R) -> Self {
        Self {
            stem: ConvParams::init(3, channels, 3, rng),
            blocks: (0..blocks)
                .map(|_| {
                    (
                        ConvParams::init(channels, channels, 3, rng),
                        ConvParams::init(channels, channels, 3, rng),
                    )
                })
                .collect(),
            tail: ConvParams::init(channels, channels, 3, rng),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.stem.visit(&format!("{prefix}.stem"), f);
        for (i, (a, b)) in self.blocks.iter().enumerate() {
            a.visit(&format!("{prefix}.blocks.{i}.conv1"), f);
            b.visit(&format!("{prefix}.blocks.{i}.conv2"), f);
        }
        self.tail.visit(&format!("{prefix}.tail"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.stem.visit_mut(&format!("{prefix}.stem"), f);
        for (i, (a, b)) in self.blocks.iter_mut().enumerate() {
            a.visit_mut(&format!("{prefix}.blocks.{i}.conv1"), f);
            b.visit_mut(&format!("{prefix}.blocks.{i}.conv2"), f);
        }
        self.tail.visit_mut(&format!("{prefix}.tail"), f);
    }
}

pub(crate) fn encoder_graph<T: Scalar>(
    g: &mut Graph<T>,
    bind: &Binder<T>,
    img: Var,
    params: &EncoderParams<T>,
    prefix: &str,
) -> Result<Var> {
    let (_, c, h, w) = g.value(img).dims4()?;
    if c != 3 {
        return Err(shape_err!("encoder expects 3 channels, got {}", c));
    }
    if h < MIN_INPUT || w < MIN_INPUT {
        return Err(invalid!(
            "encoder input must be at least {m}x{m}, got {h}x{w}",
            m = MIN_INPUT
        ));
    }
    let s = bind.conv(g, img, &params.stem, &format!("{prefix}.stem"), PadMode::Zero)?;
    let mut x = s;
    for (i, (c1, c2)) in params.blocks.iter().enumerate() {
        let a = bind.conv(g, x, c1, &format!("{prefix}.blocks.{i}.conv1"), PadMode::Zero)?;
        let a = g.gelu(a);
        let b = bind.conv(g, a, c2, &format!("{prefix}.blocks.{i}.conv2"), PadMode::Zero)?;
        x = g.add(x, b)?;
    }
    let t = bind.conv(g, x, &params.tail, &format!("{prefix}.tail"), PadMode::Zero)?;
    g.add(s, t)
}

/// Latent field `[1, C, H, W]` of a `[1, 3, H, W]` image.
pub fn encoder_forward<T: Scalar>(img: &Tensor<T>, params: &EncoderParams<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.constant(img.clone());
    let out = encoder_graph(&mut g, &Binder::plain(), x, params, "encoder")?;
    Ok(g.value(out).clone())
}

/// GELU MLP from attention latents (and the relative cell) to RGB.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams<T> {
    pub layers: Vec<LinearParams<T>>,
    pub include_cell: bool,
}

impl<T: Scalar> DecoderParams<T> {
    pub fn init<R: Rng>(
        channels: usize,
        hidden: usize,
        depth: usize,
        include_cell: bool,
        rng: &mut R,
    ) -> Self {
        let mut width = channels + if include_cell { 2 } else { 0 };
        let mut layers = Vec::with_capacity(depth + 1);
        for _ in 0..depth {
            layers.push(LinearParams::init(width, hidden, rng));
            width = hidden;
        }
        layers.push(LinearParams::init(width, 3, rng));
        Self {
            layers,
            include_cell,
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("{prefix}.layers.{i}"), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}.layers.{i}"), f);
        }
    }
}

/// `[cell_h * H_lr, cell_w * W_lr]` repeated for every row.
fn cell_columns<T: Scalar>(rows: usize, cell: &Cell<T>, lr_size: (usize, usize)) -> Tensor<T> {
    let a = cell.cell_h * T::of_usize(lr_size.0);
    let b = cell.cell_w * T::of_usize(lr_size.1);
    Tensor::from_fn(vec![rows, 2], |i| if i % 2 == 0 { a } else { b })
}

pub(crate) fn decoder_graph<T: Scalar>(
    g: &mut Graph<T>,
    bind: &Binder<T>,
    z_a: Var,
    cell: &Cell<T>,
    lr_size: (usize, usize),
    params: &DecoderParams<T>,
    prefix: &str,
) -> Result<Var> {
    let (rows, _) = g.value(z_a).dims2()?;
    let mut x = if params.include_cell {
        let cc = g.constant(cell_columns(rows, cell, lr_size));
        g.concat(&[z_a, cc], 1)?
    } else {
        z_a
    };
    let last = params.layers.len().saturating_sub(1);
    for (i, l) in params.layers.iter().enumerate() {
        x = bind.linear(g, x, l, &format!("{prefix}.layers.{i}"))?;
        if i < last {
            x = g.gelu(x);
        }
    }
    Ok(x)
}

/// RGB rows `[Q, 3]`; `lr_size` scales the cell into LR pixel units.
pub fn decoder_forward<T: Scalar>(
    z_a: &Tensor<T>,
    cell: &Cell<T>,
    lr_size: (usize, usize),
    params: &DecoderParams<T>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let z = g.constant(z_a.clone());
    let out = decoder_graph(&mut g, &Binder::plain(), z, cell, lr_size, params, "decoder")?;
    Ok(g.value(out).clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SrModel<T> {
    pub config: ModelConfig,
    pub encoder: EncoderParams<T>,
    pub msno: MsnoParams<T>,
    pub mssa: MssaParams<T>,
    pub fourier: FourierEncoder<T>,
    pub decoder: DecoderParams<T>,
    pub stage: StageTag,
    /// Branches keyed by the record name of the kernel they remap.
    pub rim: IndexMap<String, RimParams<T>>,
}

/// Query fields of one LR image, computed once and shared by all chunks.
#[derive(Clone, Debug)]
pub struct LatentFields<T> {
    pub q_field: Tensor<T>,
    pub v_field: Tensor<T>,
    pub lr_grid: CoordGrid<T>,
}

impl<T: Scalar> SrModel<T> {
    /// Seeded Kaiming-uniform initialisation.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.channels;
        let encoder = EncoderParams::init(c, config.encoder_blocks, &mut rng);
        let msno = MsnoParams {
            fem: config.use_fem.then(|| FemParams::uniform(config.fem_stride)),
            msc: MscParams::init(c, config.msc_branches, &mut rng)?,
            sim: if config.use_sim {
                Some(SimParams::init(c, config.msc_branches, &mut rng)?)
            } else {
                None
            },
        };
        let mssa = MssaParams::init(
            c,
            config.proj_branches,
            config.heads,
            config.neighborhood,
            config.attn_scale.map(T::of),
            &mut rng,
        )?;
        let fourier = FourierEncoder::init(config.fourier_freqs, &mut rng)?;
        let decoder = DecoderParams::init(
            c,
            config.decoder_hidden,
            config.decoder_depth,
            config.include_cell,
            &mut rng,
        );
        Ok(Self {
            config: config.clone(),
            encoder,
            msno,
            mssa,
            fourier,
            decoder,
            stage: StageTag::Stage1Plain,
            rim: IndexMap::new(),
        })
    }

    /// Zeroes the decoder's output layer so the model reduces to the skip path.
    pub fn zero_residual(&mut self) {
        if let Some(l) = self.decoder.layers.last_mut() {
            l.weight = Tensor::zeros(l.weight.shape().to_vec());
            l.bias = Tensor::zeros(l.bias.shape().to_vec());
        }
    }

    /// Records of the plain architecture, without RIM branches.
    pub fn visit_base(&self, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.encoder.visit("encoder", f);
        self.msno.visit("msno", f);
        self.mssa.visit("mssa", f);
        f("fourier.freqs".into(), &self.fourier.freqs);
        f("fourier.mix.weight".into(), &self.fourier.mix_weight);
        f("fourier.mix.bias".into(), &self.fourier.mix_bias);
        self.decoder.visit("decoder", f);
    }

    pub fn visit_base_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.encoder.visit_mut("encoder", f);
        self.msno.visit_mut("msno", f);
        self.mssa.visit_mut("mssa", f);
        f("fourier.freqs".into(), &mut self.fourier.freqs);
        f("fourier.mix.weight".into(), &mut self.fourier.mix_weight);
        f("fourier.mix.bias".into(), &mut self.fourier.mix_bias);
        self.decoder.visit_mut("decoder", f);
    }

    /// Every record, branches last.
    pub fn visit(&self, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.visit_base(f);
        for (name, r) in &self.rim {
            r.visit(name, f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.visit_base_mut(f);
        for (name, r) in self.rim.iter_mut() {
            r.visit_mut(name, f);
        }
    }

    pub fn to_store(&self) -> ParamStore<T> {
        let mut s = ParamStore::new();
        self.visit(&mut |n, t| {
            s.insert(n, t.clone());
        });
        s
    }

    /// Overwrites every record from `store`, which must name exactly the
    /// model's records with matching shapes.
    pub fn load_store(&mut self, store: &ParamStore<T>) -> Result<()> {
        let mut seen = 0;
        let mut err = None;
        self.visit_mut(&mut |n, t| match store.get(&n) {
            Some(v) if v.shape() == t.shape() => {
                *t = v.clone();
                seen += 1;
            }
            Some(v) => {
                err.get_or_insert(Error::Consistency(format!(
                    "record `{n}` has shape {:?}, expected {:?}",
                    v.shape(),
                    t.shape()
                )));
            }
            None => {
                err.get_or_insert(Error::Consistency(format!("missing record `{n}`")));
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if seen != store.len() {
            let mut names = IndexSet::new();
            self.visit(&mut |n, _| {
                names.insert(n);
            });
            let extra = store.keys().find(|k| !names.contains(*k)).cloned();
            return Err(Error::Consistency(format!(
                "unexpected record `{}`",
                extra.unwrap_or_default()
            )));
        }
        Ok(())
    }

    /// Kernels a RIM branch may wrap: every `m >= 3` convolution of the
    /// encoder, the MSC branches and the attention projection branches.
    pub fn eligible_kernels(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit_base(&mut |name, t| {
            let scope = name.starts_with("encoder.")
                || name.starts_with("msno.msc.")
                || name.starts_with("mssa.q.")
                || name.starts_with("mssa.v.");
            if scope && name.ends_with(".weight") && t.rank() == 4 && t.shape()[2] >= 3 {
                out.push((name, t.shape().to_vec()));
            }
        });
        out
    }

    /// Records the optimiser updates at this model's stage.
    pub fn trainable_names(&self) -> IndexSet<String> {
        let mut out = IndexSet::new();
        let stage2 = self.stage == StageTag::Stage2Rim;
        let keep_rest = !stage2 || self.config.rim_train_non_wrapped;
        self.visit_base(&mut |n, _| {
            let wrapped = stage2 && self.rim.contains_key(&n);
            if !wrapped && keep_rest {
                out.insert(n);
            }
        });
        for (name, r) in &self.rim {
            r.visit(name, &mut |n, _| {
                out.insert(n);
            });
        }
        out
    }

    pub(crate) fn binder(&self) -> Binder<'_, T> {
        if self.rim.is_empty() {
            Binder::plain()
        } else {
            Binder::with_rim(&self.rim)
        }
    }

    pub fn check_stage(&self) -> Result<()> {
        let ok = match self.stage {
            StageTag::Stage2Rim => !self.rim.is_empty(),
            _ => self.rim.is_empty(),
        };
        if !ok {
            return Err(Error::Consistency(format!(
                "stage {} with {} branches",
                self.stage,
                self.rim.len()
            )));
        }
        crate::reparam::check_variant(&self.rim)
    }

    /// Q/V fields of `img` inside a graph.
    pub(crate) fn fields_graph(&self, g: &mut Graph<T>, img: Var) -> Result<(Var, Var)> {
        let bind = self.binder();
        let z = encoder_graph(g, &bind, img, &self.encoder, "encoder")?;
        let zm = msno_graph(g, &bind, z, &self.msno, "msno")?;
        fields_graph(g, &bind, zm, &self.mssa, "mssa")
    }

    /// Decoder rows `[Q, 3]` for queries against already-bound fields.
    pub(crate) fn residual_graph(
        &self,
        g: &mut Graph<T>,
        fields: (Var, Var),
        queries: &[[T; 2]],
        lr_grid: &CoordGrid<T>,
        cell: &Cell<T>,
    ) -> Result<Var> {
        let bind = self.binder();
        let query = AttentionQuery::build(queries, lr_grid, self.mssa.neighborhood)?;
        let za = attend_graph(g, fields.0, fields.1, &query, &self.fourier, &self.mssa, "fourier")?;
        let lr_size = (lr_grid.height(), lr_grid.width());
        decoder_graph(g, &bind, za, cell, lr_size, &self.decoder, "decoder")
    }

    /// Full predictions `[Q, 3]` (decoder plus bilinear skip) for arbitrary
    /// query coordinates of one `[1, 3, H, W]` image.
    pub(crate) fn predict_graph(
        &self,
        g: &mut Graph<T>,
        img: &Tensor<T>,
        queries: &[[T; 2]],
        cell: &Cell<T>,
    ) -> Result<Var> {
        let (_, _, h, w) = img.dims4()?;
        let lr_grid = make_coord_grid(h, w)?;
        let x = g.constant(img.clone());
        let fields = self.fields_graph(g, x)?;
        let res = self.residual_graph(g, fields, queries, &lr_grid, cell)?;
        let skip = g.constant(grid_sample(img, queries, SampleMode::Bilinear)?);
        g.add(res, skip)
    }

    pub fn latent_fields(&self, img: &Tensor<T>) -> Result<LatentFields<T>> {
        let (n, _, h, w) = img.dims4()?;
        if n != 1 {
            return Err(invalid!("expected a single image, got batch {}", n));
        }
        let mut g = Graph::new();
        let x = g.constant(img.clone());
        let (q, v) = self.fields_graph(&mut g, x)?;
        Ok(LatentFields {
            q_field: g.value(q).clone(),
            v_field: g.value(v).clone(),
            lr_grid: make_coord_grid(h, w)?,
        })
    }

    /// Decoder rows `[Q, 3]` for a chunk of queries.
    pub fn residual_rows(
        &self,
        fields: &LatentFields<T>,
        queries: &[[T; 2]],
        cell: &Cell<T>,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let q = g.constant(fields.q_field.clone());
        let v = g.constant(fields.v_field.clone());
        let out = self.residual_graph(&mut g, (q, v), queries, &fields.lr_grid, cell)?;
        Ok(g.value(out).clone())
    }
}

/// Default number of queries per chunk.
pub const DEFAULT_CHUNK: usize = 4096;

/// Residual image and skip image of an upsampling; their sum is the output.
#[derive(Clone, Debug)]
pub struct AssrParts<T> {
    pub residual: Tensor<T>,
    pub skip: Tensor<T>,
}

pub fn assr_parts<T: Scalar>(
    model: &SrModel<T>,
    img: &Tensor<T>,
    scale_h: T,
    scale_w: T,
    chunk: usize,
) -> Result<AssrParts<T>> {
    model.check_stage()?;
    let (_, _, h, w) = img.dims4()?;
    let out_h = output_extent(h, scale_h)?;
    let out_w = output_extent(w, scale_w)?;
    if chunk == 0 {
        return Err(invalid!("chunk size must be positive"));
    }
    let fields = model.latent_fields(img)?;
    let hr = make_coord_grid::<T>(out_h, out_w)?;
    let cell = Cell::for_output(out_h, out_w)?;
    let q = hr.len();
    let mut residual = Tensor::zeros(vec![1, 3, out_h, out_w]);
    for (ci, part) in hr.coords().chunks(chunk).enumerate() {
        let rows = model.residual_rows(&fields, part, &cell)?;
        let base = ci * chunk;
        let dst = residual.data_mut();
        for (i, row) in rows.data().chunks(3).enumerate() {
            for (c, &v) in row.iter().enumerate() {
                dst[c * q + base + i] = v;
            }
        }
    }
    Ok(AssrParts {
        residual,
        skip: bilinear_resize_to(img, out_h, out_w)?,
    })
}

/// Upsamples a `[1, 3, H, W]` image to `round(s_h H) x round(s_w W)`.
/// Values are not clamped.
pub fn assr_forward<T: Scalar>(
    model: &SrModel<T>,
    img: &Tensor<T>,
    scale_h: T,
    scale_w: T,
) -> Result<Tensor<T>> {
    assr_forward_chunked(model, img, scale_h, scale_w, DEFAULT_CHUNK)
}

pub fn assr_forward_chunked<T: Scalar>(
    model: &SrModel<T>,
    img: &Tensor<T>,
    scale_h: T,
    scale_w: T,
    chunk: usize,
) -> Result<Tensor<T>> {
    let parts = assr_parts(model, img, scale_h, scale_w, chunk)?;
    parts.residual.add(&parts.skip)
}

/// `10 log10(peak² / MSE)`; identical inputs give `+∞`.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, peak: T) -> Result<T> {
    if a.shape() != b.shape() {
        return Err(shape_err!("psnr of {:?} against {:?}", a.shape(), b.shape()));
    }
    if a.is_empty() {
        return Err(invalid!("psnr of empty tensors"));
    }
    let se: T = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum();
    let mse = se / T::of_usize(a.len());
    if mse == T::zero() {
        return Ok(T::infinity());
    }
    Ok(T::of(10.0) * (peak * peak / mse).log10())
}

/// Channel-mean absolute error `[1, 1, H, W]`, divided by its maximum.
pub fn error_map<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<Tensor<T>> {
    if pred.shape() != truth.shape() {
        return Err(shape_err!("error map of {:?} against {:?}", pred.shape(), truth.shape()));
    }
    let (n, c, h, w) = pred.dims4()?;
    if n != 1 {
        return Err(invalid!("error map expects a single image"));
    }
    let plane = h * w;
    let mut m = vec![T::zero(); plane];
    for ch in 0..c {
        for (i, v) in m.iter_mut().enumerate() {
            let k = ch * plane + i;
            *v += (pred.data()[k] - truth.data()[k]).abs();
        }
    }
    let cn = T::of_usize(c.max(1));
    m.iter_mut().for_each(|v| *v /= cn);
    let peak = m.iter().copied().fold(T::zero(), T::max);
    if peak > T::zero() {
        m.iter_mut().for_each(|v| *v /= peak);
    }
    Tensor::new(vec![1, 1, h, w], m)
}
