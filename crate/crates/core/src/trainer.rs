//! Patch sampling, L1 loss, Adam with warmup/cosine schedule, finite
//! difference gradient checks and the two-stage cumulative schedule.

use std::fmt::Write as _;

use indexmap::IndexMap;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::coords::{make_coord_grid, Cell};
use crate::error::{invalid, shape_err, Error, Result};
use crate::graph::{Graph, Grads};
use crate::pipeline::{ModelConfig, SrModel};
use crate::reparam::{fold_for_inference, wrap_model_with_rim, StageTag};
use crate::tensor::{bicubic_resize_to, Tensor};
use crate::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// `η ~ U(scale_min, scale_max)`.
    pub scale_min: f64,
    pub scale_max: f64,
    /// LR patch side; the HR crop side is `round(patch_lr * η)`.
    pub patch_lr: usize,
    pub steps: usize,
    pub warmup_steps: usize,
    pub lr: f64,
    pub lr_floor: f64,
    pub batch: usize,
    pub seed: u64,
    pub stage: StageTag,
    /// Draw fresh patches every step; otherwise the first batch is reused.
    pub resample: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            scale_min: 1.0,
            scale_max: 4.0,
            patch_lr: 12,
            steps: 100,
            warmup_steps: 0,
            lr: 1e-4,
            lr_floor: 0.0,
            batch: 1,
            seed: 0,
            stage: StageTag::Stage1Plain,
            resample: true,
        }
    }
}

pub const MAX_BATCH: usize = 4;

fn cfg_err(key: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        msg: msg.into(),
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale_min >= 1.0 && self.scale_min.is_finite()) {
            return Err(cfg_err("scale_min", "must be at least 1"));
        }
        if !(self.scale_max >= self.scale_min && self.scale_max.is_finite()) {
            return Err(cfg_err("scale_max", "must not be below scale_min"));
        }
        if self.patch_lr < crate::pipeline::MIN_INPUT {
            return Err(cfg_err(
                "patch_lr",
                format!("must be at least {}", crate::pipeline::MIN_INPUT),
            ));
        }
        if self.batch == 0 || self.batch > MAX_BATCH {
            return Err(cfg_err("batch", format!("must be in 1..={MAX_BATCH}")));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(cfg_err("lr", "must be non-negative"));
        }
        if !(self.lr_floor >= 0.0 && self.lr_floor.is_finite()) {
            return Err(cfg_err("lr_floor", "must be non-negative"));
        }
        Ok(())
    }

    /// Learning rate at `step`: linear warmup to `lr`, then cosine decay
    /// to `lr_floor` at the last step.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).saturating_sub(1).max(1);
        let p = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.lr_floor + (self.lr - self.lr_floor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

/// Dihedral augmentation of a square crop, applied as transpose, then
/// vertical flip, then horizontal flip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Augment {
    pub hflip: bool,
    pub vflip: bool,
    pub transpose: bool,
}

impl Augment {
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        Self {
            hflip: rng.gen(),
            vflip: rng.gen(),
            transpose: rng.gen(),
        }
    }

    /// Source pixel of output pixel `(y, x)` in an `n x n` image.
    fn source(&self, y: usize, x: usize, n: usize) -> (usize, usize) {
        let y = if self.vflip { n - 1 - y } else { y };
        let x = if self.hflip { n - 1 - x } else { x };
        if self.transpose {
            (x, y)
        } else {
            (y, x)
        }
    }

    /// Normalised coordinate of the source of an output coordinate.
    pub fn source_coord<T: Scalar>(&self, c: [T; 2]) -> [T; 2] {
        let y = if self.vflip { -c[0] } else { c[0] };
        let x = if self.hflip { -c[1] } else { c[1] };
        if self.transpose {
            [x, y]
        } else {
            [y, x]
        }
    }

    pub fn apply<T: Scalar>(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, h, w) = img.dims4()?;
        if h != w {
            return Err(shape_err!("augmentation needs a square image, got {}x{}", h, w));
        }
        let mut out = Tensor::zeros(img.shape().to_vec());
        let (src, dst) = (img.data(), out.data_mut());
        for p in 0..n * c {
            for y in 0..h {
                for x in 0..w {
                    let (sy, sx) = self.source(y, x, h);
                    dst[(p * h + y) * w + x] = src[(p * h + sy) * w + sx];
                }
            }
        }
        Ok(out)
    }
}

/// One training example.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample<T> {
    /// `[1, 3, p, p]`
    pub lr_patch: Tensor<T>,
    /// Augmented HR crop `[1, 3, s, s]`, `s = round(p η)`.
    pub hr_crop: Tensor<T>,
    /// `p²` distinct lattice coordinates of the crop.
    pub coords: Vec<[T; 2]>,
    /// `[p², 3]` crop pixels at `coords`.
    pub targets: Tensor<T>,
    pub cell: Cell<T>,
    pub augment: Augment,
}

/// Crops, augments and downsamples one HR patch, then samples `p²`
/// coordinate/RGB pairs from the crop.
pub fn sample_patch_pair<T: Scalar, R: Rng>(
    hr_image: &Tensor<T>,
    eta: f64,
    patch_lr: usize,
    rng: &mut R,
) -> Result<PatchSample<T>> {
    let (n, c, h, w) = hr_image.dims4()?;
    if n != 1 || c != 3 {
        return Err(shape_err!("expected a [1, 3, H, W] image, got {:?}", hr_image.shape()));
    }
    if !(eta >= 1.0 && eta.is_finite()) || patch_lr == 0 {
        return Err(invalid!("bad patch request: eta {}, patch {}", eta, patch_lr));
    }
    let side = (patch_lr as f64 * eta + 0.5).floor() as usize;
    if side > h || side > w {
        return Err(invalid!("image {}x{} is smaller than a {} crop", h, w, side));
    }
    let y0 = rng.gen_range(0..=h - side);
    let x0 = rng.gen_range(0..=w - side);
    let mut crop = Tensor::zeros(vec![1, 3, side, side]);
    for ch in 0..3 {
        for y in 0..side {
            for x in 0..side {
                crop.data_mut()[(ch * side + y) * side + x] = hr_image.at4(0, ch, y0 + y, x0 + x);
            }
        }
    }
    let augment = Augment::random(rng);
    let crop = augment.apply(&crop)?;
    let lr_patch = bicubic_resize_to(&crop, patch_lr, patch_lr)?;
    let grid = make_coord_grid::<T>(side, side)?;
    let q = patch_lr * patch_lr;
    let picks = sample_indices(rng, side * side, q).into_vec();
    let plane = side * side;
    let mut targets = Vec::with_capacity(q * 3);
    for &i in &picks {
        for ch in 0..3 {
            targets.push(crop.data()[ch * plane + i]);
        }
    }
    Ok(PatchSample {
        lr_patch,
        coords: picks.iter().map(|&i| grid.at(i)).collect(),
        targets: Tensor::new(vec![q, 3], targets)?,
        cell: Cell::for_output(side, side)?,
        hr_crop: crop,
        augment,
    })
}

/// Mean absolute error over all entries.
pub fn l1_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    if pred.shape() != target.shape() {
        return Err(shape_err!("l1 of {:?} against {:?}", pred.shape(), target.shape()));
    }
    let s: T = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| (a - b).abs())
        .sum();
    Ok(s / T::of_usize(pred.len().max(1)))
}

/// Builds the loss graph of a batch and returns `(loss, grads)`.
pub fn loss_and_grads<T: Scalar>(
    model: &SrModel<T>,
    batch: &[PatchSample<T>],
    with_grads: bool,
) -> Result<(T, Option<Grads<T>>)> {
    if batch.is_empty() {
        return Err(invalid!("empty batch"));
    }
    let mut g = Graph::new();
    let mut preds = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    for s in batch {
        preds.push(model.predict_graph(&mut g, &s.lr_patch, &s.coords, &s.cell)?);
        targets.push(&s.targets);
    }
    let pred = g.concat(&preds, 0)?;
    let target = crate::tensor::concat_axis(&targets, 0)?;
    let loss = g.l1(pred, target)?;
    let value = g.value(loss).data()[0];
    let grads = if with_grads {
        Some(g.backward(loss)?)
    } else {
        None
    };
    Ok((value, grads))
}

pub fn eval_loss<T: Scalar>(model: &SrModel<T>, batch: &[PatchSample<T>]) -> Result<T> {
    Ok(loss_and_grads(model, batch, false)?.0)
}

/// Adam with `β = (0.9, 0.999)`, `ε = 1e-8`.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    m: IndexMap<String, Tensor<T>>,
    v: IndexMap<String, Tensor<T>>,
    t: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Self {
            m: IndexMap::new(),
            v: IndexMap::new(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl<T: Scalar> Adam<T> {
    /// One update of every parameter in `names`; missing gradients count as zero.
    pub fn step(
        &mut self,
        model: &mut SrModel<T>,
        grads: &Grads<T>,
        names: &indexmap::IndexSet<String>,
        lr: f64,
    ) {
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::one() - T::of(self.beta1.powi(self.t));
        let c2 = T::one() - T::of(self.beta2.powi(self.t));
        let (lr, eps) = (T::of(lr), T::of(self.eps));
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_mut(&mut |name, p| {
            if !names.contains(&name) {
                return;
            }
            let g = grads.param(&name);
            let m = ms
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            let v = vs
                .entry(name)
                .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            for i in 0..p.len() {
                let gi = g.map_or(T::zero(), |g| g.data()[i]);
                let mi = b1 * m.data()[i] + (T::one() - b1) * gi;
                let vi = b2 * v.data()[i] + (T::one() - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                p.data_mut()[i] -= lr * (mi / c1) / ((vi / c2).sqrt() + eps);
            }
        });
    }
}

/// `(step, lr, loss)` rows; the loss is measured before the step's update.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossHistory {
    pub rows: Vec<(usize, f64, f64)>,
}

impl LossHistory {
    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.2).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,lr,loss\n");
        for (step, lr, loss) in &self.rows {
            let _ = writeln!(s, "{step},{lr:e},{loss:e}");
        }
        s
    }
}

fn draw_batch<T: Scalar>(
    images: &[Tensor<T>],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PatchSample<T>>> {
    (0..cfg.batch)
        .map(|_| {
            let img = &images[rng.gen_range(0..images.len())];
            let eta = if cfg.scale_max > cfg.scale_min {
                rng.gen_range(cfg.scale_min..cfg.scale_max)
            } else {
                cfg.scale_min
            };
            sample_patch_pair(img, eta, cfg.patch_lr, rng)
        })
        .collect()
}

/// Sampling stream for a training seed, distinct from the init stream.
pub fn sampling_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5a3b_1e00_0001)
}

/// Runs `cfg.steps` Adam steps on the model's trainable parameters.
pub fn train_micro<T: Scalar>(
    model: &mut SrModel<T>,
    images: &[Tensor<T>],
    cfg: &TrainConfig,
) -> Result<LossHistory> {
    cfg.validate()?;
    model.check_stage()?;
    if model.stage != cfg.stage {
        return Err(Error::Consistency(format!(
            "training config is for {} but the model is {}",
            cfg.stage, model.stage
        )));
    }
    if images.is_empty() {
        return Err(invalid!("no training images"));
    }
    let mut rng = sampling_rng(cfg.seed);
    let names = model.trainable_names();
    let mut opt = Adam::default();
    let mut history = LossHistory::default();
    let mut batch = draw_batch(images, cfg, &mut rng)?;
    for step in 0..cfg.steps {
        if cfg.resample && step > 0 {
            batch = draw_batch(images, cfg, &mut rng)?;
        }
        let (loss, grads) = loss_and_grads(model, &batch, true)?;
        let lv = loss.as_f64();
        if !lv.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("loss = {lv}"),
            });
        }
        let lr = cfg.lr_at(step);
        history.rows.push((step, lr, lv));
        if let Some(g) = grads {
            opt.step(model, &g, &names, lr);
        }
    }
    Ok(history)
}

/// Largest relative error of one module's sampled scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct ModuleCheck {
    pub module: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub modules: Vec<ModuleCheck>,
    pub max_rel_err: f64,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Module label of a record: its first path segment, or `rim` for
/// re-interaction branches.
pub fn module_of(name: &str) -> &str {
    if name.contains(".rim.") {
        "rim"
    } else {
        name.split('.').next().unwrap_or(name)
    }
}

/// Central-difference check of up to `per_module` scalars of every
/// module's trainable records.
pub fn grad_check(
    model: &SrModel<f64>,
    batch: &[PatchSample<f64>],
    eps: f64,
    per_module: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let (_, grads) = loss_and_grads(model, batch, true)?;
    let grads = grads.expect("gradients requested");
    let trainable = model.trainable_names();
    let mut scalars: IndexMap<String, Vec<(String, usize)>> = IndexMap::new();
    model.visit(&mut |name, t| {
        if trainable.contains(&name) {
            let list = scalars.entry(module_of(&name).to_string()).or_default();
            list.extend((0..t.len()).map(|i| (name.clone(), i)));
        }
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = model.clone();
    let mut modules = Vec::new();
    for (module, all) in scalars {
        let k = per_module.min(all.len());
        let mut worst = 0.0f64;
        for pick in sample_indices(&mut rng, all.len(), k).into_vec() {
            let (name, idx) = &all[pick];
            let analytic = grads.param(name).map_or(0.0, |g| g.data()[*idx]);
            let mut at = |delta: f64| -> Result<f64> {
                let mut orig = 0.0;
                work.visit_mut(&mut |n, t| {
                    if &n == name {
                        orig = t.data()[*idx];
                        t.data_mut()[*idx] = orig + delta;
                    }
                });
                let l = eval_loss(&work, batch);
                work.visit_mut(&mut |n, t| {
                    if &n == name {
                        t.data_mut()[*idx] = orig;
                    }
                });
                l
            };
            let numeric = (at(eps)? - at(-eps)?) / (2.0 * eps);
            worst = worst.max(relative_error(analytic, numeric));
        }
        modules.push(ModuleCheck {
            module,
            checked: k,
            max_rel_err: worst,
        });
    }
    let max_rel_err = modules.iter().map(|m| m.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        modules,
        max_rel_err,
    })
}

/// Gradient-check setup: a seeded micro model and one fixed batch of
/// `queries` coordinate/RGB pairs over an `lr_size` patch.
pub fn grad_check_batch(
    model_cfg: &ModelConfig,
    lr_size: usize,
    queries: usize,
    seed: u64,
) -> Result<(SrModel<f64>, Vec<PatchSample<f64>>)> {
    let model = SrModel::init(model_cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let hr = Tensor::from_fn(vec![1, 3, 2 * lr_size, 2 * lr_size], |_| rng.gen_range(0.0..1.0));
    let mut s = sample_patch_pair(&hr, 2.0, lr_size, &mut rng)?;
    let q = queries.min(s.coords.len());
    s.coords.truncate(q);
    s.targets = crate::tensor::narrow_axis(&s.targets, 0, 0, q)?;
    Ok((model, vec![s]))
}

/// Models and histories of both stages of a cumulative run.
#[derive(Clone, Debug)]
pub struct CumulativeResult<T> {
    pub stage1: SrModel<T>,
    pub stage2: SrModel<T>,
    pub folded: SrModel<T>,
    pub history1: LossHistory,
    pub history2: LossHistory,
}

/// Trains a plain model, wraps it, trains the branches and folds.
pub fn cumulative_schedule<T: Scalar>(
    model: SrModel<T>,
    images: &[Tensor<T>],
    cfg1: &TrainConfig,
    cfg2: &TrainConfig,
) -> Result<CumulativeResult<T>> {
    if cfg1.stage != StageTag::Stage1Plain || cfg2.stage != StageTag::Stage2Rim {
        return Err(Error::Consistency(format!(
            "cumulative training needs stage1_plain then stage2_rim, got {} then {}",
            cfg1.stage, cfg2.stage
        )));
    }
    let mut stage1 = model;
    let history1 = train_micro(&mut stage1, images, cfg1)?;
    let mut stage2 = wrap_model_with_rim(&stage1)?;
    let history2 = train_micro(&mut stage2, images, cfg2)?;
    let folded = fold_for_inference(&stage2)?;
    Ok(CumulativeResult {
        stage1,
        stage2,
        folded,
        history1,
        history2,
    })
}
