//! Re-interaction weight remapping `W' = W + DW(W) ⊙ Linear(W)`, the
//! two-stage wrap/fold workflow and parameter accounting.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;

use crate::error::{invalid, shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::LinearParams;
use crate::pipeline::SrModel;
use crate::tensor::{PadMode, Tensor};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RimVariant {
    /// Depthwise branch times spatial linear branch.
    #[default]
    Rim,
    /// Depthwise branch only.
    Ref,
}

impl fmt::Display for RimVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RimVariant::Rim => "rim",
            RimVariant::Ref => "ref",
        })
    }
}

impl FromStr for RimVariant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "rim" => Ok(RimVariant::Rim),
            "ref" => Ok(RimVariant::Ref),
            other => Err(format!("expected `rim` or `ref`, got `{other}`")),
        }
    }
}

/// Training stage of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum StageTag {
    #[default]
    Stage1Plain,
    Stage2Rim,
    Folded,
}

impl fmt::Display for StageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StageTag::Stage1Plain => "stage1_plain",
            StageTag::Stage2Rim => "stage2_rim",
            StageTag::Folded => "folded",
        })
    }
}

impl FromStr for StageTag {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "stage1_plain" => Ok(StageTag::Stage1Plain),
            "stage2_rim" => Ok(StageTag::Stage2Rim),
            "folded" => Ok(StageTag::Folded),
            other => Err(format!("unknown stage `{other}`")),
        }
    }
}

/// Branch parameters attached to one `[Co, Ci, m, m]` kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct RimParams<T> {
    /// `[Ci * Co, 1, 3, 3]`, one 3x3 kernel per reshaped channel.
    pub dw: Tensor<T>,
    /// `m² -> m²` map shared by all channels; absent for [`RimVariant::Ref`].
    pub linear: Option<LinearParams<T>>,
}

impl<T: Scalar> RimParams<T> {
    /// A branch whose contribution is exactly zero.
    ///
    /// `Rim` starts with identity depthwise kernels and a zero linear map,
    /// `Ref` with zero depthwise kernels; either way gradients reach every
    /// branch parameter from the first step.
    pub fn zero_branch(weight_shape: &[usize], variant: RimVariant) -> Result<Self> {
        let (co, ci, m) = kernel_dims(weight_shape)?;
        let ch = co * ci;
        let mut dw = Tensor::zeros(vec![ch, 1, 3, 3]);
        let linear = match variant {
            RimVariant::Rim => {
                for c in 0..ch {
                    dw.data_mut()[c * 9 + 4] = T::one();
                }
                Some(LinearParams {
                    weight: Tensor::zeros(vec![m * m, m * m]),
                    bias: Tensor::zeros(vec![m * m]),
                })
            }
            RimVariant::Ref => None,
        };
        Ok(Self { dw, linear })
    }

    pub fn variant(&self) -> RimVariant {
        if self.linear.is_some() {
            RimVariant::Rim
        } else {
            RimVariant::Ref
        }
    }

    pub fn num_params(&self) -> usize {
        self.dw.len()
            + self
                .linear
                .as_ref()
                .map_or(0, |l| l.weight.len() + l.bias.len())
    }

    /// Visits records as `{weight_name}.rim.dw`, `.rim.lin.weight`, `.rim.lin.bias`.
    pub fn visit(&self, weight_name: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(format!("{weight_name}.rim.dw"), &self.dw);
        if let Some(l) = &self.linear {
            l.visit(&format!("{weight_name}.rim.lin"), f);
        }
    }

    pub fn visit_mut(&mut self, weight_name: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{weight_name}.rim.dw"), &mut self.dw);
        if let Some(l) = &mut self.linear {
            l.visit_mut(&format!("{weight_name}.rim.lin"), f);
        }
    }
}

fn kernel_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [co, ci, m, m2] if m == m2 && m >= 1 && co * ci > 0 => Ok((co, ci, m)),
        _ => Err(shape_err!("expected a square conv kernel, got {:?}", shape)),
    }
}

/// Effective kernel for `w` inside a graph; `name` is the record name of `w`.
pub fn rim_remap_graph<T: Scalar>(
    g: &mut Graph<T>,
    w: Var,
    rim: &RimParams<T>,
    name: &str,
) -> Result<Var> {
    let shape = g.value(w).shape().to_vec();
    let (co, ci, m) = kernel_dims(&shape)?;
    let ch = co * ci;
    if rim.dw.shape() != [ch, 1, 3, 3] {
        return Err(shape_err!(
            "depthwise kernel {:?} for weight {:?}",
            rim.dw.shape(),
            shape
        ));
    }
    let img = g.reshape(w, vec![1, ch, m, m])?;
    let dw = g.param(&format!("{name}.rim.dw"), &rim.dw);
    let d = g.conv(img, dw, None, PadMode::Zero, ch)?;
    let delta = match &rim.linear {
        Some(lin) => {
            if lin.weight.shape() != [m * m, m * m] || lin.bias.shape() != [m * m] {
                return Err(shape_err!(
                    "linear map {:?} for {}x{} kernels",
                    lin.weight.shape(),
                    m,
                    m
                ));
            }
            let rows = g.reshape(w, vec![ch, m * m])?;
            let lw = g.param(&format!("{name}.rim.lin.weight"), &lin.weight);
            let lb = g.param(&format!("{name}.rim.lin.bias"), &lin.bias);
            let a = g.linear(rows, lw, lb)?;
            let a = g.reshape(a, vec![1, ch, m, m])?;
            g.mul(d, a)?
        }
        None => d,
    };
    let sum = g.add(img, delta)?;
    g.reshape(sum, shape)
}

/// `W + DW(W) ⊙ Linear(W)` (or `W + DW(W)` for the reference variant).
pub fn rim_remap<T: Scalar>(w: &Tensor<T>, rim: &RimParams<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let wv = g.constant(w.clone());
    let out = rim_remap_graph(&mut g, wv, rim, "w")?;
    Ok(g.value(out).clone())
}

/// Attaches a zero-contribution branch to every eligible kernel.
pub fn wrap_model_with_rim<T: Scalar>(model: &SrModel<T>) -> Result<SrModel<T>> {
    if model.stage != StageTag::Stage1Plain {
        return Err(Error::Consistency(format!(
            "only a stage1_plain model can be wrapped, got {}",
            model.stage
        )));
    }
    let variant = model.config.rim_variant;
    let mut rim = IndexMap::new();
    for (name, shape) in model.eligible_kernels() {
        rim.insert(name, RimParams::zero_branch(&shape, variant)?);
    }
    let mut out = model.clone();
    out.rim = rim;
    out.stage = StageTag::Stage2Rim;
    Ok(out)
}

/// Drops the branches of a stage-2 model, returning its stage-1 form.
pub fn unwrap<T: Scalar>(model: &SrModel<T>) -> Result<SrModel<T>> {
    if model.stage != StageTag::Stage2Rim {
        return Err(Error::Consistency(format!(
            "only a stage2_rim model can be unwrapped, got {}",
            model.stage
        )));
    }
    let mut out = model.clone();
    out.rim.clear();
    out.stage = StageTag::Stage1Plain;
    Ok(out)
}

/// Bakes every remapped kernel into a plain model.
pub fn fold_for_inference<T: Scalar>(model: &SrModel<T>) -> Result<SrModel<T>> {
    if model.stage != StageTag::Stage2Rim {
        return Err(Error::Consistency(format!(
            "only a stage2_rim model can be folded, got {}",
            model.stage
        )));
    }
    let mut folded: IndexMap<String, Tensor<T>> = IndexMap::new();
    let mut failure = None;
    model.visit_base(&mut |name, t| {
        if let Some(rim) = model.rim.get(&name) {
            match rim_remap(t, rim) {
                Ok(w) => {
                    folded.insert(name, w);
                }
                Err(e) => failure = Some(e),
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if folded.len() != model.rim.len() {
        return Err(Error::Consistency(
            "branches attached to unknown kernels".to_string(),
        ));
    }
    let mut out = model.clone();
    out.visit_base_mut(&mut |name, t| {
        if let Some(w) = folded.swap_remove(&name) {
            *t = w;
        }
    });
    out.rim.clear();
    out.stage = StageTag::Folded;
    Ok(out)
}

/// Element counts per top-level module, in model order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamReport {
    pub modules: Vec<(String, usize)>,
    pub total: usize,
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (m, n) in &self.modules {
            writeln!(f, "{m:<10} {n}")?;
        }
        write!(f, "{:<10} {}", "total", self.total)
    }
}

/// Tallies named records by their first path segment.
pub fn count_records<'a>(records: impl IntoIterator<Item = (&'a str, usize)>) -> ParamReport {
    let mut modules: IndexMap<String, usize> = IndexMap::new();
    let mut total = 0;
    for (name, n) in records {
        let module = name.split('.').next().unwrap_or(name);
        *modules.entry(module.to_string()).or_default() += n;
        total += n;
    }
    ParamReport {
        modules: modules.into_iter().collect(),
        total,
    }
}

/// Counts all parameters, or only those the model's stage trains.
pub fn param_count<T: Scalar>(model: &SrModel<T>, trainable_only: bool) -> ParamReport {
    let trainable = model.trainable_names();
    let mut recs = Vec::new();
    model.visit(&mut |name, t| {
        if !trainable_only || trainable.contains(&name) {
            recs.push((name, t.len()));
        }
    });
    count_records(recs.iter().map(|(n, c)| (n.as_str(), *c)))
}

/// `m x m` kernel with `ci * co` channel pairs: element counts of the
/// kernel itself and of a `Rim` branch replacing it.
pub fn rim_accounting(ci: usize, co: usize, m: usize) -> (usize, usize) {
    (ci * co * m * m, 9 * ci * co + m.pow(4) + m * m)
}

pub(crate) fn check_variant(rim: &IndexMap<String, RimParams<impl Scalar>>) -> Result<()> {
    let mut variants = rim.values().map(RimParams::variant);
    if let Some(first) = variants.next() {
        if variants.any(|v| v != first) {
            return Err(invalid!("mixed branch variants in one model"));
        }
    }
    Ok(())
}
