//! Multi-scale neural operator: directional feature shifting (FEM),
//! parallel multi-kernel convolution (MSC) and scale integration (SIM).

use rand::Rng;

use crate::error::{invalid, shape_err, Result};
use crate::graph::{Graph, Var};
use crate::layers::{Binder, ConvParams};
use crate::tensor::{self, PadMode, Tensor};
use crate::Scalar;

/// Compass directions of the eight FEM channel groups, in group order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Up,
    UpLeft,
    UpRight,
    Down,
    DownLeft,
    DownRight,
    Left,
    Right,
}

impl Direction {
    pub const ALL: [Direction; 8] = [
        Direction::Up,
        Direction::UpLeft,
        Direction::UpRight,
        Direction::Down,
        Direction::DownLeft,
        Direction::DownRight,
        Direction::Left,
        Direction::Right,
    ];

    /// Unit displacement `(dy, dx)` of the content; down and right are positive.
    pub fn step(self) -> (isize, isize) {
        match self {
            Direction::Up => (-1, 0),
            Direction::UpLeft => (-1, -1),
            Direction::UpRight => (-1, 1),
            Direction::Down => (1, 0),
            Direction::DownLeft => (1, -1),
            Direction::DownRight => (1, 1),
            Direction::Left => (0, -1),
            Direction::Right => (0, 1),
        }
    }
}

/// Shift strides per direction group and the realised one-hot kernels.
#[derive(Clone, Debug, PartialEq)]
pub struct FemParams<T> {
    strides: [usize; 8],
    /// `[8, 1, k, k]` with `k = 2 * max_stride + 1`; learnable.
    pub kernels: Tensor<T>,
}

impl<T: Scalar> FemParams<T> {
    /// One-hot kernels: the hot tap of group `g` sits at
    /// `centre - stride_g * step_g`, so correlation reads the pixel the
    /// content came from.
    pub fn new(strides: [usize; 8]) -> Self {
        let reach = strides.iter().copied().max().unwrap_or(0);
        let k = 2 * reach + 1;
        let mut kernels = Tensor::zeros(vec![8, 1, k, k]);
        for (g, dir) in Direction::ALL.iter().enumerate() {
            let (dy, dx) = dir.step();
            let n = strides[g] as isize;
            let ky = (reach as isize - dy * n) as usize;
            let kx = (reach as isize - dx * n) as usize;
            kernels.data_mut()[(g * k + ky) * k + kx] = T::one();
        }
        Self { strides, kernels }
    }

    pub fn uniform(stride: usize) -> Self {
        Self::new([stride; 8])
    }

    pub fn strides(&self) -> [usize; 8] {
        self.strides
    }

    pub fn kernel_size(&self) -> usize {
        self.kernels.shape()[2]
    }
}

fn fem_groups(c: usize) -> Result<usize> {
    if c == 0 || !c.is_multiple_of(8) {
        return Err(invalid!("FEM needs channels divisible by 8, got {}", c));
    }
    Ok(c / 8)
}

/// Rolls each of the eight channel groups by its stride in its direction,
/// wrapping what leaves one side back in on the other.
pub fn fem_shift_direct<T: Scalar>(z: &Tensor<T>, params: &FemParams<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = z.dims4()?;
    let per = fem_groups(c)?;
    let mut out = Tensor::zeros(z.shape().to_vec());
    let (src, dst) = (z.data(), out.data_mut());
    for b in 0..n {
        for ch in 0..c {
            let g = ch / per;
            let (dy, dx) = Direction::ALL[g].step();
            let s = params.strides[g] as isize;
            let base = (b * c + ch) * h * w;
            for y in 0..h {
                let sy = (y as isize - dy * s).rem_euclid(h as isize) as usize;
                for x in 0..w {
                    let sx = (x as isize - dx * s).rem_euclid(w as isize) as usize;
                    dst[base + y * w + x] = src[base + sy * w + sx];
                }
            }
        }
    }
    Ok(out)
}

/// Channel `c` uses the kernel of group `c / (C / 8)`.
fn fem_kernel_rows(c: usize) -> Result<Vec<usize>> {
    let per = fem_groups(c)?;
    Ok((0..c).map(|ch| ch / per).collect())
}

pub(crate) fn fem_graph<T: Scalar>(
    g: &mut Graph<T>,
    z: Var,
    params: &FemParams<T>,
    prefix: &str,
) -> Result<Var> {
    let (_, c, _, _) = g.value(z).dims4()?;
    let rows = fem_kernel_rows(c)?;
    let k8 = g.param(&format!("{prefix}.kernels"), &params.kernels);
    let kc = g.select_rows(k8, rows)?;
    g.conv(z, kc, None, PadMode::Circular, c)
}

/// The same shift realised as a circular depthwise convolution.
pub fn fem_shift_conv<T: Scalar>(z: &Tensor<T>, params: &FemParams<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let out = fem_graph(&mut g, zv, params, "fem")?;
    Ok(g.value(out).clone())
}

/// `t` parallel branches; branch `i` (0-based) has kernel size `2i + 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct MscParams<T> {
    pub branches: Vec<ConvParams<T>>,
}

impl<T: Scalar> MscParams<T> {
    pub fn init<R: Rng>(channels: usize, t: usize, rng: &mut R) -> Result<Self> {
        if t == 0 || !channels.is_multiple_of(t) {
            return Err(invalid!("{} branches do not divide {} channels", t, channels));
        }
        let w = channels / t;
        Ok(Self {
            branches: (0..t)
                .map(|i| ConvParams::init(w, w, 2 * i + 3, rng))
                .collect(),
        })
    }

    pub fn groups(&self) -> usize {
        self.branches.len()
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        for (i, b) in self.branches.iter().enumerate() {
            b.visit(&format!("{prefix}.{i}"), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, b) in self.branches.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}.{i}"), f);
        }
    }
}

pub(crate) fn msc_graph<T: Scalar>(
    g: &mut Graph<T>,
    bind: &Binder<T>,
    z: Var,
    params: &MscParams<T>,
    prefix: &str,
) -> Result<Vec<Var>> {
    let (_, c, _, _) = g.value(z).dims4()?;
    let t = params.groups();
    if t == 0 || c % t != 0 {
        return Err(invalid!("{} branches do not divide {} channels", t, c));
    }
    let w = c / t;
    let mut outs = Vec::with_capacity(t);
    for (i, branch) in params.branches.iter().enumerate() {
        let part = g.narrow(z, 1, i * w, w)?;
        outs.push(bind.conv(g, part, branch, &format!("{prefix}.{i}"), PadMode::Zero)?);
    }
    Ok(outs)
}

/// Splits channels into `t` contiguous groups and convolves group `i`
/// with branch `i`.
pub fn msc_apply<T: Scalar>(z: &Tensor<T>, params: &MscParams<T>) -> Result<Vec<Tensor<T>>> {
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let outs = msc_graph(&mut g, &Binder::plain(), zv, params, "msc")?;
    Ok(outs.into_iter().map(|v| g.value(v).clone()).collect())
}

/// Nonlinearity between the per-scale and cross-scale mixers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SimActivation {
    #[default]
    Gelu,
    /// Linear stand-in, only for checking the mixers' algebra.
    Identity,
}

/// Per-scale `1 x 1` mixers, a cross-scale `1 x 1` mixer and the
/// `1 x 1` generator of the Hadamard modulation.
#[derive(Clone, Debug, PartialEq)]
pub struct SimParams<T> {
    pub per_scale: Vec<ConvParams<T>>,
    pub cross_scale: ConvParams<T>,
    pub modulation: ConvParams<T>,
}

impl<T: Scalar> SimParams<T> {
    pub fn init<R: Rng>(channels: usize, t: usize, rng: &mut R) -> Result<Self> {
        if t == 0 || !channels.is_multiple_of(t) {
            return Err(invalid!("{} groups do not divide {} channels", t, channels));
        }
        let w = channels / t;
        Ok(Self {
            per_scale: (0..t).map(|_| ConvParams::init(w, w, 1, rng)).collect(),
            cross_scale: ConvParams::init(channels, channels, 1, rng),
            modulation: ConvParams::init(channels, channels, 1, rng),
        })
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        for (i, p) in self.per_scale.iter().enumerate() {
            p.visit(&format!("{prefix}.ss.{i}"), f);
        }
        self.cross_scale.visit(&format!("{prefix}.ds"), f);
        self.modulation.visit(&format!("{prefix}.mod"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, p) in self.per_scale.iter_mut().enumerate() {
            p.visit_mut(&format!("{prefix}.ss.{i}"), f);
        }
        self.cross_scale.visit_mut(&format!("{prefix}.ds"), f);
        self.modulation.visit_mut(&format!("{prefix}.mod"), f);
    }
}

pub(crate) fn sim_graph<T: Scalar>(
    g: &mut Graph<T>,
    bind: &Binder<T>,
    groups: &[Var],
    params: &SimParams<T>,
    act: SimActivation,
    prefix: &str,
) -> Result<Var> {
    if groups.len() != params.per_scale.len() {
        return Err(shape_err!(
            "{} scale groups for {} per-scale mixers",
            groups.len(),
            params.per_scale.len()
        ));
    }
    let stacked = g.concat(groups, 1)?;
    let modulation = bind.conv(g, stacked, &params.modulation, &format!("{prefix}.mod"), PadMode::Zero)?;
    let mut mixed = Vec::with_capacity(groups.len());
    for (i, (&grp, p)) in groups.iter().zip(&params.per_scale).enumerate() {
        let m = bind.conv(g, grp, p, &format!("{prefix}.ss.{i}"), PadMode::Zero)?;
        mixed.push(match act {
            SimActivation::Gelu => g.gelu(m),
            SimActivation::Identity => m,
        });
    }
    let cat = g.concat(&mixed, 1)?;
    let merged = bind.conv(g, cat, &params.cross_scale, &format!("{prefix}.ds"), PadMode::Zero)?;
    g.mul(merged, modulation)
}

/// `W_ds(σ(W_ss_i(group_i))...) ⊙ W_Z`, with `W_Z` generated from the
/// concatenated input groups.
pub fn sim_merge<T: Scalar>(groups: &[Tensor<T>], params: &SimParams<T>) -> Result<Tensor<T>> {
    sim_merge_with(groups, params, SimActivation::Gelu)
}

pub fn sim_merge_with<T: Scalar>(
    groups: &[Tensor<T>],
    params: &SimParams<T>,
    act: SimActivation,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = groups.iter().map(|t| g.constant(t.clone())).collect();
    let out = sim_graph(&mut g, &Binder::plain(), &vars, params, act, "sim")?;
    Ok(g.value(out).clone())
}

/// FEM and SIM are optional so their ablations can be expressed; without
/// SIM the MSC outputs are concatenated as they are.
#[derive(Clone, Debug, PartialEq)]
pub struct MsnoParams<T> {
    pub fem: Option<FemParams<T>>,
    pub msc: MscParams<T>,
    pub sim: Option<SimParams<T>>,
}

impl<T: Scalar> MsnoParams<T> {
    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        if let Some(fem) = &self.fem {
            f(format!("{prefix}.fem.kernels"), &fem.kernels);
        }
        self.msc.visit(&format!("{prefix}.msc"), f);
        if let Some(sim) = &self.sim {
            sim.visit(&format!("{prefix}.sim"), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        if let Some(fem) = &mut self.fem {
            f(format!("{prefix}.fem.kernels"), &mut fem.kernels);
        }
        self.msc.visit_mut(&format!("{prefix}.msc"), f);
        if let Some(sim) = &mut self.sim {
            sim.visit_mut(&format!("{prefix}.sim"), f);
        }
    }
}

pub(crate) fn msno_graph<T: Scalar>(
    g: &mut Graph<T>,
    bind: &Binder<T>,
    z: Var,
    params: &MsnoParams<T>,
    prefix: &str,
) -> Result<Var> {
    let shifted = match &params.fem {
        Some(fem) => fem_graph(g, z, fem, &format!("{prefix}.fem"))?,
        None => z,
    };
    let groups = msc_graph(g, bind, shifted, &params.msc, &format!("{prefix}.msc"))?;
    match &params.sim {
        Some(sim) => sim_graph(g, bind, &groups, sim, SimActivation::Gelu, &format!("{prefix}.sim")),
        None => g.concat(&groups, 1),
    }
}

/// `sim_merge(msc_apply(fem_shift_conv(z)))`, skipping disabled stages.
pub fn msno_forward<T: Scalar>(z: &Tensor<T>, params: &MsnoParams<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let out = msno_graph(&mut g, &Binder::plain(), zv, params, "msno")?;
    Ok(g.value(out).clone())
}

/// Convenience for callers that hold the FEM/MSC/SIM stages separately.
pub fn concat_groups<T: Scalar>(groups: &[Tensor<T>]) -> Result<Tensor<T>> {
    let refs: Vec<&Tensor<T>> = groups.iter().collect();
    tensor::concat_channels(&refs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::conv2d;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rnd(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn zero_stride_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = rnd(&[1, 16, 5, 4], &mut rng);
        let p = FemParams::uniform(0);
        assert_eq!(p.kernel_size(), 1);
        assert_eq!(fem_shift_direct(&z, &p).unwrap(), z);
        assert_eq!(fem_shift_conv(&z, &p).unwrap(), z);
    }

    #[test]
    fn shift_conserves_channel_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = rnd(&[2, 8, 6, 5], &mut rng);
        let out = fem_shift_direct(&z, &FemParams::new([1, 2, 3, 1, 2, 3, 1, 2])).unwrap();
        let mut a: Vec<f64> = z.data().to_vec();
        let mut b: Vec<f64> = out.data().to_vec();
        for (pa, pb) in a.chunks_mut(30).zip(b.chunks_mut(30)) {
            pa.sort_by(f64::total_cmp);
            pb.sort_by(f64::total_cmp);
            assert_eq!(pa, pb);
        }
    }

    #[test]
    fn right_shift_by_index_arithmetic() {
        let z = Tensor::from_fn(vec![1, 8, 4, 4], |i| i as f64);
        let out = fem_shift_direct(&z, &FemParams::uniform(1)).unwrap();
        // group 7 is "right": row [a, b, c, d] becomes [d, a, b, c]
        for y in 0..4 {
            let row: Vec<f64> = (0..4).map(|x| out.at4(0, 7, y, x)).collect();
            let src: Vec<f64> = (0..4).map(|x| z.at4(0, 7, y, x)).collect();
            assert_eq!(row, vec![src[3], src[0], src[1], src[2]]);
        }
        // group 0 is "up": row y takes row y + 1
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(out.at4(0, 0, y, x), z.at4(0, 0, (y + 1) % 4, x));
            }
        }
    }

    #[test]
    fn mid_left_kernel_shifts_right() {
        // the 3x3 kernel with a single 1 at row 1, column 0
        let p = FemParams::<f64>::uniform(1);
        let k = &p.kernels.data()[7 * 9..8 * 9];
        assert_eq!(k, &[0., 0., 0., 1., 0., 0., 0., 0., 0.]);
        let z = Tensor::from_fn(vec![1, 1, 3, 4], |i| i as f64);
        let kern = Tensor::new(vec![1, 1, 3, 3], k.to_vec()).unwrap();
        let y = conv2d(&z, &kern, None, PadMode::Circular).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                assert_eq!(y.at4(0, 0, r, c), z.at4(0, 0, r, (c + 3) % 4));
            }
        }
    }

    #[test]
    fn conv_realisation_matches_roll() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..50 {
            let strides: [usize; 8] = std::array::from_fn(|_| rng.gen_range(0..4));
            let p = FemParams::new(strides);
            let z = rnd(&[1, 8 * (1 + trial % 2), 5 + trial % 3, 6], &mut rng);
            let a = fem_shift_direct(&z, &p).unwrap();
            let b = fem_shift_conv(&z, &p).unwrap();
            assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn fem_rejects_bad_channels() {
        let z = Tensor::<f64>::zeros(vec![1, 12, 4, 4]);
        assert!(fem_shift_direct(&z, &FemParams::uniform(1)).is_err());
        assert!(fem_shift_conv(&z, &FemParams::uniform(1)).is_err());
    }

    #[test]
    fn msc_single_branch_is_plain_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = MscParams::init(4, 1, &mut rng).unwrap();
        let z = rnd(&[1, 4, 5, 5], &mut rng);
        let out = msc_apply(&z, &p).unwrap();
        assert_eq!(out.len(), 1);
        let b = &p.branches[0];
        let direct = conv2d(&z, &b.weight, b.bias_slice(), PadMode::Zero).unwrap();
        assert_eq!(out[0], direct);
    }

    #[test]
    fn msc_impulse_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = MscParams::<f64>::init(12, 3, &mut rng).unwrap();
        let (h, w) = (11, 11);
        let mut z = Tensor::zeros(vec![1, 12, h, w]);
        for c in 0..12 {
            z.data_mut()[(c * h + 5) * w + 5] = 1.0;
        }
        let out = msc_apply(&z, &p).unwrap();
        for (i, o) in out.iter().enumerate() {
            let rad = i + 1;
            let bias = p.branches[i].bias.as_ref().unwrap().data().to_vec();
            for c in 0..4 {
                for y in 0..h {
                    for x in 0..w {
                        let inside = y.abs_diff(5) <= rad && x.abs_diff(5) <= rad;
                        if !inside {
                            assert_eq!(o.at4(0, c, y, x), bias[c]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn msc_matches_manual_split() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = MscParams::init(4, 2, &mut rng).unwrap();
        let z = rnd(&[1, 4, 6, 5], &mut rng);
        let out = msc_apply(&z, &p).unwrap();
        for i in 0..2 {
            let half = tensor::narrow_axis(&z, 1, 2 * i, 2).unwrap();
            let b = &p.branches[i];
            let expect = conv2d(&half, &b.weight, b.bias_slice(), PadMode::Zero).unwrap();
            assert!(out[i].max_abs_diff(&expect).unwrap() < 1e-12);
        }
        assert!(msc_apply(&rnd(&[1, 5, 3, 3], &mut rng), &p).is_err());
    }

    #[test]
    fn sim_zero_input_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = SimParams::<f64>::init(8, 2, &mut rng).unwrap();
        let groups = vec![Tensor::zeros(vec![1, 4, 3, 3]); 2];
        let out = sim_merge(&groups, &p).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sim_all_ones_modulation_is_unmodulated_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut p = SimParams::init(8, 2, &mut rng).unwrap();
        p.modulation.weight = Tensor::zeros(vec![8, 8, 1, 1]);
        p.modulation.bias = Some(Tensor::full(vec![8], 1.0));
        let groups: Vec<_> = (0..2).map(|_| rnd(&[1, 4, 3, 4], &mut rng)).collect();
        let out = sim_merge(&groups, &p).unwrap();
        let mixed: Vec<Tensor<f64>> = groups
            .iter()
            .zip(&p.per_scale)
            .map(|(g, s)| tensor::gelu(&conv2d(g, &s.weight, s.bias_slice(), PadMode::Zero).unwrap()))
            .collect();
        let cat = concat_groups(&mixed).unwrap();
        let ds = &p.cross_scale;
        let expect = conv2d(&cat, &ds.weight, ds.bias_slice(), PadMode::Zero).unwrap();
        assert_eq!(out, expect);
    }

    #[test]
    fn sim_identity_hook_is_bilinear_in_scale() {
        // with σ = identity and zero biases, scaling the input by a scales
        // the mixed path by a and the modulation by a
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = SimParams::init(8, 4, &mut rng).unwrap();
        let groups: Vec<_> = (0..4).map(|_| rnd(&[1, 2, 3, 3], &mut rng)).collect();
        let doubled: Vec<_> = groups.iter().map(|g| g.scale(2.0)).collect();
        let a = sim_merge_with(&groups, &p, SimActivation::Identity).unwrap();
        let b = sim_merge_with(&doubled, &p, SimActivation::Identity).unwrap();
        assert!(b.max_abs_diff(&a.scale(4.0)).unwrap() < 1e-12);
    }

    #[test]
    fn sim_rejects_group_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = SimParams::<f64>::init(8, 2, &mut rng).unwrap();
        assert!(sim_merge(&[Tensor::zeros(vec![1, 4, 3, 3])], &p).is_err());
    }

    #[test]
    fn msno_shapes_and_toggles() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for c in [8, 16] {
            let params = MsnoParams {
                fem: Some(FemParams::uniform(1)),
                msc: MscParams::init(c, 4, &mut rng).unwrap(),
                sim: Some(SimParams::init(c, 4, &mut rng).unwrap()),
            };
            let z = rnd(&[1, c, 5, 6], &mut rng);
            let out = msno_forward(&z, &params).unwrap();
            assert_eq!(out.shape(), &[1, c, 5, 6]);
            let stage = sim_merge(
                &msc_apply(&fem_shift_conv(&z, params.fem.as_ref().unwrap()).unwrap(), &params.msc)
                    .unwrap(),
                params.sim.as_ref().unwrap(),
            )
            .unwrap();
            assert_eq!(out, stage);

            let mut off = params.clone();
            off.fem = None;
            let with_identity = MsnoParams {
                fem: Some(FemParams::uniform(0)),
                ..params.clone()
            };
            assert_eq!(
                msno_forward(&z, &off).unwrap(),
                msno_forward(&z, &with_identity).unwrap()
            );
            assert_eq!(msno_forward(&z, &params).unwrap(), out);
        }
    }
}
