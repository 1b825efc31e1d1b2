mod common;

use common::{rng, uniform};
use msit::pipeline::assr_forward;
use msit::reparam::{
    count_records, fold_for_inference, param_count, rim_accounting, wrap_model_with_rim,
};
use msit::{ModelConfig, RimVariant, SrModel, StageTag};
use rand::Rng;

fn perturbed_stage2(cfg: &ModelConfig, seed: u64) -> SrModel<f64> {
    let mut w = wrap_model_with_rim(&SrModel::init(cfg, seed).unwrap()).unwrap();
    let mut r = rng(seed);
    for b in w.rim.values_mut() {
        b.dw.data_mut().iter_mut().for_each(|v| *v += r.gen_range(-0.1..0.1));
        if let Some(l) = b.linear.as_mut() {
            l.weight.data_mut().iter_mut().for_each(|v| *v = r.gen_range(-0.1..0.1));
            l.bias.data_mut().iter_mut().for_each(|v| *v = r.gen_range(-0.1..0.1));
        }
    }
    w
}

#[test]
fn fold_matches_stage_two_on_twenty_inputs() {
    for variant in [RimVariant::Rim, RimVariant::Ref] {
        let cfg = ModelConfig {
            rim_variant: variant,
            ..ModelConfig::micro()
        };
        let w = perturbed_stage2(&cfg, 11);
        let f = fold_for_inference(&w).unwrap();
        assert!(f.rim.is_empty());
        let mut r = rng(12);
        for i in 0..20 {
            let (h, wd) = (8 + i % 3, 8 + i % 4);
            let img = uniform(&[1, 3, h, wd], 0.0, 1.0, &mut r);
            let s = 1.0 + 0.15 * i as f64;
            let a = assr_forward(&w, &img, s, s).unwrap();
            let b = assr_forward(&f, &img, s, s).unwrap();
            assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
        }
    }
}

#[test]
fn zero_branch_fold_is_bitwise_stage_one() {
    let m = SrModel::<f64>::init(&ModelConfig::micro(), 13).unwrap();
    let w = wrap_model_with_rim(&m).unwrap();
    let img = uniform(&[1, 3, 9, 8], 0.0, 1.0, &mut rng(14));
    assert_eq!(
        assr_forward(&w, &img, 2.0, 2.0).unwrap(),
        assr_forward(&m, &img, 2.0, 2.0).unwrap()
    );
    assert_eq!(fold_for_inference(&w).unwrap().to_store(), m.to_store());
}

#[test]
fn wrap_and_fold_need_the_right_stage() {
    let m = SrModel::<f64>::init(&ModelConfig::micro(), 15).unwrap();
    let w = wrap_model_with_rim(&m).unwrap();
    assert!(wrap_model_with_rim(&w).is_err());
    assert!(fold_for_inference(&m).is_err());
    let f = fold_for_inference(&w).unwrap();
    assert_eq!(f.stage, StageTag::Folded);
    assert!(wrap_model_with_rim(&f).is_err());
}

#[test]
fn toy_conv_count_and_breakdown() {
    let rep = count_records([("conv.weight", 2 * 4 * 9), ("conv.bias", 4)]);
    assert_eq!(rep.total, 76);
    let m = SrModel::<f64>::init(&ModelConfig::default(), 0).unwrap();
    for only in [false, true] {
        let rep = param_count(&m, only);
        assert_eq!(rep.modules.iter().map(|(_, n)| n).sum::<usize>(), rep.total);
    }
}

#[test]
fn per_kernel_accounting() {
    let m = SrModel::<f64>::init(&ModelConfig::default(), 0).unwrap();
    let w = wrap_model_with_rim(&m).unwrap();
    let mut kernel_total = 0;
    let mut branch_total = 0;
    for (name, shape) in m.eligible_kernels() {
        let (co, ci, k) = (shape[0], shape[1], shape[2]);
        let (conv, rim) = rim_accounting(ci, co, k);
        assert_eq!(w.rim[&name].num_params(), rim, "{name}");
        kernel_total += conv;
        branch_total += rim;
    }
    let s1 = param_count(&m, true).total;
    let s2 = param_count(&w, true).total;
    assert_eq!(s1 - s2, kernel_total - branch_total);
    assert!(s2 < s1);
    let ref_cfg = ModelConfig {
        rim_variant: RimVariant::Ref,
        ..ModelConfig::default()
    };
    let r = wrap_model_with_rim(&SrModel::<f64>::init(&ref_cfg, 0).unwrap()).unwrap();
    assert!(param_count(&r, true).total < s2);
}

fn total(cfg: &ModelConfig) -> usize {
    param_count(&SrModel::<f64>::init(cfg, 0).unwrap(), false).total
}

#[test]
fn ablation_deltas_follow_closed_forms() {
    let base = ModelConfig::default();
    let c = base.channels;
    let t = base.msc_branches;
    let n = base.fem_stride;
    let full = total(&base);

    let no_fem = ModelConfig { use_fem: false, ..base.clone() };
    assert_eq!(full - total(&no_fem), 8 * (2 * n + 1).pow(2));

    let no_sim = ModelConfig { use_sim: false, ..base.clone() };
    let g = c / t;
    assert_eq!(full - total(&no_sim), t * (g * g + g) + 2 * (c * c + c));

    let proj = |n: usize| -> usize {
        let branches: usize = (0..n).map(|i| c * c * (2 * i + 1).pow(2) + c).sum();
        2 * (branches + n * c * c + c)
    };
    let at_proj = |n: usize| total(&ModelConfig { proj_branches: n, ..base.clone() });
    for (a, b) in [(1, 2), (2, 4), (1, 4)] {
        assert_eq!(at_proj(b) - at_proj(a), proj(b) - proj(a));
    }

    let msc = |t: usize| -> usize {
        let g = c / t;
        let conv: usize = (1..=t).map(|i| g * g * (2 * i + 1).pow(2) + g).sum();
        conv + t * (g * g + g)
    };
    let at_t = |t: usize| total(&ModelConfig { msc_branches: t, ..base.clone() }) as i64;
    for (a, b) in [(1, 2), (2, 4), (1, 4)] {
        assert_eq!(at_t(b) - at_t(a), msc(b) as i64 - msc(a) as i64);
    }
}
