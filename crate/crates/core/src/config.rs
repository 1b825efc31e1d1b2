//! Flat `key=value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must be
//! known; unknown or repeated keys are errors naming the key.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::pipeline::ModelConfig;
use crate::trainer::TrainConfig;

pub const MODEL_KEYS: &[&str] = &[
    "channels",
    "encoder_blocks",
    "msc_branches",
    "proj_branches",
    "heads",
    "fourier_freqs",
    "neighborhood",
    "attn_scale",
    "decoder_hidden",
    "decoder_depth",
    "include_cell",
    "use_fem",
    "use_sim",
    "fem_stride",
    "rim_variant",
    "rim_train_non_wrapped",
];

pub const TRAIN_KEYS: &[&str] = &[
    "scale_min",
    "scale_max",
    "patch_lr",
    "steps",
    "warmup_steps",
    "lr",
    "lr_floor",
    "batch",
    "seed",
    "stage",
    "resample",
];

/// Model and training settings read from one file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: Display,
{
    value.parse().map_err(|e: V::Err| Error::Config {
        key: key.to_string(),
        msg: format!("cannot parse `{value}`: {e}"),
    })
}

/// Sets one model key; `Ok(false)` if the key is not a model key.
pub fn set_model_key(cfg: &mut ModelConfig, key: &str, value: &str) -> Result<bool> {
    match key {
        "channels" => cfg.channels = parse(key, value)?,
        "encoder_blocks" => cfg.encoder_blocks = parse(key, value)?,
        "msc_branches" => cfg.msc_branches = parse(key, value)?,
        "proj_branches" => cfg.proj_branches = parse(key, value)?,
        "heads" => cfg.heads = parse(key, value)?,
        "fourier_freqs" => cfg.fourier_freqs = parse(key, value)?,
        "neighborhood" => cfg.neighborhood = parse(key, value)?,
        "attn_scale" => {
            cfg.attn_scale = match value {
                "auto" => None,
                v => Some(parse(key, v)?),
            }
        }
        "decoder_hidden" => cfg.decoder_hidden = parse(key, value)?,
        "decoder_depth" => cfg.decoder_depth = parse(key, value)?,
        "include_cell" => cfg.include_cell = parse(key, value)?,
        "use_fem" => cfg.use_fem = parse(key, value)?,
        "use_sim" => cfg.use_sim = parse(key, value)?,
        "fem_stride" => cfg.fem_stride = parse(key, value)?,
        "rim_variant" => cfg.rim_variant = parse(key, value)?,
        "rim_train_non_wrapped" => cfg.rim_train_non_wrapped = parse(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Sets one training key; `Ok(false)` if the key is not a training key.
pub fn set_train_key(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<bool> {
    match key {
        "scale_min" => cfg.scale_min = parse(key, value)?,
        "scale_max" => cfg.scale_max = parse(key, value)?,
        "patch_lr" => cfg.patch_lr = parse(key, value)?,
        "steps" => cfg.steps = parse(key, value)?,
        "warmup_steps" => cfg.warmup_steps = parse(key, value)?,
        "lr" => cfg.lr = parse(key, value)?,
        "lr_floor" => cfg.lr_floor = parse(key, value)?,
        "batch" => cfg.batch = parse(key, value)?,
        "seed" => cfg.seed = parse(key, value)?,
        "stage" => cfg.stage = parse(key, value)?,
        "resample" => cfg.resample = parse(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// `(key, value)` pairs of every model key, in [`MODEL_KEYS`] order.
pub fn model_entries(cfg: &ModelConfig) -> Vec<(&'static str, String)> {
    vec![
        ("channels", cfg.channels.to_string()),
        ("encoder_blocks", cfg.encoder_blocks.to_string()),
        ("msc_branches", cfg.msc_branches.to_string()),
        ("proj_branches", cfg.proj_branches.to_string()),
        ("heads", cfg.heads.to_string()),
        ("fourier_freqs", cfg.fourier_freqs.to_string()),
        ("neighborhood", cfg.neighborhood.to_string()),
        (
            "attn_scale",
            cfg.attn_scale.map_or_else(|| "auto".to_string(), |m| format!("{m:?}")),
        ),
        ("decoder_hidden", cfg.decoder_hidden.to_string()),
        ("decoder_depth", cfg.decoder_depth.to_string()),
        ("include_cell", cfg.include_cell.to_string()),
        ("use_fem", cfg.use_fem.to_string()),
        ("use_sim", cfg.use_sim.to_string()),
        ("fem_stride", cfg.fem_stride.to_string()),
        ("rim_variant", cfg.rim_variant.to_string()),
        ("rim_train_non_wrapped", cfg.rim_train_non_wrapped.to_string()),
    ]
}

/// Splits the text into `(line number, key, value)` triples.
pub fn parse_pairs(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out: Vec<(usize, String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config {
                key: line.to_string(),
                msg: format!("line {} is not key=value", i + 1),
            });
        };
        let (k, v) = (k.trim(), v.trim());
        if out.iter().any(|(_, seen, _)| seen == k) {
            return Err(Error::Config {
                key: k.to_string(),
                msg: "repeated key".to_string(),
            });
        }
        out.push((i + 1, k.to_string(), v.to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (_, k, v) in parse_pairs(text)? {
            if !set_model_key(&mut cfg.model, &k, &v)? && !set_train_key(&mut cfg.train, &k, &v)? {
                return Err(Error::Config {
                    key: k,
                    msg: "unknown key".to_string(),
                });
            }
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let t = &self.train;
        let mut s = String::new();
        for (k, v) in model_entries(&self.model) {
            s.push_str(&format!("{k}={v}\n"));
        }
        let train = [
            ("scale_min", format!("{:?}", t.scale_min)),
            ("scale_max", format!("{:?}", t.scale_max)),
            ("patch_lr", t.patch_lr.to_string()),
            ("steps", t.steps.to_string()),
            ("warmup_steps", t.warmup_steps.to_string()),
            ("lr", format!("{:?}", t.lr)),
            ("lr_floor", format!("{:?}", t.lr_floor)),
            ("batch", t.batch.to_string()),
            ("seed", t.seed.to_string()),
            ("stage", t.stage.to_string()),
            ("resample", t.resample.to_string()),
        ];
        for (k, v) in train {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reparam::{RimVariant, StageTag};

    #[test]
    fn round_trip() {
        let mut cfg = RunConfig::default();
        cfg.model.attn_scale = Some(1.5);
        cfg.model.rim_variant = RimVariant::Ref;
        cfg.train.stage = StageTag::Stage2Rim;
        cfg.train.lr = 3e-4;
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        let keys: Vec<_> = model_entries(&cfg.model).into_iter().map(|e| e.0).collect();
        assert_eq!(keys, MODEL_KEYS);
    }

    #[test]
    fn comments_and_defaults() {
        let cfg = RunConfig::parse("# micro\n\nchannels = 8\nheads=2\n").unwrap();
        assert_eq!(cfg.model.channels, 8);
        assert_eq!(cfg.model.msc_branches, 4);
        assert_eq!(cfg.train, TrainConfig::default());
    }

    fn key_of(text: &str) -> String {
        match RunConfig::parse(text) {
            Err(Error::Config { key, .. }) => key,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn errors_name_the_key() {
        assert_eq!(key_of("chanels=8\n"), "chanels");
        assert_eq!(key_of("steps=ten\n"), "steps");
        assert_eq!(key_of("steps=1\nsteps=2\n"), "steps");
        assert_eq!(key_of("use_fem=maybe\n"), "use_fem");
        assert_eq!(key_of("channels=12\n"), "channels");
        assert_eq!(key_of("no equals sign\n"), "no equals sign");
    }
}
