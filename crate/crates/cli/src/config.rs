//! Flat `key = value` training configuration files.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use sspcm_core::{MaskSteps, Method, TrainConfig};

pub const KEYS: &[&str] = &[
    "method",
    "beta",
    "tau",
    "sigma",
    "easy_rotation",
    "easy_scale_min",
    "easy_scale_max",
    "hard_rotation",
    "hard_scale_min",
    "hard_scale_max",
    "ssco_patches",
    "ssco_side_min",
    "ssco_side_max",
    "epochs",
    "batch_size",
    "base_lr",
    "lr_decay_epochs",
    "lr_decay_factor",
    "seed",
    "teacher_width",
    "mask_steps",
    "val_fraction",
    "snapshot_interval",
    "pck_alpha",
];

fn num<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow!("invalid value {value:?} for {key}: {e}"))
}

fn set(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "method" => cfg.method = value.parse::<Method>()?,
        "beta" => cfg.beta = num(key, value)?,
        "tau" => cfg.tau = num(key, value)?,
        "sigma" => cfg.sigma = num(key, value)?,
        "easy_rotation" => cfg.easy_aug.max_rotation = num(key, value)?,
        "easy_scale_min" => cfg.easy_aug.scale.0 = num(key, value)?,
        "easy_scale_max" => cfg.easy_aug.scale.1 = num(key, value)?,
        "hard_rotation" => cfg.hard_aug.max_rotation = num(key, value)?,
        "hard_scale_min" => cfg.hard_aug.scale.0 = num(key, value)?,
        "hard_scale_max" => cfg.hard_aug.scale.1 = num(key, value)?,
        "ssco_patches" => cfg.ssco.n_patches = num(key, value)?,
        "ssco_side_min" => cfg.ssco.side_range.0 = num(key, value)?,
        "ssco_side_max" => cfg.ssco.side_range.1 = num(key, value)?,
        "epochs" => cfg.epochs = num(key, value)?,
        "batch_size" => cfg.batch_size = num(key, value)?,
        "base_lr" => cfg.lr.base_lr = num(key, value)?,
        "lr_decay_epochs" => {
            cfg.lr.decay_epochs = value
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| num(key, s))
                .collect::<Result<_>>()?
        }
        "lr_decay_factor" => cfg.lr.factor = num(key, value)?,
        "seed" => cfg.seed = num(key, value)?,
        "teacher_width" => cfg.teacher_width = num(key, value)?,
        "mask_steps" => cfg.mask_steps = value.parse::<MaskSteps>()?,
        "val_fraction" => cfg.val_fraction = num(key, value)?,
        "snapshot_interval" => cfg.snapshot_interval = num(key, value)?,
        "pck_alpha" => cfg.pck_alpha = num(key, value)?,
        _ => bail!("unknown config key {key:?}"),
    }
    Ok(())
}

/// Parses a config file on top of the defaults. Unknown or repeated keys
/// are errors; the result is validated.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected `key = value`", i + 1))?;
        let (key, value) = (key.trim(), value.trim());
        if !seen.insert(key.to_string()) && KEYS.contains(&key) {
            bail!("line {}: {key} given twice", i + 1);
        }
        set(&mut cfg, key, value).with_context(|| format!("line {}", i + 1))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Writes every key, so the output alone reproduces `cfg`.
pub fn render_config(cfg: &TrainConfig) -> String {
    let decay: Vec<String> = cfg.lr.decay_epochs.iter().map(|e| e.to_string()).collect();
    let values: [String; 24] = [
        cfg.method.to_string(),
        cfg.beta.to_string(),
        cfg.tau.to_string(),
        cfg.sigma.to_string(),
        cfg.easy_aug.max_rotation.to_string(),
        cfg.easy_aug.scale.0.to_string(),
        cfg.easy_aug.scale.1.to_string(),
        cfg.hard_aug.max_rotation.to_string(),
        cfg.hard_aug.scale.0.to_string(),
        cfg.hard_aug.scale.1.to_string(),
        cfg.ssco.n_patches.to_string(),
        cfg.ssco.side_range.0.to_string(),
        cfg.ssco.side_range.1.to_string(),
        cfg.epochs.to_string(),
        cfg.batch_size.to_string(),
        cfg.lr.base_lr.to_string(),
        decay.join(","),
        cfg.lr.factor.to_string(),
        cfg.seed.to_string(),
        cfg.teacher_width.to_string(),
        cfg.mask_steps.to_string(),
        cfg.val_fraction.to_string(),
        cfg.snapshot_interval.to_string(),
        cfg.pck_alpha.to_string(),
    ];
    let mut out = String::from("# resolved training configuration\n");
    for (k, v) in KEYS.iter().zip(values) {
        let _ = writeln!(out, "{k} = {v}");
    }
    out
}
