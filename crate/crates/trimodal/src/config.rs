//! Key-value run configuration: a flat `key = value` file plus command-line
//! overrides, lowered into the typed configs the library consumes.
//!
//! Lines are `key = value`; blank lines and `#` comments are ignored. Every
//! key must be consumed by the command reading the file, so typos surface
//! as errors instead of silently keeping defaults.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::datagen::{GenConfig, ProfileMix};
use crate::error::{Error, Result};
use crate::fusion::FusionDirection;
use crate::loss::LossConfig;
use crate::model::ModelConfig;
use crate::train::{LossMode, TrainConfig};

#[derive(Debug, Clone, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
    used: BTreeSet<String>,
}

impl Settings {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut s = Settings::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "{}:{}: expected `key = value`, got {line:?}",
                    path.display(),
                    lineno + 1
                )));
            };
            s.insert(key.trim(), value.trim())?;
        }
        Ok(s)
    }

    fn insert(&mut self, key: &str, value: &str) -> Result<()> {
        if key.is_empty() {
            return Err(Error::Config("empty config key".into()));
        }
        if self.values.insert(key.to_string(), value.to_string()).is_some() {
            return Err(Error::Config(format!("duplicate config key {key}")));
        }
        Ok(())
    }

    /// Applies one `key=value` override, replacing any file value.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let Some((key, value)) = spec.split_once('=') else {
            return Err(Error::Config(format!("override must be key=value, got {spec:?}")));
        };
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::Config("empty config key".into()));
        }
        self.values.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    fn raw(&mut self, key: &str) -> Option<String> {
        self.used.insert(key.to_string());
        self.values.get(key).cloned()
    }

    pub fn get_str(&mut self, key: &str, default: &str) -> String {
        self.raw(key).unwrap_or_else(|| default.to_string())
    }

    fn parsed<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| {
                Error::Config(format!(
                    "config key {key}: cannot parse {v:?} as {}",
                    std::any::type_name::<T>()
                ))
            }),
        }
    }

    pub fn get_usize(&mut self, key: &str, default: usize) -> Result<usize> {
        self.parsed(key, default)
    }

    pub fn get_u64(&mut self, key: &str, default: u64) -> Result<u64> {
        self.parsed(key, default)
    }

    pub fn get_f64(&mut self, key: &str, default: f64) -> Result<f64> {
        self.parsed(key, default)
    }

    pub fn get_bool(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.raw(key).as_deref() {
            None => Ok(default),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(v) => Err(Error::Config(format!(
                "config key {key}: expected true or false, got {v:?}"
            ))),
        }
    }

    /// `usize` value, or `None` when absent.
    pub fn get_opt_usize(&mut self, key: &str) -> Result<Option<usize>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("config key {key}: cannot parse {v:?}"))),
        }
    }

    /// `f64` value, `"off"` for `None`, or the default when absent.
    pub fn get_clip(&mut self, key: &str, default: Option<f64>) -> Result<Option<f64>> {
        match self.raw(key).as_deref() {
            None => Ok(default),
            Some("off") => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("config key {key}: cannot parse {v:?}"))),
        }
    }

    /// Fails if any key was never read: typo protection.
    pub fn finish(self) -> Result<()> {
        let unused: Vec<&String> =
            self.values.keys().filter(|k| !self.used.contains(*k)).collect();
        if unused.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "unknown config keys: {}",
                unused.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
            )))
        }
    }
}

pub fn model_config(s: &mut Settings) -> Result<ModelConfig> {
    let d = ModelConfig::default();
    Ok(ModelConfig {
        d_model: s.get_usize("model.d_model", d.d_model)?,
        n_layers: s.get_usize("model.n_layers", d.n_layers)?,
        n_heads: s.get_usize("model.n_heads", d.n_heads)?,
        d_ff: s.get_usize("model.d_ff", d.d_ff)?,
        fusion_layers: s.get_usize("model.fusion_layers", d.fusion_layers)?,
        d_embed: s.get_usize("model.d_embed", d.d_embed)?,
        d_img: s.get_usize("model.d_img", d.d_img)?,
        max_query_len: s.get_usize("model.max_query_len", d.max_query_len)?,
        max_title_len: s.get_usize("model.max_title_len", d.max_title_len)?,
        max_patches: s.get_usize("model.max_patches", d.max_patches)?,
        fusion_direction: FusionDirection::parse(
            &s.get_str("model.fusion_direction", "query-reads-fused"),
        )?,
    })
}

pub fn loss_config(s: &mut Settings) -> Result<LossConfig> {
    let d = LossConfig::default();
    let mut w = d.weights;
    w.mlm_query = s.get_f64("loss.w_mlm_query", w.mlm_query)?;
    w.mlm_title = s.get_f64("loss.w_mlm_title", w.mlm_title)?;
    w.mpm = s.get_f64("loss.w_mpm", w.mpm)?;
    w.qpc = s.get_f64("loss.w_qpc", w.qpc)?;
    w.ke_qpm = s.get_f64("loss.w_ke_qpm", w.ke_qpm)?;
    Ok(LossConfig {
        tau: s.get_f64("loss.tau", d.tau)?,
        gamma: s.get_f64("loss.gamma", d.gamma)?,
        theta: s.get_f64("loss.theta", d.theta)?,
        m: s.get_usize("loss.m", d.m)?,
        weights: w,
        ke_literal_form: s.get_bool("loss.ke_literal_form", d.ke_literal_form)?,
    })
}

pub fn train_config(s: &mut Settings) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    Ok(TrainConfig {
        model: model_config(s)?,
        loss: loss_config(s)?,
        loss_mode: LossMode::parse(&s.get_str("train.loss_mode", "make"))?,
        batch_size: s.get_usize("train.batch_size", d.batch_size)?,
        epochs: s.get_usize("train.epochs", d.epochs)?,
        total_steps: s.get_opt_usize("train.total_steps")?,
        peak_lr: s.get_f64("train.peak_lr", d.peak_lr)?,
        warmup_iters: s.get_usize("train.warmup_iters", d.warmup_iters)?,
        beta1: s.get_f64("train.beta1", d.beta1)?,
        beta2: s.get_f64("train.beta2", d.beta2)?,
        eps: s.get_f64("train.eps", d.eps)?,
        grad_clip: s.get_clip("train.grad_clip", d.grad_clip)?,
        mlm_rate: s.get_f64("train.mlm_rate", d.mlm_rate)?,
        mpm_rate: s.get_f64("train.mpm_rate", d.mpm_rate)?,
        seed: s.get_u64("train.seed", d.seed)?,
    })
}

pub fn gen_config(s: &mut Settings) -> Result<GenConfig> {
    let d = GenConfig::default();
    Ok(GenConfig {
        n_categories: s.get_usize("gen.n_categories", d.n_categories)?,
        products_per_category: s.get_usize("gen.products_per_category", d.products_per_category)?,
        queries_per_product: s.get_usize("gen.queries_per_product", d.queries_per_product)?,
        signature_tokens: s.get_usize("gen.signature_tokens", d.signature_tokens)?,
        noise_tokens: s.get_usize("gen.noise_tokens", d.noise_tokens)?,
        n_patches: s.get_usize("gen.n_patches", d.n_patches)?,
        d_img: s.get_usize("gen.d_img", d.d_img)?,
        profile_mix: ProfileMix::parse(&s.get_str("gen.profile_mix", "cycle"))?,
        skew: s.get_f64("gen.skew", d.skew)?,
        title_len: s.get_usize("gen.title_len", d.title_len)?,
        seed: s.get_u64("gen.seed", d.seed)?,
    })
}
