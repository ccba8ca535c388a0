//! Run configuration: every hyperparameter and ablation toggle, read from a
//! `key = value` file with `--set` / `--ablate` overrides, validated with a
//! line-numbered message per violation, and hashed for checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::anchor::{AnchorConfig, IntegrationMode};
use crate::error::{HatError, Result};
use crate::eval::EvalConfig;
use crate::history::HistoryConfig;
use crate::kvfile::{self, join, parse_bool, parse_list, parse_num};
use crate::losses::{LossVariant, LossWeights};
use crate::postproc::PostprocConfig;

pub const SEED_ENV: &str = "HAT_SEED";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub osn_epochs: usize,
    pub osn_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 16,
            epochs: 20,
            seed: 0,
            osn_epochs: 20,
            osn_lr: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub d_model: usize,
    pub feature_dim: usize,
    pub classes: usize,
    pub history: HistoryConfig,
    pub anchor: AnchorConfig,
    pub theta_m: f64,
    pub lambda_b: f64,
    pub focal_scale: f64,
    pub loss_variant: LossVariant,
    pub weights: LossWeights,
    pub postproc: PostprocConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            d_model: 1024,
            feature_dim: 2048,
            classes: 22,
            history: HistoryConfig::default(),
            anchor: AnchorConfig::default(),
            theta_m: 0.5,
            lambda_b: 0.025,
            focal_scale: 0.05,
            loss_variant: LossVariant::Adaptive,
            weights: LossWeights::default(),
            postproc: PostprocConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Where each key's current value came from, for error messages.
#[derive(Clone, Debug, Default)]
pub struct Origins(BTreeMap<String, String>);

impl Origins {
    fn locate(&self, key: &str) -> String {
        self.0.get(key).cloned().unwrap_or_else(|| "default".to_string())
    }
}

fn ablation_key(name: &str) -> Option<&'static str> {
    match name {
        "history" => Some("history.enabled"),
        "anticipation" => Some("history.anticipation"),
        "refinement" => Some("history.refinement"),
        "integration" => Some("anchor.integration"),
        "loss" => Some("loss.variant"),
        _ => None,
    }
}

impl RunConfig {
    /// Small model used by the tests and the synthetic experiments.
    pub fn toy() -> Self {
        RunConfig {
            d_model: 32,
            feature_dim: 32,
            classes: 8,
            history: HistoryConfig {
                enabled: true,
                l_h: 24,
                l_comp: 4,
                n_c: 1,
                n_r: 1,
                heads_c: 2,
                heads_r: 2,
                anticipation: true,
                refinement: true,
            },
            anchor: AnchorConfig {
                l_s: 8,
                sizes: vec![2, 4, 6, 8],
                n_e: 1,
                n_d: 1,
                n_a: 1,
                heads_e: 4,
                heads_d: 2,
                heads_a: 2,
                integration_mode: IntegrationMode::Decoder,
            },
            train: TrainConfig {
                lr: 1e-3,
                batch_size: 8,
                ..TrainConfig::default()
            },
            ..RunConfig::default()
        }
    }

    /// Queue length `L_q = L_h + L_s` (just `L_s` without the history module).
    pub fn l_q(&self) -> usize {
        self.l_h() + self.anchor.l_s
    }

    /// History length actually fed to the model.
    pub fn l_h(&self) -> usize {
        if self.history.enabled {
            self.history.l_h
        } else {
            0
        }
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let h = &self.history;
        let a = &self.anchor;
        let t = &self.train;
        let onoff = |b: bool| if b { "on" } else { "off" }.to_string();
        vec![
            ("model.d", self.d_model.to_string()),
            ("model.feature_dim", self.feature_dim.to_string()),
            ("model.classes", self.classes.to_string()),
            ("window.l_s", a.l_s.to_string()),
            ("history.enabled", onoff(h.enabled)),
            ("history.l_h", h.l_h.to_string()),
            ("history.l_comp", h.l_comp.to_string()),
            ("history.n_c", h.n_c.to_string()),
            ("history.n_r", h.n_r.to_string()),
            ("history.heads_c", h.heads_c.to_string()),
            ("history.heads_r", h.heads_r.to_string()),
            ("history.anticipation", onoff(h.anticipation)),
            ("history.refinement", onoff(h.refinement)),
            ("anchor.sizes", join(&a.sizes)),
            ("anchor.n_e", a.n_e.to_string()),
            ("anchor.n_d", a.n_d.to_string()),
            ("anchor.n_a", a.n_a.to_string()),
            ("anchor.heads_e", a.heads_e.to_string()),
            ("anchor.heads_d", a.heads_d.to_string()),
            ("anchor.heads_a", a.heads_a.to_string()),
            ("anchor.integration", a.integration_mode.to_string()),
            ("assign.theta_m", self.theta_m.to_string()),
            ("loss.variant", self.loss_variant.to_string()),
            ("loss.lambda_b", self.lambda_b.to_string()),
            ("loss.s", self.focal_scale.to_string()),
            ("loss.alpha", self.weights.alpha.to_string()),
            ("loss.beta", self.weights.beta.to_string()),
            ("loss.gamma", self.weights.gamma.to_string()),
            ("postproc.theta_nms", self.postproc.theta_nms.to_string()),
            ("postproc.osn_targets", self.postproc.osn_targets.to_string()),
            ("postproc.theta_s", self.postproc.theta_s.to_string()),
            ("postproc.theta_dup", self.postproc.theta_dup.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.osn_epochs", t.osn_epochs.to_string()),
            ("train.osn_lr", t.osn_lr.to_string()),
            ("eval.tiou_thresholds", join(&self.eval.tiou_thresholds)),
            ("eval.step_seconds", self.eval.step_seconds.to_string()),
        ]
    }

    /// Sets one key from its textual value.
    pub fn apply(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let h = &mut self.history;
        let a = &mut self.anchor;
        let t = &mut self.train;
        match key {
            "model.d" => self.d_model = parse_num(value)?,
            "model.feature_dim" => self.feature_dim = parse_num(value)?,
            "model.classes" => self.classes = parse_num(value)?,
            "window.l_s" => a.l_s = parse_num(value)?,
            "history.enabled" => h.enabled = parse_bool(value)?,
            "history.l_h" => h.l_h = parse_num(value)?,
            "history.l_comp" => h.l_comp = parse_num(value)?,
            "history.n_c" => h.n_c = parse_num(value)?,
            "history.n_r" => h.n_r = parse_num(value)?,
            "history.heads_c" => h.heads_c = parse_num(value)?,
            "history.heads_r" => h.heads_r = parse_num(value)?,
            "history.anticipation" => h.anticipation = parse_bool(value)?,
            "history.refinement" => h.refinement = parse_bool(value)?,
            "anchor.sizes" => a.sizes = parse_list(value)?,
            "anchor.n_e" => a.n_e = parse_num(value)?,
            "anchor.n_d" => a.n_d = parse_num(value)?,
            "anchor.n_a" => a.n_a = parse_num(value)?,
            "anchor.heads_e" => a.heads_e = parse_num(value)?,
            "anchor.heads_d" => a.heads_d = parse_num(value)?,
            "anchor.heads_a" => a.heads_a = parse_num(value)?,
            "anchor.integration" => a.integration_mode = value.parse().map_err(|e: HatError| e.to_string())?,
            "assign.theta_m" => self.theta_m = parse_num(value)?,
            "loss.variant" => self.loss_variant = value.parse().map_err(|e: HatError| e.to_string())?,
            "loss.lambda_b" => self.lambda_b = parse_num(value)?,
            "loss.s" => self.focal_scale = parse_num(value)?,
            "loss.alpha" => self.weights.alpha = parse_num(value)?,
            "loss.beta" => self.weights.beta = parse_num(value)?,
            "loss.gamma" => self.weights.gamma = parse_num(value)?,
            "postproc.theta_nms" => self.postproc.theta_nms = parse_num(value)?,
            "postproc.theta_s" => self.postproc.theta_s = parse_num(value)?,
            "postproc.theta_dup" => self.postproc.theta_dup = parse_num(value)?,
            "postproc.osn_targets" => self.postproc.osn_targets = value.parse()?,
            "train.lr" => t.lr = parse_num(value)?,
            "train.beta1" => t.beta1 = parse_num(value)?,
            "train.beta2" => t.beta2 = parse_num(value)?,
            "train.batch_size" => t.batch_size = parse_num(value)?,
            "train.epochs" => t.epochs = parse_num(value)?,
            "train.seed" => t.seed = parse_num(value)?,
            "train.osn_epochs" => t.osn_epochs = parse_num(value)?,
            "train.osn_lr" => t.osn_lr = parse_num(value)?,
            "eval.tiou_thresholds" => self.eval.tiou_thresholds = parse_list(value)?,
            "eval.step_seconds" => self.eval.step_seconds = parse_num(value)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn violations(&self) -> Vec<(&'static str, String)> {
        let mut v = Vec::new();
        for (key, n) in [
            ("model.d", self.d_model),
            ("model.feature_dim", self.feature_dim),
            ("model.classes", self.classes),
            ("train.batch_size", self.train.batch_size),
        ] {
            if n == 0 {
                v.push((key, "must be at least 1".to_string()));
            }
        }
        let mut heads = vec![
            ("anchor.heads_e", self.anchor.heads_e),
            ("anchor.heads_d", self.anchor.heads_d),
        ];
        if self.history.enabled {
            heads.push(("history.heads_c", self.history.heads_c));
            heads.push(("history.heads_r", self.history.heads_r));
            if self.anchor.integration_mode == IntegrationMode::Decoder {
                heads.push(("anchor.heads_a", self.anchor.heads_a));
            }
        }
        for (key, n) in heads {
            if n > 0 && !self.d_model.is_multiple_of(n) {
                v.push((key, format!("model width {} is not divisible by {n} heads", self.d_model)));
            }
        }
        if self.history.enabled && self.history.anticipation && !self.d_model.is_multiple_of(4) {
            v.push(("model.d", "the anticipation head needs a width divisible by 4".to_string()));
        }
        v.extend(self.history.violations());
        v.extend(self.anchor.violations());
        if !(0.0..1.0).contains(&self.theta_m) {
            v.push(("assign.theta_m", format!("must lie in [0, 1), got {}", self.theta_m)));
        }
        if !(self.lambda_b >= 0.0) {
            v.push(("loss.lambda_b", "must be nonnegative".to_string()));
        }
        if !(self.focal_scale >= 0.0) {
            v.push(("loss.s", "must be nonnegative".to_string()));
        }
        v.extend(self.weights.violations());
        v.extend(self.postproc.violations());
        for (key, x) in [("train.lr", self.train.lr), ("train.osn_lr", self.train.osn_lr)] {
            if !(x > 0.0 && x.is_finite()) {
                v.push((key, format!("must be positive, got {x}")));
            }
        }
        for (key, x) in [("train.beta1", self.train.beta1), ("train.beta2", self.train.beta2)] {
            if !(0.0..1.0).contains(&x) {
                v.push((key, format!("must lie in [0, 1), got {x}")));
            }
        }
        v.extend(self.eval.violations());
        v
    }

    fn check(&self, origins: &Origins) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            return Ok(());
        }
        Err(HatError::ConfigViolations(
            v.into_iter()
                .map(|(k, m)| format!("{}: {k}: {m}", origins.locate(k)))
                .collect(),
        ))
    }

    /// Parses a config file over `base`, then applies overrides in order:
    /// `--set key=value`, then `--ablate name=value`.
    pub fn build(
        base: RunConfig,
        text: Option<(&str, &str)>,
        sets: &[String],
        ablations: &[String],
    ) -> Result<(RunConfig, Origins)> {
        let mut cfg = base;
        let mut origins = Origins::default();
        let mut errors = Vec::new();
        if let Some((text, path)) = text {
            for e in kvfile::parse(text, path)? {
                match cfg.apply(&e.key, &e.value) {
                    Ok(()) => {
                        origins.0.insert(e.key.clone(), format!("{path}:{}", e.line));
                    }
                    Err(m) => errors.push(format!("{path}:{}: {m}", e.line)),
                }
            }
        }
        let split = |s: &str| s.split_once('=').map(|(k, v)| (k.trim().to_string(), v.trim().to_string()));
        for s in sets {
            match split(s) {
                Some((k, v)) => match cfg.apply(&k, &v) {
                    Ok(()) => {
                        origins.0.insert(k, format!("--set {s}"));
                    }
                    Err(m) => errors.push(format!("--set {s}: {m}")),
                },
                None => errors.push(format!("--set {s}: expected key=value")),
            }
        }
        for s in ablations {
            let Some((name, v)) = split(s) else {
                errors.push(format!("--ablate {s}: expected name=value"));
                continue;
            };
            let Some(key) = ablation_key(&name) else {
                errors.push(format!(
                    "--ablate {s}: unknown toggle `{name}` (history, anticipation, refinement, integration, loss)"
                ));
                continue;
            };
            match cfg.apply(key, &v) {
                Ok(()) => {
                    origins.0.insert(key.to_string(), format!("--ablate {s}"));
                }
                Err(m) => errors.push(format!("--ablate {s}: {m}")),
            }
        }
        if !errors.is_empty() {
            return Err(HatError::ConfigViolations(errors));
        }
        cfg.check(&origins)?;
        Ok((cfg, origins))
    }

    pub fn parse(text: &str, path: &str) -> Result<RunConfig> {
        Ok(Self::build(RunConfig::default(), Some((text, path)), &[], &[])?.0)
    }

    pub fn load(path: &Path, sets: &[String], ablations: &[String]) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| HatError::io(path, e))?;
        Ok(Self::build(RunConfig::default(), Some((&text, &path.display().to_string())), sets, ablations)?.0)
    }

    /// Replaces the seed with `HAT_SEED` when it is set.
    pub fn apply_env_seed(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.train.seed = v
                .trim()
                .parse()
                .map_err(|_| HatError::Config(format!("{SEED_ENV}={v} is not an unsigned integer")))?;
        }
        Ok(())
    }

    /// Every key in a fixed order, one `key = value` per line.
    pub fn canonical_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        }
        s
    }

    /// Lowercase hex SHA-256 of the canonical text.
    pub fn digest(&self) -> String {
        text_digest(&self.canonical_text())
    }
}

/// Lowercase hex sha256 of a config text.
pub fn text_digest(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}
