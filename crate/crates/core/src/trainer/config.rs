use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{GritError, Result};
use crate::reprojection::ReprojectionPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Grit,
    LoraControl,
}

/// Every knob of a training run. Keys in config files are the field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GritConfig {
    pub task: String,
    pub steps: usize,
    pub seed: u64,
    pub mode: Mode,

    pub batch_size: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub learning_rate: f64,
    pub grad_clip: f64,

    pub kfac_update_freq: usize,
    pub kfac_min_samples: usize,
    pub kfac_damping: f64,
    pub ema_beta: Option<f64>,
    /// Reference batch for `kfac_damping * (ref / batch)^exponent`; off when unset.
    pub damping_ref_batch: Option<usize>,
    pub damping_batch_exponent: f64,
    pub ng_warmup_steps: usize,

    pub reprojection_freq: usize,
    pub reprojection_k: Option<usize>,
    pub enable_rank_adaptation: bool,
    pub rank_adaptation_threshold: f64,
    pub min_lora_rank: usize,
    pub rank_adaptation_start_step: usize,
    pub reprojection_warmup_steps: usize,
    pub use_two_sided: bool,
    pub g_gate_min_samples: usize,
    pub reprojection_blend: f64,
    pub rank_hysteresis: Option<f64>,

    pub lambda_k: f64,
    pub lambda_r: f64,

    pub effective_rank_eta: f64,
    /// Tail-mass threshold; unset means 3x the median |dW| at the first record.
    pub tail_threshold: Option<f64>,
}

pub const REQUIRED_KEYS: [&str; 3] = ["task", "steps", "seed"];

impl Default for GritConfig {
    fn default() -> Self {
        Self {
            task: String::new(),
            steps: 0,
            seed: 0,
            mode: Mode::Grit,
            batch_size: 16,
            lora_rank: 8,
            lora_alpha: 1.0,
            learning_rate: 1e-2,
            grad_clip: 1.0,
            kfac_update_freq: 50,
            kfac_min_samples: 64,
            kfac_damping: 1e-3,
            ema_beta: None,
            damping_ref_batch: None,
            damping_batch_exponent: 1.0,
            ng_warmup_steps: 0,
            reprojection_freq: 50,
            reprojection_k: Some(8),
            enable_rank_adaptation: true,
            rank_adaptation_threshold: 0.99,
            min_lora_rank: 4,
            rank_adaptation_start_step: 0,
            reprojection_warmup_steps: 0,
            use_two_sided: false,
            g_gate_min_samples: 64,
            reprojection_blend: 1.0,
            rank_hysteresis: None,
            lambda_k: 0.0,
            lambda_r: 0.0,
            effective_rank_eta: 0.9,
            tail_threshold: None,
        }
    }
}

impl GritConfig {
    /// Parses a TOML document. Keys are matched case-insensitively.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| GritError::Config(e.message().to_string()))?;
        let mut lowered = toml::Table::new();
        for (k, v) in table {
            let key = k.to_ascii_lowercase();
            if lowered.insert(key.clone(), v).is_some() {
                return Err(GritError::Config(format!("duplicate key `{key}`")));
            }
        }
        for key in REQUIRED_KEYS {
            if !lowered.contains_key(key) {
                return Err(GritError::Config(format!("missing required key `{key}`")));
            }
        }
        let cfg: GritConfig = toml::Value::Table(lowered)
            .try_into()
            .map_err(|e: toml::de::Error| GritError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(GritError::Config(format!("`{field}`: {why}")));
        if self.task.trim().is_empty() {
            return bad("task", "must name a task".into());
        }
        let spec = crate::trainer::tasks::TaskSpec::parse(&self.task)
            .map_err(|e| GritError::Config(format!("`task`: {}", e.to_string().trim_start_matches("config error: "))))?;
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive".into());
        }
        if self.lora_rank == 0 || self.lora_rank > spec.max_rank() {
            return bad(
                "lora_rank",
                format!("must lie in [1, {}] for this task, got {}", spec.max_rank(), self.lora_rank),
            );
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", format!("must be positive, got {}", self.learning_rate));
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip", format!("must be positive, got {}", self.grad_clip));
        }
        if !(self.lora_alpha.is_finite()) {
            return bad("lora_alpha", "must be finite".into());
        }
        if self.kfac_update_freq == 0 {
            return bad("kfac_update_freq", "must be positive".into());
        }
        if self.reprojection_freq == 0 {
            return bad("reprojection_freq", "must be positive".into());
        }
        if !(self.kfac_damping >= 0.0) {
            return bad("kfac_damping", format!("must be non-negative, got {}", self.kfac_damping));
        }
        if let Some(b) = self.ema_beta {
            if !(0.0..1.0).contains(&b) {
                return bad("ema_beta", format!("must lie in [0, 1), got {b}"));
            }
        }
        if self.damping_ref_batch == Some(0) {
            return bad("damping_ref_batch", "must be positive".into());
        }
        if !(self.rank_adaptation_threshold > 0.0 && self.rank_adaptation_threshold <= 1.0) {
            return bad(
                "rank_adaptation_threshold",
                format!("must lie in (0, 1], got {}", self.rank_adaptation_threshold),
            );
        }
        if self.min_lora_rank == 0 || self.min_lora_rank > self.lora_rank {
            return bad(
                "min_lora_rank",
                format!("must lie in [1, lora_rank = {}], got {}", self.lora_rank, self.min_lora_rank),
            );
        }
        if let Some(k) = self.reprojection_k {
            if k == 0 {
                return bad("reprojection_k", "must be positive".into());
            }
        }
        if !(0.0..=1.0).contains(&self.reprojection_blend) {
            return bad("reprojection_blend", format!("must lie in [0, 1], got {}", self.reprojection_blend));
        }
        if let Some(h) = self.rank_hysteresis {
            if !(h >= 0.0) {
                return bad("rank_hysteresis", format!("must be non-negative, got {h}"));
            }
        }
        if !(self.lambda_k >= 0.0) {
            return bad("lambda_k", "must be non-negative".into());
        }
        if !(self.lambda_r >= 0.0) {
            return bad("lambda_r", "must be non-negative".into());
        }
        if !(self.effective_rank_eta > 0.0 && self.effective_rank_eta <= 1.0) {
            return bad("effective_rank_eta", "must lie in (0, 1]".into());
        }
        if let Some(t) = self.tail_threshold {
            if !(t >= 0.0) {
                return bad("tail_threshold", "must be non-negative".into());
            }
        }
        Ok(())
    }

    /// Stable digest of the resolved configuration.
    pub fn config_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn reprojection_policy(&self) -> ReprojectionPolicy {
        ReprojectionPolicy {
            tau: self.rank_adaptation_threshold,
            min_rank: self.min_lora_rank,
            reproj_freq: self.reprojection_freq,
            warmup_steps: self.reprojection_warmup_steps,
            two_sided: self.use_two_sided,
            blend_gamma: self.reprojection_blend,
            g_gate_min_samples: self.g_gate_min_samples,
            min_samples: self.kfac_min_samples,
            rank_adaptation: self.enable_rank_adaptation,
            rank_adaptation_start_step: self.rank_adaptation_start_step,
            fixed_k: self.reprojection_k,
            hysteresis: self.rank_hysteresis,
        }
    }

    /// LoRA scaling `alpha / r`.
    pub fn scaling(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }

    /// Damping after the optional batch-size adjustment.
    pub fn effective_damping(&self) -> f64 {
        match self.damping_ref_batch {
            Some(b_ref) => crate::kfac::batch_aware_damping(
                self.kfac_damping,
                self.batch_size as f64,
                b_ref as f64,
                self.damping_batch_exponent,
            ),
            None => self.kfac_damping,
        }
    }
}
