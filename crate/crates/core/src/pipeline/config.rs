use serde::{Deserialize, Serialize};

use crate::arm::ArmConfig;
use crate::atm::AtmConfig;
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::params::AdamWConfig;
use crate::wps::LambdaSchedule;

/// Which parts of the model take part in scoring.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Refinement pathway, patch selection, graph stages and fusion.
    Full,
    /// Refinement pathway and patch selection; predictions are
    /// `cos(x_vis, t)` with no graph stages.
    ArmOnly,
    /// Frozen features only (`x̃ = x_orig`), no graph stages.
    Frozen,
}

impl Variant {
    pub fn uses_arm(self) -> bool {
        !matches!(self, Variant::Frozen)
    }

    pub fn uses_atm(self) -> bool {
        matches!(self, Variant::Full)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub arm: ArmConfig,
    pub atm: AtmConfig,
    pub variant: Variant,
    /// Temperature; responsibilities and patch weights use `S/τ`.
    pub tau: f64,
    /// Temperature of the prior responsibilities; `None` means `tau`.
    pub tau_prior: Option<f64>,
    pub lambda_schedule: LambdaSchedule,
    pub k_hard: usize,
    pub k_patch: usize,
    pub gamma_wps: f64,
    pub gamma_penalty: f64,
    /// Neighbour count the class graph was built with (recorded for reference).
    pub neighbors: usize,
    pub optimizer: AdamWConfig,
    pub lr_peak: f64,
    pub lr_floor: f64,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub steps: usize,
    /// Write an intermediate checkpoint every this many steps (0: final only).
    pub checkpoint_every: usize,
    /// Seed of the batch order.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            arm: ArmConfig::default(),
            atm: AtmConfig::default(),
            variant: Variant::Full,
            tau: 0.07,
            tau_prior: None,
            lambda_schedule: LambdaSchedule::default(),
            k_hard: 16,
            k_patch: 16,
            gamma_wps: 5.0,
            gamma_penalty: 0.01,
            neighbors: 8,
            optimizer: AdamWConfig::default(),
            lr_peak: 1e-4,
            lr_floor: 1e-5,
            warmup_epochs: 2,
            batch_size: 16,
            steps: 500,
            checkpoint_every: 100,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn logit_scale(&self) -> f64 {
        1.0 / self.tau
    }

    pub fn prior_logit_scale(&self) -> f64 {
        1.0 / self.tau_prior.unwrap_or(self.tau)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let positive = [
            ("tau", self.tau),
            ("tau_prior", self.tau_prior.unwrap_or(self.tau)),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        let non_negative = [
            ("gamma_wps", self.gamma_wps),
            ("gamma_penalty", self.gamma_penalty),
            ("lr_peak", self.lr_peak),
            ("lr_floor", self.lr_floor),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and ≥ 0, got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if self.k_patch == 0 {
            return Err(Error::Config("k_patch must be ≥ 1".into()));
        }
        if self.k_patch > self.backbone.num_patches() {
            return Err(Error::Config(format!(
                "k_patch {} exceeds {} patches",
                self.k_patch,
                self.backbone.num_patches()
            )));
        }
        if let LambdaSchedule::Constant { value } = self.lambda_schedule {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::Range(format!("constant λ must lie in [0, 1], got {value}")));
            }
        }
        Ok(())
    }

    /// Micro instance used by the end-to-end gradient check.
    pub fn micro() -> Self {
        ModelConfig {
            backbone: BackboneConfig {
                depth: 2,
                d: 16,
                d_in: 16,
                grid_h: 3,
                grid_w: 3,
                ..BackboneConfig::default()
            },
            arm: ArmConfig {
                attach_layers: 2,
                rank: 4,
                alpha: 16.0,
                ..ArmConfig::default()
            },
            atm: AtmConfig {
                heads: 2,
                layers: 1,
                ..AtmConfig::default()
            },
            k_hard: 4,
            k_patch: 4,
            batch_size: 2,
            ..ModelConfig::default()
        }
    }
}
