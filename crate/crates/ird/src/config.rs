use std::path::Path;

use ird_core::optimize::FitConfig;
use ird_core::synth::SceneSpec;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::formats::read_json;

/// One JSON document configuring every command. Missing keys take their
/// defaults; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Scene drawn by `synth`, and by `fit`/`gradcheck` when no data
    /// directory is given.
    pub scene: SceneSpec,
    pub fit: FitConfig,
    /// Step count; `None` runs the whole schedule.
    pub steps: Option<usize>,
    pub synth: SynthOptions,
    pub eval: EvalOptions,
    pub gradcheck: GradcheckOptions,
    /// Trace rows between progress lines of `fit`; `0` silences them.
    pub log_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            fit: FitConfig::default(),
            steps: None,
            synth: SynthOptions::default(),
            eval: EvalOptions::default(),
            gradcheck: GradcheckOptions::default(),
            log_every: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthOptions {
    pub count: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self { count: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    /// Ground truth beyond the cap is excluded and predictions are clamped.
    pub cap: Option<f64>,
    /// Dark/bright split on the planted illumination.
    pub breakdown: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { cap: None, breakdown: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckOptions {
    /// Side of the square audit scene.
    pub size: usize,
    pub probes: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Half-width of the seeded uniform offset added to every initial
    /// parameter, so probes avoid the ties of the symmetric start.
    pub jitter: f64,
    /// Test fixture: scales the illumination VJP so the audit must fail.
    pub corrupt_illumination_vjp: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { size: 8, probes: 8, step: 1e-4, tolerance: 1e-3, jitter: 0.02, corrupt_illumination_vjp: false }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = read_json(path)?;
        cfg.validate().map_err(|e| CliError::format(path, e.to_string()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.fit.validate()?;
        if self.synth.count == 0 {
            return Err(CliError::Usage("synth.count must be at least 1".into()));
        }
        if self.steps == Some(0) {
            return Err(CliError::Usage("steps must be at least 1".into()));
        }
        if self.eval.cap.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return Err(CliError::Usage("eval.cap must be positive".into()));
        }
        let g = &self.gradcheck;
        if g.size < 4 || g.probes == 0 || !(g.step > 0.0) || !(g.tolerance > 0.0) || !(g.jitter >= 0.0) {
            return Err(CliError::Usage(
                "gradcheck needs size >= 4, probes >= 1, positive step and tolerance, non-negative jitter".into(),
            ));
        }
        Ok(())
    }

    /// Applies `--seed`: it drives both the scene and the parameter init.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.scene.seed = s;
            self.fit.seed = s;
        }
        self
    }
}
