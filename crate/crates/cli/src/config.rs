//! Run configuration: one JSON document, command-line flags applied on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use smart_core::phantom::{PhantomSpec, RankExperimentConfig};
use smart_core::sampling::MaskSpec;
use smart_core::solver::{ReconConfig, ReconMode};
use smart_core::Grid;

use crate::error::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    #[default]
    Mono,
    Bi,
}

/// Reconstruction modes, including the adjoint-only baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Smart,
    #[serde(alias = "spatial_only")]
    SpatialOnly,
    #[serde(alias = "parametric_only")]
    ParametricOnly,
    #[serde(alias = "zero_filled")]
    ZeroFilled,
}

impl Mode {
    pub fn solver_mode(self) -> Option<ReconMode> {
        match self {
            Mode::Smart => Some(ReconMode::Smart),
            Mode::SpatialOnly => Some(ReconMode::SpatialOnly),
            Mode::ParametricOnly => Some(ReconMode::ParametricOnly),
            Mode::ZeroFilled => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    #[serde(default)]
    pub model: Model,
    /// Rescales the default tube layout to this grid.
    pub grid: Option<Grid>,
    pub tsl_ms: Option<Vec<f64>>,
    /// Image-domain noise added by `simulate`; absent means noiseless.
    pub snr: Option<f64>,
    /// Full phantom description; excludes `grid` and `tsl_ms`.
    pub spec: Option<PhantomSpec>,
}

impl PhantomConfig {
    pub fn build(&self) -> Result<PhantomSpec, CliError> {
        if let Some(spec) = &self.spec {
            if self.grid.is_some() || self.tsl_ms.is_some() {
                return Err(CliError::config("phantom.spec cannot be combined with phantom.grid or phantom.tsl_ms"));
            }
            return Ok(spec.clone());
        }
        let mut spec = match self.model {
            Model::Mono => PhantomSpec::mono(),
            Model::Bi => PhantomSpec::bi(),
        };
        if let Some(g) = self.grid {
            let g = Grid::new(g.nx, g.ny, g.nz).map_err(|e| CliError::config(format!("phantom.grid: {e}")))?;
            spec = spec.rescaled(g);
        }
        if let Some(t) = &self.tsl_ms {
            spec.tsl_ms = t.clone();
        }
        spec.validate().map_err(|e| CliError::config(format!("phantom: {e}")))?;
        Ok(spec)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    #[default]
    Lines,
    Poisson,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskConfig {
    #[serde(default)]
    pub pattern: Pattern,
    #[serde(default = "default_r")]
    pub r: f64,
    /// Lines pattern only; defaults to `ny / 16`.
    pub center_lines: Option<usize>,
    /// Poisson pattern only.
    #[serde(default = "default_center_radius")]
    pub center_radius: f64,
    /// k-space noise on sampled entries; absent means noiseless.
    pub snr: Option<f64>,
}

fn default_r() -> f64 {
    4.0
}

fn default_center_radius() -> f64 {
    8.0
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self { pattern: Pattern::Lines, r: default_r(), center_lines: None, center_radius: default_center_radius(), snr: None }
    }
}

impl MaskConfig {
    pub fn spec(&self, seed: u64) -> MaskSpec {
        match self.pattern {
            Pattern::Lines => MaskSpec::Lines { r: self.r, center_lines: self.center_lines, seed },
            Pattern::Poisson => MaskSpec::Poisson { r: self.r, center_radius: self.center_radius, seed },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankConfig {
    pub snr: Vec<f64>,
    pub runs: usize,
    pub ratio: f64,
}

impl Default for RankConfig {
    fn default() -> Self {
        let d = RankExperimentConfig::default();
        Self { snr: d.snr, runs: d.runs, ratio: d.ratio }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub input: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub coils: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed, required in every config file. The mask uses it as is,
    /// noise uses `seed + 1`, the rank experiment uses it as its stream seed.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub phantom: PhantomConfig,
    #[serde(default)]
    pub mask: MaskConfig,
    /// Solver settings; absent means the defaults for the data's grid.
    pub recon: Option<ReconConfig>,
    /// Overrides `recon.mode`; also accepts `zero-filled`.
    pub mode: Option<Mode>,
    #[serde(default)]
    pub rank_experiment: RankConfig,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default = "default_amplify")]
    pub amplify_error: f64,
}

fn default_amplify() -> f64 {
    10.0
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            phantom: PhantomConfig::default(),
            mask: MaskConfig::default(),
            recon: None,
            mode: None,
            rank_experiment: RankConfig::default(),
            paths: Paths::default(),
            amplify_error: default_amplify(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::config(format!("{origin}: {e}")))?;
        if cfg.seed.is_none() {
            return Err(CliError::config(format!("{origin}: field `seed` is mandatory")));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.seed.ok_or_else(|| CliError::config("no seed: pass --seed N or set `seed` in the config"))
    }

    pub fn noise_seed(&self) -> Result<u64, CliError> {
        Ok(self.seed()?.wrapping_add(1))
    }

    pub fn out_dir(&self) -> PathBuf {
        self.paths.out.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn rank_config(&self) -> Result<RankExperimentConfig, CliError> {
        let r = &self.rank_experiment;
        let cfg = RankExperimentConfig { snr: r.snr.clone(), runs: r.runs, ratio: r.ratio, seed: self.seed()? };
        cfg.validate().map_err(|e| CliError::config(format!("rank_experiment: {e}")))?;
        Ok(cfg)
    }

    /// Solver settings for `grid`, with `mode` folded in.
    pub fn recon_config(&self, grid: &Grid) -> ReconConfig {
        let mut cfg = self.recon.clone().unwrap_or_else(|| ReconConfig::default_for(grid));
        if let Some(m) = self.mode.and_then(Mode::solver_mode) {
            cfg.mode = m;
        }
        cfg
    }

    pub fn effective_mode(&self) -> Mode {
        match (self.mode, &self.recon) {
            (Some(m), _) => m,
            (None, Some(r)) => match r.mode {
                ReconMode::Smart => Mode::Smart,
                ReconMode::SpatialOnly => Mode::SpatialOnly,
                ReconMode::ParametricOnly => Mode::ParametricOnly,
            },
            (None, None) => Mode::Smart,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = RunConfig::from_json(r#"{"seed": 3}"#, "t").unwrap();
        assert_eq!(cfg.seed, Some(3));
        assert_eq!(cfg.mask.r, 4.0);
        assert_eq!(cfg.amplify_error, 10.0);
        assert_eq!(cfg.rank_experiment.runs, 100);
        assert_eq!(cfg.phantom.build().unwrap(), PhantomSpec::mono());
        let grid = PhantomSpec::default_grid();
        assert_eq!(cfg.recon_config(&grid), ReconConfig::default_2d());
        assert_eq!(cfg.effective_mode(), Mode::Smart);
    }

    #[test]
    fn unknown_keys_and_missing_seed_are_config_errors() {
        for text in [r#"{"seed": 1, "sed": 2}"#, r#"{"seed": 1, "mask": {"R": 4}}"#, r#"{"mask": {"r": 4}}"#, "{"] {
            let e = RunConfig::from_json(text, "t").unwrap_err();
            assert_eq!(e.code, crate::error::EXIT_CONFIG, "{text}: {}", e.message);
        }
    }

    #[test]
    fn modes_parse_both_spellings() {
        let a = RunConfig::from_json(r#"{"seed": 1, "mode": "zero-filled"}"#, "t").unwrap();
        let b = RunConfig::from_json(r#"{"seed": 1, "mode": "spatial_only"}"#, "t").unwrap();
        assert_eq!(a.effective_mode(), Mode::ZeroFilled);
        assert_eq!(b.recon_config(&PhantomSpec::default_grid()).mode, ReconMode::SpatialOnly);
    }

    #[test]
    fn phantom_overrides() {
        let cfg: PhantomConfig =
            serde_json::from_str(r#"{"model": "bi", "grid": {"nx": 96, "ny": 96, "nz": 1}, "tsl_ms": [1, 20, 40]}"#).unwrap();
        let spec = cfg.build().unwrap();
        assert_eq!(spec.grid.nx, 96);
        assert_eq!(spec.tsl_ms, vec![1.0, 20.0, 40.0]);
        assert_eq!(spec.tubes[0].radius, 10.0);
        let bad: PhantomConfig = serde_json::from_str(r#"{"grid": {"nx": 0, "ny": 4, "nz": 1}}"#).unwrap();
        assert_eq!(bad.build().unwrap_err().code, crate::error::EXIT_CONFIG);
    }
}
