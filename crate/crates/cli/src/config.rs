use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use kamtori::homology::{ExponentProfile, Strategy};
use kamtori::kam::{KamOptions, ScheduleParams};
use kamtori::poly::Caps;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Bbm,
    Gpc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    Desk,
    Asymptotic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum StrategyArg {
    Structured,
    Dense,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Structured => Strategy::Structured,
            StrategyArg::Dense => Strategy::Dense,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum LogLevel {
    Quiet,
    #[default]
    Normal,
    Debug,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub equation: ModelKind,
    pub radius: usize,
    /// One value for BBM, one per lattice dimension for gPC.
    pub tau: Vec<f64>,
    /// Tangent site labels.
    pub tangent: Vec<Vec<i32>>,
    /// gPC only: tangent sites must have `|j| > l_threshold`.
    pub l_threshold: f64,
    /// Drop the perturbation `R^0` and run on the integrable part alone.
    pub zero_perturbation: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            equation: ModelKind::Bbm,
            radius: 16,
            tau: vec![1.0 + (-1.0f64).exp()],
            tangent: vec![vec![1], vec![2]],
            l_threshold: 0.0,
            zero_perturbation: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormConfig {
    pub p: f64,
}

impl Default for NormConfig {
    fn default() -> Self {
        Self { p: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub epsilon0: f64,
    pub rho0: f64,
    pub s0: f64,
    pub r0: f64,
    pub steps: usize,
    pub target: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        let s = ScheduleParams::default();
        let k = KamOptions::default();
        Self { epsilon0: s.epsilon0, rho0: s.rho0, s0: s.s0, r0: s.r0, steps: k.steps, target: k.target }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub strategy: StrategyArg,
    pub profile: ProfileKind,
    pub profile_scale: f64,
    pub fourier_cap: i64,
    pub fourier_trunc: i64,
    pub weight_cap: usize,
    pub lie_order: usize,
    pub prune: f64,
    pub divisor_floor: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let k = KamOptions::default();
        Self {
            strategy: StrategyArg::Structured,
            profile: ProfileKind::Desk,
            profile_scale: 0.03,
            fourier_cap: k.fourier_cap,
            fourier_trunc: k.caps.fourier,
            weight_cap: k.caps.weight,
            lie_order: k.lie_order,
            prune: k.prune,
            divisor_floor: k.solver.divisor_floor,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub parameter_samples: usize,
    pub scales: Vec<i64>,
    /// Half-width of the frequency box used for the excision trend.
    pub frequency_halfwidth: f64,
    pub torus_grid: usize,
    pub flow_steps: usize,
    pub audit_samples: usize,
    pub symplectic_samples: usize,
    pub horizon: f64,
    pub dt: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            parameter_samples: 10_000,
            scales: vec![8, 16, 32, 64],
            frequency_halfwidth: 0.25,
            torus_grid: 16,
            flow_steps: 8,
            audit_samples: 200,
            symplectic_samples: 2,
            horizon: 1e3,
            dt: 1e-2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub norms: NormConfig,
    pub schedule: ScheduleConfig,
    pub solver: SolverConfig,
    pub sampling: SamplingConfig,
    pub seed: u64,
    pub verify: bool,
    /// Not part of the provenance record: moving a run does not change it.
    #[serde(skip_serializing)]
    pub output_dir: PathBuf,
    #[serde(skip_serializing)]
    pub log_level: LogLevel,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            norms: NormConfig::default(),
            schedule: ScheduleConfig::default(),
            solver: SolverConfig::default(),
            sampling: SamplingConfig::default(),
            seed: 7,
            verify: true,
            output_dir: PathBuf::from("kamtori-run"),
            log_level: LogLevel::Normal,
        }
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        let is_json = path.extension().is_some_and(|e| e == "json");
        if is_json {
            serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
        } else {
            toml::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let m = &self.model;
        let s = &self.schedule;
        let v = &self.solver;
        let g = &self.sampling;
        let positive = |name: &str, x: f64| if x > 0.0 && x.is_finite() { Ok(()) } else { Err(invalid(format!("{name} must be positive, got {x}"))) };
        positive("schedule.epsilon0", s.epsilon0)?;
        if s.epsilon0 >= 1.0 {
            return Err(invalid(format!("schedule.epsilon0 must be below 1, got {}", s.epsilon0)));
        }
        positive("schedule.rho0", s.rho0)?;
        positive("schedule.s0", s.s0)?;
        positive("schedule.r0", s.r0)?;
        positive("schedule.target", s.target)?;
        if s.steps == 0 {
            return Err(invalid("schedule.steps must be at least 1"));
        }
        if !(self.norms.p >= 0.0 && self.norms.p.is_finite()) {
            return Err(invalid(format!("norms.p must be nonnegative, got {}", self.norms.p)));
        }
        if m.tangent.is_empty() {
            return Err(invalid("model.tangent is empty"));
        }
        match m.equation {
            ModelKind::Bbm => {
                if m.tau.len() != 1 {
                    return Err(invalid("BBM takes exactly one tau"));
                }
                if m.tangent.iter().any(|t| t.len() != 1) {
                    return Err(invalid("BBM tangent labels are single integers"));
                }
            }
            ModelKind::Gpc => {
                if m.tau.is_empty() || m.tangent.iter().any(|t| t.len() != m.tau.len()) {
                    return Err(invalid("gPC tangent labels need one entry per tau"));
                }
            }
        }
        positive("solver.profile_scale", v.profile_scale)?;
        positive("solver.divisor_floor", v.divisor_floor)?;
        if v.prune < 0.0 {
            return Err(invalid("solver.prune must be nonnegative"));
        }
        if v.fourier_cap < 1 || v.fourier_trunc < v.fourier_cap {
            return Err(invalid("need 1 <= solver.fourier_cap <= solver.fourier_trunc"));
        }
        if v.lie_order == 0 || v.weight_cap < 2 {
            return Err(invalid("solver.lie_order must be positive and solver.weight_cap at least 2"));
        }
        if g.parameter_samples == 0 || g.audit_samples == 0 {
            return Err(invalid("sample counts must be positive"));
        }
        if g.scales.is_empty() || g.scales.iter().any(|&k| k < 1) {
            return Err(invalid("sampling.scales must be positive"));
        }
        positive("sampling.frequency_halfwidth", g.frequency_halfwidth)?;
        positive("sampling.horizon", g.horizon)?;
        positive("sampling.dt", g.dt)?;
        if g.dt > g.horizon {
            return Err(invalid("sampling.dt exceeds sampling.horizon"));
        }
        if g.torus_grid < 2 || g.flow_steps == 0 {
            return Err(invalid("sampling.torus_grid must be at least 2 and sampling.flow_steps positive"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn schedule_params(&self) -> ScheduleParams {
        let s = &self.schedule;
        ScheduleParams { epsilon0: s.epsilon0, rho0: s.rho0, s0: s.s0, r0: s.r0 }
    }

    pub fn kam_options(&self, kappa: f64) -> KamOptions {
        let d = KamOptions::default();
        let v = &self.solver;
        KamOptions {
            schedule: self.schedule_params(),
            steps: self.schedule.steps,
            target: self.schedule.target,
            fourier_cap: v.fourier_cap,
            caps: Caps { fourier: v.fourier_trunc, weight: v.weight_cap, ..d.caps },
            lie_order: v.lie_order,
            prune: v.prune,
            solver: kamtori::homology::SolverOptions { strategy: v.strategy.into(), divisor_floor: v.divisor_floor, ..d.solver },
            p: self.norms.p,
            kappa,
            ..d
        }
    }

    pub fn profile(&self, dim_d: usize, kappa: f64) -> ExponentProfile {
        let n = self.model.tangent.len();
        match self.solver.profile {
            ProfileKind::Desk => ExponentProfile::desk(dim_d, kappa, n, self.solver.profile_scale),
            ProfileKind::Asymptotic => ExponentProfile::asymptotic(dim_d, kappa, n),
        }
    }

    /// `KAMTORI_OUTPUT_ROOT` (or the working directory) joined with a relative `output_dir`.
    pub fn output_path(&self) -> PathBuf {
        if self.output_dir.is_absolute() {
            return self.output_dir.clone();
        }
        let root = std::env::var_os("KAMTORI_OUTPUT_ROOT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
        root.join(&self.output_dir)
    }
}

fn parse_label(s: &str) -> Result<Vec<i32>, String> {
    s.split(',').map(|t| t.trim().parse::<i32>().map_err(|e| format!("bad site label {s:?}: {e}"))).collect()
}

/// Command-line overrides, one per configuration key.
#[derive(Args, Debug, Default, Clone)]
pub struct ConfigArgs {
    /// TOML or JSON configuration file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub equation: Option<ModelKind>,
    #[arg(long)]
    pub radius: Option<usize>,
    #[arg(long, num_args = 1.., allow_negative_numbers = true)]
    pub tau: Option<Vec<f64>>,
    /// Tangent sites, e.g. `--tangent 1 2` or `--tangent 1,2 2,1`.
    #[arg(long, num_args = 1.., value_parser = parse_label, allow_negative_numbers = true)]
    pub tangent: Option<Vec<Vec<i32>>>,
    #[arg(long)]
    pub l_threshold: Option<f64>,
    #[arg(long)]
    pub zero_perturbation: Option<bool>,
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub epsilon0: Option<f64>,
    #[arg(long)]
    pub rho0: Option<f64>,
    #[arg(long)]
    pub s0: Option<f64>,
    #[arg(long)]
    pub r0: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub target: Option<f64>,
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
    #[arg(long, value_enum)]
    pub profile: Option<ProfileKind>,
    #[arg(long)]
    pub profile_scale: Option<f64>,
    #[arg(long)]
    pub fourier_cap: Option<i64>,
    #[arg(long)]
    pub fourier_trunc: Option<i64>,
    #[arg(long)]
    pub weight_cap: Option<usize>,
    #[arg(long)]
    pub lie_order: Option<usize>,
    #[arg(long)]
    pub prune: Option<f64>,
    #[arg(long)]
    pub divisor_floor: Option<f64>,
    #[arg(long)]
    pub parameter_samples: Option<usize>,
    #[arg(long, num_args = 1..)]
    pub scales: Option<Vec<i64>>,
    #[arg(long)]
    pub frequency_halfwidth: Option<f64>,
    #[arg(long)]
    pub torus_grid: Option<usize>,
    #[arg(long)]
    pub flow_steps: Option<usize>,
    #[arg(long)]
    pub audit_samples: Option<usize>,
    #[arg(long)]
    pub symplectic_samples: Option<usize>,
    #[arg(long)]
    pub horizon: Option<f64>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub verify: Option<bool>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub log_level: Option<LogLevel>,
}

macro_rules! apply {
    ($src:expr, $dst:expr) => {
        if let Some(v) = $src.clone() {
            $dst = v;
        }
    };
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        apply!(self.equation, c.model.equation);
        apply!(self.radius, c.model.radius);
        apply!(self.tau, c.model.tau);
        apply!(self.tangent, c.model.tangent);
        apply!(self.l_threshold, c.model.l_threshold);
        apply!(self.zero_perturbation, c.model.zero_perturbation);
        apply!(self.p, c.norms.p);
        apply!(self.epsilon0, c.schedule.epsilon0);
        apply!(self.rho0, c.schedule.rho0);
        apply!(self.s0, c.schedule.s0);
        apply!(self.r0, c.schedule.r0);
        apply!(self.steps, c.schedule.steps);
        apply!(self.target, c.schedule.target);
        apply!(self.strategy, c.solver.strategy);
        apply!(self.profile, c.solver.profile);
        apply!(self.profile_scale, c.solver.profile_scale);
        apply!(self.fourier_cap, c.solver.fourier_cap);
        apply!(self.fourier_trunc, c.solver.fourier_trunc);
        apply!(self.weight_cap, c.solver.weight_cap);
        apply!(self.lie_order, c.solver.lie_order);
        apply!(self.prune, c.solver.prune);
        apply!(self.divisor_floor, c.solver.divisor_floor);
        apply!(self.parameter_samples, c.sampling.parameter_samples);
        apply!(self.scales, c.sampling.scales);
        apply!(self.frequency_halfwidth, c.sampling.frequency_halfwidth);
        apply!(self.torus_grid, c.sampling.torus_grid);
        apply!(self.flow_steps, c.sampling.flow_steps);
        apply!(self.audit_samples, c.sampling.audit_samples);
        apply!(self.symplectic_samples, c.sampling.symplectic_samples);
        apply!(self.horizon, c.sampling.horizon);
        apply!(self.dt, c.sampling.dt);
        apply!(self.seed, c.seed);
        apply!(self.verify, c.verify);
        apply!(self.output_dir, c.output_dir);
        apply!(self.log_level, c.log_level);
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let text = toml::to_string(&c).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn output_dir_is_not_provenance() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { output_dir: PathBuf::from("elsewhere"), log_level: LogLevel::Debug, ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        let c = ExperimentConfig { seed: 8, ..a.clone() };
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn rejects_bad_values() {
        let mut c = ExperimentConfig::default();
        c.schedule.epsilon0 = -1e-4;
        assert!(matches!(c.validate(), Err(CliError::Config(_))));
        let mut c = ExperimentConfig::default();
        c.model.tau = vec![1.2, 1.3];
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.sampling.scales.clear();
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<ExperimentConfig>("seed = 1\nbogus = 2\n").is_err());
        assert!(toml::from_str::<ExperimentConfig>("[schedule]\nepsilon0 = 1e-5\n").unwrap().schedule.epsilon0 == 1e-5);
    }
}
