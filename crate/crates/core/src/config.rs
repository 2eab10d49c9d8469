//! TOML run configuration. Every table rejects unknown keys.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::master::{BumpFamily, Metric, SolveParams};
use crate::measure::{read_measure_csv, read_measure_json, EmpiricalMeasure};
use crate::model::{bundled_spec, BundledParams, ModelSpec};
use crate::monotone::CouplingSampler;
use crate::oracle_lq::LqParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Validate,
    Solve,
    CheckMonotone,
    OracleCompare,
    LipschitzSweep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Tasks run in order by the `run` command.
    #[serde(default)]
    pub tasks: Vec<Task>,
    /// Also write every scenario's particle paths when solving.
    #[serde(default)]
    pub write_flows: bool,
    pub model: ModelConfig,
    #[serde(default)]
    pub solver: SolveParams,
    #[serde(default)]
    pub initial: InitialMeasure,
    #[serde(default)]
    pub validate: ValidateConfig,
    #[serde(default)]
    pub check: CheckConfig,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub lipschitz: LipschitzConfig,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

/// A registered model name with its parameters; `lq` takes the LQ fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    #[serde(default = "one")]
    pub dim: usize,
    #[serde(default = "one_f")]
    pub horizon: f64,
    #[serde(default)]
    pub beta: f64,
    #[serde(default = "one_f")]
    pub a: f64,
    #[serde(default = "half")]
    pub b: f64,
    #[serde(default = "half")]
    pub q: f64,
}

fn one() -> usize {
    1
}
fn one_f() -> f64 {
    1.0
}
fn half() -> f64 {
    0.5
}

impl ModelConfig {
    pub fn bundled(&self) -> BundledParams {
        BundledParams {
            dim: self.dim,
            horizon: self.horizon,
            beta: self.beta,
            a: self.a,
            b: self.b,
            q: self.q,
        }
    }

    pub fn spec(&self) -> Result<ModelSpec> {
        bundled_spec(&self.name, &self.bundled())
    }

    pub fn lq(&self) -> Result<LqParams> {
        if self.name != "lq" {
            return Err(Error::Config(format!("model {:?} has no Riccati oracle; use lq", self.name)));
        }
        let p = LqParams {
            a: self.a,
            b: self.b,
            q: self.q,
            horizon: self.horizon,
            beta: self.beta,
            dim: self.dim,
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialMeasure {
    /// `n` draws from `N(mean, std² I)`, seeded from the run seed.
    Gaussian { n: usize, mean: f64, std: f64 },
    /// Path relative to the config file.
    Csv { path: PathBuf },
    Json { path: PathBuf },
}

impl Default for InitialMeasure {
    fn default() -> Self {
        InitialMeasure::Gaussian {
            n: 2048,
            mean: 0.0,
            std: 1.0,
        }
    }
}

impl InitialMeasure {
    pub fn build(&self, dim: usize, seed: u64, base: &Path) -> Result<EmpiricalMeasure> {
        let mu = match self {
            InitialMeasure::Gaussian { n, mean, std } => {
                EmpiricalMeasure::sample_gaussian(dim, *n, *mean, *std, seed.wrapping_add(0x1D))?
            }
            InitialMeasure::Csv { path } => read_measure_csv(&base.join(path))?,
            InitialMeasure::Json { path } => read_measure_json(&base.join(path))?,
        };
        if mu.dim() != dim {
            return Err(Error::Config(format!("initial measure has dimension {}, model {dim}", mu.dim())));
        }
        Ok(mu)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidateConfig {
    pub probes: usize,
    pub max_atoms: usize,
    /// Relative tolerance of the finite-difference comparison.
    pub fd_tol: f64,
    /// Search for displacement monotonicity of `G` and `H`.
    pub monotone: CouplingSampler,
}

impl Default for ValidateConfig {
    fn default() -> Self {
        Self {
            probes: 200,
            max_atoms: 64,
            fd_tol: 1e-4,
            monotone: CouplingSampler {
                trials: 100,
                ..Default::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckConfig {
    pub times: Vec<f64>,
    pub sampler: CouplingSampler,
    /// Pairings above `-tolerance` pass.
    pub tolerance: f64,
    /// Points for the second difference.
    pub probes: Vec<Vec<f64>>,
    pub h: f64,
    /// Second differences above `-second_diff_tolerance` pass.
    pub second_diff_tolerance: f64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            times: vec![0.0],
            sampler: CouplingSampler {
                trials: 50,
                steps: 50,
                restarts: 3,
                ..Default::default()
            },
            tolerance: 1e-3,
            probes: vec![vec![-1.0], vec![0.0], vec![1.0]],
            h: 0.05,
            second_diff_tolerance: 1e-2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub times: Vec<f64>,
    pub x_min: f64,
    pub x_max: f64,
    pub x_points: usize,
    /// Bound on `|solver - oracle| / (1 + |oracle|)` for `∂ₓV`.
    pub max_rel_err: f64,
    /// Points at which the mixed derivative is compared; empty skips it.
    pub mu_points: Vec<f64>,
    pub max_rel_err_mu: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            times: vec![0.0, 0.25, 0.5, 0.75],
            x_min: -3.0,
            x_max: 3.0,
            x_points: 13,
            max_rel_err: 0.02,
            mu_points: vec![0.0],
            max_rel_err_mu: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LipschitzConfig {
    pub horizons: Vec<f64>,
    pub metric: Metric,
    pub family: BumpFamily,
    pub probes: Vec<Vec<f64>>,
    /// Every constant must be at least `max / band`.
    pub band: f64,
}

impl Default for LipschitzConfig {
    fn default() -> Self {
        Self {
            horizons: vec![0.5, 1.0, 2.0],
            metric: Metric::W1,
            family: BumpFamily::MeanShift {
                shifts: vec![vec![0.25], vec![-0.25]],
            },
            probes: vec![vec![-1.0], vec![0.0], vec![1.0]],
            band: 1.2,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Solver parameters with the run seed applied.
    pub fn solve_params(&self) -> SolveParams {
        SolveParams {
            seed: self.seed,
            ..self.solver.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        let spec = self.model.spec().map_err(|e| Error::Config(e.to_string()))?;
        self.solver.validate().map_err(|e| Error::Config(e.to_string()))?;
        let horizon = spec.horizon;
        let in_horizon = |ts: &[f64], what: &str| -> Result<()> {
            match ts.iter().find(|t| !(**t >= 0.0 && **t <= horizon)) {
                Some(t) => cfg(format!("{what} time {t} outside [0, {horizon}]")),
                None => Ok(()),
            }
        };
        in_horizon(&self.check.times, "check")?;
        for (what, s) in [("validate", &self.validate.monotone), ("check", &self.check.sampler)] {
            if s.atoms == 0 || s.trials == 0 || !(s.radius > 0.0) {
                return cfg(format!("{what} sampler needs atoms, trials and radius > 0"));
            }
        }
        if self.validate.probes == 0 || self.validate.max_atoms == 0 || !(self.validate.fd_tol > 0.0) {
            return cfg("validate needs probes, max_atoms and fd_tol > 0".into());
        }
        if !(self.check.tolerance >= 0.0 && self.check.h > 0.0 && self.check.second_diff_tolerance >= 0.0) {
            return cfg("check needs tolerance >= 0 and h > 0".into());
        }
        let d = spec.dim;
        for p in self.check.probes.iter().chain(&self.lipschitz.probes) {
            if p.len() != d {
                return cfg(format!("probe {p:?} does not have dimension {d}"));
            }
        }
        let o = &self.oracle;
        if o.x_points == 0 || !(o.x_min <= o.x_max) || !(o.max_rel_err > 0.0 && o.max_rel_err_mu > 0.0) {
            return cfg("oracle needs x_points >= 1, x_min <= x_max and positive bounds".into());
        }
        let l = &self.lipschitz;
        if l.horizons.iter().any(|h| !(*h > 0.0)) || !(l.band >= 1.0) {
            return cfg("lipschitz needs positive horizons and band >= 1".into());
        }
        if let InitialMeasure::Gaussian { n, std, .. } = self.initial {
            if n == 0 || !(std >= 0.0) {
                return cfg("gaussian initial measure needs n >= 1 and std >= 0".into());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[model]\nname = \"lq\"\n";

    #[test]
    fn minimal_config_takes_defaults() {
        let c = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.solver, SolveParams::default());
        assert_eq!(c.out, PathBuf::from("out"));
        assert_eq!(c.model.lq().unwrap(), LqParams::default());
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        for extra in ["bogus = 1\n", "[solver]\nbogus = 1\n", "[solver.picard]\nbogus = 1\n", "[check]\nbogus = 1\n"] {
            let text = format!("{MINIMAL}{extra}");
            assert!(matches!(RunConfig::from_toml(&text), Err(Error::Config(_))), "{extra}");
        }
    }

    #[test]
    fn out_of_range_values_are_config_errors() {
        for extra in [
            "[solver]\ndt = -1.0\n",
            "[check]\ntimes = [2.0]\n",
            "[check]\nprobes = [[0.0, 1.0]]\n",
            "[oracle]\nx_points = 0\n",
        ] {
            let text = format!("{MINIMAL}{extra}");
            assert!(RunConfig::from_toml(&text).is_err(), "{extra}");
        }
        assert!(RunConfig::from_toml("[model]\nname = \"lq\"\na = -1.0\n").is_err());
        assert!(RunConfig::from_toml("[model]\nname = \"nope\"\n").is_err());
    }

    #[test]
    fn tasks_and_initial_measure_parse() {
        let text = format!(
            "tasks = [\"validate\", \"check-monotone\"]\n{MINIMAL}[initial]\nkind = \"gaussian\"\nn = 16\nmean = 0.5\nstd = 0.1\n"
        );
        let c = RunConfig::from_toml(&text).unwrap();
        assert_eq!(c.tasks, vec![Task::Validate, Task::CheckMonotone]);
        let mu = c.initial.build(1, 3, Path::new(".")).unwrap();
        assert_eq!(mu.len(), 16);
    }

    #[test]
    fn oracle_needs_lq() {
        let c = RunConfig::from_toml("[model]\nname = \"free_flow\"\n").unwrap();
        assert!(c.model.lq().is_err());
    }
}
