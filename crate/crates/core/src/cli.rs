//! Batch front-end behind the `solver` binary.
//!
//! Exit codes: 0 pass, 1 usage or config error, 2 property violation,
//! 3 the fixed point failed to contract.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};

use crate::config::{RunConfig, Task};
use crate::error::{Error, Result};
use crate::fmt_f64;
use crate::master::{estimate_measure_lipschitz, estimate_second_diff, global_solve, write_solution_dir, MasterSolution};
use crate::measure::EmpiricalMeasure;
use crate::model::{fd_consistency_check, validate_assumptions, ModelSpec, ProbeSampler};
use crate::monotone::{check_dm_g, check_dm_h, check_field_dm};
use crate::oracle_lq::{lq_dxV, riccati_on_uniform_grid};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_VIOLATION: i32 = 2;
pub const EXIT_NON_CONTRACTION: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "solver", about = "Master-field solver for mean field games with common noise")]
struct Args {
    command: Command,
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Command {
    Validate,
    Solve,
    Check,
    OracleCompare,
    LipschitzSweep,
    /// The config's task list, in order.
    Run,
}

/// Error-to-exit-code mapping.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_non_contraction() || matches!(e, Error::NonFinite { .. }) {
        EXIT_NON_CONTRACTION
    } else {
        EXIT_CONFIG
    }
}

/// Caps the global worker pool at `SOLVER_THREADS` if set.
pub fn init_threads() {
    if let Some(n) = std::env::var("SOLVER_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // a second initialisation in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = match Args::try_parse_from(args) {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_PASS };
        }
    };
    init_threads();
    let mut cfg = match RunConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(o) = args.out {
        cfg.out = o;
    }
    let base = args.config.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut ctx = match Context::new(cfg, base) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    let tasks = match args.command {
        Command::Validate => vec![Task::Validate],
        Command::Solve => vec![Task::Solve],
        Command::Check => vec![Task::CheckMonotone],
        Command::OracleCompare => vec![Task::OracleCompare],
        Command::LipschitzSweep => vec![Task::LipschitzSweep],
        Command::Run => ctx.cfg.tasks.clone(),
    };
    for task in tasks {
        let code = match ctx.task(task, out) {
            Ok(code) => code,
            Err(e) => {
                let _ = writeln!(out, "error: {e}");
                eprintln!("error: {e}");
                exit_code(&e)
            }
        };
        if code != EXIT_PASS {
            return code;
        }
    }
    EXIT_PASS
}

struct Context {
    cfg: RunConfig,
    spec: ModelSpec,
    mu0: EmpiricalMeasure,
    solution: Option<MasterSolution>,
}

impl Context {
    fn new(cfg: RunConfig, base: PathBuf) -> Result<Self> {
        let spec = cfg.model.spec()?;
        let mu0 = cfg.initial.build(spec.dim, cfg.seed, &base)?;
        fs::create_dir_all(&cfg.out)?;
        Ok(Self {
            cfg,
            spec,
            mu0,
            solution: None,
        })
    }

    fn task(&mut self, task: Task, out: &mut dyn Write) -> Result<i32> {
        match task {
            Task::Validate => self.validate(out),
            Task::Solve => self.solve(out),
            Task::CheckMonotone => self.check(out),
            Task::OracleCompare => self.oracle_compare(out),
            Task::LipschitzSweep => self.lipschitz_sweep(out),
        }
    }

    fn write_json<T: serde::Serialize>(&self, name: &str, v: &T) -> Result<()> {
        fs::write(self.cfg.out.join(name), serde_json::to_string_pretty(v)?)?;
        Ok(())
    }

    fn solution(&mut self) -> Result<&MasterSolution> {
        if self.solution.is_none() {
            self.solution = Some(global_solve(&self.spec, &self.mu0, &self.cfg.solve_params())?);
        }
        Ok(self.solution.as_ref().expect("solved above"))
    }

    fn validate(&mut self, out: &mut dyn Write) -> Result<i32> {
        let v = &self.cfg.validate;
        let sampler = ProbeSampler {
            count: v.probes,
            max_atoms: v.max_atoms,
            seed: self.cfg.seed,
            ..Default::default()
        };
        let assumptions = validate_assumptions(&self.spec, &sampler)?;
        let fd = fd_consistency_check(self.spec.maps.as_ref(), &sampler.draw(self.spec.dim)?, v.fd_tol)?;
        let mono = crate::monotone::CouplingSampler {
            seed: self.cfg.seed,
            ..v.monotone.clone()
        };
        let g = check_dm_g(self.spec.maps.as_ref(), &mono, 1e-9)?;
        let h = check_dm_h(self.spec.maps.as_ref(), &mono, 1e-9)?;
        self.write_json("assumptions.json", &assumptions)?;
        self.write_json("fd_consistency.json", &fd)?;
        self.write_json("monotone_g.json", &g)?;
        self.write_json("monotone_h.json", &h)?;
        writeln!(out, "{:<40} {:>14} {:>14}  ok", "assumption", "worst", "bound")?;
        for e in &assumptions.entries {
            writeln!(out, "{:<40} {:>14.6e} {:>14.6e}  {}", e.name, e.worst, e.bound, e.holds)?;
        }
        for e in &fd.entries {
            writeln!(out, "{:<40} {:>14.6e} {:>14.6e}  {}", format!("fd {}", e.map), e.max_error, fd.tol, e.holds)?;
        }
        writeln!(out, "{:<40} {:>14.6e} {:>14.6e}  {}", "monotone G", g.min_pairing, -g.tolerance, g.pass)?;
        writeln!(out, "{:<40} {:>14.6e} {:>14.6e}  {}", "monotone H", h.min_pairing, -h.tolerance, h.pass)?;
        let ok = assumptions.all_hold() && fd.all_hold() && g.pass && h.pass;
        Ok(if ok { EXIT_PASS } else { EXIT_VIOLATION })
    }

    fn solve(&mut self, out: &mut dyn Write) -> Result<i32> {
        let dir = self.cfg.out.join("solution");
        let with_flows = self.cfg.write_flows;
        let sol = self.solution()?;
        write_solution_dir(sol, &dir, with_flows)?;
        for len in &sol.halvings {
            writeln!(out, "interval length {len} did not contract; halved")?;
        }
        writeln!(
            out,
            "{:>3} {:>8} {:>8} {:>5} {:>12} {:>10} {:>12}",
            "j", "t0", "t1", "iter", "residual", "max ratio", "stitch"
        )?;
        for (j, r) in sol.intervals.iter().enumerate() {
            let d = &r.diagnostics;
            let ratio = d.max_ratio_after(2).map_or("-".to_string(), |v| format!("{v:.4}"));
            writeln!(
                out,
                "{:>3} {:>8.4} {:>8.4} {:>5} {:>12.4e} {:>10} {:>12.4e}",
                j,
                r.t0,
                r.t1,
                d.iterations,
                d.residuals.last().copied().unwrap_or(0.0),
                ratio,
                r.stitch_residual
            )?;
        }
        Ok(EXIT_PASS)
    }

    fn check(&mut self, out: &mut dyn Write) -> Result<i32> {
        let c = self.cfg.check.clone();
        if c.times.is_empty() {
            return Err(Error::Config("check needs at least one time slice".into()));
        }
        let sampler = crate::monotone::CouplingSampler {
            seed: self.cfg.seed,
            ..c.sampler.clone()
        };
        let mu0 = self.mu0.clone();
        let probes: Vec<_> = c.probes.iter().map(|p| p.iter().copied().collect()).collect();
        let sol = self.solution()?;
        let mut ok = true;
        let mut reports = Vec::new();
        writeln!(out, "{:>8} {:>14} {:>12} {:>12}  ok", "t", "min pairing", "min d2V", "max d2V")?;
        for &t in &c.times {
            let dm = check_field_dm(sol, t, &sampler, c.tolerance)?;
            let sd = estimate_second_diff(sol, t, &mu0, &probes, c.h)?;
            let pass = dm.pass && sd.min >= -c.second_diff_tolerance;
            ok &= pass;
            writeln!(out, "{:>8.4} {:>14.6e} {:>12.6} {:>12.6}  {}", t, dm.min_pairing, sd.min, sd.max, pass)?;
            reports.push((dm, sd));
        }
        for (k, (dm, sd)) in reports.iter().enumerate() {
            self.write_json(&format!("check_t{k}.json"), dm)?;
            self.write_json(&format!("second_diff_t{k}.json"), sd)?;
        }
        Ok(if ok { EXIT_PASS } else { EXIT_VIOLATION })
    }

    fn oracle_compare(&mut self, out: &mut dyn Write) -> Result<i32> {
        let lq = self.cfg.model.lq()?;
        let o = self.cfg.oracle.clone();
        if let Some(t) = o.times.iter().find(|t| !(**t >= 0.0 && **t <= lq.horizon)) {
            return Err(Error::Config(format!("oracle time {t} outside [0, {}]", lq.horizon)));
        }
        let riccati = riccati_on_uniform_grid(&lq, self.cfg.solver.dt.min(1e-3))?;
        let mu0 = self.mu0.clone();
        let path = self.cfg.out.join("oracle_compare.csv");
        let sol = self.solution()?;
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["quantity", "t", "x", "solver", "oracle", "abs_err", "rel_err"])?;
        let (mut worst, mut worst_mu) = (0.0f64, 0.0f64);
        let xs: Vec<f64> = (0..o.x_points)
            .map(|i| {
                if o.x_points == 1 {
                    o.x_min
                } else {
                    o.x_min + (o.x_max - o.x_min) * i as f64 / (o.x_points - 1) as f64
                }
            })
            .collect();
        let d = lq.dim;
        let point = |x: f64| vec![x; d];
        let row = |w: &mut csv::Writer<fs::File>, q: &str, t: f64, x: f64, s: f64, r: f64| -> Result<f64> {
            let abs = (s - r).abs();
            let rel = abs / (1.0 + r.abs());
            w.write_record([q.to_string(), fmt_f64(t), fmt_f64(x), fmt_f64(s), fmt_f64(r), fmt_f64(abs), fmt_f64(rel)])?;
            Ok(rel)
        };
        for &t in &o.times {
            for &x in &xs {
                let s = sol.eval_dxV(t, &point(x), &mu0)?;
                let r = lq_dxV(&riccati, t, &point(x), &mu0)?;
                worst = worst.max(row(&mut w, "dxV", t, x, s[0], r[0])?);
            }
            let (_, q) = riccati.at(t)?;
            for &x in &o.mu_points {
                let s = sol.eval_dxmuV(t, &point(x), &mu0, &point(0.0), 0)?;
                worst_mu = worst_mu.max(row(&mut w, "dxmuV", t, x, s[0], q)?);
            }
        }
        w.flush()?;
        writeln!(out, "max rel err dxV   {:.6e} (bound {})", worst, o.max_rel_err)?;
        if !o.mu_points.is_empty() {
            writeln!(out, "max rel err dxmuV {:.6e} (bound {})", worst_mu, o.max_rel_err_mu)?;
        }
        let ok = worst <= o.max_rel_err && worst_mu <= o.max_rel_err_mu;
        Ok(if ok { EXIT_PASS } else { EXIT_VIOLATION })
    }

    fn lipschitz_sweep(&mut self, out: &mut dyn Write) -> Result<i32> {
        let l = self.cfg.lipschitz.clone();
        let params = self.cfg.solve_params();
        let probes: Vec<_> = l.probes.iter().map(|p| p.iter().copied().collect()).collect();
        let mut w = csv::Writer::from_path(self.cfg.out.join("lipschitz.csv"))?;
        w.write_record(["horizon", "metric", "constant", "abs_q0"])?;
        writeln!(out, "{:>8} {:>14} {:>14}", "T", "constant", "|Q(0)|")?;
        let mut constants = Vec::new();
        let mut estimates = Vec::new();
        for &horizon in &l.horizons {
            let spec = self.spec.with_horizon(horizon)?;
            let sol = global_solve(&spec, &self.mu0, &params)?;
            let est = estimate_measure_lipschitz(&sol, 0.0, &self.mu0, l.metric, &l.family, &probes)?;
            let q0 = match self.cfg.model.lq() {
                Ok(mut lq) => {
                    lq.horizon = horizon;
                    let r = riccati_on_uniform_grid(&lq, 1e-3)?;
                    Some(r.at(0.0)?.1.abs())
                }
                Err(_) => None,
            };
            let metric = serde_json::to_value(l.metric)?.as_str().unwrap_or_default().to_string();
            w.write_record([
                fmt_f64(horizon),
                metric,
                fmt_f64(est.constant),
                q0.map(fmt_f64).unwrap_or_default(),
            ])?;
            let q0s = q0.map_or("-".to_string(), |q| format!("{q:.6}"));
            writeln!(out, "{:>8.4} {:>14.6} {:>14}", horizon, est.constant, q0s)?;
            constants.push(est.constant);
            estimates.push(est);
        }
        w.flush()?;
        self.write_json("lipschitz.json", &estimates)?;
        let max = constants.iter().copied().fold(0.0, f64::max);
        let min = constants.iter().copied().fold(f64::INFINITY, f64::min);
        let ok = constants.is_empty() || max <= l.band * min;
        Ok(if ok { EXIT_PASS } else { EXIT_VIOLATION })
    }
}
