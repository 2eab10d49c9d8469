use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{IntervalRecord, MasterSolution, SolveParams};
use crate::engine::{GridFn, PicardDiagnostics, ScenarioFlow};
use crate::error::{Error, Result};
use crate::fmt_f64;

#[derive(Serialize)]
struct SolutionManifest<'a> {
    model: &'a str,
    dim: usize,
    horizon: f64,
    beta: f64,
    params: &'a SolveParams,
    interval_len: f64,
    halvings: &'a [f64],
    max_stitch_residual: f64,
    intervals: &'a [IntervalRecord],
}

#[derive(Serialize, Deserialize)]
pub struct GridMeta {
    pub dim: usize,
    pub half_width: f64,
    pub points: usize,
}

#[derive(Serialize, Deserialize)]
pub struct IntervalMeta {
    pub t0: f64,
    pub t1: f64,
    pub start_step: usize,
    pub dt: f64,
    pub steps: usize,
    pub grid: GridMeta,
    pub scenarios: usize,
    pub particles: usize,
    pub seed: u64,
    pub diagnostics: PicardDiagnostics,
}

/// Writes `solution.json` and one `interval_{j}` directory per window of the
/// chain with `meta.json`, `field_t{k}.csv` and, if asked, `flow_s{m}.csv`.
pub fn write_solution_dir(sol: &MasterSolution, dir: &Path, with_flows: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    let spec = sol.spec();
    let manifest = SolutionManifest {
        model: &spec.name,
        dim: spec.dim,
        horizon: spec.horizon,
        beta: spec.beta,
        params: sol.params(),
        interval_len: sol.interval_len(),
        halvings: &sol.halvings,
        max_stitch_residual: sol.max_stitch_residual(),
        intervals: &sol.intervals,
    };
    fs::write(dir.join("solution.json"), serde_json::to_string_pretty(&manifest)?)?;
    for (j, w) in sol.chain.iter().enumerate() {
        let sub = dir.join(format!("interval_{j}"));
        fs::create_dir_all(&sub)?;
        let f = &w.solution.field;
        let meta = IntervalMeta {
            t0: f.time.t0,
            t1: f.time.t1(),
            start_step: w.start,
            dt: f.time.dt,
            steps: f.time.steps,
            grid: GridMeta {
                dim: f.space.dim,
                half_width: f.space.half_width,
                points: f.space.points,
            },
            scenarios: f.scenarios,
            particles: w.solution.flows[0].particles(),
            seed: sol.params().seed,
            diagnostics: w.solution.diagnostics.clone(),
        };
        fs::write(sub.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
        for k in 0..=f.time.steps {
            write_field_csv(&f.slices[k], &f.stderr[k], &sub.join(format!("field_t{k}.csv")))?;
        }
        if with_flows {
            for flow in &w.solution.flows {
                write_flow_csv(flow, &sub.join(format!("flow_s{}.csv", flow.scenario)))?;
            }
        }
    }
    Ok(())
}

/// Columns `x0.., v0.., se0..`, one row per grid node.
pub fn write_field_csv(values: &GridFn, stderr: &GridFn, path: &Path) -> Result<()> {
    let d = values.grid.dim;
    let c = values.comps;
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    header.extend((0..c).map(|i| format!("v{i}")));
    header.extend((0..c).map(|i| format!("se{i}")));
    w.write_record(&header)?;
    for idx in 0..values.grid.len() {
        let mut row: Vec<String> = values.grid.node(idx).iter().map(|v| fmt_f64(*v)).collect();
        row.extend(values.node_value(idx).iter().map(|v| fmt_f64(*v)));
        row.extend(stderr.node_value(idx).iter().map(|v| fmt_f64(*v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// A field slice read back from CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldTable {
    pub dim: usize,
    pub nodes: Vec<f64>,
    pub values: Vec<f64>,
    pub stderr: Vec<f64>,
}

pub fn read_field_csv(path: &Path) -> Result<FieldTable> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let dim = header.iter().filter(|h| h.starts_with('x')).count();
    let comps = header.iter().filter(|h| h.starts_with('v')).count();
    if dim == 0 || comps == 0 || header.len() != dim + 2 * comps {
        return Err(Error::invalid(format!("unexpected field header in {}", path.display())));
    }
    let mut t = FieldTable {
        dim,
        nodes: Vec::new(),
        values: Vec::new(),
        stderr: Vec::new(),
    };
    for rec in r.records() {
        let rec = rec?;
        let nums: Vec<f64> = rec
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| Error::invalid(format!("{}: {e}", path.display()))))
            .collect::<Result<_>>()?;
        t.nodes.extend_from_slice(&nums[..dim]);
        t.values.extend_from_slice(&nums[dim..dim + comps]);
        t.stderr.extend_from_slice(&nums[dim + comps..]);
    }
    Ok(t)
}

/// Columns `k, i, x0.., y0..`.
pub fn write_flow_csv(flow: &ScenarioFlow, path: &Path) -> Result<()> {
    let d = flow.dim();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["k".to_string(), "i".to_string()];
    header.extend((0..d).map(|c| format!("x{c}")));
    header.extend((0..d).map(|c| format!("y{c}")));
    w.write_record(&header)?;
    for k in 0..=flow.steps() {
        for i in 0..flow.particles() {
            let mut row = vec![k.to_string(), i.to_string()];
            row.extend(flow.x(k, i).iter().map(|v| fmt_f64(*v)));
            row.extend(flow.y(k, i).iter().map(|v| fmt_f64(*v)));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Rows `(k, i, x, y)` of a flow CSV.
pub fn read_flow_csv(path: &Path) -> Result<Vec<(usize, usize, Vec<f64>, Vec<f64>)>> {
    let mut r = csv::Reader::from_path(path)?;
    let d = (r.headers()?.len().saturating_sub(2)) / 2;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let bad = |e: &dyn std::fmt::Display| Error::invalid(format!("{}: {e}", path.display()));
        let k = rec[0].parse().map_err(|e| bad(&e))?;
        let i = rec[1].parse().map_err(|e| bad(&e))?;
        let nums: Vec<f64> = rec
            .iter()
            .skip(2)
            .map(|s| s.parse::<f64>().map_err(|e| bad(&e)))
            .collect::<Result<_>>()?;
        out.push((k, i, nums[..d].to_vec(), nums[d..].to_vec()));
    }
    Ok(out)
}
