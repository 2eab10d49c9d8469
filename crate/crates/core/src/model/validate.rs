use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::bundled::PROBE_RADIUS;
use super::{Model, ModelSpec};
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix, Vector};
use crate::measure::EmpiricalMeasure;

/// One evaluation point `(x, μ, p)` plus an atom index of `μ` used as the
/// measure-derivative location.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Probe {
    pub x: Vec<f64>,
    pub p: Vec<f64>,
    pub mu: EmpiricalMeasure,
    pub atom: usize,
}

impl Probe {
    pub fn y(&self) -> &[f64] {
        self.mu.point(self.atom)
    }
}

/// Random probes: `x, p` uniform in the box, `μ` a Gaussian cloud of at most
/// `max_atoms` atoms clamped into the box.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeSampler {
    pub count: usize,
    pub radius: f64,
    pub max_atoms: usize,
    pub seed: u64,
}

impl Default for ProbeSampler {
    fn default() -> Self {
        Self {
            count: 200,
            radius: PROBE_RADIUS,
            max_atoms: 64,
            seed: 0,
        }
    }
}

impl ProbeSampler {
    pub fn draw(&self, dim: usize) -> Result<Vec<Probe>> {
        if self.count == 0 || self.max_atoms == 0 || !(self.radius > 0.0) {
            return Err(Error::invalid("probe sampler needs count, atoms and radius > 0"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let r = self.radius;
        (0..self.count)
            .map(|_| {
                let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-r..=r)).collect();
                let p: Vec<f64> = (0..dim).map(|_| rng.random_range(-r..=r)).collect();
                let n = rng.random_range(1..=self.max_atoms);
                let centre = rng.random_range(-2.0..=2.0);
                let spread = rng.random_range(0.1..=2.0);
                let pts: Vec<f64> = (0..n * dim)
                    .map(|_| {
                        let z: f64 = rng.sample(StandardNormal);
                        (centre + spread * z).clamp(-r, r)
                    })
                    .collect();
                let mu = EmpiricalMeasure::uniform(dim, pts)?;
                let atom = rng.random_range(0..n);
                Ok(Probe { x, p, mu, atom })
            })
            .collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AssumptionEntry {
    pub name: String,
    /// Worst observed value of the checked quantity.
    pub worst: f64,
    pub bound: f64,
    pub holds: bool,
    pub witness: Option<Probe>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub model: String,
    pub probes: usize,
    pub entries: Vec<AssumptionEntry>,
}

impl AssumptionReport {
    pub fn all_hold(&self) -> bool {
        self.entries.iter().all(|e| e.holds)
    }

    pub fn violations(&self) -> impl Iterator<Item = &AssumptionEntry> {
        self.entries.iter().filter(|e| !e.holds)
    }
}

struct Tracker {
    name: &'static str,
    bound: f64,
    upper: bool,
    worst: f64,
    witness: Option<usize>,
}

impl Tracker {
    fn upper(name: &'static str, bound: f64) -> Self {
        Self {
            name,
            bound,
            upper: true,
            worst: f64::NEG_INFINITY,
            witness: None,
        }
    }

    fn lower(name: &'static str, bound: f64) -> Self {
        Self {
            name,
            bound,
            upper: false,
            worst: f64::INFINITY,
            witness: None,
        }
    }

    fn see(&mut self, v: f64, idx: usize) {
        let worse = if self.upper { v > self.worst } else { v < self.worst };
        if worse {
            self.worst = v;
            self.witness = Some(idx);
        }
    }

    fn finish(self, probes: &[Probe]) -> AssumptionEntry {
        let slack = 1e-12 * self.bound.abs().max(1.0);
        let holds = if self.upper {
            self.worst <= self.bound + slack
        } else {
            self.worst >= self.bound - slack
        };
        AssumptionEntry {
            name: self.name.to_string(),
            worst: self.worst,
            bound: self.bound,
            holds,
            witness: if holds { None } else { self.witness.map(|i| probes[i].clone()) },
        }
    }
}

fn finite_matrix(m: &Matrix, what: &str) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { what: what.into() })
    }
}

/// Samples the standing bounds on derivatives of `H` and `G`, uniform
/// convexity of `H` in `p`, the coercivity and terminal floors, and the
/// symmetry of Hessians.
pub fn validate_assumptions(spec: &ModelSpec, sampler: &ProbeSampler) -> Result<AssumptionReport> {
    spec.check_fields()?;
    let c = &spec.constants;
    let m = spec.maps.as_ref();
    let probes = sampler.draw(spec.dim)?;
    let mut t = [
        Tracker::upper("|dxp H| <= L_H", c.l_h),
        Tracker::upper("|dxx H| <= L_H", c.l_h),
        Tracker::upper("|dpp H| <= L_H", c.l_h),
        Tracker::upper("|dx dmu H| <= L_H", c.l_h),
        Tracker::upper("|dp dmu H| <= L_H", c.l_h),
        Tracker::lower("dpp H >= c0 I", c.c0),
        Tracker::lower("<dp H, p> - H >= -floor", -c.coercivity_floor),
        Tracker::upper("|dxx G| <= L_G", c.l_g),
        Tracker::upper("|dx dmu G| <= L_G", c.l_g),
        Tracker::lower("G >= -floor", -c.terminal_floor),
        Tracker::upper("dpp H, dxx H, dxx G asymmetry", 1e-10),
    ];
    for (i, pr) in probes.iter().enumerate() {
        let (x, mu, p, y) = (&pr.x[..], &pr.mu, &pr.p[..], pr.y());
        let hxp = m.h_dxp(x, mu, p);
        let hxx = m.h_dxx(x, mu, p);
        let hpp = m.h_dpp(x, mu, p);
        let hxmu = m.h_dxmu(x, mu, y, p);
        let hpmu = m.h_dpmu(x, mu, y, p);
        let gxx = m.g_dxx(x, mu);
        let gxmu = m.g_dxmu(x, mu, y);
        for (mat, what) in [
            (&hxp, "dxp H"),
            (&hxx, "dxx H"),
            (&hpp, "dpp H"),
            (&hxmu, "dx dmu H"),
            (&hpmu, "dp dmu H"),
            (&gxx, "dxx G"),
            (&gxmu, "dx dmu G"),
        ] {
            finite_matrix(mat, what)?;
        }
        let h = m.hamiltonian(x, mu, p);
        let hp = m.h_dp(x, mu, p);
        let g = m.terminal(x, mu);
        crate::error::ensure_finite(&[h, g], "H or G")?;
        crate::error::ensure_finite(&hp, "dp H")?;
        t[0].see(hxp.op_norm(), i);
        t[1].see(hxx.op_norm(), i);
        t[2].see(hpp.op_norm(), i);
        t[3].see(hxmu.op_norm(), i);
        t[4].see(hpmu.op_norm(), i);
        t[5].see(hpp.min_sym_eigenvalue(), i);
        t[6].see(dot(&hp, p) - h, i);
        t[7].see(gxx.op_norm(), i);
        t[8].see(gxmu.op_norm(), i);
        t[9].see(g, i);
        let asym = [&hpp, &hxx, &gxx]
            .iter()
            .map(|mm| mm.max_abs_diff(&mm.transpose()))
            .fold(0.0, f64::max);
        t[10].see(asym, i);
    }
    Ok(AssumptionReport {
        model: spec.name.clone(),
        probes: probes.len(),
        entries: t.into_iter().map(|tr| tr.finish(&probes)).collect(),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FdEntry {
    pub map: String,
    /// Largest `|analytic - fd| / max(1, |fd|)` over probes.
    pub max_error: f64,
    pub holds: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FdReport {
    pub tol: f64,
    pub entries: Vec<FdEntry>,
}

impl FdReport {
    pub fn all_hold(&self) -> bool {
        self.entries.iter().all(|e| e.holds)
    }

    pub fn flagged(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| !e.holds)
            .map(|e| e.map.as_str())
            .collect()
    }
}

fn rel_err(a: f64, fd: f64) -> f64 {
    (a - fd).abs() / fd.abs().max(1.0)
}

fn bumped(v: &[f64], k: usize, h: f64) -> Vector {
    let mut out: Vector = v.iter().copied().collect();
    out[k] += h;
    out
}

/// Compares every analytic derivative with central differences of the map
/// one order below. Measure derivatives use a shift of the probe atom divided
/// by its mass.
pub fn fd_consistency_check(model: &dyn Model, probes: &[Probe], tol: f64) -> Result<FdReport> {
    const NAMES: [&str; 10] = [
        "h_dx", "h_dp", "h_dxx", "h_dxp", "h_dpp", "h_dxmu", "h_dpmu", "g_dx", "g_dxx", "g_dxmu",
    ];
    let d = model.dim();
    let mut worst = [0.0f64; 10];
    for pr in probes {
        if pr.x.len() != d || pr.p.len() != d || pr.mu.dim() != d {
            return Err(Error::invalid("probe dimension does not match the model"));
        }
        let (x, mu, p) = (&pr.x[..], &pr.mu, &pr.p[..]);
        let y = pr.y().to_vec();
        let w = mu.weight(pr.atom);
        let scale = |v: &[f64]| v.iter().fold(1.0f64, |a, b| a.max(b.abs()));
        let hx = 1e-5 * scale(x);
        let hp = 1e-5 * scale(p);
        let hm = 1e-5 * scale(&y);
        let (h_dx, h_dp) = (model.h_dx(x, mu, p), model.h_dp(x, mu, p));
        let (h_dxx, h_dxp, h_dpp) = (model.h_dxx(x, mu, p), model.h_dxp(x, mu, p), model.h_dpp(x, mu, p));
        let h_dxmu = model.h_dxmu(x, mu, &y, p);
        let h_dpmu = model.h_dpmu(x, mu, &y, p);
        let g_dx = model.g_dx(x, mu);
        let g_dxx = model.g_dxx(x, mu);
        let g_dxmu = model.g_dxmu(x, mu, &y);
        for k in 0..d {
            let (xp, xm) = (bumped(x, k, hx), bumped(x, k, -hx));
            let (pp, pm) = (bumped(p, k, hp), bumped(p, k, -hp));
            let mup = mu.with_atom(pr.atom, &bumped(&y, k, hm));
            let mum = mu.with_atom(pr.atom, &bumped(&y, k, -hm));
            let fd = (model.hamiltonian(&xp, mu, p) - model.hamiltonian(&xm, mu, p)) / (2.0 * hx);
            worst[0] = worst[0].max(rel_err(h_dx[k], fd));
            let fd = (model.hamiltonian(x, mu, &pp) - model.hamiltonian(x, mu, &pm)) / (2.0 * hp);
            worst[1] = worst[1].max(rel_err(h_dp[k], fd));
            let fd = (model.terminal(&xp, mu) - model.terminal(&xm, mu)) / (2.0 * hx);
            worst[7] = worst[7].max(rel_err(g_dx[k], fd));
            // column k of each Hessian-like matrix
            let dx_up = model.h_dx(&xp, mu, p);
            let dx_dn = model.h_dx(&xm, mu, p);
            let dxp_up = model.h_dx(x, mu, &pp);
            let dxp_dn = model.h_dx(x, mu, &pm);
            let dp_up = model.h_dp(x, mu, &pp);
            let dp_dn = model.h_dp(x, mu, &pm);
            let gx_up = model.g_dx(&xp, mu);
            let gx_dn = model.g_dx(&xm, mu);
            let hmu_x_up = model.h_dx(x, &mup, p);
            let hmu_x_dn = model.h_dx(x, &mum, p);
            let hmu_p_up = model.h_dp(x, &mup, p);
            let hmu_p_dn = model.h_dp(x, &mum, p);
            let gmu_up = model.g_dx(x, &mup);
            let gmu_dn = model.g_dx(x, &mum);
            for i in 0..d {
                let c = |up: &Vector, dn: &Vector, h: f64| (up[i] - dn[i]) / (2.0 * h);
                worst[2] = worst[2].max(rel_err(h_dxx.get(i, k), c(&dx_up, &dx_dn, hx)));
                worst[3] = worst[3].max(rel_err(h_dxp.get(i, k), c(&dxp_up, &dxp_dn, hp)));
                worst[4] = worst[4].max(rel_err(h_dpp.get(i, k), c(&dp_up, &dp_dn, hp)));
                worst[8] = worst[8].max(rel_err(g_dxx.get(i, k), c(&gx_up, &gx_dn, hx)));
                worst[5] = worst[5].max(rel_err(h_dxmu.get(i, k), c(&hmu_x_up, &hmu_x_dn, hm) / w));
                worst[6] = worst[6].max(rel_err(h_dpmu.get(i, k), c(&hmu_p_up, &hmu_p_dn, hm) / w));
                worst[9] = worst[9].max(rel_err(g_dxmu.get(i, k), c(&gmu_up, &gmu_dn, hm) / w));
            }
        }
    }
    Ok(FdReport {
        tol,
        entries: NAMES
            .iter()
            .zip(worst)
            .map(|(n, e)| FdEntry {
                map: n.to_string(),
                max_error: e,
                holds: e <= tol,
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{bundled_names, bundled_spec, BundledParams, QuadraticFamily};

    #[test]
    fn bundled_models_satisfy_their_constants() {
        for name in bundled_names() {
            let spec = bundled_spec(name, &BundledParams::default()).unwrap();
            let rep = validate_assumptions(&spec, &ProbeSampler::default()).unwrap();
            assert!(rep.all_hold(), "{name}: {:?}", rep.violations().collect::<Vec<_>>());
        }
    }

    #[test]
    fn bundled_derivatives_match_finite_differences() {
        let probes = ProbeSampler {
            count: 50,
            ..Default::default()
        };
        for dim in [1, 2] {
            for name in bundled_names() {
                let spec = bundled_spec(name, &BundledParams { dim, ..Default::default() }).unwrap();
                let rep = fd_consistency_check(spec.maps.as_ref(), &probes.draw(dim).unwrap(), 1e-4)
                    .unwrap();
                assert!(rep.all_hold(), "{name} d={dim}: {:?}", rep.entries);
            }
        }
    }

    /// `g_dx` deliberately off by a factor of two.
    struct Broken(QuadraticFamily);

    macro_rules! delegate {
        ($($f:ident($($a:ident: $t:ty),*) -> $r:ty;)*) => {
            $(fn $f(&self, $($a: $t),*) -> $r { self.0.$f($($a),*) })*
        };
    }

    impl Model for Broken {
        fn name(&self) -> &str {
            "broken"
        }
        fn dim(&self) -> usize {
            self.0.dim
        }
        delegate! {
            hamiltonian(x: &[f64], mu: &EmpiricalMeasure, p: &[f64]) -> f64;
            h_dx(x: &[f64], mu: &EmpiricalMeasure, p: &[f64]) -> Vector;
            h_dp(x: &[f64], mu: &EmpiricalMeasure, p: &[f64]) -> Vector;
            h_dxx(x: &[f64], mu: &EmpiricalMeasure, p: &[f64]) -> Matrix;
            h_dxp(x: &[f64], mu: &EmpiricalMeasure, p: &[f64]) -> Matrix;
            h_dpp(x: &[f64], mu: &EmpiricalMeasure, p: &[f64]) -> Matrix;
            h_dxmu(x: &[f64], mu: &EmpiricalMeasure, y: &[f64], p: &[f64]) -> Matrix;
            h_dpmu(x: &[f64], mu: &EmpiricalMeasure, y: &[f64], p: &[f64]) -> Matrix;
            terminal(x: &[f64], mu: &EmpiricalMeasure) -> f64;
            g_dxx(x: &[f64], mu: &EmpiricalMeasure) -> Matrix;
            g_dxmu(x: &[f64], mu: &EmpiricalMeasure, y: &[f64]) -> Matrix;
        }
        fn g_dx(&self, x: &[f64], mu: &EmpiricalMeasure) -> Vector {
            self.0.g_dx(x, mu).iter().map(|v| 2.0 * v).collect()
        }
    }

    #[test]
    fn injected_fault_is_flagged() {
        let m = Broken(QuadraticFamily::linear_quadratic(1, 1.0, 0.5, 0.5));
        let probes = ProbeSampler {
            count: 20,
            ..Default::default()
        }
        .draw(1)
        .unwrap();
        let rep = fd_consistency_check(&m, &probes, 1e-4).unwrap();
        // the derived checks difference g_dx itself, so they fail with it
        let flagged = rep.flagged();
        assert!(flagged.contains(&"g_dx"), "{flagged:?}");
        assert!(flagged.iter().all(|f| f.starts_with("g_dx")), "{flagged:?}");
    }

    #[test]
    fn weak_convexity_is_reported() {
        let spec = bundled_spec("lq", &BundledParams::default()).unwrap();
        let mut strict = spec.clone();
        // dpp H = I has eigenvalue 0.5 c0 when c0 = 2
        strict.constants.c0 = 2.0;
        let rep = validate_assumptions(&strict, &ProbeSampler::default()).unwrap();
        let bad: Vec<_> = rep.violations().map(|e| e.name.clone()).collect();
        assert_eq!(bad, vec!["dpp H >= c0 I".to_string()]);
        assert!(rep.entries.iter().find(|e| !e.holds).unwrap().witness.is_some());
    }
}
