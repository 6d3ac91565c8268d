//! Synthetic spatio-temporal scenarios: latent fields, stratified surveys and preferential
//! point patterns on a regular lattice.
//!
//! Every random stream is seeded with `derive_seed(seed, stream)`, where `stream` packs a
//! purpose tag in the high 32 bits and the time node in the low 32 bits. Time nodes are
//! simulated in parallel and the output does not depend on the thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Gamma, Normal, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmrf::precision::lattice_matern;
use crate::gmrf::GaussianDensity;
use crate::model::{DataTable, Family};

/// Log-intensities above this are rejected as overflow.
pub const MAX_LOG_INTENSITY: f64 = 50.0;

const SPATIAL: u64 = 1;
const TEMPORAL: u64 = 2;
const COVARIATE: u64 = 3;
const STRATIFIED: u64 = 4;
const LGCP: u64 = 5;
const MARKS: u64 = 6;

/// SplitMix64 finalizer of `seed ⊕ stream·φ`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn rng(seed: u64, tag: u64, t: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, (tag << 32) | t as u64))
}

/// Rectangle `(0, width) × (0, height)` split into `nx × ny` square lattice cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Domain {
    pub width: f64,
    pub height: f64,
    pub nx: usize,
    pub ny: usize,
}

impl Domain {
    pub fn nodes(&self) -> usize {
        self.nx * self.ny
    }

    pub fn spacing(&self) -> f64 {
        self.width / self.nx as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.spacing() * self.spacing()
    }

    /// Lattice node whose cell contains `(x, y)`.
    pub fn node_of(&self, x: f64, y: f64) -> usize {
        let h = self.spacing();
        let ix = ((x / h) as usize).min(self.nx - 1);
        let iy = ((y / h) as usize).min(self.ny - 1);
        ix * self.ny + iy
    }

    /// Lower-left corner of the cell of a node.
    pub fn cell_origin(&self, node: usize) -> (f64, f64) {
        let h = self.spacing();
        ((node / self.ny) as f64 * h, (node % self.ny) as f64 * h)
    }
}

/// How the spatial and temporal components combine over time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    /// Independent spatial realisations with common hyperparameters, `u_st = w_st`.
    Replicated,
    /// One spatial field plus iid temporal noise, `u_st = w_s + v_t`.
    PersistentIid,
    /// One spatial field plus an RW2 trend, `u_st = w_s + f_t`.
    PersistentTrend,
    /// Replicated spatial fields plus an RW2 trend, `u_st = w_st + f_t`.
    Progressive,
    /// Spatial field evolving as a unit-variance AR1 in time (Matérn ⊗ AR1 precision).
    SeparableAr1,
}

impl Structure {
    fn replicated_space(self) -> bool {
        matches!(self, Structure::Replicated | Structure::Progressive | Structure::SeparableAr1)
    }
}

/// Parameters of the simulated truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrueParams {
    pub b0: f64,
    pub b1: f64,
    /// Gamma shape or Gaussian precision of the survey responses.
    pub obs_precision: f64,
    pub range: f64,
    /// Marginal sd of the spatial field; 0 disables it.
    pub sd: f64,
    /// Precision of the temporal component (RW2 increments or iid noise).
    pub tau_t: f64,
    /// AR1 correlation for `separable_ar1`.
    #[serde(default)]
    pub rho: f64,
    /// Scale of the temporal component in the point-process predictor.
    #[serde(default = "one")]
    pub alpha: f64,
    #[serde(default = "default_covariate_range")]
    pub covariate_range: f64,
}

fn one() -> f64 {
    1.0
}

fn default_covariate_range() -> f64 {
    5.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StratifiedPlan {
    pub cells_x: usize,
    pub cells_y: usize,
    pub per_cell: usize,
    #[serde(default = "gamma")]
    pub family: Family,
}

fn gamma() -> Family {
    Family::Gamma
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferentialPlan {
    /// Expected number of points over all cells and time nodes.
    pub target_count: f64,
    /// Family of the marks recorded at the points.
    #[serde(default = "gamma")]
    pub family: Family,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub domain: Domain,
    pub time_nodes: usize,
    pub structure: Structure,
    pub truth: TrueParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stratified: Option<StratifiedPlan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preferential: Option<PreferentialPlan>,
}

/// Parses and validates a scenario document.
pub fn parse_scenario(text: &str) -> Result<Scenario> {
    let s: Scenario = toml::from_str(text).map_err(|e| crate::model::spec::toml_error(text, &e, "scenario"))?;
    s.validate()?;
    Ok(s)
}

impl Scenario {
    /// Two gamma surveys of a persistent field with an RW2 trend: stratified random and
    /// preferential through a point pattern sharing the field and the scaled trend.
    pub fn preferential_example() -> Self {
        Scenario {
            domain: Domain { width: 10.0, height: 10.0, nx: 10, ny: 10 },
            time_nodes: 10,
            structure: Structure::PersistentTrend,
            truth: TrueParams {
                b0: 1.0,
                b1: 0.5,
                obs_precision: 3.0,
                range: 3.0,
                sd: 1.0,
                tau_t: 10.0,
                rho: 0.0,
                alpha: 0.7,
                covariate_range: 5.0,
            },
            stratified: Some(StratifiedPlan { cells_x: 5, cells_y: 5, per_cell: 10, family: Family::Gamma }),
            preferential: Some(PreferentialPlan { target_count: 2500.0, family: Family::Gamma }),
        }
    }

    /// Gaussian readings at every lattice cell and time node of a Matérn ⊗ AR1 field.
    pub fn space_time_example() -> Self {
        Scenario {
            domain: Domain { width: 10.0, height: 10.0, nx: 5, ny: 5 },
            time_nodes: 60,
            structure: Structure::SeparableAr1,
            truth: TrueParams {
                b0: 15.0,
                b1: 0.0,
                obs_precision: 4.0,
                range: 4.0,
                sd: 1.0,
                tau_t: 1.0,
                rho: 0.8,
                alpha: 1.0,
                covariate_range: 5.0,
            },
            stratified: Some(StratifiedPlan { cells_x: 5, cells_y: 5, per_cell: 1, family: Family::Gaussian }),
            preferential: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.domain;
        if d.nx < 4 || d.ny < 4 {
            return Err(Error::config("domain", "lattice resolution must be at least 4×4"));
        }
        if !(d.width > 0.0) || !(d.height > 0.0) || (d.width / d.nx as f64 - d.height / d.ny as f64).abs() > 1e-9 * d.width {
            return Err(Error::config("domain", "lattice cells must be square with positive size"));
        }
        if self.time_nodes == 0 {
            return Err(Error::config("time_nodes", "at least one time node is required"));
        }
        if matches!(self.structure, Structure::PersistentTrend | Structure::Progressive) && self.time_nodes < 3 {
            return Err(Error::config("structure", "an RW2 trend needs at least 3 time nodes"));
        }
        let t = &self.truth;
        let positive = [("obs_precision", t.obs_precision), ("range", t.range), ("tau_t", t.tau_t), ("covariate_range", t.covariate_range)];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::config(format!("truth.{name}"), "must be positive and finite"));
            }
        }
        if !(t.sd >= 0.0) || !t.sd.is_finite() {
            return Err(Error::config("truth.sd", "must be non-negative and finite"));
        }
        if !(t.rho.abs() < 1.0) {
            return Err(Error::config("truth.rho", "must lie in (-1, 1)"));
        }
        if ![t.b0, t.b1, t.alpha].iter().all(|v| v.is_finite()) {
            return Err(Error::config("truth", "coefficients must be finite"));
        }
        if let Some(p) = &self.stratified {
            if p.cells_x == 0 || p.cells_y == 0 || p.per_cell == 0 {
                return Err(Error::config("stratified", "cells and per-cell counts must be positive"));
            }
            check_family(p.family, "stratified.family")?;
        }
        if let Some(p) = &self.preferential {
            if !(p.target_count > 0.0) || !p.target_count.is_finite() {
                return Err(Error::config("preferential.target_count", "must be positive"));
            }
            check_family(p.family, "preferential.family")?;
        }
        Ok(())
    }
}

fn check_family(f: Family, loc: &str) -> Result<()> {
    if f == Family::LgcpLattice {
        return Err(Error::config(loc, "responses cannot be drawn from lgcp_lattice"));
    }
    Ok(())
}

/// Simulated latent truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub params: TrueParams,
    pub structure: Structure,
    pub nodes: usize,
    pub time_nodes: usize,
    /// Spatial component, `nodes` values or `nodes` per time node (time-major) when replicated.
    pub spatial: Vec<f64>,
    /// Temporal component per time node.
    pub temporal: Vec<f64>,
    /// Covariate per lattice node.
    pub covariate: Vec<f64>,
}

impl Truth {
    pub fn spatial_at(&self, node: usize, t: usize) -> f64 {
        if self.structure.replicated_space() {
            self.spatial[t * self.nodes + node]
        } else {
            self.spatial[node]
        }
    }

    /// Linear predictor of the survey responses.
    pub fn eta(&self, node: usize, t: usize) -> f64 {
        let p = &self.params;
        p.b0 + p.b1 * self.covariate[node] + self.temporal[t] + self.spatial_at(node, t)
    }

    /// True values of the random effects, keyed as in the example models: `u` for a spatial
    /// field that persists over time, `f` for the temporal component, and `st` for a field that
    /// changes with time, indexed `node · time_nodes + t`.
    pub fn effects(&self) -> std::collections::BTreeMap<String, Vec<f64>> {
        let mut out = std::collections::BTreeMap::new();
        if self.structure.replicated_space() {
            let st = (0..self.nodes).flat_map(|s| (0..self.time_nodes).map(move |t| (s, t))).map(|(s, t)| self.spatial_at(s, t)).collect();
            out.insert("st".to_string(), st);
        } else {
            out.insert("u".to_string(), self.spatial.clone());
        }
        if !matches!(self.structure, Structure::Replicated | Structure::SeparableAr1) {
            out.insert("f".to_string(), self.temporal.clone());
        }
        out
    }

    /// Point-process predictor without its intercept.
    pub fn shared_log_intensity(&self, node: usize, t: usize) -> f64 {
        self.params.alpha * self.temporal[t] + self.spatial_at(node, t)
    }
}

fn matern_draws(domain: &Domain, range: f64, sd: f64, seed: u64, tag: u64, count: usize) -> Result<Vec<Vec<f64>>> {
    let n = domain.nodes();
    if sd == 0.0 {
        return Ok(vec![vec![0.0; n]; count]);
    }
    let q = lattice_matern::<f64>(domain.nx, domain.ny, domain.spacing(), range.ln(), sd.ln())?;
    let factor = GaussianDensity::with_indexed_labels(vec![0.0; n], q, "w")?.into_factored()?;
    Ok((0..count).into_par_iter().map(|t| factor.sample(&mut rng(seed, tag, t))).collect())
}

/// RW2 path with the null space `{1, t}` projected out.
fn rw2_path(n: usize, tau: f64, seed: u64) -> Vec<f64> {
    let mut r = rng(seed, TEMPORAL, 0);
    let s = tau.sqrt().recip();
    let mut f = vec![0.0; n];
    for t in 2..n {
        let e: f64 = r.sample(StandardNormal);
        f[t] = 2.0 * f[t - 1] - f[t - 2] + s * e;
    }
    let tm = (n - 1) as f64 / 2.0;
    let mean = f.iter().sum::<f64>() / n as f64;
    let sxx: f64 = (0..n).map(|t| (t as f64 - tm).powi(2)).sum();
    let slope = (0..n).map(|t| (t as f64 - tm) * f[t]).sum::<f64>() / sxx;
    (0..n).map(|t| f[t] - mean - slope * (t as f64 - tm)).collect()
}

/// Draws the latent components of a scenario.
pub fn simulate_truth(scenario: &Scenario, seed: u64) -> Result<Truth> {
    scenario.validate()?;
    let (d, p, nt) = (&scenario.domain, &scenario.truth, scenario.time_nodes);
    let s = scenario.structure;
    let reps = if s.replicated_space() { nt } else { 1 };
    let mut draws = matern_draws(d, p.range, p.sd, seed, SPATIAL, reps)?;
    if s == Structure::SeparableAr1 {
        let c = (1.0 - p.rho * p.rho).sqrt();
        for t in 1..nt {
            let (prev, cur) = draws.split_at_mut(t);
            for (x, w) in cur[0].iter_mut().zip(&prev[t - 1]) {
                *x = p.rho * w + c * *x;
            }
        }
    }
    let temporal = match s {
        Structure::PersistentTrend | Structure::Progressive => rw2_path(nt, p.tau_t, seed),
        Structure::PersistentIid => {
            let mut r = rng(seed, TEMPORAL, 0);
            let nd = Normal::new(0.0, p.tau_t.sqrt().recip()).expect("positive sd");
            (0..nt).map(|_| nd.sample(&mut r)).collect()
        }
        Structure::Replicated | Structure::SeparableAr1 => vec![0.0; nt],
    };
    let covariate = matern_draws(d, p.covariate_range, 1.0, seed, COVARIATE, 1)?.pop().unwrap();
    Ok(Truth {
        params: p.clone(),
        structure: s,
        nodes: d.nodes(),
        time_nodes: nt,
        spatial: draws.concat(),
        temporal,
        covariate,
    })
}

fn draw_response<R: Rng>(family: Family, eta: f64, precision: f64, r: &mut R) -> f64 {
    match family {
        Family::Gaussian => eta + precision.sqrt().recip() * r.sample::<f64, _>(StandardNormal),
        Family::Gamma => Gamma::new(precision, eta.exp() / precision).expect("valid gamma").sample(r),
        Family::Poisson => poisson(eta.exp(), r),
        Family::Bernoulli => Bernoulli::new(1.0 / (1.0 + (-eta).exp())).expect("probability").sample(r) as u8 as f64,
        Family::LgcpLattice => unreachable!("rejected by validation"),
    }
}

fn poisson<R: Rng>(mean: f64, r: &mut R) -> f64 {
    if mean > 0.0 {
        Poisson::new(mean).expect("finite positive mean").sample(r)
    } else {
        0.0
    }
}

/// Rows of one survey: locations, time, lattice cell, covariate and response.
struct Rows {
    x: Vec<f64>,
    y: Vec<f64>,
    time: Vec<f64>,
    cell: Vec<f64>,
    covariate: Vec<f64>,
    response: Vec<f64>,
}

impl Rows {
    fn concat(parts: Vec<Rows>) -> Rows {
        let mut out = Rows { x: vec![], y: vec![], time: vec![], cell: vec![], covariate: vec![], response: vec![] };
        for p in parts {
            out.x.extend(p.x);
            out.y.extend(p.y);
            out.time.extend(p.time);
            out.cell.extend(p.cell);
            out.covariate.extend(p.covariate);
            out.response.extend(p.response);
        }
        out
    }

    fn into_table(self, name: &str) -> Result<DataTable> {
        let cols = vec![
            ("x_coord".into(), self.x),
            ("y_coord".into(), self.y),
            ("time".into(), self.time),
            ("cell".into(), self.cell),
            ("x".into(), self.covariate),
            ("y".into(), self.response),
        ];
        DataTable::new(name, cols)
    }
}

/// Uniform locations within each stratum, `per_cell` per stratum and time node, with responses
/// drawn from the plan's family. The table is named `srs`.
pub fn stratified_sampling(scenario: &Scenario, truth: &Truth, seed: u64) -> Result<DataTable> {
    let plan = scenario.stratified.as_ref().ok_or_else(|| Error::config("stratified", "scenario has no stratified plan"))?;
    let d = &scenario.domain;
    let (wx, wy) = (d.width / plan.cells_x as f64, d.height / plan.cells_y as f64);
    let parts: Vec<Rows> = (0..scenario.time_nodes)
        .into_par_iter()
        .map(|t| {
            let mut r = rng(seed, STRATIFIED, t);
            let n = plan.cells_x * plan.cells_y * plan.per_cell;
            let mut rows = Rows { x: vec![], y: vec![], time: vec![t as f64; n], cell: vec![], covariate: vec![], response: vec![] };
            for cx in 0..plan.cells_x {
                for cy in 0..plan.cells_y {
                    for _ in 0..plan.per_cell {
                        let x = (cx as f64 + r.random::<f64>()) * wx;
                        let y = (cy as f64 + r.random::<f64>()) * wy;
                        let node = d.node_of(x, y);
                        rows.x.push(x);
                        rows.y.push(y);
                        rows.cell.push(node as f64);
                        rows.covariate.push(truth.covariate[node]);
                        rows.response.push(draw_response(plan.family, truth.eta(node, t), truth.params.obs_precision, &mut r));
                    }
                }
            }
            rows
        })
        .collect();
    Rows::concat(parts).into_table("srs")
}

/// Intercept making the expected total count of a lattice point process equal `target_count`:
/// `log Λ − log Σ exp(ηᵢ) Δᵢ`.
pub fn calibrate_lgcp_intercept(target_count: f64, shared_eta: &[f64], areas: &[f64]) -> Result<f64> {
    if shared_eta.is_empty() {
        return Err(Error::Simulation("cannot calibrate an empty lattice".into()));
    }
    if shared_eta.len() != areas.len() {
        return Err(Error::Dimension(format!("{} log-intensities but {} areas", shared_eta.len(), areas.len())));
    }
    if !(target_count > 0.0) || !target_count.is_finite() {
        return Err(Error::Simulation(format!("target count must be positive, got {target_count}")));
    }
    if areas.iter().any(|a| !(*a > 0.0) || !a.is_finite()) {
        return Err(Error::Simulation("cell areas must be positive".into()));
    }
    let terms: Vec<f64> = shared_eta.iter().zip(areas).map(|(e, a)| e + a.ln()).collect();
    let top = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return Err(Error::Simulation("every cell has zero intensity".into()));
    }
    let lse = top + terms.iter().map(|v| (v - top).exp()).sum::<f64>().ln();
    Ok(target_count.ln() - lse)
}

/// Poisson counts with means `exp(ηᵢ) Δᵢ`; `η = −∞` marks an empty cell.
pub fn simulate_lgcp(log_intensity: &[f64], areas: &[f64], seed: u64) -> Result<Vec<u64>> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    lgcp_counts(log_intensity, areas, &mut r)
}

fn lgcp_counts<R: Rng>(log_intensity: &[f64], areas: &[f64], r: &mut R) -> Result<Vec<u64>> {
    if log_intensity.len() != areas.len() {
        return Err(Error::Dimension(format!("{} log-intensities but {} areas", log_intensity.len(), areas.len())));
    }
    log_intensity
        .iter()
        .zip(areas)
        .enumerate()
        .map(|(i, (&e, &a))| {
            if e.is_nan() || e > MAX_LOG_INTENSITY {
                return Err(Error::Simulation(format!("log-intensity {e} in cell {i} overflows (limit {MAX_LOG_INTENSITY})")));
            }
            if !(a > 0.0) {
                return Err(Error::Simulation(format!("cell {i} has non-positive area {a}")));
            }
            Ok(poisson(e.exp() * a, r) as u64)
        })
        .collect()
}

/// Preferentially sampled survey.
#[derive(Debug, Clone)]
pub struct PreferentialSample {
    /// Calibrated point-process intercept.
    pub intercept: f64,
    /// Marks at the points, named `ps`.
    pub points: DataTable,
    /// Point counts per lattice cell and time node, named `counts`, with `log_area` offsets.
    pub counts: DataTable,
}

/// Points from the lattice Cox process `β₀* + α f_t + u`, placed uniformly within their cells, with
/// marks from the survey predictor at each point.
pub fn preferential_sampling(scenario: &Scenario, truth: &Truth, seed: u64) -> Result<PreferentialSample> {
    let plan = scenario.preferential.as_ref().ok_or_else(|| Error::config("preferential", "scenario has no preferential plan"))?;
    let d = &scenario.domain;
    let (n, nt) = (d.nodes(), scenario.time_nodes);
    let shared: Vec<f64> = (0..nt).flat_map(|t| (0..n).map(move |s| (s, t))).map(|(s, t)| truth.shared_log_intensity(s, t)).collect();
    let area = d.cell_area();
    let intercept = calibrate_lgcp_intercept(plan.target_count, &shared, &vec![area; n * nt])?;
    let h = d.spacing();
    let parts: Vec<(Vec<u64>, Rows)> = (0..nt)
        .into_par_iter()
        .map(|t| {
            let eta: Vec<f64> = shared[t * n..(t + 1) * n].iter().map(|v| v + intercept).collect();
            let counts = lgcp_counts(&eta, &vec![area; n], &mut rng(seed, LGCP, t))?;
            let mut r = rng(seed, MARKS, t);
            let mut rows = Rows { x: vec![], y: vec![], time: vec![], cell: vec![], covariate: vec![], response: vec![] };
            for (node, &c) in counts.iter().enumerate() {
                let (x0, y0) = d.cell_origin(node);
                for _ in 0..c {
                    rows.x.push(x0 + h * r.random::<f64>());
                    rows.y.push(y0 + h * r.random::<f64>());
                    rows.time.push(t as f64);
                    rows.cell.push(node as f64);
                    rows.covariate.push(truth.covariate[node]);
                    rows.response.push(draw_response(plan.family, truth.eta(node, t), truth.params.obs_precision, &mut r));
                }
            }
            Ok((counts, rows))
        })
        .collect::<Result<_>>()?;
    let (counts, rows): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
    let counts = counts.concat();
    let cols = vec![
        ("cell".into(), (0..nt).flat_map(|_| (0..n).map(|s| s as f64)).collect()),
        ("time".into(), (0..nt).flat_map(|t| std::iter::repeat_n(t as f64, n)).collect()),
        ("x".into(), (0..nt).flat_map(|_| truth.covariate.iter().copied()).collect()),
        ("count".into(), counts.iter().map(|&c| c as f64).collect()),
        ("log_area".into(), vec![area.ln(); n * nt]),
    ];
    Ok(PreferentialSample { intercept, points: Rows::concat(rows).into_table("ps")?, counts: DataTable::new("counts", cols)? })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_are_reproducible() {
        let s = Scenario::preferential_example();
        let a = simulate_truth(&s, 4).unwrap();
        assert_eq!(a, simulate_truth(&s, 4).unwrap());
        assert_ne!(a.spatial, simulate_truth(&s, 5).unwrap().spatial);
        let t1 = stratified_sampling(&s, &a, 9).unwrap();
        assert_eq!(t1, stratified_sampling(&s, &a, 9).unwrap());
        let p1 = preferential_sampling(&s, &a, 9).unwrap();
        let p2 = preferential_sampling(&s, &a, 9).unwrap();
        assert_eq!((p1.points, p1.counts), (p2.points, p2.counts));
    }

    #[test]
    fn result_does_not_depend_on_threads() {
        let s = Scenario::preferential_example();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let (a, t) = pool.install(|| {
            let a = simulate_truth(&s, 2).unwrap();
            let t = stratified_sampling(&s, &a, 3).unwrap();
            (a, t)
        });
        let b = simulate_truth(&s, 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(t, stratified_sampling(&s, &b, 3).unwrap());
    }

    #[test]
    fn zero_sd_gives_flat_field() {
        let mut s = Scenario::preferential_example();
        s.truth.sd = 0.0;
        let t = simulate_truth(&s, 1).unwrap();
        assert!(t.spatial.iter().all(|v| *v == t.spatial[0]));
    }

    #[test]
    fn trend_satisfies_constraints() {
        let t = simulate_truth(&Scenario::preferential_example(), 3).unwrap();
        let f = &t.temporal;
        assert!(f.iter().sum::<f64>().abs() < 1e-12);
        assert!(f.iter().enumerate().map(|(i, v)| i as f64 * v).sum::<f64>().abs() < 1e-10);
        assert!(f.iter().any(|v| v.abs() > 1e-3));
    }

    #[test]
    fn stratified_plan_shape() {
        let s = Scenario::preferential_example();
        let truth = simulate_truth(&s, 1).unwrap();
        let t = stratified_sampling(&s, &truth, 1).unwrap();
        assert_eq!(t.nrows(), 2500);
        let (x, y, time) = (t.column("x_coord").unwrap(), t.column("y_coord").unwrap(), t.column("time").unwrap());
        for tn in 0..10 {
            for cx in 0..5 {
                for cy in 0..5 {
                    let n = (0..t.nrows())
                        .filter(|&i| time[i] == tn as f64 && (x[i] / 2.0) as usize == cx && (y[i] / 2.0) as usize == cy)
                        .count();
                    assert_eq!(n, 10);
                }
            }
        }
        assert!(t.column("y").unwrap().iter().all(|v| *v > 0.0));
    }

    #[test]
    fn single_sample_lies_in_domain() {
        let mut s = Scenario::preferential_example();
        s.time_nodes = 3;
        s.stratified = Some(StratifiedPlan { cells_x: 1, cells_y: 1, per_cell: 1, family: Family::Gaussian });
        s.time_nodes = 1;
        s.structure = Structure::Replicated;
        let truth = simulate_truth(&s, 1).unwrap();
        let t = stratified_sampling(&s, &truth, 1).unwrap();
        assert_eq!(t.nrows(), 1);
        let (x, y) = (t.column("x_coord").unwrap()[0], t.column("y_coord").unwrap()[0]);
        assert!((0.0..10.0).contains(&x) && (0.0..10.0).contains(&y));
        let node = t.column("cell").unwrap()[0] as usize;
        assert_eq!(node, s.domain.node_of(x, y));
    }

    #[test]
    fn calibration_identities() {
        let b = calibrate_lgcp_intercept(2500.0, &[0.0; 100], &[1.0; 100]).unwrap();
        assert!((b - 25f64.ln()).abs() < 1e-12);
        assert!((b - 3.218876).abs() < 1e-6);
        let c = 1.7;
        let shifted = calibrate_lgcp_intercept(2500.0, &[c; 100], &[1.0; 100]).unwrap();
        assert!((shifted - (2500f64.ln() - 100f64.ln() - c)).abs() < 1e-12);
        assert!(calibrate_lgcp_intercept(10.0, &[], &[]).is_err());
        assert!(calibrate_lgcp_intercept(10.0, &[0.0], &[0.0]).is_err());
    }

    #[test]
    fn masked_cells_have_no_points() {
        let c = simulate_lgcp(&[f64::NEG_INFINITY; 50], &[1.0; 50], 1).unwrap();
        assert!(c.iter().all(|&v| v == 0));
    }

    #[test]
    fn overflow_is_rejected() {
        let e = simulate_lgcp(&[0.0, 51.0], &[1.0, 1.0], 1);
        assert!(matches!(e, Err(Error::Simulation(_))));
    }

    #[test]
    fn homogeneous_counts() {
        let eta = vec![4f64.ln(); 100];
        for seed in 0..20 {
            let total: u64 = simulate_lgcp(&eta, &[1.0; 100], seed).unwrap().iter().sum();
            assert!((total as f64 - 400.0).abs() < 3.0 * 20.0);
        }
    }

    #[test]
    fn doubling_areas_doubles_counts() {
        let eta = vec![0.5; 200];
        let mean = |a: f64| (0..100).map(|s| simulate_lgcp(&eta, &vec![a; 200], s).unwrap().iter().sum::<u64>() as f64).sum::<f64>() / 100.0;
        let (m1, m2) = (mean(1.0), mean(2.0));
        // expectations 329.7 and 659.5; Monte Carlo sd of each mean below 2.6
        assert!((m2 / m1 - 2.0).abs() < 0.05, "{m1} {m2}");
    }

    #[test]
    fn scenario_config_round_trip() {
        let s = Scenario::preferential_example();
        let text = toml::to_string(&s).unwrap();
        assert_eq!(parse_scenario(&text).unwrap(), s);
        let bad = text.replace("nx = 10", "nx = 3");
        let e = parse_scenario(&bad).unwrap_err();
        assert!(e.to_string().contains("domain"), "{e}");
    }
}
