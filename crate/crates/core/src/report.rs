//! Line-delimited result files and comparisons between fits.
//!
//! A result file holds one JSON record per line, tagged by `kind`:
//!
//! | kind          | fields                                                                                  |
//! |---------------|-----------------------------------------------------------------------------------------|
//! | `fixed`       | `name`, `mean`, `sd`                                                                    |
//! | `hyper_mode`  | `name`, `value` (natural scale)                                                         |
//! | `hyper_point` | `index`, `theta` (internal scale, by name), `log_density`, `weight`                     |
//! | `effect_node` | `effect`, `node`, `pooling`, `selected`, `mean`, `sd`, `precision_diag`, `precision_exact` |
//! | `alpha`       | `name`, `source`, `point`, `mean`, `sd`, `node_count`, `filtered`, `used`               |
//!
//! `pooling` is `none` for effects estimated by a single fit, otherwise `multivariate` or
//! `marginal`; exactly one convention per node has `selected = true`. Result files carry no
//! timings, so identical inputs give identical bytes. Timings and per-step diagnostics go to
//! a separate log of `step` and `timing` records.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infer::{BlockFitResult, HyperGridPosterior, NodeMarginal};
use crate::model::ModelSpec;
use crate::sequential::{ConsensusReport, EffectConsensus, Pass, Pooling, StepRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingTag {
    None,
    Multivariate,
    Marginal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Fixed {
        name: String,
        mean: f64,
        sd: f64,
    },
    HyperMode {
        name: String,
        value: f64,
    },
    HyperPoint {
        index: usize,
        theta: BTreeMap<String, f64>,
        log_density: f64,
        weight: f64,
    },
    EffectNode {
        effect: String,
        node: usize,
        pooling: PoolingTag,
        selected: bool,
        mean: f64,
        sd: f64,
        precision_diag: f64,
        precision_exact: f64,
    },
    Alpha {
        name: String,
        source: String,
        point: f64,
        mean: f64,
        sd: f64,
        node_count: usize,
        filtered: usize,
        used: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step(StepRecord),
    /// Wall-clock seconds of one phase, rounded to milliseconds.
    Timing { phase: String, seconds: f64 },
}

pub fn round_ms(seconds: f64) -> f64 {
    (seconds * 1000.0).round() / 1000.0
}

fn node_records(out: &mut Vec<Record>, effect: &str, pooling: PoolingTag, selected: bool, marginals: &[NodeMarginal]) {
    for (node, m) in marginals.iter().enumerate() {
        out.push(Record::EffectNode {
            effect: effect.to_string(),
            node,
            pooling,
            selected,
            mean: m.mean,
            sd: m.sd(),
            precision_diag: m.precision_diag,
            precision_exact: m.precision_exact,
        });
    }
}

fn grid_records(out: &mut Vec<Record>, g: &HyperGridPosterior) {
    for (index, p) in g.points.iter().enumerate() {
        let theta = g.names.iter().cloned().zip(p.iter().copied()).collect();
        out.push(Record::HyperPoint { index, theta, log_density: g.log_density[index], weight: g.weights[index] });
    }
}

fn fixed_records(out: &mut Vec<Record>, fixed: &BTreeMap<String, crate::infer::Marginal>) {
    for (name, m) in fixed {
        out.push(Record::Fixed { name: name.clone(), mean: m.mean, sd: m.sd() });
    }
}

/// Records of a single fit of the whole model.
pub fn full_records(fit: &BlockFitResult) -> Vec<Record> {
    let mut out = Vec::new();
    fixed_records(&mut out, &fit.fixed_marginals);
    for (name, v) in &fit.theta_mode {
        out.push(Record::HyperMode { name: name.clone(), value: *v });
    }
    grid_records(&mut out, &fit.hyper_posterior);
    for (name, m) in &fit.effect_marginals {
        node_records(&mut out, name, PoolingTag::None, true, m);
    }
    out
}

fn effect_records(out: &mut Vec<Record>, name: &str, e: &EffectConsensus, pooling: Pooling) {
    match (&e.averaged, &e.product_marginals) {
        (Some(avg), Some(prod)) => {
            let avg: Vec<NodeMarginal> = avg.iter().map(|m| NodeMarginal { mean: m.mean, precision_diag: m.precision, precision_exact: m.precision }).collect();
            node_records(out, name, PoolingTag::Multivariate, pooling == Pooling::Multivariate, prod);
            node_records(out, name, PoolingTag::Marginal, pooling == Pooling::Marginal, &avg);
        }
        _ => node_records(out, name, PoolingTag::None, true, &e.marginals),
    }
}

/// Records of a sequential run; effects come from its last pass.
pub fn consensus_records(spec: &ModelSpec, report: &ConsensusReport, pooling: Pooling) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    fixed_records(&mut out, &report.fixed_marginals);
    let pass = report.second.as_ref().unwrap_or(&report.first);
    let mut modes = BTreeMap::new();
    for fit in &pass.fits {
        modes.extend(fit.theta_mode.iter().map(|(k, v)| (k.clone(), *v)));
    }
    if let Some(g) = &report.hyper_posterior {
        let bindings = spec.hyper_bindings()?;
        for (name, v) in g.names.iter().zip(&g.mode) {
            let base = name.split('@').next().unwrap_or(name);
            let role = bindings.get(name).or_else(|| bindings.get(base)).ok_or_else(|| Error::Results(format!("unknown hyperparameter `{name}`")))?;
            modes.insert(name.clone(), role.to_natural(*v));
        }
        grid_records(&mut out, g);
    }
    for (name, value) in modes {
        out.push(Record::HyperMode { name, value });
    }
    for (name, e) in report.effects() {
        effect_records(&mut out, name, e, pooling);
    }
    for (name, a) in report.alpha() {
        let g = a.estimate.gaussian;
        out.push(Record::Alpha {
            name: name.clone(),
            source: a.source.clone(),
            point: a.estimate.point,
            mean: g.mean,
            sd: g.sd(),
            node_count: a.estimate.node_count,
            filtered: a.estimate.filtered,
            used: a.used,
        });
    }
    Ok(out)
}

/// Step log and timings of a sequential run.
pub fn consensus_log(report: &ConsensusReport) -> Vec<LogRecord> {
    let mut out: Vec<LogRecord> = report.log.iter().map(|s| LogRecord::Step(StepRecord { wall_time: round_ms(s.wall_time), ..s.clone() })).collect();
    let mut timing = |phase: &str, s: f64| out.push(LogRecord::Timing { phase: phase.into(), seconds: round_ms(s) });
    timing("first_pass_fit", report.first.fit_time);
    timing("first_pass_consensus", report.first.consensus_time);
    if let Some(p) = &report.second {
        timing("second_pass_fit", p.fit_time);
        timing("second_pass_consensus", p.consensus_time);
    }
    timing("fit", report.wall_time);
    out
}

pub fn full_log(fit: &BlockFitResult) -> Vec<LogRecord> {
    let step = StepRecord { pass: Pass::First, step: 1, wall_time: round_ms(fit.wall_time), log_marginal_likelihood: fit.log_marginal_likelihood, evaluations: fit.evaluations };
    vec![LogRecord::Step(step), LogRecord::Timing { phase: "fit".into(), seconds: round_ms(fit.wall_time) }]
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io_at(path, e))?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::Results(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(File::open(path).map_err(|e| Error::io_at(path, e))?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Results(format!("{}:{}: {e}", path.display(), i + 1)))?);
    }
    Ok(out)
}

/// Selected posterior summaries of one result file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultSet {
    pub fixed: BTreeMap<String, (f64, f64)>,
    pub hyper_modes: BTreeMap<String, f64>,
    /// `(mean, sd)` per node of the selected convention.
    pub effects: BTreeMap<String, Vec<(f64, f64)>>,
    pub alpha: BTreeMap<String, (f64, f64)>,
}

impl ResultSet {
    pub fn from_records(records: &[Record]) -> Result<Self> {
        let mut out = ResultSet::default();
        let mut nodes: BTreeMap<String, BTreeMap<usize, (f64, f64)>> = BTreeMap::new();
        for r in records {
            match r {
                Record::Fixed { name, mean, sd } => {
                    out.fixed.insert(name.clone(), (*mean, *sd));
                }
                Record::HyperMode { name, value } => {
                    out.hyper_modes.insert(name.clone(), *value);
                }
                Record::EffectNode { effect, node, selected: true, mean, sd, .. } => {
                    if nodes.entry(effect.clone()).or_default().insert(*node, (*mean, *sd)).is_some() {
                        return Err(Error::Results(format!("node {node} of `{effect}` is selected twice")));
                    }
                }
                Record::Alpha { name, point, mean, .. } => {
                    out.alpha.insert(name.clone(), (*point, *mean));
                }
                _ => {}
            }
        }
        for (effect, m) in nodes {
            if m.keys().enumerate().any(|(i, &k)| i != k) {
                return Err(Error::Results(format!("nodes of `{effect}` are not numbered 0..{}", m.len())));
            }
            out.effects.insert(effect, m.into_values().collect());
        }
        Ok(out)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_records(&read_jsonl(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectComparison {
    pub nodes: usize,
    pub correlation: f64,
    pub rmse: f64,
    /// Mean over nodes of `|Δmean| / √((sd_a² + sd_b²)/2)`.
    pub mean_abs_z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedComparison {
    pub delta_mean: f64,
    pub delta_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthComparison {
    pub correlation_a: f64,
    pub correlation_b: f64,
    pub rmse_a: f64,
    pub rmse_b: f64,
}

/// Differences of `b` relative to `a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub effects: BTreeMap<String, EffectComparison>,
    pub fixed: BTreeMap<String, FixedComparison>,
    /// `b − a` of the hyperparameter modes present in both.
    pub hyper_mode_deltas: BTreeMap<String, f64>,
    /// Scale parameters: `a`'s hyperparameter mode or point estimate against `b`'s point estimate.
    pub alpha: BTreeMap<String, (f64, f64)>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub truth: BTreeMap<String, TruthComparison>,
    /// Fit time of `a` over fit time of `b`.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub speedup: Option<f64>,
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 && sbb == 0.0 && a == b {
        return 1.0;
    }
    sab / (saa * sbb).sqrt()
}

pub fn rmse(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

/// Compares two result sets over identical effect labellings, optionally against true effect values.
pub fn compare(a: &ResultSet, b: &ResultSet, truth: Option<&BTreeMap<String, Vec<f64>>>) -> Result<Comparison> {
    if a.effects.keys().ne(b.effects.keys()) {
        let names = |r: &ResultSet| r.effects.keys().cloned().collect::<Vec<_>>().join(", ");
        return Err(Error::Results(format!("effects differ: [{}] vs [{}]", names(a), names(b))));
    }
    let mut effects = BTreeMap::new();
    let mut truths = BTreeMap::new();
    for (name, ea) in &a.effects {
        let eb = &b.effects[name];
        if ea.len() != eb.len() {
            return Err(Error::Results(format!("effect `{name}` has {} nodes vs {}", ea.len(), eb.len())));
        }
        let ma: Vec<f64> = ea.iter().map(|m| m.0).collect();
        let mb: Vec<f64> = eb.iter().map(|m| m.0).collect();
        let z = ea.iter().zip(eb).map(|(x, y)| (x.0 - y.0).abs() / ((x.1 * x.1 + y.1 * y.1) / 2.0).sqrt()).sum::<f64>() / ea.len() as f64;
        effects.insert(name.clone(), EffectComparison { nodes: ea.len(), correlation: pearson(&ma, &mb), rmse: rmse(&ma, &mb), mean_abs_z: z });
        if let Some(t) = truth.and_then(|t| t.get(name)) {
            if t.len() != ma.len() {
                return Err(Error::Results(format!("truth for `{name}` has {} values, the effect {}", t.len(), ma.len())));
            }
            truths.insert(
                name.clone(),
                TruthComparison { correlation_a: pearson(t, &ma), correlation_b: pearson(t, &mb), rmse_a: rmse(t, &ma), rmse_b: rmse(t, &mb) },
            );
        }
    }
    let fixed = a
        .fixed
        .iter()
        .filter_map(|(k, x)| b.fixed.get(k).map(|y| (k.clone(), FixedComparison { delta_mean: y.0 - x.0, delta_sd: y.1 - x.1 })))
        .collect();
    let hyper_mode_deltas = a.hyper_modes.iter().filter_map(|(k, x)| b.hyper_modes.get(k).map(|y| (k.clone(), y - x))).collect();
    let mut alpha = BTreeMap::new();
    for (k, (point, _)) in &b.alpha {
        let reference = a.alpha.get(k).map(|x| x.0).or_else(|| a.hyper_modes.get(k).copied());
        if let Some(r) = reference {
            alpha.insert(k.clone(), (r, *point));
        }
    }
    Ok(Comparison { effects, fixed, hyper_mode_deltas, alpha, truth: truths, speedup: None })
}

/// Total `fit` timing of a log.
pub fn fit_seconds(log: &[LogRecord]) -> Option<f64> {
    log.iter().find_map(|r| match r {
        LogRecord::Timing { phase, seconds } if phase == "fit" => Some(*seconds),
        _ => None,
    })
}
