use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use seqcons::infer::{fit_block, FitOptions};
use seqcons::model::{parse_model_config, read_dataset, Dataset, ModelSpec};
use seqcons::report::{self, compare, consensus_log, consensus_records, fit_seconds, full_log, full_records, Comparison, LogRecord, Record, ResultSet};
use seqcons::sequential::{run_sc, run_scp, AlphaMethod, Pooling, SequentialOptions};
use seqcons::sim::{parse_scenario, preferential_sampling, simulate_truth, stratified_sampling, Truth};
use seqcons::{Error, Result};

use crate::manifest::{self, RunManifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Full,
    Sc,
    Scp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PoolingArg {
    Marginal,
    Multivariate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AlphaArg {
    Median,
    Gaussian,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scenario file.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Model file.
    #[arg(long)]
    pub config: PathBuf,
    /// Data table; the table name is the file stem.
    #[arg(long, required = true)]
    pub data: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = Mode::Full)]
    pub mode: Mode,
    #[command(flatten)]
    pub consensus: ConsensusArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ConsensusArgs {
    #[arg(long, value_enum, default_value_t = PoolingArg::Multivariate)]
    pub pooling: PoolingArg,
    /// Count the latent prior once in the multivariate product.
    #[arg(long, value_enum, default_value_t = Switch::Off)]
    pub correct_prior: Switch,
    /// Estimate that rescales scaled copies of shared effects.
    #[arg(long, value_enum, default_value_t = AlphaArg::Median)]
    pub alpha: AlphaArg,
    /// Grid points per hyperparameter axis (3 to 9).
    #[arg(long)]
    pub points_per_dim: Option<usize>,
}

impl ConsensusArgs {
    fn options(&self) -> SequentialOptions {
        SequentialOptions {
            pooling: match self.pooling {
                PoolingArg::Marginal => Pooling::Marginal,
                PoolingArg::Multivariate => Pooling::Multivariate,
            },
            correct_prior: self.correct_prior == Switch::On,
            alpha_method: match self.alpha {
                AlphaArg::Median => AlphaMethod::Median,
                AlphaArg::Gaussian => AlphaMethod::Gaussian,
            },
            points_per_dim: self.points_per_dim,
            expert_weights: BTreeMap::new(),
        }
    }

    fn record(&self, m: &mut RunManifest) {
        let o = self.options();
        m.option("pooling", o.pooling);
        m.option("correct_prior", if o.correct_prior { "on" } else { "off" });
        m.option("alpha", o.alpha_method);
        m.option("points_per_dim", o.points_per_dim);
    }
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Reference result file, or a directory holding `result.jsonl`.
    pub result_a: PathBuf,
    /// Result compared against the reference.
    pub result_b: PathBuf,
    /// Truth file written by `simulate`.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, required = true)]
    pub data: Vec<PathBuf>,
    #[command(flatten)]
    pub consensus: ConsensusArgs,
    #[arg(long)]
    pub out: PathBuf,
}

/// Contents of `truth.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthFile {
    pub truth: Truth,
    /// True effect values keyed like the example models.
    pub effects: BTreeMap<String, Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub point_process_intercept: Option<f64>,
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))
}

fn prepare_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))?;
    Ok(())
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn json_error(e: serde_json::Error) -> Error {
    Error::Results(e.to_string())
}

pub fn simulate(args: &SimulateArgs) -> Result<RunManifest> {
    let scenario = parse_scenario(&read_text(&args.config)?)?;
    let start = Instant::now();
    let truth = simulate_truth(&scenario, args.seed)?;
    let srs = scenario.stratified.as_ref().map(|_| stratified_sampling(&scenario, &truth, args.seed)).transpose()?;
    let pref = scenario.preferential.as_ref().map(|_| preferential_sampling(&scenario, &truth, args.seed)).transpose()?;
    let elapsed = start.elapsed().as_secs_f64();

    prepare_out(&args.out)?;
    let mut m = RunManifest::new("simulate");
    m.config = Some(display(&args.config));
    m.seed = Some(args.seed);
    m.time("simulate", elapsed);
    let mut tables = Vec::new();
    tables.extend(srs);
    let mut intercept = None;
    if let Some(p) = pref {
        intercept = Some(p.intercept);
        tables.push(p.points);
        tables.push(p.counts);
    }
    for t in &tables {
        let name = format!("{}.csv", t.name);
        t.write_csv(&args.out.join(&name))?;
        m.add_output(&args.out, &name)?;
    }
    let file = TruthFile { effects: truth.effects(), truth, point_process_intercept: intercept };
    let text = serde_json::to_string_pretty(&file).map_err(json_error)?;
    std::fs::write(args.out.join("truth.json"), text + "\n")?;
    m.add_output(&args.out, "truth.json")?;
    m.write(&args.out)?;
    Ok(m)
}

fn load_model(config: &Path, data: &[PathBuf]) -> Result<(ModelSpec, Dataset)> {
    let spec = parse_model_config(&read_text(config)?)?;
    let data = read_dataset(data)?;
    Ok((spec, data))
}

/// Fitted records, log, and fit seconds of one mode.
fn run_mode(spec: &ModelSpec, data: &Dataset, mode: Mode, consensus: &ConsensusArgs) -> Result<(Vec<Record>, Vec<LogRecord>, f64)> {
    let options = consensus.options();
    let start = Instant::now();
    if mode == Mode::Full {
        let fit = fit_block(spec, data, &FitOptions { points_per_dim: options.points_per_dim, ..FitOptions::default() })?;
        return Ok((full_records(&fit), full_log(&fit), start.elapsed().as_secs_f64()));
    }
    let plan = spec.partition.as_ref().ok_or_else(|| Error::config("partition", "sequential modes need a [partition] section"))?;
    let report = match mode {
        Mode::Sc => run_sc(spec, data, plan, &options)?,
        _ => run_scp(spec, data, plan, &options)?,
    };
    let secs = start.elapsed().as_secs_f64();
    Ok((consensus_records(spec, &report, options.pooling)?, consensus_log(&report), secs))
}

fn write_fit(dir: &Path, records: &[Record], log: &[LogRecord], m: &mut RunManifest) -> Result<()> {
    prepare_out(dir)?;
    report::write_jsonl(&dir.join("result.jsonl"), records)?;
    report::write_jsonl(&dir.join("log.jsonl"), log)?;
    m.add_output(dir, "result.jsonl")?;
    m.add_output(dir, "log.jsonl")?;
    Ok(())
}

pub fn fit(args: &FitArgs) -> Result<RunManifest> {
    let (spec, data) = load_model(&args.config, &args.data)?;
    let (records, log, secs) = run_mode(&spec, &data, args.mode, &args.consensus)?;
    let mut m = RunManifest::new("fit");
    m.config = Some(display(&args.config));
    m.data = args.data.iter().map(|p| display(p)).collect();
    m.option("mode", args.mode);
    args.consensus.record(&mut m);
    for r in &log {
        if let LogRecord::Timing { phase, seconds } = r {
            m.timings.insert(phase.clone(), *seconds);
        }
    }
    m.time("fit", secs);
    write_fit(&args.out, &records, &log, &mut m)?;
    m.write(&args.out)?;
    Ok(m)
}

fn result_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("result.jsonl")
    } else {
        p.to_path_buf()
    }
}

fn sibling_log(result: &Path) -> Option<Vec<LogRecord>> {
    let log = result.with_file_name("log.jsonl");
    log.exists().then(|| report::read_jsonl(&log).ok()).flatten()
}

pub fn compare_results(a: &Path, b: &Path, truth: Option<&Path>) -> Result<Comparison> {
    let (a, b) = (result_path(a), result_path(b));
    for r in [&a, &b] {
        if let Some(dir) = r.parent().filter(|d| d.join("manifest.json").exists()) {
            manifest::verify(dir)?;
        }
    }
    let truth = match truth {
        Some(p) => {
            let f: TruthFile = serde_json::from_str(&read_text(p)?).map_err(json_error)?;
            Some(f.effects)
        }
        None => None,
    };
    let mut c = compare(&ResultSet::read(&a)?, &ResultSet::read(&b)?, truth.as_ref())?;
    let ta = sibling_log(&a).as_deref().and_then(fit_seconds);
    let tb = sibling_log(&b).as_deref().and_then(fit_seconds);
    if let (Some(ta), Some(tb)) = (ta, tb) {
        c.speedup = Some(if ta == tb { 1.0 } else { ta / tb });
    }
    Ok(c)
}

pub fn compare_cmd(args: &CompareArgs) -> Result<RunManifest> {
    let c = compare_results(&args.result_a, &args.result_b, args.truth.as_deref())?;
    prepare_out(&args.out)?;
    let mut m = RunManifest::new("compare");
    m.data = vec![display(&args.result_a), display(&args.result_b)];
    if let Some(t) = &args.truth {
        m.option("truth", display(t));
    }
    std::fs::write(args.out.join("comparison.json"), serde_json::to_string_pretty(&c).map_err(json_error)? + "\n")?;
    m.add_output(&args.out, "comparison.json")?;
    m.write(&args.out)?;
    Ok(m)
}

#[derive(Debug, Serialize)]
struct BenchSummary {
    fit_seconds: BTreeMap<String, f64>,
    /// Full-fit time over the sequential fit time.
    speedup: BTreeMap<String, f64>,
    comparisons: BTreeMap<String, Comparison>,
}

pub fn bench(args: &BenchArgs) -> Result<RunManifest> {
    let (spec, data) = load_model(&args.config, &args.data)?;
    let mut m = RunManifest::new("bench");
    m.config = Some(display(&args.config));
    m.data = args.data.iter().map(|p| display(p)).collect();
    args.consensus.record(&mut m);
    prepare_out(&args.out)?;
    let mut seconds = BTreeMap::new();
    for (mode, name) in [(Mode::Full, "full"), (Mode::Sc, "sc"), (Mode::Scp, "scp")] {
        let (records, log, secs) = run_mode(&spec, &data, mode, &args.consensus)?;
        m.time(&format!("{name}_fit"), secs);
        seconds.insert(name.to_string(), report::round_ms(secs));
        let dir = args.out.join(name);
        prepare_out(&dir)?;
        report::write_jsonl(&dir.join("result.jsonl"), &records)?;
        report::write_jsonl(&dir.join("log.jsonl"), &log)?;
        m.add_output(&args.out, &format!("{name}/result.jsonl"))?;
        m.add_output(&args.out, &format!("{name}/log.jsonl"))?;
    }
    let mut comparisons = BTreeMap::new();
    let mut speedup = BTreeMap::new();
    for name in ["sc", "scp"] {
        let c = compare_results(&args.out.join("full"), &args.out.join(name), None)?;
        speedup.insert(name.to_string(), seconds["full"] / seconds[name]);
        comparisons.insert(name.to_string(), c);
    }
    let summary = BenchSummary { fit_seconds: seconds, speedup, comparisons };
    std::fs::write(args.out.join("bench.json"), serde_json::to_string_pretty(&summary).map_err(json_error)? + "\n")?;
    m.add_output(&args.out, "bench.json")?;
    m.write(&args.out)?;
    Ok(m)
}
