//! Experiment orchestration: config files, parallel cell execution, CSV
//! output and the small analyses behind the CLI subcommands.

pub mod oracle_check;
pub mod stats;

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cost_model::{
    fit_static_calibration, read_latency_trace, roofline_latency, CalibrationFit, CostModelParams, EstimatorVariant,
    LatencyQuery, DEFAULT_EMA_ALPHA,
};
use crate::draft_tree::{beam_expand, best_first_expand};
use crate::error::{Error, Result};
use crate::lattice::{top_k_truncate, SyntheticPair, SyntheticPairConfig, TokenId};
use crate::verify_sim::target::mix2;
use crate::verify_sim::{
    decode, linearize, realized_speedup, verify_tree, ContextKey, CycleRecord, DecodeConfig, Decoding, Policy,
    SimClock,
};
use stats::{mean, paired_t_test, pearson, spearman, std_err, PairedTest};

pub const DEFAULT_FIXED_GRID: [usize; 6] = [32, 64, 128, 256, 512, 1024];

pub const CELL_COLUMNS: [&str; 10] = [
    "cycle",
    "policy",
    "N",
    "accepted_len",
    "surrogate",
    "t_draft",
    "t_verify",
    "t_aux",
    "cum_tokens",
    "cum_time",
];

#[derive(Debug, Clone, PartialEq)]
pub enum Hardware {
    Preset(String),
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub gamma: usize,
    pub vocab_size: usize,
    pub concentration: f64,
    /// One synthetic pair per entry.
    pub alignments: Vec<f64>,
    pub policies: Vec<Policy>,
    pub fixed_grid: Vec<usize>,
    pub hardware: Hardware,
    pub run_length: usize,
    pub trials: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub workers: usize,
    pub top_k: usize,
    pub n_max: usize,
    pub prompt_len: usize,
    pub temperature: f64,
    /// Drafting time as a fraction of `l_ar`.
    pub t_draft_ratio: f64,
    pub t_aux: f64,
    /// Defaults to the roofline latency of one token at the prompt length.
    pub l_ar: Option<f64>,
    pub estimator: EstimatorVariant,
    pub ema_alpha: f64,
    pub fit_slope: f64,
    pub fit_intercept: f64,
    pub clock_slope: f64,
    pub clock_intercept: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            gamma: 16,
            vocab_size: 64,
            concentration: 3.0,
            alignments: vec![0.8],
            policies: Vec::new(),
            fixed_grid: DEFAULT_FIXED_GRID.to_vec(),
            hardware: Hardware::Preset("crossover".into()),
            run_length: 512,
            trials: 3,
            seed: 0,
            out_dir: PathBuf::from("out"),
            workers: std::thread::available_parallelism().map_or(1, usize::from),
            top_k: 8,
            n_max: 1024,
            prompt_len: 128,
            temperature: 0.0,
            t_draft_ratio: 0.1,
            t_aux: 0.0,
            l_ar: None,
            estimator: EstimatorVariant::EmaCalib,
            ema_alpha: DEFAULT_EMA_ALPHA,
            fit_slope: 1.0,
            fit_intercept: 0.0,
            clock_slope: 1.0,
            clock_intercept: 0.0,
        }
    }
}

fn parse_num<F: std::str::FromStr>(loc: &str, key: &str, v: &str) -> Result<F> {
    v.parse().map_err(|_| Error::parse(loc, format!("bad value `{v}` for `{key}`")))
}

impl ExperimentConfig {
    /// `key = value` lines; `policy` and `alignment` may repeat. `policy = fixed`
    /// expands to the whole fixed-N grid.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut policies: Vec<String> = Vec::new();
        let mut alignments = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let loc = format!("line {}", idx + 1);
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(&loc, "expected `key = value`"))?;
            let (key, v) = (key.trim(), value.trim());
            match key {
                "policy" => policies.push(v.to_string()),
                "alignment" => alignments.push(parse_num(&loc, key, v)?),
                "gamma" => cfg.gamma = parse_num(&loc, key, v)?,
                "vocab_size" => cfg.vocab_size = parse_num(&loc, key, v)?,
                "concentration" => cfg.concentration = parse_num(&loc, key, v)?,
                "fixed_grid" => {
                    cfg.fixed_grid = v
                        .split(',')
                        .map(|s| parse_num(&loc, key, s.trim()))
                        .collect::<Result<_>>()?
                }
                "hardware" => cfg.hardware = Hardware::Preset(v.to_string()),
                "profile" => cfg.hardware = Hardware::File(PathBuf::from(v)),
                "run_length" => cfg.run_length = parse_num(&loc, key, v)?,
                "trials" => cfg.trials = parse_num(&loc, key, v)?,
                "seed" => cfg.seed = parse_num(&loc, key, v)?,
                "out_dir" => cfg.out_dir = PathBuf::from(v),
                "workers" => cfg.workers = parse_num(&loc, key, v)?,
                "top_k" => cfg.top_k = parse_num(&loc, key, v)?,
                "n_max" => cfg.n_max = parse_num(&loc, key, v)?,
                "prompt_len" => cfg.prompt_len = parse_num(&loc, key, v)?,
                "temperature" => cfg.temperature = parse_num(&loc, key, v)?,
                "t_draft_ratio" => cfg.t_draft_ratio = parse_num(&loc, key, v)?,
                "t_aux" => cfg.t_aux = parse_num(&loc, key, v)?,
                "l_ar" => cfg.l_ar = Some(parse_num(&loc, key, v)?),
                "estimator" => cfg.estimator = v.parse()?,
                "ema_alpha" => cfg.ema_alpha = parse_num(&loc, key, v)?,
                "fit_slope" => cfg.fit_slope = parse_num(&loc, key, v)?,
                "fit_intercept" => cfg.fit_intercept = parse_num(&loc, key, v)?,
                "clock_slope" => cfg.clock_slope = parse_num(&loc, key, v)?,
                "clock_intercept" => cfg.clock_intercept = parse_num(&loc, key, v)?,
                other => return Err(Error::parse(&loc, format!("unknown key `{other}`"))),
            }
        }
        if !alignments.is_empty() {
            cfg.alignments = alignments;
        }
        for p in &policies {
            if p == "fixed" {
                cfg.policies.extend(cfg.fixed_grid.iter().map(|&n| Policy::FixedN(n)));
            } else {
                cfg.policies.push(p.parse()?);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.policies.is_empty() {
            return Err(Error::invalid("at least one policy is required"));
        }
        if self.run_length < 1 || self.trials < 1 {
            return Err(Error::invalid("run_length and trials must be >= 1"));
        }
        if self.alignments.is_empty() {
            return Err(Error::invalid("at least one alignment is required"));
        }
        if self.workers < 1 || self.top_k < 1 || self.n_max < 1 {
            return Err(Error::invalid("workers, top_k and n_max must be >= 1"));
        }
        if self.fixed_grid.iter().any(|&n| n == 0) {
            return Err(Error::invalid("fixed grid budgets must be >= 1"));
        }
        Decoding::from_temperature(self.temperature)?;
        if !(self.fit_slope > 0.0) {
            return Err(Error::invalid("fit_slope must be > 0"));
        }
        for a in &self.alignments {
            self.pair_config(*a).validate()?;
        }
        Ok(())
    }

    pub fn pair_config(&self, alignment: f64) -> SyntheticPairConfig {
        SyntheticPairConfig {
            gamma: self.gamma,
            vocab_size: self.vocab_size,
            alignment,
            concentration: self.concentration,
            seed: self.seed,
        }
    }

    pub fn hardware_params(&self) -> Result<CostModelParams<f64>> {
        match &self.hardware {
            Hardware::Preset(name) => CostModelParams::preset(name),
            Hardware::File(path) => CostModelParams::load(path),
        }
    }

    /// Prompt shared by every policy within a trial.
    pub fn prompt(&self, trial: usize) -> Vec<TokenId> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix2(self.seed, trial as u64 + 1));
        (0..self.prompt_len)
            .map(|_| rng.random_range(0..self.vocab_size as TokenId))
            .collect()
    }

    pub fn decode_config(&self, params: &CostModelParams<f64>, policy: Policy, trial: usize) -> Result<DecodeConfig> {
        let l_ar = match self.l_ar {
            Some(v) => v,
            None => roofline_latency(params, LatencyQuery::new(1, self.prompt_len as u64)?),
        };
        Ok(DecodeConfig {
            policy,
            n_max: self.n_max,
            top_k: self.top_k,
            run_length: self.run_length,
            prompt: self.prompt(trial),
            decoding: Decoding::from_temperature(self.temperature)?,
            clock: SimClock {
                params: params.clone(),
                slope: self.clock_slope,
                intercept: self.clock_intercept,
            },
            t_draft: self.t_draft_ratio * l_ar,
            t_aux: self.t_aux,
            l_ar,
            estimator: self.estimator,
            fit: CalibrationFit {
                slope: self.fit_slope,
                intercept: self.fit_intercept,
                rmse_before: 0.0,
                rmse_after: 0.0,
            },
            ema_alpha: self.ema_alpha,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub pair: usize,
    pub alignment: f64,
    pub policy: String,
    pub trials: usize,
    pub mean_speedup: f64,
    pub se_speedup: f64,
    pub mean_tau: f64,
    pub se_tau: f64,
    pub mean_n: f64,
    pub se_n: f64,
}

pub const SUMMARY_COLUMNS: [&str; 10] = [
    "pair",
    "alignment",
    "policy",
    "trials",
    "mean_speedup",
    "se_speedup",
    "mean_tau",
    "se_tau",
    "mean_n",
    "se_n",
];

impl SummaryRow {
    fn record(&self) -> Vec<String> {
        vec![
            self.pair.to_string(),
            self.alignment.to_string(),
            self.policy.clone(),
            self.trials.to_string(),
            self.mean_speedup.to_string(),
            self.se_speedup.to_string(),
            self.mean_tau.to_string(),
            self.se_tau.to_string(),
            self.mean_n.to_string(),
            self.se_n.to_string(),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub raw_csv: PathBuf,
    pub summary_csv: PathBuf,
    pub summary: Vec<SummaryRow>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Cell {
    pair: usize,
    policy: Policy,
    trial: usize,
}

impl Cell {
    fn file_name(&self) -> String {
        format!("pair{}_{}_trial{}.csv", self.pair, self.policy, self.trial)
    }
}

fn cycle_fields(r: &CycleRecord) -> [String; 10] {
    [
        r.cycle.to_string(),
        r.policy.to_string(),
        r.n.to_string(),
        r.accepted_len.to_string(),
        r.surrogate.to_string(),
        r.t_draft.to_string(),
        r.t_verify.to_string(),
        r.t_aux.to_string(),
        r.cum_tokens.to_string(),
        r.cum_time.to_string(),
    ]
}

pub fn write_cycle_csv(path: &Path, records: &[CycleRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CELL_COLUMNS)?;
    for r in records {
        w.write_record(cycle_fields(r))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn run_cell(cfg: &ExperimentConfig, params: &CostModelParams<f64>, cell: Cell, cells_dir: &Path) -> Result<Vec<CycleRecord>> {
    let pair = SyntheticPair::new(cfg.pair_config(cfg.alignments[cell.pair]))?;
    let out = decode(&pair, &cfg.decode_config(params, cell.policy, cell.trial)?)?;
    let final_path = cells_dir.join(cell.file_name());
    let tmp = cells_dir.join(format!("{}.tmp", cell.file_name()));
    write_cycle_csv(&tmp, &out.records)?;
    fs::rename(&tmp, &final_path).map_err(|e| Error::io(&final_path, e))?;
    Ok(out.records)
}

struct CellStats {
    speedup: f64,
    tau: f64,
    n_bar: f64,
}

fn summarize(cells: &[(usize, f64, String, Vec<CellStats>)]) -> Vec<SummaryRow> {
    cells
        .iter()
        .map(|(pair, alignment, policy, trials)| {
            let s: Vec<f64> = trials.iter().map(|c| c.speedup).collect();
            let t: Vec<f64> = trials.iter().map(|c| c.tau).collect();
            let n: Vec<f64> = trials.iter().map(|c| c.n_bar).collect();
            SummaryRow {
                pair: *pair,
                alignment: *alignment,
                policy: policy.clone(),
                trials: trials.len(),
                mean_speedup: mean(&s),
                se_speedup: std_err(&s),
                mean_tau: mean(&t),
                se_tau: std_err(&t),
                mean_n: mean(&n),
                se_n: std_err(&n),
            }
        })
        .collect()
}

fn check_writable(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let probe = dir.join(".write-probe");
    fs::write(&probe, b"").map_err(|e| Error::io(&probe, e))?;
    fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))
}

/// Runs every (pair, policy, trial) cell and writes `cells/*.csv`, `raw.csv` and `summary.csv`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let params = cfg.hardware_params()?;
    for &p in &cfg.policies {
        cfg.decode_config(&params, p, 0)?.validate()?;
    }
    let cells_dir = cfg.out_dir.join("cells");
    check_writable(&cells_dir)?;

    let mut cells = Vec::new();
    for pair in 0..cfg.alignments.len() {
        for &policy in &cfg.policies {
            for trial in 0..cfg.trials {
                cells.push(Cell { pair, policy, trial });
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let results: Vec<Result<Vec<CycleRecord>>> =
        pool.install(|| cells.par_iter().map(|&c| run_cell(cfg, &params, c, &cells_dir)).collect());

    let failed: Vec<String> = cells
        .iter()
        .zip(&results)
        .filter_map(|(c, r)| r.as_ref().err().map(|e| format!("{}: {e}", c.file_name())))
        .collect();
    if !failed.is_empty() {
        return Err(Error::invalid(format!("{} cell(s) failed; first: {}", failed.len(), failed[0])));
    }

    let raw_csv = cfg.out_dir.join("raw.csv");
    let mut w = csv::Writer::from_path(&raw_csv)?;
    let mut header = vec!["pair", "alignment", "trial"];
    header.extend(CELL_COLUMNS);
    header.push("l_ar");
    w.write_record(&header)?;
    let mut grouped: Vec<(usize, f64, String, Vec<CellStats>)> = Vec::new();
    for (cell, res) in cells.iter().zip(results) {
        let records = res?;
        let alignment = cfg.alignments[cell.pair];
        for r in &records {
            let mut row = vec![cell.pair.to_string(), alignment.to_string(), cell.trial.to_string()];
            row.extend(cycle_fields(r));
            row.push(r.l_ar.to_string());
            w.write_record(&row)?;
        }
        let stats = CellStats {
            speedup: realized_speedup(&records)?,
            tau: records.last().map_or(0, |r| r.cum_tokens) as f64 / records.len() as f64,
            n_bar: records.iter().map(|r| r.n).sum::<usize>() as f64 / records.len() as f64,
        };
        let label = cell.policy.to_string();
        match grouped.last_mut() {
            Some(g) if g.0 == cell.pair && g.2 == label => g.3.push(stats),
            _ => grouped.push((cell.pair, alignment, label, vec![stats])),
        }
    }
    w.flush().map_err(|e| Error::io(&raw_csv, e))?;

    let summary = summarize(&grouped);
    let summary_csv = cfg.out_dir.join("summary.csv");
    write_summary(&summary_csv, &summary)?;
    Ok(ExperimentOutput {
        raw_csv,
        summary_csv,
        summary,
    })
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SUMMARY_COLUMNS)?;
    for r in rows {
        w.write_record(r.record())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::parse("header", format!("missing column `{name}`")))
}

fn field<F: std::str::FromStr>(rec: &csv::StringRecord, idx: usize, line: u64) -> Result<F> {
    rec.get(idx)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::parse(format!("row {line}"), format!("bad field {idx}")))
}

/// Rebuilds the summary from a combined `raw.csv` without touching any in-memory record.
pub fn summary_from_raw(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let h = rdr.headers()?.clone();
    let idx: Vec<usize> = ["pair", "alignment", "trial", "policy", "N", "accepted_len", "t_draft", "t_verify", "t_aux", "l_ar"]
        .iter()
        .map(|c| column(&h, c))
        .collect::<Result<_>>()?;

    struct Acc {
        key: (usize, String, usize),
        alignment: f64,
        gained: f64,
        spent: f64,
        tokens: usize,
        nodes: usize,
        cycles: usize,
    }
    let mut cells: Vec<Acc> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = line as u64 + 2;
        let key = (field(&rec, idx[0], line)?, rec[idx[3]].to_string(), field(&rec, idx[2], line)?);
        let accepted: usize = field(&rec, idx[5], line)?;
        let l_ar: f64 = field(&rec, idx[9], line)?;
        let t = field::<f64>(&rec, idx[6], line)? + field::<f64>(&rec, idx[7], line)? + field::<f64>(&rec, idx[8], line)?;
        if cells.last().map(|c| &c.key) != Some(&key) {
            cells.push(Acc {
                key: key.clone(),
                alignment: field(&rec, idx[1], line)?,
                gained: 0.0,
                spent: 0.0,
                tokens: 0,
                nodes: 0,
                cycles: 0,
            });
        }
        let c = cells.last_mut().expect("pushed above");
        c.gained += accepted as f64 * l_ar;
        c.spent += t;
        c.tokens += accepted;
        c.nodes += field::<usize>(&rec, idx[4], line)?;
        c.cycles += 1;
    }
    let mut grouped: Vec<(usize, f64, String, Vec<CellStats>)> = Vec::new();
    for c in cells {
        let stats = CellStats {
            speedup: c.gained / c.spent,
            tau: c.tokens as f64 / c.cycles as f64,
            n_bar: c.nodes as f64 / c.cycles as f64,
        };
        match grouped.last_mut() {
            Some(g) if g.0 == c.key.0 && g.2 == c.key.1 => g.3.push(stats),
            _ => grouped.push((c.key.0, c.alignment, c.key.1, vec![stats])),
        }
    }
    Ok(summarize(&grouped))
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = line as u64 + 2;
        out.push(SummaryRow {
            pair: field(&rec, 0, line)?,
            alignment: field(&rec, 1, line)?,
            policy: rec[2].to_string(),
            trials: field(&rec, 3, line)?,
            mean_speedup: field(&rec, 4, line)?,
            se_speedup: field(&rec, 5, line)?,
            mean_tau: field(&rec, 6, line)?,
            se_tau: field(&rec, 7, line)?,
            mean_n: field(&rec, 8, line)?,
            se_n: field(&rec, 9, line)?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub fit: CalibrationFit<f64>,
    pub points: usize,
}

impl CalibrationReport {
    pub fn to_text(&self) -> String {
        format!(
            "points = {}\nslope = {}\nintercept = {}\nrmse_before = {}\nrmse_after = {}\nreduction_percent = {}\n",
            self.points,
            self.fit.slope,
            self.fit.intercept,
            self.fit.rmse_before,
            self.fit.rmse_after,
            self.fit.reduction_percent()
        )
    }
}

/// Fits the static correction of `params` against a measured trace.
pub fn calibrate(params: &CostModelParams<f64>, trace: &[(LatencyQuery, f64)]) -> Result<CalibrationReport> {
    let pairs: Vec<(f64, f64)> = trace.iter().map(|(q, obs)| (roofline_latency(params, *q), *obs)).collect();
    Ok(CalibrationReport {
        fit: fit_static_calibration(&pairs)?,
        points: pairs.len(),
    })
}

/// File-level calibration; nothing is written unless both inputs load and the fit succeeds.
pub fn calibrate_files(profile: &Path, trace: &Path, out: Option<&Path>) -> Result<CalibrationReport> {
    let params = CostModelParams::load(profile)?;
    let trace = read_latency_trace(trace)?;
    let report = calibrate(&params, &trace)?;
    if let Some(dir) = out {
        check_writable(dir)?;
        let path = dir.join("calibration.txt");
        fs::write(&path, report.to_text()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correlation {
    pub pearson: f64,
    pub spearman: f64,
    pub cycles: usize,
}

pub const MIN_CORRELATION_CYCLES: usize = 30;

pub fn correlate(surrogates: &[f64], accepted: &[f64]) -> Result<Correlation> {
    if surrogates.len() < MIN_CORRELATION_CYCLES {
        return Err(Error::invalid(format!(
            "need at least {MIN_CORRELATION_CYCLES} cycles, got {}",
            surrogates.len()
        )));
    }
    Ok(Correlation {
        pearson: pearson(surrogates, accepted)?,
        spearman: spearman(surrogates, accepted)?,
        cycles: surrogates.len(),
    })
}

/// Correlation between the `surrogate` and `accepted_len` columns of any cycle CSV.
pub fn correlate_file(path: &Path) -> Result<Correlation> {
    let mut rdr = csv::Reader::from_path(path)?;
    let h = rdr.headers()?.clone();
    let (si, ai) = (column(&h, "surrogate")?, column(&h, "accepted_len")?);
    let mut s = Vec::new();
    let mut a = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        s.push(field(&rec, si, line as u64 + 2)?);
        a.push(field(&rec, ai, line as u64 + 2)?);
    }
    correlate(&s, &a)
}

/// Accepted lengths of three topologies verified on the same contexts.
#[derive(Debug, Clone)]
pub struct TopologyComparison {
    pub best_first: Vec<f64>,
    pub beam: Vec<f64>,
    pub chain: Vec<f64>,
    /// Best-first budget per cycle (matched to the beam tree).
    pub budgets: Vec<usize>,
    /// Best-first minus beam.
    pub test: PairedTest,
}

pub fn compare_topologies(
    pair: &SyntheticPair,
    cycles: usize,
    width: usize,
    depth: usize,
    top_k: usize,
    seed: u64,
) -> Result<TopologyComparison> {
    if cycles < 2 {
        return Err(Error::invalid("need at least two cycles"));
    }
    let v = pair.config().vocab_size as TokenId;
    let rows: Vec<(f64, f64, f64, usize)> = (0..cycles)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix2(seed, c as u64));
            let prompt: Vec<TokenId> = (0..32).map(|_| rng.random_range(0..v)).collect();
            let ctx = ContextKey::empty().extend(&prompt);
            let lattice = top_k_truncate(&pair.draft(ctx, Decoding::Greedy), top_k)?;
            let beam = beam_expand(&lattice, width, depth)?;
            let bf = best_first_expand(&lattice, beam.budget())?;
            let chain = beam_expand(&lattice, 1, lattice.gamma())?;
            let accept = |t: &crate::draft_tree::DraftTree<f64>| {
                verify_tree(&linearize(t, prompt.len()), ctx, pair.target(), Decoding::Greedy).accepted_len() as f64
            };
            Ok((accept(&bf), accept(&beam), accept(&chain), bf.budget()))
        })
        .collect::<Result<_>>()?;
    let best_first: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let beam: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let test = paired_t_test(&best_first, &beam)?;
    Ok(TopologyComparison {
        chain: rows.iter().map(|r| r.2).collect(),
        budgets: rows.iter().map(|r| r.3).collect(),
        best_first,
        beam,
        test,
    })
}
