//! End-to-end runs: generate a seeded benchmark, train each strategy on it
//! and evaluate, over one or more seeds.
//!
//! Within a seed all strategies share the encoder and the data, so their
//! differences come from the update rule alone. Cells run in parallel and
//! results are always returned sorted by (strategy, seed).

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::data::{generate_synthetic, RunConfig, SyntheticBenchmark};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport, ReportRow};
use crate::model::FrozenTextEncoder;
use crate::trainer::{build_encoder, train, Strategy, TrainLog};

/// Name given to the single synthetic OOD set.
pub const SYNTH_OOD_NAME: &str = "synthetic";

/// The run configuration with every seed replaced by `seed`.
pub fn reseeded(run: &RunConfig, seed: u64) -> RunConfig {
    let mut r = run.clone();
    r.train.seed = seed;
    r.synth.seed = seed;
    r
}

/// Frozen encoder and benchmark for one seed. ID prototypes are anchored to
/// the encoder's zero-context text features.
pub fn prepare(run: &RunConfig) -> Result<(FrozenTextEncoder, SyntheticBenchmark)> {
    run.validate()?;
    if run.synth.d_embed != run.train.d_embed {
        return Err(Error::config("d_embed", "synthetic and training widths differ"));
    }
    let enc = build_encoder(run.train.encoder_spec(run.synth.n_classes), run.train.seed)?;
    let anchors = enc.zero_context_features()?;
    let bench = generate_synthetic(&run.synth, Some(&anchors))?;
    Ok((enc, bench))
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub strategy: Strategy,
    pub seed: u64,
    pub report: EvalReport,
    pub log: TrainLog,
}

impl CellResult {
    pub fn rows(&self) -> Vec<ReportRow> {
        self.report.rows(self.strategy.name(), Some(self.seed))
    }
}

fn train_and_eval(
    run: &RunConfig,
    strategy: Strategy,
    enc: &FrozenTextEncoder,
    bench: &SyntheticBenchmark,
) -> Result<CellResult> {
    let mut cfg = run.train.clone();
    cfg.strategy = strategy;
    let outcome = train(&cfg, &bench.train, enc)?;
    let ood = [(SYNTH_OOD_NAME.to_string(), bench.ood.clone())];
    let report = evaluate(&outcome.params, enc, &bench.id_test, &ood, cfg.tau)?.with_conflict(outcome.stats);
    Ok(CellResult {
        strategy,
        seed: cfg.seed,
        report,
        log: outcome.log,
    })
}

/// gen → train → eval for one strategy at one seed.
pub fn run_cell(run: &RunConfig, strategy: Strategy, seed: u64) -> Result<CellResult> {
    let run = reseeded(run, seed);
    let (enc, bench) = prepare(&run)?;
    train_and_eval(&run, strategy, &enc, &bench)
}

#[derive(Debug, Clone)]
pub struct StrategySummary {
    pub strategy: Strategy,
    pub n_seeds: usize,
    pub id_accuracy: f64,
    pub avg_auroc: f64,
    pub avg_fpr95: f64,
    pub conflict_ratio: f64,
}

#[derive(Debug, Clone)]
pub struct BenchResult {
    pub cells: Vec<CellResult>,
}

impl BenchResult {
    pub fn cell(&self, strategy: Strategy, seed: u64) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.strategy == strategy && c.seed == seed)
    }

    /// Means over seeds, one entry per strategy present.
    pub fn summary(&self) -> Vec<StrategySummary> {
        let mut by: BTreeMap<Strategy, Vec<&CellResult>> = BTreeMap::new();
        for c in &self.cells {
            by.entry(c.strategy).or_default().push(c);
        }
        by.into_iter()
            .map(|(strategy, cells)| {
                let k = cells.len() as f64;
                let mean = |f: &dyn Fn(&CellResult) -> f64| cells.iter().map(|c| f(c)).sum::<f64>() / k;
                StrategySummary {
                    strategy,
                    n_seeds: cells.len(),
                    id_accuracy: mean(&|c| c.report.id_accuracy),
                    avg_auroc: mean(&|c| c.report.avg_auroc),
                    avg_fpr95: mean(&|c| c.report.avg_fpr95),
                    conflict_ratio: mean(&|c| c.report.conflict_ratio().unwrap_or(0.0)),
                }
            })
            .collect()
    }

    pub fn summary_for(&self, strategy: Strategy) -> Option<StrategySummary> {
        self.summary().into_iter().find(|s| s.strategy == strategy)
    }

    /// Per-seed rows followed by the mean over seeds of every
    /// (strategy, dataset) pair.
    pub fn rows(&self) -> Vec<ReportRow> {
        let per_seed: Vec<ReportRow> = self.cells.iter().flat_map(CellResult::rows).collect();
        let mut keys: Vec<(&str, &str)> = Vec::new();
        for r in &per_seed {
            let k = (r.strategy.as_str(), r.dataset.as_str());
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        let means: Vec<ReportRow> = keys
            .iter()
            .map(|&(st, ds)| {
                let g: Vec<&ReportRow> = per_seed.iter().filter(|r| r.strategy == st && r.dataset == ds).collect();
                let k = g.len() as f64;
                let mean = |f: fn(&ReportRow) -> f64| g.iter().map(|r| f(r)).sum::<f64>() / k;
                let conflict: Vec<f64> = g.iter().filter_map(|r| r.conflict_ratio).collect();
                ReportRow {
                    strategy: st.to_string(),
                    dataset: ds.to_string(),
                    fpr95: mean(|r| r.fpr95),
                    auroc: mean(|r| r.auroc),
                    id_acc: mean(|r| r.id_acc),
                    conflict_ratio: (!conflict.is_empty())
                        .then(|| conflict.iter().sum::<f64>() / conflict.len() as f64),
                    seed: None,
                }
            })
            .collect();
        per_seed.into_iter().chain(means).collect()
    }
}

/// Seeds `base, base + 1, …` for `k` runs.
pub fn bench_seeds(base: u64, k: usize) -> Vec<u64> {
    (0..k as u64).map(|i| base.wrapping_add(i)).collect()
}

/// Every strategy at every seed. Data is generated once per seed.
pub fn run_bench(run: &RunConfig, strategies: &[Strategy], seeds: &[u64]) -> Result<BenchResult> {
    if strategies.is_empty() || seeds.is_empty() {
        return Err(Error::config("seeds", "bench needs at least one strategy and one seed"));
    }
    let prepared: Vec<(RunConfig, FrozenTextEncoder, SyntheticBenchmark)> = seeds
        .par_iter()
        .map(|&s| {
            let r = reseeded(run, s);
            prepare(&r).map(|(enc, bench)| (r, enc, bench))
        })
        .collect::<Result<_>>()?;
    let jobs: Vec<(Strategy, usize)> = strategies
        .iter()
        .flat_map(|&st| (0..prepared.len()).map(move |i| (st, i)))
        .collect();
    let mut cells: Vec<CellResult> = jobs
        .par_iter()
        .map(|&(st, i)| {
            let (r, enc, bench) = &prepared[i];
            train_and_eval(r, st, enc, bench)
        })
        .collect::<Result<_>>()?;
    cells.sort_by_key(|c| (c.strategy, c.seed));
    Ok(BenchResult { cells })
}

/// Parameters `sweep` may vary.
pub const SWEEP_PARAMS: &[&str] = &["lambda", "k_rank", "tau", "beta"];

pub const SWEEP_CSV_PREFIX: [&str; 2] = ["param", "value"];

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub value: String,
    pub result: BenchResult,
}

/// Runs the bench once per value of one configuration key.
pub fn run_sweep(
    run: &RunConfig,
    param: &str,
    values: &[String],
    strategies: &[Strategy],
    seeds: &[u64],
) -> Result<Vec<SweepPoint>> {
    if !SWEEP_PARAMS.contains(&param) {
        return Err(Error::config(
            "param",
            format!("`{param}` cannot be swept; choose one of {}", SWEEP_PARAMS.join(", ")),
        ));
    }
    if values.is_empty() {
        return Err(Error::config("values", "at least one value is required"));
    }
    values
        .iter()
        .map(|v| {
            let mut r = run.clone();
            r.set(param, v)?;
            r.validate()?;
            Ok(SweepPoint {
                value: v.clone(),
                result: run_bench(&r, strategies, seeds)?,
            })
        })
        .collect()
}
