//! OOD scoring and the three reported metrics: FPR at 95% TPR, AUROC and
//! ID classification accuracy.
//!
//! Scores are "higher means more ID-like". Both threshold metrics use `≥`
//! comparisons, and AUROC counts ties as half a win.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::io;

use rayon::prelude::*;

use crate::align::ConflictStats;
use crate::data::FeatureBank;
use crate::error::{Error, Result};
use crate::model::{encode_text, FrozenTextEncoder, PromptParams, TextFeatures};
use crate::numerics::{argmax, check_finite};
use crate::objectives::{id_probability, region_probabilities, select_ood_regions, Sample};

pub const DEFAULT_TPR_TARGET: f64 = 0.95;

pub const CSV_HEADER: [&str; 7] = ["strategy", "dataset", "fpr95", "auroc", "id_acc", "conflict_ratio", "seed"];

/// Dataset name used for the macro-average row.
pub const AVERAGE_ROW: &str = "average";

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSample {
    pub score: f64,
    pub is_id: bool,
    pub predicted_class: Option<usize>,
    pub true_class: Option<usize>,
}

/// Maximum class probability.
pub fn mcm_score(f: &[f64], g: &TextFeatures, tau: f64) -> Result<f64> {
    let p = id_probability(f, g, tau)?;
    Ok(p.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

pub fn score_sample(s: &Sample, g: &TextFeatures, tau: f64) -> Result<ScoredSample> {
    let p = id_probability(&s.global, g, tau)?;
    Ok(ScoredSample {
        score: p.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        is_id: s.label.is_some(),
        predicted_class: s.label.map(|_| argmax(&p)),
        true_class: s.label,
    })
}

fn check_scores(id: &[f64], ood: &[f64]) -> Result<()> {
    if id.is_empty() {
        return Err(Error::Empty("ID scores"));
    }
    if ood.is_empty() {
        return Err(Error::Empty("OOD scores"));
    }
    check_finite(id, "ID scores")?;
    check_finite(ood, "OOD scores")
}

fn cmp_finite(a: &f64, b: &f64) -> Ordering {
    a.partial_cmp(b).unwrap_or(Ordering::Equal)
}

/// Exact Mann–Whitney counts `(wins, ties)` over all ID×OOD pairs, by one
/// sort of the pooled scores.
pub fn auroc_counts(id: &[f64], ood: &[f64]) -> Result<(u64, u64)> {
    check_scores(id, ood)?;
    let mut pooled: Vec<(f64, bool)> = id
        .iter()
        .map(|&s| (s, true))
        .chain(ood.iter().map(|&s| (s, false)))
        .collect();
    pooled.sort_by(|a, b| cmp_finite(&a.0, &b.0));

    let (mut wins, mut ties, mut ood_below) = (0u64, 0u64, 0u64);
    let mut i = 0;
    while i < pooled.len() {
        let v = pooled[i].0;
        let (mut n_id, mut n_ood) = (0u64, 0u64);
        while i < pooled.len() && pooled[i].0 == v {
            if pooled[i].1 {
                n_id += 1;
            } else {
                n_ood += 1;
            }
            i += 1;
        }
        wins += n_id * ood_below;
        ties += n_id * n_ood;
        ood_below += n_ood;
    }
    Ok((wins, ties))
}

pub fn auroc(id: &[f64], ood: &[f64]) -> Result<f64> {
    let (wins, ties) = auroc_counts(id, ood)?;
    let pairs = id.len() as u128 * ood.len() as u128;
    Ok((2 * wins as u128 + ties as u128) as f64 / (2 * pairs) as f64)
}

/// Threshold picked by [`fpr_at_tpr`]: the largest ID score `θ` with
/// `|{id ≥ θ}| / |id| ≥ tpr_target`.
pub fn tpr_threshold(id: &[f64], tpr_target: f64) -> Result<f64> {
    if id.is_empty() {
        return Err(Error::Empty("ID scores"));
    }
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(Error::Contract(format!("TPR target must be in (0, 1], got {tpr_target}")));
    }
    check_finite(id, "ID scores")?;
    let mut sorted = id.to_vec();
    sorted.sort_by(|a, b| cmp_finite(b, a));
    let n = sorted.len() as f64;
    // k = n always qualifies because the target is at most 1.
    let k = (1..=sorted.len())
        .find(|&k| k as f64 / n >= tpr_target)
        .unwrap_or(sorted.len());
    Ok(sorted[k - 1])
}

pub fn fpr_at_tpr(id: &[f64], ood: &[f64], tpr_target: f64) -> Result<f64> {
    check_scores(id, ood)?;
    let theta = tpr_threshold(id, tpr_target)?;
    let fp = ood.iter().filter(|&&s| s >= theta).count();
    Ok(fp as f64 / ood.len() as f64)
}

/// Fraction of samples whose most probable class is their label.
pub fn id_accuracy(samples: &[Sample], g: &TextFeatures, tau: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("ID samples"));
    }
    let mut correct = 0usize;
    for s in samples {
        let label = s.id_label()?;
        if argmax(&id_probability(&s.global, g, tau)?) == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMetrics {
    pub name: String,
    pub fpr95: f64,
    pub auroc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub datasets: Vec<DatasetMetrics>,
    pub avg_fpr95: f64,
    pub avg_auroc: f64,
    pub id_accuracy: f64,
    pub conflict: Option<ConflictStats>,
}

impl EvalReport {
    /// Builds the report; averages are the unweighted mean over datasets.
    pub fn new(datasets: Vec<DatasetMetrics>, id_accuracy: f64, conflict: Option<ConflictStats>) -> Result<Self> {
        if datasets.is_empty() {
            return Err(Error::Empty("OOD datasets"));
        }
        let k = datasets.len() as f64;
        let avg_fpr95 = datasets.iter().map(|d| d.fpr95).sum::<f64>() / k;
        let avg_auroc = datasets.iter().map(|d| d.auroc).sum::<f64>() / k;
        Ok(Self {
            datasets,
            avg_fpr95,
            avg_auroc,
            id_accuracy,
            conflict,
        })
    }

    pub fn with_conflict(mut self, stats: ConflictStats) -> Self {
        self.conflict = Some(stats);
        self
    }

    pub fn conflict_ratio(&self) -> Option<f64> {
        self.conflict.as_ref().map(ConflictStats::conflict_ratio)
    }

    /// One row per OOD dataset plus the average row.
    pub fn rows(&self, strategy: &str, seed: Option<u64>) -> Vec<ReportRow> {
        let row = |dataset: &str, fpr95, auroc| ReportRow {
            strategy: strategy.to_string(),
            dataset: dataset.to_string(),
            fpr95,
            auroc,
            id_acc: self.id_accuracy,
            conflict_ratio: self.conflict_ratio(),
            seed,
        };
        self.datasets
            .iter()
            .map(|d| row(&d.name, d.fpr95, d.auroc))
            .chain(std::iter::once(row(AVERAGE_ROW, self.avg_fpr95, self.avg_auroc)))
            .collect()
    }
}

/// One line of the evaluation CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub strategy: String,
    pub dataset: String,
    pub fpr95: f64,
    pub auroc: f64,
    pub id_acc: f64,
    pub conflict_ratio: Option<f64>,
    /// `None` marks a mean over seeds, written as `mean`.
    pub seed: Option<u64>,
}

impl ReportRow {
    fn fields(&self) -> [String; 7] {
        [
            self.strategy.clone(),
            self.dataset.clone(),
            format!("{:.6}", self.fpr95),
            format!("{:.6}", self.auroc),
            format!("{:.6}", self.id_acc),
            self.conflict_ratio.map_or(String::new(), |c| format!("{c:.6}")),
            self.seed.map_or("mean".to_string(), |s| s.to_string()),
        ]
    }
}

/// Writes rows under [`CSV_HEADER`]. Floats are fixed to six decimals so
/// identical runs give byte-identical files.
pub fn write_report_csv<W: io::Write>(rows: &[ReportRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record(r.fields()).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn report_csv_string(rows: &[ReportRow]) -> Result<String> {
    let mut buf = Vec::new();
    write_report_csv(rows, &mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Contract(e.to_string()))
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Contract(format!("csv: {other:?}")),
    }
}

/// Aligned text table, one line per strategy, FPR95 and AUROC per dataset
/// in percent, then the average and ID accuracy. When a strategy has rows
/// for several seeds the values are averaged.
pub fn render_pretty(rows: &[ReportRow]) -> String {
    let mut strategies: Vec<&str> = Vec::new();
    let mut datasets: Vec<&str> = Vec::new();
    for r in rows {
        if !strategies.contains(&r.strategy.as_str()) {
            strategies.push(&r.strategy);
        }
        if r.dataset != AVERAGE_ROW && !datasets.contains(&r.dataset.as_str()) {
            datasets.push(&r.dataset);
        }
    }
    datasets.push(AVERAGE_ROW);

    let mut header = vec!["method".to_string()];
    for d in &datasets {
        header.push(format!("{d} FPR95"));
        header.push(format!("{d} AUROC"));
    }
    header.push("ID acc".into());
    header.push("conflict".into());

    let mut table = vec![header];
    for s in &strategies {
        let mean = |d: &str, pick: fn(&ReportRow) -> Option<f64>| {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| r.strategy == *s && r.dataset == d)
                .filter_map(pick)
                .collect();
            if vals.is_empty() {
                f64::NAN
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        };
        let mut line = vec![s.to_string()];
        for d in &datasets {
            line.push(format!("{:.2}", 100.0 * mean(d, |r| Some(r.fpr95))));
            line.push(format!("{:.2}", 100.0 * mean(d, |r| Some(r.auroc))));
        }
        line.push(format!("{:.2}", 100.0 * mean(AVERAGE_ROW, |r| Some(r.id_acc))));
        let conflict = mean(AVERAGE_ROW, |r| r.conflict_ratio);
        line.push(if conflict.is_nan() { "-".into() } else { format!("{conflict:.3}") });
        table.push(line);
    }

    let ncol = table[0].len();
    let widths: Vec<usize> = (0..ncol)
        .map(|c| table.iter().map(|l| l[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, line) in table.iter().enumerate() {
        let cells: Vec<String> = line
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (cell, &w))| if c == 0 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        if i == 0 {
            let total = widths.iter().sum::<usize>() + 2 * (ncol - 1);
            let _ = writeln!(out, "{}", "-".repeat(total));
        }
    }
    out
}

/// Fraction of all regions of `bank` that the rank rule would select
/// under the given prompt.
pub fn selection_rate(p: &PromptParams, enc: &FrozenTextEncoder, bank: &FeatureBank, k_rank: usize) -> Result<f64> {
    let g = encode_text(p, enc)?;
    let (mut selected, mut total) = (0usize, 0usize);
    for i in 0..bank.n_samples() {
        let s = bank.sample(i);
        let label = s.id_label()?;
        let sel = select_ood_regions(&region_probabilities(&s, &g, enc.tau())?, label, k_rank);
        selected += sel.selected.len();
        total += s.regions.len();
    }
    if total == 0 {
        return Err(Error::Empty("regions"));
    }
    Ok(selected as f64 / total as f64)
}

fn score_bank(bank: &FeatureBank, g: &TextFeatures, tau: f64) -> Result<Vec<ScoredSample>> {
    if bank.is_empty() {
        return Err(Error::Empty("feature bank"));
    }
    if bank.d_embed != g.dim() {
        return Err(Error::DimensionMismatch {
            context: "bank feature width vs text features",
            expected: g.dim(),
            got: bank.d_embed,
        });
    }
    // Each sample is scored independently; the collect keeps input order.
    (0..bank.n_samples())
        .into_par_iter()
        .map(|i| score_sample(&bank.sample(i), g, tau))
        .collect()
}

/// Scores every sample with [`mcm_score`] and assembles the report.
pub fn evaluate(
    p: &PromptParams,
    enc: &FrozenTextEncoder,
    id_test: &FeatureBank,
    ood_banks: &[(String, FeatureBank)],
    tau: f64,
) -> Result<EvalReport> {
    let g = encode_text(p, enc)?;
    let id_scored = score_bank(id_test, &g, tau)?;
    if id_scored.iter().any(|s| !s.is_id) {
        return Err(Error::Contract("ID test bank contains unlabeled samples".into()));
    }
    if let Some(label) = id_scored.iter().filter_map(|s| s.true_class).find(|&l| l >= g.n_classes()) {
        return Err(Error::Contract(format!("label {label} out of range for {} classes", g.n_classes())));
    }
    let correct = id_scored.iter().filter(|s| s.predicted_class == s.true_class).count();
    let id_accuracy = correct as f64 / id_scored.len() as f64;
    let id_scores: Vec<f64> = id_scored.iter().map(|s| s.score).collect();

    if ood_banks.is_empty() {
        return Err(Error::Empty("OOD datasets"));
    }
    let mut datasets = Vec::with_capacity(ood_banks.len());
    for (name, bank) in ood_banks {
        let ood_scores: Vec<f64> = score_bank(bank, &g, tau)?.into_iter().map(|s| s.score).collect();
        datasets.push(DatasetMetrics {
            name: name.clone(),
            fpr95: fpr_at_tpr(&id_scores, &ood_scores, DEFAULT_TPR_TARGET)?,
            auroc: auroc(&id_scores, &ood_scores)?,
        });
    }
    EvalReport::new(datasets, id_accuracy, None)
}
