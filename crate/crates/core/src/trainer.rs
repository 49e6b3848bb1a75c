//! Plain-SGD prompt training under the three update strategies.

use std::fmt;
use std::str::FromStr;

use crate::align::{align, record_conflict, ConflictStats, FlatGradient, DEFAULT_ALIGN_EPS};
use crate::data::FeatureBank;
use crate::error::{Error, Result};
use crate::model::{CtxInit, EncoderSpec, FrozenTextEncoder, PromptParams};
use crate::numerics::{derive_seed, SeededRng};
use crate::objectives::{batch_gradients, Sample};

/// Sub-seed streams derived from the run seed with [`derive_seed`].
pub mod streams {
    pub const ENCODER: u64 = 1;
    pub const DATA: u64 = 2;
    pub const PROMPT_INIT: u64 = 3;
    pub const BATCHES: u64 = 4;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Strategy {
    /// Cross-entropy only.
    Coop,
    /// Cross-entropy plus λ-weighted regularization, summed.
    Locoop,
    /// Cross-entropy gradient aligned against the regularization gradient.
    Gacoop,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Coop, Strategy::Locoop, Strategy::Gacoop];

    pub fn tag(self) -> u8 {
        match self {
            Strategy::Coop => 0,
            Strategy::Locoop => 1,
            Strategy::Gacoop => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        Strategy::ALL
            .get(tag as usize)
            .copied()
            .ok_or_else(|| Error::InvalidBank(format!("unknown strategy tag {tag}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Coop => "coop",
            Strategy::Locoop => "locoop",
            Strategy::Gacoop => "gacoop",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coop" => Ok(Strategy::Coop),
            "locoop" => Ok(Strategy::Locoop),
            "gacoop" => Ok(Strategy::Gacoop),
            other => Err(Error::config("strategy", format!("unknown strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// `lr_t = lr · (1 + cos(π t / T)) / 2` over global steps `t = 0..T`.
    Cosine,
}

impl FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            other => Err(Error::config("lr_schedule", format!("unknown schedule `{other}`"))),
        }
    }
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub lambda: f64,
    pub tau: f64,
    /// `None` means half the class count.
    pub k_rank: Option<usize>,
    pub ctx_len: usize,
    pub d_token: usize,
    pub d_embed: usize,
    pub seed: u64,
    pub lr_schedule: LrSchedule,
    pub ctx_init: CtxInit,
    /// Ablation: also descend along the regularization gradient after
    /// aligning it against the classification gradient. Not the default rule.
    pub add_ood_gradient: bool,
    /// Ablation: feed the raw regularization gradient (without λ) to the
    /// alignment rule.
    pub raw_ood_gradient: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            strategy: Strategy::Gacoop,
            epochs: 50,
            lr: 0.002,
            batch_size: 32,
            lambda: 0.25,
            tau: 0.01,
            k_rank: None,
            ctx_len: 16,
            d_token: 8,
            d_embed: 64,
            seed: 0,
            lr_schedule: LrSchedule::Cosine,
            ctx_init: CtxInit::default(),
            add_ood_gradient: false,
            raw_ood_gradient: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("lr", format!("must be positive, got {}", self.lr)));
        }
        if self.epochs < 1 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::config("lambda", format!("must be non-negative, got {}", self.lambda)));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::config("tau", format!("must be positive, got {}", self.tau)));
        }
        if self.ctx_len < 1 {
            return Err(Error::config("ctx_len", "must be at least 1"));
        }
        if self.d_token < 1 {
            return Err(Error::config("d_token", "must be at least 1"));
        }
        if self.d_embed < 1 {
            return Err(Error::config("d_embed", "must be at least 1"));
        }
        if let CtxInit::Gaussian { std } = self.ctx_init {
            if !(std >= 0.0) || !std.is_finite() {
                return Err(Error::config("ctx_init_std", format!("must be non-negative, got {std}")));
            }
        }
        Ok(())
    }

    pub fn effective_k_rank(&self, n_classes: usize) -> usize {
        self.k_rank.unwrap_or(n_classes / 2)
    }

    pub fn encoder_spec(&self, n_classes: usize) -> EncoderSpec {
        EncoderSpec {
            n_classes,
            ctx_len: self.ctx_len,
            d_token: self.d_token,
            d_embed: self.d_embed,
            tau: self.tau,
        }
    }

    /// Learning rate at global step `t` of `total`.
    pub fn lr_at(&self, t: usize, total: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let frac = t as f64 / total.max(1) as f64;
                self.lr * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0
            }
        }
    }

    fn ood_scale(&self) -> f64 {
        match (self.strategy, self.raw_ood_gradient) {
            (Strategy::Gacoop, true) => 1.0,
            _ => self.lambda,
        }
    }
}

/// Frozen encoder for a run, drawn from the run seed's encoder stream.
pub fn build_encoder(spec: EncoderSpec, seed: u64) -> Result<FrozenTextEncoder> {
    FrozenTextEncoder::random(spec, &mut SeededRng::new(derive_seed(seed, streams::ENCODER)))
}

/// Initial prompt for a run, drawn from the run seed's init stream.
pub fn init_prompt(cfg: &TrainConfig) -> Result<PromptParams> {
    let mut rng = SeededRng::new(derive_seed(cfg.seed, streams::PROMPT_INIT));
    PromptParams::init(cfg.ctx_len, cfg.d_token, cfg.ctx_init, &mut rng)
}

/// Shuffled sample indices for one epoch, cut into batches; the last batch
/// may be short. The permutation is keyed by `(seed, epoch)` only.
pub fn make_batches(n_samples: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if n_samples == 0 {
        return Err(Error::Empty("training bank"));
    }
    if batch_size == 0 {
        return Err(Error::config("batch_size", "must be at least 1"));
    }
    let mut order: Vec<usize> = (0..n_samples).collect();
    let mut rng = SeededRng::new(derive_seed(derive_seed(seed, streams::BATCHES), epoch as u64));
    rng.shuffle(&mut order);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// What one update did.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub lr: f64,
    pub mean_l_coop: f64,
    pub mean_l_ood: f64,
    pub n_correct: usize,
    pub n_samples: usize,
    pub conflicting: bool,
    pub update: FlatGradient,
}

/// One SGD step: `p ← p − lr · G` with `G` chosen by `cfg.strategy`.
pub fn step(
    p: &mut PromptParams,
    batch: &[Sample],
    cfg: &TrainConfig,
    enc: &FrozenTextEncoder,
    lr: f64,
    stats: &mut ConflictStats,
) -> Result<StepRecord> {
    let k_rank = cfg.effective_k_rank(enc.n_classes());
    let bg = batch_gradients(batch, p, enc, cfg.ood_scale(), k_rank)?;
    let branch = record_conflict(stats, &bg.g_id, &bg.g_ood, DEFAULT_ALIGN_EPS)?;
    let update = match cfg.strategy {
        Strategy::Coop => bg.g_id.clone(),
        Strategy::Locoop => bg.g_id.add(&bg.g_ood)?,
        Strategy::Gacoop => {
            let aligned = align(&bg.g_id, &bg.g_ood, DEFAULT_ALIGN_EPS)?;
            if cfg.add_ood_gradient {
                let reg_scale = if cfg.raw_ood_gradient { cfg.lambda } else { 1.0 };
                let reg = align(&bg.g_ood, &bg.g_id, DEFAULT_ALIGN_EPS)?.scaled(reg_scale);
                aligned.add(&reg)?
            } else {
                aligned
            }
        }
    };
    if let Some(i) = update.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!(
            "update direction entry {i} is {} ({} strategy)",
            update[i], cfg.strategy
        )));
    }
    p.apply_update(&update, lr)?;
    Ok(StepRecord {
        lr,
        mean_l_coop: bg.mean_l_coop,
        mean_l_ood: bg.mean_l_ood,
        n_correct: bg.n_correct,
        n_samples: batch.len(),
        conflicting: branch == crate::align::AlignBranch::Obtuse,
        update,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_coop: f64,
    pub l_ood: f64,
    pub train_accuracy: f64,
    pub conflict_ratio: f64,
    pub lr_last: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub final_checksum: String,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,l_coop,l_ood,train_acc,conflict_ratio,lr\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{:.8},{:.8},{:.6},{:.6},{:.8}\n",
                e.epoch, e.l_coop, e.l_ood, e.train_accuracy, e.conflict_ratio, e.lr_last
            ));
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: PromptParams,
    pub log: TrainLog,
    pub stats: ConflictStats,
}

/// Runs `epochs × batches` steps from the seeded initial prompt.
pub fn train(cfg: &TrainConfig, bank: &FeatureBank, enc: &FrozenTextEncoder) -> Result<TrainOutcome> {
    cfg.validate()?;
    if bank.d_embed != enc.d_embed() {
        return Err(Error::DimensionMismatch {
            context: "bank d_embed vs encoder",
            expected: enc.d_embed(),
            got: bank.d_embed,
        });
    }
    if bank.n_classes != enc.n_classes() {
        return Err(Error::DimensionMismatch {
            context: "bank classes vs encoder",
            expected: enc.n_classes(),
            got: bank.n_classes,
        });
    }
    let samples = bank.samples();
    if let Some(i) = samples.iter().position(|s| s.label.is_none()) {
        return Err(Error::Contract(format!("training sample {i} is labeled OOD")));
    }
    let mut params = init_prompt(cfg)?;
    let steps_per_epoch = samples.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut stats = ConflictStats::default();
    let mut log = TrainLog::default();
    let mut t = 0;
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        let (mut coop, mut ood, mut correct, mut seen, mut conflicts, mut steps) = (0.0, 0.0, 0, 0, 0, 0);
        let mut lr_last = cfg.lr;
        for idx in make_batches(samples.len(), cfg.batch_size, cfg.seed, epoch)? {
            batch.clear();
            batch.extend(idx.iter().map(|&i| samples[i].clone()));
            let lr = cfg.lr_at(t, total);
            let rec = step(&mut params, &batch, cfg, enc, lr, &mut stats)?;
            coop += rec.mean_l_coop * rec.n_samples as f64;
            ood += rec.mean_l_ood * rec.n_samples as f64;
            correct += rec.n_correct;
            seen += rec.n_samples;
            conflicts += usize::from(rec.conflicting);
            steps += 1;
            lr_last = lr;
            t += 1;
        }
        log.epochs.push(EpochLog {
            epoch,
            l_coop: coop / seen as f64,
            l_ood: ood / seen as f64,
            train_accuracy: correct as f64 / seen as f64,
            conflict_ratio: conflicts as f64 / steps as f64,
            lr_last,
        });
    }
    log.final_checksum = params.checksum();
    Ok(TrainOutcome { params, log, stats })
}
