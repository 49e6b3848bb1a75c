//! Self-check suites run by `gacoop grad-check`: analytic prompt gradients
//! against central finite differences, and geometric properties of the
//! alignment rule on random gradient pairs.

use crate::align::{align, FlatGradient, DEFAULT_ALIGN_EPS};
use crate::error::{Error, Result};
use crate::model::{class_logits, encode_text, CtxInit, EncoderSpec, FrozenTextEncoder, PromptParams};
use crate::numerics::{derive_seed, dot_unchecked, norm, SeededRng};
use crate::objectives::{
    batch_gradients, ce_loss_from_logits, ood_reg_loss, rank_margin, region_probabilities,
    select_ood_regions, RegionSelection, Sample,
};

const MAX_REDRAWS: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct FdConfig {
    pub trials: usize,
    pub n_classes: usize,
    pub ctx_len: usize,
    pub d_token: usize,
    pub d_embed: usize,
    pub n_regions: usize,
    pub batch: usize,
    pub tau: f64,
    pub lambda: f64,
    pub k_rank: usize,
    pub h: f64,
    /// Instances whose region probabilities sit closer than this to a rank
    /// flip are re-drawn.
    pub min_margin: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            n_classes: 3,
            ctx_len: 2,
            d_token: 4,
            d_embed: 6,
            n_regions: 2,
            batch: 2,
            tau: 0.01,
            lambda: 0.25,
            k_rank: 1,
            h: 1e-4,
            min_margin: 1e-3,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub trials: usize,
    pub redraws: usize,
    pub max_rel_err_ce: f64,
    pub max_rel_err_ood: f64,
    pub tolerance: f64,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err_ce < self.tolerance && self.max_rel_err_ood < self.tolerance
    }
}

/// `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let inf = |v: &mut dyn Iterator<Item = f64>| v.fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = inf(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = inf(&mut a.iter().copied()).max(inf(&mut b.iter().copied()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// One random problem with every region rank safely away from a flip.
pub struct FdInstance {
    pub enc: FrozenTextEncoder,
    pub params: PromptParams,
    pub batch: Vec<Sample>,
    pub selections: Vec<RegionSelection>,
}

fn draw_instance(cfg: &FdConfig, rng: &mut SeededRng) -> Result<FdInstance> {
    let spec = EncoderSpec {
        n_classes: cfg.n_classes,
        ctx_len: cfg.ctx_len,
        d_token: cfg.d_token,
        d_embed: cfg.d_embed,
        tau: cfg.tau,
    };
    let enc = FrozenTextEncoder::random(spec, rng)?;
    let params = PromptParams::init(cfg.ctx_len, cfg.d_token, CtxInit::Gaussian { std: 1.0 }, rng)?;
    let batch = (0..cfg.batch)
        .map(|_| Sample {
            global: rng.unit_vector(cfg.d_embed),
            regions: (0..cfg.n_regions).map(|_| rng.unit_vector(cfg.d_embed)).collect(),
            label: Some(rng.below(cfg.n_classes)),
        })
        .collect::<Vec<_>>();
    let g = encode_text(&params, &enc)?;
    let mut selections = Vec::with_capacity(batch.len());
    for s in &batch {
        let label = s.id_label()?;
        let rp = region_probabilities(s, &g, cfg.tau)?;
        selections.push(select_ood_regions(&rp, label, cfg.k_rank));
    }
    Ok(FdInstance {
        enc,
        params,
        batch,
        selections,
    })
}

fn instance_ok(inst: &FdInstance, cfg: &FdConfig) -> Result<bool> {
    let g = encode_text(&inst.params, &inst.enc)?;
    for s in &inst.batch {
        let label = s.id_label()?;
        for p in region_probabilities(s, &g, cfg.tau)? {
            if rank_margin(&p, label) < cfg.min_margin {
                return Ok(false);
            }
        }
    }
    Ok(inst.selections.iter().any(|s| !s.is_empty()))
}

/// Draws until an instance passes the margin and non-empty-selection
/// filters. Returns the instance and the number of rejected draws.
pub fn draw_fd_instance(cfg: &FdConfig, rng: &mut SeededRng) -> Result<(FdInstance, usize)> {
    for redraws in 0..MAX_REDRAWS {
        let inst = draw_instance(cfg, rng)?;
        if instance_ok(&inst, cfg)? {
            return Ok((inst, redraws));
        }
    }
    Err(Error::Property(format!("no admissible instance after {MAX_REDRAWS} draws")))
}

fn with_params(inst: &FdInstance, data: Vec<f64>) -> Result<PromptParams> {
    PromptParams::new(inst.params.ctx_len(), inst.params.d_token(), data)
}

/// Batch-mean cross-entropy at the given context.
pub fn ce_objective(inst: &FdInstance, p: &PromptParams) -> Result<f64> {
    let g = encode_text(p, &inst.enc)?;
    let mut acc = 0.0;
    for s in &inst.batch {
        acc += ce_loss_from_logits(&class_logits(&s.global, &g, inst.enc.tau())?, s.id_label()?)?;
    }
    Ok(acc / inst.batch.len() as f64)
}

/// Batch-mean regularization loss with the selection frozen at the
/// instance's base point.
pub fn ood_objective(inst: &FdInstance, p: &PromptParams) -> Result<f64> {
    let g = encode_text(p, &inst.enc)?;
    let mut acc = 0.0;
    for (s, sel) in inst.batch.iter().zip(&inst.selections) {
        acc += ood_reg_loss(&region_probabilities(s, &g, inst.enc.tau())?, sel)?;
    }
    Ok(acc / inst.batch.len() as f64)
}

pub fn central_difference(
    inst: &FdInstance,
    h: f64,
    f: impl Fn(&FdInstance, &PromptParams) -> Result<f64>,
) -> Result<Vec<f64>> {
    let base = inst.params.as_slice().to_vec();
    let mut out = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut plus = base.clone();
        let mut minus = base.clone();
        plus[i] += h;
        minus[i] -= h;
        let fp = f(inst, &with_params(inst, plus)?)?;
        let fm = f(inst, &with_params(inst, minus)?)?;
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}

pub fn run_fd_suite(cfg: &FdConfig) -> Result<FdReport> {
    let mut rng = SeededRng::new(derive_seed(cfg.seed, 0x6763));
    let mut report = FdReport {
        trials: cfg.trials,
        redraws: 0,
        max_rel_err_ce: 0.0,
        max_rel_err_ood: 0.0,
        tolerance: cfg.tolerance,
    };
    for _ in 0..cfg.trials {
        let (inst, redraws) = draw_fd_instance(cfg, &mut rng)?;
        report.redraws += redraws;
        let grads = batch_gradients(&inst.batch, &inst.params, &inst.enc, cfg.lambda, cfg.k_rank)?;
        let fd_ce = central_difference(&inst, cfg.h, ce_objective)?;
        let fd_ood: Vec<f64> = central_difference(&inst, cfg.h, ood_objective)?
            .into_iter()
            .map(|x| cfg.lambda * x)
            .collect();
        report.max_rel_err_ce = report.max_rel_err_ce.max(relative_error(&grads.g_id, &fd_ce));
        report.max_rel_err_ood = report.max_rel_err_ood.max(relative_error(&grads.g_ood, &fd_ood));
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignCheckConfig {
    pub pairs: usize,
    pub dims: Vec<usize>,
    pub seed: u64,
}

impl Default for AlignCheckConfig {
    fn default() -> Self {
        Self {
            pairs: 10_000,
            dims: vec![2, 16, 512, 4096],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AlignCheckReport {
    pub pairs: usize,
    pub obtuse: usize,
    /// First few violations, for the diagnostic.
    pub violations: Vec<String>,
    pub n_violations: usize,
}

impl AlignCheckReport {
    pub fn passed(&self) -> bool {
        self.n_violations == 0
    }

    fn fail(&mut self, msg: String) {
        self.n_violations += 1;
        if self.violations.len() < 10 {
            self.violations.push(msg);
        }
    }
}

/// Relative tolerance for idempotence and scale covariance, which compare
/// two separately rounded projections.
pub const ALIGN_REL_TOL: f64 = 1e-10;

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

/// Checks one pair against the five alignment properties; returns the
/// names of the properties that fail.
pub fn check_align_pair(gi: &FlatGradient, go: &FlatGradient, s: f64, t: f64) -> Result<Vec<&'static str>> {
    let mut bad = Vec::new();
    let a = align(gi, go, DEFAULT_ALIGN_EPS)?;
    let (ni, no) = (gi.norm(), go.norm());

    if dot_unchecked(&a, go) < -1e-9 * ni * no {
        bad.push("non-conflict");
    }
    if norm(&a) > ni + 1e-12 {
        bad.push("norm-bound");
    }
    if dot_unchecked(gi, go) >= 0.0 && a.as_slice() != gi.as_slice() {
        bad.push("acute-identity");
    }
    let twice = align(&a, go, DEFAULT_ALIGN_EPS)?;
    if max_abs_diff(&twice, &a) > ALIGN_REL_TOL * ni {
        bad.push("idempotence");
    }
    let scaled = align(&gi.scaled(s), &go.scaled(t), DEFAULT_ALIGN_EPS)?;
    if max_abs_diff(&scaled, &a.scaled(s)) > ALIGN_REL_TOL * s * ni {
        bad.push("scale-covariance");
    }
    Ok(bad)
}

/// Random pairs with entries `N(0, 1/dim)`, cycling through `dims`. The
/// positive scales for the covariance check are drawn from `[0.1, 10]`.
pub fn run_align_suite(cfg: &AlignCheckConfig) -> Result<AlignCheckReport> {
    if cfg.dims.is_empty() {
        return Err(Error::config("dims", "at least one dimension is required"));
    }
    let mut rng = SeededRng::new(derive_seed(cfg.seed, 0x616c));
    let mut report = AlignCheckReport {
        pairs: cfg.pairs,
        ..Default::default()
    };
    for k in 0..cfg.pairs {
        let dim = cfg.dims[k % cfg.dims.len()];
        if dim == 0 {
            return Err(Error::config("dims", "dimensions must be positive"));
        }
        let std = 1.0 / (dim as f64).sqrt();
        let gi = FlatGradient::new(rng.gaussian_vec(dim, std))?;
        let go = FlatGradient::new(rng.gaussian_vec(dim, std))?;
        let (s, t) = (rng.uniform(0.1, 10.0), rng.uniform(0.1, 10.0));
        if dot_unchecked(&gi, &go) < 0.0 {
            report.obtuse += 1;
        }
        for name in check_align_pair(&gi, &go, s, t)? {
            report.fail(format!("pair {k} (dim {dim}): {name}"));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_definition() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.5]), 0.2);
    }

    #[test]
    fn small_fd_suite_passes() {
        let r = run_fd_suite(&FdConfig {
            trials: 5,
            ..FdConfig::default()
        })
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn small_align_suite_passes() {
        let r = run_align_suite(&AlignCheckConfig {
            pairs: 400,
            ..AlignCheckConfig::default()
        })
        .unwrap();
        assert!(r.passed(), "{:?}", r.violations);
        assert!(r.obtuse > 100 && r.obtuse < 300);
    }

    #[test]
    fn obtuse_pair_is_projected() {
        // Plain G_i would violate non-conflict here.
        let gi = FlatGradient::new(vec![1.0, 0.0]).unwrap();
        let go = FlatGradient::new(vec![-1.0, 1.0]).unwrap();
        assert!(dot_unchecked(&gi, &go) < -1e-9 * gi.norm() * go.norm());
        assert!(check_align_pair(&gi, &go, 2.0, 3.0).unwrap().is_empty());
    }

    #[test]
    fn frozen_selection_is_respected() {
        let cfg = FdConfig::default();
        let mut rng = SeededRng::new(3);
        let (inst, _) = draw_fd_instance(&cfg, &mut rng).unwrap();
        assert!(inst.selections.iter().any(|s| !s.is_empty()));
        assert!(ood_objective(&inst, &inst.params).unwrap() < 0.0);
    }
}
