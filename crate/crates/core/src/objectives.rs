//! ID cross-entropy, entropy regularization over ID-irrelevant regions, their
//! λ-weighted sum, and the analytic gradients of each w.r.t. the prompt.
//!
//! Region selection is rank-based: a region is ID-irrelevant when the
//! ground-truth class is not among its `k_rank` most probable classes. The
//! selection is a stop-gradient constant within a step.

use crate::align::FlatGradient;
use crate::error::{Error, Result};
use crate::model::{class_logits, FrozenTextEncoder, PromptParams, TextEncoding, TextFeatures};
use crate::numerics::{argmax, check_finite, entropy, log_softmax, softmax};

/// One image: a global feature, zero or more region features, and a label
/// (`None` for OOD).
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub global: Vec<f64>,
    pub regions: Vec<Vec<f64>>,
    pub label: Option<usize>,
}

impl Sample {
    pub fn id_label(&self) -> Result<usize> {
        self.label
            .ok_or_else(|| Error::Contract("OOD-labeled sample where an ID sample is required".into()))
    }
}

/// Regions treated as surrogate OOD for one sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionSelection {
    pub selected: Vec<usize>,
    /// 1-based rank of the ground-truth class in each region.
    pub ranks: Vec<usize>,
}

impl RegionSelection {
    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_coop: f64,
    pub l_ood: f64,
    pub l_total: f64,
    pub n_selected: usize,
}

pub fn id_probability(f: &[f64], g: &TextFeatures, tau: f64) -> Result<Vec<f64>> {
    softmax(&class_logits(f, g, tau)?)
}

/// `−ln probs[label]`.
///
/// Training never goes through this; it uses [`ce_loss_from_logits`].
pub fn ce_loss(probs: &[f64], label: usize) -> Result<f64> {
    let p = probs.get(label).ok_or_else(|| {
        Error::Contract(format!("label {label} out of range for {} classes", probs.len()))
    })?;
    Ok(-p.ln())
}

pub fn ce_loss_from_logits(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::Contract(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    check_finite(logits, "logits")?;
    let zy = logits[label];
    // ln(1 + Σ_{k≠y} exp(z_k − z_y)) keeps full precision for confident
    // samples, where −log_softmax would cancel.
    if logits.iter().all(|&z| z <= zy) {
        let rest: f64 = logits
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != label)
            .map(|(_, z)| (z - zy).exp())
            .sum();
        return Ok(rest.ln_1p());
    }
    Ok(-log_softmax(logits)?[label])
}

pub fn region_probabilities(s: &Sample, g: &TextFeatures, tau: f64) -> Result<Vec<Vec<f64>>> {
    if s.regions.is_empty() {
        return Err(Error::Contract("sample has no regions".into()));
    }
    s.regions.iter().map(|r| id_probability(r, g, tau)).collect()
}

/// 1-based rank of `label` in `probs` by descending probability; a tied
/// class with a lower index ranks ahead.
pub fn class_rank(probs: &[f64], label: usize) -> usize {
    let pl = probs[label];
    1 + probs
        .iter()
        .enumerate()
        .filter(|&(k, &pk)| k != label && (pk > pl || (pk == pl && k < label)))
        .count()
}

/// Smallest probability gap between the ground-truth class and any other
/// class; how far a region is from a rank flip.
pub fn rank_margin(probs: &[f64], label: usize) -> f64 {
    probs
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != label)
        .map(|(_, pk)| (pk - probs[label]).abs())
        .fold(f64::INFINITY, f64::min)
}

pub fn select_ood_regions(region_probs: &[Vec<f64>], label: usize, k_rank: usize) -> RegionSelection {
    let ranks: Vec<usize> = region_probs.iter().map(|p| class_rank(p, label)).collect();
    let selected = ranks
        .iter()
        .enumerate()
        .filter(|&(_, &r)| r > k_rank)
        .map(|(j, _)| j)
        .collect();
    RegionSelection { selected, ranks }
}

/// Mean of `−H(p_j)` over selected regions; `0` when nothing is selected.
pub fn ood_reg_loss(region_probs: &[Vec<f64>], sel: &RegionSelection) -> Result<f64> {
    if sel.selected.is_empty() {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for &j in &sel.selected {
        let p = region_probs
            .get(j)
            .ok_or_else(|| Error::Contract(format!("selected region {j} out of range")))?;
        acc -= entropy(p)?;
    }
    Ok(acc / sel.selected.len() as f64)
}

pub fn combined_loss(s: &Sample, g: &TextFeatures, tau: f64, lambda: f64, k_rank: usize) -> Result<LossBreakdown> {
    let label = s.id_label()?;
    let logits = class_logits(&s.global, g, tau)?;
    let l_coop = ce_loss_from_logits(&logits, label)?;
    let (l_ood, n_selected) = if s.regions.is_empty() {
        (0.0, 0)
    } else {
        let rp = region_probabilities(s, g, tau)?;
        let sel = select_ood_regions(&rp, label, k_rank);
        (ood_reg_loss(&rp, &sel)?, sel.selected.len())
    };
    Ok(LossBreakdown {
        l_coop,
        l_ood,
        l_total: l_coop + lambda * l_ood,
        n_selected,
    })
}

/// Everything one pass over a batch produces.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    /// Gradient of the mean cross-entropy.
    pub g_id: FlatGradient,
    /// `scale ·` gradient of the mean regularization loss.
    pub g_ood: FlatGradient,
    pub mean_l_coop: f64,
    pub mean_l_ood: f64,
    pub n_correct: usize,
    pub n_selected: usize,
}

/// Computes both gradients from one forward pass of the text encoder.
///
/// `ood_scale` multiplies the regularization gradient (λ for the default
/// convention). Per-sample contributions are accumulated in ascending sample
/// order.
pub fn batch_gradients(
    batch: &[Sample],
    p: &PromptParams,
    enc: &FrozenTextEncoder,
    ood_scale: f64,
    k_rank: usize,
) -> Result<BatchGradients> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let tau = enc.tau();
    let text = TextEncoding::forward(p, enc)?;
    let g = text.features();
    let (n_classes, d) = (g.n_classes(), g.dim());
    let inv_b = 1.0 / batch.len() as f64;

    let mut up_ce = vec![vec![0.0; d]; n_classes];
    let mut up_ood = vec![vec![0.0; d]; n_classes];
    let (mut sum_coop, mut sum_ood) = (0.0, 0.0);
    let (mut n_correct, mut n_selected) = (0, 0);

    for s in batch {
        let label = s.id_label()?;
        if label >= n_classes {
            return Err(Error::Contract(format!("label {label} out of range for {n_classes} classes")));
        }
        let logits = class_logits(&s.global, g, tau)?;
        let logp = log_softmax(&logits)?;
        sum_coop -= logp[label];
        if argmax(&logits) == label {
            n_correct += 1;
        }
        // ∂CE/∂z = softmax − onehot; ∂z_n/∂g_n = f / τ.
        for (n, row) in up_ce.iter_mut().enumerate() {
            let dz = logp[n].exp() - if n == label { 1.0 } else { 0.0 };
            let c = dz * inv_b / tau;
            for (acc, &fi) in row.iter_mut().zip(&s.global) {
                *acc += c * fi;
            }
        }

        if s.regions.is_empty() {
            continue;
        }
        let region_logits: Vec<Vec<f64>> = s
            .regions
            .iter()
            .map(|r| class_logits(r, g, tau))
            .collect::<Result<_>>()?;
        let region_logp: Vec<Vec<f64>> = region_logits
            .iter()
            .map(|z| log_softmax(z))
            .collect::<Result<_>>()?;
        let region_probs: Vec<Vec<f64>> = region_logits
            .iter()
            .map(|z| softmax(z))
            .collect::<Result<_>>()?;
        let sel = select_ood_regions(&region_probs, label, k_rank);
        if sel.is_empty() {
            continue;
        }
        n_selected += sel.selected.len();
        sum_ood += ood_reg_loss(&region_probs, &sel)?;
        if ood_scale == 0.0 {
            continue;
        }
        let inv_m = 1.0 / sel.selected.len() as f64;
        for &j in &sel.selected {
            let (pj, lpj) = (&region_probs[j], &region_logp[j]);
            let h = entropy(pj)?;
            // ∂(Σ p ln p)/∂z_k = p_k (ln p_k + H).
            for (n, row) in up_ood.iter_mut().enumerate() {
                let dz = pj[n] * (lpj[n] + h);
                let c = ood_scale * dz * inv_b * inv_m / tau;
                for (acc, &ri) in row.iter_mut().zip(&s.regions[j]) {
                    *acc += c * ri;
                }
            }
        }
    }

    let g_id = text.backward(enc, &up_ce)?;
    let g_ood = if ood_scale == 0.0 || n_selected == 0 {
        FlatGradient::zeros(enc.param_len())
    } else {
        text.backward(enc, &up_ood)?
    };
    Ok(BatchGradients {
        g_id,
        g_ood,
        mean_l_coop: sum_coop * inv_b,
        mean_l_ood: sum_ood * inv_b,
        n_correct,
        n_selected,
    })
}

/// Gradient of the batch-mean cross-entropy w.r.t. the prompt.
pub fn grad_ce(batch: &[Sample], p: &PromptParams, enc: &FrozenTextEncoder) -> Result<FlatGradient> {
    Ok(batch_gradients(batch, p, enc, 0.0, usize::MAX)?.g_id)
}

/// `λ ·` gradient of the batch-mean regularization loss w.r.t. the prompt.
pub fn grad_ood(
    batch: &[Sample],
    p: &PromptParams,
    enc: &FrozenTextEncoder,
    lambda: f64,
    k_rank: usize,
) -> Result<FlatGradient> {
    Ok(batch_gradients(batch, p, enc, lambda, k_rank)?.g_ood)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{encode_text, CtxInit, EncoderSpec};
    use crate::numerics::SeededRng;

    #[test]
    fn confident_ce_keeps_relative_precision() {
        // exp(-20) ≈ 2.06e-9; the naive form cancels against z_y = 100.
        let loss = ce_loss_from_logits(&[100.0, 80.0, 50.0], 0).unwrap();
        let expect = ((-20.0f64).exp() + (-50.0f64).exp()).ln_1p();
        assert!((loss - expect).abs() <= 1e-15 * expect);
        let wrong = ce_loss_from_logits(&[100.0, 80.0], 1).unwrap();
        assert!((wrong - (20.0 + (-20.0f64).exp().ln_1p())).abs() < 1e-12);
    }

    fn basis(d: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    fn two_class_features() -> TextFeatures {
        TextFeatures::new(vec![basis(3, 0), basis(3, 1)]).unwrap()
    }

    #[test]
    fn id_probability_examples() {
        let g = two_class_features();
        let p = id_probability(&basis(3, 2), &g, 0.01).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);

        let f = [0.2, 0.1, (0.95f64).sqrt()];
        let p = id_probability(&f, &g, 0.1).unwrap();
        assert!((p[0] - 0.731_058_578_630_004_9).abs() < 1e-13);
        assert!((p[1] - 0.268_941_421_369_995_1).abs() < 1e-13);

        let p = id_probability(&f, &g, 1e6).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn ce_examples() {
        assert!((ce_loss(&[0.25; 4], 3).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert_eq!(ce_loss(&[0.0, 1.0], 1).unwrap(), 0.0);
        // −ln(1 − σ(1)) = ln(1 + e), high-precision reference.
        let l = ce_loss_from_logits(&[2.0, 1.0], 1).unwrap();
        assert!((l - 1.313_261_687_518_222_8).abs() < 1e-14);
        assert!(ce_loss(&[0.5, 0.5], 2).is_err());
        assert!(ce_loss_from_logits(&[0.5, 0.5], 2).is_err());
    }

    #[test]
    fn region_probability_examples() {
        let g = two_class_features();
        let f = vec![0.6, 0.8, 0.0];
        let s = Sample {
            global: f.clone(),
            regions: vec![f.clone(), basis(3, 2)],
            label: Some(0),
        };
        let rp = region_probabilities(&s, &g, 0.1).unwrap();
        assert_eq!(rp[0], id_probability(&f, &g, 0.1).unwrap());
        assert_eq!(rp[1], vec![0.5, 0.5]);

        let empty = Sample { regions: vec![], ..s };
        assert!(region_probabilities(&empty, &g, 0.1).is_err());
    }

    #[test]
    fn rows_sum_to_one_on_random_instances() {
        let mut rng = SeededRng::new(9);
        let g = TextFeatures::new((0..5).map(|_| rng.unit_vector(7)).collect()).unwrap();
        let s = Sample {
            global: rng.unit_vector(7),
            regions: (0..6).map(|_| rng.unit_vector(7)).collect(),
            label: Some(2),
        };
        for row in region_probabilities(&s, &g, 0.05).unwrap() {
            let total: f64 = row.iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn selection_examples() {
        let probs = vec![vec![0.6, 0.3, 0.1], vec![0.1, 0.3, 0.6]];
        let sel = select_ood_regions(&probs, 0, 1);
        assert_eq!(sel.ranks, vec![1, 3]);
        assert_eq!(sel.selected, vec![1]);

        let sel = select_ood_regions(&[vec![0.1, 0.2, 0.3, 0.4]], 1, 2);
        assert_eq!(sel.ranks, vec![3]);
        assert_eq!(sel.selected, vec![0]);

        let sel = select_ood_regions(&probs, 2, 3);
        assert!(sel.is_empty());
    }

    #[test]
    fn selection_ties_favor_lower_index() {
        let probs = vec![vec![0.25; 4]];
        let ranks: Vec<usize> = (0..4).map(|l| select_ood_regions(&probs, l, 4).ranks[0]).collect();
        assert_eq!(ranks, vec![1, 2, 3, 4]);
        assert_eq!(select_ood_regions(&probs, 3, 2), select_ood_regions(&probs, 3, 2));
    }

    #[test]
    fn ood_loss_examples() {
        let sel = RegionSelection { selected: vec![0], ranks: vec![2] };
        assert!((ood_reg_loss(&[vec![0.25; 4]], &sel).unwrap() + 4f64.ln()).abs() < 1e-15);

        let none = RegionSelection { selected: vec![], ranks: vec![1] };
        assert_eq!(ood_reg_loss(&[vec![1.0, 0.0]], &none).unwrap(), 0.0);

        let probs: Vec<Vec<f64>> = vec![vec![0.7, 0.2, 0.1], vec![0.5, 0.5, 0.0]];
        let h: Vec<f64> = probs
            .iter()
            .map(|p| -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>())
            .collect();
        let both = RegionSelection { selected: vec![0, 1], ranks: vec![3, 3] };
        let l = ood_reg_loss(&probs, &both).unwrap();
        assert!((l + (h[0] + h[1]) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn combined_loss_examples() {
        let g = two_class_features();
        let s = Sample {
            global: vec![0.6, 0.8, 0.0],
            regions: vec![vec![0.8, 0.6, 0.0], vec![0.0, 1.0, 0.0]],
            label: Some(0),
        };
        let b0 = combined_loss(&s, &g, 0.1, 0.0, 1).unwrap();
        assert_eq!(b0.l_total, b0.l_coop);
        assert_eq!(b0.n_selected, 1);

        let none = combined_loss(&s, &g, 0.1, 0.7, 2).unwrap();
        assert_eq!(none.n_selected, 0);
        assert_eq!(none.l_total, none.l_coop);

        let b = combined_loss(&s, &g, 0.1, 0.25, 1).unwrap();
        assert!((b.l_total - (b.l_coop + 0.25 * b.l_ood)).abs() < 1e-12);
        assert!(b.l_coop >= 0.0 && b.l_ood <= 0.0 && b.l_ood >= -(2f64.ln()) - 1e-12);

        let ood = Sample { label: None, ..s };
        assert!(matches!(combined_loss(&ood, &g, 0.1, 0.25, 1), Err(Error::Contract(_))));
    }

    #[test]
    fn arithmetic_of_total() {
        let b = LossBreakdown { l_coop: 1.0, l_ood: -0.5, l_total: 1.0 + 0.25 * -0.5, n_selected: 1 };
        assert_eq!(b.l_total, 0.875);
    }

    fn random_setup(rng: &mut SeededRng) -> (FrozenTextEncoder, PromptParams, Vec<Sample>) {
        let enc = FrozenTextEncoder::random(
            EncoderSpec { n_classes: 3, ctx_len: 2, d_token: 4, d_embed: 6, tau: 0.1 },
            rng,
        )
        .unwrap();
        let p = PromptParams::init(2, 4, CtxInit::Gaussian { std: 0.3 }, rng).unwrap();
        let batch = (0..4)
            .map(|i| Sample {
                global: rng.unit_vector(6),
                regions: (0..2).map(|_| rng.unit_vector(6)).collect(),
                label: Some(i % 3),
            })
            .collect();
        (enc, p, batch)
    }

    #[test]
    fn ood_gradient_vanishes_without_selection_or_lambda() {
        let mut rng = SeededRng::new(21);
        let (enc, p, batch) = random_setup(&mut rng);
        let g = grad_ood(&batch, &p, &enc, 0.5, 3).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
        let g = grad_ood(&batch, &p, &enc, 0.0, 1).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
        assert!(grad_ce(&[], &p, &enc).is_err());
    }

    #[test]
    fn ce_logit_gradient_sums_to_zero() {
        let mut rng = SeededRng::new(22);
        for _ in 0..1000 {
            let n = 2 + rng.below(10);
            let z: Vec<f64> = (0..n).map(|_| rng.uniform(-20.0, 20.0)).collect();
            let label = rng.below(n);
            let p = softmax(&z).unwrap();
            let s: f64 = p.iter().enumerate().map(|(k, pk)| pk - if k == label { 1.0 } else { 0.0 }).sum();
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn descent_on_ood_loss_raises_selected_entropy() {
        let mut rng = SeededRng::new(23);
        let mut checked = 0;
        while checked < 100 {
            let (enc, p, batch) = random_setup(&mut rng);
            let g = grad_ood(&batch, &p, &enc, 1.0, 1).unwrap();
            if g.norm() == 0.0 {
                continue;
            }
            let mean_entropy = |q: &PromptParams, sels: &[RegionSelection]| -> f64 {
                let tf = encode_text(q, &enc).unwrap();
                let mut acc = 0.0;
                for (s, sel) in batch.iter().zip(sels) {
                    let rp = region_probabilities(s, &tf, enc.tau()).unwrap();
                    acc -= ood_reg_loss(&rp, sel).unwrap();
                }
                acc / batch.len() as f64
            };
            let tf = encode_text(&p, &enc).unwrap();
            let sels: Vec<RegionSelection> = batch
                .iter()
                .map(|s| {
                    let rp = region_probabilities(s, &tf, enc.tau()).unwrap();
                    select_ood_regions(&rp, s.label.unwrap(), 1)
                })
                .collect();
            let before = mean_entropy(&p, &sels);
            let mut q = p.clone();
            q.apply_update(&g, 1e-4 / g.norm()).unwrap();
            let after = mean_entropy(&q, &sels);
            assert!(after >= before - 1e-12, "{after} < {before}");
            checked += 1;
        }
    }
}
