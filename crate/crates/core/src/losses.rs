//! The pseudo-labeling loss family.
//!
//! Four variants share one skeleton: a supervised cross-entropy term on
//! labeled data plus a weighted self-supervised term on unlabeled data. The
//! weight of each unlabeled item is decided from the model's own confidence
//! on it, under stop-gradient:
//!
//! - hard variants (`Pl`, `Fm`) gate with the indicator `1(sigma > tau)`,
//!   which makes the derivative of the loss jump at the threshold;
//! - smooth variants (`Spl`, `Sfm`) replace the indicator with the ramp
//!   factor `((sigma - tau)/(1 - tau))^mu`, continuous in `sigma`, so the
//!   loss stays continuously differentiable across the threshold.
//!
//! The pair variants (`Fm`, `Sfm`) read the confidence off a weak view and
//! learn the pseudo-label on a strong view of the same example; the single
//! view variants use one view for both roles.
//!
//! Value-level functions operate on probability vectors and are used by
//! tests and statistics; [`batch_loss_on_tape`] assembles the same loss on a
//! tape for training.

use serde::{Deserialize, Serialize};

use crate::diffcore::{mlp_forward, mlp_forward_taped, ModelParams, NodeId, Tape, TapeParams};
use crate::{Error, Result};

/// Loss variant selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossVariant {
    /// Hard pseudo-labeling on a single view.
    Pl,
    /// Smooth pseudo-labeling on a single view.
    Spl,
    /// Hard thresholding on a weak view, learned on the strong view.
    Fm,
    /// Smooth factor on a weak view, learned on the strong view.
    Sfm,
}

impl LossVariant {
    pub fn is_smooth(self) -> bool {
        matches!(self, LossVariant::Spl | LossVariant::Sfm)
    }

    pub fn uses_view_pairs(self) -> bool {
        matches!(self, LossVariant::Fm | LossVariant::Sfm)
    }
}

/// Hyperparameters of the loss family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Confidence threshold for accepting a pseudo-label, in (0.5, 1].
    pub tau: f64,
    /// Weight of the unsupervised term. Zero degenerates to supervised
    /// training, which the experiment harness uses as a baseline.
    pub lambda_u: f64,
    /// Weight of the factor-as-loss term; zero disables it.
    pub lambda_phi: f64,
    /// Shape exponent of the ramp factor: 1 linear, 2 quadratic, 0.5 root.
    pub mu: f64,
    pub variant: LossVariant,
    /// Average the unsupervised term over accepted items only, instead of
    /// the whole batch. Off by default.
    #[serde(default)]
    pub mean_over_accepted: bool,
}

impl LossConfig {
    pub fn new(variant: LossVariant) -> Self {
        LossConfig {
            tau: 0.95,
            lambda_u: 1.0,
            lambda_phi: 0.0,
            mu: 1.0,
            variant,
            mean_over_accepted: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.5 && self.tau <= 1.0) {
            return Err(Error::input(format!("tau must be in (0.5, 1], got {}", self.tau)));
        }
        if self.variant.is_smooth() && self.tau >= 1.0 {
            return Err(Error::input("smooth variants need tau < 1: the ramp denominator degenerates"));
        }
        if !(self.lambda_u >= 0.0) {
            return Err(Error::input("lambda_u must be nonnegative"));
        }
        if !(self.lambda_phi >= 0.0) {
            return Err(Error::input("lambda_phi must be nonnegative"));
        }
        if !(self.mu > 0.0) {
            return Err(Error::input("mu must be positive"));
        }
        Ok(())
    }
}

/// A pseudo-label decision for one unlabeled item. The weight is a constant
/// for differentiation purposes: it never receives gradient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub class: usize,
    /// Max softmax score on the deciding view.
    pub confidence: f64,
    /// Indicator or ramp factor in [0, 1]; zero at or below the threshold.
    pub weight: f64,
}

impl PseudoLabel {
    pub fn accepted(&self) -> bool {
        self.weight > 0.0
    }
}

/// Ramp factor `max(0, (sigma - tau)/(1 - tau))^mu`.
///
/// Zero at and below the threshold, one at full confidence, continuous and
/// nondecreasing in `sigma` for every positive `mu`.
pub fn shape_factor(sigma: f64, tau: f64, mu: f64) -> Result<f64> {
    if tau >= 1.0 {
        return Err(Error::input("shape_factor: tau must be below 1"));
    }
    if !(tau > 0.5) {
        return Err(Error::input("shape_factor: tau must exceed 0.5"));
    }
    if !(mu > 0.0) {
        return Err(Error::input("shape_factor: mu must be positive"));
    }
    let ramp = ((sigma - tau) / (1.0 - tau)).max(0.0);
    Ok(ramp.powf(mu).min(1.0))
}

fn validate_probs(probs: &[f64]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::input("empty probability vector"));
    }
    if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(Error::input("probabilities must be finite and nonnegative"));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::input(format!("probabilities sum to {sum}, expected 1")));
    }
    Ok(())
}

/// Argmax with ties broken toward the lowest index.
fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// Decides the pseudo-label of one unlabeled item from its weak-view
/// probabilities: hard variants weigh by the indicator, smooth variants by
/// the ramp factor. The boundary `sigma == tau` gets weight zero either way.
pub fn pseudo_label(probs_weak: &[f64], cfg: &LossConfig) -> Result<PseudoLabel> {
    validate_probs(probs_weak)?;
    let class = argmax(probs_weak);
    let confidence = probs_weak[class];
    let weight = if cfg.variant.is_smooth() {
        shape_factor(confidence, cfg.tau, cfg.mu)?
    } else if confidence > cfg.tau {
        1.0
    } else {
        0.0
    };
    Ok(PseudoLabel { class, confidence, weight })
}

/// Cross-entropy on probabilities against a one-hot target.
fn ce_probs(probs: &[f64], onehot: &[f64]) -> Result<f64> {
    if probs.len() != onehot.len() {
        return Err(Error::input("probs and target length mismatch"));
    }
    validate_probs(probs)?;
    let mut loss = 0.0;
    let mut hot = 0usize;
    for (&p, &y) in probs.iter().zip(onehot) {
        if y == 1.0 {
            loss -= p.ln();
            hot += 1;
        } else if y != 0.0 {
            return Err(Error::input("target entries must be 0 or 1"));
        }
    }
    if hot != 1 {
        return Err(Error::input("target must be one-hot"));
    }
    Ok(loss)
}

fn supervised_mean(labeled: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    if labeled.is_empty() {
        return Err(Error::input("the supervised term requires at least one labeled item"));
    }
    let mut acc = 0.0;
    for (probs, onehot) in labeled {
        acc += ce_probs(probs, onehot)?;
    }
    Ok(acc / labeled.len() as f64)
}

/// Mean unsupervised term for single-view variants: each item contributes
/// `weight * (-ln p[pseudo-class])`, averaged over the whole batch
/// (rejected items count in the denominator).
pub fn unsup_term_single(unlabeled_probs: &[Vec<f64>], cfg: &LossConfig) -> Result<f64> {
    let mut acc = 0.0;
    let mut accepted = 0usize;
    for probs in unlabeled_probs {
        let pl = pseudo_label(probs, cfg)?;
        if pl.accepted() {
            acc += pl.weight * (-probs[pl.class].ln());
            accepted += 1;
        }
    }
    let denom = if cfg.mean_over_accepted { accepted } else { unlabeled_probs.len() };
    Ok(if denom == 0 { 0.0 } else { acc / denom as f64 })
}

/// Mean unsupervised term for view-pair variants: the weight and class come
/// from the weak view, the log-probability from the strong view.
pub fn unsup_term_pairs(pairs: &[(Vec<f64>, Vec<f64>)], cfg: &LossConfig) -> Result<f64> {
    let mut acc = 0.0;
    let mut accepted = 0usize;
    for (weak, strong) in pairs {
        let pl = pseudo_label(weak, cfg)?;
        validate_probs(strong)?;
        if strong.len() != weak.len() {
            return Err(Error::input("weak and strong views disagree on class count"));
        }
        if pl.accepted() {
            acc += pl.weight * (-strong[pl.class].ln());
            accepted += 1;
        }
    }
    let denom = if cfg.mean_over_accepted { accepted } else { pairs.len() };
    Ok(if denom == 0 { 0.0 } else { acc / denom as f64 })
}

/// Hard pseudo-labeling loss on a single view.
pub fn loss_pl(labeled: &[(Vec<f64>, Vec<f64>)], unlabeled_probs: &[Vec<f64>], cfg: &LossConfig) -> Result<f64> {
    if cfg.variant != LossVariant::Pl {
        return Err(Error::input("loss_pl expects the Pl variant"));
    }
    cfg.validate()?;
    Ok(supervised_mean(labeled)? + cfg.lambda_u * unsup_term_single(unlabeled_probs, cfg)?)
}

/// Smooth pseudo-labeling loss on a single view.
pub fn loss_spl(labeled: &[(Vec<f64>, Vec<f64>)], unlabeled_probs: &[Vec<f64>], cfg: &LossConfig) -> Result<f64> {
    if cfg.variant != LossVariant::Spl {
        return Err(Error::input("loss_spl expects the Spl variant"));
    }
    cfg.validate()?;
    Ok(supervised_mean(labeled)? + cfg.lambda_u * unsup_term_single(unlabeled_probs, cfg)?)
}

/// Hard consistency loss on weak/strong view pairs.
pub fn loss_fm(labeled: &[(Vec<f64>, Vec<f64>)], pairs: &[(Vec<f64>, Vec<f64>)], cfg: &LossConfig) -> Result<f64> {
    if cfg.variant != LossVariant::Fm {
        return Err(Error::input("loss_fm expects the Fm variant"));
    }
    cfg.validate()?;
    Ok(supervised_mean(labeled)? + cfg.lambda_u * unsup_term_pairs(pairs, cfg)?)
}

/// Smooth consistency loss on weak/strong view pairs.
pub fn loss_sfm(labeled: &[(Vec<f64>, Vec<f64>)], pairs: &[(Vec<f64>, Vec<f64>)], cfg: &LossConfig) -> Result<f64> {
    if cfg.variant != LossVariant::Sfm {
        return Err(Error::input("loss_sfm expects the Sfm variant"));
    }
    cfg.validate()?;
    Ok(supervised_mean(labeled)? + cfg.lambda_u * unsup_term_pairs(pairs, cfg)?)
}

/// Antiderivative of the smooth single-view term in the confidence variable,
/// with the integration constant chosen to make it continuous at the
/// threshold. Minimizing the smooth loss is equivalent, at the level of
/// first derivatives, to maximizing this function of the confidence.
pub fn spl_integrated(sigma: f64, tau: f64) -> Result<f64> {
    if tau >= 1.0 {
        return Err(Error::input("spl_integrated: tau must be below 1"));
    }
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::input("spl_integrated: sigma must be in [0, 1]"));
    }
    Ok(if sigma <= tau {
        (1.0 - tau + tau * tau.ln()) / (tau - 1.0)
    } else {
        (1.0 - sigma + tau * sigma.ln()) / (tau - 1.0)
    })
}

/// Factor-as-loss term: `-lambda_phi * mean(phi(sg sigma) * phi(sigma))`,
/// where only the second factor is differentiated. Returns zero when the
/// weight is zero.
pub fn loss_phi(unlabeled_weak_probs: &[Vec<f64>], cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    if cfg.lambda_phi == 0.0 || unlabeled_weak_probs.is_empty() {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for probs in unlabeled_weak_probs {
        validate_probs(probs)?;
        let sigma = probs[argmax(probs)];
        let phi = shape_factor(sigma, cfg.tau, cfg.mu)?;
        acc += phi * phi;
    }
    Ok(-cfg.lambda_phi * acc / unlabeled_weak_probs.len() as f64)
}

/// Early-training equilibrium magnitudes used to calibrate loss weights.
///
/// `l_fm` is the mean unsupervised term of a hard-variant pilot run;
/// `l_phi` the mean ramp factor of a smooth-variant pilot; `l_sfm` the
/// factor-weighted mean of the smooth pilot's cross-entropy part, so that
/// `l_phi * l_sfm` recovers the smooth pilot's actual unsupervised term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumEstimate {
    pub l_fm: f64,
    pub l_sfm: f64,
    pub l_phi: f64,
    /// Step interval the means were taken over, inclusive.
    pub window: (u64, u64),
}

impl EquilibriumEstimate {
    pub fn validate(&self) -> Result<()> {
        if self.window.1 < self.window.0 {
            return Err(Error::input("equilibrium window is empty"));
        }
        if self.l_fm < 0.0 || self.l_sfm < 0.0 || !(0.0..=1.0).contains(&self.l_phi) {
            return Err(Error::input("equilibrium estimates out of range"));
        }
        Ok(())
    }
}

/// Weight for the smooth pair loss that matches the equilibrium magnitude of
/// the hard pair loss: `lambda_u_fm * l_fm / (l_phi * l_sfm)`.
pub fn calibrate_lambda_u(est: &EquilibriumEstimate, lambda_u_fm: f64) -> Result<f64> {
    est.validate()?;
    if est.l_phi <= 0.0 || est.l_sfm <= 0.0 {
        return Err(Error::Calibration(format!(
            "degenerate equilibrium estimate: l_phi = {}, l_sfm = {}",
            est.l_phi, est.l_sfm
        )));
    }
    Ok(lambda_u_fm * est.l_fm / (est.l_phi * est.l_sfm))
}

/// Break-even factor-loss weight `(1 - tau) * lambda_u_sfm / l_sfm`: beyond
/// it the model is more incited to learn the weak view than the strong one,
/// so callers should stay in `[0, bound)`.
pub fn lambda_phi_bound(tau: f64, lambda_u_sfm: f64, l_sfm: f64) -> Result<f64> {
    if l_sfm <= 0.0 {
        return Err(Error::Calibration(format!("l_sfm must be positive, got {l_sfm}")));
    }
    Ok((1.0 - tau) * lambda_u_sfm / l_sfm)
}

/// Softmax of logits, log-sum-exp shifted.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}

/// Taped batch loss and its diagnostic values.
pub struct TapeBatchLoss {
    /// Scalar root: `sup + lambda_u * unsup + phi_term`.
    pub root: NodeId,
    /// Supervised mean cross-entropy (value).
    pub sup: f64,
    /// Mean unsupervised term, not yet weighted by `lambda_u` (value).
    pub unsup: f64,
    /// Mean pseudo-label weight over the unlabeled batch.
    pub mean_weight: f64,
    /// Factor-as-loss term (value, nonpositive).
    pub phi: f64,
    pub pseudo: Vec<PseudoLabel>,
}

/// Assembles the configured loss variant on a tape.
///
/// Pseudo-label weights are computed from the weak-view values and enter the
/// graph as constants, which is the stop-gradient contract: with
/// `lambda_phi == 0` the weak branch receives exactly zero gradient. The
/// factor-as-loss term, when enabled, differentiates the weak branch through
/// its second factor only. Single-view variants use the weak view as the
/// learned view and ignore the strong one.
pub fn batch_loss_on_tape(
    tape: &mut Tape,
    tp: &TapeParams,
    params: &ModelParams,
    labeled: &[(&[f64], usize)],
    unlabeled: &[(&[f64], &[f64])],
    cfg: &LossConfig,
) -> Result<TapeBatchLoss> {
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(Error::input("the supervised term requires at least one labeled item"));
    }
    let n_classes = params.output_dim();

    // Supervised mean cross-entropy.
    let mut sup_terms = Vec::with_capacity(labeled.len());
    let coef = 1.0 / labeled.len() as f64;
    for &(x, y) in labeled {
        if y >= n_classes {
            return Err(Error::input(format!("label {y} out of range for {n_classes} classes")));
        }
        let logits = mlp_forward_taped(tape, tp, params, x)?;
        let lsm = tape.log_softmax(logits);
        let picked = tape.index(lsm, y)?;
        sup_terms.push((-coef, picked));
    }
    let sup_node = tape.weighted_sum(sup_terms, 0.0)?;

    // Pseudo-label every unlabeled item off its weak view. The weak forward
    // goes on the tape only when something differentiates through it.
    struct ItemNodes {
        pl: PseudoLabel,
        weak_lsm: Option<NodeId>,
    }
    let need_weak_on_tape = cfg.lambda_phi > 0.0 || !cfg.variant.uses_view_pairs();
    let mut items = Vec::with_capacity(unlabeled.len());
    let mut weight_sum = 0.0;
    let mut accepted = 0usize;
    for &(weak, _) in unlabeled {
        let (probs, weak_lsm) = if need_weak_on_tape {
            let logits = mlp_forward_taped(tape, tp, params, weak)?;
            let lsm = tape.log_softmax(logits);
            (softmax(tape.value(logits)), Some(lsm))
        } else {
            (softmax(&mlp_forward(params, weak)?), None)
        };
        let pl = pseudo_label(&probs, cfg)?;
        weight_sum += pl.weight;
        if pl.accepted() {
            accepted += 1;
        }
        items.push(ItemNodes { pl, weak_lsm });
    }
    let denom = if cfg.mean_over_accepted { accepted } else { unlabeled.len() };

    let mut unsup_terms = Vec::new();
    let mut phi_terms = Vec::new();
    let mut pseudo = Vec::with_capacity(unlabeled.len());
    for (&(_, strong), item) in unlabeled.iter().zip(&items) {
        if denom > 0 && item.pl.accepted() {
            let learned_lsm = if cfg.variant.uses_view_pairs() {
                let logits = mlp_forward_taped(tape, tp, params, strong)?;
                tape.log_softmax(logits)
            } else {
                item.weak_lsm.expect("single-view variants tape the weak view")
            };
            let picked = tape.index(learned_lsm, item.pl.class)?;
            unsup_terms.push((-item.pl.weight / denom as f64, picked));
        }
        if cfg.lambda_phi > 0.0 {
            let lsm = item.weak_lsm.expect("the factor loss tapes the weak view");
            let picked = tape.index(lsm, item.pl.class)?;
            let sigma = tape.exp(picked);
            let ramp = tape.affine(sigma, 1.0 / (1.0 - cfg.tau), -cfg.tau / (1.0 - cfg.tau));
            let clipped = tape.relu(ramp);
            let phi = if cfg.mu == 1.0 { clipped } else { tape.pow_const(clipped, cfg.mu) };
            let held = tape.stop_grad(phi);
            let prod = tape.mul(held, phi)?;
            phi_terms.push((-cfg.lambda_phi / unlabeled.len() as f64, prod));
        }
        pseudo.push(item.pl);
    }

    let unsup_node = tape.weighted_sum(unsup_terms, 0.0)?;
    let phi_node = tape.weighted_sum(phi_terms, 0.0)?;
    let sup = tape.scalar(sup_node);
    let unsup = tape.scalar(unsup_node);
    let phi = tape.scalar(phi_node);
    let root = tape.weighted_sum(vec![(1.0, sup_node), (cfg.lambda_u, unsup_node), (1.0, phi_node)], 0.0)?;

    Ok(TapeBatchLoss {
        root,
        sup,
        unsup,
        mean_weight: if unlabeled.is_empty() { 0.0 } else { weight_sum / unlabeled.len() as f64 },
        phi,
        pseudo,
    })
}
