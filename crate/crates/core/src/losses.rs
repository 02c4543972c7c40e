//! Training objectives, each built as graph nodes so gradients flow to
//! whatever produced the inputs.
//!
//! - [`rna_loss`]: squared deviation of mean-feature-norm ratios from 1,
//!   averaged over canonical modality pairs.
//! - [`classification_loss`]: verb/noun cross-entropy, equally weighted.
//! - [`adversarial_domain_loss`]: discriminator cross-entropy; the
//!   adversarial effect on the encoder comes solely from the
//!   gradient-reversal node applied in [`crate::nn::discriminate`].
//! - [`attentive_entropy_loss`]: target prediction entropy, re-weighted by
//!   `1 + H(domain prediction)` so domain-confusable videos count more.
//! - [`mec_loss`]: min-entropy consensus across ensemble backbones.
//! - [`cent_loss`]: entropy of the renormalized non-predicted classes
//!   ("complement" entropy). Enters the weighted total with a negative
//!   coefficient: the objective maximizes it.
//! - [`total_loss`]: the weighted combination, reported per component.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::Modality;
use crate::error::{Error, Result};
use crate::graph::{Graph, VarId};

/// Degenerate-complement cutoff: rows whose top probability exceeds
/// `1 - CENT_DENOM_MIN` contribute zero to [`cent_loss`].
pub const CENT_DENOM_MIN: f64 = 1e-8;

// ── weights and reports ────────────────────────────────────────────────

/// Scalar weights of the adaptation losses. `beta` holds the
/// gradient-reversal coefficients for the (frame, video, spatial)
/// adversarial levels, in that order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_rna: f64,
    pub lambda_cent: f64,
    pub lambda_mec: f64,
    pub gamma: f64,
    pub beta: [f64; 3],
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_rna: 1.0,
            lambda_cent: 0.31,
            lambda_mec: 0.22,
            gamma: 0.003,
            beta: [0.75, 0.75, 0.75],
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_rna, self.lambda_cent, self.lambda_mec, self.gamma]
            .into_iter()
            .chain(self.beta);
        for v in all {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!("loss weights must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Which optional losses are active in a run. Classification is always on.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum LossToggle {
    Rna,
    AdvFrame,
    AdvVideo,
    AdvSpatial,
    AttentiveEntropy,
    Mec,
    Cent,
}

impl LossToggle {
    pub const ALL: [LossToggle; 7] = [
        LossToggle::Rna,
        LossToggle::AdvFrame,
        LossToggle::AdvVideo,
        LossToggle::AdvSpatial,
        LossToggle::AttentiveEntropy,
        LossToggle::Mec,
        LossToggle::Cent,
    ];
}

/// One scalar entry of the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ComponentKey {
    Classification,
    Rna,
    AdvFrame(usize),
    AdvVideo(usize),
    AdvSpatial,
    AttentiveEntropy,
    Mec,
    Cent,
}

impl ComponentKey {
    pub fn name(&self) -> String {
        match self {
            ComponentKey::Classification => "cls".into(),
            ComponentKey::Rna => "rna".into(),
            ComponentKey::AdvFrame(k) => format!("adv_frame_k{k}"),
            ComponentKey::AdvVideo(k) => format!("adv_video_k{k}"),
            ComponentKey::AdvSpatial => "adv_spatial".into(),
            ComponentKey::AttentiveEntropy => "attentive_entropy".into(),
            ComponentKey::Mec => "mec".into(),
            ComponentKey::Cent => "cent".into(),
        }
    }

    pub fn toggle(&self) -> Option<LossToggle> {
        match self {
            ComponentKey::Classification => None,
            ComponentKey::Rna => Some(LossToggle::Rna),
            ComponentKey::AdvFrame(_) => Some(LossToggle::AdvFrame),
            ComponentKey::AdvVideo(_) => Some(LossToggle::AdvVideo),
            ComponentKey::AdvSpatial => Some(LossToggle::AdvSpatial),
            ComponentKey::AttentiveEntropy => Some(LossToggle::AttentiveEntropy),
            ComponentKey::Mec => Some(LossToggle::Mec),
            ComponentKey::Cent => Some(LossToggle::Cent),
        }
    }

    /// Coefficient of this component in the total. Adversarial branches
    /// enter with coefficient 1 (their beta lives inside the GRL);
    /// complement entropy is maximized, hence the negative sign.
    pub fn coefficient(&self, w: &LossWeights) -> f64 {
        match self {
            ComponentKey::Classification => 1.0,
            ComponentKey::Rna => w.lambda_rna,
            ComponentKey::AdvFrame(_) | ComponentKey::AdvVideo(_) | ComponentKey::AdvSpatial => 1.0,
            ComponentKey::AttentiveEntropy => w.gamma,
            ComponentKey::Mec => w.lambda_mec,
            ComponentKey::Cent => -w.lambda_cent,
        }
    }
}

/// Unweighted component values plus the weighted total of one step or
/// epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub components: BTreeMap<String, f64>,
    pub total: f64,
}

// ── individual losses ──────────────────────────────────────────────────

/// Relative norm alignment: the average over ordered canonical modality
/// pairs `(p, q)`, `p < q`, of `(E_p / E_q - 1)^2`, where each `E` is a
/// positive mean-feature-norm scalar. With exactly `{rgb, audio}` this is
/// the plain visual/audio ratio penalty.
pub fn rna_loss(g: &mut Graph, mean_norms: &BTreeMap<Modality, VarId>) -> Result<VarId> {
    if mean_norms.len() < 2 {
        return Err(Error::arg("rna_loss", "need at least 2 modalities"));
    }
    for (&m, &id) in mean_norms {
        if g.value(id).len() != 1 {
            return Err(Error::shape("rna_loss", format!("mean norm for {m} must be scalar")));
        }
        let v = g.scalar_value(id);
        if !(v > 0.0) {
            return Err(Error::arg("rna_loss", format!("mean norm for {m} must be > 0, got {v}")));
        }
    }
    let entries: Vec<(Modality, VarId)> = mean_norms.iter().map(|(&m, &id)| (m, id)).collect();
    let mut acc: Option<VarId> = None;
    let mut pairs = 0usize;
    for i in 0..entries.len() {
        for j in (i + 1)..entries.len() {
            let ratio = g.div(entries[i].1, entries[j].1)?;
            let centered = g.add_scalar(ratio, -1.0)?;
            let term = g.mul(centered, centered)?;
            acc = Some(match acc {
                Some(a) => g.add(a, term)?,
                None => term,
            });
            pairs += 1;
        }
    }
    g.mul_scalar(acc.expect("at least one pair"), 1.0 / pairs as f64)
}

fn one_hot_rows(n: usize, c: usize, labels: &[usize]) -> Vec<f64> {
    let mut data = vec![0.0; n * c];
    for (i, &l) in labels.iter().enumerate() {
        data[i * c + l] = 1.0;
    }
    data
}

/// Mean cross-entropy of `logits` (`[n, c]`) against integer labels.
pub fn cross_entropy_mean(g: &mut Graph, logits: VarId, labels: &[usize]) -> Result<VarId> {
    let shape = g.shape(logits).to_vec();
    let [n, c] = shape[..] else {
        return Err(Error::shape("cross_entropy", format!("logits must be 2-D, got {shape:?}")));
    };
    if labels.len() != n {
        return Err(Error::shape(
            "cross_entropy",
            format!("{n} logit rows vs {} labels", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::arg("cross_entropy", format!("label {bad} out of range for {c} classes")));
    }
    let probs = g.softmax_rows(logits)?;
    let logp = g.log(probs)?;
    let mask = g.constant(vec![n, c], one_hot_rows(n, c, labels))?;
    let picked = g.mul(logp, mask)?;
    let total = g.sum(picked)?;
    g.mul_scalar(total, -1.0 / n as f64)
}

/// Source-batch classification loss: `(CE(verb) + CE(noun)) / 2`.
pub fn classification_loss(
    g: &mut Graph,
    verb_logits: VarId,
    noun_logits: VarId,
    verb_labels: &[usize],
    noun_labels: &[usize],
) -> Result<VarId> {
    let verb = cross_entropy_mean(g, verb_logits, verb_labels)?;
    let noun = cross_entropy_mean(g, noun_logits, noun_labels)?;
    let sum = g.add(verb, noun)?;
    g.mul_scalar(sum, 0.5)
}

/// Mean cross-entropy of discriminator logits against domain (or kitchen)
/// labels: `{0=source, 1=target}` for binary branches, `0..K-1` for the
/// spatial branch.
pub fn adversarial_domain_loss(g: &mut Graph, disc_logits: VarId, labels: &[usize]) -> Result<VarId> {
    cross_entropy_mean(g, disc_logits, labels)
}

/// Per-row Shannon entropy of a probability matrix: `[n, c] -> [n]`.
pub fn entropy_rows(g: &mut Graph, probs: VarId) -> Result<VarId> {
    let logp = g.log(probs)?;
    let plogp = g.mul(probs, logp)?;
    let rows = g.row_sum(plogp)?;
    g.mul_scalar(rows, -1.0)
}

/// Attentive entropy for one classification head: the mean over target
/// videos of `w_i * H(softmax(class_logits_i))` with
/// `w_i = 1 + H(softmax(domain_logits_i))`.
pub fn attentive_entropy_head(
    g: &mut Graph,
    class_logits: VarId,
    domain_logits: VarId,
) -> Result<VarId> {
    let nc = g.shape(class_logits).first().copied().unwrap_or(0);
    let nd = g.shape(domain_logits).first().copied().unwrap_or(0);
    if g.shape(class_logits).len() != 2 || g.shape(domain_logits).len() != 2 || nc != nd {
        return Err(Error::shape(
            "attentive_entropy",
            format!(
                "class logits {:?} and domain logits {:?} must be 2-D with equal rows",
                g.shape(class_logits),
                g.shape(domain_logits)
            ),
        ));
    }
    let class_probs = g.softmax_rows(class_logits)?;
    let class_entropy = entropy_rows(g, class_probs)?;
    let domain_probs = g.softmax_rows(domain_logits)?;
    let domain_entropy = entropy_rows(g, domain_probs)?;
    let weights = g.add_scalar(domain_entropy, 1.0)?;
    let weighted = g.mul(weights, class_entropy)?;
    g.mean(weighted)
}

/// Attentive entropy applied to verb and noun logits and averaged over
/// the two heads.
pub fn attentive_entropy_loss(
    g: &mut Graph,
    verb_logits: VarId,
    noun_logits: VarId,
    domain_logits: VarId,
) -> Result<VarId> {
    let verb = attentive_entropy_head(g, verb_logits, domain_logits)?;
    let noun = attentive_entropy_head(g, noun_logits, domain_logits)?;
    let sum = g.add(verb, noun)?;
    g.mul_scalar(sum, 0.5)
}

fn mec_validate(g: &Graph, log_probs: &[VarId]) -> Result<(usize, usize)> {
    if log_probs.is_empty() {
        return Err(Error::arg("mec_loss", "need at least one backbone"));
    }
    let shape = g.shape(log_probs[0]).to_vec();
    let [m, c] = shape[..] else {
        return Err(Error::shape("mec_loss", format!("expected 2-D log-probs, got {shape:?}")));
    };
    for &other in &log_probs[1..] {
        if g.shape(other) != shape.as_slice() {
            return Err(Error::shape(
                "mec_loss",
                format!("mismatched class counts: {:?} vs {shape:?}", g.shape(other)),
            ));
        }
    }
    Ok((m, c))
}

/// Min-entropy consensus over `b` backbones for one classification head.
/// Each entry holds that backbone's log-probabilities for `m` target
/// samples (`[m, c]`). For each sample the class maximizing the summed
/// log-probability is selected (ties to the lowest class index) and the
/// loss is `-(1/m)(1/b) * sum_i sum_b log p_b(y*_i | x_i)`.
pub fn mec_loss(g: &mut Graph, log_probs_per_backbone: &[VarId]) -> Result<VarId> {
    let (m, _) = mec_validate(g, log_probs_per_backbone)?;
    let b = log_probs_per_backbone.len();
    let mut summed = log_probs_per_backbone[0];
    for &other in &log_probs_per_backbone[1..] {
        summed = g.add(summed, other)?;
    }
    let best = g.row_max(summed)?;
    let total = g.sum(best)?;
    g.mul_scalar(total, -1.0 / (m as f64 * b as f64))
}

/// The per-sample consensus labels chosen by [`mec_loss`] (the argmax of
/// the summed log-probabilities, ties to the lowest class index).
pub fn mec_labels(g: &Graph, log_probs_per_backbone: &[VarId]) -> Result<Vec<usize>> {
    let (m, c) = mec_validate(g, log_probs_per_backbone)?;
    let mut labels = Vec::with_capacity(m);
    for i in 0..m {
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for j in 0..c {
            let score: f64 = log_probs_per_backbone
                .iter()
                .map(|&id| g.value(id)[i * c + j])
                .sum();
            if score > best_score {
                best_score = score;
                best = j;
            }
        }
        labels.push(best);
    }
    Ok(labels)
}

/// Complement entropy: for each probability row, the entropy of the
/// distribution renormalized over every class except the predicted one
/// (`q_j = p_j / (1 - p_max)`). Rows whose complement mass is below
/// [`CENT_DENOM_MIN`] contribute zero; the result is averaged over all
/// rows.
pub fn cent_loss(g: &mut Graph, probs: VarId) -> Result<VarId> {
    let shape = g.shape(probs).to_vec();
    let [n, c] = shape[..] else {
        return Err(Error::shape("cent_loss", format!("expected 2-D probs, got {shape:?}")));
    };
    if c < 2 {
        return Err(Error::arg("cent_loss", "need at least 2 classes"));
    }
    let values = g.value(probs).to_vec();
    let mut mask = vec![1.0; n * c];
    let mut valid = vec![1.0; n];
    let mut invalid = vec![0.0; n];
    for i in 0..n {
        let row = &values[i * c..(i + 1) * c];
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&p| p < -1e-9) {
            return Err(Error::arg(
                "cent_loss",
                format!("row {i} is not on the probability simplex (sum {sum})"),
            ));
        }
        let mut p = 0usize;
        for j in 1..c {
            if row[j] > row[p] {
                p = j;
            }
        }
        mask[i * c + p] = 0.0;
        if 1.0 - row[p] < CENT_DENOM_MIN {
            valid[i] = 0.0;
            invalid[i] = 1.0;
        }
    }

    let mask = g.constant(vec![n, c], mask)?;
    let valid = g.constant(vec![n], valid)?;
    let invalid = g.constant(vec![n], invalid)?;

    let top = g.row_max(probs)?;
    let neg_top = g.mul_scalar(top, -1.0)?;
    let denom = g.add_scalar(neg_top, 1.0)?;
    // Degenerate rows divide by 1 instead, then get zeroed out.
    let denom_live = g.mul(denom, valid)?;
    let denom_safe = g.add(denom_live, invalid)?;

    let complement = g.mul(probs, mask)?;
    let q = g.div_col(complement, denom_safe)?;
    let row_entropy = entropy_rows(g, q)?;
    let live_entropy = g.mul(row_entropy, valid)?;
    let total = g.sum(live_entropy)?;
    g.mul_scalar(total, 1.0 / n as f64)
}

// ── weighted total ─────────────────────────────────────────────────────

/// Combine computed components into the training objective:
///
/// `total = L_cls + lambda_rna * L_rna + gamma * L_att + sum_branches
/// L_adv + lambda_mec * L_mec - lambda_cent * L_cent`
///
/// Every toggle in `enabled` must be covered by a component. Returns the
/// scalar total node plus a value-level report.
pub fn total_loss(
    g: &mut Graph,
    components: &[(ComponentKey, VarId)],
    weights: &LossWeights,
    enabled: &BTreeSet<LossToggle>,
) -> Result<(VarId, LossReport)> {
    weights.validate()?;
    if components.is_empty() {
        return Err(Error::arg("total_loss", "no loss components"));
    }
    for toggle in enabled {
        if !components.iter().any(|(k, _)| k.toggle() == Some(*toggle)) {
            return Err(Error::arg(
                "total_loss",
                format!("enabled loss {toggle:?} has no computed component"),
            ));
        }
    }

    let mut report = BTreeMap::new();
    let mut acc: Option<VarId> = None;
    for &(key, id) in components {
        if g.value(id).len() != 1 {
            return Err(Error::shape("total_loss", format!("component {} not scalar", key.name())));
        }
        if let Some(t) = key.toggle() {
            if !enabled.contains(&t) {
                continue;
            }
        }
        report.insert(key.name(), g.scalar_value(id));
        let term = g.mul_scalar(id, key.coefficient(weights))?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    let total = acc.ok_or_else(|| Error::arg("total_loss", "all components disabled"))?;
    Ok((
        total,
        LossReport {
            components: report,
            total: g.scalar_value(total),
        },
    ))
}

/// Recompute the weighted total from a report; used to verify that logged
/// totals are exactly the linear combination of their components.
pub fn recombine_report(report: &LossReport, weights: &LossWeights) -> f64 {
    let mut total = 0.0;
    for (name, &value) in &report.components {
        let coeff = match name.as_str() {
            "cls" => 1.0,
            "rna" => weights.lambda_rna,
            "attentive_entropy" => weights.gamma,
            "mec" => weights.lambda_mec,
            "cent" => -weights.lambda_cent,
            n if n.starts_with("adv_") => 1.0,
            _ => 0.0,
        };
        total += coeff * value;
    }
    total
}
