//! Loss components and their analytic gradients.
//!
//! Two loss paths feed one parameter update: a deep-metric path on the
//! embeddings (margin-based pairwise contrastive plus supervised
//! contrastive, weighted and summed) and a classification path on the
//! logits (class-balanced focal loss on hard labels plus a KL retrospection
//! term that distills stored soft labels back into the model). Every
//! operation is a pure function returning the loss value together with the
//! gradient w.r.t. its input matrix, so the caller can run a single fused
//! backward pass.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to probabilities before any logarithm.
const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlDirection {
    /// KL(stored soft labels ‖ model): standard distillation target order.
    Forward,
    /// KL(model ‖ stored soft labels).
    Reverse,
}

/// One step of the δ schedule controlling the KL retrospection weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaMilestone {
    pub iteration: u64,
    pub value: f64,
}

/// All loss hyperparameters. The pairwise-contrastive and supervised-
/// contrastive weights, the focal/class-balanced parameters, and the
/// classification mixing weights are distinct fields even where the
/// literature reuses symbol names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the pairwise contrastive term in the metric loss.
    pub alpha_dml: f64,
    /// Weight of the supervised contrastive term in the metric loss.
    pub beta_dml: f64,
    /// Margin of the pairwise contrastive hinge.
    pub margin: f64,
    /// Temperature dividing cosine similarities in the supervised
    /// contrastive loss.
    pub supcon_temp: f64,
    /// Temperature for converting stored logits into soft labels.
    pub tau: f64,
    /// α-balance factor of the focal loss.
    pub focal_alpha: f64,
    /// Focusing exponent of the focal loss.
    pub focal_gamma: f64,
    /// Class-balanced weighting base, in [0, 1).
    pub cb_beta: f64,
    /// Weight of the focal term in the classification loss.
    pub gamma_cls: f64,
    /// Step schedule for the KL retrospection weight δ; zero before the
    /// first milestone.
    pub delta_schedule: Vec<DeltaMilestone>,
    pub kl_direction: KlDirection,
    /// Apply `tau` to the model logits inside the KL term as well (the soft
    /// targets are always built with `tau`).
    pub kl_student_temp: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha_dml: 0.3,
            beta_dml: 0.1,
            margin: 1.0,
            supcon_temp: 0.1,
            tau: 0.5,
            focal_alpha: 0.5,
            focal_gamma: 0.0,
            cb_beta: 0.81,
            gamma_cls: 1.0,
            delta_schedule: vec![
                DeltaMilestone {
                    iteration: 500,
                    value: 0.5,
                },
                DeltaMilestone {
                    iteration: 1500,
                    value: 1.0,
                },
            ],
            kl_direction: KlDirection::Forward,
            kl_student_temp: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config("tau must be positive".into()));
        }
        if !(self.supcon_temp > 0.0) {
            return Err(Error::Config("supcon_temp must be positive".into()));
        }
        if !(self.margin > 0.0) {
            return Err(Error::Config("margin must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.cb_beta) {
            return Err(Error::Config("cb_beta must be in [0,1)".into()));
        }
        if self
            .delta_schedule
            .windows(2)
            .any(|w| w[0].iteration >= w[1].iteration || w[0].value > w[1].value)
        {
            return Err(Error::Config(
                "delta_schedule milestones must be strictly increasing with non-decreasing values"
                    .into(),
            ));
        }
        Ok(())
    }

    /// δ in effect at an iteration: the value of the last milestone reached.
    pub fn delta_at(&self, iteration: u64) -> f64 {
        self.delta_schedule
            .iter()
            .rev()
            .find(|m| iteration >= m.iteration)
            .map_or(0.0, |m| m.value)
    }
}

/// A loss value plus the gradients w.r.t. whichever inputs the operation
/// consumes (embeddings, logits, or both).
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub grad_embeddings: Option<Array2<f64>>,
    pub grad_logits: Option<Array2<f64>>,
}

impl LossOutput {
    fn on_embeddings(value: f64, grad: Array2<f64>) -> Self {
        Self {
            value,
            grad_embeddings: Some(grad),
            grad_logits: None,
        }
    }

    fn on_logits(value: f64, grad: Array2<f64>) -> Self {
        Self {
            value,
            grad_embeddings: None,
            grad_logits: Some(grad),
        }
    }
}

/// Margin-based pairwise contrastive loss over all in-batch pairs: mean d²
/// over same-label pairs plus mean max(0, margin − d)² over different-label
/// pairs. Batches with fewer than two examples are degenerate and yield
/// zero loss and gradients.
pub fn contrastive_loss(z: &Array2<f64>, labels: &[usize], margin: f64) -> LossOutput {
    let n = z.nrows();
    let mut grad = Array2::zeros(z.dim());
    if n < 2 {
        log::debug!("contrastive_loss on batch of {n}: degenerate, returning zero");
        return LossOutput::on_embeddings(0.0, grad);
    }

    let mut pos_sum = 0.0;
    let mut neg_sum = 0.0;
    let mut pos_grad = Array2::zeros(z.dim());
    let mut neg_grad = Array2::zeros(z.dim());
    let mut pos_count = 0usize;
    let mut neg_count = 0usize;

    for i in 0..n {
        for j in (i + 1)..n {
            let diff = &z.row(i) - &z.row(j);
            let d2: f64 = diff.iter().map(|v| v * v).sum();
            if labels[i] == labels[j] {
                pos_count += 1;
                pos_sum += d2;
                for (k, v) in diff.iter().enumerate() {
                    pos_grad[[i, k]] += 2.0 * v;
                    pos_grad[[j, k]] -= 2.0 * v;
                }
            } else {
                neg_count += 1;
                let d = d2.sqrt();
                if d < margin {
                    let slack = margin - d;
                    neg_sum += slack * slack;
                    if d > 1e-12 {
                        let scale = -2.0 * slack / d;
                        for (k, v) in diff.iter().enumerate() {
                            neg_grad[[i, k]] += scale * v;
                            neg_grad[[j, k]] -= scale * v;
                        }
                    }
                }
            }
        }
    }

    let mut value = 0.0;
    if pos_count > 0 {
        value += pos_sum / pos_count as f64;
        grad.scaled_add(1.0 / pos_count as f64, &pos_grad);
    }
    if neg_count > 0 {
        value += neg_sum / neg_count as f64;
        grad.scaled_add(1.0 / neg_count as f64, &neg_grad);
    }
    LossOutput::on_embeddings(value, grad)
}

/// Supervised contrastive loss with all same-label examples as positives
/// per anchor, averaged with the positive sum outside the log. Embeddings
/// are L2-normalized inside the op; gradients propagate through the
/// normalization. Anchors without positives contribute zero and are
/// excluded from the mean.
pub fn supcon_loss(z: &Array2<f64>, labels: &[usize], temperature: f64) -> LossOutput {
    let n = z.nrows();
    let mut grad = Array2::zeros(z.dim());
    if n < 2 {
        log::debug!("supcon_loss on batch of {n}: degenerate, returning zero");
        return LossOutput::on_embeddings(0.0, grad);
    }

    let norms: Vec<f64> = (0..n)
        .map(|i| z.row(i).iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12))
        .collect();
    let mut unit = z.clone();
    for i in 0..n {
        let inv = 1.0 / norms[i];
        unit.row_mut(i).mapv_inplace(|v| v * inv);
    }

    // Cosine-similarity matrix over temperature.
    let sims = unit.dot(&unit.t()).mapv(|v| v / temperature);

    let mut anchors = 0usize;
    let mut value = 0.0;
    // Gradient w.r.t. the similarity entries, to be chained afterwards.
    let mut d_sims = Array2::zeros((n, n));

    for i in 0..n {
        let positives: Vec<usize> = (0..n)
            .filter(|&p| p != i && labels[p] == labels[i])
            .collect();
        if positives.is_empty() {
            continue;
        }
        anchors += 1;
        let p_count = positives.len() as f64;

        let max_sim = (0..n)
            .filter(|&a| a != i)
            .map(|a| sims[[i, a]])
            .fold(f64::MIN, f64::max);
        let denom: f64 = (0..n)
            .filter(|&a| a != i)
            .map(|a| (sims[[i, a]] - max_sim).exp())
            .sum();
        let lse = max_sim + denom.ln();

        for &p in &positives {
            value += -(sims[[i, p]] - lse) / p_count;
            d_sims[[i, p]] -= 1.0 / p_count;
        }
        for a in 0..n {
            if a != i {
                d_sims[[i, a]] += (sims[[i, a]] - lse).exp();
            }
        }
    }

    if anchors == 0 {
        log::warn!("supcon_loss: no anchor has a positive; returning zero");
        return LossOutput::on_embeddings(0.0, grad);
    }

    let scale = 1.0 / (anchors as f64 * temperature);
    value /= anchors as f64;

    // d value / d unit_k = Σ_a d_sims[k,a]·unit_a + Σ_i d_sims[i,k]·unit_i.
    let d_unit = (d_sims.dot(&unit) + d_sims.t().dot(&unit)).mapv(|v| v * scale);

    // Through the normalization: d z_k = (I − ûûᵀ)/‖z_k‖ · d û_k.
    for k in 0..n {
        let du = d_unit.row(k);
        let u = unit.row(k);
        let dot: f64 = du.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
        for c in 0..z.ncols() {
            grad[[k, c]] = (du[c] - dot * u[c]) / norms[k];
        }
    }

    LossOutput::on_embeddings(value, grad)
}

/// Total deep-metric loss: weighted sum of the pairwise contrastive and
/// supervised contrastive terms. A component with zero weight is skipped
/// entirely.
pub fn dml_loss(z: &Array2<f64>, labels: &[usize], config: &LossConfig) -> LossOutput {
    let mut value = 0.0;
    let mut grad = Array2::zeros(z.dim());
    if config.alpha_dml != 0.0 {
        let con = contrastive_loss(z, labels, config.margin);
        value += config.alpha_dml * con.value;
        grad.scaled_add(config.alpha_dml, con.grad_embeddings.as_ref().unwrap());
    }
    if config.beta_dml != 0.0 {
        let sup = supcon_loss(z, labels, config.supcon_temp);
        value += config.beta_dml * sup.value;
        grad.scaled_add(config.beta_dml, sup.grad_embeddings.as_ref().unwrap());
    }
    LossOutput::on_embeddings(value, grad)
}

/// Temperature softmax of stored logits: the retrospection target
/// distribution. Numerically stabilized by max-subtraction.
pub fn soft_labels(stored_logits: &Array1<f64>, tau: f64) -> Array1<f64> {
    let max = stored_logits.iter().cloned().fold(f64::MIN, f64::max);
    let mut out = stored_logits.mapv(|l| ((l - max) / tau).exp());
    let sum = out.sum();
    out.mapv_inplace(|v| v / sum);
    out
}

fn softmax_rows(logits: &Array2<f64>, temp: f64) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::MIN, f64::max);
        row.mapv_inplace(|l| ((l - max) / temp).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Class-balanced focal loss on hard labels. Probabilities are produced
/// from the logits inside the op so the returned gradient is the fused
/// softmax backward. `class_counts[c]` is the number of occurrences of
/// class `c` in the current combined batch.
pub fn cb_focal_loss(
    logits: &Array2<f64>,
    labels: &[usize],
    class_counts: &[usize],
    config: &LossConfig,
) -> Result<LossOutput> {
    let n = logits.nrows();
    if n == 0 || labels.len() != n {
        return Err(Error::Shape {
            context: "cb_focal_loss labels",
            expected: format!("{n}"),
            actual: format!("{}", labels.len()),
        });
    }
    let probs = softmax_rows(logits, 1.0);
    let gamma = config.focal_gamma;
    let mut value = 0.0;
    let mut grad: Array2<f64> = Array2::zeros(logits.dim());

    for (i, &y) in labels.iter().enumerate() {
        let n_y = class_counts[y];
        debug_assert!(n_y >= 1, "label {y} present but counted 0 times");
        let cb_weight = if config.cb_beta == 0.0 {
            1.0
        } else {
            (1.0 - config.cb_beta) / (1.0 - config.cb_beta.powi(n_y as i32))
        };
        let w = config.focal_alpha * cb_weight;

        let p_y_raw = probs[[i, y]];
        let p_y = if p_y_raw < PROB_FLOOR {
            log::warn!("cb_focal_loss: clamping p_y={p_y_raw:.3e} for row {i}");
            PROB_FLOOR
        } else {
            p_y_raw
        };
        let om = (1.0 - p_y).max(0.0);
        let modulator = om.powf(gamma);
        value += -w * modulator * p_y.ln();

        // d/dp_y of −(1−p)^γ ln p, chained with dp_y/dl_k = p_y(δ − p_k).
        let dg_dp = if gamma == 0.0 {
            -1.0 / p_y
        } else {
            gamma * om.max(PROB_FLOOR).powf(gamma - 1.0) * p_y.ln() - modulator / p_y
        };
        for k in 0..logits.ncols() {
            let delta = if k == y { 1.0 } else { 0.0 };
            grad[[i, k]] += w * dg_dp * p_y * (delta - probs[[i, k]]);
        }
    }

    let inv_n = 1.0 / n as f64;
    Ok(LossOutput::on_logits(value * inv_n, grad.mapv(|v| v * inv_n)))
}

/// KL divergence between stored soft labels and the model's current
/// distribution on memory samples, averaged over the memory rows present in
/// the batch. Rows without a soft target (stream samples) contribute zero.
pub fn kl_retrospection(
    logits: &Array2<f64>,
    soft_targets: &[Option<Array1<f64>>],
    tau: f64,
    config: &LossConfig,
) -> LossOutput {
    let n = logits.nrows();
    let mut grad: Array2<f64> = Array2::zeros(logits.dim());
    let m = soft_targets.iter().filter(|t| t.is_some()).count();
    if m == 0 {
        return LossOutput::on_logits(0.0, grad);
    }
    let student_temp = if config.kl_student_temp { tau } else { 1.0 };
    let q = softmax_rows(logits, student_temp);
    let inv_m = 1.0 / m as f64;
    let mut value = 0.0;

    for i in 0..n {
        let Some(s) = &soft_targets[i] else { continue };
        match config.kl_direction {
            KlDirection::Forward => {
                let mut kl = 0.0;
                for k in 0..logits.ncols() {
                    let sk = s[k];
                    if sk > 0.0 {
                        kl += sk * (sk.max(PROB_FLOOR).ln() - q[[i, k]].max(PROB_FLOOR).ln());
                    }
                    grad[[i, k]] = (q[[i, k]] - sk) * inv_m / student_temp;
                }
                value += kl;
            }
            KlDirection::Reverse => {
                let mut kl = 0.0;
                let mut ratios = vec![0.0; logits.ncols()];
                for k in 0..logits.ncols() {
                    let qk = q[[i, k]].max(PROB_FLOOR);
                    ratios[k] = qk.ln() - s[k].max(PROB_FLOOR).ln();
                    kl += q[[i, k]] * ratios[k];
                }
                for k in 0..logits.ncols() {
                    grad[[i, k]] = q[[i, k]] * (ratios[k] - kl) * inv_m / student_temp;
                }
                value += kl;
            }
        }
    }
    LossOutput::on_logits(value * inv_m, grad)
}

/// Breakdown of the combined classification loss.
#[derive(Debug, Clone)]
pub struct ClsLoss {
    pub output: LossOutput,
    pub focal_value: f64,
    pub kl_value: f64,
    pub delta: f64,
}

/// Combined classification loss: γ · class-balanced focal on the whole
/// batch plus δ(iteration) · KL retrospection on the memory rows. The KL
/// term is skipped entirely while δ is zero.
pub fn cls_loss(
    logits: &Array2<f64>,
    labels: &[usize],
    soft_targets: &[Option<Array1<f64>>],
    class_counts: &[usize],
    iteration: u64,
    config: &LossConfig,
) -> Result<ClsLoss> {
    let focal = cb_focal_loss(logits, labels, class_counts, config)?;
    let delta = config.delta_at(iteration);

    let mut value = config.gamma_cls * focal.value;
    let mut grad = focal
        .grad_logits
        .unwrap()
        .mapv(|v| v * config.gamma_cls);
    let mut kl_value = 0.0;
    if delta != 0.0 {
        let kl = kl_retrospection(logits, soft_targets, config.tau, config);
        kl_value = kl.value;
        value += delta * kl.value;
        grad.scaled_add(delta, kl.grad_logits.as_ref().unwrap());
    }
    Ok(ClsLoss {
        output: LossOutput::on_logits(value, grad),
        focal_value: focal.value,
        kl_value,
        delta,
    })
}
