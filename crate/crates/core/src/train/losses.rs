//! Loss functions with analytic gradients.

use thiserror::Error;

use crate::mining::SampleKind;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("pair labels must differ (both {0})")]
    SameLabels(usize),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("not a permutation of 0..{0}")]
    InvalidPermutation(usize),
    #[error("empty batch")]
    EmptyBatch,
}

/// Scalar loss and its gradient with respect to the input vector.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    pub grad: Vec<f64>,
}

fn check_label(label: usize, n: usize) -> Result<(), LossError> {
    if label < n {
        Ok(())
    } else {
        Err(LossError::LabelOutOfRange { label, classes: n })
    }
}

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(z);
    z.iter().map(|x| (x - lse).exp()).collect()
}

/// Softmax cross-entropy; gradient `softmax(z) - onehot(label)`.
pub fn softmax_ce(logits: &[f64], label: usize) -> Result<LossValue, LossError> {
    check_label(label, logits.len())?;
    let lse = log_sum_exp(logits);
    let mut grad: Vec<f64> = logits.iter().map(|x| (x - lse).exp()).collect();
    grad[label] -= 1.0;
    // (m - z_y) + ln(1 + sum over i != argmax of e^(z_i - m)) keeps
    // precision when the label is confidently predicted.
    let top = super::network::argmax(logits);
    let m = logits[top];
    let rest: f64 = logits.iter().enumerate().filter(|&(i, _)| i != top).map(|(_, x)| (x - m).exp()).sum();
    Ok(LossValue { loss: (m - logits[label]) + rest.ln_1p(), grad })
}

/// Which algebraic form of the pairwise label loss to use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PairForm {
    /// `max(0, 1 + z_neg - z_hard)^2`: zero once the hard class leads by 1.
    #[default]
    Hinge,
    /// The literal printed expression `max(0, (1 - z_neg + z_hard)^2)`.
    Printed,
}

pub fn pair_loss(logits: &[f64], y_neg: usize, y_hard: usize, form: PairForm) -> Result<LossValue, LossError> {
    check_label(y_neg, logits.len())?;
    check_label(y_hard, logits.len())?;
    if y_neg == y_hard {
        return Err(LossError::SameLabels(y_neg));
    }
    let mut grad = vec![0.0; logits.len()];
    let loss = match form {
        PairForm::Hinge => {
            let m = 1.0 + logits[y_neg] - logits[y_hard];
            if m > 0.0 {
                grad[y_neg] = 2.0 * m;
                grad[y_hard] = -2.0 * m;
                m * m
            } else {
                0.0
            }
        }
        PairForm::Printed => {
            let m = 1.0 - logits[y_neg] + logits[y_hard];
            grad[y_neg] = -2.0 * m;
            grad[y_hard] = 2.0 * m;
            m * m
        }
    };
    Ok(LossValue { loss, grad })
}

/// Value inside the pair hinge, for kink detection.
pub fn pair_margin(logits: &[f64], y_neg: usize, y_hard: usize) -> f64 {
    1.0 + logits[y_neg] - logits[y_hard]
}

/// Softmax cross-entropy scaled by the per-kind weight (`eta_hard` for
/// switch-click samples, `eta_simple` otherwise).
pub fn hard_aware_loss(
    logits: &[f64],
    label: usize,
    kind: SampleKind,
    eta_simple: f64,
    eta_hard: f64,
) -> Result<LossValue, LossError> {
    let eta = match kind {
        SampleKind::Hard => eta_hard,
        SampleKind::Simple | SampleKind::Virtual => eta_simple,
    };
    let mut v = softmax_ce(logits, label)?;
    v.loss *= eta;
    v.grad.iter_mut().for_each(|g| *g *= eta);
    Ok(v)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletLossValue {
    pub loss: f64,
    pub grad_q: Vec<f64>,
    pub grad_pos: Vec<f64>,
    pub grad_neg: Vec<f64>,
}

fn diff_norm(a: &[f64], b: &[f64]) -> (Vec<f64>, f64) {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.iter().map(|x| x * x).sum::<f64>().sqrt();
    (d, n)
}

/// `max(0, |q - pos| - |q - neg| + 1)` with unsquared Euclidean distances.
/// The subgradient is zero at the hinge and for a zero-length difference.
pub fn triplet_loss(q: &[f64], pos: &[f64], neg: &[f64]) -> Result<TripletLossValue, LossError> {
    if q.len() != pos.len() {
        return Err(LossError::DimensionMismatch(q.len(), pos.len()));
    }
    if q.len() != neg.len() {
        return Err(LossError::DimensionMismatch(q.len(), neg.len()));
    }
    let (dp, np) = diff_norm(q, pos);
    let (dn, nn) = diff_norm(q, neg);
    let pre = np - nn + 1.0;
    let dim = q.len();
    let mut out = TripletLossValue {
        loss: pre.max(0.0),
        grad_q: vec![0.0; dim],
        grad_pos: vec![0.0; dim],
        grad_neg: vec![0.0; dim],
    };
    if pre > 0.0 {
        for i in 0..dim {
            let gp = if np > 0.0 { dp[i] / np } else { 0.0 };
            let gn = if nn > 0.0 { dn[i] / nn } else { 0.0 };
            out.grad_q[i] = gp - gn;
            out.grad_pos[i] = -gp;
            out.grad_neg[i] = gn;
        }
    }
    Ok(out)
}

/// Pre-hinge value `|q - pos| - |q - neg| + 1`.
pub fn triplet_margin(q: &[f64], pos: &[f64], neg: &[f64]) -> f64 {
    diff_norm(q, pos).1 - diff_norm(q, neg).1 + 1.0
}

fn check_permutation(pi: &[usize], n: usize) -> Result<(), LossError> {
    if pi.len() != n {
        return Err(LossError::InvalidPermutation(n));
    }
    let mut seen = vec![false; n];
    for &p in pi {
        if p >= n || seen[p] {
            return Err(LossError::InvalidPermutation(n));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Per-rank log choice probabilities `s_pi(i) - logsumexp_{k>=i} s_pi(k)`.
fn plackett_steps(scores: &[f64], pi: &[usize]) -> Vec<f64> {
    let ordered: Vec<f64> = pi.iter().map(|&i| scores[i]).collect();
    // suffix log-sum-exp computed from the back
    let mut suffix = vec![f64::NEG_INFINITY; ordered.len() + 1];
    for i in (0..ordered.len()).rev() {
        let (a, b) = (ordered[i], suffix[i + 1]);
        let m = a.max(b);
        suffix[i] = if b == f64::NEG_INFINITY { a } else { m + ((a - m).exp() + (b - m).exp()).ln() };
    }
    (0..ordered.len()).map(|i| ordered[i] - suffix[i]).collect()
}

/// Log Plackett-Luce probability of permutation `pi` (0-based, `pi[i]` is
/// the item at rank `i`) under scores `scores`.
pub fn plackett_log_prob(scores: &[f64], pi: &[usize]) -> Result<f64, LossError> {
    check_permutation(pi, scores.len())?;
    Ok(plackett_steps(scores, pi).iter().sum())
}

pub fn plackett_prob(scores: &[f64], pi: &[usize]) -> Result<f64, LossError> {
    plackett_log_prob(scores, pi).map(f64::exp)
}

/// Position-weighted negative log-likelihood of the teacher permutation:
/// `-sum_i W_i (s_pi(i) - logsumexp_{k>=i} s_pi(k))`.
pub fn listwise_loss(scores: &[f64], teacher_pi: &[usize], weights: &[f64]) -> Result<LossValue, LossError> {
    if weights.len() != scores.len() {
        return Err(LossError::DimensionMismatch(weights.len(), scores.len()));
    }
    check_permutation(teacher_pi, scores.len())?;
    let n = scores.len();
    let ordered: Vec<f64> = teacher_pi.iter().map(|&i| scores[i]).collect();
    let steps = plackett_steps(scores, teacher_pi);
    let loss = -steps.iter().zip(weights).map(|(s, w)| s * w).sum::<f64>();

    // d/ds_pi(j) = -W_j + sum_{i<=j} W_i softmax_i(pi(j)), softmax over the suffix from rank i
    let mut grad_ordered = vec![0.0; n];
    for i in 0..n {
        let lse = ordered[i] - steps[i];
        for j in i..n {
            grad_ordered[j] += weights[i] * (ordered[j] - lse).exp();
        }
        grad_ordered[i] -= weights[i];
    }
    let mut grad = vec![0.0; n];
    for (rank, &item) in teacher_pi.iter().enumerate() {
        grad[item] = grad_ordered[rank];
    }
    Ok(LossValue { loss, grad })
}
