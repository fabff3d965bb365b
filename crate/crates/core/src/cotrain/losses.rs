//! Classification and coupling losses. Each loss exists as a tape operation
//! and as a plain function returning the same value.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{softmax_rows, Tensor};

/// Clamp inside every logarithm of the KL divergence.
pub const KL_EPS: f64 = 1e-12;

/// Tolerance on row sums accepted as probability distributions.
pub const PROB_TOL: f64 = 1e-9;

fn check_labels(labels: &[usize], b: usize, m: usize) -> Result<()> {
    if labels.len() != b {
        return Err(Error::shape("loss", format!("{b} logit rows, {} labels", labels.len())));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= m) {
        return Err(Error::invalid(format!("label {y} out of range for {m} classes")));
    }
    Ok(())
}

/// Smoothed targets: `1 - alpha` on the true class, `alpha / (M - 1)` elsewhere.
pub fn smoothing_targets(labels: &[usize], m: usize, alpha: f64) -> Result<Tensor> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::invalid(format!("label smoothing alpha {alpha} outside [0, 1)")));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= m) {
        return Err(Error::invalid(format!("label {y} out of range for {m} classes")));
    }
    let off = if alpha == 0.0 { 0.0 } else { alpha / (m - 1) as f64 };
    let mut t = vec![off; labels.len() * m];
    for (i, &y) in labels.iter().enumerate() {
        t[i * m + y] = 1.0 - alpha;
    }
    Tensor::new(vec![labels.len(), m], t)
}

/// `-(1/B) Σ_b Σ_m target[b, m] · log_softmax(z)[b, m]`.
pub fn soft_target_ce_on_tape(tape: &mut Tape, logits: Var, targets: Arc<Tensor>) -> Result<Var> {
    let (b, _) = tape.value(logits).dims2()?;
    let ls = tape.log_softmax(logits)?;
    let weighted = tape.mul_const(ls, targets)?;
    let s = tape.sum(weighted)?;
    tape.scale(s, -1.0 / b as f64)
}

pub fn cross_entropy_on_tape(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (b, m) = tape.value(logits).dims2()?;
    check_labels(labels, b, m)?;
    let t = smoothing_targets(labels, m, 0.0)?;
    soft_target_ce_on_tape(tape, logits, Arc::new(t))
}

pub fn label_smoothing_ce_on_tape(tape: &mut Tape, logits: Var, labels: &[usize], alpha: f64) -> Result<Var> {
    let (b, m) = tape.value(logits).dims2()?;
    if m < 2 {
        return Err(Error::invalid("label smoothing needs at least two classes"));
    }
    check_labels(labels, b, m)?;
    let t = smoothing_targets(labels, m, alpha)?;
    soft_target_ce_on_tape(tape, logits, Arc::new(t))
}

/// `(1/B) Σ_b w_b · KL(peer_b ‖ softmax(z)_b)` with the peer held constant.
/// `weights = None` means every `w_b = 1`.
pub fn kl_to_peer_on_tape(tape: &mut Tape, peer: &Tensor, logits: Var, weights: Option<&[f64]>) -> Result<Var> {
    let (b, m) = tape.value(logits).dims2()?;
    if peer.shape() != [b, m] {
        return Err(Error::shape("kl", format!("peer {:?} vs logits {:?}", peer.shape(), [b, m])));
    }
    let w = |i: usize| weights.map_or(1.0, |w| w[i]);
    if let Some(ws) = weights {
        if ws.len() != b {
            return Err(Error::shape("kl", format!("{} weights for {b} rows", ws.len())));
        }
    }
    let mut scaled = peer.clone();
    let mut entropy_term = 0.0;
    for i in 0..b {
        let wi = w(i);
        for j in 0..m {
            let p = peer.data()[i * m + j];
            entropy_term += wi * p * p.max(KL_EPS).ln();
            scaled.data_mut()[i * m + j] = wi * p;
        }
    }
    let p_self = tape.softmax(logits)?;
    let lp = tape.ln_clamped(p_self, KL_EPS)?;
    let cross = tape.mul_const(lp, Arc::new(scaled))?;
    let cross = tape.sum(cross)?;
    let neg = tape.scale(cross, -1.0 / b as f64)?;
    tape.add_scalar(neg, entropy_term / b as f64)
}

fn eval_scalar(f: impl FnOnce(&mut Tape, Var) -> Result<Var>, logits: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let z = tape.constant(logits.clone());
    let out = f(&mut tape, z)?;
    Ok(tape.value(out).data()[0])
}

/// Batch-mean cross-entropy of `[B, M]` logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    eval_scalar(|t, z| cross_entropy_on_tape(t, z, labels), logits)
}

/// Batch-mean label-smoothing cross-entropy of `[B, M]` logits.
pub fn label_smoothing_ce(logits: &Tensor, labels: &[usize], alpha: f64) -> Result<f64> {
    eval_scalar(|t, z| label_smoothing_ce_on_tape(t, z, labels, alpha), logits)
}

fn check_probabilities(p: &Tensor, name: &str) -> Result<(usize, usize)> {
    let (b, m) = p.dims2()?;
    for i in 0..b {
        let row = p.row_slice(i);
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > PROB_TOL || row.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::invalid(format!("{name} row {i} is not a distribution (sum {s})")));
        }
    }
    Ok((b, m))
}

/// Per-row `Σ_m a ln(max(a, ε) / max(b, ε))`, floored at 0 so rounding on
/// near-equal rows cannot produce a negative divergence.
pub fn kl_rows(pa: &Tensor, pb: &Tensor) -> Result<Vec<f64>> {
    let (b, m) = check_probabilities(pa, "p_a")?;
    if check_probabilities(pb, "p_b")? != (b, m) {
        return Err(Error::shape("kl_divergence", format!("{:?} vs {:?}", pa.shape(), pb.shape())));
    }
    Ok((0..b)
        .map(|i| {
            pa.row_slice(i)
                .iter()
                .zip(pb.row_slice(i))
                .map(|(&a, &q)| a * (a.max(KL_EPS).ln() - q.max(KL_EPS).ln()))
                .sum::<f64>()
                .max(0.0)
        })
        .collect())
}

/// Batch-mean `KL(p_a ‖ p_b)`.
pub fn kl_divergence(pa: &Tensor, pb: &Tensor) -> Result<f64> {
    let rows = kl_rows(pa, pb)?;
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(rows.iter().sum::<f64>() / rows.len() as f64)
}

/// 1 when the divergence reaches the threshold, else 0.
pub fn kl_gate(d: f64, d_kl: f64) -> f64 {
    if d >= d_kl {
        1.0
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateMode {
    /// One gate per direction from the minibatch-mean divergence.
    #[default]
    Batch,
    /// One gate per sample and direction.
    Sample,
}

/// Scalars reported for one minibatch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossDiagnostics {
    pub ls_ce: f64,
    pub ce: f64,
    /// `KL(p2 ‖ p1)`, the CNN's coupling divergence.
    pub kl_21: f64,
    /// `KL(p1 ‖ p2)`, the GCN's coupling divergence.
    pub kl_12: f64,
    /// Fraction of the batch on which the CNN coupling fired.
    pub gate_1: f64,
    pub gate_2: f64,
    pub l_theta1: f64,
    pub l_theta2: f64,
    pub l_act: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct BranchLosses {
    /// On the CNN tape.
    pub l_theta1: Var,
    /// On the GCN tape.
    pub l_theta2: Var,
    pub diag: LossDiagnostics,
}

/// Both branch objectives for one minibatch.
///
/// `z1` lives on `tape1` (CNN) and `z2` on `tape2` (GCN). Each coupling term
/// sees the other branch's probabilities as constants; a closed gate leaves
/// the term off the tape entirely.
#[allow(clippy::too_many_arguments)]
pub fn branch_losses(
    tape1: &mut Tape,
    z1: Var,
    tape2: &mut Tape,
    z2: Var,
    labels: &[usize],
    ls_alpha: f64,
    d_kl: f64,
    mode: GateMode,
) -> Result<BranchLosses> {
    let s1 = tape1.value(z1).shape().to_vec();
    let s2 = tape2.value(z2).shape().to_vec();
    if s1 != s2 {
        return Err(Error::shape("branch_losses", format!("batch {s1:?} vs {s2:?}")));
    }
    let p1 = softmax_rows(tape1.value(z1))?;
    let p2 = softmax_rows(tape2.value(z2))?;
    let rows_21 = kl_rows(&p2, &p1)?;
    let rows_12 = kl_rows(&p1, &p2)?;
    let b = rows_21.len() as f64;
    let kl_21 = rows_21.iter().sum::<f64>() / b;
    let kl_12 = rows_12.iter().sum::<f64>() / b;

    let ls = label_smoothing_ce_on_tape(tape1, z1, labels, ls_alpha)?;
    let ce = cross_entropy_on_tape(tape2, z2, labels)?;

    let gates = |rows: &[f64], mean: f64| -> Vec<f64> {
        match mode {
            GateMode::Batch => vec![kl_gate(mean, d_kl); rows.len()],
            GateMode::Sample => rows.iter().map(|&d| kl_gate(d, d_kl)).collect(),
        }
    };
    let g1 = gates(&rows_21, kl_21);
    let g2 = gates(&rows_12, kl_12);

    let l_theta1 = if g1.iter().any(|&g| g > 0.0) {
        let w = (mode == GateMode::Sample).then_some(g1.as_slice());
        let kl = kl_to_peer_on_tape(tape1, &p2, z1, w)?;
        tape1.add(ls, kl)?
    } else {
        ls
    };
    let l_theta2 = if g2.iter().any(|&g| g > 0.0) {
        let w = (mode == GateMode::Sample).then_some(g2.as_slice());
        let kl = kl_to_peer_on_tape(tape2, &p1, z2, w)?;
        tape2.add(ce, kl)?
    } else {
        ce
    };
    let v1 = tape1.value(l_theta1).data()[0];
    let v2 = tape2.value(l_theta2).data()[0];
    Ok(BranchLosses {
        l_theta1,
        l_theta2,
        diag: LossDiagnostics {
            ls_ce: tape1.value(ls).data()[0],
            ce: tape2.value(ce).data()[0],
            kl_21,
            kl_12,
            gate_1: g1.iter().sum::<f64>() / b,
            gate_2: g2.iter().sum::<f64>() / b,
            l_theta1: v1,
            l_theta2: v2,
            l_act: v1 + v2,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ce_examples() {
        let z = Tensor::zeros(&[1, 7]);
        assert!((cross_entropy(&z, &[3]).unwrap() - 7f64.ln()).abs() < 1e-15);
        let mut big = Tensor::zeros(&[1, 3]);
        big.data_mut()[1] = 30.0;
        assert!(cross_entropy(&big, &[1]).unwrap() < 1e-12);
        assert!(cross_entropy(&z, &[7]).is_err());
        let z = Tensor::from_rows(&[[0.3, -1.2, 2.0], [1.0, 0.5, -0.5]]);
        assert_eq!(
            cross_entropy(&z, &[2, 0]).unwrap().to_bits(),
            label_smoothing_ce(&z, &[2, 0], 0.0).unwrap().to_bits()
        );
    }

    #[test]
    fn smoothing_targets_values() {
        let t = smoothing_targets(&[2], 7, 0.1).unwrap();
        assert_eq!(t.data()[2], 0.9);
        assert!((t.data()[0] - 0.1 / 6.0).abs() < 1e-18);
        assert!((t.sum() - 1.0).abs() < 1e-15);
        let z = Tensor::zeros(&[2, 7]);
        assert!((label_smoothing_ce(&z, &[0, 5], 0.1).unwrap() - 7f64.ln()).abs() < 1e-14);
        assert!(label_smoothing_ce(&Tensor::zeros(&[1, 1]), &[0], 0.1).is_err());
    }

    #[test]
    fn kl_examples() {
        let a = Tensor::from_rows(&[[1.0, 0.0]]);
        let b = Tensor::from_rows(&[[0.5, 0.5]]);
        assert!((kl_divergence(&a, &b).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(kl_divergence(&b, &b).unwrap(), 0.0);
        assert_ne!(kl_divergence(&a, &b).unwrap(), kl_divergence(&b, &a).unwrap());
        assert!(kl_divergence(&Tensor::from_rows(&[[0.7, 0.7]]), &b).is_err());
    }

    #[test]
    fn gate_examples() {
        assert_eq!(kl_gate(0.25, 0.1), 1.0);
        assert_eq!(kl_gate(0.05, 0.1), 0.0);
        assert_eq!(kl_gate(0.1, 0.1), 1.0);
        assert_eq!(kl_gate(1e300, f64::INFINITY), 0.0);
    }

    #[test]
    fn identical_branches_have_no_coupling() {
        let z = Tensor::from_rows(&[[0.2, 0.1], [-0.4, 0.9]]);
        let (mut t1, mut t2) = (Tape::new(), Tape::new());
        let z1 = t1.var(z.clone());
        let z2 = t2.var(z.clone());
        let out = branch_losses(&mut t1, z1, &mut t2, z2, &[0, 1], 0.1, 0.1, GateMode::Batch).unwrap();
        assert_eq!(out.diag.gate_1, 0.0);
        assert_eq!(out.diag.l_theta1, label_smoothing_ce(&z, &[0, 1], 0.1).unwrap());
        assert_eq!(out.diag.l_theta2, cross_entropy(&z, &[0, 1]).unwrap());
    }

    #[test]
    fn kl_tape_matches_plain() {
        let z1 = Tensor::from_rows(&[[0.2, 1.1, -0.3], [2.0, -1.0, 0.0]]);
        let z2 = Tensor::from_rows(&[[1.5, -0.1, 0.3], [0.0, 0.4, -2.0]]);
        let p2 = softmax_rows(&z2).unwrap();
        let mut tape = Tape::new();
        let v = tape.var(z1.clone());
        let kl = kl_to_peer_on_tape(&mut tape, &p2, v, None).unwrap();
        let plain = kl_divergence(&p2, &softmax_rows(&z1).unwrap()).unwrap();
        assert!((tape.value(kl).data()[0] - plain).abs() < 1e-14);
    }
}
