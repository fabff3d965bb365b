use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::NUM_FEATURES;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EdgeConfig {
    /// Neighbours considered per node.
    pub k: usize,
    /// Distance threshold in overall-feature units; edges need `D < d`.
    pub d: f64,
    /// Weight of the standardized descriptor part.
    pub alpha: f64,
    /// Weight of the centroid part (pixel units).
    pub beta: f64,
    pub symmetrize: bool,
    /// Keep every `dilation`-th entry of the `k * dilation` nearest neighbours.
    pub dilation: usize,
}

impl Default for EdgeConfig {
    fn default() -> Self {
        EdgeConfig {
            k: 8,
            d: 3.0,
            alpha: 1.0,
            beta: 0.5,
            symmetrize: true,
            dilation: 1,
        }
    }
}

impl EdgeConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.k == 0 {
            bad.push("edge.k must be at least 1");
        }
        if self.d.is_nan() || self.d <= 0.0 {
            bad.push("edge.d must be positive");
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) || !self.alpha.is_finite() || !self.beta.is_finite() {
            bad.push("edge.alpha and edge.beta must be finite and non-negative");
        }
        if self.alpha == 0.0 && self.beta == 0.0 {
            bad.push("edge.alpha and edge.beta cannot both be zero");
        }
        if self.dilation == 0 {
            bad.push("edge.dilation must be at least 1");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(bad.join("; ")))
        }
    }
}

/// `t = [alpha * g | beta * c]`.
pub fn overall_feature(g: &[f64; NUM_FEATURES], c: (f64, f64), alpha: f64, beta: f64) -> [f64; NUM_FEATURES + 2] {
    let mut t = [0.0; NUM_FEATURES + 2];
    for (o, v) in t.iter_mut().zip(g) {
        *o = alpha * v;
    }
    t[NUM_FEATURES] = beta * c.0;
    t[NUM_FEATURES + 1] = beta * c.1;
    t
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// KNN + threshold edges over the rows of `t`.
///
/// Node `i` links to `j` when `j` is among its `k` nearest other nodes
/// (Euclidean, ties by index) and `D(t_i, t_j) < d`. Edges come back sorted
/// and, if `symmetrize`, closed under reversal.
pub fn build_adjacency<P: AsRef<[f64]>>(t: &[P], k: usize, d: f64, symmetrize: bool) -> Vec<(usize, usize)> {
    build_adjacency_dilated(t, k, d, symmetrize, 1)
}

/// [`build_adjacency`] where the candidate list is every `dilation`-th entry of
/// the `k * dilation` nearest neighbours.
pub fn build_adjacency_dilated<P: AsRef<[f64]>>(
    t: &[P],
    k: usize,
    d: f64,
    symmetrize: bool,
    dilation: usize,
) -> Vec<(usize, usize)> {
    let n = t.len();
    let dilation = dilation.max(1);
    let mut edges = Vec::new();
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        cand.clear();
        cand.extend((0..n).filter(|&j| j != i).map(|j| (distance(t[i].as_ref(), t[j].as_ref()), j)));
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(dist, j) in cand.iter().take(k.saturating_mul(dilation)).step_by(dilation) {
            if dist < d {
                edges.push((i, j));
            }
        }
    }
    if symmetrize {
        let rev: Vec<(usize, usize)> = edges.iter().map(|&(a, b)| (b, a)).collect();
        edges.extend(rev);
    }
    edges.sort_unstable();
    edges.dedup();
    edges
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overall_feature_scaling() {
        let t = overall_feature(&[1.0; 16], (3.0, 4.0), 2.0, 1.0);
        assert!(t[..16].iter().all(|&v| v == 2.0));
        assert_eq!(&t[16..], &[3.0, 4.0]);
        let z = overall_feature(&[5.0; 16], (3.0, 4.0), 0.0, 1.0);
        assert!(z[..16].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn threshold_cuts_far_neighbour() {
        let t = [[0.0, 0.0], [1.0, 0.0], [10.0, 0.0]];
        assert_eq!(build_adjacency(&t, 1, 5.0, true), vec![(0, 1), (1, 0)]);
        assert_eq!(build_adjacency(&t, 1, 5.0, false), vec![(0, 1), (1, 0)]);
        assert!(build_adjacency(&t, 2, 0.0, true).is_empty());
        assert_eq!(build_adjacency(&t, 1, f64::INFINITY, false), vec![(0, 1), (1, 0), (2, 1)]);
        assert_eq!(build_adjacency(&t, 1, f64::INFINITY, true), vec![(0, 1), (1, 0), (1, 2), (2, 1)]);
    }

    #[test]
    fn dilation_skips_neighbours() {
        let t: Vec<[f64; 1]> = (0..6).map(|i| [i as f64]).collect();
        // Sorted neighbours of 0: 1,2,3,4,5; dilation 2, k 2 -> 1 and 3.
        let e = build_adjacency_dilated(&t, 2, f64::INFINITY, false, 2);
        let from0: Vec<usize> = e.iter().filter(|e| e.0 == 0).map(|e| e.1).collect();
        assert_eq!(from0, vec![1, 3]);
    }

    #[test]
    fn validation_lists_problems() {
        let cfg = EdgeConfig {
            k: 0,
            alpha: 0.0,
            beta: 0.0,
            ..Default::default()
        };
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("edge.k") && msg.contains("both be zero"));
    }
}
