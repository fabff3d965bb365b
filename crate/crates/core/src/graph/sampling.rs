use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Target node count per graph.
    pub n_samples: usize,
    /// Share of `n_samples` picked by farthest point sampling; the rest is random.
    pub fps_fraction: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_samples: 100,
            fps_fraction: 0.5,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Validation("sampler.n_samples must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.fps_fraction) {
            return Err(Error::Validation("sampler.fps_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Greedy farthest point sampling.
///
/// Starts at `start` and repeatedly adds the point whose minimum Euclidean
/// distance to the chosen set is largest, breaking ties by smallest index.
/// Returns indices in selection order.
pub fn fps_sample<P: AsRef<[f64]>>(points: &[P], m: usize, start: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if m > n {
        return Err(Error::invalid(format!("fps_sample: m = {m} exceeds N = {n}")));
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    if start >= n {
        return Err(Error::IndexOutOfRange {
            op: "fps_sample",
            index: start,
            len: n,
        });
    }
    let mut chosen = vec![start];
    let mut taken = vec![false; n];
    taken[start] = true;
    let mut min_d: Vec<f64> = points.iter().map(|p| dist2(p.as_ref(), points[start].as_ref())).collect();
    while chosen.len() < m {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            if best.map_or(true, |b| min_d[i] > min_d[b]) {
                best = Some(i);
            }
        }
        let b = best.expect("m <= N leaves a candidate");
        taken[b] = true;
        chosen.push(b);
        for i in 0..n {
            let d = dist2(points[i].as_ref(), points[b].as_ref());
            if d < min_d[i] {
                min_d[i] = d;
            }
        }
    }
    Ok(chosen)
}

/// Sum that does not depend on the order of `values`.
pub(crate) fn order_free_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

/// Index of the centroid nearest to the mean centroid (ties to the smaller index).
pub fn central_index(centroids: &[(f64, f64)]) -> Option<usize> {
    if centroids.is_empty() {
        return None;
    }
    let n = centroids.len() as f64;
    let mr = order_free_sum(centroids.iter().map(|c| c.0)) / n;
    let mc = order_free_sum(centroids.iter().map(|c| c.1)) / n;
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = (c.0 - mr).powi(2) + (c.1 - mc).powi(2);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    Some(best)
}

/// Random key of a cell derived from the seed and the cell's own centroid, so
/// the random part of the selection does not depend on input order.
fn cell_key(seed: u64, c: (f64, f64)) -> u64 {
    let mut bytes = [0u8; 32];
    bytes[..8].copy_from_slice(&seed.to_le_bytes());
    bytes[8..16].copy_from_slice(&c.0.to_bits().to_le_bytes());
    bytes[16..24].copy_from_slice(&c.1.to_bits().to_le_bytes());
    ChaCha8Rng::from_seed(bytes).gen()
}

/// Fused FPS + random cell selection; returns sorted indices.
///
/// If `N <= n_samples` every cell is kept. Otherwise `floor(fps_fraction *
/// n_samples)` cells come from [`fps_sample`] on the centroids, started at the
/// [`central_index`], and the remainder is drawn uniformly without
/// replacement from the unselected cells.
pub fn fused_sample(centroids: &[(f64, f64)], cfg: &SamplerConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    let n = centroids.len();
    if n == 0 {
        return Err(Error::EmptyGraph("no cells to sample".into()));
    }
    if n <= cfg.n_samples {
        return Ok((0..n).collect());
    }
    let m = cfg.n_samples;
    let m_fps = ((cfg.fps_fraction * m as f64).floor() as usize).min(m);
    let points: Vec<[f64; 2]> = centroids.iter().map(|c| [c.0, c.1]).collect();
    let start = central_index(centroids).expect("non-empty");
    let mut selected = fps_sample(&points, m_fps, start)?;
    let mut taken = vec![false; n];
    for &i in &selected {
        taken[i] = true;
    }
    let mut rest: Vec<(u64, usize)> = (0..n)
        .filter(|&i| !taken[i])
        .map(|i| (cell_key(cfg.seed, centroids[i]), i))
        .collect();
    rest.sort_unstable();
    selected.extend(rest.iter().take(m - m_fps).map(|&(_, i)| i));
    selected.sort_unstable();
    Ok(selected)
}
