//! Independent reference implementations and fixtures shared by the
//! integration tests. Everything here is written from the formulas, not from
//! the library code.

#![allow(dead_code)]

use actgraph::features::NUM_FEATURES;
use actgraph::graph::{build_adjacency, CellGraph, EdgeConfig, GraphMeta, SamplerConfig};
use actgraph::tensor::Tensor;
use rand::Rng;

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

pub fn smoothed(y: usize, m: usize, alpha: f64) -> Vec<f64> {
    (0..m).map(|k| if k == y { 1.0 - alpha } else { alpha / (m - 1) as f64 }).collect()
}

/// Mean over rows of `-Σ t ln p` with label-smoothed targets.
pub fn ls_ce(z: &[Vec<f64>], y: &[usize], alpha: f64) -> f64 {
    let m = z[0].len();
    let total: f64 = z
        .iter()
        .zip(y)
        .map(|(row, &yi)| {
            let lp = log_softmax(row);
            -smoothed(yi, m, alpha).iter().zip(&lp).map(|(t, l)| t * l).sum::<f64>()
        })
        .sum();
    total / z.len() as f64
}

pub fn ce(z: &[Vec<f64>], y: &[usize]) -> f64 {
    let total: f64 = z.iter().zip(y).map(|(row, &yi)| -log_softmax(row)[yi]).sum();
    total / z.len() as f64
}

pub const EPS: f64 = 1e-12;

pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(&a, &b)| a * (a.max(EPS).ln() - b.max(EPS).ln())).sum()
}

pub fn mean_kl(p: &[Vec<f64>], q: &[Vec<f64>]) -> f64 {
    p.iter().zip(q).map(|(a, b)| kl(a, b)).sum::<f64>() / p.len() as f64
}

pub fn gate(d: f64, d_kl: f64) -> f64 {
    if d >= d_kl {
        1.0
    } else {
        0.0
    }
}

pub fn dice(y: &[f64], yh: &[f64]) -> f64 {
    let inter: f64 = y.iter().zip(yh).map(|(a, b)| a * b).sum();
    let s: f64 = y.iter().sum::<f64>() + yh.iter().sum::<f64>();
    1.0 - 2.0 * inter / (s + 1e-7)
}

pub fn entropy(yh: &[f64]) -> f64 {
    -yh.iter().map(|v| v * v.max(EPS).ln()).sum::<f64>() / yh.len() as f64
}

pub fn adversarial(d: &[f64]) -> f64 {
    -d.iter().map(|v| v.max(EPS).ln()).sum::<f64>() / d.len() as f64
}

pub fn reconstruction(x: &[f64], r: &[f64]) -> f64 {
    x.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64
}

pub fn discriminator(d: &[f64], z: u8) -> f64 {
    let n = d.len() as f64;
    -d.iter()
        .map(|&v| if z == 1 { v.max(EPS).ln() } else { (1.0 - v).max(EPS).ln() })
        .sum::<f64>()
        / n
}

/// Every pair `(i, j)`, `i != j`, with `j` among the `k` nearest of `i`
/// (distance, then index) and distance below `d`.
pub fn brute_adjacency(t: &[Vec<f64>], k: usize, d: f64, symmetrize: bool) -> Vec<(usize, usize)> {
    let n = t.len();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let mut set = std::collections::BTreeSet::new();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let dij = dist(&t[i], &t[j]);
            let closer = (0..n)
                .filter(|&l| l != i && l != j)
                .filter(|&l| {
                    let dl = dist(&t[i], &t[l]);
                    dl < dij || (dl == dij && l < j)
                })
                .count();
            if closer < k && dij < d {
                set.insert((i, j));
                if symmetrize {
                    set.insert((j, i));
                }
            }
        }
    }
    set.into_iter().collect()
}

/// Greedy FPS written directly from the definition: each step scans all
/// unchosen points and takes the one whose nearest chosen point is farthest.
pub fn greedy_fps(points: &[Vec<f64>], m: usize, start: usize) -> Vec<usize> {
    let d2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let mut chosen = vec![start];
    while chosen.len() < m {
        let mut best = None;
        let mut best_d = -1.0;
        for i in 0..points.len() {
            if chosen.contains(&i) {
                continue;
            }
            let nearest = chosen.iter().map(|&c| d2(&points[i], &points[c])).fold(f64::INFINITY, f64::min);
            if nearest > best_d {
                best_d = nearest;
                best = Some(i);
            }
        }
        chosen.push(best.unwrap());
    }
    chosen
}

/// `(dissimilarity, homogeneity, asm, energy)` of a pixel set, from a
/// co-occurrence matrix built by looking up every pixel's neighbours.
pub fn naive_glcm(pixels: &[(usize, usize)], value: impl Fn(usize, usize) -> f64) -> [f64; 4] {
    const L: usize = 8;
    let vals: Vec<f64> = pixels.iter().map(|&(r, c)| value(r, c)).collect();
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let level = |v: f64| -> usize {
        if hi <= lo {
            0
        } else {
            (((v - lo) / (hi - lo) * L as f64 + 1e-9).floor() as usize).min(L - 1)
        }
    };
    let lookup: std::collections::HashMap<(i64, i64), usize> = pixels
        .iter()
        .zip(&vals)
        .map(|(&(r, c), &v)| ((r as i64, c as i64), level(v)))
        .collect();
    let mut p = [[0.0f64; L]; L];
    let mut total = 0.0;
    for (&(r, c), &a) in &lookup {
        for (dr, dc) in [(0i64, 1i64), (1, 0), (-1, 1), (1, 1)] {
            if let Some(&b) = lookup.get(&(r + dr, c + dc)) {
                p[a][b] += 1.0;
                p[b][a] += 1.0;
                total += 2.0;
            }
        }
    }
    if total == 0.0 {
        return [0.0; 4];
    }
    let (mut dis, mut hom, mut asm) = (0.0, 0.0, 0.0);
    for (i, row) in p.iter().enumerate() {
        for (j, &count) in row.iter().enumerate() {
            let v = count / total;
            let d = (i as f64 - j as f64).abs();
            dis += v * d;
            hom += v / (1.0 + d);
            asm += v * v;
        }
    }
    [dis, hom, asm, asm.sqrt()]
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let (b, _) = t.dims2().unwrap();
    (0..b).map(|i| t.row_slice(i).to_vec()).collect()
}

pub fn graph_meta() -> GraphMeta {
    GraphMeta {
        source: "fixture".into(),
        n_cells: 0,
        sampler: SamplerConfig::default(),
        edge: EdgeConfig {
            symmetrize: true,
            ..EdgeConfig::default()
        },
    }
}

/// A graph with uniform features and KNN edges on the raw features.
pub fn random_graph(rng: &mut impl Rng, n: usize, label: usize) -> CellGraph {
    let features: Vec<[f64; NUM_FEATURES]> = (0..n)
        .map(|_| {
            let mut r = [0.0; NUM_FEATURES];
            for v in &mut r {
                *v = rng.gen_range(-2.0..2.0);
            }
            r
        })
        .collect();
    let coords: Vec<(f64, f64)> = (0..n).map(|_| (rng.gen_range(0.0..64.0), rng.gen_range(0.0..64.0))).collect();
    let edges = build_adjacency(&features, 3.min(n.saturating_sub(1)), f64::INFINITY, true);
    let mut meta = graph_meta();
    meta.n_cells = n;
    CellGraph {
        features,
        coords,
        edges,
        label,
        meta,
    }
}

/// The same graph with node `i` moved to position `perm[i]`.
pub fn permute_graph(g: &CellGraph, perm: &[usize]) -> CellGraph {
    let n = g.n();
    let mut features = vec![[0.0; NUM_FEATURES]; n];
    let mut coords = vec![(0.0, 0.0); n];
    for i in 0..n {
        features[perm[i]] = g.features[i];
        coords[perm[i]] = g.coords[i];
    }
    let mut edges: Vec<(usize, usize)> = g.edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect();
    edges.sort_unstable();
    CellGraph {
        features,
        coords,
        edges,
        label: g.label,
        meta: g.meta.clone(),
    }
}
