//! Cell-graph construction: per-graph standardization, fused FPS/random node
//! sampling, overall features `t = [αg | βc]` and KNN + threshold edges.

mod adjacency;
mod sampling;

pub use adjacency::{build_adjacency, build_adjacency_dilated, overall_feature, EdgeConfig};
pub use sampling::{central_index, fps_sample, fused_sample, SamplerConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{extract_node_features, FeatureVector, LabeledMask, NUM_FEATURES};
use crate::image::GrayImage;
use crate::tensor::{SparseMatrix, Tensor};

/// Provenance stored with every graph file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphMeta {
    pub source: String,
    /// Cells found before sampling.
    pub n_cells: usize,
    pub sampler: SamplerConfig,
    pub edge: EdgeConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellGraph {
    /// Standardized descriptors, one row per node.
    pub features: Vec<[f64; NUM_FEATURES]>,
    /// `(row, col)` centroids in pixels.
    pub coords: Vec<(f64, f64)>,
    /// Directed `(i, j)` pairs, sorted, no self-loops.
    pub edges: Vec<(usize, usize)>,
    pub label: usize,
    pub meta: GraphMeta,
}

impl CellGraph {
    pub fn n(&self) -> usize {
        self.features.len()
    }

    pub fn feature_tensor(&self) -> Tensor {
        let data = self.features.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::new(vec![self.n(), NUM_FEATURES], data).expect("rows are fixed width")
    }

    /// `D^-1/2 (A + I) D^-1/2` with `A[i][j] = 1` for every edge `(i, j)`.
    pub fn normalized_adjacency(&self) -> Result<SparseMatrix> {
        normalized_adjacency(self.n(), &self.edges)
    }

    pub fn check(&self) -> Result<()> {
        let n = self.n();
        if n == 0 {
            return Err(Error::EmptyGraph(self.meta.source.clone()));
        }
        if self.coords.len() != n {
            return Err(Error::Validation(format!("{} coords for {n} nodes", self.coords.len())));
        }
        let finite = self.features.iter().flatten().all(|v| v.is_finite())
            && self.coords.iter().all(|c| c.0.is_finite() && c.1.is_finite());
        if !finite {
            return Err(Error::Validation("non-finite node attribute".into()));
        }
        for &(i, j) in &self.edges {
            if i >= n || j >= n {
                return Err(Error::Validation(format!("edge ({i}, {j}) out of range for {n} nodes")));
            }
            if i == j {
                return Err(Error::Validation(format!("self-loop on node {i}")));
            }
        }
        if self.edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Validation("edges must be sorted and unique".into()));
        }
        if self.meta.edge.symmetrize && self.edges.iter().any(|&(i, j)| self.edges.binary_search(&(j, i)).is_err()) {
            return Err(Error::Validation("edge set is not symmetric".into()));
        }
        Ok(())
    }
}

pub fn normalized_adjacency(n: usize, edges: &[(usize, usize)]) -> Result<SparseMatrix> {
    let mut deg = vec![1.0f64; n];
    for &(i, j) in edges {
        if i >= n || j >= n {
            return Err(Error::IndexOutOfRange {
                op: "normalized_adjacency",
                index: i.max(j),
                len: n,
            });
        }
        deg[i] += 1.0;
    }
    let w = |i: usize, j: usize| 1.0 / (deg[i] * deg[j]).sqrt();
    let mut entries: Vec<(usize, usize, f64)> = (0..n).map(|i| (i, i, w(i, i))).collect();
    entries.extend(edges.iter().map(|&(i, j)| (i, j, w(i, j))));
    SparseMatrix::new(n, n, entries)
}

/// Per-feature z-scores over all rows; a feature without spread becomes 0.
pub fn standardize(rows: &[[f64; NUM_FEATURES]]) -> Vec<[f64; NUM_FEATURES]> {
    let n = rows.len() as f64;
    let mut out = rows.to_vec();
    for f in 0..NUM_FEATURES {
        let mean = sampling::order_free_sum(rows.iter().map(|r| r[f])) / n;
        let var = sampling::order_free_sum(rows.iter().map(|r| (r[f] - mean).powi(2))) / n;
        let std = var.sqrt();
        let flat = !(std > 1e-12 * mean.abs().max(1.0));
        for r in &mut out {
            r[f] = if flat { 0.0 } else { (r[f] - mean) / std };
        }
    }
    out
}

/// Graph from already extracted cells; see [`build_graph`].
pub fn build_graph_from_cells(
    cells: &[FeatureVector],
    sampler: &SamplerConfig,
    edge: &EdgeConfig,
    label: usize,
    source: &str,
) -> Result<CellGraph> {
    edge.validate()?;
    if cells.is_empty() {
        return Err(Error::EmptyGraph(format!("{source}: mask has no cells")));
    }
    let g_all: Vec<[f64; NUM_FEATURES]> = cells.iter().map(|c| c.g).collect();
    let z = standardize(&g_all);
    let centroids: Vec<(f64, f64)> = cells.iter().map(|c| c.c).collect();
    let keep = fused_sample(&centroids, sampler)?;
    let features: Vec<[f64; NUM_FEATURES]> = keep.iter().map(|&i| z[i]).collect();
    let coords: Vec<(f64, f64)> = keep.iter().map(|&i| centroids[i]).collect();
    let t: Vec<[f64; NUM_FEATURES + 2]> = features
        .iter()
        .zip(&coords)
        .map(|(g, &c)| overall_feature(g, c, edge.alpha, edge.beta))
        .collect();
    let edges = build_adjacency_dilated(&t, edge.k, edge.d, edge.symmetrize, edge.dilation);
    Ok(CellGraph {
        features,
        coords,
        edges,
        label,
        meta: GraphMeta {
            source: source.to_string(),
            n_cells: cells.len(),
            sampler: *sampler,
            edge: *edge,
        },
    })
}

/// Extract, standardize, sample and connect the cells of one image/mask pair.
pub fn build_graph(
    image: &GrayImage,
    mask: &LabeledMask,
    sampler: &SamplerConfig,
    edge: &EdgeConfig,
    label: usize,
    source: &str,
) -> Result<CellGraph> {
    let cells = extract_node_features(image, mask)?;
    build_graph_from_cells(&cells, sampler, edge, label, source)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphFile {
    n: usize,
    label: usize,
    coords: Vec<[f64; 2]>,
    features: Vec<[f64; NUM_FEATURES]>,
    edges: Vec<[usize; 2]>,
    meta: GraphMeta,
}

pub fn serialize_graph(g: &CellGraph) -> Vec<u8> {
    let file = GraphFile {
        n: g.n(),
        label: g.label,
        coords: g.coords.iter().map(|c| [c.0, c.1]).collect(),
        features: g.features.clone(),
        edges: g.edges.iter().map(|e| [e.0, e.1]).collect(),
        meta: g.meta.clone(),
    };
    let mut out = serde_json::to_vec(&file).expect("graph is always serializable");
    out.push(b'\n');
    out
}

pub fn deserialize_graph(bytes: &[u8], source_name: &str) -> Result<CellGraph> {
    let file: GraphFile = serde_json::from_slice(bytes).map_err(|e| {
        Error::parse(source_name, format!("line {} column {}", e.line(), e.column()), e.to_string())
    })?;
    if file.n != file.features.len() {
        return Err(Error::parse(
            source_name,
            "n",
            format!("n = {} but {} feature rows", file.n, file.features.len()),
        ));
    }
    let g = CellGraph {
        features: file.features,
        coords: file.coords.iter().map(|c| (c[0], c[1])).collect(),
        edges: file.edges.iter().map(|e| (e[0], e[1])).collect(),
        label: file.label,
        meta: file.meta,
    };
    g.check().map_err(|e| Error::parse(source_name, "graph", e.to_string()))?;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(i: usize) -> FeatureVector {
        let mut g = [0.0; NUM_FEATURES];
        for (f, v) in g.iter_mut().enumerate() {
            *v = ((i * 7 + f * 3) % 11) as f64;
        }
        FeatureVector {
            g,
            c: ((i * 5 % 13) as f64, (i * 3 % 17) as f64),
        }
    }

    #[test]
    fn standardize_zero_mean_unit_variance() {
        let rows: Vec<_> = (0..10).map(|i| cell(i).g).collect();
        let z = standardize(&rows);
        for f in 0..NUM_FEATURES {
            let m: f64 = z.iter().map(|r| r[f]).sum::<f64>() / 10.0;
            let v: f64 = z.iter().map(|r| r[f] * r[f]).sum::<f64>() / 10.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-12);
        }
        let flat = standardize(&[[2.5; NUM_FEATURES]; 3]);
        assert!(flat.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn normalized_adjacency_two_nodes() {
        let a = normalized_adjacency(2, &[(0, 1), (1, 0)]).unwrap();
        let x = Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap();
        assert_eq!(a.matmul(&x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn round_trip_and_errors() {
        let cells: Vec<_> = (0..12).map(cell).collect();
        let g = build_graph_from_cells(&cells, &SamplerConfig::default(), &EdgeConfig { d: 1e9, ..Default::default() }, 2, "x").unwrap();
        let bytes = serialize_graph(&g);
        assert_eq!(deserialize_graph(&bytes, "x").unwrap(), g);
        let cut = &bytes[..bytes.len() / 2];
        assert!(matches!(deserialize_graph(cut, "x"), Err(Error::Parse { .. })));
        let empty = build_graph_from_cells(&[], &SamplerConfig::default(), &EdgeConfig::default(), 0, "e");
        assert!(matches!(empty, Err(Error::EmptyGraph(_))));
    }
}
