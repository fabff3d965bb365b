use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, SampleRecord, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::features::label_components;
use crate::graph::{build_graph, serialize_graph, CellGraph, EdgeConfig, SamplerConfig};
use crate::image::{read_image, read_label_mask, write_file};

pub const GRAPH_DIR: &str = "graphs";
pub const FAILURES_FILE: &str = "failures.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphFailure {
    pub id: String,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GraphBuildReport {
    pub built: usize,
    pub failures: Vec<GraphFailure>,
    pub mean_nodes: f64,
    pub mean_degree: f64,
}

/// Builds the cell graph of one manifest entry.
pub fn graph_for_sample(
    root: &Path,
    s: &SampleRecord,
    sampler: &SamplerConfig,
    edge: &EdgeConfig,
) -> Result<CellGraph> {
    let image = read_image(&root.join(&s.image))?.to_gray();
    let (w, h, labels) = read_label_mask(&root.join(&s.mask))?;
    let mask = label_components(w, h, &labels)?;
    build_graph(&image, &mask, sampler, edge, s.label, &s.id)
}

pub(crate) fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::invalid(format!("cannot start {jobs} worker threads: {e}")))
}

/// Writes `graphs/<id>.json` for every sample, records the paths in the
/// manifest and saves it. Samples whose graph cannot be built are listed in
/// `graphs/failures.json` and left without a graph.
pub fn build_graph_dataset(
    root: &Path,
    manifest: &mut DatasetManifest,
    sampler: &SamplerConfig,
    edge: &EdgeConfig,
    jobs: usize,
) -> Result<GraphBuildReport> {
    sampler.validate()?;
    edge.validate()?;
    let pool = thread_pool(jobs.max(1))?;
    let results: Vec<Result<(String, usize, usize)>> = pool.install(|| {
        manifest
            .samples
            .par_iter()
            .map(|s| {
                let g = graph_for_sample(root, s, sampler, edge)?;
                let rel = format!("{GRAPH_DIR}/{}.json", s.id);
                write_file(&root.join(&rel), &serialize_graph(&g))?;
                Ok((rel, g.n(), g.edges.len()))
            })
            .collect()
    });
    let mut report = GraphBuildReport::default();
    let (mut nodes, mut edges) = (0usize, 0usize);
    for (s, r) in manifest.samples.iter_mut().zip(results) {
        match r {
            Ok((rel, n, e)) => {
                s.graph = Some(rel);
                report.built += 1;
                nodes += n;
                edges += e;
            }
            Err(e) => {
                s.graph = None;
                report.failures.push(GraphFailure {
                    id: s.id.clone(),
                    error: e.to_string(),
                });
            }
        }
    }
    if report.built > 0 {
        report.mean_nodes = nodes as f64 / report.built as f64;
        report.mean_degree = edges as f64 / nodes.max(1) as f64;
    }
    let mut failures = serde_json::to_vec_pretty(&report.failures).expect("failures serialize");
    failures.push(b'\n');
    write_file(&root.join(GRAPH_DIR).join(FAILURES_FILE), &failures)?;
    manifest.save(&root.join(MANIFEST_FILE))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::deserialize_graph;
    use crate::image::encode_label16;
    use crate::pipeline::{generate_synthetic, DatasetConfig};

    fn dataset(dir: &Path) -> DatasetManifest {
        let cfg = DatasetConfig {
            per_class: 3,
            image_size: 48,
            ..DatasetConfig::default()
        };
        generate_synthetic(dir, &cfg, 2).unwrap()
    }

    #[test]
    fn builds_all_graphs_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = dataset(dir.path());
        let sampler = SamplerConfig::default();
        let edge = EdgeConfig::default();
        let r = build_graph_dataset(dir.path(), &mut m, &sampler, &edge, 2).unwrap();
        assert_eq!(r.built, 9);
        assert!(r.failures.is_empty());
        let first: Vec<Vec<u8>> = m
            .samples
            .iter()
            .map(|s| std::fs::read(dir.path().join(s.graph.as_ref().unwrap())).unwrap())
            .collect();
        let mut again = m.clone();
        build_graph_dataset(dir.path(), &mut again, &sampler, &edge, 1).unwrap();
        for (s, bytes) in again.samples.iter().zip(&first) {
            assert_eq!(&std::fs::read(dir.path().join(s.graph.as_ref().unwrap())).unwrap(), bytes);
        }
        let g = deserialize_graph(&first[0], "g").unwrap();
        assert_eq!(g.label, m.samples[0].label);
        let reloaded = DatasetManifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(reloaded, again);
    }

    #[test]
    fn empty_mask_is_reported_not_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = dataset(dir.path());
        let victim = m.samples[4].clone();
        std::fs::write(dir.path().join(&victim.mask), encode_label16(48, 48, &[0; 48 * 48]).unwrap()).unwrap();
        let r = build_graph_dataset(dir.path(), &mut m, &SamplerConfig::default(), &EdgeConfig::default(), 1).unwrap();
        assert_eq!(r.built, 8);
        assert_eq!(r.failures.len(), 1);
        assert_eq!(r.failures[0].id, victim.id);
        assert!(m.samples[4].graph.is_none());
        let listed = std::fs::read_to_string(dir.path().join("graphs/failures.json")).unwrap();
        assert!(listed.contains(&victim.id));
    }
}
