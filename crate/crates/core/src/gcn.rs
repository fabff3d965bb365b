//! Deep GCN over cell graphs: residual or dense backbone, fusion block with a
//! TopK readout, and a three-layer MLP head.

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::features::NUM_FEATURES;
use crate::graph::CellGraph;
use crate::nn::{dropout, Linear};
use crate::param::{uniform_init, Bound, ParamId, ParamStore};
use crate::tensor::{SparseMatrix, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Res,
    Dense,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GcnConfig {
    /// Number of graph-convolution layers in the backbone.
    pub depth: usize,
    pub hidden_dim: usize,
    pub backbone: Backbone,
    pub num_classes: usize,
    pub dropout: f64,
    pub topk_k: usize,
    pub in_features: usize,
}

impl Default for GcnConfig {
    fn default() -> Self {
        GcnConfig {
            depth: 14,
            hidden_dim: 64,
            backbone: Backbone::Res,
            num_classes: 3,
            dropout: 0.2,
            topk_k: 8,
            in_features: NUM_FEATURES,
        }
    }
}

impl GcnConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.depth == 0 {
            bad.push("gcn.depth must be at least 1".to_string());
        }
        if self.hidden_dim < 2 {
            bad.push("gcn.hidden_dim must be at least 2".to_string());
        }
        if self.num_classes < 2 {
            bad.push("gcn.num_classes must be at least 2".to_string());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            bad.push("gcn.dropout must lie in [0, 1)".to_string());
        }
        if self.topk_k == 0 {
            bad.push("gcn.topk_k must be at least 1".to_string());
        }
        if self.in_features == 0 {
            bad.push("gcn.in_features must be positive".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(bad.join("; ")))
        }
    }

    /// Width of the penultimate MLP layer, the exported embedding.
    pub fn embedding_dim(&self) -> usize {
        (self.hidden_dim / 2).max(1)
    }
}

/// Graph tensors that stay fixed during training.
#[derive(Clone, Debug)]
pub struct PreparedGraph {
    pub x: Tensor,
    pub a_hat: Arc<SparseMatrix>,
    pub label: usize,
}

impl PreparedGraph {
    pub fn new(g: &CellGraph) -> Result<Self> {
        if g.n() == 0 {
            return Err(Error::EmptyGraph(g.meta.source.clone()));
        }
        Ok(PreparedGraph {
            x: g.feature_tensor(),
            a_hat: Arc::new(g.normalized_adjacency()?),
            label: g.label,
        })
    }

    pub fn n(&self) -> usize {
        self.x.shape()[0]
    }
}

/// `ReLU(Â X W + b)`.
pub fn graph_conv(tape: &mut Tape, a_hat: &Arc<SparseMatrix>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    if tape.value(x).shape()[0] == 0 {
        return Err(Error::EmptyGraph("graph_conv on zero nodes".into()));
    }
    let xw = tape.matmul(x, w)?;
    let mut h = tape.spmm(a_hat.clone(), xw)?;
    if let Some(b) = b {
        h = tape.add_row_bias(h, b)?;
    }
    tape.relu(h)
}

/// One backbone layer after the first. Returns `(X_{l+1}, new features)`.
pub fn backbone_block(
    tape: &mut Tape,
    a_hat: &Arc<SparseMatrix>,
    x: Var,
    w: Var,
    b: Option<Var>,
    mode: Backbone,
) -> Result<(Var, Var)> {
    let h = graph_conv(tape, a_hat, x, w, b)?;
    match mode {
        Backbone::Res => {
            if tape.value(h).shape() != tape.value(x).shape() {
                return Err(Error::shape(
                    "backbone_block",
                    format!("residual needs equal widths, {:?} vs {:?}", tape.value(x).shape(), tape.value(h).shape()),
                ));
            }
            Ok((tape.add(h, x)?, h))
        }
        Backbone::Dense => Ok((tape.concat_cols(&[h, x])?, h)),
    }
}

/// Nodes ranked by score, highest first, ties to the smaller index.
pub fn topk_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k.min(scores.len()));
    idx
}

/// Gated mean of the top-`k` nodes under `s = X p / ‖p‖`; returns `[1, F]`.
pub fn topk_readout(tape: &mut Tape, x: Var, score: Var, k: usize) -> Result<Var> {
    let (n, f) = tape.value(x).dims2()?;
    if n == 0 {
        return Err(Error::EmptyGraph("topk_readout on zero nodes".into()));
    }
    if k == 0 {
        return Err(Error::invalid("topk k must be at least 1"));
    }
    let p = tape.reshape(score, vec![f, 1])?;
    let raw = tape.matmul(x, p)?;
    let norm = tape.l2_norm_clamped(score, 1e-12)?;
    let s = tape.div_by(raw, norm)?;
    let keep = topk_indices(tape.value(s).data(), k);
    let xs = tape.gather_rows(x, &keep)?;
    let ss = tape.gather_rows(s, &keep)?;
    let gate = tape.tanh(ss)?;
    let gated = tape.scale_rows(xs, gate)?;
    tape.mean_rows(gated)
}

/// Output of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct GcnOutput {
    /// `[1, M]`.
    pub logits: Var,
    /// `[1, hidden/2]`, penultimate MLP activation.
    pub embedding: Var,
}

#[derive(Clone, Debug)]
pub struct GcnModel {
    pub cfg: GcnConfig,
    pub store: ParamStore,
    convs: Vec<Linear>,
    fusion: Linear,
    score: ParamId,
    mlp: [Linear; 3],
}

impl GcnModel {
    pub fn new(cfg: GcnConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let h = cfg.hidden_dim;
        let mut convs = Vec::with_capacity(cfg.depth);
        let mut width = cfg.in_features;
        for l in 0..cfg.depth {
            let name = format!("gcn.conv{l}");
            let layer = if l == 0 {
                Linear::new(&mut store, &name, width, h, &mut rng)?
            } else {
                // Residual branches start small so a deep stack stays well scaled.
                let limit = (6.0 / (width + h) as f64).sqrt() / (cfg.depth as f64).sqrt();
                Linear::with_limit(&mut store, &name, width, h, limit, &mut rng)?
            };
            convs.push(layer);
            width = match (l, cfg.backbone) {
                (0, _) | (_, Backbone::Res) => h,
                (_, Backbone::Dense) => width + h,
            };
        }
        let fusion = Linear::new(&mut store, "gcn.fusion", cfg.depth * h, h, &mut rng)?;
        let limit = 1.0 / (h as f64).sqrt();
        let score = store.add("gcn.topk.score", uniform_init(&mut rng, &[h], limit))?;
        let e = cfg.embedding_dim();
        let mlp = [
            Linear::new(&mut store, "gcn.mlp0", 2 * h, h, &mut rng)?,
            Linear::new(&mut store, "gcn.mlp1", h, e, &mut rng)?,
            Linear::new(&mut store, "gcn.mlp2", e, cfg.num_classes, &mut rng)?,
        ];
        Ok(GcnModel {
            cfg,
            store,
            convs,
            fusion,
            score,
            mlp,
        })
    }

    /// Backbone outputs: `(final X, per-layer features for fusion)`.
    pub fn backbone(&self, tape: &mut Tape, bound: &Bound, g: &PreparedGraph) -> Result<(Var, Vec<Var>)> {
        let x0 = tape.constant(g.x.clone());
        let first = &self.convs[0];
        let mut x = graph_conv(tape, &g.a_hat, x0, bound.get(first.weight), Some(bound.get(first.bias)))?;
        let mut feats = vec![x];
        for layer in &self.convs[1..] {
            let (next, new) = backbone_block(
                tape,
                &g.a_hat,
                x,
                bound.get(layer.weight),
                Some(bound.get(layer.bias)),
                self.cfg.backbone,
            )?;
            x = next;
            feats.push(match self.cfg.backbone {
                Backbone::Res => next,
                Backbone::Dense => new,
            });
        }
        Ok((x, feats))
    }

    /// Concat layer features, project to `hidden_dim`, append the broadcast
    /// TopK global vector: `[N, 2 * hidden_dim]`.
    pub fn fusion_block(&self, tape: &mut Tape, bound: &Bound, feats: &[Var]) -> Result<Var> {
        let cat = tape.concat_cols(feats)?;
        let local = self.fusion.forward(tape, bound, cat)?;
        let global = topk_readout(tape, local, bound.get(self.score), self.cfg.topk_k)?;
        let n = tape.value(local).shape()[0];
        let wide = tape.broadcast_rows(global, n)?;
        tape.concat_cols(&[local, wide])
    }

    /// Full forward pass; dropout is active iff `rng` is given.
    pub fn forward<R: Rng>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        g: &PreparedGraph,
        mut rng: Option<&mut R>,
    ) -> Result<GcnOutput> {
        let (_, feats) = self.backbone(tape, bound, g)?;
        let fused = self.fusion_block(tape, bound, &feats)?;
        let pooled = tape.mean_rows(fused)?;
        let p = self.cfg.dropout;
        let h0 = self.mlp[0].forward(tape, bound, pooled)?;
        let h0 = tape.relu(h0)?;
        let h0 = dropout(tape, h0, p, rng.as_deref_mut())?;
        let h1 = self.mlp[1].forward(tape, bound, h0)?;
        let embedding = tape.relu(h1)?;
        let h1 = dropout(tape, embedding, p, rng.as_deref_mut())?;
        let logits = self.mlp[2].forward(tape, bound, h1)?;
        Ok(GcnOutput { logits, embedding })
    }

    /// Evaluation-mode logits and embedding as plain tensors.
    pub fn infer(&self, g: &PreparedGraph) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let bound = self.store.bind_frozen(&mut tape);
        let out = self.forward(&mut tape, &bound, g, None::<&mut ChaCha8Rng>)?;
        Ok((tape.value(out.logits).clone(), tape.value(out.embedding).clone()))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let cfg = serde_json::to_value(&self.cfg).expect("config serializes");
        Checkpoint::from_store("gcn", cfg, &self.store)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.header.kind != "gcn" {
            return Err(Error::Validation(format!("expected a gcn checkpoint, found {}", ck.header.kind)));
        }
        let cfg: GcnConfig = serde_json::from_value(ck.header.config.clone())
            .map_err(|e| Error::Validation(format!("gcn checkpoint config: {e}")))?;
        let mut model = GcnModel::new(cfg, 0)?;
        model.store.load_values(ck.values.clone())?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> GcnConfig {
        GcnConfig {
            depth: 3,
            hidden_dim: 6,
            num_classes: 3,
            topk_k: 2,
            in_features: 2,
            ..Default::default()
        }
    }

    fn prepared(x: Tensor, edges: &[(usize, usize)]) -> PreparedGraph {
        let n = x.shape()[0];
        PreparedGraph {
            x,
            a_hat: Arc::new(crate::graph::normalized_adjacency(n, edges).unwrap()),
            label: 0,
        }
    }

    #[test]
    fn graph_conv_examples() {
        let mut tape = Tape::new();
        let a1 = Arc::new(crate::graph::normalized_adjacency(1, &[]).unwrap());
        let x = tape.constant(Tensor::new(vec![1, 2], vec![-1.5, 2.0]).unwrap());
        let eye = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = graph_conv(&mut tape, &a1, x, eye, None).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);

        let a2 = Arc::new(crate::graph::normalized_adjacency(2, &[(0, 1), (1, 0)]).unwrap());
        let x = tape.constant(Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap());
        let w = tape.constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let y = graph_conv(&mut tape, &a2, x, w, None).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 2.0]);
    }

    #[test]
    fn topk_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 1], vec![2.0, -5.0]).unwrap());
        let p = tape.constant(Tensor::new(vec![1], vec![1.0]).unwrap());
        let g = topk_readout(&mut tape, x, p, 1).unwrap();
        assert!((tape.value(g).data()[0] - 2.0 * 2f64.tanh()).abs() < 1e-15);
        let all = topk_readout(&mut tape, x, p, 10).unwrap();
        let expect = (2.0 * 2f64.tanh() + -5.0 * (-5f64).tanh()) / 2.0;
        assert!((tape.value(all).data()[0] - expect).abs() < 1e-15);
        assert_eq!(topk_indices(&[1.0, 3.0, 3.0, 0.0], 2), vec![1, 2]);
    }

    #[test]
    fn shapes_and_zero_model() {
        let cfg = tiny_cfg();
        let mut m = GcnModel::new(cfg.clone(), 1).unwrap();
        let g = prepared(Tensor::new(vec![3, 2], vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6]).unwrap(), &[(0, 1), (1, 0)]);
        let (logits, emb) = m.infer(&g).unwrap();
        assert_eq!(logits.shape(), &[1, 3]);
        assert_eq!(emb.shape(), &[1, 3]);
        m.store.zero_all();
        let (z, _) = m.infer(&g).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dense_widths_and_param_names_stable() {
        let cfg = GcnConfig {
            backbone: Backbone::Dense,
            ..tiny_cfg()
        };
        let m = GcnModel::new(cfg.clone(), 3).unwrap();
        assert_eq!(m.store.by_name("gcn.conv2.weight").unwrap().value.shape(), &[12, 6]);
        let again = GcnModel::new(cfg, 4).unwrap();
        let names: Vec<_> = m.store.iter().map(|p| p.name.clone()).collect();
        let names2: Vec<_> = again.store.iter().map(|p| p.name.clone()).collect();
        assert_eq!(names, names2);
        assert_eq!(m.store.numel(), again.store.numel());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = GcnModel::new(tiny_cfg(), 9).unwrap();
        let bytes = m.checkpoint().to_bytes();
        let back = GcnModel::from_checkpoint(&Checkpoint::from_bytes(&bytes, "g").unwrap()).unwrap();
        assert_eq!(back.store, m.store);
        assert_eq!(back.cfg, m.cfg);
    }
}
