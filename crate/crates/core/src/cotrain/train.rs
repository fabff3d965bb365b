use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{branch_losses, cross_entropy_on_tape, label_smoothing_ce_on_tape, GateMode};
use super::metrics::{evaluate_metrics, MetricsReport};
use crate::autograd::{Tape, Var};
use crate::cnn::CnnModel;
use crate::error::{Error, Result};
use crate::gcn::{GcnModel, PreparedGraph};
use crate::optim::{adamw_step, AdamWConfig, PlateauConfig, PlateauScheduler};
use crate::param::{Bound, ParamStore};
use crate::tensor::{softmax_rows, Tensor};

/// One training example seen by both branches.
#[derive(Clone, Debug)]
pub struct PairedSample {
    pub id: String,
    /// `[C, H, W]` in `[0, 1]`.
    pub image: Arc<Tensor>,
    pub graph: PreparedGraph,
    pub label: usize,
}

/// JSON has no infinity, so thresholds accept the string `"inf"` as well.
mod threshold {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Raw::Text(t) => Err(de::Error::custom(format!("expected a number or \"inf\", got {t:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoTrainConfig {
    /// KL threshold; `"inf"` disables coupling.
    #[serde(with = "threshold")]
    pub d_kl: f64,
    pub ls_alpha: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub plateau: PlateauConfig,
    pub adamw: AdamWConfig,
    pub gate: GateMode,
    /// Share of the training split held out for the plateau metric.
    pub val_fraction: f64,
}

impl Default for CoTrainConfig {
    fn default() -> Self {
        CoTrainConfig {
            d_kl: 0.1,
            ls_alpha: 0.1,
            lr: 2e-3,
            batch_size: 32,
            epochs: 30,
            plateau: PlateauConfig::default(),
            adamw: AdamWConfig::default(),
            gate: GateMode::Batch,
            val_fraction: 0.1,
        }
    }
}

impl CoTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.d_kl >= 0.0) {
            bad.push("cotrain.d_kl must be non-negative");
        }
        if !(0.0..1.0).contains(&self.ls_alpha) {
            bad.push("cotrain.ls_alpha must lie in [0, 1)");
        }
        if !(self.lr > self.plateau.min_lr && self.plateau.min_lr > 0.0) || !self.lr.is_finite() {
            bad.push("cotrain.lr must exceed plateau.min_lr > 0");
        }
        if self.batch_size == 0 {
            bad.push("cotrain.batch_size must be positive");
        }
        if !(self.plateau.factor > 0.0 && self.plateau.factor < 1.0) {
            bad.push("cotrain.plateau.factor must lie in (0, 1)");
        }
        if self.plateau.patience == 0 {
            bad.push("cotrain.plateau.patience must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            bad.push("cotrain.val_fraction must lie in [0, 1)");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(bad.join("; ")))
        }
    }
}

/// A classifier that can be trained inside the co-training loop.
pub trait BranchModel {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    /// `([1, M] logits, [1, E] embedding)`; dropout iff `rng` is given.
    fn forward_sample(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        sample: &PairedSample,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Var)>;
}

impl BranchModel for CnnModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward_sample(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        sample: &PairedSample,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Var)> {
        let x = tape.constant((*sample.image).clone());
        let out = self.forward(tape, bound, x, rng)?;
        Ok((out.logits, out.embedding))
    }
}

impl BranchModel for GcnModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward_sample(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        sample: &PairedSample,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Var)> {
        let out = self.forward(tape, bound, &sample.graph, rng)?;
        Ok((out.logits, out.embedding))
    }
}

/// Evaluation-mode logits `[N, M]` and embeddings `[N, E]`.
pub fn infer_all<M: BranchModel>(model: &M, samples: &[PairedSample]) -> Result<(Tensor, Tensor)> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut logits = Vec::new();
    let mut emb = Vec::new();
    for s in samples {
        let mut tape = Tape::new();
        let bound = model.store().bind_frozen(&mut tape);
        let (z, e) = model.forward_sample(&mut tape, &bound, s, None)?;
        logits.push(tape.value(z).data().to_vec());
        emb.push(tape.value(e).data().to_vec());
    }
    Ok((Tensor::from_rows(&logits), Tensor::from_rows(&emb)))
}

pub fn predict<M: BranchModel>(model: &M, samples: &[PairedSample]) -> Result<Vec<usize>> {
    infer_all(model, samples)?.0.argmax_rows()
}

pub fn evaluate<M: BranchModel>(model: &M, samples: &[PairedSample], m: usize) -> Result<MetricsReport> {
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    evaluate_metrics(&predict(model, samples)?, &labels, m)
}

fn accuracy<M: BranchModel>(model: &M, samples: &[PairedSample]) -> Result<f64> {
    let preds = predict(model, samples)?;
    let hits = preds.iter().zip(samples).filter(|(p, s)| **p == s.label).count();
    Ok(hits as f64 / samples.len() as f64)
}

/// Per-branch optimizer and scheduler state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchState {
    pub steps: u64,
    pub scheduler: PlateauScheduler,
}

/// Loop state shared by both training modes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub cnn: BranchState,
    pub gcn: BranchState,
    pub history: Vec<EpochRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_theta1: f64,
    pub l_theta2: f64,
    pub l_act: f64,
    pub gate_fire_cnn: f64,
    pub gate_fire_gcn: f64,
    /// Rates in effect during the epoch.
    pub lr_cnn: f64,
    pub lr_gcn: f64,
    pub val_acc_cnn: f64,
    pub val_acc_gcn: f64,
}

pub const HISTORY_HEADER: &str =
    "epoch,l_theta1,l_theta2,l_act,gate_fire_cnn,gate_fire_gcn,lr_cnn,lr_gcn,val_acc_cnn,val_acc_gcn";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in history {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.l_theta1,
            r.l_theta2,
            r.l_act,
            r.gate_fire_cnn,
            r.gate_fire_gcn,
            r.lr_cnn,
            r.lr_gcn,
            r.val_acc_cnn,
            r.val_acc_gcn
        );
    }
    out
}

/// Random streams of one run: batch order and one dropout stream per branch.
struct Streams {
    shuffle: ChaCha8Rng,
    cnn: ChaCha8Rng,
    gcn: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Streams {
            shuffle: stream(1),
            cnn: stream(2),
            gcn: stream(3),
        }
    }
}

fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    order.chunks(size).map(|c| c.to_vec()).collect()
}

fn forward_batch<M: BranchModel>(
    model: &M,
    tape: &mut Tape,
    bound: &Bound,
    data: &[PairedSample],
    batch: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let mut rows = Vec::with_capacity(batch.len());
    for &i in batch {
        rows.push(model.forward_sample(tape, bound, &data[i], Some(&mut *rng))?.0);
    }
    tape.concat_rows(&rows)
}

fn apply_update<M: BranchModel>(
    model: &mut M,
    state: &mut BranchState,
    tape: &Tape,
    bound: &Bound,
    loss: Var,
    adamw: &AdamWConfig,
) -> Result<()> {
    let grads = tape.backward(loss)?;
    let g = model.store().gradients(bound, &grads)?;
    state.steps += 1;
    adamw_step(model.store_mut(), &g, state.steps, state.scheduler.lr, adamw)
}

fn check_inputs(train: &[PairedSample], val: &[PairedSample], cfg: &CoTrainConfig) -> Result<()> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(())
}

fn fresh_state(cfg: &CoTrainConfig) -> TrainState {
    let b = BranchState {
        steps: 0,
        scheduler: PlateauScheduler::new(cfg.lr, cfg.plateau),
    };
    TrainState {
        epoch: 0,
        cnn: b.clone(),
        gcn: b,
        history: Vec::new(),
    }
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub cnn: CnnModel,
    pub gcn: GcnModel,
    pub state: TrainState,
}

/// Train both branches jointly with the gated KL coupling.
pub fn co_train(
    mut cnn: CnnModel,
    mut gcn: GcnModel,
    train: &[PairedSample],
    val: &[PairedSample],
    cfg: &CoTrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    check_inputs(train, val, cfg)?;
    let mut streams = Streams::new(seed);
    let mut state = fresh_state(cfg);
    let labels_of = |b: &[usize]| b.iter().map(|&i| train[i].label).collect::<Vec<_>>();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut streams.shuffle);
        let (lr_cnn, lr_gcn) = (state.cnn.scheduler.lr, state.gcn.scheduler.lr);
        let mut sums = [0.0f64; 5];
        let bs = batches(&order, cfg.batch_size);
        for batch in &bs {
            let mut t1 = Tape::new();
            let b1 = cnn.store.bind(&mut t1);
            let z1 = forward_batch(&cnn, &mut t1, &b1, train, batch, &mut streams.cnn)?;
            let mut t2 = Tape::new();
            let b2 = gcn.store.bind(&mut t2);
            let z2 = forward_batch(&gcn, &mut t2, &b2, train, batch, &mut streams.gcn)?;
            let out = branch_losses(&mut t1, z1, &mut t2, z2, &labels_of(batch), cfg.ls_alpha, cfg.d_kl, cfg.gate)?;
            apply_update(&mut cnn, &mut state.cnn, &t1, &b1, out.l_theta1, &cfg.adamw)?;
            apply_update(&mut gcn, &mut state.gcn, &t2, &b2, out.l_theta2, &cfg.adamw)?;
            let d = out.diag;
            for (s, v) in sums.iter_mut().zip([d.l_theta1, d.l_theta2, d.l_act, d.gate_1, d.gate_2]) {
                *s += v;
            }
        }
        let nb = bs.len() as f64;
        let val_acc_cnn = accuracy(&cnn, val)?;
        let val_acc_gcn = accuracy(&gcn, val)?;
        state.cnn.scheduler.step(val_acc_cnn);
        state.gcn.scheduler.step(val_acc_gcn);
        state.epoch = epoch;
        state.history.push(EpochRecord {
            epoch,
            l_theta1: sums[0] / nb,
            l_theta2: sums[1] / nb,
            l_act: sums[2] / nb,
            gate_fire_cnn: sums[3] / nb,
            gate_fire_gcn: sums[4] / nb,
            lr_cnn,
            lr_gcn,
            val_acc_cnn,
            val_acc_gcn,
        });
    }
    Ok(TrainOutcome { cnn, gcn, state })
}

/// Per-epoch trace of one branch trained alone: `(batch losses, lr, val acc)`.
type BranchTrace = Vec<(Vec<f64>, f64, f64)>;

fn train_alone<M: BranchModel>(
    model: &mut M,
    state: &mut BranchState,
    train: &[PairedSample],
    val: &[PairedSample],
    cfg: &CoTrainConfig,
    mut shuffle: ChaCha8Rng,
    mut dropout: ChaCha8Rng,
    loss: impl Fn(&mut Tape, Var, &[usize]) -> Result<Var>,
) -> Result<BranchTrace> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        let lr = state.scheduler.lr;
        let mut losses = Vec::new();
        for batch in batches(&order, cfg.batch_size) {
            let mut tape = Tape::new();
            let bound = model.store().bind(&mut tape);
            let z = forward_batch(model, &mut tape, &bound, train, &batch, &mut dropout)?;
            let labels: Vec<usize> = batch.iter().map(|&i| train[i].label).collect();
            let l = loss(&mut tape, z, &labels)?;
            losses.push(tape.value(l).data()[0]);
            apply_update(model, state, &tape, &bound, l, &cfg.adamw)?;
        }
        let acc = accuracy(model, val)?;
        state.scheduler.step(acc);
        trace.push((losses, lr, acc));
    }
    Ok(trace)
}

/// Train each branch on its own objective with the same seeds and batch
/// order as [`co_train`], without any coupling.
pub fn train_independent(
    mut cnn: CnnModel,
    mut gcn: GcnModel,
    train: &[PairedSample],
    val: &[PairedSample],
    cfg: &CoTrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    check_inputs(train, val, cfg)?;
    let mut state = fresh_state(cfg);
    let s = Streams::new(seed);
    let alpha = cfg.ls_alpha;
    let t1 = train_alone(&mut cnn, &mut state.cnn, train, val, cfg, s.shuffle.clone(), s.cnn, |t, z, y| {
        label_smoothing_ce_on_tape(t, z, y, alpha)
    })?;
    let t2 = train_alone(&mut gcn, &mut state.gcn, train, val, cfg, s.shuffle, s.gcn, |t, z, y| {
        cross_entropy_on_tape(t, z, y)
    })?;
    for (e, ((l1, lr1, a1), (l2, lr2, a2))) in t1.into_iter().zip(t2).enumerate() {
        let nb = l1.len() as f64;
        let mut sums = [0.0f64; 3];
        for (&v1, &v2) in l1.iter().zip(&l2) {
            sums[0] += v1;
            sums[1] += v2;
            sums[2] += v1 + v2;
        }
        state.history.push(EpochRecord {
            epoch: e + 1,
            l_theta1: sums[0] / nb,
            l_theta2: sums[1] / nb,
            l_act: sums[2] / nb,
            gate_fire_cnn: 0.0,
            gate_fire_gcn: 0.0,
            lr_cnn: lr1,
            lr_gcn: lr2,
            val_acc_cnn: a1,
            val_acc_gcn: a2,
        });
    }
    state.epoch = cfg.epochs;
    Ok(TrainOutcome { cnn, gcn, state })
}

/// Class probabilities of both branches for a set of samples.
pub fn branch_probabilities(cnn: &CnnModel, gcn: &GcnModel, samples: &[PairedSample]) -> Result<(Tensor, Tensor)> {
    Ok((softmax_rows(&infer_all(cnn, samples)?.0)?, softmax_rows(&infer_all(gcn, samples)?.0)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnn::{BlockSpec, CnnConfig};
    use crate::gcn::{Backbone, GcnConfig};
    use crate::graph::{CellGraph, EdgeConfig, GraphMeta, SamplerConfig};
    use rand::Rng;

    fn toy(n: usize, seed: u64) -> Vec<PairedSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = i % 2;
                let level = if label == 0 { 0.25 } else { 0.75 };
                let img: Vec<f64> = (0..64).map(|_| level + rng.gen_range(-0.2..0.2)).collect();
                let nodes = 5;
                let features = (0..nodes)
                    .map(|_| {
                        let mut f = [0.0; 16];
                        for v in f.iter_mut() {
                            *v = rng.gen_range(-1.0..1.0);
                        }
                        f[0] += if label == 0 { -1.0 } else { 1.0 };
                        f
                    })
                    .collect();
                let g = CellGraph {
                    features,
                    coords: (0..nodes).map(|k| (k as f64, 0.0)).collect(),
                    edges: vec![(0, 1), (1, 0), (1, 2), (2, 1), (3, 4), (4, 3)],
                    label,
                    meta: GraphMeta {
                        source: format!("toy{i}"),
                        n_cells: nodes,
                        sampler: SamplerConfig::default(),
                        edge: EdgeConfig::default(),
                    },
                };
                PairedSample {
                    id: format!("toy{i}"),
                    image: Arc::new(Tensor::new(vec![1, 8, 8], img).unwrap()),
                    graph: PreparedGraph::new(&g).unwrap(),
                    label,
                }
            })
            .collect()
    }

    fn models() -> (CnnModel, GcnModel) {
        let cnn = CnnModel::new(
            CnnConfig {
                height: 8,
                width: 8,
                channels: 1,
                blocks: vec![BlockSpec {
                    out_channels: 4,
                    stride: 2,
                }],
                num_classes: 2,
                ..CnnConfig::default()
            },
            1,
        )
        .unwrap();
        let gcn = GcnModel::new(
            GcnConfig {
                depth: 3,
                hidden_dim: 8,
                backbone: Backbone::Res,
                num_classes: 2,
                topk_k: 3,
                ..GcnConfig::default()
            },
            2,
        )
        .unwrap();
        (cnn, gcn)
    }

    fn cfg(d_kl: f64) -> CoTrainConfig {
        CoTrainConfig {
            d_kl,
            lr: 1e-2,
            batch_size: 8,
            epochs: 6,
            ..CoTrainConfig::default()
        }
    }

    #[test]
    fn infinite_threshold_matches_independent_training() {
        let (train, val) = (toy(24, 3), toy(8, 4));
        let (cnn, gcn) = models();
        let a = co_train(cnn.clone(), gcn.clone(), &train, &val, &cfg(f64::INFINITY), 9).unwrap();
        let b = train_independent(cnn, gcn, &train, &val, &cfg(f64::INFINITY), 9).unwrap();
        assert_eq!(a.state, b.state);
        assert_eq!(a.cnn.store, b.cnn.store);
        assert_eq!(a.gcn.store, b.gcn.store);
    }

    #[test]
    fn toy_problem_is_learned_and_gates_fire() {
        let (train, val) = (toy(32, 5), toy(16, 6));
        let (cnn, gcn) = models();
        let out = co_train(cnn, gcn, &train, &val, &cfg(0.0), 1).unwrap();
        let first = out.state.history[0];
        let last = *out.state.history.last().unwrap();
        assert!(first.gate_fire_cnn == 1.0 && first.gate_fire_gcn == 1.0);
        assert!(last.l_theta2 < first.l_theta2);
        assert!(evaluate(&out.gcn, &val, 2).unwrap().accuracy >= 0.75);
        let csv = history_csv(&out.state.history);
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.starts_with(HISTORY_HEADER));
    }

    #[test]
    fn same_seed_same_run() {
        let (train, val) = (toy(16, 7), toy(4, 8));
        let (cnn, gcn) = models();
        let a = co_train(cnn.clone(), gcn.clone(), &train, &val, &cfg(0.05), 3).unwrap();
        let b = co_train(cnn, gcn, &train, &val, &cfg(0.05), 3).unwrap();
        assert_eq!(a.state, b.state);
    }

    #[test]
    fn rejects_empty_validation_and_bad_config() {
        let train = toy(4, 1);
        let (cnn, gcn) = models();
        assert!(matches!(
            co_train(cnn.clone(), gcn.clone(), &train, &[], &cfg(0.1), 0),
            Err(Error::EmptyDataset)
        ));
        let bad = CoTrainConfig {
            batch_size: 0,
            ..cfg(0.1)
        };
        assert!(co_train(cnn, gcn, &train, &train, &bad, 0).unwrap_err().is_validation());
    }

    #[test]
    fn threshold_serde_accepts_inf() {
        let c: CoTrainConfig = serde_json::from_str(r#"{"d_kl": "inf"}"#).unwrap();
        assert!(c.d_kl.is_infinite());
        let back = serde_json::to_string(&c).unwrap();
        assert!(back.contains(r#""d_kl":"inf""#));
        assert!(serde_json::from_str::<CoTrainConfig>(r#"{"d_kl": "big"}"#).is_err());
        assert!(serde_json::from_str::<CoTrainConfig>(r#"{"dkl": 1}"#).is_err());
    }
}
