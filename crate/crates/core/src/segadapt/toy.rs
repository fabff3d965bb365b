use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{
    adversarial_on_tape, dice_loss, dice_on_tape, discriminator_on_tape, entropy_min_on_tape,
    reconstruction_on_tape, total_da_loss, DaComponents, DaLossWeights,
};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::image::{encode_gray8, write_file, GrayImage};
use crate::nn::Conv;
use crate::optim::{adamw_step, AdamWConfig};
use crate::param::{Bound, ParamStore};
use crate::tensor::{Conv2dSpec, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegAdaptConfig {
    pub weights: DaLossWeights,
    /// Apply the entropy term to target instead of source predictions.
    pub entropy_on_target: bool,
    /// Scale of the entropy term inside the optimised objective.
    pub lambda_em: f64,
    /// Side of the square toy images; a multiple of 4.
    pub image_size: usize,
    pub n_source: usize,
    pub n_target: usize,
    /// Held-out target images with masks, used only for evaluation.
    pub n_eval: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Channels of the first conv in each toy network.
    pub width: usize,
}

impl Default for SegAdaptConfig {
    fn default() -> Self {
        SegAdaptConfig {
            weights: DaLossWeights::default(),
            entropy_on_target: false,
            lambda_em: 0.1,
            image_size: 24,
            n_source: 24,
            n_target: 24,
            n_eval: 8,
            epochs: 12,
            batch_size: 4,
            lr: 5e-3,
            width: 8,
        }
    }
}

impl SegAdaptConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let mut bad = Vec::new();
        if self.image_size < 8 || self.image_size % 4 != 0 {
            bad.push("segadapt.image_size must be a multiple of 4 and at least 8");
        }
        if self.n_source == 0 || self.n_target == 0 || self.n_eval == 0 {
            bad.push("segadapt domains must be non-empty");
        }
        if self.batch_size == 0 || self.width == 0 {
            bad.push("segadapt.batch_size and segadapt.width must be positive");
        }
        if !(self.lambda_em >= 0.0 && self.lambda_em.is_finite()) {
            bad.push("segadapt.lambda_em must be finite and non-negative");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bad.push("segadapt.lr must be positive");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(bad.join("; ")))
        }
    }
}

/// Image statistics of one synthetic domain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DomainStyle {
    pub background: f64,
    pub foreground: f64,
    pub noise: f64,
    /// Amplitude of a diagonal sinusoidal texture.
    pub stripes: f64,
}

impl DomainStyle {
    pub const SOURCE: DomainStyle = DomainStyle {
        background: 0.15,
        foreground: 0.8,
        noise: 0.05,
        stripes: 0.0,
    };
    pub const TARGET: DomainStyle = DomainStyle {
        background: 0.45,
        foreground: 0.7,
        noise: 0.08,
        stripes: 0.12,
    };
}

/// One toy image `[1, H, W]` with its binary mask.
#[derive(Clone, Debug)]
pub struct SegSample {
    pub image: Tensor,
    pub mask: Tensor,
}

/// Labelled source, unlabelled target and held-out target sets for `cfg`.
pub fn toy_domains(cfg: &SegAdaptConfig, seed: u64) -> (Vec<SegSample>, Vec<SegSample>, Vec<SegSample>) {
    (
        toy_domain(cfg.n_source, cfg.image_size, DomainStyle::SOURCE, seed),
        toy_domain(cfg.n_target, cfg.image_size, DomainStyle::TARGET, seed + 1),
        toy_domain(cfg.n_eval, cfg.image_size, DomainStyle::TARGET, seed + 2),
    )
}

/// `n` images of random elliptical blobs rendered in `style`.
pub fn toy_domain(n: usize, size: usize, style: DomainStyle, seed: u64) -> Vec<SegSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut mask = vec![0.0; size * size];
            let blobs = rng.gen_range(2..=4);
            let r_max = (size as f64 / 5.0).max(2.5);
            for _ in 0..blobs {
                let cy = rng.gen_range(0.0..size as f64);
                let cx = rng.gen_range(0.0..size as f64);
                let ry = rng.gen_range(2.0..r_max);
                let rx = rng.gen_range(2.0..r_max);
                for r in 0..size {
                    for c in 0..size {
                        let dy = (r as f64 - cy) / ry;
                        let dx = (c as f64 - cx) / rx;
                        if dy * dy + dx * dx <= 1.0 {
                            mask[r * size + c] = 1.0;
                        }
                    }
                }
            }
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let image = mask
                .iter()
                .enumerate()
                .map(|(i, &m)| {
                    let (r, c) = ((i / size) as f64, (i % size) as f64);
                    let base = if m > 0.0 { style.foreground } else { style.background };
                    let tex = style.stripes * ((r + c) * 0.9 + phase).sin();
                    (base + tex + rng.gen_range(-style.noise..=style.noise)).clamp(0.0, 1.0)
                })
                .collect();
            SegSample {
                image: Tensor::new(vec![1, size, size], image).expect("square image"),
                mask: Tensor::new(vec![1, size, size], mask).expect("square mask"),
            }
        })
        .collect()
}

fn same(stride: usize) -> Conv2dSpec {
    Conv2dSpec::new(stride, 1)
}

/// Two-level encoder-decoder with an additive skip; sigmoid output.
#[derive(Clone, Debug)]
pub struct Segmenter {
    pub store: ParamStore,
    enc1: Conv,
    enc2: Conv,
    dec1: Conv,
    out: Conv,
}

impl Segmenter {
    pub fn new(width: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let enc1 = Conv::new(&mut store, "seg.enc1", 1, width, 3, rng)?;
        let enc2 = Conv::new(&mut store, "seg.enc2", width, 2 * width, 3, rng)?;
        let dec1 = Conv::new(&mut store, "seg.dec1", 2 * width, width, 3, rng)?;
        let out = Conv::new(&mut store, "seg.out", width, 1, 3, rng)?;
        Ok(Segmenter {
            store,
            enc1,
            enc2,
            dec1,
            out,
        })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let e1 = self.enc1.forward(tape, bound, x, same(1))?;
        let e1 = tape.relu(e1)?;
        let e2 = self.enc2.forward(tape, bound, e1, same(2))?;
        let e2 = tape.relu(e2)?;
        let up = tape.upsample2x(e2)?;
        let d1 = self.dec1.forward(tape, bound, up, same(1))?;
        let d1 = tape.relu(d1)?;
        let skip = tape.add(d1, e1)?;
        let o = self.out.forward(tape, bound, skip, same(1))?;
        tape.sigmoid(o)
    }

    pub fn predict(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.store.bind_frozen(&mut tape);
        let x = tape.constant(image.clone());
        let y = self.forward(&mut tape, &bound, x)?;
        Ok(tape.value(y).clone())
    }
}

/// Maps a target prediction back to its image.
#[derive(Clone, Debug)]
pub struct Reconstructor {
    pub store: ParamStore,
    c1: Conv,
    c2: Conv,
}

impl Reconstructor {
    pub fn new(width: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let c1 = Conv::new(&mut store, "rec.c1", 1, width, 3, rng)?;
        let c2 = Conv::new(&mut store, "rec.c2", width, 1, 3, rng)?;
        Ok(Reconstructor { store, c1, c2 })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, y: Var) -> Result<Var> {
        let h = self.c1.forward(tape, bound, y, same(1))?;
        let h = tape.relu(h)?;
        let o = self.c2.forward(tape, bound, h, same(1))?;
        tape.sigmoid(o)
    }
}

/// Five-conv patch discriminator over prediction maps; output is `[1, H/4, W/4]`.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub store: ParamStore,
    layers: Vec<(Conv, usize)>,
}

impl Discriminator {
    pub fn new(width: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let plan = [(1, width, 2), (width, 2 * width, 2), (2 * width, 2 * width, 1), (2 * width, 2 * width, 1), (2 * width, 1, 1)];
        let mut layers = Vec::new();
        for (i, (cin, cout, stride)) in plan.into_iter().enumerate() {
            layers.push((Conv::new(&mut store, &format!("dis.c{i}"), cin, cout, 3, rng)?, stride));
        }
        Ok(Discriminator { store, layers })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, y: Var) -> Result<Var> {
        let mut h = y;
        let last = self.layers.len() - 1;
        for (i, (conv, stride)) in self.layers.iter().enumerate() {
            h = conv.forward(tape, bound, h, same(*stride))?;
            if i < last {
                h = tape.leaky_relu(h, 0.2)?;
            }
        }
        tape.sigmoid(h)
    }
}

#[derive(Clone, Debug)]
pub struct SegModels {
    pub s: Segmenter,
    pub r: Reconstructor,
    pub d: Discriminator,
}

impl SegModels {
    pub fn new(width: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(SegModels {
            s: Segmenter::new(width, &mut rng)?,
            r: Reconstructor::new(width, &mut rng)?,
            d: Discriminator::new(width, &mut rng)?,
        })
    }
}

/// Flattens per-image maps `[1, h, w]` into one `[B, h*w]` matrix.
fn stack(tape: &mut Tape, maps: &[Var]) -> Result<Var> {
    let mut rows = Vec::with_capacity(maps.len());
    for &m in maps {
        let n = tape.value(m).len();
        rows.push(tape.reshape(m, vec![1, n])?);
    }
    tape.concat_rows(&rows)
}

/// Generator-side objective on one batch with its term values.
pub struct GeneratorPass {
    pub tape: Tape,
    pub seg: Bound,
    pub rec: Bound,
    /// D's parameters, recorded as constants.
    pub dis: Bound,
    pub loss: Var,
    pub terms: DaComponents,
}

/// Builds the S/R objective. D is bound frozen; target terms whose weight
/// is zero are left off the tape.
pub fn generator_pass(
    models: &SegModels,
    source: &[&SegSample],
    target: &[&SegSample],
    cfg: &SegAdaptConfig,
) -> Result<GeneratorPass> {
    let mut tape = Tape::new();
    let seg = models.s.store.bind(&mut tape);
    let rec = models.r.store.bind(&mut tape);
    let dis = models.d.store.bind_frozen(&mut tape);
    let w = cfg.weights;
    let mut ps = Vec::new();
    let mut ys = Vec::new();
    for s in source {
        let x = tape.constant(s.image.clone());
        ps.push(models.s.forward(&mut tape, &seg, x)?);
        ys.push(tape.constant(s.mask.clone()));
    }
    let pred_s = stack(&mut tape, &ps)?;
    let y_s = stack(&mut tape, &ys)?;
    let dice = dice_on_tape(&mut tape, y_s, pred_s)?;
    let mut terms = DaComponents {
        dice: tape.value(dice).data()[0],
        ..DaComponents::default()
    };
    let mut loss = dice;

    let need_target = w.lambda_adv > 0.0 || w.lambda_recons > 0.0 || cfg.entropy_on_target;
    let mut pt = Vec::new();
    if need_target {
        for t in target {
            let x = tape.constant(t.image.clone());
            pt.push(models.s.forward(&mut tape, &seg, x)?);
        }
    }
    let em_in = if cfg.entropy_on_target { stack(&mut tape, &pt)? } else { pred_s };
    let em = entropy_min_on_tape(&mut tape, em_in)?;
    terms.entropy = tape.value(em).data()[0];
    let em = tape.scale(em, cfg.lambda_em)?;
    loss = tape.add(loss, em)?;

    if w.lambda_adv > 0.0 {
        let mut ds = Vec::new();
        for &p in &pt {
            ds.push(models.d.forward(&mut tape, &dis, p)?);
        }
        let d_t = stack(&mut tape, &ds)?;
        let adv = adversarial_on_tape(&mut tape, d_t)?;
        terms.adv = tape.value(adv).data()[0];
        let adv = tape.scale(adv, w.lambda_adv)?;
        loss = tape.add(loss, adv)?;
    }
    if w.lambda_recons > 0.0 {
        let mut rs = Vec::new();
        let mut xs = Vec::new();
        for (&p, t) in pt.iter().zip(target) {
            rs.push(models.r.forward(&mut tape, &rec, p)?);
            xs.push(tape.constant(t.image.clone()));
        }
        let r = stack(&mut tape, &rs)?;
        let x = stack(&mut tape, &xs)?;
        let re = reconstruction_on_tape(&mut tape, x, r)?;
        terms.recons = tape.value(re).data()[0];
        let re = tape.scale(re, w.lambda_recons)?;
        loss = tape.add(loss, re)?;
    }
    Ok(GeneratorPass {
        tape,
        seg,
        rec,
        dis,
        loss,
        terms,
    })
}

/// Discriminator objective: mean of the source (`z = 1`) and target (`z = 0`)
/// terms, with S frozen.
pub fn discriminator_pass(
    models: &SegModels,
    source: &[&SegSample],
    target: &[&SegSample],
) -> Result<(Tape, Bound, Var)> {
    let mut tape = Tape::new();
    let seg = models.s.store.bind_frozen(&mut tape);
    let dis = models.d.store.bind(&mut tape);
    let side = |tape: &mut Tape, samples: &[&SegSample], z: u8| -> Result<Var> {
        let mut ds = Vec::new();
        for s in samples {
            let x = tape.constant(s.image.clone());
            let p = models.s.forward(tape, &seg, x)?;
            ds.push(models.d.forward(tape, &dis, p)?);
        }
        let d = stack(tape, &ds)?;
        discriminator_on_tape(tape, d, z)
    };
    let ls = side(&mut tape, source, 1)?;
    let lt = side(&mut tape, target, 0)?;
    let sum = tape.add(ls, lt)?;
    let loss = tape.scale(sum, 0.5)?;
    Ok((tape, dis, loss))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptEpoch {
    pub epoch: usize,
    pub dice: f64,
    pub entropy: f64,
    pub adv: f64,
    pub recons: f64,
    pub dis: f64,
    /// `total_da_loss` of the epoch means.
    pub total: f64,
    /// Soft dice loss of S on the source training images.
    pub eval_source_dice: f64,
    /// Soft dice loss of S on held-out target images.
    pub eval_target_dice: f64,
}

#[derive(Clone, Debug)]
pub struct AdaptOutcome {
    pub models: SegModels,
    /// Row 0 is the untrained state.
    pub trace: Vec<AdaptEpoch>,
    pub eval_target: Vec<SegSample>,
}

fn mean_dice(s: &Segmenter, samples: &[SegSample]) -> Result<f64> {
    let mut total = 0.0;
    for x in samples {
        total += dice_loss(&x.mask, &s.predict(&x.image)?)?;
    }
    Ok(total / samples.len() as f64)
}

struct Stepper {
    steps: u64,
    adamw: AdamWConfig,
    lr: f64,
}

impl Stepper {
    fn apply(&mut self, store: &mut ParamStore, bound: &Bound, tape: &Tape, loss: Var) -> Result<()> {
        let grads = tape.backward(loss)?;
        let g = store.gradients(bound, &grads)?;
        self.steps += 1;
        adamw_step(store, &g, self.steps, self.lr, &self.adamw)
    }
}

/// Alternating adversarial adaptation from `source` to `target`.
/// `eval_target` carries masks that training never sees.
pub fn adapt_toy(
    source: &[SegSample],
    target: &[SegSample],
    eval_target: &[SegSample],
    cfg: &SegAdaptConfig,
    seed: u64,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    if source.is_empty() || target.is_empty() || eval_target.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut models = SegModels::new(cfg.width, seed)?;
    let mut shuffle = ChaCha8Rng::seed_from_u64(seed);
    shuffle.set_stream(1);
    let adamw = AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let stepper = || Stepper {
        steps: 0,
        adamw,
        lr: cfg.lr,
    };
    let (mut st_s, mut st_r, mut st_d) = (stepper(), stepper(), stepper());
    let eval = |m: &SegModels| -> Result<(f64, f64)> { Ok((mean_dice(&m.s, source)?, mean_dice(&m.s, eval_target)?)) };
    let (s0, t0) = eval(&models)?;
    let mut trace = vec![AdaptEpoch {
        epoch: 0,
        dice: f64::NAN,
        entropy: f64::NAN,
        adv: f64::NAN,
        recons: f64::NAN,
        dis: f64::NAN,
        total: f64::NAN,
        eval_source_dice: s0,
        eval_target_dice: t0,
    }];
    let mut src_order: Vec<usize> = (0..source.len()).collect();
    let mut tgt_order: Vec<usize> = (0..target.len()).collect();
    for epoch in 1..=cfg.epochs {
        src_order.shuffle(&mut shuffle);
        tgt_order.shuffle(&mut shuffle);
        let mut sums = DaComponents::default();
        let batches = src_order.len().div_ceil(cfg.batch_size);
        for b in 0..batches {
            let si = &src_order[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(src_order.len())];
            let src: Vec<&SegSample> = si.iter().map(|&i| &source[i]).collect();
            let tgt: Vec<&SegSample> = (0..si.len())
                .map(|k| &target[tgt_order[(b * cfg.batch_size + k) % tgt_order.len()]])
                .collect();

            let g = generator_pass(&models, &src, &tgt, cfg)?;
            st_s.apply(&mut models.s.store, &g.seg, &g.tape, g.loss)?;
            if cfg.weights.lambda_recons > 0.0 {
                st_r.apply(&mut models.r.store, &g.rec, &g.tape, g.loss)?;
            }

            let (tape, dis, loss) = discriminator_pass(&models, &src, &tgt)?;
            let l_dis = tape.value(loss).data()[0];
            st_d.apply(&mut models.d.store, &dis, &tape, loss)?;

            sums.dice += g.terms.dice;
            sums.entropy += g.terms.entropy;
            sums.adv += g.terms.adv;
            sums.recons += g.terms.recons;
            sums.dis += l_dis;
        }
        let nb = batches as f64;
        let c = DaComponents {
            dice: sums.dice / nb,
            entropy: sums.entropy / nb,
            adv: sums.adv / nb,
            recons: sums.recons / nb,
            dis: sums.dis / nb,
        };
        let (es, et) = eval(&models)?;
        trace.push(AdaptEpoch {
            epoch,
            dice: c.dice,
            entropy: c.entropy,
            adv: c.adv,
            recons: c.recons,
            dis: c.dis,
            total: total_da_loss(&c, &cfg.weights),
            eval_source_dice: es,
            eval_target_dice: et,
        });
    }
    Ok(AdaptOutcome {
        models,
        trace,
        eval_target: eval_target.to_vec(),
    })
}

pub const ADAPT_TRACE_HEADER: &str = "epoch,dice,entropy,adv,recons,dis,total,eval_source_dice,eval_target_dice";

pub fn adapt_trace_csv(trace: &[AdaptEpoch]) -> String {
    let mut out = String::from(ADAPT_TRACE_HEADER);
    out.push('\n');
    for e in trace {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            e.epoch, e.dice, e.entropy, e.adv, e.recons, e.dis, e.total, e.eval_source_dice, e.eval_target_dice
        );
    }
    out
}

/// Writes `trace.csv` and, per held-out target image, the input, the
/// predicted mask and the true mask as 8-bit PGM.
pub fn write_adapt_outputs(dir: &Path, outcome: &AdaptOutcome) -> Result<()> {
    write_file(&dir.join("trace.csv"), adapt_trace_csv(&outcome.trace).as_bytes())?;
    let to_gray = |t: &Tensor| -> Result<GrayImage> {
        let (_, h, w) = t.dims3()?;
        GrayImage::new(w, h, t.data().to_vec())
    };
    for (i, s) in outcome.eval_target.iter().enumerate() {
        let pred = outcome.models.s.predict(&s.image)?;
        write_file(&dir.join(format!("target_{i:03}_image.pgm")), &encode_gray8(&to_gray(&s.image)?))?;
        write_file(&dir.join(format!("target_{i:03}_pred.pgm")), &encode_gray8(&to_gray(&pred)?))?;
        write_file(&dir.join(format!("target_{i:03}_truth.pgm")), &encode_gray8(&to_gray(&s.mask)?))?;
    }
    Ok(())
}
