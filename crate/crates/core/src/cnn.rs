//! Small pixel CNN and Grad-CAM heatmaps over its last convolution block.

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{dropout, Conv, Linear};
use crate::param::{Bound, ParamStore};
use crate::tensor::{bilinear_resize, Conv2dSpec, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub out_channels: usize,
    pub stride: usize,
}

/// Per-channel input standardization `(x - mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl InputNorm {
    /// Channel statistics over a set of `[C, H, W]` images. A channel without
    /// spread gets `std = 1`.
    pub fn fit<'a>(images: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for img in images {
            let (c, h, w) = img.dims3()?;
            if sum.is_empty() {
                sum = vec![0.0; c];
                sq = vec![0.0; c];
            } else if sum.len() != c {
                return Err(Error::shape("InputNorm::fit", format!("{} vs {c} channels", sum.len())));
            }
            for (ch, plane) in img.data().chunks(h * w).enumerate() {
                sum[ch] += plane.iter().sum::<f64>();
                sq[ch] += plane.iter().map(|v| v * v).sum::<f64>();
            }
            count += h * w;
        }
        if count == 0 {
            return Err(Error::EmptyDataset);
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let sd = (q / n - m * m).max(0.0).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(InputNorm { mean, std })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CnnConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// One 3x3 convolution + ReLU per block.
    pub blocks: Vec<BlockSpec>,
    /// Hidden units between pooling and the output layer; 0 means none.
    pub classifier_width: usize,
    pub num_classes: usize,
    pub dropout: f64,
    /// Applied before the first block. Training fits it on the training
    /// split when absent.
    pub input_norm: Option<InputNorm>,
}

impl Default for CnnConfig {
    fn default() -> Self {
        CnnConfig {
            height: 64,
            width: 64,
            channels: 3,
            blocks: vec![
                BlockSpec {
                    out_channels: 8,
                    stride: 2,
                },
                BlockSpec {
                    out_channels: 16,
                    stride: 2,
                },
                BlockSpec {
                    out_channels: 32,
                    stride: 2,
                },
            ],
            classifier_width: 0,
            num_classes: 3,
            dropout: 0.2,
            input_norm: None,
        }
    }
}

pub const KERNEL: usize = 3;

impl CnnConfig {
    /// Spatial size of the last block's activation.
    pub fn feature_map_size(&self) -> Result<(usize, usize)> {
        let (mut h, mut w) = (self.height, self.width);
        for b in &self.blocks {
            let spec = Conv2dSpec::new(b.stride, KERNEL / 2);
            h = spec.output_dim(h, KERNEL)?;
            w = spec.output_dim(w, KERNEL)?;
        }
        Ok((h, w))
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            bad.push("cnn input dimensions must be positive".to_string());
        }
        if self.blocks.is_empty() {
            bad.push("cnn.blocks must not be empty".to_string());
        }
        if self.blocks.iter().any(|b| b.out_channels == 0 || b.stride == 0) {
            bad.push("cnn block channels and strides must be positive".to_string());
        }
        if self.num_classes < 2 {
            bad.push("cnn.num_classes must be at least 2".to_string());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            bad.push("cnn.dropout must lie in [0, 1)".to_string());
        }
        if let Some(n) = &self.input_norm {
            if n.mean.len() != self.channels || n.std.len() != self.channels {
                bad.push(format!("cnn.input_norm needs {} means and stds", self.channels));
            }
            if n.mean.iter().chain(&n.std).any(|v| !v.is_finite()) || n.std.iter().any(|&s| s <= 0.0) {
                bad.push("cnn.input_norm values must be finite with positive std".to_string());
            }
        }
        if bad.is_empty() && self.feature_map_size().is_err() {
            bad.push("cnn blocks shrink the input below 1x1".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(bad.join("; ")))
        }
    }

    pub fn embedding_dim(&self) -> usize {
        if self.classifier_width > 0 {
            self.classifier_width
        } else {
            self.blocks.last().map_or(0, |b| b.out_channels)
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CnnOutput {
    /// `[1, M]`.
    pub logits: Var,
    /// Post-ReLU activation of the last block, `[C, h, w]`.
    pub last_activation: Var,
    /// Input to the output layer.
    pub embedding: Var,
}

#[derive(Clone, Debug)]
pub struct CnnModel {
    pub cfg: CnnConfig,
    pub store: ParamStore,
    convs: Vec<Conv>,
    hidden: Option<Linear>,
    head: Linear,
}

impl CnnModel {
    pub fn new(cfg: CnnConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut c_in = cfg.channels;
        let mut convs = Vec::with_capacity(cfg.blocks.len());
        for (i, b) in cfg.blocks.iter().enumerate() {
            convs.push(Conv::new(&mut store, &format!("cnn.block{i}"), c_in, b.out_channels, KERNEL, &mut rng)?);
            c_in = b.out_channels;
        }
        let hidden = if cfg.classifier_width > 0 {
            let l = Linear::new(&mut store, "cnn.hidden", c_in, cfg.classifier_width, &mut rng)?;
            c_in = cfg.classifier_width;
            Some(l)
        } else {
            None
        };
        let head = Linear::new(&mut store, "cnn.head", c_in, cfg.num_classes, &mut rng)?;
        Ok(CnnModel {
            cfg,
            store,
            convs,
            hidden,
            head,
        })
    }

    /// Forward pass of a `[C, H, W]` image already on the tape.
    pub fn forward<R: Rng>(&self, tape: &mut Tape, bound: &Bound, x: Var, mut rng: Option<&mut R>) -> Result<CnnOutput> {
        let want = [self.cfg.channels, self.cfg.height, self.cfg.width];
        if tape.value(x).shape() != want {
            return Err(Error::shape(
                "cnn_forward",
                format!("expected image {:?}, got {:?}", want, tape.value(x).shape()),
            ));
        }
        let mut a = x;
        if let Some(n) = &self.cfg.input_norm {
            let (c, h, w) = tape.value(x).dims3()?;
            let shift = tape.constant(Tensor::new(vec![c], n.mean.iter().map(|m| -m).collect())?);
            let inv: Vec<f64> = n.std.iter().flat_map(|s| std::iter::repeat(1.0 / s).take(h * w)).collect();
            let centered = tape.add_channel_bias(a, shift)?;
            a = tape.mul_const(centered, Arc::new(Tensor::new(vec![c, h, w], inv)?))?;
        }
        for (conv, b) in self.convs.iter().zip(&self.cfg.blocks) {
            let y = conv.forward(tape, bound, a, Conv2dSpec::new(b.stride, KERNEL / 2))?;
            a = tape.relu(y)?;
        }
        let last_activation = a;
        let mut h = tape.global_avg_pool(a)?;
        if let Some(hidden) = &self.hidden {
            let z = hidden.forward(tape, bound, h)?;
            h = tape.relu(z)?;
        }
        let embedding = h;
        let h = dropout(tape, h, self.cfg.dropout, rng.as_deref_mut())?;
        let logits = self.head.forward(tape, bound, h)?;
        Ok(CnnOutput {
            logits,
            last_activation,
            embedding,
        })
    }

    /// Evaluation-mode logits and embedding.
    pub fn infer(&self, image: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let bound = self.store.bind_frozen(&mut tape);
        let x = tape.constant(image.clone());
        let out = self.forward(&mut tape, &bound, x, None::<&mut ChaCha8Rng>)?;
        Ok((tape.value(out.logits).clone(), tape.value(out.embedding).clone()))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let cfg = serde_json::to_value(&self.cfg).expect("config serializes");
        Checkpoint::from_store("cnn", cfg, &self.store)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.header.kind != "cnn" {
            return Err(Error::Validation(format!("expected a cnn checkpoint, found {}", ck.header.kind)));
        }
        let cfg: CnnConfig = serde_json::from_value(ck.header.config.clone())
            .map_err(|e| Error::Validation(format!("cnn checkpoint config: {e}")))?;
        let mut model = CnnModel::new(cfg, 0)?;
        model.store.load_values(ck.values.clone())?;
        Ok(model)
    }
}

/// Class activation heatmap at input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct CamMap {
    pub height: usize,
    pub width: usize,
    /// Row-major values in `[0, 1]`.
    pub heatmap: Vec<f64>,
    pub class_id: usize,
    pub logits: Vec<f64>,
    /// Maximum of the upsampled map before normalization; 0 for an all-zero map.
    pub raw_max: f64,
}

/// Grad-CAM for `class_id`, or for the predicted class when `None`.
pub fn grad_cam(model: &CnnModel, image: &Tensor, class_id: Option<usize>) -> Result<CamMap> {
    let m = model.cfg.num_classes;
    if let Some(c) = class_id {
        if c >= m {
            return Err(Error::invalid(format!("class {c} out of range for {m} classes")));
        }
    }
    let mut tape = Tape::new();
    let bound = model.store.bind_frozen(&mut tape);
    let x = tape.var(image.clone());
    let out = model.forward(&mut tape, &bound, x, None::<&mut ChaCha8Rng>)?;
    let logits = tape.value(out.logits).data().to_vec();
    let class_id = match class_id {
        Some(c) => c,
        None => tape.value(out.logits).argmax_rows()?[0],
    };
    let target = tape.pick(out.logits, class_id)?;
    let grads = tape.backward(target)?;
    let a = tape.value(out.last_activation);
    let (c, h, w) = a.dims3()?;
    let da = grads.wrt(out.last_activation)?;
    let mut cam = vec![0.0; h * w];
    for k in 0..c {
        let plane = &da.data()[k * h * w..(k + 1) * h * w];
        let alpha = plane.iter().sum::<f64>() / (h * w) as f64;
        for (o, v) in cam.iter_mut().zip(&a.data()[k * h * w..(k + 1) * h * w]) {
            *o += alpha * v;
        }
    }
    for v in &mut cam {
        *v = v.max(0.0);
    }
    let (out_h, out_w) = (model.cfg.height, model.cfg.width);
    let mut heatmap = bilinear_resize(&cam, h, w, out_h, out_w);
    let raw_max = heatmap.iter().copied().fold(0.0, f64::max);
    if raw_max > 0.0 {
        for v in &mut heatmap {
            *v /= raw_max;
        }
    }
    Ok(CamMap {
        height: out_h,
        width: out_w,
        heatmap,
        class_id,
        logits,
        raw_max,
    })
}
