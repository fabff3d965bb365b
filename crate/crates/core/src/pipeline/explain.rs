use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::cnn::{grad_cam, CamMap, CnnModel};
use crate::error::{Error, Result};
use crate::image::{encode_gray8, encode_rgb8, read_image, write_file, GrayImage, Image, RgbImage};
use crate::tensor::{softmax_rows, Tensor};

pub const EXPLAIN_FILE: &str = "cam.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CamRecord {
    pub checkpoint: String,
    pub heatmap: String,
    pub class_id: usize,
    pub predicted: usize,
    pub probabilities: Vec<f64>,
    pub raw_max: f64,
    /// Value the stored map was divided by.
    pub scale: f64,
}

/// Contents of the JSON sidecar written next to the heatmaps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplainReport {
    pub image: String,
    pub height: usize,
    pub width: usize,
    /// True when every map is divided by the largest `raw_max`, so intensities
    /// are comparable across checkpoints.
    pub shared_normalization: bool,
    pub maps: Vec<CamRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub side_by_side: Option<String>,
}

/// Loads a CNN checkpoint and checks that `image` fits its input layer.
fn load_pair(checkpoint: &Path, image: &Image) -> Result<CnnModel> {
    let model = CnnModel::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let c = &model.cfg;
    if (image.channels(), image.height(), image.width()) != (c.channels, c.height, c.width) {
        return Err(Error::Validation(format!(
            "{}: the model expects {}x{}x{} (CxHxW) images, got {}x{}x{}",
            checkpoint.display(),
            c.channels,
            c.height,
            c.width,
            image.channels(),
            image.height(),
            image.width()
        )));
    }
    Ok(model)
}

fn heat_color(v: f64) -> [f64; 3] {
    [v.clamp(0.0, 1.0), (1.0 - (2.0 * v - 1.0).abs()).clamp(0.0, 1.0), (1.0 - v).clamp(0.0, 1.0)]
}

/// Input image followed by each heatmap blended over it, left to right.
fn side_by_side(image: &Image, maps: &[Vec<f64>]) -> Result<RgbImage> {
    let (h, w) = (image.height(), image.width());
    let gray = image.to_gray();
    let rgb: Vec<[f64; 3]> = match image {
        Image::Rgb(c) => c.data().chunks(3).map(|p| [p[0], p[1], p[2]]).collect(),
        Image::Gray(g) => g.data().iter().map(|&v| [v, v, v]).collect(),
    };
    let panels = maps.len() + 1;
    let mut out = vec![0.0; 3 * h * w * panels];
    for r in 0..h {
        for p in 0..panels {
            for c in 0..w {
                let i = r * w + c;
                let px = if p == 0 {
                    rgb[i]
                } else {
                    let hc = heat_color(maps[p - 1][i]);
                    let g = gray.data()[i];
                    [0.4 * g + 0.6 * hc[0], 0.4 * g + 0.6 * hc[1], 0.4 * g + 0.6 * hc[2]]
                };
                let o = 3 * (r * w * panels + p * w + c);
                out[o..o + 3].copy_from_slice(&px);
            }
        }
    }
    RgbImage::new(w * panels, h, out)
}

/// Grad-CAM of one or two CNN checkpoints on one image.
///
/// Without `class_id` the class predicted by the first checkpoint is
/// explained for every checkpoint. With two checkpoints, `shared_norm`
/// divides both maps by the larger raw maximum instead of each by its own,
/// and a side-by-side overlay is written as well.
pub fn run_explain(
    checkpoints: &[&Path],
    image_path: &Path,
    class_id: Option<usize>,
    shared_norm: bool,
    out: &Path,
) -> Result<ExplainReport> {
    if checkpoints.is_empty() || checkpoints.len() > 2 {
        return Err(Error::Validation(format!("explain takes one or two checkpoints, got {}", checkpoints.len())));
    }
    let image = read_image(image_path)?;
    let tensor: Tensor = image.to_tensor();
    let models = checkpoints.iter().map(|c| load_pair(c, &image)).collect::<Result<Vec<_>>>()?;
    let m = models[0].cfg.num_classes;
    if models.iter().any(|x| x.cfg.num_classes != m) {
        return Err(Error::Validation("checkpoints disagree on the number of classes".into()));
    }
    let first = grad_cam(&models[0], &tensor, class_id)?;
    let class = first.class_id;
    let mut cams: Vec<CamMap> = vec![first];
    for model in &models[1..] {
        cams.push(grad_cam(model, &tensor, Some(class))?);
    }
    let shared = shared_norm && cams.len() > 1;
    let common = cams.iter().map(|c| c.raw_max).fold(0.0, f64::max);
    let mut report = ExplainReport {
        image: image_path.display().to_string(),
        height: image.height(),
        width: image.width(),
        shared_normalization: shared,
        maps: Vec::new(),
        side_by_side: None,
    };
    let mut stored = Vec::new();
    for (i, (cam, ck)) in cams.iter().zip(checkpoints).enumerate() {
        let scale = if shared { common } else { cam.raw_max };
        // grad_cam already divided by raw_max; rescale onto the chosen divisor.
        let map: Vec<f64> = if scale > 0.0 {
            cam.heatmap.iter().map(|v| v * cam.raw_max / scale).collect()
        } else {
            cam.heatmap.clone()
        };
        let name = if cams.len() == 1 {
            "cam.pgm".to_string()
        } else {
            format!("cam_{i}.pgm")
        };
        write_file(&out.join(&name), &encode_gray8(&GrayImage::new(cam.width, cam.height, map.clone())?))?;
        let probs = softmax_rows(&Tensor::new(vec![1, m], cam.logits.clone())?)?;
        report.maps.push(CamRecord {
            checkpoint: ck.display().to_string(),
            heatmap: name,
            class_id: class,
            predicted: probs.argmax_rows()?[0],
            probabilities: probs.data().to_vec(),
            raw_max: cam.raw_max,
            scale,
        });
        stored.push(map);
    }
    if stored.len() > 1 {
        let name = "side_by_side.ppm".to_string();
        write_file(&out.join(&name), &encode_rgb8(&side_by_side(&image, &stored)?))?;
        report.side_by_side = Some(name);
    }
    let mut json = serde_json::to_vec_pretty(&report).expect("report serializes");
    json.push(b'\n');
    write_file(&out.join(EXPLAIN_FILE), &json)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnn::{BlockSpec, CnnConfig};
    use crate::image::{decode_image, encode_rgb8};

    fn setup(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf, std::path::PathBuf) {
        let cfg = CnnConfig {
            height: 12,
            width: 10,
            blocks: vec![BlockSpec {
                out_channels: 4,
                stride: 2,
            }],
            ..CnnConfig::default()
        };
        let a = dir.join("a.ckpt");
        let b = dir.join("b.ckpt");
        CnnModel::new(cfg.clone(), 1).unwrap().checkpoint().save(&a).unwrap();
        CnnModel::new(cfg, 2).unwrap().checkpoint().save(&b).unwrap();
        let px: Vec<f64> = (0..3 * 120).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
        let img = dir.join("x.ppm");
        std::fs::write(&img, encode_rgb8(&RgbImage::new(10, 12, px).unwrap())).unwrap();
        (a, b, img)
    }

    #[test]
    fn default_class_is_prediction_and_dims_match() {
        let dir = tempfile::tempdir().unwrap();
        let (a, _, img) = setup(dir.path());
        let out = dir.path().join("out");
        let r = run_explain(&[&a], &img, None, false, &out).unwrap();
        assert_eq!(r.maps.len(), 1);
        assert_eq!(r.maps[0].class_id, r.maps[0].predicted);
        let heat = decode_image(&std::fs::read(out.join("cam.pgm")).unwrap(), "cam").unwrap();
        assert_eq!((heat.height(), heat.width()), (12, 10));
        assert!(!r.shared_normalization);
        let back: ExplainReport = serde_json::from_slice(&std::fs::read(out.join(EXPLAIN_FILE)).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn two_checkpoints_share_normalization() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b, img) = setup(dir.path());
        let out = dir.path().join("out");
        let r = run_explain(&[&a, &b], &img, Some(1), true, &out).unwrap();
        assert!(r.shared_normalization);
        assert_eq!(r.maps.len(), 2);
        let common = r.maps[0].raw_max.max(r.maps[1].raw_max);
        assert!(r.maps.iter().all(|m| m.scale == common && m.class_id == 1));
        for f in ["cam_0.pgm", "cam_1.pgm", "side_by_side.ppm", EXPLAIN_FILE] {
            assert!(out.join(f).is_file(), "{f}");
        }
        let sbs = decode_image(&std::fs::read(out.join("side_by_side.ppm")).unwrap(), "s").unwrap();
        assert_eq!((sbs.height(), sbs.width()), (12, 30));
    }

    #[test]
    fn class_out_of_range_and_wrong_size() {
        let dir = tempfile::tempdir().unwrap();
        let (a, _, _) = setup(dir.path());
        let img = dir.path().join("y.ppm");
        std::fs::write(&img, encode_rgb8(&RgbImage::new(12, 12, vec![0.5; 3 * 144]).unwrap())).unwrap();
        assert!(run_explain(&[&a], &img, None, false, dir.path()).unwrap_err().is_validation());
        let (_, _, good) = setup(dir.path());
        assert!(run_explain(&[&a], &good, Some(3), false, dir.path()).is_err());
    }
}
