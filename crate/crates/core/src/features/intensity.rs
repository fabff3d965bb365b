use super::label::{CellInstance, LabeledMask};
use crate::image::GrayImage;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntensityStats {
    pub mean: f64,
    pub std: f64,
    pub skewness: f64,
    pub entropy: f64,
    pub fg_bg_diff: f64,
}

pub const HISTOGRAM_BINS: usize = 256;
pub const RING_WIDTH: usize = 2;

/// Relative threshold under which the spread is treated as zero.
const DEGENERATE_STD: f64 = 1e-12;

/// Histogram bin of an intensity in `[0, 1]`.
pub fn histogram_bin(v: f64) -> usize {
    ((v.clamp(0.0, 1.0) * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1)
}

/// Intensity moments, histogram entropy and fore/background contrast.
///
/// Intensities are expected in `[0, 1]`. The background ring is every pixel
/// within Chebyshev distance [`RING_WIDTH`] of the instance that belongs to
/// neither this nor any other instance; an empty ring yields a zero contrast.
pub fn intensity_features(inst: &CellInstance, image: &GrayImage, mask: &LabeledMask) -> IntensityStats {
    let vals: Vec<f64> = inst.pixels.iter().map(|&(r, c)| image.at(r, c)).collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let m2 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m3 = vals.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
    let std = m2.sqrt();
    let skewness = if std <= DEGENERATE_STD * mean.abs().max(1.0) {
        0.0
    } else {
        m3 / (std * std * std)
    };

    let mut hist = [0usize; HISTOGRAM_BINS];
    for &v in &vals {
        hist[histogram_bin(v)] += 1;
    }
    let entropy = -hist
        .iter()
        .filter(|&&h| h > 0)
        .map(|&h| {
            let p = h as f64 / n;
            p * p.ln()
        })
        .sum::<f64>();

    let (mut ring_sum, mut ring_n) = (0.0, 0usize);
    let (r0, c0, r1, c1) = inst.bbox;
    let rr0 = r0.saturating_sub(RING_WIDTH);
    let cc0 = c0.saturating_sub(RING_WIDTH);
    let rr1 = (r1 + RING_WIDTH).min(mask.height() - 1);
    let cc1 = (c1 + RING_WIDTH).min(mask.width() - 1);
    for r in rr0..=rr1 {
        for c in cc0..=cc1 {
            if mask.at(r, c) != 0 {
                continue;
            }
            let near = (r.saturating_sub(RING_WIDTH)..=(r + RING_WIDTH).min(mask.height() - 1)).any(|rr| {
                (c.saturating_sub(RING_WIDTH)..=(c + RING_WIDTH).min(mask.width() - 1))
                    .any(|cc| mask.at(rr, cc) == inst.label)
            });
            if near {
                ring_sum += image.at(r, c);
                ring_n += 1;
            }
        }
    }
    let fg_bg_diff = if ring_n == 0 { 0.0 } else { mean - ring_sum / ring_n as f64 };

    IntensityStats {
        mean,
        std,
        skewness,
        entropy,
        fg_bg_diff,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::label::{instances, label_components};

    fn setup(w: usize, h: usize, mask: &[u32], pix: Vec<f64>) -> (CellInstance, GrayImage, LabeledMask) {
        let m = label_components(w, h, mask).unwrap();
        let img = GrayImage::new(w, h, pix).unwrap();
        (instances(&m).remove(0), img, m)
    }

    #[test]
    fn constant_instance() {
        let (i, img, m) = setup(3, 1, &[1, 1, 1], vec![0.3; 3]);
        let s = intensity_features(&i, &img, &m);
        assert!(s.std < 1e-15);
        assert_eq!(s.skewness, 0.0);
        assert_eq!(s.entropy, 0.0);
    }

    #[test]
    fn two_point_distribution() {
        let (i, img, m) = setup(4, 1, &[1, 1, 1, 1], vec![0.0, 1.0, 0.0, 1.0]);
        let s = intensity_features(&i, &img, &m);
        assert_eq!(s.mean, 0.5);
        assert_eq!(s.std, 0.5);
        assert!((s.entropy - 2f64.ln()).abs() < 1e-15);
        assert!(s.skewness.abs() < 1e-15);
    }

    #[test]
    fn contrast_against_ring() {
        // 7x7 image, 3x3 instance in the centre at 0.8, everything else 0.5.
        let mut mask = vec![0u32; 49];
        let mut pix = vec![0.5; 49];
        for r in 2..5 {
            for c in 2..5 {
                mask[r * 7 + c] = 1;
                pix[r * 7 + c] = 0.8;
            }
        }
        let (i, img, m) = setup(7, 7, &mask, pix);
        let s = intensity_features(&i, &img, &m);
        assert!((s.fg_bg_diff - 0.3).abs() < 1e-12);
    }

    #[test]
    fn ring_excludes_other_instances() {
        // Neighbour instance at 0.0 right next to ours must not leak into the ring.
        let mask = [1, 0, 2, 2, 0, 0, 0, 0, 0, 0];
        let pix = vec![0.9, 0.4, 0.0, 0.0, 0.4, 0.4, 0.4, 0.4, 0.4, 0.4];
        let (i, img, m) = setup(5, 2, &mask, pix);
        let s = intensity_features(&i, &img, &m);
        assert!((s.fg_bg_diff - 0.5).abs() < 1e-12);
    }
}
