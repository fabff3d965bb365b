use super::label::CellInstance;
use crate::image::GrayImage;

pub const GLCM_LEVELS: usize = 8;

/// Pixel offsets `(drow, dcol)` for 0°, 90°, 45° and 135° at distance 1.
pub const GLCM_OFFSETS: [(isize, isize); 4] = [(0, 1), (1, 0), (-1, 1), (1, 1)];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlcmFeatures {
    pub dissimilarity: f64,
    pub homogeneity: f64,
    pub asm: f64,
    pub energy: f64,
}

impl GlcmFeatures {
    pub const ZERO: GlcmFeatures = GlcmFeatures {
        dissimilarity: 0.0,
        homogeneity: 0.0,
        asm: 0.0,
        energy: 0.0,
    };
}

/// Quantise `v` from `[lo, hi]` into `levels` bins; a flat range maps to level 0.
pub fn quantize(v: f64, lo: f64, hi: f64, levels: usize) -> usize {
    if hi <= lo {
        return 0;
    }
    // The small nudge keeps values that sit exactly on a bin edge stable under
    // affine rescaling of the instance.
    let x = (v - lo) / (hi - lo) * levels as f64 + 1e-9;
    (x.floor().max(0.0) as usize).min(levels - 1)
}

/// Symmetric, normalised co-occurrence matrix of a level grid.
///
/// `grid` is row-major `h x w`; `None` marks pixels outside the region. Pairs
/// are counted only when both ends are inside. Returns `None` if no pair exists.
pub fn cooccurrence(
    grid: &[Option<usize>],
    h: usize,
    w: usize,
    levels: usize,
    offsets: &[(isize, isize)],
) -> Option<Vec<f64>> {
    let mut counts = vec![0u64; levels * levels];
    let mut total = 0u64;
    for r in 0..h {
        for c in 0..w {
            let Some(a) = grid[r * w + c] else { continue };
            for &(dr, dc) in offsets {
                let rr = r as isize + dr;
                let cc = c as isize + dc;
                if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                    continue;
                }
                let Some(b) = grid[rr as usize * w + cc as usize] else { continue };
                counts[a * levels + b] += 1;
                counts[b * levels + a] += 1;
                total += 2;
            }
        }
    }
    (total > 0).then(|| counts.iter().map(|&k| k as f64 / total as f64).collect())
}

/// Texture statistics of a normalised `levels x levels` matrix.
pub fn texture_stats(p: &[f64], levels: usize) -> GlcmFeatures {
    let (mut dis, mut hom, mut asm) = (0.0, 0.0, 0.0);
    for i in 0..levels {
        for j in 0..levels {
            let v = p[i * levels + j];
            let d = i.abs_diff(j) as f64;
            dis += v * d;
            hom += v / (1.0 + d);
            asm += v * v;
        }
    }
    GlcmFeatures {
        dissimilarity: dis,
        homogeneity: hom,
        asm,
        energy: asm.sqrt(),
    }
}

/// Instance-level GLCM texture: 8 levels over the instance's own intensity
/// range, distance 1, four orientations pooled and symmetrised.
pub fn glcm_features(inst: &CellInstance, image: &GrayImage) -> GlcmFeatures {
    if inst.area() < 2 {
        return GlcmFeatures::ZERO;
    }
    let (lo, hi) = inst
        .pixels
        .iter()
        .map(|&(r, c)| image.at(r, c))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (r0, c0, r1, c1) = inst.bbox;
    let (h, w) = (r1 - r0 + 1, c1 - c0 + 1);
    let mut grid = vec![None; h * w];
    for &(r, c) in &inst.pixels {
        grid[(r - r0) * w + (c - c0)] = Some(quantize(image.at(r, c), lo, hi, GLCM_LEVELS));
    }
    match cooccurrence(&grid, h, w, GLCM_LEVELS, &GLCM_OFFSETS) {
        Some(p) => texture_stats(&p, GLCM_LEVELS),
        None => GlcmFeatures::ZERO,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::label::{instances, label_components};

    #[test]
    fn constant_instance_texture() {
        let m = label_components(3, 3, &[1; 9]).unwrap();
        let img = GrayImage::new(3, 3, vec![0.4; 9]).unwrap();
        let f = glcm_features(&instances(&m)[0], &img);
        assert_eq!(f.dissimilarity, 0.0);
        assert_eq!(f.homogeneity, 1.0);
        assert_eq!(f.asm, 1.0);
        assert_eq!(f.energy, 1.0);
    }

    #[test]
    fn checkerboard_two_adjacent_levels() {
        let grid = [Some(0), Some(1), Some(1), Some(0)];
        let p = cooccurrence(&grid, 2, 2, 2, &[(0, 1), (1, 0)]).unwrap();
        let f = texture_stats(&p, 2);
        assert!((f.dissimilarity - 1.0).abs() < 1e-15);
        assert!((f.homogeneity - 0.5).abs() < 1e-15);
        assert!((f.asm - 0.5).abs() < 1e-15);
        assert!((f.energy - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn single_pixel_is_zero() {
        let m = label_components(2, 1, &[1, 0]).unwrap();
        let img = GrayImage::new(2, 1, vec![0.2, 0.9]).unwrap();
        assert_eq!(glcm_features(&instances(&m)[0], &img), GlcmFeatures::ZERO);
    }

    #[test]
    fn quantize_edges() {
        assert_eq!(quantize(0.0, 0.0, 1.0, 8), 0);
        assert_eq!(quantize(1.0, 0.0, 1.0, 8), 7);
        assert_eq!(quantize(0.5, 0.0, 1.0, 8), 4);
        assert_eq!(quantize(0.3, 0.3, 0.3, 8), 0);
    }
}
