//! Per-nucleus instances and their sixteen hand-crafted descriptors.
//!
//! The descriptor order is fixed by [`FEATURE_NAMES`]; graph files and the GCN
//! input layer depend on it.

mod glcm;
mod intensity;
mod label;
mod morphology;

pub use glcm::{
    cooccurrence, glcm_features, quantize, texture_stats, GlcmFeatures, GLCM_LEVELS, GLCM_OFFSETS,
};
pub use intensity::{histogram_bin, intensity_features, IntensityStats, HISTOGRAM_BINS, RING_WIDTH};
pub use label::{instances, label_components, CellInstance, LabeledMask};
pub use morphology::{
    boundary_pixels, convex_hull, convex_hull_pixel_area, morphology_features, Morphology,
};

use crate::error::{Error, Result};
use crate::image::GrayImage;

pub const NUM_FEATURES: usize = 16;

pub const FEATURE_NAMES: [&str; NUM_FEATURES] = [
    "mean_intensity",
    "orientation",
    "solidity",
    "perimeter",
    "min_axis",
    "max_axis",
    "area",
    "eccentricity",
    "fg_bg_diff",
    "intensity_std",
    "intensity_skewness",
    "intensity_entropy",
    "glcm_dissimilarity",
    "glcm_homogeneity",
    "glcm_asm",
    "glcm_energy",
];

/// Descriptor `g` plus centroid `c` of one nucleus.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureVector {
    pub g: [f64; NUM_FEATURES],
    /// `(row, col)` in pixels.
    pub c: (f64, f64),
}

pub fn cell_features(inst: &CellInstance, image: &GrayImage, mask: &LabeledMask) -> FeatureVector {
    let m = morphology_features(inst);
    let s = intensity_features(inst, image, mask);
    let t = glcm_features(inst, image);
    FeatureVector {
        g: [
            s.mean,
            m.orientation,
            m.solidity,
            m.perimeter,
            m.min_axis,
            m.max_axis,
            m.area,
            m.eccentricity,
            s.fg_bg_diff,
            s.std,
            s.skewness,
            s.entropy,
            t.dissimilarity,
            t.homogeneity,
            t.asm,
            t.energy,
        ],
        c: m.centroid,
    }
}

/// One [`FeatureVector`] per instance of `mask`, in label order.
pub fn extract_node_features(image: &GrayImage, mask: &LabeledMask) -> Result<Vec<FeatureVector>> {
    if image.width() != mask.width() || image.height() != mask.height() {
        return Err(Error::shape(
            "extract_node_features",
            format!(
                "image {}x{} vs mask {}x{}",
                image.width(),
                image.height(),
                mask.width(),
                mask.height()
            ),
        ));
    }
    Ok(instances(mask).iter().map(|i| cell_features(i, image, mask)).collect())
}
