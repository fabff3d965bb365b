use std::collections::VecDeque;

use crate::error::{Error, Result};

/// Instance label map: 0 is background, `1..=count` are instances.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledMask {
    width: usize,
    height: usize,
    labels: Vec<u32>,
    count: u32,
}

impl LabeledMask {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn count(&self) -> u32 {
        self.count
    }

    pub fn at(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.width + col]
    }
}

/// Label 4-connected components of a binary or labeled mask.
///
/// Two pixels belong to the same component when they are 4-adjacent and carry
/// the same non-zero value, so relabeling an already valid labeled mask is the
/// identity. Components are numbered `1..=K` in order of their first pixel in
/// raster scan.
pub fn label_components(width: usize, height: usize, mask: &[u32]) -> Result<LabeledMask> {
    if mask.len() != width * height {
        return Err(Error::shape(
            "label_components",
            format!("{width}x{height} mask needs {} values, got {}", width * height, mask.len()),
        ));
    }
    let mut labels = vec![0u32; mask.len()];
    let mut count = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if mask[start] == 0 || labels[start] != 0 {
            continue;
        }
        count += 1;
        let value = mask[start];
        labels[start] = count;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            let (r, c) = (p / width, p % width);
            let mut visit = |q: usize| {
                if mask[q] == value && labels[q] == 0 {
                    labels[q] = count;
                    queue.push_back(q);
                }
            };
            if r > 0 {
                visit(p - width);
            }
            if r + 1 < height {
                visit(p + width);
            }
            if c > 0 {
                visit(p - 1);
            }
            if c + 1 < width {
                visit(p + 1);
            }
        }
    }
    Ok(LabeledMask {
        width,
        height,
        labels,
        count,
    })
}

/// One segmented nucleus.
#[derive(Clone, Debug, PartialEq)]
pub struct CellInstance {
    pub label: u32,
    /// `(row, col)` in raster order.
    pub pixels: Vec<(usize, usize)>,
    /// `(min_row, min_col, max_row, max_col)`, inclusive.
    pub bbox: (usize, usize, usize, usize),
    /// `(row, col)` mean of the pixel coordinates.
    pub centroid: (f64, f64),
}

impl CellInstance {
    pub fn from_pixels(label: u32, pixels: Vec<(usize, usize)>) -> Result<Self> {
        if pixels.is_empty() {
            return Err(Error::invalid(format!("instance {label} has no pixels")));
        }
        let mut bbox = (usize::MAX, usize::MAX, 0, 0);
        let (mut sr, mut sc) = (0.0, 0.0);
        for &(r, c) in &pixels {
            bbox.0 = bbox.0.min(r);
            bbox.1 = bbox.1.min(c);
            bbox.2 = bbox.2.max(r);
            bbox.3 = bbox.3.max(c);
            sr += r as f64;
            sc += c as f64;
        }
        let n = pixels.len() as f64;
        Ok(CellInstance {
            label,
            pixels,
            bbox,
            centroid: (sr / n, sc / n),
        })
    }

    pub fn area(&self) -> usize {
        self.pixels.len()
    }
}

/// All instances of `mask`, ordered by label.
pub fn instances(mask: &LabeledMask) -> Vec<CellInstance> {
    let mut pixels: Vec<Vec<(usize, usize)>> = vec![Vec::new(); mask.count as usize];
    for (i, &l) in mask.labels.iter().enumerate() {
        if l > 0 {
            pixels[l as usize - 1].push((i / mask.width, i % mask.width));
        }
    }
    pixels
        .into_iter()
        .enumerate()
        .map(|(k, px)| CellInstance::from_pixels(k as u32 + 1, px).expect("labels are contiguous"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solid_blob_is_one_component() {
        let mut m = vec![0u32; 25];
        for r in 1..4 {
            for c in 1..4 {
                m[r * 5 + c] = 1;
            }
        }
        let l = label_components(5, 5, &m).unwrap();
        assert_eq!(l.count(), 1);
        let inst = instances(&l);
        assert_eq!(inst[0].area(), 9);
        assert_eq!(inst[0].centroid, (2.0, 2.0));
        assert_eq!(inst[0].bbox, (1, 1, 3, 3));
    }

    #[test]
    fn diagonal_pixels_are_separate() {
        let m = [1, 0, 0, 1];
        assert_eq!(label_components(2, 2, &m).unwrap().count(), 2);
    }

    #[test]
    fn empty_mask() {
        let l = label_components(3, 3, &[0; 9]).unwrap();
        assert_eq!(l.count(), 0);
        assert!(instances(&l).is_empty());
    }

    #[test]
    fn raster_order_and_idempotence() {
        // Component first seen later in raster order gets the larger label.
        let m = [0, 7, 7, 0, 0, 0, 3, 0, 0];
        let l = label_components(3, 3, &m).unwrap();
        assert_eq!(l.labels(), &[0, 1, 1, 0, 0, 0, 2, 0, 0]);
        let again = label_components(3, 3, l.labels()).unwrap();
        assert_eq!(again, l);
    }

    #[test]
    fn touching_instances_with_distinct_labels_stay_separate() {
        let m = [1, 2, 1, 2];
        let l = label_components(2, 2, &m).unwrap();
        assert_eq!(l.count(), 2);
    }

    #[test]
    fn size_mismatch_is_error() {
        assert!(label_components(3, 3, &[0; 8]).is_err());
    }
}
