use std::collections::HashSet;

use super::label::CellInstance;

/// Shape descriptors of one instance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Morphology {
    pub area: f64,
    pub perimeter: f64,
    pub centroid: (f64, f64),
    /// Angle of the major axis against the column axis, in `(-π/2, π/2]`.
    pub orientation: f64,
    pub eccentricity: f64,
    pub solidity: f64,
    pub min_axis: f64,
    pub max_axis: f64,
}

/// Variance of a unit-square pixel about its own centre.
const PIXEL_VARIANCE: f64 = 1.0 / 12.0;

pub fn morphology_features(inst: &CellInstance) -> Morphology {
    let n = inst.area() as f64;
    let (cr, cc) = inst.centroid;
    let (mut srr, mut scc, mut src) = (0.0, 0.0, 0.0);
    for &(r, c) in &inst.pixels {
        let dr = r as f64 - cr;
        let dc = c as f64 - cc;
        srr += dr * dr;
        scc += dc * dc;
        src += dr * dc;
    }
    // Second moments of the region taken as a union of unit squares.
    let mu_rr = srr / n + PIXEL_VARIANCE;
    let mu_cc = scc / n + PIXEL_VARIANCE;
    let mu_rc = src / n;

    let half_trace = 0.5 * (mu_rr + mu_cc);
    let disc = (0.25 * (mu_rr - mu_cc).powi(2) + mu_rc * mu_rc).sqrt();
    let l1 = half_trace + disc;
    let l2 = (half_trace - disc).max(0.0);
    let eccentricity = if disc == 0.0 { 0.0 } else { (1.0 - l2 / l1).sqrt() };
    let orientation = 0.5 * (2.0 * mu_rc).atan2(mu_cc - mu_rr);

    Morphology {
        area: n,
        perimeter: boundary_pixels(inst) as f64,
        centroid: inst.centroid,
        orientation,
        eccentricity,
        solidity: n / convex_hull_pixel_area(&inst.pixels) as f64,
        min_axis: 4.0 * l2.sqrt(),
        max_axis: 4.0 * l1.sqrt(),
    }
}

/// Instance pixels with at least one 4-neighbour outside the instance.
pub fn boundary_pixels(inst: &CellInstance) -> usize {
    let set: HashSet<(usize, usize)> = inst.pixels.iter().copied().collect();
    let inside = |r: Option<usize>, c: Option<usize>| match (r, c) {
        (Some(r), Some(c)) => set.contains(&(r, c)),
        _ => false,
    };
    inst.pixels
        .iter()
        .filter(|&&(r, c)| {
            !(inside(r.checked_sub(1), Some(c))
                && inside(Some(r + 1), Some(c))
                && inside(Some(r), c.checked_sub(1))
                && inside(Some(r), Some(c + 1)))
        })
        .count()
}

fn cross(o: (i64, i64), a: (i64, i64), b: (i64, i64)) -> i64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Convex hull of lattice points, counter-clockwise, without collinear points.
pub fn convex_hull(points: &[(i64, i64)]) -> Vec<(i64, i64)> {
    let mut pts = points.to_vec();
    pts.sort_unstable();
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<(i64, i64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(i64, i64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

/// Number of pixel centres inside or on the convex hull of the given pixels.
pub fn convex_hull_pixel_area(pixels: &[(usize, usize)]) -> usize {
    let pts: Vec<(i64, i64)> = pixels.iter().map(|&(r, c)| (r as i64, c as i64)).collect();
    let hull = convex_hull(&pts);
    match hull.len() {
        0 => 0,
        1 => 1,
        2 => (gcd(hull[1].0 - hull[0].0, hull[1].1 - hull[0].1) + 1) as usize,
        _ => {
            let (r0, c0) = (hull.iter().map(|p| p.0).min().unwrap(), hull.iter().map(|p| p.1).min().unwrap());
            let (r1, c1) = (hull.iter().map(|p| p.0).max().unwrap(), hull.iter().map(|p| p.1).max().unwrap());
            let mut count = 0;
            for r in r0..=r1 {
                for c in c0..=c1 {
                    let p = (r, c);
                    let inside = (0..hull.len()).all(|i| cross(hull[i], hull[(i + 1) % hull.len()], p) >= 0);
                    if inside {
                        count += 1;
                    }
                }
            }
            count
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(pixels: Vec<(usize, usize)>) -> CellInstance {
        CellInstance::from_pixels(1, pixels).unwrap()
    }

    #[test]
    fn single_pixel() {
        let m = morphology_features(&inst(vec![(4, 7)]));
        assert_eq!(m.area, 1.0);
        assert_eq!(m.eccentricity, 0.0);
        assert_eq!(m.solidity, 1.0);
        assert_eq!(m.perimeter, 1.0);
        assert_eq!(m.centroid, (4.0, 7.0));
    }

    #[test]
    fn three_by_three_square() {
        let px = (0..3).flat_map(|r| (0..3).map(move |c| (r + 2, c + 5))).collect();
        let m = morphology_features(&inst(px));
        assert_eq!(m.area, 9.0);
        assert_eq!(m.centroid, (3.0, 6.0));
        assert_eq!(m.perimeter, 8.0);
        assert_eq!(m.eccentricity, 0.0);
        assert_eq!(m.solidity, 1.0);
        assert!((m.min_axis - m.max_axis).abs() < 1e-12);
    }

    #[test]
    fn horizontal_bar_orientation() {
        let m = morphology_features(&inst((0..5).map(|c| (3, c + 1)).collect()));
        assert_eq!(m.orientation, 0.0);
        assert!(m.max_axis > m.min_axis);
        assert!(m.eccentricity > 0.9 && m.eccentricity < 1.0);
        assert_eq!(m.solidity, 1.0);
        let v = morphology_features(&inst((0..5).map(|r| (r, 2)).collect()));
        assert!((v.orientation.abs() - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn l_shape_solidity() {
        // Hull of {(0,0),(0,1),(0,2),(1,0),(2,0)} is the triangle with 6 lattice points.
        let m = morphology_features(&inst(vec![(0, 0), (0, 1), (0, 2), (1, 0), (2, 0)]));
        assert!((m.solidity - 5.0 / 6.0).abs() < 1e-15);
    }
}
