//! Overlap and boundary-distance metrics on binary masks, with explicit
//! flags for the degenerate empty-mask cases instead of silent defaults.

use crate::labels::contour_points;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DscFlag {
    Defined,
    /// Both masks empty: score fixed at 1.
    BothEmpty,
    /// Exactly one mask empty: score fixed at 0.
    OneEmpty,
}

impl std::fmt::Display for DscFlag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DscFlag::Defined => write!(f, "ok"),
            DscFlag::BothEmpty => write!(f, "both-empty"),
            DscFlag::OneEmpty => write!(f, "one-empty"),
        }
    }
}

/// Dice similarity 2|P∩G| / (|P| + |G|) over nonzero pixels.
pub fn dsc(pred: &[u8], gt: &[u8]) -> (f64, DscFlag) {
    assert_eq!(pred.len(), gt.len(), "mask sizes must match");
    let mut inter = 0u64;
    let mut p = 0u64;
    let mut g = 0u64;
    for (&a, &b) in pred.iter().zip(gt) {
        let (a, b) = ((a != 0) as u64, (b != 0) as u64);
        inter += a & b;
        p += a;
        g += b;
    }
    match (p, g) {
        (0, 0) => (1.0, DscFlag::BothEmpty),
        (0, _) | (_, 0) => (0.0, DscFlag::OneEmpty),
        _ => (2.0 * inter as f64 / (p + g) as f64, DscFlag::Defined),
    }
}

/// Linear-interpolation percentile of an unsorted sample, q in [0, 1]:
/// rank q*(n-1) between order statistics.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of empty sample");
    assert!((0.0..=1.0).contains(&q));
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("non-finite distance"));
    let rank = q * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    if lo + 1 < v.len() {
        v[lo] + frac * (v[lo + 1] - v[lo])
    } else {
        v[lo]
    }
}

/// Directed Euclidean distances from each boundary point of `from` to the
/// nearest boundary point of `to`.
fn directed_boundary_distances(
    from: &[(usize, usize)],
    to: &[(usize, usize)],
) -> Vec<f64> {
    from.iter()
        .map(|&(ay, ax)| {
            to.iter()
                .map(|&(by, bx)| {
                    let dy = ay as f64 - by as f64;
                    let dx = ax as f64 - bx as f64;
                    (dy * dy + dx * dx).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// 95th-percentile symmetric boundary distance in pixels:
/// max(p95(dist(P->G)), p95(dist(G->P))) over contour point sets.
/// `None` when either mask is empty — flagged undefined rather than guessed.
pub fn hd95(pred: &[u8], gt: &[u8], h: usize, w: usize) -> Option<f64> {
    let pb = contour_points(pred, h, w);
    let gb = contour_points(gt, h, w);
    if pb.is_empty() || gb.is_empty() {
        return None;
    }
    let pg = directed_boundary_distances(&pb, &gb);
    let gp = directed_boundary_distances(&gb, &pb);
    Some(percentile(&pg, 0.95).max(percentile(&gp, 0.95)))
}

/// Mean and population standard deviation, for the aggregate metrics row.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(h: usize, w: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> Vec<u8> {
        let mut m = vec![0u8; h * w];
        for y in y0..y1 {
            for x in x0..x1 {
                m[y * w + x] = 1;
            }
        }
        m
    }

    #[test]
    fn dsc_identical_and_disjoint() {
        let a = rect(8, 8, 1, 5, 1, 5);
        let b = rect(8, 8, 5, 8, 5, 8);
        assert_eq!(dsc(&a, &a), (1.0, DscFlag::Defined));
        let (v, f) = dsc(&a, &b);
        assert_eq!(v, 0.0);
        assert_eq!(f, DscFlag::Defined);
    }

    #[test]
    fn dsc_empty_conventions() {
        let empty = vec![0u8; 16];
        let full = rect(4, 4, 0, 2, 0, 2);
        assert_eq!(dsc(&empty, &empty), (1.0, DscFlag::BothEmpty));
        assert_eq!(dsc(&empty, &full), (0.0, DscFlag::OneEmpty));
        assert_eq!(dsc(&full, &empty), (0.0, DscFlag::OneEmpty));
    }

    #[test]
    fn dsc_half_overlap_hand_value() {
        // P = rows 0..2, G = rows 1..3 of a 4x4: |P|=|G|=8, inter=4 -> 0.5
        let p = rect(4, 4, 0, 2, 0, 4);
        let g = rect(4, 4, 1, 3, 0, 4);
        let (v, _) = dsc(&p, &g);
        assert_eq!(v, 0.5);
    }

    #[test]
    fn percentile_interpolates_linearly() {
        let v = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(percentile(&v, 0.0), 0.0);
        assert_eq!(percentile(&v, 1.0), 3.0);
        assert_eq!(percentile(&v, 0.5), 1.5);
        // rank 0.95 * 3 = 2.85 -> 2 + 0.85
        assert!((percentile(&v, 0.95) - 2.85).abs() < 1e-12);
    }

    #[test]
    fn hd95_identical_masks_is_zero() {
        let a = rect(10, 10, 2, 7, 3, 8);
        assert_eq!(hd95(&a, &a, 10, 10), Some(0.0));
    }

    #[test]
    fn hd95_undefined_on_empty() {
        let a = rect(6, 6, 1, 3, 1, 3);
        let empty = vec![0u8; 36];
        assert_eq!(hd95(&a, &empty, 6, 6), None);
        assert_eq!(hd95(&empty, &empty, 6, 6), None);
    }

    #[test]
    fn hd95_shifted_line_ignores_single_outlier() {
        // G: 101-pixel row at y=10; P: 100-pixel row at y=11 plus one point
        // at exact distance 50. 95th percentile stays at the bulk distance 1.
        let (h, w) = (70, 110);
        let mut g = vec![0u8; h * w];
        for x in 0..=100 {
            g[10 * w + x] = 1;
        }
        let mut p = vec![0u8; h * w];
        for x in 0..100 {
            p[11 * w + x] = 1;
        }
        p[60 * w + 50] = 1; // nearest gt point (10, 50): distance exactly 50
        let v = hd95(&p, &g, h, w).unwrap();
        assert_eq!(v, 1.0, "hd95 = {}", v);
        // plain max of the same distance sets would see the outlier
        let pb = contour_points(&p, h, w);
        let gb = contour_points(&g, h, w);
        let max_dir = directed_boundary_distances(&pb, &gb)
            .into_iter()
            .fold(0.0f64, f64::max);
        assert_eq!(max_dir, 50.0);
    }

    #[test]
    fn mean_std_population() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
    }
}
