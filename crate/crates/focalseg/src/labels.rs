//! Boundary labels: contour extraction from binary masks and Gaussian
//! boundary heatmaps used as the auxiliary regression target.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Beyond this many sigmas a contribution is treated as exactly zero. The
/// true value there is < 1e-21, far below f32 resolution, so the cutoff keeps
/// the construction local without changing any representable value.
pub const CUTOFF_SIGMAS: f64 = 10.0;

/// Foreground pixels with at least one 4-neighbor outside the foreground.
/// Pixels on the image border count their missing neighbors as background,
/// so a region touching the border still closes its contour.
pub fn contour_mask(mask: &[u8], h: usize, w: usize) -> Vec<bool> {
    assert_eq!(mask.len(), h * w, "mask length must be h*w");
    let fg = |y: isize, x: isize| -> bool {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[y as usize * w + x as usize] != 0
    };
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] == 0 {
                continue;
            }
            let (yi, xi) = (y as isize, x as isize);
            if !fg(yi - 1, xi) || !fg(yi + 1, xi) || !fg(yi, xi - 1) || !fg(yi, xi + 1) {
                out[y * w + x] = true;
            }
        }
    }
    out
}

pub fn contour_points(mask: &[u8], h: usize, w: usize) -> Vec<(usize, usize)> {
    contour_mask(mask, h, w)
        .iter()
        .enumerate()
        .filter(|(_, &c)| c)
        .map(|(i, _)| (i / w, i % w))
        .collect()
}

/// How overlapping Gaussian bumps combine into one map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeatmapCompose {
    /// Pointwise maximum of the per-point bumps (default).
    Max,
    /// Sum of bumps, clipped at 1.
    SumClip,
}

impl Default for HeatmapCompose {
    fn default() -> Self {
        HeatmapCompose::Max
    }
}

impl std::str::FromStr for HeatmapCompose {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(HeatmapCompose::Max),
            "sum-clip" => Ok(HeatmapCompose::SumClip),
            other => Err(Error::Parameter(format!("unknown heatmap compose mode {:?}", other))),
        }
    }
}

/// The decay every contour point applies: exp(-d^2 / (2 sigma^2)).
/// 1 at the point itself, exp(-1/2) at distance sigma.
pub fn bump(d: f64, sigma: f64) -> f64 {
    (-(d * d) / (2.0 * sigma * sigma)).exp()
}

/// Gaussian boundary heatmap from explicit points: each point contributes
/// `bump(d, sigma)` inside the cutoff disk. Values land in [0, 1] and are
/// exactly 1 at the points themselves under either composition.
pub fn heatmap_from_points(
    points: &[(usize, usize)],
    h: usize,
    w: usize,
    sigma: f64,
    compose: HeatmapCompose,
) -> Result<Vec<f32>> {
    if sigma <= 0.0 {
        return Err(Error::Parameter(format!("sigma must be positive, got {}", sigma)));
    }
    let radius = (CUTOFF_SIGMAS * sigma).ceil() as isize;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut acc = vec![0.0f64; h * w];
    for &(py, px) in points {
        if py >= h || px >= w {
            return Err(Error::Parameter(format!("point ({}, {}) outside {}x{}", py, px, h, w)));
        }
        let y0 = (py as isize - radius).max(0) as usize;
        let y1 = ((py as isize + radius) as usize).min(h - 1);
        let x0 = (px as isize - radius).max(0) as usize;
        let x1 = ((px as isize + radius) as usize).min(w - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dy = y as f64 - py as f64;
                let dx = x as f64 - px as f64;
                let d2 = dy * dy + dx * dx;
                if d2 > (radius * radius) as f64 {
                    continue;
                }
                let v = (-d2 * inv).exp(); // bump(d, sigma), with 1/(2 sigma^2) hoisted
                let cell = &mut acc[y * w + x];
                match compose {
                    HeatmapCompose::Max => {
                        if v > *cell {
                            *cell = v;
                        }
                    }
                    HeatmapCompose::SumClip => *cell += v,
                }
            }
        }
    }
    Ok(acc
        .into_iter()
        .map(|v| match compose {
            HeatmapCompose::Max => v as f32,
            HeatmapCompose::SumClip => v.min(1.0) as f32,
        })
        .collect())
}

/// Contour heatmap of a binary mask; all zeros when the mask is empty.
pub fn boundary_heatmap(
    mask: &[u8],
    h: usize,
    w: usize,
    sigma: f64,
    compose: HeatmapCompose,
) -> Result<Vec<f32>> {
    heatmap_from_points(&contour_points(mask, h, w), h, w, sigma, compose)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect_mask(h: usize, w: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> Vec<u8> {
        let mut m = vec![0u8; h * w];
        for y in y0..y1 {
            for x in x0..x1 {
                m[y * w + x] = 1;
            }
        }
        m
    }

    #[test]
    fn contour_of_filled_rect_is_its_ring() {
        let m = rect_mask(7, 7, 1, 6, 2, 5);
        let c = contour_mask(&m, 7, 7);
        // interior pixel
        assert!(!c[3 * 7 + 3]);
        // edge pixels of the rect
        assert!(c[1 * 7 + 2]);
        assert!(c[5 * 7 + 4]);
        assert!(c[3 * 7 + 2]);
        // background never marked
        assert!(!c[0]);
        let count = c.iter().filter(|&&v| v).count();
        // 5x3 rect: ring = 2*5 + 2*3 - 4
        assert_eq!(count, 12);
    }

    #[test]
    fn region_touching_border_has_contour_there() {
        let m = rect_mask(4, 4, 0, 2, 0, 2);
        let c = contour_mask(&m, 4, 4);
        assert!(c[0], "corner pixel borders the outside");
        // a 2x2 block is all contour
        assert_eq!(c.iter().filter(|&&v| v).count(), 4);
    }

    #[test]
    fn single_pixel_region_is_all_contour() {
        let mut m = vec![0u8; 25];
        m[12] = 1;
        let c = contour_mask(&m, 5, 5);
        assert_eq!(c.iter().filter(|&&v| v).count(), 1);
        assert!(c[12]);
    }

    #[test]
    fn heatmap_is_one_on_contour_and_decays() {
        let sigma = 1.6;
        let hm = heatmap_from_points(&[(8, 8)], 17, 17, sigma, HeatmapCompose::Max).unwrap();
        assert_eq!(hm[8 * 17 + 8], 1.0, "value at the point itself is exactly 1");
        let at1 = hm[8 * 17 + 9] as f64;
        assert!((at1 - (-1.0 / (2.0 * sigma * sigma)).exp()).abs() < 1e-7);
        // monotone decay along a row within the cutoff
        for x in 9..16 {
            assert!(hm[8 * 17 + x] >= hm[8 * 17 + x + 1]);
        }
    }

    #[test]
    fn value_at_distance_sigma_is_exp_minus_half() {
        // 3-4-5 offset puts a grid point at distance exactly sigma = 5
        let sigma = 5.0;
        let hm = heatmap_from_points(&[(60, 60)], 121, 121, sigma, HeatmapCompose::Max).unwrap();
        let v = hm[(60 + 3) * 121 + (60 + 4)] as f64;
        assert!((v - (-0.5f64).exp()).abs() < 1e-6, "got {}", v);
    }

    #[test]
    fn heatmap_zero_beyond_cutoff_and_in_range() {
        let sigma = 0.5;
        let hm = heatmap_from_points(&[(0, 0)], 1, 32, sigma, HeatmapCompose::Max).unwrap();
        let radius = (CUTOFF_SIGMAS * sigma).ceil() as usize;
        assert!(hm[radius + 1] == 0.0, "beyond cutoff must be exactly zero");
        assert!(hm.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn empty_mask_gives_all_zero_heatmap() {
        let hm = boundary_heatmap(&vec![0u8; 64], 8, 8, 1.6, HeatmapCompose::Max).unwrap();
        assert!(hm.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sum_clip_saturates_at_one() {
        let pts = [(4, 4), (4, 5), (5, 4), (5, 5)];
        let hm = heatmap_from_points(&pts, 10, 10, 1.6, HeatmapCompose::SumClip).unwrap();
        assert_eq!(hm[4 * 10 + 4], 1.0);
        assert!(hm.iter().all(|&v| v <= 1.0));
        // far away still near zero
        assert!(hm[0] < 0.1);
    }

    #[test]
    fn max_compose_never_exceeds_isolated_bump() {
        let one = heatmap_from_points(&[(4, 4)], 9, 9, 1.0, HeatmapCompose::Max).unwrap();
        let two = heatmap_from_points(&[(4, 4), (4, 6)], 9, 9, 1.0, HeatmapCompose::Max).unwrap();
        for i in 0..81 {
            assert!(two[i] >= one[i] - 1e-9);
            assert!(two[i] <= 1.0);
        }
    }

    #[test]
    fn heatmap_commutes_with_rot90_exactly() {
        let m = rect_mask(9, 9, 2, 6, 3, 8);
        let rot = |src: &[u8], h: usize, w: usize| -> Vec<u8> {
            // 90 degrees clockwise: (y, x) -> (x, h-1-y)
            let mut out = vec![0u8; w * h];
            for y in 0..h {
                for x in 0..w {
                    out[x * h + (h - 1 - y)] = src[y * w + x];
                }
            }
            out
        };
        let hm_then_rot = {
            let hm = boundary_heatmap(&m, 9, 9, 1.6, HeatmapCompose::Max).unwrap();
            let mut out = vec![0.0f32; 81];
            for y in 0..9 {
                for x in 0..9 {
                    out[x * 9 + (8 - y)] = hm[y * 9 + x];
                }
            }
            out
        };
        let rot_then_hm = boundary_heatmap(&rot(&m, 9, 9), 9, 9, 1.6, HeatmapCompose::Max).unwrap();
        assert_eq!(hm_then_rot, rot_then_hm, "rotation and heatmap must commute bit-exactly");
    }
}
