//! Synthetic low-contrast phantoms and everything around them: intensity
//! normalization, bilinear/nearest resizing, rigid augmentation, dataset
//! splitting, and on-disk persistence (one directory per split, tensor
//! archives per case, a plain-text manifest).

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::archive;
use crate::error::{Error, Result};
use crate::labels::{boundary_heatmap, HeatmapCompose};
use crate::tensor::{normal_draw, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PhantomSpec {
    /// Raster size (H, W).
    pub size: [usize; 2],
    /// Center offset range as a fraction of each dimension.
    pub center_jitter: f64,
    /// Semi-axis range as a fraction of the shorter side.
    pub axes: [f64; 2],
    /// Ellipse rotation range, radians.
    pub rotation: [f64; 2],
    /// Foreground minus background intensity, pre-blur.
    pub contrast: f64,
    /// Gaussian blur sigma range, pixels.
    pub blur: [f64; 2],
    /// Additive Gaussian noise standard deviation.
    pub noise: f64,
    /// Radius modulation amplitude (fraction of the nominal radius).
    pub irregularity: f64,
    /// Fraction of images generated with no foreground at all.
    pub empty_fraction: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            size: [128, 128],
            center_jitter: 0.08,
            axes: [0.16, 0.30],
            rotation: [0.0, std::f64::consts::PI],
            contrast: 0.12,
            blur: [0.8, 1.6],
            noise: 0.03,
            irregularity: 0.25,
            empty_fraction: 0.05,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size[0] < 8 || self.size[1] < 8 {
            return Err(Error::Parameter("phantom size must be at least 8x8".into()));
        }
        if !(self.axes[0] > 0.0 && self.axes[1] >= self.axes[0] && self.axes[1] < 0.5) {
            return Err(Error::Parameter(format!("degenerate axes range {:?}", self.axes)));
        }
        if !(self.contrast > 0.0 && self.contrast <= 1.0) {
            return Err(Error::Parameter(format!("contrast {} outside (0, 1]", self.contrast)));
        }
        if self.blur[0] < 0.0 || self.blur[1] < self.blur[0] {
            return Err(Error::Parameter(format!("bad blur range {:?}", self.blur)));
        }
        if self.noise < 0.0 {
            return Err(Error::Parameter("noise must be >= 0".into()));
        }
        if !(0.0..0.5).contains(&self.irregularity) {
            return Err(Error::Parameter("irregularity must be in [0, 0.5)".into()));
        }
        if !(0.0..=1.0).contains(&self.empty_fraction) {
            return Err(Error::Parameter("empty_fraction must be in [0, 1]".into()));
        }
        if !(0.0..=0.5).contains(&self.center_jitter) {
            return Err(Error::Parameter("center_jitter must be in [0, 0.5]".into()));
        }
        if self.rotation[1] < self.rotation[0] {
            return Err(Error::Parameter("bad rotation range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    /// [1, H, W], values in [0, 1].
    pub image: Tensor<f32>,
    /// H*W labels, 0 background / 1 foreground.
    pub mask: Vec<u8>,
    /// [1, H, W] boundary target.
    pub heatmap: Tensor<f32>,
}

fn case_seed(seed: u64, index: usize) -> u64 {
    // FNV-1a over both; separate stream per case
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain((index as u64).to_le_bytes().iter()) {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Separable Gaussian blur with replicate edge handling; sigma <= 0 is a
/// no-op. Kernel truncated at 3 sigma and renormalized.
pub fn gaussian_blur(img: &mut [f64], h: usize, w: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * r + 1) as usize);
    for i in -r..=r {
        kernel.push((-0.5 * (i as f64 / sigma).powi(2)).exp());
    }
    let s: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= s;
    }
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, k) in kernel.iter().enumerate() {
                let xx = (x as isize + j as isize - r).clamp(0, w as isize - 1) as usize;
                acc += k * img[y * w + xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, k) in kernel.iter().enumerate() {
                let yy = (y as isize + j as isize - r).clamp(0, h as isize - 1) as usize;
                acc += k * tmp[yy * w + x];
            }
            img[y * w + x] = acc;
        }
    }
}

/// One raster + mask, fully determined by (spec.seed, index).
pub fn generate_phantom(spec: &PhantomSpec, index: usize) -> Result<(Vec<f32>, Vec<u8>)> {
    spec.validate()?;
    let [h, w] = spec.size;
    let mut rng = ChaCha12Rng::seed_from_u64(case_seed(spec.seed, index));

    let empty = rng.gen::<f64>() < spec.empty_fraction;
    let bg = rng.gen_range(0.35..0.45);

    let mut mask = vec![0u8; h * w];
    if !empty {
        let cy = h as f64 / 2.0 + rng.gen_range(-1.0..1.0) * spec.center_jitter * h as f64;
        let cx = w as f64 / 2.0 + rng.gen_range(-1.0..1.0) * spec.center_jitter * w as f64;
        let short = h.min(w) as f64;
        let a = rng.gen_range(spec.axes[0]..=spec.axes[1]) * short;
        let b = rng.gen_range(spec.axes[0]..=spec.axes[1]) * short;
        let theta = rng.gen_range(spec.rotation[0]..=spec.rotation[1]);
        // low-order sinusoidal radius modulation; bounded by irregularity
        let coef: Vec<f64> = (0..4).map(|_| rng.gen::<f64>()).collect();
        let phase: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
        let csum: f64 = coef.iter().sum();
        let scale = if csum > 0.0 { spec.irregularity / csum } else { 0.0 };
        let (st, ct) = theta.sin_cos();
        for y in 0..h {
            for x in 0..w {
                let dy = y as f64 + 0.5 - cy;
                let dx = x as f64 + 0.5 - cx;
                let u = (dx * ct + dy * st) / a;
                let v = (-dx * st + dy * ct) / b;
                let rho = (u * u + v * v).sqrt();
                let phi = v.atan2(u);
                let r = 1.0
                    + scale
                        * coef
                            .iter()
                            .zip(&phase)
                            .enumerate()
                            .map(|(i, (c, p))| c * ((i + 2) as f64 * phi + p).sin())
                            .sum::<f64>();
                if rho <= r {
                    mask[y * w + x] = 1;
                }
            }
        }
    }

    let mut img: Vec<f64> =
        mask.iter().map(|&m| if m == 1 { bg + spec.contrast } else { bg }).collect();
    let sigma = rng.gen_range(spec.blur[0]..=spec.blur[1]);
    gaussian_blur(&mut img, h, w, sigma);
    if spec.noise > 0.0 {
        for v in &mut img {
            *v += spec.noise * normal_draw(&mut rng);
        }
    }
    let img = img.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect();
    Ok((img, mask))
}

/// Phantom plus its boundary target.
pub fn generate_sample(
    spec: &PhantomSpec,
    index: usize,
    label_sigma: f64,
    compose: HeatmapCompose,
) -> Result<Sample> {
    let [h, w] = spec.size;
    let (img, mask) = generate_phantom(spec, index)?;
    let hm = boundary_heatmap(&mask, h, w, label_sigma, compose)?;
    Ok(Sample {
        id: format!("case{index:04}"),
        image: Tensor::new(&[1, h, w], img)?,
        mask,
        heatmap: Tensor::new(&[1, h, w], hm)?,
    })
}

/// Clip to [lo, hi] then map affinely onto [0, 1].
pub fn normalize_intensity(img: &mut [f32], lo: f32, hi: f32) -> Result<()> {
    if hi <= lo {
        return Err(Error::Parameter(format!("normalize range [{lo}, {hi}] is empty")));
    }
    let span = hi - lo;
    for v in img {
        *v = (v.clamp(lo, hi) - lo) / span;
    }
    Ok(())
}

// Corner-aligned source coordinate: end points map onto end points. A
// single-row/column target samples coordinate 0.
fn src_pos(i: usize, dst: usize, src: usize) -> f32 {
    if dst <= 1 {
        0.0
    } else {
        i as f32 * (src - 1) as f32 / (dst - 1) as f32
    }
}

pub fn resize_bilinear(src: &[f32], h: usize, w: usize, th: usize, tw: usize) -> Vec<f32> {
    assert_eq!(src.len(), h * w);
    let mut out = Vec::with_capacity(th * tw);
    for y in 0..th {
        let fy = src_pos(y, th, h);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ay = fy - y0 as f32;
        for x in 0..tw {
            let fx = src_pos(x, tw, w);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let ax = fx - x0 as f32;
            let top = src[y0 * w + x0] * (1.0 - ax) + src[y0 * w + x1] * ax;
            let bot = src[y1 * w + x0] * (1.0 - ax) + src[y1 * w + x1] * ax;
            out.push(top * (1.0 - ay) + bot * ay);
        }
    }
    out
}

/// Nearest-neighbor resize for label masks, same corner-aligned grid.
pub fn resize_nearest(src: &[u8], h: usize, w: usize, th: usize, tw: usize) -> Vec<u8> {
    assert_eq!(src.len(), h * w);
    let mut out = Vec::with_capacity(th * tw);
    for y in 0..th {
        let sy = (src_pos(y, th, h).round() as usize).min(h - 1);
        for x in 0..tw {
            let sx = (src_pos(x, tw, w).round() as usize).min(w - 1);
            out.push(src[sy * w + sx]);
        }
    }
    out
}

/// Per-class bilinear resize of [K, H, W] probability planes followed by a
/// per-pixel renormalization. Bilinear weights already sum to one, so the
/// division only scrubs accumulated rounding before downstream consumers
/// assert normalization.
pub fn resize_prob_map(src: &[f32], k: usize, h: usize, w: usize, th: usize, tw: usize) -> Vec<f32> {
    assert_eq!(src.len(), k * h * w);
    let mut planes: Vec<Vec<f32>> = (0..k)
        .map(|c| resize_bilinear(&src[c * h * w..(c + 1) * h * w], h, w, th, tw))
        .collect();
    for px in 0..th * tw {
        let s: f32 = planes.iter().map(|p| p[px]).sum();
        if s > 0.0 {
            for p in &mut planes {
                p[px] /= s;
            }
        }
    }
    planes.concat()
}

/// Quarter-turn rotations and horizontal flips: the rigid transforms that
/// commute exactly with boundary-label generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Augment {
    pub quarter_turns: u8,
    pub flip: bool,
}

impl Augment {
    pub const IDENTITY: Augment = Augment { quarter_turns: 0, flip: false };
}

pub fn draw_augment<R: Rng>(rng: &mut R) -> Augment {
    Augment { quarter_turns: rng.gen_range(0..4u8), flip: rng.gen::<bool>() }
}

/// 90 degrees clockwise: (y, x) -> (x, h-1-y); output is w rows by h cols.
pub fn rot90_cw<T: Copy>(src: &[T], h: usize, w: usize) -> Vec<T> {
    assert_eq!(src.len(), h * w);
    let mut out = Vec::with_capacity(h * w);
    for ny in 0..w {
        for nx in 0..h {
            out.push(src[(h - 1 - nx) * w + ny]);
        }
    }
    out
}

/// Mirror left-right within each row.
pub fn flip_h<T: Copy>(src: &[T], h: usize, w: usize) -> Vec<T> {
    assert_eq!(src.len(), h * w);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            out.push(src[y * w + (w - 1 - x)]);
        }
    }
    out
}

/// Applies the transform; returns the raster and its (possibly swapped)
/// dimensions.
pub fn apply_augment<T: Copy>(src: &[T], h: usize, w: usize, a: Augment) -> (Vec<T>, usize, usize) {
    let mut data = src.to_vec();
    let (mut h, mut w) = (h, w);
    for _ in 0..a.quarter_turns % 4 {
        data = rot90_cw(&data, h, w);
        std::mem::swap(&mut h, &mut w);
    }
    if a.flip {
        data = flip_h(&data, h, w);
    }
    (data, h, w)
}

/// Identical rigid transform across image, mask, and heatmap.
pub fn augment_sample(s: &Sample, a: Augment) -> Sample {
    let (h, w) = (s.image.shape()[1], s.image.shape()[2]);
    let (img, nh, nw) = apply_augment(s.image.data(), h, w, a);
    let (mask, _, _) = apply_augment(&s.mask, h, w, a);
    let (hm, _, _) = apply_augment(s.heatmap.data(), h, w, a);
    Sample {
        id: s.id.clone(),
        image: Tensor::new(&[1, nh, nw], img).unwrap(),
        mask,
        heatmap: Tensor::new(&[1, nh, nw], hm).unwrap(),
    }
}

/// Free-angle rotation about the raster center, clamp-sampled: bilinear for
/// real-valued rasters, nearest for masks. Inexact by nature; the quarter
/// turn path is the one covered by the exactness suite.
pub fn rotate_free(img: &[f32], h: usize, w: usize, radians: f64) -> Vec<f32> {
    assert_eq!(img.len(), h * w);
    let (s, c) = radians.sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let sy = (c * dy + s * dx + cy).clamp(0.0, h as f64 - 1.0);
            let sx = (-s * dy + c * dx + cx).clamp(0.0, w as f64 - 1.0);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (ay, ax) = ((sy - y0 as f64) as f32, (sx - x0 as f64) as f32);
            let top = img[y0 * w + x0] * (1.0 - ax) + img[y0 * w + x1] * ax;
            let bot = img[y1 * w + x0] * (1.0 - ax) + img[y1 * w + x1] * ax;
            out.push(top * (1.0 - ay) + bot * ay);
        }
    }
    out
}

pub fn rotate_free_mask(mask: &[u8], h: usize, w: usize, radians: f64) -> Vec<u8> {
    assert_eq!(mask.len(), h * w);
    let (s, c) = radians.sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let sy = (c * dy + s * dx + cy).round().clamp(0.0, h as f64 - 1.0) as usize;
            let sx = (-s * dy + c * dx + cx).round().clamp(0.0, w as f64 - 1.0) as usize;
            out.push(mask[sy * w + sx]);
        }
    }
    out
}

/// Shuffle 0..n and cut it into train/val/test by the given fractions.
pub fn split_dataset(n: usize, fractions: [f64; 3], seed: u64) -> Result<[Vec<usize>; 3]> {
    if fractions.iter().any(|&f| f < 0.0) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Parameter(format!("fractions {fractions:?} must be >= 0 and sum to 1")));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    use rand::seq::SliceRandom;
    ids.shuffle(&mut ChaCha12Rng::seed_from_u64(seed));
    let c0 = (fractions[0] * n as f64).round() as usize;
    let c1 = ((fractions[0] + fractions[1]) * n as f64).round() as usize;
    let (c0, c1) = (c0.min(n), c1.min(n).max(c0));
    Ok([ids[..c0].to_vec(), ids[c0..c1].to_vec(), ids[c1..].to_vec()])
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DatasetSpec {
    pub phantom: PhantomSpec,
    pub count: usize,
    pub fractions: [f64; 3],
    pub split_seed: u64,
    pub label_sigma: f64,
    pub compose: HeatmapCompose,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            phantom: PhantomSpec::default(),
            count: 400,
            fractions: [0.7, 0.1, 0.2],
            split_seed: 17,
            label_sigma: 1.6,
            compose: HeatmapCompose::Max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub id: String,
    pub split: String,
    pub seed: u64,
    pub index: usize,
}

fn case_path(dir: &Path, split: &str, id: &str) -> PathBuf {
    dir.join(split).join(format!("{id}.fsa"))
}

/// Generates every case, writes per-split directories, the manifest, and the
/// spec file. Returns per-split counts.
pub fn write_dataset(dir: &Path, spec: &DatasetSpec) -> Result<[usize; 3]> {
    spec.phantom.validate()?;
    if spec.label_sigma <= 0.0 {
        return Err(Error::Parameter("label_sigma must be > 0".into()));
    }
    let splits = split_dataset(spec.count, spec.fractions, spec.split_seed)?;
    let mut split_of = vec![0usize; spec.count];
    for (si, ids) in splits.iter().enumerate() {
        for &i in ids {
            split_of[i] = si;
        }
    }
    for s in SPLITS {
        fs::create_dir_all(dir.join(s))?;
    }
    let mut manifest = String::new();
    for index in 0..spec.count {
        let sample = generate_sample(&spec.phantom, index, spec.label_sigma, spec.compose)?;
        let split = SPLITS[split_of[index]];
        let [h, w] = spec.phantom.size;
        let mask_f: Vec<f32> = sample.mask.iter().map(|&m| m as f32).collect();
        archive::write(
            case_path(dir, split, &sample.id),
            &[
                ("image".to_string(), sample.image.clone()),
                ("mask".to_string(), Tensor::new(&[1, h, w], mask_f)?),
                ("heatmap".to_string(), sample.heatmap.clone()),
            ],
        )?;
        manifest.push_str(&format!("{},{},{},{}\n", sample.id, split, spec.phantom.seed, index));
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    fs::write(
        dir.join("spec.json"),
        serde_json::to_string_pretty(spec).map_err(|e| Error::Format(e.to_string()))?,
    )?;
    Ok([splits[0].len(), splits[1].len(), splits[2].len()])
}

pub fn read_spec(dir: &Path) -> Result<DatasetSpec> {
    let text = fs::read_to_string(dir.join("spec.json"))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("spec.json: {e}")))
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRow>> {
    let text = fs::read_to_string(dir.join("manifest.txt"))?;
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(Error::Format(format!("manifest line {}: `{line}`", ln + 1)));
        }
        rows.push(ManifestRow {
            id: parts[0].to_string(),
            split: parts[1].to_string(),
            seed: parts[2].parse().map_err(|_| Error::Format(format!("manifest seed `{}`", parts[2])))?,
            index: parts[3]
                .parse()
                .map_err(|_| Error::Format(format!("manifest index `{}`", parts[3])))?,
        });
    }
    Ok(rows)
}

pub fn read_case(path: &Path) -> Result<Sample> {
    let entries = archive::read::<f32, _>(path)?;
    let image = archive::find(&entries, "image")?.clone();
    let mask_t = archive::find(&entries, "mask")?;
    let heatmap = archive::find(&entries, "heatmap")?.clone();
    if image.shape() != mask_t.shape() || image.shape() != heatmap.shape() {
        return Err(Error::Format("case entries disagree on shape".into()));
    }
    let mask = mask_t.data().iter().map(|&v| (v != 0.0) as u8).collect();
    let id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("case")
        .to_string();
    Ok(Sample { id, image, mask, heatmap })
}

/// All cases of one split, ordered by id.
/// Recompute every case's boundary heatmap from its stored mask and update
/// the dataset's recorded label parameters. Returns the number of cases
/// rewritten.
pub fn rebuild_labels(dir: &Path, sigma: f64, compose: HeatmapCompose) -> Result<usize> {
    if sigma <= 0.0 {
        return Err(Error::Parameter("label sigma must be > 0".into()));
    }
    let mut spec = read_spec(dir)?;
    let rows = read_manifest(dir)?;
    for row in &rows {
        let path = case_path(dir, &row.split, &row.id);
        let sample = read_case(&path)?;
        let [_, h, w] = *sample.image.shape() else {
            return Err(Error::Format(format!("{}: image is not 1xHxW", row.id)));
        };
        let hm = boundary_heatmap(&sample.mask, h, w, sigma, compose)?;
        let mask_f: Vec<f32> = sample.mask.iter().map(|&m| m as f32).collect();
        archive::write(
            &path,
            &[
                ("image".to_string(), sample.image),
                ("mask".to_string(), Tensor::new(&[1, h, w], mask_f)?),
                ("heatmap".to_string(), Tensor::new(&[1, h, w], hm)?),
            ],
        )?;
    }
    spec.label_sigma = sigma;
    spec.compose = compose;
    fs::write(
        dir.join("spec.json"),
        serde_json::to_string_pretty(&spec).map_err(|e| Error::Format(e.to_string()))?,
    )?;
    Ok(rows.len())
}

pub fn load_split(dir: &Path, split: &str) -> Result<Vec<Sample>> {
    let rows = read_manifest(dir)?;
    let mut out = Vec::new();
    for row in rows.into_iter().filter(|r| r.split == split) {
        out.push(read_case(&case_path(dir, split, &row.id))?);
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::dsc;

    #[test]
    fn generation_is_deterministic() {
        let spec = PhantomSpec::default();
        let (a_img, a_mask) = generate_phantom(&spec, 7).unwrap();
        let (b_img, b_mask) = generate_phantom(&spec, 7).unwrap();
        assert_eq!(a_img, b_img);
        assert_eq!(a_mask, b_mask);
        let (c_img, _) = generate_phantom(&spec, 8).unwrap();
        assert_ne!(a_img, c_img);
    }

    #[test]
    fn images_stay_in_unit_range_and_masks_nonempty_mostly() {
        let spec = PhantomSpec::default();
        let mut nonempty = 0;
        for i in 0..24 {
            let (img, mask) = generate_phantom(&spec, i).unwrap();
            assert!(img.iter().all(|&v| (0.0..=1.0).contains(&v)));
            if mask.iter().any(|&m| m == 1) {
                nonempty += 1;
            }
        }
        assert!(nonempty >= 20, "only {nonempty}/24 nonempty");
    }

    #[test]
    fn full_contrast_without_blur_recovers_mask_by_threshold() {
        let spec = PhantomSpec {
            contrast: 1.0,
            blur: [0.0, 0.0],
            noise: 0.0,
            empty_fraction: 0.0,
            ..PhantomSpec::default()
        };
        for i in 0..4 {
            let (img, mask) = generate_phantom(&spec, i).unwrap();
            // background is drawn from [0.35, 0.45]; foreground clips to 1
            let bg = img.iter().cloned().fold(f32::INFINITY, f32::min);
            let thr = bg + 0.5;
            let rec: Vec<u8> = img.iter().map(|&v| (v > thr) as u8).collect();
            assert_eq!(rec, mask, "threshold recovery failed on case {i}");
        }
    }

    #[test]
    fn empty_fraction_one_gives_empty_masks_and_zero_heatmaps() {
        let spec = PhantomSpec { empty_fraction: 1.0, ..PhantomSpec::default() };
        for i in 0..3 {
            let s = generate_sample(&spec, i, 1.6, HeatmapCompose::Max).unwrap();
            assert!(s.mask.iter().all(|&m| m == 0));
            assert!(s.heatmap.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn low_contrast_invariant_holds_pre_noise() {
        let spec = PhantomSpec::default();
        assert!(spec.contrast <= 0.2);
    }

    #[test]
    fn normalize_reference_points() {
        let mut v = vec![0.0f32, 0.5, 1.0];
        normalize_intensity(&mut v, 0.0, 1.0).unwrap();
        assert_eq!(v, vec![0.0, 0.5, 1.0]);
        let mut v = vec![5.0f32, 10.0, 20.0];
        normalize_intensity(&mut v, 10.0, 20.0).unwrap();
        assert_eq!(v, vec![0.0, 0.0, 1.0]);
        let mut v = vec![15.0f32];
        normalize_intensity(&mut v, 10.0, 20.0).unwrap();
        assert_eq!(v, vec![0.5]);
        assert!(normalize_intensity(&mut v, 1.0, 1.0).is_err());
    }

    #[test]
    fn bilinear_corner_aligned_examples() {
        // 2x1 -> 3x1 hits the documented midpoint
        assert_eq!(resize_bilinear(&[0.0, 1.0], 2, 1, 3, 1), vec![0.0, 0.5, 1.0]);
        // identity at same size
        let src = vec![0.1, 0.9, 0.4, 0.7];
        assert_eq!(resize_bilinear(&src, 2, 2, 2, 2), src);
        // constant stays constant at any size
        let c = resize_bilinear(&vec![0.3; 16], 4, 4, 7, 5);
        assert!(c.iter().all(|&v| (v - 0.3).abs() < 1e-7));
    }

    #[test]
    fn nearest_keeps_labels_binary() {
        let m = vec![0u8, 1, 1, 0];
        let up = resize_nearest(&m, 2, 2, 5, 5);
        assert!(up.iter().all(|&v| v == 0 || v == 1));
        assert_eq!(resize_nearest(&m, 2, 2, 2, 2), m);
    }

    #[test]
    fn prob_resize_preserves_normalization() {
        let mut planes = vec![0.0f32; 2 * 4 * 4];
        for i in 0..16 {
            let p = 0.1 + 0.05 * i as f32;
            planes[i] = p;
            planes[16 + i] = 1.0 - p;
        }
        let out = resize_prob_map(&planes, 2, 4, 4, 9, 7);
        for px in 0..63 {
            let s = out[px] + out[63 + px];
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn quarter_turn_machinery() {
        let v = vec![1u8, 2, 3, 4, 5, 6]; // 2x3
        // cw: first output row is the first column bottom-up
        assert_eq!(rot90_cw(&v, 2, 3), vec![4, 1, 5, 2, 6, 3]);
        assert_eq!(flip_h(&v, 2, 3), vec![3, 2, 1, 6, 5, 4]);
        let (four, h, w) = apply_augment(&v, 2, 3, Augment { quarter_turns: 4, flip: false });
        assert_eq!((four, h, w), (v.clone(), 2, 3));
        let (once, _, _) = apply_augment(&v, 2, 3, Augment { quarter_turns: 0, flip: true });
        let (twice, _, _) = apply_augment(&once, 2, 3, Augment { quarter_turns: 0, flip: true });
        assert_eq!(twice, v);
    }

    #[test]
    fn rotation_preserves_value_multiset() {
        let spec = PhantomSpec::default();
        let (img, _) = generate_phantom(&spec, 0).unwrap();
        let rot = rot90_cw(&img, 128, 128);
        let mut a = img.clone();
        let mut b = rot.clone();
        a.sort_by(f32::total_cmp);
        b.sort_by(f32::total_cmp);
        assert_eq!(a, b);
    }

    #[test]
    fn augmentation_commutes_with_heatmap_and_preserves_dsc() {
        let spec = PhantomSpec::default();
        let s = generate_sample(&spec, 3, 1.6, HeatmapCompose::Max).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..6 {
            let a = draw_augment(&mut rng);
            let t = augment_sample(&s, a);
            // heatmap(augment(mask)) == augment(heatmap(mask)), bit for bit
            let fresh = boundary_heatmap(&t.mask, 128, 128, 1.6, HeatmapCompose::Max).unwrap();
            assert_eq!(fresh, t.heatmap.data());
            // metric invariance under the common transform
            let (p, _) = generate_phantom(&spec, 9).unwrap();
            let pm: Vec<u8> = p.iter().map(|&v| (v > 0.45) as u8).collect();
            let (pm_t, _, _) = apply_augment(&pm, 128, 128, a);
            let before = dsc(&pm, &s.mask);
            let after = dsc(&pm_t, &t.mask);
            assert_eq!(before, after);
        }
    }

    #[test]
    fn free_rotation_by_zero_is_identity() {
        let spec = PhantomSpec::default();
        let (img, mask) = generate_phantom(&spec, 2).unwrap();
        assert_eq!(rotate_free(&img, 128, 128, 0.0), img);
        assert_eq!(rotate_free_mask(&mask, 128, 128, 0.0), mask);
        // arbitrary angle keeps masks binary
        let r = rotate_free_mask(&mask, 128, 128, 0.7);
        assert!(r.iter().all(|&v| v == 0 || v == 1));
    }

    #[test]
    fn split_sizes_and_partition() {
        let [tr, va, te] = split_dataset(400, [0.7, 0.1, 0.2], 11).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (280, 40, 80));
        let mut all: Vec<usize> = tr.iter().chain(&va).chain(&te).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..400).collect::<Vec<_>>());
        let [tr2, ..] = split_dataset(400, [0.7, 0.1, 0.2], 11).unwrap();
        assert_eq!(tr, tr2);
        let [tr3, ..] = split_dataset(400, [0.7, 0.1, 0.2], 12).unwrap();
        assert_ne!(tr, tr3);
        assert!(split_dataset(10, [0.5, 0.2, 0.2], 0).is_err());
    }

    #[test]
    fn dataset_roundtrip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            phantom: PhantomSpec { size: [32, 32], ..PhantomSpec::default() },
            count: 10,
            ..DatasetSpec::default()
        };
        let counts = write_dataset(dir.path(), &spec).unwrap();
        assert_eq!(counts, [7, 1, 2]);
        assert_eq!(read_spec(dir.path()).unwrap(), spec);
        let rows = read_manifest(dir.path()).unwrap();
        assert_eq!(rows.len(), 10);
        let train = load_split(dir.path(), "train").unwrap();
        assert_eq!(train.len(), 7);
        // content identical to regeneration
        let row = rows.iter().find(|r| r.split == "train").unwrap();
        let fresh =
            generate_sample(&spec.phantom, row.index, spec.label_sigma, spec.compose).unwrap();
        let loaded = train.iter().find(|s| s.id == row.id).unwrap();
        assert_eq!(fresh.image.data(), loaded.image.data());
        assert_eq!(fresh.mask, loaded.mask);
        assert_eq!(fresh.heatmap.data(), loaded.heatmap.data());
    }

    #[test]
    fn rebuild_labels_rewrites_heatmaps_in_place() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            phantom: PhantomSpec { size: [32, 32], ..PhantomSpec::default() },
            count: 6,
            ..DatasetSpec::default()
        };
        write_dataset(dir.path(), &spec).unwrap();
        let before = load_split(dir.path(), "train").unwrap();

        let n = rebuild_labels(dir.path(), 3.0, HeatmapCompose::Max).unwrap();
        assert_eq!(n, 6);
        assert_eq!(read_spec(dir.path()).unwrap().label_sigma, 3.0);

        let after = load_split(dir.path(), "train").unwrap();
        for (a, b) in before.iter().zip(&after) {
            // images and masks untouched, heatmaps rebuilt at the wider sigma
            assert_eq!(a.image.data(), b.image.data());
            assert_eq!(a.mask, b.mask);
            let want = boundary_heatmap(&a.mask, 32, 32, 3.0, HeatmapCompose::Max).unwrap();
            assert_eq!(b.heatmap.data(), &want[..]);
        }
        assert!(rebuild_labels(dir.path(), 0.0, HeatmapCompose::Max).is_err());
    }
}
