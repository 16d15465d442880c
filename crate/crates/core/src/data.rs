//! Synthetic spatially-imbalanced dataset generation and paired-directory
//! ingestion.
//!
//! Generated samples pair a textured grayscale image with a small-lesion
//! binary mask; lesions are unions of a few rotated ellipses occupying a
//! configurable fraction of the pixels (a few percent by default).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pnm;
use crate::rng::substream;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct SamplePair {
    /// [C,H,W] in [0,1].
    pub image: Tensor,
    /// [1,H,W], values exactly 0 or 1.
    pub mask: Tensor,
    pub id: String,
}

impl SamplePair {
    pub fn lesion_ratio(&self) -> f64 {
        let m = self.mask.data();
        m.iter().sum::<f64>() / m.len() as f64
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub size: usize,
    /// Target lesion-area ratio band, subset of (0,1).
    pub ratio_range: (f64, f64),
    pub blob_count_range: (usize, usize),
    /// Additive intensity shift inside the lesion.
    pub contrast: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            size: 64,
            ratio_range: (0.02, 0.10),
            blob_count_range: (1, 3),
            contrast: 0.35,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.ratio_range;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(Error::InvalidArg(format!("ratio range ({lo}, {hi}) not inside (0,1)")));
        }
        if self.size == 0 || self.size % 16 != 0 {
            return Err(Error::InvalidArg(format!("size {} must be a positive multiple of 16", self.size)));
        }
        let hw = (self.size * self.size) as f64;
        if (lo * hw).ceil() > (hi * hw).floor() {
            return Err(Error::InvalidArg(format!(
                "ratio range ({lo}, {hi}) unreachable on a {0}x{0} grid",
                self.size
            )));
        }
        if self.blob_count_range.0 == 0 || self.blob_count_range.0 > self.blob_count_range.1 {
            return Err(Error::InvalidArg(format!("bad blob count range {:?}", self.blob_count_range)));
        }
        Ok(())
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    /// Normalized quadratic form; <= 1 means inside.
    fn field(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = (dx * self.cos + dy * self.sin) / self.a;
        let v = (-dx * self.sin + dy * self.cos) / self.b;
        u * u + v * v
    }
}

/// Deterministic per (spec.seed, index) sample generation.
pub fn gen_pair(spec: &SynthSpec, index: usize) -> Result<SamplePair> {
    spec.validate()?;
    let mut rng = substream(spec.seed, &format!("data/{index}"));
    let s = spec.size;
    let hw = s * s;
    let sf = s as f64;

    let n_blobs = rng.gen_range(spec.blob_count_range.0..=spec.blob_count_range.1);
    let ellipses: Vec<Ellipse> = (0..n_blobs)
        .map(|_| {
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            Ellipse {
                cx: rng.gen_range(0.2 * sf..0.8 * sf),
                cy: rng.gen_range(0.2 * sf..0.8 * sf),
                a: rng.gen_range(0.06 * sf..0.25 * sf),
                b: rng.gen_range(0.06 * sf..0.25 * sf),
                cos: angle.cos(),
                sin: angle.sin(),
            }
        })
        .collect();

    // Min over ellipse fields gives smooth irregular unions; selecting the
    // n lowest-field pixels forces the realized ratio into the target band.
    let mut field = vec![0.0f64; hw];
    for y in 0..s {
        for x in 0..s {
            field[y * s + x] = ellipses
                .iter()
                .map(|e| e.field(x as f64 + 0.5, y as f64 + 0.5))
                .fold(f64::INFINITY, f64::min);
        }
    }
    let lo_count = (spec.ratio_range.0 * hw as f64).ceil() as usize;
    let hi_count = (spec.ratio_range.1 * hw as f64).floor() as usize;
    let inside = field.iter().filter(|&&q| q <= 1.0).count();
    let n_lesion = inside.clamp(lo_count.max(1), hi_count);
    let mut order: Vec<usize> = (0..hw).collect();
    order.sort_by(|&i, &j| field[i].partial_cmp(&field[j]).unwrap().then(i.cmp(&j)));
    let mut mask = vec![0.0f64; hw];
    for &i in order.iter().take(n_lesion) {
        mask[i] = 1.0;
    }

    // Background: a few low-frequency waves plus pixel noise; lesion region
    // gets an intensity shift and its own finer texture.
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.02..0.12),
                rng.gen_range(-0.25..0.25),
                rng.gen_range(-0.25..0.25),
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let lesion_freq: f64 = rng.gen_range(0.3..0.9);
    let mut image = vec![0.0f64; hw];
    for y in 0..s {
        for x in 0..s {
            let i = y * s + x;
            let mut v = 0.45;
            for &(amp, fx, fy, ph) in &waves {
                v += amp * (fx * x as f64 + fy * y as f64 + ph).sin();
            }
            if mask[i] > 0.5 {
                v += spec.contrast * (0.7 + 0.3 * (lesion_freq * (x + y) as f64).sin());
            }
            v += rng.gen_range(-0.02..0.02);
            image[i] = v.clamp(0.0, 1.0);
        }
    }

    Ok(SamplePair {
        image: Tensor::new(vec![1, s, s], image)?,
        mask: Tensor::new(vec![1, s, s], mask)?,
        id: format!("synth-{:05}", index),
    })
}

pub fn gen_dataset(spec: &SynthSpec, count: usize) -> Result<Vec<SamplePair>> {
    (0..count).map(|i| gen_pair(spec, i)).collect()
}

/// Seed-stable 80/20 split by index hash.
pub fn is_validation(seed: u64, index: usize) -> bool {
    let mut h = seed ^ 0x9e3779b97f4a7c15u64.wrapping_mul(index as u64 + 1);
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51afd7ed558ccd);
    h ^= h >> 33;
    h % 5 == 0
}

pub fn split_dataset(seed: u64, pairs: Vec<SamplePair>) -> (Vec<SamplePair>, Vec<SamplePair>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, p) in pairs.into_iter().enumerate() {
        if is_validation(seed, i) {
            val.push(p);
        } else {
            train.push(p);
        }
    }
    (train, val)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub ratio: f64,
}

pub struct LoadOutcome {
    pub pairs: Vec<SamplePair>,
    /// Per-file problems: orphans, unreadable formats, size mismatches.
    pub errors: Vec<String>,
}

/// Load matching-by-stem image/mask files from two directories.
/// Masks are binarized at 0.5. Sizes must be multiples of 16 unless
/// `center_crop` trims them down to one.
pub fn load_pair_dir(images_dir: &Path, masks_dir: &Path, center_crop: bool) -> Result<LoadOutcome> {
    let list = |dir: &Path| -> Result<BTreeMap<String, PathBuf>> {
        let mut map = BTreeMap::new();
        if !dir.exists() {
            return Ok(map);
        }
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
            if matches!(ext, "pgm" | "ppm") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    map.insert(stem.to_string(), path.clone());
                }
            }
        }
        Ok(map)
    };
    let images = list(images_dir)?;
    let masks = list(masks_dir)?;
    let mut errors = Vec::new();
    let mut pairs = Vec::new();
    for (stem, ipath) in &images {
        let Some(mpath) = masks.get(stem) else {
            errors.push(format!("{}: no matching mask", ipath.display()));
            continue;
        };
        match load_one(ipath, mpath, center_crop) {
            Ok(pair) => pairs.push(pair),
            Err(e) => errors.push(format!("{}: {e}", ipath.display())),
        }
    }
    for (stem, mpath) in &masks {
        if !images.contains_key(stem) {
            errors.push(format!("{}: no matching image", mpath.display()));
        }
    }
    Ok(LoadOutcome { pairs, errors })
}

fn crop_to_multiple(t: Tensor, multiple: usize) -> Result<Tensor> {
    let (c, h, w) = t.dims3()?;
    let nh = (h / multiple) * multiple;
    let nw = (w / multiple) * multiple;
    if nh == 0 || nw == 0 {
        return Err(Error::InvalidArg(format!("image {h}x{w} smaller than {multiple}")));
    }
    if nh == h && nw == w {
        return Ok(t);
    }
    let (oy, ox) = ((h - nh) / 2, (w - nw) / 2);
    let mut data = vec![0.0; c * nh * nw];
    for ch in 0..c {
        for y in 0..nh {
            for x in 0..nw {
                data[(ch * nh + y) * nw + x] = t.data()[(ch * h + y + oy) * w + x + ox];
            }
        }
    }
    Tensor::new(vec![c, nh, nw], data)
}

fn load_one(image_path: &Path, mask_path: &Path, center_crop: bool) -> Result<SamplePair> {
    let image = pnm::read(image_path)?.to_tensor()?;
    let mask = pnm::read(mask_path)?.to_tensor()?;
    let (mc, mh, mw) = mask.dims3()?;
    let (_, ih, iw) = image.dims3()?;
    if mc != 1 {
        return Err(Error::Format("mask must be grayscale".into()));
    }
    if (mh, mw) != (ih, iw) {
        return Err(Error::ShapeMismatch(format!("image {ih}x{iw} vs mask {mh}x{mw}")));
    }
    let (image, mask) = if center_crop {
        (crop_to_multiple(image, 16)?, crop_to_multiple(mask, 16)?)
    } else {
        if ih % 16 != 0 || iw % 16 != 0 {
            return Err(Error::InvalidArg(format!("size {ih}x{iw} not divisible by 16")));
        }
        (image, mask)
    };
    let mask_data: Vec<f64> = mask.data().iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
    let shape = mask.shape().to_vec();
    let id = image_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("sample")
        .to_string();
    Ok(SamplePair { image, mask: Tensor::new(shape, mask_data)?, id })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forced_count_on_tight_band() {
        // ratio [0.25, 0.25] on a 4x4 grid must yield exactly 4 lesion pixels
        let spec = SynthSpec { size: 16, ratio_range: (0.25, 0.25), ..Default::default() };
        // size must be multiple of 16; use 16x16 -> 64 pixels
        let pair = gen_pair(&spec, 0).unwrap();
        let count: f64 = pair.mask.data().iter().sum();
        assert_eq!(count, 64.0);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SynthSpec::default();
        let a = gen_pair(&spec, 3).unwrap();
        let b = gen_pair(&spec, 3).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.mask, b.mask);
    }

    #[test]
    fn masks_are_binary_and_in_band() {
        let spec = SynthSpec::default();
        for i in 0..20 {
            let p = gen_pair(&spec, i).unwrap();
            assert!(p.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
            let r = p.lesion_ratio();
            assert!(r >= 0.02 - 1e-12 && r <= 0.10 + 1e-12, "ratio {r} out of band");
        }
    }

    #[test]
    fn unreachable_ratio_is_an_error() {
        let spec = SynthSpec { size: 16, ratio_range: (0.0101, 0.0102), ..Default::default() };
        // 256 pixels: ceil(2.59) = 3 > floor(2.61) = 2
        assert!(gen_pair(&spec, 0).is_err());
    }

    #[test]
    fn split_is_disjoint_and_stable() {
        let spec = SynthSpec::default();
        let pairs = gen_dataset(&spec, 50).unwrap();
        let n = pairs.len();
        let (train, val) = split_dataset(spec.seed, pairs);
        assert_eq!(train.len() + val.len(), n);
        assert!(!val.is_empty() && !train.is_empty());
        for i in 0..n {
            assert_eq!(is_validation(spec.seed, i), is_validation(spec.seed, i));
        }
    }

    #[test]
    fn empty_directories_load_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = dir.path().join("images");
        let masks = dir.path().join("masks");
        std::fs::create_dir_all(&imgs).unwrap();
        std::fs::create_dir_all(&masks).unwrap();
        let out = load_pair_dir(&imgs, &masks, false).unwrap();
        assert!(out.pairs.is_empty());
        assert!(out.errors.is_empty());
    }

    #[test]
    fn roundtrip_through_pnm_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = dir.path().join("images");
        let masks = dir.path().join("masks");
        std::fs::create_dir_all(&imgs).unwrap();
        std::fs::create_dir_all(&masks).unwrap();
        let spec = SynthSpec { size: 32, ..Default::default() };
        let pair = gen_pair(&spec, 0).unwrap();
        pnm::write(&imgs.join("a.pgm"), &pnm::PnmImage::from_tensor(&pair.image).unwrap()).unwrap();
        pnm::write(&masks.join("a.pgm"), &pnm::PnmImage::from_tensor(&pair.mask).unwrap()).unwrap();
        let out = load_pair_dir(&imgs, &masks, false).unwrap();
        assert!(out.errors.is_empty(), "{:?}", out.errors);
        assert_eq!(out.pairs.len(), 1);
        let loaded = &out.pairs[0];
        for (a, b) in pair.image.data().iter().zip(loaded.image.data()) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-9);
        }
        assert_eq!(pair.mask, loaded.mask);
    }

    #[test]
    fn orphans_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = dir.path().join("images");
        let masks = dir.path().join("masks");
        std::fs::create_dir_all(&imgs).unwrap();
        std::fs::create_dir_all(&masks).unwrap();
        let img = pnm::PnmImage::gray(16, 16, vec![0; 256]);
        pnm::write(&imgs.join("only.pgm"), &img).unwrap();
        let out = load_pair_dir(&imgs, &masks, false).unwrap();
        assert!(out.pairs.is_empty());
        assert_eq!(out.errors.len(), 1);
    }
}
