//! Synthetic phantom generation, dataset loading, and split construction.
//!
//! Phantoms mimic the task shape of intrapartum ultrasound: one large
//! ellipse ("fetal head", class 2), one small adjacent ellipse ("pubic
//! symphysis", class 1), multiplicative speckle, and a low-intensity
//! shadow wedge. Intensity ranges of the two structures overlap, so
//! thresholding alone cannot solve the task.
//!
//! All outputs are pure functions of their seeds.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{mix, rng_from};
use crate::tensor::Tensor;

pub const DEFAULT_NUM_CLASSES: usize = 3;

/// Fractions of min(H, W) bounding the fetal-head semi-axes.
const FH_AXIS_RANGE: (f64, f64) = (0.15, 0.35);
/// Fractions of min(H, W) bounding the pubic-symphysis semi-axes.
const PS_AXIS_RANGE: (f64, f64) = (0.04, 0.10);
const BG_INTENSITY: f64 = 0.20;
/// Interior intensity ranges deliberately overlap between the two
/// structures; separating them requires shape context.
const FH_INTENSITY: (f64, f64) = (0.50, 0.80);
const PS_INTENSITY: (f64, f64) = (0.65, 0.95);
const SPECKLE_STRENGTH: f64 = 0.35;
const SHADOW_ATTENUATION: (f64, f64) = (0.50, 0.80);
/// Soft-rim half-width in normalized ellipse-distance units.
const RIM_WIDTH: f64 = 0.15;

const SPLIT_SALT: u64 = 0x73_70_6c_69_74;

#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Row-major class indices, each < num_classes.
    pub labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, num_classes: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::InvalidArgument(format!(
                "mask label count {} does not match {height}x{width}",
                labels.len()
            )));
        }
        if let Some(&v) = labels.iter().find(|&&v| (v as usize) >= num_classes) {
            return Err(Error::ClassOutOfRange {
                cls: v as usize,
                num_classes,
            });
        }
        Ok(LabelMask {
            height,
            width,
            num_classes,
            labels,
        })
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// One-hot encoding as a `[C, H, W]` tensor.
    pub fn one_hot(&self) -> Tensor {
        let hw = self.height * self.width;
        let mut data = vec![0.0; self.num_classes * hw];
        for (i, &v) in self.labels.iter().enumerate() {
            data[v as usize * hw + i] = 1.0;
        }
        Tensor::new(vec![self.num_classes, self.height, self.width], data)
    }

    /// Pixel count of one class.
    pub fn class_count(&self, cls: u8) -> usize {
        self.labels.iter().filter(|&&v| v == cls).count()
    }
}

#[derive(Debug, Clone)]
pub struct ImageSample {
    pub id: String,
    /// `[1, H, W]` grayscale intensities in [0, 1].
    pub pixels: Tensor,
    pub mask: Option<LabelMask>,
}

impl ImageSample {
    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    /// Training samples with masks (size N).
    pub labeled: Vec<ImageSample>,
    /// Training samples with masks stripped (size M).
    pub unlabeled: Vec<ImageSample>,
    pub val: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
    pub seed: u64,
}

/// Flat-key generator configuration, persisted as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub height: usize,
    pub width: usize,
    pub count: usize,
    pub labeled_fraction: f64,
    pub seed: u64,
    pub noise_amplitude: f64,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

fn default_val_fraction() -> f64 {
    0.1
}

fn default_test_fraction() -> f64 {
    0.2
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            height: 64,
            width: 64,
            count: 286,
            labeled_fraction: 0.2,
            seed: 1,
            noise_amplitude: 0.2,
            val_fraction: 0.1,
            test_fraction: 0.2,
        }
    }
}

impl GeneratorConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serialize generator config: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    /// Normalized squared ellipse distance: ≤ 1 inside, 1 on the boundary.
    fn quad(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let (s, c) = self.theta.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u * u) / (self.a * self.a) + (v * v) / (self.b * self.b)
    }

    /// Boundary radius along direction phi from the centre.
    fn radius_along(&self, phi: f64) -> f64 {
        let (s, c) = (phi - self.theta).sin_cos();
        self.a * self.b / ((self.b * c).powi(2) + (self.a * s).powi(2)).sqrt()
    }

    /// Axis-aligned half-extents of the rotated ellipse.
    fn extents(&self) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        let ex = ((self.a * c).powi(2) + (self.b * s).powi(2)).sqrt();
        let ey = ((self.a * s).powi(2) + (self.b * c).powi(2)).sqrt();
        (ex, ey)
    }

    fn fits(&self, height: usize, width: usize, margin: f64) -> bool {
        let (ex, ey) = self.extents();
        self.cx - ex >= margin
            && self.cx + ex <= width as f64 - 1.0 - margin
            && self.cy - ey >= margin
            && self.cy + ey <= height as f64 - 1.0 - margin
    }
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Soft interior weight: 1 deep inside, 0 outside the rim band.
fn rim_weight(quad: f64) -> f64 {
    smoothstep((1.0 + RIM_WIDTH - quad) / (2.0 * RIM_WIDTH))
}

/// Generate one phantom image with its ground-truth mask.
pub fn generate_phantom(seed: u64, height: usize, width: usize) -> Result<ImageSample> {
    if height < 32 || width < 32 {
        return Err(Error::FrameTooSmall {
            height,
            width,
            min: 32,
        });
    }
    let mut rng = rng_from(mix(&[seed, 0x7068_616e_746f_6d]));
    let scale = height.min(width) as f64;

    // Shape placement. The analytic distance proposal keeps the small
    // ellipse adjacent to the large one; the exact grid check below is the
    // actual no-overlap guarantee.
    let (fh, ps) = 'outer: loop {
        let fh = loop {
            let e = Ellipse {
                a: rng.random_range(FH_AXIS_RANGE.0..FH_AXIS_RANGE.1) * scale,
                b: rng.random_range(FH_AXIS_RANGE.0..FH_AXIS_RANGE.1) * scale,
                theta: rng.random_range(0.0..std::f64::consts::PI),
                cx: rng.random_range(0.0..width as f64),
                cy: rng.random_range(0.0..height as f64),
            };
            if e.fits(height, width, 2.0) {
                break e;
            }
        };
        for _ in 0..250 {
            let a = rng.random_range(PS_AXIS_RANGE.0..PS_AXIS_RANGE.1) * scale;
            let b = rng.random_range(PS_AXIS_RANGE.0..PS_AXIS_RANGE.1) * scale;
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let phi = rng.random_range(0.0..std::f64::consts::TAU);
            let gap = rng.random_range(1.0..3.0);
            let dist = fh.radius_along(phi) + a.max(b) + gap;
            let ps = Ellipse {
                cx: fh.cx + dist * phi.cos(),
                cy: fh.cy + dist * phi.sin(),
                a,
                b,
                theta,
            };
            if !ps.fits(height, width, 1.0) {
                continue;
            }
            let mut overlap = false;
            let mut ps_pixels = 0usize;
            for y in 0..height {
                for x in 0..width {
                    if ps.quad(x as f64, y as f64) <= 1.0 {
                        ps_pixels += 1;
                        if fh.quad(x as f64, y as f64) <= 1.0 {
                            overlap = true;
                        }
                    }
                }
            }
            if !overlap && ps_pixels > 0 {
                break 'outer (fh, ps);
            }
        }
        // Could not seat the small ellipse next to this large one; redraw.
    };

    let fh_intensity = rng.random_range(FH_INTENSITY.0..FH_INTENSITY.1);
    let ps_intensity = rng.random_range(PS_INTENSITY.0..PS_INTENSITY.1);

    // Speckle field: blurred unit normals, applied multiplicatively.
    let mut speckle = vec![0.0f64; height * width];
    for v in speckle.iter_mut() {
        let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.random_range(0.0..1.0);
        *v = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
    }
    box_blur3(&mut speckle, height, width);
    box_blur3(&mut speckle, height, width);

    // Shadow wedge from a random apex on the top edge, pointing down.
    let apex_x = rng.random_range(0.2 * width as f64..0.8 * width as f64);
    let shadow_dir = rng.random_range(75f64.to_radians()..105f64.to_radians());
    let shadow_half = rng.random_range(10f64.to_radians()..20f64.to_radians());
    let shadow_soft = 4f64.to_radians();
    let attenuation = rng.random_range(SHADOW_ATTENUATION.0..SHADOW_ATTENUATION.1);

    let mut pixels = vec![0.0f64; height * width];
    let mut labels = vec![0u8; height * width];
    for y in 0..height {
        for x in 0..width {
            let (fx, fy) = (x as f64, y as f64);
            let qf = fh.quad(fx, fy);
            let qp = ps.quad(fx, fy);
            let wf = rim_weight(qf);
            let wp = rim_weight(qp);
            let mut v = BG_INTENSITY * (1.0 - wf) + fh_intensity * wf;
            v = v * (1.0 - wp) + ps_intensity * wp;
            v *= 1.0 + SPECKLE_STRENGTH * speckle[y * width + x];
            let ang = (fy + 0.5).atan2(fx - apex_x);
            let delta = (ang - shadow_dir).abs();
            if delta < shadow_half {
                let edge = (shadow_half - delta) / shadow_soft;
                let t = smoothstep(edge);
                v *= 1.0 - (1.0 - attenuation) * t;
            }
            pixels[y * width + x] = v.clamp(0.0, 1.0);
            if qp <= 1.0 {
                labels[y * width + x] = 1;
            } else if qf <= 1.0 {
                labels[y * width + x] = 2;
            }
        }
    }

    let mask = LabelMask::new(height, width, DEFAULT_NUM_CLASSES, labels)?;
    debug_assert!(mask.class_count(1) > 0 && mask.class_count(2) > 0);
    Ok(ImageSample {
        id: format!("phantom-{seed:016x}"),
        pixels: Tensor::new(vec![1, height, width], pixels),
        mask: Some(mask),
    })
}

fn box_blur3(field: &mut [f64], height: usize, width: usize) {
    let src = field.to_vec();
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            let mut n = 0.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                    if yy >= 0 && yy < height as i64 && xx >= 0 && xx < width as i64 {
                        acc += src[yy as usize * width + xx as usize];
                        n += 1.0;
                    }
                }
            }
            field[y * width + x] = acc / n;
        }
    }
}

/// Generate `config.count` phantoms with per-sample seeds derived from the
/// master seed.
pub fn generate_dataset(config: &GeneratorConfig) -> Result<Vec<ImageSample>> {
    (0..config.count)
        .map(|i| generate_phantom(mix(&[config.seed, i as u64]), config.height, config.width))
        .collect()
}

/// Add i.i.d. uniform noise in [-amplitude, +amplitude], then clamp to [0, 1].
pub fn perturb(pixels: &Tensor, seed: u64, amplitude: f64) -> Tensor {
    assert!(amplitude >= 0.0, "noise amplitude must be non-negative");
    if amplitude == 0.0 {
        return pixels.clone();
    }
    let mut rng = rng_from(seed);
    pixels.map(|v| (v + rng.random_range(-amplitude..=amplitude)).clamp(0.0, 1.0))
}

/// Partition samples into labeled / unlabeled / val / test pools.
///
/// Test and validation sizes are rounded from the requested fractions of
/// the total; the labeled fraction applies to the remaining training
/// portion, rounded up. Only samples that carry masks are eligible for
/// the labeled, val, and test pools; maskless samples always land in the
/// unlabeled pool. Masks are stripped from the unlabeled pool.
pub fn make_split(
    samples: Vec<ImageSample>,
    labeled_fraction: f64,
    seed: u64,
    val_fraction: f64,
    test_fraction: f64,
) -> Result<DatasetSplit> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("make_split sample list"));
    }
    if !(labeled_fraction > 0.0 && labeled_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "labeled_fraction must be in (0, 1], got {labeled_fraction}"
        )));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0 && test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(
            "val_fraction and test_fraction must each be in (0, 1)".into(),
        ));
    }
    if val_fraction + test_fraction >= 1.0 {
        return Err(Error::InvalidArgument(
            "val_fraction + test_fraction must leave room for training data".into(),
        ));
    }
    let n = samples.len();
    let n_test = (test_fraction * n as f64).round() as usize;
    let n_val = (val_fraction * n as f64).round() as usize;
    let n_train = n - n_test - n_val;
    if n_train == 0 {
        return Err(Error::InvalidArgument(
            "no samples left for training after val/test allocation".into(),
        ));
    }

    let mut masked: Vec<usize> = Vec::new();
    let mut maskless: Vec<usize> = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if s.mask.is_some() {
            masked.push(i);
        } else {
            maskless.push(i);
        }
    }
    if masked.len() < n_test + n_val {
        return Err(Error::InvalidArgument(format!(
            "only {} masked samples available but val+test requires {}",
            masked.len(),
            n_test + n_val
        )));
    }
    let mut rng = rng_from(mix(&[seed, SPLIT_SALT]));
    // Fisher-Yates over the masked indices; maskless order is irrelevant.
    for i in (1..masked.len()).rev() {
        let j = rng.random_range(0..=i);
        masked.swap(i, j);
    }

    let test_ids: Vec<usize> = masked[..n_test].to_vec();
    let val_ids: Vec<usize> = masked[n_test..n_test + n_val].to_vec();
    let train_masked: Vec<usize> = masked[n_test + n_val..].to_vec();
    let n_labeled = (labeled_fraction * n_train as f64).ceil() as usize;
    if n_labeled == 0 {
        return Err(Error::EmptyLabeledPool);
    }
    if n_labeled > train_masked.len() {
        return Err(Error::InvalidArgument(format!(
            "labeled pool needs {n_labeled} masked samples but only {} are in the training portion",
            train_masked.len()
        )));
    }

    let mut pool: Vec<Option<ImageSample>> = samples.into_iter().map(Some).collect();
    let mut take = |idx: usize| pool[idx].take().expect("sample taken twice");

    let test: Vec<ImageSample> = test_ids.into_iter().map(&mut take).collect();
    let val: Vec<ImageSample> = val_ids.into_iter().map(&mut take).collect();
    let labeled: Vec<ImageSample> = train_masked[..n_labeled].iter().map(|&i| take(i)).collect();
    let mut unlabeled: Vec<ImageSample> = train_masked[n_labeled..]
        .iter()
        .chain(maskless.iter())
        .map(|&i| take(i))
        .collect();
    for s in unlabeled.iter_mut() {
        s.mask = None;
    }

    Ok(DatasetSplit {
        labeled,
        unlabeled,
        val,
        test,
        seed,
    })
}

/// Generate phantoms and split them per the same config.
pub fn split_from_config(config: &GeneratorConfig) -> Result<DatasetSplit> {
    let samples = generate_dataset(config)?;
    make_split(
        samples,
        config.labeled_fraction,
        config.seed,
        config.val_fraction,
        config.test_fraction,
    )
}

/// Load `images/*.png` (8-bit grayscale) with optional `masks/<stem>.png`
/// (pixel value = class index), matched by filename stem.
pub fn load_directory(path: &Path, num_classes: usize) -> Result<Vec<ImageSample>> {
    let images_dir = path.join("images");
    let masks_dir = path.join("masks");
    let mut stems: Vec<String> = Vec::new();
    let entries = std::fs::read_dir(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(&images_dir, e))?;
        let p = entry.path();
        if p.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    if stems.is_empty() {
        return Err(Error::EmptyDataset {
            path: path.to_path_buf(),
        });
    }
    stems.sort();

    let mut samples = Vec::with_capacity(stems.len());
    for stem in &stems {
        let img_path = images_dir.join(format!("{stem}.png"));
        let img = image::open(&img_path)
            .map_err(|e| Error::Image {
                path: img_path.clone(),
                source: e,
            })?
            .into_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let pixels: Vec<f64> = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();

        let mask_path = masks_dir.join(format!("{stem}.png"));
        let mask = if mask_path.exists() {
            let m = image::open(&mask_path)
                .map_err(|e| Error::Image {
                    path: mask_path.clone(),
                    source: e,
                })?
                .into_luma8();
            if (m.height() as usize, m.width() as usize) != (h, w) {
                return Err(Error::MaskShapeMismatch {
                    stem: stem.clone(),
                    image: (h, w),
                    mask: (m.height() as usize, m.width() as usize),
                });
            }
            if let Some(&v) = m.as_raw().iter().find(|&&v| (v as usize) >= num_classes) {
                return Err(Error::LabelOutOfRange {
                    stem: stem.clone(),
                    value: v,
                    num_classes,
                });
            }
            Some(LabelMask::new(h, w, num_classes, m.as_raw().clone())?)
        } else {
            None
        };

        samples.push(ImageSample {
            id: stem.clone(),
            pixels: Tensor::new(vec![1, h, w], pixels),
            mask,
        });
    }
    Ok(samples)
}

/// Write samples as `images/<id>.png` + `masks/<id>.png` (when labeled).
pub fn save_dataset(dir: &Path, samples: &[ImageSample]) -> Result<()> {
    let images_dir = dir.join("images");
    let masks_dir = dir.join("masks");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    std::fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;
    for s in samples {
        let (h, w) = (s.height(), s.width());
        let bytes: Vec<u8> = s
            .pixels
            .data()
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        let img = image::GrayImage::from_raw(w as u32, h as u32, bytes)
            .expect("pixel buffer matches dimensions");
        let img_path = images_dir.join(format!("{}.png", s.id));
        img.save(&img_path).map_err(|e| Error::Image {
            path: img_path.clone(),
            source: e,
        })?;
        if let Some(mask) = &s.mask {
            let m = image::GrayImage::from_raw(w as u32, h as u32, mask.labels.clone())
                .expect("label buffer matches dimensions");
            let mask_path = masks_dir.join(format!("{}.png", s.id));
            m.save(&mask_path).map_err(|e| Error::Image {
                path: mask_path.clone(),
                source: e,
            })?;
        }
    }
    Ok(())
}

/// Content hash of a split: pool sizes, ids, pixel data, and masks, in a
/// canonical order. Identical hash implies byte-identical training data.
pub fn split_content_hash(split: &DatasetSplit) -> String {
    let mut hasher = Sha256::new();
    let mut eat_pool = |name: &str, pool: &[ImageSample]| {
        hasher.update(name.as_bytes());
        hasher.update((pool.len() as u64).to_le_bytes());
        for s in pool {
            hasher.update((s.id.len() as u64).to_le_bytes());
            hasher.update(s.id.as_bytes());
            for d in [s.height(), s.width()] {
                hasher.update((d as u64).to_le_bytes());
            }
            for &v in s.pixels.data() {
                hasher.update(v.to_le_bytes());
            }
            match &s.mask {
                Some(m) => {
                    hasher.update([1u8]);
                    hasher.update(&m.labels);
                }
                None => hasher.update([0u8]),
            }
        }
    };
    eat_pool("labeled", &split.labeled);
    eat_pool("unlabeled", &split.unlabeled);
    eat_pool("val", &split.val);
    eat_pool("test", &split.test);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Count of samples per pool, for manifests and logs.
pub fn split_summary(split: &DatasetSplit) -> BTreeMap<&'static str, usize> {
    BTreeMap::from([
        ("labeled", split.labeled.len()),
        ("unlabeled", split.unlabeled.len()),
        ("val", split.val.len()),
        ("test", split.test.len()),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn phantom_is_deterministic() {
        let a = generate_phantom(7, 64, 64).unwrap();
        let b = generate_phantom(7, 64, 64).unwrap();
        assert_eq!(a.pixels.data(), b.pixels.data());
        assert_eq!(a.mask.as_ref().unwrap().labels, b.mask.as_ref().unwrap().labels);
        assert_eq!(a.id, b.id);
    }

    #[test]
    fn phantom_seeds_differ() {
        let a = generate_phantom(0, 64, 64).unwrap();
        let b = generate_phantom(1, 64, 64).unwrap();
        let diff = a
            .mask
            .as_ref()
            .unwrap()
            .labels
            .iter()
            .zip(&b.mask.as_ref().unwrap().labels)
            .filter(|(x, y)| x != y)
            .count();
        assert!(diff >= 1);
    }

    #[test]
    fn phantom_respects_ranges_and_classes() {
        for seed in 0..20 {
            let s = generate_phantom(seed, 64, 64).unwrap();
            assert!(s.pixels.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            let mask = s.mask.as_ref().unwrap();
            assert!(mask.class_count(1) >= 1, "seed {seed} lacks class 1");
            assert!(mask.class_count(2) >= 1, "seed {seed} lacks class 2");
            assert!(mask.labels.iter().all(|&v| v <= 2));
        }
    }

    #[test]
    fn phantom_rejects_small_frames() {
        assert!(matches!(
            generate_phantom(0, 31, 64),
            Err(Error::FrameTooSmall { .. })
        ));
    }

    #[test]
    fn split_matches_contract_counts() {
        let samples = dummy_samples(100, true);
        let split = make_split(samples, 0.2, 5, 0.1, 0.2).unwrap();
        assert_eq!(split.labeled.len(), 14);
        assert_eq!(split.unlabeled.len(), 56);
        assert_eq!(split.val.len(), 10);
        assert_eq!(split.test.len(), 20);
    }

    #[test]
    fn split_full_labeled_fraction_empties_unlabeled() {
        let samples = dummy_samples(50, true);
        let split = make_split(samples, 1.0, 5, 0.1, 0.2).unwrap();
        assert!(split.unlabeled.is_empty());
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let a = make_split(dummy_samples(40, true), 0.3, 9, 0.1, 0.2).unwrap();
        let b = make_split(dummy_samples(40, true), 0.3, 9, 0.1, 0.2).unwrap();
        let ids = |pool: &[ImageSample]| pool.iter().map(|s| s.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&a.labeled), ids(&b.labeled));
        assert_eq!(ids(&a.unlabeled), ids(&b.unlabeled));
        assert_eq!(ids(&a.val), ids(&b.val));
        assert_eq!(ids(&a.test), ids(&b.test));

        let mut all: Vec<String> = vec![];
        for pool in [&a.labeled, &a.unlabeled, &a.val, &a.test] {
            all.extend(pool.iter().map(|s| s.id.clone()));
        }
        let set: BTreeSet<_> = all.iter().cloned().collect();
        assert_eq!(set.len(), 40, "pools overlap or drop samples");
    }

    #[test]
    fn split_strips_unlabeled_masks_and_errors_on_empty() {
        let split = make_split(dummy_samples(30, true), 0.2, 1, 0.1, 0.2).unwrap();
        assert!(split.unlabeled.iter().all(|s| s.mask.is_none()));
        assert!(split.labeled.iter().all(|s| s.mask.is_some()));
        assert!(matches!(
            make_split(vec![], 0.2, 1, 0.1, 0.2),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn split_forces_maskless_into_unlabeled() {
        let mut samples = dummy_samples(20, true);
        for s in samples.iter_mut().take(5) {
            s.mask = None;
        }
        let maskless_ids: BTreeSet<String> =
            samples.iter().take(5).map(|s| s.id.clone()).collect();
        let split = make_split(samples, 0.5, 3, 0.1, 0.2).unwrap();
        let unlabeled_ids: BTreeSet<String> =
            split.unlabeled.iter().map(|s| s.id.clone()).collect();
        assert!(maskless_ids.is_subset(&unlabeled_ids));
    }

    #[test]
    fn perturb_bounds() {
        let img = generate_phantom(3, 64, 64).unwrap().pixels;
        let noisy = perturb(&img, 11, 0.2);
        for (&o, &n) in img.data().iter().zip(noisy.data()) {
            assert!((0.0..=1.0).contains(&n));
            // Clamping can only shrink the deviation.
            assert!((n - o).abs() <= 0.2 + 1e-12);
        }
        let silent = perturb(&img, 11, 0.0);
        assert_eq!(silent.data(), img.data());

        let half = Tensor::full(vec![1, 8, 8], 0.5);
        let p = perturb(&half, 4, 0.2);
        assert!(p.data().iter().all(|&v| (0.3..=0.7).contains(&v)));
    }

    #[test]
    fn perturb_is_deterministic() {
        let img = generate_phantom(5, 64, 64).unwrap().pixels;
        assert_eq!(perturb(&img, 9, 0.2).data(), perturb(&img, 9, 0.2).data());
        assert_ne!(perturb(&img, 9, 0.2).data(), perturb(&img, 10, 0.2).data());
    }

    #[test]
    fn directory_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut samples: Vec<ImageSample> =
            (0..3).map(|i| generate_phantom(i, 32, 32).unwrap()).collect();
        samples[2].mask = None;
        save_dataset(dir.path(), &samples).unwrap();
        let loaded = load_directory(dir.path(), 3).unwrap();
        assert_eq!(loaded.len(), 3);
        assert_eq!(loaded.iter().filter(|s| s.mask.is_some()).count(), 2);
        // PNG storage is 8-bit; values round-trip to within half a step.
        let orig = &samples[0];
        let back = loaded.iter().find(|s| s.id == orig.id).unwrap();
        for (&a, &b) in orig.pixels.data().iter().zip(back.pixels.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-9);
        }
        let om = orig.mask.as_ref().unwrap();
        let bm = back.mask.as_ref().unwrap();
        assert_eq!(om.labels, bm.labels);
    }

    #[test]
    fn directory_errors() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("images")).unwrap();
        assert!(matches!(
            load_directory(dir.path(), 3),
            Err(Error::EmptyDataset { .. })
        ));

        // Mask with out-of-range class value.
        let s = generate_phantom(0, 32, 32).unwrap();
        save_dataset(dir.path(), &[s.clone()]).unwrap();
        let bad = image::GrayImage::from_raw(32, 32, vec![7u8; 32 * 32]).unwrap();
        bad.save(dir.path().join("masks").join(format!("{}.png", s.id)))
            .unwrap();
        assert!(matches!(
            load_directory(dir.path(), 3),
            Err(Error::LabelOutOfRange { value: 7, .. })
        ));

        // Mask with mismatched shape.
        let other = tempfile::tempdir().unwrap();
        save_dataset(other.path(), &[s.clone()]).unwrap();
        let small = image::GrayImage::from_raw(16, 16, vec![0u8; 256]).unwrap();
        small
            .save(other.path().join("masks").join(format!("{}.png", s.id)))
            .unwrap();
        assert!(matches!(
            load_directory(other.path(), 3),
            Err(Error::MaskShapeMismatch { .. })
        ));
    }

    #[test]
    fn generator_config_toml_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gen.toml");
        let cfg = GeneratorConfig {
            height: 48,
            width: 48,
            count: 10,
            labeled_fraction: 0.25,
            seed: 77,
            noise_amplitude: 0.15,
            val_fraction: 0.1,
            test_fraction: 0.2,
        };
        cfg.save(&path).unwrap();
        let back = GeneratorConfig::load(&path).unwrap();
        assert_eq!(back.height, 48);
        assert_eq!(back.seed, 77);
        assert!((back.labeled_fraction - 0.25).abs() < 1e-12);
    }

    #[test]
    fn split_hash_tracks_content() {
        let a = make_split(dummy_samples(20, true), 0.5, 3, 0.1, 0.2).unwrap();
        let b = make_split(dummy_samples(20, true), 0.5, 3, 0.1, 0.2).unwrap();
        assert_eq!(split_content_hash(&a), split_content_hash(&b));
        let c = make_split(dummy_samples(20, true), 0.5, 4, 0.1, 0.2).unwrap();
        assert_ne!(split_content_hash(&a), split_content_hash(&c));
    }

    fn dummy_samples(n: usize, with_masks: bool) -> Vec<ImageSample> {
        (0..n)
            .map(|i| {
                let mut labels = vec![0u8; 64];
                labels[i % 64] = 1;
                labels[(i + 7) % 64] = 2;
                ImageSample {
                    id: format!("sample-{i:04}"),
                    pixels: Tensor::full(vec![1, 8, 8], (i as f64 + 1.0) / (n as f64 + 1.0)),
                    mask: with_masks.then(|| LabelMask::new(8, 8, 3, labels).unwrap()),
                }
            })
            .collect()
    }
}
