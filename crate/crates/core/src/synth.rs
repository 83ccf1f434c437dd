//! Seeded phantom radiographs with planted plaque-like calcification
//! clusters and smooth cartilage-like confusers.
//!
//! The phantoms carry just enough structure to exercise the pipeline: a
//! smooth background, bright vertebral bands at both lateral edges, a
//! mandible-like arc, sensor noise, irregular bright clusters inside the
//! canonical carotid region on either side, and unannotated smooth ellipses
//! just outside it.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{save_manifest, Annotation, AnnotationEntry, ImageEntry, Manifest, PanoramicImage, PixelBox, Side};
use crate::error::{Error, Result};
use crate::raster::{write_png, BitDepth, Raster};
use crate::seed::derive_seed;

/// Minimum intensity lift of planted cluster pixels over the surrounding
/// background.
pub const MIN_CONTRAST: f64 = 0.25;

/// Rectangle given as fractions of the frame, `[x0, y0, x1, y1]`, for the left
/// side; the right side is its mirror image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionFractions(pub [f64; 4]);

impl RegionFractions {
    /// Soft tissue of the neck below the mandibular angle, level with C3-C4.
    pub const CAROTID: RegionFractions = RegionFractions([0.10, 0.58, 0.26, 0.86]);

    pub fn to_box(self, side: Side, width: usize, height: usize) -> PixelBox {
        let [x0, y0, x1, y1] = self.0;
        let (w, h) = (width as f64, height as f64);
        match side {
            Side::Left => PixelBox::raw(x0 * w, y0 * h, x1 * w, y1 * h),
            Side::Right => PixelBox::raw((1.0 - x1) * w, y0 * h, (1.0 - x0) * w, y1 * h),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub has_acp: bool,
    /// Number of planted clusters when `has_acp`, 1 to 3.
    pub n_acp_components: usize,
    pub acp_region: RegionFractions,
    pub confuser_probability: f64,
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            id: "phantom".into(),
            width: 512,
            height: 256,
            has_acp: true,
            n_acp_components: 1,
            acp_region: RegionFractions::CAROTID,
            confuser_probability: 0.5,
            noise_level: 0.3,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    fn validate(&self) -> Result<()> {
        let [x0, y0, x1, y1] = self.acp_region.0;
        let inside = [x0, y0, x1, y1].iter().all(|v| (0.0..=1.0).contains(v));
        if !inside || x0 >= x1 || y0 >= y1 || x1 > 0.5 {
            return Err(Error::Validation(format!(
                "acp_region {:?} must be a non-empty rectangle inside the left half of the frame",
                self.acp_region.0
            )));
        }
        if self.width < 64 || self.height < 64 {
            return Err(Error::Validation(format!("phantom must be at least 64x64, got {}x{}", self.width, self.height)));
        }
        if self.has_acp && !(1..=3).contains(&self.n_acp_components) {
            return Err(Error::Validation(format!("n_acp_components must be 1..=3, got {}", self.n_acp_components)));
        }
        if !(0.0..=1.0).contains(&self.confuser_probability) || !(0.0..=1.0).contains(&self.noise_level) {
            return Err(Error::Validation("confuser_probability and noise_level must lie in [0, 1]".into()));
        }
        let region = self.acp_region.to_box(Side::Left, self.width, self.height);
        if region.width() < 24.0 || region.height() < 24.0 {
            return Err(Error::Validation("acp_region is too small for a cluster".into()));
        }
        Ok(())
    }
}

/// Pixel mask of one planted cluster.
#[derive(Debug, Clone)]
struct Cluster {
    pixels: Vec<(usize, usize)>,
    bbox: PixelBox,
}

fn background(w: usize, h: usize, x: usize, y: usize) -> f64 {
    let (u, v) = ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
    let mut value = 0.16 + 0.10 * (1.0 - v) + 0.04 * (PI * (u - 0.5)).cos();
    // Dentition: bright band across the upper middle.
    value += 0.30 * (-((u - 0.5) / 0.22).powi(2) - ((v - 0.38) / 0.12).powi(2)).exp();
    // Cervical spine ghosts at both lateral edges, segmented into vertebrae.
    let edge = u.min(1.0 - u);
    if edge < 0.055 && v > 0.25 {
        let segment = (v * 7.0).fract();
        value += if segment < 0.72 { 0.30 } else { 0.10 };
    }
    // Mandible lower border.
    let dx = u - 0.5;
    if dx.abs() < 0.3 {
        let arc = 0.35 + 0.40 * (1.0 - (dx / 0.3).powi(2));
        let d = (v - arc).abs();
        if d < 0.02 {
            value += 0.22 * (1.0 - d / 0.02);
        }
    }
    value
}

fn irregular_cluster(rng: &mut ChaCha8Rng, region: &PixelBox, taken: &[PixelBox]) -> Option<Cluster> {
    for _ in 0..64 {
        let parts = rng.random_range(2..=4);
        let spread = rng.random_range(3.0..7.0);
        let reach = spread + 6.5;
        if region.width() <= 2.0 * reach || region.height() <= 2.0 * reach {
            return None;
        }
        let cx = rng.random_range(region.x_min + reach..region.x_max - reach);
        let cy = rng.random_range(region.y_min + reach..region.y_max - reach);
        let blobs: Vec<(f64, f64, f64, f64, f64, f64)> = (0..parts)
            .map(|_| {
                let ox = cx + rng.random_range(-spread..=spread);
                let oy = cy + rng.random_range(-spread..=spread);
                let rx = rng.random_range(2.0..5.0);
                let ry = rng.random_range(2.0..5.0);
                let phase = rng.random_range(0.0..2.0 * PI);
                let wobble = rng.random_range(0.1..0.3);
                (ox, oy, rx, ry, phase, wobble)
            })
            .collect();
        let (x_lo, x_hi) = ((cx - reach).floor() as usize, (cx + reach).ceil() as usize);
        let (y_lo, y_hi) = ((cy - reach).floor() as usize, (cy + reach).ceil() as usize);
        let mut pixels = Vec::new();
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let hit = blobs.iter().any(|&(ox, oy, rx, ry, phase, wobble)| {
                    let (dx, dy) = ((px - ox) / rx, (py - oy) / ry);
                    let r = (dx * dx + dy * dy).sqrt();
                    let theta = dy.atan2(dx);
                    r <= 1.0 + wobble * (3.0 * theta + phase).sin()
                });
                if hit {
                    pixels.push((x, y));
                }
            }
        }
        if pixels.is_empty() {
            continue;
        }
        let bbox = tight_box(&pixels);
        if region.contains_box(&bbox) && taken.iter().all(|t| t.expand(3.0).intersection(&bbox).is_none()) {
            return Some(Cluster { pixels, bbox });
        }
    }
    None
}

fn tight_box(pixels: &[(usize, usize)]) -> PixelBox {
    let x0 = pixels.iter().map(|p| p.0).min().unwrap_or(0);
    let x1 = pixels.iter().map(|p| p.0).max().unwrap_or(0);
    let y0 = pixels.iter().map(|p| p.1).min().unwrap_or(0);
    let y1 = pixels.iter().map(|p| p.1).max().unwrap_or(0);
    PixelBox::raw(x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64)
}

/// Renders one phantom and its annotation.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(PanoramicImage, Annotation)> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut img: Vec<f64> = (0..w * h).map(|i| background(w, h, i % w, i / w)).collect();

    let mut boxes = Vec::new();
    if spec.has_acp {
        for _ in 0..spec.n_acp_components {
            let side = if rng.random::<bool>() { Side::Left } else { Side::Right };
            let region = spec.acp_region.to_box(side, w, h);
            let Some(cluster) = irregular_cluster(&mut rng, &region, &boxes) else {
                continue;
            };
            let contrast = rng.random_range(0.32..0.42);
            for &(x, y) in &cluster.pixels {
                let lift = contrast * rng.random_range(0.85..1.0);
                img[y * w + x] += lift;
            }
            boxes.push(cluster.bbox);
        }
        if boxes.is_empty() {
            return Err(Error::Validation("acp_region could not hold a cluster".into()));
        }
    }

    if rng.random::<f64>() < spec.confuser_probability {
        let side = if rng.random::<bool>() { Side::Left } else { Side::Right };
        let region = spec.acp_region.to_box(side, w, h);
        let (rx, ry) = (rng.random_range(5.0..8.0), rng.random_range(3.0..5.0));
        let cx = rng.random_range(region.x_min + rx..region.x_max - rx);
        let gap = rng.random_range(2.0..14.0);
        let cy = region.y_min - gap - ry;
        let contrast = rng.random_range(0.30..0.40);
        let (x_lo, x_hi) = ((cx - 2.0 * rx).max(0.0) as usize, ((cx + 2.0 * rx) as usize).min(w - 1));
        let (y_lo, y_hi) = ((cy - 2.0 * ry).max(0.0) as usize, ((cy + ry) as usize).min(h - 1));
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let (dx, dy) = ((x as f64 + 0.5 - cx) / rx, (y as f64 + 0.5 - cy) / ry);
                let r2 = dx * dx + dy * dy;
                // Smooth falloff, confined above the carotid region.
                if r2 < 1.0 && (y as f64) + 1.0 <= region.y_min {
                    img[y * w + x] += contrast * (1.0 - r2).sqrt();
                }
            }
        }
    }

    let sigma = 0.04 * spec.noise_level;
    if sigma > 0.0 {
        let noise = Normal::new(0.0, sigma).expect("finite sigma");
        for v in img.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }

    let pixels = Raster::from_vec(w, h, img.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect())?;
    let image = PanoramicImage::new(spec.id.clone(), pixels, "phantom", BitDepth::Sixteen)?;
    let annotation = Annotation {
        image_id: spec.id.clone(),
        boxes,
        annotator_ids: vec!["phantom-a".into(), "phantom-b".into()],
        consensus: true,
    };
    Ok((image, annotation))
}

/// Dataset-level generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub confuser_probability: f64,
    pub acp_region: RegionFractions,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { width: 512, height: 256, confuser_probability: 0.6, acp_region: RegionFractions::CAROTID }
    }
}

/// Two simulated scanners that differ in noise and stored bit depth.
const DEVICES: [(&str, f64, BitDepth); 2] =
    [("phantom-device-a", 0.3, BitDepth::Eight), ("phantom-device-b", 0.6, BitDepth::Sixteen)];

/// Number of positive images for `n` images at `prevalence`.
pub fn positive_count(n: usize, prevalence: f64) -> usize {
    ((prevalence * n as f64).round() as usize).min(n)
}

/// Writes `n` phantom PNGs under `out_dir/images` plus `out_dir/manifest.json`.
pub fn generate_dataset(n: usize, prevalence: f64, seed: u64, out_dir: &Path, config: &SynthConfig) -> Result<Manifest> {
    if !(0.0..=1.0).contains(&prevalence) {
        return Err(Error::Validation(format!("prevalence {prevalence} outside [0, 1]")));
    }
    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut positive = vec![false; n];
    for &i in &order[..positive_count(n, prevalence)] {
        positive[i] = true;
    }

    let items: Vec<(ImageEntry, AnnotationEntry)> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<(ImageEntry, AnnotationEntry)> {
            let item_seed = derive_seed(seed, i as u64);
            let (device, noise, depth) = DEVICES[i % DEVICES.len()];
            let id = format!("phantom_{i:04}");
            let spec = PhantomSpec {
                id: id.clone(),
                width: config.width,
                height: config.height,
                has_acp: positive[i],
                n_acp_components: 1 + (item_seed % 3) as usize,
                acp_region: config.acp_region,
                confuser_probability: config.confuser_probability,
                noise_level: noise,
                seed: item_seed,
            };
            let (image, annotation) = generate_phantom(&spec)?;
            let rel = Path::new("images").join(format!("{id}.png"));
            write_png(&image.pixels, depth, &out_dir.join(&rel))?;
            let entry = ImageEntry { id, path: rel, device_tag: device.into(), width: image.width(), height: image.height() };
            Ok((entry, AnnotationEntry::from(&annotation)))
        })
        .collect::<Result<_>>()?;

    let (images, annotations) = items.into_iter().unzip();
    let manifest = Manifest { version: crate::corpus::MANIFEST_VERSION, images, annotations };
    save_manifest(&manifest, &out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::load_manifest;

    fn spec(has_acp: bool, seed: u64) -> PhantomSpec {
        PhantomSpec { has_acp, n_acp_components: 3, seed, ..Default::default() }
    }

    #[test]
    fn negative_has_no_boxes() {
        let (_, ann) = generate_phantom(&spec(false, 4)).unwrap();
        assert!(ann.boxes.is_empty());
    }

    #[test]
    fn deterministic_in_seed() {
        let (a, aa) = generate_phantom(&spec(true, 9)).unwrap();
        let (b, bb) = generate_phantom(&spec(true, 9)).unwrap();
        assert_eq!(a.pixels.data(), b.pixels.data());
        assert_eq!(aa, bb);
        let (c, _) = generate_phantom(&spec(true, 10)).unwrap();
        assert_ne!(a.pixels.data(), c.pixels.data());
    }

    #[test]
    fn boxes_inside_region_and_contrasted() {
        for seed in 0..40 {
            let s = spec(true, seed);
            let (img, ann) = generate_phantom(&s).unwrap();
            assert!(!ann.boxes.is_empty() && ann.boxes.len() <= 3);
            for b in &ann.boxes {
                let side = Side::of_box(b, s.width as f64);
                assert!(s.acp_region.to_box(side, s.width, s.height).contains_box(b));
                let (inner, ring) = box_and_ring_means(&img.pixels, b, 4);
                // The box also holds some background between blob lobes, so
                // measure the brightest pixels against the ring.
                assert!(inner - ring >= MIN_CONTRAST, "seed {seed}: {inner} vs {ring}");
            }
        }
    }

    /// Mean of box pixels brighter than the box midrange, and mean of the ring.
    fn box_and_ring_means(r: &Raster<f32>, b: &PixelBox, ring: usize) -> (f64, f64) {
        let (x0, y0, x1, y1) = (b.x_min as usize, b.y_min as usize, b.x_max as usize, b.y_max as usize);
        let inside: Vec<f64> = (y0..y1).flat_map(|y| (x0..x1).map(move |x| (x, y))).map(|(x, y)| r.get(x, y) as f64).collect();
        let lo = inside.iter().cloned().fold(f64::MAX, f64::min);
        let hi = inside.iter().cloned().fold(f64::MIN, f64::max);
        let bright: Vec<f64> = inside.iter().cloned().filter(|&v| v > 0.5 * (lo + hi)).collect();
        let mut ring_vals = Vec::new();
        for y in y0.saturating_sub(ring)..(y1 + ring).min(r.height()) {
            for x in x0.saturating_sub(ring)..(x1 + ring).min(r.width()) {
                if !(x >= x0 && x < x1 && y >= y0 && y < y1) {
                    ring_vals.push(r.get(x, y) as f64);
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        (mean(&bright), mean(&ring_vals))
    }

    #[test]
    fn region_outside_frame_rejected() {
        let s = PhantomSpec { acp_region: RegionFractions([0.1, 0.6, 0.3, 1.2]), ..Default::default() };
        assert!(generate_phantom(&s).is_err());
    }

    #[test]
    fn positive_count_rounding() {
        assert_eq!(positive_count(65, 0.67), 44);
        assert_eq!(positive_count(0, 0.67), 0);
        assert_eq!(positive_count(10, 1.0), 10);
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(6, 0.5, 3, dir.path(), &SynthConfig::default()).unwrap();
        assert_eq!(m.images.len(), 6);
        assert_eq!(m.annotations.iter().filter(|a| !a.boxes.is_empty()).count(), 3);
        let corpus = load_manifest(&dir.path().join("manifest.json")).unwrap();
        let img = corpus.images[1].load().unwrap();
        assert_eq!(img.bit_depth_source, BitDepth::Sixteen);
        assert_eq!(corpus.images[0].load().unwrap().bit_depth_source, BitDepth::Eight);

        let dir2 = tempfile::tempdir().unwrap();
        let m2 = generate_dataset(6, 0.5, 3, dir2.path(), &SynthConfig::default()).unwrap();
        assert_eq!(m, m2);
        let a = fs::read(dir.path().join("images/phantom_0002.png")).unwrap();
        let b = fs::read(dir2.path().join("images/phantom_0002.png")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(0, 0.67, 1, dir.path(), &SynthConfig::default()).unwrap();
        assert!(m.images.is_empty());
    }
}
