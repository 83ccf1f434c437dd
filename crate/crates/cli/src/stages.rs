//! The pipeline stages behind each subcommand. Every stage reads its inputs
//! from the data and work directories and writes its artifacts back there.

use std::fs;
use std::path::{Path, PathBuf};

use acp_core::corpus::{
    compute_roi_spec_with_overrides, extract_rois, load_manifest, split_dataset, Annotation, Corpus, DatasetSplit,
    PanoramicImage, RoiSpec, Side,
};
use acp_core::detector::{infer, train, Checkpoint, Detection, Detector, LossRecord, TrainOptions, TrainOutcome};
use acp_core::eval::{write_roc_png, EvalReport};
use acp_core::pipeline::{evaluate, roi_samples, EvalUnit, ImageResult};
use acp_core::raster::{read_png, write_png, BitDepth, Raster};
use acp_core::synth::{generate_dataset, positive_count};
use image::{Rgb, RgbImage};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult};

/// File layout of the work directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn split(&self) -> PathBuf {
        self.root.join("split.json")
    }

    pub fn roi_spec(&self) -> PathBuf {
        self.root.join("roi_spec.json")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("model.ckpt")
    }

    pub fn loss_curve(&self) -> PathBuf {
        self.root.join("loss_curve.csv")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn report(&self) -> PathBuf {
        self.eval_dir().join("report.json")
    }

    pub fn annotations_log(&self) -> PathBuf {
        self.root.join("annotations.jsonl")
    }

    pub fn reviews_log(&self) -> PathBuf {
        self.root.join("reviews.jsonl")
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path, what: &'static str, stage: &'static str) -> CliResult<T> {
    if !path.exists() {
        return Err(CliError::MissingArtifact { what, path: path.to_path_buf(), stage });
    }
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    if !path.exists() {
        return Err(CliError::MissingCheckpoint(path.to_path_buf()));
    }
    Ok(Checkpoint::load(path)?)
}

pub fn load_corpus(cfg: &PipelineConfig) -> CliResult<Corpus> {
    Ok(load_manifest(&cfg.manifest_path())?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub manifest: PathBuf,
    pub n: usize,
    pub positives: usize,
}

pub fn run_synth(cfg: &PipelineConfig, n: usize, prevalence: f64, seed: u64, out_dir: &Path) -> CliResult<SynthSummary> {
    let manifest = generate_dataset(n, prevalence, seed, out_dir, &cfg.synth)?;
    let positives = manifest.annotations.iter().filter(|a| a.consensus && !a.boxes.is_empty()).count();
    debug_assert_eq!(positives, positive_count(n, prevalence));
    Ok(SynthSummary { manifest: out_dir.join("manifest.json"), n: manifest.images.len(), positives })
}

/// Splits the corpus and derives the ROI pair from the training split.
pub fn run_prepare(cfg: &PipelineConfig, seed: u64) -> CliResult<(DatasetSplit, RoiSpec)> {
    let corpus = load_corpus(cfg)?;
    let items: Vec<(String, bool)> = corpus.ids().into_iter().map(|id| {
        let positive = corpus.consensus_for(&id).has_acp();
        (id, positive)
    }).collect();
    let split = split_dataset(&items, cfg.split_fractions(), seed)?;
    let train_annotations: Vec<Annotation> = split.train.iter().map(|id| corpus.consensus_for(id)).collect();
    let dims = split
        .train
        .iter()
        .filter_map(|id| corpus.image(id))
        .fold((0, 0), |(w, h), r| (w.max(r.width), h.max(r.height)));
    let overrides = Side::BOTH.map(|s| cfg.roi.override_box(s));
    let spec = compute_roi_spec_with_overrides(&train_annotations, dims, cfg.roi.margin_px, overrides)?;
    let ws = Workspace::new(&cfg.paths.work_dir);
    write_json(&ws.split(), &split)?;
    write_json(&ws.roi_spec(), &spec)?;
    Ok((split, spec))
}

pub fn load_prepared(cfg: &PipelineConfig) -> CliResult<(DatasetSplit, RoiSpec)> {
    let ws = Workspace::new(&cfg.paths.work_dir);
    let split: DatasetSplit = read_json(&ws.split(), "split", "prepare")?;
    let spec: RoiSpec = read_json(&ws.roi_spec(), "ROI spec", "prepare")?;
    spec.validate()?;
    Ok((split, spec))
}

pub fn run_train(cfg: &PipelineConfig, serial: bool, progress: impl FnMut(&LossRecord)) -> CliResult<TrainOutcome> {
    let (split, spec) = load_prepared(cfg)?;
    let corpus = load_corpus(cfg)?;
    let train_samples = roi_samples(&corpus, &split.train, &spec)?;
    let val_samples = roi_samples(&corpus, &split.val, &spec)?;
    let options = TrainOptions { augment: cfg.augment.clone(), serial, split_seed: Some(split.seed) };
    let outcome = train::<f32>(&train_samples, &val_samples, &cfg.detector, &options, progress)?;
    let ws = Workspace::new(&cfg.paths.work_dir);
    outcome.checkpoint.save(&ws.checkpoint())?;
    fs::write(ws.loss_curve(), outcome.curve_csv()).map_err(|e| CliError::io(&ws.loss_curve(), e))?;
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub report: EvalReport,
    pub results: Vec<ImageResult>,
}

pub fn run_eval(cfg: &PipelineConfig, threshold: f64, unit: EvalUnit) -> CliResult<EvalReport> {
    let ws = Workspace::new(&cfg.paths.work_dir);
    let ckpt = load_checkpoint(&ws.checkpoint())?;
    let (split, spec) = load_prepared(cfg)?;
    let corpus = load_corpus(cfg)?;
    let detector: Detector<f32> = ckpt.detector()?;
    let (report, results) = evaluate(&detector, &corpus, &split.test, &spec, threshold, unit)?;
    write_json(&ws.report(), &report)?;
    write_json(&ws.eval_dir().join("results.json"), &results)?;
    write_roc_png(&report.roc_points, 512, &ws.eval_dir().join("roc.png"))?;
    Ok(report)
}

/// Where `infer` takes its image from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InferInput {
    ManifestId(String),
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferDocument {
    pub image_id: String,
    pub threshold: f64,
    pub width: usize,
    pub height: usize,
    pub roi_spec: RoiSpec,
    /// Panoramic-frame ROI rectangles actually cropped, left then right.
    pub roi_regions: Vec<acp_core::corpus::PixelBox>,
    pub detections: Vec<Detection<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferArtifacts {
    pub original: PathBuf,
    pub crops: Vec<PathBuf>,
    pub overlay: PathBuf,
    pub detections: PathBuf,
    pub document: InferDocument,
}

pub fn load_input_image(cfg: &PipelineConfig, input: &InferInput) -> CliResult<PanoramicImage> {
    match input {
        InferInput::ManifestId(id) => {
            let corpus = load_corpus(cfg)?;
            let r = corpus.image(id).ok_or_else(|| CliError::Usage(format!("unknown image id {id:?}")))?;
            Ok(r.load()?)
        }
        InferInput::File(path) => {
            let (pixels, depth) = read_png(path).map_err(|reason| acp_core::Error::ImageLoad {
                id: path.display().to_string(),
                path: path.clone(),
                reason,
            })?;
            let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
            Ok(PanoramicImage::new(id, pixels, "external", depth)?)
        }
    }
}

/// Detections on one image in the panoramic frame, at or above `threshold`.
pub fn detect_image(detector: &Detector<f32>, image: &PanoramicImage, spec: &RoiSpec, threshold: f64) -> CliResult<Vec<Detection<f64>>> {
    Ok(infer(detector, image, spec, threshold)?
        .into_iter()
        .map(|d| Detection { bbox: d.bbox.cast(), confidence: d.confidence as f64, frame: d.frame, side: d.side })
        .collect())
}

/// Writes the original image, both ROI crops, the overlay and the
/// detection list into `out_dir`.
pub fn run_infer(cfg: &PipelineConfig, input: &InferInput, threshold: f64, out_dir: &Path) -> CliResult<InferArtifacts> {
    let ws = Workspace::new(&cfg.paths.work_dir);
    let ckpt = load_checkpoint(&ws.checkpoint())?;
    let (_, spec) = load_prepared(cfg)?;
    let image = load_input_image(cfg, input)?;
    let detector: Detector<f32> = ckpt.detector()?;
    let detections = detect_image(&detector, &image, &spec, threshold)?;

    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let original = out_dir.join("original.png");
    write_png(&image.pixels, BitDepth::Eight, &original)?;
    let rois = extract_rois(&image, &spec, &Annotation::normal(image.id.clone()));
    let mut crops = Vec::new();
    for roi in &rois {
        let path = out_dir.join(format!("roi_{}.png", roi.side.as_str()));
        write_png(&roi.raster, BitDepth::Eight, &path)?;
        crops.push(path);
    }
    let regions: Vec<_> = rois.iter().map(|r| r.region).collect();
    let overlay = out_dir.join("overlay.png");
    render_overlay(&image.pixels, &regions, &detections)
        .save(&overlay)
        .map_err(|e| CliError::io(&overlay, std::io::Error::other(e)))?;
    let document = InferDocument {
        image_id: image.id.clone(),
        threshold,
        width: image.width(),
        height: image.height(),
        roi_spec: spec,
        roi_regions: regions,
        detections,
    };
    let detections_path = out_dir.join("detections.json");
    write_json(&detections_path, &document)?;
    Ok(InferArtifacts { original, crops, overlay, detections: detections_path, document })
}

fn draw_rect(img: &mut RgbImage, b: &acp_core::corpus::PixelBox, color: Rgb<u8>, thickness: u32) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let x0 = b.x_min.floor() as i64;
    let y0 = b.y_min.floor() as i64;
    let x1 = b.x_max.ceil() as i64 - 1;
    let y1 = b.y_max.ceil() as i64 - 1;
    let mut put = |x: i64, y: i64| {
        if (0..w).contains(&x) && (0..h).contains(&y) {
            img.put_pixel(x as u32, y as u32, color);
        }
    };
    for t in 0..thickness as i64 {
        for x in x0..=x1 {
            put(x, y0 + t);
            put(x, y1 - t);
        }
        for y in y0..=y1 {
            put(x0 + t, y);
            put(x1 - t, y);
        }
    }
}

/// Grayscale image with ROI rectangles in blue and detections in red; the
/// red frame's thickness grows with confidence.
pub fn render_overlay(pixels: &Raster<f32>, regions: &[acp_core::corpus::PixelBox], detections: &[Detection<f64>]) -> RgbImage {
    let mut img = RgbImage::from_fn(pixels.width() as u32, pixels.height() as u32, |x, y| {
        let v = (pixels.get(x as usize, y as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([v, v, v])
    });
    for r in regions {
        draw_rect(&mut img, r, Rgb([40, 140, 255]), 1);
    }
    for d in detections {
        let t = 1 + (d.confidence * 2.0).round() as u32;
        draw_rect(&mut img, &d.bbox, Rgb([230, 30, 30]), t);
    }
    img
}
