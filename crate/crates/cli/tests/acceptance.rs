//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails. Pass a substring to run a subset,
//! e.g. `cargo test -p acp-pipeline --test acceptance -- stats`.

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use acp_core::augment::{apply_brightness, apply_hflip, augment_plan, replay, rotated_envelope, AugmentConfig};
use acp_core::corpus::{load_manifest, split_dataset, SplitFractions};
use acp_core::detector::{train, DetectorConfig, LossSplit, TrainOptions};
use acp_core::eval::{auc, auc_inference, build_report, confusion_at, roc_curve, ScoredImage};
use acp_core::geometry::{decode_box, encode_box, iou, nms_indices, BoundingBox, Scored};
use acp_core::pipeline::{roi_samples, EvalUnit};
use acp_core::raster::Raster;
use acp_core::synth::generate_dataset;
use acp_pipeline::stages::{run_eval, run_prepare, run_synth, run_train, InferDocument};
use acp_pipeline::PipelineConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_box(rng: &mut ChaCha8Rng, extent: f64) -> BoundingBox<f64> {
    let x0 = rng.random_range(0.0..extent);
    let y0 = rng.random_range(0.0..extent);
    let w = rng.random_range(1.0..extent / 4.0);
    let h = rng.random_range(1.0..extent / 4.0);
    BoundingBox::raw(x0, y0, x0 + w, y0 + h)
}

fn oracle_iou(a: &BoundingBox<f64>, b: &BoundingBox<f64>) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = (a.x_max - a.x_min) * (a.y_max - a.y_min) + (b.x_max - b.x_min) * (b.y_max - b.y_min) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Greedy suppression by repeated linear scans for the best survivor.
fn oracle_nms(items: &[Scored<f64>], threshold: f64) -> Vec<usize> {
    let better = |i: usize, j: usize| {
        let (a, b) = (&items[i], &items[j]);
        (a.score, -a.bbox.x_min, -a.bbox.y_min, std::cmp::Reverse(i))
            > (b.score, -b.bbox.x_min, -b.bbox.y_min, std::cmp::Reverse(j))
    };
    let mut alive: Vec<usize> = (0..items.len()).collect();
    let mut keep = Vec::new();
    while !alive.is_empty() {
        let best = alive.iter().copied().fold(alive[0], |m, i| if better(i, m) { i } else { m });
        keep.push(best);
        alive.retain(|&i| i != best && oracle_iou(&items[i].bbox, &items[best].bbox) <= threshold);
    }
    keep
}

fn geometry() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10_000 {
        let (a, b) = (random_box(&mut rng, 200.0), random_box(&mut rng, 200.0));
        let (ab, ba) = (iou(&a, &b), iou(&b, &a));
        ensure(ab == ba, || format!("iou asymmetric on {a:?} {b:?}"))?;
        ensure((0.0..=1.0).contains(&ab), || format!("iou {ab} out of range"))?;
        ensure((ab - oracle_iou(&a, &b)).abs() < 1e-12, || "iou disagrees with oracle".into())?;
        ensure((iou(&a, &a) - 1.0).abs() < 1e-12, || "iou(a, a) != 1".into())?;
    }
    for inst in 0..1000 {
        // Scores on a coarse grid so that ties exercise the ordering rule.
        let items: Vec<Scored<f64>> = (0..50)
            .map(|_| Scored::new(random_box(&mut rng, 100.0), rng.random_range(0..20) as f64 / 20.0))
            .collect();
        let t = [0.3, 0.5, 0.7][inst % 3];
        let got = nms_indices(&items, t);
        let want = oracle_nms(&items, t);
        ensure(got == want, || format!("nms instance {inst}: {got:?} != {want:?}"))?;
    }
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let (r, g) = (random_box(&mut rng, 500.0), random_box(&mut rng, 500.0));
        let back = decode_box(&r, &encode_box(&r, &g)).map_err(|e| e.to_string())?;
        for (x, y) in back.to_array().into_iter().zip(g.to_array()) {
            worst = worst.max((x - y).abs() / y.abs().max(1.0));
        }
    }
    ensure(worst <= 1e-6, || format!("round trip relative error {worst:e}"))?;
    Ok(format!("1000 nms instances exact, round trip max rel err {worst:.1e}"))
}

fn augmentation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for case in 0..200 {
        let (w, h) = (rng.random_range(8..60), rng.random_range(8..60));
        let raster = Raster::from_fn(w, h, |_, _| rng.random::<f64>());
        // Annotation coordinates are whole pixels, where the flip is exact.
        let b = random_box(&mut rng, w.min(h) as f64);
        let boxes = vec![BoundingBox::raw(b.x_min.floor(), b.y_min.floor(), b.x_max.ceil(), b.y_max.ceil())];
        let (once, b1) = apply_hflip(&raster, &boxes);
        let (twice, b2) = apply_hflip(&once, &b1);
        ensure(twice == raster && b2 == boxes, || format!("hflip not an involution on case {case}"))?;
        let delta = rng.random_range(-1.0..1.0);
        let bright = apply_brightness(&raster, delta);
        for (o, n) in raster.data().iter().zip(bright.data()) {
            ensure((*n - (o + delta).clamp(0.0, 1.0)).abs() < 1e-12, || "brightness not clamped".into())?;
        }
    }
    for case in 0..1000 {
        let b = random_box(&mut rng, 300.0);
        let (cx, cy) = (rng.random_range(0.0..300.0), rng.random_range(0.0..300.0));
        let angle: f64 = rng.random_range(-180.0..180.0);
        let env = rotated_envelope(&b, cx, cy, angle);
        let (s, c) = angle.to_radians().sin_cos();
        for (x, y) in [(b.x_min, b.y_min), (b.x_max, b.y_min), (b.x_min, b.y_max), (b.x_max, b.y_max)] {
            let (rx, ry) = (cx + c * (x - cx) - s * (y - cy), cy + s * (x - cx) + c * (y - cy));
            let eps = 1e-9 * (1.0 + rx.abs().max(ry.abs()));
            ensure(
                rx >= env.x_min - eps && rx <= env.x_max + eps && ry >= env.y_min - eps && ry <= env.y_max + eps,
                || format!("case {case}: corner ({rx}, {ry}) outside {env:?}"),
            )?;
        }
    }
    let cfg = AugmentConfig::default();
    let raster = Raster::from_fn(48, 40, |x, y| ((x * 7 + y * 3) % 11) as f64 / 11.0);
    let boxes = vec![BoundingBox::raw(10.0, 12.0, 22.0, 20.0)];
    let a = augment_plan("s", &raster, &boxes, &cfg, 99, 30);
    let b = augment_plan("s", &raster, &boxes, &cfg, 99, 30);
    ensure(a == b, || "augmentation plan differs between runs".into())?;
    for s in &a {
        let (r, bx) = replay(&raster, &boxes, &cfg, &s.provenance).map_err(|e| e.to_string())?;
        ensure(r == s.raster && bx == s.boxes, || "provenance replay mismatch".into())?;
    }
    Ok("hflip involution, brightness clamp, 1000 envelope cases, plan determinism".into())
}

fn statistics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for set in 0..1000 {
        let n = rng.random_range(2..60);
        let mut scored: Vec<ScoredImage<f64>> = (0..n)
            .map(|i| ScoredImage {
                image_id: format!("i{i}"),
                score: rng.random_range(0..12) as f64 / 11.0,
                label: rng.random_bool(0.5),
            })
            .collect();
        scored[0].label = true;
        scored[1].label = false;
        let roc = roc_curve(&scored).map_err(|e| e.to_string())?;
        let first = roc.first().unwrap();
        let last = roc.last().unwrap();
        ensure((first.fpr, first.tpr) == (0.0, 0.0) && (last.fpr, last.tpr) == (1.0, 1.0), || {
            format!("set {set}: ROC endpoints {first:?} {last:?}")
        })?;
        ensure(roc.windows(2).all(|w| w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr), || format!("set {set}: ROC not monotone"))?;
        let (pos, neg): (Vec<_>, Vec<_>) = scored.iter().partition(|s| s.label);
        let mut u = 0.0;
        for p in &pos {
            for q in &neg {
                u += if p.score > q.score {
                    1.0
                } else if p.score == q.score {
                    0.5
                } else {
                    0.0
                };
            }
        }
        let mw = u / (pos.len() * neg.len()) as f64;
        let a = auc(&roc);
        ensure((a - mw).abs() <= 1e-9, || format!("set {set}: trapezoid {a} vs Mann-Whitney {mw}"))?;
    }

    let mut example = Vec::new();
    for (i, (score, label)) in [(0.9, true); 6]
        .into_iter()
        .chain([(0.1, true); 2])
        .chain([(0.1, false); 8])
        .chain([(0.9, false); 2])
        .enumerate()
    {
        example.push(ScoredImage { image_id: format!("e{i}"), score, label });
    }
    let c = confusion_at(&example, 0.5);
    ensure((c.tp, c.fn_, c.tn, c.fp) == (6, 2, 8, 2), || format!("confusion {c:?}"))?;
    let report = build_report(&example, 0.5).map_err(|e| e.to_string())?;
    ensure(report.sensitivity == Some(0.75) && report.specificity == Some(0.8), || {
        format!("sens {:?} spec {:?}", report.sensitivity, report.specificity)
    })?;

    let null = auc_inference(0.5, 10, 10).map_err(|e| e.to_string())?;
    ensure(null.p_value > 0.999, || format!("null p {}", null.p_value))?;
    let separated: Vec<ScoredImage<f64>> = (0..20)
        .map(|i| ScoredImage { image_id: format!("s{i}"), score: i as f64, label: i >= 10 })
        .collect();
    let perfect = build_report(&separated, 9.5).map_err(|e| e.to_string())?;
    ensure(perfect.auc == 1.0 && perfect.p_value < 0.05, || format!("perfect auc {} p {}", perfect.auc, perfect.p_value))?;
    Ok(format!("1000 AUC sets match Mann-Whitney, 6/2/8/2 -> 0.75/0.80, perfect p {:.1e}", perfect.p_value))
}

fn split() -> Outcome {
    let items = |n: usize, pos: usize| -> Vec<(String, bool)> { (0..n).map(|i| (format!("id{i:04}"), i < pos)).collect() };
    let f = SplitFractions::default();
    let s = split_dataset(&items(65, 44), f, 0).map_err(|e| e.to_string())?;
    let sizes = (s.train.len(), s.val.len(), s.test.len());
    ensure(sizes == (45, 6, 14), || format!("n=65 sizes {sizes:?}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for n in 3..=1000 {
        let pos = rng.random_range(0..=n);
        let seed = rng.random();
        let input = items(n, pos);
        let a = split_dataset(&input, f, seed).map_err(|e| e.to_string())?;
        let mut reversed = input.clone();
        reversed.reverse();
        let b = split_dataset(&reversed, f, seed).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("n={n}: split depends on input order"))?;
        let mut all: Vec<&String> = a.all().collect();
        all.sort();
        all.dedup();
        ensure(all.len() == n && a.all().count() == n, || format!("n={n}: not a disjoint cover"))?;
        let want = f.sizes(n);
        let parts = [&a.train, &a.val, &a.test];
        for (k, part) in parts.iter().enumerate() {
            ensure(part.len() == want[k], || format!("n={n}: part {k} size {} != {}", part.len(), want[k]))?;
            let p = part.iter().filter(|id| id[2..].parse::<usize>().unwrap() < pos).count() as f64;
            let exact = pos as f64 * want[k] as f64 / n as f64;
            ensure((p - exact).abs() < 2.0, || format!("n={n}: part {k} has {p} positives, proportional {exact:.2}"))?;
        }
    }
    Ok("65 -> 45/6/14; n in [3, 1000] deterministic, stratified, disjoint".into())
}

fn overfit(scratch: &Path) -> Outcome {
    let data = scratch.join("overfit");
    generate_dataset(2, 1.0, 21, &data, &Default::default()).map_err(|e| e.to_string())?;
    let corpus = load_manifest(&data.join("manifest.json")).map_err(|e| e.to_string())?;
    let ids = corpus.ids();
    let annotations: Vec<_> = ids.iter().map(|id| corpus.consensus_for(id)).collect();
    let dims = (corpus.images[0].width, corpus.images[0].height);
    let spec = acp_core::corpus::compute_roi_spec(&annotations, dims, 25.0).map_err(|e| e.to_string())?;
    let samples = roi_samples(&corpus, &ids, &spec).map_err(|e| e.to_string())?;
    ensure(samples.len() == 4, || format!("{} samples", samples.len()))?;

    let config = DetectorConfig {
        anchor_scales: vec![8.0, 16.0, 32.0],
        learning_rate: 0.01,
        batch_size: 4,
        iterations: 500,
        val_interval: 10,
        ..Default::default()
    };
    let options = TrainOptions {
        augment: AugmentConfig { per_sample_count: 1, ..Default::default() },
        serial: true,
        split_seed: None,
    };
    // The same four crops serve as the fixed-plan probe set.
    let outcome = train::<f32>(&samples, &samples, &config, &options, |_| {}).map_err(|e| e.to_string())?;
    let probe: Vec<(usize, f64)> =
        outcome.curve.iter().filter(|r| r.split == LossSplit::Val).map(|r| (r.step, r.losses.total)).collect();
    let at10 = probe.iter().find(|(s, _)| *s == 10).map(|p| p.1).ok_or("no step-10 probe")?;
    let (best_step, best) = probe.iter().copied().fold((0, f64::INFINITY), |m, p| if p.1 < m.1 { p } else { m });
    let drop = 1.0 - best / at10;
    ensure(drop >= 0.9, || format!("loss {at10:.4} at step 10, best {best:.4} at step {best_step}: drop {:.1}%", 100.0 * drop))?;
    Ok(format!("loss {at10:.4} at step 10 -> {best:.4} at step {best_step} ({:.1}% drop)", 100.0 * drop))
}

fn desk_config(root: &Path) -> Result<PipelineConfig, String> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let mut cfg = PipelineConfig::load(Some(&path)).map_err(|e| e.to_string())?;
    cfg.paths.data_dir = root.join("data");
    cfg.paths.work_dir = root.join("work");
    Ok(cfg)
}

fn end_to_end(scratch: &Path) -> Outcome {
    let root = scratch.join("e2e");
    let cfg = desk_config(&root)?;
    let e = |err: acp_pipeline::CliError| err.to_string();
    run_synth(&cfg, 65, 0.67, 0, &cfg.paths.data_dir).map_err(e)?;
    let (split, _) = run_prepare(&cfg, cfg.split.seed).map_err(e)?;
    ensure(split.test.len() == 14, || format!("test split has {} images", split.test.len()))?;
    run_train(&cfg, false, |_| {}).map_err(e)?;
    let report = run_eval(&cfg, cfg.eval.threshold, EvalUnit::Image).map_err(e)?;
    let loc = report.localization_rate.unwrap_or(0.0);
    let detail = format!(
        "AUC {:.3} (95% CI {:.3}-{:.3}), localized {:.0}% of {} test positives, sens {:.2} spec {:.2}",
        report.auc,
        report.ci95.0,
        report.ci95.1,
        100.0 * loc,
        report.n_pos,
        report.sensitivity.unwrap_or(f64::NAN),
        report.specificity.unwrap_or(f64::NAN)
    );
    ensure(report.auc >= 0.9 && loc >= 0.7, || detail.clone())?;
    Ok(detail)
}

fn infer_artifacts(scratch: &Path) -> Outcome {
    let root = scratch.join("e2e");
    let cfg_path = root.join("acp.toml");
    let cfg = desk_config(&root)?;
    std::fs::write(&cfg_path, toml::to_string(&cfg).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let split: acp_core::corpus::DatasetSplit =
        serde_json::from_str(&std::fs::read_to_string(root.join("work/split.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    let mut checked = 0;
    for id in &split.test {
        let out = root.join("infer").join(id);
        let status = Command::new(env!("CARGO_BIN_EXE_acp"))
            .arg("--config")
            .arg(&cfg_path)
            .args(["infer", "--image-id", id, "--threshold", "0.0", "--out"])
            .arg(&out)
            .output()
            .map_err(|e| e.to_string())?;
        ensure(status.status.success(), || String::from_utf8_lossy(&status.stderr).into_owned())?;
        for f in ["original.png", "roi_left.png", "roi_right.png", "overlay.png", "detections.json"] {
            ensure(out.join(f).is_file(), || format!("{id}: missing {f}"))?;
        }
        let doc: InferDocument = serde_json::from_str(&std::fs::read_to_string(out.join("detections.json")).unwrap())
            .map_err(|e| e.to_string())?;
        for d in &doc.detections {
            let eps = 1e-6;
            let inside = doc.roi_regions.iter().any(|r| {
                d.bbox.x_min >= r.x_min - eps
                    && d.bbox.y_min >= r.y_min - eps
                    && d.bbox.x_max <= r.x_max + eps
                    && d.bbox.y_max <= r.y_max + eps
            });
            ensure(inside, || format!("{id}: detection {:?} outside both ROIs", d.bbox))?;
            checked += 1;
        }
    }
    Ok(format!("{} images, {checked} detections inside their ROI", split.test.len()))
}

fn main() -> ExitCode {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let scratch = tempfile::tempdir().expect("scratch dir");
    let s: PathBuf = scratch.path().to_path_buf();
    type Check<'a> = (&'a str, Duration, Box<dyn Fn() -> Outcome + 'a>);
    let checks: Vec<Check> = vec![
        ("geometry", Duration::from_secs(60), Box::new(geometry)),
        ("augmentation", Duration::from_secs(60), Box::new(augmentation)),
        ("statistics", Duration::from_secs(60), Box::new(statistics)),
        ("split", Duration::from_secs(60), Box::new(split)),
        ("overfit", Duration::from_secs(600), Box::new(|| overfit(&s))),
        ("end_to_end", Duration::from_secs(1800), Box::new(|| end_to_end(&s))),
        ("infer_artifacts", Duration::from_secs(60), Box::new(|| infer_artifacts(&s))),
    ];
    let mut failed = 0;
    for (name, budget, check) in &checks {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        if *name == "infer_artifacts" && !s.join("e2e/work/model.ckpt").exists() {
            println!("FAIL {name}: needs the end_to_end checkpoint");
            failed += 1;
            continue;
        }
        let start = Instant::now();
        let result = check();
        let took = start.elapsed();
        let verdict = match result {
            Ok(detail) if took <= *budget => format!("PASS {name}: {detail} [{:.1}s]", took.as_secs_f64()),
            Ok(detail) => format!("FAIL {name}: {detail} but took {:.1}s > {}s", took.as_secs_f64(), budget.as_secs()),
            Err(why) => format!("FAIL {name}: {why} [{:.1}s]", took.as_secs_f64()),
        };
        if verdict.starts_with("FAIL") {
            failed += 1;
        }
        println!("{verdict}");
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
