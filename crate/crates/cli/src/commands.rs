use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::{info, warn};
use rayon::prelude::*;
use serde_json::json;
use yoffle_core::anchors::{kmeans_anchors, mean_best_iou, read_anchors, write_anchors};
use yoffle_core::arch::{build_yofflenet, Variant, DEFAULT_ANCHORS_PER_SCALE};
use yoffle_core::cost::{analyze, CostReport};
use yoffle_core::eval::{self, class_names, format_detection_line, EvalConfig, Scored};
use yoffle_core::kitti::{self, split_dataset, DatasetSplit, NUM_CLASSES};
use yoffle_core::letterbox::{letterbox, load_rgb, Letterbox};
use yoffle_core::pipeline::{bench_detector, Detector, HostInfo, Thresholds};
use yoffle_core::weights::init_random;
use yoffle_core::{AnchorSet, Graph, Shape, Tensor, WeightStore};

use crate::args::{Cli, Command, Format, GlobalOpts};
use crate::draw::{class_color, draw_box};
use crate::CliError;

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

pub fn run(cli: Cli) -> Result<()> {
    let opts = &cli.opts;
    validate(opts)?;
    match cli.command {
        Command::Analyze { report_dir } => cmd_analyze(opts, report_dir.as_deref()),
        Command::InitWeights { out, dtype } => cmd_init_weights(opts, &out, dtype.into()),
        Command::Infer { weights, anchors, out_dir, annotate_dir, inputs } => {
            cmd_infer(opts, &weights, anchors.as_deref(), &out_dir, annotate_dir.as_deref(), &inputs)
        }
        Command::Bench { weights, anchors, iterations, warmup, report_dir } => {
            cmd_bench(opts, weights.as_deref(), anchors.as_deref(), iterations, warmup, report_dir.as_deref())
        }
        Command::Eval { detections, labels, kitti_car_iou, report_dir } => {
            cmd_eval(opts, &detections, &labels, kitti_car_iou, report_dir.as_deref())
        }
        Command::Anchors { labels, k, image_size, out } => cmd_anchors(opts, &labels, k, &image_size, &out),
        Command::Split { ids_from, count, ratios, out_dir } => cmd_split(opts, ids_from.as_deref(), count, &ratios, &out_dir),
    }
}

fn validate(o: &GlobalOpts) -> Result<()> {
    let fail = |msg: String| Err(CliError::Config(msg).into());
    if o.input_size == 0 || o.input_size % 32 != 0 {
        return fail(format!("--input-size {} must be a positive multiple of 32", o.input_size));
    }
    if o.classes == 0 {
        return fail("--classes must be at least 1".into());
    }
    for (name, v) in [("--conf", o.conf), ("--nms-iou", o.nms_iou), ("--eval-iou", o.eval_iou)] {
        if !(0.0..=1.0).contains(&v) {
            return fail(format!("{name} {v} must lie in [0, 1]"));
        }
    }
    if o.threads == 0 {
        return fail("--threads must be at least 1".into());
    }
    Ok(())
}

fn variant(o: &GlobalOpts) -> Variant {
    o.variant.into()
}

fn graph_for(o: &GlobalOpts, v: Variant) -> Result<Graph> {
    Ok(build_yofflenet(v, o.classes, DEFAULT_ANCHORS_PER_SCALE)?.with_input_size(o.input_size)?)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn emit(format: Format, text: impl FnOnce() -> String, json: &serde_json::Value, csv: impl FnOnce() -> Result<String>) -> Result<()> {
    match format {
        Format::Text => print!("{}", text()),
        Format::Json => println!("{}", serde_json::to_string_pretty(json)?),
        Format::Csv => print!("{}", csv()?),
    }
    Ok(())
}

fn write_reports(dir: Option<&Path>, stem: &str, json: &serde_json::Value, csv: &str) -> Result<()> {
    if let Some(dir) = dir {
        write_file(&dir.join(format!("{stem}.json")), serde_json::to_string_pretty(json)? + "\n")?;
        write_file(&dir.join(format!("{stem}.csv")), csv)?;
        info!("wrote {stem}.json and {stem}.csv to {}", dir.display());
    }
    Ok(())
}

fn csv_line(fields: &[String]) -> String {
    fields.iter().map(|f| if f.contains([',', '"']) { format!("\"{}\"", f.replace('"', "\"\"")) } else { f.clone() }).collect::<Vec<_>>().join(",")
        + "\n"
}

fn analysis_text(v: Variant, r: &CostReport, ratio: f64) -> String {
    let mut s = format!("{:<40} {:<11} {:>16} {:>10} {:>14}\n", "layer", "kind", "output", "params", "MACs");
    for l in &r.layers {
        let shape = format!("{}x{}x{}", l.output.c, l.output.h, l.output.w);
        s.push_str(&format!("{:<40} {:<11} {:>16} {:>10} {:>14}\n", l.id, l.kind, shape, l.params, l.macs));
    }
    s.push_str(&format!(
        "\nvariant {v}, input {}x{}\nparams            {} ({:.3} M)\nMACs              {} ({:.3} G)\n\
         memory access     {} elements ({:.1} MB)\nweight file fp32  {} bytes\nweight file fp16  {} bytes ({:.3} MB)\n\
         params ratio base-csp / {v}: {ratio:.2}\n",
        r.input.h,
        r.input.w,
        r.total_params,
        r.total_params as f64 / 1e6,
        r.total_macs,
        r.total_macs as f64 / 1e9,
        r.total_memory_access,
        r.total_memory_access_bytes as f64 / 1e6,
        r.weight_bytes_fp32,
        r.weight_bytes_fp16,
        r.weight_bytes_fp16 as f64 / 1e6,
    ));
    s
}

fn cmd_analyze(o: &GlobalOpts, report_dir: Option<&Path>) -> Result<()> {
    let v = variant(o);
    let report = analyze(&graph_for(o, v)?);
    let base = analyze(&graph_for(o, Variant::BaseCsp)?);
    let ratio = base.total_params as f64 / report.total_params as f64;
    let mut value = serde_json::to_value(&report)?;
    value["variant"] = json!(v.as_str());
    value["compression_ratio_vs_base_csp"] = json!(ratio);
    let csv = report.to_csv()?;
    write_reports(report_dir, "analysis", &value, &csv)?;
    emit(o.format, || analysis_text(v, &report, ratio), &value, || Ok(csv.clone()))
}

fn cmd_init_weights(o: &GlobalOpts, out: &Path, dtype: yoffle_core::DType) -> Result<()> {
    let g = graph_for(o, variant(o))?;
    let store = init_random(&g, o.seed, dtype);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    store.save(out)?;
    let value = json!({
        "path": out.display().to_string(),
        "variant": variant(o).as_str(),
        "dtype": format!("{dtype:?}").to_lowercase(),
        "seed": o.seed,
        "entries": store.len(),
        "params": store.scalar_count(),
        "bytes": store.encoded_len(),
        "crc32": format!("{:08x}", store.checksum()),
    });
    emit(
        o.format,
        || {
            format!(
                "wrote {} ({} entries, {} params, {} bytes, crc32 {:08x})\n",
                out.display(),
                store.len(),
                store.scalar_count(),
                store.encoded_len(),
                store.checksum()
            )
        },
        &value,
        || {
            Ok(csv_line(&["path", "entries", "params", "bytes", "crc32"].map(String::from))
                + &csv_line(&[
                    out.display().to_string(),
                    store.len().to_string(),
                    store.scalar_count().to_string(),
                    store.encoded_len().to_string(),
                    format!("{:08x}", store.checksum()),
                ]))
        },
    )
}

fn load_anchors(path: Option<&Path>, v: Variant) -> Result<AnchorSet> {
    Ok(match path {
        Some(p) => AnchorSet::from_dims(read_anchors(p)?, v.strides())?,
        None => AnchorSet::default_for(v.strides())?,
    })
}

fn build_detector(o: &GlobalOpts, weights: &WeightStore, anchors: Option<&Path>) -> Result<Detector> {
    let v = variant(o);
    let thresholds = Thresholds { confidence: o.conf, nms_iou: o.nms_iou };
    Ok(Detector::new(graph_for(o, v)?, weights, load_anchors(anchors, v)?, thresholds)?)
}

fn collect_images(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found = Vec::new();
            for ext in IMAGE_EXTENSIONS {
                found.extend(kitti::files_with_extension(input, ext)?);
            }
            found.sort();
            out.extend(found);
        } else {
            out.push(input.clone());
        }
    }
    Ok(out)
}

struct ImageResult {
    path: PathBuf,
    detections: usize,
}

fn infer_one(det: &Detector, names: &[String], path: &Path, out_dir: &Path, annotate_dir: Option<&Path>) -> Result<ImageResult> {
    let img = load_rgb(path)?;
    let size = det.network().graph().input_shape().h;
    let (x, lb): (Tensor, Letterbox) = letterbox(&img, size)?;
    let dets = det.detect(&x)?.pop().expect("one image in, one result out");
    let stem = kitti::file_stem(path);
    let mut text = String::new();
    let mut annotated = annotate_dir.map(|_| img.clone());
    for d in &dets {
        let scored = Scored { class: d.class_id, confidence: d.confidence, bbox: lb.to_original(&d.bbox) };
        text.push_str(&format_detection_line(&names[d.class_id], &scored));
        text.push('\n');
        if let Some(canvas) = annotated.as_mut() {
            draw_box(canvas, scored.bbox.corners(), class_color(d.class_id), 2);
        }
    }
    write_file(&out_dir.join(format!("{stem}.{}", eval::DETECTION_EXTENSION)), text)?;
    if let (Some(dir), Some(canvas)) = (annotate_dir, annotated) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let target = dir.join(format!("{stem}.png"));
        canvas.save(&target).with_context(|| format!("writing {}", target.display()))?;
    }
    info!("{}: {} detections", path.display(), dets.len());
    Ok(ImageResult { path: path.to_path_buf(), detections: dets.len() })
}

fn cmd_infer(
    o: &GlobalOpts,
    weights: &Path,
    anchors: Option<&Path>,
    out_dir: &Path,
    annotate_dir: Option<&Path>,
    inputs: &[PathBuf],
) -> Result<()> {
    let store = WeightStore::load(weights)?;
    let det = build_detector(o, &store, anchors)?;
    let names = class_names(o.classes);
    let images = collect_images(inputs)?;
    if images.is_empty() {
        return Err(CliError::Data("no input images found".into()).into());
    }
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(o.threads).build()?;
    let results: Vec<Result<ImageResult>> =
        pool.install(|| images.par_iter().map(|p| infer_one(&det, &names, p, out_dir, annotate_dir)).collect());

    let mut done = Vec::new();
    let mut failed = 0;
    for (path, r) in images.iter().zip(results) {
        match r {
            Ok(r) => done.push(r),
            Err(e) => {
                failed += 1;
                warn!("skipping {}: {e:#}", path.display());
            }
        }
    }
    let value = json!(done
        .iter()
        .map(|r| json!({ "image": r.path.display().to_string(), "detections": r.detections }))
        .collect::<Vec<_>>());
    emit(
        o.format,
        || done.iter().map(|r| format!("{}: {} detections\n", r.path.display(), r.detections)).collect(),
        &value,
        || {
            Ok(done.iter().fold(csv_line(&["image".into(), "detections".into()]), |acc, r| {
                acc + &csv_line(&[r.path.display().to_string(), r.detections.to_string()])
            }))
        },
    )?;
    if failed > 0 {
        return Err(CliError::Data(format!("{failed} of {} images could not be processed", images.len())).into());
    }
    Ok(())
}

fn cmd_bench(
    o: &GlobalOpts,
    weights: Option<&Path>,
    anchors: Option<&Path>,
    iterations: usize,
    warmup: usize,
    report_dir: Option<&Path>,
) -> Result<()> {
    if iterations == 0 {
        return Err(CliError::Config("--iterations must be at least 1".into()).into());
    }
    let v = variant(o);
    let store = match weights {
        Some(p) => WeightStore::load(p)?,
        None => init_random(&graph_for(o, v)?, o.seed, yoffle_core::DType::F32),
    };
    let det = build_detector(o, &store, anchors)?;
    let x = Tensor::filled(Shape::new(1, 3, o.input_size, o.input_size), 0.5);
    info!("benchmarking {v}: {warmup} warmup + {iterations} timed iterations");
    let latency = bench_detector(&det, &x, iterations, warmup)?;
    let host = HostInfo::detect(o.threads);
    let value = json!({
        "variant": v.as_str(),
        "input_size": o.input_size,
        "weights": weights.map(|p| p.display().to_string()),
        "latency": latency,
        "host": host,
    });
    let header = ["variant", "input_size", "iterations", "warmup", "mean_ms", "median_ms", "p95_ms", "min_ms", "max_ms", "fps", "os", "arch", "logical_cpus", "cpu_model", "threads"];
    let row = [
        v.as_str().to_string(),
        o.input_size.to_string(),
        latency.iterations.to_string(),
        latency.warmup.to_string(),
        format!("{:.4}", latency.mean_ms),
        format!("{:.4}", latency.median_ms),
        format!("{:.4}", latency.p95_ms),
        format!("{:.4}", latency.min_ms),
        format!("{:.4}", latency.max_ms),
        format!("{:.3}", latency.fps),
        host.os.to_string(),
        host.arch.to_string(),
        host.logical_cpus.to_string(),
        host.cpu_model.clone().unwrap_or_default(),
        host.threads.to_string(),
    ];
    let csv = csv_line(&header.map(String::from)) + &csv_line(&row);
    write_reports(report_dir, "bench", &value, &csv)?;
    emit(
        o.format,
        || {
            format!(
                "variant {v} at {0}x{0}, {1} iterations after {2} warmup\n\
                 mean {3:.3} ms  median {4:.3} ms  p95 {5:.3} ms  min {6:.3} ms  max {7:.3} ms\n\
                 {8:.2} FPS\nhost: {9} {10}, {11} logical CPUs, {12}, {13} thread(s)\n",
                o.input_size,
                latency.iterations,
                latency.warmup,
                latency.mean_ms,
                latency.median_ms,
                latency.p95_ms,
                latency.min_ms,
                latency.max_ms,
                latency.fps,
                host.os,
                host.arch,
                host.logical_cpus,
                host.cpu_model.as_deref().unwrap_or("unknown CPU"),
                host.threads
            )
        },
        &value,
        || Ok(csv.clone()),
    )
}

fn cmd_eval(o: &GlobalOpts, detections: &Path, labels: &Path, kitti_car: bool, report_dir: Option<&Path>) -> Result<()> {
    let cfg = if o.classes == NUM_CLASSES {
        EvalConfig::kitti(o.eval_iou, kitti_car)
    } else if kitti_car {
        return Err(CliError::Config("--kitti-car-iou needs the three KITTI classes".into()).into());
    } else {
        EvalConfig::uniform(class_names(o.classes), o.eval_iou)
    };
    let gts = eval::read_ground_truth_dir(labels)?;
    let dets = eval::read_detection_dir(detections, &cfg)?;
    let report = eval::evaluate(&dets, &gts, &cfg)?;
    let value = serde_json::to_value(&report)?;
    let csv = report.to_csv()?;
    write_reports(report_dir, "eval", &value, &csv)?;
    emit(o.format, || report.to_text(), &value, || Ok(csv.clone()))
}

fn parse_image_size(s: &str) -> Result<(u32, u32)> {
    let bad = || CliError::Config(format!("--image-size `{s}` must look like 1242x375"));
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let w: u32 = w.trim().parse().map_err(|_| bad())?;
    let h: u32 = h.trim().parse().map_err(|_| bad())?;
    if w == 0 || h == 0 {
        return Err(bad().into());
    }
    Ok((w, h))
}

fn cmd_anchors(o: &GlobalOpts, labels: &Path, k: Option<usize>, image_size: &str, out: &Path) -> Result<()> {
    let v = variant(o);
    let k = k.unwrap_or(DEFAULT_ANCHORS_PER_SCALE * v.pyramid_levels());
    let (w, h) = parse_image_size(image_size)?;
    let scale = Letterbox::new(w, h, o.input_size)?.scale;
    let boxes: Vec<(f64, f64)> = kitti::read_label_dir(labels)?
        .values()
        .flatten()
        .map(|b| (b.width() * scale, b.height() * scale))
        .collect();
    if boxes.is_empty() {
        return Err(CliError::Data(format!("no Car, Pedestrian or Cyclist boxes under {}", labels.display())).into());
    }
    let result = kmeans_anchors(&boxes, k, o.seed)?;
    let fit = mean_best_iou(&boxes, &result.anchors);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    write_anchors(out, &result.anchors)?;
    let value = json!({
        "anchors": result.anchors.iter().map(|(w, h)| [w, h]).collect::<Vec<_>>(),
        "k": k,
        "boxes": boxes.len(),
        "mean_best_iou": fit,
        "iterations": result.iterations,
        "converged": result.converged,
        "input_size": o.input_size,
        "scale": scale,
    });
    emit(
        o.format,
        || {
            let mut s = format!("{k} anchors from {} boxes (input {}), mean best IoU {fit:.4}\n", boxes.len(), o.input_size);
            for (w, h) in &result.anchors {
                s.push_str(&format!("{w:.2} {h:.2}\n"));
            }
            s
        },
        &value,
        || {
            Ok(result
                .anchors
                .iter()
                .fold(csv_line(&["w".into(), "h".into()]), |acc, (w, h)| acc + &csv_line(&[w.to_string(), h.to_string()])))
        },
    )
}

fn cmd_split(o: &GlobalOpts, ids_from: Option<&Path>, count: Option<usize>, ratios: &[f64], out_dir: &Path) -> Result<()> {
    let ids: Vec<String> = match (ids_from, count) {
        (Some(dir), _) => {
            let entries = fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))?;
            let mut stems = BTreeSet::new();
            for e in entries {
                let path = e.with_context(|| format!("reading {}", dir.display()))?.path();
                if path.is_file() {
                    stems.insert(kitti::file_stem(&path));
                }
            }
            stems.into_iter().collect()
        }
        (None, Some(n)) => (0..n).map(|i| format!("{i:06}")).collect(),
        (None, None) => return Err(CliError::Config("give --ids-from or --count".into()).into()),
    };
    let ratios: [f64; 3] =
        ratios.try_into().map_err(|_| CliError::Config("--ratios takes exactly three values".into()))?;
    let split = split_dataset(&ids, o.seed, ratios)?;
    split.write_manifest(out_dir)?;
    let [a, b, c] = split.sizes();
    let value = json!({ "seed": o.seed, "ratios": ratios, "train": a, "val": b, "test": c,
        "files": DatasetSplit::FILES.map(|f| out_dir.join(f).display().to_string()) });
    emit(
        o.format,
        || format!("split {} ids with seed {}: train {a}, val {b}, test {c}\n", ids.len(), o.seed),
        &value,
        || Ok(csv_line(&["train".into(), "val".into(), "test".into()]) + &csv_line(&[a.to_string(), b.to_string(), c.to_string()])),
    )
}
