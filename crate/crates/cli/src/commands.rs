//! Subcommand implementations.

use std::path::Path;

use anyhow::{bail, Context, Result};
use drnet_core::boxes::BBox;
use drnet_core::data::{self, SceneSpec};
use drnet_core::eval::{mean_average_precision, pr_curve, ScoredBox, EVAL_IOU};
use drnet_core::model::{self, Model, TemporalPair, Variant};
use drnet_core::postprocess::{
    detect_image, read_detections_jsonl, write_detections_jsonl, DetectionRecord,
    PostprocessConfig,
};
use drnet_core::report;
use drnet_core::sampling::sampling_centers;
use drnet_core::temporal::{stream_detect, KeyFrameSchedule, TemporalConfig};
use drnet_core::training::{train_model, train_pair, TrainSample};

use crate::config::{BuiltModel, RunConfig, RunVariant};
use crate::{DetectArgs, EvalArgs, ExportOffsetsArgs, GenDataArgs, SweepArgs, TrainArgs};

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path)
        .with_context(|| format!("creating directory {}", path.display()))
}

pub fn gen_data(args: GenDataArgs) -> Result<()> {
    if args.images == 0 && args.videos == 0 {
        bail!("nothing to generate: pass --images and/or --videos");
    }
    let spec = SceneSpec {
        seed: args.seed,
        canvas: args.canvas,
        min_objects: args.min_objects,
        max_objects: args.max_objects,
        min_size: args.min_size,
        max_size: args.max_size,
        aspect_jitter: args.aspect_jitter,
        min_speed: args.min_speed,
        max_speed: args.max_speed,
        allow_occlusion: !args.no_occlusion,
        noise: args.noise,
        color: args.color,
    };
    ensure_dir(&args.out)?;
    if args.images > 0 {
        data::write_image_dataset(&args.out, &spec, args.images)?;
    }
    if args.videos > 0 {
        data::write_video_dataset(&args.out, &spec, args.videos, args.frames)?;
    }
    let echo = format!(
        "seed={}\ncanvas={}\nimages={}\nvideos={}\nframes={}\nmin_objects={}\nmax_objects={}\n\
         min_size={}\nmax_size={}\naspect_jitter={}\nmin_speed={}\nmax_speed={}\nnoise={}\n\
         color={}\nallow_occlusion={}\n",
        spec.seed,
        spec.canvas,
        args.images,
        args.videos,
        args.frames,
        spec.min_objects,
        spec.max_objects,
        spec.min_size,
        spec.max_size,
        spec.aspect_jitter,
        spec.min_speed,
        spec.max_speed,
        spec.noise,
        spec.color,
        spec.allow_occlusion,
    );
    std::fs::write(args.out.join("gen_config.txt"), echo)?;
    println!(
        "generated {} images and {} clips under {}",
        args.images,
        args.videos,
        args.out.display()
    );
    Ok(())
}

fn resolve_config(
    config: Option<&Path>,
    apply_flags: impl FnOnce(&mut RunConfig) -> Result<()>,
) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = config {
        cfg.apply_file(path)?;
    }
    apply_flags(&mut cfg)?;
    Ok(cfg)
}

pub fn train(args: TrainArgs) -> Result<()> {
    let cfg = resolve_config(args.config.as_deref(), |cfg| {
        if let Some(v) = &args.variant {
            cfg.variant = RunVariant::parse(v)?;
        }
        if let Some(s) = args.steps {
            cfg.steps = s;
        }
        if let Some(b) = args.batch {
            cfg.batch = b;
        }
        if let Some(s) = args.seed {
            cfg.seed = s;
        }
        if let Some(lr) = args.lr {
            cfg.lr = lr;
        }
        cfg.apply_ablations(args.no_feature_refine, args.no_deform_head, args.single_head, args.multi_head)
    })?;

    let images = data::read_image_dataset(&args.data)
        .with_context(|| format!("loading dataset {}", args.data.display()))?;
    let samples: Vec<TrainSample> = images
        .into_iter()
        .map(|li| TrainSample { image: li.image, gts: li.gts })
        .collect();

    ensure_dir(&args.out)?;
    std::fs::write(args.out.join("config.txt"), cfg.to_kv())?;
    let train_cfg = cfg.train_config();
    let log = match cfg.build()? {
        BuiltModel::Single(mut m) => {
            let log = train_model(&mut m, &samples, &train_cfg)?;
            model::save_checkpoint(&args.out, "model", &[("", &m)], cfg.steps as u64)?;
            log
        }
        BuiltModel::Pair(mut pair) => {
            let log = train_pair(&mut pair, &samples, &train_cfg)?;
            model::save_pair(&args.out, "model", &pair, cfg.steps as u64)?;
            log
        }
    };
    report::write_metrics_csv(&args.out.join("metrics.csv"), &log)?;
    let last = log.last().context("no training steps ran")?;
    println!(
        "trained {} for {} steps (final loss {:.4}); checkpoint in {}",
        cfg.variant,
        cfg.steps,
        last.total,
        args.out.display()
    );
    Ok(())
}

/// A checkpoint directory holds either a single model or an RG/RD pair.
fn load_any_checkpoint(dir: &Path) -> Result<BuiltModel> {
    match model::load_model(dir, "model") {
        Ok((m, _)) => Ok(BuiltModel::Single(m)),
        Err(first) => match model::load_pair(dir, "model") {
            Ok((pair, _)) => Ok(BuiltModel::Pair(pair)),
            Err(_) => Err(first).with_context(|| {
                format!("loading checkpoint from {}", dir.display())
            }),
        },
    }
}

fn records_from_images(
    model: &Model,
    images: &[data::LoadedImage],
    pp: &PostprocessConfig,
) -> Vec<DetectionRecord> {
    let mut records = Vec::new();
    for (i, li) in images.iter().enumerate() {
        for c in detect_image(model, &li.image, pp) {
            records.push(DetectionRecord::from_candidate(i, &c));
        }
    }
    records
}

fn eval_records(
    records: &[DetectionRecord],
    gts: &[Vec<(BBox, usize)>],
    num_classes: usize,
) -> drnet_core::eval::EvalResult {
    let mut per_class: Vec<Vec<ScoredBox>> = vec![Vec::new(); num_classes];
    for r in records {
        per_class[r.class].push(ScoredBox { image: r.frame, score: r.score, bbox: r.bbox() });
    }
    mean_average_precision(&per_class, gts, num_classes, EVAL_IOU)
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let cfg = resolve_config(args.config.as_deref(), |_| Ok(()))?;
    let images = data::read_image_dataset(&args.data)?;
    let gts: Vec<Vec<(BBox, usize)>> = images.iter().map(|li| li.gts.clone()).collect();
    ensure_dir(&args.out)?;

    let (records, num_classes) = match (&args.detections, &args.checkpoint) {
        (Some(path), _) => {
            let records = read_detections_jsonl(path)?;
            (records, cfg.model.num_classes)
        }
        (None, Some(ckpt)) => match load_any_checkpoint(ckpt)? {
            BuiltModel::Single(m) => {
                let records = records_from_images(&m, &images, &cfg.post);
                write_detections_jsonl(&args.out.join("detections.jsonl"), &records)?;
                let n = m.config.num_classes;
                (records, n)
            }
            BuiltModel::Pair(_) => bail!("eval expects a single-model checkpoint; use sweep for temporal pairs"),
        },
        (None, None) => bail!("eval needs --checkpoint or --detections"),
    };

    let result = eval_records(&records, &gts, num_classes);
    let mut rows: Vec<Vec<String>> = result
        .per_class
        .iter()
        .enumerate()
        .map(|(c, ap)| {
            vec![
                c.to_string(),
                data::CLASS_NAMES.get(c).unwrap_or(&"?").to_string(),
                ap.map_or("undefined".into(), |v| format!("{:.6}", v)),
            ]
        })
        .collect();
    rows.push(vec!["mean".into(), "".into(), format!("{:.6}", result.mean)]);
    report::write_csv(&args.out.join("eval.csv"), &["class", "name", "AP"], &rows)?;
    for c in &result.skipped {
        eprintln!("warning: class {} has no ground truth; excluded from mAP", c);
    }

    // PR curves per class
    let mut pr_series = Vec::new();
    for cls in 0..num_classes {
        let class_gts: Vec<Vec<BBox>> = gts
            .iter()
            .map(|img| img.iter().filter(|(_, c)| *c == cls).map(|(b, _)| *b).collect())
            .collect();
        let dets: Vec<ScoredBox> = records
            .iter()
            .filter(|r| r.class == cls)
            .map(|r| ScoredBox { image: r.frame, score: r.score, bbox: r.bbox() })
            .collect();
        let points = pr_curve(&dets, &class_gts, EVAL_IOU);
        report::write_pr_csv(&args.out.join(format!("pr_class{}.csv", cls)), &points)?;
        if !points.is_empty() {
            pr_series.push(report::Series {
                label: data::CLASS_NAMES.get(cls).unwrap_or(&"?").to_string(),
                points,
            });
        }
    }
    report::svg_line_plot(
        &args.out.join("pr.svg"),
        "precision vs recall",
        "recall",
        "precision",
        &pr_series,
    )?;
    println!("mAP {:.4}; report in {}", result.mean, args.out.display());
    Ok(())
}

pub fn detect(args: DetectArgs) -> Result<()> {
    let cfg = resolve_config(args.config.as_deref(), |_| Ok(()))?;
    ensure_dir(&args.out)?;
    let built = load_any_checkpoint(&args.checkpoint)?;

    let records = match &args.video {
        None => {
            let images = data::read_image_dataset(&args.data)?;
            match built {
                BuiltModel::Single(m) => records_from_images(&m, &images, &cfg.post),
                BuiltModel::Pair(pair) => {
                    // same-frame inference: every image is its own key frame
                    let tc = TemporalConfig::new(KeyFrameSchedule::new(1, args.e));
                    let mut records = Vec::new();
                    for (i, li) in images.iter().enumerate() {
                        let frames = [&li.image];
                        let (dets, _) = stream_detect(&pair.rg, &pair.rd, &frames, &tc, &cfg.post);
                        for c in &dets[0].detections {
                            records.push(DetectionRecord::from_candidate(i, c));
                        }
                    }
                    records
                }
            }
        }
        Some(clip_name) => {
            let clips = data::read_video_dataset(&args.data)?;
            let clip = clips
                .iter()
                .find(|c| &c.name == clip_name)
                .with_context(|| format!("clip {} not found under {}/videos", clip_name, args.data.display()))?;
            match built {
                BuiltModel::Single(m) => {
                    let mut records = Vec::new();
                    for (t, frame) in clip.frames.iter().enumerate() {
                        for c in detect_image(&m, &frame.image, &cfg.post) {
                            records.push(DetectionRecord::from_candidate(t, &c));
                        }
                    }
                    records
                }
                BuiltModel::Pair(pair) => {
                    let tc = TemporalConfig::new(KeyFrameSchedule::new(args.k, args.e));
                    let frames: Vec<&drnet_core::tensor::Tensor> =
                        clip.frames.iter().map(|f| &f.image).collect();
                    let (dets, stats) = stream_detect(&pair.rg, &pair.rd, &frames, &tc, &cfg.post);
                    println!(
                        "streamed {} frames: {} generator calls, {} detector calls",
                        frames.len(),
                        stats.rg_calls,
                        stats.rd_calls
                    );
                    dets.iter()
                        .flat_map(|fd| {
                            fd.detections
                                .iter()
                                .map(|c| DetectionRecord::from_candidate(fd.frame, c))
                                .collect::<Vec<_>>()
                        })
                        .collect()
                }
            }
        }
    };
    write_detections_jsonl(&args.out.join("detections.jsonl"), &records)?;
    std::fs::write(args.out.join("config.txt"), cfg.to_kv())?;
    println!("{} detections written to {}", records.len(), args.out.display());
    Ok(())
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<T>()
                .map_err(|e| anyhow::anyhow!("bad {} entry '{}': {}", what, p, e))
        })
        .collect()
}

pub fn sweep(args: SweepArgs) -> Result<()> {
    let cfg = resolve_config(args.config.as_deref(), |_| Ok(()))?;
    let ks: Vec<usize> = parse_list(&args.k, "k")?;
    let es: Vec<f64> = parse_list(&args.e, "e")?;
    let pair: TemporalPair = match load_any_checkpoint(&args.checkpoint)? {
        BuiltModel::Pair(p) => p,
        BuiltModel::Single(_) => bail!("sweep expects a temporal pair checkpoint"),
    };
    let clips = data::read_video_dataset(&args.data)?;
    if clips.is_empty() {
        bail!("no video clips under {}", args.data.display());
    }
    let sequences: Vec<data::VideoSequence> = clips
        .into_iter()
        .map(|c| data::VideoSequence {
            frames: c
                .frames
                .into_iter()
                .map(|f| data::VideoFrame { image: f.image, gts: f.gts, object_ids: Vec::new() })
                .collect(),
        })
        .collect();

    ensure_dir(&args.out)?;
    let rows = drnet_core::temporal::sweep(&pair, &sequences, &ks, &es, &cfg.post);
    report::write_sweep_csv(&args.out.join("sweep.csv"), &rows)?;
    // one mAP-vs-k line per soft coefficient
    let series: Vec<report::Series> = es
        .iter()
        .map(|&e| report::Series {
            label: format!("e={}", e),
            points: rows
                .iter()
                .filter(|r| r.e == e)
                .map(|r| (r.k as f64, r.map))
                .collect(),
        })
        .collect();
    report::svg_line_plot(
        &args.out.join("map_vs_k.svg"),
        "mAP vs key-frame duration",
        "k",
        "mAP",
        &series,
    )?;
    std::fs::write(args.out.join("config.txt"), cfg.to_kv())?;
    for r in &rows {
        println!(
            "k={} e={}: mAP {:.4} ({} generator calls, {:.2} ms/frame)",
            r.k, r.e, r.map, r.rg_calls, r.ms_per_frame
        );
    }
    println!("sweep table in {}", args.out.join("sweep.csv").display());
    Ok(())
}

pub fn export_offsets(args: ExportOffsetsArgs) -> Result<()> {
    let model = match load_any_checkpoint(&args.checkpoint)? {
        BuiltModel::Single(m) => m,
        BuiltModel::Pair(pair) => pair.rg,
    };
    if !model.config.deform_head && model.config.variant != Variant::Rg {
        bail!("this checkpoint has no feature offsets to export");
    }
    let image = data::read_image(&args.image)?;
    let pass = model.forward(&image, false);
    if pass.offsets.is_empty() || pass.offsets.iter().all(|p| p.iter().all(Option::is_none)) {
        bail!("this checkpoint has no feature offsets to export");
    }
    ensure_dir(&args.out)?;
    let mut entries = Vec::new();
    for (s, per_path) in pass.offsets.iter().enumerate() {
        for (p, off) in per_path.iter().enumerate() {
            let Some(off) = off else { continue };
            let k = model.config.head.paths[p].kernel;
            let fo = drnet_core::sampling::FeatureOffsets::new(
                pass.tape.value(*off).clone(),
                (k, k),
            );
            let stride = model.config.strides[s] as f64;
            entries.push((s, p, sampling_centers(&fo, stride)));
        }
    }
    let path = args.out.join("sampling_centers.csv");
    report::write_sampling_centers_csv(&path, &entries)?;
    println!("sampling centers written to {}", path.display());
    Ok(())
}
