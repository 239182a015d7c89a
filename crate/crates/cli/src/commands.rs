use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use openslot::bench::{check_label_spaces, generate_benchmark, load_benchmark, read_rgb_image, save_benchmark, Benchmark};
use openslot::checkpoint::Checkpoint;
use openslot::config::{overrides_from_args, RunConfig};
use openslot::eval::{build_osr_splits, read_metrics_csv, write_metrics_csv, MetricRow, OsrSplit};
use openslot::osod::{detection_eval_many, Detection};
use openslot::pipeline::{
    closed_set_eval, detect_slots, encode_benchmark, evaluate_osr, inference_seed, metric_rows, misalignment,
    pretrain_backbone, train_classifier, TrainedClassifier,
};
use openslot::scoring::ScoreMetric;
use openslot::slot::{SlotModel, SlotSet};

use crate::plot::{render_svg, PlotInput};
use crate::rundir::{check_exists, check_writable, RunDir};
use crate::{Common, PlotKind};

pub const DETECTIONS_SCHEMA: &str = "openslot.detections/1";
const BENCHMARK_NAME: &str = "synthetic";
const MANIFEST: &str = "manifest.jsonl";

/// Maps the short scoring flags onto their config keys.
fn alias(key: &str) -> &str {
    match key {
        "metric" => "scoring.metric",
        "scheme" => "scoring.scheme",
        "gamma" => "scoring.gamma",
        k => k,
    }
}

pub fn resolve_config(common: &Common) -> Result<RunConfig> {
    let base = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let pairs = overrides_from_args(&common.overrides)?;
    let cfg = base.with_overrides(pairs.iter().map(|(k, v)| (alias(k), v.as_str())))?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_bench(cfg: &RunConfig) -> Result<Benchmark> {
    check_exists(&cfg.paths.data_dir.join(MANIFEST), "benchmark manifest")?;
    let bench = load_benchmark(&cfg.paths.data_dir)?;
    check_label_spaces(&bench)?;
    Ok(bench)
}

fn load_backbone(cfg: &RunConfig) -> Result<SlotModel> {
    check_exists(&cfg.paths.checkpoint, "backbone checkpoint")?;
    let ck = Checkpoint::load(&cfg.paths.checkpoint)?;
    Ok(SlotModel::from_checkpoint(&ck)?)
}

fn load_heads(cfg: &RunConfig, bench: &Benchmark) -> Result<TrainedClassifier> {
    check_exists(&cfg.paths.heads, "classifier heads")?;
    let trained = TrainedClassifier::from_checkpoint(&Checkpoint::load(&cfg.paths.heads)?)?;
    let mut kkc = bench.config.kkc.clone();
    kkc.sort_unstable();
    if trained.classes.classes != kkc {
        bail!(
            "heads were trained on classes {:?} but the benchmark knows {:?}",
            trained.classes.classes,
            kkc
        );
    }
    Ok(trained)
}

/// Benchmark, slots of every image and the open-set split.
fn encoded(cfg: &RunConfig) -> Result<(Benchmark, SlotModel, Vec<SlotSet>, OsrSplit)> {
    let bench = load_bench(cfg)?;
    let model = load_backbone(cfg)?;
    let split = build_osr_splits(&bench.entries, &bench.config.kkc, &bench.config.uuc, cfg.label_mode())?;
    log::info!("encoding {} images", bench.scenes.len());
    let slots = encode_benchmark(&model, &bench, cfg.seed)?;
    Ok((bench, model, slots, split))
}

fn metrics_bytes(rows: &[MetricRow]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write_metrics_csv(rows, &mut out)?;
    Ok(out)
}

fn emit_metrics(run: &RunDir, rows: &[MetricRow]) -> Result<()> {
    let bytes = metrics_bytes(rows)?;
    let p = run.write("metrics.csv", &bytes)?;
    print!("{}", String::from_utf8_lossy(&bytes));
    log::info!("wrote {}", p.display());
    Ok(())
}

fn copy_out(src: &Path, dst: &Path) -> Result<()> {
    if let Some(parent) = dst.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::copy(src, dst).with_context(|| format!("copying to {}", dst.display()))?;
    Ok(())
}

pub fn gen_data(common: &Common) -> Result<()> {
    let cfg = resolve_config(common)?;
    let manifest = cfg.paths.data_dir.join(MANIFEST);
    check_writable(&manifest, common.force, "benchmark")?;
    let run = RunDir::create(&cfg, "gen-data")?;
    let bench = generate_benchmark(&cfg.bench)?;
    check_label_spaces(&bench)?;
    if common.force && manifest.exists() {
        fs::remove_file(&manifest).with_context(|| format!("removing {}", manifest.display()))?;
    }
    save_benchmark(&bench, &cfg.paths.data_dir)?;
    let counts = serde_json::to_string(&bench.counts())?;
    run.write("counts.json", counts.as_bytes())?;
    println!("{counts}");
    Ok(())
}

pub fn pretrain(common: &Common) -> Result<()> {
    let cfg = resolve_config(common)?;
    cfg.model.validate()?;
    check_writable(&cfg.paths.checkpoint, common.force, "backbone checkpoint")?;
    let bench = load_bench(&cfg)?;
    let run = RunDir::create(&cfg, "pretrain")?;
    let mut log_text = String::new();
    let model = pretrain_backbone(&bench, cfg.model.clone(), &cfg.pretrain, cfg.seed, |stage, l| {
        let line = serde_json::json!({ "stage": stage, "epoch": l.epoch, "loss": l.loss }).to_string();
        println!("{line}");
        log_text.push_str(&line);
        log_text.push('\n');
    })?;
    run.write("pretrain.log", log_text.as_bytes())?;
    let local = run.write("backbone.ckpt", &model.to_checkpoint()?.to_bytes())?;
    let digest = model.backbone_digest();
    run.write("backbone.sha256", format!("{digest}\n").as_bytes())?;
    copy_out(&local, &cfg.paths.checkpoint)?;
    log::info!("backbone {digest} -> {}", cfg.paths.checkpoint.display());
    Ok(())
}

pub fn train_cls(common: &Common) -> Result<()> {
    let cfg = resolve_config(common)?;
    check_writable(&cfg.paths.heads, common.force, "classifier heads")?;
    check_exists(&cfg.paths.checkpoint, "backbone checkpoint")?;
    let (bench, _model, slots, split) = encoded(&cfg)?;
    let run = RunDir::create(&cfg, "train-cls")?;
    let cls = cfg.cls.train_config();
    log::info!(
        "{:?} training on {} images: lr {}, {} epochs, halving every {}",
        cls.method,
        split.train.len(),
        cls.schedule.base,
        cls.schedule.epochs,
        cls.schedule.halve_every
    );
    let mut log_text = String::new();
    let trained = train_classifier(&bench, &slots, &split.train, &cfg.ans, &cls, cfg.seed, |e| {
        log_text.push_str(&serde_json::to_string(e).unwrap_or_default());
        log_text.push('\n');
    })?;
    run.write("train.log", log_text.as_bytes())?;
    let local = run.write("heads.ckpt", &trained.to_checkpoint()?.to_bytes())?;
    copy_out(&local, &cfg.paths.heads)?;
    let acc = closed_set_eval(&trained, &bench, &slots, &split.test_known, cfg.label_mode())?;
    log::info!("closed-set accuracy on known test images {acc:.4}");
    Ok(())
}

pub fn eval_osr(common: &Common) -> Result<()> {
    let cfg = resolve_config(common)?;
    check_exists(&cfg.paths.heads, "classifier heads")?;
    let (bench, _model, slots, split) = encoded(&cfg)?;
    let mut trained = load_heads(&cfg, &bench)?;
    let scoring = cfg.scoring.scoring();
    if scoring.metric == ScoreMetric::Mahalanobis {
        trained.rematch(&bench, &slots, &split.train)?;
    }
    let r = evaluate_osr(&trained, &slots, &split, &scoring)?;
    let run = RunDir::create(&cfg, "eval-osr")?;
    emit_metrics(&run, &metric_rows(BENCHMARK_NAME, scoring.metric, &r))
}

pub fn eval_closed(common: &Common) -> Result<()> {
    let cfg = resolve_config(common)?;
    check_exists(&cfg.paths.heads, "classifier heads")?;
    let (bench, _model, slots, split) = encoded(&cfg)?;
    let trained = load_heads(&cfg, &bench)?;
    let run = RunDir::create(&cfg, "eval-closed")?;
    let acc = closed_set_eval(&trained, &bench, &slots, &split.test_known, cfg.label_mode())?;
    let row = MetricRow {
        benchmark: BENCHMARK_NAME.into(),
        set: "known".into(),
        metric: "accuracy".into(),
        value: acc,
    };
    emit_metrics(&run, &[row])
}

fn detection_lines(out: &mut String, image_id: &str, dets: &[Detection]) {
    for d in dets {
        let b = d.bbox;
        let _ = writeln!(out, "{image_id},{},{},{},{},{},{}", b.x0, b.y0, b.x1, b.y1, d.label, d.score);
    }
}

pub fn detect(common: &Common, image: Option<&Path>) -> Result<()> {
    let cfg = resolve_config(common)?;
    let mut text = format!("# schema={DETECTIONS_SCHEMA}\nimage_id,x0,y0,x1,y1,label,score\n");
    if let Some(path) = image {
        let model = load_backbone(&cfg)?;
        check_exists(&cfg.paths.heads, "classifier heads")?;
        let trained = TrainedClassifier::from_checkpoint(&Checkpoint::load(&cfg.paths.heads)?)?;
        let (w, h, px) = read_rgb_image(path)?;
        let run = RunDir::create(&cfg, "detect")?;
        let slots = model.infer(&px, inference_seed(cfg.seed, 0))?;
        let dets = detect_slots(&trained, &model, &slots, (w, h), &cfg.osod)?;
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        detection_lines(&mut text, &id, &dets);
        run.write("detections.txt", text.as_bytes())?;
        print!("{text}");
        return Ok(());
    }
    check_exists(&cfg.paths.heads, "classifier heads")?;
    let (bench, model, slots, split) = encoded(&cfg)?;
    let trained = load_heads(&cfg, &bench)?;
    let run = RunDir::create(&cfg, "detect")?;
    let mut test: Vec<usize> = [&split.test_known, &split.test_h, &split.test_m].into_iter().flatten().copied().collect();
    test.sort_unstable();
    let mut per_image = Vec::with_capacity(test.len());
    for &i in &test {
        let s = &bench.scenes[i];
        let dets = detect_slots(&trained, &model, &slots[i], (s.width, s.height), &cfg.osod)?;
        detection_lines(&mut text, &bench.entries[i].id.to_string(), &dets);
        let boxes = s.objects.iter().map(|o| o.bbox).collect();
        let known = s.objects.iter().map(|o| bench.config.kkc.contains(&o.class_id)).collect();
        per_image.push((dets, boxes, known));
    }
    run.write("detections.txt", text.as_bytes())?;
    let m = detection_eval_many(&per_image, 0.5);
    let mut rows = vec![
        ("unknown_recall", m.unknown_recall),
        ("known_precision", m.known_precision),
    ];
    if let Some(a) = m.auroc_over_boxscores {
        rows.push(("box_auroc", a));
    }
    let rows: Vec<MetricRow> = rows
        .into_iter()
        .map(|(metric, value)| MetricRow {
            benchmark: BENCHMARK_NAME.into(),
            set: "osod".into(),
            metric: metric.into(),
            value,
        })
        .collect();
    emit_metrics(&run, &rows)
}

pub fn diagnose(common: &Common) -> Result<()> {
    let cfg = resolve_config(common)?;
    check_exists(&cfg.paths.heads, "classifier heads")?;
    let (bench, model, slots, split) = encoded(&cfg)?;
    let trained = load_heads(&cfg, &bench)?;
    let run = RunDir::create(&cfg, "diagnose")?;
    let digest = model.backbone_digest();
    run.write("backbone.sha256", format!("{digest}\n").as_bytes())?;
    log::info!("backbone {digest}");
    let r = misalignment(&trained.heads, &bench, &slots, &split.test_known)?;
    log::info!("misalignment over {} images", r.images);
    let rows: Vec<MetricRow> = [
        ("fg_rate_of_maxlogit_slot", r.fg_rate_of_maxlogit_slot),
        ("mean_logit_norm_fg", r.mean_logit_norm_fg),
        ("mean_logit_norm_noise", r.mean_logit_norm_noise),
    ]
    .into_iter()
    .map(|(metric, value)| MetricRow {
        benchmark: BENCHMARK_NAME.into(),
        set: "known".into(),
        metric: metric.into(),
        value,
    })
    .collect();
    emit_metrics(&run, &rows)
}

pub fn plot(common: &Common, inputs: &[PathBuf], kind: PlotKind, title: &str) -> Result<()> {
    let cfg = resolve_config(common)?;
    let mut tables = Vec::new();
    for p in inputs {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let rows = read_metrics_csv(&text).with_context(|| format!("parsing {}", p.display()))?;
        let name = p.parent().and_then(Path::file_name).unwrap_or(p.as_os_str());
        tables.push(PlotInput {
            name: name.to_string_lossy().into_owned(),
            rows,
        });
    }
    let svg = render_svg(&tables, kind, title)?;
    let run = RunDir::create(&cfg, "plot")?;
    let p = run.write("plot.svg", svg.as_bytes())?;
    println!("{}", p.display());
    Ok(())
}
