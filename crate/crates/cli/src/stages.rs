//! Stage pipelines behind the CLI verbs.

use std::path::Path;

use medivlad_core::aggregate::{self, AggregatorKind, VideoClsConfig};
use medivlad_core::checkpoint::Checkpoint;
use medivlad_core::data::{self, Label, Manifest, SynthSpec, VideoSample};
use medivlad_core::distill::{self, Pairing, PretrainConfig};
use medivlad_core::encoder::{self, EncoderConfig};
use medivlad_core::eval::{self, EvalReport, ProbeConfig};
use medivlad_core::finetune::{self, FinetuneConfig, NUM_CLASSES};
use medivlad_core::frame::GrayImage;
use medivlad_core::params::ParamStore;
use medivlad_core::{SeedStream, Tensor};

use crate::config::RunConfig;
use crate::CliError;

fn runtime(msg: impl Into<String>) -> CliError {
    CliError::Runtime(msg.into())
}

fn prefixed(store: &ParamStore, prefix: &str) -> ParamStore {
    let mut out = ParamStore::new();
    for (name, t) in store.iter() {
        out.insert(format!("{prefix}{name}"), t.clone());
    }
    out
}

fn profile(cfg: &RunConfig) -> Result<(String, EncoderConfig), CliError> {
    let name = cfg.str_or("profile", "tiny")?;
    let enc = EncoderConfig::by_name(&name)?;
    Ok((name, enc))
}

fn load_checkpoint(cfg: &RunConfig, key: &str) -> Result<Checkpoint, CliError> {
    let path = cfg.path_required(key)?;
    let ck = Checkpoint::load(&path)?;
    if let Some(want) = cfg.str_opt("profile")? {
        if want != ck.profile {
            return Err(runtime(format!(
                "checkpoint {} was trained at profile {}, but --profile {} was requested",
                path.display(),
                ck.profile,
                want
            )));
        }
    }
    Ok(ck)
}

/// Backbone parameters from any checkpoint stage. Pretraining stores
/// both networks; the teacher is the feature network.
fn backbone_of(ck: &Checkpoint) -> ParamStore {
    if ck.stage == "pretrain" {
        let mut out = ParamStore::new();
        for (name, t) in ck.params.iter() {
            if let Some(stripped) = name.strip_prefix("teacher.") {
                out.insert(stripped, t.clone());
            }
        }
        out
    } else {
        let mut out = ParamStore::new();
        for (name, t) in ck.params.iter() {
            if !name.starts_with("aggregate.") && !name.starts_with("backbone.") {
                out.insert(name, t.clone());
            }
        }
        for (name, t) in ck.params.iter() {
            if let Some(stripped) = name.strip_prefix("backbone.") {
                out.insert(stripped, t.clone());
            }
        }
        out
    }
}

fn loss_csv_path(cfg: &RunConfig, out: &Path) -> Result<std::path::PathBuf, CliError> {
    Ok(cfg
        .path_opt("loss-csv")?
        .unwrap_or_else(|| out.with_extension("loss.csv")))
}

/// Load every manifest video and split by group-aware folds. With
/// --folds 1 the whole set serves as both train and test.
fn load_split(
    cfg: &RunConfig,
    enc: &EncoderConfig,
    seed: u64,
) -> Result<(Vec<VideoSample>, Vec<VideoSample>), CliError> {
    let dir = cfg.path_required("data")?;
    let manifest = Manifest::load(&dir.join("manifest.csv"))?;
    let folds = cfg.usize_or("folds", 4)?;
    let test_fold = cfg.usize_or("fold", 0)?;
    if folds == 0 || test_fold >= folds {
        return Err(CliError::Usage(format!("--fold {test_fold} out of range for --folds {folds}")));
    }
    let assignment = if folds == 1 {
        vec![0; manifest.rows.len()]
    } else {
        data::make_folds(&manifest, folds, seed)?
    };
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (row, &f) in manifest.rows.iter().zip(&assignment) {
        let sample = manifest.load_video(row, enc.image_size)?;
        if folds == 1 {
            train.push(sample.clone());
            test.push(sample);
        } else if f == test_fold {
            test.push(sample);
        } else {
            train.push(sample);
        }
    }
    Ok((train, test))
}

fn labeled_frames(videos: &[VideoSample]) -> Result<Vec<(GrayImage, Label)>, CliError> {
    let mut out = Vec::new();
    for v in videos {
        let label = v
            .label
            .ok_or_else(|| runtime(format!("video {} has no label", v.video_id)))?;
        for f in &v.frames {
            out.push((f.clone(), label));
        }
    }
    Ok(out)
}

fn video_features(
    enc: &EncoderConfig,
    backbone: &ParamStore,
    videos: &[VideoSample],
) -> Result<Vec<(Vec<Tensor>, Option<Label>)>, CliError> {
    let mut out = Vec::with_capacity(videos.len());
    for v in videos {
        let feats = encoder::encode_batch(enc, backbone, "", &v.frames)?;
        out.push((feats, v.label));
    }
    Ok(out)
}

pub fn synth(cfg: &RunConfig) -> Result<(), CliError> {
    let out = cfg.path_required("out")?;
    let seed = cfg.seed()?;
    let base = SynthSpec::default();
    let spec = SynthSpec {
        videos_per_class: cfg.usize_or("synth.videos_per_class", base.videos_per_class)?,
        image_size: cfg.usize_or("synth.image_size", base.image_size)?,
        frames_per_video: cfg.usize_or("synth.frames_per_video", base.frames_per_video)?,
        informative_frames: cfg.usize_or("synth.informative_frames", base.informative_frames)?,
        noise: cfg.f32_or("synth.noise", base.noise)?,
        source_tags: cfg.usize_or("synth.source_tags", base.source_tags)?,
    };
    let videos = data::synth_dataset(&spec, seed)?;
    data::write_synth_dataset(&videos, &out)?;
    println!(
        "synth: wrote {} videos ({} frames each) to {}",
        videos.len(),
        spec.frames_per_video,
        out.display()
    );
    Ok(())
}

pub fn pretrain(cfg: &RunConfig) -> Result<(), CliError> {
    let (profile_name, enc) = profile(cfg)?;
    let seed = cfg.seed()?;
    let out = cfg.path_required("out")?;
    let (train, _) = load_split(cfg, &enc, seed)?;
    let frames: Vec<GrayImage> =
        train.iter().flat_map(|v| v.frames.iter().cloned()).collect();

    let base = PretrainConfig::defaults(&enc);
    let mut crop = base.crop.clone();
    crop.globals = cfg.usize_or("pretrain.globals", crop.globals)?;
    crop.locals = cfg.usize_or("pretrain.locals", crop.locals)?;
    let pairing = match cfg.str_or("pretrain.pairing", "globals-to-locals")?.as_str() {
        "globals-to-locals" => Pairing::GlobalsToLocals,
        "conventional" => Pairing::Conventional,
        other => {
            return Err(CliError::Usage(format!(
                "--pretrain.pairing: expected globals-to-locals or conventional, got {other}"
            )))
        }
    };
    let pc = PretrainConfig {
        lr: cfg.f32_or("pretrain.lr", base.lr)?,
        weight_decay_start: cfg.f32_or("pretrain.weight_decay_start", base.weight_decay_start)?,
        weight_decay_end: cfg.f32_or("pretrain.weight_decay_end", base.weight_decay_end)?,
        epochs: cfg.usize_or("pretrain.epochs", base.epochs)?,
        batch_size: cfg.usize_or("pretrain.batch_size", base.batch_size)?,
        tau_teacher: cfg.f32_or("pretrain.tau_t", base.tau_teacher)?,
        tau_student: cfg.f32_or("pretrain.tau_s", base.tau_student)?,
        ema_lambda: cfg.f32_or("pretrain.lambda", base.ema_lambda)?,
        centering: cfg.bool_or("pretrain.centering", base.centering)?,
        center_momentum: cfg.f32_or("pretrain.center_momentum", base.center_momentum)?,
        pairing,
        crop,
    };

    let seeds = SeedStream::new(seed);
    let result = distill::pretrain(&frames, &enc, &pc, &seeds)?;
    let mut params =
        prefixed(&result.student, "student.").merged_with(&prefixed(&result.teacher, "teacher."));
    params.insert("center", result.center.clone());
    let ck = Checkpoint {
        profile: profile_name,
        stage: "pretrain".into(),
        seed,
        history: result.history.clone(),
        params,
    };
    ck.save(&out)?;
    distill::write_loss_csv(&loss_csv_path(cfg, &out)?, &result.history)?;
    let last = result.history.last().map(|r| r.loss).unwrap_or(f32::NAN);
    println!("pretrain: {} frames, final loss {last:.4}, wrote {}", frames.len(), out.display());
    Ok(())
}

pub fn finetune(cfg: &RunConfig) -> Result<(), CliError> {
    let seed = cfg.seed()?;
    let out = cfg.path_required("out")?;
    let ck = load_checkpoint(cfg, "checkpoint")?;
    let enc = EncoderConfig::by_name(&ck.profile)?;
    let backbone = backbone_of(&ck);
    let (train, _) = load_split(cfg, &enc, seed)?;
    let labeled = labeled_frames(&train)?;

    let base = FinetuneConfig::defaults();
    let fc = FinetuneConfig {
        lr: cfg.f32_or("finetune.lr", base.lr)?,
        weight_decay: cfg.f32_or("finetune.weight_decay", base.weight_decay)?,
        epochs: cfg.usize_or("finetune.epochs", base.epochs)?,
        batch_size: cfg.usize_or("finetune.batch_size", base.batch_size)?,
        class_weights: cfg.bool_or("finetune.class_weights", base.class_weights)?,
    };
    let seeds = SeedStream::new(seed);
    let result = finetune::finetune(&backbone, &labeled, &enc, &fc, &seeds)?;
    let out_ck = Checkpoint {
        profile: ck.profile,
        stage: "finetune".into(),
        seed,
        history: result.history.clone(),
        params: result.params,
    };
    out_ck.save(&out)?;
    distill::write_loss_csv(&loss_csv_path(cfg, &out)?, &result.history)?;
    let last = result.history.last().map(|r| r.loss).unwrap_or(f32::NAN);
    println!(
        "finetune: {} frames, final loss {last:.4}, wrote {}",
        labeled.len(),
        out.display()
    );
    Ok(())
}

fn agg_config(cfg: &RunConfig, kind: AggregatorKind) -> Result<VideoClsConfig, CliError> {
    let base = VideoClsConfig::defaults();
    Ok(VideoClsConfig {
        lr: cfg.f32_or("videocls.lr", base.lr)?,
        weight_decay: cfg.f32_or("videocls.weight_decay", base.weight_decay)?,
        epochs: cfg.usize_or("videocls.epochs", base.epochs)?,
        batch_size: cfg.usize_or("videocls.batch_size", base.batch_size)?,
        tau_frame: cfg.f32_or("videocls.tau", base.tau_frame)?,
        whole_norm: cfg.bool_or("videocls.whole_norm", base.whole_norm)?,
        kind,
    })
}

pub fn videocls(cfg: &RunConfig) -> Result<(), CliError> {
    let seed = cfg.seed()?;
    let ck = load_checkpoint(cfg, "checkpoint")?;
    let enc = EncoderConfig::by_name(&ck.profile)?;
    let backbone = backbone_of(&ck);
    let kind_name = cfg.str_or("videocls.kind", "dual")?;

    if kind_name == "globmax" {
        // no trainable aggregation: score test videos with the frame
        // classifier and write a report
        if ck.params.get("classifier.weight").is_err() {
            return Err(runtime("globmax needs a finetuned checkpoint with a classifier"));
        }
        let out = cfg.path_required("out")?;
        let (_, test) = load_split(cfg, &enc, seed)?;
        let mut scores = Vec::new();
        let mut truth = Vec::new();
        for v in &test {
            let probs = finetune::predict_frames(&ck.params, &enc, &v.frames)?;
            let agg = aggregate::globmax_baseline(&probs)?;
            let mut row = [0.0f32; NUM_CLASSES];
            row.copy_from_slice(agg.data());
            scores.push(row);
            truth.push(v.label.ok_or_else(|| runtime(format!("video {} unlabeled", v.video_id)))?);
        }
        let report = EvalReport::from_scores("globmax", &scores, &truth)?;
        report.save(&out)?;
        println!("videocls(globmax): accuracy {:.4}, wrote {}", report.accuracy, out.display());
        return Ok(());
    }

    let kind = match kind_name.as_str() {
        "dual" => AggregatorKind::Dual,
        "netvlad" => AggregatorKind::NetVlad,
        other => {
            return Err(CliError::Usage(format!(
                "--videocls.kind: expected dual, netvlad, or globmax, got {other}"
            )))
        }
    };
    let out = cfg.path_required("out")?;
    let ac = agg_config(cfg, kind)?;
    let (train, _) = load_split(cfg, &enc, seed)?;
    let mut labeled = Vec::new();
    for (feats, label) in video_features(&enc, &backbone, &train)? {
        let label = label.ok_or_else(|| runtime("videocls needs labeled videos"))?;
        labeled.push((feats, label));
    }
    let seeds = SeedStream::new(seed);
    let result = aggregate::train_videocls(&labeled, enc.embed_dim, &ac, &seeds)?;
    let mut params = prefixed(&backbone, "backbone.");
    for (name, t) in result.params.iter() {
        params.insert(format!("aggregate.{name}"), t.clone());
    }
    params.insert("aggregate.kind", Tensor::scalar(if kind == AggregatorKind::Dual { 0.0 } else { 1.0 }));
    params.insert("aggregate.tau", Tensor::scalar(ac.tau_frame));
    params.insert("aggregate.whole_norm", Tensor::scalar(if ac.whole_norm { 1.0 } else { 0.0 }));
    let out_ck = Checkpoint {
        profile: ck.profile,
        stage: "videocls".into(),
        seed,
        history: result.history.clone(),
        params,
    };
    out_ck.save(&out)?;
    distill::write_loss_csv(&loss_csv_path(cfg, &out)?, &result.history)?;
    let last = result.history.last().map(|r| r.loss).unwrap_or(f32::NAN);
    println!(
        "videocls({kind_name}): {} videos, final loss {last:.4}, wrote {}",
        labeled.len(),
        out.display()
    );
    Ok(())
}

fn stored_agg_config(ck: &Checkpoint) -> Result<(ParamStore, VideoClsConfig), CliError> {
    let mut agg = ParamStore::new();
    for (name, t) in ck.params.iter() {
        if let Some(stripped) = name.strip_prefix("aggregate.") {
            if !matches!(stripped, "kind" | "tau" | "whole_norm") {
                agg.insert(stripped, t.clone());
            }
        }
    }
    let kind = if ck.params.get("aggregate.kind")?.data()[0] == 0.0 {
        AggregatorKind::Dual
    } else {
        AggregatorKind::NetVlad
    };
    let cfg = VideoClsConfig {
        tau_frame: ck.params.get("aggregate.tau")?.data()[0],
        whole_norm: ck.params.get("aggregate.whole_norm")?.data()[0] != 0.0,
        kind,
        ..VideoClsConfig::defaults()
    };
    Ok((agg, cfg))
}

pub fn eval(cfg: &RunConfig) -> Result<(), CliError> {
    let seed = cfg.seed()?;
    let ck = load_checkpoint(cfg, "checkpoint")?;
    let enc = EncoderConfig::by_name(&ck.profile)?;
    let out = cfg.path_required("out")?;
    let mode = cfg.str_or("eval.mode", "knn")?;
    let (train, test) = load_split(cfg, &enc, seed)?;

    let report = match mode.as_str() {
        "knn" | "linear" => {
            let backbone = backbone_of(&ck);
            let bank = labeled_features(&enc, &backbone, &train)?;
            let queries = labeled_features(&enc, &backbone, &test)?;
            let q: Vec<Tensor> = queries.iter().map(|(t, _)| t.clone()).collect();
            let truth: Vec<Label> = queries.iter().map(|(_, y)| *y).collect();
            let scores = if mode == "knn" {
                let k = cfg.usize_or("eval.k", eval::DEFAULT_KNN_K.min(bank.len()))?;
                eval::knn_scores(&bank, &q, k)?
            } else {
                let probe =
                    eval::linear_probe(&bank, &ProbeConfig::default(), &SeedStream::new(seed))?;
                eval::probe_scores(&probe, &q)?
            };
            EvalReport::from_scores(&mode, &scores, &truth)?
        }
        "finetuned" => {
            let mut scores = Vec::new();
            let mut truth = Vec::new();
            for v in &test {
                let label =
                    v.label.ok_or_else(|| runtime(format!("video {} unlabeled", v.video_id)))?;
                for p in finetune::predict_frames(&ck.params, &enc, &v.frames)? {
                    let mut row = [0.0f32; NUM_CLASSES];
                    row.copy_from_slice(p.data());
                    scores.push(row);
                    truth.push(label);
                }
            }
            EvalReport::from_scores("finetuned", &scores, &truth)?
        }
        "videocls" => {
            let backbone = backbone_of(&ck);
            let (agg, ac) = stored_agg_config(&ck)?;
            let mut scores = Vec::new();
            let mut truth = Vec::new();
            for (feats, label) in video_features(&enc, &backbone, &test)? {
                let probs = aggregate::predict_video(&agg, &feats, &ac)?;
                let mut row = [0.0f32; NUM_CLASSES];
                row.copy_from_slice(probs.data());
                scores.push(row);
                truth.push(label.ok_or_else(|| runtime("videocls eval needs labels"))?);
            }
            EvalReport::from_scores("videocls", &scores, &truth)?
        }
        other => {
            return Err(CliError::Usage(format!(
                "--eval.mode: expected knn, linear, finetuned, or videocls, got {other}"
            )))
        }
    };
    report.save(&out)?;
    write_metrics_csv(&out.with_extension("csv"), &report)?;
    println!(
        "eval({mode}): {} samples, accuracy {:.4}, macro AUC {}",
        report.sample_count,
        report.accuracy,
        report.macro_auc.map(|a| format!("{a:.4}")).unwrap_or_else(|| "n/a".into())
    );
    Ok(())
}

fn labeled_features(
    enc: &EncoderConfig,
    backbone: &ParamStore,
    videos: &[VideoSample],
) -> Result<Vec<(Tensor, Label)>, CliError> {
    let mut out = Vec::new();
    for v in videos {
        let label = v
            .label
            .ok_or_else(|| runtime(format!("video {} has no label", v.video_id)))?;
        for f in encoder::encode_batch(enc, backbone, "", &v.frames)? {
            out.push((f, label));
        }
    }
    Ok(out)
}

fn write_metrics_csv(path: &Path, report: &EvalReport) -> Result<(), CliError> {
    let mut text = String::from("metric,class,value\n");
    text.push_str(&format!("accuracy,,{}\n", report.accuracy));
    if let Some(auc) = report.macro_auc {
        text.push_str(&format!("macro_auc,,{auc}\n"));
    }
    for (c, auc) in report.per_class_auc.iter().enumerate() {
        if let Some(a) = auc {
            text.push_str(&format!("auc,{c},{a}\n"));
        }
    }
    std::fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

pub fn attention(cfg: &RunConfig) -> Result<(), CliError> {
    let seed = cfg.seed()?;
    let ck = load_checkpoint(cfg, "checkpoint")?;
    let enc = EncoderConfig::by_name(&ck.profile)?;
    let backbone = backbone_of(&ck);
    let out = cfg.path_required("out")?;
    let block = cfg.usize_or("attention.block", enc.depth - 1)?;
    let limit = cfg.usize_or("attention.limit", 8)?;
    if block >= enc.depth {
        return Err(CliError::Usage(format!(
            "--attention.block {block} out of range for depth {}",
            enc.depth
        )));
    }
    let (_, test) = load_split(cfg, &enc, seed)?;
    let mut written = 0;
    for v in test.iter().take(limit) {
        let mid = &v.frames[v.frames.len() / 2];
        eval::export_attention(&enc, &backbone, "", mid, block, &out, &v.video_id)?;
        written += 1;
    }
    println!("attention: wrote maps for {written} videos to {}", out.display());
    Ok(())
}
