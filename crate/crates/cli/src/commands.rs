use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use safer_annotate::{Annotations, Server, ServiceConfig};
use safer_core::backbone::{export_feature_maps, feature_maps, BackboneHandle, SmallCnnParams};
use safer_core::curation::{
    bias_audit, consensus_all, extract_frames, save_frames, AnnotationStore, ConsensusRule,
};
use safer_core::explain::{face_evidence, render, ExplanationRecord, NeutralBaseline};
use safer_core::fusion::{load_checkpoint, predict, save_checkpoint, CheckpointHeader, StreamMask};
use safer_core::geometry::DetectorRegistry;
use safer_core::manifest::balance_report;
use safer_core::mask::{build_masked_manifest, MaskStyle};
use safer_core::training::{
    ablation_run, evaluate, parallel_map, split_dataset, train, FeaturePipeline, FeatureTable, ImagePipeline,
};
use safer_core::{DatasetManifest, EmotionLabel, PipelineConfig, Raster, SampleRecord, Split};

use crate::args::{AuditCommand, BackboneArg, Cli, Command, CurateCommand, Source, SplitArg};

pub struct Session {
    pub cfg: PipelineConfig,
    pub workers: usize,
    pub out: PathBuf,
}

impl Session {
    pub fn from_cli(cli: &Cli) -> Result<Self> {
        let mut cfg = match &cli.config {
            Some(p) => PipelineConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
            None => PipelineConfig::default(),
        };
        if let Some(s) = cli.seed {
            cfg.seed = s;
        }
        if let Some(e) = cli.epochs {
            cfg.epochs = e;
        }
        if let Some(lr) = cli.lr {
            cfg.initial_lr = lr;
        }
        if let Some(b) = cli.batch_size {
            cfg.batch_size = b;
        }
        cfg.validate()?;
        if cli.workers == 0 {
            bail!("--workers must be at least 1");
        }
        Ok(Session {
            cfg,
            workers: cli.workers,
            out: cli.out.clone(),
        })
    }

    fn out_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        Ok(&self.out)
    }

    fn out_file(&self, name: &str) -> Result<PathBuf> {
        Ok(self.out_dir()?.join(name))
    }
}

fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let abs = fs::canonicalize(path).with_context(|| format!("manifest {}", path.display()))?;
    Ok(DatasetManifest::load(&abs)?)
}

fn build_pipeline(cfg: &PipelineConfig, features: Option<&Path>) -> Result<Box<dyn FeaturePipeline>> {
    Ok(match features {
        Some(p) => Box::new(FeatureTable::load(p).with_context(|| format!("feature file {}", p.display()))?),
        None => Box::new(ImagePipeline::from_config(cfg)?),
    })
}

fn split_of(arg: SplitArg) -> Option<Split> {
    match arg {
        SplitArg::Train => Some(Split::Train),
        SplitArg::Val => Some(Split::Val),
        SplitArg::Test => Some(Split::Test),
        SplitArg::All => None,
    }
}

fn one_split(arg: SplitArg) -> Result<Split> {
    split_of(arg).context("this command needs one of --split train, val or test")
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn write_jsonl<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path).with_context(|| format!("writing {}", path.display()))?);
    for r in rows {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let ctx = Session::from_cli(&cli)?;
    match cli.command {
        Command::Features { manifest, split } => features(&ctx, &manifest, split),
        Command::Train { source, mask } => train_cmd(&ctx, &source, mask.as_deref()),
        Command::Eval {
            source,
            checkpoint,
            split,
            face_backbone,
        } => eval_cmd(&ctx, &source, &checkpoint, split, face_backbone.as_deref()),
        Command::Ablate { source, masks } => ablate(&ctx, &source, &masks),
        Command::Explain {
            source,
            checkpoint,
            baseline,
            split,
            ids,
        } => explain(&ctx, &source, &checkpoint, baseline.as_deref(), split, &ids),
        Command::FeatureMaps {
            image,
            landmarks,
            layers,
            channels,
            backbone,
        } => maps(&ctx, &image, landmarks.as_deref(), &layers, &channels, backbone),
        Command::MaskAugment {
            manifest,
            margin,
            opacity,
            color,
        } => mask_augment(&ctx, &manifest, margin, opacity, &color),
        Command::Curate { command } => match command {
            CurateCommand::Consensus {
                store,
                min_agreement,
                irrelevant_quorum,
            } => curate_consensus(&ctx, &store, min_agreement, irrelevant_quorum),
            CurateCommand::Frames { video, fps } => curate_frames(&ctx, &video, fps),
        },
        Command::Audit { command } => match command {
            AuditCommand::Bias { manifest } => audit_bias(&ctx, &manifest),
            AuditCommand::Balance { manifest } => audit_balance(&ctx, &manifest),
        },
        Command::ServeAnnotation {
            manifest,
            store,
            addr,
            panel_size,
            min_agreement,
            irrelevant_quorum,
        } => {
            let config = ServiceConfig {
                panel_size,
                rule: ConsensusRule::new(min_agreement, irrelevant_quorum)?,
            };
            serve(&manifest, &store, addr, config)
        }
        Command::Split { manifest, ratios } => split_cmd(&ctx, &manifest, ratios),
    }
}

fn features(ctx: &Session, manifest_path: &Path, split: SplitArg) -> Result<()> {
    let manifest = load_manifest(manifest_path)?;
    let pipeline = ImagePipeline::from_config(&ctx.cfg)?;
    let records: Vec<&SampleRecord> = match split_of(split) {
        Some(s) => manifest.split_records(s),
        None => manifest.records().iter().collect(),
    };
    let bundles = parallel_map(&records, ctx.workers, |r| {
        pipeline
            .extract(&manifest, r)
            .map_err(|e| safer_core::Error::Invalid(format!("record `{}`: {e}", r.id)))
    })?;
    let mut table = FeatureTable::new(pipeline.dims());
    for (r, b) in records.iter().zip(bundles) {
        table.insert(r.id.clone(), b)?;
    }
    let path = ctx.out_file("features.jsonl")?;
    table.save(&path)?;
    println!("wrote {} feature bundles to {}", table.len(), path.display());
    Ok(())
}

fn neutral_baseline(
    ctx: &Session,
    manifest: &DatasetManifest,
    pipeline: &dyn FeaturePipeline,
) -> Result<Option<NeutralBaseline>> {
    let neutral: Vec<&SampleRecord> = manifest
        .split_records(Split::Train)
        .into_iter()
        .filter(|r| r.label == Some(EmotionLabel::Neutral))
        .collect();
    if neutral.is_empty() {
        return Ok(None);
    }
    let visible = parallel_map(&neutral, ctx.workers, |r| Ok(pipeline.extract(manifest, r)?.visible))?;
    Ok(Some(NeutralBaseline::from_labeled(
        visible.iter().map(|v| (EmotionLabel::Neutral, v.as_slice())),
    )?))
}

fn train_cmd(ctx: &Session, source: &Source, mask: Option<&str>) -> Result<()> {
    let manifest = load_manifest(&source.manifest)?;
    let pipeline = build_pipeline(&ctx.cfg, source.features.as_deref())?;
    let mask: StreamMask = match mask {
        Some(m) => m.parse()?,
        None => ctx.cfg.stream_mask_default,
    };
    let outcome = train(&ctx.cfg, &manifest, pipeline.as_ref(), mask, ctx.workers)?;
    let ckpt = ctx.out_file("checkpoint.bin")?;
    let header = CheckpointHeader {
        config_hash: ctx.cfg.hash(),
        dims: pipeline.dims(),
        hidden: ctx.cfg.hidden_dim,
        mask,
        seed: ctx.cfg.seed,
    };
    save_checkpoint(&ckpt, &header, &outcome.params)?;
    let mut history = outcome.history;
    history.checkpoint = Some(ckpt.clone());
    write_json(&ctx.out_file("history.json")?, &history)?;
    ctx.cfg.save(ctx.out_file("config.json")?)?;
    if let Some(h) = &outcome.face_backbone {
        if let safer_core::backbone::Network::SmallCnn(p) = h.network() {
            p.save(&ctx.out_file("face_cnn.bin")?)?;
        }
    }
    match neutral_baseline(ctx, &manifest, pipeline.as_ref())? {
        Some(b) => b.save(&ctx.out_file("baseline.json")?)?,
        None => log::warn!("no Neutral training samples; explanations will need a baseline from elsewhere"),
    }
    println!(
        "best epoch {} of {}: val accuracy {:.4}; checkpoint {}",
        history.best_epoch,
        history.epochs.len(),
        history.best_val_accuracy,
        ckpt.display()
    );
    Ok(())
}

fn load_head(
    checkpoint: &Path,
    pipeline: &dyn FeaturePipeline,
    cfg: &PipelineConfig,
) -> Result<(CheckpointHeader, safer_core::fusion::ClassifierParams)> {
    let (header, params) = load_checkpoint(checkpoint)?;
    if header.dims != pipeline.dims() {
        bail!(
            "checkpoint feature dims {:?} do not match the pipeline {:?}",
            header.dims,
            pipeline.dims()
        );
    }
    if header.config_hash != cfg.hash() {
        log::warn!("checkpoint was trained under a different config");
    }
    Ok((header, params))
}

fn eval_cmd(
    ctx: &Session,
    source: &Source,
    checkpoint: &Path,
    split: SplitArg,
    face_backbone: Option<&Path>,
) -> Result<()> {
    let split = one_split(split)?;
    let manifest = load_manifest(&source.manifest)?;
    let pipeline = build_pipeline(&ctx.cfg, source.features.as_deref())?;
    let (header, params) = load_head(checkpoint, pipeline.as_ref(), &ctx.cfg)?;
    let cnn = face_backbone
        .map(|p| SmallCnnParams::load(p).map(BackboneHandle::small_cnn))
        .transpose()?;
    let report = evaluate(&params, &manifest, split, pipeline.as_ref(), header.mask, cnn.as_ref(), ctx.workers)?;
    report.confusion.save_csv(&ctx.out_file("confusion.csv")?)?;
    report.confusion.save_heatmap(&ctx.out_file("confusion.png")?, 32)?;
    write_jsonl(&ctx.out_file("predictions.jsonl")?, &report.predictions)?;
    write_json(
        &ctx.out_file("eval.json")?,
        &serde_json::json!({
            "split": split.to_string(),
            "mask": header.mask.to_string(),
            "accuracy": report.accuracy,
            "correct": report.confusion.trace(),
            "total": report.confusion.total(),
        }),
    )?;
    println!(
        "accuracy {:.4} ({}/{}) on {split}",
        report.accuracy,
        report.confusion.trace(),
        report.confusion.total()
    );
    Ok(())
}

fn ablate(ctx: &Session, source: &Source, masks: &str) -> Result<()> {
    let masks: Vec<StreamMask> = masks
        .split(',')
        .map(|m| m.trim().parse::<StreamMask>())
        .collect::<safer_core::Result<_>>()?;
    let manifest = load_manifest(&source.manifest)?;
    let pipeline = build_pipeline(&ctx.cfg, source.features.as_deref())?;
    let report = ablation_run(&ctx.cfg, &manifest, pipeline.as_ref(), &masks, ctx.workers)?;
    let csv = report.to_csv();
    fs::write(ctx.out_file("ablation.csv")?, &csv)?;
    print!("{csv}");
    Ok(())
}

fn explain(
    ctx: &Session,
    source: &Source,
    checkpoint: &Path,
    baseline: Option<&Path>,
    split: SplitArg,
    ids: &[String],
) -> Result<()> {
    let manifest = load_manifest(&source.manifest)?;
    let pipeline = build_pipeline(&ctx.cfg, source.features.as_deref())?;
    let (header, params) = load_head(checkpoint, pipeline.as_ref(), &ctx.cfg)?;
    let baseline_path = match baseline {
        Some(p) => p.to_path_buf(),
        None => checkpoint.with_file_name("baseline.json"),
    };
    let baseline = NeutralBaseline::load(&baseline_path)?;
    let records: Vec<&SampleRecord> = if ids.is_empty() {
        match split_of(split) {
            Some(s) => manifest.split_records(s),
            None => manifest.records().iter().collect(),
        }
    } else {
        ids.iter()
            .map(|id| manifest.get(id).with_context(|| format!("no record `{id}` in the manifest")))
            .collect::<Result<_>>()?
    };
    let out = parallel_map(&records, ctx.workers, |r| {
        let bundle = pipeline.extract(&manifest, r)?;
        let (emotion, probs) = predict(&params, &bundle, header.mask)?;
        let evidence = face_evidence(&bundle.visible, Some(&baseline), ctx.cfg.explanation_threshold)?;
        let e = render(emotion, &evidence, &bundle.place_info);
        Ok(ExplanationRecord::new(&r.id, probs, e, bundle.place_info))
    })?;
    write_jsonl(&ctx.out_file("explanations.jsonl")?, &out)?;
    for e in &out {
        println!("{}: {}", e.sample_id, e.rendered);
    }
    Ok(())
}

fn maps(
    ctx: &Session,
    image: &Path,
    landmarks: Option<&Path>,
    layers: &[usize],
    channels: &[usize],
    which: BackboneArg,
) -> Result<()> {
    let pipeline = ImagePipeline::from_config(&ctx.cfg)?;
    let size = ctx.cfg.image_size;
    let input = match landmarks {
        Some(lm) => {
            let abs = |p: &Path| fs::canonicalize(p).with_context(|| format!("{}", p.display()));
            let mut rec = SampleRecord::new("image", abs(image)?);
            rec.landmark_path = Some(abs(lm)?);
            let m = DatasetManifest::new("adhoc", vec![rec])?;
            let a = pipeline.analyze(&m, &m.records()[0])?;
            match which {
                BackboneArg::Face => a.face_crop,
                BackboneArg::Background => a.background.image().clone(),
            }
        }
        None => Raster::load(image)?.resize(size, size),
    };
    let handle = match which {
        BackboneArg::Face => BackboneHandle::face_from_config(&ctx.cfg)?,
        BackboneArg::Background => pipeline.background_cnn().clone(),
    };
    let chosen = (!channels.is_empty()).then_some(channels);
    let fm = feature_maps(&handle, &input, layers, chosen)?;
    let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let written = export_feature_maps(&fm, stem, ctx.out_dir()?)?;
    println!("wrote {} feature maps to {}", written.len(), ctx.out.display());
    Ok(())
}

fn mask_augment(ctx: &Session, manifest_path: &Path, margin: f64, opacity: f32, color: &[f32]) -> Result<()> {
    if color.len() != 3 {
        bail!("--color takes three values, got {}", color.len());
    }
    let manifest = load_manifest(manifest_path)?;
    let style = MaskStyle {
        color: [color[0], color[1], color[2]],
        opacity,
        margin,
    };
    let detector = DetectorRegistry::default().get(&ctx.cfg.detector)?;
    let out = build_masked_manifest(&manifest, &style, ctx.out_dir()?, detector.as_ref())?;
    println!(
        "masked {} records ({} skipped); manifest {}",
        out.manifest.records().len(),
        out.skipped.len(),
        out.manifest_path.display()
    );
    Ok(())
}

fn curate_consensus(ctx: &Session, store: &Path, min_agreement: usize, quorum: usize) -> Result<()> {
    let rule = ConsensusRule::new(min_agreement, quorum)?;
    if !store.exists() {
        bail!("annotation store {} does not exist", store.display());
    }
    let log = AnnotationStore::open(store)?;
    let results = consensus_all(log.records(), rule);
    write_json(&ctx.out_file("consensus.json")?, &results)?;
    for r in &results {
        println!("{}", serde_json::to_string(r)?);
    }
    Ok(())
}

fn curate_frames(ctx: &Session, video: &Path, fps: f64) -> Result<()> {
    let frames = extract_frames(video, fps)?;
    let prov = save_frames(&frames, video, &ctx.out_file("frames")?)?;
    write_jsonl(&ctx.out_file("frames.jsonl")?, &prov)?;
    println!("extracted {} frames at {fps} fps", prov.len());
    Ok(())
}

fn audit_bias(ctx: &Session, manifest_path: &Path) -> Result<()> {
    let audit = bias_audit(&load_manifest(manifest_path)?)?;
    let csv = audit.to_csv();
    fs::write(ctx.out_file("bias.csv")?, &csv)?;
    write_json(&ctx.out_file("bias.json")?, &audit)?;
    print!("{csv}");
    Ok(())
}

fn audit_balance(ctx: &Session, manifest_path: &Path) -> Result<()> {
    let report = balance_report(&load_manifest(manifest_path)?)?;
    write_json(&ctx.out_file("balance.json")?, &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn serve(manifest_path: &Path, store: &Path, addr: std::net::SocketAddr, config: ServiceConfig) -> Result<()> {
    let manifest = load_manifest(manifest_path)?;
    let annotations = Annotations::new(manifest, AnnotationStore::open(store)?, config)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let server = Server::bind(addr, annotations).await?;
        println!("annotation service listening on http://{}", server.local_addr()?);
        server.run().await
    })?;
    Ok(())
}

/// Paths become absolute so the manifest stays valid in a new directory.
fn rebased(manifest: &DatasetManifest, records: &[SampleRecord]) -> Vec<SampleRecord> {
    records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.image_path = manifest.resolve(&r.image_path);
            r.landmark_path = r.landmark_path.as_deref().map(|p| manifest.resolve(p));
            r.person_mask_path = r.person_mask_path.as_deref().map(|p| manifest.resolve(p));
            r
        })
        .collect()
}

fn split_cmd(ctx: &Session, manifest_path: &Path, ratios: Option<Vec<f64>>) -> Result<()> {
    let manifest = load_manifest(manifest_path)?;
    let ratios = match ratios {
        Some(r) if r.len() == 3 => [r[0], r[1], r[2]],
        Some(r) => bail!("--ratios takes three values, got {}", r.len()),
        None => ctx.cfg.split_ratios,
    };
    let outcome = split_dataset(&manifest, ratios, ctx.cfg.seed)?;
    for l in &outcome.small_classes {
        log::warn!("class {l} has too few samples to split; all of it went to train");
    }
    let records = rebased(&outcome.manifest, outcome.manifest.records());
    let out = DatasetManifest::new(outcome.manifest.name(), records)?;
    let path = ctx.out_file("manifest.jsonl")?;
    out.save(&path)?;
    for s in [Split::Train, Split::Val, Split::Test] {
        println!("{s}: {}", out.split_records(s).len());
    }
    println!("wrote {}", path.display());
    Ok(())
}
