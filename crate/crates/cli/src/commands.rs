//! One function per subcommand; all return `CliError` so the dispatcher
//! owns exit codes.

use std::path::{Path, PathBuf};

use wildreid_core::datacore::{
    load_manifest, make_side_entities, validate_disjoint, DataError, DatasetManifest, Split,
};
use wildreid_core::evalkit::{
    camera_report, extract_features, plain_report, render_bias_table, render_report,
    transfer_eval, write_report_json, EvalReport, ExtractOptions, RerankParams,
};
use wildreid_core::maskpipe::{BatchFuseOptions, CriterionKind, FusionCriterion};
use wildreid_core::nettower::{load_checkpoint, Tower};
use wildreid_core::partviz::{match_point, preprocess, preprocess_hash, render_panel, MatchRequest};
use wildreid_core::synth::{generate, SynthConfig};
use wildreid_core::trainer::{
    ablation_run, default_ablation_grid, evaluate_manifest, train, TrainConfig,
};

use crate::config::ExperimentConfig;
use crate::{
    AblateArgs, BiasGridArgs, CliError, EvalArgs, FuseMasksArgs, MakeToyArgs, TrainArgs,
    TransferArgs, ValidateManifestArgs, VisualizeMatchArgs,
};

fn load_named(path: &Path, name: &str, split: Split) -> Result<DatasetManifest, CliError> {
    let (manifest, warnings) =
        load_manifest(path, name, split).map_err(|e| CliError::Other(e.into()))?;
    for w in &warnings {
        log::warn!("{}: {w:?}", path.display());
    }
    Ok(manifest)
}

fn maybe_side_split(manifest: &DatasetManifest, split_sides: bool) -> DatasetManifest {
    if split_sides {
        make_side_entities(manifest)
    } else {
        manifest.clone()
    }
}

fn load_experiment(config: Option<&Path>) -> Result<ExperimentConfig, CliError> {
    match config {
        Some(path) => ExperimentConfig::load(path),
        None => Ok(ExperimentConfig::default()),
    }
}

/// Text table to `report`, machine-readable record next to it. A `.json`
/// report path gets only the record file.
fn emit_report(report: &EvalReport, out: Option<&Path>) -> Result<(), CliError> {
    print!("{}", render_report(report));
    let Some(out) = out else { return Ok(()) };
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)
                .map_err(|e| CliError::Other(anyhow::anyhow!("creating {}: {e}", dir.display())))?;
        }
    }
    let json_path = out.with_extension("json");
    if json_path != out {
        std::fs::write(out, render_report(report))
            .map_err(|e| CliError::Other(anyhow::anyhow!("writing {}: {e}", out.display())))?;
    }
    write_report_json(report, &json_path).map_err(|e| CliError::Other(e.into()))?;
    Ok(())
}

pub fn cmd_make_toy(args: &MakeToyArgs) -> Result<(), CliError> {
    let cfg = SynthConfig {
        out_dir: args.out.clone(),
        train_entities: args.train_entities,
        test_entities: args.test_entities,
        train_per_side: args.train_per_side,
        test_per_side: args.test_per_side,
        image_size: args.image_size,
        cameras: args.cameras,
        biased_backgrounds: args.biased_backgrounds,
        emit_fusion_inputs: args.fusion_inputs,
        seed: args.seed,
    };
    let outcome = generate(&cfg).map_err(|e| CliError::Other(e.into()))?;
    println!(
        "wrote {} images\ntrain manifest: {}\ntest manifest:  {}",
        outcome.images,
        outcome.train_manifest.display(),
        outcome.test_manifest.display()
    );
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let mut exp = load_experiment(args.config.as_deref())?;
    if args.toy {
        exp.train = TrainConfig::toy(exp.train.seed);
        if args.config.is_none() {
            exp.model = crate::config::ModelBlock::default();
        }
    }
    if let Some(m) = &args.manifest {
        exp.dataset.train_manifest = Some(m.clone());
    }
    let mut exp = exp.resolve();
    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Other(anyhow::anyhow!("creating {}: {e}", args.out.display())))?;

    if exp.dataset.train_manifest.is_none() {
        if args.toy {
            let data_dir = args.out.join("toy-data");
            let outcome = generate(&SynthConfig::toy(&data_dir, exp.train.seed))
                .map_err(|e| CliError::Other(e.into()))?;
            log::info!("generated toy dataset ({} images)", outcome.images);
            exp.dataset.train_manifest = Some(outcome.train_manifest);
            exp.dataset.test_manifest = Some(outcome.test_manifest);
        } else {
            return Err(CliError::Config {
                field: "dataset.train_manifest".into(),
                reason: "required unless --toy generates one".into(),
            });
        }
    }
    exp.train.validate()?;
    let model_cfg = exp.model.build()?;
    exp.write_resolved(&args.out)?;

    let manifest_path = exp.dataset.train_manifest.clone().expect("set above");
    let manifest = load_named(&manifest_path, "train", Split::Train)?;
    let outcome = train(&exp.train, &model_cfg, &manifest, &args.out)?;
    println!(
        "trained {} epochs ({} steps), final checkpoint {}",
        outcome.history.len(),
        outcome.steps_run,
        outcome.final_checkpoint.display()
    );
    if let Some(v) = outcome.best_val_map {
        println!(
            "best validation mAP {:.4} -> {}",
            v,
            outcome
                .best_checkpoint
                .as_ref()
                .expect("best checkpoint accompanies best val")
                .display()
        );
    }

    if let Some(test_path) = &exp.dataset.test_manifest {
        let test = load_named(test_path, "test", Split::TestGallery)?;
        let (tower, _) = load_checkpoint(&outcome.final_checkpoint)
            .map_err(|e| CliError::Other(e.into()))?;
        let report =
            evaluate_manifest(&tower, &test, exp.train.split_sides, exp.train.use_masks)?;
        emit_report(&report, Some(&args.out.join("test_report.txt")))?;
    }
    Ok(())
}

fn checkpoint_tower(path: &Path) -> Result<Tower, CliError> {
    let (tower, _labels) = load_checkpoint(path).map_err(|e| CliError::Other(e.into()))?;
    Ok(tower)
}

fn extract(
    tower: &Tower,
    manifest: &DatasetManifest,
    use_masks: bool,
) -> Result<wildreid_core::evalkit::FeatureStore, CliError> {
    let (store, skipped) = extract_features(
        tower,
        manifest,
        &ExtractOptions {
            use_masks,
            batch: 16,
        },
    )
    .map_err(|e| CliError::Other(e.into()))?;
    for s in &skipped {
        log::warn!("skipped unreadable sample: {s}");
    }
    Ok(store)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let tower = checkpoint_tower(&args.checkpoint)?;
    let manifest = load_named(&args.manifest, "eval", Split::TestGallery)?;
    let manifest = maybe_side_split(&manifest, args.split_sides);
    let store = extract(&tower, &manifest, args.use_masks)?;
    let rerank = args.rerank.then(|| RerankParams {
        k1: args.k1,
        k2: args.k2,
        lambda: args.lambda,
    });
    let report = match args.protocol.as_str() {
        "plain" => plain_report(&store, rerank.as_ref()),
        "atrw" => camera_report(&store, rerank.as_ref()),
        other => {
            return Err(CliError::Config {
                field: "eval.protocol".into(),
                reason: format!("unknown protocol `{other}` (expected `plain` or `atrw`)"),
            })
        }
    }
    .map_err(|e| CliError::Other(e.into()))?;
    emit_report(&report, args.report.as_deref())
}

pub fn cmd_transfer(args: &TransferArgs) -> Result<(), CliError> {
    let tower = checkpoint_tower(&args.checkpoint)?;
    let manifest = load_named(&args.manifest, "transfer", Split::TestGallery)?;
    let manifest = maybe_side_split(&manifest, args.split_sides);
    let rerank = args.rerank.then(RerankParams::default);
    let (report, skipped) = transfer_eval(
        &tower,
        &manifest,
        &ExtractOptions {
            use_masks: args.use_masks,
            batch: 16,
        },
        rerank.as_ref(),
    )
    .map_err(|e| CliError::Other(e.into()))?;
    for s in &skipped {
        log::warn!("skipped unreadable sample: {s}");
    }
    emit_report(&report, args.report.as_deref())
}

pub fn cmd_bias_grid(args: &BiasGridArgs) -> Result<(), CliError> {
    let exp = load_experiment(args.config.as_deref())?.resolve();
    let model_cfg = exp.model.build()?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Other(anyhow::anyhow!("creating {}: {e}", args.out.display())))?;
    exp.write_resolved(&args.out)?;
    let train_manifest = load_named(&args.train_manifest, "train", Split::Train)?;
    let test_manifest = load_named(&args.test_manifest, "test", Split::TestGallery)?;
    let test_sided = maybe_side_split(&test_manifest, exp.train.split_sides);
    let has_cameras = test_sided.records.iter().all(|r| r.camera_id.is_some());

    let table = wildreid_core::evalkit::bias_grid(
        |masked| -> Result<Tower, CliError> {
            let mut cfg = exp.train.clone();
            cfg.use_masks = masked;
            let dir = args
                .out
                .join(if masked { "train-masked" } else { "train-original" });
            let outcome = train(&cfg, &model_cfg, &train_manifest, &dir)?;
            checkpoint_tower(&outcome.final_checkpoint)
        },
        |tower, masked| {
            let store = extract(tower, &test_sided, masked)?;
            let report = if has_cameras {
                camera_report(&store, None)
            } else {
                plain_report(&store, None)
            };
            report.map_err(|e| CliError::Other(e.into()))
        },
    )?;

    let rendered = render_bias_table(&table);
    print!("{rendered}");
    std::fs::write(args.out.join("bias_table.txt"), &rendered)
        .map_err(|e| CliError::Other(anyhow::anyhow!("writing bias table: {e}")))?;
    let json = serde_json::to_string_pretty(&table).expect("bias table serializes");
    std::fs::write(args.out.join("bias_grid.json"), json)
        .map_err(|e| CliError::Other(anyhow::anyhow!("writing bias grid record: {e}")))?;
    Ok(())
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<(), CliError> {
    let exp = load_experiment(args.config.as_deref())?.resolve();
    let model_cfg = exp.model.build()?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Other(anyhow::anyhow!("creating {}: {e}", args.out.display())))?;
    exp.write_resolved(&args.out)?;
    let train_manifest = load_named(&args.train_manifest, "train", Split::Train)?;
    let test_manifest = load_named(&args.test_manifest, "test", Split::TestGallery)?;
    let results = ablation_run(
        &exp.train,
        &model_cfg,
        &train_manifest,
        &test_manifest,
        &default_ablation_grid(),
        &args.out,
    )?;
    let rendered = wildreid_core::trainer::render_ablation_table(&results);
    print!("{rendered}");
    std::fs::write(args.out.join("ablation.txt"), &rendered)
        .map_err(|e| CliError::Other(anyhow::anyhow!("writing ablation table: {e}")))?;
    let json = serde_json::to_string_pretty(&results).expect("ablation rows serialize");
    std::fs::write(args.out.join("ablation.json"), json)
        .map_err(|e| CliError::Other(anyhow::anyhow!("writing ablation record: {e}")))?;
    Ok(())
}

pub fn cmd_fuse_masks(args: &FuseMasksArgs) -> Result<(), CliError> {
    let manifest = load_named(&args.manifest, "fuse", Split::Train)?;
    let kind = CriterionKind::parse(&args.criterion).map_err(|e| CliError::Config {
        field: "criterion".into(),
        reason: e.to_string(),
    })?;
    let criterion = if kind == CriterionKind::Passthrough {
        FusionCriterion::passthrough()
    } else {
        FusionCriterion::new(kind, args.threshold).map_err(|e| CliError::Config {
            field: "threshold".into(),
            reason: e.to_string(),
        })?
    };
    let opts = BatchFuseOptions {
        criterion,
        fill: args.fill,
        min_candidate_area: args.min_area,
    };
    let report = wildreid_core::maskpipe::batch_fuse(
        &manifest,
        &args.candidates,
        &args.reference,
        &args.out,
        &opts,
    )
    .map_err(|e| CliError::Other(e.into()))?;
    let table = args.out.join("fusion_report.tsv");
    report
        .write_table(&table)
        .map_err(|e| CliError::Other(e.into()))?;
    println!(
        "fused {} entries ({} skipped); report at {}",
        report.processed(),
        report.skipped(),
        table.display()
    );
    Ok(())
}

pub fn cmd_visualize_match(args: &VisualizeMatchArgs) -> Result<(), CliError> {
    let tower = checkpoint_tower(&args.checkpoint)?;
    let source = image::open(&args.source)
        .map_err(|e| CliError::Other(anyhow::anyhow!("reading {}: {e}", args.source.display())))?
        .to_rgb8();
    let target = image::open(&args.target)
        .map_err(|e| CliError::Other(anyhow::anyhow!("reading {}: {e}", args.target.display())))?
        .to_rgb8();
    let req = MatchRequest {
        source: &source,
        target: &target,
        point: args.point,
        layer: args.layer,
    };
    let outcome = match_point(&tower, &req).map_err(|e| CliError::Other(e.into()))?;
    for w in &outcome.warnings {
        log::warn!("{w}");
    }
    render_panel(&outcome, &args.out).map_err(|e| CliError::Other(e.into()))?;
    println!(
        "layer {}: query cell {:?} -> match cell {:?} (pixel {:.1},{:.1}), cosine {:.4}\npanel: {}",
        outcome.layer.name(),
        outcome.query_grid,
        outcome.best_grid,
        outcome.best_pixel.0,
        outcome.best_pixel.1,
        outcome.best_similarity,
        args.out.display()
    );

    if let Some(other_path) = &args.compare_checkpoint {
        let other = checkpoint_tower(other_path)?;
        // cross-model panels are only comparable under identical
        // preprocessing; verify by hashing the model inputs
        let same = preprocess_hash(&preprocess(&source, &tower))
            == preprocess_hash(&preprocess(&source, &other))
            && preprocess_hash(&preprocess(&target, &tower))
                == preprocess_hash(&preprocess(&target, &other));
        if !same {
            return Err(CliError::Other(anyhow::anyhow!(
                "comparison checkpoint preprocesses inputs differently (input size or normalization); panels would not be comparable"
            )));
        }
        let outcome2 = match_point(&other, &req).map_err(|e| CliError::Other(e.into()))?;
        let stem = args.out.file_stem().unwrap_or_default().to_string_lossy();
        let ext = args
            .out
            .extension()
            .map(|e| e.to_string_lossy().into_owned())
            .unwrap_or_else(|| "png".into());
        let compare_out = args.out.with_file_name(format!("{stem}-compare.{ext}"));
        render_panel(&outcome2, &compare_out).map_err(|e| CliError::Other(e.into()))?;
        println!(
            "comparison: match cell {:?}, cosine {:.4}\npanel: {}",
            outcome2.best_grid,
            outcome2.best_similarity,
            compare_out.display()
        );
    }
    Ok(())
}

pub fn cmd_validate_manifest(args: &ValidateManifestArgs) -> Result<(), CliError> {
    let summarize = |m: &DatasetManifest, path: &PathBuf| {
        println!(
            "{}: {} records, {} entities",
            path.display(),
            m.records.len(),
            m.num_entities
        );
    };
    let train = load_named(&args.train, "train", Split::Train)?;
    summarize(&train, &args.train);
    if let Some(test_path) = &args.test {
        let test = load_named(test_path, "test", Split::TestGallery)?;
        summarize(&test, test_path);
        match validate_disjoint(&train, &test) {
            Ok(()) => println!("train/test entities are disjoint"),
            Err(DataError::EntityOverlap(names)) => {
                return Err(CliError::Other(anyhow::anyhow!(
                    "entity overlap between train and test: {}",
                    names.join(", ")
                )))
            }
            Err(e) => return Err(CliError::Other(e.into())),
        }
    }
    Ok(())
}
