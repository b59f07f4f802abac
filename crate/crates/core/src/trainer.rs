//! The training procedure: per-group learning rates with the two-thirds
//! drop, the frozen-backbone warmup, identity-balanced batches, masked and
//! augmented inputs, the four-term loss with its warped second pass for the
//! dense-descriptor term, per-step structured logging, validation-based
//! best checkpointing, and the ablation switchboard.

use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::datacore::{
    augment, load_rgb, make_side_entities, sample_batches, sample_batches_plain, AugmentationConfig,
    BatchPlan, DataError, DatasetManifest,
};
use crate::evalkit::{extract_features, plain_report, EvalError, ExtractOptions};
use crate::losskit::{
    batch_circle_loss, default_temperature, dve_loss_grad, id_loss_grad, lr_loss_grad, sample_warp,
    total_loss, CircleParams, DescriptorGrid, DveBatchInputs, LossBreakdown, LossError, LossParts,
    LossWeights, WarpField,
};
use crate::maskpipe::{apply_mask, read_mask, MaskError};
use crate::nettower::{
    load_checkpoint, normalize_image, save_checkpoint, stack_batch, Tower, TowerConfig, TowerError,
    TowerGrads,
};
use crate::nn::{sgd_step, ParamGroup, SgdConfig, Visit};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("config field `{field}`: {reason}")]
    BadConfig { field: &'static str, reason: String },
    #[error("epoch {epoch} out of range for {epochs}-epoch schedule")]
    EpochOutOfRange { epoch: usize, epochs: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] TowerError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("io on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("non-finite loss at epoch {epoch} step {step} ({detail}); batch: {records:?}")]
    NonFinite {
        epoch: usize,
        step: usize,
        detail: String,
        records: Vec<String>,
    },
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossToggles {
    pub id: bool,
    pub lr: bool,
    pub reid: bool,
    pub dve: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self {
            id: true,
            lr: true,
            reid: true,
            dve: true,
        }
    }
}

impl LossToggles {
    pub fn any(&self) -> bool {
        self.id || self.lr || self.reid || self.dve
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Backbone receives no updates for this many initial epochs.
    pub freeze_epochs: usize,
    pub lr_backbone: f64,
    pub lr_heads: f64,
    /// Both rates multiply by this at epoch ⌊2E/3⌋ (0-indexed).
    pub lr_drop_factor: f64,
    pub momentum: f32,
    pub weight_decay: f32,
    pub batch_p: usize,
    pub batch_k: usize,
    pub seed: u64,
    pub losses: LossToggles,
    pub weights: LossWeights,
    pub circle: CircleParams,
    pub label_smoothing: f64,
    /// Identity-balanced P×K batches; false falls back to plain shuffles.
    pub pk_sampler: bool,
    /// Treat each (entity, orientation) as its own training identity.
    pub split_sides: bool,
    /// Black out backgrounds using manifest masks before augmentation.
    pub use_masks: bool,
    pub warp_strength: f64,
    /// Fraction of training identities held out to pick the best
    /// checkpoint; 0 disables validation.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 80,
            freeze_epochs: 3,
            lr_backbone: 0.001,
            lr_heads: 0.01,
            lr_drop_factor: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_p: 10,
            batch_k: 3,
            seed: 0,
            losses: LossToggles::default(),
            weights: LossWeights::default(),
            circle: CircleParams::default(),
            label_smoothing: 0.1,
            pk_sampler: true,
            split_sides: true,
            use_masks: false,
            warp_strength: 1.0,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    /// Desk-scale preset for the bundled synthetic dataset.
    pub fn toy(seed: u64) -> Self {
        Self {
            epochs: 30,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |field: &'static str, reason: String| TrainError::BadConfig { field, reason };
        if self.epochs == 0 {
            return Err(bad("epochs", "must be at least 1".into()));
        }
        if self.freeze_epochs >= self.epochs {
            return Err(bad(
                "freeze_epochs",
                format!("{} must be below epochs {}", self.freeze_epochs, self.epochs),
            ));
        }
        for (field, v) in [
            ("lr_backbone", self.lr_backbone),
            ("lr_heads", self.lr_heads),
            ("lr_drop_factor", self.lr_drop_factor),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(bad(field, format!("{v} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&(self.momentum as f64)) {
            return Err(bad("momentum", format!("{} outside [0,1)", self.momentum)));
        }
        if self.weight_decay < 0.0 {
            return Err(bad("weight_decay", "must be non-negative".into()));
        }
        if self.batch_p == 0 || self.batch_k == 0 {
            return Err(bad("batch_p", "P and K must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(bad(
                "label_smoothing",
                format!("{} outside [0,1)", self.label_smoothing),
            ));
        }
        if !(0.0..=0.5).contains(&self.validation_fraction) {
            return Err(bad(
                "validation_fraction",
                format!("{} outside [0,0.5]", self.validation_fraction),
            ));
        }
        if self.warp_strength < 0.0 {
            return Err(bad("warp_strength", "must be non-negative".into()));
        }
        if !self.losses.any() {
            return Err(bad("losses", "at least one loss must be enabled".into()));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.batch_p * self.batch_k
    }
}

/// Piecewise-constant schedule: base rates, then a tenfold (by default)
/// drop from epoch ⌊2E/3⌋ on.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<(f64, f64), TrainError> {
    if epoch >= cfg.epochs {
        return Err(TrainError::EpochOutOfRange {
            epoch,
            epochs: cfg.epochs,
        });
    }
    let boundary = cfg.epochs * 2 / 3;
    if epoch >= boundary {
        Ok((
            cfg.lr_backbone * cfg.lr_drop_factor,
            cfg.lr_heads * cfg.lr_drop_factor,
        ))
    } else {
        Ok((cfg.lr_backbone, cfg.lr_heads))
    }
}

/// Split off `fraction` of identities for validation. Returns the training
/// subset (identities re-densified) and, when any were held out, the
/// validation subset.
pub fn split_validation(
    manifest: &DatasetManifest,
    fraction: f64,
    seed: u64,
) -> (DatasetManifest, Option<DatasetManifest>) {
    let c = manifest.num_entities as usize;
    let n_val = if fraction > 0.0 {
        ((c as f64 * fraction).round() as usize).max(1)
    } else {
        0
    };
    // keep at least two training identities so batches stay contrastive
    if n_val == 0 || c < n_val + 2 {
        return (manifest.clone(), None);
    }
    let mut ids: Vec<u32> = (0..c as u32).collect();
    use rand::seq::SliceRandom;
    ids.shuffle(&mut stream_rng(seed, Stream::Init, 1, 0));
    let val_set: std::collections::BTreeSet<u32> = ids[..n_val].iter().copied().collect();
    let train = subset(manifest, "train-sub", |id| !val_set.contains(&id));
    let val = subset(manifest, "val-sub", |id| val_set.contains(&id));
    (train, Some(val))
}

/// Records whose entity passes the filter, with entity ids re-densified in
/// first-appearance order.
fn subset(
    manifest: &DatasetManifest,
    name: &str,
    keep: impl Fn(u32) -> bool,
) -> DatasetManifest {
    let mut labels = Vec::new();
    let mut remap: std::collections::BTreeMap<u32, u32> = Default::default();
    let mut records = Vec::new();
    for r in &manifest.records {
        if !keep(r.entity_id) {
            continue;
        }
        let next = remap.len() as u32;
        let id = *remap.entry(r.entity_id).or_insert_with(|| {
            labels.push(manifest.entity_labels[r.entity_id as usize].clone());
            next
        });
        let mut r = r.clone();
        r.entity_id = id;
        records.push(r);
    }
    DatasetManifest {
        name: name.to_string(),
        split: manifest.split,
        num_entities: labels.len() as u32,
        entity_labels: labels,
        records,
        base_dir: manifest.base_dir.clone(),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub l_id: f64,
    pub l_lr: f64,
    pub l_reid: f64,
    pub l_dve: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub mean_total: f64,
    pub lr_backbone: f64,
    pub lr_heads: f64,
    pub frozen: bool,
    pub val_map: Option<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
    pub log_path: PathBuf,
    pub history: Vec<EpochSummary>,
    pub best_val_map: Option<f64>,
    pub entity_labels: Vec<String>,
    pub steps_run: usize,
}

struct LoadedBatch {
    x: Array4<f32>,
    ids: Vec<u32>,
    orientations: Vec<f64>,
    paths: Vec<String>,
}

fn load_batch(
    manifest: &DatasetManifest,
    indices: &[usize],
    aug: &AugmentationConfig,
    tower_cfg: &TowerConfig,
    use_masks: bool,
    seed: u64,
    epoch: usize,
    step: usize,
) -> Result<LoadedBatch, TrainError> {
    let mut tensors = Vec::with_capacity(indices.len());
    let mut ids = Vec::with_capacity(indices.len());
    let mut orientations = Vec::with_capacity(indices.len());
    let mut paths = Vec::with_capacity(indices.len());
    for (i, &rec_idx) in indices.iter().enumerate() {
        let rec = &manifest.records[rec_idx];
        let mut img = load_rgb(&manifest.resolve_path(&rec.image_path))?;
        if use_masks {
            if let Some(mask_rel) = &rec.mask_path {
                let mask = read_mask(&manifest.resolve_path(mask_rel))?;
                img = apply_mask(&img, &mask, [0, 0, 0])?;
            }
        }
        let mut rng = stream_rng(
            seed,
            Stream::Augment,
            epoch as u64,
            (step * indices.len() + i) as u64,
        );
        let (augmented, orientation, _record) = augment(&img, rec.orientation, aug, &mut rng);
        tensors.push(normalize_image(
            &augmented,
            tower_cfg.norm_mean,
            tower_cfg.norm_std,
        ));
        ids.push(rec.entity_id);
        orientations.push(orientation.as_f64());
        paths.push(rec.image_path.clone());
    }
    Ok(LoadedBatch {
        x: stack_batch(&tensors),
        ids,
        orientations,
        paths,
    })
}

/// For each sample, the batch index whose descriptor map serves as the
/// auxiliary exchange partner: the next sample of the same identity when
/// the batch has one (identity-balanced batches always do), else the next
/// sample outright.
fn aux_partners(ids: &[u32]) -> Vec<usize> {
    let n = ids.len();
    (0..n)
        .map(|i| {
            (1..n)
                .map(|k| (i + k) % n)
                .find(|&j| ids[j] == ids[i])
                .unwrap_or((i + 1) % n)
        })
        .collect()
}

fn add_grid_grad(dst: &mut Array4<f32>, sample: usize, grid: &Array2<f64>, scale: f64) {
    let (_, c, h, w) = dst.dim();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                dst[[sample, ch, y, x]] += (grid[[y * w + x, ch]] * scale) as f32;
            }
        }
    }
}

/// One optimization step over accumulated gradients; frozen backbones are
/// excluded entirely (weight decay must not leak into frozen parameters).
fn optimizer_step(tower: &mut Tower, lr_backbone: f64, lr_heads: f64, sgd: &SgdConfig) {
    let frozen = tower.is_frozen();
    tower.visit(&mut |p| {
        if frozen && p.group == ParamGroup::Backbone {
            return;
        }
        let lr = match p.group {
            ParamGroup::Backbone => lr_backbone,
            ParamGroup::Head => lr_heads,
        };
        sgd_step(p, lr as f32, sgd);
    });
    tower.zero_grad();
}

pub fn train(
    cfg: &TrainConfig,
    model: &TowerConfig,
    manifest: &DatasetManifest,
    out_dir: &Path,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    let working = if cfg.split_sides {
        make_side_entities(manifest)
    } else {
        manifest.clone()
    };
    let (train_sub, val_sub) = split_validation(&working, cfg.validation_fraction, cfg.seed);

    let mut tower_cfg = model.clone();
    tower_cfg.num_identities = train_sub.num_entities as usize;
    let mut tower = Tower::new(tower_cfg.clone(), cfg.seed)?;
    let labels = train_sub.entity_labels.clone();

    let aug = AugmentationConfig::for_size(tower_cfg.input_size as u32);
    let plan = BatchPlan::new(cfg.batch_p, cfg.batch_k);
    let sgd = SgdConfig {
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    };
    let dve_active = cfg.losses.dve && cfg.weights.lambda_dve != 0.0;
    let reid_active = cfg.losses.reid && cfg.weights.lambda_reid != 0.0;
    let temperature = default_temperature(tower_cfg.dve_dim);

    let log_path = out_dir.join("train_log.jsonl");
    let mut log = std::io::BufWriter::new(
        std::fs::File::create(&log_path).map_err(io_err(&log_path))?,
    );

    let final_path = out_dir.join("final.ckpt");
    let best_path = out_dir.join("best.ckpt");
    let mut best_val: Option<f64> = None;
    let mut history = Vec::new();
    let mut steps_run = 0usize;

    for epoch in 0..cfg.epochs {
        tower.freeze_backbone(epoch < cfg.freeze_epochs);
        let (lr_b, lr_h) = lr_at(epoch, cfg)?;
        let batches = if cfg.pk_sampler {
            sample_batches(&train_sub, &plan, cfg.seed, epoch as u64)?
        } else {
            sample_batches_plain(&train_sub, plan.batch_size(), cfg.seed, epoch as u64)
        };
        let mut total_sum = 0.0f64;
        for (step, batch) in batches.iter().enumerate() {
            let breakdown = train_step(
                cfg, &mut tower, &train_sub, batch, &aug, &tower_cfg, epoch, step, dve_active,
                reid_active, temperature,
            )?;
            total_sum += breakdown.total;
            optimizer_step(&mut tower, lr_b, lr_h, &sgd);
            let line = StepLog {
                epoch,
                step,
                l_id: breakdown.id,
                l_lr: breakdown.lr,
                l_reid: breakdown.reid,
                l_dve: breakdown.dve,
                total: breakdown.total,
            };
            serde_json::to_writer(&mut log, &line).expect("log line serializes");
            log.write_all(b"\n").map_err(io_err(&log_path))?;
            log.flush().map_err(io_err(&log_path))?;
            steps_run += 1;
        }

        let val_map = match &val_sub {
            Some(val) => {
                let (store, _) = extract_features(
                    &tower,
                    val,
                    &ExtractOptions {
                        use_masks: cfg.use_masks,
                        batch: plan.batch_size(),
                    },
                )?;
                let report = plain_report(&store, None)?;
                if best_val.map_or(true, |b| report.map > b) {
                    best_val = Some(report.map);
                    save_checkpoint(&mut tower, &labels, &best_path)?;
                }
                Some(report.map)
            }
            None => None,
        };
        history.push(EpochSummary {
            epoch,
            steps: batches.len(),
            mean_total: total_sum / batches.len().max(1) as f64,
            lr_backbone: lr_b,
            lr_heads: lr_h,
            frozen: epoch < cfg.freeze_epochs,
            val_map,
        });
    }

    save_checkpoint(&mut tower, &labels, &final_path)?;
    let history_path = out_dir.join("history.json");
    std::fs::write(
        &history_path,
        serde_json::to_string_pretty(&history).expect("history serializes"),
    )
    .map_err(io_err(&history_path))?;

    Ok(TrainOutcome {
        final_checkpoint: final_path,
        best_checkpoint: best_val.is_some().then_some(best_path),
        log_path,
        history,
        best_val_map: best_val,
        entity_labels: labels,
        steps_run,
    })
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    cfg: &TrainConfig,
    tower: &mut Tower,
    manifest: &DatasetManifest,
    batch: &[usize],
    aug: &AugmentationConfig,
    tower_cfg: &TowerConfig,
    epoch: usize,
    step: usize,
    dve_active: bool,
    reid_active: bool,
    temperature: f64,
) -> Result<LossBreakdown, TrainError> {
    let loaded = load_batch(
        manifest,
        batch,
        aug,
        tower_cfg,
        cfg.use_masks,
        cfg.seed,
        epoch,
        step,
    )?;
    let n = loaded.ids.len();
    let mut drop_rng = stream_rng(cfg.seed, Stream::Dropout, epoch as u64, step as u64);
    let (out, cache) = tower.forward_train(&loaded.x, &mut drop_rng)?;

    let mut parts = LossParts {
        id: 0.0,
        lr: 0.0,
        reid: None,
        dve: None,
    };
    let mut grads = TowerGrads {
        d_f: Array2::zeros(out.f.dim()),
        d_id_logits: Array2::zeros(out.id_logits.dim()),
        d_lr_logits: vec![0.0; n],
        d_dve: None,
    };

    if cfg.losses.id {
        let logits = out.id_logits.mapv(|v| v as f64);
        let (loss, grad) = id_loss_grad(&logits, &loaded.ids, cfg.label_smoothing)?;
        parts.id = loss;
        grads.d_id_logits = grad.mapv(|v| v as f32);
    }
    if cfg.losses.lr {
        let logits: Vec<f64> = out.lr_logits.iter().map(|&v| v as f64).collect();
        let (loss, grad) = lr_loss_grad(&logits, &loaded.orientations)?;
        parts.lr = loss;
        grads.d_lr_logits = grad.iter().map(|&v| v as f32).collect();
    }
    if reid_active {
        let emb = out.f.mapv(|v| v as f64);
        let outcome = batch_circle_loss(&emb, &loaded.ids, &cfg.circle);
        parts.reid = Some(outcome.loss);
        let w = cfg.weights.lambda_reid;
        grads.d_f = outcome.grad.mapv(|v| (v * w) as f32);
    }

    // the descriptor term runs the warped copies through the same weights
    // in a second pass; gradients from both passes accumulate before the
    // optimizer step
    let mut warped: Option<(crate::nettower::TowerCache, Array4<f32>)> = None;
    if dve_active {
        let (_, _, h, w) = loaded.x.dim();
        let mut xw = Array4::zeros(loaded.x.raw_dim());
        let mut fields: Vec<WarpField> = Vec::with_capacity(n);
        for i in 0..n {
            let field = sample_warp(
                cfg.seed,
                (epoch * 1_000_000 + step) as u64,
                i as u64,
                cfg.warp_strength,
            );
            let img = loaded.x.index_axis(Axis(0), i).to_owned();
            xw.index_axis_mut(Axis(0), i).assign(&field.warp_image(&img));
            fields.push(field);
        }
        let _ = (h, w);
        let mut warp_drop_rng =
            stream_rng(cfg.seed, Stream::Dropout, epoch as u64, 1_000_000 + step as u64);
        let (out_w, cache_w) = tower.forward_train(&xw, &mut warp_drop_rng)?;

        let (_, _, gh, gw) = out.dve.dim();
        let partners = aux_partners(&loaded.ids);
        let scale = cfg.weights.lambda_dve / n as f64;
        let mut d_main = Array4::zeros(out.dve.raw_dim());
        let mut d_warp = Array4::zeros(out.dve.raw_dim());
        let mut loss_sum = 0.0f64;
        for i in 0..n {
            let phi_x = DescriptorGrid::from_chw(&out.dve.index_axis(Axis(0), i).to_owned());
            let phi_xp = DescriptorGrid::from_chw(&out_w.dve.index_axis(Axis(0), i).to_owned());
            let phi_aux =
                DescriptorGrid::from_chw(&out.dve.index_axis(Axis(0), partners[i]).to_owned());
            let warp_grid = fields[i].grid(gh, gw);
            let (outcome, grad) = dve_loss_grad(&DveBatchInputs {
                phi_x: &phi_x,
                phi_xprime: &phi_xp,
                phi_aux: &phi_aux,
                warp_grid: &warp_grid,
                temperature,
            })?;
            loss_sum += outcome.loss;
            add_grid_grad(&mut d_main, i, &grad.phi_x, scale);
            add_grid_grad(&mut d_warp, i, &grad.phi_xprime, scale);
            add_grid_grad(&mut d_main, partners[i], &grad.phi_aux, scale);
        }
        parts.dve = Some(loss_sum / n as f64);
        grads.d_dve = Some(d_main);
        warped = Some((cache_w, d_warp));
    }

    let breakdown = total_loss(&parts, &cfg.weights).map_err(|e| TrainError::NonFinite {
        epoch,
        step,
        detail: e.to_string(),
        records: loaded.paths.clone(),
    })?;

    tower.backward(cache, &grads);
    if let Some((cache_w, d_warp)) = warped {
        let zero = TowerGrads {
            d_f: Array2::zeros((n, tower.config.embed_dim)),
            d_id_logits: Array2::zeros((n, tower.config.num_identities)),
            d_lr_logits: vec![0.0; n],
            d_dve: Some(d_warp),
        };
        tower.backward(cache_w, &zero);
    }
    Ok(breakdown)
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRowSpec {
    pub name: String,
    pub losses: LossToggles,
    pub pk_sampler: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationResult {
    pub name: String,
    pub map: f64,
    pub r1: f64,
}

/// The loss/sampler build-up grid, identification loss first, everything
/// last.
pub fn default_ablation_grid() -> Vec<AblationRowSpec> {
    let t = |id, lr, reid, dve| LossToggles { id, lr, reid, dve };
    vec![
        AblationRowSpec {
            name: "ID".into(),
            losses: t(true, false, false, false),
            pk_sampler: false,
        },
        AblationRowSpec {
            name: "ID+LR".into(),
            losses: t(true, true, false, false),
            pk_sampler: false,
        },
        AblationRowSpec {
            name: "ID+ReID".into(),
            losses: t(true, false, true, false),
            pk_sampler: false,
        },
        AblationRowSpec {
            name: "ID+LR+ReID".into(),
            losses: t(true, true, true, false),
            pk_sampler: false,
        },
        AblationRowSpec {
            name: "ID+sampler".into(),
            losses: t(true, false, false, false),
            pk_sampler: true,
        },
        AblationRowSpec {
            name: "ID+LR+sampler".into(),
            losses: t(true, true, false, false),
            pk_sampler: true,
        },
        AblationRowSpec {
            name: "ID+ReID+sampler".into(),
            losses: t(true, false, true, false),
            pk_sampler: true,
        },
        AblationRowSpec {
            name: "ID+LR+ReID+sampler".into(),
            losses: t(true, true, true, false),
            pk_sampler: true,
        },
        AblationRowSpec {
            name: "ID+LR+ReID+sampler+DVE".into(),
            losses: t(true, true, true, true),
            pk_sampler: true,
        },
    ]
}

/// Train one model per row and evaluate on the test manifest without
/// re-ranking. Row names become subdirectories of `out_dir`.
pub fn ablation_run(
    base: &TrainConfig,
    model: &TowerConfig,
    train_manifest: &DatasetManifest,
    test_manifest: &DatasetManifest,
    rows: &[AblationRowSpec],
    out_dir: &Path,
) -> Result<Vec<AblationResult>, TrainError> {
    let mut results = Vec::new();
    for row in rows {
        if !row.losses.any() {
            return Err(TrainError::BadConfig {
                field: "losses",
                reason: format!("ablation row `{}` enables no losses", row.name),
            });
        }
        let mut cfg = base.clone();
        cfg.losses = row.losses;
        cfg.pk_sampler = row.pk_sampler;
        let dir_name: String = row
            .name
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
            .collect();
        let row_dir = out_dir.join(dir_name);
        let outcome = train(&cfg, model, train_manifest, &row_dir)?;
        let (tower, _) = load_checkpoint(&outcome.final_checkpoint)?;
        let report = evaluate_manifest(&tower, test_manifest, cfg.split_sides, cfg.use_masks)?;
        results.push(AblationResult {
            name: row.name.clone(),
            map: report.map,
            r1: report.r1,
        });
    }
    Ok(results)
}

/// Plain-protocol evaluation of a trained model on a test manifest, under
/// the same side-splitting and masking conventions used in training.
pub fn evaluate_manifest(
    tower: &Tower,
    manifest: &DatasetManifest,
    split_sides: bool,
    use_masks: bool,
) -> Result<crate::evalkit::EvalReport, TrainError> {
    let working = if split_sides {
        make_side_entities(manifest)
    } else {
        manifest.clone()
    };
    let (store, _skipped) = extract_features(
        tower,
        &working,
        &ExtractOptions {
            use_masks,
            batch: 16,
        },
    )?;
    Ok(plain_report(&store, None)?)
}

pub fn render_ablation_table(rows: &[AblationResult]) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:<28} {:>8} {:>8}\n", "configuration", "mAP", "R@1"));
    for r in rows {
        out.push_str(&format!("{:<28} {:>8.4} {:>8.4}\n", r.name, r.map, r.r1));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};

    #[test]
    fn lr_schedule_matches_examples() {
        let cfg = TrainConfig {
            epochs: 80,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(0, &cfg).unwrap(), (0.001, 0.01));
        assert_eq!(lr_at(52, &cfg).unwrap(), (0.001, 0.01));
        // ⌊2·80/3⌋ = 53 is the first dropped epoch
        let (b, h) = lr_at(53, &cfg).unwrap();
        assert!((b - 1e-4).abs() < 1e-12 && (h - 1e-3).abs() < 1e-12);
        let (b, h) = lr_at(60, &cfg).unwrap();
        assert!((b - 1e-4).abs() < 1e-12 && (h - 1e-3).abs() < 1e-12);
        assert!(matches!(
            lr_at(80, &cfg),
            Err(TrainError::EpochOutOfRange { .. })
        ));
    }

    #[test]
    fn config_validation_names_fields() {
        let mut cfg = TrainConfig::default();
        cfg.freeze_epochs = 90;
        match cfg.validate() {
            Err(TrainError::BadConfig { field, .. }) => assert_eq!(field, "freeze_epochs"),
            other => panic!("expected BadConfig, got {other:?}"),
        }
        let mut cfg = TrainConfig::default();
        cfg.lr_heads = 0.0;
        match cfg.validate() {
            Err(TrainError::BadConfig { field, .. }) => assert_eq!(field, "lr_heads"),
            other => panic!("expected BadConfig, got {other:?}"),
        }
        let mut cfg = TrainConfig::default();
        cfg.losses = LossToggles {
            id: false,
            lr: false,
            reid: false,
            dve: false,
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn validation_split_is_disjoint_and_dense() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            train_entities: 5,
            test_entities: 2,
            train_per_side: 2,
            test_per_side: 1,
            ..SynthConfig::toy(dir.path(), 3)
        };
        let out = generate(&cfg).unwrap();
        let (manifest, _) =
            crate::datacore::load_manifest(&out.train_manifest, "t", crate::datacore::Split::Train)
                .unwrap();
        let sided = make_side_entities(&manifest);
        let (train, val) = split_validation(&sided, 0.1, 7);
        let val = val.unwrap();
        assert_eq!(
            train.num_entities + val.num_entities,
            sided.num_entities
        );
        assert_eq!(
            train.records.len() + val.records.len(),
            sided.records.len()
        );
        let train_labels: std::collections::BTreeSet<_> = train.entity_labels.iter().collect();
        assert!(val.entity_labels.iter().all(|l| !train_labels.contains(l)));
        // dense ids in both
        for m in [&train, &val] {
            let max = m.records.iter().map(|r| r.entity_id).max().unwrap();
            assert_eq!(max + 1, m.num_entities);
        }
        // zero fraction disables
        let (_, none) = split_validation(&sided, 0.0, 7);
        assert!(none.is_none());
    }

    fn tiny_setup(dir: &Path, seed: u64) -> (TrainConfig, TowerConfig, DatasetManifest) {
        let synth = SynthConfig {
            train_entities: 3,
            test_entities: 2,
            train_per_side: 3,
            test_per_side: 2,
            image_size: 32,
            ..SynthConfig::toy(dir, seed)
        };
        let out = generate(&synth).unwrap();
        let (manifest, _) =
            crate::datacore::load_manifest(&out.train_manifest, "t", crate::datacore::Split::Train)
                .unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            freeze_epochs: 1,
            batch_p: 3,
            batch_k: 2,
            seed,
            validation_fraction: 0.2,
            ..TrainConfig::default()
        };
        let mut model = TowerConfig::toy(0);
        model.input_size = 32;
        (cfg, model, manifest)
    }

    #[test]
    fn tiny_training_run_completes_with_finite_losses() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, model, manifest) = tiny_setup(dir.path(), 5);
        let out_dir = dir.path().join("run");
        let outcome = train(&cfg, &model, &manifest, &out_dir).unwrap();
        assert_eq!(outcome.history.len(), 2);
        assert!(outcome.steps_run >= 2);
        assert!(outcome.history[0].frozen && !outcome.history[1].frozen);
        assert!(outcome.best_val_map.is_some());
        // every step logged one finite record
        let log = std::fs::read_to_string(&outcome.log_path).unwrap();
        let lines: Vec<&str> = log.lines().collect();
        assert_eq!(lines.len(), outcome.steps_run);
        for line in lines {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v["total"].as_f64().unwrap().is_finite());
            for key in ["l_id", "l_lr", "l_reid", "l_dve"] {
                assert!(v[key].as_f64().unwrap().is_finite(), "{key}");
            }
        }
        // checkpoints load and evaluate
        let (tower, labels) = load_checkpoint(&outcome.final_checkpoint).unwrap();
        assert_eq!(labels, outcome.entity_labels);
        let report = evaluate_manifest(&tower, &manifest, cfg.split_sides, false).unwrap();
        assert!(report.map > 0.0 && report.map <= 1.0);
        assert!(outcome.best_checkpoint.unwrap().exists());
    }

    #[test]
    fn training_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, model, manifest) = tiny_setup(dir.path(), 11);
        let out_a = train(&cfg, &model, &manifest, &dir.path().join("a")).unwrap();
        let out_b = train(&cfg, &model, &manifest, &dir.path().join("b")).unwrap();
        let log_a = std::fs::read(&out_a.log_path).unwrap();
        let log_b = std::fs::read(&out_b.log_path).unwrap();
        assert_eq!(log_a, log_b);
        let ck_a = std::fs::read(&out_a.final_checkpoint).unwrap();
        let ck_b = std::fs::read(&out_b.final_checkpoint).unwrap();
        assert_eq!(ck_a, ck_b);
    }

    #[test]
    fn disabling_dve_matches_zero_weight_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let (mut cfg, model, manifest) = tiny_setup(dir.path(), 13);
        cfg.epochs = 1;
        cfg.freeze_epochs = 0;
        cfg.validation_fraction = 0.0;
        cfg.losses.dve = false;
        let toggled = train(&cfg, &model, &manifest, &dir.path().join("t")).unwrap();
        let mut cfg2 = cfg.clone();
        cfg2.losses.dve = true;
        cfg2.weights.lambda_dve = 0.0;
        let weighted = train(&cfg2, &model, &manifest, &dir.path().join("w")).unwrap();
        assert_eq!(
            std::fs::read(&toggled.final_checkpoint).unwrap(),
            std::fs::read(&weighted.final_checkpoint).unwrap()
        );
    }

    #[test]
    fn ablation_rejects_empty_rows_and_runs_small_grid() {
        let dir = tempfile::tempdir().unwrap();
        let (mut cfg, model, manifest) = tiny_setup(dir.path(), 17);
        cfg.epochs = 1;
        cfg.freeze_epochs = 0;
        cfg.validation_fraction = 0.0;
        let empty = vec![AblationRowSpec {
            name: "none".into(),
            losses: LossToggles {
                id: false,
                lr: false,
                reid: false,
                dve: false,
            },
            pk_sampler: true,
        }];
        assert!(matches!(
            ablation_run(&cfg, &model, &manifest, &manifest, &empty, &dir.path().join("x")),
            Err(TrainError::BadConfig { field: "losses", .. })
        ));
        let rows = vec![
            AblationRowSpec {
                name: "ID".into(),
                losses: LossToggles {
                    id: true,
                    lr: false,
                    reid: false,
                    dve: false,
                },
                pk_sampler: false,
            },
            AblationRowSpec {
                name: "ID+LR".into(),
                losses: LossToggles {
                    id: true,
                    lr: true,
                    reid: false,
                    dve: false,
                },
                pk_sampler: true,
            },
        ];
        let results =
            ablation_run(&cfg, &model, &manifest, &manifest, &rows, &dir.path().join("g")).unwrap();
        assert_eq!(results.len(), 2);
        let table = render_ablation_table(&results);
        assert!(table.contains("ID+LR"));
        assert_eq!(default_ablation_grid().len(), 9);
    }
}
