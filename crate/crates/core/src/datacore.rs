//! Dataset manifests, labeling, batch sampling and augmentation.
//!
//! A manifest is a delimiter-separated text file with a header row naming
//! at least `path`, `entity` and `orientation`, plus optional `camera` and
//! `mask` columns. Raw entity labels are re-mapped to dense ids in order of
//! first appearance; the mapping is retained for reports and for the
//! train/test disjointness check, which compares raw labels.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use image::{imageops, RgbImage};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{stream_rng, Stream};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("manifest {path}: missing required column {column:?}")]
    MissingColumn { path: PathBuf, column: String },
    #[error("manifest {path} line {line}: unknown orientation token {token:?}")]
    BadOrientation {
        path: PathBuf,
        line: usize,
        token: String,
    },
    #[error("manifest {path} line {line}: bad {field} value {value:?}")]
    BadField {
        path: PathBuf,
        line: usize,
        field: String,
        value: String,
    },
    #[error("manifest {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("io on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("batch plan wants {requested} identities but only {available} are available")]
    NotEnoughIdentities { requested: usize, available: usize },
    #[error("train and test share entities: {0:?}")]
    EntityOverlap(Vec<String>),
    #[error("record {index}: orientation missing")]
    MissingOrientation { index: usize },
    #[error("failed to decode image {path}: {reason}")]
    BadImage { path: PathBuf, reason: String },
}

/// Side of the animal the image shows. Flipping the image flips the label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Orientation {
    Left = 0,
    Right = 1,
}

impl Orientation {
    pub fn parse(token: &str) -> Option<Self> {
        match token.trim().to_ascii_lowercase().as_str() {
            "left" | "l" | "0" => Some(Self::Left),
            "right" | "r" | "1" => Some(Self::Right),
            _ => None,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Self::Left => Self::Right,
            Self::Right => Self::Left,
        }
    }

    pub fn as_index(self) -> usize {
        self as usize
    }

    pub fn as_f64(self) -> f64 {
        self.as_index() as f64
    }
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Left => "left",
            Self::Right => "right",
        })
    }
}

/// One image with its labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image_path: String,
    /// Dense id in `[0, num_entities)`.
    pub entity_id: u32,
    pub orientation: Orientation,
    pub camera_id: Option<u32>,
    pub mask_path: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    TestQuery,
    TestGallery,
}

/// Non-fatal issues found while loading.
#[derive(Debug, Clone, PartialEq)]
pub enum ManifestWarning {
    DuplicatePath { path: String, lines: (usize, usize) },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub split: Split,
    pub records: Vec<SampleRecord>,
    pub num_entities: u32,
    /// Dense id -> raw label from the file, in first-appearance order.
    pub entity_labels: Vec<String>,
    /// Directory the manifest was loaded from; relative record paths
    /// resolve against it.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn resolve_path(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn has_cameras(&self) -> bool {
        self.records.iter().all(|r| r.camera_id.is_some()) && !self.records.is_empty()
    }

    /// Record indices grouped by dense entity id.
    pub fn by_entity(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_entities as usize];
        for (i, r) in self.records.iter().enumerate() {
            groups[r.entity_id as usize].push(i);
        }
        groups
    }

    pub fn raw_label_set(&self) -> HashSet<&str> {
        self.records
            .iter()
            .map(|r| self.entity_labels[r.entity_id as usize].as_str())
            .collect()
    }
}

/// Load a manifest file. Returns the manifest plus any row-level warnings.
pub fn load_manifest(
    path: &Path,
    name: &str,
    split: Split,
) -> Result<(DatasetManifest, Vec<ManifestWarning>), DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(false)
        .from_path(path)
        .map_err(|source| DataError::Csv {
            path: path.to_path_buf(),
            source,
        })?;

    let headers = reader
        .headers()
        .map_err(|source| DataError::Csv {
            path: path.to_path_buf(),
            source,
        })?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let need = |name: &str| {
        col(name).ok_or_else(|| DataError::MissingColumn {
            path: path.to_path_buf(),
            column: name.to_string(),
        })
    };
    let path_col = need("path")?;
    let entity_col = need("entity")?;
    let orient_col = need("orientation")?;
    let camera_col = col("camera");
    let mask_col = col("mask");

    let mut labels: Vec<String> = Vec::new();
    let mut label_ids: HashMap<String, u32> = HashMap::new();
    let mut seen_paths: HashMap<String, usize> = HashMap::new();
    let mut warnings = Vec::new();
    let mut records = Vec::new();

    for (row_idx, row) in reader.records().enumerate() {
        let line = row_idx + 2; // header is line 1
        let row = row.map_err(|source| DataError::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        let get = |i: usize| row.get(i).unwrap_or("").to_string();

        let image_path = get(path_col);
        if let Some(first) = seen_paths.insert(image_path.clone(), line) {
            warnings.push(ManifestWarning::DuplicatePath {
                path: image_path.clone(),
                lines: (first, line),
            });
        }

        let raw_entity = get(entity_col);
        if raw_entity.is_empty() {
            return Err(DataError::BadField {
                path: path.to_path_buf(),
                line,
                field: "entity".into(),
                value: raw_entity,
            });
        }
        let next_id = labels.len() as u32;
        let entity_id = *label_ids.entry(raw_entity.clone()).or_insert_with(|| {
            labels.push(raw_entity.clone());
            next_id
        });

        let token = get(orient_col);
        let orientation = Orientation::parse(&token).ok_or_else(|| DataError::BadOrientation {
            path: path.to_path_buf(),
            line,
            token: token.clone(),
        })?;

        let camera_id = match camera_col {
            None => None,
            Some(ci) => {
                let v = get(ci);
                if v.is_empty() {
                    None
                } else {
                    Some(v.parse::<u32>().map_err(|_| DataError::BadField {
                        path: path.to_path_buf(),
                        line,
                        field: "camera".into(),
                        value: v,
                    })?)
                }
            }
        };
        let mask_path = mask_col.map(|mi| get(mi)).filter(|v| !v.is_empty());

        records.push(SampleRecord {
            image_path,
            entity_id,
            orientation,
            camera_id,
            mask_path,
        });
    }

    let base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    Ok((
        DatasetManifest {
            name: name.to_string(),
            split,
            num_entities: labels.len() as u32,
            entity_labels: labels,
            records,
            base_dir,
        },
        warnings,
    ))
}

/// Write a manifest in the on-disk format `load_manifest` reads.
pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), DataError> {
    let has_cam = manifest.records.iter().any(|r| r.camera_id.is_some());
    let has_mask = manifest.records.iter().any(|r| r.mask_path.is_some());
    let mut out = String::from("path,entity,orientation");
    if has_cam {
        out.push_str(",camera");
    }
    if has_mask {
        out.push_str(",mask");
    }
    out.push('\n');
    for r in &manifest.records {
        out.push_str(&format!(
            "{},{},{}",
            r.image_path, manifest.entity_labels[r.entity_id as usize], r.orientation
        ));
        if has_cam {
            out.push(',');
            if let Some(c) = r.camera_id {
                out.push_str(&c.to_string());
            }
        }
        if has_mask {
            out.push(',');
            if let Some(m) = &r.mask_path {
                out.push_str(m);
            }
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Derive per-side entities: the new entity is the (entity, orientation)
/// pair, densified in first-appearance order. Raw labels gain a `/left`
/// or `/right` suffix.
pub fn make_side_entities(manifest: &DatasetManifest) -> DatasetManifest {
    let mut labels: Vec<String> = Vec::new();
    let mut ids: HashMap<(u32, Orientation), u32> = HashMap::new();
    let mut records = manifest.records.clone();
    for r in &mut records {
        let key = (r.entity_id, r.orientation);
        let next = labels.len() as u32;
        let id = *ids.entry(key).or_insert_with(|| {
            labels.push(format!(
                "{}/{}",
                manifest.entity_labels[r.entity_id as usize], r.orientation
            ));
            next
        });
        r.entity_id = id;
    }
    DatasetManifest {
        name: manifest.name.clone(),
        split: manifest.split,
        num_entities: labels.len() as u32,
        entity_labels: labels,
        records,
        base_dir: manifest.base_dir.clone(),
    }
}

/// Hard check that train and test share no raw entity label.
///
/// Side-entity labels (`x/left`) are reduced to their base label first, so
/// the check is on individuals, not sides.
pub fn validate_disjoint(train: &DatasetManifest, test: &DatasetManifest) -> Result<(), DataError> {
    let base = |l: &str| l.split('/').next().unwrap_or(l).to_string();
    let train_set: HashSet<String> = train.raw_label_set().iter().map(|l| base(l)).collect();
    let mut overlap: Vec<String> = test
        .raw_label_set()
        .iter()
        .map(|l| base(l))
        .filter(|l| train_set.contains(l))
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    overlap.sort();
    if overlap.is_empty() {
        Ok(())
    } else {
        Err(DataError::EntityOverlap(overlap))
    }
}

/// P identities x K instances per batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub identities_per_batch: usize,
    pub instances_per_identity: usize,
}

impl BatchPlan {
    pub fn new(p: usize, k: usize) -> Self {
        Self {
            identities_per_batch: p,
            instances_per_identity: k,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.identities_per_batch * self.instances_per_identity
    }
}

impl Default for BatchPlan {
    // P=10, K=3 lands on the batch size 30 used throughout.
    fn default() -> Self {
        Self::new(10, 3)
    }
}

/// One epoch of identity-balanced batches. Each batch holds exactly P
/// identities with exactly K record indices each; identities with fewer
/// than K samples are completed by resampling with replacement. Every
/// identity appears in at least one batch per epoch.
pub fn sample_batches(
    manifest: &DatasetManifest,
    plan: &BatchPlan,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<usize>>, DataError> {
    let groups: Vec<Vec<usize>> = manifest
        .by_entity()
        .into_iter()
        .filter(|g| !g.is_empty())
        .collect();
    let p = plan.identities_per_batch;
    let k = plan.instances_per_identity;
    if groups.len() < p {
        return Err(DataError::NotEnoughIdentities {
            requested: p,
            available: groups.len(),
        });
    }

    let mut rng = stream_rng(seed, Stream::Sampler, epoch, 0);
    let n_samples = manifest.records.len();
    // Enough batches to cover every sample once in expectation, and never
    // fewer than needed to show every identity.
    let n_batches = (n_samples.div_ceil(p * k)).max(groups.len().div_ceil(p));

    // Identity order: a shuffled cycle, reshuffled on exhaustion, with no
    // identity repeated within one batch.
    let mut id_pool: Vec<usize> = (0..groups.len()).collect();
    id_pool.shuffle(&mut rng);
    let mut id_cursor = 0usize;

    let mut batches = Vec::with_capacity(n_batches);
    for _ in 0..n_batches {
        let mut chosen: Vec<usize> = Vec::with_capacity(p);
        let mut in_batch = vec![false; groups.len()];
        while chosen.len() < p {
            if id_cursor == id_pool.len() {
                id_pool.shuffle(&mut rng);
                id_cursor = 0;
            }
            let id = id_pool[id_cursor];
            id_cursor += 1;
            if !in_batch[id] {
                in_batch[id] = true;
                chosen.push(id);
            }
        }

        let mut batch = Vec::with_capacity(p * k);
        for &id in &chosen {
            let group = &groups[id];
            if group.len() >= k {
                let mut picks: Vec<usize> = group.clone();
                picks.shuffle(&mut rng);
                batch.extend_from_slice(&picks[..k]);
            } else {
                // all of them, then fill with replacement
                batch.extend_from_slice(group);
                for _ in group.len()..k {
                    batch.push(group[rng.random_range(0..group.len())]);
                }
            }
        }
        batches.push(batch);
    }
    Ok(batches)
}

/// Plain shuffled fixed-size batches; the sampler-off ablation arm.
pub fn sample_batches_plain(
    manifest: &DatasetManifest,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Vec<Vec<usize>> {
    let mut rng = stream_rng(seed, Stream::Sampler, epoch, 1);
    let mut idx: Vec<usize> = (0..manifest.records.len()).collect();
    idx.shuffle(&mut rng);
    idx.chunks(batch_size)
        .filter(|c| c.len() == batch_size)
        .map(|c| c.to_vec())
        .collect()
}

/// What to put under an erased patch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum EraseFill {
    /// Mean color of the image being augmented.
    Mean,
    Rgb([u8; 3]),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    /// Output raster is always `target_size` x `target_size`.
    pub target_size: u32,
    /// Resize-before-crop edge; `None` derives 8/7 of the target.
    pub pre_crop_size: Option<u32>,
    pub crop: bool,
    pub erase_prob: f64,
    pub erase_area: (f64, f64),
    pub erase_aspect: (f64, f64),
    pub erase_fill: EraseFill,
    pub flip_prob: f64,
}

impl AugmentationConfig {
    pub fn for_size(target_size: u32) -> Self {
        Self {
            target_size,
            pre_crop_size: None,
            crop: true,
            erase_prob: 0.5,
            erase_area: (0.02, 0.2),
            erase_aspect: (0.3, 1.0 / 0.3),
            erase_fill: EraseFill::Mean,
            flip_prob: 0.5,
        }
    }

    /// Identity up to the resize: no crop, no erase, no flip.
    pub fn disabled(target_size: u32) -> Self {
        Self {
            target_size,
            pre_crop_size: None,
            crop: false,
            erase_prob: 0.0,
            erase_area: (0.02, 0.2),
            erase_aspect: (0.3, 1.0 / 0.3),
            erase_fill: EraseFill::Mean,
            flip_prob: 0.0,
        }
    }

    pub fn effective_pre_crop(&self) -> u32 {
        self.pre_crop_size
            .unwrap_or(((self.target_size as f64) * 8.0 / 7.0).round() as u32)
    }
}

/// Geometry of one augmentation draw, kept for reproducibility.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugRecord {
    pub flipped: bool,
    pub crop_xy: (u32, u32),
    pub erase_rect: Option<(u32, u32, u32, u32)>,
}

/// Augment one decoded image: resize, random crop, horizontal flip with
/// orientation adjustment, random patch erase. Deterministic in `rng`.
pub fn augment(
    image: &RgbImage,
    orientation: Orientation,
    config: &AugmentationConfig,
    rng: &mut impl Rng,
) -> (RgbImage, Orientation, AugRecord) {
    let target = config.target_size;
    let mut record = AugRecord {
        flipped: false,
        crop_xy: (0, 0),
        erase_rect: None,
    };

    let mut out = if config.crop {
        let pre = config.effective_pre_crop().max(target);
        let resized = imageops::resize(image, pre, pre, imageops::FilterType::Triangle);
        let max_off = pre - target;
        let x = if max_off > 0 { rng.random_range(0..=max_off) } else { 0 };
        let y = if max_off > 0 { rng.random_range(0..=max_off) } else { 0 };
        record.crop_xy = (x, y);
        imageops::crop_imm(&resized, x, y, target, target).to_image()
    } else {
        imageops::resize(image, target, target, imageops::FilterType::Triangle)
    };

    let mut orientation = orientation;
    if config.flip_prob > 0.0 && rng.random_bool(config.flip_prob) {
        out = imageops::flip_horizontal(&out);
        orientation = orientation.flipped();
        record.flipped = true;
    }

    if config.erase_prob > 0.0 && rng.random_bool(config.erase_prob) {
        let area = rng.random_range(config.erase_area.0..=config.erase_area.1);
        let aspect = rng.random_range(config.erase_aspect.0..=config.erase_aspect.1);
        let patch_area = area * (target as f64) * (target as f64);
        let eh = ((patch_area * aspect).sqrt().round() as u32).clamp(1, target);
        let ew = ((patch_area / aspect).sqrt().round() as u32).clamp(1, target);
        let ex = rng.random_range(0..=target - ew);
        let ey = rng.random_range(0..=target - eh);
        let fill = match config.erase_fill {
            EraseFill::Rgb(rgb) => rgb,
            EraseFill::Mean => {
                let mut sums = [0u64; 3];
                for px in out.pixels() {
                    for c in 0..3 {
                        sums[c] += px.0[c] as u64;
                    }
                }
                let n = (out.width() * out.height()) as u64;
                [
                    (sums[0] / n) as u8,
                    (sums[1] / n) as u8,
                    (sums[2] / n) as u8,
                ]
            }
        };
        for y in ey..ey + eh {
            for x in ex..ex + ew {
                out.put_pixel(x, y, image::Rgb(fill));
            }
        }
        record.erase_rect = Some((ex, ey, ew, eh));
    }

    (out, orientation, record)
}

/// Decode an image file as RGB.
pub fn load_rgb(path: &Path) -> Result<RgbImage, DataError> {
    image::open(path)
        .map(|img| img.into_rgb8())
        .map_err(|e| DataError::BadImage {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_manifest(content: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("anno.csv");
        let mut f = std::fs::File::create(&p).unwrap();
        f.write_all(content.as_bytes()).unwrap();
        (dir, p)
    }

    #[test]
    fn dense_remap_and_token_map() {
        let (_d, p) = write_manifest(
            "path,entity,orientation\n\
             a.png,tiger7,L\n\
             b.png,tiger3,R\n\
             c.png,tiger7,left\n\
             d.png,tiger9,right\n\
             e.png,tiger3,0\n\
             f.png,tiger9,1\n",
        );
        let (m, warnings) = load_manifest(&p, "t", Split::Train).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(m.num_entities, 3);
        assert_eq!(m.entity_labels, vec!["tiger7", "tiger3", "tiger9"]);
        assert_eq!(m.records[0].entity_id, 0);
        assert_eq!(m.records[1].entity_id, 1);
        assert_eq!(m.records[2].entity_id, 0);
        assert_eq!(m.records[0].orientation, Orientation::Left);
        assert_eq!(m.records[1].orientation, Orientation::Right);
        assert_eq!(m.records[4].orientation, Orientation::Left);
    }

    #[test]
    fn missing_column_is_named() {
        let (_d, p) = write_manifest("path,entity\na.png,x\n");
        match load_manifest(&p, "t", Split::Train) {
            Err(DataError::MissingColumn { column, .. }) => assert_eq!(column, "orientation"),
            other => panic!("expected MissingColumn, got {other:?}"),
        }
    }

    #[test]
    fn bad_orientation_names_line() {
        let (_d, p) = write_manifest("path,entity,orientation\na.png,x,left\nb.png,y,sideways\n");
        match load_manifest(&p, "t", Split::Train) {
            Err(DataError::BadOrientation { line, token, .. }) => {
                assert_eq!(line, 3);
                assert_eq!(token, "sideways");
            }
            other => panic!("expected BadOrientation, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_paths_warn_but_load() {
        let (_d, p) = write_manifest("path,entity,orientation\na.png,x,left\na.png,x,right\n");
        let (m, warnings) = load_manifest(&p, "t", Split::Train).unwrap();
        assert_eq!(m.records.len(), 2);
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn side_entities_split_by_orientation() {
        let (_d, p) = write_manifest(
            "path,entity,orientation\n\
             a.png,x,left\nb.png,x,right\nc.png,y,left\nd.png,y,right\ne.png,z,left\n",
        );
        let (m, _) = load_manifest(&p, "t", Split::Train).unwrap();
        let side = make_side_entities(&m);
        assert_eq!(side.num_entities, 5);
        assert_eq!(side.entity_labels[0], "x/left");
        // one-sided entity derives a single class
        assert!(side.entity_labels.contains(&"z/left".to_string()));
        // distinct (entity, side) pair count on a mixed fixture
        let pairs: HashSet<(u32, Orientation)> = m
            .records
            .iter()
            .map(|r| (r.entity_id, r.orientation))
            .collect();
        assert_eq!(side.num_entities as usize, pairs.len());
    }

    #[test]
    fn disjointness_checks_base_labels() {
        let (_d1, p1) = write_manifest("path,entity,orientation\na.png,x,left\nb.png,y,left\n");
        let (_d2, p2) = write_manifest("path,entity,orientation\nc.png,y,right\nd.png,z,left\n");
        let (train, _) = load_manifest(&p1, "t", Split::Train).unwrap();
        let (test, _) = load_manifest(&p2, "t", Split::TestGallery).unwrap();
        match validate_disjoint(&train, &test) {
            Err(DataError::EntityOverlap(names)) => assert_eq!(names, vec!["y"]),
            other => panic!("expected overlap error, got {other:?}"),
        }
        // side-entity suffixes reduce to base labels
        let side_train = make_side_entities(&train);
        assert!(matches!(
            validate_disjoint(&side_train, &test),
            Err(DataError::EntityOverlap(_))
        ));
    }

    fn synthetic_manifest(entities: u32, per_entity: usize) -> DatasetManifest {
        let mut records = Vec::new();
        let mut labels = Vec::new();
        for e in 0..entities {
            labels.push(format!("e{e}"));
            for i in 0..per_entity {
                records.push(SampleRecord {
                    image_path: format!("e{e}_{i}.png"),
                    entity_id: e,
                    orientation: Orientation::Left,
                    camera_id: None,
                    mask_path: None,
                });
            }
        }
        DatasetManifest {
            name: "syn".into(),
            split: Split::Train,
            records,
            num_entities: entities,
            entity_labels: labels,
            base_dir: PathBuf::from("."),
        }
    }

    #[test]
    fn pk_batches_have_exact_shape() {
        let m = synthetic_manifest(12, 5);
        let plan = BatchPlan::new(10, 3);
        let batches = sample_batches(&m, &plan, 7, 0).unwrap();
        for batch in &batches {
            assert_eq!(batch.len(), 30);
            let mut counts: HashMap<u32, usize> = HashMap::new();
            for &i in batch {
                *counts.entry(m.records[i].entity_id).or_default() += 1;
            }
            assert_eq!(counts.len(), 10);
            assert!(counts.values().all(|&c| c == 3));
        }
    }

    #[test]
    fn singleton_identity_resamples_with_replacement() {
        let mut m = synthetic_manifest(10, 4);
        // make entity 0 a singleton
        m.records.retain(|r| r.entity_id != 0 || r.image_path.ends_with("_0.png"));
        let batches = sample_batches(&m, &BatchPlan::new(10, 3), 3, 0).unwrap();
        let singleton_idx: Vec<usize> = m
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.entity_id == 0)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(singleton_idx.len(), 1);
        let batch_with = batches
            .iter()
            .find(|b| b.contains(&singleton_idx[0]))
            .expect("singleton must appear");
        let occurrences = batch_with.iter().filter(|&&i| i == singleton_idx[0]).count();
        assert_eq!(occurrences, 3);
    }

    #[test]
    fn sampler_is_deterministic_and_covers_every_identity() {
        let m = synthetic_manifest(23, 3);
        let plan = BatchPlan::new(7, 2);
        let a = sample_batches(&m, &plan, 99, 4).unwrap();
        let b = sample_batches(&m, &plan, 99, 4).unwrap();
        assert_eq!(a, b);
        let c = sample_batches(&m, &plan, 100, 4).unwrap();
        assert_ne!(a, c);

        let mut seen: HashSet<u32> = HashSet::new();
        for batch in &a {
            for &i in batch {
                seen.insert(m.records[i].entity_id);
            }
        }
        assert_eq!(seen.len(), 23);
    }

    #[test]
    fn too_few_identities_is_a_config_error() {
        let m = synthetic_manifest(4, 3);
        assert!(matches!(
            sample_batches(&m, &BatchPlan::new(10, 3), 0, 0),
            Err(DataError::NotEnoughIdentities { requested: 10, available: 4 })
        ));
    }

    fn gradient_image(w: u32, h: u32) -> RgbImage {
        let mut img = RgbImage::new(w, h);
        for (x, y, px) in img.enumerate_pixels_mut() {
            px.0 = [(x % 256) as u8, (y % 256) as u8, ((x + y) % 256) as u8];
        }
        img
    }

    #[test]
    fn flip_adjusts_orientation_label() {
        let img = gradient_image(64, 64);
        let mut cfg = AugmentationConfig::disabled(32);
        cfg.flip_prob = 1.0;
        let mut rng = stream_rng(1, Stream::Test, 0, 0);
        let (_, o, rec) = augment(&img, Orientation::Left, &cfg, &mut rng);
        assert_eq!(o, Orientation::Right);
        assert!(rec.flipped);
    }

    #[test]
    fn no_flip_keeps_orientation() {
        let img = gradient_image(64, 64);
        let cfg = AugmentationConfig::disabled(32);
        let mut rng = stream_rng(1, Stream::Test, 0, 1);
        let (out, o, rec) = augment(&img, Orientation::Left, &cfg, &mut rng);
        assert_eq!(o, Orientation::Left);
        assert!(!rec.flipped);
        assert_eq!(out.dimensions(), (32, 32));
    }

    #[test]
    fn double_flip_restores_pixels_and_label() {
        let img = gradient_image(32, 32);
        let once = imageops::flip_horizontal(&img);
        let twice = imageops::flip_horizontal(&once);
        assert_eq!(twice, img);
        assert_eq!(Orientation::Left.flipped().flipped(), Orientation::Left);
    }

    #[test]
    fn erase_overwrites_expected_pixel_count() {
        let img = gradient_image(224, 224);
        let mut cfg = AugmentationConfig::for_size(224);
        cfg.crop = false;
        cfg.flip_prob = 0.0;
        cfg.erase_prob = 1.0;
        cfg.erase_area = (0.1, 0.1);
        cfg.erase_aspect = (1.0, 1.0);
        cfg.erase_fill = EraseFill::Rgb([7, 7, 7]);
        let mut rng = stream_rng(5, Stream::Test, 0, 2);
        let (out, _, rec) = augment(&img, Orientation::Left, &cfg, &mut rng);
        let (_, _, ew, eh) = rec.erase_rect.unwrap();
        let want = (0.1f64 * 224.0 * 224.0).sqrt().round() as u32;
        assert_eq!((ew, eh), (want, want));
        let count = out.pixels().filter(|p| p.0 == [7, 7, 7]).count() as u32;
        // the erased rect dominates; a few gradient pixels may coincide
        assert!(count >= ew * eh, "count {count} < {}", ew * eh);
    }

    #[test]
    fn disabled_augmentation_is_resize_only() {
        let img = gradient_image(48, 48);
        let cfg = AugmentationConfig::disabled(48);
        let mut rng = stream_rng(0, Stream::Test, 1, 0);
        let (out, o, _) = augment(&img, Orientation::Right, &cfg, &mut rng);
        assert_eq!(out, img);
        assert_eq!(o, Orientation::Right);
    }

    #[test]
    fn manifest_roundtrip() {
        let (_d, p) = write_manifest(
            "path,entity,orientation,camera\na.png,x,left,0\nb.png,y,right,2\n",
        );
        let (m, _) = load_manifest(&p, "t", Split::Train).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("copy.csv");
        save_manifest(&m, &out).unwrap();
        let (m2, _) = load_manifest(&out, "t", Split::Train).unwrap();
        assert_eq!(m.records, m2.records);
        assert_eq!(m.entity_labels, m2.entity_labels);
    }
}
