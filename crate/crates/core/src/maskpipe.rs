//! Segmentation-mask fusion and background blanking.
//!
//! Candidate object masks (one file per candidate) are filtered against a
//! single reference mask by an overlap criterion, the survivors are unioned
//! into the foreground mask, and the image background is blanked with a
//! fill color. Batch processing walks a manifest and writes one fused mask
//! and one masked image per entry.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write as IoWrite};
use std::path::{Path, PathBuf};

use image::RgbImage;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::datacore::DatasetManifest;
use crate::par;

#[derive(Debug, thiserror::Error)]
pub enum MaskError {
    #[error("mask shape mismatch: expected {expected_h}x{expected_w}, got {got_h}x{got_w}")]
    ShapeMismatch {
        expected_h: usize,
        expected_w: usize,
        got_h: usize,
        got_w: usize,
    },
    #[error("threshold {0} outside [0, 1]")]
    BadThreshold(f64),
    #[error("unknown criterion kind {0:?} (expected iou, ioc or passthrough)")]
    BadKind(String),
    #[error("empty mask file {0}")]
    EmptyMask(PathBuf),
    #[error("bad run-length line {line} in {path}: {reason}")]
    BadRle {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to decode {path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

/// A 2-D boolean foreground raster. Stored as 0/1 bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    bits: Array2<u8>,
}

impl BinaryMask {
    /// Build from a 0/1 raster; any nonzero byte counts as foreground.
    pub fn new(raw: Array2<u8>) -> Self {
        Self {
            bits: raw.mapv(|v| u8::from(v != 0)),
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            bits: Array2::zeros((height, width)),
        }
    }

    /// Binarize a soft mask at half of its maximum value. An all-zero soft
    /// mask stays all-zero.
    pub fn from_soft(soft: &Array2<f32>) -> Self {
        let max = soft.iter().cloned().fold(0.0f32, f32::max);
        if max <= 0.0 {
            return Self::zeros(soft.nrows(), soft.ncols());
        }
        let cut = 0.5 * max;
        Self {
            bits: soft.mapv(|v| u8::from(v >= cut)),
        }
    }

    pub fn height(&self) -> usize {
        self.bits.nrows()
    }

    pub fn width(&self) -> usize {
        self.bits.ncols()
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[[row, col]] != 0
    }

    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.bits[[row, col]] = u8::from(on);
    }

    pub fn bits(&self) -> &Array2<u8> {
        &self.bits
    }

    /// Foreground pixel count, the |m| of the overlap criteria.
    pub fn area(&self) -> usize {
        self.bits.iter().map(|&v| v as usize).sum()
    }

    pub fn same_shape(&self, other: &BinaryMask) -> bool {
        self.bits.dim() == other.bits.dim()
    }

    fn require_same_shape(&self, other: &BinaryMask) -> Result<(), MaskError> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(MaskError::ShapeMismatch {
                expected_h: self.height(),
                expected_w: self.width(),
                got_h: other.height(),
                got_w: other.width(),
            })
        }
    }

    pub fn intersection_area(&self, other: &BinaryMask) -> Result<usize, MaskError> {
        self.require_same_shape(other)?;
        Ok(self
            .bits
            .iter()
            .zip(other.bits.iter())
            .filter(|(&a, &b)| a != 0 && b != 0)
            .count())
    }

    pub fn union_area(&self, other: &BinaryMask) -> Result<usize, MaskError> {
        self.require_same_shape(other)?;
        Ok(self
            .bits
            .iter()
            .zip(other.bits.iter())
            .filter(|(&a, &b)| a != 0 || b != 0)
            .count())
    }

    /// In-place pixelwise OR.
    pub fn union_with(&mut self, other: &BinaryMask) -> Result<(), MaskError> {
        self.require_same_shape(other)?;
        ndarray::Zip::from(&mut self.bits)
            .and(&other.bits)
            .for_each(|a, &b| *a |= b);
        Ok(())
    }

    /// Pixelwise `self <= other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> Result<bool, MaskError> {
        self.require_same_shape(other)?;
        Ok(self
            .bits
            .iter()
            .zip(other.bits.iter())
            .all(|(&a, &b)| a == 0 || b != 0))
    }

    /// Read a single-channel image file; nonzero luma is foreground.
    pub fn read_image(path: &Path) -> Result<Self, MaskError> {
        let img = image::open(path)
            .map_err(|source| MaskError::Decode {
                path: path.to_path_buf(),
                source,
            })?
            .into_luma8();
        let (w, h) = img.dimensions();
        let bits = Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
            u8::from(img.get_pixel(c as u32, r as u32).0[0] != 0)
        });
        Ok(Self { bits })
    }

    /// Write as an 8-bit single-channel PNG with foreground = 255.
    pub fn write_png(&self, path: &Path) -> Result<(), MaskError> {
        let mut img = image::GrayImage::new(self.width() as u32, self.height() as u32);
        for ((r, c), &v) in self.bits.indexed_iter() {
            img.put_pixel(c as u32, r as u32, image::Luma([if v != 0 { 255 } else { 0 }]));
        }
        img.save(path).map_err(|source| MaskError::Decode {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Read the run-length text codec: a `HxW` header line, then one
    /// `start:len` pair per line of foreground runs in row-major order.
    pub fn read_rle(path: &Path) -> Result<Self, MaskError> {
        let file = fs::File::open(path).map_err(|source| MaskError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let reader = BufReader::new(file);
        let mut lines = reader.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| MaskError::EmptyMask(path.to_path_buf()))?;
        let header = header.map_err(|source| MaskError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let dims: Vec<&str> = header.trim().split('x').collect();
        if dims.len() != 2 {
            return Err(MaskError::BadRle {
                path: path.to_path_buf(),
                line: 1,
                reason: format!("expected HxW header, got {header:?}"),
            });
        }
        let parse_dim = |s: &str, line| {
            s.trim().parse::<usize>().map_err(|_| MaskError::BadRle {
                path: path.to_path_buf(),
                line,
                reason: format!("bad dimension {s:?}"),
            })
        };
        let h = parse_dim(dims[0], 1)?;
        let w = parse_dim(dims[1], 1)?;
        let mut mask = BinaryMask::zeros(h, w);
        let total = h * w;
        for (idx, line) in lines {
            let line = line.map_err(|source| MaskError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = |reason: String| MaskError::BadRle {
                path: path.to_path_buf(),
                line: idx + 1,
                reason,
            };
            let (start, len) = line
                .split_once(':')
                .ok_or_else(|| bad(format!("expected start:len, got {line:?}")))?;
            let start: usize = start.trim().parse().map_err(|_| bad(format!("bad start {start:?}")))?;
            let len: usize = len.trim().parse().map_err(|_| bad(format!("bad length {len:?}")))?;
            if start + len > total {
                return Err(bad(format!("run {start}:{len} exceeds {h}x{w} raster")));
            }
            for i in start..start + len {
                mask.bits[[i / w, i % w]] = 1;
            }
        }
        Ok(mask)
    }

    pub fn write_rle(&self, path: &Path) -> Result<(), MaskError> {
        let mut out = String::new();
        out.push_str(&format!("{}x{}\n", self.height(), self.width()));
        let w = self.width();
        let mut run_start: Option<usize> = None;
        let total = self.height() * w;
        for i in 0..=total {
            let on = i < total && self.bits[[i / w, i % w]] != 0;
            match (run_start, on) {
                (None, true) => run_start = Some(i),
                (Some(s), false) => {
                    out.push_str(&format!("{}:{}\n", s, i - s));
                    run_start = None;
                }
                _ => {}
            }
        }
        fs::write(path, out).map_err(|source| MaskError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Load a mask stored either as run-length text (`.rle`) or any supported
/// image format.
pub fn read_mask(path: &Path) -> Result<BinaryMask, MaskError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("rle") => BinaryMask::read_rle(path),
        _ => BinaryMask::read_image(path),
    }
}

/// Which overlap score filters the candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CriterionKind {
    /// Intersection over union with the reference.
    Iou,
    /// Intersection over the candidate's own area.
    IntersectionOverCandidate,
    /// Keep every candidate, ignore the threshold.
    Passthrough,
}

impl CriterionKind {
    pub fn parse(s: &str) -> Result<Self, MaskError> {
        match s.to_ascii_lowercase().as_str() {
            "iou" => Ok(Self::Iou),
            "ioc" | "intersection-over-candidate" => Ok(Self::IntersectionOverCandidate),
            "passthrough" | "none" => Ok(Self::Passthrough),
            other => Err(MaskError::BadKind(other.to_string())),
        }
    }
}

impl fmt::Display for CriterionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Iou => "iou",
            Self::IntersectionOverCandidate => "ioc",
            Self::Passthrough => "passthrough",
        };
        f.write_str(s)
    }
}

/// A filter criterion: accept a candidate when its score against the
/// reference is at least `threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionCriterion {
    pub kind: CriterionKind,
    pub threshold: f64,
}

impl FusionCriterion {
    pub fn new(kind: CriterionKind, threshold: f64) -> Result<Self, MaskError> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(MaskError::BadThreshold(threshold));
        }
        Ok(Self { kind, threshold })
    }

    pub fn passthrough() -> Self {
        Self {
            kind: CriterionKind::Passthrough,
            threshold: 0.0,
        }
    }
}

/// Overlap score of a candidate against the reference, in [0, 1].
///
/// Ratios with an empty denominator are defined as 0, so empty candidates
/// are always rejected.
pub fn criterion_score(
    candidate: &BinaryMask,
    reference: &BinaryMask,
    kind: CriterionKind,
) -> Result<f64, MaskError> {
    if !candidate.same_shape(reference) {
        return Err(MaskError::ShapeMismatch {
            expected_h: reference.height(),
            expected_w: reference.width(),
            got_h: candidate.height(),
            got_w: candidate.width(),
        });
    }
    let score = match kind {
        CriterionKind::Iou => {
            let union = candidate.union_area(reference)?;
            if union == 0 {
                0.0
            } else {
                candidate.intersection_area(reference)? as f64 / union as f64
            }
        }
        CriterionKind::IntersectionOverCandidate => {
            let area = candidate.area();
            if area == 0 {
                0.0
            } else {
                candidate.intersection_area(reference)? as f64 / area as f64
            }
        }
        CriterionKind::Passthrough => 1.0,
    };
    Ok(score)
}

/// Result of fusing one candidate set.
#[derive(Debug, Clone)]
pub struct FuseOutcome {
    pub mask: BinaryMask,
    /// Number of candidates whose score cleared the threshold.
    pub survivors: usize,
    pub candidates: usize,
    /// Set when the fused mask came out all-zero (no candidates, or none
    /// survived the filter).
    pub empty_warning: bool,
}

/// Union of every candidate whose criterion score is at least the
/// threshold. Passthrough unions all candidates.
pub fn fuse_masks(
    candidates: &[BinaryMask],
    reference: &BinaryMask,
    criterion: &FusionCriterion,
) -> Result<FuseOutcome, MaskError> {
    let mut fused = BinaryMask::zeros(reference.height(), reference.width());
    let mut survivors = 0usize;
    for candidate in candidates {
        let score = criterion_score(candidate, reference, criterion.kind)?;
        let accept = match criterion.kind {
            CriterionKind::Passthrough => true,
            _ => score >= criterion.threshold,
        };
        if accept {
            fused.union_with(candidate)?;
            survivors += 1;
        }
    }
    let empty_warning = fused.area() == 0;
    Ok(FuseOutcome {
        mask: fused,
        survivors,
        candidates: candidates.len(),
        empty_warning,
    })
}

/// Copy foreground pixels, set background pixels to `fill`.
pub fn apply_mask(
    image: &RgbImage,
    mask: &BinaryMask,
    fill: [u8; 3],
) -> Result<RgbImage, MaskError> {
    let (w, h) = image.dimensions();
    if mask.height() != h as usize || mask.width() != w as usize {
        return Err(MaskError::ShapeMismatch {
            expected_h: h as usize,
            expected_w: w as usize,
            got_h: mask.height(),
            got_w: mask.width(),
        });
    }
    let mut out = image.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        if !mask.get(y as usize, x as usize) {
            px.0 = fill;
        }
    }
    Ok(out)
}

/// Per-entry row of the batch fusion report.
#[derive(Debug, Clone, Serialize)]
pub struct FuseReportRow {
    pub stem: String,
    pub status: EntryStatus,
    pub candidates: usize,
    pub survivors: usize,
    pub empty_warning: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryStatus {
    Ok,
    MissingReference,
    Failed(String),
}

impl fmt::Display for EntryStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EntryStatus::Ok => f.write_str("ok"),
            EntryStatus::MissingReference => f.write_str("missing-reference"),
            EntryStatus::Failed(msg) => write!(f, "failed({msg})"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchFuseReport {
    pub rows: Vec<FuseReportRow>,
}

impl BatchFuseReport {
    pub fn processed(&self) -> usize {
        self.rows.iter().filter(|r| r.status == EntryStatus::Ok).count()
    }

    pub fn skipped(&self) -> usize {
        self.rows.len() - self.processed()
    }

    /// Tab-separated table, one row per manifest entry in manifest order.
    pub fn write_table(&self, path: &Path) -> Result<(), MaskError> {
        let mut out = String::from("stem\tstatus\tcandidates\tsurvivors\tempty_warning\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                row.stem, row.status, row.candidates, row.survivors, row.empty_warning
            ));
        }
        let mut f = fs::File::create(path).map_err(|source| MaskError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        f.write_all(out.as_bytes()).map_err(|source| MaskError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[derive(Debug, Clone)]
pub struct BatchFuseOptions {
    pub criterion: FusionCriterion,
    pub fill: [u8; 3],
    /// Candidates smaller than this many pixels are dropped before
    /// filtering. Off by default.
    pub min_candidate_area: Option<usize>,
}

impl Default for BatchFuseOptions {
    fn default() -> Self {
        Self {
            criterion: FusionCriterion {
                kind: CriterionKind::Iou,
                threshold: 0.3,
            },
            fill: [0, 0, 0],
            min_candidate_area: None,
        }
    }
}

fn stem_of(path: &str) -> String {
    Path::new(path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string())
}

/// Candidate mask files for `stem` are any `stem_*.png` (or `.rle`) in the
/// candidate directory; the reference is `stem.png` (or `.rle`).
fn candidate_paths(dir: &Path, stem: &str) -> Vec<PathBuf> {
    let mut found: Vec<PathBuf> = Vec::new();
    let prefix = format!("{stem}_");
    if let Ok(entries) = fs::read_dir(dir) {
        for entry in entries.flatten() {
            let p = entry.path();
            let Some(name) = p.file_stem().map(|s| s.to_string_lossy().into_owned()) else {
                continue;
            };
            let ext_ok = matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("png") | Some("rle")
            );
            if ext_ok && name.starts_with(&prefix) {
                found.push(p);
            }
        }
    }
    found.sort();
    found
}

fn read_mask_any(path: &Path) -> Result<BinaryMask, MaskError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("rle") => BinaryMask::read_rle(path),
        _ => BinaryMask::read_image(path),
    }
}

fn reference_path(dir: &Path, stem: &str) -> Option<PathBuf> {
    for ext in ["png", "rle"] {
        let p = dir.join(format!("{stem}.{ext}"));
        if p.is_file() {
            return Some(p);
        }
    }
    None
}

/// Fuse masks and blank backgrounds for every manifest entry.
///
/// Writes `<out_dir>/masks/<stem>.png` and `<out_dir>/images/<stem>.png`
/// per processed entry. Entries run independently (in parallel when the
/// `parallel` feature is on); the report is ordered by manifest order.
pub fn batch_fuse(
    manifest: &DatasetManifest,
    candidate_dir: &Path,
    reference_dir: &Path,
    out_dir: &Path,
    opts: &BatchFuseOptions,
) -> Result<BatchFuseReport, MaskError> {
    let mask_out = out_dir.join("masks");
    let image_out = out_dir.join("images");
    for d in [&mask_out, &image_out] {
        fs::create_dir_all(d).map_err(|source| MaskError::Io {
            path: d.clone(),
            source,
        })?;
    }

    let image_paths: Vec<PathBuf> = manifest
        .records
        .iter()
        .map(|r| manifest.resolve_path(&r.image_path))
        .collect();

    let rows = par::map_indexed(manifest.records.len(), |i| {
        let record = &manifest.records[i];
        let stem = stem_of(&record.image_path);
        process_entry(
            &stem,
            &image_paths[i],
            candidate_dir,
            reference_dir,
            &mask_out,
            &image_out,
            opts,
        )
    });
    Ok(BatchFuseReport { rows })
}

fn process_entry(
    stem: &str,
    image_path: &Path,
    candidate_dir: &Path,
    reference_dir: &Path,
    mask_out: &Path,
    image_out: &Path,
    opts: &BatchFuseOptions,
) -> FuseReportRow {
    let fail = |msg: String, candidates: usize| FuseReportRow {
        stem: stem.to_string(),
        status: EntryStatus::Failed(msg),
        candidates,
        survivors: 0,
        empty_warning: false,
    };

    let Some(ref_path) = reference_path(reference_dir, stem) else {
        return FuseReportRow {
            stem: stem.to_string(),
            status: EntryStatus::MissingReference,
            candidates: 0,
            survivors: 0,
            empty_warning: false,
        };
    };
    let reference = match read_mask_any(&ref_path) {
        Ok(m) => m,
        Err(e) => return fail(e.to_string(), 0),
    };

    let mut candidates = Vec::new();
    for p in candidate_paths(candidate_dir, stem) {
        match read_mask_any(&p) {
            Ok(m) => candidates.push(m),
            Err(e) => return fail(e.to_string(), candidates.len()),
        }
    }
    if let Some(min_area) = opts.min_candidate_area {
        candidates.retain(|m| m.area() >= min_area);
    }

    let outcome = match fuse_masks(&candidates, &reference, &opts.criterion) {
        Ok(o) => o,
        Err(e) => return fail(e.to_string(), candidates.len()),
    };

    if let Err(e) = outcome.mask.write_png(&mask_out.join(format!("{stem}.png"))) {
        return fail(e.to_string(), candidates.len());
    }

    let image = match image::open(image_path) {
        Ok(img) => img.into_rgb8(),
        Err(e) => return fail(format!("image {}: {e}", image_path.display()), candidates.len()),
    };
    let masked = match apply_mask(&image, &outcome.mask, opts.fill) {
        Ok(m) => m,
        Err(e) => return fail(e.to_string(), candidates.len()),
    };
    if let Err(e) = masked.save(image_out.join(format!("{stem}.png"))) {
        return fail(format!("write masked image: {e}"), candidates.len());
    }

    FuseReportRow {
        stem: stem.to_string(),
        status: EntryStatus::Ok,
        candidates: outcome.candidates,
        survivors: outcome.survivors,
        empty_warning: outcome.empty_warning,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn rect_mask(h: usize, w: usize, r0: usize, r1: usize, c0: usize, c1: usize) -> BinaryMask {
        let mut m = BinaryMask::zeros(h, w);
        for r in r0..r1 {
            for c in c0..c1 {
                m.set(r, c, true);
            }
        }
        m
    }

    #[test]
    fn iou_identical_is_one() {
        let a = rect_mask(20, 20, 2, 12, 3, 13);
        assert_eq!(criterion_score(&a, &a, CriterionKind::Iou).unwrap(), 1.0);
    }

    #[test]
    fn iou_disjoint_is_zero() {
        let a = rect_mask(20, 20, 0, 5, 0, 5);
        let b = rect_mask(20, 20, 10, 15, 10, 15);
        assert_eq!(criterion_score(&a, &b, CriterionKind::Iou).unwrap(), 0.0);
    }

    #[test]
    fn iou_half_overlap_square() {
        // 10x10 squares offset by 5 columns: intersection 50, union 150.
        let a = rect_mask(10, 20, 0, 10, 0, 10);
        let b = rect_mask(10, 20, 0, 10, 5, 15);
        let got = criterion_score(&a, &b, CriterionKind::Iou).unwrap();
        assert!((got - 1.0 / 3.0).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn ioc_uses_candidate_area() {
        let cand = rect_mask(10, 10, 0, 2, 0, 5); // area 10
        let refm = rect_mask(10, 10, 0, 1, 0, 5); // overlap 5
        let got = criterion_score(&cand, &refm, CriterionKind::IntersectionOverCandidate).unwrap();
        assert_eq!(got, 0.5);
    }

    #[test]
    fn empty_candidate_scores_zero() {
        let cand = BinaryMask::zeros(4, 4);
        let refm = rect_mask(4, 4, 0, 2, 0, 2);
        for kind in [CriterionKind::Iou, CriterionKind::IntersectionOverCandidate] {
            assert_eq!(criterion_score(&cand, &refm, kind).unwrap(), 0.0);
        }
        // both empty under iou is 0 by convention
        assert_eq!(
            criterion_score(&BinaryMask::zeros(4, 4), &BinaryMask::zeros(4, 4), CriterionKind::Iou).unwrap(),
            0.0
        );
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = BinaryMask::zeros(4, 4);
        let b = BinaryMask::zeros(4, 5);
        assert!(matches!(
            criterion_score(&a, &b, CriterionKind::Iou),
            Err(MaskError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn fuse_keeps_scoring_candidates_only() {
        let reference = rect_mask(20, 20, 5, 15, 5, 15);
        let far = rect_mask(20, 20, 0, 3, 0, 3);
        let same = reference.clone();
        let crit = FusionCriterion::new(CriterionKind::Iou, 0.3).unwrap();
        let out = fuse_masks(&[far.clone(), same.clone()], &reference, &crit).unwrap();
        assert_eq!(out.survivors, 1);
        assert_eq!(out.mask, same);
        assert!(!out.empty_warning);
    }

    #[test]
    fn fuse_passthrough_is_plain_union() {
        let reference = rect_mask(20, 20, 5, 15, 5, 15);
        let a = rect_mask(20, 20, 0, 3, 0, 3);
        let b = rect_mask(20, 20, 10, 20, 10, 20);
        let out = fuse_masks(&[a.clone(), b.clone()], &reference, &FusionCriterion::passthrough()).unwrap();
        let mut expect = a;
        expect.union_with(&b).unwrap();
        assert_eq!(out.mask, expect);
        assert_eq!(out.survivors, 2);
    }

    #[test]
    fn fuse_empty_inputs_warns() {
        let reference = rect_mask(8, 8, 0, 4, 0, 4);
        let crit = FusionCriterion::new(CriterionKind::Iou, 0.3).unwrap();
        let out = fuse_masks(&[], &reference, &crit).unwrap();
        assert!(out.empty_warning);
        assert_eq!(out.mask.area(), 0);

        let disjoint = rect_mask(8, 8, 6, 8, 6, 8);
        let out = fuse_masks(&[disjoint], &reference, &crit).unwrap();
        assert!(out.empty_warning);
        assert_eq!(out.survivors, 0);
    }

    #[test]
    fn apply_mask_blanks_background() {
        let mut img = RgbImage::new(4, 4);
        for (_, _, px) in img.enumerate_pixels_mut() {
            px.0 = [200, 100, 50];
        }
        let ones = rect_mask(4, 4, 0, 4, 0, 4);
        assert_eq!(apply_mask(&img, &ones, [0, 0, 0]).unwrap(), img);

        let zeros = BinaryMask::zeros(4, 4);
        let blanked = apply_mask(&img, &zeros, [1, 2, 3]).unwrap();
        assert!(blanked.pixels().all(|p| p.0 == [1, 2, 3]));

        // checkerboard blanks exactly half
        let mut checker = BinaryMask::zeros(4, 4);
        for r in 0..4 {
            for c in 0..4 {
                checker.set(r, c, (r + c) % 2 == 0);
            }
        }
        let half = apply_mask(&img, &checker, [0, 0, 0]).unwrap();
        let filled = half.pixels().filter(|p| p.0 == [0, 0, 0]).count();
        assert_eq!(filled, 8);
    }

    #[test]
    fn apply_mask_is_idempotent() {
        let mut img = RgbImage::new(6, 6);
        for (x, y, px) in img.enumerate_pixels_mut() {
            px.0 = [(x * 40) as u8, (y * 40) as u8, 128];
        }
        let mask = rect_mask(6, 6, 1, 5, 2, 4);
        let once = apply_mask(&img, &mask, [0, 0, 0]).unwrap();
        let twice = apply_mask(&once, &mask, [0, 0, 0]).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn soft_mask_binarizes_at_half_max() {
        let soft = Array2::from_shape_fn((2, 3), |(r, c)| (r * 3 + c) as f32 / 5.0);
        let m = BinaryMask::from_soft(&soft);
        // max 1.0, cut 0.5: values .6, .8, 1.0 are on
        assert_eq!(m.area(), 3);
        assert_eq!(BinaryMask::from_soft(&Array2::zeros((2, 2))).area(), 0);
    }

    #[test]
    fn rle_roundtrip() {
        let m = rect_mask(9, 7, 2, 6, 1, 5);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.rle");
        m.write_rle(&p).unwrap();
        assert_eq!(BinaryMask::read_rle(&p).unwrap(), m);
    }
}
