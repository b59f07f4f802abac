//! Retrieval evaluation: cosine ranking with protocol predicates, AP/mAP
//! and recall-at-k, the single/cross-camera split with their averaged mmAP,
//! k-reciprocal re-ranking, flip-concat feature extraction, the
//! background-bias grid, and cross-dataset transfer evaluation.
//!
//! All ranking arithmetic is explicit f64 loops — no matrix backend — so
//! results are bit-reproducible across runs and match the brute-force
//! definitions in the tests exactly.

use std::path::Path;

use image::imageops::FilterType;
use ndarray::Array2;
use serde::Serialize;

use crate::datacore::{load_rgb, DatasetManifest};
use crate::maskpipe::{apply_mask, read_mask};
use crate::nettower::{normalize_image, stack_batch, Tower, TowerError};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("feature store is empty")]
    EmptyStore,
    #[error("store rows disagree: {0}")]
    RaggedStore(String),
    #[error("{0} protocol needs camera ids but the store has none")]
    MissingCameras(&'static str),
    #[error("no queries retained: all {total} dropped ({no_gallery} without eligible gallery, {no_positive} without positives)")]
    EmptyProtocol {
        total: usize,
        no_gallery: usize,
        no_positive: usize,
    },
    #[error(transparent)]
    Model(#[from] TowerError),
    #[error("io on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Evaluation embeddings plus the metadata the protocols consult. One row
/// per record; rows are unit-normalized (in f64) before any ranking.
#[derive(Debug, Clone)]
pub struct FeatureStore {
    pub ids: Vec<u32>,
    pub cameras: Option<Vec<u32>>,
    /// Raw entity labels aligned with `ids`, for reports. May be empty.
    pub labels: Vec<String>,
    pub vectors: Array2<f32>,
}

impl FeatureStore {
    pub fn new(
        ids: Vec<u32>,
        cameras: Option<Vec<u32>>,
        vectors: Array2<f32>,
    ) -> Result<Self, EvalError> {
        let n = vectors.nrows();
        if n == 0 {
            return Err(EvalError::EmptyStore);
        }
        if ids.len() != n {
            return Err(EvalError::RaggedStore(format!(
                "{} ids for {} vectors",
                ids.len(),
                n
            )));
        }
        if let Some(c) = &cameras {
            if c.len() != n {
                return Err(EvalError::RaggedStore(format!(
                    "{} cameras for {} vectors",
                    c.len(),
                    n
                )));
            }
        }
        Ok(Self {
            ids,
            cameras,
            labels: Vec::new(),
            vectors,
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Unit-normalized rows in f64; an all-zero row stays zero.
    fn normalized(&self) -> Array2<f64> {
        let (n, d) = self.vectors.dim();
        let mut out = Array2::zeros((n, d));
        for i in 0..n {
            let mut sq = 0.0f64;
            for j in 0..d {
                let v = self.vectors[[i, j]] as f64;
                sq += v * v;
            }
            let norm = sq.sqrt();
            if norm > 0.0 {
                for j in 0..d {
                    out[[i, j]] = self.vectors[[i, j]] as f64 / norm;
                }
            }
        }
        out
    }

    fn camera(&self, i: usize) -> Option<u32> {
        self.cameras.as_ref().map(|c| c[i])
    }
}

fn dot(a: &Array2<f64>, i: usize, j: usize) -> f64 {
    let d = a.ncols();
    let mut s = 0.0;
    for k in 0..d {
        s += a[[i, k]] * a[[j, k]];
    }
    s
}

/// Which pairs are rankable and which count as matches. Leave-one-out over
/// the store: every record queries against the others.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    /// Any other record is eligible; same entity is positive.
    Plain,
    /// Gallery restricted to the query's camera; same entity is positive.
    SingleCamera,
    /// Same-camera same-entity records are excluded from the gallery;
    /// only cross-camera copies of the entity count as positive.
    CrossCamera,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Self::Plain => "plain",
            Self::SingleCamera => "single-camera",
            Self::CrossCamera => "cross-camera",
        }
    }

    fn needs_cameras(self) -> bool {
        !matches!(self, Self::Plain)
    }

    fn eligible(self, q: (u32, Option<u32>), g: (u32, Option<u32>)) -> bool {
        match self {
            Self::Plain => true,
            Self::SingleCamera => q.1 == g.1,
            Self::CrossCamera => !(q.0 == g.0 && q.1 == g.1),
        }
    }

    fn positive(self, q: (u32, Option<u32>), g: (u32, Option<u32>)) -> bool {
        match self {
            Self::Plain | Self::SingleCamera => q.0 == g.0,
            Self::CrossCamera => q.0 == g.0 && q.1 != g.1,
        }
    }
}

/// Per retained query: gallery order (best first) and positivity flags in
/// that order. Queries with no eligible gallery or no positive are dropped
/// and counted, never folded into means.
#[derive(Debug, Clone)]
pub struct RankingResult {
    pub query_indices: Vec<usize>,
    pub order: Vec<Vec<usize>>,
    pub flags: Vec<Vec<bool>>,
    pub dropped_no_gallery: usize,
    pub dropped_no_positive: usize,
}

impl RankingResult {
    pub fn dropped(&self) -> usize {
        self.dropped_no_gallery + self.dropped_no_positive
    }

    pub fn retained(&self) -> usize {
        self.query_indices.len()
    }
}

/// Shared ranking core: `key(q, g)` is an ascending sort key (a distance);
/// ties break on the smaller gallery index.
fn rank_by_key(
    store: &FeatureStore,
    protocol: Protocol,
    key: impl Fn(usize, usize) -> f64,
) -> Result<RankingResult, EvalError> {
    if protocol.needs_cameras() && store.cameras.is_none() {
        return Err(EvalError::MissingCameras(protocol.name()));
    }
    let n = store.len();
    let meta = |i: usize| (store.ids[i], store.camera(i));
    let mut result = RankingResult {
        query_indices: Vec::new(),
        order: Vec::new(),
        flags: Vec::new(),
        dropped_no_gallery: 0,
        dropped_no_positive: 0,
    };
    for q in 0..n {
        let mut elig: Vec<usize> = (0..n)
            .filter(|&g| g != q && protocol.eligible(meta(q), meta(g)))
            .collect();
        if elig.is_empty() {
            result.dropped_no_gallery += 1;
            continue;
        }
        if !elig.iter().any(|&g| protocol.positive(meta(q), meta(g))) {
            result.dropped_no_positive += 1;
            continue;
        }
        elig.sort_by(|&a, &b| key(q, a).total_cmp(&key(q, b)).then(a.cmp(&b)));
        let flags = elig
            .iter()
            .map(|&g| protocol.positive(meta(q), meta(g)))
            .collect();
        result.query_indices.push(q);
        result.order.push(elig);
        result.flags.push(flags);
    }
    if result.query_indices.is_empty() {
        return Err(EvalError::EmptyProtocol {
            total: n,
            no_gallery: result.dropped_no_gallery,
            no_positive: result.dropped_no_positive,
        });
    }
    Ok(result)
}

/// Rank by descending cosine similarity (key is the negated dot product of
/// unit rows, so ordering is exact — no subtraction rounding).
pub fn rank(store: &FeatureStore, protocol: Protocol) -> Result<RankingResult, EvalError> {
    let normed = store.normalized();
    rank_by_key(store, protocol, |q, g| -dot(&normed, q, g))
}

/// Mean over the positives' ranks r_i (1-indexed) of i/r_i. `None` when the
/// list has no positive.
pub fn average_precision(flags: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0f64;
    for (rank0, &flag) in flags.iter().enumerate() {
        if flag {
            hits += 1;
            sum += hits as f64 / (rank0 + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct Metrics {
    pub map: f64,
    /// (k, recall@k) pairs in ascending k.
    pub r_at: Vec<(usize, f64)>,
    pub queries: usize,
    pub dropped: usize,
}

impl Metrics {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.r_at.iter().find(|(kk, _)| *kk == k).map(|(_, v)| *v)
    }
}

/// mAP and recall@k over the retained queries of a ranking.
pub fn metrics(result: &RankingResult, ks: &[usize]) -> Metrics {
    let n = result.retained();
    let mut ap_sum = 0.0f64;
    for flags in &result.flags {
        ap_sum += average_precision(flags).expect("rank retains only queries with positives");
    }
    let r_at = ks
        .iter()
        .map(|&k| {
            let hits = result
                .flags
                .iter()
                .filter(|flags| flags.iter().take(k).any(|&f| f))
                .count();
            (k, hits as f64 / n as f64)
        })
        .collect();
    Metrics {
        map: ap_sum / n as f64,
        r_at,
        queries: n,
        dropped: result.dropped(),
    }
}

/// The camera-split headline number: the mean of the single-camera and
/// cross-camera mAPs.
pub fn mmap(single_map: f64, cross_map: f64) -> f64 {
    (single_map + cross_map) / 2.0
}

#[derive(Debug, Clone, Copy, Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RerankParams {
    pub k1: usize,
    pub k2: usize,
    pub lambda: f64,
}

impl Default for RerankParams {
    fn default() -> Self {
        Self {
            k1: 20,
            k2: 6,
            lambda: 0.3,
        }
    }
}

/// k-reciprocal re-ranking. Final distance = λ·d_cosine + (1−λ)·d_jaccard,
/// where d_jaccard compares locally expanded k-reciprocal neighbourhood
/// weight vectors. Conventions (fixed here and mirrored by the test
/// oracle):
///  - d_cosine(i,j) = 1 − cos(v_i, v_j); the diagonal is exactly 0
///  - neighbour lists include self, so N(i,k) has k+1 entries
///  - R(i,k) = { j ∈ N(i,k) : i ∈ N(j,k) }
///  - expansion: for j ∈ R(i,k1), R(j,⌈k1/2⌉) joins when strictly more
///    than ⅔ of it already lies in R(i,k1)
///  - V(i,·) = exp(−d_cosine) on the expanded set, L1-normalized, then
///    averaged over N(i,k2) (query expansion)
pub fn rerank_distances(
    store: &FeatureStore,
    params: &RerankParams,
) -> Result<(Array2<f64>, Vec<String>), EvalError> {
    let n = store.len();
    if n < 2 {
        return Err(EvalError::EmptyProtocol {
            total: n,
            no_gallery: n,
            no_positive: 0,
        });
    }
    let mut warnings = Vec::new();
    let mut k1 = params.k1;
    if k1 >= n {
        k1 = n - 1;
        warnings.push(format!("k1={} >= store size {n}; clamped to {k1}", params.k1));
    }
    let mut k2 = params.k2;
    if k2 > k1 {
        k2 = k1;
        warnings.push(format!("k2={} > k1={k1}; clamped to {k2}", params.k2));
    }

    let normed = store.normalized();
    let mut d_orig = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            d_orig[[i, j]] = if i == j { 0.0 } else { 1.0 - dot(&normed, i, j) };
        }
    }

    // ascending-distance neighbour lists, self first
    let rank_list: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| d_orig[[i, a]].total_cmp(&d_orig[[i, b]]).then(a.cmp(&b)));
            idx
        })
        .collect();
    let neigh = |i: usize, k: usize| -> &[usize] { &rank_list[i][..(k + 1).min(n)] };
    let reciprocal = |i: usize, k: usize| -> Vec<usize> {
        neigh(i, k)
            .iter()
            .copied()
            .filter(|&j| neigh(j, k).contains(&i))
            .collect()
    };

    let half = ((k1 as f64) / 2.0).round().max(1.0) as usize;
    let mut v_rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
    for i in 0..n {
        let base = reciprocal(i, k1);
        let mut expanded: Vec<usize> = base.clone();
        for &j in &base {
            let cand = reciprocal(j, half);
            let overlap = cand.iter().filter(|c| base.contains(c)).count();
            if 3 * overlap > 2 * cand.len() {
                expanded.extend(cand);
            }
        }
        expanded.sort_unstable();
        expanded.dedup();
        let mut row: Vec<(usize, f64)> = expanded
            .into_iter()
            .map(|j| (j, (-d_orig[[i, j]]).exp()))
            .collect();
        let sum: f64 = row.iter().map(|(_, v)| v).sum();
        for (_, v) in &mut row {
            *v /= sum;
        }
        v_rows.push(row);
    }

    // query expansion: average the weight rows of the k2 nearest (plus self)
    let vq: Vec<Vec<(usize, f64)>> = (0..n)
        .map(|i| {
            let members = neigh(i, k2);
            let scale = 1.0 / members.len() as f64;
            let mut acc: std::collections::BTreeMap<usize, f64> = Default::default();
            for &j in members {
                for &(idx, val) in &v_rows[j] {
                    *acc.entry(idx).or_insert(0.0) += val * scale;
                }
            }
            acc.into_iter().collect()
        })
        .collect();

    let jaccard = |a: &[(usize, f64)], b: &[(usize, f64)]| -> f64 {
        let (mut ai, mut bi) = (0usize, 0usize);
        let (mut s_min, mut s_max) = (0.0f64, 0.0f64);
        while ai < a.len() || bi < b.len() {
            match (a.get(ai), b.get(bi)) {
                (Some(&(ka, va)), Some(&(kb, vb))) if ka == kb => {
                    s_min += va.min(vb);
                    s_max += va.max(vb);
                    ai += 1;
                    bi += 1;
                }
                (Some(&(ka, va)), Some(&(kb, _))) if ka < kb => {
                    s_max += va;
                    ai += 1;
                }
                (Some(_), Some(&(_, vb))) => {
                    s_max += vb;
                    bi += 1;
                }
                (Some(&(_, va)), None) => {
                    s_max += va;
                    ai += 1;
                }
                (None, Some(&(_, vb))) => {
                    s_max += vb;
                    bi += 1;
                }
                (None, None) => unreachable!(),
            }
        }
        if s_max == 0.0 {
            1.0
        } else {
            1.0 - s_min / s_max
        }
    };

    let mut fin = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let dj = jaccard(&vq[i], &vq[j]);
            fin[[i, j]] = params.lambda * d_orig[[i, j]] + (1.0 - params.lambda) * dj;
        }
    }
    Ok((fin, warnings))
}

pub struct RerankOutcome {
    pub result: RankingResult,
    pub warnings: Vec<String>,
}

pub fn rerank(
    store: &FeatureStore,
    protocol: Protocol,
    params: &RerankParams,
) -> Result<RerankOutcome, EvalError> {
    let (fin, warnings) = rerank_distances(store, params)?;
    let result = rank_by_key(store, protocol, |q, g| fin[[q, g]])?;
    Ok(RerankOutcome { result, warnings })
}

#[derive(Debug, Clone, Copy)]
pub struct ExtractOptions {
    /// Black out background pixels using each record's mask before resizing.
    pub use_masks: bool,
    pub batch: usize,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        Self {
            use_masks: false,
            batch: 16,
        }
    }
}

/// Run every manifest record through the model's flip-concat evaluation
/// embedding. Returns the store plus the paths of records that failed to
/// decode (skipped, never silently dropped).
pub fn extract_features(
    tower: &Tower,
    manifest: &DatasetManifest,
    opts: &ExtractOptions,
) -> Result<(FeatureStore, Vec<String>), EvalError> {
    let size = tower.config.input_size as u32;
    let mut tensors = Vec::new();
    let mut ids = Vec::new();
    let mut cameras = Vec::new();
    let mut labels = Vec::new();
    let mut skipped = Vec::new();
    for rec in &manifest.records {
        let path = manifest.resolve_path(&rec.image_path);
        let mut img = match load_rgb(&path) {
            Ok(i) => i,
            Err(_) => {
                skipped.push(rec.image_path.clone());
                continue;
            }
        };
        if opts.use_masks {
            if let Some(mask_rel) = &rec.mask_path {
                let mask_path = manifest.resolve_path(mask_rel);
                match read_mask(&mask_path).and_then(|m| apply_mask(&img, &m, [0, 0, 0])) {
                    Ok(masked) => img = masked,
                    Err(_) => {
                        skipped.push(rec.image_path.clone());
                        continue;
                    }
                }
            }
        }
        let resized = image::imageops::resize(&img, size, size, FilterType::Triangle);
        tensors.push(normalize_image(
            &resized,
            tower.config.norm_mean,
            tower.config.norm_std,
        ));
        ids.push(rec.entity_id);
        if let Some(cam) = rec.camera_id {
            cameras.push(cam);
        }
        labels.push(manifest.entity_labels[rec.entity_id as usize].clone());
    }
    if tensors.is_empty() {
        return Err(EvalError::EmptyStore);
    }
    let with_cameras = cameras.len() == tensors.len();
    let mut rows: Vec<Array2<f32>> = Vec::new();
    for chunk in tensors.chunks(opts.batch.max(1)) {
        let batch = stack_batch(chunk);
        rows.push(tower.embed_eval(&batch)?);
    }
    let d = rows[0].ncols();
    let mut vectors = Array2::zeros((tensors.len(), d));
    let mut at = 0;
    for block in rows {
        for r in block.rows() {
            vectors.row_mut(at).assign(&r);
            at += 1;
        }
    }
    let mut store = FeatureStore::new(ids, with_cameras.then_some(cameras), vectors)?;
    store.labels = labels;
    Ok((store, skipped))
}

/// One evaluation summary; optional fields are filled when the camera
/// protocols apply.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub protocol: String,
    pub reranked: bool,
    pub queries: usize,
    pub dropped: usize,
    pub map: f64,
    pub r1: f64,
    pub r5: Option<f64>,
    pub map_single: Option<f64>,
    pub map_cross: Option<f64>,
    pub r1_single: Option<f64>,
    pub r1_cross: Option<f64>,
    pub mmap: Option<f64>,
}

fn ranked(
    store: &FeatureStore,
    protocol: Protocol,
    rerank_params: Option<&RerankParams>,
) -> Result<RankingResult, EvalError> {
    match rerank_params {
        Some(p) => Ok(rerank(store, protocol, p)?.result),
        None => rank(store, protocol),
    }
}

/// Leave-one-out evaluation under the plain protocol.
pub fn plain_report(
    store: &FeatureStore,
    rerank_params: Option<&RerankParams>,
) -> Result<EvalReport, EvalError> {
    let result = ranked(store, Protocol::Plain, rerank_params)?;
    let m = metrics(&result, &[1, 5]);
    Ok(EvalReport {
        protocol: "plain".into(),
        reranked: rerank_params.is_some(),
        queries: m.queries,
        dropped: m.dropped,
        map: m.map,
        r1: m.recall_at(1).unwrap(),
        r5: m.recall_at(5),
        map_single: None,
        map_cross: None,
        r1_single: None,
        r1_cross: None,
        mmap: None,
    })
}

/// Camera-split evaluation: plain numbers plus single/cross-camera mAP and
/// R@1 and their mmAP average.
pub fn camera_report(
    store: &FeatureStore,
    rerank_params: Option<&RerankParams>,
) -> Result<EvalReport, EvalError> {
    let mut report = plain_report(store, rerank_params)?;
    let single = metrics(&ranked(store, Protocol::SingleCamera, rerank_params)?, &[1]);
    let cross = metrics(&ranked(store, Protocol::CrossCamera, rerank_params)?, &[1]);
    report.protocol = "camera-split".into();
    report.map_single = Some(single.map);
    report.map_cross = Some(cross.map);
    report.r1_single = single.recall_at(1);
    report.r1_cross = cross.recall_at(1);
    report.mmap = Some(mmap(single.map, cross.map));
    Ok(report)
}

/// Evaluate a trained model on a manifest from a different dataset. Ranking
/// uses embeddings only, so the identity head's label space is irrelevant.
pub fn transfer_eval(
    tower: &Tower,
    manifest: &DatasetManifest,
    opts: &ExtractOptions,
    rerank_params: Option<&RerankParams>,
) -> Result<(EvalReport, Vec<String>), EvalError> {
    let (store, skipped) = extract_features(tower, manifest, opts)?;
    let report = if store.cameras.is_some() {
        camera_report(&store, rerank_params)?
    } else {
        plain_report(&store, rerank_params)?
    };
    Ok((report, skipped))
}

#[derive(Debug, Clone, Serialize)]
pub struct BiasCell {
    pub train_masked: bool,
    pub test_masked: bool,
    pub report: EvalReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct BiasTable {
    pub cells: Vec<BiasCell>,
}

/// Train two models (original and masked backgrounds) and evaluate each on
/// both test variants: the four-cell background-bias grid. Training is
/// injected so this module stays independent of the trainer.
pub fn bias_grid<E>(
    mut train: impl FnMut(bool) -> Result<Tower, E>,
    mut evaluate: impl FnMut(&Tower, bool) -> Result<EvalReport, E>,
) -> Result<BiasTable, E> {
    let mut cells = Vec::new();
    for train_masked in [false, true] {
        let tower = train(train_masked)?;
        for test_masked in [false, true] {
            cells.push(BiasCell {
                train_masked,
                test_masked,
                report: evaluate(&tower, test_masked)?,
            });
        }
    }
    Ok(BiasTable { cells })
}

fn variant(masked: bool) -> &'static str {
    if masked {
        "masked"
    } else {
        "original"
    }
}

pub fn render_bias_table(table: &BiasTable) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<10} {:<10} {:>8} {:>8} {:>8} {:>8}\n",
        "train", "test", "mAP", "mmAP", "R@1(s)", "R@1(c)"
    ));
    for cell in &table.cells {
        let fmt = |v: Option<f64>| match v {
            Some(v) => format!("{v:.4}"),
            None => "-".into(),
        };
        out.push_str(&format!(
            "{:<10} {:<10} {:>8.4} {:>8} {:>8} {:>8}\n",
            variant(cell.train_masked),
            variant(cell.test_masked),
            cell.report.map,
            fmt(cell.report.mmap),
            fmt(cell.report.r1_single),
            fmt(cell.report.r1_cross),
        ));
    }
    out
}

pub fn render_report(report: &EvalReport) -> String {
    let mut out = String::new();
    let fmt = |v: Option<f64>| match v {
        Some(v) => format!("{v:.4}"),
        None => "-".into(),
    };
    out.push_str(&format!(
        "protocol={} reranked={} queries={} dropped={}\n",
        report.protocol, report.reranked, report.queries, report.dropped
    ));
    out.push_str(&format!(
        "{:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
        "mAP", "R@1", "R@5", "mmAP", "R@1(s)", "R@1(c)"
    ));
    out.push_str(&format!(
        "{:>8.4} {:>8.4} {:>8} {:>8} {:>8} {:>8}\n",
        report.map,
        report.r1,
        fmt(report.r5),
        fmt(report.mmap),
        fmt(report.r1_single),
        fmt(report.r1_cross),
    ));
    out
}

pub fn write_report_json(report: &EvalReport, path: &Path) -> Result<(), EvalError> {
    let io_err = |source: std::io::Error| EvalError::Io {
        path: path.display().to_string(),
        source,
    };
    let body = serde_json::to_string_pretty(report).expect("report serializes");
    std::fs::write(path, body).map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use rand::Rng;

    fn store(rows: &[(u32, Option<u32>, Vec<f32>)]) -> FeatureStore {
        let d = rows[0].2.len();
        let mut vectors = Array2::zeros((rows.len(), d));
        for (i, (_, _, v)) in rows.iter().enumerate() {
            for (j, x) in v.iter().enumerate() {
                vectors[[i, j]] = *x;
            }
        }
        let cameras = rows[0].1.map(|_| rows.iter().map(|r| r.1.unwrap()).collect());
        FeatureStore::new(rows.iter().map(|r| r.0).collect(), cameras, vectors).unwrap()
    }

    fn random_store(seed: u64, n: usize, d: usize, with_cams: bool) -> FeatureStore {
        let mut rng = stream_rng(seed, Stream::Test, 77, 0);
        let rows: Vec<(u32, Option<u32>, Vec<f32>)> = (0..n)
            .map(|_| {
                let id = rng.random_range(0..5u32);
                let cam = with_cams.then(|| rng.random_range(0..3u32));
                let v = (0..d).map(|_| rng.random_range(-1.0..1.0f32)).collect();
                (id, cam, v)
            })
            .collect();
        store(&rows)
    }

    #[test]
    fn average_precision_hand_cases() {
        assert_eq!(average_precision(&[true, true, false]), Some(1.0));
        let ap = average_precision(&[false, true, true]).unwrap();
        assert!((ap - 7.0 / 12.0).abs() < 1e-15);
        let ap = average_precision(&[true, false, false, true]).unwrap();
        assert!((ap - 0.75).abs() < 1e-15);
        assert_eq!(average_precision(&[false, false]), None);
    }

    #[test]
    fn rank_matches_exact_cosine_sort() {
        let s = store(&[
            (0, None, vec![1.0, 0.0]),
            (0, None, vec![0.9, 0.1]),
            (1, None, vec![0.0, 1.0]),
            (0, None, vec![0.5, 0.5]),
            (1, None, vec![-1.0, 0.2]),
        ]);
        let r = rank(&s, Protocol::Plain).unwrap();
        // query 0 = (1,0): cosines: r1≈0.994, r3≈0.707, r2=0, r4≈-0.98
        assert_eq!(r.query_indices[0], 0);
        assert_eq!(r.order[0], vec![1, 3, 2, 4]);
        assert_eq!(r.flags[0], vec![true, true, false, false]);
    }

    #[test]
    fn all_equal_vectors_tie_break_by_index() {
        let s = store(&[
            (0, None, vec![1.0, 1.0]),
            (1, None, vec![1.0, 1.0]),
            (0, None, vec![1.0, 1.0]),
            (1, None, vec![1.0, 1.0]),
        ]);
        let r = rank(&s, Protocol::Plain).unwrap();
        assert_eq!(r.order[0], vec![1, 2, 3]);
        assert_eq!(r.order[1], vec![0, 2, 3]);
    }

    #[test]
    fn cross_camera_excludes_same_camera_positives() {
        // entity 0 on cameras 0 and 1; entity 1 only on camera 0
        let s = store(&[
            (0, Some(0), vec![1.0, 0.0]),
            (0, Some(0), vec![0.99, 0.01]),
            (0, Some(1), vec![0.98, 0.02]),
            (1, Some(0), vec![0.0, 1.0]),
        ]);
        let r = rank(&s, Protocol::CrossCamera).unwrap();
        // query 0: same-cam same-id record 1 excluded entirely
        assert_eq!(r.query_indices[0], 0);
        assert!(!r.order[0].contains(&1));
        // its only positive is the cross-camera copy
        let pos: Vec<usize> = r.order[0]
            .iter()
            .zip(&r.flags[0])
            .filter(|(_, &f)| f)
            .map(|(&g, _)| g)
            .collect();
        assert_eq!(pos, vec![2]);
        // entity 1 has no cross-camera positive → dropped
        assert_eq!(r.dropped_no_positive, 1);
    }

    #[test]
    fn single_camera_restricts_gallery() {
        let s = store(&[
            (0, Some(0), vec![1.0, 0.0]),
            (0, Some(1), vec![1.0, 0.0]),
            (0, Some(0), vec![0.9, 0.1]),
            (1, Some(0), vec![0.0, 1.0]),
        ]);
        let r = rank(&s, Protocol::SingleCamera).unwrap();
        // query 0 sees only camera-0 records
        assert_eq!(r.order[0], vec![2, 3]);
        // record 1 is alone on camera 1 → no gallery
        assert_eq!(r.dropped_no_gallery, 1);
    }

    #[test]
    fn camera_protocol_without_cameras_errors() {
        let s = store(&[(0, None, vec![1.0]), (0, None, vec![1.0])]);
        assert!(matches!(
            rank(&s, Protocol::CrossCamera),
            Err(EvalError::MissingCameras("cross-camera"))
        ));
    }

    #[test]
    fn no_retained_queries_is_an_error() {
        let s = store(&[(0, None, vec![1.0, 0.0]), (1, None, vec![0.0, 1.0])]);
        match rank(&s, Protocol::Plain) {
            Err(EvalError::EmptyProtocol {
                total, no_positive, ..
            }) => {
                assert_eq!((total, no_positive), (2, 2));
            }
            other => panic!("expected empty protocol, got {:?}", other.map(|_| ())),
        }
    }

    /// Brute-force transcription of the metric definitions: normalize,
    /// rank every query by descending cosine with index tie-break, then
    /// re-derive AP and recall from scratch. Must agree exactly.
    fn oracle_plain_metrics(s: &FeatureStore, ks: &[usize]) -> (f64, Vec<f64>, usize) {
        let n = s.len();
        let d = s.vectors.ncols();
        let mut unit = vec![vec![0.0f64; d]; n];
        for i in 0..n {
            let mut sq = 0.0;
            for j in 0..d {
                let v = s.vectors[[i, j]] as f64;
                sq += v * v;
            }
            let norm = sq.sqrt();
            if norm > 0.0 {
                for j in 0..d {
                    unit[i][j] = s.vectors[[i, j]] as f64 / norm;
                }
            }
        }
        let mut aps = Vec::new();
        let mut rk = vec![0usize; ks.len()];
        let mut dropped = 0usize;
        for q in 0..n {
            let mut scored: Vec<(f64, usize)> = (0..n)
                .filter(|&g| g != q)
                .map(|g| {
                    let mut c = 0.0;
                    for j in 0..d {
                        c += unit[q][j] * unit[g][j];
                    }
                    (c, g)
                })
                .collect();
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let flags: Vec<bool> = scored.iter().map(|&(_, g)| s.ids[g] == s.ids[q]).collect();
            if !flags.iter().any(|&f| f) {
                dropped += 1;
                continue;
            }
            let mut hits = 0usize;
            let mut sum = 0.0;
            for (i, &f) in flags.iter().enumerate() {
                if f {
                    hits += 1;
                    sum += hits as f64 / (i + 1) as f64;
                }
            }
            aps.push(sum / hits as f64);
            for (ki, &k) in ks.iter().enumerate() {
                if flags.iter().take(k).any(|&f| f) {
                    rk[ki] += 1;
                }
            }
        }
        let map = aps.iter().sum::<f64>() / aps.len() as f64;
        let recalls = rk.iter().map(|&h| h as f64 / aps.len() as f64).collect();
        (map, recalls, dropped)
    }

    #[test]
    fn metrics_equal_brute_force_oracle_exactly() {
        for seed in 0..20u64 {
            let n = 5 + (seed as usize * 7) % 46; // 5..=50
            let s = random_store(seed, n, 8, false);
            let (want_map, want_recalls, want_dropped) = oracle_plain_metrics(&s, &[1, 5]);
            let r = rank(&s, Protocol::Plain).unwrap();
            let m = metrics(&r, &[1, 5]);
            assert_eq!(m.map, want_map, "seed {seed}");
            assert_eq!(m.recall_at(1).unwrap(), want_recalls[0]);
            assert_eq!(m.recall_at(5).unwrap(), want_recalls[1]);
            assert_eq!(m.dropped, want_dropped);
        }
    }

    #[test]
    fn metrics_are_scale_invariant() {
        let s = random_store(3, 24, 6, true);
        let mut scaled = s.clone();
        scaled.vectors.mapv_inplace(|v| v * 3.7);
        for proto in [Protocol::Plain, Protocol::SingleCamera, Protocol::CrossCamera] {
            let a = rank(&s, proto).unwrap();
            let b = rank(&scaled, proto).unwrap();
            assert_eq!(a.order, b.order);
            let ma = metrics(&a, &[1, 5]);
            let mb = metrics(&b, &[1, 5]);
            assert_eq!(ma.map, mb.map);
        }
    }

    #[test]
    fn perfect_prefix_gives_map_one() {
        // two tight same-id clusters far apart: every query's positives
        // occupy a prefix
        let s = store(&[
            (0, None, vec![1.0, 0.0]),
            (0, None, vec![0.99, 0.01]),
            (1, None, vec![-1.0, 0.0]),
            (1, None, vec![-0.99, 0.01]),
        ]);
        let r = rank(&s, Protocol::Plain).unwrap();
        let m = metrics(&r, &[1]);
        assert_eq!(m.map, 1.0);
        assert_eq!(m.recall_at(1).unwrap(), 1.0);
    }

    #[test]
    fn map_bounds_hold() {
        for seed in 30..40u64 {
            let s = random_store(seed, 20, 4, false);
            let m = metrics(&rank(&s, Protocol::Plain).unwrap(), &[1]);
            assert!(m.map <= 1.0 && m.map >= 0.0);
            assert!(m.recall_at(1).unwrap() <= 1.0);
        }
    }

    #[test]
    fn mmap_is_arithmetic_mean() {
        assert_eq!(mmap(0.6, 0.8), 0.7);
        assert_eq!(mmap(0.8, 0.6), 0.7);
        assert_eq!(mmap(0.5, 0.5), 0.5);
    }

    #[test]
    fn mixed_ap_queries_average_to_hand_value() {
        // hand-ranked: queries 0, 1, 2 find their positive at rank 2
        // (AP 1/2), query 3 at rank 3 (AP 1/3) → mAP = 11/24
        let s = store(&[
            (0, None, vec![1.0, 0.0, 0.0]),
            (0, None, vec![0.9, 0.1, 0.3]),
            (1, None, vec![0.0, 0.0, 1.0]),
            (1, None, vec![0.9, 0.0, 0.2]),
        ]);
        let r = rank(&s, Protocol::Plain).unwrap();
        let m = metrics(&r, &[1, 2]);
        assert!((m.map - 11.0 / 24.0).abs() < 1e-12, "mAP {}", m.map);
        assert_eq!(m.recall_at(1).unwrap(), 0.0);
        assert!((m.recall_at(2).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn rerank_lambda_one_preserves_cosine_order() {
        let s = random_store(9, 12, 6, false);
        let plain = rank(&s, Protocol::Plain).unwrap();
        let rr = rerank(
            &s,
            Protocol::Plain,
            &RerankParams {
                k1: 4,
                k2: 2,
                lambda: 1.0,
            },
        )
        .unwrap();
        assert_eq!(plain.order, rr.result.order);
        assert_eq!(plain.flags, rr.result.flags);
    }

    #[test]
    fn rerank_clamps_large_k1_with_warning() {
        let s = random_store(10, 5, 4, false);
        let rr = rerank(&s, Protocol::Plain, &RerankParams::default()).unwrap();
        assert!(rr.warnings.iter().any(|w| w.contains("clamped")));
    }

    #[test]
    fn rerank_final_matrix_is_symmetric() {
        let s = random_store(11, 10, 5, false);
        let (fin, _) = rerank_distances(
            &s,
            &RerankParams {
                k1: 4,
                k2: 2,
                lambda: 0.3,
            },
        )
        .unwrap();
        for i in 0..10 {
            for j in 0..10 {
                assert!((fin[[i, j]] - fin[[j, i]]).abs() < 1e-12);
            }
        }
    }

    /// Literal dense transcription of the documented k-reciprocal recipe,
    /// using sets and full n×n weight tables instead of sparse rows.
    fn oracle_rerank(s: &FeatureStore, k1: usize, k2: usize, lambda: f64) -> Array2<f64> {
        let n = s.len();
        let unit = s.normalized();
        let mut d = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                d[[i, j]] = if i == j { 0.0 } else { 1.0 - dot(&unit, i, j) };
            }
        }
        let k1 = k1.min(n - 1);
        let k2 = k2.min(k1);
        let order: Vec<Vec<usize>> = (0..n)
            .map(|i| {
                let mut v: Vec<usize> = (0..n).collect();
                v.sort_by(|&a, &b| d[[i, a]].total_cmp(&d[[i, b]]).then(a.cmp(&b)));
                v
            })
            .collect();
        let neigh =
            |i: usize, k: usize| -> Vec<usize> { order[i].iter().copied().take(k + 1).collect() };
        let recip = |i: usize, k: usize| -> Vec<usize> {
            neigh(i, k)
                .into_iter()
                .filter(|&j| neigh(j, k).contains(&i))
                .collect()
        };
        let half = ((k1 as f64) / 2.0).round().max(1.0) as usize;
        let mut v = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            let base = recip(i, k1);
            let mut set: Vec<usize> = base.clone();
            for &j in &base {
                let cand = recip(j, half);
                let inter = cand.iter().filter(|c| base.contains(c)).count();
                if (inter as f64) > (2.0 / 3.0) * cand.len() as f64 {
                    set.extend(cand);
                }
            }
            set.sort_unstable();
            set.dedup();
            let total: f64 = set.iter().map(|&j| (-d[[i, j]]).exp()).sum();
            for &j in &set {
                v[[i, j]] = (-d[[i, j]]).exp() / total;
            }
        }
        let mut vq = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            let members = neigh(i, k2);
            for &j in &members {
                for c in 0..n {
                    vq[[i, c]] += v[[j, c]] / members.len() as f64;
                }
            }
        }
        let mut fin = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                let mut s_min = 0.0;
                let mut s_max = 0.0;
                for c in 0..n {
                    s_min += vq[[i, c]].min(vq[[j, c]]);
                    s_max += vq[[i, c]].max(vq[[j, c]]);
                }
                let dj = if s_max == 0.0 { 1.0 } else { 1.0 - s_min / s_max };
                fin[[i, j]] = lambda * d[[i, j]] + (1.0 - lambda) * dj;
            }
        }
        fin
    }

    #[test]
    fn rerank_matches_dense_oracle() {
        // includes the minimal 3-row store the formula can run on
        for (seed, n, k1, k2) in [(21u64, 3usize, 2usize, 1usize), (22, 7, 3, 2), (23, 10, 4, 2)] {
            let s = random_store(seed, n, 5, false);
            let (got, _) = rerank_distances(
                &s,
                &RerankParams {
                    k1,
                    k2,
                    lambda: 0.3,
                },
            )
            .unwrap();
            let want = oracle_rerank(&s, k1, k2, 0.3);
            for i in 0..n {
                for j in 0..n {
                    assert!(
                        (got[[i, j]] - want[[i, j]]).abs() < 1e-12,
                        "n={n} at ({i},{j}): {} vs {}",
                        got[[i, j]],
                        want[[i, j]]
                    );
                }
            }
        }
    }

    #[test]
    fn camera_report_fills_split_fields() {
        let s = random_store(31, 30, 6, true);
        let rep = camera_report(&s, None).unwrap();
        let single = rep.map_single.unwrap();
        let cross = rep.map_cross.unwrap();
        assert_eq!(rep.mmap.unwrap(), (single + cross) / 2.0);
        assert!(rep.r1_single.is_some() && rep.r1_cross.is_some());
        let text = render_report(&rep);
        assert!(text.contains("mmAP"));
    }

    #[test]
    fn bias_grid_produces_four_cells() {
        let tower = Tower::new(
            {
                let mut c = crate::nettower::TowerConfig::toy(3);
                c.input_size = 32;
                c
            },
            5,
        )
        .unwrap();
        let table = bias_grid::<EvalError>(
            |_| {
                Tower::new(tower.config.clone(), 5).map_err(EvalError::from)
            },
            |_, test_masked| {
                let s = random_store(if test_masked { 41 } else { 42 }, 12, 4, true);
                camera_report(&s, None)
            },
        )
        .unwrap();
        assert_eq!(table.cells.len(), 4);
        let combos: Vec<(bool, bool)> = table
            .cells
            .iter()
            .map(|c| (c.train_masked, c.test_masked))
            .collect();
        assert_eq!(
            combos,
            vec![(false, false), (false, true), (true, false), (true, true)]
        );
        let text = render_bias_table(&table);
        assert!(text.contains("original") && text.contains("masked"));
    }

    #[test]
    fn extract_features_deterministic_rows() {
        let dir = tempfile::tempdir().unwrap();
        // two distinct images; the first listed twice
        for (name, shade) in [("a.png", 40u8), ("b.png", 200u8)] {
            let img = image::RgbImage::from_fn(48, 40, |x, y| {
                image::Rgb([shade, (x * 3) as u8, (y * 5) as u8])
            });
            img.save(dir.path().join(name)).unwrap();
        }
        let records = vec![
            crate::datacore::SampleRecord {
                image_path: "a.png".into(),
                entity_id: 0,
                orientation: crate::datacore::Orientation::Left,
                camera_id: None,
                mask_path: None,
            },
            crate::datacore::SampleRecord {
                image_path: "b.png".into(),
                entity_id: 1,
                orientation: crate::datacore::Orientation::Right,
                camera_id: None,
                mask_path: None,
            },
            crate::datacore::SampleRecord {
                image_path: "a.png".into(),
                entity_id: 0,
                orientation: crate::datacore::Orientation::Left,
                camera_id: None,
                mask_path: None,
            },
            crate::datacore::SampleRecord {
                image_path: "missing.png".into(),
                entity_id: 1,
                orientation: crate::datacore::Orientation::Left,
                camera_id: None,
                mask_path: None,
            },
        ];
        let manifest = DatasetManifest {
            name: "t".into(),
            split: crate::datacore::Split::TestQuery,
            records,
            num_entities: 2,
            entity_labels: vec!["x".into(), "y".into()],
            base_dir: dir.path().to_path_buf(),
        };
        let mut cfg = crate::nettower::TowerConfig::toy(2);
        cfg.input_size = 32;
        let tower = Tower::new(cfg, 3).unwrap();
        let (store, skipped) = extract_features(&tower, &manifest, &ExtractOptions::default()).unwrap();
        assert_eq!(store.len(), 3);
        assert_eq!(skipped, vec!["missing.png".to_string()]);
        assert_eq!(store.vectors.ncols(), 256); // 2 × embed_dim
        // duplicate record → identical rows; different image → different row
        assert_eq!(store.vectors.row(0), store.vectors.row(2));
        assert_ne!(store.vectors.row(0), store.vectors.row(1));
    }
}
