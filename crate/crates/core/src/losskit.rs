//! Training losses: identity cross-entropy with label smoothing, orientation
//! binary cross-entropy, circle loss over within-batch similarity sets, and
//! the dense-correspondence exchange loss, plus their weighted total.
//!
//! Everything here runs in f64 regardless of what the network computes in,
//! so analytic gradients can be validated against central finite differences
//! at tight tolerances. Each loss is a pure function returning both the value
//! and the gradient with respect to its inputs; reductions run sequentially
//! over batch index so results are bit-reproducible per platform.

use ndarray::{Array2, Array3};
use rand::Rng;

use crate::rng::{stream_rng, Stream};

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("row {row}: target {target} out of range for {classes} classes")]
    TargetOutOfRange {
        row: usize,
        target: u32,
        classes: usize,
    },
    #[error("row {row}: orientation target {value} is not 0 or 1")]
    NonBinaryTarget { row: usize, value: f64 },
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("smoothing {0} outside [0,1)")]
    BadSmoothing(f64),
    #[error("circle loss scale must be positive, got {0}")]
    BadScale(f64),
    #[error("circle loss margin {0} outside [0,1)")]
    BadMargin(f64),
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("descriptor map {map} contains a non-finite value")]
    NonFiniteDescriptor { map: &'static str },
    #[error("descriptor maps disagree in shape: {0}")]
    ShapeMismatch(String),
    #[error("loss term {term} is non-finite ({value})")]
    NonFiniteTerm { term: &'static str, value: f64 },
}

fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with max subtraction.
fn softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut p = z.clone();
    for mut row in p.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    p
}

/// Backward through a row-wise softmax: dz = p ∘ (dp − Σ_k p_k dp_k).
fn softmax_rows_backward(p: &Array2<f64>, dp: &Array2<f64>) -> Array2<f64> {
    let mut dz = Array2::zeros(p.raw_dim());
    for ((mut dz_row, p_row), dp_row) in dz
        .rows_mut()
        .into_iter()
        .zip(p.rows())
        .zip(dp.rows())
    {
        let dot: f64 = p_row.iter().zip(dp_row.iter()).map(|(a, b)| a * b).sum();
        for ((d, &pv), &dpv) in dz_row.iter_mut().zip(p_row.iter()).zip(dp_row.iter()) {
            *d = pv * (dpv - dot);
        }
    }
    dz
}

/// Identity cross-entropy with label smoothing. Targets are dense class ids;
/// the smoothed target distribution is q = (1−ε)·onehot + ε/C.
pub fn id_loss(
    logits: &Array2<f64>,
    targets: &[u32],
    smoothing: f64,
) -> Result<f64, LossError> {
    id_loss_grad(logits, targets, smoothing).map(|(v, _)| v)
}

/// Same, returning the gradient with respect to the logits.
pub fn id_loss_grad(
    logits: &Array2<f64>,
    targets: &[u32],
    smoothing: f64,
) -> Result<(f64, Array2<f64>), LossError> {
    let (n, c) = logits.dim();
    if c < 2 {
        return Err(LossError::TooFewClasses(c));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(LossError::BadSmoothing(smoothing));
    }
    assert_eq!(n, targets.len(), "logit rows must match target count");
    for (row, &t) in targets.iter().enumerate() {
        if t as usize >= c {
            return Err(LossError::TargetOutOfRange {
                row,
                target: t,
                classes: c,
            });
        }
    }

    let probs = softmax_rows(logits);
    let off = smoothing / c as f64;
    let on = 1.0 - smoothing + off;
    let mut total = 0.0;
    let mut grad = Array2::zeros((n, c));
    for i in 0..n {
        let t = targets[i] as usize;
        // CE(q, p) = −Σ_k q_k log p_k, with log p via logits − logsumexp.
        let row: Vec<f64> = logits.row(i).iter().cloned().collect();
        let lse = logsumexp(&row);
        let mut ce = 0.0;
        for k in 0..c {
            let q = if k == t { on } else { off };
            ce -= q * (row[k] - lse);
            grad[[i, k]] = (probs[[i, k]] - q) / n as f64;
        }
        total += ce;
    }
    Ok((total / n as f64, grad))
}

/// Orientation binary cross-entropy on a pre-sigmoid logit per sample.
/// Targets must be exactly 0 or 1.
pub fn lr_loss(logits: &[f64], targets: &[f64]) -> Result<f64, LossError> {
    lr_loss_grad(logits, targets).map(|(v, _)| v)
}

pub fn lr_loss_grad(logits: &[f64], targets: &[f64]) -> Result<(f64, Vec<f64>), LossError> {
    assert_eq!(logits.len(), targets.len(), "logit/target length mismatch");
    let n = logits.len();
    let mut total = 0.0;
    let mut grad = vec![0.0; n];
    for i in 0..n {
        let y = targets[i];
        if y != 0.0 && y != 1.0 {
            return Err(LossError::NonBinaryTarget { row: i, value: y });
        }
        let z = logits[i];
        // −[y log σ(z) + (1−y) log(1−σ(z))] in the overflow-free form.
        total += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        grad[i] = (sigmoid(z) - y) / n as f64;
    }
    Ok((total / n as f64, grad))
}

/// Within-class and between-class cosine similarities for one anchor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimilaritySets {
    pub s_p: Vec<f64>,
    pub s_n: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct CircleParams {
    pub gamma: f64,
    pub margin: f64,
}

impl CircleParams {
    pub fn new(gamma: f64, margin: f64) -> Result<Self, LossError> {
        if gamma <= 0.0 {
            return Err(LossError::BadScale(gamma));
        }
        if !(0.0..1.0).contains(&margin) {
            return Err(LossError::BadMargin(margin));
        }
        Ok(Self { gamma, margin })
    }
}

impl Default for CircleParams {
    fn default() -> Self {
        Self {
            gamma: 64.0,
            margin: 0.25,
        }
    }
}

/// Circle loss over one anchor's similarity sets:
/// log(1 + Σ_j exp(γ·[s_n+m]_+·(s_n−m)) · Σ_i exp(−γ·[1+m−s_p]_+·(s_p−1+m)))
/// evaluated through log-sum-exp and softplus so large γ cannot overflow.
/// Empty positives or negatives yield exactly 0.
pub fn circle_loss(sims: &SimilaritySets, params: &CircleParams) -> f64 {
    circle_loss_grad(sims, params).0
}

/// Same, returning gradients with respect to s_p and s_n.
pub fn circle_loss_grad(sims: &SimilaritySets, params: &CircleParams) -> (f64, Vec<f64>, Vec<f64>) {
    let k = sims.s_p.len();
    let l = sims.s_n.len();
    if k == 0 || l == 0 {
        return (0.0, vec![0.0; k], vec![0.0; l]);
    }
    let g = params.gamma;
    let m = params.margin;
    // Clamped weight factors zero the exponent, leaving an exp(0)=1 term in
    // the sum, not an excluded one.
    let a: Vec<f64> = sims
        .s_n
        .iter()
        .map(|&s| if s + m > 0.0 { g * (s + m) * (s - m) } else { 0.0 })
        .collect();
    let b: Vec<f64> = sims
        .s_p
        .iter()
        .map(|&s| {
            if 1.0 + m - s > 0.0 {
                -g * (1.0 + m - s) * (s - 1.0 + m)
            } else {
                0.0
            }
        })
        .collect();
    let lse_a = logsumexp(&a);
    let lse_b = logsumexp(&b);
    let z = lse_a + lse_b;
    let loss = softplus(z);

    let sig = sigmoid(z);
    let grad_n: Vec<f64> = sims
        .s_n
        .iter()
        .zip(&a)
        .map(|(&s, &aj)| {
            if s + m > 0.0 {
                sig * (aj - lse_a).exp() * 2.0 * g * s
            } else {
                0.0
            }
        })
        .collect();
    let grad_p: Vec<f64> = sims
        .s_p
        .iter()
        .zip(&b)
        .map(|(&s, &bi)| {
            if 1.0 + m - s > 0.0 {
                sig * (bi - lse_b).exp() * (-2.0 * g * (1.0 - s))
            } else {
                0.0
            }
        })
        .collect();
    (loss, grad_p, grad_n)
}

/// Per-anchor cosine similarity sets for a labeled batch. Self-pairs are
/// excluded. Returns the sets plus the count of anchors that had no
/// positive (those carry empty s_p and contribute zero loss).
pub fn pairwise_sets(embeddings: &Array2<f64>, labels: &[u32]) -> (Vec<SimilaritySets>, usize) {
    let n = embeddings.nrows();
    assert_eq!(n, labels.len(), "embedding rows must match label count");
    let norms: Vec<f64> = (0..n)
        .map(|i| embeddings.row(i).iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12))
        .collect();
    let mut sims = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let dot: f64 = embeddings
                .row(i)
                .iter()
                .zip(embeddings.row(j).iter())
                .map(|(a, b)| a * b)
                .sum();
            let s = dot / (norms[i] * norms[j]);
            sims[[i, j]] = s;
            sims[[j, i]] = s;
        }
    }
    let mut out = Vec::with_capacity(n);
    let mut orphans = 0;
    for i in 0..n {
        let mut set = SimilaritySets::default();
        for j in 0..n {
            if j == i {
                continue;
            }
            if labels[j] == labels[i] {
                set.s_p.push(sims[[i, j]]);
            } else {
                set.s_n.push(sims[[i, j]]);
            }
        }
        if set.s_p.is_empty() {
            orphans += 1;
        }
        out.push(set);
    }
    (out, orphans)
}

#[derive(Debug, Clone)]
pub struct BatchCircleOutcome {
    pub loss: f64,
    /// Gradient with respect to the raw (unnormalized) embeddings.
    pub grad: Array2<f64>,
    pub anchors_used: usize,
    pub anchors_skipped: usize,
}

/// Mean circle loss over all anchors in a batch, differentiated through the
/// cosine normalization back to the raw embeddings.
pub fn batch_circle_loss(
    embeddings: &Array2<f64>,
    labels: &[u32],
    params: &CircleParams,
) -> BatchCircleOutcome {
    let n = embeddings.nrows();
    let d = embeddings.ncols();
    let norms: Vec<f64> = (0..n)
        .map(|i| embeddings.row(i).iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12))
        .collect();
    let unit: Vec<Vec<f64>> = (0..n)
        .map(|i| embeddings.row(i).iter().map(|v| v / norms[i]).collect())
        .collect();
    let dot_unit = |i: usize, j: usize| -> f64 {
        unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum()
    };

    // ds/dx for s = cos(x_i, x_j): (e_j − s·e_i)/‖x_i‖ into i, symmetric into j.
    let mut grad = Array2::<f64>::zeros((n, d));
    let mut total = 0.0;
    let mut used = 0;
    let mut skipped = 0;
    let mut ds = Array2::<f64>::zeros((n, n));
    let mut per_anchor: Vec<(Vec<usize>, Vec<usize>)> = Vec::with_capacity(n);
    for i in 0..n {
        let pos: Vec<usize> = (0..n)
            .filter(|&j| j != i && labels[j] == labels[i])
            .collect();
        let neg: Vec<usize> = (0..n)
            .filter(|&j| j != i && labels[j] != labels[i])
            .collect();
        if pos.is_empty() || neg.is_empty() {
            skipped += 1;
            per_anchor.push((Vec::new(), Vec::new()));
            continue;
        }
        used += 1;
        per_anchor.push((pos, neg));
    }
    if used == 0 {
        return BatchCircleOutcome {
            loss: 0.0,
            grad,
            anchors_used: 0,
            anchors_skipped: skipped,
        };
    }
    for i in 0..n {
        let (pos, neg) = &per_anchor[i];
        if pos.is_empty() {
            continue;
        }
        let sims = SimilaritySets {
            s_p: pos.iter().map(|&j| dot_unit(i, j)).collect(),
            s_n: neg.iter().map(|&j| dot_unit(i, j)).collect(),
        };
        let (loss, gp, gn) = circle_loss_grad(&sims, params);
        total += loss;
        for (slot, &j) in pos.iter().enumerate() {
            ds[[i, j]] += gp[slot];
        }
        for (slot, &j) in neg.iter().enumerate() {
            ds[[i, j]] += gn[slot];
        }
    }
    let scale = 1.0 / used as f64;
    for i in 0..n {
        for j in 0..n {
            let g = ds[[i, j]] * scale;
            if g == 0.0 {
                continue;
            }
            let s = dot_unit(i, j);
            for c in 0..d {
                grad[[i, c]] += g * (unit[j][c] - s * unit[i][c]) / norms[i];
                grad[[j, c]] += g * (unit[i][c] - s * unit[j][c]) / norms[j];
            }
        }
    }
    BatchCircleOutcome {
        loss: total * scale,
        grad,
        anchors_used: used,
        anchors_skipped: skipped,
    }
}

/// A dense descriptor map laid out as one row per grid cell, row-major
/// (index u = y·w + x), with the cell's descriptor along the columns.
#[derive(Debug, Clone)]
pub struct DescriptorGrid {
    pub h: usize,
    pub w: usize,
    pub data: Array2<f64>,
}

impl DescriptorGrid {
    pub fn new(h: usize, w: usize, data: Array2<f64>) -> Result<Self, LossError> {
        if data.nrows() != h * w {
            return Err(LossError::ShapeMismatch(format!(
                "{}x{} grid needs {} rows, got {}",
                h,
                w,
                h * w,
                data.nrows()
            )));
        }
        Ok(Self { h, w, data })
    }

    /// Convert a CHW f32 feature map; channels become descriptor columns.
    pub fn from_chw(map: &Array3<f32>) -> Self {
        let (c, h, w) = map.dim();
        let mut data = Array2::zeros((h * w, c));
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data[[y * w + x, ch]] = map[[ch, y, x]] as f64;
                }
            }
        }
        Self { h, w, data }
    }

    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    /// Normalized [x, y] center of cell `idx`, each axis in [−1, 1].
    pub fn coord(&self, idx: usize) -> [f64; 2] {
        cell_coord(self.h, self.w, idx)
    }
}

/// Normalized [x, y] center of cell `idx` in an h×w grid.
pub fn cell_coord(h: usize, w: usize, idx: usize) -> [f64; 2] {
    let x = (idx % w) as f64;
    let y = (idx / w) as f64;
    [
        2.0 * (x + 0.5) / w as f64 - 1.0,
        2.0 * (y + 0.5) / h as f64 - 1.0,
    ]
}

pub fn default_temperature(descriptor_dim: usize) -> f64 {
    1.0 / (descriptor_dim as f64).sqrt()
}

/// Inputs to one correspondence-exchange evaluation: descriptors of the
/// image, its warped copy, an auxiliary image, and the warp targets g(u)
/// in normalized coordinates (one [x, y] row per cell of `phi_x`).
pub struct DveBatchInputs<'a> {
    pub phi_x: &'a DescriptorGrid,
    pub phi_xprime: &'a DescriptorGrid,
    pub phi_aux: &'a DescriptorGrid,
    pub warp_grid: &'a Array2<f64>,
    pub temperature: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DveOutcome {
    pub loss: f64,
    /// Warp targets that fell outside the normalized square and were clamped.
    pub clamped_targets: usize,
}

pub struct DveGradients {
    pub phi_x: Array2<f64>,
    pub phi_xprime: Array2<f64>,
    pub phi_aux: Array2<f64>,
}

fn check_finite(grid: &DescriptorGrid, name: &'static str) -> Result<(), LossError> {
    if grid.data.iter().any(|v| !v.is_finite()) {
        Err(LossError::NonFiniteDescriptor { map: name })
    } else {
        Ok(())
    }
}

fn dve_validate(inputs: &DveBatchInputs<'_>) -> Result<(), LossError> {
    let (x, xp, aux) = (inputs.phi_x, inputs.phi_xprime, inputs.phi_aux);
    if x.data.dim() != xp.data.dim()
        || x.data.dim() != aux.data.dim()
        || (x.h, x.w) != (xp.h, xp.w)
        || (x.h, x.w) != (aux.h, aux.w)
    {
        return Err(LossError::ShapeMismatch(format!(
            "phi_x {}x{}x{}, phi_xprime {}x{}x{}, phi_aux {}x{}x{}",
            x.h,
            x.w,
            x.data.ncols(),
            xp.h,
            xp.w,
            xp.data.ncols(),
            aux.h,
            aux.w,
            aux.data.ncols()
        )));
    }
    if inputs.warp_grid.dim() != (x.cells(), 2) {
        return Err(LossError::ShapeMismatch(format!(
            "warp grid {:?}, expected ({}, 2)",
            inputs.warp_grid.dim(),
            x.cells()
        )));
    }
    if inputs.temperature <= 0.0 {
        return Err(LossError::BadTemperature(inputs.temperature));
    }
    check_finite(x, "phi_x")?;
    check_finite(xp, "phi_xprime")?;
    check_finite(aux, "phi_aux")
}

/// Expected-distance cost matrix: cost[u][v] = ‖coord(v) − g(u)‖ with g
/// clamped to the normalized square. Returns the clamp count.
fn dve_cost(phi_x: &DescriptorGrid, warp_grid: &Array2<f64>) -> (Array2<f64>, usize) {
    let n = phi_x.cells();
    let mut clamped = 0;
    let mut cost = Array2::zeros((n, n));
    for u in 0..n {
        let gx = warp_grid[[u, 0]];
        let gy = warp_grid[[u, 1]];
        let cx = gx.clamp(-1.0, 1.0);
        let cy = gy.clamp(-1.0, 1.0);
        if cx != gx || cy != gy {
            clamped += 1;
        }
        for v in 0..n {
            let [vx, vy] = phi_x.coord(v);
            cost[[u, v]] = ((vx - cx).powi(2) + (vy - cy).powi(2)).sqrt();
        }
    }
    (cost, clamped)
}

struct DveForward {
    p1: Array2<f64>,
    hat: Array2<f64>,
    p2: Array2<f64>,
    cost: Array2<f64>,
    clamped: usize,
}

fn dve_forward(inputs: &DveBatchInputs<'_>) -> Result<DveForward, LossError> {
    dve_validate(inputs)?;
    let tau = inputs.temperature;
    let s1 = inputs.phi_x.data.dot(&inputs.phi_aux.data.t()) / tau;
    let p1 = softmax_rows(&s1);
    let hat = p1.dot(&inputs.phi_aux.data);
    let s2 = hat.dot(&inputs.phi_xprime.data.t()) / tau;
    let p2 = softmax_rows(&s2);
    let (cost, clamped) = dve_cost(inputs.phi_x, inputs.warp_grid);
    Ok(DveForward {
        p1,
        hat,
        p2,
        cost,
        clamped,
    })
}

/// Correspondence loss through auxiliary exchange: descriptors of x are
/// re-expressed over the auxiliary image, then matched against the warped
/// copy; the loss is the expected distance between the matched cell and the
/// known warp target, averaged over cells.
pub fn dve_loss(inputs: &DveBatchInputs<'_>) -> Result<DveOutcome, LossError> {
    let f = dve_forward(inputs)?;
    let n = f.p2.nrows() as f64;
    let loss = (&f.p2 * &f.cost).sum() / n;
    Ok(DveOutcome {
        loss,
        clamped_targets: f.clamped,
    })
}

/// Same, returning gradients for all three descriptor maps.
pub fn dve_loss_grad(inputs: &DveBatchInputs<'_>) -> Result<(DveOutcome, DveGradients), LossError> {
    let f = dve_forward(inputs)?;
    let n = f.p2.nrows() as f64;
    let tau = inputs.temperature;
    let loss = (&f.p2 * &f.cost).sum() / n;

    let dp2 = &f.cost / n;
    let ds2 = softmax_rows_backward(&f.p2, &dp2);
    let dhat = ds2.dot(&inputs.phi_xprime.data) / tau;
    let d_xprime = ds2.t().dot(&f.hat) / tau;
    let dp1 = dhat.dot(&inputs.phi_aux.data.t());
    let d_aux_hat = f.p1.t().dot(&dhat);
    let ds1 = softmax_rows_backward(&f.p1, &dp1);
    let d_x = ds1.dot(&inputs.phi_aux.data) / tau;
    let d_aux_s1 = ds1.t().dot(&inputs.phi_x.data) / tau;

    Ok((
        DveOutcome {
            loss,
            clamped_targets: f.clamped,
        },
        DveGradients {
            phi_x: d_x,
            phi_xprime: d_xprime,
            phi_aux: d_aux_hat + d_aux_s1,
        },
    ))
}

/// Final match distribution p(v|u), one row per cell of `phi_x`. Rows sum
/// to 1. Exposed for diagnostics and tests.
pub fn dve_probabilities(inputs: &DveBatchInputs<'_>) -> Result<Array2<f64>, LossError> {
    dve_forward(inputs).map(|f| f.p2)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_reid: f64,
    pub lambda_dve: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_reid: 2.0,
            lambda_dve: 0.2,
        }
    }
}

/// Raw per-term values for one step. `None` means the term was not computed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub id: f64,
    pub lr: f64,
    pub reid: Option<f64>,
    pub dve: Option<f64>,
}

/// One step's loss record, as logged.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub id: f64,
    pub lr: f64,
    pub reid: f64,
    pub dve: f64,
    pub total: f64,
}

/// Weighted total: L_ID + L_LR + λ_reID·L_reID + λ_DVE·L_DVE. A zero weight
/// or an absent part contributes exactly 0 and never touches the term's
/// value, so disabled terms cannot poison the total.
pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> Result<LossBreakdown, LossError> {
    let check = |term: &'static str, v: f64| -> Result<f64, LossError> {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(LossError::NonFiniteTerm { term, value: v })
        }
    };
    let id = check("id", parts.id)?;
    let lr = check("lr", parts.lr)?;
    let mut total = id + lr;
    let mut reid = 0.0;
    if weights.lambda_reid != 0.0 {
        if let Some(v) = parts.reid {
            reid = check("reid", v)?;
            total += weights.lambda_reid * reid;
        }
    }
    let mut dve = 0.0;
    if weights.lambda_dve != 0.0 {
        if let Some(v) = parts.dve {
            dve = check("dve", v)?;
            total += weights.lambda_dve * dve;
        }
    }
    Ok(LossBreakdown {
        id,
        lr,
        reid,
        dve,
        total,
    })
}

/// A smooth random warp of the normalized image square: a small affine map
/// plus a sinusoidal displacement, with the displacement gradient bounded
/// below 1/2 so g = id + d is invertible and the fixed-point inverse
/// converges.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct WarpField {
    affine: [[f64; 2]; 2],
    translate: [f64; 2],
    amp: [f64; 2],
    freq: [f64; 2],
    dir: [[f64; 2]; 2],
    phase: [f64; 2],
}

impl WarpField {
    pub fn identity() -> Self {
        Self {
            affine: [[0.0; 2]; 2],
            translate: [0.0; 2],
            amp: [0.0; 2],
            freq: [1.0; 2],
            dir: [[1.0, 0.0], [0.0, 1.0]],
            phase: [0.0; 2],
        }
    }

    pub fn is_identity(&self) -> bool {
        self.affine == [[0.0; 2]; 2] && self.translate == [0.0; 2] && self.amp == [0.0; 2]
    }

    pub fn displacement(&self, u: [f64; 2]) -> [f64; 2] {
        let mut d = [0.0; 2];
        for c in 0..2 {
            let proj = self.dir[c][0] * u[0] + self.dir[c][1] * u[1];
            d[c] = self.affine[c][0] * u[0]
                + self.affine[c][1] * u[1]
                + self.translate[c]
                + self.amp[c] * (self.freq[c] * proj + self.phase[c]).sin();
        }
        d
    }

    /// g(u) = u + d(u).
    pub fn apply(&self, u: [f64; 2]) -> [f64; 2] {
        let d = self.displacement(u);
        [u[0] + d[0], u[1] + d[1]]
    }

    /// Solve g(u) = p by fixed-point iteration u ← p − d(u); the gradient
    /// bound makes this a contraction.
    pub fn invert(&self, p: [f64; 2]) -> [f64; 2] {
        let mut u = p;
        for _ in 0..12 {
            let d = self.displacement(u);
            u = [p[0] - d[0], p[1] - d[1]];
        }
        u
    }

    /// Warp targets g(u) at the cell centers of an h×w grid, one [x, y]
    /// row per cell in row-major order. Unclamped.
    pub fn grid(&self, h: usize, w: usize) -> Array2<f64> {
        let mut g = Array2::zeros((h * w, 2));
        for idx in 0..h * w {
            let t = self.apply(cell_coord(h, w, idx));
            g[[idx, 0]] = t[0];
            g[[idx, 1]] = t[1];
        }
        g
    }

    /// Resample a CHW image under the warp: output pixel p takes the value
    /// of the input at g⁻¹(p), bilinearly interpolated, zero outside.
    pub fn warp_image(&self, img: &Array3<f32>) -> Array3<f32> {
        let (c, h, w) = img.dim();
        let mut out = Array3::zeros((c, h, w));
        for oy in 0..h {
            for ox in 0..w {
                let p = [
                    2.0 * (ox as f64 + 0.5) / w as f64 - 1.0,
                    2.0 * (oy as f64 + 0.5) / h as f64 - 1.0,
                ];
                let u = self.invert(p);
                let sx = (u[0] + 1.0) * 0.5 * w as f64 - 0.5;
                let sy = (u[1] + 1.0) * 0.5 * h as f64 - 0.5;
                let x0 = sx.floor();
                let y0 = sy.floor();
                let fx = (sx - x0) as f32;
                let fy = (sy - y0) as f32;
                for ch in 0..c {
                    let at = |yy: f64, xx: f64| -> f32 {
                        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
                            0.0
                        } else {
                            img[[ch, yy as usize, xx as usize]]
                        }
                    };
                    let v00 = at(y0, x0);
                    let v01 = at(y0, x0 + 1.0);
                    let v10 = at(y0 + 1.0, x0);
                    let v11 = at(y0 + 1.0, x0 + 1.0);
                    let top = v00 * (1.0 - fx) + v01 * fx;
                    let bot = v10 * (1.0 - fx) + v11 * fx;
                    out[[ch, oy, ox]] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        out
    }

    /// Smallest finite-difference Jacobian determinant of g over a probe
    /// grid on the square. Positive everywhere means no fold-over.
    pub fn min_jacobian_det(&self) -> f64 {
        let probes = 9;
        let h = 1e-4;
        let mut min_det = f64::INFINITY;
        for iy in 0..probes {
            for ix in 0..probes {
                let x = -1.0 + 2.0 * ix as f64 / (probes - 1) as f64;
                let y = -1.0 + 2.0 * iy as f64 / (probes - 1) as f64;
                let gx1 = self.apply([x + h, y]);
                let gx0 = self.apply([x - h, y]);
                let gy1 = self.apply([x, y + h]);
                let gy0 = self.apply([x, y - h]);
                let j00 = (gx1[0] - gx0[0]) / (2.0 * h);
                let j10 = (gx1[1] - gx0[1]) / (2.0 * h);
                let j01 = (gy1[0] - gy0[0]) / (2.0 * h);
                let j11 = (gy1[1] - gy0[1]) / (2.0 * h);
                let det = j00 * j11 - j01 * j10;
                min_det = min_det.min(det);
            }
        }
        min_det
    }
}

/// Draw a random warp. `strength` in [0, 1] scales every component; 0 gives
/// the exact identity. Draws whose numeric Jacobian dips near zero are
/// rejected and redrawn at reduced strength, bounded, so the result is
/// always invertible and still deterministic in (seed, a, b).
pub fn sample_warp(seed: u64, a: u64, b: u64, strength: f64) -> WarpField {
    if strength == 0.0 {
        return WarpField::identity();
    }
    let mut rng = stream_rng(seed, Stream::Warp, a, b);
    let mut s = strength;
    for _ in 0..5 {
        for _ in 0..8 {
            let mut f = WarpField::identity();
            for c in 0..2 {
                for k in 0..2 {
                    f.affine[c][k] = rng.random_range(-0.08..0.08) * s;
                }
                f.translate[c] = rng.random_range(-0.1..0.1) * s;
                f.amp[c] = rng.random_range(0.03..0.09) * s;
                f.freq[c] = rng.random_range(1.0..2.5);
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                f.dir[c] = [angle.cos(), angle.sin()];
                f.phase[c] = rng.random_range(0.0..std::f64::consts::TAU);
            }
            if f.min_jacobian_det() > 0.05 {
                return f;
            }
        }
        s *= 0.5;
    }
    WarpField::identity()
}
