//! Qualitative correspondence tooling: query a pixel in one image, find
//! its best match in another by descriptor cosine similarity, and render
//! a three-panel figure with the match point and a similarity heatmap.

use std::path::Path;
use std::str::FromStr;

use image::RgbImage;
use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::nettower::{normalize_image, stack_batch, Tower, TowerError};

#[derive(Debug, thiserror::Error)]
pub enum VizError {
    #[error("query point ({x},{y}) outside source image {w}x{h}")]
    BadPoint { x: u32, y: u32, w: u32, h: u32 },
    #[error("unknown descriptor layer `{0}` (expected `dve` or `stage3-raw`)")]
    BadLayer(String),
    #[error(transparent)]
    Model(#[from] TowerError),
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("encoding {path}: {source}")]
    Encode {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DescriptorLayer {
    /// Normalized output of the dense-descriptor head.
    Dve,
    /// Raw backbone features at the quarter-resolution tap.
    Stage3Raw,
}

impl DescriptorLayer {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Dve => "dve",
            Self::Stage3Raw => "stage3-raw",
        }
    }
}

impl FromStr for DescriptorLayer {
    type Err = VizError;
    fn from_str(s: &str) -> Result<Self, VizError> {
        match s {
            "dve" => Ok(Self::Dve),
            "stage3-raw" => Ok(Self::Stage3Raw),
            other => Err(VizError::BadLayer(other.to_string())),
        }
    }
}

#[derive(Debug)]
pub struct MatchRequest<'a> {
    pub source: &'a RgbImage,
    pub target: &'a RgbImage,
    /// Query position in original source-image pixels.
    pub point: (u32, u32),
    pub layer: DescriptorLayer,
}

#[derive(Debug)]
pub struct MatchOutcome {
    pub layer: DescriptorLayer,
    /// Query cell on the source descriptor grid, (col, row).
    pub query_grid: (usize, usize),
    /// Best-matching cell on the target grid, (col, row).
    pub best_grid: (usize, usize),
    /// Best match mapped back to original target-image pixels.
    pub best_pixel: (f64, f64),
    pub best_similarity: f64,
    /// Cosine similarity per target cell, in [-1, 1].
    pub map: Array2<f32>,
    pub warnings: Vec<String>,
    /// Display copies at model resolution, for panel rendering.
    resized_source: RgbImage,
    resized_target: RgbImage,
    /// Query position in resized-source pixels.
    query_resized: (f32, f32),
}

/// Model-input tensor for one image: resize to the square input size, then
/// per-channel normalization.
pub fn preprocess(img: &RgbImage, tower: &Tower) -> Array4<f32> {
    let s = tower.config.input_size as u32;
    let resized = image::imageops::resize(img, s, s, image::imageops::FilterType::Triangle);
    stack_batch(&[normalize_image(
        &resized,
        tower.config.norm_mean,
        tower.config.norm_std,
    )])
}

/// FNV-1a over the tensor bytes; cross-model comparisons assert equal
/// hashes to guarantee identical preprocessing.
pub fn preprocess_hash(x: &Array4<f32>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in x.iter() {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Original-image pixel -> descriptor grid cell, rounding to the nearest
/// cell center and clamping to the grid.
fn pixel_to_cell(p: u32, orig: u32, input: usize, cells: usize) -> usize {
    let scaled = (p as f64 + 0.5) * input as f64 / orig as f64;
    let cell = (scaled * cells as f64 / input as f64 - 0.5).round();
    (cell.max(0.0) as usize).min(cells - 1)
}

/// Cell center -> original-image pixel coordinate.
fn cell_to_pixel(cell: usize, orig: u32, input: usize, cells: usize) -> f64 {
    let scaled = (cell as f64 + 0.5) * input as f64 / cells as f64;
    scaled * orig as f64 / input as f64
}

/// Cosine similarity between the source cell's descriptor and every target
/// cell. Returns the best (col, row) under first-index tie-breaking, the
/// full map, and the query descriptor norm.
pub fn match_descriptor_maps(
    src: &Array4<f32>,
    src_cell: (usize, usize),
    tgt: &Array4<f32>,
) -> ((usize, usize), Array2<f32>, f32) {
    let (_, c, _, _) = src.dim();
    let (_, _, th, tw) = tgt.dim();
    let (qx, qy) = src_cell;
    let mut q = vec![0f32; c];
    for ch in 0..c {
        q[ch] = src[[0, ch, qy, qx]];
    }
    let qnorm = q.iter().map(|v| v * v).sum::<f32>().sqrt();
    if qnorm > 0.0 {
        for v in &mut q {
            *v /= qnorm;
        }
    }
    let mut map = Array2::zeros((th, tw));
    let mut best = (0usize, 0usize);
    let mut best_sim = f32::NEG_INFINITY;
    for y in 0..th {
        for x in 0..tw {
            let mut dot = 0f32;
            let mut nrm = 0f32;
            for ch in 0..c {
                let t = tgt[[0, ch, y, x]];
                dot += q[ch] * t;
                nrm += t * t;
            }
            let nrm = nrm.sqrt();
            let sim = if qnorm > 0.0 && nrm > 0.0 {
                (dot / nrm).clamp(-1.0, 1.0)
            } else {
                0.0
            };
            map[[y, x]] = sim;
            // strict inequality keeps the first index on ties
            if sim > best_sim {
                best_sim = sim;
                best = (x, y);
            }
        }
    }
    (best, map, qnorm)
}

pub fn match_point(tower: &Tower, req: &MatchRequest) -> Result<MatchOutcome, VizError> {
    let (px, py) = req.point;
    let (sw, sh) = req.source.dimensions();
    if px >= sw || py >= sh {
        return Err(VizError::BadPoint {
            x: px,
            y: py,
            w: sw,
            h: sh,
        });
    }
    let x_src = preprocess(req.source, tower);
    let x_tgt = preprocess(req.target, tower);
    let raw = req.layer == DescriptorLayer::Stage3Raw;
    let d_src = tower.descriptor_eval(&x_src, raw)?;
    let d_tgt = tower.descriptor_eval(&x_tgt, raw)?;
    let (_, _, gh, gw) = d_src.dim();
    let input = tower.config.input_size;
    let qx = pixel_to_cell(px, sw, input, gw);
    let qy = pixel_to_cell(py, sh, input, gh);

    let (best, map, qnorm) = match_descriptor_maps(&d_src, (qx, qy), &d_tgt);
    let mut warnings = Vec::new();
    if qnorm < 1e-6 {
        warnings.push(format!(
            "query descriptor at cell ({qx},{qy}) has near-zero norm (masked region?); similarities are all zero"
        ));
    }
    let (tw_orig, th_orig) = req.target.dimensions();
    let s = input as u32;
    Ok(MatchOutcome {
        layer: req.layer,
        query_grid: (qx, qy),
        best_grid: best,
        best_pixel: (
            cell_to_pixel(best.0, tw_orig, input, gw),
            cell_to_pixel(best.1, th_orig, input, gh),
        ),
        best_similarity: map[[best.1, best.0]] as f64,
        map,
        warnings,
        resized_source: image::imageops::resize(
            req.source,
            s,
            s,
            image::imageops::FilterType::Triangle,
        ),
        resized_target: image::imageops::resize(
            req.target,
            s,
            s,
            image::imageops::FilterType::Triangle,
        ),
        query_resized: (
            (px as f32 + 0.5) * s as f32 / sw as f32,
            (py as f32 + 0.5) * s as f32 / sh as f32,
        ),
    })
}

/// Bilinear upsampling with edge clamping (half-pixel centers).
pub fn upsample_bilinear(map: &Array2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = map.dim();
    let mut out = Array2::zeros((out_h, out_w));
    for oy in 0..out_h {
        let sy = ((oy as f32 + 0.5) * h as f32 / out_h as f32 - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f32;
        for ox in 0..out_w {
            let sx =
                ((ox as f32 + 0.5) * w as f32 / out_w as f32 - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f32;
            let top = map[[y0, x0]] * (1.0 - fx) + map[[y0, x1]] * fx;
            let bot = map[[y1, x0]] * (1.0 - fx) + map[[y1, x1]] * fx;
            out[[oy, ox]] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// Diverging colormap anchored to cosine range [-1, 1]: blue through white
/// to red. Fixed anchoring keeps heatmaps comparable across models.
pub fn similarity_color(v: f32) -> [u8; 3] {
    let t = ((v.clamp(-1.0, 1.0) + 1.0) / 2.0).clamp(0.0, 1.0);
    let (a, b, frac) = if t < 0.5 {
        ([59.0f32, 76.0, 192.0], [255.0f32, 255.0, 255.0], t * 2.0)
    } else {
        ([255.0f32, 255.0, 255.0], [180.0f32, 4.0, 38.0], (t - 0.5) * 2.0)
    };
    let mut rgb = [0u8; 3];
    for ch in 0..3 {
        rgb[ch] = (a[ch] + (b[ch] - a[ch]) * frac).round() as u8;
    }
    rgb
}

const MARGIN: u32 = 4;
const DOT_RADIUS: i64 = 3;
const QUERY_COLOR: [u8; 3] = [0, 220, 0];
const MATCH_COLOR: [u8; 3] = [255, 30, 30];

fn draw_dot(img: &mut RgbImage, cx: f32, cy: f32, color: [u8; 3]) {
    let (w, h) = img.dimensions();
    let (cxi, cyi) = (cx.round() as i64, cy.round() as i64);
    for dy in -DOT_RADIUS..=DOT_RADIUS {
        for dx in -DOT_RADIUS..=DOT_RADIUS {
            if dx * dx + dy * dy > DOT_RADIUS * DOT_RADIUS {
                continue;
            }
            let (x, y) = (cxi + dx, cyi + dy);
            if x >= 0 && y >= 0 && (x as u32) < w && (y as u32) < h {
                img.put_pixel(x as u32, y as u32, image::Rgb(color));
            }
        }
    }
}

/// Three panels at model resolution: source with the query dot, target
/// with the match dot, target under the similarity heatmap. Byte-identical
/// output for identical inputs.
pub fn render_panel(outcome: &MatchOutcome, out_path: &Path) -> Result<(), VizError> {
    let s = outcome.resized_source.width();
    let width = 3 * s + 4 * MARGIN;
    let height = s + 2 * MARGIN;
    let mut canvas = RgbImage::from_pixel(width, height, image::Rgb([40, 40, 40]));

    let mut src_panel = outcome.resized_source.clone();
    draw_dot(
        &mut src_panel,
        outcome.query_resized.0,
        outcome.query_resized.1,
        QUERY_COLOR,
    );

    let (gh, gw) = outcome.map.dim();
    let mut match_panel = outcome.resized_target.clone();
    let bx = (outcome.best_grid.0 as f32 + 0.5) * s as f32 / gw as f32;
    let by = (outcome.best_grid.1 as f32 + 0.5) * s as f32 / gh as f32;
    draw_dot(&mut match_panel, bx, by, MATCH_COLOR);

    let up = upsample_bilinear(&outcome.map, s as usize, s as usize);
    let mut heat_panel = outcome.resized_target.clone();
    for y in 0..s {
        for x in 0..s {
            let base = heat_panel.get_pixel(x, y).0;
            let color = similarity_color(up[[y as usize, x as usize]]);
            let mut px = [0u8; 3];
            for ch in 0..3 {
                px[ch] =
                    (0.55 * color[ch] as f32 + 0.45 * base[ch] as f32).round() as u8;
            }
            heat_panel.put_pixel(x, y, image::Rgb(px));
        }
    }

    for (i, panel) in [&src_panel, &match_panel, &heat_panel].into_iter().enumerate() {
        let x0 = MARGIN + i as u32 * (s + MARGIN);
        image::imageops::overlay(&mut canvas, panel, x0 as i64, MARGIN as i64);
    }
    canvas.save(out_path).map_err(|source| VizError::Encode {
        path: out_path.display().to_string(),
        source,
    })
}

/// Fraction of query cells whose best match lands within `radius_cells` of
/// the ground-truth warp target. `warp_grid` rows are g(u) in normalized
/// [-1, 1] coordinates over the target grid, one row per source cell.
pub fn correspondence_hit_rate(
    src_desc: &Array4<f32>,
    tgt_desc: &Array4<f32>,
    warp_grid: &Array2<f64>,
    queries: &[usize],
    radius_cells: f64,
) -> f64 {
    let (_, _, gh, gw) = src_desc.dim();
    let mut hits = 0usize;
    for &u in queries {
        let (qx, qy) = (u % gw, u / gw);
        let (best, _, _) = match_descriptor_maps(src_desc, (qx, qy), tgt_desc);
        // invert cell_coord: col = (x+1)/2·w − 0.5
        let gx = (warp_grid[[u, 0]] + 1.0) / 2.0 * gw as f64 - 0.5;
        let gy = (warp_grid[[u, 1]] + 1.0) / 2.0 * gh as f64 - 0.5;
        let dx = best.0 as f64 - gx;
        let dy = best.1 as f64 - gy;
        if (dx * dx + dy * dy).sqrt() <= radius_cells {
            hits += 1;
        }
    }
    hits as f64 / queries.len().max(1) as f64
}
