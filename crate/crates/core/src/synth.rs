//! Procedural toy dataset: uniquely textured elliptical "animals" on
//! varied backgrounds, with per-side textures, an orientation cue, exact
//! foreground masks, camera ids, and an optional identity-correlated
//! background mode for background-bias experiments. Everything an
//! end-to-end run needs, generated deterministically from one seed.
//!
//! Each flank of an animal gets its own independent texture (the two sides
//! of a real animal do not mirror), so (entity, side) is the retrieval
//! identity: train labels `e{N}/{side}`, test labels `t{N}/{side}` with no
//! entity overlap between splits.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::datacore::{save_manifest, DataError, DatasetManifest, Orientation, SampleRecord, Split};
use crate::maskpipe::{BinaryMask, MaskError};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("io on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("image write {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub out_dir: PathBuf,
    pub train_entities: u32,
    pub test_entities: u32,
    pub train_per_side: u32,
    pub test_per_side: u32,
    pub image_size: u32,
    pub cameras: u32,
    /// Backgrounds colored per identity: a shortcut a model can exploit
    /// unless backgrounds are masked away.
    pub biased_backgrounds: bool,
    /// Also write segmenter-style candidate masks (true + spurious) and a
    /// dilated reference mask per image, for the fusion pipeline.
    pub emit_fusion_inputs: bool,
    pub seed: u64,
}

impl SynthConfig {
    pub fn toy(out_dir: &Path, seed: u64) -> Self {
        Self {
            out_dir: out_dir.to_path_buf(),
            train_entities: 16,
            test_entities: 8,
            train_per_side: 6,
            test_per_side: 3,
            image_size: 64,
            cameras: 3,
            biased_backgrounds: false,
            emit_fusion_inputs: false,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutcome {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub images: usize,
}

#[derive(Clone, Copy)]
enum Pattern {
    Stripes { freq: f32, angle: f32, phase: f32 },
    Checker { scale: f32 },
    Spots { cell: f32, radius: f32 },
}

/// Per-(entity, side) appearance: three distinct colors plus a pattern
/// assigning them to local blob coordinates. A smooth shading field (radial
/// falloff plus a random linear ramp) breaks the pattern's translational
/// symmetry so that every blob location is locally distinguishable; without
/// it, repeats of a periodic pattern are pixel-identical and dense
/// correspondence on the blob interior is ill-posed.
#[derive(Clone, Copy)]
struct Texture {
    palette: [[u8; 3]; 3],
    pattern: Pattern,
    shade_dir: (f32, f32),
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [u8; 3] {
    let h = (h.fract() + 1.0).fract() * 6.0;
    let i = h.floor() as i32 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
}

const GOLDEN: f32 = 0.618_034;

impl Texture {
    fn draw(rng: &mut ChaCha8Rng, hue_index: u32) -> Self {
        // golden-ratio hue stepping keeps every identity's base hue apart
        let base = hue_index as f32 * GOLDEN + rng.random_range(0.0..0.05);
        let palette = [
            hsv_to_rgb(base, 0.9, 0.95),
            hsv_to_rgb(base + 0.33 + rng.random_range(0.0..0.1), 0.85, 0.8),
            hsv_to_rgb(base + 0.61 + rng.random_range(0.0..0.1), 0.8, 0.55),
        ];
        let pattern = match rng.random_range(0..3u32) {
            0 => Pattern::Stripes {
                freq: rng.random_range(6.0..14.0),
                angle: rng.random_range(0.0..std::f32::consts::PI),
                phase: rng.random_range(0.0..6.28),
            },
            1 => Pattern::Checker {
                scale: rng.random_range(0.25..0.55),
            },
            _ => Pattern::Spots {
                cell: rng.random_range(0.35..0.6),
                radius: rng.random_range(0.3..0.45),
            },
        };
        let theta = rng.random_range(0.0..std::f32::consts::TAU);
        Self {
            palette,
            pattern,
            shade_dir: (theta.cos(), theta.sin()),
        }
    }

    /// Color at scaled local blob coordinates (each axis roughly [-2.2, 2.2]
    /// as called from the renderer).
    fn color(&self, dx: f32, dy: f32) -> [u8; 3] {
        let idx = match self.pattern {
            Pattern::Stripes { freq, angle, phase } => {
                let t = (dx * angle.cos() + dy * angle.sin()) * freq + phase;
                let s = t.sin();
                if s > 0.3 {
                    0
                } else if s < -0.3 {
                    1
                } else {
                    2
                }
            }
            Pattern::Checker { scale } => {
                let cx = (dx / scale).floor() as i64;
                let cy = (dy / scale).floor() as i64;
                match (cx + cy).rem_euclid(3) {
                    0 => 0,
                    1 => 1,
                    _ => 2,
                }
            }
            Pattern::Spots { cell, radius } => {
                let fx = (dx / cell).floor();
                let fy = (dy / cell).floor();
                let lx = dx / cell - fx - 0.5;
                let ly = dy / cell - fy - 0.5;
                if (lx * lx + ly * ly).sqrt() < radius {
                    if ((fx + fy) as i64).rem_euclid(2) == 0 {
                        1
                    } else {
                        2
                    }
                } else {
                    0
                }
            }
        };
        let c = self.palette[idx];
        // radial falloff plus a linear ramp: the gradient vanishes at a single
        // point and the level sets are circles, so no translation of the
        // periodic pattern maps shaded colors onto themselves
        let (nx, ny) = (dx / 2.2, dy / 2.2);
        let m = (1.02 - 0.30 * (nx * nx + ny * ny)
            + 0.20 * (nx * self.shade_dir.0 + ny * self.shade_dir.1))
            .clamp(0.40, 1.15);
        [
            clamp_u8(c[0] as f32 * m),
            clamp_u8(c[1] as f32 * m),
            clamp_u8(c[2] as f32 * m),
        ]
    }
}

struct Blob {
    cx: f32,
    cy: f32,
    rx: f32,
    ry: f32,
}

impl Blob {
    fn contains(&self, x: f32, y: f32) -> bool {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }

    fn local(&self, x: f32, y: f32) -> (f32, f32) {
        ((x - self.cx) / self.rx, (y - self.cy) / self.ry)
    }
}

fn clamp_u8(v: f32) -> u8 {
    v.clamp(0.0, 255.0) as u8
}

struct RenderedSample {
    image: RgbImage,
    mask: BinaryMask,
}

#[allow(clippy::too_many_arguments)]
fn render_sample(
    size: u32,
    texture: &Texture,
    orientation: Orientation,
    biased: bool,
    entity_hue: f32,
    rng: &mut ChaCha8Rng,
) -> RenderedSample {
    let s = size as f32;
    let blob = Blob {
        cx: s * 0.5 + rng.random_range(-0.09..0.09) * s,
        cy: s * 0.5 + rng.random_range(-0.09..0.09) * s,
        rx: s * rng.random_range(0.30..0.36),
        ry: s * rng.random_range(0.21..0.27),
    };
    // background: either neutral clutter or a loud identity-correlated color
    let bg_base: [u8; 3] = if biased {
        hsv_to_rgb(entity_hue, 0.85, 0.9)
    } else {
        let v = rng.random_range(70.0..170.0);
        [
            clamp_u8(v + rng.random_range(-20.0..20.0)),
            clamp_u8(v + rng.random_range(-20.0..20.0)),
            clamp_u8(v + rng.random_range(-20.0..20.0)),
        ]
    };
    // clutter rectangles so backgrounds are not flat
    let n_rects = rng.random_range(2..5u32);
    let rects: Vec<(u32, u32, u32, u32, [u8; 3])> = (0..n_rects)
        .map(|_| {
            let w = rng.random_range(6..18u32);
            let h = rng.random_range(6..18u32);
            let x = rng.random_range(0..size.saturating_sub(w).max(1));
            let y = rng.random_range(0..size.saturating_sub(h).max(1));
            let shade = rng.random_range(-30.0..30.0);
            let color = [
                clamp_u8(bg_base[0] as f32 + shade),
                clamp_u8(bg_base[1] as f32 + shade),
                clamp_u8(bg_base[2] as f32 + shade),
            ];
            (x, y, w, h, color)
        })
        .collect();

    // orientation cue: a bright head marker at the leading end of the blob
    let marker_dx = match orientation {
        Orientation::Left => -0.72,
        Orientation::Right => 0.72,
    };

    let mut bits = Array2::zeros((size as usize, size as usize));
    let mut image = RgbImage::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
            let noise = rng.random_range(-7.0..7.0);
            let px = if blob.contains(fx, fy) {
                bits[[y as usize, x as usize]] = 1;
                let (dx, dy) = blob.local(fx, fy);
                let md = ((dx - marker_dx) * (dx - marker_dx) + dy * dy).sqrt();
                let c = if md < 0.22 {
                    [245, 245, 245]
                } else {
                    texture.color(dx * 2.2, dy * 2.2)
                };
                [
                    clamp_u8(c[0] as f32 + noise),
                    clamp_u8(c[1] as f32 + noise),
                    clamp_u8(c[2] as f32 + noise),
                ]
            } else {
                let mut c = bg_base;
                for &(rx_, ry_, rw, rh, rc) in &rects {
                    if x >= rx_ && x < rx_ + rw && y >= ry_ && y < ry_ + rh {
                        c = rc;
                    }
                }
                [
                    clamp_u8(c[0] as f32 + noise),
                    clamp_u8(c[1] as f32 + noise),
                    clamp_u8(c[2] as f32 + noise),
                ]
            };
            image.put_pixel(x, y, Rgb(px));
        }
    }
    RenderedSample {
        image,
        mask: BinaryMask::new(bits),
    }
}

fn ensure_dir(path: &Path) -> Result<(), SynthError> {
    std::fs::create_dir_all(path).map_err(|source| SynthError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn save_png(img: &RgbImage, path: &Path) -> Result<(), SynthError> {
    img.save(path).map_err(|source| SynthError::Image {
        path: path.display().to_string(),
        source,
    })
}

/// Spurious segmenter candidate: a rectangle off in a corner.
fn spurious_rect(size: u32, rng: &mut ChaCha8Rng) -> BinaryMask {
    let mut bits = Array2::zeros((size as usize, size as usize));
    let w = rng.random_range(10..18u32) as usize;
    let h = rng.random_range(8..14u32) as usize;
    let corner = rng.random_range(0..4u32);
    let (x0, y0) = match corner {
        0 => (1, 1),
        1 => (size as usize - w - 1, 1),
        2 => (1, size as usize - h - 1),
        _ => (size as usize - w - 1, size as usize - h - 1),
    };
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            bits[[y, x]] = 1;
        }
    }
    BinaryMask::new(bits)
}

/// Reference saliency stand-in: the true mask dilated a little.
fn dilate(mask: &BinaryMask, by: usize) -> BinaryMask {
    let (h, w) = (mask.height(), mask.width());
    let mut bits = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) {
                let y0 = y.saturating_sub(by);
                let x0 = x.saturating_sub(by);
                for yy in y0..(y + by + 1).min(h) {
                    for xx in x0..(x + by + 1).min(w) {
                        bits[[yy, xx]] = 1;
                    }
                }
            }
        }
    }
    BinaryMask::new(bits)
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthOutcome, SynthError> {
    let mut images = 0usize;
    let mut manifests = Vec::new();
    for (split, split_name, prefix, entities, per_side, entity_base) in [
        (
            Split::Train,
            "train",
            'e',
            cfg.train_entities,
            cfg.train_per_side,
            0u32,
        ),
        (
            Split::TestGallery,
            "test",
            't',
            cfg.test_entities,
            cfg.test_per_side,
            cfg.train_entities,
        ),
    ] {
        let img_dir = cfg.out_dir.join("images").join(split_name);
        let mask_dir = cfg.out_dir.join("masks").join(split_name);
        ensure_dir(&img_dir)?;
        ensure_dir(&mask_dir)?;
        let (cand_dir, ref_dir) = if cfg.emit_fusion_inputs {
            let c = cfg.out_dir.join("candidates").join(split_name);
            let r = cfg.out_dir.join("reference").join(split_name);
            ensure_dir(&c)?;
            ensure_dir(&r)?;
            (Some(c), Some(r))
        } else {
            (None, None)
        };

        let mut records = Vec::new();
        let mut labels = Vec::new();
        for e in 0..entities {
            let global = entity_base + e;
            let entity_hue = global as f32 * GOLDEN + 0.17;
            let entity_id = labels.len() as u32;
            labels.push(format!("{prefix}{e:02}"));
            for orientation in [Orientation::Left, Orientation::Right] {
                let side_code = orientation.as_index() as u64;
                let texture = {
                    let mut trng =
                        stream_rng(cfg.seed, Stream::Synth, global as u64 * 2 + side_code, 0);
                    // hue index spreads over (entity, side) so no two
                    // textures share a base hue
                    Texture::draw(&mut trng, global * 2 + side_code as u32)
                };
                for k in 0..per_side {
                    let mut rng = stream_rng(
                        cfg.seed,
                        Stream::Synth,
                        global as u64 * 2 + side_code,
                        1 + k as u64,
                    );
                    let sample = render_sample(
                        cfg.image_size,
                        &texture,
                        orientation,
                        cfg.biased_backgrounds,
                        entity_hue,
                        &mut rng,
                    );
                    let stem = format!("{prefix}{e:02}_{orientation}_{k}");
                    let img_rel = format!("images/{split_name}/{stem}.png");
                    let mask_rel = format!("masks/{split_name}/{stem}.png");
                    save_png(&sample.image, &cfg.out_dir.join(&img_rel))?;
                    sample.mask.write_png(&cfg.out_dir.join(&mask_rel))?;
                    if let (Some(cd), Some(rd)) = (&cand_dir, &ref_dir) {
                        sample.mask.write_png(&cd.join(format!("{stem}_c0.png")))?;
                        spurious_rect(cfg.image_size, &mut rng)
                            .write_png(&cd.join(format!("{stem}_c1.png")))?;
                        dilate(&sample.mask, 2).write_png(&rd.join(format!("{stem}.png")))?;
                    }
                    let camera = rng.random_range(0..cfg.cameras.max(1));
                    records.push(SampleRecord {
                        image_path: img_rel,
                        entity_id,
                        orientation,
                        camera_id: Some(camera),
                        mask_path: Some(mask_rel),
                    });
                    images += 1;
                }
            }
        }
        let manifest = DatasetManifest {
            name: format!("synth-{split_name}"),
            split,
            num_entities: labels.len() as u32,
            entity_labels: labels,
            records,
            base_dir: cfg.out_dir.clone(),
        };
        let csv_path = cfg.out_dir.join(format!("{split_name}.csv"));
        save_manifest(&manifest, &csv_path)?;
        manifests.push(csv_path);
    }
    let test_manifest = manifests.pop().expect("two splits");
    let train_manifest = manifests.pop().expect("two splits");
    Ok(SynthOutcome {
        train_manifest,
        test_manifest,
        images,
    })
}
