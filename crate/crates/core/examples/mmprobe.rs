// Scratch probe: descriptor hit rates on warped pairs for trained checkpoints.
use ndarray::Axis;
use rand::Rng;
use std::path::Path;
use wildreid_core::datacore::{load_manifest, load_rgb, Split};
use wildreid_core::losskit::sample_warp;
use wildreid_core::maskpipe::read_mask;
use wildreid_core::nettower::{load_checkpoint, Tower};
use wildreid_core::partviz::{correspondence_hit_rate, preprocess};
use wildreid_core::rng::{stream_rng, Stream};

fn hit_rate(tower: &Tower, manifest: &Path, seed: u64, radius: f64, strength: f64) -> f64 {
    let (man, _) = load_manifest(manifest, "probe", Split::Train).unwrap();
    let base = manifest.parent().unwrap();
    let mut hits = 0.0;
    let mut total = 0usize;
    for (idx, rec) in man.records.iter().enumerate() {
        if total >= 50 {
            break;
        }
        let img = load_rgb(&base.join(&rec.image_path)).unwrap();
        let mask = rec
            .mask_path
            .as_ref()
            .map(|m| read_mask(&base.join(m)).unwrap());
        let x = preprocess(&img, tower);
        let field = sample_warp(seed, 777, idx as u64, strength);
        let x3 = x.index_axis(Axis(0), 0).to_owned();
        let warped = field.warp_image(&x3).insert_axis(Axis(0));
        let src = tower.descriptor_eval(&x, false).unwrap();
        let tgt = tower.descriptor_eval(&warped, false).unwrap();
        let (_, _, gh, gw) = src.dim();
        let grid = field.grid(gh, gw);
        let mut cand: Vec<usize> = (0..gh * gw)
            .filter(|&u| {
                let (cx, cy) = (u % gw, u / gw);
                let fg = mask.as_ref().is_none_or(|m| {
                    let px = ((cx as f64 + 0.5) * m.width() as f64 / gw as f64) as usize;
                    let py = ((cy as f64 + 0.5) * m.height() as f64 / gh as f64) as usize;
                    m.get(py.min(m.height() - 1), px.min(m.width() - 1))
                });
                fg && grid[[u, 0]].abs() <= 0.95 && grid[[u, 1]].abs() <= 0.95
            })
            .collect();
        let mut rng = stream_rng(seed, Stream::Test, 99, idx as u64);
        let mut queries = Vec::new();
        for _ in 0..5.min(cand.len()) {
            let k = rng.random_range(0..cand.len());
            queries.push(cand.swap_remove(k));
        }
        if queries.is_empty() {
            continue;
        }
        let r = correspondence_hit_rate(&src, &tgt, &grid, &queries, radius);
        hits += r * queries.len() as f64;
        total += queries.len();
        if std::env::var("PROBE_DIST").is_ok() {
            use wildreid_core::partviz::match_descriptor_maps;
            for &u in &queries {
                let (best, _, _) = match_descriptor_maps(&src, (u % gw, u / gw), &tgt);
                let gx = (grid[[u, 0]] + 1.0) / 2.0 * gw as f64 - 0.5;
                let gy = (grid[[u, 1]] + 1.0) / 2.0 * gh as f64 - 0.5;
                let d = ((best.0 as f64 - gx).powi(2) + (best.1 as f64 - gy).powi(2)).sqrt();
                if d > radius {
                    println!(
                        "  miss img {idx} cell ({},{}) -> best ({},{}) target ({:.1},{:.1}) dist {:.1}",
                        u % gw,
                        u / gw,
                        best.0,
                        best.1,
                        gx,
                        gy,
                        d
                    );
                }
            }
        }
    }
    hits / total.max(1) as f64
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let manifest = Path::new(&args[1]);
    for ckpt in &args[2..] {
        let tower = if let Some(seed) = ckpt.strip_prefix("RANDOM:") {
            use wildreid_core::nettower::TowerConfig;
            Tower::new(TowerConfig::toy(16), seed.parse().unwrap()).unwrap()
        } else {
            load_checkpoint(Path::new(ckpt)).unwrap().0
        };
        for s in [1.0, 0.7, 0.5] {
            let r = hit_rate(&tower, manifest, 7, 2.0, s);
            println!("{ckpt} s={s}: hit rate {r:.3}");
        }
    }
}
