//! The re-ID model: a five-stage convolutional backbone with two taps (a
//! mid-level map at 1/4 input resolution feeding the dense-descriptor head,
//! and the final map at 1/8 feeding the re-ID head), plus checkpointing.
//!
//! Two backbones satisfy the same shape contract: a squeeze-excitation
//! residual network (50-layer layout, strides adapted so the mid tap stays
//! at 1/4 and the final map at 1/8), and a small four-stage net for CPU
//! training and tests. Forward passes return caches by value; backward
//! consumes them, so overlapping passes through shared weights never
//! interfere.

use std::io::{Read as IoRead, Write as IoWrite};
use std::path::Path;

use image::RgbImage;
use ndarray::{Array2, Array3, Array4};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{
    self, BatchNorm1d, BatchNorm1dCache, BatchNorm2d, BatchNorm2dCache, Conv2d, Conv2dCache,
    Dropout, DropoutCache, Linear, LinearCache, MaxPool2d, MaxPool2dCache, Param, ParamGroup,
    SeBlock, SeBlockCache, Visit,
};
use crate::rng::{stream_rng, Stream};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"WRID";
pub const CHECKPOINT_VERSION: u32 = 1;
const DVE_NORM_EPS: f32 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum TowerError {
    #[error("input is {got_h}x{got_w}, model expects {expect}x{expect}")]
    BadInputSize {
        expect: usize,
        got_h: usize,
        got_w: usize,
    },
    #[error("input size {0} is not divisible by 8")]
    NotDivisibleBy8(usize),
    #[error("checkpoint {path}: {reason}")]
    BadCheckpoint { path: String, reason: String },
    #[error("io on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    Toy,
    Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TowerConfig {
    pub backbone: BackboneKind,
    pub input_size: usize,
    pub embed_dim: usize,
    pub num_identities: usize,
    pub dve_dim: usize,
    pub dropout: f64,
    pub norm_mean: [f32; 3],
    pub norm_std: [f32; 3],
}

impl TowerConfig {
    pub fn toy(num_identities: usize) -> Self {
        Self {
            backbone: BackboneKind::Toy,
            input_size: 64,
            embed_dim: 128,
            num_identities,
            dve_dim: 64,
            dropout: 0.5,
            norm_mean: [0.5; 3],
            norm_std: [0.5; 3],
        }
    }

    pub fn reference(num_identities: usize) -> Self {
        Self {
            backbone: BackboneKind::Reference,
            input_size: 224,
            embed_dim: 512,
            num_identities,
            dve_dim: 64,
            dropout: 0.5,
            norm_mean: [0.485, 0.456, 0.406],
            norm_std: [0.229, 0.224, 0.225],
        }
    }

    pub fn validate(&self) -> Result<(), TowerError> {
        if self.input_size % 8 != 0 {
            return Err(TowerError::NotDivisibleBy8(self.input_size));
        }
        Ok(())
    }
}

/// Convert an RGB image to a normalized CHW tensor.
pub fn normalize_image(img: &RgbImage, mean: [f32; 3], std: [f32; 3]) -> Array3<f32> {
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = (px.0[c] as f32 / 255.0 - mean[c]) / std[c];
        }
    }
    out
}

/// Stack CHW tensors into an NCHW batch.
pub fn stack_batch(images: &[Array3<f32>]) -> Array4<f32> {
    assert!(!images.is_empty(), "empty batch");
    let (c, h, w) = images[0].dim();
    let mut out = Array4::zeros((images.len(), c, h, w));
    for (i, img) in images.iter().enumerate() {
        assert_eq!(img.dim(), (c, h, w), "ragged batch");
        out.index_axis_mut(ndarray::Axis(0), i).assign(img);
    }
    out
}

/// Conv → batch norm → ReLU, the toy backbone's stage.
#[derive(Debug, Clone)]
struct ConvBnRelu {
    conv: Conv2d,
    bn: BatchNorm2d,
}

struct ConvBnReluCache {
    conv: Conv2dCache,
    bn: BatchNorm2dCache,
    out: Array4<f32>,
}

impl ConvBnRelu {
    #[allow(clippy::too_many_arguments)]
    fn new(
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        group: ParamGroup,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            conv: Conv2d::new(
                &format!("{name}.conv"),
                in_c,
                out_c,
                kernel,
                stride,
                padding,
                false,
                group,
                rng,
            ),
            bn: BatchNorm2d::new(&format!("{name}.bn"), out_c, group),
        }
    }

    fn forward_train(&mut self, x: &Array4<f32>) -> (Array4<f32>, ConvBnReluCache) {
        let (c, conv_cache) = self.conv.forward(x);
        let (b, bn_cache) = self.bn.forward_train(&c);
        let out = nn::relu4(&b);
        (
            out.clone(),
            ConvBnReluCache {
                conv: conv_cache,
                bn: bn_cache,
                out,
            },
        )
    }

    fn forward_eval(&self, x: &Array4<f32>) -> Array4<f32> {
        let (c, _) = self.conv.forward(x);
        nn::relu4(&self.bn.forward_eval(&c))
    }

    fn backward(&mut self, cache: &ConvBnReluCache, dy: &Array4<f32>) -> Array4<f32> {
        let d = nn::relu4_backward(&cache.out, dy);
        let d = self.bn.backward(&cache.bn, &d);
        self.conv.backward(&cache.conv, &d)
    }
}

impl Visit for ConvBnRelu {
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv.visit(f);
        self.bn.visit(f);
    }
}

/// Four conv stages; stage two stacks a strided conv and a stride-1 conv so
/// the 1/4 mid tap sees a 15-pixel receptive field (one strided conv alone
/// leaves 7 pixels, too little context for part matching). The fourth stage
/// (stride 1) is the 1/8 final map. About 160k parameters.
#[derive(Debug, Clone)]
pub struct ToyBackbone {
    s1: ConvBnRelu,
    s2: ConvBnRelu,
    s2b: ConvBnRelu,
    s3: ConvBnRelu,
    s4: ConvBnRelu,
}

pub struct ToyCache {
    c1: ConvBnReluCache,
    c2: ConvBnReluCache,
    c2b: ConvBnReluCache,
    c3: ConvBnReluCache,
    c4: ConvBnReluCache,
}

impl ToyBackbone {
    pub fn new(rng: &mut ChaCha8Rng) -> Self {
        let g = ParamGroup::Backbone;
        Self {
            s1: ConvBnRelu::new("backbone.s1", 3, 24, 3, 2, 1, g, rng),
            s2: ConvBnRelu::new("backbone.s2", 24, 48, 3, 2, 1, g, rng),
            s2b: ConvBnRelu::new("backbone.s2b", 48, 48, 3, 1, 1, g, rng),
            s3: ConvBnRelu::new("backbone.s3", 48, 96, 3, 2, 1, g, rng),
            s4: ConvBnRelu::new("backbone.s4", 96, 96, 3, 1, 1, g, rng),
        }
    }

    pub const MID_CHANNELS: usize = 48;
    pub const FINAL_CHANNELS: usize = 96;

    fn forward_train(&mut self, x: &Array4<f32>) -> (Array4<f32>, Array4<f32>, ToyCache) {
        let (y1, c1) = self.s1.forward_train(x);
        let (y2, c2) = self.s2.forward_train(&y1);
        let (mid, c2b) = self.s2b.forward_train(&y2);
        let (y3, c3) = self.s3.forward_train(&mid);
        let (fin, c4) = self.s4.forward_train(&y3);
        (mid, fin, ToyCache { c1, c2, c2b, c3, c4 })
    }

    fn forward_eval(&self, x: &Array4<f32>) -> (Array4<f32>, Array4<f32>) {
        let y1 = self.s1.forward_eval(x);
        let y2 = self.s2.forward_eval(&y1);
        let mid = self.s2b.forward_eval(&y2);
        let y3 = self.s3.forward_eval(&mid);
        let fin = self.s4.forward_eval(&y3);
        (mid, fin)
    }

    fn backward(&mut self, cache: &ToyCache, d_mid: &Array4<f32>, d_final: &Array4<f32>) {
        let d3 = self.s4.backward(&cache.c4, d_final);
        let mut d2b = self.s3.backward(&cache.c3, &d3);
        d2b += d_mid;
        let d2 = self.s2b.backward(&cache.c2b, &d2b);
        let d1 = self.s2.backward(&cache.c2, &d2);
        self.s1.backward(&cache.c1, &d1);
    }
}

impl Visit for ToyBackbone {
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.s1.visit(f);
        self.s2.visit(f);
        self.s2b.visit(f);
        self.s3.visit(f);
        self.s4.visit(f);
    }
}

/// Squeeze-excitation bottleneck: 1×1 reduce → 3×3 (carries the stride) →
/// 1×1 expand → SE → residual add → ReLU.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    conv3: Conv2d,
    bn3: BatchNorm2d,
    se: SeBlock,
    down: Option<(Conv2d, BatchNorm2d)>,
}

pub struct BottleneckCache {
    c1: Conv2dCache,
    b1: BatchNorm2dCache,
    h1: Array4<f32>,
    c2: Conv2dCache,
    b2: BatchNorm2dCache,
    h2: Array4<f32>,
    c3: Conv2dCache,
    b3: BatchNorm2dCache,
    se: SeBlockCache,
    down: Option<(Conv2dCache, BatchNorm2dCache)>,
    out: Array4<f32>,
}

impl Bottleneck {
    fn new(
        name: &str,
        in_c: usize,
        mid_c: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let g = ParamGroup::Backbone;
        let out_c = mid_c * 4;
        let down = (stride != 1 || in_c != out_c).then(|| {
            (
                Conv2d::new(
                    &format!("{name}.down.conv"),
                    in_c,
                    out_c,
                    1,
                    stride,
                    0,
                    false,
                    g,
                    rng,
                ),
                BatchNorm2d::new(&format!("{name}.down.bn"), out_c, g),
            )
        });
        Self {
            conv1: Conv2d::new(&format!("{name}.conv1"), in_c, mid_c, 1, 1, 0, false, g, rng),
            bn1: BatchNorm2d::new(&format!("{name}.bn1"), mid_c, g),
            conv2: Conv2d::new(
                &format!("{name}.conv2"),
                mid_c,
                mid_c,
                3,
                stride,
                1,
                false,
                g,
                rng,
            ),
            bn2: BatchNorm2d::new(&format!("{name}.bn2"), mid_c, g),
            conv3: Conv2d::new(&format!("{name}.conv3"), mid_c, out_c, 1, 1, 0, false, g, rng),
            bn3: BatchNorm2d::new(&format!("{name}.bn3"), out_c, g),
            se: SeBlock::new(&format!("{name}.se"), out_c, 16, g, rng),
            down,
        }
    }

    fn forward_train(&mut self, x: &Array4<f32>) -> (Array4<f32>, BottleneckCache) {
        let (y, c1) = self.conv1.forward(x);
        let (y, b1) = self.bn1.forward_train(&y);
        let h1 = nn::relu4(&y);
        let (y, c2) = self.conv2.forward(&h1);
        let (y, b2) = self.bn2.forward_train(&y);
        let h2 = nn::relu4(&y);
        let (y, c3) = self.conv3.forward(&h2);
        let (y, b3) = self.bn3.forward_train(&y);
        let (scaled, se) = self.se.forward(&y);
        let (skip, down) = match &mut self.down {
            Some((dc, db)) => {
                let (s, dcc) = dc.forward(x);
                let (s, dbc) = db.forward_train(&s);
                (s, Some((dcc, dbc)))
            }
            None => (x.clone(), None),
        };
        let out = nn::relu4(&(&scaled + &skip));
        (
            out.clone(),
            BottleneckCache {
                c1,
                b1,
                h1,
                c2,
                b2,
                h2,
                c3,
                b3,
                se,
                down,
                out,
            },
        )
    }

    fn forward_eval(&self, x: &Array4<f32>) -> Array4<f32> {
        let (y, _) = self.conv1.forward(x);
        let h1 = nn::relu4(&self.bn1.forward_eval(&y));
        let (y, _) = self.conv2.forward(&h1);
        let h2 = nn::relu4(&self.bn2.forward_eval(&y));
        let (y, _) = self.conv3.forward(&h2);
        let y = self.bn3.forward_eval(&y);
        let (scaled, _) = self.se.forward(&y);
        let skip = match &self.down {
            Some((dc, db)) => {
                let (s, _) = dc.forward(x);
                db.forward_eval(&s)
            }
            None => x.clone(),
        };
        nn::relu4(&(&scaled + &skip))
    }

    fn backward(&mut self, cache: &BottleneckCache, dy: &Array4<f32>) -> Array4<f32> {
        let dsum = nn::relu4_backward(&cache.out, dy);
        let d = self.se.backward(&cache.se, &dsum);
        let d = self.bn3.backward(&cache.b3, &d);
        let d = self.conv3.backward(&cache.c3, &d);
        let d = nn::relu4_backward(&cache.h2, &d);
        let d = self.bn2.backward(&cache.b2, &d);
        let d = self.conv2.backward(&cache.c2, &d);
        let d = nn::relu4_backward(&cache.h1, &d);
        let d = self.bn1.backward(&cache.b1, &d);
        let mut dx = self.conv1.backward(&cache.c1, &d);
        match (&mut self.down, &cache.down) {
            (Some((dc, db)), Some((dcc, dbc))) => {
                let ds = db.backward(dbc, &dsum);
                dx += &dc.backward(dcc, &ds);
            }
            (None, None) => dx += &dsum,
            _ => unreachable!("cache shape matches module shape"),
        }
        dx
    }
}

impl Visit for Bottleneck {
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv1.visit(f);
        self.bn1.visit(f);
        self.conv2.visit(f);
        self.bn2.visit(f);
        self.conv3.visit(f);
        self.bn3.visit(f);
        self.se.visit(f);
        if let Some((dc, db)) = &mut self.down {
            dc.visit(f);
            db.visit(f);
        }
    }
}

/// 50-layer squeeze-excitation residual backbone with the strides adapted
/// to the tap contract: stem downscales by 4, the second residual stage
/// keeps 1/4 (mid tap, 512 channels), the third halves to 1/8, the fourth
/// holds 1/8 (final map, 2048 channels).
#[derive(Debug, Clone)]
pub struct SeResNet50 {
    stem: ConvBnRelu,
    pool: MaxPool2d,
    layers: Vec<Vec<Bottleneck>>,
}

pub struct SeResNet50Cache {
    stem: ConvBnReluCache,
    pool: MaxPool2dCache,
    blocks: Vec<Vec<BottleneckCache>>,
}

impl SeResNet50 {
    pub fn new(rng: &mut ChaCha8Rng) -> Self {
        let stem = ConvBnRelu::new("backbone.stem", 3, 64, 7, 2, 3, ParamGroup::Backbone, rng);
        let pool = MaxPool2d {
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        // (mid channels, blocks, stride of first block)
        let plan = [(64, 3, 1), (128, 4, 1), (256, 6, 2), (512, 3, 1)];
        let mut layers = Vec::new();
        let mut in_c = 64;
        for (li, &(mid, blocks, stride)) in plan.iter().enumerate() {
            let mut layer = Vec::new();
            for b in 0..blocks {
                let s = if b == 0 { stride } else { 1 };
                layer.push(Bottleneck::new(
                    &format!("backbone.layer{}.{}", li + 1, b),
                    in_c,
                    mid,
                    s,
                    rng,
                ));
                in_c = mid * 4;
            }
            layers.push(layer);
        }
        Self { stem, pool, layers }
    }

    pub const MID_CHANNELS: usize = 512;
    pub const FINAL_CHANNELS: usize = 2048;

    fn forward_train(&mut self, x: &Array4<f32>) -> (Array4<f32>, Array4<f32>, SeResNet50Cache) {
        let (y, stem_cache) = self.stem.forward_train(x);
        let (mut y, pool_cache) = self.pool.forward(&y);
        let mut blocks = Vec::new();
        let mut mid = None;
        for (li, layer) in self.layers.iter_mut().enumerate() {
            let mut layer_caches = Vec::new();
            for block in layer.iter_mut() {
                let (out, c) = block.forward_train(&y);
                y = out;
                layer_caches.push(c);
            }
            blocks.push(layer_caches);
            if li == 1 {
                mid = Some(y.clone());
            }
        }
        (
            mid.expect("four layers"),
            y,
            SeResNet50Cache {
                stem: stem_cache,
                pool: pool_cache,
                blocks,
            },
        )
    }

    fn forward_eval(&self, x: &Array4<f32>) -> (Array4<f32>, Array4<f32>) {
        let y = self.stem.forward_eval(x);
        let (mut y, _) = self.pool.forward(&y);
        let mut mid = None;
        for (li, layer) in self.layers.iter().enumerate() {
            for block in layer {
                y = block.forward_eval(&y);
            }
            if li == 1 {
                mid = Some(y.clone());
            }
        }
        (mid.expect("four layers"), y)
    }

    fn backward(&mut self, cache: &SeResNet50Cache, d_mid: &Array4<f32>, d_final: &Array4<f32>) {
        let mut d = d_final.clone();
        for li in (0..self.layers.len()).rev() {
            for (block, bc) in self.layers[li]
                .iter_mut()
                .zip(cache.blocks[li].iter())
                .rev()
            {
                d = block.backward(bc, &d);
            }
            if li == 2 {
                // gradient flowing out of layer3's input is at the mid tap
                d += d_mid;
            }
        }
        let d = self.pool.backward(&cache.pool, &d);
        self.stem.backward(&cache.stem, &d);
    }
}

impl Visit for SeResNet50 {
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.stem.visit(f);
        for layer in &mut self.layers {
            for block in layer {
                block.visit(f);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum BackboneNet {
    Toy(ToyBackbone),
    Reference(SeResNet50),
}

pub enum BackboneCache {
    Toy(ToyCache),
    Reference(SeResNet50Cache),
}

impl BackboneNet {
    fn forward_train(&mut self, x: &Array4<f32>) -> (Array4<f32>, Array4<f32>, BackboneCache) {
        match self {
            Self::Toy(b) => {
                let (m, f, c) = b.forward_train(x);
                (m, f, BackboneCache::Toy(c))
            }
            Self::Reference(b) => {
                let (m, f, c) = b.forward_train(x);
                (m, f, BackboneCache::Reference(c))
            }
        }
    }

    fn forward_eval(&self, x: &Array4<f32>) -> (Array4<f32>, Array4<f32>) {
        match self {
            Self::Toy(b) => b.forward_eval(x),
            Self::Reference(b) => b.forward_eval(x),
        }
    }

    fn backward(&mut self, cache: &BackboneCache, d_mid: &Array4<f32>, d_final: &Array4<f32>) {
        match (self, cache) {
            (Self::Toy(b), BackboneCache::Toy(c)) => b.backward(c, d_mid, d_final),
            (Self::Reference(b), BackboneCache::Reference(c)) => b.backward(c, d_mid, d_final),
            _ => unreachable!("cache built by this backbone"),
        }
    }

    pub fn mid_channels(&self) -> usize {
        match self {
            Self::Toy(_) => ToyBackbone::MID_CHANNELS,
            Self::Reference(_) => SeResNet50::MID_CHANNELS,
        }
    }

    pub fn final_channels(&self) -> usize {
        match self {
            Self::Toy(_) => ToyBackbone::FINAL_CHANNELS,
            Self::Reference(_) => SeResNet50::FINAL_CHANNELS,
        }
    }
}

impl Visit for BackboneNet {
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match self {
            Self::Toy(b) => b.visit(f),
            Self::Reference(b) => b.visit(f),
        }
    }
}

/// One 3×3 convolution from the mid tap to the descriptor dimension, with
/// per-pixel unit normalization. Normalization lives here so the loss and
/// the visualizer consume identical descriptors.
#[derive(Debug, Clone)]
pub struct DveHead {
    conv: Conv2d,
}

pub struct DveHeadCache {
    conv: Conv2dCache,
    raw: Array4<f32>,
}

impl DveHead {
    fn new(mid_channels: usize, dve_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv: Conv2d::new(
                "dve.conv",
                mid_channels,
                dve_dim,
                3,
                1,
                1,
                true,
                ParamGroup::Head,
                rng,
            ),
        }
    }

    fn forward(&self, mid: &Array4<f32>) -> (Array4<f32>, DveHeadCache) {
        let (raw, conv) = self.conv.forward(mid);
        let normed = nn::l2_normalize_pixels(&raw, DVE_NORM_EPS);
        (normed, DveHeadCache { conv, raw })
    }

    fn backward(&mut self, cache: &DveHeadCache, d_normed: &Array4<f32>) -> Array4<f32> {
        let d_raw = nn::l2_normalize_pixels_backward(&cache.raw, d_normed, DVE_NORM_EPS);
        self.conv.backward(&cache.conv, &d_raw)
    }
}

impl Visit for DveHead {
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv.visit(f);
    }
}

/// GAP → linear projection → batch norm → dropout, then identity and
/// orientation classifiers on the dropped-out vector. Ranking uses the
/// post-norm, pre-dropout vector.
#[derive(Debug, Clone)]
pub struct ReIdHead {
    fc: Linear,
    bn: BatchNorm1d,
    dropout: Dropout,
    id_fc: Linear,
    lr_fc: Linear,
}

pub struct ReIdHeadCache {
    final_dim: (usize, usize, usize, usize),
    fc: LinearCache,
    bn: BatchNorm1dCache,
    dropout: DropoutCache,
    id_fc: LinearCache,
    lr_fc: LinearCache,
}

impl ReIdHead {
    fn new(
        final_channels: usize,
        embed_dim: usize,
        num_identities: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let g = ParamGroup::Head;
        Self {
            fc: Linear::new("head.fc", final_channels, embed_dim, true, g, rng),
            bn: BatchNorm1d::new("head.bn", embed_dim, g),
            dropout: Dropout { p: dropout },
            id_fc: Linear::new("head.id_fc", embed_dim, num_identities, true, g, rng),
            lr_fc: Linear::new("head.lr_fc", embed_dim, 1, true, g, rng),
        }
    }
}

impl Visit for ReIdHead {
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.fc.visit(f);
        self.bn.visit(f);
        self.id_fc.visit(f);
        self.lr_fc.visit(f);
    }
}

/// Training-mode forward outputs (all f32; losses convert at their boundary).
pub struct TrainOutputs {
    /// Re-ID vectors after dropout, (N, d): the circle-loss embeddings.
    pub f: Array2<f32>,
    pub id_logits: Array2<f32>,
    pub lr_logits: Vec<f32>,
    /// Unit-normalized descriptor maps, (N, d_dve, H/4, W/4).
    pub dve: Array4<f32>,
}

/// Gradients flowing back into the tower, matching `TrainOutputs` fields.
pub struct TowerGrads {
    pub d_f: Array2<f32>,
    pub d_id_logits: Array2<f32>,
    pub d_lr_logits: Vec<f32>,
    pub d_dve: Option<Array4<f32>>,
}

pub struct TowerCache {
    backbone: BackboneCache,
    dve: DveHeadCache,
    mid_dim: (usize, usize, usize, usize),
    head: ReIdHeadCache,
}

pub struct Tower {
    pub config: TowerConfig,
    backbone: BackboneNet,
    dve: DveHead,
    head: ReIdHead,
    frozen: bool,
}

impl Tower {
    pub fn new(config: TowerConfig, seed: u64) -> Result<Self, TowerError> {
        config.validate()?;
        let mut rng = stream_rng(seed, Stream::Init, 0, 0);
        let backbone = match config.backbone {
            BackboneKind::Toy => BackboneNet::Toy(ToyBackbone::new(&mut rng)),
            BackboneKind::Reference => BackboneNet::Reference(SeResNet50::new(&mut rng)),
        };
        let dve = DveHead::new(backbone.mid_channels(), config.dve_dim, &mut rng);
        let head = ReIdHead::new(
            backbone.final_channels(),
            config.embed_dim,
            config.num_identities,
            config.dropout,
            &mut rng,
        );
        Ok(Self {
            config,
            backbone,
            dve,
            head,
            frozen: false,
        })
    }

    fn check_input(&self, x: &Array4<f32>) -> Result<(), TowerError> {
        let (_, c, h, w) = x.dim();
        assert_eq!(c, 3, "expected RGB input");
        if h != self.config.input_size || w != self.config.input_size {
            return Err(TowerError::BadInputSize {
                expect: self.config.input_size,
                got_h: h,
                got_w: w,
            });
        }
        Ok(())
    }

    /// When frozen, backbone parameters receive neither gradients nor
    /// optimizer updates; the descriptor and re-ID heads keep training.
    pub fn freeze_backbone(&mut self, flag: bool) {
        self.frozen = flag;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn forward_train(
        &mut self,
        x: &Array4<f32>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(TrainOutputs, TowerCache), TowerError> {
        self.check_input(x)?;
        let (mid, fin, bb_cache) = self.backbone.forward_train(x);
        let (dve, dve_cache) = self.dve.forward(&mid);
        let final_dim = fin.dim();
        let pooled = nn::gap(&fin);
        let (proj, fc_cache) = self.head.fc.forward(&pooled);
        let (normed, bn_cache) = self.head.bn.forward_train(&proj);
        let (dropped, dropout_cache) = self.head.dropout.forward_train(&normed, rng);
        let (id_logits, id_cache) = self.head.id_fc.forward(&dropped);
        let (lr, lr_cache) = self.head.lr_fc.forward(&dropped);
        let lr_logits = lr.column(0).to_vec();
        Ok((
            TrainOutputs {
                f: dropped,
                id_logits,
                lr_logits,
                dve,
            },
            TowerCache {
                backbone: bb_cache,
                dve: dve_cache,
                mid_dim: mid.dim(),
                head: ReIdHeadCache {
                    final_dim,
                    fc: fc_cache,
                    bn: bn_cache,
                    dropout: dropout_cache,
                    id_fc: id_cache,
                    lr_fc: lr_cache,
                },
            },
        ))
    }

    pub fn backward(&mut self, cache: TowerCache, grads: &TowerGrads) {
        let n = grads.d_f.nrows();
        let mut d_dropped = grads.d_f.clone();
        d_dropped += &self.head.id_fc.backward(&cache.head.id_fc, &grads.d_id_logits);
        let d_lr = Array2::from_shape_fn((n, 1), |(i, _)| grads.d_lr_logits[i]);
        d_dropped += &self.head.lr_fc.backward(&cache.head.lr_fc, &d_lr);
        let d_normed = self.head.dropout.backward(&cache.head.dropout, &d_dropped);
        let d_proj = self.head.bn.backward(&cache.head.bn, &d_normed);
        let d_pooled = self.head.fc.backward(&cache.head.fc, &d_proj);
        let d_final = nn::gap_backward(cache.head.final_dim, &d_pooled);
        let d_mid = match &grads.d_dve {
            Some(d_dve) => self.dve.backward(&cache.dve, d_dve),
            None => {
                // descriptor loss disabled: head still needs zero grads kept
                // in shape for the shared tap
                Array4::zeros(cache.mid_dim)
            }
        };
        if !self.frozen {
            self.backbone.backward(&cache.backbone, &d_mid, &d_final);
        }
    }

    /// Evaluation forward: running-stat normalization, no dropout. Returns
    /// the ranking vector (post-norm) and the descriptor maps.
    pub fn forward_eval(&self, x: &Array4<f32>) -> Result<(Array2<f32>, Array4<f32>), TowerError> {
        self.check_input(x)?;
        let (mid, fin) = self.backbone.forward_eval(x);
        let (dve, _) = self.dve.forward(&mid);
        let pooled = nn::gap(&fin);
        let (proj, _) = self.head.fc.forward(&pooled);
        let f = self.head.bn.forward_eval(&proj);
        Ok((f, dve))
    }

    /// Dense descriptor maps at quarter resolution in eval mode: the
    /// normalized descriptor-head output, or the raw tap features when
    /// `raw` is set.
    pub fn descriptor_eval(&self, x: &Array4<f32>, raw: bool) -> Result<Array4<f32>, TowerError> {
        self.check_input(x)?;
        let (mid, _) = self.backbone.forward_eval(x);
        if raw {
            return Ok(mid);
        }
        let (dve, _) = self.dve.forward(&mid);
        Ok(dve)
    }

    /// Flip-concatenated evaluation embedding, (N, 2d).
    pub fn embed_eval(&self, x: &Array4<f32>) -> Result<Array2<f32>, TowerError> {
        let (f, _) = self.forward_eval(x)?;
        let (f_flip, _) = self.forward_eval(&nn::flip_w(x))?;
        let (n, d) = f.dim();
        let mut out = Array2::zeros((n, 2 * d));
        for i in 0..n {
            for j in 0..d {
                out[[i, j]] = f[[i, j]];
                out[[i, d + j]] = f_flip[[i, j]];
            }
        }
        Ok(out)
    }

    /// Identity and orientation predictions in eval mode (no dropout), for
    /// diagnostics.
    pub fn classify_eval(&self, x: &Array4<f32>) -> Result<(Array2<f32>, Vec<f32>), TowerError> {
        self.check_input(x)?;
        let (_, fin) = self.backbone.forward_eval(x);
        let pooled = nn::gap(&fin);
        let (proj, _) = self.head.fc.forward(&pooled);
        let f = self.head.bn.forward_eval(&proj);
        let (id_logits, _) = self.head.id_fc.forward(&f);
        let (lr, _) = self.head.lr_fc.forward(&f);
        Ok((id_logits, lr.column(0).to_vec()))
    }

    pub fn zero_grad(&mut self) {
        self.visit(&mut |p| p.zero_grad());
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| {
            if p.trainable {
                n += p.value.len();
            }
        });
        n
    }
}

impl Visit for Tower {
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.backbone.visit(f);
        self.dve.visit(f);
        self.head.visit(f);
    }
}

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    config: TowerConfig,
    entity_labels: Vec<String>,
    params: Vec<ParamMeta>,
}

/// Write a checkpoint: magic, version, JSON header (config + entity label
/// mapping + tensor directory), then one raw little-endian f32 blob. The
/// file appears atomically via a temp file in the same directory.
pub fn save_checkpoint(
    tower: &mut Tower,
    entity_labels: &[String],
    path: &Path,
) -> Result<(), TowerError> {
    let mut metas = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    tower.visit(&mut |p| {
        let offset = blob.len() as u64;
        for v in p.value.iter() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        metas.push(ParamMeta {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset,
            len: p.value.len() as u64,
        });
    });
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        config: tower.config.clone(),
        entity_labels: entity_labels.to_vec(),
        params: metas,
    };
    let header_bytes = serde_json::to_vec(&header).expect("header serializes");

    let io_err = |source: std::io::Error| TowerError::Io {
        path: path.display().to_string(),
        source,
    };
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp).map_err(io_err)?;
        f.write_all(CHECKPOINT_MAGIC).map_err(io_err)?;
        f.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io_err)?;
        f.write_all(&(header_bytes.len() as u64).to_le_bytes())
            .map_err(io_err)?;
        f.write_all(&header_bytes).map_err(io_err)?;
        f.write_all(&blob).map_err(io_err)?;
        f.sync_all().map_err(io_err)?;
    }
    std::fs::rename(&tmp, path).map_err(io_err)
}

/// Load a checkpoint written by `save_checkpoint`. Rebuilds the tower from
/// the stored config and fills every parameter by name; any missing or
/// mis-shaped tensor is an error.
pub fn load_checkpoint(path: &Path) -> Result<(Tower, Vec<String>), TowerError> {
    let bad = |reason: String| TowerError::BadCheckpoint {
        path: path.display().to_string(),
        reason,
    };
    let io_err = |source: std::io::Error| TowerError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = std::fs::File::open(path).map_err(io_err)?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic).map_err(io_err)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    f.read_exact(&mut word).map_err(io_err)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let mut len_word = [0u8; 8];
    f.read_exact(&mut len_word).map_err(io_err)?;
    let header_len = u64::from_le_bytes(len_word) as usize;
    let mut header_bytes = vec![0u8; header_len];
    f.read_exact(&mut header_bytes).map_err(io_err)?;
    let header: CheckpointHeader =
        serde_json::from_slice(&header_bytes).map_err(|e| bad(format!("header: {e}")))?;
    let mut blob = Vec::new();
    f.read_to_end(&mut blob).map_err(io_err)?;

    let mut tower = Tower::new(header.config.clone(), 0)?;
    let mut directory: std::collections::HashMap<&str, &ParamMeta> = header
        .params
        .iter()
        .map(|m| (m.name.as_str(), m))
        .collect();
    let mut failure: Option<String> = None;
    tower.visit(&mut |p| {
        if failure.is_some() {
            return;
        }
        let Some(meta) = directory.remove(p.name.as_str()) else {
            failure = Some(format!("missing tensor {}", p.name));
            return;
        };
        if meta.shape != p.value.shape() {
            failure = Some(format!(
                "tensor {} has shape {:?}, model wants {:?}",
                p.name,
                meta.shape,
                p.value.shape()
            ));
            return;
        }
        let byte_start = meta.offset as usize;
        let byte_len = meta.len as usize * 4;
        let Some(bytes) = blob.get(byte_start..byte_start + byte_len) else {
            failure = Some(format!("tensor {} overruns blob", p.name));
            return;
        };
        for (slot, chunk) in p.value.iter_mut().zip(bytes.chunks_exact(4)) {
            *slot = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        }
    });
    if let Some(reason) = failure {
        return Err(bad(reason));
    }
    if !directory.is_empty() {
        let mut extra: Vec<&str> = directory.into_keys().collect();
        extra.sort_unstable();
        return Err(bad(format!("unknown tensors in file: {}", extra.join(", "))));
    }
    Ok((tower, header.entity_labels))
}
