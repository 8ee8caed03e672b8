//! CNN encoders and the 128-d projection heads.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::{Image, CHANNELS};
use crate::jigsaw::{PatchBundle, PATCHES};
use crate::nn::{BatchNorm2d, Conv2d, Linear};
use crate::tensor::{ParamStore, Tensor};

pub const EMBED_DIM: usize = 128;
/// Added to the norm before dividing, so a zero vector maps to zero.
pub const NORM_EPS: f64 = 1e-12;
pub const ENCODER_PREFIX: &str = "encoder.";

const TINY_CHANNELS: [usize; 4] = [16, 32, 64, 128];
const RESNET_BLOCKS: [usize; 4] = [3, 4, 6, 3];
const RESNET_WIDTHS: [usize; 4] = [64, 128, 256, 512];
const RESNET_STEM_LEAVES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    TinyCnn,
    ReferenceResnet50,
}

impl Architecture {
    pub fn feature_dim(self) -> usize {
        match self {
            Architecture::TinyCnn => TINY_CHANNELS[3],
            Architecture::ReferenceResnet50 => RESNET_WIDTHS[3] * 4,
        }
    }

    pub fn image_input_side(self) -> usize {
        match self {
            Architecture::TinyCnn => 96,
            Architecture::ReferenceResnet50 => 224,
        }
    }

    pub fn patch_input_side(self) -> usize {
        match self {
            Architecture::TinyCnn => 32,
            Architecture::ReferenceResnet50 => 64,
        }
    }

    /// Index into [`Architecture::leaf_names`].
    pub fn default_tap_layer(self) -> usize {
        match self {
            // relu after the third stage
            Architecture::TinyCnn => 5,
            Architecture::ReferenceResnet50 => 40,
        }
    }

    /// Leaf modules in registration order; tap layers index this list.
    pub fn leaf_names(self) -> Vec<String> {
        match self {
            Architecture::TinyCnn => (1..=TINY_CHANNELS.len())
                .flat_map(|i| [format!("conv{i}"), format!("relu{i}")])
                .collect(),
            Architecture::ReferenceResnet50 => {
                let mut names: Vec<String> = ["conv1", "bn1", "relu", "maxpool"]
                    .iter()
                    .map(|s| String::from(*s))
                    .collect();
                for (l, &blocks) in RESNET_BLOCKS.iter().enumerate() {
                    for b in 0..blocks {
                        let p = format!("layer{}.{b}", l + 1);
                        for leaf in ["conv1", "bn1", "conv2", "bn2", "conv3", "bn3", "relu"] {
                            names.push(format!("{p}.{leaf}"));
                        }
                        if b == 0 {
                            names.push(format!("{p}.downsample.0"));
                            names.push(format!("{p}.downsample.1"));
                        }
                    }
                }
                names
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub architecture: Architecture,
    pub perceptual_tap_layer: usize,
    pub feature_dim: usize,
    #[serde(default)]
    pub pretrained_weights: Option<String>,
}

impl EncoderConfig {
    pub fn new(architecture: Architecture) -> Self {
        EncoderConfig {
            architecture,
            perceptual_tap_layer: architecture.default_tap_layer(),
            feature_dim: architecture.feature_dim(),
            pretrained_weights: None,
        }
    }

    pub fn tiny() -> Self {
        Self::new(Architecture::TinyCnn)
    }

    pub fn reference() -> Self {
        Self::new(Architecture::ReferenceResnet50)
    }

    pub fn validate(&self) -> Result<()> {
        let leaves = self.architecture.leaf_names().len();
        if self.perceptual_tap_layer >= leaves {
            return Err(Error::Config(format!(
                "tap layer {} does not exist; {:?} has {leaves} layers",
                self.perceptual_tap_layer, self.architecture
            )));
        }
        if self.feature_dim != self.architecture.feature_dim() {
            return Err(Error::Config(format!(
                "feature_dim {} does not match {:?} ({})",
                self.feature_dim,
                self.architecture,
                self.architecture.feature_dim()
            )));
        }
        Ok(())
    }
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

/// Graph handles produced by one encoder pass.
pub struct EncoderOutput {
    /// Globally pooled final features, `[N, feature_dim]`.
    pub features: Var,
    /// Spatial map at the tap layer, `[N, C, h, w]`.
    pub tap: Var,
    /// Outputs of each downsampling stage, shallow to deep, for skips.
    pub stages: Vec<Var>,
}

#[derive(Debug, Clone)]
struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    conv3: Conv2d,
    bn3: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
    /// Leaf indices covered by this block.
    leaves: core::ops::Range<usize>,
}

#[derive(Debug, Clone)]
enum Body {
    Tiny(Vec<Conv2d>),
    Resnet {
        conv1: Conv2d,
        bn1: BatchNorm2d,
        layers: Vec<Vec<Bottleneck>>,
    },
}

#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    body: Body,
}

impl Encoder {
    /// Registers fresh parameters under `encoder.`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let body = match cfg.architecture {
            Architecture::TinyCnn => {
                let mut convs = Vec::new();
                let mut in_ch = CHANNELS;
                for (i, &ch) in TINY_CHANNELS.iter().enumerate() {
                    let name = format!("{ENCODER_PREFIX}conv{}", i + 1);
                    convs.push(Conv2d::new(store, &name, in_ch, ch, 3, 2, 1, true, rng));
                    in_ch = ch;
                }
                Body::Tiny(convs)
            }
            Architecture::ReferenceResnet50 => build_resnet(store, rng),
        };
        Ok(Encoder {
            cfg: cfg.clone(),
            body,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn feature_dim(&self) -> usize {
        self.cfg.feature_dim
    }

    /// Channel counts of [`EncoderOutput::stages`].
    pub fn stage_channels(&self) -> Vec<usize> {
        match self.body {
            Body::Tiny(_) => TINY_CHANNELS.to_vec(),
            Body::Resnet { .. } => {
                let mut v = vec![64];
                v.extend(RESNET_WIDTHS.iter().map(|w| w * 4));
                v
            }
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> EncoderOutput {
        let tap_at = self.cfg.perceptual_tap_layer;
        let mut tap = None;
        let mut stages = Vec::new();
        let last = match &self.body {
            Body::Tiny(convs) => {
                let mut h = x;
                for (i, conv) in convs.iter().enumerate() {
                    let c = conv.forward(g, h);
                    if tap_at == 2 * i {
                        tap = Some(c);
                    }
                    h = g.relu(c);
                    if tap_at == 2 * i + 1 {
                        tap = Some(h);
                    }
                    stages.push(h);
                }
                h
            }
            Body::Resnet { conv1, bn1, layers } => {
                let c = conv1.forward(g, x);
                let b = bn1.forward(g, c);
                let r = g.relu(b);
                stages.push(r);
                let m = g.max_pool(r, 3, 2, 1);
                for (i, v) in [c, b, r, m].into_iter().enumerate() {
                    if tap_at == i {
                        tap = Some(v);
                    }
                }
                let mut h = m;
                for layer in layers {
                    for block in layer {
                        h = block.forward(g, h);
                        if block.leaves.contains(&tap_at) {
                            tap = Some(h);
                        }
                    }
                    stages.push(h);
                }
                h
            }
        };
        let features = g.global_avg_pool(last);
        EncoderOutput {
            features,
            tap: tap.expect("tap layer validated at construction"),
            stages,
        }
    }

    /// Replaces the encoder weights with `entries` (names under `encoder.`).
    pub fn load_weights(&self, store: &mut ParamStore, entries: &[(String, Tensor)]) -> Result<()> {
        store.import_prefix(ENCODER_PREFIX, entries)
    }
}

impl Bottleneck {
    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.conv1.forward(g, x);
        let h = self.bn1.forward(g, h);
        let h = g.relu(h);
        let h = self.conv2.forward(g, h);
        let h = self.bn2.forward(g, h);
        let h = g.relu(h);
        let h = self.conv3.forward(g, h);
        let h = self.bn3.forward(g, h);
        let identity = match &self.downsample {
            Some((conv, bn)) => {
                let d = conv.forward(g, x);
                bn.forward(g, d)
            }
            None => x,
        };
        let sum = g.add(h, identity);
        g.relu(sum)
    }
}

fn build_resnet<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R) -> Body {
    let p = ENCODER_PREFIX;
    let conv1 = Conv2d::new(
        store,
        &format!("{p}conv1"),
        CHANNELS,
        64,
        7,
        2,
        3,
        false,
        rng,
    );
    let bn1 = BatchNorm2d::new(store, &format!("{p}bn1"), 64);
    let mut leaf = RESNET_STEM_LEAVES;
    let mut in_ch = 64;
    let mut layers = Vec::new();
    for (l, (&blocks, &width)) in RESNET_BLOCKS.iter().zip(&RESNET_WIDTHS).enumerate() {
        let mut layer = Vec::new();
        for b in 0..blocks {
            let name = format!("{p}layer{}.{b}", l + 1);
            let stride = if b == 0 && l > 0 { 2 } else { 1 };
            let out = width * 4;
            let conv = |store: &mut ParamStore, rng: &mut R, n: &str, i, o, k, s, pad| {
                Conv2d::new(store, &format!("{name}.{n}"), i, o, k, s, pad, false, rng)
            };
            let c1 = conv(store, rng, "conv1", in_ch, width, 1, 1, 0);
            let b1 = BatchNorm2d::new(store, &format!("{name}.bn1"), width);
            let c2 = conv(store, rng, "conv2", width, width, 3, stride, 1);
            let b2 = BatchNorm2d::new(store, &format!("{name}.bn2"), width);
            let c3 = conv(store, rng, "conv3", width, out, 1, 1, 0);
            let b3 = BatchNorm2d::new(store, &format!("{name}.bn3"), out);
            let downsample = (b == 0).then(|| {
                (
                    conv(store, rng, "downsample.0", in_ch, out, 1, stride, 0),
                    BatchNorm2d::new(store, &format!("{name}.downsample.1"), out),
                )
            });
            let n_leaves = if b == 0 { 9 } else { 7 };
            layer.push(Bottleneck {
                conv1: c1,
                bn1: b1,
                conv2: c2,
                bn2: b2,
                conv3: c3,
                bn3: b3,
                downsample,
                leaves: leaf..leaf + n_leaves,
            });
            leaf += n_leaves;
            in_ch = out;
        }
        layers.push(layer);
    }
    Body::Resnet { conv1, bn1, layers }
}

/// Stacks images into `[N, 3, side, side]`, resizing as needed.
pub fn images_to_tensor(images: &[Image], side: usize) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::arg("no images to stack"));
    }
    let mut data = Vec::with_capacity(images.len() * CHANNELS * side * side);
    for img in images {
        if img.height() == side && img.width() == side {
            data.extend_from_slice(img.data());
        } else {
            data.extend_from_slice(img.resize(side, side)?.data());
        }
    }
    Tensor::new(vec![images.len(), CHANNELS, side, side], data)
}

/// Unit-length 128-d projection output.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f64>,
}

impl Embedding {
    /// Normalizes `values` with the epsilon-guarded norm.
    pub fn normalized(mut values: Vec<f64>) -> Self {
        normalize_in_place(&mut values);
        Embedding { values }
    }

    /// Wraps a vector that is already unit length.
    pub fn from_unit(values: Vec<f64>) -> Result<Self> {
        let n = norm(&values);
        if (n - 1.0).abs() > 1e-5 {
            return Err(Error::arg(format!("embedding norm {n} is not 1")));
        }
        Ok(Embedding { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub fn norm(v: &[f64]) -> f64 {
    libm::sqrt(v.iter().map(|x| x * x).sum())
}

pub fn normalize_in_place(v: &mut [f64]) {
    let d = norm(v) + NORM_EPS;
    for x in v {
        *x /= d;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    FImage,
    GPatch,
}

#[derive(Debug, Clone, Copy)]
pub struct ProjectionHeads {
    pub f: Linear,
    pub g: Linear,
}

impl ProjectionHeads {
    /// `f: D -> 128` and `g: 36 D -> 128`, independent parameters.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, feature_dim: usize, rng: &mut R) -> Self {
        ProjectionHeads {
            f: Linear::without_bias(store, "head_f", feature_dim, EMBED_DIM, rng),
            g: Linear::without_bias(store, "head_g", PATCHES * feature_dim, EMBED_DIM, rng),
        }
    }

    pub fn layer(&self, head: Head) -> Linear {
        match head {
            Head::FImage => self.f,
            Head::GPatch => self.g,
        }
    }

    /// Linear projection followed by row-wise L2 normalization.
    pub fn project(&self, g: &mut Graph, x: Var, head: Head) -> Var {
        let y = self.layer(head).forward(g, x);
        g.l2_normalize(y, NORM_EPS)
    }
}

/// Eval-mode projection of a single feature vector.
pub fn project_normalize(
    store: &ParamStore,
    heads: &ProjectionHeads,
    features: &[f64],
    head: Head,
) -> Result<Embedding> {
    let width = heads.layer(head).in_features(store);
    if features.len() != width {
        return Err(Error::arg(format!(
            "{head:?} expects {width} features, got {}",
            features.len()
        )));
    }
    let mut g = Graph::new(store, false);
    let x = g.input(Tensor::new(vec![1, width], features.to_vec())?);
    let y = heads.project(&mut g, x, head);
    Ok(Embedding {
        values: g.value(y).data().to_vec(),
    })
}

/// Eval-mode encoding of one image at the encoder's input size. Returns the
/// pooled features and the tap-layer map `[C, h, w]`.
pub fn encode_image(
    encoder: &Encoder,
    store: &ParamStore,
    img: &Image,
) -> Result<(Vec<f64>, Tensor)> {
    let side = encoder.config().architecture.image_input_side();
    let x = images_to_tensor(core::slice::from_ref(img), side)?;
    let mut g = Graph::new(store, false);
    let xi = g.input(x);
    let out = encoder.forward(&mut g, xi);
    let tap = g.value(out.tap).clone();
    let s = tap.shape()[1..].to_vec();
    Ok((g.value(out.features).data().to_vec(), tap.reshaped(&s)))
}

/// Eval-mode per-patch features concatenated in output-position order.
pub fn encode_patches_concat(
    encoder: &Encoder,
    store: &ParamStore,
    bundle: &PatchBundle,
) -> Result<Vec<f64>> {
    if bundle.patches.len() != PATCHES {
        return Err(Error::arg(format!(
            "expected {PATCHES} patches, got {}",
            bundle.patches.len()
        )));
    }
    let side = encoder.config().architecture.patch_input_side();
    let x = images_to_tensor(&bundle.patches, side)?;
    let mut g = Graph::new(store, false);
    let xi = g.input(x);
    let out = encoder.forward(&mut g, xi);
    Ok(g.value(out.features).data().to_vec())
}
