//! U-shaped segmentation network: encoder stages plus an upsampling decoder
//! with skip connections and a two-class 1x1 head.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::encoder::{images_to_tensor, Architecture, Encoder, EncoderConfig};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::image::{Image, Mask, CHANNELS};
use crate::nn::Conv2d;
use crate::tensor::ParamStore;

pub const CLASSES: usize = 2;

fn decoder_widths(arch: Architecture) -> &'static [usize] {
    match arch {
        Architecture::TinyCnn => &[32, 16, 8, 8],
        Architecture::ReferenceResnet50 => &[256, 128, 64, 32, 16],
    }
}

#[derive(Debug, Clone)]
pub struct SegmentationModel {
    pub encoder: Encoder,
    decoder: Vec<Conv2d>,
    head: Conv2d,
    side: usize,
}

impl SegmentationModel {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let encoder = Encoder::new(store, cfg, rng)?;
        let stage_ch = encoder.stage_channels();
        // skip sources, deepest first, ending with the raw input
        let mut skips: Vec<usize> = stage_ch[..stage_ch.len() - 1]
            .iter()
            .rev()
            .copied()
            .collect();
        skips.push(CHANNELS);
        let mut in_ch = *stage_ch.last().unwrap();
        let mut decoder = Vec::new();
        for (i, (&skip, &out)) in skips
            .iter()
            .zip(decoder_widths(cfg.architecture))
            .enumerate()
        {
            let name = format!("decoder.up{}", i + 1);
            decoder.push(Conv2d::new(
                store,
                &name,
                in_ch + skip,
                out,
                3,
                1,
                1,
                true,
                rng,
            ));
            in_ch = out;
        }
        let head = Conv2d::new(store, "decoder.head", in_ch, CLASSES, 1, 1, 0, true, rng);
        let side = cfg.architecture.image_input_side();
        Ok(SegmentationModel {
            encoder,
            decoder,
            head,
            side,
        })
    }

    /// Sets the square size images are resized to by [`Self::predict`].
    pub fn with_input_side(mut self, side: usize) -> Self {
        self.side = side;
        self
    }

    pub fn input_side(&self) -> usize {
        self.side
    }

    /// Logits `[N, 2, H, W]` for input `[N, 3, H, W]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let enc = self.encoder.forward(g, x);
        let mut skips: Vec<Var> = enc.stages[..enc.stages.len() - 1]
            .iter()
            .rev()
            .copied()
            .collect();
        skips.push(x);
        let mut h = *enc.stages.last().unwrap();
        for (conv, &skip) in self.decoder.iter().zip(&skips) {
            let (sh, sw) = (g.shape(skip)[2], g.shape(skip)[3]);
            let up = g.resize_nearest(h, sh, sw);
            let cat = g.concat_channels(&[up, skip]);
            let c = conv.forward(g, cat);
            h = g.relu(c);
        }
        self.head.forward(g, h)
    }

    /// Eval-mode argmax masks at each image's own resolution.
    pub fn predict(&self, store: &ParamStore, images: &[Image]) -> Result<Vec<Mask>> {
        let side = self.input_side();
        let mut masks = Vec::with_capacity(images.len());
        for chunk in images.chunks(8) {
            let x = images_to_tensor(chunk, side)?;
            let mut g = Graph::new(store, false);
            let xi = g.input(x);
            let logits = self.forward(&mut g, xi);
            let l = g.value(logits).data();
            let hw = side * side;
            for (n, img) in chunk.iter().enumerate() {
                let data = (0..hw)
                    .map(|p| (l[(n * CLASSES + 1) * hw + p] > l[n * CLASSES * hw + p]) as u8)
                    .collect();
                let m = Mask::new(img.id(), side, side, data)?;
                masks.push(m.resize(img.height(), img.width()));
            }
        }
        Ok(masks)
    }
}
