//! Relation network, relation contrastive loss, NCE, perceptual loss and
//! their weighted combination.
//!
//! The free functions here are plain scalar evaluations used for reporting
//! and as references; training builds the same quantities on a [`Graph`].

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Embedding, EMBED_DIM};
use crate::error::{Error, Result};
use crate::graph::{logsumexp, Graph, Var};
use crate::nn::Linear;
use crate::tensor::{ParamStore, Tensor};

pub const RELATION_HIDDEN: usize = 64;
pub const DEFAULT_TEMPERATURE: f64 = 0.07;
pub const DEFAULT_LEVEL_WEIGHT: f64 = 0.5;
pub const RCL_PERCEP_LAMBDA: f64 = 0.1;
pub const PIRL_PERCEP_LAMBDA: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Pirl,
    PirlPercep,
    Rcl,
    RclPercep,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Pirl,
        Method::PirlPercep,
        Method::Rcl,
        Method::RclPercep,
    ];

    pub fn uses_relation(self) -> bool {
        matches!(self, Method::Rcl | Method::RclPercep)
    }

    pub fn uses_perceptual(self) -> bool {
        matches!(self, Method::PirlPercep | Method::RclPercep)
    }

    /// Contrastive weight; 1 for the methods without a perceptual term.
    pub fn default_lambda(self) -> f64 {
        match self {
            Method::RclPercep => RCL_PERCEP_LAMBDA,
            Method::PirlPercep => PIRL_PERCEP_LAMBDA,
            _ => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Pirl => "pirl",
            Method::PirlPercep => "pirl_percep",
            Method::Rcl => "rcl",
            Method::RclPercep => "rcl_percep",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

/// Two-layer scorer: `sigmoid(W2 relu(W1 (128 * a * b) + b1) + b2)`.
///
/// Entries of a product of unit vectors are around 1/128, so the scale brings
/// them to order one. Unscaled, the scorer stays at 0.5 and never learns.
#[derive(Debug, Clone, Copy)]
pub struct RelationNetworkParams {
    pub layer1: Linear,
    pub layer2: Linear,
}

impl RelationNetworkParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R) -> Self {
        RelationNetworkParams {
            layer1: Linear::new(
                store,
                "relation_net.layer1",
                EMBED_DIM,
                RELATION_HIDDEN,
                rng,
            ),
            layer2: Linear::new(store, "relation_net.layer2", RELATION_HIDDEN, 1, rng),
        }
    }

    /// Scores `[N, 128]` element-wise products, giving `[N, 1]`.
    pub fn forward(&self, g: &mut Graph, products: Var) -> Var {
        let products = g.scale(products, EMBED_DIM as f64);
        let h = self.layer1.forward(g, products);
        let h = g.relu(h);
        let s = self.layer2.forward(g, h);
        g.sigmoid(s)
    }
}

pub fn relation_score(
    a: &Embedding,
    b: &Embedding,
    params: &RelationNetworkParams,
    store: &ParamStore,
) -> Result<f64> {
    let width = params.layer1.in_features(store);
    if a.len() != width || b.len() != width {
        return Err(Error::arg(format!(
            "relation network expects length {width}, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let prod: Vec<f64> = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| x * y)
        .collect();
    let mut g = Graph::new(store, false);
    let x = g.input(Tensor::new(alloc::vec![1, width], prod)?);
    let s = params.forward(&mut g, x);
    Ok(g.value(s).item())
}

/// Mean over anchors of `(s+ - 1)^2 + mean_j (s-_j)^2`.
pub fn rcl_loss(pos_scores: &[f64], neg_scores: &[Vec<f64>]) -> Result<f64> {
    if pos_scores.is_empty() {
        return Err(Error::arg("empty batch"));
    }
    if pos_scores.len() != neg_scores.len() {
        return Err(Error::arg("one negative list per positive score required"));
    }
    let mut total = 0.0;
    for (p, negs) in pos_scores.iter().zip(neg_scores) {
        if negs.is_empty() {
            return Err(Error::arg("each anchor needs at least one negative"));
        }
        let neg = negs.iter().map(|s| s * s).sum::<f64>() / negs.len() as f64;
        total += (p - 1.0) * (p - 1.0) + neg;
    }
    Ok(total / pos_scores.len() as f64)
}

fn check_unit_interval(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::arg(format!("{name} = {v} outside [0, 1]")));
    }
    Ok(())
}

/// `w * image + (1 - w) * patch`.
pub fn total_rcl(rcl_image: f64, rcl_patch: f64, w: f64) -> Result<f64> {
    check_unit_interval("w", w)?;
    Ok(w * rcl_image + (1.0 - w) * rcl_patch)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (crate::encoder::norm(a) * crate::encoder::norm(b))
}

/// `-log softmax` of the positive among the positive and the negatives,
/// with cosine logits divided by `temperature`.
pub fn nce_loss(
    anchor: &Embedding,
    positive: &Embedding,
    negatives: &[Embedding],
    temperature: f64,
) -> Result<f64> {
    if negatives.is_empty() {
        return Err(Error::arg("nce needs at least one negative"));
    }
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::arg(format!(
            "temperature {temperature} must be positive"
        )));
    }
    let d = anchor.len();
    if positive.len() != d || negatives.iter().any(|n| n.len() != d) {
        return Err(Error::arg("embedding lengths differ"));
    }
    let mut logits = Vec::with_capacity(negatives.len() + 1);
    logits.push(cosine(anchor.values(), positive.values()) / temperature);
    for n in negatives {
        logits.push(cosine(anchor.values(), n.values()) / temperature);
    }
    Ok(logsumexp(&logits) - logits[0])
}

/// `(1/J) sum_j mean_a (image[a] - patch_j[a])^2`.
pub fn perceptual_loss(image_tap: &[f64], patch_taps: &[Vec<f64>]) -> Result<f64> {
    if patch_taps.is_empty() || image_tap.is_empty() {
        return Err(Error::arg("perceptual loss needs features"));
    }
    let d = image_tap.len();
    let mut total = 0.0;
    for p in patch_taps {
        if p.len() != d {
            return Err(Error::arg(format!("patch tap length {} != {d}", p.len())));
        }
        total += image_tap
            .iter()
            .zip(p)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / d as f64;
    }
    Ok(total / patch_taps.len() as f64)
}

/// `lambda * contrastive + (1 - lambda) * perceptual`.
pub fn combined_loss(contrastive: f64, perceptual: f64, lambda: f64) -> Result<f64> {
    check_unit_interval("lambda", lambda)?;
    Ok(lambda * contrastive + (1.0 - lambda) * perceptual)
}

/// Per-step loss components. Fields that do not apply to the active method
/// are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub rcl_image: Option<f64>,
    pub rcl_patch: Option<f64>,
    pub rcl_total: Option<f64>,
    pub perceptual: Option<f64>,
    pub nce_total: Option<f64>,
    pub combined: f64,
    pub w: f64,
    pub lambda: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str =
        "epoch,step,rcl_image,rcl_patch,rcl_total,perceptual,nce_total,combined";

    pub fn components(&self) -> [Option<f64>; 6] {
        [
            self.rcl_image,
            self.rcl_patch,
            self.rcl_total,
            self.perceptual,
            self.nce_total,
            Some(self.combined),
        ]
    }
}
