//! Pretext training and segmentation fine-tuning.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{take_subset, SubsetSpec};
use crate::encoder::{
    images_to_tensor, Architecture, Embedding, Encoder, EncoderConfig, Head, ProjectionHeads,
};
use crate::error::{Error, Result};
use crate::frequency::{apply_frequency_filter, random_crop_rect, sample_filter_spec};
use crate::graph::{Gradients, Graph, Var};
use crate::image::{Image, Mask};
use crate::jigsaw::{
    partition_grid, prepare_crop, select_focal_sets, transform_crosspatch,
    transform_jigsaw_baseline, FocalMode, DEFAULT_CROP_SIDE, PATCHES,
};
use crate::losses::{
    LossReport, Method, RelationNetworkParams, DEFAULT_LEVEL_WEIGHT, DEFAULT_TEMPERATURE,
};
use crate::memory_bank::{MemoryBank, DEFAULT_MOMENTUM};
use crate::metrics::{evaluate, overlap_metrics, MetricsReport};
use crate::nn::apply_bn_updates;
use crate::photometric::{apply_t1, apply_t2_patch_jitter, JitterSpec};
use crate::rng::{self, domain};
use crate::segmentation::SegmentationModel;
use crate::tensor::{ParamStore, Tensor};

/// Learning rates searched for the pretext optimizer.
pub const PRETEXT_LR_GRID: [f64; 6] = [0.05, 0.01, 0.005, 0.001, 0.0005, 0.0001];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretextTask {
    Jigsaw,
    JigsawFreq,
    Crosspatch,
    CrosspatchFreq,
}

impl PretextTask {
    pub fn uses_frequency(self) -> bool {
        matches!(self, PretextTask::JigsawFreq | PretextTask::CrosspatchFreq)
    }

    pub fn uses_crosspatch(self) -> bool {
        matches!(self, PretextTask::Crosspatch | PretextTask::CrosspatchFreq)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Desk,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretextConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub method: Method,
    pub pretext_task: PretextTask,
    pub seed: u64,
    /// Contrastive weight; `None` picks the method default.
    pub lambda: Option<f64>,
    /// Image-level weight `w` between image and patch terms.
    pub level_weight: f64,
    pub temperature: f64,
    pub bank_momentum: f64,
    pub negatives_per_anchor: usize,
    pub bank_recompute: bool,
    pub focal_mode: FocalMode,
    pub architecture: Architecture,
    pub perceptual_tap_layer: Option<usize>,
    pub pretrained_weights: Option<String>,
    pub image_size: usize,
}

impl PretextConfig {
    pub fn desk() -> Self {
        PretextConfig {
            epochs: 50,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 8,
            method: Method::RclPercep,
            pretext_task: PretextTask::CrosspatchFreq,
            seed: 42,
            lambda: None,
            level_weight: DEFAULT_LEVEL_WEIGHT,
            temperature: DEFAULT_TEMPERATURE,
            bank_momentum: DEFAULT_MOMENTUM,
            negatives_per_anchor: 8,
            bank_recompute: false,
            focal_mode: FocalMode::ReversePositions,
            architecture: Architecture::TinyCnn,
            perceptual_tap_layer: None,
            pretrained_weights: None,
            image_size: 96,
        }
    }

    pub fn full() -> Self {
        PretextConfig {
            epochs: 2000,
            batch_size: 16,
            negatives_per_anchor: 4096,
            architecture: Architecture::ReferenceResnet50,
            image_size: 224,
            ..Self::desk()
        }
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Desk => Self::desk(),
            Profile::Full => Self::full(),
        }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda.unwrap_or_else(|| self.method.default_lambda())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        let mut cfg = EncoderConfig::new(self.architecture);
        if let Some(t) = self.perceptual_tap_layer {
            cfg.perceptual_tap_layer = t;
        }
        cfg.pretrained_weights = self.pretrained_weights.clone();
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad(String::from("epochs must be >= 1"));
        }
        if !PRETEXT_LR_GRID.contains(&self.lr) {
            return bad(format!(
                "lr {} is not in the grid {PRETEXT_LR_GRID:?}",
                self.lr
            ));
        }
        if self.batch_size < 2 {
            return bad(String::from("batch_size must be >= 2"));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad(String::from(
                "momentum must be in [0, 1) and weight_decay >= 0",
            ));
        }
        let lambda = self.lambda();
        if !(0.0..=1.0).contains(&lambda) {
            return bad(format!("lambda {lambda} outside [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.level_weight) {
            return bad(format!("level_weight {} outside [0, 1]", self.level_weight));
        }
        if !(0.0..=1.0).contains(&self.bank_momentum) {
            return bad(format!(
                "bank_momentum {} outside [0, 1]",
                self.bank_momentum
            ));
        }
        if !(self.temperature > 0.0) {
            return bad(String::from("temperature must be > 0"));
        }
        if self.negatives_per_anchor == 0 {
            return bad(String::from("negatives_per_anchor must be >= 1"));
        }
        if self.image_size < 16 {
            return bad(String::from("image_size must be >= 16"));
        }
        self.encoder_config().validate()
    }
}

impl Default for PretextConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub lr_power: f64,
    pub warmup: usize,
    pub patience: usize,
    pub train_fraction: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub architecture: Architecture,
    pub image_size: usize,
}

impl FinetuneConfig {
    pub fn desk() -> Self {
        FinetuneConfig {
            epochs: 60,
            lr_start: 1e-3,
            lr_end: 1e-6,
            lr_power: 0.9,
            warmup: 20,
            patience: 10,
            train_fraction: 1.0,
            batch_size: 8,
            seed: 42,
            architecture: Architecture::TinyCnn,
            image_size: 96,
        }
    }

    pub fn full() -> Self {
        FinetuneConfig {
            epochs: 500,
            warmup: 100,
            patience: 50,
            architecture: Architecture::ReferenceResnet50,
            image_size: 224,
            ..Self::desk()
        }
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Desk => Self::desk(),
            Profile::Full => Self::full(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad(String::from("epochs and batch_size must be >= 1"));
        }
        if self.warmup >= self.epochs {
            return bad(format!(
                "warmup {} must be < epochs {}",
                self.warmup, self.epochs
            ));
        }
        if self.patience == 0 {
            return bad(String::from("patience must be >= 1"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return bad(format!(
                "train_fraction {} outside (0, 1]",
                self.train_fraction
            ));
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0 && self.lr_end <= self.lr_start) {
            return bad(String::from("need 0 < lr_end <= lr_start"));
        }
        if self.image_size < 16 {
            return bad(String::from("image_size must be >= 16"));
        }
        Ok(())
    }
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// `(start - end) * (1 - epoch / epochs)^power + end`.
pub fn poly_lr(epoch: usize, cfg: &FinetuneConfig) -> Result<f64> {
    if epoch > cfg.epochs || cfg.epochs == 0 {
        return Err(Error::arg(format!(
            "epoch {epoch} outside 0..={}",
            cfg.epochs
        )));
    }
    let frac = 1.0 - epoch as f64 / cfg.epochs as f64;
    Ok((cfg.lr_start - cfg.lr_end) * libm::pow(frac, cfg.lr_power) + cfg.lr_end)
}

/// True once the epoch count passes `warmup` and more than `patience`
/// epochs have gone by since the later of the best epoch and the warmup.
pub fn early_stop_check(history: &[f64], warmup: usize, patience: usize) -> bool {
    let current = history.len();
    if current <= warmup {
        return false;
    }
    let mut best = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    for (i, &v) in history.iter().enumerate() {
        if v > best {
            best = v;
            best_epoch = i + 1;
        }
    }
    current - best_epoch.max(warmup) > patience
}

/// SGD with classical momentum: `v = m v + g + wd p`, `p -= lr v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.velocity.resize(store.len(), None);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            let p = store.get_mut(id).data_mut();
            let v = self.velocity[id.0].get_or_insert_with(|| vec![0.0; p.len()]);
            for ((pi, vi), gi) in p.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *pi;
                *pi -= self.lr * *vi;
            }
        }
    }

    /// Momentum buffers named after their parameters.
    pub fn export_state(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        export_buffers(store, &[("momentum", &self.velocity)])
    }

    pub fn import_state(&mut self, store: &ParamStore, entries: &[(String, Tensor)]) -> Result<()> {
        self.velocity = import_buffers(store, entries, "momentum")?;
        Ok(())
    }
}

fn export_buffers(
    store: &ParamStore,
    sets: &[(&str, &Vec<Option<Vec<f64>>>)],
) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    for (suffix, bufs) in sets {
        for (i, b) in bufs.iter().enumerate() {
            if let Some(b) = b {
                let id = crate::tensor::ParamId(i);
                out.push((
                    format!("{}.{suffix}", store.name(id)),
                    Tensor::new(store.get(id).shape().to_vec(), b.clone()).unwrap(),
                ));
            }
        }
    }
    out
}

fn import_buffers(
    store: &ParamStore,
    entries: &[(String, Tensor)],
    suffix: &str,
) -> Result<Vec<Option<Vec<f64>>>> {
    let mut bufs = vec![None; store.len()];
    let tail = format!(".{suffix}");
    for (name, t) in entries {
        let Some(param) = name.strip_suffix(&tail) else {
            continue;
        };
        let id = store.find(param).ok_or_else(|| {
            Error::Config(format!("optimizer state for unknown parameter `{param}`"))
        })?;
        if store.get(id).shape() != t.shape() {
            return Err(Error::Config(format!(
                "optimizer state `{name}` has the wrong shape"
            )));
        }
        bufs[id.0] = Some(t.data().to_vec());
    }
    Ok(bufs)
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.t += 1;
        self.m.resize(store.len(), None);
        self.v.resize(store.len(), None);
        let c1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let c2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            let p = store.get_mut(id).data_mut();
            let m = self.m[id.0].get_or_insert_with(|| vec![0.0; p.len()]);
            let v = self.v[id.0].get_or_insert_with(|| vec![0.0; p.len()]);
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= self.lr * mh / (libm::sqrt(vh) + self.eps);
            }
        }
    }

    pub fn export_state(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = export_buffers(store, &[("adam_m", &self.m), ("adam_v", &self.v)]);
        out.push((String::from("adam_step"), Tensor::scalar(self.t as f64)));
        out
    }
}

/// Everything trained by the pretext task, registered in a fixed order.
#[derive(Debug, Clone)]
pub struct PretextModel {
    pub encoder: Encoder,
    pub heads: ProjectionHeads,
    pub relation: Option<RelationNetworkParams>,
}

impl PretextModel {
    pub fn new(store: &mut ParamStore, cfg: &PretextConfig) -> Result<Self> {
        let mut r = rng::stream(cfg.seed, &[domain::INIT]);
        let encoder = Encoder::new(store, &cfg.encoder_config(), &mut r)?;
        let heads = ProjectionHeads::new(store, encoder.feature_dim(), &mut r);
        let relation = cfg
            .method
            .uses_relation()
            .then(|| RelationNetworkParams::new(store, &mut r));
        Ok(PretextModel {
            encoder,
            heads,
            relation,
        })
    }
}

/// One pretext training example: the `t1` view and the 36 `t2` patches.
#[derive(Debug, Clone)]
pub struct PretextSample {
    pub view: Image,
    pub patches: Vec<Image>,
}

/// Builds both views of `img` from a per-sample stream.
pub fn prepare_sample<R: rand::Rng + ?Sized>(
    img: &Image,
    cfg: &PretextConfig,
    rng: &mut R,
) -> Result<PretextSample> {
    let s = cfg.image_size;
    let base = img.resize(s, s)?;
    let jitter = JitterSpec::default();
    let view = apply_t1(&base, &jitter, rng);
    let rect = random_crop_rect(rng, s, s);
    let source = if cfg.pretext_task.uses_frequency() {
        let spec = sample_filter_spec(rng);
        apply_frequency_filter(&base, &spec, rect)?
    } else {
        base
    };
    let crop = prepare_crop(&source, rect, DEFAULT_CROP_SIDE)?;
    let bundle = partition_grid(&crop)?;
    let shuffled = if cfg.pretext_task.uses_crosspatch() {
        let layout = select_focal_sets(rng);
        transform_crosspatch(&bundle, &layout, cfg.focal_mode, rng)?
    } else {
        transform_jigsaw_baseline(&bundle, rng)?
    };
    let jittered = apply_t2_patch_jitter(&shuffled.patches, &jitter, rng)?;
    let side = cfg.architecture.patch_input_side();
    let patches = jittered
        .iter()
        .map(|p| p.resize(side, side))
        .collect::<Result<Vec<_>>>()?;
    Ok(PretextSample { view, patches })
}

fn check_train_set(images: &[Image]) -> Result<()> {
    if images.is_empty() {
        return Err(Error::arg("pretext train split is empty"));
    }
    Ok(())
}

/// Encodes `t1` views of every train image and projects them with `f`.
/// `pass` separates the initial fill from later recomputations.
pub fn init_bank(
    model: &PretextModel,
    store: &ParamStore,
    images: &[Image],
    cfg: &PretextConfig,
    pass: u64,
) -> Result<MemoryBank> {
    check_train_set(images)?;
    let jitter = JitterSpec::default();
    let s = cfg.image_size;
    let mut rows = Vec::with_capacity(images.len());
    for (chunk_i, chunk) in images.chunks(cfg.batch_size.max(1)).enumerate() {
        let views = chunk
            .iter()
            .enumerate()
            .map(|(j, img)| {
                let idx = (chunk_i * cfg.batch_size.max(1) + j) as u64;
                let mut r = rng::stream(cfg.seed, &[domain::BANK_INIT, pass, idx]);
                Ok(apply_t1(&img.resize(s, s)?, &jitter, &mut r))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut g = Graph::new(store, false);
        let x = g.input(images_to_tensor(&views, s)?);
        let out = model.encoder.forward(&mut g, x);
        let v = model.heads.project(&mut g, out.features, Head::FImage);
        for (img, row) in chunk
            .iter()
            .zip(g.value(v).data().chunks(crate::encoder::EMBED_DIM))
        {
            rows.push((String::from(img.id()), Embedding::normalized(row.to_vec())));
        }
    }
    MemoryBank::from_rows(rows, cfg.bank_momentum)
}

/// Loss log line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub report: LossReport,
}

/// Deterministic position of a run: every stream is derived from these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_epoch: usize,
}

#[derive(Debug, Clone)]
pub struct PretextCheckpoint {
    pub config: PretextConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub store: ParamStore,
    pub bank: MemoryBank,
    pub optimizer: Sgd,
    pub rng_state: RngState,
}

impl PretextCheckpoint {
    /// Encoder tensors, for initializing a segmentation model.
    pub fn encoder_weights(&self) -> Vec<(String, Tensor)> {
        self.store.export_prefix(crate::encoder::ENCODER_PREFIX)
    }
}

pub struct PretextOutcome {
    pub checkpoint: PretextCheckpoint,
    pub log: Vec<LogRow>,
}

/// Loss graph for one batch; returns the combined loss node, the report
/// and the detached image embeddings.
fn pretext_loss(
    g: &mut Graph,
    model: &PretextModel,
    cfg: &PretextConfig,
    samples: &[PretextSample],
    candidates: Tensor,
) -> Result<(Var, LossReport, Vec<f64>)> {
    let b = samples.len();
    let views: Vec<Image> = samples.iter().map(|s| s.view.clone()).collect();
    let patches: Vec<Image> = samples
        .iter()
        .flat_map(|s| s.patches.iter().cloned())
        .collect();
    let x1 = g.input(images_to_tensor(&views, cfg.image_size)?);
    let xp = g.input(images_to_tensor(
        &patches,
        cfg.architecture.patch_input_side(),
    )?);
    pretext_loss_on(g, model, cfg, x1, xp, b, candidates)
}

/// Same as the batch loss but from prepared input tensors.
pub fn pretext_loss_on(
    g: &mut Graph,
    model: &PretextModel,
    cfg: &PretextConfig,
    x1: Var,
    xp: Var,
    b: usize,
    candidates: Tensor,
) -> Result<(Var, LossReport, Vec<f64>)> {
    let per_anchor = candidates.shape()[1];
    let w = cfg.level_weight;
    let lambda = cfg.lambda();
    let o1 = model.encoder.forward(g, x1);
    let op = model.encoder.forward(g, xp);
    let v1 = model.heads.project(g, o1.features, Head::FImage);
    let d = model.encoder.feature_dim();
    let pf = g.reshape(op.features, &[b, PATCHES * d]);
    let vp = model.heads.project(g, pf, Head::GPatch);

    let mut report = LossReport {
        rcl_image: None,
        rcl_patch: None,
        rcl_total: None,
        perceptual: None,
        nce_total: None,
        combined: 0.0,
        w,
        lambda,
    };
    let level = |g: &mut Graph, v: Var| -> Var {
        match model.relation {
            Some(rn) => {
                let pairs = g.pair_product(v, candidates.clone());
                let scores = rn.forward(g, pairs);
                g.rcl_loss(scores, per_anchor)
            }
            None => {
                let dots = g.batched_dot(v, candidates.clone());
                let logits = g.scale(dots, 1.0 / cfg.temperature);
                g.softmax_ce_first(logits)
            }
        }
    };
    let li = level(g, v1);
    let lp = level(g, vp);
    let wi = g.scale(li, w);
    let wp = g.scale(lp, 1.0 - w);
    let contrastive = g.add(wi, wp);
    let (ci, cp, ct) = (
        g.value(li).item(),
        g.value(lp).item(),
        g.value(contrastive).item(),
    );
    if model.relation.is_some() {
        report.rcl_image = Some(ci);
        report.rcl_patch = Some(cp);
        report.rcl_total = Some(ct);
    } else {
        report.nce_total = Some(ct);
    }
    let loss = if cfg.method.uses_perceptual() {
        let ti = g.global_avg_pool(o1.tap);
        let tp = g.global_avg_pool(op.tap);
        let perc = g.perceptual(ti, tp, PATCHES);
        report.perceptual = Some(g.value(perc).item());
        let a = g.scale(contrastive, lambda);
        let p = g.scale(perc, 1.0 - lambda);
        g.add(a, p)
    } else {
        contrastive
    };
    report.combined = g.value(loss).item();
    Ok((loss, report, g.value(v1).data().to_vec()))
}

/// Bank candidates for each anchor: its own row first, then `k` negatives.
pub fn gather_candidates<R: rand::Rng + ?Sized>(
    bank: &MemoryBank,
    rows: &[usize],
    k: usize,
    rng: &mut R,
) -> Result<Tensor> {
    let d = bank.dim();
    let mut data = Vec::with_capacity(rows.len() * (k + 1) * d);
    for &i in rows {
        data.extend_from_slice(bank.row(i));
        for n in bank.sample_negative_rows(i, k, rng)? {
            data.extend_from_slice(bank.row(n));
        }
    }
    Tensor::new(vec![rows.len(), k + 1, d], data)
}

fn same_run(a: &PretextConfig, b: &PretextConfig) -> bool {
    let mut a = a.clone();
    a.epochs = b.epochs;
    a == *b
}

/// Runs pretext epochs up to `cfg.epochs`, starting fresh or from `resume`.
pub fn pretext_train(
    images: &[Image],
    cfg: &PretextConfig,
    resume: Option<PretextCheckpoint>,
    pretrained: Option<&[(String, Tensor)]>,
) -> Result<PretextOutcome> {
    cfg.validate()?;
    check_train_set(images)?;
    let n = images.len();
    if cfg.negatives_per_anchor > n - 1 {
        return Err(Error::arg(format!(
            "{} negatives per anchor need at least {} train images, got {n}",
            cfg.negatives_per_anchor,
            cfg.negatives_per_anchor + 1
        )));
    }
    let mut store = ParamStore::new();
    let model = PretextModel::new(&mut store, cfg)?;
    let (start, mut bank, mut opt) = match resume {
        Some(ck) => {
            if !same_run(&ck.config, cfg) {
                return Err(Error::Config(String::from(
                    "checkpoint was written by a different configuration",
                )));
            }
            if ck.store.len() != store.len()
                || store.ids().any(|id| store.name(id) != ck.store.name(id))
            {
                return Err(Error::Config(String::from(
                    "checkpoint parameters do not match the model",
                )));
            }
            if ck.bank.ids()
                != images
                    .iter()
                    .map(|i| String::from(i.id()))
                    .collect::<Vec<_>>()
                    .as_slice()
            {
                return Err(Error::Config(String::from(
                    "checkpoint bank does not match the train set",
                )));
            }
            store = ck.store;
            (ck.rng_state.next_epoch, ck.bank, ck.optimizer)
        }
        None => {
            if let Some(w) = pretrained {
                model.encoder.load_weights(&mut store, w)?;
            }
            let bank = init_bank(&model, &store, images, cfg, 0)?;
            (0, bank, Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay))
        }
    };
    let mut log = Vec::new();
    for epoch in start..cfg.epochs {
        if cfg.bank_recompute && epoch > 0 {
            bank = init_bank(&model, &store, images, cfg, epoch as u64)?;
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(
            cfg.seed,
            &[domain::EPOCH_ORDER, epoch as u64],
        ));
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let samples = batch
                .iter()
                .map(|&i| {
                    let mut r = rng::stream(cfg.seed, &[domain::SAMPLE, epoch as u64, i as u64]);
                    prepare_sample(&images[i], cfg, &mut r)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut nr = rng::stream(cfg.seed, &[domain::NEGATIVES, epoch as u64, step as u64]);
            let candidates = gather_candidates(&bank, batch, cfg.negatives_per_anchor, &mut nr)?;
            let (grads, report, fresh, bn) = {
                let mut g = Graph::new(&store, true);
                let (loss, report, fresh) =
                    pretext_loss(&mut g, &model, cfg, &samples, candidates)?;
                if !report.combined.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        step,
                        ids: batch
                            .iter()
                            .map(|&i| String::from(images[i].id()))
                            .collect(),
                    });
                }
                let grads = g.backward(loss);
                (grads, report, fresh, g.take_bn_updates())
            };
            opt.step(&mut store, &grads);
            apply_bn_updates(&mut store, &bn);
            for (&i, row) in batch.iter().zip(fresh.chunks(bank.dim())) {
                bank.update_row(i, row)?;
            }
            log.push(LogRow {
                epoch,
                step,
                report,
            });
        }
    }
    Ok(PretextOutcome {
        checkpoint: PretextCheckpoint {
            config: cfg.clone(),
            epoch: cfg.epochs,
            store,
            bank,
            optimizer: opt,
            rng_state: RngState {
                seed: cfg.seed,
                next_epoch: cfg.epochs.max(start),
            },
        },
        log,
    })
}

/// An image with its lesion mask, if one is available.
pub type Labeled = (Image, Option<Mask>);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_dsc: f64,
}

pub struct FinetuneOutcome {
    pub model: SegmentationModel,
    /// Weights at the best validation DSC.
    pub store: ParamStore,
    pub best_epoch: usize,
    pub best_val_dsc: f64,
    pub history: Vec<EpochRecord>,
    pub train_count: usize,
}

fn require_masks(items: &[Labeled], split: &str) -> Result<(Vec<Image>, Vec<Mask>)> {
    let mut imgs = Vec::with_capacity(items.len());
    let mut masks = Vec::with_capacity(items.len());
    for (img, m) in items {
        let m = m
            .as_ref()
            .ok_or_else(|| Error::Data(format!("{split} image `{}` has no mask", img.id())))?;
        if (m.height(), m.width()) != (img.height(), img.width()) {
            return Err(Error::Data(format!(
                "mask for `{}` does not match its image size",
                img.id()
            )));
        }
        imgs.push(img.clone());
        masks.push(m.clone());
    }
    Ok((imgs, masks))
}

fn mean_dsc(
    model: &SegmentationModel,
    store: &ParamStore,
    imgs: &[Image],
    masks: &[Mask],
) -> Result<f64> {
    let preds = model.predict(store, imgs)?;
    let mut total = 0.0;
    for (p, t) in preds.iter().zip(masks) {
        total += overlap_metrics(p, t)?.dsc;
    }
    Ok(total / imgs.len() as f64)
}

/// Trains the segmentation network on `cfg.train_fraction` of `train`,
/// selecting the epoch with the best mean validation DSC. `init` supplies
/// encoder weights; without it the encoder starts from random weights.
pub fn finetune_segmentation(
    train: &[Labeled],
    val: &[Labeled],
    init: Option<&[(String, Tensor)]>,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let (train_imgs, train_masks) = require_masks(train, "train")?;
    let (val_imgs, val_masks) = require_masks(val, "val")?;
    if val_imgs.is_empty() {
        return Err(Error::arg("validation split is empty"));
    }
    let spec = SubsetSpec {
        fraction: cfg.train_fraction,
        seed: cfg.seed,
    };
    let idx: Vec<usize> = take_subset(&(0..train_imgs.len()).collect::<Vec<_>>(), spec)?;
    if idx.is_empty() {
        return Err(Error::arg("train fraction selects no images"));
    }
    let s = cfg.image_size;
    let inputs = idx
        .iter()
        .map(|&i| train_imgs[i].resize(s, s))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<Mask> = idx.iter().map(|&i| train_masks[i].resize(s, s)).collect();

    let mut store = ParamStore::new();
    let enc_cfg = EncoderConfig::new(cfg.architecture);
    let model = SegmentationModel::new(
        &mut store,
        &enc_cfg,
        &mut rng::stream(cfg.seed, &[domain::INIT, 1]),
    )?
    .with_input_side(s);
    if let Some(w) = init {
        model.encoder.load_weights(&mut store, w)?;
    }
    let mut opt = Adam::new(cfg.lr_start);
    let mut history = Vec::new();
    let mut dscs = Vec::new();
    let mut best = (0usize, f64::NEG_INFINITY, store.clone());
    for epoch in 0..cfg.epochs {
        opt.lr = poly_lr(epoch, cfg)?;
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        order.shuffle(&mut rng::stream(
            cfg.seed,
            &[domain::FINETUNE_ORDER, epoch as u64],
        ));
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let imgs: Vec<Image> = batch.iter().map(|&i| inputs[i].clone()).collect();
            let tgt: Vec<u8> = batch
                .iter()
                .flat_map(|&i| targets[i].data().iter().copied())
                .collect();
            let (grads, loss, bn) = {
                let mut g = Graph::new(&store, true);
                let x = g.input(images_to_tensor(&imgs, s)?);
                let logits = model.forward(&mut g, x);
                let loss = g.pixel_cross_entropy(logits, tgt);
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        step,
                        ids: imgs.iter().map(|i| String::from(i.id())).collect(),
                    });
                }
                (g.backward(loss), value, g.take_bn_updates())
            };
            opt.step(&mut store, &grads);
            apply_bn_updates(&mut store, &bn);
            loss_sum += loss;
            batches += 1;
        }
        let val_dsc = mean_dsc(&model, &store, &val_imgs, &val_masks)?;
        history.push(EpochRecord {
            epoch: epoch + 1,
            lr: opt.lr,
            train_loss: loss_sum / batches as f64,
            val_dsc,
        });
        dscs.push(val_dsc);
        if val_dsc > best.1 {
            best = (epoch + 1, val_dsc, store.clone());
        }
        if early_stop_check(&dscs, cfg.warmup, cfg.patience) {
            break;
        }
    }
    Ok(FinetuneOutcome {
        model,
        store: best.2,
        best_epoch: best.0,
        best_val_dsc: best.1,
        history,
        train_count: idx.len(),
    })
}

/// Per-image metrics of argmax predictions on `test`.
pub fn evaluate_model(
    model: &SegmentationModel,
    store: &ParamStore,
    test: &[Labeled],
) -> Result<MetricsReport> {
    let (imgs, masks) = require_masks(test, "test")?;
    if imgs.is_empty() {
        return Err(Error::arg("test split is empty"));
    }
    let preds = model.predict(store, &imgs)?;
    let items: Vec<(String, Mask, Mask)> = imgs
        .iter()
        .zip(preds)
        .zip(masks)
        .map(|((i, p), t)| (String::from(i.id()), p, t))
        .collect();
    evaluate(&items)
}
