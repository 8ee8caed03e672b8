//! Command-line entry points.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use sslus_core::data::{
    default_split, generate_synthetic_dataset, synthetic_id, DatasetManifest, ManifestEntry, Split,
};
use sslus_core::losses::Method;
use sslus_core::training::{
    evaluate_model, finetune_segmentation, pretext_train, FinetuneConfig, Labeled, PretextConfig,
    Profile,
};

use crate::checkpoint::{self, SavedModel};
use crate::error::{Error, Result};
use crate::manifest::{write_manifest, Dataset};
use crate::report::{self, AblationRow};
use crate::{overlay, png, preview};

pub const OUTPUT_ENV: &str = "SSLUS_OUTPUT_DIR";
pub const PRETEXT_CHECKPOINT: &str = "pretext.ckpt";
pub const MODEL_CHECKPOINT: &str = "model.ckpt";
pub const LAMBDA_GRID: [f64; 4] = [0.1, 0.25, 0.5, 0.75];

#[derive(Debug, Parser)]
#[command(
    name = "sslus",
    version,
    about = "Self-supervised pretraining and segmentation for breast ultrasound"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProfileArg {
    Desk,
    Full,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Desk => Profile::Desk,
            ProfileArg::Full => Profile::Full,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Output directory. Defaults to `$SSLUS_OUTPUT_DIR/<command>`.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    pub overwrite: bool,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Self-supervised pretext training on the train split.
    PretextTrain(PretextArgs),
    /// Segmentation fine-tuning, from a pretext checkpoint or from scratch.
    Finetune(FinetuneArgs),
    /// Scores a fine-tuned model on the test split.
    Evaluate(EvaluateArgs),
    /// Writes frequency-filter and Cross-patch previews for one image.
    AugmentPreview(PreviewArgs),
    /// Pretext plus fine-tuning for each lambda in the grid.
    AblateLambda(AblateArgs),
    /// Writes a synthetic lesion dataset and its manifest.
    MakeSynthetic(SyntheticArgs),
}

#[derive(Debug, Args)]
pub struct PretextArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ProfileArg::Desk)]
    pub profile: ProfileArg,
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Continue from a pretext checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ProfileArg::Desk)]
    pub profile: ProfileArg,
    /// Checkpoint holding encoder weights; omit for the supervised baseline.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Also write one overlay PNG per test image.
    #[arg(long)]
    pub overlays: bool,
}

#[derive(Debug, Args)]
pub struct PreviewArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub image: PathBuf,
    /// Explicit filter, e.g. `inner=20,outer=30,x=2`. Repeatable.
    #[arg(long)]
    pub filter: Vec<String>,
    /// Number of additional randomly drawn filters.
    #[arg(long, default_value_t = 0)]
    pub random: usize,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub manifest: PathBuf,
    /// JSON object with optional `pretext` and `finetune` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ProfileArg::Desk)]
    pub profile: ProfileArg,
    /// Methods to sweep. Defaults to both perceptual variants.
    #[arg(long)]
    pub method: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long)]
    pub pretext_epochs: Option<usize>,
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SyntheticArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    #[arg(long, default_value_t = 96)]
    pub size: usize,
}

/// Runs one command line and returns its exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &anyhow::Error) -> i32 {
    let usage = match e.downcast_ref::<Error>() {
        Some(err) => err.is_usage(),
        None => e.downcast_ref::<sslus_core::Error>().is_some_and(|err| {
            matches!(
                err,
                sslus_core::Error::Config(_) | sslus_core::Error::InvalidArgument(_)
            )
        }),
    };
    if usage {
        2
    } else {
        1
    }
}

pub fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::PretextTrain(a) => cmd_pretext_train(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::AugmentPreview(a) => cmd_augment_preview(a),
        Command::AblateLambda(a) => cmd_ablate_lambda(a),
        Command::MakeSynthetic(a) => cmd_make_synthetic(a),
    }
}

/// Resolves and prepares the output directory, refusing to clobber.
pub fn output_dir(common: &Common, command: &str) -> Result<PathBuf> {
    let dir = match &common.output {
        Some(p) => p.clone(),
        None => std::env::var_os(OUTPUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("sslus-output"))
            .join(command),
    };
    if dir.exists() {
        let mut entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        if entries.next().is_some() && !common.overwrite {
            return Err(Error::Config(format!(
                "output directory {} is not empty; pass --overwrite to replace its contents",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Profile defaults, then file keys, then flag overrides.
pub fn merge_config<T: Serialize + DeserializeOwned>(
    base: &T,
    file: Option<&Value>,
    flags: Map<String, Value>,
) -> Result<T> {
    let mut merged = match serde_json::to_value(base).expect("configs serialize") {
        Value::Object(m) => m,
        _ => unreachable!("configs are structs"),
    };
    if let Some(v) = file {
        let obj = v
            .as_object()
            .ok_or_else(|| Error::Config("config file must hold a JSON object".into()))?;
        merged.extend(obj.clone());
    }
    merged.extend(flags);
    serde_json::from_value(Value::Object(merged)).map_err(|e| Error::Config(e.to_string()))
}

fn flag<T: Serialize>(flags: &mut Map<String, Value>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        flags.insert(
            key.into(),
            serde_json::to_value(v).expect("flag values serialize"),
        );
    }
}

fn parse_method(s: &str) -> Result<Method> {
    Method::parse(s).ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
}

fn check_lambda(l: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&l) {
        return Err(Error::Config(format!("lambda {l} outside [0, 1]")));
    }
    Ok(())
}

pub fn pretext_config(a: &PretextArgs) -> Result<PretextConfig> {
    let file = a.config.as_deref().map(read_json).transpose()?;
    let mut flags = Map::new();
    if let Some(m) = &a.method {
        flag(&mut flags, "method", Some(parse_method(m)?));
    }
    if let Some(l) = a.lambda {
        check_lambda(l)?;
    }
    flag(&mut flags, "lambda", a.lambda);
    flag(&mut flags, "epochs", a.epochs);
    flag(&mut flags, "lr", a.lr);
    flags.insert("seed".into(), a.common.seed.into());
    let cfg: PretextConfig = merge_config(
        &PretextConfig::for_profile(a.profile.into()),
        file.as_ref(),
        flags,
    )?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn finetune_config(a: &FinetuneArgs) -> Result<FinetuneConfig> {
    let file = a.config.as_deref().map(read_json).transpose()?;
    let mut flags = Map::new();
    flag(&mut flags, "train_fraction", a.fraction);
    flag(&mut flags, "epochs", a.epochs);
    flags.insert("seed".into(), a.common.seed.into());
    let cfg: FinetuneConfig = merge_config(
        &FinetuneConfig::for_profile(a.profile.into()),
        file.as_ref(),
        flags,
    )?;
    cfg.validate()?;
    Ok(cfg)
}

fn pretext_images(manifest: &Path) -> Result<Vec<sslus_core::image::Image>> {
    Dataset::open(manifest)?.load_images(Split::Train)
}

fn cmd_pretext_train(a: PretextArgs) -> anyhow::Result<()> {
    let cfg = pretext_config(&a)?;
    let resume = a
        .resume
        .as_deref()
        .map(checkpoint::load_pretext)
        .transpose()?;
    let pretrained = cfg
        .pretrained_weights
        .as_deref()
        .map(|p| checkpoint::load_encoder_weights(Path::new(p)))
        .transpose()?;
    let images = pretext_images(&a.manifest)?;
    let out = output_dir(&a.common, "pretext-train")?;
    report::write_json(&out.join("config.json"), &cfg)?;
    eprintln!(
        "pretext training on {} images for {} epochs",
        images.len(),
        cfg.epochs
    );
    let outcome =
        pretext_train(&images, &cfg, resume, pretrained.as_deref()).map_err(Error::from)?;
    checkpoint::save_pretext(&outcome.checkpoint, &out.join(PRETEXT_CHECKPOINT))?;
    report::write_loss_csv(&out.join("loss.csv"), &outcome.log)?;
    Ok(())
}

#[derive(Serialize)]
struct FinetuneSummary<'a> {
    config: &'a FinetuneConfig,
    init: Option<String>,
    train_available: usize,
    train_count: usize,
    best_epoch: usize,
    best_val_dsc: f64,
}

fn cmd_finetune(a: FinetuneArgs) -> anyhow::Result<()> {
    let cfg = finetune_config(&a)?;
    let init = a
        .init
        .as_deref()
        .map(checkpoint::load_encoder_weights)
        .transpose()?;
    let ds = Dataset::open(&a.manifest)?;
    let train = ds.load_split(Split::Train)?;
    let val = ds.load_split(Split::Val)?;
    let out = output_dir(&a.common, "finetune")?;
    report::write_json(&out.join("config.json"), &cfg)?;
    match &a.init {
        Some(p) => eprintln!("initializing encoder from {}", p.display()),
        None => eprintln!("no --init given: training the supervised baseline from scratch"),
    }
    let res = finetune_segmentation(&train, &val, init.as_deref(), &cfg).map_err(Error::from)?;
    eprintln!(
        "training on {} of {} labelled train images",
        res.train_count,
        train.len()
    );
    report::write_curve_csv(&out.join("val_curve.csv"), &res.history)?;
    report::write_json(
        &out.join("finetune.json"),
        &FinetuneSummary {
            config: &cfg,
            init: a.init.as_ref().map(|p| p.display().to_string()),
            train_available: train.len(),
            train_count: res.train_count,
            best_epoch: res.best_epoch,
            best_val_dsc: res.best_val_dsc,
        },
    )?;
    let saved = SavedModel {
        config: cfg,
        best_epoch: res.best_epoch,
        model: res.model,
        store: res.store,
    };
    checkpoint::save_model(&saved, &out.join(MODEL_CHECKPOINT))?;
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> anyhow::Result<()> {
    let saved = checkpoint::load_model(&a.model)?;
    let test: Vec<Labeled> = Dataset::open(&a.manifest)?.load_split(Split::Test)?;
    let out = output_dir(&a.common, "evaluate")?;
    let metrics = evaluate_model(&saved.model, &saved.store, &test).map_err(Error::from)?;
    report::write_metrics_csv(&out.join("metrics.csv"), &metrics)?;
    report::write_json(&out.join("metrics.json"), &metrics)?;
    if a.overlays {
        let dir = out.join("overlays");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let images: Vec<_> = test.iter().map(|(i, _)| i.clone()).collect();
        let preds = saved
            .model
            .predict(&saved.store, &images)
            .map_err(Error::from)?;
        for ((img, truth), pred) in test.iter().zip(&preds) {
            let truth = truth.as_ref().expect("evaluate_model checked masks");
            overlay::save_overlay(img, pred, truth, &dir.join(format!("{}.png", img.id())))?;
        }
    }
    let d = metrics.aggregate.dsc;
    eprintln!(
        "test DSC {:.4} +/- {:.4} over {} images",
        d.mean,
        d.sd,
        metrics.per_image.len()
    );
    Ok(())
}

fn cmd_augment_preview(a: PreviewArgs) -> anyhow::Result<()> {
    let filters = a
        .filter
        .iter()
        .map(|s| preview::parse_filter(s))
        .collect::<Result<Vec<_>>>()?;
    if filters.is_empty() && a.random == 0 {
        return Err(Error::Config("give at least one --filter or --random N".into()).into());
    }
    let img = png::load_image(&a.image)?;
    let out = output_dir(&a.common, "augment-preview")?;
    let written = preview::write_preview(&img, &filters, a.random, a.common.seed, &out)?;
    eprintln!("wrote {} images to {}", written.len(), out.display());
    Ok(())
}

fn cmd_ablate_lambda(a: AblateArgs) -> anyhow::Result<()> {
    let file = a.config.as_deref().map(read_json).transpose()?;
    let section = |k: &str| file.as_ref().and_then(|v| v.get(k)).cloned();
    if let Some(obj) = file.as_ref().and_then(Value::as_object) {
        if let Some(k) = obj.keys().find(|k| *k != "pretext" && *k != "finetune") {
            return Err(Error::Config(format!("unknown config section `{k}`")).into());
        }
    }
    let profile: Profile = a.profile.into();
    let mut pflags = Map::new();
    flag(&mut pflags, "epochs", a.pretext_epochs);
    pflags.insert("seed".into(), a.common.seed.into());
    let base_pre: PretextConfig = merge_config(
        &PretextConfig::for_profile(profile),
        section("pretext").as_ref(),
        pflags,
    )?;
    let mut fflags = Map::new();
    flag(&mut fflags, "epochs", a.finetune_epochs);
    flag(&mut fflags, "train_fraction", a.fraction);
    fflags.insert("seed".into(), a.common.seed.into());
    let ft: FinetuneConfig = merge_config(
        &FinetuneConfig::for_profile(profile),
        section("finetune").as_ref(),
        fflags,
    )?;
    ft.validate()?;

    let methods = if a.method.is_empty() {
        vec![Method::PirlPercep, Method::RclPercep]
    } else {
        a.method
            .iter()
            .map(|m| parse_method(m))
            .collect::<Result<_>>()?
    };
    if let Some(m) = methods.iter().find(|m| !m.uses_perceptual()) {
        return Err(Error::Config(format!(
            "ablation needs a perceptual method, got `{}`",
            m.as_str()
        ))
        .into());
    }
    let lambdas = a.lambdas.clone().unwrap_or_else(|| LAMBDA_GRID.to_vec());
    for &l in &lambdas {
        check_lambda(l)?;
    }
    let mut configs = Vec::new();
    for &m in &methods {
        for &l in &lambdas {
            let cfg = PretextConfig {
                method: m,
                lambda: Some(l),
                ..base_pre.clone()
            };
            cfg.validate()?;
            configs.push(cfg);
        }
    }

    let ds = Dataset::open(&a.manifest)?;
    let train = ds.load_split(Split::Train)?;
    let val = ds.load_split(Split::Val)?;
    let images: Vec<_> = train.iter().map(|(i, _)| i.clone()).collect();
    let out = output_dir(&a.common, "ablate-lambda")?;
    report::write_json(
        &out.join("config.json"),
        &serde_json::json!({ "pretext": base_pre, "finetune": ft }),
    )?;
    let mut rows = Vec::new();
    for cfg in &configs {
        let pre = pretext_train(&images, cfg, None, None).map_err(Error::from)?;
        let weights = pre.checkpoint.encoder_weights();
        let res = finetune_segmentation(&train, &val, Some(&weights), &ft).map_err(Error::from)?;
        eprintln!(
            "{} lambda {}: val DSC {:.4}",
            cfg.method.as_str(),
            cfg.lambda(),
            res.best_val_dsc
        );
        rows.push(AblationRow {
            method: cfg.method.as_str().to_string(),
            lambda: cfg.lambda(),
            dsc: res.best_val_dsc,
        });
        report::write_ablation_csv(&out.join("ablation.csv"), &rows)?;
    }
    Ok(())
}

fn cmd_make_synthetic(a: SyntheticArgs) -> anyhow::Result<()> {
    let (images, masks) = generate_synthetic_dataset(a.count, (a.size, a.size), a.common.seed)
        .map_err(Error::from)?;
    let out = output_dir(&a.common, "make-synthetic")?;
    for sub in ["images", "masks"] {
        let d = out.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut entries = Vec::with_capacity(a.count);
    for (i, (img, mask)) in images.iter().zip(&masks).enumerate() {
        let id = synthetic_id(i);
        let image_path = format!("images/{id}.png");
        let mask_path = format!("masks/{id}.png");
        png::save_image(img, &out.join(&image_path))?;
        png::save_mask(mask, &out.join(&mask_path))?;
        entries.push(ManifestEntry {
            image_path,
            mask_path: Some(mask_path),
            split: default_split(i, a.count),
        });
    }
    let manifest = DatasetManifest::new("synthetic", entries).map_err(Error::from)?;
    write_manifest(&out.join("manifest.csv"), &manifest)?;
    eprintln!("wrote {} synthetic images to {}", a.count, out.display());
    Ok(())
}
