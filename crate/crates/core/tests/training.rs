use sslus_core::data::generate_synthetic_dataset;
use sslus_core::losses::Method;
use sslus_core::training::*;
use sslus_core::Error;

#[test]
fn poly_schedule_endpoints_and_midpoint() {
    let cfg = FinetuneConfig::full();
    assert_eq!(poly_lr(0, &cfg).unwrap(), 1e-3);
    assert_eq!(poly_lr(cfg.epochs, &cfg).unwrap(), 1e-6);
    let mid = poly_lr(cfg.epochs / 2, &cfg).unwrap();
    let oracle = (1e-3 - 1e-6) * 0.5f64.powf(0.9) + 1e-6;
    assert!((mid - oracle).abs() < 1e-18);
    assert!((mid - 5.3635e-4).abs() < 1e-8);
    assert!(poly_lr(cfg.epochs + 1, &cfg).is_err());
    let mut last = f64::INFINITY;
    for e in 0..=cfg.epochs {
        let lr = poly_lr(e, &cfg).unwrap();
        assert!(lr < last);
        last = lr;
    }
}

#[test]
fn early_stopping_examples() {
    let rising: Vec<f64> = (0..400).map(|i| i as f64).collect();
    for n in 0..=rising.len() {
        assert!(!early_stop_check(&rising[..n], 100, 50));
    }
    let flat = vec![0.5; 151];
    assert!(!early_stop_check(&flat[..150], 100, 50));
    assert!(early_stop_check(&flat, 100, 50));
    assert!(!early_stop_check(&flat[..99], 100, 50));
    // best at epoch 120: allowed to run through epoch 170
    let mut h = vec![0.1; 200];
    h[119] = 0.9;
    assert!(!early_stop_check(&h[..170], 100, 50));
    assert!(early_stop_check(&h[..171], 100, 50));
}

#[test]
fn profiles_follow_the_reference_settings() {
    let full = PretextConfig::full();
    assert_eq!(
        (
            full.epochs,
            full.batch_size,
            full.negatives_per_anchor,
            full.image_size
        ),
        (2000, 16, 4096, 224)
    );
    assert_eq!(full.seed, 42);
    let ft = FinetuneConfig::full();
    assert_eq!((ft.epochs, ft.warmup, ft.patience), (500, 100, 50));
    assert_eq!((ft.lr_start, ft.lr_end, ft.lr_power), (1e-3, 1e-6, 0.9));
    let desk = PretextConfig::desk();
    assert_eq!(
        (
            desk.epochs,
            desk.batch_size,
            desk.negatives_per_anchor,
            desk.image_size
        ),
        (50, 8, 8, 96)
    );
    assert_eq!(FinetuneConfig::desk().epochs, 60);
    desk.validate().unwrap();
    full.validate().unwrap();
    ft.validate().unwrap();
}

#[test]
fn config_errors() {
    let mut c = PretextConfig::desk();
    c.lr = 0.02;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let mut c = PretextConfig::desk();
    c.lambda = Some(1.5);
    assert!(c.validate().is_err());
    let c = PretextConfig {
        method: Method::PirlPercep,
        ..PretextConfig::desk()
    };
    assert_eq!(c.lambda(), 0.75);
    let mut f = FinetuneConfig::desk();
    f.train_fraction = 0.0;
    assert!(f.validate().is_err());
    let json = r#"{"epochs": 3, "bogus": 1}"#;
    assert!(serde_json::from_str::<PretextConfig>(json).is_err());
    let partial: PretextConfig = serde_json::from_str(r#"{"epochs": 3}"#).unwrap();
    assert_eq!(partial.epochs, 3);
    assert_eq!(partial.lr, PretextConfig::desk().lr);
}

fn small_pretext(method: Method) -> PretextConfig {
    PretextConfig {
        epochs: 2,
        batch_size: 4,
        negatives_per_anchor: 3,
        method,
        image_size: 48,
        ..PretextConfig::desk()
    }
}

#[test]
fn pretext_replays_exactly() {
    let (imgs, _) = generate_synthetic_dataset(8, (48, 48), 3).unwrap();
    let cfg = small_pretext(Method::RclPercep);
    let a = pretext_train(&imgs, &cfg, None, None).unwrap();
    let b = pretext_train(&imgs, &cfg, None, None).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.log.len(), 4);
    assert_eq!(a.checkpoint.bank, b.checkpoint.bank);
    assert_eq!(a.checkpoint.epoch, 2);
    assert!(a.checkpoint.bank.max_norm_error() < 1e-5);
    for r in &a.log {
        let rep = r.report;
        assert!(rep.rcl_image.is_some() && rep.rcl_patch.is_some() && rep.perceptual.is_some());
        assert!(rep.nce_total.is_none());
        let expected = 0.1 * rep.rcl_total.unwrap() + 0.9 * rep.perceptual.unwrap();
        assert!((rep.combined - expected).abs() < 1e-12);
    }
}

#[test]
fn pirl_reports_nce_only() {
    let (imgs, _) = generate_synthetic_dataset(8, (48, 48), 4).unwrap();
    let out = pretext_train(&imgs, &small_pretext(Method::Pirl), None, None).unwrap();
    for r in &out.log {
        assert!(
            r.report.rcl_image.is_none()
                && r.report.rcl_patch.is_none()
                && r.report.rcl_total.is_none()
        );
        assert!(r.report.perceptual.is_none());
        assert_eq!(Some(r.report.combined), r.report.nce_total);
    }
}

#[test]
fn resume_matches_uninterrupted_run() {
    let (imgs, _) = generate_synthetic_dataset(8, (48, 48), 5).unwrap();
    let cfg = small_pretext(Method::RclPercep);
    let full = pretext_train(&imgs, &cfg, None, None).unwrap();
    let first = pretext_train(
        &imgs,
        &PretextConfig {
            epochs: 1,
            ..cfg.clone()
        },
        None,
        None,
    )
    .unwrap();
    let rest = pretext_train(&imgs, &cfg, Some(first.checkpoint), None).unwrap();
    assert_eq!(&full.log[2..], &rest.log[..]);
    assert_eq!(full.checkpoint.bank, rest.checkpoint.bank);
}

#[test]
fn finetune_contracts() {
    let (imgs, masks) = generate_synthetic_dataset(12, (40, 40), 6).unwrap();
    let items: Vec<Labeled> = imgs.into_iter().zip(masks.into_iter().map(Some)).collect();
    let (train, val) = items.split_at(8);
    let cfg = FinetuneConfig {
        epochs: 3,
        warmup: 1,
        patience: 1,
        train_fraction: 0.5,
        batch_size: 4,
        image_size: 32,
        ..FinetuneConfig::desk()
    };
    let out = finetune_segmentation(train, val, None, &cfg).unwrap();
    assert_eq!(out.train_count, 4);
    assert!(!out.history.is_empty() && out.history.len() <= 3);
    let preds = out.model.predict(&out.store, &[val[0].0.clone()]).unwrap();
    assert_eq!((preds[0].height(), preds[0].width()), (40, 40));
    assert!(preds[0].data().iter().all(|&v| v <= 1));
    let report = evaluate_model(&out.model, &out.store, val).unwrap();
    assert_eq!(report.per_image.len(), 4);

    let mut unlabeled = train.to_vec();
    unlabeled[2].1 = None;
    assert!(matches!(
        finetune_segmentation(&unlabeled, val, None, &cfg),
        Err(Error::Data(_))
    ));
}
