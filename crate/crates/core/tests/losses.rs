use rand::Rng;
use sslus_core::encoder::Embedding;
use sslus_core::losses::*;
use sslus_core::rng;
use sslus_core::tensor::{ParamStore, Tensor};

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

fn unit(i: usize, dim: usize) -> Embedding {
    let mut v = vec![0.0; dim];
    v[i] = 1.0;
    Embedding::from_unit(v).unwrap()
}

fn random_unit(r: &mut impl Rng, dim: usize) -> Embedding {
    Embedding::normalized((0..dim).map(|_| r.random::<f64>() - 0.5).collect())
}

#[test]
fn rcl_hand_values() {
    assert_eq!(rcl_loss(&[1.0], &[vec![0.0]]).unwrap(), 0.0);
    assert!(close(rcl_loss(&[0.7], &[vec![0.2]]).unwrap(), 0.13));
    assert!(close(rcl_loss(&[0.5], &[vec![0.5]]).unwrap(), 0.5));
    // two anchors with two negatives each: mean over anchors of (1-s)^2 + mean(s-^2)
    let v = rcl_loss(&[0.9, 0.6], &[vec![0.1, 0.3], vec![0.0, 0.4]]).unwrap();
    let oracle =
        ((0.1f64.powi(2) + (0.01 + 0.09) / 2.0) + (0.4f64.powi(2) + (0.0 + 0.16) / 2.0)) / 2.0;
    assert!(close(v, oracle));
    assert!(rcl_loss(&[], &[]).is_err());
    assert!(rcl_loss(&[0.5], &[vec![]]).is_err());
}

#[test]
fn total_rcl_hand_values() {
    assert!(close(total_rcl(0.13, 0.05, 0.5).unwrap(), 0.09));
    assert_eq!(total_rcl(0.13, 0.05, 1.0).unwrap(), 0.13);
    assert!(close(total_rcl(0.3, 0.3, 0.5).unwrap(), 0.3));
    assert!(total_rcl(0.1, 0.1, 1.5).is_err());
    assert!(total_rcl(0.1, 0.1, -0.1).is_err());
}

#[test]
fn nce_hand_values() {
    let a = unit(0, 4);
    let e = std::f64::consts::E;
    let v = nce_loss(&a, &a, &[unit(1, 4)], 1.0).unwrap();
    assert!(close(v, -(e / (e + 1.0)).ln()));
    assert!((v - 0.3133).abs() < 1e-4);

    for k in [1usize, 3, 8] {
        let negs = vec![a.clone(); k];
        assert!(close(
            nce_loss(&a, &a, &negs, 0.07).unwrap(),
            ((k + 1) as f64).ln()
        ));
    }
    assert!(nce_loss(&a, &a, &[], 1.0).is_err());
    assert!(nce_loss(&a, &a, &[unit(1, 4)], 0.0).is_err());
}

#[test]
fn nce_decreases_as_positive_aligns() {
    let a = unit(0, 3);
    let negs = [unit(1, 3), unit(2, 3)];
    let mut last = f64::INFINITY;
    for step in 0..=10 {
        let t = step as f64 / 10.0 * std::f64::consts::FRAC_PI_2;
        let p = Embedding::normalized(vec![t.sin(), 0.0, t.cos()]);
        let v = nce_loss(&a, &p, &negs, 0.5).unwrap();
        if step > 0 {
            assert!(v < last, "not decreasing at step {step}");
        }
        last = v;
    }
}

#[test]
fn perceptual_hand_values() {
    let img = vec![0.1, 0.2, 0.3, 0.4];
    let same = vec![img.clone(); 36];
    assert_eq!(perceptual_loss(&img, &same).unwrap(), 0.0);
    let mut one_off = same.clone();
    one_off[7] = img.iter().map(|v| v + 0.6).collect();
    assert!(close(perceptual_loss(&img, &one_off).unwrap(), 0.01));

    let mut r = rng::stream(1, &[]);
    let taps: Vec<Vec<f64>> = (0..36)
        .map(|_| (0..4).map(|_| r.random()).collect())
        .collect();
    let mut shuffled = taps.clone();
    shuffled.reverse();
    shuffled.swap(0, 20);
    let a = perceptual_loss(&img, &taps).unwrap();
    let b = perceptual_loss(&img, &shuffled).unwrap();
    assert!((a - b).abs() < 1e-15);
    assert!(perceptual_loss(&img, &[vec![0.0; 3]]).is_err());
}

#[test]
fn combined_hand_values_and_defaults() {
    assert!(close(combined_loss(0.09, 0.2, 0.1).unwrap(), 0.189));
    assert_eq!(combined_loss(0.09, 0.2, 1.0).unwrap(), 0.09);
    assert!(combined_loss(0.09, 0.2, 1.1).is_err());
    assert_eq!(Method::RclPercep.default_lambda(), 0.1);
    assert_eq!(Method::PirlPercep.default_lambda(), 0.75);
    assert_eq!(RCL_PERCEP_LAMBDA, 0.1);
    assert_eq!(PIRL_PERCEP_LAMBDA, 0.75);
}

#[test]
fn method_names_roundtrip() {
    for m in Method::ALL {
        assert_eq!(Method::parse(m.as_str()), Some(m));
    }
    assert_eq!(Method::parse("rcl_percep"), Some(Method::RclPercep));
    assert_eq!(Method::parse("simclr"), None);
    assert!(Method::Rcl.uses_relation() && !Method::Pirl.uses_relation());
    assert!(Method::PirlPercep.uses_perceptual() && !Method::Rcl.uses_perceptual());
}

#[test]
fn relation_scores_in_open_unit_interval() {
    let mut store = ParamStore::new();
    let net = RelationNetworkParams::new(&mut store, &mut rng::stream(3, &[]));
    let mut r = rng::stream(4, &[]);
    for _ in 0..200 {
        let (a, b) = (random_unit(&mut r, 128), random_unit(&mut r, 128));
        let s = relation_score(&a, &b, &net, &store).unwrap();
        assert!(s > 0.0 && s < 1.0);
    }
    assert!(relation_score(&unit(0, 64), &unit(0, 64), &net, &store).is_err());
}

#[test]
fn zeroed_relation_network_scores_half() {
    let mut store = ParamStore::new();
    let net = RelationNetworkParams::new(&mut store, &mut rng::stream(5, &[]));
    for id in [
        net.layer1.weight,
        net.layer1.bias.unwrap(),
        net.layer2.weight,
        net.layer2.bias.unwrap(),
    ] {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::zeros(&shape);
    }
    let mut r = rng::stream(6, &[]);
    for _ in 0..10 {
        let s = relation_score(
            &random_unit(&mut r, 128),
            &random_unit(&mut r, 128),
            &net,
            &store,
        )
        .unwrap();
        assert_eq!(s, 0.5);
    }
}

#[test]
fn relation_score_matches_manual_forward() {
    let mut store = ParamStore::new();
    let net = RelationNetworkParams::new(&mut store, &mut rng::stream(7, &[]));
    let mut r = rng::stream(8, &[]);
    let (a, b) = (random_unit(&mut r, 128), random_unit(&mut r, 128));
    let prod: Vec<f64> = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| 128.0 * x * y)
        .collect();
    let (w1, b1) = (
        store.get(net.layer1.weight).data(),
        store.get(net.layer1.bias.unwrap()).data(),
    );
    let (w2, b2) = (
        store.get(net.layer2.weight).data(),
        store.get(net.layer2.bias.unwrap()).data(),
    );
    let hidden: Vec<f64> = (0..RELATION_HIDDEN)
        .map(|j| (b1[j] + (0..128).map(|i| w1[j * 128 + i] * prod[i]).sum::<f64>()).max(0.0))
        .collect();
    let z = b2[0] + hidden.iter().zip(w2).map(|(h, w)| h * w).sum::<f64>();
    let oracle = 1.0 / (1.0 + (-z).exp());
    assert!(close(relation_score(&a, &b, &net, &store).unwrap(), oracle));
}
