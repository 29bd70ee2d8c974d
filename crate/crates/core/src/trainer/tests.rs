use rand::Rng as _;

use super::*;
use crate::model::{ema_update, extract_features, linear_posterior, prototype_posterior};

#[test]
fn variant_flags() {
    assert!(!Variant::SupervisedOnly.unlabeled());
    assert!(!Variant::ProtoOnly.linear_loss());
    assert!(!Variant::NoProtoUpdate.proto_update());
    assert_eq!(Variant::ProtoOnly.primary_head(), Head::Prototype);
    for v in Variant::ALL {
        assert_eq!(Variant::ALL[v.index()], v);
    }
}

fn random_image(h: usize, w: usize, rng: &mut Rng) -> Image {
    Image {
        height: h,
        width: w,
        data: (0..h * w * 3).map(|_| rng.gen::<f32>()).collect(),
    }
}

fn random_sample(h: usize, w: usize, classes: u8, rng: &mut Rng) -> SegSample {
    SegSample {
        image: random_image(h, w, rng),
        label: (0..h * w).map(|_| rng.gen_range(0..classes)).collect(),
        modes: vec![0; h * w],
        sample_id: 0,
    }
}

fn random_bank(classes: usize, k: usize, dim: usize, rng: &mut Rng) -> PrototypeBank<f64> {
    let t = Tensor::from_fn(&[classes * k, dim], |_| rng.gen_range(-1.0..1.0));
    PrototypeBank::from_prototypes(t, classes, k, 0.99).unwrap()
}

fn random_pseudo(h: usize, w: usize, classes: u8, p_valid: f64, rng: &mut Rng) -> PseudoLabelMap<f64> {
    let confidence: Vec<f64> = (0..h * w).map(|_| rng.gen()).collect();
    PseudoLabelMap {
        height: h,
        width: w,
        labels: (0..h * w).map(|_| rng.gen_range(0..classes)).collect(),
        valid: confidence.iter().map(|&c| c < p_valid).collect(),
        confidence,
    }
}

fn clamped_nll(p: f64) -> f64 {
    -p.clamp(CE_EPS, 1.0 - CE_EPS).ln()
}

#[test]
fn unlabeled_loss_matches_scalar_loop() {
    let mut rng = rng::stream(11, 0, 0);
    let (h, w, c) = (16, 16, 4);
    let net = Network::<f64>::init(c, 8, 3);
    let bank = random_bank(c, 3, 8, &mut rng);
    let images: Vec<Image> = (0..2).map(|_| random_image(h, w, &mut rng)).collect();
    let pseudo: Vec<_> = (0..2).map(|_| random_pseudo(h, w, c as u8, 0.6, &mut rng)).collect();
    let out = unlabeled_step(&net, &bank, &images, &pseudo, Heads::BOTH, 0.1).unwrap();

    let mut sum = 0.0;
    let mut n_valid = 0usize;
    for (img, m) in images.iter().zip(&pseudo) {
        let f = extract_features(&net, img).unwrap();
        let lin = linear_posterior(&net.head, &f).unwrap();
        let proto = prototype_posterior(&bank, &f, 0.1).unwrap();
        for p in 0..h * w {
            if m.valid[p] {
                let t = m.labels[p] as usize;
                sum += clamped_nll(lin.pixel(p)[t]) + clamped_nll(proto.pixel(p)[t]);
                n_valid += 1;
            }
        }
    }
    let oracle = sum / n_valid.max(1) as f64;
    assert!((out.loss - oracle).abs() < 1e-9, "{} vs {oracle}", out.loss);
}

#[test]
fn labeled_loss_gradient_matches_finite_differences() {
    let mut rng = rng::stream(12, 0, 0);
    let mut net = Network::<f64>::init(3, 4, 5);
    let bank = random_bank(3, 2, 4, &mut rng);
    let batch = vec![random_sample(6, 6, 3, &mut rng), random_sample(6, 6, 3, &mut rng)];
    let out = labeled_step(&net, &bank, &batch, Heads::BOTH, 0.5).unwrap();
    let eps = 1e-5;
    for (pi, count) in [(0, 6), (2, 6), (6, 4), (7, 2), (8, 4)] {
        for _ in 0..count {
            let i = rng.gen_range(0..net.params()[pi].len());
            let orig = net.params()[pi].data()[i];
            net.params_mut()[pi].data_mut()[i] = orig + eps;
            let up = labeled_step(&net, &bank, &batch, Heads::BOTH, 0.5).unwrap().loss;
            net.params_mut()[pi].data_mut()[i] = orig - eps;
            let down = labeled_step(&net, &bank, &batch, Heads::BOTH, 0.5).unwrap().loss;
            net.params_mut()[pi].data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * eps);
            let an = out.grads[pi].data()[i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(rel < 1e-3, "param {pi}[{i}]: autodiff {an} vs fd {fd}");
        }
    }
}

#[test]
fn uniform_predictions_give_two_log_c() {
    let mut rng = rng::stream(13, 0, 0);
    let c = 4;
    let mut net = Network::<f64>::init(c, 8, 1);
    net.params_mut()[8].data_mut().iter_mut().for_each(|v| *v = 0.0);
    let same = Tensor::full(&[c * 2, 8], 0.5);
    let bank = PrototypeBank::from_prototypes(same, c, 2, 0.99).unwrap();
    let batch = vec![random_sample(8, 8, c as u8, &mut rng)];
    let out = labeled_step(&net, &bank, &batch, Heads::BOTH, 0.1).unwrap();
    assert!((out.loss - 2.0 * (c as f64).ln()).abs() < 1e-12, "{}", out.loss);
}

#[test]
fn predictions_at_invalid_pixels_do_not_change_unlabeled_loss() {
    let mut rng = rng::stream(14, 0, 0);
    let (h, w, c, d) = (8, 8, 4, 6);
    let net = Network::<f64>::init(c, d, 2);
    let bank = random_bank(c, 2, d, &mut rng);
    let pseudo = vec![random_pseudo(h, w, c as u8, 0.5, &mut rng)];
    let feats: Vec<f64> = (0..h * w * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let loss_of = |feats: Vec<f64>| {
        let mut g = Graph::new();
        let bound = net.bind(&mut g, true);
        let protos = g.constant(bank.prototypes().clone());
        let f = g.constant(Tensor::new(&[h * w, d], feats).unwrap());
        let l = unlabeled_loss_var(&mut g, &bound, protos, &bank, f, &pseudo, Heads::BOTH, 0.1).unwrap();
        g.value(l).item().unwrap()
    };
    let base = loss_of(feats.clone());
    assert!(base > 0.0);
    let mut perturbed = feats.clone();
    for p in (0..h * w).filter(|&p| !pseudo[0].valid[p]) {
        perturbed[p * d..(p + 1) * d].iter_mut().for_each(|v| *v = rng.gen_range(-5.0..5.0));
    }
    assert_ne!(perturbed, feats);
    assert_eq!(loss_of(perturbed).to_bits(), base.to_bits());
}

#[test]
fn zero_area_cutmix_is_the_unmixed_loss() {
    let mut rng = rng::stream(15, 0, 0);
    let (h, w, c) = (12, 12, 4);
    let net = Network::<f64>::init(c, 8, 4);
    let bank = random_bank(c, 2, 8, &mut rng);
    let images: Vec<Image> = (0..2).map(|_| random_image(h, w, &mut rng)).collect();
    let pseudo: Vec<_> = (0..2).map(|_| random_pseudo(h, w, c as u8, 0.7, &mut rng)).collect();
    let empty = Rect {
        top: 3,
        left: 5,
        height: 0,
        width: 4,
    };
    let plans = [
        CutMixPlan {
            rect: empty,
            src_a: 0,
            src_b: 1,
        },
        CutMixPlan {
            rect: empty,
            src_a: 1,
            src_b: 0,
        },
    ];
    let mixed = cutmix(&images, &plans).unwrap();
    let mixed_pseudo = cutmix(&pseudo, &plans).unwrap();
    let a = unlabeled_step(&net, &bank, &mixed, &mixed_pseudo, Heads::BOTH, 0.1).unwrap();
    let b = unlabeled_step(&net, &bank, &images, &pseudo, Heads::BOTH, 0.1).unwrap();
    assert!((a.loss - b.loss).abs() < 1e-9);
}

#[test]
fn all_invalid_pixels_give_zero_loss_and_gradient() {
    let mut rng = rng::stream(16, 0, 0);
    let net = Network::<f64>::init(3, 4, 6);
    let bank = random_bank(3, 2, 4, &mut rng);
    let images = vec![random_image(8, 8, &mut rng)];
    let pseudo = vec![random_pseudo(8, 8, 3, 0.0, &mut rng)];
    assert_eq!(pseudo[0].valid_count(), 0);
    let out = unlabeled_step(&net, &bank, &images, &pseudo, Heads::BOTH, 0.1).unwrap();
    assert_eq!(out.loss, 0.0);
    assert!(out.grads.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn pseudo_label_gate_extremes() {
    let mut rng = rng::stream(17, 0, 0);
    let net = Network::<f64>::init(4, 8, 7);
    let img = random_image(8, 8, &mut rng);
    let closed = pseudo_label(&net, &[&img], 1.0).unwrap();
    assert!(closed[0].confidence.iter().all(|&c| c < 1.0));
    assert_eq!(closed[0].valid_count(), 0);
    let open = pseudo_label(&net, &[&img], f64::MIN_POSITIVE).unwrap();
    assert_eq!(open[0].valid_count(), 64);
    let f = extract_features(&net, &img).unwrap();
    let labels = linear_posterior(&net.head, &f).unwrap().labels();
    assert_eq!(open[0].labels, labels);
}

fn tiny_data() -> DataSplits {
    DataSplits::generate(&DatasetSpec {
        height: 16,
        width: 16,
        n_labeled: 6,
        n_unlabeled: 8,
        n_val: 4,
        ..DatasetSpec::default()
    })
    .unwrap()
}

fn tiny_config(variant: Variant) -> TrainConfig {
    TrainConfig {
        variant,
        feature_dim: 8,
        k: 2,
        batch_labeled: 2,
        batch_unlabeled: 4,
        epochs: 2,
        warmup_epochs: 2,
        crop_height: 12,
        crop_width: 12,
        pixels_per_class: 50,
        eval_pixels_per_class: 50,
        tau: 0.3,
        ..TrainConfig::default()
    }
}

#[test]
fn optimizer_never_touches_prototypes_or_teacher() {
    let data = tiny_data();
    for variant in Variant::ALL {
        let cfg = tiny_config(variant);
        let (mut state, _) = initialize::<f64>(&cfg, &data, 1).unwrap();
        let weak: Vec<SegSample> = data.labeled[..2].iter().map(|s| weak_augment(s, (12, 12), 1).unwrap()).collect();
        let unl: Vec<SegSample> = data.unlabeled[..4].iter().map(|s| weak_augment(s, (12, 12), 2).unwrap()).collect();
        let bank_before = state.bank.prototypes().clone();
        let student_before = state.student.clone();
        let teacher_before = state.teacher.net.clone();
        let r = train_step(&mut state, &cfg, &weak, Some(&unl), &mut rng::stream(1, tag::CUTMIX, 0)).unwrap();
        assert_eq!(r.proto_grad_abs_sum, 0.0, "{variant:?}");
        assert!(r.teacher_unchanged_by_optimizer && r.bank_unchanged_by_optimizer, "{variant:?}");
        assert_eq!(r.unlabeled_executed, variant.unlabeled());
        assert_eq!(*state.bank.prototypes() == bank_before, !variant.proto_update(), "{variant:?}");
        if !variant.linear_loss() {
            assert_eq!(state.student.head, student_before.head);
        }
        // the teacher moved by exactly one EMA step toward the updated student
        let mut expect = teacher_before;
        ema_update(&mut expect, &state.student, cfg.ema_momentum).unwrap();
        assert_eq!(state.teacher.net, expect, "{variant:?}");
        assert_eq!(state.step, 1);
    }
}

#[test]
fn teacher_converges_geometrically() {
    let student = Network::<f64>::init(3, 6, 1);
    let mut teacher = Teacher::from_student(&Network::init(3, 6, 2), 0.9);
    let dist = |t: &Network<f64>| -> f64 {
        t.params()
            .iter()
            .zip(student.params())
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)))
            .sum::<f64>()
            .sqrt()
    };
    let d0 = dist(&teacher.net);
    for step in 1..=50 {
        teacher.update(&student).unwrap();
        let expected = d0 * 0.9f64.powi(step);
        assert!((dist(&teacher.net) - expected).abs() < 1e-9 * d0, "step {step}");
    }
}

#[test]
fn steps_are_deterministic() {
    let data = tiny_data();
    let cfg = tiny_config(Variant::Full);
    let run = || {
        let (mut state, _) = initialize::<f64>(&cfg, &data, 9).unwrap();
        run_epoch(&mut state, &cfg, &data, 9).unwrap();
        state.to_checkpoint().to_bytes()
    };
    assert_eq!(run(), run());
}

#[test]
fn supervised_only_never_builds_the_unlabeled_loss() {
    let data = tiny_data();
    let cfg = tiny_config(Variant::SupervisedOnly);
    let out = train::<f64>(&cfg, &data, 3, |_, _| Ok(())).unwrap();
    assert_eq!(out.state.unlabeled_steps, 0);
    assert!(out.log.iter().all(|m| m.l_u == 0.0 && m.valid_pixel_fraction == 0.0));
    let full = train::<f64>(&tiny_config(Variant::Full), &data, 3, |_, _| Ok(())).unwrap();
    assert_eq!(full.state.unlabeled_steps as usize, 2 * 2);
}

#[test]
fn warmup_errors() {
    let mut net = Network::<f64>::init(4, 8, 0);
    let cfg = tiny_config(Variant::Full);
    assert!(matches!(warmup(&mut net, &[], 2, &cfg, 0), Err(Error::EmptyLabeledSet)));
    let data = tiny_data();
    let zero = TrainConfig {
        warmup_epochs: 0,
        ..cfg.clone()
    };
    assert!(warmup(&mut net, &data.labeled, 2, &zero, 0).is_err());
    assert!(zero.validate().is_err());
}

#[test]
fn config_validation_names_fields() {
    let bad = [
        (TrainConfig { tau: 0.0, ..TrainConfig::default() }, "tau"),
        (TrainConfig { tau: 1.01, ..TrainConfig::default() }, "tau"),
        (TrainConfig { temperature: 0.0, ..TrainConfig::default() }, "temperature"),
        (TrainConfig { lambda_u: -1.0, ..TrainConfig::default() }, "lambda_u"),
        (TrainConfig { k: 0, ..TrainConfig::default() }, "k"),
    ];
    for (cfg, field) in bad {
        match cfg.validate() {
            Err(Error::InvalidConfig { field: f, .. }) => assert_eq!(f, field),
            other => panic!("{field}: {other:?}"),
        }
    }
    assert!(TrainConfig { tau: 1.0, ..TrainConfig::default() }.validate().is_ok());
}

#[test]
fn perfect_predictions_give_near_zero_labeled_loss() {
    let (c, n) = (2, 6);
    let mut net = Network::<f64>::init(c, c, 0);
    *net.params_mut()[8] = Tensor::from_fn(&[c, c], |i| if i / c == i % c { 1.0 } else { 0.0 });
    let bank = PrototypeBank::from_prototypes(Tensor::from_fn(&[c, c], |i| if i / c == i % c { 1.0 } else { 0.0 }), c, 1, 0.99).unwrap();
    let labels: Vec<u8> = (0..n).map(|p| (p % c) as u8).collect();
    let feats: Vec<f64> = labels.iter().flat_map(|&l| (0..c).map(move |j| if j == l as usize { 1000.0 } else { 0.0 })).collect();
    let batch = vec![SegSample {
        image: Image::new(2, 3),
        label: labels,
        modes: vec![0; n],
        sample_id: 0,
    }];
    let mut g = Graph::new();
    let bound = net.bind(&mut g, true);
    let protos = g.constant(bank.prototypes().clone());
    let f = g.constant(Tensor::new(&[n, c], feats).unwrap());
    let l = labeled_loss_var(&mut g, &bound, protos, &bank, f, &batch, Heads::BOTH, 0.01).unwrap();
    let loss = g.value(l).item().unwrap();
    assert!((0.0..=1e-6).contains(&loss), "{loss}");
}
