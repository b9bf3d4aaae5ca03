//! Properties of the loss terms and the training loop that must hold
//! exactly, not just approximately.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shapepu_core::losses::global_consistency_loss;
use shapepu_core::mixture::SIMPLEX_TOL;
use shapepu_core::train::{image_gradients, train_epoch};
use shapepu_core::*;

fn examples(n: u64, size: usize) -> Vec<Example> {
    let spec = PhantomSpec {
        size,
        seed: 21,
        ..PhantomSpec::default()
    };
    (0..n)
        .map(|i| {
            let s = generate_phantom(&spec, i).unwrap();
            Example::new(format!("p{i}"), &s.image, s.scribble, s.mask)
        })
        .collect()
}

fn random_probs(classes: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
    use rand::Rng;
    let hw = h * w;
    let mut data = vec![0.0; classes * hw];
    for p in 0..hw {
        let raw: Vec<f64> = (0..classes).map(|_| rng.random_range(0.01..1.0)).collect();
        let t: f64 = raw.iter().sum();
        for c in 0..classes {
            data[c * hw + p] = raw[c] / t;
        }
    }
    Tensor::new(&[1, classes, h, w], data).unwrap()
}

fn consistency(orig: &Tensor, aug_probs: &Tensor, aug: &CutoutAugmentation) -> f64 {
    let mut g = Graph::new();
    let a = g.param(orig.clone());
    let b = g.param(aug_probs.clone());
    let loss = global_consistency_loss(&mut g, a, b, aug, ConsistencyOptions::default()).unwrap();
    g.value(loss).item()
}

#[test]
fn consistency_ignores_the_cut_square() {
    let (c, h, w) = (4, 12, 12);
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let aug = sample_augmentation(h, w, 4, &mut rng).unwrap();
        let orig = random_probs(c, h, w, &mut rng);
        let augp = random_probs(c, h, w, &mut rng);
        let base = consistency(&orig, &augp, &aug);

        // f(X) inside z == 0 and f(X') inside T(z) == 0
        let z = aug.mask();
        let tz = aug.transformed_mask();
        let (mut o2, mut a2) = (orig.clone(), augp.clone());
        for k in 0..c {
            for p in 0..h * w {
                if z.data()[p] == 0.0 {
                    o2.data_mut()[k * h * w + p] = 0.5 + 0.4 * ((seed + p as u64) % 3) as f64 / 3.0;
                }
                if tz.data()[p] == 0.0 {
                    a2.data_mut()[k * h * w + p] = 0.9 - 0.1 * (k as f64);
                }
            }
        }
        assert_ne!(o2, orig);
        assert_eq!(consistency(&o2, &a2, &aug), base, "seed {seed}");

        // a perturbation outside the square does register
        let mut a3 = augp.clone();
        let outside = (0..h * w).find(|&p| tz.data()[p] == 1.0).unwrap();
        a3.data_mut()[outside] += 0.3;
        assert_ne!(consistency(&orig, &a3, &aug), base);
    }
}

#[test]
fn warmup_matches_a_run_without_negative_loss() {
    let data = examples(6, 48);
    let with_pu = TrainConfig {
        epochs: 6,
        warmup_epochs: 3,
        batch_size: 4,
        learning_rate: 1e-3,
        square_size: 6,
        seed: 5,
        ablation: Ablation::FULL,
        ..TrainConfig::default()
    };
    let without = TrainConfig {
        ablation: Ablation::new(true, false, true),
        ..with_pu.clone()
    };
    let run = |cfg: &TrainConfig, epochs: usize| {
        let mut model = SegModel::new(4, 3).unwrap();
        let mut opt = AdamState::new(&model);
        for e in 0..epochs {
            train_epoch(&mut model, &mut opt, &data, cfg, e).unwrap();
        }
        model
    };
    let a = run(&with_pu, 3);
    let b = run(&without, 3);
    for (pa, pb) in a.params().iter().zip(b.params()) {
        let bits_a: Vec<u64> = pa.data().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u64> = pb.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }
    // once the negative loss is switched on the runs diverge
    assert_ne!(run(&with_pu, 4).params(), run(&without, 4).params());
}

#[test]
fn negative_loss_has_no_gradient_during_warmup() {
    let data = examples(1, 48);
    let model = SegModel::new(4, 1).unwrap();
    let cfg = TrainConfig::default();
    let alpha = train::estimate_ratios(&model, &data[0], &cfg).unwrap();
    let with = image_gradients(&model, &data[0], Some(&alpha), None, &cfg, Phase::Warmup).unwrap();
    let without = image_gradients(&model, &data[0], None, None, &cfg, Phase::Warmup).unwrap();
    assert_eq!(with.0, without.0);
    assert_eq!(with.1.negative, 0.0);
}

#[test]
fn supervised_loss_drops_when_overfitting_one_image() {
    let data = examples(1, 48);
    let cfg = TrainConfig {
        epochs: 50,
        warmup_epochs: 50,
        batch_size: 1,
        learning_rate: 1e-3,
        ablation: Ablation::SUPERVISED,
        ..TrainConfig::default()
    };
    let mut model = SegModel::new(4, 0).unwrap();
    let mut opt = AdamState::new(&model);
    let first = train_epoch(&mut model, &mut opt, &data, &cfg, 0)
        .unwrap()
        .loss
        .supervised;
    let mut last = first;
    for e in 1..50 {
        last = train_epoch(&mut model, &mut opt, &data, &cfg, e)
            .unwrap()
            .loss
            .supervised;
    }
    assert!(last < 0.5 * first, "L+ went from {first} to {last}");
}

#[test]
fn ratio_estimation_leaves_parameters_untouched() {
    let data = examples(2, 48);
    let model = SegModel::new(4, 2).unwrap();
    let before = model.clone();
    for ex in &data {
        let alpha = train::estimate_ratios(&model, ex, &TrainConfig::default()).unwrap();
        assert!((alpha.as_slice().iter().sum::<f64>() - 1.0).abs() < SIMPLEX_TOL);
    }
    assert_eq!(model.params(), before.params());
}

#[test]
fn checkpoint_round_trip_preserves_forward_bits() {
    let data = examples(1, 48);
    let model = SegModel::new(4, 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let ckpt = Checkpoint {
        model: model.clone(),
        epoch: 3,
        config_hash: "abc".into(),
        optimizer: Some(AdamState::new(&model)),
    };
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.epoch, 3);
    let a = model.forward(&data[0].image).unwrap();
    let b = back.model.forward(&data[0].image).unwrap();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn em_step_output_is_on_the_simplex(
        n in 1usize..40,
        raw in proptest::collection::vec(1e-6f64..1.0, 4 * 40),
        freqs in proptest::collection::vec(0.0f64..10.0, 4),
        alpha in proptest::collection::vec(1e-4f64..1.0, 4),
    ) {
        prop_assume!(freqs.iter().sum::<f64>() > 0.0);
        let post: Vec<f64> = raw.chunks(4).take(n).flat_map(|r| {
            let t: f64 = r.iter().sum();
            r.iter().map(move |v| v / t).collect::<Vec<_>>()
        }).collect();
        let inputs = EmInputs::new(post, 4, &freqs).unwrap();
        let next = em_step(&inputs, &MixtureRatios::from_weights(&alpha).unwrap()).unwrap();
        prop_assert!((next.as_slice().iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_TOL);
        prop_assert!(next.as_slice().iter().all(|&a| (0.0..=1.0).contains(&a)));
    }

    #[test]
    fn softmax_output_is_on_the_simplex(
        c in 1usize..6,
        hw in 1usize..10,
        scale in prop_oneof![Just(1.0f64), Just(30.0), Just(700.0)],
        raw in proptest::collection::vec(-1.0f64..1.0, 60),
    ) {
        let logits = Tensor::new(&[1, c, 1, hw], (0..c * hw).map(|i| raw[i % raw.len()] * scale).collect()).unwrap();
        let mut g = Graph::new();
        let x = g.constant(logits);
        let p = g.softmax_channels(x).unwrap();
        let v = g.value(p);
        for px in 0..hw {
            let s: f64 = (0..c).map(|k| v.data()[k * hw + px]).sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
        }
        prop_assert!(v.data().iter().all(|&q| (0.0..=1.0).contains(&q)));
    }
}
