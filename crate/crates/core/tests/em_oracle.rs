//! Mixture-proportion recovery against Bayes-oracle posteriors, plus an
//! independent brute-force evaluation of the update rule.

use rand::distr::weighted::WeightedIndex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use shapepu_core::{em_estimate, em_init, em_step, EmInputs, MixtureRatios};

const MEANS: [f64; 3] = [0.0, 3.0, 6.0];
const SD: f64 = 1.0;

fn gaussian(x: f64, mu: f64) -> f64 {
    (-(x - mu).powi(2) / (2.0 * SD * SD)).exp()
}

/// Posteriors `p(c_j | x)` under prior `prior`, for samples drawn from the
/// mixture `truth`.
fn oracle_inputs(truth: [f64; 3], prior: [f64; 3], n: usize, seed: u64) -> EmInputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pick = WeightedIndex::new(truth).unwrap();
    let noise = Normal::new(0.0, SD).unwrap();
    let mut post = Vec::with_capacity(n * 3);
    for _ in 0..n {
        let x = MEANS[pick.sample(&mut rng)] + noise.sample(&mut rng);
        let w: Vec<f64> = (0..3).map(|j| prior[j] * gaussian(x, MEANS[j])).collect();
        let t: f64 = w.iter().sum();
        post.extend(w.iter().map(|v| v / t));
    }
    EmInputs::new(post, 3, &prior).unwrap()
}

#[test]
fn recovers_gaussian_mixture_ratios() {
    let truth = [0.2, 0.5, 0.3];
    for seed in 0..5 {
        let inputs = oracle_inputs(truth, [1.0 / 3.0; 3], 5000, seed);
        let out = em_estimate(&inputs, 1e-6, 100).unwrap();
        assert!(
            out.converged,
            "seed {seed}: no convergence in 100 iterations"
        );
        assert!(out.iterations <= 100);
        for j in 0..3 {
            assert!(
                (out.ratios.get(j) - truth[j]).abs() <= 0.02,
                "seed {seed}: alpha {:?} vs {truth:?}",
                out.ratios
            );
        }
    }
}

#[test]
fn recovery_does_not_depend_on_labeled_prior() {
    let truth = [0.2, 0.5, 0.3];
    let inputs = oracle_inputs(truth, [0.6, 0.1, 0.3], 5000, 11);
    let out = em_estimate(&inputs, 1e-6, 100).unwrap();
    assert!(out.converged);
    for j in 0..3 {
        assert!(
            (out.ratios.get(j) - truth[j]).abs() <= 0.02,
            "{:?}",
            out.ratios
        );
    }
}

#[test]
fn log_likelihood_never_decreases() {
    // EM on the mixture weights is a likelihood ascent: track
    // Σ_i log Σ_j (α_j / f_j) s_ij along the trajectory.
    let inputs = oracle_inputs([0.2, 0.5, 0.3], [1.0 / 3.0; 3], 2000, 3);
    let out = em_estimate(&inputs, 1e-10, 100).unwrap();
    let f = inputs.labeled_freqs().to_vec();
    let ll = |a: &MixtureRatios| -> f64 {
        (0..inputs.unlabeled_count())
            .map(|i| {
                let row = inputs.posterior_row(i);
                (0..3).map(|j| a.get(j) / f[j] * row[j]).sum::<f64>().ln()
            })
            .sum()
    };
    let values: Vec<f64> = out.trajectory.iter().map(ll).collect();
    for w in values.windows(2) {
        assert!(w[1] >= w[0] - 1e-9, "likelihood dropped: {values:?}");
    }
}

/// The update rule written out per pixel and per class without shared
/// intermediate buffers.
fn brute_force_step(s: &[[f64; 2]], f: [f64; 2], alpha: [f64; 2]) -> [f64; 2] {
    let mut out = [0.0; 2];
    for (j, o) in out.iter_mut().enumerate() {
        let mut total = 0.0;
        for row in s {
            let num = alpha[j] * row[j] / f[j];
            let den = alpha[0] * row[0] / f[0] + alpha[1] * row[1] / f[1];
            total += num / den;
        }
        *o = total / s.len() as f64;
    }
    out
}

#[test]
fn four_pixel_hand_iteration() {
    let s1 = [0.9, 0.9, 0.9, 0.1];
    let rows: Vec<[f64; 2]> = s1.iter().map(|&p| [1.0 - p, p]).collect();
    let inputs = EmInputs::new(rows.iter().flatten().copied().collect(), 2, &[0.5, 0.5]).unwrap();

    let step1 = em_step(&inputs, &MixtureRatios::new(vec![0.5, 0.5]).unwrap()).unwrap();
    let bf1 = brute_force_step(&rows, [0.5, 0.5], [0.5, 0.5]);
    assert!((step1.get(1) - 0.7).abs() < 1e-9);
    assert!((step1.get(1) - bf1[1]).abs() < 1e-9);
    assert!((step1.get(0) - bf1[0]).abs() < 1e-9);

    let step2 = em_step(&inputs, &MixtureRatios::new(vec![0.3, 0.7]).unwrap()).unwrap();
    let bf2 = brute_force_step(&rows, [0.5, 0.5], [0.3, 0.7]);
    assert!((step2.get(1) - 0.7674).abs() < 1e-4);
    assert!((step2.get(1) - bf2[1]).abs() < 1e-9);
    assert!((step2.get(0) - bf2[0]).abs() < 1e-9);

    // the estimator starts from the labeled frequencies, so its first step
    // is the first hand-iterated step
    let out = em_estimate(&inputs, 1e-6, 100).unwrap();
    assert_eq!(out.trajectory[0], em_init(&[0.5, 0.5]).unwrap());
    assert!((out.trajectory[1].get(1) - 0.7).abs() < 1e-9);
}
