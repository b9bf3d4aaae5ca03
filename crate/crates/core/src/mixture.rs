//! EM estimation of multi-class mixture proportions over unlabeled pixels.
//!
//! The network posteriors `s_ij` are produced under the class prior seen in
//! the labeled pixels (`f_j`). Assuming the class-conditional densities are
//! shared between labeled and unlabeled pixels, the unlabeled prior `α` is
//! the fixed point of
//!
//! ```text
//! α_j ← (1/n_u) Σ_i  (α_j s_ij / f_j) / Σ_k (α_k s_ik / f_k)
//! ```
//!
//! started from `α = f`.

use crate::error::{Error, Result};
use crate::tensor::{ScribbleMask, UNLABELED};

/// Floor applied to labeled class frequencies before renormalizing.
pub const FREQ_FLOOR: f64 = 1e-8;
/// Simplex tolerance for ratio vectors.
pub const SIMPLEX_TOL: f64 = 1e-9;
/// Simplex tolerance for posterior rows.
pub const POSTERIOR_TOL: f64 = 1e-6;

pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITERS: usize = 100;

/// Class proportions `α_0..α_m` on the probability simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureRatios(Vec<f64>);

impl MixtureRatios {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::Mixture("empty ratio vector".into()));
        }
        if alpha.iter().any(|&a| !(0.0..=1.0).contains(&a)) {
            return Err(Error::Mixture(format!("ratio outside [0, 1]: {alpha:?}")));
        }
        let total: f64 = alpha.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Mixture(format!("ratios sum to {total}, not 1")));
        }
        Ok(Self(alpha))
    }

    /// Normalizes nonnegative weights onto the simplex.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(Error::Mixture(format!("invalid weights {weights:?}")));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::Mixture("weights are all zero".into()));
        }
        Ok(Self(weights.iter().map(|w| w / total).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, class: usize) -> f64 {
        self.0[class]
    }

    pub fn max_abs_diff(&self, other: &MixtureRatios) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn l1_distance(&self, other: &MixtureRatios) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .sum()
    }
}

/// Posteriors at the unlabeled pixels plus the labeled class frequencies.
#[derive(Clone, Debug)]
pub struct EmInputs {
    posteriors: Vec<f64>,
    classes: usize,
    labeled_freqs: Vec<f64>,
    absent: Vec<usize>,
}

impl EmInputs {
    /// `posteriors` is row-major `n_u x classes`; `labeled_freqs` may be raw
    /// counts. Classes with zero labeled frequency are floored at
    /// [`FREQ_FLOOR`] and listed by [`EmInputs::absent_classes`].
    pub fn new(posteriors: Vec<f64>, classes: usize, labeled_freqs: &[f64]) -> Result<Self> {
        if classes == 0 || labeled_freqs.len() != classes {
            return Err(Error::Mixture(format!(
                "{} labeled frequencies for {classes} classes",
                labeled_freqs.len()
            )));
        }
        if !posteriors.len().is_multiple_of(classes) {
            return Err(Error::Mixture(
                "posterior matrix is not n_u x classes".into(),
            ));
        }
        if posteriors.is_empty() {
            return Err(Error::NoUnlabeled);
        }
        for (i, row) in posteriors.chunks(classes).enumerate() {
            let total: f64 = row.iter().sum();
            if row.iter().any(|&p| p < 0.0 || !p.is_finite()) || (total - 1.0).abs() > POSTERIOR_TOL
            {
                return Err(Error::Mixture(format!(
                    "posterior row {i} is not on the simplex: {row:?}"
                )));
            }
        }
        let absent = labeled_freqs
            .iter()
            .enumerate()
            .filter(|(_, &f)| f <= 0.0)
            .map(|(j, _)| j)
            .collect();
        let labeled_freqs = em_init(labeled_freqs)?.0;
        Ok(Self {
            posteriors,
            classes,
            labeled_freqs,
            absent,
        })
    }

    pub fn unlabeled_count(&self) -> usize {
        self.posteriors.len() / self.classes
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Floored, normalized labeled frequencies `p̂_l(c_j)`.
    pub fn labeled_freqs(&self) -> &[f64] {
        &self.labeled_freqs
    }

    /// Classes without any labeled pixel.
    pub fn absent_classes(&self) -> &[usize] {
        &self.absent
    }

    pub fn posterior_row(&self, i: usize) -> &[f64] {
        &self.posteriors[i * self.classes..(i + 1) * self.classes]
    }
}

/// Starting point of the iteration: labeled frequencies, floored at
/// [`FREQ_FLOOR`] and renormalized.
pub fn em_init(labeled_freqs: &[f64]) -> Result<MixtureRatios> {
    if labeled_freqs.iter().any(|&f| f < 0.0 || !f.is_finite()) {
        return Err(Error::Mixture(format!(
            "invalid labeled frequencies {labeled_freqs:?}"
        )));
    }
    let total: f64 = labeled_freqs.iter().sum();
    if total <= 0.0 {
        return Err(Error::Mixture("labeled frequencies are all zero".into()));
    }
    let floored: Vec<f64> = labeled_freqs
        .iter()
        .map(|f| (f / total).max(FREQ_FLOOR))
        .collect();
    MixtureRatios::from_weights(&floored)
}

/// One fixed-point update of the unlabeled class prior.
pub fn em_step(inputs: &EmInputs, alpha: &MixtureRatios) -> Result<MixtureRatios> {
    let k = inputs.classes;
    if alpha.len() != k {
        return Err(Error::Mixture(format!(
            "alpha has {} entries for {k} classes",
            alpha.len()
        )));
    }
    let ratio: Vec<f64> = alpha
        .as_slice()
        .iter()
        .zip(&inputs.labeled_freqs)
        .map(|(a, f)| a / f)
        .collect();
    let mut acc = vec![0.0; k];
    let mut weights = vec![0.0; k];
    for (i, row) in inputs.posteriors.chunks(k).enumerate() {
        let mut denom = 0.0;
        for j in 0..k {
            weights[j] = ratio[j] * row[j];
            denom += weights[j];
        }
        if denom <= 0.0 {
            return Err(Error::ZeroDenominator { pixel: i });
        }
        for j in 0..k {
            acc[j] += weights[j] / denom;
        }
    }
    let n_u = inputs.unlabeled_count() as f64;
    let next: Vec<f64> = acc.iter().map(|a| a / n_u).collect();
    MixtureRatios::from_weights(&next)
}

#[derive(Clone, Debug)]
pub struct EmOutcome {
    pub ratios: MixtureRatios,
    pub iterations: usize,
    pub converged: bool,
    /// `α^(0)` (the initialization) through the final estimate.
    pub trajectory: Vec<MixtureRatios>,
}

/// Iterates [`em_step`] from [`em_init`] until the largest componentwise
/// change drops below `tol` or `max_iters` steps have run.
pub fn em_estimate(inputs: &EmInputs, tol: f64, max_iters: usize) -> Result<EmOutcome> {
    if tol <= 0.0 || max_iters == 0 {
        return Err(Error::Mixture(format!(
            "need tol > 0 and max_iters >= 1, got {tol}, {max_iters}"
        )));
    }
    let mut alpha = MixtureRatios(inputs.labeled_freqs.clone());
    let mut trajectory = vec![alpha.clone()];
    for iter in 1..=max_iters {
        let next = em_step(inputs, &alpha)?;
        let change = next.max_abs_diff(&alpha);
        trajectory.push(next.clone());
        alpha = next;
        if change < tol {
            return Ok(EmOutcome {
                ratios: alpha,
                iterations: iter,
                converged: true,
                trajectory,
            });
        }
    }
    Ok(EmOutcome {
        ratios: alpha,
        iterations: max_iters,
        converged: false,
        trajectory,
    })
}

/// Per-class counts of labeled scribble pixels.
pub fn labeled_counts(scribble: &ScribbleMask, classes: usize) -> Vec<f64> {
    let mut counts = vec![0.0; classes];
    for &label in scribble.data() {
        if label != UNLABELED && (label as usize) < classes {
            counts[label as usize] += 1.0;
        }
    }
    counts
}

/// Builds [`EmInputs`] for one image from a `1 x classes x H x W` probability
/// map and its scribble.
pub fn inputs_from_probmap(
    probs: &[f64],
    classes: usize,
    scribble: &ScribbleMask,
) -> Result<EmInputs> {
    let hw = scribble.len();
    if probs.len() != classes * hw {
        return Err(Error::shape(
            "em inputs",
            format!("{} probabilities for {classes}x{hw}", probs.len()),
        ));
    }
    let mut posteriors = Vec::new();
    for (p, &label) in scribble.data().iter().enumerate() {
        if label == UNLABELED {
            posteriors.extend((0..classes).map(|c| probs[c * hw + p]));
        }
    }
    if posteriors.is_empty() {
        return Err(Error::NoUnlabeled);
    }
    EmInputs::new(posteriors, classes, &labeled_counts(scribble, classes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn four_pixel() -> EmInputs {
        let s = [0.9, 0.9, 0.9, 0.1];
        let post: Vec<f64> = s.iter().flat_map(|&p| [1.0 - p, p]).collect();
        EmInputs::new(post, 2, &[0.5, 0.5]).unwrap()
    }

    #[test]
    fn init_normalizes_and_floors() {
        assert_eq!(em_init(&[0.5, 0.5]).unwrap().as_slice(), &[0.5, 0.5]);
        assert_eq!(
            em_init(&[2.0, 2.0, 4.0]).unwrap().as_slice(),
            &[0.25, 0.25, 0.5]
        );
        let a = em_init(&[0.7, 0.3, 0.0]).unwrap();
        let t = 1.0 + 1e-8;
        assert!((a.get(0) - 0.7 / t).abs() < 1e-15);
        assert!((a.get(1) - 0.3 / t).abs() < 1e-15);
        assert!((a.get(2) - 1e-8 / t).abs() < 1e-22);
        assert!(em_init(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn hand_iterated_steps() {
        let inputs = four_pixel();
        let a1 = em_step(&inputs, &MixtureRatios::new(vec![0.5, 0.5]).unwrap()).unwrap();
        assert!((a1.get(1) - 0.7).abs() < 1e-12);
        let a2 = em_step(&inputs, &MixtureRatios::new(vec![0.3, 0.7]).unwrap()).unwrap();
        // per-pixel weights (1.4 s) / (1.4 s + 0.6 (1 - s))
        let w = |s: f64| 1.4 * s / (1.4 * s + 0.6 * (1.0 - s));
        let expect = (3.0 * w(0.9) + w(0.1)) / 4.0;
        assert!((a2.get(1) - expect).abs() < 1e-12);
        assert!((a2.get(1) - 0.7674).abs() < 1e-4);
    }

    #[test]
    fn constant_posteriors_equal_to_freqs_are_a_fixed_point() {
        let f = [0.2, 0.3, 0.5];
        let post: Vec<f64> = (0..10).flat_map(|_| f).collect();
        let inputs = EmInputs::new(post, 3, &f).unwrap();
        let alpha = em_init(&f).unwrap();
        let out = em_estimate(&inputs, DEFAULT_TOL, DEFAULT_MAX_ITERS).unwrap();
        assert_eq!(out.iterations, 1);
        assert!(out.converged);
        assert!(out.ratios.max_abs_diff(&alpha) < 1e-15);
    }

    #[test]
    fn zero_denominator_names_pixel() {
        // pixel 1 puts all mass on a class whose alpha is zero
        let post = vec![0.5, 0.5, 0.0, 1.0];
        let inputs = EmInputs::new(post, 2, &[1.0, 1.0]).unwrap();
        let alpha = MixtureRatios::new(vec![1.0, 0.0]).unwrap();
        match em_step(&inputs, &alpha) {
            Err(Error::ZeroDenominator { pixel }) => assert_eq!(pixel, 1),
            other => panic!("expected zero-denominator error, got {other:?}"),
        }
    }

    #[test]
    fn absent_class_is_floored_and_reported() {
        let post = vec![0.5, 0.25, 0.25];
        let inputs = EmInputs::new(post, 3, &[3.0, 1.0, 0.0]).unwrap();
        assert_eq!(inputs.absent_classes(), &[2]);
        assert!(inputs.labeled_freqs()[2] > 0.0);
    }

    #[test]
    fn rejects_off_simplex_posteriors() {
        assert!(EmInputs::new(vec![0.5, 0.6], 2, &[1.0, 1.0]).is_err());
    }

    fn simplex_rows(n: usize, k: usize, raw: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(n * k);
        for row in raw.chunks(k).take(n) {
            let t: f64 = row.iter().sum();
            out.extend(row.iter().map(|v| v / t));
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn step_stays_on_simplex(
            raw in proptest::collection::vec(0.01f64..1.0, 4 * 30),
            freqs in proptest::collection::vec(0.0f64..5.0, 4),
            alpha in proptest::collection::vec(0.001f64..1.0, 4),
        ) {
            prop_assume!(freqs.iter().sum::<f64>() > 0.0);
            let inputs = EmInputs::new(simplex_rows(30, 4, &raw), 4, &freqs).unwrap();
            let alpha = MixtureRatios::from_weights(&alpha).unwrap();
            let next = em_step(&inputs, &alpha).unwrap();
            prop_assert!((next.as_slice().iter().sum::<f64>() - 1.0).abs() < SIMPLEX_TOL);
            prop_assert!(next.as_slice().iter().all(|&a| (0.0..=1.0).contains(&a)));
        }

        #[test]
        fn fixed_point_identity(
            freqs in proptest::collection::vec(0.01f64..1.0, 4),
            alpha in proptest::collection::vec(0.001f64..1.0, 4),
        ) {
            // s_ij = f_j for every pixel gives α'_j ∝ α_j, i.e. α' = α
            let f = MixtureRatios::from_weights(&freqs).unwrap();
            let post: Vec<f64> = (0..7).flat_map(|_| f.as_slice().to_vec()).collect();
            let inputs = EmInputs::new(post, 4, f.as_slice()).unwrap();
            let alpha = MixtureRatios::from_weights(&alpha).unwrap();
            let next = em_step(&inputs, &alpha).unwrap();
            prop_assert!(next.max_abs_diff(&alpha) < 1e-12);
        }

        #[test]
        fn permutation_equivariance(
            raw in proptest::collection::vec(0.01f64..1.0, 3 * 20),
            freqs in proptest::collection::vec(0.1f64..5.0, 3),
            alpha in proptest::collection::vec(0.01f64..1.0, 3),
            perm_idx in 0usize..6,
        ) {
            let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
            let perm = perms[perm_idx];
            let post = simplex_rows(20, 3, &raw);
            let alpha = MixtureRatios::from_weights(&alpha).unwrap();
            let base = em_step(&EmInputs::new(post.clone(), 3, &freqs).unwrap(), &alpha).unwrap();

            let ppost: Vec<f64> = post.chunks(3).flat_map(|r| perm.map(|p| r[p])).collect();
            let pfreqs = perm.map(|p| freqs[p]);
            let palpha = MixtureRatios::from_weights(&perm.map(|p| alpha.get(p))).unwrap();
            let permuted = em_step(&EmInputs::new(ppost, 3, &pfreqs).unwrap(), &palpha).unwrap();
            for (j, &p) in perm.iter().enumerate() {
                prop_assert!((permuted.get(j) - base.get(p)).abs() < 1e-12);
            }
        }
    }
}
