//! Training objectives: partial cross-entropy on scribbles, the negative
//! marginal loss on predicted negatives, and the cutout consistency loss.
//!
//! All functions take a per-image `1 x (m+1) x H x W` probability map that
//! lives in a [`Graph`] and return scalar nodes.

use crate::augment::CutoutAugmentation;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::partition::PartitionResult;
use crate::tensor::{ScribbleMask, Tensor, UNLABELED};

/// Clamp applied inside every logarithm.
pub const LOG_EPS: f64 = 1e-12;

/// How per-pixel terms are aggregated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Reduction {
    /// Average over contributing pixels (terms stay comparable across images).
    #[default]
    Mean,
    /// Plain sum over contributing pixels.
    Sum,
}

impl Reduction {
    fn apply(self, graph: &mut Graph, total: Var, count: usize) -> Result<Var> {
        match self {
            Reduction::Sum => Ok(total),
            Reduction::Mean => graph.scale(total, 1.0 / count.max(1) as f64),
        }
    }
}

fn check_probs(graph: &Graph, probs: Var, h: usize, w: usize) -> Result<usize> {
    let (n, c, ph, pw) = graph.value(probs).dims4()?;
    if n != 1 || ph != h || pw != w {
        return Err(Error::shape(
            "loss",
            format!(
                "probabilities {:?} vs {h}x{w} labels",
                graph.value(probs).shape()
            ),
        ));
    }
    Ok(c)
}

/// `L+ = -Σ_{i labeled} Σ_j y_ij log ŷ_ij`.
pub fn supervised_loss(
    graph: &mut Graph,
    probs: Var,
    scribble: &ScribbleMask,
    reduction: Reduction,
) -> Result<(Var, usize)> {
    let c = check_probs(graph, probs, scribble.height(), scribble.width())?;
    let hw = scribble.len();
    let mut onehot = vec![0.0; c * hw];
    let mut labeled = 0;
    for (p, &label) in scribble.data().iter().enumerate() {
        if label != UNLABELED {
            if label as usize >= c {
                return Err(Error::shape(
                    "supervised_loss",
                    format!("label {label} with {c} classes"),
                ));
            }
            onehot[label as usize * hw + p] = 1.0;
            labeled += 1;
        }
    }
    if labeled == 0 {
        return Err(Error::NoLabeled);
    }
    let onehot = graph.constant(Tensor::new(graph.value(probs).shape(), onehot)?);
    let logp = graph.log_clamped(probs, LOG_EPS)?;
    let picked = graph.mul(onehot, logp)?;
    let total = graph.sum(picked)?;
    let neg = graph.scale(total, -1.0)?;
    Ok((reduction.apply(graph, neg, labeled)?, labeled))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct NegativeOptions {
    /// Count background in the fused marginal `p(c̄_j|x)`.
    pub include_background: bool,
    pub reduction: Reduction,
}

#[derive(Clone, Copy, Debug)]
pub struct NegativeLoss {
    pub value: Var,
    /// Pixel-class pairs that contributed.
    pub pixels: usize,
    /// Set when no pixel contributed (all negative sets empty, or the fused
    /// marginal is an empty sum).
    pub empty: bool,
}

/// `L- = -Σ_{j≥1} Σ_{i ∈ Ω̄_j} log p(c̄_j | x_i)` with
/// `p(c̄_j|x) = Σ_{k≥1, k≠j} p(c_k|x)` (plus `p(c_0|x)` when
/// `include_background`).
pub fn negative_loss(
    graph: &mut Graph,
    probs: Var,
    partition: &PartitionResult,
    opts: NegativeOptions,
) -> Result<NegativeLoss> {
    let (_, c, h, w) = graph.value(probs).dims4()?;
    let m = c - 1;
    let hw = h * w;
    let zero = |graph: &mut Graph| graph.constant(Tensor::scalar(0.0));
    if m == 0 || (m == 1 && !opts.include_background) {
        log::warn!("negative loss: fused marginal is an empty sum with {m} foreground class(es)");
        return Ok(NegativeLoss {
            value: zero(graph),
            pixels: 0,
            empty: true,
        });
    }
    let pixels = partition.negative_total();
    if pixels == 0 {
        return Ok(NegativeLoss {
            value: zero(graph),
            pixels: 0,
            empty: true,
        });
    }
    // 1x1 kernel: output channel j-1 sums the classes fused into c̄_j
    let mut kernel = vec![0.0; m * c];
    for j in 1..=m {
        for k in 0..c {
            let fused = (k >= 1 && k != j) || (k == 0 && opts.include_background);
            if fused {
                kernel[(j - 1) * c + k] = 1.0;
            }
        }
    }
    let mut select = vec![0.0; m * hw];
    for cp in &partition.classes {
        if cp.class == 0 || cp.class > m {
            continue;
        }
        for &p in &cp.negative {
            select[(cp.class - 1) * hw + p] = 1.0;
        }
    }
    let kernel = graph.constant(Tensor::new(&[m, c, 1, 1], kernel)?);
    let bias = graph.constant(Tensor::zeros(&[m]));
    let marginal = graph.conv2d(probs, kernel, bias)?;
    let log_marginal = graph.log_clamped(marginal, LOG_EPS)?;
    let select = graph.constant(Tensor::new(&[1, m, h, w], select)?);
    let picked = graph.mul(select, log_marginal)?;
    let total = graph.sum(picked)?;
    let neg = graph.scale(total, -1.0)?;
    Ok(NegativeLoss {
        value: opts.reduction.apply(graph, neg, pixels)?,
        pixels,
        empty: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConsistencyOptions {
    /// Mask the augmented-branch prediction with `T(z)` so the cut square is
    /// ignored on both sides. `false` compares against the unmasked `f(X')`.
    pub mask_both: bool,
    /// Treat `f'(X)` as a fixed target.
    pub stop_gradient: bool,
}

impl Default for ConsistencyOptions {
    fn default() -> Self {
        Self {
            mask_both: true,
            stop_gradient: false,
        }
    }
}

/// Negative cosine similarity of two vectors, `-(u·v)/(‖u‖ ‖v‖)`.
pub fn cosine_distance(graph: &mut Graph, u: Var, v: Var) -> Result<Var> {
    let nu = graph.l2_norm(u)?;
    let nv = graph.l2_norm(v)?;
    if graph.value(nu).item() == 0.0 || graph.value(nv).item() == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let dot = graph.dot(u, v)?;
    let denom = graph.mul(nu, nv)?;
    let cos = graph.div(dot, denom)?;
    graph.scale(cos, -1.0)
}

/// `½ L_cos(f'(X), f(X')) + ½ L_cos(f(X'), f'(X))` with `f'(X) = T(z ⊙ f(X))`.
///
/// `prob_orig` is the prediction on `X`, `prob_aug` the prediction on
/// `X' = T(z ⊙ X)`.
pub fn global_consistency_loss(
    graph: &mut Graph,
    prob_orig: Var,
    prob_aug: Var,
    aug: &CutoutAugmentation,
    opts: ConsistencyOptions,
) -> Result<Var> {
    if graph.value(prob_orig).shape() != graph.value(prob_aug).shape() {
        return Err(Error::shape(
            "global_consistency_loss",
            format!(
                "{:?} vs {:?}",
                graph.value(prob_orig).shape(),
                graph.value(prob_aug).shape()
            ),
        ));
    }
    let mut a = aug.apply_var(graph, prob_orig)?;
    if opts.stop_gradient {
        let frozen = graph.value(a).clone();
        a = graph.constant(frozen);
    }
    let b = if opts.mask_both {
        aug.mask_transformed_var(graph, prob_aug)?
    } else {
        prob_aug
    };
    let a = graph.flatten(a)?;
    let b = graph.flatten(b)?;
    let ab = cosine_distance(graph, a, b)?;
    let ba = cosine_distance(graph, b, a)?;
    let both = graph.add(ab, ba)?;
    graph.scale(both, 0.5)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// `L = L+ + λ2 L_global`; the negative loss is reported but not optimized.
    Warmup,
    /// `L = L+ + λ1 L- + λ2 L_global`.
    Full,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Full => "full",
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LossParts {
    pub supervised: Option<Var>,
    pub negative: Option<Var>,
    pub global: Option<Var>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub supervised: f64,
    pub negative: f64,
    pub global: f64,
    pub total: f64,
    pub labeled_pixels: usize,
    pub negative_pixels: usize,
}

impl LossReport {
    /// Componentwise mean of several reports.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        if reports.is_empty() {
            return LossReport::default();
        }
        let n = reports.len() as f64;
        let sum = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        LossReport {
            supervised: sum(|r| r.supervised),
            negative: sum(|r| r.negative),
            global: sum(|r| r.global),
            total: sum(|r| r.total),
            labeled_pixels: reports.iter().map(|r| r.labeled_pixels).sum(),
            negative_pixels: reports.iter().map(|r| r.negative_pixels).sum(),
        }
    }
}

/// Combines the loss terms according to `phase`; missing terms count as zero.
pub fn total_loss(
    graph: &mut Graph,
    parts: LossParts,
    weights: LossWeights,
    phase: Phase,
) -> Result<(Var, LossReport)> {
    let val = |graph: &Graph, v: Option<Var>| v.map_or(0.0, |v| graph.value(v).item());
    let mut report = LossReport {
        supervised: val(graph, parts.supervised),
        negative: val(graph, parts.negative),
        global: val(graph, parts.global),
        ..LossReport::default()
    };
    let mut total = match parts.supervised {
        Some(v) => v,
        None => graph.constant(Tensor::scalar(0.0)),
    };
    if let (Phase::Full, Some(neg)) = (phase, parts.negative) {
        let weighted = graph.scale(neg, weights.lambda1)?;
        total = graph.add(total, weighted)?;
    }
    if let Some(glob) = parts.global {
        let weighted = graph.scale(glob, weights.lambda2)?;
        total = graph.add(total, weighted)?;
    }
    report.total = graph.value(total).item();
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dihedral::Dihedral;
    use crate::mixture::MixtureRatios;
    use crate::partition::partition;

    fn probs_tensor(pixels: &[&[f64]], h: usize, w: usize) -> Tensor {
        let c = pixels[0].len();
        let hw = h * w;
        let mut data = vec![0.0; c * hw];
        for (p, row) in pixels.iter().enumerate() {
            for (k, &v) in row.iter().enumerate() {
                data[k * hw + p] = v;
            }
        }
        Tensor::new(&[1, c, h, w], data).unwrap()
    }

    #[test]
    fn supervised_loss_values() {
        let mut g = Graph::new();
        let p = g.constant(probs_tensor(&[&[0.5, 0.5], &[0.2, 0.8]], 1, 2));
        let mut scr = ScribbleMask::filled(1, 2, UNLABELED);
        scr.set(0, 0, 1);
        let (l, n) = supervised_loss(&mut g, p, &scr, Reduction::Sum).unwrap();
        assert_eq!(n, 1);
        assert!((g.value(l).item() - 0.5f64.ln().abs()).abs() < 1e-12);

        let p = g.constant(probs_tensor(&[&[0.0, 1.0], &[1.0, 0.0]], 1, 2));
        let scr = ScribbleMask::from_vec(1, 2, vec![1, 0]).unwrap();
        let (l, _) = supervised_loss(&mut g, p, &scr, Reduction::Mean).unwrap();
        assert_eq!(g.value(l).item(), 0.0);

        let scr = ScribbleMask::filled(1, 2, UNLABELED);
        assert!(matches!(
            supervised_loss(&mut g, p, &scr, Reduction::Mean),
            Err(Error::NoLabeled)
        ));
    }

    #[test]
    fn supervised_gradient_is_softmax_minus_onehot() {
        let mut g = Graph::new();
        let logits =
            g.param(Tensor::new(&[1, 3, 1, 2], vec![0.3, -1.0, 1.2, 0.5, -0.4, 0.1]).unwrap());
        let probs = g.softmax_channels(logits).unwrap();
        let scr = ScribbleMask::from_vec(1, 2, vec![2, UNLABELED]).unwrap();
        let (l, _) = supervised_loss(&mut g, probs, &scr, Reduction::Sum).unwrap();
        g.backward(l).unwrap();
        let grad = g.grad(logits);
        let p = g.value(probs).clone();
        for k in 0..3 {
            let expect = p.data()[k * 2] - if k == 2 { 1.0 } else { 0.0 };
            assert!((grad.data()[k * 2] - expect).abs() < 1e-12);
            assert_eq!(grad.data()[k * 2 + 1], 0.0);
        }
    }

    fn all_negative(c: usize, n: usize) -> PartitionResult {
        PartitionResult {
            classes: (1..c)
                .map(|class| crate::partition::ClassPartition {
                    class,
                    positive: vec![],
                    negative: (0..n).collect(),
                })
                .collect(),
            unlabeled: n,
        }
    }

    #[test]
    fn negative_loss_term_value() {
        let mut g = Graph::new();
        let p = g.constant(probs_tensor(&[&[0.1, 0.2, 0.3, 0.4]], 1, 1));
        let mut part = all_negative(4, 1);
        part.classes.retain(|cp| cp.class == 1);
        let opts = NegativeOptions {
            reduction: Reduction::Sum,
            ..Default::default()
        };
        let l = negative_loss(&mut g, p, &part, opts).unwrap();
        assert!((g.value(l.value).item() - (-(0.7f64).ln())).abs() < 1e-12);
        assert!((g.value(l.value).item() - 0.3567).abs() < 1e-4);

        // including background fuses everything but c_1
        let l = negative_loss(
            &mut g,
            p,
            &part,
            NegativeOptions {
                include_background: true,
                reduction: Reduction::Sum,
            },
        )
        .unwrap();
        assert!((g.value(l.value).item() - (-(0.8f64).ln())).abs() < 1e-12);
    }

    #[test]
    fn negative_loss_zero_when_class_absent() {
        let mut g = Graph::new();
        let p = g.constant(probs_tensor(&[&[0.0, 0.0, 0.5, 0.5]], 1, 1));
        let mut part = all_negative(4, 1);
        part.classes.retain(|cp| cp.class == 1);
        let l = negative_loss(&mut g, p, &part, NegativeOptions::default()).unwrap();
        assert!(g.value(l.value).item().abs() < 1e-15);
    }

    #[test]
    fn negative_loss_degenerate_cases() {
        let mut g = Graph::new();
        let p = g.constant(probs_tensor(&[&[0.5, 0.5]], 1, 1));
        let l = negative_loss(&mut g, p, &all_negative(2, 1), NegativeOptions::default()).unwrap();
        assert!(l.empty);
        assert_eq!(g.value(l.value).item(), 0.0);

        let p = g.constant(probs_tensor(&[&[0.25; 4]], 1, 1));
        let mut part = all_negative(4, 1);
        part.classes.iter_mut().for_each(|cp| cp.negative.clear());
        let l = negative_loss(&mut g, p, &part, NegativeOptions::default()).unwrap();
        assert!(l.empty);
    }

    #[test]
    fn negative_loss_from_partition() {
        // m = 3 over 4 unlabeled pixels
        let px: [&[f64]; 4] = [
            &[0.1, 0.6, 0.2, 0.1],
            &[0.7, 0.1, 0.1, 0.1],
            &[0.1, 0.1, 0.7, 0.1],
            &[0.1, 0.1, 0.1, 0.7],
        ];
        let t = probs_tensor(&px, 2, 2);
        let scr = ScribbleMask::filled(2, 2, UNLABELED);
        let alpha = MixtureRatios::new(vec![0.25, 0.25, 0.25, 0.25]).unwrap();
        let part = partition(&t, &scr, &alpha).unwrap();
        let mut g = Graph::new();
        let p = g.constant(t);
        let l = negative_loss(
            &mut g,
            p,
            &part,
            NegativeOptions {
                reduction: Reduction::Sum,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(l.pixels, 9);
        let mut expect = 0.0;
        for cp in &part.classes {
            for &i in &cp.negative {
                let fused: f64 = (1..4).filter(|&k| k != cp.class).map(|k| px[i][k]).sum();
                expect -= fused.ln();
            }
        }
        assert!((g.value(l.value).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn cosine_closed_forms() {
        let mut g = Graph::new();
        let u = g.constant(Tensor::new(&[2], vec![1.0, 0.0]).unwrap());
        let v = g.constant(Tensor::new(&[2], vec![1.0, 1.0]).unwrap());
        let d = cosine_distance(&mut g, u, v).unwrap();
        assert!((g.value(d).item() + 1.0 / 2f64.sqrt()).abs() < 1e-12);
        let w = g.constant(Tensor::new(&[2], vec![0.0, 3.0]).unwrap());
        let d = cosine_distance(&mut g, u, w).unwrap();
        assert_eq!(g.value(d).item(), 0.0);
        let z = g.constant(Tensor::zeros(&[2]));
        assert!(matches!(
            cosine_distance(&mut g, u, z),
            Err(Error::ZeroNorm)
        ));
    }

    #[test]
    fn identical_maps_reach_minimum() {
        let t = Tensor::from_fn(&[1, 3, 4, 4], |i| ((i * 7) % 5) as f64 / 5.0 + 0.1);
        let mut g = Graph::new();
        let a = g.constant(t.clone());
        let b = g.constant(t);
        let aug = CutoutAugmentation::identity(4, 4);
        let l = global_consistency_loss(&mut g, a, b, &aug, ConsistencyOptions::default()).unwrap();
        assert!((g.value(l).item() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_maps_give_zero() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(&[1, 2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = g.constant(Tensor::new(&[1, 2, 1, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap());
        let aug = CutoutAugmentation::identity(1, 2);
        let l = global_consistency_loss(&mut g, a, b, &aug, ConsistencyOptions::default()).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn transformed_prediction_is_consistent() {
        // if f is exactly equivariant the loss is at its minimum
        let t = Tensor::from_fn(&[1, 2, 6, 6], |i| (i as f64 * 0.37).sin().abs() + 0.05);
        let aug = CutoutAugmentation::new(6, 6, 2, (1, 3), Dihedral::new(3, true)).unwrap();
        let prob_aug = aug.apply(&t).unwrap();
        let mut g = Graph::new();
        let a = g.constant(t);
        let b = g.constant(prob_aug);
        let l = global_consistency_loss(&mut g, a, b, &aug, ConsistencyOptions::default()).unwrap();
        assert!((g.value(l).item() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn total_loss_combinations() {
        let mut g = Graph::new();
        let lp = g.constant(Tensor::scalar(2.0));
        let ln = g.constant(Tensor::scalar(1.0));
        let lg = g.constant(Tensor::scalar(-0.8));
        let parts = LossParts {
            supervised: Some(lp),
            negative: Some(ln),
            global: Some(lg),
        };
        let (_, r) = total_loss(&mut g, parts, LossWeights::default(), Phase::Full).unwrap();
        assert!((r.total - 2.96).abs() < 1e-12);
        let (_, r) = total_loss(&mut g, parts, LossWeights::default(), Phase::Warmup).unwrap();
        assert!((r.total - (2.0 - 0.05 * 0.8)).abs() < 1e-12);
        assert_eq!(r.negative, 1.0);
        let zero = LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
        };
        let (_, r) = total_loss(&mut g, parts, zero, Phase::Full).unwrap();
        assert_eq!(r.total, 2.0);
    }
}
