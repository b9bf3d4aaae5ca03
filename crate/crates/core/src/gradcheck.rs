//! Central finite-difference verification of analytic gradients.

use rand::Rng;

use crate::augment::sample_augmentation;
use crate::autodiff::{Graph, Var};
use crate::dihedral::Dihedral;
use crate::error::Result;
use crate::losses::{
    global_consistency_loss, negative_loss, supervised_loss, ConsistencyOptions, NegativeOptions,
    Reduction,
};
use crate::mixture::MixtureRatios;
use crate::partition::partition;
use crate::phantom::stream;
use crate::tensor::{ScribbleMask, Tensor, UNLABELED};

/// Step size for central differences.
pub const FD_STEP: f64 = 1e-3;
/// Maximum accepted relative error.
pub const REL_TOL: f64 = 1e-4;
/// Absolute differences below this always pass.
pub const ABS_FLOOR: f64 = 1e-6;

/// Combined error metric: relative error whose denominator is floored at
/// `ABS_FLOOR / REL_TOL`, so `err < REL_TOL` iff the difference is below
/// `REL_TOL` relative or below `ABS_FLOOR` absolute.
pub fn gradient_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(ABS_FLOOR / REL_TOL);
    (analytic - numeric).abs() / denom
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    pub worst_error: f64,
    pub elements: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.worst_error < REL_TOL
    }
}

/// Compares the analytic gradient of `build` with respect to every input
/// against central differences with step [`FD_STEP`].
///
/// `fault` multiplies the first analytic gradient entry by `1 + fault`;
/// used to confirm the harness can fail.
pub fn check_gradients<F>(
    name: &str,
    inputs: &[Tensor],
    build: F,
    fault: Option<f64>,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut graph = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| graph.param(t.clone())).collect();
    let loss = build(&mut graph, &vars)?;
    graph.backward(loss)?;
    let mut analytic: Vec<Tensor> = vars.iter().map(|&v| graph.grad(v)).collect();
    if let (Some(f), Some(first)) = (fault, analytic.first_mut()) {
        if let Some(v) = first.data_mut().first_mut() {
            *v = *v * (1.0 + f) + f;
        }
    }

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vs: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vs)?;
        Ok(g.value(out).item())
    };

    let mut worst = 0.0f64;
    let mut elements = 0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        for ei in 0..inputs[ti].numel() {
            let orig = inputs[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + FD_STEP;
            let plus = eval(&work)?;
            work[ti].data_mut()[ei] = orig - FD_STEP;
            let minus = eval(&work)?;
            work[ti].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(gradient_error(grad.data()[ei], numeric));
            elements += 1;
        }
    }
    Ok(GradCheck {
        name: name.to_string(),
        worst_error: worst,
        elements,
    })
}

/// Small random tensor with entries in `[lo, hi)`, pushed at least `gap`
/// away from zero when `gap > 0` (keeps ReLU inputs off the kink).
fn random(rng: &mut impl Rng, shape: &[usize], (lo, hi): (f64, f64), gap: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(lo..hi);
        if gap > 0.0 && v.abs() < gap {
            gap.copysign(v)
        } else {
            v
        }
    })
}

/// Reduces an arbitrary node to a scalar with fixed random weights, so every
/// output element receives a distinct upstream gradient.
fn weighted_sum(g: &mut Graph, x: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.reshape(g.value(x).shape())?);
    let prod = g.mul(x, w)?;
    g.sum(prod)
}

fn random_scribble(rng: &mut impl Rng, h: usize, w: usize, classes: usize) -> ScribbleMask {
    let mut s = ScribbleMask::from_fn(h, w, |_, _| {
        if rng.random_bool(0.3) {
            rng.random_range(0..classes as u8)
        } else {
            UNLABELED
        }
    });
    // at least one labeled and one unlabeled pixel
    s.set(0, 0, 0);
    s.set(h - 1, w - 1, UNLABELED);
    s
}

/// Names of the checks run by [`standard_suite`], in order.
pub const SUITE: [&str; 20] = [
    "conv2d",
    "relu",
    "softmax",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "log",
    "sum",
    "mean",
    "reshape",
    "dot",
    "l2_norm",
    "transform",
    "composite conv-relu-softmax-ce",
    "supervised loss",
    "negative loss",
    "negative loss (background fused)",
    "global consistency loss",
];

/// One check of every op and loss on tensors drawn from `seed`.
pub fn suite_for_seed(seed: u64, fault: Option<f64>) -> Result<Vec<GradCheck>> {
    let mut rng = stream(seed, 0, 0x6ad);
    let r = &mut rng;
    let mut out = Vec::new();
    let sq = [1, 2, 4, 4];
    let n = 32;

    let x = random(r, &[1, 2, 5, 5], (-1.0, 1.0), 0.0);
    let k = random(r, &[3, 2, 3, 3], (-1.0, 1.0), 0.0);
    let b = random(r, &[3], (-1.0, 1.0), 0.0);
    let wts = random(r, &[75], (-1.0, 1.0), 0.0);
    out.push(check_gradients(
        SUITE[0],
        &[x, k, b],
        |g, v| {
            let y = g.conv2d(v[0], v[1], v[2])?;
            weighted_sum(g, y, &wts)
        },
        fault,
    )?);

    let unary: [(&str, (f64, f64), f64); 2] =
        [(SUITE[1], (-1.0, 1.0), 0.05), (SUITE[2], (-3.0, 3.0), 0.0)];
    for (i, (name, range, gap)) in unary.into_iter().enumerate() {
        let x = random(r, &sq, range, gap);
        let wts = random(r, &[n], (-1.0, 1.0), 0.0);
        out.push(check_gradients(
            name,
            &[x],
            |g, v| {
                let y = if i == 0 {
                    g.relu(v[0])?
                } else {
                    g.softmax_channels(v[0])?
                };
                weighted_sum(g, y, &wts)
            },
            fault,
        )?);
    }

    for (i, name) in SUITE[3..7].iter().enumerate() {
        let a = random(r, &sq, (-1.0, 1.0), 0.0);
        // divisor kept away from zero
        let bb = if i == 3 {
            random(r, &sq, (0.5, 2.0), 0.0)
        } else {
            random(r, &sq, (-1.0, 1.0), 0.0)
        };
        let wts = random(r, &[n], (-1.0, 1.0), 0.0);
        out.push(check_gradients(
            name,
            &[a, bb],
            |g, v| {
                let y = match i {
                    0 => g.add(v[0], v[1])?,
                    1 => g.sub(v[0], v[1])?,
                    2 => g.mul(v[0], v[1])?,
                    _ => g.div(v[0], v[1])?,
                };
                weighted_sum(g, y, &wts)
            },
            fault,
        )?);
    }

    let factor: f64 = r.random_range(-2.0..2.0);
    let x = random(r, &sq, (-1.0, 1.0), 0.0);
    let wts = random(r, &[n], (-1.0, 1.0), 0.0);
    out.push(check_gradients(
        SUITE[7],
        &[x],
        |g, v| {
            let y = g.scale(v[0], factor)?;
            weighted_sum(g, y, &wts)
        },
        fault,
    )?);

    // inputs well above the clamp so the log is smooth around them
    let x = random(r, &sq, (0.1, 2.0), 0.0);
    let wts = random(r, &[n], (-1.0, 1.0), 0.0);
    out.push(check_gradients(
        SUITE[8],
        &[x],
        |g, v| {
            let y = g.log_clamped(v[0], 1e-12)?;
            weighted_sum(g, y, &wts)
        },
        fault,
    )?);

    let x = random(r, &sq, (-1.0, 1.0), 0.0);
    out.push(check_gradients(
        SUITE[9],
        std::slice::from_ref(&x),
        |g, v| {
            let sq = g.mul(v[0], v[0])?;
            g.sum(sq)
        },
        fault,
    )?);
    out.push(check_gradients(
        SUITE[10],
        &[x],
        |g, v| {
            let sq = g.mul(v[0], v[0])?;
            g.mean(sq)
        },
        fault,
    )?);

    let x = random(r, &sq, (-1.0, 1.0), 0.0);
    let wts = random(r, &[n], (-1.0, 1.0), 0.0);
    out.push(check_gradients(
        SUITE[11],
        &[x],
        |g, v| {
            let y = g.reshape(v[0], &[4, 8])?;
            let y = g.flatten(y)?;
            weighted_sum(g, y, &wts)
        },
        fault,
    )?);

    let a = random(r, &[n], (-1.0, 1.0), 0.0);
    let bb = random(r, &[n], (-1.0, 1.0), 0.0);
    out.push(check_gradients(
        SUITE[12],
        &[a, bb],
        |g, v| g.dot(v[0], v[1]),
        fault,
    )?);

    let x = random(r, &[n], (-1.0, 1.0), 0.0);
    out.push(check_gradients(
        SUITE[13],
        &[x],
        |g, v| g.l2_norm(v[0]),
        fault,
    )?);

    let t = Dihedral::from_index(r.random_range(0..8));
    let x = random(r, &sq, (-1.0, 1.0), 0.0);
    let wts = random(r, &[n], (-1.0, 1.0), 0.0);
    out.push(check_gradients(
        SUITE[14],
        &[x],
        |g, v| {
            let y = g.transform(v[0], t)?;
            weighted_sum(g, y, &wts)
        },
        fault,
    )?);

    // conv -> relu -> softmax -> partial cross-entropy, all parameters free
    let (h, w, c) = (6, 6, 3);
    let x = random(r, &[1, 1, h, w], (-1.0, 1.0), 0.0);
    let k1 = random(r, &[4, 1, 3, 3], (-1.0, 1.0), 0.0);
    let b1 = random(r, &[4], (-0.5, 0.5), 0.0);
    let k2 = random(r, &[c, 4, 1, 1], (-1.0, 1.0), 0.0);
    let b2 = random(r, &[c], (-0.5, 0.5), 0.0);
    let scribble = random_scribble(r, h, w, c);
    // keep ReLU pre-activations off the kink for every perturbation
    let (k1, b1) = relu_safe(&x, k1, b1)?;
    out.push(check_gradients(
        SUITE[15],
        &[x, k1, b1, k2, b2],
        |g, v| {
            let a = g.conv2d(v[0], v[1], v[2])?;
            let a = g.relu(a)?;
            let z = g.conv2d(a, v[3], v[4])?;
            let p = g.softmax_channels(z)?;
            Ok(supervised_loss(g, p, &scribble, Reduction::Sum)?.0)
        },
        fault,
    )?);

    // losses with respect to logits on 8x8 maps
    let (h, w, c) = (8, 8, 4);
    let logits = random(r, &[1, c, h, w], (-2.0, 2.0), 0.0);
    let scribble = random_scribble(r, h, w, c);
    out.push(check_gradients(
        SUITE[16],
        std::slice::from_ref(&logits),
        |g, v| {
            let p = g.softmax_channels(v[0])?;
            Ok(supervised_loss(g, p, &scribble, Reduction::Sum)?.0)
        },
        fault,
    )?);

    let probs = softmax_value(&logits)?;
    let weights: Vec<f64> = (0..c).map(|_| r.random_range(0.1..1.0)).collect();
    let alpha = MixtureRatios::from_weights(&weights)?;
    let split = partition(&probs, &scribble, &alpha)?;
    for (name, include_background) in [(SUITE[17], false), (SUITE[18], true)] {
        let opts = NegativeOptions {
            include_background,
            reduction: Reduction::Sum,
        };
        out.push(check_gradients(
            name,
            std::slice::from_ref(&logits),
            |g, v| {
                let p = g.softmax_channels(v[0])?;
                Ok(negative_loss(g, p, &split, opts)?.value)
            },
            fault,
        )?);
    }

    let logits_aug = random(r, &[1, c, h, w], (-2.0, 2.0), 0.0);
    let aug = sample_augmentation(h, w, 3, r)?;
    out.push(check_gradients(
        SUITE[19],
        &[logits, logits_aug],
        |g, v| {
            let p = g.softmax_channels(v[0])?;
            let q = g.softmax_channels(v[1])?;
            global_consistency_loss(g, p, q, &aug, ConsistencyOptions::default())
        },
        fault,
    )?);
    Ok(out)
}

fn softmax_value(logits: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(logits.clone());
    let p = g.softmax_channels(v)?;
    Ok(g.value(p).clone())
}

/// Shifts biases so no first-layer pre-activation lies within 0.05 of zero.
fn relu_safe(x: &Tensor, k: Tensor, mut b: Tensor) -> Result<(Tensor, Tensor)> {
    for _ in 0..50 {
        let mut g = Graph::new();
        let (xv, kv, bv) = (
            g.constant(x.clone()),
            g.constant(k.clone()),
            g.constant(b.clone()),
        );
        let y = g.conv2d(xv, kv, bv)?;
        let (_, o, h, w) = g.value(y).dims4()?;
        let mut moved = false;
        for oc in 0..o {
            let plane = &g.value(y).data()[oc * h * w..(oc + 1) * h * w];
            if plane.iter().any(|v| v.abs() < 0.05) {
                b.data_mut()[oc] += 0.037;
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
    Ok((k, b))
}

/// Worst error per check over `seeds` consecutive seeds starting at `seed`.
pub fn standard_suite(seed: u64, seeds: usize, fault: Option<f64>) -> Result<Vec<GradCheck>> {
    let mut worst: Vec<GradCheck> = Vec::new();
    for s in 0..seeds as u64 {
        let run = suite_for_seed(seed.wrapping_add(s), fault)?;
        if worst.is_empty() {
            worst = run;
            continue;
        }
        for (acc, c) in worst.iter_mut().zip(run) {
            acc.worst_error = acc.worst_error.max(c.worst_error);
            acc.elements += c.elements;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_metric_floors() {
        assert_eq!(gradient_error(1.0, 1.0), 0.0);
        assert!(gradient_error(1e-9, 0.0) < REL_TOL);
        assert!(gradient_error(1.0, 1.001) > REL_TOL);
    }

    #[test]
    fn suite_passes_and_fault_is_caught() {
        let ok = suite_for_seed(3, None).unwrap();
        assert_eq!(ok.len(), SUITE.len());
        for c in &ok {
            assert!(c.passed(), "{} worst {}", c.name, c.worst_error);
        }
        let bad = suite_for_seed(3, Some(0.5)).unwrap();
        assert!(bad.iter().all(|c| !c.passed()));
    }
}
