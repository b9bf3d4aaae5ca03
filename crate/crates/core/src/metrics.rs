//! Dice, Hausdorff distance and largest-component post-processing.

use crate::distance::squared_edt;
use crate::tensor::{LabelMap, Tensor};

/// `2|A∩B| / (|A|+|B|)` for the pixels of `class`; 1.0 when both are empty.
pub fn dice(pred: &LabelMap, truth: &LabelMap, class: u8) -> f64 {
    assert!(pred.same_dims(truth), "dice on masks of different size");
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        let (ip, it) = (p == class, t == class);
        a += ip as usize;
        b += it as usize;
        both += (ip && it) as usize;
    }
    if a + b == 0 {
        1.0
    } else {
        2.0 * both as f64 / (a + b) as f64
    }
}

/// Symmetric Hausdorff distance (pixel units) between the `class` pixels of
/// two masks, or `None` when either set is empty.
pub fn hausdorff(pred: &LabelMap, truth: &LabelMap, class: u8) -> Option<f64> {
    assert!(
        pred.same_dims(truth),
        "hausdorff on masks of different size"
    );
    let a: Vec<bool> = pred.data().iter().map(|&l| l == class).collect();
    let b: Vec<bool> = truth.data().iter().map(|&l| l == class).collect();
    if !a.iter().any(|&x| x) || !b.iter().any(|&x| x) {
        return None;
    }
    let (h, w) = (pred.height(), pred.width());
    Some(directed(h, w, &a, &b).max(directed(h, w, &b, &a)))
}

/// `max_{x∈from} min_{y∈to} |x - y|` via the distance transform of `to`.
fn directed(h: usize, w: usize, from: &[bool], to: &[bool]) -> f64 {
    let d = squared_edt(h, w, to);
    from.iter()
        .zip(&d)
        .filter(|(&f, _)| f)
        .map(|(_, &v)| v)
        .fold(0.0, f64::max)
        .sqrt()
}

/// Labels 8-connected components of `mask == class`; returns per-pixel
/// component ids (`usize::MAX` outside) and component sizes in anchor
/// (first row-major pixel) order.
pub fn components(mask: &LabelMap, class: u8) -> (Vec<usize>, Vec<usize>) {
    let (h, w) = (mask.height(), mask.width());
    let n = h * w;
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let on = |i: usize| mask.data()[i] == class;
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if !on(i) {
                continue;
            }
            // already-visited neighbours: W, NW, N, NE
            let mut neigh = [None; 4];
            if c > 0 {
                neigh[0] = Some(i - 1);
            }
            if r > 0 {
                if c > 0 {
                    neigh[1] = Some(i - w - 1);
                }
                neigh[2] = Some(i - w);
                if c + 1 < w {
                    neigh[3] = Some(i - w + 1);
                }
            }
            for j in neigh.into_iter().flatten() {
                if on(j) {
                    let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                    if ri != rj {
                        // keep the smaller index as root so roots are anchors
                        let (lo, hi) = if ri < rj { (ri, rj) } else { (rj, ri) };
                        parent[hi] = lo;
                    }
                }
            }
        }
    }
    let mut ids = vec![usize::MAX; n];
    let mut root_id = vec![usize::MAX; n];
    let mut sizes = Vec::new();
    for i in 0..n {
        if !on(i) {
            continue;
        }
        let root = find(&mut parent, i);
        if root_id[root] == usize::MAX {
            root_id[root] = sizes.len();
            sizes.push(0);
        }
        ids[i] = root_id[root];
        sizes[root_id[root]] += 1;
    }
    (ids, sizes)
}

/// Keeps only the largest 8-connected component of each foreground class
/// (`1..=classes`); everything else of that class becomes background. Ties
/// keep the component whose first pixel comes earliest in row-major order.
pub fn keep_largest_component(pred: &LabelMap, classes: usize) -> LabelMap {
    let mut out = pred.clone();
    for class in 1..=classes as u8 {
        let (ids, sizes) = components(pred, class);
        if sizes.len() <= 1 {
            continue;
        }
        // ids are numbered in anchor order, so the first maximum wins ties
        let keep = sizes
            .iter()
            .enumerate()
            .fold(
                (0, 0),
                |best, (id, &s)| if s > best.1 { (id, s) } else { best },
            )
            .0;
        for (i, &id) in ids.iter().enumerate() {
            if id != usize::MAX && id != keep {
                out.data_mut()[i] = 0;
            }
        }
    }
    out
}

/// Per-pixel argmax of a `1 x C x H x W` probability map; ties pick the lower class.
pub fn argmax(probs: &Tensor) -> LabelMap {
    let (_, c, h, w) = probs.dims4().expect("rank-4 probabilities");
    let hw = h * w;
    let d = probs.data();
    LabelMap::from_fn(h, w, |r, col| {
        let p = r * w + col;
        let mut best = 0;
        for k in 1..c {
            if d[k * hw + p] > d[best * hw + p] {
                best = k;
            }
        }
        best as u8
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    /// Dice per foreground class `1..=m`.
    pub dice: Vec<f64>,
    /// Hausdorff distance per foreground class; `None` when undefined.
    pub hausdorff: Vec<Option<f64>>,
}

impl EvalResult {
    pub fn mean_dice(&self) -> f64 {
        self.dice.iter().sum::<f64>() / self.dice.len().max(1) as f64
    }

    /// Mean over classes with a defined distance.
    pub fn mean_hausdorff(&self) -> Option<f64> {
        let defined: Vec<f64> = self.hausdorff.iter().flatten().copied().collect();
        if defined.is_empty() {
            None
        } else {
            Some(defined.iter().sum::<f64>() / defined.len() as f64)
        }
    }
}

pub fn evaluate(pred: &LabelMap, truth: &LabelMap, classes: usize) -> EvalResult {
    EvalResult {
        dice: (1..=classes as u8).map(|c| dice(pred, truth, c)).collect(),
        hausdorff: (1..=classes as u8)
            .map(|c| hausdorff(pred, truth, c))
            .collect(),
    }
}
