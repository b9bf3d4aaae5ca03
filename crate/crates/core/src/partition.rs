//! Ranking-based split of unlabeled pixels into predicted positives and
//! predicted negatives per foreground class.

use crate::error::{Error, Result};
use crate::mixture::MixtureRatios;
use crate::tensor::{ScribbleMask, Tensor, UNLABELED};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassPartition {
    pub class: usize,
    /// Flat pixel indices ranked into the top `round(α_j · n_u)`.
    pub positive: Vec<usize>,
    /// Remaining unlabeled pixels, ascending pixel order.
    pub negative: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionResult {
    /// One entry per foreground class `1..=m`.
    pub classes: Vec<ClassPartition>,
    pub unlabeled: usize,
}

impl PartitionResult {
    pub fn for_class(&self, class: usize) -> Option<&ClassPartition> {
        self.classes.iter().find(|p| p.class == class)
    }

    pub fn negative_total(&self) -> usize {
        self.classes.iter().map(|p| p.negative.len()).sum()
    }
}

/// Splits the unlabeled pixels of one image.
///
/// `probs` is `1 x (m+1) x H x W`. For each foreground class the unlabeled
/// pixels are sorted by descending probability (ties by ascending pixel
/// index) and the first `round(α_j · n_u)` become positives. The sets of
/// different classes may overlap.
pub fn partition(
    probs: &Tensor,
    scribble: &ScribbleMask,
    alpha: &MixtureRatios,
) -> Result<PartitionResult> {
    let (n, c, h, w) = probs.dims4()?;
    if n != 1 || h != scribble.height() || w != scribble.width() {
        return Err(Error::shape(
            "partition",
            format!("probabilities {:?} vs scribble {h}x{w}", probs.shape()),
        ));
    }
    if alpha.len() != c {
        return Err(Error::shape(
            "partition",
            format!("{} ratios for {c} classes", alpha.len()),
        ));
    }
    let unlabeled: Vec<usize> = scribble
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == UNLABELED)
        .map(|(i, _)| i)
        .collect();
    let n_u = unlabeled.len();
    if n_u == 0 {
        return Err(Error::NoUnlabeled);
    }
    let classes = (1..c)
        .map(|class| {
            let plane = probs.plane(0, class);
            let mut ranked = unlabeled.clone();
            ranked.sort_by(|&a, &b| plane[b].total_cmp(&plane[a]).then(a.cmp(&b)));
            let k = ((alpha.get(class) * n_u as f64).round() as usize).min(n_u);
            let mut negative = ranked.split_off(k);
            negative.sort_unstable();
            ClassPartition {
                class,
                positive: ranked,
                negative,
            }
        })
        .collect();
    Ok(PartitionResult {
        classes,
        unlabeled: n_u,
    })
}
