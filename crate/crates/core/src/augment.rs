//! Cutout masks, dihedral transforms and intensity normalization.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::dihedral::Dihedral;
use crate::error::{Error, Result};
use crate::tensor::{Grid, Image, Tensor};

/// Binary cutout mask `z` (0 inside the cut square) plus a dihedral
/// transform `T`. Applying it to `x` yields `T(z ⊙ x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CutoutAugmentation {
    mask: Grid<f64>,
    square_size: usize,
    top_left: (usize, usize),
    transform: Dihedral,
}

impl CutoutAugmentation {
    pub fn new(
        height: usize,
        width: usize,
        square_size: usize,
        top_left: (usize, usize),
        transform: Dihedral,
    ) -> Result<Self> {
        if top_left.0 + square_size > height || top_left.1 + square_size > width {
            return Err(Error::Augment(format!(
                "{square_size}px square at {top_left:?} does not fit {height}x{width}"
            )));
        }
        if transform.quarter_turns() % 2 == 1 && height != width {
            return Err(Error::Augment("odd rotations need a square image".into()));
        }
        let (r0, c0) = top_left;
        let mask = Grid::from_fn(height, width, |r, c| {
            let inside = (r0..r0 + square_size).contains(&r) && (c0..c0 + square_size).contains(&c);
            if inside {
                0.0
            } else {
                1.0
            }
        });
        Ok(Self {
            mask,
            square_size,
            top_left,
            transform,
        })
    }

    pub fn identity(height: usize, width: usize) -> Self {
        Self::new(height, width, 0, (0, 0), Dihedral::IDENTITY).expect("empty square always fits")
    }

    pub fn mask(&self) -> &Grid<f64> {
        &self.mask
    }

    pub fn square_size(&self) -> usize {
        self.square_size
    }

    pub fn top_left(&self) -> (usize, usize) {
        self.top_left
    }

    pub fn transform(&self) -> Dihedral {
        self.transform
    }

    /// `T(z)`: the cutout mask in the transformed frame.
    pub fn transformed_mask(&self) -> Grid<f64> {
        self.transform
            .apply_grid(&self.mask)
            .expect("dims checked at construction")
    }

    fn check(&self, h: usize, w: usize) -> Result<()> {
        if h != self.mask.height() || w != self.mask.width() {
            return Err(Error::Augment(format!(
                "tensor is {h}x{w}, cutout mask is {}x{}",
                self.mask.height(),
                self.mask.width()
            )));
        }
        Ok(())
    }

    /// `T(z ⊙ x)` for an `N x C x H x W` tensor, `z` broadcast over batch and channels.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        self.check(h, w)?;
        let z = self.mask.data();
        let plane = h * w;
        let masked: Vec<f64> = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * z[i % plane])
            .collect();
        self.transform
            .apply_tensor(&Tensor::new(x.shape(), masked)?)
    }

    pub fn apply_grid<T: Clone + Default>(&self, grid: &Grid<T>) -> Result<Grid<T>> {
        self.check(grid.height(), grid.width())?;
        let z = self.mask.data();
        let masked = Grid::from_vec(
            grid.height(),
            grid.width(),
            grid.data()
                .iter()
                .zip(z)
                .map(|(v, &keep)| if keep > 0.0 { v.clone() } else { T::default() })
                .collect(),
        )?;
        self.transform.apply_grid(&masked)
    }

    /// Differentiable `T(z ⊙ x)` inside a graph.
    pub fn apply_var(&self, graph: &mut Graph, x: Var) -> Result<Var> {
        let shape = graph.value(x).shape().to_vec();
        let (_, _, h, w) = graph.value(x).dims4()?;
        self.check(h, w)?;
        let z = broadcast_plane(self.mask.data(), &shape);
        let z = graph.constant(z);
        let masked = graph.mul(x, z)?;
        graph.transform(masked, self.transform)
    }

    /// Differentiable `T(z) ⊙ y` for `y` already in the transformed frame.
    pub fn mask_transformed_var(&self, graph: &mut Graph, y: Var) -> Result<Var> {
        let shape = graph.value(y).shape().to_vec();
        let (_, _, h, w) = graph.value(y).dims4()?;
        self.check(h, w)?;
        let tz = broadcast_plane(self.transformed_mask().data(), &shape);
        let tz = graph.constant(tz);
        graph.mul(y, tz)
    }
}

fn broadcast_plane(plane: &[f64], shape: &[usize]) -> Tensor {
    let n = plane.len();
    Tensor::from_fn(shape, |i| plane[i % n])
}

/// Samples a cutout position uniformly over all valid placements and a
/// transform uniformly over the eight dihedral elements.
pub fn sample_augmentation(
    height: usize,
    width: usize,
    square_size: usize,
    rng: &mut impl Rng,
) -> Result<CutoutAugmentation> {
    if square_size > height.min(width) {
        return Err(Error::Augment(format!(
            "square of {square_size} does not fit {height}x{width}"
        )));
    }
    let r = rng.random_range(0..=height - square_size);
    let c = rng.random_range(0..=width - square_size);
    let t = if height == width {
        Dihedral::from_index(rng.random_range(0..8))
    } else {
        // only the half-turn and flips keep a rectangle's dims
        Dihedral::new(2 * rng.random_range(0..2u8), rng.random_bool(0.5))
    };
    CutoutAugmentation::new(height, width, square_size, (r, c), t)
}

/// Per-image zero mean, unit (population) variance. A constant image
/// becomes all zeros and the returned flag is `true`.
pub fn normalize_intensity(image: &Image) -> (Image, bool) {
    let n = image.len() as f64;
    let mean = image.data().iter().sum::<f64>() / n;
    let var = image.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if var <= 0.0 || !var.is_finite() {
        return (Image::filled(image.height(), image.width(), 0.0), true);
    }
    let sd = var.sqrt();
    let data = image.data().iter().map(|v| (v - mean) / sd).collect();
    (
        Image::from_vec(image.height(), image.width(), data).expect("same dims"),
        false,
    )
}
