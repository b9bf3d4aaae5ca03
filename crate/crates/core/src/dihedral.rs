//! The eight exact pixel-permutation symmetries of a square grid.

use crate::error::{Error, Result};
use crate::tensor::{Grid, Tensor};

/// Element of the dihedral group of order 8: an optional horizontal flip
/// followed by `quarter_turns` counter-clockwise 90-degree rotations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct Dihedral {
    quarter_turns: u8,
    flip: bool,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral {
        quarter_turns: 0,
        flip: false,
    };

    pub fn new(quarter_turns: u8, flip: bool) -> Self {
        Self {
            quarter_turns: quarter_turns % 4,
            flip,
        }
    }

    pub fn rotation(quarter_turns: u8) -> Self {
        Self::new(quarter_turns, false)
    }

    pub fn all() -> [Dihedral; 8] {
        let mut out = [Dihedral::IDENTITY; 8];
        for (i, slot) in out.iter_mut().enumerate() {
            *slot = Dihedral::new((i % 4) as u8, i >= 4);
        }
        out
    }

    /// Index 0..8, matching the order of [`Dihedral::all`].
    pub fn index(self) -> usize {
        self.quarter_turns as usize + if self.flip { 4 } else { 0 }
    }

    pub fn from_index(index: usize) -> Self {
        Self::new((index % 4) as u8, index % 8 >= 4)
    }

    pub fn quarter_turns(self) -> u8 {
        self.quarter_turns
    }

    pub fn flip(self) -> bool {
        self.flip
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(self, other: Dihedral) -> Dihedral {
        // F R^k = R^-k F
        let k = if self.flip {
            (self.quarter_turns + 4 - other.quarter_turns) % 4
        } else {
            (self.quarter_turns + other.quarter_turns) % 4
        };
        Dihedral::new(k, self.flip ^ other.flip)
    }

    pub fn inverse(self) -> Dihedral {
        if self.flip {
            // (R^k F)^-1 = F R^-k = R^k F
            self
        } else {
            Dihedral::rotation((4 - self.quarter_turns) % 4)
        }
    }

    fn check_dims(self, height: usize, width: usize) -> Result<()> {
        if self.quarter_turns % 2 == 1 && height != width {
            return Err(Error::Augment(format!(
                "90-degree rotation needs a square grid, got {height}x{width}"
            )));
        }
        Ok(())
    }

    /// Destination `(row, col)` of source pixel `(row, col)` in an `n x n` grid.
    fn destination(self, row: usize, col: usize, height: usize, width: usize) -> (usize, usize) {
        let (mut r, mut c) = if self.flip {
            (row, width - 1 - col)
        } else {
            (row, col)
        };
        let (mut h, mut w) = (height, width);
        for _ in 0..self.quarter_turns {
            // counter-clockwise: (r, c) -> (w - 1 - c, r), dims swap
            let nr = w - 1 - c;
            let nc = r;
            r = nr;
            c = nc;
            std::mem::swap(&mut h, &mut w);
        }
        (r, c)
    }

    /// For each destination flat index, the flat source index.
    pub fn source_map(self, height: usize, width: usize) -> Result<Vec<usize>> {
        self.check_dims(height, width)?;
        let mut map = vec![0usize; height * width];
        for r in 0..height {
            for c in 0..width {
                let (dr, dc) = self.destination(r, c, height, width);
                map[dr * width + dc] = r * width + c;
            }
        }
        Ok(map)
    }

    pub fn apply_grid<T: Clone>(self, grid: &Grid<T>) -> Result<Grid<T>> {
        let map = self.source_map(grid.height(), grid.width())?;
        let src = grid.data();
        Grid::from_vec(
            grid.height(),
            grid.width(),
            map.iter().map(|&s| src[s].clone()).collect(),
        )
    }

    /// Permutes every `H x W` plane of a rank-4 tensor.
    pub fn apply_tensor(self, tensor: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = tensor.dims4()?;
        let map = self.source_map(h, w)?;
        let plane = h * w;
        let src = tensor.data();
        let mut out = vec![0.0; src.len()];
        for p in 0..n * c {
            let base = p * plane;
            for (dst, &s) in out[base..base + plane].iter_mut().zip(&map) {
                *dst = src[base + s];
            }
        }
        Tensor::new(tensor.shape(), out)
    }
}
