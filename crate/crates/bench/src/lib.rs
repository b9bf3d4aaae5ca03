//! Benchmark fixtures shared by the criterion targets.

use shapepu_core::{generate_phantom, Example, PhantomSpec, Tensor};

/// Normalized phantom `index` of the default benchmark.
pub fn phantom_example(index: u64) -> Example {
    let s = generate_phantom(&PhantomSpec::default(), index).expect("default spec is valid");
    Example::new(index.to_string(), &s.image, s.scribble, s.mask)
}

/// Deterministic pseudo-random tensor with entries in `[-1, 1)`.
pub fn tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    Tensor::from_fn(shape, |_| {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    })
}
