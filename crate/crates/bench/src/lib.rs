//! Inputs shared by the criterion benches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sketchhash_core::optimizer::{CodeProblem, CodeState};
use sketchhash_core::{CodeMatrix, DenseMatrix, Dictionary, PackedCodeIndex};

pub fn random_index(bits: usize, n: usize, seed: u64) -> PackedCodeIndex {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PackedCodeIndex::pack_sequential(&CodeMatrix::random(bits, n, &mut rng))
        .expect("non-empty codes")
}

/// Random code state and class-structured problem of the given size.
pub fn code_instance(
    bits: usize,
    dim: usize,
    n_images: usize,
    n_sketches: usize,
    seed: u64,
) -> (CodeState, CodeProblem) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = 10;
    let li: Vec<usize> = (0..n_images)
        .map(|_| rng.random_range(0..classes))
        .collect();
    let ls: Vec<usize> = (0..n_sketches)
        .map(|_| rng.random_range(0..classes))
        .collect();
    let mut uniform =
        |r: usize, c: usize| DenseMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
    let table = uniform(dim, classes);
    let d_mat = uniform(dim, bits);
    let f_image = uniform(bits, n_images);
    let f_sketch = uniform(bits, n_sketches);
    let state = CodeState {
        image_codes: CodeMatrix::random(bits, n_images, &mut rng),
        sketch_codes: CodeMatrix::random(bits, n_sketches, &mut rng),
        dict: Dictionary { d_mat },
        f_image,
        f_sketch,
    };
    let problem = CodeProblem {
        w: DenseMatrix::from_fn(n_images, n_sketches, |i, j| {
            if li[i] == ls[j] {
                1.0
            } else {
                -1.0
            }
        }),
        phi_image: DenseMatrix::from_fn(dim, n_images, |a, i| table[(a, li[i])]),
        phi_sketch: DenseMatrix::from_fn(dim, n_sketches, |a, j| table[(a, ls[j])]),
    };
    (state, problem)
}
