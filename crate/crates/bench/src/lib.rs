//! Fixtures shared by the benchmarks.

use kvedit_core::synthetic::{synthetic_sd_checkpoint, SD_TEXT_DIM};
use kvedit_core::{select_cross_attention, AttentionLayerSet, ConceptTask, Dtype, Embedding, EraseSpec, SelectionPattern};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn embedding(rng: &mut impl Rng, label: &str, dim: usize, tokens: usize) -> Embedding {
    Embedding::new(label, DMatrix::from_fn(dim, tokens, |_, _| rng.random_range(-1.0..1.0))).expect("finite")
}

/// The 32 SD v1.4-shaped K/V matrices with one erase task and one preserved
/// concept.
pub fn sd_problem(seed: u64, tokens: usize) -> (AttentionLayerSet, EraseSpec) {
    let file = synthetic_sd_checkpoint(seed, SD_TEXT_DIM, Dtype::F32).expect("fixture");
    let layers = select_cross_attention(&file, &SelectionPattern::default()).expect("selection");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let task = ConceptTask::new(
        "concept",
        embedding(&mut rng, "c", SD_TEXT_DIM, tokens),
        embedding(&mut rng, "c*", SD_TEXT_DIM, 1),
    )
    .expect("task");
    let spec = EraseSpec::new(vec![task], vec![embedding(&mut rng, "p", SD_TEXT_DIM, 1)]);
    (layers, spec)
}
