//! Deterministic SD-shaped fixtures for benchmarks and integration tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::checkpoint::{Dtype, TensorFile};
use crate::error::Result;

/// Text-embedding width of SD v1.x cross-attention.
pub const SD_TEXT_DIM: usize = 768;

/// `(block prefix, output width)` of the sixteen cross-attention blocks of
/// an SD v1.4 U-Net, in diffusers naming.
pub fn sd_v14_attention_blocks() -> Vec<(String, usize)> {
    let mut blocks = Vec::with_capacity(16);
    for (i, width) in [320, 640, 1280].into_iter().enumerate() {
        for a in 0..2 {
            blocks.push((format!("down_blocks.{i}.attentions.{a}.transformer_blocks.0"), width));
        }
    }
    blocks.push(("mid_block.attentions.0.transformer_blocks.0".to_owned(), 1280));
    for (i, width) in [(1, 1280), (2, 640), (3, 320)] {
        for a in 0..3 {
            blocks.push((format!("up_blocks.{i}.attentions.{a}.transformer_blocks.0"), width));
        }
    }
    blocks
}

fn normal(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect()
}

/// Random K/V cross-attention weights with SD v1.4 shapes (32 matrices of
/// `out x embed_dim`) plus a small unselected tensor.
pub fn synthetic_sd_checkpoint(seed: u64, embed_dim: usize, dtype: Dtype) -> Result<TensorFile> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (embed_dim as f64).sqrt();
    let mut tensors = Vec::new();
    for (prefix, out) in sd_v14_attention_blocks() {
        for proj in ["to_k", "to_v"] {
            tensors.push((
                format!("{prefix}.attn2.{proj}.weight"),
                dtype,
                vec![out, embed_dim],
                normal(&mut rng, out * embed_dim, scale),
            ));
        }
    }
    tensors.push(("conv_in.weight".to_owned(), dtype, vec![320, 4, 3, 3], normal(&mut rng, 320 * 36, 0.1)));
    TensorFile::from_tensors(tensors, None)
}

/// One embedding tensor per label, `[tokens, dim]` (or `[dim]` when
/// `tokens == 1`), drawn from a standard normal.
pub fn synthetic_embeddings(seed: u64, dim: usize, tokens: usize, labels: &[&str]) -> Result<TensorFile> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TensorFile::from_tensors(
        labels.iter().map(|label| {
            let shape = if tokens == 1 { vec![dim] } else { vec![tokens, dim] };
            (label.to_string(), Dtype::F32, shape, normal(&mut rng, dim * tokens, 1.0))
        }),
        None,
    )
}
