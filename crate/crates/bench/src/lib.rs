//! Shared fixtures for the criterion benchmarks.

use mnmt_core::model::{Batch, Example, ModelState, TransformerConfig};
use mnmt_core::Tensor;

/// Deterministic pseudo-random fill in [-1, 1).
pub fn filled(shape: &[usize], salt: u64) -> Tensor<f32> {
    Tensor::from_fn(shape, |i| {
        let mut x = (i as u64 ^ salt.rotate_left(17)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        x ^= x >> 31;
        (x % 20_000) as f32 / 10_000.0 - 1.0
    })
}

/// Desk-shaped model over a small vocabulary, dropout off.
pub fn desk_model(vocab: usize) -> ModelState<f32> {
    let mut cfg = TransformerConfig::desk(vocab);
    cfg.dropout = 0.0;
    ModelState::init(cfg, 7).expect("desk config is valid")
}

/// `rows` examples with source and target lengths near `len`.
pub fn batch(rows: usize, len: usize, vocab: usize) -> Batch {
    let examples: Vec<Example> = (0..rows)
        .map(|r| {
            let n = len - r % 3;
            let tok = |i: usize| (4 + (r * 31 + i * 7) % (vocab - 4)) as u32;
            Example { src: (0..n).map(tok).collect(), tgt: (0..n + 1).map(|i| tok(i + 1)).collect() }
        })
        .collect();
    Batch::from_examples(&examples.iter().collect::<Vec<_>>()).expect("non-empty batch")
}
