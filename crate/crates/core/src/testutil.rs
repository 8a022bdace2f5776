//! Tiny models and random data shared by unit tests.

use rand::Rng as _;

use crate::corpus::{SentencePair, Vocab, EOS};
use crate::model::{ArchConfig, ArchFamily, Model};
use crate::seed::rng_for;

pub fn tiny_vocab() -> Vocab {
    Vocab::new(["a", "b", "c", "d"]).unwrap()
}

/// Under 500 parameters for an 8-token vocabulary.
pub fn tiny_arch(family: ArchFamily) -> ArchConfig {
    match family {
        ArchFamily::Attention => ArchConfig { family, embed_dim: 4, hidden_dim: 3, layers: 1, max_len: 3, dropout: 0.0 },
        ArchFamily::Recurrent => ArchConfig { family, embed_dim: 3, hidden_dim: 3, layers: 1, max_len: 3, dropout: 0.0 },
    }
}

pub fn tiny_model(family: ArchFamily, seed: u64) -> Model {
    Model::new(&tiny_arch(family), &tiny_vocab(), seed).unwrap()
}

/// Random pairs over the ordinary tokens of [`tiny_vocab`].
pub fn random_pairs(n: usize, max_len: usize, seed: u64) -> Vec<SentencePair> {
    let mut rng = rng_for(seed, "pairs");
    (0..n)
        .map(|_| {
            let ls = rng.random_range(1..=max_len);
            let lt = rng.random_range(1..=max_len);
            let source = (0..ls).map(|_| rng.random_range(4..8)).collect();
            let mut target: Vec<u32> = (0..lt).map(|_| rng.random_range(4..8)).collect();
            target.push(EOS);
            SentencePair { source, target }
        })
        .collect()
}

/// Random strictly positive distribution.
pub fn random_dist(len: usize, rng: &mut impl rand::Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..len).map(|_| rng.random_range(-3.0..3.0)).collect();
    crate::autograd::softmax(&raw)
}
