//! Pretraining chunker: one token sequence becomes `(a, b, c)` where `a`
//! conditions the hypernetwork, `b` is the model input and `c` the target.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{HintError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkTriple {
    pub a: Vec<u32>,
    pub b: Vec<u32>,
    pub c: Vec<u32>,
}

impl ChunkTriple {
    pub fn concat(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.a.len() + self.b.len() + self.c.len());
        out.extend_from_slice(&self.a);
        out.extend_from_slice(&self.b);
        out.extend_from_slice(&self.c);
        out
    }
}

/// Splits `tokens` at two distinct interior cut points drawn uniformly.
///
/// Every chunk holds at least one token.
pub fn chunk_split<R: Rng + ?Sized>(tokens: &[u32], rng: &mut R) -> Result<ChunkTriple> {
    let n = tokens.len();
    if n < 3 {
        return Err(HintError::TooShort { len: n, min: 3 });
    }
    // cut points live in 1..n, i.e. n - 1 interior positions
    let picks = sample(rng, n - 1, 2);
    let (mut i, mut j) = (picks.index(0) + 1, picks.index(1) + 1);
    if i > j {
        std::mem::swap(&mut i, &mut j);
    }
    Ok(ChunkTriple {
        a: tokens[..i].to_vec(),
        b: tokens[i..j].to_vec(),
        c: tokens[j..].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn three_tokens_split_one_each() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let t = chunk_split(&[7, 8, 9], &mut rng).unwrap();
            assert_eq!((t.a, t.b, t.c), (vec![7], vec![8], vec![9]));
        }
    }

    #[test]
    fn short_sequences_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(chunk_split(&[1, 2], &mut rng), Err(HintError::TooShort { .. })));
        assert!(chunk_split(&[], &mut rng).is_err());
    }

    #[test]
    fn seeded_cuts_repeat() {
        let seq: Vec<u32> = (0..100).collect();
        let a = chunk_split(&seq, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = chunk_split(&seq, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reconstruction_over_ten_thousand_sequences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let n = rng.gen_range(3..64);
            let seq: Vec<u32> = (0..n).map(|_| rng.gen_range(0..259)).collect();
            let t = chunk_split(&seq, &mut rng).unwrap();
            assert!(!t.a.is_empty() && !t.b.is_empty() && !t.c.is_empty());
            assert_eq!(t.concat(), seq);
        }
    }

    proptest! {
        #[test]
        fn chunks_reconstruct(seq in proptest::collection::vec(0u32..259, 3..200), seed in any::<u64>()) {
            let t = chunk_split(&seq, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert!(!t.a.is_empty() && !t.b.is_empty() && !t.c.is_empty());
            prop_assert_eq!(t.concat(), seq);
        }
    }
}
