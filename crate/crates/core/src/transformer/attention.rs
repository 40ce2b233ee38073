use super::adaptation::PrefixVars;
use crate::error::{HintError, Result};
use crate::numerics::{Tape, Var};

/// Multi-head scaled dot-product attention.
///
/// `q` is `Tq × d`, `k` and `v` are `Tk × d`. Prefix keys and values (`p × d`)
/// are prepended to `k`/`v` before scoring and stay visible to every query
/// even under the causal mask. Returns `Tq × d`.
pub fn attention(
    tape: &mut Tape<'_>,
    q: Var,
    k: Var,
    v: Var,
    prefix: Option<&PrefixVars>,
    causal: bool,
    heads: usize,
) -> Result<Var> {
    attention_with_weights(tape, q, k, v, prefix, causal, heads).map(|(out, _)| out)
}

/// As [`attention`], also returning each head's `Tq × (p + Tk)` weight matrix.
pub fn attention_with_weights(
    tape: &mut Tape<'_>,
    q: Var,
    k: Var,
    v: Var,
    prefix: Option<&PrefixVars>,
    causal: bool,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let d = tape.cols(q);
    if tape.cols(k) != d || tape.cols(v) != d || tape.rows(k) != tape.rows(v) {
        return Err(HintError::Shape(format!(
            "attention q {:?}, k {:?}, v {:?}",
            tape.shape(q),
            tape.shape(k),
            tape.shape(v)
        )));
    }
    if heads == 0 || d % heads != 0 {
        return Err(HintError::Shape(format!("{d} columns do not split into {heads} heads")));
    }
    let (k, v, p) = match prefix {
        Some(pre) if tape.rows(pre.keys) > 0 => {
            if tape.cols(pre.keys) != d
                || tape.cols(pre.values) != d
                || tape.rows(pre.keys) != tape.rows(pre.values)
            {
                return Err(HintError::Shape(format!(
                    "prefix keys {:?} / values {:?} do not match attention width {d}",
                    tape.shape(pre.keys),
                    tape.shape(pre.values)
                )));
            }
            let p = tape.rows(pre.keys);
            (
                tape.concat_rows(&[pre.keys, k])?,
                tape.concat_rows(&[pre.values, v])?,
                p,
            )
        }
        _ => (k, v, 0),
    };
    let head_dim = d / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * head_dim, head_dim)?,
                tape.slice_cols(k, h * head_dim, head_dim)?,
                tape.slice_cols(v, h * head_dim, head_dim)?,
            )
        };
        let scores = tape.matmul_bt(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let w = tape.softmax_masked(scores, causal.then_some(p));
        outs.push(tape.matmul(w, vh)?);
        weights.push(w);
    }
    let out = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    Ok((out, weights))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_length_prefix_is_vanilla() {
        let mut tape = Tape::new();
        let q = tape.constant(vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6], 3, 2);
        let k = tape.constant(vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5], 3, 2);
        let v = tape.constant(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 3, 2);
        let empty = PrefixVars {
            keys: tape.constant(vec![], 0, 2),
            values: tape.constant(vec![], 0, 2),
        };
        for causal in [false, true] {
            let a = attention(&mut tape, q, k, v, None, causal, 2).unwrap();
            let b = attention(&mut tape, q, k, v, Some(&empty), causal, 2).unwrap();
            assert_eq!(tape.data(a), tape.data(b));
        }
    }

    #[test]
    fn weight_rows_cover_prefix_and_sum_to_one() {
        let mut tape = Tape::new();
        let q = tape.constant((0..12).map(|i| i as f64 * 0.1).collect(), 3, 4);
        let k = tape.constant((0..20).map(|i| (i as f64 * 0.37).sin()).collect(), 5, 4);
        let v = tape.constant((0..20).map(|i| (i as f64 * 0.11).cos()).collect(), 5, 4);
        let pre = PrefixVars {
            keys: tape.constant(vec![0.3; 8], 2, 4),
            values: tape.constant(vec![-0.2; 8], 2, 4),
        };
        let (out, weights) = attention_with_weights(&mut tape, q, k, v, Some(&pre), false, 2).unwrap();
        assert_eq!(tape.shape(out), (3, 4));
        for w in weights {
            assert_eq!(tape.shape(w), (3, 7));
            for row in tape.data(w).chunks(7) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn causal_mask_keeps_prefix_visible() {
        let mut tape = Tape::new();
        let q = tape.constant(vec![0.5; 6], 3, 2);
        let k = tape.constant(vec![0.1; 6], 3, 2);
        let v = tape.constant(vec![1.0; 6], 3, 2);
        let pre = PrefixVars {
            keys: tape.constant(vec![0.2; 4], 2, 2),
            values: tape.constant(vec![0.0; 4], 2, 2),
        };
        let (_, w) = attention_with_weights(&mut tape, q, k, v, Some(&pre), true, 1).unwrap();
        let w = tape.data(w[0]).to_vec();
        // row 0 sees both prefix slots and token 0 only
        assert!(w[0] > 0.0 && w[1] > 0.0 && w[2] > 0.0);
        assert_eq!(&w[3..5], &[0.0, 0.0]);
        // last row sees everything
        assert!(w[10..15].iter().all(|&x| x > 0.0));
    }

    #[test]
    fn single_head_scalar_case() {
        // d = k = 1; q = 1; keys [0, 1] with prefix key 2; values [10, 20], prefix value 30.
        // weights ∝ exp([2, 0, 1]); output = Σ w·v.
        let mut tape = Tape::new();
        let q = tape.constant(vec![1.0], 1, 1);
        let k = tape.constant(vec![0.0, 1.0], 2, 1);
        let v = tape.constant(vec![10.0, 20.0], 2, 1);
        let pre = PrefixVars {
            keys: tape.constant(vec![2.0], 1, 1),
            values: tape.constant(vec![30.0], 1, 1),
        };
        let out = attention(&mut tape, q, k, v, Some(&pre), false, 1).unwrap();
        let e = [2.0f64.exp(), 1.0, 1.0f64.exp()];
        let z: f64 = e.iter().sum();
        let expected = (30.0 * e[0] + 10.0 * e[1] + 20.0 * e[2]) / z;
        assert!((tape.data(out)[0] - expected).abs() < 1e-12);
        assert!((expected - 25.752_103_826_044_415).abs() < 1e-9);
    }

    #[test]
    fn mismatched_prefix_width_is_rejected() {
        let mut tape = Tape::new();
        let q = tape.constant(vec![0.0; 4], 2, 2);
        let pre = PrefixVars {
            keys: tape.constant(vec![0.0; 3], 1, 3),
            values: tape.constant(vec![0.0; 3], 1, 3),
        };
        assert!(attention(&mut tape, q, q, q, Some(&pre), false, 1).is_err());
    }
}
