//! Encoder attention: dense masked attention and the block-structured variant.
//!
//! Both take per-head projections of shape `[H, T, d]` and return `[H, T, d]`.
//! Logits are not scaled by `1/sqrt(d)`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{BucketParams, RelativeBiasTable, SegmentLayout};
use crate::tensor::{Tape, Tensor, Var, MASK_SENTINEL};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionVariant {
    Full,
    Saicl,
}

impl std::fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::Saicl => "saicl",
        })
    }
}

impl std::str::FromStr for AttentionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "saicl" => Ok(Self::Saicl),
            other => Err(Error::Config(format!("unknown attention variant '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub variant: AttentionVariant,
    pub heads: usize,
    pub head_dim: usize,
    pub dropout_rate: f64,
    pub bias: BucketParams,
}

impl AttentionConfig {
    pub fn validate(&self, model_width: usize) -> Result<()> {
        if self.heads * self.head_dim != model_width {
            return Err(Error::Config(format!(
                "{} heads x {} dims does not equal width {model_width}",
                self.heads, self.head_dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        self.bias.validate()
    }
}

/// Inverted dropout on attention probabilities.
pub struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, rng: ChaCha8Rng) -> Self {
        Self { rate, rng }
    }

    fn apply(&mut self, tape: &Tape, probs: Var) -> Result<Var> {
        if self.rate == 0.0 {
            return Ok(probs);
        }
        let shape = tape.shape(probs);
        let keep = 1.0 - self.rate;
        let mask = Tensor::from_fn(&shape, |_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 });
        tape.mul(probs, tape.constant(mask))
    }
}

fn maybe_dropout(tape: &Tape, probs: Var, dropout: &mut Option<&mut Dropout>) -> Result<Var> {
    match dropout {
        Some(d) => d.apply(tape, probs),
        None => Ok(probs),
    }
}

fn check_qkv(tape: &Tape, q: Var, k: Var, v: Var) -> Result<(usize, usize, usize, usize)> {
    let (qs, ks, vs) = (tape.shape(q), tape.shape(k), tape.shape(v));
    if qs.len() != 3 || ks.len() != 3 || vs.len() != 3 {
        return Err(Error::Shape(format!("attention inputs must be [H, T, d]: {qs:?} {ks:?} {vs:?}")));
    }
    if qs[0] != ks[0] || ks[0] != vs[0] || qs[2] != ks[2] || ks[1] != vs[1] {
        return Err(Error::Shape(format!("inconsistent attention inputs {qs:?} {ks:?} {vs:?}")));
    }
    Ok((qs[0], qs[1], ks[1], qs[2]))
}

/// `softmax(Q K^T + bias + mask) V` per head, materializing the full score matrix.
///
/// `mask` and `bias` are additive and broadcast against `[H, Tq, Tk]`.
pub fn full_attention(
    tape: &Tape,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<Var>,
    bias: Option<Var>,
    mut dropout: Option<&mut Dropout>,
) -> Result<Var> {
    check_qkv(tape, q, k, v)?;
    let mut scores = tape.contract("htd,hrd->htr", q, k)?;
    if let Some(b) = bias {
        scores = tape.add(scores, b)?;
    }
    if let Some(m) = mask {
        scores = tape.add(scores, m)?;
    }
    let probs = tape.softmax_last(scores)?;
    let probs = maybe_dropout(tape, probs, &mut dropout)?;
    tape.contract("htr,hrd->htd", probs, v)
}

/// Probability blocks of structured attention before they are applied to values.
struct StructuredProbs {
    /// `[k, H, L, 2L]`: each demonstration row over `[own segment | test segment]`.
    demos: Option<Var>,
    /// `[H, L, T]`: each test row over the whole prompt.
    test: Var,
}

fn structured_probs(
    tape: &Tape,
    q4: Var,
    k4: Var,
    layout: &SegmentLayout,
    bias: Option<&RelativeBiasTable>,
    dropout: &mut Option<&mut Dropout>,
) -> Result<StructuredProbs> {
    let shape = tape.shape(q4);
    let (heads, segments, l) = (shape[0], shape[1], shape[2]);
    let k = segments - 1;

    let key_mask = tape.constant(Tensor::new(&[segments, 1, 1, l], layout.key_mask())?);
    // diagonal blocks [S, H, L, L]
    let mut diag = tape.contract("hstd,hsrd->shtr", q4, k4)?;
    if let Some(table) = bias {
        diag = tape.add(diag, table.segment_bias(tape, l)?)?;
    }
    diag = tape.add(diag, key_mask)?;

    let q_test = tape.reshape(tape.slice(q4, 1, k, 1)?, &[heads, l, shape[3]])?;
    let test_diag = tape.reshape(tape.slice(diag, 0, k, 1)?, &[heads, l, l])?;
    let mask = layout.key_mask();

    if k == 0 {
        let test = tape.softmax_last(test_diag)?;
        let test = maybe_dropout(tape, test, dropout)?;
        return Ok(StructuredProbs { demos: None, test });
    }

    let k_test = tape.reshape(tape.slice(k4, 1, k, 1)?, &[heads, l, shape[3]])?;
    let q_demo = tape.slice(q4, 1, 0, k)?;
    let k_demo = tape.slice(k4, 1, 0, k)?;

    // last block column: demonstrations attending to the test segment [k, H, L, L]
    let test_key_mask = tape.constant(Tensor::new(&[l], mask[k * l..].to_vec())?);
    let global_key = tape.add(tape.contract("hstd,hrd->shtr", q_demo, k_test)?, test_key_mask)?;
    let demo_rows = tape.concat(&[tape.slice(diag, 0, 0, k)?, global_key], 3)?;
    let demos = tape.softmax_last(demo_rows)?;
    let demos = maybe_dropout(tape, demos, dropout)?;

    // last block row: the test segment attending to every demonstration [H, L, k, L]
    let demo_key_mask = tape.constant(Tensor::new(&[k, l], mask[..k * l].to_vec())?);
    let global_query = tape.add(tape.contract("htd,hsrd->htsr", q_test, k_demo)?, demo_key_mask)?;
    let global_query = tape.reshape(global_query, &[heads, l, k * l])?;
    let test_rows = tape.concat(&[global_query, test_diag], 2)?;
    let test = tape.softmax_last(test_rows)?;
    let test = maybe_dropout(tape, test, dropout)?;

    Ok(StructuredProbs { demos: Some(demos), test })
}

fn split_segments(tape: &Tape, x: Var, layout: &SegmentLayout) -> Result<Var> {
    let shape = tape.shape(x);
    let l = layout.segment_length();
    if shape[1] % l != 0 {
        return Err(Error::NonDivisibleLength { total: shape[1], segment_length: l });
    }
    if shape[1] != layout.total_length() {
        return Err(Error::Shape(format!(
            "sequence of {} tokens for a layout of {}",
            shape[1],
            layout.total_length()
        )));
    }
    tape.reshape(x, &[shape[0], shape[1] / l, l, shape[2]])
}

/// Structured attention over a segmented prompt.
///
/// Demonstration rows are normalized over their own segment plus the test
/// segment; test rows over the whole prompt. Relative position bias is applied
/// only within segments. Scores are held as `O(k L^2)` blocks.
pub fn saicl_attention(
    tape: &Tape,
    q: Var,
    k: Var,
    v: Var,
    layout: &SegmentLayout,
    bias: Option<&RelativeBiasTable>,
    mut dropout: Option<&mut Dropout>,
) -> Result<Var> {
    let (heads, t, _, d) = check_qkv(tape, q, k, v)?;
    let (q4, k4, v4) = (split_segments(tape, q, layout)?, split_segments(tape, k, layout)?, split_segments(tape, v, layout)?);
    let l = layout.segment_length();
    let demos = layout.demos();
    let probs = structured_probs(tape, q4, k4, layout, bias, &mut dropout)?;

    let test_out = tape.contract("htr,hrd->htd", probs.test, v)?;
    let test_out = tape.reshape(test_out, &[heads, 1, l, d])?;
    let Some(demo_probs) = probs.demos else {
        return tape.reshape(test_out, &[heads, t, d]);
    };

    let own = tape.slice(demo_probs, 3, 0, l)?;
    let to_test = tape.slice(demo_probs, 3, l, l)?;
    let v_demo = tape.slice(v4, 1, 0, demos)?;
    let v_test = tape.reshape(tape.slice(v4, 1, demos, 1)?, &[heads, l, d])?;
    let demo_out = tape.add(
        tape.contract("shtr,hsrd->hstd", own, v_demo)?,
        tape.contract("shtr,hrd->hstd", to_test, v_test)?,
    )?;
    let out = tape.concat(&[demo_out, test_out], 1)?;
    tape.reshape(out, &[heads, t, d])
}

/// Dense `[H, T, T]` reconstruction of the structured attention weights.
pub fn saicl_attention_weights(
    tape: &Tape,
    q: Var,
    k: Var,
    layout: &SegmentLayout,
    bias: Option<&RelativeBiasTable>,
) -> Result<Tensor> {
    let (heads, t, _, _) = check_qkv(tape, q, k, k)?;
    let (q4, k4) = (split_segments(tape, q, layout)?, split_segments(tape, k, layout)?);
    let l = layout.segment_length();
    let demos = layout.demos();
    let probs = structured_probs(tape, q4, k4, layout, bias, &mut None)?;
    let test = tape.value(probs.test);
    let mut dense = vec![0.0; heads * t * t];
    for h in 0..heads {
        for row in 0..l {
            let query = demos * l + row;
            for key in 0..t {
                dense[(h * t + query) * t + key] = test.get(&[h, row, key]);
            }
        }
    }
    if let Some(dp) = probs.demos {
        let dp = tape.value(dp);
        for s in 0..demos {
            for h in 0..heads {
                for row in 0..l {
                    let query = s * l + row;
                    for c in 0..l {
                        dense[(h * t + query) * t + s * l + c] = dp.get(&[s, h, row, c]);
                        dense[(h * t + query) * t + demos * l + c] = dp.get(&[s, h, row, l + c]);
                    }
                }
            }
        }
    }
    Tensor::new(&[heads, t, t], dense)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScoreStorage {
    pub full: usize,
    pub saicl: usize,
}

impl ScoreStorage {
    pub fn for_variant(&self, variant: AttentionVariant) -> usize {
        match variant {
            AttentionVariant::Full => self.full,
            AttentionVariant::Saicl => self.saicl,
        }
    }
}

/// Attention score entries per head for `k` demonstrations of length `L`.
pub fn score_storage(k: usize, segment_length: usize) -> ScoreStorage {
    let l2 = segment_length * segment_length;
    ScoreStorage { full: (k + 1) * (k + 1) * l2, saicl: (3 * k + 1) * l2 }
}

/// Dense additive mask as a tape constant, for use with [`full_attention`].
pub fn mask_constant(tape: &Tape, mask: &crate::layout::AttentionMask) -> Var {
    tape.constant(mask.to_tensor())
}

/// Lower-triangular additive mask `[T, T]` for decoder self-attention.
pub fn causal_mask(len: usize) -> Tensor {
    Tensor::from_fn(&[len, len], |i| if i[1] <= i[0] { 0.0 } else { MASK_SENTINEL })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::build_saicl_mask;
    use rand::SeedableRng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn single_token_returns_value() {
        let tape = Tape::new();
        let q = tape.constant(Tensor::zeros(&[1, 1, 2]));
        let v = tape.constant(Tensor::new(&[1, 1, 2], vec![3.0, -1.0]).unwrap());
        let z = full_attention(&tape, q, q, v, None, None, None).unwrap();
        assert_eq!(tape.value(z).data(), &[3.0, -1.0]);
    }

    #[test]
    fn equal_logits_average_values() {
        let tape = Tape::new();
        let q = tape.constant(Tensor::zeros(&[1, 2, 2]));
        let v = tape.constant(Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 5.0, 6.0]).unwrap());
        let z = full_attention(&tape, q, q, v, None, None, None).unwrap();
        assert!(close(tape.value(z).data(), &[3.0, 4.0, 3.0, 4.0], 1e-15));
    }

    #[test]
    fn one_token_segments_with_zero_logits() {
        // k = 2, L = 1: demo i averages itself with the test token, the test
        // token averages everything.
        let tape = Tape::new();
        let q = tape.constant(Tensor::zeros(&[1, 3, 2]));
        let v = tape.constant(Tensor::new(&[1, 3, 2], vec![1.0, 0.0, 0.0, 4.0, 2.0, 2.0]).unwrap());
        let layout = SegmentLayout::full(2, 1);
        let z = saicl_attention(&tape, q, q, v, &layout, None, None).unwrap();
        let expected = [1.5, 1.0, 1.0, 3.0, 1.0, 2.0];
        assert!(close(tape.value(z).data(), &expected, 1e-15));
    }

    #[test]
    fn no_demonstrations_is_plain_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let tape = Tape::new();
        let q = tape.constant(Tensor::randn(&[2, 4, 3], 1.0, &mut rng));
        let k = tape.constant(Tensor::randn(&[2, 4, 3], 1.0, &mut rng));
        let v = tape.constant(Tensor::randn(&[2, 4, 3], 1.0, &mut rng));
        let layout = SegmentLayout::full(0, 4);
        let a = saicl_attention(&tape, q, k, v, &layout, None, None).unwrap();
        let b = full_attention(&tape, q, k, v, None, None, None).unwrap();
        assert!(tape.value(a).max_abs_diff(&tape.value(b)) < 1e-12);
    }

    #[test]
    fn matches_masked_dense_with_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let tape = Tape::new();
        let layout = SegmentLayout::new(3, vec![2, 3, 1, 2]).unwrap();
        let q = tape.constant(Tensor::randn(&[2, 12, 4], 1.0, &mut rng));
        let k = tape.constant(Tensor::randn(&[2, 12, 4], 1.0, &mut rng));
        let v = tape.constant(Tensor::randn(&[2, 12, 4], 1.0, &mut rng));
        let table = tape.constant(Tensor::randn(&[32, 2], 1.0, &mut rng));
        let table = RelativeBiasTable::new(&tape, BucketParams::default(), table).unwrap();
        let fast = saicl_attention(&tape, q, k, v, &layout, Some(&table), None).unwrap();
        let mask = mask_constant(&tape, &build_saicl_mask(&layout));
        let bias = table.layout_bias(&tape, &layout, true).unwrap();
        let dense = full_attention(&tape, q, k, v, Some(mask), Some(bias), None).unwrap();
        assert!(tape.value(fast).max_abs_diff(&tape.value(dense)) < 1e-12);
    }

    #[test]
    fn rejects_non_divisible_length() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 5, 2]));
        let layout = SegmentLayout::full(1, 2);
        assert!(matches!(
            saicl_attention(&tape, x, x, x, &layout, None, None),
            Err(Error::NonDivisibleLength { .. })
        ));
    }

    #[test]
    fn storage_formulas() {
        assert_eq!(score_storage(0, 1), ScoreStorage { full: 1, saicl: 1 });
        assert_eq!(score_storage(4, 3), ScoreStorage { full: 225, saicl: 117 });
        let ratio = |k: usize| score_storage(2 * k, 8).saicl as f64 / score_storage(k, 8).saicl as f64;
        assert!((ratio(10_000) - 2.0).abs() < 1e-3);
        let full_ratio = score_storage(20_000, 8).full as f64 / score_storage(10_000, 8).full as f64;
        assert!((full_ratio - 4.0).abs() < 1e-3);
    }

    #[test]
    fn dropout_zero_is_identity_and_rate_scales() {
        let tape = Tape::new();
        let p = tape.constant(Tensor::full(&[1, 4, 4], 0.25));
        let mut d = Dropout::new(0.0, ChaCha8Rng::seed_from_u64(1));
        assert_eq!(d.apply(&tape, p).unwrap(), p);
        let mut d = Dropout::new(0.5, ChaCha8Rng::seed_from_u64(1));
        let out = tape.value(d.apply(&tape, p).unwrap());
        assert!(out.data().iter().all(|&x| x == 0.0 || (x - 0.5).abs() < 1e-15));
    }
}
