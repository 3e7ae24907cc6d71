//! Segment structure of a packed in-context prompt.
//!
//! A prompt is `k` demonstration segments followed by one test segment, each
//! padded to a common length `L`. The layout is the single source for the
//! attention masks, the placement of relative position bias and demonstration
//! permutations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var, MASK_SENTINEL};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentLayout {
    segment_length: usize,
    /// Valid (non-padding) tokens per segment; the last entry is the test segment.
    valid: Vec<usize>,
}

impl SegmentLayout {
    /// `valid` lists the non-padding token count of every segment, test last.
    pub fn new(segment_length: usize, valid: Vec<usize>) -> Result<Self> {
        if segment_length == 0 {
            return Err(Error::InvalidLayout("segment length must be >= 1".into()));
        }
        if valid.is_empty() {
            return Err(Error::InvalidLayout("the test segment is required".into()));
        }
        if let Some(v) = valid.iter().find(|&&v| v == 0 || v > segment_length) {
            return Err(Error::InvalidLayout(format!(
                "valid count {v} outside [1, {segment_length}]"
            )));
        }
        Ok(Self { segment_length, valid })
    }

    /// `k` demonstrations plus the test segment, all without padding.
    pub fn full(k: usize, segment_length: usize) -> Self {
        Self::new(segment_length, vec![segment_length; k + 1]).expect("segment_length >= 1")
    }

    /// Number of demonstration segments.
    pub fn demos(&self) -> usize {
        self.valid.len() - 1
    }

    pub fn num_segments(&self) -> usize {
        self.valid.len()
    }

    pub fn segment_length(&self) -> usize {
        self.segment_length
    }

    pub fn total_length(&self) -> usize {
        self.valid.len() * self.segment_length
    }

    pub fn valid_counts(&self) -> &[usize] {
        &self.valid
    }

    pub fn segment_of(&self, pos: usize) -> usize {
        pos / self.segment_length
    }

    pub fn is_test(&self, pos: usize) -> bool {
        self.segment_of(pos) == self.demos()
    }

    pub fn is_valid(&self, pos: usize) -> bool {
        pos % self.segment_length < self.valid[self.segment_of(pos)]
    }

    /// Additive key mask: 0 for real tokens, the sentinel for padding.
    pub fn key_mask(&self) -> Vec<f64> {
        (0..self.total_length())
            .map(|p| if self.is_valid(p) { 0.0 } else { MASK_SENTINEL })
            .collect()
    }

    /// Layout with demonstration segments reordered: new segment `i` is old `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<SegmentLayout> {
        check_permutation(perm, self.demos())?;
        let mut valid: Vec<usize> = perm.iter().map(|&p| self.valid[p]).collect();
        valid.push(self.valid[self.demos()]);
        SegmentLayout::new(self.segment_length, valid)
    }
}

fn check_permutation(perm: &[usize], k: usize) -> Result<()> {
    if perm.len() != k {
        return Err(Error::InvalidPermutation(format!("expected {k} entries, got {}", perm.len())));
    }
    let mut seen = vec![false; k];
    for &p in perm {
        if p >= k || std::mem::replace(&mut seen[p], true) {
            return Err(Error::InvalidPermutation(format!("{perm:?} is not a bijection on 0..{k}")));
        }
    }
    Ok(())
}

/// Reorders the demonstration blocks of a per-token tensor along `axis`.
/// Output segment `i` is input segment `perm[i]`; the test segment stays last.
pub fn permute_segments(layout: &SegmentLayout, tensor: &Tensor, axis: usize, perm: &[usize]) -> Result<Tensor> {
    check_permutation(perm, layout.demos())?;
    if tensor.shape().get(axis) != Some(&layout.total_length()) {
        return Err(Error::Shape(format!(
            "axis {axis} of {:?} is not the token axis of length {}",
            tensor.shape(),
            layout.total_length()
        )));
    }
    let l = layout.segment_length();
    let blocks: Vec<Tensor> = (0..layout.num_segments())
        .map(|s| tensor.slice_axis(axis, s * l, l))
        .collect::<Result<_>>()?;
    let mut order: Vec<&Tensor> = perm.iter().map(|&p| &blocks[p]).collect();
    order.push(&blocks[layout.demos()]);
    Tensor::concat(&order, axis)
}

/// Dense additive mask of shape `[T, T]` (rows are queries, columns keys).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    size: usize,
    data: Vec<f64>,
}

impl AttentionMask {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn allowed(&self, query: usize, key: usize) -> bool {
        self.data[query * self.size + key] == 0.0
    }

    pub fn allowed_count(&self) -> usize {
        self.data.iter().filter(|&&x| x == 0.0).count()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.size, self.size], self.data.clone()).expect("square mask")
    }

    fn from_rule(layout: &SegmentLayout, rule: impl Fn(usize, usize) -> bool) -> Self {
        let t = layout.total_length();
        let mut data = Vec::with_capacity(t * t);
        for q in 0..t {
            for k in 0..t {
                let ok = layout.is_valid(k) && rule(q, k);
                data.push(if ok { 0.0 } else { MASK_SENTINEL });
            }
        }
        Self { size: t, data }
    }
}

/// Demonstrations see themselves and the test segment; the test segment sees
/// everything; padding keys are blocked for every query.
pub fn build_saicl_mask(layout: &SegmentLayout) -> AttentionMask {
    AttentionMask::from_rule(layout, |q, k| {
        let (sq, sk) = (layout.segment_of(q), layout.segment_of(k));
        sq == sk || layout.is_test(q) || layout.is_test(k)
    })
}

/// Every non-padding key is visible to every query.
pub fn build_full_mask(layout: &SegmentLayout) -> AttentionMask {
    AttentionMask::from_rule(layout, |_, _| true)
}

/// T5-style relative position bucketing parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketParams {
    pub num_buckets: usize,
    pub max_distance: usize,
    pub bidirectional: bool,
}

impl Default for BucketParams {
    fn default() -> Self {
        Self { num_buckets: 32, max_distance: 128, bidirectional: true }
    }
}

impl BucketParams {
    pub fn new(num_buckets: usize, max_distance: usize, bidirectional: bool) -> Result<Self> {
        let p = Self { num_buckets, max_distance, bidirectional };
        p.validate()?;
        Ok(p)
    }

    pub fn unidirectional(self) -> Self {
        Self { bidirectional: false, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let half = if self.bidirectional {
            if self.num_buckets % 2 != 0 {
                return Err(Error::Config("bidirectional bucketing needs an even bucket count".into()));
            }
            self.num_buckets / 2
        } else {
            self.num_buckets
        };
        if half < 2 {
            return Err(Error::Config(format!("{} buckets is too few", self.num_buckets)));
        }
        if self.max_distance <= self.num_buckets / 2 {
            return Err(Error::Config(format!(
                "max_distance {} must exceed half the bucket count {}",
                self.max_distance, self.num_buckets
            )));
        }
        Ok(())
    }
}

/// Bucket of a query/key pair with `delta = query_pos - key_pos`.
///
/// Offsets below half a bucket range get their own bucket; larger ones are
/// log-spaced up to `max_distance`, beyond which they share the final bucket.
/// In bidirectional mode keys before the query use the upper half.
pub fn relative_bucket(delta: i64, params: &BucketParams) -> usize {
    let mut buckets = params.num_buckets as i64;
    let mut base = 0i64;
    let n = if params.bidirectional {
        buckets /= 2;
        if delta < 0 {
            base += buckets;
        }
        delta.abs()
    } else {
        delta.max(0)
    };
    let max_exact = buckets / 2;
    if n < max_exact {
        return (base + n) as usize;
    }
    let ratio = (n as f64 / max_exact as f64).ln() / (params.max_distance as f64 / max_exact as f64).ln();
    let large = max_exact + (ratio * (buckets - max_exact) as f64) as i64;
    (base + large.min(buckets - 1)) as usize
}

/// Memoized buckets for every offset in `-(span-1)..=(span-1)`.
fn bucket_lookup(span: usize, params: &BucketParams) -> impl Fn(usize, usize) -> usize {
    let offset = span as i64 - 1;
    let table: Vec<usize> = (-offset..=offset).map(|d| relative_bucket(d, params)).collect();
    move |q, k| table[(q as i64 - k as i64 + offset) as usize]
}

/// Bucket index for every `(query, key)` pair of one `L`-long segment.
pub fn segment_buckets(segment_length: usize, params: &BucketParams) -> Vec<usize> {
    let lookup = bucket_lookup(segment_length, params);
    (0..segment_length)
        .flat_map(|q| (0..segment_length).map(move |k| (q, k)))
        .map(|(q, k)| lookup(q, k))
        .collect()
}

/// Bucket index for every `(query, key)` pair of the packed prompt.
///
/// Structured: offsets are taken within a segment and cross-segment pairs get
/// no bucket (zero bias). Unstructured: offsets use global positions.
pub fn layout_buckets(layout: &SegmentLayout, params: &BucketParams, structured: bool) -> Vec<Option<usize>> {
    let t = layout.total_length();
    let l = layout.segment_length();
    let lookup = bucket_lookup(t, params);
    let mut out = Vec::with_capacity(t * t);
    for q in 0..t {
        for k in 0..t {
            out.push(if !structured {
                Some(lookup(q, k))
            } else if layout.segment_of(q) == layout.segment_of(k) {
                Some(lookup(q % l, k % l))
            } else {
                None
            });
        }
    }
    out
}

/// Learned bias values of shape `[num_buckets, heads]` bound to a tape.
#[derive(Clone, Copy, Debug)]
pub struct RelativeBiasTable {
    pub params: BucketParams,
    pub weights: Var,
}

impl RelativeBiasTable {
    pub fn new(tape: &Tape, params: BucketParams, weights: Var) -> Result<Self> {
        params.validate()?;
        let shape = tape.shape(weights);
        if shape.len() != 2 || shape[0] != params.num_buckets {
            return Err(Error::Shape(format!(
                "bias table {shape:?} does not have {} bucket rows",
                params.num_buckets
            )));
        }
        Ok(Self { params, weights })
    }

    pub fn heads(&self, tape: &Tape) -> usize {
        tape.shape(self.weights)[1]
    }

    /// Within-segment bias `[H, L, L]`, shared by every segment.
    pub fn segment_bias(&self, tape: &Tape, segment_length: usize) -> Result<Var> {
        let rows = segment_buckets(segment_length, &self.params).into_iter().map(Some).collect();
        self.expand(tape, rows, segment_length, segment_length)
    }

    /// Bias `[H, T, T]` aligned with the layout's attention mask.
    pub fn layout_bias(&self, tape: &Tape, layout: &SegmentLayout, structured: bool) -> Result<Var> {
        let t = layout.total_length();
        self.expand(tape, layout_buckets(layout, &self.params, structured), t, t)
    }

    /// Bias `[H, Tq, Tk]` from global offsets, for non-segmented sequences.
    pub fn sequence_bias(&self, tape: &Tape, queries: usize, keys: usize) -> Result<Var> {
        let lookup = bucket_lookup(queries.max(keys), &self.params);
        let rows = (0..queries).flat_map(|q| (0..keys).map(move |k| (q, k))).map(|(q, k)| Some(lookup(q, k))).collect();
        self.expand(tape, rows, queries, keys)
    }

    fn expand(&self, tape: &Tape, rows: Vec<Option<usize>>, tq: usize, tk: usize) -> Result<Var> {
        let heads = self.heads(tape);
        let gathered = tape.gather_rows(self.weights, rows)?;
        let grid = tape.reshape(gathered, &[tq, tk, heads])?;
        tape.permute(grid, &[2, 0, 1])
    }
}

/// Bias tensor aligned with the layout: `[H, T, T]` as a plain value.
pub fn bias_for_layout(table: &Tensor, params: &BucketParams, layout: &SegmentLayout, structured: bool) -> Result<Tensor> {
    let tape = Tape::new();
    let weights = tape.constant(table.clone());
    let bias = RelativeBiasTable::new(&tape, *params, weights)?.layout_bias(&tape, layout, structured)?;
    Ok(tape.value(bias).as_ref().clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layout_validation() {
        assert!(SegmentLayout::new(0, vec![1]).is_err());
        assert!(SegmentLayout::new(3, vec![]).is_err());
        assert!(SegmentLayout::new(3, vec![4, 1]).is_err());
        assert!(SegmentLayout::new(3, vec![0, 1]).is_err());
        let l = SegmentLayout::new(3, vec![2, 3, 1]).unwrap();
        assert_eq!((l.demos(), l.total_length()), (2, 9));
        assert!(l.is_valid(1) && !l.is_valid(2) && l.is_valid(8 - 2) && !l.is_valid(7));
    }

    #[test]
    fn saicl_mask_small_cases() {
        let m = build_saicl_mask(&SegmentLayout::full(1, 1));
        assert_eq!(m.allowed_count(), 4);
        let m = build_saicl_mask(&SegmentLayout::full(2, 1));
        assert!(!m.allowed(0, 1) && !m.allowed(1, 0));
        assert_eq!(m.allowed_count(), 7);
    }

    #[test]
    fn full_mask_counts() {
        assert_eq!(build_full_mask(&SegmentLayout::full(1, 1)).allowed_count(), 4);
        assert_eq!(build_full_mask(&SegmentLayout::full(2, 2)).allowed_count(), 36);
        assert_eq!(build_full_mask(&SegmentLayout::full(4, 3)).allowed_count(), 225);
    }

    #[test]
    fn padding_keys_blocked_for_every_query() {
        let layout = SegmentLayout::new(3, vec![2, 1, 3]).unwrap();
        for mask in [build_saicl_mask(&layout), build_full_mask(&layout)] {
            for q in 0..9 {
                for k in [2, 4, 5] {
                    assert!(!mask.allowed(q, k));
                }
            }
        }
    }

    #[test]
    fn bucket_basics() {
        let p = BucketParams::default();
        assert_eq!(relative_bucket(0, &p), 0);
        assert_ne!(relative_bucket(1, &p), relative_bucket(-1, &p));
        assert_eq!(relative_bucket(1000, &p), 15);
        assert_eq!(relative_bucket(-1000, &p), 31);
        let uni = p.unidirectional();
        assert_eq!(relative_bucket(-5, &uni), 0);
        assert_eq!(relative_bucket(5000, &uni), 31);
    }

    #[test]
    fn bucket_params_validation() {
        assert!(BucketParams::new(31, 128, true).is_err());
        assert!(BucketParams::new(32, 16, true).is_err());
        assert!(BucketParams::new(2, 128, true).is_err());
        assert!(BucketParams::new(8, 20, false).is_ok());
    }

    #[test]
    fn structured_bias_blocks_repeat_and_cross_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = BucketParams::default();
        let table = Tensor::randn(&[32, 2], 1.0, &mut rng);
        let layout = SegmentLayout::full(2, 3);
        let bias = bias_for_layout(&table, &p, &layout, true).unwrap();
        for h in 0..2 {
            for t in 0..3 {
                for r in 0..3 {
                    let first = bias.get(&[h, t, r]);
                    assert_eq!(first, bias.get(&[h, 3 + t, 3 + r]));
                    assert_eq!(first, bias.get(&[h, 6 + t, 6 + r]));
                }
            }
            for q in 0..9 {
                for k in 0..9 {
                    if q / 3 != k / 3 {
                        assert_eq!(bias.get(&[h, q, k]), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn unstructured_bias_uses_global_offsets() {
        let p = BucketParams::default();
        let table = Tensor::from_fn(&[32, 1], |i| i[0] as f64);
        let layout = SegmentLayout::full(1, 2);
        let bias = bias_for_layout(&table, &p, &layout, false).unwrap();
        assert_eq!(bias.get(&[0, 0, 3]) as usize, relative_bucket(-3, &p));
        assert_eq!(relative_bucket(-3, &p), 19);
    }

    #[test]
    fn permute_segments_swaps_blocks() {
        let layout = SegmentLayout::full(2, 2);
        let t = Tensor::new(&[6], vec![1.0, 1.0, 2.0, 2.0, 9.0, 9.0]).unwrap();
        let p = permute_segments(&layout, &t, 0, &[1, 0]).unwrap();
        assert_eq!(p.data(), &[2.0, 2.0, 1.0, 1.0, 9.0, 9.0]);
        assert_eq!(permute_segments(&layout, &t, 0, &[0, 1]).unwrap(), t);
        assert!(matches!(
            permute_segments(&layout, &t, 0, &[0, 0]),
            Err(Error::InvalidPermutation(_))
        ));
        assert!(permute_segments(&layout, &t, 0, &[0]).is_err());
    }
}
