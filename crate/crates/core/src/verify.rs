//! Self-checks against independent reference computations.
//!
//! Each check compares the optimized code path with a deliberately naive one:
//! nested-loop contraction, dense masked attention, brute-force mask counting
//! and central finite differences.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{full_attention, saicl_attention, score_storage, AttentionVariant};
use crate::error::{Error, Result};
use crate::fusion::{
    build_prompt, ensemble_logprobs, fid_encode, group_fid_encode, FusionOptions, FusionScheme, PromptFormat,
};
use crate::layout::{
    bias_for_layout, build_full_mask, build_saicl_mask, permute_segments, BucketParams, RelativeBiasTable,
    SegmentLayout,
};
use crate::model::{Model, ModelConfig};
use crate::tasks::{sample_episode, TaskFamily};
use crate::tensor::{Tape, Tensor, Var};
use crate::train::{batch_loss_and_grads, TrainConfig};

/// Floor on the denominator of [`relative_error`], so that gradients which
/// are zero up to rounding are judged on an absolute scale.
pub const GRAD_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Reference contraction by enumerating every index assignment.
pub fn naive_contract(spec: &str, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let malformed = |reason: &str| Error::MalformedSpec { spec: spec.to_string(), reason: reason.to_string() };
    let (inputs, out) = spec.split_once("->").ok_or_else(|| malformed("missing ->"))?;
    let (sa, sb) = inputs.split_once(',').ok_or_else(|| malformed("expected two operands"))?;
    let (sa, sb, out): (Vec<char>, Vec<char>, Vec<char>) = (sa.chars().collect(), sb.chars().collect(), out.chars().collect());
    if sa.len() != a.rank() || sb.len() != b.rank() {
        return Err(malformed("operand rank does not match subscripts"));
    }
    let mut letters: Vec<char> = Vec::new();
    let mut extent: BTreeMap<char, usize> = BTreeMap::new();
    for (labels, shape) in [(&sa, a.shape()), (&sb, b.shape())] {
        for (&c, &n) in labels.iter().zip(shape) {
            match extent.insert(c, n) {
                Some(prev) if prev != n => return Err(Error::AxisMismatch { axis: c, left: prev, right: n }),
                None => letters.push(c),
                _ => {}
            }
        }
    }
    let out_shape: Vec<usize> = out.iter().map(|c| extent.get(c).copied().ok_or_else(|| malformed("unknown output axis"))).collect::<Result<_>>()?;
    let mut data = vec![0.0; out_shape.iter().product()];
    let out_strides = Tensor::zeros(&out_shape).strides();
    let mut idx = vec![0usize; letters.len()];
    let pos = |labels: &[char], idx: &[usize]| -> Vec<usize> {
        labels.iter().map(|c| idx[letters.iter().position(|l| l == c).unwrap()]).collect()
    };
    loop {
        let prod = a.get(&pos(&sa, &idx)) * b.get(&pos(&sb, &idx));
        let o = pos(&out, &idx);
        let flat: usize = o.iter().zip(&out_strides).map(|(i, s)| i * s).sum();
        data[flat] += prod;
        let mut axis = letters.len();
        loop {
            if axis == 0 {
                return Tensor::new(&out_shape, data);
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < extent[&letters[axis]] {
                break;
            }
            idx[axis] = 0;
        }
    }
}

/// Largest relative error between reverse-mode gradients of `f` and central
/// differences, over up to `max_coords` randomly chosen coordinates per input.
pub fn finite_difference_check<F>(inputs: &[Tensor], f: F, max_coords: usize, seed: u64) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    const EPS: f64 = 1e-5;
    let eval = |values: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(tape.value(f(&tape, &vars)?).item())
    };
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let zero = Tensor::zeros(input.shape());
        let analytic = grads.get(vars[i]).unwrap_or(&zero);
        let mut coords: Vec<usize> = (0..input.len()).collect();
        coords.shuffle(&mut rng);
        coords.truncate(max_coords);
        for c in coords {
            let mut shifted = inputs.to_vec();
            let mut plus = input.data().to_vec();
            plus[c] += EPS;
            shifted[i] = Tensor::new(input.shape(), plus)?;
            let up = eval(&shifted)?;
            let mut minus = input.data().to_vec();
            minus[c] -= EPS;
            shifted[i] = Tensor::new(input.shape(), minus)?;
            let down = eval(&shifted)?;
            let numeric = (up - down) / (2.0 * EPS);
            worst = worst.max(relative_error(analytic.data()[c], numeric));
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<CheckOutcome>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Random segment layout with some padded segments.
pub fn random_layout<R: Rng + ?Sized>(rng: &mut R, k: usize, l: usize) -> SegmentLayout {
    let valid = (0..=k).map(|_| rng.gen_range(1..=l)).collect();
    SegmentLayout::new(l, valid).expect("valid counts within segment length")
}

fn random_qkv<R: Rng + ?Sized>(rng: &mut R, heads: usize, t: usize, d: usize) -> [Tensor; 3] {
    [(); 3].map(|_| Tensor::randn(&[heads, t, d], 1.0, rng))
}

/// `saicl_attention` against dense attention under the structured mask and bias.
/// Returns the largest elementwise difference.
pub fn attention_oracle_gap(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k, l, heads, d) = (rng.gen_range(0..=6), rng.gen_range(1..=5), rng.gen_range(1..=2), rng.gen_range(1..=4));
    let layout = random_layout(&mut rng, k, l);
    let params = BucketParams::new(8, 16, true)?;
    let table = Tensor::randn(&[params.num_buckets, heads], 1.0, &mut rng);
    let [q, kk, v] = random_qkv(&mut rng, heads, layout.total_length(), d);

    let tape = Tape::new();
    let (qv, kv, vv) = (tape.constant(q), tape.constant(kk), tape.constant(v));
    let bias = RelativeBiasTable::new(&tape, params, tape.constant(table.clone()))?;
    let fast = tape.value(saicl_attention(&tape, qv, kv, vv, &layout, Some(&bias), None)?);
    let mask = tape.constant(build_saicl_mask(&layout).to_tensor());
    let dense_bias = tape.constant(bias_for_layout(&table, &params, &layout, true)?);
    let slow = tape.value(full_attention(&tape, qv, kv, vv, Some(mask), Some(dense_bias), None)?);
    Ok(fast.max_abs_diff(&slow))
}

/// Test-segment drift under a random demonstration permutation.
pub fn permutation_gap(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k, l, heads, d) = (rng.gen_range(2..=6), rng.gen_range(1..=5), rng.gen_range(1..=2), 3);
    let layout = random_layout(&mut rng, k, l);
    let params = BucketParams::default();
    let table = Tensor::randn(&[params.num_buckets, heads], 1.0, &mut rng);
    let [q, kk, v] = random_qkv(&mut rng, heads, layout.total_length(), d);
    let mut perm: Vec<usize> = (0..k).collect();
    perm.shuffle(&mut rng);

    let run = |layout: &SegmentLayout, q: Tensor, kk: Tensor, v: Tensor| -> Result<Tensor> {
        let tape = Tape::new();
        let bias = RelativeBiasTable::new(&tape, params, tape.constant(table.clone()))?;
        let out = saicl_attention(&tape, tape.constant(q), tape.constant(kk), tape.constant(v), layout, Some(&bias), None)?;
        Ok((*tape.value(out)).clone())
    };
    let base = run(&layout, q.clone(), kk.clone(), v.clone())?;
    let permuted_layout = layout.permuted(&perm)?;
    let p = |t: &Tensor| permute_segments(&layout, t, 1, &perm);
    let moved = run(&permuted_layout, p(&q)?, p(&kk)?, p(&v)?)?;
    let test_rows = |t: &Tensor| t.slice_axis(1, k * l, l);
    let demo_gap = p(&base)?.slice_axis(1, 0, k * l)?.max_abs_diff(&moved.slice_axis(1, 0, k * l)?);
    Ok(test_rows(&base)?.max_abs_diff(&test_rows(&moved)?).max(demo_gap))
}

/// Brute-force count of allowed pairs in both masks for a fully valid layout.
pub fn mask_counts(k: usize, l: usize) -> (usize, usize) {
    let layout = SegmentLayout::full(k, l);
    (build_full_mask(&layout).allowed_count(), build_saicl_mask(&layout).allowed_count())
}

fn tiny_model(variant: AttentionVariant, seed: u64) -> Result<Model> {
    let config = ModelConfig {
        vocab_size: 16,
        d_model: 8,
        heads: 2,
        ff_width: 12,
        variant,
        bias: BucketParams::new(8, 16, true)?,
        init_std: 0.3,
        ..ModelConfig::default()
    };
    Model::new(config, seed)
}

fn small_lookup() -> TaskFamily {
    TaskFamily { vocab_hi: 16, ..TaskFamily::lookup() }
}

/// Finite-difference check of the end-to-end training loss of a 2-layer model.
pub fn model_gradient_error(variant: AttentionVariant, seed: u64, coords_per_param: usize) -> Result<f64> {
    let model = tiny_model(variant, seed)?;
    let family = small_lookup();
    let batch = vec![sample_episode(&family, 3, seed)?, sample_episode(&family, 2, seed + 1)?];
    let cfg = TrainConfig { train_k: 3, ..TrainConfig::default() };
    let (_, grads) = batch_loss_and_grads(&model, &batch, &cfg, None)?;
    let loss_at = |m: &Model| -> Result<f64> { Ok(batch_loss_and_grads(m, &batch, &cfg, None)?.0) };
    const EPS: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut worst: f64 = 0.0;
    for (name, tensor) in model.params() {
        let mut coords: Vec<usize> = (0..tensor.len()).collect();
        coords.shuffle(&mut rng);
        coords.truncate(coords_per_param);
        for c in coords {
            let mut shifted = model.clone();
            let mut data = tensor.data().to_vec();
            data[c] += EPS;
            shifted.params_mut().insert(name.clone(), Tensor::new(tensor.shape(), data.clone())?);
            let up = loss_at(&shifted)?;
            data[c] -= 2.0 * EPS;
            shifted.params_mut().insert(name.clone(), Tensor::new(tensor.shape(), data)?);
            let down = loss_at(&shifted)?;
            worst = worst.max(relative_error(grads[name].data()[c], (up - down) / (2.0 * EPS)));
        }
    }
    Ok(worst)
}

type OpCheck = (&'static str, Vec<Vec<usize>>, fn(&Tape, &[Var]) -> Result<Var>);

/// Scalar-valued probes exercising each differentiable tape operation.
fn op_checks() -> Vec<OpCheck> {
    fn weighted(tape: &Tape, x: Var) -> Result<Var> {
        // a fixed non-uniform weighting so that sums of softmax rows are not constant
        let shape = tape.shape(x);
        let w = Tensor::from_fn(&shape, |i| 0.3 + i.iter().enumerate().map(|(a, &v)| (a + 1) as f64 * v as f64).sum::<f64>().sin());
        Ok(tape.sum(tape.mul(x, tape.constant(w))?))
    }
    vec![
        ("contract", vec![vec![2, 3, 4], vec![2, 5, 4]], |t, v| weighted(t, t.contract("htd,hrd->htr", v[0], v[1])?)),
        ("add", vec![vec![3, 4], vec![4]], |t, v| weighted(t, t.add(v[0], v[1])?)),
        ("mul", vec![vec![3, 4], vec![3, 1]], |t, v| weighted(t, t.mul(v[0], v[1])?)),
        ("relu", vec![vec![4, 5]], |t, v| weighted(t, t.relu(v[0]))),
        ("log", vec![vec![6]], |t, v| {
            let pos = t.add(t.mul(v[0], v[0])?, t.constant(Tensor::full(&[6], 0.5)))?;
            weighted(t, t.log(pos))
        }),
        ("softmax", vec![vec![3, 5]], |t, v| weighted(t, t.softmax_last(v[0])?)),
        ("log_softmax", vec![vec![3, 5]], |t, v| weighted(t, t.log_softmax_last(v[0])?)),
        ("layer_norm", vec![vec![3, 6], vec![6], vec![6]], |t, v| weighted(t, t.layer_norm(v[0], v[1], v[2], 1e-6)?)),
        ("gather", vec![vec![5, 3]], |t, v| weighted(t, t.gather_rows(v[0], vec![Some(1), None, Some(4), Some(1)])?)),
        ("concat_slice", vec![vec![2, 3], vec![2, 2]], |t, v| {
            let c = t.concat(&[v[0], v[1]], 1)?;
            weighted(t, t.slice(c, 1, 1, 3)?)
        }),
        ("reshape_permute", vec![vec![2, 3, 4]], |t, v| {
            let p = t.permute(v[0], &[2, 0, 1])?;
            weighted(t, t.reshape(p, &[8, 3])?)
        }),
        ("nll", vec![vec![4, 6]], |t, v| {
            let lp = t.log_softmax_last(v[0])?;
            t.nll(lp, &[0, 5, 2, 2])
        }),
        ("full_attention", vec![vec![2, 5, 3], vec![2, 5, 3], vec![2, 5, 3]], |t, v| {
            let layout = SegmentLayout::new(1, vec![1; 5])?;
            let mask = t.constant(build_saicl_mask(&layout).to_tensor());
            weighted(t, full_attention(t, v[0], v[1], v[2], Some(mask), None, None)?)
        }),
        ("saicl_attention", vec![vec![2, 9, 3], vec![2, 9, 3], vec![2, 9, 3], vec![8, 2]], |t, v| {
            let layout = SegmentLayout::new(3, vec![3, 2, 3])?;
            let bias = RelativeBiasTable::new(t, BucketParams::new(8, 16, true)?, v[3])?;
            weighted(t, saicl_attention(t, v[0], v[1], v[2], &layout, Some(&bias), None)?)
        }),
    ]
}

/// Worst finite-difference error of every tape operation over `seeds` draws.
pub fn op_gradient_errors(seeds: u64) -> Result<Vec<(&'static str, f64)>> {
    op_checks()
        .into_iter()
        .map(|(name, shapes, f)| {
            let mut worst: f64 = 0.0;
            for seed in 0..seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let inputs: Vec<Tensor> = shapes.iter().map(|s| Tensor::randn(s, 1.0, &mut rng)).collect();
                worst = worst.max(finite_difference_check(&inputs, f, usize::MAX, seed)?);
            }
            Ok((name, worst))
        })
        .collect()
}

/// Largest logit differences for the three degenerate fusion configurations:
/// one-group ensemble vs single prompt, one-per-group Group-FiD vs FiD, and
/// one-demonstration FiD vs a dense single prompt.
pub fn fusion_degeneracy_gaps(seed: u64) -> Result<[f64; 3]> {
    let family = small_lookup();
    let episode = sample_episode(&family, 4, seed)?;
    let candidates = episode.test.options.clone().expect("lookup examples carry options");
    let saicl = tiny_model(AttentionVariant::Saicl, seed)?;
    let dense = saicl.with_variant(AttentionVariant::Full);
    let l_max = 256;
    let format = PromptFormat::Direct;
    let test = &episode.test.input;
    let opts = |scheme, groups| FusionOptions { scheme, groups, k: 4, l_max, format };
    let max_gap = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);

    let single = crate::fusion::score_candidates(&saicl, &episode.demos, test, &candidates, &opts(FusionScheme::Single, 1))?;
    let ensemble = ensemble_logprobs(&saicl, &episode.demos, test, &candidates, 1, l_max, format)?;

    let tape = Tape::new();
    let bound = dense.bind(&tape, false);
    let fid = tape.value(fid_encode(&bound, &episode.demos, test, l_max, format)?.states);
    let group = tape.value(group_fid_encode(&bound, &episode.demos, test, 4, l_max, format)?.states);

    let one = &episode.demos[..1];
    let fid_one = crate::fusion::score_candidates(&saicl, one, test, &candidates, &FusionOptions { k: 1, ..opts(FusionScheme::Fid, 1) })?;
    let pack = build_prompt(one, &[0], test, l_max, format)?;
    let dense_single = dense.candidate_logprobs(&pack, &candidates)?;

    Ok([max_gap(&single, &ensemble), fid.max_abs_diff(&group), max_gap(&fid_one, &dense_single)])
}

fn outcome(name: &'static str, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome { name, passed, detail }
}

fn guarded(name: &'static str, check: impl FnOnce() -> Result<CheckOutcome>) -> CheckOutcome {
    check().unwrap_or_else(|e| outcome(name, false, format!("error: {e}")))
}

/// Runs every self-check; `quick` uses fewer random instances.
pub fn run_verification(quick: bool) -> VerifyReport {
    let n = if quick { 20 } else { 100 };
    let mut checks = Vec::new();

    checks.push(guarded("contraction", || {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut worst: f64 = 0.0;
        for _ in 0..n / 4 {
            let (b, h, t, r, d) = (rng.gen_range(1..3), rng.gen_range(1..3), rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..4));
            let a = Tensor::randn(&[b, h, t, d], 1.0, &mut rng);
            let c = Tensor::randn(&[b, h, r, d], 1.0, &mut rng);
            let fast = crate::tensor::contract("bhtd,bhrd->bhtr", &a, &c)?;
            worst = worst.max(fast.max_abs_diff(&naive_contract("bhtd,bhrd->bhtr", &a, &c)?));
        }
        Ok(outcome("contraction", worst <= 1e-12, format!("max |diff| {worst:.3e}")))
    }));

    checks.push(guarded("attention-oracle", || {
        let worst = (0..n as u64).map(attention_oracle_gap).collect::<Result<Vec<_>>>()?.into_iter().fold(0.0, f64::max);
        Ok(outcome("attention-oracle", worst <= 1e-9, format!("{n} instances, max |diff| {worst:.3e}")))
    }));

    checks.push(guarded("permutation-invariance", || {
        let m = n / 2;
        let worst = (0..m as u64).map(permutation_gap).collect::<Result<Vec<_>>>()?.into_iter().fold(0.0, f64::max);
        Ok(outcome("permutation-invariance", worst <= 1e-9, format!("{m} permutations, max |diff| {worst:.3e}")))
    }));

    checks.push(guarded("score-storage", || {
        let mut bad = Vec::new();
        for k in 0..=8 {
            for l in 1..=6 {
                let (full, saicl) = mask_counts(k, l);
                let s = score_storage(k, l);
                if (full, saicl) != (s.full, s.saicl) {
                    bad.push((k, l));
                }
            }
        }
        Ok(outcome("score-storage", bad.is_empty(), format!("mismatches {bad:?}")))
    }));

    checks.push(guarded("op-gradients", || {
        let errors = op_gradient_errors(if quick { 3 } else { 10 })?;
        let worst = errors.iter().map(|e| e.1).fold(0.0, f64::max);
        let names: Vec<String> = errors.iter().map(|(n, e)| format!("{n}={e:.1e}")).collect();
        Ok(outcome("op-gradients", worst <= 1e-4, names.join(" ")))
    }));

    checks.push(guarded("model-gradient", || {
        let coords = if quick { 2 } else { 6 };
        let worst = model_gradient_error(AttentionVariant::Saicl, 3, coords)?
            .max(model_gradient_error(AttentionVariant::Full, 4, coords)?);
        Ok(outcome("model-gradient", worst <= 1e-4, format!("max relative error {worst:.3e}")))
    }));

    checks.push(guarded("fusion-degeneracies", || {
        let gaps = fusion_degeneracy_gaps(11)?;
        let worst = gaps.iter().copied().fold(0.0, f64::max);
        Ok(outcome("fusion-degeneracies", worst <= 1e-12, format!("gaps {:.3e} {:.3e} {:.3e}", gaps[0], gaps[1], gaps[2])))
    }));

    VerifyReport { checks }
}
