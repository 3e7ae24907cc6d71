//! Wall-clock scaling benchmark of the two encoder attention variants.

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{full_attention, saicl_attention, score_storage, AttentionVariant};
use crate::error::{Error, Result};
use crate::layout::{build_full_mask, BucketParams, RelativeBiasTable, SegmentLayout};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct BenchSpec {
    pub k_grid: Vec<usize>,
    pub lengths: Vec<usize>,
    pub repetitions: usize,
    pub warmup: usize,
    pub variants: Vec<AttentionVariant>,
    pub heads: usize,
    pub head_dim: usize,
    pub bias: BucketParams,
    /// Configurations whose dense score tensor would exceed this many bytes
    /// are reported as out of memory instead of being run.
    pub memory_ceiling_bytes: usize,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            k_grid: vec![2, 4, 8, 16, 32, 64, 128],
            lengths: vec![64, 128],
            repetitions: 10,
            warmup: 1,
            variants: vec![AttentionVariant::Saicl, AttentionVariant::Full],
            heads: 4,
            head_dim: 16,
            bias: BucketParams::default(),
            memory_ceiling_bytes: 256 << 20,
            seed: 0,
        }
    }
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.repetitions < 3 {
            return Err(Error::Config("benchmark needs at least 3 repetitions".into()));
        }
        if self.k_grid.is_empty() || self.lengths.is_empty() || self.variants.is_empty() {
            return Err(Error::Config("benchmark grid is empty".into()));
        }
        if self.k_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("k grid must be strictly increasing".into()));
        }
        if self.lengths.contains(&0) || self.heads == 0 || self.head_dim == 0 {
            return Err(Error::Config("lengths, heads and head_dim must be >= 1".into()));
        }
        self.bias.validate()
    }

    /// Bytes of attention scores held by one call, across heads.
    pub fn score_bytes(&self, variant: AttentionVariant, k: usize, l: usize) -> usize {
        self.heads * score_storage(k, l).for_variant(variant) * std::mem::size_of::<f64>()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRecord {
    pub variant: AttentionVariant,
    pub k: usize,
    pub segment_length: usize,
    /// `None` when the configuration exceeded the memory ceiling.
    pub mean_ms: Option<f64>,
    pub median_ms: Option<f64>,
    pub std_ms: Option<f64>,
    pub score_storage: usize,
}

impl BenchRecord {
    pub fn is_oom(&self) -> bool {
        self.median_ms.is_none()
    }
}

/// Milliseconds for one attention call on fresh inputs, including mask and
/// bias construction.
fn time_once(variant: AttentionVariant, layout: &SegmentLayout, inputs: &[Tensor; 4], bias: BucketParams) -> Result<f64> {
    let start = Instant::now();
    let tape = Tape::new();
    let [q, k, v, table] = inputs.clone().map(|t| tape.constant(t));
    let table = RelativeBiasTable::new(&tape, bias, table)?;
    let out = match variant {
        AttentionVariant::Saicl => saicl_attention(&tape, q, k, v, layout, Some(&table), None)?,
        AttentionVariant::Full => {
            let mask = tape.constant(build_full_mask(layout).to_tensor());
            let bias = table.layout_bias(&tape, layout, true)?;
            full_attention(&tape, q, k, v, Some(mask), Some(bias), None)?
        }
    };
    std::hint::black_box(tape.value(out));
    drop(tape);
    Ok(start.elapsed().as_secs_f64() * 1e3)
}

fn summarize(times: &mut [f64]) -> (f64, f64, f64) {
    let n = times.len() as f64;
    let mean = times.iter().sum::<f64>() / n;
    let std = (times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    times.sort_by(|a, b| a.total_cmp(b));
    let mid = times.len() / 2;
    let median = if times.len() % 2 == 0 { (times[mid - 1] + times[mid]) / 2.0 } else { times[mid] };
    (mean, median, std)
}

/// Times every (variant, L, k) combination of `spec` on a single thread.
pub fn run_bench(spec: &BenchSpec) -> Result<Vec<BenchRecord>> {
    run_bench_with(spec, |_| {})
}

/// As [`run_bench`], calling `progress` after each record.
pub fn run_bench_with(spec: &BenchSpec, mut progress: impl FnMut(&BenchRecord)) -> Result<Vec<BenchRecord>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::new();
    for &variant in &spec.variants {
        for &l in &spec.lengths {
            for &k in &spec.k_grid {
                let storage = score_storage(k, l).for_variant(variant);
                let mut record = BenchRecord {
                    variant,
                    k,
                    segment_length: l,
                    mean_ms: None,
                    median_ms: None,
                    std_ms: None,
                    score_storage: storage,
                };
                if spec.score_bytes(variant, k, l) <= spec.memory_ceiling_bytes {
                    let layout = SegmentLayout::full(k, l);
                    let t = layout.total_length();
                    let shape = [spec.heads, t, spec.head_dim];
                    let inputs = [
                        Tensor::randn(&shape, 1.0, &mut rng),
                        Tensor::randn(&shape, 1.0, &mut rng),
                        Tensor::randn(&shape, 1.0, &mut rng),
                        Tensor::randn(&[spec.bias.num_buckets, spec.heads], 1.0, &mut rng),
                    ];
                    for _ in 0..spec.warmup {
                        time_once(variant, &layout, &inputs, spec.bias)?;
                    }
                    let mut times = (0..spec.repetitions)
                        .map(|_| time_once(variant, &layout, &inputs, spec.bias))
                        .collect::<Result<Vec<_>>>()?;
                    let (mean, median, std) = summarize(&mut times);
                    record.mean_ms = Some(mean);
                    record.median_ms = Some(median);
                    record.std_ms = Some(std);
                }
                progress(&record);
                records.push(record);
            }
        }
    }
    Ok(records)
}

pub const CSV_HEADER: &str = "variant,k,L,mean_ms,median_ms,std_ms,score_storage";

pub fn csv_row(r: &BenchRecord) -> String {
    let cell = |v: Option<f64>| v.map_or_else(|| "OOM".to_string(), |x| format!("{x:.4}"));
    format!(
        "{},{},{},{},{},{},{}",
        r.variant,
        r.k,
        r.segment_length,
        cell(r.mean_ms),
        cell(r.median_ms),
        cell(r.std_ms),
        r.score_storage
    )
}

pub fn write_csv(records: &[BenchRecord], mut out: impl Write) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in records {
        writeln!(out, "{}", csv_row(r))?;
    }
    Ok(())
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 || points.iter().any(|&(x, y)| x <= 0.0 || y <= 0.0) {
        return None;
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// `(k, median_ms)` of the feasible records for one variant and length.
pub fn median_series(records: &[BenchRecord], variant: AttentionVariant, l: usize) -> Vec<(f64, f64)> {
    records
        .iter()
        .filter(|r| r.variant == variant && r.segment_length == l)
        .filter_map(|r| r.median_ms.map(|m| (r.k as f64, m)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<(f64, f64)> = [2.0, 4.0, 8.0, 16.0].iter().map(|&x: &f64| (x, 3.0 * x.powf(1.5))).collect();
        assert!((log_log_slope(&pts).unwrap() - 1.5).abs() < 1e-12);
        assert_eq!(log_log_slope(&pts[..1]), None);
    }

    #[test]
    fn spec_validation() {
        assert!(BenchSpec { repetitions: 2, ..BenchSpec::default() }.validate().is_err());
        assert!(BenchSpec { k_grid: vec![4, 2], ..BenchSpec::default() }.validate().is_err());
        assert!(BenchSpec::default().validate().is_ok());
    }

    #[test]
    fn one_cell_one_record() {
        let spec = BenchSpec {
            k_grid: vec![2],
            lengths: vec![4],
            repetitions: 3,
            variants: vec![AttentionVariant::Saicl],
            ..BenchSpec::default()
        };
        let records = run_bench(&spec).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].score_storage, 7 * 16);
        assert!(records[0].median_ms.unwrap() > 0.0);
    }

    #[test]
    fn oom_rows_render() {
        let spec = BenchSpec {
            k_grid: vec![1],
            lengths: vec![4],
            repetitions: 3,
            variants: vec![AttentionVariant::Full],
            memory_ceiling_bytes: 0,
            ..BenchSpec::default()
        };
        let records = run_bench(&spec).unwrap();
        assert!(records[0].is_oom());
        assert_eq!(csv_row(&records[0]), "full,1,4,OOM,OOM,OOM,64");
    }
}
