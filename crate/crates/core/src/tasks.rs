//! Synthetic in-context learning tasks and JSON-lines task files.
//!
//! Each family draws a fresh latent task instance per episode; the `k`
//! demonstrations and the test example all come from that instance.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{TokenId, FIRST_CONTENT_TOKEN};

/// One `(x, y)` pair, optionally with its candidate answers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskExample {
    pub task: String,
    pub input: Vec<TokenId>,
    pub output: Vec<TokenId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<Vec<TokenId>>>,
}

impl TaskExample {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.input.is_empty() || self.output.is_empty() {
            return Err("input and output must be non-empty".into());
        }
        if let Some(opts) = &self.options {
            if opts.iter().any(|o| o.is_empty()) {
                return Err("options must be non-empty".into());
            }
            if !opts.contains(&self.output) {
                return Err("output is not among the options".into());
            }
        }
        Ok(())
    }

    /// Index of the gold answer among the options.
    pub fn gold_index(&self) -> Option<usize> {
        self.options.as_ref()?.iter().position(|o| *o == self.output)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub demos: Vec<TaskExample>,
    pub test: TaskExample,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Keys map to values through a per-episode random table; the test key
    /// always appears among the demonstrations.
    Lookup,
    /// Per-episode label tokens and a random linear scorer over input tokens.
    LinearLabel,
    /// Output is the input shifted by a fixed offset; needs no demonstrations.
    CopyOffset,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lookup" => Ok(Self::Lookup),
            "linear-label" => Ok(Self::LinearLabel),
            "copy-offset" => Ok(Self::CopyOffset),
            other => Err(Error::Config(format!("unknown task family '{other}'"))),
        }
    }
}

impl TaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Lookup => "lookup",
            Self::LinearLabel => "linear-label",
            Self::CopyOffset => "copy-offset",
        }
    }
}

/// Number of tokens reserved at the top of the range for label words.
const LABEL_POOL: TokenId = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskFamily {
    pub kind: TaskKind,
    /// Content tokens are drawn from `vocab_lo..vocab_hi`.
    pub vocab_lo: TokenId,
    pub vocab_hi: TokenId,
    /// Number of candidate answers.
    pub arity: usize,
    /// Tokens per input (ignored by lookup, whose inputs are single keys).
    pub input_len: usize,
    /// Shift applied by the copy family.
    pub offset: TokenId,
}

impl TaskFamily {
    pub fn lookup() -> Self {
        Self { kind: TaskKind::Lookup, vocab_lo: FIRST_CONTENT_TOKEN, vocab_hi: 64, arity: 4, input_len: 1, offset: 0 }
    }

    pub fn linear_label() -> Self {
        Self { kind: TaskKind::LinearLabel, vocab_lo: FIRST_CONTENT_TOKEN, vocab_hi: 64, arity: 2, input_len: 3, offset: 0 }
    }

    pub fn copy_offset(offset: TokenId) -> Self {
        Self { kind: TaskKind::CopyOffset, vocab_lo: FIRST_CONTENT_TOKEN, vocab_hi: 64, arity: 4, input_len: 1, offset }
    }

    pub fn of_kind(kind: TaskKind) -> Self {
        match kind {
            TaskKind::Lookup => Self::lookup(),
            TaskKind::LinearLabel => Self::linear_label(),
            TaskKind::CopyOffset => Self::copy_offset(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let span = self.vocab_hi.saturating_sub(self.vocab_lo) as usize;
        let ok = match self.kind {
            TaskKind::Lookup => self.arity >= 2 && span > self.arity,
            TaskKind::LinearLabel => {
                self.arity >= 2 && self.arity <= LABEL_POOL as usize && span > LABEL_POOL as usize && self.input_len >= 1
            }
            TaskKind::CopyOffset => self.arity >= 1 && self.arity <= span && self.input_len >= 1,
        };
        if !ok || self.vocab_lo < FIRST_CONTENT_TOKEN {
            return Err(Error::Config(format!("inconsistent task family {self:?}")));
        }
        Ok(())
    }

    /// Largest token id the family can emit, plus one.
    pub fn vocab_end(&self) -> TokenId {
        self.vocab_hi
    }
}

/// Draws one episode with `k` demonstrations from a fresh task instance.
pub fn sample_episode(family: &TaskFamily, k: usize, seed: u64) -> Result<Episode> {
    sample_episode_with(family, k, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn sample_episode_with<R: Rng + ?Sized>(family: &TaskFamily, k: usize, rng: &mut R) -> Result<Episode> {
    family.validate()?;
    if k == 0 {
        return Err(Error::Config("an episode needs at least one demonstration".into()));
    }
    let mut examples = match family.kind {
        TaskKind::Lookup => lookup_examples(family, k, rng),
        TaskKind::LinearLabel => linear_label_examples(family, k, rng),
        TaskKind::CopyOffset => copy_examples(family, k, rng),
    };
    let test = examples.pop().expect("k + 1 examples");
    Ok(Episode { demos: examples, test })
}

fn lookup_examples<R: Rng + ?Sized>(f: &TaskFamily, k: usize, rng: &mut R) -> Vec<TaskExample> {
    let values: Vec<TokenId> = (f.vocab_hi - f.arity as TokenId..f.vocab_hi).collect();
    let keys: Vec<TokenId> = (f.vocab_lo..f.vocab_hi - f.arity as TokenId).collect();
    let chosen: Vec<TokenId> = if k <= keys.len() {
        keys.choose_multiple(rng, k).copied().collect()
    } else {
        (0..k).map(|_| *keys.choose(rng).unwrap()).collect()
    };
    let table: Vec<TokenId> = (0..keys.len()).map(|_| *values.choose(rng).unwrap()).collect();
    let value_of = |key: TokenId| table[(key - f.vocab_lo) as usize];
    let options: Vec<Vec<TokenId>> = values.iter().map(|&v| vec![v]).collect();
    let example = |key: TokenId| TaskExample {
        task: f.kind.name().to_string(),
        input: vec![key],
        output: vec![value_of(key)],
        options: Some(options.clone()),
    };
    let mut out: Vec<TaskExample> = chosen.iter().map(|&key| example(key)).collect();
    let test_key = *chosen.choose(rng).unwrap();
    out.push(example(test_key));
    out
}

fn linear_label_examples<R: Rng + ?Sized>(f: &TaskFamily, k: usize, rng: &mut R) -> Vec<TaskExample> {
    let pool: Vec<TokenId> = (f.vocab_hi - LABEL_POOL..f.vocab_hi).collect();
    let labels: Vec<TokenId> = pool.choose_multiple(rng, f.arity).copied().collect();
    let inputs_hi = f.vocab_hi - LABEL_POOL;
    let span = (inputs_hi - f.vocab_lo) as usize;
    let weights: Vec<Vec<f64>> = (0..f.arity)
        .map(|_| (0..span).map(|_| StandardNormal.sample(rng)).collect())
        .collect();
    let options: Vec<Vec<TokenId>> = labels.iter().map(|&l| vec![l]).collect();
    (0..=k)
        .map(|_| {
            let input: Vec<TokenId> = (0..f.input_len).map(|_| rng.gen_range(f.vocab_lo..inputs_hi)).collect();
            let score = |c: usize| input.iter().map(|&t| weights[c][(t - f.vocab_lo) as usize]).sum::<f64>();
            let class = (0..f.arity)
                .max_by(|&a, &b| score(a).partial_cmp(&score(b)).unwrap().then(b.cmp(&a)))
                .unwrap();
            TaskExample {
                task: f.kind.name().to_string(),
                input,
                output: vec![labels[class]],
                options: Some(options.clone()),
            }
        })
        .collect()
}

fn copy_examples<R: Rng + ?Sized>(f: &TaskFamily, k: usize, rng: &mut R) -> Vec<TaskExample> {
    let span = f.vocab_hi - f.vocab_lo;
    let shift = |x: &[TokenId], by: TokenId| -> Vec<TokenId> {
        x.iter().map(|&t| (t - f.vocab_lo + by) % span + f.vocab_lo).collect()
    };
    (0..=k)
        .map(|_| {
            let input: Vec<TokenId> = (0..f.input_len).map(|_| rng.gen_range(f.vocab_lo..f.vocab_hi)).collect();
            let output = shift(&input, f.offset);
            let mut options: Vec<Vec<TokenId>> = (0..f.arity as TokenId).map(|j| shift(&input, f.offset + j)).collect();
            options.shuffle(rng);
            TaskExample { task: f.kind.name().to_string(), input, output, options: Some(options) }
        })
        .collect()
}

const REQUIRED_FIELDS: [&str; 3] = ["task", "input", "output"];

/// Reads a JSON-lines task file; blank lines are skipped.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<TaskExample>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| Error::Dataset { line: line_no, message: e.to_string() })?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Dataset { line: line_no, message: "expected a JSON object".into() })?;
        if let Some(field) = REQUIRED_FIELDS.iter().find(|f| !obj.contains_key(**f)) {
            return Err(Error::MissingField { line: line_no, field });
        }
        let example: TaskExample =
            serde_json::from_value(value).map_err(|e| Error::Dataset { line: line_no, message: e.to_string() })?;
        example.validate().map_err(|message| Error::Dataset { line: line_no, message })?;
        out.push(example);
    }
    Ok(out)
}

pub fn write_dataset(path: impl AsRef<Path>, examples: &[TaskExample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_answer_comes_from_matching_demo() {
        let ep = sample_episode(&TaskFamily::lookup(), 2, 7).unwrap();
        assert_eq!(ep.demos.len(), 2);
        let hit = ep.demos.iter().find(|d| d.input == ep.test.input).unwrap();
        assert_eq!(hit.output, ep.test.output);
        assert!(ep.test.gold_index().is_some());
    }

    #[test]
    fn copy_offset_shifts() {
        let fam = TaskFamily::copy_offset(1);
        let ep = sample_episode(&fam, 3, 1).unwrap();
        for ex in ep.demos.iter().chain([&ep.test]) {
            assert_eq!(ex.output[0], (ex.input[0] - 2 + 1) % 62 + 2);
            assert!(ex.validate().is_ok());
        }
    }

    #[test]
    fn linear_label_uses_episode_labels() {
        let ep = sample_episode(&TaskFamily::linear_label(), 8, 3).unwrap();
        let opts = ep.test.options.clone().unwrap();
        assert_eq!(opts.len(), 2);
        for d in &ep.demos {
            assert!(opts.contains(&d.output));
            assert_eq!(d.input.len(), 3);
        }
    }

    #[test]
    fn same_seed_same_episode() {
        for fam in [TaskFamily::lookup(), TaskFamily::linear_label(), TaskFamily::copy_offset(3)] {
            assert_eq!(sample_episode(&fam, 5, 99).unwrap(), sample_episode(&fam, 5, 99).unwrap());
        }
    }

    #[test]
    fn zero_demos_rejected() {
        assert!(sample_episode(&TaskFamily::lookup(), 0, 1).is_err());
    }

    #[test]
    fn family_names_parse() {
        for kind in [TaskKind::Lookup, TaskKind::LinearLabel, TaskKind::CopyOffset] {
            assert_eq!(kind.name().parse::<TaskKind>().unwrap(), kind);
        }
    }
}
