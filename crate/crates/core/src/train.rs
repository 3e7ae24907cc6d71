//! Meta-training over synthetic task families and accuracy evaluation.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{predict_episode, training_pair, FusionOptions, FusionScheme, PromptFormat};
use crate::model::Model;
use crate::tasks::{sample_episode_with, Episode, TaskFamily};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Adafactor,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Adafactor => "adafactor",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "adafactor" => Ok(OptimizerKind::Adafactor),
            other => Err(Error::Config(format!("unknown optimizer '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub train_k: usize,
    pub test_k: Vec<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub l_max: usize,
    pub format: PromptFormat,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            train_k: 8,
            test_k: vec![2, 4, 8],
            steps: 3000,
            batch_size: 32,
            lr: 1e-3,
            warmup_fraction: 0.1,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            l_max: 256,
            format: PromptFormat::Direct,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.train_k == 0 || self.l_max == 0 {
            return Err(Error::Config("steps, batch size, train_k and l_max must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!("warmup fraction {} outside [0, 1)", self.warmup_fraction)));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

/// Linear warmup from zero to the peak rate, then linear decay to zero.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    let steps = cfg.steps as f64;
    let step = (step as f64).min(steps);
    let warmup = cfg.warmup_fraction * steps;
    if step < warmup {
        cfg.lr * step / warmup
    } else {
        cfg.lr * (steps - step) / (steps - warmup)
    }
}

/// Mean negative log-likelihood of the gold continuations and its gradient
/// with respect to every parameter.
pub fn batch_loss_and_grads(
    model: &Model,
    batch: &[Episode],
    cfg: &TrainConfig,
    dropout_seed: Option<u64>,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    if batch.is_empty() {
        return Err(Error::Config("empty training batch".into()));
    }
    let tape = Tape::new();
    let bound = model.bind(&tape, true);
    if let Some(seed) = dropout_seed {
        bound.enable_dropout(seed);
    }
    let mut terms = Vec::with_capacity(batch.len());
    for episode in batch {
        let (pack, gold) = training_pair(episode, cfg.train_k, cfg.l_max, cfg.format)?;
        let enc = bound.encode_prompt(&pack)?;
        terms.push(bound.sequence_logprob(&enc, &gold)?);
    }
    let stacked = tape.concat(&terms, 0)?;
    let loss = tape.scale(tape.sum(stacked), -1.0 / batch.len() as f64);
    let value = tape.value(loss).item();
    let mut grads = tape.backward(loss)?;
    let named = bound
        .vars()
        .iter()
        .map(|(name, &var)| {
            let g = grads.take(var).unwrap_or_else(|| Tensor::zeros(&tape.shape(var)));
            (name.clone(), g)
        })
        .collect();
    Ok((value, named))
}

const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
const ADAM_EPS: f64 = 1e-8;
const ADAFACTOR_EPS: f64 = 1e-30;
const ADAFACTOR_CLIP: f64 = 1.0;

#[derive(Clone, Debug)]
enum Moments {
    Adam { m: Vec<f64>, v: Vec<f64> },
    /// Factored second moments over `rows × cols`, or a full one for vectors.
    Factored { rows: usize, cols: usize, r: Vec<f64>, c: Vec<f64> },
    Unfactored { v: Vec<f64> },
}

/// Per-parameter optimizer state.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    step: usize,
    state: BTreeMap<String, Moments>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self { kind, step: 0, state: BTreeMap::new() }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Applies one update in place.
    pub fn update(&mut self, params: &mut BTreeMap<String, Tensor>, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as f64;
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).ok_or_else(|| Error::Config(format!("no gradient for {name}")))?;
            let shape = p.shape().to_vec();
            let kind = self.kind;
            let moments = self.state.entry(name.clone()).or_insert_with(|| init_moments(kind, &shape));
            let mut data = p.data().to_vec();
            match moments {
                Moments::Adam { m, v } => {
                    let (b1, b2) = ADAM_BETAS;
                    let (c1, c2) = (1.0 - b1.powf(t), 1.0 - b2.powf(t));
                    for (i, (x, &gi)) in data.iter_mut().zip(g.data()).enumerate() {
                        m[i] = b1 * m[i] + (1.0 - b1) * gi;
                        v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                        *x -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                    }
                }
                Moments::Factored { rows, cols, r, c } => {
                    let decay = 1.0 - t.powf(-0.8);
                    let (rows, cols) = (*rows, *cols);
                    let sq: Vec<f64> = g.data().iter().map(|x| x * x + ADAFACTOR_EPS).collect();
                    for i in 0..rows {
                        let mean = sq[i * cols..(i + 1) * cols].iter().sum::<f64>() / cols as f64;
                        r[i] = decay * r[i] + (1.0 - decay) * mean;
                    }
                    for j in 0..cols {
                        let mean = (0..rows).map(|i| sq[i * cols + j]).sum::<f64>() / rows as f64;
                        c[j] = decay * c[j] + (1.0 - decay) * mean;
                    }
                    let r_mean = r.iter().sum::<f64>() / rows as f64;
                    let mut u: Vec<f64> = (0..rows * cols)
                        .map(|idx| g.data()[idx] / (r[idx / cols] * c[idx % cols] / r_mean).sqrt())
                        .collect();
                    clip_update(&mut u);
                    for (x, ui) in data.iter_mut().zip(u) {
                        *x -= lr * ui;
                    }
                }
                Moments::Unfactored { v } => {
                    let decay = 1.0 - t.powf(-0.8);
                    let mut u = Vec::with_capacity(v.len());
                    for (vi, &gi) in v.iter_mut().zip(g.data()) {
                        *vi = decay * *vi + (1.0 - decay) * (gi * gi + ADAFACTOR_EPS);
                        u.push(gi / vi.sqrt());
                    }
                    clip_update(&mut u);
                    for (x, ui) in data.iter_mut().zip(u) {
                        *x -= lr * ui;
                    }
                }
            }
            *p = Tensor::new(&shape, data)?;
        }
        Ok(())
    }
}

fn init_moments(kind: OptimizerKind, shape: &[usize]) -> Moments {
    let n: usize = shape.iter().product();
    match kind {
        OptimizerKind::Adam => Moments::Adam { m: vec![0.0; n], v: vec![0.0; n] },
        OptimizerKind::Adafactor if shape.len() >= 2 => {
            let rows = shape[0];
            let cols = n / rows;
            Moments::Factored { rows, cols, r: vec![0.0; rows], c: vec![0.0; cols] }
        }
        OptimizerKind::Adafactor => Moments::Unfactored { v: vec![0.0; n] },
    }
}

fn clip_update(u: &mut [f64]) {
    let rms = (u.iter().map(|x| x * x).sum::<f64>() / u.len() as f64).sqrt();
    let scale = (rms / ADAFACTOR_CLIP).max(1.0);
    for x in u {
        *x /= scale;
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

pub struct Trainer {
    config: TrainConfig,
    optimizer: Optimizer,
    step: usize,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self { optimizer: Optimizer::new(config.optimizer), config, step: 0, rng })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Loss before the update; the model is updated in place.
    pub fn train_step(&mut self, model: &mut Model, batch: &[Episode]) -> Result<f64> {
        let dropout_seed = (model.config().dropout_rate > 0.0).then(|| self.rng.gen());
        let (loss, grads) = batch_loss_and_grads(model, batch, &self.config, dropout_seed)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step, loss });
        }
        let lr = lr_schedule(self.step + 1, &self.config);
        self.optimizer.update(model.params_mut(), &grads, lr)?;
        self.step += 1;
        Ok(loss)
    }

    pub fn sample_batch(&mut self, family: &TaskFamily) -> Result<Vec<Episode>> {
        (0..self.config.batch_size)
            .map(|_| sample_episode_with(family, self.config.train_k, &mut self.rng))
            .collect()
    }

    /// Runs the remaining steps, optionally writing a `step,loss,lr` CSV log.
    pub fn run(&mut self, model: &mut Model, family: &TaskFamily, mut log: Option<&mut dyn Write>) -> Result<Vec<LogRow>> {
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "step,loss,lr")?;
        }
        let mut rows = Vec::with_capacity(self.config.steps - self.step);
        while self.step < self.config.steps {
            let batch = self.sample_batch(family)?;
            let lr = lr_schedule(self.step + 1, &self.config);
            let loss = self.train_step(model, &batch)?;
            let row = LogRow { step: self.step, loss, lr };
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{},{},{}", row.step, row.loss, row.lr)?;
            }
            rows.push(row);
        }
        Ok(rows)
    }
}

/// Anything that can answer an episode with a candidate index.
pub trait Predictor {
    fn predict(&self, episode: &Episode) -> Result<usize>;
}

/// Scores every demonstration of an episode through a fusion scheme.
pub struct ModelPredictor<'a> {
    pub model: &'a Model,
    pub scheme: FusionScheme,
    pub groups: usize,
    pub l_max: usize,
    pub format: PromptFormat,
}

impl<'a> ModelPredictor<'a> {
    pub fn single(model: &'a Model, l_max: usize, format: PromptFormat) -> Self {
        Self { model, scheme: FusionScheme::Single, groups: 1, l_max, format }
    }
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, episode: &Episode) -> Result<usize> {
        let opts = FusionOptions {
            scheme: self.scheme,
            groups: self.groups,
            k: episode.demos.len(),
            l_max: self.l_max,
            format: self.format,
        };
        predict_episode(self.model, episode, &opts)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub test_k: usize,
    pub episodes: usize,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation across seeds.
    pub std: f64,
}

impl EvalReport {
    /// Binomial standard error of the pooled accuracy.
    pub fn standard_error(&self) -> f64 {
        let n = (self.episodes * self.per_seed.len()) as f64;
        (self.mean * (1.0 - self.mean) / n).sqrt()
    }
}

/// Accuracy over `episodes` fresh episodes for each demonstration seed.
pub fn evaluate(
    predictor: &dyn Predictor,
    family: &TaskFamily,
    test_k: usize,
    episodes: usize,
    seeds: &[u64],
) -> Result<EvalReport> {
    if episodes == 0 || seeds.is_empty() {
        return Err(Error::Config("evaluation needs at least one episode and one seed".into()));
    }
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut correct = 0usize;
        for _ in 0..episodes {
            let episode = sample_episode_with(family, test_k, &mut rng)?;
            let gold = episode
                .test
                .gold_index()
                .ok_or_else(|| Error::Config("test example has no candidate answers".into()))?;
            if predictor.predict(&episode)? == gold {
                correct += 1;
            }
        }
        per_seed.push(correct as f64 / episodes as f64);
    }
    let n = per_seed.len() as f64;
    let mean = per_seed.iter().sum::<f64>() / n;
    let std = if per_seed.len() > 1 {
        (per_seed.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(EvalReport { test_k, episodes, per_seed, mean, std })
}

/// The standard five demonstration seeds derived from a base seed.
pub fn eval_seeds(base: u64) -> Vec<u64> {
    (0..5).map(|i| base.wrapping_mul(1_000_003).wrapping_add(i)).collect()
}
