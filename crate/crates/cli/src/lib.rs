//! Command-line front end: self-checks, training, evaluation, benchmarking
//! and synthetic data generation.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};

use saicl_core::attention::AttentionVariant;
use saicl_core::bench::{self, BenchSpec};
use saicl_core::fusion::{FusionScheme, PromptFormat};
use saicl_core::layout::BucketParams;
use saicl_core::model::{Model, ModelConfig};
use saicl_core::tasks::{read_dataset, sample_episode_with, write_dataset, Episode, TaskFamily, TaskKind};
use saicl_core::train::{eval_seeds, evaluate, ModelPredictor, OptimizerKind, Predictor, TrainConfig, Trainer};
use saicl_core::verify::run_verification;
use saicl_core::Error;

/// Environment variable that overrides the default RNG seed.
pub const SEED_ENV: &str = "SAICL_SEED";

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "saicl", version, about = "Structured in-context learning attention toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the oracle, invariance and gradient self-checks.
    Verify {
        /// Fewer random instances.
        #[arg(long)]
        quick: bool,
    },
    /// Meta-train a model on a synthetic task family.
    Train(TrainArgs),
    /// Evaluate a model with a chosen fusion scheme.
    Eval(EvalArgs),
    /// Time both attention variants over a grid of demonstration counts.
    Bench(BenchArgs),
    /// Write synthetic episodes as JSON lines.
    GenData(GenArgs),
}

#[derive(Args, Debug, Default)]
struct ModelArgs {
    /// Attention variant for a freshly initialized model: full or saicl.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    encoder_layers: Option<usize>,
    #[arg(long)]
    decoder_layers: Option<usize>,
    #[arg(long)]
    ff_width: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Flat key=value file supplying defaults for any flag.
    #[arg(long)]
    config: Option<PathBuf>,
    /// lookup, linear-label or copy-offset.
    #[arg(long)]
    family: Option<String>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    train_k: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// adam or adafactor.
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    l_max: Option<usize>,
    /// direct or channel.
    #[arg(long)]
    format: Option<String>,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// CSV training log (step,loss,lr).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trained checkpoint; a fresh model is initialized when omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    family: Option<String>,
    /// JSON-lines file of examples to evaluate instead of sampled episodes.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated demonstration counts.
    #[arg(long)]
    test_k: Option<String>,
    /// Episodes per seed.
    #[arg(long)]
    episodes: Option<usize>,
    /// Number of demonstration seeds.
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// single, fid, group-fid or ensemble.
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long)]
    groups: Option<usize>,
    /// direct or channel.
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    l_max: Option<usize>,
    /// Print one JSON object per test_k instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated, strictly increasing demonstration counts.
    #[arg(long)]
    k_grid: Option<String>,
    /// Comma-separated segment lengths.
    #[arg(long)]
    lengths: Option<String>,
    #[arg(long)]
    repetitions: Option<usize>,
    #[arg(long)]
    warmup_runs: Option<usize>,
    /// Comma-separated variants among full and saicl.
    #[arg(long)]
    variants: Option<String>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    head_dim: Option<usize>,
    /// Dense score budget in MiB before a row is reported as OOM.
    #[arg(long)]
    memory_ceiling_mb: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    family: Option<String>,
    /// Demonstrations per episode.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

/// Values from a flat `key=value` file. Keys may use `-` or `_`.
#[derive(Debug, Default)]
struct ConfigFile {
    values: HashMap<String, String>,
}

impl ConfigFile {
    fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut values = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| usage(format!("{}:{}: expected key=value", path.display(), n + 1)))?;
            values.insert(key.trim().replace('-', "_"), value.trim().to_string());
        }
        Ok(Self { values })
    }

    /// Flag value if given, else the config file entry, else `None`.
    fn get<T: FromStr>(&self, flag: Option<T>, key: &str) -> anyhow::Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse().map(Some).map_err(|e| usage(format!("config key {key}: {e}"))),
        }
    }

    fn or<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> anyhow::Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(flag, key)?.unwrap_or(default))
    }

    /// Seed precedence: flag, then environment, then config file, then 0.
    fn seed(&self, flag: Option<u64>) -> anyhow::Result<u64> {
        if let Some(s) = flag {
            return Ok(s);
        }
        if let Ok(raw) = std::env::var(SEED_ENV) {
            return raw.trim().parse().map_err(|e| usage(format!("{SEED_ENV}: {e}")));
        }
        self.or(None, "seed", 0)
    }
}

/// Marks an error as a usage problem (exit code 2).
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

fn parse_list<T: FromStr>(raw: &str, what: &str) -> anyhow::Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    raw.split(',')
        .map(|s| s.trim().parse().map_err(|e| usage(format!("{what}: '{s}': {e}"))))
        .collect()
}

fn parse_named<T: FromStr<Err = Error>>(raw: &str) -> anyhow::Result<T> {
    raw.parse().map_err(|e: Error| usage(e.to_string()))
}

fn model_config(cfg: &ConfigFile, args: &ModelArgs) -> anyhow::Result<ModelConfig> {
    let d = ModelConfig::default();
    let variant = match cfg.get(args.variant.clone(), "variant")? {
        Some(v) => parse_named(&v)?,
        None => d.variant,
    };
    let config = ModelConfig {
        vocab_size: cfg.or(args.vocab_size, "vocab_size", d.vocab_size)?,
        d_model: cfg.or(args.d_model, "d_model", d.d_model)?,
        heads: cfg.or(args.heads, "heads", d.heads)?,
        encoder_layers: cfg.or(args.encoder_layers, "encoder_layers", d.encoder_layers)?,
        decoder_layers: cfg.or(args.decoder_layers, "decoder_layers", d.decoder_layers)?,
        ff_width: cfg.or(args.ff_width, "ff_width", d.ff_width)?,
        variant,
        ..d
    };
    config.validate().map_err(|e| usage(e.to_string()))?;
    Ok(config)
}

fn family(cfg: &ConfigFile, flag: Option<String>) -> anyhow::Result<TaskFamily> {
    let kind: TaskKind = parse_named(&cfg.or(flag, "family", "lookup".to_string())?)?;
    Ok(TaskFamily::of_kind(kind))
}

fn check_vocab(family: &TaskFamily, config: &ModelConfig) -> anyhow::Result<()> {
    if family.vocab_end() as usize > config.vocab_size {
        return Err(usage(format!(
            "task family emits tokens up to {} but the vocabulary has {}",
            family.vocab_end(),
            config.vocab_size
        )));
    }
    Ok(())
}

fn cmd_verify(quick: bool, out: &mut dyn Write) -> anyhow::Result<i32> {
    let report = run_verification(quick);
    for c in &report.checks {
        writeln!(out, "{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail)?;
    }
    Ok(if report.all_passed() { EXIT_OK } else { EXIT_FAILURE })
}

fn cmd_train(args: TrainArgs, out: &mut dyn Write) -> anyhow::Result<i32> {
    let cfg = ConfigFile::load(args.config.as_deref())?;
    let d = TrainConfig::default();
    let train = TrainConfig {
        train_k: cfg.or(args.train_k, "train_k", d.train_k)?,
        test_k: d.test_k.clone(),
        steps: cfg.or(args.steps, "steps", d.steps)?,
        batch_size: cfg.or(args.batch_size, "batch_size", d.batch_size)?,
        lr: cfg.or(args.lr, "lr", d.lr)?,
        warmup_fraction: cfg.or(args.warmup, "warmup", d.warmup_fraction)?,
        seed: cfg.seed(args.seed)?,
        optimizer: parse_named::<OptimizerKind>(&cfg.or(args.optimizer, "optimizer", d.optimizer.to_string())?)?,
        l_max: cfg.or(args.l_max, "l_max", d.l_max)?,
        format: parse_named::<PromptFormat>(&cfg.or(args.format, "format", d.format.to_string())?)?,
    };
    train.validate().map_err(|e| usage(e.to_string()))?;
    let config = model_config(&cfg, &args.model)?;
    let family = family(&cfg, args.family)?;
    check_vocab(&family, &config)?;

    let mut model = Model::new(config, train.seed)?;
    let mut trainer = Trainer::new(train)?;
    let mut log = match &args.log {
        Some(p) => Some(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => None,
    };
    let rows = trainer.run(&mut model, &family, log.as_mut().map(|w| w as &mut dyn Write))?;
    if let Some(mut w) = log {
        w.flush()?;
    }
    model.save(&args.out)?;
    let last = rows.last().expect("at least one step");
    writeln!(out, "trained {} steps, final loss {:.4}, checkpoint {}", last.step, last.loss, args.out.display())?;
    Ok(EXIT_OK)
}

/// Groups dataset lines into episodes: per task, consecutive runs of `k`
/// demonstrations followed by one test example.
fn dataset_episodes(path: &Path, k: usize) -> anyhow::Result<Vec<Episode>> {
    let examples = read_dataset(path)?;
    let mut by_task: Vec<(String, Vec<_>)> = Vec::new();
    for ex in examples {
        match by_task.iter_mut().find(|(t, _)| *t == ex.task) {
            Some((_, v)) => v.push(ex),
            None => by_task.push((ex.task.clone(), vec![ex])),
        }
    }
    let mut episodes = Vec::new();
    for (_, examples) in by_task {
        for chunk in examples.chunks_exact(k + 1) {
            episodes.push(Episode { demos: chunk[..k].to_vec(), test: chunk[k].clone() });
        }
    }
    if episodes.is_empty() {
        bail!("{} holds no complete episode of {} examples", path.display(), k + 1);
    }
    Ok(episodes)
}

fn dataset_accuracy(predictor: &dyn Predictor, episodes: &[Episode]) -> anyhow::Result<f64> {
    let mut correct = 0;
    for e in episodes {
        let gold = e.test.gold_index().ok_or_else(|| anyhow!("test example without options"))?;
        if predictor.predict(e)? == gold {
            correct += 1;
        }
    }
    Ok(correct as f64 / episodes.len() as f64)
}

fn cmd_eval(args: EvalArgs, out: &mut dyn Write) -> anyhow::Result<i32> {
    let cfg = ConfigFile::load(args.config.as_deref())?;
    let seed = cfg.seed(args.seed)?;
    let model = match &args.checkpoint {
        Some(p) => {
            let mut m = Model::load(p).with_context(|| format!("loading {}", p.display()))?;
            if let Some(v) = cfg.get(args.model.variant.clone(), "variant")? {
                m = m.with_variant(parse_named::<AttentionVariant>(&v)?);
            }
            m
        }
        None => Model::new(model_config(&cfg, &args.model)?, seed)?,
    };
    let scheme: FusionScheme = parse_named(&cfg.or(args.scheme, "scheme", "single".to_string())?)?;
    let groups = cfg.or(args.groups, "groups", 1)?;
    let format: PromptFormat = parse_named(&cfg.or(args.format, "format", "direct".to_string())?)?;
    let l_max = cfg.or(args.l_max, "l_max", TrainConfig::default().l_max)?;
    let test_k: Vec<usize> = parse_list(&cfg.or(args.test_k, "test_k", "2,4,8".to_string())?, "test_k")?;
    if test_k.contains(&0) {
        return Err(usage("test_k values must be >= 1"));
    }
    if scheme == FusionScheme::Single && groups != 1 {
        return Err(usage("--groups only applies to group-fid and ensemble"));
    }
    if let Some(&k) = test_k.iter().find(|&&k| groups > k) {
        return Err(usage(Error::TooManyGroups { groups, k }.to_string()));
    }
    let predictor = ModelPredictor { model: &model, scheme, groups, l_max, format };

    if let Some(data) = &args.data {
        for &k in &test_k {
            let episodes = dataset_episodes(data, k)?;
            let acc = dataset_accuracy(&predictor, &episodes)?;
            writeln!(out, "test_k={k} episodes={} accuracy={acc:.4}", episodes.len())?;
        }
        return Ok(EXIT_OK);
    }

    let family = family(&cfg, args.family)?;
    check_vocab(&family, model.config())?;
    let episodes = cfg.or(args.episodes, "episodes", 100)?;
    let n_seeds = cfg.or(args.seeds, "seeds", 5)?;
    let seeds: Vec<u64> = eval_seeds(seed).into_iter().chain((5..).map(|i| seed.wrapping_mul(1_000_003).wrapping_add(i))).take(n_seeds).collect();
    for &k in &test_k {
        let report = evaluate(&predictor, &family, k, episodes, &seeds)?;
        if args.json {
            writeln!(out, "{}", serde_json::to_string(&report)?)?;
        } else {
            writeln!(
                out,
                "scheme={scheme} test_k={k} accuracy={:.4} std={:.4} per_seed={:?}",
                report.mean, report.std, report.per_seed
            )?;
        }
    }
    Ok(EXIT_OK)
}

fn cmd_bench(args: BenchArgs, out: &mut dyn Write) -> anyhow::Result<i32> {
    let cfg = ConfigFile::load(args.config.as_deref())?;
    let d = BenchSpec::default();
    let list = |flag: Option<String>, key: &str, default: &[usize]| -> anyhow::Result<Vec<usize>> {
        match cfg.get(flag, key)? {
            Some(raw) => parse_list(&raw, key),
            None => Ok(default.to_vec()),
        }
    };
    let variants = match cfg.get(args.variants, "variants")? {
        Some(raw) => raw.split(',').map(|v| parse_named::<AttentionVariant>(v.trim())).collect::<anyhow::Result<_>>()?,
        None => d.variants.clone(),
    };
    let spec = BenchSpec {
        k_grid: list(args.k_grid, "k_grid", &d.k_grid)?,
        lengths: list(args.lengths, "lengths", &d.lengths)?,
        repetitions: cfg.or(args.repetitions, "repetitions", d.repetitions)?,
        warmup: cfg.or(args.warmup_runs, "warmup_runs", d.warmup)?,
        variants,
        heads: cfg.or(args.heads, "heads", d.heads)?,
        head_dim: cfg.or(args.head_dim, "head_dim", d.head_dim)?,
        bias: BucketParams::default(),
        memory_ceiling_bytes: cfg.or(args.memory_ceiling_mb, "memory_ceiling_mb", d.memory_ceiling_bytes >> 20)? << 20,
        seed: cfg.seed(args.seed)?,
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let records = bench::run_bench(&spec)?;
    match &args.out {
        Some(p) => bench::write_csv(&records, BufWriter::new(File::create(p)?))?,
        None => bench::write_csv(&records, &mut *out)?,
    }
    Ok(EXIT_OK)
}

fn cmd_gen(args: GenArgs, out: &mut dyn Write) -> anyhow::Result<i32> {
    use rand::SeedableRng;
    let cfg = ConfigFile::load(args.config.as_deref())?;
    let family = family(&cfg, args.family)?;
    let k = cfg.or(args.k, "k", 8)?;
    let episodes = cfg.or(args.episodes, "episodes", 10)?;
    if k == 0 {
        return Err(usage("k must be >= 1"));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed(args.seed)?);
    let mut examples = Vec::with_capacity(episodes * (k + 1));
    for i in 0..episodes {
        let e = sample_episode_with(&family, k, &mut rng)?;
        let task = format!("{}-{i}", family.kind.name());
        for mut ex in e.demos.into_iter().chain([e.test]) {
            ex.task = task.clone();
            examples.push(ex);
        }
    }
    write_dataset(&args.out, &examples)?;
    writeln!(out, "wrote {} examples to {}", examples.len(), args.out.display())?;
    Ok(EXIT_OK)
}

/// Parses `argv` (including the program name) and runs the command, writing
/// normal output to `out` and diagnostics to `err`. Returns the exit code.
pub fn run_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    let result = match cli.command {
        Command::Verify { quick } => cmd_verify(quick, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Bench(a) => cmd_bench(a, out),
        Command::GenData(a) => cmd_gen(a, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            let is_usage = e.downcast_ref::<UsageError>().is_some()
                || matches!(e.downcast_ref::<Error>(), Some(Error::Config(_) | Error::TooManyGroups { .. }));
            if is_usage {
                let _ = writeln!(err, "run `saicl --help` for usage");
                EXIT_USAGE
            } else {
                EXIT_FAILURE
            }
        }
    }
}

pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(argv, &mut std::io::stdout().lock(), &mut std::io::stderr().lock())
}
