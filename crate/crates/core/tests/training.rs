use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use saicl_core::attention::AttentionVariant;
use saicl_core::fusion::{training_pair, PromptFormat};
use saicl_core::model::{InitScheme, Model, ModelConfig};
use saicl_core::tasks::{sample_episode_with, Episode, TaskFamily};
use saicl_core::tensor::Tape;
use saicl_core::train::{
    batch_loss_and_grads, evaluate, lr_schedule, ModelPredictor, Optimizer, OptimizerKind, Predictor, TrainConfig,
    Trainer,
};
use saicl_core::{Error, Result};

fn small(init: InitScheme) -> ModelConfig {
    ModelConfig { d_model: 16, heads: 2, ff_width: 32, init, ..ModelConfig::default() }
}

fn batch(n: usize, k: usize, seed: u64) -> Vec<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| sample_episode_with(&TaskFamily::lookup(), k, &mut rng).unwrap()).collect()
}

#[test]
fn schedule_warms_up_then_decays() {
    let cfg = TrainConfig { steps: 3000, lr: 2e-3, ..TrainConfig::default() };
    assert_eq!(lr_schedule(0, &cfg), 0.0);
    assert!((lr_schedule(300, &cfg) - 2e-3).abs() < 1e-18);
    assert!((lr_schedule(150, &cfg) - 1e-3).abs() < 1e-18);
    assert!((lr_schedule(1650, &cfg) - 1e-3).abs() < 1e-15);
    assert_eq!(lr_schedule(3000, &cfg), 0.0);
}

#[test]
fn untrained_loss_levels() {
    let model = Model::new(small(InitScheme::Normal), 0).unwrap();
    let episodes = batch(200, 8, 1);
    let cfg = TrainConfig::default();
    let (loss, _) = batch_loss_and_grads(&model, &episodes, &cfg, None).unwrap();
    // the objective normalizes over the whole vocabulary
    assert!((loss - 64f64.ln()).abs() < 0.1, "loss {loss}");

    let mut restricted = 0.0;
    for e in &episodes {
        let (pack, _) = training_pair(e, 8, 256, PromptFormat::Direct).unwrap();
        let scores = model.candidate_logprobs(&pack, e.test.options.as_ref().unwrap()).unwrap();
        let z = scores.iter().map(|s| s.exp()).sum::<f64>().ln();
        restricted -= scores[e.test.gold_index().unwrap()] - z;
    }
    restricted /= episodes.len() as f64;
    assert!((restricted - 4f64.ln()).abs() < 0.1, "restricted loss {restricted}");
}

#[test]
fn small_steps_descend() {
    let cfg = TrainConfig { train_k: 4, ..TrainConfig::default() };
    let mut wins = 0;
    for trial in 0..50 {
        let mut model = Model::new(ModelConfig { d_model: 8, heads: 2, ff_width: 16, ..ModelConfig::default() }, trial).unwrap();
        let episodes = batch(2, 4, 100 + trial);
        let (before, grads) = batch_loss_and_grads(&model, &episodes, &cfg, None).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Adam);
        opt.update(model.params_mut(), &grads, 1e-4).unwrap();
        let (after, _) = batch_loss_and_grads(&model, &episodes, &cfg, None).unwrap();
        if after <= before {
            wins += 1;
        }
    }
    assert!(wins > 25, "{wins} of 50");
}

fn loss_curve(seed: u64, optimizer: OptimizerKind) -> Vec<f64> {
    let cfg = TrainConfig { steps: 6, batch_size: 3, train_k: 3, seed, optimizer, ..TrainConfig::default() };
    let mut model = Model::new(small(InitScheme::FanIn), seed).unwrap();
    let mut trainer = Trainer::new(cfg).unwrap();
    let mut csv = Vec::new();
    let rows = trainer.run(&mut model, &TaskFamily::lookup(), Some(&mut csv)).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().count(), 7);
    assert!(text.starts_with("step,loss,lr\n"));
    rows.iter().map(|r| r.loss).collect()
}

#[test]
fn fixed_seed_reproduces_loss_curve() {
    for optimizer in [OptimizerKind::Adam, OptimizerKind::Adafactor] {
        let a = loss_curve(5, optimizer);
        assert_eq!(a, loss_curve(5, optimizer));
        assert!(a.iter().all(|l| l.is_finite()));
        assert_ne!(a, loss_curve(6, optimizer));
    }
}

#[test]
fn non_finite_loss_aborts() {
    let mut model = Model::new(small(InitScheme::FanIn), 0).unwrap();
    let embed = model.params()["embed"].map(|_| f64::NAN);
    model.params_mut().insert("embed".into(), embed);
    let mut trainer = Trainer::new(TrainConfig { steps: 2, batch_size: 1, ..TrainConfig::default() }).unwrap();
    let b = trainer.sample_batch(&TaskFamily::lookup()).unwrap();
    assert!(matches!(trainer.train_step(&mut model, &b), Err(Error::NonFiniteLoss { .. }) | Err(Error::NaN(_))));
}

#[test]
fn untrained_accuracy_is_chance() {
    let model = Model::new(small(InitScheme::FanIn), 9).unwrap();
    let predictor = ModelPredictor::single(&model, 256, PromptFormat::Direct);
    let report = evaluate(&predictor, &TaskFamily::lookup(), 4, 120, &[1, 2, 3, 4, 5]).unwrap();
    let se = (0.25f64 * 0.75 / 600.0).sqrt();
    assert!((report.mean - 0.25).abs() < 4.0 * se, "accuracy {}", report.mean);
    assert_eq!(report.per_seed.len(), 5);
    assert_eq!(evaluate(&predictor, &TaskFamily::lookup(), 4, 120, &[1, 2, 3, 4, 5]).unwrap(), report);
}

/// Answers by reading the matching demonstration.
struct LookupStub;

impl Predictor for LookupStub {
    fn predict(&self, episode: &Episode) -> Result<usize> {
        let hit = episode.demos.iter().find(|d| d.input == episode.test.input).unwrap();
        Ok(episode.test.options.as_ref().unwrap().iter().position(|o| *o == hit.output).unwrap())
    }
}

#[test]
fn perfect_stub_scores_one() {
    let report = evaluate(&LookupStub, &TaskFamily::lookup(), 8, 50, &[7, 8, 9, 10, 11]).unwrap();
    assert_eq!(report.mean, 1.0);
    assert_eq!(report.std, 0.0);
    assert_eq!(report.standard_error(), 0.0);
}

#[test]
fn checkpoint_file_preserves_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = Model::new(small(InitScheme::FanIn), 12).unwrap().with_variant(AttentionVariant::Full);
    model.save(&path).unwrap();
    let loaded = Model::load(&path).unwrap();
    assert_eq!(loaded.config(), model.config());
    assert_eq!(loaded.params(), model.params());
    let episodes = batch(3, 4, 2);
    for e in &episodes {
        let (pack, _) = training_pair(e, 4, 256, PromptFormat::Direct).unwrap();
        let opts = e.test.options.as_ref().unwrap();
        assert_eq!(model.candidate_logprobs(&pack, opts).unwrap(), loaded.candidate_logprobs(&pack, opts).unwrap());
    }
    let tape = Tape::new();
    assert_eq!(loaded.bind(&tape, false).vars().len(), model.params().len());
}
