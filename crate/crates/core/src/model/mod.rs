//! A small pre-norm encoder-decoder transformer.
//!
//! Both stacks use relative position bias instead of absolute positions. The
//! encoder attention is pluggable (dense or structured); decoder
//! self-attention is dense and causal, and cross-attention reads every
//! non-padding encoder position.

mod checkpoint;

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    causal_mask, full_attention, saicl_attention, AttentionConfig, AttentionVariant, Dropout,
};
use crate::error::{Error, Result};
use crate::fusion::PromptPack;
use crate::layout::{build_full_mask, BucketParams, RelativeBiasTable, SegmentLayout};
use crate::tensor::{Tape, Tensor, Var, MASK_SENTINEL};
use crate::{TokenId, BOS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ff_width: usize,
    pub variant: AttentionVariant,
    pub bias: BucketParams,
    pub dropout_rate: f64,
    pub init: InitScheme,
    /// Standard deviation of every weight under [`InitScheme::Normal`], and
    /// of the relative bias tables under either scheme.
    pub init_std: f64,
    /// Initial value of every encoder bias entry under [`InitScheme::FanIn`].
    /// Pairs in different segments carry no bias, so a positive value starts
    /// each token attending mostly within its own segment.
    pub segment_prior: f64,
    pub layer_norm_eps: f64,
}

/// Weight initialization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    /// Every weight drawn with the same standard deviation.
    Normal,
    /// Unit-variance embeddings and `1/sqrt(fan_in)` projections.
    FanIn,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 64,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            ff_width: 128,
            variant: AttentionVariant::Saicl,
            bias: BucketParams::default(),
            dropout_rate: 0.0,
            init: InitScheme::FanIn,
            init_std: 0.02,
            segment_prior: 3.0,
            layer_norm_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            variant: self.variant,
            heads: self.heads,
            head_dim: self.head_dim(),
            dropout_rate: self.dropout_rate,
            bias: self.bias,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [self.vocab_size, self.d_model, self.heads, self.encoder_layers, self.decoder_layers, self.ff_width];
        if counts.contains(&0) {
            return Err(Error::Config("model sizes must all be >= 1".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!("width {} not divisible by {} heads", self.d_model, self.heads)));
        }
        if self.vocab_size <= BOS as usize {
            return Err(Error::Config("vocabulary must contain the special tokens".into()));
        }
        self.attention().validate(self.d_model)
    }
}

/// Model parameters and configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: BTreeMap<String, Tensor>,
}

impl Model {
    /// Scaled-normal initialization from a seed; layer norms start at identity.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        let (v, d, h, f) = (config.vocab_size, config.d_model, config.heads, config.ff_width);
        let e = config.head_dim();
        let base = config.init_std;
        let fan_in = |n: usize| match config.init {
            InitScheme::Normal => base,
            InitScheme::FanIn => (n as f64).powf(-0.5),
        };
        let mut normal = |name: String, shape: &[usize], std: f64| {
            params.insert(name, Tensor::randn(shape, std, &mut rng));
        };
        let embed_std = match config.init {
            InitScheme::Normal => base,
            InitScheme::FanIn => 1.0,
        };
        normal("embed".into(), &[v, d], embed_std);
        normal("enc.role".into(), &[2, d], embed_std);
        normal("enc.rel_bias".into(), &[config.bias.num_buckets, h], base);
        normal("dec.rel_bias".into(), &[config.bias.num_buckets, h], base);
        let attention = |normal: &mut dyn FnMut(String, &[usize], f64), prefix: String| {
            // queries also absorb the 1/sqrt(head_dim) that the logits omit
            normal(format!("{prefix}.q"), &[d, h, e], fan_in(d * e));
            normal(format!("{prefix}.k"), &[d, h, e], fan_in(d));
            normal(format!("{prefix}.v"), &[d, h, e], fan_in(d));
            normal(format!("{prefix}.o"), &[h, e, d], fan_in(h * e));
        };
        for i in 0..config.encoder_layers {
            attention(&mut normal, format!("enc.{i}.attn"));
            normal(format!("enc.{i}.ff.in"), &[d, f], fan_in(d));
            normal(format!("enc.{i}.ff.out"), &[f, d], fan_in(f));
        }
        for i in 0..config.decoder_layers {
            for block in ["self", "cross"] {
                attention(&mut normal, format!("dec.{i}.{block}"));
            }
            normal(format!("dec.{i}.ff.in"), &[d, f], fan_in(d));
            normal(format!("dec.{i}.ff.out"), &[f, d], fan_in(f));
        }
        normal("lm_head".into(), &[d, v], fan_in(d));
        if config.init == InitScheme::FanIn {
            params.insert("enc.rel_bias".into(), Tensor::full(&[config.bias.num_buckets, h], config.segment_prior));
        }

        let mut norms = vec!["enc.ln".to_string(), "dec.ln".to_string()];
        for i in 0..config.encoder_layers {
            norms.extend([format!("enc.{i}.ln1"), format!("enc.{i}.ln2")]);
        }
        for i in 0..config.decoder_layers {
            norms.extend([format!("dec.{i}.ln1"), format!("dec.{i}.ln2"), format!("dec.{i}.ln3")]);
        }
        for n in norms {
            params.insert(format!("{n}.g"), Tensor::ones(&[d]));
            params.insert(format!("{n}.b"), Tensor::zeros(&[d]));
        }
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: BTreeMap<String, Tensor>) -> Result<Self> {
        let template = Model::new(config.clone(), 0)?;
        for (name, t) in &template.params {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
            }
        }
        if params.len() != template.params.len() {
            return Err(Error::Checkpoint("unexpected extra parameters".into()));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Same weights with a different encoder attention variant.
    pub fn with_variant(&self, variant: AttentionVariant) -> Model {
        let mut m = self.clone();
        m.config.variant = variant;
        m
    }

    /// Loads every parameter onto `tape`, as trainable leaves or constants.
    pub fn bind<'a>(&'a self, tape: &'a Tape, trainable: bool) -> BoundModel<'a> {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| {
                let v = if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
                (name.clone(), v)
            })
            .collect();
        BoundModel { model: self, tape, vars, dropout: RefCell::new(None) }
    }

    /// Log-probability of each candidate continuation given a packed prompt.
    pub fn candidate_logprobs(&self, prompt: &PromptPack, candidates: &[Vec<TokenId>]) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let enc = bound.encode_prompt(prompt)?;
        candidates
            .iter()
            .map(|c| Ok(tape.value(bound.sequence_logprob(&enc, c)?).item()))
            .collect()
    }

    /// Index of the highest-scoring candidate; ties go to the lowest index.
    pub fn predict(&self, prompt: &PromptPack, candidates: &[Vec<TokenId>]) -> Result<usize> {
        Ok(argmax(&self.candidate_logprobs(prompt, candidates)?))
    }
}

/// First index of the maximum.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Encoder states with their key-validity mask.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `[T, d_model]`
    pub states: Var,
    pub valid: Vec<bool>,
}

impl EncoderOutput {
    /// Concatenates independently encoded prompts along the token axis.
    pub fn concat(tape: &Tape, parts: &[EncoderOutput]) -> Result<EncoderOutput> {
        let states: Vec<Var> = parts.iter().map(|p| p.states).collect();
        Ok(EncoderOutput {
            states: tape.concat(&states, 0)?,
            valid: parts.iter().flat_map(|p| p.valid.iter().copied()).collect(),
        })
    }
}

/// A model whose parameters live on a tape.
pub struct BoundModel<'a> {
    model: &'a Model,
    tape: &'a Tape,
    vars: HashMap<String, Var>,
    dropout: RefCell<Option<Dropout>>,
}

impl<'a> BoundModel<'a> {
    pub fn tape(&self) -> &'a Tape {
        self.tape
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    pub fn param(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn vars(&self) -> &HashMap<String, Var> {
        &self.vars
    }

    /// Enables attention dropout at the configured rate for this binding.
    pub fn enable_dropout(&self, seed: u64) {
        let rate = self.model.config.dropout_rate;
        if rate > 0.0 {
            *self.dropout.borrow_mut() = Some(Dropout::new(rate, ChaCha8Rng::seed_from_u64(seed)));
        }
    }

    fn embed(&self, ids: &[TokenId]) -> Result<Var> {
        let vocab = self.model.config.vocab_size;
        if let Some(&token) = ids.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::VocabOverflow { token, vocab });
        }
        let ids: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
        self.tape.embedding(self.param("embed"), &ids)
    }

    fn norm(&self, x: Var, name: &str) -> Result<Var> {
        let eps = self.model.config.layer_norm_eps;
        self.tape.layer_norm(x, self.param(&format!("{name}.g")), self.param(&format!("{name}.b")), eps)
    }

    fn heads(&self, x: Var, weight: &str) -> Result<Var> {
        self.tape.contract("td,dhe->hte", x, self.param(weight))
    }

    fn merge_heads(&self, z: Var, weight: &str) -> Result<Var> {
        self.tape.contract("hte,hed->td", z, self.param(weight))
    }

    fn feed_forward(&self, x: Var, prefix: &str) -> Result<Var> {
        let hidden = self.tape.contract("td,df->tf", x, self.param(&format!("{prefix}.ff.in")))?;
        let hidden = self.tape.relu(hidden);
        self.tape.contract("tf,fd->td", hidden, self.param(&format!("{prefix}.ff.out")))
    }

    fn bias_table(&self, name: &str, params: BucketParams) -> Result<RelativeBiasTable> {
        RelativeBiasTable::new(self.tape, params, self.param(name))
    }

    pub fn encode_prompt(&self, prompt: &PromptPack) -> Result<EncoderOutput> {
        self.encode(prompt.tokens(), prompt.layout(), self.model.config.variant)
    }

    /// Contextual states for a segmented prompt using the given encoder attention.
    pub fn encode(&self, tokens: &[TokenId], layout: &SegmentLayout, variant: AttentionVariant) -> Result<EncoderOutput> {
        if tokens.len() != layout.total_length() {
            return Err(Error::Shape(format!(
                "{} tokens for a layout of {}",
                tokens.len(),
                layout.total_length()
            )));
        }
        let tape = self.tape;
        let table = self.bias_table("enc.rel_bias", self.model.config.bias)?;
        let dense = match variant {
            AttentionVariant::Full => Some((
                tape.constant(build_full_mask(layout).to_tensor()),
                table.layout_bias(tape, layout, true)?,
            )),
            AttentionVariant::Saicl => None,
        };
        let roles = (0..tokens.len()).map(|p| Some(usize::from(layout.is_test(p)))).collect();
        let mut x = tape.add(self.embed(tokens)?, tape.gather_rows(self.param("enc.role"), roles)?)?;
        for i in 0..self.model.config.encoder_layers {
            let p = format!("enc.{i}");
            let h = self.norm(x, &format!("{p}.ln1"))?;
            let (q, k, v) = (
                self.heads(h, &format!("{p}.attn.q"))?,
                self.heads(h, &format!("{p}.attn.k"))?,
                self.heads(h, &format!("{p}.attn.v"))?,
            );
            let mut dropout = self.dropout.borrow_mut();
            let z = match dense {
                Some((mask, bias)) => full_attention(tape, q, k, v, Some(mask), Some(bias), dropout.as_mut())?,
                None => saicl_attention(tape, q, k, v, layout, Some(&table), dropout.as_mut())?,
            };
            drop(dropout);
            x = tape.add(x, self.merge_heads(z, &format!("{p}.attn.o"))?)?;
            let h = self.norm(x, &format!("{p}.ln2"))?;
            x = tape.add(x, self.feed_forward(h, &p)?)?;
        }
        let states = self.norm(x, "enc.ln")?;
        Ok(EncoderOutput { states, valid: (0..layout.total_length()).map(|p| layout.is_valid(p)).collect() })
    }

    /// Log-softmax decoder outputs `[n, V]` for a teacher-forced input sequence.
    pub fn decoder_log_probs(&self, enc: &EncoderOutput, inputs: &[TokenId]) -> Result<Var> {
        let tape = self.tape;
        let n = inputs.len();
        let self_bias = self.bias_table("dec.rel_bias", self.model.config.bias.unidirectional())?.sequence_bias(tape, n, n)?;
        let causal = tape.constant(causal_mask(n));
        let cross_mask: Vec<f64> = enc.valid.iter().map(|&ok| if ok { 0.0 } else { MASK_SENTINEL }).collect();
        let cross_mask = tape.constant(Tensor::new(&[cross_mask.len()], cross_mask)?);

        let mut x = self.embed(inputs)?;
        for i in 0..self.model.config.decoder_layers {
            let p = format!("dec.{i}");
            let h = self.norm(x, &format!("{p}.ln1"))?;
            let (q, k, v) = (
                self.heads(h, &format!("{p}.self.q"))?,
                self.heads(h, &format!("{p}.self.k"))?,
                self.heads(h, &format!("{p}.self.v"))?,
            );
            let z = full_attention(tape, q, k, v, Some(causal), Some(self_bias), None)?;
            x = tape.add(x, self.merge_heads(z, &format!("{p}.self.o"))?)?;

            let h = self.norm(x, &format!("{p}.ln2"))?;
            let q = self.heads(h, &format!("{p}.cross.q"))?;
            let k = self.heads(enc.states, &format!("{p}.cross.k"))?;
            let v = self.heads(enc.states, &format!("{p}.cross.v"))?;
            let z = full_attention(tape, q, k, v, Some(cross_mask), None, None)?;
            x = tape.add(x, self.merge_heads(z, &format!("{p}.cross.o"))?)?;

            let h = self.norm(x, &format!("{p}.ln3"))?;
            x = tape.add(x, self.feed_forward(h, &p)?)?;
        }
        let h = self.norm(x, "dec.ln")?;
        let logits = tape.contract("td,dv->tv", h, self.param("lm_head"))?;
        tape.log_softmax_last(logits)
    }

    /// Teacher-forced `log p(continuation | encoder states)` as a scalar.
    pub fn sequence_logprob(&self, enc: &EncoderOutput, continuation: &[TokenId]) -> Result<Var> {
        if continuation.is_empty() {
            return Err(Error::Config("continuation must be non-empty".into()));
        }
        let mut inputs = Vec::with_capacity(continuation.len());
        inputs.push(BOS);
        inputs.extend_from_slice(&continuation[..continuation.len() - 1]);
        let log_probs = self.decoder_log_probs(enc, &inputs)?;
        let targets: Vec<usize> = continuation.iter().map(|&t| t as usize).collect();
        if let Some(&t) = targets.iter().find(|&&t| t >= self.model.config.vocab_size) {
            return Err(Error::VocabOverflow { token: t as TokenId, vocab: self.model.config.vocab_size });
        }
        let picked = self.tape.pick(log_probs, &targets)?;
        Ok(self.tape.sum(picked))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{pack_prompt, PromptFormat};
    use crate::tasks::TaskExample;

    fn tiny() -> ModelConfig {
        ModelConfig { d_model: 16, heads: 2, ff_width: 32, vocab_size: 20, ..ModelConfig::default() }
    }

    fn demo(x: TokenId, y: TokenId) -> TaskExample {
        TaskExample { task: "t".into(), input: vec![x], output: vec![y], options: None }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { heads: 3, ..ModelConfig::default() }.validate().is_err());
        assert!(ModelConfig { encoder_layers: 0, ..ModelConfig::default() }.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn vocab_overflow_is_reported() {
        let model = Model::new(tiny(), 1).unwrap();
        let tape = Tape::new();
        let bound = model.bind(&tape, false);
        let layout = SegmentLayout::full(0, 2);
        assert!(matches!(
            bound.encode(&[3, 25], &layout, AttentionVariant::Saicl),
            Err(Error::VocabOverflow { token: 25, vocab: 20 })
        ));
    }

    #[test]
    fn zero_head_gives_uniform_logprob() {
        let mut model = Model::new(tiny(), 2).unwrap();
        let zero = Tensor::zeros(model.params()["lm_head"].shape());
        model.params_mut().insert("lm_head".into(), zero);
        let pack = pack_prompt(&[demo(4, 5)], &[6], 1, 8, PromptFormat::Direct).unwrap();
        let lp = model.candidate_logprobs(&pack, &[vec![7, 8, 9]]).unwrap()[0];
        assert!((lp + 3.0 * 20f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ties_break_to_lowest_index() {
        let model = Model::new(tiny(), 3).unwrap();
        let pack = pack_prompt(&[demo(4, 5)], &[6], 1, 8, PromptFormat::Direct).unwrap();
        assert_eq!(model.predict(&pack, &[vec![9]]).unwrap(), 0);
        assert_eq!(model.predict(&pack, &[vec![9], vec![9]]).unwrap(), 0);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn from_parts_checks_shapes() {
        let model = Model::new(tiny(), 4).unwrap();
        let mut params = model.params().clone();
        assert!(Model::from_parts(tiny(), params.clone()).is_ok());
        params.insert("embed".into(), Tensor::zeros(&[2, 2]));
        assert!(Model::from_parts(tiny(), params.clone()).is_err());
        params.remove("embed");
        assert!(Model::from_parts(tiny(), params).is_err());
    }
}
