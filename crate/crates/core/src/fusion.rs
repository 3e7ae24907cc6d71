//! Prompt construction, length-budgeted packing, and the fusion schemes.
//!
//! A prompt is a sequence of equally sized segments: one per admitted
//! demonstration followed by the test segment. Under the direct format a
//! demonstration is `x ++ y` and the test segment is `x_test`, with the
//! candidate answer scored by the decoder. Under the channel format the
//! demonstration is `y ++ x`, the test segment holds the candidate answer and
//! the decoder scores `x_test`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionVariant;
use crate::error::{Error, Result};
use crate::layout::SegmentLayout;
use crate::model::{argmax, BoundModel, EncoderOutput, Model};
use crate::tasks::{Episode, TaskExample};
use crate::tensor::Tape;
use crate::{TokenId, PAD};

/// Token budget per requested demonstration.
pub const TOKENS_PER_DEMO: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptFormat {
    Direct,
    Channel,
}

impl fmt::Display for PromptFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptFormat::Direct => "direct",
            PromptFormat::Channel => "channel",
        })
    }
}

impl FromStr for PromptFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(PromptFormat::Direct),
            "channel" => Ok(PromptFormat::Channel),
            other => Err(Error::Config(format!("unknown prompt format '{other}'"))),
        }
    }
}

impl PromptFormat {
    /// Demonstration segment tokens, truncated to `l_max`.
    pub fn demo_segment(self, demo: &TaskExample, l_max: usize) -> Vec<TokenId> {
        let (first, second) = match self {
            PromptFormat::Direct => (&demo.input, &demo.output),
            PromptFormat::Channel => (&demo.output, &demo.input),
        };
        first.iter().chain(second).copied().take(l_max).collect()
    }

    /// `(test segment, scored continuation)` for one candidate answer.
    pub fn split<'a>(self, input: &'a [TokenId], candidate: &'a [TokenId]) -> (&'a [TokenId], &'a [TokenId]) {
        match self {
            PromptFormat::Direct => (input, candidate),
            PromptFormat::Channel => (candidate, input),
        }
    }
}

/// Packed encoder input.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptPack {
    tokens: Vec<TokenId>,
    layout: SegmentLayout,
    format: PromptFormat,
    provenance: Vec<usize>,
}

impl PromptPack {
    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn layout(&self) -> &SegmentLayout {
        &self.layout
    }

    pub fn format(&self) -> PromptFormat {
        self.format
    }

    /// Indices into the caller's demonstration list, in prompt order.
    pub fn provenance(&self) -> &[usize] {
        &self.provenance
    }

    /// Unpadded tokens of segment `i`.
    pub fn segment(&self, i: usize) -> &[TokenId] {
        let l = self.layout.segment_length();
        &self.tokens[i * l..i * l + self.layout.valid_counts()[i]]
    }
}

/// Greedy in-order admission: take demonstrations while at most `k` are
/// admitted and their truncated lengths sum to at most `64·k`.
pub fn select_demonstrations(demos: &[TaskExample], k: usize, l_max: usize, format: PromptFormat) -> Vec<usize> {
    let budget = TOKENS_PER_DEMO * k;
    let mut used = 0;
    let mut admitted = Vec::new();
    for (i, d) in demos.iter().enumerate() {
        if admitted.len() == k {
            break;
        }
        let len = format.demo_segment(d, l_max).len();
        if used + len > budget {
            break;
        }
        used += len;
        admitted.push(i);
    }
    admitted
}

/// Lays out the given demonstrations and test segment without admission checks.
pub fn build_prompt(
    demos: &[TaskExample],
    order: &[usize],
    test_segment: &[TokenId],
    l_max: usize,
    format: PromptFormat,
) -> Result<PromptPack> {
    if l_max == 0 {
        return Err(Error::Config("per-sample length cap must be >= 1".into()));
    }
    if test_segment.is_empty() {
        return Err(Error::Config("test segment must be non-empty".into()));
    }
    let mut segments: Vec<Vec<TokenId>> = order.iter().map(|&i| format.demo_segment(&demos[i], l_max)).collect();
    segments.push(test_segment.iter().copied().take(l_max).collect());
    let l = segments.iter().map(Vec::len).max().unwrap_or(1).max(1);
    let mut tokens = Vec::with_capacity(l * segments.len());
    for s in &segments {
        tokens.extend_from_slice(s);
        tokens.resize(tokens.len() + l - s.len(), PAD);
    }
    let layout = SegmentLayout::new(l, segments.iter().map(Vec::len).collect())?;
    Ok(PromptPack { tokens, layout, format, provenance: order.to_vec() })
}

/// Truncates, admits and lays out a single prompt.
pub fn pack_prompt(
    demos: &[TaskExample],
    test_segment: &[TokenId],
    k: usize,
    l_max: usize,
    format: PromptFormat,
) -> Result<PromptPack> {
    let test_len = test_segment.len().min(l_max);
    let budget = TOKENS_PER_DEMO * k;
    if k > 0 && test_len > budget {
        return Err(Error::TestExceedsBudget { len: test_len, budget });
    }
    let order = select_demonstrations(demos, k, l_max, format);
    build_prompt(demos, &order, test_segment, l_max, format)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionScheme {
    Single,
    Fid,
    GroupFid,
    Ensemble,
}

impl fmt::Display for FusionScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionScheme::Single => "single",
            FusionScheme::Fid => "fid",
            FusionScheme::GroupFid => "group-fid",
            FusionScheme::Ensemble => "ensemble",
        })
    }
}

impl FromStr for FusionScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(FusionScheme::Single),
            "fid" => Ok(FusionScheme::Fid),
            "group-fid" | "group_fid" => Ok(FusionScheme::GroupFid),
            "ensemble" => Ok(FusionScheme::Ensemble),
            other => Err(Error::Config(format!("unknown fusion scheme '{other}'"))),
        }
    }
}

/// Splits `0..k` into `groups` contiguous runs whose sizes differ by at most one.
pub fn split_groups(k: usize, groups: usize) -> Result<Vec<Vec<usize>>> {
    if groups == 0 || groups > k {
        return Err(Error::TooManyGroups { groups, k });
    }
    let (base, extra) = (k / groups, k % groups);
    let mut start = 0;
    Ok((0..groups)
        .map(|g| {
            let size = base + usize::from(g < extra);
            let run = (start..start + size).collect();
            start += size;
            run
        })
        .collect())
}

/// Assignment of demonstrations to independently encoded groups.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FusionPlan {
    pub scheme: FusionScheme,
    pub groups: Vec<Vec<usize>>,
}

impl FusionPlan {
    pub fn new(scheme: FusionScheme, demos: usize, groups: usize) -> Result<Self> {
        let groups = match scheme {
            FusionScheme::Single => {
                if groups != 1 {
                    return Err(Error::Config("single-prompt fusion uses exactly one group".into()));
                }
                vec![(0..demos).collect()]
            }
            FusionScheme::Fid => split_groups(demos, demos)?,
            FusionScheme::GroupFid | FusionScheme::Ensemble => split_groups(demos, groups)?,
        };
        Ok(Self { scheme, groups })
    }
}

/// Settings shared by every scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionOptions {
    pub scheme: FusionScheme,
    pub groups: usize,
    /// Requested demonstration count, which also sets the token budget.
    pub k: usize,
    pub l_max: usize,
    pub format: PromptFormat,
}

impl Default for FusionOptions {
    fn default() -> Self {
        Self { scheme: FusionScheme::Single, groups: 1, k: 8, l_max: 256, format: PromptFormat::Direct }
    }
}

/// Each demonstration encoded alone with the test segment under dense
/// attention; the per-prompt states are concatenated.
pub fn fid_encode(
    bound: &BoundModel<'_>,
    demos: &[TaskExample],
    test_segment: &[TokenId],
    l_max: usize,
    format: PromptFormat,
) -> Result<EncoderOutput> {
    if demos.is_empty() {
        return Err(Error::Config("fusion-in-decoder needs at least one demonstration".into()));
    }
    let parts = (0..demos.len())
        .map(|i| {
            let pack = build_prompt(demos, &[i], test_segment, l_max, format)?;
            bound.encode(pack.tokens(), pack.layout(), AttentionVariant::Full)
        })
        .collect::<Result<Vec<_>>>()?;
    EncoderOutput::concat(bound.tape(), &parts)
}

/// `groups` multi-demonstration prompts encoded with the model's own
/// attention variant; the per-prompt states are concatenated.
pub fn group_fid_encode(
    bound: &BoundModel<'_>,
    demos: &[TaskExample],
    test_segment: &[TokenId],
    groups: usize,
    l_max: usize,
    format: PromptFormat,
) -> Result<EncoderOutput> {
    let parts = split_groups(demos.len(), groups)?
        .iter()
        .map(|g| {
            let pack = build_prompt(demos, g, test_segment, l_max, format)?;
            bound.encode_prompt(&pack)
        })
        .collect::<Result<Vec<_>>>()?;
    EncoderOutput::concat(bound.tape(), &parts)
}

/// Per-group candidate log-probabilities averaged across groups.
pub fn ensemble_logprobs(
    model: &Model,
    demos: &[TaskExample],
    test_input: &[TokenId],
    candidates: &[Vec<TokenId>],
    groups: usize,
    l_max: usize,
    format: PromptFormat,
) -> Result<Vec<f64>> {
    let plan = split_groups(demos.len(), groups)?;
    let mut total = vec![0.0; candidates.len()];
    for g in &plan {
        let scores = group_scores(model, demos, g, test_input, candidates, l_max, format)?;
        for (t, s) in total.iter_mut().zip(scores) {
            *t += s;
        }
    }
    Ok(total.into_iter().map(|t| t / plan.len() as f64).collect())
}

pub fn ensemble_predict(
    model: &Model,
    demos: &[TaskExample],
    test_input: &[TokenId],
    candidates: &[Vec<TokenId>],
    groups: usize,
    l_max: usize,
    format: PromptFormat,
) -> Result<usize> {
    Ok(argmax(&ensemble_logprobs(model, demos, test_input, candidates, groups, l_max, format)?))
}

fn group_scores(
    model: &Model,
    demos: &[TaskExample],
    order: &[usize],
    test_input: &[TokenId],
    candidates: &[Vec<TokenId>],
    l_max: usize,
    format: PromptFormat,
) -> Result<Vec<f64>> {
    match format {
        PromptFormat::Direct => {
            let pack = build_prompt(demos, order, test_input, l_max, format)?;
            model.candidate_logprobs(&pack, candidates)
        }
        PromptFormat::Channel => candidates
            .iter()
            .map(|c| {
                let pack = build_prompt(demos, order, c, l_max, format)?;
                Ok(model.candidate_logprobs(&pack, &[test_input.to_vec()])?[0])
            })
            .collect(),
    }
}

/// Encoder states for one test segment under a single-prompt or FiD-style scheme.
fn encode_for_scheme(
    bound: &BoundModel<'_>,
    demos: &[TaskExample],
    test_segment: &[TokenId],
    opts: &FusionOptions,
) -> Result<EncoderOutput> {
    match opts.scheme {
        FusionScheme::Single => {
            let order: Vec<usize> = (0..demos.len()).collect();
            bound.encode_prompt(&build_prompt(demos, &order, test_segment, opts.l_max, opts.format)?)
        }
        FusionScheme::Fid => fid_encode(bound, demos, test_segment, opts.l_max, opts.format),
        FusionScheme::GroupFid => group_fid_encode(bound, demos, test_segment, opts.groups, opts.l_max, opts.format),
        FusionScheme::Ensemble => unreachable!("ensembles score groups separately"),
    }
}

/// Candidate log-probabilities under any fusion scheme. Demonstrations are
/// first admitted against the `k` budget, then distributed over groups.
pub fn score_candidates(
    model: &Model,
    demos: &[TaskExample],
    test_input: &[TokenId],
    candidates: &[Vec<TokenId>],
    opts: &FusionOptions,
) -> Result<Vec<f64>> {
    if candidates.is_empty() {
        return Err(Error::Config("no candidates to score".into()));
    }
    let test_segment_len = match opts.format {
        PromptFormat::Direct => test_input.len(),
        PromptFormat::Channel => candidates.iter().map(Vec::len).max().unwrap_or(0),
    }
    .min(opts.l_max);
    let budget = TOKENS_PER_DEMO * opts.k;
    if opts.k > 0 && test_segment_len > budget {
        return Err(Error::TestExceedsBudget { len: test_segment_len, budget });
    }
    let admitted: Vec<TaskExample> = select_demonstrations(demos, opts.k, opts.l_max, opts.format)
        .into_iter()
        .map(|i| demos[i].clone())
        .collect();
    FusionPlan::new(opts.scheme, admitted.len(), opts.groups)?;

    if opts.scheme == FusionScheme::Ensemble {
        return ensemble_logprobs(model, &admitted, test_input, candidates, opts.groups, opts.l_max, opts.format);
    }
    let tape = Tape::new();
    let bound = model.bind(&tape, false);
    match opts.format {
        PromptFormat::Direct => {
            let enc = encode_for_scheme(&bound, &admitted, test_input, opts)?;
            candidates.iter().map(|c| Ok(tape.value(bound.sequence_logprob(&enc, c)?).item())).collect()
        }
        PromptFormat::Channel => candidates
            .iter()
            .map(|c| {
                let enc = encode_for_scheme(&bound, &admitted, c, opts)?;
                Ok(tape.value(bound.sequence_logprob(&enc, test_input)?).item())
            })
            .collect(),
    }
}

pub fn predict_with(
    model: &Model,
    demos: &[TaskExample],
    test_input: &[TokenId],
    candidates: &[Vec<TokenId>],
    opts: &FusionOptions,
) -> Result<usize> {
    Ok(argmax(&score_candidates(model, demos, test_input, candidates, opts)?))
}

/// Gold-answer index predicted for an episode's test example.
pub fn predict_episode(model: &Model, episode: &Episode, opts: &FusionOptions) -> Result<usize> {
    let options = episode
        .test
        .options
        .as_ref()
        .ok_or_else(|| Error::Config("test example has no candidate answers".into()))?;
    predict_with(model, &episode.demos, &episode.test.input, options, opts)
}

/// Encoder prompt and gold continuation for the training objective.
pub fn training_pair(episode: &Episode, k: usize, l_max: usize, format: PromptFormat) -> Result<(PromptPack, Vec<TokenId>)> {
    let (segment, continuation) = format.split(&episode.test.input, &episode.test.output);
    let pack = pack_prompt(&episode.demos, segment, k, l_max, format)?;
    Ok((pack, continuation.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(input: Vec<TokenId>, output: Vec<TokenId>) -> TaskExample {
        TaskExample { task: "t".into(), input, output, options: None }
    }

    #[test]
    fn formats_order_segments() {
        let d = ex(vec![5, 6], vec![7]);
        assert_eq!(PromptFormat::Direct.demo_segment(&d, 10), vec![5, 6, 7]);
        assert_eq!(PromptFormat::Channel.demo_segment(&d, 10), vec![7, 5, 6]);
        assert_eq!(PromptFormat::Direct.demo_segment(&d, 2), vec![5, 6]);
    }

    #[test]
    fn budget_admits_ten_of_sixteen() {
        let demos: Vec<_> = (0..16).map(|_| ex(vec![3; 99], vec![4])).collect();
        let pack = pack_prompt(&demos, &[5], 16, 256, PromptFormat::Direct).unwrap();
        assert_eq!(pack.provenance().len(), 10);
        assert_eq!(pack.layout().segment_length(), 100);
    }

    #[test]
    fn short_demos_all_admitted() {
        let demos: Vec<_> = (0..4).map(|i| ex(vec![3 + i], vec![9])).collect();
        let pack = pack_prompt(&demos, &[5], 4, 256, PromptFormat::Direct).unwrap();
        assert_eq!(pack.provenance(), &[0, 1, 2, 3]);
        assert_eq!(pack.segment(2), &[5, 9]);
        assert_eq!(pack.segment(4), &[5]);
        assert_eq!(&pack.tokens()[8..], &[5, PAD]);
    }

    #[test]
    fn long_demo_truncated() {
        let demos = vec![ex(vec![3; 299], vec![4])];
        let pack = pack_prompt(&demos, &[5], 8, 256, PromptFormat::Direct).unwrap();
        assert_eq!(pack.segment(0).len(), 256);
    }

    #[test]
    fn test_over_budget_is_an_error() {
        let demos = vec![ex(vec![3], vec![4])];
        assert!(matches!(
            pack_prompt(&demos, &[5; 100], 1, 256, PromptFormat::Direct),
            Err(Error::TestExceedsBudget { len: 100, budget: 64 })
        ));
    }

    #[test]
    fn groups_split_evenly() {
        assert_eq!(split_groups(5, 2).unwrap(), vec![vec![0, 1, 2], vec![3, 4]]);
        assert_eq!(split_groups(3, 3).unwrap(), vec![vec![0], vec![1], vec![2]]);
        assert!(matches!(split_groups(2, 3), Err(Error::TooManyGroups { groups: 3, k: 2 })));
        assert!(FusionPlan::new(FusionScheme::Single, 4, 2).is_err());
        assert_eq!(FusionPlan::new(FusionScheme::Fid, 3, 1).unwrap().groups.len(), 3);
    }

    #[test]
    fn scheme_names_parse() {
        for s in [FusionScheme::Single, FusionScheme::Fid, FusionScheme::GroupFid, FusionScheme::Ensemble] {
            assert_eq!(s.to_string().parse::<FusionScheme>().unwrap(), s);
        }
        assert_eq!("channel".parse::<PromptFormat>().unwrap(), PromptFormat::Channel);
        assert!("bogus".parse::<FusionScheme>().is_err());
    }
}
