//! Automatic system-message optimization by iterative beam search.
//!
//! Starting from a human-written seed message, each round (1) generates a
//! response per train instance under every beam prompt, (2) has the model
//! score its own outputs 1-5 against the gold responses, (3) has it
//! critique the outputs and propose new system messages, then (4) merges
//! proposals into the beam and prunes to the top `beam_width` by mean
//! score. After the last round the surviving prompts are re-scored on a
//! held-out validation slice and the top `final_top_m` are returned.
//!
//! The refusal system message is fixed and never optimized.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusError, Instance};
use crate::exporter::{render_user_prompt, RenderTemplate};
use crate::gateway::{
    complete_many, BatchRequest, ChatMessage, Gateway, GatewayError, GenerationParams,
};
use crate::judge::parse_score;
use crate::prompts;
use crate::seeds;

/// Which rendering a system message expects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    WithRetrieval,
    NoRetrieval,
    Refusal,
}

/// An optimizable system message. `lineage` points at the prompt whose
/// critique produced this one; seed and refusal prompts have none.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemPrompt {
    pub id: String,
    pub text: String,
    pub mode: PromptMode,
    #[serde(default)]
    pub lineage: Option<String>,
}

/// A prompt with the 1-5 scores it received on a slice of instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrompt {
    pub prompt: SystemPrompt,
    pub mean_score: f64,
    pub per_instance_scores: Vec<u8>,
    /// Instances whose judge reply stayed unparseable and fell back to the
    /// pessimistic score 1.
    #[serde(default)]
    pub warnings: u32,
}

impl ScoredPrompt {
    pub fn new(prompt: SystemPrompt, per_instance_scores: Vec<u8>, warnings: u32) -> Self {
        let mean_score = if per_instance_scores.is_empty() {
            0.0
        } else {
            per_instance_scores.iter().map(|&s| s as f64).sum::<f64>()
                / per_instance_scores.len() as f64
        };
        Self { prompt, mean_score, per_instance_scores, warnings }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(default = "defaults::beam_width")]
    pub beam_width: usize,
    #[serde(default = "defaults::proposals_per_prompt")]
    pub proposals_per_prompt: usize,
    #[serde(default = "defaults::rounds")]
    pub rounds: usize,
    #[serde(default = "defaults::train_slice_size")]
    pub train_slice_size: usize,
    #[serde(default = "defaults::validation_slice_size")]
    pub validation_slice_size: usize,
    #[serde(default = "defaults::final_top_m")]
    pub final_top_m: usize,
    /// Retrievals rendered into user messages for with-retrieval prompts.
    #[serde(default = "defaults::n_retrievals")]
    pub n_retrievals: usize,
    /// Temperature-0 params for generation and judging during scoring.
    #[serde(default)]
    pub scoring_params: GenerationParams,
    /// Temperature > 0 params for sampling prompt proposals.
    #[serde(default = "defaults::proposal_params")]
    pub proposal_params: GenerationParams,
}

mod defaults {
    use crate::gateway::GenerationParams;

    pub fn beam_width() -> usize {
        4
    }
    pub fn proposals_per_prompt() -> usize {
        4
    }
    pub fn rounds() -> usize {
        3
    }
    pub fn train_slice_size() -> usize {
        32
    }
    pub fn validation_slice_size() -> usize {
        128
    }
    pub fn final_top_m() -> usize {
        3
    }
    pub fn n_retrievals() -> usize {
        2
    }
    pub fn proposal_params() -> GenerationParams {
        GenerationParams::with_temperature(1.0)
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            beam_width: defaults::beam_width(),
            proposals_per_prompt: defaults::proposals_per_prompt(),
            rounds: defaults::rounds(),
            train_slice_size: defaults::train_slice_size(),
            validation_slice_size: defaults::validation_slice_size(),
            final_top_m: defaults::final_top_m(),
            n_retrievals: defaults::n_retrievals(),
            scoring_params: GenerationParams::default(),
            proposal_params: defaults::proposal_params(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), OptimizerError> {
        let invalid = |m: &str| Err(OptimizerError::InvalidConfig(m.to_string()));
        if self.beam_width == 0 || self.proposals_per_prompt == 0 || self.final_top_m == 0 {
            return invalid("beam_width, proposals_per_prompt and final_top_m must be positive");
        }
        let pool_bound = self.beam_width * self.proposals_per_prompt + self.beam_width;
        if self.final_top_m > pool_bound {
            return invalid("final_top_m exceeds beam_width * proposals_per_prompt + beam_width");
        }
        if self.rounds > 0 && self.train_slice_size == 0 {
            return invalid("train_slice_size must be positive when rounds > 0");
        }
        if self.validation_slice_size == 0 {
            return invalid("validation_slice_size must be positive");
        }
        if self.scoring_params.temperature != 0.0 {
            return invalid("scoring_params.temperature must be 0");
        }
        if self.proposal_params.temperature <= 0.0 {
            return invalid("proposal_params.temperature must be > 0");
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum OptimizerError {
    #[error("invalid optimizer config: {0}")]
    InvalidConfig(String),
    #[error("cannot score a prompt on an empty instance slice")]
    EmptySlice,
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("checkpoint at {path}: {message}")]
    Checkpoint { path: String, message: String },
}

/// One scored train example, used to build critique transcripts.
#[derive(Debug, Clone)]
pub struct TranscriptEntry {
    pub instruction: String,
    pub gold: String,
    pub output: String,
    pub score: u8,
}

/// Transcript entries rendered into a critique request.
const TRANSCRIPT_LIMIT: usize = 8;
/// Extra proposal samples allowed per slot when a sample is empty or a
/// duplicate.
const PROPOSAL_RETRY_BUDGET: usize = 2;

fn user_prompt_for(prompt: &SystemPrompt, instance: &Instance, n_retrievals: usize, template: &RenderTemplate) -> String {
    match prompt.mode {
        PromptMode::NoRetrieval => instance.instruction.clone(),
        PromptMode::WithRetrieval | PromptMode::Refusal => {
            render_user_prompt(instance, n_retrievals, template)
        }
    }
}

fn score_prompt_detailed(
    prompt: &SystemPrompt,
    instances: &[Instance],
    gateway: &(impl Gateway + ?Sized),
    config: &OptimizerConfig,
    template: &RenderTemplate,
) -> Result<(ScoredPrompt, Vec<TranscriptEntry>), OptimizerError> {
    if instances.is_empty() {
        return Err(OptimizerError::EmptySlice);
    }

    let generation_batch: Vec<BatchRequest> = instances
        .iter()
        .map(|inst| BatchRequest {
            messages: vec![
                ChatMessage::system(prompt.text.clone()),
                ChatMessage::user(user_prompt_for(prompt, inst, config.n_retrievals, template)),
            ],
            params: config.scoring_params.clone(),
            sample_index: 0,
        })
        .collect();
    let mut outputs = Vec::with_capacity(instances.len());
    for result in complete_many(gateway, &generation_batch) {
        outputs.push(result?.text);
    }

    let judge_batch: Vec<BatchRequest> = instances
        .iter()
        .zip(&outputs)
        .map(|(inst, output)| BatchRequest {
            messages: prompts::score_request(&inst.instruction, &inst.gold_response, output),
            params: config.scoring_params.clone(),
            sample_index: 0,
        })
        .collect();
    let first_replies = complete_many(gateway, &judge_batch);

    let mut scores = Vec::with_capacity(instances.len());
    let mut warnings = 0;
    for ((request, reply), _) in judge_batch.iter().zip(first_replies).zip(instances) {
        let score = match parse_score(&reply?.text) {
            Some(s) => s,
            None => {
                // Retry with nudges; the attempt-0 reply was consumed above.
                let retried = retry_with_nudges(
                    gateway,
                    &request.messages,
                    &config.scoring_params,
                    parse_score,
                    &prompts::SCORE_NUDGES,
                )?;
                match retried {
                    Some(s) => s,
                    None => {
                        warnings += 1;
                        1
                    }
                }
            }
        };
        scores.push(score);
    }

    let transcript = instances
        .iter()
        .zip(&outputs)
        .zip(&scores)
        .map(|((inst, output), &score)| TranscriptEntry {
            instruction: inst.instruction.clone(),
            gold: inst.gold_response.clone(),
            output: output.clone(),
            score,
        })
        .collect();
    Ok((ScoredPrompt::new(prompt.clone(), scores, warnings), transcript))
}

fn retry_with_nudges<T>(
    gateway: &(impl Gateway + ?Sized),
    messages: &[ChatMessage],
    params: &GenerationParams,
    parse: impl Fn(&str) -> Option<T>,
    nudges: &[&str],
) -> Result<Option<T>, GatewayError> {
    for nudge in nudges {
        let mut nudged = messages.to_vec();
        if let Some(last_user) = nudged.iter_mut().rev().find(|m| m.role == crate::gateway::Role::User) {
            last_user.content.push_str("\n\n");
            last_user.content.push_str(nudge);
        }
        let reply = gateway.complete(&nudged, params, 0)?;
        if let Some(value) = parse(&reply.text) {
            return Ok(Some(value));
        }
    }
    Ok(None)
}

/// Generate one response per instance under `prompt`, judge each 1-5
/// against the gold response, and return the mean.
pub fn score_prompt(
    prompt: &SystemPrompt,
    instances: &[Instance],
    gateway: &(impl Gateway + ?Sized),
    config: &OptimizerConfig,
    template: &RenderTemplate,
) -> Result<ScoredPrompt, OptimizerError> {
    score_prompt_detailed(prompt, instances, gateway, config, template).map(|(s, _)| s)
}

fn render_transcript(entries: &[TranscriptEntry]) -> String {
    entries
        .iter()
        .take(TRANSCRIPT_LIMIT)
        .map(|e| {
            format!(
                "Instruction: {}\nReference answer: {}\nResponse: {}\nScore: {}",
                e.instruction, e.gold, e.output, e.score
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Allocates creation-ordered prompt ids, prefixed so that ids from
/// different optimization runs never collide in one prompt set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptIdAlloc {
    #[serde(default)]
    prefix: String,
    next_id: u64,
    next_sample: u32,
}

impl PromptIdAlloc {
    pub fn new() -> Self {
        Self::with_prefix("")
    }

    pub fn with_prefix(prefix: impl Into<String>) -> Self {
        Self { prefix: prefix.into(), next_id: 1, next_sample: 0 }
    }

    fn next_prompt_id(&mut self) -> String {
        let id = format!("{}p{:04}", self.prefix, self.next_id);
        self.next_id += 1;
        id
    }

    fn next_sample_index(&mut self) -> u32 {
        let s = self.next_sample;
        self.next_sample += 1;
        s
    }
}

impl Default for PromptIdAlloc {
    fn default() -> Self {
        Self::new()
    }
}

fn mode_prefix(mode: PromptMode) -> &'static str {
    match mode {
        PromptMode::WithRetrieval => "wr-",
        PromptMode::NoRetrieval => "nr-",
        PromptMode::Refusal => "rf-",
    }
}

/// Sample up to `k` new system messages from a critique of `scored`'s
/// outputs. Empty proposals and exact duplicates of `existing_texts` (or
/// of each other) are dropped and resampled within a bounded budget, so
/// the result can be shorter than `k`; each failed slot is counted in the
/// returned warning count.
pub fn critique_and_propose(
    scored: &ScoredPrompt,
    transcript: &[TranscriptEntry],
    gateway: &(impl Gateway + ?Sized),
    k: usize,
    config: &OptimizerConfig,
    existing_texts: &BTreeSet<String>,
    alloc: &mut PromptIdAlloc,
) -> Result<(Vec<SystemPrompt>, u32), OptimizerError> {
    let request = prompts::critique_request(&scored.prompt.text, &render_transcript(transcript));
    let mut accepted: Vec<SystemPrompt> = Vec::new();
    let mut accepted_texts: BTreeSet<String> = BTreeSet::new();
    let mut warnings = 0;

    for _slot in 0..k {
        let mut produced = None;
        for _attempt in 0..=PROPOSAL_RETRY_BUDGET {
            let sample_index = alloc.next_sample_index();
            let reply = gateway.complete(&request, &config.proposal_params, sample_index)?;
            let Some(text) = prompts::parse_proposal(&reply.text) else {
                continue;
            };
            let duplicate = text == scored.prompt.text
                || existing_texts.contains(&text)
                || accepted_texts.contains(&text);
            if !duplicate {
                produced = Some(text);
                break;
            }
        }
        match produced {
            Some(text) => {
                accepted_texts.insert(text.clone());
                accepted.push(SystemPrompt {
                    id: alloc.next_prompt_id(),
                    text,
                    mode: scored.prompt.mode,
                    lineage: Some(scored.prompt.id.clone()),
                });
            }
            None => warnings += 1,
        }
    }
    Ok((accepted, warnings))
}

/// The fixed refusal-mode system prompt bundled with the repository.
pub fn refusal_prompt() -> SystemPrompt {
    prompts::refusal_prompt()
}

/// Beam state recorded for one completed round.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub beam: Vec<ScoredPrompt>,
}

/// Result of an optimization run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizeOutcome {
    /// Top prompts by validation mean score, ties broken by earlier
    /// creation, best first.
    pub selected: Vec<ScoredPrompt>,
    pub rounds: Vec<RoundReport>,
    pub warnings: u32,
}

/// Resumable optimizer state, written after every completed round.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Checkpoint {
    mode: PromptMode,
    seed_prompt_id: String,
    rounds_completed: usize,
    beam: Vec<SystemPrompt>,
    creation_order: BTreeMap<String, u64>,
    alloc: PromptIdAlloc,
    rounds: Vec<RoundReport>,
    warnings: u32,
}

fn read_checkpoint(path: &Path) -> Result<Option<Checkpoint>, OptimizerError> {
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path).map_err(|e| OptimizerError::Checkpoint {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| OptimizerError::Checkpoint {
            path: path.display().to_string(),
            message: format!("malformed checkpoint: {e}"),
        })
}

fn write_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<(), OptimizerError> {
    let err = |message: String| OptimizerError::Checkpoint {
        path: path.display().to_string(),
        message,
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| err(e.to_string()))?;
    }
    let tmp = tempfile::NamedTempFile::new_in(path.parent().unwrap_or(Path::new(".")))
        .map_err(|e| err(e.to_string()))?;
    serde_json::to_writer_pretty(&tmp, checkpoint).map_err(|e| err(e.to_string()))?;
    tmp.persist(path).map_err(|e| err(e.to_string()))?;
    Ok(())
}

/// Run the full beam search for one prompt mode and return the top
/// `final_top_m` prompts by validation score.
///
/// When `checkpoint_path` is given, state is persisted after every round
/// and a matching checkpoint found at startup resumes the run at round
/// granularity (prompt scoring itself is replayed through the gateway,
/// which is cheap under a call cache and exact under a scripted gateway).
pub fn optimize(
    seed_prompt: &SystemPrompt,
    corpus: &Corpus,
    config: &OptimizerConfig,
    gateway: &(impl Gateway + ?Sized),
    template: &RenderTemplate,
    run_seed: u64,
    checkpoint_path: Option<&Path>,
) -> Result<OptimizeOutcome, OptimizerError> {
    config.validate()?;
    if seed_prompt.mode == PromptMode::Refusal {
        return Err(OptimizerError::InvalidConfig(
            "the refusal prompt is fixed and cannot be optimized".into(),
        ));
    }

    let (train, validation) = crate::corpus::split_for_optimizer(
        corpus,
        config.train_slice_size,
        config.validation_slice_size,
        seeds::sub_seed(run_seed, "optimizer-split"),
    )?;

    let mut state = match checkpoint_path.map(read_checkpoint).transpose()?.flatten() {
        Some(cp) if cp.mode == seed_prompt.mode && cp.seed_prompt_id == seed_prompt.id => {
            log::info!(
                "resuming {:?} optimization from round {}",
                cp.mode,
                cp.rounds_completed
            );
            cp
        }
        _ => Checkpoint {
            mode: seed_prompt.mode,
            seed_prompt_id: seed_prompt.id.clone(),
            rounds_completed: 0,
            beam: vec![seed_prompt.clone()],
            creation_order: BTreeMap::from([(seed_prompt.id.clone(), 0)]),
            alloc: PromptIdAlloc::with_prefix(mode_prefix(seed_prompt.mode)),
            rounds: Vec::new(),
            warnings: 0,
        },
    };

    for round in (state.rounds_completed + 1)..=config.rounds {
        // Score the whole beam on the train slice; keep transcripts for
        // the critique step.
        let mut scored_beam: Vec<(ScoredPrompt, Vec<TranscriptEntry>)> = Vec::new();
        for prompt in &state.beam {
            let (scored, transcript) =
                score_prompt_detailed(prompt, &train, gateway, config, template)?;
            state.warnings += scored.warnings;
            scored_beam.push((scored, transcript));
        }

        let beam_texts: BTreeSet<String> =
            state.beam.iter().map(|p| p.text.clone()).collect();
        let mut pool: Vec<ScoredPrompt> = Vec::new();
        let mut proposals: Vec<SystemPrompt> = Vec::new();
        for (scored, transcript) in &scored_beam {
            let mut existing = beam_texts.clone();
            existing.extend(proposals.iter().map(|p| p.text.clone()));
            let (new_prompts, warnings) = critique_and_propose(
                scored,
                transcript,
                gateway,
                config.proposals_per_prompt,
                config,
                &existing,
                &mut state.alloc,
            )?;
            state.warnings += warnings;
            for p in new_prompts {
                let ord = state.creation_order.len() as u64;
                state.creation_order.insert(p.id.clone(), ord);
                proposals.push(p);
            }
            pool.push(scored.clone());
        }
        for proposal in &proposals {
            let (scored, _) = score_prompt_detailed(proposal, &train, gateway, config, template)?;
            state.warnings += scored.warnings;
            pool.push(scored);
        }

        sort_by_score_then_creation(&mut pool, &state.creation_order);
        pool.truncate(config.beam_width);
        state.beam = pool.iter().map(|s| s.prompt.clone()).collect();
        state.rounds.push(RoundReport { round, beam: pool });
        state.rounds_completed = round;
        if let Some(path) = checkpoint_path {
            write_checkpoint(path, &state)?;
        }
    }

    // Final selection on the validation slice.
    let mut validated: Vec<ScoredPrompt> = Vec::new();
    for prompt in &state.beam {
        let (scored, _) = score_prompt_detailed(prompt, &validation, gateway, config, template)?;
        state.warnings += scored.warnings;
        validated.push(scored);
    }
    sort_by_score_then_creation(&mut validated, &state.creation_order);
    validated.truncate(config.final_top_m);

    Ok(OptimizeOutcome {
        selected: validated,
        rounds: state.rounds,
        warnings: state.warnings,
    })
}

fn sort_by_score_then_creation(pool: &mut [ScoredPrompt], creation_order: &BTreeMap<String, u64>) {
    pool.sort_by(|a, b| {
        b.mean_score
            .total_cmp(&a.mean_score)
            .then_with(|| {
                let oa = creation_order.get(&a.prompt.id).copied().unwrap_or(u64::MAX);
                let ob = creation_order.get(&b.prompt.id).copied().unwrap_or(u64::MAX);
                oa.cmp(&ob)
            })
    });
}
