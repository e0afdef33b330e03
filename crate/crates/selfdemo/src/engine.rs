//! Candidate generation, tournament filtering, and self-demo assembly.
//!
//! For each instance the engine samples one response per answer prompt
//! (with-retrieval prompts see the rendered top-n context, no-retrieval
//! prompts see the bare instruction) plus exactly one refusal generated at
//! temperature 0 with the context rendered. Answer candidates compete in a
//! single-elimination judge tournament — pairwise matches only, since
//! judges are unreliable over many simultaneous candidates — and the
//! winner passes a final correctness gate against the gold response. If
//! the gate fails (or no answer candidate exists), the self-generated
//! refusal becomes the chosen response.
//!
//! Every choice (bracket seeding, presentation order) derives from the run
//! seed and the instance id, so a fixed seed reproduces demos byte for
//! byte under a scripted gateway.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Instance};
use crate::exporter::{render_user_prompt, RenderTemplate};
use crate::gateway::{
    complete_many, BatchRequest, ChatMessage, Gateway, GatewayError, GenerationParams,
};
use crate::judge::{self, parse_choice, parse_verdict2, Choice};
use crate::optimizer::{PromptMode, SystemPrompt};
use crate::prompts;
use crate::seeds;

/// One sampled model output with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateResponse {
    pub candidate_id: String,
    pub instance_id: String,
    pub text: String,
    pub prompt_id: String,
    pub mode: PromptMode,
    pub params: GenerationParams,
    pub sample_index: u32,
}

/// One pairwise match of a tournament.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub candidate_a: String,
    pub candidate_b: String,
    pub winner: String,
}

/// Bracket trace of one tournament. `judge_calls` counts pairwise matches
/// only: an entrant receiving a bye costs nothing.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TournamentLog {
    pub bracket: Vec<MatchRecord>,
    pub byes: Vec<String>,
    pub judge_calls: u32,
    /// Matches decided by the deterministic fallback after unparseable
    /// judge replies.
    #[serde(default)]
    pub warnings: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelfDemoKind {
    Answer,
    Refusal,
}

/// The per-instance outcome: a chosen response (verified answer or
/// self-generated refusal) plus every other candidate as rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfDemo {
    pub instance_id: String,
    pub chosen: CandidateResponse,
    pub kind: SelfDemoKind,
    pub verified_correct: bool,
    pub rejected: Vec<CandidateResponse>,
    pub tournament: TournamentLog,
}

/// `chosen` as stored in the self-demo file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChosenCandidate {
    pub text: String,
    pub prompt_id: String,
    pub mode: PromptMode,
}

/// A rejected candidate as stored in the self-demo file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedCandidate {
    pub candidate_id: String,
    pub text: String,
    pub prompt_id: String,
    pub mode: PromptMode,
}

/// One line of the self-demo output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfDemoRecord {
    pub instance_id: String,
    pub kind: SelfDemoKind,
    pub chosen: ChosenCandidate,
    pub verified_correct: bool,
    pub rejected: Vec<RejectedCandidate>,
    pub tournament: TournamentLog,
}

impl SelfDemo {
    pub fn to_record(&self) -> SelfDemoRecord {
        SelfDemoRecord {
            instance_id: self.instance_id.clone(),
            kind: self.kind,
            chosen: ChosenCandidate {
                text: self.chosen.text.clone(),
                prompt_id: self.chosen.prompt_id.clone(),
                mode: self.chosen.mode,
            },
            verified_correct: self.verified_correct,
            rejected: self
                .rejected
                .iter()
                .map(|c| RejectedCandidate {
                    candidate_id: c.candidate_id.clone(),
                    text: c.text.clone(),
                    prompt_id: c.prompt_id.clone(),
                    mode: c.mode,
                })
                .collect(),
            tournament: self.tournament.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EngineConfig {
    /// Retrievals rendered into with-retrieval and refusal user messages.
    #[serde(default = "default_n_retrievals")]
    pub n_retrievals: usize,
    /// Samples drawn per answer prompt.
    #[serde(default = "default_samples_per_prompt")]
    pub samples_per_prompt: u32,
    #[serde(default = "default_answer_params")]
    pub answer_params: GenerationParams,
    #[serde(default)]
    pub refusal_params: GenerationParams,
    #[serde(default)]
    pub judge_params: GenerationParams,
}

fn default_n_retrievals() -> usize {
    2
}

fn default_samples_per_prompt() -> u32 {
    1
}

fn default_answer_params() -> GenerationParams {
    GenerationParams::with_temperature(0.7)
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            n_retrievals: default_n_retrievals(),
            samples_per_prompt: default_samples_per_prompt(),
            answer_params: default_answer_params(),
            refusal_params: GenerationParams::default(),
            judge_params: GenerationParams::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("prompt set must contain at least one with-retrieval prompt, one no-retrieval prompt, and exactly one refusal prompt")]
    PromptSetIncomplete,
    #[error("prompt ids must be unique; {id:?} appears more than once")]
    DuplicatePromptId { id: String },
    #[error("tournament requires at least one answer candidate and no refusal candidates")]
    InvalidTournamentEntrants,
    #[error("no refusal candidate available for instance {instance_id} on the refusal path")]
    MissingRefusalCandidate { instance_id: String },
    #[error("no rejected candidates to sample for instance {instance_id}")]
    NoRejected { instance_id: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Candidates produced for one instance, with the count of generation
/// requests that failed (isolated per candidate).
#[derive(Debug, Clone)]
pub struct GeneratedCandidates {
    pub candidates: Vec<CandidateResponse>,
    pub failures: usize,
}

fn check_prompt_set(prompts: &[SystemPrompt]) -> Result<(), EngineError> {
    let mut seen = std::collections::HashSet::new();
    for prompt in prompts {
        if !seen.insert(prompt.id.as_str()) {
            return Err(EngineError::DuplicatePromptId { id: prompt.id.clone() });
        }
    }
    let with = prompts.iter().filter(|p| p.mode == PromptMode::WithRetrieval).count();
    let without = prompts.iter().filter(|p| p.mode == PromptMode::NoRetrieval).count();
    let refusal = prompts.iter().filter(|p| p.mode == PromptMode::Refusal).count();
    if with >= 1 && without >= 1 && refusal == 1 {
        Ok(())
    } else {
        Err(EngineError::PromptSetIncomplete)
    }
}

/// Sample one response per answer prompt (times `samples_per_prompt`) and
/// exactly one refusal. Per-candidate gateway errors are isolated and
/// counted; an instance only fails later if nothing at all was generated.
pub fn generate_candidates(
    instance: &Instance,
    prompts: &[SystemPrompt],
    config: &EngineConfig,
    gateway: &(impl Gateway + ?Sized),
    template: &RenderTemplate,
) -> Result<GeneratedCandidates, EngineError> {
    check_prompt_set(prompts)?;
    let rendered = render_user_prompt(instance, config.n_retrievals, template);

    struct Slot<'a> {
        prompt: &'a SystemPrompt,
        sample_index: u32,
        params: GenerationParams,
    }
    let mut slots = Vec::new();
    let mut batch = Vec::new();
    for prompt in prompts {
        let (samples, params) = match prompt.mode {
            PromptMode::Refusal => (1, config.refusal_params.clone()),
            _ => (config.samples_per_prompt, config.answer_params.clone()),
        };
        let user = match prompt.mode {
            // The refusal is generated with the context rendered.
            PromptMode::WithRetrieval | PromptMode::Refusal => rendered.clone(),
            PromptMode::NoRetrieval => instance.instruction.clone(),
        };
        for sample_index in 0..samples {
            slots.push(Slot { prompt, sample_index, params: params.clone() });
            batch.push(BatchRequest {
                messages: vec![
                    ChatMessage::system(prompt.text.clone()),
                    ChatMessage::user(user.clone()),
                ],
                params: params.clone(),
                sample_index,
            });
        }
    }

    let mut candidates = Vec::new();
    let mut failures = 0;
    for (slot, result) in slots.iter().zip(complete_many(gateway, &batch)) {
        match result {
            Ok(completion) => candidates.push(CandidateResponse {
                candidate_id: format!(
                    "{}:{}:{}",
                    instance.id, slot.prompt.id, slot.sample_index
                ),
                instance_id: instance.id.clone(),
                text: completion.text,
                prompt_id: slot.prompt.id.clone(),
                mode: slot.prompt.mode,
                params: slot.params.clone(),
                sample_index: slot.sample_index,
            }),
            Err(e) => {
                log::warn!("candidate generation failed for {}: {e}", instance.id);
                failures += 1;
            }
        }
    }
    Ok(GeneratedCandidates { candidates, failures })
}

/// Outcome of one pairwise judgment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairwiseOutcome {
    pub winner_is_a: bool,
    pub fell_back: bool,
}

/// One judge call comparing two candidates of the same instance, with the
/// presentation order randomized from the seed to counter position bias.
/// An unparseable verdict after retries falls back to the candidate with
/// the lexicographically smaller id, flagged.
pub fn judge_better(
    a: &CandidateResponse,
    b: &CandidateResponse,
    instance: &Instance,
    gateway: &(impl Gateway + ?Sized),
    seed: u64,
    params: &GenerationParams,
) -> Result<PairwiseOutcome, EngineError> {
    debug_assert_ne!(a.candidate_id, b.candidate_id);
    let channel = format!("presentation:{}:{}:{}", instance.id, a.candidate_id, b.candidate_id);
    let a_first = seeds::sub_seed(seed, &channel).is_multiple_of(2);
    let (first, second) = if a_first { (a, b) } else { (b, a) };

    let request = prompts::pairwise_request(
        &instance.instruction,
        &instance.gold_response,
        &first.text,
        &second.text,
    );
    let fallback = if a.candidate_id < b.candidate_id { Choice::First } else { Choice::Second };
    // The fallback is expressed in (a, b) terms; map parsed choices from
    // presentation order back before comparing.
    let reply = judge::ask(
        gateway,
        &request,
        params,
        0,
        parse_choice,
        &prompts::CHOICE_NUDGES,
        Choice::First, // placeholder, remapped below
    )?;
    let winner_is_a = if reply.fell_back {
        fallback == Choice::First
    } else {
        match reply.value {
            Choice::First => a_first,
            Choice::Second => !a_first,
        }
    };
    Ok(PairwiseOutcome { winner_is_a, fell_back: reply.fell_back })
}

/// Single-elimination tournament over answer candidates. Seeding comes
/// from a seed-derived shuffle; an odd entrant count gives the last seed a
/// bye. Exactly `entrants - 1` judge calls are made.
pub fn run_tournament<'a>(
    candidates: &'a [CandidateResponse],
    instance: &Instance,
    gateway: &(impl Gateway + ?Sized),
    seed: u64,
    params: &GenerationParams,
) -> Result<(&'a CandidateResponse, TournamentLog), EngineError> {
    if candidates.is_empty() || candidates.iter().any(|c| c.mode == PromptMode::Refusal) {
        return Err(EngineError::InvalidTournamentEntrants);
    }
    let mut log = TournamentLog::default();

    let mut order: Vec<usize> = (0..candidates.len()).collect();
    let mut rng = seeds::channel_rng(seed, &format!("bracket:{}", instance.id));
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }

    let mut current = order;
    while current.len() > 1 {
        let mut next = Vec::with_capacity(current.len() / 2 + 1);
        let mut i = 0;
        while i + 1 < current.len() {
            let (ia, ib) = (current[i], current[i + 1]);
            let outcome = judge_better(&candidates[ia], &candidates[ib], instance, gateway, seed, params)?;
            let winner = if outcome.winner_is_a { ia } else { ib };
            log.bracket.push(MatchRecord {
                candidate_a: candidates[ia].candidate_id.clone(),
                candidate_b: candidates[ib].candidate_id.clone(),
                winner: candidates[winner].candidate_id.clone(),
            });
            log.judge_calls += 1;
            log.warnings += outcome.fell_back as u32;
            next.push(winner);
            i += 2;
        }
        if i < current.len() {
            log.byes.push(candidates[current[i]].candidate_id.clone());
            next.push(current[i]);
        }
        current = next;
    }
    debug_assert_eq!(log.judge_calls as usize, candidates.len() - 1);
    Ok((&candidates[current[0]], log))
}

/// Final correctness gate: one judge call with a CORRECT / INCORRECT
/// vocabulary. Unparseable after retries is pessimistically `false`.
pub fn verify_correct(
    winner: &CandidateResponse,
    instance: &Instance,
    gateway: &(impl Gateway + ?Sized),
    params: &GenerationParams,
) -> Result<judge::JudgeReply<bool>, EngineError> {
    debug_assert_ne!(winner.mode, PromptMode::Refusal);
    let request = prompts::verify_request(&instance.instruction, &instance.gold_response, &winner.text);
    Ok(judge::ask(gateway, &request, params, 0, parse_verdict2, &prompts::VERDICT_NUDGES, false)?)
}

/// Assemble the self-demo for one instance from its generated candidates:
/// tournament, verification gate, refusal fallback, and the
/// chosen/rejected partition.
pub fn build_selfdemo(
    instance: &Instance,
    candidates: Vec<CandidateResponse>,
    gateway: &(impl Gateway + ?Sized),
    seed: u64,
    judge_params: &GenerationParams,
) -> Result<SelfDemo, EngineError> {
    let answer_indices: Vec<usize> = (0..candidates.len())
        .filter(|&i| candidates[i].mode != PromptMode::Refusal)
        .collect();
    let refusal_index = candidates.iter().position(|c| c.mode == PromptMode::Refusal);

    let mut tournament = TournamentLog::default();
    let mut verified = false;
    let mut winner_index = None;
    if !answer_indices.is_empty() {
        let answers: Vec<CandidateResponse> =
            answer_indices.iter().map(|&i| candidates[i].clone()).collect();
        let (winner, log) = run_tournament(&answers, instance, gateway, seed, judge_params)?;
        let reply = verify_correct(winner, instance, gateway, judge_params)?;
        tournament = log;
        tournament.warnings += reply.fell_back as u32;
        verified = reply.value;
        if verified {
            winner_index = candidates.iter().position(|c| c.candidate_id == winner.candidate_id);
        }
    }

    let chosen_index = match winner_index {
        Some(i) => i,
        None => refusal_index.ok_or_else(|| EngineError::MissingRefusalCandidate {
            instance_id: instance.id.clone(),
        })?,
    };
    let kind = if verified { SelfDemoKind::Answer } else { SelfDemoKind::Refusal };

    let mut rejected = candidates;
    let chosen = rejected.remove(chosen_index);
    Ok(SelfDemo {
        instance_id: instance.id.clone(),
        chosen,
        kind,
        verified_correct: verified,
        rejected,
        tournament,
    })
}

/// Uniform deterministic draw from a demo's rejected candidates, seeded by
/// the run seed and the instance id.
pub fn sample_rejected(demo: &SelfDemoRecord, run_seed: u64) -> Result<&RejectedCandidate, EngineError> {
    if demo.rejected.is_empty() {
        return Err(EngineError::NoRejected { instance_id: demo.instance_id.clone() });
    }
    let mut rng = seeds::channel_rng(run_seed, &format!("rejected:{}", demo.instance_id));
    Ok(&demo.rejected[rng.gen_range(0..demo.rejected.len())])
}

/// Per-instance outcomes of a full engine run over a corpus.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub total: usize,
    pub answer: usize,
    pub refusal: usize,
    pub skipped: usize,
    pub failed: usize,
    /// Parse fallbacks and isolated generation failures; never fatal.
    pub warnings: usize,
}

pub struct EngineRun {
    pub demos: Vec<SelfDemo>,
    pub manifest: RunManifest,
}

/// Run the engine over every instance (in parallel; results merged in
/// instance-id order) and tally the manifest.
pub fn run_engine(
    corpus: &Corpus,
    prompts: &[SystemPrompt],
    config: &EngineConfig,
    generator: &(impl Gateway + ?Sized),
    judge: &(impl Gateway + ?Sized),
    template: &RenderTemplate,
    seed: u64,
) -> Result<EngineRun, EngineError> {
    check_prompt_set(prompts)?;

    enum Outcome {
        Demo(Box<SelfDemo>, usize),
        Skipped,
        Failed,
    }

    let mut results: Vec<(String, Outcome)> = corpus
        .instances
        .par_iter()
        .map(|instance| {
            let outcome = (|| -> Result<Outcome, EngineError> {
                let generated = generate_candidates(instance, prompts, config, generator, template)?;
                if generated.candidates.is_empty() {
                    return Ok(Outcome::Skipped);
                }
                let demo = build_selfdemo(instance, generated.candidates, judge, seed, &config.judge_params)?;
                Ok(Outcome::Demo(Box::new(demo), generated.failures))
            })();
            let outcome = match outcome {
                Ok(o) => o,
                Err(e) => {
                    log::error!("instance {} failed: {e}", instance.id);
                    Outcome::Failed
                }
            };
            (instance.id.clone(), outcome)
        })
        .collect();
    results.sort_by(|a, b| a.0.cmp(&b.0));

    let mut manifest = RunManifest { total: corpus.len(), ..RunManifest::default() };
    let mut demos = Vec::new();
    for (_, outcome) in results {
        match outcome {
            Outcome::Demo(demo, generation_failures) => {
                match demo.kind {
                    SelfDemoKind::Answer => manifest.answer += 1,
                    SelfDemoKind::Refusal => manifest.refusal += 1,
                }
                manifest.warnings += demo.tournament.warnings as usize + generation_failures;
                demos.push(*demo);
            }
            Outcome::Skipped => manifest.skipped += 1,
            Outcome::Failed => manifest.failed += 1,
        }
    }
    Ok(EngineRun { demos, manifest })
}
