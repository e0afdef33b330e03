//! Judge-based labeling and abstention-aware metrics.
//!
//! Every output is labeled `correct`, `refused`, or `incorrect`; every
//! provided retrieval is labeled relevant or not (does it contain the
//! answer?). From the counts:
//!
//! - precision = correct / attempted, where attempted = correct + incorrect;
//! - recall    = correct / (correct + false refusals), a false refusal
//!   being a refused question whose retrievals contained the answer;
//! - f1        = harmonic mean of the two;
//! - refusal rate = refused / total; false refusal rate = false refusals /
//!   refused; counterfactual accuracy = how often the reference model
//!   answers the refused questions correctly (lower is better).
//!
//! All metrics are exact rationals; rounding happens only when rendering
//! (one decimal in percent, half-up). Undefined ratios (zero denominators)
//! are reported as absent, never as zero.

use std::collections::BTreeMap;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::corpus::{select_top_retrievals, Corpus, Instance, Retrieval};
use crate::exporter::{render_user_prompt, RenderTemplate};
use crate::gateway::{
    complete_many, BatchRequest, ChatMessage, Gateway, GatewayError, GenerationParams,
};
use crate::judge::{self, parse_relevance, parse_verdict3, Verdict3};
use crate::prompts;

/// Judge label for one model output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Correct,
    Refused,
    Incorrect,
}

impl From<Verdict3> for Label {
    fn from(v: Verdict3) -> Self {
        match v {
            Verdict3::Correct => Label::Correct,
            Verdict3::Refused => Label::Refused,
            Verdict3::Incorrect => Label::Incorrect,
        }
    }
}

/// One judged output with the relevance vector of the retrievals that were
/// provided at inference time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub instance_id: String,
    pub dataset_tag: String,
    pub output_text: String,
    pub label: Label,
    pub retrieval_relevance: Vec<bool>,
    pub answerable: bool,
}

impl EvalRecord {
    pub fn new(
        instance_id: String,
        dataset_tag: String,
        output_text: String,
        label: Label,
        retrieval_relevance: Vec<bool>,
    ) -> Self {
        let answerable = retrieval_relevance.iter().any(|&r| r);
        Self { instance_id, dataset_tag, output_text, label, retrieval_relevance, answerable }
    }
}

/// An exact rational metric value, serialized with both the reduced
/// fraction and its rendered percent string.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Rate(pub Ratio<i64>);

impl Rate {
    pub fn new(numerator: i64, denominator: i64) -> Self {
        Rate(Ratio::new(numerator, denominator))
    }

    /// Percent with one decimal, rounded half away from zero.
    pub fn percent_1dp(&self) -> String {
        let numerator = *self.0.numer();
        let denominator = *self.0.denom();
        debug_assert!(denominator > 0);
        let magnitude = numerator.unsigned_abs() as u128;
        let den = denominator as u128;
        // tenths of a percent: round(1000 * |n| / d), half-up.
        let tenths = (2000 * magnitude + den) / (2 * den);
        let sign = if numerator < 0 && tenths > 0 { "-" } else { "" };
        format!("{sign}{}.{}", tenths / 10, tenths % 10)
    }
}

impl Serialize for Rate {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut s = serializer.serialize_struct("Rate", 3)?;
        s.serialize_field("num", self.0.numer())?;
        s.serialize_field("den", self.0.denom())?;
        s.serialize_field("percent", &self.percent_1dp())?;
        s.end()
    }
}

impl<'de> Deserialize<'de> for Rate {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            num: i64,
            den: i64,
        }
        let raw = Raw::deserialize(deserializer)?;
        if raw.den <= 0 {
            return Err(serde::de::Error::custom("rate denominator must be positive"));
        }
        Ok(Rate(Ratio::new(raw.num, raw.den)))
    }
}

/// Count-based metrics for one dataset. Absent ratios mean the denominator
/// was zero.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMetrics {
    pub n_total: u64,
    pub n_correct: u64,
    pub n_incorrect: u64,
    pub n_refused: u64,
    pub n_attempted: u64,
    pub n_false_refusals: u64,
    pub precision: Option<Rate>,
    pub recall: Option<Rate>,
    pub f1: Option<Rate>,
    pub refusal_rate: Option<Rate>,
    pub false_refusal_rate: Option<Rate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counterfactual_accuracy: Option<Rate>,
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("cannot compute metrics over an empty record set")]
    EmptyRecords,
    #[error("missing candidate outputs for instances: {}", ids.join(", "))]
    MissingOutput { ids: Vec<String> },
    #[error("missing reference outputs for refused instances: {}", ids.join(", "))]
    Coverage { ids: Vec<String> },
    #[error("reports cover different datasets: {details}")]
    DatasetMismatch { details: String },
    #[error("output references unknown instance id {instance_id:?}")]
    UnknownInstance { instance_id: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Harmonic mean of precision and recall; absent when `p + r = 0`.
pub fn f1(precision: Ratio<i64>, recall: Ratio<i64>) -> Option<Ratio<i64>> {
    let sum = precision + recall;
    if sum == Ratio::from_integer(0) {
        None
    } else {
        Some(Ratio::from_integer(2) * precision * recall / sum)
    }
}

fn ratio(numerator: u64, denominator: u64) -> Option<Rate> {
    if denominator == 0 {
        None
    } else {
        Some(Rate::new(numerator as i64, denominator as i64))
    }
}

/// Exact metrics from judged records.
pub fn compute_metrics(records: &[EvalRecord]) -> Result<DatasetMetrics, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyRecords);
    }
    let mut n_correct = 0u64;
    let mut n_incorrect = 0u64;
    let mut n_refused = 0u64;
    let mut n_false_refusals = 0u64;
    for record in records {
        match record.label {
            Label::Correct => n_correct += 1,
            Label::Incorrect => n_incorrect += 1,
            Label::Refused => {
                n_refused += 1;
                if record.answerable {
                    n_false_refusals += 1;
                }
            }
        }
    }
    let n_total = records.len() as u64;
    let n_attempted = n_correct + n_incorrect;
    let precision = ratio(n_correct, n_attempted);
    let recall = ratio(n_correct, n_correct + n_false_refusals);
    let f1_value = match (precision, recall) {
        (Some(p), Some(r)) => f1(p.0, r.0).map(Rate),
        _ => None,
    };
    Ok(DatasetMetrics {
        n_total,
        n_correct,
        n_incorrect,
        n_refused,
        n_attempted,
        n_false_refusals,
        precision,
        recall,
        f1: f1_value,
        refusal_rate: ratio(n_refused, n_total),
        false_refusal_rate: ratio(n_false_refusals, n_refused),
        counterfactual_accuracy: None,
    })
}

/// Unweighted per-metric means over the datasets where each metric is
/// defined.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacroMetrics {
    pub precision: Option<Rate>,
    pub recall: Option<Rate>,
    pub f1: Option<Rate>,
    pub refusal_rate: Option<Rate>,
    pub false_refusal_rate: Option<Rate>,
    pub counterfactual_accuracy: Option<Rate>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub candidate_model: String,
    pub judge_model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_model: Option<String>,
    pub n_retrievals: usize,
    pub seed: u64,
}

/// Per-dataset metrics with their macro average.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub datasets: BTreeMap<String, DatasetMetrics>,
    pub macro_average: MacroMetrics,
    pub metadata: ReportMetadata,
}

/// Mean of the defined values, or absent when none are.
pub fn macro_mean<'a>(values: impl Iterator<Item = &'a Option<Rate>>) -> Option<Rate> {
    let defined: Vec<Ratio<i64>> = values.flatten().map(|r| r.0).collect();
    if defined.is_empty() {
        return None;
    }
    let sum: Ratio<i64> = defined.iter().sum();
    Some(Rate(sum / Ratio::from_integer(defined.len() as i64)))
}

/// Assemble a report from per-dataset metrics.
pub fn macro_aggregate(
    datasets: BTreeMap<String, DatasetMetrics>,
    metadata: ReportMetadata,
) -> Report {
    let metrics: Vec<&DatasetMetrics> = datasets.values().collect();
    let macro_average = MacroMetrics {
        precision: macro_mean(metrics.iter().map(|m| &m.precision)),
        recall: macro_mean(metrics.iter().map(|m| &m.recall)),
        f1: macro_mean(metrics.iter().map(|m| &m.f1)),
        refusal_rate: macro_mean(metrics.iter().map(|m| &m.refusal_rate)),
        false_refusal_rate: macro_mean(metrics.iter().map(|m| &m.false_refusal_rate)),
        counterfactual_accuracy: macro_mean(metrics.iter().map(|m| &m.counterfactual_accuracy)),
    };
    Report { datasets, macro_average, metadata }
}

/// Label one output correct / refused / incorrect. Declining, deflecting,
/// or ignoring the question counts as refused (the judge template spells
/// this out). Unparseable after retries is pessimistically incorrect.
pub fn label_output(
    instance: &Instance,
    output_text: &str,
    judge_gateway: &(impl Gateway + ?Sized),
    params: &GenerationParams,
) -> Result<judge::JudgeReply<Label>, EvalError> {
    let request = prompts::label_request(&instance.instruction, &instance.gold_response, output_text);
    let reply = judge::ask(
        judge_gateway,
        &request,
        params,
        0,
        |text| parse_verdict3(text).map(Label::from),
        &prompts::VERDICT_NUDGES,
        Label::Incorrect,
    )?;
    Ok(reply)
}

/// Does this retrieval contain (or let one derive) the gold answer?
/// Unparseable after retries is pessimistically irrelevant.
pub fn label_relevance(
    retrieval: &Retrieval,
    instance: &Instance,
    judge_gateway: &(impl Gateway + ?Sized),
    params: &GenerationParams,
) -> Result<judge::JudgeReply<bool>, EvalError> {
    let request =
        prompts::relevance_request(&instance.instruction, &instance.gold_response, &retrieval.text);
    let reply = judge::ask(
        judge_gateway,
        &request,
        params,
        0,
        parse_relevance,
        &prompts::VERDICT_NUDGES,
        false,
    )?;
    Ok(reply)
}

fn batched_judge<T: Copy>(
    gateway: &(impl Gateway + ?Sized),
    requests: &[Vec<ChatMessage>],
    params: &GenerationParams,
    parse: impl Fn(&str) -> Option<T>,
    nudges: &[&str],
    fallback: T,
) -> Result<(Vec<T>, u32), EvalError> {
    let batch: Vec<BatchRequest> = requests
        .iter()
        .map(|messages| BatchRequest {
            messages: messages.clone(),
            params: params.clone(),
            sample_index: 0,
        })
        .collect();
    let first = complete_many(gateway, &batch);

    let mut values = Vec::with_capacity(requests.len());
    let mut warnings = 0;
    for (messages, reply) in requests.iter().zip(first) {
        match parse(&reply?.text) {
            Some(v) => values.push(v),
            None => {
                // Stragglers retry sequentially with escalating nudges.
                let mut found = None;
                for nudge in nudges {
                    let mut nudged = messages.clone();
                    if let Some(last) =
                        nudged.iter_mut().rev().find(|m| m.role == crate::gateway::Role::User)
                    {
                        last.content.push_str("\n\n");
                        last.content.push_str(nudge);
                    }
                    let completion = gateway.complete(&nudged, params, 0)?;
                    if let Some(v) = parse(&completion.text) {
                        found = Some(v);
                        break;
                    }
                }
                match found {
                    Some(v) => values.push(v),
                    None => {
                        warnings += 1;
                        values.push(fallback);
                    }
                }
            }
        }
    }
    Ok((values, warnings))
}

/// Label a full output set against its corpus: one 3-way label per output
/// plus one relevance label per provided retrieval. Labeling calls run
/// under the gateway's bounded batch.
pub fn label_records(
    corpus: &Corpus,
    outputs: &BTreeMap<String, String>,
    n_retrievals: usize,
    judge_gateway: &(impl Gateway + ?Sized),
    params: &GenerationParams,
) -> Result<(Vec<EvalRecord>, u32), EvalError> {
    let missing: Vec<String> = corpus
        .instances
        .iter()
        .filter(|i| !outputs.contains_key(&i.id))
        .map(|i| i.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(EvalError::MissingOutput { ids: missing });
    }
    for id in outputs.keys() {
        if !corpus.instances.iter().any(|i| &i.id == id) {
            return Err(EvalError::UnknownInstance { instance_id: id.clone() });
        }
    }

    let label_requests: Vec<Vec<ChatMessage>> = corpus
        .instances
        .iter()
        .map(|inst| prompts::label_request(&inst.instruction, &inst.gold_response, &outputs[&inst.id]))
        .collect();
    let (labels, mut warnings) = batched_judge(
        judge_gateway,
        &label_requests,
        params,
        |text| parse_verdict3(text).map(Label::from),
        &prompts::VERDICT_NUDGES,
        Label::Incorrect,
    )?;

    // Relevance judgments, flattened over (instance, provided retrieval).
    let mut relevance_requests = Vec::new();
    let mut spans = Vec::with_capacity(corpus.len());
    for inst in &corpus.instances {
        let provided = select_top_retrievals(inst, n_retrievals);
        spans.push(provided.len());
        for retrieval in provided {
            relevance_requests.push(prompts::relevance_request(
                &inst.instruction,
                &inst.gold_response,
                &retrieval.text,
            ));
        }
    }
    let (relevance_flat, relevance_warnings) = batched_judge(
        judge_gateway,
        &relevance_requests,
        params,
        parse_relevance,
        &prompts::VERDICT_NUDGES,
        false,
    )?;
    warnings += relevance_warnings;

    let mut records = Vec::with_capacity(corpus.len());
    let mut cursor = 0;
    for ((inst, label), span) in corpus.instances.iter().zip(labels).zip(spans) {
        let relevance = relevance_flat[cursor..cursor + span].to_vec();
        cursor += span;
        records.push(EvalRecord::new(
            inst.id.clone(),
            inst.dataset_tag.clone(),
            outputs[&inst.id].clone(),
            label,
            relevance,
        ));
    }
    Ok((records, warnings))
}

/// Fraction of refused instances whose reference-model output is judged
/// correct; absent when nothing was refused. Every refused instance must
/// have a reference output (no silent reuse of stale runs).
pub fn counterfactual_accuracy(
    refused_records: &[&EvalRecord],
    reference_outputs: &BTreeMap<String, String>,
    instances_by_id: &BTreeMap<&str, &Instance>,
    judge_gateway: &(impl Gateway + ?Sized),
    params: &GenerationParams,
) -> Result<(Option<Rate>, u32), EvalError> {
    if refused_records.is_empty() {
        return Ok((None, 0));
    }
    let mut missing: Vec<String> = refused_records
        .iter()
        .filter(|r| !reference_outputs.contains_key(&r.instance_id))
        .map(|r| r.instance_id.clone())
        .collect();
    if !missing.is_empty() {
        missing.sort();
        return Err(EvalError::Coverage { ids: missing });
    }

    let requests: Vec<Vec<ChatMessage>> = refused_records
        .iter()
        .map(|record| {
            let inst = instances_by_id
                .get(record.instance_id.as_str())
                .ok_or_else(|| EvalError::UnknownInstance { instance_id: record.instance_id.clone() })?;
            Ok(prompts::label_request(
                &inst.instruction,
                &inst.gold_response,
                &reference_outputs[&record.instance_id],
            ))
        })
        .collect::<Result<_, EvalError>>()?;
    let (labels, warnings) = batched_judge(
        judge_gateway,
        &requests,
        params,
        |text| parse_verdict3(text).map(Label::from),
        &prompts::VERDICT_NUDGES,
        Label::Incorrect,
    )?;
    let correct = labels.iter().filter(|&&l| l == Label::Correct).count() as u64;
    Ok((ratio(correct, refused_records.len() as u64), warnings))
}

/// Signed per-dataset and macro change in refusal rate, in percentage
/// points.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefusalDelta {
    pub per_dataset: BTreeMap<String, Rate>,
    pub macro_delta: Option<Rate>,
}

/// `candidate - reference` refusal rates, per dataset and macro-averaged.
pub fn refusal_delta(candidate: &Report, reference: &Report) -> Result<RefusalDelta, EvalError> {
    let cand_keys: Vec<&String> = candidate.datasets.keys().collect();
    let ref_keys: Vec<&String> = reference.datasets.keys().collect();
    if cand_keys != ref_keys {
        return Err(EvalError::DatasetMismatch {
            details: format!("candidate has {cand_keys:?}, reference has {ref_keys:?}"),
        });
    }
    let hundred = Ratio::from_integer(100);
    let mut per_dataset = BTreeMap::new();
    for (name, cand) in &candidate.datasets {
        let (Some(c), Some(r)) = (cand.refusal_rate, reference.datasets[name].refusal_rate) else {
            return Err(EvalError::DatasetMismatch {
                details: format!("refusal rate undefined for dataset {name}"),
            });
        };
        per_dataset.insert(name.clone(), Rate((c.0 - r.0) * hundred));
    }
    let deltas: Vec<Option<Rate>> = per_dataset.values().map(|&d| Some(d)).collect();
    let macro_delta = macro_mean(deltas.iter());
    Ok(RefusalDelta { per_dataset, macro_delta })
}

/// Group records by dataset tag and build the report.
pub fn report_from_records(
    records: &[EvalRecord],
    metadata: ReportMetadata,
) -> Result<Report, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyRecords);
    }
    let mut grouped: BTreeMap<String, Vec<EvalRecord>> = BTreeMap::new();
    for record in records {
        grouped.entry(record.dataset_tag.clone()).or_default().push(record.clone());
    }
    let mut datasets = BTreeMap::new();
    for (name, group) in grouped {
        datasets.insert(name, compute_metrics(&group)?);
    }
    Ok(macro_aggregate(datasets, metadata))
}

/// Generate candidate outputs for every instance at the given retrieval
/// count, then label and report. One entry per `n` in `n_list`.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    eval_corpus: &Corpus,
    n_list: &[usize],
    candidate_gateway: &(impl Gateway + ?Sized),
    judge_gateway: &(impl Gateway + ?Sized),
    template: &RenderTemplate,
    candidate_system_prompt: Option<&str>,
    params: &GenerationParams,
    metadata: &ReportMetadata,
) -> Result<Vec<(usize, Report)>, EvalError> {
    let mut reports = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let batch: Vec<BatchRequest> = eval_corpus
            .instances
            .iter()
            .map(|inst| {
                let mut messages = Vec::with_capacity(2);
                if let Some(system) = candidate_system_prompt {
                    messages.push(ChatMessage::system(system));
                }
                messages.push(ChatMessage::user(render_user_prompt(inst, n, template)));
                BatchRequest { messages, params: params.clone(), sample_index: 0 }
            })
            .collect();
        let mut outputs = BTreeMap::new();
        for (inst, result) in eval_corpus.instances.iter().zip(complete_many(candidate_gateway, &batch)) {
            outputs.insert(inst.id.clone(), result?.text);
        }
        let (records, _warnings) =
            label_records(eval_corpus, &outputs, n, judge_gateway, params)?;
        let metadata = ReportMetadata { n_retrievals: n, ..metadata.clone() };
        reports.push((n, report_from_records(&records, metadata)?));
    }
    Ok(reports)
}

/// Plain-text table: one row per metric, one column per dataset plus the
/// macro average.
pub fn render_table(report: &Report) -> String {
    let names: Vec<&String> = report.datasets.keys().collect();
    let fmt = |rate: &Option<Rate>| rate.as_ref().map_or("-".to_string(), |r| r.percent_1dp());

    let rows: Vec<(&str, Vec<String>)> = vec![
        ("precision", {
            let mut v = vec![fmt(&report.macro_average.precision)];
            v.extend(names.iter().map(|n| fmt(&report.datasets[*n].precision)));
            v
        }),
        ("recall", {
            let mut v = vec![fmt(&report.macro_average.recall)];
            v.extend(names.iter().map(|n| fmt(&report.datasets[*n].recall)));
            v
        }),
        ("f1", {
            let mut v = vec![fmt(&report.macro_average.f1)];
            v.extend(names.iter().map(|n| fmt(&report.datasets[*n].f1)));
            v
        }),
        ("refusal_rate", {
            let mut v = vec![fmt(&report.macro_average.refusal_rate)];
            v.extend(names.iter().map(|n| fmt(&report.datasets[*n].refusal_rate)));
            v
        }),
        ("false_refusal_rate", {
            let mut v = vec![fmt(&report.macro_average.false_refusal_rate)];
            v.extend(names.iter().map(|n| fmt(&report.datasets[*n].false_refusal_rate)));
            v
        }),
        ("counterfactual_acc", {
            let mut v = vec![fmt(&report.macro_average.counterfactual_accuracy)];
            v.extend(names.iter().map(|n| fmt(&report.datasets[*n].counterfactual_accuracy)));
            v
        }),
    ];

    let mut out = String::new();
    out.push_str(&format!("{:<20}", "metric"));
    out.push_str(&format!("{:>9}", "Avg."));
    for name in &names {
        out.push_str(&format!("{:>9}", name));
    }
    out.push('\n');
    for (label, values) in rows {
        out.push_str(&format!("{label:<20}"));
        for value in values {
            out.push_str(&format!("{value:>9}"));
        }
        out.push('\n');
    }
    out
}
