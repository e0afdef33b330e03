//! End-to-end pipeline commands behind the CLI: prompt optimization,
//! self-demo generation, SFT/DPO export, evaluation, and retrieval-count
//! sweeps. Every command is a pure function of the config, the corpus
//! files, and the gateway responses, so reruns against an unchanged call
//! cache are byte-identical and interrupted runs resume from the cache.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, GatewayRole, RunConfig};
use crate::corpus::{self, Corpus, CorpusError};
use crate::engine::{self, EngineError, RunManifest, SelfDemoRecord};
use crate::evaluator::{
    self, EvalError, Rate, Report, ReportMetadata,
};
use crate::exporter::{self, jsonl, ExportError, ExportManifest};
use crate::gateway::{complete_many, BatchRequest, ChatMessage, Gateway, GenerationParams};
use crate::optimizer::{self, OptimizerError, PromptMode, RoundReport, SystemPrompt};
use crate::prompts;
use crate::seeds;

/// The gateways a pipeline run talks to. Built from the config by the CLI;
/// tests inject scripted worlds directly.
pub struct PipelineGateways {
    pub generator: Arc<dyn Gateway>,
    pub judge: Arc<dyn Gateway>,
    pub reference: Option<Arc<dyn Gateway>>,
}

impl PipelineGateways {
    pub fn from_config(config: &RunConfig) -> Result<Self, PipelineError> {
        let reference = match config.endpoints.reference {
            Some(_) => Some(config.build_gateway(GatewayRole::Reference)?),
            None => None,
        };
        Ok(Self {
            generator: config.build_gateway(GatewayRole::Generator)?,
            judge: config.build_gateway(GatewayRole::Judge)?,
            reference,
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Export(#[from] ExportError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("failed to write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.display().to_string(), source }
}

fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serialization is infallible");
    bytes.push(b'\n');
    jsonl::write_bytes_atomic(path, &bytes).map_err(io_err(path))
}

/// One selected prompt in the prompt-set file, in rank order per mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSetEntry {
    pub id: String,
    pub text: String,
    pub mode: PromptMode,
    #[serde(default)]
    pub lineage: Option<String>,
    #[serde(default)]
    pub validation_mean_score: Option<f64>,
}

/// The prompt-set file consumed by `generate-demos`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSetFile {
    pub version: String,
    pub prompts: Vec<PromptSetEntry>,
}

impl PromptSetFile {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        if !path.exists() {
            return Err(PipelineError::MissingInput(format!(
                "prompt-set file {} (run optimize-prompts first)",
                path.display()
            )));
        }
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Io {
            path: path.display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
        })
    }

    pub fn system_prompts(&self) -> Vec<SystemPrompt> {
        self.prompts
            .iter()
            .map(|entry| SystemPrompt {
                id: entry.id.clone(),
                text: entry.text.clone(),
                mode: entry.mode,
                lineage: entry.lineage.clone(),
            })
            .collect()
    }

    /// The highest-ranked prompt of a mode, if any.
    pub fn top_prompt(&self, mode: PromptMode) -> Option<&PromptSetEntry> {
        self.prompts.iter().find(|p| p.mode == mode)
    }
}

/// Per-mode beam traces written next to the prompt set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerReportFile {
    pub modes: BTreeMap<String, Vec<RoundReport>>,
    pub warnings: u32,
}

fn load_train_corpus(config: &RunConfig) -> Result<Corpus, PipelineError> {
    Ok(corpus::load_corpus(&config.corpus.train_path, &config.corpus.schema_version)?)
}

fn load_eval_corpus(config: &RunConfig) -> Result<Corpus, PipelineError> {
    let path = config.eval_corpus_path()?;
    Ok(corpus::load_corpus(path, &config.corpus.schema_version)?)
}

fn mode_label(mode: PromptMode) -> &'static str {
    match mode {
        PromptMode::WithRetrieval => "with_retrieval",
        PromptMode::NoRetrieval => "no_retrieval",
        PromptMode::Refusal => "refusal",
    }
}

/// Optimize system messages for both answer modes, then write the
/// prompt-set file (selected prompts plus the fixed refusal prompt) and
/// the per-round optimizer report.
pub fn cmd_optimize_prompts(config: &RunConfig, resume: bool) -> Result<PathBuf, PipelineError> {
    config.validate_common()?;
    let gateways = PipelineGateways::from_config(config)?;
    optimize_prompts_with(config, resume, &gateways)
}

/// [`cmd_optimize_prompts`] against explicit gateways.
pub fn optimize_prompts_with(
    config: &RunConfig,
    resume: bool,
    gateways: &PipelineGateways,
) -> Result<PathBuf, PipelineError> {
    let corpus = load_train_corpus(config)?;
    let gateway = &gateways.generator;

    let mut entries = Vec::new();
    let mut modes = BTreeMap::new();
    let mut warnings = 0;
    for seed_prompt in [prompts::seed_with_retrieval(), prompts::seed_no_retrieval()] {
        let label = mode_label(seed_prompt.mode);
        let checkpoint = config.outputs.checkpoint_dir.join(format!("optimizer-{label}.json"));
        if !resume {
            let _ = std::fs::remove_file(&checkpoint);
        }
        let run_seed = seeds::sub_seed(config.seed, &format!("optimizer:{label}"));
        let outcome = optimizer::optimize(
            &seed_prompt,
            &corpus,
            &config.optimizer,
            gateway,
            &config.template,
            run_seed,
            Some(&checkpoint),
        )?;
        for scored in &outcome.selected {
            entries.push(PromptSetEntry {
                id: scored.prompt.id.clone(),
                text: scored.prompt.text.clone(),
                mode: scored.prompt.mode,
                lineage: scored.prompt.lineage.clone(),
                validation_mean_score: Some(scored.mean_score),
            });
        }
        modes.insert(label.to_string(), outcome.rounds);
        warnings += outcome.warnings;
    }
    let refusal = prompts::refusal_prompt();
    entries.push(PromptSetEntry {
        id: refusal.id,
        text: refusal.text,
        mode: refusal.mode,
        lineage: None,
        validation_mean_score: None,
    });

    let file = PromptSetFile { version: "1".into(), prompts: entries };
    write_json_pretty(&config.outputs.prompt_set, &file)?;
    write_json_pretty(&config.outputs.optimizer_report, &OptimizerReportFile { modes, warnings })?;
    Ok(config.outputs.prompt_set.clone())
}

/// Run the self-demo engine over the (optionally mixed) training corpus
/// and write the self-demo file plus the run manifest.
pub fn cmd_generate_demos(config: &RunConfig) -> Result<RunManifest, PipelineError> {
    config.validate_common()?;
    let gateways = PipelineGateways::from_config(config)?;
    generate_demos_with(config, &gateways)
}

/// [`cmd_generate_demos`] against explicit gateways.
pub fn generate_demos_with(
    config: &RunConfig,
    gateways: &PipelineGateways,
) -> Result<RunManifest, PipelineError> {
    let prompt_set = PromptSetFile::load(&config.outputs.prompt_set)?;
    let mut corpus = load_train_corpus(config)?;
    if let Some(mix) = &config.mix {
        corpus = corpus::mix_domains(&corpus, mix.dialogue_fraction, mix.total, config.seed)?;
    }

    let run = engine::run_engine(
        &corpus,
        &prompt_set.system_prompts(),
        &config.engine,
        &gateways.generator,
        &gateways.judge,
        &config.template,
        config.seed,
    )?;
    let records: Vec<SelfDemoRecord> = run.demos.iter().map(|d| d.to_record()).collect();
    jsonl::write_atomic(&config.outputs.selfdemo, &records)
        .map_err(io_err(&config.outputs.selfdemo))?;
    write_json_pretty(&config.outputs.manifest, &run.manifest)?;
    Ok(run.manifest)
}

/// Manifests for the two export formats.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportManifests {
    pub sft: ExportManifest,
    pub dpo: ExportManifest,
}

/// Render SFT and DPO training files from the self-demo file.
pub fn cmd_export(config: &RunConfig) -> Result<ExportManifests, PipelineError> {
    config.validate_common()?;
    let export = config.export_config()?;
    if !config.outputs.selfdemo.exists() {
        return Err(PipelineError::MissingInput(format!(
            "self-demo file {} (run generate-demos first)",
            config.outputs.selfdemo.display()
        )));
    }
    let demos: Vec<SelfDemoRecord> =
        jsonl::read(&config.outputs.selfdemo).map_err(io_err(&config.outputs.selfdemo))?;
    let corpus = load_train_corpus(config)?;

    let system_prompt = if export.include_system_prompt {
        let prompt_set = PromptSetFile::load(&config.outputs.prompt_set)?;
        prompt_set.top_prompt(PromptMode::WithRetrieval).map(|p| p.text.clone())
    } else {
        None
    };

    let manifests = ExportManifests {
        sft: exporter::export_sft(
            &demos,
            &corpus,
            export.n_retrievals,
            &config.template,
            system_prompt.as_deref(),
            &export.sft_path,
        )?,
        dpo: exporter::export_dpo(
            &demos,
            &corpus,
            export.n_retrievals,
            &config.template,
            system_prompt.as_deref(),
            &export.dpo_path,
            config.seed,
        )?,
    };
    write_json_pretty(&config.outputs.export_manifest, &manifests)?;
    Ok(manifests)
}

/// One line of a candidate-output file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateOutput {
    pub instance_id: String,
    pub output: String,
}

fn read_candidate_outputs(path: &Path) -> Result<BTreeMap<String, String>, PipelineError> {
    if !path.exists() {
        return Err(PipelineError::MissingInput(format!(
            "candidate-output file {}",
            path.display()
        )));
    }
    let records: Vec<CandidateOutput> = jsonl::read(path).map_err(io_err(path))?;
    let mut outputs = BTreeMap::new();
    for record in records {
        if outputs.insert(record.instance_id.clone(), record.output).is_some() {
            return Err(PipelineError::MissingInput(format!(
                "duplicate candidate output for instance {} in {}",
                record.instance_id,
                path.display()
            )));
        }
    }
    Ok(outputs)
}

fn generate_outputs(
    corpus: &Corpus,
    gateway: &(impl Gateway + ?Sized),
    n_retrievals: usize,
    system_prompt: Option<&str>,
    template: &crate::exporter::RenderTemplate,
) -> Result<BTreeMap<String, String>, PipelineError> {
    let batch: Vec<BatchRequest> = corpus
        .instances
        .iter()
        .map(|inst| {
            let mut messages = Vec::with_capacity(2);
            if let Some(system) = system_prompt {
                messages.push(ChatMessage::system(system));
            }
            messages.push(ChatMessage::user(exporter::render_user_prompt(
                inst,
                n_retrievals,
                template,
            )));
            BatchRequest { messages, params: GenerationParams::default(), sample_index: 0 }
        })
        .collect();
    let mut outputs = BTreeMap::new();
    for (inst, result) in corpus.instances.iter().zip(complete_many(gateway, &batch)) {
        outputs.insert(inst.id.clone(), result.map_err(EvalError::Gateway)?.text);
    }
    Ok(outputs)
}

/// Label candidate outputs over the eval corpus, compute per-dataset and
/// macro metrics (plus counterfactual accuracy when a reference endpoint
/// is configured), and write the report.
pub fn cmd_evaluate(config: &RunConfig) -> Result<Report, PipelineError> {
    config.validate_common()?;
    let gateways = PipelineGateways::from_config(config)?;
    evaluate_with(config, &gateways)
}

/// [`cmd_evaluate`] against explicit gateways.
pub fn evaluate_with(
    config: &RunConfig,
    gateways: &PipelineGateways,
) -> Result<Report, PipelineError> {
    let eval = config.eval_config();
    let corpus = load_eval_corpus(config)?;
    let judge = &gateways.judge;
    let params = GenerationParams::default();

    let (outputs, candidate_model) = match &eval.candidate_outputs {
        Some(path) => (read_candidate_outputs(path)?, format!("file:{}", path.display())),
        None => {
            let outputs = generate_outputs(
                &corpus,
                &gateways.generator,
                eval.n_retrievals,
                eval.candidate_system_prompt.as_deref(),
                &config.template,
            )?;
            (outputs, gateways.generator.model_name().to_string())
        }
    };

    let (records, _warnings) =
        evaluator::label_records(&corpus, &outputs, eval.n_retrievals, judge, &params)?;

    let mut grouped: BTreeMap<String, Vec<evaluator::EvalRecord>> = BTreeMap::new();
    for record in &records {
        grouped.entry(record.dataset_tag.clone()).or_default().push(record.clone());
    }
    let mut datasets = BTreeMap::new();
    for (name, group) in &grouped {
        datasets.insert(name.clone(), evaluator::compute_metrics(group)?);
    }

    let mut reference_model = None;
    if let Some(reference) = &gateways.reference {
        reference_model = Some(reference.model_name().to_string());
        let refused_ids: Vec<&str> = records
            .iter()
            .filter(|r| r.label == evaluator::Label::Refused)
            .map(|r| r.instance_id.as_str())
            .collect();
        let refused_corpus = Corpus {
            instances: corpus
                .instances
                .iter()
                .filter(|i| refused_ids.contains(&i.id.as_str()))
                .cloned()
                .collect(),
            provenance: corpus.provenance.clone(),
        };
        let reference_outputs = generate_outputs(
            &refused_corpus,
            reference,
            eval.n_retrievals,
            None,
            &config.template,
        )?;
        let by_id = corpus.by_id();
        for (name, group) in &grouped {
            let refused: Vec<&evaluator::EvalRecord> =
                group.iter().filter(|r| r.label == evaluator::Label::Refused).collect();
            let (value, _warnings) = evaluator::counterfactual_accuracy(
                &refused,
                &reference_outputs,
                &by_id,
                judge,
                &params,
            )?;
            datasets
                .get_mut(name)
                .expect("dataset present by construction")
                .counterfactual_accuracy = value;
        }
    }

    let report = evaluator::macro_aggregate(
        datasets,
        ReportMetadata {
            candidate_model,
            judge_model: gateways.judge.model_name().to_string(),
            reference_model,
            n_retrievals: eval.n_retrievals,
            seed: config.seed,
        },
    );
    write_json_pretty(&config.outputs.report, &report)?;
    Ok(report)
}

/// Macro precision per retrieval count, written next to the per-n reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSummaryEntry {
    pub n_retrievals: usize,
    pub precision: Option<Rate>,
}

/// Evaluate at every retrieval count in the configured schedule, emitting
/// one report file per `n` plus a summary.
pub fn cmd_sweep(config: &RunConfig) -> Result<Vec<(usize, PathBuf)>, PipelineError> {
    config.validate_common()?;
    let gateways = PipelineGateways::from_config(config)?;
    sweep_with(config, &gateways)
}

/// [`cmd_sweep`] against explicit gateways.
pub fn sweep_with(
    config: &RunConfig,
    gateways: &PipelineGateways,
) -> Result<Vec<(usize, PathBuf)>, PipelineError> {
    let eval = config.eval_config();
    let corpus = load_eval_corpus(config)?;
    let params = GenerationParams::default();

    let metadata = ReportMetadata {
        candidate_model: gateways.generator.model_name().to_string(),
        judge_model: gateways.judge.model_name().to_string(),
        reference_model: None,
        n_retrievals: 0,
        seed: config.seed,
    };
    let reports = evaluator::sweep(
        &corpus,
        &eval.n_list,
        &gateways.generator,
        &gateways.judge,
        &config.template,
        eval.candidate_system_prompt.as_deref(),
        &params,
        &metadata,
    )?;

    std::fs::create_dir_all(&config.outputs.sweep_dir).map_err(io_err(&config.outputs.sweep_dir))?;
    let mut written = Vec::with_capacity(reports.len());
    let mut summary = Vec::with_capacity(reports.len());
    for (n, report) in &reports {
        let path = config.outputs.sweep_dir.join(format!("report_n{n}.json"));
        write_json_pretty(&path, report)?;
        summary.push(SweepSummaryEntry { n_retrievals: *n, precision: report.macro_average.precision });
        written.push((*n, path));
    }
    write_json_pretty(&config.outputs.sweep_dir.join("summary.json"), &summary)?;
    Ok(written)
}

/// Load a report file and render the plain-text table.
pub fn render_report_file(path: &Path) -> Result<String, PipelineError> {
    if !path.exists() {
        return Err(PipelineError::MissingInput(format!("report file {}", path.display())));
    }
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let report: Report = serde_json::from_str(&text).map_err(|e| PipelineError::Io {
        path: path.display().to_string(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
    })?;
    let mut out = String::new();
    out.push_str(&format!(
        "candidate={} judge={} n_retrievals={} seed={}\n\n",
        report.metadata.candidate_model,
        report.metadata.judge_model,
        report.metadata.n_retrievals,
        report.metadata.seed
    ));
    out.push_str(&evaluator::render_table(&report));
    Ok(out)
}
