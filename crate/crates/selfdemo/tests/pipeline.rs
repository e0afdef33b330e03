//! Pipeline-level behavior not covered by the acceptance criteria:
//! degenerate optimizer runs, candidate-output files, manifest accounting,
//! and counterfactual reporting.

mod common;

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use num_rational::Ratio;

use selfdemo::config::{
    CorpusConfig, EndpointSpec, Endpoints, EvalConfig, ExportConfig, MixConfig, OutputPaths,
    RunConfig,
};
use selfdemo::engine::RunManifest;
use selfdemo::evaluator::Label;
use selfdemo::exporter::{jsonl, RenderTemplate};
use selfdemo::gateway::{CachedGateway, DefaultBehavior, Gateway};
use selfdemo::optimizer::{OptimizerConfig, PromptMode};
use selfdemo::pipeline::{
    cmd_export, evaluate_with, generate_demos_with, optimize_prompts_with, CandidateOutput,
    PipelineError, PipelineGateways, PromptSetFile,
};
use selfdemo::prompts;

use common::{oracle_reference_world, semantic_world, toy_corpus, toy_corpus_path};

fn base_config(root: &Path) -> RunConfig {
    let out = root.join("out");
    let scripted = EndpointSpec::Scripted {
        script_path: None,
        default_behavior: DefaultBehavior::Echo,
        model_name: None,
        max_in_flight: 4,
    };
    RunConfig {
        seed: 11,
        cache_dir: None,
        corpus: CorpusConfig {
            train_path: toy_corpus_path(),
            eval_path: Some(toy_corpus_path()),
            schema_version: "1".into(),
        },
        mix: Some(MixConfig { dialogue_fraction: 0.10, total: 50 }),
        endpoints: Endpoints {
            generator: scripted.clone(),
            judge: scripted.clone(),
            reference: Some(scripted),
        },
        optimizer: OptimizerConfig {
            beam_width: 2,
            proposals_per_prompt: 2,
            rounds: 1,
            train_slice_size: 3,
            validation_slice_size: 4,
            final_top_m: 2,
            n_retrievals: 2,
            ..OptimizerConfig::default()
        },
        engine: Default::default(),
        template: RenderTemplate::default(),
        export: Some(ExportConfig {
            sft_path: out.join("sft.jsonl"),
            dpo_path: out.join("dpo.jsonl"),
            n_retrievals: 2,
            include_system_prompt: true,
        }),
        eval: Some(EvalConfig {
            n_retrievals: 2,
            n_list: vec![0, 2],
            candidate_outputs: None,
            candidate_system_prompt: None,
        }),
        outputs: OutputPaths {
            prompt_set: out.join("prompt_set.json"),
            optimizer_report: out.join("optimizer_report.json"),
            checkpoint_dir: out.join("checkpoints"),
            selfdemo: out.join("selfdemos.jsonl"),
            manifest: out.join("manifest.json"),
            export_manifest: out.join("export_manifest.json"),
            report: out.join("report.json"),
            sweep_dir: out.join("sweep"),
        },
    }
}

fn semantic_gateways(corpus: &selfdemo::corpus::Corpus) -> PipelineGateways {
    let world = Arc::new(semantic_world(corpus).with_max_in_flight(4));
    PipelineGateways {
        generator: world.clone(),
        judge: world,
        reference: Some(Arc::new(oracle_reference_world(corpus))),
    }
}

#[test]
fn zero_round_prompt_set_is_seeds_plus_refusal() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = base_config(dir.path());
    config.optimizer.rounds = 0;
    config.optimizer.final_top_m = 2;
    let corpus = toy_corpus();
    let gateways = semantic_gateways(&corpus);
    optimize_prompts_with(&config, false, &gateways).unwrap();

    let set = PromptSetFile::load(&config.outputs.prompt_set).unwrap();
    // One survivor per mode (the seed) plus the fixed refusal prompt.
    assert_eq!(set.prompts.len(), 3);
    let texts: BTreeSet<&str> = set.prompts.iter().map(|p| p.text.as_str()).collect();
    assert!(texts.contains(prompts::seed_with_retrieval().text.as_str()));
    assert!(texts.contains(prompts::seed_no_retrieval().text.as_str()));
    assert!(texts.contains(prompts::refusal_prompt().text.as_str()));
}

#[test]
fn manifest_partitions_the_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let config = base_config(dir.path());
    let corpus = toy_corpus();
    let gateways = semantic_gateways(&corpus);
    optimize_prompts_with(&config, false, &gateways).unwrap();
    let manifest = generate_demos_with(&config, &gateways).unwrap();
    assert_eq!(
        manifest.answer + manifest.refusal + manifest.skipped + manifest.failed,
        manifest.total
    );
    assert_eq!(manifest.total, 50);
    assert_eq!(manifest.failed, 0);

    // The manifest file re-parses to the returned value.
    let text = std::fs::read_to_string(&config.outputs.manifest).unwrap();
    let on_disk: RunManifest = serde_json::from_str(&text).unwrap();
    assert_eq!(on_disk, manifest);
}

#[test]
fn evaluate_reads_candidate_outputs_from_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = base_config(dir.path());
    let corpus = toy_corpus();

    // Outputs echoing the gold response: everything labels correct.
    let outputs: Vec<CandidateOutput> = corpus
        .instances
        .iter()
        .map(|i| CandidateOutput {
            instance_id: i.id.clone(),
            output: i.gold_response.clone(),
        })
        .collect();
    let outputs_path = dir.path().join("candidate_outputs.jsonl");
    jsonl::write_atomic(&outputs_path, &outputs).unwrap();
    config.eval = Some(EvalConfig {
        n_retrievals: 2,
        n_list: vec![0, 2],
        candidate_outputs: Some(outputs_path.clone()),
        candidate_system_prompt: None,
    });

    let gateways = semantic_gateways(&corpus);
    let report = evaluate_with(&config, &gateways).unwrap();
    assert_eq!(report.metadata.candidate_model, format!("file:{}", outputs_path.display()));
    for metrics in report.datasets.values() {
        assert_eq!(metrics.n_correct, metrics.n_total);
        assert_eq!(metrics.precision.unwrap().0, Ratio::from_integer(1));
    }

    // Partial coverage is a hard error naming the missing instances.
    let partial = &outputs[..outputs.len() - 1];
    jsonl::write_atomic(&outputs_path, partial).unwrap();
    match evaluate_with(&config, &gateways) {
        Err(PipelineError::Eval(selfdemo::evaluator::EvalError::MissingOutput { ids })) => {
            assert_eq!(ids, vec![outputs.last().unwrap().instance_id.clone()]);
        }
        other => panic!("expected missing-output error, got {other:?}"),
    }

    // Duplicate ids are rejected.
    let mut duplicated = outputs.clone();
    duplicated.push(outputs[0].clone());
    jsonl::write_atomic(&outputs_path, &duplicated).unwrap();
    assert!(matches!(
        evaluate_with(&config, &gateways),
        Err(PipelineError::MissingInput(_))
    ));
}

#[test]
fn report_carries_counterfactual_for_refused_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let config = base_config(dir.path());
    let corpus = toy_corpus();
    let gateways = semantic_gateways(&corpus);
    let report = evaluate_with(&config, &gateways).unwrap();

    assert_eq!(report.metadata.reference_model.as_deref(), Some("scripted"));
    let mut saw_refusals = false;
    for metrics in report.datasets.values() {
        if metrics.n_refused > 0 {
            saw_refusals = true;
            // The scripted reference answers every refused question
            // correctly, so counterfactual accuracy is exactly 1.
            assert_eq!(metrics.counterfactual_accuracy.unwrap().0, Ratio::from_integer(1));
        } else {
            assert!(metrics.counterfactual_accuracy.is_none());
        }
    }
    assert!(saw_refusals, "the scripted candidate must refuse something");
}

#[test]
fn export_skips_nothing_on_the_toy_run_and_reuses_top_prompt() {
    let dir = tempfile::tempdir().unwrap();
    let config = base_config(dir.path());
    let corpus = toy_corpus();
    let gateways = semantic_gateways(&corpus);
    optimize_prompts_with(&config, false, &gateways).unwrap();
    generate_demos_with(&config, &gateways).unwrap();
    let manifests = cmd_export(&config).unwrap();
    assert_eq!(manifests.sft.exported, 50);
    assert_eq!(manifests.dpo.exported + manifests.dpo.skipped, 50);

    // The exported system message is the top-ranked with-retrieval prompt.
    let set = PromptSetFile::load(&config.outputs.prompt_set).unwrap();
    let top = set.top_prompt(PromptMode::WithRetrieval).unwrap();
    let sft: Vec<selfdemo::exporter::SftRecord> =
        jsonl::read(&config.export.as_ref().unwrap().sft_path).unwrap();
    for row in &sft {
        assert_eq!(row.messages[0].role, selfdemo::gateway::Role::System);
        assert_eq!(row.messages[0].content, top.text);
    }
}

#[test]
fn cached_gateway_makes_reruns_replay_without_inner_calls() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = base_config(dir.path());
    config.cache_dir = Some(dir.path().join("cache"));
    let corpus = toy_corpus();
    let world = Arc::new(semantic_world(&corpus).with_max_in_flight(4));
    let wrap = |role: &str| -> Arc<dyn Gateway> {
        Arc::new(
            CachedGateway::new(world.clone(), dir.path().join("cache").join(role)).unwrap(),
        )
    };
    let gateways = PipelineGateways {
        generator: wrap("generator"),
        judge: wrap("judge"),
        reference: None,
    };
    optimize_prompts_with(&config, false, &gateways).unwrap();
    let calls_after_first = world.call_count();
    optimize_prompts_with(&config, false, &gateways).unwrap();
    assert_eq!(world.call_count(), calls_after_first, "warm rerun must be pure cache replay");
}

#[test]
fn optimizer_resumes_from_its_checkpoint_after_interruption() {
    use common::FailAfter;
    use selfdemo::optimizer::{optimize, OptimizerConfig};

    let corpus = toy_corpus();
    let cfg = OptimizerConfig {
        beam_width: 2,
        proposals_per_prompt: 2,
        rounds: 2,
        train_slice_size: 3,
        validation_slice_size: 4,
        final_top_m: 2,
        n_retrievals: 2,
        ..OptimizerConfig::default()
    };
    let seed_prompt = prompts::seed_with_retrieval();
    let template = RenderTemplate::default();

    // Clean reference run, counting how many calls a full run makes.
    let clean_dir = tempfile::tempdir().unwrap();
    let world = Arc::new(semantic_world(&corpus));
    let clean = optimize(
        &seed_prompt,
        &corpus,
        &cfg,
        &world,
        &template,
        5,
        Some(&clean_dir.path().join("checkpoint.json")),
    )
    .unwrap();
    let total_calls = world.call_count() as u64;

    // Interrupt midway; partial progress lands in the cache and the
    // round checkpoint.
    let dir = tempfile::tempdir().unwrap();
    let checkpoint = dir.path().join("checkpoint.json");
    let cache = dir.path().join("cache");
    let interrupted = optimize(
        &seed_prompt,
        &corpus,
        &cfg,
        &CachedGateway::new(
            FailAfter::new(Arc::new(semantic_world(&corpus)), total_calls / 2),
            &cache,
        )
        .unwrap(),
        &template,
        5,
        Some(&checkpoint),
    );
    assert!(interrupted.is_err(), "half the call budget must interrupt the run");

    let resumed = optimize(
        &seed_prompt,
        &corpus,
        &cfg,
        &CachedGateway::new(Arc::new(semantic_world(&corpus)), &cache).unwrap(),
        &template,
        5,
        Some(&checkpoint),
    )
    .unwrap();
    assert_eq!(
        serde_json::to_string(&clean).unwrap(),
        serde_json::to_string(&resumed).unwrap(),
        "resumed outcome must equal an uninterrupted run"
    );
}

#[test]
fn labels_partition_under_the_scripted_world() {
    let dir = tempfile::tempdir().unwrap();
    let config = base_config(dir.path());
    let corpus = toy_corpus();
    let gateways = semantic_gateways(&corpus);
    let report = evaluate_with(&config, &gateways).unwrap();
    let mut totals = (0u64, 0u64, 0u64, 0u64);
    for metrics in report.datasets.values() {
        totals.0 += metrics.n_total;
        totals.1 += metrics.n_correct;
        totals.2 += metrics.n_refused;
        totals.3 += metrics.n_incorrect;
    }
    assert_eq!(totals.0, 50);
    assert_eq!(totals.1 + totals.2 + totals.3, 50);
    // Sanity: the scripted candidate produces all three labels.
    assert!(totals.1 > 0 && totals.2 > 0 && totals.3 > 0, "{totals:?}");
    let _ = Label::Correct;
}
