//! Toolkit for building self-generated demonstration (self-demo) training
//! datasets for retrieval-augmented instruction tuning, and for evaluating
//! RAG question-answering models with abstention-aware metrics.
//!
//! The pipeline has four stages, each usable as a library call or through
//! the `selfdemo` CLI:
//!
//! 1. [`optimizer`] — beam-search optimization of system messages against a
//!    small train/validation split, for both retrieval-augmented and
//!    standalone instructions, plus a fixed refusal system message.
//! 2. [`engine`] — per-instance candidate generation under the optimized
//!    prompts, winner selection via a single-elimination judge tournament,
//!    a final correctness gate, and a self-generated refusal fallback.
//! 3. [`exporter`] — rendering of retrieval-augmented user prompts and
//!    emission of SFT / DPO training files for external trainers.
//! 4. [`evaluator`] — judge-based labeling (correct / refused / incorrect),
//!    retrieval-relevance labeling, and exact count-based metrics:
//!    precision, recall via false refusals, F1, refusal rates,
//!    counterfactual accuracy, and retrieval-count sweeps.
//!
//! All model access goes through the [`gateway`] abstraction, which has an
//! HTTP implementation for OpenAI-compatible chat-completion endpoints and
//! a scripted implementation for deterministic, network-free runs. Every
//! random choice in the pipeline is derived from one global seed via named
//! sub-seeds ([`seeds`]), so a fixed seed plus a fixed script reproduces
//! every output file byte for byte.

pub mod config;
pub mod corpus;
pub mod engine;
pub mod evaluator;
pub mod exporter;
pub mod gateway;
pub mod judge;
pub mod optimizer;
pub mod pipeline;
pub mod prompts;
pub mod seeds;
