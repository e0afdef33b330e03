//! Prompt rendering and SFT / DPO training-file export.
//!
//! Rendering places retrievals before the instruction, each introduced by
//! the template's block header and followed by the separator. With the
//! default template:
//!
//! ```text
//! Background:
//! <passage 1>
//!
//! Background:
//! <passage 2>
//!
//! Question: <instruction>
//! ```
//!
//! An instance with no retrievals (or `n = 0`) renders as the instruction
//! section only. Because top-n retrieval selections are nested and the
//! separators fixed, the retrieval block for `n` is a string prefix of the
//! block for any larger `n`.

use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::corpus::{select_top_retrievals, Corpus, Instance};
use crate::engine::{sample_rejected, SelfDemoKind, SelfDemoRecord};
use crate::gateway::{ChatMessage, Role};

/// How retrieval-augmented user prompts are rendered. Retrievals always
/// precede the instruction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderTemplate {
    #[serde(default = "default_block_header")]
    pub retrieval_block_header: String,
    #[serde(default = "default_separator")]
    pub retrieval_separator: String,
    #[serde(default = "default_instruction_header")]
    pub instruction_header: String,
}

fn default_block_header() -> String {
    "Background:\n".into()
}

fn default_separator() -> String {
    "\n\n".into()
}

fn default_instruction_header() -> String {
    "Question: ".into()
}

impl Default for RenderTemplate {
    fn default() -> Self {
        Self {
            retrieval_block_header: default_block_header(),
            retrieval_separator: default_separator(),
            instruction_header: default_instruction_header(),
        }
    }
}

/// The retrieval section of a rendered prompt: top-n retrievals, each as
/// `header + text + separator`, concatenated in relevance order.
pub fn render_retrieval_block(instance: &Instance, n_retrievals: usize, template: &RenderTemplate) -> String {
    let mut block = String::new();
    for retrieval in select_top_retrievals(instance, n_retrievals) {
        block.push_str(&template.retrieval_block_header);
        block.push_str(&retrieval.text);
        block.push_str(&template.retrieval_separator);
    }
    block
}

/// Deterministic user prompt: retrieval block (possibly empty) followed by
/// the instruction section.
pub fn render_user_prompt(instance: &Instance, n_retrievals: usize, template: &RenderTemplate) -> String {
    let mut out = render_retrieval_block(instance, n_retrievals, template);
    out.push_str(&template.instruction_header);
    out.push_str(&instance.instruction);
    out
}

/// One SFT training record: optional system message, rendered user prompt,
/// and the chosen self-demo text as the assistant turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub id: String,
    pub messages: Vec<ChatMessage>,
}

/// One DPO preference record. `chosen` and `rejected` are byte-unequal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DpoRecord {
    pub id: String,
    pub prompt: Vec<ChatMessage>,
    pub chosen: String,
    pub rejected: String,
}

/// Counts reported by an export.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub exported: usize,
    pub skipped: usize,
    pub answer_kind: usize,
    pub refusal_kind: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum ExportError {
    #[error("failed to write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("self-demo references unknown instance id {instance_id:?}")]
    ReferentialIntegrity { instance_id: String },
}

fn prompt_messages(
    instance: &Instance,
    n_retrievals: usize,
    template: &RenderTemplate,
    system_prompt: Option<&str>,
) -> Vec<ChatMessage> {
    let mut messages = Vec::with_capacity(2);
    if let Some(system) = system_prompt {
        messages.push(ChatMessage::system(system));
    }
    messages.push(ChatMessage::user(render_user_prompt(instance, n_retrievals, template)));
    messages
}

fn sorted_demos<'a>(
    demos: &'a [SelfDemoRecord],
    corpus: &'a Corpus,
) -> Result<Vec<(&'a SelfDemoRecord, &'a Instance)>, ExportError> {
    let by_id = corpus.by_id();
    let mut paired = Vec::with_capacity(demos.len());
    for demo in demos {
        let instance = by_id.get(demo.instance_id.as_str()).ok_or_else(|| {
            ExportError::ReferentialIntegrity { instance_id: demo.instance_id.clone() }
        })?;
        paired.push((demo, *instance));
    }
    paired.sort_by(|a, b| a.0.instance_id.cmp(&b.0.instance_id));
    Ok(paired)
}

/// Write one SFT record per demo (answer and refusal kinds both count as
/// training signal), ordered by instance id.
pub fn export_sft(
    demos: &[SelfDemoRecord],
    corpus: &Corpus,
    n_retrievals: usize,
    template: &RenderTemplate,
    system_prompt: Option<&str>,
    path: &Path,
) -> Result<ExportManifest, ExportError> {
    let mut manifest = ExportManifest::default();
    let mut records = Vec::new();
    for (demo, instance) in sorted_demos(demos, corpus)? {
        let mut messages = prompt_messages(instance, n_retrievals, template, system_prompt);
        messages.push(ChatMessage {
            role: Role::Assistant,
            content: demo.chosen.text.clone(),
        });
        records.push(SftRecord { id: demo.instance_id.clone(), messages });
        manifest.exported += 1;
        match demo.kind {
            SelfDemoKind::Answer => manifest.answer_kind += 1,
            SelfDemoKind::Refusal => manifest.refusal_kind += 1,
        }
    }
    jsonl::write_atomic(path, &records).map_err(|source| ExportError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(manifest)
}

/// Write one DPO record per demo that has a usable rejected candidate.
/// The rejected response is a seeded uniform draw from the demo's rejected
/// set; candidates byte-equal to the chosen text are not eligible. Demos
/// with no eligible candidate are skipped and counted.
pub fn export_dpo(
    demos: &[SelfDemoRecord],
    corpus: &Corpus,
    n_retrievals: usize,
    template: &RenderTemplate,
    system_prompt: Option<&str>,
    path: &Path,
    seed: u64,
) -> Result<ExportManifest, ExportError> {
    let mut manifest = ExportManifest::default();
    let mut records = Vec::new();
    for (demo, instance) in sorted_demos(demos, corpus)? {
        let Some(rejected) = sample_rejected_excluding_chosen(demo, seed) else {
            manifest.skipped += 1;
            continue;
        };
        records.push(DpoRecord {
            id: demo.instance_id.clone(),
            prompt: prompt_messages(instance, n_retrievals, template, system_prompt),
            chosen: demo.chosen.text.clone(),
            rejected,
        });
        manifest.exported += 1;
        match demo.kind {
            SelfDemoKind::Answer => manifest.answer_kind += 1,
            SelfDemoKind::Refusal => manifest.refusal_kind += 1,
        }
    }
    jsonl::write_atomic(path, &records).map_err(|source| ExportError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(manifest)
}

fn sample_rejected_excluding_chosen(demo: &SelfDemoRecord, seed: u64) -> Option<String> {
    // Fast path: the plain draw is usually already byte-unequal.
    let drawn = sample_rejected(demo, seed).ok()?;
    if drawn.text != demo.chosen.text {
        return Some(drawn.text.clone());
    }
    let eligible: Vec<&str> = demo
        .rejected
        .iter()
        .map(|r| r.text.as_str())
        .filter(|t| *t != demo.chosen.text)
        .collect();
    if eligible.is_empty() {
        return None;
    }
    let mut rng = crate::seeds::channel_rng(seed, &format!("rejected-retry:{}", demo.instance_id));
    use rand::Rng;
    Some(eligible[rng.gen_range(0..eligible.len())].to_string())
}

/// JSON-lines helpers shared by the exporters and the pipeline.
pub mod jsonl {
    use super::*;
    use std::io::Write;

    /// Serialize records one per line and atomically replace `path`.
    pub fn write_atomic<T: Serialize>(path: &Path, records: &[T]) -> std::io::Result<()> {
        let mut buf = Vec::new();
        for record in records {
            serde_json::to_writer(&mut buf, record)?;
            buf.push(b'\n');
        }
        write_bytes_atomic(path, &buf)
    }

    /// Atomically replace `path` with `bytes` (temp file + rename).
    pub fn write_bytes_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(bytes)?;
        tmp.persist(path).map_err(|e| e.error)?;
        Ok(())
    }

    /// Parse a JSON-lines file, reporting the 1-based line of any failure.
    pub fn read<T: DeserializeOwned>(path: &Path) -> std::io::Result<Vec<T>> {
        let text = std::fs::read_to_string(path)?;
        let mut records = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let record = serde_json::from_str(line).map_err(|e| {
                std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("{}:{}: {e}", path.display(), idx + 1),
                )
            })?;
            records.push(record);
        }
        Ok(records)
    }
}
