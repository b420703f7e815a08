//! Workload description: the shared backbone, the fine-tuning tasks that
//! want to run on it, and the planner knobs.
//!
//! A workload file is a JSON document with three top-level keys —
//! `backbone`, `tasks` and `planner` — whose fields mirror the structs in
//! this module one-to-one.

use serde::{Deserialize, Serialize};
use std::collections::HashSet;

use crate::error::{PlanError, PlanResult};
use crate::profile::ProfileTable;

/// How an adapter modifies the backbone computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterType {
    /// Extra trainable modules inserted next to frozen operators.
    Additive,
    /// A trainable subset of the backbone's own parameters.
    Selective,
    /// Low-rank (or similar) reparameterization of frozen weights.
    Reparameterized,
}

/// Per-task adapter description.
///
/// `attach_points` lists the backbone operator ids the adapter hangs off;
/// `adapter_op_ids` keys the profile table for the adapter's own kernels.
/// The two lists are parallel; a single-element `adapter_op_ids` broadcasts
/// to every attach point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub adapter_type: AdapterType,
    pub attach_points: Vec<String>,
    pub adapter_op_ids: Vec<String>,
}

impl AdapterSpec {
    /// Profile op id for the adapter module at attach point index `idx`.
    pub fn op_id_at(&self, idx: usize) -> &str {
        if self.adapter_op_ids.len() == 1 {
            &self.adapter_op_ids[0]
        } else {
            &self.adapter_op_ids[idx]
        }
    }
}

/// One pipeline stage of the backbone: its GPU group size and the ordered
/// operator chain it executes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageSpec {
    /// Tensor-parallel group size for this stage.
    pub gpu_count: usize,
    /// Ordered operator ids; each id keys into the profile table.
    pub operators: Vec<String>,
}

/// The shared frozen backbone.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackboneSpec {
    /// Number of pipeline stages; must equal `stages.len()`.
    pub num_stages: usize,
    /// Per-stage GPU group and operator chain.
    pub stages: Vec<StageSpec>,
    /// Bytes of frozen backbone parameters (split evenly across stages).
    pub backbone_param_bytes: u64,
}

impl BackboneSpec {
    /// Total GPUs one instance of this backbone occupies.
    pub fn total_gpus(&self) -> usize {
        self.stages.iter().map(|s| s.gpu_count).sum()
    }

    /// True if the operator id names an attention-core operator, which can
    /// never carry an adapter. Convention: ids containing `attn_core` or
    /// `attention` are attention cores.
    pub fn is_attention_core(op_id: &str) -> bool {
        op_id.contains("attn_core") || op_id.contains("attention")
    }

    /// All operator ids across stages (with duplicates).
    pub fn all_operator_ids(&self) -> impl Iterator<Item = &str> {
        self.stages
            .iter()
            .flat_map(|s| s.operators.iter().map(String::as_str))
    }
}

/// One fine-tuning task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Task {
    pub task_id: String,
    pub adapter: AdapterSpec,
    /// Sequences per micro-batch.
    pub micro_batch_size: u64,
    /// Padded sequence length the task is billed at.
    pub padded_seq_len: u64,
    /// Raw sequence lengths of the task's dataset sample.
    pub seq_lengths: Vec<u64>,
    /// Activation bytes one token occupies on one pipeline copy.
    pub activation_bytes_per_token: u64,
    /// Bytes of gradient/optimizer state for the adapter weights.
    pub grad_buffer_bytes: u64,
    /// Tokens per micro-batch. Defaults to `micro_batch_size *
    /// padded_seq_len`; the alignment module may override it with packed
    /// token counts.
    #[serde(default)]
    pub tokens_per_microbatch: Option<u64>,
}

impl Task {
    /// Tokens this task contributes to one micro-batch.
    pub fn tokens(&self) -> u64 {
        self.tokens_per_microbatch
            .unwrap_or(self.micro_batch_size * self.padded_seq_len)
    }
}

/// Planner-level knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlannerConfig {
    /// Micro-batches per global batch (the pipeline's interleaving depth).
    pub micro_batch_count: usize,
    /// Smallest chunk the alignment module may emit; power of two.
    #[serde(default = "default_chunk_min")]
    pub chunk_min: u64,
    /// Per-GPU memory budget in bytes.
    pub memory_limit_per_gpu: u64,
    /// Optional cap on the number of buckets the grouping search explores.
    #[serde(default)]
    pub max_buckets: Option<usize>,
}

fn default_chunk_min() -> u64 {
    64
}

/// A full planning problem.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Workload {
    pub backbone: BackboneSpec,
    pub tasks: Vec<Task>,
    pub planner: PlannerConfig,
}

/// Severity of one validation finding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

/// One validation finding tied to a task or to the workload as a whole.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Diagnostic {
    pub severity: Severity,
    /// Task id the finding belongs to; `None` for global findings.
    pub task_id: Option<String>,
    pub message: String,
}

/// Outcome of `validate_workload`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationReport {
    pub accepted: bool,
    pub diagnostics: Vec<Diagnostic>,
}

impl ValidationReport {
    /// Messages of all error-severity diagnostics, joined for display.
    pub fn error_summary(&self) -> String {
        self.diagnostics
            .iter()
            .filter(|d| d.severity == Severity::Error)
            .map(|d| match &d.task_id {
                Some(id) => format!("{id}: {}", d.message),
                None => d.message.clone(),
            })
            .collect::<Vec<_>>()
            .join("; ")
    }
}

/// Check every structural invariant of the workload against the profile
/// table. Collects all findings instead of stopping at the first.
pub fn validate_workload(workload: &Workload, table: &ProfileTable) -> ValidationReport {
    let mut diags = Vec::new();
    let global = |msg: String| Diagnostic {
        severity: Severity::Error,
        task_id: None,
        message: msg,
    };

    let bb = &workload.backbone;
    if bb.num_stages == 0 {
        diags.push(global("num_stages must be ≥1".to_string()));
    }
    if bb.num_stages != bb.stages.len() {
        diags.push(global(format!(
            "num_stages ({}) must equal the number of stage entries ({})",
            bb.num_stages,
            bb.stages.len()
        )));
    }
    if bb.backbone_param_bytes == 0 {
        diags.push(global("backbone_param_bytes must be >0".to_string()));
    }
    for (s, stage) in bb.stages.iter().enumerate() {
        if stage.gpu_count == 0 {
            diags.push(global(format!("stage {s}: gpu_count must be ≥1")));
        }
        if stage.operators.is_empty() {
            diags.push(global(format!("stage {s}: operator list must be non-empty")));
        }
        for op in &stage.operators {
            if !table.has_op(op) {
                diags.push(global(format!(
                    "stage {s}: operator id '{op}' not present in the profile table"
                )));
            }
        }
        if stage.gpu_count > 1 && !table.has_comm(crate::profile::COLLECTIVE_OP) {
            diags.push(global(format!(
                "stage {s}: gpu_count {} needs '{}' rows in the profile table",
                stage.gpu_count,
                crate::profile::COLLECTIVE_OP
            )));
        }
    }

    if workload.tasks.is_empty() {
        diags.push(global("task list must be non-empty".to_string()));
    }
    let mut seen = HashSet::new();
    for task in &workload.tasks {
        if !seen.insert(task.task_id.clone()) {
            diags.push(global(format!("duplicate task_id '{}'", task.task_id)));
        }
    }

    let backbone_ops: HashSet<&str> = bb.all_operator_ids().collect();
    for task in &workload.tasks {
        let local = |msg: String| Diagnostic {
            severity: Severity::Error,
            task_id: Some(task.task_id.clone()),
            message: msg,
        };
        if task.micro_batch_size == 0 {
            diags.push(local("micro_batch_size must be ≥1".to_string()));
        }
        if task.padded_seq_len == 0 {
            diags.push(local("padded_seq_len must be ≥1".to_string()));
        }
        if task.tokens() == 0 {
            diags.push(local("tokens_per_microbatch must be >0".to_string()));
        }
        if task.adapter.attach_points.is_empty() {
            diags.push(local("attach_points must be non-empty".to_string()));
        }
        if task.adapter.adapter_op_ids.is_empty() {
            diags.push(local("adapter_op_ids must be non-empty".to_string()));
        } else if task.adapter.adapter_op_ids.len() != 1
            && task.adapter.adapter_op_ids.len() != task.adapter.attach_points.len()
        {
            diags.push(local(format!(
                "adapter_op_ids must have 1 entry or match attach_points ({} vs {})",
                task.adapter.adapter_op_ids.len(),
                task.adapter.attach_points.len()
            )));
        }
        for point in &task.adapter.attach_points {
            if !backbone_ops.contains(point.as_str()) {
                diags.push(local(format!(
                    "attach point '{point}' is not a backbone operator"
                )));
            }
            if BackboneSpec::is_attention_core(point) {
                diags.push(local(format!(
                    "attach point '{point}' targets an attention-core operator"
                )));
            }
        }
        for op in &task.adapter.adapter_op_ids {
            if !table.has_op(op) {
                diags.push(local(format!(
                    "adapter operator id '{op}' not present in the profile table"
                )));
            }
        }
    }

    let cfg = &workload.planner;
    if cfg.micro_batch_count == 0 {
        diags.push(global("micro_batch_count must be ≥1".to_string()));
    }
    if cfg.chunk_min == 0 || !cfg.chunk_min.is_power_of_two() {
        diags.push(global(format!(
            "chunk_min must be a power of two, got {}",
            cfg.chunk_min
        )));
    }
    if cfg.memory_limit_per_gpu == 0 {
        diags.push(global("memory_limit_per_gpu must be >0".to_string()));
    }
    if let Some(mb) = cfg.max_buckets {
        if mb == 0 {
            diags.push(global("max_buckets must be ≥1 when given".to_string()));
        }
    }

    // Each task must fit on the backbone alone; a task that cannot run by
    // itself can never be co-scheduled either.
    if diags.iter().all(|d| d.severity != Severity::Error) {
        for task in &workload.tasks {
            let est = crate::cost::memory_estimate(
                std::slice::from_ref(task),
                bb,
                cfg.memory_limit_per_gpu,
            );
            if est.oom {
                diags.push(Diagnostic {
                    severity: Severity::Error,
                    task_id: Some(task.task_id.clone()),
                    message: format!(
                        "task alone exceeds the per-GPU memory limit ({:.2} GB > {:.2} GB)",
                        est.peak_bytes / 1e9,
                        cfg.memory_limit_per_gpu as f64 / 1e9
                    ),
                });
            }
        }
    }

    let accepted = diags.iter().all(|d| d.severity != Severity::Error);
    ValidationReport {
        accepted,
        diagnostics: diags,
    }
}

/// Sort tasks ascending by padded sequence length, then by tokens per
/// micro-batch, then by task id. Raw sequence lengths longer than the
/// task's padded length are truncated to it. The sort is stable and
/// idempotent, and the result is a permutation of the input.
pub fn sort_by_tokens(tasks: &[Task]) -> Vec<Task> {
    let mut sorted: Vec<Task> = tasks
        .iter()
        .map(|t| {
            let mut t = t.clone();
            for len in &mut t.seq_lengths {
                *len = (*len).min(t.padded_seq_len);
            }
            t
        })
        .collect();
    sorted.sort_by(|a, b| {
        a.padded_seq_len
            .cmp(&b.padded_seq_len)
            .then(a.tokens().cmp(&b.tokens()))
            .then(a.task_id.cmp(&b.task_id))
    });
    sorted
}

/// Load a workload from a JSON file.
pub fn load_workload(path: &std::path::Path) -> PlanResult<Workload> {
    let text = std::fs::read_to_string(path)?;
    let workload: Workload =
        serde_json::from_str(&text).map_err(|e| PlanError::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
    Ok(workload)
}

/// Ready-made tiny workloads for tests and examples.
#[cfg(any(test, feature = "test-fixtures"))]
pub mod fixtures {
    use super::*;

    fn lora(attach: &str) -> AdapterSpec {
        AdapterSpec {
            adapter_type: AdapterType::Reparameterized,
            attach_points: vec![attach.to_string()],
            adapter_op_ids: vec!["lora".to_string()],
        }
    }

    /// One LoRA-on-`proj` task with three sequences and predictable sizes.
    pub fn small_task(id: &str, b: u64, l: u64) -> Task {
        Task {
            task_id: id.to_string(),
            adapter: lora("proj"),
            micro_batch_size: b,
            padded_seq_len: l,
            seq_lengths: vec![l / 2, l, l.saturating_sub(3).max(1)],
            activation_bytes_per_token: 1024,
            grad_buffer_bytes: 1 << 20,
            tokens_per_microbatch: None,
        }
    }

    /// Two-stage backbone, two small tasks, roomy memory limit.
    pub fn small_workload() -> Workload {
        Workload {
            backbone: BackboneSpec {
                num_stages: 2,
                stages: vec![
                    StageSpec {
                        gpu_count: 1,
                        operators: vec!["qkv".into(), "attn_core".into(), "proj".into()],
                    },
                    StageSpec {
                        gpu_count: 1,
                        operators: vec!["mlp_up".into(), "mlp_down".into()],
                    },
                ],
                backbone_param_bytes: 1 << 30,
            },
            tasks: vec![small_task("a", 4, 64), small_task("b", 2, 128)],
            planner: PlannerConfig {
                micro_batch_count: 4,
                chunk_min: 64,
                memory_limit_per_gpu: 8 << 30,
                max_buckets: None,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::{small_task, small_workload};
    use super::*;
    use crate::profile::test_table;

    #[test]
    fn accepts_well_formed_workload() {
        let wl = small_workload();
        let report = validate_workload(&wl, &test_table());
        assert!(report.accepted, "{:?}", report.diagnostics);
    }

    #[test]
    fn rejects_zero_micro_batch_with_named_diagnostic() {
        let mut wl = small_workload();
        wl.tasks[0].micro_batch_size = 0;
        let report = validate_workload(&wl, &test_table());
        assert!(!report.accepted);
        assert!(report
            .diagnostics
            .iter()
            .any(|d| d.message == "micro_batch_size must be ≥1"
                && d.task_id.as_deref() == Some("a")));
    }

    #[test]
    fn rejects_unknown_operator_and_attention_core_attach() {
        let mut wl = small_workload();
        wl.backbone.stages[0].operators.push("mystery_op".into());
        wl.tasks[0].adapter.attach_points = vec!["attn_core".into()];
        let report = validate_workload(&wl, &test_table());
        assert!(!report.accepted);
        assert!(report
            .diagnostics
            .iter()
            .any(|d| d.message.contains("'mystery_op' not present")));
        assert!(report
            .diagnostics
            .iter()
            .any(|d| d.message.contains("attention-core")));
    }

    #[test]
    fn sort_is_ascending_stable_and_idempotent() {
        let tasks = vec![
            small_task("z", 2, 256),
            small_task("a", 4, 64),
            small_task("m", 2, 64),
            small_task("b", 4, 64),
        ];
        let sorted = sort_by_tokens(&tasks);
        let tokens: Vec<u64> = sorted.iter().map(|t| t.padded_seq_len).collect();
        let mut expect = tokens.clone();
        expect.sort();
        assert_eq!(tokens, expect);
        // same padded length + same tokens: ordered by id
        assert_eq!(sorted[0].task_id, "m"); // 2*64 < 4*64
        assert_eq!(sorted[1].task_id, "a");
        assert_eq!(sorted[2].task_id, "b");
        // idempotent
        let twice = sort_by_tokens(&sorted);
        let ids: Vec<_> = twice.iter().map(|t| t.task_id.clone()).collect();
        let once: Vec<_> = sorted.iter().map(|t| t.task_id.clone()).collect();
        assert_eq!(ids, once);
        // permutation of the input
        let mut in_ids: Vec<_> = tasks.iter().map(|t| t.task_id.clone()).collect();
        let mut out_ids = ids.clone();
        in_ids.sort();
        out_ids.sort();
        assert_eq!(in_ids, out_ids);
    }

    #[test]
    fn sort_truncates_overlong_sequences() {
        let mut t = small_task("a", 2, 64);
        t.seq_lengths = vec![400, 64, 10];
        let sorted = sort_by_tokens(&[t]);
        assert_eq!(sorted[0].seq_lengths, vec![64, 64, 10]);
    }
}
