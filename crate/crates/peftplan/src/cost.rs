//! Analytic cost model for hybrid tasks: per-stage latency, end-to-end
//! pipeline latency, and per-stage memory.
//!
//! A *hybrid task* spatially batches a contiguous range of the token-sorted
//! task list: backbone operators run once over the summed token count,
//! while each member task keeps its own adapter modules. Communication is
//! excluded here — imperfect overlap is the simulator's job.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::PlanResult;
use crate::profile::ProfileTable;
use crate::workload::{BackboneSpec, Task};

/// A contiguous range of sorted tasks batched into one unit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HybridTask {
    /// Inclusive index range into the sorted task list.
    pub first: usize,
    /// Inclusive end of the range.
    pub last: usize,
    /// The member tasks, in sorted order.
    pub members: Vec<Task>,
}

impl HybridTask {
    pub fn new(first: usize, last: usize, members: Vec<Task>) -> Self {
        debug_assert_eq!(members.len(), last - first + 1);
        HybridTask {
            first,
            last,
            members,
        }
    }

    /// Tokens per micro-batch summed over members.
    pub fn total_tokens(&self) -> u64 {
        self.members.iter().map(|t| t.tokens()).sum()
    }

    /// Member adapters grouped per attach-point operator: map from attach
    /// op id to (member index, adapter op id, tokens) triples. One group
    /// per attach point per hybrid task.
    pub fn adapter_groups(&self) -> BTreeMap<String, Vec<(usize, String, u64)>> {
        let mut groups: BTreeMap<String, Vec<(usize, String, u64)>> = BTreeMap::new();
        for (k, task) in self.members.iter().enumerate() {
            for (idx, attach) in task.adapter.attach_points.iter().enumerate() {
                groups.entry(attach.clone()).or_default().push((
                    k,
                    task.adapter.op_id_at(idx).to_string(),
                    task.tokens(),
                ));
            }
        }
        groups
    }
}

/// Latency of one hybrid task broken down per stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageLatency {
    /// Total per-stage latency in ms (backbone + adapters).
    pub per_stage_ms: Vec<f64>,
    /// Backbone share of each stage.
    pub backbone_ms: Vec<f64>,
    /// Adapter share of each stage.
    pub adapter_ms: Vec<f64>,
}

/// Latency contribution of one group of adapters fused at an attach point:
/// the utilization-weighted sum of member latencies, bounded below by the
/// slowest member.
pub fn adapter_group_term(
    table: &ProfileTable,
    members: &[(usize, String, u64)],
) -> PlanResult<f64> {
    let mut weighted = 0.0;
    let mut slowest = 0.0f64;
    for (_, op, tokens) in members {
        let lat = table.eval_latency(op, *tokens)?;
        let util = table.eval_utilization(op, *tokens)?;
        weighted += util * lat;
        slowest = slowest.max(lat);
    }
    Ok(weighted.max(slowest))
}

/// Per-stage latency of one hybrid task.
///
/// Backbone operators evaluate at the summed member tokens and shard across
/// the stage's GPU group; each attach point contributes the fused adapter
/// group term of its members. Communication does not appear here.
pub fn stage_latency(
    htask: &HybridTask,
    backbone: &BackboneSpec,
    table: &ProfileTable,
) -> PlanResult<StageLatency> {
    let total = htask.total_tokens();
    let groups = htask.adapter_groups();
    let mut backbone_ms = Vec::with_capacity(backbone.stages.len());
    let mut adapter_ms = Vec::with_capacity(backbone.stages.len());
    for stage in &backbone.stages {
        let mut base = 0.0;
        for op in &stage.operators {
            base += table.eval_latency(op, total)? / stage.gpu_count as f64;
        }
        let mut adapters = 0.0;
        for op in &stage.operators {
            if let Some(members) = groups.get(op) {
                adapters += adapter_group_term(table, members)?;
            }
        }
        backbone_ms.push(base);
        adapter_ms.push(adapters);
    }
    let per_stage_ms = backbone_ms
        .iter()
        .zip(&adapter_ms)
        .map(|(b, a)| b + a)
        .collect();
    Ok(StageLatency {
        per_stage_ms,
        backbone_ms,
        adapter_ms,
    })
}

/// Closed-form pipeline latency for one hybrid task running alone:
/// twice the sum of all but the last stage (fill and drain) plus
/// `2 * micro_batches` times the slowest stage (the steady phase).
pub fn pipeline_latency(stage_ms: &[f64], micro_batches: usize) -> f64 {
    if stage_ms.is_empty() {
        return 0.0;
    }
    let fill: f64 = stage_ms[..stage_ms.len() - 1].iter().sum();
    let bottleneck = stage_ms.iter().cloned().fold(f64::MIN, f64::max);
    2.0 * fill + 2.0 * micro_batches as f64 * bottleneck
}

/// Per-stage memory estimate for a set of co-resident tasks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemoryEstimate {
    /// Estimated bytes per stage (uniform split of static state plus the
    /// full activation worst case on every stage).
    pub per_stage_bytes: Vec<f64>,
    /// Largest per-stage value.
    pub peak_bytes: f64,
    /// Backbone parameter share per stage.
    pub backbone_share_bytes: f64,
    /// Gradient/optimizer share per stage.
    pub grad_share_bytes: f64,
    /// Worst-case activation bytes (all pipeline copies in flight).
    pub activation_bytes: f64,
    /// True if the peak exceeds the per-GPU limit.
    pub oom: bool,
}

/// Worst-case activation bytes for one task: one micro-batch of activations
/// replicated on every pipeline stage copy.
pub fn activation_bytes(task: &Task, num_stages: usize) -> f64 {
    task.activation_bytes_per_token as f64
        * task.micro_batch_size as f64
        * task.padded_seq_len as f64
        * num_stages as f64
}

/// Estimate per-stage memory if `tasks` share one backbone instance:
/// backbone parameters and gradient buffers split evenly across stages,
/// plus every task's worst-case activation footprint.
pub fn memory_estimate(
    tasks: &[Task],
    backbone: &BackboneSpec,
    memory_limit_per_gpu: u64,
) -> MemoryEstimate {
    let stages = backbone.num_stages.max(1);
    let grad_total: u64 = tasks.iter().map(|t| t.grad_buffer_bytes).sum();
    let backbone_share = backbone.backbone_param_bytes as f64 / stages as f64;
    let grad_share = grad_total as f64 / stages as f64;
    let activation: f64 = tasks.iter().map(|t| activation_bytes(t, stages)).sum();
    let per_stage = backbone_share + grad_share + activation;
    let per_stage_bytes = vec![per_stage; stages];
    let peak = per_stage;
    MemoryEstimate {
        per_stage_bytes,
        peak_bytes: peak,
        backbone_share_bytes: backbone_share,
        grad_share_bytes: grad_share,
        activation_bytes: activation,
        oom: peak > memory_limit_per_gpu as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profile::{OpSample, ProfileTable};
    use crate::workload::{AdapterSpec, AdapterType, StageSpec};

    fn const_op(latency: f64, utilization: f64) -> Vec<OpSample> {
        vec![
            OpSample {
                token_count: 1,
                latency_ms: latency,
                utilization,
            },
            OpSample {
                token_count: 1 << 20,
                latency_ms: latency,
                utilization,
            },
        ]
    }

    fn task_with_tokens(id: &str, tokens: u64, attach: &str, adapter_op: &str) -> Task {
        Task {
            task_id: id.to_string(),
            adapter: AdapterSpec {
                adapter_type: AdapterType::Additive,
                attach_points: vec![attach.to_string()],
                adapter_op_ids: vec![adapter_op.to_string()],
            },
            micro_batch_size: 1,
            padded_seq_len: tokens,
            seq_lengths: vec![tokens],
            activation_bytes_per_token: 0,
            grad_buffer_bytes: 0,
            tokens_per_microbatch: Some(tokens),
        }
    }

    #[test]
    fn single_op_two_gpus_no_adapter_halves_latency() {
        // one operator with t_o(n) = 10 ms on a 2-GPU stage and no adapters
        let mut table = ProfileTable::default();
        table.ops.insert("gemm".into(), const_op(10.0, 0.5));
        table.ops.insert("noop_adapter".into(), const_op(0.001, 0.0));
        let backbone = BackboneSpec {
            num_stages: 1,
            stages: vec![StageSpec {
                gpu_count: 2,
                operators: vec!["gemm".into()],
            }],
            backbone_param_bytes: 1,
        };
        // attach to a non-existent point so the adapter contributes nothing
        let mut t = task_with_tokens("a", 100, "elsewhere", "noop_adapter");
        t.adapter.attach_points = vec!["unused".into()];
        let h = HybridTask::new(0, 0, vec![t]);
        let lat = stage_latency(&h, &backbone, &table).unwrap();
        assert_eq!(lat.per_stage_ms, vec![5.0]);
    }

    #[test]
    fn adapter_term_is_weighted_sum_bounded_by_max() {
        // two member adapters, each t_a = 2 ms at u_a = 0.3:
        // weighted sum 1.2 < slowest 2.0, so the term is 2.0
        let mut table = ProfileTable::default();
        table.ops.insert("lora".into(), const_op(2.0, 0.3));
        let members = vec![
            (0usize, "lora".to_string(), 100u64),
            (1usize, "lora".to_string(), 100u64),
        ];
        let term = adapter_group_term(&table, &members).unwrap();
        assert_eq!(term, 2.0);
        // at utilization 0.9 the weighted sum 3.6 dominates
        table.ops.insert("lora".into(), const_op(2.0, 0.9));
        let term = adapter_group_term(&table, &members).unwrap();
        assert!((term - 3.6).abs() < 1e-12);
    }

    #[test]
    fn adapter_term_never_below_slowest_or_weighted_sum() {
        // randomized check of the lower bounds
        let mut seed = 0x9e3779b97f4a7c15u64;
        let mut next = || {
            seed ^= seed << 13;
            seed ^= seed >> 7;
            seed ^= seed << 17;
            (seed >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..200 {
            let mut table = ProfileTable::default();
            let n = 1 + (next() * 4.0) as usize;
            let mut members = Vec::new();
            let mut weighted = 0.0;
            let mut slowest = 0.0f64;
            for i in 0..n {
                let lat = 0.1 + next() * 5.0;
                let util = next();
                let op = format!("a{i}");
                table.ops.insert(op.clone(), const_op(lat, util));
                members.push((i, op, 64u64));
                weighted += lat * util;
                slowest = slowest.max(lat);
            }
            let term = adapter_group_term(&table, &members).unwrap();
            assert!(term + 1e-12 >= slowest);
            assert!(term + 1e-9 >= weighted);
        }
    }

    #[test]
    fn pipeline_latency_small_example() {
        // S=2 with unit stage latencies and C=4: 2*1 + 2*4*1 = 10
        assert_eq!(pipeline_latency(&[1.0, 1.0], 4), 10.0);
    }

    #[test]
    fn memory_estimate_matches_straight_line_numbers() {
        // backbone 12.4e9 bytes of static state over 4 stages plus a
        // 4.3e9-byte activation worst case = 7.4e9 per stage
        let backbone = BackboneSpec {
            num_stages: 4,
            stages: (0..4)
                .map(|_| StageSpec {
                    gpu_count: 1,
                    operators: vec!["gemm".into()],
                })
                .collect(),
            backbone_param_bytes: 12_000_000_000,
        };
        let task = Task {
            task_id: "a".into(),
            adapter: AdapterSpec {
                adapter_type: AdapterType::Additive,
                attach_points: vec!["gemm".into()],
                adapter_op_ids: vec!["lora".into()],
            },
            micro_batch_size: 1,
            padded_seq_len: 1000,
            seq_lengths: vec![1000],
            activation_bytes_per_token: 1_075_000,
            grad_buffer_bytes: 400_000_000,
            tokens_per_microbatch: None,
        };
        let est = memory_estimate(&[task], &backbone, 8_000_000_000);
        assert_eq!(est.backbone_share_bytes, 3_000_000_000.0);
        assert_eq!(est.grad_share_bytes, 100_000_000.0);
        assert_eq!(est.activation_bytes, 4_300_000_000.0);
        assert_eq!(est.peak_bytes, 7_400_000_000.0);
        assert!(!est.oom);
        let tight = memory_estimate(
            &[Task {
                grad_buffer_bytes: 400_000_000,
                ..task_with_tokens("b", 1000, "gemm", "lora")
            }],
            &backbone,
            1_000_000,
        );
        assert!(tight.oom);
    }

    #[test]
    fn memory_is_monotone_in_members() {
        let backbone = BackboneSpec {
            num_stages: 2,
            stages: (0..2)
                .map(|_| StageSpec {
                    gpu_count: 1,
                    operators: vec!["gemm".into()],
                })
                .collect(),
            backbone_param_bytes: 1 << 30,
        };
        let mut tasks = Vec::new();
        let mut prev = 0.0;
        for i in 0..6 {
            let mut t = task_with_tokens(&format!("t{i}"), 64, "gemm", "lora");
            t.activation_bytes_per_token = 512;
            t.grad_buffer_bytes = 1 << 20;
            tasks.push(t);
            let est = memory_estimate(&tasks, &backbone, u64::MAX);
            assert!(est.peak_bytes > prev);
            prev = est.peak_bytes;
        }
    }
}
