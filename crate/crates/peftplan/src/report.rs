//! Plan reports and row exports.
//!
//! A `PlanReport` is a self-contained JSON document: it embeds the launch
//! template and bucket profiles the simulator consumes, so the schedule,
//! makespan and bubble figures can be recomputed from the report alone and
//! checked against the embedded numbers.

use serde::{Deserialize, Serialize};

use crate::alignment::LayoutStats;
use crate::error::{PlanError, PlanResult};
use crate::overlap::{StagePlan, SubgraphKind};
use crate::pipeline::{
    BubbleReport, BucketStageProfile, Direction, MemoryModel, PipelineSchedule, PipelineTemplate,
};
use crate::workload::Workload;

/// One hybrid task of the fusion plan, by member task ids.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HtaskSummary {
    pub index: usize,
    /// Range in the token-sorted task order.
    pub first: usize,
    pub last: usize,
    pub member_ids: Vec<String>,
    pub total_tokens: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusionSummary {
    pub objective_ms: f64,
    pub htasks: Vec<HtaskSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupingSummary {
    pub chosen_buckets: usize,
    /// Bucket label per hybrid task.
    pub assignment: Vec<usize>,
    /// Balancing quantity per bucket (sum of first-stage latencies).
    pub bucket_l1_ms: Vec<f64>,
    /// (bucket count, simulated makespan) for every feasible count tried.
    pub latency_curve: Vec<(usize, f64)>,
}

/// One aligned chunk, exportable as a delimited row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChunkRow {
    pub chunk_id: usize,
    pub htask: usize,
    pub task: String,
    pub pack: usize,
    pub offset: u64,
    pub valid_tokens: u64,
    pub pad_tokens: u64,
    pub depends_on: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentSummary {
    pub htask: usize,
    pub chunk_size: u64,
    pub forced_padding: bool,
    pub stats: LayoutStats,
    pub chunk_rows: Vec<ChunkRow>,
}

/// Chunked layout vs. the pad-to-global-maximum baseline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EffectiveTokens {
    pub chunked: LayoutStats,
    pub zero_pad: LayoutStats,
    pub chunked_fraction: f64,
    pub zero_pad_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimSummary {
    pub makespan_ms: f64,
    pub warmup_ms: f64,
    pub steady_ms: f64,
    pub drain_ms: f64,
    pub steady_dominance_ratio: Option<f64>,
    pub bubble: BubbleReport,
}

/// One subgraph launch on one stage of one bucket.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubgraphRow {
    pub bucket: usize,
    pub stage: usize,
    /// Position in the launch order.
    pub order: usize,
    pub subgraph_id: usize,
    pub owner: String,
    pub kind: String,
    pub launch_t_ms: f64,
    pub duration_ms: f64,
    /// "compute" or "comm".
    pub channel: String,
}

/// The complete planning artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanReport {
    /// Input echo, so the report can be re-planned or audited.
    pub workload: Workload,
    /// Task ids in the token-sorted order hybrid-task ranges refer to.
    pub sorted_task_ids: Vec<String>,
    pub fusion: FusionSummary,
    pub grouping: GroupingSummary,
    pub memory: MemoryModel,
    /// Everything the pipeline simulator needs to reproduce the schedule.
    pub template: PipelineTemplate,
    pub bucket_profiles: Vec<BucketStageProfile>,
    pub simulated: SimSummary,
    pub subgraph_rows: Vec<SubgraphRow>,
    pub alignment: Vec<AlignmentSummary>,
    pub effective_tokens: EffectiveTokens,
    pub planner_wall_clock_s: f64,
}

impl PlanReport {
    pub fn to_json(&self) -> PlanResult<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> PlanResult<PlanReport> {
        serde_json::from_str(text).map_err(|e| PlanError::Parse {
            line: e.line(),
            message: format!("plan report: {e}"),
        })
    }
}

fn direction_label(d: Direction) -> &'static str {
    match d {
        Direction::Forward => "F",
        Direction::Backward => "B",
    }
}

/// Flatten a simulated timeline into delimited rows:
/// `stage, bucket, microbatch, direction, start_ms, end_ms`.
pub fn render_gantt(schedule: &PipelineSchedule) -> String {
    let mut out = String::from("stage, bucket, microbatch, direction, start_ms, end_ms\n");
    for stage in &schedule.events {
        for e in stage {
            out.push_str(&format!(
                "{}, {}, {}, {}, {:.6}, {:.6}\n",
                e.stage,
                e.bucket,
                e.micro_batch,
                direction_label(e.direction),
                e.start_ms,
                e.end_ms
            ));
        }
    }
    out
}

/// Number of rows `render_gantt` emits.
pub fn gantt_row_count(schedule: &PipelineSchedule) -> usize {
    schedule.events.iter().map(Vec::len).sum()
}

fn kind_label(kind: SubgraphKind) -> &'static str {
    match kind {
        SubgraphKind::Chain => "chain",
        SubgraphKind::Adapter => "adapter",
        SubgraphKind::FusedAdapter => "fused_adapter",
    }
}

/// Launch-order rows (compute blocks and trailing collectives) for one
/// stage's plan.
pub fn subgraph_rows(bucket: usize, stage: usize, plan: &StagePlan) -> Vec<SubgraphRow> {
    let mut rows = Vec::new();
    for (order, entry) in plan.schedule.entries.iter().enumerate() {
        let sg = &plan.graph.subgraphs[entry.subgraph];
        let (bs, be) = plan.timing.block[entry.subgraph];
        rows.push(SubgraphRow {
            bucket,
            stage,
            order,
            subgraph_id: sg.id,
            owner: sg.owner.clone(),
            kind: kind_label(sg.kind).to_string(),
            launch_t_ms: bs,
            duration_ms: be - bs,
            channel: "compute".to_string(),
        });
        if let Some((cs, ce)) = plan.timing.comm[entry.subgraph] {
            rows.push(SubgraphRow {
                bucket,
                stage,
                order,
                subgraph_id: sg.id,
                owner: sg.owner.clone(),
                kind: kind_label(sg.kind).to_string(),
                launch_t_ms: cs,
                duration_ms: ce - cs,
                channel: "comm".to_string(),
            });
        }
    }
    rows
}

/// Delimited rendering of subgraph launch rows.
pub fn render_subgraph_rows(rows: &[SubgraphRow]) -> String {
    let mut out = String::from(
        "bucket, stage, order, subgraph_id, owner, kind, launch_t_ms, duration_ms, channel\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{}, {}, {}, {}, {}, {}, {:.6}, {:.6}, {}\n",
            r.bucket,
            r.stage,
            r.order,
            r.subgraph_id,
            r.owner,
            r.kind,
            r.launch_t_ms,
            r.duration_ms,
            r.channel
        ));
    }
    out
}

/// Delimited rendering of chunk layout rows:
/// `chunk_id, htask, task, pack, offset, valid_tokens, pad_tokens, depends_on`.
pub fn render_chunk_rows(report: &PlanReport) -> String {
    let mut out =
        String::from("chunk_id, htask, task, pack, offset, valid_tokens, pad_tokens, depends_on\n");
    for a in &report.alignment {
        for r in &a.chunk_rows {
            let dep = r
                .depends_on
                .map(|d| d.to_string())
                .unwrap_or_else(|| "-".to_string());
            out.push_str(&format!(
                "{}, {}, {}, {}, {}, {}, {}, {}\n",
                r.chunk_id, r.htask, r.task, r.pack, r.offset, r.valid_tokens, r.pad_tokens, dep
            ));
        }
    }
    out
}

/// Short human-readable digest of a plan.
pub fn render_summary(report: &PlanReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "tasks={} htasks={} buckets={} micro_batches={}\n",
        report.workload.tasks.len(),
        report.fusion.htasks.len(),
        report.grouping.chosen_buckets,
        report.template.micro_batches
    ));
    out.push_str(&format!(
        "fusion objective_ms={:.6}\n",
        report.fusion.objective_ms
    ));
    out.push_str(&format!(
        "simulated makespan_ms={:.6} warmup_ms={:.6} steady_ms={:.6} drain_ms={:.6}\n",
        report.simulated.makespan_ms,
        report.simulated.warmup_ms,
        report.simulated.steady_ms,
        report.simulated.drain_ms
    ));
    out.push_str(&format!(
        "last_stage_idle_steady_ms={:.6} internal_bubble_fraction={:.6}\n",
        report.simulated.bubble.last_stage_idle_steady_ms,
        report.simulated.bubble.internal_bubble_fraction
    ));
    out.push_str(&format!(
        "effective tokens: chunked_fraction={:.6} zero_pad_fraction={:.6}\n",
        report.effective_tokens.chunked_fraction, report.effective_tokens.zero_pad_fraction
    ));
    for (p, ms) in &report.grouping.latency_curve {
        out.push_str(&format!("curve: buckets={p} makespan_ms={ms:.6}\n"));
    }
    out.push_str(&format!(
        "planner_wall_clock_s={:.3}\n",
        report.planner_wall_clock_s
    ));
    out
}
