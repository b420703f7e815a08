//! Planning and simulation for co-scheduling many parameter-efficient
//! fine-tuning tasks on one shared, frozen backbone model.
//!
//! The pipeline of decisions:
//!
//! 1. [`workload`] — describe the backbone, the tasks and the planner knobs;
//!    validate and token-sort the tasks.
//! 2. [`fusion`] — partition the sorted tasks into contiguous hybrid tasks
//!    (spatially batched groups) by dynamic programming over a measured
//!    cost model ([`cost`], [`profile`]).
//! 3. [`grouping`] — balance hybrid tasks into buckets and pick the bucket
//!    count whose simulated iteration is fastest.
//! 4. [`overlap`] — inside one stage, segment each hybrid task's operator
//!    DAG into subgraphs, fuse compatible adapters, and interleave the
//!    subgraphs so collectives hide behind other tasks' compute.
//! 5. [`pipeline`] — order buckets into a two-phase launch template and
//!    simulate the full 1F1B pipeline under a memory-bounded eager cap.
//! 6. [`alignment`] — pack sequences and split them into shared fixed-size
//!    chunks, trading cross-task padding for per-task chunk padding.
//! 7. [`replay`] — replay task-arrival traces against a simulated cluster
//!    in dedicated or multiplexed mode.
//!
//! [`plan`] runs steps 1–6 and assembles a self-contained [`report::PlanReport`].

pub mod alignment;
pub mod cost;
pub mod error;
pub mod fusion;
pub mod grouping;
pub mod isolation;
pub mod overlap;
pub mod pipeline;
pub mod profile;
pub mod replay;
pub mod report;
pub mod workload;

use error::{PlanError, PlanResult};
use report::{
    AlignmentSummary, ChunkRow, EffectiveTokens, FusionSummary, GroupingSummary, HtaskSummary,
    PlanReport, SimSummary,
};

/// Run the full planning pipeline on a workload and produce a
/// self-contained report.
pub fn plan(
    workload: &workload::Workload,
    table: &profile::ProfileTable,
) -> PlanResult<PlanReport> {
    let started = std::time::Instant::now();

    let validation = workload::validate_workload(workload, table);
    if !validation.accepted {
        return Err(PlanError::InvalidWorkload(validation.error_summary()));
    }

    let sorted = workload::sort_by_tokens(&workload.tasks);
    let fusion_plan = fusion::fuse_tasks(&sorted, &workload.backbone, table, &workload.planner)?;
    let selection = grouping::select_grouping(
        &fusion_plan.htasks,
        &workload.backbone,
        table,
        &workload.planner,
    )?;

    // Chunk alignment per hybrid task, plus the zero-pad baseline over the
    // whole workload for comparison.
    let mut alignment_summaries = Vec::with_capacity(fusion_plan.htasks.len());
    let mut chunked_total = alignment::LayoutStats::default();
    for (hi, htask) in fusion_plan.htasks.iter().enumerate() {
        let choice = alignment::choose_chunk_size(&htask.members, workload.planner.chunk_min)?;
        let mut packs = Vec::new();
        for task in &htask.members {
            packs.extend(alignment::pack_sequences(task)?);
        }
        let layout = alignment::chunk_partition(
            &packs,
            &htask.members,
            choice.chunk_size,
            workload.planner.chunk_min,
        )?;
        chunked_total.original_tokens += layout.stats.original_tokens;
        chunked_total.intra_task_pad += layout.stats.intra_task_pad;
        chunked_total.inter_task_pad += layout.stats.inter_task_pad;
        let chunk_rows = layout
            .chunks
            .iter()
            .map(|c| ChunkRow {
                chunk_id: c.chunk_id,
                htask: hi,
                task: c.task.clone(),
                pack: c.pack,
                offset: c.offset,
                valid_tokens: c.valid_tokens,
                pad_tokens: c.pad_tokens,
                depends_on: c.depends_on,
            })
            .collect();
        alignment_summaries.push(AlignmentSummary {
            htask: hi,
            chunk_size: choice.chunk_size,
            forced_padding: choice.forced_padding,
            stats: layout.stats,
            chunk_rows,
        });
    }
    let zero_pad = alignment::zero_pad_layout(&sorted)?;
    let effective_tokens = EffectiveTokens {
        chunked_fraction: alignment::effective_fraction(&chunked_total),
        zero_pad_fraction: alignment::effective_fraction(&zero_pad),
        chunked: chunked_total,
        zero_pad,
    };

    let mut subgraph_rows = Vec::new();
    for bucket in &selection.buckets {
        for (stage_idx, stage_plan) in bucket.stages.iter().enumerate() {
            subgraph_rows.extend(report::subgraph_rows(bucket.id, stage_idx, stage_plan));
        }
    }

    let htask_summaries = fusion_plan
        .htasks
        .iter()
        .enumerate()
        .map(|(i, h)| HtaskSummary {
            index: i,
            first: h.first,
            last: h.last,
            member_ids: h.members.iter().map(|t| t.task_id.clone()).collect(),
            total_tokens: h.total_tokens(),
        })
        .collect();

    let bucket_l1_ms = selection.buckets.iter().map(|b| b.l1_sum_ms).collect();
    let bubble = pipeline::bubble_report(&selection.schedule);
    let simulated = SimSummary {
        makespan_ms: selection.schedule.makespan_ms,
        warmup_ms: selection.schedule.warmup_ms,
        steady_ms: selection.schedule.steady_ms,
        drain_ms: selection.schedule.drain_ms,
        steady_dominance_ratio: pipeline::steady_dominance_ratio(&selection.schedule),
        bubble,
    };

    Ok(PlanReport {
        workload: workload.clone(),
        sorted_task_ids: sorted.iter().map(|t| t.task_id.clone()).collect(),
        fusion: FusionSummary {
            objective_ms: fusion_plan.objective_ms,
            htasks: htask_summaries,
        },
        grouping: GroupingSummary {
            chosen_buckets: selection.chosen_buckets,
            assignment: selection.assignment.clone(),
            bucket_l1_ms,
            latency_curve: selection.latency_curve.clone(),
        },
        memory: grouping::memory_model(&fusion_plan.htasks, &workload.backbone, &workload.planner),
        template: selection.template.clone(),
        bucket_profiles: selection
            .buckets
            .iter()
            .map(|b| b.profile.clone())
            .collect(),
        simulated,
        subgraph_rows,
        alignment: alignment_summaries,
        effective_tokens,
        planner_wall_clock_s: started.elapsed().as_secs_f64(),
    })
}

/// Re-run the pipeline simulator from a report's embedded template and
/// profiles; the result must reproduce the report's simulated figures.
pub fn resimulate(report: &PlanReport) -> PlanResult<pipeline::PipelineSchedule> {
    pipeline::simulate(&report.template, &report.bucket_profiles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profile::test_table;
    use crate::workload::fixtures::small_workload;

    #[test]
    fn plan_produces_a_self_consistent_report() {
        let w = small_workload();
        let table = test_table();
        let report = plan(&w, &table).unwrap();

        // the embedded template and profiles reproduce the embedded figures
        let schedule = resimulate(&report).unwrap();
        assert_eq!(schedule.makespan_ms, report.simulated.makespan_ms);
        assert_eq!(schedule.warmup_ms, report.simulated.warmup_ms);
        assert_eq!(schedule.steady_ms, report.simulated.steady_ms);
        assert_eq!(schedule.drain_ms, report.simulated.drain_ms);

        // gantt rows: one forward + one backward per stage, micro-batch
        // and bucket
        let rows = report::gantt_row_count(&schedule);
        let stages = w.backbone.num_stages;
        let buckets = report.grouping.chosen_buckets;
        assert_eq!(
            rows,
            2 * w.planner.micro_batch_count * buckets * stages
        );

        // every task appears in exactly one hybrid task
        let mut seen: Vec<&String> = report
            .fusion
            .htasks
            .iter()
            .flat_map(|h| h.member_ids.iter())
            .collect();
        seen.sort();
        assert_eq!(seen.len(), w.tasks.len());

        // chunk alignment conserves raw tokens
        let raw: u64 = w
            .tasks
            .iter()
            .flat_map(|t| t.seq_lengths.iter().map(|&l| l.min(t.padded_seq_len)))
            .sum();
        assert_eq!(report.effective_tokens.chunked.original_tokens, raw);
        assert_eq!(report.effective_tokens.zero_pad.original_tokens, raw);
    }

    #[test]
    fn report_round_trips_through_json() {
        let w = small_workload();
        let table = test_table();
        let report = plan(&w, &table).unwrap();
        let text = report.to_json().unwrap();
        let back = PlanReport::from_json(&text).unwrap();
        assert_eq!(back.simulated.makespan_ms, report.simulated.makespan_ms);
        let re = resimulate(&back).unwrap();
        assert_eq!(re.makespan_ms, report.simulated.makespan_ms);
    }

    #[test]
    fn invalid_workloads_are_rejected_up_front() {
        let mut w = small_workload();
        w.tasks.clear();
        let err = plan(&w, &test_table()).unwrap_err();
        assert!(matches!(err, PlanError::InvalidWorkload(_)));
    }
}
