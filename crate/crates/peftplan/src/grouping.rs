//! Bucket grouping: split hybrid tasks into a fixed number of buckets so
//! the per-bucket first-stage latency sums are as balanced as possible
//! (minimum variance around the mean), then pick the bucket count whose
//! simulated pipeline run is fastest.
//!
//! Up to twelve hybrid tasks the partition is exact via enumeration of
//! restricted growth strings with sum-of-squares pruning; larger inputs use
//! longest-processing-time seeding plus best-improving move/swap local
//! search. Ties always resolve to the lexicographically smallest
//! assignment vector.

use serde::{Deserialize, Serialize};

use crate::cost::{self, HybridTask};
use crate::error::{PlanError, PlanResult};
use crate::overlap::{build_stage_dag, plan_stage, DagMeta, StagePlan};
use crate::pipeline::{
    generate_template, simulate, BucketStageProfile, MemoryModel, PipelineSchedule,
    PipelineTemplate,
};
use crate::profile::ProfileTable;
use crate::workload::{BackboneSpec, PlannerConfig};

/// Largest input for which the partition search is exhaustive.
pub const EXACT_GROUPING_LIMIT: usize = 12;

/// Assign each item (a hybrid task with first-stage latency `l1[i]`) to one
/// of `buckets` labels, minimizing the variance of per-bucket latency sums.
/// Every bucket is non-empty. Returns the assignment vector in restricted
/// growth form (first occurrences of labels appear in ascending order).
pub fn group_htasks(l1: &[f64], buckets: usize) -> PlanResult<Vec<usize>> {
    let n = l1.len();
    if buckets == 0 || buckets > n {
        return Err(PlanError::InvalidArgument(format!(
            "bucket count {buckets} must lie in 1..={n}"
        )));
    }
    if l1.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(PlanError::InvalidArgument(
            "latencies must be finite and non-negative".to_string(),
        ));
    }
    if n <= EXACT_GROUPING_LIMIT {
        Ok(exact_partition(l1, buckets))
    } else {
        Ok(heuristic_partition(l1, buckets))
    }
}

/// Variance-style objective of an assignment: Σ_j (sum_j − mean)².
pub fn balance_objective(l1: &[f64], assignment: &[usize], buckets: usize) -> f64 {
    let mut sums = vec![0.0f64; buckets];
    for (i, &b) in assignment.iter().enumerate() {
        sums[b] += l1[i];
    }
    let mean: f64 = l1.iter().sum::<f64>() / buckets as f64;
    sums.iter().map(|s| (s - mean) * (s - mean)).sum()
}

/// Materialize bucket member lists from an assignment vector.
pub fn buckets_from_assignment(assignment: &[usize]) -> Vec<Vec<usize>> {
    let buckets = assignment.iter().copied().max().map_or(0, |m| m + 1);
    let mut out = vec![Vec::new(); buckets];
    for (i, &b) in assignment.iter().enumerate() {
        out[b].push(i);
    }
    out
}

fn exact_partition(l1: &[f64], p: usize) -> Vec<usize> {
    struct Search<'a> {
        l1: &'a [f64],
        n: usize,
        p: usize,
        sums: Vec<f64>,
        cur: Vec<usize>,
        best_sq: f64,
        best: Vec<usize>,
    }
    // enumerate restricted growth strings in lexicographic order so the
    // first optimum found is the lexicographically smallest
    fn walk(s: &mut Search, idx: usize, used: usize, partial_sq: f64) {
        if idx == s.n {
            if used == s.p && partial_sq < s.best_sq {
                s.best_sq = partial_sq;
                s.best = s.cur.clone();
            }
            return;
        }
        let remaining = s.n - idx;
        let top = used.min(s.p - 1);
        for label in 0..=top {
            let new_used = if label == used { used + 1 } else { used };
            // every still-unopened label needs one of the remaining items
            if remaining - 1 < s.p - new_used {
                continue;
            }
            let old = s.sums[label];
            let new = old + s.l1[idx];
            let nsq = partial_sq - old * old + new * new;
            // item weights are non-negative, so the square sum never shrinks
            if nsq >= s.best_sq {
                continue;
            }
            s.sums[label] = new;
            s.cur.push(label);
            walk(s, idx + 1, new_used, nsq);
            s.cur.pop();
            s.sums[label] = old;
        }
    }

    let n = l1.len();
    let mut s = Search {
        l1,
        n,
        p,
        sums: vec![0.0; p],
        cur: Vec::with_capacity(n),
        best_sq: f64::INFINITY,
        best: Vec::new(),
    };
    walk(&mut s, 0, 0, 0.0);
    debug_assert_eq!(s.best.len(), n);
    s.best
}

fn heuristic_partition(l1: &[f64], p: usize) -> Vec<usize> {
    let n = l1.len();
    // longest-processing-time seed
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| l1[b].partial_cmp(&l1[a]).unwrap().then(a.cmp(&b)));
    let mut assign = vec![0usize; n];
    let mut load = vec![0.0f64; p];
    let mut count = vec![0usize; p];
    for &i in &order {
        let mut target = 0usize;
        for j in 1..p {
            if load[j] < load[target] {
                target = j;
            }
        }
        assign[i] = target;
        load[target] += l1[i];
        count[target] += 1;
    }

    // best-improving local search over single moves and pairwise swaps
    let sq = |x: f64| x * x;
    for _ in 0..10_000 {
        let mut best_delta = 0.0f64;
        enum Action {
            Move(usize, usize),
            Swap(usize, usize),
        }
        let mut action: Option<Action> = None;
        for i in 0..n {
            let from = assign[i];
            if count[from] == 1 {
                continue; // buckets stay non-empty
            }
            for to in 0..p {
                if to == from {
                    continue;
                }
                let delta = sq(load[from] - l1[i]) + sq(load[to] + l1[i])
                    - sq(load[from])
                    - sq(load[to]);
                if delta < best_delta {
                    best_delta = delta;
                    action = Some(Action::Move(i, to));
                }
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let (a, b) = (assign[i], assign[j]);
                if a == b {
                    continue;
                }
                let delta = sq(load[a] - l1[i] + l1[j]) + sq(load[b] - l1[j] + l1[i])
                    - sq(load[a])
                    - sq(load[b]);
                if delta < best_delta {
                    best_delta = delta;
                    action = Some(Action::Swap(i, j));
                }
            }
        }
        match action {
            None => break,
            Some(Action::Move(i, to)) => {
                let from = assign[i];
                load[from] -= l1[i];
                count[from] -= 1;
                load[to] += l1[i];
                count[to] += 1;
                assign[i] = to;
            }
            Some(Action::Swap(i, j)) => {
                let (a, b) = (assign[i], assign[j]);
                load[a] += l1[j] - l1[i];
                load[b] += l1[i] - l1[j];
                assign[i] = b;
                assign[j] = a;
            }
        }
    }
    canonicalize(&assign)
}

/// Relabel an assignment into restricted growth form (labels numbered by
/// first occurrence).
fn canonicalize(assignment: &[usize]) -> Vec<usize> {
    let mut map: Vec<Option<usize>> = vec![None; assignment.len()];
    let mut next = 0usize;
    assignment
        .iter()
        .map(|&b| {
            *map[b].get_or_insert_with(|| {
                let v = next;
                next += 1;
                v
            })
        })
        .collect()
}

/// One bucket of the chosen grouping with its orchestration artifacts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BucketPlan {
    pub id: usize,
    /// Indices into the fusion plan's hybrid-task list.
    pub htasks: Vec<usize>,
    /// Sum of member first-stage latencies (the balancing quantity).
    pub l1_sum_ms: f64,
    /// Effective per-stage latency fed to the pipeline engine.
    pub profile: BucketStageProfile,
    /// Per-stage subgraph schedules.
    pub stages: Vec<StagePlan>,
}

/// Outcome of bucket-count selection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupingSelection {
    pub chosen_buckets: usize,
    pub assignment: Vec<usize>,
    pub buckets: Vec<BucketPlan>,
    pub template: PipelineTemplate,
    pub schedule: PipelineSchedule,
    pub makespan_ms: f64,
    /// (bucket count, simulated makespan) for every feasible count tried.
    pub latency_curve: Vec<(usize, f64)>,
}

/// Static memory facts the pipeline's eager-launch cap is computed from:
/// parameter and gradient state split evenly across stages, plus the
/// configured per-GPU budget (`u64::MAX` means unconstrained).
pub fn memory_model(
    htasks: &[HybridTask],
    backbone: &BackboneSpec,
    planner: &PlannerConfig,
) -> MemoryModel {
    let stages = backbone.num_stages.max(1);
    let grad_total: f64 = htasks
        .iter()
        .flat_map(|h| h.members.iter())
        .map(|t| t.grad_buffer_bytes as f64)
        .sum();
    MemoryModel {
        static_bytes_per_stage: (backbone.backbone_param_bytes as f64 + grad_total)
            / stages as f64,
        limit_bytes: if planner.memory_limit_per_gpu == u64::MAX {
            None
        } else {
            Some(planner.memory_limit_per_gpu as f64)
        },
    }
}

/// Group hybrid tasks for every candidate bucket count, simulate each
/// grouping end to end, and keep the fastest (ties prefer fewer buckets).
pub fn select_grouping(
    htasks: &[HybridTask],
    backbone: &BackboneSpec,
    table: &ProfileTable,
    planner: &PlannerConfig,
) -> PlanResult<GroupingSelection> {
    if htasks.is_empty() {
        return Err(PlanError::InvalidArgument(
            "select_grouping needs at least one hybrid task".to_string(),
        ));
    }
    let n = htasks.len();
    let stages = backbone.num_stages.max(1);

    let mut l1 = Vec::with_capacity(n);
    for h in htasks {
        let lat = cost::stage_latency(h, backbone, table)?;
        l1.push(lat.per_stage_ms[0]);
    }

    let mem = memory_model(htasks, backbone, planner);

    let max_p = planner.max_buckets.unwrap_or(n).min(n).max(1);
    let mut best: Option<GroupingSelection> = None;
    let mut curve: Vec<(usize, f64)> = Vec::new();
    let mut last_err: Option<PlanError> = None;

    for p in 1..=max_p {
        let assignment = group_htasks(&l1, p)?;
        let members = buckets_from_assignment(&assignment);

        let mut buckets = Vec::with_capacity(p);
        let mut profiles = Vec::with_capacity(p);
        let mut failed = None;
        for (bucket_id, bucket_htasks) in members.iter().enumerate() {
            let mut dags = Vec::with_capacity(bucket_htasks.len());
            let mut meta = Vec::with_capacity(bucket_htasks.len());
            let mut stage_plans = Vec::with_capacity(stages);
            let mut stage_ms = Vec::with_capacity(stages);
            for s in 0..stages {
                dags.clear();
                meta.clear();
                for &hi in bucket_htasks {
                    dags.push(build_stage_dag(
                        &format!("h{hi}"),
                        &htasks[hi],
                        backbone,
                        s,
                        table,
                    )?);
                    meta.push(DagMeta {
                        bucket_id,
                        single_task: htasks[hi].members.len() == 1,
                    });
                }
                match plan_stage(&dags, &meta) {
                    Ok(plan) => {
                        stage_ms.push(plan.latency_ms);
                        stage_plans.push(plan);
                    }
                    Err(e) => {
                        failed = Some(e);
                        break;
                    }
                }
            }
            if failed.is_some() {
                break;
            }
            let activation_per_mb: f64 = bucket_htasks
                .iter()
                .flat_map(|&hi| htasks[hi].members.iter())
                .map(|t| {
                    t.activation_bytes_per_token as f64
                        * t.micro_batch_size as f64
                        * t.padded_seq_len as f64
                })
                .sum();
            profiles.push(BucketStageProfile {
                bucket_id,
                stage_ms: stage_ms.clone(),
                microbatch_activation_bytes: activation_per_mb,
            });
            buckets.push(BucketPlan {
                id: bucket_id,
                htasks: bucket_htasks.clone(),
                l1_sum_ms: bucket_htasks.iter().map(|&hi| l1[hi]).sum(),
                profile: profiles.last().unwrap().clone(),
                stages: stage_plans,
            });
        }
        if let Some(e) = failed {
            return Err(e);
        }

        let template = match generate_template(&profiles, &mem, planner.micro_batch_count) {
            Ok(t) => t,
            Err(e @ PlanError::InfeasibleMemory(_)) => {
                // more buckets shrink the per-micro-batch footprint; try them
                last_err = Some(e);
                continue;
            }
            Err(e) => return Err(e),
        };
        let schedule = simulate(&template, &profiles)?;
        let makespan = schedule.makespan_ms;
        curve.push((p, makespan));
        let better = match &best {
            None => true,
            Some(b) => makespan < b.makespan_ms,
        };
        if better {
            best = Some(GroupingSelection {
                chosen_buckets: p,
                assignment,
                buckets,
                template,
                schedule,
                makespan_ms: makespan,
                latency_curve: Vec::new(),
            });
        }
    }

    match best {
        Some(mut sel) => {
            sel.latency_curve = curve;
            Ok(sel)
        }
        None => Err(last_err.unwrap_or_else(|| {
            PlanError::InfeasibleMemory("no feasible bucket count".to_string())
        })),
    }
}
