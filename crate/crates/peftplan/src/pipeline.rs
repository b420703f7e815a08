//! Pipeline template construction and a deterministic discrete-event
//! simulator for one-forward-one-backward execution of bucketed work.
//!
//! Template rules: buckets launch in descending first-stage latency, the
//! micro-batches of one bucket stay consecutive, and forwards launch
//! eagerly up to a per-stage cap derived from the memory budget. The
//! simulator dispatches greedily with ready-backwards-first priority and
//! reports makespan plus the warm-up / steady / drain decomposition
//! (steady runs from the first forward start to the last backward end on
//! the last stage).

use serde::{Deserialize, Serialize};

use crate::error::{PlanError, PlanResult};

/// Forward or backward pass of one micro-batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Forward,
    Backward,
}

/// Per-bucket input to template generation and simulation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BucketStageProfile {
    pub bucket_id: usize,
    /// Effective latency of one micro-batch at each stage; forward and
    /// backward are equal for adapter-only training.
    pub stage_ms: Vec<f64>,
    /// Activation bytes one in-flight micro-batch of this bucket holds on
    /// one stage.
    pub microbatch_activation_bytes: f64,
}

/// Static memory facts the eager-launch cap is derived from.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MemoryModel {
    /// Static bytes resident on every stage (parameter + gradient shares).
    pub static_bytes_per_stage: f64,
    /// Per-GPU budget; `None` simulates unconstrained memory.
    pub limit_bytes: Option<f64>,
}

impl MemoryModel {
    pub fn unconstrained() -> Self {
        MemoryModel {
            static_bytes_per_stage: 0.0,
            limit_bytes: None,
        }
    }
}

/// One entry of the admission order.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LaunchSlot {
    pub bucket: usize,
    pub micro_batch: usize,
    pub direction: Direction,
}

/// The launch plan the simulator executes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineTemplate {
    /// Bucket ids in launch order.
    pub bucket_order: Vec<usize>,
    /// Micro-batches per bucket.
    pub micro_batches: usize,
    /// Per-stage cap on in-flight forward activations.
    pub eager_limits: Vec<usize>,
    /// Admission order: forwards bucket-major, then the nominal backward
    /// completion order.
    pub launch_sequence: Vec<LaunchSlot>,
}

/// Build the launch template: buckets sorted by descending first-stage
/// latency (ties by bucket id), consecutive micro-batches, eager limits
/// from the memory budget. Errors if some stage cannot hold even one
/// in-flight micro-batch.
pub fn generate_template(
    profiles: &[BucketStageProfile],
    mem: &MemoryModel,
    micro_batches: usize,
) -> PlanResult<PipelineTemplate> {
    let mut order: Vec<usize> = (0..profiles.len()).map(|i| profiles[i].bucket_id).collect();
    order.sort_by(|&a, &b| {
        let la = first_stage_ms(profiles, a);
        let lb = first_stage_ms(profiles, b);
        lb.partial_cmp(&la).unwrap().then(a.cmp(&b))
    });
    template_with_order(order, profiles, mem, micro_batches)
}

/// Build a template with an explicit bucket order (for experiments such as
/// deliberately reversed launch orders). Applies the same memory-derived
/// eager limits as `generate_template`.
pub fn template_with_order(
    bucket_order: Vec<usize>,
    profiles: &[BucketStageProfile],
    mem: &MemoryModel,
    micro_batches: usize,
) -> PlanResult<PipelineTemplate> {
    if profiles.is_empty() {
        return Err(PlanError::InvalidArgument(
            "template needs at least one bucket".to_string(),
        ));
    }
    if micro_batches == 0 {
        return Err(PlanError::InvalidArgument(
            "micro_batches must be ≥1".to_string(),
        ));
    }
    let stages = profiles[0].stage_ms.len();
    if stages == 0 || profiles.iter().any(|p| p.stage_ms.len() != stages) {
        return Err(PlanError::InvalidArgument(
            "every bucket needs the same non-zero stage count".to_string(),
        ));
    }

    let total_units = bucket_order.len() * micro_batches;
    let eager = match mem.limit_bytes {
        None => total_units,
        Some(limit) => {
            let usable = limit - mem.static_bytes_per_stage;
            let per_mb = profiles
                .iter()
                .map(|p| p.microbatch_activation_bytes)
                .fold(0.0f64, f64::max);
            if per_mb <= 0.0 {
                total_units
            } else {
                let cap = (usable / per_mb).floor();
                if cap < 1.0 {
                    return Err(PlanError::InfeasibleMemory(format!(
                        "stage cannot hold one in-flight micro-batch \
                         ({:.2e} usable bytes < {:.2e} per micro-batch)",
                        usable, per_mb
                    )));
                }
                (cap as usize).min(total_units)
            }
        }
    };

    let mut launch_sequence = Vec::with_capacity(total_units * 2);
    for &bucket in &bucket_order {
        for m in 0..micro_batches {
            launch_sequence.push(LaunchSlot {
                bucket,
                micro_batch: m,
                direction: Direction::Forward,
            });
        }
    }
    for &bucket in &bucket_order {
        for m in 0..micro_batches {
            launch_sequence.push(LaunchSlot {
                bucket,
                micro_batch: m,
                direction: Direction::Backward,
            });
        }
    }

    Ok(PipelineTemplate {
        bucket_order,
        micro_batches,
        eager_limits: vec![eager; stages],
        launch_sequence,
    })
}

fn first_stage_ms(profiles: &[BucketStageProfile], bucket_id: usize) -> f64 {
    profiles
        .iter()
        .find(|p| p.bucket_id == bucket_id)
        .map(|p| p.stage_ms[0])
        .unwrap_or(0.0)
}

/// One executed pass on one stage.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StageEvent {
    pub stage: usize,
    pub bucket: usize,
    pub micro_batch: usize,
    pub direction: Direction,
    pub start_ms: f64,
    pub end_ms: f64,
}

/// Full simulated timeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineSchedule {
    /// Events per stage, in execution order.
    pub events: Vec<Vec<StageEvent>>,
    pub makespan_ms: f64,
    /// Start of the first forward on the last stage.
    pub warmup_ms: f64,
    /// First-forward start to last-backward end on the last stage.
    pub steady_ms: f64,
    /// Last-backward end on the last stage to makespan.
    pub drain_ms: f64,
}

/// Bubble accounting extracted from a schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BubbleReport {
    pub warmup_ms: f64,
    pub steady_ms: f64,
    pub drain_ms: f64,
    /// Idle time on the last stage inside the steady window.
    pub last_stage_idle_steady_ms: f64,
    /// Idle fraction across all stages between each stage's first and last
    /// event, normalized by stages × makespan. Lies in [0, 1].
    pub internal_bubble_fraction: f64,
}

#[derive(Clone, Copy, PartialEq)]
enum UnitState {
    Pending,
    Done { end: f64 },
}

/// Deterministic event-driven simulation of the template.
///
/// Dispatch rule per stage: among ready passes, backwards run before
/// forwards; ties break by bucket launch position, then micro-batch index.
/// Forwards are admitted in template order and gated by the per-stage
/// eager limit (a forward holds activation memory from its start until the
/// matching backward on that stage completes).
pub fn simulate(
    template: &PipelineTemplate,
    profiles: &[BucketStageProfile],
) -> PlanResult<PipelineSchedule> {
    let stages = profiles
        .first()
        .map(|p| p.stage_ms.len())
        .ok_or_else(|| PlanError::InvalidArgument("no buckets to simulate".to_string()))?;
    let buckets = template.bucket_order.len();
    let c = template.micro_batches;
    let latency = |pos: usize, stage: usize| -> f64 {
        let id = template.bucket_order[pos];
        profiles
            .iter()
            .find(|p| p.bucket_id == id)
            .map(|p| p.stage_ms[stage])
            .unwrap_or(0.0)
    };

    // state[dir][pos][m][s]
    let idx = |pos: usize, m: usize, s: usize| (pos * c + m) * stages + s;
    let mut fwd = vec![UnitState::Pending; buckets * c * stages];
    let mut bwd = vec![UnitState::Pending; buckets * c * stages];
    let mut stage_free = vec![0.0f64; stages];
    let mut next_fwd = vec![0usize; stages]; // admission cursor per stage
    let mut events: Vec<Vec<StageEvent>> = vec![Vec::new(); stages];

    let end_of = |u: &UnitState| match *u {
        UnitState::Done { end } => Some(end),
        UnitState::Pending => None,
    };

    let total = buckets * c * stages * 2;
    let mut dispatched = 0usize;
    while dispatched < total {
        // (time, stage, dir_rank, pos, m): the globally earliest dispatch
        let mut best: Option<(f64, usize, u8, usize, usize)> = None;
        let mut consider = |cand: (f64, usize, u8, usize, usize)| {
            let better = match &best {
                None => true,
                Some(b) => {
                    (cand.0, cand.1, cand.2, cand.3, cand.4)
                        < (b.0, b.1, b.2, b.3, b.4)
                }
            };
            if better {
                best = Some(cand);
            }
        };

        for s in 0..stages {
            // backward candidates: dependency ends known, not yet started
            for pos in 0..buckets {
                for m in 0..c {
                    if bwd[idx(pos, m, s)] != UnitState::Pending {
                        continue;
                    }
                    let dep = if s == stages - 1 {
                        end_of(&fwd[idx(pos, m, stages - 1)])
                    } else {
                        match (
                            end_of(&bwd[idx(pos, m, s + 1)]),
                            end_of(&fwd[idx(pos, m, s)]),
                        ) {
                            (Some(a), Some(b)) => Some(a.max(b)),
                            _ => None,
                        }
                    };
                    if let Some(ready) = dep {
                        consider((ready.max(stage_free[s]), s, 0, pos, m));
                    }
                }
            }
            // the single next forward in admission order
            let cursor = next_fwd[s];
            if cursor < buckets * c {
                let pos = cursor / c;
                let m = cursor % c;
                let dep = if s == 0 {
                    Some(0.0)
                } else {
                    end_of(&fwd[idx(pos, m, s - 1)])
                };
                if let Some(ready) = dep {
                    let t0 = ready.max(stage_free[s]);
                    // memory gate: in-flight forwards at time t0
                    let limit = template.eager_limits[s];
                    let mut started = 0usize;
                    let mut freed = 0usize;
                    let mut pending_ends: Vec<f64> = Vec::new();
                    for p2 in 0..buckets {
                        for m2 in 0..c {
                            match fwd[idx(p2, m2, s)] {
                                UnitState::Pending => {}
                                _ => started += 1,
                            }
                            if let Some(endb) = end_of(&bwd[idx(p2, m2, s)]) {
                                if endb <= t0 {
                                    freed += 1;
                                } else {
                                    pending_ends.push(endb);
                                }
                            }
                        }
                    }
                    let in_flight = started - freed;
                    if in_flight < limit {
                        consider((t0, s, 1, pos, m));
                    } else {
                        // wait for enough backwards to complete
                        let need = in_flight - limit + 1;
                        if pending_ends.len() >= need {
                            pending_ends
                                .sort_by(|a, b| a.partial_cmp(b).unwrap());
                            let t = pending_ends[need - 1].max(t0);
                            consider((t, s, 1, pos, m));
                        }
                        // otherwise a future backward dispatch unblocks us
                    }
                }
            }
        }

        let (t, s, dir, pos, m) =
            best.ok_or_else(|| PlanError::InvalidArgument("simulation deadlock".to_string()))?;
        let d = latency(pos, s);
        let end = t + d;
        let state = UnitState::Done { end };
        if dir == 0 {
            bwd[idx(pos, m, s)] = state;
        } else {
            fwd[idx(pos, m, s)] = state;
            next_fwd[s] += 1;
        }
        stage_free[s] = end;
        events[s].push(StageEvent {
            stage: s,
            bucket: template.bucket_order[pos],
            micro_batch: m,
            direction: if dir == 0 {
                Direction::Backward
            } else {
                Direction::Forward
            },
            start_ms: t,
            end_ms: end,
        });
        dispatched += 1;
    }

    let makespan = events
        .iter()
        .flat_map(|es| es.iter().map(|e| e.end_ms))
        .fold(0.0f64, f64::max);
    let last = stages - 1;
    let first_fwd_start = events[last]
        .iter()
        .find(|e| e.direction == Direction::Forward)
        .map(|e| e.start_ms)
        .unwrap_or(0.0);
    let last_bwd_end = events[last]
        .iter()
        .filter(|e| e.direction == Direction::Backward)
        .map(|e| e.end_ms)
        .fold(0.0f64, f64::max);
    Ok(PipelineSchedule {
        events,
        makespan_ms: makespan,
        warmup_ms: first_fwd_start,
        steady_ms: last_bwd_end - first_fwd_start,
        drain_ms: makespan - last_bwd_end,
    })
}

/// True iff the last stage never idles between its first forward start and
/// its last backward end. On violation returns the first idle interval.
pub fn check_last_stage_busy(schedule: &PipelineSchedule) -> (bool, Option<(f64, f64)>) {
    let last = schedule.events.len() - 1;
    let events = &schedule.events[last];
    let window_end = schedule.warmup_ms + schedule.steady_ms;
    let mut cursor: Option<f64> = None;
    for e in events {
        if e.start_ms >= window_end {
            break;
        }
        if let Some(prev_end) = cursor {
            if e.start_ms > prev_end {
                return (false, Some((prev_end, e.start_ms)));
            }
        }
        cursor = Some(cursor.unwrap_or(e.end_ms).max(e.end_ms));
    }
    (true, None)
}

/// Steady-phase dominance: steady time over warm-up plus drain. `None` for
/// single-stage pipelines, which have neither warm-up nor drain.
pub fn steady_dominance_ratio(schedule: &PipelineSchedule) -> Option<f64> {
    if schedule.events.len() <= 1 {
        return None;
    }
    Some(schedule.steady_ms / (schedule.warmup_ms + schedule.drain_ms))
}

/// Extract bubble accounting from a schedule.
pub fn bubble_report(schedule: &PipelineSchedule) -> BubbleReport {
    let last = schedule.events.len() - 1;
    let steady_start = schedule.warmup_ms;
    let steady_end = schedule.warmup_ms + schedule.steady_ms;
    let mut last_idle = 0.0;
    let mut cursor = steady_start;
    for e in &schedule.events[last] {
        if e.end_ms <= steady_start || e.start_ms >= steady_end {
            continue;
        }
        if e.start_ms > cursor {
            last_idle += e.start_ms - cursor;
        }
        cursor = cursor.max(e.end_ms);
    }

    let mut idle_total = 0.0;
    for es in &schedule.events {
        if es.is_empty() {
            continue;
        }
        let first = es.first().unwrap().start_ms;
        let lastt = es.last().unwrap().end_ms;
        let busy: f64 = es.iter().map(|e| e.end_ms - e.start_ms).sum();
        idle_total += (lastt - first) - busy;
    }
    let denom = schedule.events.len() as f64 * schedule.makespan_ms;
    BubbleReport {
        warmup_ms: schedule.warmup_ms,
        steady_ms: schedule.steady_ms,
        drain_ms: schedule.drain_ms,
        last_stage_idle_steady_ms: last_idle,
        internal_bubble_fraction: if denom > 0.0 { idle_total / denom } else { 0.0 },
    }
}

/// Uniform per-stage profile helper: one bucket with the same latency at
/// every stage.
pub fn uniform_bucket(bucket_id: usize, latency_ms: f64, stages: usize) -> BucketStageProfile {
    BucketStageProfile {
        bucket_id,
        stage_ms: vec![latency_ms; stages],
        microbatch_activation_bytes: 0.0,
    }
}
