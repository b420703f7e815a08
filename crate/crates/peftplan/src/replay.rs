//! Trace-driven cluster simulation: tasks arrive over time, are dispatched
//! first-come-first-served onto backbone instances, and train until a token
//! budget runs out. Dedicated mode gives every task its own instance;
//! multiplexed mode folds a task into an in-flight instance of the same
//! backbone whenever the memory model allows, re-running the full planner
//! on every join and leave.
//!
//! Progress is fluid: between events each resident task earns tokens at the
//! rate its instance's current plan sustains, so co-scheduling directly
//! changes completion times. Everything is deterministic given the trace.

use std::collections::VecDeque;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{PlanError, PlanResult};
use crate::fusion::fuse_tasks;
use crate::grouping::select_grouping;
use crate::profile::{synthetic_table, ProfileTable, SyntheticOp, COLLECTIVE_OP};
use crate::workload::{
    sort_by_tokens, AdapterSpec, AdapterType, BackboneSpec, PlannerConfig, StageSpec, Task,
};

/// One task arrival in a cluster trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceEvent {
    pub arrival_min: f64,
    pub duration_min: f64,
    pub backbone_id: String,
    pub dataset_id: String,
    pub micro_batch_size: u64,
}

/// Parse a trace file: one `arrival_min, duration_min, backbone_id,
/// dataset_id, micro_batch_size` row per line; `#` comments and blank
/// lines are skipped. Rows are sorted by arrival time (stable).
pub fn parse_trace(text: &str) -> PlanResult<Vec<TraceEvent>> {
    let mut events = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let row = raw.trim();
        if row.is_empty() || row.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = row.split(',').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(PlanError::Parse {
                line,
                message: format!("expected 5 fields, found {}", fields.len()),
            });
        }
        let num = |s: &str, what: &str| -> PlanResult<f64> {
            s.parse::<f64>().map_err(|_| PlanError::Parse {
                line,
                message: format!("bad {what}: '{s}'"),
            })
        };
        let arrival_min = num(fields[0], "arrival_min")?;
        let duration_min = num(fields[1], "duration_min")?;
        if !arrival_min.is_finite() || arrival_min < 0.0 {
            return Err(PlanError::Parse {
                line,
                message: "arrival_min must be finite and ≥0".to_string(),
            });
        }
        if !duration_min.is_finite() || duration_min <= 0.0 {
            return Err(PlanError::Parse {
                line,
                message: "duration_min must be finite and >0".to_string(),
            });
        }
        let micro_batch_size = fields[4].parse::<u64>().map_err(|_| PlanError::Parse {
            line,
            message: format!("bad micro_batch_size: '{}'", fields[4]),
        })?;
        if micro_batch_size == 0 {
            return Err(PlanError::Parse {
                line,
                message: "micro_batch_size must be ≥1".to_string(),
            });
        }
        events.push(TraceEvent {
            arrival_min,
            duration_min,
            backbone_id: fields[2].to_string(),
            dataset_id: fields[3].to_string(),
            micro_batch_size,
        });
    }
    events.sort_by(|a, b| a.arrival_min.total_cmp(&b.arrival_min));
    Ok(events)
}

/// Render a trace in the same format `parse_trace` reads. `f64` values use
/// the shortest round-trip form, so parse(render(t)) == t.
pub fn render_trace(events: &[TraceEvent]) -> String {
    let mut out =
        String::from("# arrival_min, duration_min, backbone_id, dataset_id, micro_batch_size\n");
    for e in events {
        out.push_str(&format!(
            "{}, {}, {}, {}, {}\n",
            e.arrival_min, e.duration_min, e.backbone_id, e.dataset_id, e.micro_batch_size
        ));
    }
    out
}

pub fn load_trace(path: &std::path::Path) -> PlanResult<Vec<TraceEvent>> {
    parse_trace(&std::fs::read_to_string(path)?)
}

/// Built-in dataset shapes a trace row may name: (id, padded length).
pub const DATASETS: [(&str, u64); 3] = [("sst2", 64), ("qa", 128), ("rte", 256)];

/// Instantiate the concrete fine-tuning task a trace row describes.
pub fn task_from_event(event: &TraceEvent, seq: usize) -> PlanResult<Task> {
    let padded = DATASETS
        .iter()
        .find(|(id, _)| *id == event.dataset_id)
        .map(|&(_, l)| l)
        .ok_or_else(|| {
            PlanError::InvalidArgument(format!(
                "unknown dataset id '{}' (known: sst2, qa, rte)",
                event.dataset_id
            ))
        })?;
    Ok(Task {
        task_id: format!("{}-{}", event.dataset_id, seq),
        adapter: AdapterSpec {
            adapter_type: AdapterType::Reparameterized,
            attach_points: vec!["proj".to_string()],
            adapter_op_ids: vec!["lora".to_string()],
        },
        micro_batch_size: event.micro_batch_size,
        padded_seq_len: padded,
        seq_lengths: vec![padded, (padded / 2).max(1), padded.saturating_sub(3).max(1)],
        activation_bytes_per_token: 2048,
        grad_buffer_bytes: 1 << 20,
        tokens_per_microbatch: None,
    })
}

/// The backbone shape every replay instance runs. The trace's backbone id
/// only decides colocation identity; all ids share this two-stage shape,
/// whose operator ids must appear in the profile table.
pub fn replay_backbone(_backbone_id: &str) -> BackboneSpec {
    BackboneSpec {
        num_stages: 2,
        stages: vec![
            StageSpec {
                gpu_count: 1,
                operators: vec![
                    "qkv".to_string(),
                    "attn_core".to_string(),
                    "proj".to_string(),
                ],
            },
            StageSpec {
                gpu_count: 1,
                operators: vec!["mlp_up".to_string(), "mlp_down".to_string()],
            },
        ],
        backbone_param_bytes: 1 << 30,
    }
}

/// A profile whose per-operator cost is dominated by a fixed launch cost
/// with a shallow per-token slope, so batching amortizes well. Default for
/// replays when no measured profile is supplied.
pub fn replay_profile() -> ProfileTable {
    let op = SyntheticOp {
        base_ms: 2.0,
        slope_ms_per_token: 0.0005,
        knee_tokens: 64.0,
    };
    let adapter = SyntheticOp {
        base_ms: 0.1,
        slope_ms_per_token: 0.0001,
        knee_tokens: 64.0,
    };
    synthetic_table(
        &[
            ("qkv", op),
            ("attn_core", op),
            ("proj", op),
            ("mlp_up", op),
            ("mlp_down", op),
            ("lora", adapter),
        ],
        &[(COLLECTIVE_OP, 0.05, 2e-8)],
        &[64, 256, 1024, 4096, 16384, 65536, 262144],
    )
}

/// How tasks map onto instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplayMode {
    /// Every task gets a fresh instance; tasks queue for free GPUs.
    Dedicated,
    /// A task joins an in-flight same-backbone instance when memory
    /// permits; otherwise it gets a fresh instance or queues.
    Multiplexed,
}

impl std::str::FromStr for ReplayMode {
    type Err = PlanError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dedicated" => Ok(ReplayMode::Dedicated),
            "multiplexed" => Ok(ReplayMode::Multiplexed),
            other => Err(PlanError::InvalidArgument(format!(
                "unknown mode '{other}' (expected dedicated or multiplexed)"
            ))),
        }
    }
}

/// Order in which queued tasks may be admitted. Exactly one implementation
/// exists today; the trait keeps the dispatch rule swappable.
pub trait DispatchPolicy {
    /// Index of the queue entry to try next, or None to admit nothing.
    /// Admission is head-of-line: if the picked entry cannot start, no
    /// other entry is considered this round.
    fn pick(&self, queue_len: usize) -> Option<usize>;
    fn name(&self) -> &'static str;
}

/// Strict first-come-first-served: only ever the front of the queue.
pub struct FcfsPolicy;

impl DispatchPolicy for FcfsPolicy {
    fn pick(&self, queue_len: usize) -> Option<usize> {
        (queue_len > 0).then_some(0)
    }
    fn name(&self) -> &'static str {
        "fcfs"
    }
}

/// Replay knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplayConfig {
    pub mode: ReplayMode,
    pub cluster_gpus: usize,
    pub planner: PlannerConfig,
}

impl ReplayConfig {
    pub fn new(mode: ReplayMode, cluster_gpus: usize) -> Self {
        ReplayConfig {
            mode,
            cluster_gpus,
            planner: PlannerConfig {
                micro_batch_count: 4,
                chunk_min: 64,
                memory_limit_per_gpu: 8 << 30,
                max_buckets: None,
            },
        }
    }
}

/// One task's fate in a replay.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskOutcome {
    pub seq: usize,
    pub task_id: String,
    pub backbone_id: String,
    pub dataset_id: String,
    pub arrival_min: f64,
    pub start_min: f64,
    pub completion_min: f64,
    pub queue_delay_min: f64,
    pub budget_tokens: f64,
}

/// Aggregate result of one replay run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterReport {
    pub mode: ReplayMode,
    pub policy: String,
    pub cluster_gpus: usize,
    pub outcomes: Vec<TaskOutcome>,
    pub total_tokens: f64,
    /// First arrival to last completion, minutes.
    pub span_min: f64,
    pub throughput_tokens_per_min: f64,
    pub mean_queue_delay_min: f64,
    pub max_queue_delay_min: f64,
    pub replans: usize,
}

/// Deterministic human-readable rendering (used for byte-equality checks).
pub fn render_report(report: &ClusterReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "cluster replay: mode={:?} policy={} gpus={}\n",
        report.mode, report.policy, report.cluster_gpus
    ));
    out.push_str(&format!(
        "tasks={} total_tokens={:.3} span_min={:.6} throughput_tokens_per_min={:.6}\n",
        report.outcomes.len(),
        report.total_tokens,
        report.span_min,
        report.throughput_tokens_per_min
    ));
    out.push_str(&format!(
        "queue_delay_min: mean={:.6} max={:.6}; replans={}\n",
        report.mean_queue_delay_min, report.max_queue_delay_min, report.replans
    ));
    out.push_str("seq, task, backbone, dataset, arrival_min, start_min, completion_min, queue_delay_min, budget_tokens\n");
    for o in &report.outcomes {
        out.push_str(&format!(
            "{}, {}, {}, {}, {:.6}, {:.6}, {:.6}, {:.6}, {:.3}\n",
            o.seq,
            o.task_id,
            o.backbone_id,
            o.dataset_id,
            o.arrival_min,
            o.start_min,
            o.completion_min,
            o.queue_delay_min,
            o.budget_tokens
        ));
    }
    out
}

/// Makespan of one training iteration for a set of co-resident tasks,
/// through the full planner: sort, fuse, group, template, simulate.
pub fn instance_makespan_ms(
    tasks: &[Task],
    backbone: &BackboneSpec,
    table: &ProfileTable,
    planner: &PlannerConfig,
) -> PlanResult<f64> {
    let sorted = sort_by_tokens(tasks);
    let fusion = fuse_tasks(&sorted, backbone, table, planner)?;
    let selection = select_grouping(&fusion.htasks, backbone, table, planner)?;
    Ok(selection.makespan_ms)
}

const MS_PER_MIN: f64 = 60_000.0;

struct QueuedTask {
    seq: usize,
    arrival_ms: f64,
    backbone_id: String,
    dataset_id: String,
    task: Task,
    budget_tokens: f64,
}

struct Running {
    seq: usize,
    arrival_ms: f64,
    start_ms: f64,
    backbone_id: String,
    dataset_id: String,
    task: Task,
    budget_tokens: f64,
    remaining_tokens: f64,
    /// Tokens per millisecond under the instance's current plan.
    rate: f64,
}

struct Instance {
    id: usize,
    backbone_id: String,
    gpus: usize,
    members: Vec<Running>,
}

fn advance(instances: &mut [Instance], dt: f64) {
    if dt <= 0.0 {
        return;
    }
    for inst in instances {
        for m in &mut inst.members {
            m.remaining_tokens = (m.remaining_tokens - m.rate * dt).max(0.0);
        }
    }
}

/// Run a trace under FCFS dispatch.
pub fn replay(
    trace: &[TraceEvent],
    table: &ProfileTable,
    cfg: &ReplayConfig,
) -> PlanResult<ClusterReport> {
    replay_with_policy(trace, table, cfg, &FcfsPolicy)
}

/// Run a trace under an explicit dispatch policy.
pub fn replay_with_policy(
    trace: &[TraceEvent],
    table: &ProfileTable,
    cfg: &ReplayConfig,
    policy: &dyn DispatchPolicy,
) -> PlanResult<ClusterReport> {
    let mut arrivals: Vec<(usize, &TraceEvent)> = trace.iter().enumerate().collect();
    arrivals.sort_by(|a, b| {
        a.1.arrival_min
            .total_cmp(&b.1.arrival_min)
            .then(a.0.cmp(&b.0))
    });

    // Each task's solo iteration makespan defines the nominal token rate
    // its duration is billed at — and proves the task can run at all.
    let mut prepared: VecDeque<QueuedTask> = VecDeque::new();
    for &(seq, event) in &arrivals {
        let task = task_from_event(event, seq)?;
        let backbone = replay_backbone(&event.backbone_id);
        let needed = backbone.total_gpus();
        if needed > cfg.cluster_gpus {
            return Err(PlanError::InvalidArgument(format!(
                "task {} needs {} GPUs but the cluster has {}",
                task.task_id, needed, cfg.cluster_gpus
            )));
        }
        let solo_ms =
            instance_makespan_ms(std::slice::from_ref(&task), &backbone, table, &cfg.planner)?;
        let tokens_per_iteration = cfg.planner.micro_batch_count as f64 * task.tokens() as f64;
        let nominal_rate = tokens_per_iteration / solo_ms;
        prepared.push_back(QueuedTask {
            seq,
            arrival_ms: event.arrival_min * MS_PER_MIN,
            backbone_id: event.backbone_id.clone(),
            dataset_id: event.dataset_id.clone(),
            task,
            budget_tokens: event.duration_min * MS_PER_MIN * nominal_rate,
        });
    }

    let mut pending: VecDeque<QueuedTask> = VecDeque::new();
    let mut instances: Vec<Instance> = Vec::new();
    let mut free_gpus = cfg.cluster_gpus;
    let mut next_instance_id = 0usize;
    let mut now_ms = 0.0f64;
    let mut replans = 0usize;
    let mut outcomes: Vec<TaskOutcome> = Vec::new();

    // Recompute an instance's joint plan and refresh member rates.
    let replan = |inst: &mut Instance, replans: &mut usize| -> PlanResult<()> {
        let tasks: Vec<Task> = inst.members.iter().map(|m| m.task.clone()).collect();
        let backbone = replay_backbone(&inst.backbone_id);
        let makespan = instance_makespan_ms(&tasks, &backbone, table, &cfg.planner)?;
        *replans += 1;
        for m in &mut inst.members {
            m.rate = cfg.planner.micro_batch_count as f64 * m.task.tokens() as f64 / makespan;
        }
        Ok(())
    };

    let start_running = |q: QueuedTask, now_ms: f64| Running {
        seq: q.seq,
        arrival_ms: q.arrival_ms,
        start_ms: now_ms,
        backbone_id: q.backbone_id,
        dataset_id: q.dataset_id,
        task: q.task,
        budget_tokens: q.budget_tokens,
        remaining_tokens: q.budget_tokens,
        rate: 0.0,
    };

    loop {
        // Admission, strictly in policy order; a blocked pick blocks all.
        loop {
            let Some(pick) = policy.pick(pending.len()) else {
                break;
            };
            let candidate_backbone = pending[pick].backbone_id.clone();
            let candidate_task = pending[pick].task.clone();
            let mut admitted = false;
            if cfg.mode == ReplayMode::Multiplexed {
                // join the lowest-id same-backbone instance that still fits
                let mut join_target: Option<usize> = None;
                for (idx, inst) in instances.iter().enumerate() {
                    if inst.backbone_id != candidate_backbone {
                        continue;
                    }
                    let mut tasks: Vec<Task> =
                        inst.members.iter().map(|m| m.task.clone()).collect();
                    tasks.push(candidate_task.clone());
                    let backbone = replay_backbone(&inst.backbone_id);
                    match instance_makespan_ms(&tasks, &backbone, table, &cfg.planner) {
                        Ok(_) => {
                            join_target = Some(idx);
                            break;
                        }
                        Err(PlanError::InfeasibleMemory(_)) => continue,
                        Err(e) => return Err(e),
                    }
                }
                if let Some(idx) = join_target {
                    let q = pending.remove(pick).unwrap();
                    instances[idx].members.push(start_running(q, now_ms));
                    replan(&mut instances[idx], &mut replans)?;
                    admitted = true;
                }
            }
            if !admitted {
                let backbone = replay_backbone(&candidate_backbone);
                let needed = backbone.total_gpus();
                if free_gpus >= needed {
                    let q = pending.remove(pick).unwrap();
                    free_gpus -= needed;
                    let mut inst = Instance {
                        id: next_instance_id,
                        backbone_id: q.backbone_id.clone(),
                        gpus: needed,
                        members: vec![start_running(q, now_ms)],
                    };
                    next_instance_id += 1;
                    replan(&mut inst, &mut replans)?;
                    instances.push(inst);
                    admitted = true;
                }
            }
            if !admitted {
                break;
            }
        }
        debug_assert_eq!(
            free_gpus + instances.iter().map(|i| i.gpus).sum::<usize>(),
            cfg.cluster_gpus
        );

        // Next event: earliest of next arrival and next completion;
        // completions win ties so capacity frees up before admission.
        let next_arrival = prepared.front().map(|q| q.arrival_ms);
        let mut next_completion: Option<(f64, usize, usize)> = None; // (t, instance, seq)
        for inst in &instances {
            for m in &inst.members {
                let key = (now_ms + m.remaining_tokens / m.rate, inst.id, m.seq);
                let better = match next_completion {
                    None => true,
                    Some(best) => key < best,
                };
                if better {
                    next_completion = Some(key);
                }
            }
        }

        let take_completion = match (next_arrival, next_completion) {
            (None, None) => break,
            (None, Some(_)) => true,
            (Some(_), None) => false,
            (Some(at), Some((ct, _, _))) => ct <= at,
        };

        if take_completion {
            let (ct, inst_id, seq) = next_completion.unwrap();
            advance(&mut instances, ct - now_ms);
            now_ms = now_ms.max(ct);
            let idx = instances.iter().position(|i| i.id == inst_id).unwrap();
            let pos = instances[idx]
                .members
                .iter()
                .position(|m| m.seq == seq)
                .unwrap();
            let done = instances[idx].members.remove(pos);
            outcomes.push(TaskOutcome {
                seq: done.seq,
                task_id: done.task.task_id.clone(),
                backbone_id: done.backbone_id,
                dataset_id: done.dataset_id,
                arrival_min: done.arrival_ms / MS_PER_MIN,
                start_min: done.start_ms / MS_PER_MIN,
                completion_min: now_ms / MS_PER_MIN,
                queue_delay_min: (done.start_ms - done.arrival_ms) / MS_PER_MIN,
                budget_tokens: done.budget_tokens,
            });
            if instances[idx].members.is_empty() {
                free_gpus += instances[idx].gpus;
                instances.remove(idx);
            } else {
                replan(&mut instances[idx], &mut replans)?;
            }
        } else {
            let at = next_arrival.unwrap();
            advance(&mut instances, at - now_ms);
            now_ms = now_ms.max(at);
            pending.push_back(prepared.pop_front().unwrap());
        }
    }

    // Completion-ordered history, reported by arrival sequence.
    outcomes.sort_by_key(|o| o.seq);

    let total_tokens: f64 = outcomes.iter().map(|o| o.budget_tokens).sum();
    let first_arrival = trace
        .iter()
        .map(|e| e.arrival_min)
        .fold(f64::INFINITY, f64::min);
    let last_completion = outcomes
        .iter()
        .map(|o| o.completion_min)
        .fold(f64::NEG_INFINITY, f64::max);
    let span = if outcomes.is_empty() {
        0.0
    } else {
        last_completion - first_arrival
    };
    let throughput = if span > 0.0 { total_tokens / span } else { 0.0 };
    let delays: Vec<f64> = outcomes.iter().map(|o| o.queue_delay_min).collect();
    let mean_delay = if delays.is_empty() {
        0.0
    } else {
        delays.iter().sum::<f64>() / delays.len() as f64
    };
    let max_delay = delays.iter().copied().fold(0.0f64, f64::max);
    Ok(ClusterReport {
        mode: cfg.mode,
        policy: policy.name().to_string(),
        cluster_gpus: cfg.cluster_gpus,
        outcomes,
        total_tokens,
        span_min: span,
        throughput_tokens_per_min: throughput,
        mean_queue_delay_min: mean_delay,
        max_queue_delay_min: max_delay,
        replans,
    })
}

/// Parameters of the synthetic trace generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticTraceParams {
    pub tasks: usize,
    /// Log-normal duration statistics before scaling, minutes.
    pub mean_duration_min: f64,
    pub std_duration_min: f64,
    /// Poisson arrival rate before scaling, tasks per minute.
    pub arrivals_per_min: f64,
    /// Every sampled time is divided by this to shrink the trace to desk
    /// scale while keeping its shape.
    pub scale_divisor: f64,
}

impl Default for SyntheticTraceParams {
    fn default() -> Self {
        SyntheticTraceParams {
            tasks: 24,
            mean_duration_min: 372.6,
            std_duration_min: 612.9,
            arrivals_per_min: 2.59,
            scale_divisor: 60.0,
        }
    }
}

/// Sample a trace whose duration distribution is log-normal with the given
/// mean and standard deviation and whose arrivals are Poisson, then shrink
/// the whole timeline by `scale_divisor`. Deterministic in the seed.
pub fn synthetic_trace(params: &SyntheticTraceParams, seed: u64) -> PlanResult<Vec<TraceEvent>> {
    if params.tasks == 0 {
        return Err(PlanError::InvalidArgument(
            "synthetic trace needs ≥1 task".to_string(),
        ));
    }
    if params.mean_duration_min <= 0.0
        || params.std_duration_min < 0.0
        || params.arrivals_per_min <= 0.0
        || params.scale_divisor <= 0.0
    {
        return Err(PlanError::InvalidArgument(
            "synthetic trace parameters must be positive".to_string(),
        ));
    }
    let cv2 = (params.std_duration_min / params.mean_duration_min).powi(2);
    let sigma2 = (1.0 + cv2).ln();
    let mu = params.mean_duration_min.ln() - sigma2 / 2.0;
    let duration_dist = LogNormal::new(mu, sigma2.sqrt())
        .map_err(|e| PlanError::InvalidArgument(format!("log-normal: {e}")))?;
    let gap_dist = Exp::new(params.arrivals_per_min)
        .map_err(|e| PlanError::InvalidArgument(format!("exponential: {e}")))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = 0.0f64;
    let mut events = Vec::with_capacity(params.tasks);
    for _ in 0..params.tasks {
        t += gap_dist.sample(&mut rng) / params.scale_divisor;
        let duration = (duration_dist.sample(&mut rng) / params.scale_divisor).max(0.05);
        let dataset = DATASETS[rng.gen_range(0..DATASETS.len())].0.to_string();
        let micro_batch_size = 1u64 << rng.gen_range(1..=2); // 2 or 4
        let backbone_id = if rng.gen_bool(0.7) { "bb-a" } else { "bb-b" }.to_string();
        events.push(TraceEvent {
            arrival_min: t,
            duration_min: duration,
            backbone_id,
            dataset_id: dataset,
            micro_batch_size,
        });
    }
    Ok(events)
}
