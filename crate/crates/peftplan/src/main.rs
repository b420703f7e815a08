//! Command-line front end: plan a workload, re-simulate a plan, export
//! chunk alignments, replay cluster traces, and run built-in self-tests.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use peftplan::error::{PlanError, PlanResult};
use peftplan::{
    alignment, fusion, grouping, isolation, overlap, pipeline, plan, profile, replay, report,
    resimulate, workload,
};

#[derive(Parser)]
#[command(
    name = "peftplan",
    version,
    about = "Plan and simulate co-scheduled fine-tuning tasks on a shared backbone"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Plan a workload end to end and write a self-contained report.
    Plan {
        /// Workload JSON file (backbone, tasks, planner knobs).
        #[arg(long)]
        workload: PathBuf,
        /// Operator profile table.
        #[arg(long)]
        profile: PathBuf,
        /// Where to write the JSON plan report.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Cap on the bucket counts the grouping search explores.
        #[arg(long)]
        max_buckets: Option<usize>,
        /// Smallest chunk size the alignment stage may pick.
        #[arg(long)]
        chunk_min: Option<u64>,
        /// Per-GPU memory budget in GiB (overrides the workload file).
        #[arg(long)]
        mem_limit_gb: Option<f64>,
    },
    /// Re-simulate a plan report; outputs Gantt rows and bubble figures.
    Simulate {
        /// Plan report written by `plan`.
        plan: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export the chunk alignment of a planned workload.
    Align {
        #[arg(long)]
        workload: PathBuf,
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        chunk_min: Option<u64>,
    },
    /// Replay a task-arrival trace against a simulated cluster.
    Replay {
        /// Trace file; omitted = generate a synthetic trace (see --tasks).
        trace: Option<PathBuf>,
        /// dedicated | multiplexed
        #[arg(long, default_value = "multiplexed")]
        mode: String,
        /// Profile table; defaults to a built-in launch-cost-heavy profile.
        #[arg(long)]
        profile: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed for the synthetic trace generator.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Total GPUs in the simulated cluster.
        #[arg(long, default_value_t = 4)]
        gpus: usize,
        /// Synthetic trace size when no trace file is given.
        #[arg(long, default_value_t = 24)]
        tasks: usize,
    },
    /// Run the built-in oracle suites.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("{e}");
            std::process::exit(exit_code(&e));
        }
    }
}

fn exit_code(err: &PlanError) -> i32 {
    match err {
        PlanError::Io(_) => 1,
        PlanError::InfeasibleMemory(_) | PlanError::FusionCycle(_, _) => 3,
        PlanError::InvalidWorkload(_)
        | PlanError::UnknownOperator(_)
        | PlanError::Parse { .. }
        | PlanError::InvalidArgument(_)
        | PlanError::Json(_) => 2,
    }
}

fn emit(out: &Option<PathBuf>, text: &str) -> PlanResult<()> {
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn load_inputs(
    workload_path: &Path,
    profile_path: &Path,
) -> PlanResult<(workload::Workload, profile::ProfileTable)> {
    let w = workload::load_workload(workload_path)?;
    let table = profile::load_profile(profile_path)?;
    Ok((w, table))
}

fn apply_overrides(
    w: &mut workload::Workload,
    max_buckets: Option<usize>,
    chunk_min: Option<u64>,
    mem_limit_gb: Option<f64>,
) -> PlanResult<()> {
    if let Some(p) = max_buckets {
        w.planner.max_buckets = Some(p);
    }
    if let Some(c) = chunk_min {
        w.planner.chunk_min = c;
    }
    if let Some(gb) = mem_limit_gb {
        if !gb.is_finite() || gb <= 0.0 {
            return Err(PlanError::InvalidArgument(
                "--mem-limit-gb must be a positive number".to_string(),
            ));
        }
        w.planner.memory_limit_per_gpu = (gb * (1u64 << 30) as f64) as u64;
    }
    Ok(())
}

fn run(cli: Cli) -> PlanResult<()> {
    match cli.command {
        Command::Plan {
            workload,
            profile,
            out,
            max_buckets,
            chunk_min,
            mem_limit_gb,
        } => {
            let (mut w, table) = load_inputs(&workload, &profile)?;
            apply_overrides(&mut w, max_buckets, chunk_min, mem_limit_gb)?;
            let report = plan(&w, &table)?;
            let json = report.to_json()?;
            match &out {
                Some(path) => {
                    std::fs::write(path, &json)?;
                    print!("{}", report::render_summary(&report));
                    println!("report written to {}", path.display());
                }
                None => print!("{json}"),
            }
            Ok(())
        }
        Command::Simulate { plan, out } => {
            let text = std::fs::read_to_string(&plan)?;
            let report = report::PlanReport::from_json(&text)?;
            let schedule = resimulate(&report)?;
            if schedule.makespan_ms != report.simulated.makespan_ms {
                return Err(PlanError::InvalidArgument(format!(
                    "re-simulation diverged from the report: {} vs {} ms",
                    schedule.makespan_ms, report.simulated.makespan_ms
                )));
            }
            let bubble = pipeline::bubble_report(&schedule);
            let mut doc = String::new();
            doc.push_str(&format!(
                "makespan_ms={:.6} warmup_ms={:.6} steady_ms={:.6} drain_ms={:.6}\n",
                schedule.makespan_ms, schedule.warmup_ms, schedule.steady_ms, schedule.drain_ms
            ));
            doc.push_str(&format!(
                "last_stage_idle_steady_ms={:.6} internal_bubble_fraction={:.6}\n",
                bubble.last_stage_idle_steady_ms, bubble.internal_bubble_fraction
            ));
            doc.push_str(&report::render_gantt(&schedule));
            emit(&out, &doc)
        }
        Command::Align {
            workload,
            profile,
            out,
            chunk_min,
        } => {
            let (mut w, table) = load_inputs(&workload, &profile)?;
            apply_overrides(&mut w, None, chunk_min, None)?;
            let report = plan(&w, &table)?;
            let mut doc = String::new();
            for a in &report.alignment {
                doc.push_str(&format!(
                    "htask={} chunk_size={} forced_padding={} original={} intra_pad={} inter_pad={}\n",
                    a.htask,
                    a.chunk_size,
                    a.forced_padding,
                    a.stats.original_tokens,
                    a.stats.intra_task_pad,
                    a.stats.inter_task_pad
                ));
            }
            doc.push_str(&format!(
                "effective fraction: chunked={:.6} zero_pad={:.6}\n",
                report.effective_tokens.chunked_fraction,
                report.effective_tokens.zero_pad_fraction
            ));
            doc.push_str(&report::render_chunk_rows(&report));
            emit(&out, &doc)
        }
        Command::Replay {
            trace,
            mode,
            profile: profile_path,
            out,
            seed,
            gpus,
            tasks,
        } => {
            let mode: replay::ReplayMode = mode.parse()?;
            let events = match &trace {
                Some(path) => replay::load_trace(path)?,
                None => replay::synthetic_trace(
                    &replay::SyntheticTraceParams {
                        tasks,
                        ..replay::SyntheticTraceParams::default()
                    },
                    seed,
                )?,
            };
            let table = match &profile_path {
                Some(p) => profile::load_profile(p)?,
                None => replay::replay_profile(),
            };
            let cfg = replay::ReplayConfig::new(mode, gpus);
            let cluster = replay::replay(&events, &table, &cfg)?;
            emit(&out, &replay::render_report(&cluster))
        }
        Command::Selftest { seed } => selftest(seed),
    }
}

// ---------------------------------------------------------------------
// Self-test suites: small seeded oracle checks over the public API.
// ---------------------------------------------------------------------

fn selftest(seed: u64) -> PlanResult<()> {
    let checks: Vec<(&str, Box<dyn Fn(u64) -> Result<(), String>>)> = vec![
        ("fusion-dp-vs-exhaustive", Box::new(check_fusion_dp)),
        ("grouping-vs-enumeration", Box::new(check_grouping)),
        ("pipeline-closed-form", Box::new(check_pipeline)),
        ("overlap-hand-instance", Box::new(check_overlap)),
        ("alignment-examples", Box::new(check_alignment)),
        ("isolation-bit-identity", Box::new(check_isolation)),
        ("replay-determinism", Box::new(check_replay)),
    ];
    let mut failures = 0;
    for (name, check) in &checks {
        match check(seed) {
            Ok(()) => println!("PASS {name}"),
            Err(msg) => {
                failures += 1;
                println!("FAIL {name}: {msg}");
            }
        }
    }
    if failures > 0 {
        return Err(PlanError::InvalidArgument(format!(
            "{failures} self-test suite(s) failed"
        )));
    }
    Ok(())
}

fn random_tasks(rng: &mut ChaCha8Rng, count: usize) -> Result<Vec<workload::Task>, String> {
    let datasets = ["sst2", "qa", "rte"];
    (0..count)
        .map(|i| {
            let ev = replay::TraceEvent {
                arrival_min: 0.0,
                duration_min: 1.0,
                backbone_id: "bb-a".to_string(),
                dataset_id: datasets[rng.gen_range(0..3)].to_string(),
                micro_batch_size: 1 << rng.gen_range(0..=2),
            };
            replay::task_from_event(&ev, i).map_err(|e| e.to_string())
        })
        .collect()
}

fn check_fusion_dp(seed: u64) -> Result<(), String> {
    let table = replay::replay_profile();
    let backbone = replay::replay_backbone("bb-a");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf0f0);
    for trial in 0..12 {
        let m = 2 + (rng.gen_range(0..5usize));
        let tasks = workload::sort_by_tokens(&random_tasks(&mut rng, m)?);
        let cfg = workload::PlannerConfig {
            micro_batch_count: 4,
            chunk_min: 64,
            memory_limit_per_gpu: u64::MAX,
            max_buckets: None,
        };
        let plan = fusion::fuse_tasks(&tasks, &backbone, &table, &cfg)
            .map_err(|e| format!("trial {trial}: {e}"))?;
        let costs = fusion::range_cost_matrix(&tasks, &backbone, &table, &cfg)
            .map_err(|e| e.to_string())?;
        // enumerate every contiguous partition via cut bitmasks
        let mut best = f64::INFINITY;
        for mask in 0..(1u32 << (m - 1)) {
            let mut cuts: Vec<usize> = (0..m - 1).filter(|&i| mask & (1 << i) != 0).collect();
            cuts.push(m - 1);
            let obj = fusion::partition_objective(&costs, &cuts, backbone.num_stages);
            if obj < best {
                best = obj;
            }
        }
        if plan.objective_ms != best {
            return Err(format!(
                "trial {trial}: dp {} != exhaustive {}",
                plan.objective_ms, best
            ));
        }
    }
    Ok(())
}

fn check_grouping(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbeef);
    for trial in 0..12 {
        let n = 3 + rng.gen_range(0..5usize);
        let p = (1 + rng.gen_range(0..3usize)).min(n);
        // integer loads make the variance objective exactly comparable:
        // minimizing sum (p*sum_b - total)^2 in integers is equivalent
        let ints: Vec<i128> = (0..n).map(|_| rng.gen_range(1..100i64) as i128).collect();
        let l1: Vec<f64> = ints.iter().map(|&v| v as f64).collect();
        let got = grouping::group_htasks(&l1, p).map_err(|e| e.to_string())?;
        let total: i128 = ints.iter().sum();
        let exact = |assign: &[usize]| -> i128 {
            let mut sums = vec![0i128; p];
            for (i, &b) in assign.iter().enumerate() {
                sums[b] += ints[i];
            }
            sums.iter()
                .map(|&s| {
                    let d = p as i128 * s - total;
                    d * d
                })
                .sum()
        };
        let got_exact = exact(&got);
        // enumerate canonical assignments with exactly p buckets
        let mut best = i128::MAX;
        let mut assign = vec![0usize; n];
        loop {
            if is_canonical(&assign, p) {
                best = best.min(exact(&assign));
            }
            // odometer
            let mut k = n;
            loop {
                if k == 0 {
                    break;
                }
                k -= 1;
                assign[k] += 1;
                if assign[k] < p {
                    break;
                }
                assign[k] = 0;
            }
            if assign.iter().all(|&a| a == 0) {
                break;
            }
        }
        if got_exact != best {
            return Err(format!("trial {trial}: {got_exact} != exhaustive {best}"));
        }
    }
    Ok(())
}

fn is_canonical(assign: &[usize], p: usize) -> bool {
    let mut next = 0usize;
    for &a in assign {
        if a > next {
            return false;
        }
        if a == next {
            next += 1;
        }
    }
    next == p
}

fn check_pipeline(_seed: u64) -> Result<(), String> {
    for stages in 2..=4usize {
        let t = 1.5;
        let profiles = vec![pipeline::uniform_bucket(0, t, stages)];
        let template =
            pipeline::generate_template(&profiles, &pipeline::MemoryModel::unconstrained(), 4)
                .map_err(|e| e.to_string())?;
        let schedule = pipeline::simulate(&template, &profiles).map_err(|e| e.to_string())?;
        let expect_warmup = (stages - 1) as f64 * t;
        if schedule.warmup_ms != expect_warmup {
            return Err(format!(
                "S={stages}: warmup {} != {}",
                schedule.warmup_ms, expect_warmup
            ));
        }
        let sum = schedule.warmup_ms + schedule.steady_ms + schedule.drain_ms;
        if sum != schedule.makespan_ms {
            return Err(format!(
                "S={stages}: decomposition {} != makespan {}",
                sum, schedule.makespan_ms
            ));
        }
    }
    Ok(())
}

fn check_overlap(_seed: u64) -> Result<(), String> {
    // two compute blocks closed by a trailing collective: one fused
    // subgraph per task; interleaved, only the last collective is exposed
    let chain = |label: &str, head: f64, tail: f64, comm: f64| {
        let mut d = overlap::Dag::new(label);
        let a = d.add_node(overlap::OpNode::compute("head", head));
        let b = d.add_node(overlap::OpNode::compute("tail", tail));
        let c = d.add_node(overlap::OpNode::comm("allreduce", comm));
        d.add_edge(a, b);
        d.add_edge(b, c);
        d
    };
    let dags = vec![chain("a", 10.0, 6.0, 4.0), chain("b", 10.0, 6.0, 4.0)];
    let meta = vec![
        overlap::DagMeta {
            bucket_id: 0,
            single_task: true,
        },
        overlap::DagMeta {
            bucket_id: 0,
            single_task: true,
        },
    ];
    let plan = overlap::plan_stage(&dags, &meta).map_err(|e| e.to_string())?;
    if plan.latency_ms != 36.0 {
        return Err(format!("interleaved latency {} != 36", plan.latency_ms));
    }
    let sequential = 2.0 * (10.0 + 4.0 + 6.0);
    if plan.latency_ms >= sequential {
        return Err(format!(
            "interleaving gained nothing over sequential {sequential}"
        ));
    }
    Ok(())
}

fn check_alignment(_seed: u64) -> Result<(), String> {
    let mk = |id: &str, padded: u64, lengths: &[u64]| workload::Task {
        task_id: id.to_string(),
        adapter: workload::AdapterSpec {
            adapter_type: workload::AdapterType::Reparameterized,
            attach_points: vec!["proj".to_string()],
            adapter_op_ids: vec!["lora".to_string()],
        },
        micro_batch_size: 1,
        padded_seq_len: padded,
        seq_lengths: lengths.to_vec(),
        activation_bytes_per_token: 1024,
        grad_buffer_bytes: 1 << 20,
        tokens_per_microbatch: None,
    };
    let t = mk("a", 64, &[40, 20, 30, 30]);
    let packs = alignment::pack_sequences(&t).map_err(|e| e.to_string())?;
    if packs.len() != 2 || packs[0].total_len != 60 || packs[1].total_len != 60 {
        return Err("first-fit-decreasing packing diverged from the hand result".to_string());
    }
    let mix = vec![mk("a", 64, &[64]), mk("b", 128, &[128]), mk("c", 256, &[256])];
    let choice = alignment::choose_chunk_size(&mix, 64).map_err(|e| e.to_string())?;
    if choice.chunk_size != 64 || choice.forced_padding {
        return Err(format!("chunk choice {:?}", choice));
    }
    let mut packs = Vec::new();
    for task in &mix {
        packs.extend(alignment::pack_sequences(task).map_err(|e| e.to_string())?);
    }
    let layout =
        alignment::chunk_partition(&packs, &mix, choice.chunk_size, 64).map_err(|e| e.to_string())?;
    let valid: u64 = layout.chunks.iter().map(|c| c.valid_tokens).sum();
    if valid != 64 + 128 + 256 {
        return Err(format!("token conservation broke: {valid}"));
    }
    Ok(())
}

fn check_isolation(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdead);
    for _ in 0..50 {
        let d = 1 + rng.gen_range(0..5usize);
        let e = 1 + rng.gen_range(0..5usize);
        let w = isolation::DenseMatrix::from_fn(d, e, |_, _| rng.gen_range(-10.0..10.0));
        let batches: Vec<isolation::DenseMatrix> = (0..3)
            .map(|_| {
                let r = 1 + rng.gen_range(0..3usize);
                isolation::DenseMatrix::from_fn(r, d, |_, _| rng.gen_range(-10.0..10.0))
            })
            .collect();
        isolation::batched_forward(&batches, &w).map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn check_replay(seed: u64) -> Result<(), String> {
    let trace = replay::synthetic_trace(
        &replay::SyntheticTraceParams {
            tasks: 6,
            ..replay::SyntheticTraceParams::default()
        },
        seed,
    )
    .map_err(|e| e.to_string())?;
    let table = replay::replay_profile();
    let cfg = replay::ReplayConfig::new(replay::ReplayMode::Multiplexed, 4);
    let a = replay::replay(&trace, &table, &cfg).map_err(|e| e.to_string())?;
    let b = replay::replay(&trace, &table, &cfg).map_err(|e| e.to_string())?;
    if replay::render_report(&a) != replay::render_report(&b) {
        return Err("replay reports differ between identical runs".to_string());
    }
    Ok(())
}
