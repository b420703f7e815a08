//! Generators and independent oracles shared by the integration suites.
//!
//! Every oracle here recomputes its answer by plain enumeration or direct
//! arithmetic — never by calling the search or scheduling code under test —
//! so an agreement between the two is meaningful evidence.
#![allow(dead_code)]

use peftplan::fusion;
use peftplan::overlap::{evaluate_schedule, Dag, OpNode, SubgraphGraph};
use peftplan::pipeline::{uniform_bucket, BucketStageProfile};
use peftplan::profile::{parse_profile, ProfileTable};
use peftplan::workload::{
    AdapterSpec, AdapterType, BackboneSpec, PlannerConfig, StageSpec, Task,
};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// Workload builders
// ---------------------------------------------------------------------------

pub fn lora_adapter(attach: &[&str]) -> AdapterSpec {
    AdapterSpec {
        adapter_type: AdapterType::Reparameterized,
        attach_points: attach.iter().map(|s| s.to_string()).collect(),
        adapter_op_ids: vec!["lora".to_string()],
    }
}

pub fn task_with(id: &str, b: u64, l: u64, seqs: Vec<u64>, attach: &[&str]) -> Task {
    Task {
        task_id: id.to_string(),
        adapter: lora_adapter(attach),
        micro_batch_size: b,
        padded_seq_len: l,
        seq_lengths: seqs,
        activation_bytes_per_token: 1024,
        grad_buffer_bytes: 1 << 20,
        tokens_per_microbatch: None,
    }
}

/// Two single-GPU stages covering the usual transformer operator names.
pub fn two_stage_backbone() -> BackboneSpec {
    BackboneSpec {
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
    }
}

/// Four single-GPU stages splitting the same operator chain further.
pub fn four_stage_backbone() -> BackboneSpec {
    BackboneSpec {
        num_stages: 4,
        stages: vec![
            StageSpec {
                gpu_count: 1,
                operators: vec!["qkv".into(), "attn_core".into()],
            },
            StageSpec {
                gpu_count: 1,
                operators: vec!["proj".into()],
            },
            StageSpec {
                gpu_count: 1,
                operators: vec!["mlp_up".into()],
            },
            StageSpec {
                gpu_count: 1,
                operators: vec!["mlp_down".into()],
            },
        ],
        backbone_param_bytes: 1 << 30,
    }
}

/// Planner knobs with an effectively unlimited memory budget.
pub fn roomy_planner(micro_batches: usize) -> PlannerConfig {
    PlannerConfig {
        micro_batch_count: micro_batches,
        chunk_min: 64,
        memory_limit_per_gpu: u64::MAX,
        max_buckets: None,
    }
}

/// A profile table with wide sample coverage for every operator the
/// builders above emit, loaded through the public text parser.
pub fn wide_profile() -> ProfileTable {
    parse_profile(&wide_profile_text()).expect("builder profile must parse")
}

/// Text form of [`wide_profile`], for tests that feed the CLI real files.
pub fn wide_profile_text() -> String {
    let mut text = String::from("op_id,token_count,latency_ms,utilization\n");
    let xs = [32u64, 64, 128, 256, 512, 1024, 2048, 4096, 8192, 16384];
    for (op, base, slope) in [
        ("qkv", 1.0, 0.0040),
        ("attn_core", 1.4, 0.0052),
        ("proj", 0.9, 0.0036),
        ("mlp_up", 1.2, 0.0048),
        ("mlp_down", 1.2, 0.0048),
        ("lora", 0.25, 0.0010),
    ] {
        for &x in &xs {
            let lat = base + slope * x as f64;
            let util = (x as f64 / 2048.0).min(1.0);
            text.push_str(&format!("{op},{x},{lat:.6},{util:.6}\n"));
        }
    }
    for &bytes in &[1024u64, 1 << 20, 1 << 26, 1 << 32] {
        let lat = 0.05 + 2.0e-8 * bytes as f64;
        text.push_str(&format!("allreduce,{bytes},{lat:.9}\n"));
    }
    text
}

/// Random small tasks whose operators all exist in `wide_profile` and the
/// two/four stage backbones.
pub fn random_tasks(rng: &mut ChaCha8Rng, count: usize) -> Vec<Task> {
    let attach_choices: [&[&str]; 4] = [&["proj"], &["mlp_down"], &["qkv"], &["proj", "mlp_down"]];
    (0..count)
        .map(|i| {
            let b = rng.gen_range(1..=8u64);
            let l = *[32u64, 64, 128, 256, 512].choose(rng).unwrap();
            let n_seqs = rng.gen_range(1..=4usize);
            let seqs = (0..n_seqs).map(|_| rng.gen_range(1..=l)).collect();
            let attach = attach_choices[rng.gen_range(0..attach_choices.len())];
            let mut t = task_with(&format!("t{i:02}"), b, l, seqs, attach);
            t.activation_bytes_per_token = 512 * rng.gen_range(1..=4u64);
            t.grad_buffer_bytes = (rng.gen_range(1..=4u64)) << 20;
            t
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Fusion oracle: enumerate every contiguous partition
// ---------------------------------------------------------------------------

/// Minimum objective over all 2^(m-1) contiguous partitions, scored with the
/// same public range-cost evaluator the planner exposes.
pub fn min_over_contiguous_partitions(range_cost: &[Vec<f64>], num_stages: usize) -> f64 {
    let m = range_cost.len();
    assert!(m >= 1 && m <= 20, "oracle is exponential in task count");
    let mut best = f64::INFINITY;
    for mask in 0u32..(1u32 << (m - 1)) {
        let mut cuts: Vec<usize> = (0..m - 1).filter(|&i| mask & (1 << i) != 0).collect();
        cuts.push(m - 1);
        let obj = fusion::partition_objective(range_cost, &cuts, num_stages);
        if obj < best {
            best = obj;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Grouping oracle: exact integer balance objective
// ---------------------------------------------------------------------------

/// Scale-free balance score over integer loads: sum over buckets of
/// (p·bucket_sum − total)², computed exactly. Minimizing this orders
/// partitions identically to minimizing the float variance of bucket sums.
pub fn integer_objective(loads: &[i64], assignment: &[usize], buckets: usize) -> i128 {
    let total: i128 = loads.iter().map(|&v| v as i128).sum();
    let mut sums = vec![0i128; buckets];
    for (i, &b) in assignment.iter().enumerate() {
        sums[b] += loads[i] as i128;
    }
    sums.iter()
        .map(|&s| {
            let d = buckets as i128 * s - total;
            d * d
        })
        .sum()
}

/// Exhaustive minimum of `integer_objective` over every set partition into
/// exactly `buckets` non-empty parts, enumerated in canonical labeling
/// (bucket labels appear in first-use order).
pub fn min_integer_objective(loads: &[i64], buckets: usize) -> i128 {
    let n = loads.len();
    assert!(n >= 1 && n <= 12, "oracle enumeration is exponential");
    let mut assign = vec![0usize; n];
    let mut best = i128::MAX;
    fn walk(
        loads: &[i64],
        assign: &mut Vec<usize>,
        pos: usize,
        max_used: usize,
        buckets: usize,
        best: &mut i128,
    ) {
        let n = loads.len();
        if pos == n {
            if max_used + 1 == buckets {
                let obj = integer_objective(loads, assign, buckets);
                if obj < *best {
                    *best = obj;
                }
            }
            return;
        }
        // canonical labeling: a new bucket label may only be one past the
        // largest label used so far
        let cap = (max_used + 1).min(buckets - 1);
        for b in 0..=cap {
            assign[pos] = b;
            walk(loads, assign, pos + 1, max_used.max(b), buckets, best);
        }
    }
    walk(loads, &mut assign, 1, 0, buckets, &mut best);
    best
}

// ---------------------------------------------------------------------------
// Launch-schedule oracles
// ---------------------------------------------------------------------------

/// True when `order` lists every subgraph exactly once and never places a
/// successor before its predecessor.
pub fn is_linear_extension(graph: &SubgraphGraph, order: &[usize]) -> bool {
    let n = graph.subgraphs.len();
    if order.len() != n {
        return false;
    }
    let mut pos = vec![usize::MAX; n];
    for (i, &sg) in order.iter().enumerate() {
        if sg >= n || pos[sg] != usize::MAX {
            return false;
        }
        pos[sg] = i;
    }
    graph.edges.iter().all(|e| pos[e.from] < pos[e.to])
}

/// Exhaustive minimum two-channel latency over every linear extension of the
/// subgraph precedence graph. Returns `None` when more than `cap` complete
/// orders would need evaluating.
pub fn min_two_channel_total(graph: &SubgraphGraph, cap: usize) -> Option<f64> {
    let n = graph.subgraphs.len();
    let mut indeg = vec![0usize; n];
    let mut succs: Vec<Vec<usize>> = vec![Vec::new(); n];
    for e in &graph.edges {
        indeg[e.to] += 1;
        succs[e.from].push(e.to);
    }
    let mut order = Vec::with_capacity(n);
    let mut best = f64::INFINITY;
    let mut evaluated = 0usize;
    fn walk(
        graph: &SubgraphGraph,
        succs: &[Vec<usize>],
        indeg: &mut Vec<usize>,
        order: &mut Vec<usize>,
        placed: &mut Vec<bool>,
        best: &mut f64,
        evaluated: &mut usize,
        cap: usize,
    ) -> bool {
        let n = indeg.len();
        if order.len() == n {
            *evaluated += 1;
            if *evaluated > cap {
                return false;
            }
            let t = evaluate_schedule(graph, order).expect("oracle order is a linear extension");
            if t.total_ms < *best {
                *best = t.total_ms;
            }
            return true;
        }
        for v in 0..n {
            if placed[v] || indeg[v] != 0 {
                continue;
            }
            placed[v] = true;
            order.push(v);
            for &s in &succs[v] {
                indeg[s] -= 1;
            }
            let ok = walk(graph, succs, indeg, order, placed, best, evaluated, cap);
            for &s in &succs[v] {
                indeg[s] += 1;
            }
            order.pop();
            placed[v] = false;
            if !ok {
                return false;
            }
        }
        true
    }
    let mut placed = vec![false; n];
    let finished = walk(
        graph,
        &succs,
        &mut indeg,
        &mut order,
        &mut placed,
        &mut best,
        &mut evaluated,
        cap,
    );
    if finished {
        Some(best)
    } else {
        None
    }
}

/// Random per-stage operator chains: a few independent chains of compute
/// nodes, optionally broken by an in-line collective, optionally ending in a
/// trailing collective, optionally carrying an adapter branch.
pub fn random_stage_dags(rng: &mut ChaCha8Rng, allow_adapters: bool) -> Vec<Dag> {
    let chains = rng.gen_range(2..=4usize);
    let mut dags = Vec::with_capacity(chains);
    for c in 0..chains {
        let mut dag = Dag::new(&format!("chain{c}"));
        let n = rng.gen_range(2..=5usize);
        let mut computes = Vec::with_capacity(n);
        for i in 0..n {
            let dur = rng.gen_range(1.0..10.0f64);
            computes.push(dag.add_node(OpNode::compute(&format!("c{c}n{i}"), dur)));
        }
        // split the chain with one in-line collective at a random seam
        if n >= 3 && rng.gen_bool(0.6) {
            let seam = rng.gen_range(1..n - 1);
            let dur = rng.gen_range(0.5..4.0f64);
            let comm = dag.add_node(OpNode::comm("allreduce", dur));
            for i in 0..n - 1 {
                if i == seam {
                    dag.add_edge(computes[i], comm);
                    dag.add_edge(comm, computes[i + 1]);
                } else {
                    dag.add_edge(computes[i], computes[i + 1]);
                }
            }
        } else {
            for i in 0..n - 1 {
                dag.add_edge(computes[i], computes[i + 1]);
            }
        }
        if rng.gen_bool(0.5) {
            let dur = rng.gen_range(0.5..4.0f64);
            let comm = dag.add_node(OpNode::comm("allreduce", dur));
            dag.add_edge(*computes.last().unwrap(), comm);
        }
        if allow_adapters && n >= 2 && rng.gen_bool(0.4) {
            // branch around an interior operator, like an attached adapter
            let at = rng.gen_range(0..n - 1);
            let dur = rng.gen_range(0.2..1.5f64);
            let util = rng.gen_range(0.1..0.9f64);
            let owner = format!("chain{c}");
            let mut node = OpNode::adapter(&format!("ad{c}"), &owner, dur, util);
            node.attach_op = Some(format!("c{c}n{at}"));
            node.profile_op = "lora".to_string();
            let a = dag.add_node(node);
            if at > 0 {
                dag.add_edge(computes[at - 1], a);
            }
            dag.add_edge(a, computes[at + 1]);
        }
        dags.push(dag);
    }
    dags
}

// ---------------------------------------------------------------------------
// Pipeline profile builders
// ---------------------------------------------------------------------------

/// One uniform bucket per latency: every stage of bucket `i` costs `ts[i]`.
pub fn uniform_profiles(ts: &[f64], stages: usize) -> Vec<BucketStageProfile> {
    ts.iter()
        .enumerate()
        .map(|(i, &t)| uniform_bucket(i, t, stages))
        .collect()
}

/// Buckets whose stage latencies share one per-instance stage shape, scaled
/// per bucket, so first-stage order equals whole-pipeline order.
/// Per-bucket scalings of one shared stage shape. Both factors live on a
/// quarter-unit grid so every product and every event-time sum is exact in
/// f64, letting ordering comparisons run at zero tolerance.
pub fn proportional_profiles(
    rng: &mut ChaCha8Rng,
    buckets: usize,
    stages: usize,
) -> Vec<BucketStageProfile> {
    let shape: Vec<f64> = (0..stages)
        .map(|_| rng.gen_range(2..=8u32) as f64 * 0.25)
        .collect();
    (0..buckets)
        .map(|b| {
            let scale = rng.gen_range(2..=40u32) as f64 * 0.25;
            BucketStageProfile {
                bucket_id: b,
                stage_ms: shape.iter().map(|&s| s * scale).collect(),
                microbatch_activation_bytes: 1024.0,
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// CLI harness
// ---------------------------------------------------------------------------

/// Run the packaged binary and capture its exit code and streams.
pub fn run_cli(args: &[&str]) -> (i32, String, String) {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_peftplan"))
        .args(args)
        .output()
        .expect("binary must spawn");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}
