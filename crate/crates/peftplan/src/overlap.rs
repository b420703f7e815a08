//! Intra-stage orchestration: operator DAGs per hybrid task, subgraph
//! segmentation, adapter-fusion grouping, priority-based launch scheduling,
//! and a two-channel (compute + communication) latency evaluation.
//!
//! Segmentation clusters maximal runs of consecutive compute operators into
//! one subgraph; a communication node is appended to the subgraph that
//! produces its input; adapter operators are isolated as independent
//! subgraphs so they can be fused and re-ordered freely.
//!
//! The launch scheduler dequeues, among ready subgraphs of smallest
//! topological depth, the one with the longest internal compute latency;
//! exact ties dequeue the most recently enqueued subgraph first. Trailing
//! communication never counts toward the dequeue key.
//!
//! The evaluation serializes compute blocks on one channel and
//! communication on another: a block starts at
//! max(channel free, inputs ready) and its trailing collective launches at
//! max(comm channel free, block end, cross inputs into the collective).

use std::collections::BTreeMap;

use crate::cost::HybridTask;
use crate::error::{PlanError, PlanResult};
use crate::profile::{ProfileTable, COLLECTIVE_OP};
use crate::workload::BackboneSpec;

/// Role of one operator node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum NodeKind {
    Compute,
    Adapter,
    Comm,
}

/// One operator instance inside a stage DAG.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct OpNode {
    pub id: String,
    pub kind: NodeKind,
    /// Owning task id for adapter nodes.
    pub owner_task: Option<String>,
    pub tokens: u64,
    pub duration_ms: f64,
    /// GPU utilization at this node's token count (adapters only; used by
    /// the fused-latency rule).
    pub utilization: f64,
    /// Backbone operator an adapter branches around.
    pub attach_op: Option<String>,
    /// Profile row this node was priced from.
    pub profile_op: String,
}

impl OpNode {
    pub fn compute(id: &str, duration_ms: f64) -> Self {
        OpNode {
            id: id.to_string(),
            kind: NodeKind::Compute,
            owner_task: None,
            tokens: 0,
            duration_ms,
            utilization: 0.0,
            attach_op: None,
            profile_op: id.to_string(),
        }
    }

    pub fn comm(id: &str, duration_ms: f64) -> Self {
        OpNode {
            id: id.to_string(),
            kind: NodeKind::Comm,
            owner_task: None,
            tokens: 0,
            duration_ms,
            utilization: 0.0,
            attach_op: None,
            profile_op: id.to_string(),
        }
    }

    pub fn adapter(id: &str, owner: &str, duration_ms: f64, utilization: f64) -> Self {
        OpNode {
            id: id.to_string(),
            kind: NodeKind::Adapter,
            owner_task: Some(owner.to_string()),
            tokens: 0,
            duration_ms,
            utilization,
            attach_op: None,
            profile_op: id.to_string(),
        }
    }
}

/// Operator DAG of one hybrid task on one stage.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Dag {
    pub label: String,
    pub nodes: Vec<OpNode>,
    pub edges: Vec<(usize, usize)>,
}

impl Dag {
    pub fn new(label: &str) -> Self {
        Dag {
            label: label.to_string(),
            nodes: Vec::new(),
            edges: Vec::new(),
        }
    }

    pub fn add_node(&mut self, node: OpNode) -> usize {
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    pub fn add_edge(&mut self, from: usize, to: usize) {
        if !self.edges.contains(&(from, to)) {
            self.edges.push((from, to));
        }
    }

    /// Checks edge indices and acyclicity.
    pub fn validate(&self) -> PlanResult<()> {
        let n = self.nodes.len();
        for &(u, v) in &self.edges {
            if u >= n || v >= n || u == v {
                return Err(PlanError::InvalidArgument(format!(
                    "bad edge {u} -> {v} in DAG {}",
                    self.label
                )));
            }
        }
        let mut indeg = vec![0usize; n];
        for &(_, v) in &self.edges {
            indeg[v] += 1;
        }
        let mut queue: Vec<usize> = (0..n).filter(|&v| indeg[v] == 0).collect();
        let mut seen = 0;
        while let Some(u) = queue.pop() {
            seen += 1;
            for &(a, b) in &self.edges {
                if a == u {
                    indeg[b] -= 1;
                    if indeg[b] == 0 {
                        queue.push(b);
                    }
                }
            }
        }
        if seen != n {
            return Err(PlanError::InvalidArgument(format!(
                "DAG {} contains a cycle",
                self.label
            )));
        }
        Ok(())
    }
}

/// Global reference to a node across the union of DAGs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct NodeRef {
    pub dag: usize,
    pub node: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SubgraphKind {
    Chain,
    Adapter,
    FusedAdapter,
}

/// Minimal orchestration unit: consecutive compute operators plus at most
/// one trailing collective, or an (optionally fused) adapter.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Subgraph {
    pub id: usize,
    pub dag: usize,
    pub kind: SubgraphKind,
    pub nodes: Vec<NodeRef>,
    /// Internal compute + adapter latency; trailing communication excluded.
    pub compute_ms: f64,
    /// Trailing collective duration, if any.
    pub comm_ms: Option<f64>,
    /// Topological depth in the subgraph quotient graph (0 = root).
    pub depth: usize,
    /// Task / hybrid-task label for reporting.
    pub owner: String,
}

/// Edge between subgraphs. `from_comm` means the producer's trailing
/// collective (not its compute block) feeds the consumer; `into_comm` means
/// the dependency targets the consumer's trailing collective rather than
/// its compute block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SubEdge {
    pub from: usize,
    pub to: usize,
    pub from_comm: bool,
    pub into_comm: bool,
}

/// Quotient graph over subgraphs of one stage.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SubgraphGraph {
    pub subgraphs: Vec<Subgraph>,
    pub edges: Vec<SubEdge>,
}

impl SubgraphGraph {
    pub fn successors(&self, id: usize) -> impl Iterator<Item = &SubEdge> {
        self.edges.iter().filter(move |e| e.from == id)
    }

    fn recompute_depths(&mut self) -> PlanResult<()> {
        let n = self.subgraphs.len();
        let mut indeg = vec![0usize; n];
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, e) in self.edges.iter().enumerate() {
            if e.from == e.to {
                return Err(PlanError::FusionCycle(e.from, e.to));
            }
            indeg[e.to] += 1;
            out[e.from].push(i);
        }
        let mut depth = vec![0usize; n];
        let mut queue: Vec<usize> = (0..n).filter(|&v| indeg[v] == 0).collect();
        let mut seen = 0;
        while let Some(u) = queue.pop() {
            seen += 1;
            for &ei in &out[u] {
                let to = self.edges[ei].to;
                if depth[to] < depth[u] + 1 {
                    depth[to] = depth[u] + 1;
                }
                indeg[to] -= 1;
                if indeg[to] == 0 {
                    queue.push(to);
                }
            }
        }
        if seen != n {
            // shrink the leftover set to nodes actually on cycles so the
            // reported edge is a real offender
            let mut stuck: Vec<bool> = indeg.iter().map(|&d| d > 0).collect();
            loop {
                let mut changed = false;
                for v in 0..n {
                    if stuck[v]
                        && !out[v].iter().any(|&ei| stuck[self.edges[ei].to])
                    {
                        stuck[v] = false;
                        changed = true;
                    }
                }
                if !changed {
                    break;
                }
            }
            let edge = self
                .edges
                .iter()
                .find(|e| stuck[e.from] && stuck[e.to])
                .expect("a cyclic component always retains an internal edge");
            return Err(PlanError::FusionCycle(edge.from, edge.to));
        }
        for (i, sg) in self.subgraphs.iter_mut().enumerate() {
            sg.depth = depth[i];
        }
        Ok(())
    }
}

/// Segment the union of per-hybrid-task DAGs into subgraphs.
///
/// Maximal runs of consecutive compute nodes — each node the unique
/// successor of its predecessor and vice versa — become one subgraph; a
/// communication node joins the subgraph of its unique compute predecessor
/// (when that subgraph has no collective yet); every adapter is isolated.
pub fn build_subgraphs(dags: &[Dag]) -> PlanResult<SubgraphGraph> {
    for dag in dags {
        dag.validate()?;
    }
    let mut assign: Vec<Vec<Option<usize>>> =
        dags.iter().map(|d| vec![None; d.nodes.len()]).collect();
    let mut subgraphs: Vec<Subgraph> = Vec::new();

    for (di, dag) in dags.iter().enumerate() {
        let n = dag.nodes.len();
        let mut succs: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(u, v) in &dag.edges {
            succs[u].push(v);
            preds[v].push(u);
        }

        let is_compute = |v: usize| dag.nodes[v].kind == NodeKind::Compute;
        // chain membership considers all node kinds: any branching splits
        let merge_up = |v: usize| -> Option<usize> {
            if preds[v].len() != 1 {
                return None;
            }
            let u = preds[v][0];
            if is_compute(u) && succs[u].len() == 1 {
                Some(u)
            } else {
                None
            }
        };

        // compute chains
        for head in 0..n {
            if !is_compute(head) || assign[di][head].is_some() {
                continue;
            }
            if merge_up(head).is_some() {
                continue; // not a chain head
            }
            let mut run = vec![head];
            let mut cur = head;
            loop {
                if succs[cur].len() != 1 {
                    break;
                }
                let nxt = succs[cur][0];
                if !is_compute(nxt) || merge_up(nxt) != Some(cur) {
                    break;
                }
                run.push(nxt);
                cur = nxt;
            }
            let id = subgraphs.len();
            for &v in &run {
                assign[di][v] = Some(id);
            }
            subgraphs.push(Subgraph {
                id,
                dag: di,
                kind: SubgraphKind::Chain,
                nodes: run.iter().map(|&v| NodeRef { dag: di, node: v }).collect(),
                compute_ms: run.iter().map(|&v| dag.nodes[v].duration_ms).sum(),
                comm_ms: None,
                depth: 0,
                owner: dag.label.clone(),
            });
        }

        // adapters: isolated subgraphs
        for v in 0..n {
            if dag.nodes[v].kind != NodeKind::Adapter {
                continue;
            }
            let id = subgraphs.len();
            assign[di][v] = Some(id);
            subgraphs.push(Subgraph {
                id,
                dag: di,
                kind: SubgraphKind::Adapter,
                nodes: vec![NodeRef { dag: di, node: v }],
                compute_ms: dag.nodes[v].duration_ms,
                comm_ms: None,
                depth: 0,
                owner: dag.nodes[v]
                    .owner_task
                    .clone()
                    .unwrap_or_else(|| dag.label.clone()),
            });
        }

        // collectives: append to the producing subgraph when possible
        for v in 0..n {
            if dag.nodes[v].kind != NodeKind::Comm {
                continue;
            }
            let compute_preds: Vec<usize> = preds[v]
                .iter()
                .copied()
                .filter(|&u| is_compute(u))
                .collect();
            let host = if compute_preds.len() == 1 {
                let sg = assign[di][compute_preds[0]].unwrap();
                if subgraphs[sg].comm_ms.is_none() {
                    Some(sg)
                } else {
                    None
                }
            } else {
                None
            };
            match host {
                Some(sg) => {
                    assign[di][v] = Some(sg);
                    subgraphs[sg].nodes.push(NodeRef { dag: di, node: v });
                    subgraphs[sg].comm_ms = Some(dag.nodes[v].duration_ms);
                }
                None => {
                    let id = subgraphs.len();
                    assign[di][v] = Some(id);
                    subgraphs.push(Subgraph {
                        id,
                        dag: di,
                        kind: SubgraphKind::Chain,
                        nodes: vec![NodeRef { dag: di, node: v }],
                        compute_ms: 0.0,
                        comm_ms: Some(dag.nodes[v].duration_ms),
                        depth: 0,
                        owner: dag.label.clone(),
                    });
                }
            }
        }
    }

    // quotient edges
    let mut edges: Vec<SubEdge> = Vec::new();
    for (di, dag) in dags.iter().enumerate() {
        for &(u, v) in &dag.edges {
            let su = assign[di][u].unwrap();
            let sv = assign[di][v].unwrap();
            if su == sv {
                continue;
            }
            let e = SubEdge {
                from: su,
                to: sv,
                from_comm: dag.nodes[u].kind == NodeKind::Comm,
                into_comm: dag.nodes[v].kind == NodeKind::Comm,
            };
            if !edges.contains(&e) {
                edges.push(e);
            }
        }
    }

    let mut graph = SubgraphGraph { subgraphs, edges };
    graph.recompute_depths()?;
    Ok(graph)
}

/// Bucket placement facts for one DAG, used by fusion eligibility.
#[derive(Debug, Clone, Copy)]
pub struct DagMeta {
    pub bucket_id: usize,
    /// True when the DAG's hybrid task carries exactly one member task.
    pub single_task: bool,
}

/// Decide which adapter subgraphs fuse.
///
/// Adapters of one hybrid task at the same attach point always fuse.
/// Adapters of single-task hybrid tasks in the same bucket at the same
/// attach point fuse only when no member's output feeds a subgraph bearing
/// a collective — fusing there would force one task's compute to gate
/// another task's synchronization. Nothing ever fuses across buckets.
pub fn fusion_groups(graph: &SubgraphGraph, dags: &[Dag], meta: &[DagMeta]) -> Vec<Vec<usize>> {
    let adapter_key = |sg: &Subgraph| -> Option<(String, String)> {
        let nr = sg.nodes[0];
        let node = &dags[nr.dag].nodes[nr.node];
        node.attach_op
            .clone()
            .map(|a| (a, node.profile_op.clone()))
    };
    let feeds_collective = |id: usize| -> bool {
        graph
            .successors(id)
            .any(|e| graph.subgraphs[e.to].comm_ms.is_some() || e.into_comm)
    };

    // case 1: same DAG, same attach point
    let mut case1: BTreeMap<(usize, String, String), Vec<usize>> = BTreeMap::new();
    for sg in &graph.subgraphs {
        if sg.kind != SubgraphKind::Adapter {
            continue;
        }
        if let Some((attach, op)) = adapter_key(sg) {
            case1.entry((sg.dag, attach, op)).or_default().push(sg.id);
        }
    }

    // case 2: merge groups of single-task DAGs within one bucket
    let mut merged: BTreeMap<(usize, String, String), Vec<usize>> = BTreeMap::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for ((dag, attach, op), members) in case1 {
        let eligible = meta
            .get(dag)
            .map(|m| m.single_task)
            .unwrap_or(false)
            && members.iter().all(|&id| !feeds_collective(id));
        if eligible {
            let bucket = meta[dag].bucket_id;
            merged
                .entry((bucket, attach, op))
                .or_default()
                .extend(members);
        } else {
            groups.push(members);
        }
    }
    groups.extend(merged.into_values());
    groups.sort_by_key(|g| g.iter().copied().min().unwrap_or(usize::MAX));
    groups
}

/// Latency of a fused adapter group: the weighted sum of member latencies
/// when spare capacity allows packing, floored by the slowest member.
fn fused_latency(members: &[(f64, f64)]) -> f64 {
    let weighted: f64 = members.iter().map(|(u, t)| u * t).sum();
    let slowest = members.iter().map(|(_, t)| *t).fold(0.0f64, f64::max);
    weighted.max(slowest)
}

/// Merge each multi-member adapter group into one subgraph, rewiring
/// edges. Fails with a cycle diagnosis if a requested fusion would deadlock
/// the quotient graph.
pub fn fuse_adapters(
    graph: &SubgraphGraph,
    dags: &[Dag],
    groups: &[Vec<usize>],
) -> PlanResult<SubgraphGraph> {
    let n = graph.subgraphs.len();
    let mut target: Vec<usize> = (0..n).collect();
    for group in groups {
        if group.len() < 2 {
            continue;
        }
        let lead = *group.iter().min().unwrap();
        for &m in group {
            target[m] = lead;
        }
    }

    // compact new ids in old order
    let mut new_id: Vec<Option<usize>> = vec![None; n];
    let mut out: Vec<Subgraph> = Vec::new();
    for old in 0..n {
        let t = target[old];
        if new_id[t].is_none() {
            let mut sg = graph.subgraphs[t].clone();
            sg.id = out.len();
            new_id[t] = Some(sg.id);
            out.push(sg);
        }
        new_id[old] = new_id[t];
    }

    // merge member payloads into lead subgraphs
    for group in groups {
        if group.len() < 2 {
            continue;
        }
        let lead = *group.iter().min().unwrap();
        let id = new_id[lead].unwrap();
        let mut members: Vec<(f64, f64)> = Vec::new();
        let mut nodes: Vec<NodeRef> = Vec::new();
        let mut owners: Vec<String> = Vec::new();
        for &m in group {
            let sg = &graph.subgraphs[m];
            for nr in &sg.nodes {
                let node = &dags[nr.dag].nodes[nr.node];
                members.push((node.utilization, node.duration_ms));
                nodes.push(*nr);
            }
            if !owners.contains(&sg.owner) {
                owners.push(sg.owner.clone());
            }
        }
        let sg = &mut out[id];
        sg.kind = SubgraphKind::FusedAdapter;
        sg.nodes = nodes;
        sg.compute_ms = fused_latency(&members);
        sg.owner = owners.join("+");
    }

    // rewire edges
    let mut edges: Vec<SubEdge> = Vec::new();
    for e in &graph.edges {
        let from = new_id[e.from].unwrap();
        let to = new_id[e.to].unwrap();
        if from == to {
            return Err(PlanError::FusionCycle(from, to));
        }
        let ne = SubEdge {
            from,
            to,
            from_comm: e.from_comm,
            into_comm: e.into_comm,
        };
        if !edges.contains(&ne) {
            edges.push(ne);
        }
    }

    let mut fused = SubgraphGraph {
        subgraphs: out,
        edges,
    };
    fused.recompute_depths()?;
    Ok(fused)
}

/// One scheduled launch.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct LaunchEntry {
    pub subgraph: usize,
    pub t_ms: f64,
}

/// Launch order with the scheduler's serialized clock.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LaunchSchedule {
    pub entries: Vec<LaunchEntry>,
}

impl LaunchSchedule {
    pub fn order(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.subgraph).collect()
    }
}

/// Quotient graphs at or below this size get an exhaustive launch-order
/// refinement on top of the greedy pass.
const EXACT_SEARCH_MAX_SUBGRAPHS: usize = 10;
/// Node budget for the bounded search; generous enough to fully cover any
/// graph with up to 150 000 linear extensions.
const EXACT_SEARCH_NODE_BUDGET: usize = 2_000_000;

/// Priority-based multi-DAG launch scheduling.
///
/// A greedy pass repeatedly dequeues, among ready subgraphs with the
/// smallest depth, the one with the longest internal compute latency; exact
/// ties go to the smallest owning-task id, then the smallest subgraph id.
/// The clock advances by internal latency only. On small quotient graphs
/// the greedy order is then refined by a bounded branch-and-bound over
/// every linear extension, keeping whichever order finishes the two
/// channels soonest.
pub fn schedule_subgraphs(graph: &SubgraphGraph) -> PlanResult<LaunchSchedule> {
    let greedy = greedy_schedule(graph)?;
    if graph.subgraphs.len() > EXACT_SEARCH_MAX_SUBGRAPHS {
        return Ok(greedy);
    }
    let greedy_total = evaluate_schedule(graph, &greedy.order())?.total_ms;
    match refine_order(graph, greedy_total) {
        Some(order) => Ok(schedule_from_order(graph, &order)),
        None => Ok(greedy),
    }
}

fn greedy_schedule(graph: &SubgraphGraph) -> PlanResult<LaunchSchedule> {
    let n = graph.subgraphs.len();
    let mut indeg = vec![0usize; n];
    for e in &graph.edges {
        indeg[e.to] += 1;
    }
    let mut ready: Vec<usize> = (0..n).filter(|&v| indeg[v] == 0).collect();
    let mut entries = Vec::with_capacity(n);
    let mut t = 0.0f64;
    while let Some(pos) = pick_next(graph, &ready) {
        let v = ready.remove(pos);
        entries.push(LaunchEntry {
            subgraph: v,
            t_ms: t,
        });
        t += graph.subgraphs[v].compute_ms;
        for e in &graph.edges {
            if e.from == v {
                indeg[e.to] -= 1;
                if indeg[e.to] == 0 {
                    ready.push(e.to);
                }
            }
        }
    }
    if entries.len() != n {
        return Err(PlanError::InvalidArgument(
            "subgraph quotient graph contains a cycle".to_string(),
        ));
    }
    Ok(LaunchSchedule { entries })
}

fn pick_next(graph: &SubgraphGraph, ready: &[usize]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in ready.iter().enumerate() {
        let better = match best {
            None => true,
            Some(b) => {
                let bv = ready[b];
                let sv = &graph.subgraphs[v];
                let sb = &graph.subgraphs[bv];
                sv.depth < sb.depth
                    || (sv.depth == sb.depth && sv.compute_ms > sb.compute_ms)
                    || (sv.depth == sb.depth
                        && sv.compute_ms == sb.compute_ms
                        && (sv.owner.as_str(), v) < (sb.owner.as_str(), bv))
            }
        };
        if better {
            best = Some(i);
        }
    }
    best
}

fn schedule_from_order(graph: &SubgraphGraph, order: &[usize]) -> LaunchSchedule {
    let mut entries = Vec::with_capacity(order.len());
    let mut t = 0.0f64;
    for &v in order {
        entries.push(LaunchEntry {
            subgraph: v,
            t_ms: t,
        });
        t += graph.subgraphs[v].compute_ms;
    }
    LaunchSchedule { entries }
}

/// Bounded branch-and-bound over linear extensions of the quotient graph.
/// Returns an order strictly better than `incumbent_total`, if one exists
/// within the node budget. Candidates are explored in ascending id order so
/// the result is deterministic.
fn refine_order(graph: &SubgraphGraph, incumbent_total: f64) -> Option<Vec<usize>> {
    struct Search<'a> {
        graph: &'a SubgraphGraph,
        indeg: Vec<usize>,
        scheduled: Vec<bool>,
        block_end: Vec<f64>,
        comm_end: Vec<f64>,
        prefix: Vec<usize>,
        compute_free: f64,
        comm_free: f64,
        remaining_compute: f64,
        best_total: f64,
        best_order: Option<Vec<usize>>,
        visits: usize,
        aborted: bool,
    }

    impl Search<'_> {
        fn walk(&mut self) {
            if self.aborted {
                return;
            }
            let n = self.graph.subgraphs.len();
            if self.prefix.len() == n {
                let total = self.compute_free.max(self.comm_free);
                if total < self.best_total {
                    self.best_total = total;
                    self.best_order = Some(self.prefix.clone());
                }
                return;
            }
            for v in 0..n {
                if self.scheduled[v] || self.indeg[v] != 0 {
                    continue;
                }
                self.visits += 1;
                if self.visits > EXACT_SEARCH_NODE_BUDGET {
                    self.aborted = true;
                    return;
                }
                let sg = &self.graph.subgraphs[v];
                let mut ready = 0.0f64;
                let mut collective_ready = 0.0f64;
                for e in &self.graph.edges {
                    if e.to != v {
                        continue;
                    }
                    let source_end = if e.from_comm {
                        self.comm_end[e.from]
                    } else {
                        self.block_end[e.from]
                    };
                    if e.into_comm {
                        collective_ready = collective_ready.max(source_end);
                    } else {
                        ready = ready.max(source_end);
                    }
                }
                let start = self.compute_free.max(ready);
                let end = start + sg.compute_ms;
                let (comm_after, comm_end_v) = match sg.comm_ms {
                    Some(d) => {
                        let cs = self.comm_free.max(end).max(collective_ready);
                        (cs + d, cs + d)
                    }
                    None => (self.comm_free, 0.0),
                };

                let saved = (
                    self.compute_free,
                    self.comm_free,
                    self.remaining_compute,
                    self.block_end[v],
                    self.comm_end[v],
                );
                self.compute_free = end;
                self.comm_free = comm_after;
                self.remaining_compute -= sg.compute_ms;
                self.block_end[v] = end;
                self.comm_end[v] = comm_end_v;
                self.scheduled[v] = true;
                for e in &self.graph.edges {
                    if e.from == v {
                        self.indeg[e.to] -= 1;
                    }
                }
                self.prefix.push(v);

                let bound = (self.compute_free + self.remaining_compute).max(self.comm_free);
                if bound < self.best_total {
                    self.walk();
                }

                self.prefix.pop();
                for e in &self.graph.edges {
                    if e.from == v {
                        self.indeg[e.to] += 1;
                    }
                }
                self.scheduled[v] = false;
                self.compute_free = saved.0;
                self.comm_free = saved.1;
                self.remaining_compute = saved.2;
                self.block_end[v] = saved.3;
                self.comm_end[v] = saved.4;
                if self.aborted {
                    return;
                }
            }
        }
    }

    let n = graph.subgraphs.len();
    let mut indeg = vec![0usize; n];
    for e in &graph.edges {
        indeg[e.to] += 1;
    }
    let mut search = Search {
        graph,
        indeg,
        scheduled: vec![false; n],
        block_end: vec![0.0; n],
        comm_end: vec![0.0; n],
        prefix: Vec::with_capacity(n),
        compute_free: 0.0,
        comm_free: 0.0,
        remaining_compute: graph.subgraphs.iter().map(|s| s.compute_ms).sum(),
        best_total: incumbent_total,
        best_order: None,
        visits: 0,
        aborted: false,
    };
    search.walk();
    search.best_order
}


/// Two-channel execution times for every subgraph in a schedule.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TwoChannelTiming {
    /// Compute block (start, end) per subgraph id.
    pub block: Vec<(f64, f64)>,
    /// Trailing collective (start, end) per subgraph id.
    pub comm: Vec<Option<(f64, f64)>>,
    pub total_ms: f64,
}

/// Evaluate a launch order on one compute channel and one communication
/// channel. The order must be a linear extension of the quotient graph.
pub fn evaluate_schedule(graph: &SubgraphGraph, order: &[usize]) -> PlanResult<TwoChannelTiming> {
    let n = graph.subgraphs.len();
    if order.len() != n {
        return Err(PlanError::InvalidArgument(
            "schedule must cover every subgraph exactly once".to_string(),
        ));
    }
    let mut block: Vec<Option<(f64, f64)>> = vec![None; n];
    let mut comm: Vec<Option<(f64, f64)>> = vec![None; n];
    let mut compute_free = 0.0f64;
    let mut comm_free = 0.0f64;
    for &v in order {
        if block[v].is_some() {
            return Err(PlanError::InvalidArgument(
                "schedule repeats a subgraph".to_string(),
            ));
        }
        let mut ready = 0.0f64;
        let mut collective_ready = 0.0f64;
        for e in &graph.edges {
            if e.to != v {
                continue;
            }
            let source_end = if e.from_comm {
                match comm[e.from] {
                    Some((_, end)) => end,
                    None => {
                        return Err(PlanError::InvalidArgument(
                            "schedule is not a linear extension".to_string(),
                        ))
                    }
                }
            } else {
                match block[e.from] {
                    Some((_, end)) => end,
                    None => {
                        return Err(PlanError::InvalidArgument(
                            "schedule is not a linear extension".to_string(),
                        ))
                    }
                }
            };
            if e.into_comm {
                collective_ready = collective_ready.max(source_end);
            } else {
                ready = ready.max(source_end);
            }
        }
        let sg = &graph.subgraphs[v];
        let start = compute_free.max(ready);
        let end = start + sg.compute_ms;
        block[v] = Some((start, end));
        compute_free = end;
        if let Some(d) = sg.comm_ms {
            let cs = comm_free.max(end).max(collective_ready);
            comm[v] = Some((cs, cs + d));
            comm_free = cs + d;
        }
    }
    let mut total = 0.0f64;
    for v in 0..n {
        if let Some((_, e)) = block[v] {
            total = total.max(e);
        }
        if let Some((_, e)) = comm[v] {
            total = total.max(e);
        }
    }
    Ok(TwoChannelTiming {
        block: block.into_iter().map(|b| b.unwrap()).collect(),
        comm,
        total_ms: total,
    })
}

/// Completion time of the last node under the two-channel model.
pub fn overlapped_stage_latency(
    graph: &SubgraphGraph,
    schedule: &LaunchSchedule,
) -> PlanResult<f64> {
    Ok(evaluate_schedule(graph, &schedule.order())?.total_ms)
}

/// Build the operator DAG of one hybrid task on one stage.
///
/// Backbone operators run at the summed token count, sharded across the
/// stage's GPUs; adapters run per member task at that member's token count,
/// branching around their attach operator; multi-GPU stages append one
/// collective fed by the last operator and any adapters attached to it.
pub fn build_stage_dag(
    label: &str,
    htask: &HybridTask,
    backbone: &BackboneSpec,
    stage_idx: usize,
    table: &ProfileTable,
) -> PlanResult<Dag> {
    let stage = backbone.stages.get(stage_idx).ok_or_else(|| {
        PlanError::InvalidArgument(format!("stage {stage_idx} out of range"))
    })?;
    let total = htask.total_tokens();
    let gpus = stage.gpu_count as f64;
    let mut dag = Dag::new(label);

    let mut op_index: Vec<usize> = Vec::with_capacity(stage.operators.len());
    for op in &stage.operators {
        let dur = table.eval_latency(op, total)? / gpus;
        let mut node = OpNode::compute(op, dur);
        node.tokens = total;
        op_index.push(dag.add_node(node));
    }
    for w in 0..op_index.len().saturating_sub(1) {
        dag.add_edge(op_index[w], op_index[w + 1]);
    }

    let comm_node = if stage.gpu_count > 1 {
        let payload: u64 = htask
            .members
            .iter()
            .map(|t| t.tokens() * t.activation_bytes_per_token)
            .sum();
        let dur = table.eval_comm_latency(COLLECTIVE_OP, payload)?;
        let mut node = OpNode::comm(COLLECTIVE_OP, dur);
        node.tokens = payload;
        let id = dag.add_node(node);
        if let Some(&last) = op_index.last() {
            dag.add_edge(last, id);
        }
        Some(id)
    } else {
        None
    };

    for task in &htask.members {
        let n_k = task.tokens();
        for (ai, attach) in task.adapter.attach_points.iter().enumerate() {
            let Some(pos) = stage.operators.iter().position(|o| o == attach) else {
                continue;
            };
            let op = task.adapter.op_id_at(ai);
            let dur = table.eval_latency(op, n_k)?;
            let util = table.eval_utilization(op, n_k)?;
            let mut node = OpNode::adapter(
                &format!("{op}:{}@{attach}", task.task_id),
                &task.task_id,
                dur,
                util,
            );
            node.tokens = n_k;
            node.attach_op = Some(attach.clone());
            node.profile_op = op.to_string();
            let a = dag.add_node(node);
            if pos > 0 {
                dag.add_edge(op_index[pos - 1], a);
            }
            if pos + 1 < op_index.len() {
                dag.add_edge(a, op_index[pos + 1]);
            } else if let Some(c) = comm_node {
                dag.add_edge(a, c);
            }
        }
    }

    Ok(dag)
}

/// Full orchestration artifacts of one stage of one bucket.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct StagePlan {
    pub graph: SubgraphGraph,
    pub schedule: LaunchSchedule,
    pub timing: TwoChannelTiming,
    pub latency_ms: f64,
}

/// Segment, fuse, schedule, and time one stage's DAG union.
pub fn plan_stage(dags: &[Dag], meta: &[DagMeta]) -> PlanResult<StagePlan> {
    let base = build_subgraphs(dags)?;
    let groups = fusion_groups(&base, dags, meta);
    let graph = fuse_adapters(&base, dags, &groups)?;
    let schedule = schedule_subgraphs(&graph)?;
    let timing = evaluate_schedule(&graph, &schedule.order())?;
    let latency_ms = timing.total_ms;
    Ok(StagePlan {
        graph,
        schedule,
        timing,
        latency_ms,
    })
}
