//! Chunk-based data alignment: pack each task's sequences into bins of the
//! task's padded length, split the bins into shared fixed-size chunks, and
//! account for padding. Padding a task would incur with its own natural
//! chunk size is intra-task (billable to that task); only the excess forced
//! by aligning different tasks to one shared chunk counts as inter-task.
//!
//! With power-of-two lengths the shared chunk divides every task's natural
//! chunk, so chunking introduces zero inter-task padding — the advantage
//! over padding every row to the global maximum length.

use serde::{Deserialize, Serialize};

use crate::error::{PlanError, PlanResult};
use crate::workload::Task;

/// One bin of packed sequences, all from one task's global batch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Pack {
    pub owner_task: String,
    /// (index into the task's sequence list, length) in packing order.
    pub members: Vec<(usize, u64)>,
    /// Sum of member lengths.
    pub total_len: u64,
    pub capacity: u64,
    /// Start offset of each member within the pack.
    pub offsets: Vec<u64>,
}

/// First-fit-decreasing packing of one task's sequences into bins of the
/// task's padded length. Deterministic: lengths sort descending with ties
/// kept in original order, and each sequence lands in the first open bin
/// with room.
pub fn pack_sequences(task: &Task) -> PlanResult<Vec<Pack>> {
    let capacity = task.padded_seq_len;
    if capacity == 0 {
        return Err(PlanError::InvalidArgument(format!(
            "task '{}' has zero padded length",
            task.task_id
        )));
    }
    if task.seq_lengths.is_empty() {
        return Err(PlanError::InvalidArgument(format!(
            "task '{}' has no sequences to pack",
            task.task_id
        )));
    }
    let mut order: Vec<usize> = (0..task.seq_lengths.len()).collect();
    order.sort_by(|&a, &b| {
        task.seq_lengths[b]
            .cmp(&task.seq_lengths[a])
            .then(a.cmp(&b))
    });
    let mut packs: Vec<Pack> = Vec::new();
    for idx in order {
        let len = task.seq_lengths[idx];
        if len > capacity {
            return Err(PlanError::InvalidArgument(format!(
                "sequence {idx} of task '{}' exceeds the pack capacity",
                task.task_id
            )));
        }
        let slot = packs
            .iter()
            .position(|p| p.total_len + len <= p.capacity);
        match slot {
            Some(i) => {
                let p = &mut packs[i];
                p.offsets.push(p.total_len);
                p.members.push((idx, len));
                p.total_len += len;
            }
            None => packs.push(Pack {
                owner_task: task.task_id.clone(),
                members: vec![(idx, len)],
                total_len: len,
                capacity,
                offsets: vec![0],
            }),
        }
    }
    Ok(packs)
}

/// Chosen shared chunk size for one hybrid task.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ChunkChoice {
    pub chunk_size: u64,
    /// True when the common power-of-two divisor fell below the minimum, so
    /// some task's data will not tile the chunk exactly.
    pub forced_padding: bool,
}

fn pow2_divisor(v: u64) -> u64 {
    if v == 0 {
        1
    } else {
        1u64 << v.trailing_zeros().min(62)
    }
}

/// Shared chunk size: the largest power of two dividing every member
/// task's padded length, floored at `chunk_min`.
pub fn choose_chunk_size(tasks: &[Task], chunk_min: u64) -> PlanResult<ChunkChoice> {
    if tasks.is_empty() {
        return Err(PlanError::InvalidArgument(
            "chunk size needs at least one task".to_string(),
        ));
    }
    if chunk_min == 0 {
        return Err(PlanError::InvalidArgument(
            "chunk_min must be ≥1".to_string(),
        ));
    }
    let common = tasks
        .iter()
        .map(|t| pow2_divisor(t.padded_seq_len))
        .min()
        .unwrap();
    Ok(ChunkChoice {
        chunk_size: common.max(chunk_min),
        forced_padding: common < chunk_min,
    })
}

/// One aligned chunk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: usize,
    pub task: String,
    /// Index into the layout's pack list.
    pub pack: usize,
    /// Token offset within the pack's stream.
    pub offset: u64,
    pub valid_tokens: u64,
    pub pad_tokens: u64,
    /// Share of `pad_tokens` attributable to cross-task alignment.
    pub inter_pad_tokens: u64,
    /// Previous chunk of the same pack (KV-reuse ordering).
    pub depends_on: Option<usize>,
}

/// Aggregate padding accounting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutStats {
    pub original_tokens: u64,
    pub intra_task_pad: u64,
    pub inter_task_pad: u64,
}

/// Full chunked layout of one hybrid task's packs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChunkLayout {
    pub chunk_size: u64,
    pub chunks: Vec<Chunk>,
    pub stats: LayoutStats,
}

/// Split every pack into consecutive `chunk_size` windows. The final
/// partial window is zero-padded; padding up to what the task's own natural
/// chunk would need is intra-task, any excess is inter-task. Chunks of one
/// pack form a dependency chain in order.
pub fn chunk_partition(
    packs: &[Pack],
    tasks: &[Task],
    chunk_size: u64,
    chunk_min: u64,
) -> PlanResult<ChunkLayout> {
    if chunk_size == 0 {
        return Err(PlanError::InvalidArgument(
            "chunk_size must be ≥1".to_string(),
        ));
    }
    let own_chunk = |task_id: &str| -> PlanResult<u64> {
        let task = tasks
            .iter()
            .find(|t| t.task_id == task_id)
            .ok_or_else(|| {
                PlanError::InvalidArgument(format!("pack owner '{task_id}' not in task list"))
            })?;
        Ok(pow2_divisor(task.padded_seq_len).max(chunk_min))
    };

    let mut chunks = Vec::new();
    let mut stats = LayoutStats::default();
    for (pi, pack) in packs.iter().enumerate() {
        let own = own_chunk(&pack.owner_task)?;
        let count = pack.total_len.div_ceil(chunk_size).max(1);
        let padded = count * chunk_size;
        let pad = padded - pack.total_len;
        let own_pad = pack.total_len.div_ceil(own).max(1) * own - pack.total_len;
        let inter = pad.saturating_sub(own_pad);
        let intra = pad - inter;
        stats.original_tokens += pack.total_len;
        stats.intra_task_pad += intra;
        stats.inter_task_pad += inter;

        let mut prev: Option<usize> = None;
        for c in 0..count {
            let offset = c * chunk_size;
            let valid = pack.total_len.saturating_sub(offset).min(chunk_size);
            let pad_here = chunk_size - valid;
            // attribute inter-task pad to the trailing chunks first
            let inter_here = inter
                .saturating_sub(chunks_pad_after(count, c, chunk_size, pack.total_len))
                .min(pad_here);
            let id = chunks.len();
            chunks.push(Chunk {
                chunk_id: id,
                task: pack.owner_task.clone(),
                pack: pi,
                offset,
                valid_tokens: valid,
                pad_tokens: pad_here,
                inter_pad_tokens: inter_here,
                depends_on: prev,
            });
            prev = Some(id);
        }
    }
    debug_assert_eq!(
        stats.original_tokens,
        packs.iter().map(|p| p.total_len).sum::<u64>()
    );
    Ok(ChunkLayout {
        chunk_size,
        chunks,
        stats,
    })
}

/// Pad tokens in chunks strictly after chunk `c`.
fn chunks_pad_after(count: u64, c: u64, chunk_size: u64, total_len: u64) -> u64 {
    let later_start = (c + 1) * chunk_size;
    let later_valid = total_len.saturating_sub(later_start);
    let later_chunks = count - (c + 1);
    later_chunks * chunk_size - later_valid.min(later_chunks * chunk_size)
}

/// The comparison baseline: every sequence becomes one row padded to the
/// global maximum padded length across tasks. Padding to the task's own
/// padded length is intra-task; the rest is inter-task.
pub fn zero_pad_layout(tasks: &[Task]) -> PlanResult<LayoutStats> {
    if tasks.is_empty() {
        return Err(PlanError::InvalidArgument(
            "zero-pad baseline needs at least one task".to_string(),
        ));
    }
    let global = tasks.iter().map(|t| t.padded_seq_len).max().unwrap();
    let mut stats = LayoutStats::default();
    for task in tasks {
        for &raw in &task.seq_lengths {
            let raw = raw.min(task.padded_seq_len);
            stats.original_tokens += raw;
            stats.intra_task_pad += task.padded_seq_len - raw;
            stats.inter_task_pad += global - task.padded_seq_len;
        }
    }
    Ok(stats)
}

/// Fraction of user-billable tokens: original over original plus
/// inter-task padding. Intra-task padding is the task's own cost and does
/// not reduce the fraction.
pub fn effective_fraction(stats: &LayoutStats) -> f64 {
    let denom = stats.original_tokens + stats.inter_task_pad;
    if denom == 0 {
        1.0
    } else {
        stats.original_tokens as f64 / denom as f64
    }
}

/// Aligned tokens per micro-batch for one task: its chunked token volume
/// (valid plus pad) spread over the configured micro-batch count.
pub fn aligned_tokens_per_microbatch(
    layout: &ChunkLayout,
    task_id: &str,
    micro_batches: usize,
) -> u64 {
    let total: u64 = layout
        .chunks
        .iter()
        .filter(|c| c.task == task_id)
        .map(|c| c.valid_tokens + c.pad_tokens)
        .sum();
    total.div_ceil(micro_batches.max(1) as u64)
}
