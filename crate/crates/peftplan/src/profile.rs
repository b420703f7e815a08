//! Measured operator profiles: latency and GPU utilization as functions of
//! token count, plus collective-communication latency as a function of
//! payload bytes.
//!
//! The on-disk format is delimited text with a header row. Operator rows
//! have four columns (`op_id, token_count, latency_ms, utilization`);
//! communication rows have three (`comm_id, payload_bytes, latency_ms`).

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{PlanError, PlanResult};

/// Conventional id for the tensor-parallel collective appended to stages
/// with more than one GPU.
pub const COLLECTIVE_OP: &str = "allreduce";

/// One measured operator sample.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OpSample {
    pub token_count: u64,
    pub latency_ms: f64,
    pub utilization: f64,
}

/// One measured collective sample.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CommSample {
    pub payload_bytes: u64,
    pub latency_ms: f64,
}

/// Profiled latencies/utilizations for every operator the planner may see.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ProfileTable {
    /// Per-operator samples, sorted strictly ascending by token count.
    pub ops: BTreeMap<String, Vec<OpSample>>,
    /// Per-collective samples, sorted strictly ascending by payload.
    pub comms: BTreeMap<String, Vec<CommSample>>,
}

impl ProfileTable {
    pub fn has_op(&self, op_id: &str) -> bool {
        self.ops.contains_key(op_id)
    }

    pub fn has_comm(&self, comm_id: &str) -> bool {
        self.comms.contains_key(comm_id)
    }

    /// Validate sample-list invariants: strictly increasing x, positive and
    /// non-decreasing latency, utilization within [0, 1].
    pub fn validate(&self) -> PlanResult<()> {
        for (op, samples) in &self.ops {
            if samples.is_empty() {
                return Err(PlanError::InvalidArgument(format!(
                    "operator '{op}' has no samples"
                )));
            }
            for w in samples.windows(2) {
                if w[1].token_count <= w[0].token_count {
                    return Err(PlanError::InvalidArgument(format!(
                        "operator '{op}': token counts must be strictly increasing"
                    )));
                }
                if w[1].latency_ms < w[0].latency_ms {
                    return Err(PlanError::InvalidArgument(format!(
                        "operator '{op}': latency must be non-decreasing in tokens"
                    )));
                }
            }
            for s in samples {
                if !(s.latency_ms > 0.0) {
                    return Err(PlanError::InvalidArgument(format!(
                        "operator '{op}': latencies must be >0"
                    )));
                }
                if !(0.0..=1.0).contains(&s.utilization) {
                    return Err(PlanError::InvalidArgument(format!(
                        "operator '{op}': utilization must lie in [0,1]"
                    )));
                }
            }
        }
        for (comm, samples) in &self.comms {
            if samples.is_empty() {
                return Err(PlanError::InvalidArgument(format!(
                    "collective '{comm}' has no samples"
                )));
            }
            for w in samples.windows(2) {
                if w[1].payload_bytes <= w[0].payload_bytes {
                    return Err(PlanError::InvalidArgument(format!(
                        "collective '{comm}': payloads must be strictly increasing"
                    )));
                }
            }
            for s in samples {
                if !(s.latency_ms > 0.0) {
                    return Err(PlanError::InvalidArgument(format!(
                        "collective '{comm}': latencies must be >0"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Operator latency at `tokens`, piecewise-linear between bracketing
    /// samples. Above the sampled range the last two samples are
    /// extrapolated linearly, clamped to at least the last sample's value;
    /// below the range the first two samples are extrapolated, clamped into
    /// (0, first sample]. A single-sample operator is treated as constant.
    pub fn eval_latency(&self, op_id: &str, tokens: u64) -> PlanResult<f64> {
        let samples = self
            .ops
            .get(op_id)
            .ok_or_else(|| PlanError::UnknownOperator(op_id.to_string()))?;
        Ok(eval_xy(
            samples.iter().map(|s| (s.token_count as f64, s.latency_ms)),
            tokens as f64,
        ))
    }

    /// Operator GPU utilization at `tokens`; same interpolation scheme as
    /// `eval_latency`, clamped into [0, 1].
    pub fn eval_utilization(&self, op_id: &str, tokens: u64) -> PlanResult<f64> {
        let samples = self
            .ops
            .get(op_id)
            .ok_or_else(|| PlanError::UnknownOperator(op_id.to_string()))?;
        let u = eval_xy(
            samples.iter().map(|s| (s.token_count as f64, s.utilization)),
            tokens as f64,
        );
        Ok(u.clamp(0.0, 1.0))
    }

    /// Collective latency at `payload_bytes`; same interpolation scheme.
    pub fn eval_comm_latency(&self, comm_id: &str, payload_bytes: u64) -> PlanResult<f64> {
        let samples = self
            .comms
            .get(comm_id)
            .ok_or_else(|| PlanError::UnknownOperator(comm_id.to_string()))?;
        Ok(eval_xy(
            samples
                .iter()
                .map(|s| (s.payload_bytes as f64, s.latency_ms)),
            payload_bytes as f64,
        ))
    }
}

/// Piecewise-linear evaluation over (x, y) samples sorted ascending in x.
/// Linear extrapolation beyond either end: above the range the result is
/// clamped to at least the last y; below the range it is clamped into
/// (0, first y].
fn eval_xy(samples: impl Iterator<Item = (f64, f64)>, x: f64) -> f64 {
    let pts: Vec<(f64, f64)> = samples.collect();
    debug_assert!(!pts.is_empty());
    if pts.len() == 1 {
        return pts[0].1;
    }
    let first = pts[0];
    let last = pts[pts.len() - 1];
    if x <= first.0 {
        let (a, b) = (pts[0], pts[1]);
        let slope = (b.1 - a.1) / (b.0 - a.0);
        return (a.1 + slope * (x - a.0)).clamp(0.0, first.1);
    }
    if x >= last.0 {
        let (a, b) = (pts[pts.len() - 2], pts[pts.len() - 1]);
        let slope = (b.1 - a.1) / (b.0 - a.0);
        return (b.1 + slope * (x - b.0)).max(last.1);
    }
    for w in pts.windows(2) {
        let (a, b) = (w[0], w[1]);
        if x <= b.0 {
            let frac = (x - a.0) / (b.0 - a.0);
            return a.1 + frac * (b.1 - a.1);
        }
    }
    last.1
}

/// Parse a profile table from delimited text. The first non-empty line must
/// be the header naming the operator columns; subsequent rows are operator
/// samples (4 columns) or communication samples (3 columns). `#` starts a
/// comment line.
pub fn parse_profile(text: &str) -> PlanResult<ProfileTable> {
    let mut table = ProfileTable::default();
    let mut saw_header = false;
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let lineno = idx + 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !saw_header {
            if !line.contains("op_id") {
                return Err(PlanError::Parse {
                    line: lineno,
                    message: "header row naming op_id columns is required".to_string(),
                });
            }
            saw_header = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parse_f = |s: &str, what: &str| -> PlanResult<f64> {
            s.parse::<f64>().map_err(|_| PlanError::Parse {
                line: lineno,
                message: format!("bad {what}: '{s}'"),
            })
        };
        let parse_u = |s: &str, what: &str| -> PlanResult<u64> {
            s.parse::<u64>().map_err(|_| PlanError::Parse {
                line: lineno,
                message: format!("bad {what}: '{s}'"),
            })
        };
        match fields.len() {
            4 => {
                let sample = OpSample {
                    token_count: parse_u(fields[1], "token_count")?,
                    latency_ms: parse_f(fields[2], "latency_ms")?,
                    utilization: parse_f(fields[3], "utilization")?,
                };
                table
                    .ops
                    .entry(fields[0].to_string())
                    .or_default()
                    .push(sample);
            }
            3 => {
                let sample = CommSample {
                    payload_bytes: parse_u(fields[1], "payload_bytes")?,
                    latency_ms: parse_f(fields[2], "latency_ms")?,
                };
                table
                    .comms
                    .entry(fields[0].to_string())
                    .or_default()
                    .push(sample);
            }
            n => {
                return Err(PlanError::Parse {
                    line: lineno,
                    message: format!("expected 3 or 4 columns, found {n}"),
                });
            }
        }
    }
    if !saw_header {
        return Err(PlanError::Parse {
            line: 1,
            message: "profile file is empty".to_string(),
        });
    }
    for samples in table.ops.values_mut() {
        samples.sort_by_key(|s| s.token_count);
    }
    for samples in table.comms.values_mut() {
        samples.sort_by_key(|s| s.payload_bytes);
    }
    table.validate()?;
    Ok(table)
}

/// Load a profile table from a file.
pub fn load_profile(path: &std::path::Path) -> PlanResult<ProfileTable> {
    let text = std::fs::read_to_string(path)?;
    parse_profile(&text)
}

/// Shape of a synthetically generated operator profile:
/// `latency(x) = base + slope * max(0, x - knee)`. Below the knee the GPU
/// has spare capacity and extra tokens ride along for free; above it
/// latency grows linearly. Utilization ramps as `min(1, x / knee)`.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticOp {
    pub base_ms: f64,
    pub slope_ms_per_token: f64,
    pub knee_tokens: f64,
}

impl SyntheticOp {
    pub fn latency(&self, tokens: f64) -> f64 {
        self.base_ms + self.slope_ms_per_token * (tokens - self.knee_tokens).max(0.0)
    }

    pub fn utilization(&self, tokens: f64) -> f64 {
        (tokens / self.knee_tokens).min(1.0)
    }

    /// Sample the shape at the given token counts.
    pub fn samples(&self, xs: &[u64]) -> Vec<OpSample> {
        xs.iter()
            .map(|&x| OpSample {
                token_count: x,
                latency_ms: self.latency(x as f64),
                utilization: self.utilization(x as f64),
            })
            .collect()
    }
}

/// Generate a profile table from synthetic saturating shapes; used by tests
/// and the self-test command. `ops` maps operator id to shape; `comms` maps
/// collective id to (base_ms, ms_per_byte) sampled linearly.
pub fn synthetic_table(
    ops: &[(&str, SyntheticOp)],
    comms: &[(&str, f64, f64)],
    xs: &[u64],
) -> ProfileTable {
    let mut table = ProfileTable::default();
    for (id, shape) in ops {
        table.ops.insert(id.to_string(), shape.samples(xs));
    }
    for (id, base, per_byte) in comms {
        let payloads = [1u64 << 10, 1 << 16, 1 << 20, 1 << 24];
        table.comms.insert(
            id.to_string(),
            payloads
                .iter()
                .map(|&p| CommSample {
                    payload_bytes: p,
                    latency_ms: base + per_byte * p as f64,
                })
                .collect(),
        );
    }
    table
}

/// A small fixed table used by unit tests across the crate.
#[cfg(any(test, feature = "test-fixtures"))]
pub fn test_table() -> ProfileTable {
    let shape = SyntheticOp {
        base_ms: 1.0,
        slope_ms_per_token: 0.004,
        knee_tokens: 512.0,
    };
    let adapter = SyntheticOp {
        base_ms: 0.25,
        slope_ms_per_token: 0.001,
        knee_tokens: 512.0,
    };
    synthetic_table(
        &[
            ("qkv", shape),
            ("attn_core", shape),
            ("proj", shape),
            ("mlp_up", shape),
            ("mlp_down", shape),
            ("lora", adapter),
        ],
        &[(COLLECTIVE_OP, 0.05, 2e-8)],
        &[64, 128, 256, 512, 1024, 2048, 4096],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_point_table() -> ProfileTable {
        let mut t = ProfileTable::default();
        t.ops.insert(
            "op".to_string(),
            vec![
                OpSample {
                    token_count: 100,
                    latency_ms: 10.0,
                    utilization: 0.25,
                },
                OpSample {
                    token_count: 200,
                    latency_ms: 20.0,
                    utilization: 0.5,
                },
            ],
        );
        t
    }

    #[test]
    fn interpolates_midpoint() {
        let t = two_point_table();
        assert_eq!(t.eval_latency("op", 150).unwrap(), 15.0);
        assert_eq!(t.eval_utilization("op", 150).unwrap(), 0.375);
    }

    #[test]
    fn extrapolates_above_range_clamped_to_last() {
        let t = two_point_table();
        // slope 0.1 ms/token beyond 200 tokens
        assert_eq!(t.eval_latency("op", 300).unwrap(), 30.0);
        // a flat profile must not extrapolate downward
        let mut flat = two_point_table();
        flat.ops.get_mut("op").unwrap()[1].latency_ms = 10.0;
        assert_eq!(flat.eval_latency("op", 10_000).unwrap(), 10.0);
    }

    #[test]
    fn below_range_clamps_into_first_sample() {
        let t = two_point_table();
        assert_eq!(t.eval_latency("op", 50).unwrap(), 5.0);
        // steep profiles cannot go negative
        let mut steep = two_point_table();
        steep.ops.get_mut("op").unwrap()[0].latency_ms = 1.0;
        assert!(steep.eval_latency("op", 1).unwrap() >= 0.0);
    }

    #[test]
    fn single_sample_is_constant() {
        let mut t = ProfileTable::default();
        t.ops.insert(
            "op".into(),
            vec![OpSample {
                token_count: 128,
                latency_ms: 3.0,
                utilization: 0.4,
            }],
        );
        assert_eq!(t.eval_latency("op", 1).unwrap(), 3.0);
        assert_eq!(t.eval_latency("op", 10_000).unwrap(), 3.0);
    }

    #[test]
    fn monotone_samples_give_monotone_queries() {
        let t = test_table();
        let mut prev = 0.0;
        for tokens in (0..200).map(|i| i * 40) {
            let v = t.eval_latency("qkv", tokens).unwrap();
            assert!(v >= prev, "latency decreased at {tokens} tokens");
            prev = v;
        }
    }

    #[test]
    fn parses_mixed_rows_and_rejects_malformed() {
        let text = "op_id,token_count,latency_ms,utilization\n\
                    gemm,64,0.5,0.2\n\
                    gemm,128,0.9,0.4\n\
                    allreduce,1024,0.08\n";
        let t = parse_profile(text).unwrap();
        assert!(t.has_op("gemm"));
        assert!(t.has_comm("allreduce"));
        assert_eq!(t.ops["gemm"].len(), 2);

        let bad = "gemm,64,0.5,0.2\n";
        let err = parse_profile(bad).unwrap_err();
        assert!(matches!(err, PlanError::Parse { line: 1, .. }));

        let decreasing = "op_id,token_count,latency_ms,utilization\n\
                          gemm,128,0.9,0.4\n\
                          gemm,256,0.5,0.2\n";
        assert!(parse_profile(decreasing).is_err());
    }

    #[test]
    fn utilization_is_clamped() {
        let mut t = two_point_table();
        t.ops.get_mut("op").unwrap()[1].utilization = 1.0;
        // extrapolating utilization above the range would exceed 1.0
        assert_eq!(t.eval_utilization("op", 10_000).unwrap(), 1.0);
    }
}
