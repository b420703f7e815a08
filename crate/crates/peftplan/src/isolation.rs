//! Arithmetic isolation of spatially batched tasks.
//!
//! Batching stacks task inputs row-wise into one matrix product. Because a
//! matrix product computes each output row from that row's inputs alone, and
//! the inner accumulation order here is fixed (row-major, k innermost), the
//! rows a task receives from the batched product are bit-identical to the
//! rows it would get running alone — including non-finite values, which stay
//! confined to the rows that produced them.

use crate::error::{PlanError, PlanResult};

/// Dense row-major matrix of f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    values: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> PlanResult<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(PlanError::InvalidArgument(
                "ragged rows in matrix literal".to_string(),
            ));
        }
        Ok(DenseMatrix {
            rows: r,
            cols: c,
            values: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = DenseMatrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.values[i * cols + j] = f(i, j);
            }
        }
        m
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.cols + j] = v;
    }

    /// Copy of rows `[start, start+count)`.
    pub fn row_slice(&self, start: usize, count: usize) -> DenseMatrix {
        assert!(start + count <= self.rows, "row slice out of bounds");
        DenseMatrix {
            rows: count,
            cols: self.cols,
            values: self.values[start * self.cols..(start + count) * self.cols].to_vec(),
        }
    }

    /// Stack matrices row-wise; all must share a column count.
    pub fn vstack(parts: &[DenseMatrix]) -> PlanResult<DenseMatrix> {
        let cols = parts
            .first()
            .ok_or_else(|| PlanError::InvalidArgument("vstack of nothing".to_string()))?
            .cols;
        if parts.iter().any(|p| p.cols != cols) {
            return Err(PlanError::InvalidArgument(
                "vstack parts disagree on column count".to_string(),
            ));
        }
        let rows = parts.iter().map(|p| p.rows).sum();
        let mut values = Vec::with_capacity(rows * cols);
        for p in parts {
            values.extend_from_slice(&p.values);
        }
        Ok(DenseMatrix { rows, cols, values })
    }

    /// Exact bitwise equality, treating each f64 by its bit pattern so NaN
    /// payloads and signed zeros compare faithfully.
    pub fn bits_equal(&self, other: &DenseMatrix) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// `A·B` with a fixed accumulation order: for each output element the inner
/// products accumulate over k in ascending order. Every caller shares this
/// one kernel, which is what makes batched and per-task runs bit-identical.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> PlanResult<DenseMatrix> {
    if a.cols != b.rows {
        return Err(PlanError::InvalidArgument(format!(
            "matmul shape mismatch: {}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = DenseMatrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut acc = 0.0f64;
            for k in 0..a.cols {
                acc += a.get(i, k) * b.get(k, j);
            }
            out.values[i * out.cols + j] = acc;
        }
    }
    Ok(out)
}

/// `A·Bᵀ` with the same fixed accumulation order, reading B by rows so no
/// transposed copy is materialized.
pub fn matmul_transposed(a: &DenseMatrix, b: &DenseMatrix) -> PlanResult<DenseMatrix> {
    if a.cols != b.cols {
        return Err(PlanError::InvalidArgument(format!(
            "transposed matmul shape mismatch: {}x{} times ({}x{})ᵀ",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = DenseMatrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        for j in 0..b.rows {
            let mut acc = 0.0f64;
            for k in 0..a.cols {
                acc += a.get(i, k) * b.get(j, k);
            }
            out.values[i * out.cols + j] = acc;
        }
    }
    Ok(out)
}

/// Forward pass of several task batches through one shared weight matrix:
/// computes `[B1; B2; ...]·W` once, slices the product back per task, and
/// verifies each slice is bit-identical to that task's standalone `B_k·W`.
pub fn batched_forward(
    batches: &[DenseMatrix],
    weight: &DenseMatrix,
) -> PlanResult<(DenseMatrix, Vec<DenseMatrix>)> {
    let stacked = DenseMatrix::vstack(batches)?;
    let product = matmul(&stacked, weight)?;
    let mut slices = Vec::with_capacity(batches.len());
    let mut row = 0;
    for (k, batch) in batches.iter().enumerate() {
        let slice = product.row_slice(row, batch.rows);
        let alone = matmul(batch, weight)?;
        if !slice.bits_equal(&alone) {
            return Err(PlanError::InvalidArgument(format!(
                "batched forward diverged from standalone run for batch {k}"
            )));
        }
        row += batch.rows;
        slices.push(slice);
    }
    Ok((product, slices))
}

/// Backward pass: input gradients `G_k·Wᵀ` for each task's output-gradient
/// block, computed batched and verified against standalone runs.
pub fn batched_backward(
    out_grads: &[DenseMatrix],
    weight: &DenseMatrix,
) -> PlanResult<(DenseMatrix, Vec<DenseMatrix>)> {
    let stacked = DenseMatrix::vstack(out_grads)?;
    let product = matmul_transposed(&stacked, weight)?;
    let mut slices = Vec::with_capacity(out_grads.len());
    let mut row = 0;
    for (k, grad) in out_grads.iter().enumerate() {
        let slice = product.row_slice(row, grad.rows);
        let alone = matmul_transposed(grad, weight)?;
        if !slice.bits_equal(&alone) {
            return Err(PlanError::InvalidArgument(format!(
                "batched backward diverged from standalone run for batch {k}"
            )));
        }
        row += grad.rows;
        slices.push(slice);
    }
    Ok((product, slices))
}
