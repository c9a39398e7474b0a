//! Interaction matrices, bipartite adjacencies, symmetric normalization and
//! the sparse-dense product used by embedding propagation.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{InteractionClass, LabeledPair};

/// Compressed-row sparse matrix with sorted, unique column indices per row.
/// Iteration order is fixed, which keeps training bit-reproducible.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub row_offsets: Vec<usize>,
    pub col_indices: Vec<usize>,
    pub values: Vec<f64>,
}

/// Per-node degree counts of a bipartite adjacency (users first, then videos).
pub type DegreeVector = Vec<usize>;

impl SparseMatrix {
    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        SparseMatrix {
            n_rows,
            n_cols,
            row_offsets: vec![0; n_rows + 1],
            col_indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Build from (row, col, value) entries; duplicates are not allowed.
    pub fn from_entries(
        n_rows: usize,
        n_cols: usize,
        mut entries: Vec<(usize, usize, f64)>,
    ) -> Self {
        entries.sort_unstable_by_key(|&(r, c, _)| (r, c));
        entries.dedup_by_key(|&mut (r, c, _)| (r, c));
        let mut row_offsets = vec![0usize; n_rows + 1];
        for &(r, _, _) in &entries {
            row_offsets[r + 1] += 1;
        }
        for i in 0..n_rows {
            row_offsets[i + 1] += row_offsets[i];
        }
        let (col_indices, values) = entries.into_iter().map(|(_, c, v)| (c, v)).unzip();
        SparseMatrix {
            n_rows,
            n_cols,
            row_offsets,
            col_indices,
            values,
        }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// (column, value) pairs of row `i`, in ascending column order.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let start = self.row_offsets[i];
        let end = self.row_offsets[i + 1];
        self.col_indices[start..end]
            .iter()
            .copied()
            .zip(self.values[start..end].iter().copied())
    }

    pub fn row_nnz(&self, i: usize) -> usize {
        self.row_offsets[i + 1] - self.row_offsets[i]
    }

    /// Degree of every row (count of stored entries).
    pub fn degrees(&self) -> DegreeVector {
        (0..self.n_rows).map(|i| self.row_nnz(i)).collect()
    }

    pub fn transpose(&self) -> SparseMatrix {
        let entries = self
            .iter_entries()
            .map(|(r, c, v)| (c, r, v))
            .collect::<Vec<_>>();
        SparseMatrix::from_entries(self.n_cols, self.n_rows, entries)
    }

    pub fn iter_entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n_rows).flat_map(move |i| self.row(i).map(move |(j, v)| (i, j, v)))
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut dense = Array2::zeros((self.n_rows, self.n_cols));
        for (i, j, v) in self.iter_entries() {
            dense[(i, j)] = v;
        }
        dense
    }
}

/// Exact sparse-dense product `S * M`.
pub fn spmm(s: &SparseMatrix, m: &Array2<f64>) -> Result<Array2<f64>> {
    if s.n_cols != m.nrows() {
        return Err(Error::ShapeMismatch {
            context: format!(
                "spmm: {}x{} times {}x{}",
                s.n_rows,
                s.n_cols,
                m.nrows(),
                m.ncols()
            ),
        });
    }
    let mut out = Array2::zeros((s.n_rows, m.ncols()));
    for i in 0..s.n_rows {
        let mut out_row = out.row_mut(i);
        for (j, v) in s.row(i) {
            out_row.scaled_add(v, &m.row(j));
        }
    }
    Ok(out)
}

/// Binary |U| x |V| interaction matrix over the train pairs of one class.
/// Negative pairs never enter a graph; they feed the ranking loss instead.
pub fn build_interaction_matrix(
    pairs: &[LabeledPair],
    class: InteractionClass,
    dims: (usize, usize),
) -> Result<SparseMatrix> {
    if class == InteractionClass::Negative {
        return Err(Error::NegativeClassInGraph);
    }
    let entries = pairs
        .iter()
        .filter(|p| p.class == class)
        .map(|p| (p.user_index, p.video_index, 1.0))
        .collect();
    Ok(SparseMatrix::from_entries(dims.0, dims.1, entries))
}

/// Binary matrix over all train pairs regardless of class (the
/// "total interaction" ablation graph).
pub fn build_total_matrix(pairs: &[LabeledPair], dims: (usize, usize)) -> SparseMatrix {
    let entries = pairs
        .iter()
        .map(|p| (p.user_index, p.video_index, 1.0))
        .collect();
    SparseMatrix::from_entries(dims.0, dims.1, entries)
}

/// (|U|+|V|)^2 block matrix [[0, R], [R^T, 0]].
pub fn build_bipartite_adjacency(r: &SparseMatrix) -> SparseMatrix {
    let n = r.n_rows + r.n_cols;
    let mut entries = Vec::with_capacity(2 * r.nnz());
    for (i, j, v) in r.iter_entries() {
        entries.push((i, r.n_rows + j, v));
        entries.push((r.n_rows + j, i, v));
    }
    SparseMatrix::from_entries(n, n, entries)
}

/// Symmetric normalization A~_ij = A_ij / sqrt(d_i * d_j). Rows with zero
/// degree carry no entries, so they stay zero without any division guard.
pub fn symmetric_normalize(a: &SparseMatrix) -> SparseMatrix {
    let degrees = a.degrees();
    let entries = a
        .iter_entries()
        .map(|(i, j, v)| {
            let scale = ((degrees[i] * degrees[j]) as f64).sqrt();
            (i, j, v / scale)
        })
        .collect();
    SparseMatrix::from_entries(a.n_rows, a.n_cols, entries)
}

/// Top-right |U| x |V| block of the normalized adjacency and its transpose.
pub fn extract_blocks(
    a_tilde: &SparseMatrix,
    n_users: usize,
    n_videos: usize,
) -> (SparseMatrix, SparseMatrix) {
    let entries: Vec<(usize, usize, f64)> = (0..n_users)
        .flat_map(|i| {
            a_tilde
                .row(i)
                .filter(move |&(j, _)| j >= n_users)
                .map(move |(j, v)| (i, j - n_users, v))
        })
        .collect();
    let block = SparseMatrix::from_entries(n_users, n_videos, entries);
    let block_t = block.transpose();
    (block, block_t)
}

/// Which interaction graphs drive propagation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GraphMode {
    /// Highly positive graph on one path, less positive on the other.
    #[default]
    Dual,
    /// All train pairs (including quick skips) on a single graph.
    Total,
    /// Only the highly positive graph; the second path stays empty.
    HighlyOnly,
}

impl GraphMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GraphMode::Dual => "dual",
            GraphMode::Total => "total",
            GraphMode::HighlyOnly => "highly_only",
        }
    }
}

impl std::str::FromStr for GraphMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dual" => Ok(GraphMode::Dual),
            "total" => Ok(GraphMode::Total),
            "highly_only" => Ok(GraphMode::HighlyOnly),
            other => Err(Error::InvalidConfig {
                reason: format!("unknown graph mode {other:?}"),
            }),
        }
    }
}

/// The two normalized |U| x |V| interaction blocks plus their transposes.
#[derive(Debug, Clone)]
pub struct DualGraphs {
    pub r_tilde_h: SparseMatrix,
    pub r_tilde_h_t: SparseMatrix,
    pub r_tilde_l: SparseMatrix,
    pub r_tilde_l_t: SparseMatrix,
}

impl DualGraphs {
    pub fn n_users(&self) -> usize {
        self.r_tilde_h.n_rows
    }

    pub fn n_videos(&self) -> usize {
        self.r_tilde_h.n_cols
    }
}

fn normalized_block(r: &SparseMatrix) -> (SparseMatrix, SparseMatrix) {
    let adjacency = build_bipartite_adjacency(r);
    let normalized = symmetric_normalize(&adjacency);
    extract_blocks(&normalized, r.n_rows, r.n_cols)
}

/// Build both propagation graphs from train pairs under the given mode.
/// In `Total` and `HighlyOnly` the second path carries an empty graph.
pub fn build_graphs(
    train_pairs: &[LabeledPair],
    n_users: usize,
    n_videos: usize,
    mode: GraphMode,
) -> Result<DualGraphs> {
    let dims = (n_users, n_videos);
    let (r_h, r_l) = match mode {
        GraphMode::Dual => (
            build_interaction_matrix(train_pairs, InteractionClass::HighlyPositive, dims)?,
            build_interaction_matrix(train_pairs, InteractionClass::LessPositive, dims)?,
        ),
        GraphMode::Total => (
            build_total_matrix(train_pairs, dims),
            SparseMatrix::zeros(n_users, n_videos),
        ),
        GraphMode::HighlyOnly => (
            build_interaction_matrix(train_pairs, InteractionClass::HighlyPositive, dims)?,
            SparseMatrix::zeros(n_users, n_videos),
        ),
    };
    let (r_tilde_h, r_tilde_h_t) = normalized_block(&r_h);
    let (r_tilde_l, r_tilde_l_t) = normalized_block(&r_l);
    Ok(DualGraphs {
        r_tilde_h,
        r_tilde_h_t,
        r_tilde_l,
        r_tilde_l_t,
    })
}
