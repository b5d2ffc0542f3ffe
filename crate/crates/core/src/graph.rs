//! Bipartite interaction graph and the sparse algebra built on it.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::data::InteractionSet;
use crate::error::{Error, Result};

pub type NodeId = u32;

/// Square sparse matrix in compressed row form.
///
/// Column indices are sorted and unique within a row and no stored value is
/// zero. Matrices built by this crate from interaction data are also
/// structurally and numerically symmetric; [`SparseMatrix::is_symmetric`]
/// checks that.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<NodeId>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            row_offsets: vec![0; n + 1],
            col_indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            n,
            row_offsets: (0..=n).collect(),
            col_indices: (0..n as NodeId).collect(),
            values: vec![1.0; n],
        }
    }

    /// Builds from (row, col, value) triplets; duplicates are summed and
    /// resulting zeros dropped.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> Result<Self> {
        if let Some(&(r, c, _)) = triplets.iter().find(|&&(r, c, _)| r >= n || c >= n) {
            return Err(Error::validation(format!("entry ({r}, {c}) outside {n}x{n}")));
        }
        triplets.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut row_offsets = vec![0usize; n + 1];
        let mut col_indices = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut rows = Vec::with_capacity(triplets.len());
        for (r, c, v) in triplets {
            if rows.last() == Some(&r) && col_indices.last() == Some(&(c as NodeId)) {
                *values.last_mut().unwrap() += v;
            } else {
                rows.push(r);
                col_indices.push(c as NodeId);
                values.push(v);
            }
        }
        let mut keep_cols = Vec::with_capacity(col_indices.len());
        let mut keep_vals = Vec::with_capacity(values.len());
        for ((r, c), v) in rows.into_iter().zip(col_indices).zip(values) {
            if v != 0.0 {
                row_offsets[r + 1] += 1;
                keep_cols.push(c);
                keep_vals.push(v);
            }
        }
        for r in 0..n {
            row_offsets[r + 1] += row_offsets[r];
        }
        Ok(Self {
            n,
            row_offsets,
            col_indices: keep_cols,
            values: keep_vals,
        })
    }

    /// Assembles from raw CSR arrays, validating every invariant.
    pub fn from_parts(
        n: usize,
        row_offsets: Vec<usize>,
        col_indices: Vec<NodeId>,
        values: Vec<f64>,
    ) -> Result<Self> {
        let m = Self {
            n,
            row_offsets,
            col_indices,
            values,
        };
        m.check_invariants()?;
        Ok(m)
    }

    pub fn check_invariants(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::validation(msg));
        if self.row_offsets.len() != self.n + 1 || self.row_offsets[0] != 0 {
            return bad("row offsets must have n+1 entries starting at 0".into());
        }
        if *self.row_offsets.last().unwrap() != self.col_indices.len()
            || self.col_indices.len() != self.values.len()
        {
            return bad("offset/index/value lengths disagree".into());
        }
        for r in 0..self.n {
            let (lo, hi) = (self.row_offsets[r], self.row_offsets[r + 1]);
            if lo > hi {
                return bad(format!("row offsets decrease at row {r}"));
            }
            let cols = &self.col_indices[lo..hi];
            if cols.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("row {r} columns not strictly increasing"));
            }
            if cols.last().is_some_and(|&c| c as usize >= self.n) {
                return bad(format!("row {r} has a column outside the matrix"));
            }
            if self.values[lo..hi].iter().any(|&v| v == 0.0 || !v.is_finite()) {
                return bad(format!("row {r} stores a zero or non-finite value"));
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.col_indices.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[NodeId] {
        &self.col_indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, r: usize) -> (&[NodeId], &[f64]) {
        let (lo, hi) = (self.row_offsets[r], self.row_offsets[r + 1]);
        (&self.col_indices[lo..hi], &self.values[lo..hi])
    }

    pub fn row_range(&self, r: usize) -> std::ops::Range<usize> {
        self.row_offsets[r]..self.row_offsets[r + 1]
    }

    /// Storage position of entry (r, c), if present.
    pub fn position(&self, r: usize, c: usize) -> Option<usize> {
        let range = self.row_range(r);
        let lo = range.start;
        self.col_indices[range]
            .binary_search(&(c as NodeId))
            .ok()
            .map(|k| lo + k)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.position(r, c).map_or(0.0, |k| self.values[k])
    }

    /// Iterates `(row, col, value)` in storage order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |r| {
            self.row_range(r)
                .map(move |k| (r, self.col_indices[k] as usize, self.values[k]))
        })
    }

    /// Row index of every stored entry.
    pub fn entry_rows(&self) -> Vec<NodeId> {
        let mut rows = Vec::with_capacity(self.nnz());
        for r in 0..self.n {
            rows.extend(std::iter::repeat_n(r as NodeId, self.row_range(r).len()));
        }
        rows
    }

    pub fn transpose(&self) -> Self {
        let mut counts = vec![0usize; self.n + 1];
        for &c in &self.col_indices {
            counts[c as usize + 1] += 1;
        }
        for r in 0..self.n {
            counts[r + 1] += counts[r];
        }
        let row_offsets = counts.clone();
        let mut next = counts;
        let mut col_indices = vec![0 as NodeId; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for (r, c, v) in self.iter() {
            let k = next[c];
            next[c] += 1;
            col_indices[k] = r as NodeId;
            values[k] = v;
        }
        Self {
            n: self.n,
            row_offsets,
            col_indices,
            values,
        }
    }

    /// Entry-for-entry equality with the transpose.
    pub fn is_symmetric(&self) -> bool {
        *self == self.transpose()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n).map(|r| self.row(r).1.iter().sum()).collect()
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.n, self.n));
        for (r, c, v) in self.iter() {
            out[[r, c]] = v;
        }
        out
    }

    /// Same pattern with replacement values; entries whose new value is zero
    /// are dropped.
    pub fn with_values(&self, values: &[f64]) -> Result<Self> {
        if values.len() != self.nnz() {
            return Err(Error::validation(format!(
                "{} values for a pattern with {} entries",
                values.len(),
                self.nnz()
            )));
        }
        let mut row_offsets = Vec::with_capacity(self.n + 1);
        row_offsets.push(0);
        let mut col_indices = Vec::with_capacity(self.nnz());
        let mut kept = Vec::with_capacity(self.nnz());
        for r in 0..self.n {
            for k in self.row_range(r) {
                if values[k] != 0.0 {
                    col_indices.push(self.col_indices[k]);
                    kept.push(values[k]);
                }
            }
            row_offsets.push(col_indices.len());
        }
        Ok(Self {
            n: self.n,
            row_offsets,
            col_indices,
            values: kept,
        })
    }

    /// Text dump: `n nnz` header, then one `row col value` line per entry.
    pub fn write_dump(&self, path: &Path) -> Result<()> {
        let mut out = String::with_capacity(32 + self.nnz() * 24);
        writeln!(out, "{} {}", self.n, self.nnz()).unwrap();
        for (r, c, v) in self.iter() {
            writeln!(out, "{r} {c} {v:?}").unwrap();
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_dump(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines().enumerate();
        let parse_err = |line: usize, message: &str| Error::Parse {
            line: line + 1,
            message: message.to_owned(),
        };
        let (_, header) = lines.next().ok_or_else(|| parse_err(0, "missing header"))?;
        let mut head = header.split_whitespace().map(str::parse::<usize>);
        let (n, nnz) = match (head.next(), head.next()) {
            (Some(Ok(n)), Some(Ok(nnz))) => (n, nnz),
            _ => return Err(parse_err(0, "header must be `n nnz`")),
        };
        let mut triplets = Vec::with_capacity(nnz);
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            let entry = match f.as_slice() {
                [r, c, v] => (r.parse::<usize>(), c.parse::<usize>(), v.parse::<f64>()),
                _ => return Err(parse_err(i, "expected `row col value`")),
            };
            match entry {
                (Ok(r), Ok(c), Ok(v)) => triplets.push((r, c, v)),
                _ => return Err(parse_err(i, "unparseable entry")),
            }
        }
        if triplets.len() != nnz {
            return Err(Error::Format {
                path: path.to_owned(),
                message: format!("header announces {nnz} entries, found {}", triplets.len()),
            });
        }
        Self::from_triplets(n, triplets)
    }
}

/// Symmetric user–item adjacency. Users occupy `[0, n_users)`, items
/// `[n_users, n_users + n_items)`.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionGraph {
    pub n_users: usize,
    pub n_items: usize,
    pub adjacency: SparseMatrix,
    pub degrees: Vec<f64>,
}

impl InteractionGraph {
    pub fn n(&self) -> usize {
        self.n_users + self.n_items
    }

    pub fn item_node(&self, item: usize) -> usize {
        self.n_users + item
    }

    pub fn is_user(&self, node: usize) -> bool {
        node < self.n_users
    }

    /// SHA-256 over the dimensions and the adjacency pattern, truncated to 64 bits.
    pub fn content_hash(&self) -> u64 {
        let mut h = Sha256::new();
        h.update((self.n_users as u64).to_le_bytes());
        h.update((self.n_items as u64).to_le_bytes());
        for &o in self.adjacency.row_offsets() {
            h.update((o as u64).to_le_bytes());
        }
        for &c in self.adjacency.col_indices() {
            h.update(c.to_le_bytes());
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}

pub fn build_bipartite(train: &InteractionSet) -> Result<InteractionGraph> {
    if train.is_empty() {
        return Err(Error::validation("cannot build a graph from an empty training set"));
    }
    train.validate()?;
    let n_users = train.n_users;
    let n = n_users + train.n_items;
    if n > NodeId::MAX as usize {
        return Err(Error::Capacity(format!("{n} nodes exceed the 32-bit node index")));
    }
    let mut triplets = Vec::with_capacity(2 * train.len());
    for &(u, i) in &train.pairs {
        triplets.push((u, n_users + i, 1.0));
        triplets.push((n_users + i, u, 1.0));
    }
    let adjacency = SparseMatrix::from_triplets(n, triplets)?;
    let degrees = (0..n).map(|r| adjacency.row_range(r).len() as f64).collect();
    Ok(InteractionGraph {
        n_users,
        n_items: train.n_items,
        adjacency,
        degrees,
    })
}

/// Upper bound on `nnz(a * b)`: per row, the smaller of the number of
/// partial products and `n`.
pub fn product_nnz_bound(a: &SparseMatrix, b: &SparseMatrix) -> u64 {
    (0..a.n())
        .into_par_iter()
        .map(|r| {
            let flops: usize = a.row(r).0.iter().map(|&k| b.row_range(k as usize).len()).sum();
            flops.min(b.n()) as u64
        })
        .sum()
}

/// Sparse product by row-wise accumulation.
pub fn spmatmul(a: &SparseMatrix, b: &SparseMatrix) -> Result<SparseMatrix> {
    if a.n() != b.n() {
        return Err(Error::validation(format!(
            "dimension mismatch: {0}x{0} times {1}x{1}",
            a.n(),
            b.n()
        )));
    }
    let n = a.n();
    let rows: Vec<(Vec<NodeId>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map_init(
            || (vec![0.0f64; n], vec![false; n], Vec::<NodeId>::new()),
            |(acc, mark, touched), r| {
                let (a_cols, a_vals) = a.row(r);
                for (&k, &av) in a_cols.iter().zip(a_vals) {
                    let (b_cols, b_vals) = b.row(k as usize);
                    for (&c, &bv) in b_cols.iter().zip(b_vals) {
                        let c = c as usize;
                        if !mark[c] {
                            mark[c] = true;
                            touched.push(c as NodeId);
                        }
                        acc[c] += av * bv;
                    }
                }
                touched.sort_unstable();
                let mut cols = Vec::with_capacity(touched.len());
                let mut vals = Vec::with_capacity(touched.len());
                for &c in touched.iter() {
                    let v = acc[c as usize];
                    if v != 0.0 {
                        cols.push(c);
                        vals.push(v);
                    }
                    acc[c as usize] = 0.0;
                    mark[c as usize] = false;
                }
                touched.clear();
                (cols, vals)
            },
        )
        .collect();

    let nnz = rows.iter().map(|(c, _)| c.len()).sum();
    let mut row_offsets = Vec::with_capacity(n + 1);
    row_offsets.push(0);
    let mut col_indices = Vec::with_capacity(nnz);
    let mut values = Vec::with_capacity(nnz);
    for (cols, vals) in rows {
        col_indices.extend_from_slice(&cols);
        values.extend_from_slice(&vals);
        row_offsets.push(col_indices.len());
    }
    Ok(SparseMatrix {
        n,
        row_offsets,
        col_indices,
        values,
    })
}

/// `a * x` for dense `x` with `a.n()` rows.
pub fn spmv_dense(a: &SparseMatrix, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    spmv_values(a, a.values(), x)
}

/// `a * x` using `values` in place of the stored values of `a`.
pub(crate) fn spmv_values(a: &SparseMatrix, values: &[f64], x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if x.nrows() != a.n() {
        return Err(Error::validation(format!(
            "dimension mismatch: {0}x{0} times {1}x{2}",
            a.n(),
            x.nrows(),
            x.ncols()
        )));
    }
    debug_assert_eq!(values.len(), a.nnz());
    let d = x.ncols();
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let mut out = vec![0.0; a.n() * d];
    if d > 0 {
        out.par_chunks_mut(d).enumerate().for_each(|(r, row_out)| {
            for k in a.row_range(r) {
                let w = values[k];
                let c = a.col_indices[k] as usize;
                for (o, &xv) in row_out.iter_mut().zip(&xs[c * d..(c + 1) * d]) {
                    *o += w * xv;
                }
            }
        });
    }
    Ok(Array2::from_shape_vec((a.n(), d), out).expect("shape matches buffer"))
}

/// Unweighted hop distances from `source`; `None` marks unreachable nodes.
pub fn bfs_distances(g: &InteractionGraph, source: usize) -> Vec<Option<u32>> {
    bfs_on(&g.adjacency, source)
}

pub(crate) fn bfs_on(a: &SparseMatrix, source: usize) -> Vec<Option<u32>> {
    let mut dist = vec![None; a.n()];
    if source >= a.n() {
        return dist;
    }
    dist[source] = Some(0);
    let mut queue = VecDeque::from([source]);
    while let Some(v) = queue.pop_front() {
        let next = dist[v].unwrap() + 1;
        for &w in a.row(v).0 {
            let w = w as usize;
            if dist[w].is_none() {
                dist[w] = Some(next);
                queue.push_back(w);
            }
        }
    }
    dist
}

/// Normalized values `a_uv / sqrt(deg_u deg_v)` for the pattern of `a` with
/// `values` substituted, degrees being value row-sums. Returns the normalized
/// values and the per-node `deg^{-1/2}` (zero for zero-degree nodes).
pub(crate) fn normalize_values(a: &SparseMatrix, values: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let inv_sqrt: Vec<f64> = (0..a.n())
        .map(|r| {
            let deg: f64 = values[a.row_range(r)].iter().sum();
            if deg > 0.0 {
                1.0 / deg.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let mut out = vec![0.0; values.len()];
    for r in 0..a.n() {
        for k in a.row_range(r) {
            out[k] = values[k] * (inv_sqrt[r] * inv_sqrt[a.col_indices[k] as usize]);
        }
    }
    (out, inv_sqrt)
}

/// `D^{-1/2} A D^{-1/2}` with value row-sum degrees; zero-degree rows stay empty.
pub fn symmetric_normalize(a: &SparseMatrix) -> Result<SparseMatrix> {
    if let Some((r, c, v)) = a.iter().find(|&(_, _, v)| v < 0.0) {
        return Err(Error::validation(format!("negative entry {v} at ({r}, {c})")));
    }
    let (values, _) = normalize_values(a, a.values());
    a.with_values(&values)
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::Rng;

    use crate::rng::rng_from_seed;

    fn dense_matmul(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
        let n = a.nrows();
        let m = b.ncols();
        let mut out = Array2::zeros((n, m));
        for i in 0..n {
            for j in 0..m {
                let mut s = 0.0;
                for k in 0..a.ncols() {
                    s += a[[i, k]] * b[[k, j]];
                }
                out[[i, j]] = s;
            }
        }
        out
    }

    fn random_sparse(n: usize, density: f64, seed: u64) -> SparseMatrix {
        let mut rng = rng_from_seed(seed);
        let mut t = Vec::new();
        for r in 0..n {
            for c in 0..n {
                if rng.random::<f64>() < density {
                    t.push((r, c, rng.random_range(-2.0..2.0)));
                }
            }
        }
        SparseMatrix::from_triplets(n, t).unwrap()
    }

    fn random_graph(n_users: usize, n_items: usize, density: f64, seed: u64) -> InteractionGraph {
        let mut rng = rng_from_seed(seed);
        let mut pairs = Vec::new();
        for u in 0..n_users {
            for i in 0..n_items {
                if rng.random::<f64>() < density {
                    pairs.push((u, i));
                }
            }
        }
        if pairs.is_empty() {
            pairs.push((0, 0));
        }
        build_bipartite(&interactions(n_users, n_items, &pairs)).unwrap()
    }

    fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn g1_adjacency_and_degrees() {
        let g = g1();
        let a = &g.adjacency;
        assert_eq!(a.nnz(), 6);
        for (r, c) in [(0, 2), (1, 2), (1, 3)] {
            assert_eq!(a.get(r, c), 1.0);
            assert_eq!(a.get(c, r), 1.0);
        }
        assert_eq!(g.degrees, vec![1.0, 2.0, 2.0, 1.0]);
        assert!(a.is_symmetric());
        a.check_invariants().unwrap();
        assert_eq!(a.to_dense(), a.to_dense().t());
    }

    #[test]
    fn bipartite_blocks_only() {
        let g = random_graph(15, 20, 0.2, 3);
        for (r, c, v) in g.adjacency.iter() {
            assert_eq!(v, 1.0);
            assert_ne!(g.is_user(r), g.is_user(c));
        }
    }

    #[test]
    fn empty_train_is_rejected() {
        let set = interactions(1, 1, &[]);
        assert!(build_bipartite(&set).is_err());
    }

    #[test]
    fn g1_square_matches_dense_oracle() {
        let a = g1().adjacency;
        let sq = spmatmul(&a, &a).unwrap();
        let oracle = dense_matmul(&a.to_dense(), &a.to_dense());
        assert_eq!(sq.to_dense(), oracle);
        let diag: Vec<f64> = (0..4).map(|v| sq.get(v, v)).collect();
        assert_eq!(diag, vec![1.0, 2.0, 2.0, 1.0]);
        assert_eq!(sq.get(0, 1), 1.0);
        assert_eq!(sq.get(2, 3), 1.0);
        assert_eq!(sq.nnz(), 8);
        assert!(sq.is_symmetric());
        sq.check_invariants().unwrap();
    }

    #[test]
    fn identity_is_neutral() {
        let a = random_graph(10, 12, 0.3, 1).adjacency;
        let id = SparseMatrix::identity(a.n());
        assert_eq!(spmatmul(&id, &a).unwrap(), a);
        assert_eq!(spmatmul(&a, &id).unwrap(), a);
    }

    #[test]
    fn spmatmul_rejects_mismatch() {
        assert!(spmatmul(&SparseMatrix::identity(3), &SparseMatrix::identity(4)).is_err());
    }

    #[test]
    fn spmv_identity_and_one_hot() {
        let a = random_graph(8, 12, 0.3, 5).adjacency;
        let mut rng = rng_from_seed(2);
        let x = Array2::from_shape_fn((a.n(), 3), |_| rng.random::<f64>());
        let id = SparseMatrix::identity(a.n());
        assert_eq!(spmv_dense(&id, x.view()).unwrap(), x);

        let eye = Array2::<f64>::eye(a.n());
        assert_eq!(spmv_dense(&a, eye.view()).unwrap(), a.to_dense());
    }

    #[test]
    fn spmv_matches_dense_oracle() {
        let a = random_sparse(20, 0.25, 9);
        let mut rng = rng_from_seed(10);
        let x = Array2::from_shape_fn((20, 5), |_| rng.random_range(-1.0..1.0));
        let y = spmv_dense(&a, x.view()).unwrap();
        assert!(max_abs_diff(&y, &dense_matmul(&a.to_dense(), &x)) < 1e-12);
        assert!(spmv_dense(&a, Array2::zeros((19, 5)).view()).is_err());
    }

    #[test]
    fn bfs_on_g1() {
        let g = g1();
        assert_eq!(bfs_distances(&g, 0), vec![Some(0), Some(2), Some(1), Some(3)]);
    }

    #[test]
    fn bfs_from_isolated_node() {
        // user 2 has no interactions
        let g = build_bipartite(&interactions(3, 2, &[(0, 0), (1, 1)])).unwrap();
        let d = bfs_distances(&g, 2);
        assert_eq!(d[2], Some(0));
        assert!(d.iter().enumerate().all(|(v, x)| v == 2 || x.is_none()));
    }

    #[test]
    fn bfs_parity_matches_sides() {
        let g = random_graph(20, 25, 0.1, 4);
        for s in 0..g.n() {
            for (v, d) in bfs_distances(&g, s).into_iter().enumerate() {
                if let Some(d) = d {
                    assert_eq!(d % 2 == 0, g.is_user(s) == g.is_user(v));
                }
            }
        }
    }

    #[test]
    fn normalize_g1() {
        let norm = symmetric_normalize(&g1().adjacency).unwrap();
        let r2 = 1.0 / 2f64.sqrt();
        assert!((norm.get(0, 2) - r2).abs() < 1e-15);
        assert!((norm.get(1, 2) - 0.5).abs() < 1e-15);
        assert!((norm.get(1, 3) - r2).abs() < 1e-15);
        assert!(norm.is_symmetric());
    }

    #[test]
    fn normalize_unit_edge() {
        let g = build_bipartite(&interactions(1, 1, &[(0, 0)])).unwrap();
        let norm = symmetric_normalize(&g.adjacency).unwrap();
        assert_eq!(norm.get(0, 1), 1.0);
    }

    #[test]
    fn normalize_rejects_negative() {
        let a = SparseMatrix::from_triplets(2, vec![(0, 1, -1.0), (1, 0, -1.0)]).unwrap();
        assert!(symmetric_normalize(&a).is_err());
    }

    #[test]
    fn normalize_keeps_pattern_and_bounds_row_sums() {
        for seed in 0..20 {
            let a = random_graph(15, 18, 0.15, seed).adjacency;
            let norm = symmetric_normalize(&a).unwrap();
            assert_eq!(norm.row_offsets(), a.row_offsets());
            assert_eq!(norm.col_indices(), a.col_indices());
            // sqrt(deg) is the eigenvector with eigenvalue 1, and no quadratic
            // form exceeds the squared norm.
            let deg = a.row_sums();
            let root: Vec<f64> = deg.iter().map(|d| d.sqrt()).collect();
            let image = norm.to_dense().dot(&ndarray::Array1::from(root.clone()));
            for (x, y) in image.iter().zip(&root) {
                assert!((x - y).abs() < 1e-12);
            }
            let dense = norm.to_dense();
            let mut rng = rng_from_seed(seed);
            for _ in 0..20 {
                let x = ndarray::Array1::from_shape_fn(a.n(), |_| rng.random_range(-1.0..1.0));
                let q = x.dot(&dense.dot(&x));
                assert!(q.abs() <= x.dot(&x) * (1.0 + 1e-12));
            }
            let max_deg = deg.iter().cloned().fold(0.0, f64::max);
            for s in norm.row_sums() {
                assert!(s <= max_deg.sqrt() + 1e-12);
            }
        }
    }

    #[test]
    fn normalized_row_sums_can_exceed_one() {
        // star: one user on four items, row sum of the user is 4 / sqrt(4)
        let g = build_bipartite(&interactions(1, 4, &[(0, 0), (0, 1), (0, 2), (0, 3)])).unwrap();
        let sums = symmetric_normalize(&g.adjacency).unwrap().row_sums();
        assert!((sums[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn powers_respect_bfs_distance_and_parity() {
        let g = g1();
        let a = &g.adjacency;
        let mut p = a.clone();
        for power in 1..=5u32 {
            for (u, v, _) in p.iter() {
                if u != v {
                    let d = bfs_distances(&g, u)[v].unwrap();
                    assert!(d <= power);
                    assert_eq!(d % 2, power % 2);
                }
            }
            assert!(p.is_symmetric());
            p = spmatmul(a, &p).unwrap();
        }
    }

    #[test]
    fn dump_roundtrip() {
        let a = random_sparse(12, 0.3, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.txt");
        a.write_dump(&path).unwrap();
        assert_eq!(SparseMatrix::read_dump(&path).unwrap(), a);
    }

    #[test]
    fn from_triplets_merges_and_drops_zeros() {
        let m = SparseMatrix::from_triplets(3, vec![(0, 1, 1.0), (0, 1, -1.0), (2, 0, 2.0), (2, 0, 1.0)]).unwrap();
        assert_eq!(m.nnz(), 1);
        assert_eq!(m.get(2, 0), 3.0);
        m.check_invariants().unwrap();
    }

    proptest! {
        #[test]
        fn spmatmul_is_associative(seed in 0u64..10_000, n in 2usize..12) {
            let a = random_sparse(n, 0.3, seed);
            let b = random_sparse(n, 0.3, seed + 1);
            let c = random_sparse(n, 0.3, seed + 2);
            let left = spmatmul(&spmatmul(&a, &b).unwrap(), &c).unwrap().to_dense();
            let right = spmatmul(&a, &spmatmul(&b, &c).unwrap()).unwrap().to_dense();
            let oracle = dense_matmul(&dense_matmul(&a.to_dense(), &b.to_dense()), &c.to_dense());
            prop_assert!(max_abs_diff(&left, &oracle) < 1e-10);
            prop_assert!(max_abs_diff(&right, &oracle) < 1e-10);
        }

        #[test]
        fn products_are_valid_csr(seed in 0u64..10_000, n in 1usize..15) {
            let a = random_sparse(n, 0.4, seed);
            let b = random_sparse(n, 0.4, seed ^ 0xff);
            let p = spmatmul(&a, &b).unwrap();
            prop_assert!(p.check_invariants().is_ok());
            prop_assert!(p.nnz() as u64 <= product_nnz_bound(&a, &b));
        }
    }
}
