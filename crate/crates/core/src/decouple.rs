//! Order-wise decoupling of the interaction graph.
//!
//! `Â^l` keeps entry (u, v) of the walk-count power `A^l` exactly when the
//! shortest path between u and v has length `l`: the entry is present in
//! `A^l` but absent from every lower power and off the diagonal. Walk counts
//! of bipartite graphs have fixed parity, so "absent from lower powers" and
//! "distance not below l" coincide; [`verify_decoupling`] checks this against
//! breadth-first search instead of assuming it.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{bfs_distances, product_nnz_bound, spmatmul, InteractionGraph, NodeId, SparseMatrix};

pub const MAX_ORDER: usize = 6;

/// Value stored for a decoupled entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryValues {
    /// Number of length-`l` walks between the endpoints.
    #[default]
    WalkCounts,
    /// 1 for every retained entry.
    Binary,
}

impl EntryValues {
    fn code(self) -> u32 {
        match self {
            EntryValues::WalkCounts => 0,
            EntryValues::Binary => 1,
        }
    }
}

impl std::str::FromStr for EntryValues {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "walk_counts" | "walks" => Ok(EntryValues::WalkCounts),
            "binary" => Ok(EntryValues::Binary),
            other => Err(Error::validation(format!("unknown entry value kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for EntryValues {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EntryValues::WalkCounts => "walk_counts",
            EntryValues::Binary => "binary",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoupleOptions {
    /// Per-row retention limit applied to orders >= 2. Breaks exactness.
    pub cap: Option<usize>,
    pub values: EntryValues,
    /// Upper bound on the estimated size of each intermediate power.
    pub memory_budget_bytes: u64,
}

impl Default for DecoupleOptions {
    fn default() -> Self {
        Self {
            cap: None,
            values: EntryValues::WalkCounts,
            memory_budget_bytes: 4 << 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoupledStack {
    /// `matrices[l - 1]` is `Â^l`.
    pub matrices: Vec<SparseMatrix>,
    pub cap: Option<usize>,
    pub values: EntryValues,
    pub source_hash: u64,
}

impl DecoupledStack {
    pub fn order_count(&self) -> usize {
        self.matrices.len()
    }

    pub fn order(&self, l: usize) -> &SparseMatrix {
        &self.matrices[l - 1]
    }

    pub fn n(&self) -> usize {
        self.matrices.first().map_or(0, SparseMatrix::n)
    }
}

/// Bytes per stored entry (u32 column + f64 value) used by the budget check.
const ENTRY_BYTES: u64 = 12;

pub fn decouple(g: &InteractionGraph, layers: usize, opts: &DecoupleOptions) -> Result<DecoupledStack> {
    if !(1..=MAX_ORDER).contains(&layers) {
        return Err(Error::validation(format!("order count {layers} outside 1..={MAX_ORDER}")));
    }
    let a = &g.adjacency;
    if a.nnz() == 0 {
        return Err(Error::validation("cannot decouple an empty graph"));
    }

    let mut powers: Vec<SparseMatrix> = Vec::with_capacity(layers);
    let mut matrices = Vec::with_capacity(layers);
    for l in 1..=layers {
        let power = match powers.last() {
            None => a.clone(),
            Some(prev) => {
                let estimate = product_nnz_bound(a, prev) * ENTRY_BYTES;
                if estimate > opts.memory_budget_bytes {
                    return Err(Error::Capacity(format!(
                        "walk-count power for order {l} needs up to {estimate} bytes, budget is {}",
                        opts.memory_budget_bytes
                    )));
                }
                spmatmul(a, prev)?
            }
        };
        let mut exact = exact_distance_part(&power, &powers, opts.values);
        if l >= 2 {
            if let Some(cap) = opts.cap {
                exact = cap_rows(&exact, cap);
            }
        }
        matrices.push(exact);
        powers.push(power);
    }

    Ok(DecoupledStack {
        matrices,
        cap: opts.cap,
        values: opts.values,
        source_hash: g.content_hash(),
    })
}

/// Entries of `power` that are off-diagonal and absent from every lower power.
fn exact_distance_part(power: &SparseMatrix, lower: &[SparseMatrix], values: EntryValues) -> SparseMatrix {
    let n = power.n();
    let rows: Vec<(Vec<NodeId>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|u| {
            let (cols, vals) = power.row(u);
            let mut keep_c = Vec::new();
            let mut keep_v = Vec::new();
            for (&v, &k) in cols.iter().zip(vals) {
                if v as usize == u {
                    continue;
                }
                if lower.iter().any(|p| p.row(u).0.binary_search(&v).is_ok()) {
                    continue;
                }
                keep_c.push(v);
                keep_v.push(match values {
                    EntryValues::WalkCounts => k,
                    EntryValues::Binary => 1.0,
                });
            }
            (keep_c, keep_v)
        })
        .collect();
    assemble(n, rows)
}

fn assemble(n: usize, rows: Vec<(Vec<NodeId>, Vec<f64>)>) -> SparseMatrix {
    let nnz = rows.iter().map(|r| r.0.len()).sum();
    let mut offsets = Vec::with_capacity(n + 1);
    offsets.push(0);
    let mut cols = Vec::with_capacity(nnz);
    let mut vals = Vec::with_capacity(nnz);
    for (c, v) in rows {
        cols.extend_from_slice(&c);
        vals.extend_from_slice(&v);
        offsets.push(cols.len());
    }
    SparseMatrix::from_parts(n, offsets, cols, vals).expect("rows are built sorted and non-zero")
}

/// Keeps each row's `cap` largest values (ties to the smaller column), then
/// restores symmetry by keeping an entry if either direction survived.
fn cap_rows(m: &SparseMatrix, cap: usize) -> SparseMatrix {
    let mut keep = vec![false; m.nnz()];
    for r in 0..m.n() {
        let range = m.row_range(r);
        if range.len() <= cap {
            keep[range].iter_mut().for_each(|k| *k = true);
            continue;
        }
        let mut order: Vec<usize> = range.collect();
        order.sort_by(|&x, &y| {
            m.values()[y]
                .total_cmp(&m.values()[x])
                .then(m.col_indices()[x].cmp(&m.col_indices()[y]))
        });
        for &k in order.iter().take(cap) {
            keep[k] = true;
        }
    }
    let mut symmetric = keep.clone();
    for (k, (r, c, _)) in m.iter().enumerate() {
        if keep[k] {
            if let Some(mirror) = m.position(c, r) {
                symmetric[mirror] = true;
            }
        }
    }
    let values: Vec<f64> = m
        .values()
        .iter()
        .zip(&symmetric)
        .map(|(&v, &k)| if k { v } else { 0.0 })
        .collect();
    m.with_values(&values).expect("same pattern")
}

/// First disagreement found by [`verify_decoupling`].
#[derive(Debug, Clone, PartialEq)]
pub enum DecouplingFailure {
    /// The stack was sparsified, so exact equality is not expected.
    Capped,
    Mismatch {
        order: usize,
        row: usize,
        col: usize,
        /// Value implied by BFS distance and walk counting (`None`: no entry).
        expected: Option<f64>,
        found: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecouplingReport {
    pub orders: usize,
    pub rows_checked: usize,
    pub entries_checked: usize,
    pub failure: Option<DecouplingFailure>,
}

impl DecouplingReport {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

impl std::fmt::Display for DecouplingReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.failure {
            None => write!(
                f,
                "pass: {} orders, {} rows, {} entries",
                self.orders, self.rows_checked, self.entries_checked
            ),
            Some(DecouplingFailure::Capped) => write!(f, "fail: stack was built with a row cap"),
            Some(DecouplingFailure::Mismatch {
                order,
                row,
                col,
                expected,
                found,
            }) => write!(
                f,
                "fail: order {order} entry ({row}, {col}) expected {expected:?}, found {found:?}"
            ),
        }
    }
}

/// Checks every row of every order against BFS distances and walk counts
/// obtained by repeated vector–adjacency products from the row's source.
pub fn verify_decoupling(g: &InteractionGraph, stack: &DecoupledStack) -> DecouplingReport {
    let mut report = DecouplingReport {
        orders: stack.order_count(),
        rows_checked: 0,
        entries_checked: 0,
        failure: None,
    };
    if stack.cap.is_some() {
        report.failure = Some(DecouplingFailure::Capped);
        return report;
    }
    let a = &g.adjacency;
    let n = g.n();
    for u in 0..n {
        let dist = bfs_distances(g, u);
        let mut walks = vec![0.0f64; n];
        walks[u] = 1.0;
        for l in 1..=stack.order_count() {
            let mut next = vec![0.0f64; n];
            for (v, slot) in next.iter_mut().enumerate() {
                let (cols, vals) = a.row(v);
                *slot = cols.iter().zip(vals).map(|(&k, &w)| walks[k as usize] * w).sum();
            }
            walks = next;

            let expected: Vec<(usize, f64)> = (0..n)
                .filter(|&v| dist[v] == Some(l as u32))
                .map(|v| {
                    let value = match stack.values {
                        EntryValues::WalkCounts => walks[v],
                        EntryValues::Binary => 1.0,
                    };
                    (v, value)
                })
                .collect();
            let (cols, vals) = stack.order(l).row(u);
            let found: Vec<(usize, f64)> = cols.iter().map(|&c| c as usize).zip(vals.iter().copied()).collect();
            report.entries_checked += found.len();
            if let Some(failure) = first_difference(l, u, &expected, &found) {
                report.failure = Some(failure);
                return report;
            }
        }
        report.rows_checked += 1;
    }
    report
}

fn first_difference(order: usize, row: usize, expected: &[(usize, f64)], found: &[(usize, f64)]) -> Option<DecouplingFailure> {
    let (mut i, mut j) = (0, 0);
    loop {
        let mismatch = |col, expected, found| DecouplingFailure::Mismatch {
            order,
            row,
            col,
            expected,
            found,
        };
        match (expected.get(i), found.get(j)) {
            (None, None) => return None,
            (Some(&(c, v)), None) => return Some(mismatch(c, Some(v), None)),
            (None, Some(&(c, v))) => return Some(mismatch(c, None, Some(v))),
            (Some(&(ce, ve)), Some(&(cf, vf))) => {
                if ce < cf {
                    return Some(mismatch(ce, Some(ve), None));
                }
                if cf < ce {
                    return Some(mismatch(cf, None, Some(vf)));
                }
                if ve != vf {
                    return Some(mismatch(ce, Some(ve), Some(vf)));
                }
                i += 1;
                j += 1;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// On-disk cache
// ---------------------------------------------------------------------------

const CACHE_MAGIC: &[u8; 8] = b"DRCSDDEC";
const CACHE_VERSION: u32 = 1;
const NO_CAP: u64 = u64::MAX;

/// Header of one cached order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheHeader {
    pub order: u32,
    pub n: u64,
    pub nnz: u64,
    pub cap: Option<u64>,
    pub values: EntryValues,
    pub source_hash: u64,
}

/// Little-endian layout: magic, version u32, order u32, n u64, nnz u64,
/// cap u64 (`u64::MAX` = none), value kind u32, source hash u64, then
/// `n + 1` u64 row offsets, `nnz` u32 columns and `nnz` f64 values.
pub fn write_order(path: &Path, m: &SparseMatrix, header: &CacheHeader) -> Result<()> {
    let mut buf = Vec::with_capacity(64 + (m.n() + 1) * 8 + m.nnz() * 12);
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.extend_from_slice(&header.order.to_le_bytes());
    buf.extend_from_slice(&(m.n() as u64).to_le_bytes());
    buf.extend_from_slice(&(m.nnz() as u64).to_le_bytes());
    buf.extend_from_slice(&header.cap.unwrap_or(NO_CAP).to_le_bytes());
    buf.extend_from_slice(&header.values.code().to_le_bytes());
    buf.extend_from_slice(&header.source_hash.to_le_bytes());
    for &o in m.row_offsets() {
        buf.extend_from_slice(&(o as u64).to_le_bytes());
    }
    for &c in m.col_indices() {
        buf.extend_from_slice(&c.to_le_bytes());
    }
    for &v in m.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_order(path: &Path) -> Result<(CacheHeader, SparseMatrix)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let malformed = |message: &str| Error::Format {
        path: path.to_owned(),
        message: message.to_owned(),
    };
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(8).ok_or_else(|| malformed("truncated header"))? != CACHE_MAGIC {
        return Err(malformed("bad magic"));
    }
    let version = cur.u32().ok_or_else(|| malformed("truncated header"))?;
    if version != CACHE_VERSION {
        return Err(malformed(&format!("unsupported version {version}")));
    }
    let header = (|| {
        let order = cur.u32()?;
        let n = cur.u64()?;
        let nnz = cur.u64()?;
        let cap = cur.u64()?;
        let values = match cur.u32()? {
            0 => EntryValues::WalkCounts,
            1 => EntryValues::Binary,
            _ => return None,
        };
        let source_hash = cur.u64()?;
        Some(CacheHeader {
            order,
            n,
            nnz,
            cap: (cap != NO_CAP).then_some(cap),
            values,
            source_hash,
        })
    })()
    .ok_or_else(|| malformed("truncated or invalid header"))?;

    let n = header.n as usize;
    let nnz = header.nnz as usize;
    let expected_len = cur.pos + (n + 1) * 8 + nnz * 12;
    if bytes.len() != expected_len {
        return Err(malformed(&format!("expected {expected_len} bytes, found {}", bytes.len())));
    }
    let offsets = (0..=n).map(|_| cur.u64().unwrap() as usize).collect();
    let cols = (0..nnz).map(|_| cur.u32().unwrap()).collect();
    let vals = (0..nnz).map(|_| f64::from_bits(cur.u64().unwrap())).collect();
    let m = SparseMatrix::from_parts(n, offsets, cols, vals).map_err(|e| malformed(&e.to_string()))?;
    Ok((header, m))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, k: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + k)?;
        self.pos += k;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

/// Directory of cached stacks, one file per order, keyed by source graph hash.
#[derive(Debug, Clone)]
pub struct DecoupleCache {
    dir: PathBuf,
}

impl DecoupleCache {
    pub const ENV_VAR: &'static str = "DRCSD_CACHE_DIR";

    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    /// Cache rooted at `$DRCSD_CACHE_DIR`, if set.
    pub fn from_env() -> Option<Self> {
        std::env::var_os(Self::ENV_VAR).map(Self::new)
    }

    pub fn path_for(&self, hash: u64, order: usize, opts: &DecoupleOptions) -> PathBuf {
        let cap = opts.cap.map_or_else(|| "none".to_owned(), |c| c.to_string());
        self.dir
            .join(format!("{hash:016x}-{}-cap{cap}-l{order}.bin", opts.values))
    }

    /// Loads every order from disk when all are present and match the graph;
    /// otherwise recomputes and rewrites them.
    pub fn load_or_compute(&self, g: &InteractionGraph, layers: usize, opts: &DecoupleOptions) -> Result<DecoupledStack> {
        let hash = g.content_hash();
        if let Some(stack) = self.try_load(g, hash, layers, opts) {
            return Ok(stack);
        }
        let stack = decouple(g, layers, opts)?;
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        for (idx, m) in stack.matrices.iter().enumerate() {
            let header = CacheHeader {
                order: (idx + 1) as u32,
                n: m.n() as u64,
                nnz: m.nnz() as u64,
                cap: opts.cap.map(|c| c as u64),
                values: opts.values,
                source_hash: hash,
            };
            write_order(&self.path_for(hash, idx + 1, opts), m, &header)?;
        }
        Ok(stack)
    }

    fn try_load(&self, g: &InteractionGraph, hash: u64, layers: usize, opts: &DecoupleOptions) -> Option<DecoupledStack> {
        let mut matrices = Vec::with_capacity(layers);
        for l in 1..=layers {
            let (header, m) = read_order(&self.path_for(hash, l, opts)).ok()?;
            let fresh = header.source_hash == hash
                && header.order as usize == l
                && header.n as usize == g.n()
                && header.values == opts.values
                && header.cap == opts.cap.map(|c| c as u64);
            if !fresh {
                return None;
            }
            matrices.push(m);
        }
        Some(DecoupledStack {
            matrices,
            cap: opts.cap,
            values: opts.values,
            source_hash: hash,
        })
    }
}
