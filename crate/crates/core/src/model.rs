//! Forward pass: hidden states, similarity-driven Gumbel masks, denoised
//! normalized adjacencies, order-isolated propagation and pooling.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2, Axis};
use rand::distr::Open01;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::decouple::{DecoupledStack, EntryValues};
use crate::error::{Error, Result};
use crate::graph::{normalize_values, spmv_values, SparseMatrix};
use crate::rng::rng_from_seed;

pub const DEFAULT_DIM: usize = 64;
pub const INIT_STD: f64 = 0.01;
pub const DEFAULT_TAU: f64 = 0.5;
/// Clamp applied to the similarity/dissimilarity probabilities before the log.
pub const PROB_EPS: f64 = 1e-10;

/// Trainable node embeddings `X_0`, users first, then items.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub x0: Array2<f64>,
}

impl EmbeddingTable {
    pub fn new(x0: Array2<f64>) -> Result<Self> {
        if x0.ncols() == 0 {
            return Err(Error::validation("embedding dimension must be at least 1"));
        }
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("embedding table has non-finite entries".into()));
        }
        Ok(Self {
            x0: x0.as_standard_layout().into_owned(),
        })
    }

    pub fn n(&self) -> usize {
        self.x0.nrows()
    }

    pub fn d(&self) -> usize {
        self.x0.ncols()
    }
}

/// Independent N(0, 0.01²) entries, row-major draw order.
pub fn init_embeddings(n: usize, d: usize, seed: u64) -> Result<EmbeddingTable> {
    init_embeddings_with_std(n, d, INIT_STD, seed)
}

pub fn init_embeddings_with_std(n: usize, d: usize, std: f64, seed: u64) -> Result<EmbeddingTable> {
    if n == 0 || d == 0 {
        return Err(Error::validation(format!("embedding shape {n}x{d} must be non-empty")));
    }
    let normal = Normal::new(0.0, std).map_err(|e| Error::validation(e.to_string()))?;
    let mut rng = rng_from_seed(seed);
    let data: Vec<f64> = (0..n * d).map(|_| normal.sample(&mut rng)).collect();
    EmbeddingTable::new(Array2::from_shape_vec((n, d), data).expect("shape matches"))
}

/// Elementwise mean of the inputs.
pub fn hidden_state(prior: &[ArrayView2<'_, f64>]) -> Result<Array2<f64>> {
    let (first, rest) = prior
        .split_first()
        .ok_or_else(|| Error::validation("hidden state needs at least one input"))?;
    let mut acc = first.to_owned();
    for m in rest {
        if m.dim() != acc.dim() {
            return Err(Error::validation(format!(
                "shape mismatch in hidden state: {:?} vs {:?}",
                m.dim(),
                acc.dim()
            )));
        }
        acc += m;
    }
    acc /= prior.len() as f64;
    Ok(acc)
}

/// Canonical (u < v) edges of a symmetric pattern, with the storage
/// positions of both directed copies.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeIndex {
    pub endpoints: Vec<(u32, u32)>,
    upper: Vec<usize>,
    lower: Vec<usize>,
    entry_edge: Vec<u32>,
}

impl EdgeIndex {
    pub fn new(a: &SparseMatrix) -> Result<Self> {
        let mut endpoints = Vec::with_capacity(a.nnz() / 2);
        let mut upper = Vec::with_capacity(a.nnz() / 2);
        let mut lower = Vec::with_capacity(a.nnz() / 2);
        let mut entry_edge = vec![u32::MAX; a.nnz()];
        for u in 0..a.n() {
            for k in a.row_range(u) {
                let v = a.col_indices()[k] as usize;
                if v == u {
                    return Err(Error::validation(format!("diagonal entry at node {u}")));
                }
                if v < u {
                    continue;
                }
                let mirror = a
                    .position(v, u)
                    .ok_or_else(|| Error::validation(format!("entry ({u}, {v}) has no mirror")))?;
                let id = endpoints.len() as u32;
                entry_edge[k] = id;
                entry_edge[mirror] = id;
                endpoints.push((u as u32, v as u32));
                upper.push(k);
                lower.push(mirror);
            }
        }
        Ok(Self {
            endpoints,
            upper,
            lower,
            entry_edge,
        })
    }

    pub fn len(&self) -> usize {
        self.endpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.endpoints.is_empty()
    }

    pub fn entries(&self) -> usize {
        self.entry_edge.len()
    }

    /// Storage positions of (u, v) and (v, u) for canonical edge `e`.
    pub fn positions(&self, e: usize) -> (usize, usize) {
        (self.upper[e], self.lower[e])
    }

    /// Spreads per-edge values onto both directed storage slots.
    pub fn expand(&self, per_edge: &[f64]) -> Vec<f64> {
        self.entry_edge.iter().map(|&e| per_edge[e as usize]).collect()
    }
}

/// Cosine pieces kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct Similarity {
    pub s: Vec<f64>,
    pub cos: Vec<f64>,
    pub norms: Vec<f64>,
}

fn row_norms(h: ArrayView2<'_, f64>) -> Vec<f64> {
    h.axis_iter(Axis(0)).map(|r| r.dot(&r).sqrt()).collect()
}

pub(crate) fn similarity(h: ArrayView2<'_, f64>, edges: &[(u32, u32)]) -> Result<Similarity> {
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("hidden state has non-finite entries".into()));
    }
    let norms = row_norms(h);
    let mut s = Vec::with_capacity(edges.len());
    let mut cos = Vec::with_capacity(edges.len());
    for &(u, v) in edges {
        let (u, v) = (u as usize, v as usize);
        if u >= h.nrows() || v >= h.nrows() {
            return Err(Error::validation(format!("edge ({u}, {v}) outside hidden state")));
        }
        let c = if norms[u] > 0.0 && norms[v] > 0.0 {
            (h.row(u).dot(&h.row(v)) / (norms[u] * norms[v])).clamp(-1.0, 1.0)
        } else {
            0.0
        };
        cos.push(c);
        s.push((c + 1.0) / 2.0);
    }
    Ok(Similarity { s, cos, norms })
}

/// `(cos(h_u, h_v) + 1) / 2` per edge; a zero-norm endpoint gives 0.5.
pub fn edge_similarity(h: ArrayView2<'_, f64>, edges: &[(u32, u32)]) -> Result<Vec<f64>> {
    Ok(similarity(h, edges)?.s)
}

/// Two standard Gumbel variates per edge.
#[derive(Debug, Clone, PartialEq)]
pub struct GumbelNoise {
    pub similar: Vec<f64>,
    pub dissimilar: Vec<f64>,
}

impl GumbelNoise {
    pub fn sample(edges: usize, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let mut draw = || {
            let u: f64 = rng.sample(Open01);
            -(-u.ln()).ln()
        };
        let mut similar = Vec::with_capacity(edges);
        let mut dissimilar = Vec::with_capacity(edges);
        for _ in 0..edges {
            similar.push(draw());
            dissimilar.push(draw());
        }
        Self { similar, dissimilar }
    }

    pub fn zeros(edges: usize) -> Self {
        Self {
            similar: vec![0.0; edges],
            dissimilar: vec![0.0; edges],
        }
    }
}

/// Per-edge weights for one order, indexed by canonical edge.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMask {
    pub order: usize,
    /// Weights applied in the forward pass (0/1 in hard mode).
    pub weights: Vec<f64>,
    /// Relaxed weights; the gradient always flows through these.
    pub soft: Vec<f64>,
    pub tau: f64,
    pub hard: bool,
    pub noise_seed: Option<u64>,
}

impl EdgeMask {
    pub fn ones(order: usize, edges: usize) -> Self {
        Self {
            order,
            weights: vec![1.0; edges],
            soft: vec![1.0; edges],
            tau: f64::INFINITY,
            hard: false,
            noise_seed: None,
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Weight per stored entry of the matrix `edges` was built from.
    pub fn aligned(&self, edges: &EdgeIndex) -> Result<Vec<f64>> {
        if edges.len() != self.len() {
            return Err(Error::validation(format!(
                "mask has {} edges, matrix has {}",
                self.len(),
                edges.len()
            )));
        }
        Ok(edges.expand(&self.weights))
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Logit of the similarity slot: `((ln p_s + g_s) - (ln p_d + g_d)) / τ`.
pub(crate) fn mask_logit(s: f64, g_similar: f64, g_dissimilar: f64, tau: f64) -> f64 {
    let p_s = s.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let p_d = (1.0 - s).clamp(PROB_EPS, 1.0 - PROB_EPS);
    ((p_s.ln() + g_similar) - (p_d.ln() + g_dissimilar)) / tau
}

/// d(logit)/ds; zero where either probability sits on its clamp.
pub(crate) fn mask_logit_grad(s: f64, tau: f64) -> f64 {
    let p_s = s.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let p_d = (1.0 - s).clamp(PROB_EPS, 1.0 - PROB_EPS);
    if p_s == s && p_d == 1.0 - s {
        (1.0 / p_s + 1.0 / p_d) / tau
    } else {
        0.0
    }
}

/// Two-slot Gumbel-softmax over `[s, 1 - s]`; the weight is the similarity
/// slot. `noise = None` gives the noise-free relaxation used at inference.
pub fn gumbel_mask_with_noise(
    order: usize,
    s: &[f64],
    tau: f64,
    noise: Option<&GumbelNoise>,
    hard: bool,
) -> Result<EdgeMask> {
    if !(tau > 0.0) {
        return Err(Error::validation(format!("temperature must be positive, got {tau}")));
    }
    if let Some(noise) = noise {
        if noise.similar.len() != s.len() || noise.dissimilar.len() != s.len() {
            return Err(Error::validation("noise length does not match edge count"));
        }
    }
    let mut soft = Vec::with_capacity(s.len());
    let mut weights = Vec::with_capacity(s.len());
    for (e, &se) in s.iter().enumerate() {
        if !(0.0..=1.0).contains(&se) {
            return Err(Error::validation(format!("similarity {se} outside [0, 1]")));
        }
        let (gs, gd) = noise.map_or((0.0, 0.0), |n| (n.similar[e], n.dissimilar[e]));
        let z = mask_logit(se, gs, gd, tau);
        let w = sigmoid(z);
        soft.push(w);
        weights.push(if hard { f64::from(u8::from(z >= 0.0)) } else { w });
    }
    Ok(EdgeMask {
        order,
        weights,
        soft,
        tau,
        hard,
        noise_seed: None,
    })
}

/// Samples fresh Gumbel noise from `seed` and builds the mask.
pub fn gumbel_mask(s: &[f64], tau: f64, seed: u64, hard: bool) -> Result<EdgeMask> {
    let noise = GumbelNoise::sample(s.len(), seed);
    let mut mask = gumbel_mask_with_noise(0, s, tau, Some(&noise), hard)?;
    mask.noise_seed = Some(seed);
    Ok(mask)
}

/// `normalize(W ⊙ Â)` with value-sum degrees; masked-out entries are dropped.
pub fn denoise_adjacency(a_hat: &SparseMatrix, mask: &EdgeMask) -> Result<SparseMatrix> {
    let edges = EdgeIndex::new(a_hat)?;
    let w = mask.aligned(&edges)?;
    let checked: Vec<f64> = a_hat.values().iter().zip(&w).map(|(a, w)| a * w).collect();
    let (tilde, _) = normalize_values(a_hat, &checked);
    a_hat.with_values(&tilde)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Decoupled orders with per-order denoising masks.
    #[default]
    Full,
    /// Decoupled orders, all masks fixed to 1.
    NoDenoise,
    /// Classic layer-stacked propagation on the normalized adjacency.
    NoDecouple,
    /// Embeddings only.
    Mf,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Mode::Full),
            "no_denoise" => Ok(Mode::NoDenoise),
            "no_decouple" => Ok(Mode::NoDecouple),
            "mf" => Ok(Mode::Mf),
            other => Err(Error::validation(format!("unknown mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Full => "full",
            Mode::NoDenoise => "no_denoise",
            Mode::NoDecouple => "no_decouple",
            Mode::Mf => "mf",
        })
    }
}

/// Which propagated outputs feed the hidden state of order `l`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HiddenRule {
    /// `H_l = mean(X_0, ..., X_{l-1})` from the current pass.
    #[default]
    PerOrder,
    /// One `H = mean(X_0, X̄_1, ..., X̄_{L-1})` for every order, where
    /// `X̄_j = Ā^j X_0` uses the unmasked normalized matrices.
    Shared,
}

impl std::str::FromStr for HiddenRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_order" => Ok(HiddenRule::PerOrder),
            "shared" => Ok(HiddenRule::Shared),
            other => Err(Error::validation(format!("unknown hidden rule {other:?}"))),
        }
    }
}

impl std::fmt::Display for HiddenRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HiddenRule::PerOrder => "per_order",
            HiddenRule::Shared => "shared",
        })
    }
}

/// Source of mask weights for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskNoise {
    /// Fresh Gumbel draws; order `l` uses seed `seed ^ l`.
    Gumbel { seed: u64 },
    /// Deterministic relaxation without noise.
    NoiseFree,
    /// Every weight 1.
    Ones,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOptions {
    pub mode: Mode,
    pub layers: usize,
    pub tau: f64,
    pub hard: bool,
    pub hidden: HiddenRule,
    pub noise: MaskNoise,
}

impl ForwardOptions {
    pub fn inference(mode: Mode, layers: usize, tau: f64, hidden: HiddenRule) -> Self {
        Self {
            mode,
            layers,
            tau,
            hard: false,
            hidden,
            noise: MaskNoise::NoiseFree,
        }
    }
}

/// One decoupled order prepared for repeated forward passes.
#[derive(Debug, Clone)]
pub struct PreparedOrder {
    pub a_hat: SparseMatrix,
    pub edges: EdgeIndex,
    /// `normalize(Â^l)` aligned to the storage of `a_hat`.
    pub a_bar: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PreparedStack {
    pub n_users: usize,
    pub n_items: usize,
    pub orders: Vec<PreparedOrder>,
}

impl PreparedStack {
    pub fn new(stack: &DecoupledStack, n_users: usize, n_items: usize) -> Result<Self> {
        if stack.n() != n_users + n_items {
            return Err(Error::validation(format!(
                "stack has {} nodes, expected {} users + {} items",
                stack.n(),
                n_users,
                n_items
            )));
        }
        let orders = stack
            .matrices
            .iter()
            .map(|a_hat| {
                let edges = EdgeIndex::new(a_hat)?;
                let (a_bar, _) = normalize_values(a_hat, a_hat.values());
                Ok(PreparedOrder {
                    a_hat: a_hat.clone(),
                    edges,
                    a_bar,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            n_users,
            n_items,
            orders,
        })
    }

    pub fn n(&self) -> usize {
        self.n_users + self.n_items
    }

    pub fn order_count(&self) -> usize {
        self.orders.len()
    }
}

/// Everything the backward pass needs about one denoised order.
#[derive(Debug, Clone)]
pub(crate) struct OrderTrace {
    pub similarity: Similarity,
    /// `W ⊙ Â` per stored entry.
    pub checked: Vec<f64>,
    pub inv_sqrt_deg: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardState {
    pub mode: Mode,
    /// `X_1..X_L` (or the stacked layers in `NoDecouple`).
    pub outputs: Vec<Array2<f64>>,
    /// `H_1..H_L`; empty unless masks were computed from similarities.
    pub hidden: Vec<Array2<f64>>,
    pub masks: Vec<EdgeMask>,
    /// `Ã^l` values aligned to the storage of `Â^l`.
    pub denoised: Vec<Vec<f64>>,
    pub pooled: Array2<f64>,
    pub(crate) traces: Vec<OrderTrace>,
    /// `X̄_1..X̄_{L-1}` for the shared hidden rule.
    pub(crate) prepass: Vec<Array2<f64>>,
}

impl ForwardState {
    pub fn denoised_matrix(&self, prepared: &PreparedStack, l: usize) -> Result<SparseMatrix> {
        prepared.orders[l - 1].a_hat.with_values(&self.denoised[l - 1])
    }
}

fn mean_of(x0: ArrayView2<'_, f64>, rest: &[Array2<f64>]) -> Result<Array2<f64>> {
    let mut views = Vec::with_capacity(rest.len() + 1);
    views.push(x0);
    views.extend(rest.iter().map(|m| m.view()));
    hidden_state(&views)
}

pub fn forward(emb: &EmbeddingTable, prepared: &PreparedStack, opts: &ForwardOptions) -> Result<ForwardState> {
    let x0 = emb.x0.view();
    if emb.n() != prepared.n() {
        return Err(Error::validation(format!(
            "embedding table has {} rows, graph has {} nodes",
            emb.n(),
            prepared.n()
        )));
    }
    let needed = match opts.mode {
        Mode::Mf => 0,
        Mode::NoDecouple => 1,
        Mode::Full | Mode::NoDenoise => opts.layers,
    };
    if prepared.order_count() < needed {
        return Err(Error::validation(format!(
            "{} mode with {} layers needs {needed} prepared orders, found {}",
            opts.mode,
            opts.layers,
            prepared.order_count()
        )));
    }
    if opts.mode != Mode::Mf && opts.layers == 0 {
        return Err(Error::validation("propagating modes need at least one layer"));
    }

    let mut state = ForwardState {
        mode: opts.mode,
        outputs: Vec::new(),
        hidden: Vec::new(),
        masks: Vec::new(),
        denoised: Vec::new(),
        pooled: Array2::zeros((0, 0)),
        traces: Vec::new(),
        prepass: Vec::new(),
    };

    match opts.mode {
        Mode::Mf => {
            state.pooled = x0.to_owned();
        }
        Mode::NoDecouple => {
            let first = &prepared.orders[0];
            let mut prev = x0.to_owned();
            for _ in 0..opts.layers {
                let next = spmv_values(&first.a_hat, &first.a_bar, prev.view())?;
                state.outputs.push(next.clone());
                prev = next;
            }
            state.pooled = mean_of(x0, &state.outputs)?;
        }
        Mode::NoDenoise => {
            for (idx, ord) in prepared.orders[..opts.layers].iter().enumerate() {
                state.outputs.push(spmv_values(&ord.a_hat, &ord.a_bar, x0)?);
                state.masks.push(EdgeMask::ones(idx + 1, ord.edges.len()));
                state.denoised.push(ord.a_bar.clone());
            }
            state.pooled = mean_of(x0, &state.outputs)?;
        }
        Mode::Full => {
            let shared = match opts.hidden {
                HiddenRule::Shared => {
                    for ord in &prepared.orders[..opts.layers - 1] {
                        state.prepass.push(spmv_values(&ord.a_hat, &ord.a_bar, x0)?);
                    }
                    Some(mean_of(x0, &state.prepass)?)
                }
                HiddenRule::PerOrder => None,
            };
            for l in 1..=opts.layers {
                let ord = &prepared.orders[l - 1];
                let h = match &shared {
                    Some(h) => h.clone(),
                    None => mean_of(x0, &state.outputs)?,
                };
                let sim = similarity(h.view(), &ord.edges.endpoints)?;
                let mask = match opts.noise {
                    MaskNoise::Ones => EdgeMask::ones(l, ord.edges.len()),
                    MaskNoise::NoiseFree => gumbel_mask_with_noise(l, &sim.s, opts.tau, None, false)?,
                    MaskNoise::Gumbel { seed } => {
                        let order_seed = seed ^ l as u64;
                        let noise = GumbelNoise::sample(ord.edges.len(), order_seed);
                        let mut m = gumbel_mask_with_noise(l, &sim.s, opts.tau, Some(&noise), opts.hard)?;
                        m.noise_seed = Some(order_seed);
                        m
                    }
                };
                let weights = ord.edges.expand(&mask.weights);
                let checked: Vec<f64> = ord.a_hat.values().iter().zip(&weights).map(|(a, w)| a * w).collect();
                let (tilde, inv_sqrt_deg) = normalize_values(&ord.a_hat, &checked);
                state.outputs.push(spmv_values(&ord.a_hat, &tilde, x0)?);
                state.hidden.push(h);
                state.masks.push(mask);
                state.denoised.push(tilde);
                state.traces.push(OrderTrace {
                    similarity: sim,
                    checked,
                    inv_sqrt_deg,
                });
            }
            state.pooled = mean_of(x0, &state.outputs)?;
        }
    }
    Ok(state)
}

/// Inner product of the pooled user and item rows.
pub fn score(pooled: ArrayView2<'_, f64>, n_users: usize, user: usize, item: usize) -> Result<f64> {
    let n_items = pooled.nrows().saturating_sub(n_users);
    if user >= n_users || item >= n_items {
        return Err(Error::validation(format!(
            "score({user}, {item}) outside {n_users} users x {n_items} items"
        )));
    }
    Ok(pooled.row(user).dot(&pooled.row(n_users + item)))
}

/// JSON half of a checkpoint; `X_0` lives in a little-endian f64 sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub n_users: usize,
    pub n_items: usize,
    pub d: usize,
    pub layers: usize,
    pub mode: Mode,
    pub tau: f64,
    pub hidden: HiddenRule,
    pub cap: Option<usize>,
    pub values: EntryValues,
    pub config_hash: String,
    pub epoch: usize,
    pub payload: String,
    pub payload_bytes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub embeddings: EmbeddingTable,
}

impl Checkpoint {
    pub fn sidecar_path(json_path: &Path) -> PathBuf {
        json_path.with_extension("bin")
    }

    pub fn save(&self, json_path: &Path) -> Result<()> {
        let x0 = &self.embeddings.x0;
        if x0.dim() != (self.header.n_users + self.header.n_items, self.header.d) {
            return Err(Error::validation("checkpoint header disagrees with embedding shape"));
        }
        let sidecar = Self::sidecar_path(json_path);
        let mut payload = Vec::with_capacity(x0.len() * 8);
        for v in x0.iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        let mut header = self.header.clone();
        header.payload = sidecar
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        header.payload_bytes = payload.len() as u64;
        fs::write(&sidecar, payload).map_err(|e| Error::io(&sidecar, e))?;
        let json = serde_json::to_string_pretty(&header).expect("header serializes");
        fs::write(json_path, json + "\n").map_err(|e| Error::io(json_path, e))
    }

    pub fn load(json_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(json_path).map_err(|e| Error::io(json_path, e))?;
        let header: CheckpointHeader = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: json_path.to_owned(),
            message: e.to_string(),
        })?;
        let sidecar = json_path.with_file_name(&header.payload);
        let bytes = fs::read(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let n = header.n_users + header.n_items;
        if bytes.len() as u64 != header.payload_bytes || bytes.len() != n * header.d * 8 {
            return Err(Error::Format {
                path: sidecar,
                message: format!("expected {} bytes for {n}x{}, found {}", n * header.d * 8, header.d, bytes.len()),
            });
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let x0 = Array2::from_shape_vec((n, header.d), data).expect("length checked");
        Ok(Self {
            header,
            embeddings: EmbeddingTable::new(x0)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decouple::{decouple, DecoupleOptions};
    use crate::graph::fixtures::{g1, interactions};
    use crate::graph::{build_bipartite, symmetric_normalize};
    use ndarray::array;

    fn random_prepared(n_users: usize, n_items: usize, density: f64, layers: usize, seed: u64) -> PreparedStack {
        let mut rng = rng_from_seed(seed);
        let mut pairs = Vec::new();
        for u in 0..n_users {
            for i in 0..n_items {
                if rng.random::<f64>() < density {
                    pairs.push((u, i));
                }
            }
        }
        pairs.push((0, 0));
        pairs.sort_unstable();
        pairs.dedup();
        let g = build_bipartite(&interactions(n_users, n_items, &pairs)).unwrap();
        let stack = decouple(&g, layers, &DecoupleOptions::default()).unwrap();
        PreparedStack::new(&stack, n_users, n_items).unwrap()
    }

    fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn init_is_deterministic_and_centered() {
        let a = init_embeddings(4, 64, 3).unwrap();
        let b = init_embeddings(4, 64, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.x0.dim(), (4, 64));
        let mean = a.x0.mean().unwrap();
        // 4 sigma of the sample mean of 256 N(0, 0.01²) draws
        assert!(mean.abs() < 0.01 / 256f64.sqrt() * 4.0, "{mean}");
        assert_ne!(a, init_embeddings(4, 64, 4).unwrap());
        assert_eq!(DEFAULT_DIM, 64);
        assert!(init_embeddings(0, 4, 1).is_err());
    }

    #[test]
    fn init_spread_matches_std() {
        let t = init_embeddings(200, 50, 11).unwrap();
        let var = t.x0.mapv(|v| v * v).mean().unwrap();
        assert!((var.sqrt() - INIT_STD).abs() < 0.0005, "{}", var.sqrt());
    }

    #[test]
    fn hidden_state_cases() {
        let x = array![[1.0, -2.0], [3.0, 0.5]];
        assert_eq!(hidden_state(&[x.view()]).unwrap(), x);
        let neg = -&x;
        assert_eq!(hidden_state(&[x.view(), neg.view()]).unwrap(), Array2::<f64>::zeros((2, 2)));
        let ones = Array2::from_elem((3, 2), 1.0);
        let threes = Array2::from_elem((3, 2), 3.0);
        assert_eq!(
            hidden_state(&[ones.view(), threes.view()]).unwrap(),
            Array2::from_elem((3, 2), 2.0)
        );
        assert!(hidden_state(&[]).is_err());
        assert!(hidden_state(&[ones.view(), x.view()]).is_err());
    }

    #[test]
    fn similarity_cases() {
        let h = array![[1.0, 2.0, 3.0], [1.0, 2.0, 3.0], [0.0, 0.0, 0.0]];
        let s = edge_similarity(h.view(), &[(0, 1), (0, 2)]).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-15);
        assert_eq!(s[1], 0.5);
        let h = array![[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]];
        let s = edge_similarity(h.view(), &[(0, 1), (0, 2)]).unwrap();
        assert_eq!(s, vec![0.0, 0.5]);
        let bad = array![[f64::NAN, 0.0], [1.0, 0.0]];
        assert!(matches!(edge_similarity(bad.view(), &[(0, 1)]), Err(Error::Numeric(_))));
    }

    #[test]
    fn saturated_similarity_keeps_the_edge() {
        for seed in 0..100_000u64 {
            let m = gumbel_mask(&[1.0], 0.5, seed, false).unwrap();
            assert!(m.weights[0] >= 1.0 - 1e-6, "seed {seed}: {}", m.weights[0]);
        }
    }

    #[test]
    fn symmetric_noise_gives_half() {
        let noise = GumbelNoise {
            similar: vec![0.37],
            dissimilar: vec![0.37],
        };
        let m = gumbel_mask_with_noise(1, &[0.5], 0.5, Some(&noise), false).unwrap();
        assert_eq!(m.weights[0], 0.5);
    }

    #[test]
    fn high_temperature_flattens() {
        for (seed, &s) in [0.0, 0.2, 0.5, 0.9, 1.0].iter().enumerate() {
            let m = gumbel_mask(&[s], 1e6, seed as u64, false).unwrap();
            assert!((m.weights[0] - 0.5).abs() < 1e-4);
        }
    }

    #[test]
    fn mask_validation() {
        assert!(gumbel_mask(&[0.5], 0.0, 1, false).is_err());
        assert!(gumbel_mask(&[0.5], -1.0, 1, false).is_err());
        assert!(gumbel_mask(&[1.5], 1.0, 1, false).is_err());
    }

    #[test]
    fn mask_ranges() {
        let s: Vec<f64> = (0..=100).map(|k| k as f64 / 100.0).collect();
        let soft = gumbel_mask(&s, 0.5, 9, false).unwrap();
        assert!(soft.weights.iter().all(|w| (0.0..=1.0).contains(w)));
        let hard = gumbel_mask(&s, 0.5, 9, true).unwrap();
        assert!(hard.weights.iter().all(|&w| w == 0.0 || w == 1.0));
        assert_eq!(hard.soft, soft.soft);
    }

    #[test]
    fn weights_are_monotone_in_similarity() {
        let noise = GumbelNoise::sample(50, 5);
        let s: Vec<f64> = (0..50).map(|k| 0.01 + k as f64 / 60.0).collect();
        let raised: Vec<f64> = s.iter().map(|v| v + (1.0 - v) * 0.3).collect();
        let a = gumbel_mask_with_noise(1, &s, 0.5, Some(&noise), false).unwrap();
        let b = gumbel_mask_with_noise(1, &raised, 0.5, Some(&noise), false).unwrap();
        for (x, y) in a.weights.iter().zip(&b.weights) {
            assert!(y >= x);
        }
    }

    #[test]
    fn unit_mask_reproduces_plain_normalization() {
        let a = g1().adjacency;
        let edges = EdgeIndex::new(&a).unwrap();
        let ones = EdgeMask::ones(1, edges.len());
        assert_eq!(denoise_adjacency(&a, &ones).unwrap(), symmetric_normalize(&a).unwrap());
        let zeros = EdgeMask {
            weights: vec![0.0; edges.len()],
            ..ones
        };
        assert_eq!(denoise_adjacency(&a, &zeros).unwrap().nnz(), 0);
    }

    #[test]
    fn masked_edge_renormalizes_survivors() {
        let a = g1().adjacency;
        let edges = EdgeIndex::new(&a).unwrap();
        let mut mask = EdgeMask::ones(1, edges.len());
        let e13 = edges.endpoints.iter().position(|&e| e == (1, 3)).unwrap();
        mask.weights[e13] = 0.0;
        let tilde = denoise_adjacency(&a, &mask).unwrap();
        // value-sum degrees after masking: (1, 1, 2, 0)
        let r2 = 1.0 / 2f64.sqrt();
        assert!((tilde.get(0, 2) - r2).abs() < 1e-15);
        assert!((tilde.get(1, 2) - r2).abs() < 1e-15);
        assert_eq!(tilde.get(1, 3), 0.0);
        assert!(tilde.is_symmetric());
        let short = EdgeMask::ones(1, 2);
        assert!(denoise_adjacency(&a, &short).is_err());
    }

    #[test]
    fn mf_returns_x0() {
        let p = random_prepared(6, 8, 0.3, 2, 1);
        let emb = init_embeddings(p.n(), 4, 2).unwrap();
        let opts = ForwardOptions {
            mode: Mode::Mf,
            layers: 0,
            tau: 0.5,
            hard: false,
            hidden: HiddenRule::PerOrder,
            noise: MaskNoise::NoiseFree,
        };
        assert_eq!(forward(&emb, &p, &opts).unwrap().pooled, emb.x0);
    }

    #[test]
    fn unit_masks_match_no_denoise_bitwise() {
        let p = random_prepared(10, 14, 0.2, 3, 4);
        let emb = init_embeddings_with_std(p.n(), 5, 0.3, 7).unwrap();
        let full = ForwardOptions {
            mode: Mode::Full,
            layers: 3,
            tau: 0.5,
            hard: false,
            hidden: HiddenRule::PerOrder,
            noise: MaskNoise::Ones,
        };
        let plain = ForwardOptions {
            mode: Mode::NoDenoise,
            ..full
        };
        let a = forward(&emb, &p, &full).unwrap();
        let b = forward(&emb, &p, &plain).unwrap();
        assert_eq!(a.pooled, b.pooled);
        assert_eq!(a.denoised, b.denoised);
        assert!(b.masks.iter().all(|m| m.weights.iter().all(|&w| w == 1.0)));
    }

    #[test]
    fn no_decouple_matches_dense_light_convolution() {
        let p = random_prepared(9, 11, 0.25, 1, 8);
        let emb = init_embeddings_with_std(p.n(), 6, 0.5, 3).unwrap();
        let layers = 3;
        let opts = ForwardOptions::inference(Mode::NoDecouple, layers, 0.5, HiddenRule::PerOrder);
        let got = forward(&emb, &p, &opts).unwrap().pooled;

        let a = p.orders[0].a_hat.to_dense();
        let deg = a.sum_axis(Axis(1));
        let n = a.nrows();
        let norm = Array2::from_shape_fn((n, n), |(i, j)| {
            if a[[i, j]] == 0.0 {
                0.0
            } else {
                a[[i, j]] / (deg[i] * deg[j]).sqrt()
            }
        });
        let mut layer = emb.x0.clone();
        let mut sum = emb.x0.clone();
        for _ in 0..layers {
            layer = norm.dot(&layer);
            sum += &layer;
        }
        let want = sum / (layers as f64 + 1.0);
        assert!(max_abs_diff(&got, &want) < 1e-10);
    }

    #[test]
    fn orders_are_isolated_under_unit_masks() {
        let p = random_prepared(10, 12, 0.2, 3, 5);
        let emb = init_embeddings_with_std(p.n(), 4, 0.3, 1).unwrap();
        let opts = ForwardOptions {
            mode: Mode::Full,
            layers: 3,
            tau: 0.5,
            hard: false,
            hidden: HiddenRule::PerOrder,
            noise: MaskNoise::Ones,
        };
        let base = forward(&emb, &p, &opts).unwrap();
        let mut zeroed = p.clone();
        let empty = SparseMatrix::empty(p.n());
        zeroed.orders[1] = PreparedOrder {
            edges: EdgeIndex::new(&empty).unwrap(),
            a_bar: Vec::new(),
            a_hat: empty,
        };
        let cut = forward(&emb, &zeroed, &opts).unwrap();
        assert_eq!(base.outputs[0], cut.outputs[0]);
        assert_eq!(base.outputs[2], cut.outputs[2]);
        assert_ne!(base.outputs[1], cut.outputs[1]);
        assert_eq!(cut.outputs[1], Array2::<f64>::zeros(cut.outputs[1].dim()));
    }

    #[test]
    fn masks_are_symmetric_and_bounded_in_forward() {
        let p = random_prepared(10, 12, 0.25, 2, 6);
        let emb = init_embeddings_with_std(p.n(), 4, 0.3, 2).unwrap();
        for hard in [false, true] {
            let opts = ForwardOptions {
                mode: Mode::Full,
                layers: 2,
                tau: 0.5,
                hard,
                hidden: HiddenRule::PerOrder,
                noise: MaskNoise::Gumbel { seed: 3 },
            };
            let st = forward(&emb, &p, &opts).unwrap();
            for l in 1..=2 {
                let m = st.denoised_matrix(&p, l).unwrap();
                assert!(m.is_symmetric());
                for &w in &st.masks[l - 1].weights {
                    assert!((0.0..=1.0).contains(&w));
                    if hard {
                        assert!(w == 0.0 || w == 1.0);
                    }
                }
            }
        }
    }

    #[test]
    fn first_hidden_state_is_x0_and_second_averages() {
        let p = random_prepared(8, 9, 0.3, 2, 2);
        let emb = init_embeddings_with_std(p.n(), 3, 0.3, 4).unwrap();
        let opts = ForwardOptions::inference(Mode::Full, 2, 0.5, HiddenRule::PerOrder);
        let st = forward(&emb, &p, &opts).unwrap();
        assert_eq!(st.hidden[0], emb.x0);
        let want = (&emb.x0 + &st.outputs[0]) / 2.0;
        assert_eq!(st.hidden[1], want);

        let shared = ForwardOptions {
            hidden: HiddenRule::Shared,
            ..opts
        };
        let st = forward(&emb, &p, &shared).unwrap();
        assert_eq!(st.hidden[0], st.hidden[1]);
    }

    #[test]
    fn score_is_inner_product() {
        let x = array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]];
        // one user (row 0), two items (rows 1, 2)
        assert_eq!(score(x.view(), 1, 0, 0).unwrap(), 0.0);
        assert_eq!(score(x.view(), 1, 0, 1).unwrap(), 1.0);
        assert!(score(x.view(), 1, 0, 2).is_err());
        assert!(score(x.view(), 1, 1, 0).is_err());

        let mut rng = rng_from_seed(3);
        let y = Array2::from_shape_fn((5, 8), |_| rng.random_range(-1.0..1.0));
        let mut manual = 0.0;
        for k in 0..8 {
            manual += y[[1, k]] * y[[2 + 2, k]];
        }
        assert_eq!(score(y.view(), 2, 1, 2).unwrap(), manual);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let emb = init_embeddings(7, 3, 1).unwrap();
        let ck = Checkpoint {
            header: CheckpointHeader {
                n_users: 3,
                n_items: 4,
                d: 3,
                layers: 2,
                mode: Mode::Full,
                tau: 0.5,
                hidden: HiddenRule::PerOrder,
                cap: None,
                values: EntryValues::WalkCounts,
                config_hash: "abc".into(),
                epoch: 4,
                payload: String::new(),
                payload_bytes: 0,
            },
            embeddings: emb,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.embeddings, ck.embeddings);
        assert_eq!(back.header.payload, "model.bin");
        assert_eq!(back.header.payload_bytes, 7 * 3 * 8);

        fs::write(dir.path().join("model.bin"), [0u8; 10]).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
