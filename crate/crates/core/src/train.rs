//! Losses, the analytic gradient with respect to `X_0`, Adam, and the
//! epoch loop with early stopping.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, Zip};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{BprTriple, InteractionSet, NegativeSampler, SplitDataset};
use crate::decouple::{decouple, DecoupleCache, DecoupleOptions, EntryValues};
use crate::error::{Error, Result};
use crate::eval::{evaluate_pooled, Phase, DEFAULT_K};
use crate::graph::{build_bipartite, spmv_values, SparseMatrix};
use crate::model::{
    forward, init_embeddings_with_std, mask_logit_grad, Checkpoint, CheckpointHeader, EmbeddingTable,
    ForwardOptions, ForwardState, HiddenRule, MaskNoise, Mode, PreparedStack, DEFAULT_DIM, DEFAULT_TAU, INIT_STD,
};
use crate::rng::{derive_seed, derived_rng};

/// `-ln σ(m)` without overflow for large |m|.
fn neg_log_sigmoid(m: f64) -> f64 {
    (-m).max(0.0) + (-m.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean of `-ln σ(y_pos - y_neg)` over the batch.
pub fn bpr_loss(y_pos: &[f64], y_neg: &[f64]) -> Result<f64> {
    if y_pos.len() != y_neg.len() {
        return Err(Error::validation(format!(
            "{} positive scores vs {} negative scores",
            y_pos.len(),
            y_neg.len()
        )));
    }
    if y_pos.is_empty() {
        return Err(Error::validation("empty batch"));
    }
    let sum: f64 = y_pos.iter().zip(y_neg).map(|(p, n)| neg_log_sigmoid(p - n)).sum();
    Ok(sum / y_pos.len() as f64)
}

/// `Σ_l Σ |Ã^l - Ā^l|` over the stored entries of each reference matrix.
pub fn ld_loss(denoised: &[SparseMatrix], reference: &[SparseMatrix]) -> Result<f64> {
    if denoised.len() != reference.len() {
        return Err(Error::validation(format!(
            "{} denoised orders vs {} reference orders",
            denoised.len(),
            reference.len()
        )));
    }
    let mut total = 0.0;
    for (l, (d, r)) in denoised.iter().zip(reference).enumerate() {
        if d.n() != r.n() {
            return Err(Error::validation(format!("order {}: size {} vs {}", l + 1, d.n(), r.n())));
        }
        if let Some((u, v, _)) = d.iter().find(|&(u, v, _)| r.position(u, v).is_none()) {
            return Err(Error::validation(format!(
                "order {}: denoised entry ({u}, {v}) outside the reference pattern",
                l + 1
            )));
        }
        total += r.iter().map(|(u, v, a)| (d.get(u, v) - a).abs()).sum::<f64>();
    }
    Ok(total)
}

/// Same sum over value vectors aligned to one storage layout.
pub fn ld_loss_aligned(denoised: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<f64> {
    if denoised.len() != reference.len() || denoised.iter().zip(reference).any(|(d, r)| d.len() != r.len()) {
        return Err(Error::validation("denoised and reference patterns differ"));
    }
    Ok(denoised
        .iter()
        .zip(reference)
        .map(|(d, r)| d.iter().zip(r).map(|(x, y)| (x - y).abs()).sum::<f64>())
        .sum())
}

/// Squared Frobenius norm of `X_0`.
pub fn l2_reg(emb: &EmbeddingTable) -> f64 {
    emb.x0.iter().map(|v| v * v).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub bpr: f64,
    pub ld: f64,
    pub reg: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub d_x0: Array2<f64>,
    pub terms: LossTerms,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub beta: f64,
    pub lambda: f64,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{name} loss is not finite ({v})")))
    }
}

/// Loss terms of one batch for an already computed forward state.
pub fn batch_loss(
    emb: &EmbeddingTable,
    prepared: &PreparedStack,
    state: &ForwardState,
    batch: &[BprTriple],
    weights: LossWeights,
) -> Result<LossTerms> {
    let n_users = prepared.n_users;
    let pooled = &state.pooled;
    let (pos, neg): (Vec<f64>, Vec<f64>) = batch
        .iter()
        .map(|t| {
            let u = pooled.row(t.user);
            (
                u.dot(&pooled.row(n_users + t.pos_item)),
                u.dot(&pooled.row(n_users + t.neg_item)),
            )
        })
        .unzip();
    let bpr = bpr_loss(&pos, &neg)?;
    let ld = if state.mode == Mode::Full {
        let reference: Vec<Vec<f64>> = prepared.orders[..state.denoised.len()]
            .iter()
            .map(|o| o.a_bar.clone())
            .collect();
        ld_loss_aligned(&state.denoised, &reference)?
    } else {
        0.0
    };
    let reg = l2_reg(emb);
    let total = bpr + weights.beta * ld + weights.lambda * reg;
    check_finite("bpr", bpr)?;
    check_finite("ld", ld)?;
    check_finite("reg", reg)?;
    check_finite("total", total)?;
    Ok(LossTerms { bpr, ld, reg, total })
}

/// Forward pass plus exact reverse-mode gradient of the total loss.
pub fn gradient(
    emb: &EmbeddingTable,
    prepared: &PreparedStack,
    batch: &[BprTriple],
    opts: &ForwardOptions,
    weights: LossWeights,
) -> Result<GradientBundle> {
    for t in batch {
        if t.user >= prepared.n_users || t.pos_item >= prepared.n_items || t.neg_item >= prepared.n_items {
            return Err(Error::validation(format!("triple {t:?} outside the graph")));
        }
    }
    let state = forward(emb, prepared, opts)?;
    let terms = batch_loss(emb, prepared, &state, batch, weights)?;
    let d_x0 = backward(emb, prepared, &state, batch, opts, weights)?;
    if d_x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("gradient has non-finite entries".into()));
    }
    Ok(GradientBundle { d_x0, terms })
}

fn backward(
    emb: &EmbeddingTable,
    prepared: &PreparedStack,
    state: &ForwardState,
    batch: &[BprTriple],
    opts: &ForwardOptions,
    weights: LossWeights,
) -> Result<Array2<f64>> {
    let x0 = &emb.x0;
    let n_users = prepared.n_users;
    let pooled = &state.pooled;

    let mut d_pooled = Array2::<f64>::zeros(pooled.dim());
    let scale = 1.0 / batch.len() as f64;
    for t in batch {
        let (u, p, q) = (t.user, n_users + t.pos_item, n_users + t.neg_item);
        let diff = &pooled.row(p) - &pooled.row(q);
        let margin = pooled.row(u).dot(&diff);
        let c = -sigmoid(-margin) * scale;
        d_pooled.row_mut(u).scaled_add(c, &diff);
        d_pooled.row_mut(p).scaled_add(c, &pooled.row(u));
        d_pooled.row_mut(q).scaled_add(-c, &pooled.row(u));
    }

    let mut dx0 = x0 * (2.0 * weights.lambda);
    let layers = opts.layers;
    match state.mode {
        Mode::Mf => dx0 += &d_pooled,
        Mode::NoDecouple => {
            let first = &prepared.orders[0];
            let share = d_pooled / (layers as f64 + 1.0);
            let mut g = share.clone();
            for _ in 0..layers {
                g = spmv_values(&first.a_hat, &first.a_bar, g.view())? + &share;
            }
            dx0 += &g;
        }
        Mode::NoDenoise => {
            let share = d_pooled / (layers as f64 + 1.0);
            dx0 += &share;
            for ord in &prepared.orders[..layers] {
                dx0 += &spmv_values(&ord.a_hat, &ord.a_bar, share.view())?;
            }
        }
        Mode::Full => {
            let share = d_pooled / (layers as f64 + 1.0);
            dx0 += &share;
            let mut d_out = vec![share; layers];
            let mut d_shared = match opts.hidden {
                HiddenRule::Shared => Some(Array2::<f64>::zeros(x0.dim())),
                HiddenRule::PerOrder => None,
            };
            for l in (1..=layers).rev() {
                let d_h = order_backward(x0, prepared, state, l, &d_out[l - 1], opts, weights, &mut dx0)?;
                match &mut d_shared {
                    Some(acc) => *acc += &d_h,
                    None => {
                        let part = d_h / l as f64;
                        dx0 += &part;
                        for d in &mut d_out[..l - 1] {
                            *d += &part;
                        }
                    }
                }
            }
            if let Some(acc) = d_shared {
                let part = acc / layers as f64;
                dx0 += &part;
                for ord in &prepared.orders[..layers - 1] {
                    dx0 += &spmv_values(&ord.a_hat, &ord.a_bar, part.view())?;
                }
            }
        }
    }
    Ok(dx0)
}

/// Adjoint of one denoised order. Adds the propagation term to `dx0` and
/// returns the gradient with respect to the hidden state `H_l`.
#[allow(clippy::too_many_arguments)]
fn order_backward(
    x0: &Array2<f64>,
    prepared: &PreparedStack,
    state: &ForwardState,
    l: usize,
    d_xl: &Array2<f64>,
    opts: &ForwardOptions,
    weights: LossWeights,
    dx0: &mut Array2<f64>,
) -> Result<Array2<f64>> {
    let ord = &prepared.orders[l - 1];
    let trace = &state.traces[l - 1];
    let tilde = &state.denoised[l - 1];
    let a = &ord.a_hat;
    let n = a.n();

    *dx0 += &spmv_values(a, tilde, d_xl.view())?;

    let r = &trace.inv_sqrt_deg;
    let mut d_checked = vec![0.0; a.nnz()];
    let mut d_r = vec![0.0; n];
    for u in 0..n {
        let du = d_xl.row(u);
        for k in a.row_range(u) {
            let v = a.col_indices()[k] as usize;
            let g = du.dot(&x0.row(v)) + weights.beta * sign(tilde[k] - ord.a_bar[k]);
            if g == 0.0 {
                continue;
            }
            d_checked[k] = g * (r[u] * r[v]);
            d_r[u] += g * trace.checked[k] * r[v];
            d_r[v] += g * trace.checked[k] * r[u];
        }
    }
    for u in 0..n {
        if r[u] == 0.0 {
            continue;
        }
        let d_deg = -0.5 * d_r[u] * r[u] * r[u] * r[u];
        for k in a.row_range(u) {
            d_checked[k] += d_deg;
        }
    }

    let mask = &state.masks[l - 1];
    let sim = &trace.similarity;
    let h = &state.hidden[l - 1];
    let mut d_h = Array2::<f64>::zeros(h.dim());
    for (e, &(u, v)) in ord.edges.endpoints.iter().enumerate() {
        let (k1, k2) = ord.edges.positions(e);
        let d_w = a.values()[k1] * d_checked[k1] + a.values()[k2] * d_checked[k2];
        let soft = mask.soft[e];
        let d_cos = d_w * soft * (1.0 - soft) * mask_logit_grad(sim.s[e], opts.tau) / 2.0;
        let (u, v) = (u as usize, v as usize);
        let (nu, nv) = (sim.norms[u], sim.norms[v]);
        if d_cos == 0.0 || nu == 0.0 || nv == 0.0 {
            continue;
        }
        let cos = sim.cos[e];
        let (hu, hv) = (h.row(u), h.row(v));
        let cross = d_cos / (nu * nv);
        let mut gu = &hv * cross;
        gu.scaled_add(-d_cos * cos / (nu * nu), &hu);
        let mut gv = &hu * cross;
        gv.scaled_add(-d_cos * cos / (nv * nv), &hv);
        let mut row = d_h.row_mut(u);
        row += &gu;
        let mut row = d_h.row_mut(v);
        row += &gv;
    }
    Ok(d_h)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Array2<f64>,
    pub v: Array2<f64>,
    pub t: u64,
    pub params: AdamParams,
}

impl AdamState {
    pub fn new(shape: (usize, usize)) -> Self {
        Self {
            m: Array2::zeros(shape),
            v: Array2::zeros(shape),
            t: 0,
            params: AdamParams::default(),
        }
    }
}

pub fn adam_step(emb: &mut EmbeddingTable, grad: &Array2<f64>, state: &mut AdamState, lr: f64) -> Result<()> {
    if grad.dim() != emb.x0.dim() || state.m.dim() != emb.x0.dim() {
        return Err(Error::validation(format!(
            "gradient {:?} / moments {:?} vs parameters {:?}",
            grad.dim(),
            state.m.dim(),
            emb.x0.dim()
        )));
    }
    let AdamParams { beta1, beta2, eps } = state.params;
    state.t += 1;
    let c1 = 1.0 - beta1.powi(state.t as i32);
    let c2 = 1.0 - beta2.powi(state.t as i32);
    Zip::from(&mut emb.x0)
        .and(&mut state.m)
        .and(&mut state.v)
        .and(grad)
        .for_each(|x, m, v, &g| {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *x -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        });
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub d: usize,
    pub batch_size: usize,
    pub layers: usize,
    pub learning_rate: f64,
    pub beta: f64,
    pub lambda: f64,
    pub tau: f64,
    pub hard: bool,
    pub hidden: HiddenRule,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub mode: Mode,
    pub cap: Option<usize>,
    pub values: EntryValues,
    pub eval_k: usize,
    pub init_std: f64,
    /// Write measured epoch times to the log; off gives byte-stable logs.
    pub log_seconds: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            d: DEFAULT_DIM,
            batch_size: 2048,
            layers: 2,
            learning_rate: 1e-3,
            beta: 0.4,
            lambda: 1e-4,
            tau: DEFAULT_TAU,
            hard: false,
            hidden: HiddenRule::PerOrder,
            patience: 10,
            max_epochs: 500,
            seed: 1,
            mode: Mode::Full,
            cap: None,
            values: EntryValues::WalkCounts,
            eval_k: DEFAULT_K,
            init_std: INIT_STD,
            log_seconds: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("beta", self.beta),
            ("lambda", self.lambda),
            ("tau", self.tau),
            ("init_std", self.init_std),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::validation(format!("{name} must be positive, got {v}")));
            }
        }
        if self.d == 0 || self.batch_size == 0 || self.eval_k == 0 {
            return Err(Error::validation("d, batch_size and eval_k must be at least 1"));
        }
        if self.patience == 0 || self.max_epochs == 0 {
            return Err(Error::validation("patience and max_epochs must be at least 1"));
        }
        if self.mode != Mode::Mf && !(1..=crate::decouple::MAX_ORDER).contains(&self.layers) {
            return Err(Error::validation(format!(
                "layers must be in 1..={}, got {}",
                crate::decouple::MAX_ORDER,
                self.layers
            )));
        }
        Ok(())
    }

    /// Layers actually propagated; matrix factorization uses none.
    pub fn effective_layers(&self) -> usize {
        if self.mode == Mode::Mf {
            0
        } else {
            self.layers
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            beta: self.beta,
            lambda: self.lambda,
        }
    }

    pub fn forward_options(&self, noise: MaskNoise) -> ForwardOptions {
        ForwardOptions {
            mode: self.mode,
            layers: self.effective_layers(),
            tau: self.tau,
            hard: self.hard,
            hidden: self.hidden,
            noise,
        }
    }

    pub fn inference_options(&self) -> ForwardOptions {
        ForwardOptions::inference(self.mode, self.effective_layers(), self.tau, self.hidden)
    }
}

/// Decouples the training graph to the depth `cfg.mode` needs.
pub fn prepare_stack(train: &InteractionSet, cfg: &TrainConfig, cache: Option<&DecoupleCache>) -> Result<PreparedStack> {
    let depth = match cfg.mode {
        Mode::Mf => 0,
        Mode::NoDecouple => 1,
        Mode::Full | Mode::NoDenoise => cfg.layers,
    };
    if depth == 0 {
        return Ok(PreparedStack {
            n_users: train.n_users,
            n_items: train.n_items,
            orders: Vec::new(),
        });
    }
    let g = build_bipartite(train)?;
    let opts = DecoupleOptions {
        cap: cfg.cap,
        values: cfg.values,
        ..DecoupleOptions::default()
    };
    let stack = match cache {
        Some(c) => c.load_or_compute(&g, depth, &opts)?,
        None => decouple(&g, depth, &opts)?,
    };
    PreparedStack::new(&stack, train.n_users, train.n_items)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Tracks the best validation score; a tie is not an improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, metric: f64) -> StopDecision {
        match self.best {
            Some((_, b)) if metric <= b => {
                self.since_best += 1;
                if self.since_best >= self.patience {
                    StopDecision::Stop
                } else {
                    StopDecision::Continue
                }
            }
            _ => {
                self.best = Some((epoch, metric));
                self.since_best = 0;
                StopDecision::Improved
            }
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub losses: LossTerms,
    pub val_recall: f64,
    pub seconds: f64,
}

pub const LOG_HEADER: &str = "epoch,loss_total,loss_bpr,loss_ld,loss_reg,val_recall@20,seconds";

pub fn format_log(rows: &[EpochLog]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.epoch, r.losses.total, r.losses.bpr, r.losses.ld, r.losses.reg, r.val_recall, r.seconds
        );
    }
    out
}

pub fn write_log(path: &Path, rows: &[EpochLog]) -> Result<()> {
    fs::write(path, format_log(rows)).map_err(|e| Error::io(path, e))
}

/// Owns parameters and optimizer state for one run.
pub struct Trainer<'a> {
    pub split: &'a SplitDataset,
    pub prepared: &'a PreparedStack,
    pub cfg: TrainConfig,
    pub emb: EmbeddingTable,
    pub adam: AdamState,
    sampler: NegativeSampler,
}

impl<'a> Trainer<'a> {
    pub fn new(split: &'a SplitDataset, prepared: &'a PreparedStack, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if split.train.is_empty() || split.validation.is_empty() {
            return Err(Error::validation("training and validation sets must be non-empty"));
        }
        if prepared.n_users != split.train.n_users || prepared.n_items != split.train.n_items {
            return Err(Error::validation("prepared graph does not match the split"));
        }
        let n = prepared.n();
        let emb = init_embeddings_with_std(n, cfg.d, cfg.init_std, derive_seed(cfg.seed, "init", &[]))?;
        Ok(Self {
            split,
            prepared,
            adam: AdamState::new((n, cfg.d)),
            emb,
            sampler: NegativeSampler::new(&split.train),
            cfg,
        })
    }

    /// One pass over the shuffled training pairs; returns batch-averaged losses.
    pub fn run_epoch(&mut self, epoch: usize) -> Result<LossTerms> {
        let seed = self.cfg.seed;
        let mut order = self.split.train.pairs.clone();
        order.shuffle(&mut derived_rng(seed, "shuffle", &[epoch as u64]));
        let weights = self.cfg.loss_weights();
        let mut sum = LossTerms::default();
        let mut batches = 0usize;
        for (step, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let coords = [epoch as u64, step as u64];
            let triples = self.sampler.sample(chunk, derive_seed(seed, "negatives", &coords))?;
            let noise = MaskNoise::Gumbel {
                seed: derive_seed(seed, "gumbel", &coords),
            };
            let g = gradient(&self.emb, self.prepared, &triples, &self.cfg.forward_options(noise), weights)
                .map_err(|e| match e {
                    Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}, step {step}: {m}")),
                    other => other,
                })?;
            adam_step(&mut self.emb, &g.d_x0, &mut self.adam, self.cfg.learning_rate)?;
            sum.bpr += g.terms.bpr;
            sum.ld += g.terms.ld;
            sum.reg += g.terms.reg;
            sum.total += g.terms.total;
            batches += 1;
        }
        let b = batches as f64;
        Ok(LossTerms {
            bpr: sum.bpr / b,
            ld: sum.ld / b,
            reg: sum.reg / b,
            total: sum.total / b,
        })
    }

    pub fn validation_recall(&self) -> Result<f64> {
        let state = forward(&self.emb, self.prepared, &self.cfg.inference_options())?;
        let (m, _, _) = evaluate_pooled(state.pooled.view(), self.split, Phase::Validation, self.cfg.eval_k, false)?;
        Ok(m.recall)
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub best: EmbeddingTable,
    pub best_epoch: usize,
    pub best_recall: f64,
    pub epochs_run: usize,
    pub log: Vec<EpochLog>,
}

impl FitOutcome {
    pub fn checkpoint(&self, split: &SplitDataset, cfg: &TrainConfig, config_hash: &str) -> Checkpoint {
        Checkpoint {
            header: CheckpointHeader {
                n_users: split.train.n_users,
                n_items: split.train.n_items,
                d: self.best.d(),
                layers: cfg.effective_layers(),
                mode: cfg.mode,
                tau: cfg.tau,
                hidden: cfg.hidden,
                cap: cfg.cap,
                values: cfg.values,
                config_hash: config_hash.to_owned(),
                epoch: self.best_epoch,
                payload: String::new(),
                payload_bytes: 0,
            },
            embeddings: self.best.clone(),
        }
    }
}

pub fn fit(split: &SplitDataset, cfg: &TrainConfig) -> Result<FitOutcome> {
    cfg.validate()?;
    let prepared = prepare_stack(&split.train, cfg, DecoupleCache::from_env().as_ref())?;
    fit_with_stack(split, &prepared, cfg)
}

pub fn fit_with_stack(split: &SplitDataset, prepared: &PreparedStack, cfg: &TrainConfig) -> Result<FitOutcome> {
    let mut trainer = Trainer::new(split, prepared, cfg.clone())?;
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = trainer.emb.clone();
    let mut log = Vec::new();
    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        let losses = trainer.run_epoch(epoch)?;
        let seconds = if cfg.log_seconds {
            start.elapsed().as_secs_f64()
        } else {
            0.0
        };
        let val_recall = trainer.validation_recall()?;
        log.push(EpochLog {
            epoch,
            losses,
            val_recall,
            seconds,
        });
        match stopper.observe(epoch, val_recall) {
            StopDecision::Improved => best = trainer.emb.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }
    let (best_epoch, best_recall) = stopper.best().expect("at least one epoch ran");
    Ok(FitOutcome {
        best,
        best_epoch,
        best_recall,
        epochs_run: log.len(),
        log,
    })
}

/// Central finite differences of the total loss, entry by entry. Noise is
/// fixed by `opts`, so the masks only move through `X_0`.
pub fn finite_difference(
    emb: &EmbeddingTable,
    prepared: &PreparedStack,
    batch: &[BprTriple],
    opts: &ForwardOptions,
    weights: LossWeights,
    h: f64,
) -> Result<Array2<f64>> {
    let mut out = Array2::zeros(emb.x0.dim());
    let mut probe = emb.clone();
    for ((i, j), slot) in out.indexed_iter_mut() {
        let orig = emb.x0[[i, j]];
        probe.x0[[i, j]] = orig + h;
        let plus = batch_loss(&probe, prepared, &forward(&probe, prepared, opts)?, batch, weights)?.total;
        probe.x0[[i, j]] = orig - h;
        let minus = batch_loss(&probe, prepared, &forward(&probe, prepared, opts)?, batch, weights)?.total;
        probe.x0[[i, j]] = orig;
        *slot = (plus - minus) / (2.0 * h);
    }
    Ok(out)
}

/// Largest relative error over entries whose analytic magnitude exceeds `floor`.
pub fn max_relative_error(analytic: &Array2<f64>, numeric: &Array2<f64>, floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .filter(|(a, _)| a.abs() > floor)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()))
        .fold(0.0, f64::max)
}
