//! Training objective: BPR ranking loss, per-layer two-view InfoNCE, and L2
//! regularization, with exact reverse-mode gradients and Adam updates.

use std::fmt;
use std::str::FromStr;

use crate::data::{InteractionDataset, Split, UserItems};
use crate::linalg::{dot, exp_in_place, sum, DenseMatrix, Side, SvdFactors};
use crate::model::{leaky_relu_grad, ForwardTrace, HyperParams, ModelError, ModelState, Mode};
use crate::rng::SplitMix64;

const NEGATIVE_SAMPLING_TRIES: usize = 100;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ObjectiveError {
    #[error("cannot sample a negative item for user {user}: it interacts with every item")]
    Saturated { user: usize },
    #[error("training split is empty")]
    EmptyTrain,
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Which nodes act as anchors and negatives in the contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClScope {
    /// Unique users (or items) of the current batch.
    InBatch,
    /// Every user (or item).
    FullPopulation,
}

impl fmt::Display for ClScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClScope::InBatch => "in-batch",
            ClScope::FullPopulation => "full-population",
        })
    }
}

impl FromStr for ClScope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "in-batch" => Ok(ClScope::InBatch),
            "full-population" => Ok(ClScope::FullPopulation),
            other => Err(format!("unknown cl_scope {other:?} (expected in-batch or full-population)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TrainBatch {
    pub users: Vec<usize>,
    pub pos_items: Vec<usize>,
    pub neg_items: Vec<usize>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    /// Sorted unique users.
    pub fn unique_users(&self) -> Vec<usize> {
        sorted_unique(self.users.iter().copied())
    }

    /// Sorted unique positive and negative items.
    pub fn unique_items(&self) -> Vec<usize> {
        sorted_unique(self.pos_items.iter().chain(&self.neg_items).copied())
    }
}

fn sorted_unique(it: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut v: Vec<usize> = it.collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// Uniform positive pairs with rejection-sampled negatives.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    pairs: Vec<(usize, usize)>,
    positives: UserItems,
    num_items: usize,
}

impl BatchSampler {
    pub fn new(ds: &InteractionDataset) -> Result<Self, ObjectiveError> {
        if ds.train().is_empty() {
            return Err(ObjectiveError::EmptyTrain);
        }
        Ok(Self { pairs: ds.train().to_vec(), positives: ds.items_by_user(Split::Train), num_items: ds.num_items() })
    }

    pub fn num_pairs(&self) -> usize {
        self.pairs.len()
    }

    /// `size` train pairs drawn with replacement, each with one negative item.
    pub fn sample(&self, size: usize, rng: &mut SplitMix64) -> Result<TrainBatch, ObjectiveError> {
        let mut batch = TrainBatch {
            users: Vec::with_capacity(size),
            pos_items: Vec::with_capacity(size),
            neg_items: Vec::with_capacity(size),
        };
        for _ in 0..size {
            let (u, i) = self.pairs[uniform_index(rng, self.pairs.len())];
            let neg = self.negative_for(u, rng)?;
            batch.users.push(u);
            batch.pos_items.push(i);
            batch.neg_items.push(neg);
        }
        Ok(batch)
    }

    fn negative_for(&self, user: usize, rng: &mut SplitMix64) -> Result<usize, ObjectiveError> {
        for _ in 0..NEGATIVE_SAMPLING_TRIES {
            let j = uniform_index(rng, self.num_items);
            if !self.positives.contains(user, j) {
                return Ok(j);
            }
        }
        let pos = self.positives.items(user);
        let free = self.num_items - pos.len();
        if free == 0 {
            return Err(ObjectiveError::Saturated { user });
        }
        let mut target = uniform_index(rng, free);
        for j in 0..self.num_items {
            if pos.binary_search(&j).is_err() {
                if target == 0 {
                    return Ok(j);
                }
                target -= 1;
            }
        }
        unreachable!("complement has {free} items")
    }
}

fn uniform_index(rng: &mut SplitMix64, n: usize) -> usize {
    ((rng.next_f64() * n as f64) as usize).min(n - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub total: f64,
    pub rec_loss: f64,
    pub cl_loss_user: f64,
    pub cl_loss_item: f64,
    pub reg_loss: f64,
}

impl LossReport {
    fn combine(rec: f64, cl_u: f64, cl_i: f64, reg: f64, hp: &HyperParams) -> Self {
        Self {
            total: rec + hp.lambda1 * (cl_u + cl_i) + hp.lambda2 * reg,
            rec_loss: rec,
            cl_loss_user: cl_u,
            cl_loss_item: cl_i,
            reg_loss: reg,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.total, self.rec_loss, self.cl_loss_user, self.cl_loss_item, self.reg_loss]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean of `-ln σ(ŷ_pos - ŷ_neg)` over the batch; 0 for an empty batch.
pub fn bpr_loss(trace: &ForwardTrace, batch: &TrainBatch) -> f64 {
    bpr_terms(&trace.final_user, &trace.final_item, batch, None)
}

fn bpr_terms(
    fu: &DenseMatrix,
    fi: &DenseMatrix,
    batch: &TrainBatch,
    mut grads: Option<(&mut DenseMatrix, &mut DenseMatrix)>,
) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    let inv_b = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for j in 0..batch.len() {
        let (u, p, n) = (batch.users[j], batch.pos_items[j], batch.neg_items[j]);
        let (eu, ep, en) = (fu.row(u), fi.row(p), fi.row(n));
        let margin = dot(eu, ep) - dot(eu, en);
        loss += softplus(-margin);
        if let Some((gu, gi)) = grads.as_mut() {
            let d = -sigmoid(-margin) * inv_b;
            let diff: Vec<f64> = ep.iter().zip(en).map(|(a, b)| a - b).collect();
            let eu = eu.to_vec();
            for (g, x) in gu.row_mut(u).iter_mut().zip(&diff) {
                *g += d * x;
            }
            for (g, x) in gi.row_mut(p).iter_mut().zip(&eu) {
                *g += d * x;
            }
            for (g, x) in gi.row_mut(n).iter_mut().zip(&eu) {
                *g -= d * x;
            }
        }
    }
    loss * inv_b
}

/// Two-view InfoNCE summed over layers and averaged over `members`.
///
/// For each layer, anchor `z_p` is contrasted against `g_{p'}` for every
/// member `p'` by cosine similarity over `temperature`; the matching index
/// is the positive. Fewer than two members yields 0.
pub fn infonce_loss(z: &[DenseMatrix], g: &[DenseMatrix], members: &[usize], temperature: f64) -> f64 {
    infonce_terms(z, g, members, temperature, None)
}

fn infonce_terms(
    z: &[DenseMatrix],
    g: &[DenseMatrix],
    members: &[usize],
    temperature: f64,
    mut grads: Option<(f64, &mut Vec<DenseMatrix>, &mut Vec<DenseMatrix>)>,
) -> f64 {
    let m = members.len();
    if m < 2 {
        log::warn!("contrastive loss skipped: {m} member(s)");
        return 0.0;
    }
    let inv_m = 1.0 / m as f64;
    let inv_tau = 1.0 / temperature;
    // Cosines lie in [-1, 1], so shifting logits by 1/τ keeps every exponent
    // in [-2/τ, 0]. Only for tiny τ, where that could underflow, fall back to
    // the row maximum.
    let fixed_shift = (2.0 * inv_tau < 700.0).then_some(inv_tau);
    let d_scale = grads.as_ref().map_or(0.0, |(scale, _, _)| scale * inv_m * inv_tau);
    let mut total = 0.0;
    for (zt, gt) in z.iter().zip(g) {
        let (zn, z_norms) = normalized_rows(zt, members);
        let (gn, g_norms) = normalized_rows(gt, members);
        let mut sims = zn.matmul_t(&gn).expect("same embedding width");

        let mut layer_loss = 0.0;
        for p in 0..m {
            let row = sims.row_mut(p);
            let positive = row[p] * inv_tau;
            let shift = fixed_shift.unwrap_or_else(|| row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) * inv_tau);
            for s in row.iter_mut() {
                *s = *s * inv_tau - shift;
            }
            exp_in_place(row);
            let sum = sum(row);
            layer_loss += shift + sum.ln() - positive;
            if grads.is_some() {
                // Row becomes d(scaled loss)/d(cosines): softmax minus one-hot.
                let c = d_scale / sum;
                for s in row.iter_mut() {
                    *s *= c;
                }
                row[p] -= d_scale;
            }
        }
        total += layer_loss * inv_m;

        // Gradients come back compact: row `r` belongs to `members[r]`.
        if let Some((_, dz, dg)) = grads.as_mut() {
            let d_sims = sims;
            let d_zn = d_sims.matmul(&gn).expect("shapes");
            let d_gn = d_sims.t_matmul(&zn).expect("shapes");
            dz.push(normalize_grad(&zn, &z_norms, &d_zn));
            dg.push(normalize_grad(&gn, &g_norms, &d_gn));
        }
    }
    total
}

/// Gathers `members` rows and scales them to unit length; zero rows stay zero.
fn normalized_rows(x: &DenseMatrix, members: &[usize]) -> (DenseMatrix, Vec<f64>) {
    let k = x.cols();
    let mut out = DenseMatrix::zeros(members.len(), k);
    let mut norms = Vec::with_capacity(members.len());
    for (r, &p) in members.iter().enumerate() {
        let src = x.row(p);
        let norm = dot(src, src).sqrt();
        norms.push(norm);
        if norm > 0.0 {
            for (d, s) in out.row_mut(r).iter_mut().zip(src) {
                *d = s / norm;
            }
        }
    }
    (out, norms)
}

/// Back-propagates through `x / |x|`, one output row per member.
fn normalize_grad(unit: &DenseMatrix, norms: &[f64], d_unit: &DenseMatrix) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(unit.rows(), unit.cols());
    for (r, &norm) in norms.iter().enumerate() {
        if norm == 0.0 {
            continue;
        }
        let xn = unit.row(r);
        let dxn = d_unit.row(r);
        let proj = dot(xn, dxn);
        for ((dst, &a), &b) in out.row_mut(r).iter_mut().zip(dxn).zip(xn) {
            *dst = (a - b * proj) / norm;
        }
    }
    out
}

/// `‖E_user‖² + ‖E_item‖²` over the full tables.
pub fn l2_reg(state: &ModelState) -> f64 {
    state.user_emb.sum_of_squares() + state.item_emb.sum_of_squares()
}

/// Contrastive anchors for users and items under `scope`.
pub fn contrastive_members(batch: &TrainBatch, state: &ModelState, scope: ClScope) -> (Vec<usize>, Vec<usize>) {
    match scope {
        ClScope::InBatch => (batch.unique_users(), batch.unique_items()),
        ClScope::FullPopulation => ((0..state.num_users()).collect(), (0..state.num_items()).collect()),
    }
}

/// Loss components for one batch. Contrastive terms are 0 when the trace
/// has no SVD branch.
pub fn total_loss(
    trace: &ForwardTrace,
    batch: &TrainBatch,
    state: &ModelState,
    hp: &HyperParams,
) -> Result<LossReport, ObjectiveError> {
    if hp.lambda1 > 0.0 && !trace.has_svd_branch() {
        return Err(ObjectiveError::Contract("lambda1 > 0 needs a trace with the SVD branch".into()));
    }
    let rec = bpr_loss(trace, batch);
    let (cl_u, cl_i) = if trace.has_svd_branch() {
        let (mu, mi) = contrastive_members(batch, state, hp.cl_scope);
        (
            infonce_loss(&trace.z_user, &trace.g_user, &mu, hp.temperature),
            infonce_loss(&trace.z_item, &trace.g_item, &mi, hp.temperature),
        )
    } else {
        (0.0, 0.0)
    };
    Ok(LossReport::combine(rec, cl_u, cl_i, l2_reg(state), hp))
}

/// Gradient tables matching the embedding tables.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub user: DenseMatrix,
    pub item: DenseMatrix,
}

/// Loss and exact gradient with respect to both embedding tables.
///
/// Reverse accumulation runs from the scores through the layer sum, the
/// residual chain, LeakyReLU, the recorded edge-dropped graphs, and, when
/// `lambda1 > 0`, the factored SVD products and the normalized similarities.
pub fn backward(
    trace: &ForwardTrace,
    batch: &TrainBatch,
    state: &ModelState,
    svd: Option<&SvdFactors>,
    hp: &HyperParams,
) -> Result<(LossReport, Gradients), ObjectiveError> {
    if trace.mode != Mode::Train {
        return Err(ObjectiveError::Contract("backward needs a train-mode trace".into()));
    }
    let layers = trace.layers();
    if trace.graphs.len() != layers {
        return Err(ObjectiveError::Contract("trace is missing per-layer graphs".into()));
    }
    let use_cl = hp.lambda1 > 0.0;
    if use_cl && (!trace.has_svd_branch() || svd.is_none()) {
        return Err(ObjectiveError::Contract("lambda1 > 0 needs the SVD branch and its factors".into()));
    }
    let (m, n, k) = (state.num_users(), state.num_items(), state.embed_dim());

    let mut d_final_user = DenseMatrix::zeros(m, k);
    let mut d_final_item = DenseMatrix::zeros(n, k);
    let rec = bpr_terms(&trace.final_user, &trace.final_item, batch, Some((&mut d_final_user, &mut d_final_item)));

    // Contrastive gradients per layer, compact over the members; empty when
    // the term is off or skipped.
    let (mut dz_user, mut dg_user, mut dz_item, mut dg_item) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut cl_u, mut cl_i) = (0.0, 0.0);
    let (mu, mi) = contrastive_members(batch, state, hp.cl_scope);
    if trace.has_svd_branch() {
        if use_cl {
            cl_u = infonce_terms(&trace.z_user, &trace.g_user, &mu, hp.temperature, Some((hp.lambda1, &mut dz_user, &mut dg_user)));
            cl_i = infonce_terms(&trace.z_item, &trace.g_item, &mi, hp.temperature, Some((hp.lambda1, &mut dz_item, &mut dg_item)));
        } else {
            cl_u = infonce_loss(&trace.z_user, &trace.g_user, &mu, hp.temperature);
            cl_i = infonce_loss(&trace.z_item, &trace.g_item, &mi, hp.temperature);
        }
    }

    // Running gradients w.r.t. h[t]; the layer sum feeds d_final into every t.
    let mut g_hu = d_final_user.clone();
    let mut g_hi = d_final_item.clone();
    for t in (1..=layers).rev() {
        let graph = &trace.graphs[t - 1];
        let mut next_hu = g_hu.clone();
        next_hu.add_assign(&d_final_user).map_err(ModelError::from)?;
        let mut next_hi = g_hi.clone();
        next_hi.add_assign(&d_final_item).map_err(ModelError::from)?;

        // z_user[t] = σ(D_t h_item[t-1]) with h_user[t] = z_user[t] + h_user[t-1]
        let mut g_pre_u = g_hu;
        if let Some(dz) = dz_user.get(t - 1) {
            scatter_add_rows(&mut g_pre_u, &mu, dz);
        }
        mul_leaky_grad(&mut g_pre_u, &trace.user_pre[t - 1]);
        next_hi.add_assign(&graph.spmm_t(&g_pre_u).map_err(ModelError::from)?).map_err(ModelError::from)?;

        let mut g_pre_i = g_hi;
        if let Some(dz) = dz_item.get(t - 1) {
            scatter_add_rows(&mut g_pre_i, &mi, dz);
        }
        mul_leaky_grad(&mut g_pre_i, &trace.item_pre[t - 1]);
        next_hu.add_assign(&graph.spmm(&g_pre_i).map_err(ModelError::from)?).map_err(ModelError::from)?;

        // g_user[t] = σ(SVD-propagated h_item[t-1]); only member rows carry gradient.
        if let (Some(f), Some(dg)) = (svd, dg_user.get(t - 1)) {
            let mut g_su = dg.clone();
            mul_leaky_grad_rows(&mut g_su, &trace.svd_user_pre[t - 1], &mu);
            next_hi.add_assign(&f.propagate_rows(&mu, &g_su, Side::Item).map_err(ModelError::from)?).map_err(ModelError::from)?;
        }
        if let (Some(f), Some(dg)) = (svd, dg_item.get(t - 1)) {
            let mut g_si = dg.clone();
            mul_leaky_grad_rows(&mut g_si, &trace.svd_item_pre[t - 1], &mi);
            next_hu.add_assign(&f.propagate_rows(&mi, &g_si, Side::User).map_err(ModelError::from)?).map_err(ModelError::from)?;
        }

        // The d_final term was added to next_* for h[t-1]; g_hu itself already
        // held h[t]'s share.
        g_hu = next_hu;
        g_hi = next_hi;
    }

    let reg = l2_reg(state);
    let two_l2 = 2.0 * hp.lambda2;
    for (g, &e) in g_hu.as_mut_slice().iter_mut().zip(state.user_emb.as_slice()) {
        *g += two_l2 * e;
    }
    for (g, &e) in g_hi.as_mut_slice().iter_mut().zip(state.item_emb.as_slice()) {
        *g += two_l2 * e;
    }
    Ok((LossReport::combine(rec, cl_u, cl_i, reg, hp), Gradients { user: g_hu, item: g_hi }))
}

fn scatter_add_rows(target: &mut DenseMatrix, rows: &[usize], compact: &DenseMatrix) {
    for (r, &p) in rows.iter().enumerate() {
        for (dst, &x) in target.row_mut(p).iter_mut().zip(compact.row(r)) {
            *dst += x;
        }
    }
}

/// [`mul_leaky_grad`] for a compact `g` whose row `r` is `pre` row `rows[r]`.
fn mul_leaky_grad_rows(g: &mut DenseMatrix, pre: &DenseMatrix, rows: &[usize]) {
    for (r, &p) in rows.iter().enumerate() {
        for (x, &q) in g.row_mut(r).iter_mut().zip(pre.row(p)) {
            *x *= leaky_relu_grad(q);
        }
    }
}

fn mul_leaky_grad(g: &mut DenseMatrix, pre: &DenseMatrix) {
    for (x, &p) in g.as_mut_slice().iter_mut().zip(pre.as_slice()) {
        *x *= leaky_relu_grad(p);
    }
}

/// Adam moments for both tables.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m_user: DenseMatrix,
    pub v_user: DenseMatrix,
    pub m_item: DenseMatrix,
    pub v_item: DenseMatrix,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(state: &ModelState) -> Self {
        let (m, n, k) = (state.num_users(), state.num_items(), state.embed_dim());
        Self {
            m_user: DenseMatrix::zeros(m, k),
            v_user: DenseMatrix::zeros(m, k),
            m_item: DenseMatrix::zeros(n, k),
            v_item: DenseMatrix::zeros(n, k),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of both tables.
pub fn adam_step(
    state: &mut ModelState,
    opt: &mut OptimizerState,
    grads: &Gradients,
    lr: f64,
) -> Result<(), ObjectiveError> {
    let shapes_ok = grads.user.shape() == state.user_emb.shape()
        && grads.item.shape() == state.item_emb.shape()
        && opt.m_user.shape() == state.user_emb.shape()
        && opt.m_item.shape() == state.item_emb.shape();
    if !shapes_ok {
        return Err(ObjectiveError::Contract("gradient/optimizer shapes differ from parameters".into()));
    }
    opt.step += 1;
    let consts = AdamConsts { beta1: opt.beta1, beta2: opt.beta2, eps: opt.eps, step: opt.step, lr };
    adam_update(state.user_emb.as_mut_slice(), grads.user.as_slice(), opt.m_user.as_mut_slice(), opt.v_user.as_mut_slice(), consts);
    adam_update(state.item_emb.as_mut_slice(), grads.item.as_slice(), opt.m_item.as_mut_slice(), opt.v_item.as_mut_slice(), consts);
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConsts {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// 1-based step number of this update.
    pub step: u64,
    pub lr: f64,
}

pub fn adam_update(params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64], c: AdamConsts) {
    let bc1 = 1.0 - c.beta1.powf(c.step as f64);
    let bc2 = 1.0 - c.beta2.powf(c.step as f64);
    for (((p, &g), mi), vi) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
        *mi = c.beta1 * *mi + (1.0 - c.beta1) * g;
        *vi = c.beta2 * *vi + (1.0 - c.beta2) * g * g;
        let m_hat = *mi / bc1;
        let v_hat = *vi / bc2;
        *p -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, ModelState};
    use crate::linalg::CsrMatrix;

    fn trace_from_finals(fu: DenseMatrix, fi: DenseMatrix) -> ForwardTrace {
        ForwardTrace {
            mode: Mode::Eval,
            graphs: vec![],
            dropout_masks: vec![],
            user_pre: vec![],
            item_pre: vec![],
            z_user: vec![],
            z_item: vec![],
            svd_user_pre: vec![],
            svd_item_pre: vec![],
            g_user: vec![],
            g_item: vec![],
            h_user: vec![],
            h_item: vec![],
            final_user: fu,
            final_item: fi,
        }
    }

    fn one_pair_batch() -> TrainBatch {
        TrainBatch { users: vec![0], pos_items: vec![0], neg_items: vec![1] }
    }

    #[test]
    fn bpr_closed_forms() {
        let fu = DenseMatrix::from_rows(&[vec![1.0]]);
        let tie = trace_from_finals(fu.clone(), DenseMatrix::from_rows(&[vec![0.5], vec![0.5]]));
        assert!((bpr_loss(&tie, &one_pair_batch()) - std::f64::consts::LN_2).abs() < 1e-15);
        let one = trace_from_finals(fu.clone(), DenseMatrix::from_rows(&[vec![1.5], vec![0.5]]));
        assert!((bpr_loss(&one, &one_pair_batch()) - 0.313_261_687_518_222_8).abs() < 1e-15);
        let mut last = f64::INFINITY;
        for margin in [0.0, 1.0, 10.0, 100.0, 800.0] {
            let tr = trace_from_finals(fu.clone(), DenseMatrix::from_rows(&[vec![margin], vec![0.0]]));
            let l = bpr_loss(&tr, &one_pair_batch());
            assert!(l < last && l >= 0.0);
            last = l;
        }
        assert!(last < 1e-300);
    }

    #[test]
    fn infonce_closed_forms() {
        let same = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]);
        let members = [0, 1, 2];
        let l = infonce_loss(&[same.clone(), same.clone()], &[same.clone(), same.clone()], &members, 0.2);
        assert!((l - 2.0 * 3f64.ln()).abs() < 1e-12);

        let basis = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let l = infonce_loss(std::slice::from_ref(&basis), std::slice::from_ref(&basis), &[0, 1], 1.0);
        assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-14);

        let l = infonce_loss(std::slice::from_ref(&basis), std::slice::from_ref(&basis), &[0, 1], 1e12);
        assert!((l - 2f64.ln()).abs() < 1e-9);

        assert_eq!(infonce_loss(std::slice::from_ref(&basis), std::slice::from_ref(&basis), &[0], 1.0), 0.0);
    }

    #[test]
    fn infonce_handles_zero_rows() {
        let z = DenseMatrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 1.0]]);
        let g = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        let l = infonce_loss(&[z], &[g], &[0, 1], 0.5);
        assert!((l - 2f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn l2_values() {
        let mut s = ModelState::init_with_dims(2, 1, &HyperParams { embed_dim: 1, ..HyperParams::default() });
        s.user_emb = DenseMatrix::zeros(2, 1);
        s.item_emb = DenseMatrix::zeros(1, 1);
        assert_eq!(l2_reg(&s), 0.0);
        s.item_emb[(0, 0)] = 3.0;
        assert_eq!(l2_reg(&s), 9.0);
    }

    #[test]
    fn sampler_single_pair() {
        let ds = InteractionDataset::from_indices(1, 2, vec![(0, 0)], vec![], vec![]).unwrap();
        let s = BatchSampler::new(&ds).unwrap();
        let mut rng = SplitMix64::seed_from(0);
        let b = s.sample(50, &mut rng).unwrap();
        assert!(b.neg_items.iter().all(|&n| n == 1));
        let mut r1 = SplitMix64::seed_from(9);
        let mut r2 = SplitMix64::seed_from(9);
        assert_eq!(s.sample(20, &mut r1).unwrap(), s.sample(20, &mut r2).unwrap());
    }

    #[test]
    fn sampler_saturated_user_is_named() {
        let ds = InteractionDataset::from_indices(2, 2, vec![(0, 0), (1, 0), (1, 1)], vec![], vec![]).unwrap();
        let s = BatchSampler::new(&ds).unwrap();
        let mut rng = SplitMix64::seed_from(1);
        let err = (0..50).find_map(|_| s.sample(1, &mut rng).err()).unwrap();
        assert_eq!(err, ObjectiveError::Saturated { user: 1 });
    }

    #[test]
    fn sampler_fallback_after_rejections() {
        // User 0 has 999 of 1000 items: rejection sampling almost always needs the scan.
        let train: Vec<(usize, usize)> = (0..999).map(|i| (0, i)).collect();
        let ds = InteractionDataset::from_indices(1, 1000, train, vec![], vec![]).unwrap();
        let s = BatchSampler::new(&ds).unwrap();
        let mut rng = SplitMix64::seed_from(2);
        assert!(s.sample(20, &mut rng).unwrap().neg_items.iter().all(|&n| n == 999));
    }

    #[test]
    fn adam_zero_gradient_and_first_step() {
        let mut p = vec![1.0, -2.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        let c = AdamConsts { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 1, lr: 0.01 };
        adam_update(&mut p, &[0.0, 0.0], &mut m, &mut v, c);
        assert_eq!(p, vec![1.0, -2.0]);
        adam_update(&mut p, &[3.0, -1e-3], &mut m, &mut v, c);
        assert!((p[0] - (1.0 - 0.01)).abs() < 1e-9);
        assert!((p[1] - (-2.0 + 0.01)).abs() < 2e-7);
    }

    #[test]
    fn adam_step_counts_and_checks_shapes() {
        let hp = HyperParams { embed_dim: 2, ..HyperParams::default() };
        let mut s = ModelState::init_with_dims(2, 3, &hp);
        let before = s.clone();
        let mut opt = OptimizerState::new(&s);
        let zero = Gradients { user: DenseMatrix::zeros(2, 2), item: DenseMatrix::zeros(3, 2) };
        adam_step(&mut s, &mut opt, &zero, 0.1).unwrap();
        assert_eq!(opt.step, 1);
        assert_eq!(s.user_emb, before.user_emb);
        let bad = Gradients { user: DenseMatrix::zeros(1, 2), item: DenseMatrix::zeros(3, 2) };
        assert!(adam_step(&mut s, &mut opt, &bad, 0.1).is_err());
    }

    #[test]
    fn adam_descends_quadratic_bowl() {
        // f(x) = Σ c_i x_i², gradient 2 c_i x_i.
        let c = [1.0, 10.0, 0.1];
        let f = |x: &[f64]| x.iter().zip(&c).map(|(x, c)| c * x * x).sum::<f64>();
        let mut x = vec![1.0, -1.0, 2.0];
        let (mut m, mut v) = (vec![0.0; 3], vec![0.0; 3]);
        let mut prev = f(&x);
        for step in 1..=50u64 {
            let g: Vec<f64> = x.iter().zip(&c).map(|(x, c)| 2.0 * c * x).collect();
            adam_update(&mut x, &g, &mut m, &mut v, AdamConsts { beta1: 0.9, beta2: 0.999, eps: 1e-8, step, lr: 0.01 });
            let now = f(&x);
            if step > 5 {
                assert!(now < prev, "step {step}: {now} >= {prev}");
            }
            prev = now;
        }
    }

    #[test]
    fn backward_rejects_eval_trace() {
        let hp = HyperParams { embed_dim: 2, layers: 1, lambda1: 0.0, ..HyperParams::default() };
        let s = ModelState::init_with_dims(2, 2, &hp);
        let a = CsrMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (1, 1, 1.0)]).unwrap();
        let mut rng = SplitMix64::seed_from(0);
        let tr = forward(&s, &a, None, &hp, Mode::Eval, &mut rng).unwrap();
        let err = backward(&tr, &one_pair_batch(), &s, None, &hp).unwrap_err();
        assert!(matches!(err, ObjectiveError::Contract(_)));
    }

    #[test]
    fn cl_scope_parses() {
        assert_eq!("in-batch".parse::<ClScope>().unwrap(), ClScope::InBatch);
        assert_eq!("full-population".parse::<ClScope>().unwrap(), ClScope::FullPopulation);
        assert!("all".parse::<ClScope>().is_err());
    }
}
