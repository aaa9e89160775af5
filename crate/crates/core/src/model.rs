//! Embedding tables and the two-branch forward pass.
//!
//! The main branch is a residual, LeakyReLU-activated GCN over the
//! edge-dropped normalized adjacency. The SVD branch applies the rank-`r`
//! reconstruction to the same per-layer inputs and is read only by the
//! contrastive loss.

use crate::data::InteractionDataset;
use crate::linalg::{CsrMatrix, DenseMatrix, LinalgError, Side, SvdFactors};
use crate::objective::ClScope;
use crate::rng::SplitMix64;

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("index {index} out of range for {len} {what}")]
    IndexOutOfRange { what: &'static str, index: usize, len: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    pub embed_dim: usize,
    pub layers: usize,
    pub svd_rank: usize,
    pub dropout: f64,
    pub temperature: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub cl_scope: ClScope,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            layers: 2,
            svd_rank: 5,
            dropout: 0.4,
            temperature: 0.2,
            lambda1: 0.2,
            lambda2: 1e-5,
            learning_rate: 1e-3,
            batch_size: 192,
            epochs: 300,
            seed: 42,
            cl_scope: ClScope::InBatch,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidArgument(m.to_string()));
        if !(self.temperature > 0.0) {
            return bad("temperature must be > 0");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if self.svd_rank == 0 {
            return bad("svd_rank must be >= 1");
        }
        if self.layers == 0 {
            return bad("layers must be >= 1");
        }
        if self.embed_dim == 0 || self.batch_size == 0 {
            return bad("embed_dim and batch_size must be >= 1");
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || !(self.learning_rate > 0.0) {
            return bad("lambda1, lambda2 must be >= 0 and learning_rate > 0");
        }
        Ok(())
    }
}

/// Learnable embeddings plus the training random stream.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub user_emb: DenseMatrix,
    pub item_emb: DenseMatrix,
    pub layers: usize,
    pub rng: SplitMix64,
}

impl ModelState {
    /// Uniform initialization in `±sqrt(3/k)` (Xavier bound with fan-in `k`).
    pub fn init(ds: &InteractionDataset, hp: &HyperParams) -> Self {
        Self::init_with_dims(ds.num_users(), ds.num_items(), hp)
    }

    pub fn init_with_dims(num_users: usize, num_items: usize, hp: &HyperParams) -> Self {
        let root = SplitMix64::seed_from(hp.seed);
        let mut init_rng = root.fork(1);
        let k = hp.embed_dim;
        let bound = (3.0 / k as f64).sqrt();
        let mut draw = |_, _| bound * (2.0 * init_rng.next_f64() - 1.0);
        let user_emb = DenseMatrix::from_fn(num_users, k, &mut draw);
        let item_emb = DenseMatrix::from_fn(num_items, k, &mut draw);
        Self { user_emb, item_emb, layers: hp.layers, rng: root.fork(2) }
    }

    pub fn embed_dim(&self) -> usize {
        self.user_emb.cols()
    }

    pub fn num_users(&self) -> usize {
        self.user_emb.rows()
    }

    pub fn num_items(&self) -> usize {
        self.item_emb.rows()
    }

    pub fn is_finite(&self) -> bool {
        self.user_emb.is_finite() && self.item_emb.is_finite()
    }
}

#[inline]
pub fn leaky_relu(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

/// Derivative of [`leaky_relu`]; 1 at zero.
#[inline]
pub fn leaky_relu_grad(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

fn activate(pre: &DenseMatrix) -> DenseMatrix {
    let mut out = pre.clone();
    out.as_mut_slice().iter_mut().for_each(|x| *x = leaky_relu(*x));
    out
}

/// Inverted edge dropout: each stored entry survives with probability
/// `1 - p` and survivors are scaled by `1 / (1 - p)`.
pub fn edge_dropout(a: &CsrMatrix, p: f64, rng: &mut SplitMix64) -> Result<(CsrMatrix, Vec<bool>), ModelError> {
    if !(0.0..1.0).contains(&p) {
        return Err(ModelError::InvalidArgument(format!("dropout probability {p} not in [0, 1)")));
    }
    if p == 0.0 {
        return Ok((a.clone(), vec![true; a.nnz()]));
    }
    let mask: Vec<bool> = (0..a.nnz()).map(|_| rng.next_f64() >= p).collect();
    Ok((a.filter_scaled(&mask, 1.0 / (1.0 - p)), mask))
}

/// Applies a recorded mask; `p` must match the one used to draw it.
pub fn apply_dropout_mask(a: &CsrMatrix, mask: &[bool], p: f64) -> Result<CsrMatrix, ModelError> {
    if mask.len() != a.nnz() {
        return Err(ModelError::InvalidArgument(format!(
            "mask has {} entries, matrix has {}",
            mask.len(),
            a.nnz()
        )));
    }
    Ok(a.filter_scaled(mask, 1.0 / (1.0 - p)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Everything the backward pass needs from one forward evaluation.
///
/// Per-layer vectors are indexed `t - 1` for layers `t = 1..=T`, except
/// `h_user`/`h_item` which hold `t = 0..=T`.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub mode: Mode,
    /// Edge-dropped normalized adjacency used at each layer (train mode only).
    pub graphs: Vec<CsrMatrix>,
    pub dropout_masks: Vec<Vec<bool>>,
    pub user_pre: Vec<DenseMatrix>,
    pub item_pre: Vec<DenseMatrix>,
    pub z_user: Vec<DenseMatrix>,
    pub z_item: Vec<DenseMatrix>,
    /// Pre-activations and outputs of the SVD branch; empty when the branch is off.
    pub svd_user_pre: Vec<DenseMatrix>,
    pub svd_item_pre: Vec<DenseMatrix>,
    pub g_user: Vec<DenseMatrix>,
    pub g_item: Vec<DenseMatrix>,
    pub h_user: Vec<DenseMatrix>,
    pub h_item: Vec<DenseMatrix>,
    pub final_user: DenseMatrix,
    pub final_item: DenseMatrix,
}

impl ForwardTrace {
    pub fn layers(&self) -> usize {
        self.z_user.len()
    }

    pub fn has_svd_branch(&self) -> bool {
        !self.g_user.is_empty()
    }
}

/// Forward pass. In train mode a fresh dropout mask is drawn per layer
/// from `rng` and shared by both propagation directions; eval mode uses the
/// undropped graph and draws nothing. `svd = None` skips the SVD branch.
pub fn forward(
    state: &ModelState,
    a_norm: &CsrMatrix,
    svd: Option<&SvdFactors>,
    hp: &HyperParams,
    mode: Mode,
    rng: &mut SplitMix64,
) -> Result<ForwardTrace, ModelError> {
    let mut graphs = Vec::new();
    let mut masks = Vec::new();
    if mode == Mode::Train {
        for _ in 0..state.layers {
            let (g, m) = edge_dropout(a_norm, hp.dropout, rng)?;
            graphs.push(g);
            masks.push(m);
        }
    }
    forward_with_graphs(state, a_norm, svd, mode, graphs, masks)
}

/// Train-mode forward pass replaying previously recorded dropout masks.
pub fn forward_with_masks(
    state: &ModelState,
    a_norm: &CsrMatrix,
    svd: Option<&SvdFactors>,
    dropout: f64,
    masks: &[Vec<bool>],
) -> Result<ForwardTrace, ModelError> {
    if masks.len() != state.layers {
        return Err(ModelError::InvalidArgument(format!(
            "{} masks for {} layers",
            masks.len(),
            state.layers
        )));
    }
    let graphs = masks
        .iter()
        .map(|m| apply_dropout_mask(a_norm, m, dropout))
        .collect::<Result<Vec<_>, _>>()?;
    forward_with_graphs(state, a_norm, svd, Mode::Train, graphs, masks.to_vec())
}

fn forward_with_graphs(
    state: &ModelState,
    a_norm: &CsrMatrix,
    svd: Option<&SvdFactors>,
    mode: Mode,
    graphs: Vec<CsrMatrix>,
    dropout_masks: Vec<Vec<bool>>,
) -> Result<ForwardTrace, ModelError> {
    let (m, n) = (state.num_users(), state.num_items());
    if a_norm.rows() != m || a_norm.cols() != n {
        return Err(LinalgError::DimensionMismatch {
            op: "forward",
            left: (a_norm.rows(), a_norm.cols()),
            right: (m, n),
        }
        .into());
    }
    if let Some(f) = svd {
        if f.u.rows() != m || f.v.rows() != n {
            return Err(LinalgError::DimensionMismatch { op: "forward/svd", left: (f.u.rows(), f.v.rows()), right: (m, n) }.into());
        }
    }

    let layers = state.layers;
    let mut trace = ForwardTrace {
        mode,
        graphs,
        dropout_masks,
        user_pre: Vec::with_capacity(layers),
        item_pre: Vec::with_capacity(layers),
        z_user: Vec::with_capacity(layers),
        z_item: Vec::with_capacity(layers),
        svd_user_pre: Vec::new(),
        svd_item_pre: Vec::new(),
        g_user: Vec::new(),
        g_item: Vec::new(),
        h_user: vec![state.user_emb.clone()],
        h_item: vec![state.item_emb.clone()],
        final_user: state.user_emb.clone(),
        final_item: state.item_emb.clone(),
    };

    for t in 0..layers {
        let graph = trace.graphs.get(t).unwrap_or(a_norm);
        let (hu_prev, hi_prev) = (&trace.h_user[t], &trace.h_item[t]);

        let user_pre = graph.spmm(hi_prev)?;
        let item_pre = graph.spmm_t(hu_prev)?;
        let z_user = activate(&user_pre);
        let z_item = activate(&item_pre);

        if let Some(f) = svd {
            let su = f.propagate(hi_prev, Side::User)?;
            let si = f.propagate(hu_prev, Side::Item)?;
            trace.g_user.push(activate(&su));
            trace.g_item.push(activate(&si));
            trace.svd_user_pre.push(su);
            trace.svd_item_pre.push(si);
        }

        let mut hu = z_user.clone();
        hu.add_assign(hu_prev)?;
        let mut hi = z_item.clone();
        hi.add_assign(hi_prev)?;
        trace.final_user.add_assign(&hu)?;
        trace.final_item.add_assign(&hi)?;

        trace.user_pre.push(user_pre);
        trace.item_pre.push(item_pre);
        trace.z_user.push(z_user);
        trace.z_item.push(z_item);
        trace.h_user.push(hu);
        trace.h_item.push(hi);
    }
    Ok(trace)
}

/// `scores[p, q] = final_user[users[p]] · final_item[q]`.
pub fn predict_scores(trace: &ForwardTrace, users: &[usize]) -> Result<DenseMatrix, ModelError> {
    let m = trace.final_user.rows();
    let n = trace.final_item.rows();
    let mut out = DenseMatrix::zeros(users.len(), n);
    for (row, &u) in users.iter().enumerate() {
        if u >= m {
            return Err(ModelError::IndexOutOfRange { what: "users", index: u, len: m });
        }
        let eu = trace.final_user.row(u);
        let dst = out.row_mut(row);
        for (q, d) in dst.iter_mut().enumerate() {
            *d = crate::linalg::dot(eu, trace.final_item.row(q));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{approx_svd, ApproxSvdParams};

    fn tiny_graph() -> CsrMatrix {
        // 3 users x 4 items
        let a = CsrMatrix::from_triplets(
            3,
            4,
            &[(0, 0, 1.0), (0, 1, 1.0), (1, 1, 1.0), (1, 2, 1.0), (2, 3, 1.0), (2, 0, 1.0)],
        )
        .unwrap();
        crate::data::normalize_adjacency(&a).unwrap()
    }

    fn hp(k: usize) -> HyperParams {
        HyperParams { embed_dim: k, layers: 2, svd_rank: 2, ..HyperParams::default() }
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let h = HyperParams { embed_dim: 4, ..hp(4) };
        let a = ModelState::init_with_dims(5, 3, &h);
        let b = ModelState::init_with_dims(5, 3, &h);
        assert_eq!(a, b);
        assert_eq!(a.user_emb.shape(), (5, 4));
        let bound = (3.0f64 / 4.0).sqrt();
        assert!(a.user_emb.as_slice().iter().all(|x| x.abs() <= bound));
    }

    #[test]
    fn init_variance_is_one_over_k() {
        let k = 8;
        let h = HyperParams { embed_dim: k, ..hp(k) };
        let s = ModelState::init_with_dims(12_500, 1, &h);
        let xs = s.user_emb.as_slice();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!((var * k as f64 - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn leaky_relu_values() {
        assert_eq!(leaky_relu(3.0), 3.0);
        assert!((leaky_relu(-1.0) + 0.2).abs() < 1e-15);
        assert_eq!(leaky_relu(0.0), 0.0);
        assert_eq!(leaky_relu_grad(0.0), 1.0);
        assert_eq!(leaky_relu_grad(-2.0), 0.2);
    }

    #[test]
    fn dropout_zero_is_identity() {
        let a = tiny_graph();
        let mut rng = SplitMix64::seed_from(1);
        let (d, mask) = edge_dropout(&a, 0.0, &mut rng).unwrap();
        assert_eq!(d, a);
        assert!(mask.iter().all(|&m| m));
        assert!(edge_dropout(&a, 1.0, &mut rng).is_err());
    }

    #[test]
    fn dropout_retention_count_and_scaling() {
        let t: Vec<(usize, usize, f64)> = (0..10_000).map(|i| (i / 100, i % 100, std::f64::consts::FRAC_1_SQRT_2)).collect();
        let a = CsrMatrix::from_triplets(100, 100, &t).unwrap();
        let mut rng = SplitMix64::seed_from(3);
        let (d, mask) = edge_dropout(&a, 0.5, &mut rng).unwrap();
        let kept = mask.iter().filter(|&&m| m).count();
        assert_eq!(kept, d.nnz());
        assert!((kept as f64 - 5000.0).abs() <= 200.0, "kept {kept}");
        assert!(d.values().iter().all(|&v| (v - 2f64.sqrt()).abs() < 1e-12));
    }

    #[test]
    fn zero_embeddings_stay_zero() {
        let a = tiny_graph();
        let mut s = ModelState::init_with_dims(3, 4, &hp(2));
        s.user_emb = DenseMatrix::zeros(3, 2);
        s.item_emb = DenseMatrix::zeros(4, 2);
        let svd = approx_svd(&a, &ApproxSvdParams { rank: 2, oversample: 1, power_iters: 2, seed: 0 }).unwrap();
        let mut rng = SplitMix64::seed_from(0);
        let tr = forward(&s, &a, Some(&svd), &hp(2), Mode::Train, &mut rng).unwrap();
        for m in tr.z_user.iter().chain(&tr.g_user).chain(&tr.g_item).chain([&tr.final_user, &tr.final_item]) {
            assert!(m.as_slice().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn empty_graph_gives_residual_identity() {
        let a = CsrMatrix::empty(3, 4);
        let s = ModelState::init_with_dims(3, 4, &hp(3));
        let mut rng = SplitMix64::seed_from(0);
        let tr = forward(&s, &a, None, &hp(3), Mode::Eval, &mut rng).unwrap();
        for t in 0..=2 {
            assert_eq!(tr.h_user[t], s.user_emb);
        }
        let mut want = s.user_emb.clone();
        want.scale(3.0);
        assert!(tr.final_user.max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let a = tiny_graph();
        let s = ModelState::init_with_dims(3, 4, &hp(2));
        let mut r1 = SplitMix64::seed_from(1);
        let mut r2 = SplitMix64::seed_from(2);
        let x = forward(&s, &a, None, &hp(2), Mode::Eval, &mut r1).unwrap();
        let y = forward(&s, &a, None, &hp(2), Mode::Eval, &mut r2).unwrap();
        assert_eq!(x.final_user, y.final_user);
        assert_eq!(r1, SplitMix64::seed_from(1));
    }

    #[test]
    fn svd_branch_does_not_touch_main_branch() {
        let a = tiny_graph();
        let s = ModelState::init_with_dims(3, 4, &hp(2));
        let svd = approx_svd(&a, &ApproxSvdParams { rank: 2, oversample: 1, power_iters: 2, seed: 0 }).unwrap();
        let mut other = svd.clone();
        other.s.iter_mut().for_each(|x| *x *= -3.0);
        let mut r = SplitMix64::seed_from(0);
        let x = forward(&s, &a, Some(&svd), &hp(2), Mode::Eval, &mut r).unwrap();
        let y = forward(&s, &a, Some(&other), &hp(2), Mode::Eval, &mut r).unwrap();
        let z = forward(&s, &a, None, &hp(2), Mode::Eval, &mut r).unwrap();
        assert_ne!(x.g_user, y.g_user);
        for tr in [&y, &z] {
            assert_eq!(tr.z_user, x.z_user);
            assert_eq!(tr.h_item, x.h_item);
            assert_eq!(tr.final_item, x.final_item);
        }
    }

    #[test]
    fn replayed_masks_reproduce_train_forward() {
        let a = tiny_graph();
        let h = HyperParams { dropout: 0.4, ..hp(2) };
        let s = ModelState::init_with_dims(3, 4, &h);
        let mut rng = SplitMix64::seed_from(5);
        let x = forward(&s, &a, None, &h, Mode::Train, &mut rng).unwrap();
        let y = forward_with_masks(&s, &a, None, h.dropout, &x.dropout_masks).unwrap();
        assert_eq!(x.final_user, y.final_user);
    }

    #[test]
    fn scores_are_dot_products() {
        let a = CsrMatrix::empty(1, 4);
        let mut s = ModelState::init_with_dims(1, 4, &HyperParams { embed_dim: 2, layers: 1, ..hp(2) });
        s.user_emb = DenseMatrix::from_rows(&[vec![0.5, 1.0]]);
        s.item_emb.row_mut(3).copy_from_slice(&[1.5, -0.5]);
        s.item_emb.row_mut(0).copy_from_slice(&[-2.0, 1.0]);
        let mut r = SplitMix64::seed_from(0);
        let tr = forward(&s, &a, None, &hp(2), Mode::Eval, &mut r).unwrap();
        // final = 2 * embedding with one layer on an empty graph
        let sc = predict_scores(&tr, &[0]).unwrap();
        assert!((sc[(0, 3)] - 4.0 * 0.25).abs() < 1e-15);
        assert!(sc[(0, 0)].abs() < 1e-15);
        assert!(predict_scores(&tr, &[1]).is_err());
    }
}
