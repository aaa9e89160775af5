use std::path::{Path, PathBuf};
use std::time::Instant;

use super::{Checkpoint, HarnessError, RunConfig, RunLog};
use crate::data::{build_adjacency, load_interactions, normalize_adjacency, HoldoutOptions, InteractionDataset, Split};
use crate::eval::{evaluate, EvalResult, PopularityBaseline};
use crate::linalg::{approx_svd, approx_svd_calls, ApproxSvdParams, CsrMatrix, SvdFactors};
use crate::model::{forward, ModelState, Mode};
use crate::objective::{adam_step, backward, BatchSampler, LossReport, OptimizerState};
use crate::rng::SplitMix64;

/// Reads the configured split files.
pub fn load_dataset(cfg: &RunConfig) -> Result<InteractionDataset, HarnessError> {
    let train = cfg.train_path.as_deref().ok_or_else(|| HarnessError::Config("missing `train` path".into()))?;
    let test = cfg.test_path.as_deref().ok_or_else(|| HarnessError::Config("missing `test` path".into()))?;
    let holdout = HoldoutOptions { val_fraction: cfg.val_fraction, seed: cfg.hp.seed };
    Ok(load_interactions(train, cfg.val_path.as_deref(), test, holdout)?)
}

/// Normalized adjacency and its one-time truncated SVD.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub a_norm: CsrMatrix,
    pub svd: SvdFactors,
}

/// Builds Ã and factorizes it once.
///
/// The oversampling is reduced when the sketch would otherwise be wider
/// than the smaller dimension of Ã.
pub fn prepare(ds: &InteractionDataset, cfg: &RunConfig) -> Result<Prepared, HarnessError> {
    let a_norm = normalize_adjacency(&build_adjacency(ds))?;
    let r = cfg.hp.svd_rank;
    let min_dim = ds.num_users().min(ds.num_items());
    if r > min_dim {
        return Err(HarnessError::Config(format!("svd_rank {r} exceeds min(M, N) = {min_dim}")));
    }
    let params = ApproxSvdParams {
        rank: r,
        oversample: cfg.svd_oversample.min(min_dim - r),
        power_iters: cfg.svd_power_iters,
        seed: SplitMix64::seed_from(cfg.hp.seed).fork(3).state(),
    };
    let svd = approx_svd(&a_norm, &params)?;
    Ok(Prepared { a_norm, svd })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Selected model: best validation recall, or the last epoch.
    pub state: ModelState,
    pub optimizer: OptimizerState,
    /// Epoch of the selected model; 0 means the initialization.
    pub best_epoch: usize,
    pub epochs_run: usize,
    /// Batch-mean loss per epoch.
    pub epoch_losses: Vec<LossReport>,
    /// Wall time of the training steps per epoch, evaluation excluded.
    pub epoch_seconds: Vec<f64>,
    pub validation: Vec<(usize, EvalResult)>,
    pub test: EvalResult,
    pub popularity: EvalResult,
    pub singular_values: Vec<f64>,
    /// Randomized SVD calls made during the run.
    pub svd_calls: usize,
    pub checkpoint: Option<PathBuf>,
}

fn mean_report(sum: &LossReport, steps: usize) -> LossReport {
    let d = steps.max(1) as f64;
    LossReport {
        total: sum.total / d,
        rec_loss: sum.rec_loss / d,
        cl_loss_user: sum.cl_loss_user / d,
        cl_loss_item: sum.cl_loss_item / d,
        reg_loss: sum.reg_loss / d,
    }
}

fn epoch_line(epoch: usize, r: &LossReport) -> String {
    format!(
        "epoch={epoch} rec={:.8} cl_u={:.8} cl_i={:.8} reg={:.8} total={:.8}",
        r.rec_loss, r.cl_loss_user, r.cl_loss_item, r.reg_loss, r.total
    )
}

fn save_checkpoint(
    dir: Option<&Path>,
    state: &ModelState,
    opt: &OptimizerState,
    cfg: &RunConfig,
) -> Result<Option<PathBuf>, HarnessError> {
    let Some(dir) = dir else { return Ok(None) };
    let path = dir.join("best.ckpt");
    let ck = Checkpoint {
        state: state.clone(),
        optimizer: opt.clone(),
        svd_rank: cfg.hp.svd_rank,
        config_digest: cfg.digest(),
    };
    ck.save(&path)?;
    Ok(Some(path))
}

/// Full training run on an already loaded dataset.
///
/// One randomized SVD of Ã, then `epochs` passes of ⌈nnz / batch_size⌉
/// Adam steps. With a validation split the model with the best validation
/// recall (at 20, or the first cutoff; ties broken by NDCG) is kept and training stops after
/// `patience` evaluations without improvement; without one the last epoch
/// wins. `epochs = 0` evaluates the initialization and writes no checkpoint.
pub fn train(ds: &InteractionDataset, cfg: &RunConfig, log: &mut RunLog) -> Result<TrainOutcome, HarnessError> {
    let hp = &cfg.hp;
    hp.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
    log.line(ds.summary_line());
    log.line(format!("config digest={}", cfg.digest()));

    let calls_before = approx_svd_calls();
    let prep = prepare(ds, cfg)?;
    log.line(format!("svd {}", prep.svd.singular_values_line()));
    let use_svd = hp.lambda1 > 0.0;
    let svd = use_svd.then_some(&prep.svd);

    let mut state = ModelState::init(ds, hp);
    let mut opt = OptimizerState::new(&state);
    let sampler = BatchSampler::new(ds)?;
    let steps = sampler.num_pairs().div_ceil(hp.batch_size);
    let has_val = !ds.validation().is_empty();
    let sel_k = cfg.selection_k();
    let ks = {
        let mut ks = cfg.eval_ks.clone();
        if !ks.contains(&sel_k) {
            ks.push(sel_k);
        }
        ks
    };

    let mut best: Option<((f64, f64), usize, ModelState, OptimizerState)> = None;
    let mut since_best = 0usize;
    let mut epoch_losses = Vec::new();
    let mut epoch_seconds = Vec::new();
    let mut validation = Vec::new();
    let mut epochs_run = 0;

    for epoch in 1..=hp.epochs {
        let started = Instant::now();
        let mut rng = state.rng.clone();
        let mut sum = LossReport::default();
        for step in 0..steps {
            let batch = sampler.sample(hp.batch_size, &mut rng)?;
            let trace = forward(&state, &prep.a_norm, svd, hp, Mode::Train, &mut rng)?;
            let (report, grads) = backward(&trace, &batch, &state, svd, hp)?;
            if !report.is_finite() {
                return Err(HarnessError::Numerical(format!(
                    "non-finite loss at epoch {epoch} step {step}; last finite epoch {}",
                    epoch - 1
                )));
            }
            adam_step(&mut state, &mut opt, &grads, hp.learning_rate)?;
            sum.total += report.total;
            sum.rec_loss += report.rec_loss;
            sum.cl_loss_user += report.cl_loss_user;
            sum.cl_loss_item += report.cl_loss_item;
            sum.reg_loss += report.reg_loss;
        }
        state.rng = rng;
        epoch_seconds.push(started.elapsed().as_secs_f64());
        if !state.is_finite() {
            return Err(HarnessError::Numerical(format!(
                "non-finite parameters after epoch {epoch}; last finite epoch {}",
                epoch - 1
            )));
        }
        let mean = mean_report(&sum, steps);
        log.line(epoch_line(epoch, &mean));
        epoch_losses.push(mean);
        epochs_run = epoch;

        if has_val && epoch % cfg.eval_every == 0 {
            let res = evaluate(&state, &prep.a_norm, ds, Split::Validation, &ks)?;
            log.line(res.log_line(epoch));
            // Recall saturates on easy data; NDCG at the same cutoff breaks ties.
            let score = (res.recall_at(sel_k).unwrap_or(0.0), res.ndcg_at(sel_k).unwrap_or(0.0));
            validation.push((epoch, res));
            if best.as_ref().is_none_or(|b| score > b.0) {
                best = Some((score, epoch, state.clone(), opt.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if cfg.patience > 0 && since_best >= cfg.patience {
                    log.line(format!("early stop epoch={epoch} best_epoch={}", best.as_ref().unwrap().1));
                    break;
                }
            }
        }
    }

    let (state, optimizer, best_epoch) = match best {
        Some((_, e, s, o)) => (s, o, e),
        None => (state, opt, epochs_run),
    };
    let checkpoint = if epochs_run > 0 {
        save_checkpoint(cfg.checkpoint_dir.as_deref(), &state, &optimizer, cfg)?
    } else {
        None
    };
    if let Some(p) = &checkpoint {
        log.line(format!("checkpoint {}", p.display()));
    }

    let test = evaluate(&state, &prep.a_norm, ds, Split::Test, &cfg.eval_ks)?;
    log.line(format!("test best_epoch={best_epoch} {}", test.metrics_line()));
    let popularity = PopularityBaseline::new(ds).evaluate(ds, Split::Test, &cfg.eval_ks)?;
    log.line(format!("popularity {}", popularity.metrics_line()));

    Ok(TrainOutcome {
        state,
        optimizer,
        best_epoch,
        epochs_run,
        epoch_losses,
        epoch_seconds,
        validation,
        test,
        popularity,
        singular_values: prep.svd.s.clone(),
        svd_calls: approx_svd_calls() - calls_before,
        checkpoint,
    })
}

/// Loads a checkpoint, checks it against the dataset, and evaluates the
/// test split.
pub fn evaluate_checkpoint(ds: &InteractionDataset, cfg: &RunConfig, path: &Path) -> Result<EvalResult, HarnessError> {
    let ck = Checkpoint::load(path)?;
    ck.check_compatible(ds.num_users(), ds.num_items(), &cfg.hp)?;
    if ck.config_digest != cfg.digest() {
        log::info!("checkpoint was written under a different config digest");
    }
    let a_norm = normalize_adjacency(&build_adjacency(ds))?;
    Ok(evaluate(&ck.state, &a_norm, ds, Split::Test, &cfg.eval_ks)?)
}
