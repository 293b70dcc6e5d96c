//! Training loop, evaluation on a pair set and the whole-model gradient check.

use std::io::Write;
use std::path::Path;

use crate::config::RunConfig;
use crate::cotuplet::{epoch_batches, total_loss, LossConfig, LossKind};
use crate::dataset::TensorCache;
use crate::error::{Error, Result};
use crate::mgrnet::{embed_images, forward_graph, init_params, stack_images, update_bn_stats, EmbeddingSet, NetConfig};
use crate::ndgrad::{grad_check, BnMode, GradCheckOptions, GradCheckReport, Graph, ParameterStore, Tensor};
use crate::seeds::stream;
use crate::verifier::{evaluate, final_embedding, make_test_pairs, PairSet, VerificationReport};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// One based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_eer: f64,
}

pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation EER (the initialization
    /// if no epoch improved on it).
    pub best: ParameterStore,
    /// 0 when the initialization was never beaten.
    pub best_epoch: usize,
    pub best_val_eer: f64,
    pub initial_val_eer: f64,
    pub log: Vec<EpochRecord>,
    pub stopped_early: bool,
}

pub struct Evaluation {
    pub report: VerificationReport,
    /// `(squared distance, is_positive)` per pair, in pair order.
    pub scores: Vec<(f64, bool)>,
    pub embeddings: Vec<EmbeddingSet>,
}

/// Verification pairs over the identities of `cache`, drawn from the `label` stream.
pub fn pairs_for(cache: &TensorCache, seed: u64, label: &str) -> Result<PairSet> {
    make_test_pairs(&cache.manifest().pools(), &mut stream(seed, label))
}

/// Eval-mode embeddings of every cached image, then pair distances and metrics.
pub fn evaluate_pairs(store: &ParameterStore, net: &NetConfig, cache: &TensorCache, pairs: &PairSet, chunk: usize) -> Result<Evaluation> {
    let images: Vec<&Tensor> = cache.images.iter().collect();
    let embeddings = embed_images(store, net, &images, chunk)?;
    let finals = embeddings.iter().map(final_embedding).collect::<Result<Vec<_>>>()?;
    let scores = pairs
        .pairs
        .iter()
        .map(|p| Ok((crate::ndgrad::sq_euclidean(&finals[p.reference], &finals[p.questioned])?, p.positive)))
        .collect::<Result<Vec<_>>>()?;
    let report = evaluate(&scores)?;
    Ok(Evaluation { report, scores, embeddings })
}

/// Forward, loss and backward over one batch. Gradients are accumulated into
/// `store` and batch-norm running statistics updated; returns the loss value.
pub fn train_step(store: &mut ParameterStore, net: &NetConfig, loss: &LossConfig, kind: LossKind, images: &[&Tensor]) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(stack_images(images)?);
    let fp = forward_graph(&mut g, store, net, x, BnMode::Train)?;
    let l = total_loss(&mut g, &fp.branches(), loss, kind)?;
    let value = g.value(l).data()[0];
    if !value.is_finite() {
        return Ok(value);
    }
    let grads = g.backward(l)?;
    store.accumulate(&grads)?;
    update_bn_stats(store, &fp.bn)?;
    Ok(value)
}

/// Trains from the seeded initialization with early stopping on validation EER.
/// `on_epoch` sees each record as it is produced.
pub fn train(cfg: &RunConfig, train_set: &TensorCache, val_set: &TensorCache, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut store = init_params(&cfg.net, &mut stream(cfg.seed, "init"))?;
    let mut batch_rng = stream(cfg.seed, "batch");
    let pools = train_set.manifest().pools();
    let val_pairs = pairs_for(val_set, cfg.seed, "val-pairs")?;

    let initial_val_eer = evaluate_pairs(&store, &cfg.net, val_set, &val_pairs, cfg.eval_chunk)?.report.eer;
    let (mut best, mut best_epoch, mut best_val_eer) = (store.clone(), 0, initial_val_eer);
    let mut log = Vec::new();
    let mut since_best = 0;
    let mut stopped_early = false;

    for epoch in 0..cfg.epochs {
        let mut batches = epoch_batches(&pools, &cfg.loss, &mut batch_rng)?;
        if cfg.batches_per_epoch > 0 {
            batches.truncate(cfg.batches_per_epoch);
        }
        let mut total = 0.0;
        for (step, batch) in batches.iter().enumerate() {
            let images: Vec<&Tensor> = batch.images().into_iter().map(|i| &train_set.images[i]).collect();
            store.zero_grad();
            let value = train_step(&mut store, &cfg.net, &cfg.loss, cfg.loss_kind, &images)?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch: epoch + 1, step: step + 1, value });
            }
            store.adam_update(&cfg.adam, epoch)?;
            total += value;
        }
        let val_eer = evaluate_pairs(&store, &cfg.net, val_set, &val_pairs, cfg.eval_chunk)?.report.eer;
        let rec = EpochRecord { epoch: epoch + 1, train_loss: total / batches.len() as f64, val_eer };
        on_epoch(&rec);
        log.push(rec);
        if val_eer < best_val_eer {
            (best, best_epoch, best_val_eer) = (store.clone(), epoch + 1, val_eer);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainOutcome { best, best_epoch, best_val_eer, initial_val_eer, log, stopped_early })
}

pub fn write_log(log: &[EpochRecord], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from("epoch,train_loss,val_eer\n");
    for r in log {
        text.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, r.val_eer));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Finite-difference check of the total loss through the whole network in train
/// mode, on a fixed input batch.
pub fn model_grad_check(
    store: &ParameterStore,
    net: &NetConfig,
    loss: &LossConfig,
    kind: LossKind,
    batch: &Tensor,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    grad_check(store, opts, |g, s| {
        let x = g.constant(batch.clone());
        let fp = forward_graph(g, s, net, x, BnMode::Train)?;
        total_loss(g, &fp.branches(), loss, kind)
    })
}
