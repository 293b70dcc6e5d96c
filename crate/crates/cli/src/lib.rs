//! Command implementations behind the `sigverify` binary.
//!
//! Layout of a data directory: `manifest.csv`, `images/`, the writer-disjoint
//! split manifests `train.csv`, `val.csv`, `test.csv`, and `cache.bin` once
//! preprocessed. A run directory holds `config.conf`, `train_log.csv`,
//! `train_summary.csv`, `checkpoint.bin` and the evaluation outputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use sha2::{Digest, Sha256};

use sigverify::config::RunConfig;
use sigverify::cotuplet::{build_batch, IdentityPool};
use sigverify::dataset::{Label, Manifest, TensorCache};
use sigverify::imageprep::preprocess;
use sigverify::mgrnet::{init_params, stack_images};
use sigverify::ndgrad::{checkpoint, Fault, GradCheckOptions, GradCheckReport, Tensor};
use sigverify::seeds::stream;
use sigverify::sigsynth::{generate_dataset, render_identity, split_writers, SynthConfig};
use sigverify::train::{evaluate_pairs, model_grad_check, pairs_for, train, write_log, EpochRecord, Evaluation};
use sigverify::verifier::VerificationReport;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

fn split_path(data_dir: &Path, split: &str) -> PathBuf {
    data_dir.join(format!("{split}.csv"))
}

pub fn cache_path(data_dir: &Path) -> PathBuf {
    data_dir.join("cache.bin")
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Renders the synthetic corpus into `data_dir` and writes the identity splits.
pub fn cmd_synth(cfg: &RunConfig, data_dir: &Path) -> Result<Manifest> {
    create_dir(data_dir)?;
    let manifest = generate_dataset(&cfg.synth_config(), data_dir)?;
    let splits = split_writers(&manifest, cfg.split, &mut stream(cfg.seed, "split"))?;
    for (name, m) in SPLITS.iter().zip([&splits.train, &splits.val, &splits.test]) {
        m.write(&split_path(data_dir, name))?;
    }
    Ok(manifest)
}

/// Preprocesses every manifest image into `cache.bin`; returns the cache and the
/// hex SHA-256 of the file.
pub fn cmd_preprocess(cfg: &RunConfig, data_dir: &Path) -> Result<(TensorCache, String)> {
    let manifest = Manifest::read(&data_dir.join("manifest.csv"))?;
    let cache = TensorCache::build(&manifest, data_dir, &cfg.prep())?;
    let path = cache_path(data_dir);
    cache.save(&path)?;
    Ok((cache, file_digest(&path)?))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// The cached rows belonging to one split.
pub fn load_split(cfg: &RunConfig, data_dir: &Path, split: &str) -> Result<TensorCache> {
    let path = cache_path(data_dir);
    if !path.exists() {
        bail!("{} not found; run `sigverify preprocess` first", path.display());
    }
    let cache = TensorCache::load(&path)?;
    if (cache.height, cache.width) != (cfg.net.input_height, cfg.net.input_width) {
        bail!(
            "{} holds {}x{} images but the network expects {}x{}; rerun preprocess",
            path.display(),
            cache.height,
            cache.width,
            cfg.net.input_height,
            cfg.net.input_width
        );
    }
    let ids = Manifest::read(&split_path(data_dir, split))?.identities();
    let sub = cache.subset(&ids);
    if sub.rows.is_empty() {
        bail!("split `{split}` has no cached images");
    }
    Ok(sub)
}

pub struct TrainRun {
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_eer: f64,
    pub initial_val_eer: f64,
    pub stopped_early: bool,
}

/// Trains on the train split with early stopping on the val split.
pub fn cmd_train(cfg: &RunConfig, data_dir: &Path, out_dir: &Path, mut progress: impl FnMut(&EpochRecord)) -> Result<TrainRun> {
    let train_set = load_split(cfg, data_dir, "train")?;
    let val_set = load_split(cfg, data_dir, "val")?;
    create_dir(out_dir)?;
    cfg.save(&out_dir.join("config.conf"))?;
    let outcome = train(cfg, &train_set, &val_set, &mut progress)?;
    write_log(&outcome.log, &out_dir.join("train_log.csv"))?;
    checkpoint::save(&outcome.best, &out_dir.join("checkpoint.bin"))?;
    let summary = format!(
        "metric,value\nloss,{}\nepochs_run,{}\nbest_epoch,{}\nbest_val_eer,{}\ninitial_val_eer,{}\nstopped_early,{}\n",
        cfg.loss_kind.name(),
        outcome.log.len(),
        outcome.best_epoch,
        outcome.best_val_eer,
        outcome.initial_val_eer,
        outcome.stopped_early
    );
    let path = out_dir.join("train_summary.csv");
    fs::write(&path, summary).with_context(|| format!("writing {}", path.display()))?;
    Ok(TrainRun {
        log: outcome.log,
        best_epoch: outcome.best_epoch,
        best_val_eer: outcome.best_val_eer,
        initial_val_eer: outcome.initial_val_eer,
        stopped_early: outcome.stopped_early,
    })
}

/// Evaluates a checkpoint (or the untrained initialization when `None`) on a split.
/// Writes `report.csv`, `roc.csv`, `distances.csv` and optionally `embeddings.csv`
/// into `out_dir`.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint_path: Option<&Path>,
    data_dir: &Path,
    split: &str,
    out_dir: &Path,
    export_embeddings: bool,
) -> Result<VerificationReport> {
    let mut store = init_params(&cfg.net, &mut stream(cfg.seed, "init"))?;
    if let Some(p) = checkpoint_path {
        checkpoint::load_into(&mut store, p)?;
    }
    let set = load_split(cfg, data_dir, split)?;
    let pairs = pairs_for(&set, cfg.seed, &format!("{split}-pairs"))?;
    let Evaluation { report, scores, embeddings } = evaluate_pairs(&store, &cfg.net, &set, &pairs, cfg.eval_chunk)?;
    create_dir(out_dir)?;
    report.write_csv(&out_dir.join("report.csv"))?;
    report.write_roc_csv(&out_dir.join("roc.csv"))?;

    let path = out_dir.join("distances.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["reference", "questioned", "positive", "distance"])?;
    for (p, (d, _)) in pairs.pairs.iter().zip(&scores) {
        let (r, q) = (&set.rows[p.reference].path, &set.rows[p.questioned].path);
        w.write_record([&r.display().to_string(), &q.display().to_string(), &(p.positive as u8).to_string(), &d.to_string()])?;
    }
    w.flush()?;

    if export_embeddings {
        let path = out_dir.join("embeddings.csv");
        let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
        let mut header = vec!["image_id".to_string(), "branch".to_string()];
        header.extend((0..cfg.net.embedding_dim).map(|i| format!("dim_{i}")));
        w.write_record(&header)?;
        for (row, e) in set.rows.iter().zip(&embeddings) {
            let id = row.path.display().to_string();
            let branches = std::iter::once(("g".to_string(), &e.global))
                .chain(e.regional.iter().enumerate().map(|(i, r)| (format!("r{}", i + 1), r)));
            for (name, v) in branches {
                let mut rec = vec![id.clone(), name];
                rec.extend(v.iter().map(f64::to_string));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
    }
    Ok(report)
}

/// A batch of synthetic signatures preprocessed to the network input size, laid
/// out as `w` tuplets of `2k+1` images.
pub fn gradcheck_batch(cfg: &RunConfig) -> Result<Tensor> {
    let synth = SynthConfig {
        identities: 2,
        genuine_per_identity: cfg.loss.k + 2,
        forged_per_identity: cfg.loss.k,
        ..cfg.synth_config()
    };
    let mut images = Vec::new();
    let mut pools = Vec::new();
    for id in 0..synth.identities {
        let mut pool = IdentityPool { identity: format!("{id}"), genuine: Vec::new(), forged: Vec::new() };
        for (_, label, img) in render_identity(&synth, id) {
            match label {
                Label::Genuine => pool.genuine.push(images.len()),
                Label::Forged => pool.forged.push(images.len()),
            }
            images.push(preprocess(&img, &cfg.prep())?);
        }
        pools.push(pool);
    }
    let batch = build_batch(&pools, &cfg.loss, &mut stream(cfg.seed, "gradcheck-batch"))?;
    let refs: Vec<&Tensor> = batch.images().into_iter().map(|i| &images[i]).collect();
    Ok(stack_images(&refs)?)
}

/// Whole-model gradient check; writes `gradcheck.csv` into `out_dir`.
pub fn cmd_gradcheck(cfg: &RunConfig, out_dir: &Path, fault: Option<Fault>) -> Result<GradCheckReport> {
    let store = init_params(&cfg.net, &mut stream(cfg.seed, "init"))?;
    let batch = gradcheck_batch(cfg)?;
    let opts = GradCheckOptions { fault, ..GradCheckOptions::default() };
    let report = model_grad_check(&store, &cfg.net, &cfg.loss, cfg.loss_kind, &batch, &opts)?;
    create_dir(out_dir)?;
    let mut text = String::from("parameter,numel,max_rel_error,analytic,numeric,reduced_steps,unresolved,passed\n");
    for p in &report.params {
        text.push_str(&format!(
            "{},{},{:e},{:e},{:e},{},{},{}\n",
            p.name, p.numel, p.max_rel_error, p.analytic, p.numeric, p.reduced_steps, p.unresolved, p.passed
        ));
    }
    let path = out_dir.join("gradcheck.csv");
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(report)
}

/// Run config used by `gradcheck` when no config file is given: the tiny network
/// with two tuplets of k = 2.
pub fn tiny_gradcheck_config() -> RunConfig {
    let mut cfg = RunConfig { net: sigverify::mgrnet::NetConfig::tiny(), ..RunConfig::default() };
    cfg.loss.k = 2;
    cfg.loss.w = 2;
    cfg
}
