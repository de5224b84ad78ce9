//! Training loop: batched forward/backward over the tape, Adam with the
//! step schedule, a CSV-able loss log, and optional early stopping on a
//! validation-AUC probe. Single-threaded and bit-deterministic for a given
//! seed.

use crate::config::{CaelConfig, TrainConfig};
use crate::data::{LabelTier, ManifestEntry, SplitKind};
use crate::error::CaelError;
use crate::eval::metrics::auc;
use crate::image::{read_image, Image};
use crate::model::params::ParamSet;
use crate::model::{self, ParamVars};
use crate::rng::Rng;
use crate::tensor::adam::{adam_step, scheduled_lr, AdamState};
use crate::tensor::Tape;
use std::path::Path;

/// A split loaded into memory: decoded appearance images, their edge maps
/// under the configured operator, and tier labels.
pub struct DataSet {
    pub entries: Vec<ManifestEntry>,
    pub images: Vec<Image>,
    pub edges: Vec<Image>,
    pub labels: Vec<usize>,
}

impl DataSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Load one split of a manifest, computing edge maps up front so epochs
/// reuse them. Entries are ordered by path, so reports and training are
/// independent of manifest line order.
pub fn load_split(
    root: &Path,
    entries: &[ManifestEntry],
    split: SplitKind,
    cfg: &CaelConfig,
    tier: LabelTier,
) -> Result<DataSet, CaelError> {
    let mut picked: Vec<&ManifestEntry> = entries.iter().filter(|e| e.split == split).collect();
    picked.sort_by(|a, b| a.path.cmp(&b.path));
    let mut out = DataSet {
        entries: Vec::new(),
        images: Vec::new(),
        edges: Vec::new(),
        labels: Vec::new(),
    };
    for e in picked {
        let img = read_image(&root.join(&e.path))?;
        let edge = model::edge_input(&img, cfg)?;
        out.labels.push(e.label.class_at(tier));
        out.images.push(img);
        out.edges.push(edge);
        out.entries.push(e.clone());
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

pub struct TrainOutcome {
    pub params: ParamSet,
    pub adam: AdamState,
    pub log: Vec<LogRow>,
    pub steps: usize,
    pub stopped_early: bool,
    pub last_val_auc: Option<f64>,
}

fn forward_batch(
    model_cfg: &CaelConfig,
    params: &ParamSet,
    data: &DataSet,
    idx: &[usize],
) -> Result<(Tape, model::Outputs, Vec<usize>, Vec<crate::tensor::Var>), CaelError> {
    let images: Vec<&Image> = idx.iter().map(|&i| &data.images[i]).collect();
    let edges: Vec<&Image> = idx.iter().map(|&i| &data.edges[i]).collect();
    let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
    let (app, edg) = model::batch_tensors(&images, &edges);
    let mut tape = Tape::new();
    let pv = ParamVars::enroll(&mut tape, params);
    let param_vars = pv.vars.clone();
    let a = tape.leaf(&app);
    let e = tape.leaf(&edg);
    let out = model::forward(&mut tape, &pv, model_cfg, a, e)?;
    Ok((tape, out, labels, param_vars))
}

/// Class probabilities for every example, batched forward passes only.
pub fn predict_probs(
    model_cfg: &CaelConfig,
    params: &ParamSet,
    data: &DataSet,
    batch: usize,
) -> Result<Vec<Vec<f64>>, CaelError> {
    let mut probs = Vec::with_capacity(data.len());
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(batch.max(1)) {
        let (tape, out, _, _) = forward_batch(model_cfg, params, data, chunk)?;
        let logits = tape.value(out.logits);
        for row in logits.chunks(model_cfg.classes) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
            let sum: f64 = exps.iter().sum();
            probs.push(exps.iter().map(|e| e / sum).collect());
        }
    }
    Ok(probs)
}

/// Probability assigned to the fake class (binary heads).
pub fn fake_scores(
    model_cfg: &CaelConfig,
    params: &ParamSet,
    data: &DataSet,
    batch: usize,
) -> Result<Vec<f64>, CaelError> {
    Ok(predict_probs(model_cfg, params, data, batch)?
        .into_iter()
        .map(|p| p[1])
        .collect())
}

/// AUC of the fake-class score on a dataset (binary tiers only).
pub fn dataset_auc(
    model_cfg: &CaelConfig,
    params: &ParamSet,
    data: &DataSet,
    batch: usize,
) -> Result<f64, CaelError> {
    let scores = fake_scores(model_cfg, params, data, batch)?;
    let scored: Vec<(f64, usize)> = scores
        .into_iter()
        .zip(data.labels.iter().map(|&l| usize::from(l > 0)))
        .collect();
    auc(&scored).map_err(CaelError::Eval)
}

/// Fit the model. Validation data, when provided, drives early stopping:
/// `checks_per_epoch` times per epoch the fake-class AUC on (a subset of)
/// the validation split is measured, and training stops once it reaches
/// `early_stop_auc`.
pub fn train(
    model_cfg: &CaelConfig,
    train_cfg: &TrainConfig,
    data: &DataSet,
    val: Option<&DataSet>,
    seed: u64,
) -> Result<TrainOutcome, CaelError> {
    model_cfg.validate()?;
    let mut params = ParamSet::init(model_cfg, seed);
    let mut adam = AdamState::new(
        &params.tensors,
        train_cfg.learning_rate,
        train_cfg.weight_decay,
    );
    let mut log = Vec::new();
    let mut steps = 0usize;
    let mut stopped_early = false;
    let mut last_val_auc = None;

    // deterministic training subset, then per-epoch shuffles
    let mut pool: Vec<usize> = (0..data.len()).collect();
    if train_cfg.max_train_images > 0 && train_cfg.max_train_images < pool.len() {
        let mut rng = Rng::derive_named(seed, "train.subset");
        rng.shuffle(&mut pool);
        pool.truncate(train_cfg.max_train_images);
        pool.sort_unstable();
    }

    let val_pool: Option<Vec<usize>> = val.map(|v| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        if train_cfg.val_subset > 0 && train_cfg.val_subset < idx.len() {
            let mut rng = Rng::derive_named(seed, "train.val_subset");
            rng.shuffle(&mut idx);
            idx.truncate(train_cfg.val_subset);
            idx.sort_unstable();
        }
        idx
    });

    let names_owned = params.names.clone();
    let names: Vec<&str> = names_owned.iter().map(|s| s.as_str()).collect();

    'epochs: for epoch in 0..train_cfg.epochs {
        let lr = scheduled_lr(train_cfg.learning_rate, epoch, train_cfg.lr_drop_epochs);
        let mut order = pool.clone();
        let mut rng = Rng::derive_named(seed, &format!("train.epoch{epoch}"));
        rng.shuffle(&mut order);
        let n_batches = order.len().div_ceil(train_cfg.batch_size.max(1));
        let check_every = if train_cfg.checks_per_epoch > 0 {
            (n_batches / train_cfg.checks_per_epoch).max(1)
        } else {
            usize::MAX
        };
        for (bi, chunk) in order.chunks(train_cfg.batch_size.max(1)).enumerate() {
            let (mut tape, out, labels, param_vars) =
                forward_batch(model_cfg, &params, data, chunk)?;
            let loss = tape.cross_entropy(out.logits, &labels)?;
            let loss_val = tape.value(loss)[0];
            let grads = tape.backward(loss)?;
            let grad_refs: Vec<&[f64]> = param_vars
                .iter()
                .map(|v| grads.get(*v).expect("parameter gradient"))
                .collect();
            adam_step(&mut params.tensors, &grad_refs, &names, &mut adam, lr)?;
            steps += 1;
            log.push(LogRow {
                epoch,
                step: steps,
                loss: loss_val,
                lr,
            });
            let end_of_epoch = bi + 1 == n_batches;
            if (bi + 1) % check_every == 0 || end_of_epoch {
                if let (Some(v), Some(vp)) = (val, val_pool.as_ref()) {
                    if train_cfg.early_stop_auc > 0.0 && !vp.is_empty() {
                        let sub = subset(v, vp);
                        if let Ok(a) =
                            dataset_auc(model_cfg, &params, &sub, train_cfg.batch_size)
                        {
                            last_val_auc = Some(a);
                            if a >= train_cfg.early_stop_auc {
                                stopped_early = true;
                                break 'epochs;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(TrainOutcome {
        params,
        adam,
        log,
        steps,
        stopped_early,
        last_val_auc,
    })
}

fn subset(data: &DataSet, idx: &[usize]) -> DataSet {
    DataSet {
        entries: idx.iter().map(|&i| data.entries[i].clone()).collect(),
        images: idx.iter().map(|&i| data.images[i].clone()).collect(),
        edges: idx.iter().map(|&i| data.edges[i].clone()).collect(),
        labels: idx.iter().map(|&i| data.labels[i]).collect(),
    }
}

/// Corrupted copy of a dataset (appearance corrupted, edge maps recomputed).
pub fn corrupted_dataset(
    data: &DataSet,
    cfg: &CaelConfig,
    spec: crate::image::corrupt::CorruptionSpec,
    seed: u64,
) -> Result<DataSet, CaelError> {
    let mut out = DataSet {
        entries: data.entries.clone(),
        images: Vec::with_capacity(data.len()),
        edges: Vec::with_capacity(data.len()),
        labels: data.labels.clone(),
    };
    for (i, img) in data.images.iter().enumerate() {
        let c = crate::image::corrupt::corrupt(img, spec, seed ^ i as u64)?;
        let e = model::edge_input(&c, cfg)?;
        out.images.push(c);
        out.edges.push(e);
    }
    Ok(out)
}

/// Loss log in CSV form: epoch, step, loss, lr.
pub fn loss_log_csv(log: &[LogRow]) -> String {
    let mut s = String::from("epoch,step,loss,lr\n");
    for row in log {
        s.push_str(&format!(
            "{},{},{:.6},{:e}\n",
            row.epoch, row.step, row.loss, row.lr
        ));
    }
    s
}

/// Build a synthetic in-memory dataset directly from images (tests and
/// protocol cells that never touch disk).
pub fn dataset_from_images(
    cfg: &CaelConfig,
    images: Vec<Image>,
    labels: Vec<usize>,
    entries: Vec<ManifestEntry>,
) -> Result<DataSet, CaelError> {
    let mut edges = Vec::with_capacity(images.len());
    for img in &images {
        edges.push(model::edge_input(img, cfg)?);
    }
    Ok(DataSet {
        entries,
        images,
        edges,
        labels,
    })
}
