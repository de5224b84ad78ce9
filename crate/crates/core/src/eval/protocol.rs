//! Protocol runners: cross-generator and cross-forgery matrices (per-cell
//! trained models), multi-level classification, holdout scoring, and
//! corruption-robustness sweeps. Reports emit as CSV (one row per cell)
//! plus a JSON-lines log.

use crate::config::{CaelConfig, Config, Protocol, TrainConfig};
use crate::data::{ForgeryType, LabelTier, ManifestEntry, SplitKind};
use crate::error::CaelError;
use crate::eval::metrics::{auc, classification_metrics};
use crate::image::corrupt::{CorruptionKind, CorruptionSpec};
use crate::model::params::ParamSet;
use crate::rng::stream_hash;
use crate::train::{
    corrupted_dataset, fake_scores, load_split, predict_probs, train, DataSet,
};
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

/// One evaluated protocol cell.
#[derive(Clone, Debug)]
pub struct CellReport {
    pub train_family: String,
    pub test_family: String,
    pub n: usize,
    pub accuracy: f64,
    pub auc: Option<f64>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Default)]
pub struct EvalReport {
    pub protocol: String,
    pub cells: Vec<CellReport>,
    /// Cells skipped because a family was absent from the manifest.
    pub absent: Vec<String>,
    pub config_fingerprint: u64,
    pub seeds: Vec<u64>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s =
            String::from("protocol,train_family,test_family,n,acc,auc,precision,recall,f1\n");
        for c in &self.cells {
            let auc = c.auc.map(|a| format!("{a:.6}")).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{:.6},{},{:.6},{:.6},{:.6}",
                self.protocol,
                c.train_family,
                c.test_family,
                c.n,
                c.accuracy,
                auc,
                c.precision,
                c.recall,
                c.f1
            );
        }
        for a in &self.absent {
            let _ = writeln!(s, "{},{},absent,0,,,,,", self.protocol, a);
        }
        s
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for c in &self.cells {
            let auc = c
                .auc
                .map(|a| format!("{a:.6}"))
                .unwrap_or_else(|| "null".into());
            let _ = writeln!(
                s,
                "{{\"protocol\":\"{}\",\"train\":\"{}\",\"test\":\"{}\",\"n\":{},\"acc\":{:.6},\"auc\":{},\"precision\":{:.6},\"recall\":{:.6},\"f1\":{:.6},\"fingerprint\":{},\"seeds\":{:?}}}",
                self.protocol,
                c.train_family,
                c.test_family,
                c.n,
                c.accuracy,
                auc,
                c.precision,
                c.recall,
                c.f1,
                self.config_fingerprint,
                self.seeds
            );
        }
        s
    }

    pub fn cell(&self, train: &str, test: &str) -> Option<&CellReport> {
        self.cells
            .iter()
            .find(|c| c.train_family == train && c.test_family == test)
    }
}

/// How entries group into protocol families.
fn family_key(protocol: Protocol, e: &ManifestEntry) -> Option<String> {
    match &e.label.forgery {
        None => None,
        Some((ty, _fam, generator)) => match protocol {
            Protocol::CrossGenerator => {
                // EFS generators only, mirroring the published protocol
                (*ty == ForgeryType::Efs).then(|| generator.clone())
            }
            Protocol::CrossForgery => Some(ty.name().to_string()),
            _ => Some(generator.clone()),
        },
    }
}

fn binary_cell_metrics(scores: &[f64], labels: &[usize]) -> (f64, Option<f64>, f64, f64, f64) {
    // fixed 0.5 threshold for accuracy-style metrics, AUC threshold-free
    let preds: Vec<usize> = scores.iter().map(|&s| usize::from(s >= 0.5)).collect();
    let m = classification_metrics(&preds, labels, 2)
        .unwrap_or(crate::eval::metrics::ClassificationMetrics {
            accuracy: 0.0,
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
        });
    let scored: Vec<(f64, usize)> = scores.iter().cloned().zip(labels.iter().cloned()).collect();
    let auc_val = auc(&scored).ok();
    (m.accuracy, auc_val, m.precision, m.recall, m.f1)
}

fn cell_budget(cfg: &Config) -> TrainConfig {
    TrainConfig {
        epochs: cfg.eval.cell_epochs,
        max_train_images: cfg.eval.cell_max_images,
        ..cfg.train.clone()
    }
}

/// Binary dataset of reals plus one fake family, for a given split.
fn family_dataset(
    root: &Path,
    entries: &[ManifestEntry],
    model_cfg: &CaelConfig,
    protocol: Protocol,
    family: &str,
    split: SplitKind,
) -> Result<DataSet, CaelError> {
    let picked: Vec<ManifestEntry> = entries
        .iter()
        .filter(|e| match family_key(protocol, e) {
            None => true, // reals participate in every cell
            Some(f) => f == family,
        })
        .cloned()
        .collect();
    load_split(root, &picked, split, model_cfg, LabelTier::Coarse)
}

fn family_matrix(
    cfg: &Config,
    entries: &[ManifestEntry],
    root: &Path,
    protocol: Protocol,
) -> Result<EvalReport, CaelError> {
    let mut families: BTreeSet<String> = BTreeSet::new();
    for e in entries {
        if let Some(f) = family_key(protocol, e) {
            families.insert(f);
        }
    }
    let mut report = EvalReport {
        protocol: protocol.name().to_string(),
        config_fingerprint: cfg.fingerprint(),
        seeds: vec![cfg.seed],
        ..EvalReport::default()
    };
    let budget = cell_budget(cfg);
    for train_family in &families {
        let train_data =
            family_dataset(root, entries, &cfg.model, protocol, train_family, SplitKind::Train)?;
        if train_data.is_empty() || !train_data.labels.iter().any(|&l| l > 0) {
            report.absent.push(train_family.clone());
            continue;
        }
        let cell_seed = cfg.seed ^ stream_hash(train_family);
        let outcome = train(&cfg.model, &budget, &train_data, None, cell_seed)?;
        for test_family in &families {
            let test_data = family_dataset(
                root,
                entries,
                &cfg.model,
                protocol,
                test_family,
                SplitKind::Test,
            )?;
            if test_data.is_empty() || !test_data.labels.iter().any(|&l| l > 0) {
                report
                    .absent
                    .push(format!("{train_family}->{test_family}"));
                continue;
            }
            let scores = fake_scores(&cfg.model, &outcome.params, &test_data, cfg.train.batch_size)?;
            let (acc, auc_val, precision, recall, f1) =
                binary_cell_metrics(&scores, &test_data.labels);
            report.cells.push(CellReport {
                train_family: train_family.clone(),
                test_family: test_family.clone(),
                n: test_data.len(),
                accuracy: acc,
                auc: auc_val,
                precision,
                recall,
                f1,
            });
        }
    }
    Ok(report)
}

fn level_protocol(
    cfg: &Config,
    entries: &[ManifestEntry],
    root: &Path,
    tier: LabelTier,
    name: &str,
) -> Result<EvalReport, CaelError> {
    let mut model_cfg = cfg.model.clone();
    model_cfg.classes = tier.classes();
    let train_data = load_split(root, entries, SplitKind::Train, &model_cfg, tier)?;
    let test_data = load_split(root, entries, SplitKind::Test, &model_cfg, tier)?;
    if train_data.is_empty() || test_data.is_empty() {
        return Err(CaelError::Eval(crate::error::EvalError::Empty));
    }
    let budget = cell_budget(cfg);
    let outcome = train(&model_cfg, &budget, &train_data, None, cfg.seed)?;
    let probs = predict_probs(&model_cfg, &outcome.params, &test_data, cfg.train.batch_size)?;
    let preds: Vec<usize> = probs
        .iter()
        .map(|p| {
            p.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap_or(0)
        })
        .collect();
    let m = classification_metrics(&preds, &test_data.labels, tier.classes())
        .map_err(CaelError::Eval)?;
    // AUC reported for the binary coarse tier only
    let auc_val = if tier.classes() == 2 {
        let scored: Vec<(f64, usize)> = probs
            .iter()
            .map(|p| p[1])
            .zip(test_data.labels.iter().cloned())
            .collect();
        auc(&scored).ok()
    } else {
        None
    };
    Ok(EvalReport {
        protocol: name.to_string(),
        cells: vec![CellReport {
            train_family: "all".into(),
            test_family: "all".into(),
            n: test_data.len(),
            accuracy: m.accuracy,
            auc: auc_val,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
        }],
        absent: vec![],
        config_fingerprint: cfg.fingerprint(),
        seeds: vec![cfg.seed],
    })
}

/// Score an existing model (or train one under the cell budget) on the test
/// split, corruption-free row first, then the full kind x level grid.
fn robustness_protocol(
    cfg: &Config,
    entries: &[ManifestEntry],
    root: &Path,
    params: &ParamSet,
) -> Result<EvalReport, CaelError> {
    let test_data = load_split(root, entries, SplitKind::Test, &cfg.model, LabelTier::Coarse)?;
    let mut report = EvalReport {
        protocol: Protocol::Robustness.name().to_string(),
        config_fingerprint: cfg.fingerprint(),
        seeds: vec![cfg.seed],
        ..EvalReport::default()
    };
    for kind in CorruptionKind::ALL {
        for level in 0..=cfg.eval.max_level {
            let spec = CorruptionSpec {
                kind,
                intensity_level: level,
            };
            // level 0 passes every image through unchanged, so that row is
            // the uncorrupted baseline
            let data = corrupted_dataset(&test_data, &cfg.model, spec, cfg.seed)?;
            let scores = fake_scores(&cfg.model, params, &data, cfg.train.batch_size)?;
            let (acc, auc_val, precision, recall, f1) =
                binary_cell_metrics(&scores, &data.labels);
            report.cells.push(CellReport {
                train_family: kind.name().to_string(),
                test_family: format!("level{level}"),
                n: data.len(),
                accuracy: acc,
                auc: auc_val,
                precision,
                recall,
                f1,
            });
        }
    }
    Ok(report)
}

/// Plot-ready robustness curves: level, method, auc.
pub fn robustness_curves_csv(report: &EvalReport) -> String {
    let mut s = String::from("level,method,auc\n");
    for c in &report.cells {
        if let (Some(level), Some(a)) = (c.test_family.strip_prefix("level"), c.auc) {
            let _ = writeln!(s, "{level},{},{a:.6}", c.train_family);
        }
    }
    s
}

/// Run one protocol end to end. `pretrained` supplies the model for the
/// holdout and robustness protocols; matrix and level protocols train their
/// own per-cell models under the configured budget.
pub fn run_protocol(
    cfg: &Config,
    entries: &[ManifestEntry],
    root: &Path,
    pretrained: Option<&ParamSet>,
) -> Result<EvalReport, CaelError> {
    match cfg.eval.protocol {
        Protocol::CrossGenerator | Protocol::CrossForgery => {
            family_matrix(cfg, entries, root, cfg.eval.protocol)
        }
        Protocol::LevelCoarse => level_protocol(cfg, entries, root, LabelTier::Coarse, "level_coarse"),
        Protocol::LevelForgery => {
            level_protocol(cfg, entries, root, LabelTier::Forgery, "level_forgery")
        }
        Protocol::LevelGenerator => {
            level_protocol(cfg, entries, root, LabelTier::Generator, "level_generator")
        }
        Protocol::Holdout => {
            let params = pretrained.ok_or_else(|| CaelError::Checkpoint {
                path: cfg.eval.checkpoint.clone(),
                reason: "holdout protocol needs a trained checkpoint".into(),
            })?;
            let test_data =
                load_split(root, entries, SplitKind::Test, &cfg.model, LabelTier::Coarse)?;
            let scores = fake_scores(&cfg.model, params, &test_data, cfg.train.batch_size)?;
            let (acc, auc_val, precision, recall, f1) =
                binary_cell_metrics(&scores, &test_data.labels);
            Ok(EvalReport {
                protocol: "holdout".into(),
                cells: vec![CellReport {
                    train_family: "all".into(),
                    test_family: "all".into(),
                    n: test_data.len(),
                    accuracy: acc,
                    auc: auc_val,
                    precision,
                    recall,
                    f1,
                }],
                absent: vec![],
                config_fingerprint: cfg.fingerprint(),
                seeds: vec![cfg.seed],
            })
        }
        Protocol::Robustness => {
            let owned;
            let params = match pretrained {
                Some(p) => p,
                None => {
                    let train_data = load_split(
                        root,
                        entries,
                        SplitKind::Train,
                        &cfg.model,
                        LabelTier::Coarse,
                    )?;
                    let budget = cell_budget(cfg);
                    owned = train(&cfg.model, &budget, &train_data, None, cfg.seed)?;
                    &owned.params
                }
            };
            robustness_protocol(cfg, entries, root, params)
        }
    }
}

