//! Command-line driver. Subcommands: `gen`, `train`, `eval`, `ablate`,
//! `bench`, `spectrum`. Flags: `--config <file>`, `--seed <n>`,
//! `--out <dir>`, `--set key=value` (repeatable). The effective
//! configuration is echoed into the output directory, and every run is
//! reproducible from that echo plus its seed. Exit codes: 0 success,
//! 1 user error, 2 internal error.

use cael_core::checkpoint::{self, Checkpoint};
use cael_core::config::{AblateAxis, BranchSet, Config, FusionMode, Protocol, QueryMode};
use cael_core::data::{self, synth, LabelTier, SplitKind};
use cael_core::error::CaelError;
use cael_core::eval::protocol::{robustness_curves_csv, run_protocol};
use cael_core::image::edge::OperatorKind;
use cael_core::image::spectrum::{annulus_mean, mean_spectrum, ARTIFACT_BAND};
use cael_core::image::{read_image, write_image, Image};
use cael_core::model::flops::forward_flops;
use cael_core::model::params::{param_count, ParamSet};
use cael_core::train::{self, dataset_auc, load_split};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CommandKind {
    Gen,
    Train,
    Eval,
    Ablate,
    Bench,
    Spectrum,
}

impl CommandKind {
    fn parse(s: &str) -> Option<CommandKind> {
        match s {
            "gen" => Some(CommandKind::Gen),
            "train" => Some(CommandKind::Train),
            "eval" => Some(CommandKind::Eval),
            "ablate" => Some(CommandKind::Ablate),
            "bench" => Some(CommandKind::Bench),
            "spectrum" => Some(CommandKind::Spectrum),
            _ => None,
        }
    }
}

#[derive(Debug)]
pub struct RunConfig {
    pub command: CommandKind,
    pub config_path: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    pub overrides: Vec<(String, String)>,
}

pub const USAGE: &str = "usage: cael <gen|train|eval|ablate|bench|spectrum> \
[--config FILE] [--seed N] [--out DIR] [--set key=value]...";

/// Parse argv (without the program name).
pub fn parse_args(args: &[String]) -> Result<RunConfig, String> {
    let command = args
        .first()
        .and_then(|s| CommandKind::parse(s))
        .ok_or_else(|| format!("missing or unknown command\n{USAGE}"))?;
    let mut run = RunConfig {
        command,
        config_path: None,
        seed: None,
        out_dir: PathBuf::from("out"),
        overrides: Vec::new(),
    };
    let mut i = 1;
    while i < args.len() {
        let flag = args[i].as_str();
        let value = args
            .get(i + 1)
            .ok_or_else(|| format!("flag {flag} needs a value\n{USAGE}"))?;
        match flag {
            "--config" => run.config_path = Some(PathBuf::from(value)),
            "--seed" => {
                run.seed = Some(
                    value
                        .parse()
                        .map_err(|_| format!("--seed expects an integer, got '{value}'"))?,
                )
            }
            "--out" => run.out_dir = PathBuf::from(value),
            "--set" => {
                let (k, v) = value
                    .split_once('=')
                    .ok_or_else(|| format!("--set expects key=value, got '{value}'"))?;
                run.overrides.push((k.trim().to_string(), v.trim().to_string()));
            }
            other => return Err(format!("unknown flag '{other}'\n{USAGE}")),
        }
        i += 2;
    }
    Ok(run)
}

/// Layer defaults, the config file, and `--set`/`--seed` overrides.
pub fn effective_config(run: &RunConfig) -> Result<Config, CaelError> {
    let mut cfg = Config::default();
    if let Some(path) = &run.config_path {
        cfg.apply_file(path).map_err(CaelError::Config)?;
    }
    for (k, v) in &run.overrides {
        cfg.apply(k, v).map_err(CaelError::Config)?;
    }
    if let Some(seed) = run.seed {
        cfg.seed = seed;
    }
    cfg.model.validate().map_err(CaelError::Config)?;
    Ok(cfg)
}

fn write_out(dir: &Path, name: &str, text: &str) -> Result<(), CaelError> {
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| CaelError::io(path.display().to_string(), e))
}

fn prepare_out(run: &RunConfig, cfg: &Config) -> Result<(), CaelError> {
    std::fs::create_dir_all(&run.out_dir)
        .map_err(|e| CaelError::io(run.out_dir.display().to_string(), e))?;
    write_out(&run.out_dir, "effective_config.txt", &cfg.to_text())
}

fn manifest_paths(cfg: &Config) -> Result<(PathBuf, PathBuf), CaelError> {
    if cfg.data.manifest.is_empty() {
        return Err(CaelError::Config(
            cael_core::error::ConfigError::Invalid("data.manifest is not set".into()),
        ));
    }
    let manifest = PathBuf::from(&cfg.data.manifest);
    let root = manifest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    Ok((manifest, root))
}

pub fn cmd_gen(run: &RunConfig, cfg: &Config) -> Result<(), CaelError> {
    let entries = synth::generate_corpus(&cfg.gen, cfg.seed, &run.out_dir)?;
    let mut by_split: BTreeMap<&str, usize> = BTreeMap::new();
    for e in &entries {
        *by_split.entry(e.split.name()).or_default() += 1;
    }
    println!(
        "gen: wrote {} images to {} ({:?})",
        entries.len(),
        run.out_dir.display(),
        by_split
    );
    Ok(())
}

pub fn cmd_train(run: &RunConfig, cfg: &Config) -> Result<(), CaelError> {
    let (manifest, root) = manifest_paths(cfg)?;
    let entries = data::load_manifest(&manifest, Some(&root))?;
    let train_data = load_split(&root, &entries, SplitKind::Train, &cfg.model, LabelTier::Coarse)?;
    let val_data = load_split(&root, &entries, SplitKind::Val, &cfg.model, LabelTier::Coarse)?;
    let val = (!val_data.is_empty()).then_some(&val_data);
    let outcome = train::train(&cfg.model, &cfg.train, &train_data, val, cfg.seed)?;
    write_out(&run.out_dir, "loss_log.csv", &train::loss_log_csv(&outcome.log))?;
    let ckpt = Checkpoint {
        config_text: cfg.to_text(),
        names: outcome.params.names.clone(),
        tensors: outcome.params.tensors.clone(),
        adam: Some(outcome.adam),
    };
    checkpoint::save(&run.out_dir.join("checkpoint.bin"), &ckpt)?;
    println!(
        "train: {} steps{}, final loss {:.4}{}, checkpoint at {}",
        outcome.steps,
        if outcome.stopped_early {
            " (early stop)"
        } else {
            ""
        },
        outcome.log.last().map(|r| r.loss).unwrap_or(f64::NAN),
        outcome
            .last_val_auc
            .map(|a| format!(", val AUC {a:.4}"))
            .unwrap_or_default(),
        run.out_dir.join("checkpoint.bin").display()
    );
    Ok(())
}

/// Load a checkpoint and rebuild its parameter registry against the model
/// configuration embedded in it.
pub fn load_params(path: &Path) -> Result<(Config, ParamSet), CaelError> {
    let ckpt = checkpoint::load(path)?;
    let mut cfg = Config::default();
    cfg.apply_text(&ckpt.config_text).map_err(CaelError::Config)?;
    let params = ParamSet::from_parts(&cfg.model, ckpt.names, ckpt.tensors).map_err(|reason| {
        CaelError::Checkpoint {
            path: path.display().to_string(),
            reason,
        }
    })?;
    Ok((cfg, params))
}

pub fn cmd_eval(run: &RunConfig, cfg: &Config) -> Result<(), CaelError> {
    let (manifest, root) = manifest_paths(cfg)?;
    let entries = data::load_manifest(&manifest, Some(&root))?;
    let pretrained = if cfg.eval.checkpoint.is_empty() {
        None
    } else {
        let (ckpt_cfg, params) = load_params(Path::new(&cfg.eval.checkpoint))?;
        if ckpt_cfg.model != cfg.model {
            return Err(CaelError::Checkpoint {
                path: cfg.eval.checkpoint.clone(),
                reason: "checkpoint model configuration differs from the requested one".into(),
            });
        }
        Some(params)
    };
    let report = run_protocol(cfg, &entries, &root, pretrained.as_ref())?;
    write_out(&run.out_dir, "report.csv", &report.to_csv())?;
    write_out(&run.out_dir, "report.jsonl", &report.to_jsonl())?;
    if cfg.eval.protocol == Protocol::Robustness {
        write_out(&run.out_dir, "robustness_curves.csv", &robustness_curves_csv(&report))?;
    }
    println!(
        "eval: {} protocol, {} cells ({} absent), report at {}",
        report.protocol,
        report.cells.len(),
        report.absent.len(),
        run.out_dir.join("report.csv").display()
    );
    Ok(())
}

/// One ablation variant: a label and the model-config edit it applies.
fn ablate_variants(cfg: &Config) -> Vec<(String, Config)> {
    let base = cfg.clone();
    let mut out: Vec<(String, Config)> = Vec::new();
    let mut push = |label: String, edit: &dyn Fn(&mut Config)| {
        let mut c = base.clone();
        edit(&mut c);
        out.push((label, c));
    };
    match cfg.ablate.axis {
        AblateAxis::Branches => {
            for b in ["F", "C", "E", "FC", "FE", "CE", "FCE"] {
                push(b.to_string(), &move |c| {
                    c.model.branches = BranchSet::parse(b).unwrap();
                });
            }
        }
        AblateAxis::Operator => {
            for op in OperatorKind::ALL {
                push(op.name().to_string(), &move |c| c.model.operator = op);
            }
        }
        AblateAxis::Fusion => {
            for f in [
                FusionMode::Concatenation,
                FusionMode::Summation,
                FusionMode::CrossAttention,
            ] {
                push(f.name().to_string(), &move |c| c.model.fusion_mode = f);
            }
        }
        AblateAxis::Query => {
            for q in [QueryMode::Cls, QueryMode::Patch, QueryMode::All] {
                push(q.name().to_string(), &move |c| c.model.query_mode = q);
            }
        }
        AblateAxis::Aeca => {
            for on in [false, true] {
                push(format!("aeca_{}", if on { "on" } else { "off" }), &move |c| {
                    c.model.aeca_enabled = on;
                });
            }
        }
        AblateAxis::EdgeDepth => {
            for e in 0..=4usize {
                push(format!("E{e}"), &move |c| c.model.edge_blocks = e);
            }
        }
        AblateAxis::MaetBlocks => {
            for k in 1..=5usize {
                push(format!("K{k}"), &move |c| c.model.maet_blocks = k);
            }
        }
    }
    out
}

pub fn cmd_ablate(run: &RunConfig, cfg: &Config) -> Result<(), CaelError> {
    let (manifest, root) = manifest_paths(cfg)?;
    let entries = data::load_manifest(&manifest, Some(&root))?;
    let budget = cael_core::config::TrainConfig {
        epochs: cfg.ablate.epochs,
        max_train_images: cfg.ablate.max_images,
        early_stop_auc: 0.0,
        ..cfg.train.clone()
    };
    let mut csv = String::from("variant,auc,acc,params\n");
    for (label, vcfg) in ablate_variants(cfg) {
        vcfg.model.validate().map_err(CaelError::Config)?;
        let train_data =
            load_split(&root, &entries, SplitKind::Train, &vcfg.model, LabelTier::Coarse)?;
        let test_data =
            load_split(&root, &entries, SplitKind::Test, &vcfg.model, LabelTier::Coarse)?;
        let outcome = train::train(&vcfg.model, &budget, &train_data, None, cfg.seed)?;
        let auc = dataset_auc(&vcfg.model, &outcome.params, &test_data, budget.batch_size)?;
        let scores = train::fake_scores(&vcfg.model, &outcome.params, &test_data, budget.batch_size)?;
        let correct = scores
            .iter()
            .zip(&test_data.labels)
            .filter(|(s, &l)| usize::from(**s >= 0.5) == l)
            .count();
        let acc = correct as f64 / test_data.len() as f64;
        let _ = writeln!(
            csv,
            "{label},{auc:.6},{acc:.6},{}",
            param_count(&vcfg.model)
        );
        println!("ablate {}: {label} auc {auc:.4} acc {acc:.4}", cfg.ablate.axis.name());
    }
    write_out(
        &run.out_dir,
        &format!("ablate_{}.csv", cfg.ablate.axis.name()),
        &csv,
    )?;
    Ok(())
}

/// Parameter and FLOP table at the published dimensions: query-mode
/// variants, edge-encoder depth 0..4, and block count 1..5.
pub fn bench_table(cfg: &Config) -> String {
    let mut base = cfg.model.clone();
    base.input_size = 224; // published input size: 49 patch tokens
    let mut s = String::from("axis,variant,params,flops_per_image\n");
    for q in [QueryMode::Cls, QueryMode::Patch, QueryMode::All] {
        let mut m = base.clone();
        m.query_mode = q;
        let _ = writeln!(
            s,
            "query,{},{},{}",
            q.name(),
            param_count(&m),
            forward_flops(&m, 1)
        );
    }
    for e in 0..=4usize {
        let mut m = base.clone();
        m.edge_blocks = e;
        let _ = writeln!(
            s,
            "edge_depth,E{e},{},{}",
            param_count(&m),
            forward_flops(&m, 1)
        );
    }
    for k in 1..=5usize {
        let mut m = base.clone();
        m.maet_blocks = k;
        let _ = writeln!(
            s,
            "maet_blocks,K{k},{},{}",
            param_count(&m),
            forward_flops(&m, 1)
        );
    }
    s
}

pub fn cmd_bench(run: &RunConfig, cfg: &Config) -> Result<(), CaelError> {
    let table = bench_table(cfg);
    print!("{table}");
    write_out(&run.out_dir, "bench.csv", &table)?;
    Ok(())
}

pub fn cmd_spectrum(run: &RunConfig, cfg: &Config) -> Result<(), CaelError> {
    let (manifest, root) = manifest_paths(cfg)?;
    let entries = data::load_manifest(&manifest, Some(&root))?;
    let mut by_family: BTreeMap<String, Vec<Image>> = BTreeMap::new();
    for e in &entries {
        let family = match &e.label.forgery {
            None => "real".to_string(),
            Some((_, _, g)) => g.clone(),
        };
        by_family
            .entry(family)
            .or_default()
            .push(read_image(&root.join(&e.path))?);
    }
    let mut summary = String::from("family,n,annulus_energy\n");
    for (family, images) in &by_family {
        let spec = mean_spectrum(images)?;
        let (h, w) = (images[0].height, images[0].width);
        let mut normalized = spec.clone();
        cael_core::image::min_max_normalize(&mut normalized);
        write_image(
            &run.out_dir.join(format!("{family}_spectrum.pgm")),
            &Image::new(1, h, w, normalized),
        )?;
        let mut csv = String::new();
        for y in 0..h {
            let row: Vec<String> = (0..w).map(|x| format!("{:.6}", spec[y * w + x])).collect();
            let _ = writeln!(csv, "{}", row.join(","));
        }
        write_out(&run.out_dir, &format!("{family}_spectrum.csv"), &csv)?;
        let (lo, hi) = ARTIFACT_BAND;
        let _ = writeln!(
            summary,
            "{family},{},{:.6}",
            images.len(),
            annulus_mean(&spec, h, w, lo, hi)
        );
    }
    write_out(&run.out_dir, "spectrum_summary.csv", &summary)?;
    println!("spectrum: {} families to {}", by_family.len(), run.out_dir.display());
    Ok(())
}

fn dispatch(run: &RunConfig, cfg: &Config) -> Result<(), CaelError> {
    match run.command {
        CommandKind::Gen => cmd_gen(run, cfg),
        CommandKind::Train => cmd_train(run, cfg),
        CommandKind::Eval => cmd_eval(run, cfg),
        CommandKind::Ablate => cmd_ablate(run, cfg),
        CommandKind::Bench => cmd_bench(run, cfg),
        CommandKind::Spectrum => cmd_spectrum(run, cfg),
    }
}

fn is_user_error(err: &CaelError) -> bool {
    matches!(
        err,
        CaelError::Config(_) | CaelError::Data(_) | CaelError::Checkpoint { .. }
    )
}

/// Entry point: returns the process exit code.
pub fn main_run(args: &[String]) -> i32 {
    let run = match parse_args(args) {
        Ok(r) => r,
        Err(msg) => {
            eprintln!("error: usage: {msg}");
            return 1;
        }
    };
    let cfg = match effective_config(&run) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: config: {e}");
            return 1;
        }
    };
    if let Err(e) = prepare_out(&run, &cfg) {
        eprintln!("error: output: {e}");
        return 2;
    }
    match dispatch(&run, &cfg) {
        Ok(()) => 0,
        Err(e) if is_user_error(&e) => {
            eprintln!("error: input: {e}");
            1
        }
        Err(e) => {
            eprintln!("error: internal: {e}");
            2
        }
    }
}
