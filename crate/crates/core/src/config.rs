//! Configuration: architecture, training, generation, and evaluation
//! settings, parsed from a flat `key = value` dialect with `#` comments.
//! Defaults are authoritative here; files and `--set` overrides layer on
//! top. Unknown keys are rejected.

use crate::error::ConfigError;
use crate::image::edge::OperatorKind;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    CrossAttention,
    Concatenation,
    Summation,
}

impl FusionMode {
    pub fn name(&self) -> &'static str {
        match self {
            FusionMode::CrossAttention => "cross_attention",
            FusionMode::Concatenation => "concatenation",
            FusionMode::Summation => "summation",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueryMode {
    Cls,
    Patch,
    All,
}

impl QueryMode {
    pub fn name(&self) -> &'static str {
        match self {
            QueryMode::Cls => "cls",
            QueryMode::Patch => "patch",
            QueryMode::All => "all",
        }
    }
}

/// Which of the fine / coarse / edge branches are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BranchSet {
    pub fine: bool,
    pub coarse: bool,
    pub edge: bool,
}

impl BranchSet {
    pub const ALL: BranchSet = BranchSet {
        fine: true,
        coarse: true,
        edge: true,
    };

    pub fn count(&self) -> usize {
        usize::from(self.fine) + usize::from(self.coarse) + usize::from(self.edge)
    }

    pub fn name(&self) -> String {
        let mut s = String::new();
        if self.fine {
            s.push('F');
        }
        if self.coarse {
            s.push('C');
        }
        if self.edge {
            s.push('E');
        }
        s
    }

    pub fn parse(text: &str) -> Option<BranchSet> {
        let mut b = BranchSet {
            fine: false,
            coarse: false,
            edge: false,
        };
        for ch in text.chars() {
            match ch.to_ascii_uppercase() {
                'F' => b.fine = true,
                'C' => b.coarse = true,
                'E' => b.edge = true,
                '+' | ' ' => {}
                _ => return None,
            }
        }
        (b.count() > 0).then_some(b)
    }
}

/// Architecture hyperparameters. `token_dim` is the fine-branch dimension d;
/// coarse and edge branches use 2d.
#[derive(Clone, Debug, PartialEq)]
pub struct CaelConfig {
    /// K: stacked MAET blocks.
    pub maet_blocks: usize,
    /// S: fine-grained encoder depth inside each MAET block.
    pub fine_blocks: usize,
    /// L: coarse-grained encoder depth.
    pub coarse_blocks: usize,
    /// E: edge encoder depth.
    pub edge_blocks: usize,
    /// N: multi-grained cross-attention blocks.
    pub cross_attn_blocks: usize,
    /// m: attention heads.
    pub heads: usize,
    /// d: fine token dimension.
    pub token_dim: usize,
    /// Square input side (H = W), multiple of 32.
    pub input_size: usize,
    pub mlp_ratio: f64,
    pub fusion_mode: FusionMode,
    pub query_mode: QueryMode,
    pub aeca_enabled: bool,
    pub branches: BranchSet,
    pub operator: OperatorKind,
    /// Output channels of the fine stem.
    pub fine_channels: usize,
    /// Output channels of the coarse and edge stems.
    pub coarse_channels: usize,
    /// Expert output classes (2 for real/fake, more for level protocols).
    pub classes: usize,
}

impl Default for CaelConfig {
    fn default() -> Self {
        CaelConfig {
            maet_blocks: 4,
            fine_blocks: 2,
            coarse_blocks: 3,
            edge_blocks: 3,
            cross_attn_blocks: 2,
            heads: 8,
            token_dim: 192,
            input_size: 64,
            mlp_ratio: 4.0,
            fusion_mode: FusionMode::CrossAttention,
            query_mode: QueryMode::Cls,
            aeca_enabled: true,
            branches: BranchSet::ALL,
            operator: OperatorKind::Sobel,
            fine_channels: 192,
            coarse_channels: 64,
            classes: 2,
        }
    }
}

impl CaelConfig {
    /// A reduced architecture for ablation sweeps and per-cell protocol
    /// training, where dozens of models are fitted in one run.
    pub fn small() -> Self {
        CaelConfig {
            maet_blocks: 2,
            fine_blocks: 1,
            coarse_blocks: 1,
            edge_blocks: 1,
            cross_attn_blocks: 1,
            heads: 4,
            token_dim: 32,
            fine_channels: 32,
            coarse_channels: 8,
            ..CaelConfig::default()
        }
    }

    /// Patch tokens per branch; identical across branches by construction:
    /// the fine grid is (H/32)^2 and the coarse/edge grids tile (H/4) with
    /// 8x8 patches, which is (H/32)^2 again.
    pub fn tokens(&self) -> usize {
        (self.input_size / 32) * (self.input_size / 32)
    }

    /// Flattened input dimension of one coarse/edge patch.
    pub fn patch_feature_dim(&self) -> usize {
        self.coarse_channels * 64
    }

    pub fn wide_dim(&self) -> usize {
        2 * self.token_dim
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let d = self.token_dim;
        if d == 0 || d % self.heads != 0 || (2 * d) % self.heads != 0 {
            return Err(ConfigError::Invalid(format!(
                "token_dim {d} and 2*{d} must divide into {} heads",
                self.heads
            )));
        }
        if self.input_size % 32 != 0 || self.input_size == 0 {
            return Err(ConfigError::Invalid(format!(
                "input_size {} must be a positive multiple of 32",
                self.input_size
            )));
        }
        if self.branches.count() == 0 {
            return Err(ConfigError::Invalid("no active branches".into()));
        }
        if self.classes < 2 {
            return Err(ConfigError::Invalid("classes must be >= 2".into()));
        }
        if self.mlp_ratio <= 0.0 {
            return Err(ConfigError::Invalid("mlp_ratio must be positive".into()));
        }
        Ok(())
    }
}

/// Training-loop settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Learning rate drops tenfold every this many epochs.
    pub lr_drop_epochs: usize,
    /// Stop once validation AUC reaches this value (0 disables).
    pub early_stop_auc: f64,
    /// Validation checks per epoch for early stopping.
    pub checks_per_epoch: usize,
    /// Cap on validation images per check (0 = all).
    pub val_subset: usize,
    /// Cap on training images (0 = all of the train split).
    pub max_train_images: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 3,
            batch_size: 32,
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            lr_drop_epochs: 15,
            early_stop_auc: 0.995,
            checks_per_epoch: 4,
            val_subset: 256,
            max_train_images: 0,
        }
    }
}

/// Synthetic corpus generation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub count_real: usize,
    pub count_gan: usize,
    pub count_diffusion: usize,
    pub count_am: usize,
    pub count_fs: usize,
    pub size: usize,
    pub gan_strength: f64,
    pub diffusion_strength: f64,
    pub am_strength: f64,
    pub fs_strength: f64,
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub test_ratio: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            count_real: 2000,
            count_gan: 2000,
            count_diffusion: 0,
            count_am: 0,
            count_fs: 0,
            size: 64,
            gan_strength: 0.12,
            diffusion_strength: 0.04,
            am_strength: 0.5,
            fs_strength: 0.5,
            train_ratio: 0.806,
            val_ratio: 0.100,
            test_ratio: 0.094,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    Holdout,
    CrossGenerator,
    CrossForgery,
    LevelCoarse,
    LevelForgery,
    LevelGenerator,
    Robustness,
}

impl Protocol {
    pub fn name(&self) -> &'static str {
        match self {
            Protocol::Holdout => "holdout",
            Protocol::CrossGenerator => "cross_generator",
            Protocol::CrossForgery => "cross_forgery",
            Protocol::LevelCoarse => "level_coarse",
            Protocol::LevelForgery => "level_forgery",
            Protocol::LevelGenerator => "level_generator",
            Protocol::Robustness => "robustness",
        }
    }

    pub fn parse(s: &str) -> Option<Protocol> {
        match s {
            "holdout" => Some(Protocol::Holdout),
            "cross_generator" => Some(Protocol::CrossGenerator),
            "cross_forgery" => Some(Protocol::CrossForgery),
            "level_coarse" => Some(Protocol::LevelCoarse),
            "level_forgery" => Some(Protocol::LevelForgery),
            "level_generator" => Some(Protocol::LevelGenerator),
            "robustness" => Some(Protocol::Robustness),
            _ => None,
        }
    }
}

/// Evaluation / protocol-runner settings. Per-cell budgets keep matrix
/// protocols fast; cells are retrained small models, not the main run.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub protocol: Protocol,
    pub cell_epochs: usize,
    pub cell_max_images: usize,
    pub checkpoint: String,
    /// Robustness sweep levels 0..=max_level.
    pub max_level: u32,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            protocol: Protocol::Holdout,
            cell_epochs: 3,
            cell_max_images: 800,
            checkpoint: String::new(),
            max_level: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct DataConfig {
    /// Manifest file path; images resolve relative to its directory.
    pub manifest: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblateAxis {
    Branches,
    Operator,
    Fusion,
    Query,
    Aeca,
    EdgeDepth,
    MaetBlocks,
}

impl AblateAxis {
    pub fn name(&self) -> &'static str {
        match self {
            AblateAxis::Branches => "branches",
            AblateAxis::Operator => "operator",
            AblateAxis::Fusion => "fusion",
            AblateAxis::Query => "query",
            AblateAxis::Aeca => "aeca",
            AblateAxis::EdgeDepth => "edge_depth",
            AblateAxis::MaetBlocks => "maet_blocks",
        }
    }

    pub fn parse(s: &str) -> Option<AblateAxis> {
        match s {
            "branches" => Some(AblateAxis::Branches),
            "operator" => Some(AblateAxis::Operator),
            "fusion" => Some(AblateAxis::Fusion),
            "query" => Some(AblateAxis::Query),
            "aeca" => Some(AblateAxis::Aeca),
            "edge_depth" => Some(AblateAxis::EdgeDepth),
            "maet_blocks" => Some(AblateAxis::MaetBlocks),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblateConfig {
    pub axis: AblateAxis,
    pub epochs: usize,
    pub max_images: usize,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            axis: AblateAxis::Aeca,
            epochs: 3,
            max_images: 600,
        }
    }
}

/// Complete effective configuration for one run.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub model: CaelConfig,
    pub train: TrainConfig,
    pub gen: GenConfig,
    pub eval: EvalConfig,
    pub data: DataConfig,
    pub ablate: AblateConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 1,
            model: CaelConfig::default(),
            train: TrainConfig::default(),
            gen: GenConfig::default(),
            eval: EvalConfig::default(),
            data: DataConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

fn bad(key: &str, value: &str, reason: &str) -> ConfigError {
    ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.to_string(),
    }
}

impl Config {
    /// Apply one `key = value` override. Unknown keys are an error.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "seed" => self.seed = parse_num(key, value)?,
            "model.maet_blocks" => self.model.maet_blocks = parse_num(key, value)?,
            "model.fine_blocks" => self.model.fine_blocks = parse_num(key, value)?,
            "model.coarse_blocks" => self.model.coarse_blocks = parse_num(key, value)?,
            "model.edge_blocks" => self.model.edge_blocks = parse_num(key, value)?,
            "model.cross_attn_blocks" => self.model.cross_attn_blocks = parse_num(key, value)?,
            "model.heads" => self.model.heads = parse_num(key, value)?,
            "model.token_dim" => self.model.token_dim = parse_num(key, value)?,
            "model.input_size" => self.model.input_size = parse_num(key, value)?,
            "model.mlp_ratio" => self.model.mlp_ratio = parse_num(key, value)?,
            "model.fusion" => {
                self.model.fusion_mode = match value {
                    "cross_attention" => FusionMode::CrossAttention,
                    "concatenation" => FusionMode::Concatenation,
                    "summation" => FusionMode::Summation,
                    _ => return Err(bad(key, value, "expected cross_attention|concatenation|summation")),
                }
            }
            "model.query" => {
                self.model.query_mode = match value {
                    "cls" => QueryMode::Cls,
                    "patch" => QueryMode::Patch,
                    "all" => QueryMode::All,
                    _ => return Err(bad(key, value, "expected cls|patch|all")),
                }
            }
            "model.aeca" => {
                self.model.aeca_enabled = match value {
                    "true" | "on" | "1" => true,
                    "false" | "off" | "0" => false,
                    _ => return Err(bad(key, value, "expected true|false")),
                }
            }
            "model.branches" => {
                self.model.branches = BranchSet::parse(value)
                    .ok_or_else(|| bad(key, value, "expected a subset of F, C, E"))?
            }
            "model.operator" => {
                self.model.operator = OperatorKind::parse(value)
                    .ok_or_else(|| bad(key, value, "expected sobel|canny|log|marr_hildreth|dct"))?
            }
            "model.fine_channels" => self.model.fine_channels = parse_num(key, value)?,
            "model.coarse_channels" => self.model.coarse_channels = parse_num(key, value)?,
            "model.classes" => self.model.classes = parse_num(key, value)?,
            "model.preset" => match value {
                "default" => {
                    let classes = self.model.classes;
                    self.model = CaelConfig {
                        classes,
                        input_size: self.model.input_size,
                        ..CaelConfig::default()
                    };
                }
                "small" => {
                    let classes = self.model.classes;
                    self.model = CaelConfig {
                        classes,
                        input_size: self.model.input_size,
                        ..CaelConfig::small()
                    };
                }
                _ => return Err(bad(key, value, "expected default|small")),
            },
            "train.epochs" => self.train.epochs = parse_num(key, value)?,
            "train.batch_size" => self.train.batch_size = parse_num(key, value)?,
            "train.learning_rate" => self.train.learning_rate = parse_num(key, value)?,
            "train.weight_decay" => self.train.weight_decay = parse_num(key, value)?,
            "train.lr_drop_epochs" => self.train.lr_drop_epochs = parse_num(key, value)?,
            "train.early_stop_auc" => self.train.early_stop_auc = parse_num(key, value)?,
            "train.checks_per_epoch" => self.train.checks_per_epoch = parse_num(key, value)?,
            "train.val_subset" => self.train.val_subset = parse_num(key, value)?,
            "train.max_train_images" => self.train.max_train_images = parse_num(key, value)?,
            "gen.count_real" => self.gen.count_real = parse_num(key, value)?,
            "gen.count_gan" => self.gen.count_gan = parse_num(key, value)?,
            "gen.count_diffusion" => self.gen.count_diffusion = parse_num(key, value)?,
            "gen.count_am" => self.gen.count_am = parse_num(key, value)?,
            "gen.count_fs" => self.gen.count_fs = parse_num(key, value)?,
            "gen.size" => self.gen.size = parse_num(key, value)?,
            "gen.gan_strength" => self.gen.gan_strength = parse_num(key, value)?,
            "gen.diffusion_strength" => self.gen.diffusion_strength = parse_num(key, value)?,
            "gen.am_strength" => self.gen.am_strength = parse_num(key, value)?,
            "gen.fs_strength" => self.gen.fs_strength = parse_num(key, value)?,
            "gen.train_ratio" => self.gen.train_ratio = parse_num(key, value)?,
            "gen.val_ratio" => self.gen.val_ratio = parse_num(key, value)?,
            "gen.test_ratio" => self.gen.test_ratio = parse_num(key, value)?,
            "eval.protocol" => {
                self.eval.protocol = Protocol::parse(value)
                    .ok_or_else(|| bad(key, value, "unknown protocol"))?
            }
            "eval.cell_epochs" => self.eval.cell_epochs = parse_num(key, value)?,
            "eval.cell_max_images" => self.eval.cell_max_images = parse_num(key, value)?,
            "eval.checkpoint" => self.eval.checkpoint = value.to_string(),
            "eval.max_level" => self.eval.max_level = parse_num(key, value)?,
            "data.manifest" => self.data.manifest = value.to_string(),
            "ablate.axis" => {
                self.ablate.axis = AblateAxis::parse(value)
                    .ok_or_else(|| bad(key, value, "unknown ablation axis"))?
            }
            "ablate.epochs" => self.ablate.epochs = parse_num(key, value)?,
            "ablate.max_images" => self.ablate.max_images = parse_num(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Parse `key = value` lines over the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or(ConfigError::BadLine { line: i + 1 })?;
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        self.apply_text(&text)
    }

    /// Serialize every effective key in stable order; `apply_text` of the
    /// result reproduces this config exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let m = &self.model;
        let t = &self.train;
        let g = &self.gen;
        let e = &self.eval;
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "model.maet_blocks = {}", m.maet_blocks);
        let _ = writeln!(s, "model.fine_blocks = {}", m.fine_blocks);
        let _ = writeln!(s, "model.coarse_blocks = {}", m.coarse_blocks);
        let _ = writeln!(s, "model.edge_blocks = {}", m.edge_blocks);
        let _ = writeln!(s, "model.cross_attn_blocks = {}", m.cross_attn_blocks);
        let _ = writeln!(s, "model.heads = {}", m.heads);
        let _ = writeln!(s, "model.token_dim = {}", m.token_dim);
        let _ = writeln!(s, "model.input_size = {}", m.input_size);
        let _ = writeln!(s, "model.mlp_ratio = {}", m.mlp_ratio);
        let _ = writeln!(s, "model.fusion = {}", m.fusion_mode.name());
        let _ = writeln!(s, "model.query = {}", m.query_mode.name());
        let _ = writeln!(s, "model.aeca = {}", m.aeca_enabled);
        let _ = writeln!(s, "model.branches = {}", m.branches.name());
        let _ = writeln!(s, "model.operator = {}", m.operator.name());
        let _ = writeln!(s, "model.fine_channels = {}", m.fine_channels);
        let _ = writeln!(s, "model.coarse_channels = {}", m.coarse_channels);
        let _ = writeln!(s, "model.classes = {}", m.classes);
        let _ = writeln!(s, "train.epochs = {}", t.epochs);
        let _ = writeln!(s, "train.batch_size = {}", t.batch_size);
        let _ = writeln!(s, "train.learning_rate = {}", t.learning_rate);
        let _ = writeln!(s, "train.weight_decay = {}", t.weight_decay);
        let _ = writeln!(s, "train.lr_drop_epochs = {}", t.lr_drop_epochs);
        let _ = writeln!(s, "train.early_stop_auc = {}", t.early_stop_auc);
        let _ = writeln!(s, "train.checks_per_epoch = {}", t.checks_per_epoch);
        let _ = writeln!(s, "train.val_subset = {}", t.val_subset);
        let _ = writeln!(s, "train.max_train_images = {}", t.max_train_images);
        let _ = writeln!(s, "gen.count_real = {}", g.count_real);
        let _ = writeln!(s, "gen.count_gan = {}", g.count_gan);
        let _ = writeln!(s, "gen.count_diffusion = {}", g.count_diffusion);
        let _ = writeln!(s, "gen.count_am = {}", g.count_am);
        let _ = writeln!(s, "gen.count_fs = {}", g.count_fs);
        let _ = writeln!(s, "gen.size = {}", g.size);
        let _ = writeln!(s, "gen.gan_strength = {}", g.gan_strength);
        let _ = writeln!(s, "gen.diffusion_strength = {}", g.diffusion_strength);
        let _ = writeln!(s, "gen.am_strength = {}", g.am_strength);
        let _ = writeln!(s, "gen.fs_strength = {}", g.fs_strength);
        let _ = writeln!(s, "gen.train_ratio = {}", g.train_ratio);
        let _ = writeln!(s, "gen.val_ratio = {}", g.val_ratio);
        let _ = writeln!(s, "gen.test_ratio = {}", g.test_ratio);
        let _ = writeln!(s, "eval.protocol = {}", e.protocol.name());
        let _ = writeln!(s, "eval.cell_epochs = {}", e.cell_epochs);
        let _ = writeln!(s, "eval.cell_max_images = {}", e.cell_max_images);
        let _ = writeln!(s, "eval.checkpoint = {}", e.checkpoint);
        let _ = writeln!(s, "eval.max_level = {}", e.max_level);
        let _ = writeln!(s, "data.manifest = {}", self.data.manifest);
        let _ = writeln!(s, "ablate.axis = {}", self.ablate.axis.name());
        let _ = writeln!(s, "ablate.epochs = {}", self.ablate.epochs);
        let _ = writeln!(s, "ablate.max_images = {}", self.ablate.max_images);
        s
    }

    /// Stable fingerprint of the effective configuration.
    pub fn fingerprint(&self) -> u64 {
        crate::rng::stream_hash(&self.to_text())
    }
}
