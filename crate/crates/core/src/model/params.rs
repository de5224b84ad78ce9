//! Parameter registry. One walker enumerates every parameter the forward
//! pass uses, in a stable order; initialization, analytic parameter counts,
//! and checkpoints all derive from it, so they can never disagree.
//!
//! Initialization is truncated normal (std 0.02) for projections, class
//! tokens, and positional embeddings; zeros for biases; ones for norm gains.
//! Each parameter draws from its own named stream, so toggling one module
//! never shifts another's initial values.

use crate::config::{CaelConfig, FusionMode};
use crate::rng::Rng;
use crate::tensor::Tensor;
use std::collections::HashMap;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    TruncNormal,
    /// Fan-in scaled normal for the conv stems, so stacked stages preserve
    /// signal magnitude instead of attenuating the image into the noise
    /// floor of the positional embeddings.
    HeConv { fan_in: usize },
    Zeros,
    Ones,
}

/// Fine stem channel plan: input RGB through five stride-2 stages.
pub fn fine_stem_plan(cfg: &CaelConfig) -> Vec<usize> {
    vec![3, 16, 32, 64, 128, cfg.fine_channels]
}

/// Coarse stem channel plan: input RGB through two stride-2 stages.
pub fn coarse_stem_plan(cfg: &CaelConfig) -> Vec<usize> {
    vec![3, 32, cfg.coarse_channels]
}

/// Edge stem channel plan: single-channel edge map, two stride-2 stages.
pub fn edge_stem_plan(cfg: &CaelConfig) -> Vec<usize> {
    vec![1, 32, cfg.coarse_channels]
}

pub fn mlp_hidden(dim: usize, ratio: f64) -> usize {
    (dim as f64 * ratio).round() as usize
}

fn linear<F: FnMut(String, Vec<usize>, Init)>(prefix: &str, din: usize, dout: usize, f: &mut F) {
    f(format!("{prefix}.w"), vec![din, dout], Init::TruncNormal);
    f(format!("{prefix}.b"), vec![dout], Init::Zeros);
}

fn encoder_block<F: FnMut(String, Vec<usize>, Init)>(
    prefix: &str,
    dim: usize,
    mlp_ratio: f64,
    f: &mut F,
) {
    let hidden = mlp_hidden(dim, mlp_ratio);
    f(format!("{prefix}.ln1.gamma"), vec![dim], Init::Ones);
    f(format!("{prefix}.ln1.beta"), vec![dim], Init::Zeros);
    for name in ["q", "k", "v", "out"] {
        linear(&format!("{prefix}.attn.{name}"), dim, dim, f);
    }
    f(format!("{prefix}.ln2.gamma"), vec![dim], Init::Ones);
    f(format!("{prefix}.ln2.beta"), vec![dim], Init::Zeros);
    linear(&format!("{prefix}.mlp.fc1"), dim, hidden, f);
    linear(&format!("{prefix}.mlp.fc2"), hidden, dim, f);
}

fn attn_kernel<F: FnMut(String, Vec<usize>, Init)>(
    prefix: &str,
    dim: usize,
    out_dim: usize,
    f: &mut F,
) {
    for name in ["q", "k", "v"] {
        linear(&format!("{prefix}.{name}"), dim, dim, f);
    }
    linear(&format!("{prefix}.out"), dim, out_dim, f);
}

/// Enumerate every (name, shape, init) in registry order.
pub fn walk<F: FnMut(String, Vec<usize>, Init)>(cfg: &CaelConfig, f: &mut F) {
    let d = cfg.token_dim;
    let d2 = cfg.wide_dim();
    let n = cfg.tokens();
    let br = cfg.branches;

    // stems
    if br.fine {
        let plan = fine_stem_plan(cfg);
        for i in 0..plan.len() - 1 {
            f(
                format!("stem.fine.{i}.w"),
                vec![plan[i + 1], plan[i], 3, 3],
                Init::HeConv { fan_in: plan[i] * 9 },
            );
            f(format!("stem.fine.{i}.b"), vec![plan[i + 1]], Init::Zeros);
        }
    }
    if br.coarse {
        let plan = coarse_stem_plan(cfg);
        for i in 0..plan.len() - 1 {
            f(
                format!("stem.coarse.{i}.w"),
                vec![plan[i + 1], plan[i], 3, 3],
                Init::HeConv { fan_in: plan[i] * 9 },
            );
            f(format!("stem.coarse.{i}.b"), vec![plan[i + 1]], Init::Zeros);
        }
    }
    if br.edge {
        let plan = edge_stem_plan(cfg);
        for i in 0..plan.len() - 1 {
            f(
                format!("stem.edge.{i}.w"),
                vec![plan[i + 1], plan[i], 3, 3],
                Init::HeConv { fan_in: plan[i] * 9 },
            );
            f(format!("stem.edge.{i}.b"), vec![plan[i + 1]], Init::Zeros);
        }
    }

    // tokenization: projection, class token, positional embedding
    if br.fine {
        linear("tok.fine.proj", cfg.fine_channels, d, f);
        f("tok.fine.cls".into(), vec![1, 1, d], Init::TruncNormal);
        f("tok.fine.pos".into(), vec![1, n + 1, d], Init::TruncNormal);
    }
    if br.coarse {
        linear("tok.coarse.proj", cfg.patch_feature_dim(), d2, f);
        f("tok.coarse.cls".into(), vec![1, 1, d2], Init::TruncNormal);
        f("tok.coarse.pos".into(), vec![1, n + 1, d2], Init::TruncNormal);
    }
    if br.edge {
        linear("tok.edge.proj", cfg.patch_feature_dim(), d2, f);
        f("tok.edge.cls".into(), vec![1, 1, d2], Init::TruncNormal);
        f("tok.edge.pos".into(), vec![1, n + 1, d2], Init::TruncNormal);
    }

    // MAET blocks
    for k in 0..cfg.maet_blocks {
        if br.fine {
            for s in 0..cfg.fine_blocks {
                encoder_block(&format!("maet.{k}.fine.{s}"), d, cfg.mlp_ratio, f);
            }
        }
        if br.coarse {
            for l in 0..cfg.coarse_blocks {
                encoder_block(&format!("maet.{k}.coarse.{l}"), d2, cfg.mlp_ratio, f);
            }
        }
        if br.edge {
            for e in 0..cfg.edge_blocks {
                encoder_block(&format!("maet.{k}.edge.{e}"), d2, cfg.mlp_ratio, f);
            }
        }
        if br.fine && br.coarse {
            for i in 0..cfg.cross_attn_blocks {
                let p = format!("maet.{k}.mgca.{i}");
                linear(&format!("{p}.f2c.proj"), d, d2, f);
                attn_kernel(&format!("{p}.f2c"), d2, d2, f);
                linear(&format!("{p}.f2c.back"), d2, d, f);
                linear(&format!("{p}.c2f.proj"), d2, d, f);
                attn_kernel(&format!("{p}.c2f"), d, d, f);
                linear(&format!("{p}.c2f.back"), d, d2, f);
            }
        }
        if br.edge && cfg.aeca_enabled {
            match cfg.fusion_mode {
                FusionMode::CrossAttention => {
                    if br.fine {
                        linear(&format!("maet.{k}.aeca.f_proj"), d2, d, f);
                        attn_kernel(&format!("maet.{k}.aeca.fine"), d, d2, f);
                    }
                    if br.coarse {
                        linear(&format!("maet.{k}.aeca.c_proj"), d2, d2, f);
                        attn_kernel(&format!("maet.{k}.aeca.coarse"), d2, d2, f);
                    }
                }
                FusionMode::Summation => {
                    if br.fine {
                        linear(&format!("maet.{k}.fuse.f_pool"), d, d2, f);
                    }
                    if br.coarse {
                        linear(&format!("maet.{k}.fuse.c_pool"), d2, d2, f);
                    }
                }
                FusionMode::Concatenation => {
                    let cat = d2
                        + if br.fine { d } else { 0 }
                        + if br.coarse { d2 } else { 0 };
                    linear(&format!("maet.{k}.fuse.cat"), cat, d2, f);
                }
            }
        }
    }

    // experts
    let expert = |name: &str, dim: usize, f: &mut F| {
        f(format!("expert.{name}.ln.gamma"), vec![dim], Init::Ones);
        f(format!("expert.{name}.ln.beta"), vec![dim], Init::Zeros);
        linear(&format!("expert.{name}.head"), dim, cfg.classes, f);
    };
    if br.fine {
        expert("fine", d, f);
    }
    if br.coarse {
        expert("coarse", d2, f);
    }
    if br.edge {
        expert("edge", d2, f);
    }
}

/// Total trainable parameters for a configuration.
pub fn param_count(cfg: &CaelConfig) -> u64 {
    let mut total = 0u64;
    walk(cfg, &mut |_, shape, _| {
        total += shape.iter().product::<usize>() as u64;
    });
    total
}

/// Materialized parameters plus name index. Cloning is shallow until a
/// tensor is mutated (values are `Arc`-shared).
#[derive(Clone)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn init(cfg: &CaelConfig, seed: u64) -> Self {
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        walk(cfg, &mut |name, shape, init| {
            let numel: usize = shape.iter().product();
            let data = match init {
                Init::Zeros => vec![0.0; numel],
                Init::Ones => vec![1.0; numel],
                Init::TruncNormal => {
                    let mut rng = Rng::derive_named(seed, &name);
                    (0..numel).map(|_| rng.truncated_normal(INIT_STD)).collect()
                }
                Init::HeConv { fan_in } => {
                    let std = (2.0 / fan_in as f64).sqrt();
                    let mut rng = Rng::derive_named(seed, &name);
                    (0..numel).map(|_| rng.truncated_normal(std)).collect()
                }
            };
            names.push(name);
            tensors.push(Tensor::new(data, shape).with_grad());
        });
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        ParamSet {
            names,
            tensors,
            index,
        }
    }

    /// Rebuild a registry from checkpointed (name, tensor) pairs, verifying
    /// that names and shapes match what `cfg` walks.
    pub fn from_parts(
        cfg: &CaelConfig,
        names: Vec<String>,
        tensors: Vec<Tensor>,
    ) -> Result<Self, String> {
        let mut expect: Vec<(String, Vec<usize>)> = Vec::new();
        walk(cfg, &mut |name, shape, _| expect.push((name, shape)));
        if expect.len() != names.len() {
            return Err(format!(
                "checkpoint holds {} parameters, config expects {}",
                names.len(),
                expect.len()
            ));
        }
        for (i, (en, es)) in expect.iter().enumerate() {
            if &names[i] != en {
                return Err(format!(
                    "parameter {i} is '{}', config expects '{en}'",
                    names[i]
                ));
            }
            if &tensors[i].shape != es {
                return Err(format!(
                    "parameter '{en}' has shape {:?}, config expects {es:?}",
                    tensors[i].shape
                ));
            }
        }
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Ok(ParamSet {
            names,
            tensors,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"));
        &mut self.tensors[i]
    }

    pub fn total_values(&self) -> u64 {
        self.tensors.iter().map(|t| t.numel() as u64).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::BranchSet;

    #[test]
    fn registry_matches_analytic_count() {
        for cfg in [CaelConfig::small(), CaelConfig::default()] {
            let set = ParamSet::init(&cfg, 1);
            assert_eq!(set.total_values(), param_count(&cfg));
        }
    }

    #[test]
    fn count_affine_in_each_depth_knob() {
        let base = CaelConfig {
            input_size: 224,
            ..CaelConfig::default()
        };
        // constant successive differences in E, K, S, L, N individually
        let knobs: [(&str, fn(&mut CaelConfig, usize)); 5] = [
            ("E", |c, v| c.edge_blocks = v),
            ("K", |c, v| c.maet_blocks = v),
            ("S", |c, v| c.fine_blocks = v),
            ("L", |c, v| c.coarse_blocks = v),
            ("N", |c, v| c.cross_attn_blocks = v),
        ];
        for (name, set) in knobs {
            let counts: Vec<u64> = (1..=4)
                .map(|v| {
                    let mut c = base.clone();
                    set(&mut c, v);
                    param_count(&c)
                })
                .collect();
            let d0 = counts[1] - counts[0];
            for w in counts.windows(2) {
                assert_eq!(w[1] - w[0], d0, "non-affine in {name}: {counts:?}");
            }
        }
    }

    #[test]
    fn edge_depth_delta_is_k_encoder_blocks() {
        let cfg = CaelConfig {
            input_size: 224,
            ..CaelConfig::default()
        };
        let mut e3 = cfg.clone();
        e3.edge_blocks = 3;
        let mut e4 = cfg.clone();
        e4.edge_blocks = 4;
        let delta = param_count(&e4) - param_count(&e3);
        // one 2d-wide encoder block per MAET block
        let d2 = cfg.wide_dim();
        let hidden = mlp_hidden(d2, cfg.mlp_ratio);
        let one_block = (4 * (d2 * d2 + d2) + 4 * d2 + d2 * hidden + hidden + hidden * d2 + d2)
            as u64;
        assert_eq!(delta, cfg.maet_blocks as u64 * one_block);
    }

    #[test]
    fn branch_ablation_prunes_parameters() {
        let full = param_count(&CaelConfig::default());
        let fc = param_count(&CaelConfig {
            branches: BranchSet::parse("FC").unwrap(),
            ..CaelConfig::default()
        });
        let f_only = param_count(&CaelConfig {
            branches: BranchSet::parse("F").unwrap(),
            ..CaelConfig::default()
        });
        assert!(f_only < fc && fc < full);
    }

    #[test]
    fn query_mode_does_not_change_count() {
        use crate::config::QueryMode;
        let base = CaelConfig::default();
        let counts: Vec<u64> = [QueryMode::Cls, QueryMode::Patch, QueryMode::All]
            .into_iter()
            .map(|q| {
                param_count(&CaelConfig {
                    query_mode: q,
                    ..base.clone()
                })
            })
            .collect();
        assert_eq!(counts[0], counts[1]);
        assert_eq!(counts[1], counts[2]);
    }

    #[test]
    fn init_is_per_name_stable() {
        // toggling edge depth must not shift fine-branch initial values
        let a = ParamSet::init(&CaelConfig::small(), 7);
        let mut cfg = CaelConfig::small();
        cfg.edge_blocks = 2;
        let b = ParamSet::init(&cfg, 7);
        let name = "maet.0.fine.0.attn.q.w";
        assert_eq!(&**a.get(name).data, &**b.get(name).data);
    }
}
