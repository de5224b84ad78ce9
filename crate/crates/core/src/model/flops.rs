//! Forward-pass FLOP accounting.
//!
//! [`forward_flops`] mirrors, op for op, the counting conventions of the
//! tape (`2*m*k*n` per matmul, `5n` softmax, `8n` layer norm, `10n` GELU,
//! `n` elementwise); a test asserts exact equality against an instrumented
//! run. [`score_step`] isolates the attention-score computation for the
//! linear-vs-quadratic comparison between class-token queries and full
//! self-attention.

use crate::config::{CaelConfig, FusionMode, QueryMode};
use crate::model::params::{
    coarse_stem_plan, edge_stem_plan, fine_stem_plan, mlp_hidden,
};
use crate::tensor::{Scope, Tape};
use std::time::{Duration, Instant};

fn conv_stage_flops(b: u64, cin: u64, cout: u64, side: u64) -> u64 {
    // stride-2 3x3 conv then GELU
    2 * b * cout * side * side * cin * 9 + 10 * b * cout * side * side
}

fn linear_flops(rows: u64, din: u64, dout: u64) -> u64 {
    2 * rows * din * dout + rows * dout
}

fn encoder_flops(b: u64, t: u64, d: u64, heads: u64, mlp_ratio: f64) -> u64 {
    let hidden = mlp_hidden(d as usize, mlp_ratio) as u64;
    let mut f = 0;
    f += 8 * b * t * d; // ln1
    f += 4 * linear_flops(b * t, d, d); // q,k,v,out
    f += 2 * b * t * t * d; // scores
    f += b * heads * t * t; // scale
    f += 5 * b * heads * t * t; // softmax
    f += 2 * b * t * t * d; // context
    f += b * t * d; // residual
    f += 8 * b * t * d; // ln2
    f += linear_flops(b * t, d, hidden);
    f += 10 * b * t * hidden; // gelu
    f += linear_flops(b * t, hidden, d);
    f += b * t * d; // residual
    f
}

fn mha_query_flops(b: u64, qr: u64, kv: u64, d: u64, d_out: u64, heads: u64) -> u64 {
    let mut f = 0;
    f += linear_flops(b * qr, d, d); // q
    f += 2 * linear_flops(b * kv, d, d); // k, v
    f += 2 * b * qr * kv * d; // scores
    f += b * heads * qr * kv; // scale
    f += 5 * b * heads * qr * kv; // softmax
    f += 2 * b * qr * kv * d; // context
    f += linear_flops(b * qr, d, d_out); // out
    f
}

/// Exact forward-pass FLOPs for a batch, matching the tape instrumentation.
pub fn forward_flops(cfg: &CaelConfig, batch: usize) -> u64 {
    let b = batch as u64;
    let d = cfg.token_dim as u64;
    let d2 = cfg.wide_dim() as u64;
    let n = cfg.tokens() as u64;
    let t = n + 1;
    let h = cfg.input_size as u64;
    let heads = cfg.heads as u64;
    let br = cfg.branches;
    let mut f = 0u64;

    // stems
    if br.fine {
        let plan = fine_stem_plan(cfg);
        for (i, win) in plan.windows(2).enumerate() {
            f += conv_stage_flops(b, win[0] as u64, win[1] as u64, h >> (i + 1));
        }
    }
    if br.coarse {
        let plan = coarse_stem_plan(cfg);
        for (i, win) in plan.windows(2).enumerate() {
            f += conv_stage_flops(b, win[0] as u64, win[1] as u64, h >> (i + 1));
        }
    }
    if br.edge {
        let plan = edge_stem_plan(cfg);
        for (i, win) in plan.windows(2).enumerate() {
            f += conv_stage_flops(b, win[0] as u64, win[1] as u64, h >> (i + 1));
        }
    }

    // tokenization: projection + positional add
    let feat = cfg.patch_feature_dim() as u64;
    if br.fine {
        f += linear_flops(b * n, cfg.fine_channels as u64, d) + b * t * d;
    }
    if br.coarse {
        f += linear_flops(b * n, feat, d2) + b * t * d2;
    }
    if br.edge {
        f += linear_flops(b * n, feat, d2) + b * t * d2;
    }

    // MAET blocks
    for _ in 0..cfg.maet_blocks {
        if br.fine {
            f += cfg.fine_blocks as u64 * encoder_flops(b, t, d, heads, cfg.mlp_ratio);
        }
        if br.coarse {
            f += cfg.coarse_blocks as u64 * encoder_flops(b, t, d2, heads, cfg.mlp_ratio);
        }
        if br.edge {
            f += cfg.edge_blocks as u64 * encoder_flops(b, t, d2, heads, cfg.mlp_ratio);
        }
        if br.fine && br.coarse {
            for _ in 0..cfg.cross_attn_blocks {
                // f2c: project fine cls to 2d, attend over coarse patches
                f += linear_flops(b, d, d2);
                f += mha_query_flops(b, 1, n, d2, d2, heads);
                f += linear_flops(b, d2, d); // back
                f += b * d; // residual
                // c2f
                f += linear_flops(b, d2, d);
                f += mha_query_flops(b, 1, n, d, d, heads);
                f += linear_flops(b, d, d2);
                f += b * d2;
            }
        }
        if br.edge && cfg.aeca_enabled && (br.fine || br.coarse) {
            match cfg.fusion_mode {
                FusionMode::CrossAttention => {
                    let qr = match cfg.query_mode {
                        QueryMode::Cls => 1,
                        QueryMode::Patch => n,
                        QueryMode::All => t,
                    };
                    let mut side = |dim_in: u64, attn_d: u64| {
                        f += linear_flops(b, d2, attn_d); // cls projection
                        if !matches!(cfg.query_mode, QueryMode::Cls) {
                            f += linear_flops(b * n, d2, attn_d); // patch projections
                        }
                        f += mha_query_flops(b, qr, t, attn_d, d2, heads);
                        if qr > 1 {
                            f += b * qr * d2; // pool to one row
                        }
                        f += b * d2; // residual onto the edge class token
                        let _ = dim_in;
                    };
                    if br.fine {
                        side(d2, d);
                    }
                    if br.coarse {
                        side(d2, d2);
                    }
                    if br.fine && br.coarse {
                        f += b * d2; // combined row 0
                    }
                }
                FusionMode::Summation => {
                    if br.fine {
                        f += b * t * d; // pooled rows
                        f += linear_flops(b, d, d2);
                        f += b * d2;
                    }
                    if br.coarse {
                        f += b * t * d2;
                        f += linear_flops(b, d2, d2);
                        f += b * d2;
                    }
                }
                FusionMode::Concatenation => {
                    let mut cat = d2;
                    if br.fine {
                        f += b * t * d;
                        cat += d;
                    }
                    if br.coarse {
                        f += b * t * d2;
                        cat += d2;
                    }
                    f += linear_flops(b, cat, d2);
                    f += b * d2;
                }
            }
        }
    }

    // experts and their unweighted mean
    let classes = cfg.classes as u64;
    let mut n_branches = 0u64;
    if br.fine {
        f += 8 * b * d + linear_flops(b, d, classes);
        n_branches += 1;
    }
    if br.coarse {
        f += 8 * b * d2 + linear_flops(b, d2, classes);
        n_branches += 1;
    }
    if br.edge {
        f += 8 * b * d2 + linear_flops(b, d2, classes);
        n_branches += 1;
    }
    f += (n_branches - 1) * b * classes; // sum
    f += b * classes; // mean scale
    f
}

/// Attention-score FLOPs for `query_rows` queries over `n + 1` keys across
/// all heads (the q·kᵀ product only).
pub fn score_flops(n: usize, dim_per_head: usize, heads: usize, query_rows: usize) -> u64 {
    2 * (heads * query_rows * (n + 1) * dim_per_head) as u64
}

/// Run just the score computation on a tape and report (instrumented flops,
/// wall time) for `reps` repetitions.
pub fn score_step(
    n: usize,
    dim_per_head: usize,
    heads: usize,
    query_rows: usize,
    reps: usize,
) -> (u64, Duration) {
    let t = n + 1;
    let mut tape = Tape::new();
    let q = tape.constant(vec![0.01; heads * query_rows * dim_per_head], vec![
        heads,
        query_rows,
        dim_per_head,
    ]);
    let k = tape.constant(vec![0.02; heads * t * dim_per_head], vec![heads, t, dim_per_head]);
    tape.set_scope(Scope::AttnScores);
    let start = Instant::now();
    for _ in 0..reps {
        tape.bmm(q, k, true).expect("score bmm");
    }
    let elapsed = start.elapsed();
    tape.set_scope(Scope::General);
    (tape.flops(Scope::AttnScores) / reps as u64, elapsed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::BranchSet;
    use crate::model::{forward, ParamSet, ParamVars};
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    fn instrumented(cfg: &CaelConfig, batch: usize) -> u64 {
        let set = ParamSet::init(cfg, 1);
        let mut rng = Rng::from_seed(2);
        let hw = cfg.input_size * cfg.input_size;
        let app = Tensor::new(
            (0..batch * 3 * hw).map(|_| rng.uniform()).collect(),
            vec![batch, 3, cfg.input_size, cfg.input_size],
        );
        let edg = Tensor::new(
            (0..batch * hw).map(|_| rng.uniform()).collect(),
            vec![batch, 1, cfg.input_size, cfg.input_size],
        );
        let mut tape = Tape::new();
        let pv = ParamVars::enroll(&mut tape, &set);
        let a = tape.leaf(&app);
        let e = tape.leaf(&edg);
        forward(&mut tape, &pv, cfg, a, e).unwrap();
        tape.total_flops()
    }

    #[test]
    fn analytic_matches_instrumented_exactly() {
        let base = CaelConfig {
            maet_blocks: 2,
            fine_blocks: 1,
            coarse_blocks: 2,
            edge_blocks: 1,
            cross_attn_blocks: 1,
            heads: 2,
            token_dim: 8,
            input_size: 64,
            fine_channels: 8,
            coarse_channels: 4,
            ..CaelConfig::default()
        };
        let variants = [
            base.clone(),
            CaelConfig {
                query_mode: QueryMode::All,
                ..base.clone()
            },
            CaelConfig {
                query_mode: QueryMode::Patch,
                ..base.clone()
            },
            CaelConfig {
                fusion_mode: FusionMode::Summation,
                ..base.clone()
            },
            CaelConfig {
                fusion_mode: FusionMode::Concatenation,
                ..base.clone()
            },
            CaelConfig {
                branches: BranchSet::parse("FC").unwrap(),
                ..base.clone()
            },
            CaelConfig {
                branches: BranchSet::parse("FE").unwrap(),
                ..base.clone()
            },
            CaelConfig {
                branches: BranchSet::parse("E").unwrap(),
                ..base
            },
        ];
        for (i, cfg) in variants.iter().enumerate() {
            for batch in [1usize, 3] {
                assert_eq!(
                    forward_flops(cfg, batch),
                    instrumented(cfg, batch),
                    "variant {i} batch {batch}"
                );
            }
        }
    }

    #[test]
    fn class_query_scores_scale_linearly_in_tokens() {
        let cls_49 = score_flops(49, 24, 8, 1);
        let cls_196 = score_flops(196, 24, 8, 1);
        let full_49 = score_flops(49, 24, 8, 50);
        let full_196 = score_flops(196, 24, 8, 197);
        let r_cls = cls_196 as f64 / cls_49 as f64;
        let r_full = full_196 as f64 / full_49 as f64;
        assert!((r_cls - 197.0 / 50.0).abs() < 1e-12);
        assert!((r_full - (197.0 / 50.0) * (197.0 / 50.0)).abs() < 1e-12);
    }

    #[test]
    fn score_step_counts_match_formula() {
        let (flops, _) = score_step(49, 24, 8, 1, 3);
        assert_eq!(flops, score_flops(49, 24, 8, 1));
        let (flops, _) = score_step(49, 24, 8, 50, 3);
        assert_eq!(flops, score_flops(49, 24, 8, 50));
    }
}
