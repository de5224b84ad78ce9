//! Feature alignment: convolutional stems for the appearance and edge
//! inputs, then tokenization with class tokens and positional embeddings.
//!
//! The fine stem downsamples x32 (five stride-2 stages) and each of its grid
//! cells becomes one token of dimension d. The coarse and edge stems
//! downsample x4 (two stride-2 stages) and their grids are cut into 8x8
//! patches projected to 2d. Both routes produce (H/32)^2 patch tokens, so
//! every branch shares the same token count.

use crate::config::CaelConfig;
use crate::error::TensorError;
use crate::model::params::{coarse_stem_plan, edge_stem_plan, fine_stem_plan};
use crate::model::ParamVars;
use crate::tensor::{Tape, Var};

pub struct StemOutput {
    /// (B, fine_channels, H/32, W/32)
    pub fine: Option<Var>,
    /// (B, coarse_channels, H/4, W/4)
    pub coarse: Option<Var>,
    /// (B, coarse_channels, H/4, W/4)
    pub edge_local: Option<Var>,
}

pub struct TokenSets {
    /// (B, n+1, d)
    pub fine: Option<Var>,
    /// (B, n+1, 2d)
    pub coarse: Option<Var>,
    /// (B, n+1, 2d)
    pub edge: Option<Var>,
}

fn conv_stack(
    tape: &mut Tape,
    pv: &ParamVars,
    prefix: &str,
    stages: usize,
    mut x: Var,
) -> Result<Var, TensorError> {
    for i in 0..stages {
        let w = pv.v(&format!("{prefix}.{i}.w"));
        let b = pv.v(&format!("{prefix}.{i}.b"));
        x = tape.conv2d(x, w, Some(b), 2, 1)?;
        x = tape.gelu(x);
    }
    Ok(x)
}

/// Run the stems for every active branch. `appearance` is (B,3,H,W) and
/// `edge` is (B,1,H,W); H = W = cfg.input_size.
pub fn run_stems(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &CaelConfig,
    appearance: Var,
    edge: Var,
) -> Result<StemOutput, TensorError> {
    let shape = tape.shape(appearance).to_vec();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(TensorError::InvalidShape {
            op: "run_stems",
            shape,
            reason: "expected (B,3,H,W) appearance input".into(),
        });
    }
    let (h, w) = (shape[2], shape[3]);
    if h != w || h != cfg.input_size || h % 32 != 0 {
        return Err(TensorError::InvalidShape {
            op: "run_stems",
            shape,
            reason: format!(
                "input must be square {0}x{0} with side a multiple of 32",
                cfg.input_size
            ),
        });
    }
    let fine = if cfg.branches.fine {
        Some(conv_stack(
            tape,
            pv,
            "stem.fine",
            fine_stem_plan(cfg).len() - 1,
            appearance,
        )?)
    } else {
        None
    };
    let coarse = if cfg.branches.coarse {
        Some(conv_stack(
            tape,
            pv,
            "stem.coarse",
            coarse_stem_plan(cfg).len() - 1,
            appearance,
        )?)
    } else {
        None
    };
    let edge_local = if cfg.branches.edge {
        let es = tape.shape(edge).to_vec();
        if es.len() != 4 || es[1] != 1 || es[2] != h || es[3] != w {
            return Err(TensorError::InvalidShape {
                op: "run_stems",
                shape: es,
                reason: "edge input must be (B,1,H,W) matching the appearance".into(),
            });
        }
        Some(conv_stack(
            tape,
            pv,
            "stem.edge",
            edge_stem_plan(cfg).len() - 1,
            edge,
        )?)
    } else {
        None
    };
    Ok(StemOutput {
        fine,
        coarse,
        edge_local,
    })
}

fn branch_tokens(
    tape: &mut Tape,
    pv: &ParamVars,
    branch: &str,
    grid: Var,
    patch: usize,
) -> Result<Var, TensorError> {
    let batch = tape.shape(grid)[0];
    let toks = tape.patches(grid, patch)?;
    let proj = tape.linear(
        toks,
        pv.v(&format!("tok.{branch}.proj.w")),
        pv.v(&format!("tok.{branch}.proj.b")),
    )?;
    let cls = tape.repeat0(pv.v(&format!("tok.{branch}.cls")), batch)?;
    let with_cls = tape.concat(&[cls, proj], 1)?;
    tape.add_broadcast(with_cls, pv.v(&format!("tok.{branch}.pos")))
}

/// Flatten stem grids into token sets: class token at row 0, patch tokens
/// after, positional embeddings added.
pub fn tokenize(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &CaelConfig,
    stems: &StemOutput,
) -> Result<TokenSets, TensorError> {
    let fine = match stems.fine {
        Some(grid) => Some(branch_tokens(tape, pv, "fine", grid, 1)?),
        None => None,
    };
    let coarse = match stems.coarse {
        Some(grid) => Some(branch_tokens(tape, pv, "coarse", grid, 8)?),
        None => None,
    };
    let edge = match stems.edge_local {
        Some(grid) => Some(branch_tokens(tape, pv, "edge", grid, 8)?),
        None => None,
    };
    // every branch must carry cfg.tokens() patch tokens plus the class row
    for v in [fine, coarse, edge].into_iter().flatten() {
        let rows = tape.shape(v)[1];
        if rows != cfg.tokens() + 1 {
            return Err(TensorError::InvalidShape {
                op: "tokenize",
                shape: tape.shape(v).to_vec(),
                reason: format!("expected {} token rows", cfg.tokens() + 1),
            });
        }
    }
    Ok(TokenSets { fine, coarse, edge })
}
