//! The detector: multi-grained appearance encoders, an edge encoder,
//! CrossViT-style class-token exchange between the appearance granularities,
//! and appearance-edge cross-attention (AECA), stacked K times, with one
//! expert head per branch.

pub mod flops;
pub mod params;

use crate::align;
use crate::config::{CaelConfig, FusionMode, QueryMode};
use crate::error::TensorError;
use crate::image::edge::edge_transform;
use crate::image::Image;
use crate::tensor::{Scope, Tape, Tensor, Var};
use params::ParamSet;

type Result<T> = std::result::Result<T, TensorError>;

/// Parameters enrolled on a tape for one forward pass.
pub struct ParamVars<'a> {
    pub set: &'a ParamSet,
    pub vars: Vec<Var>,
}

impl<'a> ParamVars<'a> {
    pub fn enroll(tape: &mut Tape, set: &'a ParamSet) -> Self {
        let vars = set.tensors.iter().map(|t| tape.leaf(t)).collect();
        ParamVars { set, vars }
    }

    pub fn v(&self, name: &str) -> Var {
        self.vars[self
            .set
            .position(name)
            .unwrap_or_else(|| panic!("forward referenced unknown parameter '{name}'"))]
    }
}

/// Record of one AECA application, for structural audits.
pub struct AecaTrace {
    /// Fused class token from the fine side, including the edge-class
    /// residual (absent when the fine branch is off or fusion is not
    /// cross-attention).
    pub cls_ef: Option<Var>,
    /// Fused class token from the coarse side.
    pub cls_ec: Option<Var>,
    /// Edge patch tokens entering the module.
    pub edge_patches_in: Var,
    /// Full (n+1)-row output.
    pub output: Var,
}

/// Everything the forward pass exposes for inspection.
#[derive(Default)]
pub struct Trace {
    /// Every attention softmax output (rows must each sum to 1).
    pub attention_rows: Vec<Var>,
    pub aeca: Vec<AecaTrace>,
}

pub struct Outputs {
    /// Mean of the active expert logits, (B, classes).
    pub logits: Var,
    /// Per-branch expert logits.
    pub branch_logits: Vec<(&'static str, Var)>,
    pub trace: Trace,
}

fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec(); // (B, t, D)
    let dm = s[2] / heads;
    let r = tape.reshape(x, &[s[0], s[1], heads, dm])?;
    let p = tape.permute(r, &[0, 2, 1, 3])?;
    tape.reshape(p, &[s[0] * heads, s[1], dm])
}

fn merge_heads(tape: &mut Tape, x: Var, batch: usize, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec(); // (B*m, t, dm)
    let r = tape.reshape(x, &[batch, heads, s[1], s[2]])?;
    let p = tape.permute(r, &[0, 2, 1, 3])?;
    tape.reshape(p, &[batch, s[1], heads * s[2]])
}

/// Multi-head attention with `q_rows` query tokens attending over `kv`
/// tokens. Parameters live under `{prefix}.{q,k,v,out}`; the out projection
/// may change the embedding dimension. Score computation is counted in the
/// `AttnScores` FLOP scope.
fn mha_query(
    tape: &mut Tape,
    pv: &ParamVars,
    prefix: &str,
    q_in: Var,
    kv_in: Var,
    heads: usize,
    trace: &mut Trace,
) -> Result<Var> {
    let batch = tape.shape(q_in)[0];
    let dim = tape.shape(q_in)[2];
    let dm = dim / heads;
    let q = tape.linear(q_in, pv.v(&format!("{prefix}.q.w")), pv.v(&format!("{prefix}.q.b")))?;
    let k = tape.linear(kv_in, pv.v(&format!("{prefix}.k.w")), pv.v(&format!("{prefix}.k.b")))?;
    let v = tape.linear(kv_in, pv.v(&format!("{prefix}.v.w")), pv.v(&format!("{prefix}.v.b")))?;
    let qh = split_heads(tape, q, heads)?;
    let kh = split_heads(tape, k, heads)?;
    let vh = split_heads(tape, v, heads)?;
    tape.set_scope(Scope::AttnScores);
    let raw = tape.bmm(qh, kh, true)?;
    tape.set_scope(Scope::General);
    let scaled = tape.scale(raw, 1.0 / (dm as f64).sqrt());
    let attn = tape.softmax(scaled)?;
    trace.attention_rows.push(attn);
    let ctx = tape.bmm(attn, vh, false)?;
    let merged = merge_heads(tape, ctx, batch, heads)?;
    tape.linear(
        merged,
        pv.v(&format!("{prefix}.out.w")),
        pv.v(&format!("{prefix}.out.b")),
    )
}

/// Pre-norm transformer encoder block.
fn encoder_block(
    tape: &mut Tape,
    pv: &ParamVars,
    prefix: &str,
    x: Var,
    heads: usize,
    trace: &mut Trace,
) -> Result<Var> {
    let n1 = tape.layer_norm(
        x,
        pv.v(&format!("{prefix}.ln1.gamma")),
        pv.v(&format!("{prefix}.ln1.beta")),
    )?;
    let attn = mha_query(tape, pv, &format!("{prefix}.attn"), n1, n1, heads, trace)?;
    let x = tape.add(x, attn)?;
    let n2 = tape.layer_norm(
        x,
        pv.v(&format!("{prefix}.ln2.gamma")),
        pv.v(&format!("{prefix}.ln2.beta")),
    )?;
    let h = tape.linear(
        n2,
        pv.v(&format!("{prefix}.mlp.fc1.w")),
        pv.v(&format!("{prefix}.mlp.fc1.b")),
    )?;
    let h = tape.gelu(h);
    let h = tape.linear(
        h,
        pv.v(&format!("{prefix}.mlp.fc2.w")),
        pv.v(&format!("{prefix}.mlp.fc2.b")),
    )?;
    tape.add(x, h)
}

fn cls_and_patches(tape: &mut Tape, tokens: Var) -> Result<(Var, Var, usize)> {
    let t = tape.shape(tokens)[1];
    let cls = tape.slice(tokens, 1, 0, 1)?;
    let patches = tape.slice(tokens, 1, 1, t - 1)?;
    Ok((cls, patches, t - 1))
}

/// One CrossViT-style exchange: each branch's class token queries the other
/// branch's patch tokens and returns home through a back-projection.
/// Patch tokens pass through unchanged.
fn mgca_block(
    tape: &mut Tape,
    pv: &ParamVars,
    prefix: &str,
    fine: Var,
    coarse: Var,
    heads: usize,
    trace: &mut Trace,
) -> Result<(Var, Var)> {
    let (f_cls, f_patch, _) = cls_and_patches(tape, fine)?;
    let (c_cls, c_patch, _) = cls_and_patches(tape, coarse)?;

    // fine class token visits the coarse patches
    let proj = tape.linear(
        f_cls,
        pv.v(&format!("{prefix}.f2c.proj.w")),
        pv.v(&format!("{prefix}.f2c.proj.b")),
    )?;
    let upd = mha_query(tape, pv, &format!("{prefix}.f2c"), proj, c_patch, heads, trace)?;
    let back = tape.linear(
        upd,
        pv.v(&format!("{prefix}.f2c.back.w")),
        pv.v(&format!("{prefix}.f2c.back.b")),
    )?;
    let f_cls_new = tape.add(f_cls, back)?;
    let fine_out = tape.concat(&[f_cls_new, f_patch], 1)?;

    // coarse class token visits the fine patches
    let proj = tape.linear(
        c_cls,
        pv.v(&format!("{prefix}.c2f.proj.w")),
        pv.v(&format!("{prefix}.c2f.proj.b")),
    )?;
    let upd = mha_query(tape, pv, &format!("{prefix}.c2f"), proj, f_patch, heads, trace)?;
    let back = tape.linear(
        upd,
        pv.v(&format!("{prefix}.c2f.back.w")),
        pv.v(&format!("{prefix}.c2f.back.b")),
    )?;
    let c_cls_new = tape.add(c_cls, back)?;
    let coarse_out = tape.concat(&[c_cls_new, c_patch], 1)?;

    Ok((fine_out, coarse_out))
}

/// One appearance side of AECA: the projected edge class token (and, for
/// the patch/all query variants, projected edge patch tokens) queries the
/// concatenation of itself with that branch's patch tokens; the pooled
/// result is projected back to 2d and residual-added to the edge class
/// token.
#[allow(clippy::too_many_arguments)]
fn aeca_side(
    tape: &mut Tape,
    pv: &ParamVars,
    proj_name: &str,
    kernel_prefix: &str,
    e_cls: Var,
    e_patch: Var,
    patches: Var,
    cfg: &CaelConfig,
    trace: &mut Trace,
) -> Result<Var> {
    let n = tape.shape(patches)[1];
    let w = pv.v(&format!("{proj_name}.w"));
    let b = pv.v(&format!("{proj_name}.b"));
    let cls_proj = tape.linear(e_cls, w, b)?;
    let t_all = tape.concat(&[cls_proj, patches], 1)?;
    let q_src = match cfg.query_mode {
        QueryMode::Cls => cls_proj,
        QueryMode::Patch => {
            if n == 0 {
                return Err(TensorError::InvalidShape {
                    op: "aeca",
                    shape: tape.shape(patches).to_vec(),
                    reason: "patch query mode requires at least one patch token".into(),
                });
            }
            tape.linear(e_patch, w, b)?
        }
        QueryMode::All => {
            let p = tape.linear(e_patch, w, b)?;
            tape.concat(&[cls_proj, p], 1)?
        }
    };
    let upd = mha_query(tape, pv, kernel_prefix, q_src, t_all, cfg.heads, trace)?;
    let q_rows = tape.shape(upd)[1];
    let pooled = if q_rows > 1 {
        let m = tape.mean(upd, Some(1))?;
        let s = tape.shape(m).to_vec();
        tape.reshape(m, &[s[0], 1, s[1]])?
    } else {
        upd
    };
    tape.add(e_cls, pooled)
}

/// Appearance-edge fusion producing the integrated edge tokens: row 0 is
/// the fused class token, rows 1..n are the incoming edge patch tokens,
/// untouched.
fn fuse_edge(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &CaelConfig,
    block: usize,
    fine: Option<Var>,
    coarse: Option<Var>,
    edge: Var,
    trace: &mut Trace,
) -> Result<Var> {
    let (e_cls, e_patch, _) = cls_and_patches(tape, edge)?;
    let fine_patches = match fine {
        Some(f) => Some(cls_and_patches(tape, f)?.1),
        None => None,
    };
    let coarse_patches = match coarse {
        Some(c) => Some(cls_and_patches(tape, c)?.1),
        None => None,
    };

    let (row0, cls_ef, cls_ec) = match cfg.fusion_mode {
        FusionMode::CrossAttention => {
            let cls_ef = match fine_patches {
                Some(p) => Some(aeca_side(
                    tape,
                    pv,
                    &format!("maet.{block}.aeca.f_proj"),
                    &format!("maet.{block}.aeca.fine"),
                    e_cls,
                    e_patch,
                    p,
                    cfg,
                    trace,
                )?),
                None => None,
            };
            let cls_ec = match coarse_patches {
                Some(p) => Some(aeca_side(
                    tape,
                    pv,
                    &format!("maet.{block}.aeca.c_proj"),
                    &format!("maet.{block}.aeca.coarse"),
                    e_cls,
                    e_patch,
                    p,
                    cfg,
                    trace,
                )?),
                None => None,
            };
            let row0 = match (cls_ef, cls_ec) {
                (Some(f), Some(c)) => tape.add(f, c)?,
                (Some(f), None) => f,
                (None, Some(c)) => c,
                (None, None) => e_cls,
            };
            (row0, cls_ef, cls_ec)
        }
        FusionMode::Summation => {
            let mut row0 = e_cls;
            if let Some(f) = fine {
                let pooled = pooled_rows(tape, f)?;
                let proj = tape.linear(
                    pooled,
                    pv.v(&format!("maet.{block}.fuse.f_pool.w")),
                    pv.v(&format!("maet.{block}.fuse.f_pool.b")),
                )?;
                row0 = tape.add(row0, proj)?;
            }
            if let Some(c) = coarse {
                let pooled = pooled_rows(tape, c)?;
                let proj = tape.linear(
                    pooled,
                    pv.v(&format!("maet.{block}.fuse.c_pool.w")),
                    pv.v(&format!("maet.{block}.fuse.c_pool.b")),
                )?;
                row0 = tape.add(row0, proj)?;
            }
            (row0, None, None)
        }
        FusionMode::Concatenation => {
            let mut parts = vec![e_cls];
            if let Some(f) = fine {
                parts.push(pooled_rows(tape, f)?);
            }
            if let Some(c) = coarse {
                parts.push(pooled_rows(tape, c)?);
            }
            let cat = tape.concat(&parts, 2)?;
            let proj = tape.linear(
                cat,
                pv.v(&format!("maet.{block}.fuse.cat.w")),
                pv.v(&format!("maet.{block}.fuse.cat.b")),
            )?;
            let row0 = tape.add(e_cls, proj)?;
            (row0, None, None)
        }
    };
    let output = tape.concat(&[row0, e_patch], 1)?;
    trace.aeca.push(AecaTrace {
        cls_ef,
        cls_ec,
        edge_patches_in: e_patch,
        output,
    });
    Ok(output)
}

fn pooled_rows(tape: &mut Tape, tokens: Var) -> Result<Var> {
    let m = tape.mean(tokens, Some(1))?;
    let s = tape.shape(m).to_vec();
    tape.reshape(m, &[s[0], 1, s[1]])
}

/// Per-branch token state between MAET blocks.
pub struct BranchState {
    pub fine: Option<Var>,
    pub coarse: Option<Var>,
    pub edge: Option<Var>,
}

/// One MAET block: branch encoders, multi-grained cross-attention between
/// the appearance granularities, then edge fusion.
pub fn maet_block(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &CaelConfig,
    block: usize,
    state: BranchState,
    trace: &mut Trace,
) -> Result<BranchState> {
    let mut fine = state.fine;
    if let Some(mut x) = fine {
        for s in 0..cfg.fine_blocks {
            x = encoder_block(tape, pv, &format!("maet.{block}.fine.{s}"), x, cfg.heads, trace)?;
        }
        fine = Some(x);
    }
    let mut coarse = state.coarse;
    if let Some(mut x) = coarse {
        for l in 0..cfg.coarse_blocks {
            x = encoder_block(
                tape,
                pv,
                &format!("maet.{block}.coarse.{l}"),
                x,
                cfg.heads,
                trace,
            )?;
        }
        coarse = Some(x);
    }
    let mut edge = state.edge;
    if let Some(mut x) = edge {
        for e in 0..cfg.edge_blocks {
            x = encoder_block(tape, pv, &format!("maet.{block}.edge.{e}"), x, cfg.heads, trace)?;
        }
        edge = Some(x);
    }

    if let (Some(mut f), Some(mut c)) = (fine, coarse) {
        for i in 0..cfg.cross_attn_blocks {
            let (nf, nc) = mgca_block(
                tape,
                pv,
                &format!("maet.{block}.mgca.{i}"),
                f,
                c,
                cfg.heads,
                trace,
            )?;
            f = nf;
            c = nc;
        }
        fine = Some(f);
        coarse = Some(c);
    }

    if let Some(e) = edge {
        if cfg.aeca_enabled && (fine.is_some() || coarse.is_some()) {
            edge = Some(fuse_edge(tape, pv, cfg, block, fine, coarse, e, trace)?);
        }
    }

    Ok(BranchState { fine, coarse, edge })
}

fn expert_logits(
    tape: &mut Tape,
    pv: &ParamVars,
    name: &str,
    tokens: Var,
) -> Result<Var> {
    let (cls, _, _) = cls_and_patches(tape, tokens)?;
    let s = tape.shape(cls).to_vec();
    let flat = tape.reshape(cls, &[s[0], s[2]])?;
    let normed = tape.layer_norm(
        flat,
        pv.v(&format!("expert.{name}.ln.gamma")),
        pv.v(&format!("expert.{name}.ln.beta")),
    )?;
    tape.linear(
        normed,
        pv.v(&format!("expert.{name}.head.w")),
        pv.v(&format!("expert.{name}.head.b")),
    )
}

/// Full forward pass over a batch: appearance (B,3,H,W) and its edge map
/// (B,1,H,W) through stems, tokenization, K MAET blocks, and the experts.
/// Final logits are the unweighted mean of the active experts.
pub fn forward(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &CaelConfig,
    appearance: Var,
    edge_map: Var,
) -> Result<Outputs> {
    let mut trace = Trace::default();
    let stems = align::run_stems(tape, pv, cfg, appearance, edge_map)?;
    let tokens = align::tokenize(tape, pv, cfg, &stems)?;
    let mut state = BranchState {
        fine: tokens.fine,
        coarse: tokens.coarse,
        edge: tokens.edge,
    };
    for k in 0..cfg.maet_blocks {
        state = maet_block(tape, pv, cfg, k, state, &mut trace)?;
    }
    let mut branch_logits: Vec<(&'static str, Var)> = Vec::new();
    if let Some(f) = state.fine {
        branch_logits.push(("fine", expert_logits(tape, pv, "fine", f)?));
    }
    if let Some(c) = state.coarse {
        branch_logits.push(("coarse", expert_logits(tape, pv, "coarse", c)?));
    }
    if let Some(e) = state.edge {
        branch_logits.push(("edge", expert_logits(tape, pv, "edge", e)?));
    }
    let mut acc = branch_logits[0].1;
    for (_, l) in branch_logits.iter().skip(1) {
        acc = tape.add(acc, *l)?;
    }
    let logits = tape.scale(acc, 1.0 / branch_logits.len() as f64);
    Ok(Outputs {
        logits,
        branch_logits,
        trace,
    })
}

/// Stack appearance images and their edge maps into batch tensors.
pub fn batch_tensors(images: &[&Image], edges: &[&Image]) -> (Tensor, Tensor) {
    assert!(!images.is_empty());
    assert_eq!(images.len(), edges.len());
    let (h, w) = (images[0].height, images[0].width);
    let b = images.len();
    let mut app = Vec::with_capacity(b * 3 * h * w);
    let mut edg = Vec::with_capacity(b * h * w);
    for (img, e) in images.iter().zip(edges) {
        app.extend_from_slice(&img.pixels);
        edg.extend_from_slice(&e.pixels);
    }
    (
        Tensor::new(app, vec![b, 3, h, w]),
        Tensor::new(edg, vec![b, 1, h, w]),
    )
}

/// Precompute the configured edge map for one appearance image.
pub fn edge_input(img: &Image, cfg: &CaelConfig) -> std::result::Result<Image, crate::error::ImageError> {
    edge_transform(img, cfg.operator)
}
