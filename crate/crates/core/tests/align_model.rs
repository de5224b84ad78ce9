//! Cross-module checks: tokenization structure, gradient flow from the loss
//! all the way into the stems, one full MAET block against finite
//! differences, and bit-determinism of training.

use cael_core::config::{CaelConfig, TrainConfig};
use cael_core::data::{ManifestEntry, SplitKind, TaxonomyLabel};
use cael_core::model::params::ParamSet;
use cael_core::model::{self, maet_block, BranchState, ParamVars, Trace};
use cael_core::rng::Rng;
use cael_core::tensor::gradcheck::{relative_error, FD_STEP};
use cael_core::tensor::{Tape, Tensor};
use cael_core::train::{dataset_from_images, train, DataSet};

fn tiny_cfg() -> CaelConfig {
    CaelConfig {
        maet_blocks: 1,
        fine_blocks: 1,
        coarse_blocks: 1,
        edge_blocks: 1,
        cross_attn_blocks: 1,
        heads: 2,
        token_dim: 8,
        input_size: 64,
        fine_channels: 8,
        coarse_channels: 4,
        ..CaelConfig::default()
    }
}

fn random_inputs(cfg: &CaelConfig, b: usize, seed: u64) -> (Tensor, Tensor) {
    let mut rng = Rng::from_seed(seed);
    let hw = cfg.input_size * cfg.input_size;
    (
        Tensor::new(
            (0..b * 3 * hw).map(|_| rng.uniform()).collect(),
            vec![b, 3, cfg.input_size, cfg.input_size],
        ),
        Tensor::new(
            (0..b * hw).map(|_| rng.uniform()).collect(),
            vec![b, 1, cfg.input_size, cfg.input_size],
        ),
    )
}

#[test]
fn token_counts_equal_across_input_sizes() {
    // run the actual tokenization at several sizes, not just the formula
    for size in [64usize, 96, 128] {
        let mut cfg = tiny_cfg();
        cfg.input_size = size;
        let set = ParamSet::init(&cfg, 1);
        let (app, edg) = random_inputs(&cfg, 1, 2);
        let mut tape = Tape::new();
        let pv = ParamVars::enroll(&mut tape, &set);
        let a = tape.leaf(&app);
        let e = tape.leaf(&edg);
        let stems = cael_core::align::run_stems(&mut tape, &pv, &cfg, a, e).unwrap();
        let toks = cael_core::align::tokenize(&mut tape, &pv, &cfg, &stems).unwrap();
        let n = cfg.tokens();
        for v in [toks.fine, toks.coarse, toks.edge].into_iter().flatten() {
            assert_eq!(tape.shape(v)[1], n + 1, "size {size}");
        }
        // fine stem grid is x32, coarse/edge x4
        assert_eq!(
            tape.shape(stems.fine.unwrap())[2],
            size / 32,
            "fine grid at {size}"
        );
        assert_eq!(tape.shape(stems.coarse.unwrap())[2], size / 4);
    }
}

#[test]
fn class_token_row_is_input_independent_before_encoders() {
    let cfg = tiny_cfg();
    let set = ParamSet::init(&cfg, 3);
    let mut row0 = Vec::new();
    for seed in [10u64, 11] {
        let (app, edg) = random_inputs(&cfg, 1, seed);
        let mut tape = Tape::new();
        let pv = ParamVars::enroll(&mut tape, &set);
        let a = tape.leaf(&app);
        let e = tape.leaf(&edg);
        let stems = cael_core::align::run_stems(&mut tape, &pv, &cfg, a, e).unwrap();
        let toks = cael_core::align::tokenize(&mut tape, &pv, &cfg, &stems).unwrap();
        let fine = toks.fine.unwrap();
        let d = cfg.token_dim;
        row0.push(tape.value(fine)[..d].to_vec());
        // row 0 equals class token parameter + its positional row
        let cls = set.get("tok.fine.cls");
        let pos = set.get("tok.fine.pos");
        let expect: Vec<f64> = (0..d).map(|i| cls.data[i] + pos.data[i]).collect();
        assert_eq!(tape.value(fine)[..d], expect[..]);
    }
    assert_eq!(row0[0], row0[1]);
}

#[test]
fn non_multiple_of_32_rejected() {
    let mut cfg = tiny_cfg();
    cfg.input_size = 64;
    let set = ParamSet::init(&cfg, 1);
    let mut rng = Rng::from_seed(5);
    let app = Tensor::new((0..3 * 48 * 48).map(|_| rng.uniform()).collect(), vec![1, 3, 48, 48]);
    let edg = Tensor::new((0..48 * 48).map(|_| rng.uniform()).collect(), vec![1, 1, 48, 48]);
    let mut tape = Tape::new();
    let pv = ParamVars::enroll(&mut tape, &set);
    let a = tape.leaf(&app);
    let e = tape.leaf(&edg);
    assert!(cael_core::align::run_stems(&mut tape, &pv, &cfg, a, e).is_err());
}

#[test]
fn gradient_reaches_stem_weights_matching_finite_differences() {
    // finite differences through tokenize(run_stems(x)) on sampled stem
    // coordinates; the chain includes conv, gelu, patches, linear, concat
    let cfg = tiny_cfg();
    let set = ParamSet::init(&cfg, 7);
    let (app, edg) = random_inputs(&cfg, 1, 8);
    let loss_of = |set: &ParamSet| -> f64 {
        let mut tape = Tape::new();
        let pv = ParamVars::enroll(&mut tape, set);
        let a = tape.leaf(&app);
        let e = tape.leaf(&edg);
        let out = model::forward(&mut tape, &pv, &cfg, a, e).unwrap();
        tape.cross_entropy(out.logits, &[1]).map(|l| tape.value(l)[0]).unwrap()
    };
    // analytic gradient
    let grads = {
        let mut tape = Tape::new();
        let pv = ParamVars::enroll(&mut tape, &set);
        let vars = pv.vars.clone();
        let a = tape.leaf(&app);
        let e = tape.leaf(&edg);
        let out = model::forward(&mut tape, &pv, &cfg, a, e).unwrap();
        let loss = tape.cross_entropy(out.logits, &[1]).unwrap();
        let g = tape.backward(loss).unwrap();
        vars.iter().map(|v| g.get(*v).unwrap().to_vec()).collect::<Vec<_>>()
    };
    let mut rng = Rng::from_seed(9);
    let mut worst = 0.0f64;
    for name in ["stem.fine.0.w", "stem.edge.1.w", "stem.coarse.0.b"] {
        let pi = set.position(name).unwrap();
        for _ in 0..4 {
            let ei = rng.below(set.tensors[pi].numel());
            let mut plus = set.clone();
            plus.tensors[pi].data_mut()[ei] += FD_STEP;
            let mut minus = set.clone();
            minus.tensors[pi].data_mut()[ei] -= FD_STEP;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(grads[pi][ei], fd, 1e-2));
        }
    }
    assert!(worst < 1e-4, "stem gradient relative error {worst}");
}

#[test]
fn maet_block_gradcheck_toy_dims() {
    // one full MAET block at n=4, d=8, m=2 against central finite
    // differences on sampled parameter coordinates
    let cfg = tiny_cfg(); // 64x64 gives n=4; d=8, heads=2
    assert_eq!(cfg.tokens(), 4);
    let set = ParamSet::init(&cfg, 21);
    let n = cfg.tokens();
    let (d, d2) = (cfg.token_dim, cfg.wide_dim());
    let mut rng = Rng::from_seed(22);
    let fine_in = Tensor::new((0..(n + 1) * d).map(|_| rng.normal()).collect(), vec![1, n + 1, d]);
    let coarse_in =
        Tensor::new((0..(n + 1) * d2).map(|_| rng.normal()).collect(), vec![1, n + 1, d2]);
    let edge_in =
        Tensor::new((0..(n + 1) * d2).map(|_| rng.normal()).collect(), vec![1, n + 1, d2]);

    let run = |set: &ParamSet| -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let pv = ParamVars::enroll(&mut tape, set);
        let vars = pv.vars.clone();
        let f = tape.leaf(&fine_in);
        let c = tape.leaf(&coarse_in);
        let e = tape.leaf(&edge_in);
        let mut trace = Trace::default();
        let state = maet_block(
            &mut tape,
            &pv,
            &cfg,
            0,
            BranchState {
                fine: Some(f),
                coarse: Some(c),
                edge: Some(e),
            },
            &mut trace,
        )
        .unwrap();
        // combine the three outputs into one scalar
        let mf = tape.mean(state.fine.unwrap(), None).unwrap();
        let mc = tape.mean(state.coarse.unwrap(), None).unwrap();
        let me = tape.mean(state.edge.unwrap(), None).unwrap();
        let s1 = tape.add(mf, mc).unwrap();
        let gelud = tape.gelu(s1); // nonlinearity so second-order terms show
        let loss = tape.add(gelud, me).unwrap();
        let lv = tape.value(loss)[0];
        let grads = tape.backward(loss).unwrap();
        (lv, vars.iter().map(|v| grads.get(*v).unwrap().to_vec()).collect())
    };
    let (_, analytic) = run(&set);
    let mut worst = 0.0f64;
    let mut rng = Rng::from_seed(23);
    // probe a sample of coordinates in every parameter the block uses
    for (pi, name) in set.names.iter().enumerate() {
        if !name.starts_with("maet.0.") {
            continue;
        }
        for _ in 0..2 {
            let ei = rng.below(set.tensors[pi].numel());
            let mut plus = set.clone();
            plus.tensors[pi].data_mut()[ei] += FD_STEP;
            let mut minus = set.clone();
            minus.tensors[pi].data_mut()[ei] -= FD_STEP;
            let fd = (run(&plus).0 - run(&minus).0) / (2.0 * FD_STEP);
            let rel = relative_error(analytic[pi][ei], fd, 1e-2);
            if rel > worst {
                worst = rel;
            }
        }
    }
    assert!(worst < 1e-3, "MAET block gradient relative error {worst}");
}

fn in_memory_dataset(cfg: &CaelConfig, n: usize, seed: u64) -> DataSet {
    let mut rng = Rng::from_seed(seed);
    let hw = cfg.input_size * cfg.input_size;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut entries = Vec::new();
    for i in 0..n {
        let bias = if i % 2 == 0 { 0.3 } else { 0.6 };
        images.push(cael_core::image::Image::new(
            3,
            cfg.input_size,
            cfg.input_size,
            (0..3 * hw).map(|_| rng.uniform() * 0.3 + bias).collect(),
        ));
        labels.push(i % 2);
        entries.push(ManifestEntry {
            path: format!("{i}.ppm"),
            label: TaxonomyLabel::REAL,
            split: SplitKind::Train,
            identity: None,
        });
    }
    dataset_from_images(cfg, images, labels, entries).unwrap()
}

#[test]
fn training_bit_deterministic() {
    let cfg = tiny_cfg();
    let data = in_memory_dataset(&cfg, 24, 31);
    let tc = TrainConfig {
        epochs: 2,
        batch_size: 8,
        early_stop_auc: 0.0,
        ..TrainConfig::default()
    };
    let a = train(&cfg, &tc, &data, None, 77).unwrap();
    let b = train(&cfg, &tc, &data, None, 77).unwrap();
    for (ta, tb) in a.params.tensors.iter().zip(&b.params.tensors) {
        let ba: Vec<u64> = ta.data.iter().map(|v| v.to_bits()).collect();
        let bb: Vec<u64> = tb.data.iter().map(|v| v.to_bits()).collect();
        assert_eq!(ba, bb);
    }
    assert_eq!(a.steps, b.steps);
    let la: Vec<(usize, u64)> = a.log.iter().map(|r| (r.step, r.loss.to_bits())).collect();
    let lb: Vec<(usize, u64)> = b.log.iter().map(|r| (r.step, r.loss.to_bits())).collect();
    assert_eq!(la, lb);
}

#[test]
fn published_dims_token_check() {
    // published dims: 224 input, d=192 tokens, coarse/edge at 384
    let cfg = CaelConfig {
        input_size: 224,
        ..CaelConfig::default()
    };
    assert_eq!(cfg.tokens(), 49);
    assert_eq!(cfg.token_dim, 192);
    assert_eq!(cfg.wide_dim(), 384);
}
