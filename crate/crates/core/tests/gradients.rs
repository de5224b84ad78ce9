//! Finite-difference checks for every differentiable op, on random shapes.
//! The oracle re-evaluates the forward pass at perturbed inputs and never
//! touches the backward implementation it audits.

use cael_core::rng::Rng;
use cael_core::tensor::gradcheck::check;
use cael_core::tensor::{Tape, Tensor, Var};

const TOL: f64 = 1e-4;
const FLOOR: f64 = 1e-2;

fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.normal()).collect(), shape.to_vec())
}

/// Reduce any tensor to a scalar through a fixed random projection so the
/// loss is sensitive to every output element.
fn to_scalar(tape: &mut Tape, v: Var, seed: u64) -> Var {
    let n: usize = tape.shape(v).iter().product();
    let mut rng = Rng::from_seed(seed);
    let w: Vec<f64> = (0..n).map(|_| rng.range(0.3, 1.3)).collect();
    let flat = tape.reshape(v, &[1, n]).unwrap();
    let wv = tape.constant(w, vec![n, 1]);
    tape.matmul(flat, wv).unwrap()
}

fn assert_op<F>(name: &str, inputs: &[Tensor], f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let report = check(inputs, f, FLOOR);
    assert!(
        report.max_rel_err < TOL,
        "{name}: max relative error {} over {} coords",
        report.max_rel_err,
        report.checked
    );
}

#[test]
fn grad_matmul() {
    let mut rng = Rng::from_seed(101);
    let a = randn(&mut rng, &[4, 6]);
    let b = randn(&mut rng, &[6, 5]);
    assert_op("matmul", &[a, b], |t, v| {
        let y = t.matmul(v[0], v[1]).unwrap();
        to_scalar(t, y, 7)
    });
}

#[test]
fn grad_bmm_both_orientations() {
    let mut rng = Rng::from_seed(102);
    for trans_b in [false, true] {
        let a = randn(&mut rng, &[3, 4, 5]);
        let b = if trans_b {
            randn(&mut rng, &[3, 6, 5])
        } else {
            randn(&mut rng, &[3, 5, 6])
        };
        assert_op("bmm", &[a, b], |t, v| {
            let y = t.bmm(v[0], v[1], trans_b).unwrap();
            to_scalar(t, y, 8)
        });
    }
}

#[test]
fn grad_conv2d() {
    let mut rng = Rng::from_seed(103);
    for (stride, pad) in [(1, 1), (2, 1), (2, 0)] {
        let x = randn(&mut rng, &[2, 3, 6, 6]);
        let w = randn(&mut rng, &[4, 3, 3, 3]);
        let b = randn(&mut rng, &[4]);
        assert_op("conv2d", &[x, w, b], |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad).unwrap();
            to_scalar(t, y, 9)
        });
    }
}

#[test]
fn grad_add_and_broadcast() {
    let mut rng = Rng::from_seed(104);
    let a = randn(&mut rng, &[3, 4]);
    let b = randn(&mut rng, &[3, 4]);
    assert_op("add", &[a, b], |t, v| {
        let y = t.add(v[0], v[1]).unwrap();
        to_scalar(t, y, 10)
    });
    let a = randn(&mut rng, &[4, 3, 5]);
    let b = randn(&mut rng, &[1, 3, 5]);
    assert_op("add_broadcast", &[a, b], |t, v| {
        let y = t.add_broadcast(v[0], v[1]).unwrap();
        to_scalar(t, y, 11)
    });
    let a = randn(&mut rng, &[2, 6]);
    let bias = randn(&mut rng, &[6]);
    assert_op("add_broadcast bias", &[a, bias], |t, v| {
        let y = t.add_broadcast(v[0], v[1]).unwrap();
        to_scalar(t, y, 12)
    });
}

#[test]
fn grad_scale_add_scalar() {
    let mut rng = Rng::from_seed(105);
    let a = randn(&mut rng, &[4, 8]);
    assert_op("scale", &[a.clone()], |t, v| {
        let y = t.scale(v[0], -1.7);
        to_scalar(t, y, 13)
    });
    assert_op("add_scalar", &[a], |t, v| {
        let y = t.add_scalar(v[0], 0.3);
        to_scalar(t, y, 14)
    });
}

#[test]
fn grad_concat_split_slice() {
    let mut rng = Rng::from_seed(106);
    let a = randn(&mut rng, &[2, 3, 4]);
    let b = randn(&mut rng, &[2, 2, 4]);
    assert_op("concat", &[a.clone(), b], |t, v| {
        let y = t.concat(&[v[0], v[1]], 1).unwrap();
        to_scalar(t, y, 15)
    });
    assert_op("split", &[a.clone()], |t, v| {
        let parts = t.split(v[0], 1, &[1, 2]).unwrap();
        let s0 = to_scalar(t, parts[0], 16);
        let s1 = to_scalar(t, parts[1], 17);
        t.add(s0, s1).unwrap()
    });
    assert_op("slice", &[a], |t, v| {
        let y = t.slice(v[0], 2, 1, 2).unwrap();
        to_scalar(t, y, 18)
    });
}

#[test]
fn grad_reshape_permute() {
    let mut rng = Rng::from_seed(107);
    let a = randn(&mut rng, &[2, 3, 4]);
    assert_op("reshape", &[a.clone()], |t, v| {
        let y = t.reshape(v[0], &[4, 6]).unwrap();
        to_scalar(t, y, 19)
    });
    assert_op("permute", &[a.clone()], |t, v| {
        let y = t.permute(v[0], &[2, 0, 1]).unwrap();
        to_scalar(t, y, 20)
    });
    assert_op("transpose", &[randn(&mut rng, &[3, 5])], |t, v| {
        let y = t.transpose(v[0]).unwrap();
        to_scalar(t, y, 21)
    });
}

#[test]
fn grad_softmax() {
    let mut rng = Rng::from_seed(108);
    let a = randn(&mut rng, &[4, 7]);
    assert_op("softmax", &[a], |t, v| {
        let y = t.softmax(v[0]).unwrap();
        to_scalar(t, y, 22)
    });
}

#[test]
fn grad_layer_norm() {
    let mut rng = Rng::from_seed(109);
    let x = randn(&mut rng, &[4, 8]);
    let gamma = randn(&mut rng, &[8]);
    let beta = randn(&mut rng, &[8]);
    assert_op("layer_norm", &[x, gamma, beta], |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2]).unwrap();
        to_scalar(t, y, 23)
    });
}

#[test]
fn grad_gelu() {
    let mut rng = Rng::from_seed(110);
    let a = randn(&mut rng, &[4, 8]);
    assert_op("gelu", &[a], |t, v| {
        let y = t.gelu(v[0]);
        to_scalar(t, y, 24)
    });
}

#[test]
fn grad_mean() {
    let mut rng = Rng::from_seed(111);
    let a = randn(&mut rng, &[3, 4, 5]);
    assert_op("mean all", &[a.clone()], |t, v| t.mean(v[0], None).unwrap());
    assert_op("mean axis1", &[a], |t, v| {
        let y = t.mean(v[0], Some(1)).unwrap();
        to_scalar(t, y, 25)
    });
}

#[test]
fn grad_repeat0_patches() {
    let mut rng = Rng::from_seed(112);
    let a = randn(&mut rng, &[1, 2, 6]);
    assert_op("repeat0", &[a], |t, v| {
        let y = t.repeat0(v[0], 4).unwrap();
        to_scalar(t, y, 26)
    });
    let x = randn(&mut rng, &[2, 3, 4, 4]);
    assert_op("patches", &[x], |t, v| {
        let y = t.patches(v[0], 2).unwrap();
        to_scalar(t, y, 27)
    });
}

#[test]
fn grad_linear() {
    let mut rng = Rng::from_seed(113);
    let x = randn(&mut rng, &[2, 3, 6]);
    let w = randn(&mut rng, &[6, 4]);
    let b = randn(&mut rng, &[4]);
    assert_op("linear", &[x, w, b], |t, v| {
        let y = t.linear(v[0], v[1], v[2]).unwrap();
        to_scalar(t, y, 28)
    });
}

#[test]
fn grad_cross_entropy() {
    let mut rng = Rng::from_seed(114);
    let logits = randn(&mut rng, &[5, 2]);
    let labels = [0usize, 1, 1, 0, 1];
    assert_op("cross_entropy", &[logits], |t, v| {
        t.cross_entropy(v[0], &labels).unwrap()
    });
}

#[test]
fn grad_composite_chain() {
    // A composite graph mixing most ops, checked end to end.
    let mut rng = Rng::from_seed(115);
    let x = randn(&mut rng, &[2, 4, 8]);
    let w = randn(&mut rng, &[8, 8]);
    let b = randn(&mut rng, &[8]);
    let gamma = randn(&mut rng, &[8]);
    let beta = randn(&mut rng, &[8]);
    assert_op("composite", &[x, w, b, gamma, beta], |t, v| {
        let normed = t.layer_norm(v[0], v[3], v[4]).unwrap();
        let lin = t.linear(normed, v[1], v[2]).unwrap();
        let act = t.gelu(lin);
        let res = t.add(act, v[0]).unwrap();
        let sm = t.softmax(res).unwrap();
        to_scalar(t, sm, 29)
    });
}
