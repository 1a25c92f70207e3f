//! Every primitive against central finite differences at random points.

use std::rc::Rc;

use diffcore::{finite_difference_check, Array, Result, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-4;
const TOL: f64 = 1e-5;
const POINTS: usize = 100;

fn random_array(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Array {
    let n = shape.iter().product();
    Array::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Contracts an arbitrary-shaped output with fixed random weights so the
/// check exercises every output element's gradient.
fn weighted_sum(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random_array(&mut rng, t.shape(y), 0.5, 1.5);
    let w = t.constant(w);
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

fn check_unary(name: &str, lo: f64, hi: f64, op: fn(&mut Tape, Var) -> Result<Var>) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    let mut worst = 0.0f64;
    for k in 0..POINTS {
        let x = random_array(&mut rng, &[3], lo, hi);
        let r = finite_difference_check(
            |t, p| {
                let y = op(t, p[0])?;
                weighted_sum(t, y, k as u64)
            },
            &[x],
            H,
        )
        .unwrap();
        worst = worst.max(r.max_rel_error);
    }
    assert!(worst <= TOL, "{name}: max rel err {worst:e}");
}

fn check_binary(
    name: &str,
    shapes: (&[usize], &[usize]),
    lo: f64,
    hi: f64,
    op: fn(&mut Tape, Var, Var) -> Result<Var>,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 104729);
    let mut worst = 0.0f64;
    for k in 0..POINTS {
        let a = random_array(&mut rng, shapes.0, lo, hi);
        let b = random_array(&mut rng, shapes.1, lo, hi);
        let r = finite_difference_check(
            |t, p| {
                let y = op(t, p[0], p[1])?;
                weighted_sum(t, y, k as u64)
            },
            &[a, b],
            H,
        )
        .unwrap();
        worst = worst.max(r.max_rel_error);
    }
    assert!(worst <= TOL, "{name}: max rel err {worst:e}");
}

#[test]
fn elementwise_unary() {
    check_unary("neg", -2.0, 2.0, |t, x| Ok(t.neg(x)));
    check_unary("square", -2.0, 2.0, |t, x| Ok(t.square(x)));
    check_unary("exp", -2.0, 2.0, |t, x| Ok(t.exp(x)));
    check_unary("log", 0.2, 3.0, |t, x| t.log(x));
    check_unary("tanh", -2.0, 2.0, |t, x| Ok(t.tanh(x)));
    check_unary("sigmoid", -4.0, 4.0, |t, x| Ok(t.sigmoid(x)));
    check_unary("relu", 0.1, 2.0, |t, x| Ok(t.relu(x)));
    check_unary("relu_negative", -2.0, -0.1, |t, x| {
        let y = t.relu(x);
        t.add(y, x)
    });
    check_unary("softplus", -4.0, 4.0, |t, x| Ok(t.softplus(x)));
    check_unary("sin", -3.0, 3.0, |t, x| Ok(t.sin(x)));
    check_unary("cos", -3.0, 3.0, |t, x| Ok(t.cos(x)));
    check_unary("clamp_min0", 0.1, 2.0, |t, x| Ok(t.clamp_min0(x)));
    check_unary("clamp", 0.1, 0.9, |t, x| Ok(t.clamp(x, 0.0, 1.0)));
    check_unary("scale", -2.0, 2.0, |t, x| Ok(t.scale(x, -1.7)));
    check_unary("add_scalar", -2.0, 2.0, |t, x| {
        let y = t.add_scalar(x, 0.3);
        Ok(t.square(y))
    });
}

#[test]
fn elementwise_binary_and_broadcast() {
    check_binary("add", (&[2, 3], &[2, 3]), -1.0, 1.0, |t, a, b| t.add(a, b));
    check_binary("sub", (&[2, 3], &[3]), -1.0, 1.0, |t, a, b| t.sub(a, b));
    check_binary("mul", (&[2, 3], &[2, 3]), -1.0, 1.0, |t, a, b| t.mul(a, b));
    check_binary("mul_scalar", (&[], &[2, 3]), -1.0, 1.0, |t, a, b| {
        t.mul(a, b)
    });
    check_binary("div", (&[2, 3], &[3]), 0.5, 2.0, |t, a, b| t.div(a, b));
    check_binary("hard_clip_interior", (&[4], &[4]), 0.5, 1.0, |t, a, b| {
        let b = t.scale(b, 2.0);
        t.hard_clip(a, b)
    });
}

#[test]
fn linear_algebra_and_reductions() {
    check_binary("matmul", (&[3, 4], &[4, 2]), -1.0, 1.0, |t, a, b| {
        t.matmul(a, b)
    });
    check_unary("sum", -1.0, 1.0, |t, x| {
        let y = t.square(x);
        Ok(t.sum(y))
    });
    check_unary("mean", -1.0, 1.0, |t, x| {
        let y = t.square(x);
        t.mean(y)
    });
    check_unary("sum_axis", -1.0, 1.0, |t, x| {
        let x = t.reshape(x, &[3, 1])?;
        let y = t.expand_last(x, 2)?;
        let y = t.sin(y);
        t.sum_axis(y, 0)
    });
    check_unary("cumsum_exclusive", -1.0, 1.0, |t, x| {
        let c = t.cumsum_exclusive(x)?;
        Ok(t.exp(c))
    });
}

#[test]
fn structural_primitives() {
    check_binary("concat", (&[2, 3], &[2, 1]), -1.0, 1.0, |t, a, b| {
        let c = t.concat(&[a, b])?;
        Ok(t.square(c))
    });
    check_binary("concat_rows", (&[2, 3], &[1, 3]), -1.0, 1.0, |t, a, b| {
        let c = t.concat_rows(&[a, b])?;
        Ok(t.square(c))
    });
    check_unary("slice_last", -1.0, 1.0, |t, x| {
        let s = t.slice_last(x, 1, 3)?;
        Ok(t.square(s))
    });
    check_unary("gather", -1.0, 1.0, |t, x| {
        let g = t.gather(x, Rc::from(vec![2, 0, 2, 1]), &[2, 2])?;
        Ok(t.tanh(g))
    });
    check_binary(
        "softmax_cross_entropy",
        (&[2, 3], &[2, 3]),
        -2.0,
        2.0,
        |t, a, b| {
            let z = t.mul(a, b)?;
            t.softmax_cross_entropy(z, &[1, 2])
        },
    );
}

fn mlp(t: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
    let mut h = x;
    for layer in 0..3 {
        let (w, b) = (p[2 * layer], p[2 * layer + 1]);
        let z = t.matmul(h, w)?;
        let z = t.add(z, b)?;
        h = if layer < 2 { t.tanh(z) } else { z };
    }
    t.mean(h)
}

#[test]
fn three_layer_mlp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dims = [4, 8, 8, 1];
    let mut params = Vec::new();
    for l in 0..3 {
        params.push(random_array(&mut rng, &[dims[l], dims[l + 1]], -0.8, 0.8));
        params.push(random_array(&mut rng, &[dims[l + 1]], -0.2, 0.2));
    }
    let x = random_array(&mut rng, &[5, 4], -1.0, 1.0);
    let r = finite_difference_check(
        |t, p| {
            let xv = t.constant(x.clone());
            mlp(t, p, xv)
        },
        &params,
        H,
    )
    .unwrap();
    assert!(r.max_rel_error <= TOL, "{r:?}");
    assert_eq!(r.probes, params.iter().map(Array::len).sum::<usize>());
}

#[test]
fn replay_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let w = random_array(&mut rng, &[4, 4], -1.0, 1.0);
    let run = || {
        let mut t = Tape::new();
        let wv = t.param(w.clone());
        let x = t.constant(Array::full(&[2, 4], 0.3));
        let y = t.matmul(x, wv).unwrap();
        let y = t.softplus(y);
        let s = t.sum(y);
        t.backward(s).unwrap().get(wv).unwrap().clone()
    };
    let (a, b) = (run(), run());
    let bits = |a: &Array| a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}
