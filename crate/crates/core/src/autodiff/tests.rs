use alloc::vec;
use alloc::vec::Vec;

use super::*;
use crate::error::Result;
use crate::rng::{normal, seeded};

fn rand_tensor(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    let mut rng = seeded(seed);
    Tensor::from_fn(rows, cols, |_, _| normal(&mut rng))
}

/// Builds `loss = Σ w ⊙ op(inputs)` with fixed random `w`, so every output element
/// contributes a distinct sensitivity, then checks input gradients numerically.
fn check_op(
    inputs: Vec<Tensor<f64>>,
    op: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> f64 {
    let shapes: Vec<[usize; 2]> = inputs.iter().map(Tensor::shape).collect();
    let build = |flat: &[f64], want_grad: bool| -> (f64, Vec<f64>) {
        let mut g = Graph::new();
        let mut off = 0;
        let vars: Vec<Var> = shapes
            .iter()
            .map(|&[r, c]| {
                let t = Tensor::new(r, c, flat[off..off + r * c].to_vec()).unwrap();
                off += r * c;
                g.param(t)
            })
            .collect();
        let y = op(&mut g, &vars).unwrap();
        let w = rand_tensor(g.value(y).rows(), g.value(y).cols(), 99);
        let loss = g.weighted_sum(y, w.data()).unwrap();
        let val = g.value(loss).item();
        if !want_grad {
            return (val, vec![]);
        }
        let grads = g.backward(loss).unwrap();
        (val, grads.collect(&vars).into_iter().flat_map(Tensor::into_data).collect())
    };
    let theta: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
    let (_, analytic) = build(&theta, true);
    let report = gradient_check(|p| Ok(build(p, false).0), &theta, &analytic, GradCheckConfig { h: 1e-6, coords: 400, seed: 1, ..GradCheckConfig::default() })
        .unwrap();
    report.max_rel_error
}

const TOL: f64 = 1e-6;

#[test]
fn elementwise_and_broadcast_gradients() {
    let a = rand_tensor(3, 4, 1);
    let b = rand_tensor(3, 4, 2);
    let r = rand_tensor(1, 4, 3);
    assert!(check_op(vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1])) < TOL);
    assert!(check_op(vec![a.clone(), b.clone()], |g, v| g.sub(v[0], v[1])) < TOL);
    assert!(check_op(vec![a.clone(), b.clone()], |g, v| g.mul(v[0], v[1])) < TOL);
    assert!(check_op(vec![a.clone(), b.clone()], |g, v| g.minimum(v[0], v[1])) < TOL);
    assert!(check_op(vec![a.clone(), b.clone()], |g, v| g.maximum(v[0], v[1])) < TOL);
    assert!(check_op(vec![a.clone(), r.clone()], |g, v| g.add_row(v[0], v[1])) < TOL);
    assert!(check_op(vec![a.clone(), r.clone()], |g, v| g.mul_row(v[0], v[1])) < TOL);
    assert!(check_op(vec![a.clone()], |g, v| g.scale(v[0], 0.7)) < TOL);
    assert!(check_op(vec![a.clone()], |g, v| g.add_scalar(v[0], 0.7)) < TOL);
    assert!(check_op(vec![a.clone()], |g, v| g.tanh(v[0])) < TOL);
    assert!(check_op(vec![a.clone()], |g, v| g.gelu(v[0])) < TOL);
    assert!(check_op(vec![a.clone()], |g, v| g.mish(v[0])) < TOL);
    assert!(check_op(vec![a.clone()], |g, v| g.exp(v[0])) < TOL);
    assert!(check_op(vec![a.clone()], |g, v| g.square(v[0])) < TOL);
    assert!(check_op(vec![a.clone()], |g, v| g.clamp(v[0], -0.5, 0.5)) < TOL);
}

#[test]
fn matrix_and_reduction_gradients() {
    let a = rand_tensor(3, 4, 4);
    let b = rand_tensor(4, 5, 5);
    assert!(check_op(vec![a.clone(), b], |g, v| g.matmul(v[0], v[1])) < TOL);
    assert!(check_op(vec![a.clone()], |g, v| g.softmax(v[0])) < TOL);
    assert!(check_op(vec![a.clone()], |g, v| g.normalize(v[0])) < TOL);
    let (gamma, beta) = (rand_tensor(1, 4, 6), rand_tensor(1, 4, 7));
    assert!(check_op(vec![a.clone(), gamma, beta], |g, v| g.layer_norm(v[0], v[1], v[2])) < TOL);
    assert!(check_op(vec![a.clone()], |g, v| g.embed(v[0], &[2, 0, 2, 1])) < TOL);
    assert!(check_op(vec![a.clone()], |g, v| g.rows(v[0], &[1, 1])) < TOL);
    assert!(check_op(vec![a.clone(), rand_tensor(3, 2, 8)], |g, v| g.concat(&[v[0], v[1]])) < TOL);
    assert!(check_op(vec![a.clone()], |g, v| g.row_sum(v[0])) < TOL);
    assert!(check_op(vec![a.clone()], |g, v| g.sum(v[0])) < TOL);
    assert!(check_op(vec![a], |g, v| g.mean(v[0])) < TOL);
}

#[test]
fn attention_and_nll_gradients() {
    let (q, k, v) = (rand_tensor(10, 4, 9), rand_tensor(10, 4, 10), rand_tensor(10, 4, 11));
    assert!(check_op(vec![q, k, v], |g, x| g.causal_attention(x[0], x[1], x[2], 5, 2, &[0, 2])) < TOL);
    let (m, lv, t) = (rand_tensor(4, 3, 12), rand_tensor(4, 3, 13), rand_tensor(4, 3, 14));
    assert!(check_op(vec![m, lv, t], |g, x| g.gaussian_nll_rows(x[0], x[1], x[2])) < TOL);
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::row_vector(vec![0.0, 0.0]));
    let y = g.softmax(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    let x = g.constant(rand_tensor(6, 7, 3).map(|v| v * 30.0));
    let y = g.softmax(x).unwrap();
    for r in 0..6 {
        assert!((g.value(y).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn layer_norm_of_constant_row_is_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::filled(2, 5, 3.25));
    let y = g.normalize(x).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn single_position_attention_returns_value_row() {
    let mut g = Graph::<f64>::new();
    let q = g.constant(rand_tensor(1, 4, 1));
    let k = g.constant(rand_tensor(1, 4, 2));
    let v = g.constant(rand_tensor(1, 4, 3));
    let o = g.causal_attention(q, k, v, 1, 2, &[0]).unwrap();
    assert_eq!(g.value(o), g.value(v));
}

#[test]
fn attention_ignores_future_positions() {
    let (q, k, v) = (rand_tensor(6, 4, 1), rand_tensor(6, 4, 2), rand_tensor(6, 4, 3));
    let run = |k: &Tensor<f64>, v: &Tensor<f64>| {
        let mut g = Graph::<f64>::new();
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let o = g.causal_attention(qv, kv, vv, 6, 2, &[0]).unwrap();
        g.value(o).clone()
    };
    let base = run(&k, &v);
    let mut k2 = k.clone();
    let mut v2 = v.clone();
    for c in 0..4 {
        k2.data_mut()[4 * 4 + c] += 5.0;
        v2.data_mut()[5 * 4 + c] -= 3.0;
    }
    let moved = run(&k2, &v2);
    for r in 0..4 {
        assert_eq!(base.row(r), moved.row(r));
    }
    assert_ne!(base.row(5), moved.row(5));
}

#[test]
fn gaussian_nll_examples() {
    let half_log_2pi = 0.5 * (2.0 * core::f64::consts::PI).ln();
    let nll = |m: Vec<f64>, lv: Vec<f64>, t: Vec<f64>| {
        let mut g = Graph::<f64>::new();
        let (m, lv, t) = (g.constant(Tensor::row_vector(m)), g.constant(Tensor::row_vector(lv)), g.constant(Tensor::row_vector(t)));
        let l = g.gaussian_nll(m, lv, t).unwrap();
        g.value(l).item()
    };
    assert!((nll(vec![0.3], vec![0.0], vec![0.3]) - half_log_2pi).abs() < 1e-12);
    assert!((nll(vec![0.0], vec![0.0], vec![1.0]) - (half_log_2pi + 0.5)).abs() < 1e-12);
    assert!((nll(vec![0.0], vec![0.0], vec![1.0]) - 1.4189).abs() < 1e-4);
    let one = nll(vec![0.2], vec![0.4], vec![-0.1]);
    let two = nll(vec![0.2, 0.2], vec![0.4, 0.4], vec![-0.1, -0.1]);
    assert!((two - 2.0 * one).abs() < 1e-12);

    let mut g = Graph::<f64>::new();
    let m = g.constant(Tensor::row_vector(vec![0.0]));
    let lv = g.constant(Tensor::row_vector(vec![f64::NAN]));
    assert!(g.gaussian_nll(m, lv, m).is_err());
}

#[test]
fn dropout_modes() {
    let x = rand_tensor(4, 8, 5);
    let mut g = Graph::<f64>::new();
    let xv = g.param(x.clone());
    let mut rng = seeded(1);
    assert_eq!(g.dropout(xv, 0.3, false, &mut rng).unwrap(), xv);
    let a = g.dropout(xv, 0.3, true, &mut seeded(7)).unwrap();
    let b = g.dropout(xv, 0.3, true, &mut seeded(7)).unwrap();
    assert_eq!(g.value(a), g.value(b));
    assert!(g.value(a).data().contains(&0.0));
}

#[test]
fn shape_errors_name_the_op() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(2, 3));
    let b = g.constant(Tensor::zeros(2, 3));
    match g.matmul(a, b) {
        Err(crate::Error::Shape { op, lhs, rhs }) => assert_eq!((op, lhs, rhs), ("matmul", [2, 3], [2, 3])),
        other => panic!("{other:?}"),
    }
    assert!(g.causal_attention(a, a, a, 2, 2, &[0]).is_err());
    assert!(g.backward(a).is_err());
}

#[test]
fn backward_is_repeatable() {
    let mut g = Graph::<f64>::new();
    let w = g.param(rand_tensor(3, 3, 1));
    let x = g.constant(rand_tensor(2, 3, 2));
    let h = g.matmul(x, w).unwrap();
    let h = g.tanh(h).unwrap();
    let l = g.sum(h).unwrap();
    let a = g.backward(l).unwrap().get(w);
    let b = g.backward(l).unwrap().get(w);
    assert_eq!(a, b);
}

#[test]
fn quadratic_gradient_check() {
    let report = gradient_check(|p: &[f64]| Ok(p[0] * p[0]), &[3.0], &[6.0], GradCheckConfig { h: 1e-5, coords: 1, ..GradCheckConfig::default() }).unwrap();
    assert!(report.max_rel_error <= 1e-8, "{report:?}");
    assert!(gradient_check(|p: &[f64]| Ok(p[0]), &[0.0], &[1.0], GradCheckConfig { h: 0.0, coords: 1, ..GradCheckConfig::default() }).is_err());
    assert!(gradient_check(|_: &[f64]| Ok(f64::NAN), &[0.0], &[1.0], GradCheckConfig::default()).is_err());
}

#[test]
fn five_point_stencil_beats_central_difference() {
    // d/dx x^5 at x = 1 is 5; the central error is h^2 * 10, the five-point error h^4 * 4.
    let f = |p: &[f64]| Ok(libm::pow(p[0], 5.0));
    let cfg = GradCheckConfig { h: 1e-2, coords: 1, ..GradCheckConfig::default() };
    let central = gradient_check(f, &[1.0], &[5.0], cfg).unwrap().max_rel_error;
    let five = gradient_check(f, &[1.0], &[5.0], GradCheckConfig { five_point: true, ..cfg }).unwrap().max_rel_error;
    assert!((central - 2e-4).abs() < 1e-6, "{central}");
    assert!(five < 1e-8, "{five}");
}

#[test]
fn adam_clips_and_descends() {
    let mut store = ParamStore::<f64>::new();
    store.push("x", Tensor::row_vector(vec![1.0, -2.0]));
    let mut opt = Adam::new(AdamConfig { lr: 0.1, ..AdamConfig::default() }, &store);
    for _ in 0..200 {
        let x = store.get(0).clone();
        let grad = x.map(|v| 2.0 * v);
        opt.step(&mut store, vec![grad]).unwrap();
    }
    assert!(store.get(0).data().iter().all(|v| v.abs() < 0.05));
    let mut g: Vec<Tensor<f64>> = vec![Tensor::row_vector(vec![3.0, 4.0])];
    assert_eq!(clip_global_norm(&mut g, 0.25), 5.0);
    assert!((g[0].data()[0] - 0.15).abs() < 1e-12);
}

#[test]
fn soft_update_contracts() {
    let mut tgt = ParamStore::<f64>::new();
    tgt.push("w", rand_tensor(3, 3, 1));
    let mut online = ParamStore::<f64>::new();
    online.push("w", rand_tensor(3, 3, 2));
    let dist = |a: &ParamStore<f64>, b: &ParamStore<f64>| {
        a.flatten().iter().zip(b.flatten()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    };
    let before = dist(&tgt, &online);
    tgt.soft_update_from(&online, 0.01).unwrap();
    assert!((dist(&tgt, &online) - 0.99 * before).abs() < 1e-12);
    tgt.soft_update_from(&online, 1.0).unwrap();
    assert_eq!(tgt, online);
}
