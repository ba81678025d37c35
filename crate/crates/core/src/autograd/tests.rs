use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Checks d(Σ r ⊙ f(inputs))/d input against central differences (f32, loose tolerance).
fn check_grad(inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let probe = {
        let mut g = Graph::training();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars);
        random(&mut rng, g.value(out).rows(), g.value(out).cols())
    };
    let objective = |g: &mut Graph, vars: &[Var]| {
        let out = build(g, vars);
        let s: f32 = g.value(out).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum();
        g.scalar_with_grads(s, &[out], vec![probe.clone()])
    };

    let mut g = Graph::training();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = objective(&mut g, &vars);
    let grads = g.backward(loss);

    let h = 1e-2f32;
    for (which, base) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[which]).cloned().unwrap_or_else(|| Tensor::zeros(base.rows(), base.cols()));
        for idx in 0..base.data().len() {
            let eval = |delta: f32| {
                let mut perturbed = inputs.clone();
                perturbed[which].data_mut()[idx] += delta;
                let mut g = Graph::inference();
                let vars: Vec<Var> = perturbed.into_iter().map(|t| g.input(t)).collect();
                let out = objective(&mut g, &vars);
                g.value(out).item() as f64
            };
            let numeric = ((eval(h) - eval(-h)) / (2.0 * h as f64)) as f32;
            let a = analytic.data()[idx];
            let tol = 2e-2 * (1.0 + numeric.abs().max(a.abs()));
            assert!(
                (a - numeric).abs() < tol,
                "input {which} elem {idx}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

#[test]
fn linear_and_matmul_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&mut rng, 5, 4);
    let w = random(&mut rng, 4, 3);
    let b = random(&mut rng, 1, 3);
    check_grad(vec![x.clone(), w.clone(), b], |g, v| g.linear(v[0], v[1], Some(v[2])));
    check_grad(vec![x, w], |g, v| g.matmul(v[0], v[1]));
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, 4, 5);
    let y = random(&mut rng, 4, 5);
    check_grad(vec![x.clone()], |g, v| g.gelu(v[0]));
    check_grad(vec![x.clone()], |g, v| g.sigmoid(v[0]));
    check_grad(vec![x.clone(), y], |g, v| g.add(v[0], v[1]));
    check_grad(vec![x.clone()], |g, v| g.scale(v[0], -1.5));
    check_grad(vec![x], |g, v| g.l2_normalize_rows(v[0], 1e-6));
}

#[test]
fn tiling_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, 6, 3);
    let y = random(&mut rng, 2, 3);
    check_grad(vec![x, y.clone()], |g, v| g.add_tiled(v[0], v[1]));
    check_grad(vec![y], |g, v| g.tile_rows(v[0], 3));
}

#[test]
fn normalization_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, 6, 4);
    let gamma = random(&mut rng, 1, 4);
    let beta = random(&mut rng, 1, 4);
    check_grad(vec![x.clone(), gamma.clone(), beta.clone()], |g, v| {
        g.layer_norm(v[0], v[1], v[2], 1e-5)
    });
    check_grad(vec![x.clone(), gamma.clone(), beta.clone()], |g, v| {
        g.batch_norm(v[0], v[1], v[2], 1e-5).0
    });
    let mean = vec![0.1, -0.2, 0.3, 0.0];
    let var = vec![0.5, 1.5, 2.0, 0.9];
    check_grad(vec![x, gamma, beta], move |g, v| g.affine_norm(v[0], &mean, &var, v[1], v[2], 1e-5));
}

#[test]
fn gather_and_pool_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, 5, 3);
    let idx = Rc::new(vec![4, 0, 0, 2]);
    check_grad(vec![x.clone()], move |g, v| g.index_rows(v[0], Rc::clone(&idx)));
    let assign = Rc::new(vec![1, 0, 1, 2, 1]);
    check_grad(vec![x.clone()], move |g, v| g.segment_mean(v[0], Rc::clone(&assign), 3));
    let y = random(&mut rng, 5, 2);
    check_grad(vec![x.clone(), y], |g, v| g.concat_cols(v[0], v[1]));
    let z = random(&mut rng, 2, 3);
    check_grad(vec![x, z], |g, v| g.concat_rows(&[v[1], v[0], v[1]]));
}

#[test]
fn group_dot_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let z = random(&mut rng, 2 * 5, 3);
    let f = random(&mut rng, 2 * 2, 3);
    check_grad(vec![z, f], |g, v| g.group_dot(v[0], v[1], 2));
}

#[test]
fn attention_gradients_with_shared_keys_and_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let q = random(&mut rng, 5, 4);
    let k = random(&mut rng, 4, 4);
    let v = random(&mut rng, 4, 6);
    let tasks = Rc::new(vec![
        AttnTask { q_start: 0, q_len: 3, k_start: 0, k_len: 4 },
        AttnTask { q_start: 3, q_len: 2, k_start: 1, k_len: 3 },
        AttnTask { q_start: 0, q_len: 2, k_start: 0, k_len: 2 },
    ]);
    let spec = AttnSpec { tasks, heads: 2, key_valid: Some(Rc::new(vec![true, true, false, true])) };
    check_grad(vec![q, k, v], move |g, vars| g.attention(vars[0], vars[1], vars[2], &spec));
}

#[test]
fn attention_matches_naive_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let q = random(&mut rng, 3, 2);
    let k = random(&mut rng, 4, 2);
    let v = random(&mut rng, 4, 2);
    let mut g = Graph::inference();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let spec = AttnSpec { tasks: Rc::new(AttnTask::blocks(1, 3, 4)), heads: 1, key_valid: None };
    let out = g.attention(qv, kv, vv, &spec);
    let scale = 1.0 / 2f32.sqrt();
    for i in 0..3 {
        let scores: Vec<f32> = (0..4)
            .map(|j| (q.get(i, 0) * k.get(j, 0) + q.get(i, 1) * k.get(j, 1)) * scale)
            .collect();
        let m = scores.iter().copied().fold(f32::MIN, f32::max);
        let e: Vec<f32> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f32 = e.iter().sum();
        for c in 0..2 {
            let expect: f32 = (0..4).map(|j| e[j] / z * v.get(j, c)).sum();
            assert!((g.value(out).get(i, c) - expect).abs() < 1e-5);
        }
    }
}

#[test]
fn masked_keys_do_not_influence_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let q = random(&mut rng, 2, 4);
    let k = random(&mut rng, 3, 4);
    let v = random(&mut rng, 3, 4);
    let spec = AttnSpec {
        tasks: Rc::new(AttnTask::blocks(1, 2, 3)),
        heads: 2,
        key_valid: Some(Rc::new(vec![true, false, true])),
    };
    let run = |k: Tensor, v: Tensor| {
        let mut g = Graph::inference();
        let (a, b, c) = (g.constant(q.clone()), g.constant(k), g.constant(v));
        let o = g.attention(a, b, c, &spec);
        g.value(o).clone()
    };
    let base = run(k.clone(), v.clone());
    let (mut k2, mut v2) = (k, v);
    for c in 0..4 {
        k2.row_mut(1)[c] = 100.0 + c as f32;
        v2.row_mut(1)[c] = -50.0;
    }
    assert_eq!(base, run(k2, v2));
}

#[test]
fn untracked_graph_keeps_no_gradients() {
    let mut g = Graph::inference();
    let x = g.input(Tensor::filled(2, 2, 1.0));
    let y = g.scale(x, 2.0);
    assert!(!g.requires_grad(y));
}
