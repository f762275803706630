use promise_core::autodiff::{
    adam_step, finite_difference_check, relative_error, AdamConfig, AdamState, Axis, Graph, ParamStore, Tensor,
    DEFAULT_LR,
};
use promise_core::Error;
use proptest::prelude::*;

fn store_with(name: &str, shape: &[usize], data: Vec<f32>) -> ParamStore<f32> {
    let mut s = ParamStore::new();
    s.insert(name, Tensor::new(shape, data).unwrap()).unwrap();
    s
}

#[test]
fn square_sum_gradient_is_twice_input() {
    let store = ParamStore::<f32>::new();
    let mut g = Graph::new(&store);
    let x = g.input(&[3], vec![1.0, 2.0, 3.0], true).unwrap();
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq);
    assert_eq!(g.value(loss), &[14.0]);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.input(x).unwrap(), &[2.0, 4.0, 6.0]);
}

#[test]
fn non_scalar_loss_rejected() {
    let store = ParamStore::<f32>::new();
    let mut g = Graph::new(&store);
    let x = g.input(&[2, 2], vec![1.0; 4], true).unwrap();
    assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(s)) if s == vec![2, 2]));
}

#[test]
fn shape_mismatch_is_reported() {
    let store = ParamStore::<f32>::new();
    let mut g = Graph::new(&store);
    let a = g.input(&[2, 3], vec![0.0; 6], true).unwrap();
    let b = g.input(&[3, 2], vec![0.0; 6], true).unwrap();
    assert!(matches!(g.add(a, b), Err(Error::Shape { .. })));
    assert!(matches!(g.matmul(a, a), Err(Error::Shape { .. })));
    assert!(g.matmul(a, b).is_ok());
    assert!(Tensor::<f32>::new(&[2, 0], vec![]).is_err());
    assert!(Tensor::<f32>::new(&[2, 2], vec![0.0; 3]).is_err());
}

#[test]
fn frozen_parameter_receives_no_gradient() {
    let mut store = store_with("w", &[2], vec![0.5, -1.0]);
    store.insert("b", Tensor::new(&[2], vec![0.1, 0.2]).unwrap()).unwrap();
    let w = store.id("w").unwrap();
    let b = store.id("b").unwrap();
    store.set_trainable(w, false);
    let mut g = Graph::new(&store);
    let wv = g.param(w);
    let bv = g.param(b);
    let y = g.mul(wv, bv).unwrap();
    let loss = g.sum(y);
    let grads = g.backward(loss).unwrap();
    assert!(grads.param(w).is_none());
    assert_eq!(grads.param(b).unwrap(), &[0.5, -1.0]);
}

#[test]
fn optimizer_never_touches_frozen_tensors() {
    let mut store = store_with("frozen", &[3], vec![1.0, 2.0, 3.0]);
    store.insert("free", Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
    let f = store.id("frozen").unwrap();
    let t = store.id("free").unwrap();
    store.set_trainable(f, false);
    let before = store.get(f).data().to_vec();
    let hash = store.frozen_hash();
    let mut adam = AdamState::new(AdamConfig { lr: 0.1, ..Default::default() });
    for _ in 0..5 {
        let grads = {
            let mut g = Graph::new(&store);
            let a = g.param(f);
            let b = g.param(t);
            let y = g.mul(a, b).unwrap();
            let loss = g.sum(y);
            g.backward(loss).unwrap()
        };
        store.zero_grad();
        store.accumulate(&grads);
        adam_step(&mut store, &mut adam).unwrap();
    }
    assert_eq!(store.get(f).data(), before.as_slice());
    assert_eq!(store.frozen_hash(), hash);
    assert_ne!(store.get(t).data(), before.as_slice());
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut store = store_with("p", &[1], vec![1.0]);
    let id = store.id("p").unwrap();
    let grads = {
        let mut g = Graph::new(&store);
        let p = g.param(id);
        let loss = g.sum(p);
        g.backward(loss).unwrap()
    };
    assert_eq!(grads.param(id).unwrap(), &[1.0]);
    store.accumulate(&grads);
    let mut adam = AdamState::new(AdamConfig {
        lr: 0.1,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    });
    adam_step(&mut store, &mut adam).unwrap();
    assert!((store.get(id).data()[0] - 0.9).abs() < 1e-6);
    assert_eq!(adam.step_count(), 1);
}

#[test]
fn adam_zero_gradient_is_a_no_op_but_counts() {
    let mut store = store_with("p", &[2], vec![0.25, -4.0]);
    let id = store.id("p").unwrap();
    let mut adam = AdamState::new(AdamConfig::default());
    let zeros = {
        let mut g = Graph::new(&store);
        let p = g.param(id);
        let z = g.scale(p, 0.0);
        let loss = g.sum(z);
        g.backward(loss).unwrap()
    };
    store.accumulate(&zeros);
    adam_step(&mut store, &mut adam).unwrap();
    assert_eq!(store.get(id).data(), &[0.25, -4.0]);
    assert_eq!(adam.step_count(), 1);
}

#[test]
fn adam_defaults() {
    let c = AdamConfig::default();
    assert_eq!(DEFAULT_LR, 1e-5);
    assert_eq!((c.lr, c.beta1, c.beta2, c.eps), (1e-5, 0.9, 0.999, 1e-8));
}

#[test]
fn missing_gradient_on_trainable_tensor_is_an_error() {
    let mut store = store_with("p", &[1], vec![1.0]);
    let mut adam = AdamState::new(AdamConfig::default());
    assert!(matches!(adam_step(&mut store, &mut adam), Err(Error::MissingGrad(n)) if n == "p"));
    assert_eq!(adam.step_count(), 0);
}

#[test]
fn relative_error_floor() {
    assert_eq!(relative_error(0.0, 0.0), 0.0);
    assert!((relative_error(1.0, 1.001) - 0.001 / 1.001).abs() < 1e-12);
    assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-12);
}

#[test]
fn matmul_chain_gradient_in_single_precision() {
    let store = ParamStore::<f32>::new();
    let a = Tensor::new(&[3, 4], (0..12).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
    let b = Tensor::new(&[4, 2], (0..8).map(|i| (i as f32 * 0.91).cos()).collect()).unwrap();
    let err = finite_difference_check(
        &store,
        &[a, b],
        |g, v| {
            let y = g.matmul(v[0], v[1])?;
            let y = g.mul(y, y)?;
            Ok(g.mean(y))
        },
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-3, "{err}");
}

#[test]
fn gradients_accumulate_over_reused_parameters() {
    let store = store_with("w", &[2], vec![2.0, 3.0]);
    let id = store.id("w").unwrap();
    let mut g = Graph::new(&store);
    let a = g.param(id);
    let b = g.param(id);
    let y = g.mul(a, b).unwrap();
    let loss = g.sum(y);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.param(id).unwrap(), &[4.0, 6.0]);
}

#[test]
fn scale_grads_averages_a_batch() {
    let mut store = store_with("w", &[1], vec![1.0]);
    let id = store.id("w").unwrap();
    for k in 1..=4 {
        let grads = {
            let mut g = Graph::new(&store);
            let w = g.param(id);
            let y = g.scale(w, k as f64);
            let loss = g.sum(y);
            g.backward(loss).unwrap()
        };
        store.accumulate(&grads);
    }
    store.scale_grads(0.25);
    assert_eq!(store.get(id).grad().unwrap(), &[2.5]);
}

fn small_matrix() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..5, 2usize..7).prop_flat_map(|(r, c)| (Just(r), Just(c), prop::collection::vec(-20.0f64..20.0, r * c)))
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions((r, c, data) in small_matrix()) {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.input(&[r, c], data, false).unwrap();
        let y = g.softmax(x);
        for row in g.value(y).chunks(c) {
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_is_shift_invariant((r, c, data) in small_matrix(), shift in -50.0f64..50.0) {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.input(&[r, c], data.clone(), false).unwrap();
        let shifted = g.input(&[r, c], data.iter().map(|v| v + shift).collect(), false).unwrap();
        let a = g.softmax(x);
        let b = g.softmax(shifted);
        for (p, q) in g.value(a).iter().zip(g.value(b)) {
            prop_assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_rows_have_zero_mean_unit_variance((r, c, data) in small_matrix()) {
        let spread = data.chunks(c).all(|row| {
            let m = row.iter().sum::<f64>() / c as f64;
            row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / c as f64 > 1e-2
        });
        prop_assume!(spread);
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.input(&[r, c], data, false).unwrap();
        let gamma = g.constant(&[c], vec![1.0; c]).unwrap();
        let beta = g.constant(&[c], vec![0.0; c]).unwrap();
        let y = g.layer_norm(x, gamma, beta).unwrap();
        for row in g.value(y).chunks(c) {
            let m = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / c as f64;
            prop_assert!(m.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn concat_then_slice_recovers_parts((r, c, data) in small_matrix()) {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.input(&[r, c], data.clone(), false).unwrap();
        let y = g.input(&[r, c], data.iter().map(|v| -v).collect(), false).unwrap();
        let cat = g.concat(&[x, y], Axis::Cols).unwrap();
        prop_assert_eq!(g.shape(cat), &[r, 2 * c]);
        let back = g.slice(cat, Axis::Cols, 0, c).unwrap();
        prop_assert_eq!(g.value(back), data.as_slice());
        let t = g.transpose(x).unwrap();
        let tt = g.transpose(t).unwrap();
        prop_assert_eq!(g.value(tt), data.as_slice());
    }

    #[test]
    fn resize_to_same_size_is_identity(h in 1usize..6, w in 1usize..6, c in 1usize..4, seed in any::<u64>()) {
        let data: Vec<f64> = (0..h * w * c).map(|i| ((i as u64 ^ seed) % 97) as f64 / 97.0).collect();
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.input(&[h, w, c], data.clone(), false).unwrap();
        let y = g.resize_bilinear(x, h, w).unwrap();
        for (a, b) in g.value(y).iter().zip(&data) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn global_avg_pool_of_constant_map() {
    let store = ParamStore::<f32>::new();
    let mut g = Graph::new(&store);
    let x = g.input(&[3, 4, 2], [1.5f32, -2.0].repeat(12), false).unwrap();
    let p = g.global_avg_pool(x).unwrap();
    assert_eq!(g.value(p), &[1.5, -2.0]);
}

#[test]
fn graph_evaluation_is_deterministic() {
    let run = || {
        let store = ParamStore::<f32>::new();
        let mut g = Graph::new(&store);
        let x = g.input(&[6, 6, 2], (0..72).map(|i| (i as f32).sin()).collect(), true).unwrap();
        let w = g.input(&[3, 3, 2, 3], (0..54).map(|i| (i as f32 * 0.3).cos()).collect(), true).unwrap();
        let y = g.conv2d(x, w, 2, 1).unwrap();
        let y = g.gelu(y);
        let loss = g.mean(y);
        let grads = g.backward(loss).unwrap();
        (g.value(loss).to_vec(), grads.input(x).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}
