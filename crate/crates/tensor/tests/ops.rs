use groupcap_tensor::gradcheck::{check_inputs, GradCheck};
use groupcap_tensor::{Constraint, Graph, ParamStore, Tensor, TensorError, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mat(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

#[test]
fn matmul_identity_and_annihilation() {
    let mut g = Graph::new();
    let i = g.constant(Tensor::identity(2));
    let a = g.constant(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let out = g.matmul(i, a).unwrap();
    assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

    let x = g.constant(mat(&[&[1.0, 0.0]]));
    let y = g.constant(mat(&[&[0.0], &[5.0]]));
    let out = g.matmul(x, y).unwrap();
    assert_eq!(g.value(out).data(), &[0.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[4, 2]);
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let out = g.matmul(va, vb).unwrap();
    for i in 0..3 {
        for j in 0..2 {
            let mut s = 0.0;
            for k in 0..4 {
                s += a.at(i, k) * b.at(k, j);
            }
            assert!((g.value(out).at(i, j) - s).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_shape_mismatch() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(g.matmul(a, b), Err(TensorError::Shape { .. })));
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
    let s = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);

    let x = g.constant(Tensor::vector(vec![-1.0, 0.0]));
    let s = g.softmax(x, 0).unwrap();
    // e^-1 / (e^-1 + 1)
    let lo = (-1.0f64).exp() / ((-1.0f64).exp() + 1.0);
    assert!((g.value(s).data()[0] - 0.26894).abs() < 1e-4);
    assert!((g.value(s).data()[0] - lo).abs() < 1e-15);
    assert!((g.value(s).data()[1] - 0.73106).abs() < 1e-4);

    let x = g.constant(Tensor::vector(vec![1000.0; 3]));
    let s = g.softmax(x, 0).unwrap();
    for &p in g.value(s).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn softmax_along_first_axis() {
    let mut g = Graph::new();
    let x = g.constant(mat(&[&[0.0, 1.0], &[0.0, 3.0]]));
    let s = g.softmax(x, 0).unwrap();
    let v = g.value(s);
    assert!((v.at(0, 0) - 0.5).abs() < 1e-15);
    assert!((v.at(0, 1) + v.at(1, 1) - 1.0).abs() < 1e-15);
    assert!(v.at(1, 1) > v.at(0, 1));
}

fn layer_norm_of(row: Vec<f64>, gain: f64) -> Vec<f64> {
    let m = row.len();
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![1, m], row).unwrap());
    let w = g.constant(Tensor::full(&[m], gain));
    let b = g.constant(Tensor::zeros(&[m]));
    let y = g.layer_norm(x, w, b, 1e-5).unwrap();
    g.value(y).data().to_vec()
}

#[test]
fn layer_norm_examples() {
    assert_eq!(layer_norm_of(vec![1.0; 4], 1.0), vec![0.0; 4]);
    let y = layer_norm_of(vec![0.0, 2.0], 1.0);
    // mean 1, variance 1 -> (x - 1) / sqrt(1 + 1e-5)
    assert!((y[0] + 1.0).abs() < 1e-3 && (y[1] - 1.0).abs() < 1e-3);
    assert!((y[1] - 1.0 / (1.0f64 + 1e-5).sqrt()).abs() < 1e-15);
    assert!(layer_norm_of(vec![0.3, -1.0, 2.0], 0.0).iter().all(|&v| v == 0.0));
}

#[test]
fn layer_norm_rejects_width_one() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 1]));
    let w = g.constant(Tensor::zeros(&[1]));
    assert!(g.layer_norm(x, w, w, 1e-5).is_err());
}

#[test]
fn backward_examples() {
    let mut store = ParamStore::new();
    let p = store.add("p", Tensor::vector(vec![1.0, -2.0, 0.5]), Constraint::None).unwrap();
    let mut g = Graph::new();
    let v = g.param(&store, p);
    let s = g.sum(v);
    g.backward(s, &mut store).unwrap();
    assert_eq!(store.get(p).grad.data(), &[1.0, 1.0, 1.0]);
    // repeated backward accumulates
    g.backward(s, &mut store).unwrap();
    assert_eq!(store.get(p).grad.data(), &[2.0, 2.0, 2.0]);

    let q = store.add("q", Tensor::vector(vec![3.0]), Constraint::None).unwrap();
    let mut g = Graph::new();
    let v = g.param(&store, q);
    let sq = g.mul(v, v).unwrap();
    let s = g.sum(sq);
    g.backward(s, &mut store).unwrap();
    assert_eq!(store.get(q).grad.data(), &[6.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut store = ParamStore::new();
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[2]));
    assert_eq!(g.backward(x, &mut store), Err(TensorError::NonScalarLoss(vec![2])));
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(&mut rng, &[4, 5]);
        let b = random(&mut rng, &[5, 3]);
        let mut g = Graph::new();
        let (a, b) = (g.constant(a), g.constant(b));
        let m = g.matmul(a, b).unwrap();
        let s = g.softmax(m, 1).unwrap();
        g.value(s).clone()
    };
    assert_eq!(run().data(), run().data());
}

type Build = fn(&mut Graph, &[Var]) -> Result<Var, TensorError>;

/// Reduces an arbitrary output to a scalar with fixed, non-uniform weights so
/// every output element contributes a distinct gradient.
fn weighted_sum(g: &mut Graph, x: Var) -> Result<Var, TensorError> {
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|i| 0.3 + 0.17 * i as f64).collect())?;
    let w = g.constant(w);
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

fn cases() -> Vec<(&'static str, Vec<Vec<usize>>, Build)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| {
            let o = g.matmul(v[0], v[1])?;
            weighted_sum(g, o)
        }),
        ("matmul_t", vec![vec![3, 4], vec![2, 4]], |g, v| {
            let o = g.matmul_t(v[0], v[1])?;
            weighted_sum(g, o)
        }),
        ("transpose", vec![vec![2, 3]], |g, v| {
            let o = g.transpose(v[0])?;
            weighted_sum(g, o)
        }),
        ("add_sub_mul", vec![vec![2, 3], vec![2, 3]], |g, v| {
            let a = g.add(v[0], v[1])?;
            let s = g.sub(v[0], v[1])?;
            let o = g.mul(a, s)?;
            weighted_sum(g, o)
        }),
        ("add_row", vec![vec![3, 2], vec![2]], |g, v| {
            let o = g.add_row(v[0], v[1])?;
            let o = g.mul(o, o)?;
            weighted_sum(g, o)
        }),
        ("scale_rows", vec![vec![3, 2], vec![3]], |g, v| {
            let o = g.scale_rows(v[0], v[1])?;
            weighted_sum(g, o)
        }),
        ("scalar_ops", vec![vec![2, 2], vec![], vec![]], |g, v| {
            let o = g.mul_scalar(v[0], v[1])?;
            let o = g.add_scalar(o, v[2])?;
            let o = g.mul(o, o)?;
            weighted_sum(g, o)
        }),
        ("sigmoid", vec![vec![5]], |g, v| {
            let o = g.sigmoid(v[0]);
            weighted_sum(g, o)
        }),
        ("log_sigmoid", vec![vec![5]], |g, v| {
            let o = g.log_sigmoid(v[0]);
            weighted_sum(g, o)
        }),
        ("relu", vec![vec![6]], |g, v| {
            let o = g.relu(v[0]);
            weighted_sum(g, o)
        }),
        ("softmax_axis1", vec![vec![2, 4]], |g, v| {
            let o = g.softmax(v[0], 1)?;
            weighted_sum(g, o)
        }),
        ("softmax_axis0", vec![vec![3, 2]], |g, v| {
            let o = g.softmax(v[0], 0)?;
            weighted_sum(g, o)
        }),
        ("log_softmax", vec![vec![2, 5]], |g, v| {
            let o = g.log_softmax(v[0]);
            weighted_sum(g, o)
        }),
        ("layer_norm", vec![vec![3, 4], vec![4], vec![4]], |g, v| {
            let o = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(g, o)
        }),
        ("normalize_rows", vec![vec![3, 3]], |g, v| {
            let o = g.normalize_rows(v[0])?;
            weighted_sum(g, o)
        }),
        ("max_axis0", vec![vec![4, 3]], |g, v| {
            let o = g.max_axis0(v[0])?;
            weighted_sum(g, o)
        }),
        ("mean_axis0", vec![vec![4, 3]], |g, v| {
            let o = g.mean_axis0(v[0])?;
            weighted_sum(g, o)
        }),
        ("slice_concat", vec![vec![2, 5]], |g, v| {
            let a = g.slice_cols(v[0], 0, 2)?;
            let b = g.slice_cols(v[0], 2, 3)?;
            let o = g.concat_cols(&[b, a])?;
            let o = g.mul(o, o)?;
            weighted_sum(g, o)
        }),
        ("gather_pick", vec![vec![4, 3]], |g, v| {
            let rows = g.gather_rows(v[0], &[2, 0, 2])?;
            let o = g.pick(rows, &[(0, 1), (2, 2), (1, 0), (0, 1)])?;
            let o = g.mul(o, o)?;
            weighted_sum(g, o)
        }),
        ("reshape_clamp", vec![vec![2, 3]], |g, v| {
            let o = g.reshape(v[0], &[3, 2])?;
            let o = g.clamp(o, -1.0, 1.0);
            weighted_sum(g, o)
        }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn every_op_matches_finite_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = GradCheck::default();
        for (name, shapes, build) in cases() {
            let inputs: Vec<Tensor> = shapes.iter().map(|s| random(&mut rng, s)).collect();
            let report = check_inputs(&cfg, &inputs, build).unwrap();
            prop_assert!(report.passed(), "{name}: {:?}", report.worst);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-700.0f64..700.0, 1..12), rows in 1usize..4) {
        let cols = values.len();
        let data: Vec<f64> = (0..rows).flat_map(|r| values.iter().map(move |v| v - r as f64)).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![rows, cols], data).unwrap());
        let s = g.softmax(x, 1).unwrap();
        for r in 0..rows {
            let row = g.value(s).row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn softmax_shift_invariant(values in prop::collection::vec(-5.0f64..5.0, 2..8), c in -50.0f64..50.0) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(values.clone()));
        let y = g.constant(Tensor::vector(values.iter().map(|v| v + c).collect()));
        let (sx, sy) = (g.softmax(x, 0).unwrap(), g.softmax(y, 0).unwrap());
        for (a, b) in g.value(sx).data().iter().zip(g.value(sy).data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_standardizes_rows(row in prop::collection::vec(-2.0f64..2.0, 2..10)) {
        let m = row.len() as f64;
        let mean = row.iter().sum::<f64>() / m;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
        prop_assume!(var > 1e-6);
        let y = layer_norm_of(row.clone(), 1.0);
        let ym = y.iter().sum::<f64>() / m;
        let yv = y.iter().map(|v| (v - ym).powi(2)).sum::<f64>() / m;
        prop_assert!(ym.abs() < 1e-12);
        // variance shrinks by exactly var / (var + eps)
        prop_assert!((yv - var / (var + 1e-5)).abs() < 1e-12);
        // well-spread rows are unit variance to 1e-6
        let spread: Vec<f64> = row.iter().map(|v| v * 10.0).collect();
        let y = layer_norm_of(spread, 1.0);
        let yv = y.iter().map(|v| v * v).sum::<f64>() / m;
        prop_assert!((yv - 1.0).abs() < 1e-6 || var * 100.0 < 10.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn adam_projection_keeps_constrained_nonnegative(
        start in prop::collection::vec(0.0f64..0.05, 1..6),
        grads in prop::collection::vec(prop::collection::vec(-100.0f64..100.0, 6), 1..8),
        lr in 1e-4f64..0.1,
    ) {
        use groupcap_tensor::{Adam, AdamConfig};
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(start.clone()), Constraint::NonNegative).unwrap();
        let mut adam = Adam::new(AdamConfig { lr, ..Default::default() });
        for g in &grads {
            store.get_mut(id).grad.data_mut().copy_from_slice(&g[..start.len()]);
            adam.step(&mut store).unwrap();
            prop_assert!(store.get(id).value.data().iter().all(|&x| x >= 0.0));
        }
    }
}
