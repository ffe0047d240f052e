use groupcap::gma::{apply_attention, distinctive_attention, similarity_matrix};
use groupcap_tensor::gradcheck::{check_inputs, GradCheck};
use groupcap_tensor::{Graph, Tensor};
use proptest::prelude::*;

fn t(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

/// Straight-line scalar evaluation of the attention, independent of the graph.
fn oracle(m0: &[Vec<f64>], others: &[Vec<Vec<f64>>], omega: f64, bias: f64) -> (Vec<f64>, Vec<f64>) {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            (dot / (na * nb)).clamp(-1.0, 1.0)
        }
    };
    let n0 = m0.len();
    let mut avg = vec![0.0; n0];
    for mk in others {
        for j in 0..n0 {
            let best = mk.iter().map(|r| cos(r, &m0[j])).fold(f64::NEG_INFINITY, f64::max);
            avg[j] += best / others.len() as f64;
        }
    }
    let top = avg.iter().map(|a| -a).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = avg.iter().map(|a| (-a - top).exp()).collect();
    let z: f64 = e.iter().sum();
    let d: Vec<f64> = e.iter().map(|x| x / z).collect();
    let a = d.iter().map(|x| omega * x + bias).collect();
    (d, a)
}

fn to_tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

fn matrix(max_rows: usize, width: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-2.0..2.0f64, width), 1..=max_rows)
}

type Instance = (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>, f64, f64);

/// Target memory, 1–3 similar memories, ω and b.
fn instance() -> impl Strategy<Value = Instance> {
    (1usize..=4).prop_flat_map(|w| {
        (
            matrix(6, w),
            prop::collection::vec(matrix(6, w), 1..=3),
            0.0..3.0f64,
            0.0..2.0f64,
        )
    })
}

#[test]
fn similarity_examples() {
    let r = similarity_matrix(&t(&[&[3.0, 4.0]]), &t(&[&[3.0, 4.0]])).unwrap();
    assert!((r.item() - 1.0).abs() < 1e-12);
    let m0 = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let r = similarity_matrix(&m0, &t(&[&[1.0, 0.0]])).unwrap();
    assert_eq!(r.shape(), &[1, 2]);
    assert!((r.at(0, 0) - 1.0).abs() < 1e-12 && r.at(0, 1).abs() < 1e-12);
    let scaled = similarity_matrix(&t(&[&[5.0, 0.0], &[0.0, 1.0]]), &t(&[&[1.0, 0.0]])).unwrap();
    assert_eq!(scaled.data(), r.data());
}

#[test]
fn zero_rows_have_zero_similarity() {
    let r = similarity_matrix(&t(&[&[0.0, 0.0], &[1.0, 1.0]]), &t(&[&[1.0, 0.0]])).unwrap();
    assert_eq!(r.at(0, 0), 0.0);
    assert!(r.is_finite());
}

#[test]
fn worked_fixture() {
    let m0 = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let res = distinctive_attention(&m0, &[t(&[&[1.0, 0.0]])], 1.0, 0.0).unwrap();
    assert!((res.summary[0][0] - 1.0).abs() < 1e-12 && res.summary[0][1].abs() < 1e-12);
    let expect = [0.26894, 0.73106];
    for j in 0..2 {
        assert!((res.distinctiveness[j] - expect[j]).abs() < 1e-4);
        assert!((res.attention[j] - expect[j]).abs() < 1e-4);
    }
    let m = apply_attention(&m0, &res.attention).unwrap();
    let want = [[0.26894, 0.0], [0.0, 0.73106]];
    for i in 0..2 {
        for j in 0..2 {
            assert!((m.at(i, j) - want[i][j]).abs() < 1e-4);
        }
    }
    assert_eq!(res.argmax(), 1);
}

#[test]
fn degenerate_cases() {
    let same = t(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]]);
    let res = distinctive_attention(&same, &[t(&[&[2.0, 4.0]])], 1.0, 0.5).unwrap();
    for d in &res.distinctiveness {
        assert!((d - 1.0 / 3.0).abs() < 1e-12);
    }
    let m0 = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let res = distinctive_attention(&m0, &[t(&[&[1.0, 0.0]])], 0.0, 0.7).unwrap();
    assert_eq!(res.attention, vec![0.7, 0.7]);
    assert!(distinctive_attention(&m0, &[], 1.0, 0.5).is_err());
    assert!(distinctive_attention(&m0, &[t(&[&[1.0, 0.0, 0.0]])], 1.0, 0.5).is_err());
}

#[test]
fn apply_attention_examples() {
    let m0 = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
    assert_eq!(apply_attention(&m0, &[1.0, 1.0]).unwrap(), m0);
    let m = apply_attention(&m0, &[0.0, 1.0]).unwrap();
    assert_eq!(m.row(0), &[0.0, 0.0]);
    assert!(apply_attention(&m0, &[1.0]).is_err());
}

#[test]
fn gradients_match_finite_differences() {
    let inputs = vec![
        t(&[&[0.3, -1.2, 0.5], &[1.1, 0.4, -0.7], &[-0.2, 0.9, 0.8]]),
        t(&[&[0.7, 0.1, -0.4], &[-1.0, 0.6, 0.2]]),
        t(&[&[0.5, 0.5, 0.1], &[0.2, -0.8, 1.3], &[0.9, 0.0, -0.6]]),
        Tensor::vector(vec![1.3]),
        Tensor::vector(vec![0.4]),
    ];
    let weights = t(&[&[0.3, -0.5, 1.1], &[0.8, 0.2, -0.4], &[-0.6, 0.7, 0.9]]);
    let report = check_inputs(&GradCheck::default(), &inputs, |g: &mut Graph, v| {
        let vars = groupcap::gma::attention_graph(g, v[0], &v[1..3], v[3], v[4]).map_err(|e| match e {
            groupcap::Error::Tensor(t) => t,
            other => panic!("{other}"),
        })?;
        let w = g.constant(weights.clone());
        let prod = g.mul(vars.weighted_memory, w)?;
        Ok(g.sum(prod))
    })
    .unwrap();
    assert!(report.passed(), "{:?}", report.worst);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn matches_scalar_oracle((m0, others, omega, bias) in instance()) {
        let tensors: Vec<Tensor> = others.iter().map(|m| to_tensor(m)).collect();
        let res = distinctive_attention(&to_tensor(&m0), &tensors, omega, bias).unwrap();
        let (d, a) = oracle(&m0, &others, omega, bias);
        for j in 0..m0.len() {
            prop_assert!((res.distinctiveness[j] - d[j]).abs() < 1e-9);
            prop_assert!((res.attention[j] - a[j]).abs() < 1e-9);
        }
        let total: f64 = res.distinctiveness.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        prop_assert!(res.distinctiveness.iter().all(|&x| x > 0.0 && x < 1.0) || m0.len() == 1);
        prop_assert!(res.similarity.iter().flatten().flatten().all(|&r| (-1.0..=1.0).contains(&r)));
        prop_assert!(res.attention.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn invariant_to_region_and_image_order(
        (m0, others, omega, bias) in instance(),
        rot in 0usize..6,
    ) {
        let base = distinctive_attention(
            &to_tensor(&m0),
            &others.iter().map(|m| to_tensor(m)).collect::<Vec<_>>(),
            omega,
            bias,
        )
        .unwrap();
        let permuted: Vec<Tensor> = others
            .iter()
            .rev()
            .map(|m| {
                let mut rows = m.clone();
                let n = rows.len();
                rows.rotate_left(rot % n);
                rows.reverse();
                to_tensor(&rows)
            })
            .collect();
        let res = distinctive_attention(&to_tensor(&m0), &permuted, omega, bias).unwrap();
        for j in 0..m0.len() {
            prop_assert!((res.distinctiveness[j] - base.distinctiveness[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn more_similar_regions_get_less_attention(
        summary in prop::collection::vec(-1.0..0.9f64, 2..6),
        pick in 0usize..6,
        bump in 0.01..0.1f64,
    ) {
        // Unit vectors at chosen similarity to a single similar region (1, 0).
        let unit = |c: f64| vec![c, (1.0 - c * c).sqrt()];
        let j = pick % summary.len();
        let mut raised = summary.clone();
        raised[j] += bump;
        let similar = [to_tensor(&[vec![1.0, 0.0]])];
        let before = distinctive_attention(&to_tensor(&summary.iter().map(|&c| unit(c)).collect::<Vec<_>>()), &similar, 1.0, 0.0).unwrap();
        let after = distinctive_attention(&to_tensor(&raised.iter().map(|&c| unit(c)).collect::<Vec<_>>()), &similar, 1.0, 0.0).unwrap();
        prop_assert!(after.distinctiveness[j] < before.distinctiveness[j]);
    }
}
