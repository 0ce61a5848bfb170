use proptest::prelude::*;
use usst_numcore::selftest::primitive_cases;
use usst_numcore::{check_gradients, GradCheckConfig, Graph, Tensor};

#[test]
fn every_primitive_matches_finite_differences_over_ten_seeds() {
    let cfg = GradCheckConfig {
        step: 1e-5,
        tolerance: 1e-5,
        max_probes_per_input: None,
    };
    for seed in 0..10 {
        for case in primitive_cases(seed) {
            let report = check_gradients(&case.build, &case.inputs, &cfg).unwrap();
            assert!(report.passed(), "seed {seed} op {}: {report:?}", case.name);
        }
    }
}

#[test]
fn repeated_backward_is_bit_identical() {
    let case = primitive_cases(3).into_iter().find(|c| c.name == "layer_norm").unwrap();
    let mut g = Graph::new();
    let vars: Vec<_> = case.inputs.iter().map(|(_, t)| g.param(t.clone())).collect();
    let loss = (case.build)(&mut g, &vars).unwrap();
    let first = g.backward(loss).unwrap();
    let second = g.backward(loss).unwrap();
    for v in vars {
        assert_eq!(first.get(v).unwrap(), second.get(v).unwrap());
    }
}

fn rows(max_rows: usize, cols: usize) -> impl Strategy<Value = Vec<f64>> {
    (1..=max_rows).prop_flat_map(move |r| prop::collection::vec(-30.0f64..30.0, r * cols))
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(data in rows(5, 4), shift in -50.0f64..50.0) {
        let n = data.len() / 4;
        let mut g = Graph::new();
        let x = g.constant(Tensor::new([n, 4], data.clone()).unwrap());
        let y = g.softmax_lastdim(x).unwrap();
        let shifted = g.constant(Tensor::new([n, 4], data.iter().map(|v| v + shift).collect()).unwrap());
        let ys = g.softmax_lastdim(shifted).unwrap();
        for (row, rs) in g.value(y).data().chunks(4).zip(g.value(ys).data().chunks(4)) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for (a, b) in row.iter().zip(rs) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn concat_then_split_is_identity(a in rows(4, 3), b in rows(4, 3)) {
        let (na, nb) = (a.len() / 3, b.len() / 3);
        let mut g = Graph::new();
        let va = g.constant(Tensor::new([na, 3], a.clone()).unwrap());
        let vb = g.constant(Tensor::new([nb, 3], b.clone()).unwrap());
        let c = g.concat(&[va, vb], 0).unwrap();
        let parts = g.split(c, 0, &[na, nb]).unwrap();
        prop_assert_eq!(g.value(parts[0]).data(), &a[..]);
        prop_assert_eq!(g.value(parts[1]).data(), &b[..]);
    }
}
