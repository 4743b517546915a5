use proptest::prelude::*;

use cmab_core::cmab::{stream_init, stream_update, CmabParams};
use cmab_core::cmanp::CmanpModel;
use cmab_core::config::ModelConfig;
use cmab_core::io::{format_real, load_weights_str, read_columns, weights_to_string};
use cmab_core::numerics::{init_matrix, logsumexp, softmax_rows, InitScheme, Matrix, RngState};

fn max_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn logsumexp_shifts_with_its_input(xs in prop::collection::vec(-50.0..50.0f64, 1..40), c in -500.0..500.0f64) {
        let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
        let (a, b) = (logsumexp(&shifted).unwrap(), logsumexp(&xs).unwrap() + c);
        prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
    }

    #[test]
    fn softmax_ignores_row_shifts(xs in prop::collection::vec(-30.0..30.0f64, 1..20), c in -700.0..700.0f64) {
        let m = Matrix::from_vec(1, xs.len(), xs.clone()).unwrap();
        let shifted = m.map(|v| v + c);
        prop_assert!(max_diff(&softmax_rows(&m), &softmax_rows(&shifted)) < 1e-12);
    }

    #[test]
    fn updates_compose(seed in 0u64..10_000, n in 1usize..20, a in 0usize..10, b in 0usize..10) {
        let mut rng = RngState::new(seed);
        let cfg = ModelConfig::new(8, 2, 1, 2, 4);
        let block = CmabParams::init(&mut rng, &cfg).unwrap();
        let data: Matrix = init_matrix(&mut rng, n + a + b, 8, InitScheme::Normal { std: 1.0 });
        let base = data.slice_rows(0, n).unwrap();
        let (ba, bb) = (data.slice_rows(n, n + a).unwrap(), data.slice_rows(n + a, n + a + b).unwrap());
        let mut two_steps = stream_init(&block, &base).unwrap();
        stream_update(&block, &mut two_steps, &ba).unwrap();
        stream_update(&block, &mut two_steps, &bb).unwrap();
        let mut one_step = stream_init(&block, &base).unwrap();
        stream_update(&block, &mut one_step, &data.slice_rows(n, n + a + b).unwrap()).unwrap();
        prop_assert_eq!(two_steps.count(), one_step.count());
        for (x, y) in two_steps.emb().iter().zip(one_step.emb()) {
            prop_assert!(max_diff(x, y) < 1e-12);
        }
    }

    #[test]
    fn reals_survive_csv(v in prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO) {
        let text = format!("x\n{}\n", format_real(v));
        let m = read_columns(text.as_bytes(), &["x"]).unwrap();
        prop_assert_eq!(m.get(0, 0).to_bits(), v.to_bits());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn weights_round_trip_bytewise(seed in 0u64..1_000_000) {
        let model = CmanpModel::init(&mut RngState::new(seed), ModelConfig::tiny()).unwrap();
        let first = weights_to_string(&model).unwrap();
        prop_assert_eq!(&weights_to_string(&load_weights_str(&first).unwrap()).unwrap(), &first);
    }
}
