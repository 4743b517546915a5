mod common;

use cmab_core::cmab::{stream_init, stream_update, CmabParams};
use cmab_core::config::ModelConfig;
use cmab_core::numerics::RngState;

use common::{
    ca1_scores, direct_c_stream, forced_scores_block, normal, normwise_rel, oracle_stream,
};

fn finite<F: num_traits::Float>(emb: &[Vec<F>], c: &[F]) -> bool {
    c.iter().all(|v| v.is_finite()) && emb.iter().flatten().all(|v| v.is_finite())
}

#[test]
fn log_space_survives_scores_where_linear_form_overflows_f64() {
    let mut rng = RngState::new(41);
    let cfg = ModelConfig::new(16, 2, 1, 4, 4);
    let input = normal(&mut rng, 40, 16);
    let block = forced_scores_block(&mut rng, &cfg, &input, 800.0);
    let mut state = stream_init(&block, &input.slice_rows(0, 10).unwrap()).unwrap();
    stream_update(&block, &mut state, &input.slice_rows(10, 40).unwrap()).unwrap();
    assert!(state.is_finite());
    for (h, (emb, log_c)) in oracle_stream(&block, &input).iter().enumerate() {
        assert!(normwise_rel(state.emb()[h].as_slice(), emb.as_slice()) < 1e-6);
        for (a, b) in state.log_c()[h].iter().zip(log_c) {
            assert!((a - b).abs() / b.abs().max(1.0) < 1e-6, "{a} vs {b}");
        }
    }
    let overflowed = ca1_scores(&block, &input).iter().any(|(s, v)| {
        let (emb, c) = direct_c_stream::<f64>(s, v, 10);
        !finite(&emb, &c)
    });
    assert!(overflowed);
}

#[test]
fn linear_form_overflows_f32_on_long_streams_at_moderate_scores() {
    let mut rng = RngState::new(42);
    let cfg = ModelConfig::new(8, 1, 1, 2, 2);
    // Identical rows pin every score at the forced maximum.
    let row = normal(&mut rng, 1, 8);
    let input = cmab_core::Matrix::from_fn(8192, 8, |_, c| row.get(0, c));
    let mut block = forced_scores_block(&mut rng, &cfg, &input, 80.0);
    let peak_row = &ca1_scores(&block, &input)[0].0;
    if peak_row.as_slice().iter().all(|&s| s < 80.0 - 1e-9) {
        block.ca1.w_q = block.ca1.w_q.scale(-1.0);
    }
    let (scores, values) = &ca1_scores(&block, &input)[0];
    assert!(scores.as_slice().iter().any(|&s| (s - 80.0).abs() < 1e-9));
    let (emb, c) = direct_c_stream::<f32>(scores, values, 128);
    assert!(!finite(&emb, &c));
    let block32: CmabParams<f32> = block.cast();
    let input32 = input.cast::<f32>();
    let mut state = stream_init(&block32, &input32.slice_rows(0, 128).unwrap()).unwrap();
    for start in (128..8192).step_by(128) {
        stream_update(
            &block32,
            &mut state,
            &input32.slice_rows(start, start + 128).unwrap(),
        )
        .unwrap();
    }
    assert!(state.is_finite());
    assert_eq!(state.count(), 8192);
}

#[test]
fn linear_form_is_fine_at_eighty_in_f64() {
    let mut rng = RngState::new(43);
    let cfg = ModelConfig::new(16, 2, 1, 4, 4);
    let input = normal(&mut rng, 64, 16);
    let block = forced_scores_block(&mut rng, &cfg, &input, 80.0);
    for (s, v) in ca1_scores(&block, &input) {
        let (emb, c) = direct_c_stream::<f64>(&s, &v, 16);
        assert!(finite(&emb, &c));
    }
}
