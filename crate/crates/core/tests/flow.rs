use mx_core::flow::{
    demo_flow, linear_backward, linear_forward, sgd_step, train_demo, FlowConfig, GemmOperand, QuantTrace,
    QuantizedLinearState, DEMO_SEED,
};
use mx_core::{dequantize_tensor, quantize_tensor, ElementFormat, Fp32Tensor, QuantConfig, RoundingMode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(seed: u64, shape: Vec<usize>) -> Fp32Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Fp32Tensor::new(shape, (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
}

/// Dequantize-then-FP32 pipeline with one FP32 partial per K-block.
fn oracle_product(a: &Fp32Tensor, b: &Fp32Tensor, k: usize) -> Vec<f32> {
    let (m, kk, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            let mut total = 0f32;
            for start in (0..kk).step_by(k) {
                let mut partial = 0f32;
                for l in start..(start + k).min(kk) {
                    partial += a.at2(i, l) * b.at2(l, j);
                }
                total += partial;
            }
            out.push(total);
        }
    }
    out
}

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn forward_matches_dequantize_oracle() {
    let cfg = QuantConfig::new(ElementFormat::E4M3).with_rounding(RoundingMode::RoundHalfAwayFromZero);
    let flow = FlowConfig::uniform(cfg);
    let w = gaussian(1, vec![70, 24]);
    let a = gaussian(2, vec![9, 70]);
    let state = QuantizedLinearState::new(w.clone(), &flow, &mut QuantTrace::default()).unwrap();
    let y = linear_forward(&state, &a, &flow, &mut QuantTrace::default()).unwrap();
    let qa = dequantize_tensor(&quantize_tensor(&a, 1, &cfg).unwrap());
    let qw = dequantize_tensor(&quantize_tensor(&w, 0, &cfg).unwrap());
    assert_eq!(bits(y.data()), bits(&oracle_product(&qa, &qw, 32)));
}

#[test]
fn backward_matches_dequantize_oracle() {
    let w_cfg = QuantConfig::new(ElementFormat::E2M1);
    let act_cfg = QuantConfig::new(ElementFormat::E3M2);
    let flow = FlowConfig::mixed(w_cfg, act_cfg);
    let w = gaussian(3, vec![40, 33]);
    let a = gaussian(4, vec![50, 40]);
    let dy = gaussian(5, vec![50, 33]);
    let state = QuantizedLinearState::new(w.clone(), &flow, &mut QuantTrace::default()).unwrap();
    let (da, dw) = linear_backward(&state, &a, &dy, &flow, &mut QuantTrace::default()).unwrap();

    let deq = |t: &Fp32Tensor, axis, cfg: &QuantConfig| dequantize_tensor(&quantize_tensor(t, axis, cfg).unwrap());
    let wt = mx_core::transpose_2d(&w).unwrap();
    let at = mx_core::transpose_2d(&a).unwrap();
    let expected_da = oracle_product(&deq(&dy, 1, &act_cfg), &deq(&wt, 0, &w_cfg), 32);
    let expected_dw = oracle_product(&deq(&at, 1, &act_cfg), &deq(&dy, 0, &act_cfg), 32);
    assert_eq!(bits(da.data()), bits(&expected_da));
    assert_eq!(bits(dw.data()), bits(&expected_dw));
}

#[test]
fn zero_input_gives_zero_output() {
    let flow = demo_flow(Some(ElementFormat::E3M2), Some(ElementFormat::E3M2), None);
    let state = QuantizedLinearState::new(gaussian(6, vec![16, 8]), &flow, &mut QuantTrace::default()).unwrap();
    let y = linear_forward(&state, &Fp32Tensor::zeros(vec![3, 16]), &flow, &mut QuantTrace::default()).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn sgd_keeps_master_weights_in_fp32() {
    let flow = demo_flow(Some(ElementFormat::E2M1), Some(ElementFormat::E3M2), None);
    let w = gaussian(7, vec![8, 4]);
    let dw = gaussian(8, vec![8, 4]);
    let mut state = QuantizedLinearState::new(w.clone(), &flow, &mut QuantTrace::default()).unwrap();
    sgd_step(&mut state, &dw, 0.01, &flow, &mut QuantTrace::default()).unwrap();
    let expected: Vec<f32> = w.data().iter().zip(dw.data()).map(|(w, g)| w - 0.01 * g).collect();
    assert_eq!(state.master_w.data(), expected.as_slice());
    let GemmOperand::Mx(qw) = &state.qw else { panic!("weights must be quantized") };
    assert_eq!(qw, &quantize_tensor(&state.master_w, 0, qw.cfg()).unwrap());

    let before = state.clone();
    sgd_step(&mut state, &dw, 0.0, &flow, &mut QuantTrace::default()).unwrap();
    assert_eq!(state, before);
}

#[test]
fn fp32_flow_is_plain_backprop() {
    let flow = FlowConfig::fp32();
    let w = Fp32Tensor::from_rows(&[[0.5f32, -1.0], [2.0, 0.25]]).unwrap();
    let a = Fp32Tensor::from_rows(&[[1.0f32, 3.0]]).unwrap();
    let dy = Fp32Tensor::from_rows(&[[1.0f32, -2.0]]).unwrap();
    let state = QuantizedLinearState::new(w, &flow, &mut QuantTrace::default()).unwrap();
    let mut trace = QuantTrace::default();
    let y = linear_forward(&state, &a, &flow, &mut trace).unwrap();
    assert_eq!(y.data(), [6.5, -0.25]);
    let (da, dw) = linear_backward(&state, &a, &dy, &flow, &mut trace).unwrap();
    assert_eq!(da.data(), [2.5, 1.5]);
    assert_eq!(dw.data(), [1.0, -2.0, 3.0, -6.0]);
    assert!(trace.is_empty());
}

#[test]
fn demo_training_is_reproducible() {
    let flow = demo_flow(Some(ElementFormat::E3M2), Some(ElementFormat::E3M2), None);
    let a = train_demo(&flow, DEMO_SEED, 20).unwrap();
    let b = train_demo(&flow, DEMO_SEED, 20).unwrap();
    assert_eq!(a, b);
    assert!(!a.diverged);
    assert!(a.final_loss().unwrap() < a.records[0].loss);
    let other = train_demo(&flow, DEMO_SEED + 1, 20).unwrap();
    assert_ne!(a.records[0].loss, other.records[0].loss);
}
