//! Quantized training flow for linear layers.
//!
//! Every GEMM quantizes both of its inputs along the reduction axis and
//! produces FP32. Everything else (bias, activation, loss, optimizer) stays in
//! FP32. The optimizer updates an FP32 master copy of each weight matrix, from
//! which `W` and `Wᵀ` are re-quantized as two independent tensors.
//!
//! For a layer `y = a·W` with `a: [B, in]` and `W: [in, out]`:
//!
//! | GEMM             | left operand        | right operand        |
//! |------------------|---------------------|----------------------|
//! | `y = a·W`        | `a`, act, axis 1    | `W`, weight, axis 0  |
//! | `da = dy·Wᵀ`     | `dy`, grad, axis 1  | `Wᵀ`, weight, axis 0 |
//! | `dW = aᵀ·dy`     | `aᵀ`, act, axis 1   | `dy`, grad, axis 0   |
//!
//! `aᵀ` is transposed in FP32 and then quantized, never transposed after
//! quantization.

use std::borrow::Cow;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::block::QuantConfig;
use crate::element::{ElementFormat, RoundingMode};
use crate::error::{MxError, Result};
use crate::linalg::{fp32_gemm, mx_gemm};
use crate::tensor::{dequantize_tensor, quantize_tensor, transpose_2d, Fp32Tensor, MxTensor};

/// Number format for one GEMM operand role.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GemmPrecision {
    /// No quantization.
    Fp32,
    Mx(QuantConfig),
}

impl GemmPrecision {
    pub fn element_fmt(&self) -> Option<ElementFormat> {
        match self {
            GemmPrecision::Fp32 => None,
            GemmPrecision::Mx(cfg) => Some(cfg.element_fmt),
        }
    }
}

/// Formats for weights, activations and gradients.
///
/// Gradients use the activation format unless overridden.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlowConfig {
    pub weight: GemmPrecision,
    pub act: GemmPrecision,
    pub grad: Option<GemmPrecision>,
}

impl FlowConfig {
    pub fn fp32() -> Self {
        FlowConfig {
            weight: GemmPrecision::Fp32,
            act: GemmPrecision::Fp32,
            grad: None,
        }
    }

    pub fn uniform(cfg: QuantConfig) -> Self {
        FlowConfig::mixed(cfg, cfg)
    }

    pub fn mixed(weight: QuantConfig, act: QuantConfig) -> Self {
        FlowConfig {
            weight: GemmPrecision::Mx(weight),
            act: GemmPrecision::Mx(act),
            grad: None,
        }
    }

    pub fn with_grad(mut self, grad: GemmPrecision) -> Self {
        self.grad = Some(grad);
        self
    }

    pub fn grad_precision(&self) -> GemmPrecision {
        self.grad.unwrap_or(self.act)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OperandRole {
    Activation,
    Weight,
    WeightTranspose,
    Gradient,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantEvent {
    pub role: OperandRole,
    pub fmt: ElementFormat,
    pub axis: usize,
    pub shape: Vec<usize>,
}

/// Log of every MX quantization performed by the flow.
#[derive(Debug, Clone, Default)]
pub struct QuantTrace {
    events: Vec<QuantEvent>,
}

impl QuantTrace {
    pub fn events(&self) -> &[QuantEvent] {
        &self.events
    }

    pub fn count(&self, role: OperandRole) -> usize {
        self.events.iter().filter(|e| e.role == role).count()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn clear(&mut self) {
        self.events.clear();
    }
}

/// A GEMM input, either quantized or passed through in FP32.
#[derive(Debug, Clone, PartialEq)]
pub enum GemmOperand {
    Fp32(Fp32Tensor),
    Mx(MxTensor),
}

impl GemmOperand {
    pub fn dequantized(&self) -> Cow<'_, Fp32Tensor> {
        match self {
            GemmOperand::Fp32(t) => Cow::Borrowed(t),
            GemmOperand::Mx(mt) => Cow::Owned(dequantize_tensor(mt)),
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            GemmOperand::Fp32(t) => t.shape(),
            GemmOperand::Mx(mt) => mt.shape(),
        }
    }
}

fn prepare(
    t: &Fp32Tensor,
    axis: usize,
    precision: GemmPrecision,
    role: OperandRole,
    trace: &mut QuantTrace,
) -> Result<GemmOperand> {
    match precision {
        GemmPrecision::Fp32 => Ok(GemmOperand::Fp32(t.clone())),
        GemmPrecision::Mx(cfg) => {
            let mt = quantize_tensor(t, axis, &cfg)?;
            trace.events.push(QuantEvent {
                role,
                fmt: cfg.element_fmt,
                axis,
                shape: t.shape().to_vec(),
            });
            Ok(GemmOperand::Mx(mt))
        }
    }
}

/// Multiplies two prepared operands. Mixed FP32/MX pairs fall back to FP32 on
/// the dequantized MX side.
pub fn gemm(a: &GemmOperand, b: &GemmOperand) -> Result<Fp32Tensor> {
    match (a, b) {
        (GemmOperand::Mx(qa), GemmOperand::Mx(qb)) => mx_gemm(qa, qb),
        _ => fp32_gemm(&a.dequantized(), &b.dequantized()),
    }
}

/// FP32 master weights plus independently quantized `W` and `Wᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLinearState {
    /// `[in, out]`
    pub master_w: Fp32Tensor,
    /// `W` scaled along `in`.
    pub qw: GemmOperand,
    /// `Wᵀ` (shape `[out, in]`) scaled along `out`.
    pub qwt: GemmOperand,
}

impl QuantizedLinearState {
    pub fn new(master_w: Fp32Tensor, flow: &FlowConfig, trace: &mut QuantTrace) -> Result<Self> {
        if master_w.rank() != 2 {
            return Err(MxError::RankError {
                rank: master_w.rank(),
                expected: "2",
            });
        }
        let (qw, qwt) = quantize_weights(&master_w, flow, trace)?;
        Ok(QuantizedLinearState { master_w, qw, qwt })
    }

    pub fn in_features(&self) -> usize {
        self.master_w.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.master_w.shape()[1]
    }

    pub fn requantize(&mut self, flow: &FlowConfig, trace: &mut QuantTrace) -> Result<()> {
        let (qw, qwt) = quantize_weights(&self.master_w, flow, trace)?;
        self.qw = qw;
        self.qwt = qwt;
        Ok(())
    }
}

fn quantize_weights(
    w: &Fp32Tensor,
    flow: &FlowConfig,
    trace: &mut QuantTrace,
) -> Result<(GemmOperand, GemmOperand)> {
    let qw = prepare(w, 0, flow.weight, OperandRole::Weight, trace)?;
    let qwt = prepare(&transpose_2d(w)?, 0, flow.weight, OperandRole::WeightTranspose, trace)?;
    Ok((qw, qwt))
}

fn check_input(name: &str, t: &Fp32Tensor, features: usize) -> Result<()> {
    if t.rank() != 2 || t.shape()[1] != features {
        return Err(MxError::ShapeMismatch(format!(
            "{name} has shape {:?}, expected [batch, {features}]",
            t.shape()
        )));
    }
    Ok(())
}

/// `a·W` with `a` quantized in the activation format.
pub fn linear_forward(
    state: &QuantizedLinearState,
    a: &Fp32Tensor,
    flow: &FlowConfig,
    trace: &mut QuantTrace,
) -> Result<Fp32Tensor> {
    check_input("input", a, state.in_features())?;
    let qa = prepare(a, 1, flow.act, OperandRole::Activation, trace)?;
    gemm(&qa, &state.qw)
}

/// Returns `(da, dW)` for upstream gradient `dy`.
pub fn linear_backward(
    state: &QuantizedLinearState,
    a: &Fp32Tensor,
    dy: &Fp32Tensor,
    flow: &FlowConfig,
    trace: &mut QuantTrace,
) -> Result<(Fp32Tensor, Fp32Tensor)> {
    check_input("input", a, state.in_features())?;
    check_input("output gradient", dy, state.out_features())?;
    if a.shape()[0] != dy.shape()[0] {
        return Err(MxError::ShapeMismatch(format!(
            "batch sizes differ: {} vs {}",
            a.shape()[0],
            dy.shape()[0]
        )));
    }
    let grad = flow.grad_precision();

    let q_dy = prepare(dy, 1, grad, OperandRole::Gradient, trace)?;
    let da = gemm(&q_dy, &state.qwt)?;

    let q_at = prepare(&transpose_2d(a)?, 1, flow.act, OperandRole::Activation, trace)?;
    let q_dy_batch = prepare(dy, 0, grad, OperandRole::Gradient, trace)?;
    let dw = gemm(&q_at, &q_dy_batch)?;
    Ok((da, dw))
}

/// `master_w -= lr·dW` in FP32, then re-derives `W` and `Wᵀ`.
pub fn sgd_step(
    state: &mut QuantizedLinearState,
    dw: &Fp32Tensor,
    lr: f32,
    flow: &FlowConfig,
    trace: &mut QuantTrace,
) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(MxError::InvalidConfig(format!("learning rate {lr} must be finite and non-negative")));
    }
    if dw.shape() != state.master_w.shape() {
        return Err(MxError::ShapeMismatch(format!(
            "gradient {:?} vs weight {:?}",
            dw.shape(),
            state.master_w.shape()
        )));
    }
    for (w, &g) in state.master_w.data_mut().iter_mut().zip(dw.data()) {
        *w -= lr * g;
    }
    state.requantize(flow, trace)
}

/// Input width of the demo network.
pub const DEMO_INPUTS: usize = 16;
pub const DEMO_HIDDEN: usize = 32;
pub const DEMO_TEACHER_HIDDEN: usize = 8;
pub const DEMO_SAMPLES: usize = 2048;
pub const DEMO_STEPS: usize = 500;
pub const DEMO_SEED: u64 = 7;
pub const DEMO_LR: f32 = 0.2;
pub const DEMO_NOISE: f32 = 0.5;
const DEMO_DATA_SEED: u64 = 0x4d58_4441_5441;

/// Fixed synthetic regression task: a random tanh teacher network plus noise.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoData {
    /// `[DEMO_SAMPLES, DEMO_INPUTS]`
    pub x: Fp32Tensor,
    /// `[DEMO_SAMPLES, 1]`
    pub y: Fp32Tensor,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f32) -> Fp32Tensor {
    let dist = Normal::new(0.0f32, std).unwrap();
    Fp32Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| dist.sample(rng)).collect()).unwrap()
}

pub fn demo_dataset() -> DemoData {
    let mut rng = ChaCha8Rng::seed_from_u64(DEMO_DATA_SEED);
    let x = gaussian_matrix(&mut rng, DEMO_SAMPLES, DEMO_INPUTS, 1.0);
    let w1 = gaussian_matrix(&mut rng, DEMO_INPUTS, DEMO_TEACHER_HIDDEN, 1.0 / (DEMO_INPUTS as f32).sqrt());
    let w2 = gaussian_matrix(&mut rng, DEMO_TEACHER_HIDDEN, 1, 1.0);
    let h = fp32_gemm(&x, &w1).unwrap().map(f32::tanh);
    let mut y = fp32_gemm(&h, &w2).unwrap();
    for v in y.data_mut() {
        let noise: f32 = StandardNormal.sample(&mut rng);
        *v += DEMO_NOISE * noise;
    }
    DemoData { x, y }
}

/// Two-layer tanh network `x → tanh(x·W1 + b1) → ·W2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub l1: QuantizedLinearState,
    pub b1: Vec<f32>,
    pub l2: QuantizedLinearState,
    pub b2: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub dw1: Fp32Tensor,
    pub db1: Vec<f32>,
    pub dw2: Fp32Tensor,
    pub db2: Vec<f32>,
}

impl MlpGrads {
    pub fn norm(&self) -> f64 {
        self.dw1
            .data()
            .iter()
            .chain(&self.db1)
            .chain(self.dw2.data())
            .chain(&self.db2)
            .map(|&g| (g as f64) * (g as f64))
            .sum::<f64>()
            .sqrt()
    }
}

fn add_bias(t: &mut Fp32Tensor, bias: &[f32]) {
    for row in t.data_mut().chunks_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn column_sums(t: &Fp32Tensor) -> Vec<f32> {
    let cols = t.shape()[1];
    let mut sums = vec![0f32; cols];
    for row in t.data().chunks(cols) {
        for (s, v) in sums.iter_mut().zip(row) {
            *s += v;
        }
    }
    sums
}

impl Mlp {
    pub fn init(seed: u64, flow: &FlowConfig, trace: &mut QuantTrace) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w1 = gaussian_matrix(&mut rng, DEMO_INPUTS, DEMO_HIDDEN, 1.0 / (DEMO_INPUTS as f32).sqrt());
        let w2 = gaussian_matrix(&mut rng, DEMO_HIDDEN, 1, 1.0 / (DEMO_HIDDEN as f32).sqrt());
        Ok(Mlp {
            l1: QuantizedLinearState::new(w1, flow, trace)?,
            b1: vec![0.0; DEMO_HIDDEN],
            l2: QuantizedLinearState::new(w2, flow, trace)?,
            b2: vec![0.0; 1],
        })
    }

    /// Returns the hidden activations and the output.
    pub fn forward(&self, x: &Fp32Tensor, flow: &FlowConfig, trace: &mut QuantTrace) -> Result<(Fp32Tensor, Fp32Tensor)> {
        let mut z = linear_forward(&self.l1, x, flow, trace)?;
        add_bias(&mut z, &self.b1);
        let h = z.map(f32::tanh);
        let mut y = linear_forward(&self.l2, &h, flow, trace)?;
        add_bias(&mut y, &self.b2);
        Ok((h, y))
    }

    /// Mean squared error over `data` and its gradients.
    pub fn loss_and_grads(
        &self,
        data: &DemoData,
        flow: &FlowConfig,
        trace: &mut QuantTrace,
    ) -> Result<(f64, MlpGrads)> {
        let (h, y) = self.forward(&data.x, flow, trace)?;
        let n = y.len() as f32;
        let mut loss = 0f64;
        let mut dy = y.clone();
        for (d, &t) in dy.data_mut().iter_mut().zip(data.y.data()) {
            let diff = *d - t;
            loss += (diff as f64) * (diff as f64);
            *d = 2.0 * diff / n;
        }
        loss /= n as f64;

        let (dh, dw2) = linear_backward(&self.l2, &h, &dy, flow, trace)?;
        let mut dz = dh;
        for (g, &a) in dz.data_mut().iter_mut().zip(h.data()) {
            *g *= 1.0 - a * a;
        }
        let (_, dw1) = linear_backward(&self.l1, &data.x, &dz, flow, trace)?;
        Ok((
            loss,
            MlpGrads {
                dw1,
                db1: column_sums(&dz),
                dw2,
                db2: column_sums(&dy),
            },
        ))
    }

    pub fn apply(&mut self, grads: &MlpGrads, lr: f32, flow: &FlowConfig, trace: &mut QuantTrace) -> Result<()> {
        sgd_step(&mut self.l1, &grads.dw1, lr, flow, trace)?;
        sgd_step(&mut self.l2, &grads.dw2, lr, flow, trace)?;
        for (b, g) in self.b1.iter_mut().zip(&grads.db1) {
            *b -= lr * g;
        }
        for (b, g) in self.b2.iter_mut().zip(&grads.db2) {
            *b -= lr * g;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub records: Vec<TrainRecord>,
    /// Set when the loss became non-finite; training stops at that step.
    pub diverged: bool,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }
}

/// Full-batch SGD on the demo task. Each record holds the loss before that
/// step's update and the norm of the gradient used for it.
pub fn train_demo(flow: &FlowConfig, seed: u64, steps: usize) -> Result<TrainOutcome> {
    train_demo_traced(flow, seed, steps, &mut QuantTrace::default())
}

pub fn train_demo_traced(flow: &FlowConfig, seed: u64, steps: usize, trace: &mut QuantTrace) -> Result<TrainOutcome> {
    let data = demo_dataset();
    let mut model = Mlp::init(seed, flow, trace)?;
    let mut records = Vec::with_capacity(steps);
    for step in 0..steps {
        let (loss, grads) = model.loss_and_grads(&data, flow, trace)?;
        let grad_norm = grads.norm();
        records.push(TrainRecord { step, loss, grad_norm });
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Ok(TrainOutcome { records, diverged: true });
        }
        model.apply(&grads, DEMO_LR, flow, trace)?;
    }
    Ok(TrainOutcome { records, diverged: false })
}

/// Flow used by the demo for a format triple, rounding half away from zero.
pub fn demo_flow(weight: Option<ElementFormat>, act: Option<ElementFormat>, grad: Option<Option<ElementFormat>>) -> FlowConfig {
    let precision = |fmt: Option<ElementFormat>| match fmt {
        None => GemmPrecision::Fp32,
        Some(f) => GemmPrecision::Mx(QuantConfig::new(f).with_rounding(RoundingMode::RoundHalfAwayFromZero)),
    };
    FlowConfig {
        weight: precision(weight),
        act: precision(act),
        grad: grad.map(precision),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ElementFormat::*;

    fn t(rows: &[&[f32]]) -> Fp32Tensor {
        Fp32Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn representable_forward_is_exact() {
        let flow = FlowConfig::uniform(QuantConfig::new(E4M3));
        let mut trace = QuantTrace::default();
        let w = t(&[&[1.0, -1.0], &[0.0, 1.0], &[-1.0, 0.0]]);
        let state = QuantizedLinearState::new(w.clone(), &flow, &mut trace).unwrap();
        let a = t(&[&[1.0, 0.0, -1.0], &[1.0, 1.0, 1.0]]);
        let y = linear_forward(&state, &a, &flow, &mut trace).unwrap();
        assert_eq!(y, fp32_gemm(&a, &w).unwrap());
        let zero = linear_forward(&state, &Fp32Tensor::zeros(vec![2, 3]), &flow, &mut trace).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_upstream_gradient() {
        let flow = FlowConfig::uniform(QuantConfig::new(E3M2));
        let mut trace = QuantTrace::default();
        let state = QuantizedLinearState::new(t(&[&[0.3, -0.7], &[1.1, 0.2]]), &flow, &mut trace).unwrap();
        let a = t(&[&[0.5, -1.5]]);
        let (da, dw) = linear_backward(&state, &a, &Fp32Tensor::zeros(vec![1, 2]), &flow, &mut trace).unwrap();
        assert!(da.data().iter().chain(dw.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn single_neuron_chain_rule() {
        // y = a·w, L = y, so dL/dw = a·dy and dL/da = w·dy
        let flow = FlowConfig::uniform(QuantConfig::new(E2M1).with_block_size(1));
        let mut trace = QuantTrace::default();
        let mut state = QuantizedLinearState::new(t(&[&[1.5]]), &flow, &mut trace).unwrap();
        let a = t(&[&[2.0]]);
        assert_eq!(linear_forward(&state, &a, &flow, &mut trace).unwrap().data(), [3.0]);
        let (da, dw) = linear_backward(&state, &a, &t(&[&[-0.5]]), &flow, &mut trace).unwrap();
        assert_eq!(da.data(), [-0.75]);
        assert_eq!(dw.data(), [-1.0]);
        sgd_step(&mut state, &dw, 0.5, &flow, &mut trace).unwrap();
        assert_eq!(state.master_w.data(), [2.0]);
        assert_eq!(state.qw.dequantized().data(), [2.0]);
    }

    #[test]
    fn sgd_edge_cases() {
        let flow = FlowConfig::uniform(QuantConfig::new(E2M3));
        let mut trace = QuantTrace::default();
        let mut state = QuantizedLinearState::new(t(&[&[0.1, 0.2], &[0.3, 0.4]]), &flow, &mut trace).unwrap();
        let before = state.clone();
        sgd_step(&mut state, &Fp32Tensor::zeros(vec![2, 2]), 0.1, &flow, &mut trace).unwrap();
        assert_eq!(state, before);
        sgd_step(&mut state, &t(&[&[1.0, 1.0], &[1.0, 1.0]]), 0.0, &flow, &mut trace).unwrap();
        assert_eq!(state, before);
        assert!(sgd_step(&mut state, &Fp32Tensor::zeros(vec![2, 2]), -1.0, &flow, &mut trace).is_err());
        assert!(sgd_step(&mut state, &Fp32Tensor::zeros(vec![2, 3]), 0.1, &flow, &mut trace).is_err());
    }

    #[test]
    fn shape_errors() {
        let flow = FlowConfig::fp32();
        let mut trace = QuantTrace::default();
        let state = QuantizedLinearState::new(Fp32Tensor::zeros(vec![3, 2]), &flow, &mut trace).unwrap();
        assert!(linear_forward(&state, &Fp32Tensor::zeros(vec![1, 2]), &flow, &mut trace).is_err());
        assert!(linear_backward(&state, &Fp32Tensor::zeros(vec![1, 3]), &Fp32Tensor::zeros(vec![2, 2]), &flow, &mut trace).is_err());
        assert!(trace.is_empty());
    }

    #[test]
    fn grad_defaults_to_activation_format() {
        let flow = FlowConfig::mixed(QuantConfig::new(E2M1), QuantConfig::new(E3M2));
        assert_eq!(flow.grad_precision().element_fmt(), Some(E3M2));
        let flow = flow.with_grad(GemmPrecision::Mx(QuantConfig::new(E5M2)));
        assert_eq!(flow.grad_precision().element_fmt(), Some(E5M2));
    }

    #[test]
    fn events_per_step() {
        let flow = demo_flow(Some(E2M1), Some(E3M2), None);
        let mut trace = QuantTrace::default();
        train_demo_traced(&flow, DEMO_SEED, 3, &mut trace).unwrap();
        // init: 2 layers x (W, Wᵀ); per step: 2 forward acts, 2 x (act + 2 grads)
        // backward, 2 x (W, Wᵀ) update
        assert_eq!(trace.len(), 4 + 3 * 12);
        assert_eq!(trace.count(OperandRole::Gradient), 3 * 4);
        let mut fp32_trace = QuantTrace::default();
        train_demo_traced(&FlowConfig::fp32(), DEMO_SEED, 3, &mut fp32_trace).unwrap();
        assert!(fp32_trace.is_empty());
    }

    #[test]
    fn demo_is_deterministic() {
        let flow = demo_flow(Some(E3M2), Some(E3M2), None);
        let a = train_demo(&flow, 3, 20).unwrap();
        let b = train_demo(&flow, 3, 20).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.records.len(), 20);
        assert!(!a.diverged);
    }
}
