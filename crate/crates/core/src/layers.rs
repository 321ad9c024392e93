//! Layer primitives shared by the model builder and the functional API:
//! initialization, batch-norm state, recurrent cell steps on a tape, and
//! single-sample forward wrappers for each layer kind.

use crate::error::{invalid, Result};
use crate::tape::{Tape, VarId};
use crate::tensor::{softmax, Scalar, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Weight matrices draw from uniform(-1/sqrt(fan_in), +1/sqrt(fan_in));
/// biases start at zero, batch-norm at gamma=1, beta=0.
pub fn init_weight<F: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<F> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::rand_uniform(shape, -bound, bound, rng)
}

// ---- batch normalization ----

#[derive(Clone)]
pub struct BatchNorm1d<F> {
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
    pub running_mean: Vec<F>,
    pub running_var: Vec<F>,
    pub eps: F,
    pub momentum: F,
}

impl<F: Scalar> BatchNorm1d<F> {
    pub fn new(channels: usize) -> Self {
        BatchNorm1d {
            gamma: Tensor::full(&[channels], F::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: vec![F::zero(); channels],
            running_var: vec![F::one(); channels],
            eps: F::from_f64(1e-5),
            momentum: F::from_f64(0.1),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// Record this layer on a tape. Train mode normalizes with batch
    /// statistics and folds them into the running statistics; eval mode
    /// applies the running statistics as constants.
    pub fn forward_on(
        &mut self,
        tape: &mut Tape<F>,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        train: bool,
    ) -> Result<VarId> {
        if train {
            let (out, mean, var) = tape.batchnorm(x, gamma, beta, self.eps, None)?;
            let m = self.momentum;
            let keep = F::one() - m;
            for c in 0..self.running_mean.len() {
                self.running_mean[c] = keep * self.running_mean[c] + m * mean[c];
                self.running_var[c] = keep * self.running_var[c] + m * var[c];
            }
            Ok(out)
        } else {
            let (out, _, _) = tape.batchnorm(
                x,
                gamma,
                beta,
                self.eps,
                Some((&self.running_mean, &self.running_var)),
            )?;
            Ok(out)
        }
    }
}

/// Batch-level functional form: normalizes `x` of shape [N, C, L] in place of
/// a model, mutating running statistics in train mode.
pub fn batchnorm1d_forward<F: Scalar>(
    x: &Tensor<F>,
    bn: &mut BatchNorm1d<F>,
    train: bool,
) -> Result<Tensor<F>> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x, false);
    let g = tape.leaf(&bn.gamma.clone(), false);
    let b = tape.leaf(&bn.beta.clone(), false);
    let out = bn.forward_on(&mut tape, xv, g, b, train)?;
    Ok(tape.value(out))
}

// ---- recurrent stacks ----

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecurrentKind {
    Rnn,
    Gru,
    Lstm,
}

impl RecurrentKind {
    pub fn gates(self) -> usize {
        match self {
            RecurrentKind::Rnn => 1,
            RecurrentKind::Gru => 3,
            RecurrentKind::Lstm => 4,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            RecurrentKind::Rnn => "RNN",
            RecurrentKind::Gru => "GRU",
            RecurrentKind::Lstm => "LSTM",
        }
    }
}

/// One recurrent layer's parameters: per gate, recurrent weight W [H,H],
/// input weight U [H,D], bias b [H]. Gate order: GRU (z, r, h~); LSTM
/// (i, f, g, o); RNN (single).
#[derive(Clone)]
pub struct GateParams<F> {
    pub w: Vec<Tensor<F>>,
    pub u: Vec<Tensor<F>>,
    pub b: Vec<Tensor<F>>,
}

#[derive(Clone)]
pub struct RecurrentStack<F> {
    pub kind: RecurrentKind,
    pub hidden: usize,
    pub input_dim: usize,
    pub layers: Vec<GateParams<F>>,
}

impl<F: Scalar> RecurrentStack<F> {
    pub fn new<R: Rng>(
        kind: RecurrentKind,
        input_dim: usize,
        hidden: usize,
        num_layers: usize,
        rng: &mut R,
    ) -> Self {
        let gates = kind.gates();
        let mut layers = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let d = if l == 0 { input_dim } else { hidden };
            let mut w = Vec::with_capacity(gates);
            let mut u = Vec::with_capacity(gates);
            let mut b = Vec::with_capacity(gates);
            for _ in 0..gates {
                w.push(init_weight(&[hidden, hidden], hidden, rng));
                u.push(init_weight(&[hidden, d], d, rng));
                b.push(Tensor::zeros(&[hidden]));
            }
            layers.push(GateParams { w, u, b });
        }
        RecurrentStack { kind, hidden, input_dim, layers }
    }

    /// Trainable parameter count: per layer, gates * (H*D + H*H + H).
    pub fn param_count(&self) -> usize {
        let g = self.kind.gates();
        let h = self.hidden;
        self.layers
            .iter()
            .enumerate()
            .map(|(l, _)| {
                let d = if l == 0 { self.input_dim } else { h };
                g * (h * d + h * h + h)
            })
            .sum()
    }
}

/// Per-layer gate parameter ids registered on a tape.
pub struct CellVars {
    pub w: Vec<VarId>,
    pub u: Vec<VarId>,
    pub b: Vec<VarId>,
}

/// h' = tanh(h W^T + x U^T + b)
pub fn rnn_step<F: Scalar>(
    tape: &mut Tape<F>,
    x_t: VarId,
    h: VarId,
    v: &CellVars,
) -> Result<VarId> {
    let hw = tape.matmul_transb(h, v.w[0])?;
    let xu = tape.matmul_transb(x_t, v.u[0])?;
    let s = tape.add(hw, xu)?;
    let s = tape.add_row_bias(s, v.b[0])?;
    tape.tanh(s)
}

fn gate<F: Scalar>(
    tape: &mut Tape<F>,
    x_t: VarId,
    h: VarId,
    w: VarId,
    u: VarId,
    b: VarId,
) -> Result<VarId> {
    let hw = tape.matmul_transb(h, w)?;
    let xu = tape.matmul_transb(x_t, u)?;
    let s = tape.add(hw, xu)?;
    tape.add_row_bias(s, b)
}

/// z = sig(h Wz^T + x Uz^T + bz); r likewise;
/// h~ = tanh((r . h) Wh^T + x Uh^T + bh); h' = (1 - z) . h + z . h~
pub fn gru_step<F: Scalar>(
    tape: &mut Tape<F>,
    x_t: VarId,
    h: VarId,
    v: &CellVars,
) -> Result<VarId> {
    let z_pre = gate(tape, x_t, h, v.w[0], v.u[0], v.b[0])?;
    let z = tape.sigmoid(z_pre)?;
    let r_pre = gate(tape, x_t, h, v.w[1], v.u[1], v.b[1])?;
    let r = tape.sigmoid(r_pre)?;
    let rh = tape.mul(r, h)?;
    let c_pre = gate(tape, x_t, rh, v.w[2], v.u[2], v.b[2])?;
    let cand = tape.tanh(c_pre)?;
    let zneg = tape.one_minus(z)?;
    let keep = tape.mul(zneg, h)?;
    let update = tape.mul(z, cand)?;
    tape.add(keep, update)
}

/// Standard single-bias LSTM: i, f, o sigmoid gates, g tanh candidate,
/// c' = f . c + i . g, h' = o . tanh(c').
pub fn lstm_step<F: Scalar>(
    tape: &mut Tape<F>,
    x_t: VarId,
    h: VarId,
    c: VarId,
    v: &CellVars,
) -> Result<(VarId, VarId)> {
    let i_pre = gate(tape, x_t, h, v.w[0], v.u[0], v.b[0])?;
    let i = tape.sigmoid(i_pre)?;
    let f_pre = gate(tape, x_t, h, v.w[1], v.u[1], v.b[1])?;
    let f = tape.sigmoid(f_pre)?;
    let g_pre = gate(tape, x_t, h, v.w[2], v.u[2], v.b[2])?;
    let g = tape.tanh(g_pre)?;
    let o_pre = gate(tape, x_t, h, v.w[3], v.u[3], v.b[3])?;
    let o = tape.sigmoid(o_pre)?;
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_new = tape.add(fc, ig)?;
    let ct = tape.tanh(c_new)?;
    let h_new = tape.mul(o, ct)?;
    Ok((h_new, c_new))
}

/// Register a stack's parameters on a tape; one CellVars per layer.
pub fn register_stack<F: Scalar>(
    tape: &mut Tape<F>,
    stack: &RecurrentStack<F>,
    requires_grad: bool,
    collected: &mut Vec<VarId>,
) -> Vec<CellVars> {
    stack
        .layers
        .iter()
        .map(|layer| {
            let reg = |t: &Tensor<F>, tape: &mut Tape<F>, acc: &mut Vec<VarId>| {
                let id = tape.leaf(t, requires_grad);
                acc.push(id);
                id
            };
            let mut vars = CellVars { w: Vec::new(), u: Vec::new(), b: Vec::new() };
            for g in 0..stack.kind.gates() {
                vars.w.push(reg(&layer.w[g], tape, collected));
                vars.u.push(reg(&layer.u[g], tape, collected));
                vars.b.push(reg(&layer.b[g], tape, collected));
            }
            vars
        })
        .collect()
}

/// Run a whole stack over a sequence of [N, D] timestep vars; returns the
/// top layer's per-timestep outputs.
pub fn run_stack<F: Scalar>(
    tape: &mut Tape<F>,
    stack: &RecurrentStack<F>,
    vars: &[CellVars],
    steps: &[VarId],
    batch: usize,
) -> Result<Vec<VarId>> {
    let zeros = Tensor::<F>::zeros(&[batch, stack.hidden]);
    let mut seq: Vec<VarId> = steps.to_vec();
    for v in vars.iter() {
        let mut h = tape.leaf(&zeros, false);
        let mut c = tape.leaf(&zeros, false);
        let mut out = Vec::with_capacity(seq.len());
        for &x_t in &seq {
            match stack.kind {
                RecurrentKind::Rnn => {
                    h = rnn_step(tape, x_t, h, v)?;
                }
                RecurrentKind::Gru => {
                    h = gru_step(tape, x_t, h, v)?;
                }
                RecurrentKind::Lstm => {
                    let (hn, cn) = lstm_step(tape, x_t, h, c, v)?;
                    h = hn;
                    c = cn;
                }
            }
            out.push(h);
        }
        seq = out;
    }
    Ok(seq)
}

// ---- single-sample functional wrappers ----

/// Cross-correlation plus bias over one sample: x [C_in, L] -> [C_out, L_out].
pub fn conv1d_forward<F: Scalar>(
    x: &Tensor<F>,
    weight: &Tensor<F>,
    bias: &Tensor<F>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<F>> {
    let s = x.shape();
    if s.len() != 2 {
        return invalid(format!("conv1d_forward wants [C, L], got {s:?}"));
    }
    let batched = x.clone().reshape(&[1, s[0], s[1]])?;
    let mut tape = Tape::new();
    let xv = tape.leaf(&batched, false);
    let wv = tape.leaf(weight, false);
    let bv = tape.leaf(bias, false);
    let out = tape.conv1d(xv, wv, bv, stride, padding)?;
    let out_shape = tape.shape(out).to_vec();
    tape.value(out).reshape(&[out_shape[1], out_shape[2]])
}

/// Per-channel sliding max over one sample: x [C, L] -> [C, L_out].
pub fn maxpool1d_forward<F: Scalar>(x: &Tensor<F>, k: usize, stride: usize) -> Result<Tensor<F>> {
    let s = x.shape();
    if s.len() != 2 {
        return invalid(format!("maxpool1d_forward wants [C, L], got {s:?}"));
    }
    let batched = x.clone().reshape(&[1, s[0], s[1]])?;
    let mut tape = Tape::new();
    let xv = tape.leaf(&batched, false);
    let out = tape.maxpool1d(xv, k, stride)?;
    let out_shape = tape.shape(out).to_vec();
    tape.value(out).reshape(&[out_shape[1], out_shape[2]])
}

/// Full stack over one sequence: seq [L, D] -> (outputs [L, H], finals
/// [layers, H]). h0 is zeros.
pub fn gru_forward<F: Scalar>(
    seq: &Tensor<F>,
    stack: &RecurrentStack<F>,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let s = seq.shape();
    if s.len() != 2 {
        return invalid(format!("gru_forward wants [L, D], got {s:?}"));
    }
    let (len, d) = (s[0], s[1]);
    if d != stack.input_dim {
        return invalid(format!(
            "sequence feature dim {d} does not match stack input dim {}",
            stack.input_dim
        ));
    }
    let mut tape = Tape::new();
    let mut collected = Vec::new();
    let vars = register_stack(&mut tape, stack, false, &mut collected);
    let mut steps = Vec::with_capacity(len);
    for t in 0..len {
        let row: Vec<F> = (0..d).map(|j| seq.data()[t * d + j]).collect();
        let rowt = Tensor::new(vec![1, d], row)?;
        steps.push(tape.leaf(&rowt, false));
    }

    // Track every layer's final hidden state.
    let zeros = Tensor::<F>::zeros(&[1, stack.hidden]);
    let mut seq_vars: Vec<VarId> = steps;
    let mut finals = Vec::with_capacity(stack.layers.len());
    for v in &vars {
        let mut h = tape.leaf(&zeros, false);
        let mut c = tape.leaf(&zeros, false);
        let mut out = Vec::with_capacity(seq_vars.len());
        for &x_t in &seq_vars {
            match stack.kind {
                RecurrentKind::Rnn => h = rnn_step(&mut tape, x_t, h, v)?,
                RecurrentKind::Gru => h = gru_step(&mut tape, x_t, h, v)?,
                RecurrentKind::Lstm => {
                    let (hn, cn) = lstm_step(&mut tape, x_t, h, c, v)?;
                    h = hn;
                    c = cn;
                }
            }
            out.push(h);
        }
        finals.push(h);
        seq_vars = out;
    }

    let h = stack.hidden;
    let mut outputs = Vec::with_capacity(len * h);
    for &var in &seq_vars {
        outputs.extend_from_slice(tape.data(var));
    }
    let mut final_data = Vec::with_capacity(stack.layers.len() * h);
    for &var in &finals {
        final_data.extend_from_slice(tape.data(var));
    }
    Ok((
        Tensor::new(vec![len, h], outputs)?,
        Tensor::new(vec![stack.layers.len(), h], final_data)?,
    ))
}

/// Head probabilities for one feature vector: softmax(W h + b).
pub fn linear_softmax_head<F: Scalar>(
    h: &Tensor<F>,
    w: &Tensor<F>,
    b: &Tensor<F>,
) -> Result<Tensor<F>> {
    let d = h.numel();
    let sw = w.shape();
    if sw.len() != 2 || sw[1] != d || b.numel() != sw[0] {
        return invalid(format!("head shapes {:?}/{:?} incompatible with input {d}", sw, b.shape()));
    }
    let k = sw[0];
    let mut logits = vec![F::zero(); k];
    for i in 0..k {
        let mut acc = b.data()[i];
        for j in 0..d {
            acc += w.data()[i * d + j] * h.data()[j];
        }
        logits[i] = acc;
    }
    Ok(Tensor::new(vec![k], softmax(&logits))?)
}

/// Inverted dropout: train mode zeroes each element with probability `rate`
/// and scales survivors by 1/(1-rate); eval mode is the identity.
pub fn dropout<F: Scalar, R: Rng>(
    x: &Tensor<F>,
    rate: f64,
    train: bool,
    rng: &mut R,
) -> Result<Tensor<F>> {
    if !(0.0..1.0).contains(&rate) {
        return invalid(format!("dropout rate {rate} outside [0, 1)"));
    }
    if !train || rate == 0.0 {
        return Ok(x.clone());
    }
    let keep = F::from_f64(1.0 / (1.0 - rate));
    let data: Vec<F> = x
        .data()
        .iter()
        .map(|&v| if rng.gen::<f64>() < rate { F::zero() } else { v * keep })
        .collect();
    Ok(Tensor::new(x.shape().to_vec(), data)?)
}

/// Same mask logic as a tape-level op: returns the multiplicative mask so the
/// model forward can record it as a constant leaf.
pub fn dropout_mask<F: Scalar, R: Rng>(numel: usize, rate: f64, rng: &mut R) -> Vec<F> {
    let keep = F::from_f64(1.0 / (1.0 - rate));
    (0..numel).map(|_| if rng.gen::<f64>() < rate { F::zero() } else { keep }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_hand_cross_correlation() {
        // kernel [1,0,-1] over [1,2,3,4,5], no padding -> [-2,-2,-2]
        let x = Tensor::new(vec![1, 5], vec![1.0f64, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let w = Tensor::new(vec![1, 1, 3], vec![1.0, 0.0, -1.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        let out = conv1d_forward(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(out.shape(), &[1, 3]);
        assert_eq!(out.data(), &[-2.0, -2.0, -2.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::new(vec![1, 4], vec![3.0f64, -1.0, 0.5, 2.0]).unwrap();
        let w = Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        let out = conv1d_forward(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn maxpool_constant_input() {
        let x = Tensor::full(&[2, 6], 4.25f64);
        let out = maxpool1d_forward(&x, 2, 1).unwrap();
        assert_eq!(out.shape(), &[2, 5]);
        assert!(out.data().iter().all(|&v| v == 4.25));
    }

    #[test]
    fn gru_zero_params_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut stack = RecurrentStack::<f64>::new(RecurrentKind::Gru, 3, 4, 2, &mut rng);
        for layer in &mut stack.layers {
            for t in layer.w.iter_mut().chain(layer.u.iter_mut()).chain(layer.b.iter_mut()) {
                *t = Tensor::zeros(t.shape());
            }
        }
        let seq = Tensor::new(vec![5, 3], (0..15).map(|i| i as f64).collect()).unwrap();
        let (outputs, finals) = gru_forward(&seq, &stack).unwrap();
        assert!(outputs.data().iter().all(|&v| v == 0.0));
        assert!(finals.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gru_scalar_hand_value() {
        // H=1: Wz=Uz=Wr=Ur=0, bz=br=0, Wh=0, Uh=1, bh=0, x=1, h0=0
        // z = 0.5, cand = tanh(1), h1 = 0.5 * tanh(1) = 0.38080...
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut stack = RecurrentStack::<f64>::new(RecurrentKind::Gru, 1, 1, 1, &mut rng);
        let l = &mut stack.layers[0];
        for g in 0..3 {
            l.w[g] = Tensor::zeros(&[1, 1]);
            l.u[g] = Tensor::zeros(&[1, 1]);
            l.b[g] = Tensor::zeros(&[1]);
        }
        l.u[2] = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let seq = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let (outputs, finals) = gru_forward(&seq, &stack).unwrap();
        let h1 = outputs.data()[0];
        assert!((h1 - 0.5 * 1.0f64.tanh()).abs() < 1e-12, "h1 = {h1}");
        assert!((h1 - 0.38080).abs() < 1e-4);
        assert_eq!(finals.data()[0], h1);
    }

    #[test]
    fn gru_hidden_bounded_by_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let stack = RecurrentStack::<f64>::new(RecurrentKind::Gru, 6, 8, 2, &mut rng);
        let seq = Tensor::rand_uniform(&[20, 6], -50.0, 50.0, &mut rng);
        let (outputs, _) = gru_forward(&seq, &stack).unwrap();
        assert!(outputs.data().iter().all(|&v| v.abs() <= 1.0));
    }

    #[test]
    fn stack_param_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // 2-layer GRU, D=256, H=512: 3*(512*256+512*512+512) + 3*(2*512*512+512)
        let stack = RecurrentStack::<f32>::new(RecurrentKind::Gru, 256, 512, 2, &mut rng);
        assert_eq!(stack.param_count(), 2_755_584);
        let rnn = RecurrentStack::<f32>::new(RecurrentKind::Rnn, 24, 64, 1, &mut rng);
        assert_eq!(rnn.param_count(), 24 * 64 + 64 * 64 + 64);
        let lstm = RecurrentStack::<f32>::new(RecurrentKind::Lstm, 24, 64, 1, &mut rng);
        assert_eq!(lstm.param_count(), 4 * (24 * 64 + 64 * 64 + 64));
    }

    #[test]
    fn head_uniform_and_hand_softmax() {
        let h = Tensor::<f64>::zeros(&[5]);
        let w = Tensor::<f64>::zeros(&[7, 5]);
        let b = Tensor::<f64>::zeros(&[7]);
        let p = linear_softmax_head(&h, &w, &b).unwrap();
        for &v in p.data() {
            assert!((v - 1.0 / 7.0).abs() < 1e-12);
        }
        let sum: f64 = p.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn lstm_gate_saturation_limits() {
        // Saturated input gate off and forget gate off: c stays ~0, h ~0.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut stack = RecurrentStack::<f64>::new(RecurrentKind::Lstm, 2, 3, 1, &mut rng);
        {
            let l = &mut stack.layers[0];
            let big = 50.0;
            l.b[0] = Tensor::full(&[3], -big); // input gate closed
            l.b[1] = Tensor::full(&[3], -big); // forget gate closed
        }
        let seq = Tensor::rand_uniform(&[6, 2], -2.0, 2.0, &mut rng);
        let (outputs, _) = gru_forward(&seq, &stack).unwrap();
        assert!(outputs.data().iter().all(|&v| v.abs() < 1e-9));

        // Input gate wide open with candidate saturated: c accumulates ~1 per
        // step when forget is open, so after t steps tanh(c) -> 1 and h tracks
        // the output gate.
        let mut stack2 = RecurrentStack::<f64>::new(RecurrentKind::Lstm, 2, 3, 1, &mut rng);
        {
            let l = &mut stack2.layers[0];
            let big = 50.0;
            for g in [0usize, 1, 3] {
                l.b[g] = Tensor::full(&[3], big); // i, f, o open
            }
            l.w[2] = Tensor::zeros(&[3, 3]);
            l.u[2] = Tensor::zeros(&[3, 2]);
            l.b[2] = Tensor::full(&[3], big); // candidate saturated at +1
        }
        let seq2 = Tensor::zeros(&[8, 2]);
        let (outputs2, _) = gru_forward(&seq2, &stack2).unwrap();
        let last = &outputs2.data()[7 * 3..];
        for &v in last {
            assert!((v - 8.0f64.tanh()).abs() < 1e-6, "saturated lstm h = {v}");
        }
    }

    #[test]
    fn dropout_rate_zero_and_eval_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::rand_uniform(&[100], -1.0, 1.0, &mut rng);
        let same = dropout(&x, 0.0, true, &mut rng).unwrap();
        assert_eq!(same.data(), x.data());
        let eval = dropout(&x, 0.9, false, &mut rng).unwrap();
        assert_eq!(eval.data(), x.data());
        assert!(dropout(&x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_survivor_fraction_and_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 1_000_000;
        let x = Tensor::full(&[n], 1.0f64);
        let dropped = dropout(&x, 0.3, true, &mut rng).unwrap();
        let survivors = dropped.data().iter().filter(|&&v| v != 0.0).count();
        let frac = survivors as f64 / n as f64;
        assert!((frac - 0.7).abs() < 0.01, "survivor fraction {frac}");
        let mean: f64 = dropped.data().iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn batchnorm_idempotent_on_normalized_data() {
        // Zero-mean, unit-variance channel passes through near-identically.
        let mut bn = BatchNorm1d::<f64>::new(1);
        let x = Tensor::new(vec![4, 1, 1], vec![-1.5, -0.5, 0.5, 1.5]).unwrap();
        // variance of {-1.5, -0.5, 0.5, 1.5} = (2.25+0.25)*2/4 = 1.25; rescale first
        let scale = 1.25f64.sqrt();
        let xn = x.map(|v| v / scale);
        let out = batchnorm1d_forward(&xn, &mut bn, true).unwrap();
        for (a, b) in out.data().iter().zip(xn.data()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }
}
