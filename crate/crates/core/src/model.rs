//! Declarative layer stacks, shape propagation, parameter accounting, the
//! batched tape forward pass, and checkpoint serialization.

use crate::error::{invalid, Result, XfddError};
use crate::layers::{
    dropout_mask, init_weight, register_stack, run_stack, BatchNorm1d, RecurrentKind,
    RecurrentStack,
};
use crate::tape::{Tape, VarId};
use crate::tensor::{softmax, Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv1d { out_channels: usize, kernel: usize, stride: usize, padding: usize },
    BatchNorm1d,
    Relu,
    MaxPool1d { kernel: usize, stride: usize },
    Gru { layers: usize, hidden: usize },
    Rnn { layers: usize, hidden: usize },
    Lstm { layers: usize, hidden: usize },
    Flatten,
    Linear { out_features: usize },
    Dropout { rate: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub input_channels: usize,
    pub window: usize,
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

/// One row of the architecture summary: layer label, output shape with a -1
/// batch placeholder, and the row's trainable parameter count (recurrent rows
/// report 0 by summary convention; their parameters are accounted separately).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerRow {
    pub name: String,
    pub output_shape: String,
    pub params: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Dim {
    Seq { channels: usize, len: usize },
    Flat { features: usize },
}

fn conv_block(layers: &mut Vec<LayerSpec>, out_channels: usize, pool_stride: usize) {
    layers.push(LayerSpec::Conv1d { out_channels, kernel: 3, stride: 1, padding: 1 });
    layers.push(LayerSpec::BatchNorm1d);
    layers.push(LayerSpec::Relu);
    layers.push(LayerSpec::MaxPool1d { kernel: 2, stride: pool_stride });
}

impl ModelSpec {
    /// Fault-type classifier: four conv blocks (32..256), final pool stride 2,
    /// 2-layer GRU with 512 hidden units, FC 128 -> 7.
    pub fn ftcm() -> Self {
        let mut layers = Vec::new();
        for (ch, ps) in [(32, 1), (64, 1), (128, 1), (256, 2)] {
            conv_block(&mut layers, ch, ps);
        }
        layers.push(LayerSpec::Gru { layers: 2, hidden: 512 });
        layers.push(LayerSpec::Linear { out_features: 128 });
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::Dropout { rate: 0.3 });
        layers.push(LayerSpec::Linear { out_features: 7 });
        ModelSpec { name: "ftcm".into(), input_channels: 24, window: 500, classes: 7, layers }
    }

    /// Fault-location classifier: five conv blocks (32..512), all pools
    /// stride 1, 2-layer GRU with 512 hidden units, FC 128 -> 7.
    pub fn flm() -> Self {
        let mut layers = Vec::new();
        for ch in [32, 64, 128, 256, 512] {
            conv_block(&mut layers, ch, 1);
        }
        layers.push(LayerSpec::Gru { layers: 2, hidden: 512 });
        layers.push(LayerSpec::Linear { out_features: 128 });
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::Dropout { rate: 0.3 });
        layers.push(LayerSpec::Linear { out_features: 7 });
        ModelSpec { name: "flm".into(), input_channels: 24, window: 500, classes: 7, layers }
    }

    /// Quarter-width hybrid for desk-scale runs: conv channels divided by 4,
    /// hidden size 64, same block layout as the fault-type classifier.
    pub fn desk(input_channels: usize, window: usize, classes: usize) -> Self {
        let mut layers = Vec::new();
        for (ch, ps) in [(8, 1), (16, 1), (32, 1), (64, 2)] {
            conv_block(&mut layers, ch, ps);
        }
        layers.push(LayerSpec::Gru { layers: 2, hidden: 64 });
        layers.push(LayerSpec::Linear { out_features: 128 });
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::Dropout { rate: 0.3 });
        layers.push(LayerSpec::Linear { out_features: classes });
        ModelSpec { name: "desk".into(), input_channels, window, classes, layers }
    }

    /// Parameterized hybrid for search trials: conv channel widths double
    /// from 8 (capped at 256), final block pools at stride 2, recurrent stack,
    /// then fc_layers linear layers ending at the class count.
    pub fn hybrid(
        input_channels: usize,
        window: usize,
        classes: usize,
        conv_layers: usize,
        gru_layers: usize,
        hidden: usize,
        fc_layers: usize,
    ) -> Self {
        let mut layers = Vec::new();
        for i in 0..conv_layers {
            let ch = (8usize << i.min(5)).min(256);
            let ps = if i + 1 == conv_layers { 2 } else { 1 };
            conv_block(&mut layers, ch, ps);
        }
        layers.push(LayerSpec::Gru { layers: gru_layers, hidden });
        for _ in 1..fc_layers {
            layers.push(LayerSpec::Linear { out_features: hidden });
            layers.push(LayerSpec::Relu);
        }
        layers.push(LayerSpec::Dropout { rate: 0.3 });
        layers.push(LayerSpec::Linear { out_features: classes });
        ModelSpec {
            name: format!("hybrid-c{conv_layers}-g{gru_layers}-h{hidden}-f{fc_layers}"),
            input_channels,
            window,
            classes,
            layers,
        }
    }

    /// Plain recurrent benchmark: stack over raw windows, last hidden state
    /// into a linear head.
    pub fn baseline(
        kind: RecurrentKind,
        input_channels: usize,
        window: usize,
        hidden: usize,
        num_layers: usize,
        classes: usize,
    ) -> Self {
        let rec = match kind {
            RecurrentKind::Rnn => LayerSpec::Rnn { layers: num_layers, hidden },
            RecurrentKind::Gru => LayerSpec::Gru { layers: num_layers, hidden },
            RecurrentKind::Lstm => LayerSpec::Lstm { layers: num_layers, hidden },
        };
        ModelSpec {
            name: format!("{}-baseline", kind.label().to_lowercase()),
            input_channels,
            window,
            classes,
            layers: vec![rec, LayerSpec::Linear { out_features: classes }],
        }
    }

    /// The same architecture over a reduced channel subset.
    pub fn with_input_channels(mut self, channels: usize) -> Self {
        self.input_channels = channels;
        self
    }

    fn propagate(&self) -> Result<Vec<Dim>> {
        if self.layers.is_empty() {
            return invalid("model spec has no layers (missing head)");
        }
        let mut dim = Dim::Seq { channels: self.input_channels, len: self.window };
        let mut dims = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let fail = |msg: String| -> Result<Dim> {
                Err(XfddError::InvalidArgument(format!("layer {} ({layer:?}): {msg}", i + 1)))
            };
            dim = match (*layer, dim) {
                (
                    LayerSpec::Conv1d { out_channels, kernel, stride, padding },
                    Dim::Seq { channels: _, len },
                ) => {
                    let padded = len + 2 * padding;
                    if kernel == 0 || stride == 0 || kernel > padded {
                        fail(format!("kernel {kernel}/stride {stride} invalid for length {len}"))?
                    } else {
                        Dim::Seq { channels: out_channels, len: (padded - kernel) / stride + 1 }
                    }
                }
                (LayerSpec::BatchNorm1d, d @ Dim::Seq { .. }) => d,
                (LayerSpec::Relu, d) => d,
                (LayerSpec::MaxPool1d { kernel, stride }, Dim::Seq { channels, len }) => {
                    if kernel == 0 || stride == 0 || kernel > len {
                        fail(format!("pool kernel {kernel} invalid for length {len}"))?
                    } else {
                        Dim::Seq { channels, len: (len - kernel) / stride + 1 }
                    }
                }
                (
                    LayerSpec::Gru { hidden, .. }
                    | LayerSpec::Rnn { hidden, .. }
                    | LayerSpec::Lstm { hidden, .. },
                    Dim::Seq { .. },
                ) => Dim::Flat { features: hidden },
                (LayerSpec::Flatten, Dim::Seq { channels, len }) => {
                    Dim::Flat { features: channels * len }
                }
                (LayerSpec::Linear { out_features }, Dim::Flat { .. }) => {
                    Dim::Flat { features: out_features }
                }
                (LayerSpec::Dropout { rate }, d) => {
                    if !(0.0..1.0).contains(&rate) {
                        fail(format!("dropout rate {rate} outside [0, 1)"))?
                    } else {
                        d
                    }
                }
                (_, d) => fail(format!("cannot follow {d:?}"))?,
            };
            dims.push(dim);
        }
        match dims.last() {
            Some(Dim::Flat { features }) if *features == self.classes => Ok(dims),
            Some(d) => Err(XfddError::InvalidArgument(format!(
                "final layer produces {d:?}, expected {} classes",
                self.classes
            ))),
            None => invalid("model spec has no layers"),
        }
    }

    /// Architecture summary rows; errors if shape propagation fails.
    pub fn rows(&self) -> Result<Vec<LayerRow>> {
        let dims = self.propagate()?;
        let mut in_channels = self.input_channels;
        let mut rows = Vec::with_capacity(self.layers.len());
        for (i, (layer, dim)) in self.layers.iter().zip(&dims).enumerate() {
            let idx = i + 1;
            let (name, params) = match *layer {
                LayerSpec::Conv1d { out_channels, kernel, .. } => (
                    format!("Conv1d-{idx}"),
                    out_channels * in_channels * kernel + out_channels,
                ),
                LayerSpec::BatchNorm1d => (format!("BatchNorm1d-{idx}"), 2 * in_channels),
                LayerSpec::Relu => (format!("ReLU-{idx}"), 0),
                LayerSpec::MaxPool1d { .. } => (format!("MaxPool1d-{idx}"), 0),
                LayerSpec::Gru { .. } => (format!("GRU-{idx}"), 0),
                LayerSpec::Rnn { .. } => (format!("RNN-{idx}"), 0),
                LayerSpec::Lstm { .. } => (format!("LSTM-{idx}"), 0),
                LayerSpec::Flatten => (format!("Flatten-{idx}"), 0),
                LayerSpec::Linear { out_features } => {
                    let in_features = in_channels;
                    (format!("Linear-{idx}"), out_features * in_features + out_features)
                }
                LayerSpec::Dropout { .. } => (format!("Dropout-{idx}"), 0),
            };
            let output_shape = match (*layer, *dim) {
                (
                    LayerSpec::Gru { layers, hidden }
                    | LayerSpec::Rnn { layers, hidden }
                    | LayerSpec::Lstm { layers, hidden },
                    _,
                ) => {
                    // Recurrent rows report (sequence outputs, final hiddens).
                    let seq_len = match (i > 0).then(|| dims[i - 1]) {
                        Some(Dim::Seq { len, .. }) => len,
                        _ => self.window,
                    };
                    format!("[[[-1, {seq_len}, {hidden}], [-1, {layers}, {hidden}]]]")
                }
                (_, Dim::Seq { channels, len }) => format!("[-1, {channels}, {len}]"),
                (_, Dim::Flat { features }) => format!("[-1, {features}]"),
            };
            in_channels = match *dim {
                Dim::Seq { channels, .. } => channels,
                Dim::Flat { features } => features,
            };
            rows.push(LayerRow { name, output_shape, params });
        }
        Ok(rows)
    }

    /// Recurrent parameter count (excluded from summary rows).
    pub fn recurrent_param_count(&self) -> Result<usize> {
        let dims = self.propagate()?;
        let mut total = 0usize;
        let mut prev_channels = self.input_channels;
        for (i, layer) in self.layers.iter().enumerate() {
            if let LayerSpec::Gru { layers, hidden }
            | LayerSpec::Rnn { layers, hidden }
            | LayerSpec::Lstm { layers, hidden } = *layer
            {
                let gates = match layer {
                    LayerSpec::Gru { .. } => 3,
                    LayerSpec::Lstm { .. } => 4,
                    _ => 1,
                };
                for l in 0..layers {
                    let d = if l == 0 { prev_channels } else { hidden };
                    total += gates * (hidden * d + hidden * hidden + hidden);
                }
            }
            prev_channels = match dims[i] {
                Dim::Seq { channels, .. } => channels,
                Dim::Flat { features } => features,
            };
        }
        Ok(total)
    }
}

/// Per-layer counts plus the summary-convention split.
pub struct ParamAccount {
    pub rows: Vec<LayerRow>,
    /// Sum of the summary rows (recurrent rows contribute 0).
    pub table_total: usize,
    pub recurrent_total: usize,
    pub grand_total: usize,
}

pub fn count_params(spec: &ModelSpec) -> Result<ParamAccount> {
    let rows = spec.rows()?;
    let table_total = rows.iter().map(|r| r.params).sum();
    let recurrent_total = spec.recurrent_param_count()?;
    Ok(ParamAccount { rows, table_total, recurrent_total, grand_total: table_total + recurrent_total })
}

// ---- built model ----

#[derive(Clone)]
enum LayerState<F> {
    Conv { w: Tensor<F>, b: Tensor<F>, stride: usize, padding: usize },
    BatchNorm(BatchNorm1d<F>),
    Relu,
    MaxPool { kernel: usize, stride: usize },
    Recurrent(RecurrentStack<F>),
    Flatten,
    Linear { w: Tensor<F>, b: Tensor<F> },
    Dropout { rate: f64 },
}

#[derive(Clone)]
pub struct Model<F> {
    spec: ModelSpec,
    seed: u64,
    layers: Vec<LayerState<F>>,
}

pub struct ForwardPass {
    pub logits: VarId,
    /// Trainable parameter leaves in `visit_params` order.
    pub params: Vec<VarId>,
}

impl<F: Scalar> Model<F> {
    /// Initialize parameters from the seed: weights uniform in
    /// +-1/sqrt(fan_in), biases zero, in layer order.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.propagate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut channels = spec.input_channels;
        let mut len = spec.window;
        let mut layers = Vec::with_capacity(spec.layers.len());
        for layer in &spec.layers {
            let state = match *layer {
                LayerSpec::Conv1d { out_channels, kernel, stride, padding } => {
                    let w = init_weight(&[out_channels, channels, kernel], channels * kernel, &mut rng);
                    let b = Tensor::zeros(&[out_channels]);
                    channels = out_channels;
                    len = (len + 2 * padding - kernel) / stride + 1;
                    LayerState::Conv { w, b, stride, padding }
                }
                LayerSpec::BatchNorm1d => LayerState::BatchNorm(BatchNorm1d::new(channels)),
                LayerSpec::Relu => LayerState::Relu,
                LayerSpec::MaxPool1d { kernel, stride } => {
                    len = (len - kernel) / stride + 1;
                    LayerState::MaxPool { kernel, stride }
                }
                LayerSpec::Flatten => {
                    channels *= len;
                    LayerState::Flatten
                }
                LayerSpec::Gru { layers: n, hidden } => {
                    let s = RecurrentStack::new(RecurrentKind::Gru, channels, hidden, n, &mut rng);
                    channels = hidden;
                    LayerState::Recurrent(s)
                }
                LayerSpec::Rnn { layers: n, hidden } => {
                    let s = RecurrentStack::new(RecurrentKind::Rnn, channels, hidden, n, &mut rng);
                    channels = hidden;
                    LayerState::Recurrent(s)
                }
                LayerSpec::Lstm { layers: n, hidden } => {
                    let s = RecurrentStack::new(RecurrentKind::Lstm, channels, hidden, n, &mut rng);
                    channels = hidden;
                    LayerState::Recurrent(s)
                }
                LayerSpec::Linear { out_features } => {
                    let w = init_weight(&[out_features, channels], channels, &mut rng);
                    let b = Tensor::zeros(&[out_features]);
                    channels = out_features;
                    LayerState::Linear { w, b }
                }
                LayerSpec::Dropout { rate } => LayerState::Dropout { rate },
            };
            layers.push(state);
        }
        Ok(Model { spec, seed, layers })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<F>)) {
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerState::Conv { w, b, .. } => {
                    f(&format!("layer{i}.conv.w"), w);
                    f(&format!("layer{i}.conv.b"), b);
                }
                LayerState::BatchNorm(bn) => {
                    f(&format!("layer{i}.bn.gamma"), &bn.gamma);
                    f(&format!("layer{i}.bn.beta"), &bn.beta);
                }
                LayerState::Recurrent(stack) => {
                    for (l, gp) in stack.layers.iter().enumerate() {
                        for g in 0..stack.kind.gates() {
                            f(&format!("layer{i}.rec.l{l}.g{g}.w"), &gp.w[g]);
                            f(&format!("layer{i}.rec.l{l}.g{g}.u"), &gp.u[g]);
                            f(&format!("layer{i}.rec.l{l}.g{g}.b"), &gp.b[g]);
                        }
                    }
                }
                LayerState::Linear { w, b } => {
                    f(&format!("layer{i}.linear.w"), w);
                    f(&format!("layer{i}.linear.b"), b);
                }
                _ => {}
            }
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<F>)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                LayerState::Conv { w, b, .. } => {
                    f(&format!("layer{i}.conv.w"), w);
                    f(&format!("layer{i}.conv.b"), b);
                }
                LayerState::BatchNorm(bn) => {
                    f(&format!("layer{i}.bn.gamma"), &mut bn.gamma);
                    f(&format!("layer{i}.bn.beta"), &mut bn.beta);
                }
                LayerState::Recurrent(stack) => {
                    let gates = stack.kind.gates();
                    for (l, gp) in stack.layers.iter_mut().enumerate() {
                        for g in 0..gates {
                            f(&format!("layer{i}.rec.l{l}.g{g}.w"), &mut gp.w[g]);
                            f(&format!("layer{i}.rec.l{l}.g{g}.u"), &mut gp.u[g]);
                            f(&format!("layer{i}.rec.l{l}.g{g}.b"), &mut gp.b[g]);
                        }
                    }
                }
                LayerState::Linear { w, b } => {
                    f(&format!("layer{i}.linear.w"), w);
                    f(&format!("layer{i}.linear.b"), b);
                }
                _ => {}
            }
        }
    }

    pub fn trainable_param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.numel());
        n
    }

    fn check_input(&self, tape: &Tape<F>, x: VarId) -> Result<(usize, usize, usize)> {
        let s = tape.shape(x);
        if s.len() != 3 || s[1] != self.spec.input_channels || s[2] != self.spec.window {
            return invalid(format!(
                "input shape {s:?} does not match [N, {}, {}]",
                self.spec.input_channels, self.spec.window
            ));
        }
        Ok((s[0], s[1], s[2]))
    }

    /// Training forward: batch statistics for batch norm (running statistics
    /// updated), dropout active, parameters registered with gradients.
    pub fn forward_train(
        &mut self,
        tape: &mut Tape<F>,
        x: VarId,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardPass> {
        let (n, _, _) = self.check_input(tape, x)?;
        let mut params = Vec::new();
        let mut cur = x;
        let mut flat = false;
        for layer in self.layers.iter_mut() {
            match layer {
                LayerState::Conv { w, b, stride, padding } => {
                    let wv = tape.leaf(w, true);
                    let bv = tape.leaf(b, true);
                    params.push(wv);
                    params.push(bv);
                    cur = tape.conv1d(cur, wv, bv, *stride, *padding)?;
                }
                LayerState::BatchNorm(bn) => {
                    let gv = tape.leaf(&bn.gamma.clone(), true);
                    let bv = tape.leaf(&bn.beta.clone(), true);
                    params.push(gv);
                    params.push(bv);
                    cur = bn.forward_on(tape, cur, gv, bv, true)?;
                }
                LayerState::Relu => cur = tape.relu(cur)?,
                LayerState::MaxPool { kernel, stride } => {
                    cur = tape.maxpool1d(cur, *kernel, *stride)?
                }
                LayerState::Recurrent(stack) => {
                    let vars = register_stack(tape, stack, true, &mut params);
                    let len = tape.shape(cur)[2];
                    let mut steps = Vec::with_capacity(len);
                    for t in 0..len {
                        steps.push(tape.select_time(cur, t)?);
                    }
                    let outs = run_stack(tape, stack, &vars, &steps, n)?;
                    cur = *outs.last().expect("nonzero window");
                    flat = true;
                }
                LayerState::Flatten => {
                    let s = tape.shape(cur).to_vec();
                    if s.len() == 3 {
                        cur = tape.reshape(cur, &[s[0], s[1] * s[2]])?;
                    }
                    flat = true;
                }
                LayerState::Linear { w, b } => {
                    let wv = tape.leaf(w, true);
                    let bv = tape.leaf(b, true);
                    params.push(wv);
                    params.push(bv);
                    if !flat {
                        return invalid("linear layer reached with sequence input");
                    }
                    cur = tape.matmul_transb(cur, wv)?;
                    cur = tape.add_row_bias(cur, bv)?;
                }
                LayerState::Dropout { rate } => {
                    if *rate > 0.0 {
                        let numel = tape.numel(cur);
                        let mask = dropout_mask::<F, _>(numel, *rate, rng);
                        let mt = Tensor::new(tape.shape(cur).to_vec(), mask)?;
                        let mv = tape.leaf(&mt, false);
                        cur = tape.mul(cur, mv)?;
                    }
                }
            }
        }
        Ok(ForwardPass { logits: cur, params })
    }

    /// Inference forward: running statistics, dropout inert. Parameter leaves
    /// carry gradients only when `param_grads` is set (gradient checking).
    pub fn forward_eval(&self, tape: &mut Tape<F>, x: VarId, param_grads: bool) -> Result<ForwardPass> {
        let (n, _, _) = self.check_input(tape, x)?;
        let mut params = Vec::new();
        let mut cur = x;
        let mut flat = false;
        for layer in self.layers.iter() {
            match layer {
                LayerState::Conv { w, b, stride, padding } => {
                    let wv = tape.leaf(w, param_grads);
                    let bv = tape.leaf(b, param_grads);
                    params.push(wv);
                    params.push(bv);
                    cur = tape.conv1d(cur, wv, bv, *stride, *padding)?;
                }
                LayerState::BatchNorm(bn) => {
                    let gv = tape.leaf(&bn.gamma, param_grads);
                    let bv = tape.leaf(&bn.beta, param_grads);
                    params.push(gv);
                    params.push(bv);
                    let (out, _, _) = tape.batchnorm(
                        cur,
                        gv,
                        bv,
                        bn.eps,
                        Some((&bn.running_mean, &bn.running_var)),
                    )?;
                    cur = out;
                }
                LayerState::Relu => cur = tape.relu(cur)?,
                LayerState::MaxPool { kernel, stride } => {
                    cur = tape.maxpool1d(cur, *kernel, *stride)?
                }
                LayerState::Recurrent(stack) => {
                    let vars = register_stack(tape, stack, param_grads, &mut params);
                    let len = tape.shape(cur)[2];
                    let mut steps = Vec::with_capacity(len);
                    for t in 0..len {
                        steps.push(tape.select_time(cur, t)?);
                    }
                    let outs = run_stack(tape, stack, &vars, &steps, n)?;
                    cur = *outs.last().expect("nonzero window");
                    flat = true;
                }
                LayerState::Flatten => {
                    let s = tape.shape(cur).to_vec();
                    if s.len() == 3 {
                        cur = tape.reshape(cur, &[s[0], s[1] * s[2]])?;
                    }
                    flat = true;
                }
                LayerState::Linear { w, b } => {
                    let wv = tape.leaf(w, param_grads);
                    let bv = tape.leaf(b, param_grads);
                    params.push(wv);
                    params.push(bv);
                    if !flat {
                        return invalid("linear layer reached with sequence input");
                    }
                    cur = tape.matmul_transb(cur, wv)?;
                    cur = tape.add_row_bias(cur, bv)?;
                }
                LayerState::Dropout { .. } => {}
            }
        }
        Ok(ForwardPass { logits: cur, params })
    }

    /// Eval-mode logits for a batch of windows [N, C, W].
    pub fn logits(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x, false);
        let pass = self.forward_eval(&mut tape, xv, false)?;
        Ok(tape.value(pass.logits))
    }

    /// Eval-mode class probabilities per row.
    pub fn probabilities(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let logits = self.logits(x)?;
        let k = self.spec.classes;
        let n = logits.numel() / k;
        let mut data = Vec::with_capacity(n * k);
        for i in 0..n {
            data.extend(softmax(&logits.data()[i * k..(i + 1) * k]));
        }
        Tensor::new(vec![n, k], data)
    }

    /// Argmax predictions per row (first max on ties).
    pub fn predict(&self, x: &Tensor<F>) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        let k = self.spec.classes;
        let n = logits.numel() / k;
        Ok((0..n)
            .map(|i| {
                let row = &logits.data()[i * k..(i + 1) * k];
                let mut best = 0;
                for j in 1..k {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }

    // ---- checkpoint serialization ----

    fn state_tensors(&self) -> Vec<(String, Vec<usize>, Vec<F>, bool)> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, t| {
            out.push((name.to_string(), t.shape().to_vec(), t.data().to_vec(), true));
        });
        for (i, layer) in self.layers.iter().enumerate() {
            if let LayerState::BatchNorm(bn) = layer {
                out.push((
                    format!("layer{i}.bn.running_mean"),
                    vec![bn.running_mean.len()],
                    bn.running_mean.clone(),
                    false,
                ));
                out.push((
                    format!("layer{i}.bn.running_var"),
                    vec![bn.running_var.len()],
                    bn.running_var.clone(),
                    false,
                ));
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors = self.state_tensors();
        let manifest = CheckpointManifest {
            schema_version: SCHEMA_VERSION,
            name: self.spec.name.clone(),
            precision: F::PRECISION.to_string(),
            seed: self.seed,
            spec: self.spec.clone(),
            layer_rows: self
                .spec
                .rows()?
                .into_iter()
                .map(|r| ManifestRow { name: r.name, output_shape: r.output_shape, params: r.params })
                .collect(),
            tensors: tensors
                .iter()
                .map(|(name, shape, _, trainable)| ManifestTensor {
                    name: name.clone(),
                    shape: shape.clone(),
                    trainable: *trainable,
                })
                .collect(),
        };
        let mjson = serde_json::to_vec(&manifest)
            .map_err(|e| XfddError::Format(format!("manifest encode: {e}")))?;
        let mut file = std::fs::File::create(path)?;
        file.write_all(MAGIC)?;
        file.write_all(&(mjson.len() as u32).to_le_bytes())?;
        file.write_all(&mjson)?;
        // Parameter blob: little-endian 32-bit floats in manifest order.
        let mut blob = Vec::new();
        for (_, _, data, _) in &tensors {
            for &v in data {
                blob.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
            }
        }
        file.write_all(&blob)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::open(path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(XfddError::Format("not a checkpoint file (bad magic)".into()));
        }
        let mlen =
            u32::from_le_bytes(bytes[MAGIC.len()..MAGIC.len() + 4].try_into().unwrap()) as usize;
        let mstart = MAGIC.len() + 4;
        if bytes.len() < mstart + mlen {
            return Err(XfddError::Format(format!(
                "checkpoint manifest truncated: need {} bytes, have {}",
                mlen,
                bytes.len() - mstart
            )));
        }
        let manifest: CheckpointManifest = serde_json::from_slice(&bytes[mstart..mstart + mlen])
            .map_err(|e| XfddError::Format(format!("manifest decode: {e}")))?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(XfddError::Format(format!(
                "checkpoint schema {} unsupported (expected {SCHEMA_VERSION})",
                manifest.schema_version
            )));
        }
        let mut model = Model::<F>::build(manifest.spec.clone(), manifest.seed)?;
        let expected = model.state_tensors();
        if expected.len() != manifest.tensors.len() {
            return Err(XfddError::Format(format!(
                "checkpoint lists {} tensors, model has {}",
                manifest.tensors.len(),
                expected.len()
            )));
        }
        for ((name, shape, _, _), mt) in expected.iter().zip(&manifest.tensors) {
            if *name != mt.name || *shape != mt.shape {
                return Err(XfddError::Format(format!(
                    "checkpoint tensor {} {:?} does not match model tensor {} {:?}",
                    mt.name, mt.shape, name, shape
                )));
            }
        }
        let total: usize = expected.iter().map(|(_, _, d, _)| d.len()).sum();
        let blob = &bytes[mstart + mlen..];
        if blob.len() < total * 4 {
            return Err(XfddError::Format(format!(
                "checkpoint blob truncated: expected {} bytes, found {} ({} missing)",
                total * 4,
                blob.len(),
                total * 4 - blob.len()
            )));
        }
        let mut offset = 0usize;
        let mut values = Vec::with_capacity(total);
        for _ in 0..total {
            let v = f32::from_le_bytes(blob[offset..offset + 4].try_into().unwrap());
            values.push(F::from_f64(v as f64));
            offset += 4;
        }
        let mut cursor = 0usize;
        let mut fill: Vec<(String, Vec<F>)> = Vec::new();
        for (name, _, data, _) in &expected {
            fill.push((name.clone(), values[cursor..cursor + data.len()].to_vec()));
            cursor += data.len();
        }
        let mut idx = 0usize;
        model.visit_params_mut(&mut |name, t| {
            debug_assert_eq!(name, fill[idx].0);
            t.data_mut().copy_from_slice(&fill[idx].1);
            idx += 1;
        });
        for layer in model.layers.iter_mut() {
            if let LayerState::BatchNorm(bn) = layer {
                bn.running_mean.copy_from_slice(&fill[idx].1);
                idx += 1;
                bn.running_var.copy_from_slice(&fill[idx].1);
                idx += 1;
            }
        }
        Ok(model)
    }
}

const MAGIC: &[u8] = b"XFDDCKPT";
const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ManifestTensor {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct ManifestRow {
    name: String,
    output_shape: String,
    params: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    schema_version: u32,
    name: String,
    precision: String,
    seed: u64,
    spec: ModelSpec,
    layer_rows: Vec<ManifestRow>,
    tensors: Vec<ManifestTensor>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn expect_rows(rows: &[LayerRow], want: &[(&str, &str, usize)]) {
        assert_eq!(rows.len(), want.len(), "row count");
        for (row, (name, shape, params)) in rows.iter().zip(want) {
            assert_eq!(row.name, *name);
            assert_eq!(row.output_shape, *shape, "shape of {}", row.name);
            assert_eq!(row.params, *params, "params of {}", row.name);
        }
    }

    #[test]
    fn ftcm_architecture_table() {
        let spec = ModelSpec::ftcm();
        let account = count_params(&spec).unwrap();
        expect_rows(
            &account.rows,
            &[
                ("Conv1d-1", "[-1, 32, 500]", 2_336),
                ("BatchNorm1d-2", "[-1, 32, 500]", 64),
                ("ReLU-3", "[-1, 32, 500]", 0),
                ("MaxPool1d-4", "[-1, 32, 499]", 0),
                ("Conv1d-5", "[-1, 64, 499]", 6_208),
                ("BatchNorm1d-6", "[-1, 64, 499]", 128),
                ("ReLU-7", "[-1, 64, 499]", 0),
                ("MaxPool1d-8", "[-1, 64, 498]", 0),
                ("Conv1d-9", "[-1, 128, 498]", 24_704),
                ("BatchNorm1d-10", "[-1, 128, 498]", 256),
                ("ReLU-11", "[-1, 128, 498]", 0),
                ("MaxPool1d-12", "[-1, 128, 497]", 0),
                ("Conv1d-13", "[-1, 256, 497]", 98_560),
                ("BatchNorm1d-14", "[-1, 256, 497]", 512),
                ("ReLU-15", "[-1, 256, 497]", 0),
                ("MaxPool1d-16", "[-1, 256, 248]", 0),
                ("GRU-17", "[[[-1, 248, 512], [-1, 2, 512]]]", 0),
                ("Linear-18", "[-1, 128]", 65_664),
                ("ReLU-19", "[-1, 128]", 0),
                ("Dropout-20", "[-1, 128]", 0),
                ("Linear-21", "[-1, 7]", 903),
            ],
        );
        assert_eq!(account.table_total, 199_335);
        assert_eq!(account.recurrent_total, 2_755_584);
        assert_eq!(account.grand_total, 199_335 + 2_755_584);
    }

    #[test]
    fn flm_architecture_table() {
        let spec = ModelSpec::flm();
        let account = count_params(&spec).unwrap();
        expect_rows(
            &account.rows,
            &[
                ("Conv1d-1", "[-1, 32, 500]", 2_336),
                ("BatchNorm1d-2", "[-1, 32, 500]", 64),
                ("ReLU-3", "[-1, 32, 500]", 0),
                ("MaxPool1d-4", "[-1, 32, 499]", 0),
                ("Conv1d-5", "[-1, 64, 499]", 6_208),
                ("BatchNorm1d-6", "[-1, 64, 499]", 128),
                ("ReLU-7", "[-1, 64, 499]", 0),
                ("MaxPool1d-8", "[-1, 64, 498]", 0),
                ("Conv1d-9", "[-1, 128, 498]", 24_704),
                ("BatchNorm1d-10", "[-1, 128, 498]", 256),
                ("ReLU-11", "[-1, 128, 498]", 0),
                ("MaxPool1d-12", "[-1, 128, 497]", 0),
                ("Conv1d-13", "[-1, 256, 497]", 98_560),
                ("BatchNorm1d-14", "[-1, 256, 497]", 512),
                ("ReLU-15", "[-1, 256, 497]", 0),
                ("MaxPool1d-16", "[-1, 256, 496]", 0),
                ("Conv1d-17", "[-1, 512, 496]", 393_728),
                ("BatchNorm1d-18", "[-1, 512, 496]", 1_024),
                ("ReLU-19", "[-1, 512, 496]", 0),
                ("MaxPool1d-20", "[-1, 512, 495]", 0),
                ("GRU-21", "[[[-1, 495, 512], [-1, 2, 512]]]", 0),
                ("Linear-22", "[-1, 128]", 65_664),
                ("ReLU-23", "[-1, 128]", 0),
                ("Dropout-24", "[-1, 128]", 0),
                ("Linear-25", "[-1, 7]", 903),
            ],
        );
        assert_eq!(account.table_total, 594_087);
    }

    #[test]
    fn empty_spec_rejected() {
        let spec = ModelSpec {
            name: "empty".into(),
            input_channels: 24,
            window: 500,
            classes: 7,
            layers: vec![],
        };
        assert!(spec.rows().is_err());
        assert!(Model::<f32>::build(spec, 0).is_err());
    }

    #[test]
    fn headless_spec_rejected() {
        let spec = ModelSpec {
            name: "headless".into(),
            input_channels: 4,
            window: 16,
            classes: 7,
            layers: vec![LayerSpec::Gru { layers: 1, hidden: 8 }],
        };
        let err = spec.rows().unwrap_err().to_string();
        assert!(err.contains("expected 7 classes"), "err: {err}");
    }

    #[test]
    fn misplaced_layer_names_offender() {
        let spec = ModelSpec {
            name: "bad".into(),
            input_channels: 4,
            window: 16,
            classes: 7,
            layers: vec![
                LayerSpec::Gru { layers: 1, hidden: 8 },
                LayerSpec::Conv1d { out_channels: 8, kernel: 3, stride: 1, padding: 1 },
            ],
        };
        let err = spec.rows().unwrap_err().to_string();
        assert!(err.contains("layer 2"), "err: {err}");
    }

    #[test]
    fn eval_forward_is_pure() {
        let spec = ModelSpec::desk(4, 20, 7);
        let model = Model::<f32>::build(spec, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f32>::rand_uniform(&[3, 4, 20], -1.0, 1.0, &mut rng);
        let a = model.logits(&x).unwrap();
        let b = model.logits(&x).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(a.shape(), &[3, 7]);
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let spec = ModelSpec::desk(4, 20, 7);
        let mut model = Model::<f32>::build(spec, 3).unwrap();
        // Leave non-trivial running stats behind before saving.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::<f32>::rand_uniform(&[4, 4, 20], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x, false);
        model.forward_train(&mut tape, xv, &mut rng).unwrap();
        model.save(&path).unwrap();

        let loaded = Model::<f32>::load(&path).unwrap();
        let mut lhs: Vec<(String, Vec<f32>)> = Vec::new();
        model.visit_params(&mut |n, t| lhs.push((n.into(), t.data().to_vec())));
        let mut rhs: Vec<(String, Vec<f32>)> = Vec::new();
        loaded.visit_params(&mut |n, t| rhs.push((n.into(), t.data().to_vec())));
        assert_eq!(lhs.len(), rhs.len());
        for (a, b) in lhs.iter().zip(&rhs) {
            assert_eq!(a.0, b.0);
            assert_eq!(a.1, b.1, "tensor {} differs", a.0);
        }
        let ya = model.logits(&x).unwrap();
        let yb = loaded.logits(&x).unwrap();
        assert_eq!(ya.data(), yb.data());
    }

    #[test]
    fn checkpoint_truncation_names_missing_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = Model::<f32>::build(ModelSpec::desk(4, 20, 7), 3).unwrap();
        model.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        let err = match Model::<f32>::load(&path) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("truncated load should fail"),
        };
        assert!(err.contains("missing"), "err: {err}");
    }

    #[test]
    fn ftcm_checkpoint_manifest_lists_21_rows() {
        let spec = ModelSpec::ftcm();
        assert_eq!(spec.rows().unwrap().len(), 21);
        assert_eq!(ModelSpec::flm().rows().unwrap().len(), 25);
    }

    #[test]
    fn desk_spec_shapes() {
        let spec = ModelSpec::desk(24, 50, 7);
        let rows = spec.rows().unwrap();
        // 50 -> 49 -> 48 -> 47 -> pool stride 2 -> 23 steps into the GRU.
        assert_eq!(rows[15].output_shape, "[-1, 64, 23]");
        assert_eq!(rows[16].output_shape, "[[[-1, 23, 64], [-1, 2, 64]]]");
        assert_eq!(rows.last().unwrap().output_shape, "[-1, 7]");
    }

    #[test]
    fn baseline_specs_build() {
        for kind in [RecurrentKind::Rnn, RecurrentKind::Gru, RecurrentKind::Lstm] {
            let spec = ModelSpec::baseline(kind, 24, 50, 32, 1, 7);
            let model = Model::<f32>::build(spec, 5).unwrap();
            let x = Tensor::<f32>::zeros(&[2, 24, 50]);
            let y = model.logits(&x).unwrap();
            assert_eq!(y.shape(), &[2, 7]);
        }
    }
}
