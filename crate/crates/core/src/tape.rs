//! Define-by-run reverse-mode automatic differentiation on a flat tape.
//!
//! Every forward pass rebuilds the tape: leaves snapshot their tensor data,
//! each primitive op records operand/output buffer ids plus whatever it needs
//! for the reverse sweep (pool argmaxes, batch-norm statistics, softmax
//! probabilities). `backward` replays the op list in reverse and accumulates
//! gradients per buffer. A tape is a single-threaded object; the kernels
//! inside an op may fan out across a thread pool, but every output element is
//! written by exactly one task with a fixed-order inner reduction, so results
//! are bit-identical regardless of thread count.

use crate::error::{invalid, shape_err, Result, XfddError};
use crate::tensor::{Scalar, Tensor};
use rayon::prelude::*;

pub type VarId = usize;

/// Work threshold below which kernels stay on the calling thread.
const PAR_WORK: usize = 1 << 15;

struct Buf<F> {
    data: Vec<F>,
    shape: Vec<usize>,
    requires_grad: bool,
    /// True when this buffer depends on at least one grad-enabled leaf.
    on_path: bool,
}

enum Op<F> {
    Add { a: VarId, b: VarId, out: VarId },
    Sub { a: VarId, b: VarId, out: VarId },
    Mul { a: VarId, b: VarId, out: VarId },
    OneMinus { a: VarId, out: VarId },
    Scale { a: VarId, factor: F, out: VarId },
    Sigmoid { a: VarId, out: VarId },
    Tanh { a: VarId, out: VarId },
    Relu { a: VarId, out: VarId },
    Matmul { a: VarId, b: VarId, out: VarId, m: usize, k: usize, n: usize },
    /// C[m,n] = A[m,k] · B[n,k]^T; the layout linear layers want.
    MatmulTransB { a: VarId, b: VarId, out: VarId, m: usize, k: usize, n: usize },
    AddRowBias { a: VarId, bias: VarId, out: VarId, rows: usize, cols: usize },
    Conv1d {
        x: VarId,
        w: VarId,
        b: VarId,
        out: VarId,
        stride: usize,
        pad: usize,
        n: usize,
        cin: usize,
        l: usize,
        cout: usize,
        ksize: usize,
        lout: usize,
    },
    MaxPool1d {
        x: VarId,
        out: VarId,
        n: usize,
        c: usize,
        l: usize,
        lout: usize,
        /// Absolute in-row index of the (first) max per output cell.
        argmax: Vec<u32>,
    },
    BatchNorm {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        out: VarId,
        n: usize,
        c: usize,
        l: usize,
        /// Per-channel statistics the normalization used. In train mode these
        /// are batch statistics and the backward includes their dependence on
        /// x; in eval mode they are running statistics treated as constants.
        mean: Vec<F>,
        invstd: Vec<F>,
        train: bool,
    },
    SelectTime { x: VarId, out: VarId, t: usize, n: usize, c: usize, l: usize },
    SelectCol { x: VarId, out: VarId, col: usize, rows: usize, cols: usize },
    Reshape { a: VarId, out: VarId },
    Sum { a: VarId, out: VarId },
    Mean { a: VarId, out: VarId },
    AbsSum { a: VarId, out: VarId },
    SqSum { a: VarId, out: VarId },
    SoftmaxCrossEntropy {
        logits: VarId,
        out: VarId,
        labels: Vec<usize>,
        /// Per-class weights, indexed by label.
        weights: Vec<F>,
        probs: Vec<F>,
        n: usize,
        k: usize,
    },
}

pub struct Tape<F> {
    bufs: Vec<Buf<F>>,
    ops: Vec<Op<F>>,
}

/// Gradient (or DeepLIFT multiplier) per buffer, produced by a reverse sweep.
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, id: VarId) -> Option<&[F]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor; buffers outside the output's ancestry get zeros.
    pub fn tensor(&self, id: VarId) -> Tensor<F> {
        match &self.grads[id] {
            Some(g) => Tensor::new(self.shapes[id].clone(), g.clone()).expect("shape tracked"),
            None => Tensor::zeros(&self.shapes[id]),
        }
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { bufs: Vec::new(), ops: Vec::new() }
    }

    pub fn leaf(&mut self, t: &Tensor<F>, requires_grad: bool) -> VarId {
        self.push_buf(t.shape().to_vec(), t.data().to_vec(), requires_grad, requires_grad)
    }

    pub fn value(&self, id: VarId) -> Tensor<F> {
        Tensor::new(self.bufs[id].shape.clone(), self.bufs[id].data.clone()).expect("buf shape")
    }

    pub fn data(&self, id: VarId) -> &[F] {
        &self.bufs[id].data
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        &self.bufs[id].shape
    }

    pub fn numel(&self, id: VarId) -> usize {
        self.bufs[id].data.len()
    }

    pub fn requires_grad(&self, id: VarId) -> bool {
        self.bufs[id].requires_grad
    }

    pub fn op_count(&self) -> usize {
        self.ops.len()
    }

    fn push_buf(
        &mut self,
        shape: Vec<usize>,
        data: Vec<F>,
        requires_grad: bool,
        on_path: bool,
    ) -> VarId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.bufs.push(Buf { data, shape, requires_grad, on_path });
        self.bufs.len() - 1
    }

    fn out_of(&mut self, shape: Vec<usize>, data: Vec<F>, operands: &[VarId]) -> VarId {
        let on_path = operands.iter().any(|&id| self.bufs[id].on_path);
        self.push_buf(shape, data, false, on_path)
    }

    // ---- elementwise ----

    fn binary_shapes(&self, a: VarId, b: VarId) -> Result<Vec<usize>> {
        let (sa, sb) = (&self.bufs[a].shape, &self.bufs[b].shape);
        if sa == sb {
            Ok(sa.clone())
        } else if self.bufs[b].data.len() == 1 {
            Ok(sa.clone())
        } else if self.bufs[a].data.len() == 1 {
            Ok(sb.clone())
        } else {
            shape_err(sa, sb)
        }
    }

    fn broadcast_pair(&self, a: VarId, b: VarId, f: impl Fn(F, F) -> F) -> Vec<F> {
        let (da, db) = (&self.bufs[a].data, &self.bufs[b].data);
        if da.len() == db.len() {
            da.iter().zip(db.iter()).map(|(&x, &y)| f(x, y)).collect()
        } else if db.len() == 1 {
            let y = db[0];
            da.iter().map(|&x| f(x, y)).collect()
        } else {
            let x = da[0];
            db.iter().map(|&y| f(x, y)).collect()
        }
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let shape = self.binary_shapes(a, b)?;
        let data = self.broadcast_pair(a, b, |x, y| x + y);
        let out = self.out_of(shape, data, &[a, b]);
        self.ops.push(Op::Add { a, b, out });
        Ok(out)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let shape = self.binary_shapes(a, b)?;
        let data = self.broadcast_pair(a, b, |x, y| x - y);
        let out = self.out_of(shape, data, &[a, b]);
        self.ops.push(Op::Sub { a, b, out });
        Ok(out)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let shape = self.binary_shapes(a, b)?;
        let data = self.broadcast_pair(a, b, |x, y| x * y);
        let out = self.out_of(shape, data, &[a, b]);
        self.ops.push(Op::Mul { a, b, out });
        Ok(out)
    }

    pub fn one_minus(&mut self, a: VarId) -> Result<VarId> {
        let shape = self.bufs[a].shape.clone();
        let data = self.bufs[a].data.iter().map(|&x| F::one() - x).collect();
        let out = self.out_of(shape, data, &[a]);
        self.ops.push(Op::OneMinus { a, out });
        Ok(out)
    }

    pub fn scale(&mut self, a: VarId, factor: F) -> Result<VarId> {
        let shape = self.bufs[a].shape.clone();
        let data = self.bufs[a].data.iter().map(|&x| x * factor).collect();
        let out = self.out_of(shape, data, &[a]);
        self.ops.push(Op::Scale { a, factor, out });
        Ok(out)
    }

    pub fn sigmoid(&mut self, a: VarId) -> Result<VarId> {
        let shape = self.bufs[a].shape.clone();
        let data = self.bufs[a].data.iter().map(|&x| sigmoid(x)).collect();
        let out = self.out_of(shape, data, &[a]);
        self.ops.push(Op::Sigmoid { a, out });
        Ok(out)
    }

    pub fn tanh(&mut self, a: VarId) -> Result<VarId> {
        let shape = self.bufs[a].shape.clone();
        let data = self.bufs[a].data.iter().map(|&x| x.tanh()).collect();
        let out = self.out_of(shape, data, &[a]);
        self.ops.push(Op::Tanh { a, out });
        Ok(out)
    }

    pub fn relu(&mut self, a: VarId) -> Result<VarId> {
        let shape = self.bufs[a].shape.clone();
        let zero = F::zero();
        let data = self.bufs[a].data.iter().map(|&x| if x > zero { x } else { zero }).collect();
        let out = self.out_of(shape, data, &[a]);
        self.ops.push(Op::Relu { a, out });
        Ok(out)
    }

    // ---- linear algebra ----

    fn mat_dims(&self, a: VarId, b: VarId, trans_b: bool) -> Result<(usize, usize, usize)> {
        let sa = &self.bufs[a].shape;
        let sb = &self.bufs[b].shape;
        if sa.len() != 2 || sb.len() != 2 {
            return shape_err(sa, sb);
        }
        let (m, k) = (sa[0], sa[1]);
        let (n, kb) = if trans_b { (sb[0], sb[1]) } else { (sb[1], sb[0]) };
        if k != kb {
            return shape_err(sa, sb);
        }
        Ok((m, k, n))
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (m, k, n) = self.mat_dims(a, b, false)?;
        let data = mm(&self.bufs[a].data, &self.bufs[b].data, m, k, n);
        let out = self.out_of(vec![m, n], data, &[a, b]);
        self.ops.push(Op::Matmul { a, b, out, m, k, n });
        Ok(out)
    }

    pub fn matmul_transb(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (m, k, n) = self.mat_dims(a, b, true)?;
        let data = mm_transb(&self.bufs[a].data, &self.bufs[b].data, m, k, n);
        let out = self.out_of(vec![m, n], data, &[a, b]);
        self.ops.push(Op::MatmulTransB { a, b, out, m, k, n });
        Ok(out)
    }

    pub fn add_row_bias(&mut self, a: VarId, bias: VarId) -> Result<VarId> {
        let sa = self.bufs[a].shape.clone();
        let sb = &self.bufs[bias].shape;
        if sa.len() != 2 || sb.len() != 1 || sb[0] != sa[1] {
            return shape_err(&sa, sb);
        }
        let (rows, cols) = (sa[0], sa[1]);
        let bdat = &self.bufs[bias].data;
        let mut data = self.bufs[a].data.clone();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += bdat[c];
            }
        }
        let out = self.out_of(sa, data, &[a, bias]);
        self.ops.push(Op::AddRowBias { a, bias, out, rows, cols });
        Ok(out)
    }

    // ---- structured layers ----

    pub fn conv1d(
        &mut self,
        x: VarId,
        w: VarId,
        b: VarId,
        stride: usize,
        pad: usize,
    ) -> Result<VarId> {
        let sx = self.bufs[x].shape.clone();
        let sw = self.bufs[w].shape.clone();
        let sb = self.bufs[b].shape.clone();
        if sx.len() != 3 || sw.len() != 3 || sb.len() != 1 {
            return shape_err(&sx, &sw);
        }
        let (n, cin, l) = (sx[0], sx[1], sx[2]);
        let (cout, wcin, ksize) = (sw[0], sw[1], sw[2]);
        if wcin != cin || sb[0] != cout {
            return shape_err(&sx, &sw);
        }
        if stride == 0 {
            return invalid("conv1d stride must be >= 1");
        }
        let padded = l + 2 * pad;
        if ksize == 0 || ksize > padded {
            return invalid(format!("conv1d kernel {ksize} exceeds padded length {padded}"));
        }
        let lout = (padded - ksize) / stride + 1;
        let data = conv1d_fwd(
            &self.bufs[x].data,
            &self.bufs[w].data,
            &self.bufs[b].data,
            n,
            cin,
            l,
            cout,
            ksize,
            stride,
            pad,
            lout,
        );
        let out = self.out_of(vec![n, cout, lout], data, &[x, w, b]);
        self.ops.push(Op::Conv1d { x, w, b, out, stride, pad, n, cin, l, cout, ksize, lout });
        Ok(out)
    }

    pub fn maxpool1d(&mut self, x: VarId, k: usize, stride: usize) -> Result<VarId> {
        let sx = self.bufs[x].shape.clone();
        if sx.len() != 3 {
            return shape_err(&sx, &[0, 0, 0]);
        }
        let (n, c, l) = (sx[0], sx[1], sx[2]);
        if k == 0 || stride == 0 {
            return invalid("maxpool1d kernel and stride must be >= 1");
        }
        if k > l {
            return invalid(format!("maxpool1d kernel {k} exceeds input length {l}"));
        }
        let lout = (l - k) / stride + 1;
        let (data, argmax) = maxpool_fwd(&self.bufs[x].data, n, c, l, k, stride, lout);
        let out = self.out_of(vec![n, c, lout], data, &[x]);
        self.ops.push(Op::MaxPool1d { x, out, n, c, l, lout, argmax });
        Ok(out)
    }

    /// Batch normalization over (batch, length) per channel.
    /// Train mode computes batch statistics (population variance) and returns
    /// them so the caller can maintain running statistics; eval mode applies
    /// the provided statistics as a fixed affine map.
    pub fn batchnorm(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        eps: F,
        running: Option<(&[F], &[F])>,
    ) -> Result<(VarId, Vec<F>, Vec<F>)> {
        let sx = self.bufs[x].shape.clone();
        if sx.len() != 3 {
            return shape_err(&sx, &[0, 0, 0]);
        }
        let (n, c, l) = (sx[0], sx[1], sx[2]);
        if self.bufs[gamma].shape != [c] || self.bufs[beta].shape != [c] {
            return shape_err(&self.bufs[gamma].shape, &[c]);
        }
        let train = running.is_none();
        let (mean, var): (Vec<F>, Vec<F>) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec()),
            None => {
                if n * l < 2 {
                    return invalid("batchnorm train mode needs at least 2 values per channel");
                }
                bn_stats(&self.bufs[x].data, n, c, l)
            }
        };
        let invstd: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let data = bn_apply(
            &self.bufs[x].data,
            &self.bufs[gamma].data,
            &self.bufs[beta].data,
            &mean,
            &invstd,
            n,
            c,
            l,
        );
        let out = self.out_of(vec![n, c, l], data, &[x, gamma, beta]);
        self.ops.push(Op::BatchNorm {
            x,
            gamma,
            beta,
            out,
            n,
            c,
            l,
            mean: mean.clone(),
            invstd,
            train,
        });
        Ok((out, mean, var))
    }

    /// out[n, c] = x[n, c, t]
    pub fn select_time(&mut self, x: VarId, t: usize) -> Result<VarId> {
        let sx = self.bufs[x].shape.clone();
        if sx.len() != 3 {
            return shape_err(&sx, &[0, 0, 0]);
        }
        let (n, c, l) = (sx[0], sx[1], sx[2]);
        if t >= l {
            return invalid(format!("select_time index {t} out of range {l}"));
        }
        let xd = &self.bufs[x].data;
        let mut data = Vec::with_capacity(n * c);
        for nn in 0..n {
            for cc in 0..c {
                data.push(xd[(nn * c + cc) * l + t]);
            }
        }
        let out = self.out_of(vec![n, c], data, &[x]);
        self.ops.push(Op::SelectTime { x, out, t, n, c, l });
        Ok(out)
    }

    /// out[r] = x[r, col]
    pub fn select_col(&mut self, x: VarId, col: usize) -> Result<VarId> {
        let sx = self.bufs[x].shape.clone();
        if sx.len() != 2 || col >= sx[1] {
            return invalid(format!("select_col {col} on shape {sx:?}"));
        }
        let (rows, cols) = (sx[0], sx[1]);
        let xd = &self.bufs[x].data;
        let data: Vec<F> = (0..rows).map(|r| xd[r * cols + col]).collect();
        let out = self.out_of(vec![rows], data, &[x]);
        self.ops.push(Op::SelectCol { x, out, col, rows, cols });
        Ok(out)
    }

    pub fn reshape(&mut self, a: VarId, shape: &[usize]) -> Result<VarId> {
        let numel: usize = shape.iter().product();
        if numel != self.bufs[a].data.len() {
            return shape_err(&self.bufs[a].shape, shape);
        }
        let data = self.bufs[a].data.clone();
        let out = self.out_of(shape.to_vec(), data, &[a]);
        self.ops.push(Op::Reshape { a, out });
        Ok(out)
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: VarId) -> Result<VarId> {
        let s = self.bufs[a].data.iter().fold(F::zero(), |acc, &v| acc + v);
        let out = self.out_of(vec![1], vec![s], &[a]);
        self.ops.push(Op::Sum { a, out });
        Ok(out)
    }

    pub fn mean(&mut self, a: VarId) -> Result<VarId> {
        let len = self.bufs[a].data.len();
        if len == 0 {
            return invalid("mean of empty tensor");
        }
        let s = self.bufs[a].data.iter().fold(F::zero(), |acc, &v| acc + v);
        let m = s / F::from_f64(len as f64);
        let out = self.out_of(vec![1], vec![m], &[a]);
        self.ops.push(Op::Mean { a, out });
        Ok(out)
    }

    pub fn abs_sum(&mut self, a: VarId) -> Result<VarId> {
        let s = self.bufs[a].data.iter().fold(F::zero(), |acc, &v| acc + v.abs());
        let out = self.out_of(vec![1], vec![s], &[a]);
        self.ops.push(Op::AbsSum { a, out });
        Ok(out)
    }

    pub fn sq_sum(&mut self, a: VarId) -> Result<VarId> {
        let s = self.bufs[a].data.iter().fold(F::zero(), |acc, &v| acc + v * v);
        let out = self.out_of(vec![1], vec![s], &[a]);
        self.ops.push(Op::SqSum { a, out });
        Ok(out)
    }

    /// Mean over the batch of per-sample weighted cross-entropy from logits.
    /// `weights` is indexed by class; the per-sample loss is
    /// `-w[y] * ln softmax(logits)[y]`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: VarId,
        labels: &[usize],
        weights: &[F],
    ) -> Result<VarId> {
        let s = self.bufs[logits].shape.clone();
        if s.len() != 2 {
            return shape_err(&s, &[0, 0]);
        }
        let (n, k) = (s[0], s[1]);
        if labels.len() != n {
            return invalid(format!("{} labels for batch of {n}", labels.len()));
        }
        if weights.len() != k {
            return invalid(format!("{} class weights for {k} classes", weights.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return invalid(format!("label {bad} out of range for {k} classes"));
        }
        let ld = &self.bufs[logits].data;
        let mut probs = vec![F::zero(); n * k];
        let mut loss = F::zero();
        for i in 0..n {
            let row = &ld[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut denom = F::zero();
            for j in 0..k {
                let e = (row[j] - max).exp();
                probs[i * k + j] = e;
                denom += e;
            }
            for j in 0..k {
                probs[i * k + j] /= denom;
            }
            let y = labels[i];
            let log_p = row[y] - max - denom.ln();
            loss -= weights[y] * log_p;
        }
        loss /= F::from_f64(n as f64);
        let out = self.out_of(vec![1], vec![loss], &[logits]);
        self.ops.push(Op::SoftmaxCrossEntropy {
            logits,
            out,
            labels: labels.to_vec(),
            weights: weights.to_vec(),
            probs,
            n,
            k,
        });
        Ok(out)
    }

    // ---- reverse sweeps ----

    /// Reverse-accumulate gradients of a scalar output.
    pub fn backward(&self, out: VarId) -> Result<Gradients<F>> {
        if self.bufs[out].data.len() != 1 {
            return invalid(format!(
                "backward needs a scalar output, got shape {:?}",
                self.bufs[out].shape
            ));
        }
        let mut g: Vec<Option<Vec<F>>> = (0..self.bufs.len()).map(|_| None).collect();
        g[out] = Some(vec![F::one()]);
        for op in self.ops.iter().rev() {
            self.backward_op(op, &mut g, None);
        }
        Ok(Gradients { grads: g, shapes: self.bufs.iter().map(|b| b.shape.clone()).collect() })
    }

    /// Reverse-accumulate contribution multipliers against a reference run of
    /// the identical op sequence. Linear ops propagate exactly like gradients;
    /// unary nonlinearities use the secant slope (Δout/Δin) when the input
    /// moved more than 1e-7, elementwise products use averaged-operand
    /// multipliers (exact for bilinear terms), and maxpool routes the full
    /// output delta to the argmax of the actual input. The caller multiplies a
    /// leaf's multiplier by its input delta to obtain attributions.
    pub fn multiplier_sweep(&self, reference: &Tape<F>, out: VarId) -> Result<Gradients<F>> {
        if self.bufs[out].data.len() != 1 {
            return invalid("multiplier sweep needs a scalar output".to_string());
        }
        if self.ops.len() != reference.ops.len() || self.bufs.len() != reference.bufs.len() {
            return invalid("multiplier sweep requires structurally identical tapes".to_string());
        }
        let mut g: Vec<Option<Vec<F>>> = (0..self.bufs.len()).map(|_| None).collect();
        g[out] = Some(vec![F::one()]);
        for (op, rop) in self.ops.iter().zip(reference.ops.iter()).rev() {
            self.multiplier_op(op, rop, reference, &mut g)?;
        }
        Ok(Gradients { grads: g, shapes: self.bufs.iter().map(|b| b.shape.clone()).collect() })
    }

    fn accum(&self, g: &mut Vec<Option<Vec<F>>>, id: VarId, contrib: &[F]) {
        if !self.bufs[id].on_path {
            return;
        }
        let slot = &mut g[id];
        match slot {
            Some(acc) => {
                for (a, &c) in acc.iter_mut().zip(contrib) {
                    *a += c;
                }
            }
            None => *slot = Some(contrib.to_vec()),
        }
    }

    /// Accumulate into `id` honouring scalar broadcasting: when the operand is
    /// a scalar the incoming contribution is reduced by summation.
    fn accum_broadcast(&self, g: &mut Vec<Option<Vec<F>>>, id: VarId, contrib: &[F]) {
        if self.bufs[id].data.len() == 1 && contrib.len() > 1 {
            let s = contrib.iter().fold(F::zero(), |acc, &v| acc + v);
            self.accum(g, id, &[s]);
        } else {
            self.accum(g, id, contrib);
        }
    }

    fn backward_op(
        &self,
        op: &Op<F>,
        g: &mut Vec<Option<Vec<F>>>,
        // For the multiplier sweep: (reference tape, reference op). None for
        // plain gradients.
        paired: Option<(&Tape<F>, &Op<F>)>,
    ) {
        match *op {
            Op::Add { a, b, out } => {
                let Some(d) = g[out].clone() else { return };
                self.accum_broadcast(g, a, &d);
                self.accum_broadcast(g, b, &d);
            }
            Op::Sub { a, b, out } => {
                let Some(d) = g[out].clone() else { return };
                self.accum_broadcast(g, a, &d);
                let neg: Vec<F> = d.iter().map(|&v| -v).collect();
                self.accum_broadcast(g, b, &neg);
            }
            Op::Mul { a, b, out } => {
                let Some(d) = g[out].clone() else { return };
                // In the paired sweep products attribute against the mean of
                // the two runs' operands, which keeps the decomposition exact.
                let (adat, bdat): (Vec<F>, Vec<F>) = match paired {
                    None => (self.bufs[a].data.clone(), self.bufs[b].data.clone()),
                    Some((rt, _)) => {
                        let half = F::from_f64(0.5);
                        let am = self.bufs[a]
                            .data
                            .iter()
                            .zip(&rt.bufs[a].data)
                            .map(|(&x, &xr)| (x + xr) * half)
                            .collect();
                        let bm = self.bufs[b]
                            .data
                            .iter()
                            .zip(&rt.bufs[b].data)
                            .map(|(&x, &xr)| (x + xr) * half)
                            .collect();
                        (am, bm)
                    }
                };
                let da = broadcast_mul(&d, &bdat);
                self.accum_broadcast(g, a, &da);
                let db = broadcast_mul(&d, &adat);
                self.accum_broadcast(g, b, &db);
            }
            Op::OneMinus { a, out } => {
                let Some(d) = g[out].clone() else { return };
                let neg: Vec<F> = d.iter().map(|&v| -v).collect();
                self.accum(g, a, &neg);
            }
            Op::Scale { a, factor, out } => {
                let Some(d) = g[out].clone() else { return };
                let da: Vec<F> = d.iter().map(|&v| v * factor).collect();
                self.accum(g, a, &da);
            }
            Op::Sigmoid { a, out } | Op::Tanh { a, out } | Op::Relu { a, out } => {
                let Some(d) = g[out].clone() else { return };
                let slopes = match paired {
                    None => self.local_slopes(op, a, out),
                    Some((rt, _)) => self.secant_slopes(op, rt, a, out),
                };
                let da: Vec<F> = d.iter().zip(&slopes).map(|(&dv, &s)| dv * s).collect();
                self.accum(g, a, &da);
            }
            Op::Matmul { a, b, out, m, k, n } => {
                let Some(d) = g[out].clone() else { return };
                if self.bufs[a].on_path {
                    let da = mm_transb(&d, &self.bufs[b].data, m, n, k);
                    self.accum(g, a, &da);
                }
                if self.bufs[b].on_path {
                    let db = mm_transa(&self.bufs[a].data, &d, m, k, n);
                    self.accum(g, b, &db);
                }
            }
            Op::MatmulTransB { a, b, out, m, k, n } => {
                let Some(d) = g[out].clone() else { return };
                if self.bufs[a].on_path {
                    let da = mm(&d, &self.bufs[b].data, m, n, k);
                    self.accum(g, a, &da);
                }
                if self.bufs[b].on_path {
                    let db = mm_transa(&d, &self.bufs[a].data, m, n, k);
                    self.accum(g, b, &db);
                }
            }
            Op::AddRowBias { a, bias, out, rows, cols } => {
                let Some(d) = g[out].clone() else { return };
                self.accum(g, a, &d);
                if self.bufs[bias].on_path {
                    let mut db = vec![F::zero(); cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            db[c] += d[r * cols + c];
                        }
                    }
                    self.accum(g, bias, &db);
                }
            }
            Op::Conv1d { x, w, b, out: o, stride, pad, n, cin, l, cout, ksize, lout } => {
                let Some(d) = g[o].clone() else { return };
                if self.bufs[x].on_path {
                    let dx =
                        conv1d_bwd_x(&d, &self.bufs[w].data, n, cin, l, cout, ksize, stride, pad, lout);
                    self.accum(g, x, &dx);
                }
                if self.bufs[w].on_path {
                    let dw =
                        conv1d_bwd_w(&d, &self.bufs[x].data, n, cin, l, cout, ksize, stride, pad, lout);
                    self.accum(g, w, &dw);
                }
                if self.bufs[b].on_path {
                    let mut db = vec![F::zero(); cout];
                    for nn in 0..n {
                        for co in 0..cout {
                            let row = &d[(nn * cout + co) * lout..(nn * cout + co + 1) * lout];
                            for &v in row {
                                db[co] += v;
                            }
                        }
                    }
                    self.accum(g, b, &db);
                }
            }
            Op::MaxPool1d { x, out, n, c, lout, ref argmax, l, .. } => {
                let Some(d) = g[out].clone() else { return };
                let mut dx = vec![F::zero(); n * c * l];
                match paired {
                    None => {
                        for (cell, &dv) in d.iter().enumerate() {
                            let row = cell / lout;
                            dx[row * l + argmax[cell] as usize] += dv;
                        }
                    }
                    Some((rt, rop)) => {
                        // Route the full output delta to the actual input's
                        // argmax with a secant multiplier so the sweep stays
                        // summation-exact even when the reference argmax
                        // differs. If the input delta there is degenerate
                        // (e.g. both sides clipped to zero by an upstream
                        // relu) the output delta still has to land somewhere,
                        // so fall back to the reference argmax. When both
                        // deltas are below threshold the output delta is
                        // bounded by the threshold too and local routing
                        // loses nothing measurable.
                        let Op::MaxPool1d { argmax: ref rargmax, .. } = *rop else {
                            unreachable!("paired op mismatch");
                        };
                        let thresh = F::from_f64(1e-7);
                        let yv = &self.bufs[out].data;
                        let yr = &rt.bufs[out].data;
                        let xv = &self.bufs[x].data;
                        let xr = &rt.bufs[x].data;
                        for (cell, &dv) in d.iter().enumerate() {
                            let row = cell / lout;
                            let dy = yv[cell] - yr[cell];
                            let idx = row * l + argmax[cell] as usize;
                            let dxin = xv[idx] - xr[idx];
                            if dxin.abs() > thresh {
                                dx[idx] += dv * (dy / dxin);
                                continue;
                            }
                            let ridx = row * l + rargmax[cell] as usize;
                            let rdxin = xv[ridx] - xr[ridx];
                            if rdxin.abs() > thresh {
                                dx[ridx] += dv * (dy / rdxin);
                            } else {
                                dx[idx] += dv;
                            }
                        }
                    }
                }
                self.accum(g, x, &dx);
            }
            Op::BatchNorm { x, gamma, beta, out, n, c, l, ref mean, ref invstd, train } => {
                let Some(d) = g[out].clone() else { return };
                let xd = &self.bufs[x].data;
                let gd = &self.bufs[gamma].data;
                let m_count = F::from_f64((n * l) as f64);
                let mut dgamma = vec![F::zero(); c];
                let mut dbeta = vec![F::zero(); c];
                for cc in 0..c {
                    let (mu, is) = (mean[cc], invstd[cc]);
                    for nn in 0..n {
                        let base = (nn * c + cc) * l;
                        for ll in 0..l {
                            let dv = d[base + ll];
                            let xhat = (xd[base + ll] - mu) * is;
                            dgamma[cc] += dv * xhat;
                            dbeta[cc] += dv;
                        }
                    }
                }
                if self.bufs[x].on_path {
                    let mut dx = vec![F::zero(); n * c * l];
                    for cc in 0..c {
                        let (mu, is) = (mean[cc], invstd[cc]);
                        let scale = gd[cc] * is;
                        if train {
                            let mean_d = dbeta[cc] / m_count;
                            let mean_dxhat = dgamma[cc] / m_count;
                            for nn in 0..n {
                                let base = (nn * c + cc) * l;
                                for ll in 0..l {
                                    let xhat = (xd[base + ll] - mu) * is;
                                    dx[base + ll] =
                                        scale * (d[base + ll] - mean_d - xhat * mean_dxhat);
                                }
                            }
                        } else {
                            for nn in 0..n {
                                let base = (nn * c + cc) * l;
                                for ll in 0..l {
                                    dx[base + ll] = scale * d[base + ll];
                                }
                            }
                        }
                    }
                    self.accum(g, x, &dx);
                }
                if self.bufs[gamma].on_path {
                    self.accum(g, gamma, &dgamma);
                }
                if self.bufs[beta].on_path {
                    self.accum(g, beta, &dbeta);
                }
            }
            Op::SelectTime { x, out, t, n, c, l } => {
                let Some(d) = g[out].clone() else { return };
                let mut dx = vec![F::zero(); n * c * l];
                for nn in 0..n {
                    for cc in 0..c {
                        dx[(nn * c + cc) * l + t] = d[nn * c + cc];
                    }
                }
                self.accum(g, x, &dx);
            }
            Op::SelectCol { x, out, col, rows, cols } => {
                let Some(d) = g[out].clone() else { return };
                let mut dx = vec![F::zero(); rows * cols];
                for r in 0..rows {
                    dx[r * cols + col] = d[r];
                }
                self.accum(g, x, &dx);
            }
            Op::Reshape { a, out } => {
                let Some(d) = g[out].clone() else { return };
                self.accum(g, a, &d);
            }
            Op::Sum { a, out } => {
                let Some(d) = g[out].clone() else { return };
                let da = vec![d[0]; self.bufs[a].data.len()];
                self.accum(g, a, &da);
            }
            Op::Mean { a, out } => {
                let Some(d) = g[out].clone() else { return };
                let len = self.bufs[a].data.len();
                let da = vec![d[0] / F::from_f64(len as f64); len];
                self.accum(g, a, &da);
            }
            Op::AbsSum { a, out } => {
                let Some(d) = g[out].clone() else { return };
                let zero = F::zero();
                let da: Vec<F> = self.bufs[a]
                    .data
                    .iter()
                    .map(|&x| {
                        // Subgradient 0 at exactly zero.
                        if x > zero {
                            d[0]
                        } else if x < zero {
                            -d[0]
                        } else {
                            zero
                        }
                    })
                    .collect();
                self.accum(g, a, &da);
            }
            Op::SqSum { a, out } => {
                let Some(d) = g[out].clone() else { return };
                let two = F::from_f64(2.0);
                let da: Vec<F> = self.bufs[a].data.iter().map(|&x| two * x * d[0]).collect();
                self.accum(g, a, &da);
            }
            Op::SoftmaxCrossEntropy { logits, out, ref labels, ref weights, ref probs, n, k } => {
                let Some(d) = g[out].clone() else { return };
                let inv_n = F::one() / F::from_f64(n as f64);
                let mut dl = vec![F::zero(); n * k];
                for i in 0..n {
                    let w = weights[labels[i]];
                    for j in 0..k {
                        let indicator = if j == labels[i] { F::one() } else { F::zero() };
                        dl[i * k + j] = d[0] * w * (probs[i * k + j] - indicator) * inv_n;
                    }
                }
                self.accum(g, logits, &dl);
            }
        }
    }

    fn multiplier_op(
        &self,
        op: &Op<F>,
        rop: &Op<F>,
        reference: &Tape<F>,
        g: &mut Vec<Option<Vec<F>>>,
    ) -> Result<()> {
        if std::mem::discriminant(op) != std::mem::discriminant(rop) {
            return invalid("multiplier sweep requires structurally identical tapes".to_string());
        }
        match op {
            Op::SoftmaxCrossEntropy { .. } | Op::AbsSum { .. } | Op::SqSum { .. } => {
                return Err(XfddError::InvalidArgument(
                    "op not supported in attribution graphs".into(),
                ));
            }
            Op::BatchNorm { train, .. } if *train => {
                return Err(XfddError::InvalidArgument(
                    "attribution requires eval-mode batch normalization".into(),
                ));
            }
            _ => {}
        }
        self.backward_op(op, g, Some((reference, rop)));
        Ok(())
    }

    fn local_slopes(&self, op: &Op<F>, a: VarId, out: VarId) -> Vec<F> {
        let x = &self.bufs[a].data;
        let y = &self.bufs[out].data;
        match op {
            Op::Sigmoid { .. } => y.iter().map(|&v| v * (F::one() - v)).collect(),
            Op::Tanh { .. } => y.iter().map(|&v| F::one() - v * v).collect(),
            Op::Relu { .. } => {
                let zero = F::zero();
                // Subgradient 0 at exactly zero.
                x.iter().map(|&v| if v > zero { F::one() } else { zero }).collect()
            }
            _ => unreachable!("local_slopes on non-unary op"),
        }
    }

    fn secant_slopes(&self, op: &Op<F>, reference: &Tape<F>, a: VarId, out: VarId) -> Vec<F> {
        let thresh = F::from_f64(1e-7);
        let x = &self.bufs[a].data;
        let y = &self.bufs[out].data;
        let xr = &reference.bufs[a].data;
        let yr = &reference.bufs[out].data;
        let local = self.local_slopes(op, a, out);
        (0..x.len())
            .map(|i| {
                let dx = x[i] - xr[i];
                if dx.abs() > thresh {
                    (y[i] - yr[i]) / dx
                } else {
                    local[i]
                }
            })
            .collect()
    }
}

fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn broadcast_mul<F: Scalar>(d: &[F], other: &[F]) -> Vec<F> {
    if other.len() == 1 {
        let o = other[0];
        d.iter().map(|&v| v * o).collect()
    } else if d.len() == 1 {
        let dv = d[0];
        other.iter().map(|&o| dv * o).collect()
    } else {
        d.iter().zip(other).map(|(&v, &o)| v * o).collect()
    }
}

// ---- kernels ----
// Each output element is produced by exactly one task with a fixed-order
// inner reduction, so parallel and serial execution are bit-identical.

fn mm<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    let row = |(i, orow): (usize, &mut [F])| {
        for p in 0..k {
            let av = a[i * k + p];
            if av != F::zero() {
                let brow = &b[p * n..(p + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
    };
    if m * k * n >= PAR_WORK {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// C[m,n] = A[m,k] · B[n,k]^T
fn mm_transb<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    let row = |(i, orow): (usize, &mut [F])| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = F::zero();
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            *o = acc;
        }
    };
    if m * k * n >= PAR_WORK {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// C[k,n] = A[m,k]^T · B[m,n]
fn mm_transa<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); k * n];
    let row = |(p, orow): (usize, &mut [F])| {
        for i in 0..m {
            let av = a[i * k + p];
            if av != F::zero() {
                let brow = &b[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
    };
    if m * k * n >= PAR_WORK {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv1d_fwd<F: Scalar>(
    x: &[F],
    w: &[F],
    b: &[F],
    n: usize,
    cin: usize,
    l: usize,
    cout: usize,
    ksize: usize,
    stride: usize,
    pad: usize,
    lout: usize,
) -> Vec<F> {
    let mut out = vec![F::zero(); n * cout * lout];
    let cell = |(idx, orow): (usize, &mut [F])| {
        let nn = idx / cout;
        let co = idx % cout;
        for (lo, o) in orow.iter_mut().enumerate() {
            let start = lo * stride;
            let mut acc = b[co];
            for ci in 0..cin {
                let xrow = &x[(nn * cin + ci) * l..(nn * cin + ci + 1) * l];
                let wrow = &w[(co * cin + ci) * ksize..(co * cin + ci + 1) * ksize];
                for (j, &wv) in wrow.iter().enumerate() {
                    let pos = start + j;
                    if pos >= pad && pos - pad < l {
                        acc += wv * xrow[pos - pad];
                    }
                }
            }
            *o = acc;
        }
    };
    if n * cout * lout * cin * ksize >= PAR_WORK {
        out.par_chunks_mut(lout).enumerate().for_each(cell);
    } else {
        out.chunks_mut(lout).enumerate().for_each(cell);
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv1d_bwd_x<F: Scalar>(
    d: &[F],
    w: &[F],
    n: usize,
    cin: usize,
    l: usize,
    cout: usize,
    ksize: usize,
    stride: usize,
    pad: usize,
    lout: usize,
) -> Vec<F> {
    let mut dx = vec![F::zero(); n * cin * l];
    let cell = |(idx, xrow): (usize, &mut [F])| {
        let nn = idx / cin;
        let ci = idx % cin;
        for co in 0..cout {
            let drow = &d[(nn * cout + co) * lout..(nn * cout + co + 1) * lout];
            let wrow = &w[(co * cin + ci) * ksize..(co * cin + ci + 1) * ksize];
            for (lo, &dv) in drow.iter().enumerate() {
                if dv == F::zero() {
                    continue;
                }
                let start = lo * stride;
                for (j, &wv) in wrow.iter().enumerate() {
                    let pos = start + j;
                    if pos >= pad && pos - pad < l {
                        xrow[pos - pad] += dv * wv;
                    }
                }
            }
        }
    };
    if n * cin * l * cout >= PAR_WORK {
        dx.par_chunks_mut(l).enumerate().for_each(cell);
    } else {
        dx.chunks_mut(l).enumerate().for_each(cell);
    }
    dx
}

#[allow(clippy::too_many_arguments)]
fn conv1d_bwd_w<F: Scalar>(
    d: &[F],
    x: &[F],
    n: usize,
    cin: usize,
    l: usize,
    cout: usize,
    ksize: usize,
    stride: usize,
    pad: usize,
    lout: usize,
) -> Vec<F> {
    let mut dw = vec![F::zero(); cout * cin * ksize];
    let block = |(co, wblock): (usize, &mut [F])| {
        for nn in 0..n {
            let drow = &d[(nn * cout + co) * lout..(nn * cout + co + 1) * lout];
            for ci in 0..cin {
                let xrow = &x[(nn * cin + ci) * l..(nn * cin + ci + 1) * l];
                let wrow = &mut wblock[ci * ksize..(ci + 1) * ksize];
                for (lo, &dv) in drow.iter().enumerate() {
                    if dv == F::zero() {
                        continue;
                    }
                    let start = lo * stride;
                    for (j, wv) in wrow.iter_mut().enumerate() {
                        let pos = start + j;
                        if pos >= pad && pos - pad < l {
                            *wv += dv * xrow[pos - pad];
                        }
                    }
                }
            }
        }
    };
    if n * cout * lout * cin * ksize >= PAR_WORK {
        dw.par_chunks_mut(cin * ksize).enumerate().for_each(block);
    } else {
        dw.chunks_mut(cin * ksize).enumerate().for_each(block);
    }
    dw
}

fn maxpool_fwd<F: Scalar>(
    x: &[F],
    n: usize,
    c: usize,
    l: usize,
    k: usize,
    stride: usize,
    lout: usize,
) -> (Vec<F>, Vec<u32>) {
    let rows = n * c;
    let mut out = vec![F::zero(); rows * lout];
    let mut argmax = vec![0u32; rows * lout];
    // Ties take the first (lowest-index) maximum: strictly-greater updates.
    for r in 0..rows {
        let xrow = &x[r * l..(r + 1) * l];
        for lo in 0..lout {
            let start = lo * stride;
            let mut best = xrow[start];
            let mut best_i = start;
            for j in 1..k {
                let v = xrow[start + j];
                if v > best {
                    best = v;
                    best_i = start + j;
                }
            }
            out[r * lout + lo] = best;
            argmax[r * lout + lo] = best_i as u32;
        }
    }
    (out, argmax)
}

fn bn_stats<F: Scalar>(x: &[F], n: usize, c: usize, l: usize) -> (Vec<F>, Vec<F>) {
    let m = F::from_f64((n * l) as f64);
    let mut mean = vec![F::zero(); c];
    let mut var = vec![F::zero(); c];
    for cc in 0..c {
        let mut s = F::zero();
        for nn in 0..n {
            let base = (nn * c + cc) * l;
            for ll in 0..l {
                s += x[base + ll];
            }
        }
        let mu = s / m;
        let mut v = F::zero();
        for nn in 0..n {
            let base = (nn * c + cc) * l;
            for ll in 0..l {
                let dlt = x[base + ll] - mu;
                v += dlt * dlt;
            }
        }
        mean[cc] = mu;
        // Population variance (divide by the full count).
        var[cc] = v / m;
    }
    (mean, var)
}

#[allow(clippy::too_many_arguments)]
fn bn_apply<F: Scalar>(
    x: &[F],
    gamma: &[F],
    beta: &[F],
    mean: &[F],
    invstd: &[F],
    n: usize,
    c: usize,
    l: usize,
) -> Vec<F> {
    let mut out = vec![F::zero(); n * c * l];
    for nn in 0..n {
        for cc in 0..c {
            let base = (nn * c + cc) * l;
            let (mu, is, ga, be) = (mean[cc], invstd[cc], gamma[cc], beta[cc]);
            for ll in 0..l {
                out[base + ll] = (x[base + ll] - mu) * is * ga + be;
            }
        }
    }
    out
}

// ---- gradient checking ----

#[derive(Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub coords: usize,
}

/// Compare reverse-mode gradients of a scalar-valued graph against central
/// finite differences, perturbing every coordinate of `x`. The builder must be
/// deterministic. Relative error is |a - n| / max(1e-8, |a| + |n|); a NaN on
/// either side is reported as a failure naming the coordinate.
pub fn grad_check<F: Scalar>(
    build: &dyn Fn(&mut Tape<F>, VarId) -> Result<VarId>,
    x: &Tensor<F>,
    eps: f64,
) -> Result<GradCheckReport> {
    let coords: Vec<usize> = (0..x.numel()).collect();
    grad_check_at(build, x, eps, &coords)
}

/// grad_check restricted to the given coordinates of `x`. Large graphs make
/// the exhaustive sweep quadratic in practice (two forward passes per
/// coordinate); spot-checking a sample keeps the oracle affordable.
pub fn grad_check_at<F: Scalar>(
    build: &dyn Fn(&mut Tape<F>, VarId) -> Result<VarId>,
    x: &Tensor<F>,
    eps: f64,
    coords: &[usize],
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x, true);
    let out = build(&mut tape, xv)?;
    if tape.numel(out) != 1 {
        return invalid("grad_check needs a scalar-valued builder");
    }
    let grads = tape.backward(out)?;
    let analytic = grads.tensor(xv);

    let eval = |probe: &Tensor<F>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(probe, false);
        let o = build(&mut t, v)?;
        Ok(t.data(o)[0].to_f64())
    };

    let mut max_rel_err = 0.0f64;
    let mut worst_coord = 0usize;
    for &i in coords {
        let base = x.data()[i].to_f64();
        let mut xp = x.clone();
        xp.data_mut()[i] = F::from_f64(base + eps);
        let fp = eval(&xp)?;
        let mut xm = x.clone();
        xm.data_mut()[i] = F::from_f64(base - eps);
        let fm = eval(&xm)?;
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic.data()[i].to_f64();
        if !a.is_finite() || !numeric.is_finite() {
            return Err(XfddError::Numeric(format!(
                "grad_check produced a non-finite value at coordinate {i}"
            )));
        }
        let rel = (a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs());
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_coord = i;
        }
    }
    Ok(GradCheckReport { max_rel_err, worst_coord, coords: coords.len() })
}
