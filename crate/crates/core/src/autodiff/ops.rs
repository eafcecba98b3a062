//! Forward definitions and reverse rules for every tape operation.

use super::{AdError, Tape, Tensor, Var};

const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Exp(Var),
    ClampMax(Var, f64),
    LogClamped(Var),
    Gelu(Var),
    Sum(Var),
    Matmul(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    L2NormalizeRows(Var),
    LayerNormRows { x: Var, gain: Var, bias: Var, eps: f64 },
    GatherRows { x: Var, rows: Vec<usize> },
    ConcatRows(Vec<Var>),
    AddRowBroadcast { x: Var, row: Var },
    MulScalar { x: Var, s: Var },
    SoftmaxXentRows { logits: Var, targets: Var },
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    // i-k-j loop order keeps the inner walk contiguous in both b and out.
    for i in 0..m {
        let row_out = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let row_b = &b[p * n..(p + 1) * n];
            for j in 0..n {
                row_out[j] += av * row_b[j];
            }
        }
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

impl Tape {
    fn binary_shape_check(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
    ) -> Result<(), AdError> {
        if self.shape(a) != self.shape(b) {
            return Err(AdError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.binary_shape_check("add", a, b)?;
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(Tensor::new(shape, data, false), Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.binary_shape_check("sub", a, b)?;
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(Tensor::new(shape, data, false), Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.binary_shape_check("mul", a, b)?;
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(Tensor::new(shape, data, false), Op::Mul(a, b), needs))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, AdError> {
        let data: Vec<f64> = self.data(a).iter().map(|x| -x).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs_grad(a);
        Ok(self.push(Tensor::new(shape, data, false), Op::Neg(a), needs))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, AdError> {
        let data: Vec<f64> = self.data(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs_grad(a);
        Ok(self.push(Tensor::new(shape, data, false), Op::Scale(a, c), needs))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, AdError> {
        let data: Vec<f64> = self.data(a).iter().map(|x| x.exp()).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs_grad(a);
        Ok(self.push(Tensor::new(shape, data, false), Op::Exp(a), needs))
    }

    /// min(x, cap) elementwise. Gradient passes only where x < cap.
    pub fn clamp_max(&mut self, a: Var, cap: f64) -> Result<Var, AdError> {
        let data: Vec<f64> = self.data(a).iter().map(|x| x.min(cap)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs_grad(a);
        Ok(self.push(Tensor::new(shape, data, false), Op::ClampMax(a, cap), needs))
    }

    /// ln(max(x, 1e-12)): never produces -inf on a saturated softmax.
    pub fn log_clamped(&mut self, a: Var) -> Result<Var, AdError> {
        let data: Vec<f64> = self.data(a).iter().map(|x| x.max(LOG_EPS).ln()).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs_grad(a);
        Ok(self.push(Tensor::new(shape, data, false), Op::LogClamped(a), needs))
    }

    /// Smooth (tanh-form) GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var, AdError> {
        let data: Vec<f64> = self.data(a).iter().map(|&x| gelu_value(x)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs_grad(a);
        Ok(self.push(Tensor::new(shape, data, false), Op::Gelu(a), needs))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, AdError> {
        let total: f64 = self.data(a).iter().sum();
        let needs = self.needs_grad(a);
        Ok(self.push(Tensor::new(vec![1], vec![total], false), Op::Sum(a), needs))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, AdError> {
        let n = self.tensor(a).len();
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let prod = self.mul(a, b)?;
        self.sum(prod)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let (m, k) = (self.tensor(a).rows(), self.tensor(a).cols());
        let (k2, n) = (self.tensor(b).rows(), self.tensor(b).cols());
        if k != k2 {
            return Err(AdError::ShapeMismatch {
                op: "matmul",
                detail: format!("inner dims {k} vs {k2} ({:?}x{:?})", self.shape(a), self.shape(b)),
            });
        }
        let mut data = vec![0.0; m * n];
        matmul_raw(self.data(a), self.data(b), m, k, n, &mut data);
        let needs = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(Tensor::new(vec![m, n], data, false), Op::Matmul(a, b), needs))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, AdError> {
        let (m, n) = (self.tensor(a).rows(), self.tensor(a).cols());
        let src = self.data(a);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let needs = self.needs_grad(a);
        Ok(self.push(Tensor::new(vec![n, m], data, false), Op::Transpose(a), needs))
    }

    /// Softmax along the last axis. Max-subtraction keeps huge logits from
    /// overflowing. Errors on non-finite input.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, AdError> {
        if self.data(a).iter().any(|x| !x.is_finite()) {
            return Err(AdError::Numeric {
                op: "softmax",
                detail: "non-finite input".into(),
            });
        }
        let (m, n) = (self.tensor(a).rows(), self.tensor(a).cols());
        let src = self.data(a);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            softmax_row(&src[i * n..(i + 1) * n], &mut data[i * n..(i + 1) * n]);
        }
        let shape = self.shape(a).to_vec();
        let needs = self.needs_grad(a);
        Ok(self.push(Tensor::new(shape, data, false), Op::SoftmaxRows(a), needs))
    }

    /// Scales each row to unit Euclidean norm. Errors when a row norm is
    /// numerically zero.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var, AdError> {
        let (m, n) = (self.tensor(a).rows(), self.tensor(a).cols());
        let src = self.data(a);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm <= LOG_EPS {
                return Err(AdError::Numeric {
                    op: "l2_normalize",
                    detail: format!("row {i} has near-zero norm {norm:e}"),
                });
            }
            for j in 0..n {
                data[i * n + j] = row[j] / norm;
            }
        }
        let shape = self.shape(a).to_vec();
        let needs = self.needs_grad(a);
        Ok(self.push(Tensor::new(shape, data, false), Op::L2NormalizeRows(a), needs))
    }

    /// Row-wise layer norm with learnable gain and bias.
    pub fn layer_norm_rows(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    ) -> Result<Var, AdError> {
        let (m, n) = (self.tensor(x).rows(), self.tensor(x).cols());
        if self.tensor(gain).len() != n || self.tensor(bias).len() != n {
            return Err(AdError::ShapeMismatch {
                op: "layer_norm",
                detail: format!(
                    "gain {:?} / bias {:?} against row width {n}",
                    self.shape(gain),
                    self.shape(bias)
                ),
            });
        }
        let src = self.data(x);
        let g = self.data(gain);
        let b = self.data(bias);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                data[i * n + j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let needs = self.needs_grad(x) || self.needs_grad(gain) || self.needs_grad(bias);
        Ok(self.push(
            Tensor::new(shape, data, false),
            Op::LayerNormRows { x, gain, bias, eps },
            needs,
        ))
    }

    /// Copies the given rows of a 2-D tensor into a new matrix, in the
    /// order listed. Rows may repeat.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, AdError> {
        let (m, n) = (self.tensor(x).rows(), self.tensor(x).cols());
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(AdError::ShapeMismatch {
                op: "gather_rows",
                detail: format!("row {bad} out of range for {m} rows"),
            });
        }
        let src = self.data(x);
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            data.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        let needs = self.needs_grad(x);
        Ok(self.push(
            Tensor::new(vec![rows.len(), n], data, false),
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            needs,
        ))
    }

    pub fn take_row(&mut self, x: Var, row: usize) -> Result<Var, AdError> {
        self.gather_rows(x, &[row])
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, AdError> {
        if parts.is_empty() {
            return Err(AdError::ShapeMismatch {
                op: "concat_rows",
                detail: "no inputs".into(),
            });
        }
        let n = self.tensor(parts[0]).cols();
        let mut rows = 0;
        for &p in parts {
            if self.tensor(p).cols() != n {
                return Err(AdError::ShapeMismatch {
                    op: "concat_rows",
                    detail: format!("column counts differ: {n} vs {}", self.tensor(p).cols()),
                });
            }
            rows += self.tensor(p).rows();
        }
        let mut data = Vec::with_capacity(rows * n);
        for &p in parts {
            data.extend_from_slice(self.data(p));
        }
        let needs = parts.iter().any(|&p| self.needs_grad(p));
        Ok(self.push(
            Tensor::new(vec![rows, n], data, false),
            Op::ConcatRows(parts.to_vec()),
            needs,
        ))
    }

    /// Adds a length-n row vector to every row of an [m, n] matrix.
    pub fn add_row_broadcast(&mut self, x: Var, row: Var) -> Result<Var, AdError> {
        let (m, n) = (self.tensor(x).rows(), self.tensor(x).cols());
        if self.tensor(row).len() != n {
            return Err(AdError::ShapeMismatch {
                op: "add_row_broadcast",
                detail: format!("row len {} vs width {n}", self.tensor(row).len()),
            });
        }
        let src = self.data(x);
        let r = self.data(row);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] = src[i * n + j] + r[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let needs = self.needs_grad(x) || self.needs_grad(row);
        Ok(self.push(
            Tensor::new(shape, data, false),
            Op::AddRowBroadcast { x, row },
            needs,
        ))
    }

    /// Multiplies every element by a scalar variable.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var, AdError> {
        if self.tensor(s).len() != 1 {
            return Err(AdError::ShapeMismatch {
                op: "mul_scalar",
                detail: format!("scalar operand has shape {:?}", self.shape(s)),
            });
        }
        let sv = self.data(s)[0];
        let data: Vec<f64> = self.data(x).iter().map(|v| v * sv).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs_grad(x) || self.needs_grad(s);
        Ok(self.push(
            Tensor::new(shape, data, false),
            Op::MulScalar { x, s },
            needs,
        ))
    }

    /// Per-row cross-entropy between soft targets and softmax(logits),
    /// fused for stability: H_i = lse(x_i) - sum_k y_ik x_ik.
    ///
    /// Each target row must sum to 1 within 1e-6.
    pub fn softmax_xent_rows(&mut self, logits: Var, targets: Var) -> Result<Var, AdError> {
        self.binary_shape_check("softmax_xent", logits, targets)?;
        if self.data(logits).iter().any(|x| !x.is_finite()) {
            return Err(AdError::Numeric {
                op: "softmax_xent",
                detail: "non-finite logits".into(),
            });
        }
        let (m, n) = (self.tensor(logits).rows(), self.tensor(logits).cols());
        let x = self.data(logits);
        let y = self.data(targets);
        let mut data = vec![0.0; m];
        for i in 0..m {
            let row_x = &x[i * n..(i + 1) * n];
            let row_y = &y[i * n..(i + 1) * n];
            let ysum: f64 = row_y.iter().sum();
            if (ysum - 1.0).abs() > 1e-6 {
                return Err(AdError::Contract {
                    op: "softmax_xent",
                    detail: format!("target row {i} sums to {ysum}, expected 1"),
                });
            }
            let lse = log_sum_exp(row_x);
            let weighted: f64 = row_x.iter().zip(row_y).map(|(xv, yv)| xv * yv).sum();
            data[i] = lse - weighted;
        }
        let needs = self.needs_grad(logits) || self.needs_grad(targets);
        Ok(self.push(
            Tensor::new(vec![m], data, false),
            Op::SoftmaxXentRows { logits, targets },
            needs,
        ))
    }

    /// H(y, p) = -sum_k y_k ln(max(p_k, eps)) for explicit probabilities.
    /// Prefer [`Tape::softmax_xent_rows`] when the probabilities come from
    /// a softmax on the same tape.
    pub fn cross_entropy_soft(&mut self, targets: Var, probs: Var) -> Result<Var, AdError> {
        self.binary_shape_check("cross_entropy_soft", targets, probs)?;
        let ysum: f64 = self.data(targets).iter().sum();
        let rows = self.tensor(targets).rows() as f64;
        if (ysum - rows).abs() > 1e-6 * rows {
            return Err(AdError::Contract {
                op: "cross_entropy_soft",
                detail: format!("target rows sum to {ysum}, expected {rows}"),
            });
        }
        let logs = self.log_clamped(probs)?;
        let weighted = self.mul(targets, logs)?;
        let total = self.sum(weighted)?;
        self.neg(total)
    }
}

pub(crate) fn gelu_value(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * c * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Adds `contrib` into the gradient buffer of `v`, if it participates.
fn add_grad(tape: &mut Tape, v: Var, contrib: &[f64]) {
    let node = &mut tape.nodes[v.0];
    if let Some(g) = node.tensor.grad.as_mut() {
        for (gi, ci) in g.iter_mut().zip(contrib) {
            *gi += ci;
        }
    }
}

fn grad_of(tape: &Tape, id: usize) -> Option<Vec<f64>> {
    tape.nodes[id].tensor.grad.clone()
}

/// Applies the reverse rule of node `id`, accumulating into its inputs.
pub(crate) fn backward_step(tape: &mut Tape, id: usize) -> Result<(), AdError> {
    let op = tape.nodes[id].op.clone();
    let g = match grad_of(tape, id) {
        Some(g) => g,
        None => return Ok(()),
    };
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            add_grad(tape, a, &g);
            add_grad(tape, b, &g);
        }
        Op::Sub(a, b) => {
            add_grad(tape, a, &g);
            let neg: Vec<f64> = g.iter().map(|x| -x).collect();
            add_grad(tape, b, &neg);
        }
        Op::Mul(a, b) => {
            let ga: Vec<f64> = g.iter().zip(tape.data(b)).map(|(gi, bv)| gi * bv).collect();
            let gb: Vec<f64> = g.iter().zip(tape.data(a)).map(|(gi, av)| gi * av).collect();
            add_grad(tape, a, &ga);
            add_grad(tape, b, &gb);
        }
        Op::Neg(a) => {
            let ga: Vec<f64> = g.iter().map(|x| -x).collect();
            add_grad(tape, a, &ga);
        }
        Op::Scale(a, c) => {
            let ga: Vec<f64> = g.iter().map(|x| x * c).collect();
            add_grad(tape, a, &ga);
        }
        Op::Exp(a) => {
            let y = tape.data(Var(id));
            let ga: Vec<f64> = g.iter().zip(y).map(|(gi, yv)| gi * yv).collect();
            add_grad(tape, a, &ga);
        }
        Op::ClampMax(a, cap) => {
            let x = tape.data(a);
            let ga: Vec<f64> = g
                .iter()
                .zip(x)
                .map(|(gi, &xv)| if xv < cap { *gi } else { 0.0 })
                .collect();
            add_grad(tape, a, &ga);
        }
        Op::LogClamped(a) => {
            let x = tape.data(a);
            let ga: Vec<f64> = g
                .iter()
                .zip(x)
                .map(|(gi, &xv)| if xv > LOG_EPS { gi / xv } else { 0.0 })
                .collect();
            add_grad(tape, a, &ga);
        }
        Op::Gelu(a) => {
            let x = tape.data(a);
            let ga: Vec<f64> = g
                .iter()
                .zip(x)
                .map(|(gi, &xv)| gi * gelu_derivative(xv))
                .collect();
            add_grad(tape, a, &ga);
        }
        Op::Sum(a) => {
            let ga = vec![g[0]; tape.tensor(a).len()];
            add_grad(tape, a, &ga);
        }
        Op::Matmul(a, b) => {
            let (m, k) = (tape.tensor(a).rows(), tape.tensor(a).cols());
            let n = tape.tensor(b).cols();
            // dA = dC . B^T
            let b_data = tape.data(b);
            let mut ga = vec![0.0; m * k];
            for i in 0..m {
                for p in 0..k {
                    let mut s = 0.0;
                    for j in 0..n {
                        s += g[i * n + j] * b_data[p * n + j];
                    }
                    ga[i * k + p] = s;
                }
            }
            // dB = A^T . dC
            let a_data = tape.data(a);
            let mut gb = vec![0.0; k * n];
            for i in 0..m {
                for p in 0..k {
                    let av = a_data[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        gb[p * n + j] += av * g[i * n + j];
                    }
                }
            }
            add_grad(tape, a, &ga);
            add_grad(tape, b, &gb);
        }
        Op::Transpose(a) => {
            let (m, n) = (tape.tensor(a).rows(), tape.tensor(a).cols());
            let mut ga = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    ga[i * n + j] = g[j * m + i];
                }
            }
            add_grad(tape, a, &ga);
        }
        Op::SoftmaxRows(a) => {
            let (m, n) = (tape.tensor(a).rows(), tape.tensor(a).cols());
            let p = tape.data(Var(id));
            let mut ga = vec![0.0; m * n];
            for i in 0..m {
                let pr = &p[i * n..(i + 1) * n];
                let gr = &g[i * n..(i + 1) * n];
                let inner: f64 = pr.iter().zip(gr).map(|(pv, gv)| pv * gv).sum();
                for j in 0..n {
                    ga[i * n + j] = pr[j] * (gr[j] - inner);
                }
            }
            add_grad(tape, a, &ga);
        }
        Op::L2NormalizeRows(a) => {
            let (m, n) = (tape.tensor(a).rows(), tape.tensor(a).cols());
            let x = tape.data(a);
            let y = tape.data(Var(id));
            let mut ga = vec![0.0; m * n];
            for i in 0..m {
                let xr = &x[i * n..(i + 1) * n];
                let yr = &y[i * n..(i + 1) * n];
                let gr = &g[i * n..(i + 1) * n];
                let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                let inner: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                for j in 0..n {
                    ga[i * n + j] = (gr[j] - yr[j] * inner) / norm;
                }
            }
            add_grad(tape, a, &ga);
        }
        Op::LayerNormRows { x, gain, bias, eps } => {
            let (m, n) = (tape.tensor(x).rows(), tape.tensor(x).cols());
            let xd = tape.data(x);
            let gd = tape.data(gain);
            let mut gx = vec![0.0; m * n];
            let mut ggain = vec![0.0; n];
            let mut gbias = vec![0.0; n];
            for i in 0..m {
                let row = &xd[i * n..(i + 1) * n];
                let gr = &g[i * n..(i + 1) * n];
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let inv_std = 1.0 / (var + eps).sqrt();
                let xh: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
                let gg: Vec<f64> = gr.iter().zip(gd).map(|(gv, gn)| gv * gn).collect();
                let mean_gg = gg.iter().sum::<f64>() / n as f64;
                let mean_gg_xh =
                    gg.iter().zip(&xh).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                for j in 0..n {
                    gx[i * n + j] = (gg[j] - mean_gg - xh[j] * mean_gg_xh) * inv_std;
                    ggain[j] += gr[j] * xh[j];
                    gbias[j] += gr[j];
                }
            }
            add_grad(tape, x, &gx);
            add_grad(tape, gain, &ggain);
            add_grad(tape, bias, &gbias);
        }
        Op::GatherRows { x, rows } => {
            let n = tape.tensor(x).cols();
            let mut gx = vec![0.0; tape.tensor(x).len()];
            for (out_i, &r) in rows.iter().enumerate() {
                for j in 0..n {
                    gx[r * n + j] += g[out_i * n + j];
                }
            }
            add_grad(tape, x, &gx);
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in &parts {
                let len = tape.tensor(p).len();
                let slice = g[offset..offset + len].to_vec();
                add_grad(tape, p, &slice);
                offset += len;
            }
        }
        Op::AddRowBroadcast { x, row } => {
            let (m, n) = (tape.tensor(x).rows(), tape.tensor(x).cols());
            add_grad(tape, x, &g);
            let mut grow = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    grow[j] += g[i * n + j];
                }
            }
            add_grad(tape, row, &grow);
        }
        Op::MulScalar { x, s } => {
            let sv = tape.data(s)[0];
            let gx: Vec<f64> = g.iter().map(|gi| gi * sv).collect();
            let gs: f64 = g.iter().zip(tape.data(x)).map(|(gi, xv)| gi * xv).sum();
            add_grad(tape, x, &gx);
            add_grad(tape, s, &[gs]);
        }
        Op::SoftmaxXentRows { logits, targets } => {
            let (m, n) = (tape.tensor(logits).rows(), tape.tensor(logits).cols());
            let x = tape.data(logits);
            let y = tape.data(targets);
            let mut gx = vec![0.0; m * n];
            let mut gy = vec![0.0; m * n];
            for i in 0..m {
                let row_x = &x[i * n..(i + 1) * n];
                let row_y = &y[i * n..(i + 1) * n];
                let gi = g[i];
                let mut p = vec![0.0; n];
                softmax_row(row_x, &mut p);
                let lse = log_sum_exp(row_x);
                for j in 0..n {
                    gx[i * n + j] = gi * (p[j] - row_y[j]);
                    gy[i * n + j] = gi * (lse - row_x[j]);
                }
            }
            add_grad(tape, logits, &gx);
            add_grad(tape, targets, &gy);
        }
    }
    Ok(())
}
