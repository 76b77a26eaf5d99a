use super::tensor::Tensor;
use super::AutodiffError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Variance floor below which a row is treated as zero in norm-based ops.
const NORM_GUARD: f64 = 1e-12;

/// Stabilizer added to the per-row variance inside layer normalization.
const LAYER_NORM_EPS: f64 = 1e-5;

/// One recorded primitive application. Holds the operand references and
/// whatever forward context the backward rule needs.
#[derive(Debug, Clone)]
enum Record {
    Leaf,
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    ScalarMul { a: Var, factor: f64 },
    MatMul { a: Var, b: Var },
    Relu { a: Var },
    Exp { a: Var },
    Log { a: Var },
    SumAxis { a: Var, axis: usize },
    SumAll { a: Var },
    Broadcast { a: Var },
    Concat { parts: Vec<Var>, axis: usize },
    RowsL2Norm { a: Var },
    UnitRows { a: Var },
    SegmentSum { a: Var, segments: Vec<usize> },
    /// Softmax-weighted sum per segment; `weights` are the per-edge softmax
    /// coefficients saved from the forward pass.
    SegmentSoftmax { a: Var, segments: Vec<usize>, beta: f64, weights: Tensor },
    GatherRows { a: Var, indices: Vec<usize> },
    LayerNorm { a: Var },
    SoftmaxRows { a: Var },
    CrossEntropy { logits: Var, labels: Vec<usize> },
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct GradientMap {
    grads: Vec<Option<Tensor>>,
}

impl GradientMap {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

/// Wengert tape: records primitive applications in topological order during
/// the forward pass, then replays them in reverse to accumulate adjoints.
///
/// A tape is single-threaded and owns every intermediate value. Distinct
/// tapes are independent and may run on distinct threads.
#[derive(Debug, Default)]
pub struct Tape {
    records: Vec<Record>,
    values: Vec<Tensor>,
    recording: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            records: Vec::new(),
            values: Vec::new(),
            recording: true,
        }
    }

    /// When recording is off, results are stored as constants: forward values
    /// are identical but no gradients flow through them.
    pub fn set_recording(&mut self, on: bool) {
        self.recording = on;
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.values[var.0]
    }

    /// The value of a scalar variable.
    pub fn scalar_value(&self, var: Var) -> Result<f64, AutodiffError> {
        let t = self.value(var);
        if !t.is_scalar() {
            return Err(AutodiffError::LossNotScalar {
                shape: t.shape().to_vec(),
            });
        }
        Ok(t.item())
    }

    /// Registers an input tensor. Leaves are the only variables that receive
    /// gradients from [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Result<Var, AutodiffError> {
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite { op: "leaf" });
        }
        Ok(self.push(Record::Leaf, value))
    }

    fn push(&mut self, record: Record, value: Tensor) -> Var {
        let id = self.records.len();
        if self.recording {
            self.records.push(record);
        } else {
            self.records.push(Record::Leaf);
        }
        self.values.push(value);
        Var(id)
    }

    fn push_checked(&mut self, op: &'static str, record: Record, value: Tensor) -> Result<Var, AutodiffError> {
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite { op });
        }
        Ok(self.push(record, value))
    }

    fn check_var(&self, op: &'static str, var: Var) -> Result<(), AutodiffError> {
        if var.0 >= self.values.len() {
            return Err(AutodiffError::IndexOutOfBounds {
                op,
                index: var.0,
                bound: self.values.len(),
            });
        }
        Ok(())
    }

    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), AutodiffError> {
        self.check_var(op, a)?;
        self.check_var(op, b)?;
        if self.value(a).shape() != self.value(b).shape() {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        Ok(())
    }

    // ── Elementwise ──────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary_same_shape("add", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push_checked("add", Record::Add { a, b }, value)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary_same_shape("sub", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push_checked("sub", Record::Sub { a, b }, value)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary_same_shape("mul", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push_checked("mul", Record::Mul { a, b }, value)
    }

    pub fn scalar_mul(&mut self, a: Var, factor: f64) -> Result<Var, AutodiffError> {
        self.check_var("scalar_mul", a)?;
        let data = self.value(a).data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push_checked("scalar_mul", Record::ScalarMul { a, factor }, value)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.check_var("relu", a)?;
        let data = self.value(a).data().iter().map(|x| x.max(0.0)).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push_checked("relu", Record::Relu { a }, value)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.check_var("exp", a)?;
        let data = self.value(a).data().iter().map(|x| x.exp()).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push_checked("exp", Record::Exp { a }, value)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.check_var("log", a)?;
        let data = self.value(a).data().iter().map(|x| x.ln()).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push_checked("log", Record::Log { a }, value)
    }

    // ── Linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.check_var("matmul", a)?;
        self.check_var("matmul", b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = match (ta.rank(), tb.rank()) {
            (2, 2) => ((ta.shape()[0], ta.shape()[1]), (tb.shape()[0], tb.shape()[1])),
            _ => {
                return Err(AutodiffError::ShapeMismatch {
                    op: "matmul",
                    lhs: ta.shape().to_vec(),
                    rhs: tb.shape().to_vec(),
                })
            }
        };
        if k != k2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = matmul_nn(ta.data(), tb.data(), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        self.push_checked("matmul", Record::MatMul { a, b }, value)
    }

    // ── Reductions and shape ops ─────────────────────────────────────

    /// Sum over one axis of a matrix, keeping the reduced axis with extent 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, AutodiffError> {
        self.check_var("sum_axis", a)?;
        let t = self.value(a);
        if t.rank() != 2 || axis > 1 {
            return Err(AutodiffError::InvalidShape {
                op: "sum_axis",
                shape: t.shape().to_vec(),
                reason: format!("expected a matrix and axis 0 or 1, got axis {axis}"),
            });
        }
        let (n, d) = (t.shape()[0], t.shape()[1]);
        let value = if axis == 0 {
            let mut out = vec![0.0; d];
            for i in 0..n {
                for j in 0..d {
                    out[j] += t.data()[i * d + j];
                }
            }
            Tensor::new(vec![1, d], out)?
        } else {
            let mut out = vec![0.0; n];
            for i in 0..n {
                out[i] = t.row(i).iter().sum();
            }
            Tensor::new(vec![n, 1], out)?
        };
        self.push_checked("sum_axis", Record::SumAxis { a, axis }, value)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum_all(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.check_var("sum_all", a)?;
        let total: f64 = self.value(a).data().iter().sum();
        self.push_checked("sum_all", Record::SumAll { a }, Tensor::scalar(total))
    }

    /// Explicit broadcast. Supported expansions:
    /// scalar `[1]` to any shape, `[1, d]` to `[n, d]` (repeat rows),
    /// `[n, 1]` to `[n, d]` (repeat columns), and the identity.
    pub fn broadcast(&mut self, a: Var, target: &[usize]) -> Result<Var, AutodiffError> {
        self.check_var("broadcast", a)?;
        let t = self.value(a);
        let shape = t.shape();
        let n_target: usize = target.iter().product();
        let value = if shape == target {
            t.clone()
        } else if t.is_scalar() {
            Tensor::new(target.to_vec(), vec![t.item(); n_target])?
        } else if shape.len() == 2 && target.len() == 2 && shape[0] == 1 && shape[1] == target[1] {
            let mut data = Vec::with_capacity(n_target);
            for _ in 0..target[0] {
                data.extend_from_slice(t.data());
            }
            Tensor::new(target.to_vec(), data)?
        } else if shape.len() == 2 && target.len() == 2 && shape[1] == 1 && shape[0] == target[0] {
            let mut data = Vec::with_capacity(n_target);
            for i in 0..target[0] {
                data.extend(std::iter::repeat(t.data()[i]).take(target[1]));
            }
            Tensor::new(target.to_vec(), data)?
        } else {
            return Err(AutodiffError::ShapeMismatch {
                op: "broadcast",
                lhs: shape.to_vec(),
                rhs: target.to_vec(),
            });
        };
        self.push_checked("broadcast", Record::Broadcast { a }, value)
    }

    /// Concatenates matrices along `axis` (0 = stack rows, 1 = widen rows).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        if parts.is_empty() || axis > 1 {
            return Err(AutodiffError::InvalidShape {
                op: "concat",
                shape: vec![parts.len()],
                reason: format!("need at least one operand and axis 0 or 1, got axis {axis}"),
            });
        }
        for &p in parts {
            self.check_var("concat", p)?;
            if self.value(p).rank() != 2 {
                return Err(AutodiffError::InvalidShape {
                    op: "concat",
                    shape: self.value(p).shape().to_vec(),
                    reason: "operands must be matrices".into(),
                });
            }
        }
        let first = self.value(parts[0]).shape().to_vec();
        let value = if axis == 0 {
            let d = first[1];
            let mut data = Vec::new();
            let mut rows = 0;
            for &p in parts {
                let t = self.value(p);
                if t.shape()[1] != d {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "concat",
                        lhs: first,
                        rhs: t.shape().to_vec(),
                    });
                }
                rows += t.shape()[0];
                data.extend_from_slice(t.data());
            }
            Tensor::new(vec![rows, d], data)?
        } else {
            let n = first[0];
            let mut width = 0;
            for &p in parts {
                let t = self.value(p);
                if t.shape()[0] != n {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "concat",
                        lhs: first,
                        rhs: t.shape().to_vec(),
                    });
                }
                width += t.shape()[1];
            }
            let mut data = Vec::with_capacity(n * width);
            for i in 0..n {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(i));
                }
            }
            Tensor::new(vec![n, width], data)?
        };
        self.push_checked(
            "concat",
            Record::Concat {
                parts: parts.to_vec(),
                axis,
            },
            value,
        )
    }

    // ── Norms ────────────────────────────────────────────────────────

    /// Euclidean norm of each row: `[n, d] -> [n, 1]`.
    pub fn rows_l2_norm(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.check_var("rows_l2_norm", a)?;
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(AutodiffError::InvalidShape {
                op: "rows_l2_norm",
                shape: t.shape().to_vec(),
                reason: "expected a matrix".into(),
            });
        }
        let n = t.shape()[0];
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            out.push(t.row(i).iter().map(|x| x * x).sum::<f64>().sqrt());
        }
        let value = Tensor::new(vec![n, 1], out)?;
        self.push_checked("rows_l2_norm", Record::RowsL2Norm { a }, value)
    }

    /// Rescales each row to unit Euclidean norm. Rows with norm below the
    /// guard threshold map to zero rows (and receive zero gradient), which
    /// keeps norm-scaled message updates total on isolated nodes.
    pub fn unit_rows(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.check_var("unit_rows", a)?;
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(AutodiffError::InvalidShape {
                op: "unit_rows",
                shape: t.shape().to_vec(),
                reason: "expected a matrix".into(),
            });
        }
        let (n, d) = (t.shape()[0], t.shape()[1]);
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            let row = t.row(i);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm >= NORM_GUARD {
                for j in 0..d {
                    data[i * d + j] = row[j] / norm;
                }
            }
        }
        let value = Tensor::new(vec![n, d], data)?;
        self.push_checked("unit_rows", Record::UnitRows { a }, value)
    }

    // ── Segment / gather ops ─────────────────────────────────────────

    fn check_segments(
        &self,
        op: &'static str,
        a: Var,
        segments: &[usize],
        n_segments: usize,
    ) -> Result<(usize, usize), AutodiffError> {
        self.check_var(op, a)?;
        let t = self.value(a);
        if t.rank() != 2 || t.shape()[0] != segments.len() {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: t.shape().to_vec(),
                rhs: vec![segments.len()],
            });
        }
        if let Some(&bad) = segments.iter().find(|&&s| s >= n_segments) {
            return Err(AutodiffError::IndexOutOfBounds {
                op,
                index: bad,
                bound: n_segments,
            });
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    /// Sums rows of `a` into `n_segments` output rows keyed by `segments`.
    /// Segments with no contributing rows are zero.
    pub fn segment_sum(
        &mut self,
        a: Var,
        segments: &[usize],
        n_segments: usize,
    ) -> Result<Var, AutodiffError> {
        let (rows, d) = self.check_segments("segment_sum", a, segments, n_segments)?;
        let t = self.value(a);
        let mut data = vec![0.0; n_segments * d];
        for r in 0..rows {
            let s = segments[r];
            for j in 0..d {
                data[s * d + j] += t.data()[r * d + j];
            }
        }
        let value = Tensor::new(vec![n_segments, d], data)?;
        self.push_checked(
            "segment_sum",
            Record::SegmentSum {
                a,
                segments: segments.to_vec(),
            },
            value,
        )
    }

    /// Per-segment, per-channel softmax-weighted sum:
    /// `out[s, c] = sum_r softmax_r(beta * x[r, c]) * x[r, c]` over rows `r`
    /// with `segments[r] == s`. Stabilized by per-segment max subtraction;
    /// empty segments produce zero rows.
    pub fn segment_softmax_weighted_sum(
        &mut self,
        a: Var,
        segments: &[usize],
        n_segments: usize,
        beta: f64,
    ) -> Result<Var, AutodiffError> {
        let (rows, d) = self.check_segments("segment_softmax_weighted_sum", a, segments, n_segments)?;
        if !beta.is_finite() {
            return Err(AutodiffError::NonFinite {
                op: "segment_softmax_weighted_sum",
            });
        }
        let x = self.value(a).data().to_vec();

        // Per (segment, channel) running max for stabilization.
        let mut seg_max = vec![f64::NEG_INFINITY; n_segments * d];
        for r in 0..rows {
            let s = segments[r];
            for j in 0..d {
                let v = beta * x[r * d + j];
                if v > seg_max[s * d + j] {
                    seg_max[s * d + j] = v;
                }
            }
        }
        let mut weights = vec![0.0; rows * d];
        let mut seg_denom = vec![0.0; n_segments * d];
        for r in 0..rows {
            let s = segments[r];
            for j in 0..d {
                let w = (beta * x[r * d + j] - seg_max[s * d + j]).exp();
                weights[r * d + j] = w;
                seg_denom[s * d + j] += w;
            }
        }
        let mut out = vec![0.0; n_segments * d];
        for r in 0..rows {
            let s = segments[r];
            for j in 0..d {
                let w = weights[r * d + j] / seg_denom[s * d + j];
                weights[r * d + j] = w;
                out[s * d + j] += w * x[r * d + j];
            }
        }
        let value = Tensor::new(vec![n_segments, d], out)?;
        let weights = Tensor::new(vec![rows, d], weights)?;
        self.push_checked(
            "segment_softmax_weighted_sum",
            Record::SegmentSoftmax {
                a,
                segments: segments.to_vec(),
                beta,
                weights,
            },
            value,
        )
    }

    /// Selects rows of a matrix by index (rows may repeat).
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var, AutodiffError> {
        self.check_var("gather_rows", a)?;
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(AutodiffError::InvalidShape {
                op: "gather_rows",
                shape: t.shape().to_vec(),
                reason: "expected a matrix".into(),
            });
        }
        let (n, d) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(AutodiffError::IndexOutOfBounds {
                op: "gather_rows",
                index: bad,
                bound: n,
            });
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor::new(vec![indices.len(), d], data)?;
        self.push_checked(
            "gather_rows",
            Record::GatherRows {
                a,
                indices: indices.to_vec(),
            },
            value,
        )
    }

    // ── Normalization / classification heads ────────────────────────

    /// Row-wise layer normalization (zero mean, unit variance per row).
    /// Affine scale and shift are composed separately by callers.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.check_var("layer_norm", a)?;
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(AutodiffError::InvalidShape {
                op: "layer_norm",
                shape: t.shape().to_vec(),
                reason: "expected a matrix".into(),
            });
        }
        let (n, d) = (t.shape()[0], t.shape()[1]);
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            let row = t.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..d {
                data[i * d + j] = (row[j] - mean) * inv_std;
            }
        }
        let value = Tensor::new(vec![n, d], data)?;
        self.push_checked("layer_norm", Record::LayerNorm { a }, value)
    }

    /// Row-wise softmax with max-subtraction stabilization.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.check_var("softmax_rows", a)?;
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(AutodiffError::InvalidShape {
                op: "softmax_rows",
                shape: t.shape().to_vec(),
                reason: "expected a matrix".into(),
            });
        }
        let (n, d) = (t.shape()[0], t.shape()[1]);
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            let row = t.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..d {
                let e = (row[j] - max).exp();
                data[i * d + j] = e;
                denom += e;
            }
            for j in 0..d {
                data[i * d + j] /= denom;
            }
        }
        let value = Tensor::new(vec![n, d], data)?;
        self.push_checked("softmax_rows", Record::SoftmaxRows { a }, value)
    }

    /// Mean over rows of the softmax cross entropy between `logits` and
    /// integer `labels`, computed from logits for stability.
    pub fn cross_entropy_from_logits(
        &mut self,
        logits: Var,
        labels: &[usize],
    ) -> Result<Var, AutodiffError> {
        self.check_var("cross_entropy_from_logits", logits)?;
        let t = self.value(logits);
        if t.rank() != 2 || t.shape()[0] != labels.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "cross_entropy_from_logits",
                lhs: t.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let (n, k) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(AutodiffError::IndexOutOfBounds {
                op: "cross_entropy_from_logits",
                index: bad,
                bound: k,
            });
        }
        let mut total = 0.0;
        for i in 0..n {
            let row = t.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[labels[i]];
        }
        let value = Tensor::scalar(total / n as f64);
        self.push_checked(
            "cross_entropy_from_logits",
            Record::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            value,
        )
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar `loss`, returning gradients for all leaf
    /// variables (zeros for leaves the loss does not depend on).
    pub fn backward(&self, loss: Var) -> Result<GradientMap, AutodiffError> {
        self.backward_impl(loss, None)
    }

    /// Reverse sweep restricted to the sub-DAG between `leaves` and `loss`.
    /// Errors if the loss does not depend on any of the requested leaves.
    pub fn backward_restricted(
        &self,
        loss: Var,
        leaves: &[Var],
    ) -> Result<GradientMap, AutodiffError> {
        self.backward_impl(loss, Some(leaves))
    }

    fn backward_impl(&self, loss: Var, restrict: Option<&[Var]>) -> Result<GradientMap, AutodiffError> {
        if loss.0 >= self.values.len() {
            return Err(AutodiffError::NotOnTape(loss.0));
        }
        if !self.value(loss).is_scalar() {
            return Err(AutodiffError::LossNotScalar {
                shape: self.value(loss).shape().to_vec(),
            });
        }

        // With a restriction, only records on a path from one of the leaves
        // to the loss participate in the sweep.
        let active = match restrict {
            None => None,
            Some(leaves) => {
                let mut active = vec![false; loss.0 + 1];
                for &l in leaves {
                    if l.0 >= self.values.len() {
                        return Err(AutodiffError::NotOnTape(l.0));
                    }
                    if l.0 <= loss.0 {
                        active[l.0] = true;
                    }
                }
                for i in 0..=loss.0 {
                    if !active[i] {
                        active[i] = self.operands(i).iter().any(|v| active[v.0]);
                    }
                }
                if !active[loss.0] {
                    return Err(AutodiffError::NoGradientPath);
                }
                Some(active)
            }
        };

        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));

        for i in (0..=loss.0).rev() {
            if let Some(active) = &active {
                if !active[i] {
                    continue;
                }
            }
            let upstream = match grads[i].clone() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &upstream, &mut grads)?;
        }

        // Materialize zero gradients for untouched leaves.
        match restrict {
            None => {
                for i in 0..=loss.0 {
                    if matches!(self.records[i], Record::Leaf) && grads[i].is_none() {
                        grads[i] = Some(Tensor::zeros(self.values[i].shape()));
                    }
                }
            }
            Some(leaves) => {
                for &l in leaves {
                    if l.0 <= loss.0 && grads[l.0].is_none() {
                        grads[l.0] = Some(Tensor::zeros(self.values[l.0].shape()));
                    }
                }
            }
        }

        Ok(GradientMap { grads })
    }

    fn operands(&self, i: usize) -> Vec<Var> {
        match &self.records[i] {
            Record::Leaf => vec![],
            Record::Add { a, b } | Record::Sub { a, b } | Record::Mul { a, b } | Record::MatMul { a, b } => {
                vec![*a, *b]
            }
            Record::ScalarMul { a, .. }
            | Record::Relu { a }
            | Record::Exp { a }
            | Record::Log { a }
            | Record::SumAxis { a, .. }
            | Record::SumAll { a }
            | Record::Broadcast { a }
            | Record::RowsL2Norm { a }
            | Record::UnitRows { a }
            | Record::SegmentSum { a, .. }
            | Record::SegmentSoftmax { a, .. }
            | Record::GatherRows { a, .. }
            | Record::LayerNorm { a }
            | Record::SoftmaxRows { a } => vec![*a],
            Record::Concat { parts, .. } => parts.clone(),
            Record::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    fn propagate(
        &self,
        i: usize,
        g: &Tensor,
        grads: &mut Vec<Option<Tensor>>,
    ) -> Result<(), AutodiffError> {
        match &self.records[i] {
            Record::Leaf => {}
            Record::Add { a, b } => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Record::Sub { a, b } => {
                accumulate(grads, *a, g.clone());
                let neg = g.data().iter().map(|x| -x).collect();
                accumulate(grads, *b, Tensor::new(g.shape().to_vec(), neg)?);
            }
            Record::Mul { a, b } => {
                let ga = zip_map(g, self.value(*b), |u, y| u * y);
                let gb = zip_map(g, self.value(*a), |u, x| u * x);
                accumulate(grads, *a, Tensor::new(g.shape().to_vec(), ga)?);
                accumulate(grads, *b, Tensor::new(g.shape().to_vec(), gb)?);
            }
            Record::ScalarMul { a, factor } => {
                let ga = g.data().iter().map(|u| u * factor).collect();
                accumulate(grads, *a, Tensor::new(g.shape().to_vec(), ga)?);
            }
            Record::MatMul { a, b } => {
                let ta = self.value(*a);
                let tb = self.value(*b);
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                let ga = matmul_nt(g.data(), tb.data(), m, n, k);
                let gb = matmul_tn(ta.data(), g.data(), m, k, n);
                accumulate(grads, *a, Tensor::new(vec![m, k], ga)?);
                accumulate(grads, *b, Tensor::new(vec![k, n], gb)?);
            }
            Record::Relu { a } => {
                // Subgradient at the kink is 0.
                let ga = zip_map(g, self.value(*a), |u, x| if x > 0.0 { u } else { 0.0 });
                accumulate(grads, *a, Tensor::new(g.shape().to_vec(), ga)?);
            }
            Record::Exp { a } => {
                let ga = zip_map(g, &self.values[i], |u, y| u * y);
                accumulate(grads, *a, Tensor::new(g.shape().to_vec(), ga)?);
            }
            Record::Log { a } => {
                let ga = zip_map(g, self.value(*a), |u, x| u / x);
                accumulate(grads, *a, Tensor::new(g.shape().to_vec(), ga)?);
            }
            Record::SumAxis { a, axis } => {
                let shape = self.value(*a).shape();
                let (n, d) = (shape[0], shape[1]);
                let mut ga = vec![0.0; n * d];
                if *axis == 0 {
                    for i in 0..n {
                        for j in 0..d {
                            ga[i * d + j] = g.data()[j];
                        }
                    }
                } else {
                    for i in 0..n {
                        for j in 0..d {
                            ga[i * d + j] = g.data()[i];
                        }
                    }
                }
                accumulate(grads, *a, Tensor::new(shape.to_vec(), ga)?);
            }
            Record::SumAll { a } => {
                let shape = self.value(*a).shape();
                let u = g.item();
                accumulate(grads, *a, Tensor::new(shape.to_vec(), vec![u; self.value(*a).numel()])?);
            }
            Record::Broadcast { a } => {
                // Branch order mirrors the forward expansion rules exactly.
                let src = self.value(*a).shape().to_vec();
                let out_shape = g.shape();
                let ga = if src == out_shape {
                    g.clone()
                } else if src == [1] {
                    Tensor::scalar(g.data().iter().sum())
                } else if src[0] == 1 && src[1] == out_shape[1] {
                    let (n, d) = (out_shape[0], out_shape[1]);
                    let mut acc = vec![0.0; d];
                    for i in 0..n {
                        for j in 0..d {
                            acc[j] += g.data()[i * d + j];
                        }
                    }
                    Tensor::new(vec![1, d], acc)?
                } else {
                    let (n, d) = (out_shape[0], out_shape[1]);
                    let mut acc = vec![0.0; n];
                    for i in 0..n {
                        for j in 0..d {
                            acc[i] += g.data()[i * d + j];
                        }
                    }
                    Tensor::new(vec![n, 1], acc)?
                };
                accumulate(grads, *a, ga);
            }
            Record::Concat { parts, axis } => {
                if *axis == 0 {
                    let d = g.shape()[1];
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.value(p).shape()[0];
                        let slice = g.data()[offset * d..(offset + rows) * d].to_vec();
                        accumulate(grads, p, Tensor::new(vec![rows, d], slice)?);
                        offset += rows;
                    }
                } else {
                    let n = g.shape()[0];
                    let width = g.shape()[1];
                    let mut offset = 0;
                    for &p in parts {
                        let d = self.value(p).shape()[1];
                        let mut slice = Vec::with_capacity(n * d);
                        for i in 0..n {
                            slice.extend_from_slice(&g.data()[i * width + offset..i * width + offset + d]);
                        }
                        accumulate(grads, p, Tensor::new(vec![n, d], slice)?);
                        offset += d;
                    }
                }
            }
            Record::RowsL2Norm { a } => {
                let x = self.value(*a);
                let norms = &self.values[i];
                let (n, d) = (x.shape()[0], x.shape()[1]);
                let mut ga = vec![0.0; n * d];
                for r in 0..n {
                    let norm = norms.data()[r];
                    if norm >= NORM_GUARD {
                        let u = g.data()[r];
                        for j in 0..d {
                            ga[r * d + j] = u * x.data()[r * d + j] / norm;
                        }
                    }
                }
                accumulate(grads, *a, Tensor::new(vec![n, d], ga)?);
            }
            Record::UnitRows { a } => {
                let x = self.value(*a);
                let y = &self.values[i];
                let (n, d) = (x.shape()[0], x.shape()[1]);
                let mut ga = vec![0.0; n * d];
                for r in 0..n {
                    let row = x.row(r);
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm >= NORM_GUARD {
                        let yrow = y.row(r);
                        let grow = &g.data()[r * d..(r + 1) * d];
                        let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            ga[r * d + j] = (grow[j] - yrow[j] * dot) / norm;
                        }
                    }
                }
                accumulate(grads, *a, Tensor::new(vec![n, d], ga)?);
            }
            Record::SegmentSum { a, segments } => {
                let d = self.value(*a).shape()[1];
                let mut ga = Vec::with_capacity(segments.len() * d);
                for &s in segments {
                    ga.extend_from_slice(&g.data()[s * d..(s + 1) * d]);
                }
                accumulate(grads, *a, Tensor::new(vec![segments.len(), d], ga)?);
            }
            Record::SegmentSoftmax {
                a,
                segments,
                beta,
                weights,
            } => {
                let x = self.value(*a);
                let out = &self.values[i];
                let d = x.shape()[1];
                let mut ga = vec![0.0; segments.len() * d];
                for (r, &s) in segments.iter().enumerate() {
                    for j in 0..d {
                        let w = weights.data()[r * d + j];
                        let xv = x.data()[r * d + j];
                        let yv = out.data()[s * d + j];
                        ga[r * d + j] = g.data()[s * d + j] * w * (1.0 + beta * (xv - yv));
                    }
                }
                accumulate(grads, *a, Tensor::new(vec![segments.len(), d], ga)?);
            }
            Record::GatherRows { a, indices } => {
                let (n, d) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let mut ga = vec![0.0; n * d];
                for (r, &idx) in indices.iter().enumerate() {
                    for j in 0..d {
                        ga[idx * d + j] += g.data()[r * d + j];
                    }
                }
                accumulate(grads, *a, Tensor::new(vec![n, d], ga)?);
            }
            Record::LayerNorm { a } => {
                let x = self.value(*a);
                let xhat = &self.values[i];
                let (n, d) = (x.shape()[0], x.shape()[1]);
                let dim = d as f64;
                let mut ga = vec![0.0; n * d];
                for r in 0..n {
                    let row = x.row(r);
                    let mean = row.iter().sum::<f64>() / dim;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim;
                    let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let grow = &g.data()[r * d..(r + 1) * d];
                    let hrow = xhat.row(r);
                    let mean_g = grow.iter().sum::<f64>() / dim;
                    let mean_gh: f64 = grow.iter().zip(hrow).map(|(u, h)| u * h).sum::<f64>() / dim;
                    for j in 0..d {
                        ga[r * d + j] = inv_std * (grow[j] - mean_g - hrow[j] * mean_gh);
                    }
                }
                accumulate(grads, *a, Tensor::new(vec![n, d], ga)?);
            }
            Record::SoftmaxRows { a } => {
                let p = &self.values[i];
                let (n, d) = (p.shape()[0], p.shape()[1]);
                let mut ga = vec![0.0; n * d];
                for r in 0..n {
                    let prow = p.row(r);
                    let grow = &g.data()[r * d..(r + 1) * d];
                    let dot: f64 = prow.iter().zip(grow).map(|(pv, gv)| pv * gv).sum();
                    for j in 0..d {
                        ga[r * d + j] = prow[j] * (grow[j] - dot);
                    }
                }
                accumulate(grads, *a, Tensor::new(vec![n, d], ga)?);
            }
            Record::CrossEntropy { logits, labels } => {
                let z = self.value(*logits);
                let (n, k) = (z.shape()[0], z.shape()[1]);
                let u = g.item() / n as f64;
                let mut ga = vec![0.0; n * k];
                for r in 0..n {
                    let row = z.row(r);
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
                    for j in 0..k {
                        let p = (row[j] - max).exp() / denom;
                        ga[r * k + j] = u * (p - if labels[r] == j { 1.0 } else { 0.0 });
                    }
                }
                accumulate(grads, *logits, Tensor::new(vec![n, k], ga)?);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], var: Var, delta: Tensor) {
    match &mut grads[var.0] {
        Some(existing) => {
            let (shape, mut data) = std::mem::replace(existing, Tensor::scalar(0.0)).into_parts();
            for (d, inc) in data.iter_mut().zip(delta.data()) {
                *d += inc;
            }
            *existing = Tensor::new(shape, data).expect("accumulate preserves shape");
        }
        slot @ None => *slot = Some(delta),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect()
}

/// C = A (m x k) * B (k x n), row-major.
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for kk in 0..k {
            let av = a[i * k + kk];
            let brow = &b[kk * n..(kk + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// C = A (m x n) * B^T where B is (k x n), result m x k.
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            out[i * k + kk] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// C = A^T * B where A is (m x k) and B is (m x n), result k x n.
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = arow[kk];
            let orow = &mut out[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}
