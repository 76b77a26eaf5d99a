//! Multi-task loss weighting: the weighted two-task cross-entropy
//! objective, GradNorm balancing of the morphology and distribution tasks
//! via gradient norms at the last shared layer, and optional soft-target
//! distillation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};

/// Number of tasks: morphology (node-level) and distribution (graph-level).
pub const N_TASKS: usize = 2;

/// Task weights never fall below this floor.
pub const WEIGHT_FLOOR: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum MultitaskError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("shared layer receives no gradient from the {task} loss; the model is miswired")]
    SharedLayerUnused { task: &'static str },
    #[error("initial loss for task {task} is {value}; GradNorm needs positive initial losses")]
    BadInitialLoss { task: &'static str, value: f64 },
    #[error("GradNorm targets requested before initial losses were recorded")]
    InitialLossesNotRecorded,
    #[error("distillation temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("student logits {student:?} and teacher logits {teacher:?} differ in shape")]
    LogitShapeMismatch {
        student: Vec<usize>,
        teacher: Vec<usize>,
    },
}

/// Scalar snapshot of the two task losses at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskLosses {
    pub morphology: f64,
    pub distribution: f64,
}

impl TaskLosses {
    pub fn as_array(self) -> [f64; N_TASKS] {
        [self.morphology, self.distribution]
    }
}

/// The weighted multi-task objective `w_m * L_m + w_d * L_d` on the tape.
pub fn multitask_loss(
    tape: &mut Tape,
    morphology_loss: Var,
    distribution_loss: Var,
    weights: [f64; N_TASKS],
) -> Result<Var, MultitaskError> {
    let wm = tape.scalar_mul(morphology_loss, weights[0])?;
    let wd = tape.scalar_mul(distribution_loss, weights[1])?;
    Ok(tape.add(wm, wd)?)
}

fn l2_norm(t: &Tensor) -> f64 {
    t.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Per-task gradient norms at the shared layer:
/// `G_i = || grad_W (w_i * L_i) ||_2`, computed by one restricted backward
/// sweep per task and scaled by `w_i` (the gradient is homogeneous in the
/// task weight). Errors if a task's loss does not reach the shared layer.
pub fn task_gradient_norms(
    tape: &Tape,
    morphology_loss: Var,
    distribution_loss: Var,
    weights: [f64; N_TASKS],
    shared_layer: Var,
) -> Result<[f64; N_TASKS], MultitaskError> {
    let mut norms = [0.0; N_TASKS];
    for (i, (loss, task)) in [(morphology_loss, "morphology"), (distribution_loss, "distribution")]
        .into_iter()
        .enumerate()
    {
        let grads = tape
            .backward_restricted(loss, &[shared_layer])
            .map_err(|e| match e {
                AutodiffError::NoGradientPath => MultitaskError::SharedLayerUnused { task },
                other => MultitaskError::Autodiff(other),
            })?;
        let g = grads.get(shared_layer).expect("restricted backward fills requested leaves");
        norms[i] = weights[i] * l2_norm(g);
    }
    Ok(norms)
}

/// GradNorm state: task weights on the simplex `w_m + w_d = 2`, the frozen
/// initial losses, the restoring-force exponent alpha, and the step size
/// for the weight update.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradNormState {
    weights: [f64; N_TASKS],
    initial_losses: Option<[f64; N_TASKS]>,
    pub alpha: f64,
    pub weight_lr: f64,
}

impl GradNormState {
    pub fn new(alpha: f64, weight_lr: f64) -> Self {
        GradNormState {
            weights: [1.0; N_TASKS],
            initial_losses: None,
            alpha,
            weight_lr,
        }
    }

    pub fn weights(&self) -> [f64; N_TASKS] {
        self.weights
    }

    pub fn initial_losses(&self) -> Option<[f64; N_TASKS]> {
        self.initial_losses
    }

    /// Records the initial losses on the first call; later calls are no-ops.
    /// Zero (or negative) initial losses are rejected because the inverse
    /// training rate divides by them.
    pub fn ensure_initial(&mut self, losses: TaskLosses) -> Result<(), MultitaskError> {
        if self.initial_losses.is_some() {
            return Ok(());
        }
        let arr = losses.as_array();
        for (value, task) in arr.into_iter().zip(["morphology", "distribution"]) {
            if value <= 0.0 {
                return Err(MultitaskError::BadInitialLoss { task, value });
            }
        }
        self.initial_losses = Some(arr);
        Ok(())
    }

    /// Target gradient norms: `mean(G) * r_i^alpha` where `r_i` is the
    /// relative inverse training rate `(L_i / L_i(0)) / mean_j(L_j / L_j(0))`.
    /// Targets are constants: no gradient flows through them.
    pub fn targets(
        &self,
        norms: [f64; N_TASKS],
        losses: TaskLosses,
    ) -> Result<[f64; N_TASKS], MultitaskError> {
        let initial = self.initial_losses.ok_or(MultitaskError::InitialLossesNotRecorded)?;
        let current = losses.as_array();
        let ratios: Vec<f64> = current.iter().zip(&initial).map(|(l, l0)| l / l0).collect();
        let mean_ratio = ratios.iter().sum::<f64>() / N_TASKS as f64;
        let mean_norm = norms.iter().sum::<f64>() / N_TASKS as f64;
        let mut out = [0.0; N_TASKS];
        for i in 0..N_TASKS {
            let relative = ratios[i] / mean_ratio;
            out[i] = mean_norm * relative.powf(self.alpha);
        }
        Ok(out)
    }

    /// One L1 GradNorm step on the weights:
    /// `L_grad = sum_i |G_i - target_i|`, stepped along
    /// `-dL_grad/dw_i = -sign(G_i - target_i) * G_i / w_i`
    /// (homogeneity of `G_i` in `w_i`; targets held constant), then
    /// renormalized to sum to the task count and floored. Returns `L_grad`.
    pub fn update(&mut self, norms: [f64; N_TASKS], targets: [f64; N_TASKS]) -> f64 {
        let mut l_grad = 0.0;
        for i in 0..N_TASKS {
            let gap = norms[i] - targets[i];
            l_grad += gap.abs();
            let slope = gap.signum() * norms[i] / self.weights[i];
            self.weights[i] -= self.weight_lr * slope;
        }
        for w in &mut self.weights {
            *w = w.max(WEIGHT_FLOOR);
        }
        let total: f64 = self.weights.iter().sum();
        for w in &mut self.weights {
            *w *= N_TASKS as f64 / total;
        }
        // Renormalization can push the smaller weight back under the floor;
        // pin it there and give the remainder to the other task.
        for i in 0..N_TASKS {
            if self.weights[i] < WEIGHT_FLOOR {
                self.weights[i] = WEIGHT_FLOOR;
                self.weights[1 - i] = N_TASKS as f64 - WEIGHT_FLOOR;
            }
        }
        l_grad
    }
}

/// Soft-target distillation loss: cross entropy between the temperature-
/// softened teacher distribution and the temperature-softened student
/// distribution, scaled by `temperature^2` and averaged over rows.
pub fn distill_loss(
    tape: &mut Tape,
    student_logits: Var,
    teacher_logits: &Tensor,
    temperature: f64,
) -> Result<Var, MultitaskError> {
    if temperature <= 0.0 {
        return Err(MultitaskError::BadTemperature(temperature));
    }
    let student_shape = tape.value(student_logits).shape().to_vec();
    if student_shape != teacher_logits.shape() {
        return Err(MultitaskError::LogitShapeMismatch {
            student: student_shape,
            teacher: teacher_logits.shape().to_vec(),
        });
    }
    let (rows, cols) = teacher_logits.dims2().expect("logits are matrices");

    // Softened teacher probabilities are constants.
    let mut soft = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = teacher_logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / temperature;
        let mut denom = 0.0;
        for c in 0..cols {
            let e = (row[c] / temperature - max).exp();
            soft[r * cols + c] = e;
            denom += e;
        }
        for c in 0..cols {
            soft[r * cols + c] /= denom;
        }
    }
    let teacher_soft = tape.leaf(Tensor::matrix(rows, cols, soft).expect("soft target shape"))?;

    let scaled = tape.scalar_mul(student_logits, 1.0 / temperature)?;
    let student_soft = tape.softmax_rows(scaled)?;
    let log_student = tape.log(student_soft)?;
    let weighted = tape.mul(teacher_soft, log_student)?;
    let total = tape.sum_all(weighted)?;
    Ok(tape.scalar_mul(total, -(temperature * temperature) / rows as f64)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_leaf(tape: &mut Tape, v: f64) -> Var {
        tape.leaf(Tensor::scalar(v)).unwrap()
    }

    #[test]
    fn multitask_loss_arithmetic() {
        let mut tape = Tape::new();
        let lm = scalar_leaf(&mut tape, 0.5);
        let ld = scalar_leaf(&mut tape, 0.7);
        let l = multitask_loss(&mut tape, lm, ld, [1.0, 1.0]).unwrap();
        assert!((tape.scalar_value(l).unwrap() - 1.2).abs() < 1e-15);
        let l = multitask_loss(&mut tape, lm, ld, [2.0, 1.0]).unwrap();
        assert!((tape.scalar_value(l).unwrap() - 1.7).abs() < 1e-15);

        let zero = scalar_leaf(&mut tape, 0.0);
        let l = multitask_loss(&mut tape, zero, ld, [3.0, 2.0]).unwrap();
        assert!((tape.scalar_value(l).unwrap() - 1.4).abs() < 1e-15);
    }

    /// Scalar toy: W in R, L_i = a_i * W^2, so grad_W L_i = 2 a_i W and
    /// G_i = w_i * |2 a_i W|.
    fn toy_tape(a_m: f64, a_d: f64, w_val: f64) -> (Tape, Var, Var, Var) {
        let mut tape = Tape::new();
        let w = scalar_leaf(&mut tape, w_val);
        let w_sq = tape.mul(w, w).unwrap();
        let lm = tape.scalar_mul(w_sq, a_m).unwrap();
        let ld = tape.scalar_mul(w_sq, a_d).unwrap();
        (tape, w, lm, ld)
    }

    #[test]
    fn gradient_norms_match_closed_form() {
        let (tape, w, lm, ld) = toy_tape(3.0, 0.5, 1.7);
        let weights = [1.3, 0.7];
        let norms = task_gradient_norms(&tape, lm, ld, weights, w).unwrap();
        assert!((norms[0] - 1.3 * (2.0 * 3.0 * 1.7)).abs() < 1e-12);
        assert!((norms[1] - 0.7 * (2.0 * 0.5 * 1.7)).abs() < 1e-12);
    }

    #[test]
    fn gradient_norms_are_homogeneous_in_weights() {
        let (tape, w, lm, ld) = toy_tape(2.0, 1.0, 0.9);
        let base = task_gradient_norms(&tape, lm, ld, [1.0, 1.0], w).unwrap();
        let doubled = task_gradient_norms(&tape, lm, ld, [2.0, 2.0], w).unwrap();
        assert!((doubled[0] - 2.0 * base[0]).abs() < 1e-12);
        assert!((doubled[1] - 2.0 * base[1]).abs() < 1e-12);
    }

    #[test]
    fn identical_tasks_have_equal_norms() {
        let (tape, w, lm, ld) = toy_tape(1.5, 1.5, 2.0);
        let norms = task_gradient_norms(&tape, lm, ld, [1.0, 1.0], w).unwrap();
        assert_eq!(norms[0], norms[1]);
    }

    #[test]
    fn unused_shared_layer_is_a_wiring_error() {
        let mut tape = Tape::new();
        let w = scalar_leaf(&mut tape, 1.0);
        let other = scalar_leaf(&mut tape, 2.0);
        let lm = tape.mul(other, other).unwrap();
        let ld = tape.mul(w, w).unwrap();
        assert!(matches!(
            task_gradient_norms(&tape, lm, ld, [1.0, 1.0], w),
            Err(MultitaskError::SharedLayerUnused { task: "morphology" })
        ));
    }

    #[test]
    fn targets_examples() {
        let mut state = GradNormState::new(1.0, 0.025);
        state
            .ensure_initial(TaskLosses {
                morphology: 1.0,
                distribution: 1.0,
            })
            .unwrap();

        // Equal relative rates: both targets are the mean norm.
        let t = state
            .targets([3.0, 1.0], TaskLosses { morphology: 0.4, distribution: 0.4 })
            .unwrap();
        assert!((t[0] - 2.0).abs() < 1e-15);
        assert!((t[1] - 2.0).abs() < 1e-15);

        // alpha = 0 ignores the rates entirely.
        let mut flat = GradNormState::new(0.0, 0.025);
        flat.ensure_initial(TaskLosses { morphology: 1.0, distribution: 1.0 }).unwrap();
        let t = flat
            .targets([3.0, 1.0], TaskLosses { morphology: 0.9, distribution: 0.1 })
            .unwrap();
        assert!((t[0] - 2.0).abs() < 1e-15);
        assert!((t[1] - 2.0).abs() < 1e-15);

        // Loss ratios (2, 1), alpha = 1, G = (3, 1):
        // mean(G) = 2, r = (4/3, 2/3), targets = (8/3, 4/3).
        let t = state
            .targets([3.0, 1.0], TaskLosses { morphology: 2.0, distribution: 1.0 })
            .unwrap();
        assert!((t[0] - 8.0 / 3.0).abs() < 1e-12);
        assert!((t[1] - 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_initial_loss_is_rejected() {
        let mut state = GradNormState::new(1.5, 0.025);
        let err = state
            .ensure_initial(TaskLosses { morphology: 0.0, distribution: 1.0 })
            .unwrap_err();
        assert!(matches!(err, MultitaskError::BadInitialLoss { task: "morphology", .. }));
        assert!(matches!(
            state.targets([1.0, 1.0], TaskLosses { morphology: 1.0, distribution: 1.0 }),
            Err(MultitaskError::InitialLossesNotRecorded)
        ));
    }

    #[test]
    fn matched_norms_are_a_fixed_point() {
        let mut state = GradNormState::new(1.5, 0.025);
        let before = state.weights();
        let l_grad = state.update([2.5, 2.5], [2.5, 2.5]);
        assert_eq!(l_grad, 0.0);
        assert_eq!(state.weights(), before);
    }

    #[test]
    fn update_pushes_down_the_stronger_task() {
        let mut state = GradNormState::new(0.0, 0.01);
        state
            .ensure_initial(TaskLosses { morphology: 1.0, distribution: 1.0 })
            .unwrap();
        let norms = [3.0, 1.0];
        let targets = state
            .targets(norms, TaskLosses { morphology: 1.0, distribution: 1.0 })
            .unwrap();
        let before = state.weights();
        state.update(norms, targets);
        let after = state.weights();
        assert!(after[0] < before[0], "stronger task weight should drop");
        assert!(after[1] > before[1]);
        assert!((after.iter().sum::<f64>() - 2.0).abs() < 1e-12);
    }

    /// Constant underlying gradient magnitudes with a 10:1 ratio; GradNorm
    /// should move weight to the weak task until the norms equalize.
    #[test]
    fn toy_equalization_converges_and_is_monotone() {
        let magnitudes = [10.0, 1.0];
        let mut state = GradNormState::new(1.5, 0.002);
        let losses = TaskLosses { morphology: 1.0, distribution: 1.0 };
        state.ensure_initial(losses).unwrap();

        let mut reached_within_5pct = false;
        let mut last_ratio = state.weights()[1] / state.weights()[0];
        let mut final_norm_ratio = f64::NAN;
        for _ in 0..500 {
            let w = state.weights();
            let norms = [w[0] * magnitudes[0], w[1] * magnitudes[1]];
            final_norm_ratio = norms[0] / norms[1];
            if !reached_within_5pct {
                if (final_norm_ratio - 1.0).abs() <= 0.05 {
                    reached_within_5pct = true;
                } else {
                    let ratio = w[1] / w[0];
                    assert!(ratio >= last_ratio, "w2/w1 must rise monotonically before equalizing");
                    last_ratio = ratio;
                }
            }
            let targets = state.targets(norms, losses).unwrap();
            state.update(norms, targets);
            let w = state.weights();
            assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-12);
            assert!(w.iter().all(|&x| x >= WEIGHT_FLOOR));
        }
        assert!(reached_within_5pct, "norms never equalized within 5%");
        assert!(
            (0.8..=1.25).contains(&final_norm_ratio),
            "final norm ratio {final_norm_ratio}"
        );
    }

    #[test]
    fn distill_self_is_softened_entropy() {
        let logits = Tensor::from_rows(&[vec![2.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let mut tape = Tape::new();
        let student = tape.leaf(logits.clone()).unwrap();
        let loss = distill_loss(&mut tape, student, &logits, 1.0).unwrap();

        // Entropy of the teacher distribution, averaged over rows.
        let mut expected = 0.0;
        for r in 0..2 {
            let row = logits.row(r);
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            for v in row {
                let p = v.exp() / denom;
                expected -= p * p.ln();
            }
        }
        expected /= 2.0;
        assert!((tape.scalar_value(loss).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn distill_hand_case_matches_direct_computation() {
        let teacher = Tensor::from_rows(&[vec![2.0, 0.0]]).unwrap();
        let student_logits = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let mut tape = Tape::new();
        let student = tape.leaf(student_logits).unwrap();
        let loss = distill_loss(&mut tape, student, &teacher, 1.0).unwrap();

        let p_teacher = (2.0f64.exp() / (2.0f64.exp() + 1.0), 1.0 / (2.0f64.exp() + 1.0));
        // Student softmax of (1, 1) is (0.5, 0.5).
        let expected = -(p_teacher.0 * 0.5f64.ln() + p_teacher.1 * 0.5f64.ln());
        assert!((tape.scalar_value(loss).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn distill_high_temperature_limit_is_uniform_entropy() {
        let teacher = Tensor::from_rows(&[vec![3.0, -1.0, 0.5]]).unwrap();
        let mut tape = Tape::new();
        let student = tape.leaf(Tensor::from_rows(&[vec![-2.0, 4.0, 1.0]]).unwrap()).unwrap();
        let temperature = 1e6;
        let loss = distill_loss(&mut tape, student, &teacher, temperature).unwrap();
        // Both softened distributions approach uniform, so the cross entropy
        // term approaches log(#classes); undo the temperature^2 scale.
        let ce = tape.scalar_value(loss).unwrap() / (temperature * temperature);
        assert!((ce - 3.0f64.ln()).abs() < 1e-5, "ce {ce}");
    }

    #[test]
    fn distill_teacher_is_a_stationary_minimum() {
        let teacher = Tensor::from_rows(&[vec![1.2, -0.4, 0.3], vec![0.0, 2.0, -1.0]]).unwrap();
        let mut tape = Tape::new();
        let student = tape.leaf(teacher.clone()).unwrap();
        let base_loss = distill_loss(&mut tape, student, &teacher, 2.0).unwrap();
        let base = tape.scalar_value(base_loss).unwrap();

        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let mut tape = Tape::new();
            let perturbed: Vec<Vec<f64>> = (0..2)
                .map(|r| {
                    (0..3)
                        .map(|c| teacher.at2(r, c) + (rng.gen::<f64>() - 0.5) * 0.2)
                        .collect()
                })
                .collect();
            let student = tape.leaf(Tensor::from_rows(&perturbed).unwrap()).unwrap();
            let loss = distill_loss(&mut tape, student, &teacher, 2.0).unwrap();
            assert!(tape.scalar_value(loss).unwrap() >= base - 1e-12);
        }
    }

    #[test]
    fn distill_rejects_bad_inputs() {
        let teacher = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let mut tape = Tape::new();
        let student = tape.leaf(teacher.clone()).unwrap();
        assert!(matches!(
            distill_loss(&mut tape, student, &teacher, 0.0),
            Err(MultitaskError::BadTemperature(_))
        ));
        let wide = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        assert!(matches!(
            distill_loss(&mut tape, student, &wide, 1.0),
            Err(MultitaskError::LogitShapeMismatch { .. })
        ));
    }
}
