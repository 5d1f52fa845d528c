//! Finite-difference gradient checking (64-bit shadow mode).

use std::fmt;

use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-4;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Guard against 0/0 when both the analytic and numeric gradients vanish.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct BlockCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub elements: usize,
}

/// Per-block worst relative error between analytic and central-difference
/// gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub blocks: Vec<BlockCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.max_rel_error <= self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| b.max_rel_error)
            .fold(0.0, f64::max)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.blocks {
            let verdict = if b.max_rel_error <= self.tolerance { "ok" } else { "FAIL" };
            writeln!(
                f,
                "{:<28} max_rel_error={:<12.3e} ({} elements) {}",
                b.name, b.max_rel_error, b.elements, verdict
            )?;
        }
        write!(
            f,
            "worst {:.3e} vs tolerance {:.1e}: {}",
            self.worst(),
            self.tolerance,
            if self.passed() { "pass" } else { "fail" }
        )
    }
}

fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compares `analytic` gradients against central finite differences of
/// `loss_fn`, perturbing every element of every block.
///
/// `loss_fn` must be a pure function of the parameter store.
pub fn grad_check<F>(
    params: &mut ParamStore<f64>,
    analytic: &[Tensor<f64>],
    mut loss_fn: F,
    step: f64,
    tolerance: f64,
) -> GradCheckReport
where
    F: FnMut(&ParamStore<f64>) -> f64,
{
    assert_eq!(analytic.len(), params.len(), "one gradient block per parameter block");
    let mut blocks = Vec::with_capacity(params.len());
    for b in 0..params.len() {
        let name = params.name(b).to_string();
        let elements = params.tensor(b).numel();
        let mut max_rel = 0.0f64;
        for e in 0..elements {
            let original = params.tensor(b).data()[e];
            params.tensor_mut(b).data_mut()[e] = original + step;
            let plus = loss_fn(params);
            params.tensor_mut(b).data_mut()[e] = original - step;
            let minus = loss_fn(params);
            params.tensor_mut(b).data_mut()[e] = original;
            let fd = (plus - minus) / (2.0 * step);
            max_rel = max_rel.max(rel_error(analytic[b].data()[e], fd));
        }
        blocks.push(BlockCheck {
            name,
            max_rel_error: max_rel,
            elements,
        });
    }
    GradCheckReport {
        step,
        tolerance,
        blocks,
    }
}

/// Central finite differences of a scalar function over one tensor; test
/// helper for single-operation gradient checks.
pub fn fd_tensor_grad<T: Scalar, F>(x: &Tensor<T>, mut f: F, step: f64) -> Tensor<f64>
where
    F: FnMut(&Tensor<T>) -> f64,
{
    let mut probe = x.clone();
    let mut grad = Tensor::<f64>::zeros(x.shape());
    let h = T::from_f64(step).unwrap();
    for e in 0..x.numel() {
        let original = probe.data()[e];
        probe.data_mut()[e] = original + h;
        let plus = f(&probe);
        probe.data_mut()[e] = original - h;
        let minus = f(&probe);
        probe.data_mut()[e] = original;
        grad.data_mut()[e] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Worst relative disagreement between an analytic gradient tensor and its
/// finite-difference counterpart.
pub fn max_rel_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| rel_error(a, n))
        .fold(0.0, f64::max)
}
