//! Central-difference gradient checking for arbitrary scalar objectives over
//! named parameter tensors.
//!
//! The caller supplies the objective as a pure function of the parameter map
//! plus the analytic gradients it wants verified. Every parameter tensor is
//! probed; tensors larger than `max_probes_per_tensor` are subsampled with a
//! deterministic stride so the check stays within a fixed runtime budget while
//! still touching every tensor (full sweeps remain available by raising the
//! cap).

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::Result;
use crate::fmath;
use crate::tensor::Tensor;

/// Knobs for [`finite_diff_check`].
#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Base central-difference step.
    pub h: f64,
    /// Maximum relative error considered a pass.
    pub tol: f64,
    /// Upper bound on probed elements per tensor (`usize::MAX` = full sweep).
    pub max_probes_per_tensor: usize,
    /// Seed for the probe-offset hash, so subsampled probes are reproducible.
    pub probe_seed: u64,
    /// Largest step the per-probe escalation may reach (see below).
    pub h_max: f64,
    /// Signal gate as a fraction of the objective scale: while
    /// `|f₊ − f₋| < signal_floor · max(|f|, 1)` the measured difference is
    /// too close to evaluation round-off to trust, and the step is escalated
    /// ×10 up to `h_max`. Directions with an exactly-zero derivative (for
    /// example a bias added uniformly to every attention key, which cancels
    /// in the softmax) never clear the gate; they end up measured at `h_max`,
    /// where the residual slope estimate is round-off divided by `2·h_max`
    /// and correctly reads as zero.
    pub signal_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-5,
            tol: 1e-4,
            max_probes_per_tensor: usize::MAX,
            probe_seed: 0,
            h_max: 1e-1,
            signal_floor: 1e-9,
        }
    }
}

/// Outcome of probing one parameter tensor.
#[derive(Debug, Clone)]
pub struct ProbeReport {
    pub name: String,
    pub elements: usize,
    pub probes: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

/// Full gradient-check result.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Objective value at the unperturbed parameters.
    pub objective: f64,
    pub tensors: Vec<ProbeReport>,
    /// Human-readable failure descriptions (non-finite values, errors).
    pub failures: Vec<String>,
    /// Largest relative error across all probes.
    pub max_rel_err: f64,
    /// True when every probe is finite and within tolerance.
    pub passed: bool,
}

impl GradCheckReport {
    /// One line per tensor plus a verdict, for log output.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for t in &self.tensors {
            out.push_str(&format!(
                "{}: probed {}/{} max_rel_err {:.3e} (analytic {:.6e} numeric {:.6e} at [{}])\n",
                t.name,
                t.probes,
                t.elements,
                t.max_rel_err,
                t.analytic_at_worst,
                t.numeric_at_worst,
                t.worst_index
            ));
        }
        for f in &self.failures {
            out.push_str(&format!("FAILURE: {f}\n"));
        }
        out.push_str(&format!(
            "objective {:.6e} max_rel_err {:.3e} => {}\n",
            self.objective,
            self.max_rel_err,
            if self.passed { "PASS" } else { "FAIL" }
        ));
        out
    }
}

/// Relative error with an absolute floor, symmetric in both arguments.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = fmath::max3(analytic.abs(), numeric.abs(), 1e-8);
    (analytic - numeric).abs() / denom
}

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325_u64 ^ seed;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Indices to probe for a tensor of `numel` elements. Small tensors are swept
/// fully; larger ones get `cap` evenly spaced indices with a name-seeded
/// offset so different tensors do not all sample the same positions.
fn probe_indices(numel: usize, cap: usize, seed: u64, name: &str) -> Vec<usize> {
    if numel <= cap {
        return (0..numel).collect();
    }
    let offset = (fnv1a(seed, name.as_bytes()) % numel as u64) as usize;
    (0..cap)
        .map(|i| (offset + i * numel / cap) % numel)
        .collect()
}

/// Verifies `analytic` against central differences of `objective` at `params`.
///
/// Each probed element is perturbed by ±h and the two-sided slope
/// `(f₊ − f₋) / 2h` is compared to the analytic entry via [`relative_error`].
/// Parameters missing from `analytic` are treated as having an all-zero
/// gradient, which makes structurally-absent gradients checkable too.
pub fn finite_diff_check<F>(
    mut objective: F,
    params: &BTreeMap<String, Tensor>,
    analytic: &BTreeMap<String, Tensor>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&BTreeMap<String, Tensor>) -> Result<f64>,
{
    let mut report = GradCheckReport {
        objective: 0.0,
        tensors: Vec::new(),
        failures: Vec::new(),
        max_rel_err: 0.0,
        passed: true,
    };

    match objective(params) {
        Ok(v) if v.is_finite() => report.objective = v,
        Ok(v) => {
            report.failures.push(format!(
                "objective is non-finite ({v}) at the unperturbed parameters"
            ));
            report.passed = false;
            return Ok(report);
        }
        Err(e) => return Err(e),
    }

    let mut work = params.clone();
    for (name, base) in params {
        let grad_zero;
        let grad = match analytic.get(name) {
            Some(g) => g,
            None => {
                grad_zero = Tensor::zeros(base.shape().to_vec());
                &grad_zero
            }
        };
        let idx = probe_indices(
            base.numel(),
            opts.max_probes_per_tensor,
            opts.probe_seed,
            name,
        );
        let mut probe = ProbeReport {
            name: name.clone(),
            elements: base.numel(),
            probes: idx.len(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic_at_worst: 0.0,
            numeric_at_worst: 0.0,
        };
        let mut tensor_failed = false;
        for &i in &idx {
            let orig = base.data()[i];
            let eval = |work: &mut BTreeMap<String, Tensor>, obj: &mut F, v: f64| -> Result<f64> {
                work.get_mut(name).expect("probed name exists").data_mut()[i] = v;
                let out = obj(work);
                work.get_mut(name).expect("probed name exists").data_mut()[i] = orig;
                out
            };
            // Escalate the step while the two-sided difference sits below the
            // round-off gate; a slope that small cannot be resolved at this h.
            let gate = opts.signal_floor * fmath::max3(report.objective.abs(), 1.0, 0.0);
            let mut h = opts.h;
            let mut slope: Option<f64> = None;
            loop {
                let f_plus = eval(&mut work, &mut objective, orig + h)?;
                let f_minus = eval(&mut work, &mut objective, orig - h)?;
                if !f_plus.is_finite() || !f_minus.is_finite() {
                    if slope.is_some() {
                        break; // keep the last finite measurement
                    }
                    report.failures.push(format!(
                        "objective non-finite while probing {name}[{i}] (f+ = {f_plus}, f- = {f_minus})"
                    ));
                    report.passed = false;
                    tensor_failed = true;
                    break;
                }
                let diff = f_plus - f_minus;
                slope = Some(diff / (2.0 * h));
                if diff.abs() >= gate || h * 10.0 > opts.h_max {
                    break;
                }
                h *= 10.0;
            }
            if tensor_failed {
                break;
            }
            let mut numeric = slope.expect("finite slope measured");
            if h > opts.h {
                // The escalated step is large enough that the h² truncation
                // term matters; cancel it by combining slopes at h and h/2.
                let f_plus = eval(&mut work, &mut objective, orig + h / 2.0)?;
                let f_minus = eval(&mut work, &mut objective, orig - h / 2.0)?;
                if f_plus.is_finite() && f_minus.is_finite() {
                    let half_slope = (f_plus - f_minus) / h;
                    numeric = (4.0 * half_slope - numeric) / 3.0;
                }
            }
            let a = grad.data()[i];
            let rel = relative_error(a, numeric);
            if rel > probe.max_rel_err {
                probe.max_rel_err = rel;
                probe.worst_index = i;
                probe.analytic_at_worst = a;
                probe.numeric_at_worst = numeric;
            }
        }
        if probe.max_rel_err > report.max_rel_err {
            report.max_rel_err = probe.max_rel_err;
        }
        if !tensor_failed && probe.max_rel_err > opts.tol {
            report.passed = false;
        }
        report.tensors.push(probe);
    }
    Ok(report)
}
