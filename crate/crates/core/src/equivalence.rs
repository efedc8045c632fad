//! Functional equivalence of a candidate against the round baseline, decided
//! by comparing output tensors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::protocol::{read_tensor_file, TensorFile};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerance {
    pub rel: f64,
    pub abs: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance {
            rel: 1e-4,
            abs: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceKind {
    DtypeMismatch,
    ShapeMismatch,
    ValueMismatch,
    /// One of the outputs is missing or unreadable.
    Unreadable,
}

/// Where and by how much the candidate departs from the reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub kind: DivergenceKind,
    pub worst_index: Option<usize>,
    pub reference_value: Option<String>,
    pub candidate_value: Option<String>,
    /// Amount by which `|a - b|` exceeds the allowed bound at the worst index.
    pub excess: Option<String>,
    pub mismatched_elements: usize,
    pub detail: String,
}

impl std::fmt::Display for DivergenceReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}: {}", self.kind, self.detail)?;
        if let Some(i) = self.worst_index {
            write!(
                f,
                "; worst index {i}: reference {} vs candidate {} (excess {}); {} element(s) out of tolerance",
                self.reference_value.as_deref().unwrap_or("?"),
                self.candidate_value.as_deref().unwrap_or("?"),
                self.excess.as_deref().unwrap_or("?"),
                self.mismatched_elements
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Equivalence {
    Equivalent,
    Divergent(DivergenceReport),
}

impl Equivalence {
    pub fn is_equivalent(&self) -> bool {
        matches!(self, Equivalence::Equivalent)
    }
}

/// Float elements pass when `|a - b| <= abs + rel * |a|` with `a` from the
/// reference; NaN matches NaN. Integer elements must match exactly. Dtype and
/// dims must agree.
pub fn compare_outputs(
    reference: &TensorFile,
    candidate: &TensorFile,
    tol: Tolerance,
) -> Equivalence {
    if reference.dtype() != candidate.dtype() {
        return Equivalence::Divergent(DivergenceReport {
            kind: DivergenceKind::DtypeMismatch,
            worst_index: None,
            reference_value: None,
            candidate_value: None,
            excess: None,
            mismatched_elements: 0,
            detail: format!("dtype {:?} vs {:?}", reference.dtype(), candidate.dtype()),
        });
    }
    if reference.dims() != candidate.dims() {
        return Equivalence::Divergent(DivergenceReport {
            kind: DivergenceKind::ShapeMismatch,
            worst_index: None,
            reference_value: None,
            candidate_value: None,
            excess: None,
            mismatched_elements: 0,
            detail: format!("dims {:?} vs {:?}", reference.dims(), candidate.dims()),
        });
    }

    // (index, excess, reference, candidate) of the worst offender so far
    let mut worst: Option<(usize, f64, String, String)> = None;
    let mut mismatched = 0usize;
    let mut note = |i: usize, excess: f64, a: String, b: String| {
        mismatched += 1;
        if worst.as_ref().is_none_or(|w| excess > w.1) {
            worst = Some((i, excess, a, b));
        }
    };

    if let (Some(a), Some(b)) = (reference.float_values(), candidate.float_values()) {
        for (i, (&x, &y)) in a.iter().zip(&b).enumerate() {
            if x == y || (x.is_nan() && y.is_nan()) {
                continue;
            }
            // Unequal values where either side is NaN or infinite never match.
            if !x.is_finite() || !y.is_finite() {
                note(i, f64::INFINITY, x.to_string(), y.to_string());
                continue;
            }
            let diff = (x - y).abs();
            let bound = tol.abs + tol.rel * x.abs();
            if !(diff <= bound) {
                note(i, diff - bound, x.to_string(), y.to_string());
            }
        }
    } else if let (Some(a), Some(b)) = (reference.int_values(), candidate.int_values()) {
        for (i, (&x, &y)) in a.iter().zip(&b).enumerate() {
            if x != y {
                let excess = (i128::from(x) - i128::from(y)).unsigned_abs() as f64;
                note(i, excess, x.to_string(), y.to_string());
            }
        }
    }

    match worst {
        None => Equivalence::Equivalent,
        Some((i, excess, a, b)) => Equivalence::Divergent(DivergenceReport {
            kind: DivergenceKind::ValueMismatch,
            worst_index: Some(i),
            reference_value: Some(a),
            candidate_value: Some(b),
            excess: Some(excess.to_string()),
            mismatched_elements: mismatched,
            detail: format!(
                "{mismatched} of {} elements outside rel {} / abs {}",
                reference.len(),
                tol.rel,
                tol.abs
            ),
        }),
    }
}

/// Persisted verdict (`fe_report.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeReport {
    pub equivalent: bool,
    pub tolerance: Tolerance,
    pub divergence: Option<DivergenceReport>,
}

impl FeReport {
    /// Text handed to the repair prompt.
    pub fn diagnostics(&self) -> String {
        match &self.divergence {
            None => "outputs equivalent".into(),
            Some(d) => format!(
                "output differs from the baseline (rel_tol {}, abs_tol {}): {d}",
                self.tolerance.rel, self.tolerance.abs
            ),
        }
    }
}

/// Reads both outputs and compares them. Missing or unreadable files fail.
pub fn fe_check(
    baseline_output: &Path,
    candidate_output: Option<&Path>,
    tol: Tolerance,
) -> FeReport {
    let unreadable = |detail: String| FeReport {
        equivalent: false,
        tolerance: tol,
        divergence: Some(DivergenceReport {
            kind: DivergenceKind::Unreadable,
            worst_index: None,
            reference_value: None,
            candidate_value: None,
            excess: None,
            mismatched_elements: 0,
            detail,
        }),
    };
    let reference = match read_tensor_file(baseline_output) {
        Ok(t) => t,
        Err(e) => return unreadable(format!("baseline output: {e}")),
    };
    let Some(candidate_output) = candidate_output else {
        return unreadable("candidate wrote no output file".into());
    };
    let candidate = match read_tensor_file(candidate_output) {
        Ok(t) => t,
        Err(e) => return unreadable(format!("candidate output: {e}")),
    };
    match compare_outputs(&reference, &candidate, tol) {
        Equivalence::Equivalent => FeReport {
            equivalent: true,
            tolerance: tol,
            divergence: None,
        },
        Equivalence::Divergent(d) => FeReport {
            equivalent: false,
            tolerance: tol,
            divergence: Some(d),
        },
    }
}
