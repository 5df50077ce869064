//! Finite-difference gradient checking, the test oracle for every backward
//! rule in this crate.

use rayon::prelude::*;

use super::{GraphError, NodeId, Tape, Tensor};

/// Outcome of a gradient check: the error statistic plus how many elements
/// the finite-difference oracle could legitimately assess.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    /// max over checked elements of |analytic − cd| / max(|a|, |cd|, 1e−8)
    pub max_rel_error: f64,
    pub checked: usize,
    /// Elements whose ±h evaluations landed in different differentiable
    /// regions (a relu sign, pool argmax, floor, or clamp flipped). A
    /// central difference straddling such a boundary does not estimate the
    /// gradient, so these elements are excluded from the maximum.
    pub skipped_nonsmooth: usize,
}

/// Compares analytic gradients against central finite differences.
///
/// `build` must deterministically construct a forward pass on the given tape
/// from leaves created for `inputs` (in order) and return the scalar loss
/// node. Returns the maximum over assessable input elements of
/// |analytic − cd| / max(|analytic|, |cd|, 1e−8); see [`GradCheckReport`]
/// for the smoothness precondition.
pub fn grad_check<F>(build: &F, inputs: &[Tensor], h: f64) -> Result<f64, GraphError>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId, GraphError> + Sync,
{
    grad_check_report(build, inputs, h).map(|r| r.max_rel_error)
}

pub fn grad_check_report<F>(
    build: &F,
    inputs: &[Tensor],
    h: f64,
) -> Result<GradCheckReport, GraphError>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId, GraphError> + Sync,
{
    if h <= 0.0 {
        return Err(GraphError::InvalidArgument(format!(
            "step size must be positive, got {h}"
        )));
    }

    // Returns (loss, decision signature).
    let eval = |tensors: &[Tensor]| -> Result<(f64, u64), GraphError> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| tape.leaf(t, false)).collect();
        let loss = build(&mut tape, &ids)?;
        if tape.value(loss).len() != 1 {
            return Err(GraphError::NonScalarLoss {
                shape: tape.shape(loss).to_vec(),
            });
        }
        Ok((tape.value(loss)[0], tape.decision_signature()))
    };

    // Determinism gate: two independent forward passes must agree bitwise.
    let (l0, _) = eval(inputs)?;
    let (l1, _) = eval(inputs)?;
    if l0.to_bits() != l1.to_bits() {
        return Err(GraphError::NonDeterministic { a: l0, b: l1 });
    }

    // Analytic gradients.
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t, true)).collect();
        let loss = build(&mut tape, &ids)?;
        tape.backward(loss)?;
        ids.iter()
            .enumerate()
            .map(|(i, &id)| {
                tape.grad(id)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; inputs[i].len()])
            })
            .collect()
    };

    let elements: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |e| (i, e)))
        .collect();

    let per_element: Vec<Option<f64>> = elements
        .par_iter()
        .map(|&(i, e)| -> Result<Option<f64>, GraphError> {
            let mut plus = inputs.to_vec();
            plus[i].values_mut()[e] += h;
            let mut minus = inputs.to_vec();
            minus[i].values_mut()[e] -= h;
            let (fp, sig_p) = eval(&plus)?;
            let (fm, sig_m) = eval(&minus)?;
            if sig_p != sig_m {
                return Ok(None);
            }
            let cd = (fp - fm) / (2.0 * h);
            let a = analytic[i][e];
            Ok(Some((a - cd).abs() / a.abs().max(cd.abs()).max(1e-8)))
        })
        .collect::<Result<_, _>>()?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped_nonsmooth: 0,
    };
    for err in per_element {
        match err {
            Some(e) => {
                report.checked += 1;
                report.max_rel_error = report.max_rel_error.max(e);
            }
            None => report.skipped_nonsmooth += 1,
        }
    }
    Ok(report)
}
