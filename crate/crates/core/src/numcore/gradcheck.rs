//! Central-difference gradient checking.

use super::{NumError, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub h: f64,
    /// Relative error above which a coordinate is flagged.
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so coordinates whose
    /// gradient vanishes are compared in absolute terms.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { h: 1e-5, tol: 1e-6, floor: 1e-6 }
    }
}

/// One checked coordinate: `input` indexes the input list, `index` the
/// flat element within that input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoordCheck {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub coords: Vec<CoordCheck>,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn flagged(&self) -> Vec<CoordCheck> {
        self.coords.iter().copied().filter(|c| c.rel_err >= self.tol).collect()
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Every coordinate of every input.
pub fn all_coords(inputs: &[Tensor]) -> Vec<(usize, usize)> {
    inputs.iter().enumerate().flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j))).collect()
}

/// Compares supplied analytic gradients against central differences of
/// `value` at the listed coordinates.
pub fn compare_gradients<F>(
    value: F,
    inputs: &[Tensor],
    analytic: &[Tensor],
    coords: &[(usize, usize)],
    cfg: GradCheckConfig,
) -> GradCheckReport
where
    F: Fn(&[Tensor]) -> f64,
{
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut checks = Vec::with_capacity(coords.len());
    for &(input, index) in coords {
        let orig = work[input].data()[index];
        work[input].data_mut()[index] = orig + cfg.h;
        let plus = value(&work);
        work[input].data_mut()[index] = orig - cfg.h;
        let minus = value(&work);
        work[input].data_mut()[index] = orig;
        let numeric = (plus - minus) / (2.0 * cfg.h);
        let a = analytic[input].data()[index];
        checks.push(CoordCheck { input, index, analytic: a, numeric, rel_err: relative_error(a, numeric, cfg.floor) });
    }
    let max_rel_err = checks.iter().map(|c| c.rel_err).fold(0.0, f64::max);
    let mean_rel_err =
        if checks.is_empty() { 0.0 } else { checks.iter().map(|c| c.rel_err).sum::<f64>() / checks.len() as f64 };
    GradCheckReport { coords: checks, max_rel_err, mean_rel_err, tol: cfg.tol }
}

/// Gradient check of a tape-built scalar function `f` over `inputs`,
/// restricted to `coords` (all coordinates when `None`).
pub fn grad_check<F>(
    f: F,
    inputs: &[Tensor],
    coords: Option<&[(usize, usize)]>,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport, NumError>
where
    F: Fn(&Tape, &[Var]) -> Result<Var, NumError>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get(*v)).collect();

    let value = |xs: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars).expect("function succeeded on the unperturbed inputs");
        tape.value(out).item()
    };
    let owned;
    let coords = match coords {
        Some(c) => c,
        None => {
            owned = all_coords(inputs);
            &owned
        }
    };
    Ok(compare_gradients(value, inputs, &analytic, coords, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let report = grad_check(
            |t, v| Ok(t.sum(t.mul(v[0], v[0])?)),
            &[Tensor::vector(&[3.0])],
            None,
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!((report.coords[0].analytic - 6.0).abs() < 1e-12);
        assert!((report.coords[0].numeric - 6.0).abs() < 1e-6);
        assert!(report.passed());
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        let x = Tensor::vector(&[1.0, 2.0, 3.0]);
        let value = |xs: &[Tensor]| xs[0].data().iter().map(|v| v * v).sum::<f64>();
        // d/dx of x² is 2x; corrupt the middle coordinate.
        let wrong = Tensor::vector(&[2.0, 5.0, 6.0]);
        let report = compare_gradients(
            value,
            std::slice::from_ref(&x),
            &[wrong],
            &all_coords(std::slice::from_ref(&x)),
            GradCheckConfig::default(),
        );
        let flagged = report.flagged();
        assert_eq!(flagged.len(), 1);
        assert_eq!(flagged[0].index, 1);
        assert!(!report.passed());
    }
}
