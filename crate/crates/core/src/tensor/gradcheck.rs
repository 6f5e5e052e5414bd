//! Central finite-difference gradient checking.

use super::{Graph, Result, Var};

/// One differentiable input of a checked function.
#[derive(Debug, Clone)]
pub struct CheckInput {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl CheckInput {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        assert_eq!(rows * cols, values.len());
        Self { rows, cols, values }
    }
}

/// Outcome of comparing analytic and numeric gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckReport {
    /// `‖analytic − numeric‖ / max(‖analytic‖ + ‖numeric‖, 1e-12)` over all inputs.
    pub rel_error: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
}

/// Compares `backward` against central differences with step `h` for a
/// scalar function built by `f` from leaves holding `inputs`.
pub fn check<F>(inputs: &[CheckInput], h: f64, f: F) -> Result<CheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Vec<f64>]| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars = inputs
            .iter()
            .zip(vals)
            .map(|(inp, v)| g.leaf(inp.rows, inp.cols, v.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        Ok((g, vars, out))
    };

    let base: Vec<Vec<f64>> = inputs.iter().map(|i| i.values.clone()).collect();
    let (g, vars, out) = eval(&base)?;
    let grads = g.gradients(out)?;

    let mut diff2 = 0.0;
    let mut a2 = 0.0;
    let mut n2 = 0.0;
    for (k, inp) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inp.values.len()]);
        for i in 0..inp.values.len() {
            let mut plus = base.clone();
            plus[k][i] += h;
            let mut minus = base.clone();
            minus[k][i] -= h;
            let (gp, _, op) = eval(&plus)?;
            let (gm, _, om) = eval(&minus)?;
            let numeric = (gp.scalar_value(op) - gm.scalar_value(om)) / (2.0 * h);
            diff2 += (analytic[i] - numeric).powi(2);
            a2 += analytic[i].powi(2);
            n2 += numeric.powi(2);
        }
    }
    let (an, nn) = (a2.sqrt(), n2.sqrt());
    Ok(CheckReport {
        rel_error: diff2.sqrt() / (an + nn).max(1e-12),
        analytic_norm: an,
        numeric_norm: nn,
    })
}
