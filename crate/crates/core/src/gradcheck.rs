//! Central finite-difference verification of analytic gradients.
//!
//! The numeric side only ever evaluates the loss function, so it stays
//! independent of the backward rules it is checking.

use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Default perturbation for central differences.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Worst scaled error per named parameter block.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub blocks: Vec<FdBlock>,
}

#[derive(Debug, Clone)]
pub struct FdBlock {
    pub name: String,
    pub max_rel_err: f64,
}

impl FdReport {
    pub fn worst(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| b.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn all_below(&self, tol: f64) -> bool {
        self.worst() < tol
    }
}

/// Scaled relative error: behaves like relative error for large gradients
/// and absolute error below magnitude 1.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Compares analytic gradients of a scalar loss against central finite
/// differences `(f(θ+h) − f(θ−h)) / 2h` for every element of every block.
///
/// `build` mounts the given leaves on a fresh tape and returns the scalar
/// loss var; it is called once with differentiable leaves for the analytic
/// pass and then twice per parameter element for the numeric side.
pub fn finite_diff_check<B>(
    params: &[(String, Tensor)],
    h: f64,
    build: B,
) -> Result<FdReport, TensorError>
where
    B: Fn(&Tape, &[Var]) -> Result<Var, TensorError>,
{
    // analytic gradients
    let tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| tape.var(t.clone())).collect();
    let loss = build(&tape, &vars)?;
    tape.backward(&loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|v| v.grad().expect("requires-grad leaf must have a gradient"))
        .collect();

    let eval = |theta: &[(String, Tensor)]| -> Result<f64, TensorError> {
        let tape = Tape::new();
        let vars: Vec<Var> = theta.iter().map(|(_, t)| tape.constant(t.clone())).collect();
        Ok(build(&tape, &vars)?.item())
    };

    let mut work: Vec<(String, Tensor)> = params.to_vec();
    let mut blocks = Vec::with_capacity(params.len());
    for bi in 0..params.len() {
        let mut max_err = 0.0f64;
        for ei in 0..params[bi].1.numel() {
            let orig = work[bi].1.data()[ei];
            work[bi].1.data_mut()[ei] = orig + h;
            let plus = eval(&work)?;
            work[bi].1.data_mut()[ei] = orig - h;
            let minus = eval(&work)?;
            work[bi].1.data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            max_err = max_err.max(rel_err(analytic[bi].data()[ei], numeric));
        }
        blocks.push(FdBlock {
            name: params[bi].0.clone(),
            max_rel_err: max_err,
        });
    }
    Ok(FdReport { blocks })
}
