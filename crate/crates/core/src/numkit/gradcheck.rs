//! Central finite-difference gradient checking.

use super::{Graph, NumError, Tensor, Var};

/// Denominator floor for the relative error, so gradients that are
/// numerically zero are compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradEntry {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    /// Set when the probe straddles a relu kink; excluded from pass/fail.
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradEntry>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub notes: Vec<String>,
}

impl GradCheckReport {
    pub fn skipped(&self) -> usize {
        self.entries.iter().filter(|e| e.skipped).count()
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

fn evaluate<F>(build: &F, params: &[Tensor]) -> Result<(Graph, Vec<Var>, Var), NumError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, NumError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = build(&mut g, &vars)?;
    if !g.value(loss).is_scalar() {
        return Err(NumError::NonScalarLoss {
            shape: g.value(loss).shape().to_vec(),
        });
    }
    Ok((g, vars, loss))
}

/// Compares `backward` against `(f(x+h) − f(x−h)) / 2h` for every
/// component of every parameter. `build` constructs the scalar loss from
/// the parameter leaves and is re-run for each probe.
pub fn grad_check<F>(build: F, params: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport, NumError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, NumError>,
{
    if !(h > 0.0 && h <= 1e-2) {
        return Err(NumError::InvalidConfig(format!("finite-difference step {h} outside (0, 1e-2]")));
    }
    let mut report = GradCheckReport {
        entries: Vec::new(),
        max_rel_err: 0.0,
        tolerance: tol,
        passed: true,
        notes: Vec::new(),
    };
    if params.is_empty() {
        return Ok(report);
    }
    let (graph, vars, loss) = evaluate(&build, params)?;
    let grads = graph.backward(loss)?;
    let base_sig = graph.relu_signature();
    let mut work = params.to_vec();
    for (pi, (var, p)) in vars.iter().zip(params).enumerate() {
        let analytic = grads.get_or_zeros(*var, p.shape());
        for idx in 0..p.len() {
            let orig = p.values()[idx];
            work[pi].values_mut()[idx] = orig + h;
            let (gp, _, lp) = evaluate(&build, &work)?;
            work[pi].values_mut()[idx] = orig - h;
            let (gm, _, lm) = evaluate(&build, &work)?;
            work[pi].values_mut()[idx] = orig;
            let numeric = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * h);
            let a = analytic.values()[idx];
            let kink = base_sig.contains(&0)
                || gp.relu_signature() != base_sig
                || gm.relu_signature() != base_sig;
            let rel_err = relative_error(a, numeric);
            if kink {
                report.notes.push(format!(
                    "param {pi} index {idx}: non-differentiable point skipped"
                ));
            } else {
                report.max_rel_err = report.max_rel_err.max(rel_err);
            }
            report.entries.push(GradEntry {
                param: pi,
                index: idx,
                analytic: a,
                numeric,
                rel_err,
                skipped: kink,
            });
        }
    }
    report.passed = report.max_rel_err <= tol;
    Ok(report)
}
