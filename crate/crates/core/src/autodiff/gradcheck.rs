use crate::autodiff::{AutodiffError, Graph, NonFinitePolicy, ParamId, ParamStore, Var};
use crate::scalar::Scalar;

/// How `stop_gradient` nodes behave while the loss is re-evaluated at
/// perturbed parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopGradMode {
    /// Stop-gradient outputs are frozen at their unperturbed values, so the
    /// numerical derivative matches what backward differentiates.
    Replay,
    /// Stop-gradient nodes recompute from their live inputs. Numerical
    /// derivatives then include paths that backward deliberately blocks.
    Live,
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step, in `[1e-5, 1e-3]` for 32-bit work; smaller
    /// steps are allowed in 64-bit mode.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Denominator floor for the relative error, so entries whose true
    /// gradient is ~0 are compared absolutely.
    pub floor: f64,
    pub stop_grad: StopGradMode,
    /// Flat element indices to check; all elements when `None`.
    pub indices: Option<Vec<usize>>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-8,
            stop_grad: StopGradMode::Replay,
            indices: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub param: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub passed: bool,
}

/// Compares the reverse-mode gradient of `build` with respect to `param`
/// against central finite differences of the same builder.
pub fn finite_diff_check<T, F>(
    build: F,
    store: &ParamStore<T>,
    param: ParamId,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, AutodiffError>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var, AutodiffError>,
{
    // Non-finite checks must not mask a bad perturbation as a clamp.
    let policy = NonFinitePolicy::Error;
    let mut graph = Graph::with_policy(policy);
    let loss = build(&mut graph, store)?;
    let grads = graph.backward(loss)?;
    let shape = store.get(param).shape();
    let analytic = grads
        .param(param)
        .cloned()
        .unwrap_or_else(|| crate::autodiff::Tensor::zeros(shape[0], shape[1]));
    let trace = graph.stop_gradient_trace().to_vec();

    let eval = |s: &ParamStore<T>| -> Result<f64, AutodiffError> {
        let mut g = match opts.stop_grad {
            StopGradMode::Replay => Graph::replaying(trace.clone(), policy),
            StopGradMode::Live => Graph::with_policy(policy),
        };
        let out = build(&mut g, s)?;
        Ok(g.value(out).item().as_f64())
    };

    let indices: Vec<usize> = match &opts.indices {
        Some(ix) => ix.clone(),
        None => (0..analytic.len()).collect(),
    };
    let mut perturbed = store.clone();
    let mut report = GradCheckReport {
        param: store.name(param).to_string(),
        checked: 0,
        max_rel_error: 0.0,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        passed: true,
    };
    for &i in &indices {
        let base = store.get(param).data()[i];
        let h = T::lit(opts.step);
        perturbed.get_mut(param).data_mut()[i] = base + h;
        let plus = eval(&perturbed)?;
        perturbed.get_mut(param).data_mut()[i] = base - h;
        let minus = eval(&perturbed)?;
        perturbed.get_mut(param).data_mut()[i] = base;
        // Use the step actually representable in T.
        let h_eff = ((base + h).as_f64() - (base - h).as_f64()) / 2.0;
        let numeric = (plus - minus) / (2.0 * h_eff);
        let a = analytic.data()[i].as_f64();
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
        report.checked += 1;
        if rel > report.max_rel_error || report.checked == 1 {
            report.max_rel_error = rel;
            report.worst_index = i;
            report.worst_analytic = a;
            report.worst_numeric = numeric;
        }
    }
    report.passed = report.max_rel_error <= opts.tolerance;
    Ok(report)
}
