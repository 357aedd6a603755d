//! Central finite-difference verification of analytic gradients.

use serde::Serialize;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor of the relative error, so vanishing gradients compare absolutely.
    pub abs_floor: f64,
    /// Negative-control hook: perturbs the analytic gradient before comparison.
    pub corrupt_analytic: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-4,
            abs_floor: 1e-6,
            corrupt_analytic: false,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamError {
    pub name: String,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub per_parameter: Vec<ParamError>,
    pub max_rel_error: f64,
    pub worst_parameter: String,
    pub tolerance: f64,
    pub checked_scalars: usize,
    /// Scalars whose difference stencil straddled a relu/max-pool kink at every
    /// tried step size.
    pub excluded_scalars: usize,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval_loss<F>(store: &ParamStore<f64>, loss_fn: &mut F) -> Result<(f64, u64)>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new(store.training());
    let loss = loss_fn(&mut g, store)?;
    Ok((g.value(loss).item(), g.kink_signature()))
}

/// Step sizes tried in turn until the stencil stays on one smooth piece.
const STEP_SHRINK: [f64; 3] = [1.0, 0.1, 0.01];

/// Central difference at `x`, shrinking the step when either side crosses a
/// kink. `None` when every step crosses one.
fn central_difference(
    base_signature: u64,
    step: f64,
    mut eval: impl FnMut(f64) -> Result<(f64, u64)>,
) -> Result<Option<f64>> {
    for shrink in STEP_SHRINK {
        let h = step * shrink;
        let (plus, sp) = eval(h)?;
        let (minus, sm) = eval(-h)?;
        if sp == base_signature && sm == base_signature {
            return Ok(Some((plus - minus) / (2.0 * h)));
        }
    }
    Ok(None)
}

/// Compares the analytic gradient of `loss_fn` w.r.t. every scalar parameter in
/// `store` against central finite differences.
///
/// `loss_fn` must not mutate anything it closes over between calls: it is
/// evaluated `2 * num_scalars + 1` times and must be a pure function of the store.
pub fn grad_check<F>(
    store: &ParamStore<f64>,
    mut loss_fn: F,
    tolerance: f64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut analytic = store.clone();
    let base_signature = {
        let mut g = Graph::new(store.training());
        let loss = loss_fn(&mut g, store)?;
        g.backward_into(loss, &mut analytic)?;
        g.kink_signature()
    };
    if opts.corrupt_analytic {
        let first = analytic.names().next().map(str::to_string);
        if let Some(name) = first {
            let grad = analytic.grad_mut(&name).expect("present");
            for v in grad.data_mut() {
                *v = *v * 1.5 + 1e-2;
            }
        }
    }

    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut probe = store.clone();
    let mut per_parameter = Vec::with_capacity(names.len());
    let mut checked = 0;
    let mut excluded = 0;
    for name in &names {
        let n = store.get(name).expect("present").numel();
        let mut worst = 0.0f64;
        for i in 0..n {
            let orig = store.get(name).expect("present").data()[i];
            let numeric = central_difference(base_signature, opts.step, |h| {
                probe.get_mut(name).expect("present").data_mut()[i] = orig + h;
                let r = eval_loss(&probe, &mut loss_fn);
                probe.get_mut(name).expect("present").data_mut()[i] = orig;
                r
            })?;
            let Some(numeric) = numeric else {
                excluded += 1;
                continue;
            };
            let a = analytic.grad(name).expect("present").data()[i];
            worst = worst.max(relative_error(a, numeric, opts.abs_floor));
            checked += 1;
        }
        per_parameter.push(ParamError {
            name: name.clone(),
            max_rel_error: worst,
        });
    }
    let (worst_parameter, max_rel_error) =
        per_parameter
            .iter()
            .fold((String::new(), 0.0f64), |(wn, we), p| {
                if p.max_rel_error > we || wn.is_empty() {
                    (p.name.clone(), p.max_rel_error)
                } else {
                    (wn, we)
                }
            });
    Ok(GradCheckReport {
        passed: max_rel_error <= tolerance,
        per_parameter,
        max_rel_error,
        worst_parameter,
        tolerance,
        checked_scalars: checked,
        excluded_scalars: excluded,
    })
}

/// Same comparison as [`grad_check`] but w.r.t. free input tensors instead of
/// stored parameters. Returns the maximum relative error over all scalars.
pub fn grad_check_inputs<F>(
    inputs: &[Tensor<f64>],
    training: bool,
    mut build: F,
    opts: &GradCheckOptions,
) -> Result<f64>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut run = |xs: &[Tensor<f64>]| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut g = Graph::new(training);
        let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone())).collect();
        let loss = build(&mut g, &vars)?;
        let grads = g.backward(loss)?;
        let gs = vars
            .iter()
            .zip(xs)
            .map(|(v, x)| {
                grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(x.shape()))
            })
            .collect();
        Ok((g.value(loss).item(), gs))
    };
    let (_, analytic) = run(inputs)?;
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    let mut worst = 0.0f64;
    for t in 0..inputs.len() {
        for i in 0..inputs[t].numel() {
            let orig = inputs[t].data()[i];
            probe[t].data_mut()[i] = orig + opts.step;
            let (plus, _) = run(&probe)?;
            probe[t].data_mut()[i] = orig - opts.step;
            let (minus, _) = run(&probe)?;
            probe[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            worst = worst.max(relative_error(
                analytic[t].data()[i],
                numeric,
                opts.abs_floor,
            ));
        }
    }
    Ok(worst)
}
