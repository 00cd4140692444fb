//! Central-difference gradient oracle.
//!
//! The checker evaluates everything in `f64` and compares the analytic
//! gradient from [`Graph::backward`] against `(f(x+eps) - f(x-eps)) / 2eps`
//! coordinate by coordinate.

use super::{BackwardFault, Graph, NodeId, ParamStore, Rng, Tensor};
use crate::error::Result;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Smallest denominator of the relative error.
pub const MIN_SCALE: f64 = 1e-8;

/// Roundoff noise of a central difference, in units of `machine_eps·|f| / eps`.
/// Each evaluation of `f` sums thousands of rounded terms, so the observed
/// noise is a few units rather than one.
pub const NOISE_UNITS: f64 = 10.0;

/// A gradient has to exceed the roundoff noise by this factor before it can
/// be resolved to a relative error of 1e-4. Smaller gradients are compared
/// against that scale instead of their own magnitude.
pub const RESOLVABLE: f64 = 1e4;

/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_above(analytic, numeric, MIN_SCALE)
}

/// Relative error whose denominator never drops below `scale`.
pub fn relative_error_above(analytic: f64, numeric: f64, scale: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(scale)
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `name[index]` of the coordinate with the largest error.
    pub worst: String,
    pub coords_checked: usize,
    /// Denominator floor of this run, from the magnitude of `f`.
    pub scale: f64,
}

impl GradCheckReport {
    fn record(&mut self, name: &str, index: usize, analytic: f64, numeric: f64) {
        let e = relative_error_above(analytic, numeric, self.scale);
        self.coords_checked += 1;
        if e > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = self.max_rel_error.max(e);
            self.worst = format!("{name}[{index}] analytic={analytic:.6e} numeric={numeric:.6e}");
        }
    }
}

/// Max relative error of the gradient of the scalar `f(x)` with respect to `x`.
pub fn grad_check<Fun>(f: Fun, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    Fun: Fn(&mut Graph<'_, f64>, NodeId) -> Result<NodeId>,
{
    let store = ParamStore::new();
    let report = GradCheck {
        eps,
        ..GradCheck::default()
    }
    .run(&store, &[("x", x.clone())], false, |g, ids| f(g, ids[0]))?;
    Ok(report.max_rel_error)
}

/// Configurable checker over inputs and, optionally, bound parameters.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub eps: f64,
    /// Sample at most this many coordinates per tensor; `None` checks all.
    pub max_coords: Option<usize>,
    pub seed: u64,
    pub fault: Option<BackwardFault>,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            eps: DEFAULT_EPS,
            max_coords: None,
            seed: 0,
            fault: None,
        }
    }
}

impl GradCheck {
    fn coords(&self, n: usize, rng: &mut Rng) -> Vec<usize> {
        match self.max_coords {
            Some(k) if k < n => {
                let mut all: Vec<usize> = (0..n).collect();
                rng.shuffle(&mut all);
                all.truncate(k);
                all.sort_unstable();
                all
            }
            _ => (0..n).collect(),
        }
    }

    /// Checks `f`, which maps the input nodes (bound in order) to a scalar.
    pub fn run<Fun>(
        &self,
        params: &ParamStore<f64>,
        inputs: &[(&str, Tensor<f64>)],
        check_params: bool,
        f: Fun,
    ) -> Result<GradCheckReport>
    where
        Fun: Fn(&mut Graph<'_, f64>, &[NodeId]) -> Result<NodeId>,
    {
        // analytic pass
        let (value, input_grads, param_grads) = {
            let mut g = Graph::with_params(params);
            g.inject_fault(self.fault);
            let ids: Vec<NodeId> = inputs.iter().map(|(_, t)| g.variable(t.clone())).collect();
            let out = f(&mut g, &ids)?;
            let value = g.value(out).item();
            g.backward(out)?;
            let ig: Vec<Option<Tensor<f64>>> = ids.iter().map(|&id| g.grad(id)).collect();
            (value, ig, g.param_grads())
        };

        let eval = |store: &ParamStore<f64>, xs: &[Tensor<f64>]| -> Result<f64> {
            let mut g = Graph::with_params(store);
            let ids: Vec<NodeId> = xs.iter().map(|t| g.input(t.clone())).collect();
            let out = f(&mut g, &ids)?;
            Ok(g.value(out).item())
        };

        let mut rng = Rng::new(self.seed);
        let mut report = GradCheckReport {
            scale: (RESOLVABLE * NOISE_UNITS * f64::EPSILON * value.abs() / self.eps).max(MIN_SCALE),
            ..GradCheckReport::default()
        };
        let mut xs: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
        for (k, (name, t)) in inputs.iter().enumerate() {
            for j in self.coords(t.numel(), &mut rng) {
                let orig = xs[k].data()[j];
                xs[k].data_mut()[j] = orig + self.eps;
                let fp = eval(params, &xs)?;
                xs[k].data_mut()[j] = orig - self.eps;
                let fm = eval(params, &xs)?;
                xs[k].data_mut()[j] = orig;
                let numeric = (fp - fm) / (2.0 * self.eps);
                let analytic = input_grads[k].as_ref().map_or(0.0, |g| g.data()[j]);
                report.record(name, j, analytic, numeric);
            }
        }

        if check_params {
            let mut work = params.clone();
            for pid in params.ids() {
                let analytic_grad = param_grads.iter().find(|(p, _)| *p == pid).map(|(_, g)| g);
                let n = params.value(pid).numel();
                for j in self.coords(n, &mut rng) {
                    let orig = work.value(pid).data()[j];
                    work.value_mut(pid).data_mut()[j] = orig + self.eps;
                    let fp = eval(&work, &xs)?;
                    work.value_mut(pid).data_mut()[j] = orig - self.eps;
                    let fm = eval(&work, &xs)?;
                    work.value_mut(pid).data_mut()[j] = orig;
                    let numeric = (fp - fm) / (2.0 * self.eps);
                    let analytic = analytic_grad.map_or(0.0, |g| g[j]);
                    report.record(params.name(pid), j, analytic, numeric);
                }
            }
        }
        Ok(report)
    }
}
