use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Per-parameter outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_grad: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

/// Relative error with a small absolute floor so that exact zeros on both
/// sides compare equal.
fn rel_error(analytic: f64, numeric: f64) -> f64 {
    const FLOOR: f64 = 1e-6;
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Compare reverse-mode gradients of the scalar built by `build` against
/// central finite differences with step `h`.
///
/// At most `max_entries` values of each parameter are perturbed (evenly spaced
/// through the tensor); pass `usize::MAX` to check everything.
pub fn grad_check<F>(store: &ParamStore, build: F, h: f64, tolerance: f64, max_entries: usize) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = build(&mut g, store)?;
    if g.value(out).len() != 1 {
        return Err(Error::usage(format!(
            "grad_check needs a scalar output, got shape {:?}",
            g.shape(out)
        )));
    }
    let grads = g.backward(out)?;
    let mut analytic = store.clone();
    analytic.zero_grads();
    analytic.accumulate(&g, &grads);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = build(&mut g, s)?;
        Ok(g.scalar(out))
    };

    let mut probe = store.clone();
    let mut entries = Vec::new();
    for id in store.ids() {
        let n = store.value(id).len();
        let stride = n.div_ceil(max_entries.max(1)).max(1);
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        let mut checked = 0;
        for i in (0..n).step_by(stride) {
            let orig = store.value(id).data()[i];
            probe.value_mut(id).data_mut()[i] = orig + h;
            let plus = eval(&probe)?;
            probe.value_mut(id).data_mut()[i] = orig - h;
            let minus = eval(&probe)?;
            probe.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.grad(id).data()[i];
            max_rel = max_rel.max(rel_error(a, numeric));
            max_abs = max_abs.max(a.abs());
            checked += 1;
        }
        entries.push(GradCheckEntry {
            name: store.get(id).name.clone(),
            checked,
            max_rel_error: max_rel,
            max_abs_grad: max_abs,
        });
    }
    Ok(GradCheckReport { entries, tolerance })
}
