//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{rng_stream, ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Check at most this many coordinates per parameter, sampled with
    /// `seed`. `None` checks every coordinate.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-5,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat coordinate of the worst disagreement.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval<F>(f: &mut F, store: &ParamStore) -> Result<f64>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let l = f(&mut g, store)?;
    Ok(g.value(l).item())
}

/// Compares the analytic gradient of the scalar built by `f` against
/// central differences for every parameter in `store`.
pub fn grad_check<F>(store: &mut ParamStore, mut f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    store.zero_grad();
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    g.backward_into(loss, store)?;

    let mut rng = rng_stream(opts.seed, 0x6772_6164);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let n = store.value(id).numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for c in coords {
            let analytic = store.grad(id).data()[c];
            let orig = store.value(id).data()[c];
            store.value_mut(id).data_mut()[c] = orig + opts.h;
            let plus = eval(&mut f, store);
            store.value_mut(id).data_mut()[c] = orig - opts.h;
            let minus = eval(&mut f, store);
            store.value_mut(id).data_mut()[c] = orig;
            let numeric = (plus? - minus?) / (2.0 * opts.h);

            let name = &store.get(id).name;
            if !analytic.is_finite() {
                return Err(Error::NonFiniteGradient {
                    param: format!("{name}[{c}]"),
                    which: "analytic",
                });
            }
            if !numeric.is_finite() {
                return Err(Error::NonFiniteGradient {
                    param: format!("{name}[{c}]"),
                    which: "numeric",
                });
            }
            let rel = relative_error(analytic, numeric);
            report.coords_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), c));
            }
        }
    }
    Ok(report)
}
