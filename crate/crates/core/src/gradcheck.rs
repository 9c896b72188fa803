//! Central finite-difference checks of reverse-mode gradients.
//!
//! The numerical side only ever evaluates the forward function, so it stays
//! independent of every backward rule it verifies.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Binder, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over checked entries.
    pub rel_error: f64,
    pub analytic_norm: f64,
    pub checked: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Entries sampled per tensor; smaller tensors are checked exhaustively.
    pub max_entries: usize,
    pub seed: u64,
    /// A tensor whose gradient norm is below this fraction of the largest
    /// norm in the check is measured against that floor instead of its own
    /// norm. Gradients that vanish identically (for example a key bias under
    /// softmax) would otherwise compare pure rounding noise.
    pub vanishing: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-5, max_entries: 24, seed: 7, vanishing: 1e-4 }
    }
}

impl GradCheckOptions {
    /// Step sizes that balance truncation and rounding error per precision.
    pub fn for_scalar<T: Scalar>() -> Self {
        let step = if T::BYTES == 4 { 1e-2 } else { 1e-5 };
        GradCheckOptions { step, ..Default::default() }
    }
}

fn eval<T: Scalar, F>(store: &ParamStore<T>, f: &F) -> Result<f64>
where
    F: for<'g> Fn(&Binder<'g, T>) -> Result<Var<'g, T>>,
{
    let graph = Graph::new();
    let binder = Binder::new(&graph, store, false);
    let out = f(&binder)?;
    let v = out.value();
    if v.len() != 1 {
        return Err(Error::shape("gradcheck", "function must return a scalar"));
    }
    Ok(v.data()[0].to_f64_lossy())
}

/// Analytic gradient of `f` with respect to every entry of `store`.
pub fn analytic<T: Scalar, F>(store: &ParamStore<T>, f: &F) -> Result<ParamStore<T>>
where
    F: for<'g> Fn(&Binder<'g, T>) -> Result<Var<'g, T>>,
{
    let graph = Graph::new();
    let binder = Binder::new(&graph, store, true);
    let out = f(&binder)?;
    let grads = graph.backward(out)?;
    Ok(binder.gradients(&grads))
}

/// Compares analytic and central-difference gradients for each named tensor
/// in `store` (all of them when `names` is empty).
pub fn check<T: Scalar, F>(store: &ParamStore<T>, names: &[&str], opts: &GradCheckOptions, f: F) -> Result<Vec<GradCheck>>
where
    F: for<'g> Fn(&Binder<'g, T>) -> Result<Var<'g, T>>,
{
    let grads = analytic(store, &f)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut reports = Vec::new();
    let mut raw = Vec::new();
    let selected: Vec<String> = if names.is_empty() {
        store.names().map(str::to_string).collect()
    } else {
        names.iter().map(|s| s.to_string()).collect()
    };
    let mut work = store.clone();
    for name in selected {
        let n = store.require(&name)?.len();
        let indices: Vec<usize> = if n <= opts.max_entries {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, opts.max_entries).into_vec();
            v.sort_unstable();
            v
        };
        let g = grads.require(&name)?;
        let (mut diff2, mut an2, mut nu2) = (0.0, 0.0, 0.0);
        for &i in &indices {
            let orig = store.require(&name)?.data()[i];
            let h = T::from_f64_lossy(opts.step);
            work.get_mut(&name).unwrap().data_mut()[i] = orig + h;
            let up = eval(&work, &f)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig - h;
            let down = eval(&work, &f)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig;
            let actual_h = ((orig + h) - (orig - h)).to_f64_lossy();
            let numeric = (up - down) / actual_h;
            let a = g.data()[i].to_f64_lossy();
            diff2 += (a - numeric) * (a - numeric);
            an2 += a * a;
            nu2 += numeric * numeric;
        }
        raw.push((name, diff2.sqrt(), an2.sqrt(), nu2.sqrt(), indices.len()));
    }
    let largest = raw.iter().map(|r| r.2.max(r.3)).fold(0.0, f64::max);
    let floor = largest * opts.vanishing;
    for (name, diff, an, nu, checked) in raw {
        let denom = an.max(nu).max(floor);
        let rel_error = if denom == 0.0 { 0.0 } else { diff / denom };
        reports.push(GradCheck { name, rel_error, analytic_norm: an, checked });
    }
    Ok(reports)
}

/// Largest relative error among reports.
pub fn worst(reports: &[GradCheck]) -> f64 {
    reports.iter().map(|r| r.rel_error).fold(0.0, f64::max)
}
