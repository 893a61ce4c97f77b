//! Central finite-difference verification of tape gradients, run in `f64`.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{Graph, ParameterStore, Result, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(param, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic gradients of `loss_fn` against central differences with
/// step `h` on up to `max_coords` coordinates drawn uniformly from all
/// parameters in `store`.
pub fn check_gradients<R, F>(
    store: &ParameterStore<f64>,
    loss_fn: F,
    max_coords: usize,
    h: f64,
    floor: f64,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    R: Rng + ?Sized,
    F: Fn(&mut Graph<f64>, &ParameterStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    g.backward(loss)?;
    let mut analytic = store.clone();
    analytic.zero_grads();
    analytic.accumulate_grads(&g);

    let mut coords: Vec<(String, usize)> = store
        .iter()
        .flat_map(|(name, t)| (0..t.numel()).map(move |i| (name.to_string(), i)))
        .collect();
    coords.shuffle(rng);
    coords.truncate(max_coords);

    let eval = |s: &ParameterStore<f64>| -> Result<f64> {
        let mut g = Graph::inference();
        let l = loss_fn(&mut g, s)?;
        Ok(g.value(l).item())
    };

    let mut probe = store.clone();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for (name, i) in coords {
        let orig = probe.get(&name).unwrap().data()[i];
        probe.get_mut(&name).unwrap().data_mut()[i] = orig + h;
        let plus = eval(&probe)?;
        probe.get_mut(&name).unwrap().data_mut()[i] = orig - h;
        let minus = eval(&probe)?;
        probe.get_mut(&name).unwrap().data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.grad(&name).unwrap().data()[i];
        let err = relative_error(a, numeric, floor);
        report.checked += 1;
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((name.clone(), i, a, numeric));
        }
    }
    Ok(report)
}
