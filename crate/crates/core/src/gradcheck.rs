//! Central finite-difference checks of graph gradients.

use std::collections::BTreeMap;

use crate::autograd::{Graph, Mat, Var};
use crate::params::ParamStore;

/// Per-group comparison of analytic and numerical gradients.
#[derive(Clone, Debug)]
pub struct GroupError {
    pub group: String,
    pub checked: usize,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over the checked entries.
    pub relative: f64,
    pub analytic_norm: f64,
}

/// Group name of a parameter: its name without the final `.weight`/`.bias`-style suffix.
pub fn group_of(name: &str) -> &str {
    name.rsplit_once('.').map_or(name, |(head, _)| head)
}

/// Compares analytic parameter gradients of the scalar built by `build` with
/// central differences, checking up to `per_param` entries of every parameter.
/// `build` must be deterministic. Stop-gradient values are held at their
/// unperturbed values while differencing.
pub fn check_parameters<F>(
    store: &mut ParamStore,
    per_param: usize,
    eps: f64,
    build: F,
) -> Vec<GroupError>
where
    F: Fn(&mut Graph) -> Var,
{
    let (analytic, frozen) = {
        let mut g = Graph::new(store);
        let out = build(&mut g);
        let frozen = g.detached_values().to_vec();
        (g.backward(out).into_params(), frozen)
    };
    let ids: Vec<_> = store.ids().collect();
    let mut acc: BTreeMap<String, (usize, f64, f64, f64)> = BTreeMap::new();
    for id in ids {
        let (rows, cols) = store.get(id).dim();
        let n = rows * cols;
        let stride = (n / per_param.max(1)).max(1);
        let group = group_of(store.name(id)).to_string();
        for flat in (0..n).step_by(stride).take(per_param) {
            let (r, c) = (flat / cols, flat % cols);
            let original = store.get(id)[[r, c]];
            store.get_mut(id)[[r, c]] = original + eps;
            let plus = eval(store, &frozen, &build);
            store.get_mut(id)[[r, c]] = original - eps;
            let minus = eval(store, &frozen, &build);
            store.get_mut(id)[[r, c]] = original;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(&id).map_or(0.0, |m| m[[r, c]]);
            let e = acc.entry(group.clone()).or_default();
            e.0 += 1;
            e.1 += (a - numeric).powi(2);
            e.2 += a * a;
            e.3 += numeric * numeric;
        }
    }
    acc.into_iter()
        .map(|(group, (checked, diff, an, nu))| {
            let scale = an.sqrt().max(nu.sqrt());
            GroupError {
                group,
                checked,
                relative: if scale == 0.0 {
                    0.0
                } else {
                    diff.sqrt() / scale
                },
                analytic_norm: an.sqrt(),
            }
        })
        .collect()
}

fn eval<F: Fn(&mut Graph) -> Var>(store: &ParamStore, frozen: &[Mat], build: &F) -> f64 {
    let mut g = Graph::with_frozen_detach(store, frozen.to_vec());
    let out = build(&mut g);
    g.scalar(out)
}
