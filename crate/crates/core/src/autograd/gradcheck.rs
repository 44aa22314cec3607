//! Checks single-precision tape gradients against double-precision finite
//! differences of the same function.

use std::collections::BTreeMap;

use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Graph, Var};
use crate::params::{Bound, ParamStore};
use crate::{Real, Result};

/// A scalar function of named tensors, evaluable at any precision.
pub trait ScalarFn {
    fn eval<T: Real>(&self, g: &mut Graph<T>, p: &Bound) -> Result<Var>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupCheck {
    pub group: String,
    pub tensors: usize,
    /// Directional derivative from the f32 tape.
    pub analytic: f64,
    /// Same directional derivative by f64 central differences.
    pub numeric: f64,
    pub rel_err: f64,
}

fn value_at<F: ScalarFn>(f: &F, store: &ParamStore<f64>) -> Result<f64> {
    let mut g = Graph::new();
    let p = store.bind(&mut g, |_| false);
    let out = f.eval(&mut g, &p)?;
    Ok(g.value(out).sum())
}

/// Partitions the tensors of `store` with `group_of`; for each group compares
/// the f32 analytic derivative along a random unit direction (spanning all
/// tensors of the group) with a fourth-order f64 difference quotient.
///
/// Grouping matters for tensors whose true derivative is zero, where a
/// per-tensor relative error would only measure f32 round-off.
pub fn check_f32_against_f64<F, G>(store: &ParamStore<f64>, f: &F, group_of: G, seed: u64) -> Result<Vec<GroupCheck>>
where
    F: ScalarFn,
    G: Fn(&str) -> String,
{
    let single = store.cast::<f32>();
    let mut g = Graph::<f32>::new();
    let p = single.bind(&mut g, |_| true);
    let loss = f.eval(&mut g, &p)?;
    let grads = g.backward(loss);

    let mut groups: BTreeMap<String, Vec<&String>> = BTreeMap::new();
    for name in store.names() {
        groups.entry(group_of(name)).or_default().push(name);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-3;
    let mut out = Vec::with_capacity(groups.len());
    for (group, names) in groups {
        let mut dirs: Vec<ArrayD<f64>> = names
            .iter()
            .map(|n| {
                let shape = store.get(n).expect("listed tensor").raw_dim();
                ArrayD::from_shape_fn(shape, |_| StandardNormal.sample(&mut rng))
            })
            .collect();
        let norm = dirs.iter().map(|d| d.mapv(|v| v * v).sum()).sum::<f64>().sqrt();
        for d in &mut dirs {
            d.mapv_inplace(|v| v / norm);
        }

        let mut analytic = 0.0;
        for (n, d) in names.iter().zip(&dirs) {
            if let Some(gr) = grads.get(p.get(n)?) {
                analytic += gr.iter().zip(d.iter()).map(|(&a, &b)| f64::from(a) * b).sum::<f64>();
            }
        }
        let at = |t: f64| -> Result<f64> {
            let mut moved = store.clone();
            for (n, d) in names.iter().zip(&dirs) {
                moved.get_mut(n).expect("listed tensor").zip_mut_with(d, |v, &s| *v += t * s);
            }
            value_at(f, &moved)
        };
        let numeric = (8.0 * (at(h)? - at(-h)?) - (at(2.0 * h)? - at(-2.0 * h)?)) / (12.0 * h);
        out.push(GroupCheck {
            group,
            tensors: names.len(),
            analytic,
            numeric,
            rel_err: 0.0,
        });
    }
    let scale = out.iter().fold(0.0f64, |m, c| m.max(c.numeric.abs()));
    let floor = (1e-6 * scale).max(f64::MIN_POSITIVE);
    for c in &mut out {
        c.rel_err = (c.analytic - c.numeric).abs() / c.analytic.abs().max(c.numeric.abs()).max(floor);
    }
    Ok(out)
}

/// One group per tensor.
pub fn per_tensor(name: &str) -> String {
    name.to_string()
}

/// Groups by the first `depth` dot-separated components of the name.
pub fn by_prefix(depth: usize) -> impl Fn(&str) -> String {
    move |name| name.split('.').take(depth).collect::<Vec<_>>().join(".")
}
