//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::arg_err;
use crate::params::ParamStore;
use crate::{Real, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    /// Number of steps taken.
    pub t: u64,
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
}

impl<T: Real> Adam<T> {
    /// Zero moments for every tensor of `params` accepted by `keep`.
    pub fn new(params: &ParamStore<T>, config: AdamConfig, keep: impl Fn(&str) -> bool) -> Self {
        let mut m = ParamStore::new();
        for (name, v) in params.iter().filter(|(n, _)| keep(n)) {
            m.insert(name.clone(), ndarray::ArrayD::zeros(v.raw_dim()));
        }
        Self {
            config,
            t: 0,
            v: m.clone(),
            m,
        }
    }

    /// Applies one update; tensors without a moment slot are left alone and
    /// a missing gradient counts as zero.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamStore<T>, lr: f64) -> Result<()> {
        self.t += 1;
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let (b1t, b2t, eps) = (T::lit(b1), T::lit(b2), T::lit(self.config.eps));
        let (step, c2t) = (T::lit(lr / c1), T::lit(c2));
        let names: Vec<String> = self.m.names().cloned().collect();
        for name in names {
            let p = params
                .get_mut(&name)
                .ok_or_else(|| arg_err(format!("optimizer tracks unknown tensor `{name}`")))?;
            let m = self.m.get_mut(&name).expect("moment slot");
            let v = self.v.get_mut(&name).expect("moment slot");
            match grads.get(&name) {
                Some(g) => {
                    ndarray::Zip::from(&mut *m).and(&mut *v).and(g).for_each(|m, v, &g| {
                        *m = b1t * *m + (T::one() - b1t) * g;
                        *v = b2t * *v + (T::one() - b2t) * g * g;
                    });
                }
                None => {
                    m.mapv_inplace(|x| b1t * x);
                    v.mapv_inplace(|x| b2t * x);
                }
            }
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= step * m / ((v / c2t).sqrt() + eps);
            });
        }
        Ok(())
    }
}
