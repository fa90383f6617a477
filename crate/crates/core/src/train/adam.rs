use std::collections::BTreeMap;

use crate::policy::{Gradients, PolicyParams, PrefixBank};
use crate::seqcore::AttributeId;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Debug, Clone, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Moments {
    fn new(n: usize) -> Self {
        Moments { m: vec![0.0; n], v: vec![0.0; n] }
    }

    fn update(&mut self, x: &mut [f64], g: Option<&[f64]>, lr: f64, c1: f64, c2: f64) {
        for i in 0..x.len() {
            let gi = g.map_or(0.0, |g| g[i]);
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * gi;
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * gi * gi;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            x[i] -= lr * mh / (vh.sqrt() + EPS);
        }
    }
}

/// Adam with a constant learning rate over the trunk and every prefix in the
/// bank. Prefixes without a gradient this step see a zero gradient.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    t: i32,
    trunk: Moments,
    prefixes: BTreeMap<AttributeId, Moments>,
}

impl Adam {
    pub fn new(lr: f64, params: &PolicyParams, bank: &PrefixBank) -> Self {
        Adam {
            lr,
            t: 0,
            trunk: Moments::new(params.values.len()),
            prefixes: bank
                .prefixes
                .iter()
                .map(|(a, v)| (a.clone(), Moments::new(v.len())))
                .collect(),
        }
    }

    pub fn step(&mut self, params: &mut PolicyParams, bank: &mut PrefixBank, grads: &Gradients) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        self.trunk.update(&mut params.values, Some(&grads.trunk), self.lr, c1, c2);
        for (attr, values) in bank.prefixes.iter_mut() {
            let mom = self
                .prefixes
                .entry(attr.clone())
                .or_insert_with(|| Moments::new(values.len()));
            let g = grads.prefixes.get(attr).map(Vec::as_slice);
            mom.update(values, g, self.lr, c1, c2);
        }
    }
}
