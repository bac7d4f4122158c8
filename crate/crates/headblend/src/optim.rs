//! Adam with bias correction, operating on named parameter tensors.

use std::collections::BTreeMap;

use crate::model::ModelParams;
use crate::numerics::Real;

pub struct Adam<R: Real> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Vec<R>>,
    v: BTreeMap<String, Vec<R>>,
}

impl<R: Real> Adam<R> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update over the provided gradients; parameters without a gradient
    /// entry are untouched and their moments do not advance.
    pub fn step(&mut self, params: &mut ModelParams<R>, grads: &BTreeMap<String, Vec<R>>) {
        self.t += 1;
        let b1 = R::from_f64(self.beta1);
        let b2 = R::from_f64(self.beta2);
        let one_m_b1 = R::ONE - b1;
        let one_m_b2 = R::ONE - b2;
        let corr1 = R::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let corr2 = R::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let lr = R::from_f64(self.lr);
        let eps = R::from_f64(self.eps);

        for (name, g) in grads {
            let p = params
                .entries
                .get_mut(name)
                .unwrap_or_else(|| panic!("gradient for unknown parameter {name}"));
            assert_eq!(p.data.len(), g.len(), "gradient shape for {name}");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![R::ZERO; g.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![R::ZERO; g.len()]);
            for i in 0..g.len() {
                m[i] = b1 * m[i] + one_m_b1 * g[i];
                v[i] = b2 * v[i] + one_m_b2 * g[i] * g[i];
                let m_hat = m[i] / corr1;
                let v_hat = v[i] / corr2;
                p.data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn adam_descends_a_quadratic() {
        // Minimize sum(p^2) over one real tensor embedded in ModelParams.
        let cfg = ModelConfig {
            resolution: 16,
            channels: 8,
            patch: 4,
            fpat_dim: 8,
        };
        let mut params = ModelParams::<f64>::init_random_all(&cfg, 1).unwrap();
        let name = "col.wq".to_string();
        let mut adam = Adam::new(0.05, 0.9, 0.999, 1e-8);
        let value = |p: &ModelParams<f64>| -> f64 {
            p.entries[&name].data.iter().map(|x| x * x).sum()
        };
        let start = value(&params);
        for _ in 0..200 {
            let g: Vec<f64> = params.entries[&name].data.iter().map(|x| 2.0 * x).collect();
            let mut grads = BTreeMap::new();
            grads.insert(name.clone(), g);
            adam.step(&mut params, &grads);
        }
        let end = value(&params);
        assert!(end < 0.01 * start, "{start} -> {end}");
    }
}
