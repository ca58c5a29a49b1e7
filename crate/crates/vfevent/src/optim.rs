//! Adam optimizer over named flat parameter arrays.

use std::collections::BTreeMap;

use crate::params::GradMap;

pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    /// One update over the given parameter arrays. Parameters without an
    /// entry in `grads` are left untouched (bitwise).
    pub fn step(&mut self, params: &mut [(String, &mut Vec<f64>)], grads: &GradMap) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, param) in params.iter_mut() {
            let Some(g) = grads.get(name.as_str()) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; param.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; param.len()]);
            for i in 0..param.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                param[i] -= self.learning_rate * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descends_a_quadratic() {
        // f(x) = (x - 3)^2, grad = 2(x - 3)
        let mut x = vec![0.0];
        let mut adam = Adam::new(0.1);
        for _ in 0..500 {
            let mut grads = GradMap::new();
            grads.insert("x".into(), vec![2.0 * (x[0] - 3.0)]);
            let mut params = [("x".to_string(), &mut x)];
            adam.step(&mut params, &grads);
        }
        assert!((x[0] - 3.0).abs() < 1e-2, "x = {}", x[0]);
    }

    #[test]
    fn missing_grad_leaves_param_bitwise() {
        let mut x = vec![0.123456789];
        let before = x.clone();
        let mut adam = Adam::new(0.1);
        let grads = GradMap::new();
        let mut params = [("x".to_string(), &mut x)];
        adam.step(&mut params, &grads);
        assert_eq!(x, before);
    }
}
