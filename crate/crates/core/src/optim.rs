//! Adam with decoupled weight decay.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use crate::params::ParamSet;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.04,
        }
    }
}

/// First/second moment state per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T: Scalar> {
    pub cfg: OptimConfig,
    pub m: BTreeMap<String, ArrayD<T>>,
    pub v: BTreeMap<String, ArrayD<T>>,
    pub t: usize,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: OptimConfig) -> Self {
        AdamW {
            cfg,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    /// One update over all parameters with gradients. Decay is decoupled and
    /// skipped for one-dimensional parameters (biases, norm gains, centers of
    /// row vectors stored as `1 x d`).
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &BTreeMap<String, ArrayD<T>>, lr: f64) {
        self.t += 1;
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let one = T::one();
        let eps = T::from_f64(self.cfg.eps);
        let bias1 = T::from_f64(1.0 - self.cfg.beta1.powi(self.t as i32));
        let bias2 = T::from_f64(1.0 - self.cfg.beta2.powi(self.t as i32));
        let lr_t = T::from_f64(lr);
        for (name, grad) in grads {
            if !params.contains(name) {
                continue;
            }
            let decay_exempt = is_decay_exempt(name, grad.shape());
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            m.zip_mut_with(grad, |mv, &g| *mv = b1 * *mv + (one - b1) * g);
            v.zip_mut_with(grad, |vv, &g| *vv = b2 * *vv + (one - b2) * g * g);
            let p = params.get_mut(name);
            let wd = if decay_exempt {
                T::zero()
            } else {
                T::from_f64(self.cfg.weight_decay)
            };
            ndarray::Zip::from(&mut *p)
                .and(&*m)
                .and(&*v)
                .for_each(|pv, &mv, &vv| {
                    let m_hat = mv / bias1;
                    let v_hat = vv / bias2;
                    *pv = *pv - lr_t * (m_hat / (v_hat.sqrt() + eps) + wd * *pv);
                });
        }
    }
}

/// Biases, norm gains and other effectively one-dimensional parameters are
/// exempt from weight decay.
fn is_decay_exempt(_name: &str, shape: &[usize]) -> bool {
    shape.iter().filter(|&&s| s > 1).count() <= 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn moves_against_gradient() {
        let mut params: ParamSet<f64> = ParamSet::new();
        params.insert("layer/w", ArrayD::from_elem(IxDyn(&[2, 2]), 1.0));
        let mut grads = BTreeMap::new();
        grads.insert(
            "layer/w".to_string(),
            ArrayD::from_elem(IxDyn(&[2, 2]), 0.5),
        );
        let mut opt = AdamW::new(OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        });
        opt.step(&mut params, &grads, 0.1);
        assert!(params.get("layer/w").iter().all(|&x| x < 1.0));
    }

    #[test]
    fn zero_lr_leaves_params_fixed() {
        let mut params: ParamSet<f64> = ParamSet::new();
        params.insert("layer/w", ArrayD::from_elem(IxDyn(&[2, 2]), 1.0));
        let before = params.clone();
        let mut grads = BTreeMap::new();
        grads.insert(
            "layer/w".to_string(),
            ArrayD::from_elem(IxDyn(&[2, 2]), 0.5),
        );
        let mut opt = AdamW::new(OptimConfig::default());
        opt.step(&mut params, &grads, 0.0);
        assert_eq!(params, before);
    }

    #[test]
    fn exemptions() {
        assert!(is_decay_exempt("enc/patch/b", &[1, 8]));
        assert!(is_decay_exempt("enc/block0/ln1/g", &[1, 8]));
        assert!(is_decay_exempt("slots/mu", &[1, 8]));
        assert!(!is_decay_exempt("enc/patch/w", &[12, 8]));
        assert!(!is_decay_exempt("head/proto", &[16, 4]));
        assert!(!is_decay_exempt("enc/pos", &[65, 64]));
    }
}
