//! Rectified Adam with the variance-rectification fallback: while the
//! rectification term rho_t stays at or below 4 the update is plain
//! bias-corrected momentum, afterwards the adaptive step with the
//! rectification multiplier kicks in.

use std::collections::BTreeMap;

use crate::model::ParamStore;
use crate::ndgrad::{NdError, Scalar};

/// Moment-decay and stabilization constants.
#[derive(Debug, Clone, Copy)]
pub struct RAdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for RAdamHyper {
    fn default() -> Self {
        RAdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// RAdam optimizer state: per-parameter first/second moments plus the shared
/// step counter.
pub struct RAdam {
    hyper: RAdamHyper,
    moments: BTreeMap<String, Moments>,
    step: u64,
    skipped: u64,
}

impl RAdam {
    pub fn new(hyper: RAdamHyper) -> RAdam {
        RAdam { hyper, moments: BTreeMap::new(), step: 0, skipped: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Steps skipped because of non-finite gradients.
    pub fn skipped_steps(&self) -> u64 {
        self.skipped
    }

    /// The rectification term rho_t for a given step (1-based).
    pub fn rho(hyper: &RAdamHyper, t: u64) -> f64 {
        let rho_inf = 2.0 / (1.0 - hyper.beta2) - 1.0;
        let b2t = hyper.beta2.powi(t as i32);
        rho_inf - 2.0 * t as f64 * b2t / (1.0 - b2t)
    }

    /// Applies one update to every parameter named in `grads`. Returns false
    /// (and leaves all state untouched) when any gradient is non-finite.
    pub fn step<T: Scalar>(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &BTreeMap<String, Vec<f64>>,
        lr: f64,
    ) -> Result<bool, NdError> {
        for (name, g) in grads {
            let p = store.param(name).map_err(|_| {
                NdError::Invalid(format!("optimizer got gradient for unknown parameter {name}"))
            })?;
            if p.numel() != g.len() {
                return Err(NdError::Invalid(format!(
                    "gradient size {} does not match parameter {name} ({})",
                    g.len(),
                    p.numel()
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                self.skipped += 1;
                return Ok(false);
            }
        }

        self.step += 1;
        let t = self.step;
        let h = self.hyper;
        let bias1 = 1.0 - h.beta1.powi(t as i32);
        let bias2 = 1.0 - h.beta2.powi(t as i32);
        let rho_inf = 2.0 / (1.0 - h.beta2) - 1.0;
        let rho_t = Self::rho(&h, t);
        let rect = if rho_t > 4.0 {
            Some(
                (((rho_t - 4.0) * (rho_t - 2.0) * rho_inf)
                    / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
                    .sqrt(),
            )
        } else {
            None
        };

        for (name, g) in grads {
            let p = store.param_mut(name).expect("validated above");
            let n = p.numel();
            let mom = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| Moments { m: vec![0.0; n], v: vec![0.0; n] });
            if mom.m.len() != n {
                return Err(NdError::Invalid(format!("moment shape drifted for {name}")));
            }
            let data = p.data_mut();
            for i in 0..n {
                let gi = g[i];
                mom.m[i] = h.beta1 * mom.m[i] + (1.0 - h.beta1) * gi;
                mom.v[i] = h.beta2 * mom.v[i] + (1.0 - h.beta2) * gi * gi;
                let m_hat = mom.m[i] / bias1;
                let delta = match rect {
                    Some(r) => {
                        let v_hat = (mom.v[i] / bias2).sqrt() + h.eps;
                        lr * r * m_hat / v_hat
                    }
                    None => lr * m_hat,
                };
                data[i] = T::from_f64(data[i].to_f64() - delta);
            }
        }
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::Array;

    fn scalar_store(w: f64) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        store.insert_param("w", Array::scalar(w));
        store
    }

    fn grad_map(g: f64) -> BTreeMap<String, Vec<f64>> {
        let mut map = BTreeMap::new();
        map.insert("w".to_string(), vec![g]);
        map
    }

    #[test]
    fn rho_trace_crosses_threshold_at_step_five() {
        let h = RAdamHyper::default();
        assert!((RAdam::rho(&h, 1) - 1.0).abs() < 1e-9);
        assert!((RAdam::rho(&h, 2) - 1.9995).abs() < 1e-3);
        assert!((RAdam::rho(&h, 3) - 2.9993).abs() < 1e-3);
        assert!(RAdam::rho(&h, 4) <= 4.0, "{}", RAdam::rho(&h, 4));
        assert!(RAdam::rho(&h, 5) > 4.0, "{}", RAdam::rho(&h, 5));
    }

    #[test]
    fn momentum_only_hand_trace() {
        // Constant gradient 0.5, lr 0.1. While rho_t <= 4 the update is
        // lr * m_hat and bias correction makes m_hat equal the gradient:
        // step 1: w = 1 - 0.1*0.5 = 0.95; step 2: w = 0.95 - 0.05 = 0.90.
        let mut store = scalar_store(1.0);
        let mut opt = RAdam::new(RAdamHyper::default());
        opt.step(&mut store, &grad_map(0.5), 0.1).unwrap();
        assert!((store.param("w").unwrap().data()[0] - 0.95).abs() < 1e-12);
        opt.step(&mut store, &grad_map(0.5), 0.1).unwrap();
        assert!((store.param("w").unwrap().data()[0] - 0.90).abs() < 1e-12);
    }

    #[test]
    fn adaptive_step_kicks_in_at_step_five() {
        let h = RAdamHyper::default();
        let mut store = scalar_store(0.0);
        let mut opt = RAdam::new(h);
        for _ in 0..4 {
            opt.step(&mut store, &grad_map(1.0), 0.01).unwrap();
        }
        let before = store.param("w").unwrap().data()[0];
        // Momentum-only steps with constant unit gradient move by exactly lr.
        assert!((before + 0.04).abs() < 1e-12, "{before}");
        opt.step(&mut store, &grad_map(1.0), 0.01).unwrap();
        let after = store.param("w").unwrap().data()[0];
        let moved = before - after;
        // Adaptive step: r_5 * m_hat / (sqrt(v_hat) + eps) with all-equal
        // gradients gives m_hat = 1, v_hat = 1.
        let rho_inf = 1999.0;
        let rho_5 = RAdam::rho(&h, 5);
        let r5 = (((rho_5 - 4.0) * (rho_5 - 2.0) * rho_inf) / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_5)).sqrt();
        let expect = 0.01 * r5 * 1.0 / (1.0 + h.eps);
        assert!((moved - expect).abs() < 1e-12, "{moved} vs {expect}");
    }

    #[test]
    fn zero_gradients_leave_fresh_params_unchanged() {
        let mut store = scalar_store(0.7);
        let mut opt = RAdam::new(RAdamHyper::default());
        for _ in 0..10 {
            opt.step(&mut store, &grad_map(0.0), 0.1).unwrap();
        }
        assert_eq!(store.param("w").unwrap().data()[0], 0.7);
        assert_eq!(opt.step_count(), 10);
    }

    #[test]
    fn nonfinite_gradients_skip_the_step() {
        let mut store = scalar_store(0.7);
        let mut opt = RAdam::new(RAdamHyper::default());
        let applied = opt.step(&mut store, &grad_map(f64::NAN), 0.1).unwrap();
        assert!(!applied);
        assert_eq!(store.param("w").unwrap().data()[0], 0.7);
        assert_eq!(opt.step_count(), 0);
        assert_eq!(opt.skipped_steps(), 1);
        // A later finite step still works.
        assert!(opt.step(&mut store, &grad_map(1.0), 0.1).unwrap());
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn quadratic_bowl_converges() {
        // f(w) = ||w||^2 over 4 coordinates, gradient 2w, lr 1e-2.
        let mut store = ParamStore::new();
        store.insert_param("w", Array::new(vec![4], vec![0.3, -0.2, 0.25, 0.15]).unwrap());
        let mut opt = RAdam::new(RAdamHyper::default());
        for _ in 0..500 {
            let g: Vec<f64> = store.param("w").unwrap().data().iter().map(|w| 2.0 * w).collect();
            let mut map = BTreeMap::new();
            map.insert("w".to_string(), g);
            opt.step(&mut store, &map, 1e-2).unwrap();
        }
        let norm: f64 = store.param("w").unwrap().data().iter().map(|w| w * w).sum::<f64>().sqrt();
        assert!(norm < 1e-3, "{norm}");
    }

    #[test]
    fn rejects_unknown_or_misshapen_gradients() {
        let mut store = scalar_store(0.0);
        let mut opt = RAdam::new(RAdamHyper::default());
        let mut map = BTreeMap::new();
        map.insert("nope".to_string(), vec![1.0]);
        assert!(opt.step(&mut store, &map, 0.1).is_err());
        let mut map = BTreeMap::new();
        map.insert("w".to_string(), vec![1.0, 2.0]);
        assert!(opt.step(&mut store, &map, 0.1).is_err());
    }
}
