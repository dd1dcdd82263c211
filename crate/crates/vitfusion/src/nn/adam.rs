use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::Net;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

struct Slot {
    name: String,
    m: ArrayD<f64>,
    v: ArrayD<f64>,
}

/// Adam bound to one network; slots are matched to parameters by the
/// network's fixed visitation order (names are kept for checkpointing).
pub struct Adam {
    pub cfg: AdamConfig,
    pub t: u64,
    slots: Vec<Slot>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, net: &mut impl Net) -> Self {
        let mut slots = Vec::new();
        net.visit_params("", &mut |name, p| {
            slots.push(Slot {
                name: name.to_string(),
                m: ArrayD::zeros(p.v.raw_dim()),
                v: ArrayD::zeros(p.v.raw_dim()),
            });
        });
        Adam { cfg, t: 0, slots }
    }

    pub fn step(&mut self, net: &mut impl Net) {
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let lr = self.cfg.lr;
        let eps = self.cfg.eps;
        let mut idx = 0;
        let slots = &mut self.slots;
        net.visit_params("", &mut |name, mut p| {
            let slot = &mut slots[idx];
            debug_assert_eq!(slot.name, name, "optimizer slot order must match the net");
            idx += 1;
            let m_sl = slot.m.as_slice_mut().unwrap();
            let v_sl = slot.v.as_slice_mut().unwrap();
            let g_sl = p.g.as_slice().unwrap();
            let w_sl = p.v.as_slice_mut().unwrap();
            for i in 0..w_sl.len() {
                let g = g_sl[i];
                m_sl[i] = b1 * m_sl[i] + (1.0 - b1) * g;
                v_sl[i] = b2 * v_sl[i] + (1.0 - b2) * g * g;
                let m_hat = m_sl[i] / bc1;
                let v_hat = v_sl[i] / bc2;
                w_sl[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
        debug_assert_eq!(idx, slots.len());
    }

    /// (name, m, v) triples in slot order, for checkpointing.
    pub fn state(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>, &ArrayD<f64>)> {
        self.slots.iter().map(|s| (s.name.as_str(), &s.m, &s.v))
    }

    pub fn restore_slot(&mut self, name: &str, m: ArrayD<f64>, v: ArrayD<f64>) -> bool {
        if let Some(slot) = self.slots.iter_mut().find(|s| s.name == name) {
            if slot.m.shape() == m.shape() && slot.v.shape() == v.shape() {
                slot.m = m;
                slot.v = v;
                return true;
            }
        }
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn first_step_has_closed_form() {
        // with bias correction, step 1 moves each weight by lr * g / (|g| + eps)
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut l = Linear::new(&mut rng, 2, 1);
        let w0 = l.w.v.clone();
        l.w.g = array![[0.5], [-2.0]];
        let cfg = AdamConfig { lr: 1e-3, ..Default::default() };
        let mut opt = Adam::new(cfg, &mut l);
        opt.step(&mut l);
        assert_eq!(opt.t, 1);
        for i in 0..2 {
            let g: f64 = l.w.g[(i, 0)];
            let expect = w0[(i, 0)] - cfg.lr * g / (g.abs() + cfg.eps);
            assert_abs_diff_eq!(l.w.v[(i, 0)], expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_gradient_keeps_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut l = Linear::new(&mut rng, 3, 3);
        let w0 = l.w.v.clone();
        let mut opt = Adam::new(AdamConfig::default(), &mut l);
        opt.step(&mut l);
        assert_eq!(l.w.v, w0);
    }

    #[test]
    fn state_roundtrips_through_restore() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut l = Linear::new(&mut rng, 2, 2);
        l.w.g.fill(0.3);
        l.b.g.fill(-0.1);
        let mut opt = Adam::new(AdamConfig::default(), &mut l);
        opt.step(&mut l);
        let snapshot: Vec<_> = opt
            .state()
            .map(|(n, m, v)| (n.to_string(), m.clone(), v.clone()))
            .collect();
        assert_eq!(snapshot.len(), 2);
        assert_eq!(snapshot[0].0, "w");
        let mut l2 = Linear::new(&mut rng, 2, 2);
        let mut opt2 = Adam::new(AdamConfig::default(), &mut l2);
        for (n, m, v) in &snapshot {
            assert!(opt2.restore_slot(n, m.clone(), v.clone()));
        }
        assert!(!opt2.restore_slot("nope", snapshot[0].1.clone(), snapshot[0].2.clone()));
        for ((_, m, v), (_, m2, v2)) in snapshot.iter().zip(opt2.state()) {
            assert_eq!(m, m2);
            assert_eq!(v, v2);
        }
    }
}
