use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam moment accumulators for a fixed list of parameter tensors.
///
/// Parameters are passed as flat slices, one per tensor, in the same order
/// at every step.
#[derive(Clone, Debug)]
pub struct AdamState {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(lengths: &[usize]) -> Self {
        Self {
            first: lengths.iter().map(|&n| vec![0.0; n]).collect(),
            second: lengths.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update with bias correction. Decoupled weight decay
    /// `p -= lr * wd * p` is applied before the moment update.
    pub fn step(
        &mut self,
        params: &mut [&mut [f64]],
        grads: &[&[f64]],
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::Dimension(format!(
                "adam tracks {} tensors, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.first[i].len() || g.len() != self.first[i].len() {
                return Err(Error::Dimension(format!(
                    "adam tensor {i}: state {}, param {}, grad {}",
                    self.first[i].len(),
                    p.len(),
                    g.len()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for j in 0..p.len() {
                if weight_decay != 0.0 {
                    p[j] -= lr * weight_decay * p[j];
                }
                let gj = g[j];
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * gj;
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = vec![0.3, -1.25, 7.0];
        let before = p.clone();
        let mut adam = AdamState::new(&[3]);
        for _ in 0..10 {
            adam.step(&mut [&mut p], &[&[0.0, 0.0, 0.0]], 0.1, 0.0).unwrap();
        }
        assert_eq!(
            p.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            before.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(adam.step_count(), 10);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![0.0];
        let mut adam = AdamState::new(&[1]);
        adam.step(&mut [&mut p], &[&[1.0]], 0.1, 0.0).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-6);
    }

    #[test]
    fn three_steps_on_square_match_scalar_trace() {
        // independent scalar trace of the update rule
        let mut expect = Vec::new();
        let (mut q, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=3 {
            let g = 2.0 * q;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            q -= 0.1 * mh / (vh.sqrt() + 1e-8);
            expect.push(q);
        }
        // python trace of the same recurrence
        let frozen = [0.9000000005, 0.8004122286917928, 0.7015862729460303];

        let mut p = vec![1.0];
        let mut adam = AdamState::new(&[1]);
        for (e, f) in expect.iter().zip(frozen) {
            let g = [2.0 * p[0]];
            adam.step(&mut [&mut p], &[&g], 0.1, 0.0).unwrap();
            assert!((p[0] - e).abs() < 1e-12);
            assert!((p[0] - f).abs() < 1e-12);
        }
    }

    #[test]
    fn decoupled_decay_shrinks_params() {
        let mut p = vec![2.0];
        let mut adam = AdamState::new(&[1]);
        adam.step(&mut [&mut p], &[&[0.0]], 0.1, 0.5).unwrap();
        assert!((p[0] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = vec![0.0, 0.0];
        let mut adam = AdamState::new(&[3]);
        assert!(adam.step(&mut [&mut p], &[&[0.0, 0.0]], 0.1, 0.0).is_err());
    }
}
