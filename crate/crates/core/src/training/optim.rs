//! Adam with a per-stage half-cosine learning-rate decay.

use std::collections::BTreeMap;

use crate::tensor::Tensor;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// `peak` at step 0 falling to `peak * final_ratio` at `total`.
pub fn cosine_lr(peak: f64, final_ratio: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return peak;
    }
    let p = (step.min(total - 1)) as f64 / (total - 1) as f64;
    let floor = peak * final_ratio;
    floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

#[derive(Clone, Debug, Default)]
pub struct Adam {
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// Names this optimizer has stepped.
    pub fn params(&self) -> impl Iterator<Item = &str> {
        self.state.keys().map(String::as_str)
    }

    pub fn step(&mut self, name: &str, param: &mut Tensor, grad: &Tensor, lr: f64) {
        assert_eq!(param.shape(), grad.shape(), "gradient shape for {name}");
        let n = param.numel();
        let s = self
            .state
            .entry(name.to_string())
            .or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            });
        s.t += 1;
        let c1 = 1.0 - BETA1.powi(s.t);
        let c2 = 1.0 - BETA2.powi(s.t);
        for ((p, &g), (m, v)) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(s.m.iter_mut().zip(s.v.iter_mut()))
        {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut adam = Adam::new();
        let mut p = Tensor::new(&[2], vec![1.0, -1.0]);
        adam.step("p", &mut p, &Tensor::new(&[2], vec![3.0, -0.01]), 0.1);
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] + 0.9).abs() < 1e-4);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut adam = Adam::new();
        let mut p = Tensor::new(&[1], vec![5.0]);
        for k in 0..500 {
            let g = Tensor::new(&[1], vec![2.0 * (p.data()[0] - 2.0)]);
            adam.step("p", &mut p, &g, cosine_lr(0.1, 0.01, k, 500));
        }
        assert!((p.data()[0] - 2.0).abs() < 1e-2);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(1.0, 0.1, 0, 11), 1.0);
        assert!((cosine_lr(1.0, 0.1, 10, 11) - 0.1).abs() < 1e-12);
        assert!((cosine_lr(1.0, 0.1, 5, 11) - 0.55).abs() < 1e-12);
        assert_eq!(cosine_lr(0.3, 0.1, 0, 1), 0.3);
    }
}
