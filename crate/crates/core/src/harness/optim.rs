use super::config::{OptimizerConfig, OptimizerKind};
use crate::numcore::Tensor;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Plain SGD or Adam over a fixed parameter list.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
    t: i32,
}

impl Optimizer {
    pub fn new(cfg: &OptimizerConfig) -> Self {
        Self {
            kind: cfg.kind,
            lr: cfg.learning_rate,
            moments: Vec::new(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.into_iter().zip(grads) {
                    p.data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(w, g)| *w -= self.lr * g);
                }
            }
            OptimizerKind::Adam => {
                if self.moments.is_empty() {
                    self.moments = grads
                        .iter()
                        .map(|g| (vec![0.0; g.len()], vec![0.0; g.len()]))
                        .collect();
                }
                self.t += 1;
                let c1 = 1.0 - BETA1.powi(self.t);
                let c2 = 1.0 - BETA2.powi(self.t);
                for ((p, g), (m, v)) in params.into_iter().zip(grads).zip(&mut self.moments) {
                    for (((w, g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                        *m = BETA1 * *m + (1.0 - BETA1) * g;
                        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                        *w -= self.lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(kind: OptimizerKind) -> OptimizerConfig {
        OptimizerConfig {
            kind,
            learning_rate: 0.1,
            ..OptimizerConfig::default()
        }
    }

    #[test]
    fn sgd_step() {
        let mut p = Tensor::vector(&[1.0, -1.0]).unwrap();
        let g = Tensor::vector(&[0.5, 2.0]).unwrap();
        Optimizer::new(&cfg(OptimizerKind::Sgd)).step(vec![&mut p], &[g]);
        assert_eq!(p.data(), &[0.95, -1.2]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Tensor::vector(&[1.0, -1.0]).unwrap();
        let g = Tensor::vector(&[0.5, -2.0]).unwrap();
        Optimizer::new(&cfg(OptimizerKind::Adam)).step(vec![&mut p], &[g]);
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] + 0.9).abs() < 1e-6);
    }
}
