use super::tensor::Tensor;
use super::{DiffError, Result};

/// SGD with momentum and decoupled-from-nothing classic weight decay:
///
/// ```text
/// v <- momentum * v + grad + weight_decay * param
/// param <- param - lr * v
/// ```
///
/// Gradients are consumed (cleared) by each step. The velocity buffers are
/// keyed by position, so every call must pass the same parameter list.
pub struct Sgd {
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Sgd {
        Sgd { lr, momentum, weight_decay, velocity: Vec::new() }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step(&mut self, params: &[Tensor]) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        assert_eq!(self.velocity.len(), params.len(), "parameter list changed between steps");
        for (idx, p) in params.iter().enumerate() {
            if !p.has_grad() {
                return Err(DiffError::MissingGrad(format!("param #{idx}")));
            }
            let v = &mut self.velocity[idx];
            let (lr, mom, wd) = (self.lr, self.momentum, self.weight_decay);
            p.update_values(|values, grad| {
                let grad = grad.expect("checked above");
                for ((pv, vv), g) in values.iter_mut().zip(v.iter_mut()).zip(grad.iter()) {
                    *vv = mom * *vv + g + wd * *pv;
                    *pv -= lr * *vv;
                }
            });
            p.clear_grad();
        }
        Ok(())
    }
}
