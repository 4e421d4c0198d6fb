use ndarray::{ArrayD, Zip};

use super::{ParameterSet, Parameterized, Scalar};

/// Stochastic gradient descent with heavy-ball momentum and L2 weight decay.
///
/// Update per trainable parameter, matching the common deep learning convention:
/// `g = grad + wd * theta` (decaying roles only), `v = mu * v + g`, `theta -= lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd<F> {
    pub learning_rate: F,
    pub momentum: F,
    pub weight_decay: F,
    velocity: ParameterSet<F>,
}

impl<F: Scalar> Sgd<F> {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            learning_rate: F::lit(learning_rate),
            momentum: F::lit(momentum),
            weight_decay: F::lit(weight_decay),
            velocity: ParameterSet::new(),
        }
    }

    /// Momentum buffers keyed by the full parameter name used in [`Sgd::step`].
    pub fn state(&self) -> &ParameterSet<F> {
        &self.velocity
    }

    pub fn set_state(&mut self, state: ParameterSet<F>) {
        self.velocity = state;
    }

    pub fn step(&mut self, module: &mut dyn Parameterized<F>, prefix: &str) {
        let (lr, mu, wd) = (self.learning_rate, self.momentum, self.weight_decay);
        let velocity = &mut self.velocity;
        module.visit_mut(prefix, &mut |name, p| {
            if !p.role.trainable() {
                return;
            }
            let decay = if p.role.decays() { wd } else { F::zero() };
            let mut step: ArrayD<F> = p.grad.clone();
            Zip::from(&mut step)
                .and(&p.value)
                .for_each(|g, &v| *g += decay * v);
            let v = match velocity.remove(&name) {
                Some(mut buf) if buf.shape() == step.shape() => {
                    Zip::from(&mut buf).and(&step).for_each(|b, &g| *b = mu * *b + g);
                    buf
                }
                _ => step,
            };
            Zip::from(&mut p.value).and(&v).for_each(|t, &d| *t -= lr * d);
            velocity.insert(name, v);
        });
    }
}
