//! Adam with bias correction, in descent and ascent flavors.

use super::graph::ParamSet;
use super::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// `param -= step` (loss minimization).
    Descend,
    /// `param += step` (Donsker-Varadhan maximization).
    Ascend,
}

/// Optimizer state for one parameter collection.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

impl AdamState {
    /// Moments are allocated to match `set`'s parameter shapes.
    pub fn new(learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64, set: &ParamSet) -> Self {
        let first_moment = set.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        let second_moment = set.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamState {
            step_count: 0,
            learning_rate,
            beta1,
            beta2,
            epsilon,
            first_moment,
            second_moment,
        }
    }

    pub fn with_defaults(learning_rate: f64, set: &ParamSet) -> Self {
        AdamState::new(learning_rate, 0.9, 0.999, 1e-8, set)
    }

    /// One Adam update using the gradients currently stored in `set`.
    pub fn update(&mut self, set: &mut ParamSet, direction: Direction) -> Result<()> {
        assert_eq!(
            self.first_moment.len(),
            set.params.len(),
            "Adam state does not match parameter set {}",
            set.name
        );
        for p in &set.params {
            if !p.grad.all_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of {}/{} fed to Adam",
                    set.name, p.name
                )));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let sign = match direction {
            Direction::Descend => -1.0,
            Direction::Ascend => 1.0,
        };

        for ((p, m), v) in set
            .params
            .iter_mut()
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            let grads = p.grad.data();
            let ms = m.data_mut();
            let vs = v.data_mut();
            let values = p.value.data_mut();
            for i in 0..values.len() {
                let g = grads[i];
                ms[i] = self.beta1 * ms[i] + (1.0 - self.beta1) * g;
                vs[i] = self.beta2 * vs[i] + (1.0 - self.beta2) * g * g;
                let m_hat = ms[i] / bc1;
                let v_hat = vs[i] / bc2;
                values[i] += sign * self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Arena;

    fn one_param_arena(value: f64) -> (Arena, crate::nn::SetId) {
        let mut arena = Arena::new();
        let set = arena.add_set("test");
        arena.add_param(set, "theta", Tensor::scalar(value));
        (arena, set)
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let (mut arena, set) = one_param_arena(1.25);
        let mut adam = AdamState::with_defaults(0.01, arena.set(set));
        adam.update(arena.set_mut(set), Direction::Descend).unwrap();
        assert_eq!(arena.set(set).params[0].value.item(), 1.25);
        assert_eq!(adam.step_count, 1);
    }

    #[test]
    fn first_step_magnitude_is_learning_rate() {
        // With m = (1-b1) g, v = (1-b2) g^2 and bias correction, the first
        // step is lr * g / (|g| + eps') ~= lr for any constant g.
        let (mut arena, set) = one_param_arena(0.0);
        let mut adam = AdamState::with_defaults(0.0004, arena.set(set));
        arena.set_mut(set).params[0].grad = Tensor::scalar(1.0);
        adam.update(arena.set_mut(set), Direction::Descend).unwrap();
        let v = arena.set(set).params[0].value.item();
        assert!((v + 0.0004).abs() < 1e-8, "first step was {v}");
    }

    #[test]
    fn ascent_climbs_a_concave_objective() {
        // f(theta) = -theta^2, grad = -2 theta; ascending moves theta to 0.
        let (mut arena, set) = one_param_arena(1.0);
        let mut adam = AdamState::with_defaults(0.05, arena.set(set));
        for _ in 0..100 {
            let theta = arena.set(set).params[0].value.item();
            arena.set_mut(set).params[0].grad = Tensor::scalar(-2.0 * theta);
            adam.update(arena.set_mut(set), Direction::Ascend).unwrap();
        }
        let theta = arena.set(set).params[0].value.item();
        assert!(theta.abs() < 0.5, "ascent did not shrink |theta|: {theta}");
    }

    #[test]
    fn non_finite_gradient_is_a_hard_error_naming_the_collection() {
        let (mut arena, set) = one_param_arena(0.0);
        let mut adam = AdamState::with_defaults(0.01, arena.set(set));
        arena.set_mut(set).params[0].grad = Tensor::scalar(f64::NAN);
        let err = adam.update(arena.set_mut(set), Direction::Descend).unwrap_err();
        assert!(err.to_string().contains("test/theta"), "{err}");
    }

    #[test]
    fn step_count_increments_by_one_per_update() {
        let (mut arena, set) = one_param_arena(0.0);
        let mut adam = AdamState::with_defaults(0.01, arena.set(set));
        for expected in 1..=5 {
            adam.update(arena.set_mut(set), Direction::Descend).unwrap();
            assert_eq!(adam.step_count, expected);
        }
    }
}
