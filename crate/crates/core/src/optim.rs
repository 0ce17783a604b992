//! Adaptive moment estimation over every model tensor.

use serde::{Deserialize, Serialize};

use crate::model::{Model, ModelGrads};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment buffers, one pair per tensor, in
/// [`Model::tensors`] order.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    config: AdamConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, model: &Model<T>) -> Self {
        let zeros: Vec<Vec<T>> = model
            .tensors()
            .iter()
            .map(|(_, t)| vec![T::zero(); t.len()])
            .collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, model: &mut Model<T>, grads: &ModelGrads<T>) {
        self.step += 1;
        let c = self.config;
        let b1 = T::lit(c.beta1);
        let b2 = T::lit(c.beta2);
        let one_minus_b1 = T::lit(1.0 - c.beta1);
        let one_minus_b2 = T::lit(1.0 - c.beta2);
        let correction1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let correction2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let lr = T::lit(c.lr);
        let eps = T::lit(c.epsilon);

        let update = |param: &mut T, m: &mut T, v: &mut T, g: T| {
            *m = b1 * *m + one_minus_b1 * g;
            *v = b2 * *v + one_minus_b2 * g * g;
            let m_hat = *m / correction1;
            let v_hat = *v / correction2;
            *param = *param - lr * m_hat / (v_hat.sqrt() + eps);
        };

        let dense: Vec<&[T]> = grads
            .encoder
            .dense_tensors()
            .into_iter()
            .chain(grads.head.tensors())
            .map(|(_, t)| t)
            .collect();
        let h = model.encoder.h();
        for (idx, (_, param)) in model.tensors_mut().into_iter().enumerate() {
            let (m, v) = (&mut self.first[idx], &mut self.second[idx]);
            if idx == 0 {
                // Sparse embedding gradient: absent rows contribute zero.
                for (row, (p_row, (m_row, v_row))) in param
                    .chunks_mut(h)
                    .zip(m.chunks_mut(h).zip(v.chunks_mut(h)))
                    .enumerate()
                {
                    let g_row = grads.encoder.embed.get(&(row as u32));
                    for i in 0..h {
                        let g = g_row.map_or(T::zero(), |g| g[i]);
                        update(&mut p_row[i], &mut m_row[i], &mut v_row[i], g);
                    }
                }
            } else {
                let g = dense[idx - 1];
                for i in 0..param.len() {
                    update(&mut param[i], &mut m[i], &mut v[i], g[i]);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderKind;
    use crate::model::ModelDims;

    fn tiny() -> Model<f64> {
        let dims = ModelDims {
            h: 2,
            c: 1,
            v_buckets: 3,
            t_max: 4,
            f: 2,
        };
        Model {
            encoder: crate::encoder::EncoderParams::zeros(EncoderKind::MeanPool, dims.encoder()),
            head: crate::head::HeadParams::zeros(1, 2),
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut model = tiny();
        let mut grads = ModelGrads::zeros_like(&model);
        grads.head.bias[0] = 0.3;
        grads.encoder.embed.insert(5, vec![-2.0, 0.0]);
        let mut adam = Adam::new(AdamConfig::default(), &model);
        adam.step(&mut model, &grads);
        // Bias-corrected first step is lr · g / (|g| + eps).
        assert!((model.head.bias[0] + 1e-3).abs() < 1e-9);
        assert!((model.encoder.embed.get(5, 0) - 1e-3).abs() < 1e-9);
        assert_eq!(model.encoder.embed.get(5, 1), 0.0);
        assert_eq!(model.encoder.embed.get(4, 0), 0.0);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn minimizes_a_quadratic() {
        // Drive the bias toward 2.0 under loss (b - 2)^2.
        let mut model = tiny();
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.05,
                ..AdamConfig::default()
            },
            &model,
        );
        for _ in 0..2000 {
            let mut grads = ModelGrads::zeros_like(&model);
            grads.head.bias[0] = 2.0 * (model.head.bias[0] - 2.0);
            adam.step(&mut model, &grads);
        }
        assert!((model.head.bias[0] - 2.0).abs() < 1e-3);
    }
}
