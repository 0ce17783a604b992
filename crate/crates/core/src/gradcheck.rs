//! Finite-difference verification of the full-chain analytic gradients
//! (encoder + attention head + BCE), recomputed in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corpus::LabelVector;
use crate::encoder::EncoderKind;
use crate::head::AttentionMode;
use crate::model::{Model, ModelDims, ModelError, ModelGrads};
use crate::segmenter::{TokenSequence, CLS, FIRST_TOKEN_ID, SEP};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckConfig {
    pub kind: EncoderKind,
    pub h: usize,
    pub k: usize,
    pub c: usize,
    pub t_max: usize,
    pub f: usize,
    pub v_buckets: usize,
    pub eps: f64,
    /// Half-width of the uniform parameter draw.
    pub param_scale: f64,
    pub instances: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::MeanPool,
            h: 8,
            k: 4,
            c: 3,
            t_max: 6,
            f: 8,
            v_buckets: 16,
            eps: 1e-3,
            param_scale: 0.5,
            instances: 20,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub params_checked: usize,
    pub instances: usize,
}

/// One random (parameters, document, targets) draw.
pub struct Instance {
    pub model: Model<f64>,
    pub sentences: Vec<TokenSequence>,
    pub targets: LabelVector,
}

pub fn random_instance(config: &GradCheckConfig, seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = ModelDims {
        h: config.h,
        c: config.c,
        v_buckets: config.v_buckets,
        t_max: config.t_max,
        f: config.f,
    };
    let model = Model::init(config.kind, dims, config.param_scale, &mut rng);
    let sentences = (0..config.k)
        .map(|_| {
            let m = rng.gen_range(3..=config.t_max);
            let mut ids = vec![CLS];
            ids.extend(
                (0..m - 2).map(|_| FIRST_TOKEN_ID + rng.gen_range(0..config.v_buckets as u32)),
            );
            ids.push(SEP);
            TokenSequence::from_ids(ids).expect("valid framing")
        })
        .collect();
    let targets = LabelVector::new((0..config.c).map(|_| rng.gen_bool(0.5)).collect());
    Instance {
        model,
        sentences,
        targets,
    }
}

/// Largest `|analytic − fd| / max(1, |fd|)` over every parameter entry.
pub fn check_instance(
    instance: &Instance,
    eps: f64,
    mode: AttentionMode,
) -> Result<(f64, String, usize), ModelError> {
    let Instance {
        model,
        sentences,
        targets,
    } = instance;
    let mut grads = ModelGrads::zeros_like(model);
    model.loss_and_grad(sentences, targets, mode, 1.0, &mut grads)?;

    let mut worst = (0.0f64, String::from("none"));
    let mut checked = 0;
    let mut probe = model.clone();
    let names: Vec<String> = model.tensors().into_iter().map(|(n, _)| n).collect();
    for (t, name) in names.iter().enumerate() {
        let analytic = grads.dense(name).expect("gradient for every tensor");
        for (idx, &a) in analytic.iter().enumerate() {
            let original = probe.tensors()[t].1[idx];
            probe.tensors_mut()[t].1[idx] = original + eps;
            let up = probe.loss(sentences, targets, mode)?;
            probe.tensors_mut()[t].1[idx] = original - eps;
            let down = probe.loss(sentences, targets, mode)?;
            probe.tensors_mut()[t].1[idx] = original;
            let fd = (up - down) / (2.0 * eps);
            let rel = (a - fd).abs() / fd.abs().max(1.0);
            checked += 1;
            if rel > worst.0 || worst.1 == "none" && rel >= worst.0 {
                worst = (rel, format!("{name}[{idx}]"));
            }
        }
    }
    Ok((worst.0, worst.1, checked))
}

pub fn grad_check(config: &GradCheckConfig) -> Result<GradCheckReport, ModelError> {
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::from("none"),
        params_checked: 0,
        instances: config.instances,
    };
    for i in 0..config.instances {
        let instance = random_instance(config, config.seed.wrapping_add(i as u64));
        let (err, name, checked) = check_instance(&instance, config.eps, AttentionMode::Learned)?;
        report.params_checked += checked;
        if err > report.max_rel_error || report.worst_param == "none" {
            report.max_rel_error = err;
            report.worst_param = name;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_encoders_pass_at_default_eps() {
        for kind in [EncoderKind::MeanPool, EncoderKind::MiniTransformer] {
            let report = grad_check(&GradCheckConfig {
                kind,
                instances: 3,
                ..Default::default()
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{kind}: {report:?}");
            assert!(report.params_checked > 0);
        }
    }

    #[test]
    fn coarse_eps_reports_larger_error() {
        let fine = grad_check(&GradCheckConfig {
            kind: EncoderKind::MiniTransformer,
            instances: 2,
            ..Default::default()
        })
        .unwrap();
        let coarse = grad_check(&GradCheckConfig {
            kind: EncoderKind::MiniTransformer,
            instances: 2,
            eps: 1e-1,
            ..Default::default()
        })
        .unwrap();
        assert!(coarse.max_rel_error.is_finite());
        assert!(coarse.max_rel_error > fine.max_rel_error);
    }

    #[test]
    fn uniform_attention_gradients_also_check() {
        let config = GradCheckConfig::default();
        let instance = random_instance(&config, 99);
        let (err, _, _) = check_instance(&instance, 1e-3, AttentionMode::Uniform).unwrap();
        assert!(err < 1e-4);
    }
}
