//! Sentence attention classifier.
//!
//! For each label `i`, attention logits `z_ij = tanh(s_i · d_j)` are
//! normalized over the sentence axis, pooled into a label representation
//! `l_i = Σ_j α_ij d_j`, and scored with that label's own linear map:
//! `score_i = σ(w_i · l_i + b_i)`. A label is predicted when its score is
//! strictly greater than the threshold.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::LabelVector;
use crate::encoder::EncodedDocument;
use crate::model::ModelError;
use crate::tensor::{add_assign, axpy, dot, sigmoid, softmax, softmax_backward, Mat, Scalar};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// How the head weights sentences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMode {
    /// Label-wise learned attention.
    #[default]
    Learned,
    /// Every sentence weighted `1/k`; the attention matrix is ignored. Used
    /// as an ablation baseline.
    Uniform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T> {
    /// c × h; row `i` is the attention vector of label `i`.
    pub attention: Mat<T>,
    /// c × h; row `i` is the classifier weight vector of label `i`.
    pub classifier: Mat<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> HeadParams<T> {
    pub fn zeros(c: usize, h: usize) -> Self {
        Self {
            attention: Mat::zeros(c, h),
            classifier: Mat::zeros(c, h),
            bias: vec![T::zero(); c],
        }
    }

    pub fn init<R: Rng>(c: usize, h: usize, scale: f64, rng: &mut R) -> Self {
        Self {
            attention: Mat::uniform(c, h, scale, rng),
            classifier: Mat::uniform(c, h, scale, rng),
            bias: vec![T::zero(); c],
        }
    }

    pub fn c(&self) -> usize {
        self.bias.len()
    }

    pub fn h(&self) -> usize {
        self.attention.cols()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let (c, h) = self.attention.shape();
        if c == 0 || h == 0 || self.classifier.shape() != (c, h) || self.bias.len() != c {
            return Err(ModelError::ShapeMismatch(format!(
                "head tensors: attention {:?}, classifier {:?}, bias {}",
                self.attention.shape(),
                self.classifier.shape(),
                self.bias.len()
            )));
        }
        Ok(())
    }

    pub fn tensors(&self) -> Vec<(&'static str, &[T])> {
        vec![
            ("attention", self.attention.as_slice()),
            ("classifier", self.classifier.as_slice()),
            ("classifier_bias", self.bias.as_slice()),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [T])> {
        vec![
            ("attention", self.attention.as_mut_slice()),
            ("classifier", self.classifier.as_mut_slice()),
            ("classifier_bias", self.bias.as_mut_slice()),
        ]
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U + Copy) -> HeadParams<U> {
        HeadParams {
            attention: self.attention.map(f),
            classifier: self.classifier.map(f),
            bias: self.bias.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_zero()))
    }
}

/// c × k attention matrix; every row is a distribution over sentences.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<T>(pub Mat<T>);

impl<T: Scalar> AttentionWeights<T> {
    pub fn uniform(c: usize, k: usize) -> Self {
        let w = T::one() / T::lit(k as f64);
        Self(Mat::from_vec(c, k, vec![w; c * k]).expect("shape"))
    }

    pub fn row(&self, i: usize) -> &[T] {
        self.0.row(i)
    }

    pub fn to_rows(&self) -> Vec<Vec<T>> {
        (0..self.0.rows()).map(|i| self.0.row(i).to_vec()).collect()
    }
}

/// Logits and probabilities per label.
#[derive(Debug, Clone, PartialEq)]
pub struct Scores<T> {
    pub logits: Vec<T>,
    pub probs: Vec<T>,
}

impl<T: Scalar> Scores<T> {
    pub fn from_logits(logits: Vec<T>) -> Self {
        let probs = logits.iter().map(|&x| sigmoid(x)).collect();
        Self { logits, probs }
    }
}

/// Attention weights plus the tanh logits they came from.
pub fn attention_forward<T: Scalar>(
    doc: &EncodedDocument<T>,
    attention: &Mat<T>,
) -> Result<(AttentionWeights<T>, Mat<T>), ModelError> {
    if attention.cols() != doc.h() {
        return Err(ModelError::ShapeMismatch(format!(
            "attention width {} vs document width {}",
            attention.cols(),
            doc.h()
        )));
    }
    let (c, k) = (attention.rows(), doc.k());
    let mut z = Mat::zeros(c, k);
    let mut alpha = Mat::zeros(c, k);
    for i in 0..c {
        for j in 0..k {
            z.set(i, j, dot(attention.row(i), doc.column(j)).tanh());
        }
        alpha.row_mut(i).copy_from_slice(&softmax(z.row(i)));
    }
    Ok((AttentionWeights(alpha), z))
}

/// `l_i = Σ_j α_ij d_j`, returned as a c × h matrix.
pub fn pool_labels<T: Scalar>(
    alpha: &AttentionWeights<T>,
    doc: &EncodedDocument<T>,
) -> Result<Mat<T>, ModelError> {
    if alpha.0.cols() != doc.k() {
        return Err(ModelError::ShapeMismatch(format!(
            "attention over {} sentences, document has {}",
            alpha.0.cols(),
            doc.k()
        )));
    }
    let c = alpha.0.rows();
    let mut labels = Mat::zeros(c, doc.h());
    for i in 0..c {
        let row = labels.row_mut(i);
        for (j, &a) in alpha.row(i).iter().enumerate() {
            axpy(row, a, doc.column(j));
        }
    }
    Ok(labels)
}

pub fn score<T: Scalar>(
    labels: &Mat<T>,
    classifier: &Mat<T>,
    bias: &[T],
) -> Result<Scores<T>, ModelError> {
    if labels.shape() != classifier.shape() || bias.len() != labels.rows() {
        return Err(ModelError::ShapeMismatch(format!(
            "label reprs {:?}, classifier {:?}, bias {}",
            labels.shape(),
            classifier.shape(),
            bias.len()
        )));
    }
    let logits = (0..labels.rows())
        .map(|i| dot(classifier.row(i), labels.row(i)) + bias[i])
        .collect();
    Ok(Scores::from_logits(logits))
}

/// Bit `i` is set iff `probs[i] > threshold`.
pub fn predict<T: Scalar>(scores: &Scores<T>, threshold: f64) -> LabelVector {
    let t = T::lit(threshold);
    LabelVector::new(scores.probs.iter().map(|&p| p > t).collect())
}

/// Mean binary cross-entropy over labels, evaluated on logits:
/// `max(x, 0) − x·y + ln(1 + e^{−|x|})`.
pub fn bce_loss<T: Scalar>(scores: &Scores<T>, targets: &LabelVector) -> Result<T, ModelError> {
    if targets.len() != scores.logits.len() || targets.is_empty() {
        return Err(ModelError::ShapeMismatch(format!(
            "{} targets for {} scores",
            targets.len(),
            scores.logits.len()
        )));
    }
    let total: T = scores
        .logits
        .iter()
        .zip(targets.as_bools())
        .map(|(&x, &y)| {
            let y = if y { T::one() } else { T::zero() };
            x.max(T::zero()) - x * y + (-x.abs()).exp().ln_1p()
        })
        .sum();
    Ok(total / T::lit(targets.len() as f64))
}

/// Everything the backward pass needs from one forward call.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadForward<T> {
    pub mode: AttentionMode,
    pub tanh_logits: Mat<T>,
    pub alpha: AttentionWeights<T>,
    pub labels: Mat<T>,
    pub scores: Scores<T>,
}

pub fn head_forward<T: Scalar>(
    params: &HeadParams<T>,
    doc: &EncodedDocument<T>,
    mode: AttentionMode,
) -> Result<HeadForward<T>, ModelError> {
    params.validate()?;
    let (alpha, tanh_logits) = match mode {
        AttentionMode::Learned => attention_forward(doc, &params.attention)?,
        AttentionMode::Uniform => {
            if params.h() != doc.h() {
                return Err(ModelError::ShapeMismatch(
                    "head width vs document width".into(),
                ));
            }
            (
                AttentionWeights::uniform(params.c(), doc.k()),
                Mat::zeros(params.c(), doc.k()),
            )
        }
    };
    let labels = pool_labels(&alpha, doc)?;
    let scores = score(&labels, &params.classifier, &params.bias)?;
    Ok(HeadForward {
        mode,
        tanh_logits,
        alpha,
        labels,
        scores,
    })
}

/// Gradients of [`bce_loss`] with respect to the head parameters and `D`,
/// each multiplied by `scale`. Head gradients are accumulated into `grads`.
pub fn head_backward_into<T: Scalar>(
    params: &HeadParams<T>,
    doc: &EncodedDocument<T>,
    fwd: &HeadForward<T>,
    targets: &LabelVector,
    scale: T,
    grads: &mut HeadParams<T>,
) -> Result<EncodedDocument<T>, ModelError> {
    let (c, h, k) = (params.c(), params.h(), doc.k());
    if fwd.alpha.0.shape() != (c, k) || fwd.labels.shape() != (c, h) || doc.h() != h {
        return Err(ModelError::CacheMismatch(
            "head forward cache does not match parameters or document".into(),
        ));
    }
    if targets.len() != c || grads.attention.shape() != (c, h) {
        return Err(ModelError::CacheMismatch(format!(
            "{} targets / gradient buffer for {c} labels",
            targets.len()
        )));
    }
    let mut d_doc = EncodedDocument::zeros(h, k);
    let per_label = scale / T::lit(c as f64);
    for i in 0..c {
        let y = if targets.get(i) { T::one() } else { T::zero() };
        let dlogit = (fwd.scores.probs[i] - y) * per_label;
        grads.bias[i] = grads.bias[i] + dlogit;
        axpy(grads.classifier.row_mut(i), dlogit, fwd.labels.row(i));
        let dlabel: Vec<T> = params
            .classifier
            .row(i)
            .iter()
            .map(|&w| w * dlogit)
            .collect();

        let alpha = fwd.alpha.row(i);
        for (j, &a) in alpha.iter().enumerate() {
            axpy(d_doc.column_mut(j), a, &dlabel);
        }
        if fwd.mode == AttentionMode::Uniform {
            continue;
        }
        let dalpha: Vec<T> = (0..k).map(|j| dot(&dlabel, doc.column(j))).collect();
        let dz = softmax_backward(alpha, &dalpha);
        for j in 0..k {
            let t = fwd.tanh_logits.get(i, j);
            let dpre = dz[j] * (T::one() - t * t);
            if dpre.is_zero() {
                continue;
            }
            axpy(grads.attention.row_mut(i), dpre, doc.column(j));
            axpy(d_doc.column_mut(j), dpre, params.attention.row(i));
        }
    }
    Ok(d_doc)
}

pub fn head_backward<T: Scalar>(
    params: &HeadParams<T>,
    doc: &EncodedDocument<T>,
    fwd: &HeadForward<T>,
    targets: &LabelVector,
) -> Result<(HeadParams<T>, EncodedDocument<T>), ModelError> {
    let mut grads = HeadParams::zeros(params.c(), params.h());
    let d_doc = head_backward_into(params, doc, fwd, targets, T::one(), &mut grads)?;
    Ok((grads, d_doc))
}

/// Sum of two parameter-shaped gradient buffers, in place.
pub fn add_head_grads<T: Scalar>(acc: &mut HeadParams<T>, other: &HeadParams<T>) {
    add_assign(acc.attention.as_mut_slice(), other.attention.as_slice());
    add_assign(acc.classifier.as_mut_slice(), other.classifier.as_slice());
    add_assign(&mut acc.bias, &other.bias);
}
