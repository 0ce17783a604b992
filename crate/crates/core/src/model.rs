//! Encoder + head composed into one document classifier.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::LabelVector;
use crate::encoder::{
    accumulate_backward, encode_document, EncodedDocument, EncoderDims, EncoderGrads, EncoderKind,
    EncoderParams, SentenceCache,
};
use crate::head::{
    bce_loss, head_backward_into, head_forward, AttentionMode, HeadForward, HeadParams,
};
use crate::segmenter::TokenSequence;
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("cache mismatch: {0}")]
    CacheMismatch(String),
}

/// Fixed model dimensions. The sentence count `k` varies per document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub h: usize,
    pub c: usize,
    pub v_buckets: usize,
    pub t_max: usize,
    pub f: usize,
}

impl ModelDims {
    pub fn encoder(&self) -> EncoderDims {
        EncoderDims {
            h: self.h,
            v_buckets: self.v_buckets,
            t_max: self.t_max,
            f: self.f,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub encoder: EncoderParams<T>,
    pub head: HeadParams<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads<T> {
    pub encoder: EncoderGrads<T>,
    pub head: HeadParams<T>,
}

impl<T: Scalar> ModelGrads<T> {
    pub fn zeros_like(model: &Model<T>) -> Self {
        Self {
            encoder: EncoderGrads::zeros_like(&model.encoder),
            head: HeadParams::zeros(model.head.c(), model.head.h()),
        }
    }

    /// Dense copy of a named tensor, matching [`Model::tensors`] names.
    pub fn dense(&self, name: &str) -> Option<Vec<T>> {
        match name.strip_prefix("head.") {
            Some(inner) => self
                .head
                .tensors()
                .into_iter()
                .find(|(n, _)| *n == inner)
                .map(|(_, t)| t.to_vec()),
            None => self.encoder.dense(name.strip_prefix("encoder.")?),
        }
    }
}

/// A full forward pass with every cache needed for backward.
#[derive(Debug, Clone)]
pub struct DocumentForward<T> {
    pub doc: EncodedDocument<T>,
    pub caches: Vec<SentenceCache<T>>,
    pub head: HeadForward<T>,
}

impl<T: Scalar> Model<T> {
    pub fn init<R: Rng>(kind: EncoderKind, dims: ModelDims, scale: f64, rng: &mut R) -> Self {
        let encoder = EncoderParams::init(kind, dims.encoder(), scale, rng);
        let head = HeadParams::init(dims.c, dims.h, scale, rng);
        Self { encoder, head }
    }

    pub fn kind(&self) -> EncoderKind {
        self.encoder.kind()
    }

    pub fn dims(&self) -> ModelDims {
        let e = self.encoder.dims();
        ModelDims {
            h: e.h,
            c: self.head.c(),
            v_buckets: e.v_buckets,
            t_max: e.t_max,
            f: e.f,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.encoder.validate()?;
        self.head.validate()?;
        if self.head.h() != self.encoder.h() {
            return Err(ModelError::ShapeMismatch(format!(
                "head width {} vs encoder width {}",
                self.head.h(),
                self.encoder.h()
            )));
        }
        Ok(())
    }

    /// Named tensors in checkpoint order, prefixed `encoder.` or `head.`.
    pub fn tensors(&self) -> Vec<(String, &[T])> {
        let enc = self
            .encoder
            .tensors()
            .into_iter()
            .map(|(n, t)| (format!("encoder.{n}"), t));
        let head = self
            .head
            .tensors()
            .into_iter()
            .map(|(n, t)| (format!("head.{n}"), t));
        enc.chain(head).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [T])> {
        let enc = self
            .encoder
            .tensors_mut()
            .into_iter()
            .map(|(n, t)| (format!("encoder.{n}"), t));
        let head = self
            .head
            .tensors_mut()
            .into_iter()
            .map(|(n, t)| (format!("head.{n}"), t));
        enc.chain(head).collect()
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U + Copy) -> Model<U> {
        Model {
            encoder: self.encoder.map(f),
            head: self.head.map(f),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    pub fn forward(
        &self,
        sentences: &[TokenSequence],
        mode: AttentionMode,
    ) -> Result<DocumentForward<T>, ModelError> {
        let (doc, caches) = encode_document(sentences, &self.encoder)?;
        let head = head_forward(&self.head, &doc, mode)?;
        Ok(DocumentForward { doc, caches, head })
    }

    /// Backward from the document's BCE loss, scaled by `scale`, accumulated
    /// into `grads`.
    pub fn backward(
        &self,
        fwd: &DocumentForward<T>,
        targets: &LabelVector,
        scale: T,
        grads: &mut ModelGrads<T>,
    ) -> Result<(), ModelError> {
        let d_doc = head_backward_into(
            &self.head,
            &fwd.doc,
            &fwd.head,
            targets,
            scale,
            &mut grads.head,
        )?;
        accumulate_backward(&self.encoder, &fwd.caches, &d_doc, &mut grads.encoder)
    }

    /// Forward, loss and backward in one call. Returns the unscaled loss.
    pub fn loss_and_grad(
        &self,
        sentences: &[TokenSequence],
        targets: &LabelVector,
        mode: AttentionMode,
        scale: T,
        grads: &mut ModelGrads<T>,
    ) -> Result<T, ModelError> {
        let fwd = self.forward(sentences, mode)?;
        let loss = bce_loss(&fwd.head.scores, targets)?;
        self.backward(&fwd, targets, scale, grads)?;
        Ok(loss)
    }

    pub fn loss(
        &self,
        sentences: &[TokenSequence],
        targets: &LabelVector,
        mode: AttentionMode,
    ) -> Result<T, ModelError> {
        let fwd = self.forward(sentences, mode)?;
        bce_loss(&fwd.head.scores, targets)
    }
}
