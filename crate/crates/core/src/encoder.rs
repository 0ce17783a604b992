//! Sentence encoders: token ids in, one CLS vector out.
//!
//! Two trainable encoders share the token embedding `E` and positional table
//! `P`, with input rows `x_p = E[id_p] + P[p]`:
//!
//! * `MeanPool`: `cls = tanh(M · mean_p(x_p) + q)`.
//! * `MiniTransformer`: one single-head self-attention block without layer
//!   normalization, a tanh feed-forward layer and two residual adds. The
//!   output at position 0 (the CLS token) is the sentence vector.
//!
//! Only the CLS row is materialized past the key/value projections, since no
//! other row reaches the output.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::ModelError;
use crate::segmenter::{TokenSequence, FIRST_TOKEN_ID};
use crate::tensor::{add_assign, axpy, dot, softmax, softmax_backward, Mat, Scalar};

pub const INIT_SCALE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    MeanPool,
    MiniTransformer,
}

impl EncoderKind {
    pub fn code(self) -> u8 {
        match self {
            EncoderKind::MeanPool => 0,
            EncoderKind::MiniTransformer => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(EncoderKind::MeanPool),
            1 => Some(EncoderKind::MiniTransformer),
            _ => None,
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderKind::MeanPool => "mean-pool",
            EncoderKind::MiniTransformer => "mini-transformer",
        })
    }
}

impl FromStr for EncoderKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "mean-pool" | "meanpool" => Ok(EncoderKind::MeanPool),
            "mini-transformer" | "minitransformer" | "transformer" => {
                Ok(EncoderKind::MiniTransformer)
            }
            _ => Err(format!(
                "unknown encoder kind {s:?} (expected mean-pool or mini-transformer)"
            )),
        }
    }
}

/// Fixed encoder dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub h: usize,
    pub v_buckets: usize,
    pub t_max: usize,
    /// Feed-forward width; unused by `MeanPool` but still recorded.
    pub f: usize,
}

/// Single-head attention block plus tanh feed-forward layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub query: Mat<T>,
    pub key: Mat<T>,
    pub value: Mat<T>,
    /// h × f
    pub ffn_in: Mat<T>,
    /// f × h
    pub ffn_out: Mat<T>,
    pub ffn_in_bias: Vec<T>,
    pub ffn_out_bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EncoderLayer<T> {
    MeanPool { proj: Mat<T>, bias: Vec<T> },
    MiniTransformer(Block<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    /// (4 + v_buckets) × h
    pub embed: Mat<T>,
    /// t_max × h
    pub pos: Mat<T>,
    pub layer: EncoderLayer<T>,
}

impl<T: Scalar> EncoderParams<T> {
    pub fn zeros(kind: EncoderKind, dims: EncoderDims) -> Self {
        let EncoderDims {
            h,
            v_buckets,
            t_max,
            f,
        } = dims;
        let layer = match kind {
            EncoderKind::MeanPool => EncoderLayer::MeanPool {
                proj: Mat::zeros(h, h),
                bias: vec![T::zero(); h],
            },
            EncoderKind::MiniTransformer => EncoderLayer::MiniTransformer(Block {
                query: Mat::zeros(h, h),
                key: Mat::zeros(h, h),
                value: Mat::zeros(h, h),
                ffn_in: Mat::zeros(h, f),
                ffn_out: Mat::zeros(f, h),
                ffn_in_bias: vec![T::zero(); f],
                ffn_out_bias: vec![T::zero(); h],
            }),
        };
        Self {
            embed: Mat::zeros(FIRST_TOKEN_ID as usize + v_buckets, h),
            pos: Mat::zeros(t_max, h),
            layer,
        }
    }

    /// Weights uniform in `[-scale, scale]`, biases zero.
    pub fn init<R: Rng>(kind: EncoderKind, dims: EncoderDims, scale: f64, rng: &mut R) -> Self {
        let EncoderDims {
            h,
            v_buckets,
            t_max,
            f,
        } = dims;
        let embed = Mat::uniform(FIRST_TOKEN_ID as usize + v_buckets, h, scale, rng);
        let pos = Mat::uniform(t_max, h, scale, rng);
        let layer = match kind {
            EncoderKind::MeanPool => EncoderLayer::MeanPool {
                proj: Mat::uniform(h, h, scale, rng),
                bias: vec![T::zero(); h],
            },
            EncoderKind::MiniTransformer => EncoderLayer::MiniTransformer(Block {
                query: Mat::uniform(h, h, scale, rng),
                key: Mat::uniform(h, h, scale, rng),
                value: Mat::uniform(h, h, scale, rng),
                ffn_in: Mat::uniform(h, f, scale, rng),
                ffn_out: Mat::uniform(f, h, scale, rng),
                ffn_in_bias: vec![T::zero(); f],
                ffn_out_bias: vec![T::zero(); h],
            }),
        };
        Self { embed, pos, layer }
    }

    pub fn kind(&self) -> EncoderKind {
        match self.layer {
            EncoderLayer::MeanPool { .. } => EncoderKind::MeanPool,
            EncoderLayer::MiniTransformer(_) => EncoderKind::MiniTransformer,
        }
    }

    pub fn h(&self) -> usize {
        self.embed.cols()
    }

    pub fn dims(&self) -> EncoderDims {
        let f = match &self.layer {
            EncoderLayer::MeanPool { .. } => 0,
            EncoderLayer::MiniTransformer(b) => b.ffn_in.cols(),
        };
        EncoderDims {
            h: self.h(),
            v_buckets: self.embed.rows().saturating_sub(FIRST_TOKEN_ID as usize),
            t_max: self.pos.rows(),
            f,
        }
    }

    /// Checks every tensor shape against the embedding width.
    pub fn validate(&self) -> Result<(), ModelError> {
        let h = self.h();
        let bad = |what: &str| Err(ModelError::ShapeMismatch(format!("encoder {what}")));
        if h == 0 || self.embed.rows() <= FIRST_TOKEN_ID as usize {
            return bad("embedding table is empty");
        }
        if self.pos.cols() != h || self.pos.rows() < 3 {
            return bad("positional table shape");
        }
        match &self.layer {
            EncoderLayer::MeanPool { proj, bias } => {
                if proj.shape() != (h, h) || bias.len() != h {
                    return bad("mean-pool projection shape");
                }
            }
            EncoderLayer::MiniTransformer(b) => {
                let f = b.ffn_in.cols();
                let ok = b.query.shape() == (h, h)
                    && b.key.shape() == (h, h)
                    && b.value.shape() == (h, h)
                    && b.ffn_in.shape() == (h, f)
                    && b.ffn_out.shape() == (f, h)
                    && b.ffn_in_bias.len() == f
                    && b.ffn_out_bias.len() == h
                    && f > 0;
                if !ok {
                    return bad("transformer block shape");
                }
            }
        }
        Ok(())
    }

    /// Named tensors in checkpoint order.
    pub fn tensors(&self) -> Vec<(&'static str, &[T])> {
        let mut out = vec![
            ("embedding", self.embed.as_slice()),
            ("position", self.pos.as_slice()),
        ];
        match &self.layer {
            EncoderLayer::MeanPool { proj, bias } => {
                out.push(("projection", proj.as_slice()));
                out.push(("projection_bias", bias.as_slice()));
            }
            EncoderLayer::MiniTransformer(b) => {
                out.push(("query", b.query.as_slice()));
                out.push(("key", b.key.as_slice()));
                out.push(("value", b.value.as_slice()));
                out.push(("ffn_in", b.ffn_in.as_slice()));
                out.push(("ffn_out", b.ffn_out.as_slice()));
                out.push(("ffn_in_bias", b.ffn_in_bias.as_slice()));
                out.push(("ffn_out_bias", b.ffn_out_bias.as_slice()));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [T])> {
        let mut out = vec![
            ("embedding", self.embed.as_mut_slice()),
            ("position", self.pos.as_mut_slice()),
        ];
        match &mut self.layer {
            EncoderLayer::MeanPool { proj, bias } => {
                out.push(("projection", proj.as_mut_slice()));
                out.push(("projection_bias", bias.as_mut_slice()));
            }
            EncoderLayer::MiniTransformer(b) => {
                out.push(("query", b.query.as_mut_slice()));
                out.push(("key", b.key.as_mut_slice()));
                out.push(("value", b.value.as_mut_slice()));
                out.push(("ffn_in", b.ffn_in.as_mut_slice()));
                out.push(("ffn_out", b.ffn_out.as_mut_slice()));
                out.push(("ffn_in_bias", b.ffn_in_bias.as_mut_slice()));
                out.push(("ffn_out_bias", b.ffn_out_bias.as_mut_slice()));
            }
        }
        out
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U + Copy) -> EncoderParams<U> {
        let vmap = |v: &Vec<T>| v.iter().map(|&x| f(x)).collect::<Vec<U>>();
        let layer = match &self.layer {
            EncoderLayer::MeanPool { proj, bias } => EncoderLayer::MeanPool {
                proj: proj.map(f),
                bias: vmap(bias),
            },
            EncoderLayer::MiniTransformer(b) => EncoderLayer::MiniTransformer(Block {
                query: b.query.map(f),
                key: b.key.map(f),
                value: b.value.map(f),
                ffn_in: b.ffn_in.map(f),
                ffn_out: b.ffn_out.map(f),
                ffn_in_bias: vmap(&b.ffn_in_bias),
                ffn_out_bias: vmap(&b.ffn_out_bias),
            }),
        };
        EncoderParams {
            embed: self.embed.map(f),
            pos: self.pos.map(f),
            layer,
        }
    }
}

/// Document matrix `D` (h × k). Column `j` is the CLS vector of sentence `j`;
/// columns are stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedDocument<T> {
    columns: Mat<T>,
}

impl<T: Scalar> EncodedDocument<T> {
    pub fn zeros(h: usize, k: usize) -> Self {
        Self {
            columns: Mat::zeros(k, h),
        }
    }

    pub fn from_columns(columns: &[Vec<T>]) -> Option<Self> {
        let columns = Mat::from_rows(columns)?;
        (columns.rows() > 0 && columns.cols() > 0).then_some(Self { columns })
    }

    pub fn h(&self) -> usize {
        self.columns.cols()
    }

    pub fn k(&self) -> usize {
        self.columns.rows()
    }

    pub fn column(&self, j: usize) -> &[T] {
        self.columns.row(j)
    }

    pub fn column_mut(&mut self, j: usize) -> &mut [T] {
        self.columns.row_mut(j)
    }

    /// Entry `D[i][j]` (row `i` of the embedding axis, column `j`).
    pub fn get(&self, i: usize, j: usize) -> T {
        self.columns.get(j, i)
    }

    pub fn is_finite(&self) -> bool {
        self.columns.is_finite()
    }

    /// Reorders columns so that new column `j` is old column `perm[j]`.
    pub fn permute_columns(&self, perm: &[usize]) -> Self {
        let cols: Vec<Vec<T>> = perm.iter().map(|&j| self.column(j).to_vec()).collect();
        Self::from_columns(&cols).expect("same shape")
    }
}

#[derive(Debug, Clone, PartialEq)]
enum LayerCache<T> {
    MeanPool {
        mean: Vec<T>,
    },
    MiniTransformer {
        query0: Vec<T>,
        keys: Mat<T>,
        values: Mat<T>,
        attn: Vec<T>,
        z: Vec<T>,
        hidden: Vec<T>,
    },
}

/// Forward intermediates of one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceCache<T> {
    ids: Vec<u32>,
    inputs: Mat<T>,
    cls: Vec<T>,
    layer: LayerCache<T>,
}

impl<T: Scalar> SentenceCache<T> {
    pub fn cls(&self) -> &[T] {
        &self.cls
    }

    pub fn kind(&self) -> EncoderKind {
        match self.layer {
            LayerCache::MeanPool { .. } => EncoderKind::MeanPool,
            LayerCache::MiniTransformer { .. } => EncoderKind::MiniTransformer,
        }
    }
}

pub fn encode_sentence<T: Scalar>(
    tokens: &TokenSequence,
    params: &EncoderParams<T>,
) -> Result<(Vec<T>, SentenceCache<T>), ModelError> {
    let h = params.h();
    let ids = tokens.ids();
    let m = ids.len();
    if m == 0 || m > params.pos.rows() {
        return Err(ModelError::ShapeMismatch(format!(
            "sentence of {m} tokens exceeds positional table of {}",
            params.pos.rows()
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&id| id as usize >= params.embed.rows()) {
        return Err(ModelError::ShapeMismatch(format!(
            "token id {bad} outside embedding table of {} rows",
            params.embed.rows()
        )));
    }
    let mut inputs = Mat::zeros(m, h);
    for (p, &id) in ids.iter().enumerate() {
        let row = inputs.row_mut(p);
        row.copy_from_slice(params.embed.row(id as usize));
        add_assign(row, params.pos.row(p));
    }

    let (cls, layer) = match &params.layer {
        EncoderLayer::MeanPool { proj, bias } => {
            let inv_m = T::one() / T::lit(m as f64);
            let mut mean = vec![T::zero(); h];
            for p in 0..m {
                axpy(&mut mean, inv_m, inputs.row(p));
            }
            let pre = proj.mul_vec(&mean);
            let cls = pre
                .iter()
                .zip(bias)
                .map(|(&a, &b)| (a + b).tanh())
                .collect();
            (cls, LayerCache::MeanPool { mean })
        }
        EncoderLayer::MiniTransformer(b) => {
            let scale = T::one() / T::lit(h as f64).sqrt();
            let query0 = b.query.vec_mul(inputs.row(0));
            let mut keys = Mat::zeros(m, h);
            let mut values = Mat::zeros(m, h);
            for p in 0..m {
                keys.row_mut(p)
                    .copy_from_slice(&b.key.vec_mul(inputs.row(p)));
                values
                    .row_mut(p)
                    .copy_from_slice(&b.value.vec_mul(inputs.row(p)));
            }
            let logits: Vec<T> = (0..m).map(|p| dot(&query0, keys.row(p)) * scale).collect();
            let attn = softmax(&logits);
            let mut z = inputs.row(0).to_vec();
            for p in 0..m {
                axpy(&mut z, attn[p], values.row(p));
            }
            let mut hidden = b.ffn_in.vec_mul(&z);
            for (u, &g) in hidden.iter_mut().zip(&b.ffn_in_bias) {
                *u = (*u + g).tanh();
            }
            let y = b.ffn_out.vec_mul(&hidden);
            let cls = z
                .iter()
                .zip(&y)
                .zip(&b.ffn_out_bias)
                .map(|((&zi, &yi), &gi)| zi + yi + gi)
                .collect();
            let cache = LayerCache::MiniTransformer {
                query0,
                keys,
                values,
                attn,
                z,
                hidden,
            };
            (cls, cache)
        }
    };
    let cache = SentenceCache {
        ids: ids.to_vec(),
        inputs,
        cls: Vec::clone(&cls),
        layer,
    };
    Ok((cls, cache))
}

pub fn encode_document<T: Scalar>(
    sentences: &[TokenSequence],
    params: &EncoderParams<T>,
) -> Result<(EncodedDocument<T>, Vec<SentenceCache<T>>), ModelError> {
    if sentences.is_empty() {
        return Err(ModelError::ShapeMismatch(
            "document has no sentences".into(),
        ));
    }
    let mut doc = EncodedDocument::zeros(params.h(), sentences.len());
    let mut caches = Vec::with_capacity(sentences.len());
    for (j, tokens) in sentences.iter().enumerate() {
        let (cls, cache) = encode_sentence(tokens, params)?;
        doc.column_mut(j).copy_from_slice(&cls);
        caches.push(cache);
    }
    Ok((doc, caches))
}

/// Encoder gradients. Embedding rows are kept sparse; rows never touched by a
/// token are implicitly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads<T> {
    pub embed: BTreeMap<u32, Vec<T>>,
    pub embed_rows: usize,
    pub pos: Mat<T>,
    pub layer: EncoderLayer<T>,
}

impl<T: Scalar> EncoderGrads<T> {
    pub fn zeros_like(params: &EncoderParams<T>) -> Self {
        let z = EncoderParams::<T>::zeros(params.kind(), params.dims());
        Self {
            embed: BTreeMap::new(),
            embed_rows: params.embed.rows(),
            pos: z.pos,
            layer: z.layer,
        }
    }

    fn embed_row(&mut self, id: u32, h: usize) -> &mut [T] {
        self.embed.entry(id).or_insert_with(|| vec![T::zero(); h])
    }

    /// Dense view of one named tensor, matching [`EncoderParams::tensors`].
    pub fn dense(&self, name: &str) -> Option<Vec<T>> {
        if name == "embedding" {
            let h = self.pos.cols();
            let mut out = vec![T::zero(); self.embed_rows * h];
            for (&id, row) in &self.embed {
                out[id as usize * h..(id as usize + 1) * h].copy_from_slice(row);
            }
            return Some(out);
        }
        self.dense_tensors()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t.to_vec())
    }

    /// Named dense tensors, excluding the sparse embedding.
    pub fn dense_tensors(&self) -> Vec<(&'static str, &[T])> {
        let mut out = vec![("position", self.pos.as_slice())];
        match &self.layer {
            EncoderLayer::MeanPool { proj, bias } => {
                out.push(("projection", proj.as_slice()));
                out.push(("projection_bias", bias.as_slice()));
            }
            EncoderLayer::MiniTransformer(b) => {
                out.push(("query", b.query.as_slice()));
                out.push(("key", b.key.as_slice()));
                out.push(("value", b.value.as_slice()));
                out.push(("ffn_in", b.ffn_in.as_slice()));
                out.push(("ffn_out", b.ffn_out.as_slice()));
                out.push(("ffn_in_bias", b.ffn_in_bias.as_slice()));
                out.push(("ffn_out_bias", b.ffn_out_bias.as_slice()));
            }
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.embed.values().flatten().all(|v| v.is_zero())
            && self
                .dense_tensors()
                .iter()
                .all(|(_, t)| t.iter().all(|v| v.is_zero()))
    }
}

/// Backward through one sentence, accumulating into `grads`.
pub fn backward_sentence<T: Scalar>(
    params: &EncoderParams<T>,
    cache: &SentenceCache<T>,
    dcls: &[T],
    grads: &mut EncoderGrads<T>,
) -> Result<(), ModelError> {
    let h = params.h();
    let m = cache.ids.len();
    if dcls.len() != h || cache.cls.len() != h || cache.kind() != params.kind() {
        return Err(ModelError::CacheMismatch(
            "sentence cache does not match encoder parameters".into(),
        ));
    }
    if grads.pos.shape() != params.pos.shape() || grads.embed_rows != params.embed.rows() {
        return Err(ModelError::CacheMismatch("gradient buffer shape".into()));
    }
    // Gradient with respect to every input row x_p.
    let mut dx = Mat::zeros(m, h);
    match (&params.layer, &cache.layer, &mut grads.layer) {
        (
            EncoderLayer::MeanPool { proj, .. },
            LayerCache::MeanPool { mean },
            EncoderLayer::MeanPool {
                proj: dproj,
                bias: dbias,
            },
        ) => {
            let dpre: Vec<T> = dcls
                .iter()
                .zip(&cache.cls)
                .map(|(&g, &c)| g * (T::one() - c * c))
                .collect();
            add_assign(dbias, &dpre);
            dproj.add_outer(&dpre, mean);
            let dmean = proj.vec_mul(&dpre);
            let inv_m = T::one() / T::lit(m as f64);
            for p in 0..m {
                axpy(dx.row_mut(p), inv_m, &dmean);
            }
        }
        (
            EncoderLayer::MiniTransformer(b),
            LayerCache::MiniTransformer {
                query0,
                keys,
                values,
                attn,
                z,
                hidden,
            },
            EncoderLayer::MiniTransformer(db),
        ) => {
            let scale = T::one() / T::lit(h as f64).sqrt();
            // cls = z + hidden·F2 + g2
            add_assign(&mut db.ffn_out_bias, dcls);
            db.ffn_out.add_outer(hidden, dcls);
            let dhidden = b.ffn_out.mul_vec(dcls);
            let du: Vec<T> = dhidden
                .iter()
                .zip(hidden)
                .map(|(&g, &t)| g * (T::one() - t * t))
                .collect();
            add_assign(&mut db.ffn_in_bias, &du);
            db.ffn_in.add_outer(z, &du);
            let mut dz = b.ffn_in.mul_vec(&du);
            add_assign(&mut dz, dcls);

            // z = x_0 + Σ_p a_p V_p
            add_assign(dx.row_mut(0), &dz);
            let dattn: Vec<T> = (0..m).map(|p| dot(&dz, values.row(p))).collect();
            let dlogits = softmax_backward(attn, &dattn);
            let mut dquery0 = vec![T::zero(); h];
            for p in 0..m {
                let x_p = cache.inputs.row(p);
                // values
                let dv: Vec<T> = dz.iter().map(|&g| g * attn[p]).collect();
                db.value.add_outer(x_p, &dv);
                let back_v = b.value.mul_vec(&dv);
                // keys
                axpy(&mut dquery0, dlogits[p] * scale, keys.row(p));
                let dk: Vec<T> = query0.iter().map(|&q| q * dlogits[p] * scale).collect();
                db.key.add_outer(x_p, &dk);
                let back_k = b.key.mul_vec(&dk);
                let row = dx.row_mut(p);
                add_assign(row, &back_v);
                add_assign(row, &back_k);
            }
            db.query.add_outer(cache.inputs.row(0), &dquery0);
            let back_q = b.query.mul_vec(&dquery0);
            add_assign(dx.row_mut(0), &back_q);
        }
        _ => {
            return Err(ModelError::CacheMismatch(
                "encoder kind differs between cache and parameters".into(),
            ))
        }
    }
    for (p, &id) in cache.ids.iter().enumerate() {
        add_assign(grads.embed_row(id, h), dx.row(p));
        add_assign(grads.pos.row_mut(p), dx.row(p));
    }
    Ok(())
}

/// Accumulates gradients for a whole document given `dD`.
pub fn accumulate_backward<T: Scalar>(
    params: &EncoderParams<T>,
    caches: &[SentenceCache<T>],
    d_doc: &EncodedDocument<T>,
    grads: &mut EncoderGrads<T>,
) -> Result<(), ModelError> {
    if d_doc.k() != caches.len() || d_doc.h() != params.h() {
        return Err(ModelError::CacheMismatch(format!(
            "dD is {}x{} but forward produced {}x{}",
            d_doc.h(),
            d_doc.k(),
            params.h(),
            caches.len()
        )));
    }
    for (j, cache) in caches.iter().enumerate() {
        backward_sentence(params, cache, d_doc.column(j), grads)?;
    }
    Ok(())
}

pub fn encoder_backward<T: Scalar>(
    params: &EncoderParams<T>,
    caches: &[SentenceCache<T>],
    d_doc: &EncodedDocument<T>,
) -> Result<EncoderGrads<T>, ModelError> {
    let mut grads = EncoderGrads::zeros_like(params);
    accumulate_backward(params, caches, d_doc, &mut grads)?;
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmenter::{CLS, SEP};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims(h: usize, t_max: usize) -> EncoderDims {
        EncoderDims {
            h,
            v_buckets: 6,
            t_max,
            f: 3,
        }
    }

    fn seq(ids: &[u32]) -> TokenSequence {
        TokenSequence::from_ids(ids.to_vec()).unwrap()
    }

    /// Scalar loss `Σ_j dD_j · cls_j` so that its gradient is driven by `dD`.
    fn probe_loss(
        params: &EncoderParams<f64>,
        sentences: &[TokenSequence],
        dd: &EncodedDocument<f64>,
    ) -> f64 {
        let (doc, _) = encode_document(sentences, params).unwrap();
        (0..doc.k()).map(|j| dot(doc.column(j), dd.column(j))).sum()
    }

    fn finite_difference_check(kind: EncoderKind, h: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = EncoderParams::<f64>::init(kind, dims(h, 5), 0.7, &mut rng);
        let sentences = vec![seq(&[CLS, 4, 7, SEP]), seq(&[CLS, 9, 4, 5, SEP])];
        let cols: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..h).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let dd = EncodedDocument::from_columns(&cols).unwrap();
        let (_, caches) = encode_document(&sentences, &params).unwrap();
        let grads = encoder_backward(&params, &caches, &dd).unwrap();

        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        let names: Vec<&str> = params.tensors().iter().map(|(n, _)| *n).collect();
        for name in names {
            let analytic = grads.dense(name).unwrap();
            for idx in 0..analytic.len() {
                let mut plus = params.clone();
                let mut minus = params.clone();
                for (n, t) in plus.tensors_mut() {
                    if n == name {
                        t[idx] += eps;
                    }
                }
                for (n, t) in minus.tensors_mut() {
                    if n == name {
                        t[idx] -= eps;
                    }
                }
                let fd = (probe_loss(&plus, &sentences, &dd) - probe_loss(&minus, &sentences, &dd))
                    / (2.0 * eps);
                worst = worst.max((analytic[idx] - fd).abs() / fd.abs().max(1.0));
            }
        }
        worst
    }

    #[test]
    fn mean_pool_zero_params_gives_zero_cls() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params =
            EncoderParams::<f32>::init(EncoderKind::MeanPool, dims(4, 8), 0.05, &mut rng);
        if let EncoderLayer::MeanPool { proj, .. } = &mut params.layer {
            *proj = Mat::zeros(4, 4);
        }
        let (cls, _) = encode_sentence(&seq(&[CLS, 4, 5, SEP]), &params).unwrap();
        assert!(cls.iter().all(|&v| v == 0.0));

        let s = seq(&[CLS, 6, SEP]);
        let (doc, _) = encode_document(&[s.clone(), s.clone(), s], &params).unwrap();
        assert_eq!((doc.h(), doc.k()), (4, 3));
        assert!((0..3).all(|j| doc.column(j).iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn mean_pool_scalar_instance() {
        let mut params = EncoderParams::<f64>::zeros(EncoderKind::MeanPool, dims(1, 4));
        params.embed.as_mut_slice().fill(0.5);
        if let EncoderLayer::MeanPool { proj, .. } = &mut params.layer {
            proj.set(0, 0, 1.0);
        }
        let tokens = seq(&[CLS, 4, SEP]);
        let (cls, cache) = encode_sentence(&tokens, &params).unwrap();
        assert!((cls[0] - 0.462_117_157_260_009_7).abs() < 1e-12);

        let dd = EncodedDocument::from_columns(&[vec![1.0]]).unwrap();
        let grads = encoder_backward(&params, &[cache], &dd).unwrap();
        let dproj = grads.dense("projection").unwrap()[0];
        // mean(x) · (1 − cls²)
        assert!((dproj - 0.393_223_866_482_963_7).abs() < 1e-12);
        let mut plus = params.clone();
        let mut minus = params.clone();
        plus.tensors_mut()[2].1[0] += 1e-5;
        minus.tensors_mut()[2].1[0] -= 1e-5;
        let f = |p: &EncoderParams<f64>| encode_sentence(&tokens, p).unwrap().0[0];
        let fd = (f(&plus) - f(&minus)) / 2e-5;
        assert!((dproj - fd).abs() < 1e-8);
    }

    #[test]
    fn mini_transformer_zero_weights_is_residual_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let init =
            EncoderParams::<f64>::init(EncoderKind::MiniTransformer, dims(3, 6), 0.05, &mut rng);
        let mut params = EncoderParams::zeros(EncoderKind::MiniTransformer, dims(3, 6));
        params.embed = init.embed.clone();
        params.pos = init.pos.clone();
        let (cls, _) = encode_sentence(&seq(&[CLS, 4, 8, SEP]), &params).unwrap();
        for i in 0..3 {
            assert_eq!(
                cls[i],
                params.embed.get(CLS as usize, i) + params.pos.get(0, i)
            );
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for kind in [EncoderKind::MeanPool, EncoderKind::MiniTransformer] {
            let params = EncoderParams::<f64>::init(kind, dims(3, 6), 0.3, &mut rng);
            let (doc, caches) = encode_document(&[seq(&[CLS, 5, SEP])], &params).unwrap();
            let dd = EncodedDocument::zeros(doc.h(), doc.k());
            assert!(encoder_backward(&params, &caches, &dd).unwrap().is_zero());
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        assert!(finite_difference_check(EncoderKind::MeanPool, 3, 5) < 1e-7);
        // h = 2, t = 3 instance with seed 7.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params =
            EncoderParams::<f64>::init(EncoderKind::MiniTransformer, dims(2, 3), 0.7, &mut rng);
        let tokens = seq(&[CLS, 6, SEP]);
        let (_, cache) = encode_sentence(&tokens, &params).unwrap();
        let dd = EncodedDocument::from_columns(&[vec![0.3, -1.1]]).unwrap();
        let grads = encoder_backward(&params, &[cache], &dd).unwrap();
        let eps = 1e-5;
        for (name, values) in params.tensors() {
            let analytic = grads.dense(name).unwrap();
            for idx in 0..values.len() {
                let mut plus = params.clone();
                let mut minus = params.clone();
                plus.tensors_mut()
                    .into_iter()
                    .find(|(n, _)| *n == name)
                    .unwrap()
                    .1[idx] += eps;
                minus
                    .tensors_mut()
                    .into_iter()
                    .find(|(n, _)| *n == name)
                    .unwrap()
                    .1[idx] -= eps;
                let sentences = [tokens.clone()];
                let fd = (probe_loss(&plus, &sentences, &dd) - probe_loss(&minus, &sentences, &dd))
                    / (2.0 * eps);
                let rel = (analytic[idx] - fd).abs() / fd.abs().max(1.0);
                assert!(
                    rel < 1e-4,
                    "{name}[{idx}]: analytic {} vs fd {fd}",
                    analytic[idx]
                );
            }
        }
        assert!(finite_difference_check(EncoderKind::MiniTransformer, 4, 8) < 1e-7);
    }

    #[test]
    fn position_table_makes_order_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params =
            EncoderParams::<f64>::init(EncoderKind::MiniTransformer, dims(4, 6), 0.5, &mut rng);
        let (a, _) = encode_sentence(&seq(&[CLS, 4, 5, 6, SEP]), &params).unwrap();
        let (b, _) = encode_sentence(&seq(&[CLS, 5, 4, 6, SEP]), &params).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn shape_errors() {
        let params = EncoderParams::<f32>::zeros(EncoderKind::MeanPool, dims(2, 3));
        assert!(matches!(
            encode_sentence(&seq(&[CLS, 4, 5, SEP]), &params),
            Err(ModelError::ShapeMismatch(_))
        ));
        assert!(matches!(
            encode_sentence(&seq(&[CLS, 400, SEP]), &params),
            Err(ModelError::ShapeMismatch(_))
        ));
        let (doc, caches) = encode_document(&[seq(&[CLS, 4, SEP])], &params).unwrap();
        let wrong = EncodedDocument::zeros(doc.h(), 2);
        assert!(matches!(
            encoder_backward(&params, &caches, &wrong),
            Err(ModelError::CacheMismatch(_))
        ));
        let other = EncoderParams::<f32>::zeros(EncoderKind::MiniTransformer, dims(2, 3));
        assert!(matches!(
            encoder_backward(&other, &caches, &doc),
            Err(ModelError::CacheMismatch(_))
        ));
    }
}
