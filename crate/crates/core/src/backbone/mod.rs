//! Small stand-ins for the vision encoder, connector and language model.

mod block;
pub mod encoder;
pub mod lm;
pub mod projector;

pub use block::{block_forward, BlockIds, KvCache};
pub use encoder::EncoderIds;
pub use lm::{aggregate_hidden, argmax, generate_answer, greedy_decode, lm_forward, Chunk, LmIds, Session};
pub use projector::ProjectorIds;

use crate::error::{Error, Result};
use crate::numkernel::Tensor;

/// Encoder output `[N_v x d_v]`, rows in row-major grid order.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualFeatures {
    pub tokens: Tensor,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl VisualFeatures {
    pub fn new(tokens: Tensor, grid_h: usize, grid_w: usize) -> Result<Self> {
        if tokens.shape().len() != 2 || tokens.rows() != grid_h * grid_w {
            return Err(Error::Config(format!(
                "{:?} tokens do not fill a {grid_h}x{grid_w} grid",
                tokens.shape()
            )));
        }
        Ok(VisualFeatures { tokens, grid_h, grid_w })
    }

    pub fn n_v(&self) -> usize {
        self.tokens.rows()
    }

    /// Grid cell `(i, j)` of token `p`.
    pub fn cell(&self, p: usize) -> (usize, usize) {
        (p / self.grid_w, p % self.grid_w)
    }

    pub fn token_index(&self, i: usize, j: usize) -> usize {
        i * self.grid_w + j
    }
}

/// Connector output `[N' x d_t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedVisualTokens {
    pub tokens: Tensor,
}

/// Half-open range of visual positions in an LM sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImgSpan {
    pub start: usize,
    pub end: usize,
}

impl ImgSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

#[derive(Clone, Debug)]
pub struct LMForwardRecord {
    /// `[L x d_t]`.
    pub per_layer_last_hidden: Tensor,
    /// `[L x N_h x Q x P_total]`.
    pub attention: Tensor,
    /// `[S x vocab]`, or only the rows that were requested.
    pub logits: Tensor,
    pub img_span: ImgSpan,
}

impl LMForwardRecord {
    /// The same record restricted to one query row.
    pub fn query(&self, q: usize) -> Result<LMForwardRecord> {
        let s = self.attention.shape();
        let (l, h, nq, p) = (s[0], s[1], s[2], s[3]);
        if q >= nq {
            return Err(Error::Range(format!("query {q} of {nq}")));
        }
        let mut out = Vec::with_capacity(l * h * p);
        for li in 0..l {
            for hi in 0..h {
                let base = ((li * h + hi) * nq + q) * p;
                out.extend_from_slice(&self.attention.data()[base..base + p]);
            }
        }
        Ok(LMForwardRecord {
            attention: Tensor::from_parts(vec![l, h, 1, p], out),
            ..self.clone()
        })
    }
}
