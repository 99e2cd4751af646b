use super::block::{block_forward, BlockIds, KvCache};
use super::{ImgSpan, LMForwardRecord};
use crate::config::{HiddenAgg, ModelConfig};
use crate::error::{Error, Result};
use crate::numkernel::{Tape, Tensor, Var};
use crate::params::{Binding, Init, ParamId, ParamStore};
use crate::rng::SeedRng;

/// Decoder-only causal language model.
#[derive(Clone, Debug)]
pub struct LmIds {
    pub embed: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<BlockIds>,
    pub lnf_g: ParamId,
    pub lnf_b: ParamId,
    pub head: ParamId,
}

impl LmIds {
    pub fn register(store: &mut ParamStore, rng: &SeedRng, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_t;
        let emb_std = 1.0 / (d as f64).sqrt();
        let embed = store.init(rng, "lm.embed", &[cfg.vocab, d], Init::Normal(emb_std))?;
        let pos = store.init(rng, "lm.pos", &[cfg.max_len, d], Init::Normal(emb_std))?;
        let out_std = cfg.init_std / (2.0 * cfg.layers as f64).sqrt();
        let blocks = (0..cfg.layers)
            .map(|l| BlockIds::register(store, rng, &format!("lm.l{l}"), d, cfg.init_std, out_std))
            .collect::<Result<_>>()?;
        Ok(LmIds {
            embed,
            pos,
            blocks,
            lnf_g: store.init(rng, "lm.lnf_g", &[d], Init::Ones)?,
            lnf_b: store.init(rng, "lm.lnf_b", &[d], Init::Zeros)?,
            head: store.init(rng, "lm.head", &[d, cfg.vocab], Init::Normal(cfg.init_std))?,
        })
    }

    pub fn embed(&self, tape: &mut Tape, b: &Binding, ids: &[usize]) -> Result<Var> {
        tape.select_rows(b.var(self.embed), ids)
    }

    /// Logits for the rows of a final-layer hidden matrix.
    pub fn logits(&self, tape: &mut Tape, b: &Binding, cfg: &ModelConfig, hidden: Var) -> Result<Var> {
        let h = tape.layer_norm(hidden, b.var(self.lnf_g), b.var(self.lnf_b), cfg.ln_eps)?;
        tape.matmul(h, b.var(self.head))
    }
}

/// Incremental forward state: every layer's cached keys and values.
///
/// Feeding chunks one after another is equivalent to one causal forward over
/// their concatenation, and every value stays on the tape so gradients reach
/// all earlier chunks.
#[derive(Clone, Debug)]
pub struct Session {
    caches: Vec<KvCache>,
    len: usize,
}

/// Outputs of one fed chunk.
pub struct Chunk {
    pub start: usize,
    pub rows: usize,
    /// Block outputs per layer, each `[rows x d_t]`.
    pub layer_out: Vec<Var>,
    /// Attention nodes per layer.
    pub attn: Vec<Var>,
}

impl Session {
    pub fn new(cfg: &ModelConfig) -> Self {
        Session {
            caches: vec![KvCache::default(); cfg.layers],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Feeds input embeddings `x` (`[n x d_t]`) at the next positions.
    pub fn feed(&mut self, tape: &mut Tape, b: &Binding, lm: &LmIds, cfg: &ModelConfig, x: Var) -> Result<Chunk> {
        let n = tape.shape(x)[0];
        if self.len + n > cfg.max_len {
            return Err(Error::Range(format!(
                "sequence of {} positions exceeds max_len {}",
                self.len + n,
                cfg.max_len
            )));
        }
        let pos = tape.slice_rows(b.var(lm.pos), self.len, n)?;
        let mut h = tape.add(x, pos)?;
        let mut layer_out = Vec::with_capacity(lm.blocks.len());
        let mut attn = Vec::with_capacity(lm.blocks.len());
        for (blk, cache) in lm.blocks.iter().zip(self.caches.iter_mut()) {
            let o = block_forward(tape, b, blk, h, cfg.heads, cfg.ln_eps, Some(cache))?;
            h = o.out;
            layer_out.push(o.out);
            attn.push(o.attn);
        }
        let start = self.len;
        self.len += n;
        Ok(Chunk {
            start,
            rows: n,
            layer_out,
            attn,
        })
    }
}

impl Chunk {
    pub fn final_hidden(&self) -> Var {
        *self.layer_out.last().expect("at least one layer")
    }

    /// Final-position block output of every layer, each `[1 x d_t]`.
    pub fn last_rows(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        self.layer_out
            .iter()
            .map(|&o| tape.slice_rows(o, self.rows - 1, 1))
            .collect()
    }

    /// Attention probabilities of the chunk's `row`-th query, per layer and
    /// head, as `[L x N_h x 1 x keys]`.
    pub fn query_attention(&self, tape: &Tape, heads: usize, row: usize) -> Tensor {
        let keys = self.start + self.rows;
        let mut out = Vec::with_capacity(self.attn.len() * heads * keys);
        for &a in &self.attn {
            let p = tape.attention_probs(a).expect("attention node");
            for h in 0..heads {
                let base = (h * self.rows + row) * keys;
                out.extend_from_slice(&p[base..base + keys]);
            }
        }
        Tensor::from_parts(vec![self.attn.len(), heads, 1, keys], out)
    }
}

/// Reduces per-layer final-position states to one `[1 x d_t]` vector.
pub fn aggregate_hidden(tape: &mut Tape, rows: &[Var], agg: HiddenAgg, proj: Option<Var>) -> Result<Var> {
    match agg {
        HiddenAgg::Mean => {
            let mut acc = rows[0];
            for &r in &rows[1..] {
                acc = tape.add(acc, r)?;
            }
            tape.scale(acc, 1.0 / rows.len() as f64)
        }
        HiddenAgg::LastLayer => Ok(*rows.last().expect("at least one layer")),
        HiddenAgg::ConcatProject => {
            let p = proj.ok_or_else(|| Error::Config("concat_project needs a hidden projection".into()))?;
            let d = tape.shape(rows[0])[1];
            let mut acc = None;
            for (l, &r) in rows.iter().enumerate() {
                let block = tape.slice_rows(p, l * d, d)?;
                let y = tape.matmul(r, block)?;
                acc = Some(match acc {
                    None => y,
                    Some(a) => tape.add(a, y)?,
                });
            }
            Ok(acc.expect("at least one layer"))
        }
    }
}

/// Full causal forward over `sequence`, recording every attention map.
pub fn lm_forward(lm: &LmIds, store: &ParamStore, cfg: &ModelConfig, sequence: &Tensor, img_span: ImgSpan) -> Result<LMForwardRecord> {
    if sequence.shape().len() != 2 || sequence.shape()[1] != cfg.d_t {
        return Err(Error::Dimension(format!(
            "sequence must be [S x {}], got {:?}",
            cfg.d_t,
            sequence.shape()
        )));
    }
    let s = sequence.rows();
    if img_span.end < img_span.start || img_span.end > s {
        return Err(Error::Range(format!("image span {img_span:?} outside {s} positions")));
    }
    let mut tape = Tape::new();
    let b = Binding::frozen(&mut tape, store)?;
    let x = tape.constant(sequence.clone())?;
    let mut sess = Session::new(cfg);
    let chunk = sess.feed(&mut tape, &b, lm, cfg, x)?;
    let mut last = Vec::with_capacity(cfg.layers * cfg.d_t);
    for &o in &chunk.layer_out {
        last.extend_from_slice(tape.value(o).row(s - 1));
    }
    let mut attention = Vec::with_capacity(cfg.layers * cfg.heads * s * s);
    for &a in &chunk.attn {
        attention.extend_from_slice(tape.attention_probs(a).expect("attention node"));
    }
    let logits = lm.logits(&mut tape, &b, cfg, chunk.final_hidden())?;
    Ok(LMForwardRecord {
        per_layer_last_hidden: Tensor::from_parts(vec![cfg.layers, cfg.d_t], last),
        attention: Tensor::from_parts(vec![cfg.layers, cfg.heads, s, s], attention),
        logits: tape.value(logits).clone(),
        img_span,
    })
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding from `first_logits` (the prediction at the current last
/// position) until `eos` or `max_new` tokens.
#[allow(clippy::too_many_arguments)]
pub fn greedy_decode(
    tape: &mut Tape,
    b: &Binding,
    lm: &LmIds,
    cfg: &ModelConfig,
    sess: &mut Session,
    first_logits: &[f64],
    max_new: usize,
    eos: usize,
) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    let mut logits = first_logits.to_vec();
    while out.len() < max_new {
        let id = argmax(&logits);
        out.push(id);
        if id == eos || out.len() == max_new || sess.len() >= cfg.max_len {
            break;
        }
        let e = lm.embed(tape, b, &[id])?;
        let c = sess.feed(tape, b, lm, cfg, e)?;
        let l = lm.logits(tape, b, cfg, c.final_hidden())?;
        logits = tape.value(l).data().to_vec();
    }
    Ok(out)
}

/// Greedy answer for a context of input embeddings `[S x d_t]`.
pub fn generate_answer(lm: &LmIds, store: &ParamStore, cfg: &ModelConfig, context: &Tensor, max_new: usize, eos: usize) -> Result<Vec<usize>> {
    if context.shape().len() != 2 || context.shape()[1] != cfg.d_t {
        return Err(Error::Dimension(format!(
            "context must be [S x {}], got {:?}",
            cfg.d_t,
            context.shape()
        )));
    }
    if max_new == 0 {
        return Ok(Vec::new());
    }
    let mut tape = Tape::new();
    let b = Binding::frozen(&mut tape, store)?;
    let x = tape.constant(context.clone())?;
    let mut sess = Session::new(cfg);
    let c = sess.feed(&mut tape, &b, lm, cfg, x)?;
    let last = tape.slice_rows(c.final_hidden(), c.rows - 1, 1)?;
    let l = lm.logits(&mut tape, &b, cfg, last)?;
    let first = tape.value(l).data().to_vec();
    greedy_decode(&mut tape, &b, lm, cfg, &mut sess, &first, max_new, eos)
}
