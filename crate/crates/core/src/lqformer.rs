//! Iterative gated cross-modal fusion producing a chain of latent thoughts.

use std::io::{Read, Write};
use std::str::FromStr;

use crate::backbone::{aggregate_hidden, Chunk, LmIds, Session};
use crate::config::{H0Pool, HiddenAgg, ModelConfig};
use crate::error::{Error, Result};
use crate::numkernel::{Mask, Tape, Tensor, Var};
use crate::params::{Binding, Init, ParamId, ParamStore};
use crate::rng::SeedRng;

#[derive(Clone, Debug)]
pub struct LqIds {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub glu_w1: ParamId,
    pub glu_b: ParamId,
    pub glu_w2: ParamId,
    pub glu_c: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    pub bot: ParamId,
    pub eot: ParamId,
    pub hidden_proj: Option<ParamId>,
}

impl LqIds {
    pub fn register(store: &mut ParamStore, rng: &SeedRng, cfg: &ModelConfig) -> Result<Self> {
        let (d, dv) = (cfg.d_t, cfg.d_v);
        let std = 1.0 / (d as f64).sqrt();
        let kv_std = cfg.kv_init_gain / (dv as f64).sqrt();
        let mut p = |n: &str, shape: &[usize], init: Init| store.init(rng, &format!("lqformer.{n}"), shape, init);
        let ids = LqIds {
            ln1_g: p("ln1_g", &[d], Init::Ones)?,
            ln1_b: p("ln1_b", &[d], Init::Zeros)?,
            wq: p("wq", &[d, d], Init::Normal(std))?,
            wk: p("wk", &[dv, d], Init::Normal(kv_std))?,
            bk: p("bk", &[d], Init::Zeros)?,
            wv: p("wv", &[dv, d], Init::Normal(kv_std))?,
            bv: p("bv", &[d], Init::Zeros)?,
            wo: p("wo", &[d, d], Init::Normal(std))?,
            bo: p("bo", &[d], Init::Zeros)?,
            glu_w1: p("glu_w1", &[d, d], Init::Normal(std))?,
            glu_b: p("glu_b", &[d], Init::Zeros)?,
            glu_w2: p("glu_w2", &[d, d], Init::Normal(std))?,
            glu_c: p("glu_c", &[d], Init::Zeros)?,
            ln2_g: p("ln2_g", &[d], Init::Ones)?,
            ln2_b: p("ln2_b", &[d], Init::Zeros)?,
            ffn_w1: p("ffn_w1", &[d, 4 * d], Init::Normal(std))?,
            ffn_b1: p("ffn_b1", &[4 * d], Init::Zeros)?,
            ffn_w2: p("ffn_w2", &[4 * d, d], Init::Normal(0.5 / (4.0 * d as f64).sqrt()))?,
            ffn_b2: p("ffn_b2", &[d], Init::Zeros)?,
            bot: p("bot", &[1, d], Init::Normal(std))?,
            eot: p("eot", &[1, d], Init::Normal(std))?,
            hidden_proj: None,
        };
        let hidden_proj = match cfg.hidden_agg {
            HiddenAgg::ConcatProject => Some(store.init(
                rng,
                "lqformer.hidden_proj",
                &[cfg.layers * d, d],
                Init::Normal(1.0 / ((cfg.layers * d) as f64).sqrt()),
            )?),
            _ => None,
        };
        Ok(LqIds { hidden_proj, ..ids })
    }

    /// Keys and values from the selected visual rows, computed once per chain.
    pub fn memory(&self, tape: &mut Tape, b: &Binding, v_selected: Var) -> Result<KvMemory> {
        let k = tape.matmul(v_selected, b.var(self.wk))?;
        let k = tape.add_row(k, b.var(self.bk))?;
        let v = tape.matmul(v_selected, b.var(self.wv))?;
        let v = tape.add_row(v, b.var(self.bv))?;
        Ok(KvMemory { k, v })
    }

    /// `h_fus = CrossAttn(LN(h), V_sel)`,
    /// `h_glu = (h_fus W1 + b) ⊙ σ(h W2 + c)`,
    /// `z = FFN(LN(h + h_glu))`.
    pub fn fuse(&self, tape: &mut Tape, b: &Binding, cfg: &ModelConfig, h: Var, mem: &KvMemory) -> Result<Fusion> {
        let d = cfg.d_t;
        if tape.shape(h) != [1, d] {
            return Err(Error::Dimension(format!(
                "thought state must be [1 x {d}], got {:?}",
                tape.shape(h)
            )));
        }
        let q = tape.layer_norm(h, b.var(self.ln1_g), b.var(self.ln1_b), cfg.ln_eps)?;
        let q = tape.matmul(q, b.var(self.wq))?;
        let a = tape.attention(q, mem.k, mem.v, cfg.lq_heads, Mask::None)?;
        let attn_node = a;
        let f = tape.matmul(a, b.var(self.wo))?;
        let h_fus = tape.add_row(f, b.var(self.bo))?;
        let lin = tape.matmul(h_fus, b.var(self.glu_w1))?;
        let lin = tape.add_row(lin, b.var(self.glu_b))?;
        let gate = tape.matmul(h, b.var(self.glu_w2))?;
        let gate = tape.add_row(gate, b.var(self.glu_c))?;
        let gate = tape.sigmoid(gate)?;
        let h_glu = tape.mul(lin, gate)?;
        let r = tape.add(h, h_glu)?;
        let r = tape.layer_norm(r, b.var(self.ln2_g), b.var(self.ln2_b), cfg.ln_eps)?;
        let f = tape.matmul(r, b.var(self.ffn_w1))?;
        let f = tape.add_row(f, b.var(self.ffn_b1))?;
        let f = tape.gelu(f)?;
        let f = tape.matmul(f, b.var(self.ffn_w2))?;
        let z = tape.add_row(f, b.var(self.ffn_b2))?;
        Ok(Fusion {
            z,
            h_fus,
            h_glu,
            attn: attn_node,
        })
    }
}

pub struct KvMemory {
    pub k: Var,
    pub v: Var,
}

pub struct Fusion {
    pub z: Var,
    pub h_fus: Var,
    pub h_glu: Var,
    /// Cross-attention node; its probabilities are the step's visual focus.
    pub attn: Var,
}

/// One fusion step on plain tensors with every parameter frozen.
pub fn fusion_step(store: &ParamStore, ids: &LqIds, cfg: &ModelConfig, h: &Tensor, v_selected: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let b = Binding::frozen(&mut tape, store)?;
    let h = tape.constant(h.clone().reshape(vec![1, cfg.d_t])?)?;
    let v = tape.constant(v_selected.clone())?;
    if tape.shape(v)[1] != cfg.d_v {
        return Err(Error::Dimension(format!(
            "visual rows have width {}, expected {}",
            tape.shape(v)[1],
            cfg.d_v
        )));
    }
    let mem = ids.memory(&mut tape, &b, v)?;
    let out = ids.fuse(&mut tape, &b, cfg, h, &mem)?;
    Ok(tape.value(out.z).clone())
}

/// `h_0` from instruction embeddings `[M_i x d_t]`.
pub fn init_thought_state(instruction: &Tensor, pool: H0Pool) -> Result<Tensor> {
    if instruction.shape().len() != 2 || instruction.rows() == 0 {
        return Err(Error::Argument("instruction must contain at least one token".into()));
    }
    let (m, d) = (instruction.rows(), instruction.cols());
    let out = match pool {
        H0Pool::Last => instruction.row(m - 1).to_vec(),
        H0Pool::Mean => {
            let mut acc = vec![0.0; d];
            for r in 0..m {
                for (a, v) in acc.iter_mut().zip(instruction.row(r)) {
                    *a += v;
                }
            }
            acc.iter_mut().for_each(|a| *a /= m as f64);
            acc
        }
    };
    Tensor::new(vec![1, d], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Cosine,
    L1,
    L2,
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "l1" | "L1" => Ok(Metric::L1),
            "l2" | "L2" => Ok(Metric::L2),
            other => Err(Error::Config(format!("unknown halting metric `{other}`"))),
        }
    }
}

impl Metric {
    /// Distance between consecutive thoughts; cosine uses `1 - cos`.
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::L1 => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
            Metric::L2 => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
            Metric::Cosine => {
                if a == b {
                    return 0.0;
                }
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    return 1.0;
                }
                (1.0 - dot / (na * nb)).max(0.0)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepDistance {
    pub cosine: f64,
    pub l1: f64,
    pub l2: f64,
}

impl StepDistance {
    pub fn between(a: &[f64], b: &[f64]) -> Self {
        StepDistance {
            cosine: Metric::Cosine.distance(a, b),
            l1: Metric::L1.distance(a, b),
            l2: Metric::L2.distance(a, b),
        }
    }

    pub fn get(&self, m: Metric) -> f64 {
        match m {
            Metric::Cosine => self.cosine,
            Metric::L1 => self.l1,
            Metric::L2 => self.l2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThoughtChain {
    pub thoughts: Vec<Vec<f64>>,
    pub step_distances: Vec<StepDistance>,
    pub halted_early: bool,
    pub bot_eot: (Vec<f64>, Vec<f64>),
}

impl ThoughtChain {
    pub fn k(&self) -> usize {
        self.thoughts.len()
    }

    pub fn d_t(&self) -> usize {
        self.bot_eot.0.len()
    }

    pub fn matrix(&self) -> Result<Tensor> {
        Tensor::new(vec![self.k(), self.d_t()], self.thoughts.concat())
    }

    /// `u32 K, u32 d_t, K*d_t f64, u32 steps, 3*steps f64 (cos, l1, l2), u8 halted`,
    /// little-endian.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&(self.k() as u32).to_le_bytes())?;
        w.write_all(&(self.d_t() as u32).to_le_bytes())?;
        for t in &self.thoughts {
            for v in t {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.write_all(&(self.step_distances.len() as u32).to_le_bytes())?;
        for s in &self.step_distances {
            for v in [s.cosine, s.l1, s.l2] {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.write_all(&[u8::from(self.halted_early)])?;
        Ok(())
    }

    /// Inverse of [`ThoughtChain::write_to`]; the delimiters are not stored
    /// and come back as zeros.
    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut u32b = [0u8; 4];
        let mut f64b = [0u8; 8];
        let mut read_u32 = |r: &mut dyn Read| -> Result<usize> {
            r.read_exact(&mut u32b).map_err(|_| Error::Corrupt("truncated thought chain".into()))?;
            Ok(u32::from_le_bytes(u32b) as usize)
        };
        let mut read_f64 = |r: &mut dyn Read| -> Result<f64> {
            r.read_exact(&mut f64b).map_err(|_| Error::Corrupt("truncated thought chain".into()))?;
            Ok(f64::from_le_bytes(f64b))
        };
        let k = read_u32(r)?;
        let d = read_u32(r)?;
        let mut thoughts = Vec::with_capacity(k);
        for _ in 0..k {
            thoughts.push((0..d).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?);
        }
        let n = read_u32(r)?;
        let mut step_distances = Vec::with_capacity(n);
        for _ in 0..n {
            step_distances.push(StepDistance {
                cosine: read_f64(r)?,
                l1: read_f64(r)?,
                l2: read_f64(r)?,
            });
        }
        let mut h = [0u8; 1];
        r.read_exact(&mut h).map_err(|_| Error::Corrupt("truncated thought chain".into()))?;
        Ok(ThoughtChain {
            thoughts,
            step_distances,
            halted_early: h[0] != 0,
            bot_eot: (vec![0.0; d], vec![0.0; d]),
        })
    }
}

/// Supplies `h_k`, the language model's view of `[V_T; T; <|bot|>; z_1..z_{k-1}]`.
pub trait ContextProvider {
    /// Context for the next step. `last` is the thought produced by the
    /// previous step, `None` on the first call.
    fn next_context(&mut self, tape: &mut Tape, last: Option<Var>) -> Result<Var>;

    /// Attention of the most recent final position, `[L x N_h x 1 x P]`.
    fn last_attention(&self, tape: &Tape) -> Option<Tensor>;
}

/// Provider backed by a live session: each thought is fed once and the
/// cached keys and values are reused.
pub struct CachedContext<'a> {
    pub sess: &'a mut Session,
    pub b: &'a Binding,
    pub lm: &'a LmIds,
    pub cfg: &'a ModelConfig,
    pub hidden_proj: Option<Var>,
    /// Chunk whose final position gives the next context.
    pub pending: Option<Chunk>,
}

impl ContextProvider for CachedContext<'_> {
    fn next_context(&mut self, tape: &mut Tape, last: Option<Var>) -> Result<Var> {
        if let Some(z) = last {
            self.pending = Some(self.sess.feed(tape, self.b, self.lm, self.cfg, z)?);
        }
        let chunk = self
            .pending
            .as_ref()
            .ok_or_else(|| Error::Argument("context provider has no fed prefix".into()))?;
        let rows = chunk.last_rows(tape)?;
        aggregate_hidden(tape, &rows, self.cfg.hidden_agg, self.hidden_proj)
    }

    fn last_attention(&self, tape: &Tape) -> Option<Tensor> {
        self.pending
            .as_ref()
            .map(|c| c.query_attention(tape, self.cfg.heads, c.rows - 1))
    }
}

/// Reference provider that re-runs the whole prefix from scratch each step.
pub struct RecomputeContext<'a> {
    pub prefix: Var,
    pub thoughts: Vec<Var>,
    pub b: &'a Binding,
    pub lm: &'a LmIds,
    pub cfg: &'a ModelConfig,
    pub hidden_proj: Option<Var>,
    last: Option<Tensor>,
}

impl<'a> RecomputeContext<'a> {
    pub fn new(prefix: Var, b: &'a Binding, lm: &'a LmIds, cfg: &'a ModelConfig, hidden_proj: Option<Var>) -> Self {
        RecomputeContext {
            prefix,
            thoughts: Vec::new(),
            b,
            lm,
            cfg,
            hidden_proj,
            last: None,
        }
    }
}

impl ContextProvider for RecomputeContext<'_> {
    fn next_context(&mut self, tape: &mut Tape, last: Option<Var>) -> Result<Var> {
        if let Some(z) = last {
            self.thoughts.push(z);
        }
        let mut parts = vec![self.prefix];
        parts.extend_from_slice(&self.thoughts);
        let seq = tape.concat_rows(&parts)?;
        let mut sess = Session::new(self.cfg);
        let c = sess.feed(tape, self.b, self.lm, self.cfg, seq)?;
        self.last = Some(c.query_attention(tape, self.cfg.heads, c.rows - 1));
        let rows = c.last_rows(tape)?;
        aggregate_hidden(tape, &rows, self.cfg.hidden_agg, self.hidden_proj)
    }

    fn last_attention(&self, _tape: &Tape) -> Option<Tensor> {
        self.last.clone()
    }
}

/// When to stop early.
#[derive(Clone, Copy, Debug)]
pub struct Halting {
    pub metric: Metric,
    pub threshold: f64,
}

impl Halting {
    pub fn new(metric: Metric, threshold: f64) -> Result<Self> {
        let ok = match metric {
            Metric::Cosine => threshold > 0.0 && threshold <= 1.0,
            _ => threshold > 0.0,
        };
        if !ok {
            return Err(Error::Config(format!("halting threshold {threshold} invalid for {metric:?}")));
        }
        Ok(Halting { metric, threshold })
    }
}

/// Runs the step loop. `step` maps `h_k` to `z_k`. Returns the thought Vars
/// alongside their values.
pub fn run_chain<P, F>(
    tape: &mut Tape,
    provider: &mut P,
    mut step: F,
    k_max: usize,
    halting: Option<Halting>,
    bot_eot: (Vec<f64>, Vec<f64>),
) -> Result<(Vec<Var>, ThoughtChain)>
where
    P: ContextProvider + ?Sized,
    F: FnMut(&mut Tape, &P, Var) -> Result<Var>,
{
    if halting.is_some() && k_max < 2 {
        return Err(Error::Config("adaptive halting needs K_max >= 2".into()));
    }
    let mut vars: Vec<Var> = Vec::with_capacity(k_max);
    let mut chain = ThoughtChain {
        thoughts: Vec::with_capacity(k_max),
        step_distances: Vec::new(),
        halted_early: false,
        bot_eot,
    };
    for k in 1..=k_max {
        let h = provider.next_context(tape, vars.last().copied())?;
        let z = step(tape, provider, h)?;
        let zv = tape.value(z).data().to_vec();
        if let Some(prev) = chain.thoughts.last() {
            chain.step_distances.push(StepDistance::between(&zv, prev));
        }
        chain.thoughts.push(zv);
        vars.push(z);
        if let (Some(hl), Some(d)) = (halting, chain.step_distances.last()) {
            if k >= 2 && d.get(hl.metric) < hl.threshold {
                chain.halted_early = k < k_max;
                break;
            }
        }
    }
    Ok((vars, chain))
}

/// Decoder interface used by [`interleaved_generate`].
pub trait LatentDecoder {
    /// Greedy choice at the current position.
    fn next_token(&mut self) -> Result<usize>;
    /// Appends a token to the context.
    fn push_token(&mut self, id: usize) -> Result<()>;
    /// Runs `n` fusion steps and splices `<|bot|> z_1..z_n <|eot|>`.
    fn latent_burst(&mut self, n: usize) -> Result<ThoughtChain>;
}

/// Alternates text and latent bursts: every emitted newline triggers one
/// burst, at most `max_segments` times; `eos` or `max_new` ends decoding.
pub fn interleaved_generate<D: LatentDecoder + ?Sized>(
    dec: &mut D,
    eos: usize,
    newline: usize,
    latent_burst: usize,
    max_segments: usize,
    max_new: usize,
) -> Result<(Vec<usize>, Vec<ThoughtChain>)> {
    let mut ids = Vec::new();
    let mut bursts = Vec::new();
    while ids.len() < max_new {
        let t = dec.next_token()?;
        ids.push(t);
        if t == eos || ids.len() == max_new {
            break;
        }
        dec.push_token(t)?;
        if t == newline && bursts.len() < max_segments {
            bursts.push(dec.latent_burst(latent_burst)?);
        }
    }
    Ok((ids, bursts))
}
