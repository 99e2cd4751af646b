use crate::error::Result;
use crate::numkernel::{Mask, Tape, Var};
use crate::params::{Binding, Init, ParamId, ParamStore};
use crate::rng::SeedRng;

/// Pre-LN transformer block: `x + attn(ln1 x)`, then `x + mlp(ln2 x)`.
#[derive(Clone, Debug)]
pub struct BlockIds {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl BlockIds {
    pub fn register(store: &mut ParamStore, rng: &SeedRng, prefix: &str, d: usize, std: f64, out_std: f64) -> Result<Self> {
        let mut p = |n: &str, shape: &[usize], init: Init| store.init(rng, &format!("{prefix}.{n}"), shape, init);
        Ok(BlockIds {
            ln1_g: p("ln1_g", &[d], Init::Ones)?,
            ln1_b: p("ln1_b", &[d], Init::Zeros)?,
            wq: p("wq", &[d, d], Init::Normal(std))?,
            wk: p("wk", &[d, d], Init::Normal(std))?,
            wv: p("wv", &[d, d], Init::Normal(std))?,
            wo: p("wo", &[d, d], Init::Normal(out_std))?,
            ln2_g: p("ln2_g", &[d], Init::Ones)?,
            ln2_b: p("ln2_b", &[d], Init::Zeros)?,
            w1: p("w1", &[d, 4 * d], Init::Normal(std))?,
            b1: p("b1", &[4 * d], Init::Zeros)?,
            w2: p("w2", &[4 * d, d], Init::Normal(out_std))?,
            b2: p("b2", &[d], Init::Zeros)?,
        })
    }
}

/// Keys and values of every position fed so far.
#[derive(Clone, Debug, Default)]
pub struct KvCache {
    pub k: Option<Var>,
    pub v: Option<Var>,
}

pub struct BlockOut {
    pub out: Var,
    pub attn: Var,
}

/// Runs one block over `x` (`[n x d]`). With a cache, keys and values are
/// appended to it and attention is causal over everything cached.
pub fn block_forward(
    tape: &mut Tape,
    b: &Binding,
    ids: &BlockIds,
    x: Var,
    heads: usize,
    eps: f64,
    cache: Option<&mut KvCache>,
) -> Result<BlockOut> {
    let h = tape.layer_norm(x, b.var(ids.ln1_g), b.var(ids.ln1_b), eps)?;
    let q = tape.matmul(h, b.var(ids.wq))?;
    let k = tape.matmul(h, b.var(ids.wk))?;
    let v = tape.matmul(h, b.var(ids.wv))?;
    let (k_all, v_all, mask) = match cache {
        Some(c) => {
            let offset = c.k.map_or(0, |kp| tape.shape(kp)[0]);
            let (ka, va) = match (c.k, c.v) {
                (Some(kp), Some(vp)) => (tape.concat_rows(&[kp, k])?, tape.concat_rows(&[vp, v])?),
                _ => (k, v),
            };
            c.k = Some(ka);
            c.v = Some(va);
            (ka, va, Mask::Causal { offset })
        }
        None => (k, v, Mask::None),
    };
    let attn = tape.attention(q, k_all, v_all, heads, mask)?;
    let o = tape.matmul(attn, b.var(ids.wo))?;
    let x = tape.add(x, o)?;
    let h = tape.layer_norm(x, b.var(ids.ln2_g), b.var(ids.ln2_b), eps)?;
    let h = tape.matmul(h, b.var(ids.w1))?;
    let h = tape.add_row(h, b.var(ids.b1))?;
    let h = tape.gelu(h)?;
    let h = tape.matmul(h, b.var(ids.w2))?;
    let h = tape.add_row(h, b.var(ids.b2))?;
    let out = tape.add(x, h)?;
    Ok(BlockOut { out, attn })
}
