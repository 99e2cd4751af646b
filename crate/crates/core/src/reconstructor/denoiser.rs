use std::sync::Arc;

use crate::config::DiffusionConfig;
use crate::error::{Error, Result};
use crate::numkernel::{Mask, Tape, Tensor, Var, GATHER_ZERO};
use crate::params::{Binding, Init, ParamId, ParamStore};
use crate::rng::SeedRng;

/// 3x3 convolution over `[hw x c]` feature rows via an im2col gather.
#[derive(Clone, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    index: Arc<[usize]>,
    out_hw: usize,
    cols: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    fn register(store: &mut ParamStore, rng: &SeedRng, name: &str, hw: usize, cin: usize, cout: usize, stride: usize, std: Option<f64>) -> Result<Self> {
        let out_hw = (hw - 1) / stride + 1;
        let mut index = Vec::with_capacity(out_hw * out_hw * 9 * cin);
        for oi in 0..out_hw {
            for oj in 0..out_hw {
                for ki in 0..3 {
                    for kj in 0..3 {
                        let (ii, jj) = ((oi * stride + ki) as isize - 1, (oj * stride + kj) as isize - 1);
                        let inside = ii >= 0 && jj >= 0 && (ii as usize) < hw && (jj as usize) < hw;
                        for c in 0..cin {
                            index.push(if inside { (ii as usize * hw + jj as usize) * cin + c } else { GATHER_ZERO });
                        }
                    }
                }
            }
        }
        let std = std.unwrap_or(1.0 / ((9 * cin) as f64).sqrt());
        Ok(Conv {
            w: store.init(rng, &format!("{name}.w"), &[9 * cin, cout], Init::Normal(std))?,
            b: store.init(rng, &format!("{name}.b"), &[cout], Init::Zeros)?,
            index: index.into(),
            out_hw,
            cols: 9 * cin,
        })
    }

    fn forward(&self, tape: &mut Tape, b: &Binding, x: Var) -> Result<Var> {
        let cols = tape.gather(x, self.index.clone(), vec![self.out_hw * self.out_hw, self.cols])?;
        let y = tape.matmul(cols, b.var(self.w))?;
        tape.add_row(y, b.var(self.b))
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    ln1_g: ParamId,
    ln1_b: ParamId,
    conv1: Conv,
    t_w: ParamId,
    t_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    conv2: Conv,
}

impl ResBlock {
    fn register(store: &mut ParamStore, rng: &SeedRng, name: &str, hw: usize, ch: usize, time_dim: usize) -> Result<Self> {
        Ok(ResBlock {
            ln1_g: store.init(rng, &format!("{name}.ln1_g"), &[ch], Init::Ones)?,
            ln1_b: store.init(rng, &format!("{name}.ln1_b"), &[ch], Init::Zeros)?,
            conv1: Conv::register(store, rng, &format!("{name}.conv1"), hw, ch, ch, 1, None)?,
            t_w: store.init(rng, &format!("{name}.t_w"), &[time_dim, ch], Init::Normal(1.0 / (time_dim as f64).sqrt()))?,
            t_b: store.init(rng, &format!("{name}.t_b"), &[ch], Init::Zeros)?,
            ln2_g: store.init(rng, &format!("{name}.ln2_g"), &[ch], Init::Ones)?,
            ln2_b: store.init(rng, &format!("{name}.ln2_b"), &[ch], Init::Zeros)?,
            conv2: Conv::register(store, rng, &format!("{name}.conv2"), hw, ch, ch, 1, Some(0.3 / ((9 * ch) as f64).sqrt()))?,
        })
    }

    fn forward(&self, tape: &mut Tape, b: &Binding, x: Var, temb: Var, eps: f64) -> Result<Var> {
        let a = tape.layer_norm(x, b.var(self.ln1_g), b.var(self.ln1_b), eps)?;
        let a = tape.silu(a)?;
        let a = self.conv1.forward(tape, b, a)?;
        let tp = tape.matmul(temb, b.var(self.t_w))?;
        let tp = tape.add_row(tp, b.var(self.t_b))?;
        let a = tape.add_row(a, tp)?;
        let a = tape.layer_norm(a, b.var(self.ln2_g), b.var(self.ln2_b), eps)?;
        let a = tape.silu(a)?;
        let a = self.conv2.forward(tape, b, a)?;
        tape.add(x, a)
    }
}

#[derive(Clone, Debug)]
struct CrossAttn {
    ln_g: ParamId,
    ln_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

/// Small conditional U-Net on `[hw x C]` feature rows. Down levels halve
/// the side with a stride-2 convolution, up levels use nearest upsampling
/// and additive skips; the bottleneck cross-attends to the thoughts.
#[derive(Clone, Debug)]
pub struct Denoiser {
    channels: Vec<usize>,
    latent_c: usize,
    latent_hw: usize,
    time_dim: usize,
    attn_heads: usize,
    max_thoughts: usize,
    d_t: usize,
    eps: f64,
    conv_in: Conv,
    time_w1: ParamId,
    time_b1: ParamId,
    time_w2: ParamId,
    time_b2: ParamId,
    down: Vec<Vec<ResBlock>>,
    downsample: Vec<Conv>,
    mid1: ResBlock,
    attn: CrossAttn,
    mid2: ResBlock,
    /// Per level below the bottleneck: nearest-upsample index and conv.
    upsample: Vec<(Arc<[usize]>, Conv)>,
    up: Vec<Vec<ResBlock>>,
    out_ln_g: ParamId,
    out_ln_b: ParamId,
    conv_out: Conv,
    thought_pos: ParamId,
    null: Option<ParamId>,
}

fn upsample_index(from: usize, to: usize, c: usize) -> Arc<[usize]> {
    let mut idx = Vec::with_capacity(to * to * c);
    for i in 0..to {
        for j in 0..to {
            let (si, sj) = (i * from / to, j * from / to);
            for ch in 0..c {
                idx.push((si * from + sj) * c + ch);
            }
        }
    }
    idx.into()
}

impl Denoiser {
    pub fn register(store: &mut ParamStore, rng: &SeedRng, cfg: &DiffusionConfig, d_t: usize, eps: f64) -> Result<Self> {
        let ch = &cfg.channels;
        if ch.is_empty() || cfg.latent_c == 0 || cfg.latent_hw == 0 || cfg.time_dim % 2 != 0 || cfg.attn_dim % cfg.attn_heads.max(1) != 0 {
            return Err(Error::Config(format!("unusable denoiser shape {cfg:?}")));
        }
        let p = "denoiser";
        let mut sides = vec![cfg.latent_hw];
        for _ in 1..ch.len() {
            let s = *sides.last().expect("non-empty");
            sides.push((s - 1) / 2 + 1);
        }
        let td = cfg.time_dim;
        let conv_in = Conv::register(store, rng, &format!("{p}.conv_in"), cfg.latent_hw, cfg.latent_c, ch[0], 1, None)?;
        let time_w1 = store.init(rng, &format!("{p}.time_w1"), &[td, td], Init::Normal(1.0 / (td as f64).sqrt()))?;
        let time_b1 = store.init(rng, &format!("{p}.time_b1"), &[td], Init::Zeros)?;
        let time_w2 = store.init(rng, &format!("{p}.time_w2"), &[td, td], Init::Normal(1.0 / (td as f64).sqrt()))?;
        let time_b2 = store.init(rng, &format!("{p}.time_b2"), &[td], Init::Zeros)?;
        let mut down = Vec::new();
        let mut downsample = Vec::new();
        let mut upsample = Vec::new();
        let mut up = Vec::new();
        for (l, (&c, &s)) in ch.iter().zip(&sides).enumerate() {
            down.push(
                (0..cfg.layers_per_block)
                    .map(|i| ResBlock::register(store, rng, &format!("{p}.down{l}.res{i}"), s, c, td))
                    .collect::<Result<Vec<_>>>()?,
            );
            up.push(
                (0..cfg.layers_per_block)
                    .map(|i| ResBlock::register(store, rng, &format!("{p}.up{l}.res{i}"), s, c, td))
                    .collect::<Result<Vec<_>>>()?,
            );
            if l + 1 < ch.len() {
                downsample.push(Conv::register(store, rng, &format!("{p}.down{l}.sample"), s, c, ch[l + 1], 2, None)?);
                upsample.push((
                    upsample_index(sides[l + 1], s, ch[l + 1]),
                    Conv::register(store, rng, &format!("{p}.up{l}.sample"), s, ch[l + 1], c, 1, None)?,
                ));
            }
        }
        let (cb, sb) = (*ch.last().expect("non-empty"), *sides.last().expect("non-empty"));
        let a = cfg.attn_dim;
        let attn = CrossAttn {
            ln_g: store.init(rng, &format!("{p}.attn.ln_g"), &[cb], Init::Ones)?,
            ln_b: store.init(rng, &format!("{p}.attn.ln_b"), &[cb], Init::Zeros)?,
            wq: store.init(rng, &format!("{p}.attn.wq"), &[cb, a], Init::Normal(1.0 / (cb as f64).sqrt()))?,
            wk: store.init(rng, &format!("{p}.attn.wk"), &[d_t, a], Init::Normal(1.0 / (d_t as f64).sqrt()))?,
            wv: store.init(rng, &format!("{p}.attn.wv"), &[d_t, a], Init::Normal(1.0 / (d_t as f64).sqrt()))?,
            wo: store.init(rng, &format!("{p}.attn.wo"), &[a, cb], Init::Normal(1.0 / (a as f64).sqrt()))?,
            bo: store.init(rng, &format!("{p}.attn.bo"), &[cb], Init::Zeros)?,
        };
        Ok(Denoiser {
            channels: ch.clone(),
            latent_c: cfg.latent_c,
            latent_hw: cfg.latent_hw,
            time_dim: td,
            attn_heads: cfg.attn_heads,
            max_thoughts: cfg.max_thoughts,
            d_t,
            eps,
            conv_in,
            time_w1,
            time_b1,
            time_w2,
            time_b2,
            down,
            downsample,
            mid1: ResBlock::register(store, rng, &format!("{p}.mid1"), sb, cb, td)?,
            attn,
            mid2: ResBlock::register(store, rng, &format!("{p}.mid2"), sb, cb, td)?,
            upsample,
            up,
            out_ln_g: store.init(rng, &format!("{p}.out_ln_g"), &[ch[0]], Init::Ones)?,
            out_ln_b: store.init(rng, &format!("{p}.out_ln_b"), &[ch[0]], Init::Zeros)?,
            conv_out: Conv::register(store, rng, &format!("{p}.conv_out"), cfg.latent_hw, ch[0], cfg.latent_c, 1, Some(0.02))?,
            thought_pos: store.init(rng, &format!("{p}.thought_pos"), &[cfg.max_thoughts, d_t], Init::Normal(0.02))?,
            null: if cfg.null_token {
                Some(store.init(rng, &format!("{p}.null"), &[1, d_t], Init::Normal(0.02))?)
            } else {
                None
            },
        })
    }

    pub fn channels_in(&self) -> usize {
        self.latent_c
    }

    pub fn hw(&self) -> usize {
        self.latent_hw
    }

    /// Sinusoidal embedding of the timestep, `[1 x time_dim]`.
    pub fn time_embedding(&self, t: usize) -> Tensor {
        let half = self.time_dim / 2;
        let mut out = vec![0.0; self.time_dim];
        for i in 0..half {
            let f = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            out[i] = (t as f64 * f).sin();
            out[half + i] = (t as f64 * f).cos();
        }
        Tensor::from_parts(vec![1, self.time_dim], out)
    }

    /// `ε̂` for `x_t` given as `[hw x C]` rows, thoughts as `[K x d_t]`.
    pub fn forward(&self, tape: &mut Tape, b: &Binding, x_t: Var, t: usize, thoughts: Option<Var>) -> Result<Var> {
        let want = [self.latent_hw * self.latent_hw, self.latent_c];
        if tape.shape(x_t) != want {
            return Err(Error::Dimension(format!(
                "denoiser input must be {want:?}, got {:?}",
                tape.shape(x_t)
            )));
        }
        let cond = match thoughts {
            Some(z) if tape.shape(z)[0] > 0 => {
                let (k, d) = (tape.shape(z)[0], tape.shape(z)[1]);
                if d != self.d_t {
                    return Err(Error::Dimension(format!("thoughts have width {d}, expected {}", self.d_t)));
                }
                if k > self.max_thoughts {
                    return Err(Error::Range(format!("{k} thoughts exceed the positional table of {}", self.max_thoughts)));
                }
                let pos = tape.slice_rows(b.var(self.thought_pos), 0, k)?;
                tape.add(z, pos)?
            }
            _ => match self.null {
                Some(n) => b.var(n),
                None => return Err(Error::Conditioning("reconstruction needs at least one thought".into())),
            },
        };

        let te = tape.constant(self.time_embedding(t))?;
        let te = tape.matmul(te, b.var(self.time_w1))?;
        let te = tape.add_row(te, b.var(self.time_b1))?;
        let te = tape.silu(te)?;
        let te = tape.matmul(te, b.var(self.time_w2))?;
        let te = tape.add_row(te, b.var(self.time_b2))?;
        let temb = tape.silu(te)?;

        let eps = self.eps;
        let mut h = self.conv_in.forward(tape, b, x_t)?;
        let mut skips = Vec::with_capacity(self.channels.len());
        for l in 0..self.channels.len() {
            for r in &self.down[l] {
                h = r.forward(tape, b, h, temb, eps)?;
            }
            skips.push(h);
            if let Some(ds) = self.downsample.get(l) {
                h = ds.forward(tape, b, h)?;
            }
        }

        h = self.mid1.forward(tape, b, h, temb, eps)?;
        let a = &self.attn;
        let q = tape.layer_norm(h, b.var(a.ln_g), b.var(a.ln_b), eps)?;
        let q = tape.matmul(q, b.var(a.wq))?;
        let k = tape.matmul(cond, b.var(a.wk))?;
        let v = tape.matmul(cond, b.var(a.wv))?;
        let o = tape.attention(q, k, v, self.attn_heads, Mask::None)?;
        let o = tape.matmul(o, b.var(a.wo))?;
        let o = tape.add_row(o, b.var(a.bo))?;
        h = tape.add(h, o)?;
        h = self.mid2.forward(tape, b, h, temb, eps)?;

        for l in (0..self.channels.len()).rev() {
            if let Some((idx, conv)) = self.upsample.get(l) {
                let side = self.latent_side(l);
                let u = tape.gather(h, idx.clone(), vec![side * side, self.channels[l + 1]])?;
                h = conv.forward(tape, b, u)?;
            }
            h = tape.add(h, skips[l])?;
            for r in &self.up[l] {
                h = r.forward(tape, b, h, temb, eps)?;
            }
        }
        let h = tape.layer_norm(h, b.var(self.out_ln_g), b.var(self.out_ln_b), eps)?;
        let h = tape.silu(h)?;
        self.conv_out.forward(tape, b, h)
    }

    fn latent_side(&self, level: usize) -> usize {
        let mut s = self.latent_hw;
        for _ in 0..level {
            s = (s - 1) / 2 + 1;
        }
        s
    }
}
