use super::block::{block_forward, BlockIds};
use super::VisualFeatures;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numkernel::{Tape, Tensor, Var};
use crate::params::{Binding, Init, ParamId, ParamStore};
use crate::rng::SeedRng;

/// Linear patch embedding, learned positions and a few self-attention
/// layers. Frozen in every training stage.
#[derive(Clone, Debug)]
pub struct EncoderIds {
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<BlockIds>,
}

impl EncoderIds {
    pub fn register(store: &mut ParamStore, rng: &SeedRng, cfg: &ModelConfig) -> Result<Self> {
        let (dp, dv) = (cfg.d_patch(), cfg.d_v);
        let patch_w = store.init(rng, "vision_encoder.patch_w", &[dp, dv], Init::Normal(1.0 / (dp as f64).sqrt()))?;
        let patch_b = store.init(rng, "vision_encoder.patch_b", &[dv], Init::Zeros)?;
        let pos = store.init(rng, "vision_encoder.pos", &[cfg.n_v(), dv], Init::Normal(0.5))?;
        let std = 1.0 / (dv as f64).sqrt();
        let blocks = (0..cfg.enc_layers)
            .map(|l| BlockIds::register(store, rng, &format!("vision_encoder.l{l}"), dv, std, std))
            .collect::<Result<_>>()?;
        Ok(EncoderIds {
            patch_w,
            patch_b,
            pos,
            blocks,
        })
    }

    pub fn forward(&self, tape: &mut Tape, b: &Binding, cfg: &ModelConfig, patches: Var) -> Result<Var> {
        let s = tape.shape(patches).to_vec();
        if s != [cfg.n_v(), cfg.d_patch()] {
            return Err(Error::Config(format!(
                "image has patch matrix {s:?}, configured grid needs [{}, {}]",
                cfg.n_v(),
                cfg.d_patch()
            )));
        }
        let x = tape.matmul(patches, b.var(self.patch_w))?;
        let x = tape.add_row(x, b.var(self.patch_b))?;
        let mut x = tape.add(x, b.var(self.pos))?;
        for blk in &self.blocks {
            x = block_forward(tape, b, blk, x, cfg.enc_heads, cfg.ln_eps, None)?.out;
        }
        Ok(x)
    }

    pub fn encode(&self, store: &ParamStore, cfg: &ModelConfig, patches: &Tensor) -> Result<VisualFeatures> {
        let mut tape = Tape::new();
        let b = Binding::frozen(&mut tape, store)?;
        let p = tape.constant(patches.clone())?;
        let v = self.forward(&mut tape, &b, cfg, p)?;
        VisualFeatures::new(tape.value(v).clone(), cfg.grid_h, cfg.grid_w)
    }
}
