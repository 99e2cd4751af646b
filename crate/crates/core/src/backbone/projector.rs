use crate::config::ModelConfig;
use crate::error::Result;
use crate::numkernel::{Tape, Var};
use crate::params::{Binding, Init, ParamId, ParamStore};
use crate::rng::SeedRng;

/// Two-layer connector from `d_v` to `d_t`:
/// `h = V W1 + b1`, `out = h + gelu(h) W2 + b2`.
#[derive(Clone, Debug)]
pub struct ProjectorIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl ProjectorIds {
    pub fn register(store: &mut ParamStore, rng: &SeedRng, cfg: &ModelConfig, identity: bool) -> Result<Self> {
        let (dv, dt) = (cfg.d_v, cfg.d_t);
        let (w1_init, w2_init) = if identity {
            (Init::Identity, Init::Zeros)
        } else {
            (Init::Normal(1.0 / (dv as f64).sqrt()), Init::Normal(cfg.init_std))
        };
        Ok(ProjectorIds {
            w1: store.init(rng, "vision_projector.w1", &[dv, dt], w1_init)?,
            b1: store.init(rng, "vision_projector.b1", &[dt], Init::Zeros)?,
            w2: store.init(rng, "vision_projector.w2", &[dt, dt], w2_init)?,
            b2: store.init(rng, "vision_projector.b2", &[dt], Init::Zeros)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, b: &Binding, v: Var) -> Result<Var> {
        let h = tape.matmul(v, b.var(self.w1))?;
        let h = tape.add_row(h, b.var(self.b1))?;
        let g = tape.gelu(h)?;
        let g = tape.matmul(g, b.var(self.w2))?;
        let g = tape.add_row(g, b.var(self.b2))?;
        tape.add(h, g)
    }
}
