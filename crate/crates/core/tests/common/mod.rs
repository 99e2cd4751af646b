#![allow(dead_code)]

use latent_vl::config::{DiffusionConfig, ModelConfig, RunConfig};

/// A configuration that trains all four stages in well under a second.
pub fn tiny() -> RunConfig {
    let mut cfg = RunConfig::toy();
    cfg.model = ModelConfig {
        d_t: 16,
        d_v: 8,
        layers: 1,
        heads: 2,
        grid_h: 4,
        grid_w: 4,
        enc_heads: 2,
        lq_heads: 2,
        d_p: 8,
        ..ModelConfig::default()
    };
    cfg.select.w = 2;
    cfg.reason.k = 2;
    cfg.loss.prefix_len = 4;
    cfg.diffusion = DiffusionConfig {
        channels: vec![4],
        latent_hw: 4,
        attn_dim: 8,
        t_diff: 50,
        max_thoughts: 4,
        ..DiffusionConfig::default()
    };
    cfg.data.count = 6;
    cfg.data.max_objects = 3;
    for i in 0..4 {
        cfg.stage_mut(i).epochs = 2;
    }
    cfg
}
