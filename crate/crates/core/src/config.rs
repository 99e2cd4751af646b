//! Run configuration, presets and TOML round-tripping.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HiddenAgg {
    /// Average of every layer's final-position output.
    Mean,
    LastLayer,
    /// Concatenate layers and map back to `d_t` with a learned matrix.
    ConcatProject,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum H0Pool {
    Mean,
    Last,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
    SquaredCosine,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 3] = [ScheduleKind::Linear, ScheduleKind::Cosine, ScheduleKind::SquaredCosine];

    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::SquaredCosine => "squared_cosine",
        }
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            "squared_cosine" => Ok(ScheduleKind::SquaredCosine),
            other => Err(Error::Config(format!("unknown schedule kind `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    Counting,
    Position,
    Relation,
    /// Every image carries one question of each family.
    Mixed,
}

impl FromStr for TaskFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "counting" => Ok(TaskFamily::Counting),
            "position" => Ok(TaskFamily::Position),
            "relation" => Ok(TaskFamily::Relation),
            "mixed" => Ok(TaskFamily::Mixed),
            other => Err(Error::Config(format!("unknown task family `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_t: usize,
    pub d_v: usize,
    pub layers: usize,
    pub heads: usize,
    pub vocab: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Side of a square patch in pixels; each pixel carries RGB.
    pub patch_side: usize,
    pub enc_layers: usize,
    pub enc_heads: usize,
    pub lq_heads: usize,
    pub max_len: usize,
    pub d_p: usize,
    pub hidden_agg: HiddenAgg,
    pub h0_pool: H0Pool,
    pub ln_eps: f64,
    pub init_std: f64,
    /// Gain applied to the freshly initialised LQ-Former key/value maps.
    pub kv_init_gain: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_t: 64,
            d_v: 32,
            layers: 4,
            heads: 4,
            vocab: 64,
            grid_h: 8,
            grid_w: 8,
            patch_side: 2,
            enc_layers: 1,
            enc_heads: 4,
            lq_heads: 4,
            max_len: 160,
            d_p: 32,
            hidden_agg: HiddenAgg::Mean,
            h0_pool: H0Pool::Mean,
            ln_eps: 1e-5,
            init_std: 0.02,
            kv_init_gain: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn n_v(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn d_patch(&self) -> usize {
        self.patch_side * self.patch_side * 3
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectConfig {
    pub w: usize,
    pub reselect_each_step: bool,
    pub drop_masked_keys: bool,
}

impl Default for SelectConfig {
    fn default() -> Self {
        SelectConfig {
            w: 4,
            reselect_each_step: false,
            drop_masked_keys: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReasonConfig {
    pub k: usize,
    pub max_new_tokens: usize,
    pub interleaved: bool,
    pub latent_burst: usize,
    pub max_segments: usize,
}

impl Default for ReasonConfig {
    fn default() -> Self {
        ReasonConfig {
            k: 4,
            max_new_tokens: 24,
            interleaved: false,
            latent_burst: 4,
            max_segments: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub tau: f64,
    pub prefix_len: usize,
    /// Stop the reconstruction gradient at the thought chain.
    pub recon_stop_grad: bool,
    /// Pool the masked rather than the original visual features for `f_v`.
    pub fv_from_selected: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda1: 1.0,
            lambda2: 0.9,
            lambda3: 0.9,
            tau: 0.07,
            prefix_len: 32,
            recon_stop_grad: false,
            fv_from_selected: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub kind: ScheduleKind,
    pub beta_start: f64,
    pub beta_end: f64,
    pub t_diff: usize,
    pub channels: Vec<usize>,
    pub layers_per_block: usize,
    pub latent_c: usize,
    pub latent_hw: usize,
    pub attn_dim: usize,
    pub attn_heads: usize,
    pub time_dim: usize,
    /// Longest chain the thought positional table covers.
    pub max_thoughts: usize,
    /// Condition on a learned null token when the chain is empty.
    pub null_token: bool,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            kind: ScheduleKind::Linear,
            beta_start: 1e-4,
            beta_end: 0.02,
            t_diff: 1000,
            channels: vec![8, 16],
            layers_per_block: 1,
            latent_c: 2,
            latent_hw: 7,
            attn_dim: 16,
            attn_heads: 2,
            time_dim: 16,
            max_thoughts: 16,
            null_token: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub lr: f64,
    pub warmup_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub no_lqformer: bool,
    pub no_selection: bool,
    pub no_recon: bool,
    pub no_nce: bool,
    pub no_prefix: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub count: usize,
    pub family: TaskFamily,
    /// Up to this many objects are drawn per image.
    pub max_objects: usize,
    /// Insert a newline into row-count rationales after this many rows.
    pub newline_every: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            count: 16,
            family: TaskFamily::Counting,
            max_objects: 8,
            newline_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
            clip_norm: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub scale_divisor: usize,
    pub out_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub select: SelectConfig,
    pub reason: ReasonConfig,
    pub loss: LossConfig,
    pub diffusion: DiffusionConfig,
    pub optim: OptimConfig,
    pub ablation: AblationConfig,
    pub data: DataConfig,
    pub stage_i: StageConfig,
    pub stage_ii: StageConfig,
    pub stage_iii: StageConfig,
    pub stage_iv: StageConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::toy()
    }
}

fn paper_stages() -> [StageConfig; 4] {
    let later = StageConfig {
        lr: 2e-4,
        warmup_ratio: 0.03,
        epochs: 1,
        batch_size: 128,
    };
    [
        StageConfig {
            lr: 1e-3,
            warmup_ratio: 0.03,
            epochs: 1,
            batch_size: 256,
        },
        later.clone(),
        later.clone(),
        later,
    ]
}

impl RunConfig {
    /// Values as published, at desk-sized backbone dimensions.
    pub fn paper() -> Self {
        let [s1, s2, s3, s4] = paper_stages();
        RunConfig {
            seed: 0,
            scale_divisor: 1,
            out_dir: None,
            model: ModelConfig {
                grid_h: 16,
                grid_w: 16,
                d_p: 256,
                ..ModelConfig::default()
            },
            select: SelectConfig {
                w: 8,
                ..SelectConfig::default()
            },
            reason: ReasonConfig::default(),
            loss: LossConfig::default(),
            diffusion: DiffusionConfig {
                channels: vec![96, 192, 384, 512],
                layers_per_block: 3,
                latent_c: 4,
                latent_hw: 28,
                attn_dim: 64,
                attn_heads: 1,
                ..DiffusionConfig::default()
            },
            optim: OptimConfig::default(),
            ablation: AblationConfig::default(),
            data: DataConfig::default(),
            stage_i: s1,
            stage_ii: s2,
            stage_iii: s3,
            stage_iv: s4,
        }
    }

    /// Desk-scale defaults: batches divided by 32 and a longer
    /// schedule so a 16-example set can be fitted from random weights.
    pub fn toy() -> Self {
        let [s1, s2, s3, s4] = paper_stages();
        RunConfig {
            seed: 0,
            scale_divisor: 32,
            out_dir: None,
            model: ModelConfig::default(),
            select: SelectConfig::default(),
            reason: ReasonConfig::default(),
            loss: LossConfig::default(),
            diffusion: DiffusionConfig::default(),
            optim: OptimConfig::default(),
            ablation: AblationConfig::default(),
            data: DataConfig::default(),
            stage_i: StageConfig {
                epochs: 20,
                lr: 3e-3,
                ..s1
            },
            stage_ii: StageConfig {
                epochs: 20,
                lr: 2e-3,
                ..s2
            },
            stage_iii: StageConfig {
                epochs: 60,
                lr: 2e-3,
                ..s3
            },
            stage_iv: StageConfig {
                epochs: 140,
                lr: 2e-3,
                ..s4
            },
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn stage(&self, idx: usize) -> &StageConfig {
        match idx {
            0 => &self.stage_i,
            1 => &self.stage_ii,
            2 => &self.stage_iii,
            _ => &self.stage_iv,
        }
    }

    pub fn stage_mut(&mut self, idx: usize) -> &mut StageConfig {
        match idx {
            0 => &mut self.stage_i,
            1 => &mut self.stage_ii,
            2 => &mut self.stage_iii,
            _ => &mut self.stage_iv,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let bad = |msg: String| Err(Error::Config(msg));
        if m.d_t == 0 || m.d_v == 0 || m.layers == 0 || m.vocab < crate::data::MIN_VOCAB {
            return bad(format!(
                "model dimensions must be positive and vocab >= {}",
                crate::data::MIN_VOCAB
            ));
        }
        for (name, d, h) in [
            ("heads", m.d_t, m.heads),
            ("enc_heads", m.d_v, m.enc_heads),
            ("lq_heads", m.d_t, m.lq_heads),
            ("diffusion.attn_heads", self.diffusion.attn_dim, self.diffusion.attn_heads),
        ] {
            if h == 0 || d % h != 0 {
                return bad(format!("{name} = {h} must divide width {d}"));
            }
        }
        if m.grid_h == 0 || m.grid_w == 0 || m.patch_side == 0 {
            return bad("grid and patch sizes must be positive".into());
        }
        if self.select.w == 0 || self.select.w > m.grid_h.min(m.grid_w) {
            return bad(format!(
                "window size {} must lie in 1..={}",
                self.select.w,
                m.grid_h.min(m.grid_w)
            ));
        }
        let l = &self.loss;
        if l.lambda1 < 0.0 || l.lambda2 < 0.0 || l.lambda3 < 0.0 || l.tau <= 0.0 {
            return bad("loss weights must be >= 0 and tau > 0".into());
        }
        crate::reconstructor::NoiseSchedule::validate_bounds(
            self.diffusion.beta_start,
            self.diffusion.beta_end,
            self.diffusion.t_diff,
        )?;
        if self.diffusion.channels.is_empty() || self.diffusion.channels.contains(&0) {
            return bad("diffusion.channels must be non-empty and positive".into());
        }
        if self.scale_divisor == 0 {
            return bad("scale_divisor must be >= 1".into());
        }
        for i in 0..4 {
            let s = self.stage(i);
            if s.batch_size == 0 || !(0.0..1.0).contains(&s.warmup_ratio) || s.lr < 0.0 {
                return bad(format!("stage {} settings invalid: {s:?}", i + 1));
            }
        }
        if self.reason.interleaved && ![2, 4, 6, 8].contains(&self.reason.latent_burst) {
            return bad(format!(
                "latent_burst {} not in {{2, 4, 6, 8}}",
                self.reason.latent_burst
            ));
        }
        if self.data.count == 0 {
            return bad("data.count must be >= 1".into());
        }
        Ok(())
    }

    /// Effective batch size for a stage after the scale divisor.
    pub fn batch_for(&self, stage: usize) -> usize {
        (self.stage(stage).batch_size / self.scale_divisor).max(1)
    }

    /// Output root: explicit setting, else `LATENT_VL_OUT`, else `./runs`.
    pub fn output_root(&self) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }
}

pub const OUT_ENV: &str = "LATENT_VL_OUT";
