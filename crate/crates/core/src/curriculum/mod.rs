//! Four-stage training: freezing plans, the optimizer loop, checkpoints and
//! metrics files.

pub mod checkpoint;
pub mod optim;

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::Serialize;

pub use checkpoint::{Checkpoint, Counters};
pub use optim::{lr_at, AdamW};

use crate::config::RunConfig;
use crate::data::{SyntheticExample, Template};
use crate::error::{Error, Result};
use crate::model::{Model, Objective, Prepared};
use crate::numkernel::Tape;
use crate::objectives::LossRecord;
use crate::params::{Binding, Group, GroupSet, Init};
use crate::rng::SeedRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    I,
    II,
    III,
    IV,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::I, Stage::II, Stage::III, Stage::IV];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        ["I", "II", "III", "IV"][self.index()]
    }

    pub fn from_index(i: usize) -> Result<Stage> {
        Stage::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Config(format!("stage index {i} out of range")))
    }

    /// Dataset template each stage trains on.
    pub fn template(self) -> Template {
        match self {
            Stage::I | Stage::II => Template::Caption,
            Stage::III => Template::Instruction,
            Stage::IV => Template::Rationale,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Stage> {
        match s.trim().to_ascii_uppercase().as_str() {
            "I" | "1" => Ok(Stage::I),
            "II" | "2" => Ok(Stage::II),
            "III" | "3" => Ok(Stage::III),
            "IV" | "4" => Ok(Stage::IV),
            other => Err(Error::Config(format!("unknown stage `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StagePlan {
    pub stage: Stage,
    pub trainable: GroupSet,
    pub objective: Objective,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl StagePlan {
    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, n: usize) -> usize {
        self.epochs * self.steps_per_epoch(n)
    }

    pub fn warmup_steps(&self, n: usize) -> usize {
        (self.warmup_ratio * self.total_steps(n) as f64).round() as usize
    }
}

pub fn stage_plan(cfg: &RunConfig, stage: Stage) -> StagePlan {
    let trainable: GroupSet = match stage {
        Stage::I => [Group::VisionProjector].into(),
        Stage::II => [Group::LqFormer, Group::Denoiser].into(),
        Stage::III | Stage::IV => Group::ALL.into_iter().filter(|&g| g != Group::VisionEncoder).collect(),
    };
    let s = cfg.stage(stage.index());
    StagePlan {
        stage,
        trainable,
        objective: if stage == Stage::I { Objective::Ar } else { Objective::Latent },
        lr: s.lr,
        warmup_ratio: s.warmup_ratio,
        epochs: s.epochs,
        batch_size: cfg.batch_for(stage.index()),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct StepMetrics {
    pub stage: String,
    #[serde(flatten)]
    pub losses: LossRecord,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct StageSummary {
    pub stage: String,
    pub steps: usize,
    pub examples: usize,
    pub batch_size: usize,
    pub first_total: f64,
    pub last_total: f64,
    /// Mean `L_AR` over the final epoch's steps.
    pub final_epoch_ar: f64,
}

/// A stage in progress. The data order at every step is a pure function of
/// the seed, the stage and the step, so a run restored from a checkpoint
/// replays the same batches.
pub struct StageRun {
    pub plan: StagePlan,
    pub opt: AdamW,
    pub step: usize,
    data: Vec<Prepared>,
    rng: SeedRng,
    order: Option<(usize, Vec<usize>)>,
}

impl StageRun {
    pub fn new(model: &Model, stage: Stage, examples: &[SyntheticExample]) -> Result<Self> {
        let gen = model.generator()?;
        let ex = gen.retemplate(examples, stage.template());
        Self::with_prepared(model, stage, model.prepare_all(&ex)?)
    }

    pub fn with_prepared(model: &Model, stage: Stage, data: Vec<Prepared>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Argument("stage dataset is empty".into()));
        }
        let plan = stage_plan(&model.cfg, stage);
        let opt = AdamW::new(&model.cfg.optim, &model.store, &plan.trainable);
        Ok(StageRun {
            plan,
            opt,
            step: 0,
            data,
            rng: SeedRng::new(model.cfg.seed).split_str("train").split(stage.index() as u64),
            order: None,
        })
    }

    pub fn data(&self) -> &[Prepared] {
        &self.data
    }

    pub fn total_steps(&self) -> usize {
        self.plan.total_steps(self.data.len())
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    fn batch_indices(&mut self, step: usize) -> Vec<usize> {
        let spe = self.plan.steps_per_epoch(self.data.len());
        let epoch = step / spe;
        if self.order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut idx: Vec<usize> = (0..self.data.len()).collect();
            idx.shuffle(&mut self.rng.split_str("epoch").split(epoch as u64).stream());
            self.order = Some((epoch, idx));
        }
        let (_, idx) = self.order.as_ref().expect("order was just set");
        let start = (step % spe) * self.plan.batch_size;
        idx[start..(start + self.plan.batch_size).min(idx.len())].to_vec()
    }

    /// One optimizer update on the next batch.
    pub fn train_step(&mut self, model: &mut Model) -> Result<StepMetrics> {
        let step = self.step;
        let idx = self.batch_indices(step);
        let batch: Vec<&Prepared> = idx.iter().map(|&i| &self.data[i]).collect();
        let mut tape = Tape::new();
        let b = Binding::new(&mut tape, &model.store, &self.plan.trainable)?;
        let rng = self.rng.split_str("step").split(step as u64);
        let out = model.batch_loss(&mut tape, &b, &batch, self.plan.objective, &rng, step)?;
        check_finite(&out.record)?;
        let grads = tape.backward(out.loss)?;
        let n = self.data.len();
        let lr = lr_at(step, self.plan.total_steps(n), self.plan.warmup_steps(n), self.plan.lr);
        let st = self.opt.step(&mut model.store, &b, &grads, lr)?;
        self.step += 1;
        Ok(StepMetrics {
            stage: self.plan.stage.name().to_string(),
            losses: out.record,
            lr: st.lr,
            grad_norm: st.grad_norm,
        })
    }

    pub fn checkpoint(&self, model: &Model) -> Checkpoint {
        let counters = Counters {
            stage: self.plan.stage.index() as u64,
            step: self.step as u64,
            opt_t: self.opt.t,
            stage_done: u64::from(self.is_done()),
        };
        Checkpoint::capture(&model.store, Some(&self.opt), counters)
    }

    /// Restores weights, moments and the step counter. The checkpoint must
    /// come from the same stage.
    pub fn restore(&mut self, model: &mut Model, ck: &Checkpoint) -> Result<()> {
        let c = ck.counters()?;
        if c.stage != self.plan.stage.index() as u64 {
            return Err(Error::Format(format!(
                "checkpoint is from stage index {}, resuming stage {}",
                c.stage, self.plan.stage
            )));
        }
        ck.restore_params(&mut model.store)?;
        self.opt = ck
            .optimizer(&self.opt)?
            .ok_or_else(|| Error::Format("checkpoint has no optimizer state".into()))?;
        self.step = c.step as usize;
        self.order = None;
        Ok(())
    }
}

fn check_finite(r: &LossRecord) -> Result<()> {
    for (name, v) in [
        ("L_AR", r.l_ar),
        ("L_prefix", r.l_prefix),
        ("L_nce", r.l_nce),
        ("L_recon", r.l_recon),
        ("L_total", r.l_total),
    ] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name} is {v} at step {}", r.step)));
        }
    }
    Ok(())
}

/// Fresh `<|bot|>` / `<|eot|>` rows.
pub fn reinit_special_tokens(model: &mut Model) -> Result<()> {
    let rng = SeedRng::new(model.cfg.seed).split_str("special_tokens");
    let std = 1.0 / (model.cfg.model.d_t as f64).sqrt();
    for (i, id) in [model.lq.bot, model.lq.eot].into_iter().enumerate() {
        model.store.reinit(&rng.split(i as u64), id, Init::Normal(std))?;
    }
    Ok(())
}

pub struct PipelineOutput {
    pub summaries: Vec<StageSummary>,
    pub checkpoints: Vec<PathBuf>,
    /// The final stage's prepared training set.
    pub final_data: Vec<Prepared>,
}

/// Called after every step with the stage and its metrics.
pub type StepHook<'a> = &'a mut dyn FnMut(Stage, &StepMetrics);

/// Runs stages I to IV in order. With `out_dir`, writes
/// `stage_<n>.ccva`, `metrics.jsonl` and `stage_<n>_summary.json` there.
pub fn run_pipeline(model: &mut Model, examples: &[SyntheticExample], out_dir: Option<&Path>, mut hook: Option<StepHook<'_>>) -> Result<PipelineOutput> {
    let mut metrics = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|e| Error::file(d, e))?;
            let p = d.join("metrics.jsonl");
            Some((std::fs::File::create(&p).map_err(|e| Error::file(&p, e))?, p))
        }
        None => None,
    };
    let mut summaries = Vec::new();
    let mut checkpoints = Vec::new();
    let mut final_data = Vec::new();
    for stage in Stage::ALL {
        let abort = |e: Error| Error::StageAbort {
            stage: stage.name().to_string(),
            source: Box::new(e),
        };
        if stage == Stage::II {
            reinit_special_tokens(model).map_err(abort)?;
        }
        let mut run = StageRun::new(model, stage, examples).map_err(abort)?;
        let total = run.total_steps();
        let spe = run.plan.steps_per_epoch(run.data().len());
        let (mut first, mut last, mut tail_ar) = (f64::NAN, f64::NAN, 0.0);
        while !run.is_done() {
            let m = run.train_step(model).map_err(abort)?;
            if m.losses.step == 0 {
                first = m.losses.l_total;
            }
            last = m.losses.l_total;
            if m.losses.step + spe >= total {
                tail_ar += m.losses.l_ar / spe.min(total) as f64;
            }
            if let Some((f, p)) = metrics.as_mut() {
                let line = serde_json::to_string(&m).map_err(|e| abort(Error::Format(e.to_string())))?;
                writeln!(f, "{line}").map_err(|e| abort(Error::file(p.as_path(), e)))?;
            }
            if let Some(h) = hook.as_mut() {
                h(stage, &m);
            }
        }
        let summary = StageSummary {
            stage: stage.name().to_string(),
            steps: total,
            examples: run.data().len(),
            batch_size: run.plan.batch_size,
            first_total: first,
            last_total: last,
            final_epoch_ar: tail_ar,
        };
        if let Some(d) = out_dir {
            let n = stage.index() + 1;
            let ck = d.join(format!("stage_{n}.ccva"));
            run.checkpoint(model).save(&ck).map_err(abort)?;
            checkpoints.push(ck);
            let sp = d.join(format!("stage_{n}_summary.json"));
            let s = serde_json::to_string_pretty(&summary).map_err(|e| abort(Error::Format(e.to_string())))?;
            std::fs::write(&sp, s).map_err(|e| abort(Error::file(&sp, e)))?;
        }
        summaries.push(summary);
        if stage == Stage::IV {
            final_data = run.data;
        }
    }
    Ok(PipelineOutput {
        summaries,
        checkpoints,
        final_data,
    })
}
