//! Command-line verbs: `gen`, `run`, `ablate`, `analyze`, `export`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::{RunConfig, TaskFamily};
use crate::curriculum::{run_pipeline, Checkpoint};
use crate::data::{answer_matches, load_archive, save_archive, SyntheticExample, Template};
use crate::error::{Error, Result};
use crate::model::{Model, Objective, Prepared};
use crate::numkernel::Tensor;
use crate::probe::{attention_stats, first_token_attention, probe_features, probe_suite, trajectory_export};
use crate::reconstructor::{channel_mean, sample_reconstruction, schedule_grid};
use crate::rng::SeedRng;

/// Examples in the held-out evaluation set of `run` and `ablate`.
pub const HELDOUT_COUNT: usize = 64;
/// Pairs per probe dataset.
pub const PROBE_PAIRS: usize = 1000;
pub const DATASET_FILE: &str = "dataset.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const FINAL_CHECKPOINT: &str = "stage_4.ccva";

#[derive(Parser, Debug)]
#[command(name = "latent-vl", version, about = "Latent vision-language reasoning on synthetic grids")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Built-in configuration, `toy` or `paper`.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic example archive.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        family: Option<String>,
    },
    /// Train stages I to IV.
    Run {
        #[command(flatten)]
        common: Common,
        /// Example archive; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Epochs for every stage, overriding the config.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Sweep one ablation axis and write a CSV table.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Probes, thought trajectories and attention statistics for a run.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Final checkpoint of a run.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Saliency heatmaps, thought chains and reconstructions for a run.
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Examples to export.
        #[arg(long, default_value_t = 8)]
        limit: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Components,
    Window,
    Schedule,
    K,
    Prefix,
    Burst,
    All,
}

impl Axis {
    pub const SWEEPS: [Axis; 6] = [Axis::Components, Axis::Window, Axis::Schedule, Axis::K, Axis::Prefix, Axis::Burst];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Components => "components",
            Axis::Window => "window",
            Axis::Schedule => "schedule",
            Axis::K => "k",
            Axis::Prefix => "prefix",
            Axis::Burst => "burst",
            Axis::All => "all",
        }
    }
}

pub fn resolve_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match (&c.config, &c.preset) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(name)) => RunConfig::preset(name)?,
        (None, None) => RunConfig::toy(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = Some(o.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn set_epochs(cfg: &mut RunConfig, epochs: Option<usize>) {
    if let Some(e) = epochs {
        for i in 0..4 {
            cfg.stage_mut(i).epochs = e;
        }
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d).map_err(|e| Error::file(d, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::file(path, e))
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()))
}

pub fn dataset(cfg: &RunConfig) -> Result<Vec<SyntheticExample>> {
    let gen = crate::data::Generator::new(&cfg.model, cfg.data.max_objects, cfg.data.newline_every)?;
    gen.generate(cfg.data.count, cfg.data.family, cfg.seed, Template::Rationale)
}

pub fn heldout(model: &Model) -> Result<Vec<Prepared>> {
    let c = &model.cfg;
    let ex = model.generator()?.generate(HELDOUT_COUNT, c.data.family, c.seed.wrapping_add(1), Template::Rationale)?;
    model.prepare_all(&ex)
}

#[derive(Clone, Debug, Serialize)]
pub struct Evaluation {
    pub train_accuracy: f64,
    pub heldout_accuracy: f64,
    /// Mean teacher-forced `L_AR` on the training set.
    pub final_l_ar: f64,
    /// Mean generated tokens on the held-out set.
    pub mean_tokens: f64,
}

pub fn evaluate(model: &Model, train: &[Prepared]) -> Result<Evaluation> {
    let held = heldout(model)?;
    let mut hits = 0;
    let mut tokens = 0;
    for p in &held {
        let g = model.generate(p)?;
        tokens += g.ids.len();
        hits += usize::from(answer_matches(&g.ids, &p.ex));
    }
    Ok(Evaluation {
        train_accuracy: model.accuracy(train)?,
        heldout_accuracy: hits as f64 / held.len() as f64,
        final_l_ar: model.eval_ar(train, Objective::Latent)?,
        mean_tokens: tokens as f64 / held.len() as f64,
    })
}

pub struct RunOutput {
    pub model: Model,
    pub train: Vec<Prepared>,
    pub evaluation: Evaluation,
}

/// Trains from scratch. With `out`, the directory receives the config, the
/// archive, stage checkpoints, metrics and `eval.json`.
pub fn train_and_evaluate(cfg: &RunConfig, examples: &[SyntheticExample], out: Option<&Path>) -> Result<RunOutput> {
    let mut model = Model::new(cfg)?;
    if let Some(d) = out {
        write(&d.join(CONFIG_FILE), cfg.to_toml_string()?)?;
        std::fs::create_dir_all(d).map_err(|e| Error::file(d, e))?;
        save_archive(&d.join(DATASET_FILE), examples)?;
    }
    let res = run_pipeline(&mut model, examples, out, None)?;
    let evaluation = evaluate(&model, &res.final_data)?;
    if let Some(d) = out {
        write(&d.join("eval.json"), json(&evaluation)?)?;
    }
    Ok(RunOutput {
        model,
        train: res.final_data,
        evaluation,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub axis: String,
    pub setting: String,
    pub eval: Evaluation,
}

/// Configurations along one axis, labelled.
pub fn ablation_grid(base: &RunConfig, axis: Axis) -> Vec<(String, RunConfig)> {
    let mut out = Vec::new();
    let mut push = |label: String, f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        out.push((label, c));
    };
    match axis {
        Axis::Components => {
            push("full".into(), &|_| {});
            push("no_lqformer".into(), &|c| c.ablation.no_lqformer = true);
            push("no_selection".into(), &|c| c.ablation.no_selection = true);
            push("no_recon".into(), &|c| c.ablation.no_recon = true);
            push("no_nce".into(), &|c| c.ablation.no_nce = true);
            push("no_prefix".into(), &|c| c.ablation.no_prefix = true);
        }
        Axis::Window => {
            for w in [2, 4, 6] {
                push(format!("w={w}"), &move |c| c.select.w = w);
            }
        }
        Axis::Schedule => {
            for (kind, end) in schedule_grid() {
                push(format!("{}:{end}", kind.name()), &move |c| {
                    c.diffusion.kind = kind;
                    c.diffusion.beta_end = end;
                });
            }
        }
        Axis::K => {
            for k in [0, 2, 4, 6, 8] {
                push(format!("K={k}"), &move |c| c.reason.k = k);
            }
        }
        Axis::Prefix => {
            for n in [2, 4, 8, 16, 32, 64, 128] {
                push(format!("prefix={n}"), &move |c| c.loss.prefix_len = n);
            }
        }
        Axis::Burst => {
            for n in [2, 4, 6, 8] {
                push(format!("burst={n}"), &move |c| {
                    c.reason.interleaved = true;
                    c.reason.latent_burst = n;
                    if c.data.newline_every == 0 {
                        c.data.newline_every = 2;
                    }
                });
            }
        }
        Axis::All => {
            drop(push);
            for a in Axis::SWEEPS {
                out.extend(ablation_grid(base, a));
            }
        }
    }
    out
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("axis,setting,train_accuracy,heldout_accuracy,final_l_ar,mean_tokens\n");
    for r in rows {
        let e = &r.eval;
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{:.6},{:.4}",
            r.axis, r.setting, e.train_accuracy, e.heldout_accuracy, e.final_l_ar, e.mean_tokens
        );
    }
    s
}

/// One training run per grid entry. Every configuration yields a row or the
/// sweep fails.
pub fn ablate(base: &RunConfig, axis: Axis, mut progress: impl FnMut(&AblationRow)) -> Result<Vec<AblationRow>> {
    let axes: Vec<Axis> = if axis == Axis::All { Axis::SWEEPS.to_vec() } else { vec![axis] };
    let mut rows = Vec::new();
    for a in axes {
        for (label, cfg) in ablation_grid(base, a) {
            cfg.validate()?;
            let ex = dataset(&cfg)?;
            let r = train_and_evaluate(&cfg, &ex, None).map_err(|e| Error::StageAbort {
                stage: format!("ablation {} {label}", a.name()),
                source: Box::new(e),
            })?;
            let row = AblationRow {
                axis: a.name().into(),
                setting: label,
                eval: r.evaluation,
            };
            progress(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Model weights from a checkpoint; the config comes from the flags, else
/// from `config.toml` next to the checkpoint.
pub fn load_run(common: &Common, checkpoint: &Path) -> Result<(Model, Vec<Prepared>)> {
    let ck = Checkpoint::load(checkpoint)?;
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let cfg = if common.config.is_some() || common.preset.is_some() {
        resolve_config(common)?
    } else {
        let p = dir.join(CONFIG_FILE);
        let mut c = RunConfig::load(&p)?;
        if let Some(s) = common.seed {
            c.seed = s;
        }
        c
    };
    let mut model = Model::new(&cfg)?;
    ck.restore_params(&mut model.store)?;
    let archive = dir.join(DATASET_FILE);
    let ex = if archive.exists() { load_archive(&archive)? } else { dataset(&cfg)? };
    let ex = model.generator()?.retemplate(&ex, Template::Rationale);
    let data = model.prepare_all(&ex)?;
    Ok((model, data))
}

#[derive(Serialize)]
struct ProbeOutput {
    reports: Vec<crate::probe::ProbeReport>,
    error: Option<String>,
}

pub fn analyze(model: &Model, data: &[Prepared], out: &Path) -> Result<()> {
    let probe = match probe_features(model, data).and_then(|f| probe_suite(&f, PROBE_PAIRS, &model.cfg.optim, &SeedRng::new(model.cfg.seed).split_str("probe"))) {
        Ok(reports) => ProbeOutput { reports, error: None },
        Err(e @ (Error::Dataset(_) | Error::Config(_))) => ProbeOutput {
            reports: Vec::new(),
            error: Some(e.to_string()),
        },
        Err(e) => return Err(e),
    };
    write(&out.join("probe.json"), json(&probe)?)?;

    let chains: Vec<_> = data.iter().map(|p| model.generate(p).map(|g| g.chain)).collect::<Result<_>>()?;
    match trajectory_export(&chains) {
        Ok(t) => {
            write(&out.join("trajectories.csv"), t.to_csv())?;
            write(&out.join("pca.json"), json(&t.pca)?)?;
        }
        Err(Error::Argument(msg)) => write(&out.join("trajectories.csv"), format!("# skipped: {msg}\n"))?,
        Err(e) => return Err(e),
    }

    let with = first_token_attention(model, data)?;
    let mut ablated_cfg = model.cfg.clone();
    ablated_cfg.ablation.no_selection = true;
    let mut ablated = Model::new(&ablated_cfg)?;
    ablated.store = model.store.clone();
    let without = first_token_attention(&ablated, data)?;
    let report = attention_stats("with_selection", &with, "selection_ablated", &without)?;
    write(&out.join("attention_stats.csv"), report.to_csv())?;
    write(&out.join("attention_stats.json"), json(&report)?)
}

/// Binary PGM (`P5`) of a grid scaled to `0..=255`, each cell drawn as a
/// `scale x scale` block.
pub fn pgm(grid: &Tensor, scale: usize) -> Vec<u8> {
    let (h, w) = (grid.rows(), grid.cols());
    let d = grid.data();
    let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{} {}\n255\n", w * scale, h * scale).into_bytes();
    for i in 0..h * scale {
        for j in 0..w * scale {
            let v = (d[(i / scale) * w + j / scale] - lo) / span;
            out.push((v * 255.0).round() as u8);
        }
    }
    out
}

/// Parses a `P5` image back to its pixel rows.
pub fn read_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = || Error::Format("not a binary PGM".into());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?.to_string());
    }
    if fields[0] != "P5" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let px = bytes.get(pos + 1..pos + 1 + w * h).ok_or_else(bad)?.to_vec();
    Ok((w, h, px))
}

pub const HEATMAP_SCALE: usize = 8;

pub fn export(model: &Model, data: &[Prepared], out: &Path, limit: usize) -> Result<()> {
    let mut chains_csv = String::from("example,step,values\n");
    let mut recon_csv = String::from("example,mse,target_variance\n");
    let rng = SeedRng::new(model.cfg.seed).split_str("export");
    for (i, p) in data.iter().take(limit).enumerate() {
        let g = model.generate(p)?;
        let sel = &g.selection;
        write(&out.join(format!("heatmaps/saliency_{i}.pgm")), pgm(&sel.grid, HEATMAP_SCALE))?;
        write(&out.join(format!("heatmaps/window_{i}.pgm")), pgm(&sel.window_scores, HEATMAP_SCALE))?;
        write(&out.join(format!("heatmaps/saliency_{i}.csv")), crate::tokensel::grid_csv(&sel.grid))?;

        let mut bin = Vec::new();
        g.chain.write_to(&mut bin)?;
        write(&out.join(format!("chains/chain_{i}.bin")), bin)?;
        for (k, z) in g.chain.thoughts.iter().enumerate() {
            let vals: Vec<String> = z.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(chains_csv, "{i},{},{}", k + 1, vals.join(" "));
        }

        let x = sample_reconstruction(&model.denoiser, &model.store, &g.chain.matrix()?, &model.schedule, &rng.split(i as u64))?;
        let target = &p.latent;
        let n = target.numel() as f64;
        let mse = x.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
        let mean = target.data().iter().sum::<f64>() / n;
        let var = target.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let _ = writeln!(recon_csv, "{i},{mse},{var}");
        write(&out.join(format!("recon/recon_{i}.pgm")), pgm(&channel_mean(&x)?, HEATMAP_SCALE))?;
        write(&out.join(format!("recon/target_{i}.pgm")), pgm(&channel_mean(target)?, HEATMAP_SCALE))?;
    }
    write(&out.join("chains.csv"), chains_csv)?;
    write(&out.join("recon/mse.csv"), recon_csv)
}

/// Runs a parsed command.
pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { common, count, family } => {
            let mut cfg = resolve_config(&common)?;
            if let Some(n) = count {
                cfg.data.count = n;
            }
            if let Some(f) = family {
                cfg.data.family = f.parse::<TaskFamily>()?;
            }
            cfg.validate()?;
            let out = cfg.output_root();
            std::fs::create_dir_all(&out).map_err(|e| Error::file(&out, e))?;
            save_archive(&out.join(DATASET_FILE), &dataset(&cfg)?)?;
            eprintln!("wrote {}", out.join(DATASET_FILE).display());
        }
        Command::Run { common, data, epochs } => {
            let mut cfg = resolve_config(&common)?;
            set_epochs(&mut cfg, epochs);
            let ex = match data {
                Some(p) => load_archive(&p)?,
                None => dataset(&cfg)?,
            };
            let out = cfg.output_root();
            let r = train_and_evaluate(&cfg, &ex, Some(&out))?;
            eprintln!("{}", json(&r.evaluation)?);
        }
        Command::Ablate { common, axis, epochs } => {
            let mut cfg = resolve_config(&common)?;
            set_epochs(&mut cfg, epochs);
            let rows = ablate(&cfg, axis, |r| eprintln!("{} {}: {:?}", r.axis, r.setting, r.eval))?;
            let out = cfg.output_root();
            write(&out.join(format!("ablate_{}.csv", axis.name())), ablation_csv(&rows))?;
        }
        Command::Analyze { common, checkpoint } => {
            let (model, data) = load_run(&common, &checkpoint)?;
            let out = common.out.clone().unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).join("analysis"));
            analyze(&model, &data, &out)?;
        }
        Command::Export { common, checkpoint, limit } => {
            let (model, data) = load_run(&common, &checkpoint)?;
            let out = common.out.clone().unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).join("export"));
            export(&model, &data, &out, limit)?;
        }
    }
    Ok(())
}

/// Parses `args` and runs; returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => match execute(cli) {
            Ok(()) => 0,
            Err(e) => {
                eprintln!("error: {e}");
                e.exit_code()
            }
        },
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            code
        }
    }
}
