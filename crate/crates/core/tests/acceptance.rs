//! Acceptance criteria 1 to 12, one PASS/FAIL line each.
//!
//! Criteria 7, 8 and 9 train complete toy pipelines (minutes to an hour on
//! one core). They run when `LATENT_VL_ACCEPTANCE=full`; a comma list such as
//! `LATENT_VL_ACCEPTANCE=1,7` runs exactly the listed criteria. Without the
//! variable the remaining criteria run and the long ones print SKIP.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use latent_vl::backbone::{ImgSpan, LMForwardRecord, LmIds};
use latent_vl::cli::{self, Axis, Evaluation};
use latent_vl::config::{DiffusionConfig, ModelConfig, RunConfig, ScheduleKind, TaskFamily};
use latent_vl::curriculum::{lr_at, reinit_special_tokens, stage_plan, AdamW, Checkpoint, Stage, StageRun};
use latent_vl::data::{SyntheticExample, Template};
use latent_vl::lqformer::LqIds;
use latent_vl::model::{Model, Objective};
use latent_vl::numkernel::{grad_check, Tape, Tensor, Var};
use latent_vl::objectives::{ar_and_prefix_loss, info_nce, symmetric_info_nce, total_latent_loss};
use latent_vl::params::{Binding, Group, GroupSet, ParamId, ParamStore};
use latent_vl::probe::stats::u_distribution;
use latent_vl::probe::{mann_whitney, probe_features, probe_suite, welch_t, ProbeKind};
use latent_vl::reconstructor::{recon_loss, recon_loss_at, sample_reconstruction, to_rows, Denoiser, EpsPredictor, NoiseSchedule};
use latent_vl::rng::{normal_vec, SeedRng};
use latent_vl::tokensel::{aggregate_saliency, select_window};
use latent_vl::Result;
use rand::Rng;

const GRAD_STEP: f64 = 1e-4;
const GRAD_TOL: f64 = 1e-4;
const LN4_TOL: f64 = 1e-12;
const NCE_B2: f64 = 0.31326;
const NCE_B2_TOL: f64 = 1e-4;
const AR_TOL: f64 = 1e-9;
const ALPHA_BAR_TOL: f64 = 1e-12;
const WELCH_TOL: f64 = 1e-10;
const LEARN_L_AR: f64 = 0.05;
const PROBE_MARGIN: f64 = 0.05;
const RECON_RATIO: f64 = 0.1;
const SELECTION_GRIDS: usize = 500;
const RESUME_STEPS: usize = 50;
const FREEZE_STEPS: usize = 20;
const RECON_TARGETS: usize = 8;
const RECON_STEPS: usize = 4000;
const RECON_LR: f64 = 1e-3;
const PROBE_EXAMPLES: usize = 40;
/// Per-stage epochs for the grid-completeness sweep of criterion 8.
const SWEEP_EPOCHS: usize = 1;

const LONG: [usize; 3] = [7, 8, 9];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome { pass, detail: detail.into() })
}

fn rand_tensor(seed: u64, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), normal_vec(&mut SeedRng::new(seed).stream(), n, 1.0)).unwrap()
}

/// Shapes for the gradient checks: `d_t = 16`.
fn tiny() -> RunConfig {
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
    cfg.loss.prefix_len = 3;
    cfg.diffusion = DiffusionConfig {
        channels: vec![4],
        latent_hw: 4,
        attn_dim: 8,
        t_diff: 50,
        max_thoughts: 4,
        ..DiffusionConfig::default()
    };
    cfg.data.max_objects = 3;
    cfg
}

fn toy_examples(cfg: &RunConfig, n: usize, seed: u64) -> Result<Vec<SyntheticExample>> {
    let gen = latent_vl::data::Generator::new(&cfg.model, cfg.data.max_objects, cfg.data.newline_every)?;
    gen.generate(n, cfg.data.family, seed, Template::Rationale)
}

/// Checks `f` over `inputs` plus the listed parameters of `store`.
fn check_with_params<F>(store: &ParamStore, params: &[ParamId], inputs: Vec<Tensor>, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &Binding, &[Var]) -> Result<Var>,
{
    let n = inputs.len();
    let mut all = inputs;
    all.extend(params.iter().map(|&id| store.get(id).clone()));
    let r = grad_check(
        |tape, v| {
            let over: Vec<_> = params.iter().copied().zip(v[n..].iter().copied()).collect();
            let b = Binding::frozen_with(tape, store, &over)?;
            f(tape, &b, &v[..n])
        },
        &all,
        GRAD_STEP,
        GRAD_TOL,
    )?;
    Ok(r.max_rel_err)
}

fn c1_gradients() -> Result<Outcome> {
    let mut worst = Vec::new();
    let plain = |f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>, inputs: &[Tensor]| -> Result<f64> {
        Ok(grad_check(f, inputs, GRAD_STEP, GRAD_TOL)?.max_rel_err)
    };

    let nce_in = [rand_tensor(1, &[4, 8]), rand_tensor(2, &[4, 8]), rand_tensor(3, &[4, 8])];
    worst.push((
        "info_nce",
        plain(
            &|tape, v| {
                let a = tape.normalize_rows(v[0])?;
                let t = tape.normalize_rows(v[1])?;
                info_nce(tape, a, t, 0.07)
            },
            &nce_in[..2],
        )?,
    ));
    worst.push((
        "symmetric_info_nce",
        plain(
            &|tape, v| {
                let z = tape.normalize_rows(v[0])?;
                let a = tape.normalize_rows(v[1])?;
                let t = tape.normalize_rows(v[2])?;
                symmetric_info_nce(tape, z, a, t, 0.07)
            },
            &nce_in,
        )?,
    ));

    // denoiser parameters and the conditioning thoughts
    let dcfg = DiffusionConfig {
        channels: vec![4, 6],
        latent_c: 2,
        latent_hw: 4,
        attn_dim: 4,
        attn_heads: 2,
        time_dim: 4,
        max_thoughts: 4,
        ..DiffusionConfig::default()
    };
    let mut dstore = ParamStore::new();
    let den = Denoiser::register(&mut dstore, &SeedRng::new(3), &dcfg, 8, 1e-5)?;
    let sched = NoiseSchedule::build(ScheduleKind::Linear, 1e-4, 0.02, 100)?;
    let x0 = rand_tensor(4, &[2, 4, 4]);
    let eps = rand_tensor(5, &[2, 4, 4]);
    let dparams: Vec<ParamId> = dstore.ids().collect();
    let recon = check_with_params(&dstore, &dparams, vec![rand_tensor(6, &[3, 8])], |tape, b, v| {
        recon_loss_at(tape, b, &den, &x0, Some(v[0]), &sched, 37, &eps)
    })?;
    worst.push(("recon", recon));

    let targets = [Some(1), Some(4), None, Some(10), Some(0)];
    worst.push((
        "ar_prefix",
        plain(
            &|tape, v| Ok(ar_and_prefix_loss(tape, v[0], v[1], &targets, 2, 1.0)?.total),
            &[rand_tensor(7, &[5, 11]), rand_tensor(8, &[2, 11])],
        )?,
    ));
    worst.push((
        "total",
        plain(
            &|tape, v| {
                let l = ar_and_prefix_loss(tape, v[0], v[1], &targets, 2, 1.0)?;
                let z = tape.normalize_rows(v[2])?;
                let a = tape.normalize_rows(v[3])?;
                let t = tape.normalize_rows(v[4])?;
                let nce = symmetric_info_nce(tape, z, a, t, 0.07)?;
                let sq = tape.mul(v[5], v[5])?;
                let rec = tape.mean(sq)?;
                total_latent_loss(tape, l.total, nce, rec, 0.9, 0.9)
            },
            &[rand_tensor(7, &[5, 11]), rand_tensor(8, &[2, 11]), nce_in[0].clone(), nce_in[1].clone(), nce_in[2].clone(), rand_tensor(9, &[3, 3])],
        )?,
    ));

    // the assembled batch objective of a d_t = 16 model, B = 2
    let cfg = tiny();
    let model = Model::new(&cfg)?;
    let data = model.prepare_all(&toy_examples(&cfg, 2, 11)?)?;
    let batch: Vec<_> = data.iter().collect();
    let small: Vec<ParamId> = model
        .store
        .ids()
        .filter(|&id| model.store.group(id) != Group::VisionEncoder && model.store.get(id).numel() <= 64)
        .collect();
    let rng = SeedRng::new(12);
    let model_total = check_with_params(&model.store, &small, Vec::new(), |tape, b, _| {
        Ok(model.batch_loss(tape, b, &batch, Objective::Latent, &rng, 0)?.loss)
    })?;
    worst.push(("model_total", model_total));

    // one fusion step over every LQ-Former weight except the special tokens
    let mcfg = &cfg.model;
    let mut store = ParamStore::new();
    let srng = SeedRng::new(42);
    LmIds::register(&mut store, &srng, mcfg)?;
    let lq = LqIds::register(&mut store, &srng, mcfg)?;
    let ids: Vec<ParamId> = store
        .ids()
        .filter(|&id| store.group(id) == Group::LqFormer && id != lq.bot && id != lq.eot)
        .collect();
    let weights = rand_tensor(13, &[1, 16]);
    let fusion = check_with_params(&store, &ids, vec![rand_tensor(14, &[1, 16]), rand_tensor(15, &[6, 8])], |tape, b, v| {
        let mem = lq.memory(tape, b, v[1])?;
        let out = lq.fuse(tape, b, mcfg, v[0], &mem)?;
        let w = tape.constant(weights.clone())?;
        let y = tape.mul(out.z, w)?;
        tape.sum(y)
    })?;
    worst.push(("fusion_step", fusion));

    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let parts: Vec<String> = worst.iter().map(|(n, e)| format!("{n}={e:.1e}")).collect();
    outcome(max < GRAD_TOL, format!("max rel err {max:.2e} < {GRAD_TOL:e} ({})", parts.join(", ")))
}

fn brute_anchor(s: &[f64], h: usize, w: usize, k: usize) -> ((usize, usize), f64) {
    let mut best = ((0, 0), f64::NEG_INFINITY);
    for i in 0..=h - k {
        for j in 0..=w - k {
            let mut sum = 0.0;
            for a in i..i + k {
                for b in j..j + k {
                    sum += s[a * w + b];
                }
            }
            if sum > best.1 {
                best = ((i, j), sum);
            }
        }
    }
    best
}

fn c2_selection() -> Result<Outcome> {
    let mut r = SeedRng::new(2024).stream();
    let mut ties = 0;
    for g in 0..SELECTION_GRIDS {
        let h = r.random_range(1..=8);
        let w = r.random_range(1..=8);
        let k = r.random_range(1..=h.min(w));
        // integer-valued grids produce exact ties
        let s: Vec<f64> = if g % 2 == 0 {
            (0..h * w).map(|_| f64::from(r.random_range(0u8..3))).collect()
        } else {
            (0..h * w).map(|_| r.random::<f64>()).collect()
        };
        let sel = select_window(&s, h, w, k)?;
        let (anchor, best) = brute_anchor(&s, h, w, k);
        if sel.anchor != anchor {
            return outcome(false, format!("grid {g} ({h}x{w}, w={k}): anchor {:?}, brute force {anchor:?}", sel.anchor));
        }
        let ow = w - k + 1;
        if sel.window_scores.data()[anchor.0 * ow + anchor.1] != best {
            return outcome(false, format!("grid {g}: window score differs from the hand sum"));
        }
        ties += usize::from(sel.window_scores.data().iter().filter(|&&v| v == best).count() > 1);
        let card = sel.mask.iter().filter(|&&m| m != 0.0).count();
        if card != k * k {
            return outcome(false, format!("grid {g}: mask keeps {card} tokens, expected {}", k * k));
        }
        for i in 0..h {
            for j in 0..w {
                let inside = (anchor.0..anchor.0 + k).contains(&i) && (anchor.1..anchor.1 + k).contains(&j);
                if (sel.mask[i * w + j] != 0.0) != inside {
                    return outcome(false, format!("grid {g}: mask is not the anchored window"));
                }
            }
        }
    }
    // 2 layers x 2 heads, one query, image span at keys 1..3 of 4
    let rows = [[0.1, 0.2, 0.3, 0.4], [0.25, 0.25, 0.25, 0.25], [0.4, 0.3, 0.2, 0.1], [0.0, 0.6, 0.4, 0.0]];
    let rec = LMForwardRecord {
        per_layer_last_hidden: Tensor::zeros(&[2, 1]),
        attention: Tensor::new(vec![2, 2, 1, 4], rows.iter().flatten().copied().collect())?,
        logits: Tensor::zeros(&[1, 1]),
        img_span: ImgSpan { start: 1, end: 3 },
    };
    let s = aggregate_saliency(&rec)?;
    let want = [(0.2 + 0.25 + 0.3 + 0.6) / 4.0, (0.3 + 0.25 + 0.2 + 0.4) / 4.0];
    let fixture = s.len() == 2 && s.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-15);
    outcome(
        fixture,
        format!("{SELECTION_GRIDS} grids match brute force ({ties} with tied maxima), |mask| = w^2, saliency fixture {s:?} vs {want:?}"),
    )
}

fn nce_value(a: &Tensor, t: &Tensor, tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(a.clone())?;
    let t = tape.constant(t.clone())?;
    let l = info_nce(&mut tape, a, t, tau)?;
    Ok(tape.value(l).item())
}

fn c3_closed_forms() -> Result<Outcome> {
    let row = vec![0.6, 0.8, 0.0];
    let same = Tensor::from_rows(&vec![row; 4])?;
    let uniform = nce_value(&same, &same, 0.07)?;
    let e = Tensor::identity(2);
    let b2 = nce_value(&e, &e, 1.0)?;
    let mut tape = Tape::new();
    let u = tape.constant(Tensor::zeros(&[3, 7]))?;
    let p = tape.constant(Tensor::zeros(&[0, 7]))?;
    let l = ar_and_prefix_loss(&mut tape, u, p, &[Some(0), Some(3), Some(6)], 0, 1.0)?;
    let ar = tape.value(l.ar).item();
    let pass = (uniform - 4f64.ln()).abs() < LN4_TOL && (b2 - NCE_B2).abs() < NCE_B2_TOL && (ar - 3.0 * 7f64.ln()).abs() < AR_TOL;
    outcome(pass, format!("uniform B=4 {uniform:.15} (ln 4 = {:.15}), orthonormal B=2 {b2:.6}, AR {ar:.12} (3 ln 7 = {:.12})", 4f64.ln(), 3.0 * 7f64.ln()))
}

fn c4_schedules() -> Result<Outcome> {
    let s = NoiseSchedule::build(ScheduleKind::Linear, 1e-4, 0.02, 1000)?;
    let exact = s.beta_at(1) == 1e-4 && s.beta_at(1000) == 0.02;
    let mut oracle = 1.0;
    for i in 0..1000 {
        oracle *= 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0);
    }
    let ab_err = (s.alpha_bar_at(1000) - oracle).abs();
    let mut r = SeedRng::new(4).stream();
    let mut monotone = true;
    for _ in 0..20 {
        let start: f64 = r.random_range(1e-5..1e-2);
        let end: f64 = r.random_range(start * 1.01..0.2);
        let t: usize = r.random_range(2..1000);
        for kind in ScheduleKind::ALL {
            let q = NoiseSchedule::build(kind, start, end, t)?;
            monotone &= (1..t).all(|i| q.alpha_bar_at(i + 1) < q.alpha_bar_at(i));
        }
    }
    outcome(
        exact && ab_err < ALPHA_BAR_TOL && monotone,
        format!(
            "beta_1 = {:e}, beta_1000 = {}, |alpha_bar_1000 - oracle| = {ab_err:.1e}, strictly decreasing over 20 configs x 3 kinds: {monotone}",
            s.beta_at(1),
            s.beta_at(1000)
        ),
    )
}

fn c5_chains() -> Result<Outcome> {
    let cfg = RunConfig::toy();
    let a = Model::new(&cfg)?;
    let b = Model::new(&cfg)?;
    let data = a.prepare_all(&toy_examples(&cfg, 3, 5)?)?;
    let bits = |z: &[Vec<f64>]| -> Vec<u64> { z.iter().flatten().map(|v| v.to_bits()).collect() };
    let (mut repro, mut prefix) = (true, true);
    for p in &data {
        let c6a = a.generate_with_k(p, 6)?.chain;
        let c6b = b.generate_with_k(p, 6)?.chain;
        let c2 = a.generate_with_k(p, 2)?.chain;
        repro &= c6a.k() == 6 && bits(&c6a.thoughts) == bits(&c6b.thoughts);
        prefix &= bits(&c2.thoughts) == bits(&c6a.thoughts[..2]);
    }
    outcome(repro && prefix, format!("bitwise reproducible: {repro}, K=2 chain is the K=6 prefix: {prefix} ({} examples)", data.len()))
}

fn c6_freeze() -> Result<Outcome> {
    let cfg = RunConfig::toy();
    let mut model = Model::new(&cfg)?;
    let ex = toy_examples(&cfg, cfg.data.count, cfg.seed)?;
    let special = |m: &Model| (m.store.get(m.lq.bot).clone(), m.store.get(m.lq.eot).clone());
    let init = special(&model);
    let mut notes = Vec::new();
    let mut pass = true;
    for stage in Stage::ALL {
        if stage == Stage::II {
            reinit_special_tokens(&mut model)?;
        }
        let before = model.store.clone();
        let tokens_before = special(&model);
        let mut run = StageRun::new(&model, stage, &ex)?;
        for _ in 0..FREEZE_STEPS {
            run.train_step(&mut model)?;
        }
        let plan = stage_plan(&model.cfg, stage);
        let mut changed = GroupSet::new();
        for (id, name, t) in model.store.iter() {
            if t != before.get(id) {
                let g = model.store.group(id);
                if !plan.trainable.contains(&g) {
                    pass = false;
                    notes.push(format!("{stage}: frozen {name} changed"));
                }
                changed.insert(g);
            }
        }
        if changed != plan.trainable {
            pass = false;
            notes.push(format!("{stage}: changed {changed:?}, planned {:?}", plan.trainable));
        }
        let moved = special(&model) != tokens_before;
        match stage {
            Stage::I => pass &= !moved && special(&model) == init,
            Stage::II => pass &= moved,
            _ => {}
        }
        notes.push(format!("{stage} ok"));
    }
    outcome(pass, format!("{FREEZE_STEPS} steps per stage; {}; bot/eot fixed in I, trained from II", notes.join(", ")))
}

static FULL_TOY: OnceLock<std::result::Result<Evaluation, String>> = OnceLock::new();

fn full_toy() -> Result<Evaluation> {
    FULL_TOY
        .get_or_init(|| {
            let cfg = RunConfig::toy();
            cli::dataset(&cfg)
                .and_then(|ex| cli::train_and_evaluate(&cfg, &ex, None))
                .map(|r| r.evaluation)
                .map_err(|e| e.to_string())
        })
        .clone()
        .map_err(latent_vl::Error::Numeric)
}

fn c7_learnability() -> Result<Outcome> {
    let full = full_toy()?;
    let mut cfg = RunConfig::toy();
    cfg.reason.k = 0;
    let k0 = cli::train_and_evaluate(&cfg, &cli::dataset(&cfg)?, None)?.evaluation;
    let pass = full.final_l_ar < LEARN_L_AR && full.train_accuracy == 1.0 && k0.final_l_ar > full.final_l_ar;
    outcome(
        pass,
        format!(
            "full: L_AR {:.5} (< {LEARN_L_AR}), train acc {:.3}; K=0: L_AR {:.5}, train acc {:.3} (must exceed full L_AR)",
            full.final_l_ar, full.train_accuracy, k0.final_l_ar, k0.train_accuracy
        ),
    )
}

fn c8_ablation() -> Result<Outcome> {
    let mut sweep = RunConfig::toy();
    for i in 0..4 {
        sweep.stage_mut(i).epochs = SWEEP_EPOCHS;
    }
    let rows = cli::ablate(&sweep, Axis::All, |_| {})?;
    let expected = [("components", 6), ("window", 3), ("schedule", 6), ("k", 5), ("prefix", 7), ("burst", 4)];
    let mut complete = true;
    let mut counts = Vec::new();
    for (axis, n) in expected {
        let got: Vec<_> = rows.iter().filter(|r| r.axis == axis).collect();
        let finite = got.iter().all(|r| {
            let e = &r.eval;
            [e.train_accuracy, e.heldout_accuracy, e.final_l_ar, e.mean_tokens].iter().all(|v| v.is_finite())
        });
        complete &= got.len() == n && finite;
        counts.push(format!("{axis} {}/{n}", got.len()));
    }
    let csv_lines = cli::ablation_csv(&rows).lines().count();
    complete &= csv_lines == rows.len() + 1;

    let full = full_toy()?;
    let mut cfg = RunConfig::toy();
    cfg.ablation.no_lqformer = true;
    let nolq = cli::train_and_evaluate(&cfg, &cli::dataset(&cfg)?, None)?.evaluation;
    let degrades = nolq.heldout_accuracy < full.heldout_accuracy;
    outcome(
        complete && degrades,
        format!(
            "rows {} ({}); held-out acc full {:.3} vs no_lqformer {:.3} (train {:.3} vs {:.3})",
            rows.len(),
            counts.join(", "),
            full.heldout_accuracy,
            nolq.heldout_accuracy,
            full.train_accuracy,
            nolq.train_accuracy
        ),
    )
}

fn c9_probes() -> Result<Outcome> {
    let mut cfg = RunConfig::toy();
    cfg.data.family = TaskFamily::Mixed;
    cfg.data.count = PROBE_EXAMPLES;
    let r = cli::train_and_evaluate(&cfg, &cli::dataset(&cfg)?, None)?;
    let feats = probe_features(&r.model, &r.train)?;
    let reports = probe_suite(&feats, cli::PROBE_PAIRS, &cfg.optim, &SeedRng::new(cfg.seed).split_str("probe"))?;
    let acc = |src: &str, kind: ProbeKind| {
        reports
            .iter()
            .find(|r| r.source == src && r.kind == kind)
            .map_or(f64::NAN, |r| r.accuracy)
    };
    let mut pass = true;
    let mut parts = Vec::new();
    for kind in [ProbeKind::LinearMargin, ProbeKind::OneHiddenLayer] {
        for (thought, hidden) in [("thought_visual", "hidden_visual"), ("thought_rationale", "hidden_rationale")] {
            let (a, b) = (acc(thought, kind), acc(hidden, kind));
            pass &= a - b >= PROBE_MARGIN;
            parts.push(format!("{kind} {thought} {a:.3} vs {hidden} {b:.3}"));
        }
    }
    outcome(pass, format!("margin >= {PROBE_MARGIN}: {}", parts.join("; ")))
}

fn enumerate_less(a: &[f64], b: &[f64]) -> f64 {
    // every split of the pooled sample into |a| and |b| values
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let n = pooled.len();
    let observed: f64 = a.iter().map(|x| b.iter().filter(|y| x > y).count() as f64).sum();
    let (mut hit, mut total) = (0u64, 0u64);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != a.len() {
            continue;
        }
        let (sa, sb): (Vec<f64>, Vec<f64>) = {
            let mut sa = Vec::new();
            let mut sb = Vec::new();
            for (i, &v) in pooled.iter().enumerate() {
                if mask >> i & 1 == 1 {
                    sa.push(v)
                } else {
                    sb.push(v)
                }
            }
            (sa, sb)
        };
        let u: f64 = sa.iter().map(|x| sb.iter().filter(|y| x > &y).count() as f64).sum();
        total += 1;
        hit += u64::from(u <= observed);
    }
    hit as f64 / total as f64
}

fn c10_statistics() -> Result<Outcome> {
    let mut r = SeedRng::new(10).stream();
    let mut mw_ok = true;
    let mut cases = 0;
    for na in 2..=8 {
        for nb in 2..=8 {
            let xs: Vec<f64> = (0..na + nb).map(|_| r.random::<f64>()).collect();
            let (a, b) = xs.split_at(na);
            let mw = mann_whitney(a, b)?;
            mw_ok &= mw.p_exact_less == Some(enumerate_less(a, b));
            mw_ok &= u_distribution(na, nb).iter().sum::<f64>() == (0..na).fold(1.0, |c, i| c * (na + nb - i) as f64 / (i + 1) as f64).round();
            cases += 1;
        }
    }
    let mut welch_err: f64 = 0.0;
    for _ in 0..200 {
        let na = r.random_range(2..12);
        let nb = r.random_range(2..12);
        let a: Vec<f64> = (0..na).map(|_| r.random_range(-10.0..10.0)).collect();
        let b: Vec<f64> = (0..nb).map(|_| r.random_range(-10.0..10.0)).collect();
        let m = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
        let v = |x: &[f64]| {
            let mu = m(x);
            x.iter().map(|y| (y - mu).powi(2)).sum::<f64>() / (x.len() - 1) as f64
        };
        let t = (m(&a) - m(&b)) / (v(&a) / na as f64 + v(&b) / nb as f64).sqrt();
        welch_err = welch_err.max((welch_t(&a, &b)?.t - t).abs() / t.abs().max(1.0));
    }
    let a = [1.0, 2.0, 3.0, 4.0, 5.0];
    let b = [6.0, 7.0, 8.0, 9.0, 10.0];
    let mw = mann_whitney(&a, &b)?;
    let fixture = mw.u == 0.0 && mw.p_exact_less == Some(1.0 / 252.0);
    outcome(
        mw_ok && welch_err < WELCH_TOL && fixture,
        format!(
            "exact MW p equals enumeration on {cases} size pairs: {mw_ok}; Welch rel err {welch_err:.1e}; fixture U = {}, p = {:?} (1/252 = {})",
            mw.u,
            mw.p_exact_less,
            1.0 / 252.0
        ),
    )
}

/// Returns the true noise.
struct TrueEps<'a>(&'a Tensor);

impl EpsPredictor for TrueEps<'_> {
    fn predict(&self, tape: &mut Tape, _b: &Binding, _x: Var, _t: usize, _z: Option<Var>) -> Result<Var> {
        tape.constant(to_rows(self.0)?)
    }
}

fn c11_reconstruction() -> Result<Outcome> {
    let cfg = RunConfig::toy();
    let mut model = Model::new(&cfg)?;
    let data = model.prepare_all(&toy_examples(&cfg, RECON_TARGETS, 3)?)?;
    let d = cfg.model.d_t;
    let rng = SeedRng::new(5);
    let chains: Vec<Tensor> = (0..RECON_TARGETS)
        .map(|i| Tensor::new(vec![4, d], normal_vec(&mut rng.split(i as u64).stream(), 4 * d, 1.0)))
        .collect::<Result<_>>()?;

    let eps = rand_tensor(6, data[0].latent.shape());
    let mut tape = Tape::new();
    let frozen = Binding::frozen(&mut tape, &model.store)?;
    let oracle = recon_loss_at(&mut tape, &frozen, &TrueEps(&eps), &data[0].latent, None, &model.schedule, 500, &eps)?;
    let oracle = tape.value(oracle).item();

    let groups: GroupSet = [Group::Denoiser].into();
    let mut opt = AdamW::new(&cfg.optim, &model.store, &groups);
    let mut last = f64::NAN;
    for s in 0..RECON_STEPS {
        let mut tape = Tape::new();
        let b = Binding::new(&mut tape, &model.store, &groups)?;
        let mut total = None;
        for (i, p) in data.iter().enumerate() {
            let z = tape.constant(chains[i].clone())?;
            let r = recon_loss(&mut tape, &b, &model.denoiser, &p.latent, Some(z), &model.schedule, &rng.split_str("step").split((s * RECON_TARGETS + i) as u64))?;
            total = Some(match total {
                None => r.loss,
                Some(t) => tape.add(t, r.loss)?,
            });
        }
        let loss = tape.scale(total.expect("targets are non-empty"), 1.0 / RECON_TARGETS as f64)?;
        last = tape.value(loss).item();
        let g = tape.backward(loss)?;
        opt.step(&mut model.store, &b, &g, lr_at(s, RECON_STEPS, RECON_STEPS / 20, RECON_LR))?;
    }
    let mut ratios = Vec::new();
    for (i, p) in data.iter().enumerate() {
        let x = sample_reconstruction(&model.denoiser, &model.store, &chains[i], &model.schedule, &rng.split_str("sample").split(i as u64))?;
        let t = p.latent.data();
        let n = t.len() as f64;
        let mse = x.data().iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
        let mu = t.iter().sum::<f64>() / n;
        let var = t.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
        ratios.push(mse / var);
    }
    let worst = ratios.iter().copied().fold(0.0, f64::max);
    outcome(
        worst < RECON_RATIO && oracle == 0.0,
        format!("{RECON_TARGETS} targets, {RECON_STEPS} steps (final loss {last:.4}); worst MSE/var {worst:.4} < {RECON_RATIO}; true-noise loss {oracle}"),
    )
}

fn c12_serialization() -> Result<Outcome> {
    let cfg = RunConfig::toy();
    let dir = tempfile::tempdir().map_err(latent_vl::Error::Io)?;
    let ex = toy_examples(&cfg, cfg.data.count, cfg.seed)?;
    let stage = Stage::IV;

    let mut m = Model::new(&cfg)?;
    let mut run = StageRun::new(&m, stage, &ex)?;
    let full: Vec<_> = (0..RESUME_STEPS).map(|_| run.train_step(&mut m).map(|s| s.losses)).collect::<Result<_>>()?;

    let half = RESUME_STEPS / 2;
    let mut m = Model::new(&cfg)?;
    let mut run = StageRun::new(&m, stage, &ex)?;
    let mut seq: Vec<_> = (0..half).map(|_| run.train_step(&mut m).map(|s| s.losses)).collect::<Result<_>>()?;
    let first = dir.path().join("a.ccva");
    let second = dir.path().join("b.ccva");
    run.checkpoint(&m).save(&first)?;
    drop((m, run));
    let loaded = Checkpoint::load(&first)?;
    loaded.save(&second)?;
    let a = std::fs::read(&first).map_err(latent_vl::Error::Io)?;
    let b = std::fs::read(&second).map_err(latent_vl::Error::Io)?;
    let identical = a == b;

    let mut m = Model::new(&cfg)?;
    let mut run = StageRun::new(&m, stage, &ex)?;
    run.restore(&mut m, &loaded)?;
    for _ in half..RESUME_STEPS {
        seq.push(run.train_step(&mut m)?.losses);
    }
    let first_diff = full.iter().zip(&seq).position(|(x, y)| x != y);
    outcome(
        identical && first_diff.is_none() && seq.len() == RESUME_STEPS,
        format!(
            "save/load/save identical: {identical} ({} bytes); resume at step {half} of {RESUME_STEPS}: {}",
            a.len(),
            first_diff.map_or("every loss record equal".to_string(), |i| format!("diverges at step {i}"))
        ),
    )
}

struct Criterion {
    id: usize,
    name: &'static str,
    limit: Option<Duration>,
    run: fn() -> Result<Outcome>,
}

const fn secs(s: u64) -> Option<Duration> {
    Some(Duration::from_secs(s))
}

fn criteria() -> Vec<Criterion> {
    vec![
        Criterion { id: 1, name: "gradient integrity", limit: secs(60), run: c1_gradients },
        Criterion { id: 2, name: "selection oracle", limit: secs(10), run: c2_selection },
        Criterion { id: 3, name: "closed-form losses", limit: secs(1), run: c3_closed_forms },
        Criterion { id: 4, name: "noise schedules", limit: secs(1), run: c4_schedules },
        Criterion { id: 5, name: "chain determinism", limit: secs(10), run: c5_chains },
        Criterion { id: 6, name: "curriculum freeze", limit: secs(60), run: c6_freeze },
        Criterion { id: 7, name: "end-to-end learnability", limit: secs(30 * 60), run: c7_learnability },
        Criterion { id: 8, name: "ablation harness", limit: secs(2 * 3600), run: c8_ablation },
        Criterion { id: 9, name: "probe direction", limit: secs(5 * 60), run: c9_probes },
        Criterion { id: 10, name: "statistics", limit: None, run: c10_statistics },
        Criterion { id: 11, name: "reconstruction", limit: None, run: c11_reconstruction },
        Criterion { id: 12, name: "serialization", limit: None, run: c12_serialization },
    ]
}

fn selected() -> Vec<usize> {
    match std::env::var("LATENT_VL_ACCEPTANCE") {
        Ok(v) if v == "full" => (1..=12).collect(),
        Ok(v) if !v.trim().is_empty() => v.split(',').filter_map(|s| s.trim().parse().ok()).collect(),
        _ => (1..=12).filter(|i| !LONG.contains(i)).collect(),
    }
}

fn main() {
    let chosen = selected();
    let mut failed = 0;
    for c in criteria() {
        if !chosen.contains(&c.id) {
            println!("SKIP {:>2} {}: set LATENT_VL_ACCEPTANCE=full or ={} to run", c.id, c.name, c.id);
            continue;
        }
        let t0 = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(c.run));
        let took = t0.elapsed();
        let (mut pass, mut detail) = match res {
            Ok(Ok(o)) => (o.pass, o.detail),
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(_) => (false, "panicked".to_string()),
        };
        if let Some(l) = c.limit {
            if took > l {
                pass = false;
                detail.push_str(&format!("; over the {}s budget", l.as_secs()));
            }
        }
        failed += usize::from(!pass);
        println!("{} {:>2} {} [{:.1}s]: {detail}", if pass { "PASS" } else { "FAIL" }, c.id, c.name, took.as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
