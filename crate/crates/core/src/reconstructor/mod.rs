//! Diffusion reconstruction of a latent image from the thought chain.

mod denoiser;

pub use denoiser::Denoiser;

use crate::config::ScheduleKind;
use crate::error::{Error, Result};
use crate::numkernel::{Tape, Tensor, Var};
use crate::params::{Binding, ParamStore};
use crate::rng::{normal_vec, SeedRng};
use rand::Rng;

/// `s` offset of the cosine construction.
const COSINE_S: f64 = 0.008;
const BETA_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub beta_start: f64,
    pub beta_end: f64,
    pub t_diff: usize,
}

impl NoiseSchedule {
    pub fn validate_bounds(beta_start: f64, beta_end: f64, t_diff: usize) -> Result<()> {
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "beta bounds need 0 < start <= end < 1, got {beta_start}..{beta_end}"
            )));
        }
        if t_diff == 0 {
            return Err(Error::Config("t_diff must be >= 1".into()));
        }
        Ok(())
    }

    pub fn build(kind: ScheduleKind, beta_start: f64, beta_end: f64, t_diff: usize) -> Result<Self> {
        Self::validate_bounds(beta_start, beta_end, t_diff)?;
        let t = t_diff as f64;
        let beta: Vec<f64> = match kind {
            ScheduleKind::Linear => (0..t_diff)
                .map(|i| {
                    if t_diff == 1 {
                        beta_start
                    } else {
                        let f = i as f64 / (t - 1.0);
                        (beta_start * (1.0 - f) + beta_end * f).min(beta_end)
                    }
                })
                .collect(),
            ScheduleKind::Cosine | ScheduleKind::SquaredCosine => {
                let power = if kind == ScheduleKind::Cosine { 2 } else { 4 };
                let f = |s: f64| (((s / t) + COSINE_S) / (1.0 + COSINE_S) * std::f64::consts::FRAC_PI_2).cos().powi(power);
                (1..=t_diff)
                    .map(|i| {
                        let b = 1.0 - f(i as f64) / f(i as f64 - 1.0);
                        b.clamp(BETA_FLOOR, beta_end)
                    })
                    .collect()
            }
        };
        let mut alpha_bar = Vec::with_capacity(t_diff);
        let mut acc = 1.0;
        for &b in &beta {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(NoiseSchedule {
            kind,
            beta,
            alpha_bar,
            beta_start,
            beta_end,
            t_diff,
        })
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_diff {
            return Err(Error::Range(format!("timestep {t} outside 1..={}", self.t_diff)));
        }
        Ok(())
    }

    /// `ᾱ_t` with 1-based `t`; `alpha_bar_at(0) == 1`.
    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn beta_at(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }
}

/// The six configurations of the schedule comparison: every kind crossed
/// with `β_max ∈ {0.02, 0.05}`.
pub fn schedule_grid() -> Vec<(ScheduleKind, f64)> {
    ScheduleKind::ALL
        .iter()
        .flat_map(|&k| [0.02, 0.05].map(|b| (k, b)))
        .collect()
}

/// `x_t = √ᾱ_t x_0 + √(1−ᾱ_t) ε`.
pub fn forward_diffuse(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    if x0.shape() != eps.shape() {
        return Err(Error::Dimension(format!(
            "noise shape {:?} differs from target {:?}",
            eps.shape(),
            x0.shape()
        )));
    }
    let ab = sched.alpha_bar_at(t);
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0.data().iter().zip(eps.data()).map(|(x, e)| a * x + s * e).collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// Anything that predicts the noise in `x_t`, fed as `[HW x C]` rows.
pub trait EpsPredictor {
    fn predict(&self, tape: &mut Tape, b: &Binding, x_t: Var, t: usize, thoughts: Option<Var>) -> Result<Var>;
}

impl EpsPredictor for Denoiser {
    fn predict(&self, tape: &mut Tape, b: &Binding, x_t: Var, t: usize, thoughts: Option<Var>) -> Result<Var> {
        self.forward(tape, b, x_t, t, thoughts)
    }
}

/// `[C x h x w]` to `[hw x C]` rows.
pub fn to_rows(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::Dimension(format!("latent image must be [C x h x w], got {s:?}")));
    }
    let (c, hw) = (s[0], s[1] * s[2]);
    let mut out = vec![0.0; c * hw];
    for ch in 0..c {
        for p in 0..hw {
            out[p * c + ch] = x.data()[ch * hw + p];
        }
    }
    Tensor::new(vec![hw, c], out)
}

/// Inverse of [`to_rows`].
pub fn from_rows(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (hw, c) = (x.rows(), x.cols());
    if hw != h * w {
        return Err(Error::Dimension(format!("{hw} rows do not fill {h}x{w}")));
    }
    let mut out = vec![0.0; c * hw];
    for p in 0..hw {
        for ch in 0..c {
            out[ch * hw + p] = x.data()[p * c + ch];
        }
    }
    Tensor::new(vec![c, h, w], out)
}

pub struct ReconLoss {
    pub loss: Var,
    pub t: usize,
    pub eps: Tensor,
}

/// Denoising score matching for one target: `t ~ U{1..T}`, `ε ~ N(0, I)`,
/// mean of `(ε − ε̂)²` over elements.
pub fn recon_loss<P: EpsPredictor + ?Sized>(
    tape: &mut Tape,
    b: &Binding,
    den: &P,
    x0: &Tensor,
    thoughts: Option<Var>,
    sched: &NoiseSchedule,
    rng: &SeedRng,
) -> Result<ReconLoss> {
    let mut s = rng.stream();
    let t = s.random_range(1..=sched.t_diff);
    let eps = Tensor::new(x0.shape().to_vec(), normal_vec(&mut s, x0.numel(), 1.0))?;
    let loss = recon_loss_at(tape, b, den, x0, thoughts, sched, t, &eps)?;
    Ok(ReconLoss { loss, t, eps })
}

/// [`recon_loss`] with a fixed timestep and noise.
#[allow(clippy::too_many_arguments)]
pub fn recon_loss_at<P: EpsPredictor + ?Sized>(
    tape: &mut Tape,
    b: &Binding,
    den: &P,
    x0: &Tensor,
    thoughts: Option<Var>,
    sched: &NoiseSchedule,
    t: usize,
    eps: &Tensor,
) -> Result<Var> {
    let xt = forward_diffuse(x0, t, eps, sched)?;
    let xt = tape.constant(to_rows(&xt)?)?;
    let target = tape.constant(to_rows(eps)?)?;
    let pred = den.predict(tape, b, xt, t, thoughts)?;
    let d = tape.sub(pred, target)?;
    let sq = tape.mul(d, d)?;
    tape.mean(sq)
}

/// Eager noise prediction for `[C x h x w]` input and `[K x d_t]` thoughts.
pub fn denoise_predict(den: &Denoiser, store: &ParamStore, x_t: &Tensor, t: usize, chain: &Tensor) -> Result<Tensor> {
    let s = x_t.shape().to_vec();
    let mut tape = Tape::new();
    let b = Binding::frozen(&mut tape, store)?;
    let x = tape.constant(to_rows(x_t)?)?;
    let z = if chain.numel() == 0 { None } else { Some(tape.constant(chain.clone())?) };
    let e = den.forward(&mut tape, &b, x, t, z)?;
    from_rows(tape.value(e), s[1], s[2])
}

/// Ancestral sampling from `x_T ~ N(0, I)` with posterior variance
/// `β̃_t = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)`.
pub fn sample_reconstruction(den: &Denoiser, store: &ParamStore, chain: &Tensor, sched: &NoiseSchedule, rng: &SeedRng) -> Result<Tensor> {
    let (c, hw) = (den.channels_in(), den.hw());
    let mut s = rng.stream();
    let mut x = Tensor::new(vec![c, hw, hw], normal_vec(&mut s, c * hw * hw, 1.0))?;
    for t in (1..=sched.t_diff).rev() {
        let e = denoise_predict(den, store, &x, t, chain)?;
        let (beta, ab, ab_prev) = (sched.beta_at(t), sched.alpha_bar_at(t), sched.alpha_bar_at(t - 1));
        let coef = beta / (1.0 - ab).sqrt();
        let inv = 1.0 / (1.0 - beta).sqrt();
        let noise = if t > 1 {
            let var = beta * (1.0 - ab_prev) / (1.0 - ab);
            normal_vec(&mut s, x.numel(), var.sqrt())
        } else {
            vec![0.0; x.numel()]
        };
        let data = x
            .data()
            .iter()
            .zip(e.data())
            .zip(&noise)
            .map(|((xv, ev), n)| inv * (xv - coef * ev) + n)
            .collect();
        x = Tensor::new(x.shape().to_vec(), data)?;
    }
    Ok(x)
}

/// Mean over channels, `[h x w]`.
pub fn channel_mean(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::Dimension(format!("expected [C x h x w], got {s:?}")));
    }
    let (c, hw) = (s[0], s[1] * s[2]);
    let mut out = vec![0.0; hw];
    for ch in 0..c {
        for (o, v) in out.iter_mut().zip(&x.data()[ch * hw..(ch + 1) * hw]) {
            *o += v / c as f64;
        }
    }
    Tensor::new(vec![s[1], s[2]], out)
}

/// One line per `(channel, row)`.
pub fn feature_csv(x: &Tensor) -> String {
    let s = x.shape();
    let w = *s.last().unwrap_or(&1);
    x.data()
        .chunks(w.max(1))
        .map(|r| r.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join("\n")
        + "\n"
}
