//! The assembled model: per-example forward, losses and greedy generation.

use crate::backbone::{aggregate_hidden, EncoderIds, ImgSpan, LMForwardRecord, LmIds, ProjectorIds, Session, VisualFeatures};
use crate::config::RunConfig;
use crate::data::{answer_matches, vocab, Generator, SyntheticExample};
use crate::error::{Error, Result};
use crate::lqformer::{interleaved_generate, run_chain, CachedContext, ContextProvider, Halting, KvMemory, LatentDecoder, LqIds, ThoughtChain};
use crate::numkernel::{Tape, Tensor, Var};
use crate::objectives::{symmetric_info_nce, LossRecord, PoolHead};
use crate::params::{Binding, ParamStore};
use crate::reconstructor::{recon_loss, Denoiser, NoiseSchedule};
use crate::rng::SeedRng;
use crate::tokensel::{aggregate_saliency, select_window, SaliencySelection};

/// Which loss a stage optimises.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Answer likelihood over `[V_T; T]` only.
    Ar,
    /// Full latent objective.
    Latent,
}

pub struct Model {
    pub cfg: RunConfig,
    pub store: ParamStore,
    pub encoder: EncoderIds,
    pub projector: ProjectorIds,
    pub lm: LmIds,
    pub lq: LqIds,
    pub pool_z: PoolHead,
    pub pool_v: PoolHead,
    pub pool_t: PoolHead,
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
    pub halting: Option<Halting>,
}

/// An example with its frozen-encoder features and reconstruction target.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub ex: SyntheticExample,
    pub visual: VisualFeatures,
    pub latent: Tensor,
}

pub struct ExampleOut {
    pub ar: Var,
    pub prefix: Option<Var>,
    pub recon: Option<Var>,
    /// `(f_z, f_v, f_t)`, each `[1 x d_p]`.
    pub pooled: Option<(Var, Var, Var)>,
    pub thoughts: Vec<Var>,
    pub chain: ThoughtChain,
    pub selection: SaliencySelection,
    pub y_len: usize,
}

pub struct BatchLoss {
    pub loss: Var,
    pub record: LossRecord,
}

#[derive(Clone, Debug)]
pub struct Generation {
    pub ids: Vec<usize>,
    pub chain: ThoughtChain,
    pub bursts: Vec<ThoughtChain>,
    pub selection: SaliencySelection,
    /// Attention from the position emitting the first answer token to each
    /// visual token, averaged over layers and heads, `[N_v]`.
    pub first_attention: Vec<f64>,
}

fn detach(tape: &mut Tape, v: Var) -> Result<Var> {
    let t = tape.value(v).clone();
    tape.constant(t)
}

/// Splits `Y` after each newline, at most `max` times.
fn segments(y: &[usize], max: usize) -> Vec<&[usize]> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, &t) in y.iter().enumerate() {
        if t == vocab::NEWLINE && out.len() < max && i + 1 < y.len() {
            out.push(&y[start..=i]);
            start = i + 1;
        }
    }
    out.push(&y[start..]);
    out
}

impl Model {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let m = &cfg.model;
        let rng = SeedRng::new(cfg.seed).split_str("init");
        let mut store = ParamStore::new();
        let encoder = EncoderIds::register(&mut store, &rng, m)?;
        let projector = ProjectorIds::register(&mut store, &rng, m, false)?;
        let lm = LmIds::register(&mut store, &rng, m)?;
        let lq = LqIds::register(&mut store, &rng, m)?;
        let pool_z = PoolHead::register(&mut store, &rng, "lqformer.pool_z", m.d_t, m.d_p)?;
        let pool_v = PoolHead::register(&mut store, &rng, "lqformer.pool_v", m.d_v, m.d_p)?;
        let pool_t = PoolHead::register(&mut store, &rng, "lqformer.pool_t", m.d_t, m.d_p)?;
        let d = &cfg.diffusion;
        let denoiser = Denoiser::register(&mut store, &rng, d, m.d_t, m.ln_eps)?;
        let schedule = NoiseSchedule::build(d.kind, d.beta_start, d.beta_end, d.t_diff)?;
        Ok(Model {
            cfg: cfg.clone(),
            store,
            encoder,
            projector,
            lm,
            lq,
            pool_z,
            pool_v,
            pool_t,
            denoiser,
            schedule,
            halting: None,
        })
    }

    pub fn generator(&self) -> Result<Generator> {
        Generator::new(&self.cfg.model, self.cfg.data.max_objects, self.cfg.data.newline_every)
    }

    pub fn prepare(&self, ex: &SyntheticExample) -> Result<Prepared> {
        let visual = self.encoder.encode(&self.store, &self.cfg.model, &ex.image_patches)?;
        let d = &self.cfg.diffusion;
        let latent = self.generator()?.latent_target(&ex.image_patches, d.latent_c, d.latent_hw);
        Ok(Prepared {
            ex: ex.clone(),
            visual,
            latent,
        })
    }

    pub fn prepare_all(&self, exs: &[SyntheticExample]) -> Result<Vec<Prepared>> {
        exs.iter().map(|e| self.prepare(e)).collect()
    }

    fn hidden_proj(&self, b: &Binding) -> Option<Var> {
        self.lq.hidden_proj.map(|id| b.var(id))
    }

    /// `[V_T; T]` input embeddings.
    fn context(&self, tape: &mut Tape, b: &Binding, p: &Prepared) -> Result<Var> {
        let v = tape.constant(p.visual.tokens.clone())?;
        let vt = self.projector.forward(tape, b, v)?;
        if p.ex.question_ids.is_empty() {
            return Ok(vt);
        }
        let t = self.lm.embed(tape, b, &p.ex.question_ids)?;
        tape.concat_rows(&[vt, t])
    }

    /// Window selection from the attention of the last `[V_T; T]` position.
    fn select(&self, attention: Tensor, n_v: usize) -> Result<SaliencySelection> {
        let m = &self.cfg.model;
        if self.cfg.ablation.no_selection {
            return Ok(SaliencySelection::keep_all(n_v, m.grid_h, m.grid_w));
        }
        let rec = LMForwardRecord {
            per_layer_last_hidden: Tensor::zeros(&[1, 1]),
            attention,
            logits: Tensor::zeros(&[1, 1]),
            img_span: ImgSpan { start: 0, end: n_v },
        };
        let s = aggregate_saliency(&rec)?;
        select_window(&s, m.grid_h, m.grid_w, self.cfg.select.w)
    }

    /// `V_selected`: masked rows, or only the kept rows when masked keys are dropped.
    fn selected_visual(&self, p: &Prepared, sel: &SaliencySelection) -> Result<Tensor> {
        if self.cfg.select.drop_masked_keys {
            let idx = sel.selected_indices();
            let d = p.visual.tokens.cols();
            let data = idx.iter().flat_map(|&i| p.visual.tokens.row(i).to_vec()).collect();
            Tensor::new(vec![idx.len(), d], data)
        } else {
            crate::tokensel::apply_mask(&p.visual, sel)
        }
    }

    /// Runs the reasoning loop on a session whose last chunk is `pending`.
    #[allow(clippy::too_many_arguments)]
    fn chain(
        &self,
        tape: &mut Tape,
        b: &Binding,
        sess: &mut Session,
        pending: crate::backbone::Chunk,
        p: &Prepared,
        sel: &SaliencySelection,
        k: usize,
    ) -> Result<(Vec<Var>, ThoughtChain)> {
        let m = &self.cfg.model;
        let no_lq = self.cfg.ablation.no_lqformer;
        let reselect = self.cfg.select.reselect_each_step && !self.cfg.ablation.no_selection;
        let mut mem: Option<KvMemory> = None;
        if !no_lq {
            let v = tape.constant(self.selected_visual(p, sel)?)?;
            mem = Some(self.lq.memory(tape, b, v)?);
        }
        let bot_eot = (self.store.get(self.lq.bot).data().to_vec(), self.store.get(self.lq.eot).data().to_vec());
        let hp = self.hidden_proj(b);
        let mut provider = CachedContext {
            sess,
            b,
            lm: &self.lm,
            cfg: m,
            hidden_proj: hp,
            pending: Some(pending),
        };
        let n_v = p.visual.n_v();
        let mut step = 0usize;
        let halting = self.halting;
        run_chain(
            tape,
            &mut provider,
            |tape, prov, h| {
                step += 1;
                if no_lq {
                    return Ok(h);
                }
                if reselect && step > 1 {
                    if let Some(a) = prov.last_attention(tape) {
                        let s = self.select(a, n_v)?;
                        let v = tape.constant(self.selected_visual(p, &s)?)?;
                        mem = Some(self.lq.memory(tape, b, v)?);
                    }
                }
                let mem = mem.as_ref().expect("memory exists with the LQ-Former");
                Ok(self.lq.fuse(tape, b, m, h, mem)?.z)
            },
            k,
            halting,
            bot_eot,
        )
    }

    /// Teacher-forced forward of one example. Returns the loss terms and the
    /// chain.
    pub fn forward_example(&self, tape: &mut Tape, b: &Binding, p: &Prepared, objective: Objective, rng: &SeedRng) -> Result<ExampleOut> {
        let m = &self.cfg.model;
        let ab = &self.cfg.ablation;
        let y = p.ex.target();
        if y.is_empty() {
            return Err(Error::Dataset("example has an empty target".into()));
        }
        let n_v = p.visual.n_v();
        let ctx = self.context(tape, b, p)?;
        let ctx_rows = tape.shape(ctx)[0];
        let k = if objective == Objective::Ar { 0 } else { self.cfg.reason.k };
        let mut sess = Session::new(m);
        let targets: Vec<Option<usize>> = y.iter().map(|&t| Some(t)).collect();

        if k == 0 {
            let mut parts = vec![ctx];
            if y.len() > 1 {
                parts.push(self.lm.embed(tape, b, &y[..y.len() - 1])?);
            }
            let seq = tape.concat_rows(&parts)?;
            let c = sess.feed(tape, b, &self.lm, m, seq)?;
            let rows = tape.slice_rows(c.final_hidden(), ctx_rows - 1, y.len())?;
            let logits = self.lm.logits(tape, b, m, rows)?;
            let ar = tape.cross_entropy(logits, &targets)?;
            return Ok(ExampleOut {
                ar,
                prefix: None,
                recon: None,
                pooled: None,
                thoughts: Vec::new(),
                chain: ThoughtChain {
                    thoughts: Vec::new(),
                    step_distances: Vec::new(),
                    halted_early: false,
                    bot_eot: (Vec::new(), Vec::new()),
                },
                selection: SaliencySelection::keep_all(n_v, m.grid_h, m.grid_w),
                y_len: y.len(),
            });
        }

        let bot = b.var(self.lq.bot);
        let eot = b.var(self.lq.eot);
        let first_in = tape.concat_rows(&[ctx, bot])?;
        let first = sess.feed(tape, b, &self.lm, m, first_in)?;
        let sel = self.select(first.query_attention(tape, m.heads, ctx_rows - 1), n_v)?;
        let (z, chain) = self.chain(tape, b, &mut sess, first, p, &sel, k)?;

        // answer under teacher forcing, with optional latent bursts after newlines
        let max_seg = if self.cfg.reason.interleaved { self.cfg.reason.max_segments } else { 0 };
        let segs = segments(&y, max_seg);
        let mut pred_rows = Vec::with_capacity(segs.len());
        let mut last_z = *z.last().expect("k >= 1");
        for (j, seg) in segs.iter().enumerate() {
            if j > 0 {
                let bc = sess.feed(tape, b, &self.lm, m, bot)?;
                let (bz, _) = self.chain(tape, b, &mut sess, bc, p, &sel, self.cfg.reason.latent_burst)?;
                last_z = *bz.last().expect("burst >= 1");
            }
            let fed = if j + 1 == segs.len() { &seg[..seg.len() - 1] } else { seg };
            let mut parts = vec![last_z, eot];
            if !fed.is_empty() {
                parts.push(self.lm.embed(tape, b, fed)?);
            }
            let input = tape.concat_rows(&parts)?;
            let c = sess.feed(tape, b, &self.lm, m, input)?;
            pred_rows.push(tape.slice_rows(c.final_hidden(), 1, seg.len())?);
        }
        let hidden = tape.concat_rows(&pred_rows)?;
        let logits = self.lm.logits(tape, b, m, hidden)?;
        let ar = tape.cross_entropy(logits, &targets)?;

        let r_len = self.cfg.loss.prefix_len.min(y.len());
        let prefix = if ab.no_prefix || r_len == 0 {
            None
        } else {
            let mut parts = vec![bot];
            parts.extend_from_slice(&z);
            parts.push(eot);
            if r_len > 1 {
                parts.push(self.lm.embed(tape, b, &y[..r_len - 1])?);
            }
            let input = tape.concat_rows(&parts)?;
            let mut ps = Session::new(m);
            let c = ps.feed(tape, b, &self.lm, m, input)?;
            let rows = tape.slice_rows(c.final_hidden(), z.len() + 1, r_len)?;
            let lp = self.lm.logits(tape, b, m, rows)?;
            Some(tape.cross_entropy(lp, &targets[..r_len])?)
        };

        let zs = tape.concat_rows(&z)?;
        let pooled = if ab.no_nce {
            None
        } else {
            let f_z = self.pool_z.forward(tape, b, zs)?;
            let v = if self.cfg.loss.fv_from_selected {
                self.selected_visual(p, &sel)?
            } else {
                p.visual.tokens.clone()
            };
            let v = tape.constant(v)?;
            let f_v = self.pool_v.forward(tape, b, v)?;
            let rows = tape.slice_rows(hidden, 0, r_len.max(1))?;
            let f_t = self.pool_t.forward(tape, b, rows)?;
            Some((f_z, f_v, f_t))
        };

        let recon = if ab.no_recon {
            None
        } else {
            let cond = if self.cfg.loss.recon_stop_grad { detach(tape, zs)? } else { zs };
            let r = recon_loss(tape, b, &self.denoiser, &p.latent, Some(cond), &self.schedule, rng)?;
            Some(r.loss)
        };

        Ok(ExampleOut {
            ar,
            prefix,
            recon,
            pooled,
            thoughts: z,
            chain,
            selection: sel,
            y_len: y.len(),
        })
    }

    /// Mean over examples of `L_AR + λ1 L_prefix + λ3 L_recon`, plus
    /// `λ2` times the batch's symmetric InfoNCE.
    pub fn batch_loss(&self, tape: &mut Tape, b: &Binding, batch: &[&Prepared], objective: Objective, rng: &SeedRng, step: usize) -> Result<BatchLoss> {
        if batch.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        let w = &self.cfg.loss;
        let mut rec = LossRecord::with_weights(step, w);
        let mut per = Vec::with_capacity(batch.len());
        let mut pooled = Vec::new();
        let n = batch.len() as f64;
        for (i, p) in batch.iter().enumerate() {
            let out = self.forward_example(tape, b, p, objective, &rng.split(i as u64))?;
            let mut l = out.ar;
            rec.l_ar += tape.value(out.ar).item() / n;
            if let Some(pf) = out.prefix {
                rec.l_prefix += tape.value(pf).item() / n;
                let s = tape.scale(pf, w.lambda1)?;
                l = tape.add(l, s)?;
            }
            if let Some(r) = out.recon {
                rec.l_recon += tape.value(r).item() / n;
                let s = tape.scale(r, w.lambda3)?;
                l = tape.add(l, s)?;
            }
            per.push(l);
            if let Some(f) = out.pooled {
                pooled.push(f);
            }
        }
        let stacked = tape.concat_rows(&per)?;
        let mut loss = tape.mean(stacked)?;
        if pooled.len() >= 2 && pooled.len() == batch.len() {
            let fz: Vec<Var> = pooled.iter().map(|f| f.0).collect();
            let fv: Vec<Var> = pooled.iter().map(|f| f.1).collect();
            let ft: Vec<Var> = pooled.iter().map(|f| f.2).collect();
            let (fz, fv, ft) = (tape.concat_rows(&fz)?, tape.concat_rows(&fv)?, tape.concat_rows(&ft)?);
            let nce = symmetric_info_nce(tape, fz, fv, ft, w.tau)?;
            rec.l_nce = tape.value(nce).item();
            let s = tape.scale(nce, w.lambda2)?;
            loss = tape.add(loss, s)?;
        }
        rec.l_total = tape.value(loss).item();
        Ok(BatchLoss { loss, record: rec })
    }

    /// Greedy answer. `k = 0` decodes straight after `[V_T; T]`.
    pub fn generate_with_k(&self, p: &Prepared, k: usize) -> Result<Generation> {
        let m = &self.cfg.model;
        let mut tape = Tape::new();
        let b = Binding::frozen(&mut tape, &self.store)?;
        let ctx = self.context(&mut tape, &b, p)?;
        let ctx_rows = tape.shape(ctx)[0];
        let n_v = p.visual.n_v();
        let mut sess = Session::new(m);
        let empty = ThoughtChain {
            thoughts: Vec::new(),
            step_distances: Vec::new(),
            halted_early: false,
            bot_eot: (Vec::new(), Vec::new()),
        };
        let visual_attention = |tape: &Tape, c: &crate::backbone::Chunk, row: usize| {
            let a = c.query_attention(tape, m.heads, row);
            let keys = a.shape()[3];
            let groups = (a.numel() / keys) as f64;
            let mut out = vec![0.0; n_v];
            for g in a.data().chunks_exact(keys) {
                for (o, x) in out.iter_mut().zip(g) {
                    *o += x / groups;
                }
            }
            out
        };
        let (chain, sel, logits, first_attention) = if k == 0 {
            let c = sess.feed(&mut tape, &b, &self.lm, m, ctx)?;
            let last = tape.slice_rows(c.final_hidden(), ctx_rows - 1, 1)?;
            let l = self.lm.logits(&mut tape, &b, m, last)?;
            let fa = visual_attention(&tape, &c, ctx_rows - 1);
            (empty, SaliencySelection::keep_all(n_v, m.grid_h, m.grid_w), tape.value(l).data().to_vec(), fa)
        } else {
            let bot = b.var(self.lq.bot);
            let input = tape.concat_rows(&[ctx, bot])?;
            let first = sess.feed(&mut tape, &b, &self.lm, m, input)?;
            let sel = self.select(first.query_attention(&tape, m.heads, ctx_rows - 1), n_v)?;
            let (z, chain) = self.chain(&mut tape, &b, &mut sess, first, p, &sel, k)?;
            let eot = b.var(self.lq.eot);
            let input = tape.concat_rows(&[*z.last().expect("k >= 1"), eot])?;
            let c = sess.feed(&mut tape, &b, &self.lm, m, input)?;
            let last = tape.slice_rows(c.final_hidden(), 1, 1)?;
            let l = self.lm.logits(&mut tape, &b, m, last)?;
            let fa = visual_attention(&tape, &c, 1);
            (chain, sel, tape.value(l).data().to_vec(), fa)
        };
        let r = &self.cfg.reason;
        let segs = if r.interleaved && k > 0 { r.max_segments } else { 0 };
        let mut dec = Decoder {
            model: self,
            p,
            tape,
            b,
            sess,
            logits,
            sel: sel.clone(),
        };
        let (ids, bursts) = interleaved_generate(&mut dec, vocab::EOS, vocab::NEWLINE, r.latent_burst, segs, r.max_new_tokens)?;
        Ok(Generation {
            ids,
            chain,
            bursts,
            selection: sel,
            first_attention,
        })
    }

    pub fn generate(&self, p: &Prepared) -> Result<Generation> {
        self.generate_with_k(p, self.cfg.reason.k)
    }

    /// Exact-match accuracy of greedy answers.
    pub fn accuracy(&self, data: &[Prepared]) -> Result<f64> {
        if data.is_empty() {
            return Ok(0.0);
        }
        let mut hits = 0;
        for p in data {
            if answer_matches(&self.generate(p)?.ids, &p.ex) {
                hits += 1;
            }
        }
        Ok(hits as f64 / data.len() as f64)
    }

    /// Mean teacher-forced `L_AR` over a dataset with frozen weights.
    pub fn eval_ar(&self, data: &[Prepared], objective: Objective) -> Result<f64> {
        let mut total = 0.0;
        for (i, p) in data.iter().enumerate() {
            let mut tape = Tape::new();
            let b = Binding::frozen(&mut tape, &self.store)?;
            let out = self.forward_example(&mut tape, &b, p, objective, &SeedRng::new(i as u64))?;
            total += tape.value(out.ar).item();
        }
        Ok(total / data.len().max(1) as f64)
    }

    /// LM view of `[V_T; T]`: layer-aggregated final-position hidden state.
    pub fn baseline_hidden(&self, p: &Prepared) -> Result<Tensor> {
        let m = &self.cfg.model;
        let mut tape = Tape::new();
        let b = Binding::frozen(&mut tape, &self.store)?;
        let ctx = self.context(&mut tape, &b, p)?;
        let mut sess = Session::new(m);
        let c = sess.feed(&mut tape, &b, &self.lm, m, ctx)?;
        let rows = c.last_rows(&mut tape)?;
        let h = aggregate_hidden(&mut tape, &rows, m.hidden_agg, self.hidden_proj(&b))?;
        Ok(tape.value(h).clone())
    }

    /// Text-only view of the rationale: last-block hidden rows of the LM
    /// over the first `|R|` target tokens alone, `[|R| x d_t]`.
    pub fn rationale_hidden(&self, p: &Prepared) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = Binding::frozen(&mut tape, &self.store)?;
        let y = p.ex.target();
        let r_len = self.cfg.loss.prefix_len.min(y.len()).max(1);
        let m = &self.cfg.model;
        let seq = self.lm.embed(&mut tape, &b, &y[..r_len])?;
        let mut sess = Session::new(m);
        let c = sess.feed(&mut tape, &b, &self.lm, m, seq)?;
        Ok(tape.value(c.final_hidden()).clone())
    }
}

struct Decoder<'a> {
    model: &'a Model,
    p: &'a Prepared,
    tape: Tape,
    b: Binding,
    sess: Session,
    logits: Vec<f64>,
    sel: SaliencySelection,
}

impl LatentDecoder for Decoder<'_> {
    fn next_token(&mut self) -> Result<usize> {
        Ok(crate::backbone::argmax(&self.logits))
    }

    fn push_token(&mut self, id: usize) -> Result<()> {
        let m = &self.model.cfg.model;
        let e = self.model.lm.embed(&mut self.tape, &self.b, &[id])?;
        let c = self.sess.feed(&mut self.tape, &self.b, &self.model.lm, m, e)?;
        let l = self.model.lm.logits(&mut self.tape, &self.b, m, c.final_hidden())?;
        self.logits = self.tape.value(l).data().to_vec();
        Ok(())
    }

    fn latent_burst(&mut self, n: usize) -> Result<ThoughtChain> {
        let model = self.model;
        let m = &model.cfg.model;
        let bot = self.b.var(model.lq.bot);
        let eot = self.b.var(model.lq.eot);
        let c = self.sess.feed(&mut self.tape, &self.b, &model.lm, m, bot)?;
        let (z, chain) = model.chain(&mut self.tape, &self.b, &mut self.sess, c, self.p, &self.sel, n)?;
        let input = self.tape.concat_rows(&[*z.last().expect("burst >= 1"), eot])?;
        let c = self.sess.feed(&mut self.tape, &self.b, &model.lm, m, input)?;
        let last = self.tape.slice_rows(c.final_hidden(), 1, 1)?;
        let l = model.lm.logits(&mut self.tape, &self.b, m, last)?;
        self.logits = self.tape.value(l).data().to_vec();
        Ok(chain)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segment_split() {
        let y = [30, 4, 31, 4, 32, 1];
        assert_eq!(segments(&y, 0), vec![&y[..]]);
        assert_eq!(segments(&y, 1), vec![&y[..2], &y[2..]]);
        assert_eq!(segments(&y, 5), vec![&y[..2], &y[2..4], &y[4..]]);
        let t = [30, 4];
        assert_eq!(segments(&t, 3), vec![&t[..]]);
    }
}
