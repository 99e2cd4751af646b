//! Analysis harness: pairing probes, thought trajectories and two-sample
//! statistics over attention scores.

pub mod pca;
pub mod stats;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

pub use pca::{trajectory_export, Pca, Trajectories};
pub use stats::{attention_stats, mann_whitney, welch_t, StatReport};

use crate::config::OptimConfig;
use crate::curriculum::optim::{adam_update, Moments};
use crate::error::{Error, Result};
use crate::model::{Model, Prepared};
use crate::rng::{normal_vec, SeedRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeKind {
    SameImageDiffQuestion,
    SameQuestionDiffImage,
    RandomInBatch,
    None,
}

impl NegativeKind {
    pub const NEGATIVES: [NegativeKind; 3] = [
        NegativeKind::SameImageDiffQuestion,
        NegativeKind::SameQuestionDiffImage,
        NegativeKind::RandomInBatch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NegativeKind::SameImageDiffQuestion => "same_image_diff_question",
            NegativeKind::SameQuestionDiffImage => "same_question_diff_image",
            NegativeKind::RandomInBatch => "random_in_batch",
            NegativeKind::None => "none",
        }
    }
}

/// One example's two views.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeItem {
    pub image_id: usize,
    pub question: Vec<usize>,
    pub left: Vec<f64>,
    pub right: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbePair {
    pub left: Vec<f64>,
    pub right: Vec<f64>,
    pub label: bool,
    pub kind: NegativeKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeDataset {
    pub pairs: Vec<ProbePair>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub const TRAIN_FRACTION: f64 = 0.7;

fn l2_normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

/// Candidate partners `j` for a negative of `kind` anchored at `i`.
fn partners(items: &[ProbeItem], i: usize, kind: NegativeKind) -> Vec<usize> {
    let a = &items[i];
    (0..items.len())
        .filter(|&j| {
            let b = &items[j];
            j != i
                && match kind {
                    NegativeKind::SameImageDiffQuestion => b.image_id == a.image_id && b.question != a.question,
                    NegativeKind::SameQuestionDiffImage => b.image_id != a.image_id && b.question == a.question,
                    NegativeKind::RandomInBatch => b.image_id != a.image_id,
                    NegativeKind::None => false,
                }
        })
        .collect()
}

/// Half matched pairs, half mismatched split evenly over the three negative
/// kinds, with a split stratified by kind.
pub fn build_probe_dataset(items: &[ProbeItem], n_pairs: usize, rng: &SeedRng) -> Result<ProbeDataset> {
    let mut images: Vec<usize> = items.iter().map(|i| i.image_id).collect();
    images.sort_unstable();
    images.dedup();
    let mut questions: Vec<&Vec<usize>> = items.iter().map(|i| &i.question).collect();
    questions.sort();
    questions.dedup();
    if images.len() < 2 || questions.len() < 2 {
        return Err(Error::Dataset(format!(
            "probe pairs need >= 2 images and >= 2 questions, got {} and {}",
            images.len(),
            questions.len()
        )));
    }
    if n_pairs < 2 {
        return Err(Error::Argument("at least two probe pairs are needed".into()));
    }
    let mut s = rng.split_str("pairs").stream();
    let item = |i: usize| (l2_normalized(&items[i].left), l2_normalized(&items[i].right));
    let mut pairs = Vec::with_capacity(n_pairs);

    let n_pos = n_pairs / 2;
    let mut perm: Vec<usize> = (0..items.len()).collect();
    for c in 0..n_pos {
        if c % items.len() == 0 {
            perm.shuffle(&mut s);
        }
        let (l, r) = item(perm[c % items.len()]);
        pairs.push(ProbePair {
            left: l,
            right: r,
            label: true,
            kind: NegativeKind::None,
        });
    }

    let n_neg = n_pairs - n_pos;
    for (ki, kind) in NegativeKind::NEGATIVES.into_iter().enumerate() {
        let count = n_neg / 3 + usize::from(ki < n_neg % 3);
        let anchors: Vec<(usize, Vec<usize>)> = (0..items.len())
            .map(|i| (i, partners(items, i, kind)))
            .filter(|(_, p)| !p.is_empty())
            .collect();
        if anchors.is_empty() && count > 0 {
            return Err(Error::Dataset(format!("no candidates for negative kind {}", kind.name())));
        }
        for _ in 0..count {
            let (i, ps) = &anchors[s.random_range(0..anchors.len())];
            let j = ps[s.random_range(0..ps.len())];
            pairs.push(ProbePair {
                left: item(*i).0,
                right: item(j).1,
                label: false,
                kind,
            });
        }
    }

    let mut by_kind: BTreeMap<NegativeKind, Vec<usize>> = BTreeMap::new();
    for (i, p) in pairs.iter().enumerate() {
        by_kind.entry(p.kind).or_default().push(i);
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (_, mut idx) in by_kind {
        idx.shuffle(&mut s);
        let cut = (TRAIN_FRACTION * idx.len() as f64).round() as usize;
        train.extend_from_slice(&idx[..cut]);
        test.extend_from_slice(&idx[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(ProbeDataset { pairs, train, test })
}

/// `[left, right, left * right]`.
pub fn featurize(p: &ProbePair) -> Vec<f64> {
    let mut f = Vec::with_capacity(3 * p.left.len());
    f.extend_from_slice(&p.left);
    f.extend_from_slice(&p.right);
    f.extend(p.left.iter().zip(&p.right).map(|(a, b)| a * b));
    f
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    LinearMargin,
    OneHiddenLayer,
}

impl fmt::Display for ProbeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProbeKind::LinearMargin => "linear_margin",
            ProbeKind::OneHiddenLayer => "one_hidden_layer",
        })
    }
}

impl FromStr for ProbeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear_margin" | "svm" => Ok(ProbeKind::LinearMargin),
            "one_hidden_layer" | "mlp" => Ok(ProbeKind::OneHiddenLayer),
            other => Err(Error::Config(format!("unknown probe kind `{other}`"))),
        }
    }
}

pub trait Classifier {
    fn score(&self, x: &[f64]) -> f64;

    fn predict(&self, x: &[f64]) -> bool {
        self.score(x) > 0.0
    }
}

fn accuracy(c: &dyn Classifier, xs: &[Vec<f64>], ys: &[bool]) -> f64 {
    let hits = xs.iter().zip(ys).filter(|(x, &y)| c.predict(x) == y).count();
    hits as f64 / xs.len().max(1) as f64
}

#[derive(Clone, Debug)]
pub struct LinearSvm {
    pub w: Vec<f64>,
    pub b: f64,
}

impl Classifier for LinearSvm {
    fn score(&self, x: &[f64]) -> f64 {
        self.w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + self.b
    }
}

pub const SVM_C_GRID: [f64; 5] = [0.01, 0.1, 1.0, 10.0, 100.0];
const SVM_EPOCHS: usize = 60;

/// Pegasos: stochastic sub-gradient steps `1 / (lambda t)` on the
/// regularised hinge loss with `lambda = 1 / (C n)`, projection onto the
/// `1 / sqrt(lambda)` ball and iterate averaging. The bias rides along as a
/// constant feature.
pub fn train_svm(xs: &[Vec<f64>], ys: &[bool], c: f64, rng: &SeedRng) -> LinearSvm {
    let n = xs.len();
    let d = xs[0].len();
    let lambda = 1.0 / (c * n as f64);
    let radius = 1.0 / lambda.sqrt();
    let mut w = vec![0.0; d + 1];
    let mut avg = vec![0.0; d + 1];
    let mut order: Vec<usize> = (0..n).collect();
    let mut s = rng.stream();
    let mut t = 0usize;
    for _ in 0..SVM_EPOCHS {
        order.shuffle(&mut s);
        for &i in &order {
            t += 1;
            let eta = 1.0 / (lambda * t as f64);
            let y = if ys[i] { 1.0 } else { -1.0 };
            let x = &xs[i];
            let m = y * (w[..d].iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + w[d]);
            let shrink = 1.0 - eta * lambda;
            w.iter_mut().for_each(|v| *v *= shrink);
            if m < 1.0 {
                for (v, xi) in w.iter_mut().zip(x) {
                    *v += eta * y * xi;
                }
                w[d] += eta * y;
            }
            let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > radius {
                w.iter_mut().for_each(|v| *v *= radius / norm);
            }
            for (a, v) in avg.iter_mut().zip(&w) {
                *a += (v - *a) / t as f64;
            }
        }
    }
    let b = avg[d];
    avg.truncate(d);
    LinearSvm { w: avg, b }
}

/// Chooses `C` by 5-fold cross-validated accuracy (ties go to the smaller
/// `C`), then refits on all of `xs`.
pub fn train_svm_cv(xs: &[Vec<f64>], ys: &[bool], rng: &SeedRng) -> (LinearSvm, f64) {
    let n = xs.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng.split_str("folds").stream());
    let folds = 5.min(n);
    let mut best = (f64::NEG_INFINITY, SVM_C_GRID[0]);
    for (ci, &c) in SVM_C_GRID.iter().enumerate() {
        let mut acc = 0.0;
        for f in 0..folds {
            let (mut tx, mut ty, mut vx, mut vy) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for (pos, &i) in idx.iter().enumerate() {
                if pos % folds == f {
                    vx.push(xs[i].clone());
                    vy.push(ys[i]);
                } else {
                    tx.push(xs[i].clone());
                    ty.push(ys[i]);
                }
            }
            let m = train_svm(&tx, &ty, c, &rng.split(ci as u64).split(f as u64));
            acc += accuracy(&m, &vx, &vy) / folds as f64;
        }
        if acc > best.0 {
            best = (acc, c);
        }
    }
    (train_svm(xs, ys, best.1, &rng.split_str("final")), best.1)
}

pub const MLP_HIDDEN: usize = 32;
const MLP_LR: f64 = 1e-3;
const MLP_MAX_EPOCHS: usize = 400;
const MLP_PATIENCE: usize = 25;
const MLP_BATCH: usize = 16;

#[derive(Clone, Debug)]
pub struct Mlp {
    /// `[d x h]` row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub d: usize,
}

impl Mlp {
    fn hidden(&self, x: &[f64]) -> Vec<f64> {
        let h = self.b1.len();
        let mut a = self.b1.clone();
        for (i, xi) in x.iter().enumerate() {
            let row = &self.w1[i * h..(i + 1) * h];
            for (aj, wj) in a.iter_mut().zip(row) {
                *aj += xi * wj;
            }
        }
        a.iter_mut().for_each(|v| *v = v.tanh());
        a
    }

    fn logit(&self, x: &[f64]) -> f64 {
        self.hidden(x).iter().zip(&self.w2).map(|(a, w)| a * w).sum::<f64>() + self.b2[0]
    }

    fn bce(&self, xs: &[Vec<f64>], ys: &[bool]) -> f64 {
        let mut l = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            let z = self.logit(x);
            // log(1 + e^{-z}) for y=1, log(1 + e^{z}) for y=0
            let s = if y { -z } else { z };
            l += s.max(0.0) + (-s.abs()).exp().ln_1p();
        }
        l / xs.len().max(1) as f64
    }
}

impl Classifier for Mlp {
    fn score(&self, x: &[f64]) -> f64 {
        self.logit(x)
    }
}

/// One tanh hidden layer and a logistic output, trained with the AdamW
/// update used by the curriculum; stops when validation loss has not
/// improved for a fixed number of epochs and keeps the best weights.
pub fn train_mlp(xs: &[Vec<f64>], ys: &[bool], vx: &[Vec<f64>], vy: &[bool], opt: &OptimConfig, rng: &SeedRng) -> Mlp {
    let d = xs[0].len();
    let h = MLP_HIDDEN;
    let mut init = rng.split_str("init").stream();
    let mut m = Mlp {
        w1: normal_vec(&mut init, d * h, (1.0 / d as f64).sqrt()),
        b1: vec![0.0; h],
        w2: normal_vec(&mut init, h, (1.0 / h as f64).sqrt()),
        b2: vec![0.0],
        d,
    };
    let mut st = [Moments::zeros(d * h), Moments::zeros(h), Moments::zeros(h), Moments::zeros(1)];
    let mut best = (m.bce(vx, vy), m.clone());
    let mut since = 0;
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut s = rng.split_str("order").stream();
    let mut t = 0u64;
    for _ in 0..MLP_MAX_EPOCHS {
        order.shuffle(&mut s);
        for chunk in order.chunks(MLP_BATCH) {
            let mut g1 = vec![0.0; d * h];
            let mut gb1 = vec![0.0; h];
            let mut g2 = vec![0.0; h];
            let mut gb2 = [0.0];
            for &i in chunk {
                let x = &xs[i];
                let a = m.hidden(x);
                let z: f64 = a.iter().zip(&m.w2).map(|(a, w)| a * w).sum::<f64>() + m.b2[0];
                let p = 1.0 / (1.0 + (-z).exp());
                let dz = (p - f64::from(u8::from(ys[i]))) / chunk.len() as f64;
                gb2[0] += dz;
                for j in 0..h {
                    g2[j] += dz * a[j];
                    let da = dz * m.w2[j] * (1.0 - a[j] * a[j]);
                    gb1[j] += da;
                    for (k, xk) in x.iter().enumerate() {
                        g1[k * h + j] += da * xk;
                    }
                }
            }
            t += 1;
            adam_update(&mut m.w1, &g1, 1.0, &mut st[0], t, opt, MLP_LR, opt.weight_decay);
            adam_update(&mut m.b1, &gb1, 1.0, &mut st[1], t, opt, MLP_LR, 0.0);
            adam_update(&mut m.w2, &g2, 1.0, &mut st[2], t, opt, MLP_LR, opt.weight_decay);
            adam_update(&mut m.b2, &gb2, 1.0, &mut st[3], t, opt, MLP_LR, 0.0);
        }
        let vl = m.bce(vx, vy);
        if vl < best.0 {
            best = (vl, m.clone());
            since = 0;
        } else {
            since += 1;
            if since >= MLP_PATIENCE {
                break;
            }
        }
    }
    best.1
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeReport {
    pub source: String,
    pub kind: ProbeKind,
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub accuracy: f64,
    pub accuracy_by_kind: BTreeMap<String, f64>,
    /// Selected regularisation constant for the linear probe.
    pub c: Option<f64>,
}

/// Trains on the dataset's train split and scores the held-out split.
pub fn train_probe(ds: &ProbeDataset, kind: ProbeKind, opt: &OptimConfig, rng: &SeedRng, source: &str) -> Result<ProbeReport> {
    let xs: Vec<Vec<f64>> = ds.train.iter().map(|&i| featurize(&ds.pairs[i])).collect();
    let ys: Vec<bool> = ds.train.iter().map(|&i| ds.pairs[i].label).collect();
    if ys.iter().all(|&y| y) || ys.iter().all(|&y| !y) {
        return Err(Error::Dataset("probe training split has a single class".into()));
    }
    if ds.test.is_empty() {
        return Err(Error::Dataset("probe test split is empty".into()));
    }
    let (model, c): (Box<dyn Classifier>, Option<f64>) = match kind {
        ProbeKind::LinearMargin => {
            let (m, c) = train_svm_cv(&xs, &ys, &rng.split_str("svm"));
            (Box::new(m), Some(c))
        }
        ProbeKind::OneHiddenLayer => {
            // last fifth of the (shuffled) train split is the validation set
            let mut idx: Vec<usize> = (0..xs.len()).collect();
            idx.shuffle(&mut rng.split_str("val").stream());
            let cut = xs.len() - (xs.len() / 5).max(1);
            let pick = |r: &[usize]| -> (Vec<Vec<f64>>, Vec<bool>) { (r.iter().map(|&i| xs[i].clone()).collect(), r.iter().map(|&i| ys[i]).collect()) };
            let (tx, ty) = pick(&idx[..cut]);
            let (vx, vy) = pick(&idx[cut..]);
            (Box::new(train_mlp(&tx, &ty, &vx, &vy, opt, &rng.split_str("mlp"))), None)
        }
    };
    let mut by_kind: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut hits = 0;
    for &i in &ds.test {
        let p = &ds.pairs[i];
        let ok = model.predict(&featurize(p)) == p.label;
        hits += usize::from(ok);
        let e = by_kind.entry(p.kind.name().to_string()).or_default();
        e.0 += usize::from(ok);
        e.1 += 1;
    }
    Ok(ProbeReport {
        source: source.to_string(),
        kind,
        train_pairs: ds.train.len(),
        test_pairs: ds.test.len(),
        accuracy: hits as f64 / ds.test.len() as f64,
        accuracy_by_kind: by_kind.into_iter().map(|(k, (h, n))| (k, h as f64 / n as f64)).collect(),
        c,
    })
}

/// Pooled `d_p` views of one example.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeFeatures {
    pub image_id: usize,
    pub question: Vec<usize>,
    /// `pool_z` over the generated thought chain.
    pub thought: Vec<f64>,
    /// `pool_v` over the visual tokens.
    pub visual: Vec<f64>,
    /// `pool_t` over the rationale hidden rows.
    pub rationale: Vec<f64>,
    /// `pool_t` over the LM's final-position hidden state of `[V_T; T]`.
    pub hidden: Vec<f64>,
}

pub fn probe_features(model: &Model, data: &[Prepared]) -> Result<Vec<ProbeFeatures>> {
    data.iter()
        .map(|p| {
            let g = model.generate(p)?;
            if g.chain.k() == 0 {
                return Err(Error::Config("probing thoughts needs K >= 1".into()));
            }
            let s = &model.store;
            Ok(ProbeFeatures {
                image_id: p.ex.meta.image_id,
                question: p.ex.base_question.clone(),
                thought: model.pool_z.pool(s, &g.chain.matrix()?)?.into_data(),
                visual: model.pool_v.pool(s, &p.visual.tokens)?.into_data(),
                rationale: model.pool_t.pool(s, &model.rationale_hidden(p)?)?.into_data(),
                hidden: model.pool_t.pool(s, &model.baseline_hidden(p)?)?.into_data(),
            })
        })
        .collect()
}

/// Which views form a probe pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    ThoughtVisual,
    ThoughtRationale,
    HiddenVisual,
    HiddenRationale,
}

impl Pairing {
    pub const ALL: [Pairing; 4] = [
        Pairing::ThoughtVisual,
        Pairing::ThoughtRationale,
        Pairing::HiddenVisual,
        Pairing::HiddenRationale,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Pairing::ThoughtVisual => "thought_visual",
            Pairing::ThoughtRationale => "thought_rationale",
            Pairing::HiddenVisual => "hidden_visual",
            Pairing::HiddenRationale => "hidden_rationale",
        }
    }

    pub fn items(self, feats: &[ProbeFeatures]) -> Vec<ProbeItem> {
        feats
            .iter()
            .map(|f| {
                let (l, r) = match self {
                    Pairing::ThoughtVisual => (&f.thought, &f.visual),
                    Pairing::ThoughtRationale => (&f.thought, &f.rationale),
                    Pairing::HiddenVisual => (&f.hidden, &f.visual),
                    Pairing::HiddenRationale => (&f.hidden, &f.rationale),
                };
                ProbeItem {
                    image_id: f.image_id,
                    question: f.question.clone(),
                    left: l.clone(),
                    right: r.clone(),
                }
            })
            .collect()
    }
}

/// Both probe kinds on every pairing, same pair layout for each.
pub fn probe_suite(feats: &[ProbeFeatures], n_pairs: usize, opt: &OptimConfig, rng: &SeedRng) -> Result<Vec<ProbeReport>> {
    let mut out = Vec::new();
    for pairing in Pairing::ALL {
        let ds = build_probe_dataset(&pairing.items(feats), n_pairs, &rng.split_str("dataset"))?;
        for kind in [ProbeKind::LinearMargin, ProbeKind::OneHiddenLayer] {
            out.push(train_probe(&ds, kind, opt, &rng.split_str(pairing.name()), pairing.name())?);
        }
    }
    Ok(out)
}

/// Visual attention of the first answer token, one value per visual token
/// per example, pooled over `data`.
pub fn first_token_attention(model: &Model, data: &[Prepared]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for p in data {
        out.extend(model.generate(p)?.first_attention);
    }
    Ok(out)
}
