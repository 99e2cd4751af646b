//! Loss terms: pooled contrastive alignment, answer and prefix likelihoods,
//! and their weighted sum.

use serde::Serialize;

use crate::config::LossConfig;
use crate::error::{Error, Result};
use crate::numkernel::{Tape, Tensor, Var};
use crate::params::{Binding, Init, ParamId, ParamStore};
use crate::rng::SeedRng;

/// Mean-max pooling followed by a linear map to `d_p` and L2 normalisation.
#[derive(Clone, Debug)]
pub struct PoolHead {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
}

impl PoolHead {
    pub fn register(store: &mut ParamStore, rng: &SeedRng, name: &str, d_in: usize, d_p: usize) -> Result<Self> {
        Ok(PoolHead {
            w: store.init(rng, &format!("{name}.w"), &[2 * d_in, d_p], Init::Normal(1.0 / ((2 * d_in) as f64).sqrt()))?,
            b: store.init(rng, &format!("{name}.b"), &[d_p], Init::Zeros)?,
            d_in,
        })
    }

    /// `[n x d_in]` rows to a unit `[1 x d_p]` vector.
    pub fn forward(&self, tape: &mut Tape, b: &Binding, rows: Var) -> Result<Var> {
        let s = tape.shape(rows).to_vec();
        if s.len() != 2 || s[0] == 0 {
            return Err(Error::Argument(format!("pooling needs at least one row, got {s:?}")));
        }
        if s[1] != self.d_in {
            return Err(Error::Dimension(format!("pool head expects width {}, got {}", self.d_in, s[1])));
        }
        let mean = tape.mean_rows(rows)?;
        let max = tape.max_rows(rows)?;
        let w = b.var(self.w);
        let w_mean = tape.slice_rows(w, 0, self.d_in)?;
        let w_max = tape.slice_rows(w, self.d_in, self.d_in)?;
        let a = tape.matmul(mean, w_mean)?;
        let c = tape.matmul(max, w_max)?;
        let y = tape.add(a, c)?;
        let y = tape.add_row(y, b.var(self.b))?;
        tape.normalize_rows(y)
    }

    /// Eager pooling of a plain matrix with frozen parameters.
    pub fn pool(&self, store: &ParamStore, rows: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = Binding::frozen(&mut tape, store)?;
        let r = tape.constant(rows.clone())?;
        let y = self.forward(&mut tape, &b, r)?;
        Ok(tape.value(y).clone())
    }
}

/// Row-wise InfoNCE from anchors to targets, averaged over the batch.
pub fn info_nce(tape: &mut Tape, anchors: Var, targets: Var, tau: f64) -> Result<Var> {
    let (sa, st) = (tape.shape(anchors).to_vec(), tape.shape(targets).to_vec());
    if sa.len() != 2 || sa != st {
        return Err(Error::Dimension(format!("info_nce batches {sa:?} and {st:?} differ")));
    }
    if tau <= 0.0 {
        return Err(Error::Argument(format!("temperature must be positive, got {tau}")));
    }
    let sim = tape.matmul_t(anchors, targets, false, true)?;
    let sim = tape.scale(sim, 1.0 / tau)?;
    let idx: Vec<Option<usize>> = (0..sa[0]).map(Some).collect();
    let nll = tape.cross_entropy(sim, &idx)?;
    tape.scale(nll, 1.0 / sa[0] as f64)
}

/// `InfoNCE(z, v) + InfoNCE(z, t)`.
pub fn symmetric_info_nce(tape: &mut Tape, f_z: Var, f_v: Var, f_t: Var, tau: f64) -> Result<Var> {
    let a = info_nce(tape, f_z, f_v, tau)?;
    let b = info_nce(tape, f_z, f_t, tau)?;
    tape.add(a, b)
}

/// Summed NLL over `targets`; `None` entries (padding) are skipped.
pub fn sequence_nll(tape: &mut Tape, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
    tape.cross_entropy(logits, targets)
}

pub struct ArPrefix {
    pub ar: Var,
    pub prefix: Var,
    pub total: Var,
}

/// `NLL(Y | V_T, T, Z) + λ_1 NLL(R | Z)`, `R` the first `prefix_len` tokens.
pub fn ar_and_prefix_loss(
    tape: &mut Tape,
    logits_full: Var,
    logits_prefix: Var,
    full: &[Option<usize>],
    prefix_len: usize,
    lambda1: f64,
) -> Result<ArPrefix> {
    if prefix_len > full.len() {
        return Err(Error::Argument(format!(
            "prefix of {prefix_len} tokens is longer than the {} target tokens",
            full.len()
        )));
    }
    if tape.shape(logits_prefix)[0] != prefix_len {
        return Err(Error::Dimension(format!(
            "prefix logits have {} rows for {prefix_len} tokens",
            tape.shape(logits_prefix)[0]
        )));
    }
    let ar = sequence_nll(tape, logits_full, full)?;
    let prefix = sequence_nll(tape, logits_prefix, &full[..prefix_len])?;
    let scaled = tape.scale(prefix, lambda1)?;
    let total = tape.add(ar, scaled)?;
    Ok(ArPrefix { ar, prefix, total })
}

/// `L_AR + λ_2 L_nce + λ_3 L_recon`.
pub fn total_latent_loss(tape: &mut Tape, ar_prefix: Var, nce: Var, recon: Var, lambda2: f64, lambda3: f64) -> Result<Var> {
    let n = tape.scale(nce, lambda2)?;
    let r = tape.scale(recon, lambda3)?;
    let t = tape.add(ar_prefix, n)?;
    tape.add(t, r)
}

/// One metrics line.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossRecord {
    pub step: usize,
    #[serde(rename = "L_AR")]
    pub l_ar: f64,
    #[serde(rename = "L_prefix")]
    pub l_prefix: f64,
    #[serde(rename = "L_nce")]
    pub l_nce: f64,
    #[serde(rename = "L_recon")]
    pub l_recon: f64,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub tau: f64,
}

impl LossRecord {
    pub fn with_weights(step: usize, w: &LossConfig) -> Self {
        LossRecord {
            step,
            lambda1: w.lambda1,
            lambda2: w.lambda2,
            lambda3: w.lambda3,
            tau: w.tau,
            ..LossRecord::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::grad_check;
    use crate::rng::normal_vec;
    use proptest::prelude::*;

    fn rand_tensor(seed: u64, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), normal_vec(&mut SeedRng::new(seed).stream(), n, 1.0)).unwrap()
    }

    fn unit_rows(seed: u64, b: usize, d: usize) -> Tensor {
        let mut t = rand_tensor(seed, &[b, d]);
        for r in 0..b {
            let row = &mut t.data_mut()[r * d..(r + 1) * d];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= n);
        }
        t
    }

    fn nce_value(a: &Tensor, t: &Tensor, tau: f64) -> f64 {
        let mut tape = Tape::new();
        let a = tape.constant(a.clone()).unwrap();
        let t = tape.constant(t.clone()).unwrap();
        let l = info_nce(&mut tape, a, t, tau).unwrap();
        tape.value(l).item()
    }

    fn head() -> (ParamStore, PoolHead) {
        let mut store = ParamStore::new();
        let h = PoolHead::register(&mut store, &SeedRng::new(1), "lqformer.pool_z", 4, 6).unwrap();
        (store, h)
    }

    #[test]
    fn pooling_contracts() {
        let (store, h) = head();
        let r = rand_tensor(2, &[1, 4]);
        let y = h.pool(&store, &r).unwrap();
        // single row: concat(r, r) through the head
        let w = store.get(h.w);
        let mut lin = vec![0.0; 6];
        for (j, l) in lin.iter_mut().enumerate() {
            for i in 0..4 {
                *l += r.data()[i] * (w.data()[i * 6 + j] + w.data()[(i + 4) * 6 + j]);
            }
        }
        let n = lin.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (a, b) in y.data().iter().zip(&lin) {
            assert!((a - b / n).abs() < 1e-12);
        }
        let rows = rand_tensor(3, &[5, 4]);
        let mut perm: Vec<Vec<f64>> = (0..5).map(|i| rows.row(i).to_vec()).collect();
        perm.swap(0, 3);
        perm.swap(1, 4);
        assert!(h.pool(&store, &rows).unwrap().max_abs_diff(&h.pool(&store, &Tensor::from_rows(&perm).unwrap()).unwrap()) < 1e-12);
        assert!(matches!(h.pool(&store, &Tensor::zeros(&[0, 4])), Err(Error::Argument(_))));
        for seed in 0..100 {
            let y = h.pool(&store, &rand_tensor(100 + seed, &[3, 4])).unwrap();
            let n = y.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn info_nce_closed_forms() {
        let one = unit_rows(1, 1, 8);
        assert!(nce_value(&one, &unit_rows(2, 1, 8), 0.07).abs() < 1e-15);
        let same = Tensor::from_rows(&vec![one.row(0).to_vec(); 4]).unwrap();
        assert!((nce_value(&same, &same, 0.07) - 4f64.ln()).abs() < 1e-12);
        let e = Tensor::identity(2);
        let want = -(std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();
        assert!((nce_value(&e, &e, 1.0) - want).abs() < 1e-12);
        assert!((want - 0.31326).abs() < 1e-5);
        // sharper temperature favours the matching pair
        let mut last = want;
        for tau in [0.8, 0.5, 0.2, 0.1] {
            let v = nce_value(&e, &e, tau);
            assert!(v < last);
            last = v;
        }
        let mut tape = Tape::new();
        let a = tape.constant(unit_rows(1, 3, 4)).unwrap();
        let b = tape.constant(unit_rows(1, 2, 4)).unwrap();
        assert!(matches!(info_nce(&mut tape, a, b, 0.1), Err(Error::Dimension(_))));
    }

    #[test]
    fn symmetric_nce_duplicated_target() {
        let z = unit_rows(1, 4, 8);
        let v = unit_rows(2, 4, 8);
        let mut tape = Tape::new();
        let (zv, vv) = (tape.constant(z.clone()).unwrap(), tape.constant(v.clone()).unwrap());
        let s = symmetric_info_nce(&mut tape, zv, vv, vv, 0.07).unwrap();
        assert!((tape.value(s).item() - 2.0 * nce_value(&z, &v, 0.07)).abs() < 1e-12);
        let (a, b) = (tape.constant(unit_rows(3, 1, 8)).unwrap(), tape.constant(unit_rows(4, 1, 8)).unwrap());
        let s = symmetric_info_nce(&mut tape, a, b, b, 0.07).unwrap();
        assert_eq!(tape.value(s).item(), 0.0);
    }

    #[test]
    fn symmetric_nce_gradients() {
        let inputs = [rand_tensor(1, &[4, 8]), rand_tensor(2, &[4, 8]), rand_tensor(3, &[4, 8])];
        let r = grad_check(
            |tape, v| {
                let z = tape.normalize_rows(v[0])?;
                let a = tape.normalize_rows(v[1])?;
                let t = tape.normalize_rows(v[2])?;
                symmetric_info_nce(tape, z, a, t, 0.5)
            },
            &inputs,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn pool_and_likelihood_gradients() {
        let (store, h) = head();
        let ids = [h.w, h.b];
        let inputs = vec![rand_tensor(5, &[3, 4]), store.get(h.w).clone(), store.get(h.b).clone(), rand_tensor(6, &[3, 7]), rand_tensor(7, &[2, 7])];
        let rb = rand_tensor(8, &[1, 6]);
        let r = grad_check(
            |tape, v| {
                let over = [(ids[0], v[1]), (ids[1], v[2])];
                let b = Binding::frozen_with(tape, &store, &over)?;
                let y = h.forward(tape, &b, v[0])?;
                let c = tape.constant(rb.clone())?;
                let y = tape.mul(y, c)?;
                let y = tape.sum(y)?;
                let l = ar_and_prefix_loss(tape, v[3], v[4], &[Some(1), None, Some(6)], 2, 0.7)?;
                let t = total_latent_loss(tape, l.total, y, y, 0.9, 0.9)?;
                Ok(t)
            },
            &inputs,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn ar_prefix_closed_forms() {
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::zeros(&[3, 7])).unwrap();
        let p = tape.constant(Tensor::zeros(&[0, 7])).unwrap();
        let l = ar_and_prefix_loss(&mut tape, u, p, &[Some(0), Some(3), Some(6)], 0, 0.0).unwrap();
        assert!((tape.value(l.total).item() - 3.0 * 7f64.ln()).abs() < 1e-12);
        assert!((3.0 * 7f64.ln() - 5.8377).abs() < 1e-4);
        let mut sharp = vec![-1e3; 21];
        for (r, t) in [0usize, 3, 6].iter().enumerate() {
            sharp[r * 7 + t] = 1e3;
        }
        let s = tape.constant(Tensor::new(vec![3, 7], sharp.clone()).unwrap()).unwrap();
        let sp = tape.constant(Tensor::new(vec![2, 7], sharp[..14].to_vec()).unwrap()).unwrap();
        let l = ar_and_prefix_loss(&mut tape, s, sp, &[Some(0), Some(3), Some(6)], 2, 1.0).unwrap();
        assert!(tape.value(l.total).item().abs() < 1e-12);
        assert!(matches!(
            ar_and_prefix_loss(&mut tape, s, sp, &[Some(0)], 2, 1.0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn total_weighting() {
        let mut tape = Tape::new();
        let (a, n, r) = (
            tape.constant(Tensor::scalar(1.0)).unwrap(),
            tape.constant(Tensor::scalar(2.0)).unwrap(),
            tape.constant(Tensor::scalar(3.0)).unwrap(),
        );
        let t = total_latent_loss(&mut tape, a, n, r, 0.9, 0.9).unwrap();
        assert!((tape.value(t).item() - 5.5).abs() < 1e-12);
        let t = total_latent_loss(&mut tape, a, n, r, 0.0, 0.0).unwrap();
        assert_eq!(tape.value(t).item(), 1.0);
    }

    #[test]
    fn record_serialises_with_loss_names() {
        let r = LossRecord::with_weights(3, &LossConfig::default());
        let s = serde_json::to_string(&r).unwrap();
        assert!(s.contains("\"L_AR\"") && s.contains("\"tau\":0.07"));
    }

    fn rotation(seed: u64, d: usize) -> Tensor {
        // Gram-Schmidt on a random matrix
        let m = rand_tensor(seed, &[d, d]);
        let mut q: Vec<Vec<f64>> = Vec::new();
        for i in 0..d {
            let mut v = m.row(i).to_vec();
            for u in &q {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|a| *a /= n);
            q.push(v);
        }
        Tensor::from_rows(&q).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn info_nce_positive_and_rotation_invariant(seed in 0u64..100_000, b in 2usize..6, tau in 0.05f64..2.0) {
            let a = unit_rows(seed, b, 5);
            let t = unit_rows(seed + 1, b, 5);
            let v = nce_value(&a, &t, tau);
            prop_assert!(v > 0.0);
            let r = rotation(seed + 2, 5);
            let ra = crate::numkernel::matmul(&a, &r).unwrap();
            let rt = crate::numkernel::matmul(&t, &r).unwrap();
            prop_assert!((nce_value(&ra, &rt, tau) - v).abs() < 1e-9);
        }

        #[test]
        fn total_is_monotone(a in 0.0f64..5.0, n in 0.0f64..5.0, r in 0.0f64..5.0, d in 0.0f64..1.0, l2 in 0.0f64..2.0, l3 in 0.0f64..2.0) {
            let mut tape = Tape::new();
            let vals = [a, n, r];
            let base: Vec<Var> = vals.iter().map(|&x| tape.constant(Tensor::scalar(x)).unwrap()).collect();
            let t0 = total_latent_loss(&mut tape, base[0], base[1], base[2], l2, l3).unwrap();
            let t0 = tape.value(t0).item();
            for i in 0..3 {
                let mut v = base.clone();
                v[i] = tape.constant(Tensor::scalar(vals[i] + d)).unwrap();
                let t = total_latent_loss(&mut tape, v[0], v[1], v[2], l2, l3).unwrap();
                prop_assert!(tape.value(t).item() >= t0);
            }
        }
    }
}
