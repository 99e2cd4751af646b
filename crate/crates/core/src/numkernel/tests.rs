use std::sync::Arc;

use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::rng::{normal_vec, SeedRng};

fn rand_tensor(seed: u64, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let mut r = SeedRng::new(seed).stream();
    Tensor::new(shape.to_vec(), normal_vec(&mut r, n, 1.0)).unwrap()
}

fn check<F>(f: F, inputs: &[Tensor])
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let rep = grad_check(f, inputs, 1e-4, 1e-4).unwrap();
    assert!(rep.passed, "max rel err {} ({:?})", rep.max_rel_err, rep.per_input);
}

/// Projects any output onto fixed random weights so every element matters.
fn weighted_sum(t: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let w = rand_tensor(seed, t.shape(x));
    let w = t.constant(w)?;
    let p = t.mul(x, w)?;
    t.sum(p)
}

const SHAPES: [(usize, usize); 3] = [(1, 3), (3, 4), (5, 2)];

#[test]
fn matmul_examples() {
    let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    let b = Tensor::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
    assert_eq!(matmul(&a, &b).unwrap().data(), &[17.0, 39.0]);
    assert_eq!(matmul(&Tensor::identity(2), &a).unwrap(), a);
    let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[4, 5])).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
}

#[test]
fn softmax_examples() {
    let s = softmax(&Tensor::vector(vec![0.0; 3]), 0).unwrap();
    for v in s.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let s = softmax(&Tensor::vector(vec![1000.0, 1000.0]), 0).unwrap();
    assert_eq!(s.data(), &[0.5, 0.5]);
    let s = softmax(&Tensor::vector(vec![0.0, 3f64.ln()]), 0).unwrap();
    assert!((s.data()[0] - 0.25).abs() < 1e-15 && (s.data()[1] - 0.75).abs() < 1e-15);
    assert!(matches!(
        softmax(&Tensor::vector(vec![1.0]), 1),
        Err(Error::Range(_))
    ));
}

#[test]
fn softmax_axis_zero_columns_sum_to_one() {
    let x = rand_tensor(3, &[4, 3]);
    let s = softmax(&x, 0).unwrap();
    for c in 0..3 {
        let col: f64 = (0..4).map(|r| s.data()[r * 3 + c]).sum();
        assert!((col - 1.0).abs() < 1e-12);
    }
}

#[test]
fn layer_norm_examples() {
    let one = Tensor::vector(vec![1.0; 4]);
    let zero = Tensor::vector(vec![0.0; 4]);
    let y = layer_norm(&Tensor::vector(vec![7.0; 4]), &one, &zero, 1e-5).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
    let y = layer_norm(
        &Tensor::vector(vec![1.0, 3.0]),
        &Tensor::vector(vec![1.0, 1.0]),
        &Tensor::vector(vec![0.0, 0.0]),
        0.0,
    )
    .unwrap();
    assert_eq!(y.data(), &[-1.0, 1.0]);
    let b = Tensor::vector(vec![0.5, -2.0, 3.0]);
    let y = layer_norm(&rand_tensor(1, &[2, 3]), &Tensor::vector(vec![0.0; 3]), &b, 1e-5).unwrap();
    for r in 0..2 {
        assert_eq!(y.row(r), b.data());
    }
    assert!(matches!(
        layer_norm(&rand_tensor(1, &[2, 3]), &one, &zero, 1e-5),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn window_sum_examples() {
    let g = rand_tensor(5, &[3, 4]);
    assert_eq!(window_sum_2d(&g, 1).unwrap(), g);
    let g = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    assert_eq!(window_sum_2d(&g, 2).unwrap().data(), &[10.0]);
    assert_eq!(window_sum_2d(&Tensor::zeros(&[16, 16]), 8).unwrap().shape(), &[9, 9]);
    assert!(matches!(window_sum_2d(&g, 3), Err(Error::Range(_))));
    assert!(matches!(window_sum_2d(&g, 0), Err(Error::Range(_))));
}

#[test]
fn window_sum_matches_brute_force_on_200_grids() {
    let mut r = SeedRng::new(77).stream();
    for _ in 0..200 {
        let h = r.random_range(1..=12);
        let wd = r.random_range(1..=12);
        let w = r.random_range(1..=h.min(wd));
        let data: Vec<f64> = (0..h * wd).map(|_| r.random_range(-5.0..5.0)).collect();
        let g = Tensor::new(vec![h, wd], data.clone()).unwrap();
        let got = window_sum_2d(&g, w).unwrap();
        for i in 0..=h - w {
            for j in 0..=wd - w {
                let mut s = 0.0;
                for a in i..i + w {
                    for b in j..j + w {
                        s += data[a * wd + b];
                    }
                }
                assert_eq!(got.data()[i * (wd - w + 1) + j], s);
            }
        }
    }
}

#[test]
fn grad_check_quadratic() {
    let rep = grad_check(
        |t, v| {
            let sq = t.mul(v[0], v[0])?;
            t.sum(sq)
        },
        &[Tensor::vector(vec![1.0, 2.0])],
        1e-4,
        1e-6,
    )
    .unwrap();
    assert!(rep.passed, "{}", rep.max_rel_err);
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![1.0, 2.0])).unwrap();
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    assert_eq!(tape.backward(s).unwrap().get(x).unwrap(), &[2.0, 4.0]);
}

#[test]
fn non_finite_names_the_node() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![1e300])).unwrap();
    let err = tape.mul(x, x).unwrap_err();
    assert!(matches!(err, Error::NonFinite { node: 1, op: "mul" }), "{err}");
}

#[test]
fn grad_matmul_all_transposes() {
    for &(m, k) in &SHAPES {
        let n = 3;
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = rand_tensor(1, &if ta { [k, m] } else { [m, k] });
            let b = rand_tensor(2, &if tb { [n, k] } else { [k, n] });
            check(
                |t, v| {
                    let c = t.matmul_t(v[0], v[1], ta, tb)?;
                    weighted_sum(t, c, 9)
                },
                &[a, b],
            );
        }
    }
}

#[test]
fn grad_elementwise() {
    for &(r, c) in &SHAPES {
        let a = rand_tensor(3, &[r, c]);
        let b = rand_tensor(4, &[r, c]);
        let row = rand_tensor(5, &[c]);
        check(|t, v| { let y = t.add(v[0], v[1])?; weighted_sum(t, y, 1) }, &[a.clone(), b.clone()]);
        check(|t, v| { let y = t.sub(v[0], v[1])?; weighted_sum(t, y, 1) }, &[a.clone(), b.clone()]);
        check(|t, v| { let y = t.mul(v[0], v[1])?; weighted_sum(t, y, 1) }, &[a.clone(), b.clone()]);
        check(|t, v| { let y = t.add_row(v[0], v[1])?; weighted_sum(t, y, 1) }, &[a.clone(), row.clone()]);
        check(|t, v| { let y = t.mul_row(v[0], v[1])?; weighted_sum(t, y, 1) }, &[a.clone(), row.clone()]);
        check(|t, v| { let y = t.scale(v[0], -1.7)?; weighted_sum(t, y, 1) }, &[a.clone()]);
        check(|t, v| { let y = t.sigmoid(v[0])?; weighted_sum(t, y, 1) }, &[a.clone()]);
        check(|t, v| { let y = t.gelu(v[0])?; weighted_sum(t, y, 1) }, &[a.clone()]);
        check(|t, v| { let y = t.silu(v[0])?; weighted_sum(t, y, 1) }, &[a.clone()]);
    }
}

#[test]
fn grad_softmax_every_axis() {
    for shape in [vec![4], vec![3, 4], vec![2, 3, 2]] {
        for axis in 0..shape.len() {
            check(
                |t, v| {
                    let y = t.softmax(v[0], axis)?;
                    weighted_sum(t, y, 2)
                },
                &[rand_tensor(6, &shape)],
            );
        }
    }
}

#[test]
fn grad_layer_norm() {
    for &(r, c) in &[(1, 3), (3, 4), (2, 6)] {
        check(
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                weighted_sum(t, y, 3)
            },
            &[rand_tensor(7, &[r, c]), rand_tensor(8, &[c]), rand_tensor(9, &[c])],
        );
    }
}

#[test]
fn grad_attention() {
    for (n, m, d, heads, mask) in [
        (1, 3, 4, 1, Mask::None),
        (3, 3, 4, 2, Mask::Causal { offset: 0 }),
        (2, 5, 6, 3, Mask::Causal { offset: 3 }),
        (4, 2, 8, 4, Mask::None),
    ] {
        check(
            |t, v| {
                let y = t.attention(v[0], v[1], v[2], heads, mask)?;
                weighted_sum(t, y, 4)
            },
            &[rand_tensor(10, &[n, d]), rand_tensor(11, &[m, d]), rand_tensor(12, &[m, d])],
        );
    }
}

#[test]
fn attention_respects_causal_mask() {
    let mut t = Tape::new();
    let q = t.constant(rand_tensor(1, &[3, 4])).unwrap();
    let k = t.constant(rand_tensor(2, &[5, 4])).unwrap();
    let y = t.attention(q, k, k, 2, Mask::Causal { offset: 2 }).unwrap();
    let p = t.attention_probs(y).unwrap();
    for h in 0..2 {
        for i in 0..3 {
            let row = &p[h * 15 + i * 5..h * 15 + i * 5 + 5];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row[3 + i..].iter().all(|&x| x == 0.0));
        }
    }
}

#[test]
fn grad_structural() {
    for &(r, c) in &SHAPES {
        let x = rand_tensor(13, &[r, c]);
        let y = rand_tensor(14, &[2, c]);
        let idx: Arc<[usize]> = (0..r * c * 2)
            .map(|i| if i % 5 == 4 { GATHER_ZERO } else { (i * 7) % (r * c) })
            .collect();
        check(
            |t, v| {
                let g = t.gather(v[0], idx.clone(), vec![2 * r, c])?;
                weighted_sum(t, g, 5)
            },
            &[x.clone()],
        );
        check(|t, v| { let g = t.concat_rows(&[v[0], v[1], v[0]])?; weighted_sum(t, g, 5) }, &[x.clone(), y.clone()]);
        check(|t, v| { let g = t.slice_rows(v[0], r - 1, 1)?; weighted_sum(t, g, 5) }, &[x.clone()]);
        check(|t, v| { let g = t.reshape(v[0], vec![c, r])?; weighted_sum(t, g, 5) }, &[x.clone()]);
        check(|t, v| { let g = t.select_rows(v[0], &[0, r - 1, 0])?; weighted_sum(t, g, 5) }, &[x.clone()]);
        check(|t, v| t.sum(v[0]), &[x.clone()]);
        check(|t, v| t.mean(v[0]), &[x.clone()]);
        check(|t, v| { let g = t.mean_rows(v[0])?; weighted_sum(t, g, 5) }, &[x.clone()]);
        check(|t, v| { let g = t.max_rows(v[0])?; weighted_sum(t, g, 5) }, &[x.clone()]);
        check(|t, v| { let g = t.normalize_rows(v[0])?; weighted_sum(t, g, 5) }, &[x.clone()]);
    }
}

#[test]
fn grad_cross_entropy() {
    for (n, vocab) in [(1, 3), (4, 5), (3, 7)] {
        let targets: Vec<Option<usize>> = (0..n)
            .map(|i| if i == 1 { None } else { Some((i * 3) % vocab) })
            .collect();
        check(|t, v| t.cross_entropy(v[0], &targets), &[rand_tensor(15, &[n, vocab])]);
    }
}

#[test]
fn truncate_reuses_tape() {
    let mut t = Tape::new();
    let x = t.param(rand_tensor(1, &[2, 2])).unwrap();
    let mark = t.len();
    let a = t.sum(x).unwrap();
    let va = t.value(a).item();
    t.truncate(mark);
    assert_eq!(t.len(), 1);
    let b = t.sum(x).unwrap();
    assert_eq!(t.value(b).item(), va);
}

proptest! {
    #[test]
    fn softmax_shift_invariant(
        xs in prop::collection::vec(-30.0f64..30.0, 1..12),
        c in -500.0f64..500.0,
    ) {
        let a = softmax(&Tensor::vector(xs.clone()), 0).unwrap();
        let b = softmax(&Tensor::vector(xs.iter().map(|v| v + c).collect()), 0).unwrap();
        prop_assert!(a.max_abs_diff(&b) <= 1e-12);
        prop_assert!(a.data().iter().all(|&v| v >= 0.0));
        prop_assert!((a.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_rows_are_standardised(
        xs in prop::collection::vec(-10.0f64..10.0, 8),
    ) {
        let x = Tensor::matrix(2, 4, xs).unwrap();
        let y = layer_norm(&x, &Tensor::vector(vec![1.0; 4]), &Tensor::vector(vec![0.0; 4]), 1e-5).unwrap();
        for r in 0..2 {
            let row = y.row(r);
            let m = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 4.0;
            prop_assert!(m.abs() < 1e-9);
            prop_assert!(var <= 1.0 + 1e-9);
        }
    }
}
