//! Attention-saliency window selection over the visual token grid.

use crate::backbone::{LMForwardRecord, VisualFeatures};
use crate::error::{Error, Result};
use crate::numkernel::{window_sum_2d, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencySelection {
    pub saliency: Vec<f64>,
    /// `[H' x W']`.
    pub grid: Tensor,
    /// `[(H'-w+1) x (W'-w+1)]`.
    pub window_scores: Tensor,
    pub anchor: (usize, usize),
    pub mask: Vec<f64>,
    pub w: usize,
}

impl SaliencySelection {
    /// Selection that keeps every token, used when selection is ablated.
    pub fn keep_all(n_v: usize, grid_h: usize, grid_w: usize) -> Self {
        SaliencySelection {
            saliency: vec![0.0; n_v],
            grid: Tensor::zeros(&[grid_h, grid_w]),
            window_scores: Tensor::zeros(&[1, 1]),
            anchor: (0, 0),
            mask: vec![1.0; n_v],
            w: grid_h.min(grid_w),
        }
    }

    pub fn selected_indices(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m != 0.0)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Mean over layers and heads of the single query's attention to each
/// visual position.
pub fn aggregate_saliency(record: &LMForwardRecord) -> Result<Vec<f64>> {
    let span = record.img_span;
    if span.is_empty() {
        return Err(Error::Argument("image span is empty".into()));
    }
    let s = record.attention.shape();
    if s.len() != 4 || s[2] != 1 {
        return Err(Error::Dimension(format!(
            "saliency needs [L x N_h x 1 x P] attention, got {s:?}"
        )));
    }
    let (l, h, p) = (s[0], s[1], s[3]);
    if span.end > p {
        return Err(Error::Range(format!("image span {span:?} beyond {p} keys")));
    }
    let mut out = vec![0.0; span.len()];
    let a = record.attention.data();
    for li in 0..l {
        for hi in 0..h {
            let row = &a[(li * h + hi) * p..(li * h + hi + 1) * p];
            for (o, &v) in out.iter_mut().zip(&row[span.start..span.end]) {
                *o += v;
            }
        }
    }
    let denom = (l * h) as f64;
    out.iter_mut().for_each(|v| *v /= denom);
    Ok(out)
}

/// Best `w x w` window; the first maximum in row-major order wins ties.
pub fn select_window(saliency: &[f64], grid_h: usize, grid_w: usize, w: usize) -> Result<SaliencySelection> {
    if saliency.len() != grid_h * grid_w {
        return Err(Error::Dimension(format!(
            "{} saliency values for a {grid_h}x{grid_w} grid",
            saliency.len()
        )));
    }
    if w == 0 || w > grid_h.min(grid_w) {
        return Err(Error::Range(format!(
            "window size {w} must lie in 1..={}",
            grid_h.min(grid_w)
        )));
    }
    let grid = Tensor::new(vec![grid_h, grid_w], saliency.to_vec())?;
    let scores = window_sum_2d(&grid, w)?;
    let ow = grid_w - w + 1;
    let mut best = 0;
    for (i, &v) in scores.data().iter().enumerate() {
        if v > scores.data()[best] {
            best = i;
        }
    }
    let anchor = (best / ow, best % ow);
    let mut mask = vec![0.0; grid_h * grid_w];
    for i in anchor.0..anchor.0 + w {
        for j in anchor.1..anchor.1 + w {
            mask[i * grid_w + j] = 1.0;
        }
    }
    Ok(SaliencySelection {
        saliency: saliency.to_vec(),
        grid,
        window_scores: scores,
        anchor,
        mask,
        w,
    })
}

/// `V ⊙ mask`: rows outside the window become zero, rows inside are copied.
pub fn apply_mask(v: &VisualFeatures, sel: &SaliencySelection) -> Result<Tensor> {
    if sel.mask.len() != v.n_v() {
        return Err(Error::Dimension(format!(
            "mask of {} entries for {} visual tokens",
            sel.mask.len(),
            v.n_v()
        )));
    }
    let d = v.tokens.cols();
    let mut out = vec![0.0; v.tokens.numel()];
    for (r, &m) in sel.mask.iter().enumerate() {
        if m != 0.0 {
            out[r * d..(r + 1) * d].copy_from_slice(v.tokens.row(r));
        }
    }
    Tensor::new(v.tokens.shape().to_vec(), out)
}

/// Row-major CSV of a grid, one row per line.
pub fn grid_csv(t: &Tensor) -> String {
    let mut s = String::new();
    for r in 0..t.rows() {
        let row: Vec<String> = t.row(r).iter().map(|v| format!("{v:e}")).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}
