//! Two-component PCA of thought trajectories.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lqformer::ThoughtChain;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit principal directions, strongest first.
    pub components: Vec<Vec<f64>>,
    pub explained_ratio: Vec<f64>,
    /// Fewer non-trivial components than requested.
    pub rank_deficient: bool,
}

impl Pca {
    /// Fits up to `n` components to the rows of `points`.
    pub fn fit(points: &[Vec<f64>], n: usize) -> Result<Pca> {
        let d = points.first().map_or(0, Vec::len);
        if points.len() < 2 || d == 0 || points.iter().any(|p| p.len() != d) {
            return Err(Error::Argument("PCA needs at least two points of equal, non-zero width".into()));
        }
        let m = points.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / m).collect();
        let x = DMatrix::from_fn(points.len(), d, |i, j| points[i][j] - mean[j]);
        let cov = x.transpose() * &x / (m - 1.0);
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
        let tol = 1e-12 * total.max(f64::MIN_POSITIVE);
        let mut components = Vec::new();
        let mut explained = Vec::new();
        let mut deficient = false;
        for &k in order.iter().take(n) {
            let lam = eig.eigenvalues[k].max(0.0);
            if lam <= tol {
                deficient = true;
            }
            let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            // sign convention: largest-magnitude entry positive
            let big = v.iter().copied().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
            if big < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            components.push(v);
            explained.push(if total > 0.0 { lam / total } else { 0.0 });
        }
        if components.len() < n {
            deficient = true;
        }
        Ok(Pca {
            mean,
            components,
            explained_ratio: explained,
            rank_deficient: deficient,
        })
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(x).zip(&self.mean).map(|((c, x), m)| c * (x - m)).sum())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Trajectories {
    pub pca: Pca,
    /// Per chain, per step, the 2-D coordinates.
    pub coords: Vec<Vec<Vec<f64>>>,
    /// Per chain, Euclidean norms of `z_{k+1} - z_k` in thought space.
    pub displacements: Vec<Vec<f64>>,
}

pub fn trajectory_export(chains: &[ThoughtChain]) -> Result<Trajectories> {
    if chains.len() < 2 || chains.iter().any(|c| c.k() < 2) {
        return Err(Error::Argument("trajectory export needs at least two chains with K >= 2".into()));
    }
    let points: Vec<Vec<f64>> = chains.iter().flat_map(|c| c.thoughts.iter().cloned()).collect();
    let pca = Pca::fit(&points, 2)?;
    let coords = chains
        .iter()
        .map(|c| c.thoughts.iter().map(|z| pca.project(z)).collect())
        .collect();
    let displacements = chains
        .iter()
        .map(|c| {
            c.thoughts
                .windows(2)
                .map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| (b - a) * (b - a)).sum::<f64>().sqrt())
                .collect()
        })
        .collect();
    Ok(Trajectories {
        pca,
        coords,
        displacements,
    })
}

impl Trajectories {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("chain,step,pc1,pc2,displacement\n");
        for (i, (pts, disp)) in self.coords.iter().zip(&self.displacements).enumerate() {
            for (k, p) in pts.iter().enumerate() {
                let d = if k == 0 { String::new() } else { format!("{}", disp[k - 1]) };
                let pc = |j: usize| p.get(j).copied().unwrap_or(0.0);
                s.push_str(&format!("{i},{},{},{},{d}\n", k + 1, pc(0), pc(1)));
            }
        }
        s
    }
}
