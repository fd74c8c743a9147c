use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative pivot tolerance for rank detection.
pub const RANK_TOL: f64 = 1e-10;

/// Householder QR with column pivoting; returns the numerical rank and the
/// pivot order. A column is deemed dependent once its pivot falls below
/// `RANK_TOL` times the largest pivot.
pub fn pivoted_rank(x: &DMatrix<f64>) -> (usize, Vec<usize>) {
    let (n, p) = x.shape();
    let mut a = x.clone();
    let mut perm: Vec<usize> = (0..p).collect();
    let mut norms: Vec<f64> = (0..p).map(|j| a.column(j).norm_squared()).collect();
    let mut first_pivot = 0.0;
    let steps = n.min(p);
    for k in 0..steps {
        let (jmax, _) = norms[k..]
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
        let jmax = jmax + k;
        if jmax != k {
            a.swap_columns(k, jmax);
            norms.swap(k, jmax);
            perm.swap(k, jmax);
        }
        let col_norm = a.view((k, k), (n - k, 1)).norm();
        if k == 0 {
            first_pivot = col_norm;
        }
        if col_norm <= RANK_TOL * first_pivot || col_norm == 0.0 {
            return (k, perm);
        }
        // Householder reflector zeroing a[k+1.., k].
        let alpha = if a[(k, k)] > 0.0 { -col_norm } else { col_norm };
        let mut v = a.view((k, k), (n - k, 1)).clone_owned();
        v[0] -= alpha;
        let vnorm2 = v.norm_squared();
        if vnorm2 > 0.0 {
            for j in k..p {
                let dot = (0..n - k).map(|i| v[i] * a[(k + i, j)]).sum::<f64>();
                let f = 2.0 * dot / vnorm2;
                for i in 0..n - k {
                    a[(k + i, j)] -= f * v[i];
                }
            }
        }
        for j in k + 1..p {
            norms[j] = (k + 1..n).map(|i| a[(i, j)] * a[(i, j)]).sum();
        }
    }
    (steps, perm)
}

/// Errors with the first dependent column (in pivot order) when `x` lacks full
/// column rank.
pub fn check_full_rank(x: &DMatrix<f64>, names: &[String]) -> Result<()> {
    let p = x.ncols();
    if x.nrows() < p {
        return Err(Error::Estimation(format!(
            "{} observations cannot identify {} coefficients",
            x.nrows(),
            p
        )));
    }
    let (rank, perm) = pivoted_rank(x);
    if rank < p {
        let index = perm[rank];
        let name = names.get(index).cloned().unwrap_or_else(|| format!("x{index}"));
        return Err(Error::RankDeficient { index, name });
    }
    Ok(())
}

pub fn spd_inverse(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let chol = a.clone().cholesky()?;
    let inv = chol.inverse();
    Some(symmetrize(&inv))
}

pub fn spd_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    a.clone().cholesky().map(|c| c.solve(b))
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// X' diag(w) X.
pub fn weighted_gram(x: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let p = x.ncols();
    let mut g = DMatrix::zeros(p, p);
    for (i, &wi) in w.iter().enumerate() {
        if wi == 0.0 {
            continue;
        }
        for a in 0..p {
            let xa = x[(i, a)] * wi;
            for b in a..p {
                g[(a, b)] += xa * x[(i, b)];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            g[(a, b)] = g[(b, a)];
        }
    }
    g
}
