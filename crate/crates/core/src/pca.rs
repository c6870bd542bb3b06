//! Principal-component projection of trace keys by power iteration with deflation.

use crate::error::{Error, Result};

pub const TOLERANCE: f64 = 1e-10;
pub const MAX_ITERATIONS: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// One row per input point, `dim` columns.
    pub coords: Vec<Vec<f64>>,
    /// Unit principal directions, largest variance first.
    pub components: Vec<Vec<f64>>,
    /// Variance along each component (population covariance eigenvalue).
    pub explained_variance: Vec<f64>,
    pub mean: Vec<f64>,
}

/// Mean-centers `points` and projects them onto the top `dim` principal
/// components. Each component's sign makes the first point's coordinate
/// nonnegative.
pub fn pca_project(points: &[Vec<f64>], dim: usize) -> Result<Projection> {
    let d = points.first().map_or(0, Vec::len);
    if points.iter().any(|p| p.len() != d) || d == 0 {
        return Err(Error::InvalidArgument("points must share a nonzero dimension".into()));
    }
    if dim == 0 || dim > d {
        return Err(Error::InvalidArgument(format!("cannot project {d}-dimensional points to {dim} dimensions")));
    }
    if !points.iter().any(|p| p != &points[0]) {
        return Err(Error::InvalidArgument("need at least 2 distinct points".into()));
    }
    let n = points.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n).collect();
    let centered: Vec<Vec<f64>> = points.iter().map(|p| p.iter().zip(&mean).map(|(a, m)| a - m).collect()).collect();
    let mut cov = vec![vec![0.0; d]; d];
    for p in &centered {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += p[i] * p[j] / n;
            }
        }
    }

    let mut components: Vec<Vec<f64>> = Vec::with_capacity(dim);
    let mut variances = Vec::with_capacity(dim);
    for _ in 0..dim {
        let (lambda, mut v) = top_eigen(&cov, &components);
        let first: f64 = dot(&centered[0], &v);
        let flip = if first != 0.0 { first < 0.0 } else { v.iter().find(|x| **x != 0.0).is_some_and(|x| *x < 0.0) };
        if flip {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        for i in 0..d {
            for j in 0..d {
                cov[i][j] -= lambda * v[i] * v[j];
            }
        }
        components.push(v);
        variances.push(lambda);
    }
    let coords = centered.iter().map(|p| components.iter().map(|c| dot(p, c)).collect()).collect();
    Ok(Projection { coords, components, explained_variance: variances, mean })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let c = dot(v, b);
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
    }
}

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| dot(row, v)).collect()
}

/// Dominant eigenpair of a symmetric matrix, orthogonal to `found`.
fn top_eigen(m: &[Vec<f64>], found: &[Vec<f64>]) -> (f64, Vec<f64>) {
    let d = m.len();
    // start from the largest row, falling back to a basis vector
    let mut v = m
        .iter()
        .max_by(|a, b| dot(a, a).total_cmp(&dot(b, b)))
        .cloned()
        .unwrap_or_else(|| vec![0.0; d]);
    orthogonalize(&mut v, found);
    if normalize(&mut v) < 1e-300 {
        for i in 0..d {
            let mut e = vec![0.0; d];
            e[i] = 1.0;
            orthogonalize(&mut e, found);
            if normalize(&mut e) > 1e-8 {
                v = e;
                break;
            }
        }
    }
    for _ in 0..MAX_ITERATIONS {
        let mut next = mat_vec(m, &v);
        orthogonalize(&mut next, found);
        if normalize(&mut next) < 1e-300 {
            return (0.0, v);
        }
        if dot(&next, &v) < 0.0 {
            next.iter_mut().for_each(|x| *x = -*x);
        }
        let change = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if change < TOLERANCE {
            break;
        }
    }
    let lambda = dot(&v, &mat_vec(m, &v));
    (lambda, v)
}
