//! Two-component principal component projection by power iteration.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const POWER_TOLERANCE: f64 = 1e-9;
pub const POWER_MAX_ITERATIONS: usize = 10_000;
/// Eigenvalues below this fraction of the total variance count as degenerate.
const DEGENERATE_FRACTION: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    /// Per-input `(pc1, pc2)` coordinates.
    pub coordinates: Vec<[f64; 2]>,
    /// Sample-covariance eigenvalues (divisor `n - 1`), decreasing.
    pub explained_variance: [f64; 2],
    /// Unit principal directions in input space.
    pub components: [Vec<f64>; 2],
    pub degenerate: [bool; 2],
}

type Matrix = Vec<Vec<f64>>;

fn mat_vec(m: &Matrix, v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| dot(row, v)).collect()
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

/// Dominant eigenpair of a symmetric positive semi-definite matrix.
fn power_iteration(m: &Matrix, rng: &mut ChaCha8Rng) -> (f64, Vec<f64>) {
    let d = m.len();
    let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    normalize(&mut v);
    for _ in 0..POWER_MAX_ITERATIONS {
        let mut next = mat_vec(m, &v);
        if normalize(&mut next) == 0.0 {
            return (0.0, vec![0.0; d]);
        }
        let delta = v
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        v = next;
        if delta < POWER_TOLERANCE {
            break;
        }
    }
    let lambda = dot(&v, &mat_vec(m, &v));
    (lambda, v)
}

/// Flips `v` so that its first non-negligible entry is positive.
fn fix_sign(v: &mut [f64]) {
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-9 * scale.max(f64::MIN_POSITIVE)) {
        if *first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// Projects `vectors` onto their top two principal components.
///
/// With more dimensions than samples the eigenproblem is solved on the
/// `n x n` Gram matrix instead of the `d x d` covariance.
pub fn project_latents_2d(vectors: &[Vec<f64>]) -> Result<Projection> {
    let n = vectors.len();
    if n < 3 {
        return Err(Error::Config(format!(
            "projection needs at least 3 vectors, got {n}"
        )));
    }
    let d = vectors[0].len();
    if d == 0 {
        return Err(Error::Config("projection vectors are empty".into()));
    }
    if let Some(v) = vectors.iter().find(|v| v.len() != d) {
        return Err(Error::shape("project_latents_2d", d, v.len()));
    }
    let mut mean = vec![0.0; d];
    for v in vectors {
        mean.iter_mut().zip(v).for_each(|(m, x)| *m += x / n as f64);
    }
    let centered: Matrix = vectors
        .iter()
        .map(|v| v.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let denom = (n - 1) as f64;
    let use_gram = d > n;
    let size = if use_gram { n } else { d };
    let mut m: Matrix = vec![vec![0.0; size]; size];
    for i in 0..size {
        for j in i..size {
            let s = if use_gram {
                dot(&centered[i], &centered[j])
            } else {
                centered.iter().map(|r| r[i] * r[j]).sum()
            };
            m[i][j] = s / denom;
            m[j][i] = s / denom;
        }
    }
    let trace: f64 = (0..size).map(|i| m[i][i]).sum();

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut values = [0.0; 2];
    let mut components = [vec![0.0; d], vec![0.0; d]];
    let mut degenerate = [true; 2];
    for k in 0..2 {
        let (lambda, u) = power_iteration(&m, &mut rng);
        // Deflate before anything else so the next pass sees the remainder.
        for i in 0..size {
            for j in 0..size {
                m[i][j] -= lambda * u[i] * u[j];
            }
        }
        if !(trace > 0.0) || lambda <= DEGENERATE_FRACTION * trace {
            continue;
        }
        let mut dir = if use_gram {
            // Covariance eigenvector is X^T u up to scale.
            let mut w = vec![0.0; d];
            for (row, &ui) in centered.iter().zip(&u) {
                w.iter_mut().zip(row).for_each(|(wj, x)| *wj += ui * x);
            }
            w
        } else {
            u
        };
        normalize(&mut dir);
        fix_sign(&mut dir);
        values[k] = lambda.max(0.0);
        components[k] = dir;
        degenerate[k] = false;
    }
    let coordinates = centered
        .iter()
        .map(|r| [dot(r, &components[0]), dot(r, &components[1])])
        .collect();
    Ok(Projection {
        coordinates,
        explained_variance: values,
        components,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, SymmetricEigen};
    use rand::Rng;

    fn random_vectors(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Anisotropic scales keep the eigengaps well separated.
        (0..n)
            .map(|_| {
                (0..d)
                    .map(|j| rng.random_range(-1.0..1.0) * (d - j) as f64)
                    .collect()
            })
            .collect()
    }

    fn dense_oracle(vectors: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let n = vectors.len();
        let d = vectors[0].len();
        let x = DMatrix::from_fn(n, d, |i, j| vectors[i][j]);
        let mean = x.row_mean();
        let c = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
        let cov = c.transpose() * &c / (n as f64 - 1.0);
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
        let mut dirs = Vec::new();
        for &k in &order[..2] {
            let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            fix_sign(&mut v);
            dirs.push(v);
        }
        let coords = (0..n)
            .map(|i| {
                let row: Vec<f64> = (0..d).map(|j| c[(i, j)]).collect();
                dirs.iter().map(|v| dot(&row, v)).collect()
            })
            .collect();
        (order[..2].iter().map(|&k| eig.eigenvalues[k]).collect(), coords)
    }

    #[test]
    fn diagonal_covariance_axes() {
        // Points (+-2, 0) and (0, +-1): sample covariance diag(8/3, 2/3).
        let v = vec![vec![2.0, 0.0], vec![-2.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]];
        let p = project_latents_2d(&v).unwrap();
        assert!((p.explained_variance[0] - 8.0 / 3.0).abs() < 1e-9);
        assert!((p.explained_variance[1] - 2.0 / 3.0).abs() < 1e-9);
        assert!((p.components[0][0] - 1.0).abs() < 1e-9 && p.components[0][1].abs() < 1e-9);
        assert!((p.components[1][1] - 1.0).abs() < 1e-9);
        assert!((p.coordinates[0][0] - 2.0).abs() < 1e-9);
        assert_eq!(p.degenerate, [false, false]);
    }

    #[test]
    fn rank_one_data() {
        let v: Vec<Vec<f64>> = (0..6)
            .map(|i| vec![i as f64, 2.0 * i as f64, -(i as f64)])
            .collect();
        let p = project_latents_2d(&v).unwrap();
        assert!(p.explained_variance[1] < 1e-8);
        assert!(p.degenerate[1] && !p.degenerate[0]);
    }

    #[test]
    fn zero_variance_is_degenerate() {
        let v = vec![vec![1.0, 2.0]; 4];
        let p = project_latents_2d(&v).unwrap();
        assert_eq!(p.degenerate, [true, true]);
        assert!(p.coordinates.iter().all(|c| c == &[0.0, 0.0]));
    }

    #[test]
    fn input_validation() {
        assert!(project_latents_2d(&[vec![1.0], vec![2.0]]).is_err());
        assert!(project_latents_2d(&[vec![1.0], vec![2.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn matches_dense_eigensolver() {
        let v = random_vectors(20, 5, 11);
        let p = project_latents_2d(&v).unwrap();
        let (values, coords) = dense_oracle(&v);
        for k in 0..2 {
            assert!((p.explained_variance[k] - values[k]).abs() < 1e-6 * values[k].max(1.0));
        }
        for (got, want) in p.coordinates.iter().zip(&coords) {
            assert!((got[0] - want[0]).abs() < 1e-6 && (got[1] - want[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn gram_route_matches_dense_eigensolver() {
        let v = random_vectors(6, 12, 5);
        let p = project_latents_2d(&v).unwrap();
        let (values, coords) = dense_oracle(&v);
        for k in 0..2 {
            assert!((p.explained_variance[k] - values[k]).abs() < 1e-6 * values[k].max(1.0));
        }
        for (got, want) in p.coordinates.iter().zip(&coords) {
            assert!((got[0] - want[0]).abs() < 1e-6 && (got[1] - want[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn duplicated_dataset_coincides() {
        let v = random_vectors(8, 4, 3);
        let mut doubled = v.clone();
        doubled.extend(v.iter().cloned());
        let p = project_latents_2d(&doubled).unwrap();
        for i in 0..8 {
            for k in 0..2 {
                assert!((p.coordinates[i][k] - p.coordinates[i + 8][k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn invariant_under_reordering() {
        let v = random_vectors(10, 4, 9);
        let mut rev = v.clone();
        rev.reverse();
        let p = project_latents_2d(&v).unwrap();
        let q = project_latents_2d(&rev).unwrap();
        for i in 0..10 {
            for k in 0..2 {
                assert!((p.coordinates[i][k] - q.coordinates[9 - i][k]).abs() < 1e-6);
            }
        }
    }
}
