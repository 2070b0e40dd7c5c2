//! Latent-space diagnostics: mean/variance symmetry between phases and a
//! 2D projection of latent means.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::metrics::neumaier_sum;
use super::pca::{project_latents_2d, Projection};
use crate::backbone::{FdaVae, LatentDistribution, Phase};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::phantoms::PhasePair;
use crate::synthesis::INFERENCE_CHUNK;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymmetryRow {
    pub sample_id: String,
    pub mean_abs_mu_sum: f64,
    pub mean_abs_var_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymmetryReport {
    /// Dataset mean of `|mu_A + mu_B|`; the symmetry score.
    pub mean_abs_mu_sum: f64,
    /// Dataset mean of `|var_A - var_B|`.
    pub mean_abs_var_diff: f64,
    pub per_sample: Vec<SymmetryRow>,
}

fn per_sample_rows(t: &Tensor) -> Result<Vec<f64>> {
    let n = t.dim(0)?;
    Ok(t.to_dtype(DType::F64)?
        .reshape((n, ()))?
        .mean(1)?
        .to_vec1::<f64>()?)
}

/// Per-sample symmetry terms for aligned batches of distributions.
pub fn symmetry_rows(
    a: &LatentDistribution,
    b: &LatentDistribution,
    sample_ids: &[String],
) -> Result<Vec<SymmetryRow>> {
    if a.dims() != b.dims() {
        return Err(Error::shape("symmetry", a.dims(), b.dims()));
    }
    if a.dims().first() != Some(&sample_ids.len()) {
        return Err(Error::shape("symmetry sample ids", a.dims(), sample_ids.len()));
    }
    let mu = per_sample_rows(&(&a.mean + &b.mean)?.abs()?)?;
    let var = per_sample_rows(&(a.variance()? - b.variance()?)?.abs()?)?;
    Ok(sample_ids
        .iter()
        .zip(mu.into_iter().zip(var))
        .map(|(id, (m, v))| SymmetryRow {
            sample_id: id.clone(),
            mean_abs_mu_sum: m,
            mean_abs_var_diff: v,
        })
        .collect())
}

pub fn aggregate_symmetry(per_sample: Vec<SymmetryRow>) -> Result<SymmetryReport> {
    if per_sample.is_empty() {
        return Err(Error::EmptyDataset("symmetry report".into()));
    }
    let n = per_sample.len() as f64;
    Ok(SymmetryReport {
        mean_abs_mu_sum: neumaier_sum(per_sample.iter().map(|r| r.mean_abs_mu_sum)) / n,
        mean_abs_var_diff: neumaier_sum(per_sample.iter().map(|r| r.mean_abs_var_diff)) / n,
        per_sample,
    })
}

fn encode_images(model: &FdaVae, images: &[&Image]) -> Result<LatentDistribution> {
    let x = Image::batch_to_tensor(images, model.device())?;
    Ok(model.encode(&x)?.detach())
}

/// Encodes both phases of every pair (no sampling) and reports the two
/// alignment terms per sample and averaged over the dataset.
pub fn latent_symmetry_report(model: &FdaVae, pairs: &[PhasePair]) -> Result<SymmetryReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("symmetry report".into()));
    }
    let mut rows = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(INFERENCE_CHUNK) {
        let a: Vec<&Image> = chunk.iter().map(|p| &p.phase_a).collect();
        let b: Vec<&Image> = chunk.iter().map(|p| &p.phase_b).collect();
        let ids: Vec<String> = chunk.iter().map(|p| p.sample_id.clone()).collect();
        rows.extend(symmetry_rows(
            &encode_images(model, &a)?,
            &encode_images(model, &b)?,
            &ids,
        )?);
    }
    aggregate_symmetry(rows)
}

/// One projected latent mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedLatent {
    pub sample_id: String,
    pub phase: Phase,
    pub pc1: f64,
    pub pc2: f64,
}

/// Projects the flattened latent means of both phases of every pair.
/// Rows come in pair order, phase A before phase B.
pub fn project_pair_latents(
    model: &FdaVae,
    pairs: &[PhasePair],
) -> Result<(Vec<ProjectedLatent>, Projection)> {
    let mut vectors = Vec::with_capacity(2 * pairs.len());
    let mut labels = Vec::with_capacity(2 * pairs.len());
    for chunk in pairs.chunks(INFERENCE_CHUNK) {
        for phase in [Phase::A, Phase::B] {
            let images: Vec<&Image> = chunk
                .iter()
                .map(|p| match phase {
                    Phase::A => &p.phase_a,
                    Phase::B => &p.phase_b,
                })
                .collect();
            let mean = encode_images(model, &images)?.mean;
            let flat = mean.to_dtype(DType::F64)?.flatten_from(1)?.to_vec2::<f64>()?;
            for (p, v) in chunk.iter().zip(flat) {
                labels.push((p.sample_id.clone(), phase));
                vectors.push(v);
            }
        }
    }
    let projection = project_latents_2d(&vectors)?;
    let mut rows: Vec<(usize, ProjectedLatent)> = labels
        .into_iter()
        .zip(&projection.coordinates)
        .enumerate()
        .map(|(i, ((sample_id, phase), c))| {
            (
                i,
                ProjectedLatent {
                    sample_id,
                    phase,
                    pc1: c[0],
                    pc2: c[1],
                },
            )
        })
        .collect();
    let order: std::collections::HashMap<&str, usize> = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| (p.sample_id.as_str(), i))
        .collect();
    rows.sort_by_key(|(i, r)| (order[r.sample_id.as_str()], r.phase == Phase::B, *i));
    Ok((rows.into_iter().map(|(_, r)| r).collect(), projection))
}

pub const PROJECTION_HEADER: &str = "sample_id,phase,pc1,pc2";

/// Writes the projection CSV plus `<stem>_explained.csv` next to it; returns
/// the sidecar path.
pub fn write_projection(path: &Path, rows: &[ProjectedLatent], projection: &Projection) -> Result<PathBuf> {
    let mut text = format!("{PROJECTION_HEADER}\n");
    for r in rows {
        text.push_str(&format!(
            "{},{},{:.9},{:.9}\n",
            r.sample_id, r.phase, r.pc1, r.pc2
        ));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("projection");
    let sidecar = path.with_file_name(format!("{stem}_explained.csv"));
    let mut side = String::from("component,explained_variance,degenerate\n");
    for k in 0..2 {
        side.push_str(&format!(
            "pc{},{:.12e},{}\n",
            k + 1,
            projection.explained_variance[k],
            projection.degenerate[k]
        ));
    }
    fs::write(&sidecar, side).map_err(|e| Error::io(&sidecar, e))?;
    Ok(sidecar)
}

pub const SYMMETRY_HEADER: &str = "sample_id,mean_abs_mu_sum,mean_abs_var_diff";

/// Per-sample rows followed by a `mean` row.
pub fn write_symmetry_report(path: &Path, report: &SymmetryReport) -> Result<()> {
    let mut text = format!("{SYMMETRY_HEADER}\n");
    for r in &report.per_sample {
        text.push_str(&format!(
            "{},{:.9e},{:.9e}\n",
            r.sample_id, r.mean_abs_mu_sum, r.mean_abs_var_diff
        ));
    }
    text.push_str(&format!(
        "mean,{:.9e},{:.9e}\n",
        report.mean_abs_mu_sum, report.mean_abs_var_diff
    ));
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;
    use crate::objectives::fda_loss;
    use crate::phantoms::{generate_phantom_set, PhantomSpec};
    use candle_core::{DType, Device};
    use proptest::prelude::*;

    fn dist(mean: &[f64], logvar: &[f64], n: usize) -> LatentDistribution {
        let d = Device::Cpu;
        let c = mean.len() / n;
        LatentDistribution::new(
            Tensor::from_slice(mean, (n, c, 1, 1), &d).unwrap(),
            Tensor::from_slice(logvar, (n, c, 1, 1), &d).unwrap(),
        )
        .unwrap()
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i}")).collect()
    }

    #[test]
    fn mirrored_means_score_zero() {
        let a = dist(&[0.5, -1.0, 2.0, 0.1], &[0.3, -0.2, 0.0, 1.0], 2);
        let b = a.flip();
        let r = aggregate_symmetry(symmetry_rows(&a, &b, &ids(2)).unwrap()).unwrap();
        assert_eq!(r.mean_abs_mu_sum, 0.0);
        assert_eq!(r.mean_abs_var_diff, 0.0);
    }

    #[test]
    fn hand_built_batch() {
        // Sample 0: mu sums (1, 0), var diffs (e^1 - 1, 0).
        // Sample 1: mu sums (-2, 3) -> |.| (2, 3), var diffs (0, 1 - e^-1).
        let a = dist(&[1.0, 0.0, -1.0, 1.0], &[1.0, 0.0, 0.0, 0.0], 2);
        let b = dist(&[0.0, 0.0, -1.0, 2.0], &[0.0, 0.0, 0.0, -1.0], 2);
        let rows = symmetry_rows(&a, &b, &ids(2)).unwrap();
        let e = std::f64::consts::E;
        assert!((rows[0].mean_abs_mu_sum - 0.5).abs() < 1e-12);
        assert!((rows[0].mean_abs_var_diff - (e - 1.0) / 2.0).abs() < 1e-12);
        assert!((rows[1].mean_abs_mu_sum - 2.5).abs() < 1e-12);
        assert!((rows[1].mean_abs_var_diff - (1.0 - 1.0 / e) / 2.0).abs() < 1e-12);
        let r = aggregate_symmetry(rows).unwrap();
        assert!((r.mean_abs_mu_sum - 1.5).abs() < 1e-12);
    }

    #[test]
    fn report_matches_fda_loss_terms() {
        let model = FdaVae::new(ModelConfig::desk(32), 4).unwrap();
        let spec = PhantomSpec {
            canvas_size: 32,
            ..Default::default()
        };
        let pairs = generate_phantom_set(&spec, 5).unwrap();
        let report = latent_symmetry_report(&model, &pairs).unwrap();
        let a: Vec<&Image> = pairs.iter().map(|p| &p.phase_a).collect();
        let b: Vec<&Image> = pairs.iter().map(|p| &p.phase_b).collect();
        let (da, db) = (
            encode_images(&model, &a).unwrap(),
            encode_images(&model, &b).unwrap(),
        );
        let f64_dist = |d: &LatentDistribution| {
            LatentDistribution::new(
                d.mean.to_dtype(DType::F64).unwrap(),
                d.log_variance.to_dtype(DType::F64).unwrap(),
            )
            .unwrap()
        };
        let (da, db) = (f64_dist(&da), f64_dist(&db));
        let mu: f64 = (&da.mean + &db.mean)
            .unwrap()
            .abs()
            .unwrap()
            .mean_all()
            .unwrap()
            .to_scalar()
            .unwrap();
        let total: f64 = fda_loss(&da, &db).unwrap().to_scalar().unwrap();
        assert!((report.mean_abs_mu_sum - mu).abs() < 1e-6);
        assert!((report.mean_abs_mu_sum + report.mean_abs_var_diff - total).abs() < 1e-6);
    }

    #[test]
    fn empty_is_an_error() {
        let model = FdaVae::new(ModelConfig::desk(32), 4).unwrap();
        assert!(matches!(
            latent_symmetry_report(&model, &[]),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn projection_rows_per_phase() {
        let model = FdaVae::new(ModelConfig::desk(32), 4).unwrap();
        let spec = PhantomSpec {
            canvas_size: 32,
            ..Default::default()
        };
        let pairs = generate_phantom_set(&spec, 4).unwrap();
        let (rows, _) = project_pair_latents(&model, &pairs).unwrap();
        assert_eq!(rows.len(), 8);
        assert_eq!((rows[0].phase, rows[1].phase), (Phase::A, Phase::B));
        assert_eq!(rows[2].sample_id, pairs[1].sample_id);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("projection.csv");
        let (rows, proj) = project_pair_latents(&model, &pairs).unwrap();
        let side = write_projection(&path, &rows, &proj).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 9);
        assert!(side.exists());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn symmetry_rows_invariants(
            m in prop::collection::vec(-3.0f64..3.0, 12),
            lv in prop::collection::vec(-3.0f64..3.0, 12),
            m2 in prop::collection::vec(-3.0f64..3.0, 12),
            lv2 in prop::collection::vec(-3.0f64..3.0, 12),
        ) {
            let a = dist(&m, &lv, 3);
            let b = dist(&m2, &lv2, 3);
            for row in symmetry_rows(&a, &a.flip(), &ids(3)).unwrap() {
                prop_assert_eq!(row.mean_abs_mu_sum, 0.0);
                prop_assert_eq!(row.mean_abs_var_diff, 0.0);
            }
            let ab = symmetry_rows(&a, &b, &ids(3)).unwrap();
            let ba = symmetry_rows(&b, &a, &ids(3)).unwrap();
            for (x, y) in ab.iter().zip(&ba) {
                prop_assert!(x.mean_abs_mu_sum >= 0.0 && x.mean_abs_var_diff >= 0.0);
                prop_assert!((x.mean_abs_mu_sum - y.mean_abs_mu_sum).abs() < 1e-12);
                prop_assert!((x.mean_abs_var_diff - y.mean_abs_var_diff).abs() < 1e-12);
            }
        }
    }
}
