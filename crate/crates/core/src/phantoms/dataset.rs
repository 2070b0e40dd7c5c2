//! On-disk pair datasets: 16-bit PNG rasters plus a tab-separated manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::preprocess::{preprocess, PreprocessConfig};
use super::{generate_phantom_set, PhantomSpec, PhasePair};
use crate::error::{Error, Result};
use crate::image::{Image, ValueRange};

const MANIFEST_HEADER: &str = "# sample_id\tgroup_id\tpath_a\tpath_b";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub sample_id: String,
    pub group_id: String,
    pub path_a: PathBuf,
    pub path_b: PathBuf,
}

/// Writes `image` as a 16-bit grayscale PNG, mapping its value range onto `[0, 65535]`.
pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    let range = image.range();
    let span = range.width().max(f32::MIN_POSITIVE) as f64;
    let data: Vec<u16> = image
        .pixels()
        .iter()
        .map(|&v| {
            (((v - range.lo) as f64 / span) * 65535.0)
                .round()
                .clamp(0.0, 65535.0) as u16
        })
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(image.width() as u32, image.height() as u32, data)
            .expect("buffer length matches dimensions");
    buf.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Sample {
            sample_id: path.display().to_string(),
            message: other.to_string(),
        },
    })
}

/// Decodes a grayscale raster, mapping its full integer range onto `range`.
pub fn read_image(path: &Path, range: ValueRange) -> Result<Image> {
    let decoded = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Sample {
            sample_id: path.display().to_string(),
            message: format!("undecodable raster: {other}"),
        },
    })?;
    let gray = decoded.into_luma16();
    let (w, h) = gray.dimensions();
    let span = range.width() as f64;
    let pixels = gray
        .into_raw()
        .into_iter()
        .map(|v| (range.lo as f64 + span * v as f64 / 65535.0) as f32)
        .map(|v| v.clamp(range.lo, range.hi))
        .collect();
    Image::new(h as usize, w as usize, pixels, range)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("expected 4 tab-separated fields, found {}", fields.len()),
            });
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                line: i + 1,
                message: "sample_id and group_id must be non-empty".into(),
            });
        }
        rows.push(ManifestRow {
            sample_id: fields[0].to_string(),
            group_id: fields[1].to_string(),
            path_a: PathBuf::from(fields[2]),
            path_b: PathBuf::from(fields[3]),
        });
    }
    Ok(rows)
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            r.sample_id,
            r.group_id,
            r.path_a.display(),
            r.path_b.display()
        ));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Loads every manifest row (paths relative to `root`) and preprocesses both phases.
/// Fails on the first bad row, naming its sample_id.
pub fn load_pair_dataset(root: &Path, manifest: &Path, config: &PreprocessConfig) -> Result<Vec<PhasePair>> {
    let rows = read_manifest(manifest)?;
    rows.iter()
        .map(|row| {
            let tag = |e: Error| match e {
                Error::Sample { ref sample_id, .. } if *sample_id == row.sample_id => e,
                other => Error::Sample {
                    sample_id: row.sample_id.clone(),
                    message: other.to_string(),
                },
            };
            let a = read_image(&root.join(&row.path_a), ValueRange::SIGNED_UNIT).map_err(tag)?;
            let b = read_image(&root.join(&row.path_b), ValueRange::SIGNED_UNIT).map_err(tag)?;
            if a.dims() != b.dims() {
                return Err(Error::Sample {
                    sample_id: row.sample_id.clone(),
                    message: format!("size mismatch: {:?} vs {:?}", a.dims(), b.dims()),
                });
            }
            let a = preprocess(&a, config).map_err(tag)?;
            let b = preprocess(&b, config).map_err(tag)?;
            PhasePair::new(a, b, row.group_id.clone(), row.sample_id.clone())
        })
        .collect()
}

/// Writes `count` phantom pairs as `<root>/<sample_id>_{a,b}.png` plus `<root>/manifest.tsv`.
/// Returns the manifest path.
pub fn write_phantom_dataset(spec: &PhantomSpec, count: usize, root: &Path) -> Result<PathBuf> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let pairs = generate_phantom_set(spec, count)?;
    let mut rows = Vec::with_capacity(count);
    for p in &pairs {
        let path_a = PathBuf::from(format!("{}_a.png", p.sample_id));
        let path_b = PathBuf::from(format!("{}_b.png", p.sample_id));
        write_image(&root.join(&path_a), &p.phase_a)?;
        write_image(&root.join(&path_b), &p.phase_b)?;
        rows.push(ManifestRow {
            sample_id: p.sample_id.clone(),
            group_id: p.group_id.clone(),
            path_a,
            path_b,
        });
    }
    let manifest = root.join("manifest.tsv");
    write_manifest(&manifest, &rows)?;
    Ok(manifest)
}

#[derive(Debug, Clone, Default)]
pub struct Split {
    pub train: Vec<PhasePair>,
    pub validation: Vec<PhasePair>,
    /// Groups too small to split, sent wholly to training.
    pub warnings: Vec<String>,
}

/// Splits each group `train_parts : val_parts`. Groups smaller than
/// `train_parts + val_parts` go entirely to training. Both outputs keep input order.
pub fn split_by_group(pairs: &[PhasePair], train_parts: usize, val_parts: usize, seed: u64) -> Result<Split> {
    if train_parts == 0 || val_parts == 0 {
        return Err(Error::Config(format!(
            "split parts must be >= 1, got {train_parts}:{val_parts}"
        )));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, p) in pairs.iter().enumerate() {
        if p.group_id.is_empty() {
            return Err(Error::Sample {
                sample_id: p.sample_id.clone(),
                message: "empty group_id".into(),
            });
        }
        groups.entry(&p.group_id).or_default().push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_val = vec![false; pairs.len()];
    let mut warnings = Vec::new();
    let parts = train_parts + val_parts;
    for (group, mut members) in groups {
        if members.len() < parts {
            let msg = format!(
                "group `{group}` has {} samples (< {parts}); assigned entirely to training",
                members.len()
            );
            log::warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        members.shuffle(&mut rng);
        let n_val = (members.len() * val_parts / parts).max(1);
        for &i in &members[..n_val] {
            is_val[i] = true;
        }
    }

    let mut split = Split {
        warnings,
        ..Split::default()
    };
    for (p, v) in pairs.iter().zip(is_val) {
        if v {
            split.validation.push(p.clone());
        } else {
            split.train.push(p.clone());
        }
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn dummy(group: &str, id: usize) -> PhasePair {
        let img = Image::constant(2, 2, 0.0, ValueRange::SIGNED_UNIT).unwrap();
        PhasePair::new(img.clone(), img, group, format!("s{id}")).unwrap()
    }

    #[test]
    fn split_exact_ratio_per_group() {
        let pairs: Vec<_> = (0..50).map(|i| dummy(&format!("g{}", i % 5), i)).collect();
        let split = split_by_group(&pairs, 4, 1, 3).unwrap();
        assert_eq!(split.train.len(), 40);
        assert_eq!(split.validation.len(), 10);
        for g in 0..5 {
            let gid = format!("g{g}");
            assert_eq!(split.train.iter().filter(|p| p.group_id == gid).count(), 8);
            assert_eq!(split.validation.iter().filter(|p| p.group_id == gid).count(), 2);
        }
        assert!(split.warnings.is_empty());
    }

    #[test]
    fn small_group_goes_to_train_with_warning() {
        let pairs: Vec<_> = (0..3).map(|i| dummy("tiny", i)).collect();
        let split = split_by_group(&pairs, 4, 1, 0).unwrap();
        assert_eq!(split.train.len(), 3);
        assert!(split.validation.is_empty());
        assert_eq!(split.warnings.len(), 1);
        assert!(split.warnings[0].contains("tiny"));
    }

    #[test]
    fn split_is_deterministic() {
        let pairs: Vec<_> = (0..37).map(|i| dummy(&format!("g{}", i % 4), i)).collect();
        let ids = |s: &Split| {
            s.validation
                .iter()
                .map(|p| p.sample_id.clone())
                .collect::<Vec<_>>()
        };
        let a = split_by_group(&pairs, 4, 1, 9).unwrap();
        let b = split_by_group(&pairs, 4, 1, 9).unwrap();
        assert_eq!(ids(&a), ids(&b));
    }

    #[test]
    fn split_rejects_zero_parts() {
        assert!(split_by_group(&[], 0, 1, 0).is_err());
        assert!(split_by_group(&[], 4, 0, 0).is_err());
    }

    proptest! {
        #[test]
        fn split_partitions_input(
            sizes in prop::collection::vec(0usize..15, 1..6),
            tp in 1usize..5,
            vp in 1usize..3,
            seed in any::<u64>(),
        ) {
            let mut pairs = Vec::new();
            for (g, &n) in sizes.iter().enumerate() {
                for _ in 0..n {
                    let id = pairs.len();
                    pairs.push(dummy(&format!("g{g}"), id));
                }
            }
            let split = split_by_group(&pairs, tp, vp, seed).unwrap();
            let train: HashSet<_> = split.train.iter().map(|p| p.sample_id.clone()).collect();
            let val: HashSet<_> = split.validation.iter().map(|p| p.sample_id.clone()).collect();
            prop_assert!(train.is_disjoint(&val));
            prop_assert_eq!(train.len() + val.len(), pairs.len());
            for (g, &n) in sizes.iter().enumerate() {
                let gid = format!("g{g}");
                let nv = split.validation.iter().filter(|p| p.group_id == gid).count();
                if n >= tp + vp {
                    prop_assert!(nv >= 1 && n - nv >= 1);
                } else {
                    prop_assert_eq!(nv, 0);
                }
            }
        }
    }
}
