use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HISTORY_HEADER: &str =
    "epoch,step,rec,trans,gan,perce,kl,fda,total,d_loss,val_psnr,val_ssim,val_symmetry";

/// Epoch means of the step losses plus end-of-epoch validation metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: u64,
    pub step: u64,
    pub rec: f64,
    pub trans: f64,
    pub gan: f64,
    pub perce: f64,
    pub kl: f64,
    pub fda: f64,
    pub total: f64,
    pub d_loss: f64,
    pub val_psnr: f64,
    pub val_ssim: f64,
    pub val_symmetry: f64,
}

impl HistoryRow {
    pub fn values(&self) -> [f64; 13] {
        [
            self.epoch as f64,
            self.step as f64,
            self.rec,
            self.trans,
            self.gan,
            self.perce,
            self.kl,
            self.fda,
            self.total,
            self.d_loss,
            self.val_psnr,
            self.val_ssim,
            self.val_symmetry,
        ]
    }

    pub fn to_csv(&self) -> String {
        let v = self.values();
        let mut line = format!("{},{}", self.epoch, self.step);
        for x in &v[2..] {
            line.push_str(&format!(",{x:.9e}"));
        }
        line
    }

    fn parse(line: &str) -> std::result::Result<Self, String> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 13 {
            return Err(format!("expected 13 fields, got {}", f.len()));
        }
        let int = |s: &str| s.parse::<u64>().map_err(|e| format!("`{s}`: {e}"));
        let num = |s: &str| s.parse::<f64>().map_err(|e| format!("`{s}`: {e}"));
        Ok(Self {
            epoch: int(f[0])?,
            step: int(f[1])?,
            rec: num(f[2])?,
            trans: num(f[3])?,
            gan: num(f[4])?,
            perce: num(f[5])?,
            kl: num(f[6])?,
            fda: num(f[7])?,
            total: num(f[8])?,
            d_loss: num(f[9])?,
            val_psnr: num(f[10])?,
            val_ssim: num(f[11])?,
            val_symmetry: num(f[12])?,
        })
    }
}

/// Appends `row`, writing the header first if the file is new.
pub(crate) fn append_history(path: &Path, row: &HistoryRow) -> Result<()> {
    let fresh = !path.exists();
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(HISTORY_HEADER);
        text.push('\n');
    }
    text.push_str(&row.to_csv());
    text.push('\n');
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == HISTORY_HEADER => {}
        _ => {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                line: 1,
                message: "missing history header".into(),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            HistoryRow::parse(l).map_err(|message| Error::Manifest {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let row = HistoryRow {
            epoch: 3,
            step: 12,
            rec: 0.25,
            trans: 0.5,
            gan: 0.125,
            perce: 1.0,
            kl: 0.01,
            fda: 0.0,
            total: 0.51,
            d_loss: 0.4,
            val_psnr: 21.5,
            val_ssim: 0.6,
            val_symmetry: f64::NAN,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        append_history(&p, &row).unwrap();
        append_history(&p, &row).unwrap();
        let back = read_history(&p).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].step, 12);
        assert!((back[1].total - 0.51).abs() < 1e-12);
        assert!(back[0].val_symmetry.is_nan());
    }
}
