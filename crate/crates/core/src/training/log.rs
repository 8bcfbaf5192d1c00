//! Line-delimited JSON training log.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: usize,
    pub stage: String,
    #[serde(rename = "L_recon")]
    pub l_recon: f64,
    pub bits_y: f64,
    pub bits_z: f64,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    pub psnr_val: Option<f64>,
}

/// Keeps every record in memory and optionally mirrors it to a file.
#[derive(Default)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    sink: Option<(String, BufWriter<File>)>,
    /// Every n-th record goes to the `log` facade; 0 silences it.
    pub echo_every: usize,
}

impl TrainLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            sink: Some((path.display().to_string(), BufWriter::new(f))),
            ..Self::default()
        })
    }

    pub fn push(&mut self, r: LogRecord) -> Result<()> {
        if let Some((path, w)) = &mut self.sink {
            let line = serde_json::to_string(&r)?;
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(&*path, e))?;
        }
        if self.echo_every > 0 && (r.iter.is_multiple_of(self.echo_every) || r.psnr_val.is_some()) {
            log::info!(
                "{} {:>6}  recon {:.5}  bits {:.0}+{:.0}  total {:.5}{}",
                r.stage,
                r.iter,
                r.l_recon,
                r.bits_y,
                r.bits_z,
                r.l_total,
                r.psnr_val
                    .map(|p| format!("  psnr {p:.2}"))
                    .unwrap_or_default()
            );
        }
        self.records.push(r);
        Ok(())
    }

    pub fn stage(&self, stage: &str) -> impl Iterator<Item = &LogRecord> {
        let stage = stage.to_string();
        self.records.iter().filter(move |r| r.stage == stage)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_has_the_expected_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.jsonl");
        let mut log = TrainLog::to_file(&p).unwrap();
        let rec = LogRecord {
            iter: 3,
            stage: "joint".into(),
            l_recon: 0.5,
            bits_y: 900.0,
            bits_z: 100.0,
            l_total: 1.5,
            psnr_val: None,
        };
        log.push(rec.clone()).unwrap();
        drop(log);
        let text = std::fs::read_to_string(&p).unwrap();
        let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in [
            "iter", "stage", "L_recon", "bits_y", "bits_z", "L_total", "psnr_val",
        ] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(serde_json::from_value::<LogRecord>(v).unwrap(), rec);
    }
}
