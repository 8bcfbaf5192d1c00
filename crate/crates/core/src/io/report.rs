//! Rate-distortion tables from a set of compressed rate points.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bitstream::breakdown::MemoryBreakdown;
use crate::error::{Error, Result};

/// One finished compression run.
#[derive(Clone, Debug)]
pub struct RatePoint {
    pub label: String,
    pub lambda: f64,
    pub appearance_channels: usize,
    pub psnr: f64,
    pub breakdown: MemoryBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdRow {
    pub label: String,
    pub lambda: f64,
    pub channels: usize,
    pub bytes: u64,
    pub psnr: f64,
    pub header: u64,
    pub planes: u64,
    pub decoder_head: u64,
    pub mlp: u64,
    pub residual: u64,
    pub side_info: u64,
}

impl RdRow {
    fn from_point(p: &RatePoint) -> Self {
        let group = |name: &str| {
            p.breakdown
                .groups
                .iter()
                .find(|g| g.group == name)
                .map_or(0, |g| g.bytes)
        };
        Self {
            label: p.label.clone(),
            lambda: p.lambda,
            channels: p.appearance_channels,
            bytes: p.breakdown.container_bytes,
            psnr: p.psnr,
            header: p.breakdown.header_bytes,
            planes: group("planes"),
            decoder_head: group("decoder_head"),
            mlp: group("mlp"),
            residual: group("residual"),
            side_info: group("side_info"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdTable {
    pub rows: Vec<RdRow>,
}

/// Rows sorted by container size; ties keep their input order.
pub fn rd_report(points: &[RatePoint]) -> Result<RdTable> {
    if points.len() < 2 {
        return Err(Error::Input(format!(
            "an RD table needs at least 2 rate points, got {}",
            points.len()
        )));
    }
    let mut rows: Vec<RdRow> = points.iter().map(RdRow::from_point).collect();
    rows.sort_by_key(|r| r.bytes);
    Ok(RdTable { rows })
}

impl RdTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)
                .map_err(|e| Error::Input(format!("csv: {e}")))?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Input(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let rows = csv::Reader::from_reader(text.as_bytes())
            .deserialize()
            .collect::<std::result::Result<Vec<RdRow>, _>>()
            .map_err(|e| Error::Load(format!("csv: {e}")))?;
        Ok(Self { rows })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes `.csv` or `.json` by extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => self.to_json()?,
            _ => self.to_csv()?,
        };
        super::archive::write_atomic(path, text.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitstream::breakdown::GroupRow;

    fn point(label: &str, bytes: [u64; 5]) -> RatePoint {
        let names = ["planes", "decoder_head", "mlp", "residual", "side_info"];
        let groups = names
            .iter()
            .zip(bytes)
            .map(|(&group, b)| GroupRow {
                group,
                bytes: b,
                original_bytes: 4 * b,
                ratio: 4.0,
            })
            .collect();
        RatePoint {
            label: label.into(),
            lambda: 1e-3,
            appearance_channels: 24,
            psnr: 30.0,
            breakdown: MemoryBreakdown {
                container_bytes: 60 + bytes.iter().sum::<u64>(),
                header_bytes: 60,
                rows: Vec::new(),
                groups,
                plane_ratio: 4.0,
            },
        }
    }

    #[test]
    fn rows_are_sorted_with_component_columns() {
        let t = rd_report(&[
            point("big", [900, 10, 10, 10, 10]),
            point("small", [100, 10, 10, 10, 10]),
        ])
        .unwrap();
        assert_eq!(
            t.rows.iter().map(|r| r.label.as_str()).collect::<Vec<_>>(),
            ["small", "big"]
        );
        let r = &t.rows[1];
        assert_eq!(
            (r.planes, r.decoder_head, r.side_info, r.header),
            (900, 10, 10, 60)
        );
        assert_eq!(
            r.bytes,
            r.header + r.planes + r.decoder_head + r.mlp + r.residual + r.side_info
        );
        assert!(t.rows.iter().all(|r| r.bytes > 0));
    }

    #[test]
    fn duplicated_run_gives_identical_rows() {
        let p = point("a", [10, 20, 30, 40, 50]);
        let t = rd_report(&[p.clone(), p]).unwrap();
        assert_eq!(t.rows[0], t.rows[1]);
    }

    #[test]
    fn one_point_is_rejected() {
        assert!(matches!(
            rd_report(&[point("a", [1; 5])]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn csv_roundtrip_and_header() {
        let t = rd_report(&[point("a,b", [1, 2, 3, 4, 5]), point("c", [9, 2, 3, 4, 5])]).unwrap();
        let text = t.to_csv().unwrap();
        assert!(text.starts_with("label,lambda,channels,bytes,psnr,"));
        assert_eq!(RdTable::from_csv(&text).unwrap(), t);
        let dir = tempfile::tempdir().unwrap();
        t.save(&dir.path().join("rd.json")).unwrap();
        let back: RdTable =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("rd.json")).unwrap())
                .unwrap();
        assert_eq!(back, t);
    }
}
