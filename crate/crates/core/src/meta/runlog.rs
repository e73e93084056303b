use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One training step. Metric columns are empty except on evaluation steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub loss: f64,
    pub psnr_train: Option<f64>,
    pub psnr_test: Option<f64>,
    pub ssim_test: Option<f64>,
    pub seconds: f64,
}

/// Append-only training record.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunLog {
    rows: Vec<LogRow>,
}

impl RunLog {
    pub fn push(&mut self, row: LogRow) {
        self.rows.push(row);
    }

    pub fn rows(&self) -> &[LogRow] {
        &self.rows
    }

    pub fn last_mut(&mut self) -> Option<&mut LogRow> {
        self.rows.last_mut()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.rows.is_empty() {
            w.write_record(["step", "loss", "psnr_train", "psnr_test", "ssim_test", "seconds"])
                .expect("in-memory write");
        }
        for r in &self.rows {
            w.serialize(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is UTF-8")
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<LogRow>, _>>()
            .map_err(|e| Error::contract(format!("run log: {e}")))?;
        Ok(RunLog { rows })
    }
}
