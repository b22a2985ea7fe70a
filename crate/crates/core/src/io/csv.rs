//! Training metrics stream: one CSV row per optimization step with a fixed
//! column set. Metrics that do not apply to a run (for example bit accuracy
//! during image hiding) are written as empty fields. Formatting goes through
//! the standard shortest-round-trip float `Display`, so two runs producing
//! the same numbers produce byte-identical files.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::Result;

pub const CSV_HEADER: &str = "step,loss_total,loss_rgb,loss_dec_pos,loss_dec_neg,psnr_render,psnr_hidden,ssim_hidden,bit_acc,mask_keep_frac";

/// One metrics row. Loss fields are always present; the quality metrics are
/// optional because they depend on payload kind and evaluation cadence.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub loss_total: f64,
    pub loss_rgb: f64,
    pub loss_dec_pos: f64,
    pub loss_dec_neg: f64,
    pub psnr_render: Option<f64>,
    pub psnr_hidden: Option<f64>,
    pub ssim_hidden: Option<f64>,
    pub bit_acc: Option<f64>,
    pub mask_keep_frac: Option<f64>,
}

impl MetricsRow {
    pub fn to_line(&self) -> String {
        let opt = |v: &Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.loss_total,
            self.loss_rgb,
            self.loss_dec_pos,
            self.loss_dec_neg,
            opt(&self.psnr_render),
            opt(&self.psnr_hidden),
            opt(&self.ssim_hidden),
            opt(&self.bit_acc),
            opt(&self.mask_keep_frac),
        )
    }
}

/// Append-only CSV writer that emits the header on creation.
pub struct MetricsLog {
    out: BufWriter<File>,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{CSV_HEADER}")?;
        Ok(MetricsLog { out })
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.out, "{}", row.to_line())?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}
