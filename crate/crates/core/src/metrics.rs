//! Per-step training metrics CSV.
//!
//! Columns: `step,wallclock,loss,nll_eval,isr_running`. `wallclock` is
//! elapsed seconds; `nll_eval` is empty except on evaluation steps;
//! `isr_running` is the analytic idle-step ratio of the run's sampler
//! configuration.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::Result;

pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "step,wallclock,loss,nll_eval,isr_running")?;
        Ok(Self { out })
    }

    pub fn append(
        &mut self,
        step: usize,
        wallclock: f64,
        loss: f64,
        nll_eval: Option<f64>,
        isr_running: f64,
    ) -> Result<()> {
        let nll = nll_eval.map(|v| format!("{v:.6}")).unwrap_or_default();
        writeln!(
            self.out,
            "{step},{wallclock:.3},{loss:.6},{nll},{isr_running:.6}"
        )?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}
