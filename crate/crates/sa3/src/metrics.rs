//! JSON-lines training metrics, one line per logging interval holding the
//! interval's mean losses.

use std::io::Write;

use sa3_core::train::LossBreakdown;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsLine {
    /// Iterations completed when the line was written.
    pub iter: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_rpn: f64,
    pub loss_det: f64,
    pub loss_dc: f64,
    pub loss_ic: f64,
    pub loss_cls: f64,
}

pub struct MetricsLog<W: Write> {
    out: W,
    interval: usize,
    acc: LossBreakdown,
    seen: usize,
}

impl<W: Write> MetricsLog<W> {
    pub fn new(out: W, interval: usize) -> Self {
        assert!(interval > 0, "logging interval must be positive");
        Self { out, interval, acc: LossBreakdown::default(), seen: 0 }
    }

    /// Records iteration `iter` (zero-based); emits a line when it closes
    /// an interval.
    pub fn record(&mut self, iter: usize, lr: f64, parts: &LossBreakdown) -> std::io::Result<Option<MetricsLine>> {
        let a = &mut self.acc;
        a.rpn += parts.rpn;
        a.det += parts.det;
        a.dc += parts.dc;
        a.ic += parts.ic;
        a.cls += parts.cls;
        a.total += parts.total;
        self.seen += 1;
        if !(iter + 1).is_multiple_of(self.interval) {
            return Ok(None);
        }
        let n = self.seen as f64;
        let line = MetricsLine {
            iter: iter + 1,
            lr,
            loss_total: a.total / n,
            loss_rpn: a.rpn / n,
            loss_det: a.det / n,
            loss_dc: a.dc / n,
            loss_ic: a.ic / n,
            loss_cls: a.cls / n,
        };
        writeln!(self.out, "{}", serde_json::to_string(&line).expect("metrics serialize"))?;
        self.acc = LossBreakdown::default();
        self.seen = 0;
        Ok(Some(line))
    }

    pub fn into_inner(mut self) -> std::io::Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}
