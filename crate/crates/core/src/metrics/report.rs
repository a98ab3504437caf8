use std::path::Path;

use crate::autograd::checkpoint::write_atomic;
use crate::error::{Error, Result};

/// One `(metric, category, value)` row of a metric report.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub metric: String,
    pub category: String,
    pub value: f64,
}

impl ReportRow {
    pub fn new(metric: &str, category: &str, value: f64) -> Self {
        ReportRow {
            metric: metric.to_string(),
            category: category.to_string(),
            value,
        }
    }
}

pub fn report_csv(rows: &[ReportRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["metric", "category", "value"])?;
    for r in rows {
        w.write_record([r.metric.as_str(), r.category.as_str(), &r.value.to_string()])?;
    }
    w.into_inner().map_err(|e| Error::Metric(e.to_string()))
}

pub fn write_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    write_atomic(path, &report_csv(rows)?)
}

/// `threshold,value` rows for a per-threshold curve.
pub fn curve_csv(thresholds: &[f64], values: &[f64]) -> Result<Vec<u8>> {
    if thresholds.len() != values.len() {
        return Err(Error::Metric(format!("{} thresholds for {} values", thresholds.len(), values.len())));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["threshold", "value"])?;
    for (t, v) in thresholds.iter().zip(values) {
        w.write_record([t.to_string(), v.to_string()])?;
    }
    w.into_inner().map_err(|e| Error::Metric(e.to_string()))
}
