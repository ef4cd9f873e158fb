//! Synthetic worlds and evaluation metrics.

mod metrics;
mod wishart;
mod world;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub use metrics::{ari, matched_error};
pub use wishart::{equicorrelation, sample_wishart};
pub use world::{
    generate_separated_world, generate_world, GeneratedWorld, ObservedVariables, ScaleMatrix,
    ScenarioConfig, SeparatedConfig, VariableRole, WorldRoles,
};

/// One line of a metrics report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub replicate: usize,
    pub scenario: String,
    pub method: String,
    pub ari: f64,
    pub error: f64,
    #[serde(rename = "H_selected")]
    pub h_selected: usize,
}

/// Metrics report CSV with a header row. Floats are written in their
/// shortest round-trip form so reruns compare byte for byte.
pub fn write_metrics_csv<W: Write>(writer: W, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["replicate", "scenario", "method", "ari", "error", "H_selected"])?;
    for r in rows {
        w.write_record([
            r.replicate.to_string(),
            r.scenario.clone(),
            r.method.clone(),
            format!("{:?}", r.ari),
            format!("{:?}", r.error),
            r.h_selected.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_csv_layout() {
        let rows = vec![MetricsRow {
            replicate: 0,
            scenario: "1.a".into(),
            method: "varSel".into(),
            ari: 0.1,
            error: 1.0 / 3.0,
            h_selected: 2,
        }];
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &rows).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "replicate,scenario,method,ari,error,H_selected\n0,1.a,varSel,0.1,0.3333333333333333,2\n"
        );
    }
}
