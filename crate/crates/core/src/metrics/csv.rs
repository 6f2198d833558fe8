use serde::{Deserialize, Serialize};

pub const METRIC_CSV_HEADER: &str = "metric,scope_a,scope_b,value,seed,config_hash";

/// One metric measurement; `scope_a`/`scope_b` name what was compared
/// (clients, domains, corpora) and may be empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub scope_a: String,
    pub scope_b: String,
    pub value: f64,
    pub seed: u64,
    pub config_hash: String,
}

impl MetricRow {
    pub fn new(
        metric: &str,
        scope_a: impl ToString,
        scope_b: impl ToString,
        value: f64,
        seed: u64,
        config_hash: &str,
    ) -> Self {
        Self {
            metric: metric.to_string(),
            scope_a: scope_a.to_string(),
            scope_b: scope_b.to_string(),
            value,
            seed,
            config_hash: config_hash.to_string(),
        }
    }
}

/// Values are written with Rust's shortest round-trip float formatting, so
/// equal numbers always give equal bytes.
pub fn write_metric_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(METRIC_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.metric, r.scope_a, r.scope_b, r.value, r.seed, r.config_hash
        ));
    }
    out
}
