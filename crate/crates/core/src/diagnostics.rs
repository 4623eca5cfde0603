//! Per-step trajectory traces, matched-mean controls, and exports.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{SchedulerKind, SchedulerParams};
use crate::vecmath::LatentVector;

pub const CSV_HEADER: &str = "step,t,sigma,alignment,lambda_eff,state_norm";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step_index: usize,
    pub t: f64,
    pub sigma: f64,
    /// Cosine alignment used at this step; 0 when the rule computed none.
    pub alignment: f64,
    pub effective_scale: f64,
    /// Norm of the state after the step (for edits, distance from the source).
    pub state_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryTrace {
    pub run_id: String,
    pub scheduler: String,
    pub seed: u64,
    pub rows: Vec<TraceRow>,
    /// Final state of the run, when it completed.
    pub endpoint: Option<LatentVector>,
}

impl TrajectoryTrace {
    pub fn new(run_id: impl Into<String>, scheduler: impl Into<String>, seed: u64) -> Self {
        Self {
            run_id: run_id.into(),
            scheduler: scheduler.into(),
            seed,
            rows: Vec::new(),
            endpoint: None,
        }
    }

    /// Appends a row, enforcing the strictly decreasing step order.
    pub fn push(&mut self, row: TraceRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.step_index >= last.step_index {
                return Err(Error::Contract(format!(
                    "trace step {} does not follow step {}",
                    row.step_index, last.step_index
                )));
            }
        }
        if (row.sigma - (1.0 - row.t)).abs() > 1e-15 {
            return Err(Error::Contract(format!("sigma {} != 1 - t for t = {}", row.sigma, row.t)));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn scales(&self) -> impl Iterator<Item = f64> + '_ {
        self.rows.iter().map(|r| r.effective_scale)
    }
}

/// Running mean `m += (x - m) / k`; exact for constant sequences.
fn running_mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut mean = 0.0;
    let mut k = 0usize;
    for x in values {
        k += 1;
        mean += (x - mean) / k as f64;
    }
    (k > 0).then_some(mean)
}

pub fn mean_scale(trace: &TrajectoryTrace) -> Result<f64> {
    running_mean(trace.scales()).ok_or_else(|| Error::Contract("mean scale of an empty trace".into()))
}

/// Fixed-scale control whose constant scale equals the trace's mean scale.
pub fn matched_mean_params(trace: &TrajectoryTrace, base: &SchedulerParams) -> Result<SchedulerParams> {
    Ok(SchedulerParams {
        kind: SchedulerKind::Fixed,
        base_scale: mean_scale(trace)?,
        ..base.clone()
    })
}

/// Fixed-scale control at the mean over runs of each run's mean scale.
pub fn pooled_matched_mean_params(traces: &[&TrajectoryTrace], base: &SchedulerParams) -> Result<SchedulerParams> {
    let per_run = traces.iter().map(|t| mean_scale(t)).collect::<Result<Vec<f64>>>()?;
    let pooled = running_mean(per_run).ok_or_else(|| Error::Contract("no traces to match".into()))?;
    Ok(SchedulerParams {
        kind: SchedulerKind::Fixed,
        base_scale: pooled,
        ..base.clone()
    })
}

fn fmt_f64(x: f64) -> String {
    // `Debug` is the shortest string that parses back to the same value.
    format!("{x:?}")
}

pub fn trace_to_csv(trace: &TrajectoryTrace) -> String {
    let mut out = String::with_capacity(64 * (trace.rows.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in &trace.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.step_index,
            fmt_f64(r.t),
            fmt_f64(r.sigma),
            fmt_f64(r.alignment),
            fmt_f64(r.effective_scale),
            fmt_f64(r.state_norm)
        );
    }
    out
}

pub fn export_csv(trace: &TrajectoryTrace, path: &Path) -> Result<()> {
    fs::write(path, trace_to_csv(trace)).map_err(|e| Error::io(path, e))
}

/// Parses the rows of a file written by [`export_csv`].
pub fn parse_csv(text: &str) -> Result<Vec<TraceRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(CSV_HEADER) => {}
        other => {
            return Err(Error::Contract(format!("unexpected trace header {other:?}")));
        }
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = |what: &str| Error::Contract(format!("trace line {}: {what}", i + 2));
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 6 {
                return Err(bad("expected 6 fields"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
            Ok(TraceRow {
                step_index: fields[0].parse().map_err(|_| bad("bad step index"))?,
                t: num(fields[1])?,
                sigma: num(fields[2])?,
                alignment: num(fields[3])?,
                effective_scale: num(fields[4])?,
                state_norm: num(fields[5])?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointStats {
    pub n_endpoints: usize,
    /// Coordinate-wise mean of the final states.
    pub mean: Option<Vec<f64>>,
    pub norm_mean: Option<f64>,
    pub norm_min: Option<f64>,
    pub norm_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerSummary {
    pub scheduler: String,
    pub n_runs: usize,
    /// Mean over runs of each run's mean effective scale.
    pub lambda_mean: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub alignment_mean: f64,
    pub endpoint_stats: EndpointStats,
}

fn summarize_group(name: &str, traces: &[&TrajectoryTrace]) -> SchedulerSummary {
    let lambda_mean = running_mean(traces.iter().filter_map(|t| running_mean(t.scales()))).unwrap_or(0.0);
    let lambda_min = traces.iter().flat_map(|t| t.scales()).fold(f64::INFINITY, f64::min);
    let lambda_max = traces.iter().flat_map(|t| t.scales()).fold(f64::NEG_INFINITY, f64::max);
    let alignment_mean = running_mean(
        traces
            .iter()
            .filter_map(|t| running_mean(t.rows.iter().map(|r| r.alignment))),
    )
    .unwrap_or(0.0);

    let endpoints: Vec<&LatentVector> = traces.iter().filter_map(|t| t.endpoint.as_ref()).collect();
    let mean = endpoints.first().map(|first| {
        (0..first.dim())
            .map(|k| running_mean(endpoints.iter().map(|e| e.as_slice()[k])).unwrap_or(0.0))
            .collect()
    });
    let norms = || endpoints.iter().map(|e| e.norm());
    let endpoint_stats = EndpointStats {
        n_endpoints: endpoints.len(),
        mean,
        norm_mean: running_mean(norms()),
        norm_min: norms().reduce(f64::min),
        norm_max: norms().reduce(f64::max),
    };

    SchedulerSummary {
        scheduler: name.to_string(),
        n_runs: traces.len(),
        lambda_mean,
        lambda_min: if lambda_min.is_finite() { lambda_min } else { 0.0 },
        lambda_max: if lambda_max.is_finite() { lambda_max } else { 0.0 },
        alignment_mean,
        endpoint_stats,
    }
}

/// One aggregate per scheduler label, in order of first appearance.
pub fn summarize(traces: &[TrajectoryTrace]) -> Vec<SchedulerSummary> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<&TrajectoryTrace>> = HashMap::new();
    for t in traces {
        let entry = groups.entry(t.scheduler.as_str()).or_default();
        if entry.is_empty() {
            order.push(t.scheduler.as_str());
        }
        entry.push(t);
    }
    order.into_iter().map(|name| summarize_group(name, &groups[name])).collect()
}

pub fn export_summary_json(traces: &[TrajectoryTrace], path: &Path) -> Result<()> {
    let summary = summarize(traces);
    let mut text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn trace_with(scheduler: &str, scales: &[f64]) -> TrajectoryTrace {
        let n = scales.len() + 1;
        let mut trace = TrajectoryTrace::new("r", scheduler, 0);
        for (k, &s) in scales.iter().enumerate() {
            let i = n - k;
            let t = (i - 1) as f64 / (n - 1) as f64;
            trace
                .push(TraceRow {
                    step_index: i,
                    t,
                    sigma: 1.0 - t,
                    alignment: 0.5,
                    effective_scale: s,
                    state_norm: 1.0,
                })
                .unwrap();
        }
        trace
    }

    #[test]
    fn mean_scale_examples() {
        assert_eq!(mean_scale(&trace_with("fixed", &[7.0, 7.0, 7.0])).unwrap(), 7.0);
        assert_eq!(mean_scale(&trace_with("fixed", &[2.0, 4.0])).unwrap(), 3.0);
        assert!(matches!(mean_scale(&trace_with("fixed", &[])), Err(Error::Contract(_))));
        // Constant traces reproduce the constant exactly, even for inexact decimals.
        assert_eq!(mean_scale(&trace_with("fixed", &[0.1; 7])).unwrap(), 0.1);
    }

    #[test]
    fn matched_mean_reproduces_fixed() {
        let base = SchedulerParams::fixed(7.0);
        let p = matched_mean_params(&trace_with("fixed", &[7.0; 24]), &base).unwrap();
        assert_eq!(p, base);
        let vags = SchedulerParams::vags(7.0, 1.0);
        let p = matched_mean_params(&trace_with("vags", &[6.0, 8.0]), &vags).unwrap();
        assert_eq!(p.kind, SchedulerKind::Fixed);
        assert_eq!(p.base_scale, 7.0);
    }

    #[test]
    fn push_enforces_order_and_sigma() {
        let mut trace = TrajectoryTrace::new("r", "fixed", 0);
        let row = TraceRow {
            step_index: 3,
            t: 0.5,
            sigma: 0.5,
            alignment: 0.0,
            effective_scale: 1.0,
            state_norm: 0.0,
        };
        trace.push(row).unwrap();
        assert!(trace.push(row).is_err());
        assert!(trace.push(TraceRow { step_index: 2, sigma: 0.4, ..row }).is_err());
    }

    #[test]
    fn csv_shapes() {
        let empty = trace_with("fixed", &[]);
        assert_eq!(trace_to_csv(&empty), format!("{CSV_HEADER}\n"));
        let three = trace_with("fixed", &[1.0, 2.0, 3.0]);
        let text = trace_to_csv(&three);
        assert_eq!(text.lines().count(), 4);
        assert!(text.ends_with('\n'));
        assert_eq!(parse_csv(&text).unwrap(), three.rows);
    }

    #[test]
    fn csv_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        let trace = trace_with("vags", &[6.9, 7.3, 1e-300, 19.027972799213316]);
        export_csv(&trace, &path).unwrap();
        let back = parse_csv(&fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(back, trace.rows);
        let missing = dir.path().join("no/such/dir/trace.csv");
        assert!(matches!(export_csv(&trace, &missing), Err(Error::Io { .. })));
    }

    #[test]
    fn summary_examples() {
        let constant = trace_with("fixed", &[7.0, 7.0, 7.0]);
        let s = summarize(std::slice::from_ref(&constant));
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].lambda_min, s[0].lambda_max);
        assert_eq!(s[0].lambda_mean, s[0].lambda_min);

        let mut a = trace_with("vags", &[6.1, 7.7, 9.3]);
        a.endpoint = Some(LatentVector::new(vec![1.0, -2.0]).unwrap());
        let single = summarize(std::slice::from_ref(&a));
        let double = summarize(&[a.clone(), a.clone()]);
        assert_eq!(single[0].lambda_mean, double[0].lambda_mean);
        assert_eq!(single[0].lambda_min, double[0].lambda_min);
        assert_eq!(single[0].lambda_max, double[0].lambda_max);
        assert_eq!(single[0].alignment_mean, double[0].alignment_mean);
        assert_eq!(single[0].endpoint_stats.mean, double[0].endpoint_stats.mean);
        assert_eq!(double[0].n_runs, 2);

        let mixed = [
            trace_with("fixed", &[7.0]),
            trace_with("vags", &[7.0]),
            trace_with("fixed", &[7.0]),
            trace_with("monotone", &[7.0]),
        ];
        let s = summarize(&mixed);
        let names: Vec<&str> = s.iter().map(|x| x.scheduler.as_str()).collect();
        assert_eq!(names, ["fixed", "vags", "monotone"]);
        assert_eq!(s[0].n_runs, 2);
    }

    #[test]
    fn summary_json_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("summary.json");
        export_summary_json(&[trace_with("vags", &[6.0, 8.0])], &path).unwrap();
        let value: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        let entry = &value[0];
        for key in [
            "scheduler",
            "n_runs",
            "lambda_mean",
            "lambda_min",
            "lambda_max",
            "alignment_mean",
            "endpoint_stats",
        ] {
            assert!(entry.get(key).is_some(), "missing {key}");
        }
    }

    proptest! {
        #[test]
        fn csv_round_trip_lossless(values in proptest::collection::vec(proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO, 5)) {
            let row = TraceRow {
                step_index: 2,
                t: 0.25,
                sigma: 0.75,
                alignment: values[0],
                effective_scale: values[1],
                state_norm: values[2],
            };
            let mut trace = TrajectoryTrace::new("p", "x", 1);
            trace.push(row).unwrap();
            let back = parse_csv(&trace_to_csv(&trace)).unwrap();
            prop_assert_eq!(back[0].alignment.to_bits(), values[0].to_bits());
            prop_assert_eq!(back[0].effective_scale.to_bits(), values[1].to_bits());
            prop_assert_eq!(back[0].state_norm.to_bits(), values[2].to_bits());
        }
    }
}
