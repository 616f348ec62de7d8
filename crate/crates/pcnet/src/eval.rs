//! Metrics and reports: horizontal error via the inverse geodesic, the
//! p50/p95 score, per-axis NED error statistics with confidence intervals,
//! and method comparison with CSV/GeoJSON export.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::features::apply_correction;
use crate::geodesy::{
    ecef_to_geodetic, ecef_to_ned, vincenty_distance, EcefPosition, GeodesyError,
    GeodeticPosition, NedVector,
};
use crate::model::Trace;
use crate::pinet::{predict_correction, PiDnnModel};
use crate::solver::{kf_track, rwls_solve, wls_solve, KfConfig, SolverConfig};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty input")]
    EmptyInput,
    #[error("percentile {0} outside [0, 100]")]
    BadPercentile(f64),
    #[error("geodesy error: {0}")]
    Geodesy(#[from] GeodesyError),
    #[error("method {0} needs a trained model")]
    MissingModel(Method),
    #[error("unknown method: {0}")]
    UnknownMethod(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Wls,
    Rwls,
    Kf,
    PcDeepNet,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Wls, Method::Rwls, Method::Kf, Method::PcDeepNet];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Wls => "wls",
            Method::Rwls => "rwls",
            Method::Kf => "kf",
            Method::PcDeepNet => "pcdeepnet",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "wls" => Ok(Method::Wls),
            "rwls" => Ok(Method::Rwls),
            "kf" => Ok(Method::Kf),
            "pcdeepnet" => Ok(Method::PcDeepNet),
            other => Err(EvalError::UnknownMethod(other.to_string())),
        }
    }
}

/// Per-epoch errors of one trace under one method.
#[derive(Debug, Clone)]
pub struct ErrorSeries {
    pub trace_id: String,
    pub times_ms: Vec<i64>,
    /// Horizontal (geodesic, altitude-blind) error per epoch, meters.
    pub horizontal_m: Vec<f64>,
    /// Estimate-minus-truth error in the truth's local NED frame.
    pub ned: Vec<NedVector>,
}

/// Mean absolute error on one NED axis with its spread and 95% CI.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisStats {
    pub mae: f64,
    /// Standard deviation of the per-epoch absolute errors.
    pub std: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

#[derive(Debug, Clone)]
pub struct TraceReport {
    pub trace_id: String,
    pub p50_m: f64,
    pub p95_m: f64,
    /// Per-trace (p50 + p95) / 2.
    pub score_m: f64,
    pub north: AxisStats,
    pub east: AxisStats,
    pub down: AxisStats,
    /// Epochs the method could not solve (coast/skip).
    pub dropped_epochs: usize,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub method: Method,
    pub traces: Vec<TraceReport>,
    /// Mean of the per-trace scores.
    pub score_m: f64,
}

/// Geodesic distance over the ellipsoid between the horizontal projections
/// of the two points; heights are ignored entirely.
pub fn horizontal_error(
    est: &GeodeticPosition,
    gt: &GeodeticPosition,
) -> Result<f64, EvalError> {
    let a = GeodeticPosition::new(est.latitude, est.longitude, 0.0);
    let b = GeodeticPosition::new(gt.latitude, gt.longitude, 0.0);
    Ok(vincenty_distance(&a, &b)?)
}

/// Linear-interpolation percentile with the inclusive (C = 1) convention:
/// the p-th percentile sits at fractional index p/100 * (n - 1) of the
/// ascending-sorted values.
pub fn percentile(values: &[f64], p: f64) -> Result<f64, EvalError> {
    if values.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(EvalError::BadPercentile(p));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-NaN errors"));
    let idx = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = idx.floor() as usize;
    let hi = idx.ceil() as usize;
    let frac = idx - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

/// Mean over traces of the per-trace (p50 + p95) / 2 horizontal error.
pub fn score(traces: &[ErrorSeries]) -> Result<f64, EvalError> {
    if traces.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut total = 0.0;
    for t in traces {
        total += (percentile(&t.horizontal_m, 50.0)? + percentile(&t.horizontal_m, 95.0)?) / 2.0;
    }
    Ok(total / traces.len() as f64)
}

fn axis_stats(abs_errors: &[f64]) -> AxisStats {
    let k = abs_errors.len() as f64;
    let mae = abs_errors.iter().sum::<f64>() / k;
    let var = abs_errors.iter().map(|e| (e - mae) * (e - mae)).sum::<f64>() / k;
    let std = var.sqrt();
    let half = 1.96 * std / k.sqrt();
    AxisStats { mae, std, ci_lo: mae - half, ci_hi: mae + half }
}

/// Per-axis MAE of the NED errors, std of the absolute errors, and a
/// normal-approximation 95% CI on the absolute-error mean.
pub fn ned_errors(ned: &[NedVector]) -> Result<(AxisStats, AxisStats, AxisStats), EvalError> {
    if ned.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let abs = |f: fn(&NedVector) -> f64| -> Vec<f64> { ned.iter().map(|v| f(v).abs()).collect() };
    Ok((
        axis_stats(&abs(|v| v.north)),
        axis_stats(&abs(|v| v.east)),
        axis_stats(&abs(|v| v.down)),
    ))
}

/// Build the error series for estimated ECEF positions against the trace's
/// ground truth. Entries are (time_ms, estimate); epochs without a truth
/// match are skipped.
pub fn error_series(
    trace: &Trace,
    estimates: &[(i64, EcefPosition)],
) -> Result<ErrorSeries, EvalError> {
    let mut series = ErrorSeries {
        trace_id: trace.trace_id.clone(),
        times_ms: Vec::new(),
        horizontal_m: Vec::new(),
        ned: Vec::new(),
    };
    for (time_ms, est) in estimates {
        let Some(gt) = trace.ground_truth_at(*time_ms) else { continue };
        let est_geo = ecef_to_geodetic(est)?;
        series.times_ms.push(*time_ms);
        series.horizontal_m.push(horizontal_error(&est_geo, gt)?);
        series.ned.push(ecef_to_ned(est, gt));
    }
    if series.times_ms.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    Ok(series)
}

fn trace_report(series: &ErrorSeries, dropped: usize) -> Result<TraceReport, EvalError> {
    let p50 = percentile(&series.horizontal_m, 50.0)?;
    let p95 = percentile(&series.horizontal_m, 95.0)?;
    let (north, east, down) = ned_errors(&series.ned)?;
    Ok(TraceReport {
        trace_id: series.trace_id.clone(),
        p50_m: p50,
        p95_m: p95,
        score_m: (p50 + p95) / 2.0,
        north,
        east,
        down,
        dropped_epochs: dropped,
    })
}

/// Solve one trace with one method, returning per-epoch position estimates.
pub fn method_estimates(
    trace: &Trace,
    method: Method,
    solver: &SolverConfig,
    kf: &KfConfig,
    model: Option<&PiDnnModel>,
) -> Result<(Vec<(i64, EcefPosition)>, usize), EvalError> {
    let mut out = Vec::with_capacity(trace.epochs.len());
    let mut dropped = 0usize;
    match method {
        Method::Wls | Method::Rwls => {
            for epoch in &trace.epochs {
                let fix = match method {
                    Method::Wls => wls_solve(epoch, solver, None),
                    _ => rwls_solve(epoch, solver),
                };
                match fix {
                    Ok(f) if f.converged => out.push((epoch.time_ms, f.position)),
                    _ => dropped += 1,
                }
            }
        }
        Method::Kf => match kf_track(trace, solver, kf) {
            Ok(fixes) => {
                for (epoch, fix) in trace.epochs.iter().zip(&fixes) {
                    out.push((epoch.time_ms, fix.position));
                }
            }
            Err(_) => dropped = trace.epochs.len(),
        },
        Method::PcDeepNet => {
            let model = model.ok_or(EvalError::MissingModel(method))?;
            for epoch in &trace.epochs {
                let Ok(fix) = rwls_solve(epoch, solver) else {
                    dropped += 1;
                    continue;
                };
                match predict_correction(model, epoch, &fix) {
                    Ok(c) => out.push((epoch.time_ms, apply_correction(&fix.position, &c))),
                    Err(_) => dropped += 1,
                }
            }
        }
    }
    Ok((out, dropped))
}

/// Evaluate each requested method over the trace set. Returns one report
/// per method plus the raw per-method error series for export. Traces that
/// a method fails entirely are dropped from that method's report.
pub fn compare_methods(
    traces: &[Trace],
    methods: &[Method],
    solver: &SolverConfig,
    kf: &KfConfig,
    model: Option<&PiDnnModel>,
) -> Result<(Vec<EvalReport>, Vec<(Method, ErrorSeries)>), EvalError> {
    if traces.is_empty() || methods.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if methods.contains(&Method::PcDeepNet) && model.is_none() {
        return Err(EvalError::MissingModel(Method::PcDeepNet));
    }
    let mut reports = Vec::new();
    let mut all_series = Vec::new();
    for &method in methods {
        let mut trace_reports = Vec::new();
        let mut scores = Vec::new();
        for trace in traces {
            let (estimates, dropped) = method_estimates(trace, method, solver, kf, model)?;
            let Ok(series) = error_series(trace, &estimates) else { continue };
            let report = trace_report(&series, dropped)?;
            scores.push(report.score_m);
            trace_reports.push(report);
            all_series.push((method, series));
        }
        if trace_reports.is_empty() {
            continue;
        }
        let score_m = scores.iter().sum::<f64>() / scores.len() as f64;
        reports.push(EvalReport { method, traces: trace_reports, score_m });
    }
    Ok((reports, all_series))
}

pub const SUMMARY_COLUMNS: &str = "method,trace_id,p50_m,p95_m,score_m,\
mae_n_m,mae_e_m,mae_d_m,std_n_m,std_e_m,std_d_m,\
ci_lo_n_m,ci_hi_n_m,ci_lo_e_m,ci_hi_e_m,ci_lo_d_m,ci_hi_d_m";

/// One summary row per (method, trace).
pub fn write_summary_csv(reports: &[EvalReport], path: &Path) -> Result<(), EvalError> {
    let mut out = String::from(SUMMARY_COLUMNS);
    out.push('\n');
    for r in reports {
        for t in &r.traces {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.method,
                t.trace_id,
                t.p50_m,
                t.p95_m,
                t.score_m,
                t.north.mae,
                t.east.mae,
                t.down.mae,
                t.north.std,
                t.east.std,
                t.down.std,
                t.north.ci_lo,
                t.north.ci_hi,
                t.east.ci_lo,
                t.east.ci_hi,
                t.down.ci_lo,
                t.down.ci_hi,
            ));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Per-epoch error export: one row per (method, trace, epoch).
pub fn write_timeseries_csv(
    series: &[(Method, ErrorSeries)],
    path: &Path,
) -> Result<(), EvalError> {
    let mut out = String::from("trace_id,time_ms,method,horizontal_m,n_m,e_m,d_m\n");
    for (method, s) in series {
        for i in 0..s.times_ms.len() {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                s.trace_id,
                s.times_ms[i],
                method,
                s.horizontal_m[i],
                s.ned[i].north,
                s.ned[i].east,
                s.ned[i].down,
            ));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// GeoJSON LineString per (method, trace) plus the truth track, coordinates
/// in (longitude, latitude) order.
pub fn write_geojson(
    traces: &[Trace],
    estimates: &[(Method, String, Vec<(i64, EcefPosition)>)],
    path: &Path,
) -> Result<(), EvalError> {
    let mut features = Vec::new();
    let line = |props: String, coords: &[(f64, f64)]| {
        let pts: Vec<String> = coords.iter().map(|(lon, lat)| format!("[{lon},{lat}]")).collect();
        format!(
            "{{\"type\":\"Feature\",\"properties\":{props},\
             \"geometry\":{{\"type\":\"LineString\",\"coordinates\":[{}]}}}}",
            pts.join(",")
        )
    };
    for trace in traces {
        let coords: Vec<(f64, f64)> =
            trace.ground_truth.iter().map(|(_, g)| (g.longitude, g.latitude)).collect();
        features.push(line(
            format!("{{\"trace_id\":\"{}\",\"kind\":\"truth\"}}", trace.trace_id),
            &coords,
        ));
    }
    for (method, trace_id, ests) in estimates {
        let mut coords = Vec::with_capacity(ests.len());
        for (_, p) in ests {
            let g = ecef_to_geodetic(p)?;
            coords.push((g.longitude, g.latitude));
        }
        features.push(line(
            format!("{{\"trace_id\":\"{trace_id}\",\"kind\":\"estimate\",\"method\":\"{method}\"}}"),
            &coords,
        ));
    }
    let doc = format!(
        "{{\"type\":\"FeatureCollection\",\"features\":[{}]}}\n",
        features.join(",")
    );
    fs::write(path, doc)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodesy::geodetic_to_ecef;
    use crate::simulate::{gen_trace, SimConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn horizontal_error_basics() {
        let gt = GeodeticPosition::new(10.0, 20.0, 100.0);
        assert_eq!(horizontal_error(&gt, &gt).unwrap(), 0.0);
        // Height-only offset is invisible to the horizontal metric.
        let high = GeodeticPosition::new(10.0, 20.0, 900.0);
        assert_eq!(horizontal_error(&high, &gt).unwrap(), 0.0);
        // One degree of longitude on the equator.
        let a = GeodeticPosition::new(0.0, 0.0, 0.0);
        let b = GeodeticPosition::new(0.0, 1.0, 0.0);
        assert!((horizontal_error(&a, &b).unwrap() - 111319.4908).abs() < 1e-3);
    }

    #[test]
    fn percentile_interpolation() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 50.0).unwrap(), 50.5);
        assert_eq!(percentile(&v, 95.0).unwrap(), 95.05);
        assert_eq!(percentile(&v, 0.0).unwrap(), 1.0);
        assert_eq!(percentile(&v, 100.0).unwrap(), 100.0);
        assert_eq!(percentile(&[7.0; 9], 33.0).unwrap(), 7.0);
        assert!(matches!(percentile(&[], 50.0), Err(EvalError::EmptyInput)));
        assert!(matches!(percentile(&[1.0], 101.0), Err(EvalError::BadPercentile(_))));
    }

    fn series(id: &str, horizontal: Vec<f64>) -> ErrorSeries {
        let n = horizontal.len();
        ErrorSeries {
            trace_id: id.into(),
            times_ms: (0..n as i64).collect(),
            horizontal_m: horizontal,
            ned: vec![NedVector { north: 0.0, east: 0.0, down: 0.0 }; n],
        }
    }

    #[test]
    fn score_examples() {
        assert_eq!(score(&[series("a", vec![5.0; 10])]).unwrap(), 5.0);
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(score(&[series("a", v)]).unwrap(), 72.775);
        let two = [series("a", vec![4.0; 5]), series("b", vec![6.0; 5])];
        assert_eq!(score(&two).unwrap(), 5.0);
        assert!(matches!(score(&[]), Err(EvalError::EmptyInput)));
    }

    #[test]
    fn score_is_order_invariant_and_bracketed() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let v: Vec<f64> = (0..57).map(|_| rng.gen_range(0.0..20.0)).collect();
        let mut shuffled = v.clone();
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut rng);
        assert_eq!(
            score(&[series("a", v.clone())]).unwrap(),
            score(&[series("a", shuffled)]).unwrap()
        );
        let p50 = percentile(&v, 50.0).unwrap();
        let p95 = percentile(&v, 95.0).unwrap();
        let s = score(&[series("a", v)]).unwrap();
        assert!(p50 <= s && s <= p95);
    }

    #[test]
    fn ned_errors_against_statistics_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ned: Vec<NedVector> = (0..101)
            .map(|_| NedVector {
                north: rng.gen_range(-5.0..5.0),
                east: rng.gen_range(-5.0..5.0),
                down: rng.gen_range(-5.0..5.0),
            })
            .collect();
        let (n, _, _) = ned_errors(&ned).unwrap();
        // Independent recomputation of the north-axis statistics.
        let abs: Vec<f64> = ned.iter().map(|v| v.north.abs()).collect();
        let mean = abs.iter().sum::<f64>() / abs.len() as f64;
        let std =
            (abs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / abs.len() as f64).sqrt();
        assert!((n.mae - mean).abs() < 1e-9);
        assert!((n.std - std).abs() < 1e-9);
        assert!((n.ci_hi - n.ci_lo - 2.0 * 1.96 * std / (abs.len() as f64).sqrt()).abs() < 1e-9);
    }

    #[test]
    fn constant_north_offset_reports_exactly() {
        let ned = vec![NedVector { north: 3.0, east: 0.0, down: 0.0 }; 8];
        let (n, e, d) = ned_errors(&ned).unwrap();
        assert_eq!((n.mae, n.std), (3.0, 0.0));
        assert_eq!((n.ci_lo, n.ci_hi), (3.0, 3.0));
        assert_eq!((e.mae, d.mae), (0.0, 0.0));
    }

    #[test]
    fn ned_norm_matches_ecef_norm() {
        let gt = GeodeticPosition::new(48.1, 11.6, 500.0);
        let gt_ecef = geodetic_to_ecef(&gt);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let err = EcefPosition::new(
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
            );
            let est = gt_ecef.add(&err);
            let ned = ecef_to_ned(&est, &gt);
            assert!((ned.norm() - err.norm()).abs() / err.norm() < 1e-9);
        }
    }

    #[test]
    fn compare_methods_on_noiseless_trace() {
        let config = SimConfig {
            noise_sigma_m: 0.0,
            nlos_probability: 0.0,
            num_epochs: 8,
            ..Default::default()
        };
        let (trace, _) = gen_trace(&config).unwrap();
        let (reports, series) = compare_methods(
            &[trace],
            &[Method::Wls, Method::Rwls, Method::Kf],
            &SolverConfig::default(),
            &KfConfig::default(),
            None,
        )
        .unwrap();
        assert_eq!(reports.len(), 3);
        assert_eq!(series.len(), 3);
        for r in &reports {
            assert!(r.score_m < 1e-3, "{} score {}", r.method, r.score_m);
            assert_eq!(r.traces.len(), 1);
            assert!(r.traces[0].p50_m <= r.traces[0].p95_m);
        }
    }

    #[test]
    fn nlos_corpus_orders_wls_behind_rwls() {
        let mut traces = Vec::new();
        for seed in 0..6 {
            let config = SimConfig {
                seed,
                trace_id: format!("t{seed}"),
                num_epochs: 20,
                ..Default::default()
            };
            traces.push(gen_trace(&config).unwrap().0);
        }
        let (reports, _) = compare_methods(
            &traces,
            &[Method::Wls, Method::Rwls],
            &SolverConfig::default(),
            &KfConfig::default(),
            None,
        )
        .unwrap();
        assert!(reports[0].score_m >= reports[1].score_m);
    }

    #[test]
    fn pcdeepnet_without_model_is_an_error() {
        let (trace, _) = gen_trace(&SimConfig::default()).unwrap();
        assert!(matches!(
            compare_methods(
                &[trace],
                &[Method::PcDeepNet],
                &SolverConfig::default(),
                &KfConfig::default(),
                None
            ),
            Err(EvalError::MissingModel(Method::PcDeepNet))
        ));
    }

    #[test]
    fn csv_and_geojson_exports() {
        let dir = tempfile::TempDir::new().unwrap();
        let config = SimConfig { num_epochs: 6, ..Default::default() };
        let (trace, _) = gen_trace(&config).unwrap();
        let solver = SolverConfig::default();
        let kf = KfConfig::default();
        let (reports, series) =
            compare_methods(&[trace.clone()], &[Method::Wls, Method::Rwls], &solver, &kf, None)
                .unwrap();

        let summary = dir.path().join("summary.csv");
        write_summary_csv(&reports, &summary).unwrap();
        let text = fs::read_to_string(&summary).unwrap();
        assert!(text.starts_with(SUMMARY_COLUMNS));
        assert_eq!(text.lines().count(), 1 + 2); // header + methods x traces

        let ts = dir.path().join("timeseries.csv");
        write_timeseries_csv(&series, &ts).unwrap();
        assert_eq!(fs::read_to_string(&ts).unwrap().lines().count(), 1 + 2 * 6);

        let (ests, _) =
            method_estimates(&trace, Method::Wls, &solver, &kf, None).unwrap();
        let gj = dir.path().join("tracks.geojson");
        write_geojson(&[trace], &[(Method::Wls, "sim-0".into(), ests)], &gj).unwrap();
        let doc = fs::read_to_string(&gj).unwrap();
        assert!(doc.contains("\"FeatureCollection\""));
        assert!(doc.contains("\"kind\":\"truth\""));
        assert!(doc.contains("\"method\":\"wls\""));
    }
}
