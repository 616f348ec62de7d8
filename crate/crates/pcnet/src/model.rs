//! Canonical data model for traces, epochs, and per-satellite measurements,
//! pseudorange correction, CSV ingestion/emission, and the adapter for the
//! Google Android GNSS "derived" file layout.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::geodesy::{
    ecef_to_ned_rotation, geodetic_to_ecef, EcefPosition, GeodeticPosition,
};

pub const MIN_PSEUDORANGE_M: f64 = 1e7;
pub const MAX_PSEUDORANGE_M: f64 = 5e7;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid measurement: {0}")]
    InvalidMeasurement(String),
    #[error("parse error at {path}:{line}: {message}")]
    ParseError { path: String, line: usize, message: String },
    #[error("schema error in {path}: missing columns {missing:?}")]
    SchemaError { path: String, missing: Vec<String> },
    #[error("ground truth alignment error: {0}")]
    AlignmentError(String),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// One per-satellite pseudorange observation at an epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct SatelliteMeasurement {
    /// Constellation + PRN, e.g. "G05".
    pub sat_id: String,
    /// Satellite antenna position at transmit time.
    pub sat_pos: EcefPosition,
    pub raw_pseudorange: f64,
    /// Additive satellite clock correction, c * dt_s, meters.
    pub sat_clock_bias: f64,
    /// Ionospheric path delay, meters (positive, subtracted).
    pub iono_delay: f64,
    /// Tropospheric path delay, meters (positive, subtracted).
    pub tropo_delay: f64,
    /// Carrier-to-noise-density ratio, dB-Hz.
    pub cn0: f64,
    /// Elevation in degrees when supplied by the dataset; computed otherwise.
    pub elevation: Option<f64>,
}

/// Pseudorange after satellite clock / iono / tropo compensation. What
/// remains unknown in it is the receiver clock bias plus residual errors.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectedPseudorange {
    pub sat_id: String,
    pub value: f64,
    pub sat_pos: EcefPosition,
    pub cn0: f64,
    pub elevation: Option<f64>,
}

/// One receiver timestamp and its set of concurrent measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct Epoch {
    /// GPS milliseconds since the GPS epoch.
    pub time_ms: i64,
    pub measurements: Vec<SatelliteMeasurement>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub trace_id: String,
    pub epochs: Vec<Epoch>,
    /// Ground truth aligned by exact timestamp, when available.
    pub ground_truth: Vec<(i64, GeodeticPosition)>,
}

impl Trace {
    pub fn ground_truth_at(&self, time_ms: i64) -> Option<&GeodeticPosition> {
        self.ground_truth
            .iter()
            .find(|(t, _)| *t == time_ms)
            .map(|(_, g)| g)
    }
}

/// Apply satellite clock, ionospheric, and tropospheric compensation.
pub fn correct_pseudorange(
    m: &SatelliteMeasurement,
) -> Result<CorrectedPseudorange, ModelError> {
    let value = m.raw_pseudorange + m.sat_clock_bias - m.iono_delay - m.tropo_delay;
    if !(MIN_PSEUDORANGE_M..MAX_PSEUDORANGE_M).contains(&value) {
        return Err(ModelError::InvalidMeasurement(format!(
            "corrected pseudorange {value} m for {} outside ({MIN_PSEUDORANGE_M}, {MAX_PSEUDORANGE_M})",
            m.sat_id
        )));
    }
    Ok(CorrectedPseudorange {
        sat_id: m.sat_id.clone(),
        value,
        sat_pos: m.sat_pos,
        cn0: m.cn0,
        elevation: m.elevation,
    })
}

/// Elevation and azimuth of a satellite as seen from a geodetic receiver
/// position; elevation in [-90, 90], azimuth in [0, 360).
pub fn elevation_azimuth(
    sat_pos: &EcefPosition,
    rx: &GeodeticPosition,
) -> Result<(f64, f64), ModelError> {
    let rx_ecef = geodetic_to_ecef(rx);
    let d = sat_pos.sub(&rx_ecef);
    let range = d.norm();
    if range < 1e-9 {
        return Err(ModelError::DegenerateGeometry(
            "satellite coincident with receiver".into(),
        ));
    }
    let r = ecef_to_ned_rotation(rx);
    let north = (r[0][0] * d.x + r[0][1] * d.y + r[0][2] * d.z) / range;
    let east = (r[1][0] * d.x + r[1][1] * d.y + r[1][2] * d.z) / range;
    let down = (r[2][0] * d.x + r[2][1] * d.y + r[2][2] * d.z) / range;
    let elevation = (-down).asin().to_degrees();
    let mut azimuth = east.atan2(north).to_degrees();
    if azimuth < 0.0 {
        azimuth += 360.0;
    }
    if azimuth >= 360.0 {
        azimuth -= 360.0;
    }
    Ok((elevation, azimuth))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceFormat {
    CanonicalCsv,
    GsdcDerived,
}

impl std::str::FromStr for TraceFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "canonical_csv" => Ok(Self::CanonicalCsv),
            "gsdc_derived" => Ok(Self::GsdcDerived),
            other => Err(format!("unknown trace format '{other}'")),
        }
    }
}

pub const CANONICAL_EPOCH_COLUMNS: [&str; 12] = [
    "trace_id", "time_ms", "sat_id", "sat_x_m", "sat_y_m", "sat_z_m", "raw_pr_m",
    "sat_clk_m", "iono_m", "tropo_m", "cn0_dbhz", "elevation_deg",
];

pub const CANONICAL_TRUTH_COLUMNS: [&str; 5] =
    ["trace_id", "time_ms", "lat_deg", "lng_deg", "height_m"];

/// Column mapping from the Google Android GNSS dataset's derived files onto
/// the canonical schema. Kept in one place so dataset-specific names never
/// leak into the rest of the crate.
const GSDC_EPOCH_COLUMNS: [(&str, &str); 10] = [
    ("millisSinceGpsEpoch", "time_ms"),
    ("svid", "sat_id"),
    ("constellationType", "sat_id"),
    ("xSatPosM", "sat_x_m"),
    ("ySatPosM", "sat_y_m"),
    ("zSatPosM", "sat_z_m"),
    ("rawPrM", "raw_pr_m"),
    ("satClkBiasM", "sat_clk_m"),
    ("ionoDelayM", "iono_m"),
    ("tropoDelayM", "tropo_m"),
];

/// GSDC constellationType codes; only GPS passes the default filter.
fn constellation_letter(code: i64) -> char {
    match code {
        1 => 'G', // GPS
        3 => 'R', // GLONASS
        4 => 'Q', // QZSS
        5 => 'B', // BeiDou
        6 => 'E', // Galileo
        _ => 'U',
    }
}

/// Ingestion statistics: measurements dropped for missing cn0 or satellite
/// position, and non-GPS measurements filtered out.
#[derive(Debug, Default, Clone, Copy)]
pub struct LoadStats {
    pub dropped_measurements: usize,
    pub filtered_constellation: usize,
}

pub struct LoadOptions {
    /// Keep only GPS ("G…") satellites; the default.
    pub gps_only: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { gps_only: true }
    }
}

fn get_field(
    record: &csv::StringRecord,
    idx: usize,
    path: &str,
    line: usize,
) -> Result<String, ModelError> {
    record
        .get(idx)
        .map(|s| s.trim().to_string())
        .ok_or_else(|| ModelError::ParseError {
            path: path.into(),
            line,
            message: format!("missing field {idx}"),
        })
}

fn parse_f64(s: &str, path: &str, line: usize, col: &str) -> Result<f64, ModelError> {
    s.parse::<f64>().map_err(|_| ModelError::ParseError {
        path: path.into(),
        line,
        message: format!("cannot parse '{s}' as number in column {col}"),
    })
}

fn parse_i64(s: &str, path: &str, line: usize, col: &str) -> Result<i64, ModelError> {
    s.parse::<i64>().map_err(|_| ModelError::ParseError {
        path: path.into(),
        line,
        message: format!("cannot parse '{s}' as integer in column {col}"),
    })
}

fn header_index(
    headers: &csv::StringRecord,
    required: &[&str],
    path: &str,
) -> Result<BTreeMap<String, usize>, ModelError> {
    let map: BTreeMap<String, usize> = headers
        .iter()
        .enumerate()
        .map(|(i, h)| (h.trim().to_string(), i))
        .collect();
    let missing: Vec<String> = required
        .iter()
        .filter(|c| !map.contains_key(**c))
        .map(|c| c.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(ModelError::SchemaError { path: path.into(), missing });
    }
    Ok(map)
}

/// Load a trace from an epochs CSV plus an optional ground-truth CSV.
///
/// Epochs are grouped by timestamp and measurements sorted by sat_id — a
/// canonical order for reproducibility; the downstream model is
/// order-insensitive by construction.
pub fn load_trace(
    epochs_path: &Path,
    truth_path: Option<&Path>,
    format: TraceFormat,
    options: &LoadOptions,
) -> Result<(Trace, LoadStats), ModelError> {
    let mut stats = LoadStats::default();
    let path_str = epochs_path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(epochs_path)?;

    let headers = reader.headers()?.clone();
    if headers.is_empty() || headers.iter().all(str::is_empty) {
        return Err(ModelError::ParseError {
            path: path_str,
            line: 1,
            message: "empty file".into(),
        });
    }

    let mut trace_id: Option<String> = None;
    let mut by_time: BTreeMap<i64, Vec<SatelliteMeasurement>> = BTreeMap::new();

    match format {
        TraceFormat::CanonicalCsv => {
            let idx = header_index(&headers, &CANONICAL_EPOCH_COLUMNS, &path_str)?;
            for (line0, record) in reader.records().enumerate() {
                let line = line0 + 2;
                let record = record?;
                let field = |col: &str| get_field(&record, idx[col], &path_str, line);
                let tid = field("trace_id")?;
                match &trace_id {
                    None => trace_id = Some(tid),
                    Some(existing) if *existing != tid => {
                        return Err(ModelError::ParseError {
                            path: path_str.clone(),
                            line,
                            message: format!("multiple trace ids in one file: {existing} vs {tid}"),
                        })
                    }
                    _ => {}
                }
                let time_ms = parse_i64(&field("time_ms")?, &path_str, line, "time_ms")?;
                let sat_id = field("sat_id")?;
                let elev_raw = field("elevation_deg")?;
                let m = SatelliteMeasurement {
                    sat_id,
                    sat_pos: EcefPosition::new(
                        parse_f64(&field("sat_x_m")?, &path_str, line, "sat_x_m")?,
                        parse_f64(&field("sat_y_m")?, &path_str, line, "sat_y_m")?,
                        parse_f64(&field("sat_z_m")?, &path_str, line, "sat_z_m")?,
                    ),
                    raw_pseudorange: parse_f64(&field("raw_pr_m")?, &path_str, line, "raw_pr_m")?,
                    sat_clock_bias: parse_f64(&field("sat_clk_m")?, &path_str, line, "sat_clk_m")?,
                    iono_delay: parse_f64(&field("iono_m")?, &path_str, line, "iono_m")?,
                    tropo_delay: parse_f64(&field("tropo_m")?, &path_str, line, "tropo_m")?,
                    cn0: parse_f64(&field("cn0_dbhz")?, &path_str, line, "cn0_dbhz")?,
                    elevation: if elev_raw.is_empty() {
                        None
                    } else {
                        Some(parse_f64(&elev_raw, &path_str, line, "elevation_deg")?)
                    },
                };
                if options.gps_only && !m.sat_id.starts_with('G') {
                    stats.filtered_constellation += 1;
                    continue;
                }
                if m.cn0 == 0.0 || !m.sat_pos.is_finite() || m.sat_pos.norm() == 0.0 {
                    stats.dropped_measurements += 1;
                    continue;
                }
                by_time.entry(time_ms).or_default().push(m);
            }
        }
        TraceFormat::GsdcDerived => {
            let required: Vec<&str> = GSDC_EPOCH_COLUMNS.iter().map(|(g, _)| *g).collect();
            let idx = header_index(&headers, &required, &path_str)?;
            let cn0_idx = headers.iter().position(|h| h.trim() == "cn0DbHz");
            let elev_idx = headers.iter().position(|h| h.trim() == "svElevationDegrees");
            for (line0, record) in reader.records().enumerate() {
                let line = line0 + 2;
                let record = record?;
                let field = |col: &str| get_field(&record, idx[col], &path_str, line);
                let time_ms =
                    parse_i64(&field("millisSinceGpsEpoch")?, &path_str, line, "millisSinceGpsEpoch")?;
                let svid = parse_i64(&field("svid")?, &path_str, line, "svid")?;
                let cons =
                    parse_i64(&field("constellationType")?, &path_str, line, "constellationType")?;
                let sat_id = format!("{}{:02}", constellation_letter(cons), svid);
                let cn0 = match cn0_idx {
                    Some(i) => parse_f64(&get_field(&record, i, &path_str, line)?, &path_str, line, "cn0DbHz")?,
                    None => 0.0,
                };
                let elevation = match elev_idx {
                    Some(i) => {
                        let raw = get_field(&record, i, &path_str, line)?;
                        if raw.is_empty() {
                            None
                        } else {
                            Some(parse_f64(&raw, &path_str, line, "svElevationDegrees")?)
                        }
                    }
                    None => None,
                };
                let m = SatelliteMeasurement {
                    sat_id,
                    sat_pos: EcefPosition::new(
                        parse_f64(&field("xSatPosM")?, &path_str, line, "xSatPosM")?,
                        parse_f64(&field("ySatPosM")?, &path_str, line, "ySatPosM")?,
                        parse_f64(&field("zSatPosM")?, &path_str, line, "zSatPosM")?,
                    ),
                    raw_pseudorange: parse_f64(&field("rawPrM")?, &path_str, line, "rawPrM")?,
                    sat_clock_bias: parse_f64(&field("satClkBiasM")?, &path_str, line, "satClkBiasM")?,
                    iono_delay: parse_f64(&field("ionoDelayM")?, &path_str, line, "ionoDelayM")?,
                    tropo_delay: parse_f64(&field("tropoDelayM")?, &path_str, line, "tropoDelayM")?,
                    cn0,
                    elevation,
                };
                if options.gps_only && !m.sat_id.starts_with('G') {
                    stats.filtered_constellation += 1;
                    continue;
                }
                if m.cn0 == 0.0 || !m.sat_pos.is_finite() || m.sat_pos.norm() == 0.0 {
                    stats.dropped_measurements += 1;
                    continue;
                }
                by_time.entry(time_ms).or_default().push(m);
            }
            if trace_id.is_none() {
                // GSDC derived files carry the trace identity in the path.
                trace_id = epochs_path
                    .file_stem()
                    .map(|s| s.to_string_lossy().to_string());
            }
        }
    }

    let trace_id = trace_id.unwrap_or_else(|| "unknown".to_string());
    let mut epochs = Vec::with_capacity(by_time.len());
    for (time_ms, mut measurements) in by_time {
        measurements.sort_by(|a, b| a.sat_id.cmp(&b.sat_id));
        measurements.dedup_by(|a, b| a.sat_id == b.sat_id);
        epochs.push(Epoch { time_ms, measurements });
    }

    let ground_truth = match truth_path {
        Some(tp) => load_ground_truth(tp, format, &trace_id)?,
        None => Vec::new(),
    };
    if !ground_truth.is_empty() {
        for e in &epochs {
            if !ground_truth.iter().any(|(t, _)| *t == e.time_ms) {
                return Err(ModelError::AlignmentError(format!(
                    "no ground truth for epoch {} of trace {trace_id}",
                    e.time_ms
                )));
            }
        }
    }

    Ok((Trace { trace_id, epochs, ground_truth }, stats))
}

fn load_ground_truth(
    path: &Path,
    format: TraceFormat,
    trace_id: &str,
) -> Result<Vec<(i64, GeodeticPosition)>, ModelError> {
    let path_str = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();

    let (time_col, lat_col, lng_col, h_col, tid_col): (&str, &str, &str, &str, Option<&str>) =
        match format {
            TraceFormat::CanonicalCsv => {
                header_index(&headers, &CANONICAL_TRUTH_COLUMNS, &path_str)?;
                ("time_ms", "lat_deg", "lng_deg", "height_m", Some("trace_id"))
            }
            TraceFormat::GsdcDerived => {
                header_index(
                    &headers,
                    &["millisSinceGpsEpoch", "latDeg", "lngDeg", "heightAboveWgs84EllipsoidM"],
                    &path_str,
                )?;
                ("millisSinceGpsEpoch", "latDeg", "lngDeg", "heightAboveWgs84EllipsoidM", None)
            }
        };

    let idx: BTreeMap<String, usize> = headers
        .iter()
        .enumerate()
        .map(|(i, h)| (h.trim().to_string(), i))
        .collect();

    let mut out = Vec::new();
    for (line0, record) in reader.records().enumerate() {
        let line = line0 + 2;
        let record = record?;
        if let Some(tc) = tid_col {
            let tid = get_field(&record, idx[tc], &path_str, line)?;
            if tid != trace_id {
                continue;
            }
        }
        let t = parse_i64(&get_field(&record, idx[time_col], &path_str, line)?, &path_str, line, time_col)?;
        let lat = parse_f64(&get_field(&record, idx[lat_col], &path_str, line)?, &path_str, line, lat_col)?;
        let lng = parse_f64(&get_field(&record, idx[lng_col], &path_str, line)?, &path_str, line, lng_col)?;
        let h = parse_f64(&get_field(&record, idx[h_col], &path_str, line)?, &path_str, line, h_col)?;
        out.push((t, GeodeticPosition::new(lat, lng, h)));
    }
    out.sort_by_key(|(t, _)| *t);
    Ok(out)
}

/// Emit a trace in the canonical epochs CSV schema; `load_trace` of the
/// output reproduces the trace field for field.
pub fn write_trace(trace: &Trace, epochs_path: &Path) -> Result<(), ModelError> {
    let mut f = File::create(epochs_path)?;
    writeln!(f, "{}", CANONICAL_EPOCH_COLUMNS.join(","))?;
    for e in &trace.epochs {
        for m in &e.measurements {
            let elev = m.elevation.map(|v| format!("{v:.9}")).unwrap_or_default();
            writeln!(
                f,
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.3},{}",
                trace.trace_id,
                e.time_ms,
                m.sat_id,
                m.sat_pos.x,
                m.sat_pos.y,
                m.sat_pos.z,
                m.raw_pseudorange,
                m.sat_clock_bias,
                m.iono_delay,
                m.tropo_delay,
                m.cn0,
                elev,
            )?;
        }
    }
    Ok(())
}

/// Emit ground truth in the canonical schema (appends nothing for traces
/// without truth).
pub fn write_ground_truth(trace: &Trace, path: &Path) -> Result<(), ModelError> {
    let mut f = File::create(path)?;
    writeln!(f, "{}", CANONICAL_TRUTH_COLUMNS.join(","))?;
    for (t, g) in &trace.ground_truth {
        writeln!(
            f,
            "{},{},{:.10},{:.10},{:.4}",
            trace.trace_id, t, g.latitude, g.longitude, g.height
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodesy::{geodetic_to_ecef, GeodeticPosition};

    fn sample_measurement() -> SatelliteMeasurement {
        SatelliteMeasurement {
            sat_id: "G05".into(),
            sat_pos: EcefPosition::new(2.0e7, 1.0e7, 1.2e7),
            raw_pseudorange: 2.2e7,
            sat_clock_bias: 0.0,
            iono_delay: 0.0,
            tropo_delay: 0.0,
            cn0: 40.0,
            elevation: None,
        }
    }

    #[test]
    fn correct_pseudorange_identity() {
        let m = sample_measurement();
        assert_eq!(correct_pseudorange(&m).unwrap().value, 2.2e7);
    }

    #[test]
    fn correct_pseudorange_signs() {
        let mut m = sample_measurement();
        m.sat_clock_bias = 30.0;
        m.iono_delay = 5.0;
        m.tropo_delay = 2.5;
        let c = correct_pseudorange(&m).unwrap();
        assert!((c.value - (2.2e7 + 22.5)).abs() < 1e-9);
    }

    #[test]
    fn correct_pseudorange_range_guard() {
        let mut m = sample_measurement();
        m.iono_delay = 1.5e7;
        assert!(matches!(
            correct_pseudorange(&m),
            Err(ModelError::InvalidMeasurement(_))
        ));
    }

    #[test]
    fn elevation_zenith_and_horizon() {
        let rx = GeodeticPosition::new(10.0, 20.0, 0.0);
        let rx_ecef = geodetic_to_ecef(&rx);
        // Directly overhead: scale the receiver's position vector outward
        // along the local up axis (by construction: ellipsoid normal).
        let r = crate::geodesy::ecef_to_ned_rotation(&rx);
        let up = EcefPosition::new(-r[2][0], -r[2][1], -r[2][2]);
        let overhead = EcefPosition::new(
            rx_ecef.x + up.x * 2.0e7,
            rx_ecef.y + up.y * 2.0e7,
            rx_ecef.z + up.z * 2.0e7,
        );
        let (el, _az) = elevation_azimuth(&overhead, &rx).unwrap();
        assert!((el - 90.0).abs() < 1e-6, "el = {el}");

        // On the local horizon plane: displace along north.
        let north = EcefPosition::new(r[0][0], r[0][1], r[0][2]);
        let horizon = EcefPosition::new(
            rx_ecef.x + north.x * 2.0e7,
            rx_ecef.y + north.y * 2.0e7,
            rx_ecef.z + north.z * 2.0e7,
        );
        let (el, az) = elevation_azimuth(&horizon, &rx).unwrap();
        assert!(el.abs() < 1e-9, "el = {el}");
        assert!(az.abs() < 1e-9 || (az - 360.0).abs() < 1e-9, "az = {az}");
    }

    #[test]
    fn elevation_degenerate_coincident() {
        let rx = GeodeticPosition::new(0.0, 0.0, 0.0);
        let p = geodetic_to_ecef(&rx);
        assert!(elevation_azimuth(&p, &rx).is_err());
    }

    #[test]
    fn empty_file_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        std::fs::write(&path, "").unwrap();
        let res = load_trace(&path, None, TraceFormat::CanonicalCsv, &LoadOptions::default());
        assert!(res.is_err());
    }

    #[test]
    fn canonical_round_trip() {
        let trace = Trace {
            trace_id: "t1".into(),
            epochs: vec![
                Epoch {
                    time_ms: 1000,
                    measurements: vec![
                        SatelliteMeasurement { sat_id: "G02".into(), ..sample_measurement() },
                        SatelliteMeasurement { sat_id: "G11".into(), elevation: Some(42.5), ..sample_measurement() },
                    ],
                },
                Epoch {
                    time_ms: 2000,
                    measurements: vec![sample_measurement()],
                },
            ],
            ground_truth: vec![
                (1000, GeodeticPosition::new(37.5, -122.25, 12.0)),
                (2000, GeodeticPosition::new(37.6, -122.26, 12.5)),
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let ep = dir.path().join("epochs.csv");
        let gp = dir.path().join("truth.csv");
        write_trace(&trace, &ep).unwrap();
        write_ground_truth(&trace, &gp).unwrap();
        let (loaded, stats) =
            load_trace(&ep, Some(&gp), TraceFormat::CanonicalCsv, &LoadOptions::default()).unwrap();
        assert_eq!(stats.dropped_measurements, 0);
        assert_eq!(loaded.trace_id, trace.trace_id);
        assert_eq!(loaded.epochs.len(), 2);
        assert_eq!(loaded.epochs[0].measurements.len(), 2);
        assert_eq!(loaded.epochs[0].measurements[0].sat_id, "G02");
        assert_eq!(loaded.ground_truth.len(), 2);
        for (a, b) in loaded.epochs.iter().zip(&trace.epochs) {
            assert_eq!(a.time_ms, b.time_ms);
            for (ma, mb) in a.measurements.iter().zip(&b.measurements) {
                assert_eq!(ma.sat_id, mb.sat_id);
                assert!((ma.raw_pseudorange - mb.raw_pseudorange).abs() < 1e-6);
                assert_eq!(ma.elevation.is_some(), mb.elevation.is_some());
            }
        }
    }

    #[test]
    fn gsdc_adapter_matches_canonical() {
        let dir = tempfile::tempdir().unwrap();
        let gsdc = dir.path().join("derived.csv");
        std::fs::write(
            &gsdc,
            "millisSinceGpsEpoch,svid,constellationType,xSatPosM,ySatPosM,zSatPosM,rawPrM,satClkBiasM,ionoDelayM,tropoDelayM,cn0DbHz\n\
             1000,5,1,20000000.0,10000000.0,12000000.0,22000000.0,30.0,5.0,2.5,40.0\n\
             1000,7,6,20000000.0,10000000.0,12000000.0,22000000.0,30.0,5.0,2.5,40.0\n",
        )
        .unwrap();
        let (trace, stats) =
            load_trace(&gsdc, None, TraceFormat::GsdcDerived, &LoadOptions::default()).unwrap();
        assert_eq!(stats.filtered_constellation, 1); // the Galileo row
        assert_eq!(trace.epochs.len(), 1);
        assert_eq!(trace.epochs[0].measurements.len(), 1);
        let m = &trace.epochs[0].measurements[0];
        assert_eq!(m.sat_id, "G05");
        assert_eq!(m.raw_pseudorange, 22000000.0);
        assert_eq!(m.sat_clock_bias, 30.0);
    }

    #[test]
    fn misaligned_ground_truth_is_error() {
        let trace = Trace {
            trace_id: "t1".into(),
            epochs: vec![Epoch { time_ms: 1000, measurements: vec![sample_measurement()] }],
            ground_truth: vec![(999, GeodeticPosition::new(0.0, 0.0, 0.0))],
        };
        let dir = tempfile::tempdir().unwrap();
        let ep = dir.path().join("epochs.csv");
        let gp = dir.path().join("truth.csv");
        write_trace(&trace, &ep).unwrap();
        write_ground_truth(&trace, &gp).unwrap();
        let res = load_trace(&ep, Some(&gp), TraceFormat::CanonicalCsv, &LoadOptions::default());
        assert!(matches!(res, Err(ModelError::AlignmentError(_))));
    }
}
