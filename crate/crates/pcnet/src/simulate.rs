//! Deterministic synthetic scenario generator: constellations on a sphere,
//! static or polyline receiver trajectories, and forward-modeled
//! pseudoranges with clock bias, Gaussian noise, and elevation-dependent
//! NLOS biases. Everything is a pure function of the seed.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use thiserror::Error;

use crate::geodesy::{geodetic_to_ecef, EcefPosition, GeodeticPosition};
use crate::model::{
    elevation_azimuth, write_ground_truth, write_trace, Epoch, SatelliteMeasurement, Trace,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Model(#[from] crate::model::ModelError),
}

/// Receiver trajectory: fixed, or a constant-speed walk along waypoints.
#[derive(Debug, Clone, PartialEq)]
pub enum PathSpec {
    Static(GeodeticPosition),
    Polyline { waypoints: Vec<GeodeticPosition>, speed_mps: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub seed: u64,
    pub trace_id: String,
    pub num_satellites: usize,
    pub orbit_radius_m: f64,
    pub path: PathSpec,
    pub num_epochs: usize,
    pub cadence_ms: i64,
    pub noise_sigma_m: f64,
    pub nlos_probability: f64,
    /// Mean of the one-sided exponential NLOS bias, meters.
    pub nlos_bias_mean_m: f64,
    pub elevation_mask_deg: f64,
    pub cn0_zenith_dbhz: f64,
    pub cn0_horizon_dbhz: f64,
    pub cn0_nlos_penalty_dbhz: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            trace_id: "sim-0".into(),
            num_satellites: 10,
            orbit_radius_m: 2.656e7,
            path: PathSpec::Static(GeodeticPosition::new(37.4, -122.1, 30.0)),
            num_epochs: 60,
            cadence_ms: 1000,
            noise_sigma_m: 0.5,
            nlos_probability: 0.2,
            nlos_bias_mean_m: 15.0,
            elevation_mask_deg: 10.0,
            cn0_zenith_dbhz: 45.0,
            cn0_horizon_dbhz: 30.0,
            cn0_nlos_penalty_dbhz: 10.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let err = |m: String| Err(SimError::Config(m));
        if !(4..=32).contains(&self.num_satellites) {
            return err(format!("num_satellites {} outside [4, 32]", self.num_satellites));
        }
        if self.orbit_radius_m <= 7e6 {
            return err(format!("orbit_radius_m {} must exceed Earth radius", self.orbit_radius_m));
        }
        if self.num_epochs == 0 || self.cadence_ms <= 0 {
            return err("num_epochs and cadence_ms must be positive".into());
        }
        if self.noise_sigma_m < 0.0 || self.nlos_bias_mean_m <= 0.0 {
            return err("noise_sigma_m must be >= 0 and nlos_bias_mean_m > 0".into());
        }
        if !(0.0..=1.0).contains(&self.nlos_probability) {
            return err(format!("nlos_probability {} outside [0, 1]", self.nlos_probability));
        }
        if !(0.0..85.0).contains(&self.elevation_mask_deg) {
            return err(format!("elevation_mask_deg {} outside [0, 85)", self.elevation_mask_deg));
        }
        if let PathSpec::Polyline { waypoints, speed_mps } = &self.path {
            if waypoints.len() < 2 || *speed_mps <= 0.0 {
                return err("polyline needs >= 2 waypoints and positive speed".into());
            }
        }
        Ok(())
    }

    /// Parse a plain `key = value` config file (`#` comments allowed).
    /// Unknown keys are rejected so typos fail loudly.
    pub fn from_kv_file(path: &Path) -> Result<Self, SimError> {
        let text = fs::read_to_string(path)?;
        let mut c = Self::default();
        let mut lat = None;
        let mut lng = None;
        let mut height = None;
        let mut speed = None;
        let mut heading = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| SimError::Config(format!("line {}: expected key = value", idx + 1)))?;
            let key = key.trim();
            let value = value.trim();
            let bad = |e: &dyn std::fmt::Display| {
                SimError::Config(format!("line {}: bad value for {key}: {e}", idx + 1))
            };
            let f = |slot: &mut f64| -> Result<(), SimError> {
                *slot = value.parse().map_err(|e| bad(&e))?;
                Ok(())
            };
            match key {
                "seed" => c.seed = value.parse().map_err(|e| bad(&e))?,
                "trace_id" => c.trace_id = value.to_string(),
                "num_satellites" => c.num_satellites = value.parse().map_err(|e| bad(&e))?,
                "num_epochs" => c.num_epochs = value.parse().map_err(|e| bad(&e))?,
                "cadence_ms" => c.cadence_ms = value.parse().map_err(|e| bad(&e))?,
                "orbit_radius_m" => f(&mut c.orbit_radius_m)?,
                "noise_sigma_m" => f(&mut c.noise_sigma_m)?,
                "nlos_probability" => f(&mut c.nlos_probability)?,
                "nlos_bias_mean_m" => f(&mut c.nlos_bias_mean_m)?,
                "elevation_mask_deg" => f(&mut c.elevation_mask_deg)?,
                "cn0_zenith_dbhz" => f(&mut c.cn0_zenith_dbhz)?,
                "cn0_horizon_dbhz" => f(&mut c.cn0_horizon_dbhz)?,
                "cn0_nlos_penalty_dbhz" => f(&mut c.cn0_nlos_penalty_dbhz)?,
                "lat_deg" => lat = Some(value.parse().map_err(|e| bad(&e))?),
                "lng_deg" => lng = Some(value.parse().map_err(|e| bad(&e))?),
                "height_m" => height = Some(value.parse().map_err(|e| bad(&e))?),
                "speed_mps" => speed = Some(value.parse().map_err(|e| bad(&e))?),
                "heading_deg" => heading = Some(value.parse().map_err(|e| bad(&e))?),
                other => {
                    return Err(SimError::Config(format!("line {}: unknown key {other}", idx + 1)))
                }
            }
        }
        if lat.is_some() || lng.is_some() || height.is_some() {
            let start = GeodeticPosition::new(
                lat.unwrap_or(37.4),
                lng.unwrap_or(-122.1),
                height.unwrap_or(30.0),
            );
            c.path = match (speed, heading) {
                (Some(s), h) => {
                    // Straight constant-speed walk: offset the endpoint by the
                    // distance covered along the heading (small-angle degrees).
                    let total_s = (c.num_epochs as i64 * c.cadence_ms) as f64 / 1000.0;
                    let dist = s * total_s;
                    let hd = h.unwrap_or(0.0f64).to_radians();
                    let dlat = dist * hd.cos() / 111_132.0;
                    let dlng =
                        dist * hd.sin() / (111_320.0 * start.latitude.to_radians().cos());
                    let end = GeodeticPosition::new(
                        start.latitude + dlat,
                        start.longitude + dlng,
                        start.height,
                    );
                    PathSpec::Polyline { waypoints: vec![start, end], speed_mps: s }
                }
                (None, _) => PathSpec::Static(start),
            };
        }
        c.validate()?;
        Ok(c)
    }
}

/// Truth record aligned with the emitted trace, for oracles and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTruth {
    pub trace_id: String,
    /// Per epoch: true ECEF position and true receiver clock bias (meters).
    pub epochs: Vec<(i64, EcefPosition, f64)>,
    /// Per epoch, per satellite (trace order): applied bias and NLOS flag.
    pub biases: Vec<Vec<(f64, bool)>>,
}

fn receiver_at(path: &PathSpec, t_s: f64) -> GeodeticPosition {
    match path {
        PathSpec::Static(p) => *p,
        PathSpec::Polyline { waypoints, speed_mps } => {
            // Interpret waypoints on a local flat approximation: lengths from
            // equirectangular scaling, then linear interpolation.
            let mut remaining = speed_mps * t_s;
            for pair in waypoints.windows(2) {
                let (a, b) = (&pair[0], &pair[1]);
                let klat = 111_132.0;
                let klng = 111_320.0 * a.latitude.to_radians().cos();
                let seg = (((b.latitude - a.latitude) * klat).powi(2)
                    + ((b.longitude - a.longitude) * klng).powi(2)
                    + (b.height - a.height).powi(2))
                .sqrt();
                if remaining <= seg || seg == 0.0 {
                    let f = if seg == 0.0 { 0.0 } else { remaining / seg };
                    return GeodeticPosition::new(
                        a.latitude + f * (b.latitude - a.latitude),
                        a.longitude + f * (b.longitude - a.longitude),
                        a.height + f * (b.height - a.height),
                    );
                }
                remaining -= seg;
            }
            *waypoints.last().expect("validated non-empty")
        }
    }
}

/// Place `n` satellites on the sphere of `orbit_radius_m` (about the Earth
/// center), stratified in azimuth with jittered elevations above the mask
/// as seen from `rx`.
fn place_satellites(
    rx: &GeodeticPosition,
    n: usize,
    orbit_radius_m: f64,
    mask_deg: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<EcefPosition> {
    let rx_ecef = geodetic_to_ecef(rx);
    let r = crate::geodesy::ecef_to_ned_rotation(rx);
    // Stratified elevation ladder, shuffled so elevation is independent of
    // the azimuth slot: satellites cover low to high elevations in every
    // realization without a systematic azimuth-elevation coupling.
    let lo = mask_deg + 5.0;
    let mut ladder: Vec<f64> =
        (0..n).map(|i| lo + (82.0 - lo) * (i as f64 + 0.5) / n as f64).collect();
    use rand::seq::SliceRandom;
    ladder.shuffle(rng);
    (0..n)
        .map(|i| {
            let az = (360.0 * i as f64 / n as f64 + rng.gen_range(-10.0..10.0)).to_radians();
            let el = (ladder[i] + rng.gen_range(-3.0..3.0)).clamp(lo, 85.0).to_radians();
            // Unit direction rx -> satellite in NED, then to ECEF (R is
            // orthonormal, so ECEF = R^T * NED).
            let ned = [el.cos() * az.cos(), el.cos() * az.sin(), -el.sin()];
            let dir = EcefPosition::new(
                r[0][0] * ned[0] + r[1][0] * ned[1] + r[2][0] * ned[2],
                r[0][1] * ned[0] + r[1][1] * ned[1] + r[2][1] * ned[2],
                r[0][2] * ned[0] + r[1][2] * ned[1] + r[2][2] * ned[2],
            );
            // Distance along dir from the receiver to the orbit sphere:
            // |rx + t*dir| = orbit_radius_m, take the positive root.
            let b = 2.0 * (rx_ecef.x * dir.x + rx_ecef.y * dir.y + rx_ecef.z * dir.z);
            let c0 = rx_ecef.norm().powi(2) - orbit_radius_m * orbit_radius_m;
            let t = (-b + (b * b - 4.0 * c0).sqrt()) / 2.0;
            EcefPosition::new(rx_ecef.x + t * dir.x, rx_ecef.y + t * dir.y, rx_ecef.z + t * dir.z)
        })
        .collect()
}

/// Forward-model one trace. Reproducible bit-for-bit from the config seed.
pub fn gen_trace(config: &SimConfig) -> Result<(Trace, SimTruth), SimError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let start = receiver_at(&config.path, 0.0);
    let sats = place_satellites(
        &start,
        config.num_satellites,
        config.orbit_radius_m,
        config.elevation_mask_deg,
        &mut rng,
    );
    // Per-satellite constant broadcast clock offsets (already-known terms
    // that the correction step removes).
    let sat_clocks: Vec<f64> = (0..sats.len()).map(|_| rng.gen_range(-1e4..1e4)).collect();

    let clock0: f64 = rng.gen_range(-100.0..100.0);
    let clock_drift: f64 = rng.gen_range(-0.5..0.5);

    let noise = Normal::new(0.0, config.noise_sigma_m.max(1e-300))
        .map_err(|e| SimError::Config(e.to_string()))?;
    let nlos = Exp::new(1.0 / config.nlos_bias_mean_m)
        .map_err(|e| SimError::Config(e.to_string()))?;

    let mut epochs = Vec::with_capacity(config.num_epochs);
    let mut ground_truth = Vec::with_capacity(config.num_epochs);
    let mut truth_epochs = Vec::with_capacity(config.num_epochs);
    let mut truth_biases = Vec::with_capacity(config.num_epochs);

    for e in 0..config.num_epochs {
        let time_ms = e as i64 * config.cadence_ms;
        let t_s = time_ms as f64 / 1000.0;
        let rx_geo = receiver_at(&config.path, t_s);
        let rx_ecef = geodetic_to_ecef(&rx_geo);
        let clock = clock0 + clock_drift * t_s;

        let mut measurements = Vec::with_capacity(sats.len());
        let mut biases = Vec::with_capacity(sats.len());
        for (i, sat) in sats.iter().enumerate() {
            let (el, _az) = elevation_azimuth(sat, &rx_geo)?;
            let range = sat.sub(&rx_ecef).norm();
            let is_nlos = config.nlos_probability > 0.0
                && rng.gen_range(0.0..1.0) < config.nlos_probability;
            let bias = if is_nlos { nlos.sample(&mut rng) } else { 0.0 };
            let eps = if config.noise_sigma_m > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            biases.push((bias, is_nlos));

            // Mapping-function-ish delays the correction step removes again.
            let sinel = el.to_radians().sin().max(0.05);
            let iono = 4.0 / sinel;
            let tropo = 2.3 / sinel;
            let corrected = range + clock + bias + eps;
            let raw = corrected - sat_clocks[i] + iono + tropo;

            let cn0 = config.cn0_horizon_dbhz
                + (config.cn0_zenith_dbhz - config.cn0_horizon_dbhz) * el.to_radians().sin()
                - if is_nlos { config.cn0_nlos_penalty_dbhz } else { 0.0 };

            measurements.push(SatelliteMeasurement {
                sat_id: format!("G{:02}", i + 1),
                sat_pos: *sat,
                raw_pseudorange: raw,
                sat_clock_bias: sat_clocks[i],
                iono_delay: iono,
                tropo_delay: tropo,
                cn0,
                elevation: Some(el),
            });
        }
        epochs.push(Epoch { time_ms, measurements });
        ground_truth.push((time_ms, rx_geo));
        truth_epochs.push((time_ms, rx_ecef, clock));
        truth_biases.push(biases);
    }

    let trace = Trace { trace_id: config.trace_id.clone(), epochs, ground_truth };
    let truth = SimTruth { trace_id: config.trace_id.clone(), epochs: truth_epochs, biases: truth_biases };
    Ok((trace, truth))
}

/// Files written for one generated trace.
#[derive(Debug, Clone)]
pub struct CorpusEntry {
    pub trace_id: String,
    pub seed: u64,
    pub epochs_path: PathBuf,
    pub truth_path: PathBuf,
}

#[derive(Debug, Clone)]
pub struct CorpusManifest {
    pub entries: Vec<CorpusEntry>,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// SplitMix64; gives well-separated per-trace seeds from one master seed.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generate `num_traces` variants of `base` (derived seeds, trace ids
/// `<base id>-<index>`, start points jittered within ~0.1 degree) and write
/// them as canonical CSVs plus train/val/test trace lists.
pub fn gen_corpus(
    base: &SimConfig,
    num_traces: usize,
    split: (f64, f64, f64),
    out_dir: &Path,
) -> Result<CorpusManifest, SimError> {
    if num_traces == 0 {
        return Err(SimError::Config("num_traces must be positive".into()));
    }
    base.validate()?;
    fs::create_dir_all(out_dir)?;

    let mut entries = Vec::with_capacity(num_traces);
    for i in 0..num_traces {
        let seed = derive_seed(base.seed, i as u64);
        let mut jitter = ChaCha8Rng::seed_from_u64(seed ^ 0x6a17);
        let mut config = base.clone();
        config.seed = seed;
        config.trace_id = format!("{}-{i:03}", base.trace_id);
        // Keep all traces within one small region so a position-domain
        // correction generalizes across them.
        config.path = match &base.path {
            PathSpec::Static(p) => PathSpec::Static(GeodeticPosition::new(
                p.latitude + jitter.gen_range(-0.05..0.05),
                p.longitude + jitter.gen_range(-0.05..0.05),
                p.height + jitter.gen_range(-10.0..10.0),
            )),
            poly @ PathSpec::Polyline { .. } => poly.clone(),
        };

        let (trace, _) = gen_trace(&config)?;
        let epochs_path = out_dir.join(format!("{}_epochs.csv", config.trace_id));
        let truth_path = out_dir.join(format!("{}_truth.csv", config.trace_id));
        write_trace(&trace, &epochs_path)?;
        write_ground_truth(&trace, &truth_path)?;
        entries.push(CorpusEntry { trace_id: config.trace_id, seed, epochs_path, truth_path });
    }

    let n = entries.len();
    let n_train = (((n as f64) * split.0).round() as usize).clamp(1, n);
    let n_val = ((n as f64) * split.1).round() as usize;
    let ids: Vec<String> = entries.iter().map(|e| e.trace_id.clone()).collect();
    let train = ids[..n_train].to_vec();
    let val = ids[n_train..(n_train + n_val).min(n)].to_vec();
    let test = ids[(n_train + n_val).min(n)..].to_vec();
    for (name, list) in [("train", &train), ("val", &val), ("test", &test)] {
        fs::write(out_dir.join(format!("{name}_traces.txt")), list.join("\n") + "\n")?;
    }

    Ok(CorpusManifest { entries, train, val, test })
}
