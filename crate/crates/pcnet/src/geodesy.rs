//! WGS-84 coordinate transforms (ECEF, geodetic, local NED) and the
//! Vincenty inverse geodesic distance used for horizontal-error scoring.

use thiserror::Error;

/// WGS-84 semi-major axis (m).
pub const WGS84_A: f64 = 6_378_137.0;
/// WGS-84 flattening.
pub const WGS84_F: f64 = 1.0 / 298.257_223_563;
/// WGS-84 semi-minor axis (m).
pub const WGS84_B: f64 = WGS84_A * (1.0 - WGS84_F);
/// First eccentricity squared.
pub const WGS84_E2: f64 = WGS84_F * (2.0 - WGS84_F);

#[derive(Debug, Error, PartialEq)]
pub enum GeodesyError {
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("vincenty iteration did not converge (nearly antipodal points)")]
    NonConvergence,
}

/// Earth-centered Earth-fixed position, meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EcefPosition {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl EcefPosition {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn sub(&self, o: &EcefPosition) -> EcefPosition {
        EcefPosition::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }

    pub fn add(&self, o: &EcefPosition) -> EcefPosition {
        EcefPosition::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Geodetic position on the WGS-84 ellipsoid.
///
/// Latitude in degrees within [-90, 90], longitude in degrees within
/// (-180, 180], height in meters above the ellipsoid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeodeticPosition {
    pub latitude: f64,
    pub longitude: f64,
    pub height: f64,
}

impl GeodeticPosition {
    pub fn new(latitude: f64, longitude: f64, height: f64) -> Self {
        Self { latitude, longitude, height }
    }
}

/// Local North-East-Down vector, meters, relative to a reference point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NedVector {
    pub north: f64,
    pub east: f64,
    pub down: f64,
}

impl NedVector {
    pub fn norm(&self) -> f64 {
        (self.north * self.north + self.east * self.east + self.down * self.down).sqrt()
    }
}

/// Prime-vertical radius of curvature at geodetic latitude (radians).
fn prime_vertical_radius(sin_lat: f64) -> f64 {
    WGS84_A / (1.0 - WGS84_E2 * sin_lat * sin_lat).sqrt()
}

/// Closed-form geodetic to ECEF transform on WGS-84.
pub fn geodetic_to_ecef(g: &GeodeticPosition) -> EcefPosition {
    let lat = g.latitude.to_radians();
    let lon = g.longitude.to_radians();
    let (sin_lat, cos_lat) = lat.sin_cos();
    let (sin_lon, cos_lon) = lon.sin_cos();
    let n = prime_vertical_radius(sin_lat);
    EcefPosition {
        x: (n + g.height) * cos_lat * cos_lon,
        y: (n + g.height) * cos_lat * sin_lon,
        z: (n * (1.0 - WGS84_E2) + g.height) * sin_lat,
    }
}

/// ECEF to geodetic via Bowring's first approximation followed by Newton
/// refinement of the latitude equation. Sub-micrometer round-trip accuracy.
pub fn ecef_to_geodetic(p: &EcefPosition) -> Result<GeodeticPosition, GeodesyError> {
    let rho = (p.x * p.x + p.y * p.y).sqrt();
    if rho < 1.0 && p.z.abs() < 1.0 {
        return Err(GeodesyError::DegenerateGeometry(
            "point too close to Earth's center".into(),
        ));
    }
    let lon = if rho > 0.0 { p.y.atan2(p.x) } else { 0.0 };

    // Bowring's parametric-latitude starting value.
    let e2p = WGS84_E2 / (1.0 - WGS84_E2);
    let beta = (p.z * WGS84_A).atan2(rho * WGS84_B);
    let (sb, cb) = beta.sin_cos();
    let mut lat = (p.z + e2p * WGS84_B * sb * sb * sb).atan2(rho - WGS84_E2 * WGS84_A * cb * cb * cb);

    // Refine with the fixed point lat = atan2(z + e2 N sin(lat), rho),
    // which contracts rapidly from the Bowring start.
    for _ in 0..5 {
        let sl = lat.sin();
        let n = prime_vertical_radius(sl);
        let new_lat = (p.z + WGS84_E2 * n * sl).atan2(rho);
        if (new_lat - lat).abs() < 1e-15 {
            lat = new_lat;
            break;
        }
        lat = new_lat;
    }
    let (sl, cl) = lat.sin_cos();
    let n = prime_vertical_radius(sl);
    let height = if cl.abs() > 1e-8 {
        rho / cl - n
    } else {
        p.z.abs() / sl.abs() - n * (1.0 - WGS84_E2)
    };

    let mut lon_deg = lon.to_degrees();
    if lon_deg <= -180.0 {
        lon_deg += 360.0;
    }
    Ok(GeodeticPosition::new(lat.to_degrees(), lon_deg, height))
}

/// Row-major ECEF->NED rotation at a geodetic reference point.
pub fn ecef_to_ned_rotation(reference: &GeodeticPosition) -> [[f64; 3]; 3] {
    let lat = reference.latitude.to_radians();
    let lon = reference.longitude.to_radians();
    let (sl, cl) = lat.sin_cos();
    let (so, co) = lon.sin_cos();
    [
        [-sl * co, -sl * so, cl],
        [-so, co, 0.0],
        [-cl * co, -cl * so, -sl],
    ]
}

/// Rotate the offset from a geodetic reference into the local NED frame.
pub fn ecef_to_ned(p: &EcefPosition, reference: &GeodeticPosition) -> NedVector {
    let origin = geodetic_to_ecef(reference);
    let d = p.sub(&origin);
    let r = ecef_to_ned_rotation(reference);
    NedVector {
        north: r[0][0] * d.x + r[0][1] * d.y + r[0][2] * d.z,
        east: r[1][0] * d.x + r[1][1] * d.y + r[1][2] * d.z,
        down: r[2][0] * d.x + r[2][1] * d.y + r[2][2] * d.z,
    }
}

/// Vincenty inverse geodesic distance on the WGS-84 ellipsoid.
///
/// Iterates the longitude-difference equation to 1e-12 with a 200-iteration
/// cap; nearly antipodal pairs that fail to converge return
/// [`GeodesyError::NonConvergence`] rather than a silent fallback.
pub fn vincenty_distance(a: &GeodeticPosition, b: &GeodeticPosition) -> Result<f64, GeodesyError> {
    const TOL: f64 = 1e-12;
    const MAX_ITER: usize = 200;

    // Canonical argument order makes the swap symmetry exact in floating
    // point, not just to one ulp of the distance.
    let (a, b) = if (a.latitude, a.longitude) <= (b.latitude, b.longitude) {
        (a, b)
    } else {
        (b, a)
    };

    let lat1 = a.latitude.to_radians();
    let lat2 = b.latitude.to_radians();
    let dlon = (b.longitude - a.longitude).to_radians();

    if (lat1 - lat2).abs() < 1e-15 && dlon.abs() < 1e-15 {
        return Ok(0.0);
    }

    // Reduced latitudes.
    let u1 = ((1.0 - WGS84_F) * lat1.tan()).atan();
    let u2 = ((1.0 - WGS84_F) * lat2.tan()).atan();
    let (su1, cu1) = u1.sin_cos();
    let (su2, cu2) = u2.sin_cos();

    let mut lambda = dlon;
    let mut iter = 0;
    let (sin_sigma, cos_sigma, sigma, cos_sq_alpha, cos_2sigma_m) = loop {
        let (sl, cl) = lambda.sin_cos();
        let sin_sigma = ((cu2 * sl).powi(2) + (cu1 * su2 - su1 * cu2 * cl).powi(2)).sqrt();
        if sin_sigma == 0.0 {
            return Ok(0.0); // coincident points
        }
        let cos_sigma = su1 * su2 + cu1 * cu2 * cl;
        let sigma = sin_sigma.atan2(cos_sigma);
        let sin_alpha = cu1 * cu2 * sl / sin_sigma;
        let cos_sq_alpha = 1.0 - sin_alpha * sin_alpha;
        let cos_2sigma_m = if cos_sq_alpha.abs() > 0.0 {
            cos_sigma - 2.0 * su1 * su2 / cos_sq_alpha
        } else {
            0.0 // equatorial line
        };
        let c = WGS84_F / 16.0 * cos_sq_alpha * (4.0 + WGS84_F * (4.0 - 3.0 * cos_sq_alpha));
        let new_lambda = dlon
            + (1.0 - c)
                * WGS84_F
                * sin_alpha
                * (sigma
                    + c * sin_sigma
                        * (cos_2sigma_m + c * cos_sigma * (-1.0 + 2.0 * cos_2sigma_m * cos_2sigma_m)));
        let delta = (new_lambda - lambda).abs();
        lambda = new_lambda;
        iter += 1;
        if delta < TOL {
            break (sin_sigma, cos_sigma, sigma, cos_sq_alpha, cos_2sigma_m);
        }
        if iter >= MAX_ITER {
            return Err(GeodesyError::NonConvergence);
        }
    };

    let u_sq = cos_sq_alpha * (WGS84_A * WGS84_A - WGS84_B * WGS84_B) / (WGS84_B * WGS84_B);
    let big_a =
        1.0 + u_sq / 16384.0 * (4096.0 + u_sq * (-768.0 + u_sq * (320.0 - 175.0 * u_sq)));
    let big_b = u_sq / 1024.0 * (256.0 + u_sq * (-128.0 + u_sq * (74.0 - 47.0 * u_sq)));
    let delta_sigma = big_b
        * sin_sigma
        * (cos_2sigma_m
            + big_b / 4.0
                * (cos_sigma * (-1.0 + 2.0 * cos_2sigma_m * cos_2sigma_m)
                    - big_b / 6.0
                        * cos_2sigma_m
                        * (-3.0 + 4.0 * sin_sigma * sin_sigma)
                        * (-3.0 + 4.0 * cos_2sigma_m * cos_2sigma_m)));

    Ok(WGS84_B * big_a * (sigma - delta_sigma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn equator_prime_meridian_on_semi_major_axis() {
        let p = geodetic_to_ecef(&GeodeticPosition::new(0.0, 0.0, 0.0));
        assert!((p.x - WGS84_A).abs() < 1e-9);
        assert!(p.y.abs() < 1e-9);
        assert!(p.z.abs() < 1e-9);
    }

    #[test]
    fn pole_on_semi_minor_axis() {
        let p = geodetic_to_ecef(&GeodeticPosition::new(90.0, 0.0, 0.0));
        assert!(p.x.abs() < 1e-6);
        assert!(p.y.abs() < 1e-6);
        assert!((p.z - 6_356_752.314_245).abs() < 1e-6);
    }

    #[test]
    fn ecef_to_geodetic_trivial_points() {
        let g = ecef_to_geodetic(&EcefPosition::new(WGS84_A, 0.0, 0.0)).unwrap();
        assert!(g.latitude.abs() < 1e-9);
        assert!(g.longitude.abs() < 1e-9);
        assert!(g.height.abs() < 1e-6);

        let g = ecef_to_geodetic(&EcefPosition::new(0.0, WGS84_A, 0.0)).unwrap();
        assert!(g.latitude.abs() < 1e-9);
        assert!((g.longitude - 90.0).abs() < 1e-9);
        assert!(g.height.abs() < 1e-6);
    }

    #[test]
    fn ecef_to_geodetic_degenerate_center() {
        assert!(matches!(
            ecef_to_geodetic(&EcefPosition::new(0.5, 0.5, 0.5)),
            Err(GeodesyError::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn ned_self_reference_is_zero() {
        let r = GeodeticPosition::new(37.4, -122.1, 30.0);
        let n = ecef_to_ned(&geodetic_to_ecef(&r), &r);
        assert!(n.norm() < 1e-9);
    }

    #[test]
    fn ned_up_displacement_maps_to_negative_down() {
        let r = GeodeticPosition::new(0.0, 0.0, 0.0);
        let n = ecef_to_ned(&EcefPosition::new(WGS84_A + 100.0, 0.0, 0.0), &r);
        assert!(n.north.abs() < 1e-9);
        assert!(n.east.abs() < 1e-9);
        assert!((n.down + 100.0).abs() < 1e-9);
    }

    #[test]
    fn ned_east_displacement_at_origin() {
        let r = GeodeticPosition::new(0.0, 0.0, 0.0);
        let n = ecef_to_ned(&EcefPosition::new(WGS84_A, 1000.0, 0.0), &r);
        assert!(n.north.abs() < 1e-6);
        assert!((n.east - 1000.0).abs() < 1e-6);
        assert!(n.down.abs() < 1e-3); // curvature-free rotation, small down residual only from frame origin
    }

    #[test]
    fn vincenty_identity() {
        let g = GeodeticPosition::new(12.3, 45.6, 0.0);
        assert_eq!(vincenty_distance(&g, &g).unwrap(), 0.0);
    }

    #[test]
    fn vincenty_one_degree_on_equator() {
        let a = GeodeticPosition::new(0.0, 0.0, 0.0);
        let b = GeodeticPosition::new(0.0, 1.0, 0.0);
        let d = vincenty_distance(&a, &b).unwrap();
        // equator is an exact geodesic: arc = a * pi/180
        assert!((d - 111_319.490_8).abs() < 1e-3, "d = {d}");
    }

    #[test]
    fn vincenty_nearly_antipodal_fails_loudly() {
        let a = GeodeticPosition::new(0.0, 0.0, 0.0);
        let b = GeodeticPosition::new(0.5, 179.7, 0.0);
        match vincenty_distance(&a, &b) {
            Err(GeodesyError::NonConvergence) => {}
            Ok(d) => assert!(d.is_finite() && d > 1.9e7),
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    proptest! {
        #[test]
        fn geodetic_ecef_round_trip(
            lat in -89.9f64..89.9,
            lon in -179.9f64..180.0,
            h in -5_000.0f64..40_000.0,
        ) {
            let g = GeodeticPosition::new(lat, lon, h);
            let p = geodetic_to_ecef(&g);
            let g2 = ecef_to_geodetic(&p).unwrap();
            let p2 = geodetic_to_ecef(&g2);
            prop_assert!((p.x - p2.x).abs() < 1e-6);
            prop_assert!((p.y - p2.y).abs() < 1e-6);
            prop_assert!((p.z - p2.z).abs() < 1e-6);
        }

        #[test]
        fn vincenty_symmetry(
            lat1 in -80.0f64..80.0, lon1 in -179.0f64..179.0,
            lat2 in -80.0f64..80.0, lon2 in -179.0f64..179.0,
        ) {
            let a = GeodeticPosition::new(lat1, lon1, 0.0);
            let b = GeodeticPosition::new(lat2, lon2, 0.0);
            if let (Ok(d1), Ok(d2)) = (vincenty_distance(&a, &b), vincenty_distance(&b, &a)) {
                prop_assert!((d1 - d2).abs() < 1e-9);
            }
        }

        #[test]
        fn ned_preserves_norm(
            lat in -80.0f64..80.0, lon in -179.0f64..179.0,
            dx in -1e5f64..1e5, dy in -1e5f64..1e5, dz in -1e5f64..1e5,
        ) {
            let r = GeodeticPosition::new(lat, lon, 0.0);
            let origin = geodetic_to_ecef(&r);
            let p = EcefPosition::new(origin.x + dx, origin.y + dy, origin.z + dz);
            let ned = ecef_to_ned(&p, &r);
            let ecef_norm = p.sub(&origin).norm();
            prop_assert!((ned.norm() - ecef_norm).abs() <= 1e-9 * ecef_norm.max(1.0));
        }
    }
}
