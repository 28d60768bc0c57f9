//! Spherical geodesy and geolocation-source comparison.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mean Earth radius used for all great-circle distances.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("coordinates out of range: lat {lat}, lon {lon}")]
    OutOfRange { lat: f64, lon: f64 },
    #[error("empty input")]
    EmptyInput,
    #[error("centroid is undefined: mean vector norm {0:e}")]
    DegenerateCentroid(f64),
}

/// A WGS84-style latitude/longitude pair in degrees.
///
/// Latitude lies in `[-90, 90]` and longitude in `(-180, 180]`; `-180` is
/// folded onto `180`.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        if !lat.is_finite() || !lon.is_finite() || !(-90.0..=90.0).contains(&lat) {
            return Err(GeoError::OutOfRange { lat, lon });
        }
        let lon = if lon == -180.0 { 180.0 } else { lon };
        if !(lon > -180.0 && lon <= 180.0) {
            return Err(GeoError::OutOfRange { lat, lon });
        }
        Ok(GeoPoint { lat, lon })
    }

    fn to_unit(self) -> [f64; 3] {
        let (la, lo) = (self.lat.to_radians(), self.lon.to_radians());
        [la.cos() * lo.cos(), la.cos() * lo.sin(), la.sin()]
    }

    fn from_vector(v: [f64; 3]) -> Self {
        let lat = v[2].atan2((v[0] * v[0] + v[1] * v[1]).sqrt()).to_degrees();
        let mut lon = v[1].atan2(v[0]).to_degrees();
        if lon <= -180.0 {
            lon += 360.0;
        }
        GeoPoint { lat, lon }
    }
}

/// Haversine great-circle distance in kilometres.
pub fn geodesic_km(a: GeoPoint, b: GeoPoint) -> f64 {
    let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
    let dphi = p2 - p1;
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Point reached by travelling `distance_km` from `origin` on initial
/// bearing `bearing_deg` (clockwise from north).
pub fn destination_point(origin: GeoPoint, bearing_deg: f64, distance_km: f64) -> GeoPoint {
    let delta = distance_km / EARTH_RADIUS_KM;
    let theta = bearing_deg.to_radians();
    let (phi1, lambda1) = (origin.lat.to_radians(), origin.lon.to_radians());
    let sin_phi2 = phi1.sin() * delta.cos() + phi1.cos() * delta.sin() * theta.cos();
    let phi2 = sin_phi2.clamp(-1.0, 1.0).asin();
    let lambda2 = lambda1
        + (theta.sin() * delta.sin() * phi1.cos()).atan2(delta.cos() - phi1.sin() * sin_phi2);
    let mut lon = lambda2.to_degrees();
    lon = (lon + 540.0) % 360.0 - 180.0;
    if lon <= -180.0 {
        lon += 360.0;
    }
    GeoPoint {
        lat: phi2.to_degrees(),
        lon,
    }
}

/// Spherical centroid: the normalised mean of the points' unit vectors.
pub fn centroid(points: &[GeoPoint]) -> Result<GeoPoint, GeoError> {
    if points.is_empty() {
        return Err(GeoError::EmptyInput);
    }
    let mut sum = [0.0f64; 3];
    for p in points {
        let u = p.to_unit();
        sum[0] += u[0];
        sum[1] += u[1];
        sum[2] += u[2];
    }
    let n = points.len() as f64;
    let mean = [sum[0] / n, sum[1] / n, sum[2] / n];
    let norm = (mean[0] * mean[0] + mean[1] * mean[1] + mean[2] * mean[2]).sqrt();
    if norm < 1e-9 {
        return Err(GeoError::DegenerateCentroid(norm));
    }
    Ok(GeoPoint::from_vector(mean))
}

/// Smallest radius around `center` that contains every point.
pub fn coverage_radius(points: &[GeoPoint], center: GeoPoint) -> Result<f64, GeoError> {
    if points.is_empty() {
        return Err(GeoError::EmptyInput);
    }
    Ok(points
        .iter()
        .map(|p| geodesic_km(center, *p))
        .fold(0.0, f64::max))
}

/// Probabilities reported by [`DistanceReport`].
pub const REPORT_QUANTILES: [f64; 4] = [0.25, 0.5, 0.75, 0.9];

/// Nearest-rank quantile of an ascending slice: the `ceil(p·n)`-th smallest
/// value. Returns `None` on an empty slice.
pub fn nearest_rank(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Some(sorted[rank - 1])
}

/// Pairwise distances between two geolocation sources over their common keys.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct DistanceReport {
    pub pairs: usize,
    pub distances_km: Vec<f64>,
    /// `(probability, km)`, ascending in probability.
    pub quantiles: Vec<(f64, f64)>,
    pub distinct_a: usize,
    pub distinct_b: usize,
}

impl DistanceReport {
    pub fn from_distances(mut distances_km: Vec<f64>) -> Self {
        distances_km.sort_by(f64::total_cmp);
        let quantiles = REPORT_QUANTILES
            .iter()
            .filter_map(|&p| nearest_rank(&distances_km, p).map(|v| (p, v)))
            .collect();
        DistanceReport {
            pairs: distances_km.len(),
            distances_km,
            quantiles,
            distinct_a: 0,
            distinct_b: 0,
        }
    }

    pub fn quantile(&self, p: f64) -> Option<f64> {
        nearest_rank(&self.distances_km, p)
    }

    pub fn median(&self) -> Option<f64> {
        self.quantile(0.5)
    }

    /// One distance per line, ascending, with a `distance_km` header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("distance_km\n");
        for d in &self.distances_km {
            out.push_str(&format!("{d:.6}\n"));
        }
        out
    }

    /// Quantiles and counts without the raw distance list.
    pub fn summary_json(&self) -> serde_json::Value {
        let q: serde_json::Map<String, serde_json::Value> = self
            .quantiles
            .iter()
            .map(|(p, v)| (format!("{p}"), serde_json::json!(v)))
            .collect();
        serde_json::json!({
            "pairs": self.pairs,
            "distinct_a": self.distinct_a,
            "distinct_b": self.distinct_b,
            "quantiles_km": q,
            "max_km": self.distances_km.last(),
        })
    }
}

fn distinct_locations<'a>(points: impl Iterator<Item = &'a GeoPoint>) -> usize {
    points
        .map(|p| (p.lat.to_bits(), p.lon.to_bits()))
        .collect::<BTreeSet<_>>()
        .len()
}

/// Distances between `a[k]` and `b[k]` for every key present in both maps.
pub fn compare_sources<K: Ord>(
    a: &BTreeMap<K, GeoPoint>,
    b: &BTreeMap<K, GeoPoint>,
) -> DistanceReport {
    let distances = a
        .iter()
        .filter_map(|(k, pa)| b.get(k).map(|pb| geodesic_km(*pa, *pb)))
        .collect();
    let mut report = DistanceReport::from_distances(distances);
    report.distinct_a = distinct_locations(a.values());
    report.distinct_b = distinct_locations(b.values());
    report
}
