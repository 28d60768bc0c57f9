//! Groups geolocated CPE by their upstream provider router and uses the
//! resulting coverage areas to place CPE that cannot be geolocated directly.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::GeolocatedCpe;
use crate::geo::{centroid, compare_sources, coverage_radius, destination_point, DistanceReport, GeoPoint};
use crate::mac::Ipv6Address;

/// Radius above which a cluster is flagged as dispersed.
pub const DEFAULT_DISPERSION_KM: f64 = 160.0;
pub const DEFAULT_PREFIX_LEN: u8 = 48;
const CIRCLE_VERTICES: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClusterError {
    #[error("directly geolocated count must be at least 1")]
    NoDirectGeolocations,
    #[error("total {total} is smaller than directly geolocated {direct}")]
    TotalBelowDirect { total: u64, direct: u64 },
}

/// One traced path; the last hop of a responded trace is the CPE itself.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub target: Ipv6Address,
    pub hops: Vec<Ipv6Address>,
    pub responded: bool,
}

/// The hop before the last one of a responded trace.
pub fn extract_penultimate(trace: &TraceRecord) -> Option<Ipv6Address> {
    let n = trace.hops.len();
    if trace.responded && n >= 2 {
        Some(trace.hops[n - 2])
    } else {
        None
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterCluster {
    pub penultimate: Ipv6Address,
    /// Ascending by WAN MAC.
    pub members: Vec<GeolocatedCpe>,
    pub center: GeoPoint,
    pub radius_km: f64,
    pub dispersed: bool,
}

impl RouterCluster {
    fn from_members(penultimate: Ipv6Address, mut members: Vec<GeolocatedCpe>, threshold_km: f64) -> Option<Self> {
        members.sort_by_key(|m| m.wan_mac);
        let points: Vec<GeoPoint> = members.iter().map(GeolocatedCpe::location).collect();
        let center = match centroid(&points) {
            Ok(c) => c,
            Err(e) => {
                log::warn!("skipping cluster behind {penultimate}: {e}");
                return None;
            }
        };
        let radius_km = coverage_radius(&points, center).ok()?;
        Some(RouterCluster {
            penultimate,
            members,
            center,
            radius_km,
            dispersed: radius_km > threshold_km,
        })
    }
}

/// Index from CPE response address to the router upstream of it. A target
/// and its last hop both resolve to the same router; the first trace seen
/// for an address wins.
fn router_by_address(traces: &[TraceRecord]) -> HashMap<Ipv6Address, Ipv6Address> {
    let mut map = HashMap::new();
    for t in traces {
        if let Some(r) = extract_penultimate(t) {
            map.entry(*t.hops.last().unwrap()).or_insert(r);
            map.entry(t.target).or_insert(r);
        }
    }
    map
}

/// One cluster per router that has at least one geolocated CPE behind it,
/// ascending by router address. A CPE joins at most one cluster.
pub fn build_clusters(traces: &[TraceRecord], geos: &[GeolocatedCpe], threshold_km: f64) -> Vec<RouterCluster> {
    let routers = router_by_address(traces);
    let mut groups: BTreeMap<Ipv6Address, Vec<GeolocatedCpe>> = BTreeMap::new();
    for g in geos {
        if let Some(r) = routers.get(&g.source_addr) {
            groups.entry(*r).or_default().push(*g);
        }
    }
    groups
        .into_iter()
        .filter_map(|(r, m)| RouterCluster::from_members(r, m, threshold_km))
        .collect()
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocationMethod {
    Cluster,
    Prefix,
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferredLocation {
    pub target: Ipv6Address,
    pub center: GeoPoint,
    pub radius_km: f64,
    pub support: usize,
    pub method: LocationMethod,
}

/// Read-only lookup structure for placing CPE that lack a geolocation.
pub struct Locator<'a> {
    clusters: &'a [RouterCluster],
    cluster_by_router: HashMap<Ipv6Address, usize>,
    router_by_addr: HashMap<Ipv6Address, Ipv6Address>,
    by_prefix: HashMap<u128, Vec<GeoPoint>>,
    prefix_len: u8,
}

impl<'a> Locator<'a> {
    /// Prefix support is drawn from the members of `clusters`.
    pub fn new(clusters: &'a [RouterCluster], traces: &[TraceRecord], prefix_len: u8) -> Self {
        let mut by_prefix: HashMap<u128, Vec<GeoPoint>> = HashMap::new();
        for m in clusters.iter().flat_map(|c| &c.members) {
            by_prefix
                .entry(m.source_addr.network(prefix_len))
                .or_default()
                .push(m.location());
        }
        Locator {
            clusters,
            cluster_by_router: clusters.iter().enumerate().map(|(i, c)| (c.penultimate, i)).collect(),
            router_by_addr: router_by_address(traces),
            by_prefix,
            prefix_len,
        }
    }

    /// Adds geolocated CPE without a trace to the prefix support.
    pub fn with_prefix_support(mut self, geos: &[GeolocatedCpe]) -> Self {
        let known: std::collections::HashSet<Ipv6Address> = self
            .clusters
            .iter()
            .flat_map(|c| c.members.iter().map(|m| m.source_addr))
            .collect();
        for g in geos.iter().filter(|g| !known.contains(&g.source_addr)) {
            self.by_prefix
                .entry(g.source_addr.network(self.prefix_len))
                .or_default()
                .push(g.location());
        }
        self
    }

    /// Cluster of the target's upstream router if there is one, otherwise
    /// the geolocated CPE sharing its prefix.
    pub fn locate(&self, target: Ipv6Address) -> Option<InferredLocation> {
        if let Some(c) = self
            .router_by_addr
            .get(&target)
            .and_then(|r| self.cluster_by_router.get(r))
            .map(|&i| &self.clusters[i])
        {
            return Some(InferredLocation {
                target,
                center: c.center,
                radius_km: c.radius_km,
                support: c.members.len(),
                method: LocationMethod::Cluster,
            });
        }
        let points = self.by_prefix.get(&target.network(self.prefix_len))?;
        let center = centroid(points).ok()?;
        Some(InferredLocation {
            target,
            center,
            radius_km: coverage_radius(points, center).ok()?,
            support: points.len(),
            method: LocationMethod::Prefix,
        })
    }
}

pub fn infer_noneui_location(
    target: Ipv6Address,
    clusters: &[RouterCluster],
    traces: &[TraceRecord],
    prefix_len: u8,
) -> Option<InferredLocation> {
    Locator::new(clusters, traces, prefix_len).locate(target)
}

/// `total / direct`, rounded to two decimals.
pub fn coverage_gain(total_cpe: u64, directly_geolocated: u64) -> Result<f64, ClusterError> {
    if directly_geolocated == 0 {
        return Err(ClusterError::NoDirectGeolocations);
    }
    if total_cpe < directly_geolocated {
        return Err(ClusterError::TotalBelowDirect {
            total: total_cpe,
            direct: directly_geolocated,
        });
    }
    Ok((total_cpe as f64 / directly_geolocated as f64 * 100.0).round() / 100.0)
}

/// Distances from each inferred center to the reported location of the
/// same target.
pub fn evaluate_against_reported(
    inferred: &[InferredLocation],
    reported: &BTreeMap<Ipv6Address, GeoPoint>,
) -> DistanceReport {
    let a: BTreeMap<Ipv6Address, GeoPoint> = inferred.iter().map(|l| (l.target, l.center)).collect();
    compare_sources(&a, reported)
}

fn circle_ring(center: GeoPoint, radius_km: f64) -> Vec<[f64; 2]> {
    let mut ring: Vec<[f64; 2]> = (0..CIRCLE_VERTICES)
        .map(|i| {
            let p = destination_point(center, 360.0 * i as f64 / CIRCLE_VERTICES as f64, radius_km);
            [p.lon, p.lat]
        })
        .collect();
    ring.push(ring[0]);
    ring
}

/// Member points plus one coverage polygon per cluster.
pub fn clusters_to_geojson(clusters: &[RouterCluster]) -> serde_json::Value {
    let mut features = Vec::new();
    for c in clusters {
        features.push(serde_json::json!({
            "type": "Feature",
            "geometry": { "type": "Polygon", "coordinates": [circle_ring(c.center, c.radius_km)] },
            "properties": {
                "kind": "coverage",
                "penultimate": c.penultimate,
                "members": c.members.len(),
                "radius_km": c.radius_km,
                "dispersed": c.dispersed,
            }
        }));
        for m in &c.members {
            features.push(serde_json::json!({
                "type": "Feature",
                "geometry": { "type": "Point", "coordinates": [m.lon, m.lat] },
                "properties": {
                    "kind": "cpe",
                    "penultimate": c.penultimate,
                    "wan_mac": m.wan_mac,
                    "addr": m.source_addr,
                }
            }));
        }
    }
    serde_json::json!({ "type": "FeatureCollection", "features": features })
}

pub fn clusters_summary(clusters: &[RouterCluster], threshold_km: f64) -> serde_json::Value {
    let rows: Vec<serde_json::Value> = clusters
        .iter()
        .map(|c| {
            serde_json::json!({
                "penultimate": c.penultimate,
                "members": c.members.len(),
                "lat": c.center.lat,
                "lon": c.center.lon,
                "radius_km": c.radius_km,
                "dispersed": c.dispersed,
            })
        })
        .collect();
    serde_json::json!({
        "clusters": clusters.len(),
        "dispersed": clusters.iter().filter(|c| c.dispersed).count(),
        "geolocated_members": clusters.iter().map(|c| c.members.len()).sum::<usize>(),
        "dispersion_threshold_km": threshold_km,
        "routers": rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::GeoSource;
    use crate::geo::geodesic_km;
    use crate::mac::Mac48;
    use proptest::prelude::*;

    fn addr(s: &str) -> Ipv6Address {
        s.parse().unwrap()
    }

    fn cpe(i: u64, a: Ipv6Address, p: GeoPoint) -> GeolocatedCpe {
        GeolocatedCpe {
            wan_mac: Mac48::new(0x001DD1_000000 + i),
            source_addr: a,
            predicted_bssid: Mac48::new(0x001DD1_000000 + i + 1),
            lat: p.lat,
            lon: p.lon,
            model_confidence: 1.0,
            geo_source: GeoSource::Synthetic,
            ul_alias: false,
        }
    }

    fn trace(target: Ipv6Address, hops: &[Ipv6Address]) -> TraceRecord {
        TraceRecord {
            target,
            hops: hops.to_vec(),
            responded: true,
        }
    }

    #[test]
    fn penultimate_examples() {
        let (r1, r2, c) = (addr("2001:db8::1"), addr("2001:db8::2"), addr("2001:db8:1::5"));
        assert_eq!(extract_penultimate(&trace(c, &[r1, r2, c])), Some(r2));
        assert_eq!(extract_penultimate(&trace(c, &[c])), None);
        let mut t = trace(c, &[r1, r2, c]);
        t.responded = false;
        assert_eq!(extract_penultimate(&t), None);
    }

    #[test]
    fn trace_jsonl_shape() {
        let t: TraceRecord =
            serde_json::from_str(r#"{"target":"2001:db8::5","hops":["2001:db8::1","2001:db8::5"],"responded":true}"#)
                .unwrap();
        assert_eq!(extract_penultimate(&t), Some(addr("2001:db8::1")));
    }

    #[test]
    fn single_member_has_zero_radius() {
        let r = addr("2001:db8::1");
        let a = addr("2001:db8:1::5");
        let g = cpe(0, a, GeoPoint::new(39.77, -86.16).unwrap());
        let cl = build_clusters(&[trace(a, &[r, a])], &[g], DEFAULT_DISPERSION_KM);
        assert_eq!(cl.len(), 1);
        assert_eq!(cl[0].radius_km, 0.0);
        assert!(!cl[0].dispersed);
    }

    #[test]
    fn bimodal_router_is_one_wide_cluster() {
        let r = addr("2001:db8::1");
        let west = GeoPoint::new(39.77, -86.22).unwrap();
        let east = destination_point(west, 90.0, 10.0);
        let mut geos = Vec::new();
        let mut traces = Vec::new();
        for i in 0..20u64 {
            let a = Ipv6Address::from_parts(0x2001_0db8_0001_0000 + i, 1);
            geos.push(cpe(i * 2, a, if i % 2 == 0 { west } else { east }));
            traces.push(trace(a, &[r, a]));
        }
        let cl = build_clusters(&traces, &geos, DEFAULT_DISPERSION_KM);
        assert_eq!(cl.len(), 1);
        assert!(cl[0].radius_km >= 5.0, "{}", cl[0].radius_km);
    }

    #[test]
    fn degenerate_cluster_is_skipped() {
        let r = addr("2001:db8::1");
        let (a, b) = (addr("2001:db8:1::1"), addr("2001:db8:1::2"));
        let geos = [
            cpe(0, a, GeoPoint::new(0.0, 0.0).unwrap()),
            cpe(2, b, GeoPoint::new(0.0, 180.0).unwrap()),
        ];
        let cl = build_clusters(&[trace(a, &[r, a]), trace(b, &[r, b])], &geos, DEFAULT_DISPERSION_KM);
        assert!(cl.is_empty());
    }

    #[test]
    fn coverage_gain_examples() {
        assert_eq!(coverage_gain(3825, 180), Ok(21.25));
        assert_eq!(coverage_gain(7, 7), Ok(1.0));
        assert_eq!(coverage_gain(100, 4), Ok(25.0));
        assert_eq!(coverage_gain(5, 0), Err(ClusterError::NoDirectGeolocations));
        assert!(coverage_gain(3, 4).is_err());
    }

    #[test]
    fn locator_prefers_cluster_then_prefix() {
        let (r1, r2) = (addr("2001:db8::1"), addr("2001:db8::2"));
        let home = GeoPoint::new(39.77, -86.16).unwrap();
        let far = GeoPoint::new(41.88, -87.63).unwrap();
        let mut geos = Vec::new();
        let mut traces = Vec::new();
        for i in 0..5u64 {
            let a = Ipv6Address::from_parts(0x2001_0db8_00aa_0000 + i, 0x0211_22ff_fe00_0000 + i);
            geos.push(cpe(i * 2, a, destination_point(home, 72.0 * i as f64, 3.0)));
            traces.push(trace(a, &[r1, a]));
        }
        let b = Ipv6Address::from_parts(0x2001_0db8_00bb_0000, 0x0211_22ff_fe00_0099);
        geos.push(cpe(100, b, far));
        traces.push(trace(b, &[r2, b]));
        let clusters = build_clusters(&traces, &geos, DEFAULT_DISPERSION_KM);
        assert_eq!(clusters.len(), 2);

        // Inside r2's /48 but traced behind r1: the router wins.
        let t1 = Ipv6Address::from_parts(0x2001_0db8_00bb_0001, 0x1234);
        traces.push(trace(t1, &[r1, t1]));
        let loc = Locator::new(&clusters, &traces, 48);
        let l = loc.locate(t1).unwrap();
        assert_eq!(l.method, LocationMethod::Cluster);
        assert_eq!(l.support, 5);
        assert_eq!(l.center, clusters[0].center);

        let t2 = Ipv6Address::from_parts(0x2001_0db8_00bb_0002, 0x1234);
        let l = loc.locate(t2).unwrap();
        assert_eq!(l.method, LocationMethod::Prefix);
        assert_eq!(l.support, 1);
        assert_eq!(l.radius_km, 0.0);

        assert_eq!(loc.locate(addr("2001:db9::1")), None);
        assert_eq!(infer_noneui_location(t1, &clusters, &traces, 48), Some(loc.locate(t1).unwrap()));
    }

    #[test]
    fn evaluate_identity_and_empty() {
        let t = addr("2001:db8::9");
        let p = GeoPoint::new(10.0, 20.0).unwrap();
        let l = InferredLocation {
            target: t,
            center: p,
            radius_km: 1.0,
            support: 1,
            method: LocationMethod::Cluster,
        };
        let r = evaluate_against_reported(&[l], &BTreeMap::from([(t, p)]));
        assert_eq!(r.distances_km, vec![0.0]);
        assert_eq!(evaluate_against_reported(&[], &BTreeMap::new()).pairs, 0);
    }

    #[test]
    fn geojson_has_closed_64_gons() {
        let r = addr("2001:db8::1");
        let a = addr("2001:db8:1::5");
        let g = cpe(0, a, GeoPoint::new(39.77, -86.16).unwrap());
        let cl = build_clusters(&[trace(a, &[r, a])], &[g], DEFAULT_DISPERSION_KM);
        let gj = clusters_to_geojson(&cl);
        let ring = gj["features"][0]["geometry"]["coordinates"][0].as_array().unwrap();
        assert_eq!(ring.len(), 65);
        assert_eq!(ring[0], ring[64]);
        assert_eq!(clusters_summary(&cl, 160.0)["clusters"], 1);
    }

    proptest! {
        #[test]
        fn clusters_partition_and_bound(
            assign in proptest::collection::vec((0u8..6, -0.5f64..0.5, -0.5f64..0.5), 1..60),
            dup in 0usize..60,
        ) {
            let routers: Vec<Ipv6Address> = (0..6).map(|i| Ipv6Address::from_parts(0x2001_0db8_ffff_0000, i + 1)).collect();
            let mut geos = Vec::new();
            let mut traces = Vec::new();
            for (i, (r, dlat, dlon)) in assign.iter().enumerate() {
                let a = Ipv6Address::from_parts(0x2001_0db8_0000_0000 + i as u64, 7);
                geos.push(cpe(i as u64 * 2, a, GeoPoint::new(40.0 + dlat, -86.0 + dlon).unwrap()));
                traces.push(trace(a, &[routers[*r as usize], a]));
            }
            // A second trace for one CPE through another router is ignored.
            let d = dup % assign.len();
            let a = geos[d].source_addr;
            traces.push(trace(a, &[routers[(assign[d].0 as usize + 1) % 6], a]));

            let cl = build_clusters(&traces, &geos, DEFAULT_DISPERSION_KM);
            let mut seen: Vec<Mac48> = cl.iter().flat_map(|c| c.members.iter().map(|m| m.wan_mac)).collect();
            seen.sort();
            let mut all: Vec<Mac48> = geos.iter().map(|g| g.wan_mac).collect();
            all.sort();
            prop_assert_eq!(seen, all);
            for c in &cl {
                let pts: Vec<GeoPoint> = c.members.iter().map(|m| m.location()).collect();
                prop_assert_eq!(c.radius_km, coverage_radius(&pts, c.center).unwrap());
                prop_assert_eq!(c.dispersed, c.radius_km > DEFAULT_DISPERSION_KM);
                prop_assert!(pts.iter().all(|p| geodesic_km(c.center, *p) <= c.radius_km));
            }
        }

        #[test]
        fn coverage_gain_monotone(total in 1u64..100_000, a in 1u64..100_000, b in 1u64..100_000) {
            let (lo, hi) = (a.min(b).min(total), a.max(b).min(total));
            prop_assert!(coverage_gain(total, lo).unwrap() >= coverage_gain(total, hi).unwrap());
        }
    }
}
