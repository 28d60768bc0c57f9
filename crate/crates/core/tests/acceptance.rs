//! End-to-end acceptance checks. Each test prints one PASS/FAIL line to
//! standard error, bypassing output capture so the line always appears.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::time::{Duration, Instant};

use euigeo::cluster::{build_clusters, coverage_gain, Locator, TraceRecord, DEFAULT_DISPERSION_KM};
use euigeo::corpus::{BssidGeoRecord, CorpusBuilder, CorpusIndex, GeoSource, InputFormat, WanMacRecord};
use euigeo::fusion::{fuse, GeolocatedCpe};
use euigeo::geo::{compare_sources, destination_point, geodesic_km, EARTH_RADIUS_KM};
use euigeo::mac::{decode_eui64, encode_eui64, has_eui64_marker, Ipv6Address, Mac48, Oui};
use euigeo::offset::{filter_models, infer_all, infer_offset, offset_pmf, InferenceConfig, DEFAULT_MIN_CONSISTENCY};
use euigeo::synth::{generate, plant_consistency_oui, write_jsonl, SynthFiles, TopologyPlan, VendorProfile};
use euigeo::GeoPoint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(id: u32, pass: bool, detail: String) {
    let line = format!("criterion {id:>2}: {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {id} failed: {detail}");
}

/// Ingests generated files through their JSONL wire form.
fn ingest(files: &SynthFiles) -> CorpusIndex {
    let mut wan = Vec::new();
    write_jsonl(&mut wan, &files.wan).unwrap();
    let mut bssid = Vec::new();
    write_jsonl(&mut bssid, &files.bssid).unwrap();
    let mut b = CorpusBuilder::new();
    b.ingest_wan_reader(wan.as_slice(), InputFormat::Jsonl).unwrap();
    b.ingest_bssid_reader(bssid.as_slice(), InputFormat::Jsonl).unwrap();
    b.build().exclude_multi_as()
}

fn pt(lat: f64, lon: f64) -> GeoPoint {
    GeoPoint::new(lat, lon).unwrap()
}

#[test]
fn criterion_01_eui64_round_trip() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut failures = 0u32;
    for _ in 0..1_000_000 {
        let mac = Mac48::new(rng.gen::<u64>());
        let prefix = rng.gen::<u64>();
        if decode_eui64(encode_eui64(prefix, mac)) != Some(mac) {
            failures += 1;
        }
    }
    let worked = decode_eui64("fe80::211:22ff:fe33:4455".parse().unwrap()).map(|m| m.to_string());
    let elapsed = start.elapsed();
    let pass = failures == 0 && worked.as_deref() == Some("00:11:22:33:44:55") && elapsed < Duration::from_secs(5);
    verdict(
        1,
        pass,
        format!("1e6 round trips, {failures} mismatches, example -> {worked:?}, {elapsed:.2?}"),
    );
}

#[test]
fn criterion_02_false_eui64_rate() {
    let start = Instant::now();
    let n = 10_000_000u64;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let hits = (0..n).filter(|_| has_eui64_marker(rng.gen::<u64>())).count() as f64;
    let p = 1.0 / 65_536.0;
    let mean = n as f64 * p;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    let elapsed = start.elapsed();
    let pass = (hits - mean).abs() <= 3.0 * sigma && elapsed < Duration::from_secs(30);
    verdict(
        2,
        pass,
        format!("{hits} marker hits in 1e7 IIDs, expected {mean:.1} +/- {:.1}, {elapsed:.2?}", 3.0 * sigma),
    );
}

#[test]
fn criterion_03_clean_offset_recovery() {
    let start = Instant::now();
    let cfg = InferenceConfig::default();
    let mut cases = 0u32;
    let mut wrong = Vec::new();
    let mut oui_seq = 0x0A_0000u32;
    for alloc in 1..=32u32 {
        let mut profiles = Vec::new();
        for offset in -(alloc as i64 - 1)..=(alloc as i64 - 1) {
            let wan_index = (-offset).max(0) as u32;
            let bssid_index = (wan_index as i64 + offset) as u32;
            profiles.push(VendorProfile::new(Oui::new(oui_seq), alloc, wan_index, vec![bssid_index], 500));
            oui_seq += 1;
        }
        let (files, ledger) = generate(&profiles, &TopologyPlan::default(), alloc as u64).unwrap();
        let index = ingest(&files);
        for planted in &ledger.profiles {
            cases += 1;
            let m = infer_offset(planted.oui, &index, &cfg).unwrap().unwrap();
            if m.alloc.alloc_size != alloc || m.offset != planted.true_offset || m.confidence != 1.0 {
                wrong.push((alloc, planted.true_offset, m.alloc.alloc_size, m.offset, m.confidence));
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = wrong.is_empty() && cases == 1024 && elapsed < Duration::from_secs(60);
    verdict(
        3,
        pass,
        format!("{cases} (alloc, offset) pairs, {} wrong {:?}, {elapsed:.2?}", wrong.len(), wrong.first()),
    );
}

#[test]
fn criterion_04_lossy_arris_recovery() {
    let start = Instant::now();
    let oui = Oui::new(0x001DD1);
    let mut recovered = 0;
    let mut min_mass = f64::INFINITY;
    for seed in 0..100u64 {
        let p = VendorProfile::arris(oui, 2000).with_observation(0.4, 0.4, 0.75);
        let (files, _) = generate(&[p], &TopologyPlan::default(), seed).unwrap();
        let index = ingest(&files);
        let m = infer_offset(oui, &index, &InferenceConfig::default()).unwrap().unwrap();
        if m.offset == -2 && m.alloc.alloc_size == 16 {
            recovered += 1;
        }
        min_mass = min_mass.min(offset_pmf(&m).unwrap().supporting_mass());
    }
    let elapsed = start.elapsed();
    let pass = recovered >= 95 && min_mass >= 0.95 && elapsed < Duration::from_secs(120);
    verdict(
        4,
        pass,
        format!("-2 recovered in {recovered}/100 seeds, min offset+harmonic mass {min_mass:.4}, {elapsed:.2?}"),
    );
}

#[test]
fn criterion_05_avm_layout() {
    let oui = Oui::new(0x3810D5);
    let mut in_pair = 0;
    let mut six_when_favoured = 0;
    let mut naive_wins = 0;
    let mut alloc_ok = 0;
    for seed in 0..50u64 {
        let even = VendorProfile::avm(oui, 2000).with_observation(0.5, 0.5, 0.75);
        let mut favoured = even.clone();
        // Primary (+6) radio seen more often than the +5 one; mean rate stays 0.5.
        favoured.bssid_slot_probs = Some(vec![0.6, 0.4]);
        for (k, p) in [even, favoured].into_iter().enumerate() {
            let (files, _) = generate(&[p], &TopologyPlan::default(), seed * 2 + k as u64).unwrap();
            let m = infer_offset(oui, &ingest(&files), &InferenceConfig::default()).unwrap().unwrap();
            alloc_ok += (m.alloc.alloc_size == 7) as u32;
            if m.offset.rem_euclid(7) == 6 && m.offset != 6 {
                naive_wins += 1;
            }
            if k == 0 {
                in_pair += [5, 6].contains(&m.offset) as u32;
            } else {
                six_when_favoured += (m.offset == 6) as u32;
            }
        }
    }
    let pass = in_pair == 50 && six_when_favoured == 50 && naive_wins == 0 && alloc_ok == 100;
    verdict(
        5,
        pass,
        format!(
            "offset in {{+5,+6}} {in_pair}/50, +6 when favoured {six_when_favoured}/50, -1 class wins {naive_wins}, alloc 7 in {alloc_ok}/100"
        ),
    );
}

#[test]
fn criterion_06_filter_thresholds() {
    let counts = [
        (50, 200),
        (99, 200),
        (100, 99),
        (100, 100),
        (120, 50),
        (150, 150),
        (100, 250),
        (200, 400),
        (300, 300),
        (1000, 1000),
    ];
    let fractions = [0.01, 0.04, 0.049, 0.05, 0.5];
    let mut b = CorpusBuilder::new();
    let mut expected: BTreeMap<Oui, f64> = BTreeMap::new();
    let mut seq = 0u32;
    for (w, bs) in counts {
        for f in fractions {
            let oui = Oui::new(0x0B_0000 + seq);
            let pc = plant_consistency_oui(oui, w, bs, f, seq as u64);
            seq += 1;
            for (i, m) in pc.wan.iter().enumerate() {
                b.push_wan(WanMacRecord {
                    mac: *m,
                    source_addr: encode_eui64(0x2001_0db8_0000_0000 + i as u64, *m),
                    asn: 64500,
                    observed_at: 0,
                });
            }
            for m in &pc.bssid {
                b.push_bssid(BssidGeoRecord {
                    bssid: *m,
                    location: pt(40.0, -86.0),
                    source: GeoSource::Synthetic,
                });
            }
            if w >= 100 && bs >= 100 && pc.confidence >= DEFAULT_MIN_CONSISTENCY {
                expected.insert(oui, pc.confidence);
            }
        }
    }
    let index = b.build();
    let models = filter_models(infer_all(&index, &InferenceConfig::default()), DEFAULT_MIN_CONSISTENCY);
    let got: BTreeMap<Oui, f64> = models.iter().map(|m| (m.oui, m.confidence)).collect();
    let pass = seq == 50 && got == expected;
    verdict(
        6,
        pass,
        format!("{seq} planted OUIs, {} survivors expected, {} survived, sets equal: {}", expected.len(), got.len(), got == expected),
    );
}

/// Great-circle distance through the central angle of two unit vectors.
fn dot_oracle_km(a: GeoPoint, b: GeoPoint) -> f64 {
    let u = |p: GeoPoint| {
        let (la, lo) = (p.lat.to_radians(), p.lon.to_radians());
        [la.cos() * lo.cos(), la.cos() * lo.sin(), la.sin()]
    };
    let (x, y) = (u(a), u(b));
    let cross = [x[1] * y[2] - x[2] * y[1], x[2] * y[0] - x[0] * y[2], x[0] * y[1] - x[1] * y[0]];
    let s = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
    let c = x[0] * y[0] + x[1] * y[1] + x[2] * y[2];
    s.atan2(c) * EARTH_RADIUS_KM
}

#[test]
fn criterion_07_geodesy() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut rand_pt = || pt(rng.gen_range(-90.0..=90.0), rng.gen_range(-179.999..=180.0));
    let mut violations = 0;
    for _ in 0..20_000 {
        let (a, b, c) = (rand_pt(), rand_pt(), rand_pt());
        let (ab, ba) = (geodesic_km(a, b), geodesic_km(b, a));
        if (ab - ba).abs() > 1e-9 || ab + geodesic_km(b, c) + 1e-6 < geodesic_km(a, c) || ab < 0.0 {
            violations += 1;
        }
    }
    let antipodal = geodesic_km(pt(0.0, 0.0), pt(0.0, 180.0));
    // Paris to Berlin; 877.4633 km from an independent haversine evaluation.
    let (paris, berlin) = (pt(48.8566, 2.3522), pt(52.5200, 13.4050));
    let d = geodesic_km(paris, berlin);
    let rel = ((d - 877.4633) / 877.4633).abs().max(((d - dot_oracle_km(paris, berlin)) / d).abs());
    let elapsed = start.elapsed();
    let pass = violations == 0 && (antipodal - 20015.09).abs() <= 0.01 && rel < 1e-3 && elapsed < Duration::from_secs(5);
    verdict(
        7,
        pass,
        format!("{violations} property violations, antipodal {antipodal:.3} km, Paris-Berlin {d:.4} km (rel err {rel:.1e}), {elapsed:.2?}"),
    );
}

fn cpe_at(i: u64, addr: Ipv6Address, p: GeoPoint) -> GeolocatedCpe {
    GeolocatedCpe {
        wan_mac: Mac48::new(0x001DD1_000000 + i),
        source_addr: addr,
        predicted_bssid: Mac48::new(0x001DD1_000000 + i),
        lat: p.lat,
        lon: p.lon,
        model_confidence: 1.0,
        geo_source: GeoSource::Synthetic,
        ul_alias: false,
    }
}

#[test]
fn criterion_08_clustering() {
    // Seven-router metro through the full pipeline.
    let indy = pt(39.7684, -86.1581);
    let topo = TopologyPlan::metro(indy, 7, 25.0, 8.0);
    let oui = Oui::new(0x001DD1);
    let (files, ledger) = generate(&[VendorProfile::arris(oui, 1400)], &topo, 8).unwrap();
    let index = ingest(&files);
    let models = infer_all(&index, &InferenceConfig::default());
    let fused = fuse(&index, &models);
    let clusters = build_clusters(&files.traces, &fused.cpes, DEFAULT_DISPERSION_KM);
    let mut planted: BTreeMap<Ipv6Address, BTreeSet<Mac48>> = BTreeMap::new();
    for d in &ledger.devices {
        planted.entry(d.penultimate_router.unwrap()).or_default().insert(d.wan_mac);
    }
    let got: BTreeMap<Ipv6Address, BTreeSet<Mac48>> = clusters
        .iter()
        .map(|c| (c.penultimate, c.members.iter().map(|m| m.wan_mac).collect()))
        .collect();
    let memberships_ok = clusters.len() == 7 && got == planted && clusters.iter().all(|c| !c.dispersed);

    // Eight CPE on a 12.1 km ring plus one at its center.
    let center = pt(39.7684, -86.1581);
    let r = Ipv6Address::from_parts(0x2001_0db8_ff00_0000, 99);
    let mut geos = vec![cpe_at(0, Ipv6Address::from_parts(0x2001_0db8_0100_0000, 1), center)];
    for k in 0..8u64 {
        let a = Ipv6Address::from_parts(0x2001_0db8_0100_0000, k + 2);
        geos.push(cpe_at(k * 2 + 2, a, destination_point(center, 45.0 * k as f64, 12.1)));
    }
    let traces: Vec<TraceRecord> = geos
        .iter()
        .map(|g| TraceRecord {
            target: g.source_addr,
            hops: vec![r, g.source_addr],
            responded: true,
        })
        .collect();
    let ring = build_clusters(&traces, &geos, DEFAULT_DISPERSION_KM);
    let ring_radius = ring[0].radius_km;

    // Routers with planted service radii either side of the threshold.
    let mut wide = TopologyPlan::metro(indy, 3, 600.0, 0.0);
    for (router, radius) in wide.routers.iter_mut().zip([100.0, 200.0, 300.0]) {
        router.radius_km = radius;
    }
    let (wfiles, wledger) = generate(&[VendorProfile::arris(oui, 900)], &wide, 9).unwrap();
    let windex = ingest(&wfiles);
    let wfused = fuse(&windex, &infer_all(&windex, &InferenceConfig::default()));
    let wclusters = build_clusters(&wfiles.traces, &wfused.cpes, DEFAULT_DISPERSION_KM);
    let flags: Vec<bool> = wclusters.iter().map(|c| c.dispersed).collect();
    let widths: Vec<String> = wclusters.iter().map(|c| format!("{:.1}", c.radius_km)).collect();
    let dispersion_ok = flags == [false, true, true] && wledger.devices.len() == 900;

    let pass = memberships_ok && (ring_radius - 12.1).abs() <= 0.05 && dispersion_ok;
    verdict(
        8,
        pass,
        format!(
            "{} metro clusters, memberships exact: {}, ring radius {ring_radius:.4} km, wide radii {widths:?} dispersed {flags:?}",
            clusters.len(),
            got == planted
        ),
    );
}

#[test]
fn criterion_09_non_eui64_inference() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let center = pt(39.7684, -86.1581);
    let router = Ipv6Address::from_parts(0x2001_0db8_ff00_0000, 1);
    let prefix48 = 0x2001_0db8_0042u64;
    let draw = |rng: &mut ChaCha8Rng| destination_point(center, rng.gen_range(0.0..360.0), 10.0 * rng.gen::<f64>().sqrt());
    let addr = |i: u64, rng: &mut ChaCha8Rng| Ipv6Address::from_parts((prefix48 << 16) | (i & 0xFFFF), rng.gen::<u64>() | 1);

    let mut geos = Vec::new();
    let mut traces = Vec::new();
    for i in 0..180u64 {
        let a = addr(i, &mut rng);
        geos.push(cpe_at(i * 2, a, draw(&mut rng)));
        traces.push(TraceRecord {
            target: a,
            hops: vec![router, a],
            responded: true,
        });
    }
    // 3,645 more CPE in the same /48; two thirds traced behind the router.
    let mut targets = Vec::new();
    for i in 180..3825u64 {
        let a = addr(i, &mut rng);
        let truth = draw(&mut rng);
        if i % 3 != 0 {
            traces.push(TraceRecord {
                target: a,
                hops: vec![router, a],
                responded: true,
            });
        }
        targets.push((a, truth));
    }
    let clusters = build_clusters(&traces, &geos, DEFAULT_DISPERSION_KM);
    let locator = Locator::new(&clusters, &traces, 48);
    let mut inferred = 0u64;
    let mut bounded = 0u64;
    let mut truth_inside = 0u64;
    for (a, truth) in &targets {
        let Some(l) = locator.locate(*a) else { continue };
        inferred += 1;
        if l.support == 180 && geos.iter().all(|g| geodesic_km(l.center, g.location()) <= l.radius_km + 1e-9) {
            bounded += 1;
        }
        truth_inside += (geodesic_km(l.center, *truth) <= l.radius_km) as u64;
    }
    let total = 180 + inferred;
    let gain = coverage_gain(total, 180).unwrap();
    let pass = gain == 21.25 && inferred == 3645 && bounded == inferred;
    verdict(
        9,
        pass,
        format!(
            "coverage gain {gain} ({total}/180), {bounded}/{inferred} inferred within the supporting radius, {truth_inside} planted locations inside it"
        ),
    );
}

#[test]
fn criterion_10_comparison_report() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut a = BTreeMap::new();
    let mut b = BTreeMap::new();
    for k in 0..100_000u32 {
        let p = pt(rng.gen_range(-60.0..60.0), rng.gen_range(-179.0..179.0));
        a.insert(k, p);
        b.insert(k, destination_point(p, rng.gen_range(0.0..360.0), 26.0));
    }
    let report = compare_sources(&a, &b);
    let median = report.median().unwrap();

    let mut brute: Vec<f64> = a.iter().map(|(k, p)| geodesic_km(*p, b[k])).collect();
    brute.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let exact = report.quantiles.iter().all(|(p, v)| {
        let rank = (p * brute.len() as f64).ceil() as usize;
        brute[rank - 1] == *v
    });
    let pass = (median - 26.0).abs() <= 0.1 && exact && report.quantiles.len() == 4;
    verdict(
        10,
        pass,
        format!("median {median:.6} km over {} pairs, quantiles equal brute-force order statistics: {exact}", report.pairs),
    );
}

#[test]
fn criterion_11_throughput() {
    let profiles: Vec<VendorProfile> = (0..1000u32)
        .map(|i| {
            let alloc = [4, 7, 8, 16, 32][i as usize % 5];
            VendorProfile::new(Oui::new(0x0D_0000 + i), alloc, 1, vec![alloc - 1], 1000)
        })
        .collect();
    let (files, ledger) = generate(&profiles, &TopologyPlan::default(), 11).unwrap();
    drop(ledger);
    let dir = tempfile::tempdir().unwrap();
    let (wan_path, bssid_path) = (dir.path().join("wan.jsonl"), dir.path().join("bssid.jsonl"));
    write_jsonl(std::io::BufWriter::new(std::fs::File::create(&wan_path).unwrap()), &files.wan).unwrap();
    write_jsonl(std::io::BufWriter::new(std::fs::File::create(&bssid_path).unwrap()), &files.bssid).unwrap();
    drop(files);

    let start = Instant::now();
    let open = |p: &std::path::Path| std::io::BufReader::new(std::fs::File::open(p).unwrap());
    let mut b = CorpusBuilder::new();
    b.ingest_wan_reader(open(&wan_path), InputFormat::Jsonl).unwrap();
    b.ingest_bssid_reader(open(&bssid_path), InputFormat::Jsonl).unwrap();
    let index = b.build().exclude_multi_as();
    let t_ingest = start.elapsed();
    let models = filter_models(infer_all(&index, &InferenceConfig::default()), DEFAULT_MIN_CONSISTENCY);
    let t_infer = start.elapsed() - t_ingest;
    let fused = fuse(&index, &models);
    let elapsed = start.elapsed();

    let pass = elapsed < Duration::from_secs(60)
        && index.wan_mac_count() == 1_000_000
        && index.bssid_count() == 1_000_000
        && models.len() == 1000
        && fused.stats.matched == 1_000_000;
    verdict(
        11,
        pass,
        format!(
            "1e6 WAN + 1e6 BSSID over 1000 OUIs: ingest {t_ingest:.2?}, infer {t_infer:.2?}, total {elapsed:.2?}, {} models, {} matched",
            models.len(),
            fused.stats.matched
        ),
    );
}
