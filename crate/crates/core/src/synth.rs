//! Synthetic CPE populations with a ground-truth ledger.
//!
//! Each [`VendorProfile`] lays out `device_count` contiguous allocation
//! blocks inside its OUI. Every device gets a WAN MAC at `wan_index` and one
//! BSSID per entry of `bssid_indices`, a location inside the disk of a
//! router from the [`TopologyPlan`], and an IPv6 address under that router's
//! /48. Observation is thinned per profile; the WAN file only carries
//! addresses that were observed, the BSSID file only observed radios.
//!
//! Observation of a device's WAN address and its radios can be coupled
//! through `co_observation`: with that probability a single uniform draw
//! decides every observation of the device, otherwise each is drawn
//! independently. Marginal observation rates are unaffected.

use std::io::{self, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::TraceRecord;
use crate::corpus::{BssidLine, GeoSource, WanLine};
use crate::geo::{destination_point, GeoPoint};
use crate::mac::{encode_eui64, has_eui64_marker, Ipv6Address, Mac48, Oui, NIC_SPACE};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("profile for {oui} needs NIC {needed} but an OUI holds {NIC_SPACE}")]
    CapacityExceeded { oui: Oui, needed: u64 },
    #[error("invalid profile for {oui}: {reason}")]
    InvalidProfile { oui: Oui, reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VendorProfile {
    pub oui: Oui,
    pub alloc_size: u32,
    pub wan_index: u32,
    /// In-block BSSID positions; the first is the primary radio.
    pub bssid_indices: Vec<u32>,
    pub device_count: u32,
    pub wan_obs_prob: f64,
    pub bssid_obs_prob: f64,
    /// Per-radio observation rates overriding `bssid_obs_prob`.
    #[serde(default)]
    pub bssid_slot_probs: Option<Vec<f64>>,
    #[serde(default)]
    pub co_observation: f64,
    /// BSSIDs are issued from this OUI instead, at the same NIC.
    #[serde(default)]
    pub split_oui: Option<Oui>,
    /// Up to this many unused blocks between consecutive devices.
    #[serde(default)]
    pub max_gap_blocks: u32,
    #[serde(default)]
    pub base_nic: u32,
    /// Share of devices that address their WAN side with EUI-64.
    #[serde(default = "one")]
    pub eui64_fraction: f64,
}

fn one() -> f64 {
    1.0
}

impl VendorProfile {
    /// Fully observed profile with no gaps.
    pub fn new(oui: Oui, alloc_size: u32, wan_index: u32, bssid_indices: Vec<u32>, device_count: u32) -> Self {
        VendorProfile {
            oui,
            alloc_size,
            wan_index,
            bssid_indices,
            device_count,
            wan_obs_prob: 1.0,
            bssid_obs_prob: 1.0,
            bssid_slot_probs: None,
            co_observation: 0.0,
            split_oui: None,
            max_gap_blocks: 0,
            base_nic: 0,
            eui64_fraction: 1.0,
        }
    }

    /// Seven-address blocks, WAN first, 5 GHz and 2.4 GHz radios at +5 and +6.
    pub fn avm(oui: Oui, device_count: u32) -> Self {
        VendorProfile::new(oui, 7, 0, vec![6, 5], device_count)
    }

    /// Sixteen-address blocks with the BSSID two below the WAN MAC.
    pub fn arris(oui: Oui, device_count: u32) -> Self {
        VendorProfile::new(oui, 16, 2, vec![0], device_count)
    }

    pub fn with_observation(mut self, wan: f64, bssid: f64, co_observation: f64) -> Self {
        self.wan_obs_prob = wan;
        self.bssid_obs_prob = bssid;
        self.co_observation = co_observation;
        self
    }

    pub fn true_offset(&self) -> i64 {
        self.bssid_indices[0] as i64 - self.wan_index as i64
    }

    fn slot_prob(&self, slot: usize) -> f64 {
        self.bssid_slot_probs
            .as_ref()
            .and_then(|p| p.get(slot).copied())
            .unwrap_or(self.bssid_obs_prob)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |reason: &str| {
            Err(SynthError::InvalidProfile {
                oui: self.oui,
                reason: reason.to_string(),
            })
        };
        if self.alloc_size == 0 {
            return bad("alloc_size must be positive");
        }
        if self.wan_index >= self.alloc_size {
            return bad("wan_index outside the block");
        }
        if self.bssid_indices.is_empty() {
            return bad("no BSSID positions");
        }
        if self
            .bssid_indices
            .iter()
            .any(|&i| i >= self.alloc_size)
        {
            return bad("BSSID position outside the block");
        }
        let probs = [self.wan_obs_prob, self.bssid_obs_prob, self.co_observation, self.eui64_fraction];
        let slots = self.bssid_slot_probs.iter().flatten();
        if probs.iter().chain(slots).any(|p| !(0.0..=1.0).contains(p)) {
            return bad("probabilities must lie in [0, 1]");
        }
        let blocks = self.device_count as u64 * (1 + self.max_gap_blocks as u64);
        let needed = self.base_nic as u64 + blocks * self.alloc_size as u64;
        if needed > NIC_SPACE as u64 {
            return Err(SynthError::CapacityExceeded { oui: self.oui, needed });
        }
        Ok(())
    }
}

/// A provider router with the service area of the CPE behind it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterSpec {
    pub address: Ipv6Address,
    pub center: GeoPoint,
    pub radius_km: f64,
    /// Upper 48 bits of the customer prefix.
    pub prefix48: u64,
    pub asn: u32,
}

/// Routers that devices are assigned to uniformly. With no routers, devices
/// are scattered over populated latitudes and no traces are emitted.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TopologyPlan {
    pub routers: Vec<RouterSpec>,
    /// Hops in front of every router on traced paths.
    #[serde(default)]
    pub core_hops: Vec<Ipv6Address>,
}

impl TopologyPlan {
    /// `count` routers on a ring of `spread_km` around `center`, each serving
    /// a disk of `radius_km`.
    pub fn metro(center: GeoPoint, count: usize, spread_km: f64, radius_km: f64) -> Self {
        let routers = (0..count)
            .map(|i| RouterSpec {
                address: Ipv6Address::from_parts(0x2001_0db8_ff00_0000, i as u64 + 1),
                center: if count == 1 {
                    center
                } else {
                    destination_point(center, 360.0 * i as f64 / count as f64, spread_km)
                },
                radius_km,
                prefix48: 0x2001_0db8_0000 + i as u64 * 0x10,
                asn: 64512,
            })
            .collect();
        TopologyPlan {
            routers,
            core_hops: vec![Ipv6Address::from_parts(0x2001_0db8_fffe_0000, 1)],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceRecord {
    pub device_id: u64,
    pub wan_mac: Mac48,
    pub bssids: Vec<Mac48>,
    pub lat: f64,
    pub lon: f64,
    pub addr: Ipv6Address,
    pub penultimate_router: Option<Ipv6Address>,
    /// The device's /48 as a network address.
    pub prefix48: Ipv6Address,
    pub asn: u32,
    pub uses_eui64: bool,
    pub wan_observed: bool,
    pub bssid_observed: Vec<bool>,
}

impl DeviceRecord {
    pub fn location(&self) -> GeoPoint {
        GeoPoint {
            lat: self.lat,
            lon: self.lon,
        }
    }

    /// The device appears in the WAN corpus with a decodable MAC.
    pub fn wan_visible(&self) -> bool {
        self.wan_observed && self.uses_eui64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedProfile {
    pub oui: Oui,
    pub alloc_size: u32,
    pub true_offset: i64,
    /// Offset of every radio, primary first.
    pub bssid_offsets: Vec<i64>,
    pub bssid_oui: Oui,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "noise", rename_all = "snake_case")]
pub enum NoiseRecord {
    /// A random IID that happens to carry the EUI-64 marker.
    FalseEui { addr: Ipv6Address, decoded: Mac48 },
    /// A device WAN MAC re-observed from a second AS.
    MultiAs { mac: Mac48, addr: Ipv6Address, asn: u32 },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthLedger {
    pub devices: Vec<DeviceRecord>,
    pub profiles: Vec<PlantedProfile>,
    pub noise: Vec<NoiseRecord>,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LedgerLine<'a> {
    Profile(&'a PlantedProfile),
    Device(&'a DeviceRecord),
    Noise(&'a NoiseRecord),
}

impl GroundTruthLedger {
    pub fn planted(&self, oui: Oui) -> Option<&PlantedProfile> {
        self.profiles.iter().find(|p| p.oui == oui)
    }

    /// One JSON object per line, tagged by `kind`: profiles, then devices,
    /// then noise.
    pub fn write_jsonl<W: Write>(&self, w: W) -> io::Result<()> {
        let lines = self
            .profiles
            .iter()
            .map(LedgerLine::Profile)
            .chain(self.devices.iter().map(LedgerLine::Device))
            .chain(self.noise.iter().map(LedgerLine::Noise));
        write_jsonl(w, lines)
    }
}

/// Observation and trace files in their wire formats.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SynthFiles {
    pub wan: Vec<WanLine>,
    pub bssid: Vec<BssidLine>,
    pub traces: Vec<TraceRecord>,
}

pub const WAN_FILE: &str = "wan.jsonl";
pub const BSSID_FILE: &str = "bssid.jsonl";
pub const TRACE_FILE: &str = "traces.jsonl";
pub const LEDGER_FILE: &str = "ledger.jsonl";

impl SynthFiles {
    /// Writes the three corpus files and the ledger into `dir`.
    pub fn write_dir(&self, ledger: &GroundTruthLedger, dir: &Path) -> io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let open = |name: &str| std::fs::File::create(dir.join(name)).map(io::BufWriter::new);
        write_jsonl(open(WAN_FILE)?, &self.wan)?;
        write_jsonl(open(BSSID_FILE)?, &self.bssid)?;
        write_jsonl(open(TRACE_FILE)?, &self.traces)?;
        ledger.write_jsonl(open(LEDGER_FILE)?)
    }
}

pub fn write_jsonl<W: Write, T: Serialize>(mut w: W, items: impl IntoIterator<Item = T>) -> io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

const BASE_TS: u64 = 1_600_000_000;

fn random_point(rng: &mut ChaCha8Rng, router: Option<&RouterSpec>) -> GeoPoint {
    match router {
        Some(r) => {
            let d = r.radius_km * rng.gen::<f64>().sqrt();
            destination_point(r.center, rng.gen_range(0.0..360.0), d)
        }
        None => GeoPoint {
            lat: rng.gen_range(-55.0..70.0),
            lon: rng.gen_range(-179.0..179.0),
        },
    }
}

fn random_iid_without_marker(rng: &mut ChaCha8Rng) -> u64 {
    loop {
        let iid = rng.gen::<u64>();
        if !has_eui64_marker(iid) {
            return iid;
        }
    }
}

/// Lays out every profile and samples observations and locations.
/// Identical inputs and seed give identical output.
pub fn generate(
    profiles: &[VendorProfile],
    topology: &TopologyPlan,
    seed: u64,
) -> Result<(SynthFiles, GroundTruthLedger), SynthError> {
    for p in profiles {
        p.validate()?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut files = SynthFiles::default();
    let mut ledger = GroundTruthLedger::default();
    let mut subnet = vec![0u16; topology.routers.len()];
    let mut device_id = 0u64;

    for p in profiles {
        let bssid_oui = p.split_oui.unwrap_or(p.oui);
        ledger.profiles.push(PlantedProfile {
            oui: p.oui,
            alloc_size: p.alloc_size,
            true_offset: p.true_offset(),
            bssid_offsets: p.bssid_indices.iter().map(|&i| i as i64 - p.wan_index as i64).collect(),
            bssid_oui,
        });
        let mut block = p.base_nic;
        for _ in 0..p.device_count {
            let wan_mac = Mac48::from_parts(p.oui, block + p.wan_index);
            let bssids: Vec<Mac48> = p
                .bssid_indices
                .iter()
                .map(|&i| Mac48::from_parts(bssid_oui, block + i))
                .collect();

            let coupled = rng.gen_bool(p.co_observation);
            let shared = rng.gen::<f64>();
            let mut observe = |prob: f64| {
                let u = if coupled { shared } else { rng.gen::<f64>() };
                u < prob
            };
            let wan_observed = observe(p.wan_obs_prob);
            let bssid_observed: Vec<bool> = (0..bssids.len()).map(|s| observe(p.slot_prob(s))).collect();

            let router_idx = (!topology.routers.is_empty()).then(|| rng.gen_range(0..topology.routers.len()));
            let router = router_idx.map(|i| &topology.routers[i]);
            let location = random_point(&mut rng, router);
            let prefix64 = match router_idx {
                Some(i) => {
                    let s = subnet[i];
                    subnet[i] = s.wrapping_add(1);
                    (topology.routers[i].prefix48 << 16) | s as u64
                }
                None => 0x2000_0000_0000_0000 | (rng.gen::<u64>() >> 4),
            };
            let uses_eui64 = rng.gen_bool(p.eui64_fraction);
            let addr = if uses_eui64 {
                encode_eui64(prefix64, wan_mac)
            } else {
                Ipv6Address::from_parts(prefix64, random_iid_without_marker(&mut rng))
            };
            let asn = router.map_or(64512 + (p.oui.value() % 1000), |r| r.asn);

            if wan_observed {
                files.wan.push(WanLine {
                    addr: addr.to_string(),
                    asn,
                    ts: BASE_TS + device_id,
                });
            }
            for (b, seen) in bssids.iter().zip(&bssid_observed) {
                if *seen {
                    files.bssid.push(BssidLine {
                        bssid: b.to_string(),
                        lat: location.lat,
                        lon: location.lon,
                        source: GeoSource::Synthetic.as_str().to_string(),
                    });
                }
            }
            if let Some(r) = router {
                let mut hops = topology.core_hops.clone();
                hops.push(r.address);
                hops.push(addr);
                files.traces.push(TraceRecord {
                    target: addr,
                    hops,
                    responded: true,
                });
            }
            ledger.devices.push(DeviceRecord {
                device_id,
                wan_mac,
                bssids,
                lat: location.lat,
                lon: location.lon,
                addr,
                penultimate_router: router.map(|r| r.address),
                prefix48: Ipv6Address::new(addr.network(48)),
                asn,
                uses_eui64,
                wan_observed,
                bssid_observed,
            });
            device_id += 1;
            let gap = if p.max_gap_blocks == 0 {
                0
            } else {
                rng.gen_range(0..=p.max_gap_blocks)
            };
            block += p.alloc_size * (1 + gap);
        }
    }
    Ok((files, ledger))
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseOptions {
    /// Random-IID addresses to draw.
    pub random_iids: u64,
    /// Probability that a drawn IID carries the EUI-64 marker.
    pub false_eui_rate: f64,
    /// Probability that an observed EUI-64 WAN MAC is re-observed from a
    /// second AS.
    pub multi_as_rate: f64,
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseReport {
    pub random_iids: u64,
    pub false_eui: u64,
    pub multi_as: u64,
}

/// Appends labeled noise to the WAN file and records it in the ledger.
/// Random IIDs without the marker are only counted: they are
/// indistinguishable from the non-EUI-64 devices `generate` already emits.
pub fn inject_noise(
    files: &mut SynthFiles,
    ledger: &mut GroundTruthLedger,
    options: &NoiseOptions,
    seed: u64,
) -> NoiseReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e6f_6973_65);
    let mut report = NoiseReport {
        random_iids: options.random_iids,
        ..Default::default()
    };
    if options.false_eui_rate > 0.0 {
        for _ in 0..options.random_iids {
            if !rng.gen_bool(options.false_eui_rate) {
                continue;
            }
            let iid = (rng.gen::<u64>() & !0x0000_00FF_FF00_0000) | 0x0000_00FF_FE00_0000;
            let addr = Ipv6Address::from_parts(rng.gen::<u64>() | 0x2000_0000_0000_0000, iid);
            let decoded = crate::mac::decode_eui64(addr).expect("marker set");
            files.wan.push(WanLine {
                addr: addr.to_string(),
                asn: 0,
                ts: BASE_TS,
            });
            ledger.noise.push(NoiseRecord::FalseEui { addr, decoded });
            report.false_eui += 1;
        }
    }
    if options.multi_as_rate > 0.0 {
        for d in ledger.devices.iter().filter(|d| d.wan_visible()) {
            if !rng.gen_bool(options.multi_as_rate) {
                continue;
            }
            let addr = Ipv6Address::from_parts(rng.gen::<u64>() | 0x2000_0000_0000_0000, d.addr.iid());
            let asn = d.asn + 1;
            files.wan.push(WanLine {
                addr: addr.to_string(),
                asn,
                ts: BASE_TS + d.device_id,
            });
            ledger.noise.push(NoiseRecord::MultiAs {
                mac: d.wan_mac,
                addr,
                asn,
            });
            report.multi_as += 1;
        }
    }
    report
}

/// An OUI whose offset confidence is planted exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantedConsistency {
    pub oui: Oui,
    pub wan: Vec<Mac48>,
    pub bssid: Vec<Mac48>,
    pub alloc_size: u32,
    /// `Some(-2)` when the planted class is the largest.
    pub offset: Option<i64>,
    /// Expected model confidence; exact when `bssid_count >= wan_count`.
    pub confidence: f64,
}

/// BSSIDs at the start of 32-address blocks; a share `fraction` of WAN MACs
/// sit two above their block start and the rest are spread evenly over the
/// in-block positions 3..=29. Each WAN votes only for its own residue class
/// and every spread vote is farther from zero than -2, so the planted class
/// wins ties and the confidence is the share of the largest class.
pub fn plant_consistency_oui(
    oui: Oui,
    wan_count: u32,
    bssid_count: u32,
    fraction: f64,
    seed: u64,
) -> PlantedConsistency {
    const ALLOC: u32 = 32;
    const PLANTED: u32 = 2;
    const SPREAD: u32 = 27;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let planted = ((fraction * wan_count as f64).round() as u32).min(wan_count);
    let mut positions: Vec<u32> = (0..wan_count)
        .map(|i| if i < planted { PLANTED } else { 3 + (i - planted) % SPREAD })
        .collect();
    for i in (1..positions.len()).rev() {
        positions.swap(i, rng.gen_range(0..=i));
    }
    let wan = positions
        .iter()
        .enumerate()
        .map(|(b, &r)| Mac48::from_parts(oui, b as u32 * ALLOC + r))
        .collect();
    let bssid = (0..bssid_count).map(|b| Mac48::from_parts(oui, b * ALLOC)).collect();
    let biggest_other = (wan_count - planted).div_ceil(SPREAD);
    PlantedConsistency {
        oui,
        wan,
        bssid,
        alloc_size: ALLOC,
        offset: (planted >= biggest_other && planted > 0).then_some(-(PLANTED as i64)),
        confidence: if wan_count == 0 {
            0.0
        } else {
            planted.max(biggest_other) as f64 / wan_count as f64
        },
    }
}
