//! WAN-MAC and BSSID corpora: parsing, deduplication and per-OUI indexing.
//!
//! Ingestion is append-only into a [`CorpusBuilder`]; [`CorpusBuilder::build`]
//! sorts and deduplicates everything into an immutable [`CorpusIndex`] whose
//! per-OUI NIC lists are strictly ascending.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::BufRead;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::GeoPoint;
use crate::mac::{decode_eui64_with, Ipv6Address, Mac48, Oui};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("index file: {0}")]
    Format(String),
}

/// Line-oriented input encodings accepted for every corpus file.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    Jsonl,
    Csv,
}

impl InputFormat {
    /// `.csv` files are CSV, everything else JSON lines.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => InputFormat::Csv,
            _ => InputFormat::Jsonl,
        }
    }
}

/// Where a BSSID geolocation came from.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeoSource {
    Apple,
    Wigle,
    Openwifi,
    Mylnikov,
    Openbmap,
    Synthetic,
    Other,
}

impl GeoSource {
    pub const ALL: [GeoSource; 7] = [
        GeoSource::Apple,
        GeoSource::Wigle,
        GeoSource::Openwifi,
        GeoSource::Mylnikov,
        GeoSource::Openbmap,
        GeoSource::Synthetic,
        GeoSource::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GeoSource::Apple => "apple",
            GeoSource::Wigle => "wigle",
            GeoSource::Openwifi => "openwifi",
            GeoSource::Mylnikov => "mylnikov",
            GeoSource::Openbmap => "openbmap",
            GeoSource::Synthetic => "synthetic",
            GeoSource::Other => "other",
        }
    }

    pub(crate) fn code(self) -> u8 {
        GeoSource::ALL.iter().position(|s| *s == self).unwrap() as u8
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        GeoSource::ALL.get(c as usize).copied()
    }
}

impl FromStr for GeoSource {
    type Err = std::convert::Infallible;

    /// Unknown tags map to [`GeoSource::Other`].
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        Ok(GeoSource::ALL
            .iter()
            .copied()
            .find(|g| g.as_str().eq_ignore_ascii_case(s))
            .unwrap_or(GeoSource::Other))
    }
}

impl fmt::Display for GeoSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A MAC decoded from an EUI-64 IPv6 address.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WanMacRecord {
    pub mac: Mac48,
    pub source_addr: Ipv6Address,
    /// 0 means unknown.
    pub asn: u32,
    pub observed_at: u64,
}

impl WanMacRecord {
    /// `None` when `addr` is not EUI-64.
    pub fn from_addr(addr: Ipv6Address, asn: u32, observed_at: u64, strict_ul: bool) -> Option<Self> {
        decode_eui64_with(addr, strict_ul).map(|mac| WanMacRecord {
            mac,
            source_addr: addr,
            asn,
            observed_at,
        })
    }
}

/// A BSSID with its geolocation.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BssidGeoRecord {
    pub bssid: Mac48,
    pub location: GeoPoint,
    pub source: GeoSource,
}

/// Wire form of a WAN observation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WanLine {
    pub addr: String,
    #[serde(default)]
    pub asn: u32,
    #[serde(default)]
    pub ts: u64,
}

/// Wire form of a BSSID geolocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BssidLine {
    pub bssid: String,
    pub lat: f64,
    pub lon: f64,
    #[serde(default = "default_source")]
    pub source: String,
}

fn default_source() -> String {
    "other".to_string()
}

/// Per-file ingestion counters. Bad lines are counted, never fatal.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub lines: u64,
    pub accepted: u64,
    pub malformed: u64,
    pub non_eui64: u64,
    pub out_of_range: u64,
}

impl IngestStats {
    pub fn merge(&mut self, other: &IngestStats) {
        self.lines += other.lines;
        self.accepted += other.accepted;
        self.malformed += other.malformed;
        self.non_eui64 += other.non_eui64;
        self.out_of_range += other.out_of_range;
    }
}

/// Which observation of a BSSID seen several times becomes canonical.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "policy", content = "seed")]
pub enum DedupePolicy {
    First,
    Last,
    Random(u64),
}

impl Default for DedupePolicy {
    fn default() -> Self {
        DedupePolicy::First
    }
}

/// Which IPv6 address stands for a MAC seen under several addresses.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "policy", content = "seed")]
pub enum RepresentativePolicy {
    /// Smallest `(timestamp, address)`.
    Earliest,
    /// Address with the smallest seeded hash; independent of input order.
    Random(u64),
}

impl Default for RepresentativePolicy {
    fn default() -> Self {
        RepresentativePolicy::Earliest
    }
}

/// splitmix64 finaliser.
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One deduplicated WAN MAC.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WanEntry {
    pub representative: WanMacRecord,
    /// Distinct IPv6 addresses carrying this MAC.
    pub multiplicity: u32,
    /// Distinct nonzero ASNs the MAC was seen in.
    pub asn_count: u32,
}

impl WanEntry {
    pub fn mac(&self) -> Mac48 {
        self.representative.mac
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OuiWanSet {
    pub nics: Vec<u32>,
    pub entries: Vec<WanEntry>,
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BssidEntry {
    /// The BSSID as observed; differs from the index key only for aliases.
    pub bssid: Mac48,
    pub location: GeoPoint,
    pub source: GeoSource,
    /// Added by [`CorpusIndex::canonicalize_ul`] under the U/L-flipped OUI.
    pub ul_alias: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OuiBssidSet {
    pub nics: Vec<u32>,
    pub entries: Vec<BssidEntry>,
}

impl OuiBssidSet {
    pub fn get(&self, nic: u32) -> Option<&BssidEntry> {
        self.nics.binary_search(&nic).ok().map(|i| &self.entries[i])
    }
}

/// Immutable per-OUI view of both corpora.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorpusIndex {
    pub wan_by_oui: BTreeMap<Oui, OuiWanSet>,
    pub bssid_by_oui: BTreeMap<Oui, OuiBssidSet>,
    pub multi_as_excluded: BTreeSet<Mac48>,
}

impl CorpusIndex {
    pub fn wan_mac_count(&self) -> usize {
        self.wan_by_oui.values().map(|s| s.nics.len()).sum()
    }

    pub fn bssid_count(&self) -> usize {
        self.bssid_by_oui.values().map(|s| s.nics.len()).sum()
    }

    pub fn wan_nics(&self, oui: Oui) -> &[u32] {
        self.wan_by_oui.get(&oui).map_or(&[], |s| &s.nics)
    }

    pub fn bssid_nics(&self, oui: Oui) -> &[u32] {
        self.bssid_by_oui.get(&oui).map_or(&[], |s| &s.nics)
    }

    pub fn lookup_bssid(&self, mac: Mac48) -> Option<&BssidEntry> {
        self.bssid_by_oui.get(&mac.oui())?.get(mac.nic())
    }

    /// OUIs present in both corpora.
    pub fn shared_ouis(&self) -> impl Iterator<Item = Oui> + '_ {
        self.wan_by_oui
            .keys()
            .copied()
            .filter(|o| self.bssid_by_oui.contains_key(o))
    }

    /// Moves every MAC seen under two or more distinct nonzero ASNs into
    /// `multi_as_excluded`.
    pub fn exclude_multi_as(mut self) -> Self {
        for set in self.wan_by_oui.values_mut() {
            if set.entries.iter().all(|e| e.asn_count < 2) {
                continue;
            }
            let mut nics = Vec::with_capacity(set.nics.len());
            let mut entries = Vec::with_capacity(set.entries.len());
            for (nic, e) in set.nics.iter().zip(&set.entries) {
                if e.asn_count >= 2 {
                    self.multi_as_excluded.insert(e.mac());
                } else {
                    nics.push(*nic);
                    entries.push(*e);
                }
            }
            set.nics = nics;
            set.entries = entries;
        }
        self.wan_by_oui.retain(|_, s| !s.nics.is_empty());
        self
    }

    /// For BSSIDs whose OUI is unregistered but whose U/L-flipped OUI is,
    /// adds an alias under the flipped OUI. Originals are kept; an alias
    /// never displaces a BSSID already present at the same key.
    pub fn canonicalize_ul(mut self, registry: &BTreeSet<Oui>) -> Self {
        let mut additions: BTreeMap<Oui, Vec<(u32, BssidEntry)>> = BTreeMap::new();
        for (oui, set) in &self.bssid_by_oui {
            let flipped = oui.flip_ul_bit();
            if registry.contains(oui) || !registry.contains(&flipped) {
                continue;
            }
            let target = additions.entry(flipped).or_default();
            for (nic, e) in set.nics.iter().zip(&set.entries) {
                if !e.ul_alias {
                    target.push((*nic, BssidEntry { ul_alias: true, ..*e }));
                }
            }
        }
        for (oui, adds) in additions {
            let set = self.bssid_by_oui.entry(oui).or_default();
            let mut merged: Vec<(u32, BssidEntry)> =
                set.nics.iter().copied().zip(set.entries.iter().copied()).collect();
            merged.extend(adds);
            // Stable sort keeps the original entry first on a key collision.
            merged.sort_by_key(|(nic, _)| *nic);
            merged.dedup_by_key(|(nic, _)| *nic);
            set.nics = merged.iter().map(|(n, _)| *n).collect();
            set.entries = merged.into_iter().map(|(_, e)| e).collect();
        }
        self
    }

    /// Checks the structural invariants; used by tests and after loading.
    pub fn validate(&self) -> Result<(), String> {
        for (oui, s) in &self.wan_by_oui {
            if s.nics.len() != s.entries.len() || !s.nics.windows(2).all(|w| w[0] < w[1]) {
                return Err(format!("WAN NIC list for {oui} is not strictly ascending"));
            }
            for (nic, e) in s.nics.iter().zip(&s.entries) {
                if e.mac() != Mac48::from_parts(*oui, *nic) {
                    return Err(format!("WAN entry {} filed under {oui}", e.mac()));
                }
                if self.multi_as_excluded.contains(&e.mac()) {
                    return Err(format!("{} is both indexed and excluded", e.mac()));
                }
            }
        }
        for (oui, s) in &self.bssid_by_oui {
            if s.nics.len() != s.entries.len() || !s.nics.windows(2).all(|w| w[0] < w[1]) {
                return Err(format!("BSSID NIC list for {oui} is not strictly ascending"));
            }
        }
        Ok(())
    }
}

#[derive(Copy, Clone)]
struct RawWan {
    mac: u64,
    addr: u128,
    asn: u32,
    ts: u64,
}

#[derive(Copy, Clone)]
struct RawBssid {
    mac: u64,
    seq: u64,
    location: GeoPoint,
    source: GeoSource,
}

/// Accumulates raw observations; [`build`](Self::build) produces the index.
#[derive(Default)]
pub struct CorpusBuilder {
    wan: Vec<RawWan>,
    bssid: Vec<RawBssid>,
    seq: u64,
    dedupe: DedupePolicy,
    representative: RepresentativePolicy,
    strict_ul: bool,
}

impl CorpusBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn dedupe(mut self, policy: DedupePolicy) -> Self {
        self.dedupe = policy;
        self
    }

    pub fn representative(mut self, policy: RepresentativePolicy) -> Self {
        self.representative = policy;
        self
    }

    /// Require the U/L bit when recognising EUI-64 addresses.
    pub fn strict_ul(mut self, strict: bool) -> Self {
        self.strict_ul = strict;
        self
    }

    pub fn push_wan(&mut self, r: WanMacRecord) {
        self.wan.push(RawWan {
            mac: r.mac.value(),
            addr: r.source_addr.value(),
            asn: r.asn,
            ts: r.observed_at,
        });
    }

    pub fn push_bssid(&mut self, r: BssidGeoRecord) {
        self.bssid.push(RawBssid {
            mac: r.bssid.value(),
            seq: self.seq,
            location: r.location,
            source: r.source,
        });
        self.seq += 1;
    }

    pub fn extend_wan(&mut self, records: impl IntoIterator<Item = WanMacRecord>) {
        for r in records {
            self.push_wan(r);
        }
    }

    pub fn extend_bssid(&mut self, records: impl IntoIterator<Item = BssidGeoRecord>) {
        for r in records {
            self.push_bssid(r);
        }
    }

    /// Converts one wire line; `Err` carries the counter to bump.
    fn accept_wan(&mut self, line: WanLine, stats: &mut IngestStats) {
        match line.addr.parse::<Ipv6Address>() {
            Err(_) => stats.malformed += 1,
            Ok(addr) => match WanMacRecord::from_addr(addr, line.asn, line.ts, self.strict_ul) {
                Some(r) => {
                    stats.accepted += 1;
                    self.push_wan(r);
                }
                None => stats.non_eui64 += 1,
            },
        }
    }

    fn accept_bssid(&mut self, line: BssidLine, stats: &mut IngestStats) {
        let Ok(bssid) = line.bssid.parse::<Mac48>() else {
            stats.malformed += 1;
            return;
        };
        let Ok(location) = GeoPoint::new(line.lat, line.lon) else {
            stats.out_of_range += 1;
            return;
        };
        stats.accepted += 1;
        self.push_bssid(BssidGeoRecord {
            bssid,
            location,
            source: line.source.parse().unwrap(),
        });
    }

    /// Reads a WAN file. Malformed lines are counted and skipped.
    pub fn ingest_wan_reader<R: BufRead>(
        &mut self,
        reader: R,
        format: InputFormat,
    ) -> Result<IngestStats, CorpusError> {
        let mut stats = IngestStats::default();
        for_each_line::<WanLine, _>(reader, format, "addr", &mut stats, |line, stats| {
            self.accept_wan(line, stats)
        })?;
        Ok(stats)
    }

    /// Reads a BSSID file. Malformed or out-of-range lines are counted and skipped.
    pub fn ingest_bssid_reader<R: BufRead>(
        &mut self,
        reader: R,
        format: InputFormat,
    ) -> Result<IngestStats, CorpusError> {
        let mut stats = IngestStats::default();
        for_each_line::<BssidLine, _>(reader, format, "bssid", &mut stats, |line, stats| {
            self.accept_bssid(line, stats)
        })?;
        Ok(stats)
    }

    pub fn build(mut self) -> CorpusIndex {
        let mut index = CorpusIndex::default();
        self.build_wan(&mut index);
        self.build_bssid(&mut index);
        index
    }

    fn build_wan(&mut self, index: &mut CorpusIndex) {
        let raw = &mut self.wan;
        raw.sort_unstable_by_key(|r| (r.mac, r.addr, r.ts, r.asn));
        let policy = self.representative;
        let mut i = 0;
        while i < raw.len() {
            let mac = raw[i].mac;
            let mut j = i;
            while j < raw.len() && raw[j].mac == mac {
                j += 1;
            }
            let group = &raw[i..j];
            let mut multiplicity = 0u32;
            let mut prev_addr = None;
            for r in group {
                if prev_addr != Some(r.addr) {
                    multiplicity += 1;
                    prev_addr = Some(r.addr);
                }
            }
            let mut asns: Vec<u32> = group.iter().map(|r| r.asn).filter(|a| *a != 0).collect();
            asns.sort_unstable();
            asns.dedup();
            let rep = match policy {
                RepresentativePolicy::Earliest => {
                    group.iter().min_by_key(|r| (r.ts, r.addr, r.asn)).unwrap()
                }
                RepresentativePolicy::Random(seed) => group
                    .iter()
                    .min_by_key(|r| {
                        let h = mix64(seed ^ mix64(r.addr as u64) ^ mix64((r.addr >> 64) as u64).rotate_left(17));
                        (h, r.ts, r.asn)
                    })
                    .unwrap(),
            };
            let mac = Mac48::new(mac);
            let set = index.wan_by_oui.entry(mac.oui()).or_default();
            set.nics.push(mac.nic());
            set.entries.push(WanEntry {
                representative: WanMacRecord {
                    mac,
                    source_addr: Ipv6Address::new(rep.addr),
                    asn: rep.asn,
                    observed_at: rep.ts,
                },
                multiplicity,
                asn_count: asns.len() as u32,
            });
            i = j;
        }
    }

    fn build_bssid(&mut self, index: &mut CorpusIndex) {
        let raw = &mut self.bssid;
        raw.sort_unstable_by_key(|r| (r.mac, r.seq));
        let mut i = 0;
        let mut candidates: Vec<RawBssid> = Vec::new();
        while i < raw.len() {
            let mac = raw[i].mac;
            candidates.clear();
            while i < raw.len() && raw[i].mac == mac {
                let r = raw[i];
                let same = |c: &RawBssid| {
                    c.location.lat.to_bits() == r.location.lat.to_bits()
                        && c.location.lon.to_bits() == r.location.lon.to_bits()
                        && c.source == r.source
                };
                if !candidates.iter().any(same) {
                    candidates.push(r);
                }
                i += 1;
            }
            let pick = match self.dedupe {
                DedupePolicy::First => 0,
                DedupePolicy::Last => candidates.len() - 1,
                DedupePolicy::Random(seed) => {
                    ChaCha8Rng::seed_from_u64(seed ^ mix64(mac)).gen_range(0..candidates.len())
                }
            };
            let c = candidates[pick];
            let mac = Mac48::new(mac);
            let set = index.bssid_by_oui.entry(mac.oui()).or_default();
            set.nics.push(mac.nic());
            set.entries.push(BssidEntry {
                bssid: mac,
                location: c.location,
                source: c.source,
                ul_alias: false,
            });
        }
    }
}

/// Builds an index from WAN records alone.
pub fn ingest_wan(records: impl IntoIterator<Item = WanMacRecord>) -> CorpusIndex {
    let mut b = CorpusBuilder::new();
    b.extend_wan(records);
    b.build()
}

/// Builds an index from BSSID records alone.
pub fn ingest_bssid(
    records: impl IntoIterator<Item = BssidGeoRecord>,
    dedupe: DedupePolicy,
) -> CorpusIndex {
    let mut b = CorpusBuilder::new().dedupe(dedupe);
    b.extend_bssid(records);
    b.build()
}

fn for_each_line<T, R>(
    reader: R,
    format: InputFormat,
    header_field: &str,
    stats: &mut IngestStats,
    mut sink: impl FnMut(T, &mut IngestStats),
) -> Result<(), CorpusError>
where
    T: serde::de::DeserializeOwned,
    R: BufRead,
{
    match format {
        InputFormat::Jsonl => {
            for line in reader.lines() {
                let line = line?;
                let line = line.trim();
                if line.is_empty() {
                    continue;
                }
                stats.lines += 1;
                match serde_json::from_str::<T>(line) {
                    Ok(v) => sink(v, stats),
                    Err(_) => stats.malformed += 1,
                }
            }
        }
        InputFormat::Csv => {
            let mut rdr = csv::ReaderBuilder::new()
                .has_headers(false)
                .flexible(true)
                .trim(csv::Trim::All)
                .comment(Some(b'#'))
                .from_reader(reader);
            let mut first = true;
            for rec in rdr.records() {
                let rec = match rec {
                    Ok(r) => r,
                    Err(e) if e.is_io_error() => return Err(e.into()),
                    Err(_) => {
                        stats.lines += 1;
                        stats.malformed += 1;
                        continue;
                    }
                };
                if std::mem::take(&mut first) && rec.get(0) == Some(header_field) {
                    continue;
                }
                if rec.iter().all(str::is_empty) {
                    continue;
                }
                stats.lines += 1;
                match deserialize_csv::<T>(&rec, header_field) {
                    Some(v) => sink(v, stats),
                    None => stats.malformed += 1,
                }
            }
        }
    }
    Ok(())
}

fn deserialize_csv<T: serde::de::DeserializeOwned>(rec: &csv::StringRecord, first: &str) -> Option<T> {
    let headers: csv::StringRecord = match first {
        "addr" => ["addr", "asn", "ts"].iter().take(rec.len()).collect(),
        _ => ["bssid", "lat", "lon", "source"].iter().take(rec.len()).collect(),
    };
    // Blank optional columns fall back to their defaults.
    let mut h = csv::StringRecord::new();
    let mut r = csv::StringRecord::new();
    for (name, value) in headers.iter().zip(rec.iter()) {
        if !value.is_empty() {
            h.push_field(name);
            r.push_field(value);
        }
    }
    r.deserialize(Some(&h)).ok()
}

/// Reads a registered-OUI list: one `AA:BB:CC` per line, optionally
/// followed by `,vendor`. Lines that do not start with an OUI are ignored.
pub fn read_oui_registry<R: BufRead>(reader: R) -> Result<BTreeSet<Oui>, CorpusError> {
    Ok(read_oui_vendors(reader)?.into_keys().collect())
}

/// Reads `AA:BB:CC,Vendor name` lines into a map; the vendor may be empty.
pub fn read_oui_vendors<R: BufRead>(reader: R) -> Result<BTreeMap<Oui, String>, CorpusError> {
    let mut out = BTreeMap::new();
    for line in reader.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (head, vendor) = match line.split_once([',', '\t']) {
            Some((h, v)) => (h, v.trim().trim_matches('"')),
            None => (line, ""),
        };
        if let Ok(oui) = head.trim().parse::<Oui>() {
            out.insert(oui, vendor.to_string());
        }
    }
    Ok(out)
}
