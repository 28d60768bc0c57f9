//! Compact on-disk form of a [`CorpusIndex`].
//!
//! Layout (little endian): magic `EGIX`, one version byte, then three
//! sections. Every per-OUI block stores its NICs in ascending order, so a
//! file written here loads without re-sorting.
//!
//! ```text
//! u32 wan_oui_count
//!   { u32 oui, u32 n, n × { u32 nic, u128 addr, u32 asn, u64 ts, u32 multiplicity, u32 asn_count } }
//! u32 excluded_count, excluded_count × u64 mac
//! u32 bssid_oui_count
//!   { u32 oui, u32 n, n × { u32 nic, u64 bssid, f64 lat, f64 lon, u8 source, u8 ul_alias } }
//! ```

use std::io::{Read, Write};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::corpus::{BssidEntry, CorpusError, CorpusIndex, GeoSource, OuiBssidSet, OuiWanSet, WanEntry, WanMacRecord};
use crate::geo::GeoPoint;
use crate::mac::{Ipv6Address, Mac48, Oui};

pub const MAGIC: &[u8; 4] = b"EGIX";
pub const VERSION: u8 = 1;

fn bad(msg: impl Into<String>) -> CorpusError {
    CorpusError::Format(msg.into())
}

pub fn write_index<W: Write>(index: &CorpusIndex, mut w: W) -> Result<(), CorpusError> {
    w.write_all(MAGIC)?;
    w.write_u8(VERSION)?;
    w.write_u32::<LE>(index.wan_by_oui.len() as u32)?;
    for (oui, set) in &index.wan_by_oui {
        w.write_u32::<LE>(oui.value())?;
        w.write_u32::<LE>(set.nics.len() as u32)?;
        for (nic, e) in set.nics.iter().zip(&set.entries) {
            let r = &e.representative;
            w.write_u32::<LE>(*nic)?;
            w.write_u128::<LE>(r.source_addr.value())?;
            w.write_u32::<LE>(r.asn)?;
            w.write_u64::<LE>(r.observed_at)?;
            w.write_u32::<LE>(e.multiplicity)?;
            w.write_u32::<LE>(e.asn_count)?;
        }
    }
    w.write_u32::<LE>(index.multi_as_excluded.len() as u32)?;
    for m in &index.multi_as_excluded {
        w.write_u64::<LE>(m.value())?;
    }
    w.write_u32::<LE>(index.bssid_by_oui.len() as u32)?;
    for (oui, set) in &index.bssid_by_oui {
        w.write_u32::<LE>(oui.value())?;
        w.write_u32::<LE>(set.nics.len() as u32)?;
        for (nic, e) in set.nics.iter().zip(&set.entries) {
            w.write_u32::<LE>(*nic)?;
            w.write_u64::<LE>(e.bssid.value())?;
            w.write_f64::<LE>(e.location.lat)?;
            w.write_f64::<LE>(e.location.lon)?;
            w.write_u8(e.source.code())?;
            w.write_u8(e.ul_alias as u8)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_index<R: Read>(mut r: R) -> Result<CorpusIndex, CorpusError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not an index file (bad magic)"));
    }
    let version = r.read_u8()?;
    if version != VERSION {
        return Err(bad(format!("unsupported index version {version}")));
    }
    let mut index = CorpusIndex::default();
    for _ in 0..r.read_u32::<LE>()? {
        let oui = Oui::new(r.read_u32::<LE>()?);
        let n = r.read_u32::<LE>()? as usize;
        let mut set = OuiWanSet {
            nics: Vec::with_capacity(n),
            entries: Vec::with_capacity(n),
        };
        for _ in 0..n {
            let nic = r.read_u32::<LE>()?;
            let addr = Ipv6Address::new(r.read_u128::<LE>()?);
            let asn = r.read_u32::<LE>()?;
            let ts = r.read_u64::<LE>()?;
            let multiplicity = r.read_u32::<LE>()?;
            let asn_count = r.read_u32::<LE>()?;
            set.nics.push(nic);
            set.entries.push(WanEntry {
                representative: WanMacRecord {
                    mac: Mac48::from_parts(oui, nic),
                    source_addr: addr,
                    asn,
                    observed_at: ts,
                },
                multiplicity,
                asn_count,
            });
        }
        index.wan_by_oui.insert(oui, set);
    }
    for _ in 0..r.read_u32::<LE>()? {
        index.multi_as_excluded.insert(Mac48::new(r.read_u64::<LE>()?));
    }
    for _ in 0..r.read_u32::<LE>()? {
        let oui = Oui::new(r.read_u32::<LE>()?);
        let n = r.read_u32::<LE>()? as usize;
        let mut set = OuiBssidSet {
            nics: Vec::with_capacity(n),
            entries: Vec::with_capacity(n),
        };
        for _ in 0..n {
            let nic = r.read_u32::<LE>()?;
            let bssid = Mac48::new(r.read_u64::<LE>()?);
            let lat = r.read_f64::<LE>()?;
            let lon = r.read_f64::<LE>()?;
            let source = GeoSource::from_code(r.read_u8()?).ok_or_else(|| bad("unknown source code"))?;
            let ul_alias = r.read_u8()? != 0;
            let location = GeoPoint::new(lat, lon).map_err(|e| bad(e.to_string()))?;
            set.nics.push(nic);
            set.entries.push(BssidEntry {
                bssid,
                location,
                source,
                ul_alias,
            });
        }
        index.bssid_by_oui.insert(oui, set);
    }
    index.validate().map_err(bad)?;
    Ok(index)
}
