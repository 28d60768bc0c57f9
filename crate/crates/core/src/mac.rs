//! MAC address and EUI-64 primitives.
//!
//! Everything here is pure bit arithmetic on integers: a [`Mac48`] is a
//! 48-bit value, an [`Oui`] its upper 24 bits, and an [`Ipv6Address`] a
//! 128-bit value whose lower 64 bits are the interface identifier (IID).

use std::fmt;
use std::net::Ipv6Addr;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

const MAC_MASK: u64 = (1 << 48) - 1;
const NIC_MASK: u64 = 0x00FF_FFFF;
const IID_MASK: u128 = u64::MAX as u128;

/// Universal/Local bit of the first octet.
pub const UL_BIT: u8 = 0x02;

/// Number of NIC values inside one OUI.
pub const NIC_SPACE: u32 = 1 << 24;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("invalid MAC address `{0}`")]
    Mac(String),
    #[error("invalid OUI `{0}`")]
    Oui(String),
    #[error("invalid IPv6 address `{0}`")]
    Ipv6(String),
}

/// A 48-bit IEEE MAC address.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Mac48(u64);

impl Mac48 {
    /// Builds a MAC from its integer value; bits above 48 are discarded.
    pub const fn new(value: u64) -> Self {
        Mac48(value & MAC_MASK)
    }

    pub const fn from_parts(oui: Oui, nic: u32) -> Self {
        Mac48(((oui.0 as u64) << 24) | (nic as u64 & NIC_MASK))
    }

    pub fn from_octets(o: [u8; 6]) -> Self {
        let mut buf = [0u8; 8];
        buf[2..].copy_from_slice(&o);
        Mac48(u64::from_be_bytes(buf))
    }

    pub const fn value(self) -> u64 {
        self.0
    }

    pub fn octets(self) -> [u8; 6] {
        let b = self.0.to_be_bytes();
        [b[2], b[3], b[4], b[5], b[6], b[7]]
    }

    pub const fn oui(self) -> Oui {
        Oui((self.0 >> 24) as u32)
    }

    /// Lower 24 bits, assigned per device by the vendor.
    pub const fn nic(self) -> u32 {
        (self.0 & NIC_MASK) as u32
    }

    /// True when the locally-administered bit is set.
    pub const fn is_local(self) -> bool {
        (self.0 >> 40) as u8 & UL_BIT != 0
    }

    /// Inverts the U/L bit; an involution.
    pub const fn flip_ul_bit(self) -> Self {
        Mac48(self.0 ^ ((UL_BIT as u64) << 40))
    }

    /// Adds `delta` to the address, staying inside the same OUI.
    pub fn checked_add(self, delta: i64) -> Option<Self> {
        let nic = self.nic() as i64 + delta;
        if (0..NIC_SPACE as i64).contains(&nic) {
            Some(Mac48::from_parts(self.oui(), nic as u32))
        } else {
            None
        }
    }
}

/// Free-function form of [`Mac48::flip_ul_bit`].
pub fn flip_ul_bit(mac: Mac48) -> Mac48 {
    mac.flip_ul_bit()
}

/// Free-function form of [`Mac48::checked_add`].
pub fn mac_add(mac: Mac48, delta: i64) -> Option<Mac48> {
    mac.checked_add(delta)
}

impl fmt::Display for Mac48 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let o = self.octets();
        write!(
            f,
            "{:02X}:{:02X}:{:02X}:{:02X}:{:02X}:{:02X}",
            o[0], o[1], o[2], o[3], o[4], o[5]
        )
    }
}

/// Parses `n` hex octets separated by `:` or `-`, or given as one bare run.
fn parse_octets<const N: usize>(s: &str) -> Option<[u8; N]> {
    let s = s.trim();
    let mut out = [0u8; N];
    if s.contains(':') || s.contains('-') {
        let mut parts = s.split(|c| c == ':' || c == '-');
        for slot in out.iter_mut() {
            let p = parts.next()?;
            if p.is_empty() || p.len() > 2 {
                return None;
            }
            *slot = u8::from_str_radix(p, 16).ok()?;
        }
        if parts.next().is_some() {
            return None;
        }
    } else {
        if s.len() != 2 * N || !s.is_ascii() {
            return None;
        }
        for (i, slot) in out.iter_mut().enumerate() {
            *slot = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).ok()?;
        }
    }
    Some(out)
}

impl FromStr for Mac48 {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_octets::<6>(s)
            .map(Mac48::from_octets)
            .ok_or_else(|| ParseError::Mac(s.to_string()))
    }
}

impl Serialize for Mac48 {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Mac48 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = <std::borrow::Cow<'de, str>>::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Organizationally Unique Identifier: the vendor's 24-bit prefix.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Oui(u32);

impl Oui {
    pub const fn new(value: u32) -> Self {
        Oui(value & 0x00FF_FFFF)
    }

    pub const fn value(self) -> u32 {
        self.0
    }

    pub const fn flip_ul_bit(self) -> Self {
        Oui(self.0 ^ ((UL_BIT as u32) << 16))
    }
}

impl fmt::Display for Oui {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = self.0.to_be_bytes();
        write!(f, "{:02X}:{:02X}:{:02X}", b[1], b[2], b[3])
    }
}

impl FromStr for Oui {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_octets::<3>(s)
            .map(|o| Oui(u32::from_be_bytes([0, o[0], o[1], o[2]])))
            .ok_or_else(|| ParseError::Oui(s.to_string()))
    }
}

impl Serialize for Oui {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Oui {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = <std::borrow::Cow<'de, str>>::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A 128-bit IPv6 address kept as an integer.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Ipv6Address(u128);

impl Ipv6Address {
    pub const fn new(value: u128) -> Self {
        Ipv6Address(value)
    }

    pub const fn from_parts(prefix: u64, iid: u64) -> Self {
        Ipv6Address(((prefix as u128) << 64) | iid as u128)
    }

    pub const fn value(self) -> u128 {
        self.0
    }

    /// Interface identifier: the lower 64 bits.
    pub const fn iid(self) -> u64 {
        (self.0 & IID_MASK) as u64
    }

    /// Upper 64 bits (the /64 network).
    pub const fn prefix64(self) -> u64 {
        (self.0 >> 64) as u64
    }

    /// The address masked to its first `len` bits.
    pub fn network(self, len: u8) -> u128 {
        match len {
            0 => 0,
            l if l >= 128 => self.0,
            l => self.0 & (u128::MAX << (128 - l as u32)),
        }
    }
}

impl From<Ipv6Addr> for Ipv6Address {
    fn from(a: Ipv6Addr) -> Self {
        Ipv6Address(u128::from(a))
    }
}

impl From<Ipv6Address> for Ipv6Addr {
    fn from(a: Ipv6Address) -> Self {
        Ipv6Addr::from(a.0)
    }
}

impl fmt::Display for Ipv6Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        Ipv6Addr::from(self.0).fmt(f)
    }
}

impl FromStr for Ipv6Address {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.trim()
            .parse::<Ipv6Addr>()
            .map(Ipv6Address::from)
            .map_err(|_| ParseError::Ipv6(s.to_string()))
    }
}

impl Serialize for Ipv6Address {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Ipv6Address {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = <std::borrow::Cow<'de, str>>::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Returns true when IID bytes 4 and 5 carry the `FF:FE` marker.
pub const fn has_eui64_marker(iid: u64) -> bool {
    (iid >> 24) & 0xFFFF == 0xFFFE
}

/// Extracts the MAC embedded in an EUI-64 interface identifier.
///
/// Only the `FF:FE` marker is checked. See [`decode_eui64_strict`] for the
/// variant that also requires the U/L bit of the IID to be set.
pub fn decode_eui64(addr: Ipv6Address) -> Option<Mac48> {
    let iid = addr.iid();
    if !has_eui64_marker(iid) {
        return None;
    }
    let raw = ((iid >> 40) << 24) | (iid & NIC_MASK);
    Some(Mac48::new(raw).flip_ul_bit())
}

/// Like [`decode_eui64`] but rejects IIDs whose U/L bit is clear, i.e.
/// addresses that would embed a locally administered MAC.
pub fn decode_eui64_strict(addr: Ipv6Address) -> Option<Mac48> {
    let universal_in_iid = (addr.iid() >> 56) as u8 & UL_BIT != 0;
    if universal_in_iid {
        decode_eui64(addr)
    } else {
        None
    }
}

/// Decodes with the given strictness.
pub fn decode_eui64_with(addr: Ipv6Address, strict_ul: bool) -> Option<Mac48> {
    if strict_ul {
        decode_eui64_strict(addr)
    } else {
        decode_eui64(addr)
    }
}

/// Builds the modified EUI-64 SLAAC address for `mac` under a /64 `prefix`.
pub fn encode_eui64(prefix: u64, mac: Mac48) -> Ipv6Address {
    let m = mac.flip_ul_bit().value();
    let iid = ((m >> 24) << 40) | (0xFFFE << 24) | (m & NIC_MASK);
    Ipv6Address::from_parts(prefix, iid)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mac(s: &str) -> Mac48 {
        s.parse().unwrap()
    }

    fn addr(s: &str) -> Ipv6Address {
        s.parse().unwrap()
    }

    #[test]
    fn decodes_link_local_example() {
        let m = decode_eui64(addr("fe80::211:22ff:fe33:4455")).unwrap();
        assert_eq!(m.to_string(), "00:11:22:33:44:55");
    }

    #[test]
    fn decode_rejects_missing_marker() {
        assert_eq!(decode_eui64(addr("2001:db8::1")), None);
        assert_eq!(decode_eui64(addr("2001:db8::211:22fe:ff33:4455")), None);
    }

    #[test]
    fn decode_flips_ul_bit() {
        let m = decode_eui64(addr("2001:db8::a6f4:c2ff:fe12:3456")).unwrap();
        assert_eq!(m, mac("A4:F4:C2:12:34:56"));
    }

    #[test]
    fn encode_matches_known_addresses() {
        let ll = addr("fe80::").prefix64();
        assert_eq!(
            encode_eui64(ll, mac("00:11:22:33:44:55")),
            addr("fe80::211:22ff:fe33:4455")
        );
        let doc = addr("2001:db8::").prefix64();
        assert_eq!(
            encode_eui64(doc, mac("A4:F4:C2:12:34:56")).to_string(),
            "2001:db8::a6f4:c2ff:fe12:3456"
        );
    }

    #[test]
    fn strict_mode_requires_ul_bit() {
        // IID 0011:22ff:... has the U/L bit clear, so the embedded MAC would be local.
        let a = addr("2001:db8::11:22ff:fe33:4455");
        assert_eq!(decode_eui64(a), Some(mac("02:11:22:33:44:55")));
        assert_eq!(decode_eui64_strict(a), None);
        let b = addr("fe80::211:22ff:fe33:4455");
        assert_eq!(decode_eui64_strict(b), Some(mac("00:11:22:33:44:55")));
    }

    #[test]
    fn flip_ul_examples() {
        assert_eq!(mac("C0:4A:00:00:00:01").flip_ul_bit(), mac("C2:4A:00:00:00:01"));
        assert_eq!(mac("00:1D:D1:AA:BB:CC").flip_ul_bit(), mac("02:1D:D1:AA:BB:CC"));
        let m = mac("C0:4A:00:00:00:01");
        assert_eq!(flip_ul_bit(flip_ul_bit(m)), m);
        assert_eq!("C0:4A:00".parse::<Oui>().unwrap().flip_ul_bit().to_string(), "C2:4A:00");
    }

    #[test]
    fn mac_add_stays_in_oui() {
        assert_eq!(mac_add(mac("00:1D:D1:00:00:10"), -2), Some(mac("00:1D:D1:00:00:0E")));
        assert_eq!(mac_add(mac("00:1D:D1:00:00:01"), -2), None);
        assert_eq!(mac_add(mac("00:11:22:FF:FF:FE"), 6), None);
        assert_eq!(mac_add(mac("00:11:22:FF:FF:FE"), 1), Some(mac("00:11:22:FF:FF:FF")));
    }

    #[test]
    fn parse_accepts_variants() {
        let m = mac("AA:BB:CC:DD:EE:FF");
        assert_eq!(mac("aa-bb-cc-dd-ee-ff"), m);
        assert_eq!(mac("aAbBcCdDeEfF"), m);
        assert_eq!(mac(" aa:bb:cc:dd:ee:ff "), m);
        assert!("aa:bb:cc:dd:ee".parse::<Mac48>().is_err());
        assert!("aa:bb:cc:dd:ee:ff:00".parse::<Mac48>().is_err());
        assert!("aa:bb:cc:dd:ee:fg".parse::<Mac48>().is_err());
        assert!("aaa:bb:cc:dd:ee:f".parse::<Mac48>().is_err());
    }

    #[test]
    fn oui_nic_split() {
        let m = mac("00:1D:D1:12:34:56");
        assert_eq!(m.oui().value(), 0x001DD1);
        assert_eq!(m.nic(), 0x123456);
        assert_eq!(Mac48::from_parts(m.oui(), m.nic()), m);
        assert_eq!(m.oui().to_string(), "00:1D:D1");
    }

    #[test]
    fn network_masks() {
        let a = addr("2001:db8:1234:5678::1");
        assert_eq!(a.network(48), addr("2001:db8:1234::").value());
        assert_eq!(a.network(0), 0);
        assert_eq!(a.network(128), a.value());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn eui64_round_trip(prefix in any::<u64>(), v in 0u64..(1 << 48)) {
                let m = Mac48::new(v);
                prop_assert_eq!(decode_eui64(encode_eui64(prefix, m)), Some(m));
            }

            #[test]
            fn text_round_trip(v in 0u64..(1 << 48)) {
                let m = Mac48::new(v);
                prop_assert_eq!(m.to_string().parse::<Mac48>().unwrap(), m);
                prop_assert_eq!(m.value() >> 24, m.oui().value() as u64);
                prop_assert_eq!(m.value() & 0xFF_FFFF, m.nic() as u64);
            }

            #[test]
            fn flip_changes_one_bit(v in 0u64..(1 << 48)) {
                let m = Mac48::new(v);
                prop_assert_eq!((m.value() ^ m.flip_ul_bit().value()).count_ones(), 1);
                prop_assert_eq!(m.flip_ul_bit().flip_ul_bit(), m);
            }
        }
    }
}
