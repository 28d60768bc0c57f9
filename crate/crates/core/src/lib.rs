//! Offline toolkit for recovering MAC addresses leaked through EUI-64 IPv6
//! addresses, inferring per-vendor WAN-to-BSSID MAC offsets, and fusing the
//! predicted BSSIDs with WiFi geolocation data.
//!
//! Pipeline: [`corpus`] ingests WAN and BSSID observations into a
//! [`corpus::CorpusIndex`]; [`offset`] infers one [`offset::OuiOffsetModel`]
//! per OUI; [`fusion`] applies the models to geolocate WAN MACs; and
//! [`cluster`] groups the results by upstream router to extend coverage to
//! CPE that do not use EUI-64. [`synth`] generates ground-truth corpora.

pub mod cluster;
pub mod corpus;
pub mod fusion;
pub mod geo;
pub mod mac;
pub mod offset;
pub mod store;
pub mod synth;

pub use corpus::{BssidGeoRecord, CorpusBuilder, CorpusIndex, GeoSource, WanMacRecord};
pub use geo::{GeoPoint, DistanceReport};
pub use mac::{decode_eui64, encode_eui64, Ipv6Address, Mac48, Oui};
pub use offset::{AllocInference, OuiOffsetModel};
