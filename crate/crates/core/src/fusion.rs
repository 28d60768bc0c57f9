//! Applies offset models to WAN MACs and joins the predicted BSSIDs against
//! the geolocation corpus.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusIndex, GeoSource, OuiWanSet};
use crate::geo::GeoPoint;
use crate::mac::{Ipv6Address, Mac48, Oui};
use crate::offset::OuiOffsetModel;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FusionError {
    #[error("model for {model} applied to MAC {mac}")]
    OuiMismatch { mac: Mac48, model: Oui },
}

/// A WAN MAC geolocated through its predicted BSSID. Serialises to the
/// JSONL output schema.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeolocatedCpe {
    pub wan_mac: Mac48,
    #[serde(rename = "addr")]
    pub source_addr: Ipv6Address,
    #[serde(rename = "bssid")]
    pub predicted_bssid: Mac48,
    pub lat: f64,
    pub lon: f64,
    #[serde(rename = "confidence")]
    pub model_confidence: f64,
    #[serde(rename = "source")]
    pub geo_source: GeoSource,
    /// Matched through a U/L-flipped alias of the observed BSSID.
    #[serde(default)]
    pub ul_alias: bool,
}

impl GeolocatedCpe {
    pub fn location(&self) -> GeoPoint {
        GeoPoint {
            lat: self.lat,
            lon: self.lon,
        }
    }
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FusionStats {
    /// Every indexed WAN MAC.
    pub total_wan: u64,
    /// WAN MACs whose OUI has no model.
    pub no_model: u64,
    /// WAN MACs whose OUI has a model.
    pub eligible: u64,
    /// Eligible MACs whose prediction stays inside the OUI.
    pub predicted: u64,
    /// Eligible MACs whose prediction would leave the OUI.
    pub overflow: u64,
    pub matched: u64,
    pub unmatched: u64,
    pub alias_matches: u64,
}

impl FusionStats {
    /// `matched / eligible`, or 0 with nothing eligible.
    pub fn match_rate(&self) -> f64 {
        if self.eligible == 0 {
            0.0
        } else {
            self.matched as f64 / self.eligible as f64
        }
    }

    pub fn merge(&mut self, o: &FusionStats) {
        self.total_wan += o.total_wan;
        self.no_model += o.no_model;
        self.eligible += o.eligible;
        self.predicted += o.predicted;
        self.overflow += o.overflow;
        self.matched += o.matched;
        self.unmatched += o.unmatched;
        self.alias_matches += o.alias_matches;
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).unwrap();
        v["match_rate"] = serde_json::json!(self.match_rate());
        v
    }
}

/// BSSID predicted for `wan_mac`; `None` when the offset leaves the OUI.
pub fn predict_bssid(wan_mac: Mac48, model: &OuiOffsetModel) -> Result<Option<Mac48>, FusionError> {
    if wan_mac.oui() != model.oui {
        return Err(FusionError::OuiMismatch {
            mac: wan_mac,
            model: model.oui,
        });
    }
    Ok(wan_mac.checked_add(model.offset))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FusionOutput {
    /// Ascending by `(oui, nic)` of the WAN MAC.
    pub cpes: Vec<GeolocatedCpe>,
    pub stats: FusionStats,
}

fn fuse_oui(
    set: &OuiWanSet,
    model: Option<&OuiOffsetModel>,
    index: &CorpusIndex,
) -> (Vec<GeolocatedCpe>, FusionStats) {
    let mut stats = FusionStats {
        total_wan: set.entries.len() as u64,
        ..Default::default()
    };
    let Some(model) = model else {
        stats.no_model = stats.total_wan;
        return (Vec::new(), stats);
    };
    stats.eligible = stats.total_wan;
    let bssids = index.bssid_by_oui.get(&model.oui);
    let mut out = Vec::new();
    for e in &set.entries {
        let wan = e.representative;
        // Entries are filed under their own OUI, so the model always applies.
        let Some(bssid) = predict_bssid(wan.mac, model).ok().flatten() else {
            stats.overflow += 1;
            continue;
        };
        stats.predicted += 1;
        match bssids.and_then(|s| s.get(bssid.nic())) {
            Some(hit) => {
                stats.matched += 1;
                stats.alias_matches += hit.ul_alias as u64;
                out.push(GeolocatedCpe {
                    wan_mac: wan.mac,
                    source_addr: wan.source_addr,
                    predicted_bssid: bssid,
                    lat: hit.location.lat,
                    lon: hit.location.lon,
                    model_confidence: model.confidence,
                    geo_source: hit.source,
                    ul_alias: hit.ul_alias,
                });
            }
            None => stats.unmatched += 1,
        }
    }
    (out, stats)
}

/// Geolocates every WAN MAC of `index` whose OUI has a model and whose
/// predicted BSSID is in the geolocation corpus.
pub fn fuse(index: &CorpusIndex, models: &[OuiOffsetModel]) -> FusionOutput {
    let by_oui: BTreeMap<Oui, &OuiOffsetModel> = models.iter().rev().map(|m| (m.oui, m)).collect();
    let sets: Vec<(&Oui, &OuiWanSet)> = index.wan_by_oui.iter().collect();
    let parts: Vec<(Vec<GeolocatedCpe>, FusionStats)> = sets
        .par_iter()
        .map(|(oui, set)| fuse_oui(set, by_oui.get(oui).copied(), index))
        .collect();
    let mut output = FusionOutput::default();
    for (cpes, stats) in parts {
        output.cpes.extend(cpes);
        output.stats.merge(&stats);
    }
    output
}

/// GeoJSON FeatureCollection with one point per geolocated CPE.
pub fn to_geojson(cpes: &[GeolocatedCpe]) -> serde_json::Value {
    let features: Vec<serde_json::Value> = cpes
        .iter()
        .map(|c| {
            serde_json::json!({
                "type": "Feature",
                "geometry": { "type": "Point", "coordinates": [c.lon, c.lat] },
                "properties": {
                    "wan_mac": c.wan_mac,
                    "addr": c.source_addr,
                    "bssid": c.predicted_bssid,
                    "confidence": c.model_confidence,
                    "source": c.geo_source,
                    "ul_alias": c.ul_alias,
                }
            })
        })
        .collect();
    serde_json::json!({ "type": "FeatureCollection", "features": features })
}
