//! Per-OUI inference of the MAC allocation block size and of the signed
//! WAN-to-BSSID offset.
//!
//! Inference runs in two phases. The allocation size comes from the
//! spacing of the OUI's sorted BSSIDs: the period `p` whose multiples
//! carry the most pairwise BSSID distances (smallest such period wins).
//! Then every WAN MAC votes for each BSSID within `±p` of it, and the most
//! common vote becomes the offset. Votes that differ from the winner by a
//! multiple of `p` are harmonics: the BSSID of a neighbouring device.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::CorpusIndex;
use crate::mac::{Mac48, Oui};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum InferError {
    #[error("{oui}: need at least 2 BSSIDs to infer an allocation size, have {have}")]
    InsufficientData { oui: Oui, have: usize },
    #[error("{0}: model has no votes")]
    EmptyVotes(Oui),
}

/// Thresholds below which an OUI gets no model.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub min_wan: usize,
    pub min_bssid: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            min_wan: 100,
            min_bssid: 100,
        }
    }
}

/// Default lower bound on model confidence kept by [`filter_models`].
pub const DEFAULT_MIN_CONSISTENCY: f64 = 0.05;

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocInference {
    pub oui: Oui,
    /// MAC addresses allocated per device.
    pub alloc_size: u32,
    /// Fraction of successive BSSID distances that are multiples of `alloc_size`.
    pub consistency: f64,
    /// Number of successive distances examined (`n - 1`).
    pub sample_count: usize,
    /// Most frequent successive distance, smallest on ties.
    pub modal_distance: u32,
}

/// Shortest lag horizon used by the period search.
const MIN_HORIZON: u32 = 256;
const MAX_HORIZON: u32 = 1 << 16;
/// Periods scoring within this fraction of the best are treated as tied.
const PERIOD_TOLERANCE: f64 = 0.25;

fn sorted_unique(nics: &[u32]) -> std::borrow::Cow<'_, [u32]> {
    if nics.windows(2).all(|w| w[0] < w[1]) {
        std::borrow::Cow::Borrowed(nics)
    } else {
        let mut v = nics.to_vec();
        v.sort_unstable();
        v.dedup();
        std::borrow::Cow::Owned(v)
    }
}

fn modal_smallest(values: impl Iterator<Item = u32>) -> Option<u32> {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for v in values {
        *counts.entry(v).or_default() += 1;
    }
    // BTreeMap iterates ascending, so `max_by_key` keeping the first max
    // would pick the largest; scan manually to keep the smallest.
    let mut best: Option<(u32, usize)> = None;
    for (v, c) in counts {
        if best.map_or(true, |(_, bc)| c > bc) {
            best = Some((v, c));
        }
    }
    best.map(|(v, _)| v)
}

/// Infers how many MACs the vendor allocates per device from one OUI's
/// BSSID NICs. Input need not be sorted.
///
/// The period search builds a histogram of all pairwise BSSID distances up
/// to a horizon and scores each candidate period by the mean count at its
/// multiples. Multiple radios per device (several BSSIDs inside one block)
/// add distances that are not multiples of the block size, but every radio
/// repeats with the block period, so the comb score still peaks there.
pub fn infer_alloc_size(oui: Oui, bssids: &[u32]) -> Result<AllocInference, InferError> {
    let nics = sorted_unique(bssids);
    if nics.len() < 2 {
        return Err(InferError::InsufficientData {
            oui,
            have: nics.len(),
        });
    }
    let diffs: Vec<u32> = nics.windows(2).map(|w| w[1] - w[0]).collect();
    let modal_distance = modal_smallest(diffs.iter().copied()).unwrap();

    let mut sorted_diffs = diffs.clone();
    sorted_diffs.sort_unstable();
    let median_gap = sorted_diffs[sorted_diffs.len() / 2];
    let horizon = median_gap
        .saturating_mul(8)
        .clamp(MIN_HORIZON, MAX_HORIZON) as usize;

    let mut lag_counts = vec![0u64; horizon + 1];
    for (i, &a) in nics.iter().enumerate() {
        for &b in &nics[i + 1..] {
            let d = (b - a) as usize;
            if d > horizon {
                break;
            }
            lag_counts[d] += 1;
        }
    }

    let max_period = horizon / 4;
    let scores: Vec<f64> = (1..=max_period)
        .map(|p| {
            let multiples = horizon / p;
            let total: u64 = (1..=multiples).map(|k| lag_counts[k * p]).sum();
            total as f64 / multiples as f64
        })
        .collect();
    let best = scores.iter().copied().fold(0.0, f64::max);
    let alloc_size = if best == 0.0 {
        // Every BSSID is farther than the horizon from the next one.
        modal_distance
    } else {
        scores
            .iter()
            .position(|s| *s >= (1.0 - PERIOD_TOLERANCE) * best)
            .map(|i| i as u32 + 1)
            .unwrap()
    };

    let multiples = diffs.iter().filter(|d| gcd(**d, alloc_size) == alloc_size).count();
    Ok(AllocInference {
        oui,
        alloc_size,
        consistency: multiples as f64 / diffs.len() as f64,
        sample_count: diffs.len(),
        modal_distance,
    })
}

fn gcd(mut a: u32, mut b: u32) -> u32 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VoteDirection {
    /// The BSSID is at or below the WAN MAC.
    Below,
    Above,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OffsetVote {
    pub wan_mac: Mac48,
    pub candidate_offset: i64,
    pub direction: VoteDirection,
}

/// Calls `f(wan_position, offset)` for every BSSID within `±window` of each
/// WAN NIC. Both slices must be ascending.
fn sweep(wan: &[u32], bssid: &[u32], window: u32, mut f: impl FnMut(usize, i64)) {
    let window = window as i64;
    let mut lo = 0;
    for (wi, &w) in wan.iter().enumerate() {
        let w = w as i64;
        while lo < bssid.len() && (bssid[lo] as i64) < w - window {
            lo += 1;
        }
        for &b in &bssid[lo..] {
            let d = b as i64 - w;
            if d > window {
                break;
            }
            f(wi, d);
        }
    }
}

/// Every (WAN, BSSID) pair of one OUI no more than `window` apart, as a
/// vote for the BSSID minus WAN offset. Input need not be sorted; votes come
/// out in ascending WAN order, then ascending offset.
pub fn collect_votes(oui: Oui, wan: &[u32], bssid: &[u32], window: u32) -> Vec<OffsetVote> {
    let wan = sorted_unique(wan);
    let bssid = sorted_unique(bssid);
    let mut votes = Vec::new();
    sweep(&wan, &bssid, window, |wi, d| {
        votes.push(OffsetVote {
            wan_mac: Mac48::from_parts(oui, wan[wi]),
            candidate_offset: d,
            direction: if d <= 0 {
                VoteDirection::Below
            } else {
                VoteDirection::Above
            },
        })
    });
    votes
}

/// Inferred allocation and offset for one OUI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OuiOffsetModel {
    pub oui: Oui,
    pub alloc: AllocInference,
    /// BSSID minus WAN MAC.
    pub offset: i64,
    /// Fraction of voting WAN MACs with a vote equal to the offset modulo
    /// the allocation size.
    pub confidence: f64,
    pub votes: BTreeMap<i64, u64>,
    pub wan_count: usize,
    pub bssid_count: usize,
    /// WAN MACs with at least one vote.
    pub voting_wans: usize,
}

impl OuiOffsetModel {
    pub fn is_harmonic_of_offset(&self, v: i64) -> bool {
        (v - self.offset).rem_euclid(self.alloc.alloc_size as i64) == 0
    }
}

/// Orders candidates: more votes, then smaller magnitude, then positive.
fn pick_offset(votes: &BTreeMap<i64, u64>) -> Option<i64> {
    votes
        .iter()
        .max_by(|(va, ca), (vb, cb)| {
            ca.cmp(cb)
                .then(vb.abs().cmp(&va.abs()))
                .then(va.signum().cmp(&vb.signum()))
        })
        .map(|(v, _)| *v)
}

/// Builds a model from raw NIC lists, ignoring the minimum-count thresholds.
pub fn model_from_nics(oui: Oui, wan: &[u32], bssid: &[u32]) -> Result<OuiOffsetModel, InferError> {
    let wan = sorted_unique(wan);
    let bssid = sorted_unique(bssid);
    let alloc = infer_alloc_size(oui, &bssid)?;
    let window = alloc.alloc_size;

    let mut votes: BTreeMap<i64, u64> = BTreeMap::new();
    sweep(&wan, &bssid, window, |_, d| *votes.entry(d).or_default() += 1);

    let offset = pick_offset(&votes).unwrap_or(0);
    let modulus = alloc.alloc_size as i64;
    let mut voted = vec![false; wan.len()];
    let mut consistent = vec![false; wan.len()];
    sweep(&wan, &bssid, window, |wi, d| {
        voted[wi] = true;
        if (d - offset).rem_euclid(modulus) == 0 {
            consistent[wi] = true;
        }
    });
    let voting_wans = voted.iter().filter(|v| **v).count();
    let consistent_wans = consistent.iter().filter(|v| **v).count();
    let confidence = if voting_wans == 0 {
        0.0
    } else {
        consistent_wans as f64 / voting_wans as f64
    };
    Ok(OuiOffsetModel {
        oui,
        alloc,
        offset,
        confidence,
        votes,
        wan_count: wan.len(),
        bssid_count: bssid.len(),
        voting_wans,
    })
}

/// Model for one OUI of `index`, or `None` when either corpus has fewer
/// MACs than the configured minimum.
pub fn infer_offset(
    oui: Oui,
    index: &CorpusIndex,
    config: &InferenceConfig,
) -> Result<Option<OuiOffsetModel>, InferError> {
    let wan = index.wan_nics(oui);
    let bssid = index.bssid_nics(oui);
    if wan.len() < config.min_wan || bssid.len() < config.min_bssid {
        return Ok(None);
    }
    model_from_nics(oui, wan, bssid).map(Some)
}

/// Models for every eligible OUI, in ascending OUI order. OUIs with too few
/// BSSIDs to size an allocation are skipped.
pub fn infer_all(index: &CorpusIndex, config: &InferenceConfig) -> Vec<OuiOffsetModel> {
    let ouis: Vec<Oui> = index.wan_by_oui.keys().copied().collect();
    ouis.par_iter()
        .filter_map(|oui| infer_offset(*oui, index, config).ok().flatten())
        .collect()
}

/// Keeps models whose confidence is at least `min_consistency`.
pub fn filter_models(models: Vec<OuiOffsetModel>, min_consistency: f64) -> Vec<OuiOffsetModel> {
    models
        .into_iter()
        .filter(|m| m.confidence >= min_consistency)
        .collect()
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PmfEntry {
    pub offset: i64,
    pub count: u64,
    pub probability: f64,
    /// Differs from the peak by a nonzero multiple of the allocation size.
    pub harmonic: bool,
}

/// Normalised vote histogram of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffsetPmf {
    pub oui: Oui,
    pub peak: i64,
    pub alloc_size: u32,
    pub total_votes: u64,
    pub entries: Vec<PmfEntry>,
}

impl OffsetPmf {
    pub fn probability(&self, offset: i64) -> f64 {
        self.entries
            .iter()
            .find(|e| e.offset == offset)
            .map_or(0.0, |e| e.probability)
    }

    /// Mass at the peak plus all of its harmonics.
    pub fn supporting_mass(&self) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.offset == self.peak || e.harmonic)
            .map(|e| e.probability)
            .sum()
    }
}

pub fn offset_pmf(model: &OuiOffsetModel) -> Result<OffsetPmf, InferError> {
    let total: u64 = model.votes.values().sum();
    if total == 0 {
        return Err(InferError::EmptyVotes(model.oui));
    }
    let entries = model
        .votes
        .iter()
        .map(|(&offset, &count)| PmfEntry {
            offset,
            count,
            probability: count as f64 / total as f64,
            harmonic: offset != model.offset && model.is_harmonic_of_offset(offset),
        })
        .collect();
    Ok(OffsetPmf {
        oui: model.oui,
        peak: model.offset,
        alloc_size: model.alloc.alloc_size,
        total_votes: total,
        entries,
    })
}

/// One line of the model export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelLine {
    pub oui: Oui,
    pub alloc: u32,
    pub offset: i64,
    pub confidence: f64,
    pub wan_count: usize,
    pub bssid_count: usize,
    pub votes: BTreeMap<String, u64>,
    #[serde(default)]
    pub alloc_consistency: f64,
}

impl From<&OuiOffsetModel> for ModelLine {
    fn from(m: &OuiOffsetModel) -> Self {
        ModelLine {
            oui: m.oui,
            alloc: m.alloc.alloc_size,
            offset: m.offset,
            confidence: m.confidence,
            wan_count: m.wan_count,
            bssid_count: m.bssid_count,
            votes: m.votes.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            alloc_consistency: m.alloc.consistency,
        }
    }
}

impl TryFrom<ModelLine> for OuiOffsetModel {
    type Error = String;

    fn try_from(l: ModelLine) -> Result<Self, Self::Error> {
        if l.alloc == 0 {
            return Err(format!("{}: allocation size must be positive", l.oui));
        }
        if !(0.0..=1.0).contains(&l.confidence) {
            return Err(format!("{}: confidence {} outside [0, 1]", l.oui, l.confidence));
        }
        let votes = l
            .votes
            .iter()
            .map(|(k, v)| k.parse::<i64>().map(|k| (k, *v)).map_err(|e| format!("vote key `{k}`: {e}")))
            .collect::<Result<BTreeMap<_, _>, _>>()?;
        Ok(OuiOffsetModel {
            oui: l.oui,
            alloc: AllocInference {
                oui: l.oui,
                alloc_size: l.alloc,
                consistency: l.alloc_consistency,
                sample_count: l.bssid_count.saturating_sub(1),
                modal_distance: l.alloc,
            },
            offset: l.offset,
            confidence: l.confidence,
            votes,
            wan_count: l.wan_count,
            bssid_count: l.bssid_count,
            voting_wans: 0,
        })
    }
}

/// `value,cdf` rows: the empirical CDF of `values` at each distinct value.
pub fn cdf_rows(mut values: Vec<i64>) -> Vec<(i64, f64)> {
    values.sort_unstable();
    let n = values.len() as f64;
    let mut rows: Vec<(i64, f64)> = Vec::new();
    for (i, v) in values.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match rows.last_mut() {
            Some(last) if last.0 == *v => last.1 = frac,
            _ => rows.push((*v, frac)),
        }
    }
    rows
}
