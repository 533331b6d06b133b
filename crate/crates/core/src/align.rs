//! Packet alignment across antennas (micro) and receivers (macro).
//!
//! Packets are identified by their 12-bit 802.11 sequence number. Because
//! the counter wraps every 4096 packets, each stream is first *unwrapped*
//! into a monotone [`SeqKey`] (`epoch * 4096 + seq`): a drop of more than
//! 2048 between consecutive records starts a new epoch. Streams that start
//! at different times are put on a common epoch scale by anchoring their
//! first record against the record of a reference stream that is closest
//! in time.
//!
//! Within an epoch a repeated sequence number (a retransmission) keeps its
//! first occurrence only.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use crate::ingest::{CsiRecord, CsiStream, SEQ_MODULUS};

const MODULUS: i64 = SEQ_MODULUS as i64;
const HALF: i64 = MODULUS / 2;

/// Sequence number unwrapped across counter wraparounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SeqKey(pub i64);

impl SeqKey {
    pub fn seq_num(self) -> u16 {
        self.0.rem_euclid(MODULUS) as u16
    }

    pub fn epoch(self) -> i64 {
        self.0.div_euclid(MODULUS)
    }
}

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum AlignError {
    #[error("nothing to align")]
    NoStreams,
    #[error("inconsistent inputs: {0}")]
    Mismatch(String),
    #[error("no packet survives {stage} alignment (per-input packet counts: {counts:?})")]
    EmptyIntersection {
        stage: &'static str,
        counts: Vec<usize>,
    },
    #[error(
        "ambiguous sequence wraparound on rx{receiver_id}/ant{antenna_id} at record {index} (seq {seq_num})"
    )]
    Wraparound {
        receiver_id: u8,
        antenna_id: u8,
        index: usize,
        seq_num: u16,
    },
}

/// The antennas of one receiver restricted to packets seen by all of them.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedReceiverBlock {
    pub receiver_id: u8,
    pub seq_nums: Vec<u16>,
    pub keys: Vec<SeqKey>,
    /// One stream per antenna, ascending antenna id, all index-aligned.
    pub per_antenna: Vec<CsiStream>,
}

impl AlignedReceiverBlock {
    pub fn len(&self) -> usize {
        self.seq_nums.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seq_nums.is_empty()
    }

    pub fn antennas(&self) -> usize {
        self.per_antenna.len()
    }
}

/// All receivers restricted to packets every receiver kept.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedCampaign {
    pub blocks: Vec<AlignedReceiverBlock>,
    pub common_seq: Vec<u16>,
    pub common_keys: Vec<SeqKey>,
}

impl AlignedCampaign {
    pub fn len(&self) -> usize {
        self.common_seq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.common_seq.is_empty()
    }
}

struct Reference {
    times: Vec<u64>,
    keys: Vec<SeqKey>,
}

impl Reference {
    fn from_keyed(records: &[CsiRecord], keys: &[Option<SeqKey>]) -> Self {
        let (times, keys) = records
            .iter()
            .zip(keys)
            .filter_map(|(r, k)| k.map(|k| (r.timestamp_us, k)))
            .unzip();
        Reference { times, keys }
    }

    /// Key of the reference record nearest in time (earlier one on ties).
    fn nearest(&self, t: u64) -> Option<SeqKey> {
        if self.times.is_empty() {
            return None;
        }
        let j = self.times.partition_point(|&x| x < t);
        let best = if j == 0 {
            0
        } else if j == self.times.len() || t - self.times[j - 1] <= self.times[j] - t {
            j - 1
        } else {
            j
        };
        Some(self.keys[best])
    }
}

/// Unwraps one stream's sequence numbers. `None` marks a duplicate.
fn unwrap_stream(
    records: &[CsiRecord],
    reference: Option<&Reference>,
) -> Result<Vec<Option<SeqKey>>, AlignError> {
    let Some(first) = records.first() else {
        return Ok(Vec::new());
    };
    let seq0 = i64::from(first.seq_num);
    let mut epoch = 0i64;
    if let Some(anchor) = reference.and_then(|r| r.nearest(first.timestamp_us)) {
        let below = (anchor.0 - seq0).div_euclid(MODULUS);
        let d_below = anchor.0 - (below * MODULUS + seq0);
        let d_above = MODULUS - d_below;
        if d_below == d_above {
            return Err(AlignError::Wraparound {
                receiver_id: first.receiver_id,
                antenna_id: first.antenna_id,
                index: 0,
                seq_num: first.seq_num,
            });
        }
        epoch = if d_below < d_above { below } else { below + 1 };
    }

    let mut seen = HashSet::with_capacity(records.len());
    let mut keys = Vec::with_capacity(records.len());
    let mut prev: Option<&CsiRecord> = None;
    for (index, rec) in records.iter().enumerate() {
        if let Some(p) = prev {
            let drop = i64::from(p.seq_num) - i64::from(rec.seq_num);
            if drop > HALF {
                if rec.timestamp_us <= p.timestamp_us {
                    return Err(AlignError::Wraparound {
                        receiver_id: rec.receiver_id,
                        antenna_id: rec.antenna_id,
                        index,
                        seq_num: rec.seq_num,
                    });
                }
                epoch += 1;
            }
        }
        prev = Some(rec);
        let key = SeqKey(epoch * MODULUS + i64::from(rec.seq_num));
        keys.push(seen.insert(key).then_some(key));
    }
    Ok(keys)
}

/// Unwraps a set of streams on a common epoch scale. The stream whose first
/// record is earliest serves as the reference.
fn unwrap_all(streams: &[&[CsiRecord]]) -> Result<Vec<Vec<Option<SeqKey>>>, AlignError> {
    let reference_idx = streams
        .iter()
        .enumerate()
        .filter_map(|(i, recs)| recs.first().map(|r| (r.timestamp_us, i)))
        .min()
        .map(|(_, i)| i);
    let mut out = vec![Vec::new(); streams.len()];
    let Some(ri) = reference_idx else {
        return Ok(out);
    };
    out[ri] = unwrap_stream(streams[ri], None)?;
    let reference = Reference::from_keyed(streams[ri], &out[ri]);
    for (i, recs) in streams.iter().enumerate() {
        if i != ri {
            out[i] = unwrap_stream(recs, Some(&reference))?;
        }
    }
    Ok(out)
}

/// Keys present in every input, in the order of the first input.
fn intersect(keyed: &[Vec<Option<SeqKey>>]) -> Vec<SeqKey> {
    let mut counts: HashMap<SeqKey, usize> = HashMap::new();
    for keys in keyed {
        for k in keys.iter().flatten() {
            *counts.entry(*k).or_default() += 1;
        }
    }
    let n = keyed.len();
    keyed
        .first()
        .map(|keys| {
            keys.iter()
                .flatten()
                .copied()
                .filter(|k| counts[k] == n)
                .collect()
        })
        .unwrap_or_default()
}

/// Restricts `records` to `order`, returning them in that order.
fn select(records: &[CsiRecord], keys: &[Option<SeqKey>], order: &[SeqKey]) -> Vec<CsiRecord> {
    let index: HashMap<SeqKey, usize> = keys
        .iter()
        .enumerate()
        .filter_map(|(i, k)| k.map(|k| (k, i)))
        .collect();
    order.iter().map(|k| records[index[k]].clone()).collect()
}

/// Drops packets that were not captured by every antenna of one receiver.
pub fn micro_align(streams: &[CsiStream]) -> Result<AlignedReceiverBlock, AlignError> {
    let first = streams.first().ok_or(AlignError::NoStreams)?;
    let receiver_id = first.receiver_id;
    for s in streams {
        if s.receiver_id != receiver_id {
            return Err(AlignError::Mismatch(format!(
                "streams from receivers {receiver_id} and {} passed to one micro alignment",
                s.receiver_id
            )));
        }
        if s.bandwidth != first.bandwidth || s.subcarriers() != first.subcarriers() {
            return Err(AlignError::Mismatch(format!(
                "rx{receiver_id}: antennas disagree on bandwidth or pruning"
            )));
        }
    }
    let mut sorted: Vec<&CsiStream> = streams.iter().collect();
    sorted.sort_by_key(|s| s.antenna_id);
    if sorted
        .windows(2)
        .any(|w| w[0].antenna_id == w[1].antenna_id)
    {
        return Err(AlignError::Mismatch(format!(
            "rx{receiver_id}: duplicate antenna id"
        )));
    }

    let record_sets: Vec<&[CsiRecord]> = sorted.iter().map(|s| s.records.as_slice()).collect();
    let keyed = unwrap_all(&record_sets)?;
    let common = intersect(&keyed);
    if common.is_empty() {
        return Err(AlignError::EmptyIntersection {
            stage: "micro",
            counts: sorted.iter().map(|s| s.len()).collect(),
        });
    }
    let per_antenna = sorted
        .iter()
        .zip(&keyed)
        .map(|(s, keys)| CsiStream {
            records: select(&s.records, keys, &common),
            ..s.without_records()
        })
        .collect();
    Ok(AlignedReceiverBlock {
        receiver_id,
        seq_nums: common.iter().map(|k| k.seq_num()).collect(),
        keys: common,
        per_antenna,
    })
}

/// Matches receivers by sequence number so that index `i` refers to the same
/// transmitted packet in every block.
pub fn macro_align(blocks: &[AlignedReceiverBlock]) -> Result<AlignedCampaign, AlignError> {
    let first = blocks.first().ok_or(AlignError::NoStreams)?;
    let bandwidth = first
        .per_antenna
        .first()
        .ok_or(AlignError::NoStreams)?
        .bandwidth;
    let mut sorted: Vec<&AlignedReceiverBlock> = blocks.iter().collect();
    sorted.sort_by_key(|b| b.receiver_id);
    for w in sorted.windows(2) {
        if w[0].receiver_id == w[1].receiver_id {
            return Err(AlignError::Mismatch(format!(
                "receiver {} appears twice",
                w[0].receiver_id
            )));
        }
    }
    for b in &sorted {
        if b.per_antenna.is_empty() {
            return Err(AlignError::Mismatch(format!(
                "rx{} has no antennas",
                b.receiver_id
            )));
        }
        if b.per_antenna.iter().any(|s| s.bandwidth != bandwidth) {
            return Err(AlignError::Mismatch(format!(
                "rx{} bandwidth differs from rx{}",
                b.receiver_id, first.receiver_id
            )));
        }
    }

    let record_sets: Vec<&[CsiRecord]> = sorted
        .iter()
        .map(|b| b.per_antenna[0].records.as_slice())
        .collect();
    let keyed = unwrap_all(&record_sets)?;
    let common = intersect(&keyed);
    if common.is_empty() {
        return Err(AlignError::EmptyIntersection {
            stage: "macro",
            counts: sorted.iter().map(|b| b.len()).collect(),
        });
    }
    let aligned = sorted
        .iter()
        .zip(&keyed)
        .map(|(b, keys)| AlignedReceiverBlock {
            receiver_id: b.receiver_id,
            seq_nums: common.iter().map(|k| k.seq_num()).collect(),
            keys: common.clone(),
            per_antenna: b
                .per_antenna
                .iter()
                .map(|s| CsiStream {
                    records: select(&s.records, keys, &common),
                    ..s.without_records()
                })
                .collect(),
        })
        .collect();
    Ok(AlignedCampaign {
        blocks: aligned,
        common_seq: common.iter().map(|k| k.seq_num()).collect(),
        common_keys: common,
    })
}

impl CsiStream {
    fn without_records(&self) -> CsiStream {
        CsiStream {
            records: Vec::new(),
            ..*self
        }
    }
}

/// Kept/dropped packet counts per (receiver, antenna).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AlignmentStats {
    pub rows: Vec<AlignmentRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentRow {
    pub receiver_id: u8,
    pub antenna_id: u8,
    pub input: usize,
    pub after_micro: usize,
    pub after_macro: usize,
}

impl AlignmentStats {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "receiver_id,antenna_id,input,kept_micro,dropped_micro,kept_macro,dropped_macro\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.receiver_id,
                r.antenna_id,
                r.input,
                r.after_micro,
                r.input - r.after_micro,
                r.after_macro,
                r.after_micro - r.after_macro
            );
        }
        out
    }
}

/// Groups streams by receiver, then runs micro and macro alignment.
pub fn align_streams(
    streams: &[CsiStream],
) -> Result<(AlignedCampaign, AlignmentStats), AlignError> {
    let mut receivers: Vec<u8> = streams.iter().map(|s| s.receiver_id).collect();
    receivers.sort_unstable();
    receivers.dedup();
    let mut blocks = Vec::with_capacity(receivers.len());
    for rx in &receivers {
        let group: Vec<CsiStream> = streams
            .iter()
            .filter(|s| s.receiver_id == *rx)
            .cloned()
            .collect();
        blocks.push(micro_align(&group)?);
    }
    let campaign = macro_align(&blocks)?;
    let mut stats = AlignmentStats::default();
    for block in &blocks {
        for s in &block.per_antenna {
            let input = streams
                .iter()
                .find(|x| x.receiver_id == s.receiver_id && x.antenna_id == s.antenna_id)
                .map_or(0, CsiStream::len);
            stats.rows.push(AlignmentRow {
                receiver_id: s.receiver_id,
                antenna_id: s.antenna_id,
                input,
                after_micro: block.len(),
                after_macro: campaign.len(),
            });
        }
    }
    Ok((campaign, stats))
}
