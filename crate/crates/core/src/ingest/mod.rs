//! CSI capture ingestion.
//!
//! Captures are flat lists of [`CsiRecord`]s, one per (packet, receiver,
//! antenna). Two on-disk encodings exist: the canonical little-endian
//! binary format (see [`binary`]) and a one-row-per-subcarrier CSV export
//! (see [`csv`]). [`parse_capture`] groups records into one [`CsiStream`]
//! per (receiver, antenna) pair; [`prune_subcarriers`] then drops guard,
//! DC and pilot tones with a [`PruneMask`].

pub mod binary;
pub mod csv;
mod mask;

use std::fmt;
use std::path::Path;

pub use mask::PruneMask;

/// Exclusive upper bound of the 12-bit 802.11 sequence counter.
pub const SEQ_MODULUS: u16 = 4096;

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum IngestError {
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },
    #[error("record {index} is truncated ({available} of {needed} bytes present)")]
    PartialRecord {
        index: usize,
        needed: usize,
        available: usize,
    },
    #[error("schema error in record {index}: {reason}")]
    Schema { index: usize, reason: String },
    #[error("csv error on line {line}: {reason}")]
    Csv { line: usize, reason: String },
    #[error("prune mask error: {0}")]
    Mask(String),
    #[error("stream rx{receiver_id}/ant{antenna_id} is already pruned")]
    AlreadyPruned { receiver_id: u8, antenna_id: u8 },
}

/// Channel bandwidth of a capture; fixes the raw FFT size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Bandwidth {
    Mhz20,
    Mhz80,
}

impl Bandwidth {
    pub fn from_mhz(mhz: u16) -> Option<Self> {
        match mhz {
            20 => Some(Bandwidth::Mhz20),
            80 => Some(Bandwidth::Mhz80),
            _ => None,
        }
    }

    pub fn mhz(self) -> u16 {
        match self {
            Bandwidth::Mhz20 => 20,
            Bandwidth::Mhz80 => 80,
        }
    }

    /// Raw tone count delivered by the extractor (64 or 256).
    pub fn fft_size(self) -> usize {
        match self {
            Bandwidth::Mhz20 => 64,
            Bandwidth::Mhz80 => 256,
        }
    }

    /// Tone count kept by the default prune mask (52 or 242).
    pub fn pruned_subcarriers(self) -> usize {
        match self {
            Bandwidth::Mhz20 => 52,
            Bandwidth::Mhz80 => 242,
        }
    }

    pub fn from_fft_size(n: usize) -> Option<Self> {
        match n {
            64 => Some(Bandwidth::Mhz20),
            256 => Some(Bandwidth::Mhz80),
            _ => None,
        }
    }
}

impl fmt::Display for Bandwidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} MHz", self.mhz())
    }
}

/// One complex channel gain, stored at capture precision.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ComplexSample {
    pub re: f32,
    pub im: f32,
}

impl ComplexSample {
    pub fn new(re: f32, im: f32) -> Self {
        ComplexSample { re, im }
    }

    pub fn is_finite(self) -> bool {
        self.re.is_finite() && self.im.is_finite()
    }

    pub fn amplitude(self) -> f64 {
        f64::from(self.re).hypot(f64::from(self.im))
    }

    pub fn phase(self) -> f64 {
        f64::from(self.im).atan2(f64::from(self.re))
    }
}

/// CSI of one packet as seen by one antenna of one receiver.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiRecord {
    pub receiver_id: u8,
    pub antenna_id: u8,
    /// Transmit spatial stream; always 0 (single stream).
    pub stream_id: u8,
    pub seq_num: u16,
    pub timestamp_us: u64,
    /// Per-subcarrier gains in ascending tone order.
    pub csi: Vec<ComplexSample>,
}

/// All records of one (receiver, antenna) pair, in capture order.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiStream {
    pub receiver_id: u8,
    pub antenna_id: u8,
    pub bandwidth: Bandwidth,
    pub records: Vec<CsiRecord>,
    /// `None` until [`prune_subcarriers`] has run.
    pub pruned_subcarriers: Option<usize>,
}

impl CsiStream {
    pub fn new(receiver_id: u8, antenna_id: u8, bandwidth: Bandwidth) -> Self {
        CsiStream {
            receiver_id,
            antenna_id,
            bandwidth,
            records: Vec::new(),
            pruned_subcarriers: None,
        }
    }

    /// Current width of every record's CSI vector.
    pub fn subcarriers(&self) -> usize {
        self.pruned_subcarriers
            .unwrap_or_else(|| self.bandwidth.fft_size())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// A whole capture file in record order.
#[derive(Debug, Clone, PartialEq)]
pub struct Capture {
    pub bandwidth: Bandwidth,
    pub records: Vec<CsiRecord>,
}

impl Capture {
    pub fn new(bandwidth: Bandwidth) -> Self {
        Capture {
            bandwidth,
            records: Vec::new(),
        }
    }

    /// Groups records into streams sorted by (receiver, antenna). Record
    /// order inside each stream is capture order.
    pub fn into_streams(self) -> Vec<CsiStream> {
        let mut streams: Vec<CsiStream> = Vec::new();
        for record in self.records {
            let key = (record.receiver_id, record.antenna_id);
            let pos = match streams.binary_search_by_key(&key, |s| (s.receiver_id, s.antenna_id)) {
                Ok(pos) => pos,
                Err(pos) => {
                    streams.insert(pos, CsiStream::new(key.0, key.1, self.bandwidth));
                    pos
                }
            };
            streams[pos].records.push(record);
        }
        streams
    }

    /// Interleaves streams back into one capture.
    ///
    /// Records are merged by `(timestamp_us, receiver_id, antenna_id)` while
    /// each stream keeps its internal order, which is the order produced by
    /// [`crate::synth`] and by [`write_capture`].
    pub fn from_streams(bandwidth: Bandwidth, streams: &[CsiStream]) -> Self {
        let total = streams.iter().map(CsiStream::len).sum();
        let mut records = Vec::with_capacity(total);
        let mut cursors = vec![0usize; streams.len()];
        loop {
            let mut best: Option<(usize, (u64, u8, u8))> = None;
            for (i, stream) in streams.iter().enumerate() {
                if let Some(rec) = stream.records.get(cursors[i]) {
                    let key = (rec.timestamp_us, rec.receiver_id, rec.antenna_id);
                    if best.is_none_or(|(_, k)| key < k) {
                        best = Some((i, key));
                    }
                }
            }
            let Some((i, _)) = best else { break };
            records.push(streams[i].records[cursors[i]].clone());
            cursors[i] += 1;
        }
        Capture { bandwidth, records }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaptureFormat {
    Binary,
    Csv,
}

impl CaptureFormat {
    /// Picks the format from a file extension (`.csv` is CSV, anything else binary).
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => CaptureFormat::Csv,
            _ => CaptureFormat::Binary,
        }
    }
}

pub fn read_capture(path: &Path, format: CaptureFormat) -> crate::Result<Capture> {
    let bytes = std::fs::read(path).map_err(|e| crate::Error::io(path, e))?;
    let capture = match format {
        CaptureFormat::Binary => binary::decode(&bytes)?,
        CaptureFormat::Csv => csv::decode(&bytes)?,
    };
    Ok(capture)
}

/// Reads a capture file and splits it into per-(receiver, antenna) streams.
pub fn parse_capture(path: &Path, format: CaptureFormat) -> crate::Result<Vec<CsiStream>> {
    Ok(read_capture(path, format)?.into_streams())
}

/// Writes streams as one binary capture (see [`Capture::from_streams`] for
/// the record order).
pub fn write_capture(
    path: &Path,
    bandwidth: Bandwidth,
    streams: &[CsiStream],
) -> crate::Result<()> {
    let capture = Capture::from_streams(bandwidth, streams);
    std::fs::write(path, binary::encode(&capture)).map_err(|e| crate::Error::io(path, e))
}

/// Keeps only the tones listed in `mask`, in mask order.
pub fn prune_subcarriers(stream: &CsiStream, mask: &PruneMask) -> Result<CsiStream, IngestError> {
    if stream.pruned_subcarriers.is_some() {
        return Err(IngestError::AlreadyPruned {
            receiver_id: stream.receiver_id,
            antenna_id: stream.antenna_id,
        });
    }
    if mask.bandwidth() != stream.bandwidth {
        return Err(IngestError::Mask(format!(
            "mask is for {} but stream rx{}/ant{} is {}",
            mask.bandwidth(),
            stream.receiver_id,
            stream.antenna_id,
            stream.bandwidth
        )));
    }
    let keep = mask.keep_indices();
    let mut records = Vec::with_capacity(stream.records.len());
    for (i, rec) in stream.records.iter().enumerate() {
        let mut csi = Vec::with_capacity(keep.len());
        for &k in keep {
            let sample = rec.csi.get(k).ok_or_else(|| {
                IngestError::Mask(format!(
                    "index {k} out of range for record {i} with {} subcarriers",
                    rec.csi.len()
                ))
            })?;
            csi.push(*sample);
        }
        records.push(CsiRecord { csi, ..rec.clone() });
    }
    Ok(CsiStream {
        receiver_id: stream.receiver_id,
        antenna_id: stream.antenna_id,
        bandwidth: stream.bandwidth,
        records,
        pruned_subcarriers: Some(keep.len()),
    })
}
