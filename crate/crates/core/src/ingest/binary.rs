//! Canonical binary capture encoding (all integers little-endian).
//!
//! ```text
//! header  : magic "CSIC" | version u16 | bandwidth_mhz u16 | record_count u64
//! record  : receiver_id u8 | antenna_id u8 | stream_id u8 | pad u8
//!           | seq_num u16 | pad u16 | timestamp_us u64
//!           | subcarrier_count u16 | pad u16
//!           | subcarrier_count x (re f32, im f32)
//! ```

use super::{Bandwidth, Capture, ComplexSample, CsiRecord, IngestError, SEQ_MODULUS};

pub const MAGIC: &[u8; 4] = b"CSIC";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 16;
pub const RECORD_HEADER_LEN: usize = 20;

pub fn encode(capture: &Capture) -> Vec<u8> {
    let body: usize = capture
        .records
        .iter()
        .map(|r| RECORD_HEADER_LEN + 8 * r.csi.len())
        .sum();
    let mut out = Vec::with_capacity(HEADER_LEN + body);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&capture.bandwidth.mhz().to_le_bytes());
    out.extend_from_slice(&(capture.records.len() as u64).to_le_bytes());
    for rec in &capture.records {
        out.extend_from_slice(&[rec.receiver_id, rec.antenna_id, rec.stream_id, 0]);
        out.extend_from_slice(&rec.seq_num.to_le_bytes());
        out.extend_from_slice(&[0, 0]);
        out.extend_from_slice(&rec.timestamp_us.to_le_bytes());
        out.extend_from_slice(&(rec.csi.len() as u16).to_le_bytes());
        out.extend_from_slice(&[0, 0]);
        for s in &rec.csi {
            out.extend_from_slice(&s.re.to_le_bytes());
            out.extend_from_slice(&s.im.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let slice = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(slice)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u64_at(b: &[u8], at: usize) -> u64 {
    let mut buf = [0u8; 8];
    buf.copy_from_slice(&b[at..at + 8]);
    u64::from_le_bytes(buf)
}

fn f32_at(b: &[u8], at: usize) -> f32 {
    f32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Decodes a binary capture. Never panics: any malformed input yields an
/// [`IngestError`].
pub fn decode(bytes: &[u8]) -> Result<Capture, IngestError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let header = cur.take(HEADER_LEN).ok_or_else(|| IngestError::Format {
        offset: bytes.len(),
        reason: format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len()),
    })?;
    if &header[0..4] != MAGIC {
        return Err(IngestError::Format {
            offset: 0,
            reason: "bad magic, expected \"CSIC\"".into(),
        });
    }
    let version = u16_at(header, 4);
    if version != VERSION {
        return Err(IngestError::Format {
            offset: 4,
            reason: format!("unsupported version {version}"),
        });
    }
    let mhz = u16_at(header, 6);
    let bandwidth = Bandwidth::from_mhz(mhz).ok_or_else(|| IngestError::Format {
        offset: 6,
        reason: format!("unsupported bandwidth {mhz} MHz"),
    })?;
    let count = u64_at(header, 8);
    let fft = bandwidth.fft_size();

    // Do not trust `count` for the allocation size.
    let min_record = RECORD_HEADER_LEN as u64;
    let plausible = (cur.remaining() as u64 / min_record).min(count) as usize;
    let mut records = Vec::with_capacity(plausible);

    for index in 0..count {
        let index = index as usize;
        let available = cur.remaining();
        let head = cur
            .take(RECORD_HEADER_LEN)
            .ok_or(IngestError::PartialRecord {
                index,
                needed: RECORD_HEADER_LEN,
                available,
            })?;
        let receiver_id = head[0];
        let antenna_id = head[1];
        let stream_id = head[2];
        let seq_num = u16_at(head, 4);
        let timestamp_us = u64_at(head, 8);
        let n = u16_at(head, 16) as usize;

        let payload = n * 8;
        let body = cur.take(payload).ok_or(IngestError::PartialRecord {
            index,
            needed: RECORD_HEADER_LEN + payload,
            available,
        })?;
        if stream_id != 0 {
            return Err(IngestError::Schema {
                index,
                reason: format!("stream_id {stream_id}, only stream 0 is supported"),
            });
        }
        if seq_num >= SEQ_MODULUS {
            return Err(IngestError::Schema {
                index,
                reason: format!("sequence number {seq_num} exceeds 12 bits"),
            });
        }
        if n != fft {
            return Err(IngestError::Schema {
                index,
                reason: format!("{n} subcarriers, {bandwidth} captures carry {fft}"),
            });
        }
        let mut csi = Vec::with_capacity(n);
        for k in 0..n {
            let s = ComplexSample::new(f32_at(body, 8 * k), f32_at(body, 8 * k + 4));
            if !s.is_finite() {
                return Err(IngestError::Schema {
                    index,
                    reason: format!("non-finite value on subcarrier {k}"),
                });
            }
            csi.push(s);
        }
        records.push(CsiRecord {
            receiver_id,
            antenna_id,
            stream_id,
            seq_num,
            timestamp_us,
            csi,
        });
    }
    if cur.remaining() != 0 {
        return Err(IngestError::Format {
            offset: cur.pos,
            reason: format!("{} trailing bytes after the last record", cur.remaining()),
        });
    }
    Ok(Capture { bandwidth, records })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Byte-level writer independent of [`encode`], used to build test files.
    fn raw_file(mhz: u16, count: u64, records: &[(u8, u8, u16, u64, usize)]) -> Vec<u8> {
        let mut b = b"CSIC".to_vec();
        b.extend(1u16.to_le_bytes());
        b.extend(mhz.to_le_bytes());
        b.extend(count.to_le_bytes());
        for &(rx, ant, seq, ts, n) in records {
            b.extend([rx, ant, 0, 0]);
            b.extend(seq.to_le_bytes());
            b.extend([0, 0]);
            b.extend(ts.to_le_bytes());
            b.extend((n as u16).to_le_bytes());
            b.extend([0, 0]);
            for k in 0..n {
                b.extend((k as f32).to_le_bytes());
                b.extend((-(k as f32)).to_le_bytes());
            }
        }
        b
    }

    #[test]
    fn two_records_one_stream() {
        let bytes = raw_file(20, 2, &[(0, 0, 1, 100, 64), (0, 0, 2, 200, 64)]);
        let cap = decode(&bytes).unwrap();
        let streams = cap.into_streams();
        assert_eq!(streams.len(), 1);
        assert_eq!(streams[0].records.len(), 2);
        assert_eq!(streams[0].records[1].csi[5], ComplexSample::new(5.0, -5.0));
    }

    #[test]
    fn header_only_is_empty() {
        let cap = decode(&raw_file(80, 0, &[])).unwrap();
        assert_eq!(cap.bandwidth, Bandwidth::Mhz80);
        assert!(cap.into_streams().is_empty());
    }

    #[test]
    fn short_record_is_schema_error() {
        let bytes = raw_file(
            20,
            3,
            &[(0, 0, 1, 1, 64), (0, 0, 2, 2, 60), (0, 0, 3, 3, 64)],
        );
        match decode(&bytes) {
            Err(IngestError::Schema { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_record_names_index() {
        let mut bytes = raw_file(20, 2, &[(0, 0, 1, 1, 64), (0, 0, 2, 2, 64)]);
        bytes.truncate(bytes.len() - 3);
        match decode(&bytes) {
            Err(IngestError::PartialRecord { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected partial record, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_reports_offset() {
        let mut bytes = raw_file(20, 0, &[]);
        bytes[0] = b'X';
        assert!(matches!(
            decode(&bytes),
            Err(IngestError::Format { offset: 0, .. })
        ));
        let mut bytes = raw_file(40, 0, &[]);
        bytes.truncate(16);
        assert!(matches!(
            decode(&bytes),
            Err(IngestError::Format { offset: 6, .. })
        ));
        assert!(matches!(decode(b"CSI"), Err(IngestError::Format { .. })));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = raw_file(20, 1, &[(0, 0, 1, 1, 64)]);
        bytes.push(0);
        assert!(matches!(decode(&bytes), Err(IngestError::Format { .. })));
    }

    #[test]
    fn seq_out_of_range_rejected() {
        let bytes = raw_file(20, 1, &[(0, 0, 4096, 1, 64)]);
        assert!(matches!(
            decode(&bytes),
            Err(IngestError::Schema { index: 0, .. })
        ));
    }

    #[test]
    fn huge_count_does_not_allocate() {
        let bytes = raw_file(20, u64::MAX, &[]);
        assert!(matches!(
            decode(&bytes),
            Err(IngestError::PartialRecord { index: 0, .. })
        ));
    }

    #[test]
    fn encode_matches_reference_writer() {
        let bytes = raw_file(20, 2, &[(1, 3, 4095, 7, 64), (2, 0, 0, 9, 64)]);
        assert_eq!(encode(&decode(&bytes).unwrap()), bytes);
    }
}
