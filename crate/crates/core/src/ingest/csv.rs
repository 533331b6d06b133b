//! CSV capture export: one row per subcarrier sample.
//!
//! Header: `receiver_id,antenna_id,stream_id,seq_num,timestamp_us,sc_index,re,im`.
//! A record is a run of rows with the same identifying columns and
//! `sc_index` counting up from 0. The bandwidth is inferred from the record
//! width (64 tones: 20 MHz, 256 tones: 80 MHz); a header-only file decodes
//! as an empty 20 MHz capture.

use super::{Bandwidth, Capture, ComplexSample, CsiRecord, IngestError, SEQ_MODULUS};

pub const HEADER: [&str; 8] = [
    "receiver_id",
    "antenna_id",
    "stream_id",
    "seq_num",
    "timestamp_us",
    "sc_index",
    "re",
    "im",
];

pub fn encode(capture: &Capture) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    // Writing into a Vec cannot fail.
    w.write_record(HEADER).expect("in-memory csv write");
    for rec in &capture.records {
        for (k, s) in rec.csi.iter().enumerate() {
            w.write_record(&[
                rec.receiver_id.to_string(),
                rec.antenna_id.to_string(),
                rec.stream_id.to_string(),
                rec.seq_num.to_string(),
                rec.timestamp_us.to_string(),
                k.to_string(),
                s.re.to_string(),
                s.im.to_string(),
            ])
            .expect("in-memory csv write");
        }
    }
    w.into_inner().expect("in-memory csv flush")
}

fn field<T: std::str::FromStr>(
    row: &csv::StringRecord,
    col: usize,
    line: usize,
) -> Result<T, IngestError> {
    let raw = row.get(col).unwrap_or("");
    raw.trim().parse().map_err(|_| IngestError::Csv {
        line,
        reason: format!("cannot parse column '{}' from '{raw}'", HEADER[col]),
    })
}

pub fn decode(bytes: &[u8]) -> Result<Capture, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(bytes);
    let headers = reader.headers().map_err(|e| IngestError::Csv {
        line: 1,
        reason: e.to_string(),
    })?;
    if headers.iter().map(str::trim).ne(HEADER.iter().copied()) {
        return Err(IngestError::Csv {
            line: 1,
            reason: format!("expected header '{}'", HEADER.join(",")),
        });
    }

    let mut records: Vec<CsiRecord> = Vec::new();
    let mut width: Option<usize> = None;
    let close =
        |rec: &CsiRecord, index: usize, width: &mut Option<usize>| -> Result<(), IngestError> {
            let n = rec.csi.len();
            match *width {
                None => {
                    if Bandwidth::from_fft_size(n).is_none() {
                        return Err(IngestError::Schema {
                            index,
                            reason: format!("{n} subcarriers is neither 64 nor 256"),
                        });
                    }
                    *width = Some(n);
                }
                Some(w) if w != n => {
                    return Err(IngestError::Schema {
                        index,
                        reason: format!("{n} subcarriers, earlier records have {w}"),
                    })
                }
                Some(_) => {}
            }
            Ok(())
        };

    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| IngestError::Csv {
            line,
            reason: e.to_string(),
        })?;
        let receiver_id: u8 = field(&row, 0, line)?;
        let antenna_id: u8 = field(&row, 1, line)?;
        let stream_id: u8 = field(&row, 2, line)?;
        let seq_num: u16 = field(&row, 3, line)?;
        let timestamp_us: u64 = field(&row, 4, line)?;
        let sc_index: usize = field(&row, 5, line)?;
        let re: f32 = field(&row, 6, line)?;
        let im: f32 = field(&row, 7, line)?;
        let sample = ComplexSample::new(re, im);

        let index = if sc_index == 0 {
            records.len()
        } else {
            records.len().saturating_sub(1)
        };
        if !sample.is_finite() {
            return Err(IngestError::Schema {
                index,
                reason: format!("non-finite value on line {line}"),
            });
        }
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

        if sc_index == 0 {
            if let Some(prev) = records.last() {
                close(prev, records.len() - 1, &mut width)?;
            }
            records.push(CsiRecord {
                receiver_id,
                antenna_id,
                stream_id,
                seq_num,
                timestamp_us,
                csi: vec![sample],
            });
            continue;
        }
        let open_index = records.len().saturating_sub(1);
        let Some(current) = records.last_mut() else {
            return Err(IngestError::Csv {
                line,
                reason: "first row must have sc_index 0".into(),
            });
        };
        let same = current.receiver_id == receiver_id
            && current.antenna_id == antenna_id
            && current.seq_num == seq_num
            && current.timestamp_us == timestamp_us;
        if !same || sc_index != current.csi.len() {
            return Err(IngestError::Csv {
                line,
                reason: format!(
                    "row does not continue record {} (expected sc_index {})",
                    open_index,
                    current.csi.len()
                ),
            });
        }
        current.csi.push(sample);
    }
    if let Some(prev) = records.last() {
        close(prev, records.len() - 1, &mut width)?;
    }
    let bandwidth = width
        .and_then(Bandwidth::from_fft_size)
        .unwrap_or(Bandwidth::Mhz20);
    Ok(Capture { bandwidth, records })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn capture() -> Capture {
        let mut cap = Capture::new(Bandwidth::Mhz20);
        for seq in 0..2u16 {
            cap.records.push(CsiRecord {
                receiver_id: 1,
                antenna_id: 2,
                stream_id: 0,
                seq_num: seq,
                timestamp_us: 10 * u64::from(seq),
                csi: (0..64)
                    .map(|k| ComplexSample::new(k as f32 * 0.1, 1.0 / (k as f32 + 3.0)))
                    .collect(),
            });
        }
        cap
    }

    #[test]
    fn round_trip() {
        let cap = capture();
        assert_eq!(decode(&encode(&cap)).unwrap(), cap);
    }

    #[test]
    fn header_only() {
        let text = format!("{}\n", HEADER.join(","));
        assert!(decode(text.as_bytes()).unwrap().records.is_empty());
    }

    #[test]
    fn wrong_width_rejected() {
        let mut cap = capture();
        cap.records[1].csi.truncate(60);
        assert!(matches!(
            decode(&encode(&cap)),
            Err(IngestError::Schema { index: 1, .. })
        ));
    }

    #[test]
    fn gap_in_sc_index_rejected() {
        let text = format!("{}\n0,0,0,1,5,0,1,1\n0,0,0,1,5,2,1,1\n", HEADER.join(","));
        assert!(matches!(
            decode(text.as_bytes()),
            Err(IngestError::Csv { line: 3, .. })
        ));
    }

    #[test]
    fn bad_header_rejected() {
        assert!(matches!(
            decode(b"a,b,c\n1,2,3\n"),
            Err(IngestError::Csv { line: 1, .. })
        ));
    }
}
