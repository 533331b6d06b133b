use std::collections::BTreeSet;

use csisense::align::micro_align;
use csisense::fewshot::{prototype_probabilities, softmax, Prototype};
use csisense::fusion::{fuse, ClassProbabilities};
use csisense::ingest::Capture;
use csisense::ingest::{binary, csv, prune_subcarriers};
use csisense::prepare::{compact, correlation, CompactFrame, DataFrame};
use csisense::{Bandwidth, ComplexSample, CsiRecord, CsiStream, Matrix, PruneMask};
use proptest::prelude::*;

fn record(rx: u8, ant: u8, seq: u16, ts: u64, csi: Vec<ComplexSample>) -> CsiRecord {
    CsiRecord {
        receiver_id: rx,
        antenna_id: ant,
        stream_id: 0,
        seq_num: seq,
        timestamp_us: ts,
        csi,
    }
}

fn sample() -> impl Strategy<Value = ComplexSample> {
    (-1e3f32..1e3, -1e3f32..1e3).prop_map(|(re, im)| ComplexSample::new(re, im))
}

fn capture_20() -> impl Strategy<Value = Capture> {
    prop::collection::vec(
        (
            0u8..4,
            0u8..4,
            0u16..4096,
            any::<u64>(),
            prop::collection::vec(sample(), 64),
        ),
        0..6,
    )
    .prop_map(|rows| Capture {
        bandwidth: Bandwidth::Mhz20,
        records: rows
            .into_iter()
            .map(|(r, a, s, t, c)| record(r, a, s, t, c))
            .collect(),
    })
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-1.0f64..1.0, rows * cols)
        .prop_map(move |v| Matrix::from_vec(rows, cols, v))
}

fn frame(m: Matrix) -> DataFrame {
    DataFrame {
        receiver_id: 0,
        window_index: 0,
        antennas: 1,
        window: m.rows(),
        subcarriers: m.cols(),
        matrix: m,
    }
}

fn feature(m: Matrix) -> Matrix {
    correlation(&compact(&frame(m)).unwrap()).matrix
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn binary_decoder_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..512)) {
        let _ = binary::decode(&bytes);
    }

    #[test]
    fn binary_decoder_survives_corrupted_header(count in any::<u64>(), tail in prop::collection::vec(any::<u8>(), 0..200)) {
        let mut bytes = b"CSIC".to_vec();
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&20u16.to_le_bytes());
        bytes.extend_from_slice(&count.to_le_bytes());
        bytes.extend_from_slice(&tail);
        let _ = binary::decode(&bytes);
    }

    #[test]
    fn csv_decoder_never_panics(text in "[0-9a-z,.\\-\n ]{0,300}") {
        let with_header = format!("{}\n{text}", csv::HEADER.join(","));
        let _ = csv::decode(text.as_bytes());
        let _ = csv::decode(with_header.as_bytes());
    }

    #[test]
    fn binary_round_trip(capture in capture_20()) {
        prop_assert_eq!(binary::decode(&binary::encode(&capture)).unwrap(), capture);
    }

    #[test]
    fn csv_round_trip(capture in capture_20()) {
        let mut capture = capture;
        // The CSV export has no row for a record without subcarriers and
        // keys records by (receiver, antenna, seq, timestamp).
        let mut seen = BTreeSet::new();
        capture.records.retain(|r| seen.insert((r.receiver_id, r.antenna_id, r.seq_num, r.timestamp_us)));
        prop_assert_eq!(csv::decode(&csv::encode(&capture)).unwrap(), capture);
    }

    #[test]
    fn pruning_projects_kept_tones(csi in prop::collection::vec(sample(), 64), mut keep in prop::collection::btree_set(0usize..64, 1..64)) {
        let keep: Vec<usize> = std::mem::take(&mut keep).into_iter().collect();
        let mask = PruneMask::new(Bandwidth::Mhz20, keep.clone()).unwrap();
        let mut stream = CsiStream::new(0, 0, Bandwidth::Mhz20);
        stream.records.push(record(0, 0, 1, 1, csi.clone()));
        let pruned = prune_subcarriers(&stream, &mask).unwrap();
        let expect: Vec<ComplexSample> = keep.iter().map(|&k| csi[k]).collect();
        prop_assert_eq!(&pruned.records[0].csi, &expect);
        prop_assert_eq!(pruned.subcarriers(), keep.len());
        prop_assert!(prune_subcarriers(&pruned, &mask).is_err());
    }

    #[test]
    fn micro_alignment_keeps_the_intersection(
        start in 0u16..4096,
        len in 1usize..6000,
        losses in prop::collection::vec(prop::collection::vec(any::<bool>(), 6000), 1..4),
    ) {
        let csi = vec![ComplexSample::new(1.0, 0.0); 64];
        let mut streams = Vec::new();
        let mut kept: Vec<BTreeSet<usize>> = Vec::new();
        for (a, lost) in losses.iter().enumerate() {
            let mut s = CsiStream::new(0, a as u8, Bandwidth::Mhz20);
            let mut set = BTreeSet::new();
            // Keep one packet in three at most dropped so no gap exceeds half the counter.
            for i in 0..len {
                if lost[i] && i % 3 != 0 {
                    continue;
                }
                set.insert(i);
                let seq = ((start as usize + i) % 4096) as u16;
                s.records.push(record(0, a as u8, seq, 10_000 * i as u64, csi.clone()));
            }
            streams.push(s);
            kept.push(set);
        }
        let oracle: Vec<usize> = kept.iter().skip(1).fold(kept[0].clone(), |acc, s| &acc & s).into_iter().collect();
        let block = micro_align(&streams).unwrap();
        for s in &block.per_antenna {
            let got: Vec<usize> = s.records.iter().map(|r| (r.timestamp_us / 10_000) as usize).collect();
            prop_assert_eq!(&got, &oracle);
        }
        let seqs: Vec<u16> = oracle.iter().map(|&i| ((start as usize + i) % 4096) as u16).collect();
        prop_assert_eq!(block.seq_nums, seqs);
    }

    #[test]
    fn correlation_is_symmetric_and_bounded(m in matrix(12, 12)) {
        let c = CompactFrame { matrix: m, receiver_id: 0, window_index: 0, zero_padded: false };
        let f = correlation(&c).matrix;
        for i in 0..12 {
            prop_assert!((f[(i, i)] - 1.0).abs() < 1e-12);
            for j in 0..12 {
                prop_assert_eq!(f[(i, j)], f[(j, i)]);
                prop_assert!(f[(i, j)].abs() <= 1.0);
            }
        }
    }

    #[test]
    fn feature_ignores_orthogonal_mixing_in_time(m in matrix(30, 8), v in prop::collection::vec(-1.0f64..1.0, 30), shift in 1usize..30) {
        // H -> Q H with Q a Householder reflection followed by a cyclic row shift.
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assume!(norm > 1e-3);
        let u: Vec<f64> = v.iter().map(|x| x / norm).collect();
        let mut reflected = m.clone();
        for c in 0..8 {
            let dot: f64 = (0..30).map(|r| u[r] * m[(r, c)]).sum();
            for r in 0..30 {
                reflected[(r, c)] -= 2.0 * u[r] * dot;
            }
        }
        let mixed = Matrix::from_fn(30, 8, |r, c| reflected[((r + shift) % 30, c)]);
        let a = feature(m);
        let b = feature(mixed);
        prop_assert!(a.max_abs_diff(&b) < 1e-8, "diff {}", a.max_abs_diff(&b));
    }

    #[test]
    fn feature_shape_is_subcarrier_square(n in 1usize..4, w in 10usize..40, s in 2usize..20) {
        let m = Matrix::from_fn(n * w, s, |r, c| ((r * 7 + c * 13) % 11) as f64 + (r as f64 * 0.1 + c as f64).sin());
        let f = feature(m);
        prop_assert_eq!(f.shape(), (s, s));
    }

    #[test]
    fn fusion_ignores_receiver_order_and_scale(
        raw in prop::collection::vec(prop::collection::vec(0u32..16, 4), 1..5),
        rotate in 0usize..5,
        scale_exp in -3i32..4,
    ) {
        // Multiples of 1/16 sum exactly, so ties survive reordering.
        let vectors: Vec<ClassProbabilities> = raw
            .iter()
            .enumerate()
            .map(|(r, v)| ClassProbabilities::new(r as u8, v.iter().map(|&x| f64::from(x) / 16.0).collect()))
            .collect();
        let base = fuse(&vectors).unwrap();
        let mut rotated = vectors.clone();
        rotated.rotate_left(rotate % vectors.len());
        prop_assert_eq!(fuse(&rotated).unwrap(), base);
        let scale = 2f64.powi(scale_exp);
        let scaled: Vec<ClassProbabilities> = vectors
            .iter()
            .map(|v| ClassProbabilities::new(v.receiver_id, v.probs.iter().map(|p| p * scale).collect()))
            .collect();
        prop_assert_eq!(fuse(&scaled).unwrap(), base);
    }

    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-1e3f64..1e3, 1..10)) {
        let p = softmax(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn prototype_probabilities_are_positive(protos in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 3), 1..6), z in prop::collection::vec(-50.0f64..50.0, 3)) {
        let protos: Vec<Prototype> = protos.into_iter().enumerate().map(|(i, v)| Prototype { class_id: i, vector: v }).collect();
        let p = prototype_probabilities(&protos, &z);
        prop_assert!(p.iter().all(|x| *x > 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}
