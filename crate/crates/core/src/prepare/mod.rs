//! From aligned CSI streams to learner inputs.
//!
//! Per receiver and window: every packet is turned into a real vector
//! (normalized amplitude or unwrapped phase), the `W` packets of each
//! antenna form a `W x S` segment, the `N` segments are stacked into an
//! `N*W x S` data frame `H`, the frame is compacted to the `S x S` matrix
//! `H^T V = U diag(sigma)` and finally the Pearson correlation between the
//! rows of that matrix is the feature.

mod features;
mod svd;

use std::fmt;
use std::str::FromStr;

pub use features::{decode_features, encode_features, read_features, write_features};
pub use svd::{svd_thin, SvdResult, MAX_SWEEPS, OFF_DIAGONAL_TOL};

use crate::align::AlignedCampaign;
use crate::ingest::CsiRecord;
use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PrepareError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("degenerate record: all {len} amplitudes are zero")]
    DegenerateRecord { len: usize },
    #[error("non-finite value in {what} at ({row}, {col})")]
    NonFinite {
        what: &'static str,
        row: usize,
        col: usize,
    },
    #[error("svd did not converge after {sweeps} sweeps (off-diagonal residual {residual:e})")]
    Convergence { sweeps: usize, residual: f64 },
    #[error("feature file: {reason} (byte offset {offset})")]
    FeatureFile { offset: usize, reason: String },
}

impl PrepareError {
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            PrepareError::NonFinite { .. } | PrepareError::Convergence { .. }
        )
    }
}

/// Which part of the complex CSI feeds the features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeatureMode {
    /// Amplitude divided by the packet's mean amplitude.
    #[default]
    Amplitude,
    /// Phase unwrapped along the subcarrier axis, not normalized.
    Phase,
}

impl FromStr for FeatureMode {
    type Err = PrepareError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "amplitude" => Ok(FeatureMode::Amplitude),
            "phase" => Ok(FeatureMode::Phase),
            other => Err(PrepareError::Parameter(format!(
                "mode must be 'amplitude' or 'phase', got '{other}'"
            ))),
        }
    }
}

impl fmt::Display for FeatureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureMode::Amplitude => "amplitude",
            FeatureMode::Phase => "phase",
        })
    }
}

/// Divides every amplitude by the mean amplitude of the vector.
pub fn normalize(amplitudes: &[f64]) -> Result<Vec<f64>, PrepareError> {
    if amplitudes.is_empty() {
        return Err(PrepareError::Parameter(
            "cannot normalize an empty vector".into(),
        ));
    }
    let mean = amplitudes.iter().sum::<f64>() / amplitudes.len() as f64;
    if mean == 0.0 {
        return Err(PrepareError::DegenerateRecord {
            len: amplitudes.len(),
        });
    }
    Ok(amplitudes.iter().map(|a| a / mean).collect())
}

/// Removes `2*pi` jumps between neighbouring entries.
pub fn unwrap_phase(phase: &[f64]) -> Vec<f64> {
    use std::f64::consts::{PI, TAU};
    let mut out = Vec::with_capacity(phase.len());
    let mut offset = 0.0;
    for (k, &p) in phase.iter().enumerate() {
        if k > 0 {
            let d = p - phase[k - 1];
            if d > PI {
                offset -= TAU * ((d - PI) / TAU).ceil();
            } else if d < -PI {
                offset += TAU * ((-d - PI) / TAU).ceil();
            }
        }
        out.push(p + offset);
    }
    out
}

/// Real feature vector of one packet.
pub fn record_values(record: &CsiRecord, mode: FeatureMode) -> Result<Vec<f64>, PrepareError> {
    match mode {
        FeatureMode::Amplitude => {
            let amps: Vec<f64> = record.csi.iter().map(|s| s.amplitude()).collect();
            normalize(&amps)
        }
        FeatureMode::Phase => {
            if record.csi.iter().all(|s| s.re == 0.0 && s.im == 0.0) {
                return Err(PrepareError::DegenerateRecord {
                    len: record.csi.len(),
                });
            }
            let phase: Vec<f64> = record.csi.iter().map(|s| s.phase()).collect();
            Ok(unwrap_phase(&phase))
        }
    }
}

/// One antenna's `W x S` block for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSegment {
    pub matrix: Matrix,
    pub receiver_id: u8,
    pub antenna_id: u8,
    pub window_index: u32,
}

/// Cuts a `P x S` matrix into `floor(P / W)` consecutive non-overlapping
/// windows; the trailing `P mod W` rows are dropped. Window indices start at
/// `first_window`.
pub fn segment(
    rows: &Matrix,
    window: usize,
    receiver_id: u8,
    antenna_id: u8,
    first_window: u32,
) -> Result<Vec<DataSegment>, PrepareError> {
    if window == 0 {
        return Err(PrepareError::Parameter(
            "window length must be at least 1".into(),
        ));
    }
    let s = rows.cols();
    let count = rows.rows() / window;
    Ok((0..count)
        .map(|k| {
            let start = k * window * s;
            let data = rows.as_slice()[start..start + window * s].to_vec();
            DataSegment {
                matrix: Matrix::from_vec(window, s, data),
                receiver_id,
                antenna_id,
                window_index: first_window + k as u32,
            }
        })
        .collect())
}

/// `N*W x S` stack of one receiver's antenna segments for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct DataFrame {
    pub matrix: Matrix,
    pub receiver_id: u8,
    pub window_index: u32,
    pub antennas: usize,
    pub window: usize,
    pub subcarriers: usize,
}

/// Stacks segments in ascending antenna order: antenna `n` (by rank among
/// the given antenna ids) occupies rows `[n*W, (n+1)*W)`.
pub fn stack(segments: &[DataSegment]) -> Result<DataFrame, PrepareError> {
    let first = segments
        .first()
        .ok_or_else(|| PrepareError::Shape("no segments to stack".into()))?;
    let (w, s) = first.matrix.shape();
    for seg in segments {
        if seg.matrix.shape() != (w, s) {
            return Err(PrepareError::Shape(format!(
                "antenna {} segment is {}x{}, expected {w}x{s}",
                seg.antenna_id,
                seg.matrix.rows(),
                seg.matrix.cols()
            )));
        }
        if seg.receiver_id != first.receiver_id || seg.window_index != first.window_index {
            return Err(PrepareError::Shape(format!(
                "segment (rx {}, window {}) does not belong to (rx {}, window {})",
                seg.receiver_id, seg.window_index, first.receiver_id, first.window_index
            )));
        }
    }
    let mut order: Vec<&DataSegment> = segments.iter().collect();
    order.sort_by_key(|seg| seg.antenna_id);
    if order.windows(2).any(|p| p[0].antenna_id == p[1].antenna_id) {
        return Err(PrepareError::Shape("duplicate antenna in stack".into()));
    }
    let mut data = Vec::with_capacity(order.len() * w * s);
    for seg in &order {
        data.extend_from_slice(seg.matrix.as_slice());
    }
    Ok(DataFrame {
        matrix: Matrix::from_vec(order.len() * w, s, data),
        receiver_id: first.receiver_id,
        window_index: first.window_index,
        antennas: order.len(),
        window: w,
        subcarriers: s,
    })
}

/// The `S x S` compact data frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CompactFrame {
    pub matrix: Matrix,
    pub receiver_id: u8,
    pub window_index: u32,
    /// Set when `N*W < S`: only the first `N*W` columns are populated.
    pub zero_padded: bool,
}

/// Projects `H^T` (S x N*W) onto its right singular vectors:
/// `H' = H^T V = U diag(sigma)`, an `S x S` matrix.
pub fn compact(frame: &DataFrame) -> Result<CompactFrame, PrepareError> {
    let s = frame.matrix.cols();
    let at = frame.matrix.transpose();
    let (us, _sigma) = svd::left_scaled(&at)?;
    let zero_padded = us.cols() < s;
    let matrix = if zero_padded {
        log::warn!(
            "rx {} window {}: {} rows < {s} subcarriers, compact frame zero-padded",
            frame.receiver_id,
            frame.window_index,
            frame.matrix.rows()
        );
        let mut m = Matrix::zeros(s, s);
        for r in 0..s {
            m.row_mut(r)[..us.cols()].copy_from_slice(us.row(r));
        }
        m
    } else {
        us
    };
    Ok(CompactFrame {
        matrix,
        receiver_id: frame.receiver_id,
        window_index: frame.window_index,
        zero_padded,
    })
}

/// Pearson correlation between subcarriers; the learner's input.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationFeature {
    pub matrix: Matrix,
    pub label: Option<usize>,
    pub receiver_id: u8,
    pub window_index: u32,
}

impl CorrelationFeature {
    pub fn size(&self) -> usize {
        self.matrix.rows()
    }
}

/// Correlation matrix plus the rows that had no variance.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationReport {
    pub feature: CorrelationFeature,
    pub degenerate_rows: Vec<usize>,
}

/// Pearson correlation coefficients between the rows of `compact`.
pub fn correlation(compact: &CompactFrame) -> CorrelationFeature {
    correlation_report(compact).feature
}

/// As [`correlation`], also listing zero-variance rows. Such a row gets
/// correlation 0 with every other row and 1 with itself.
pub fn correlation_report(compact: &CompactFrame) -> CorrelationReport {
    let m = &compact.matrix;
    let (n, len) = m.shape();
    let max_abs = m.as_slice().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    // Variance below rounding level of the largest entry counts as zero.
    let floor = len as f64 * (64.0 * f64::EPSILON * max_abs).powi(2);

    let mut centered = Vec::with_capacity(n * len);
    let mut norms = Vec::with_capacity(n);
    let mut degenerate_rows = Vec::new();
    for r in 0..n {
        let row = m.row(r);
        let mean = row.iter().sum::<f64>() / len as f64;
        let start = centered.len();
        centered.extend(row.iter().map(|x| x - mean));
        let ss: f64 = centered[start..].iter().map(|x| x * x).sum();
        if ss <= floor || ss == 0.0 {
            degenerate_rows.push(r);
            norms.push(0.0);
        } else {
            norms.push(ss.sqrt());
        }
    }

    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        out[(i, i)] = 1.0;
        if norms[i] == 0.0 {
            continue;
        }
        let ci = &centered[i * len..(i + 1) * len];
        for j in i + 1..n {
            if norms[j] == 0.0 {
                continue;
            }
            let cj = &centered[j * len..(j + 1) * len];
            let cov: f64 = ci.iter().zip(cj).map(|(a, b)| a * b).sum();
            let rho = (cov / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            out[(i, j)] = rho;
            out[(j, i)] = rho;
        }
    }
    CorrelationReport {
        feature: CorrelationFeature {
            matrix: out,
            label: None,
            receiver_id: compact.receiver_id,
            window_index: compact.window_index,
        },
        degenerate_rows,
    }
}

/// Data frame straight to feature.
pub fn frame_to_feature(frame: &DataFrame) -> Result<CorrelationFeature, PrepareError> {
    let c = compact(frame)?;
    let report = correlation_report(&c);
    if !report.degenerate_rows.is_empty() {
        log::debug!(
            "rx {} window {}: {} zero-variance rows",
            frame.receiver_id,
            frame.window_index,
            report.degenerate_rows.len()
        );
    }
    Ok(report.feature)
}

/// Options for [`prepare_campaign`].
#[derive(Debug, Clone, PartialEq)]
pub struct PrepareConfig {
    pub window: usize,
    pub mode: FeatureMode,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        PrepareConfig {
            window: 300,
            mode: FeatureMode::Amplitude,
        }
    }
}

/// Features of one aligned campaign, grouped by receiver (in block order).
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedCampaign {
    pub per_receiver: Vec<Vec<CorrelationFeature>>,
    /// Aligned packets removed because some antenna reported all-zero CSI.
    pub dropped_degenerate: usize,
    /// Aligned packets that entered windowing.
    pub packets: usize,
}

/// Runs normalization, segmentation, stacking, compaction and correlation
/// for every receiver of `campaign`.
///
/// A packet whose CSI is degenerate on any receiver or antenna is removed
/// from all of them so that window `k` covers the same transmissions on
/// every receiver. Windows are numbered from `first_window`; features carry
/// `label`.
pub fn prepare_campaign(
    campaign: &AlignedCampaign,
    config: &PrepareConfig,
    label: Option<usize>,
    first_window: u32,
) -> Result<PreparedCampaign, PrepareError> {
    if config.window == 0 {
        return Err(PrepareError::Parameter(
            "window length must be at least 1".into(),
        ));
    }
    let p = campaign.len();
    let mut keep = vec![true; p];
    // values[block][antenna] = one row per aligned packet (None if degenerate).
    let mut values: Vec<Vec<Vec<Option<Vec<f64>>>>> = Vec::with_capacity(campaign.blocks.len());
    for block in &campaign.blocks {
        let mut per_antenna = Vec::with_capacity(block.per_antenna.len());
        for stream in &block.per_antenna {
            let mut rows = Vec::with_capacity(p);
            for (i, rec) in stream.records.iter().enumerate() {
                match record_values(rec, config.mode) {
                    Ok(v) => rows.push(Some(v)),
                    Err(PrepareError::DegenerateRecord { .. }) => {
                        keep[i] = false;
                        rows.push(None);
                    }
                    Err(e) => return Err(e),
                }
            }
            per_antenna.push(rows);
        }
        values.push(per_antenna);
    }
    let dropped = keep.iter().filter(|k| !**k).count();
    if dropped > 0 {
        log::warn!("dropped {dropped} packets with all-zero CSI");
    }
    let packets = p - dropped;

    let mut per_receiver = Vec::with_capacity(campaign.blocks.len());
    for (block, per_antenna) in campaign.blocks.iter().zip(values) {
        let mut segments_per_antenna = Vec::with_capacity(per_antenna.len());
        for (stream, rows) in block.per_antenna.iter().zip(per_antenna) {
            let s = rows.iter().flatten().next().map_or(0, Vec::len);
            let mut data = Vec::with_capacity(packets * s);
            for (row, k) in rows.into_iter().zip(&keep) {
                if *k {
                    data.extend(row.expect("kept rows are not degenerate"));
                }
            }
            let matrix = Matrix::from_vec(packets, s, data);
            segments_per_antenna.push(segment(
                &matrix,
                config.window,
                block.receiver_id,
                stream.antenna_id,
                first_window,
            )?);
        }
        let windows = packets / config.window;
        let mut per_antenna_iters: Vec<_> = segments_per_antenna
            .into_iter()
            .map(Vec::into_iter)
            .collect();
        let mut features = Vec::with_capacity(windows);
        for _ in 0..windows {
            let segs: Vec<DataSegment> = per_antenna_iters
                .iter_mut()
                .map(|it| it.next().expect("every antenna has the same window count"))
                .collect();
            let frame = stack(&segs)?;
            let mut feature = frame_to_feature(&frame)?;
            feature.label = label;
            features.push(feature);
        }
        per_receiver.push(features);
    }
    Ok(PreparedCampaign {
        per_receiver,
        dropped_degenerate: dropped,
        packets,
    })
}
