use super::{Bandwidth, IngestError};

/// Set of raw tone indices to keep.
///
/// Raw index `i` of a CSI vector is tone `i - fft_size/2`, i.e. vectors are
/// stored in ascending frequency with DC at `fft_size/2`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneMask {
    bandwidth: Bandwidth,
    keep: Vec<usize>,
}

// 802.11ac VHT tone plans. 20 MHz: tones +-1..=28 are occupied, pilots sit on
// +-7 and +-21. 80 MHz: tones +-2..=122 are occupied, DC and +-1 are nulls.
const PILOTS_20: [i32; 4] = [-21, -7, 7, 21];

impl PruneMask {
    /// Validates that indices are strictly increasing and inside the raw FFT.
    pub fn new(bandwidth: Bandwidth, keep: Vec<usize>) -> Result<Self, IngestError> {
        let n = bandwidth.fft_size();
        if keep.is_empty() {
            return Err(IngestError::Mask("mask keeps no subcarriers".into()));
        }
        for w in keep.windows(2) {
            if w[1] <= w[0] {
                return Err(IngestError::Mask(format!(
                    "indices must be strictly increasing ({} then {})",
                    w[0], w[1]
                )));
            }
        }
        if let Some(&last) = keep.last() {
            if last >= n {
                return Err(IngestError::Mask(format!(
                    "index {last} out of range for {bandwidth} ({n} tones)"
                )));
            }
        }
        Ok(PruneMask { bandwidth, keep })
    }

    /// Default mask: 52 data tones at 20 MHz (guards, DC and the four
    /// pilots removed); 242 occupied tones at 80 MHz (guards and the three
    /// DC nulls removed).
    pub fn default_for(bandwidth: Bandwidth) -> Self {
        let half = (bandwidth.fft_size() / 2) as i32;
        let keep_tone = |t: i32| match bandwidth {
            Bandwidth::Mhz20 => (1..=28).contains(&t.abs()) && !PILOTS_20.contains(&t),
            Bandwidth::Mhz80 => (2..=122).contains(&t.abs()),
        };
        let keep = (-half..half)
            .filter(|&t| keep_tone(t))
            .map(|t| (t + half) as usize)
            .collect();
        PruneMask { bandwidth, keep }
    }

    pub fn identity(bandwidth: Bandwidth) -> Self {
        PruneMask {
            bandwidth,
            keep: (0..bandwidth.fft_size()).collect(),
        }
    }

    /// Parses a list such as `"4-10, 12, 14-20"` (inclusive ranges).
    pub fn parse(bandwidth: Bandwidth, text: &str) -> Result<Self, IngestError> {
        let mut keep = Vec::new();
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let bad = || IngestError::Mask(format!("cannot parse mask entry '{part}'"));
            match part.split_once('-') {
                Some((lo, hi)) => {
                    let lo: usize = lo.trim().parse().map_err(|_| bad())?;
                    let hi: usize = hi.trim().parse().map_err(|_| bad())?;
                    if hi < lo {
                        return Err(bad());
                    }
                    keep.extend(lo..=hi);
                }
                None => keep.push(part.parse().map_err(|_| bad())?),
            }
        }
        PruneMask::new(bandwidth, keep)
    }

    pub fn bandwidth(&self) -> Bandwidth {
        self.bandwidth
    }

    pub fn keep_indices(&self) -> &[usize] {
        &self.keep
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_counts() {
        assert_eq!(PruneMask::default_for(Bandwidth::Mhz20).len(), 52);
        assert_eq!(PruneMask::default_for(Bandwidth::Mhz80).len(), 242);
    }

    #[test]
    fn default_20_excludes_dc_and_pilots() {
        let mask = PruneMask::default_for(Bandwidth::Mhz20);
        let keep = mask.keep_indices();
        for tone in [0, 7, -7, 21, -21, 29, -29, -32] {
            assert!(!keep.contains(&((tone + 32) as usize)), "tone {tone} kept");
        }
        assert!(keep.contains(&(32 + 1)));
        assert!(keep.contains(&(32 - 28)));
    }

    #[test]
    fn default_80_excludes_dc_nulls() {
        let keep = PruneMask::default_for(Bandwidth::Mhz80)
            .keep_indices()
            .to_vec();
        for tone in [-1i32, 0, 1, 123, -123] {
            assert!(!keep.contains(&((tone + 128) as usize)));
        }
    }

    #[test]
    fn validation() {
        assert!(PruneMask::new(Bandwidth::Mhz20, vec![3, 2]).is_err());
        assert!(PruneMask::new(Bandwidth::Mhz20, vec![1, 64]).is_err());
        assert!(PruneMask::new(Bandwidth::Mhz20, vec![]).is_err());
        assert!(PruneMask::new(Bandwidth::Mhz20, vec![0, 63]).is_ok());
    }

    #[test]
    fn parse_ranges() {
        let m = PruneMask::parse(Bandwidth::Mhz20, "1-3, 5,  9-10").unwrap();
        assert_eq!(m.keep_indices(), &[1, 2, 3, 5, 9, 10]);
        assert!(PruneMask::parse(Bandwidth::Mhz20, "5-3").is_err());
        assert!(PruneMask::parse(Bandwidth::Mhz20, "x").is_err());
    }
}
