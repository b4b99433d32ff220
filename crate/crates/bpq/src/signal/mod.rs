//! Segment data model, deterministic splits, binary container format, and a
//! synthetic ECG/PPG generator with a known, learnable signal-to-BP mapping.

mod container;
mod synth;

pub use container::{read_container, write_container};
pub use synth::generate_synthetic;

use thiserror::Error;

/// Samples per channel: 10 seconds at 125 Hz.
pub const SEQ_LEN: usize = 1250;
/// Sampling rate in Hz.
pub const SAMPLE_RATE: f64 = 125.0;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset must contain at least one segment")]
    EmptyDataset,
    #[error("channel has {got} samples, expected {expected}")]
    BadChannelLength { got: usize, expected: usize },
    #[error("segment {segment}: non-finite sample value")]
    NonFiniteSample { segment: usize },
    #[error("segment {segment}: sbp {sbp} must exceed dbp {dbp}")]
    LabelOrder { segment: usize, sbp: f32, dbp: f32 },
    #[error("segment {segment}: label out of physiological range (sbp {sbp}, dbp {dbp})")]
    LabelRange { segment: usize, sbp: f32, dbp: f32 },
    #[error("split fractions must be positive and sum to 1 (got {sum})")]
    BadFractions { sum: f64 },
    #[error("bad container magic {found:?}")]
    BadMagic { found: [u8; 6] },
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated container: expected {expected} bytes after header, got {got}")]
    Truncated { expected: u64, got: u64 },
    #[error("container has {extra} trailing bytes after declared payload")]
    TrailingData { extra: u64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// One 10-second, 125 Hz, 2-channel window with SBP/DBP labels in mmHg.
/// Channels are dimensionless (z-scored per segment).
#[derive(Debug, Clone, PartialEq)]
pub struct SignalSegment {
    pub ecg: Vec<f32>,
    pub ppg: Vec<f32>,
    pub sbp: f32,
    pub dbp: f32,
}

impl SignalSegment {
    /// Validates every invariant: channel lengths, finiteness, label order
    /// and physiological ranges.
    pub fn new(ecg: Vec<f32>, ppg: Vec<f32>, sbp: f32, dbp: f32) -> Result<Self> {
        Self::validate(&ecg, &ppg, sbp, dbp, 0)?;
        Ok(Self { ecg, ppg, sbp, dbp })
    }

    pub(crate) fn validate(
        ecg: &[f32],
        ppg: &[f32],
        sbp: f32,
        dbp: f32,
        segment: usize,
    ) -> Result<()> {
        for ch in [ecg, ppg] {
            if ch.len() != SEQ_LEN {
                return Err(DataError::BadChannelLength {
                    got: ch.len(),
                    expected: SEQ_LEN,
                });
            }
            if !ch.iter().all(|v| v.is_finite()) {
                return Err(DataError::NonFiniteSample { segment });
            }
        }
        if !sbp.is_finite() || !dbp.is_finite() {
            return Err(DataError::NonFiniteSample { segment });
        }
        if sbp <= dbp {
            return Err(DataError::LabelOrder { segment, sbp, dbp });
        }
        if !(60.0..=250.0).contains(&sbp) || !(30.0..=150.0).contains(&dbp) {
            return Err(DataError::LabelRange { segment, sbp, dbp });
        }
        Ok(())
    }
}

/// Ordered collection of segments. Order is part of identity: splits and
/// training shuffles are defined over it.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentDataset {
    pub segments: Vec<SignalSegment>,
    pub source_tag: String,
}

impl SegmentDataset {
    pub fn new(segments: Vec<SignalSegment>, source_tag: impl Into<String>) -> Result<Self> {
        if segments.is_empty() {
            return Err(DataError::EmptyDataset);
        }
        Ok(Self {
            segments,
            source_tag: source_tag.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

/// Train/validation/test fractions plus the shuffle seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    /// The 80/10/10 split used throughout.
    pub fn new(seed: u64) -> Self {
        Self {
            train_fraction: 0.8,
            val_fraction: 0.1,
            test_fraction: 0.1,
            seed,
        }
    }
}

/// Seeded uniform shuffle followed by a contiguous partition. Sizes are
/// `floor(n*train)`, `floor(n*val)`, remainder to test, so the three parts
/// are disjoint and cover the input.
pub fn split(
    ds: &SegmentDataset,
    spec: &SplitSpec,
) -> Result<(SegmentDataset, SegmentDataset, SegmentDataset)> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    if ds.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let sum = spec.train_fraction + spec.val_fraction + spec.test_fraction;
    if (sum - 1.0).abs() > 1e-9
        || spec.train_fraction <= 0.0
        || spec.val_fraction <= 0.0
        || spec.test_fraction <= 0.0
    {
        return Err(DataError::BadFractions { sum });
    }

    let n = ds.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(spec.seed);
    order.shuffle(&mut rng);

    let n_train = (n as f64 * spec.train_fraction).floor() as usize;
    let n_val = (n as f64 * spec.val_fraction).floor() as usize;

    let pick = |idxs: &[usize]| SegmentDataset {
        segments: idxs.iter().map(|&i| ds.segments[i].clone()).collect(),
        source_tag: ds.source_tag.clone(),
    };
    Ok((
        pick(&order[..n_train]),
        pick(&order[n_train..n_train + n_val]),
        pick(&order[n_train + n_val..]),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_ds(n: usize) -> SegmentDataset {
        generate_synthetic(n, 99).unwrap()
    }

    #[test]
    fn split_sizes_80_10_10() {
        let ds = tiny_ds(100);
        let (tr, va, te) = split(&ds, &SplitSpec::new(7)).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (80, 10, 10));
    }

    #[test]
    fn split_sizes_floor_rule_n10() {
        let ds = tiny_ds(10);
        let (tr, va, te) = split(&ds, &SplitSpec::new(7)).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (8, 1, 1));
    }

    #[test]
    fn split_is_deterministic() {
        let ds = tiny_ds(30);
        let a = split(&ds, &SplitSpec::new(5)).unwrap();
        let b = split(&ds, &SplitSpec::new(5)).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let ds = tiny_ds(10);
        let spec = SplitSpec {
            train_fraction: 0.8,
            val_fraction: 0.1,
            test_fraction: 0.2,
            seed: 1,
        };
        assert!(matches!(
            split(&ds, &spec),
            Err(DataError::BadFractions { .. })
        ));
    }

    #[test]
    fn segment_rejects_label_order_violation() {
        let r = SignalSegment::new(vec![0.0; SEQ_LEN], vec![0.0; SEQ_LEN], 80.0, 90.0);
        assert!(matches!(r, Err(DataError::LabelOrder { .. })));
    }
}
