//! Activation dumps: per-layer activation matrices plus labels for one split.
//!
//! Binary layout (little-endian):
//!
//! ```text
//! "LATS"  u32 version=1  u32 n_layers  u32 n_examples  u32 n_classes
//! per layer: u32 layer_index  u32 feature_dim  u8 is_final_logits
//!            f32 data[n_examples * feature_dim]   (row-major)
//! u32 labels[n_examples]
//! u32 CRC32 of every preceding byte
//! ```

use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{invalid_arg, invariant};
use crate::numeric::seeded_rng;
use crate::{Error, FormatError, Matrix, Result};

pub const DUMP_MAGIC: [u8; 4] = *b"LATS";
pub const DUMP_VERSION: u32 = 1;

const FILE_HEADER_LEN: usize = 20;
const LAYER_HEADER_LEN: usize = 9;

/// Activations of one block (or the model's own logits) for every example.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerBlock {
    layer_index: u32,
    is_final_logits: bool,
    data: Matrix<f32>,
}

impl LayerBlock {
    pub fn new(layer_index: u32, data: Matrix<f32>) -> Self {
        Self {
            layer_index,
            is_final_logits: false,
            data,
        }
    }

    /// The block holding the classifier's logits.
    pub fn final_logits(layer_index: u32, logits: Matrix<f32>) -> Self {
        Self {
            layer_index,
            is_final_logits: true,
            data: logits,
        }
    }

    pub fn layer_index(&self) -> u32 {
        self.layer_index
    }

    pub fn feature_dim(&self) -> usize {
        self.data.cols()
    }

    pub fn n_examples(&self) -> usize {
        self.data.rows()
    }

    pub fn is_final_logits(&self) -> bool {
        self.is_final_logits
    }

    pub fn data(&self) -> &Matrix<f32> {
        &self.data
    }

    fn select(&self, indices: &[usize]) -> Self {
        Self {
            layer_index: self.layer_index,
            is_final_logits: self.is_final_logits,
            data: self.data.select_rows(indices),
        }
    }
}

/// Validated, immutable container of layer blocks and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationDump {
    n_classes: u32,
    layers: Vec<LayerBlock>,
    labels: Vec<u32>,
}

impl ActivationDump {
    pub fn new(n_classes: u32, layers: Vec<LayerBlock>, labels: Vec<u32>) -> Result<Self> {
        validate(n_classes, &layers, &labels)?;
        Ok(Self {
            n_classes,
            layers,
            labels,
        })
    }

    pub fn n_examples(&self) -> usize {
        self.labels.len()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes as usize
    }

    pub fn layers(&self) -> &[LayerBlock] {
        &self.layers
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn final_logits(&self) -> Option<&LayerBlock> {
        self.layers.last().filter(|l| l.is_final_logits)
    }

    /// Sub-dump over the given example indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.n_examples()) {
            return Err(invalid_arg!(
                "example index {bad} out of range for {} examples",
                self.n_examples()
            ));
        }
        Ok(Self {
            n_classes: self.n_classes,
            layers: self.layers.iter().map(|l| l.select(indices)).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    pub fn encoded_len(&self) -> usize {
        let n = self.n_examples();
        FILE_HEADER_LEN
            + self
                .layers
                .iter()
                .map(|l| LAYER_HEADER_LEN + 4 * n * l.feature_dim())
                .sum::<usize>()
            + 4 * n
            + 4
    }

    /// Serializes to the binary layout described in the module docs.
    ///
    /// Encoding is a pure function of the dump, so identical dumps give
    /// identical bytes.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&DUMP_MAGIC);
        put_u32(&mut out, DUMP_VERSION);
        put_u32(&mut out, self.layers.len() as u32);
        put_u32(&mut out, self.n_examples() as u32);
        put_u32(&mut out, self.n_classes);
        for layer in &self.layers {
            put_u32(&mut out, layer.layer_index);
            put_u32(&mut out, layer.feature_dim() as u32);
            out.push(layer.is_final_logits as u8);
            for v in layer.data.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for &y in &self.labels {
            put_u32(&mut out, y);
        }
        let crc = crc32fast::hash(&out);
        put_u32(&mut out, crc);
        out
    }

    pub fn decode(bytes: &[u8]) -> core::result::Result<Self, FormatError> {
        let mut r = Reader::new(bytes);
        r.expect_magic(DUMP_MAGIC)?;
        let version = r.u32()?;
        if version != DUMP_VERSION {
            return Err(FormatError::VersionMismatch {
                expected: DUMP_VERSION,
                found: version,
            });
        }
        let n_layers = r.u32()? as usize;
        let n = r.u32()? as usize;
        let n_classes = r.u32()?;
        let mut raw = Vec::with_capacity(n_layers.min(1024));
        for _ in 0..n_layers {
            let layer_index = r.u32()?;
            let dim = r.u32()? as usize;
            let flag = r.u8()?;
            let data = r.f32_vec(n.saturating_mul(dim))?;
            raw.push((layer_index, dim, flag, data));
        }
        let labels = r.u32_vec(n)?;
        r.finish_with_crc()?;
        let mut layers = Vec::with_capacity(raw.len());
        for (layer_index, dim, flag, data) in raw {
            let is_final_logits = match flag {
                0 => false,
                1 => true,
                other => return Err(invariant!("is_final_logits flag must be 0 or 1, found {other}").into()),
            };
            layers.push(LayerBlock {
                layer_index,
                is_final_logits,
                data: Matrix::from_vec(n, dim, data)?,
            });
        }
        Ok(Self::new(n_classes, layers, labels)?)
    }
}

fn validate(n_classes: u32, layers: &[LayerBlock], labels: &[u32]) -> Result<()> {
    if n_classes == 0 {
        return Err(invariant!("n_classes must be at least 1"));
    }
    let n = labels.len();
    if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= n_classes) {
        return Err(invariant!("label {y} at example {i} is outside [0, {n_classes})"));
    }
    let mut prev_index = 0u32;
    for (pos, layer) in layers.iter().enumerate() {
        if layer.n_examples() != n {
            return Err(invariant!(
                "layer {} has {} rows, expected {n}",
                layer.layer_index,
                layer.n_examples()
            ));
        }
        if layer.layer_index == 0 || layer.layer_index <= prev_index {
            return Err(invariant!(
                "layer indices must be 1-based and strictly increasing (found {} after {prev_index})",
                layer.layer_index
            ));
        }
        prev_index = layer.layer_index;
        if layer.is_final_logits {
            if pos + 1 != layers.len() {
                return Err(invariant!("the final-logits block must be the last layer"));
            }
            if layer.feature_dim() != n_classes as usize {
                return Err(invariant!(
                    "final-logits block has {} features, expected {n_classes}",
                    layer.feature_dim()
                ));
            }
        }
        if let Some(pos) = layer.data.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(invariant!(
                "non-finite value in layer {} at row {}, column {}",
                layer.layer_index,
                pos / layer.feature_dim().max(1),
                pos % layer.feature_dim().max(1)
            ));
        }
    }
    Ok(())
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Bounds-checked little-endian reader over a checksummed buffer.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, len: usize) -> core::result::Result<&'a [u8], FormatError> {
        let available = self.bytes.len() - self.pos;
        if len > available {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: len,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    pub(crate) fn expect_magic(&mut self, magic: [u8; 4]) -> core::result::Result<(), FormatError> {
        let mut found = [0u8; 4];
        let head = &self.bytes[..self.bytes.len().min(4)];
        found[..head.len()].copy_from_slice(head);
        if head.len() < 4 || found != magic {
            return Err(FormatError::BadMagic {
                expected: magic,
                found,
            });
        }
        self.pos = 4;
        Ok(())
    }

    pub(crate) fn u8(&mut self) -> core::result::Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> core::result::Result<u32, FormatError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn u32_vec(&mut self, count: usize) -> core::result::Result<Vec<u32>, FormatError> {
        let len = count.saturating_mul(4);
        let b = self.take(len)?;
        Ok(b.chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub(crate) fn f32_vec(&mut self, count: usize) -> core::result::Result<Vec<f32>, FormatError> {
        let len = count.saturating_mul(4);
        let b = self.take(len)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    /// Reads the CRC32 footer and checks it covers exactly the bytes read so far.
    pub(crate) fn finish_with_crc(&mut self) -> core::result::Result<(), FormatError> {
        let body_end = self.pos;
        let stored = self.u32()?;
        let computed = crc32fast::hash(&self.bytes[..body_end]);
        if stored != computed {
            return Err(FormatError::ChecksumMismatch { stored, computed });
        }
        let rest = self.bytes.len() - self.pos;
        if rest != 0 {
            return Err(FormatError::TrailingBytes(rest));
        }
        Ok(())
    }
}

/// How to carve a dump into a probe/model training part and a calibration
/// holdout part.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub holdout_fraction: f64,
    pub seed: u64,
    /// Split each class separately so both parts keep the label proportions.
    pub stratify: bool,
}

impl SplitSpec {
    /// Holdout is the given fraction; the rest is training data.
    pub fn holdout(holdout_fraction: f64, seed: u64) -> Self {
        Self {
            train_fraction: 1.0 - holdout_fraction,
            holdout_fraction,
            seed,
            stratify: false,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok_train = self.train_fraction > 0.0 && self.train_fraction <= 1.0;
        let ok_hold = (0.0..=1.0).contains(&self.holdout_fraction);
        if !ok_train || !ok_hold || self.train_fraction + self.holdout_fraction > 1.0 + 1e-12 {
            return Err(invalid_arg!(
                "split fractions must satisfy 0 < train <= 1, holdout >= 0, train + holdout <= 1 (got {} and {})",
                self.train_fraction,
                self.holdout_fraction
            ));
        }
        Ok(())
    }
}

/// Index partition produced by [`split_indices`]; each part is sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub holdout: Vec<usize>,
    /// Examples assigned to neither part when the fractions sum below one.
    pub rest: Vec<usize>,
}

fn part_sizes(n: usize, spec: &SplitSpec) -> (usize, usize) {
    let n_train = (libm::round(spec.train_fraction * n as f64) as usize).min(n);
    let n_hold = (libm::round(spec.holdout_fraction * n as f64) as usize).min(n - n_train);
    (n_train, n_hold)
}

/// Seeded shuffle of `0..labels.len()` cut into train/holdout/rest.
///
/// Part sizes are `round(fraction * n)` (holdout capped so the parts never
/// overlap). With `stratify` the same rounding is applied per class.
pub fn split_indices(labels: &[u32], spec: &SplitSpec) -> Result<SplitIndices> {
    spec.validate()?;
    let n = labels.len();
    let mut rng = seeded_rng(spec.seed);
    let mut out = SplitIndices {
        train: Vec::new(),
        holdout: Vec::new(),
        rest: Vec::new(),
    };
    let mut assign = |idx: &mut Vec<usize>, rng: &mut crate::numeric::Rng| {
        idx.shuffle(rng);
        let (n_train, n_hold) = part_sizes(idx.len(), spec);
        out.train.extend_from_slice(&idx[..n_train]);
        out.holdout.extend_from_slice(&idx[n_train..n_train + n_hold]);
        out.rest.extend_from_slice(&idx[n_train + n_hold..]);
    };
    if spec.stratify {
        let n_classes = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
        for class in 0..n_classes {
            let mut idx: Vec<usize> = (0..n).filter(|&i| labels[i] as usize == class).collect();
            assign(&mut idx, &mut rng);
        }
    } else {
        let mut idx: Vec<usize> = (0..n).collect();
        assign(&mut idx, &mut rng);
    }
    if out.train.is_empty() {
        return Err(Error::EmptySplit(alloc::format!(
            "train fraction {} of {n} examples selects nothing",
            spec.train_fraction
        )));
    }
    if out.holdout.is_empty() {
        return Err(Error::EmptySplit(alloc::format!(
            "holdout fraction {} of {n} examples selects nothing",
            spec.holdout_fraction
        )));
    }
    out.train.sort_unstable();
    out.holdout.sort_unstable();
    out.rest.sort_unstable();
    Ok(out)
}

/// Splits a dump into (train, holdout) parts per [`split_indices`].
pub fn split_holdout(dump: &ActivationDump, spec: &SplitSpec) -> Result<(ActivationDump, ActivationDump)> {
    let parts = split_indices(dump.labels(), spec)?;
    Ok((dump.select(&parts.train)?, dump.select(&parts.holdout)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn tiny_dump() -> ActivationDump {
        let layer = LayerBlock::new(1, Matrix::from_rows(&[[1.0f32, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap());
        ActivationDump::new(2, vec![layer], vec![0, 1]).unwrap()
    }

    fn labelled(n: usize, k: u32) -> ActivationDump {
        let data: Vec<f32> = (0..n).map(|i| i as f32).collect();
        let layer = LayerBlock::new(1, Matrix::from_vec(n, 1, data).unwrap());
        let labels = (0..n).map(|i| i as u32 % k).collect();
        ActivationDump::new(k, vec![layer], labels).unwrap()
    }

    #[test]
    fn encoded_size_matches_format_arithmetic() {
        let bytes = tiny_dump().encode();
        assert_eq!(bytes.len(), 4 + 4 + 4 + 4 + 4 + 9 + 2 * 3 * 4 + 2 * 4 + 4);
        assert_eq!(&bytes[..4], &[0x4C, 0x41, 0x54, 0x53]);
    }

    #[test]
    fn round_trip_is_identity() {
        let dump = tiny_dump();
        assert_eq!(ActivationDump::decode(&dump.encode()).unwrap(), dump);
    }

    #[test]
    fn nan_is_rejected_at_construction() {
        let layer = LayerBlock::new(1, Matrix::from_rows(&[[f32::NAN]]).unwrap());
        let err = ActivationDump::new(2, vec![layer], vec![0]).unwrap_err();
        assert!(matches!(err, Error::Invariant(_)));
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let layer = LayerBlock::new(1, Matrix::from_rows(&[[0.0f32]]).unwrap());
        assert!(ActivationDump::new(2, vec![layer], vec![2]).is_err());
    }

    #[test]
    fn final_logits_must_be_last_and_k_wide() {
        let a = LayerBlock::final_logits(1, Matrix::from_rows(&[[0.0f32, 1.0]]).unwrap());
        let b = LayerBlock::new(2, Matrix::from_rows(&[[0.0f32]]).unwrap());
        assert!(ActivationDump::new(2, vec![a.clone(), b], vec![0]).is_err());
        let narrow = LayerBlock::final_logits(1, Matrix::from_rows(&[[0.0f32]]).unwrap());
        assert!(ActivationDump::new(2, vec![narrow], vec![0]).is_err());
        assert!(ActivationDump::new(2, vec![a], vec![0]).is_ok());
    }

    #[test]
    fn corrupted_trailing_byte_is_a_checksum_error() {
        let mut bytes = tiny_dump().encode();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xFF;
        assert!(matches!(
            ActivationDump::decode(&bytes),
            Err(FormatError::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn version_99_is_rejected() {
        let mut bytes = tiny_dump().encode();
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        assert_eq!(
            ActivationDump::decode(&bytes),
            Err(FormatError::VersionMismatch {
                expected: 1,
                found: 99
            })
        );
    }

    #[test]
    fn bad_magic_and_truncation_are_distinct() {
        let bytes = tiny_dump().encode();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ActivationDump::decode(&bad), Err(FormatError::BadMagic { .. })));
        assert!(matches!(
            ActivationDump::decode(&bytes[..bytes.len() - 6]),
            Err(FormatError::Truncated { .. })
        ));
        assert!(matches!(ActivationDump::decode(&bytes[..2]), Err(FormatError::BadMagic { .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert_eq!(ActivationDump::decode(&long), Err(FormatError::TrailingBytes(1)));
    }

    #[test]
    fn holdout_ten_percent_of_hundred() {
        let dump = labelled(100, 3);
        let (train, hold) = split_holdout(&dump, &SplitSpec::holdout(0.1, 5)).unwrap();
        assert_eq!((train.n_examples(), hold.n_examples()), (90, 10));
        assert_eq!(train.layers().len(), 1);
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let dump = labelled(10, 3);
        let spec = SplitSpec::holdout(0.3, 11);
        let a = split_indices(dump.labels(), &spec).unwrap();
        let b = split_indices(dump.labels(), &spec).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<usize> = a.train.iter().chain(&a.holdout).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(a.rest.is_empty());
    }

    #[test]
    fn stratified_split_keeps_class_proportions() {
        let labels: Vec<u32> = (0..100).map(|i| if i < 80 { 0 } else { 1 }).collect();
        let spec = SplitSpec {
            stratify: true,
            ..SplitSpec::holdout(0.1, 3)
        };
        let s = split_indices(&labels, &spec).unwrap();
        let minority = s.holdout.iter().filter(|&&i| labels[i] == 1).count();
        assert_eq!(s.holdout.len(), 10);
        assert_eq!(minority, 2);
    }

    #[test]
    fn empty_split_is_an_error() {
        let dump = labelled(5, 2);
        let spec = SplitSpec::holdout(0.01, 0);
        assert!(matches!(split_holdout(&dump, &spec), Err(Error::EmptySplit(_))));
        let bad = SplitSpec {
            train_fraction: 0.8,
            holdout_fraction: 0.5,
            seed: 0,
            stratify: false,
        };
        assert!(matches!(split_indices(dump.labels(), &bad), Err(Error::InvalidArgument(_))));
    }
}
