//! Toy spectrogram corpus with one temporally local and up to two global
//! factors.
//!
//! Each frame holds a Gaussian bump at the fundamental bin
//! `base_bin + octave·octave_offset + melody[note]` and a second bump
//! `overtone_offset` bins higher whose height depends only on the
//! instrument. The melody therefore changes frame to frame while the
//! instrument and octave are constant over a sequence.
//!
//! # File format
//!
//! Little-endian binary: magic `DSEQ1\0`, `u32` version, `u32` N, T, D and
//! factor count, then per record `T·D` `f32` values (frames consecutive, the
//! `D` bins of a frame contiguous) followed by one `u8` label per factor
//! (instrument, then octave), and finally a `u32` CRC32 of every preceding
//! byte.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

pub const MAGIC: &[u8; 6] = b"DSEQ1\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FactorSpec {
    pub n_instruments: usize,
    /// 1 keeps every sequence in one octave; 2 adds octave as a global factor.
    pub octaves: usize,
    pub n_notes: usize,
    /// Frames per note.
    pub note_len: usize,
    pub d_bins: usize,
    /// Distinct pitches per octave.
    pub pitch_range: usize,
    pub base_bin: usize,
    pub octave_offset: usize,
    pub overtone_offset: usize,
    /// Standard deviation of each spectral bump, in bins.
    pub bump_width: f64,
    pub noise_std: f64,
    /// Overall scale applied to every rendered value.
    pub amplitude: f64,
}

impl Default for FactorSpec {
    fn default() -> Self {
        FactorSpec {
            n_instruments: 2,
            octaves: 1,
            n_notes: 8,
            note_len: 3,
            d_bins: 32,
            pitch_range: 8,
            base_bin: 4,
            octave_offset: 8,
            overtone_offset: 8,
            bump_width: 0.8,
            noise_std: 0.01,
            amplitude: 10.0,
        }
    }
}

impl FactorSpec {
    pub fn seq_len(&self) -> usize {
        self.n_notes * self.note_len
    }

    pub fn n_factors(&self) -> usize {
        if self.octaves > 1 {
            2
        } else {
            1
        }
    }

    /// Relative overtone height of `instrument`, spread evenly over [0.2, 0.8].
    pub fn overtone_gain(&self, instrument: usize) -> f64 {
        if self.n_instruments <= 1 {
            0.2
        } else {
            0.2 + 0.6 * instrument as f64 / (self.n_instruments - 1) as f64
        }
    }

    pub fn fundamental_bin(&self, melody_note: usize, octave: usize) -> usize {
        self.base_bin + octave * self.octave_offset + melody_note
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_instruments", self.n_instruments),
            ("octaves", self.octaves),
            ("n_notes", self.n_notes),
            ("note_len", self.note_len),
            ("d_bins", self.d_bins),
            ("pitch_range", self.pitch_range),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.n_instruments > 255 || self.octaves > 255 || self.pitch_range > 255 {
            return Err(Error::config("n_instruments", "labels must fit in one byte"));
        }
        let top = self.base_bin
            + (self.octaves - 1) * self.octave_offset
            + self.pitch_range
            + self.overtone_offset;
        if top > self.d_bins {
            return Err(Error::config(
                "d_bins",
                format!("highest overtone bin {} does not fit in {} bins", top - 1, self.d_bins),
            ));
        }
        if !(self.bump_width > 0.0) {
            return Err(Error::config("bump_width", "must be positive"));
        }
        if !(self.noise_std >= 0.0) || !(self.amplitude > 0.0) {
            return Err(Error::config("amplitude", "amplitude > 0 and noise_std >= 0 required"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceRecord {
    /// [T, D]: one row per frame.
    pub x: Tensor,
    pub instrument: u8,
    pub octave: u8,
    /// Pitch index per note; unknown for records read from disk.
    pub melody: Option<Vec<u8>>,
}

impl SequenceRecord {
    pub fn labels(&self, n_factors: usize) -> Vec<u8> {
        [self.instrument, self.octave][..n_factors].to_vec()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub records: Vec<SequenceRecord>,
    /// 1 (instrument) or 2 (instrument, octave).
    pub n_factors: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn frames(&self) -> usize {
        self.records.first().map_or(0, |r| r.x.shape()[0])
    }

    pub fn bins(&self) -> usize {
        self.records.first().map_or(0, |r| r.x.shape()[1])
    }

    pub fn labels(&self, factor: usize) -> Vec<u8> {
        self.records
            .iter()
            .map(|r| if factor == 0 { r.instrument } else { r.octave })
            .collect()
    }

    pub fn batch(&self, indices: &[usize]) -> SequenceBatch {
        SequenceBatch::from_records(indices.iter().map(|&i| &self.records[i]), self.n_factors)
    }
}

/// Time-major batch ready for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    /// [T, B, D]
    pub x: Tensor,
    /// `labels[f][b]` is factor `f` of sequence `b`; used only by evaluation.
    pub labels: Vec<Vec<u8>>,
}

impl SequenceBatch {
    pub fn from_records<'a>(
        records: impl IntoIterator<Item = &'a SequenceRecord>,
        n_factors: usize,
    ) -> Self {
        let records: Vec<&SequenceRecord> = records.into_iter().collect();
        assert!(!records.is_empty(), "empty batch");
        let (t, d) = (records[0].x.shape()[0], records[0].x.shape()[1]);
        let b = records.len();
        let mut data = vec![0.0; t * b * d];
        for (bi, r) in records.iter().enumerate() {
            for ti in 0..t {
                data[(ti * b + bi) * d..(ti * b + bi + 1) * d]
                    .copy_from_slice(&r.x.data()[ti * d..(ti + 1) * d]);
            }
        }
        let labels = (0..n_factors)
            .map(|f| records.iter().map(|r| r.labels(2)[f]).collect())
            .collect();
        SequenceBatch {
            x: Tensor::new(&[t, b, d], data).expect("consistent record shapes"),
            labels,
        }
    }

    pub fn size(&self) -> usize {
        self.x.shape()[1]
    }

    /// Sequence `b` as a [T, D] matrix.
    pub fn sequence(&self, b: usize) -> Tensor {
        time_major_sequence(&self.x, b)
    }
}

/// Extracts sequence `b` from a time-major [T, B, D] tensor as [T, D].
pub fn time_major_sequence(x: &Tensor, b: usize) -> Tensor {
    let (t, nb, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Vec::with_capacity(t * d);
    for ti in 0..t {
        out.extend_from_slice(&x.data()[(ti * nb + b) * d..(ti * nb + b + 1) * d]);
    }
    Tensor::new(&[t, d], out).expect("shape")
}

/// Independent uniform pitch indices, one per note.
pub fn sample_melody(rng: &mut Rng, spec: &FactorSpec) -> Vec<u8> {
    (0..spec.n_notes)
        .map(|_| rng.below(spec.pitch_range) as u8)
        .collect()
}

/// Renders one sequence as [T, D]. Pass `None` for a noise-free rendering.
pub fn render_sequence(
    melody: &[u8],
    instrument: usize,
    octave: usize,
    spec: &FactorSpec,
    mut rng: Option<&mut Rng>,
) -> Result<Tensor> {
    if instrument >= spec.n_instruments {
        return Err(Error::contract(format!(
            "instrument {instrument} outside 0..{}",
            spec.n_instruments
        )));
    }
    if octave >= spec.octaves {
        return Err(Error::contract(format!("octave {octave} outside 0..{}", spec.octaves)));
    }
    if melody.len() != spec.n_notes || melody.iter().any(|&m| m as usize >= spec.pitch_range) {
        return Err(Error::contract(format!(
            "melody {melody:?} needs {} notes below {}",
            spec.n_notes, spec.pitch_range
        )));
    }
    let t_len = spec.seq_len();
    let d = spec.d_bins;
    let gain = spec.overtone_gain(instrument);
    let two_w2 = 2.0 * spec.bump_width * spec.bump_width;
    let bump = |bin: usize, centre: usize| {
        let delta = bin as f64 - centre as f64;
        (-delta * delta / two_w2).exp()
    };
    let mut data = Vec::with_capacity(t_len * d);
    for t in 0..t_len {
        let p = spec.fundamental_bin(melody[t / spec.note_len] as usize, octave);
        let overtone = p + spec.overtone_offset;
        for bin in 0..d {
            let mut v = bump(bin, p) + gain * bump(bin, overtone);
            if let Some(r) = rng.as_deref_mut() {
                if spec.noise_std > 0.0 {
                    v += spec.noise_std * r.normal();
                }
            }
            // Stored as f32 on disk; round here so files round-trip exactly.
            data.push((spec.amplitude * v.max(0.0)) as f32 as f64);
        }
    }
    Tensor::new(&[t_len, d], data)
}

/// Both splits of a generated corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedData {
    pub spec: FactorSpec,
    pub seed: u64,
    pub train: Dataset,
    pub val: Dataset,
    /// Repeated (melody, instrument, octave) triples; allowed, but reported.
    pub duplicates: usize,
}

/// Balanced labels, random melodies, shuffled 80/20 split.
pub fn generate_dataset(spec: &FactorSpec, n_sequences: usize, seed: u64) -> Result<GeneratedData> {
    spec.validate()?;
    if n_sequences < 10 {
        return Err(Error::config("n_sequences", "at least 10 sequences are needed"));
    }
    let mut rng = Rng::seed_from_u64(seed);
    let combos = spec.n_instruments * spec.octaves;
    let mut records = Vec::with_capacity(n_sequences);
    for k in 0..n_sequences {
        let combo = k % combos;
        let (instrument, octave) = (combo % spec.n_instruments, combo / spec.n_instruments);
        let melody = sample_melody(&mut rng, spec);
        let x = render_sequence(&melody, instrument, octave, spec, Some(&mut rng))?;
        records.push(SequenceRecord {
            x,
            instrument: instrument as u8,
            octave: octave as u8,
            melody: Some(melody),
        });
    }
    let mut seen = std::collections::HashSet::new();
    let duplicates = records
        .iter()
        .filter(|r| !seen.insert((r.melody.clone(), r.instrument, r.octave)))
        .count();

    rng.shuffle(&mut records);
    let n_train = (n_sequences * 4).div_ceil(5);
    let val_records = records.split_off(n_train);
    let n_factors = spec.n_factors();
    Ok(GeneratedData {
        spec: spec.clone(),
        seed,
        train: Dataset {
            records,
            n_factors,
        },
        val: Dataset {
            records: val_records,
            n_factors,
        },
        duplicates,
    })
}

pub fn encode_dataset(dataset: &Dataset) -> Result<Vec<u8>> {
    let (t, d) = (dataset.frames(), dataset.bins());
    if !(1..=2).contains(&dataset.n_factors) {
        return Err(Error::contract("datasets carry one or two label factors"));
    }
    let mut out = Vec::with_capacity(26 + dataset.len() * (t * d * 4 + dataset.n_factors) + 4);
    out.extend_from_slice(MAGIC);
    for v in [FORMAT_VERSION, dataset.len() as u32, t as u32, d as u32, dataset.n_factors as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (i, r) in dataset.records.iter().enumerate() {
        if r.x.shape() != [t, d] {
            return Err(Error::contract(format!(
                "record {i} has shape {:?}, expected [{t}, {d}]",
                r.x.shape()
            )));
        }
        for &v in r.x.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.extend_from_slice(&r.labels(dataset.n_factors));
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let at = |offset: usize, what: &str| Error::parse(format!("byte {offset}"), what.to_string());
    if bytes.len() < 6 || &bytes[..6] != MAGIC {
        return Err(at(0, "bad magic, expected DSEQ1\\0"));
    }
    let read_u32 = |offset: usize| -> Result<u32> {
        bytes
            .get(offset..offset + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| at(offset, "truncated header"))
    };
    let version = read_u32(6)?;
    if version != FORMAT_VERSION {
        return Err(at(6, &format!("unsupported version {version}")));
    }
    let (n, t, d, nf) = (
        read_u32(10)? as usize,
        read_u32(14)? as usize,
        read_u32(18)? as usize,
        read_u32(22)? as usize,
    );
    if t == 0 || d == 0 || !(1..=2).contains(&nf) {
        return Err(at(14, &format!("invalid extents T={t}, D={d}, factors={nf}")));
    }
    let record_len = t * d * 4 + nf;
    let body_end = 26 + n * record_len;
    if bytes.len() != body_end + 4 {
        return Err(at(
            bytes.len().min(body_end),
            &format!("expected {} bytes, found {}", body_end + 4, bytes.len()),
        ));
    }
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
    let actual = crc32fast::hash(&bytes[..body_end]);
    if stored != actual {
        return Err(at(
            body_end,
            &format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}"),
        ));
    }
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let base = 26 + i * record_len;
        let values = bytes[base..base + t * d * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let labels = &bytes[base + t * d * 4..base + record_len];
        records.push(SequenceRecord {
            x: Tensor::new(&[t, d], values)?,
            instrument: labels[0],
            octave: if nf > 1 { labels[1] } else { 0 },
            melody: None,
        });
    }
    Ok(Dataset {
        records,
        n_factors: nf,
    })
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let bytes = encode_dataset(dataset)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clean(melody: &[u8], instrument: usize, octave: usize, spec: &FactorSpec) -> Tensor {
        render_sequence(melody, instrument, octave, spec, None).unwrap()
    }

    #[test]
    fn degenerate_pitch_range() {
        let spec = FactorSpec {
            pitch_range: 1,
            ..FactorSpec::default()
        };
        let m = sample_melody(&mut Rng::seed_from_u64(1), &spec);
        assert_eq!(m, vec![0; 8]);
    }

    #[test]
    fn melody_determinism() {
        let spec = FactorSpec::default();
        assert_eq!(
            sample_melody(&mut Rng::seed_from_u64(4), &spec),
            sample_melody(&mut Rng::seed_from_u64(4), &spec)
        );
    }

    #[test]
    fn melody_uniformity_chi_square() {
        let spec = FactorSpec {
            n_notes: 1,
            ..FactorSpec::default()
        };
        let mut rng = Rng::seed_from_u64(99);
        let n = 100_000;
        let mut counts = [0usize; 8];
        for _ in 0..n {
            counts[sample_melody(&mut rng, &spec)[0] as usize] += 1;
        }
        let expected = n as f64 / 8.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 99th percentile of χ² with 7 degrees of freedom.
        assert!(chi2 < 18.475, "chi2 = {chi2}");
    }

    #[test]
    fn clean_render_peaks_at_fundamental() {
        let spec = FactorSpec::default();
        let melody = [0, 1, 2, 3, 4, 5, 6, 7];
        let x = clean(&melody, 0, 0, &spec);
        for t in 0..spec.seq_len() {
            let p = spec.fundamental_bin(melody[t / 3] as usize, 0);
            let col = &x.data()[t * 32..(t + 1) * 32];
            let (arg, max) = col
                .iter()
                .enumerate()
                .fold((0, f64::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            assert_eq!(arg, p);
            assert!((max - spec.amplitude).abs() < 1e-5, "{max}");
        }
    }

    #[test]
    fn instruments_differ_only_near_overtone() {
        let spec = FactorSpec::default();
        let melody = [3; 8];
        let a = clean(&melody, 0, 0, &spec);
        let b = clean(&melody, 1, 0, &spec);
        let p = spec.fundamental_bin(3, 0) + spec.overtone_offset;
        for t in 0..spec.seq_len() {
            for d in 0..32 {
                let diff = (a.data()[t * 32 + d] - b.data()[t * 32 + d]).abs();
                if d.abs_diff(p) > 3 {
                    assert!(diff < 1e-3 * spec.amplitude, "bin {d} differs by {diff}");
                }
            }
            assert!((b.data()[t * 32 + p] - a.data()[t * 32 + p] - 0.6 * spec.amplitude).abs() < 1e-5);
        }
    }

    #[test]
    fn render_rejects_bad_labels() {
        let spec = FactorSpec::default();
        assert!(render_sequence(&[0; 8], 2, 0, &spec, None).is_err());
        assert!(render_sequence(&[0; 8], 0, 1, &spec, None).is_err());
        assert!(render_sequence(&[8; 8], 0, 0, &spec, None).is_err());
        assert!(render_sequence(&[0; 7], 0, 0, &spec, None).is_err());
    }

    #[test]
    fn values_stay_in_range() {
        let spec = FactorSpec::default();
        let data = generate_dataset(&spec, 50, 3).unwrap();
        for r in data.train.records.iter().chain(&data.val.records) {
            assert!(r.x.data().iter().all(|&v| (0.0..=1.2 * spec.amplitude).contains(&v)));
        }
    }

    #[test]
    fn balance_and_split() {
        let spec = FactorSpec {
            octaves: 2,
            ..FactorSpec::default()
        };
        let data = generate_dataset(&spec, 640, 11).unwrap();
        assert_eq!(data.train.len(), 512);
        assert_eq!(data.val.len(), 128);
        let all: Vec<&SequenceRecord> = data.train.records.iter().chain(&data.val.records).collect();
        for inst in 0..2u8 {
            assert_eq!(all.iter().filter(|r| r.instrument == inst).count(), 320);
        }
        for oct in 0..2u8 {
            assert_eq!(all.iter().filter(|r| r.octave == oct).count(), 320);
        }
        assert_eq!(data.train.n_factors, 2);
        assert!(generate_dataset(&spec, 9, 0).is_err());
    }

    #[test]
    fn octave_grid_fits_default_bins() {
        let spec = FactorSpec {
            octaves: 2,
            ..FactorSpec::default()
        };
        spec.validate().unwrap();
        let spec3 = FactorSpec {
            octaves: 3,
            ..FactorSpec::default()
        };
        assert!(spec3.validate().is_err());
    }

    #[test]
    fn corrupted_magic_is_reported() {
        let data = generate_dataset(&FactorSpec::default(), 10, 0).unwrap();
        let mut bytes = encode_dataset(&data.train).unwrap();
        bytes[1] = b'X';
        let err = decode_dataset(&bytes).unwrap_err().to_string();
        assert!(err.contains("byte 0"), "{err}");
    }

    #[test]
    fn checksum_and_truncation_detected() {
        let data = generate_dataset(&FactorSpec::default(), 10, 0).unwrap();
        let bytes = encode_dataset(&data.train).unwrap();
        let mut flipped = bytes.clone();
        flipped[40] ^= 0x10;
        assert!(decode_dataset(&flipped).unwrap_err().to_string().contains("checksum"));
        assert!(decode_dataset(&bytes[..bytes.len() - 7]).is_err());
    }

    #[test]
    fn batch_is_time_major() {
        let data = generate_dataset(&FactorSpec::default(), 10, 0).unwrap();
        let batch = data.train.batch(&[2, 0]);
        assert_eq!(batch.x.shape(), &[24, 2, 32]);
        assert_eq!(batch.sequence(0), data.train.records[2].x);
        assert_eq!(batch.sequence(1), data.train.records[0].x);
        assert_eq!(batch.labels.len(), 1);
    }
}
