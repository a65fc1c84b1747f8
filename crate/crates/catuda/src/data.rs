//! Synthetic domain-shift signal benchmark, FFT preprocessing, splitting,
//! normalization, and dataset file I/O.
//!
//! The synthetic generator produces per-class harmonic signatures whose
//! frequency content and amplitude shift with a domain "speed" factor, so a
//! classifier fit on one domain degrades on another in a controlled way.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{CatError, Result};
use crate::tensor::Tensor;

/// Default signal length.
pub const DEFAULT_LENGTH: usize = 1024;

const DATASET_MAGIC: &[u8; 8] = b"SIGDSET\0";
const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Representation {
    Time,
    Frequency,
}

impl Representation {
    fn to_byte(self) -> u8 {
        match self {
            Representation::Time => 0,
            Representation::Frequency => 1,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Representation::Time),
            1 => Ok(Representation::Frequency),
            other => Err(CatError::Data(format!(
                "unknown representation tag {}",
                other
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Representation::Time => "time",
            Representation::Frequency => "frequency",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "time" => Ok(Representation::Time),
            "frequency" => Ok(Representation::Frequency),
            other => Err(CatError::Config(format!(
                "unknown representation `{}`",
                other
            ))),
        }
    }
}

/// A set of equal-length 1-D signals with optional class labels.
#[derive(Debug, Clone)]
pub struct SignalDataset {
    /// (N, L) sample matrix.
    pub samples: Tensor,
    pub labels: Option<Vec<usize>>,
    pub classes: usize,
    pub domain_id: u32,
    pub representation: Representation,
    pub seed: u64,
}

impl SignalDataset {
    pub fn len(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_length(&self) -> usize {
        self.samples.shape()[1]
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let l = self.sample_length();
        &self.samples.data()[i * l..(i + 1) * l]
    }

    /// Rows of this dataset at the given indices as a (B, 1, L) batch tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let l = self.sample_length();
        let mut data = Vec::with_capacity(indices.len() * l);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Tensor::new(vec![indices.len(), 1, l], data).expect("shape consistent by construction")
    }

    pub fn labels_at(&self, indices: &[usize]) -> Result<Vec<usize>> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| CatError::Data("dataset carries no labels".into()))?;
        Ok(indices.iter().map(|&i| labels[i]).collect())
    }

    /// Remove the labels, returning them separately. Used for the target
    /// training split: the returned labels go to evaluation only.
    pub fn strip_labels(mut self) -> (SignalDataset, Option<Vec<usize>>) {
        let labels = self.labels.take();
        (self, labels)
    }
}

/// Parameters of one synthetic domain.
#[derive(Debug, Clone)]
pub struct SynthDomainSpec {
    /// Multiplies every class frequency; the domain-shift knob.
    pub speed_factor: f64,
    /// Multiplies every signal amplitude.
    pub amplitude_factor: f64,
    /// Standard deviation of the additive Gaussian noise.
    pub noise_sigma: f64,
    /// Per-class fundamental frequencies, in cycles per signal.
    pub fundamentals: Vec<f64>,
    /// Harmonic weights shared by all classes; harmonic h has frequency
    /// (h+1) times the fundamental.
    pub harmonic_weights: Vec<f64>,
    pub sample_length: usize,
}

impl SynthDomainSpec {
    /// Benchmark spec with K well-separated classes.
    pub fn standard(classes: usize, speed_factor: f64, noise_sigma: f64) -> Self {
        SynthDomainSpec {
            speed_factor,
            amplitude_factor: 1.0,
            noise_sigma,
            fundamentals: (0..classes).map(|k| 8.0 + 7.0 * k as f64).collect(),
            harmonic_weights: vec![1.0, 0.5, 0.25],
            sample_length: DEFAULT_LENGTH,
        }
    }

    pub fn classes(&self) -> usize {
        self.fundamentals.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.speed_factor <= 0.0 || self.amplitude_factor <= 0.0 || self.noise_sigma < 0.0 {
            return Err(CatError::Param(
                "speed and amplitude factors must be positive, noise non-negative".into(),
            ));
        }
        if self.fundamentals.is_empty() || self.harmonic_weights.is_empty() {
            return Err(CatError::Param(
                "need at least one class and one harmonic".into(),
            ));
        }
        for (i, &fi) in self.fundamentals.iter().enumerate() {
            if fi <= 0.0 {
                return Err(CatError::Param(format!(
                    "fundamental frequency of class {} must be positive",
                    i
                )));
            }
            for &fj in &self.fundamentals[i + 1..] {
                if (fi - fj).abs() < 1e-9 {
                    return Err(CatError::Param(
                        "class fundamentals must be pairwise distinct".into(),
                    ));
                }
            }
        }
        let nyquist = self.sample_length as f64 / 2.0;
        for (class, &f) in self.fundamentals.iter().enumerate() {
            let top = f * self.harmonic_weights.len() as f64 * self.speed_factor;
            if top >= nyquist {
                return Err(CatError::Param(format!(
                    "class {}: highest harmonic at {:.1} cycles exceeds the Nyquist limit {:.1}",
                    class, top, nyquist
                )));
            }
        }
        Ok(())
    }
}

/// Labeled dataset with `n_per_class` samples per class, fully determined by
/// `(spec, seed)`. Each sample is a weighted harmonic stack with a uniform
/// random phase plus white Gaussian noise.
pub fn generate_synth(
    spec: &SynthDomainSpec,
    n_per_class: usize,
    domain_id: u32,
    seed: u64,
) -> Result<SignalDataset> {
    spec.validate()?;
    if n_per_class == 0 {
        return Err(CatError::Param("need at least one sample per class".into()));
    }
    let k = spec.classes();
    let l = spec.sample_length;
    let n = k * n_per_class;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(domain_id as u64);
    let noise = if spec.noise_sigma > 0.0 {
        Some(Normal::new(0.0, spec.noise_sigma).map_err(|e| CatError::Param(e.to_string()))?)
    } else {
        None
    };

    let mut data = Vec::with_capacity(n * l);
    let mut labels = Vec::with_capacity(n);
    for class in 0..k {
        let base_f = spec.fundamentals[class] * spec.speed_factor;
        for _ in 0..n_per_class {
            let phase: f64 = rng.gen_range(0.0..2.0 * PI);
            for i in 0..l {
                let t = i as f64 / l as f64;
                let mut v = 0.0;
                for (h, &w) in spec.harmonic_weights.iter().enumerate() {
                    v += w * (2.0 * PI * (h + 1) as f64 * base_f * t + phase).sin();
                }
                v *= spec.amplitude_factor;
                if let Some(dist) = &noise {
                    v += dist.sample(&mut rng);
                }
                data.push(v);
            }
            labels.push(class);
        }
    }
    Ok(SignalDataset {
        samples: Tensor::new(vec![n, l], data)?,
        labels: Some(labels),
        classes: k,
        domain_id,
        representation: Representation::Time,
        seed,
    })
}

/// Replace every signal by its full-length FFT magnitude spectrum.
pub fn to_frequency(ds: &SignalDataset) -> Result<SignalDataset> {
    if ds.representation != Representation::Time {
        return Err(CatError::State(
            "dataset is already in the frequency domain".into(),
        ));
    }
    let l = ds.sample_length();
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(l);
    let mut out = Vec::with_capacity(ds.len() * l);
    let mut buf = vec![Complex::new(0.0, 0.0); l];
    for i in 0..ds.len() {
        for (b, &v) in buf.iter_mut().zip(ds.sample(i)) {
            *b = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        out.extend(buf.iter().map(|c| c.norm()));
    }
    Ok(SignalDataset {
        samples: Tensor::new(vec![ds.len(), l], out)?,
        labels: ds.labels.clone(),
        classes: ds.classes,
        domain_id: ds.domain_id,
        representation: Representation::Frequency,
        seed: ds.seed,
    })
}

fn subset(ds: &SignalDataset, indices: &[usize]) -> SignalDataset {
    let l = ds.sample_length();
    let mut data = Vec::with_capacity(indices.len() * l);
    for &i in indices {
        data.extend_from_slice(ds.sample(i));
    }
    SignalDataset {
        samples: Tensor::new(vec![indices.len(), l], data).expect("shape consistent"),
        labels: ds
            .labels
            .as_ref()
            .map(|y| indices.iter().map(|&i| y[i]).collect()),
        classes: ds.classes,
        domain_id: ds.domain_id,
        representation: ds.representation,
        seed: ds.seed,
    }
}

/// Seed-deterministic train/test split, stratified by class when labels are
/// present. Test sizes are rounded per class so proportions hold within one
/// sample.
pub fn split_train_test(
    ds: &SignalDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(SignalDataset, SignalDataset)> {
    if !(0.0 < train_fraction && train_fraction < 1.0) {
        return Err(CatError::Param(format!(
            "train fraction must lie strictly between 0 and 1, got {}",
            train_fraction
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    match &ds.labels {
        Some(labels) => {
            for class in 0..ds.classes {
                let mut members: Vec<usize> =
                    (0..ds.len()).filter(|&i| labels[i] == class).collect();
                if members.len() < 2 {
                    return Err(CatError::Data(format!(
                        "class {} has {} samples, cannot stratify",
                        class,
                        members.len()
                    )));
                }
                members.shuffle(&mut rng);
                let n_train = ((members.len() as f64 * train_fraction).round() as usize)
                    .clamp(1, members.len() - 1);
                train_idx.extend_from_slice(&members[..n_train]);
                test_idx.extend_from_slice(&members[n_train..]);
            }
        }
        None => {
            let mut all: Vec<usize> = (0..ds.len()).collect();
            if all.len() < 2 {
                return Err(CatError::Data("need at least two samples to split".into()));
            }
            all.shuffle(&mut rng);
            let n_train =
                ((all.len() as f64 * train_fraction).round() as usize).clamp(1, all.len() - 1);
            train_idx.extend_from_slice(&all[..n_train]);
            test_idx.extend_from_slice(&all[n_train..]);
        }
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((subset(ds, &train_idx), subset(ds, &test_idx)))
}

/// Per-sample z-score normalization with a standard-deviation floor.
pub fn normalize(ds: &SignalDataset) -> SignalDataset {
    const STD_FLOOR: f64 = 1e-8;
    let l = ds.sample_length();
    let mut data = Vec::with_capacity(ds.len() * l);
    for i in 0..ds.len() {
        let row = ds.sample(i);
        let mean = row.iter().sum::<f64>() / l as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / l as f64;
        let std = var.sqrt().max(STD_FLOOR);
        data.extend(row.iter().map(|v| (v - mean) / std));
    }
    SignalDataset {
        samples: Tensor::new(vec![ds.len(), l], data).expect("shape consistent"),
        labels: ds.labels.clone(),
        classes: ds.classes,
        domain_id: ds.domain_id,
        representation: ds.representation,
        seed: ds.seed,
    }
}

/// Shuffled index batches for one epoch; the order depends only on
/// `(seed, epoch)`.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

/// Write the dataset in the little-endian binary format: an 8-byte magic,
/// version, dimensions, label/representation flags, the sample matrix as
/// f64 values, and the labels as u32 values when present.
pub fn save_dataset(ds: &SignalDataset, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&(ds.len() as u64).to_le_bytes())?;
    w.write_all(&(ds.sample_length() as u64).to_le_bytes())?;
    w.write_all(&(ds.classes as u32).to_le_bytes())?;
    w.write_all(&[ds.labels.is_some() as u8])?;
    w.write_all(&[ds.representation.to_byte()])?;
    for &v in ds.samples.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    if let Some(labels) = &ds.labels {
        for &y in labels {
            w.write_all(&(y as u32).to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read, path: &Path) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|_| CatError::FileFormat {
        path: path.display().to_string(),
        detail: "truncated dataset file".into(),
    })?;
    Ok(buf)
}

pub fn load_dataset(path: &Path) -> Result<SignalDataset> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let magic: [u8; 8] = read_exact(&mut r, path)?;
    if &magic != DATASET_MAGIC {
        return Err(CatError::FileFormat {
            path: path.display().to_string(),
            detail: "bad magic, not a dataset file".into(),
        });
    }
    let version = u32::from_le_bytes(read_exact(&mut r, path)?);
    if version != DATASET_VERSION {
        return Err(CatError::FileFormat {
            path: path.display().to_string(),
            detail: format!("unsupported dataset version {}", version),
        });
    }
    let n = u64::from_le_bytes(read_exact(&mut r, path)?) as usize;
    let l = u64::from_le_bytes(read_exact(&mut r, path)?) as usize;
    let k = u32::from_le_bytes(read_exact(&mut r, path)?) as usize;
    let has_labels = read_exact::<1>(&mut r, path)?[0] != 0;
    let representation = Representation::from_byte(read_exact::<1>(&mut r, path)?[0])?;
    let mut data = Vec::with_capacity(n * l);
    for _ in 0..n * l {
        data.push(f64::from_le_bytes(read_exact(&mut r, path)?));
    }
    let labels = if has_labels {
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let y = u32::from_le_bytes(read_exact(&mut r, path)?) as usize;
            if y >= k {
                return Err(CatError::FileFormat {
                    path: path.display().to_string(),
                    detail: format!("label {} out of range for K={}", y, k),
                });
            }
            labels.push(y);
        }
        Some(labels)
    } else {
        None
    };
    Ok(SignalDataset {
        samples: Tensor::new(vec![n, l], data)?,
        labels,
        classes: k,
        domain_id: 0,
        representation,
        seed: 0,
    })
}

/// Import a labeled CSV with rows `label,v0,...,v{L-1}`.
pub fn import_csv(path: &Path, classes: usize) -> Result<SignalDataset> {
    let text = std::fs::read_to_string(path)?;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut length = None;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label: usize = fields
            .next()
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| CatError::FileFormat {
                path: path.display().to_string(),
                detail: format!("line {}: bad label", lineno + 1),
            })?;
        if label >= classes {
            return Err(CatError::FileFormat {
                path: path.display().to_string(),
                detail: format!("line {}: label {} out of range", lineno + 1, label),
            });
        }
        let values: Vec<f64> = fields
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| CatError::FileFormat {
                path: path.display().to_string(),
                detail: format!("line {}: bad value", lineno + 1),
            })?;
        match length {
            None => length = Some(values.len()),
            Some(l) if l != values.len() => {
                return Err(CatError::FileFormat {
                    path: path.display().to_string(),
                    detail: format!("line {}: expected {} values, got {}", lineno + 1, l, values.len()),
                });
            }
            _ => {}
        }
        labels.push(label);
        data.extend(values);
    }
    let l = length.ok_or_else(|| CatError::FileFormat {
        path: path.display().to_string(),
        detail: "empty CSV".into(),
    })?;
    let n = labels.len();
    Ok(SignalDataset {
        samples: Tensor::new(vec![n, l], data)?,
        labels: Some(labels),
        classes,
        domain_id: 0,
        representation: Representation::Time,
        seed: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SynthDomainSpec {
        SynthDomainSpec::standard(3, 1.0, 0.2)
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synth(&spec(), 4, 0, 11).unwrap();
        let b = generate_synth(&spec(), 4, 0, 11).unwrap();
        assert_eq!(a.samples.data(), b.samples.data());
        assert_eq!(a.labels, b.labels);
        let c = generate_synth(&spec(), 4, 0, 12).unwrap();
        assert_ne!(a.samples.data(), c.samples.data());
        // Domains draw from separate substreams of the same seed.
        let d = generate_synth(&spec(), 4, 1, 11).unwrap();
        assert_ne!(a.samples.data(), d.samples.data());
    }

    #[test]
    fn noiseless_single_harmonic_is_a_pure_tone() {
        let s = SynthDomainSpec {
            noise_sigma: 0.0,
            harmonic_weights: vec![1.0],
            ..spec()
        };
        let ds = generate_synth(&s, 1, 0, 3).unwrap();
        // Amplitude 1 sinusoid at the class fundamental.
        let row = ds.sample(0);
        assert!(row.iter().all(|v| v.abs() <= 1.0 + 1e-12));
        let freq = to_frequency(&ds).unwrap();
        let mags = freq.sample(0);
        let peak = mags
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        let f0 = s.fundamentals[0].round() as usize;
        assert!(peak == f0 || peak == DEFAULT_LENGTH - f0, "peak at {}", peak);
    }

    #[test]
    fn nyquist_violation_is_rejected() {
        let s = SynthDomainSpec {
            speed_factor: 30.0,
            fundamentals: vec![8.0, 15.0],
            ..spec()
        };
        assert!(s.validate().is_err());
        assert!(generate_synth(&s, 1, 0, 0).is_err());
    }

    #[test]
    fn fft_of_constant_signal_concentrates_at_dc() {
        let l = 64;
        let ds = SignalDataset {
            samples: Tensor::full(&[2, l], 0.5),
            labels: None,
            classes: 1,
            domain_id: 0,
            representation: Representation::Time,
            seed: 0,
        };
        let freq = to_frequency(&ds).unwrap();
        assert!((freq.sample(0)[0] - l as f64 * 0.5).abs() < 1e-9);
        for &v in &freq.sample(0)[1..] {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn fft_bin_tone_is_symmetric() {
        let l = 256;
        let k = 10;
        let data: Vec<f64> = (0..l)
            .map(|i| (2.0 * PI * k as f64 * i as f64 / l as f64).sin())
            .collect();
        let ds = SignalDataset {
            samples: Tensor::new(vec![1, l], data).unwrap(),
            labels: None,
            classes: 1,
            domain_id: 0,
            representation: Representation::Time,
            seed: 0,
        };
        let freq = to_frequency(&ds).unwrap();
        let mags = freq.sample(0);
        assert!((mags[k] - l as f64 / 2.0).abs() < 1e-8);
        assert!((mags[l - k] - l as f64 / 2.0).abs() < 1e-8);
        let rest: f64 = mags
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != k && *i != l - k)
            .map(|(_, v)| v.abs())
            .sum();
        assert!(rest < 1e-6);
    }

    #[test]
    fn fft_preserves_energy() {
        let ds = generate_synth(&spec(), 2, 0, 17).unwrap();
        let freq = to_frequency(&ds).unwrap();
        for i in 0..ds.len() {
            let time_energy: f64 = ds.sample(i).iter().map(|v| v * v).sum();
            let freq_energy: f64 =
                freq.sample(i).iter().map(|v| v * v).sum::<f64>() / ds.sample_length() as f64;
            assert!(
                (time_energy - freq_energy).abs() / time_energy < 1e-8,
                "Parseval violated: {} vs {}",
                time_energy,
                freq_energy
            );
        }
    }

    #[test]
    fn double_fft_is_a_state_error() {
        let ds = generate_synth(&spec(), 1, 0, 5).unwrap();
        let freq = to_frequency(&ds).unwrap();
        assert!(matches!(to_frequency(&freq), Err(CatError::State(_))));
    }

    #[test]
    fn split_is_stratified_disjoint_and_deterministic() {
        let ds = generate_synth(&spec(), 50, 0, 7).unwrap();
        let (train, test) = split_train_test(&ds, 0.8, 99).unwrap();
        assert_eq!(train.len(), 120);
        assert_eq!(test.len(), 30);
        // Per-class proportions hold exactly for a divisible fixture.
        for class in 0..3 {
            let in_train = train
                .labels
                .as_ref()
                .unwrap()
                .iter()
                .filter(|&&y| y == class)
                .count();
            assert_eq!(in_train, 40);
        }
        // Union is the original multiset of rows, intersection empty: check
        // via exact row matching against the source dataset.
        let mut seen = vec![0usize; ds.len()];
        for part in [&train, &test] {
            for i in 0..part.len() {
                let row = part.sample(i);
                let j = (0..ds.len())
                    .find(|&j| ds.sample(j) == row)
                    .expect("row must come from the source dataset");
                seen[j] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));

        let (train2, _) = split_train_test(&ds, 0.8, 99).unwrap();
        assert_eq!(train.samples.data(), train2.samples.data());
        let (train3, _) = split_train_test(&ds, 0.8, 100).unwrap();
        assert_ne!(train.samples.data(), train3.samples.data());
    }

    #[test]
    fn split_rejects_degenerate_inputs() {
        let ds = generate_synth(&spec(), 1, 0, 7).unwrap();
        assert!(split_train_test(&ds, 0.8, 0).is_err()); // one sample per class
        let ds = generate_synth(&spec(), 10, 0, 7).unwrap();
        assert!(split_train_test(&ds, 0.0, 0).is_err());
        assert!(split_train_test(&ds, 1.0, 0).is_err());
    }

    #[test]
    fn normalization_is_zero_mean_unit_std_and_idempotent() {
        let ds = generate_synth(&spec(), 3, 0, 13).unwrap();
        let norm = normalize(&ds);
        let l = norm.sample_length() as f64;
        for i in 0..norm.len() {
            let row = norm.sample(i);
            let mean = row.iter().sum::<f64>() / l;
            let std = (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / l).sqrt();
            assert!(mean.abs() < 1e-10);
            assert!((std - 1.0).abs() < 1e-10);
        }
        let again = normalize(&norm);
        for (a, b) in norm.samples.data().iter().zip(again.samples.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn constant_sample_normalizes_to_zeros() {
        let ds = SignalDataset {
            samples: Tensor::full(&[1, 16], 3.7),
            labels: None,
            classes: 1,
            domain_id: 0,
            representation: Representation::Time,
            seed: 0,
        };
        let norm = normalize(&ds);
        // The floored divisor leaves only rounding residue from the mean.
        assert!(norm.samples.data().iter().all(|&v| v.abs() < 1e-6));
    }

    #[test]
    fn epoch_batches_are_reproducible_and_exhaustive() {
        let a = epoch_batches(100, 32, 5, 3);
        let b = epoch_batches(100, 32, 5, 3);
        assert_eq!(a, b);
        let c = epoch_batches(100, 32, 5, 4);
        assert_ne!(a, c);
        let sizes: Vec<usize> = a.iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![32, 32, 32, 4]);
        let mut all: Vec<usize> = a.into_iter().flatten().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn dataset_file_round_trip_is_bitwise() {
        let dir = std::env::temp_dir().join("catuda_data_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.ds");
        let ds = generate_synth(&spec(), 4, 2, 19).unwrap();
        save_dataset(&ds, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded.samples.data(), ds.samples.data());
        assert_eq!(loaded.labels, ds.labels);
        assert_eq!(loaded.classes, ds.classes);
        assert_eq!(loaded.representation, ds.representation);

        // Unlabeled round trip too.
        let (unlabeled, _) = ds.strip_labels();
        save_dataset(&unlabeled, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert!(loaded.labels.is_none());
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = std::env::temp_dir().join("catuda_data_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("corrupt.ds");
        std::fs::write(&path, b"definitely not a dataset").unwrap();
        assert!(matches!(
            load_dataset(&path),
            Err(CatError::FileFormat { .. })
        ));
        std::fs::write(&path, b"short").unwrap();
        assert!(load_dataset(&path).is_err());
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn csv_import_parses_and_validates() {
        let dir = std::env::temp_dir().join("catuda_data_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("import.csv");
        std::fs::write(&path, "0,1.5,-2.0,0.25\n1,0.0,3.5,1.0\n").unwrap();
        let ds = import_csv(&path, 2).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.sample_length(), 3);
        assert_eq!(ds.labels, Some(vec![0, 1]));
        assert_eq!(ds.sample(1), &[0.0, 3.5, 1.0]);

        std::fs::write(&path, "5,1.0,2.0\n").unwrap();
        assert!(import_csv(&path, 2).is_err()); // label out of range
        std::fs::write(&path, "0,1.0,2.0\n1,1.0\n").unwrap();
        assert!(import_csv(&path, 2).is_err()); // ragged rows
        std::fs::remove_file(&path).ok();
    }
}
