//! Dataset files, seeded splitting and the synthetic miscalibrated classifier.
//!
//! Two on-disk layouts are supported:
//!
//! * CSV with header `z0,...,z{m-1},label`, one sample per line.
//! * Raw binary: little-endian `f32` logits in row-major order followed by
//!   `n` little-endian `u32` labels, described by a JSON sidecar at
//!   `<path>.meta.json` holding `{"n", "m", "dtype": "f32", "v": 1}`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logits::{LabelVector, LogitMatrix, ProbMatrix, Rows};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Csv,
    #[serde(rename = "bin")]
    RawBinary,
}

impl DatasetFormat {
    /// `.csv` files are CSV, anything else is raw binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => Self::Csv,
            _ => Self::RawBinary,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMeta {
    pub n: usize,
    pub m: usize,
    pub dtype: String,
    pub v: u32,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Logits and labels read from `path`.
pub fn read_dataset(path: &Path, format: DatasetFormat) -> Result<(LogitMatrix, LabelVector)> {
    match format {
        DatasetFormat::Csv => read_csv(path),
        DatasetFormat::RawBinary => read_binary(path),
    }
}

pub fn write_dataset(
    path: &Path,
    format: DatasetFormat,
    z: &LogitMatrix,
    y: &LabelVector,
) -> Result<()> {
    y.check_against(z.n(), z.m())?;
    match format {
        DatasetFormat::Csv => write_csv(path, z, y),
        DatasetFormat::RawBinary => write_binary(path, z, y),
    }
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            line,
            msg: format!("{other:?}"),
        },
    }
}

fn read_csv(path: &Path) -> Result<(LogitMatrix, LabelVector)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_error)?;
    let header = reader.headers().map_err(csv_error)?.clone();
    let m = header.len().saturating_sub(1);
    if m < 2 {
        return Err(Error::MalformedHeader(format!(
            "expected z0,...,z{{m-1}},label with m >= 2, got {} column(s)",
            header.len()
        )));
    }
    for (j, name) in header.iter().take(m).enumerate() {
        if name != format!("z{j}") {
            return Err(Error::MalformedHeader(format!(
                "column {j} is '{name}', expected 'z{j}'"
            )));
        }
    }
    if &header[m] != "label" {
        return Err(Error::MalformedHeader(format!(
            "last column is '{}', expected 'label'",
            &header[m]
        )));
    }

    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(csv_error)?;
        let line = i + 2;
        if record.len() != m + 1 {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} fields, found {}", m + 1, record.len()),
            });
        }
        for field in record.iter().take(m) {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("'{field}' is not a number"),
            })?;
            data.push(v);
        }
        let label: usize = record[m].parse().map_err(|_| Error::Parse {
            line,
            msg: format!("'{}' is not a class index", &record[m]),
        })?;
        labels.push(label);
    }
    let n = labels.len();
    let labels = LabelVector::new(labels, m)?;
    Ok((LogitMatrix::new(data, n, m)?, labels))
}

fn write_csv(path: &Path, z: &LogitMatrix, y: &LabelVector) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(csv_error)?;
    let mut header: Vec<String> = (0..z.m()).map(|j| format!("z{j}")).collect();
    header.push("label".into());
    writer.write_record(&header).map_err(csv_error)?;
    let mut fields = Vec::with_capacity(z.m() + 1);
    for (row, label) in z.rows().zip(y.iter()) {
        fields.clear();
        fields.extend(row.iter().map(|v| v.to_string()));
        fields.push(label.to_string());
        writer.write_record(&fields).map_err(csv_error)?;
    }
    writer.flush()?;
    Ok(())
}

fn read_binary(path: &Path) -> Result<(LogitMatrix, LabelVector)> {
    let meta_path = sidecar_path(path);
    let meta: BinaryMeta = serde_json::from_reader(BufReader::new(File::open(&meta_path)?))?;
    if meta.dtype != "f32" {
        return Err(Error::SidecarMismatch(format!(
            "unsupported dtype '{}'",
            meta.dtype
        )));
    }
    if meta.v != 1 {
        return Err(Error::SidecarMismatch(format!(
            "unsupported version {}",
            meta.v
        )));
    }
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let expected = meta.n * meta.m * 4 + meta.n * 4;
    if bytes.len() != expected {
        return Err(Error::SidecarMismatch(format!(
            "sidecar declares n={}, m={} ({expected} bytes) but file has {} bytes",
            meta.n,
            meta.m,
            bytes.len()
        )));
    }
    let (logit_bytes, label_bytes) = bytes.split_at(meta.n * meta.m * 4);
    let data = logit_bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4-byte chunk")) as f64)
        .collect();
    let labels = label_bytes
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4-byte chunk")) as usize)
        .collect();
    let labels = LabelVector::new(labels, meta.m)?;
    Ok((LogitMatrix::new(data, meta.n, meta.m)?, labels))
}

fn write_binary(path: &Path, z: &LogitMatrix, y: &LabelVector) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for &v in z.as_slice() {
        out.write_all(&(v as f32).to_le_bytes())?;
    }
    for label in y.iter() {
        let label = u32::try_from(label)
            .map_err(|_| Error::InvalidConfig(format!("label {label} does not fit in u32")))?;
        out.write_all(&label.to_le_bytes())?;
    }
    out.flush()?;
    let meta = BinaryMeta {
        n: z.n(),
        m: z.m(),
        dtype: "f32".into(),
        v: 1,
    };
    serde_json::to_writer(BufWriter::new(File::create(sidecar_path(path))?), &meta)?;
    Ok(())
}

/// Probability matrix as CSV with header `p0,...,p{m-1}`.
pub fn write_probs_csv(path: &Path, p: &ProbMatrix) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(csv_error)?;
    writer
        .write_record((0..p.m()).map(|j| format!("p{j}")))
        .map_err(csv_error)?;
    for row in p.rows() {
        writer
            .write_record(row.iter().map(|v| v.to_string()))
            .map_err(csv_error)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_probs_csv(path: &Path) -> Result<ProbMatrix> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_error)?;
    let m = reader.headers().map_err(csv_error)?.len();
    let mut data = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(csv_error)?;
        for field in record.iter() {
            data.push(field.parse::<f64>().map_err(|_| Error::Parse {
                line: i + 2,
                msg: format!("'{field}' is not a number"),
            })?);
        }
    }
    let n = data.len().checked_div(m).unwrap_or(0);
    ProbMatrix::new(data, n, m)
}

/// One side of a split, with the indices it was drawn from.
#[derive(Debug, Clone)]
pub struct Subset {
    pub logits: LogitMatrix,
    pub labels: LabelVector,
    pub indices: Vec<usize>,
}

impl Subset {
    pub fn from_indices(z: &LogitMatrix, y: &LabelVector, indices: Vec<usize>) -> Self {
        Self {
            logits: z.select_rows(&indices),
            labels: y.select(&indices),
            indices,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Seeded shuffle of `0..n`.
pub fn seeded_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Shuffles with `seed`, then puts the first `round(calib_fraction * n)`
/// samples in the calibration part and the rest in the test part.
pub fn split_dataset(
    z: &LogitMatrix,
    y: &LabelVector,
    calib_fraction: f64,
    seed: u64,
) -> Result<(Subset, Subset)> {
    y.check_against(z.n(), z.m())?;
    if !(calib_fraction > 0.0 && calib_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "calibration fraction {calib_fraction} is outside (0, 1)"
        )));
    }
    let n = z.n();
    let n_calib = (calib_fraction * n as f64).round() as usize;
    if n_calib == 0 || n_calib == n {
        return Err(Error::TooFewSamples(format!(
            "fraction {calib_fraction} of {n} samples leaves an empty part"
        )));
    }
    let mut idx = seeded_permutation(n, seed);
    let test = idx.split_off(n_calib);
    Ok((
        Subset::from_indices(z, y, idx),
        Subset::from_indices(z, y, test),
    ))
}

/// Parameters of the synthetic classifier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub m: usize,
    /// Symmetric Dirichlet concentration of the true class probabilities.
    pub alpha: f64,
    /// Logits are `overconfidence * ln(p)`; 1 is calibrated, above 1 is
    /// overconfident.
    pub overconfidence: f64,
    /// Standard deviation of Gaussian noise added to each logit.
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 10_000,
            m: 10,
            alpha: 0.5,
            overconfidence: 2.5,
            noise_sd: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 1 || self.m < 2 {
            return Err(Error::InvalidConfig(format!(
                "need n >= 1 and m >= 2, got n={} m={}",
                self.n, self.m
            )));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if !(self.overconfidence > 0.0 && self.overconfidence.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "overconfidence must be positive, got {}",
                self.overconfidence
            )));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "noise_sd must be non-negative, got {}",
                self.noise_sd
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub logits: LogitMatrix,
    pub labels: LabelVector,
    /// Probabilities the labels were drawn from.
    pub true_probs: ProbMatrix,
}

/// Draws `p ~ Dirichlet(alpha)`, a label from `p`, and logits
/// `overconfidence * ln(p) + noise` for every sample.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let (n, m) = (cfg.n, cfg.m);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let gamma = Gamma::new(cfg.alpha, 1.0)
        .map_err(|e| Error::InvalidConfig(format!("gamma distribution: {e}")))?;
    let noise = (cfg.noise_sd > 0.0)
        .then(|| Normal::new(0.0, cfg.noise_sd))
        .transpose()
        .map_err(|e| Error::InvalidConfig(format!("normal distribution: {e}")))?;

    let mut logits = Vec::with_capacity(n * m);
    let mut probs = Vec::with_capacity(n * m);
    let mut labels = Vec::with_capacity(n);
    let mut p = vec![0.0; m];
    for _ in 0..n {
        for v in p.iter_mut() {
            // an underflowed draw would give ln(0)
            *v = gamma.sample(&mut rng).max(f64::MIN_POSITIVE);
        }
        let total: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= total);

        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut label = m - 1;
        for (j, &pj) in p.iter().enumerate() {
            acc += pj;
            if u < acc {
                label = j;
                break;
            }
        }
        labels.push(label);

        for &pj in &p {
            let eps = noise.as_ref().map_or(0.0, |d| d.sample(&mut rng));
            logits.push(cfg.overconfidence * pj.ln() + eps);
        }
        probs.extend_from_slice(&p);
    }
    Ok(SynthData {
        logits: LogitMatrix::new(logits, n, m)?,
        labels: LabelVector::new(labels, m)?,
        true_probs: ProbMatrix::new(probs, n, m)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logits::softmax_rows;
    use proptest::prelude::*;

    #[test]
    fn csv_fixture_is_recovered_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "z0,z1,label\n0.5,-1.25,1\n3,2.75,0\n").unwrap();
        let (z, y) = read_dataset(&path, DatasetFormat::Csv).unwrap();
        assert_eq!(z.as_slice(), &[0.5, -1.25, 3.0, 2.75]);
        assert_eq!(y.as_slice(), &[1, 0]);
    }

    #[test]
    fn csv_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "a,z1,label\n0,1,0\n").unwrap();
        assert!(matches!(
            read_dataset(&path, DatasetFormat::Csv),
            Err(Error::MalformedHeader(_))
        ));
        std::fs::write(&path, "z0,z1,label\n0,1,2\n").unwrap();
        assert!(matches!(
            read_dataset(&path, DatasetFormat::Csv),
            Err(Error::LabelOutOfRange { label: 2, .. })
        ));
        std::fs::write(&path, "z0,z1,label\n0,abc,1\n").unwrap();
        assert!(matches!(
            read_dataset(&path, DatasetFormat::Csv),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn binary_round_trip_and_sidecar_checks() {
        let data = generate_synthetic(&SynthConfig {
            n: 50,
            m: 4,
            ..SynthConfig::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        write_dataset(&path, DatasetFormat::RawBinary, &data.logits, &data.labels).unwrap();
        let (z1, y1) = read_dataset(&path, DatasetFormat::RawBinary).unwrap();
        assert_eq!(y1, data.labels);
        // second pass starts from f32-representable values and is bitwise exact
        let path2 = dir.path().join("e.bin");
        write_dataset(&path2, DatasetFormat::RawBinary, &z1, &y1).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
        let (z2, _) = read_dataset(&path2, DatasetFormat::RawBinary).unwrap();
        assert_eq!(z1, z2);

        let meta = std::fs::read_to_string(sidecar_path(&path)).unwrap();
        assert_eq!(meta, r#"{"n":50,"m":4,"dtype":"f32","v":1}"#);
        std::fs::write(sidecar_path(&path), r#"{"n":49,"m":4,"dtype":"f32","v":1}"#).unwrap();
        assert!(matches!(
            read_dataset(&path, DatasetFormat::RawBinary),
            Err(Error::SidecarMismatch(_))
        ));
    }

    #[test]
    fn split_examples() {
        let z = LogitMatrix::new((0..20).map(f64::from).collect(), 10, 2).unwrap();
        let y = LabelVector::new(vec![0, 1, 0, 1, 0, 1, 0, 1, 0, 1], 2).unwrap();
        let (a, b) = split_dataset(&z, &y, 0.5, 3).unwrap();
        assert_eq!((a.len(), b.len()), (5, 5));
        let (a2, _) = split_dataset(&z, &y, 0.5, 3).unwrap();
        assert_eq!(a.indices, a2.indices);
        let mut all: Vec<usize> = a.indices.iter().chain(&b.indices).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(split_dataset(&z, &y, 0.01, 3).is_err());
        assert!(split_dataset(&z, &y, 1.0, 3).is_err());
    }

    #[test]
    fn calibrated_generator_reproduces_true_probs() {
        let data = generate_synthetic(&SynthConfig {
            n: 2000,
            overconfidence: 1.0,
            ..SynthConfig::default()
        })
        .unwrap();
        let p = softmax_rows(&data.logits);
        for (a, b) in p.as_slice().iter().zip(data.true_probs.as_slice()) {
            assert!((a - b).abs() <= 1e-9);
        }
        let again = generate_synthetic(&SynthConfig {
            n: 2000,
            overconfidence: 1.0,
            ..SynthConfig::default()
        })
        .unwrap();
        assert_eq!(again.logits, data.logits);
        assert_eq!(again.labels, data.labels);
    }

    #[test]
    fn default_config() {
        let cfg = SynthConfig::default();
        assert_eq!((cfg.n, cfg.m), (10_000, 10));
        assert!(SynthConfig { alpha: 0.0, ..cfg }.validate().is_err());
        assert!(SynthConfig {
            noise_sd: -1.0,
            ..cfg
        }
        .validate()
        .is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn csv_round_trip(rows in prop::collection::vec(prop::collection::vec(-1e4f64..1e4, 3), 1..30)) {
            let z = LogitMatrix::from_rows(&rows).unwrap();
            let y = LabelVector::new((0..rows.len()).map(|i| i % 3).collect(), 3).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("r.csv");
            write_dataset(&path, DatasetFormat::Csv, &z, &y).unwrap();
            let (z2, y2) = read_dataset(&path, DatasetFormat::Csv).unwrap();
            prop_assert_eq!(y2, y);
            for (a, b) in z.as_slice().iter().zip(z2.as_slice()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }
    }
}
