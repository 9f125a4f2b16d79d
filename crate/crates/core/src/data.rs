//! Embedding datasets: binary/CSV interchange, synthetic Gaussian mixtures
//! and the feature-space weak/strong perturbations used during training.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SpiceError};
use crate::numeric::{dot, Matrix, RngState};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"SPCE";
pub const EMBEDDING_VERSION: u32 = 1;
const CSV_HEADER_PREFIX: &str = "# spice-csv v1";

/// N×D features with optional ground truth. Stands in for the frozen backbone output.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    pub features: Matrix,
    pub true_labels: Option<Vec<usize>>,
    pub k_hint: Option<usize>,
    pub source: String,
}

impl EmbeddingDataset {
    pub fn new(
        features: Matrix,
        true_labels: Option<Vec<usize>>,
        k_hint: Option<usize>,
        source: impl Into<String>,
    ) -> Result<Self> {
        let ds = Self {
            features,
            true_labels,
            k_hint,
            source: source.into(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.rows() < 1 || self.features.cols() < 2 {
            return Err(SpiceError::InvalidInput(format!(
                "dataset needs N >= 1 and D >= 2, got {}x{}",
                self.features.rows(),
                self.features.cols()
            )));
        }
        if !self.features.all_finite() {
            return Err(SpiceError::InvalidInput("non-finite feature".into()));
        }
        if let Some(labels) = &self.true_labels {
            if labels.len() != self.len() {
                return Err(SpiceError::shape(self.len(), labels.len()));
            }
            let k = self
                .k_hint
                .ok_or_else(|| SpiceError::InvalidInput("labels present without k".into()))?;
            if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
                return Err(SpiceError::InvalidLabel { label: bad, k });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileFormat {
    Binary,
    Csv,
}

impl FileFormat {
    /// `.csv` means CSV, anything else is the binary envelope.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => FileFormat::Csv,
            _ => FileFormat::Binary,
        }
    }
}

pub fn load_embeddings(path: &Path, format: FileFormat) -> Result<EmbeddingDataset> {
    let file = File::open(path)?;
    let source = path.display().to_string();
    match format {
        FileFormat::Binary => {
            let mut bytes = Vec::new();
            BufReader::new(file).read_to_end(&mut bytes)?;
            decode_binary(&bytes, source)
        }
        FileFormat::Csv => read_csv(BufReader::new(file), source),
    }
}

pub fn save_embeddings(dataset: &EmbeddingDataset, path: &Path, format: FileFormat) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    match format {
        FileFormat::Binary => w.write_all(&encode_binary(dataset))?,
        FileFormat::Csv => write_csv(dataset, &mut w)?,
    }
    w.flush()?;
    Ok(())
}

/// Little-endian envelope: magic, version u32, N u64, D u32, has_labels u8,
/// N×D f32 row-major, then N u32 labels when present.
pub fn encode_binary(dataset: &EmbeddingDataset) -> Vec<u8> {
    let (n, d) = dataset.features.shape();
    let mut out = Vec::with_capacity(21 + n * d * 4 + n * 4);
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.push(u8::from(dataset.true_labels.is_some()));
    for &v in dataset.features.as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    if let Some(labels) = &dataset.true_labels {
        for &l in labels {
            out.extend_from_slice(&(l as u32).to_le_bytes());
        }
    }
    out
}

pub(crate) struct Cursor<'a> {
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(SpiceError::BinaryParse {
                offset: self.pos as u64,
                msg: format!("truncated file while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_binary(bytes: &[u8], source: String) -> Result<EmbeddingDataset> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != EMBEDDING_MAGIC {
        return Err(SpiceError::BinaryParse {
            offset: 0,
            msg: "bad magic".into(),
        });
    }
    let version = cur.u32("version")?;
    if version != EMBEDDING_VERSION {
        return Err(SpiceError::BinaryParse {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let n = cur.u64("N")? as usize;
    let d = cur.u32("D")? as usize;
    let has_labels = match cur.take(1, "label flag")?[0] {
        0 => false,
        1 => true,
        other => {
            return Err(SpiceError::BinaryParse {
                offset: 20,
                msg: format!("label flag must be 0 or 1, got {other}"),
            })
        }
    };
    let payload = n
        .checked_mul(d)
        .and_then(|nd| nd.checked_mul(4))
        .ok_or_else(|| SpiceError::BinaryParse {
            offset: 8,
            msg: "dimension overflow".into(),
        })?;
    let start = cur.pos;
    let raw = cur.take(payload, "features")?;
    let mut data = Vec::with_capacity(n * d);
    for (i, chunk) in raw.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(SpiceError::BinaryParse {
                offset: (start + 4 * i) as u64,
                msg: "non-finite feature value".into(),
            });
        }
        data.push(f64::from(v));
    }
    let labels = if has_labels {
        let raw = cur.take(n * 4, "labels")?;
        Some(
            raw.chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
                .collect::<Vec<_>>(),
        )
    } else {
        None
    };
    if cur.pos != bytes.len() {
        return Err(SpiceError::BinaryParse {
            offset: cur.pos as u64,
            msg: format!("{} trailing bytes", bytes.len() - cur.pos),
        });
    }
    let features = Matrix::from_vec(n, d, data)?;
    let (true_labels, k_hint) = match labels {
        Some(l) => {
            let k = l.iter().max().map_or(0, |m| m + 1);
            (Some(l), Some(k))
        }
        None => (None, None),
    };
    EmbeddingDataset::new(features, true_labels, k_hint, source)
}

fn write_csv(dataset: &EmbeddingDataset, w: &mut impl Write) -> Result<()> {
    let labeled = dataset.true_labels.is_some();
    writeln!(
        w,
        "{CSV_HEADER_PREFIX} d={} labeled={}",
        dataset.dim(),
        u8::from(labeled)
    )?;
    for (i, row) in dataset.features.row_iter().enumerate() {
        let mut line = row
            .iter()
            .map(|v| format!("{v}"))
            .collect::<Vec<_>>()
            .join(",");
        if let Some(labels) = &dataset.true_labels {
            line.push(',');
            line.push_str(&labels[i].to_string());
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

fn parse_csv_header(line: &str) -> Result<(usize, bool)> {
    let err = |msg: &str| SpiceError::TextParse {
        line: 1,
        msg: msg.to_string(),
    };
    let rest = line
        .strip_prefix(CSV_HEADER_PREFIX)
        .ok_or_else(|| err("missing `# spice-csv v1` header"))?;
    let mut d = None;
    let mut labeled = None;
    for tok in rest.split_whitespace() {
        match tok.split_once('=') {
            Some(("d", v)) => d = v.parse::<usize>().ok(),
            Some(("labeled", "0")) => labeled = Some(false),
            Some(("labeled", "1")) => labeled = Some(true),
            _ => return Err(err(&format!("unexpected header token `{tok}`"))),
        }
    }
    match (d, labeled) {
        (Some(d), Some(l)) => Ok((d, l)),
        _ => Err(err("header needs d=<D> and labeled=<0|1>")),
    }
}

fn read_csv(reader: impl BufRead, source: String) -> Result<EmbeddingDataset> {
    let mut lines = reader.lines();
    let header = lines.next().ok_or(SpiceError::TextParse {
        line: 1,
        msg: "empty file".into(),
    })??;
    let (d, labeled) = parse_csv_header(header.trim())?;
    let want = d + usize::from(labeled);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != want {
            return Err(SpiceError::TextParse {
                line: line_no,
                msg: format!("expected {want} fields, found {}", fields.len()),
            });
        }
        for f in &fields[..d] {
            let v: f64 = f.parse().map_err(|_| SpiceError::TextParse {
                line: line_no,
                msg: format!("bad float `{f}`"),
            })?;
            if !v.is_finite() {
                return Err(SpiceError::TextParse {
                    line: line_no,
                    msg: "non-finite feature value".into(),
                });
            }
            data.push(v);
        }
        if labeled {
            let l: usize = fields[d].parse().map_err(|_| SpiceError::TextParse {
                line: line_no,
                msg: format!("bad label `{}`", fields[d]),
            })?;
            labels.push(l);
        }
    }
    let n = data.len() / d.max(1);
    let features = Matrix::from_vec(n, d, data)?;
    let (true_labels, k_hint) = if labeled {
        let k = labels.iter().max().map_or(0, |m| m + 1);
        (Some(labels), Some(k))
    } else {
        (None, None)
    };
    EmbeddingDataset::new(features, true_labels, k_hint, source)
}

/// Parameters of a balanced isotropic Gaussian mixture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub k: usize,
    pub d: usize,
    pub n_per_cluster: usize,
    /// Minimum pairwise center distance, in units of `within_sigma`.
    pub center_separation: f64,
    pub within_sigma: f64,
}

/// Balanced Gaussian mixture with pairwise center distance ≥ `separation × σ`.
///
/// Centers are orthonormal directions scaled by `separation·σ/√2` when `d ≥ k`;
/// otherwise random unit directions are rescaled until the closest pair meets
/// the bound. Values are rounded to `f32` so the dataset survives a binary
/// round trip unchanged.
pub fn synth_gmm(spec: &SynthSpec, rng: &mut RngState) -> Result<EmbeddingDataset> {
    let SynthSpec {
        k,
        d,
        n_per_cluster,
        center_separation,
        within_sigma,
    } = *spec;
    if k < 2 || d < 2 {
        return Err(SpiceError::InvalidArgument(format!(
            "synth needs k >= 2 and d >= 2, got k={k}, d={d}"
        )));
    }
    if center_separation <= 0.0 || !(within_sigma >= 0.0) || n_per_cluster == 0 {
        return Err(SpiceError::InvalidArgument(
            "synth needs separation > 0, sigma >= 0, n_per_cluster >= 1".into(),
        ));
    }
    let target = center_separation * within_sigma.max(f64::MIN_POSITIVE);
    let mut directions: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut source = format!(
        "synth-gmm k={k} d={d} n={n_per_cluster} sep={center_separation} sigma={within_sigma}"
    );
    let orthogonal = d >= k;
    while directions.len() < k {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        if orthogonal {
            for u in &directions {
                let p = dot(&v, u);
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|a| *a /= norm);
        directions.push(v);
    }
    let scale = if orthogonal {
        target / std::f64::consts::SQRT_2
    } else {
        let mut min_dist = f64::INFINITY;
        for i in 0..k {
            for j in i + 1..k {
                let dist: f64 = directions[i]
                    .iter()
                    .zip(&directions[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                min_dist = min_dist.min(dist);
            }
        }
        if min_dist < 1e-6 {
            return Err(SpiceError::Degenerate(
                "random center directions collided".into(),
            ));
        }
        log::warn!("synth_gmm: d < k, centers are random unit directions (min pairwise distance {min_dist:.3})");
        source.push_str(" warn=non-orthogonal-centers");
        target / min_dist
    };
    let n = k * n_per_cluster;
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for (c, dir) in directions.iter().enumerate() {
        for _ in 0..n_per_cluster {
            for &u in dir {
                let z: f64 = rng.sample(StandardNormal);
                data.push(f64::from((scale * u + within_sigma * z) as f32));
            }
            labels.push(c);
        }
    }
    EmbeddingDataset::new(Matrix::from_vec(n, d, data)?, Some(labels), Some(k), source)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strength {
    Weak,
    Strong,
}

/// Feature-space stand-ins for image augmentations.
///
/// Noise levels are multiplied per dimension by `scale` (when set), so
/// [`TransformConfig::calibrated`] expresses them relative to feature spread.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformConfig {
    pub weak_noise_sigma: f64,
    pub strong_noise_sigma: f64,
    pub strong_dropout_rate: f64,
    #[serde(skip)]
    pub scale: Option<Vec<f64>>,
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self {
            weak_noise_sigma: 0.0,
            strong_noise_sigma: 0.1,
            strong_dropout_rate: 0.1,
            scale: None,
        }
    }
}

impl TransformConfig {
    pub fn identity() -> Self {
        Self {
            weak_noise_sigma: 0.0,
            strong_noise_sigma: 0.0,
            strong_dropout_rate: 0.0,
            scale: None,
        }
    }

    /// Same relative levels, scaled by the per-dimension std of `features`.
    pub fn calibrated(mut self, features: &Matrix) -> Self {
        self.scale = Some(features.column_std());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.weak_noise_sigma >= 0.0 && self.strong_noise_sigma >= 0.0) {
            return Err(SpiceError::Config("noise sigmas must be >= 0".into()));
        }
        if self.weak_noise_sigma > self.strong_noise_sigma {
            return Err(SpiceError::Config(format!(
                "weak noise {} exceeds strong noise {}",
                self.weak_noise_sigma, self.strong_noise_sigma
            )));
        }
        if !(0.0..1.0).contains(&self.strong_dropout_rate) {
            return Err(SpiceError::Config(format!(
                "strong dropout rate must lie in [0, 1), got {}",
                self.strong_dropout_rate
            )));
        }
        Ok(())
    }
}

/// Weak: additive Gaussian noise. Strong: noise, then independent coordinate dropout.
pub fn transform(
    features: &Matrix,
    cfg: &TransformConfig,
    strength: Strength,
    rng: &mut RngState,
) -> Matrix {
    let (sigma, dropout) = match strength {
        Strength::Weak => (cfg.weak_noise_sigma, 0.0),
        Strength::Strong => (cfg.strong_noise_sigma, cfg.strong_dropout_rate),
    };
    let mut out = features.clone();
    if sigma == 0.0 && dropout == 0.0 {
        return out;
    }
    let cols = out.cols();
    for (j, v) in out.as_mut_slice().iter_mut().enumerate() {
        if sigma > 0.0 {
            let s = cfg.scale.as_ref().map_or(1.0, |s| s[j % cols]);
            let z: f64 = rng.sample(StandardNormal);
            *v += sigma * s * z;
        }
        if dropout > 0.0 && rng.random::<f64>() < dropout {
            *v = 0.0;
        }
    }
    out
}
