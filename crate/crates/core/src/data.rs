//! Embedding datasets: validation, file formats, synthetic domain pairs and
//! paired mini-batch sampling.
//!
//! Two on-disk formats are supported.
//!
//! * CSV, no header. Each line is `label,x_0,...,x_{D-1}`; the label field is
//!   left empty for unlabeled rows.
//! * RawF32, little-endian. Header `N: u64, D: u64, has_labels: u32,
//!   class_count: u32`, followed by `N` rows. A row is an optional `u32`
//!   label followed by `D` `f32` values.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainTag {
    Source,
    Target,
}

impl std::fmt::Display for DomainTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DomainTag::Source => write!(f, "source"),
            DomainTag::Target => write!(f, "target"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Csv,
    RawF32,
}

impl DataFormat {
    /// Picks a format from the file extension: `.csv` is CSV, anything else RawF32.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => DataFormat::Csv,
            _ => DataFormat::RawF32,
        }
    }
}

impl FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(DataFormat::Csv),
            "raw" | "rawf32" | "f32" => Ok(DataFormat::RawF32),
            other => Err(Error::Config(format!("unknown data format '{other}'"))),
        }
    }
}

/// A domain-tagged collection of embedding vectors with optional labels.
///
/// Label access goes through [`Dataset::labels`], which counts every read.
/// Clones share the counter, so a clone handed to a trainer still reports
/// into the original.
#[derive(Debug, Clone)]
pub struct Dataset {
    embeddings: Array2<f32>,
    labels: Option<Vec<usize>>,
    domain: DomainTag,
    class_count: usize,
    label_reads: Arc<AtomicUsize>,
}

impl Dataset {
    pub fn new(
        embeddings: Array2<f32>,
        labels: Option<Vec<usize>>,
        domain: DomainTag,
        class_count: usize,
    ) -> Result<Self> {
        let (n, d) = embeddings.dim();
        if n == 0 {
            return Err(Error::Degenerate("dataset has no rows".into()));
        }
        if d == 0 {
            return Err(Error::Degenerate("dataset has zero-width rows".into()));
        }
        if class_count == 0 {
            return Err(Error::Config("class count must be positive".into()));
        }
        for (row, values) in embeddings.axis_iter(Axis(0)).enumerate() {
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Row {
                    row,
                    message: "non-finite value".into(),
                });
            }
        }
        if let Some(labels) = &labels {
            if labels.len() != n {
                return Err(Error::Shape(format!(
                    "{} labels for {} rows",
                    labels.len(),
                    n
                )));
            }
            if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= class_count)
            {
                return Err(Error::LabelOutOfRange {
                    row,
                    label,
                    classes: class_count,
                });
            }
        }
        Ok(Self {
            embeddings,
            labels,
            domain,
            class_count,
            label_reads: Arc::new(AtomicUsize::new(0)),
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn domain(&self) -> DomainTag {
        self.domain
    }

    pub fn embeddings(&self) -> ArrayView2<'_, f32> {
        self.embeddings.view()
    }

    pub fn has_labels(&self) -> bool {
        self.labels.is_some()
    }

    /// Returns the labels and records one read.
    pub fn labels(&self) -> Option<&[usize]> {
        let labels = self.labels.as_deref()?;
        self.label_reads.fetch_add(1, Ordering::SeqCst);
        Some(labels)
    }

    /// Labels of the given rows; records one read.
    pub fn labels_at(&self, indices: &[usize]) -> Result<Vec<usize>> {
        let labels = self
            .labels()
            .ok_or_else(|| Error::Unlabeled(format!("{} dataset", self.domain)))?;
        Ok(indices.iter().map(|&i| labels[i]).collect())
    }

    /// Number of label reads so far, across all clones of this dataset.
    pub fn label_reads(&self) -> usize {
        self.label_reads.load(Ordering::SeqCst)
    }

    /// Gathers rows into a dense `f64` batch.
    pub fn gather(&self, indices: &[usize]) -> Array2<f64> {
        let d = self.dim();
        let mut out = Array2::zeros((indices.len(), d));
        for (r, &i) in indices.iter().enumerate() {
            out.row_mut(r)
                .iter_mut()
                .zip(self.embeddings.row(i))
                .for_each(|(o, &v)| *o = f64::from(v));
        }
        out
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.embeddings.mapv(f64::from)
    }

    /// Same rows with labels removed; the result has a fresh read counter.
    pub fn without_labels(&self) -> Self {
        Self {
            embeddings: self.embeddings.clone(),
            labels: None,
            domain: self.domain,
            class_count: self.class_count,
            label_reads: Arc::new(AtomicUsize::new(0)),
        }
    }
}

/// Loads a dataset. `class_count` is required to validate labels; when `None`
/// it is inferred as `max(label) + 1` (or 1 for unlabeled files). RawF32
/// files carry their own class count, which `class_count` overrides.
pub fn load_dataset(
    path: &Path,
    format: DataFormat,
    domain: DomainTag,
    class_count: Option<usize>,
) -> Result<Dataset> {
    match format {
        DataFormat::Csv => load_csv(path, domain, class_count),
        DataFormat::RawF32 => load_raw(path, domain, class_count),
    }
}

fn load_csv(path: &Path, domain: DomainTag, class_count: Option<usize>) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);

    let mut values: Vec<f32> = Vec::new();
    let mut labels: Vec<Option<usize>> = Vec::new();
    let mut width: Option<usize> = None;

    for (row, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label_field = fields.next().unwrap_or("").trim();
        let label = if label_field.is_empty() {
            None
        } else {
            Some(label_field.parse::<usize>().map_err(|_| Error::Row {
                row,
                message: format!("bad label '{label_field}'"),
            })?)
        };
        let start = values.len();
        for field in fields {
            let v: f32 = field.trim().parse().map_err(|_| Error::Row {
                row,
                message: format!("bad value '{}'", field.trim()),
            })?;
            if !v.is_finite() {
                return Err(Error::Row {
                    row,
                    message: format!("non-finite value '{}'", field.trim()),
                });
            }
            values.push(v);
        }
        let w = values.len() - start;
        match width {
            None if w == 0 => {
                return Err(Error::Row {
                    row,
                    message: "row has no values".into(),
                })
            }
            None => width = Some(w),
            Some(expected) if expected != w => {
                return Err(Error::Row {
                    row,
                    message: format!("expected {expected} values, found {w}"),
                })
            }
            Some(_) => {}
        }
        labels.push(label);
    }

    let Some(width) = width else {
        return Err(Error::NoRows { path: path.into() });
    };
    let n = labels.len();
    let labels = collect_labels(labels)?;
    let embeddings = Array2::from_shape_vec((n, width), values)
        .map_err(|e| Error::Shape(e.to_string()))?;
    let classes = resolve_class_count(class_count, None, labels.as_deref());
    Dataset::new(embeddings, labels, domain, classes)
}

/// All rows labeled, or none.
fn collect_labels(labels: Vec<Option<usize>>) -> Result<Option<Vec<usize>>> {
    let labeled = labels.iter().filter(|l| l.is_some()).count();
    if labeled == 0 {
        return Ok(None);
    }
    if labeled != labels.len() {
        let row = labels.iter().position(Option::is_none).unwrap_or(0);
        return Err(Error::Row {
            row,
            message: "missing label in a labeled file".into(),
        });
    }
    Ok(Some(labels.into_iter().flatten().collect()))
}

fn resolve_class_count(
    requested: Option<usize>,
    stored: Option<usize>,
    labels: Option<&[usize]>,
) -> usize {
    requested
        .or(stored.filter(|&c| c > 0))
        .unwrap_or_else(|| labels.and_then(|l| l.iter().max()).map_or(1, |m| m + 1))
}

fn load_raw(path: &Path, domain: DomainTag, class_count: Option<usize>) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cursor = &bytes[..];
    let mut header = [0u8; 24];
    cursor.read_exact(&mut header).map_err(|_| Error::Row {
        row: 0,
        message: "truncated header".into(),
    })?;
    let n = u64::from_le_bytes(header[0..8].try_into().unwrap()) as usize;
    let d = u64::from_le_bytes(header[8..16].try_into().unwrap()) as usize;
    let has_labels = u32::from_le_bytes(header[16..20].try_into().unwrap()) != 0;
    let stored_classes = u32::from_le_bytes(header[20..24].try_into().unwrap()) as usize;
    if n == 0 {
        return Err(Error::NoRows { path: path.into() });
    }
    if d == 0 {
        return Err(Error::Row {
            row: 0,
            message: "zero-width rows".into(),
        });
    }

    let mut values = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(if has_labels { n } else { 0 });
    let mut word = [0u8; 4];
    for row in 0..n {
        let truncated = || Error::Row {
            row,
            message: "truncated payload".into(),
        };
        if has_labels {
            cursor.read_exact(&mut word).map_err(|_| truncated())?;
            labels.push(u32::from_le_bytes(word) as usize);
        }
        for _ in 0..d {
            cursor.read_exact(&mut word).map_err(|_| truncated())?;
            let v = f32::from_le_bytes(word);
            if !v.is_finite() {
                return Err(Error::Row {
                    row,
                    message: "non-finite value".into(),
                });
            }
            values.push(v);
        }
    }
    if !cursor.is_empty() {
        return Err(Error::Row {
            row: n,
            message: format!("{} trailing bytes after last row", cursor.len()),
        });
    }
    let labels = has_labels.then_some(labels);
    let classes = resolve_class_count(class_count, Some(stored_classes), labels.as_deref());
    let embeddings =
        Array2::from_shape_vec((n, d), values).map_err(|e| Error::Shape(e.to_string()))?;
    Dataset::new(embeddings, labels, domain, classes)
}

/// Writes a dataset. Writing does not count as a label read.
pub fn write_dataset(path: &Path, dataset: &Dataset, format: DataFormat) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let labels = dataset.labels.as_deref();
    let io = |e| Error::io(path, e);
    match format {
        DataFormat::Csv => {
            for (i, row) in dataset.embeddings.axis_iter(Axis(0)).enumerate() {
                if let Some(labels) = labels {
                    write!(w, "{}", labels[i]).map_err(io)?;
                }
                for v in row {
                    // shortest round-trip representation of the f32
                    write!(w, ",{v}").map_err(io)?;
                }
                writeln!(w).map_err(io)?;
            }
        }
        DataFormat::RawF32 => {
            w.write_all(&(dataset.len() as u64).to_le_bytes()).map_err(io)?;
            w.write_all(&(dataset.dim() as u64).to_le_bytes()).map_err(io)?;
            w.write_all(&u32::from(labels.is_some()).to_le_bytes())
                .map_err(io)?;
            w.write_all(&(dataset.class_count as u32).to_le_bytes())
                .map_err(io)?;
            for (i, row) in dataset.embeddings.axis_iter(Axis(0)).enumerate() {
                if let Some(labels) = labels {
                    w.write_all(&(labels[i] as u32).to_le_bytes()).map_err(io)?;
                }
                for v in row {
                    w.write_all(&v.to_le_bytes()).map_err(io)?;
                }
            }
        }
    }
    w.flush().map_err(io)
}

/// Parameters of a synthetic source/target pair: Gaussian class clusters in
/// the source, and the same draw rotated in the plane of the first two axes
/// and translated in the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub class_count: usize,
    pub dim: usize,
    pub per_class_count: usize,
    pub class_center_scale: f64,
    pub within_class_stddev: f64,
    /// Radians, applied in the (axis 0, axis 1) plane.
    pub rotation_angle: f64,
    pub shift_vector_norm: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            class_count: 6,
            dim: 64,
            per_class_count: 300,
            class_center_scale: 0.1,
            within_class_stddev: 0.2,
            rotation_angle: 0.6,
            shift_vector_norm: 4.0,
            seed: 42,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 {
            return Err(Error::Config("class_count must be ≥ 1".into()));
        }
        if self.dim == 0 {
            return Err(Error::Config("dim must be ≥ 1".into()));
        }
        if self.per_class_count == 0 {
            return Err(Error::Config("per_class_count must be ≥ 1".into()));
        }
        if !(self.within_class_stddev > 0.0 && self.within_class_stddev.is_finite()) {
            return Err(Error::Config("within_class_stddev must be > 0".into()));
        }
        for (name, v) in [
            ("class_center_scale", self.class_center_scale),
            ("rotation_angle", self.rotation_angle),
            ("shift_vector_norm", self.shift_vector_norm),
        ] {
            if !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite")));
            }
        }
        if self.shift_vector_norm < 0.0 {
            return Err(Error::Config("shift_vector_norm must be ≥ 0".into()));
        }
        if self.dim < 2 && self.rotation_angle != 0.0 {
            return Err(Error::Config(
                "rotation needs dim ≥ 2 (rotation plane undefined)".into(),
            ));
        }
        Ok(())
    }
}

// Independent ChaCha streams per generator role.
const STREAM_CENTERS: u64 = 0;
const STREAM_SAMPLES: u64 = 1;
const STREAM_SHIFT: u64 = 2;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn draw_source(spec: &SynthSpec) -> (Array2<f64>, Vec<usize>) {
    let mut center_rng = stream_rng(spec.seed, STREAM_CENTERS);
    let centers = Array2::from_shape_simple_fn((spec.class_count, spec.dim), || {
        let z: f64 = StandardNormal.sample(&mut center_rng);
        spec.class_center_scale * z
    });

    let n = spec.class_count * spec.per_class_count;
    let mut sample_rng = stream_rng(spec.seed, STREAM_SAMPLES);
    let mut x = Array2::zeros((n, spec.dim));
    let mut labels = Vec::with_capacity(n);
    for class in 0..spec.class_count {
        for k in 0..spec.per_class_count {
            let row = class * spec.per_class_count + k;
            for j in 0..spec.dim {
                let z: f64 = StandardNormal.sample(&mut sample_rng);
                x[[row, j]] = centers[[class, j]] + spec.within_class_stddev * z;
            }
            labels.push(class);
        }
    }
    (x, labels)
}

fn to_f32(x: &Array2<f64>) -> Array2<f32> {
    x.mapv(|v| v as f32)
}

/// Generates a labeled source/target pair. The target keeps its labels for
/// evaluation; trainers must not read them.
pub fn synth_domain_pair(spec: &SynthSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let (source_x, labels) = draw_source(spec);

    // the target starts from a fresh draw on the same seed
    let (mut target_x, _) = draw_source(spec);
    if spec.rotation_angle != 0.0 {
        let (sin, cos) = spec.rotation_angle.sin_cos();
        for mut row in target_x.axis_iter_mut(Axis(0)) {
            let (a, b) = (row[0], row[1]);
            row[0] = cos * a - sin * b;
            row[1] = sin * a + cos * b;
        }
    }
    if spec.shift_vector_norm != 0.0 {
        let mut shift_rng = stream_rng(spec.seed, STREAM_SHIFT);
        let mut direction: Vec<f64> = (0..spec.dim)
            .map(|_| StandardNormal.sample(&mut shift_rng))
            .collect();
        let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        direction
            .iter_mut()
            .for_each(|v| *v *= spec.shift_vector_norm / norm);
        for mut row in target_x.axis_iter_mut(Axis(0)) {
            row.iter_mut().zip(&direction).for_each(|(x, s)| *x += s);
        }
    }

    let source = Dataset::new(
        to_f32(&source_x),
        Some(labels.clone()),
        DomainTag::Source,
        spec.class_count,
    )?;
    let target = Dataset::new(
        to_f32(&target_x),
        Some(labels),
        DomainTag::Target,
        spec.class_count,
    )?;
    Ok((source, target))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerPolicy {
    /// A short tail at the end of a permutation is discarded.
    #[default]
    DropLast,
    /// A short tail is completed from the next permutation.
    WrapAround,
}

#[derive(Debug, Clone)]
struct IndexStream {
    rng: ChaCha8Rng,
    perm: Vec<usize>,
    pos: usize,
}

impl IndexStream {
    fn new(seed: u64, stream: u64) -> Self {
        Self {
            rng: stream_rng(seed, stream),
            perm: Vec::new(),
            pos: 0,
        }
    }

    fn reshuffle(&mut self, n: usize) {
        self.perm = (0..n).collect();
        self.perm.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn take(&mut self, n: usize, batch: usize, policy: SamplerPolicy) -> Vec<usize> {
        if self.perm.len() != n {
            self.reshuffle(n);
        }
        let mut out = Vec::with_capacity(batch);
        match policy {
            SamplerPolicy::DropLast => {
                if n - self.pos < batch {
                    self.reshuffle(n);
                }
                out.extend_from_slice(&self.perm[self.pos..self.pos + batch]);
                self.pos += batch;
            }
            SamplerPolicy::WrapAround => {
                while out.len() < batch {
                    if self.pos == n {
                        self.reshuffle(n);
                    }
                    let k = (batch - out.len()).min(n - self.pos);
                    out.extend_from_slice(&self.perm[self.pos..self.pos + k]);
                    self.pos += k;
                }
            }
        }
        out
    }

    fn end_epoch(&mut self) {
        self.pos = self.perm.len();
    }
}

/// Deterministic paired mini-batch sampler.
///
/// Each domain has its own shuffled index stream, so the source batch
/// sequence does not depend on the target size. An epoch is
/// `batches_per_epoch` pairs; every epoch starts from fresh permutations.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    batch_size: usize,
    seed: u64,
    policy: SamplerPolicy,
    source: IndexStream,
    target: IndexStream,
}

impl BatchSampler {
    pub fn new(batch_size: usize, seed: u64, policy: SamplerPolicy) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        Ok(Self {
            batch_size,
            seed,
            policy,
            source: IndexStream::new(seed, 0),
            target: IndexStream::new(seed, 1),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn policy(&self) -> SamplerPolicy {
        self.policy
    }

    /// Batches per epoch for domains of sizes `n_source` and `n_target`:
    /// enough to cover the larger domain once.
    pub fn batches_per_epoch(&self, n_source: usize, n_target: usize) -> usize {
        let n = n_source.max(n_target);
        match self.policy {
            SamplerPolicy::DropLast => n / self.batch_size,
            SamplerPolicy::WrapAround => n.div_ceil(self.batch_size),
        }
    }

    /// Discards the rest of the current permutations.
    pub fn start_epoch(&mut self) {
        self.source.end_epoch();
        self.target.end_epoch();
    }

    fn check(&self, n: usize) -> Result<()> {
        if n == 0 {
            return Err(Error::Degenerate("cannot sample from an empty domain".into()));
        }
        if self.policy == SamplerPolicy::DropLast && self.batch_size > n {
            return Err(Error::Config(format!(
                "batch_size {} exceeds domain size {n} under DropLast",
                self.batch_size
            )));
        }
        Ok(())
    }

    /// Next source batch alone; the target stream is left untouched.
    pub fn next_source_batch(&mut self, n_source: usize) -> Result<Vec<usize>> {
        self.check(n_source)?;
        Ok(self.source.take(n_source, self.batch_size, self.policy))
    }

    pub fn next_batch_pair(
        &mut self,
        source: &Dataset,
        target: &Dataset,
    ) -> Result<(Vec<usize>, Vec<usize>)> {
        self.next_index_pair(source.len(), target.len())
    }

    pub fn next_index_pair(
        &mut self,
        n_source: usize,
        n_target: usize,
    ) -> Result<(Vec<usize>, Vec<usize>)> {
        self.check(n_source)?;
        self.check(n_target)?;
        let s = self.source.take(n_source, self.batch_size, self.policy);
        let t = self.target.take(n_target, self.batch_size, self.policy);
        Ok((s, t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn write(dir: &tempfile::TempDir, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn loads_small_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "a.csv",
            "0,1,2,3,4\n1,0.5,0.25,-1,2\n2,9,8,7,6\n",
        );
        let ds = load_dataset(&p, DataFormat::Csv, DomainTag::Source, None).unwrap();
        assert_eq!((ds.len(), ds.dim()), (3, 4));
        assert_eq!(ds.labels().unwrap(), &[0, 1, 2]);
        assert_eq!(ds.class_count(), 3);
        assert_eq!(ds.embeddings()[[1, 2]], -1.0);
    }

    #[test]
    fn empty_csv_is_no_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "e.csv", "");
        let err = load_dataset(&p, DataFormat::Csv, DomainTag::Source, None).unwrap_err();
        assert!(err.to_string().contains("no rows"), "{err}");
    }

    #[test]
    fn inf_value_names_the_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "i.csv", "0,1,2\n1,inf,2\n");
        let err = load_dataset(&p, DataFormat::Csv, DomainTag::Source, None).unwrap_err();
        assert!(matches!(err, Error::Row { row: 1, .. }), "{err}");
    }

    #[test]
    fn label_and_width_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "l.csv", "0,1,2\n3,1,2\n");
        let err = load_dataset(&p, DataFormat::Csv, DomainTag::Source, Some(3)).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { row: 1, label: 3, .. }));

        let p = write(&dir, "w.csv", "0,1,2\n1,1,2,3\n");
        let err = load_dataset(&p, DataFormat::Csv, DomainTag::Source, None).unwrap_err();
        assert!(matches!(err, Error::Row { row: 1, .. }));

        let p = write(&dir, "m.csv", "0,1,2\n1,x,2\n");
        let err = load_dataset(&p, DataFormat::Csv, DomainTag::Source, None).unwrap_err();
        assert!(matches!(err, Error::Row { row: 1, .. }));
    }

    #[test]
    fn unlabeled_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "u.csv", ",1,2\n,3,4\n");
        let ds = load_dataset(&p, DataFormat::Csv, DomainTag::Target, Some(4)).unwrap();
        assert!(!ds.has_labels());
        assert_eq!(ds.class_count(), 4);
    }

    #[test]
    fn raw_truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&2u64.to_le_bytes());
        bytes.extend_from_slice(&2u64.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&1f32.to_le_bytes());
        fs::write(&p, bytes).unwrap();
        let err = load_dataset(&p, DataFormat::RawF32, DomainTag::Source, None).unwrap_err();
        assert!(matches!(err, Error::Row { row: 0, .. }), "{err}");
    }

    #[test]
    fn synth_identity_transform_reproduces_source() {
        let spec = SynthSpec {
            rotation_angle: 0.0,
            shift_vector_norm: 0.0,
            per_class_count: 20,
            ..SynthSpec::default()
        };
        let (source, target) = synth_domain_pair(&spec).unwrap();
        assert_eq!(source.embeddings(), target.embeddings());
        let (fresh, _) = synth_domain_pair(&spec).unwrap();
        assert_eq!(fresh.embeddings(), target.embeddings());
    }

    #[test]
    fn synth_large_shift_separates_domains() {
        let spec = SynthSpec {
            shift_vector_norm: 10.0,
            within_class_stddev: 0.1,
            rotation_angle: 0.0,
            per_class_count: 40,
            ..SynthSpec::default()
        };
        let (source, target) = synth_domain_pair(&spec).unwrap();
        let (s, t) = (source.to_f64(), target.to_f64());
        let mut min = f64::INFINITY;
        for a in s.rows() {
            for b in t.rows() {
                let d = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
                min = min.min(d.sqrt());
            }
        }
        assert!(min > 5.0, "min inter-domain distance {min}");
    }

    #[test]
    fn synth_is_deterministic_and_validates() {
        let spec = SynthSpec {
            per_class_count: 5,
            ..SynthSpec::default()
        };
        let (a, b) = synth_domain_pair(&spec).unwrap();
        let (c, d) = synth_domain_pair(&spec).unwrap();
        assert_eq!(a.embeddings(), c.embeddings());
        assert_eq!(b.embeddings(), d.embeddings());

        let bad = SynthSpec {
            dim: 1,
            rotation_angle: 0.5,
            ..SynthSpec::default()
        };
        assert!(synth_domain_pair(&bad).is_err());
        let flat = SynthSpec {
            dim: 1,
            rotation_angle: 0.0,
            per_class_count: 3,
            ..SynthSpec::default()
        };
        assert!(synth_domain_pair(&flat).is_ok());
    }

    #[test]
    fn exhaustive_batch() {
        let mut s = BatchSampler::new(4, 1, SamplerPolicy::DropLast).unwrap();
        assert_eq!(s.batches_per_epoch(4, 4), 1);
        let (a, b) = s.next_index_pair(4, 4).unwrap();
        assert_eq!(a.iter().copied().collect::<BTreeSet<_>>(), (0..4).collect());
        assert_eq!(b.iter().copied().collect::<BTreeSet<_>>(), (0..4).collect());
    }

    #[test]
    fn drop_last_drops_the_tail() {
        let mut s = BatchSampler::new(2, 3, SamplerPolicy::DropLast).unwrap();
        assert_eq!(s.batches_per_epoch(5, 5), 2);
        s.start_epoch();
        let first: Vec<_> = (0..2).flat_map(|_| s.next_index_pair(5, 5).unwrap().0).collect();
        let distinct: BTreeSet<_> = first.iter().copied().collect();
        assert_eq!(distinct.len(), 4);
        // the next epoch starts a fresh permutation rather than using the tail
        s.start_epoch();
        let second: Vec<_> = (0..2).flat_map(|_| s.next_index_pair(5, 5).unwrap().0).collect();
        assert_eq!(second.iter().copied().collect::<BTreeSet<_>>().len(), 4);
    }

    #[test]
    fn wrap_around_covers_every_index() {
        let mut s = BatchSampler::new(3, 9, SamplerPolicy::WrapAround).unwrap();
        let per_epoch = s.batches_per_epoch(7, 5);
        assert_eq!(per_epoch, 3);
        s.start_epoch();
        let mut seen_s = BTreeSet::new();
        let mut seen_t = BTreeSet::new();
        for _ in 0..per_epoch {
            let (a, b) = s.next_index_pair(7, 5).unwrap();
            assert_eq!(a.len(), b.len());
            seen_s.extend(a);
            seen_t.extend(b);
        }
        assert_eq!(seen_s.len(), 7);
        assert_eq!(seen_t.len(), 5);
    }

    #[test]
    fn sampler_errors_and_determinism() {
        assert!(BatchSampler::new(0, 1, SamplerPolicy::DropLast).is_err());
        let mut s = BatchSampler::new(6, 1, SamplerPolicy::DropLast).unwrap();
        assert!(s.next_index_pair(5, 10).is_err());

        let mut a = BatchSampler::new(3, 77, SamplerPolicy::DropLast).unwrap();
        let mut b = BatchSampler::new(3, 77, SamplerPolicy::DropLast).unwrap();
        for _ in 0..10 {
            assert_eq!(a.next_index_pair(10, 8).unwrap(), b.next_index_pair(10, 8).unwrap());
        }
    }

    #[test]
    fn source_stream_independent_of_target() {
        let mut a = BatchSampler::new(4, 5, SamplerPolicy::DropLast).unwrap();
        let mut b = BatchSampler::new(4, 5, SamplerPolicy::DropLast).unwrap();
        for _ in 0..6 {
            let (s, _) = a.next_index_pair(12, 9).unwrap();
            assert_eq!(s, b.next_source_batch(12).unwrap());
        }
    }

    #[test]
    fn label_reads_are_counted() {
        let spec = SynthSpec {
            per_class_count: 2,
            ..SynthSpec::default()
        };
        let (_, target) = synth_domain_pair(&spec).unwrap();
        let clone = target.clone();
        assert_eq!(target.label_reads(), 0);
        let _ = target.gather(&[0, 1]);
        assert_eq!(target.label_reads(), 0);
        let _ = clone.labels();
        assert_eq!(target.label_reads(), 1);
    }
}
