//! Multi-subject dataset, fixed-length trial segmentation and file I/O.
//!
//! A dataset on disk is a JSON manifest plus one matrix file per signal:
//!
//! ```json
//! {
//!   "views": [{"id": "s01", "path": "s01.csv"}, {"id": "s02", "path": "s02.csv"}],
//!   "stimulus": "envelope.csv",
//!   "sample_rate_hz": 8.0
//! }
//! ```
//!
//! Paths are resolved relative to the manifest. Matrix files ending in
//! `.bin` or `.raw` use the raw layout (little-endian `u64` rows, `u64`
//! cols, then `rows * cols` little-endian `f64` values in row-major order);
//! everything else is read as headerless CSV with one time sample per row.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One subject's (possibly lag-embedded) signal block, `T x M`.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewMatrix {
    pub data: DMatrix<f64>,
    pub view_id: String,
}

impl ViewMatrix {
    pub fn new(data: DMatrix<f64>, view_id: impl Into<String>) -> Result<Self> {
        let view_id = view_id.into();
        if data.ncols() == 0 {
            return Err(Error::InvalidArgument(format!(
                "view {view_id} has no columns"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "view {view_id} contains non-finite entries"
            )));
        }
        Ok(Self { data, view_id })
    }

    pub fn n_samples(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }
}

/// Synchronized recordings of `K >= 2` subjects plus an optional stimulus.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    views: Vec<DMatrix<f64>>,
    stimulus: Option<DMatrix<f64>>,
    sample_rate_hz: f64,
    labels: Vec<String>,
}

impl Dataset {
    pub fn new(
        views: Vec<DMatrix<f64>>,
        stimulus: Option<DMatrix<f64>>,
        sample_rate_hz: f64,
        labels: Vec<String>,
    ) -> Result<Self> {
        if views.len() < 2 {
            return Err(Error::InvalidDataset(format!(
                "need at least 2 views, got {}",
                views.len()
            )));
        }
        if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
            return Err(Error::InvalidDataset(format!(
                "sample rate must be positive, got {sample_rate_hz}"
            )));
        }
        if labels.len() != views.len() {
            return Err(Error::InvalidDataset(format!(
                "{} labels for {} views",
                labels.len(),
                views.len()
            )));
        }
        let t = views[0].nrows();
        for (v, label) in views.iter().zip(&labels) {
            if v.nrows() != t {
                return Err(Error::InconsistentSamples {
                    what: format!("view {label}"),
                    expected: t,
                    found: v.nrows(),
                });
            }
            if v.ncols() == 0 {
                return Err(Error::InvalidDataset(format!("view {label} has no channels")));
            }
        }
        if let Some(s) = &stimulus {
            if s.nrows() != t {
                return Err(Error::InconsistentSamples {
                    what: "stimulus".into(),
                    expected: t,
                    found: s.nrows(),
                });
            }
            if s.ncols() == 0 {
                return Err(Error::InvalidDataset("stimulus has no columns".into()));
            }
        }
        Ok(Self {
            views,
            stimulus,
            sample_rate_hz,
            labels,
        })
    }

    /// Builds a dataset with labels `s01`, `s02`, ...
    pub fn with_default_labels(
        views: Vec<DMatrix<f64>>,
        stimulus: Option<DMatrix<f64>>,
        sample_rate_hz: f64,
    ) -> Result<Self> {
        let labels = (1..=views.len()).map(|i| format!("s{i:02}")).collect();
        Self::new(views, stimulus, sample_rate_hz, labels)
    }

    pub fn views(&self) -> &[DMatrix<f64>] {
        &self.views
    }

    pub fn stimulus(&self) -> Option<&DMatrix<f64>> {
        self.stimulus.as_ref()
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn n_views(&self) -> usize {
        self.views.len()
    }

    pub fn n_samples(&self) -> usize {
        self.views[0].nrows()
    }

    /// Same dataset restricted to the listed subjects, in the given order.
    pub fn select_views(&self, indices: &[usize]) -> Result<Self> {
        let mut views = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let v = self.views.get(i).ok_or_else(|| {
                Error::InvalidArgument(format!("view index {i} out of range"))
            })?;
            views.push(v.clone());
            labels.push(self.labels[i].clone());
        }
        Self::new(views, self.stimulus.clone(), self.sample_rate_hz, labels)
    }

    /// Returns a copy with every signal replaced by `f(signal)`.
    pub fn map_signals<F>(&self, mut f: F) -> Result<Self>
    where
        F: FnMut(&DMatrix<f64>, &str) -> Result<DMatrix<f64>>,
    {
        let views = self
            .views
            .iter()
            .zip(&self.labels)
            .map(|(v, l)| f(v, l))
            .collect::<Result<Vec<_>>>()?;
        let stimulus = self
            .stimulus
            .as_ref()
            .map(|s| f(s, "stimulus"))
            .transpose()?;
        Self::new(views, stimulus, self.sample_rate_hz, self.labels.clone())
    }

    fn rows(&self, start: usize, len: usize) -> Self {
        Self {
            views: self.views.iter().map(|v| v.rows(start, len).into_owned()).collect(),
            stimulus: self.stimulus.as_ref().map(|s| s.rows(start, len).into_owned()),
            sample_rate_hz: self.sample_rate_hz,
            labels: self.labels.clone(),
        }
    }
}

/// Equal-length, disjoint, contiguous segments of one source recording.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialSet {
    pub trials: Vec<Dataset>,
    pub origin_offsets: Vec<usize>,
    pub trial_len: usize,
}

impl TrialSet {
    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }
}

/// Cuts `ds` into `floor(T / T_trial)` trials; trailing samples are dropped.
pub fn segment_trials(ds: &Dataset, trial_len_s: f64) -> Result<TrialSet> {
    if !(trial_len_s.is_finite() && trial_len_s > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "trial length must be positive, got {trial_len_s}"
        )));
    }
    let exact = trial_len_s * ds.sample_rate_hz();
    let trial_len = exact.round();
    if trial_len < 1.0 || (exact - trial_len).abs() > 1e-9 * exact.max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "trial length {trial_len_s} s at {} Hz is not a whole number of samples",
            ds.sample_rate_hz()
        )));
    }
    let trial_len = trial_len as usize;
    let t = ds.n_samples();
    if trial_len > t {
        return Err(Error::InvalidArgument(format!(
            "trial length {trial_len} samples exceeds recording length {t}"
        )));
    }
    let n = t / trial_len;
    let origin_offsets: Vec<usize> = (0..n).map(|i| i * trial_len).collect();
    let trials = origin_offsets
        .iter()
        .map(|&off| ds.rows(off, trial_len))
        .collect();
    Ok(TrialSet {
        trials,
        origin_offsets,
        trial_len,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixFormat {
    Csv,
    Raw,
}

impl MatrixFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin") | Some("raw") => MatrixFormat::Raw,
            _ => MatrixFormat::Csv,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            MatrixFormat::Csv => "csv",
            MatrixFormat::Raw => "bin",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestView {
    id: String,
    path: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    views: Vec<ManifestView>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stimulus: Option<String>,
    sample_rate_hz: f64,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    match MatrixFormat::from_path(path) {
        MatrixFormat::Csv => read_csv_matrix(path),
        MatrixFormat::Raw => read_raw_matrix(path),
    }
}

fn read_csv_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(source) => Error::Io {
                path: path.to_path_buf(),
                source,
            },
            other => Error::Parse {
                file: path.to_path_buf(),
                row: 0,
                msg: format!("{other:?}"),
            },
        })?;
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0usize;
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Parse {
            file: path.to_path_buf(),
            row,
            msg: e.to_string(),
        })?;
        let n = record.len();
        match cols {
            None => cols = Some(n),
            Some(c) if c != n => {
                return Err(Error::Parse {
                    file: path.to_path_buf(),
                    row,
                    msg: format!("expected {c} columns, found {n}"),
                })
            }
            _ => {}
        }
        for field in record.iter() {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                file: path.to_path_buf(),
                row,
                msg: format!("non-numeric cell {field:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    file: path.to_path_buf(),
                    row,
                    msg: format!("non-finite cell {field:?}"),
                });
            }
            values.push(v);
        }
        rows += 1;
    }
    let cols = cols.unwrap_or(0);
    if rows == 0 || cols == 0 {
        return Err(Error::Parse {
            file: path.to_path_buf(),
            row: 0,
            msg: "empty matrix file".into(),
        });
    }
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

fn read_raw_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let parse_err = |msg: String| Error::Parse {
        file: path.to_path_buf(),
        row: 0,
        msg,
    };
    if bytes.len() < 16 {
        return Err(parse_err("raw header truncated".into()));
    }
    let rows = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| parse_err("raw header dimensions overflow".into()))?;
    if bytes.len() - 16 != expected {
        return Err(parse_err(format!(
            "raw payload is {} bytes, header declares {rows}x{cols}",
            bytes.len() - 16
        )));
    }
    if rows == 0 || cols == 0 {
        return Err(parse_err("empty matrix file".into()));
    }
    let values: Vec<f64> = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Parse {
            file: path.to_path_buf(),
            row: i / cols + 1,
            msg: "non-finite value".into(),
        });
    }
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    match MatrixFormat::from_path(path) {
        MatrixFormat::Csv => {
            for r in 0..m.nrows() {
                let line = (0..m.ncols())
                    .map(|c| format!("{:?}", m[(r, c)]))
                    .collect::<Vec<_>>()
                    .join(",");
                writeln!(w, "{line}").map_err(io_err(path))?;
            }
        }
        MatrixFormat::Raw => {
            w.write_all(&(m.nrows() as u64).to_le_bytes())
                .map_err(io_err(path))?;
            w.write_all(&(m.ncols() as u64).to_le_bytes())
                .map_err(io_err(path))?;
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    w.write_all(&m[(r, c)].to_le_bytes()).map_err(io_err(path))?;
                }
            }
        }
    }
    w.flush().map_err(io_err(path))
}

/// Loads a dataset from a manifest; views keep the manifest order.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path).map_err(io_err(manifest_path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: manifest_path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let resolve = |p: &str| -> PathBuf { base.join(p) };

    let mut views = Vec::with_capacity(manifest.views.len());
    let mut labels = Vec::with_capacity(manifest.views.len());
    let mut expected_rows: Option<(usize, &str)> = None;
    for entry in &manifest.views {
        let path = resolve(&entry.path);
        let m = read_matrix(&path)?;
        match expected_rows {
            None => expected_rows = Some((m.nrows(), &entry.id)),
            Some((t, _)) if t != m.nrows() => {
                return Err(Error::InconsistentSamples {
                    what: format!("view {} ({})", entry.id, path.display()),
                    expected: t,
                    found: m.nrows(),
                })
            }
            _ => {}
        }
        views.push(m);
        labels.push(entry.id.clone());
    }
    let stimulus = manifest
        .stimulus
        .as_deref()
        .map(|p| read_matrix(&resolve(p)))
        .transpose()?;
    Dataset::new(views, stimulus, manifest.sample_rate_hz, labels).map_err(|e| match e {
        Error::InvalidDataset(msg) => Error::Manifest {
            path: manifest_path.to_path_buf(),
            msg,
        },
        other => other,
    })
}

/// Writes `manifest.json` plus one matrix file per signal into `dir`.
/// Returns the manifest path.
pub fn write_dataset(ds: &Dataset, dir: &Path, format: MatrixFormat) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let ext = format.extension();
    let mut entries = Vec::with_capacity(ds.n_views());
    for (v, id) in ds.views().iter().zip(ds.labels()) {
        let file = format!("{id}.{ext}");
        write_matrix(&dir.join(&file), v)?;
        entries.push(ManifestView {
            id: id.clone(),
            path: file,
        });
    }
    let stimulus = match ds.stimulus() {
        Some(s) => {
            let file = format!("stimulus.{ext}");
            write_matrix(&dir.join(&file), s)?;
            Some(file)
        }
        None => None,
    };
    let manifest = Manifest {
        views: entries,
        stimulus,
        sample_rate_hz: ds.sample_rate_hz(),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(rows: usize, cols: usize, offset: f64) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |r, c| offset + r as f64 * 0.5 - c as f64 * 1.25)
    }

    fn write_csv(dir: &Path, name: &str, m: &DMatrix<f64>) {
        write_matrix(&dir.join(name), m).unwrap();
    }

    #[test]
    fn loads_three_views_without_stimulus() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..3 {
            write_csv(dir.path(), &format!("v{i}.csv"), &ramp(480, 4, i as f64));
        }
        let manifest = r#"{"views":[{"id":"a","path":"v0.csv"},{"id":"b","path":"v1.csv"},{"id":"c","path":"v2.csv"}],"sample_rate_hz":8}"#;
        fs::write(dir.path().join("m.json"), manifest).unwrap();
        let ds = load_dataset(&dir.path().join("m.json")).unwrap();
        assert_eq!(ds.n_views(), 3);
        assert_eq!(ds.n_samples(), 480);
        assert!(ds.stimulus().is_none());
        assert_eq!(ds.labels(), ["a", "b", "c"]);
        assert_eq!(ds.views()[2], ramp(480, 4, 2.0));
    }

    #[test]
    fn loads_nineteen_views_with_stimulus() {
        let dir = tempfile::tempdir().unwrap();
        let views: Vec<_> = (0..19).map(|i| ramp(32, 2, i as f64)).collect();
        let ds = Dataset::with_default_labels(views, Some(ramp(32, 1, 9.0)), 8.0).unwrap();
        let path = write_dataset(&ds, dir.path(), MatrixFormat::Csv).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back.n_views(), 19);
        assert!(back.stimulus().is_some());
    }

    #[test]
    fn rejects_inconsistent_sample_count() {
        let dir = tempfile::tempdir().unwrap();
        write_csv(dir.path(), "a.csv", &ramp(480, 2, 0.0));
        write_csv(dir.path(), "b.csv", &ramp(479, 2, 0.0));
        let manifest = r#"{"views":[{"id":"a","path":"a.csv"},{"id":"b","path":"b.csv"}],"sample_rate_hz":8}"#;
        fs::write(dir.path().join("m.json"), manifest).unwrap();
        let err = load_dataset(&dir.path().join("m.json")).unwrap_err();
        assert!(err.to_string().contains("inconsistent sample count"), "{err}");
    }

    #[test]
    fn non_numeric_cell_names_file_and_row() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.csv"), "1,2\n3,x\n").unwrap();
        let err = read_matrix(&dir.path().join("a.csv")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("a.csv") && msg.contains("row 2"), "{msg}");
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = r#"{"views":[{"id":"a","path":"nope.csv"},{"id":"b","path":"nope2.csv"}],"sample_rate_hz":8}"#;
        fs::write(dir.path().join("m.json"), manifest).unwrap();
        let err = load_dataset(&dir.path().join("m.json")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn round_trip_is_bit_exact_in_both_formats() {
        let views = vec![
            DMatrix::from_fn(7, 3, |r, c| ((r * 3 + c) as f64).sin() * 1e-7 + 1.0 / 3.0),
            DMatrix::from_fn(7, 2, |r, c| ((r + c) as f64).exp() * 1e200),
        ];
        let stim = DMatrix::from_fn(7, 1, |r, _| 0.1 * r as f64 - f64::EPSILON);
        let ds = Dataset::with_default_labels(views, Some(stim), 8.0).unwrap();
        for format in [MatrixFormat::Csv, MatrixFormat::Raw] {
            let dir = tempfile::tempdir().unwrap();
            let path = write_dataset(&ds, dir.path(), format).unwrap();
            let back = load_dataset(&path).unwrap();
            assert_eq!(back, ds);
        }
    }

    #[test]
    fn segments_exact_fit() {
        let ds = Dataset::with_default_labels(vec![ramp(480, 2, 0.0), ramp(480, 2, 1.0)], None, 8.0)
            .unwrap();
        let ts = segment_trials(&ds, 60.0).unwrap();
        assert_eq!(ts.len(), 1);
        assert_eq!(ts.trial_len, 480);
    }

    #[test]
    fn segments_drop_remainder() {
        let ds =
            Dataset::with_default_labels(vec![ramp(1000, 1, 0.0), ramp(1000, 1, 1.0)], None, 8.0)
                .unwrap();
        let ts = segment_trials(&ds, 60.0).unwrap();
        assert_eq!(ts.len(), 2);
        assert_eq!(ts.origin_offsets, vec![0, 480]);
        assert_eq!(1000 - ts.len() * ts.trial_len, 40);
    }

    #[test]
    fn segments_reconstruct_source() {
        let t = 3 * 60 * 8;
        let ds = Dataset::with_default_labels(
            vec![ramp(t, 2, 0.0), ramp(t, 3, 5.0)],
            Some(ramp(t, 1, -1.0)),
            8.0,
        )
        .unwrap();
        let ts = segment_trials(&ds, 60.0).unwrap();
        assert_eq!(ts.origin_offsets, vec![0, 480, 960]);
        for k in 0..2 {
            let mut rebuilt = Vec::new();
            for trial in &ts.trials {
                let v = &trial.views()[k];
                for r in 0..v.nrows() {
                    rebuilt.extend(v.row(r).iter().copied());
                }
            }
            let src = &ds.views()[k];
            let expected: Vec<f64> = (0..src.nrows())
                .flat_map(|r| src.row(r).iter().copied().collect::<Vec<_>>())
                .collect();
            assert_eq!(rebuilt, expected);
        }
    }

    #[test]
    fn trial_longer_than_recording_fails() {
        let ds = Dataset::with_default_labels(vec![ramp(100, 1, 0.0), ramp(100, 1, 1.0)], None, 8.0)
            .unwrap();
        assert!(segment_trials(&ds, 60.0).is_err());
        assert!(segment_trials(&ds, 0.01).is_err());
    }

    #[test]
    fn dataset_requires_two_views() {
        assert!(Dataset::with_default_labels(vec![ramp(10, 1, 0.0)], None, 8.0).is_err());
        assert!(Dataset::with_default_labels(vec![ramp(10, 1, 0.0); 2], None, 0.0).is_err());
    }
}
