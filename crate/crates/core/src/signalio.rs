//! Waveform container, file formats, chunk extraction and label handling.
//!
//! Three on-disk formats are supported:
//!
//! * `csv` — optional `key=value` header lines (at minimum `sample_rate_hz=...`)
//!   followed by one amplitude per line,
//! * `jsonl` — one JSON record per line with `sample_rate_hz`, `samples` and
//!   optional `lead`/`meta`,
//! * `rawf32` — little-endian 32-bit floats with no header; a JSON sidecar at
//!   `<path>.json` declaring the sample rate is mandatory.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// ECG lead names. Only lead II is used by the pipeline but files may
/// declare any of the standard leads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Lead {
    I,
    #[default]
    II,
    III,
    AVR,
    AVL,
    AVF,
    V1,
    V2,
    V3,
    V4,
    V5,
    V6,
}

impl fmt::Display for Lead {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Lead::I => "I",
            Lead::II => "II",
            Lead::III => "III",
            Lead::AVR => "aVR",
            Lead::AVL => "aVL",
            Lead::AVF => "aVF",
            Lead::V1 => "V1",
            Lead::V2 => "V2",
            Lead::V3 => "V3",
            Lead::V4 => "V4",
            Lead::V5 => "V5",
            Lead::V6 => "V6",
        };
        f.write_str(s)
    }
}

impl FromStr for Lead {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "I" => Ok(Lead::I),
            "II" => Ok(Lead::II),
            "III" => Ok(Lead::III),
            "AVR" => Ok(Lead::AVR),
            "AVL" => Ok(Lead::AVL),
            "AVF" => Ok(Lead::AVF),
            "V1" => Ok(Lead::V1),
            "V2" => Ok(Lead::V2),
            "V3" => Ok(Lead::V3),
            "V4" => Ok(Lead::V4),
            "V5" => Ok(Lead::V5),
            "V6" => Ok(Lead::V6),
            other => Err(Error::Format(format!("unknown lead name: {other}"))),
        }
    }
}

/// A sampled 1D waveform in millivolts with its provenance metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct EcgTrace {
    pub samples: Vec<f64>,
    pub sample_rate_hz: f64,
    pub lead: Lead,
    pub meta: BTreeMap<String, String>,
    /// True once the trace is known to be NaN-free (set by loading a clean
    /// file or by `preprocess::fill_empty`).
    pub sanitized: bool,
}

impl EcgTrace {
    pub fn new(samples: Vec<f64>, sample_rate_hz: f64) -> Result<Self> {
        if sample_rate_hz <= 0.0 || !sample_rate_hz.is_finite() {
            return Err(Error::Domain(format!(
                "sample rate must be positive, got {sample_rate_hz}"
            )));
        }
        let sanitized = !samples.iter().any(|v| v.is_nan());
        Ok(EcgTrace {
            samples,
            sample_rate_hz,
            lead: Lead::II,
            meta: BTreeMap::new(),
            sanitized,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz
    }

    /// Copy of this trace with different samples, metadata preserved.
    pub fn with_samples(&self, samples: Vec<f64>) -> EcgTrace {
        EcgTrace {
            samples,
            ..self.clone()
        }
    }
}

/// Supported waveform file formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceFormat {
    Csv,
    Jsonl,
    RawF32,
}

impl TraceFormat {
    /// Guess the format from a file extension (`csv`, `jsonl`, anything else
    /// is treated as raw f32).
    pub fn from_path(path: &Path) -> TraceFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => TraceFormat::Csv,
            Some("jsonl") | Some("json") => TraceFormat::Jsonl,
            _ => TraceFormat::RawF32,
        }
    }
}

impl FromStr for TraceFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(TraceFormat::Csv),
            "jsonl" => Ok(TraceFormat::Jsonl),
            "rawf32" => Ok(TraceFormat::RawF32),
            other => Err(Error::Format(format!("unknown trace format: {other}"))),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    sample_rate_hz: f64,
    #[serde(default)]
    lead: Lead,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonlRecord {
    sample_rate_hz: f64,
    #[serde(default)]
    lead: Lead,
    samples: Vec<f64>,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Load a waveform from disk.
///
/// The record id metadata key is populated from the file stem when the file
/// itself does not declare one.
pub fn load_trace(path: &Path, format: TraceFormat) -> Result<EcgTrace> {
    let mut trace = match format {
        TraceFormat::Csv => load_csv(path)?,
        TraceFormat::Jsonl => load_jsonl(path)?,
        TraceFormat::RawF32 => load_rawf32(path)?,
    };
    if trace.samples.is_empty() {
        return Err(Error::EmptyInput(format!("{} has no samples", path.display())));
    }
    if !trace.meta.contains_key("record_id") {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("trace")
            .to_string();
        trace.meta.insert("record_id".into(), stem);
    }
    Ok(trace)
}

fn load_csv(path: &Path) -> Result<EcgTrace> {
    let text = fs::read_to_string(path)?;
    let mut rate: Option<f64> = None;
    let mut lead = Lead::II;
    let mut meta = BTreeMap::new();
    let mut samples = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some((key, value)) = line.split_once('=') {
            match key.trim() {
                "sample_rate_hz" => {
                    rate = Some(value.trim().parse::<f64>().map_err(|_| {
                        Error::Format(format!("bad sample_rate_hz value: {value}"))
                    })?)
                }
                "lead" => lead = value.trim().parse()?,
                other => {
                    meta.insert(other.to_string(), value.trim().to_string());
                }
            }
            continue;
        }
        let v = match line {
            "nan" | "NaN" | "NAN" => f64::NAN,
            _ => line
                .parse::<f64>()
                .map_err(|_| Error::Format(format!("bad sample value: {line}")))?,
        };
        samples.push(v);
    }
    let rate = rate.ok_or_else(|| {
        Error::Format(format!("{} declares no sample_rate_hz header", path.display()))
    })?;
    let mut trace = EcgTrace::new(samples, rate)?;
    trace.lead = lead;
    trace.meta = meta;
    Ok(trace)
}

fn load_jsonl(path: &Path) -> Result<EcgTrace> {
    let text = fs::read_to_string(path)?;
    let line = text
        .lines()
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| Error::EmptyInput(format!("{} is empty", path.display())))?;
    let record: JsonlRecord = serde_json::from_str(line)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut trace = EcgTrace::new(record.samples, record.sample_rate_hz)?;
    trace.lead = record.lead;
    trace.meta = record.meta;
    Ok(trace)
}

fn load_rawf32(path: &Path) -> Result<EcgTrace> {
    let sidecar = sidecar_path(path);
    if !sidecar.exists() {
        return Err(Error::Format(format!(
            "rawf32 file {} has no sidecar {}",
            path.display(),
            sidecar.display()
        )));
    }
    let side: Sidecar = serde_json::from_str(&fs::read_to_string(&sidecar)?)
        .map_err(|e| Error::Format(format!("{}: {e}", sidecar.display())))?;
    let bytes = fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format(format!(
            "{} length {} is not a multiple of 4",
            path.display(),
            bytes.len()
        )));
    }
    let samples: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let mut trace = EcgTrace::new(samples, side.sample_rate_hz)?;
    trace.lead = side.lead;
    trace.meta = side.meta;
    Ok(trace)
}

/// Write a waveform to disk; the rawf32 format also writes its JSON sidecar.
pub fn save_trace(trace: &EcgTrace, path: &Path, format: TraceFormat) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    match format {
        TraceFormat::Csv => {
            let mut out = String::new();
            out.push_str(&format!("sample_rate_hz={}\n", trace.sample_rate_hz));
            out.push_str(&format!("lead={}\n", trace.lead));
            for (k, v) in &trace.meta {
                out.push_str(&format!("{k}={v}\n"));
            }
            for v in &trace.samples {
                if v.is_nan() {
                    out.push_str("nan\n");
                } else {
                    out.push_str(&format!("{v}\n"));
                }
            }
            fs::write(path, out)?;
        }
        TraceFormat::Jsonl => {
            let record = JsonlRecord {
                sample_rate_hz: trace.sample_rate_hz,
                lead: trace.lead,
                samples: trace.samples.clone(),
                meta: trace.meta.clone(),
            };
            let mut line = serde_json::to_string(&record)?;
            line.push('\n');
            fs::write(path, line)?;
        }
        TraceFormat::RawF32 => {
            let mut file = fs::File::create(path)?;
            for v in &trace.samples {
                file.write_all(&(*v as f32).to_le_bytes())?;
            }
            let side = Sidecar {
                sample_rate_hz: trace.sample_rate_hz,
                lead: trace.lead,
                meta: trace.meta.clone(),
            };
            fs::write(sidecar_path(path), serde_json::to_string_pretty(&side)?)?;
        }
    }
    Ok(())
}

/// Ordered fixed-length windows extracted from one trace.
#[derive(Debug, Clone)]
pub struct ChunkSet {
    pub chunks: Vec<EcgTrace>,
    pub window_s: f64,
    pub overlap_s: f64,
    pub source_id: String,
}

impl ChunkSet {
    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn chunk_id(&self, index: usize) -> String {
        format!("{}_{index:04}", self.source_id)
    }
}

/// Slice a trace into windows of `window_s` seconds whose starts are
/// `window_s - overlap_s` apart. A trailing remainder shorter than the
/// window is discarded.
pub fn extract_chunks(trace: &EcgTrace, window_s: f64, overlap_s: f64) -> Result<ChunkSet> {
    if !(overlap_s >= 0.0 && overlap_s < window_s) {
        return Err(Error::Domain(format!(
            "need 0 <= overlap < window, got overlap {overlap_s} window {window_s}"
        )));
    }
    let n = trace.samples.len();
    let window_n = (window_s * trace.sample_rate_hz).round() as usize;
    if window_n == 0 {
        return Err(Error::Domain(format!("window of {window_s} s spans no samples")));
    }
    if n < window_n {
        return Err(Error::TooShort(format!(
            "trace of {:.3} s is shorter than the {window_s} s window",
            trace.duration_s()
        )));
    }
    let stride_n = (((window_s - overlap_s) * trace.sample_rate_hz).round() as usize).max(1);
    let source_id = trace
        .meta
        .get("record_id")
        .cloned()
        .unwrap_or_else(|| "trace".into());

    let mut chunks = Vec::new();
    let mut start = 0usize;
    while start + window_n <= n {
        let mut chunk = trace.with_samples(trace.samples[start..start + window_n].to_vec());
        chunk
            .meta
            .insert("chunk_index".into(), chunks.len().to_string());
        chunk.meta.insert("start_sample".into(), start.to_string());
        chunks.push(chunk);
        start += stride_n;
    }
    Ok(ChunkSet {
        chunks,
        window_s,
        overlap_s,
        source_id,
    })
}

/// Diagnostic class assigned to one chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChunkClass {
    Normal,
    Abnormal,
    Unsuitable,
}

/// Label attached to one chunk by id. `raw_category` keeps the original
/// (multi-class) annotation even though exports collapse to binary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChunkLabel {
    pub chunk_id: String,
    pub class: ChunkClass,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_category: Option<String>,
}

/// One line of a dataset manifest. Paths are relative to the manifest file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub chunk: PathBuf,
    pub class: String,
    pub split: String,
}

/// What `export_dataset` produced.
#[derive(Debug, Clone)]
pub struct ExportSummary {
    pub manifest_path: PathBuf,
    pub train_count: usize,
    pub val_count: usize,
    pub excluded_unsuitable: usize,
}

/// Write labeled chunks to `out_dir` as rawf32 files plus a JSONL manifest.
///
/// `split` is the train fraction. Unsuitable chunks are excluded (counted in
/// the summary); any other non-Normal class is collapsed to `abnormal`. The
/// shuffle that assigns splits is fully determined by `seed`.
pub fn export_dataset(
    chunk_sets: &[ChunkSet],
    labels: &[ChunkLabel],
    split: f64,
    seed: u64,
    out_dir: &Path,
) -> Result<ExportSummary> {
    if !(split > 0.0 && split < 1.0) {
        return Err(Error::Domain(format!("split must be in (0,1), got {split}")));
    }
    fs::create_dir_all(out_dir)?;
    let by_id: BTreeMap<&str, &ChunkLabel> =
        labels.iter().map(|l| (l.chunk_id.as_str(), l)).collect();

    // (chunk_id, trace, class) for every exportable chunk, in source order
    let mut eligible: Vec<(String, &EcgTrace, ChunkClass)> = Vec::new();
    let mut excluded = 0usize;
    for set in chunk_sets {
        for (i, chunk) in set.chunks.iter().enumerate() {
            let id = set.chunk_id(i);
            let label = by_id
                .get(id.as_str())
                .ok_or_else(|| Error::MissingLabel(id.clone()))?;
            match label.class {
                ChunkClass::Unsuitable => excluded += 1,
                class => eligible.push((id, chunk, class)),
            }
        }
    }
    if excluded > 0 {
        log::warn!("export: excluded {excluded} unsuitable chunk(s)");
    }

    let mut order: Vec<usize> = (0..eligible.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let train_count = (eligible.len() as f64 * split).round() as usize;
    let mut is_train = vec![false; eligible.len()];
    for &idx in order.iter().take(train_count) {
        is_train[idx] = true;
    }

    let manifest_path = out_dir.join("manifest.jsonl");
    let mut manifest = String::new();
    for (i, (id, chunk, class)) in eligible.iter().enumerate() {
        let file = PathBuf::from(format!("{id}.f32"));
        save_trace(chunk, &out_dir.join(&file), TraceFormat::RawF32)?;
        let entry = ManifestEntry {
            chunk: file,
            class: match class {
                ChunkClass::Normal => "normal".into(),
                _ => "abnormal".into(),
            },
            split: if is_train[i] { "train".into() } else { "val".into() },
        };
        manifest.push_str(&serde_json::to_string(&entry)?);
        manifest.push('\n');
    }
    fs::write(&manifest_path, manifest)?;
    Ok(ExportSummary {
        manifest_path,
        train_count,
        val_count: eligible.len() - train_count,
        excluded_unsuitable: excluded,
    })
}

/// Read a manifest written by [`export_dataset`].
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        entries.push(
            serde_json::from_str(line)
                .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?,
        );
    }
    Ok(entries)
}
