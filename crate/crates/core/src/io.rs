//! File formats: BVTF tensors, checkpoint containers and CSV tables.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use zip::write::SimpleFileOptions;
use zip::{CompressionMethod, ZipArchive, ZipWriter};

use crate::context::{ContextConfig, ContextTensor};
use crate::detector::{Event, EventDetectionFunction, EventList};
use crate::error::{Error, Result};
use crate::evaluator::{PrCurve, TimelineCell};
use crate::frontend::{FrontendConfig, Kind, TimeFrequencyMatrix};
use crate::network::{DetectorParams, Formulation, Geometry, InputNorm, Tensor, TrainingHistory, Weights, PARAM_NAMES};

pub const BVTF_MAGIC: &[u8; 4] = b"BVTF";
pub const BVTF_VERSION: u32 = 1;
pub const CHECKPOINT_FORMAT: &str = "robust-sed-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BvtfHeader {
    version: u32,
    dtype: String,
    shape: Vec<usize>,
    axes: Vec<String>,
    #[serde(default)]
    metadata: Value,
}

/// A named-axis f32 tensor with free-form metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub shape: Vec<usize>,
    pub axes: Vec<String>,
    pub metadata: Value,
    pub data: Vec<f32>,
}

impl TensorFile {
    pub fn new(shape: Vec<usize>, axes: &[&str], metadata: Value, data: Vec<f32>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() || axes.len() != shape.len() {
            return Err(Error::mismatch(&shape, (axes.len(), data.len())));
        }
        Ok(Self { shape, axes: axes.iter().map(|s| s.to_string()).collect(), metadata, data })
    }

    fn meta_f64(&self, key: &str) -> Result<f64> {
        self.metadata
            .get(key)
            .and_then(Value::as_f64)
            .ok_or_else(|| Error::UnsupportedFormat(format!("missing metadata field {key}")))
    }

    fn expect_axes(&self, axes: &[&str]) -> Result<()> {
        if self.axes != axes {
            return Err(Error::UnsupportedFormat(format!("expected axes {axes:?}, found {:?}", self.axes)));
        }
        Ok(())
    }
}

fn unsupported(msg: impl Into<String>) -> Error {
    Error::UnsupportedFormat(msg.into())
}

pub fn encode_tensor(t: &TensorFile) -> Result<Vec<u8>> {
    let header = BvtfHeader {
        version: BVTF_VERSION,
        dtype: "f32".into(),
        shape: t.shape.clone(),
        axes: t.axes.clone(),
        metadata: t.metadata.clone(),
    };
    let h = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + h.len() + 4 * t.data.len());
    out.extend_from_slice(BVTF_MAGIC);
    out.extend_from_slice(&(h.len() as u32).to_le_bytes());
    out.extend_from_slice(&h);
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<TensorFile> {
    if bytes.len() < 8 || &bytes[..4] != BVTF_MAGIC {
        return Err(unsupported("bad BVTF magic"));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = bytes.get(8..8 + hlen).ok_or_else(|| unsupported("truncated BVTF header"))?;
    let header: BvtfHeader =
        serde_json::from_slice(body).map_err(|e| unsupported(format!("BVTF header: {e}")))?;
    if header.version != BVTF_VERSION {
        return Err(unsupported(format!("BVTF version {} (expected {BVTF_VERSION})", header.version)));
    }
    if header.dtype != "f32" {
        return Err(unsupported(format!("BVTF dtype {}", header.dtype)));
    }
    let n: usize = header.shape.iter().product();
    let payload = &bytes[8 + hlen..];
    if payload.len() != 4 * n {
        return Err(unsupported(format!("BVTF payload has {} bytes, expected {}", payload.len(), 4 * n)));
    }
    if header.axes.len() != header.shape.len() {
        return Err(unsupported("BVTF axes do not match shape"));
    }
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(TensorFile { shape: header.shape, axes: header.axes, metadata: header.metadata, data })
}

/// Writes via a temporary sibling so a failed write leaves no partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_tensor(path: impl AsRef<Path>, t: &TensorFile) -> Result<()> {
    write_atomic(path.as_ref(), &encode_tensor(t)?)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<TensorFile> {
    decode_tensor(&std::fs::read(path)?)
}

pub fn features_to_tensor(m: &TimeFrequencyMatrix) -> TensorFile {
    TensorFile {
        shape: vec![m.n_frames, m.n_bands],
        axes: vec!["frame".into(), "band".into()],
        metadata: json!({
            "kind": m.kind,
            "sample_rate": m.sample_rate,
            "hop_length": m.hop_length,
            "band_edges": m.band_edges,
        }),
        data: m.values.iter().map(|&v| v as f32).collect(),
    }
}

pub fn tensor_to_features(t: &TensorFile) -> Result<TimeFrequencyMatrix> {
    t.expect_axes(&["frame", "band"])?;
    let kind: Kind = serde_json::from_value(t.metadata.get("kind").cloned().unwrap_or(Value::Null))
        .map_err(|e| unsupported(format!("feature kind: {e}")))?;
    let band_edges: Vec<(f64, f64)> =
        serde_json::from_value(t.metadata.get("band_edges").cloned().unwrap_or(Value::Null))
            .map_err(|e| unsupported(format!("band edges: {e}")))?;
    Ok(TimeFrequencyMatrix {
        values: t.data.iter().map(|&v| v as f64).collect(),
        n_frames: t.shape[0],
        n_bands: t.shape[1],
        sample_rate: t.meta_f64("sample_rate")? as u32,
        hop_length: t.meta_f64("hop_length")? as usize,
        band_edges,
        kind,
    })
}

pub fn context_to_tensor(c: &ContextTensor) -> TensorFile {
    TensorFile {
        shape: vec![c.n_slices, c.n_quantiles, c.n_bands],
        axes: vec!["slice".into(), "quantile".into(), "band".into()],
        metadata: json!({ "levels": c.levels, "slice_period": c.slice_period, "window": c.window }),
        data: c.values.iter().map(|&v| v as f32).collect(),
    }
}

pub fn tensor_to_context(t: &TensorFile) -> Result<ContextTensor> {
    t.expect_axes(&["slice", "quantile", "band"])?;
    let levels: Vec<f64> = serde_json::from_value(t.metadata.get("levels").cloned().unwrap_or(Value::Null))
        .map_err(|e| unsupported(format!("quantile levels: {e}")))?;
    Ok(ContextTensor {
        values: t.data.iter().map(|&v| v as f64).collect(),
        n_slices: t.shape[0],
        n_quantiles: t.shape[1],
        n_bands: t.shape[2],
        slice_period: t.meta_f64("slice_period")?,
        window: t.meta_f64("window")?,
        levels,
    })
}

pub fn edf_to_tensor(e: &EventDetectionFunction) -> TensorFile {
    TensorFile {
        shape: vec![e.values.len()],
        axes: vec!["frame".into()],
        metadata: json!({ "hop": e.hop, "start_time": e.start_time }),
        data: e.values.iter().map(|&v| v as f32).collect(),
    }
}

pub fn tensor_to_edf(t: &TensorFile) -> Result<EventDetectionFunction> {
    t.expect_axes(&["frame"])?;
    Ok(EventDetectionFunction {
        values: t.data.iter().map(|&v| v as f64).collect(),
        hop: t.meta_f64("hop")?,
        start_time: t.meta_f64("start_time")?,
    })
}

/// A trained detector together with the feature settings it expects.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: DetectorParams,
    pub frontend: FrontendConfig,
    pub context: ContextConfig,
    pub seed: u64,
    pub history: TrainingHistory,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    formulation: Formulation,
    geometry: Geometry,
    input_norm: InputNorm,
    frontend: FrontendConfig,
    context: ContextConfig,
    seed: u64,
    tensors: Vec<String>,
    #[serde(default)]
    history: TrainingHistory,
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    ck.params.validate()?;
    let tmp = path.with_extension("partial");
    {
        let mut zip = ZipWriter::new(BufWriter::new(File::create(&tmp)?));
        let opts = SimpleFileOptions::default().compression_method(CompressionMethod::Stored);
        let named: Vec<(&str, &Tensor)> = ck.params.weights.named().filter(|(_, t)| !t.is_empty()).collect();
        let manifest = Manifest {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            formulation: ck.params.formulation,
            geometry: ck.params.geometry,
            input_norm: ck.params.input_norm,
            frontend: ck.frontend,
            context: ck.context.clone(),
            seed: ck.seed,
            tensors: named.iter().map(|(n, _)| n.to_string()).collect(),
            history: ck.history.clone(),
        };
        zip.start_file(MANIFEST, opts)?;
        zip.write_all(&serde_json::to_vec_pretty(&manifest)?)?;
        for (name, t) in named {
            let axes: Vec<String> = (0..t.shape.len()).map(|i| format!("d{i}")).collect();
            let tf = TensorFile {
                shape: t.shape.clone(),
                axes,
                metadata: json!({ "name": name }),
                data: t.data.iter().map(|&v| v as f32).collect(),
            };
            zip.start_file(format!("tensors/{name}.bvtf"), opts)?;
            zip.write_all(&encode_tensor(&tf)?)?;
        }
        zip.finish()?.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut zip = ZipArchive::new(File::open(path)?)?;
    let mut buf = Vec::new();
    zip.by_name(MANIFEST)?.read_to_end(&mut buf)?;
    let manifest: Manifest =
        serde_json::from_slice(&buf).map_err(|e| unsupported(format!("checkpoint manifest: {e}")))?;
    if manifest.format != CHECKPOINT_FORMAT || manifest.version != CHECKPOINT_VERSION {
        return Err(unsupported(format!("checkpoint {} v{}", manifest.format, manifest.version)));
    }
    let mut weights = Weights::zeros(&manifest.geometry, manifest.formulation);
    for t in weights.tensors_mut() {
        *t = Tensor::empty();
    }
    for name in &manifest.tensors {
        let idx = PARAM_NAMES
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| unsupported(format!("unknown tensor {name}")))?;
        buf.clear();
        zip.by_name(&format!("tensors/{name}.bvtf"))?.read_to_end(&mut buf)?;
        let tf = decode_tensor(&buf)?;
        *weights.tensors_mut()[idx] = Tensor { shape: tf.shape, data: tf.data.iter().map(|&v| v as f64).collect() };
    }
    let params = DetectorParams {
        geometry: manifest.geometry,
        formulation: manifest.formulation,
        input_norm: manifest.input_norm,
        weights,
    };
    params.validate()?;
    Ok(Checkpoint {
        params,
        frontend: manifest.frontend,
        context: manifest.context,
        seed: manifest.seed,
        history: manifest.history,
    })
}

fn csv_error(e: csv::Error) -> Error {
    Error::InvalidArgument(format!("csv: {e}"))
}

/// `time_sec,confidence` with 3 and 6 decimals.
pub fn write_detections(path: impl AsRef<Path>, events: &EventList) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record(["time_sec", "confidence"]).map_err(csv_error)?;
    for e in &events.events {
        w.write_record([format!("{:.3}", e.time), format!("{:.6}", e.confidence)]).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// `time_sec,freq_hz,sensor_id` (frequency column left empty when unknown).
pub fn write_references(path: impl AsRef<Path>, events: &EventList) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record(["time_sec", "freq_hz", "sensor_id"]).map_err(csv_error)?;
    let sensor = events.sensor.clone().unwrap_or_default();
    for e in &events.events {
        let f = e.freq_hz.map(|f| format!("{f:.1}")).unwrap_or_default();
        w.write_record([format!("{:.6}", e.time), f, sensor.clone()]).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads detection or annotation CSVs: `time_sec` plus any of
/// `confidence`, `freq_hz`, `sensor_id`. Missing confidences are 1.
pub fn read_events(path: impl AsRef<Path>) -> Result<EventList> {
    let path = path.as_ref();
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path).map_err(csv_error)?;
    let headers = r.headers().map_err(csv_error)?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let t_col = col("time_sec")
        .ok_or_else(|| Error::InvalidArgument(format!("{}: missing time_sec column", path.display())))?;
    let (c_col, f_col, s_col) = (col("confidence"), col("freq_hz"), col("sensor_id"));
    let parse = |s: &str, what: &str| -> Result<f64> {
        s.trim().parse::<f64>().map_err(|_| Error::InvalidArgument(format!("{}: bad {what} {s:?}", path.display())))
    };
    let mut events = Vec::new();
    let mut sensor = None;
    for rec in r.records() {
        let rec = rec.map_err(csv_error)?;
        let time = parse(&rec[t_col], "time")?;
        let confidence = match c_col {
            Some(c) => parse(&rec[c], "confidence")?,
            None => 1.0,
        };
        let freq_hz = match f_col.map(|c| rec[c].trim()) {
            Some(s) if !s.is_empty() => Some(parse(s, "frequency")?),
            _ => None,
        };
        if let Some(s) = s_col.map(|c| rec[c].trim()).filter(|s| !s.is_empty()) {
            sensor = Some(s.to_string());
        }
        events.push(Event { time, confidence, freq_hz });
    }
    let mut list = EventList::new(events)?;
    list.sensor = sensor;
    Ok(list)
}

/// `threshold,precision,recall` rows plus a `# auprc=` footer.
pub fn write_pr_curve(path: impl AsRef<Path>, curve: &PrCurve) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "threshold,precision,recall")?;
    for p in &curve.points {
        writeln!(w, "{:.6},{:.6},{:.6}", p.threshold, p.precision, p.recall)?;
    }
    writeln!(w, "# auprc={:.6}", curve.auprc)?;
    w.flush()?;
    Ok(())
}

pub fn write_timeline(path: impl AsRef<Path>, cells: &[TimelineCell]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "segment,start_sec,end_sec,band,n_reference,tp,recall")?;
    for c in cells {
        writeln!(
            w,
            "{},{:.3},{:.3},{},{},{},{:.6}",
            c.segment,
            c.start,
            c.end,
            c.band.name(),
            c.n_reference,
            c.tp,
            c.recall
        )?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::{Compression, PcenParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tensor_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f32> = (0..60).map(|_| rng.random::<f32>() * 1e3 - 5e2).collect();
        let t = TensorFile::new(vec![3, 4, 5], &["a", "b", "c"], json!({"k": 1}), data).unwrap();
        let p = dir.path().join("t.bvtf");
        write_tensor(&p, &t).unwrap();
        let back = read_tensor(&p).unwrap();
        assert_eq!(back.shape, t.shape);
        assert!(back.data.iter().zip(&t.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(back.metadata, t.metadata);
    }

    #[test]
    fn truncated_and_foreign_files_rejected() {
        let t = TensorFile::new(vec![10], &["x"], Value::Null, vec![1.0; 10]).unwrap();
        let bytes = encode_tensor(&t).unwrap();
        for cut in [0, 3, 7, 12, bytes.len() - 1] {
            let err = decode_tensor(&bytes[..cut]).unwrap_err();
            assert!(err.to_string().contains("unsupported format"), "{err}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_tensor(&bad).is_err());
        let versioned = String::from_utf8_lossy(&bytes).replace("\"version\":1", "\"version\":9");
        assert!(decode_tensor(versioned.as_bytes()).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for f in Formulation::ALL {
            let params = DetectorParams::init(Geometry::desk(), f, &mut rng).unwrap();
            let ck = Checkpoint {
                params,
                frontend: FrontendConfig::desk(Compression::pcen(PcenParams::INDOOR)),
                context: ContextConfig::default(),
                seed: 17,
                history: TrainingHistory::default(),
            };
            let p = dir.path().join(format!("{}.zip", f.name()));
            save_checkpoint(&p, &ck).unwrap();
            let back = load_checkpoint(&p).unwrap();
            assert_eq!(back.frontend, ck.frontend);
            assert_eq!(back.params.formulation, f);
            for ((_, a), (_, b)) in back.params.weights.named().zip(ck.params.weights.named()) {
                assert_eq!(a.shape, b.shape);
                assert!(a.data.iter().zip(&b.data).all(|(x, y)| *x == (*y as f32) as f64));
            }
        }
        std::fs::write(dir.path().join("junk.zip"), b"PK\x03\x04junk").unwrap();
        assert!(load_checkpoint(dir.path().join("junk.zip")).unwrap_err().to_string().contains("unsupported format"));
    }

    #[test]
    fn csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let ev = EventList::new(vec![
            Event { time: 1.23456, confidence: 0.5, freq_hz: None },
            Event { time: 2.0, confidence: 0.9999999, freq_hz: None },
        ])
        .unwrap();
        let p = dir.path().join("d.csv");
        write_detections(&p, &ev).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "time_sec,confidence\n1.235,0.500000\n2.000,1.000000\n");
        let back = read_events(&p).unwrap();
        assert_eq!(back.times(), vec![1.235, 2.0]);
        let refs = EventList::new(vec![Event { time: 3.5, confidence: 1.0, freq_hz: Some(4200.0) }]).unwrap().with_sensor("S1");
        let q = dir.path().join("r.csv");
        write_references(&q, &refs).unwrap();
        let r = read_events(&q).unwrap();
        assert_eq!(r.events[0].freq_hz, Some(4200.0));
        assert_eq!(r.sensor.as_deref(), Some("S1"));
    }
}
