//! On-disk formats. All integers and floats are little-endian; matrices are
//! stored as row-major `f32`.
//!
//! Feature file (`PVQF`):
//!
//! ```text
//! "PVQF" | u32 T | u32 D | T·D × f32
//! ```
//!
//! A text variant is also accepted: a first line `T D`, then `T` lines of
//! `D` whitespace-separated numbers.
//!
//! Codebook file (`PVQ1`):
//!
//! ```text
//! "PVQ1" | u32 p | u32 D | p·D × f32
//! ```
//!
//! Checkpoint (`PVQM`):
//!
//! ```text
//! "PVQM" | u32 version | u32 section count | sections…
//! section = 4-byte tag | u32 payload length | payload
//! ```
//!
//! Tensor payloads are `u32 rows | u32 cols | rows·cols × f32`. The `CONF`
//! section holds the training config as UTF-8 TOML; `OPTC`/`OPTQ` hold the
//! Adam state of each group as `u64 step | u32 n | n × (m tensor, v tensor)`;
//! `LRSC` holds the schedule scale as one `f32`.

use std::io::{Read, Write};
use std::path::Path;

use crate::codebook::Codebook;
use crate::error::{Error, Result};
use crate::fusion::{AttentionParams, FusionStack};
use crate::model::{ClassifierParams, ModelParams};
use crate::numerics::Matrix;
use crate::optim::AdamState;
use crate::train::{Model, OptimizerState, TrainingConfig};

pub const FEATURE_MAGIC: &[u8; 4] = b"PVQF";
pub const CODEBOOK_MAGIC: &[u8; 4] = b"PVQ1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PVQM";
pub const CHECKPOINT_VERSION: u32 = 1;

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Little-endian cursor over a byte slice that reports truncation as a
/// format error.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            format_err(format!(
                "{} truncated: need {} bytes at offset {}, have {}",
                self.what,
                n,
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32_matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| format_err(format!("{} declares an overflowing shape", self.what)))?;
        let raw = self.take(n)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Matrix::from_vec(rows, cols, data).map_err(|e| format_err(format!("{}: {e}", self.what)))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(format_err(format!(
                "{} has {} trailing bytes",
                self.what,
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn put_f32s(out: &mut Vec<u8>, m: &Matrix) {
    for &v in m.as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn header_matrix(magic: &[u8; 4], m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * m.as_slice().len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    put_f32s(&mut out, m);
    out
}

fn parse_header_matrix(bytes: &[u8], magic: &[u8; 4], what: &'static str) -> Result<Matrix> {
    let mut r = Reader::new(bytes, what);
    if r.take(4)? != magic {
        return Err(format_err(format!(
            "{what}: bad magic, expected {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let m = r.f32_matrix(rows, cols)?;
    r.finish()?;
    Ok(m)
}

pub fn encode_features(m: &Matrix) -> Vec<u8> {
    header_matrix(FEATURE_MAGIC, m)
}

/// Decodes a binary or text feature file.
pub fn decode_features(bytes: &[u8]) -> Result<Matrix> {
    if bytes.starts_with(FEATURE_MAGIC) {
        return parse_header_matrix(bytes, FEATURE_MAGIC, "feature file");
    }
    let text = std::str::from_utf8(bytes).map_err(|_| format_err("feature file: neither PVQF binary nor UTF-8 text"))?;
    parse_text_features(text)
}

fn parse_text_features(text: &str) -> Result<Matrix> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| format_err("feature file is empty"))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| format_err(format!("bad header token {t:?}"))))
        .collect::<Result<_>>()?;
    let [t, d] = dims[..] else {
        return Err(format_err("text header must be `T D`"));
    };
    let mut data = Vec::with_capacity(t * d);
    let mut rows = 0;
    for (i, line) in lines.enumerate() {
        let before = data.len();
        for tok in line.split_whitespace() {
            let v: f32 = tok
                .parse()
                .map_err(|_| format_err(format!("row {i}: bad number {tok:?}")))?;
            data.push(v as f64);
        }
        if data.len() - before != d {
            return Err(format_err(format!("row {i}: expected {d} values, found {}", data.len() - before)));
        }
        rows += 1;
    }
    if rows != t {
        return Err(format_err(format!("header declares {t} rows, found {rows}")));
    }
    Matrix::from_vec(t, d, data).map_err(|e| format_err(e.to_string()))
}

/// Text variant of the feature file, using shortest round-trip `f32` formatting.
pub fn encode_features_text(m: &Matrix) -> String {
    let mut out = format!("{} {}\n", m.rows(), m.cols());
    for r in m.iter_rows() {
        let row: Vec<String> = r.iter().map(|&v| format!("{}", v as f32)).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub fn encode_codebook(cb: &Codebook) -> Vec<u8> {
    header_matrix(CODEBOOK_MAGIC, cb.centers())
}

pub fn decode_codebook(bytes: &[u8]) -> Result<Codebook> {
    let m = parse_header_matrix(bytes, CODEBOOK_MAGIC, "codebook file")?;
    Codebook::new(m).map_err(|e| format_err(format!("codebook file: {e}")))
}

fn read_path(path: &Path) -> Result<Vec<u8>> {
    let mut f = std::fs::File::open(path)?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)?;
    Ok(buf)
}

fn write_path(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Matrix> {
    decode_features(&read_path(path)?)
}

pub fn write_features(path: &Path, m: &Matrix) -> Result<()> {
    write_path(path, &encode_features(m))
}

pub fn read_codebook(path: &Path) -> Result<Codebook> {
    decode_codebook(&read_path(path)?)
}

pub fn write_codebook(path: &Path, cb: &Codebook) -> Result<()> {
    write_path(path, &encode_codebook(cb))
}

/// Everything needed to resume or evaluate a run.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainingConfig,
    pub model: Model,
    pub optimizer: OptimizerState,
}

const PROJECTION_TAGS: [&[u8; 4]; 6] = [b"S1WQ", b"S1WK", b"S1WV", b"S2WQ", b"S2WK", b"S2WV"];

fn tensor_payload(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * m.as_slice().len());
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    put_f32s(&mut out, m);
    out
}

fn adam_payload(st: &AdamState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&st.step.to_le_bytes());
    out.extend_from_slice(&(st.m.len() as u32).to_le_bytes());
    for (m, v) in st.m.iter().zip(&st.v) {
        out.extend_from_slice(&tensor_payload(m));
        out.extend_from_slice(&tensor_payload(v));
    }
    out
}

fn read_tensor(r: &mut Reader<'_>) -> Result<Matrix> {
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    r.f32_matrix(rows, cols)
}

fn parse_tensor(payload: &[u8]) -> Result<Matrix> {
    let mut r = Reader::new(payload, "checkpoint tensor");
    let m = read_tensor(&mut r)?;
    r.finish()?;
    Ok(m)
}

fn parse_adam(payload: &[u8]) -> Result<AdamState> {
    let mut r = Reader::new(payload, "checkpoint optimizer state");
    let step = r.u64()?;
    let n = r.u32()? as usize;
    let mut m = Vec::new();
    let mut v = Vec::new();
    for _ in 0..n {
        m.push(read_tensor(&mut r)?);
        v.push(read_tensor(&mut r)?);
    }
    r.finish()?;
    Ok(AdamState { step, m, v })
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut sections: Vec<(&[u8; 4], Vec<u8>)> = vec![(b"CONF", ck.config.to_toml().into_bytes())];
    let p = &ck.model.params;
    if let Some(cb) = &p.codebook {
        sections.push((b"CBK0", tensor_payload(cb.centers())));
    }
    for (tag, m) in PROJECTION_TAGS.iter().zip(p.fusion.projections()) {
        sections.push((tag, tensor_payload(m)));
    }
    sections.push((b"CLSW", tensor_payload(&p.classifier.w)));
    sections.push((b"CLSB", tensor_payload(&p.classifier.b)));
    sections.push((b"OPTC", adam_payload(&ck.optimizer.classifier)));
    if let Some(q) = &ck.optimizer.quantizer {
        sections.push((b"OPTQ", adam_payload(q)));
    }
    sections.push((b"LRSC", (ck.optimizer.lr_scale as f32).to_le_bytes().to_vec()));

    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    for (tag, payload) in sections {
        out.extend_from_slice(tag);
        out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&payload);
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes, "checkpoint");
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(format_err("checkpoint: bad magic, expected \"PVQM\""));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format_err(format!("checkpoint: unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut config = None;
    let mut codebook = None;
    let mut projections: [Option<Matrix>; 6] = Default::default();
    let (mut cls_w, mut cls_b, mut opt_c, mut opt_q, mut lr_scale) = (None, None, None, None, None);
    for _ in 0..count {
        let tag: [u8; 4] = r.take(4)?.try_into().unwrap();
        let len = r.u32()? as usize;
        let payload = r.take(len)?;
        match &tag {
            b"CONF" => {
                let text = std::str::from_utf8(payload).map_err(|_| format_err("checkpoint: config is not UTF-8"))?;
                config = Some(TrainingConfig::from_toml(text).map_err(|e| format_err(format!("checkpoint config: {e}")))?);
            }
            b"CBK0" => {
                codebook = Some(Codebook::new(parse_tensor(payload)?).map_err(|e| format_err(e.to_string()))?);
            }
            b"CLSW" => cls_w = Some(parse_tensor(payload)?),
            b"CLSB" => cls_b = Some(parse_tensor(payload)?),
            b"OPTC" => opt_c = Some(parse_adam(payload)?),
            b"OPTQ" => opt_q = Some(parse_adam(payload)?),
            b"LRSC" => {
                let raw: [u8; 4] = payload.try_into().map_err(|_| format_err("checkpoint: LRSC must be 4 bytes"))?;
                lr_scale = Some(f32::from_le_bytes(raw) as f64);
            }
            other => match PROJECTION_TAGS.iter().position(|t| *t == other) {
                Some(i) => projections[i] = Some(parse_tensor(payload)?),
                None => {
                    return Err(format_err(format!(
                        "checkpoint: unknown section {:?}",
                        String::from_utf8_lossy(other)
                    )))
                }
            },
        }
    }
    r.finish()?;

    let missing = |name: &str| format_err(format!("checkpoint: missing section {name}"));
    let config = config.ok_or_else(|| missing("CONF"))?;
    let [q1, k1, v1, q2, k2, v2] = projections;
    let take = |m: Option<Matrix>, tag: &str| m.ok_or_else(|| missing(tag));
    let stage1 = AttentionParams::from_matrices(take(q1, "S1WQ")?, take(k1, "S1WK")?, take(v1, "S1WV")?)
        .map_err(|e| format_err(e.to_string()))?;
    let stage2 = AttentionParams::from_matrices(take(q2, "S2WQ")?, take(k2, "S2WK")?, take(v2, "S2WV")?)
        .map_err(|e| format_err(e.to_string()))?;
    let fusion = FusionStack::new(stage1, stage2).map_err(|e| format_err(e.to_string()))?;
    let classifier = ClassifierParams::new(take(cls_w, "CLSW")?, take(cls_b, "CLSB")?)
        .map_err(|e| format_err(e.to_string()))?;
    let arch = config.architecture();
    if (arch.pooling == crate::model::PoolingMode::Vq) != codebook.is_some() {
        return Err(format_err("checkpoint: codebook section does not match pooling mode"));
    }
    let params = ModelParams {
        codebook,
        fusion,
        classifier,
    };
    let optimizer = OptimizerState {
        classifier: opt_c.ok_or_else(|| missing("OPTC"))?,
        quantizer: opt_q,
        lr_scale: lr_scale.ok_or_else(|| missing("LRSC"))?,
    };
    Ok(Checkpoint {
        config,
        model: Model { arch, params },
        optimizer,
    })
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_path(path)?)
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_path(path, &encode_checkpoint(ck))
}
