//! Versioned single-file checkpoint container.
//!
//! A checkpoint is a UTF-8 text header terminated by the line `end`,
//! followed immediately by the raw little-endian tensor blocks of every
//! layer in header order. See `docs/checkpoint-format.md` for the full
//! byte layout. Loading validates everything before a model is built and
//! never returns a partially read model.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::batchnorm::BnLayer;
use crate::model::{Architecture, Layer, LayerKind, Model};
use crate::tensor::{ChannelVector, LinearLayer};

pub const MAGIC: &str = "UBNA-CHECKPOINT";
pub const FORMAT_VERSION: u32 = 1;
const MAX_HEADER_BYTES: usize = 1 << 20;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic line)")]
    BadMagic,
    #[error("unsupported checkpoint version {found}, this build reads version {FORMAT_VERSION}")]
    UnsupportedVersion { found: String },
    #[error("corrupt checkpoint header: {0}")]
    CorruptHeader(String),
    #[error("truncated tensor data: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{0} unexpected bytes after the last tensor block")]
    TrailingBytes(usize),
    #[error("negative running variance in layer {layer}, channel {channel}")]
    NegativeVariance { layer: usize, channel: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

type Result<T> = std::result::Result<T, CheckpointError>;

fn corrupt(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::CorruptHeader(msg.into())
}

/// Where a model came from.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Provenance {
    /// SHA-256 of the resolved pre-training configuration.
    pub pretrain_config_hash: Option<String>,
    /// One whitespace-free record per adaptation applied, oldest first.
    pub adaptations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub provenance: Provenance,
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Self { model, provenance: Provenance::default() }
    }
}

/// Lower-case hex SHA-256 of `text`.
pub fn config_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn is_token(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(char::is_whitespace)
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let model = &ckpt.model;
    let arch = model.architecture();
    let mut header = String::new();
    let _ = writeln!(header, "{MAGIC}");
    let _ = writeln!(header, "version {FORMAT_VERSION}");
    let hidden = if arch.hidden.is_empty() {
        "-".to_string()
    } else {
        arch.hidden.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
    };
    let _ = writeln!(
        header,
        "architecture input_channels={} hidden={hidden} classes={} input_bn={}",
        arch.input_channels, arch.classes, arch.input_bn
    );
    match &ckpt.provenance.pretrain_config_hash {
        Some(h) if is_token(h) => {
            let _ = writeln!(header, "pretrain {h}");
        }
        Some(_) => return Err(CheckpointError::InvalidParameter("pretrain hash contains whitespace".into())),
        None => {
            let _ = writeln!(header, "pretrain none");
        }
    }
    for a in &ckpt.provenance.adaptations {
        if !is_token(a) {
            return Err(CheckpointError::InvalidParameter("adaptation record contains whitespace".into()));
        }
        let _ = writeln!(header, "adaptation {a}");
    }

    let mut body = Vec::new();
    for layer in model.layers() {
        match layer {
            Layer::InputBn(bn) | Layer::Bn(bn) => {
                let c = bn.channels();
                let kind = if matches!(layer, Layer::InputBn(_)) { "input_bn" } else { "bn" };
                let _ = writeln!(
                    header,
                    "layer {kind} channels={c} gamma=f32x{c} beta=f32x{c} running_mean=f64x{c} running_var=f64x{c} eps=f64x1"
                );
                bn.gamma.iter().chain(&bn.beta).for_each(|v| body.extend_from_slice(&v.to_le_bytes()));
                bn.running_mean()
                    .0
                    .iter()
                    .chain(&bn.running_var().0)
                    .chain(std::iter::once(&bn.eps()))
                    .for_each(|v| body.extend_from_slice(&v.to_le_bytes()));
            }
            Layer::Linear(l) => {
                let (i, o) = (l.in_features(), l.out_features());
                let _ = writeln!(header, "layer linear in={i} out={o} weight=f32x{} bias=f32x{o}", i * o);
                l.weight.iter().chain(&l.bias).for_each(|v| body.extend_from_slice(&v.to_le_bytes()));
            }
            Layer::Relu => header.push_str("layer relu\n"),
            Layer::SoftmaxHead => header.push_str("layer softmax\n"),
        }
    }
    header.push_str("end\n");
    let mut out = header.into_bytes();
    out.extend_from_slice(&body);
    Ok(out)
}

pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode(ckpt)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}

/// Splits `key=value`, requiring the given key.
fn field<'a>(tok: Option<&'a str>, key: &str) -> Result<&'a str> {
    let tok = tok.ok_or_else(|| corrupt(format!("missing field {key}")))?;
    match tok.split_once('=') {
        Some((k, v)) if k == key => Ok(v),
        _ => Err(corrupt(format!("expected {key}=..., found {tok:?}"))),
    }
}

fn parse_usize(s: &str, what: &str) -> Result<usize> {
    s.parse().map_err(|_| corrupt(format!("bad {what}: {s:?}")))
}

/// Checks a `dtype x count` tensor descriptor.
fn expect_tensor(tok: Option<&str>, key: &str, dtype: &str, count: usize) -> Result<()> {
    let v = field(tok, key)?;
    let want = format!("{dtype}x{count}");
    if v != want {
        return Err(corrupt(format!("{key}: expected {want}, found {v}")));
    }
    Ok(())
}

fn no_more<'a>(mut it: impl Iterator<Item = &'a str>, line: &str) -> Result<()> {
    match it.next() {
        Some(extra) => Err(corrupt(format!("unexpected token {extra:?} in {line:?}"))),
        None => Ok(()),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> &[u8] {
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        s
    }

    fn f32s(&mut self, n: usize) -> Vec<f32> {
        self.take(n * 4).chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect()
    }

    fn f64s(&mut self, n: usize) -> Vec<f64> {
        self.take(n * 8).chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect()
    }
}

fn finite32(v: &[f32], what: &str, layer: usize) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(CheckpointError::InvalidParameter(format!("non-finite {what} in layer {layer}")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let scan = &bytes[..bytes.len().min(MAX_HEADER_BYTES)];
    let end = find_header_end(scan).ok_or_else(|| {
        if scan.starts_with(MAGIC.as_bytes()) || MAGIC.as_bytes().starts_with(scan) {
            corrupt("header is not terminated by an `end` line")
        } else {
            CheckpointError::BadMagic
        }
    })?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| corrupt("header is not UTF-8"))?;
    let mut lines = header.lines();

    if lines.next() != Some(MAGIC) {
        return Err(CheckpointError::BadMagic);
    }
    let version_line = lines.next().ok_or_else(|| corrupt("missing version line"))?;
    let version = version_line.strip_prefix("version ").ok_or_else(|| corrupt("missing version line"))?;
    if version != FORMAT_VERSION.to_string() {
        return Err(CheckpointError::UnsupportedVersion { found: version.to_string() });
    }

    let arch_line = lines.next().ok_or_else(|| corrupt("missing architecture line"))?;
    let mut toks = arch_line.split(' ');
    if toks.next() != Some("architecture") {
        return Err(corrupt("expected architecture line"));
    }
    let input_channels = parse_usize(field(toks.next(), "input_channels")?, "input_channels")?;
    let hidden_text = field(toks.next(), "hidden")?;
    let hidden = if hidden_text == "-" {
        Vec::new()
    } else {
        hidden_text.split(',').map(|h| parse_usize(h, "hidden width")).collect::<Result<Vec<_>>>()?
    };
    let classes = parse_usize(field(toks.next(), "classes")?, "classes")?;
    let input_bn = match field(toks.next(), "input_bn")? {
        "true" => true,
        "false" => false,
        other => return Err(corrupt(format!("bad input_bn {other:?}"))),
    };
    no_more(toks, arch_line)?;
    let arch = Architecture { input_channels, hidden, classes, input_bn };
    arch.validate().map_err(|e| corrupt(e.to_string()))?;

    let mut provenance = Provenance::default();
    let pre = lines.next().ok_or_else(|| corrupt("missing pretrain line"))?;
    match pre.strip_prefix("pretrain ") {
        Some("none") => {}
        Some(h) if is_token(h) => provenance.pretrain_config_hash = Some(h.to_string()),
        _ => return Err(corrupt(format!("bad pretrain line {pre:?}"))),
    }

    let plan = arch.layer_plan();
    let mut pending = lines.peekable();
    while let Some(line) = pending.peek() {
        match line.strip_prefix("adaptation ") {
            Some(a) if is_token(a) => {
                provenance.adaptations.push(a.to_string());
                pending.next();
            }
            Some(_) => return Err(corrupt(format!("bad adaptation line {line:?}"))),
            None => break,
        }
    }

    // Validate every layer line and the total byte budget before reading.
    let mut expected = 0usize;
    for (i, want) in plan.iter().enumerate() {
        let line = pending.next().ok_or_else(|| corrupt(format!("missing layer line {i}")))?;
        let mut t = line.split(' ');
        if t.next() != Some("layer") {
            return Err(corrupt(format!("expected layer line, found {line:?}")));
        }
        let kind = t.next().unwrap_or("");
        let bytes_here = match (kind, want) {
            ("input_bn", LayerKind::InputBn { channels }) | ("bn", LayerKind::Bn { channels }) => {
                let c = parse_usize(field(t.next(), "channels")?, "channels")?;
                if c != *channels {
                    return Err(corrupt(format!("layer {i}: {c} channels, architecture implies {channels}")));
                }
                expect_tensor(t.next(), "gamma", "f32", c)?;
                expect_tensor(t.next(), "beta", "f32", c)?;
                expect_tensor(t.next(), "running_mean", "f64", c)?;
                expect_tensor(t.next(), "running_var", "f64", c)?;
                expect_tensor(t.next(), "eps", "f64", 1)?;
                c * 2 * 4 + c * 2 * 8 + 8
            }
            ("linear", LayerKind::Linear { inputs, outputs }) => {
                let i_n = parse_usize(field(t.next(), "in")?, "in")?;
                let o_n = parse_usize(field(t.next(), "out")?, "out")?;
                if (i_n, o_n) != (*inputs, *outputs) {
                    return Err(corrupt(format!(
                        "layer {i}: linear {i_n}->{o_n}, architecture implies {inputs}->{outputs}"
                    )));
                }
                let w = i_n.checked_mul(o_n).ok_or_else(|| corrupt("linear size overflow"))?;
                expect_tensor(t.next(), "weight", "f32", w)?;
                expect_tensor(t.next(), "bias", "f32", o_n)?;
                w.checked_add(o_n).and_then(|n| n.checked_mul(4)).ok_or_else(|| corrupt("linear size overflow"))?
            }
            ("relu", LayerKind::Relu) | ("softmax", LayerKind::SoftmaxHead) => 0,
            _ => return Err(corrupt(format!("layer {i}: found {kind:?}, architecture implies {want:?}"))),
        };
        no_more(t, line)?;
        expected = expected.checked_add(bytes_here).ok_or_else(|| corrupt("tensor size overflow"))?;
    }
    match pending.next() {
        Some("end") => {}
        Some(other) => return Err(corrupt(format!("expected end, found {other:?}"))),
        None => return Err(corrupt("missing end line")),
    }
    if let Some(extra) = pending.next() {
        return Err(corrupt(format!("content after end line: {extra:?}")));
    }

    let data = &bytes[end..];
    if data.len() < expected {
        return Err(CheckpointError::Truncated { expected, found: data.len() });
    }
    if data.len() > expected {
        return Err(CheckpointError::TrailingBytes(data.len() - expected));
    }

    let mut r = Reader { bytes: data, pos: 0 };
    let mut layers = Vec::with_capacity(plan.len());
    for (i, kind) in plan.iter().enumerate() {
        let layer = match *kind {
            LayerKind::InputBn { channels } | LayerKind::Bn { channels } => {
                let gamma = r.f32s(channels);
                let beta = r.f32s(channels);
                let mean = r.f64s(channels);
                let var = r.f64s(channels);
                let eps = r.f64s(1)[0];
                finite32(&gamma, "gamma", i)?;
                finite32(&beta, "beta", i)?;
                if mean.iter().any(|v| !v.is_finite()) {
                    return Err(CheckpointError::InvalidParameter(format!("non-finite running mean in layer {i}")));
                }
                if let Some(channel) = var.iter().position(|v| v.is_nan() || *v < 0.0) {
                    return Err(CheckpointError::NegativeVariance { layer: i, channel });
                }
                if var.iter().any(|v| !v.is_finite()) {
                    return Err(CheckpointError::InvalidParameter(format!("non-finite running variance in layer {i}")));
                }
                if !eps.is_finite() || eps <= 0.0 {
                    return Err(CheckpointError::InvalidParameter(format!("eps {eps} in layer {i} must be positive")));
                }
                let bn = BnLayer::from_parts(gamma, beta, ChannelVector(mean), ChannelVector(var), eps)
                    .map_err(|e| CheckpointError::InvalidParameter(e.to_string()))?;
                if matches!(kind, LayerKind::InputBn { .. }) {
                    Layer::InputBn(bn)
                } else {
                    Layer::Bn(bn)
                }
            }
            LayerKind::Linear { inputs, outputs } => {
                let weight = r.f32s(inputs * outputs);
                let bias = r.f32s(outputs);
                finite32(&weight, "weight", i)?;
                finite32(&bias, "bias", i)?;
                Layer::Linear(
                    LinearLayer::new(inputs, outputs, weight, bias)
                        .map_err(|e| CheckpointError::InvalidParameter(e.to_string()))?,
                )
            }
            LayerKind::Relu => Layer::Relu,
            LayerKind::SoftmaxHead => Layer::SoftmaxHead,
        };
        layers.push(layer);
    }
    let model = Model::from_layers(arch, layers).map_err(|e| corrupt(e.to_string()))?;
    Ok(Checkpoint { model, provenance })
}

/// Byte offset just past the `end\n` line.
fn find_header_end(bytes: &[u8]) -> Option<usize> {
    let mut line_start = 0;
    for (i, &b) in bytes.iter().enumerate() {
        if b == b'\n' {
            if &bytes[line_start..i] == b"end" {
                return Some(i + 1);
            }
            line_start = i + 1;
        }
    }
    None
}
