//! Binary checkpoint container for float, fake-quantized and integer networks.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "NSSMCKPT"
//! version    u32      1
//! kind       u32      0 float, 1 quantized, 2 integer
//! dims       5 × u32  input_dim, model_dim, state_dim, num_blocks, num_classes
//! seed       u64
//! meta_len   u32
//! meta       JSON (UTF-8), see `Meta`
//! count      u32      number of tensors
//! directory  count × { name_len u16, name, dtype u8 (0 f32, 1 i32), bits u8,
//!                      rank u8, dims rank × u32, offset u64 }
//! data       tensor payloads; offsets are relative to the start of this section
//! digest     32 bytes SHA-256 of everything above
//! ```
//!
//! Float tensors are `f32`. Integer tensors are `i32` with the logical bit
//! width they were quantized to; bounds and descale factors live in `meta`.

use std::path::Path;

use num_complex::Complex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Network, NetworkConfig};
use crate::quant::{int_range, IntegerNetwork, QuantizedNetwork};

pub const MAGIC: &[u8; 8] = b"NSSMCKPT";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Float,
    Quantized,
    Integer,
}

impl ArtifactKind {
    fn code(self) -> u32 {
        match self {
            ArtifactKind::Float => 0,
            ArtifactKind::Quantized => 1,
            ArtifactKind::Integer => 2,
        }
    }

    fn from_code(c: u32) -> Option<Self> {
        match c {
            0 => Some(ArtifactKind::Float),
            1 => Some(ArtifactKind::Quantized),
            2 => Some(ArtifactKind::Integer),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelArtifact {
    Float(Network<f32>),
    Quantized(QuantizedNetwork),
    Integer(IntegerNetwork),
}

impl ModelArtifact {
    pub fn kind(&self) -> ArtifactKind {
        match self {
            ModelArtifact::Float(_) => ArtifactKind::Float,
            ModelArtifact::Quantized(_) => ArtifactKind::Quantized,
            ModelArtifact::Integer(_) => ArtifactKind::Integer,
        }
    }

    pub fn config(&self) -> &NetworkConfig {
        match self {
            ModelArtifact::Float(n) => &n.config,
            ModelArtifact::Quantized(q) => &q.config,
            ModelArtifact::Integer(i) => &i.config,
        }
    }
}

/// Everything in a checkpoint besides the network itself.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub kind: ArtifactKind,
    pub seed: u64,
    /// Hash of the experiment configuration that produced the file.
    pub config_hash: Option<String>,
    /// Hex SHA-256 of the file body.
    pub digest: String,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: NetworkConfig,
    config_hash: Option<String>,
    /// The network with its tensor payloads removed (kinds 1 and 2).
    skeleton: Option<Value>,
}

enum Payload {
    F32(Vec<f32>),
    I32 { bits: u8, values: Vec<i32> },
}

struct Tensor {
    name: String,
    shape: Vec<usize>,
    payload: Payload,
}

impl Payload {
    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::I32 { values, .. } => values.len(),
        }
    }
}

fn interleave(v: &[Complex<f32>]) -> Vec<f32> {
    v.iter().flat_map(|c| [c.re, c.im]).collect()
}

fn float_tensors(net: &Network<f32>) -> Vec<Tensor> {
    let cfg = &net.config;
    let (i, h, n, c) = (cfg.input_dim, cfg.model_dim, cfg.state_dim, cfg.num_classes);
    let f = |name: String, shape: Vec<usize>, v: Vec<f32>| Tensor { name, shape, payload: Payload::F32(v) };
    let mut out = vec![
        f("encoder.weight".into(), vec![h, i], net.encoder.weight.clone()),
        f("encoder.bias".into(), vec![h], net.encoder.bias.clone()),
    ];
    for (k, b) in net.blocks.iter().enumerate() {
        out.push(f(format!("blocks.{k}.ssm.a"), vec![h, n, 2], interleave(&b.ssm.a)));
        out.push(f(format!("blocks.{k}.ssm.b"), vec![h, n, 2], interleave(&b.ssm.b)));
        out.push(f(format!("blocks.{k}.ssm.c"), vec![h, n, 2], interleave(&b.ssm.c)));
        out.push(f(format!("blocks.{k}.ssm.dt"), vec![h], b.ssm.dt.clone()));
        out.push(f(format!("blocks.{k}.ssm_bias"), vec![h], b.ssm_bias.clone()));
        out.push(f(format!("blocks.{k}.mix.weight"), vec![h, h], b.mix.weight.clone()));
        out.push(f(format!("blocks.{k}.mix.bias"), vec![h], b.mix.bias.clone()));
    }
    out.push(f("decoder.weight".into(), vec![c, h], net.decoder.weight.clone()));
    out.push(f("decoder.bias".into(), vec![c], net.decoder.bias.clone()));
    out
}

fn integer_paths(blocks: usize, quantized: bool) -> Vec<String> {
    let per_block: &[&str] = if quantized {
        &["a_bar", "b_bar", "c", "ssm_bias", "mix.weight", "mix.bias"]
    } else {
        &["a_re", "a_im", "b_re", "b_im", "c_re", "c_im", "ssm_bias", "mix.weight", "mix.bias"]
    };
    let mut v = vec!["encoder.weight".to_string(), "encoder.bias".to_string()];
    for k in 0..blocks {
        v.extend(per_block.iter().map(|p| format!("blocks.{k}.{p}")));
    }
    v.push("decoder.weight".into());
    v.push("decoder.bias".into());
    v
}

fn pointer(path: &str) -> String {
    format!("/{}", path.replace('.', "/"))
}

fn to_i32(name: &str, v: &[i64], bits: u32) -> Result<Vec<i32>> {
    let (lo, hi) = int_range(bits);
    v.iter()
        .map(|x| {
            if *x < lo || *x > hi || bits > 32 {
                Err(Error::GridViolation(format!("{name}: {x} does not fit {bits} bits")))
            } else {
                Ok(*x as i32)
            }
        })
        .collect()
}

/// Pulls the integer arrays out of a serialized network, leaving empty
/// arrays behind.
fn strip(mut skeleton: Value, paths: &[String], quantized: bool, bits_of: impl Fn(&str) -> u32) -> Result<(Value, Vec<Tensor>)> {
    let mut tensors = Vec::with_capacity(paths.len());
    for path in paths {
        let ptr = if quantized { format!("{}/values", pointer(path)) } else { pointer(path) };
        let slot = skeleton.pointer_mut(&ptr).ok_or_else(|| Error::InvalidParameter(format!("missing tensor {path}")))?;
        let taken = slot.take();
        *slot = Value::Array(Vec::new());
        // quantized payloads are filled in by the caller from the grid integers
        let payload = if quantized {
            Payload::I32 { bits: 0, values: Vec::new() }
        } else {
            let ints: Vec<i64> = serde_json::from_value(taken).map_err(|e| Error::InvalidParameter(format!("{path}: {e}")))?;
            let bits = bits_of(path);
            Payload::I32 { bits: bits as u8, values: to_i32(path, &ints, bits)? }
        };
        tensors.push(Tensor { name: path.clone(), shape: vec![payload.len()], payload });
    }
    Ok((skeleton, tensors))
}

fn quantized_tensors(q: &QuantizedNetwork) -> Result<(Value, Vec<Tensor>)> {
    let skeleton = serde_json::to_value(q).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let paths = integer_paths(q.blocks.len(), true);
    let (skeleton, mut tensors) = strip(skeleton, &paths, true, |_| 0)?;
    for ((name, t), slot) in q.tensors().into_iter().zip(&mut tensors) {
        debug_assert_eq!(name, slot.name);
        let ints = t.integers()?;
        slot.shape = vec![ints.len()];
        slot.payload = Payload::I32 { bits: t.bits as u8, values: to_i32(&name, &ints, t.bits)? };
    }
    Ok((skeleton, tensors))
}

fn integer_tensors(inet: &IntegerNetwork) -> Result<(Value, Vec<Tensor>)> {
    let skeleton = serde_json::to_value(inet).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let paths = integer_paths(inet.blocks.len(), false);
    let spec = inet.spec;
    strip(skeleton, &paths, false, |p| {
        let ssm = ["a_re", "a_im", "b_re", "b_im", "c_re", "c_im"];
        if ssm.iter().any(|s| p.ends_with(s)) {
            spec.state_bits
        } else {
            spec.weight_bits
        }
    })
}

pub fn encode(artifact: &ModelArtifact, seed: u64, config_hash: Option<&str>) -> Result<Vec<u8>> {
    let cfg = artifact.config().clone();
    let (skeleton, tensors) = match artifact {
        ModelArtifact::Float(n) => (None, float_tensors(n)),
        ModelArtifact::Quantized(q) => {
            let (s, t) = quantized_tensors(q)?;
            (Some(s), t)
        }
        ModelArtifact::Integer(i) => {
            let (s, t) = integer_tensors(i)?;
            (Some(s), t)
        }
    };
    let meta = Meta { config: cfg.clone(), config_hash: config_hash.map(str::to_string), skeleton };
    let meta = serde_json::to_vec(&meta).map_err(|e| Error::InvalidParameter(e.to_string()))?;

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&artifact.kind().code().to_le_bytes());
    for d in [cfg.input_dim, cfg.model_dim, cfg.state_dim, cfg.num_blocks, cfg.num_classes] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&seed.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for t in &tensors {
        let (dtype, bits) = match &t.payload {
            Payload::F32(_) => (0u8, 0u8),
            Payload::I32 { bits, .. } => (1u8, *bits),
        };
        out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(dtype);
        out.push(bits);
        out.push(t.shape.len() as u8);
        for d in &t.shape {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 4 * t.payload.len() as u64;
    }
    for t in &tensors {
        match &t.payload {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::I32 { values, .. } => values.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Format { offset: self.pos as u64, msg: msg.into() })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return self.err(format!("truncated: need {n} more bytes"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

struct Entry {
    name: String,
    dtype: u8,
    bits: u8,
    shape: Vec<usize>,
    offset: u64,
}

fn read_payload(c: &Cursor, data: usize, e: &Entry) -> Result<Payload> {
    let n: usize = e.shape.iter().product();
    let start = data + e.offset as usize;
    let end = start + 4 * n;
    if end > c.buf.len() {
        return Err(Error::Format { offset: start as u64, msg: format!("tensor {} runs past the data section", e.name) });
    }
    let words = c.buf[start..end].chunks_exact(4).map(|w| <[u8; 4]>::try_from(w).unwrap());
    Ok(match e.dtype {
        0 => Payload::F32(words.map(f32::from_le_bytes).collect()),
        _ => Payload::I32 { bits: e.bits, values: words.map(i32::from_le_bytes).collect() },
    })
}

fn take_f32(tensors: &mut std::collections::HashMap<String, Payload>, name: &str, len: usize) -> Result<Vec<f32>> {
    match tensors.remove(name) {
        Some(Payload::F32(v)) if v.len() == len => Ok(v),
        Some(_) => Err(Error::Format { offset: 0, msg: format!("tensor {name} has the wrong type or size") }),
        None => Err(Error::Format { offset: 0, msg: format!("tensor {name} missing") }),
    }
}

fn pairs(v: Vec<f32>) -> Vec<Complex<f32>> {
    v.chunks_exact(2).map(|p| Complex::new(p[0], p[1])).collect()
}

fn rebuild_float(cfg: &NetworkConfig, mut t: std::collections::HashMap<String, Payload>) -> Result<Network<f32>> {
    let (i, h, n, c) = (cfg.input_dim, cfg.model_dim, cfg.state_dim, cfg.num_classes);
    let mut net = Network::<f32>::init(cfg, 0)?;
    net.encoder.weight = take_f32(&mut t, "encoder.weight", h * i)?;
    net.encoder.bias = take_f32(&mut t, "encoder.bias", h)?;
    for (k, b) in net.blocks.iter_mut().enumerate() {
        b.ssm.a = pairs(take_f32(&mut t, &format!("blocks.{k}.ssm.a"), 2 * h * n)?);
        b.ssm.b = pairs(take_f32(&mut t, &format!("blocks.{k}.ssm.b"), 2 * h * n)?);
        b.ssm.c = pairs(take_f32(&mut t, &format!("blocks.{k}.ssm.c"), 2 * h * n)?);
        b.ssm.dt = take_f32(&mut t, &format!("blocks.{k}.ssm.dt"), h)?;
        b.ssm_bias = take_f32(&mut t, &format!("blocks.{k}.ssm_bias"), h)?;
        b.mix.weight = take_f32(&mut t, &format!("blocks.{k}.mix.weight"), h * h)?;
        b.mix.bias = take_f32(&mut t, &format!("blocks.{k}.mix.bias"), h)?;
    }
    net.decoder.weight = take_f32(&mut t, "decoder.weight", c * h)?;
    net.decoder.bias = take_f32(&mut t, "decoder.bias", c)?;
    net.validate()?;
    Ok(net)
}

fn fill_skeleton(mut skeleton: Value, quantized: bool, blocks: usize, mut t: std::collections::HashMap<String, Payload>) -> Result<Value> {
    for path in integer_paths(blocks, quantized) {
        let values = match t.remove(&path) {
            Some(Payload::I32 { values, .. }) => values,
            _ => return Err(Error::Format { offset: 0, msg: format!("integer tensor {path} missing") }),
        };
        if quantized {
            let qt = skeleton
                .pointer_mut(&pointer(&path))
                .ok_or_else(|| Error::Format { offset: 0, msg: format!("metadata lacks {path}") })?;
            let bits = qt["bits"].as_u64().unwrap_or(0) as u32;
            let bound = qt["bound"].as_f64().unwrap_or(f64::NAN);
            let ints: Vec<i64> = values.iter().map(|v| *v as i64).collect();
            let restored = crate::quant::QTensor::from_integers(&ints, bits, bound)?;
            qt["values"] = serde_json::to_value(restored.values).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        } else {
            let slot = skeleton
                .pointer_mut(&pointer(&path))
                .ok_or_else(|| Error::Format { offset: 0, msg: format!("metadata lacks {path}") })?;
            *slot = Value::from(values);
        }
    }
    Ok(skeleton)
}

pub fn decode(bytes: &[u8]) -> Result<(ModelArtifact, CheckpointInfo)> {
    if bytes.len() < MAGIC.len() + DIGEST_LEN {
        return Err(Error::Format { offset: 0, msg: "file too short".into() });
    }
    let body_len = bytes.len() - DIGEST_LEN;
    let digest = Sha256::digest(&bytes[..body_len]);
    if digest.as_slice() != &bytes[body_len..] {
        return Err(Error::Format { offset: body_len as u64, msg: "digest mismatch".into() });
    }
    let mut c = Cursor { buf: &bytes[..body_len], pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::Format { offset: 0, msg: "bad magic".into() });
    }
    let version = c.u32()?;
    if version != VERSION {
        return c.err(format!("unsupported version {version}"));
    }
    let kind = c.u32()?;
    let kind = ArtifactKind::from_code(kind).map_or_else(|| c.err(format!("unknown kind {kind}")), Ok)?;
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = c.u32()? as usize;
    }
    let seed = c.u64()?;
    let meta_len = c.u32()? as usize;
    let meta_at = c.pos;
    let meta: Meta = serde_json::from_slice(c.take(meta_len)?)
        .map_err(|e| Error::Format { offset: meta_at as u64, msg: format!("metadata: {e}") })?;
    let cfg = meta.config.clone();
    if dims != [cfg.input_dim, cfg.model_dim, cfg.state_dim, cfg.num_blocks, cfg.num_classes] {
        return Err(Error::Format { offset: 16, msg: "header dimensions disagree with metadata".into() });
    }
    cfg.validate()?;
    let count = c.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = c.u16()? as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec()).or_else(|_| c.err("tensor name is not UTF-8"))?;
        let dtype = c.u8()?;
        if dtype > 1 {
            return c.err(format!("unknown dtype {dtype}"));
        }
        let bits = c.u8()?;
        let rank = c.u8()? as usize;
        let shape = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let offset = c.u64()?;
        entries.push(Entry { name, dtype, bits, shape, offset });
    }
    let data = c.pos;
    let mut tensors = std::collections::HashMap::new();
    for e in &entries {
        tensors.insert(e.name.clone(), read_payload(&c, data, e)?);
    }
    let artifact = match kind {
        ArtifactKind::Float => ModelArtifact::Float(rebuild_float(&cfg, tensors)?),
        ArtifactKind::Quantized | ArtifactKind::Integer => {
            let quantized = kind == ArtifactKind::Quantized;
            let skeleton = meta.skeleton.ok_or_else(|| Error::Format { offset: meta_at as u64, msg: "metadata lacks the network".into() })?;
            let value = fill_skeleton(skeleton, quantized, cfg.num_blocks, tensors)?;
            let bad = |e: serde_json::Error| Error::Format { offset: meta_at as u64, msg: format!("network metadata: {e}") };
            if quantized {
                let q: QuantizedNetwork = serde_json::from_value(value).map_err(bad)?;
                q.check_grid()?;
                ModelArtifact::Quantized(q)
            } else {
                ModelArtifact::Integer(serde_json::from_value(value).map_err(bad)?)
            }
        }
    };
    if artifact.config() != &cfg {
        return Err(Error::Format { offset: meta_at as u64, msg: "network config disagrees with header".into() });
    }
    let info = CheckpointInfo { kind, seed, config_hash: meta.config_hash, digest: hex::encode(digest) };
    Ok((artifact, info))
}

pub fn save(path: &Path, artifact: &ModelArtifact, seed: u64, config_hash: Option<&str>) -> Result<String> {
    let bytes = encode(artifact, seed, config_hash)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, &bytes)?;
    Ok(hex::encode(&bytes[bytes.len() - DIGEST_LEN..]))
}

pub fn load(path: &Path) -> Result<(ModelArtifact, CheckpointInfo)> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parallel::ExecPolicy;
    use crate::quant::{ptq, QuantSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn net() -> Network<f32> {
        Network::<f32>::init(&NetworkConfig::tiny(2, 6, 3, 2, 4, 12), 9).unwrap()
    }

    fn quantized() -> QuantizedNetwork {
        let n = net();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let calib: Vec<Vec<f32>> = (0..8).map(|_| (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        ptq(&n, &QuantSpec::default(), &calib, ExecPolicy::Sequential).unwrap()
    }

    #[test]
    fn float_round_trip() {
        let n = net();
        let bytes = encode(&ModelArtifact::Float(n.clone()), 9, Some("abc")).unwrap();
        let (back, info) = decode(&bytes).unwrap();
        assert_eq!(back, ModelArtifact::Float(n));
        assert_eq!(info.seed, 9);
        assert_eq!(info.kind, ArtifactKind::Float);
        assert_eq!(info.config_hash.as_deref(), Some("abc"));
    }

    #[test]
    fn quantized_and_integer_round_trip() {
        let q = quantized();
        let (back, _) = decode(&encode(&ModelArtifact::Quantized(q.clone()), 0, None).unwrap()).unwrap();
        assert_eq!(back, ModelArtifact::Quantized(q.clone()));
        let i = IntegerNetwork::extract(&q).unwrap();
        let (back, info) = decode(&encode(&ModelArtifact::Integer(i.clone()), 0, None).unwrap()).unwrap();
        assert_eq!(back, ModelArtifact::Integer(i));
        assert_eq!(info.kind, ArtifactKind::Integer);
    }

    #[test]
    fn encoding_is_deterministic() {
        let a = encode(&ModelArtifact::Float(net()), 3, None).unwrap();
        let b = encode(&ModelArtifact::Float(net()), 3, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&ModelArtifact::Float(net()), 7, None).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), VERSION);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 0);
        let dims: Vec<u32> = (0..5).map(|k| u32::from_le_bytes(bytes[16 + 4 * k..20 + 4 * k].try_into().unwrap())).collect();
        assert_eq!(dims, vec![2, 6, 3, 2, 4]);
        assert_eq!(u64::from_le_bytes(bytes[36..44].try_into().unwrap()), 7);
    }

    #[test]
    fn corruption_is_rejected() {
        let mut bytes = encode(&ModelArtifact::Float(net()), 0, None).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(decode(&bytes), Err(Error::Format { .. })));
        assert!(matches!(decode(&bytes[..20]), Err(Error::Format { .. })));
        let mut bad = encode(&ModelArtifact::Float(net()), 0, None).unwrap();
        bad[0] = b'X';
        let n = bad.len() - DIGEST_LEN;
        let d = Sha256::digest(&bad[..n]);
        bad[n..].copy_from_slice(&d);
        assert!(matches!(decode(&bad), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/model.ckpt");
        let digest = save(&path, &ModelArtifact::Float(net()), 1, None).unwrap();
        let (_, info) = load(&path).unwrap();
        assert_eq!(info.digest, digest);
    }
}
