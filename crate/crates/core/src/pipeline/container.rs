//! `FGPM0001` single-file model container.
//!
//! Layout: 8-byte magic, u64 LE manifest length, UTF-8 JSON manifest,
//! little-endian f32 tensor blobs, then a CRC32 (LE) of every preceding byte.

use serde::{Deserialize, Serialize};

use super::{PipelineError, Result};
use crate::cascade::CascadeModel;
use crate::nn::{ArchitectureSpec, LayerParams, Network, Tensor};
use crate::scalar::Scalar;

pub const MAGIC_PREFIX: &[u8; 4] = b"FGPM";
pub const CONTAINER_VERSION: u32 = 1;

fn magic() -> [u8; 8] {
    let mut m = [0u8; 8];
    m[..4].copy_from_slice(MAGIC_PREFIX);
    m[4..].copy_from_slice(format!("{CONTAINER_VERSION:04}").as_bytes());
    m
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamField {
    Weight,
    Bias,
    RunningMean,
    RunningVar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub node: usize,
    pub field: ParamField,
    pub shape: Vec<usize>,
    /// Offset into the blob section, in f32 elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkEntry {
    pub spec: ArchitectureSpec,
    pub class_names: Vec<String>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContainerKind {
    Pipeline,
    Network,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub kind: ContainerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detector: Option<CascadeModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ripeness: Option<NetworkEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disease: Option<NetworkEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network: Option<NetworkEntry>,
    #[serde(default)]
    pub disease_trigger: Vec<String>,
    #[serde(default)]
    pub crop_padding: f64,
}

impl Manifest {
    pub fn new(kind: ContainerKind) -> Self {
        Self {
            version: CONTAINER_VERSION,
            kind,
            detector: None,
            ripeness: None,
            disease: None,
            network: None,
            disease_trigger: Vec::new(),
            crop_padding: 0.0,
        }
    }
}

/// Appends a network's tensors to `blobs` and describes them.
pub(crate) fn pack_network<S: Scalar>(net: &Network<S>, blobs: &mut Vec<f32>) -> NetworkEntry {
    let mut tensors = Vec::new();
    for (node, p) in net.params().iter().enumerate() {
        let fields = [
            (ParamField::Weight, &p.weight),
            (ParamField::Bias, &p.bias),
            (ParamField::RunningMean, &p.running_mean),
            (ParamField::RunningVar, &p.running_var),
        ];
        for (field, t) in fields {
            let Some(t) = t else { continue };
            tensors.push(TensorEntry { node, field, shape: t.shape().to_vec(), offset: blobs.len() });
            blobs.extend(t.data().iter().map(|v| v.as_f64() as f32));
        }
    }
    NetworkEntry { spec: net.spec().clone(), class_names: net.class_names().to_vec(), tensors }
}

pub(crate) fn unpack_network<S: Scalar>(entry: &NetworkEntry, blobs: &[f32]) -> Result<Network<S>> {
    let corrupt = |m: String| PipelineError::CorruptContainer(m);
    let mut params: Vec<LayerParams<S>> = (0..entry.spec.nodes.len())
        .map(|_| LayerParams { weight: None, bias: None, running_mean: None, running_var: None })
        .collect();
    for t in &entry.tensors {
        let len: usize = t.shape.iter().product();
        let end = t.offset.checked_add(len).filter(|&e| e <= blobs.len());
        let Some(end) = end else {
            return Err(corrupt(format!("tensor for node {} runs past the blob section", t.node)));
        };
        let p = params.get_mut(t.node).ok_or_else(|| corrupt(format!("tensor for missing node {}", t.node)))?;
        let data = blobs[t.offset..end].iter().map(|v| S::of(f64::from(*v))).collect();
        let tensor = Some(Tensor::new(t.shape.clone(), data)?);
        match t.field {
            ParamField::Weight => p.weight = tensor,
            ParamField::Bias => p.bias = tensor,
            ParamField::RunningMean => p.running_mean = tensor,
            ParamField::RunningVar => p.running_var = tensor,
        }
    }
    Ok(Network::from_parts(entry.spec.clone(), params, entry.class_names.clone())?)
}

pub fn encode(manifest: &Manifest, blobs: &[f32]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(manifest)?;
    let mut out = Vec::with_capacity(20 + json.len() + 4 * blobs.len());
    out.extend_from_slice(&magic());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in blobs {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn parse_version(digits: &[u8]) -> Option<u32> {
    std::str::from_utf8(digits).ok().filter(|s| s.bytes().all(|b| b.is_ascii_digit()))?.parse().ok()
}

pub fn decode(bytes: &[u8]) -> Result<(Manifest, Vec<f32>)> {
    let corrupt = |m: &str| PipelineError::CorruptContainer(m.to_string());
    if bytes.len() < 8 || &bytes[..4] != MAGIC_PREFIX {
        return Err(corrupt("missing FGPM magic"));
    }
    if bytes.len() < 20 {
        return Err(corrupt("truncated header"));
    }
    // the checksum covers the version digits too, so a damaged version
    // reads as corruption rather than as a newer file
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(corrupt("checksum mismatch"));
    }
    let found = parse_version(&bytes[4..8]).ok_or_else(|| corrupt("malformed version in magic"))?;
    if found != CONTAINER_VERSION {
        return Err(PipelineError::VersionMismatch { found, expected: CONTAINER_VERSION });
    }
    let json_len = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes"));
    let json_end = usize::try_from(json_len)
        .ok()
        .and_then(|l| l.checked_add(16))
        .filter(|&e| e <= body.len())
        .ok_or_else(|| corrupt("manifest length exceeds file"))?;
    let manifest: Manifest =
        serde_json::from_slice(&body[16..json_end]).map_err(|e| corrupt(&format!("manifest: {e}")))?;
    if manifest.version != CONTAINER_VERSION {
        return Err(PipelineError::VersionMismatch { found: manifest.version, expected: CONTAINER_VERSION });
    }
    let blob_bytes = &body[json_end..];
    if blob_bytes.len() % 4 != 0 {
        return Err(corrupt("blob section is not a whole number of f32 values"));
    }
    let blobs = blob_bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok((manifest, blobs))
}

/// Serializes one network on its own.
pub fn network_to_bytes<S: Scalar>(net: &Network<S>) -> Result<Vec<u8>> {
    let mut blobs = Vec::new();
    let mut m = Manifest::new(ContainerKind::Network);
    m.network = Some(pack_network(net, &mut blobs));
    encode(&m, &blobs)
}

pub fn network_from_bytes<S: Scalar>(bytes: &[u8]) -> Result<Network<S>> {
    let (m, blobs) = decode(bytes)?;
    let entry = match (m.kind, &m.network) {
        (ContainerKind::Network, Some(e)) => e,
        _ => return Err(PipelineError::InvalidModel("container does not hold a single network".into())),
    };
    unpack_network(entry, &blobs)
}

pub fn save_network<S: Scalar>(net: &Network<S>, path: &std::path::Path) -> Result<()> {
    Ok(std::fs::write(path, network_to_bytes(net)?)?)
}

pub fn load_network<S: Scalar>(path: &std::path::Path) -> Result<Network<S>> {
    network_from_bytes(&std::fs::read(path)?)
}
