//! Single-file checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"INRMARK\0"  u32 version  u64 manifest_len  manifest (JSON)
//! u32 array_count
//! per array: u16 name_len  name  u8 ndim  ndim × u64 dims  f32 data
//! ```
//!
//! The manifest stores the configuration that produced the weights together
//! with its SHA-256, which is verified on load.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::codec::{BitMessage, Decoder, DecoderConfig, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear};
use crate::optim::MomentState;
use crate::siren::{Dense, InrConfig, InrParams};

pub const MAGIC: &[u8; 8] = b"INRMARK\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Fit,
    Pretrain,
    PretrainState,
    Embed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub stage: Stage,
    pub config_hash: String,
    pub config: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<BitMessage>,
    #[serde(default)]
    pub metrics: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub manifest: Manifest,
    pub arrays: Vec<NamedArray>,
}

/// Hex SHA-256 of the canonical JSON form of `config` (object keys sorted).
pub fn config_hash<T: Serialize + ?Sized>(config: &T) -> Result<String> {
    let value = serde_json::to_value(config)?;
    Ok(hash_value(&value))
}

fn hash_value(value: &Value) -> String {
    let digest = Sha256::digest(value.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hex SHA-256 over the raw bytes of a list of `f32` slices.
pub fn weights_digest(slices: &[&[f32]]) -> String {
    let mut h = Sha256::new();
    for s in slices {
        for v in *s {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length overflows usize".into()))
    }
}

impl Bundle {
    pub fn new<C: Serialize + ?Sized>(stage: Stage, config: &C) -> Result<Self> {
        let config = serde_json::to_value(config)?;
        Ok(Bundle {
            manifest: Manifest {
                version: FORMAT_VERSION,
                stage,
                config_hash: hash_value(&config),
                config,
                message: None,
                metrics: Value::Null,
            },
            arrays: Vec::new(),
        })
    }

    pub fn with_message(mut self, message: BitMessage) -> Self {
        self.manifest.message = Some(message);
        self
    }

    pub fn with_metrics<M: Serialize + ?Sized>(mut self, metrics: &M) -> Result<Self> {
        self.manifest.metrics = serde_json::to_value(metrics)?;
        Ok(self)
    }

    pub fn stage(&self) -> Stage {
        self.manifest.stage
    }

    pub fn config_hash(&self) -> &str {
        &self.manifest.config_hash
    }

    /// Deserializes the stored configuration.
    pub fn config<T: DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.manifest.config.clone())?)
    }

    /// Fails unless the bundle comes from `stage`.
    pub fn expect_stage(&self, stage: Stage) -> Result<&Self> {
        if self.manifest.stage != stage {
            return Err(Error::Format(format!(
                "expected a {stage:?} checkpoint, found {:?}",
                self.manifest.stage
            )));
        }
        Ok(self)
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: &[f32]) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.arrays.push(NamedArray {
            name: name.into(),
            shape: shape.to_vec(),
            data: data.to_vec(),
        });
    }

    pub fn array(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no array {name:?}")))
    }

    pub fn has_array_prefix(&self, prefix: &str) -> bool {
        self.arrays.iter().any(|a| a.name.starts_with(prefix))
    }

    fn matrix(&self, name: &str) -> Result<Array2<f32>> {
        let a = self.array(name)?;
        match a.shape[..] {
            [r, c] => Ok(Array2::from_shape_vec((r, c), a.data.clone()).expect("shape checked on load")),
            _ => Err(Error::Format(format!("{name} should be 2-D, has shape {:?}", a.shape))),
        }
    }

    fn vector(&self, name: &str) -> Result<Array1<f32>> {
        let a = self.array(name)?;
        match a.shape[..] {
            [_] => Ok(Array1::from(a.data.clone())),
            _ => Err(Error::Format(format!("{name} should be 1-D, has shape {:?}", a.shape))),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let mut out = Vec::with_capacity(manifest.len() + 64 + self.arrays.iter().map(|a| a.data.len() * 4).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            let name = a.name.as_bytes();
            let name_len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("array name too long: {}", a.name)))?;
            let ndim = u8::try_from(a.shape.len()).map_err(|_| Error::Format(format!("{} has too many dims", a.name)))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(ndim);
            for &d in &a.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let manifest_len = r.len()?;
        let manifest: Manifest = serde_json::from_slice(r.take(manifest_len)?)?;
        if manifest.version != version {
            return Err(Error::Format("manifest version disagrees with header".into()));
        }
        let expected = hash_value(&manifest.config);
        if expected != manifest.config_hash {
            return Err(Error::Format(format!(
                "config hash mismatch: manifest says {}, config hashes to {expected}",
                manifest.config_hash
            )));
        }
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("array name is not UTF-8".into()))?;
            let ndim = r.u8()? as usize;
            let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Format(format!("{name}: shape overflows")))?;
            let data = r
                .take(numel)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
                .collect();
            arrays.push(NamedArray { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last array".into()));
        }
        Ok(Bundle { manifest, arrays })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Bundle::from_bytes(&bytes)
    }

    pub fn insert_inr(&mut self, prefix: &str, params: &InrParams) {
        for (i, l) in params.layers().iter().enumerate() {
            let (o, n) = l.weight.dim();
            self.push(format!("{prefix}.layer{i}.weight"), &[o, n], l.weight.as_slice().expect("standard layout"));
            self.push(format!("{prefix}.layer{i}.bias"), &[o], l.bias.as_slice().expect("standard layout"));
        }
    }

    pub fn inr(&self, prefix: &str, config: &InrConfig) -> Result<InrParams> {
        let layers = (0..config.layer_shapes().len())
            .map(|i| {
                Ok(Dense {
                    weight: self.matrix(&format!("{prefix}.layer{i}.weight"))?,
                    bias: self.vector(&format!("{prefix}.layer{i}.bias"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        InrParams::from_layers(*config, layers).map_err(|e| Error::Format(format!("{prefix}: {e}")))
    }

    fn insert_conv(&mut self, name: &str, conv: &Conv2d) {
        let (o, k) = conv.weight.dim();
        self.push(format!("{name}.weight"), &[o, k], conv.weight.as_slice().expect("standard layout"));
        self.push(format!("{name}.bias"), &[o], conv.bias.as_slice().expect("standard layout"));
    }

    fn conv(&self, name: &str, stride: usize, in_ch: usize, out_ch: usize) -> Result<Conv2d> {
        let weight = self.matrix(&format!("{name}.weight"))?;
        let bias = self.vector(&format!("{name}.bias"))?;
        if weight.dim() != (out_ch, in_ch * 9) || bias.len() != out_ch {
            return Err(Error::Format(format!("{name} has unexpected shape {:?}", weight.dim())));
        }
        Ok(Conv2d { weight, bias, stride })
    }

    fn insert_linear(&mut self, name: &str, lin: &Linear) {
        let (o, i) = lin.weight.dim();
        self.push(format!("{name}.weight"), &[o, i], lin.weight.as_slice().expect("standard layout"));
        self.push(format!("{name}.bias"), &[o], lin.bias.as_slice().expect("standard layout"));
    }

    fn linear(&self, name: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
        let weight = self.matrix(&format!("{name}.weight"))?;
        let bias = self.vector(&format!("{name}.bias"))?;
        if weight.dim() != (fan_out, fan_in) || bias.len() != fan_out {
            return Err(Error::Format(format!("{name} has unexpected shape {:?}", weight.dim())));
        }
        Ok(Linear { weight, bias })
    }

    pub fn insert_decoder(&mut self, prefix: &str, decoder: &Decoder) {
        for (i, c) in decoder.convs.iter().enumerate() {
            self.insert_conv(&format!("{prefix}.conv{i}"), c);
        }
        self.insert_linear(&format!("{prefix}.head"), &decoder.head);
    }

    pub fn decoder(&self, prefix: &str, config: &DecoderConfig) -> Result<Decoder> {
        config.validate()?;
        let mut in_ch = 3;
        let mut convs = Vec::with_capacity(config.widths.len());
        for (i, (&w, &stride)) in config.widths.iter().zip(&config.strides).enumerate() {
            convs.push(self.conv(&format!("{prefix}.conv{i}"), stride, in_ch, w)?);
            in_ch = w;
        }
        let head = self.linear(&format!("{prefix}.head"), in_ch, config.message_bits)?;
        Ok(Decoder {
            config: config.clone(),
            convs,
            head,
        })
    }

    pub fn insert_encoder(&mut self, prefix: &str, encoder: &Encoder) {
        self.insert_linear(&format!("{prefix}.expand"), &encoder.expand);
        for (i, c) in encoder.convs.iter().enumerate() {
            self.insert_conv(&format!("{prefix}.conv{i}"), c);
        }
    }

    pub fn encoder(&self, prefix: &str, config: &EncoderConfig) -> Result<Encoder> {
        let t = config.tile;
        // One-hot pairs: two inputs per bit.
        let expand = self.linear(&format!("{prefix}.expand"), 2 * config.message_bits, config.tile_channels * t * t)?;
        let shapes = [
            (3 + config.tile_channels, config.hidden),
            (config.hidden, config.hidden),
            (config.hidden, 3),
        ];
        let convs = shapes
            .iter()
            .enumerate()
            .map(|(i, &(a, b))| self.conv(&format!("{prefix}.conv{i}"), 1, a, b))
            .collect::<Result<Vec<_>>>()?;
        Ok(Encoder {
            config: config.clone(),
            expand,
            convs,
        })
    }

    /// Stores optimizer moments; the step counter goes to the manifest
    /// metrics under `"<prefix>.step"`.
    pub fn insert_moments(&mut self, prefix: &str, moments: &MomentState) {
        for (i, (m, v)) in moments.first.iter().zip(&moments.second).enumerate() {
            self.push(format!("{prefix}.m{i}"), &[m.len()], m);
            self.push(format!("{prefix}.v{i}"), &[v.len()], v);
        }
    }

    pub fn moments(&self, prefix: &str, step: u64) -> Result<MomentState> {
        let mut state = MomentState {
            step,
            ..MomentState::default()
        };
        let mut i = 0;
        while let Ok(m) = self.array(&format!("{prefix}.m{i}")) {
            state.first.push(m.data.clone());
            state.second.push(self.array(&format!("{prefix}.v{i}"))?.data.clone());
            i += 1;
        }
        Ok(state)
    }
}
