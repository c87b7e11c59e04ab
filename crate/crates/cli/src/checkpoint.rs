//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "PNLC0001"
//! version    u32
//! arch       u8       0 = mlp, 1 = shallow-cnn
//! in_shape   3 x u32  channels, height, width
//! classes    u32
//! init_seed  u64
//! layers     u32, then per layer:
//!   kind u8 (0 dense, 1 conv), activation u8 (0 none, 1 relu), has_bias u8,
//!   out_dim u32, in_dim u32, in_h u32, in_w u32, kernel u32, stride u32,
//!   padding u32, weight count u32, weights f32..., biases f32... (out_dim)
//! meta       u32 length, UTF-8 JSON
//! perm       u8 present; if 1: u32 layers, per layer u32 length + u32 entries
//! crc32      u32 over every preceding byte
//! ```

use std::path::Path;

use permbasin::data::Split;
use permbasin::lab::DatasetSpec;
use permbasin::net::{Activation, ArchKind, EvalResult, Layer, LayerKind, Network, Shape3, TrainConfig, TrainReport};
use permbasin::perm::Permutation;
use permbasin::{Error, Result};
use serde::{Deserialize, Serialize};

pub const MAGIC: &[u8; 8] = b"PNLC0001";
pub const VERSION: u32 = 1;

/// Training metadata stored next to the parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub report: Option<TrainReport>,
    #[serde(default)]
    pub dataset: Option<DatasetSpec>,
    #[serde(default)]
    pub final_eval: Vec<(Split, EvalResult)>,
    #[serde(default)]
    pub member_seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: Network,
    pub meta: CheckpointMeta,
    pub perm: Option<Permutation>,
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        detail: detail.into(),
    }
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| bad(format!("{what} {v} does not fit in 32 bits")))
}

pub fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    let net = &ck.net;
    net.validate()?;
    let mut b = Vec::with_capacity(64 + 4 * net.param_count());
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&VERSION.to_le_bytes());
    b.push(match net.arch {
        ArchKind::Mlp => 0,
        ArchKind::ShallowCnn => 1,
    });
    for v in [net.in_shape.channels, net.in_shape.height, net.in_shape.width, net.num_classes] {
        b.extend_from_slice(&u32_of(v, "dimension")?.to_le_bytes());
    }
    b.extend_from_slice(&net.init_seed.to_le_bytes());
    b.extend_from_slice(&u32_of(net.layers.len(), "layer count")?.to_le_bytes());
    for l in &net.layers {
        let (kind, kernel, stride, padding) = match l.kind {
            LayerKind::Dense => (0u8, 0, 0, 0),
            LayerKind::Conv2d {
                kernel,
                stride,
                padding,
            } => (1u8, kernel, stride, padding),
        };
        b.push(kind);
        b.push(match l.activation {
            Activation::None => 0,
            Activation::Relu => 1,
        });
        b.push(u8::from(l.bias.is_some()));
        for v in [
            l.out_dim,
            l.in_dim,
            l.in_spatial.0,
            l.in_spatial.1,
            kernel,
            stride,
            padding,
            l.weight.len(),
        ] {
            b.extend_from_slice(&u32_of(v, "layer field")?.to_le_bytes());
        }
        for w in &l.weight {
            b.extend_from_slice(&w.to_le_bytes());
        }
        if let Some(bias) = &l.bias {
            for w in bias {
                b.extend_from_slice(&w.to_le_bytes());
            }
        }
    }
    let meta = serde_json::to_vec(&ck.meta).map_err(|e| bad(e.to_string()))?;
    b.extend_from_slice(&u32_of(meta.len(), "meta length")?.to_le_bytes());
    b.extend_from_slice(&meta);
    match &ck.perm {
        None => b.push(0),
        Some(p) => {
            b.push(1);
            b.extend_from_slice(&u32_of(p.per_layer.len(), "permutation layers")?.to_le_bytes());
            for layer in &p.per_layer {
                b.extend_from_slice(&u32_of(layer.len(), "permutation length")?.to_le_bytes());
                for &v in layer {
                    b.extend_from_slice(&u32_of(v, "permutation entry")?.to_le_bytes());
                }
            }
        }
    }
    let crc = crc32fast::hash(&b);
    b.extend_from_slice(&crc.to_le_bytes());
    Ok(b)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| bad("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| bad("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 8 {
        return Err(bad("truncated"));
    }
    if &bytes[..8] != MAGIC {
        return Err(bad("bad magic"));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(bad("crc mismatch"));
    }
    let mut r = Reader { buf: body, pos: 8 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version} (expected {VERSION})")));
    }
    let arch = match r.u8()? {
        0 => ArchKind::Mlp,
        1 => ArchKind::ShallowCnn,
        k => return Err(bad(format!("unknown architecture tag {k}"))),
    };
    let in_shape = Shape3::new(r.usize()?, r.usize()?, r.usize()?);
    let num_classes = r.usize()?;
    let init_seed = r.u64()?;
    let n_layers = r.usize()?;
    let mut layers = Vec::with_capacity(n_layers.min(1024));
    for _ in 0..n_layers {
        let kind_tag = r.u8()?;
        let activation = match r.u8()? {
            0 => Activation::None,
            1 => Activation::Relu,
            k => return Err(bad(format!("unknown activation tag {k}"))),
        };
        let has_bias = match r.u8()? {
            0 => false,
            1 => true,
            k => return Err(bad(format!("bad bias flag {k}"))),
        };
        let out_dim = r.usize()?;
        let in_dim = r.usize()?;
        let in_spatial = (r.usize()?, r.usize()?);
        let (kernel, stride, padding) = (r.usize()?, r.usize()?, r.usize()?);
        let kind = match kind_tag {
            0 => LayerKind::Dense,
            1 => LayerKind::Conv2d {
                kernel,
                stride,
                padding,
            },
            k => return Err(bad(format!("unknown layer tag {k}"))),
        };
        let n_weight = r.usize()?;
        let weight = r.f32s(n_weight)?;
        let bias = if has_bias { Some(r.f32s(out_dim)?) } else { None };
        layers.push(Layer {
            kind,
            out_dim,
            in_dim,
            in_spatial,
            weight,
            bias,
            activation,
        });
    }
    let net = Network {
        arch,
        in_shape,
        num_classes,
        init_seed,
        layers,
    };
    net.validate().map_err(|e| bad(format!("inconsistent network: {e}")))?;
    let meta_len = r.usize()?;
    let meta: CheckpointMeta =
        serde_json::from_slice(r.take(meta_len)?).map_err(|e| bad(format!("meta: {e}")))?;
    let perm = match r.u8()? {
        0 => None,
        1 => {
            let n = r.usize()?;
            let mut per_layer = Vec::with_capacity(n.min(1024));
            for _ in 0..n {
                let len = r.usize()?;
                let mut v = Vec::with_capacity(len.min(1 << 20));
                for _ in 0..len {
                    v.push(r.usize()?);
                }
                per_layer.push(v);
            }
            Some(Permutation::new(per_layer)?)
        }
        k => return Err(bad(format!("bad permutation flag {k}"))),
    };
    if r.pos != body.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(Checkpoint { net, meta, perm })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let bytes = encode(ck)?;
    std::fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    decode(&bytes)
}

/// Number of layer records in an encoded checkpoint.
pub fn layer_records(bytes: &[u8]) -> Result<usize> {
    let mut r = Reader { buf: bytes, pos: 8 + 4 + 1 + 16 + 8 };
    r.usize()
}
