//! Binary encodings: the parameter payload, synchronization messages, blob
//! keys, and poll filters.
//!
//! Parameter payload layout (all little-endian):
//! magic "FTXP", version u16, layer count u16, then per layer:
//! name length u16 + UTF-8 name, rank u8, dims as u32, values as f32
//! row-major. Values are f32 on the wire, f64 in memory.

use crate::error::{Error, Result};
use crate::seqnet::{ArchitectureSpec, CellKind, ModelParameters, NamedTensor};

use super::{BlobKey, Endpoint, MessageFilter, MessageKind, SyncMessage};

pub const MAGIC: [u8; 4] = *b"FTXP";
pub const VERSION: u16 = 1;

/// Bytes one synchronization message occupies on the wire.
pub const MESSAGE_WIRE_BYTES: u64 = 17;

const SERVER_SENTINEL: u32 = u32::MAX;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Cursor<'a> {
        Cursor { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated);
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
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

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Serializes a parameter set to the deterministic wire layout.
pub fn serialize_params(params: &ModelParameters) -> Result<Vec<u8>> {
    params.check_finite()?;
    let mut out = Vec::with_capacity(16 + 4 * params.parameter_count());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.layers().len() as u16).to_le_bytes());
    for layer in params.layers() {
        let name = layer.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(layer.values.ndim() as u8);
        for &dim in layer.values.shape() {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in layer.values.iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses the payload into named tensors without checking them against any
/// architecture.
pub fn parse_payload(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut cur = Cursor::new(bytes);
    if cur.take(4)? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = cur.u16()?;
    if version != VERSION {
        return Err(Error::BadVersion(version));
    }
    let layer_count = cur.u16()? as usize;
    let mut layers = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let name_len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Malformed("layer name is not UTF-8".into()))?
            .to_owned();
        let rank = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let count: usize = shape.iter().product();
        let mut values = Vec::with_capacity(count);
        for _ in 0..count {
            values.push(cur.f32()? as f64);
        }
        let values = ndarray::ArrayD::from_shape_vec(shape, values)
            .map_err(|e| Error::Malformed(format!("layer {name:?}: {e}")))?;
        layers.push(NamedTensor { name, values });
    }
    if !cur.done() {
        return Err(Error::Malformed("trailing bytes after last layer".into()));
    }
    Ok(layers)
}

/// Restores parameters, validating the layout against the expected
/// architecture. Values come back exactly as stored (f32-rounded).
pub fn deserialize_params(bytes: &[u8], expected: &ArchitectureSpec) -> Result<ModelParameters> {
    ModelParameters::from_layers(*expected, parse_payload(bytes)?)
}

/// Reconstructs an architecture from payload shapes alone. Dropout rate and
/// sequence length are not stored, so the caller supplies them.
pub fn infer_arch(bytes: &[u8], dropout_rate: f64, max_seq_len: usize) -> Result<ArchitectureSpec> {
    let layers = parse_payload(bytes)?;
    let find = |name: &str| -> Result<&NamedTensor> {
        layers
            .iter()
            .find(|l| l.name == name)
            .ok_or_else(|| Error::Malformed(format!("payload has no layer {name:?}")))
    };
    let w_input = find("recurrent.w_input")?;
    let w_hidden = find("recurrent.w_hidden")?;
    let dense = find("dense.weight")?;
    let head_b = find("head.bias")?;
    let units = w_hidden.values.shape()[0];
    if units == 0 || w_input.values.shape()[1] % units != 0 {
        return Err(Error::Malformed("inconsistent recurrent shapes".into()));
    }
    let cell_kind = match w_input.values.shape()[1] / units {
        1 => CellKind::Rnn,
        3 => CellKind::Gru,
        4 => CellKind::Lstm,
        g => return Err(Error::Malformed(format!("unsupported gate count {g}"))),
    };
    Ok(ArchitectureSpec {
        cell_kind,
        embed_dim: w_input.values.shape()[0],
        recurrent_units: units,
        dense_units: dense.values.shape()[1],
        num_classes: head_b.values.len(),
        dropout_rate,
        max_seq_len,
    })
}

pub fn encode_key(key: &BlobKey) -> [u8; 9] {
    let mut out = [0u8; 9];
    let (tag, round, client) = match key {
        BlobKey::Global { round } => (0u8, *round, SERVER_SENTINEL),
        BlobKey::Local { round, client_id } => (1u8, *round, *client_id),
    };
    out[0] = tag;
    out[1..5].copy_from_slice(&round.to_le_bytes());
    out[5..9].copy_from_slice(&client.to_le_bytes());
    out
}

pub fn decode_key(bytes: &[u8]) -> Result<BlobKey> {
    let mut cur = Cursor::new(bytes);
    let tag = cur.u8()?;
    let round = cur.u32()?;
    let client = cur.u32()?;
    match tag {
        0 => Ok(BlobKey::Global { round }),
        1 => Ok(BlobKey::Local {
            round,
            client_id: client,
        }),
        other => Err(Error::Malformed(format!("unknown key tag {other}"))),
    }
}

fn encode_endpoint(endpoint: Endpoint) -> u32 {
    match endpoint {
        Endpoint::Server => SERVER_SENTINEL,
        Endpoint::Client(id) => id,
    }
}

fn decode_endpoint(raw: u32) -> Endpoint {
    if raw == SERVER_SENTINEL {
        Endpoint::Server
    } else {
        Endpoint::Client(raw)
    }
}

pub fn encode_message(msg: &SyncMessage) -> [u8; MESSAGE_WIRE_BYTES as usize] {
    let mut out = [0u8; MESSAGE_WIRE_BYTES as usize];
    out[0] = match msg.kind {
        MessageKind::ClientDone => 0,
        MessageKind::GlobalPublished => 1,
    };
    out[1..5].copy_from_slice(&msg.round.to_le_bytes());
    out[5..9].copy_from_slice(&encode_endpoint(msg.sender).to_le_bytes());
    out[9..17].copy_from_slice(&msg.timestamp_ms.to_le_bytes());
    out
}

pub fn decode_message(bytes: &[u8]) -> Result<SyncMessage> {
    let mut cur = Cursor::new(bytes);
    let kind = match cur.u8()? {
        0 => MessageKind::ClientDone,
        1 => MessageKind::GlobalPublished,
        other => return Err(Error::Malformed(format!("unknown message kind {other}"))),
    };
    Ok(SyncMessage {
        kind,
        round: cur.u32()?,
        sender: decode_endpoint(cur.u32()?),
        timestamp_ms: cur.u64()?,
    })
}

pub fn encode_filter(filter: &MessageFilter) -> [u8; 10] {
    let mut out = [0u8; 10];
    let mut flags = 0u8;
    if let Some(kind) = filter.kind {
        flags |= 1;
        out[1] = match kind {
            MessageKind::ClientDone => 0,
            MessageKind::GlobalPublished => 1,
        };
    }
    if let Some(round) = filter.round {
        flags |= 2;
        out[2..6].copy_from_slice(&round.to_le_bytes());
    }
    if let Some(sender) = filter.sender {
        flags |= 4;
        out[6..10].copy_from_slice(&encode_endpoint(sender).to_le_bytes());
    }
    out[0] = flags;
    out
}

pub fn decode_filter(bytes: &[u8]) -> Result<MessageFilter> {
    let mut cur = Cursor::new(bytes);
    let flags = cur.u8()?;
    let kind_raw = cur.u8()?;
    let round = cur.u32()?;
    let sender = cur.u32()?;
    Ok(MessageFilter {
        kind: (flags & 1 != 0)
            .then(|| match kind_raw {
                0 => Ok(MessageKind::ClientDone),
                1 => Ok(MessageKind::GlobalPublished),
                other => Err(Error::Malformed(format!("unknown message kind {other}"))),
            })
            .transpose()?,
        round: (flags & 2 != 0).then_some(round),
        sender: (flags & 4 != 0).then(|| decode_endpoint(sender)),
    })
}
