//! Binary wire protocol and on-disk model format.
//!
//! Frame layout (10-byte header + payload):
//!
//! ```text
//! "FCAR"  version  msg_type  payload_len   payload
//! 4 bytes  1 byte   1 byte   u32 big-endian
//! ```
//!
//! Payload numerics are little-endian. A tensor block is `tensor_count: u32`,
//! then per tensor `rank: u32`, `dims: rank x u32`, and the values as f64 in
//! row-major order. A saved model file is exactly one tensor block, so the
//! same bytes flow over sockets and into `model.bin`.
//!
//! Decoding is strict: wrong magic, unknown version or type, truncation,
//! oversized payloads, and trailing bytes are all distinct errors — a
//! corrupted byte can only produce a diagnostic, never a model.

use crate::error::{Error, Result, WireError};
use crate::params::{AdapterParams, AffineLayer, ClassifierParams, ModelParams, TrainMode};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"FCAR";
pub const WIRE_VERSION: u8 = 1;
/// Upper bound on a single payload; generous for desk-scale models.
pub const MAX_PAYLOAD: usize = 256 * 1024 * 1024;
/// Frame header size in bytes.
pub const HEADER_LEN: usize = 10;

/// Message kinds, in protocol order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MsgType {
    /// Client -> server: u32 client id.
    Hello = 1,
    /// Server -> client: UTF-8 run-config snapshot.
    Init = 2,
    /// Server -> client: u32 round + model tensor block.
    GlobalModel = 3,
    /// Client -> server: u32 round + model tensor block.
    LocalModel = 4,
    /// Client -> server: u32 round + UTF-8 metrics lines.
    Metrics = 5,
    /// Server -> client: empty payload, ends the session.
    Shutdown = 6,
    /// Either direction: UTF-8 diagnostic; the session is over.
    Error = 7,
}

impl MsgType {
    pub fn from_u8(b: u8) -> std::result::Result<MsgType, WireError> {
        Ok(match b {
            1 => MsgType::Hello,
            2 => MsgType::Init,
            3 => MsgType::GlobalModel,
            4 => MsgType::LocalModel,
            5 => MsgType::Metrics,
            6 => MsgType::Shutdown,
            7 => MsgType::Error,
            other => return Err(WireError::UnknownType(other)),
        })
    }
}

/// One protocol message: a type tag and its raw payload bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WireMessage {
    pub msg_type: MsgType,
    pub payload: Vec<u8>,
}

impl WireMessage {
    pub fn new(msg_type: MsgType, payload: Vec<u8>) -> Self {
        Self { msg_type, payload }
    }
}

/// Serialize a message into a framed byte vector.
pub fn encode(msg: &WireMessage) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + msg.payload.len());
    out.extend_from_slice(&MAGIC);
    out.push(WIRE_VERSION);
    out.push(msg.msg_type as u8);
    out.extend_from_slice(&(msg.payload.len() as u32).to_be_bytes());
    out.extend_from_slice(&msg.payload);
    out
}

/// Decode exactly one frame from a buffer; trailing bytes are an error.
pub fn decode(bytes: &[u8]) -> Result<WireMessage> {
    let (msg, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(WireError::TrailingBytes(bytes.len() - used).into());
    }
    Ok(msg)
}

/// Decode one frame from the front of a buffer, returning the bytes consumed.
pub fn decode_prefix(bytes: &[u8]) -> Result<(WireMessage, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(WireError::Truncated { needed: HEADER_LEN, have: bytes.len() }.into());
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(WireError::BadMagic(magic).into());
    }
    if bytes[4] != WIRE_VERSION {
        return Err(WireError::BadVersion(bytes[4]).into());
    }
    let msg_type = MsgType::from_u8(bytes[5])?;
    let len = u32::from_be_bytes(bytes[6..10].try_into().unwrap()) as usize;
    if len > MAX_PAYLOAD {
        return Err(WireError::Oversize { len, cap: MAX_PAYLOAD }.into());
    }
    let total = HEADER_LEN + len;
    if bytes.len() < total {
        return Err(WireError::Truncated { needed: total, have: bytes.len() }.into());
    }
    Ok((WireMessage::new(msg_type, bytes[HEADER_LEN..total].to_vec()), total))
}

/// Write one framed message and flush.
pub fn write_message<W: Write>(w: &mut W, msg: &WireMessage) -> Result<()> {
    w.write_all(&encode(msg))?;
    w.flush()?;
    Ok(())
}

/// Read one framed message. EOF before a complete frame reports exactly how
/// many bytes were expected.
pub fn read_message<R: Read>(r: &mut R) -> Result<WireMessage> {
    let mut header = [0u8; HEADER_LEN];
    read_full(r, &mut header, 0)?;
    if header[0..4] != MAGIC {
        return Err(WireError::BadMagic(header[0..4].try_into().unwrap()).into());
    }
    if header[4] != WIRE_VERSION {
        return Err(WireError::BadVersion(header[4]).into());
    }
    let msg_type = MsgType::from_u8(header[5])?;
    let len = u32::from_be_bytes(header[6..10].try_into().unwrap()) as usize;
    if len > MAX_PAYLOAD {
        return Err(WireError::Oversize { len, cap: MAX_PAYLOAD }.into());
    }
    let mut payload = vec![0u8; len];
    read_full(r, &mut payload, HEADER_LEN)?;
    Ok(WireMessage::new(msg_type, payload))
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8], already: usize) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(WireError::Truncated {
                    needed: already + buf.len(),
                    have: already + filled,
                }
                .into())
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

// ---- tensor block ----------------------------------------------------------

/// A dense tensor: dims and row-major values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<u32>,
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, values.len());
        Self { dims: vec![rows as u32, cols as u32], values }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Self { dims: vec![values.len() as u32], values }
    }
}

/// Serialize tensors: count, then per tensor rank + dims + f64 values, all
/// little-endian.
pub fn tensors_to_bytes(tensors: &[Tensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
        for &d in &t.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in &t.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parse a tensor block, validating dims against the actual byte count. The
/// whole buffer must be consumed.
pub fn tensors_from_bytes(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut at = 0usize;
    let take_u32 = |at: &mut usize| -> Result<u32> {
        let end = *at + 4;
        if bytes.len() < end {
            return Err(WireError::Truncated { needed: end, have: bytes.len() }.into());
        }
        let v = u32::from_le_bytes(bytes[*at..end].try_into().unwrap());
        *at = end;
        Ok(v)
    };
    let count = take_u32(&mut at)?;
    let mut tensors = Vec::with_capacity(count as usize);
    for i in 0..count {
        let rank = take_u32(&mut at)?;
        if rank == 0 || rank > 8 {
            return Err(WireError::Payload(format!("tensor {i}: rank {rank} out of range 1..=8")).into());
        }
        let mut dims = Vec::with_capacity(rank as usize);
        let mut elems: usize = 1;
        for _ in 0..rank {
            let d = take_u32(&mut at)?;
            if d == 0 {
                return Err(WireError::Payload(format!("tensor {i}: zero dimension")).into());
            }
            elems = elems
                .checked_mul(d as usize)
                .ok_or_else(|| WireError::Payload(format!("tensor {i}: size overflow")))?;
            dims.push(d);
        }
        let end = at
            .checked_add(elems * 8)
            .ok_or_else(|| WireError::Payload(format!("tensor {i}: size overflow")))?;
        if bytes.len() < end {
            return Err(WireError::Truncated { needed: end, have: bytes.len() }.into());
        }
        let values: Vec<f64> = bytes[at..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        at = end;
        tensors.push(Tensor { dims, values });
    }
    if at != bytes.len() {
        return Err(WireError::TrailingBytes(bytes.len() - at).into());
    }
    Ok(tensors)
}

// ---- model <-> tensors ------------------------------------------------------

/// Flatten a model into its tensor block: adapter, then `[pre_w, pre_b]` when
/// the pre-classifier exists, then `out_w`, `out_b`. Matrices are
/// `[out_dim, in_dim]` row-major, matching [`AffineLayer`] storage.
pub fn model_to_tensors(model: &ModelParams) -> Vec<Tensor> {
    let mut tensors = Vec::with_capacity(5);
    tensors.push(Tensor::matrix(
        model.adapter.dim,
        model.adapter.dim,
        model.adapter.weight.clone(),
    ));
    if let Some(pre) = &model.classifier.pre {
        tensors.push(Tensor::matrix(pre.out_dim, pre.in_dim, pre.weight.clone()));
        tensors.push(Tensor::vector(pre.bias.clone()));
    }
    let out = &model.classifier.output;
    tensors.push(Tensor::matrix(out.out_dim, out.in_dim, out.weight.clone()));
    tensors.push(Tensor::vector(out.bias.clone()));
    tensors
}

/// Rebuild a model from its tensor block. The tensor count (3 or 5) decides
/// whether a pre-classifier layer exists; every dimension relation is checked
/// before any tensor is accepted.
pub fn model_from_tensors(
    tensors: &[Tensor],
    mode: TrainMode,
    dropout_rate: f64,
) -> Result<ModelParams> {
    fn matrix(t: &Tensor, what: &str) -> Result<(usize, usize, Vec<f64>)> {
        if t.dims.len() != 2 {
            return Err(WireError::Payload(format!("{what}: expected rank 2, got {}", t.dims.len())).into());
        }
        Ok((t.dims[0] as usize, t.dims[1] as usize, t.values.clone()))
    }
    fn vector(t: &Tensor, what: &str) -> Result<Vec<f64>> {
        if t.dims.len() != 1 {
            return Err(WireError::Payload(format!("{what}: expected rank 1, got {}", t.dims.len())).into());
        }
        Ok(t.values.clone())
    }
    let (pre, out_at) = match tensors.len() {
        3 => (None, 1),
        5 => {
            let (rows, cols, weight) = matrix(&tensors[1], "pre-classifier weight")?;
            let bias = vector(&tensors[2], "pre-classifier bias")?;
            if bias.len() != rows {
                return Err(WireError::Payload(format!(
                    "pre-classifier bias has {} entries for {rows} rows",
                    bias.len()
                ))
                .into());
            }
            (Some(AffineLayer { in_dim: cols, out_dim: rows, weight, bias }), 3)
        }
        n => {
            return Err(WireError::Payload(format!("model block has {n} tensors, expected 3 or 5")).into())
        }
    };
    let (a_rows, a_cols, a_weight) = matrix(&tensors[0], "adapter")?;
    if a_rows != a_cols {
        return Err(WireError::Payload(format!("adapter is {a_rows}x{a_cols}, not square")).into());
    }
    let (o_rows, o_cols, o_weight) = matrix(&tensors[out_at], "output weight")?;
    let o_bias = vector(&tensors[out_at + 1], "output bias")?;
    if o_bias.len() != o_rows {
        return Err(WireError::Payload(format!(
            "output bias has {} entries for {o_rows} rows",
            o_bias.len()
        ))
        .into());
    }
    if let Some(p) = &pre {
        if p.out_dim != o_cols {
            return Err(WireError::Payload(format!(
                "output expects {o_cols} inputs but pre-classifier emits {}",
                p.out_dim
            ))
            .into());
        }
    }
    let model = ModelParams {
        adapter: AdapterParams { dim: a_rows, weight: a_weight },
        classifier: ClassifierParams {
            pre,
            dropout_rate,
            output: AffineLayer { in_dim: o_cols, out_dim: o_rows, weight: o_weight, bias: o_bias },
        },
        mode,
    };
    if !model.all_finite() {
        return Err(Error::NonFinite("model tensors"));
    }
    Ok(model)
}

/// Write a model file: exactly the tensor block bytes.
pub fn save_model(path: &Path, model: &ModelParams) -> Result<()> {
    std::fs::write(path, tensors_to_bytes(&model_to_tensors(model)))?;
    Ok(())
}

/// Read a model file written by [`save_model`].
pub fn load_model(path: &Path, mode: TrainMode, dropout_rate: f64) -> Result<ModelParams> {
    let bytes = std::fs::read(path)?;
    model_from_tensors(&tensors_from_bytes(&bytes)?, mode, dropout_rate)
}

// ---- message payloads -------------------------------------------------------

/// Client id announcement.
pub fn hello_message(client_id: u32) -> WireMessage {
    WireMessage::new(MsgType::Hello, client_id.to_le_bytes().to_vec())
}

pub fn parse_hello(msg: &WireMessage) -> Result<u32> {
    expect_type(msg, MsgType::Hello)?;
    if msg.payload.len() != 4 {
        return Err(WireError::Payload(format!("hello payload is {} bytes, expected 4", msg.payload.len())).into());
    }
    Ok(u32::from_le_bytes(msg.payload[..].try_into().unwrap()))
}

/// Run-config snapshot for a joining client.
pub fn init_message(config_text: &str) -> WireMessage {
    WireMessage::new(MsgType::Init, config_text.as_bytes().to_vec())
}

pub fn parse_init(msg: &WireMessage) -> Result<String> {
    expect_type(msg, MsgType::Init)?;
    utf8(&msg.payload, "init config")
}

/// A model broadcast (`GlobalModel`) or release (`LocalModel`) for a round.
pub fn model_message(msg_type: MsgType, round: u32, model: &ModelParams) -> Result<WireMessage> {
    if !matches!(msg_type, MsgType::GlobalModel | MsgType::LocalModel) {
        return Err(Error::Contract(format!("{msg_type:?} does not carry a model")));
    }
    let mut payload = round.to_le_bytes().to_vec();
    payload.extend_from_slice(&tensors_to_bytes(&model_to_tensors(model)));
    Ok(WireMessage::new(msg_type, payload))
}

pub fn parse_model_message(
    msg: &WireMessage,
    expected: MsgType,
    mode: TrainMode,
    dropout_rate: f64,
) -> Result<(u32, ModelParams)> {
    expect_type(msg, expected)?;
    if msg.payload.len() < 4 {
        return Err(WireError::Truncated { needed: 4, have: msg.payload.len() }.into());
    }
    let round = u32::from_le_bytes(msg.payload[0..4].try_into().unwrap());
    let tensors = tensors_from_bytes(&msg.payload[4..])?;
    Ok((round, model_from_tensors(&tensors, mode, dropout_rate)?))
}

/// Metrics lines for a round (client records in log-line format).
pub fn metrics_message(round: u32, lines: &str) -> WireMessage {
    let mut payload = round.to_le_bytes().to_vec();
    payload.extend_from_slice(lines.as_bytes());
    WireMessage::new(MsgType::Metrics, payload)
}

pub fn parse_metrics(msg: &WireMessage) -> Result<(u32, String)> {
    expect_type(msg, MsgType::Metrics)?;
    if msg.payload.len() < 4 {
        return Err(WireError::Truncated { needed: 4, have: msg.payload.len() }.into());
    }
    let round = u32::from_le_bytes(msg.payload[0..4].try_into().unwrap());
    Ok((round, utf8(&msg.payload[4..], "metrics lines")?))
}

/// Session end.
pub fn shutdown_message() -> WireMessage {
    WireMessage::new(MsgType::Shutdown, Vec::new())
}

/// Fatal diagnostic.
pub fn error_message(text: &str) -> WireMessage {
    WireMessage::new(MsgType::Error, text.as_bytes().to_vec())
}

pub fn parse_error(msg: &WireMessage) -> Result<String> {
    expect_type(msg, MsgType::Error)?;
    utf8(&msg.payload, "error text")
}

fn expect_type(msg: &WireMessage, want: MsgType) -> Result<()> {
    if msg.msg_type != want {
        return Err(Error::Protocol(format!("expected {want:?}, got {:?}", msg.msg_type)));
    }
    Ok(())
}

fn utf8(bytes: &[u8], what: &str) -> Result<String> {
    String::from_utf8(bytes.to_vec())
        .map_err(|_| WireError::Payload(format!("{what}: invalid UTF-8")).into())
}
