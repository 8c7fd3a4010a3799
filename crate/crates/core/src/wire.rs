//! Binary framing shared by the broker, its clients and the environment workers.
//!
//! Every frame is little-endian and self-delimiting, so frames can be read
//! back-to-back from a TCP stream without an outer length prefix.
//!
//! Request:
//!
//! ```text
//! "RLXB" | opcode u8 | key_len u32 | key bytes | [tensor]      (tensor only for PUT)
//! ```
//!
//! Response:
//!
//! ```text
//! status u8 | body_tag u8 | body
//!   body_tag 0: no body
//!   body_tag 1: tensor      (GET answered with OK)
//!   body_tag 2: exists u8   (EXISTS answered with OK)
//! ```
//!
//! Tensor:
//!
//! ```text
//! dtype u8 | ndim u8 | dims (ndim x u64) | raw element bytes (row-major, LE)
//! ```

use std::io::{self, Read, Write};

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"RLXB";
pub const MAX_KEY_LEN: usize = 256;
pub const MAX_TENSOR_BYTES: u64 = 1 << 31;
pub const MAX_NDIM: usize = 8;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("truncated frame")]
    TruncatedFrame,
    #[error("unknown opcode {0}")]
    UnknownOpcode(u8),
    #[error("unknown dtype {0}")]
    UnknownDtype(u8),
    #[error("unknown status {0}")]
    UnknownStatus(u8),
    #[error("key of {0} bytes exceeds the {MAX_KEY_LEN} byte limit")]
    OversizedKey(usize),
    #[error("tensor payload of {0} bytes exceeds the 2 GiB limit")]
    OversizedTensor(u64),
    #[error("invalid key {0:?}")]
    InvalidKey(String),
    #[error("invalid tensor shape: {0}")]
    BadShape(String),
    #[error("malformed frame: {0}")]
    Malformed(&'static str),
    #[error("dtype mismatch: expected {expected:?}, found {found:?}")]
    DtypeMismatch { expected: DType, found: DType },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, WireError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum DType {
    F32 = 1,
    F64 = 2,
    U8 = 3,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }

    pub fn from_u8(tag: u8) -> Result<Self> {
        match tag {
            1 => Ok(DType::F32),
            2 => Ok(DType::F64),
            3 => Ok(DType::U8),
            other => Err(WireError::UnknownDtype(other)),
        }
    }
}

/// A dtype-tagged, row-major n-dimensional array stored as raw little-endian bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tensor {
    dtype: DType,
    shape: Vec<u64>,
    data: Vec<u8>,
}

fn byte_len(dtype: DType, shape: &[u64]) -> Result<u64> {
    shape
        .iter()
        .try_fold(dtype.size() as u64, |acc, &d| acc.checked_mul(d))
        .ok_or(WireError::OversizedTensor(u64::MAX))
}

impl Tensor {
    pub fn new(dtype: DType, shape: Vec<u64>, data: Vec<u8>) -> Result<Self> {
        if shape.len() > MAX_NDIM {
            return Err(WireError::BadShape(format!("ndim {} > {MAX_NDIM}", shape.len())));
        }
        let expected = byte_len(dtype, &shape)?;
        if expected > MAX_TENSOR_BYTES {
            return Err(WireError::OversizedTensor(expected));
        }
        if expected != data.len() as u64 {
            return Err(WireError::BadShape(format!(
                "shape {shape:?} needs {expected} bytes, got {}",
                data.len()
            )));
        }
        Ok(Self { dtype, shape, data })
    }

    pub fn from_f64(shape: Vec<u64>, values: &[f64]) -> Result<Self> {
        let data = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self::new(DType::F64, shape, data)
    }

    pub fn from_f32(shape: Vec<u64>, values: &[f32]) -> Result<Self> {
        let data = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self::new(DType::F32, shape, data)
    }

    pub fn from_u8(shape: Vec<u64>, values: &[u8]) -> Result<Self> {
        Self::new(DType::U8, shape, values.to_vec())
    }

    /// Rank-1 F64 tensor.
    pub fn vector_f64(values: &[f64]) -> Self {
        Self::from_f64(vec![values.len() as u64], values).expect("vector shape always matches")
    }

    pub fn scalar_u8(value: u8) -> Self {
        Self::from_u8(vec![1], &[value]).expect("scalar shape always matches")
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &[u64] {
        &self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len() / self.dtype.size()
    }

    pub fn to_f64(&self) -> Result<Vec<f64>> {
        match self.dtype {
            DType::F64 => Ok(self
                .data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect()),
            DType::F32 => Ok(self
                .data
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
                .collect()),
            found => Err(WireError::DtypeMismatch { expected: DType::F64, found }),
        }
    }

    pub fn to_u8(&self) -> Result<Vec<u8>> {
        match self.dtype {
            DType::U8 => Ok(self.data.clone()),
            found => Err(WireError::DtypeMismatch { expected: DType::U8, found }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Opcode {
    Put = 1,
    Get = 2,
    Exists = 3,
    Del = 4,
    Ping = 5,
}

impl Opcode {
    pub fn from_u8(tag: u8) -> Result<Self> {
        match tag {
            1 => Ok(Opcode::Put),
            2 => Ok(Opcode::Get),
            3 => Ok(Opcode::Exists),
            4 => Ok(Opcode::Del),
            5 => Ok(Opcode::Ping),
            other => Err(WireError::UnknownOpcode(other)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    Put { key: String, tensor: Tensor },
    Get { key: String },
    Exists { key: String },
    Del { key: String },
    Ping { key: String },
}

impl Message {
    pub fn opcode(&self) -> Opcode {
        match self {
            Message::Put { .. } => Opcode::Put,
            Message::Get { .. } => Opcode::Get,
            Message::Exists { .. } => Opcode::Exists,
            Message::Del { .. } => Opcode::Del,
            Message::Ping { .. } => Opcode::Ping,
        }
    }

    pub fn key(&self) -> &str {
        match self {
            Message::Put { key, .. }
            | Message::Get { key }
            | Message::Exists { key }
            | Message::Del { key }
            | Message::Ping { key } => key,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Status {
    Ok = 0,
    NotFound = 1,
    BadRequest = 2,
    Internal = 3,
}

impl Status {
    pub fn from_u8(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Status::Ok),
            1 => Ok(Status::NotFound),
            2 => Ok(Status::BadRequest),
            3 => Ok(Status::Internal),
            other => Err(WireError::UnknownStatus(other)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ResponseBody {
    Empty,
    Tensor(Tensor),
    Exists(bool),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub status: Status,
    pub body: ResponseBody,
}

impl Response {
    pub fn ok() -> Self {
        Self { status: Status::Ok, body: ResponseBody::Empty }
    }

    pub fn with_tensor(tensor: Tensor) -> Self {
        Self { status: Status::Ok, body: ResponseBody::Tensor(tensor) }
    }

    pub fn exists(flag: bool) -> Self {
        Self { status: Status::Ok, body: ResponseBody::Exists(flag) }
    }

    pub fn error(status: Status) -> Self {
        Self { status, body: ResponseBody::Empty }
    }
}

const BODY_EMPTY: u8 = 0;
const BODY_TENSOR: u8 = 1;
const BODY_EXISTS: u8 = 2;

pub fn validate_key(key: &str) -> Result<()> {
    if key.len() > MAX_KEY_LEN {
        return Err(WireError::OversizedKey(key.len()));
    }
    if key.is_empty() || key.chars().any(char::is_whitespace) {
        return Err(WireError::InvalidKey(key.to_owned()));
    }
    Ok(())
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.push(t.dtype as u8);
    out.push(t.shape.len() as u8);
    for d in &t.shape {
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&t.data);
}

pub fn encode_message(msg: &Message) -> Result<Vec<u8>> {
    let key = msg.key();
    validate_key(key)?;
    let payload = match msg {
        Message::Put { tensor, .. } => tensor.data.len() + 2 + 8 * tensor.shape.len(),
        _ => 0,
    };
    let mut out = Vec::with_capacity(9 + key.len() + payload);
    out.extend_from_slice(&MAGIC);
    out.push(msg.opcode() as u8);
    out.extend_from_slice(&(key.len() as u32).to_le_bytes());
    out.extend_from_slice(key.as_bytes());
    if let Message::Put { tensor, .. } = msg {
        if tensor.data.len() as u64 > MAX_TENSOR_BYTES {
            return Err(WireError::OversizedTensor(tensor.data.len() as u64));
        }
        put_tensor(&mut out, tensor);
    }
    Ok(out)
}

pub fn encode_response(resp: &Response) -> Result<Vec<u8>> {
    let mut out = vec![resp.status as u8];
    match (&resp.body, resp.status) {
        (ResponseBody::Empty, _) => out.push(BODY_EMPTY),
        (ResponseBody::Tensor(t), Status::Ok) => {
            out.push(BODY_TENSOR);
            put_tensor(&mut out, t);
        }
        (ResponseBody::Exists(flag), Status::Ok) => {
            out.push(BODY_EXISTS);
            out.push(u8::from(*flag));
        }
        _ => return Err(WireError::Malformed("non-OK response carrying a body")),
    }
    Ok(out)
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(eof_as_truncated)?;
    Ok(buf)
}

fn eof_as_truncated(e: io::Error) -> WireError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        WireError::TruncatedFrame
    } else {
        WireError::Io(e)
    }
}

fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let [dtype, ndim] = read_array::<2, _>(r)?;
    let dtype = DType::from_u8(dtype)?;
    let ndim = ndim as usize;
    if ndim > MAX_NDIM {
        return Err(WireError::BadShape(format!("ndim {ndim} > {MAX_NDIM}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(u64::from_le_bytes(read_array::<8, _>(r)?));
    }
    let len = byte_len(dtype, &shape)?;
    if len > MAX_TENSOR_BYTES {
        return Err(WireError::OversizedTensor(len));
    }
    let mut data = Vec::new();
    let got = r.take(len).read_to_end(&mut data)?;
    if got as u64 != len {
        return Err(WireError::TruncatedFrame);
    }
    Ok(Tensor { dtype, shape, data })
}

/// Reads one request frame. `Ok(None)` means the stream ended cleanly on a
/// frame boundary.
pub fn read_message<R: Read>(r: &mut R) -> Result<Option<Message>> {
    let mut magic = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        match r.read(&mut magic[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(WireError::TruncatedFrame),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        }
    }
    if magic != MAGIC {
        return Err(WireError::BadMagic(magic));
    }
    let [op] = read_array::<1, _>(r)?;
    let op = Opcode::from_u8(op)?;
    let key_len = u32::from_le_bytes(read_array::<4, _>(r)?) as usize;
    if key_len > MAX_KEY_LEN {
        return Err(WireError::OversizedKey(key_len));
    }
    let mut key = vec![0u8; key_len];
    r.read_exact(&mut key).map_err(eof_as_truncated)?;
    let key = String::from_utf8(key).map_err(|_| WireError::Malformed("key is not UTF-8"))?;
    validate_key(&key)?;
    Ok(Some(match op {
        Opcode::Put => Message::Put { key, tensor: read_tensor(r)? },
        Opcode::Get => Message::Get { key },
        Opcode::Exists => Message::Exists { key },
        Opcode::Del => Message::Del { key },
        Opcode::Ping => Message::Ping { key },
    }))
}

pub fn read_response<R: Read>(r: &mut R) -> Result<Response> {
    let [status, tag] = read_array::<2, _>(r)?;
    let status = Status::from_u8(status)?;
    let body = match tag {
        BODY_EMPTY => ResponseBody::Empty,
        BODY_TENSOR => ResponseBody::Tensor(read_tensor(r)?),
        BODY_EXISTS => match read_array::<1, _>(r)? {
            [0] => ResponseBody::Exists(false),
            [1] => ResponseBody::Exists(true),
            _ => return Err(WireError::Malformed("exists flag must be 0 or 1")),
        },
        _ => return Err(WireError::Malformed("unknown response body tag")),
    };
    if status != Status::Ok && body != ResponseBody::Empty {
        return Err(WireError::Malformed("non-OK response carrying a body"));
    }
    Ok(Response { status, body })
}

pub fn decode_message(bytes: &[u8]) -> Result<Message> {
    let mut cursor = bytes;
    let msg = read_message(&mut cursor)?.ok_or(WireError::TruncatedFrame)?;
    if !cursor.is_empty() {
        return Err(WireError::Malformed("trailing bytes after frame"));
    }
    Ok(msg)
}

pub fn decode_response(bytes: &[u8]) -> Result<Response> {
    let mut cursor = bytes;
    let resp = read_response(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(WireError::Malformed("trailing bytes after frame"));
    }
    Ok(resp)
}

pub fn write_message<W: Write>(w: &mut W, msg: &Message) -> Result<()> {
    w.write_all(&encode_message(msg)?)?;
    Ok(())
}

pub fn write_response<W: Write>(w: &mut W, resp: &Response) -> Result<()> {
    w.write_all(&encode_response(resp)?)?;
    Ok(())
}

/// Appends a tensor in wire layout; used by the dataset and checkpoint files.
pub fn write_tensor<W: Write>(w: &mut W, tensor: &Tensor) -> Result<()> {
    let mut out = Vec::with_capacity(tensor.data.len() + 2 + 8 * tensor.shape.len());
    put_tensor(&mut out, tensor);
    w.write_all(&out)?;
    Ok(())
}

pub fn read_tensor_from<R: Read>(r: &mut R) -> Result<Tensor> {
    read_tensor(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ping_is_nine_bytes() {
        let bytes = encode_message(&Message::Ping { key: "x".into() }).unwrap();
        assert_eq!(bytes, b"RLXB\x05\x01\x00\x00\x00x");
    }

    #[test]
    fn put_zero_scalar_layout() {
        let t = Tensor::from_f64(vec![1], &[0.0]).unwrap();
        let bytes = encode_message(&Message::Put { key: "k".into(), tensor: t }).unwrap();
        let mut expected = b"RLXB\x01\x01\x00\x00\x00k".to_vec();
        expected.extend_from_slice(&[0x02, 0x01]);
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&[0u8; 8]);
        assert_eq!(bytes, expected);
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = encode_message(&Message::Get { key: "a".into() }).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_message(&bytes), Err(WireError::BadMagic(m)) if &m == b"XXXX"));
    }

    #[test]
    fn truncated_payload_rejected() {
        let t = Tensor::vector_f64(&[1.0, 2.0, 3.0]);
        let bytes = encode_message(&Message::Put { key: "k".into(), tensor: t }).unwrap();
        for cut in 1..bytes.len() {
            assert!(
                matches!(decode_message(&bytes[..cut]), Err(WireError::TruncatedFrame)),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn unknown_opcode_and_dtype() {
        let mut bytes = encode_message(&Message::Get { key: "a".into() }).unwrap();
        bytes[4] = 9;
        assert!(matches!(decode_message(&bytes), Err(WireError::UnknownOpcode(9))));

        let t = Tensor::vector_f64(&[1.0]);
        let mut bytes = encode_message(&Message::Put { key: "a".into(), tensor: t }).unwrap();
        bytes[10] = 7;
        assert!(matches!(decode_message(&bytes), Err(WireError::UnknownDtype(7))));
    }

    #[test]
    fn key_limits() {
        let long = "a".repeat(257);
        assert!(matches!(
            encode_message(&Message::Get { key: long }),
            Err(WireError::OversizedKey(257))
        ));
        assert!(encode_message(&Message::Get { key: "a".repeat(256) }).is_ok());
        assert!(matches!(
            encode_message(&Message::Get { key: String::new() }),
            Err(WireError::InvalidKey(_))
        ));
        assert!(matches!(
            encode_message(&Message::Get { key: "a b".into() }),
            Err(WireError::InvalidKey(_))
        ));
    }

    #[test]
    fn tensor_invariants() {
        assert!(Tensor::new(DType::F64, vec![2], vec![0; 8]).is_err());
        assert!(Tensor::new(DType::U8, vec![1; 9], vec![0]).is_err());
        assert!(Tensor::new(DType::U8, vec![1; 8], vec![0]).is_ok());
        // Rank 0 is a single element.
        assert!(Tensor::new(DType::F32, vec![], vec![0; 4]).is_ok());
        assert!(matches!(
            Tensor::new(DType::F64, vec![1 << 30, 1 << 30], vec![]),
            Err(WireError::OversizedTensor(_))
        ));
    }

    #[test]
    fn oversized_tensor_header_does_not_allocate() {
        let mut bytes = b"RLXB\x01\x01\x00\x00\x00k".to_vec();
        bytes.extend_from_slice(&[0x02, 0x01]);
        bytes.extend_from_slice(&(u64::MAX / 2).to_le_bytes());
        assert!(matches!(decode_message(&bytes), Err(WireError::OversizedTensor(_))));
    }

    #[test]
    fn response_layouts() {
        assert_eq!(encode_response(&Response::ok()).unwrap(), vec![0, 0]);
        assert_eq!(encode_response(&Response::error(Status::NotFound)).unwrap(), vec![1, 0]);
        assert_eq!(encode_response(&Response::exists(true)).unwrap(), vec![0, 2, 1]);
        let bad = Response { status: Status::NotFound, body: ResponseBody::Exists(false) };
        assert!(encode_response(&bad).is_err());
        assert!(decode_response(&[1, 2, 0]).is_err());
        assert!(matches!(decode_response(&[9, 0]), Err(WireError::UnknownStatus(9))));
    }

    #[test]
    fn clean_eof_between_frames() {
        let mut stream: &[u8] = &[];
        assert!(read_message(&mut stream).unwrap().is_none());
        let mut stream: &[u8] = b"RL";
        assert!(matches!(read_message(&mut stream), Err(WireError::TruncatedFrame)));
    }

    fn arb_key() -> impl Strategy<Value = String> {
        "[a-zA-Z0-9._:/-]{1,64}"
    }

    fn arb_tensor() -> impl Strategy<Value = Tensor> {
        (prop_oneof![Just(DType::F32), Just(DType::F64), Just(DType::U8)], prop::collection::vec(0u64..5, 0..4))
            .prop_flat_map(|(dtype, shape)| {
                let n = shape.iter().product::<u64>() as usize * dtype.size();
                prop::collection::vec(any::<u8>(), n)
                    .prop_map(move |data| Tensor::new(dtype, shape.clone(), data).unwrap())
            })
    }

    fn arb_message() -> impl Strategy<Value = Message> {
        prop_oneof![
            (arb_key(), arb_tensor()).prop_map(|(key, tensor)| Message::Put { key, tensor }),
            arb_key().prop_map(|key| Message::Get { key }),
            arb_key().prop_map(|key| Message::Exists { key }),
            arb_key().prop_map(|key| Message::Del { key }),
            arb_key().prop_map(|key| Message::Ping { key }),
        ]
    }

    fn arb_response() -> impl Strategy<Value = Response> {
        prop_oneof![
            Just(Response::ok()),
            any::<bool>().prop_map(Response::exists),
            arb_tensor().prop_map(Response::with_tensor),
            prop_oneof![Just(Status::NotFound), Just(Status::BadRequest), Just(Status::Internal)]
                .prop_map(Response::error),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn message_round_trip(msg in arb_message()) {
            let bytes = encode_message(&msg).unwrap();
            prop_assert_eq!(decode_message(&bytes).unwrap(), msg);
        }

        #[test]
        fn response_round_trip(resp in arb_response()) {
            let bytes = encode_response(&resp).unwrap();
            prop_assert_eq!(decode_response(&bytes).unwrap(), resp);
        }

        #[test]
        fn encoding_is_injective(a in arb_message(), b in arb_message()) {
            let (ea, eb) = (encode_message(&a).unwrap(), encode_message(&b).unwrap());
            prop_assert_eq!(a == b, ea == eb);
        }
    }
}
