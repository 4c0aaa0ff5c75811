//! Wire framing for client updates.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! u16  version
//! u64  round
//! u32  node id
//! u64  local sample count
//! u64  delta length N          ┐
//! f64  delta[N]                │ payload
//! u32  loss-trace length M     │
//! f64  loss_trace[M]           ┘
//! u64  checksum (first 8 bytes of SHA-256 over the payload)
//! ```

use crate::error::ProtocolError;
use crate::numeric::{checksum64, ParamVector};
use crate::trainer::ClientUpdate;

pub const PROTOCOL_VERSION: u16 = 1;

const HEADER_LEN: usize = 2 + 8 + 4 + 8;

/// Byte offset of the first delta value in a frame.
pub const DELTA_OFFSET: usize = HEADER_LEN + 8;

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateMessage {
    pub version: u16,
    pub round: u64,
    pub node_id: u32,
    pub num_samples: u64,
    pub delta: Vec<f64>,
    pub loss_trace: Vec<f64>,
    pub checksum: u64,
}

fn payload_bytes(delta: &[f64], trace: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * (delta.len() + trace.len()));
    out.extend_from_slice(&(delta.len() as u64).to_le_bytes());
    for v in delta {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(trace.len() as u32).to_le_bytes());
    for v in trace {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Frames `update` for `round`.
pub fn encode_update(update: &ClientUpdate, round: u64, version: u16) -> Result<UpdateMessage, ProtocolError> {
    UpdateMessage::new(
        version,
        round,
        update.node_id,
        update.num_samples,
        update.delta.as_slice().to_vec(),
        update.loss_trace.clone(),
    )
}

/// Verifies version and checksum and rebuilds the update.
pub fn decode_update(msg: &UpdateMessage, expected_version: u16) -> Result<ClientUpdate, ProtocolError> {
    if msg.version != expected_version {
        return Err(ProtocolError::VersionMismatch {
            expected: expected_version,
            found: msg.version,
        });
    }
    if msg.checksum != checksum64(&payload_bytes(&msg.delta, &msg.loss_trace)) {
        return Err(ProtocolError::Checksum {
            node: msg.node_id,
            round: msg.round,
        });
    }
    let delta = ParamVector::new(msg.delta.clone()).map_err(|_| ProtocolError::EmptyDelta { node: msg.node_id })?;
    Ok(ClientUpdate {
        node_id: msg.node_id,
        num_samples: msg.num_samples,
        delta,
        loss_trace: msg.loss_trace.clone(),
    })
}

impl UpdateMessage {
    pub fn new(
        version: u16,
        round: u64,
        node_id: u32,
        num_samples: u64,
        delta: Vec<f64>,
        loss_trace: Vec<f64>,
    ) -> Result<Self, ProtocolError> {
        if delta.is_empty() {
            return Err(ProtocolError::EmptyDelta { node: node_id });
        }
        let checksum = checksum64(&payload_bytes(&delta, &loss_trace));
        Ok(UpdateMessage {
            version,
            round,
            node_id,
            num_samples,
            delta,
            loss_trace,
            checksum,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 20 + 8 * (self.delta.len() + self.loss_trace.len()));
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.node_id.to_le_bytes());
        out.extend_from_slice(&self.num_samples.to_le_bytes());
        out.extend_from_slice(&payload_bytes(&self.delta, &self.loss_trace));
        out.extend_from_slice(&self.checksum.to_le_bytes());
        out
    }

    /// Parses a frame without validating its checksum; see [`decode_update`].
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ProtocolError> {
        let mut r = Reader { bytes, pos: 0 };
        let version = u16::from_le_bytes(r.take()?);
        let round = u64::from_le_bytes(r.take()?);
        let node_id = u32::from_le_bytes(r.take()?);
        let num_samples = u64::from_le_bytes(r.take()?);
        let n = u64::from_le_bytes(r.take()?);
        let delta = r.floats(n)?;
        let m = u32::from_le_bytes(r.take()?);
        let loss_trace = r.floats(m as u64)?;
        let checksum = u64::from_le_bytes(r.take()?);
        if r.pos != bytes.len() {
            return Err(ProtocolError::TrailingBytes {
                extra: bytes.len() - r.pos,
            });
        }
        Ok(UpdateMessage {
            version,
            round,
            node_id,
            num_samples,
            delta,
            loss_trace,
            checksum,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], ProtocolError> {
        let end = self.pos + N;
        if end > self.bytes.len() {
            return Err(ProtocolError::Truncated {
                needed: end,
                available: self.bytes.len(),
            });
        }
        let mut out = [0u8; N];
        out.copy_from_slice(&self.bytes[self.pos..end]);
        self.pos = end;
        Ok(out)
    }

    fn floats(&mut self, count: u64) -> Result<Vec<f64>, ProtocolError> {
        let needed = usize::try_from(count)
            .ok()
            .and_then(|c| c.checked_mul(8))
            .and_then(|b| b.checked_add(self.pos))
            .filter(|end| *end <= self.bytes.len())
            .ok_or(ProtocolError::Truncated {
                needed: usize::MAX,
                available: self.bytes.len(),
            })?;
        let out = self.bytes[self.pos..needed]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        self.pos = needed;
        Ok(out)
    }
}
