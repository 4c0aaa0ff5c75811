//! Binary checkpoints.
//!
//! Little-endian throughout:
//!
//! ```text
//! [u8; 8]  magic "FFMCKPT\0"
//! u32      schema version
//! u32 ×5   patch, hidden, latent, image height, image width
//! u64      round
//! u64      master seed
//! u64      parameter count N
//! f64 ×N   theta
//! u64      optimizer round
//! f64 ×N   momentum buffer
//! f64 ×N   first moment
//! f64 ×N   second moment
//! u32      generator count G
//! G × (u64 stream, u128 word position)
//! u64      checksum (first 8 bytes of SHA-256 over everything above)
//! ```

use std::path::Path;

use crate::aggregation::ServerOptState;
use crate::error::{CheckpointError, Error, Result};
use crate::mae::MaeShape;
use crate::numeric::{checksum64, ParamVector};
use crate::orchestrator::{Federation, FederationConfig, FederationState};

pub const MAGIC: [u8; 8] = *b"FFMCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub shape: MaeShape,
    pub height: u32,
    pub width: u32,
    pub seed: u64,
    pub state: FederationState,
}

impl Checkpoint {
    pub fn capture(fed: &Federation) -> Self {
        let cfg = fed.config();
        Checkpoint {
            shape: cfg.model,
            height: cfg.synth.height as u32,
            width: cfg.synth.width as u32,
            seed: cfg.seed,
            state: fed.state(),
        }
    }

    /// Fails unless the checkpoint was written under `cfg`'s model, image size and seed.
    pub fn check_compatible(&self, cfg: &FederationConfig) -> Result<()> {
        let ours = (cfg.model, cfg.synth.height as u32, cfg.synth.width as u32, cfg.seed);
        let theirs = (self.shape, self.height, self.width, self.seed);
        if ours != theirs {
            return Err(Error::Config(format!(
                "checkpoint (shape {:?}, {}x{}, seed {}) does not match the config (shape {:?}, {}x{}, seed {})",
                theirs.0, theirs.1, theirs.2, theirs.3, ours.0, ours.1, ours.2, ours.3
            )));
        }
        Ok(())
    }

    /// Restores `fed` from this checkpoint.
    pub fn resume(&self, fed: &mut Federation) -> Result<()> {
        self.check_compatible(fed.config())?;
        fed.restore(&self.state)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.state;
        let n = s.theta.len();
        let mut out = Vec::with_capacity(64 + 32 * n + 24 * s.rng_counters.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for v in [
            self.shape.patch as u32,
            self.shape.hidden as u32,
            self.shape.latent as u32,
            self.height,
            self.width,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&s.round.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        out.extend_from_slice(&s.theta.to_le_bytes());
        out.extend_from_slice(&s.opt.round.to_le_bytes());
        out.extend_from_slice(&s.opt.momentum.to_le_bytes());
        out.extend_from_slice(&s.opt.first_moment.to_le_bytes());
        out.extend_from_slice(&s.opt.second_moment.to_le_bytes());
        out.extend_from_slice(&(s.rng_counters.len() as u32).to_le_bytes());
        for (stream, counter) in &s.rng_counters {
            out.extend_from_slice(&stream.to_le_bytes());
            out.extend_from_slice(&counter.to_le_bytes());
        }
        let sum = checksum64(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() || bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut r = Reader {
            bytes,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Incompatible {
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        if bytes.len() < r.pos + 8 {
            return Err(CheckpointError::Truncated);
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        if checksum64(body) != u64::from_le_bytes(tail.try_into().expect("8 bytes")) {
            return Err(CheckpointError::Checksum);
        }
        let mut r = Reader {
            bytes: body,
            pos: r.pos,
        };
        let shape = MaeShape {
            patch: r.u32()? as usize,
            hidden: r.u32()? as usize,
            latent: r.u32()? as usize,
        };
        let height = r.u32()?;
        let width = r.u32()?;
        let round = r.u64()?;
        let seed = r.u64()?;
        let n = r.u64()?;
        if shape.patch == 0 || n != shape.num_params() as u64 {
            return Err(CheckpointError::Shape(format!(
                "{}/{}/{} expects {} parameters, payload has {n}",
                shape.patch,
                shape.hidden,
                shape.latent,
                shape.num_params()
            )));
        }
        let theta = r.vector(n)?;
        let opt_round = r.u64()?;
        let momentum = r.vector(n)?;
        let first_moment = r.vector(n)?;
        let second_moment = r.vector(n)?;
        let g = r.u32()?;
        let mut rng_counters = Vec::new();
        for _ in 0..g {
            let stream = r.u64()?;
            let counter = u128::from_le_bytes(r.take()?);
            rng_counters.push((stream, counter));
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Shape(format!(
                "{} unexpected trailing bytes",
                body.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            shape,
            height,
            width,
            seed,
            state: FederationState {
                round,
                theta,
                opt: ServerOptState {
                    round: opt_round,
                    momentum,
                    first_moment,
                    second_moment,
                },
                rng_counters,
            },
        })
    }
}

/// Writes `ckpt` to `path` atomically.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    crate::report::write_atomic(path, &ckpt.to_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(format!("checkpoint {}", path.display())),
        _ => Error::io(path, e),
    })?;
    Ok(Checkpoint::from_bytes(&bytes)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        let end = self
            .pos
            .checked_add(N)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(CheckpointError::Truncated)?;
        let out = self.bytes[self.pos..end].try_into().expect("length checked");
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take()?))
    }

    fn vector(&mut self, n: u64) -> Result<ParamVector, CheckpointError> {
        let end = usize::try_from(n)
            .ok()
            .and_then(|n| n.checked_mul(8))
            .and_then(|b| b.checked_add(self.pos))
            .filter(|&e| e <= self.bytes.len())
            .ok_or(CheckpointError::Truncated)?;
        let values = self.bytes[self.pos..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        self.pos = end;
        ParamVector::new(values).map_err(|e| CheckpointError::Shape(e.to_string()))
    }
}
