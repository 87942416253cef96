//! `SOET` binary trajectory files.
//!
//! ```text
//! offset  size      field
//! 0       4         magic "SOET"
//! 4       4         version (u32, = 1)
//! 8       4         T, number of states (u32, > 0)
//! 12      4         d, state dimension (u32, > 0)
//! 16      4         layer tag (u32)
//! 20      4         flags (u32): bit 0 token block, bit 1 correctness byte
//! 24      4·T·d     states, f32, row-major
//! …       …         token block: T × (u32 byte length, UTF-8 bytes)
//! …       1         correctness byte (0 or 1)
//! ```
//!
//! All integers and floats are little-endian. States are held as `f64` in
//! memory and rounded to `f32` on write, so trajectories read from disk
//! round-trip bit-exactly.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::spectral::StateTrajectory;

pub const MAGIC: &[u8; 4] = b"SOET";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;

pub const FLAG_TOKENS: u32 = 1;
pub const FLAG_CORRECTNESS: u32 = 1 << 1;
const KNOWN_FLAGS: u32 = FLAG_TOKENS | FLAG_CORRECTNESS;

fn to_u32(x: usize, what: &str) -> Result<u32> {
    u32::try_from(x).map_err(|_| Error::invalid(format!("{what} {x} does not fit in 32 bits")))
}

pub fn encode_trajectory(traj: &StateTrajectory) -> Result<Vec<u8>> {
    if traj.is_empty() {
        return Err(Error::invalid("cannot write an empty trajectory"));
    }
    let t = to_u32(traj.len(), "state count")?;
    let d = to_u32(traj.dim(), "dimension")?;
    let mut flags = 0;
    if traj.token_texts().is_some() {
        flags |= FLAG_TOKENS;
    }
    if traj.correctness_label().is_some() {
        flags |= FLAG_CORRECTNESS;
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * traj.as_flat().len());
    out.extend_from_slice(MAGIC);
    for field in [VERSION, t, d, traj.layer_tag(), flags] {
        out.extend_from_slice(&field.to_le_bytes());
    }
    for &x in traj.as_flat() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    if let Some(tokens) = traj.token_texts() {
        for tok in tokens {
            out.extend_from_slice(&to_u32(tok.len(), "token length")?.to_le_bytes());
            out.extend_from_slice(tok.as_bytes());
        }
    }
    if let Some(c) = traj.correctness_label() {
        out.push(u8::from(c));
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!(
                "truncated {what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            ))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode_trajectory(buf: &[u8]) -> Result<StateTrajectory> {
    let mut cur = Cursor { buf, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, not a SOET trajectory".into()));
    }
    let version = cur.u32("header")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let t = cur.u32("header")? as usize;
    let d = cur.u32("header")? as usize;
    let layer_tag = cur.u32("header")?;
    let flags = cur.u32("header")?;
    if t == 0 || d == 0 {
        return Err(Error::Format(format!("empty trajectory header (T={t}, d={d})")));
    }
    if flags & !KNOWN_FLAGS != 0 {
        return Err(Error::Format(format!("unknown flag bits {flags:#x}")));
    }
    let n = t
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format("payload size overflows".into()))?;
    let payload = cur.take(n, "payload")?;
    let states: Vec<f64> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let mut traj = StateTrajectory::new(d, states)
        .map_err(|e| Error::Format(format!("invalid payload: {e}")))?
        .with_layer_tag(layer_tag);
    if flags & FLAG_TOKENS != 0 {
        let mut tokens = Vec::with_capacity(t);
        for _ in 0..t {
            let len = cur.u32("token block")? as usize;
            let bytes = cur.take(len, "token block")?;
            let s = std::str::from_utf8(bytes)
                .map_err(|e| Error::Format(format!("token is not UTF-8: {e}")))?;
            tokens.push(s.to_owned());
        }
        traj = traj.with_tokens(tokens)?;
    }
    if flags & FLAG_CORRECTNESS != 0 {
        let label = match cur.take(1, "correctness byte")?[0] {
            0 => false,
            1 => true,
            other => return Err(Error::Format(format!("correctness byte {other} is not 0/1"))),
        };
        traj = traj.with_correctness(Some(label));
    }
    if cur.pos != buf.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after trajectory",
            buf.len() - cur.pos
        )));
    }
    Ok(traj)
}

pub fn write_trajectory(traj: &StateTrajectory, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_trajectory(traj)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_trajectory(path: impl AsRef<Path>) -> Result<StateTrajectory> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_trajectory(&bytes)
}
