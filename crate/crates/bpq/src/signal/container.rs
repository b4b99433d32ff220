//! `BPSEG1` container: a flat little-endian binary layout.
//!
//! ```text
//! bytes 0..6   magic "BPSEG1"
//! byte  6      version = 1
//! byte  7      reserved = 0
//! bytes 8..16  u64 segment count N
//! then N records of 1250 f32 ECG, 1250 f32 PPG, f32 SBP, f32 DBP
//! ```
//!
//! Total size is `16 + N * (2*1250*4 + 8)` bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DataError, Result, SegmentDataset, SignalSegment, SEQ_LEN};

const MAGIC: &[u8; 6] = b"BPSEG1";
const VERSION: u8 = 1;
/// Bytes per segment record.
pub const RECORD_BYTES: u64 = (2 * SEQ_LEN as u64) * 4 + 8;
/// Header bytes before the first record.
pub const HEADER_BYTES: u64 = 16;

/// Serializes a dataset; returns the byte count written.
pub fn write_container(ds: &SegmentDataset, path: &Path) -> Result<u64> {
    if ds.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, 0])?;
    w.write_all(&(ds.len() as u64).to_le_bytes())?;
    for seg in &ds.segments {
        for ch in [&seg.ecg, &seg.ppg] {
            for &v in ch.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.write_all(&seg.sbp.to_le_bytes())?;
        w.write_all(&seg.dbp.to_le_bytes())?;
    }
    w.flush()?;
    Ok(HEADER_BYTES + ds.len() as u64 * RECORD_BYTES)
}

/// Reads a container back. The returned dataset carries the `"external"`
/// source tag; segment payloads round-trip bit-exactly.
pub fn read_container(path: &Path) -> Result<SegmentDataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = [0u8; 16];
    r.read_exact(&mut header).map_err(short_header)?;
    if &header[0..6] != MAGIC {
        let mut found = [0u8; 6];
        found.copy_from_slice(&header[0..6]);
        return Err(DataError::BadMagic { found });
    }
    if header[6] != VERSION {
        return Err(DataError::UnsupportedVersion(header[6]));
    }
    let count = u64::from_le_bytes(header[8..16].try_into().expect("8 bytes"));
    if count == 0 {
        return Err(DataError::EmptyDataset);
    }

    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let expected = count * RECORD_BYTES;
    match (payload.len() as u64).cmp(&expected) {
        std::cmp::Ordering::Less => {
            return Err(DataError::Truncated {
                expected,
                got: payload.len() as u64,
            })
        }
        std::cmp::Ordering::Greater => {
            return Err(DataError::TrailingData {
                extra: payload.len() as u64 - expected,
            })
        }
        std::cmp::Ordering::Equal => {}
    }

    let mut segments = Vec::with_capacity(count as usize);
    let mut off = 0usize;
    let read_f32 = |off: &mut usize| {
        let v = f32::from_le_bytes(payload[*off..*off + 4].try_into().expect("4 bytes"));
        *off += 4;
        v
    };
    for i in 0..count as usize {
        let ecg: Vec<f32> = (0..SEQ_LEN).map(|_| read_f32(&mut off)).collect();
        let ppg: Vec<f32> = (0..SEQ_LEN).map(|_| read_f32(&mut off)).collect();
        let sbp = read_f32(&mut off);
        let dbp = read_f32(&mut off);
        SignalSegment::validate(&ecg, &ppg, sbp, dbp, i)?;
        segments.push(SignalSegment { ecg, ppg, sbp, dbp });
    }
    SegmentDataset::new(segments, "external")
}

fn short_header(e: std::io::Error) -> DataError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        DataError::Truncated {
            expected: HEADER_BYTES,
            got: 0,
        }
    } else {
        DataError::Io(e)
    }
}
