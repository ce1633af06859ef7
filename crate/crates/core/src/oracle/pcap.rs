//! Classic pcap reading and writing (magic 0xa1b2c3d4, either byte order,
//! Ethernet link type). No pcapng.

use std::fs::File;
use std::io::{self, BufReader, Read, Write};
use std::path::Path;

use thiserror::Error;

const MAGIC_NATIVE: u32 = 0xA1B2_C3D4;
const MAGIC_SWAPPED: u32 = 0xD4C3_B2A1;
const LINKTYPE_ETHERNET: u32 = 1;
// incl_len guard against corrupt records
const MAX_CAPLEN: u32 = 64 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum PcapError {
    #[error("io error at offset {offset}: {source}")]
    Io {
        offset: u64,
        #[source]
        source: io::Error,
    },
    #[error("bad magic {magic:#010x} at offset 0")]
    BadMagic { magic: u32 },
    #[error("unsupported link type {0} (only Ethernet)")]
    LinkType(u32),
    #[error("truncated record at offset {offset}: wanted {wanted} bytes")]
    TruncatedRecord { offset: u64, wanted: usize },
    #[error("implausible captured length {caplen} at offset {offset}")]
    BadCapLen { offset: u64, caplen: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PcapPacket {
    pub data: Vec<u8>,
    pub ts_sec: u32,
    pub ts_usec: u32,
    /// Original wire length (may exceed `data.len()` for snapped captures).
    pub orig_len: u32,
}

/// Streaming reader over a classic pcap file.
pub struct PcapReader<R: Read> {
    inner: R,
    swapped: bool,
    offset: u64,
}

impl PcapReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self, PcapError> {
        let f = File::open(path).map_err(|source| PcapError::Io { offset: 0, source })?;
        PcapReader::new(BufReader::new(f))
    }
}

impl<R: Read> PcapReader<R> {
    pub fn new(mut inner: R) -> Result<Self, PcapError> {
        let mut hdr = [0u8; 24];
        inner
            .read_exact(&mut hdr)
            .map_err(|source| PcapError::Io { offset: 0, source })?;
        let magic = u32::from_be_bytes([hdr[0], hdr[1], hdr[2], hdr[3]]);
        // the file is read as-written; from_be of the native magic means the
        // writer used big-endian fields
        let swapped = match magic {
            MAGIC_NATIVE => false,
            MAGIC_SWAPPED => true,
            other => return Err(PcapError::BadMagic { magic: other }),
        };
        let rd = |b: &[u8]| {
            if swapped {
                u32::from_le_bytes([b[0], b[1], b[2], b[3]])
            } else {
                u32::from_be_bytes([b[0], b[1], b[2], b[3]])
            }
        };
        let linktype = rd(&hdr[20..24]);
        if linktype != LINKTYPE_ETHERNET {
            return Err(PcapError::LinkType(linktype));
        }
        Ok(PcapReader {
            inner,
            swapped,
            offset: 24,
        })
    }

    pub fn is_swapped(&self) -> bool {
        self.swapped
    }

    fn read_u32(&self, b: &[u8]) -> u32 {
        if self.swapped {
            u32::from_le_bytes([b[0], b[1], b[2], b[3]])
        } else {
            u32::from_be_bytes([b[0], b[1], b[2], b[3]])
        }
    }
}

impl<R: Read> Iterator for PcapReader<R> {
    type Item = Result<PcapPacket, PcapError>;

    fn next(&mut self) -> Option<Self::Item> {
        let mut rec = [0u8; 16];
        match self.inner.read_exact(&mut rec) {
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => {
                // distinguish a clean EOF from a half record
                return None;
            }
            Err(source) => {
                return Some(Err(PcapError::Io {
                    offset: self.offset,
                    source,
                }))
            }
            Ok(()) => {}
        }
        let ts_sec = self.read_u32(&rec[0..4]);
        let ts_usec = self.read_u32(&rec[4..8]);
        let caplen = self.read_u32(&rec[8..12]);
        let orig_len = self.read_u32(&rec[12..16]);
        if caplen > MAX_CAPLEN {
            return Some(Err(PcapError::BadCapLen {
                offset: self.offset + 8,
                caplen,
            }));
        }
        let mut data = vec![0u8; caplen as usize];
        if let Err(e) = self.inner.read_exact(&mut data) {
            let kind = e.kind();
            let err = if kind == io::ErrorKind::UnexpectedEof {
                PcapError::TruncatedRecord {
                    offset: self.offset + 16,
                    wanted: caplen as usize,
                }
            } else {
                PcapError::Io {
                    offset: self.offset + 16,
                    source: e,
                }
            };
            return Some(Err(err));
        }
        self.offset += 16 + u64::from(caplen);
        Some(Ok(PcapPacket {
            data,
            ts_sec,
            ts_usec,
            orig_len,
        }))
    }
}

/// Packet bytes plus the `(seconds, microseconds)` capture timestamp.
pub type TimestampedPacket = (Vec<u8>, (u32, u32));

/// Opens a classic pcap file and yields `(packet bytes, (sec, usec))` in
/// file order, honoring each record's captured length.
pub fn read_pcap(
    path: &Path,
) -> Result<impl Iterator<Item = Result<TimestampedPacket, PcapError>>, PcapError> {
    let rd = PcapReader::open(path)?;
    Ok(rd.map(|r| r.map(|p| (p.data, (p.ts_sec, p.ts_usec)))))
}

/// Writes a classic pcap file; `swapped` selects the byte-swapped magic so
/// round-trip tests can exercise both endiannesses.
pub fn write_pcap<W: Write>(
    mut w: W,
    packets: &[(Vec<u8>, (u32, u32))],
    swapped: bool,
) -> io::Result<()> {
    let put32 = |v: u32| {
        if swapped {
            v.to_le_bytes()
        } else {
            v.to_be_bytes()
        }
    };
    let put16 = |v: u16| {
        if swapped {
            v.to_le_bytes()
        } else {
            v.to_be_bytes()
        }
    };
    w.write_all(&put32(MAGIC_NATIVE))?;
    w.write_all(&put16(2))?; // version
    w.write_all(&put16(4))?;
    w.write_all(&put32(0))?; // thiszone
    w.write_all(&put32(0))?; // sigfigs
    w.write_all(&put32(65535))?; // snaplen
    w.write_all(&put32(LINKTYPE_ETHERNET))?;
    for (data, (sec, usec)) in packets {
        w.write_all(&put32(*sec))?;
        w.write_all(&put32(*usec))?;
        w.write_all(&put32(data.len() as u32))?;
        w.write_all(&put32(data.len() as u32))?;
        w.write_all(data)?;
    }
    Ok(())
}
