//! Append-only commit journal.
//!
//! One frame per commit: `u32` body length, then the body
//! `u64 version, u32 count, count × (u32 keylen, key, u8 tag[, u32 vallen, value])`
//! with tag 1 for a value and 0 for a tombstone. All integers little-endian.
//! A torn trailing frame is discarded on open.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::Path;

use super::StoreError;

pub(super) type Commit = (u64, Vec<(String, Option<Vec<u8>>)>);

#[derive(Debug)]
pub(super) struct Journal {
    file: File,
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

fn decode_body(body: &[u8]) -> Option<Commit> {
    let mut c = Cursor { buf: body, pos: 0 };
    let version = c.u64()?;
    let count = c.u32()?;
    let mut writes = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let klen = c.u32()? as usize;
        let key = String::from_utf8(c.take(klen)?.to_vec()).ok()?;
        let value = match c.take(1)?[0] {
            0 => None,
            1 => {
                let vlen = c.u32()? as usize;
                Some(c.take(vlen)?.to_vec())
            }
            _ => return None,
        };
        writes.push((key, value));
    }
    (c.pos == body.len()).then_some((version, writes))
}

impl Journal {
    pub(super) fn open(path: &Path) -> Result<(Journal, Vec<Commit>), StoreError> {
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)?;
        let mut buf = Vec::new();
        file.read_to_end(&mut buf)?;
        let mut commits = Vec::new();
        let mut pos = 0usize;
        while pos + 4 <= buf.len() {
            let len = u32::from_le_bytes(buf[pos..pos + 4].try_into().unwrap()) as usize;
            let Some(body) = buf.get(pos + 4..pos + 4 + len) else {
                break;
            };
            let commit = decode_body(body)
                .ok_or_else(|| StoreError::Corrupt(format!("bad frame at offset {pos}")))?;
            commits.push(commit);
            pos += 4 + len;
        }
        if pos != buf.len() {
            log::warn!(
                "discarding {} bytes of torn journal tail at {}",
                buf.len() - pos,
                path.display()
            );
            file.set_len(pos as u64)?;
            file.seek(SeekFrom::End(0))?;
        }
        Ok((Journal { file }, commits))
    }

    pub(super) fn append(
        &mut self,
        version: u64,
        writes: &BTreeMap<String, Option<Vec<u8>>>,
    ) -> io::Result<()> {
        let mut body = Vec::new();
        body.extend_from_slice(&version.to_le_bytes());
        body.extend_from_slice(&(writes.len() as u32).to_le_bytes());
        for (key, value) in writes {
            body.extend_from_slice(&(key.len() as u32).to_le_bytes());
            body.extend_from_slice(key.as_bytes());
            match value {
                None => body.push(0),
                Some(v) => {
                    body.push(1);
                    body.extend_from_slice(&(v.len() as u32).to_le_bytes());
                    body.extend_from_slice(v);
                }
            }
        }
        let mut frame = Vec::with_capacity(body.len() + 4);
        frame.extend_from_slice(&(body.len() as u32).to_le_bytes());
        frame.extend_from_slice(&body);
        self.file.write_all(&frame)?;
        self.file.sync_data()
    }
}
