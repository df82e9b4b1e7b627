//! Append-only log of applied operations, for restarting a server.

use std::fs::{File, OpenOptions};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::Path;

use super::Applied;
use crate::protocol::{AuthRecord, OpRecord};
use crate::transport::tcp::{read_frame, write_frame};
use crate::wire::{Decode, DecodeError, Encode, Reader, Writer};

impl<O: Encode> Encode for Applied<O> {
    fn encode(&self, w: &mut Writer) {
        w.u64(self.seqno).put(&self.record).put(&self.auth);
    }
}

impl<O: Decode> Decode for Applied<O> {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Applied {
            seqno: r.u64()?,
            record: r.get::<OpRecord<O>>()?,
            auth: r.get::<Option<AuthRecord>>()?,
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LogError {
    #[error("log i/o: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt log record {index}: {source}")]
    Corrupt { index: usize, source: DecodeError },
}

pub struct ServerLog {
    out: BufWriter<File>,
}

impl ServerLog {
    pub fn open(path: impl AsRef<Path>) -> io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(ServerLog {
            out: BufWriter::new(file),
        })
    }

    /// Appends one record and hands it to the OS, so it survives the
    /// process being killed. [`ServerLog::flush`] also syncs the file.
    pub fn append<O: Encode>(&mut self, entry: &Applied<O>) -> io::Result<()> {
        write_frame(&mut self.out, &entry.to_bytes())?;
        self.out.flush()
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.out.flush()?;
        self.out.get_ref().sync_data()
    }
}

/// Reads every record of the log at `path`; a missing file is an empty log.
/// A record cut short by a crash ends the log.
pub fn read_log<O: Decode>(path: impl AsRef<Path>) -> Result<Vec<Applied<O>>, LogError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut input = BufReader::new(file);
    let mut out = Vec::new();
    loop {
        match read_frame(&mut input) {
            Ok(Some(bytes)) => {
                let entry = Applied::from_bytes(&bytes).map_err(|source| LogError::Corrupt {
                    index: out.len(),
                    source,
                })?;
                out.push(entry);
            }
            Ok(None) => break,
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => {
                log::warn!("server log ends in a partial record; ignoring it");
                break;
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(out)
}
