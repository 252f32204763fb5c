//! Record file container: a fixed 32-byte header followed by little-endian
//! 32-bit record words.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{stream::validate_divider, Mode, RecordError, ResolutionCode};

/// File signature, first eight bytes of every record file.
pub const FILE_MAGIC: [u8; 8] = *b"QKDTTAG\0";
/// Size of the fixed header in bytes.
pub const HEADER_LEN: usize = 32;
const FORMAT_VERSION: u8 = 1;
const MODE_T2: u8 = 2;
const MODE_T3: u8 = 3;

#[derive(Debug, Error)]
pub enum FileError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("byte {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error(transparent)]
    Record(#[from] RecordError),
}

fn format_err<T>(offset: u64, message: impl Into<String>) -> Result<T, FileError> {
    Err(FileError::Format {
        offset,
        message: message.into(),
    })
}

/// Metadata stored ahead of the record words.
///
/// `sync_period_ps` is the period of the undivided sync input; T2 files that
/// carry no sync channel may set it to zero. T2 files always use the base
/// 5 ps resolution (code 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FileHeader {
    pub mode: Mode,
    pub resolution: ResolutionCode,
    pub channel_count: u32,
    pub sync_divider: u32,
    pub sync_period_ps: u64,
}

impl FileHeader {
    pub fn validate(&self) -> Result<(), FileError> {
        if self.mode == Mode::T2 && self.resolution.code() != 0 {
            return format_err(10, "T2 files must use resolution code 0");
        }
        if self.channel_count < 1 || self.channel_count > 65 {
            return format_err(12, format!("channel count {} outside [1, 65]", self.channel_count));
        }
        validate_divider(self.sync_divider)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<[u8; HEADER_LEN], FileError> {
        self.validate()?;
        let mut buf = [0u8; HEADER_LEN];
        buf[0..8].copy_from_slice(&FILE_MAGIC);
        buf[8] = FORMAT_VERSION;
        buf[9] = match self.mode {
            Mode::T2 => MODE_T2,
            Mode::T3 => MODE_T3,
        };
        buf[10] = self.resolution.code();
        // buf[11] reserved
        buf[12..16].copy_from_slice(&self.channel_count.to_le_bytes());
        buf[16..20].copy_from_slice(&self.sync_divider.to_le_bytes());
        buf[20..28].copy_from_slice(&self.sync_period_ps.to_le_bytes());
        // buf[28..32] reserved
        Ok(buf)
    }

    pub fn from_bytes(buf: &[u8; HEADER_LEN]) -> Result<Self, FileError> {
        if buf[0..8] != FILE_MAGIC {
            return format_err(0, "bad magic");
        }
        if buf[8] != FORMAT_VERSION {
            return format_err(8, format!("unsupported format version {}", buf[8]));
        }
        let mode = match buf[9] {
            MODE_T2 => Mode::T2,
            MODE_T3 => Mode::T3,
            other => return format_err(9, format!("unknown mode byte {other}")),
        };
        let resolution = ResolutionCode::new(buf[10])?;
        if buf[11] != 0 || buf[28..32] != [0, 0, 0, 0] {
            return format_err(11, "reserved header bytes must be zero");
        }
        let header = FileHeader {
            mode,
            resolution,
            channel_count: u32::from_le_bytes(buf[12..16].try_into().unwrap()),
            sync_divider: u32::from_le_bytes(buf[16..20].try_into().unwrap()),
            sync_period_ps: u64::from_le_bytes(buf[20..28].try_into().unwrap()),
        };
        header.validate()?;
        Ok(header)
    }
}

/// Buffered writer for record files.
pub struct RecordFileWriter {
    inner: BufWriter<File>,
    words_written: u64,
}

impl RecordFileWriter {
    pub fn create(path: &Path, header: &FileHeader) -> Result<Self, FileError> {
        let mut inner = BufWriter::new(File::create(path)?);
        inner.write_all(&header.to_bytes()?)?;
        Ok(RecordFileWriter {
            inner,
            words_written: 0,
        })
    }

    pub fn write_word(&mut self, word: u32) -> Result<(), FileError> {
        self.inner.write_all(&word.to_le_bytes())?;
        self.words_written += 1;
        Ok(())
    }

    pub fn write_all(&mut self, words: &[u32]) -> Result<(), FileError> {
        for &word in words {
            self.write_word(word)?;
        }
        Ok(())
    }

    /// Flushes and returns the number of words written.
    pub fn finish(mut self) -> Result<u64, FileError> {
        self.inner.flush()?;
        Ok(self.words_written)
    }
}

/// Buffered reader for record files; iterates raw words.
pub struct RecordFileReader {
    header: FileHeader,
    inner: BufReader<File>,
    offset: u64,
}

impl RecordFileReader {
    pub fn open(path: &Path) -> Result<Self, FileError> {
        let mut inner = BufReader::new(File::open(path)?);
        let mut buf = [0u8; HEADER_LEN];
        inner.read_exact(&mut buf).map_err(|e| {
            if e.kind() == io::ErrorKind::UnexpectedEof {
                FileError::Format {
                    offset: 0,
                    message: "file shorter than header".into(),
                }
            } else {
                FileError::Io(e)
            }
        })?;
        let header = FileHeader::from_bytes(&buf)?;
        Ok(RecordFileReader {
            header,
            inner,
            offset: HEADER_LEN as u64,
        })
    }

    pub fn header(&self) -> &FileHeader {
        &self.header
    }

    /// Byte offset of the next word, usable in error reports.
    pub fn offset(&self) -> u64 {
        self.offset
    }
}

impl Iterator for RecordFileReader {
    type Item = Result<u32, FileError>;

    fn next(&mut self) -> Option<Self::Item> {
        let mut buf = [0u8; 4];
        match self.inner.read(&mut buf) {
            Ok(0) => None,
            Ok(4) => {
                self.offset += 4;
                Some(Ok(u32::from_le_bytes(buf)))
            }
            Ok(n) => {
                // A short read mid-file can be a buffer boundary; try to
                // complete the word before declaring the file truncated.
                match self.inner.read_exact(&mut buf[n..]) {
                    Ok(()) => {
                        self.offset += 4;
                        Some(Ok(u32::from_le_bytes(buf)))
                    }
                    Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => Some(format_err(
                        self.offset,
                        "trailing bytes do not form a whole record word",
                    )),
                    Err(e) => Some(Err(FileError::Io(e))),
                }
            }
            Err(e) => Some(Err(FileError::Io(e))),
        }
    }
}

/// Writes a whole record file in one call.
pub fn write_record_file(
    path: &Path,
    header: &FileHeader,
    words: &[u32],
) -> Result<(), FileError> {
    let mut writer = RecordFileWriter::create(path, header)?;
    writer.write_all(words)?;
    writer.finish()?;
    Ok(())
}

/// Reads a whole record file into memory.
pub fn read_record_file(path: &Path) -> Result<(FileHeader, Vec<u32>), FileError> {
    let reader = RecordFileReader::open(path)?;
    let header = *reader.header();
    let words = reader.collect::<Result<Vec<u32>, FileError>>()?;
    Ok((header, words))
}
