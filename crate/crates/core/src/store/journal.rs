use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

/// Frames one payload as `<crc32 hex> <payload>\n`.
pub(crate) fn frame(payload: &str) -> String {
    format!("{:08x} {payload}\n", crc32fast::hash(payload.as_bytes()))
}

fn unframe(line: &[u8]) -> Option<&str> {
    if line.len() < 9 || line[8] != b' ' {
        return None;
    }
    let crc = u32::from_str_radix(std::str::from_utf8(&line[..8]).ok()?, 16).ok()?;
    let payload = std::str::from_utf8(&line[9..]).ok()?;
    (crc32fast::hash(payload.as_bytes()) == crc).then_some(payload)
}

pub(crate) enum ScanError {
    /// A damaged frame followed by further data: not a crash artifact.
    Corrupt { line: usize },
}

/// Intact payloads of a journal and the byte length they occupy.
pub(crate) struct Scan {
    pub payloads: Vec<String>,
    pub valid_len: u64,
    pub torn_bytes: u64,
}

pub(crate) fn scan(bytes: &[u8]) -> Result<Scan, ScanError> {
    let mut payloads = Vec::new();
    let mut pos = 0usize;
    let mut line = 0usize;
    while pos < bytes.len() {
        line += 1;
        let end = bytes[pos..].iter().position(|&b| b == b'\n').map(|i| pos + i);
        match end {
            None => break,
            Some(e) => match unframe(&bytes[pos..e]) {
                Some(p) => {
                    payloads.push(p.to_string());
                    pos = e + 1;
                }
                // only the final frame may be torn by a crash mid-append
                None if e + 1 == bytes.len() => break,
                None => return Err(ScanError::Corrupt { line }),
            },
        }
    }
    Ok(Scan { payloads, valid_len: pos as u64, torn_bytes: (bytes.len() - pos) as u64 })
}

/// An append-only journal file positioned after its last intact frame.
pub(crate) struct Journal {
    path: PathBuf,
    file: File,
    len: u64,
}

impl Journal {
    /// Opens (creating if absent) and truncates a torn tail.
    pub fn open(path: &Path) -> std::io::Result<(Journal, Result<Scan, ScanError>)> {
        let bytes = match std::fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e),
        };
        let scan = scan(&bytes);
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let len = match &scan {
            Ok(s) => {
                if s.torn_bytes > 0 {
                    file.set_len(s.valid_len)?;
                    file.sync_data()?;
                }
                s.valid_len
            }
            Err(_) => bytes.len() as u64,
        };
        Ok((Journal { path: path.to_path_buf(), file, len }, scan))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn append(&mut self, frames: &str, sync: bool) -> std::io::Result<()> {
        self.file.write_all(frames.as_bytes())?;
        if sync {
            self.file.sync_data()?;
        }
        self.len += frames.len() as u64;
        Ok(())
    }

    /// Cuts the journal back to `len` bytes after a failed append.
    pub fn rollback(&mut self, len: u64) -> std::io::Result<()> {
        self.file.set_len(len)?;
        self.len = len;
        Ok(())
    }

    /// Atomically swaps in `content` as the whole journal.
    pub fn replace(&mut self, content: &str, sync: bool) -> std::io::Result<()> {
        let mut tmp = self.path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = PathBuf::from(tmp);
        {
            let mut f = File::create(&tmp)?;
            f.write_all(content.as_bytes())?;
            if sync {
                f.sync_all()?;
            }
        }
        std::fs::rename(&tmp, &self.path)?;
        if sync {
            if let Some(dir) = self.path.parent() {
                File::open(dir)?.sync_all()?;
            }
        }
        self.file = OpenOptions::new().append(true).open(&self.path)?;
        self.len = content.len() as u64;
        Ok(())
    }
}
