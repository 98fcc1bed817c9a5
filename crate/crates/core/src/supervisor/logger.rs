//! `.rslg` session logs and their replay.
//!
//! Layout: `RSLG`, version octet, software version (u16 BE length + UTF-8),
//! SHA-256 config digest (32 octets), start timestamp (u64 BE ns), then
//! records of `u32 BE length` followed by one encoded frame.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};

use crate::bus::{decode_frame, encode_frame, Bus, BusError, Frame, OverflowPolicy, SubscribeOptions};

pub const LOG_MAGIC: &[u8; 4] = b"RSLG";
pub const LOG_VERSION: u8 = 1;
const FLUSH_INTERVAL: Duration = Duration::from_secs(1);

#[derive(Debug, thiserror::Error)]
pub enum LogError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad log header: {0}")]
    Header(String),
    #[error("corrupt record {index}: {why}")]
    Record { index: usize, why: String },
    #[error(transparent)]
    Bus(#[from] BusError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogHeader {
    pub sw_version: String,
    pub config_digest: [u8; 32],
    pub start_ns: u64,
}

impl LogHeader {
    pub fn new(sw_version: impl Into<String>, config_text: &str, start_ns: u64) -> Self {
        LogHeader {
            sw_version: sw_version.into(),
            config_digest: Sha256::digest(config_text.as_bytes()).into(),
            start_ns,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(47 + self.sw_version.len());
        out.extend_from_slice(LOG_MAGIC);
        out.push(LOG_VERSION);
        out.extend_from_slice(&(self.sw_version.len() as u16).to_be_bytes());
        out.extend_from_slice(self.sw_version.as_bytes());
        out.extend_from_slice(&self.config_digest);
        out.extend_from_slice(&self.start_ns.to_be_bytes());
        out
    }

    /// Parses a header and returns it with its length.
    pub fn decode(bytes: &[u8]) -> Result<(Self, usize), LogError> {
        let short = || LogError::Header("truncated header".into());
        if bytes.len() < 7 {
            return Err(short());
        }
        if &bytes[..4] != LOG_MAGIC {
            return Err(LogError::Header("bad magic".into()));
        }
        if bytes[4] != LOG_VERSION {
            return Err(LogError::Header(format!("unsupported version {}", bytes[4])));
        }
        let n = u16::from_be_bytes([bytes[5], bytes[6]]) as usize;
        let end = 7 + n + 32 + 8;
        if bytes.len() < end {
            return Err(short());
        }
        let sw_version = std::str::from_utf8(&bytes[7..7 + n])
            .map_err(|_| LogError::Header("software version is not UTF-8".into()))?
            .to_string();
        let mut config_digest = [0u8; 32];
        config_digest.copy_from_slice(&bytes[7 + n..7 + n + 32]);
        let start_ns = u64::from_be_bytes(bytes[7 + n + 32..end].try_into().unwrap());
        Ok((
            LogHeader {
                sw_version,
                config_digest,
                start_ns,
            },
            end,
        ))
    }
}

/// Appends records to a log file.
pub struct LogWriter {
    out: BufWriter<File>,
    last_flush: Instant,
    records: u64,
}

impl LogWriter {
    pub fn create(path: &Path, header: &LogHeader) -> Result<Self, LogError> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(&header.encode())?;
        out.flush()?;
        Ok(LogWriter {
            out,
            last_flush: Instant::now(),
            records: 0,
        })
    }

    pub fn append(&mut self, frame: &Frame) -> Result<(), LogError> {
        let bytes = encode_frame(frame)?;
        self.out.write_all(&(bytes.len() as u32).to_be_bytes())?;
        self.out.write_all(&bytes)?;
        self.records += 1;
        if self.last_flush.elapsed() >= FLUSH_INTERVAL {
            self.flush()?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), LogError> {
        self.out.flush()?;
        self.last_flush = Instant::now();
        Ok(())
    }

    pub fn records(&self) -> u64 {
        self.records
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogContents {
    pub header: LogHeader,
    pub frames: Vec<Frame>,
    /// Bytes after the last complete record, if any.
    pub truncated: bool,
}

/// Parses a log. A trailing partial record is reported, not an error; a
/// complete record that fails to decode is.
pub fn parse_log(bytes: &[u8]) -> Result<LogContents, LogError> {
    let (header, mut pos) = LogHeader::decode(bytes)?;
    let mut frames = Vec::new();
    let mut truncated = false;
    while pos < bytes.len() {
        if bytes.len() - pos < 4 {
            truncated = true;
            break;
        }
        let len = u32::from_be_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        let body = &bytes[pos + 4..];
        if body.len() < len {
            truncated = true;
            break;
        }
        let (frame, used) = decode_frame(&body[..len]).map_err(|e| LogError::Record {
            index: frames.len(),
            why: e.to_string(),
        })?;
        if used != len {
            return Err(LogError::Record {
                index: frames.len(),
                why: format!("record length {len} but frame is {used} octets"),
            });
        }
        frames.push(frame);
        pos += 4 + len;
    }
    Ok(LogContents {
        header,
        frames,
        truncated,
    })
}

pub fn read_log(path: &Path) -> Result<LogContents, LogError> {
    parse_log(&std::fs::read(path)?)
}

/// Records every bus frame on a writer thread until stopped.
pub struct Logger {
    path: PathBuf,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<Result<u64, LogError>>>,
}

impl Logger {
    /// Subscribes to `#` with backpressure and starts writing.
    pub fn start(bus: &Bus, path: &Path, header: &LogHeader) -> Result<Self, LogError> {
        let mut writer = LogWriter::create(path, header)?;
        let sub = bus.subscribe_with(
            "#",
            SubscribeOptions {
                capacity: 8192,
                policy: OverflowPolicy::Block,
            },
        )?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let handle = std::thread::Builder::new()
            .name("rslg-writer".into())
            .spawn(move || {
                loop {
                    if flag.load(Ordering::Acquire) {
                        while let Some(f) = sub.try_recv() {
                            writer.append(&f)?;
                        }
                        break;
                    }
                    match sub.recv_timeout(Duration::from_millis(100)) {
                        Ok(Some(f)) => writer.append(&f)?,
                        Ok(None) => writer.flush()?,
                        Err(_) => break,
                    }
                }
                writer.flush()?;
                Ok(writer.records())
            })?;
        Ok(Logger {
            path: path.to_path_buf(),
            stop,
            handle: Some(handle),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Writes out everything already queued, then closes the file. Returns
    /// the record count.
    pub fn stop(mut self) -> Result<u64, LogError> {
        self.finish()
    }

    fn finish(&mut self) -> Result<u64, LogError> {
        self.stop.store(true, Ordering::Release);
        match self.handle.take() {
            Some(h) => h.join().unwrap_or_else(|_| Err(LogError::Header("writer panicked".into()))),
            None => Ok(0),
        }
    }
}

impl Drop for Logger {
    fn drop(&mut self) {
        if let Err(e) = self.finish() {
            log::warn!("logger: {e}");
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplayReport {
    pub frames: usize,
    pub truncated: bool,
}

/// Re-publishes frames with their original seq, timestamps and payloads.
/// Gaps between timestamps are reproduced divided by `speed`; `None` replays
/// as fast as possible.
pub fn replay(contents: &LogContents, bus: &Bus, speed: Option<f64>) -> Result<ReplayReport, LogError> {
    let started = Instant::now();
    let t0 = contents.frames.first().map(|f| f.timestamp_ns).unwrap_or(0);
    for f in &contents.frames {
        if let Some(speed) = speed.filter(|s| s.is_finite() && *s > 0.0) {
            let due = Duration::from_secs_f64(f.timestamp_ns.saturating_sub(t0) as f64 / 1e9 / speed);
            let elapsed = started.elapsed();
            if due > elapsed {
                std::thread::sleep(due - elapsed);
            }
        }
        bus.publish_frame(f.clone())?;
    }
    Ok(ReplayReport {
        frames: contents.frames.len(),
        truncated: contents.truncated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bus::NodeRegistration;

    fn header() -> LogHeader {
        LogHeader::new("0.1.0", "seed = 1\n", 42)
    }

    #[test]
    fn header_layout() {
        let h = header();
        let b = h.encode();
        assert_eq!(&b[..5], b"RSLG\x01");
        assert_eq!(&b[5..7], &[0, 5]);
        assert_eq!(&b[7..12], b"0.1.0");
        // independent digest of the same text
        let expect: [u8; 32] = Sha256::digest(b"seed = 1\n").into();
        assert_eq!(&b[12..44], &expect);
        assert_eq!(&b[44..52], &42u64.to_be_bytes());
        assert_eq!(LogHeader::decode(&b).unwrap(), (h, 52));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(LogHeader::decode(&bad), Err(LogError::Header(_))));
        assert!(LogHeader::decode(&b[..20]).is_err());
    }

    #[test]
    fn write_parse_and_truncate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.rslg");
        let frames: Vec<Frame> = (1..=20)
            .map(|i| Frame::new(format!("t/{}", i % 3), i, i * 1000, vec![i as u8; i as usize]))
            .collect();
        let mut w = LogWriter::create(&path, &header()).unwrap();
        for f in &frames {
            w.append(f).unwrap();
        }
        w.flush().unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let c = parse_log(&bytes).unwrap();
        assert_eq!(c.frames, frames);
        assert!(!c.truncated);
        // every possible cut point parses to the complete prefix
        let mut boundaries = vec![header().encode().len()];
        for f in &frames {
            boundaries.push(boundaries.last().unwrap() + 4 + f.encoded_len());
        }
        for cut in boundaries[0]..bytes.len() {
            let c = parse_log(&bytes[..cut]).unwrap();
            assert_eq!(c.frames[..], frames[..c.frames.len()]);
            assert_eq!(c.truncated, !boundaries.contains(&cut));
            assert!(boundaries[c.frames.len()] <= cut);
        }
    }

    #[test]
    fn logger_records_everything_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.rslg");
        let bus = Bus::new();
        let node = bus.register_node(NodeRegistration::master("m")).unwrap();
        let logger = Logger::start(&bus, &path, &header()).unwrap();
        for i in 0..5000u32 {
            node.publish(if i % 2 == 0 { "a/x" } else { "b/y" }, i.to_le_bytes().to_vec())
                .unwrap();
        }
        assert_eq!(logger.stop().unwrap(), 5000);
        let c = read_log(&path).unwrap();
        assert_eq!(c.frames.len(), 5000);
        for (i, f) in c.frames.iter().enumerate() {
            assert_eq!(f.payload, (i as u32).to_le_bytes());
            assert_eq!(f.seq, i as u64 / 2 + 1);
        }
    }

    #[test]
    fn replay_preserves_frames() {
        let frames: Vec<Frame> = (1..=50).map(|i| Frame::new("r/s", i, i * 1_000_000, vec![i as u8])).collect();
        let contents = LogContents {
            header: header(),
            frames: frames.clone(),
            truncated: false,
        };
        let bus = Bus::new();
        let sub = bus.subscribe("#").unwrap();
        let r = replay(&contents, &bus, None).unwrap();
        assert_eq!(r.frames, 50);
        assert_eq!(sub.drain(), frames);

        let t = Instant::now();
        replay(&contents, &bus, Some(1.0)).unwrap();
        let d = t.elapsed().as_secs_f64();
        assert!((0.049..0.2).contains(&d), "{d}");
    }
}
