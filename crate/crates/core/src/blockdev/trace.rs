use std::fmt::Write as _;
use std::sync::Arc;

use thiserror::Error;

use super::MemImage;

/// What the device keeps for each recorded block write.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceMode {
    /// Block number and digest only.
    Digest,
    /// Digest plus the written bytes, so crash states can be rebuilt.
    Full,
}

#[derive(Clone, Debug)]
pub enum TraceEvent {
    WriteBlock {
        blockno: u64,
        digest: u64,
        data: Option<Arc<[u8]>>,
    },
    Flush,
}

impl TraceEvent {
    pub fn is_flush(&self) -> bool {
        matches!(self, TraceEvent::Flush)
    }
}

impl PartialEq for TraceEvent {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (
                TraceEvent::WriteBlock { blockno: a, digest: da, .. },
                TraceEvent::WriteBlock { blockno: b, digest: db, .. },
            ) => a == b && da == db,
            (TraceEvent::Flush, TraceEvent::Flush) => true,
            _ => false,
        }
    }
}

#[derive(Debug, Error)]
pub enum TraceParseError {
    #[error("line {line}: {msg}")]
    BadLine { line: usize, msg: String },
}

#[derive(Error, Debug, PartialEq, Eq)]
pub enum ReplayError {
    #[error("write to block {0} has no recorded data (trace recorded in digest mode)")]
    MissingData(u64),
    #[error("prefix length {len} exceeds trace length {max}")]
    PrefixTooLong { len: usize, max: usize },
}

/// The ordered log of image writes and durability flushes issued by a device.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WriteTrace {
    pub events: Vec<TraceEvent>,
}

impl WriteTrace {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Indices of every `Flush` event.
    pub fn flush_indices(&self) -> Vec<usize> {
        self.events
            .iter()
            .enumerate()
            .filter_map(|(i, e)| e.is_flush().then_some(i))
            .collect()
    }

    pub fn written_blocks(&self) -> impl Iterator<Item = u64> + '_ {
        self.events.iter().filter_map(|e| match e {
            TraceEvent::WriteBlock { blockno, .. } => Some(*blockno),
            TraceEvent::Flush => None,
        })
    }

    /// Applies the first `len` events to a copy of `base`.
    pub fn apply_prefix(&self, base: &MemImage, len: usize) -> Result<MemImage, ReplayError> {
        if len > self.events.len() {
            return Err(ReplayError::PrefixTooLong {
                len,
                max: self.events.len(),
            });
        }
        let mut img = base.clone();
        for e in &self.events[..len] {
            if let TraceEvent::WriteBlock { blockno, data, .. } = e {
                let data = data.clone().ok_or(ReplayError::MissingData(*blockno))?;
                img.write_shared(*blockno, data);
            }
        }
        Ok(img)
    }

    /// Applies the first `upto` events, then only the writes at `extra` indices.
    pub fn apply_with_subset(
        &self,
        base: &MemImage,
        upto: usize,
        extra: &[usize],
    ) -> Result<MemImage, ReplayError> {
        let mut img = self.apply_prefix(base, upto)?;
        for &i in extra {
            if let Some(TraceEvent::WriteBlock { blockno, data, .. }) = self.events.get(i) {
                let data = data.clone().ok_or(ReplayError::MissingData(*blockno))?;
                img.write_shared(*blockno, data);
            }
        }
        Ok(img)
    }

    /// Line-based form: `W <blockno> <hex-digest>` or `F`.
    pub fn to_log(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            match e {
                TraceEvent::WriteBlock { blockno, digest, .. } => {
                    let _ = writeln!(out, "W {blockno} {digest:016x}");
                }
                TraceEvent::Flush => out.push_str("F\n"),
            }
        }
        out
    }

    pub fn parse_log(text: &str) -> Result<WriteTrace, TraceParseError> {
        let mut events = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: &str| TraceParseError::BadLine {
                line: i + 1,
                msg: msg.to_string(),
            };
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("F") => events.push(TraceEvent::Flush),
                Some("W") => {
                    let blockno = parts
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| bad("bad block number"))?;
                    let digest = parts
                        .next()
                        .and_then(|s| u64::from_str_radix(s, 16).ok())
                        .ok_or_else(|| bad("bad digest"))?;
                    events.push(TraceEvent::WriteBlock {
                        blockno,
                        digest,
                        data: None,
                    });
                }
                _ => return Err(bad("expected W or F")),
            }
        }
        Ok(WriteTrace { events })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_round_trip() {
        let t = WriteTrace {
            events: vec![
                TraceEvent::WriteBlock { blockno: 9, digest: 0xdead_beef, data: None },
                TraceEvent::Flush,
            ],
        };
        let log = t.to_log();
        assert_eq!(log, "W 9 00000000deadbeef\nF\n");
        assert_eq!(WriteTrace::parse_log(&log).unwrap(), t);
        assert!(WriteTrace::parse_log("X 1").is_err());
    }

    #[test]
    fn digest_mode_cannot_replay() {
        let t = WriteTrace {
            events: vec![TraceEvent::WriteBlock { blockno: 0, digest: 0, data: None }],
        };
        let base = MemImage::zeroed(8, 1);
        assert_eq!(t.apply_prefix(&base, 1), Err(ReplayError::MissingData(0)));
        assert!(t.apply_prefix(&base, 0).is_ok());
    }
}
