use crate::blockdev::BlockDevice;

use super::format::{record_checksum, CommitBlock, Descriptor, JournalSuperblock};
use super::JournalError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RecoveryReport {
    /// Committed records whose blocks were written in place.
    pub applied: usize,
    /// Sequence the next commit will use.
    pub next_seq: u32,
    /// Log position where the next record will be written.
    pub head: u64,
}

pub(crate) struct ScannedRecord {
    pub sequence: u32,
    pub targets: Vec<u32>,
    pub data: Vec<Vec<u8>>,
}

/// Block number of log position `pos` (positions wrap around the log).
pub(crate) fn log_block(start: u64, length: u64, pos: u64) -> u64 {
    start + 1 + pos % (length - 1)
}

/// Reads the valid committed records of a journal region in sequence order,
/// starting at the superblock's tail and stopping at the first missing or
/// corrupt one. Returns the records and the position after the last one.
pub(crate) fn scan(
    dev: &BlockDevice,
    start: u64,
    length: u64,
    jsb: JournalSuperblock,
) -> Result<(Vec<ScannedRecord>, u64), JournalError> {
    let log_len = length - 1;
    let mut out = Vec::new();
    let tail = u64::from(jsb.tail) % log_len;
    let mut pos = tail;
    let mut expect = jsb.next_seq;
    let block = |p: u64| log_block(start, length, p);
    loop {
        let used = pos - tail;
        if used + 2 > log_len {
            break;
        }
        let desc_raw = dev.read_uncached(block(pos))?;
        let Some(desc) = Descriptor::decode(&desc_raw) else { break };
        if desc.sequence != expect {
            break;
        }
        let n = desc.targets.len() as u64;
        if used + n + 2 > log_len
            || desc.targets.iter().any(|&t| {
                let t = u64::from(t);
                t >= dev.block_count() || (start..start + length).contains(&t)
            })
        {
            break;
        }
        let data = (0..n)
            .map(|i| dev.read_uncached(block(pos + 1 + i)))
            .collect::<Result<Vec<_>, _>>()?;
        let commit_raw = dev.read_uncached(block(pos + 1 + n))?;
        let Some(commit) = CommitBlock::decode(&commit_raw) else { break };
        let sum = record_checksum(&desc_raw, data.iter().map(|d| d.as_slice()));
        if commit.sequence != expect || commit.checksum != sum {
            break;
        }
        out.push(ScannedRecord {
            sequence: desc.sequence,
            targets: desc.targets,
            data,
        });
        pos += n + 2;
        expect = expect.wrapping_add(1);
    }
    Ok((out, pos % log_len))
}

/// Replays every committed record of the region in place, flushes, and
/// advances the tail past them so they are not applied again.
///
/// Must run on a quiescent device before any other journal use. Running it
/// twice leaves the device in the same state.
pub fn recover(dev: &BlockDevice, start: u64, length: u64) -> Result<RecoveryReport, JournalError> {
    let bs = dev.block_size();
    let jsb_raw = dev.read_uncached(start)?;
    let jsb = JournalSuperblock::decode(&jsb_raw).ok_or(JournalError::NotFormatted)?;
    if u64::from(jsb.length) != length {
        return Err(JournalError::LengthMismatch {
            recorded: u64::from(jsb.length),
            expected: length,
        });
    }
    let (records, head) = scan(dev, start, length, jsb)?;
    if records.is_empty() {
        return Ok(RecoveryReport {
            applied: 0,
            next_seq: jsb.next_seq,
            head,
        });
    }
    for rec in &records {
        for (t, d) in rec.targets.iter().zip(&rec.data) {
            dev.write_uncached(u64::from(*t), d)?;
        }
    }
    dev.flush()?;
    let next_seq = records.last().unwrap().sequence.wrapping_add(1);
    dev.write_uncached(
        start,
        &JournalSuperblock {
            next_seq,
            length: length as u32,
            tail: head as u32,
        }
        .encode(bs),
    )?;
    dev.flush()?;
    log::info!("journal recovery applied {} record(s)", records.len());
    Ok(RecoveryReport {
        applied: records.len(),
        next_seq,
        head,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockdev::{DeviceOptions, MemImage};
    use crate::journal::{Journal, JournalConfig};

    const START: u64 = 2;
    const LEN: u64 = 32;

    fn device() -> BlockDevice {
        let dev = BlockDevice::memory(MemImage::zeroed(4096, 128), DeviceOptions::default()).unwrap();
        Journal::format(&dev, START, LEN).unwrap();
        dev
    }

    fn put_record(dev: &BlockDevice, pos: u64, seq: u32, writes: &[(u32, u8)], commit: bool) {
        let bs = dev.block_size();
        let desc = Descriptor {
            sequence: seq,
            targets: writes.iter().map(|w| w.0).collect(),
        }
        .encode(bs);
        dev.write_uncached(START + pos, &desc).unwrap();
        let data: Vec<Vec<u8>> = writes.iter().map(|w| vec![w.1; bs]).collect();
        for (i, d) in data.iter().enumerate() {
            dev.write_uncached(START + pos + 1 + i as u64, d).unwrap();
        }
        if commit {
            let checksum = record_checksum(&desc, data.iter().map(|d| d.as_slice()));
            dev.write_uncached(
                START + pos + 1 + writes.len() as u64,
                &CommitBlock {
                    sequence: seq,
                    checksum,
                }
                .encode(bs),
            )
            .unwrap();
        }
    }

    fn block_is(dev: &BlockDevice, b: u64, v: u8) -> bool {
        dev.read_uncached(b).unwrap().iter().all(|&x| x == v)
    }

    #[test]
    fn replays_committed_record_for_block_12() {
        let dev = device();
        put_record(&dev, 1, 1, &[(100, 0xAB)], true);
        let r = recover(&dev, START, LEN).unwrap();
        assert_eq!(r.applied, 1);
        assert_eq!(r.next_seq, 2);
        assert!(block_is(&dev, 100, 0xAB));
    }

    #[test]
    fn uncommitted_tail_is_ignored() {
        let dev = device();
        put_record(&dev, 1, 1, &[(100, 1)], true);
        put_record(&dev, 4, 2, &[(101, 2)], false);
        let r = recover(&dev, START, LEN).unwrap();
        assert_eq!(r.applied, 1);
        assert!(block_is(&dev, 100, 1));
        assert!(block_is(&dev, 101, 0));
    }

    #[test]
    fn corrupt_checksum_stops_replay() {
        let dev = device();
        put_record(&dev, 1, 1, &[(100, 1)], true);
        dev.write_uncached(START + 2, &vec![9; 4096]).unwrap();
        assert_eq!(recover(&dev, START, LEN).unwrap().applied, 0);
        assert!(block_is(&dev, 100, 0));
    }

    #[test]
    fn stale_sequence_is_not_replayed() {
        let dev = device();
        put_record(&dev, 1, 7, &[(100, 1)], true);
        assert_eq!(recover(&dev, START, LEN).unwrap().applied, 0);
    }

    #[test]
    fn recovery_is_idempotent() {
        let dev = device();
        put_record(&dev, 1, 1, &[(100, 1), (101, 2)], true);
        put_record(&dev, 5, 2, &[(100, 3)], true);
        recover(&dev, START, LEN).unwrap();
        let once = dev.snapshot().unwrap();
        let again = recover(&dev, START, LEN).unwrap();
        assert_eq!(again.applied, 0);
        assert_eq!(dev.snapshot().unwrap(), once);
        assert!(block_is(&dev, 100, 3));
        assert!(block_is(&dev, 101, 2));
    }

    #[test]
    fn unformatted_region_reported() {
        let dev = BlockDevice::memory(MemImage::zeroed(4096, 64), DeviceOptions::default()).unwrap();
        assert!(matches!(
            recover(&dev, START, LEN),
            Err(JournalError::NotFormatted)
        ));
    }

    #[test]
    fn journal_commit_is_recoverable_without_checkpoint() {
        let dev = device();
        let cfg = JournalConfig {
            commit_idle: None,
            enabled: true,
        };
        let j = Journal::open(dev.clone(), START, LEN, cfg).unwrap();
        let mut h = j.begin_op(1).unwrap();
        let mut bh = dev.getblk(90).unwrap();
        bh.data_mut().fill(5);
        j.journal_write(&mut h, &mut bh).unwrap();
        drop(bh);
        j.end_op(h);
        j.force_commit().unwrap();
        // Simulate a crash: copy the image before any checkpoint.
        let img = dev.snapshot().unwrap();
        let crashed = BlockDevice::memory(img, DeviceOptions::default()).unwrap();
        assert!(block_is(&crashed, 90, 0));
        assert_eq!(recover(&crashed, START, LEN).unwrap().applied, 1);
        assert!(block_is(&crashed, 90, 5));
    }
}
