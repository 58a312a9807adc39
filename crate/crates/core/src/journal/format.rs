//! On-disk journal layout.
//!
//! The first block of the region is the journal superblock. The remaining
//! blocks form a circular log of records, each a descriptor block, `count`
//! full data-block copies and a commit block. A record may wrap around the end
//! of the log. All integers are little-endian `u32`.

use crate::hash::Fnv32;

/// Magic of descriptor and commit blocks ("BENJ").
pub const RECORD_MAGIC: u32 = 0x4245_4E4A;
/// Magic of the journal superblock ("BENS").
pub const JSB_MAGIC: u32 = 0x4245_4E53;
pub const JSB_VERSION: u32 = 1;

fn get_u32(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn put_u32(b: &mut [u8], off: usize, v: u32) {
    b[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

/// `{magic, version, next_seq, length, tail}`: the oldest live record starts
/// at log position `tail` and carries `next_seq`; everything older has been
/// checkpointed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct JournalSuperblock {
    pub next_seq: u32,
    pub length: u32,
    pub tail: u32,
}

impl JournalSuperblock {
    pub fn encode(&self, block_size: usize) -> Vec<u8> {
        let mut b = vec![0; block_size];
        put_u32(&mut b, 0, JSB_MAGIC);
        put_u32(&mut b, 4, JSB_VERSION);
        put_u32(&mut b, 8, self.next_seq);
        put_u32(&mut b, 12, self.length);
        put_u32(&mut b, 16, self.tail);
        b
    }

    pub fn decode(b: &[u8]) -> Option<Self> {
        (get_u32(b, 0) == JSB_MAGIC && get_u32(b, 4) == JSB_VERSION).then(|| JournalSuperblock {
            next_seq: get_u32(b, 8),
            length: get_u32(b, 12),
            tail: get_u32(b, 16),
        })
    }
}

/// `{magic, sequence, count, target blocknos[count]}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Descriptor {
    pub sequence: u32,
    pub targets: Vec<u32>,
}

impl Descriptor {
    pub fn max_targets(block_size: usize) -> usize {
        (block_size - 12) / 4
    }

    pub fn encode(&self, block_size: usize) -> Vec<u8> {
        assert!(self.targets.len() <= Self::max_targets(block_size));
        let mut b = vec![0; block_size];
        put_u32(&mut b, 0, RECORD_MAGIC);
        put_u32(&mut b, 4, self.sequence);
        put_u32(&mut b, 8, self.targets.len() as u32);
        for (i, t) in self.targets.iter().enumerate() {
            put_u32(&mut b, 12 + 4 * i, *t);
        }
        b
    }

    pub fn decode(b: &[u8]) -> Option<Self> {
        if get_u32(b, 0) != RECORD_MAGIC {
            return None;
        }
        let count = get_u32(b, 8) as usize;
        if count > Self::max_targets(b.len()) {
            return None;
        }
        Some(Descriptor {
            sequence: get_u32(b, 4),
            targets: (0..count).map(|i| get_u32(b, 12 + 4 * i)).collect(),
        })
    }
}

/// `{magic, sequence, …, checksum}` with the checksum in the last four bytes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CommitBlock {
    pub sequence: u32,
    pub checksum: u32,
}

impl CommitBlock {
    pub fn encode(&self, block_size: usize) -> Vec<u8> {
        let mut b = vec![0; block_size];
        put_u32(&mut b, 0, RECORD_MAGIC);
        put_u32(&mut b, 4, self.sequence);
        put_u32(&mut b, block_size - 4, self.checksum);
        b
    }

    pub fn decode(b: &[u8]) -> Option<Self> {
        (get_u32(b, 0) == RECORD_MAGIC).then(|| CommitBlock {
            sequence: get_u32(b, 4),
            checksum: get_u32(b, b.len() - 4),
        })
    }
}

/// 32-bit FNV-1a over the descriptor block followed by every data block.
pub fn record_checksum<'a>(descriptor: &[u8], data: impl IntoIterator<Item = &'a [u8]>) -> u32 {
    let mut h = Fnv32::default();
    h.update(descriptor);
    for d in data {
        h.update(d);
    }
    h.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn commit_block_layout_is_bit_exact() {
        let b = CommitBlock { sequence: 7, checksum: 0xaabb_ccdd }.encode(4096);
        assert_eq!(&b[0..4], &[0x4a, 0x4e, 0x45, 0x42]);
        assert_eq!(&b[4..8], &7u32.to_le_bytes());
        assert_eq!(&b[4092..], &0xaabb_ccddu32.to_le_bytes());
    }

    #[test]
    fn descriptor_round_trip_and_rejects_garbage() {
        let d = Descriptor { sequence: 3, targets: vec![12, 40, 41] };
        let enc = d.encode(4096);
        assert_eq!(Descriptor::decode(&enc), Some(d));
        assert_eq!(Descriptor::decode(&[0u8; 4096]), None);
        let mut huge = enc.clone();
        huge[8..12].copy_from_slice(&5000u32.to_le_bytes());
        assert_eq!(Descriptor::decode(&huge), None);
    }
}
