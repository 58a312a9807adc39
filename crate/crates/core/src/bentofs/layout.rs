//! On-disk format: superblock, inode records and region geometry.
//!
//! ```text
//! block 0        reserved
//! block 1        superblock
//! journal        journal_len blocks
//! inode bitmap   one bit per inode, bit i is inode i + 1
//! block bitmap   one bit per device block
//! inode table    128-byte inodes, 32 per block
//! data           everything else
//! ```
//!
//! All integers are little-endian.

use crate::fsapi::{FileKind, Timespec};

pub const BENTOFS_MAGIC: u32 = 0x4245_4E54;
pub const BLOCK_SIZE: usize = 4096;
pub const INODE_SIZE: usize = 128;
pub const INODES_PER_BLOCK: u64 = (BLOCK_SIZE / INODE_SIZE) as u64;
pub const BITS_PER_BLOCK: u64 = (BLOCK_SIZE * 8) as u64;
pub const NDIRECT: usize = 12;
pub const PTRS_PER_BLOCK: u64 = (BLOCK_SIZE / 4) as u64;
/// 1024 × 1024 blocks behind the double-indirect pointer.
pub const MAX_FILE_SIZE: u64 = 1 << 32;
pub const MAX_NAME_LEN: usize = 255;
pub const ROOT_INO: u64 = 1;
/// Reserved for the provenance log; never handed out by the allocator.
pub const PROV_LOG_INO: u64 = 2;
pub const SUPERBLOCK_BLOCK: u64 = 1;
pub const JOURNAL_START: u64 = 2;
pub const MIN_FS_JOURNAL_LEN: u64 = 64;
/// Data blocks a fresh file system needs: the root directory's index and
/// leaf block, plus room for at least a couple of files.
pub const MIN_DATA_BLOCKS: u64 = 4;

fn get_u16(b: &[u8], off: usize) -> u16 {
    u16::from_le_bytes(b[off..off + 2].try_into().unwrap())
}
fn get_u32(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}
fn get_u64(b: &[u8], off: usize) -> u64 {
    u64::from_le_bytes(b[off..off + 8].try_into().unwrap())
}
fn put_u16(b: &mut [u8], off: usize, v: u16) {
    b[off..off + 2].copy_from_slice(&v.to_le_bytes());
}
fn put_u32(b: &mut [u8], off: usize, v: u32) {
    b[off..off + 4].copy_from_slice(&v.to_le_bytes());
}
fn put_u64(b: &mut [u8], off: usize, v: u64) {
    b[off..off + 8].copy_from_slice(&v.to_le_bytes());
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Superblock {
    pub total_blocks: u32,
    pub inode_count: u32,
    pub journal_start: u32,
    pub journal_len: u32,
    pub inode_table_start: u32,
    pub inode_bitmap_start: u32,
    pub block_bitmap_start: u32,
    pub data_start: u32,
    pub root_ino: u32,
}

impl Superblock {
    /// Lays out the regions for a device of `total_blocks`.
    pub fn plan(total_blocks: u64, inode_count: u64, journal_len: u64) -> Option<Superblock> {
        let inode_count = inode_count.div_ceil(INODES_PER_BLOCK) * INODES_PER_BLOCK;
        let inode_bitmap_start = JOURNAL_START + journal_len;
        let block_bitmap_start = inode_bitmap_start + inode_count.div_ceil(BITS_PER_BLOCK);
        let inode_table_start = block_bitmap_start + total_blocks.div_ceil(BITS_PER_BLOCK);
        let data_start = inode_table_start + inode_count / INODES_PER_BLOCK;
        if inode_count < 8 || data_start + MIN_DATA_BLOCKS > total_blocks || total_blocks > u32::MAX as u64 {
            return None;
        }
        Some(Superblock {
            total_blocks: total_blocks as u32,
            inode_count: inode_count as u32,
            journal_start: JOURNAL_START as u32,
            journal_len: journal_len as u32,
            inode_table_start: inode_table_start as u32,
            inode_bitmap_start: inode_bitmap_start as u32,
            block_bitmap_start: block_bitmap_start as u32,
            data_start: data_start as u32,
            root_ino: ROOT_INO as u32,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut b = vec![0; BLOCK_SIZE];
        let fields = [
            BENTOFS_MAGIC,
            self.total_blocks,
            self.inode_count,
            self.journal_start,
            self.journal_len,
            self.inode_table_start,
            self.inode_bitmap_start,
            self.block_bitmap_start,
            self.data_start,
            self.root_ino,
        ];
        for (i, v) in fields.iter().enumerate() {
            put_u32(&mut b, 4 * i, *v);
        }
        b
    }

    /// `None` if the magic does not match.
    pub fn decode(b: &[u8]) -> Option<Superblock> {
        if get_u32(b, 0) != BENTOFS_MAGIC {
            return None;
        }
        Some(Superblock {
            total_blocks: get_u32(b, 4),
            inode_count: get_u32(b, 8),
            journal_start: get_u32(b, 12),
            journal_len: get_u32(b, 16),
            inode_table_start: get_u32(b, 20),
            inode_bitmap_start: get_u32(b, 24),
            block_bitmap_start: get_u32(b, 28),
            data_start: get_u32(b, 32),
            root_ino: get_u32(b, 36),
        })
    }

    /// Checks that the regions are ordered, disjoint and inside the device.
    pub fn validate(&self, device_blocks: u64) -> Result<(), String> {
        let planned = Superblock::plan(
            u64::from(self.total_blocks),
            u64::from(self.inode_count),
            u64::from(self.journal_len),
        );
        if planned != Some(*self) {
            return Err("superblock regions are inconsistent".into());
        }
        if u64::from(self.total_blocks) > device_blocks {
            return Err(format!(
                "superblock claims {} blocks, device has {device_blocks}",
                self.total_blocks
            ));
        }
        Ok(())
    }

    pub fn journal_start(&self) -> u64 {
        u64::from(self.journal_start)
    }
    pub fn journal_len(&self) -> u64 {
        u64::from(self.journal_len)
    }
    pub fn total_blocks(&self) -> u64 {
        u64::from(self.total_blocks)
    }
    pub fn inode_count(&self) -> u64 {
        u64::from(self.inode_count)
    }
    pub fn data_start(&self) -> u64 {
        u64::from(self.data_start)
    }
    pub fn inode_bitmap_blocks(&self) -> u64 {
        self.inode_count().div_ceil(BITS_PER_BLOCK)
    }
    pub fn block_bitmap_blocks(&self) -> u64 {
        self.total_blocks().div_ceil(BITS_PER_BLOCK)
    }

    /// Block holding inode `ino` and the byte offset inside it.
    pub fn inode_location(&self, ino: u64) -> (u64, usize) {
        let idx = ino - 1;
        (
            u64::from(self.inode_table_start) + idx / INODES_PER_BLOCK,
            (idx % INODES_PER_BLOCK) as usize * INODE_SIZE,
        )
    }

    /// Bitmap block and bit index of inode `ino`.
    pub fn inode_bit(&self, ino: u64) -> (u64, usize) {
        let idx = ino - 1;
        (
            u64::from(self.inode_bitmap_start) + idx / BITS_PER_BLOCK,
            (idx % BITS_PER_BLOCK) as usize,
        )
    }

    pub fn block_bit(&self, blockno: u64) -> (u64, usize) {
        (
            u64::from(self.block_bitmap_start) + blockno / BITS_PER_BLOCK,
            (blockno % BITS_PER_BLOCK) as usize,
        )
    }

    pub fn is_valid_ino(&self, ino: u64) -> bool {
        ino >= 1 && ino <= self.inode_count()
    }

    pub fn is_data_block(&self, blockno: u64) -> bool {
        blockno >= self.data_start() && blockno < self.total_blocks()
    }
}

pub fn bit_is_set(block: &[u8], bit: usize) -> bool {
    block[bit / 8] & (1 << (bit % 8)) != 0
}

pub fn set_bit(block: &mut [u8], bit: usize, value: bool) {
    if value {
        block[bit / 8] |= 1 << (bit % 8);
    } else {
        block[bit / 8] &= !(1 << (bit % 8));
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum InodeKind {
    #[default]
    Free,
    RegularFile,
    Directory,
    Symlink,
}

impl InodeKind {
    fn code(self) -> u16 {
        match self {
            InodeKind::Free => 0,
            InodeKind::RegularFile => 1,
            InodeKind::Directory => 2,
            InodeKind::Symlink => 3,
        }
    }

    fn from_code(c: u16) -> Option<Self> {
        Some(match c {
            0 => InodeKind::Free,
            1 => InodeKind::RegularFile,
            2 => InodeKind::Directory,
            3 => InodeKind::Symlink,
            _ => return None,
        })
    }

    pub fn file_kind(self) -> Option<FileKind> {
        match self {
            InodeKind::Free => None,
            InodeKind::RegularFile => Some(FileKind::RegularFile),
            InodeKind::Directory => Some(FileKind::Directory),
            InodeKind::Symlink => Some(FileKind::Symlink),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DiskInode {
    pub kind: InodeKind,
    pub nlink: u16,
    pub perm: u16,
    pub uid: u32,
    pub gid: u32,
    pub size: u64,
    pub atime: Timespec,
    pub mtime: Timespec,
    pub ctime: Timespec,
    pub direct: [u32; NDIRECT],
    pub indirect: u32,
    pub dindirect: u32,
    pub generation: u32,
}

impl DiskInode {
    pub fn encode_into(&self, b: &mut [u8]) {
        assert_eq!(b.len(), INODE_SIZE);
        b.fill(0);
        put_u16(b, 0, self.kind.code());
        put_u16(b, 2, self.nlink);
        put_u16(b, 4, self.perm);
        put_u32(b, 8, self.uid);
        put_u32(b, 12, self.gid);
        put_u64(b, 16, self.size);
        for (i, t) in [self.atime, self.mtime, self.ctime].iter().enumerate() {
            put_u64(b, 24 + 12 * i, t.secs);
            put_u32(b, 32 + 12 * i, t.nanos);
        }
        for (i, p) in self.direct.iter().enumerate() {
            put_u32(b, 60 + 4 * i, *p);
        }
        put_u32(b, 108, self.indirect);
        put_u32(b, 112, self.dindirect);
        put_u32(b, 116, self.generation);
    }

    /// `None` for an unknown kind code.
    pub fn decode(b: &[u8]) -> Option<DiskInode> {
        let ts = |i: usize| Timespec::new(get_u64(b, 24 + 12 * i), get_u32(b, 32 + 12 * i));
        let mut direct = [0; NDIRECT];
        for (i, p) in direct.iter_mut().enumerate() {
            *p = get_u32(b, 60 + 4 * i);
        }
        Some(DiskInode {
            kind: InodeKind::from_code(get_u16(b, 0))?,
            nlink: get_u16(b, 2),
            perm: get_u16(b, 4),
            uid: get_u32(b, 8),
            gid: get_u32(b, 12),
            size: get_u64(b, 16),
            atime: ts(0),
            mtime: ts(1),
            ctime: ts(2),
            direct,
            indirect: get_u32(b, 108),
            dindirect: get_u32(b, 112),
            generation: get_u32(b, 116),
        })
    }
}

/// Where file block `fb` lives in the mapping tree.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockPath {
    Direct(usize),
    Indirect(usize),
    Double(usize, usize),
}

pub const MAX_FILE_BLOCKS: u64 = MAX_FILE_SIZE / BLOCK_SIZE as u64;

pub fn block_path(fb: u64) -> Option<BlockPath> {
    let n = NDIRECT as u64;
    if fb < n {
        Some(BlockPath::Direct(fb as usize))
    } else if fb < n + PTRS_PER_BLOCK {
        Some(BlockPath::Indirect((fb - n) as usize))
    } else if fb < n + PTRS_PER_BLOCK + PTRS_PER_BLOCK * PTRS_PER_BLOCK {
        let r = fb - n - PTRS_PER_BLOCK;
        Some(BlockPath::Double((r / PTRS_PER_BLOCK) as usize, (r % PTRS_PER_BLOCK) as usize))
    } else {
        None
    }
}

pub fn ptr_at(block: &[u8], idx: usize) -> u32 {
    get_u32(block, 4 * idx)
}

pub fn set_ptr(block: &mut [u8], idx: usize, v: u32) {
    put_u32(block, 4 * idx, v);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn double_indirect_reaches_exactly_four_gib() {
        let last = MAX_FILE_BLOCKS - 1;
        assert!(matches!(block_path(last), Some(BlockPath::Double(_, _))));
        // Direct and single-indirect blocks leave headroom beyond the cap.
        assert!(block_path(MAX_FILE_BLOCKS).is_some());
        assert_eq!(block_path(11), Some(BlockPath::Direct(11)));
        assert_eq!(block_path(12), Some(BlockPath::Indirect(0)));
        assert_eq!(block_path(12 + 1024), Some(BlockPath::Double(0, 0)));
        assert_eq!(block_path(12 + 1024 + 1025), Some(BlockPath::Double(1, 1)));
    }

    #[test]
    fn inode_round_trip() {
        let mut ino = DiskInode {
            kind: InodeKind::Symlink,
            nlink: 3,
            perm: 0o755,
            uid: 7,
            gid: 8,
            size: 1 << 33,
            mtime: Timespec::new(5, 6),
            indirect: 99,
            dindirect: 100,
            generation: 4,
            ..Default::default()
        };
        ino.direct[11] = 42;
        let mut b = [0u8; INODE_SIZE];
        ino.encode_into(&mut b);
        assert_eq!(DiskInode::decode(&b), Some(ino));
    }

    #[test]
    fn plan_places_regions_in_order() {
        let sb = Superblock::plan(4096, 1024, 256).unwrap();
        assert_eq!(sb.inode_bitmap_start, 258);
        assert_eq!(sb.block_bitmap_start, 259);
        assert_eq!(sb.inode_table_start, 260);
        assert_eq!(sb.data_start, 260 + 32);
        assert!(sb.validate(4096).is_ok());
        assert_eq!(Superblock::decode(&sb.encode()), Some(sb));
        assert!(Superblock::plan(10, 64, 256).is_none());
    }
}
