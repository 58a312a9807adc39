//! Offline consistency checker.
//!
//! Checks, each tagged with a letter in the report:
//! - `a`: every allocated block is referenced exactly once, by a metadata
//!   region or an inode mapping;
//! - `b`: block and inode bitmaps match what is reachable from the root;
//! - `c`: link counts match directory references;
//! - `d`: directory structure, including hash placement of entries;
//! - `e`: sizes agree with mapped blocks.
//!
//! The image is read as it is on disk; replay the journal first (by
//! mounting) when checking a crash image.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;

use crate::blockdev::BlockDevice;
use crate::errno::Errno;

use super::dirtree::{self, DirStore};
use super::layout::{
    bit_is_set, block_path, ptr_at, BlockPath, DiskInode, InodeKind, Superblock, BLOCK_SIZE, INODES_PER_BLOCK,
    INODE_SIZE, MAX_FILE_SIZE, PTRS_PER_BLOCK, PROV_LOG_INO, ROOT_INO,
};
use super::{read_superblock, MountError};

const BS: u64 = BLOCK_SIZE as u64;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub check: char,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}) {}", self.check, self.detail)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FsckReport {
    pub violations: Vec<Violation>,
    pub inodes_in_use: u64,
    pub blocks_in_use: u64,
    pub directories: u64,
}

impl FsckReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, check: char, detail: String) {
        self.violations.push(Violation { check, detail });
    }
}

impl fmt::Display for FsckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            writeln!(f, "{v}")?;
        }
        write!(
            f,
            "inodes {} blocks {} dirs {} violations {}",
            self.inodes_in_use,
            self.blocks_in_use,
            self.directories,
            self.violations.len()
        )
    }
}

struct Image<'d> {
    dev: &'d BlockDevice,
    sb: Superblock,
}

impl Image<'_> {
    fn block(&self, b: u64) -> Result<Vec<u8>, Errno> {
        self.dev.read_uncached(b).map_err(|_| Errno::EIO)
    }

    /// Data blocks by file block number, plus pointer blocks. Pointers
    /// outside the data region are reported and skipped.
    fn mapping(
        &self,
        ino: u64,
        d: &DiskInode,
        report: &mut FsckReport,
    ) -> Result<(BTreeMap<u64, u64>, Vec<u64>), Errno> {
        let mut data = BTreeMap::new();
        let mut meta = Vec::new();
        let valid = |p: u64, report: &mut FsckReport, what: &str| {
            if p != 0 && !self.sb.is_data_block(p) {
                report.push('a', format!("inode {ino}: {what} pointer {p} outside the data region"));
                false
            } else {
                p != 0
            }
        };
        for (i, &p) in d.direct.iter().enumerate() {
            if valid(u64::from(p), report, "direct") {
                data.insert(i as u64, u64::from(p));
            }
        }
        let n = d.direct.len() as u64;
        if valid(u64::from(d.indirect), report, "indirect") {
            let ind = u64::from(d.indirect);
            meta.push(ind);
            let blk = self.block(ind)?;
            for i in 0..PTRS_PER_BLOCK as usize {
                let p = u64::from(ptr_at(&blk, i));
                if valid(p, report, "indirect entry") {
                    data.insert(n + i as u64, p);
                }
            }
        }
        if valid(u64::from(d.dindirect), report, "double-indirect") {
            let dind = u64::from(d.dindirect);
            meta.push(dind);
            let top = self.block(dind)?;
            for i in 0..PTRS_PER_BLOCK as usize {
                let l1 = u64::from(ptr_at(&top, i));
                if !valid(l1, report, "double-indirect entry") {
                    continue;
                }
                meta.push(l1);
                let blk = self.block(l1)?;
                for j in 0..PTRS_PER_BLOCK as usize {
                    let p = u64::from(ptr_at(&blk, j));
                    if valid(p, report, "second-level entry") {
                        data.insert(n + PTRS_PER_BLOCK + i as u64 * PTRS_PER_BLOCK + j as u64, p);
                    }
                }
            }
        }
        Ok((data, meta))
    }
}

/// Directory blocks of an inode on an unmounted image.
struct RawDir<'a> {
    img: &'a Image<'a>,
    blocks: &'a BTreeMap<u64, u64>,
    nblocks: u64,
}

impl DirStore for RawDir<'_> {
    fn nblocks(&self) -> u64 {
        self.nblocks
    }
    fn read_block(&mut self, fb: u64) -> Result<Vec<u8>, Errno> {
        let b = *self.blocks.get(&fb).ok_or(Errno::EIO)?;
        self.img.block(b)
    }
    fn write_block(&mut self, _fb: u64, _data: &[u8]) -> Result<(), Errno> {
        Err(Errno::EROFS)
    }
    fn append_block(&mut self, _data: &[u8]) -> Result<u64, Errno> {
        Err(Errno::EROFS)
    }
}

/// Checks the file system on `dev` without modifying it.
pub fn fsck(dev: &BlockDevice) -> Result<FsckReport, MountError> {
    let sb = read_superblock(dev)?;
    let img = Image { dev, sb };
    check(&img).map_err(MountError::Fs)
}

fn check(img: &Image<'_>) -> Result<FsckReport, Errno> {
    let sb = img.sb;
    let mut report = FsckReport::default();

    // Load every inode.
    let mut inodes: BTreeMap<u64, DiskInode> = BTreeMap::new();
    for blk in 0..sb.inode_count() / INODES_PER_BLOCK {
        let data = img.block(u64::from(sb.inode_table_start) + blk)?;
        for i in 0..INODES_PER_BLOCK as usize {
            let ino = blk * INODES_PER_BLOCK + i as u64 + 1;
            match DiskInode::decode(&data[i * INODE_SIZE..(i + 1) * INODE_SIZE]) {
                None => report.push('b', format!("inode {ino}: unknown kind")),
                Some(d) if d.kind != InodeKind::Free => {
                    inodes.insert(ino, d);
                }
                Some(d) => {
                    if d.nlink != 0 || d.size != 0 || d.direct.iter().any(|&p| p != 0) || d.indirect != 0 || d.dindirect != 0 {
                        report.push('b', format!("inode {ino}: free but not cleared"));
                    }
                }
            }
        }
    }
    report.inodes_in_use = inodes.len() as u64;

    // (a) block references.
    let mut refs: HashMap<u64, Vec<String>> = HashMap::new();
    for b in 0..sb.data_start() {
        refs.entry(b).or_default().push("metadata".into());
    }
    let mut maps: BTreeMap<u64, BTreeMap<u64, u64>> = BTreeMap::new();
    for (&ino, d) in &inodes {
        let (data, meta) = img.mapping(ino, d, &mut report)?;
        for (&fb, &b) in &data {
            refs.entry(b).or_default().push(format!("inode {ino} block {fb}"));
        }
        for &b in &meta {
            refs.entry(b).or_default().push(format!("inode {ino} pointer block"));
        }
        maps.insert(ino, data);
    }
    for (b, owners) in &refs {
        if owners.len() > 1 {
            report.push('a', format!("block {b} referenced {} times: {}", owners.len(), owners.join(", ")));
        }
    }
    report.blocks_in_use = refs.len() as u64;

    // Walk the tree from the root.
    let mut reachable: BTreeSet<u64> = BTreeSet::new();
    let mut entry_refs: BTreeMap<u64, u64> = BTreeMap::new();
    let mut subdirs: BTreeMap<u64, u64> = BTreeMap::new();
    let mut dotdot: BTreeMap<u64, u64> = BTreeMap::new();
    let mut queue = VecDeque::new();
    match inodes.get(&ROOT_INO) {
        Some(d) if d.kind == InodeKind::Directory => {
            reachable.insert(ROOT_INO);
            queue.push_back((ROOT_INO, ROOT_INO));
        }
        _ => report.push('b', "root inode is not an allocated directory".into()),
    }
    while let Some((dir, parent)) = queue.pop_front() {
        report.directories += 1;
        let d = &inodes[&dir];
        let map = &maps[&dir];
        let nblocks = d.size / BS;
        if d.size % BS != 0 || (0..nblocks).any(|fb| !map.contains_key(&fb)) || nblocks < 2 {
            report.push('e', format!("directory {dir}: size {} does not match its blocks", d.size));
            continue;
        }
        let mut store = RawDir {
            img,
            blocks: map,
            nblocks,
        };
        match dirtree::check(&mut store) {
            Ok(problems) => {
                for p in problems {
                    report.push('d', format!("directory {dir}: {p}"));
                }
            }
            Err(e) => {
                report.push('d', format!("directory {dir}: unreadable ({e})"));
                continue;
            }
        }
        let entries = match dirtree::all_entries(&mut store) {
            Ok(e) => e,
            Err(e) => {
                report.push('d', format!("directory {dir}: unreadable ({e})"));
                continue;
            }
        };
        let mut saw_dot = false;
        for r in entries {
            let name = String::from_utf8_lossy(&r.name).into_owned();
            if r.name == b"." {
                saw_dot = true;
                if r.ino != dir {
                    report.push('d', format!("directory {dir}: \".\" points to {}", r.ino));
                }
                continue;
            }
            if r.name == b".." {
                dotdot.insert(dir, r.ino);
                if r.ino != parent {
                    report.push('d', format!("directory {dir}: \"..\" points to {}, parent is {parent}", r.ino));
                }
                continue;
            }
            let Some(child) = inodes.get(&r.ino) else {
                report.push('d', format!("directory {dir}: entry {name:?} refers to free inode {}", r.ino));
                continue;
            };
            *entry_refs.entry(r.ino).or_default() += 1;
            if child.kind == InodeKind::Directory {
                *subdirs.entry(dir).or_default() += 1;
                if !reachable.insert(r.ino) {
                    report.push('c', format!("directory {} has more than one name", r.ino));
                    continue;
                }
                queue.push_back((r.ino, dir));
            } else {
                reachable.insert(r.ino);
            }
        }
        if !saw_dot {
            report.push('d', format!("directory {dir}: missing \".\""));
        }
        if !dotdot.contains_key(&dir) {
            report.push('d', format!("directory {dir}: missing \"..\""));
        }
    }
    if let Some(d) = inodes.get(&PROV_LOG_INO) {
        if d.kind == InodeKind::RegularFile {
            reachable.insert(PROV_LOG_INO);
        }
    }

    // (b) bitmaps against reachability.
    for ino in 1..=sb.inode_count() {
        let (bb, bit) = sb.inode_bit(ino);
        let set = bit_is_set(&img.block(bb)?, bit);
        let allocated = inodes.contains_key(&ino);
        if set != allocated {
            report.push('b', format!("inode {ino}: bitmap says {set}, inode table says {allocated}"));
        }
        if allocated && !reachable.contains(&ino) {
            report.push('b', format!("inode {ino}: allocated but not reachable from the root"));
        }
    }
    let mut bitmap_cache: HashMap<u64, Vec<u8>> = HashMap::new();
    for b in 0..sb.total_blocks() {
        let (bb, bit) = sb.block_bit(b);
        if !bitmap_cache.contains_key(&bb) {
            bitmap_cache.insert(bb, img.block(bb)?);
        }
        let set = bit_is_set(&bitmap_cache[&bb], bit);
        let used = refs.contains_key(&b);
        if set != used {
            report.push('b', format!("block {b}: bitmap says {set}, references say {used}"));
        }
    }

    // (c) link counts.
    for (&ino, d) in &inodes {
        if !reachable.contains(&ino) {
            continue;
        }
        let expected = if ino == PROV_LOG_INO && !entry_refs.contains_key(&ino) {
            1
        } else if d.kind == InodeKind::Directory {
            let from_parent = if ino == ROOT_INO { 1 } else { entry_refs.get(&ino).copied().unwrap_or(0) };
            from_parent + 1 + subdirs.get(&ino).copied().unwrap_or(0)
        } else {
            entry_refs.get(&ino).copied().unwrap_or(0)
        };
        if u64::from(d.nlink) != expected {
            report.push('c', format!("inode {ino}: nlink {} but {expected} references", d.nlink));
        }
    }

    // (e) sizes against mappings.
    for (&ino, d) in &inodes {
        if d.size > MAX_FILE_SIZE {
            report.push('e', format!("inode {ino}: size {} exceeds the cap", d.size));
        }
        let limit = d.size.div_ceil(BS);
        if let Some((&fb, _)) = maps[&ino].range(limit..).next() {
            report.push('e', format!("inode {ino}: block {fb} mapped beyond size {}", d.size));
        }
        if d.kind == InodeKind::Symlink && (d.size == 0 || !maps[&ino].contains_key(&0)) {
            report.push('e', format!("symlink {ino}: no target"));
        }
        // Pointer blocks must not linger once everything under them is gone.
        if limit <= d.direct.len() as u64 && d.indirect != 0 {
            report.push('e', format!("inode {ino}: indirect block kept with size {}", d.size));
        }
        if let Some(BlockPath::Direct(_) | BlockPath::Indirect(_)) = limit.checked_sub(1).and_then(block_path) {
            if d.dindirect != 0 {
                report.push('e', format!("inode {ino}: double-indirect block kept with size {}", d.size));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bentofs::{mkfs, MkfsOptions};
    use crate::blockdev::{DeviceOptions, MemImage};
    use crate::bentofs::layout::set_bit;

    fn fresh(blocks: u64) -> BlockDevice {
        let dev = BlockDevice::memory(MemImage::zeroed(BLOCK_SIZE, blocks), DeviceOptions::default()).unwrap();
        mkfs(&dev, &MkfsOptions::default()).unwrap();
        dev
    }

    #[test]
    fn fresh_image_is_clean() {
        let r = fsck(&fresh(4096)).unwrap();
        assert!(r.is_clean(), "{r}");
        assert_eq!(r.inodes_in_use, 1);
        assert_eq!(r.directories, 1);
    }

    #[test]
    fn flipped_block_bit_is_reported_under_b() {
        let dev = fresh(4096);
        let sb = read_superblock(&dev).unwrap();
        let victim = sb.total_blocks() - 1;
        let (bb, bit) = sb.block_bit(victim);
        let mut blk = dev.read_uncached(bb).unwrap();
        set_bit(&mut blk, bit, true);
        dev.write_uncached(bb, &blk).unwrap();
        let r = fsck(&dev).unwrap();
        assert_eq!(r.violations.len(), 1, "{r}");
        assert_eq!(r.violations[0].check, 'b');
        assert!(r.violations[0].detail.contains(&format!("block {victim}")));
    }

    #[test]
    fn zeroed_image_is_bad_magic() {
        let dev = BlockDevice::memory(MemImage::zeroed(BLOCK_SIZE, 512), DeviceOptions::default()).unwrap();
        assert!(matches!(fsck(&dev), Err(MountError::BadMagic)));
    }
}
