//! Hash-indexed directories.
//!
//! File block 0 of a directory is the index: `{magic, count}` followed by
//! `count` sorted `(hash_lo, leaf)` pairs. A name with hash `h` lives in the
//! leaf of the last pair whose `hash_lo <= h`; the first pair always has
//! `hash_lo = 0`. Leaves hold packed records `{u32 ino, u8 name_len, name}`
//! padded to four bytes; an `ino` of zero ends the block. A full leaf splits
//! at the hash nearest its median.

use crate::errno::Errno;
use crate::hash::fnv1a32;

use super::layout::{BLOCK_SIZE, MAX_NAME_LEN};

const INDEX_MAGIC: u32 = 0x4244_4958;
const INDEX_HEADER: usize = 8;
pub const MAX_LEAVES: usize = (BLOCK_SIZE - INDEX_HEADER) / 8;

/// Block storage of one directory, addressed by file block number.
pub trait DirStore {
    fn nblocks(&self) -> u64;
    fn read_block(&mut self, fb: u64) -> Result<Vec<u8>, Errno>;
    fn write_block(&mut self, fb: u64, data: &[u8]) -> Result<(), Errno>;
    /// Adds a block at the end of the directory and returns its number.
    fn append_block(&mut self, data: &[u8]) -> Result<u64, Errno>;
}

pub fn name_hash(name: &[u8]) -> u32 {
    fnv1a32(name)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DirRecord {
    pub ino: u64,
    pub name: Vec<u8>,
}

impl DirRecord {
    pub fn hash(&self) -> u32 {
        name_hash(&self.name)
    }
}

fn record_len(name_len: usize) -> usize {
    (5 + name_len + 3) & !3
}

fn get_u32(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn corrupt(what: &str) -> Errno {
    log::error!("corrupt directory block: {what}");
    Errno::EIO
}

pub fn decode_leaf(b: &[u8]) -> Result<Vec<DirRecord>, Errno> {
    let mut out = Vec::new();
    let mut off = 0;
    while off + 5 <= b.len() {
        let ino = get_u32(b, off);
        if ino == 0 {
            break;
        }
        let len = b[off + 4] as usize;
        if len == 0 || off + 5 + len > b.len() {
            return Err(corrupt("record overruns leaf"));
        }
        out.push(DirRecord {
            ino: u64::from(ino),
            name: b[off + 5..off + 5 + len].to_vec(),
        });
        off += record_len(len);
    }
    Ok(out)
}

/// `None` if the records do not fit in one block.
pub fn encode_leaf(records: &[DirRecord]) -> Option<Vec<u8>> {
    let mut b = vec![0; BLOCK_SIZE];
    let mut off = 0;
    for r in records {
        let len = record_len(r.name.len());
        if off + len > BLOCK_SIZE {
            return None;
        }
        b[off..off + 4].copy_from_slice(&(r.ino as u32).to_le_bytes());
        b[off + 4] = r.name.len() as u8;
        b[off + 5..off + 5 + r.name.len()].copy_from_slice(&r.name);
        off += len;
    }
    Some(b)
}

pub fn decode_index(b: &[u8]) -> Result<Vec<(u32, u64)>, Errno> {
    if get_u32(b, 0) != INDEX_MAGIC {
        return Err(corrupt("bad index magic"));
    }
    let count = get_u32(b, 4) as usize;
    if count == 0 || count > MAX_LEAVES {
        return Err(corrupt("bad index count"));
    }
    Ok((0..count)
        .map(|i| {
            let off = INDEX_HEADER + 8 * i;
            (get_u32(b, off), u64::from(get_u32(b, off + 4)))
        })
        .collect())
}

fn encode_index(entries: &[(u32, u64)]) -> Vec<u8> {
    let mut b = vec![0; BLOCK_SIZE];
    b[0..4].copy_from_slice(&INDEX_MAGIC.to_le_bytes());
    b[4..8].copy_from_slice(&(entries.len() as u32).to_le_bytes());
    for (i, (h, leaf)) in entries.iter().enumerate() {
        let off = INDEX_HEADER + 8 * i;
        b[off..off + 4].copy_from_slice(&h.to_le_bytes());
        b[off + 4..off + 8].copy_from_slice(&(*leaf as u32).to_le_bytes());
    }
    b
}

fn leaf_pos(index: &[(u32, u64)], h: u32) -> usize {
    index.partition_point(|(lo, _)| *lo <= h) - 1
}

pub fn check_name(name: &[u8]) -> Result<(), Errno> {
    if name.is_empty() || name.contains(&b'/') || name.contains(&0) {
        return Err(Errno::EINVAL);
    }
    if name.len() > MAX_NAME_LEN {
        return Err(Errno::ENAMETOOLONG);
    }
    Ok(())
}

/// Writes an empty directory (`.` and `..`) into a store with no blocks.
pub fn init<S: DirStore>(s: &mut S, self_ino: u64, parent_ino: u64) -> Result<(), Errno> {
    assert_eq!(s.nblocks(), 0, "directory store not empty");
    let index = s.append_block(&encode_index(&[(0, 1)]))?;
    debug_assert_eq!(index, 0);
    let leaf = encode_leaf(&[
        DirRecord {
            ino: self_ino,
            name: b".".to_vec(),
        },
        DirRecord {
            ino: parent_ino,
            name: b"..".to_vec(),
        },
    ])
    .unwrap();
    s.append_block(&leaf)?;
    Ok(())
}

fn find_leaf<S: DirStore>(s: &mut S, name: &[u8]) -> Result<(Vec<(u32, u64)>, usize), Errno> {
    let index = decode_index(&s.read_block(0)?)?;
    let pos = leaf_pos(&index, name_hash(name));
    if index[pos].1 == 0 || index[pos].1 >= s.nblocks() {
        return Err(corrupt("index points outside directory"));
    }
    Ok((index, pos))
}

pub fn lookup<S: DirStore>(s: &mut S, name: &[u8]) -> Result<Option<u64>, Errno> {
    let (index, pos) = find_leaf(s, name)?;
    let recs = decode_leaf(&s.read_block(index[pos].1)?)?;
    Ok(recs.into_iter().find(|r| r.name == name).map(|r| r.ino))
}

pub fn insert<S: DirStore>(s: &mut S, name: &[u8], ino: u64) -> Result<(), Errno> {
    check_name(name)?;
    let (mut index, pos) = find_leaf(s, name)?;
    let leaf = index[pos].1;
    let mut recs = decode_leaf(&s.read_block(leaf)?)?;
    if recs.iter().any(|r| r.name == name) {
        return Err(Errno::EEXIST);
    }
    recs.push(DirRecord {
        ino,
        name: name.to_vec(),
    });
    if let Some(b) = encode_leaf(&recs) {
        return s.write_block(leaf, &b);
    }
    if index.len() >= MAX_LEAVES {
        return Err(Errno::ENOSPC);
    }
    recs.sort_by(|a, b| (a.hash(), &a.name).cmp(&(b.hash(), &b.name)));
    let hashes: Vec<u32> = recs.iter().map(DirRecord::hash).collect();
    let mid = recs.len() / 2;
    let split = (1..recs.len())
        .filter(|&i| hashes[i] != hashes[i - 1])
        .min_by_key(|&i| i.abs_diff(mid))
        .ok_or(Errno::ENOSPC)?;
    let (left, right) = recs.split_at(split);
    let (Some(lb), Some(rb)) = (encode_leaf(left), encode_leaf(right)) else {
        return Err(Errno::ENOSPC);
    };
    let new_leaf = s.append_block(&rb)?;
    s.write_block(leaf, &lb)?;
    index.insert(pos + 1, (hashes[split], new_leaf));
    s.write_block(0, &encode_index(&index))
}

/// Removes `name`, returning the inode it referred to.
pub fn remove<S: DirStore>(s: &mut S, name: &[u8]) -> Result<Option<u64>, Errno> {
    let (index, pos) = find_leaf(s, name)?;
    let leaf = index[pos].1;
    let mut recs = decode_leaf(&s.read_block(leaf)?)?;
    let Some(i) = recs.iter().position(|r| r.name == name) else {
        return Ok(None);
    };
    let old = recs.remove(i);
    s.write_block(leaf, &encode_leaf(&recs).unwrap())?;
    Ok(Some(old.ino))
}

/// Points an existing entry at a different inode, returning the old one.
pub fn replace<S: DirStore>(s: &mut S, name: &[u8], ino: u64) -> Result<Option<u64>, Errno> {
    let (index, pos) = find_leaf(s, name)?;
    let leaf = index[pos].1;
    let mut recs = decode_leaf(&s.read_block(leaf)?)?;
    let Some(r) = recs.iter_mut().find(|r| r.name == name) else {
        return Ok(None);
    };
    let old = std::mem::replace(&mut r.ino, ino);
    s.write_block(leaf, &encode_leaf(&recs).unwrap())?;
    Ok(Some(old))
}

/// Readdir cookie of an entry: its position in (hash, name) order. Zero is
/// reserved for "start of directory".
fn cookie(hash: u32, rank: usize) -> u64 {
    ((u64::from(hash) << 16) | rank as u64) + 1
}

/// Up to `limit` entries whose cookie is greater than `after`, in cookie
/// order, each paired with its cookie.
pub fn entries_after<S: DirStore>(
    s: &mut S,
    after: u64,
    limit: usize,
) -> Result<Vec<(DirRecord, u64)>, Errno> {
    let index = decode_index(&s.read_block(0)?)?;
    let start_hash = if after == 0 { 0 } else { ((after - 1) >> 16) as u32 };
    let mut out = Vec::new();
    for &(_, leaf) in &index[leaf_pos(&index, start_hash)..] {
        let mut recs = decode_leaf(&s.read_block(leaf)?)?;
        recs.sort_by(|a, b| (a.hash(), &a.name).cmp(&(b.hash(), &b.name)));
        let mut rank = 0;
        for (i, r) in recs.iter().enumerate() {
            rank = if i > 0 && recs[i - 1].hash() == r.hash() { rank + 1 } else { 0 };
            let c = cookie(r.hash(), rank);
            if c > after {
                out.push((r.clone(), c));
                if out.len() == limit {
                    return Ok(out);
                }
            }
        }
    }
    Ok(out)
}

pub fn all_entries<S: DirStore>(s: &mut S) -> Result<Vec<DirRecord>, Errno> {
    Ok(entries_after(s, 0, usize::MAX)?.into_iter().map(|(r, _)| r).collect())
}

/// True if the directory holds nothing but `.` and `..`.
pub fn is_empty<S: DirStore>(s: &mut S) -> Result<bool, Errno> {
    let index = decode_index(&s.read_block(0)?)?;
    for &(_, leaf) in &index {
        let recs = decode_leaf(&s.read_block(leaf)?)?;
        if recs.iter().any(|r| r.name != b"." && r.name != b"..") {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Structural problems: index order, entries in the wrong leaf, duplicate
/// names, unreferenced leaf blocks.
pub fn check<S: DirStore>(s: &mut S) -> Result<Vec<String>, Errno> {
    let mut problems = Vec::new();
    let index = decode_index(&s.read_block(0)?)?;
    if index[0].0 != 0 {
        problems.push("first index entry does not start at hash 0".into());
    }
    if index.windows(2).any(|w| w[0].0 >= w[1].0) {
        problems.push("index hashes not strictly increasing".into());
    }
    let mut seen_leaves = std::collections::HashSet::new();
    let mut names = std::collections::HashSet::new();
    for (pos, &(lo, leaf)) in index.iter().enumerate() {
        if leaf == 0 || leaf >= s.nblocks() || !seen_leaves.insert(leaf) {
            problems.push(format!("index entry {pos} has bad leaf {leaf}"));
            continue;
        }
        let hi = index.get(pos + 1).map(|e| e.0);
        for r in decode_leaf(&s.read_block(leaf)?)? {
            let h = r.hash();
            if h < lo || hi.is_some_and(|hi| h >= hi) {
                problems.push(format!(
                    "entry {:?} (hash {h:#x}) stored in leaf {leaf} covering {lo:#x}..",
                    String::from_utf8_lossy(&r.name)
                ));
            }
            if !names.insert(r.name.clone()) {
                problems.push(format!("duplicate name {:?}", String::from_utf8_lossy(&r.name)));
            }
        }
    }
    if seen_leaves.len() as u64 != s.nblocks().saturating_sub(1) {
        problems.push(format!(
            "{} leaf blocks referenced, directory has {}",
            seen_leaves.len(),
            s.nblocks().saturating_sub(1)
        ));
    }
    Ok(problems)
}

/// In-memory store, used by tests and tools.
#[derive(Clone, Debug, Default)]
pub struct MemDirStore {
    pub blocks: Vec<Vec<u8>>,
}

impl DirStore for MemDirStore {
    fn nblocks(&self) -> u64 {
        self.blocks.len() as u64
    }
    fn read_block(&mut self, fb: u64) -> Result<Vec<u8>, Errno> {
        self.blocks.get(fb as usize).cloned().ok_or(Errno::EIO)
    }
    fn write_block(&mut self, fb: u64, data: &[u8]) -> Result<(), Errno> {
        let b = self.blocks.get_mut(fb as usize).ok_or(Errno::EIO)?;
        b.copy_from_slice(data);
        Ok(())
    }
    fn append_block(&mut self, data: &[u8]) -> Result<u64, Errno> {
        self.blocks.push(data.to_vec());
        Ok(self.blocks.len() as u64 - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn fresh() -> MemDirStore {
        let mut s = MemDirStore::default();
        init(&mut s, 5, 1).unwrap();
        s
    }

    /// Scans every leaf block's raw bytes for `name`, ignoring the index.
    fn linear_scan(s: &MemDirStore, name: &[u8]) -> Option<u64> {
        for b in &s.blocks[1..] {
            let mut off = 0;
            while off + 5 <= b.len() {
                let ino = u32::from_le_bytes(b[off..off + 4].try_into().unwrap());
                if ino == 0 {
                    break;
                }
                let len = b[off + 4] as usize;
                if &b[off + 5..off + 5 + len] == name {
                    return Some(u64::from(ino));
                }
                off += (5 + len + 3) & !3;
            }
        }
        None
    }

    #[test]
    fn fresh_directory_has_dot_entries() {
        let mut s = fresh();
        let names: Vec<Vec<u8>> = all_entries(&mut s).unwrap().into_iter().map(|r| r.name).collect();
        assert_eq!(names.len(), 2);
        assert!(names.contains(&b".".to_vec()) && names.contains(&b"..".to_vec()));
        assert_eq!(lookup(&mut s, b".").unwrap(), Some(5));
        assert_eq!(lookup(&mut s, b"..").unwrap(), Some(1));
        assert!(is_empty(&mut s).unwrap());
    }

    #[test]
    fn name_rules() {
        let mut s = fresh();
        assert_eq!(insert(&mut s, b"a", 9), Ok(()));
        assert_eq!(insert(&mut s, b"a", 10), Err(Errno::EEXIST));
        assert_eq!(insert(&mut s, &[b'x'; 256], 10), Err(Errno::ENAMETOOLONG));
        assert_eq!(insert(&mut s, &[b'x'; 255], 10), Ok(()));
        assert_eq!(insert(&mut s, b"a/b", 10), Err(Errno::EINVAL));
    }

    #[test]
    fn many_inserts_split_and_match_linear_scan() {
        let mut s = fresh();
        for i in 0..3000u64 {
            insert(&mut s, format!("file-{i}").as_bytes(), i + 10).unwrap();
        }
        assert!(s.blocks.len() > 3);
        assert!(check(&mut s).unwrap().is_empty());
        for i in (0..3000u64).step_by(7) {
            let n = format!("file-{i}");
            assert_eq!(lookup(&mut s, n.as_bytes()).unwrap(), Some(i + 10));
            assert_eq!(linear_scan(&s, n.as_bytes()), Some(i + 10));
        }
        for i in (0..3000u64).step_by(2) {
            assert_eq!(remove(&mut s, format!("file-{i}").as_bytes()).unwrap(), Some(i + 10));
        }
        assert_eq!(all_entries(&mut s).unwrap().len(), 1500 + 2);
        assert!(check(&mut s).unwrap().is_empty());
    }

    #[test]
    fn paged_readdir_covers_everything_once() {
        let mut s = fresh();
        for i in 0..1000u64 {
            insert(&mut s, format!("n{i}").as_bytes(), i + 10).unwrap();
        }
        let mut seen = Vec::new();
        let mut off = 0;
        loop {
            let page = entries_after(&mut s, off, 37).unwrap();
            if page.is_empty() {
                break;
            }
            off = page.last().unwrap().1;
            seen.extend(page.into_iter().map(|(r, _)| r.name));
        }
        let mut sorted = seen.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), seen.len());
        assert_eq!(seen.len(), 1002);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn behaves_like_a_map(ops in proptest::collection::vec((0u8..3, 0u16..400), 1..400)) {
            let mut s = fresh();
            let mut model: BTreeMap<Vec<u8>, u64> = BTreeMap::new();
            for (i, (op, k)) in ops.into_iter().enumerate() {
                let name = format!("entry-with-a-longish-name-{k}").into_bytes();
                match op {
                    0 => {
                        let r = insert(&mut s, &name, i as u64 + 10);
                        if model.contains_key(&name) {
                            prop_assert_eq!(r, Err(Errno::EEXIST));
                        } else {
                            prop_assert_eq!(r, Ok(()));
                            model.insert(name.clone(), i as u64 + 10);
                        }
                    }
                    1 => prop_assert_eq!(remove(&mut s, &name).unwrap(), model.remove(&name)),
                    _ => {
                        prop_assert_eq!(lookup(&mut s, &name).unwrap(), model.get(&name).copied());
                        prop_assert_eq!(linear_scan(&s, &name), model.get(&name).copied());
                    }
                }
            }
            prop_assert!(check(&mut s).unwrap().is_empty());
            let listed: BTreeMap<Vec<u8>, u64> = all_entries(&mut s)
                .unwrap()
                .into_iter()
                .filter(|r| r.name != b"." && r.name != b"..")
                .map(|r| (r.name, r.ino))
                .collect();
            prop_assert_eq!(listed, model);
        }
    }
}
