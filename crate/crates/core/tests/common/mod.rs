#![allow(dead_code)]

use bentoframe_core::bentofs::{mkfs, BentoFs, MkfsOptions, MountOptions, Variant};
use bentoframe_core::blockdev::{BlockDevice, DeviceOptions, MemImage};
use bentoframe_core::fsapi::*;
use bentoframe_core::Errno;

pub const ROOT: u64 = 1;

pub fn fresh_device(blocks: u64) -> BlockDevice {
    let dev = BlockDevice::memory(MemImage::zeroed(4096, blocks), DeviceOptions::default()).unwrap();
    mkfs(&dev, &MkfsOptions::default()).unwrap();
    dev
}

pub fn mount(variant: Variant, dev: &BlockDevice) -> BentoFs {
    BentoFs::mount(variant, dev.clone(), MountOptions::default()).unwrap()
}

pub fn ctx(pid: u32) -> RequestContext {
    RequestContext::root(pid)
}

pub fn create(fs: &dyn FileSystem, parent: u64, name: &str) -> (u64, u64) {
    let (e, o) = fs.create(&ctx(1), parent, name, S_IFREG | 0o644, O_RDWR).unwrap();
    (e.ino(), o.fh)
}

pub fn mkdir(fs: &dyn FileSystem, parent: u64, name: &str) -> u64 {
    fs.mkdir(&ctx(1), parent, name, 0o755).unwrap().ino()
}

pub fn lookup(fs: &dyn FileSystem, parent: u64, name: &str) -> Result<u64, Errno> {
    fs.lookup(&ctx(1), parent, name).map(|e| e.ino())
}

pub fn write_all(fs: &dyn FileSystem, ino: u64, fh: u64, offset: u64, data: &[u8]) {
    let mut done = 0usize;
    while done < data.len() {
        let end = (done + (1 << 20)).min(data.len());
        let n = fs.write(&ctx(1), ino, fh, offset + done as u64, &data[done..end], 0).unwrap();
        assert!(n > 0);
        done += n as usize;
    }
}

pub fn read_all(fs: &dyn FileSystem, ino: u64, fh: u64, offset: u64, len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(len);
    while out.len() < len {
        let want = (len - out.len()).min(1 << 20) as u32;
        let chunk = fs.read(&ctx(1), ino, fh, offset + out.len() as u64, want).unwrap();
        if chunk.is_empty() {
            break;
        }
        out.extend_from_slice(&chunk);
    }
    out
}

/// Every name in a directory except `.` and `..`, sorted.
pub fn list(fs: &dyn FileSystem, dir: u64) -> Vec<String> {
    let o = fs.opendir(&ctx(1), dir, 0).unwrap();
    let mut names = Vec::new();
    let mut off = 0;
    loop {
        let batch = fs.readdir(&ctx(1), dir, o.fh, off).unwrap();
        let Some(last) = batch.last() else { break };
        off = last.next_offset;
        names.extend(batch.into_iter().map(|d| d.name).filter(|n| n != "." && n != ".."));
    }
    fs.releasedir(&ctx(1), dir, o.fh).unwrap();
    names.sort();
    names
}

pub fn pattern(len: usize, seed: u32) -> Vec<u8> {
    let mut x = seed.wrapping_mul(2_654_435_761).wrapping_add(1);
    (0..len)
        .map(|_| {
            x ^= x << 13;
            x ^= x >> 17;
            x ^= x << 5;
            x as u8
        })
        .collect()
}
