mod common;

use std::collections::BTreeSet;

use bentoframe_core::bentofs::fsck::fsck;
use bentoframe_core::bentofs::{mkfs, BentoFs, MkfsError, MkfsOptions, MountError, MountOptions, Variant};
use bentoframe_core::blockdev::{BlockDevice, DeviceOptions, MemImage, TraceEvent, TraceMode};
use bentoframe_core::fsapi::*;
use bentoframe_core::Errno;
use common::*;

const GIB4: u64 = 1 << 32;

#[test]
fn mkfs_rejects_tiny_devices() {
    let dev = BlockDevice::memory(MemImage::zeroed(4096, 16), DeviceOptions::default()).unwrap();
    assert!(matches!(
        mkfs(&dev, &MkfsOptions::default()),
        Err(MkfsError::DeviceTooSmall { blocks: 16 })
    ));
}

#[test]
fn mkfs_is_deterministic() {
    let a = fresh_device(4096).snapshot().unwrap().digest();
    let b = fresh_device(4096).snapshot().unwrap().digest();
    assert_eq!(a, b);
}

#[test]
fn fresh_root_and_statfs() {
    let dev = fresh_device(4096);
    let fs = mount(Variant::Plain, &dev);
    let root = fs.getattr(&ctx(1), ROOT).unwrap();
    assert_eq!(root.kind, FileKind::Directory);
    assert_eq!(root.nlink, 2);
    let sb = fs.superblock().unwrap();
    let st = fs.statfs(&ctx(1), ROOT).unwrap();
    assert_eq!(st.files, sb.inode_count());
    assert_eq!(st.ffree, sb.inode_count() - 1);
    assert_eq!(st.bsize, 4096);
    assert!(list(&fs, ROOT).is_empty());
}

#[test]
fn zeroed_device_is_bad_magic() {
    let dev = BlockDevice::memory(MemImage::zeroed(4096, 4096), DeviceOptions::default()).unwrap();
    assert!(matches!(
        BentoFs::mount(Variant::Plain, dev, MountOptions::default()),
        Err(MountError::BadMagic)
    ));
    let mut fs = BentoFs::new(Variant::Plain, MountOptions::default());
    let err = fs.init(&ctx(1), "/nonexistent/bentoframe.img", &FcInfo::default()).unwrap_err();
    assert_eq!(err, Errno::EIO);
}

#[test]
fn namespace_operations() {
    let dev = fresh_device(4096);
    let fs = mount(Variant::Plain, &dev);
    let d = mkdir(&fs, ROOT, "d");
    let (f, fh) = create(&fs, d, "f");
    write_all(&fs, f, fh, 0, b"hello");
    fs.release(&ctx(1), f, fh, 0).unwrap();

    assert_eq!(fs.create(&ctx(1), d, "f", S_IFREG | 0o644, O_RDWR | O_EXCL | O_CREAT).unwrap_err(), Errno::EEXIST);
    assert_eq!(fs.rmdir(&ctx(1), ROOT, "d").unwrap_err(), Errno::ENOTEMPTY);
    assert_eq!(fs.unlink(&ctx(1), ROOT, "d").unwrap_err(), Errno::EISDIR);
    assert_eq!(fs.rmdir(&ctx(1), d, "f").unwrap_err(), Errno::ENOTDIR);

    let e = fs.link(&ctx(1), f, ROOT, "hard").unwrap();
    assert_eq!(e.attr.nlink, 2);
    fs.symlink(&ctx(1), ROOT, "sym", "d/f").unwrap();
    let sym = lookup(&fs, ROOT, "sym").unwrap();
    assert_eq!(fs.readlink(&ctx(1), sym).unwrap(), b"d/f");

    fs.rename(&ctx(1), d, "f", ROOT, "g", 0).unwrap();
    assert_eq!(lookup(&fs, d, "f"), Err(Errno::ENOENT));
    assert_eq!(lookup(&fs, ROOT, "g"), Ok(f));
    assert_eq!(list(&fs, ROOT), vec!["d", "g", "hard", "sym"]);
    assert_eq!(
        fs.rename(&ctx(1), ROOT, "g", ROOT, "hard", RENAME_NOREPLACE).unwrap_err(),
        Errno::EEXIST
    );
    assert_eq!(fs.rename(&ctx(1), ROOT, "d", d, "inner", 0).unwrap_err(), Errno::EINVAL);

    fs.unlink(&ctx(1), ROOT, "g").unwrap();
    assert_eq!(fs.getattr(&ctx(1), f).unwrap().nlink, 1);
    fs.rmdir(&ctx(1), ROOT, "d").unwrap();
    assert_eq!(fs.getattr(&ctx(1), ROOT).unwrap().nlink, 2);

    let o = fs.open(&ctx(1), f, O_RDONLY).unwrap();
    assert_eq!(fs.read(&ctx(1), f, o.fh, 0, 100).unwrap(), b"hello");
    assert_eq!(fs.write(&ctx(1), f, o.fh, 0, b"x", 0).unwrap_err(), Errno::EBADF);
    fs.release(&ctx(1), f, o.fh, 0).unwrap();

    drop(fs);
    let r = fsck(&dev).unwrap();
    assert!(r.is_clean(), "{r}");
}

#[test]
fn data_survives_remount() {
    let dev = fresh_device(8192);
    let data = pattern(300_000, 7);
    {
        let fs = mount(Variant::Plain, &dev);
        let (f, fh) = create(&fs, ROOT, "big");
        write_all(&fs, f, fh, 0, &data);
        fs.release(&ctx(1), f, fh, 0).unwrap();
    }
    let fs = mount(Variant::Plain, &dev);
    let f = lookup(&fs, ROOT, "big").unwrap();
    let o = fs.open(&ctx(1), f, O_RDONLY).unwrap();
    assert_eq!(read_all(&fs, f, o.fh, 0, data.len() + 10), data);
    fs.release(&ctx(1), f, o.fh, 0).unwrap();
    drop(fs);
    assert!(fsck(&dev).unwrap().is_clean());
}

#[test]
fn truncate_frees_blocks_and_holes_read_as_zeros() {
    let dev = fresh_device(8192);
    let fs = mount(Variant::Plain, &dev);
    let before = fs.statfs(&ctx(1), ROOT).unwrap().bfree;
    let (f, fh) = create(&fs, ROOT, "sparse");
    write_all(&fs, f, fh, 20 << 20, b"tail");
    let mid = fs.read(&ctx(1), f, fh, 1 << 20, 8).unwrap();
    assert_eq!(mid, vec![0; 8]);
    let attr = SetAttr {
        size: Some(0),
        ..Default::default()
    };
    assert_eq!(fs.setattr(&ctx(1), f, Some(fh), &attr).unwrap().size, 0);
    assert!(fs.mapped_blocks(f).unwrap().is_empty());
    fs.release(&ctx(1), f, fh, 0).unwrap();
    fs.unlink(&ctx(1), ROOT, "sparse").unwrap();
    assert_eq!(fs.statfs(&ctx(1), ROOT).unwrap().bfree, before);
    drop(fs);
    assert!(fsck(&dev).unwrap().is_clean());
}

#[test]
fn four_gib_cap() {
    let dev = fresh_device(4096);
    let fs = mount(Variant::Plain, &dev);
    let (f, fh) = create(&fs, ROOT, "edge");
    let block = pattern(4096, 3);
    assert_eq!(fs.write(&ctx(1), f, fh, GIB4 - 4096, &block, 0).unwrap(), 4096);
    assert_eq!(fs.getattr(&ctx(1), f).unwrap().size, GIB4);
    assert_eq!(fs.write(&ctx(1), f, fh, GIB4, b"x", 0).unwrap_err(), Errno::EFBIG);
    assert_eq!(fs.write(&ctx(1), f, fh, GIB4 - 1, b"xy", 0).unwrap_err(), Errno::EFBIG);
    assert_eq!(fs.read(&ctx(1), f, fh, GIB4 - 4096, 4096).unwrap(), block);
    fs.release(&ctx(1), f, fh, 0).unwrap();
    fs.unlink(&ctx(1), ROOT, "edge").unwrap();
    drop(fs);
    assert!(fsck(&dev).unwrap().is_clean());
}

#[test]
fn mkdir_after_rmdir_of_open_directory_gets_new_inode() {
    let dev = fresh_device(4096);
    let fs = mount(Variant::Plain, &dev);
    let d = mkdir(&fs, ROOT, "d");
    let o = fs.opendir(&ctx(1), d, 0).unwrap();
    fs.rmdir(&ctx(1), ROOT, "d").unwrap();
    let d2 = mkdir(&fs, ROOT, "d");
    assert_ne!(d, d2);
    let (f, fh) = create(&fs, d2, "inside");
    fs.release(&ctx(1), f, fh, 0).unwrap();
    assert_eq!(list(&fs, d2), vec!["inside"]);
    // The removed directory still answers on its handle, empty.
    assert!(fs.readdir(&ctx(1), d, o.fh, 0).is_ok());
    fs.releasedir(&ctx(1), d, o.fh).unwrap();
    drop(fs);
    assert!(fsck(&dev).unwrap().is_clean());
}

#[test]
fn open_unlinked_file_stays_readable_until_release() {
    let dev = fresh_device(4096);
    let fs = mount(Variant::Plain, &dev);
    let (f, fh) = create(&fs, ROOT, "tmp");
    write_all(&fs, f, fh, 0, b"still here");
    fs.unlink(&ctx(1), ROOT, "tmp").unwrap();
    assert_eq!(fs.read(&ctx(1), f, fh, 0, 64).unwrap(), b"still here");
    fs.release(&ctx(1), f, fh, 0).unwrap();
    assert_eq!(fs.getattr(&ctx(1), f).unwrap_err(), Errno::ENOENT);
    drop(fs);
    assert!(fsck(&dev).unwrap().is_clean());
}

#[test]
fn orphans_are_freed_at_mount() {
    let dev = fresh_device(4096);
    let free_before;
    {
        let fs = mount(Variant::Plain, &dev);
        free_before = fs.statfs(&ctx(1), ROOT).unwrap().ffree;
        let (f, fh) = create(&fs, ROOT, "orphan");
        write_all(&fs, f, fh, 0, &pattern(40_000, 1));
        fs.unlink(&ctx(1), ROOT, "orphan").unwrap();
        fs.fsync(&ctx(1), f, fh, false).unwrap();
        // Simulate a crash with the handle still open.
        dev.freeze();
        std::mem::forget(fs);
    }
    let img = dev.snapshot().unwrap();
    let dev = BlockDevice::memory(img, DeviceOptions::default()).unwrap();
    let fs = mount(Variant::Plain, &dev);
    assert_eq!(fs.statfs(&ctx(1), ROOT).unwrap().ffree, free_before);
    drop(fs);
    assert!(fsck(&dev).unwrap().is_clean());
}

#[test]
fn deleted_files_never_reach_their_home_blocks() {
    let dev = fresh_device(8192);
    let fs = mount(Variant::Plain, &dev);
    dev.start_trace(TraceMode::Digest);
    let data = pattern(64 * 1024, 9);
    let mut data_blocks = BTreeSet::new();
    for i in 0..100 {
        let (f, fh) = create(&fs, ROOT, &format!("f{i}"));
        write_all(&fs, f, fh, 0, &data);
        data_blocks.extend(fs.mapped_blocks(f).unwrap());
        fs.unlink(&ctx(1), ROOT, &format!("f{i}")).unwrap();
        fs.release(&ctx(1), f, fh, 0).unwrap();
    }
    drop(fs);
    let trace = dev.take_trace();
    let hits = trace
        .events
        .iter()
        .filter(|e| matches!(e, TraceEvent::WriteBlock { blockno, .. } if data_blocks.contains(blockno)))
        .count();
    assert_eq!(hits, 0);
    assert!(fsck(&dev).unwrap().is_clean());
}

#[test]
fn readdir_pages_through_large_directories() {
    let dev = fresh_device(8192);
    let fs = mount(Variant::Plain, &dev);
    let d = mkdir(&fs, ROOT, "many");
    let mut want = Vec::new();
    for i in 0..700 {
        let name = format!("entry-{i:04}");
        let (f, fh) = create(&fs, d, &name);
        fs.release(&ctx(1), f, fh, 0).unwrap();
        want.push(name);
    }
    want.sort();
    assert_eq!(list(&fs, d), want);
    for name in want.iter().step_by(2) {
        fs.unlink(&ctx(1), d, name).unwrap();
    }
    let rest: Vec<String> = want.iter().skip(1).step_by(2).cloned().collect();
    assert_eq!(list(&fs, d), rest);
    drop(fs);
    assert!(fsck(&dev).unwrap().is_clean());
}

#[test]
fn out_of_space_leaves_a_clean_image() {
    let dev = fresh_device(512);
    let fs = mount(Variant::Plain, &dev);
    let chunk = pattern(64 * 1024, 4);
    let mut n = 0;
    let err = loop {
        let (f, fh) = create(&fs, ROOT, &format!("fill{n}"));
        let r = (0..64).try_for_each(|i| fs.write(&ctx(1), f, fh, i * chunk.len() as u64, &chunk, 0).map(|_| ()));
        fs.release(&ctx(1), f, fh, 0).unwrap();
        n += 1;
        if let Err(e) = r {
            break e;
        }
    };
    assert_eq!(err, Errno::ENOSPC);
    drop(fs);
    let r = fsck(&dev).unwrap();
    assert!(r.is_clean(), "{r}");
}

#[test]
fn mknod_only_makes_regular_files() {
    let dev = fresh_device(4096);
    let fs = mount(Variant::Plain, &dev);
    assert!(fs.mknod(&ctx(1), ROOT, "r", S_IFREG | 0o600, 0).is_ok());
    assert_eq!(fs.mknod(&ctx(1), ROOT, "fifo", 0o010000 | 0o600, 0).unwrap_err(), Errno::EPERM);
}
