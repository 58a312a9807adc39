mod common;

use std::collections::BTreeMap;

use bentoframe_core::bentofs::fsck::fsck;
use bentoframe_core::bentofs::{BentoFs, Variant};
use bentoframe_core::fsapi::*;
use bentoframe_core::Errno;
use common::*;
use proptest::prelude::*;

const DIRS: [&str; 2] = ["A", "B"];
const NAMES: [&str; 2] = ["x", "y"];

#[derive(Clone, Debug)]
enum Op {
    Mkdir(usize),
    Rmdir(usize),
    Create(Option<usize>, usize),
    Write(Option<usize>, usize, u64, usize, u32),
    Truncate(Option<usize>, usize, u64),
    Unlink(Option<usize>, usize),
    Rename(Option<usize>, usize, Option<usize>, usize),
    Remount,
}

fn op() -> impl Strategy<Value = Op> {
    let dir = prop::option::of(0..2usize);
    let name = 0..2usize;
    prop_oneof![
        (0..2usize).prop_map(Op::Mkdir),
        (0..2usize).prop_map(Op::Rmdir),
        (dir.clone(), name.clone()).prop_map(|(d, n)| Op::Create(d, n)),
        (dir.clone(), name.clone(), 0..120_000u64, 0..20_000usize, any::<u32>())
            .prop_map(|(d, n, o, l, s)| Op::Write(d, n, o, l, s)),
        (dir.clone(), name.clone(), 0..100_000u64).prop_map(|(d, n, s)| Op::Truncate(d, n, s)),
        (dir.clone(), name.clone()).prop_map(|(d, n)| Op::Unlink(d, n)),
        (dir.clone(), name.clone(), dir, name).prop_map(|(a, b, c, d)| Op::Rename(a, b, c, d)),
        Just(Op::Remount),
    ]
}

/// Reference state: directories at the root, files keyed by (dir, name).
#[derive(Default, Debug)]
struct Model {
    dirs: [bool; 2],
    files: BTreeMap<(Option<usize>, usize), Vec<u8>>,
}

impl Model {
    fn parent_ok(&self, d: Option<usize>) -> bool {
        d.is_none_or(|i| self.dirs[i])
    }

    fn apply(&mut self, op: &Op) -> Result<(), Errno> {
        match *op {
            Op::Mkdir(d) => {
                if self.dirs[d] {
                    return Err(Errno::EEXIST);
                }
                self.dirs[d] = true;
            }
            Op::Rmdir(d) => {
                if !self.dirs[d] {
                    return Err(Errno::ENOENT);
                }
                if self.files.keys().any(|(p, _)| *p == Some(d)) {
                    return Err(Errno::ENOTEMPTY);
                }
                self.dirs[d] = false;
            }
            Op::Create(d, n) => {
                if !self.parent_ok(d) {
                    return Err(Errno::ENOENT);
                }
                if self.files.contains_key(&(d, n)) {
                    return Err(Errno::EEXIST);
                }
                self.files.insert((d, n), Vec::new());
            }
            Op::Write(d, n, off, len, seed) => {
                if !self.parent_ok(d) {
                    return Err(Errno::ENOENT);
                }
                let f = self.files.get_mut(&(d, n)).ok_or(Errno::ENOENT)?;
                let end = off as usize + len;
                if len > 0 && f.len() < end {
                    f.resize(end, 0);
                }
                f[off as usize..off as usize + len].copy_from_slice(&pattern(len, seed));
            }
            Op::Truncate(d, n, size) => {
                if !self.parent_ok(d) {
                    return Err(Errno::ENOENT);
                }
                self.files.get_mut(&(d, n)).ok_or(Errno::ENOENT)?.resize(size as usize, 0);
            }
            Op::Unlink(d, n) => {
                if !self.parent_ok(d) {
                    return Err(Errno::ENOENT);
                }
                self.files.remove(&(d, n)).ok_or(Errno::ENOENT)?;
            }
            Op::Rename(d1, n1, d2, n2) => {
                if !self.parent_ok(d1) || !self.parent_ok(d2) {
                    return Err(Errno::ENOENT);
                }
                let data = self.files.remove(&(d1, n1)).ok_or(Errno::ENOENT)?;
                self.files.insert((d2, n2), data);
            }
            Op::Remount => {}
        }
        Ok(())
    }
}

fn dir_ino(fs: &BentoFs, d: Option<usize>) -> Result<u64, Errno> {
    match d {
        None => Ok(ROOT),
        Some(i) => lookup(fs, ROOT, DIRS[i]),
    }
}

fn run(fs: &mut BentoFs, dev: &bentoframe_core::blockdev::BlockDevice, op: &Op) -> Result<(), Errno> {
    let c = ctx(1);
    match *op {
        Op::Mkdir(d) => fs.mkdir(&c, ROOT, DIRS[d], 0o755).map(|_| ()),
        Op::Rmdir(d) => fs.rmdir(&c, ROOT, DIRS[d]),
        Op::Create(d, n) => {
            let p = dir_ino(fs, d)?;
            let (e, o) = fs.create(&c, p, NAMES[n], S_IFREG | 0o644, O_RDWR | O_CREAT | O_EXCL)?;
            fs.release(&c, e.ino(), o.fh, 0)
        }
        Op::Write(d, n, off, len, seed) => {
            let ino = lookup(fs, dir_ino(fs, d)?, NAMES[n])?;
            let o = fs.open(&c, ino, O_WRONLY)?;
            let data = pattern(len, seed);
            let r = fs.write(&c, ino, o.fh, off, &data, 0);
            fs.release(&c, ino, o.fh, 0)?;
            assert_eq!(r?, len as u32);
            Ok(())
        }
        Op::Truncate(d, n, size) => {
            let ino = lookup(fs, dir_ino(fs, d)?, NAMES[n])?;
            let attr = SetAttr {
                size: Some(size),
                ..Default::default()
            };
            fs.setattr(&c, ino, None, &attr).map(|_| ())
        }
        Op::Unlink(d, n) => fs.unlink(&c, dir_ino(fs, d)?, NAMES[n]),
        Op::Rename(d1, n1, d2, n2) => {
            let p1 = dir_ino(fs, d1)?;
            let p2 = dir_ino(fs, d2)?;
            fs.rename(&c, p1, NAMES[n1], p2, NAMES[n2], 0)
        }
        Op::Remount => {
            fs.unmount()?;
            *fs = mount(Variant::Plain, dev);
            Ok(())
        }
    }
}

fn compare(fs: &BentoFs, m: &Model) {
    let mut root_want: Vec<String> = DIRS
        .iter()
        .zip(m.dirs)
        .filter(|(_, e)| *e)
        .map(|(d, _)| d.to_string())
        .collect();
    root_want.extend(m.files.keys().filter(|(d, _)| d.is_none()).map(|(_, n)| NAMES[*n].to_string()));
    root_want.sort();
    assert_eq!(list(fs, ROOT), root_want);
    for (i, d) in DIRS.iter().enumerate() {
        if m.dirs[i] {
            let ino = lookup(fs, ROOT, d).unwrap();
            let want: Vec<String> = m
                .files
                .keys()
                .filter(|(p, _)| *p == Some(i))
                .map(|(_, n)| NAMES[*n].to_string())
                .collect();
            assert_eq!(list(fs, ino), want);
        }
    }
    for ((d, n), data) in &m.files {
        let ino = lookup(fs, dir_ino(fs, *d).unwrap(), NAMES[*n]).unwrap();
        assert_eq!(fs.getattr(&ctx(1), ino).unwrap().size, data.len() as u64);
        let o = fs.open(&ctx(1), ino, O_RDONLY).unwrap();
        assert!(read_all(fs, ino, o.fh, 0, data.len() + 1) == *data, "contents of {d:?}/{n}");
        fs.release(&ctx(1), ino, o.fh, 0).unwrap();
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn bentofs_matches_reference_model(ops in prop::collection::vec(op(), 1..40)) {
        let dev = fresh_device(2048);
        let mut fs = mount(Variant::Plain, &dev);
        let mut m = Model::default();
        for op in &ops {
            let want = m.apply(op);
            let got = run(&mut fs, &dev, op);
            prop_assert_eq!(got, want, "{:?}", op);
        }
        compare(&fs, &m);
        fs.unmount().unwrap();
        let r = fsck(&dev).unwrap();
        prop_assert!(r.is_clean(), "{}", r);
        let fs = mount(Variant::Plain, &dev);
        compare(&fs, &m);
    }
}
