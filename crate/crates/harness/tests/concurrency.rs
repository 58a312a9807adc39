use std::collections::BTreeSet;

use bentoframe_core::bentofs::fsck::fsck;
use bentoframe_core::bentofs::{MkfsOptions, MountOptions, Variant};
use bentoframe_core::fsapi::O_RDWR;
use bentoframe_harness::fsops::{Ops, ROOT};
use bentoframe_harness::mount::{fresh_device, Mounted};

#[test]
fn forty_threads_create_ten_thousand_files() {
    let dev = fresh_device(None, 32768, &MkfsOptions { inode_count: Some(16384), ..MkfsOptions::default() }).unwrap();
    let m = Mounted::new("fs", Variant::Plain, &dev, MountOptions::default()).unwrap();
    std::thread::scope(|s| {
        for t in 0..40u32 {
            let conn = &m.conn;
            s.spawn(move || {
                let ops = Ops::new(conn, 100 + t);
                for i in 0..250 {
                    let (e, h) = ops.create(ROOT, &format!("t{t}-{i}"), O_RDWR).unwrap();
                    ops.write_all(e.ino(), h.fh, 0, format!("{t}/{i}").as_bytes()).unwrap();
                    ops.release(e.ino(), h.fh).unwrap();
                }
            });
        }
    });
    let names: BTreeSet<String> = Ops::new(&m.conn, 1).list(ROOT).unwrap().into_iter().map(|e| e.name).collect();
    assert_eq!(names.len(), 10_000);
    m.finish().unwrap();
    let r = fsck(&dev).unwrap();
    assert!(r.is_clean(), "{r}");
    assert_eq!(r.inodes_in_use, 10_001);
}
