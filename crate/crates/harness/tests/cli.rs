use std::io::{Read, Seek, SeekFrom, Write};
use std::path::Path;
use std::process::{Command, Output};

use bentoframe_core::bentofs::layout::{Superblock, BLOCK_SIZE, SUPERBLOCK_BLOCK};

fn bentoframe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bentoframe"))
        .args(args)
        .output()
        .expect("spawn bentoframe")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn mkfs(image: &Path, size: &str) -> Output {
    bentoframe(&["mkfs", "--image", image.to_str().unwrap(), "--size", size])
}

#[test]
fn mkfs_then_fsck_is_clean() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("fs.img");
    let o = mkfs(&img, "64M");
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("blocks=16384"), "{}", stdout(&o));
    assert_eq!(std::fs::metadata(&img).unwrap().len(), 64 << 20);
    let o = bentoframe(&["fsck", "--image", img.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stdout(&o));
}

#[test]
fn mkfs_rejects_an_image_too_small_for_the_layout() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("tiny.img");
    let o = mkfs(&img, "64K");
    assert!(!o.status.success());
    assert!(!img.exists(), "failed mkfs left an image behind");
}

#[test]
fn fsck_reports_a_cleared_block_bitmap() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("fs.img");
    assert!(mkfs(&img, "16M").status.success());
    let mut f = std::fs::OpenOptions::new().read(true).write(true).open(&img).unwrap();
    let mut sb = vec![0u8; BLOCK_SIZE];
    f.seek(SeekFrom::Start(SUPERBLOCK_BLOCK * BLOCK_SIZE as u64)).unwrap();
    f.read_exact(&mut sb).unwrap();
    let sb = Superblock::decode(&sb).unwrap();
    f.seek(SeekFrom::Start(sb.block_bitmap_start as u64 * BLOCK_SIZE as u64)).unwrap();
    f.write_all(&vec![0u8; BLOCK_SIZE]).unwrap();
    drop(f);
    let o = bentoframe(&["fsck", "--image", img.to_str().unwrap()]);
    assert!(!o.status.success(), "{}", stdout(&o));
}

#[test]
fn run_executes_a_script_and_persists_it() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("fs.img");
    assert!(mkfs(&img, "16M").status.success());
    let script = dir.path().join("s.txt");
    std::fs::write(&script, "1 mkdir /d\n1 create /d/f h\n1 write h \"hello\"\n1 fsync h\n1 close h\n").unwrap();
    let o = bentoframe(&["run", "--image", img.to_str().unwrap(), script.to_str().unwrap()]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("errors=0"), "{}", stdout(&o));

    std::fs::write(&script, "1 open /d/f r h\n1 read h\n1 close h\n").unwrap();
    let o = bentoframe(&["run", "--image", img.to_str().unwrap(), script.to_str().unwrap()]);
    assert!(stdout(&o).contains("data 5 \"hello\""), "{}", stdout(&o));
    let o = bentoframe(&["fsck", "--image", img.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stdout(&o));
}

#[test]
fn strict_run_exits_with_the_errno() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("fs.img");
    assert!(mkfs(&img, "16M").status.success());
    let script = dir.path().join("s.txt");
    std::fs::write(&script, "1 unlink /missing\n1 mkdir /never\n").unwrap();
    let o = bentoframe(&["run", "--strict", "--image", img.to_str().unwrap(), script.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{o:?}");
    assert!(!stdout(&o).contains("mkdir"), "{}", stdout(&o));
}

#[test]
fn run_rejects_an_undefined_handle_before_mounting() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("s.txt");
    std::fs::write(&script, "1 write nope \"x\"\n").unwrap();
    // The image does not exist; the script error must come first.
    let o = bentoframe(&["run", "--image", "/nonexistent.img", script.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("script"), "{o:?}");
}

#[test]
fn crashtest_with_zero_budget_runs_nothing() {
    let o = bentoframe(&["crashtest", "--budget", "0"]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("workloads=0"), "{}", stdout(&o));
}

#[test]
fn crashtest_rejects_an_unknown_operation() {
    let o = bentoframe(&["crashtest", "--opset", "frobnicate"]);
    assert!(!o.status.success());
}

#[test]
fn upgrade_demo_flags_an_instant_beyond_the_run() {
    let o = bentoframe(&[
        "upgrade-demo",
        "--at-ms",
        "5000",
        "--duration-ms",
        "100",
        "--prepopulate",
        "10",
    ]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("upgrade none reason=at_ms_beyond_run"), "{}", stdout(&o));
}

#[test]
fn provdump_prints_records_and_edges() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("fs.img");
    assert!(mkfs(&img, "16M").status.success());
    let script = dir.path().join("s.txt");
    std::fs::write(
        &script,
        "5 create /a ha\n5 write ha \"data\"\n5 close ha\n5 create /b hb\n\
         5 open /a r hr\n5 read hr\n5 write hb \"data\"\n5 close hb\n5 close hr\n",
    )
    .unwrap();
    let o = bentoframe(&["run", "--variant", "prov", "--image", img.to_str().unwrap(), script.to_str().unwrap()]);
    assert!(o.status.success(), "{o:?}");
    let o = bentoframe(&["provdump", "--image", img.to_str().unwrap()]);
    assert!(o.status.success(), "{o:?}");
    let out = stdout(&o);
    assert!(out.lines().any(|l| l.contains("->") && l.contains("(5)")), "{out}");
}
