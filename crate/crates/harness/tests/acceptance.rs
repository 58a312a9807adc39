//! Acceptance checks, one line per criterion. Exits nonzero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use bentoframe_core::bentofs::dirtree::{self, DirStore, MemDirStore};
use bentoframe_core::bentofs::{mkfs, BentoFs, MkfsOptions, MountOptions, Variant};
use bentoframe_core::blockdev::{BlockDevice, DeviceOptions, MemImage, TraceEvent, TraceMode};
use bentoframe_core::fsapi::*;
use bentoframe_core::journal::{recover, Journal, JournalConfig};
use bentoframe_core::provenance::{prov_infer, prov_parse, ProvKind};
use bentoframe_core::upgrade::upgrade;
use bentoframe_core::Errno;
use bentoframe_harness::crashtest::{self, CrashConfig};
use bentoframe_harness::demo::{self, DemoConfig, Load};
use bentoframe_harness::fsops::{pattern, Direct, Ops, ROOT};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn mem_device(blocks: u64) -> BlockDevice {
    BlockDevice::memory(MemImage::zeroed(4096, blocks), DeviceOptions::default()).unwrap()
}

fn fs_device(blocks: u64) -> BlockDevice {
    let dev = mem_device(blocks);
    mkfs(&dev, &MkfsOptions::default()).unwrap();
    dev
}

// 1 ------------------------------------------------------------------------

fn crash_consistency() -> Outcome {
    let s = crashtest::run(&CrashConfig::default());
    let detail = s.to_string();
    check((2000..=6000).contains(&s.workloads), || format!("{} workloads outside 2000..=6000; {detail}", s.workloads))?;
    check(s.passed(), || {
        let first = s.failures.first().map(|f| f.to_string()).unwrap_or_default();
        format!("{detail}; first: {first}")
    })?;
    check(s.elapsed <= Duration::from_secs(15 * 60), || format!("took too long; {detail}"))?;
    Ok(detail)
}

// 2 ------------------------------------------------------------------------

fn tester_potency() -> Outcome {
    let s = crashtest::run(&CrashConfig {
        journal: false,
        ..CrashConfig::default()
    });
    check(!s.failures.is_empty(), || format!("no failures without the journal; {s}"))?;
    Ok(s.to_string())
}

// 3 ------------------------------------------------------------------------

const J_START: u64 = 2;
const J_LEN: u64 = 24;
const HOME: std::ops::Range<u64> = 40..48;

/// Home block contents after applying the first `k` transactions.
fn expected_state(base: &BTreeMap<u64, u8>, txns: &[Vec<(u64, u8)>], k: usize) -> BTreeMap<u64, u8> {
    let mut s = base.clone();
    for t in &txns[..k] {
        for &(b, v) in t {
            s.insert(b, v);
        }
    }
    s
}

fn home_state(dev: &BlockDevice) -> Option<BTreeMap<u64, u8>> {
    let mut out = BTreeMap::new();
    for b in HOME {
        let d = dev.read_uncached(b).ok()?;
        // A torn or foreign block would not be uniformly filled.
        if d.iter().any(|&x| x != d[0]) {
            return None;
        }
        out.insert(b, d[0]);
    }
    Some(out)
}

fn recovered(img: MemImage) -> Result<BlockDevice, String> {
    let dev = BlockDevice::memory(img, DeviceOptions::default()).map_err(|e| e.to_string())?;
    recover(&dev, J_START, J_LEN).map_err(|e| format!("recovery failed: {e}"))?;
    Ok(dev)
}

fn journal_atomicity() -> Outcome {
    let mut rng = StdRng::seed_from_u64(3);
    let mut states = 0usize;
    for case in 0..100 {
        let dev = mem_device(64);
        let mut base = BTreeMap::new();
        for b in HOME {
            let v = rng.gen_range(1..=255u8);
            dev.write_uncached(b, &[v; 4096]).unwrap();
            base.insert(b, v);
        }
        Journal::format(&dev, J_START, J_LEN).unwrap();
        dev.flush().unwrap();
        let base_img = dev.snapshot().unwrap();

        // Three transactions over a few home blocks, each with a fresh value.
        let mut txns: Vec<Vec<(u64, u8)>> = Vec::new();
        for t in 0..3 {
            let mut blocks: Vec<u64> = HOME.collect();
            blocks.shuffle(&mut rng);
            let n = rng.gen_range(1..=5);
            let v = (case * 3 + t) as u8 ^ 0x5a;
            txns.push(blocks[..n].iter().map(|&b| (b, v)).collect());
        }
        let checkpoint_after: Vec<bool> = (0..3).map(|_| rng.gen_bool(0.5)).collect();

        dev.start_trace(TraceMode::Full);
        let j = Journal::open(
            dev.clone(),
            J_START,
            J_LEN,
            JournalConfig {
                commit_idle: None,
                enabled: true,
            },
        )
        .map_err(|e| e.to_string())?;
        // Trace length once each transaction's commit has returned.
        let mut durable_marks = Vec::new();
        for (t, tx) in txns.iter().enumerate() {
            let mut h = j.begin_op(tx.len() as u32).map_err(|e| e.to_string())?;
            for &(b, v) in tx {
                let mut bh = dev.getblk(b).map_err(|e| e.to_string())?;
                bh.data_mut().fill(v);
                j.journal_write(&mut h, &mut bh).map_err(|e| e.to_string())?;
            }
            j.end_op(h);
            j.force_commit().map_err(|e| e.to_string())?;
            durable_marks.push(dev.trace_len());
            if checkpoint_after[t] {
                j.checkpoint().map_err(|e| e.to_string())?;
            }
        }
        j.close().map_err(|e| e.to_string())?;
        drop(j);
        let trace = dev.take_trace();

        // Crash states: every prefix ending at a flush (and the empty one),
        // combined with every subset of the writes that follow it before the
        // next flush.
        let mut boundaries = vec![0];
        boundaries.extend(trace.flush_indices().into_iter().map(|i| i + 1));
        for &p in &boundaries {
            let window: Vec<usize> = (p..trace.events.len())
                .take_while(|&i| !trace.events[i].is_flush())
                .collect();
            if window.len() > 12 {
                return Err(format!("case {case}: window of {} writes is too large to enumerate", window.len()));
            }
            for mask in 0u32..(1 << window.len()) {
                let extra: Vec<usize> = window
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| mask & (1 << i) != 0)
                    .map(|(_, &e)| e)
                    .collect();
                let img = trace.apply_with_subset(&base_img, p, &extra).map_err(|e| e.to_string())?;
                states += 1;
                let once = recovered(img)?;
                let got = home_state(&once).ok_or_else(|| format!("case {case} prefix {p}: torn home block"))?;
                let durable = durable_marks.iter().filter(|&&m| m <= p).count();
                let k = (0..=3).find(|&k| expected_state(&base, &txns, k) == got);
                match k {
                    None => return Err(format!("case {case} prefix {p} mask {mask:b}: state is not a transaction prefix")),
                    Some(k) if k < durable => {
                        return Err(format!("case {case} prefix {p}: {durable} committed, only {k} survived"))
                    }
                    _ => {}
                }
                let d1 = once.snapshot().unwrap().digest();
                let twice = recovered(once.snapshot().unwrap())?;
                let d2 = twice.snapshot().unwrap().digest();
                check(d1 == d2, || format!("case {case} prefix {p}: second recovery changed the image"))?;
            }
        }
    }
    Ok(format!("100 workloads, {states} crash states, all atomic, durable and idempotent"))
}

// 4 ------------------------------------------------------------------------

fn live_upgrade() -> Outcome {
    let mut details = Vec::new();
    let mut problems = Vec::new();
    for load in [Load::CreateDelete1t, Load::SyncWrite10t] {
        let r = demo::run(&DemoConfig::new(load)).map_err(|e| format!("{load}: {e:#}"))?;
        let u = r.upgrade.as_ref().ok_or_else(|| format!("{load}: no upgrade happened"))?;
        let (at, _) = r.upgrade_window.unwrap();
        let gaps: Vec<String> = r.gaps.iter().map(|g| format!("[{},{})", g.start * 5, g.end * 5)).collect();
        details.push(format!(
            "{load}: failed={} lost={} blocked={} pause={:.1}ms gaps={} at={:.1}ms",
            r.failed,
            r.lost(),
            u.ops_blocked,
            u.pause.as_secs_f64() * 1e3,
            gaps.join(""),
            at.as_secs_f64() * 1e3
        ));
        if r.failed != 0 || r.lost() != 0 {
            problems.push(format!("{load}: (a) {} failed, {} lost", r.failed, r.lost()));
        }
        if u.ops_blocked > r.threads as u64 {
            problems.push(format!("{load}: (b) {} ops blocked > {} threads", u.ops_blocked, r.threads));
        }
        if u.pause >= Duration::from_millis(500) {
            problems.push(format!("{load}: (c) pause {:?}", u.pause));
        }
        if !r.single_gap_at_upgrade() {
            problems.push(format!("{load}: (d) {} gaps, expected one containing {:.1}ms", r.gaps.len(), at.as_secs_f64() * 1e3));
        }
    }
    if problems.is_empty() {
        Ok(details.join("; "))
    } else {
        Err(format!("{} || {}", problems.join("; "), details.join("; ")))
    }
}

// 5 ------------------------------------------------------------------------

fn upgrade_semantics() -> Outcome {
    let dev = fs_device(8192);
    let reg = Registry::new();
    let conn = reg
        .register_filesystem(FsRegistration::new(
            "fs",
            Box::new(BentoFs::with_device(Variant::Plain, dev.clone(), MountOptions::default())),
        ))
        .map_err(|e| e.to_string())?
        .connection()
        .unwrap();
    let ops = Ops::new(&conn, 10);
    let e = |r: Errno| r.to_string();

    let (old, oh) = ops.create(ROOT, "before", O_RDWR).map_err(e)?;
    ops.write_all(old.ino(), oh.fh, 0, b"written before").map_err(e)?;
    ops.fsync(old.ino(), oh.fh).map_err(e)?;
    let (gone, gh) = ops.create(ROOT, "before2", O_RDWR).map_err(e)?;
    ops.release(gone.ino(), gh.fh).map_err(e)?;
    let seq_of = |c: &Connection| {
        c.with_instance(|fs| BentoFs::from_dyn(fs).unwrap().journal().unwrap().stats().last_committed).unwrap()
    };
    let seq_before = seq_of(&conn);

    let ticket = reg
        .register_filesystem(
            FsRegistration::new("fs", Box::new(BentoFs::new(Variant::Prov, MountOptions::default()))).upgrade(),
        )
        .map_err(|e| e.to_string())?
        .ticket()
        .unwrap();
    let report = upgrade(ticket).map_err(|f| f.to_string())?;

    let data = ops.read(old.ino(), oh.fh, 0, 64).map_err(e)?;
    check(data == b"written before", || format!("old handle read {data:?}"))?;

    let (new, nh) = ops.create(ROOT, "after", O_RDWR).map_err(e)?;
    ops.write_all(new.ino(), nh.fh, 0, b"after").map_err(e)?;
    ops.fsync(new.ino(), nh.fh).map_err(e)?;
    ops.release(new.ino(), nh.fh).map_err(e)?;
    ops.rename(ROOT, "after", ROOT, "after-renamed").map_err(e)?;
    ops.unlink(ROOT, "before2").map_err(e)?;
    ops.sync().map_err(e)?;
    let seq_after = seq_of(&conn);
    check(seq_after > seq_before, || format!("journal sequence {seq_before} -> {seq_after}"))?;

    let log = conn
        .with_instance(|fs| BentoFs::from_dyn(fs).unwrap().prov_log_bytes())
        .unwrap()
        .map_err(e)?;
    let recs = prov_parse(&log).map_err(|e| e.to_string())?.records;
    let kinds: BTreeSet<(ProvKind, u64)> = recs.iter().map(|r| (r.kind, r.ino)).collect();
    for want in [
        (ProvKind::Create, new.ino()),
        (ProvKind::Close, new.ino()),
        (ProvKind::Rename, new.ino()),
        (ProvKind::Unlink, gone.ino()),
    ] {
        check(kinds.contains(&want), || format!("no {:?} record for ino {}; log {recs:?}", want.0, want.1))?;
    }
    // Nothing from before the swap: the old file was created, written and
    // synced under the plain instance and only read afterwards.
    check(
        !recs.iter().any(|r| r.ino == old.ino() || r.name == "before"),
        || format!("pre-upgrade activity logged: {recs:?}"),
    )?;
    ops.release(old.ino(), oh.fh).map_err(e)?;
    reg.unregister_filesystem(&conn).map_err(|e| e.to_string())?;
    Ok(format!(
        "{} records after the swap, none before; old handle readable; journal seq {seq_before} -> {seq_after}; pause {:.2} ms",
        recs.len(),
        report.pause.as_secs_f64() * 1e3
    ))
}

// 6 ------------------------------------------------------------------------

fn four_gib_cap() -> Outcome {
    const GIB4: u64 = 1 << 32;
    let dev = fs_device(16384);
    let mut fs = BentoFs::mount(Variant::Plain, dev.clone(), MountOptions::default()).map_err(|e| e.to_string())?;
    let d = Direct(&fs);
    let ops = Ops::new(&d, 1);
    let e = |r: Errno| r.to_string();
    let (big, bh) = ops.create(ROOT, "big", O_RDWR).map_err(e)?;
    let n = ops.write(big.ino(), bh.fh, GIB4 - 4096, &[7u8; 4096]).map_err(e)?;
    check(n == 4096, || format!("write at 4 GiB - 4096 wrote {n}"))?;
    for (off, len) in [(GIB4, 1usize), (GIB4 - 4096, 4097), (GIB4 - 1, 2), (GIB4 + 4096, 4096)] {
        let r = ops.write(big.ino(), bh.fh, off, &vec![1u8; len]);
        check(r == Err(Errno::EFBIG), || format!("write of {len} at {off} gave {r:?}"))?;
    }
    let size = ops.getattr(big.ino()).map_err(e)?.size;
    check(size == GIB4, || format!("size {size} after the capped writes"))?;
    let tail = ops.read(big.ino(), bh.fh, GIB4 - 4096, 8192).map_err(e)?;
    check(tail == vec![7u8; 4096], || "tail block reads back wrong".into())?;
    ops.release(big.ino(), bh.fh).map_err(e)?;

    let want = pattern(5 << 20, 6);
    let (f, fh) = ops.create(ROOT, "five", O_RDWR).map_err(e)?;
    ops.write_all(f.ino(), fh.fh, 0, &want).map_err(e)?;
    ops.release(f.ino(), fh.fh).map_err(e)?;
    drop(ops);
    fs.unmount().map_err(e)?;
    let fs = BentoFs::mount(Variant::Plain, dev, MountOptions::default()).map_err(|e| e.to_string())?;
    let d = Direct(&fs);
    let ops = Ops::new(&d, 1);
    let ino = ops.lookup(ROOT, "five").map_err(e)?.ino();
    let o = ops.open(ino, O_RDONLY).map_err(e)?;
    let got = ops.read_to_end(ino, o.fh, 0).map_err(e)?;
    check(got == want, || format!("5 MiB file read back {} bytes, differing", got.len()))?;
    Ok("4096 B at 4 GiB-4096 ok; writes reaching 4 GiB give EFBIG; 5 MiB file identical after remount".into())
}

// 7 ------------------------------------------------------------------------

/// Every record in every leaf block, decoded independently of the
/// directory code: `{u32 ino, u8 len, name}` padded to 4 bytes, a zero
/// inode ending the block. Block 0 is the index.
fn raw_scan(s: &MemDirStore) -> Vec<(Vec<u8>, u64)> {
    let mut out = Vec::new();
    for b in &s.blocks[1..] {
        let mut off = 0;
        while off + 5 <= b.len() {
            let ino = u32::from_le_bytes(b[off..off + 4].try_into().unwrap()) as u64;
            if ino == 0 {
                break;
            }
            let len = b[off + 4] as usize;
            out.push((b[off + 5..off + 5 + len].to_vec(), ino));
            off += (5 + len + 3) & !3;
        }
    }
    out
}

fn raw_lookup(s: &MemDirStore, name: &[u8]) -> Option<u64> {
    raw_scan(s).into_iter().find(|(n, _)| n == name).map(|(_, i)| i)
}

fn hash_directory() -> Outcome {
    let start = Instant::now();
    let mut rng = StdRng::seed_from_u64(7);
    let mut s = MemDirStore::default();
    dirtree::init(&mut s, 5, 1).map_err(|e| e.to_string())?;
    let names: Vec<Vec<u8>> = (0..4000)
        .map(|i| {
            let len = rng.gen_range(1..40);
            let mut n = format!("n{i}-").into_bytes();
            n.extend((0..len).map(|_| rng.gen_range(b'a'..=b'z')));
            n
        })
        .collect();
    let mut present: BTreeSet<Vec<u8>> = BTreeSet::new();
    let (mut inserts, mut lookups, mut deletes) = (0, 0, 0);
    for step in 0..10_000 {
        let name = &names[rng.gen_range(0..names.len())];
        let oracle = raw_lookup(&s, name);
        match rng.gen_range(0..3) {
            0 => {
                inserts += 1;
                let ino = 100 + step as u64;
                let r = dirtree::insert(&mut s, name, ino);
                let want = if oracle.is_some() { Err(Errno::EEXIST) } else { Ok(()) };
                check(r == want, || format!("step {step}: insert gave {r:?}, oracle {want:?}"))?;
                check(raw_lookup(&s, name) == oracle.or(Some(ino)), || format!("step {step}: insert not visible"))?;
                present.insert(name.clone());
            }
            1 => {
                lookups += 1;
                let r = dirtree::lookup(&mut s, name).map_err(|e| e.to_string())?;
                check(r == oracle, || format!("step {step}: lookup {r:?}, oracle {oracle:?}"))?;
            }
            _ => {
                deletes += 1;
                let r = dirtree::remove(&mut s, name).map_err(|e| e.to_string())?;
                check(r == oracle, || format!("step {step}: remove {r:?}, oracle {oracle:?}"))?;
                check(raw_lookup(&s, name).is_none(), || format!("step {step}: removed name still present"))?;
                present.remove(name);
            }
        }
        if step % 500 == 499 {
            let listed: BTreeSet<Vec<u8>> = dirtree::all_entries(&mut s)
                .map_err(|e| e.to_string())?
                .into_iter()
                .map(|r| r.name)
                .collect();
            let raw: BTreeSet<Vec<u8>> = raw_scan(&s).into_iter().map(|(n, _)| n).collect();
            check(listed == raw, || format!("step {step}: readdir differs from the raw scan"))?;
            let mut want = present.clone();
            want.insert(b".".to_vec());
            want.insert(b"..".to_vec());
            check(raw == want, || format!("step {step}: raw scan differs from the model"))?;
            // Paged listing with small batches must give the same set.
            let mut paged = BTreeSet::new();
            let mut after = 0;
            loop {
                let batch = dirtree::entries_after(&mut s, after, 7).map_err(|e| e.to_string())?;
                let Some(last) = batch.last() else { break };
                after = last.1;
                for (r, _) in batch {
                    check(paged.insert(r.name), || format!("step {step}: paged readdir repeated a name"))?;
                }
            }
            check(paged == listed, || format!("step {step}: paged readdir differs"))?;
            let problems = dirtree::check(&mut s).map_err(|e| e.to_string())?;
            check(problems.is_empty(), || format!("step {step}: {problems:?}"))?;
        }
    }
    let elapsed = start.elapsed();
    check(elapsed <= Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{inserts} inserts, {lookups} lookups, {deletes} deletes; {} leaves; {:.1} s",
        s.nblocks() - 1,
        elapsed.as_secs_f64()
    ))
}

// 8 ------------------------------------------------------------------------

fn dropped_writes() -> Outcome {
    let dev = fs_device(8192);
    let mut fs = BentoFs::mount(Variant::Plain, dev.clone(), MountOptions::default()).map_err(|e| e.to_string())?;
    dev.start_trace(TraceMode::Digest);
    let data = pattern(64 << 10, 8);
    let mut data_blocks = BTreeSet::new();
    {
        let d = Direct(&fs);
        let ops = Ops::new(&d, 1);
        let e = |r: Errno| r.to_string();
        for i in 0..1000 {
            let name = format!("tmp{i}");
            let (f, h) = ops.create(ROOT, &name, O_RDWR).map_err(e)?;
            ops.write_all(f.ino(), h.fh, 0, &data).map_err(e)?;
            data_blocks.extend(fs.mapped_blocks(f.ino()).map_err(e)?);
            ops.unlink(ROOT, &name).map_err(e)?;
            ops.release(f.ino(), h.fh).map_err(e)?;
        }
    }
    fs.unmount().map_err(|e| e.to_string())?;
    let trace = dev.take_trace();
    let hits: Vec<u64> = trace
        .events
        .iter()
        .filter_map(|ev| match ev {
            TraceEvent::WriteBlock { blockno, .. } if data_blocks.contains(blockno) => Some(*blockno),
            _ => None,
        })
        .collect();
    check(hits.is_empty(), || format!("{} writes to deleted data blocks, e.g. {:?}", hits.len(), &hits[..hits.len().min(5)]))?;
    Ok(format!(
        "1000 iterations, {} distinct data blocks, {} device writes, none to those blocks",
        data_blocks.len(),
        trace.written_blocks().count()
    ))
}

// 9 ------------------------------------------------------------------------

fn inode_reuse() -> Outcome {
    let dev = fs_device(4096);
    let fs = BentoFs::mount(Variant::Plain, dev, MountOptions::default()).map_err(|e| e.to_string())?;
    let d = Direct(&fs);
    let ops = Ops::new(&d, 1);
    let e = |r: Errno| r.to_string();
    let old = ops.mkdir(ROOT, "d").map_err(e)?.ino();
    let h = ops.opendir(old).map_err(e)?;
    ops.rmdir(ROOT, "d").map_err(e)?;
    let new = ops.mkdir(ROOT, "d").map_err(e)?.ino();
    check(new != old, || format!("mkdir reused ino {old} while a handle was open"))?;
    let (f, fh) = ops.create(new, "inside", O_RDWR).map_err(e)?;
    ops.release(f.ino(), fh.fh).map_err(e)?;
    let names: Vec<String> = ops.list(new).map_err(e)?.into_iter().map(|x| x.name).collect();
    check(names == ["inside"], || format!("new directory lists {names:?}"))?;
    ops.releasedir(old, h.fh).map_err(e)?;
    Ok(format!("old ino {old}, new ino {new}, create inside succeeded"))
}

// 10 -----------------------------------------------------------------------

fn provenance_inference() -> Outcome {
    let dev = fs_device(4096);
    let fs = BentoFs::mount(Variant::Prov, dev, MountOptions::default()).map_err(|e| e.to_string())?;
    let d = Direct(&fs);
    let e = |r: Errno| r.to_string();
    let setup = Ops::new(&d, 1);
    let mut ino = BTreeMap::new();
    for n in ["a", "b", "c", "x", "y"] {
        let (f, h) = setup.create(ROOT, n, O_RDWR).map_err(e)?;
        setup.write_all(f.ino(), h.fh, 0, n.as_bytes()).map_err(e)?;
        setup.release(f.ino(), h.fh).map_err(e)?;
        ino.insert(n, f.ino());
    }
    // Copy chain in pid 20: a -> b, then b -> c.
    let p = Ops::new(&d, 20);
    let copy = |from: &str, to: &str| -> Result<(), Errno> {
        let r = p.open(ino[from], O_RDONLY)?;
        let w = p.open(ino[to], O_WRONLY)?;
        let data = p.read_to_end(ino[from], r.fh, 0)?;
        p.write_all(ino[to], w.fh, 0, &data)?;
        p.release(ino[to], w.fh)?;
        p.release(ino[from], r.fh)
    };
    copy("a", "b").map_err(e)?;
    copy("b", "c").map_err(e)?;
    // pid 30 reads x while pid 31 writes y: overlapping, but different processes.
    let (p30, p31) = (Ops::new(&d, 30), Ops::new(&d, 31));
    let r = p30.open(ino["x"], O_RDONLY).map_err(e)?;
    let w = p31.open(ino["y"], O_WRONLY).map_err(e)?;
    p31.write(ino["y"], w.fh, 0, b"yy").map_err(e)?;
    p30.read(ino["x"], r.fh, 0, 10).map_err(e)?;
    p31.release(ino["y"], w.fh).map_err(e)?;
    p30.release(ino["x"], r.fh).map_err(e)?;

    let log = fs.prov_log_bytes().map_err(e)?;
    let records = prov_parse(&log).map_err(|e| e.to_string())?.records;
    let g = prov_infer(&records);
    let got = g.edge_pairs();
    let want: BTreeSet<(u64, u64)> = [(ino["a"], ino["b"]), (ino["b"], ino["c"])].into();
    check(got == want, || format!("edges {got:?}, expected {want:?}"))?;
    check(g.edges.iter().all(|e| e.pid == 20), || format!("edge attributed to another pid: {:?}", g.edges))?;
    Ok(format!("{} records; edges exactly a->b and b->c; no cross-pid edge", records.len()))
}

// 11 -----------------------------------------------------------------------

fn differential() -> Outcome {
    let clock: bentoframe_core::bentofs::Clock = Arc::new(|| Timespec::new(1_700_000_000, 0));
    let run = |variant: Variant| -> Result<Vec<FsReply>, String> {
        let dev = fs_device(8192);
        let opts = MountOptions {
            clock: Some(clock.clone()),
            ..MountOptions::default()
        };
        let fs = BentoFs::mount(variant, dev, opts).map_err(|e| e.to_string())?;
        let ctx = RequestContext::root(42);
        let mut replies = Vec::new();
        let mut files = Vec::new();
        for i in 0..4 {
            let r = run_op(&fs, &ctx, &FsOp::Create {
                parent: ROOT,
                name: format!("f{i}"),
                mode: S_IFREG | 0o644,
                flags: O_RDWR,
            });
            if let FsReply::Created(e, o) = &r {
                files.push((e.ino(), o.fh));
            }
            replies.push(r);
        }
        if files.len() != 4 {
            return Err(format!("{variant:?}: setup failed: {replies:?}"));
        }
        let mut rng = StdRng::seed_from_u64(11);
        for step in 0..2000 {
            let (ino, fh) = files[rng.gen_range(0..files.len())];
            let offset = rng.gen_range(0..200_000u64);
            let op = if rng.gen_bool(0.5) {
                FsOp::Write {
                    ino,
                    fh,
                    offset,
                    data: pattern(rng.gen_range(1..20_000), step),
                    flags: 0,
                }
            } else {
                FsOp::Read {
                    ino,
                    fh,
                    offset,
                    size: rng.gen_range(1..20_000),
                }
            };
            replies.push(run_op(&fs, &ctx, &op));
        }
        for (ino, fh) in files {
            replies.push(run_op(&fs, &ctx, &FsOp::Getattr { ino }));
            replies.push(run_op(&fs, &ctx, &FsOp::Release { ino, fh, flags: 0 }));
        }
        Ok(replies)
    };
    let plain = run(Variant::Plain)?;
    let prov = run(Variant::Prov)?;
    check(plain.len() == prov.len(), || "reply streams differ in length".into())?;
    if let Some(i) = (0..plain.len()).find(|&i| plain[i] != prov[i]) {
        return Err(format!("reply {i} differs: {:?} vs {:?}", plain[i], prov[i]));
    }
    let errs = plain.iter().filter(|r| r.is_err()).count();
    Ok(format!("{} identical replies ({errs} errors)", plain.len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("crash consistency, full seq-2 run", crash_consistency),
        ("crash tester detects a disabled journal", tester_potency),
        ("journal transactions are atomic and recovery idempotent", journal_atomicity),
        ("live upgrade under load", live_upgrade),
        ("upgrade semantics", upgrade_semantics),
        ("4 GiB file size cap", four_gib_cap),
        ("hash directory against a linear scan", hash_directory),
        ("writes to deleted files are dropped", dropped_writes),
        ("mkdir after rmdir of an open directory gets a new inode", inode_reuse),
        ("provenance dependency inference", provenance_inference),
        ("plain and provenance variants reply identically", differential),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.iter().any(|x| x == &n.to_string()) {
            continue;
        }
        let start = Instant::now();
        let r = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match r {
            Ok(detail) => println!("[PASS] {n:>2} {name}: {detail} ({secs:.1}s)"),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {n:>2} {name}: {detail} ({secs:.1}s)");
            }
        }
    }
    println!("acceptance: {} failed", failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
