//! File operations API, dispatcher and registry.
//!
//! A [`Connection`] owns one file-system instance behind a reader-writer
//! gate. Every dispatch holds the gate shared for the whole operation;
//! upgrade and unregister take it exclusively. The dispatcher only talks to
//! the instance through [`FileSystem`] methods and never looks inside it.

mod types;

use std::any::Any;
use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use parking_lot::{Mutex, RwLock, RwLockWriteGuard};
use thiserror::Error;

use crate::errno::Errno;

pub use types::*;

/// State handed out by an old instance during upgrade.
pub type TransferOut = Box<dyn Any + Send>;
/// State received by a new instance during upgrade.
pub type TransferIn = Box<dyn Any + Send>;

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum RefusalKind {
    #[error("capsule version {found} not accepted (max {accepted})")]
    VersionMismatch { found: u32, accepted: u32 },
    #[error("transfer refused: {0}")]
    Refused(String),
}

/// Why a new instance rejected its transfer state. The capsule is handed
/// back so the caller can restore the old instance.
#[derive(Error)]
#[error("{kind}")]
pub struct TransferRefusal {
    pub kind: RefusalKind,
    pub capsule: Option<TransferIn>,
}

impl std::fmt::Debug for TransferRefusal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TransferRefusal")
            .field("kind", &self.kind)
            .field("capsule", &self.capsule.is_some())
            .finish()
    }
}

type R<T> = Result<T, Errno>;

/// The operations a file system can implement. Anything left at its
/// default answers `ENOSYS`.
#[allow(unused_variables)]
pub trait FileSystem: Send + Sync + 'static {
    fn init(&mut self, ctx: &RequestContext, devname: &str, fc: &FcInfo) -> R<()> {
        Err(Errno::ENOSYS)
    }
    fn destroy(&mut self, ctx: &RequestContext) {}

    /// Drains the instance and hands out its live state.
    fn update_prepare(&mut self) -> Option<TransferOut> {
        None
    }
    /// Adopts state from a previous instance, or performs a full mount when
    /// `state` is `None`.
    fn update_transfer(
        &mut self,
        ctx: &RequestContext,
        state: Option<TransferIn>,
    ) -> Result<(), TransferRefusal> {
        Err(TransferRefusal {
            kind: RefusalKind::Refused("upgrade not supported".into()),
            capsule: state,
        })
    }

    fn lookup(&self, ctx: &RequestContext, parent: u64, name: &str) -> R<Entry> {
        Err(Errno::ENOSYS)
    }
    fn forget(&self, ctx: &RequestContext, ino: u64, nlookup: u64) -> R<()> {
        Err(Errno::ENOSYS)
    }
    fn getattr(&self, ctx: &RequestContext, ino: u64) -> R<FileAttr> {
        Err(Errno::ENOSYS)
    }
    fn setattr(&self, ctx: &RequestContext, ino: u64, fh: Option<u64>, attr: &SetAttr) -> R<FileAttr> {
        Err(Errno::ENOSYS)
    }
    fn readlink(&self, ctx: &RequestContext, ino: u64) -> R<Vec<u8>> {
        Err(Errno::ENOSYS)
    }
    fn mknod(&self, ctx: &RequestContext, parent: u64, name: &str, mode: u32, rdev: u32) -> R<Entry> {
        Err(Errno::ENOSYS)
    }
    fn mkdir(&self, ctx: &RequestContext, parent: u64, name: &str, mode: u32) -> R<Entry> {
        Err(Errno::ENOSYS)
    }
    fn unlink(&self, ctx: &RequestContext, parent: u64, name: &str) -> R<()> {
        Err(Errno::ENOSYS)
    }
    fn rmdir(&self, ctx: &RequestContext, parent: u64, name: &str) -> R<()> {
        Err(Errno::ENOSYS)
    }
    fn symlink(&self, ctx: &RequestContext, parent: u64, name: &str, link: &str) -> R<Entry> {
        Err(Errno::ENOSYS)
    }
    fn rename(
        &self,
        ctx: &RequestContext,
        parent: u64,
        name: &str,
        newparent: u64,
        newname: &str,
        flags: u32,
    ) -> R<()> {
        Err(Errno::ENOSYS)
    }
    fn link(&self, ctx: &RequestContext, ino: u64, newparent: u64, newname: &str) -> R<Entry> {
        Err(Errno::ENOSYS)
    }
    fn open(&self, ctx: &RequestContext, ino: u64, flags: u32) -> R<Opened> {
        Err(Errno::ENOSYS)
    }
    fn read(&self, ctx: &RequestContext, ino: u64, fh: u64, offset: u64, size: u32) -> R<Vec<u8>> {
        Err(Errno::ENOSYS)
    }
    fn write(&self, ctx: &RequestContext, ino: u64, fh: u64, offset: u64, data: &[u8], flags: u32) -> R<u32> {
        Err(Errno::ENOSYS)
    }
    fn flush(&self, ctx: &RequestContext, ino: u64, fh: u64) -> R<()> {
        Err(Errno::ENOSYS)
    }
    fn release(&self, ctx: &RequestContext, ino: u64, fh: u64, flags: u32) -> R<()> {
        Err(Errno::ENOSYS)
    }
    fn fsync(&self, ctx: &RequestContext, ino: u64, fh: u64, datasync: bool) -> R<()> {
        Err(Errno::ENOSYS)
    }
    fn opendir(&self, ctx: &RequestContext, ino: u64, flags: u32) -> R<Opened> {
        Err(Errno::ENOSYS)
    }
    fn readdir(&self, ctx: &RequestContext, ino: u64, fh: u64, offset: u64) -> R<Vec<DirEntry>> {
        Err(Errno::ENOSYS)
    }
    fn releasedir(&self, ctx: &RequestContext, ino: u64, fh: u64) -> R<()> {
        Err(Errno::ENOSYS)
    }
    fn fsyncdir(&self, ctx: &RequestContext, ino: u64, fh: u64, datasync: bool) -> R<()> {
        Err(Errno::ENOSYS)
    }
    fn statfs(&self, ctx: &RequestContext, ino: u64) -> R<Statfs> {
        Err(Errno::ENOSYS)
    }
    fn access(&self, ctx: &RequestContext, ino: u64, mask: u32) -> R<()> {
        Err(Errno::ENOSYS)
    }
    fn create(&self, ctx: &RequestContext, parent: u64, name: &str, mode: u32, flags: u32) -> R<(Entry, Opened)> {
        Err(Errno::ENOSYS)
    }
    fn getxattr(&self, ctx: &RequestContext, ino: u64, name: &str, size: u32) -> R<Vec<u8>> {
        Err(Errno::ENOSYS)
    }
    fn setxattr(&self, ctx: &RequestContext, ino: u64, name: &str, value: &[u8], flags: u32) -> R<()> {
        Err(Errno::ENOSYS)
    }
    fn listxattr(&self, ctx: &RequestContext, ino: u64, size: u32) -> R<Vec<u8>> {
        Err(Errno::ENOSYS)
    }
    fn removexattr(&self, ctx: &RequestContext, ino: u64, name: &str) -> R<()> {
        Err(Errno::ENOSYS)
    }
    fn getlk(&self, ctx: &RequestContext, ino: u64, fh: u64) -> R<()> {
        Err(Errno::ENOSYS)
    }
    fn setlk(&self, ctx: &RequestContext, ino: u64, fh: u64, sleep: bool) -> R<()> {
        Err(Errno::ENOSYS)
    }
    fn bmap(&self, ctx: &RequestContext, ino: u64, blocksize: u32, idx: u64) -> R<u64> {
        Err(Errno::ENOSYS)
    }

    /// Lets tests and tools reach the concrete type.
    fn as_any(&self) -> &dyn Any;
}

const ATTR_TTL_MS: u64 = 1000;

/// Runs one operation against an instance directly, bypassing any gate.
pub fn run_op(fs: &dyn FileSystem, ctx: &RequestContext, op: &FsOp) -> FsReply {
    use FsOp::*;
    fn reply<T>(r: R<T>, f: impl FnOnce(T) -> FsReply) -> FsReply {
        match r {
            Ok(v) => f(v),
            Err(e) => FsReply::Err(e),
        }
    }
    let ok = |_| FsReply::Ok;
    match op {
        Lookup { parent, name } => reply(fs.lookup(ctx, *parent, name), FsReply::Entry),
        Forget { ino, nlookup } => reply(fs.forget(ctx, *ino, *nlookup), ok),
        Getattr { ino } => reply(fs.getattr(ctx, *ino), |attr| FsReply::Attr {
            attr,
            ttl_ms: ATTR_TTL_MS,
        }),
        Setattr { ino, fh, attr } => reply(fs.setattr(ctx, *ino, *fh, attr), |attr| {
            FsReply::Attr {
                attr,
                ttl_ms: ATTR_TTL_MS,
            }
        }),
        Readlink { ino } => reply(fs.readlink(ctx, *ino), FsReply::Data),
        Mknod {
            parent,
            name,
            mode,
            rdev,
        } => reply(fs.mknod(ctx, *parent, name, *mode, *rdev), FsReply::Entry),
        Mkdir { parent, name, mode } => reply(fs.mkdir(ctx, *parent, name, *mode), FsReply::Entry),
        Unlink { parent, name } => reply(fs.unlink(ctx, *parent, name), ok),
        Rmdir { parent, name } => reply(fs.rmdir(ctx, *parent, name), ok),
        Symlink { parent, name, link } => {
            reply(fs.symlink(ctx, *parent, name, link), FsReply::Entry)
        }
        Rename {
            parent,
            name,
            newparent,
            newname,
            flags,
        } => reply(fs.rename(ctx, *parent, name, *newparent, newname, *flags), ok),
        Link {
            ino,
            newparent,
            newname,
        } => reply(fs.link(ctx, *ino, *newparent, newname), FsReply::Entry),
        Open { ino, flags } => reply(fs.open(ctx, *ino, *flags), FsReply::Open),
        Read {
            ino,
            fh,
            offset,
            size,
        } => reply(fs.read(ctx, *ino, *fh, *offset, *size), |mut d| {
            d.truncate(*size as usize);
            FsReply::Data(d)
        }),
        Write {
            ino,
            fh,
            offset,
            data,
            flags,
        } => reply(fs.write(ctx, *ino, *fh, *offset, data, *flags), FsReply::Written),
        Flush { ino, fh } => reply(fs.flush(ctx, *ino, *fh), ok),
        Release { ino, fh, flags } => reply(fs.release(ctx, *ino, *fh, *flags), ok),
        Fsync { ino, fh, datasync } => reply(fs.fsync(ctx, *ino, *fh, *datasync), ok),
        Opendir { ino, flags } => reply(fs.opendir(ctx, *ino, *flags), FsReply::Open),
        Readdir { ino, fh, offset } => {
            reply(fs.readdir(ctx, *ino, *fh, *offset), FsReply::DirEntries)
        }
        Releasedir { ino, fh } => reply(fs.releasedir(ctx, *ino, *fh), ok),
        Fsyncdir { ino, fh, datasync } => reply(fs.fsyncdir(ctx, *ino, *fh, *datasync), ok),
        Statfs { ino } => reply(fs.statfs(ctx, *ino), FsReply::Statfs),
        Access { ino, mask } => reply(fs.access(ctx, *ino, *mask), ok),
        Create {
            parent,
            name,
            mode,
            flags,
        } => reply(fs.create(ctx, *parent, name, *mode, *flags), |(e, o)| {
            FsReply::Created(e, o)
        }),
        Getxattr { ino, name, size } => reply(fs.getxattr(ctx, *ino, name, *size), FsReply::Data),
        Setxattr {
            ino,
            name,
            value,
            flags,
        } => reply(fs.setxattr(ctx, *ino, name, value, *flags), ok),
        Listxattr { ino, size } => reply(fs.listxattr(ctx, *ino, *size), FsReply::Data),
        Removexattr { ino, name } => reply(fs.removexattr(ctx, *ino, name), ok),
        Getlk { ino, fh } => reply(fs.getlk(ctx, *ino, *fh), ok),
        Setlk { ino, fh, sleep } => reply(fs.setlk(ctx, *ino, *fh, *sleep), ok),
        Bmap {
            ino,
            blocksize,
            idx,
        } => reply(fs.bmap(ctx, *ino, *blocksize, *idx), |b| {
            FsReply::Data(b.to_le_bytes().to_vec())
        }),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("file system name must not be empty")]
    EmptyName,
    #[error("file system {0:?} is already registered")]
    NameInUse(String),
    #[error("no file system named {0:?} is registered")]
    NoSuchFs(String),
    #[error("initializing {name:?} failed: {errno}")]
    InitFailed { name: String, errno: Errno },
}

pub struct FsRegistration {
    pub fs_name: String,
    pub instance: Box<dyn FileSystem>,
    pub is_upgrade: bool,
    pub devname: String,
    pub fc_info: FcInfo,
}

impl FsRegistration {
    pub fn new(fs_name: impl Into<String>, instance: Box<dyn FileSystem>) -> Self {
        FsRegistration {
            fs_name: fs_name.into(),
            instance,
            is_upgrade: false,
            devname: String::new(),
            fc_info: FcInfo::default(),
        }
    }

    pub fn devname(mut self, devname: impl Into<String>) -> Self {
        self.devname = devname.into();
        self
    }

    pub fn upgrade(mut self) -> Self {
        self.is_upgrade = true;
        self
    }
}

/// A registered replacement waiting to be swapped in.
pub struct UpgradeTicket {
    pub(crate) conn: Connection,
    pub(crate) instance: Box<dyn FileSystem>,
    pub(crate) target_generation: u64,
}

impl UpgradeTicket {
    pub fn connection(&self) -> &Connection {
        &self.conn
    }

    pub fn target_generation(&self) -> u64 {
        self.target_generation
    }

    /// Consumes the ticket without upgrading, returning the unused instance.
    pub fn abandon(self) -> Box<dyn FileSystem> {
        self.instance
    }
}

pub enum Registered {
    Connection(Connection),
    Upgrade(UpgradeTicket),
}

impl Registered {
    pub fn connection(self) -> Option<Connection> {
        match self {
            Registered::Connection(c) => Some(c),
            Registered::Upgrade(_) => None,
        }
    }

    pub fn ticket(self) -> Option<UpgradeTicket> {
        match self {
            Registered::Upgrade(t) => Some(t),
            Registered::Connection(_) => None,
        }
    }
}

struct ConnInner {
    name: String,
    gate: RwLock<Option<Box<dyn FileSystem>>>,
    generation: AtomicU64,
    in_flight: AtomicUsize,
    exclusive_pending: AtomicBool,
    blocked: AtomicU64,
    unique: AtomicU64,
}

/// Handle to one mounted file system. Cheap to clone.
#[derive(Clone)]
pub struct Connection {
    inner: Arc<ConnInner>,
}

impl std::fmt::Debug for Connection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Connection")
            .field("name", &self.inner.name)
            .field("generation", &self.generation())
            .finish()
    }
}

/// Exclusive hold on a connection's gate.
pub(crate) struct ExclusiveGate<'a> {
    pub(crate) guard: RwLockWriteGuard<'a, Option<Box<dyn FileSystem>>>,
    pub(crate) acquired_at: Instant,
    pub(crate) in_flight_at_acquire: usize,
    conn: &'a ConnInner,
}

impl Drop for ExclusiveGate<'_> {
    fn drop(&mut self) {
        self.conn.exclusive_pending.store(false, Ordering::SeqCst);
    }
}

impl Connection {
    fn new(name: String, instance: Box<dyn FileSystem>) -> Self {
        Connection {
            inner: Arc::new(ConnInner {
                name,
                gate: RwLock::new(Some(instance)),
                generation: AtomicU64::new(0),
                in_flight: AtomicUsize::new(0),
                exclusive_pending: AtomicBool::new(false),
                blocked: AtomicU64::new(0),
                unique: AtomicU64::new(0),
            }),
        }
    }

    pub fn name(&self) -> &str {
        &self.inner.name
    }

    pub fn generation(&self) -> u64 {
        self.inner.generation.load(Ordering::SeqCst)
    }

    pub fn in_flight(&self) -> usize {
        self.inner.in_flight.load(Ordering::SeqCst)
    }

    /// Dispatches that found the gate held or requested exclusively and had
    /// to wait.
    pub fn ops_blocked(&self) -> u64 {
        self.inner.blocked.load(Ordering::SeqCst)
    }

    pub fn same_connection(&self, other: &Connection) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }

    /// Builds a request with the next serial number of this connection.
    pub fn request(&self, uid: u32, gid: u32, pid: u32, op: FsOp) -> FsRequest {
        let unique = self.inner.unique.fetch_add(1, Ordering::SeqCst) + 1;
        FsRequest {
            ctx: RequestContext {
                uid,
                gid,
                pid,
                unique,
            },
            op,
        }
    }

    pub fn dispatch(&self, req: &FsRequest) -> FsReply {
        let inner = &self.inner;
        let guard = match inner.gate.try_read() {
            Some(g) => g,
            None => {
                if inner.exclusive_pending.load(Ordering::SeqCst) {
                    inner.blocked.fetch_add(1, Ordering::SeqCst);
                }
                inner.gate.read()
            }
        };
        let Some(fs) = guard.as_deref() else {
            return FsReply::Err(Errno::ESHUTDOWN);
        };
        inner.in_flight.fetch_add(1, Ordering::SeqCst);
        let reply = run_op(fs, &req.ctx, &req.op);
        inner.in_flight.fetch_sub(1, Ordering::SeqCst);
        reply
    }

    /// Runs `f` against the active instance while holding the gate shared.
    pub fn with_instance<T>(&self, f: impl FnOnce(&dyn FileSystem) -> T) -> Option<T> {
        let guard = self.inner.gate.read();
        guard.as_deref().map(f)
    }

    pub(crate) fn lock_exclusive(&self) -> ExclusiveGate<'_> {
        let inner = &*self.inner;
        inner.exclusive_pending.store(true, Ordering::SeqCst);
        let guard = inner.gate.write();
        let in_flight_at_acquire = inner.in_flight.load(Ordering::SeqCst);
        debug_assert_eq!(in_flight_at_acquire, 0);
        ExclusiveGate {
            guard,
            acquired_at: Instant::now(),
            in_flight_at_acquire,
            conn: inner,
        }
    }

    pub(crate) fn bump_generation(&self) -> u64 {
        self.inner.generation.fetch_add(1, Ordering::SeqCst) + 1
    }
}

/// The list of active file systems.
#[derive(Default)]
pub struct Registry {
    active: Mutex<HashMap<String, Connection>>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Process-wide registry.
    pub fn global() -> &'static Registry {
        static GLOBAL: OnceLock<Registry> = OnceLock::new();
        GLOBAL.get_or_init(Registry::new)
    }

    pub fn register_filesystem(&self, reg: FsRegistration) -> Result<Registered, RegistryError> {
        if reg.fs_name.is_empty() {
            return Err(RegistryError::EmptyName);
        }
        let mut active = self.active.lock();
        let existing = active.get(&reg.fs_name).cloned();
        match (reg.is_upgrade, existing) {
            (false, Some(_)) => Err(RegistryError::NameInUse(reg.fs_name)),
            (true, None) => Err(RegistryError::NoSuchFs(reg.fs_name)),
            (true, Some(conn)) => {
                let target_generation = conn.generation() + 1;
                Ok(Registered::Upgrade(UpgradeTicket {
                    conn,
                    instance: reg.instance,
                    target_generation,
                }))
            }
            (false, None) => {
                let mut instance = reg.instance;
                instance
                    .init(&RequestContext::default(), &reg.devname, &reg.fc_info)
                    .map_err(|errno| RegistryError::InitFailed {
                        name: reg.fs_name.clone(),
                        errno,
                    })?;
                let conn = Connection::new(reg.fs_name.clone(), instance);
                active.insert(reg.fs_name, conn.clone());
                Ok(Registered::Connection(conn))
            }
        }
    }

    pub fn lookup(&self, name: &str) -> Option<Connection> {
        self.active.lock().get(name).cloned()
    }

    pub fn names(&self) -> Vec<String> {
        let mut v: Vec<String> = self.active.lock().keys().cloned().collect();
        v.sort();
        v
    }

    /// Waits for in-flight operations, destroys the instance and removes the
    /// registration. Later dispatches on `conn` answer `ESHUTDOWN`.
    pub fn unregister_filesystem(&self, conn: &Connection) -> Result<(), RegistryError> {
        {
            let mut active = self.active.lock();
            match active.get(conn.name()) {
                Some(c) if c.same_connection(conn) => {
                    active.remove(conn.name());
                }
                _ => return Err(RegistryError::NoSuchFs(conn.name().to_string())),
            }
        }
        let mut gate = conn.lock_exclusive();
        if let Some(mut fs) = gate.guard.take() {
            fs.destroy(&RequestContext::default());
        }
        Ok(())
    }
}
