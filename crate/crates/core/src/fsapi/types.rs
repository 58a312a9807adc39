use crate::errno::Errno;

pub const O_ACCMODE: u32 = 0o3;
pub const O_RDONLY: u32 = 0;
pub const O_WRONLY: u32 = 1;
pub const O_RDWR: u32 = 2;
pub const O_CREAT: u32 = 0o100;
pub const O_EXCL: u32 = 0o200;
pub const O_TRUNC: u32 = 0o1000;
pub const O_APPEND: u32 = 0o2000;

pub const RENAME_NOREPLACE: u32 = 1;
pub const RENAME_EXCHANGE: u32 = 2;

pub const F_OK: u32 = 0;
pub const X_OK: u32 = 1;
pub const W_OK: u32 = 2;
pub const R_OK: u32 = 4;

pub const S_IFMT: u32 = 0o170000;
pub const S_IFREG: u32 = 0o100000;
pub const S_IFDIR: u32 = 0o040000;
pub const S_IFLNK: u32 = 0o120000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timespec {
    pub secs: u64,
    pub nanos: u32,
}

impl Timespec {
    pub fn new(secs: u64, nanos: u32) -> Self {
        Timespec { secs, nanos }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FileKind {
    RegularFile,
    Directory,
    Symlink,
}

impl FileKind {
    pub fn type_bits(self) -> u32 {
        match self {
            FileKind::RegularFile => S_IFREG,
            FileKind::Directory => S_IFDIR,
            FileKind::Symlink => S_IFLNK,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FileAttr {
    pub ino: u64,
    pub size: u64,
    /// Allocated storage in 512-byte sectors.
    pub blocks: u64,
    pub kind: FileKind,
    /// Permission bits only; the type bits come from `kind`.
    pub perm: u16,
    pub nlink: u32,
    pub uid: u32,
    pub gid: u32,
    pub atime: Timespec,
    pub mtime: Timespec,
    pub ctime: Timespec,
}

impl FileAttr {
    pub fn mode(&self) -> u32 {
        self.kind.type_bits() | u32::from(self.perm)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SetAttr {
    pub mode: Option<u16>,
    pub uid: Option<u32>,
    pub gid: Option<u32>,
    pub size: Option<u64>,
    pub atime: Option<Timespec>,
    pub mtime: Option<Timespec>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub attr: FileAttr,
    pub generation: u64,
}

impl Entry {
    pub fn ino(&self) -> u64 {
        self.attr.ino
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Opened {
    pub fh: u64,
    pub flags: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DirEntry {
    pub ino: u64,
    pub kind: FileKind,
    pub name: String,
    /// Offset to pass to the next readdir call to continue after this entry.
    pub next_offset: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Statfs {
    pub blocks: u64,
    pub bfree: u64,
    pub files: u64,
    pub ffree: u64,
    pub bsize: u32,
    pub namelen: u32,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RequestContext {
    pub uid: u32,
    pub gid: u32,
    pub pid: u32,
    pub unique: u64,
}

impl RequestContext {
    pub fn root(pid: u32) -> Self {
        RequestContext {
            uid: 0,
            gid: 0,
            pid,
            unique: 0,
        }
    }
}

/// Mount-time parameters passed alongside the device name.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FcInfo {
    pub block_size: Option<usize>,
}

/// One operation and its arguments.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FsOp {
    Lookup { parent: u64, name: String },
    Forget { ino: u64, nlookup: u64 },
    Getattr { ino: u64 },
    Setattr { ino: u64, fh: Option<u64>, attr: SetAttr },
    Readlink { ino: u64 },
    Mknod { parent: u64, name: String, mode: u32, rdev: u32 },
    Mkdir { parent: u64, name: String, mode: u32 },
    Unlink { parent: u64, name: String },
    Rmdir { parent: u64, name: String },
    Symlink { parent: u64, name: String, link: String },
    Rename { parent: u64, name: String, newparent: u64, newname: String, flags: u32 },
    Link { ino: u64, newparent: u64, newname: String },
    Open { ino: u64, flags: u32 },
    Read { ino: u64, fh: u64, offset: u64, size: u32 },
    Write { ino: u64, fh: u64, offset: u64, data: Vec<u8>, flags: u32 },
    Flush { ino: u64, fh: u64 },
    Release { ino: u64, fh: u64, flags: u32 },
    Fsync { ino: u64, fh: u64, datasync: bool },
    Opendir { ino: u64, flags: u32 },
    Readdir { ino: u64, fh: u64, offset: u64 },
    Releasedir { ino: u64, fh: u64 },
    Fsyncdir { ino: u64, fh: u64, datasync: bool },
    Statfs { ino: u64 },
    Access { ino: u64, mask: u32 },
    Create { parent: u64, name: String, mode: u32, flags: u32 },
    Getxattr { ino: u64, name: String, size: u32 },
    Setxattr { ino: u64, name: String, value: Vec<u8>, flags: u32 },
    Listxattr { ino: u64, size: u32 },
    Removexattr { ino: u64, name: String },
    Getlk { ino: u64, fh: u64 },
    Setlk { ino: u64, fh: u64, sleep: bool },
    Bmap { ino: u64, blocksize: u32, idx: u64 },
}

impl FsOp {
    pub fn name(&self) -> &'static str {
        match self {
            FsOp::Lookup { .. } => "lookup",
            FsOp::Forget { .. } => "forget",
            FsOp::Getattr { .. } => "getattr",
            FsOp::Setattr { .. } => "setattr",
            FsOp::Readlink { .. } => "readlink",
            FsOp::Mknod { .. } => "mknod",
            FsOp::Mkdir { .. } => "mkdir",
            FsOp::Unlink { .. } => "unlink",
            FsOp::Rmdir { .. } => "rmdir",
            FsOp::Symlink { .. } => "symlink",
            FsOp::Rename { .. } => "rename",
            FsOp::Link { .. } => "link",
            FsOp::Open { .. } => "open",
            FsOp::Read { .. } => "read",
            FsOp::Write { .. } => "write",
            FsOp::Flush { .. } => "flush",
            FsOp::Release { .. } => "release",
            FsOp::Fsync { .. } => "fsync",
            FsOp::Opendir { .. } => "opendir",
            FsOp::Readdir { .. } => "readdir",
            FsOp::Releasedir { .. } => "releasedir",
            FsOp::Fsyncdir { .. } => "fsyncdir",
            FsOp::Statfs { .. } => "statfs",
            FsOp::Access { .. } => "access",
            FsOp::Create { .. } => "create",
            FsOp::Getxattr { .. } => "getxattr",
            FsOp::Setxattr { .. } => "setxattr",
            FsOp::Listxattr { .. } => "listxattr",
            FsOp::Removexattr { .. } => "removexattr",
            FsOp::Getlk { .. } => "getlk",
            FsOp::Setlk { .. } => "setlk",
            FsOp::Bmap { .. } => "bmap",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FsRequest {
    pub ctx: RequestContext,
    pub op: FsOp,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FsReply {
    Entry(Entry),
    Created(Entry, Opened),
    Attr { attr: FileAttr, ttl_ms: u64 },
    Data(Vec<u8>),
    Written(u32),
    Open(Opened),
    DirEntries(Vec<DirEntry>),
    Statfs(Statfs),
    Ok,
    Err(Errno),
}

impl FsReply {
    pub fn err(&self) -> Option<Errno> {
        match self {
            FsReply::Err(e) => Some(*e),
            _ => None,
        }
    }

    pub fn is_err(&self) -> bool {
        matches!(self, FsReply::Err(_))
    }
}
