//! Userspace file-system framework: block device shim, journal, a
//! journaling file system with live upgrade, and a provenance variant.

pub mod bentofs;
pub mod blockdev;
pub mod errno;
pub mod fsapi;
pub mod hash;
pub mod journal;
pub mod provenance;
pub mod upgrade;

pub use errno::Errno;
