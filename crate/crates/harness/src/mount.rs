//! Device and connection setup shared by the subcommands.

use std::path::Path;

use anyhow::{bail, Context, Result};

use bentoframe_core::bentofs::layout::BLOCK_SIZE;
use bentoframe_core::bentofs::{mkfs, BentoFs, MkfsOptions, MountOptions, Variant};
use bentoframe_core::blockdev::{create_image, BlockDevice, DeviceOptions, MemImage};
use bentoframe_core::fsapi::{Connection, FsRegistration, Registry};

/// Opens an existing image file.
pub fn open_image(path: &Path) -> Result<BlockDevice> {
    BlockDevice::open(path, BLOCK_SIZE, DeviceOptions::default())
        .with_context(|| format!("opening image {}", path.display()))
}

/// A freshly formatted device: the image file at `image` (recreated with
/// `blocks` blocks) or an in-memory one.
pub fn fresh_device(image: Option<&Path>, blocks: u64, opts: &MkfsOptions) -> Result<BlockDevice> {
    let dev = match image {
        Some(p) => {
            create_image(p, BLOCK_SIZE, blocks).with_context(|| format!("creating image {}", p.display()))?;
            open_image(p)?
        }
        None => BlockDevice::memory(MemImage::zeroed(BLOCK_SIZE, blocks), DeviceOptions::default())?,
    };
    mkfs(&dev, opts).context("mkfs")?;
    Ok(dev)
}

/// A registry with `dev` mounted under `name`.
pub struct Mounted {
    pub registry: Registry,
    pub conn: Connection,
}

impl Mounted {
    pub fn new(name: &str, variant: Variant, dev: &BlockDevice, opts: MountOptions) -> Result<Self> {
        let registry = Registry::new();
        let fs = BentoFs::with_device(variant, dev.clone(), opts);
        let Some(conn) = registry
            .register_filesystem(FsRegistration::new(name, Box::new(fs)))
            .context("mount")?
            .connection()
        else {
            bail!("registration did not produce a connection");
        };
        Ok(Mounted { registry, conn })
    }

    /// Unmounts, flushing everything to the device.
    pub fn finish(self) -> Result<()> {
        self.registry.unregister_filesystem(&self.conn).context("unmount")?;
        Ok(())
    }
}
