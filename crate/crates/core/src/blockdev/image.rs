use std::sync::Arc;

use crate::hash::fnv1a64;

/// An in-memory disk image: a block array whose clones share unmodified blocks.
///
/// Blocks that were never written are `None` and read back as zeros.
#[derive(Clone, Debug)]
pub struct MemImage {
    block_size: usize,
    blocks: Vec<Option<Arc<[u8]>>>,
}

impl MemImage {
    pub fn zeroed(block_size: usize, block_count: u64) -> Self {
        MemImage {
            block_size,
            blocks: vec![None; block_count as usize],
        }
    }

    pub fn from_bytes(block_size: usize, bytes: &[u8]) -> Option<Self> {
        if block_size == 0 || bytes.len() % block_size != 0 {
            return None;
        }
        let blocks = bytes
            .chunks(block_size)
            .map(|c| {
                if c.iter().all(|&b| b == 0) {
                    None
                } else {
                    Some(Arc::from(c))
                }
            })
            .collect();
        Some(MemImage { block_size, blocks })
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn block_count(&self) -> u64 {
        self.blocks.len() as u64
    }

    pub fn read_into(&self, blockno: u64, buf: &mut [u8]) {
        match &self.blocks[blockno as usize] {
            Some(b) => buf.copy_from_slice(b),
            None => buf.fill(0),
        }
    }

    pub fn block(&self, blockno: u64) -> Vec<u8> {
        let mut v = vec![0; self.block_size];
        self.read_into(blockno, &mut v);
        v
    }

    pub fn write(&mut self, blockno: u64, data: &[u8]) {
        debug_assert_eq!(data.len(), self.block_size);
        self.blocks[blockno as usize] = Some(Arc::from(data));
    }

    pub(crate) fn write_shared(&mut self, blockno: u64, data: Arc<[u8]>) {
        self.blocks[blockno as usize] = Some(data);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![0; self.block_size * self.blocks.len()];
        for (i, b) in self.blocks.iter().enumerate() {
            if let Some(b) = b {
                out[i * self.block_size..(i + 1) * self.block_size].copy_from_slice(b);
            }
        }
        out
    }

    /// Digest over the full logical contents (zero blocks included).
    pub fn digest(&self) -> u64 {
        let zero_digest = fnv1a64(&vec![0; self.block_size]);
        let mut acc = Vec::with_capacity(self.blocks.len() * 8);
        for b in &self.blocks {
            let d = match b {
                Some(b) => fnv1a64(b),
                None => zero_digest,
            };
            acc.extend_from_slice(&d.to_le_bytes());
        }
        fnv1a64(&acc)
    }
}

impl PartialEq for MemImage {
    fn eq(&self, other: &Self) -> bool {
        if self.block_size != other.block_size || self.blocks.len() != other.blocks.len() {
            return false;
        }
        let zero = vec![0u8; self.block_size];
        self.blocks.iter().zip(&other.blocks).all(|(a, b)| {
            let a: &[u8] = a.as_deref().unwrap_or(&zero);
            let b: &[u8] = b.as_deref().unwrap_or(&zero);
            a == b
        })
    }
}

impl Eq for MemImage {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_blocks_compare_equal_to_explicit_zeros() {
        let mut a = MemImage::zeroed(16, 4);
        let b = MemImage::zeroed(16, 4);
        a.write(2, &[0; 16]);
        assert_eq!(a, b);
        assert_eq!(a.digest(), b.digest());
        a.write(2, &[1; 16]);
        assert_ne!(a, b);
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn bytes_round_trip() {
        let mut a = MemImage::zeroed(8, 3);
        a.write(1, &[7; 8]);
        let back = MemImage::from_bytes(8, &a.to_bytes()).unwrap();
        assert_eq!(a, back);
        assert!(MemImage::from_bytes(8, &[0; 9]).is_none());
    }
}
