//! File-backed shared mapping with word-level atomic access.
//!
//! Every participant maps the same backing file `MAP_SHARED`, so stores made
//! by one process are visible to the others. Multi-byte control words are
//! accessed through atomics; bulk payload bytes are copied through raw
//! pointers because the peer may be writing other parts of the mapping
//! concurrently.

use std::fs::{File, OpenOptions};
use std::io;
use std::path::Path;
use std::ptr;
use std::sync::atomic::{AtomicU16, AtomicU32, AtomicU64};

use memmap2::{MmapOptions, MmapRaw};

pub struct SharedMem {
    map: MmapRaw,
    _file: File,
}

impl std::fmt::Debug for SharedMem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SharedMem").field("len", &self.len()).finish()
    }
}

impl SharedMem {
    /// Creates (or truncates) `path` to `len` zero bytes and maps it.
    pub fn create(path: &Path, len: usize) -> io::Result<Self> {
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(true)
            .open(path)?;
        file.set_len(len as u64)?;
        Self::map(file)
    }

    pub fn open(path: &Path) -> io::Result<Self> {
        let file = OpenOptions::new().read(true).write(true).open(path)?;
        Self::map(file)
    }

    fn map(file: File) -> io::Result<Self> {
        let map = MmapOptions::new().map_raw(&file)?;
        Ok(Self { map, _file: file })
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.len() == 0
    }

    #[inline]
    fn at(&self, offset: usize, size: usize) -> *mut u8 {
        assert!(
            offset.checked_add(size).is_some_and(|end| end <= self.len()),
            "shared access {offset}+{size} outside mapping of {}",
            self.len()
        );
        // SAFETY: bounds checked above; the mapping lives as long as self.
        unsafe { self.map.as_mut_ptr().add(offset) }
    }

    #[inline]
    pub fn u16_at(&self, offset: usize) -> &AtomicU16 {
        assert_eq!(offset % 2, 0, "misaligned u16 at {offset}");
        // SAFETY: in bounds, aligned, and AtomicU16 has the layout of u16.
        unsafe { &*(self.at(offset, 2) as *const AtomicU16) }
    }

    #[inline]
    pub fn u32_at(&self, offset: usize) -> &AtomicU32 {
        assert_eq!(offset % 4, 0, "misaligned u32 at {offset}");
        // SAFETY: as above.
        unsafe { &*(self.at(offset, 4) as *const AtomicU32) }
    }

    #[inline]
    pub fn u64_at(&self, offset: usize) -> &AtomicU64 {
        assert_eq!(offset % 8, 0, "misaligned u64 at {offset}");
        // SAFETY: as above.
        unsafe { &*(self.at(offset, 8) as *const AtomicU64) }
    }

    #[inline]
    pub fn read(&self, offset: usize, dst: &mut [u8]) {
        let src = self.at(offset, dst.len());
        // SAFETY: src is in bounds for dst.len() bytes and cannot overlap a
        // private Rust buffer.
        unsafe { ptr::copy_nonoverlapping(src, dst.as_mut_ptr(), dst.len()) }
    }

    #[inline]
    pub fn write(&self, offset: usize, src: &[u8]) {
        let dst = self.at(offset, src.len());
        // SAFETY: dst is in bounds for src.len() bytes.
        unsafe { ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len()) }
    }

    pub fn zero(&self, offset: usize, len: usize) {
        let dst = self.at(offset, len);
        // SAFETY: in bounds.
        unsafe { ptr::write_bytes(dst, 0, len) }
    }

    pub fn snapshot(&self, offset: usize, len: usize) -> Vec<u8> {
        let mut out = vec![0u8; len];
        self.read(offset, &mut out);
        out
    }

    pub fn flush(&self) -> io::Result<()> {
        self.map.flush()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::Ordering;

    #[test]
    fn two_mappings_share_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r");
        let a = SharedMem::create(&path, 8192).unwrap();
        let b = SharedMem::open(&path).unwrap();
        a.u64_at(64).store(0xdead_beef, Ordering::Release);
        assert_eq!(b.u64_at(64).load(Ordering::Acquire), 0xdead_beef);
        b.write(100, b"hello");
        assert_eq!(a.snapshot(100, 5), b"hello");
        a.zero(100, 5);
        assert_eq!(b.snapshot(100, 5), [0; 5]);
    }

    #[test]
    #[should_panic(expected = "outside mapping")]
    fn out_of_range_panics() {
        let dir = tempfile::tempdir().unwrap();
        let m = SharedMem::create(&dir.path().join("r"), 4096).unwrap();
        m.read(4090, &mut [0u8; 8]);
    }
}
