//! File-backed chunk store that survives process restarts.
//!
//! Layout (little-endian):
//!
//! ```text
//! 0   magic "PLCS"
//! 4   version u32
//! 8   index offset u64
//! 16  payload extents ...
//! idx entry count u64, then per entry: id [u8; 16], offset u64, size u64, state u8
//! ```
//!
//! The index is rewritten on [`DiskStore::flush`] and on drop. Freed extents
//! are recycled through the store's size buckets and a hole list.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::{AllocError, Allocation, Backing, Clock, DataState, Location, Store, StoreConfig};
use crate::chunk::ChunkId;
use crate::error::{Error, Result};

pub const DISK_STORE_MAGIC: &[u8; 4] = b"PLCS";
pub const DISK_STORE_VERSION: u32 = 1;
const HEADER_LEN: u64 = 16;
const INDEX_ENTRY_LEN: usize = 16 + 8 + 8 + 1;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Extent {
    pub offset: u64,
    pub len: u64,
}

pub struct DiskBacking {
    end: u64,
    holes: HashMap<u64, Vec<u64>>,
}

impl DiskBacking {
    fn new(end: u64) -> Self {
        DiskBacking {
            end: end.max(HEADER_LEN),
            holes: HashMap::new(),
        }
    }

    pub fn end(&self) -> u64 {
        self.end
    }
}

impl Backing for DiskBacking {
    type Buf = Extent;

    fn create(&mut self, size: u64, len: usize) -> Extent {
        let offset = match self.holes.get_mut(&size).and_then(|h| h.pop()) {
            Some(o) => o,
            None => {
                let o = self.end;
                self.end += size;
                o
            }
        };
        Extent {
            offset,
            len: len as u64,
        }
    }

    fn reuse(&mut self, buf: &mut Extent, len: usize) {
        buf.len = len as u64;
    }

    fn destroy(&mut self, size: u64, buf: Extent) {
        self.holes.entry(size).or_default().push(buf.offset);
    }
}

pub struct DiskStore {
    store: Store<DiskBacking>,
    file: Arc<File>,
    path: PathBuf,
}

impl DiskStore {
    /// Opens or creates the store file at `path`, loading any existing index.
    pub fn open(path: impl AsRef<Path>, config: StoreConfig, clock: Clock) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let len = file.metadata().map_err(|e| Error::io(&path, e))?.len();
        let mut loaded = Vec::new();
        let mut end = HEADER_LEN;
        if len > 0 {
            let mut header = [0u8; HEADER_LEN as usize];
            file.read_exact(&mut header)
                .map_err(|_| Error::format(&path, "truncated disk store header"))?;
            if &header[..4] != DISK_STORE_MAGIC {
                return Err(Error::format(&path, "bad disk store magic"));
            }
            let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
            if version != DISK_STORE_VERSION {
                return Err(Error::format(
                    &path,
                    format!("unsupported disk store version {version}"),
                ));
            }
            let index_offset = u64::from_le_bytes(header[8..16].try_into().unwrap());
            if index_offset != 0 {
                file.seek(SeekFrom::Start(index_offset))
                    .map_err(|e| Error::io(&path, e))?;
                let mut count = [0u8; 8];
                file.read_exact(&mut count)
                    .map_err(|_| Error::format(&path, "truncated disk store index"))?;
                let count = u64::from_le_bytes(count) as usize;
                let mut raw = vec![0u8; count * INDEX_ENTRY_LEN];
                file.read_exact(&mut raw)
                    .map_err(|_| Error::format(&path, "truncated disk store index"))?;
                for e in raw.chunks_exact(INDEX_ENTRY_LEN) {
                    let id = ChunkId(e[..16].try_into().unwrap());
                    let offset = u64::from_le_bytes(e[16..24].try_into().unwrap());
                    let size = u64::from_le_bytes(e[24..32].try_into().unwrap());
                    let state = DataState::from_code(e[32])
                        .ok_or_else(|| Error::format(&path, "bad entry state in index"))?;
                    if offset < HEADER_LEN || offset + size > len {
                        return Err(Error::format(&path, "index entry outside file"));
                    }
                    end = end.max(offset + super::quantize_size(size));
                    loaded.push((id, Extent { offset, len: size }, state));
                }
            }
        }
        let mut store = Store::new(Location::Disk, config, DiskBacking::new(end), clock);
        for (id, extent, state) in loaded {
            let size = store.config().quantize(extent.len);
            store.charge(size);
            store.insert(id, Allocation { size, buf: extent }, state);
        }
        let mut ds = DiskStore {
            store,
            file: Arc::new(file),
            path,
        };
        if len == 0 {
            ds.flush()?;
        }
        Ok(ds)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn store(&self) -> &Store<DiskBacking> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut Store<DiskBacking> {
        &mut self.store
    }

    /// Shared handle for positional reads and writes from worker jobs.
    pub fn file(&self) -> Arc<File> {
        self.file.clone()
    }

    pub fn write_extent(file: &File, extent: Extent, bytes: &[u8]) -> std::io::Result<()> {
        debug_assert_eq!(bytes.len() as u64, extent.len);
        file.write_all_at(bytes, extent.offset)
    }

    pub fn read_extent(file: &File, extent: Extent) -> std::io::Result<Vec<u8>> {
        let mut buf = vec![0u8; extent.len as usize];
        file.read_exact_at(&mut buf, extent.offset)?;
        Ok(buf)
    }

    /// Synchronously stores `bytes` under `id`, collecting garbage if needed.
    pub fn put(&mut self, id: ChunkId, bytes: &[u8], state: DataState) -> Result<()> {
        if self.store.contains(&id, DataState::Final) {
            return Ok(());
        }
        let alloc = match self.store.allocate(bytes.len()) {
            Ok(a) => a,
            Err(AllocError::ReclamationNeeded) => {
                self.store.garbage_collect();
                self.store.allocate(bytes.len()).map_err(|_| {
                    Error::MemoryExhausted(format!("disk store {} is full", self.path.display()))
                })?
            }
            Err(AllocError::TooLarge {
                requested,
                capacity,
            }) => {
                return Err(Error::AllocationTooLarge {
                    requested,
                    capacity,
                })
            }
        };
        Self::write_extent(&self.file, alloc.buf, bytes).map_err(|e| Error::io(&self.path, e))?;
        self.store.insert(id, alloc, state);
        Ok(())
    }

    /// Synchronously reads the payload stored under `id`.
    pub fn get(&mut self, id: &ChunkId, wanted: DataState) -> Result<Option<Vec<u8>>> {
        match self.store.lookup(id, wanted) {
            super::StoreLookup::Hit(r) => {
                let out = Self::read_extent(&self.file, *r.payload);
                self.store.release(&r.id, r.generation);
                out.map(Some).map_err(|e| Error::io(&self.path, e))
            }
            _ => Ok(None),
        }
    }

    /// Writes the index and header so the current contents survive a restart.
    pub fn flush(&mut self) -> Result<()> {
        let mut index = Vec::new();
        let mut count = 0u64;
        for (meta, extent) in self.store.entries() {
            if meta.state == DataState::InFlight {
                continue;
            }
            index.extend_from_slice(&meta.id.0);
            index.extend_from_slice(&extent.offset.to_le_bytes());
            index.extend_from_slice(&extent.len.to_le_bytes());
            index.push(meta.state.code());
            count += 1;
        }
        let index_offset = self.store.backing().end();
        let mut block = count.to_le_bytes().to_vec();
        block.extend_from_slice(&index);
        let io = |e| Error::io(&self.path, e);
        self.file.write_all_at(&block, index_offset).map_err(io)?;
        self.file
            .set_len(index_offset + block.len() as u64)
            .map_err(io)?;
        let mut header = Vec::with_capacity(HEADER_LEN as usize);
        header.extend_from_slice(DISK_STORE_MAGIC);
        header.extend_from_slice(&DISK_STORE_VERSION.to_le_bytes());
        header.extend_from_slice(&index_offset.to_le_bytes());
        self.file.write_all_at(&header, 0).map_err(io)?;
        self.file.sync_data().map_err(io)?;
        Ok(())
    }
}

impl Drop for DiskStore {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}
