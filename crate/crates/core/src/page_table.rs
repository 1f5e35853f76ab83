//! Sparse three-level index from linear chunk indices to resident payloads,
//! plus the fixed-size hash table through which kernels report chunk
//! requests and uses back to the manager.
//!
//! Entries are atomics: lookups are wait-free loads and concurrent inserts of
//! distinct indices are linearizable through compare-and-swap. Reclaiming
//! empty pages is structural and must not overlap with running kernels.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU32, AtomicU64, AtomicUsize, Ordering};
use std::sync::OnceLock;

use parking_lot::Mutex;

pub const PAGE_BITS: u32 = 16;
pub const PAGE_ENTRIES: usize = 1 << PAGE_BITS;
pub const LEVELS: usize = 3;
/// Exclusive upper bound of addressable linear chunk indices.
pub const INDEX_LIMIT: u64 = 1 << (PAGE_BITS as u64 * LEVELS as u64);
pub const PAGE_BYTES: usize = PAGE_ENTRIES * 8;

const UNMAPPED: u64 = 0;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum PageError {
    /// No page is free; reclaim empty pages (or evict entries) and retry.
    ReclamationNeeded,
    /// The index does not fit the three-level address space.
    OutOfRange,
}

struct Page {
    entries: Box<[AtomicU64]>,
    /// Mapped entries (leaf pages) or linked children (interior pages).
    live: AtomicU32,
    parent: AtomicU64,
}

impl Page {
    fn new() -> Page {
        Page {
            entries: (0..PAGE_ENTRIES).map(|_| AtomicU64::new(UNMAPPED)).collect(),
            live: AtomicU32::new(0),
            parent: AtomicU64::new(u64::MAX),
        }
    }
}

fn digit(index: u64, level: usize) -> usize {
    ((index >> (PAGE_BITS as usize * (LEVELS - 1 - level))) & (PAGE_ENTRIES as u64 - 1)) as usize
}

/// One page directory of a tensor. Leaf entries hold caller-defined payload
/// handles.
pub struct PageTableHierarchy {
    pages: Box<[OnceLock<Page>]>,
    next: AtomicUsize,
    free: Mutex<Vec<u32>>,
    /// Pages that became empty, with the epoch at which that happened.
    empty: Mutex<BTreeMap<u32, u64>>,
    mapped: AtomicUsize,
}

impl PageTableHierarchy {
    /// A directory with room for `max_pages` pages including the root.
    pub fn new(max_pages: usize) -> Self {
        assert!(max_pages >= LEVELS, "a page table needs at least {LEVELS} pages");
        let pages: Box<[OnceLock<Page>]> = (0..max_pages).map(|_| OnceLock::new()).collect();
        let _ = pages[0].set(Page::new());
        PageTableHierarchy {
            pages,
            next: AtomicUsize::new(1),
            free: Mutex::new(Vec::new()),
            empty: Mutex::new(BTreeMap::new()),
            mapped: AtomicUsize::new(0),
        }
    }

    fn page(&self, id: u32) -> &Page {
        self.pages[id as usize].get().expect("linked pages are initialized")
    }

    fn alloc_page(&self) -> Result<u32, PageError> {
        if let Some(id) = self.free.lock().pop() {
            return Ok(id);
        }
        let id = self.next.fetch_add(1, Ordering::Relaxed);
        if id >= self.pages.len() {
            self.next.fetch_sub(1, Ordering::Relaxed);
            return Err(PageError::ReclamationNeeded);
        }
        let _ = self.pages[id].set(Page::new());
        Ok(id as u32)
    }

    /// Maps `index` to `handle`, returning the handle it replaces.
    pub fn insert(&self, index: u64, handle: u64) -> Result<Option<u64>, PageError> {
        if index >= INDEX_LIMIT {
            return Err(PageError::OutOfRange);
        }
        assert!(handle != u64::MAX, "handle reserved");
        let mut page = 0u32;
        for level in 0..LEVELS - 1 {
            let p = self.page(page);
            let slot = &p.entries[digit(index, level)];
            let cur = slot.load(Ordering::Acquire);
            page = if cur != UNMAPPED {
                (cur - 1) as u32
            } else {
                let fresh = self.alloc_page()?;
                self.page(fresh).parent.store(
                    ((page as u64) << PAGE_BITS) | digit(index, level) as u64,
                    Ordering::Relaxed,
                );
                match slot.compare_exchange(UNMAPPED, fresh as u64 + 1, Ordering::AcqRel, Ordering::Acquire) {
                    Ok(_) => {
                        p.live.fetch_add(1, Ordering::AcqRel);
                        self.empty.lock().remove(&page);
                        fresh
                    }
                    Err(winner) => {
                        self.free.lock().push(fresh);
                        (winner - 1) as u32
                    }
                }
            };
        }
        let leaf = self.page(page);
        let prev = leaf.entries[digit(index, LEVELS - 1)].swap(handle + 1, Ordering::AcqRel);
        if prev == UNMAPPED {
            leaf.live.fetch_add(1, Ordering::AcqRel);
            self.mapped.fetch_add(1, Ordering::Relaxed);
            self.empty.lock().remove(&page);
            Ok(None)
        } else {
            Ok(Some(prev - 1))
        }
    }

    /// Wait-free lookup through at most three page dereferences.
    pub fn lookup(&self, index: u64) -> Option<u64> {
        self.lookup_traced(index).0
    }

    /// Lookup that also reports how many pages were dereferenced.
    pub fn lookup_traced(&self, index: u64) -> (Option<u64>, usize) {
        if index >= INDEX_LIMIT {
            return (None, 0);
        }
        let mut page = 0u32;
        for level in 0..LEVELS {
            let v = self.page(page).entries[digit(index, level)].load(Ordering::Acquire);
            if v == UNMAPPED {
                return (None, level + 1);
            }
            if level == LEVELS - 1 {
                return (Some(v - 1), LEVELS);
            }
            page = (v - 1) as u32;
        }
        unreachable!()
    }

    /// Unmaps `index` and returns its handle. A leaf page left empty becomes
    /// reclaimable once `epoch` has completed.
    pub fn remove(&self, index: u64, epoch: u64) -> Option<u64> {
        if index >= INDEX_LIMIT {
            return None;
        }
        let mut page = 0u32;
        for level in 0..LEVELS - 1 {
            let v = self.page(page).entries[digit(index, level)].load(Ordering::Acquire);
            if v == UNMAPPED {
                return None;
            }
            page = (v - 1) as u32;
        }
        let leaf = self.page(page);
        let prev = leaf.entries[digit(index, LEVELS - 1)].swap(UNMAPPED, Ordering::AcqRel);
        if prev == UNMAPPED {
            return None;
        }
        self.mapped.fetch_sub(1, Ordering::Relaxed);
        if leaf.live.fetch_sub(1, Ordering::AcqRel) == 1 {
            self.empty.lock().insert(page, epoch);
        }
        Some(prev - 1)
    }

    /// Unlinks empty pages whose epoch is at most `completed_epoch` and makes
    /// them available for reuse. Returns the number of pages freed.
    pub fn reclaim_pages(&self, completed_epoch: u64) -> usize {
        let mut freed = 0;
        loop {
            let ready: Vec<u32> = self
                .empty
                .lock()
                .iter()
                .filter(|(_, e)| **e <= completed_epoch)
                .map(|(p, _)| *p)
                .collect();
            if ready.is_empty() {
                return freed;
            }
            for id in ready {
                self.empty.lock().remove(&id);
                let page = self.page(id);
                if page.live.load(Ordering::Acquire) != 0 {
                    continue;
                }
                let link = page.parent.load(Ordering::Relaxed);
                let parent = (link >> PAGE_BITS) as u32;
                let slot = (link & (PAGE_ENTRIES as u64 - 1)) as usize;
                let pp = self.page(parent);
                pp.entries[slot].store(UNMAPPED, Ordering::Release);
                if pp.live.fetch_sub(1, Ordering::AcqRel) == 1 && parent != 0 {
                    self.empty.lock().insert(parent, completed_epoch);
                }
                self.free.lock().push(id);
                freed += 1;
            }
        }
    }

    /// Pages currently linked into the hierarchy, including the root.
    pub fn pages_in_use(&self) -> usize {
        self.next.load(Ordering::Relaxed) - self.free.lock().len()
    }

    /// Empty pages waiting for reclamation.
    pub fn reclaimable_pages(&self) -> usize {
        self.empty.lock().len()
    }

    pub fn len(&self) -> usize {
        self.mapped.load(Ordering::Relaxed)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bytes held by allocated pages.
    pub fn bytes(&self) -> usize {
        self.next.load(Ordering::Relaxed) * PAGE_BYTES
    }
}

/// Key of a [`RequestTable`] entry: a chunk of some LOD level, or a page of
/// a page directory (marked by the top bit).
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct UseKey(pub u64);

const PAGE_TAG: u64 = 1 << 63;

impl UseKey {
    pub fn chunk(index: u64, level: u8) -> UseKey {
        debug_assert!(index < INDEX_LIMIT);
        UseKey(((level as u64) << 48) | index)
    }

    pub fn page(page: u32, level: u8) -> UseKey {
        UseKey(PAGE_TAG | ((level as u64) << 48) | page as u64)
    }

    pub fn is_page(self) -> bool {
        self.0 & PAGE_TAG != 0
    }

    pub fn level(self) -> u8 {
        ((self.0 >> 48) & 0x7f) as u8
    }

    pub fn index(self) -> u64 {
        self.0 & (INDEX_LIMIT - 1)
    }
}

pub const DEFAULT_TABLE_CAPACITY: usize = 2048;
pub const DEFAULT_MAX_PROBE: usize = 16;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum NoteResult {
    Recorded,
    Present,
    /// The probe bound was hit; the report is lost.
    Dropped,
}

const EMPTY: u64 = u64::MAX;

fn mix(mut x: u64) -> u64 {
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Fixed-size open-addressing set with bounded linear probing. Writers may
/// run concurrently; draining must not overlap with writers.
pub struct RequestTable {
    slots: Box<[AtomicU64]>,
    max_probe: usize,
    dropped: AtomicU64,
}

impl Default for RequestTable {
    fn default() -> Self {
        RequestTable::new(DEFAULT_TABLE_CAPACITY, DEFAULT_MAX_PROBE)
    }
}

impl RequestTable {
    pub fn new(capacity: usize, max_probe: usize) -> Self {
        assert!(capacity > 0 && max_probe > 0);
        RequestTable {
            slots: (0..capacity).map(|_| AtomicU64::new(EMPTY)).collect(),
            max_probe: max_probe.min(capacity),
            dropped: AtomicU64::new(0),
        }
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    pub fn max_probe(&self) -> usize {
        self.max_probe
    }

    /// Slot where probing for `key` starts.
    pub fn home(&self, key: UseKey) -> usize {
        (mix(key.0) % self.slots.len() as u64) as usize
    }

    pub fn note_use(&self, key: UseKey) -> NoteResult {
        assert!(key.0 != EMPTY, "reserved key");
        let start = self.home(key);
        for i in 0..self.max_probe {
            let slot = &self.slots[(start + i) % self.slots.len()];
            let mut cur = slot.load(Ordering::Acquire);
            if cur == EMPTY {
                match slot.compare_exchange(EMPTY, key.0, Ordering::AcqRel, Ordering::Acquire) {
                    Ok(_) => return NoteResult::Recorded,
                    Err(v) => cur = v,
                }
            }
            if cur == key.0 {
                return NoteResult::Present;
            }
        }
        self.dropped.fetch_add(1, Ordering::Relaxed);
        NoteResult::Dropped
    }

    /// Reports lost since the last drain.
    pub fn dropped(&self) -> u64 {
        self.dropped.load(Ordering::Relaxed)
    }

    /// Returns all recorded keys in slot order and clears the table.
    pub fn drain(&self) -> Vec<UseKey> {
        self.dropped.store(0, Ordering::Relaxed);
        self.slots
            .iter()
            .filter_map(|s| match s.swap(EMPTY, Ordering::AcqRel) {
                EMPTY => None,
                k => Some(UseKey(k)),
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.slots
            .iter()
            .filter(|s| s.load(Ordering::Relaxed) != EMPTY)
            .count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Manager-side least-recently-used order of chunks and pages, fed by
/// drained use reports.
#[derive(Default, Debug)]
pub struct UseLru {
    clock: u64,
    stamps: HashMap<UseKey, u64>,
    order: BTreeMap<u64, UseKey>,
}

impl UseLru {
    pub fn new() -> Self {
        UseLru::default()
    }

    /// Marks `keys` as used now, in the given order.
    pub fn bump(&mut self, keys: impl IntoIterator<Item = UseKey>) {
        for k in keys {
            self.clock += 1;
            if let Some(old) = self.stamps.insert(k, self.clock) {
                self.order.remove(&old);
            }
            self.order.insert(self.clock, k);
        }
    }

    pub fn remove(&mut self, key: UseKey) -> bool {
        match self.stamps.remove(&key) {
            Some(s) => {
                self.order.remove(&s);
                true
            }
            None => false,
        }
    }

    /// Least recently used first.
    pub fn oldest(&self) -> impl Iterator<Item = UseKey> + '_ {
        self.order.values().copied()
    }

    pub fn len(&self) -> usize {
        self.stamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stamps.is_empty()
    }
}
