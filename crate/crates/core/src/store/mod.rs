//! Bounded chunk stores.
//!
//! A [`Store`] tracks every chunk payload it holds together with its size,
//! lifecycle state, LRU stamp and reference count. Allocation sizes are
//! quantized so that similar requests share a size bucket; freed allocations
//! are parked in the bucket cache and handed out again before new memory is
//! created. Entries whose reference count drops to zero enter the LRU queue
//! and are reclaimed by [`Store::garbage_collect`].
//!
//! The same bookkeeping backs RAM, device and disk stores; only the
//! [`Backing`] differs.

mod disk;

pub use disk::{DiskBacking, DiskStore, Extent, DISK_STORE_MAGIC, DISK_STORE_VERSION};

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::chunk::ChunkId;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Location {
    Ram,
    Device(u8),
    Disk,
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::Ram => f.write_str("ram"),
            Location::Device(i) => write!(f, "device{i}"),
            Location::Disk => f.write_str("disk"),
        }
    }
}

/// Lifecycle of a stored chunk. Ordered so that `Final > Preview > InFlight`.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DataState {
    InFlight,
    Preview,
    Final,
}

impl DataState {
    pub fn code(self) -> u8 {
        match self {
            DataState::InFlight => 0,
            DataState::Preview => 1,
            DataState::Final => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(DataState::InFlight),
            1 => Some(DataState::Preview),
            2 => Some(DataState::Final),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoreConfig {
    pub capacity_bytes: u64,
    pub gc_target_fraction: f64,
    pub quantization_mantissa_bits: u32,
}

impl StoreConfig {
    pub fn with_capacity(capacity_bytes: u64) -> Self {
        StoreConfig {
            capacity_bytes,
            ..Default::default()
        }
    }

    pub fn quantize(&self, requested: u64) -> u64 {
        quantize_size_bits(requested, self.quantization_mantissa_bits)
    }

    pub fn gc_target_bytes(&self) -> u64 {
        (self.gc_target_fraction * self.capacity_bytes as f64).ceil() as u64
    }
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig {
            capacity_bytes: 1 << 30,
            gc_target_fraction: 0.10,
            quantization_mantissa_bits: 8,
        }
    }
}

/// Rounds `requested` up to a multiple of `2^max(0, floor(log2 requested) - 8)`,
/// i.e. to the next 1/256th step of its magnitude.
pub fn quantize_size(requested: u64) -> u64 {
    quantize_size_bits(requested, 8)
}

pub fn quantize_size_bits(requested: u64, mantissa_bits: u32) -> u64 {
    let requested = requested.max(1);
    let log2 = 63 - requested.leading_zeros();
    let shift = log2.saturating_sub(mantissa_bits);
    let granularity = 1u64 << shift;
    requested.div_ceil(granularity) * granularity
}

/// Global monotone counter for LRU stamps, shared by all stores of a runtime.
#[derive(Clone, Default)]
pub struct Clock(Arc<AtomicU64>);

impl Clock {
    pub fn tick(&self) -> u64 {
        self.0.fetch_add(1, Ordering::Relaxed) + 1
    }
}

/// How a store obtains and returns the memory behind its allocations.
pub trait Backing {
    type Buf: Send + Sync + 'static;

    fn create(&mut self, size: u64, len: usize) -> Self::Buf;
    /// Prepares a recycled buffer for a new allocation of `len` bytes.
    fn reuse(&mut self, buf: &mut Self::Buf, len: usize);
    fn destroy(&mut self, size: u64, buf: Self::Buf);
}

/// Host memory; buffers are zero-filled on allocation.
#[derive(Default)]
pub struct MemoryBacking;

impl Backing for MemoryBacking {
    type Buf = Vec<u8>;

    fn create(&mut self, size: u64, len: usize) -> Vec<u8> {
        let mut v = Vec::with_capacity(size as usize);
        v.resize(len, 0);
        v
    }

    fn reuse(&mut self, buf: &mut Vec<u8>, len: usize) {
        buf.clear();
        buf.resize(len, 0);
    }

    fn destroy(&mut self, _size: u64, _buf: Vec<u8>) {}
}

/// An allocation owned by a task until it is inserted or freed.
pub struct Allocation<T> {
    size: u64,
    pub buf: T,
}

impl<T> Allocation<T> {
    /// Quantized size charged against the store.
    pub fn size(&self) -> u64 {
        self.size
    }
}

impl<T> std::ops::Deref for Allocation<T> {
    type Target = T;
    fn deref(&self) -> &T {
        &self.buf
    }
}

impl<T> std::ops::DerefMut for Allocation<T> {
    fn deref_mut(&mut self) -> &mut T {
        &mut self.buf
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AllocError {
    /// The store is full; run garbage collection and retry.
    ReclamationNeeded,
    /// The request can never be satisfied by this store.
    TooLarge { requested: u64, capacity: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StoreEntry {
    pub id: ChunkId,
    pub size_bytes: u64,
    pub state: DataState,
    pub lru_stamp: u64,
    pub ref_count: u32,
    pub epoch: u64,
    pub generation: u64,
}

struct Slot<T> {
    meta: StoreEntry,
    payload: Arc<T>,
}

/// A counted read reference to a stored payload. Must be handed back via
/// [`Store::release`].
pub struct EntryRef<T> {
    pub id: ChunkId,
    pub generation: u64,
    pub state: DataState,
    pub epoch: u64,
    pub payload: Arc<T>,
}

impl<T> Clone for EntryRef<T> {
    fn clone(&self) -> Self {
        EntryRef {
            id: self.id,
            generation: self.generation,
            state: self.state,
            epoch: self.epoch,
            payload: self.payload.clone(),
        }
    }
}

pub enum StoreLookup<T> {
    Hit(EntryRef<T>),
    /// Present, but in a state below the one requested.
    Insufficient(DataState),
    Miss,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StoreStats {
    pub hits: u64,
    pub misses: u64,
    pub inserts: u64,
    pub evictions: u64,
    pub evicted_bytes: u64,
    pub bucket_hits: u64,
    pub fresh_allocations: u64,
    pub bucket_flushes: u64,
    pub gc_runs: u64,
}

pub struct Store<B: Backing> {
    location: Location,
    config: StoreConfig,
    backing: B,
    entries: HashMap<ChunkId, Slot<B::Buf>>,
    zombies: HashMap<u64, Slot<B::Buf>>,
    lru: BTreeMap<u64, ChunkId>,
    buckets: HashMap<u64, Vec<B::Buf>>,
    bucket_bytes: u64,
    used: u64,
    high_water: u64,
    clock: Clock,
    next_generation: u64,
    current_epoch: u64,
    completed_epoch: u64,
    stats: StoreStats,
}

pub type MemoryStore = Store<MemoryBacking>;

impl MemoryStore {
    pub fn memory(location: Location, config: StoreConfig, clock: Clock) -> Self {
        Store::new(location, config, MemoryBacking, clock)
    }
}

impl<B: Backing> Store<B> {
    pub fn new(location: Location, config: StoreConfig, backing: B, clock: Clock) -> Self {
        Store {
            location,
            config,
            backing,
            entries: HashMap::new(),
            zombies: HashMap::new(),
            lru: BTreeMap::new(),
            buckets: HashMap::new(),
            bucket_bytes: 0,
            used: 0,
            high_water: 0,
            clock,
            next_generation: 1,
            current_epoch: 1,
            completed_epoch: 0,
            stats: StoreStats::default(),
        }
    }

    pub fn location(&self) -> Location {
        self.location
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    pub fn capacity(&self) -> u64 {
        self.config.capacity_bytes
    }

    /// Bytes charged against capacity: entries, outstanding allocations,
    /// reservations and the bucket cache.
    pub fn used_bytes(&self) -> u64 {
        self.used
    }

    pub fn high_water_bytes(&self) -> u64 {
        self.high_water
    }

    pub fn bucket_bytes(&self) -> u64 {
        self.bucket_bytes
    }

    pub fn stats(&self) -> &StoreStats {
        &self.stats
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn backing(&self) -> &B {
        &self.backing
    }

    pub fn backing_mut(&mut self) -> &mut B {
        &mut self.backing
    }

    pub fn entry(&self, id: &ChunkId) -> Option<&StoreEntry> {
        self.entries.get(id).map(|s| &s.meta)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&StoreEntry, &Arc<B::Buf>)> {
        self.entries.values().map(|s| (&s.meta, &s.payload))
    }

    /// Ids in the LRU queue, oldest first.
    pub fn lru_order(&self) -> Vec<ChunkId> {
        self.lru.values().copied().collect()
    }

    pub fn current_epoch(&self) -> u64 {
        self.current_epoch
    }

    pub fn completed_epoch(&self) -> u64 {
        self.completed_epoch
    }

    pub fn is_visible(&self, epoch: u64) -> bool {
        epoch <= self.completed_epoch
    }

    /// Marks everything submitted so far as complete and opens a new epoch.
    pub fn complete_epoch(&mut self) {
        self.completed_epoch = self.current_epoch;
        self.current_epoch += 1;
    }

    fn charge(&mut self, size: u64) {
        self.used += size;
        self.high_water = self.high_water.max(self.used);
    }

    pub fn allocate(&mut self, len: usize) -> Result<Allocation<B::Buf>, AllocError> {
        let size = self.config.quantize(len as u64);
        if size > self.config.capacity_bytes {
            return Err(AllocError::TooLarge {
                requested: size,
                capacity: self.config.capacity_bytes,
            });
        }
        if let Some(mut buf) = self.buckets.get_mut(&size).and_then(|b| b.pop()) {
            self.bucket_bytes -= size;
            self.backing.reuse(&mut buf, len);
            self.stats.bucket_hits += 1;
            return Ok(Allocation { size, buf });
        }
        if self.used + size > self.config.capacity_bytes {
            return Err(AllocError::ReclamationNeeded);
        }
        self.charge(size);
        self.stats.fresh_allocations += 1;
        let buf = self.backing.create(size, len);
        Ok(Allocation { size, buf })
    }

    /// Returns an allocation to the size-bucket cache.
    pub fn free(&mut self, alloc: Allocation<B::Buf>) {
        self.bucket_bytes += alloc.size;
        self.buckets.entry(alloc.size).or_default().push(alloc.buf);
    }

    /// Charges `len` bytes of non-chunk memory (e.g. page table pages).
    pub fn reserve(&mut self, len: u64) -> Result<u64, AllocError> {
        let size = self.config.quantize(len);
        if size > self.config.capacity_bytes {
            return Err(AllocError::TooLarge {
                requested: size,
                capacity: self.config.capacity_bytes,
            });
        }
        if self.used + size > self.config.capacity_bytes {
            return Err(AllocError::ReclamationNeeded);
        }
        self.charge(size);
        Ok(size)
    }

    pub fn unreserve(&mut self, size: u64) {
        self.used -= size;
    }

    pub fn flush_buckets(&mut self) -> u64 {
        let freed = self.bucket_bytes;
        for (size, bufs) in self.buckets.drain() {
            for b in bufs {
                self.backing.destroy(size, b);
            }
        }
        self.used -= freed;
        self.bucket_bytes = 0;
        if freed > 0 {
            self.stats.bucket_flushes += 1;
        }
        freed
    }

    fn destroy_slot(&mut self, slot: Slot<B::Buf>) {
        self.used -= slot.meta.size_bytes;
        match Arc::try_unwrap(slot.payload) {
            Ok(buf) => self.backing.destroy(slot.meta.size_bytes, buf),
            // still shared by a reader outside the store's counting; the
            // memory goes away with the last clone
            Err(_) => {}
        }
    }

    fn retire(&mut self, slot: Slot<B::Buf>) {
        if slot.meta.ref_count > 0 || Arc::strong_count(&slot.payload) > 1 {
            self.zombies.insert(slot.meta.generation, slot);
        } else {
            self.destroy_slot(slot);
        }
    }

    /// Inserts a payload. A `Final` entry is never replaced; anything else is
    /// superseded by the new payload. Returns the entry now visible for `id`.
    pub fn insert(&mut self, id: ChunkId, alloc: Allocation<B::Buf>, state: DataState) -> StoreEntry {
        if let Some(existing) = self.entries.get(&id) {
            if existing.meta.state == DataState::Final || state < existing.meta.state {
                let meta = existing.meta.clone();
                self.free(alloc);
                return meta;
            }
            let old = self.entries.remove(&id).unwrap();
            if old.meta.ref_count == 0 {
                self.lru.remove(&old.meta.lru_stamp);
            }
            self.retire(old);
        }
        let stamp = self.clock.tick();
        let generation = self.next_generation;
        self.next_generation += 1;
        let meta = StoreEntry {
            id,
            size_bytes: alloc.size,
            state,
            lru_stamp: stamp,
            ref_count: 0,
            epoch: if matches!(self.location, Location::Device(_)) {
                self.current_epoch
            } else {
                0
            },
            generation,
        };
        self.lru.insert(stamp, id);
        self.entries.insert(
            id,
            Slot {
                meta: meta.clone(),
                payload: Arc::new(alloc.buf),
            },
        );
        self.stats.inserts += 1;
        meta
    }

    /// Changes the state of an entry (e.g. an in-flight disk write that completed).
    pub fn set_state(&mut self, id: &ChunkId, state: DataState) {
        if let Some(s) = self.entries.get_mut(id) {
            s.meta.state = state;
        }
    }

    /// Looks up `id` wanting at least `wanted`; a hit takes a reference.
    pub fn lookup(&mut self, id: &ChunkId, wanted: DataState) -> StoreLookup<B::Buf> {
        let Some(slot) = self.entries.get_mut(id) else {
            self.stats.misses += 1;
            return StoreLookup::Miss;
        };
        if slot.meta.state == DataState::InFlight || slot.meta.state < wanted {
            self.stats.misses += 1;
            return StoreLookup::Insufficient(slot.meta.state);
        }
        if slot.meta.ref_count == 0 {
            self.lru.remove(&slot.meta.lru_stamp);
        }
        slot.meta.ref_count += 1;
        slot.meta.lru_stamp = self.clock.tick();
        self.stats.hits += 1;
        StoreLookup::Hit(EntryRef {
            id: *id,
            generation: slot.meta.generation,
            state: slot.meta.state,
            epoch: slot.meta.epoch,
            payload: slot.payload.clone(),
        })
    }

    /// Whether a lookup wanting `wanted` would hit, without taking a reference.
    pub fn contains(&self, id: &ChunkId, wanted: DataState) -> bool {
        self.entries
            .get(id)
            .is_some_and(|s| s.meta.state != DataState::InFlight && s.meta.state >= wanted)
    }

    /// Drops one reference taken by [`Store::lookup`].
    pub fn release(&mut self, id: &ChunkId, generation: u64) {
        if let Some(slot) = self.entries.get_mut(id) {
            if slot.meta.generation == generation {
                debug_assert!(slot.meta.ref_count > 0);
                slot.meta.ref_count -= 1;
                if slot.meta.ref_count == 0 {
                    let stamp = self.clock.tick();
                    slot.meta.lru_stamp = stamp;
                    self.lru.insert(stamp, *id);
                }
                return;
            }
        }
        if let Some(z) = self.zombies.get_mut(&generation) {
            z.meta.ref_count -= 1;
            if z.meta.ref_count == 0 {
                let z = self.zombies.remove(&generation).unwrap();
                self.retire(z);
            }
        }
    }

    /// Marks an entry as recently used without taking a reference.
    pub fn touch(&mut self, id: &ChunkId) {
        if let Some(slot) = self.entries.get_mut(id) {
            if slot.meta.ref_count == 0 {
                self.lru.remove(&slot.meta.lru_stamp);
                let stamp = self.clock.tick();
                slot.meta.lru_stamp = stamp;
                self.lru.insert(stamp, *id);
            }
        }
    }

    /// Pops the LRU queue, freeing unreferenced entries until the collection
    /// target is reached. Stops at the first entry whose epoch has not
    /// completed. Flushes the bucket cache if the target was missed.
    pub fn garbage_collect(&mut self) -> u64 {
        self.stats.gc_runs += 1;
        let target = self.config.gc_target_bytes();
        let mut freed = 0;

        let reaped: Vec<u64> = self
            .zombies
            .iter()
            .filter(|(_, z)| z.meta.ref_count == 0 && Arc::strong_count(&z.payload) == 1)
            .map(|(g, _)| *g)
            .collect();
        for g in reaped {
            let z = self.zombies.remove(&g).unwrap();
            freed += z.meta.size_bytes;
            self.destroy_slot(z);
        }

        let mut victims = Vec::new();
        for (&stamp, id) in &self.lru {
            if freed >= target {
                break;
            }
            let slot = &self.entries[id];
            if slot.meta.epoch > self.completed_epoch {
                break;
            }
            if Arc::strong_count(&slot.payload) > 1 {
                // a job still reads this payload
                continue;
            }
            freed += slot.meta.size_bytes;
            victims.push((stamp, *id));
        }
        for (stamp, id) in victims {
            self.lru.remove(&stamp);
            let slot = self.entries.remove(&id).unwrap();
            self.stats.evictions += 1;
            self.stats.evicted_bytes += slot.meta.size_bytes;
            self.destroy_slot(slot);
        }
        if freed < target {
            self.flush_buckets();
        }
        freed
    }

    /// Removes an unreferenced entry outright.
    pub fn evict(&mut self, id: &ChunkId) -> bool {
        match self.entries.get(id) {
            Some(s) if s.meta.ref_count == 0 && Arc::strong_count(&s.payload) == 1 => {
                let slot = self.entries.remove(id).unwrap();
                self.lru.remove(&slot.meta.lru_stamp);
                self.destroy_slot(slot);
                true
            }
            _ => false,
        }
    }

    /// Grants exclusive write access to `entry`'s payload if the caller holds
    /// the only reference. The entry leaves the store and becomes an
    /// outstanding allocation.
    pub fn try_replace_inplace(
        &mut self,
        entry: EntryRef<B::Buf>,
    ) -> Result<Allocation<B::Buf>, EntryRef<B::Buf>> {
        let exclusive = self.entries.get(&entry.id).is_some_and(|s| {
            s.meta.generation == entry.generation
                && s.meta.ref_count == 1
                && Arc::strong_count(&s.payload) == 2
        });
        if !exclusive {
            return Err(entry);
        }
        let slot = self.entries.remove(&entry.id).unwrap();
        drop(entry);
        let size = slot.meta.size_bytes;
        match Arc::try_unwrap(slot.payload) {
            Ok(buf) => Ok(Allocation { size, buf }),
            Err(_) => unreachable!("strong count checked above"),
        }
    }

    /// Sum of entry sizes currently referenced (not reclaimable).
    pub fn pinned_bytes(&self) -> u64 {
        self.entries
            .values()
            .filter(|s| s.meta.ref_count > 0 || Arc::strong_count(&s.payload) > 1)
            .map(|s| s.meta.size_bytes)
            .sum()
    }

    /// Sum of entry sizes that are reclaimable right now.
    pub fn reclaimable_bytes(&self) -> u64 {
        self.lru
            .values()
            .map(|id| &self.entries[id])
            .filter(|s| Arc::strong_count(&s.payload) == 1)
            .map(|s| s.meta.size_bytes)
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chunk::{chunk_id, operator_id};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn ids(n: usize) -> Vec<ChunkId> {
        let op = operator_id("t", b"", &[]);
        (0..n).map(|i| chunk_id(op, &[i as u64])).collect()
    }

    fn store(capacity: u64) -> MemoryStore {
        MemoryStore::memory(
            Location::Ram,
            StoreConfig::with_capacity(capacity),
            Clock::default(),
        )
    }

    fn put(s: &mut MemoryStore, id: ChunkId, len: usize, state: DataState) -> StoreEntry {
        let a = s.allocate(len).unwrap();
        s.insert(id, a, state)
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize_size(1), 1);
        assert_eq!(quantize_size(1027), 1028);
        assert_eq!(quantize_size(255), 255);
        assert_eq!(quantize_size(513), 514);
        assert_eq!(quantize_size(4096), 4096);
    }

    #[test]
    fn quantize_bounds_over_random_sizes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100_000 {
            let s: u64 = rng.gen_range(1..1u64 << 40);
            let q = quantize_size(s);
            assert!(q >= s);
            assert!(q - s <= s.div_ceil(256));
            assert!((q as f64) / (s as f64) <= 1.0 + 1.0 / 256.0 + 1.0 / s as f64);
            if s >= 256 {
                assert!(q as u128 * 256 <= s as u128 * 257, "{s} -> {q}");
            }
            let g = 1u64 << (63 - s.leading_zeros()).saturating_sub(8);
            assert_eq!(q % g, 0);
        }
    }

    #[test]
    fn freed_allocation_is_reused() {
        let mut s = store(1 << 20);
        let a = s.allocate(4096).unwrap();
        let ptr = a.buf.as_ptr();
        s.free(a);
        let b = s.allocate(4096).unwrap();
        assert_eq!(b.buf.as_ptr(), ptr);
        assert_eq!(s.stats().bucket_hits, 1);
    }

    #[test]
    fn allocation_failures() {
        let mut s = store(100);
        assert!(matches!(
            s.allocate(101),
            Err(AllocError::TooLarge { .. })
        ));
        let _a = s.allocate(60).unwrap();
        let _b = s.allocate(40).unwrap();
        assert_eq!(s.allocate(1).err(), Some(AllocError::ReclamationNeeded));
    }

    #[test]
    fn gc_frees_oldest_until_target() {
        let mut s = store(100);
        let ids = ids(20);
        for id in &ids {
            put(&mut s, *id, 5, DataState::Final);
        }
        assert_eq!(s.used_bytes(), 100);
        let mut oracle: Vec<(u64, ChunkId)> = ids
            .iter()
            .map(|id| (s.entry(id).unwrap().lru_stamp, *id))
            .collect();
        oracle.sort();
        assert_eq!(s.garbage_collect(), 10);
        for (_, id) in &oracle[..2] {
            assert!(s.entry(id).is_none());
        }
        for (_, id) in &oracle[2..] {
            assert!(s.entry(id).is_some());
        }
    }

    #[test]
    fn gc_with_everything_referenced_flushes_buckets() {
        let mut s = store(100);
        let ids = ids(2);
        put(&mut s, ids[0], 40, DataState::Final);
        let StoreLookup::Hit(_r) = s.lookup(&ids[0], DataState::Final) else {
            panic!()
        };
        let a = s.allocate(30).unwrap();
        s.free(a);
        assert_eq!(s.used_bytes(), 70);
        assert_eq!(s.garbage_collect(), 0);
        assert_eq!(s.bucket_bytes(), 0);
        assert_eq!(s.used_bytes(), 40);
    }

    #[test]
    fn device_gc_stops_at_incomplete_epoch() {
        let mut s = MemoryStore::memory(
            Location::Device(0),
            StoreConfig::with_capacity(100),
            Clock::default(),
        );
        let ids = ids(4);
        put(&mut s, ids[0], 20, DataState::Final);
        s.complete_epoch();
        // ids[0] is now visible; the rest belong to the open epoch
        for id in &ids[1..] {
            put(&mut s, *id, 20, DataState::Final);
        }
        // make ids[1] the oldest by re-stamping ids[0]
        s.touch(&ids[0]);
        assert_eq!(s.garbage_collect(), 0);
        assert_eq!(s.len(), 4);
        s.complete_epoch();
        assert_eq!(s.garbage_collect(), 20);
    }

    #[test]
    fn lookup_semantics() {
        let mut s = store(1000);
        let ids = ids(3);
        assert!(matches!(s.lookup(&ids[0], DataState::Final), StoreLookup::Miss));
        put(&mut s, ids[0], 10, DataState::Preview);
        assert!(matches!(
            s.lookup(&ids[0], DataState::Final),
            StoreLookup::Insufficient(DataState::Preview)
        ));
        let StoreLookup::Hit(r) = s.lookup(&ids[0], DataState::Preview) else {
            panic!()
        };
        assert_eq!(r.state, DataState::Preview);
        s.release(&r.id, r.generation);
        put(&mut s, ids[0], 10, DataState::Final);
        assert!(matches!(s.lookup(&ids[0], DataState::Final), StoreLookup::Hit(_)));
    }

    #[test]
    fn duplicate_final_insert_keeps_first() {
        let mut s = store(1000);
        let id = ids(1)[0];
        let mut a = s.allocate(4).unwrap();
        a.buf.copy_from_slice(&[1, 2, 3, 4]);
        let first = s.insert(id, a, DataState::Final);
        let mut b = s.allocate(4).unwrap();
        b.buf.copy_from_slice(&[9, 9, 9, 9]);
        let second = s.insert(id, b, DataState::Final);
        assert_eq!(first.generation, second.generation);
        assert_eq!(s.len(), 1);
        let StoreLookup::Hit(r) = s.lookup(&id, DataState::Final) else {
            panic!()
        };
        assert_eq!(&r.payload[..], &[1, 2, 3, 4]);
    }

    #[test]
    fn final_replaces_preview_even_while_read() {
        let mut s = store(1000);
        let id = ids(1)[0];
        put(&mut s, id, 8, DataState::Preview);
        let StoreLookup::Hit(r) = s.lookup(&id, DataState::Preview) else {
            panic!()
        };
        put(&mut s, id, 8, DataState::Final);
        assert_eq!(s.entry(&id).unwrap().state, DataState::Final);
        // the preview reader's memory stays charged until released
        assert_eq!(s.used_bytes(), 16);
        let StoreLookup::Hit(_fin) = s.lookup(&id, DataState::Final) else {
            panic!()
        };
        s.release(&r.id, r.generation);
        drop(r);
        assert_eq!(s.garbage_collect(), 8);
        assert_eq!(s.used_bytes(), 8);
    }

    #[test]
    fn in_place_grant_requires_exclusive_reference() {
        let mut s = store(1000);
        let id = ids(1)[0];
        put(&mut s, id, 8, DataState::Final);
        let StoreLookup::Hit(r1) = s.lookup(&id, DataState::Final) else {
            panic!()
        };
        let StoreLookup::Hit(r2) = s.lookup(&id, DataState::Final) else {
            panic!()
        };
        let r1 = s.try_replace_inplace(r1).err().expect("two readers");
        s.release(&r2.id, r2.generation);
        drop(r2);
        let alloc = s.try_replace_inplace(r1).ok().expect("single reader");
        assert_eq!(alloc.size(), 8);
        assert!(s.entry(&id).is_none());
        assert_eq!(s.used_bytes(), 8);
    }

    #[derive(Debug, Clone)]
    enum Op {
        Insert(usize, usize),
        Lookup(usize),
        Gc,
    }

    fn op_strategy() -> impl Strategy<Value = Op> {
        prop_oneof![
            4 => (0..64usize, 1..40usize).prop_map(|(i, l)| Op::Insert(i, l)),
            4 => (0..64usize).prop_map(Op::Lookup),
            1 => Just(Op::Gc),
        ]
    }

    proptest! {
        // With all references released immediately, garbage collection evicts
        // exactly the least recently stamped prefix that meets the target.
        #[test]
        fn gc_matches_lru_oracle(ops in prop::collection::vec(op_strategy(), 1..300)) {
            let ids = ids(64);
            let mut s = store(400);
            let mut last_use: HashMap<ChunkId, u64> = HashMap::new();
            let mut t = 0u64;
            for op in ops {
                t += 1;
                match op {
                    Op::Insert(i, len) => {
                        let a = loop {
                            match s.allocate(len) {
                                Ok(a) => break a,
                                Err(AllocError::ReclamationNeeded) => {
                                    let before: Vec<ChunkId> = last_use.keys().copied().collect();
                                    let mut order: Vec<(u64, ChunkId)> =
                                        last_use.iter().map(|(k, v)| (*v, *k)).collect();
                                    order.sort();
                                    let mut need = s.config().gc_target_bytes();
                                    let mut expected = Vec::new();
                                    for (_, id) in order {
                                        if need == 0 { break; }
                                        let sz = s.entry(&id).unwrap().size_bytes;
                                        expected.push(id);
                                        need = need.saturating_sub(sz);
                                    }
                                    s.garbage_collect();
                                    for id in before {
                                        prop_assert_eq!(s.entry(&id).is_none(), expected.contains(&id));
                                        if s.entry(&id).is_none() { last_use.remove(&id); }
                                    }
                                }
                                Err(e) => panic!("{e:?}"),
                            }
                        };
                        let e = s.insert(ids[i], a, DataState::Final);
                        if e.lru_stamp >= t || !last_use.contains_key(&ids[i]) {
                            last_use.entry(ids[i]).or_insert(t);
                        }
                    }
                    Op::Lookup(i) => {
                        if let StoreLookup::Hit(r) = s.lookup(&ids[i], DataState::Final) {
                            s.release(&r.id, r.generation);
                            last_use.insert(ids[i], t);
                        }
                    }
                    Op::Gc => {
                        s.garbage_collect();
                        last_use.retain(|k, _| s.entry(k).is_some());
                    }
                }
                prop_assert!(s.used_bytes() <= s.capacity());
            }
        }
    }
}
