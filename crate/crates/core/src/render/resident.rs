//! Bricks held resident for rendering, addressed through one page table per
//! source tensor and evicted in least-recently-used order.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::sync::Arc;

use crate::engine::{ChunkRef, Reclaimer};
use crate::page_table::{PageError, PageTableHierarchy, UseKey, UseLru};

const MAX_PAGES: usize = 64;

struct Source {
    pth: Arc<PageTableHierarchy>,
    slab: Vec<Option<(u64, ChunkRef)>>,
    free: Vec<u64>,
}

struct Inner {
    sources: Vec<Source>,
    lru: UseLru,
    jobs: usize,
    epoch: u64,
}

pub(crate) struct ResidentSet {
    inner: RefCell<Inner>,
    pub registered: Cell<bool>,
}

/// Read-only view handed to marching jobs.
pub(crate) struct Snapshot {
    tables: Vec<Arc<PageTableHierarchy>>,
    slabs: Vec<Vec<Option<(u64, ChunkRef)>>>,
    pinned: HashMap<UseKey, ChunkRef>,
}

impl Snapshot {
    pub fn get(&self, source: usize, index: u64) -> Option<&ChunkRef> {
        if let Some(c) = self.pinned.get(&UseKey::chunk(index, source as u8)) {
            return Some(c);
        }
        let h = self.tables[source].lookup(index)?;
        match self.slabs[source].get(h as usize)? {
            // a handle reused after the snapshot was taken points elsewhere
            Some((i, c)) if *i == index => Some(c),
            _ => None,
        }
    }
}

impl ResidentSet {
    pub fn new(sources: usize) -> Self {
        ResidentSet {
            inner: RefCell::new(Inner {
                sources: (0..sources)
                    .map(|_| Source {
                        pth: Arc::new(PageTableHierarchy::new(MAX_PAGES)),
                        slab: Vec::new(),
                        free: Vec::new(),
                    })
                    .collect(),
                lru: UseLru::new(),
                jobs: 0,
                epoch: 0,
            }),
            registered: Cell::new(false),
        }
    }

    pub fn contains(&self, key: UseKey) -> bool {
        let inner = self.inner.borrow();
        inner.sources[key.level() as usize].pth.lookup(key.index()).is_some()
    }

    pub fn insert(&self, key: UseKey, chunk: ChunkRef) {
        let mut inner = self.inner.borrow_mut();
        let s = key.level() as usize;
        let index = key.index();
        if inner.sources[s].pth.lookup(index).is_some() {
            inner.lru.bump([key]);
            return;
        }
        let src = &mut inner.sources[s];
        let handle = match src.free.pop() {
            Some(h) => h,
            None => {
                src.slab.push(None);
                src.slab.len() as u64 - 1
            }
        };
        loop {
            match inner.sources[s].pth.insert(index, handle) {
                Ok(_) => break,
                Err(PageError::ReclamationNeeded) => {
                    if inner.jobs == 0 && inner.sources[s].pth.reclaim_pages(inner.epoch) > 0 {
                        continue;
                    }
                    let victim = inner.lru.oldest().find(|k| k.level() as usize == s);
                    match victim {
                        Some(v) => inner.evict(v),
                        None => {
                            inner.sources[s].free.push(handle);
                            return;
                        }
                    }
                }
                Err(PageError::OutOfRange) => {
                    inner.sources[s].free.push(handle);
                    return;
                }
            }
        }
        inner.sources[s].slab[handle as usize] = Some((index, chunk));
        inner.lru.bump([key]);
    }

    pub fn bump(&self, keys: Vec<UseKey>) {
        let mut inner = self.inner.borrow_mut();
        let keys: Vec<UseKey> = keys
            .into_iter()
            .filter(|k| inner.sources[k.level() as usize].pth.lookup(k.index()).is_some())
            .collect();
        inner.lru.bump(keys);
    }

    /// `pinned` chunks are visible even if evicted in the meantime.
    pub fn snapshot(&self, pinned: Vec<(UseKey, ChunkRef)>) -> Snapshot {
        let inner = self.inner.borrow();
        Snapshot {
            tables: inner.sources.iter().map(|s| s.pth.clone()).collect(),
            slabs: inner.sources.iter().map(|s| s.slab.clone()).collect(),
            pinned: pinned.into_iter().collect(),
        }
    }

    pub fn begin_job(&self) {
        self.inner.borrow_mut().jobs += 1;
    }

    pub fn end_job(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.jobs -= 1;
        inner.epoch += 1;
        if inner.jobs == 0 {
            let e = inner.epoch;
            for s in &inner.sources {
                s.pth.reclaim_pages(e);
            }
        }
    }
}

impl Inner {
    fn evict(&mut self, key: UseKey) {
        let s = &mut self.sources[key.level() as usize];
        if let Some(h) = s.pth.remove(key.index(), self.epoch) {
            s.slab[h as usize] = None;
            s.free.push(h);
        }
        self.lru.remove(key);
    }
}

impl Reclaimer for ResidentSet {
    fn reclaim(&self, max: usize) -> usize {
        let Ok(mut inner) = self.inner.try_borrow_mut() else {
            return 0;
        };
        let victims: Vec<UseKey> = inner.lru.oldest().take(max).collect();
        for v in &victims {
            inner.evict(*v);
        }
        victims.len()
    }
}
