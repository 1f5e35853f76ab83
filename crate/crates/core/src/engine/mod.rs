//! Pull-based evaluation of the compute graph.
//!
//! A [`Runtime`] owns the chunk stores, a worker pool and a cooperative task
//! scheduler running on the calling thread (the manager). Requesting chunks
//! of a node spawns tasks for the missing ones; tasks are futures that
//! suspend at request points (chunk requests, worker jobs, allocations,
//! barriers) and are resumed by the manager once the request is fulfilled.
//! Heavy work runs in worker jobs; task bodies only orchestrate.

mod context;
mod pool;
pub mod sched;

pub use context::{ChunkRef, Reclaimer, TaskContext};
pub use sched::{schedule_next, Candidate, PriorityClass};

use std::any::Any;
use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::path::PathBuf;
use std::rc::{Rc, Weak};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::task::{Context, Poll, Waker};

use crossbeam_channel::{Receiver, Sender};

use crate::chunk::{copy_box, ChunkId, OperatorId};
use crate::error::{Error, Result};
use crate::graph::{Node, TaskFuture};
use crate::store::{
    AllocError, Allocation, Clock, DataState, DiskStore, EntryRef, Location, MemoryStore,
    StoreConfig, StoreLookup,
};
use context::{ChunkReq, Slot, Waiter};
use pool::{JobOutput, WorkerPool};

#[derive(Clone, Debug)]
pub struct EngineConfig {
    pub max_requests_per_task: usize,
    pub max_active_tasks_per_operator: usize,
    pub worker_pool_size: usize,
    pub ram: StoreConfig,
    pub devices: Vec<StoreConfig>,
    /// Backing file and configuration of the persistent disk store.
    pub disk: Option<(PathBuf, StoreConfig)>,
    /// Evaluate chains of pointwise operators in one task without
    /// materializing intermediate chunks.
    pub fusion: bool,
    /// Allow operators to overwrite input chunks nobody else references.
    pub inplace: bool,
    /// A resolve fails with [`Error::MemoryExhausted`] once a single chunk
    /// has been scheduled for computation this many times in it, which
    /// happens when the store thrashes. 0 disables the check.
    pub max_recomputations: u32,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            max_requests_per_task: 32,
            max_active_tasks_per_operator: 4,
            worker_pool_size: std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1),
            ram: StoreConfig::with_capacity(1 << 30),
            devices: vec![StoreConfig::with_capacity(1 << 30)],
            disk: None,
            fusion: true,
            inplace: true,
            max_recomputations: 64,
        }
    }
}

impl EngineConfig {
    pub fn with_ram_capacity(mut self, bytes: u64) -> Self {
        self.ram.capacity_bytes = bytes;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_requests_per_task == 0
            || self.max_active_tasks_per_operator == 0
            || self.worker_pool_size == 0
        {
            return Err(Error::invalid("engine limits must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct EngineStats {
    pub tasks_spawned: HashMap<OperatorId, u64>,
    pub chunks_published: HashMap<OperatorId, u64>,
    pub max_active_tasks: HashMap<OperatorId, usize>,
    pub deferred_batches: u64,
    pub transfers: u64,
    pub barrier_actions: u64,
    pub jobs: u64,
    pub manager_iterations: u64,
    pub bytes_read: u64,
    pub disk_writes: u64,
    pub inplace_grants: u64,
}

impl EngineStats {
    pub fn spawned(&self, node: &Node) -> u64 {
        self.tasks_spawned.get(&node.id()).copied().unwrap_or(0)
    }

    pub fn published(&self, node: &Node) -> u64 {
        self.chunks_published.get(&node.id()).copied().unwrap_or(0)
    }
}

pub(crate) enum Event {
    Release {
        location: Location,
        id: ChunkId,
        generation: u64,
    },
    JobDone {
        job: u64,
        result: JobOutput,
    },
    DiskWriteDone {
        id: ChunkId,
        ok: bool,
    },
}

pub(crate) type TaskId = u64;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
enum TaskKind {
    Root,
    Compute,
    Transfer,
}

pub(crate) struct TaskRecord {
    kind: TaskKind,
    node: Option<Node>,
    location: Location,
    batch: Vec<Vec<u64>>,
    batch_ids: Vec<ChunkId>,
    published: Vec<bool>,
    depth: u32,
    allowed: Rc<HashSet<OperatorId>>,
    saw_preview: bool,
}

struct PendingAlloc {
    task: TaskId,
    location: Location,
    len: usize,
    slot: Slot<Result<Allocation<Vec<u8>>>>,
}

pub(crate) struct Stores {
    pub ram: MemoryStore,
    pub devices: Vec<MemoryStore>,
    pub disk: Option<DiskStore>,
}

impl Stores {
    pub fn memory(&mut self, loc: Location) -> Result<&mut MemoryStore> {
        match loc {
            Location::Ram => Ok(&mut self.ram),
            Location::Device(i) => self
                .devices
                .get_mut(i as usize)
                .ok_or_else(|| Error::invalid(format!("no such device {i}"))),
            Location::Disk => Err(Error::invalid("chunks cannot be requested at the disk location")),
        }
    }

    fn memory_ref(&self, loc: Location) -> Option<&MemoryStore> {
        match loc {
            Location::Ram => Some(&self.ram),
            Location::Device(i) => self.devices.get(i as usize),
            Location::Disk => None,
        }
    }

    fn locations(&self) -> Vec<Location> {
        let mut v = vec![Location::Ram];
        v.extend((0..self.devices.len()).map(|i| Location::Device(i as u8)));
        if self.disk.is_some() {
            v.push(Location::Disk);
        }
        v
    }

    /// Another location holding a Final copy of `id`.
    fn final_elsewhere(&self, id: &ChunkId, except: Location) -> Option<Location> {
        self.locations().into_iter().find(|&l| {
            l != except
                && match l {
                    Location::Disk => self
                        .disk
                        .as_ref()
                        .is_some_and(|d| d.store().contains(id, DataState::Final)),
                    _ => self
                        .memory_ref(l)
                        .is_some_and(|s| s.contains(id, DataState::Final)),
                }
        })
    }
}

pub(crate) struct State {
    pub stores: Stores,
    tasks: BTreeMap<TaskId, TaskRecord>,
    runnable: BTreeSet<TaskId>,
    next_task: TaskId,
    waiters: HashMap<(ChunkId, Location), Vec<Waiter>>,
    inflight: HashSet<(ChunkId, Location)>,
    queues: BTreeMap<OperatorId, (Node, VecDeque<(Vec<u64>, Location)>)>,
    active: HashMap<OperatorId, usize>,
    jobs: HashMap<u64, (TaskId, Slot<JobOutput>)>,
    next_job: u64,
    allocs: Vec<PendingAlloc>,
    barriers: BTreeMap<Location, Vec<(TaskId, Slot<()>)>>,
    barrier_fills: BTreeMap<Location, Vec<(Waiter, ChunkRef)>>,
    disk_writes_in_flight: usize,
    transfers: Vec<(Node, Vec<u64>, Location)>,
    depths: HashMap<OperatorId, u32>,
    computed: HashMap<ChunkId, u32>,
    allowed_cache: HashMap<OperatorId, Rc<HashSet<OperatorId>>>,
    state_cache: HashMap<(OperatorId, u64), Rc<dyn Any>>,
    reclaimers: Vec<Weak<dyn Reclaimer>>,
    stats: EngineStats,
    error: Option<Error>,
    tx: Sender<Event>,
}

pub(crate) struct Shared {
    pub state: RefCell<State>,
    futures: RefCell<HashMap<TaskId, TaskFuture>>,
    rx: Receiver<Event>,
    pool: WorkerPool,
    pub config: EngineConfig,
    polling: Cell<bool>,
    pub bytes_read: Arc<AtomicU64>,
}

/// The evaluation engine. Not `Send`: create it on the thread that drives it.
pub struct Runtime {
    shared: Rc<Shared>,
}

impl Runtime {
    pub fn new(config: EngineConfig) -> Result<Runtime> {
        config.validate()?;
        let clock = Clock::default();
        let ram = MemoryStore::memory(Location::Ram, config.ram.clone(), clock.clone());
        let devices = config
            .devices
            .iter()
            .enumerate()
            .map(|(i, c)| MemoryStore::memory(Location::Device(i as u8), c.clone(), clock.clone()))
            .collect();
        let disk = match &config.disk {
            Some((path, c)) => Some(DiskStore::open(path, c.clone(), clock.clone())?),
            None => None,
        };
        let (tx, rx) = crossbeam_channel::unbounded();
        let state = State {
            stores: Stores { ram, devices, disk },
            tasks: BTreeMap::new(),
            runnable: BTreeSet::new(),
            next_task: 1,
            waiters: HashMap::new(),
            inflight: HashSet::new(),
            queues: BTreeMap::new(),
            active: HashMap::new(),
            jobs: HashMap::new(),
            next_job: 1,
            allocs: Vec::new(),
            barriers: BTreeMap::new(),
            barrier_fills: BTreeMap::new(),
            disk_writes_in_flight: 0,
            transfers: Vec::new(),
            depths: HashMap::new(),
            computed: HashMap::new(),
            allowed_cache: HashMap::new(),
            state_cache: HashMap::new(),
            reclaimers: Vec::new(),
            stats: EngineStats::default(),
            error: None,
            tx,
        };
        Ok(Runtime {
            shared: Rc::new(Shared {
                state: RefCell::new(state),
                futures: RefCell::new(HashMap::new()),
                rx,
                pool: WorkerPool::new(config.worker_pool_size)?,
                config,
                polling: Cell::new(false),
                bytes_read: Arc::new(AtomicU64::new(0)),
            }),
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.shared.config
    }

    pub fn stats(&self) -> EngineStats {
        let mut s = self.shared.state.borrow().stats.clone();
        s.bytes_read = self.shared.bytes_read.load(Ordering::Relaxed);
        s
    }

    pub fn reset_stats(&self) {
        self.shared.state.borrow_mut().stats = EngineStats::default();
        self.shared.bytes_read.store(0, Ordering::Relaxed);
    }

    /// Bytes charged against the store at `location`, and its high-water mark.
    pub fn store_usage(&self, location: Location) -> Option<(u64, u64, u64)> {
        let st = self.shared.state.borrow();
        match location {
            Location::Disk => st.stores.disk.as_ref().map(|d| {
                (
                    d.store().used_bytes(),
                    d.store().high_water_bytes(),
                    d.store().capacity(),
                )
            }),
            l => st
                .stores
                .memory_ref(l)
                .map(|s| (s.used_bytes(), s.high_water_bytes(), s.capacity())),
        }
    }

    /// Number of store insertions of chunks of `node` at `location`.
    pub fn contains(&self, node: &Node, pos: &[u64], location: Location, wanted: DataState) -> bool {
        let id = node.chunk_id(pos);
        let st = self.shared.state.borrow();
        match location {
            Location::Disk => st
                .stores
                .disk
                .as_ref()
                .is_some_and(|d| d.store().contains(&id, wanted)),
            l => st.stores.memory_ref(l).is_some_and(|s| s.contains(&id, wanted)),
        }
    }

    /// Returns the stored chunk in its best available state without computing.
    pub fn peek(&self, node: &Node, pos: &[u64], location: Location) -> Option<ChunkRef> {
        let id = node.chunk_id(pos);
        let mut st = self.shared.state.borrow_mut();
        let tx = st.tx.clone();
        let store = st.stores.memory(location).ok()?;
        match store.lookup(&id, DataState::Preview) {
            StoreLookup::Hit(e) => Some(ChunkRef::new(location, e, tx)),
            _ => None,
        }
    }

    /// Evicts every unreferenced chunk from the memory stores.
    pub fn clear_caches(&self) {
        self.drain_events();
        let mut st = self.shared.state.borrow_mut();
        for loc in st.stores.locations() {
            if let Ok(s) = st.stores.memory(loc) {
                let ids: Vec<ChunkId> = s.lru_order();
                for id in ids {
                    s.evict(&id);
                }
                s.flush_buckets();
            }
        }
    }

    /// Writes the disk store index.
    pub fn flush(&self) -> Result<()> {
        let mut st = self.shared.state.borrow_mut();
        if let Some(d) = st.stores.disk.as_mut() {
            d.flush()?;
        }
        Ok(())
    }

    /// Computes Final chunks at `positions` of `node` into RAM.
    pub fn resolve(&self, node: &Node, positions: &[Vec<u64>]) -> Result<Vec<ChunkRef>> {
        self.resolve_at(node, positions, Location::Ram, DataState::Final)
    }

    /// Pulls chunks of `node` into `location`. With `wanted == Preview` a
    /// cheaper, not yet converged result may be returned.
    pub fn resolve_at(
        &self,
        node: &Node,
        positions: &[Vec<u64>],
        location: Location,
        wanted: DataState,
    ) -> Result<Vec<ChunkRef>> {
        if self.shared.polling.get() {
            return Err(Error::GraphDiscipline(
                "resolve called from inside a running task".into(),
            ));
        }
        for p in positions {
            node.metadata().check_chunk_pos(p)?;
        }
        if positions.is_empty() {
            return Ok(Vec::new());
        }
        let out: Slot<Vec<ChunkRef>> = Rc::new(RefCell::new(None));
        {
            let mut st = self.shared.state.borrow_mut();
            st.stores.memory(location)?;
            st.error = None;
            let mut depths = HashMap::new();
            let order = node.topological_order();
            depths.insert(node.id(), 1u32);
            for n in order.iter().rev() {
                let d = depths.get(&n.id()).copied().unwrap_or(1);
                for i in n.inputs() {
                    let e = depths.entry(i.id()).or_insert(0);
                    *e = (*e).max(d + 1);
                }
            }
            st.depths = depths;
            st.computed.clear();
        }
        let root = {
            let mut st = self.shared.state.borrow_mut();
            let id = st.next_task;
            st.next_task += 1;
            st.tasks.insert(
                id,
                TaskRecord {
                    kind: TaskKind::Root,
                    node: None,
                    location,
                    batch: Vec::new(),
                    batch_ids: Vec::new(),
                    published: Vec::new(),
                    depth: 0,
                    allowed: Rc::new([node.id()].into_iter().collect()),
                    saw_preview: false,
                },
            );
            st.runnable.insert(id);
            id
        };
        let ctx = TaskContext::new(self.shared.clone(), root, None, location);
        let target = node.clone();
        let positions = positions.to_vec();
        let out2 = out.clone();
        let fut: TaskFuture = Box::pin(async move {
            let refs = ctx
                .request_at(&target, positions, location, wanted)
                .await?;
            *out2.borrow_mut() = Some(refs);
            Ok(())
        });
        self.shared.futures.borrow_mut().insert(root, fut);
        match run_until(&self.shared, root) {
            Ok(()) => Ok(out.borrow_mut().take().expect("root completed")),
            Err(e) => {
                abort(&self.shared);
                Err(e)
            }
        }
    }

    /// Resolves every chunk of `node` in bounded batches, calling `f` for each
    /// in row-major chunk order. References are released after each batch.
    pub fn for_each_chunk(
        &self,
        node: &Node,
        mut f: impl FnMut(&[u64], &ChunkRef) -> Result<()>,
    ) -> Result<()> {
        let md = node.metadata();
        let batch = self.shared.config.max_requests_per_task.max(1);
        let n = md.num_chunks();
        let mut start = 0u64;
        while start < n {
            let end = (start + batch as u64).min(n);
            let positions: Vec<Vec<u64>> = (start..end).map(|i| md.chunk_pos(i)).collect();
            let refs = self.resolve(node, &positions)?;
            for (p, r) in positions.iter().zip(&refs) {
                f(p, r)?;
            }
            start = end;
        }
        Ok(())
    }

    /// Resolves the whole tensor into one dense row-major buffer.
    pub fn resolve_dense(&self, node: &Node) -> Result<Vec<u8>> {
        let md = node.metadata().clone();
        let es = md.element_type().size();
        let total = md.num_elements() as usize * es;
        let mut out = vec![0u8; total];
        self.for_each_chunk(node, |pos, chunk| {
            let (begin, end) = md.chunk_logical_region(pos)?;
            let extent: Vec<u64> = begin.iter().zip(&end).map(|(b, e)| e - b).collect();
            copy_box(
                chunk.bytes(),
                md.chunk_size(),
                &vec![0; md.num_dims()],
                &mut out,
                md.size(),
                &begin,
                &extent,
                es,
            );
            Ok(())
        })?;
        Ok(out)
    }

    fn drain_events(&self) {
        let mut st = self.shared.state.borrow_mut();
        while let Ok(ev) = self.shared.rx.try_recv() {
            st.handle_event(ev);
        }
    }
}

impl Drop for Runtime {
    fn drop(&mut self) {
        abort(&self.shared);
        // let in-flight disk writes land before the index is written
        loop {
            let pending = {
                let st = self.shared.state.borrow();
                st.disk_writes_in_flight > 0 || !st.jobs.is_empty()
            };
            if !pending {
                break;
            }
            match self.shared.rx.recv_timeout(std::time::Duration::from_secs(30)) {
                Ok(ev) => self.shared.state.borrow_mut().handle_event(ev),
                Err(_) => break,
            }
        }
        self.drain_events();
        let _ = self.flush();
    }
}

/// Drops all task state after a failed resolve.
fn abort(shared: &Rc<Shared>) {
    let futures: Vec<TaskFuture> = shared.futures.borrow_mut().drain().map(|(_, f)| f).collect();
    drop(futures);
    let leftovers = {
        let mut st = shared.state.borrow_mut();
        st.tasks.clear();
        st.runnable.clear();
        st.inflight.clear();
        st.queues.clear();
        st.transfers.clear();
        st.active.clear();
        st.barriers.clear();
        st.allocs.clear();
        // results of jobs started by aborted tasks are discarded on arrival
        st.jobs.clear();
        (
            std::mem::take(&mut st.waiters),
            std::mem::take(&mut st.barrier_fills),
        )
    };
    drop(leftovers);
    let mut st = shared.state.borrow_mut();
    while let Ok(ev) = shared.rx.try_recv() {
        st.handle_event(ev);
    }
}

fn noop_waker() -> Waker {
    struct Noop;
    impl std::task::Wake for Noop {
        fn wake(self: Arc<Self>) {}
    }
    Waker::from(Arc::new(Noop))
}

enum Pick {
    Task(TaskId),
    Barrier(Location),
}

/// Manager loop: runs until `root` completes or an error occurs.
fn run_until(shared: &Rc<Shared>, root: TaskId) -> Result<()> {
    let waker = noop_waker();
    let mut cx = Context::from_waker(&waker);
    loop {
        {
            let mut st = shared.state.borrow_mut();
            st.stats.manager_iterations += 1;
            while let Ok(ev) = shared.rx.try_recv() {
                st.handle_event(ev);
            }
            if let Some(e) = st.error.take() {
                return Err(e);
            }
            st.retry_allocations(false);
        }
        admit(shared);
        {
            let st = shared.state.borrow();
            if !st.tasks.contains_key(&root) && st.disk_writes_in_flight == 0 {
                return Ok(());
            }
        }
        let pick = shared.state.borrow().pick();
        match pick {
            Some(Pick::Task(id)) => poll_task(shared, id, &mut cx)?,
            Some(Pick::Barrier(loc)) => shared.state.borrow_mut().run_barrier(loc),
            None => {
                let waiting_on_workers = {
                    let st = shared.state.borrow();
                    !st.jobs.is_empty() || st.disk_writes_in_flight > 0
                };
                if waiting_on_workers {
                    if let Ok(ev) = shared.rx.recv() {
                        shared.state.borrow_mut().handle_event(ev);
                    }
                    continue;
                }
                if shared.state.borrow().allocs.is_empty() {
                    if !shared.state.borrow().tasks.contains_key(&root) {
                        return Ok(());
                    }
                    return Err(Error::GraphDiscipline(
                        "no task can make progress (a task awaited something the engine does not provide)"
                            .into(),
                    ));
                }
                if !deep_reclaim(shared) {
                    let st = shared.state.borrow();
                    let mut names: Vec<String> = st
                        .allocs
                        .iter()
                        .filter_map(|a| {
                            let t = st.tasks.get(&a.task)?;
                            Some(match &t.node {
                                Some(n) => format!("`{}` ({}) needs {} bytes at {}", n.name(), n.id(), a.len, a.location),
                                None => format!("request needs {} bytes at {}", a.len, a.location),
                            })
                        })
                        .collect();
                    names.sort();
                    names.dedup();
                    return Err(Error::MemoryExhausted(format!(
                        "all chunks in the store are referenced; {}",
                        names.join(", ")
                    )));
                }
            }
        }
    }
}

/// Frees everything that can possibly be freed. Returns whether a pending
/// allocation could then be satisfied.
fn deep_reclaim(shared: &Rc<Shared>) -> bool {
    let reclaimers: Vec<Rc<dyn Reclaimer>> = {
        let mut st = shared.state.borrow_mut();
        st.reclaimers.retain(|w| w.strong_count() > 0);
        st.reclaimers.iter().filter_map(|w| w.upgrade()).collect()
    };
    for round in 0..8 {
        // release a few references first so that holders keep their hot set
        let max = if round < 7 { 8usize << (2 * round) } else { usize::MAX };
        let mut st = shared.state.borrow_mut();
        let locs: Vec<Location> = st.allocs.iter().map(|a| a.location).collect();
        for loc in locs {
            if matches!(loc, Location::Device(_)) {
                st.run_barrier(loc);
            }
        }
        while let Ok(ev) = shared.rx.try_recv() {
            st.handle_event(ev);
        }
        if st.retry_allocations(true) {
            return true;
        }
        drop(st);
        let mut released = 0;
        for r in &reclaimers {
            released += r.reclaim(max);
        }
        let mut st = shared.state.borrow_mut();
        while let Ok(ev) = shared.rx.try_recv() {
            st.handle_event(ev);
        }
        if st.retry_allocations(true) {
            return true;
        }
        if released == 0 {
            break;
        }
    }
    false
}

fn admit(shared: &Rc<Shared>) {
    let limit = shared.config.max_active_tasks_per_operator;
    let per_task = shared.config.max_requests_per_task;
    let mut spawns = Vec::new();
    {
        let mut st = shared.state.borrow_mut();
        let ids: Vec<OperatorId> = st.queues.keys().copied().collect();
        for op in ids {
            loop {
                let active = st.active.get(&op).copied().unwrap_or(0);
                let (node, queue) = st.queues.get_mut(&op).unwrap();
                if queue.is_empty() {
                    break;
                }
                if active >= limit {
                    st.stats.deferred_batches += 1;
                    break;
                }
                let node = node.clone();
                let loc = queue.front().unwrap().1;
                let mut batch = Vec::new();
                let mut rest = VecDeque::new();
                while let Some((p, l)) = queue.pop_front() {
                    if l == loc && batch.len() < per_task {
                        batch.push(p);
                    } else {
                        rest.push_back((p, l));
                    }
                }
                *queue = rest;
                let tid = st.spawn_record(TaskKind::Compute, &node, loc, batch.clone(), shared);
                spawns.push((tid, node, loc, batch, false));
            }
            if st.queues.get(&op).is_some_and(|(_, q)| q.is_empty()) {
                st.queues.remove(&op);
            }
        }
        for (node, pos, loc) in std::mem::take(&mut st.transfers) {
            let tid = st.spawn_record(TaskKind::Transfer, &node, loc, vec![pos.clone()], shared);
            spawns.push((tid, node, loc, vec![pos], true));
        }
    }
    for (tid, node, loc, batch, transfer) in spawns {
        let ctx = TaskContext::new(shared.clone(), tid, Some(node.clone()), loc);
        let fut = if transfer {
            context::transfer(ctx, batch.into_iter().next().unwrap())
        } else {
            node.operator().clone().compute(ctx, batch)
        };
        shared.futures.borrow_mut().insert(tid, fut);
    }
}

fn poll_task(shared: &Rc<Shared>, id: TaskId, cx: &mut Context<'_>) -> Result<()> {
    shared.state.borrow_mut().runnable.remove(&id);
    let Some(mut fut) = shared.futures.borrow_mut().remove(&id) else {
        return Ok(());
    };
    assert!(!shared.polling.replace(true), "task bodies must not nest");
    let res = fut.as_mut().poll(cx);
    shared.polling.set(false);
    match res {
        Poll::Pending => {
            shared.futures.borrow_mut().insert(id, fut);
            Ok(())
        }
        Poll::Ready(r) => {
            drop(fut);
            let mut st = shared.state.borrow_mut();
            match r {
                Ok(()) => st.finish_task(id),
                Err(e) => {
                    let e = st.attribute(id, e);
                    st.tasks.remove(&id);
                    Err(e)
                }
            }
        }
    }
}

impl State {
    fn pick(&self) -> Option<Pick> {
        let mut cands: Vec<Candidate<Option<TaskId>>> = self
            .runnable
            .iter()
            .filter_map(|id| {
                let t = self.tasks.get(id)?;
                let done = t.published.iter().filter(|p| **p).count();
                Some(Candidate {
                    key: Some(*id),
                    class: match t.kind {
                        TaskKind::Transfer => PriorityClass::Transfer,
                        _ => PriorityClass::Compute,
                    },
                    progress: if t.batch.is_empty() {
                        0.0
                    } else {
                        done as f64 / t.batch.len() as f64
                    },
                    depth: t.depth,
                    id: *id,
                })
            })
            .collect();
        let barrier = self
            .barriers
            .iter()
            .find(|(_, v)| !v.is_empty())
            .map(|(l, _)| *l)
            .or_else(|| {
                self.barrier_fills
                    .iter()
                    .find(|(_, v)| !v.is_empty())
                    .map(|(l, _)| *l)
            });
        if barrier.is_some() {
            cands.push(Candidate {
                key: None,
                class: PriorityClass::Maintenance,
                progress: 0.0,
                depth: 0,
                id: 0,
            });
        }
        match schedule_next(&cands)? {
            Some(id) => Some(Pick::Task(id)),
            None => barrier.map(Pick::Barrier),
        }
    }

    fn spawn_record(
        &mut self,
        kind: TaskKind,
        node: &Node,
        loc: Location,
        batch: Vec<Vec<u64>>,
        shared: &Shared,
    ) -> TaskId {
        let id = self.next_task;
        self.next_task += 1;
        let allowed = self.allowed_for(node, shared.config.fusion);
        let batch_ids: Vec<ChunkId> = batch.iter().map(|p| node.chunk_id(p)).collect();
        let limit = shared.config.max_recomputations;
        if kind == TaskKind::Compute && limit > 0 {
            for (p, id) in batch.iter().zip(&batch_ids) {
                let n = self.computed.entry(*id).or_default();
                *n += 1;
                if *n > limit && self.error.is_none() {
                    self.error = Some(Error::MemoryExhausted(format!(
                        "chunk {p:?} of `{}` ({}) was computed {} times; the store thrashes \
                         because it cannot hold the graph's working set",
                        node.name(),
                        node.id(),
                        n
                    )));
                }
            }
        }
        let n = batch.len();
        self.tasks.insert(
            id,
            TaskRecord {
                kind,
                node: Some(node.clone()),
                location: loc,
                batch,
                batch_ids,
                published: vec![false; n],
                depth: self.depths.get(&node.id()).copied().unwrap_or(0),
                allowed,
                saw_preview: false,
            },
        );
        self.runnable.insert(id);
        if kind == TaskKind::Compute {
            *self.stats.tasks_spawned.entry(node.id()).or_default() += 1;
            let a = self.active.entry(node.id()).or_default();
            *a += 1;
            let a = *a;
            let m = self.stats.max_active_tasks.entry(node.id()).or_default();
            *m = (*m).max(a);
        } else {
            self.stats.transfers += 1;
        }
        id
    }

    fn allowed_for(&mut self, node: &Node, fusion: bool) -> Rc<HashSet<OperatorId>> {
        self.allowed_cache
            .entry(node.id())
            .or_insert_with(|| {
                let mut s: HashSet<OperatorId> = node.inputs().iter().map(|n| n.id()).collect();
                if fusion {
                    for leaf in crate::operators::pointwise::fused_leaves(node) {
                        s.insert(leaf.id());
                    }
                }
                Rc::new(s)
            })
            .clone()
    }

    fn attribute(&self, task: TaskId, e: Error) -> Error {
        match (&e, self.tasks.get(&task).and_then(|t| t.node.as_ref())) {
            (Error::Operator { .. } | Error::MemoryExhausted(_) | Error::GraphDiscipline(_), _) => e,
            (_, Some(n)) => Error::Operator {
                name: n.name().to_string(),
                id: n.id(),
                message: e.to_string(),
            },
            (_, None) => e,
        }
    }

    pub(crate) fn handle_event(&mut self, ev: Event) {
        match ev {
            Event::Release {
                location,
                id,
                generation,
            } => {
                if let Ok(s) = self.stores.memory(location) {
                    s.release(&id, generation);
                } else if let Some(d) = self.stores.disk.as_mut() {
                    d.store_mut().release(&id, generation);
                }
            }
            Event::JobDone { job, result } => {
                if let Some((task, slot)) = self.jobs.remove(&job) {
                    *slot.borrow_mut() = Some(result);
                    self.runnable.insert(task);
                }
            }
            Event::DiskWriteDone { id, ok } => {
                self.disk_writes_in_flight -= 1;
                if let Some(d) = self.stores.disk.as_mut() {
                    if ok {
                        d.store_mut().set_state(&id, DataState::Final);
                        self.stats.disk_writes += 1;
                    } else {
                        d.store_mut().evict(&id);
                    }
                }
            }
        }
    }

    fn run_barrier(&mut self, loc: Location) {
        if let Ok(s) = self.stores.memory(loc) {
            s.complete_epoch();
        }
        self.stats.barrier_actions += 1;
        for (task, slot) in self.barriers.remove(&loc).unwrap_or_default() {
            *slot.borrow_mut() = Some(());
            self.runnable.insert(task);
        }
        for (w, r) in self.barrier_fills.remove(&loc).unwrap_or_default() {
            self.fill(w, r);
        }
    }

    /// Retries pending allocations, collecting garbage where needed.
    /// Returns whether any allocation succeeded.
    fn retry_allocations(&mut self, thorough: bool) -> bool {
        if self.allocs.is_empty() {
            return false;
        }
        let mut any = false;
        let mut collected: HashSet<Location> = HashSet::new();
        let pending = std::mem::take(&mut self.allocs);
        for a in pending {
            let store = self.stores.memory(a.location).expect("validated location");
            let mut result = store.allocate(a.len);
            if matches!(result, Err(AllocError::ReclamationNeeded)) && collected.insert(a.location) {
                loop {
                    let freed = store.garbage_collect();
                    result = store.allocate(a.len);
                    if !thorough || freed == 0 || result.is_ok() {
                        break;
                    }
                }
            }
            match result {
                Ok(alloc) => {
                    *a.slot.borrow_mut() = Some(Ok(alloc));
                    self.runnable.insert(a.task);
                    any = true;
                }
                Err(_) => self.allocs.push(a),
            }
        }
        any
    }

    pub(crate) fn allocate(
        &mut self,
        task: TaskId,
        location: Location,
        len: usize,
        slot: Slot<Result<Allocation<Vec<u8>>>>,
    ) {
        let store = match self.stores.memory(location) {
            Ok(s) => s,
            Err(e) => {
                *slot.borrow_mut() = Some(Err(e));
                return;
            }
        };
        let mut r = store.allocate(len);
        if matches!(r, Err(AllocError::ReclamationNeeded)) {
            store.garbage_collect();
            r = store.allocate(len);
        }
        match r {
            Ok(a) => *slot.borrow_mut() = Some(Ok(a)),
            Err(AllocError::TooLarge {
                requested,
                capacity,
            }) => {
                *slot.borrow_mut() = Some(Err(Error::AllocationTooLarge {
                    requested,
                    capacity,
                }))
            }
            Err(AllocError::ReclamationNeeded) => self.allocs.push(PendingAlloc {
                task,
                location,
                len,
                slot,
            }),
        }
    }

    pub(crate) fn submit_job(&mut self, task: TaskId, slot: Slot<JobOutput>) -> u64 {
        let id = self.next_job;
        self.next_job += 1;
        self.jobs.insert(id, (task, slot));
        self.stats.jobs += 1;
        id
    }

    pub(crate) fn submit_barrier(&mut self, task: TaskId, loc: Location, slot: Slot<()>) {
        self.barriers.entry(loc).or_default().push((task, slot));
    }

    fn make_ref(&self, loc: Location, e: EntryRef<Vec<u8>>) -> ChunkRef {
        ChunkRef::new(loc, e, self.tx.clone())
    }

    fn device_visible(&self, loc: Location, epoch: u64) -> bool {
        match loc {
            Location::Device(_) => self
                .stores
                .memory_ref(loc)
                .is_some_and(|s| s.is_visible(epoch)),
            _ => true,
        }
    }

    fn deliver(&mut self, w: Waiter, r: ChunkRef, loc: Location) {
        if self.device_visible(loc, r.epoch()) {
            self.fill(w, r);
        } else {
            self.barrier_fills.entry(loc).or_default().push((w, r));
        }
    }

    fn fill(&mut self, w: Waiter, r: ChunkRef) {
        if r.state() == DataState::Preview {
            if let Some(t) = self.tasks.get_mut(&w.task) {
                t.saw_preview = true;
            }
        }
        let mut req = w.req.borrow_mut();
        req.results[w.index] = Some(r);
        req.remaining -= 1;
        if req.remaining == 0 {
            let results = req.results.drain(..).map(|r| r.unwrap()).collect();
            *req.slot.borrow_mut() = Some(Ok(results));
            self.runnable.insert(w.task);
        }
    }

    /// Registers a chunk request on behalf of `task`.
    pub(crate) fn submit_chunks(
        &mut self,
        task: TaskId,
        node: &Node,
        positions: Vec<Vec<u64>>,
        loc: Location,
        wanted: DataState,
        req: Rc<RefCell<ChunkReq>>,
    ) -> Result<()> {
        let allowed = self
            .tasks
            .get(&task)
            .map(|t| t.allowed.contains(&node.id()))
            .unwrap_or(false);
        if !allowed {
            let from = self
                .tasks
                .get(&task)
                .and_then(|t| t.node.as_ref())
                .map(|n| format!("`{}`", n.name()))
                .unwrap_or_else(|| "the resolve root".into());
            return Err(Error::GraphDiscipline(format!(
                "{from} requested chunks of `{}` which is not one of its inputs",
                node.name()
            )));
        }
        for p in &positions {
            node.metadata().check_chunk_pos(p)?;
        }
        self.stores.memory(loc)?;
        for (index, pos) in positions.into_iter().enumerate() {
            let id = node.chunk_id(&pos);
            let w = Waiter {
                task,
                req: req.clone(),
                index,
                wanted,
            };
            let store = self.stores.memory(loc)?;
            if let StoreLookup::Hit(e) = store.lookup(&id, DataState::Final) {
                let r = self.make_ref(loc, e);
                self.deliver(w, r, loc);
                continue;
            }
            self.waiters.entry((id, loc)).or_default().push(w);
            if self.inflight.insert((id, loc)) {
                if self.stores.final_elsewhere(&id, loc).is_some() {
                    self.queue_transfer(node, pos, loc);
                } else {
                    self.queues
                        .entry(node.id())
                        .or_insert_with(|| (node.clone(), VecDeque::new()))
                        .1
                        .push_back((pos, loc));
                }
            }
        }
        Ok(())
    }

    fn queue_transfer(&mut self, node: &Node, pos: Vec<u64>, loc: Location) {
        self.transfers.push((node.clone(), pos, loc));
    }

    pub(crate) fn publish(
        &mut self,
        task: TaskId,
        pos: &[u64],
        alloc: Allocation<Vec<u8>>,
        state: DataState,
        shared: &Shared,
    ) -> Result<()> {
        let t = self
            .tasks
            .get_mut(&task)
            .ok_or_else(|| Error::GraphDiscipline("publish from a finished task".into()))?;
        let node = t
            .node
            .clone()
            .ok_or_else(|| Error::GraphDiscipline("the resolve root cannot publish".into()))?;
        let index = t.batch.iter().position(|p| p.as_slice() == pos).ok_or_else(|| {
            Error::GraphDiscipline(format!(
                "`{}` published chunk {pos:?} outside its batch",
                node.name()
            ))
        })?;
        let state = if t.saw_preview {
            state.min(DataState::Preview)
        } else {
            state
        };
        let loc = t.location;
        let id = t.batch_ids[index];
        t.published[index] = true;
        let expected = node.metadata().chunk_bytes();
        if alloc.len() != expected {
            return Err(Error::GraphDiscipline(format!(
                "`{}` published {} bytes, chunks have {expected}",
                node.name(),
                alloc.len()
            )));
        }
        let store = self.stores.memory(loc)?;
        store.insert(id, alloc, state);
        if t_kind_is_compute(&self.tasks, task) {
            *self.stats.chunks_published.entry(node.id()).or_default() += 1;
        }
        if node.is_cached_on_disk() && state == DataState::Final && loc == Location::Ram {
            self.write_behind(id, shared);
        }
        if let Some(ws) = self.waiters.remove(&(id, loc)) {
            let mut keep = Vec::new();
            for w in ws {
                let store = self.stores.memory(loc)?;
                match store.lookup(&id, w.wanted) {
                    StoreLookup::Hit(e) => {
                        let r = self.make_ref(loc, e);
                        self.deliver(w, r, loc);
                    }
                    _ => keep.push(w),
                }
            }
            if !keep.is_empty() {
                self.waiters.insert((id, loc), keep);
            }
        }
        Ok(())
    }

    fn write_behind(&mut self, id: ChunkId, shared: &Shared) {
        let Some(disk) = self.stores.disk.as_mut() else {
            return;
        };
        if disk.store().entry(&id).is_some() {
            return;
        }
        let StoreLookup::Hit(e) = self.stores.ram.lookup(&id, DataState::Final) else {
            return;
        };
        let chunk = ChunkRef::new(Location::Ram, e, self.tx.clone());
        let disk = self.stores.disk.as_mut().unwrap();
        let alloc = match disk.store_mut().allocate(chunk.bytes().len()) {
            Ok(a) => a,
            Err(AllocError::ReclamationNeeded) => {
                disk.store_mut().garbage_collect();
                match disk.store_mut().allocate(chunk.bytes().len()) {
                    Ok(a) => a,
                    Err(_) => return,
                }
            }
            Err(_) => return,
        };
        let extent = alloc.buf;
        disk.store_mut().insert(id, alloc, DataState::InFlight);
        let file = disk.file();
        let tx = self.tx.clone();
        self.disk_writes_in_flight += 1;
        shared.pool.spawn(
            0,
            Box::new(move || {
                let ok = DiskStore::write_extent(&file, extent, chunk.bytes()).is_ok();
                drop(chunk);
                let _ = tx.send(Event::DiskWriteDone { id, ok });
                Ok(Box::new(()) as Box<dyn Any + Send>)
            }),
            self.tx.clone(),
        );
    }

    fn finish_task(&mut self, id: TaskId) -> Result<()> {
        let Some(t) = self.tasks.remove(&id) else {
            return Ok(());
        };
        self.runnable.remove(&id);
        if t.kind == TaskKind::Root {
            return Ok(());
        }
        let node = t.node.clone().unwrap();
        if let Some(i) = t.published.iter().position(|p| !p) {
            return Err(Error::Operator {
                name: node.name().to_string(),
                id: node.id(),
                message: format!("task finished without producing chunk {:?}", t.batch[i]),
            });
        }
        if t.kind == TaskKind::Compute {
            if let Some(a) = self.active.get_mut(&node.id()) {
                *a -= 1;
            }
        }
        for (pos, cid) in t.batch.into_iter().zip(t.batch_ids) {
            let key = (cid, t.location);
            if self.waiters.get(&key).is_some_and(|w| !w.is_empty()) {
                // only a preview was produced but a final result is wanted
                self.queues
                    .entry(node.id())
                    .or_insert_with(|| (node.clone(), VecDeque::new()))
                    .1
                    .push_back((pos, t.location));
            } else {
                self.inflight.remove(&key);
            }
        }
        Ok(())
    }
}

fn t_kind_is_compute(tasks: &BTreeMap<TaskId, TaskRecord>, id: TaskId) -> bool {
    tasks.get(&id).is_some_and(|t| t.kind == TaskKind::Compute)
}

#[cfg(test)]
mod tests;
