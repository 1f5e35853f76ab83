use std::any::Any;
use std::cell::RefCell;
use std::fmt;
use std::os::unix::fs::FileExt;
use std::future::Future;
use std::pin::Pin;
use std::rc::{Rc, Weak};
use std::sync::atomic::AtomicU64;
use std::sync::Arc;
use std::task::{Context, Poll};

use crossbeam_channel::Sender;

use super::{Event, Shared, TaskId};
use crate::chunk::ChunkId;
use crate::error::{Error, Result};
use crate::graph::{Node, TaskFuture};
use crate::store::{Allocation, DataState, EntryRef, Location, StoreLookup};

pub(crate) type Slot<T> = Rc<RefCell<Option<T>>>;

pub(crate) struct ChunkReq {
    pub results: Vec<Option<ChunkRef>>,
    pub remaining: usize,
    pub slot: Slot<Result<Vec<ChunkRef>>>,
}

pub(crate) struct Waiter {
    pub task: TaskId,
    pub req: Rc<RefCell<ChunkReq>>,
    pub index: usize,
    pub wanted: DataState,
}

struct Guard {
    id: ChunkId,
    generation: u64,
    location: Location,
    state: DataState,
    epoch: u64,
    payload: Arc<Vec<u8>>,
    tx: Option<Sender<Event>>,
}

impl Drop for Guard {
    fn drop(&mut self) {
        if let Some(tx) = self.tx.take() {
            let _ = tx.send(Event::Release {
                location: self.location,
                id: self.id,
                generation: self.generation,
            });
        }
    }
}

/// A counted reference to a stored chunk. The store keeps the chunk alive
/// until every clone is dropped; dropping is allowed on any thread.
#[derive(Clone)]
pub struct ChunkRef(Arc<Guard>);

impl ChunkRef {
    pub(crate) fn new(location: Location, e: EntryRef<Vec<u8>>, tx: Sender<Event>) -> Self {
        ChunkRef(Arc::new(Guard {
            id: e.id,
            generation: e.generation,
            location,
            state: e.state,
            epoch: e.epoch,
            payload: e.payload,
            tx: Some(tx),
        }))
    }

    pub fn bytes(&self) -> &[u8] {
        &self.0.payload
    }

    pub fn payload(&self) -> &Arc<Vec<u8>> {
        &self.0.payload
    }

    pub fn id(&self) -> ChunkId {
        self.0.id
    }

    pub fn state(&self) -> DataState {
        self.0.state
    }

    pub fn location(&self) -> Location {
        self.0.location
    }

    pub(crate) fn epoch(&self) -> u64 {
        self.0.epoch
    }
}

impl fmt::Debug for ChunkRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ChunkRef")
            .field("id", &self.0.id)
            .field("location", &self.0.location)
            .field("state", &self.0.state)
            .field("len", &self.0.payload.len())
            .finish()
    }
}

/// Something holding chunk references that can give them up under memory
/// pressure (e.g. page tables).
pub trait Reclaimer {
    /// Drops up to `max` references; returns how many were dropped.
    fn reclaim(&self, max: usize) -> usize;
}

/// Resolves when the manager fills the slot.
pub(crate) struct Wait<T> {
    slot: Slot<T>,
}

impl<T> Future for Wait<T> {
    type Output = T;

    fn poll(self: Pin<&mut Self>, _cx: &mut Context<'_>) -> Poll<T> {
        match self.slot.borrow_mut().take() {
            Some(v) => Poll::Ready(v),
            None => Poll::Pending,
        }
    }
}

fn ready<T>(v: T) -> Wait<T> {
    Wait {
        slot: Rc::new(RefCell::new(Some(v))),
    }
}

/// Handle through which a task talks to the engine.
#[derive(Clone)]
pub struct TaskContext {
    shared: Rc<Shared>,
    task: TaskId,
    node: Option<Node>,
    location: Location,
}

impl TaskContext {
    pub(crate) fn new(shared: Rc<Shared>, task: TaskId, node: Option<Node>, location: Location) -> Self {
        TaskContext {
            shared,
            task,
            node,
            location,
        }
    }

    /// The node this task computes chunks of.
    pub fn node(&self) -> &Node {
        self.node.as_ref().expect("compute tasks have a node")
    }

    /// Location the task's outputs are published to.
    pub fn location(&self) -> Location {
        self.location
    }

    pub fn fusion_enabled(&self) -> bool {
        self.shared.config.fusion
    }

    pub fn inplace_enabled(&self) -> bool {
        self.shared.config.inplace
    }

    pub fn max_requests_per_task(&self) -> usize {
        self.shared.config.max_requests_per_task
    }

    /// Counter for bytes read from files, shareable with worker jobs.
    pub fn bytes_read_counter(&self) -> Arc<AtomicU64> {
        self.shared.bytes_read.clone()
    }

    /// Whether any chunk delivered to this task so far was only a preview.
    pub fn saw_preview(&self) -> bool {
        self.shared
            .state
            .borrow()
            .tasks
            .get(&self.task)
            .is_some_and(|t| t.saw_preview)
    }

    /// Requests Final chunks of an input node.
    pub fn request_chunks(
        &self,
        node: &Node,
        positions: Vec<Vec<u64>>,
    ) -> impl Future<Output = Result<Vec<ChunkRef>>> {
        self.request_chunks_state(node, positions, DataState::Final)
    }

    /// Requests chunks of an input node, accepting previews if `wanted` is
    /// `Preview`.
    pub fn request_chunks_state(
        &self,
        node: &Node,
        positions: Vec<Vec<u64>>,
        wanted: DataState,
    ) -> impl Future<Output = Result<Vec<ChunkRef>>> {
        let loc = node.location().unwrap_or(self.location);
        self.request_at(node, positions, loc, wanted)
    }

    pub async fn request_chunk(&self, node: &Node, pos: Vec<u64>) -> Result<ChunkRef> {
        Ok(self.request_chunks(node, vec![pos]).await?.pop().unwrap())
    }

    pub(crate) fn request_at(
        &self,
        node: &Node,
        positions: Vec<Vec<u64>>,
        loc: Location,
        wanted: DataState,
    ) -> Wait<Result<Vec<ChunkRef>>> {
        let n = positions.len();
        let slot: Slot<Result<Vec<ChunkRef>>> = Rc::new(RefCell::new(None));
        if n == 0 {
            return ready(Ok(Vec::new()));
        }
        let req = Rc::new(RefCell::new(ChunkReq {
            results: (0..n).map(|_| None).collect(),
            remaining: n,
            slot: slot.clone(),
        }));
        let r = self
            .shared
            .state
            .borrow_mut()
            .submit_chunks(self.task, node, positions, loc, wanted, req);
        if let Err(e) = r {
            return ready(Err(e));
        }
        Wait { slot }
    }

    /// Runs `f` on the worker pool.
    pub fn run_job<T: Send + 'static>(
        &self,
        f: impl FnOnce() -> Result<T> + Send + 'static,
    ) -> impl Future<Output = Result<T>> {
        let slot = Rc::new(RefCell::new(None));
        let (job, tx) = {
            let mut st = self.shared.state.borrow_mut();
            (st.submit_job(self.task, slot.clone()), st.tx.clone())
        };
        self.shared.pool.spawn(
            job,
            Box::new(move || f().map(|v| Box::new(v) as Box<dyn Any + Send>)),
            tx,
        );
        let wait = Wait { slot };
        async move {
            let out = wait.await?;
            Ok(*out.downcast::<T>().expect("job output type"))
        }
    }

    /// Allocates `len` zeroed bytes at the task's location, waiting for
    /// memory to be reclaimed if the store is full.
    pub fn alloc(&self, len: usize) -> impl Future<Output = Result<Allocation<Vec<u8>>>> {
        let slot = Rc::new(RefCell::new(None));
        self.shared
            .state
            .borrow_mut()
            .allocate(self.task, self.location, len, slot.clone());
        Wait { slot }
    }

    /// Allocates one full chunk of the task's node.
    pub fn alloc_chunk(&self) -> impl Future<Output = Result<Allocation<Vec<u8>>>> {
        self.alloc(self.node().metadata().chunk_bytes())
    }

    /// Returns an unused allocation to its store.
    pub fn free(&self, alloc: Allocation<Vec<u8>>) {
        if let Ok(s) = self.shared.state.borrow_mut().stores.memory(self.location) {
            s.free(alloc);
        }
    }

    /// Publishes one chunk of the task's batch. The state is lowered to
    /// `Preview` if any input was a preview.
    pub fn publish(&self, pos: &[u64], alloc: Allocation<Vec<u8>>, state: DataState) -> Result<()> {
        self.shared
            .state
            .borrow_mut()
            .publish(self.task, pos, alloc, state, &self.shared)
    }

    /// Waits until everything published at `location` so far is visible.
    /// Concurrent barriers for the same location are served by one action.
    pub fn barrier(&self, location: Location) -> impl Future<Output = ()> {
        let slot = Rc::new(RefCell::new(None));
        self.shared
            .state
            .borrow_mut()
            .submit_barrier(self.task, location, slot.clone());
        Wait { slot }
    }

    /// Takes over the payload of `chunk` for writing if this is the only
    /// reference to it anywhere. The chunk leaves the store.
    pub fn try_inplace(&self, chunk: ChunkRef) -> std::result::Result<Allocation<Vec<u8>>, ChunkRef> {
        if !self.shared.config.inplace || chunk.location() != self.location {
            return Err(chunk);
        }
        let mut guard = match Arc::try_unwrap(chunk.0) {
            Ok(g) => g,
            Err(arc) => return Err(ChunkRef(arc)),
        };
        let tx = guard.tx.take().expect("live guard");
        let entry = EntryRef {
            id: guard.id,
            generation: guard.generation,
            state: guard.state,
            epoch: guard.epoch,
            payload: guard.payload.clone(),
        };
        let location = guard.location;
        drop(guard);
        let mut st = self.shared.state.borrow_mut();
        let store = st.stores.memory(location).expect("chunk location");
        match store.try_replace_inplace(entry) {
            Ok(alloc) => {
                st.stats.inplace_grants += 1;
                Ok(alloc)
            }
            Err(entry) => Err(ChunkRef::new(location, entry, tx)),
        }
    }

    /// Per-operator state that survives across tasks and resolve calls.
    pub fn state_cache<T: 'static>(&self, key: u64, init: impl FnOnce() -> T) -> Rc<T> {
        let op = self.node().id();
        let mut st = self.shared.state.borrow_mut();
        let v = st
            .state_cache
            .entry((op, key))
            .or_insert_with(|| Rc::new(init()) as Rc<dyn Any>)
            .clone();
        v.downcast::<T>().expect("state cache type")
    }

    pub fn register_reclaimer(&self, r: Weak<dyn Reclaimer>) {
        self.shared.state.borrow_mut().reclaimers.push(r);
    }

    /// Bytes currently free at the task's location.
    pub fn free_bytes(&self) -> u64 {
        let mut st = self.shared.state.borrow_mut();
        st.stores
            .memory(self.location)
            .map(|s| s.capacity().saturating_sub(s.used_bytes()))
            .unwrap_or(0)
    }

    pub fn capacity_bytes(&self) -> u64 {
        let mut st = self.shared.state.borrow_mut();
        st.stores
            .memory(self.location)
            .map(|s| s.capacity())
            .unwrap_or(0)
    }
}

/// Copies a Final chunk that exists at another location into the task's location.
pub(crate) fn transfer(ctx: TaskContext, pos: Vec<u64>) -> TaskFuture {
    Box::pin(async move {
        let node = ctx.node().clone();
        let id = node.chunk_id(&pos);
        let source = {
            let mut st = ctx.shared.state.borrow_mut();
            let tx = st.tx.clone();
            let from = st
                .stores
                .final_elsewhere(&id, ctx.location)
                .ok_or_else(|| Error::invalid("transfer source vanished"))?;
            match from {
                Location::Disk => {
                    let disk = st.stores.disk.as_mut().unwrap();
                    match disk.store_mut().lookup(&id, DataState::Final) {
                        StoreLookup::Hit(e) => Source::Disk(*e.payload, e.generation, disk.file()),
                        _ => return Err(Error::invalid("transfer source vanished")),
                    }
                }
                l => match st.stores.memory(l)?.lookup(&id, DataState::Final) {
                    StoreLookup::Hit(e) => Source::Memory(ChunkRef::new(l, e, tx)),
                    _ => return Err(Error::invalid("transfer source vanished")),
                },
            }
        };
        let alloc = ctx.alloc_chunk().await;
        let alloc = match alloc {
            Ok(a) => a,
            Err(e) => {
                source.release(&ctx, &id);
                return Err(e);
            }
        };
        let counter = ctx.bytes_read_counter();
        let job_source = source.clone_for_job();
        let result = ctx
            .run_job(move || {
                let mut alloc = alloc;
                match job_source {
                    JobSource::Memory(r) => alloc.copy_from_slice(r.bytes()),
                    JobSource::Disk(extent, file) => {
                        file.read_exact_at(&mut alloc[..], extent.offset)
                            .map_err(|e| Error::Job(format!("disk store read failed: {e}")))?;
                        counter.fetch_add(extent.len, std::sync::atomic::Ordering::Relaxed);
                    }
                }
                Ok(alloc)
            })
            .await;
        source.release(&ctx, &id);
        ctx.publish(&pos, result?, DataState::Final)
    })
}

enum Source {
    Memory(ChunkRef),
    Disk(crate::store::Extent, u64, Arc<std::fs::File>),
}

enum JobSource {
    Memory(ChunkRef),
    Disk(crate::store::Extent, Arc<std::fs::File>),
}

impl Source {
    fn clone_for_job(&self) -> JobSource {
        match self {
            Source::Memory(r) => JobSource::Memory(r.clone()),
            Source::Disk(e, _, f) => JobSource::Disk(*e, f.clone()),
        }
    }

    fn release(self, ctx: &TaskContext, id: &ChunkId) {
        if let Source::Disk(_, generation, _) = self {
            if let Some(d) = ctx.shared.state.borrow_mut().stores.disk.as_mut() {
                d.store_mut().release(id, generation);
            }
        }
    }
}
