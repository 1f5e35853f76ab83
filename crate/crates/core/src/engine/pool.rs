use std::any::Any;
use std::panic::{catch_unwind, AssertUnwindSafe};

use crossbeam_channel::Sender;

use super::Event;
use crate::error::{Error, Result};

pub(crate) type JobOutput = Result<Box<dyn Any + Send>>;
pub(crate) type JobFn = Box<dyn FnOnce() -> JobOutput + Send>;

pub(crate) struct WorkerPool {
    pool: rayon::ThreadPool,
}

impl WorkerPool {
    pub fn new(threads: usize) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .thread_name(|i| format!("tessera-worker-{i}"))
            .build()
            .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;
        Ok(WorkerPool { pool })
    }

    pub fn spawn(&self, job: u64, f: JobFn, events: Sender<Event>) {
        self.pool.spawn(move || {
            let result = match catch_unwind(AssertUnwindSafe(f)) {
                Ok(r) => r,
                Err(panic) => {
                    let msg = panic
                        .downcast_ref::<&str>()
                        .map(|s| s.to_string())
                        .or_else(|| panic.downcast_ref::<String>().cloned())
                        .unwrap_or_else(|| "worker job panicked".to_string());
                    Err(Error::Job(msg))
                }
            };
            let _ = events.send(Event::JobDone { job, result });
        });
    }
}
