use std::cmp::Ordering;

/// Coarse priority of a runnable item; later variants win.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PriorityClass {
    /// Barrier handling and memory reclamation.
    Maintenance,
    /// Chunk computation.
    Compute,
    /// Allocation and data transfer between locations.
    Transfer,
}

#[derive(Copy, Clone, Debug)]
pub struct Candidate<K> {
    pub key: K,
    pub class: PriorityClass,
    /// Fraction of the task's output batch already published.
    pub progress: f64,
    /// Longest path from the resolve root to the task's node.
    pub depth: u32,
    pub id: u64,
}

fn rank<K>(a: &Candidate<K>, b: &Candidate<K>) -> Ordering {
    a.class
        .cmp(&b.class)
        .then(a.progress.total_cmp(&b.progress))
        .then(a.depth.cmp(&b.depth))
        .then(b.id.cmp(&a.id))
}

/// Picks the candidate maximizing `(class, progress, depth)`, lowest id on ties.
pub fn schedule_next<K: Copy>(candidates: &[Candidate<K>]) -> Option<K> {
    candidates
        .iter()
        .max_by(|a, b| rank(a, b))
        .map(|c| c.key)
}
