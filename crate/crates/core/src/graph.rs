//! Operator nodes of the compute graph.
//!
//! A [`Node`] is an immutable description of a tensor: its metadata, its
//! inputs and the operator that computes its chunks. Building a graph never
//! computes data; chunks are produced only when a [`crate::engine::Runtime`]
//! pulls them.

use std::any::Any;
use std::fmt;
use std::future::Future;
use std::pin::Pin;
use std::sync::Arc;

use crate::chunk::{chunk_id, operator_id, ChunkId, EmbeddingData, OperatorId, ParamWriter, TensorMetaData};
use crate::engine::TaskContext;
use crate::error::Result;
use crate::operators::pointwise::Expr;
use crate::store::Location;

pub type TaskFuture = Pin<Box<dyn Future<Output = Result<()>>>>;

/// Computes chunks of one node. `compute` is called once per task with the
/// batch of chunk positions the task must publish.
pub trait Operator: Send + Sync + 'static {
    fn compute(self: Arc<Self>, ctx: TaskContext, positions: Vec<Vec<u64>>) -> TaskFuture;

    /// Element-wise expression over the node's inputs, for fusion.
    fn pointwise_expr(&self) -> Option<&Expr> {
        None
    }

    fn as_any(&self) -> &dyn Any;
}

struct NodeInner {
    id: OperatorId,
    name: String,
    metadata: TensorMetaData,
    embedding: Option<EmbeddingData>,
    inputs: Vec<Node>,
    op: Arc<dyn Operator>,
    location: Option<Location>,
    cache_on_disk: bool,
}

#[derive(Clone)]
pub struct Node(Arc<NodeInner>);

impl Node {
    /// Creates a node. The id is derived from `name`, `params`, the output
    /// metadata (including element type) and the input ids.
    pub fn new(
        name: &str,
        params: Vec<u8>,
        metadata: TensorMetaData,
        embedding: Option<EmbeddingData>,
        inputs: Vec<Node>,
        op: Arc<dyn Operator>,
    ) -> Node {
        let mut p = ParamWriter::new().bytes(&params).metadata(&metadata);
        if let Some(e) = &embedding {
            p = p.f64s(&e.spacing);
        }
        let input_ids: Vec<OperatorId> = inputs.iter().map(|n| n.id()).collect();
        let id = operator_id(name, &p.finish(), &input_ids);
        Node(Arc::new(NodeInner {
            id,
            name: name.to_string(),
            metadata,
            embedding,
            inputs,
            op,
            location: None,
            cache_on_disk: false,
        }))
    }

    fn modified(&self, f: impl FnOnce(&mut NodeInner)) -> Node {
        let mut inner = NodeInner {
            id: self.0.id,
            name: self.0.name.clone(),
            metadata: self.0.metadata.clone(),
            embedding: self.0.embedding.clone(),
            inputs: self.0.inputs.clone(),
            op: self.0.op.clone(),
            location: self.0.location,
            cache_on_disk: self.0.cache_on_disk,
        };
        f(&mut inner);
        Node(Arc::new(inner))
    }

    /// Annotates the node to be computed at `location` when requested by
    /// other operators. The id is unchanged.
    pub fn at_location(&self, location: Location) -> Node {
        self.modified(|n| n.location = Some(location))
    }

    /// Final chunks of this node are also written to the disk store.
    pub fn cache_on_disk(&self) -> Node {
        self.modified(|n| n.cache_on_disk = true)
    }

    /// Replaces the embedding without changing the id.
    pub fn with_embedding(&self, embedding: EmbeddingData) -> Node {
        self.modified(|n| n.embedding = Some(embedding))
    }

    pub fn id(&self) -> OperatorId {
        self.0.id
    }

    pub fn name(&self) -> &str {
        &self.0.name
    }

    pub fn metadata(&self) -> &TensorMetaData {
        &self.0.metadata
    }

    pub fn embedding(&self) -> Option<&EmbeddingData> {
        self.0.embedding.as_ref()
    }

    /// The embedding, or unit spacing if none was attached.
    pub fn embedding_or_unit(&self) -> EmbeddingData {
        self.0
            .embedding
            .clone()
            .unwrap_or_else(|| EmbeddingData::unit(self.0.metadata.num_dims()))
    }

    pub fn inputs(&self) -> &[Node] {
        &self.0.inputs
    }

    pub fn operator(&self) -> &Arc<dyn Operator> {
        &self.0.op
    }

    pub fn location(&self) -> Option<Location> {
        self.0.location
    }

    pub fn is_cached_on_disk(&self) -> bool {
        self.0.cache_on_disk
    }

    pub fn chunk_id(&self, pos: &[u64]) -> ChunkId {
        chunk_id(self.0.id, pos)
    }

    pub fn downcast<T: 'static>(&self) -> Option<&T> {
        self.0.op.as_any().downcast_ref::<T>()
    }

    /// All nodes reachable from `self` (including it), inputs before users.
    pub fn topological_order(&self) -> Vec<Node> {
        fn visit(n: &Node, seen: &mut std::collections::HashSet<OperatorId>, out: &mut Vec<Node>) {
            if !seen.insert(n.id()) {
                return;
            }
            for i in n.inputs() {
                visit(i, seen, out);
            }
            out.push(n.clone());
        }
        let mut seen = Default::default();
        let mut out = Vec::new();
        visit(self, &mut seen, &mut out);
        out
    }
}

impl fmt::Debug for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Node")
            .field("name", &self.0.name)
            .field("id", &self.0.id)
            .field("size", &self.0.metadata.size())
            .field("chunk_size", &self.0.metadata.chunk_size())
            .field("element_type", &self.0.metadata.element_type().to_string())
            .finish()
    }
}
