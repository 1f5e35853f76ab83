use std::any::Any;
use std::sync::Arc;

use crate::chunk::{copy_box, EmbeddingData, ParamWriter, TensorMetaData};
use crate::engine::TaskContext;
use crate::error::{Error, Result};
use crate::graph::{Node, Operator, TaskFuture};
use crate::store::DataState;

struct Slice {
    dim: usize,
    index: u64,
}

impl Operator for Slice {
    fn compute(self: Arc<Self>, ctx: TaskContext, positions: Vec<Vec<u64>>) -> TaskFuture {
        Box::pin(async move {
            let input = ctx.node().inputs()[0].clone();
            let imd = input.metadata().clone();
            let c = imd.chunk_size()[self.dim];
            let inputs: Vec<Vec<u64>> = positions
                .iter()
                .map(|p| {
                    let mut h = p.clone();
                    h.insert(self.dim, self.index / c);
                    h
                })
                .collect();
            let chunks = ctx.request_chunks(&input, inputs).await?;
            for (pos, chunk) in positions.iter().zip(chunks) {
                let mut alloc = ctx.alloc_chunk().await?;
                let imd = imd.clone();
                let (dim, local) = (self.dim, self.index % c);
                let alloc = ctx
                    .run_job(move || {
                        let mut origin = vec![0; imd.num_dims()];
                        origin[dim] = local;
                        let mut extent = imd.chunk_size().to_vec();
                        extent[dim] = 1;
                        copy_box(
                            chunk.bytes(),
                            imd.chunk_size(),
                            &origin,
                            &mut alloc,
                            &extent,
                            &vec![0; imd.num_dims()],
                            &extent,
                            imd.element_type().size(),
                        );
                        Ok(alloc)
                    })
                    .await?;
                ctx.publish(pos, alloc, DataState::Final)?;
            }
            Ok(())
        })
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// The `(d-1)`-dimensional tensor at `index` along `dim`.
pub fn slice(input: &Node, dim: usize, index: u64) -> Result<Node> {
    let md = input.metadata();
    if md.num_dims() < 2 {
        return Err(Error::invalid("cannot slice a one-dimensional tensor"));
    }
    if dim >= md.num_dims() {
        return Err(Error::InvalidCoordinate(format!(
            "slice dimension {dim} of a {}-dimensional tensor",
            md.num_dims()
        )));
    }
    if index >= md.size()[dim] {
        return Err(Error::InvalidCoordinate(format!(
            "slice index {index} outside 0..{}",
            md.size()[dim]
        )));
    }
    let mut size = md.size().to_vec();
    let mut chunk = md.chunk_size().to_vec();
    size.remove(dim);
    chunk.remove(dim);
    let out = TensorMetaData::new(size, chunk, md.element_type())?;
    let embedding = input.embedding().map(|e| {
        let mut s = e.spacing.clone();
        s.remove(dim);
        EmbeddingData { spacing: s }
    });
    Ok(Node::new(
        "slice",
        ParamWriter::new().u64(dim as u64).u64(index).finish(),
        out,
        embedding,
        vec![input.clone()],
        Arc::new(Slice { dim, index }),
    ))
}

impl Node {
    /// Shorthand for [`slice`].
    pub fn slice(&self, dim: usize, index: u64) -> Result<Node> {
        slice(self, dim, index)
    }
}
