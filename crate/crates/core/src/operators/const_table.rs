//! Tables of uniform chunk values for empty-space skipping.

use std::any::Any;
use std::sync::Arc;

use crate::chunk::{box_positions, linear_index, ParamWriter, TensorMetaData};
use crate::engine::TaskContext;
use crate::error::{Error, Result};
use crate::graph::{Node, Operator, TaskFuture};
use crate::store::DataState;

use super::source::uniform_source_value;

/// Default chunk extent of a table along each dimension.
pub const TABLE_CHUNK: u64 = 16;

struct ConstTable;

/// The common value of all logical elements of a chunk, compared bytewise,
/// or `None`.
pub(crate) fn uniform_value(md: &TensorMetaData, pos: &[u64], bytes: &[u8]) -> Result<Option<f64>> {
    let (begin, end) = md.chunk_logical_region(pos)?;
    let es = md.element_type().size();
    let c = md.chunk_size();
    let d = md.num_dims();
    let first = &bytes[..es];
    let row = (end[d - 1] - begin[d - 1]) as usize * es;
    let outer_begin = begin.clone();
    let mut outer_end = end.clone();
    outer_end[d - 1] = begin[d - 1] + 1;
    for g in box_positions(&outer_begin, &outer_end) {
        let local: Vec<u64> = g
            .iter()
            .zip(&begin)
            .enumerate()
            .map(|(i, (g, b))| if i == d - 1 { 0 } else { g - b })
            .collect();
        let s = linear_index(&local, c) as usize * es;
        if bytes[s..s + row].chunks_exact(es).any(|e| e != first) {
            return Ok(None);
        }
    }
    Ok(Some(md.element_type().scalar.read(first, 0)))
}

impl Operator for ConstTable {
    fn compute(self: Arc<Self>, ctx: TaskContext, positions: Vec<Vec<u64>>) -> TaskFuture {
        Box::pin(async move {
            let node = ctx.node().clone();
            let input = node.inputs()[0].clone();
            let md = node.metadata().clone();
            let imd = input.metadata().clone();
            let t = md.element_type().scalar;
            let batch = ctx.max_requests_per_task();
            let known = uniform_source_value(&input);
            for pos in positions {
                let (begin, end) = md.chunk_logical_region(&pos)?;
                let cells: Vec<Vec<u64>> = box_positions(&begin, &end).collect();
                if let Some(v) = known {
                    let mut alloc = ctx.alloc_chunk().await?;
                    alloc.fill(0);
                    for cell in &cells {
                        let local: Vec<u64> = cell.iter().zip(&begin).map(|(a, b)| a - b).collect();
                        t.write(&mut alloc, linear_index(&local, md.chunk_size()) as usize, v);
                    }
                    ctx.publish(&pos, alloc, DataState::Final)?;
                    continue;
                }
                let mut values = Vec::with_capacity(cells.len());
                for group in cells.chunks(batch) {
                    let chunks = ctx.request_chunks(&input, group.to_vec()).await?;
                    let imd = imd.clone();
                    let group = group.to_vec();
                    let v = ctx
                        .run_job(move || {
                            group
                                .iter()
                                .zip(&chunks)
                                .map(|(p, c)| {
                                    Ok(uniform_value(&imd, p, c.bytes())?.unwrap_or(t.sentinel()))
                                })
                                .collect::<Result<Vec<f64>>>()
                        })
                        .await?;
                    values.extend(v);
                }
                let mut alloc = ctx.alloc_chunk().await?;
                alloc.fill(0);
                for (cell, v) in cells.iter().zip(values) {
                    let local: Vec<u64> = cell.iter().zip(&begin).map(|(a, b)| a - b).collect();
                    t.write(&mut alloc, linear_index(&local, md.chunk_size()) as usize, v);
                }
                ctx.publish(&pos, alloc, DataState::Final)?;
            }
            Ok(())
        })
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// A tensor over the chunk grid of `input` holding each chunk's uniform value
/// or the type's sentinel (NaN for floats, the maximum for integers) when the
/// chunk is not uniform. The table is itself chunked with `chunk_size`
/// (default [`TABLE_CHUNK`] per dimension, clamped to the grid).
pub fn build_const_chunk_table(input: &Node, chunk_size: Option<Vec<u64>>) -> Result<Node> {
    let imd = input.metadata();
    if !imd.element_type().is_scalar() {
        return Err(Error::TypeMismatch("const chunk tables need a scalar element type".into()));
    }
    let grid = imd.chunk_grid_dims();
    let chunk = chunk_size.unwrap_or_else(|| grid.iter().map(|g| (*g).min(TABLE_CHUNK)).collect());
    let md = TensorMetaData::new(grid, chunk, imd.element_type())?;
    Ok(Node::new(
        "const_chunk_table",
        ParamWriter::new().finish(),
        md,
        None,
        vec![input.clone()],
        Arc::new(ConstTable),
    ))
}
