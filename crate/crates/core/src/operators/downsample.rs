use std::any::Any;
use std::sync::Arc;

use super::{chunk_box, scatter_chunk, ChunkBox};
use crate::chunk::{delinearize, linear_index, EmbeddingData, ParamWriter, TensorMetaData};
use crate::engine::TaskContext;
use crate::error::{Error, Result};
use crate::graph::{Node, Operator, TaskFuture};
use crate::store::DataState;

struct Downsample {
    dims: Vec<bool>,
}

impl Downsample {
    /// Means over 2-element blocks in the selected dims of a gathered input
    /// box `[ibegin, iend)` producing the output box starting at `begin`.
    fn reduce(&self, data: &[f64], ibegin: &[u64], iend: &[u64], begin: &[u64], extent: &[u64], lanes: usize) -> Vec<f64> {
        let d = extent.len();
        let iext: Vec<u64> = ibegin.iter().zip(iend).map(|(b, e)| e - b).collect();
        let n: u64 = extent.iter().product();
        let mut out = vec![0.0; n as usize * lanes];
        let mut src = vec![0u64; d];
        for i in 0..n {
            let o = delinearize(i, extent);
            let mut lo = vec![0u64; d];
            let mut hi = vec![0u64; d];
            for k in 0..d {
                let g = begin[k] + o[k];
                if self.dims[k] {
                    lo[k] = 2 * g - ibegin[k];
                    hi[k] = (2 * g + 2).min(iend[k]) - ibegin[k];
                } else {
                    lo[k] = g - ibegin[k];
                    hi[k] = lo[k] + 1;
                }
            }
            let block: Vec<u64> = lo.iter().zip(&hi).map(|(a, b)| b - a).collect();
            let count: u64 = block.iter().product();
            let acc = &mut out[i as usize * lanes..(i as usize + 1) * lanes];
            for j in 0..count {
                let b = delinearize(j, &block);
                for k in 0..d {
                    src[k] = lo[k] + b[k];
                }
                let s = linear_index(&src, &iext) as usize * lanes;
                for (a, v) in acc.iter_mut().zip(&data[s..s + lanes]) {
                    *a += v;
                }
            }
            for a in acc.iter_mut() {
                *a /= count as f64;
            }
        }
        out
    }
}

impl Operator for Downsample {
    fn compute(self: Arc<Self>, ctx: TaskContext, positions: Vec<Vec<u64>>) -> TaskFuture {
        Box::pin(async move {
            let node = ctx.node().clone();
            let input = node.inputs()[0].clone();
            let md = node.metadata().clone();
            let imd = input.metadata().clone();
            for pos in positions {
                let (begin, end) = md.chunk_logical_region(&pos)?;
                let mut ibegin = begin.clone();
                let mut iend = end.clone();
                for k in 0..begin.len() {
                    if self.dims[k] {
                        ibegin[k] = 2 * begin[k];
                        iend[k] = (2 * end[k]).min(imd.size()[k]);
                    }
                }
                let (lo, hi) = chunk_box(&imd, &ibegin, &iend);
                let chunks = ctx
                    .request_chunks(&input, ChunkBox::positions(&lo, &hi))
                    .await?;
                let mut alloc = ctx.alloc_chunk().await?;
                let this = self.clone();
                let (md, imd) = (md.clone(), imd.clone());
                let alloc = ctx
                    .run_job(move || {
                        let cb = ChunkBox::new(lo, &hi, chunks);
                        let start: Vec<i64> = ibegin.iter().map(|v| *v as i64).collect();
                        let iext: Vec<u64> = ibegin.iter().zip(&iend).map(|(b, e)| e - b).collect();
                        let data = cb.gather(&imd, &start, &iext);
                        drop(cb);
                        let extent: Vec<u64> = begin.iter().zip(&end).map(|(b, e)| e - b).collect();
                        let lanes = imd.element_type().lanes as usize;
                        let out = this.reduce(&data, &ibegin, &iend, &begin, &extent, lanes);
                        alloc.fill(0);
                        scatter_chunk(&out, &extent, &md, &mut alloc);
                        Ok(alloc)
                    })
                    .await?;
                ctx.publish(&pos, alloc, DataState::Final)?;
            }
            Ok(())
        })
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// Halves the selected dimensions by averaging 2-element blocks. Partial
/// blocks at the border average only their valid elements. Spacing doubles
/// in the selected dimensions.
pub fn downsample_mean(input: &Node, dims: &[bool]) -> Result<Node> {
    let md = input.metadata();
    if dims.len() != md.num_dims() {
        return Err(Error::invalid(format!(
            "{} downsampling flags for a {}-dimensional tensor",
            dims.len(),
            md.num_dims()
        )));
    }
    let size: Vec<u64> = md
        .size()
        .iter()
        .zip(dims)
        .map(|(s, d)| if *d { s.div_ceil(2) } else { *s })
        .collect();
    let out = TensorMetaData::new(size, md.chunk_size().to_vec(), md.element_type())?;
    let e = input.embedding_or_unit();
    let spacing = e
        .spacing
        .iter()
        .zip(dims)
        .map(|(s, d)| if *d { s * 2.0 } else { *s })
        .collect();
    let flags: Vec<u64> = dims.iter().map(|d| *d as u64).collect();
    Ok(Node::new(
        "downsample_mean",
        ParamWriter::new().u64s(&flags).finish(),
        out,
        Some(EmbeddingData::new(spacing)?),
        vec![input.clone()],
        Arc::new(Downsample { dims: dims.to_vec() }),
    ))
}
