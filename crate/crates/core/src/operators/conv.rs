//! Separable convolution with clamped borders.

use std::any::Any;
use std::sync::Arc;

use super::{chunk_box, scatter_chunk, ChunkBox};
use crate::chunk::ParamWriter;
use crate::engine::TaskContext;
use crate::error::{Error, Result};
use crate::graph::{Node, Operator, TaskFuture};
use crate::store::DataState;

/// The binomial smoothing kernel.
pub const BINOMIAL: [f64; 3] = [0.25, 0.5, 0.25];

struct SeparableConv {
    kernels: Vec<Vec<f64>>,
}

/// Convolves `data` (row-major, `extent`, `lanes` innermost) along `dim`,
/// shrinking that dimension by `kernel.len() - 1`.
fn convolve_dim(data: &[f64], extent: &mut [u64], lanes: usize, dim: usize, kernel: &[f64]) -> Vec<f64> {
    let r = kernel.len() - 1;
    if r == 0 && kernel[0] == 1.0 {
        return data.to_vec();
    }
    let inner: usize = extent[dim + 1..].iter().product::<u64>() as usize * lanes;
    let outer: usize = extent[..dim].iter().product::<u64>() as usize;
    let n_in = extent[dim] as usize;
    let n_out = n_in - r;
    let mut out = vec![0.0; outer * n_out * inner];
    for o in 0..outer {
        let src = &data[o * n_in * inner..(o + 1) * n_in * inner];
        let dst = &mut out[o * n_out * inner..(o + 1) * n_out * inner];
        for x in 0..n_out {
            let d = &mut dst[x * inner..(x + 1) * inner];
            for (k, w) in kernel.iter().enumerate() {
                let s = &src[(x + k) * inner..(x + k + 1) * inner];
                for (a, b) in d.iter_mut().zip(s) {
                    *a += w * b;
                }
            }
        }
    }
    extent[dim] = n_out as u64;
    out
}

impl Operator for SeparableConv {
    fn compute(self: Arc<Self>, ctx: TaskContext, positions: Vec<Vec<u64>>) -> TaskFuture {
        Box::pin(async move {
            let node = ctx.node().clone();
            let input = node.inputs()[0].clone();
            let md = node.metadata().clone();
            let imd = input.metadata().clone();
            let radius: Vec<u64> = self.kernels.iter().map(|k| (k.len() / 2) as u64).collect();
            for pos in positions {
                let (begin, end) = md.chunk_logical_region(&pos)?;
                let ibegin: Vec<u64> = begin.iter().zip(&radius).map(|(b, r)| b.saturating_sub(*r)).collect();
                let iend: Vec<u64> = end
                    .iter()
                    .zip(&radius)
                    .zip(md.size())
                    .map(|((e, r), s)| (e + r).min(*s))
                    .collect();
                let (lo, hi) = chunk_box(&imd, &ibegin, &iend);
                let chunks = ctx
                    .request_chunks(&input, ChunkBox::positions(&lo, &hi))
                    .await?;
                let mut alloc = ctx.alloc_chunk().await?;
                let this = self.clone();
                let (md, imd, radius) = (md.clone(), imd.clone(), radius.clone());
                let alloc = ctx
                    .run_job(move || {
                        let cb = ChunkBox::new(lo, &hi, chunks);
                        let start: Vec<i64> = begin.iter().zip(&radius).map(|(b, r)| *b as i64 - *r as i64).collect();
                        let mut extent: Vec<u64> = begin
                            .iter()
                            .zip(&end)
                            .zip(&radius)
                            .map(|((b, e), r)| e - b + 2 * r)
                            .collect();
                        let mut data = cb.gather(&imd, &start, &extent);
                        drop(cb);
                        let lanes = imd.element_type().lanes as usize;
                        for (dim, k) in this.kernels.iter().enumerate() {
                            data = convolve_dim(&data, &mut extent, lanes, dim, k);
                        }
                        alloc.fill(0);
                        scatter_chunk(&data, &extent, &md, &mut alloc);
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

/// Convolves `input` successively along each dimension with the given odd
/// 1-D kernels. Reads outside the tensor clamp to the nearest element.
pub fn separable_conv(input: &Node, kernels: &[Vec<f64>]) -> Result<Node> {
    let md = input.metadata();
    if kernels.len() != md.num_dims() {
        return Err(Error::invalid(format!(
            "{} kernels for a {}-dimensional tensor",
            kernels.len(),
            md.num_dims()
        )));
    }
    for (k, s) in kernels.iter().zip(md.size()) {
        if k.len() % 2 == 0 {
            return Err(Error::invalid("convolution kernels must have odd length"));
        }
        if k.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("convolution kernel coefficients must be finite"));
        }
        if k.len() as u64 > 2 * s + 1 {
            return Err(Error::invalid(format!(
                "kernel of length {} is too long for a dimension of size {s}",
                k.len()
            )));
        }
    }
    let mut p = ParamWriter::new();
    for k in kernels {
        p = p.f64s(k);
    }
    Ok(Node::new(
        "separable_conv",
        p.finish(),
        md.clone(),
        input.embedding().cloned(),
        vec![input.clone()],
        Arc::new(SeparableConv {
            kernels: kernels.to_vec(),
        }),
    ))
}
