//! The operator library. Every operator is dimension-agnostic unless noted.

pub mod const_table;
pub mod conv;
pub mod downsample;
pub mod lod;
pub mod pointwise;
pub mod slice;
pub mod source;

pub use const_table::build_const_chunk_table;
pub use conv::{separable_conv, BINOMIAL};
pub use downsample::downsample_mean;
pub use lod::{build_lod, next_level, procedural_lod, single_level_lod, LodPyramid};
pub use pointwise::{pointwise, BinaryOp, Expr, UnaryOp};
pub use slice::slice;
pub use source::{constant, from_array, mandelbulb, mandelbulb_value, procedural, Generator};

use crate::chunk::{box_positions, linear_index, TensorMetaData};
use crate::engine::ChunkRef;

/// Chunk positions `[lo, hi)` of the chunks overlapping the element box
/// `[begin, end)`.
pub(crate) fn chunk_box(md: &TensorMetaData, begin: &[u64], end: &[u64]) -> (Vec<u64>, Vec<u64>) {
    let c = md.chunk_size();
    let lo = begin.iter().zip(c).map(|(b, c)| b / c).collect();
    let hi = end.iter().zip(c).map(|(e, c)| e.div_ceil(*c)).collect();
    (lo, hi)
}

/// Input chunks of a box in row-major order, as requested from the engine.
pub(crate) struct ChunkBox {
    lo: Vec<u64>,
    extent: Vec<u64>,
    chunks: Vec<ChunkRef>,
}

impl ChunkBox {
    pub fn new(lo: Vec<u64>, hi: &[u64], chunks: Vec<ChunkRef>) -> Self {
        let extent = lo.iter().zip(hi).map(|(a, b)| b - a).collect();
        ChunkBox { lo, extent, chunks }
    }

    pub fn positions(lo: &[u64], hi: &[u64]) -> Vec<Vec<u64>> {
        box_positions(lo, hi).collect()
    }

    /// Reads an element (all lanes into `out`) at global position `g`, which
    /// must lie inside the box.
    #[inline]
    fn read(&self, md: &TensorMetaData, g: &[u64], h: &mut [u64], l: &mut [u64], out: &mut [f64]) {
        let c = md.chunk_size();
        for i in 0..g.len() {
            h[i] = g[i] / c[i] - self.lo[i];
            l[i] = g[i] % c[i];
        }
        let chunk = &self.chunks[linear_index(h, &self.extent) as usize];
        let t = md.element_type();
        let e = linear_index(l, c) as usize * t.lanes as usize;
        for (k, o) in out.iter_mut().enumerate() {
            *o = t.scalar.read(chunk.bytes(), e + k);
        }
    }

    /// Gathers the element box starting at the signed position `begin` with
    /// `extent` elements per dimension into a dense row-major `f64` buffer
    /// (lanes innermost). Positions outside the tensor are clamped.
    pub fn gather(&self, md: &TensorMetaData, begin: &[i64], extent: &[u64]) -> Vec<f64> {
        let d = md.num_dims();
        let lanes = md.element_type().lanes as usize;
        let size = md.size();
        let n: u64 = extent.iter().product();
        let mut out = vec![0.0; n as usize * lanes];
        let mut g = vec![0u64; d];
        let mut h = vec![0u64; d];
        let mut l = vec![0u64; d];
        let mut tmp = vec![0.0; lanes];
        let row = extent[d - 1] as usize;
        let outer = &extent[..d - 1];
        let rows: u64 = outer.iter().product();
        for r in 0..rows {
            let o = crate::chunk::delinearize(r, outer);
            for i in 0..d - 1 {
                g[i] = (begin[i] + o[i] as i64).clamp(0, size[i] as i64 - 1) as u64;
            }
            let base = r as usize * row * lanes;
            for x in 0..row {
                g[d - 1] = (begin[d - 1] + x as i64).clamp(0, size[d - 1] as i64 - 1) as u64;
                self.read(md, &g, &mut h, &mut l, &mut tmp);
                out[base + x * lanes..base + (x + 1) * lanes].copy_from_slice(&tmp);
            }
        }
        out
    }
}

/// Writes a dense `f64` buffer covering `extent` elements at the origin of an
/// output chunk laid out with `chunk_size`.
pub(crate) fn scatter_chunk(
    values: &[f64],
    extent: &[u64],
    md: &TensorMetaData,
    out: &mut [u8],
) {
    let t = md.element_type();
    let lanes = t.lanes as usize;
    let c = md.chunk_size();
    let d = extent.len();
    let row = extent[d - 1] as usize;
    let outer = &extent[..d - 1];
    let rows: u64 = outer.iter().product();
    let mut p = vec![0u64; d];
    for r in 0..rows {
        let o = crate::chunk::delinearize(r, outer);
        p[..d - 1].copy_from_slice(&o);
        p[d - 1] = 0;
        let dst = linear_index(&p, c) as usize * lanes;
        let src = r as usize * row * lanes;
        for k in 0..row * lanes {
            t.scalar.write(out, dst + k, values[src + k]);
        }
    }
}
