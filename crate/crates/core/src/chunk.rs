//! Tensor geometry, chunk addressing and deterministic identities.
//!
//! A tensor of size `S` is partitioned into chunks of size `C`. A global
//! position `g` maps to chunk position `h_i = g_i / C_i` and local position
//! `l_i = g_i % C_i`. Chunk payloads are always stored full-size (`C` elements
//! per dimension, row-major, last dimension fastest); elements outside the
//! logical region of a border chunk hold the element-type zero.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dtype::ElementType;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorMetaData {
    size: Vec<u64>,
    chunk_size: Vec<u64>,
    element_type: ElementType,
}

impl TensorMetaData {
    pub fn new(size: Vec<u64>, chunk_size: Vec<u64>, element_type: ElementType) -> Result<Self> {
        if size.is_empty() {
            return Err(Error::invalid("tensor must have at least one dimension"));
        }
        if size.len() != chunk_size.len() {
            return Err(Error::ShapeMismatch(format!(
                "size has {} dimensions but chunk size has {}",
                size.len(),
                chunk_size.len()
            )));
        }
        if size.iter().chain(chunk_size.iter()).any(|&v| v == 0) {
            return Err(Error::invalid(format!(
                "sizes must be positive (size {size:?}, chunk {chunk_size:?})"
            )));
        }
        Ok(TensorMetaData {
            size,
            chunk_size,
            element_type,
        })
    }

    pub fn num_dims(&self) -> usize {
        self.size.len()
    }

    pub fn size(&self) -> &[u64] {
        &self.size
    }

    pub fn chunk_size(&self) -> &[u64] {
        &self.chunk_size
    }

    pub fn element_type(&self) -> ElementType {
        self.element_type
    }

    pub fn with_element_type(&self, element_type: ElementType) -> Self {
        TensorMetaData {
            element_type,
            ..self.clone()
        }
    }

    pub fn chunk_grid_dims(&self) -> Vec<u64> {
        chunk_grid_dims(&self.size, &self.chunk_size)
    }

    pub fn num_chunks(&self) -> u64 {
        self.chunk_grid_dims().iter().product()
    }

    pub fn num_elements(&self) -> u64 {
        self.size.iter().product()
    }

    /// Elements in one (full-size) chunk payload.
    pub fn chunk_elements(&self) -> usize {
        self.chunk_size.iter().product::<u64>() as usize
    }

    pub fn chunk_bytes(&self) -> usize {
        self.chunk_elements() * self.element_type.size()
    }

    pub fn global_to_chunk(&self, g: &[u64]) -> Result<ChunkCoords> {
        self.check_position(g)?;
        global_to_chunk(g, &self.chunk_size)
    }

    pub fn chunk_logical_region(&self, h: &[u64]) -> Result<(Vec<u64>, Vec<u64>)> {
        self.check_chunk_pos(h)?;
        let begin: Vec<u64> = h
            .iter()
            .zip(&self.chunk_size)
            .map(|(h, c)| h * c)
            .collect();
        let end = begin
            .iter()
            .zip(&self.chunk_size)
            .zip(&self.size)
            .map(|((b, c), s)| (b + c).min(*s))
            .collect();
        Ok((begin, end))
    }

    pub fn check_position(&self, g: &[u64]) -> Result<()> {
        if g.len() != self.num_dims() || g.iter().zip(&self.size).any(|(g, s)| g >= s) {
            return Err(Error::InvalidCoordinate(format!(
                "position {g:?} outside tensor of size {:?}",
                self.size
            )));
        }
        Ok(())
    }

    pub fn check_chunk_pos(&self, h: &[u64]) -> Result<()> {
        let grid = self.chunk_grid_dims();
        if h.len() != grid.len() || h.iter().zip(&grid).any(|(h, n)| h >= n) {
            return Err(Error::InvalidCoordinate(format!(
                "chunk position {h:?} outside chunk grid {grid:?}"
            )));
        }
        Ok(())
    }

    /// Row-major linear index of a chunk position in the chunk grid.
    pub fn chunk_index(&self, h: &[u64]) -> u64 {
        linear_index(h, &self.chunk_grid_dims())
    }

    pub fn chunk_pos(&self, index: u64) -> Vec<u64> {
        delinearize(index, &self.chunk_grid_dims())
    }

    pub fn all_chunk_positions(&self) -> impl Iterator<Item = Vec<u64>> {
        let grid = self.chunk_grid_dims();
        let n: u64 = grid.iter().product();
        (0..n).map(move |i| delinearize(i, &grid))
    }
}

/// Physical interpretation of a tensor: element spacing per dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingData {
    pub spacing: Vec<f64>,
}

impl EmbeddingData {
    pub fn new(spacing: Vec<f64>) -> Result<Self> {
        if spacing.is_empty() || spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::invalid(format!(
                "spacing must be finite and positive, got {spacing:?}"
            )));
        }
        Ok(EmbeddingData { spacing })
    }

    pub fn unit(dims: usize) -> Self {
        EmbeddingData {
            spacing: vec![1.0; dims],
        }
    }

    pub fn physical_size(&self, md: &TensorMetaData) -> Vec<f64> {
        self.spacing
            .iter()
            .zip(md.size())
            .map(|(s, n)| s * *n as f64)
            .collect()
    }

    pub fn check_against(&self, md: &TensorMetaData) -> Result<()> {
        if self.spacing.len() != md.num_dims() {
            return Err(Error::ShapeMismatch(format!(
                "spacing has {} dimensions, tensor has {}",
                self.spacing.len(),
                md.num_dims()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChunkCoords {
    pub chunk_pos: Vec<u64>,
    pub local_pos: Vec<u64>,
}

pub fn chunk_grid_dims(size: &[u64], chunk_size: &[u64]) -> Vec<u64> {
    size.iter()
        .zip(chunk_size)
        .map(|(s, c)| s.div_ceil(*c))
        .collect()
}

pub fn global_to_chunk(g: &[u64], chunk_size: &[u64]) -> Result<ChunkCoords> {
    if g.len() != chunk_size.len() {
        return Err(Error::InvalidCoordinate(format!(
            "position {g:?} has wrong dimensionality for chunk size {chunk_size:?}"
        )));
    }
    Ok(ChunkCoords {
        chunk_pos: g.iter().zip(chunk_size).map(|(g, c)| g / c).collect(),
        local_pos: g.iter().zip(chunk_size).map(|(g, c)| g % c).collect(),
    })
}

pub fn linear_index(pos: &[u64], dims: &[u64]) -> u64 {
    pos.iter().zip(dims).fold(0, |acc, (p, d)| acc * d + p)
}

pub fn delinearize(mut index: u64, dims: &[u64]) -> Vec<u64> {
    let mut out = vec![0; dims.len()];
    for (o, d) in out.iter_mut().zip(dims).rev() {
        *o = index % d;
        index /= d;
    }
    out
}

/// Iterates all positions of the box `[begin, end)` in row-major order.
pub fn box_positions(begin: &[u64], end: &[u64]) -> impl Iterator<Item = Vec<u64>> {
    let extent: Vec<u64> = begin.iter().zip(end).map(|(b, e)| e.saturating_sub(*b)).collect();
    let n: u64 = extent.iter().product();
    let begin = begin.to_vec();
    (0..n).map(move |i| {
        let mut p = delinearize(i, &extent);
        for (p, b) in p.iter_mut().zip(&begin) {
            *p += b;
        }
        p
    })
}

/// Copies an n-d box of `extent` elements between two row-major buffers.
#[allow(clippy::too_many_arguments)]
pub fn copy_box(
    src: &[u8],
    src_dims: &[u64],
    src_origin: &[u64],
    dst: &mut [u8],
    dst_dims: &[u64],
    dst_origin: &[u64],
    extent: &[u64],
    elem_size: usize,
) {
    let d = extent.len();
    if extent.iter().any(|&e| e == 0) {
        return;
    }
    let row = extent[d - 1] as usize * elem_size;
    let outer = &extent[..d - 1];
    let rows: u64 = outer.iter().product();
    let mut sp = vec![0u64; d];
    let mut dp = vec![0u64; d];
    for r in 0..rows {
        let o = delinearize(r, outer);
        for i in 0..d - 1 {
            sp[i] = src_origin[i] + o[i];
            dp[i] = dst_origin[i] + o[i];
        }
        sp[d - 1] = src_origin[d - 1];
        dp[d - 1] = dst_origin[d - 1];
        let s = linear_index(&sp, src_dims) as usize * elem_size;
        let t = linear_index(&dp, dst_dims) as usize * elem_size;
        dst[t..t + row].copy_from_slice(&src[s..s + row]);
    }
}

/// 128-bit identity of an operator, derived from its name, parameters and inputs.
#[derive(Copy, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OperatorId(pub [u8; 16]);

/// 128-bit identity of one chunk of one operator.
#[derive(Copy, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ChunkId(pub [u8; 16]);

fn truncate(digest: &[u8]) -> [u8; 16] {
    digest[..16].try_into().unwrap()
}

/// SHA-256 over a length-prefixed encoding, truncated to 128 bits.
pub fn operator_id(name: &str, params: &[u8], inputs: &[OperatorId]) -> OperatorId {
    let mut h = Sha256::new();
    h.update(b"tessera/op/v1\0");
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    h.update((params.len() as u64).to_le_bytes());
    h.update(params);
    h.update((inputs.len() as u64).to_le_bytes());
    for i in inputs {
        h.update(i.0);
    }
    OperatorId(truncate(&h.finalize()))
}

pub fn chunk_id(op: OperatorId, h: &[u64]) -> ChunkId {
    let mut hasher = Sha256::new();
    hasher.update(b"tessera/chunk/v1\0");
    hasher.update(op.0);
    hasher.update((h.len() as u64).to_le_bytes());
    for v in h {
        hasher.update(v.to_le_bytes());
    }
    ChunkId(truncate(&hasher.finalize()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl fmt::Debug for OperatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "OperatorId({})", hex(&self.0))
    }
}

impl fmt::Display for OperatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex(&self.0[..8]))
    }
}

impl fmt::Debug for ChunkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ChunkId({})", hex(&self.0))
    }
}

/// Canonical parameter serialization used to derive operator ids.
#[derive(Default, Clone)]
pub struct ParamWriter {
    buf: Vec<u8>,
}

impl ParamWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u64(mut self, v: u64) -> Self {
        self.buf.push(b'u');
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64(mut self, v: f64) -> Self {
        self.buf.push(b'f');
        self.buf.extend_from_slice(&v.to_bits().to_le_bytes());
        self
    }

    pub fn bytes(mut self, v: &[u8]) -> Self {
        self.buf.push(b'b');
        self.buf.extend_from_slice(&(v.len() as u64).to_le_bytes());
        self.buf.extend_from_slice(v);
        self
    }

    pub fn str(self, v: &str) -> Self {
        self.bytes(v.as_bytes())
    }

    pub fn u64s(self, v: &[u64]) -> Self {
        v.iter().fold(self.u64(v.len() as u64), |w, x| w.u64(*x))
    }

    pub fn f64s(self, v: &[f64]) -> Self {
        v.iter().fold(self.u64(v.len() as u64), |w, x| w.f64(*x))
    }

    pub fn metadata(self, md: &TensorMetaData) -> Self {
        let et = md.element_type();
        self.u64s(md.size())
            .u64s(md.chunk_size())
            .u64(et.scalar.code() as u64)
            .u64(et.lanes as u64)
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}
