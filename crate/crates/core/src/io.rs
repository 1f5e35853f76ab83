//! Chunked tensor files, raw-array import and LOD pyramid manifests.
//!
//! A chunked file starts with a little-endian header:
//!
//! | field        | type        |
//! |--------------|-------------|
//! | magic        | `b"PLCT"`   |
//! | version      | u32         |
//! | element type | u8 code     |
//! | lanes        | u8          |
//! | d            | u8          |
//! | size         | d × u64     |
//! | chunk size   | d × u64     |
//! | spacing      | d × f64     |
//! | offsets      | u64 per chunk, row-major chunk order, 0 = absent |
//!
//! followed by chunk payloads of `product(chunk size) × element size` bytes.

use std::any::Any;
use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::Ordering;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chunk::{copy_box, EmbeddingData, ParamWriter, TensorMetaData};
use crate::dtype::{ElementType, ScalarType};
use crate::engine::{Runtime, TaskContext};
use crate::error::{Error, Result};
use crate::graph::{Node, Operator, TaskFuture};
use crate::operators::{build_const_chunk_table, next_level, LodPyramid};
use crate::store::DataState;

pub const MAGIC: [u8; 4] = *b"PLCT";
pub const VERSION: u32 = 1;

/// Refuse offset tables beyond this many chunks (32 GiB of offsets).
const MAX_CHUNKS: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq)]
pub struct ChunkedFileHeader {
    pub metadata: TensorMetaData,
    pub spacing: Vec<f64>,
    pub offsets: Vec<u64>,
}

fn header_len(d: usize, chunks: u64) -> u64 {
    4 + 4 + 3 + 24 * d as u64 + 8 * chunks
}

impl ChunkedFileHeader {
    fn new(metadata: TensorMetaData, spacing: Vec<f64>) -> Self {
        let n = metadata.num_chunks() as usize;
        ChunkedFileHeader {
            metadata,
            spacing,
            offsets: vec![0; n],
        }
    }

    pub fn len(&self) -> u64 {
        header_len(self.metadata.num_dims(), self.offsets.len() as u64)
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn embedding(&self) -> EmbeddingData {
        EmbeddingData::new(self.spacing.clone()).expect("validated on read")
    }

    /// Number of chunks with a stored payload.
    pub fn present_chunks(&self) -> usize {
        self.offsets.iter().filter(|o| **o != 0).count()
    }

    fn to_bytes(&self) -> Vec<u8> {
        let md = &self.metadata;
        let t = md.element_type();
        let mut b = Vec::with_capacity(self.len() as usize);
        b.extend_from_slice(&MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.push(t.scalar.code());
        b.push(t.lanes);
        b.push(md.num_dims() as u8);
        for v in md.size().iter().chain(md.chunk_size()) {
            b.extend_from_slice(&v.to_le_bytes());
        }
        for s in &self.spacing {
            b.extend_from_slice(&s.to_le_bytes());
        }
        for o in &self.offsets {
            b.extend_from_slice(&o.to_le_bytes());
        }
        b
    }

    /// Reads and validates the header of the file at `path`.
    pub fn read(path: &Path) -> Result<Self> {
        let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
        let file_len = f.metadata().map_err(|e| Error::io(path, e))?.len();
        Self::read_from(path, &mut f, file_len)
    }

    fn read_from(path: &Path, f: &mut File, file_len: u64) -> Result<Self> {
        let truncated = || Error::format(path, "truncated chunked file");
        let mut fixed = [0u8; 11];
        f.read_exact(&mut fixed).map_err(|_| truncated())?;
        if fixed[..4] != MAGIC {
            return Err(Error::format(path, "not a chunked tensor file (bad magic)"));
        }
        let version = u32::from_le_bytes(fixed[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let scalar = ScalarType::from_code(fixed[8])
            .ok_or_else(|| Error::format(path, format!("unknown element type code {}", fixed[8])))?;
        let t = ElementType::vec(scalar, fixed[9]).map_err(|e| Error::format(path, e.to_string()))?;
        let d = fixed[10] as usize;
        let mut dims = vec![0u8; 24 * d];
        f.read_exact(&mut dims).map_err(|_| truncated())?;
        let words: Vec<[u8; 8]> = dims.chunks_exact(8).map(|c| c.try_into().unwrap()).collect();
        let size: Vec<u64> = words[..d].iter().map(|w| u64::from_le_bytes(*w)).collect();
        let chunk: Vec<u64> = words[d..2 * d].iter().map(|w| u64::from_le_bytes(*w)).collect();
        let spacing: Vec<f64> = words[2 * d..].iter().map(|w| f64::from_le_bytes(*w)).collect();
        let md = TensorMetaData::new(size, chunk, t).map_err(|e| Error::format(path, e.to_string()))?;
        let emb = EmbeddingData::new(spacing.clone()).map_err(|e| Error::format(path, e.to_string()))?;
        emb.check_against(&md).map_err(|e| Error::format(path, e.to_string()))?;
        let n = md.num_chunks();
        if n > MAX_CHUNKS {
            return Err(Error::format(path, format!("{n} chunks exceed the supported offset table size")));
        }
        let hlen = header_len(d, n);
        if file_len < hlen {
            return Err(truncated());
        }
        let mut table = vec![0u8; 8 * n as usize];
        f.read_exact(&mut table).map_err(|_| truncated())?;
        let offsets: Vec<u64> = table
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let payload = md.chunk_bytes() as u64;
        for (i, o) in offsets.iter().enumerate() {
            if *o == 0 {
                continue;
            }
            if *o < hlen {
                return Err(Error::format(path, format!("chunk {i} points into the header")));
            }
            if o.checked_add(payload).is_none_or(|end| end > file_len) {
                return Err(truncated());
            }
        }
        Ok(ChunkedFileHeader {
            metadata: md,
            spacing,
            offsets,
        })
    }
}

/// Appends chunk payloads to a new file and writes the offset table on
/// [`ChunkedWriter::finish`].
pub struct ChunkedWriter {
    path: PathBuf,
    out: BufWriter<File>,
    header: ChunkedFileHeader,
    end: u64,
}

impl ChunkedWriter {
    pub fn create(path: &Path, md: &TensorMetaData, embedding: &EmbeddingData) -> Result<Self> {
        embedding.check_against(md)?;
        if md.num_chunks() > MAX_CHUNKS {
            return Err(Error::invalid(format!("{} chunks exceed the file format limit", md.num_chunks())));
        }
        let header = ChunkedFileHeader::new(md.clone(), embedding.spacing.clone());
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(f);
        out.write_all(&header.to_bytes()).map_err(|e| Error::io(path, e))?;
        Ok(ChunkedWriter {
            path: path.to_path_buf(),
            out,
            end: header.len(),
            header,
        })
    }

    pub fn write_chunk(&mut self, pos: &[u64], payload: &[u8]) -> Result<()> {
        let md = &self.header.metadata;
        md.check_chunk_pos(pos)?;
        if payload.len() != md.chunk_bytes() {
            return Err(Error::ShapeMismatch(format!(
                "chunk payload has {} bytes, expected {}",
                payload.len(),
                md.chunk_bytes()
            )));
        }
        let i = md.chunk_index(pos) as usize;
        if self.header.offsets[i] != 0 {
            return Err(Error::invalid(format!("chunk {pos:?} written twice")));
        }
        self.out.write_all(payload).map_err(|e| Error::io(&self.path, e))?;
        self.header.offsets[i] = self.end;
        self.end += payload.len() as u64;
        Ok(())
    }

    pub fn finish(self) -> Result<ChunkedFileHeader> {
        let path = self.path;
        let mut f = self.out.into_inner().map_err(|e| Error::io(&path, e.into_error()))?;
        f.seek(SeekFrom::Start(0)).map_err(|e| Error::io(&path, e))?;
        f.write_all(&self.header.to_bytes()).map_err(|e| Error::io(&path, e))?;
        f.sync_all().map_err(|e| Error::io(&path, e))?;
        Ok(self.header)
    }
}

/// Converts a dense row-major array file into a chunked file, one slab of
/// chunk rows at a time. Padding in border chunks is zero.
pub fn import_raw(input: &Path, md: &TensorMetaData, embedding: Option<&EmbeddingData>, output: &Path) -> Result<ChunkedFileHeader> {
    let es = md.element_type().size();
    let expected = md.num_elements() * es as u64;
    let f = File::open(input).map_err(|e| Error::io(input, e))?;
    let actual = f.metadata().map_err(|e| Error::io(input, e))?.len();
    if actual != expected {
        return Err(Error::ShapeMismatch(format!(
            "{} has {actual} bytes, shape {:?} of {} needs {expected}",
            input.display(),
            md.size(),
            md.element_type()
        )));
    }
    let emb = embedding.cloned().unwrap_or_else(|| EmbeddingData::unit(md.num_dims()));
    let mut w = ChunkedWriter::create(output, md, &emb)?;
    let d = md.num_dims();
    let size = md.size();
    let c = md.chunk_size();
    let grid = md.chunk_grid_dims();
    let row_bytes = size[1..].iter().product::<u64>() * es as u64;
    let mut slab = Vec::new();
    let mut chunk = vec![0u8; md.chunk_bytes()];
    for h0 in 0..grid[0] {
        let first = h0 * c[0];
        let rows = c[0].min(size[0] - first);
        slab.resize((rows * row_bytes) as usize, 0);
        f.read_exact_at(&mut slab, first * row_bytes).map_err(|e| Error::io(input, e))?;
        let mut slab_size = size.to_vec();
        slab_size[0] = rows;
        let mut slab_md_grid = grid.clone();
        slab_md_grid[0] = 1;
        for rest in crate::chunk::box_positions(&vec![0; d], &slab_md_grid) {
            let mut pos = rest.clone();
            pos[0] = h0;
            let (begin, end) = md.chunk_logical_region(&pos)?;
            let extent: Vec<u64> = begin.iter().zip(&end).map(|(b, e)| e - b).collect();
            let mut src_begin = begin.clone();
            src_begin[0] = 0;
            chunk.fill(0);
            copy_box(&slab, &slab_size, &src_begin, &mut chunk, c, &vec![0; d], &extent, es);
            w.write_chunk(&pos, &chunk)?;
        }
    }
    w.finish()
}

struct ChunkedFileSource {
    path: PathBuf,
    file: Arc<File>,
    offsets: Arc<Vec<u64>>,
}

impl Operator for ChunkedFileSource {
    fn compute(self: Arc<Self>, ctx: TaskContext, positions: Vec<Vec<u64>>) -> TaskFuture {
        Box::pin(async move {
            let md = ctx.node().metadata().clone();
            let counter = ctx.bytes_read_counter();
            let mut jobs = Vec::with_capacity(positions.len());
            for pos in &positions {
                let mut alloc = ctx.alloc_chunk().await?;
                let offset = self.offsets[md.chunk_index(pos) as usize];
                let file = self.file.clone();
                let path = self.path.clone();
                let counter = counter.clone();
                jobs.push(ctx.run_job(move || {
                    if offset == 0 {
                        alloc.fill(0);
                    } else {
                        file.read_exact_at(&mut alloc, offset).map_err(|e| Error::io(&path, e))?;
                        counter.fetch_add(alloc.len() as u64, Ordering::Relaxed);
                    }
                    Ok(alloc)
                }));
            }
            for (pos, job) in positions.iter().zip(jobs) {
                ctx.publish(pos, job.await?, DataState::Final)?;
            }
            Ok(())
        })
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// A source node reading chunks of the chunked file at `path`. Absent chunks
/// read as zeros.
pub fn open_chunked(path: &Path) -> Result<Node> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let file_len = f.metadata().map_err(|e| Error::io(path, e))?.len();
    let header = ChunkedFileHeader::read_from(path, &mut f, file_len)?;
    let digest = Sha256::digest(header.to_bytes());
    let params = ParamWriter::new()
        .str(&path.to_string_lossy())
        .u64(file_len)
        .bytes(&digest)
        .finish();
    let emb = header.embedding();
    Ok(Node::new(
        "chunked_file",
        params,
        header.metadata,
        Some(emb),
        Vec::new(),
        Arc::new(ChunkedFileSource {
            path: path.to_path_buf(),
            file: Arc::new(f),
            offsets: Arc::new(header.offsets),
        }),
    ))
}

/// Resolves every chunk of `node` (Final) and writes them to `path`.
pub fn save_tensor(rt: &Runtime, node: &Node, path: &Path) -> Result<ChunkedFileHeader> {
    let mut w = ChunkedWriter::create(path, node.metadata(), &node.embedding_or_unit())?;
    rt.for_each_chunk(node, |pos, chunk| w.write_chunk(pos, chunk.bytes()))?;
    w.finish()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestLevel {
    /// Chunked file, relative to the manifest's directory unless absolute.
    pub path: PathBuf,
    pub spacing: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub const_table: Option<PathBuf>,
}

/// JSON description of a pyramid stored as one chunked file per level:
///
/// ```json
/// { "levels": [ { "path": "vol.l0.plct", "spacing": [1, 1, 1],
///                 "const_table": "vol.l0.table.plct" } ] }
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PyramidManifest {
    pub levels: Vec<ManifestLevel>,
}

fn resolve_rel(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl PyramidManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: PyramidManifest = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if m.levels.is_empty() {
            return Err(Error::format(path, "manifest lists no levels"));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Opens the level files (and const tables) listed in the manifest at
    /// `path`. Level spacing in the manifest overrides the file headers.
    pub fn open(&self, path: &Path) -> Result<LodPyramid> {
        let base = path.parent().unwrap_or(Path::new(""));
        let mut levels = Vec::new();
        let mut tables = Vec::new();
        for l in &self.levels {
            let node = open_chunked(&resolve_rel(base, &l.path))?;
            let emb = EmbeddingData::new(l.spacing.clone()).map_err(|e| Error::format(path, e.to_string()))?;
            emb.check_against(node.metadata()).map_err(|e| Error::format(path, e.to_string()))?;
            levels.push(node.with_embedding(emb));
            tables.push(match &l.const_table {
                Some(t) => Some(open_chunked(&resolve_rel(base, t))?),
                None => None,
            });
        }
        let lod = LodPyramid::new(levels).map_err(|e| Error::format(path, e.to_string()))?;
        lod.with_const_tables(tables).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Loads the manifest at `path` and opens its pyramid.
pub fn open_pyramid(path: &Path) -> Result<LodPyramid> {
    PyramidManifest::load(path)?.open(path)
}

/// Builds the LOD pyramid of the chunked file `input` and writes each level
/// (and optionally its const chunk table) next to `manifest`. Every level is
/// computed from the previous level's file, so memory stays bounded by the
/// runtime's store capacity regardless of the volume size.
pub fn build_lod_offline(rt: &Runtime, input: &Path, manifest: &Path, const_tables: bool) -> Result<PyramidManifest> {
    let dir = manifest.parent().unwrap_or(Path::new("")).to_path_buf();
    let stem = manifest
        .file_stem()
        .ok_or_else(|| Error::invalid(format!("{} is not a file path", manifest.display())))?
        .to_string_lossy()
        .into_owned();
    let mut current = open_chunked(input)?;
    let mut levels = Vec::new();
    for i in 0.. {
        let name = PathBuf::from(format!("{stem}.l{i}.plct"));
        let file = dir.join(&name);
        if i == 0 {
            std::fs::copy(input, &file).map_err(|e| Error::io(&file, e))?;
        } else {
            save_tensor(rt, &current, &file)?;
        }
        let level = open_chunked(&file)?;
        let const_table = if const_tables {
            let tname = PathBuf::from(format!("{stem}.l{i}.table.plct"));
            save_tensor(rt, &build_const_chunk_table(&level, None)?, &dir.join(&tname))?;
            Some(tname)
        } else {
            None
        };
        levels.push(ManifestLevel {
            path: name,
            spacing: level.embedding_or_unit().spacing,
            const_table,
        });
        match next_level(&level)? {
            Some(n) => current = n,
            None => break,
        }
        rt.clear_caches();
    }
    let m = PyramidManifest { levels };
    m.save(manifest)?;
    Ok(m)
}
