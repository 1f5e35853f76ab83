//! Source operators: in-memory arrays and procedural generators.

use std::any::Any;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::chunk::{box_positions, copy_box, linear_index, EmbeddingData, ParamWriter, TensorMetaData};
use crate::engine::TaskContext;
use crate::error::{Error, Result};
use crate::graph::{Node, Operator, TaskFuture};
use crate::store::DataState;

struct ArraySource {
    data: Arc<Vec<u8>>,
}

impl Operator for ArraySource {
    fn compute(self: Arc<Self>, ctx: TaskContext, positions: Vec<Vec<u64>>) -> TaskFuture {
        Box::pin(async move {
            let md = ctx.node().metadata().clone();
            for pos in positions {
                let mut alloc = ctx.alloc_chunk().await?;
                let data = self.data.clone();
                let md = md.clone();
                let p = pos.clone();
                let alloc = ctx
                    .run_job(move || {
                        let (begin, end) = md.chunk_logical_region(&p)?;
                        let extent: Vec<u64> = begin.iter().zip(&end).map(|(b, e)| e - b).collect();
                        alloc.fill(0);
                        copy_box(
                            &data,
                            md.size(),
                            &begin,
                            &mut alloc,
                            md.chunk_size(),
                            &vec![0; md.num_dims()],
                            &extent,
                            md.element_type().size(),
                        );
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

/// A tensor backed by a dense row-major array. Border chunks are zero-padded.
pub fn from_array(data: Vec<u8>, md: TensorMetaData, embedding: Option<EmbeddingData>) -> Result<Node> {
    let expected = md.num_elements() as usize * md.element_type().size();
    if data.len() != expected {
        return Err(Error::ShapeMismatch(format!(
            "array has {} bytes, metadata {:?} {} needs {expected}",
            data.len(),
            md.size(),
            md.element_type()
        )));
    }
    if let Some(e) = &embedding {
        e.check_against(&md)?;
    }
    let digest = Sha256::digest(&data);
    let params = ParamWriter::new().bytes(&digest).finish();
    Ok(Node::new(
        "array",
        params,
        md,
        embedding,
        Vec::new(),
        Arc::new(ArraySource { data: Arc::new(data) }),
    ))
}

/// A pure function of position used to synthesize tensors on demand.
pub trait Generator: Send + Sync + 'static {
    /// Stable name used in operator ids.
    fn name(&self) -> &str;

    /// Canonical parameter bytes used in operator ids.
    fn params(&self) -> Vec<u8> {
        Vec::new()
    }

    /// Value at the normalized position `p` in `[0, 1)^d`, where element `g`
    /// of a tensor of size `S` sits at `(g + 0.5) / S`.
    fn value(&self, p: &[f64]) -> f64;

    /// The value every element has, if the generator is constant.
    fn uniform(&self) -> Option<f64> {
        None
    }
}

struct Procedural {
    generator: Arc<dyn Generator>,
}

fn generate(g: &dyn Generator, md: &TensorMetaData, pos: &[u64], out: &mut [u8]) -> Result<()> {
    let (begin, end) = md.chunk_logical_region(pos)?;
    let t = md.element_type();
    let lanes = t.lanes as usize;
    let c = md.chunk_size();
    let size = md.size();
    out.fill(0);
    let uniform = g.uniform();
    let mut p = vec![0.0; md.num_dims()];
    let mut local = vec![0u64; md.num_dims()];
    for gpos in box_positions(&begin, &end) {
        let v = match uniform {
            Some(v) => v,
            None => {
                for i in 0..p.len() {
                    p[i] = (gpos[i] as f64 + 0.5) / size[i] as f64;
                }
                g.value(&p)
            }
        };
        for i in 0..local.len() {
            local[i] = gpos[i] - begin[i];
        }
        let e = linear_index(&local, c) as usize * lanes;
        for k in 0..lanes {
            t.scalar.write(out, e + k, v);
        }
    }
    Ok(())
}

impl Operator for Procedural {
    fn compute(self: Arc<Self>, ctx: TaskContext, positions: Vec<Vec<u64>>) -> TaskFuture {
        Box::pin(async move {
            let md = ctx.node().metadata().clone();
            let mut jobs = Vec::with_capacity(positions.len());
            for pos in &positions {
                let mut alloc = ctx.alloc_chunk().await?;
                let g = self.generator.clone();
                let md = md.clone();
                let p = pos.clone();
                jobs.push(ctx.run_job(move || {
                    generate(g.as_ref(), &md, &p, &mut alloc)?;
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

/// The common value of every element if `node` is a constant procedural source.
pub(crate) fn uniform_source_value(node: &Node) -> Option<f64> {
    let v = node.downcast::<Procedural>()?.generator.uniform()?;
    Some(node.metadata().element_type().scalar.convert(v))
}

/// A tensor whose chunks are synthesized by `generator` when requested; it
/// needs no backing storage regardless of its logical size.
pub fn procedural(
    generator: Arc<dyn Generator>,
    md: TensorMetaData,
    embedding: Option<EmbeddingData>,
) -> Result<Node> {
    if let Some(e) = &embedding {
        e.check_against(&md)?;
    }
    let params = ParamWriter::new()
        .str(generator.name())
        .bytes(&generator.params())
        .finish();
    Ok(Node::new(
        "procedural",
        params,
        md,
        embedding,
        Vec::new(),
        Arc::new(Procedural { generator }),
    ))
}

pub(crate) struct Constant(pub f64);

impl Generator for Constant {
    fn name(&self) -> &str {
        "constant"
    }

    fn params(&self) -> Vec<u8> {
        ParamWriter::new().f64(self.0).finish()
    }

    fn value(&self, _p: &[f64]) -> f64 {
        self.0
    }

    fn uniform(&self) -> Option<f64> {
        Some(self.0)
    }
}

/// A tensor with every element equal to `value`.
pub fn constant(value: f64, md: TensorMetaData, embedding: Option<EmbeddingData>) -> Result<Node> {
    procedural(Arc::new(Constant(value)), md, embedding)
}

pub(crate) struct Mandelbulb;

pub const MANDELBULB_POWER: f64 = 8.0;
pub const MANDELBULB_BAILOUT: f64 = 2.0;
pub const MANDELBULB_ITERATIONS: u32 = 8;
/// Half-width of the cube `[-R, R]^3` the normalized domain maps to.
pub const MANDELBULB_EXTENT: f64 = 1.25;

/// Power-8 triplex Mandelbulb at normalized position `p` (dimension order
/// z, y, x as in tensor indexing).
///
/// The value is the smoothed escape iteration count divided by the iteration
/// limit, clamped to `[0, 1]`; points that never escape map to 1.
pub fn mandelbulb_value(p: &[f64]) -> f64 {
    let map = |v: f64| (v * 2.0 - 1.0) * MANDELBULB_EXTENT;
    let c = [map(p[2]), map(p[1]), map(p[0])];
    let mut z = c;
    for n in 0..MANDELBULB_ITERATIONS {
        let r = (z[0] * z[0] + z[1] * z[1] + z[2] * z[2]).sqrt();
        if r > MANDELBULB_BAILOUT {
            let mu = n as f64 + 1.0 - (r.ln() / MANDELBULB_BAILOUT.ln()).ln() / MANDELBULB_POWER.ln();
            return (mu / MANDELBULB_ITERATIONS as f64).clamp(0.0, 1.0);
        }
        let theta = if r == 0.0 { 0.0 } else { (z[2] / r).acos() };
        let phi = z[1].atan2(z[0]);
        let rp = r.powf(MANDELBULB_POWER);
        let (st, ct) = (theta * MANDELBULB_POWER).sin_cos();
        let (sp, cp) = (phi * MANDELBULB_POWER).sin_cos();
        z = [rp * st * cp + c[0], rp * st * sp + c[1], rp * ct + c[2]];
    }
    1.0
}

impl Generator for Mandelbulb {
    fn name(&self) -> &str {
        "mandelbulb"
    }

    fn value(&self, p: &[f64]) -> f64 {
        mandelbulb_value(p)
    }
}

/// The Mandelbulb fractal sampled on a 3-D grid.
pub fn mandelbulb(md: TensorMetaData, embedding: Option<EmbeddingData>) -> Result<Node> {
    if md.num_dims() != 3 {
        return Err(Error::invalid("the mandelbulb is three-dimensional"));
    }
    procedural(Arc::new(Mandelbulb), md, embedding)
}
