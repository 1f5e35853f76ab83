use std::any::Any;
use std::sync::Arc;

use crate::chunk::{EmbeddingData, ParamWriter, TensorMetaData};
use crate::dtype::{ElementType, ScalarType};
use crate::engine::TaskContext;
use crate::error::{Error, Result};
use crate::graph::{Node, Operator, TaskFuture};
use crate::store::DataState;

use super::camera::{add, dot, ray_box, scale, CameraState, Vec3};

/// Lanes per entry or exit record: normalized position and ray parameter.
pub const EEP_LANES: u8 = 4;

pub(crate) struct EntryExit {
    pub camera: CameraState,
    pub physical: Vec3,
    pub frame: [u64; 2],
}

/// Entry and exit of the ray through pixel (`row`, `col`) in normalized
/// volume coordinates, each followed by its distance from the eye; `None`
/// when the ray misses the box.
pub fn ray_segment(
    camera: &CameraState,
    physical: Vec3,
    row: u64,
    col: u64,
    width: u64,
    height: u64,
) -> Option<([f64; 4], [f64; 4])> {
    let dir = camera.ray_dir(row, col, width, height);
    let (f, _, _) = camera.basis();
    let cos = dot(dir, f);
    let (t0, t1) = ray_box(camera.eye, dir, physical)?;
    let t0 = t0.max(camera.near / cos);
    let t1 = t1.min(camera.far / cos);
    if t0 >= t1 {
        return None;
    }
    let at = |t: f64| {
        let p = add(camera.eye, scale(dir, t));
        let n = [0, 1, 2].map(|i| (p[i] / physical[i]).clamp(0.0, 1.0));
        [n[0], n[1], n[2], t]
    };
    Some((at(t0), at(t1)))
}

fn compute_chunk(op: &EntryExit, md: &TensorMetaData, pos: &[u64], out: &mut [u8]) -> Result<()> {
    let (begin, end) = md.chunk_logical_region(pos)?;
    let c = md.chunk_size();
    let [h, w] = op.frame;
    out.fill(0);
    let t = ScalarType::F32;
    for row in begin[0]..end[0] {
        for col in begin[1]..end[1] {
            if let Some((a, b)) = ray_segment(&op.camera, op.physical, row, col, w, h) {
                let base = (((row - begin[0]) * c[1] + (col - begin[1])) * c[2]) as usize * 4;
                for k in 0..4 {
                    t.write(out, base + k, a[k]);
                    t.write(out, base + 4 + k, b[k]);
                }
            }
        }
    }
    Ok(())
}

impl Operator for EntryExit {
    fn compute(self: Arc<Self>, ctx: TaskContext, positions: Vec<Vec<u64>>) -> TaskFuture {
        Box::pin(async move {
            let md = ctx.node().metadata().clone();
            let mut jobs = Vec::with_capacity(positions.len());
            for pos in &positions {
                let mut alloc = ctx.alloc_chunk().await?;
                let op = self.clone();
                let md = md.clone();
                let p = pos.clone();
                jobs.push(ctx.run_job(move || {
                    compute_chunk(&op, &md, &p, &mut alloc)?;
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

/// Per-pixel ray segments through the physical box of a 3-D tensor.
///
/// The output has shape `[H, W, 2]` with F32x4 elements: index 0 of the last
/// dimension is the entry record, index 1 the exit record, each holding the
/// normalized position followed by the distance from the eye. Pixels whose
/// ray misses the box hold zeros in both records. Rays start no earlier than
/// the near plane. The chunking follows `frame_md`.
pub fn entry_exit_points(
    md: &TensorMetaData,
    embedding: &EmbeddingData,
    frame_md: &TensorMetaData,
    camera: &CameraState,
) -> Result<Node> {
    if md.num_dims() != 3 {
        return Err(Error::invalid("entry-exit points need a 3-D tensor"));
    }
    if frame_md.num_dims() != 2 {
        return Err(Error::invalid("frames are 2-D"));
    }
    embedding.check_against(md)?;
    camera.validate()?;
    let p = embedding.physical_size(md);
    let physical = [p[0], p[1], p[2]];
    let frame = [frame_md.size()[0], frame_md.size()[1]];
    let out = TensorMetaData::new(
        vec![frame[0], frame[1], 2],
        vec![frame_md.chunk_size()[0], frame_md.chunk_size()[1], 2],
        ElementType::vec(ScalarType::F32, EEP_LANES)?,
    )?;
    let params = ParamWriter::new()
        .f64s(&camera.eye)
        .f64s(&camera.look_at)
        .f64s(&camera.up)
        .f64(camera.fov)
        .f64(camera.near)
        .f64(camera.far)
        .f64s(&physical)
        .finish();
    Ok(Node::new(
        "entry_exit_points",
        params,
        out,
        None,
        Vec::new(),
        Arc::new(EntryExit {
            camera: camera.clone(),
            physical,
            frame,
        }),
    ))
}
