use std::any::Any;
use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::chunk::{linear_index, ParamWriter, TensorMetaData};
use crate::dtype::{ElementType, ScalarType};
use crate::engine::{ChunkRef, TaskContext};
use crate::error::{Error, Result};
use crate::graph::{Node, Operator, TaskFuture};
use crate::operators::LodPyramid;
use crate::store::DataState;

use super::tf::{to_rgba8, TransferFunction};
use super::check_frame_md;

/// Maps frame pixels to level-0 element coordinates:
/// `element = pan + (pixel + 0.5) / zoom`, per (row, column).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanZoom {
    pub zoom: f64,
    pub pan: [f64; 2],
}

impl Default for PanZoom {
    fn default() -> Self {
        PanZoom {
            zoom: 1.0,
            pan: [0.0, 0.0],
        }
    }
}

impl PanZoom {
    pub fn validate(&self) -> Result<()> {
        if !(self.zoom > 0.0 && self.zoom.is_finite()) || !self.pan.iter().all(|p| p.is_finite()) {
            return Err(Error::invalid("zoom must be positive and pan finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Coloring {
    Tf(TransferFunction),
    /// U8 elements with three (opaque) or four (straight alpha) lanes.
    Rgba,
}

struct PlaneView {
    /// Per level: size, chunk size and spacing.
    levels: Vec<(TensorMetaData, Vec<f64>)>,
    spacing0: Vec<f64>,
    axes: [usize; 2],
    fixed: Vec<u64>,
    view: PanZoom,
    coloring: Coloring,
    background: [u8; 4],
    level: usize,
}

/// Level of `lod` sampled at `zoom`: the coarsest whose spacing along the
/// displayed axes is at most one output pixel.
pub fn view_level(lod: &LodPyramid, axes: [usize; 2], zoom: f64) -> usize {
    let s0 = &lod.embedding(0).spacing;
    let pixel = 1.0 / zoom;
    let mut best = 0;
    for l in 0..lod.num_levels() {
        let s = &lod.embedding(l).spacing;
        let ratio = axes
            .iter()
            .map(|&a| s[a] / s0[a])
            .fold(f64::INFINITY, f64::min);
        if ratio <= pixel * (1.0 + 1e-9) {
            best = l;
        }
    }
    best
}

impl PlaneView {
    /// Element coordinates at the view level for pixel (`row`, `col`), or
    /// `None` outside the tensor.
    fn element(&self, row: u64, col: u64) -> Option<Vec<u64>> {
        let (md, s) = &self.levels[self.level];
        let d = md.num_dims();
        let mut g = vec![0u64; d];
        for i in 0..d {
            let x0 = if i == self.axes[0] {
                self.view.pan[0] + (row as f64 + 0.5) / self.view.zoom
            } else if i == self.axes[1] {
                self.view.pan[1] + (col as f64 + 0.5) / self.view.zoom
            } else {
                self.fixed[i] as f64 + 0.5
            };
            let size0 = self.levels[0].0.size()[i] as f64;
            if !(0.0..size0).contains(&x0) {
                return None;
            }
            let x = (x0 * self.spacing0[i] / s[i]).floor() as u64;
            g[i] = x.min(md.size()[i] - 1);
        }
        Some(g)
    }

    fn color(&self, t: ElementType, bytes: &[u8], e: usize) -> [u8; 4] {
        match &self.coloring {
            Coloring::Tf(tf) => {
                let c = tf.eval(t.scalar.read(bytes, e));
                to_rgba8([c[0] * c[3], c[1] * c[3], c[2] * c[3], c[3]])
            }
            Coloring::Rgba => {
                let l = t.lanes as usize;
                let px = &bytes[e * l..e * l + l];
                if l == 3 {
                    [px[0], px[1], px[2], 255]
                } else {
                    let a = px[3] as f64 / 255.0;
                    let pm = |c: u8| ScalarType::U8.convert(c as f64 * a) as u8;
                    [pm(px[0]), pm(px[1]), pm(px[2]), px[3]]
                }
            }
        }
    }
}

fn render_tile(
    v: &PlaneView,
    md: &TensorMetaData,
    pos: &[u64],
    bricks: &BTreeMap<Vec<u64>, ChunkRef>,
    out: &mut [u8],
) -> Result<()> {
    let (begin, end) = md.chunk_logical_region(pos)?;
    let tw = md.chunk_size()[1];
    let (lmd, _) = &v.levels[v.level];
    let c = lmd.chunk_size();
    let t = lmd.element_type();
    out.fill(0);
    for row in begin[0]..end[0] {
        for col in begin[1]..end[1] {
            let px = match v.element(row, col) {
                None => v.background,
                Some(g) => {
                    let bp: Vec<u64> = g.iter().zip(c).map(|(g, c)| g / c).collect();
                    let local: Vec<u64> = g.iter().zip(c).map(|(g, c)| g % c).collect();
                    let brick = &bricks[&bp];
                    v.color(t, brick.bytes(), linear_index(&local, c) as usize)
                }
            };
            let o = (((row - begin[0]) * tw + (col - begin[1])) * 4) as usize;
            out[o..o + 4].copy_from_slice(&px);
        }
    }
    Ok(())
}

impl Operator for PlaneView {
    fn compute(self: Arc<Self>, ctx: TaskContext, positions: Vec<Vec<u64>>) -> TaskFuture {
        Box::pin(async move {
            let node = ctx.node().clone();
            let md = node.metadata().clone();
            let input = node.inputs()[self.level].clone();
            let imd = input.metadata().clone();
            let batch = ctx.max_requests_per_task().max(1);
            for pos in positions {
                let (begin, end) = md.chunk_logical_region(&pos)?;
                let mut needed = std::collections::BTreeSet::new();
                for row in begin[0]..end[0] {
                    for col in begin[1]..end[1] {
                        if let Some(g) = self.element(row, col) {
                            needed.insert(
                                g.iter()
                                    .zip(imd.chunk_size())
                                    .map(|(g, c)| g / c)
                                    .collect::<Vec<u64>>(),
                            );
                        }
                    }
                }
                let needed: Vec<Vec<u64>> = needed.into_iter().collect();
                let mut bricks = BTreeMap::new();
                for group in needed.chunks(batch) {
                    let refs = ctx.request_chunks(&input, group.to_vec()).await?;
                    bricks.extend(group.iter().cloned().zip(refs));
                }
                let mut alloc = ctx.alloc_chunk().await?;
                let v = self.clone();
                let md2 = md.clone();
                let p = pos.clone();
                let alloc = ctx
                    .run_job(move || {
                        render_tile(&v, &md2, &p, &bricks, &mut alloc)?;
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

#[allow(clippy::too_many_arguments)]
fn plane_view(
    name: &str,
    lod: &LodPyramid,
    axes: [usize; 2],
    fixed: Vec<u64>,
    view: &PanZoom,
    coloring: Coloring,
    background: [u8; 4],
    frame_md: &TensorMetaData,
) -> Result<Node> {
    view.validate()?;
    check_frame_md(frame_md)?;
    if frame_md.element_type() != ElementType::vec(ScalarType::U8, 4)? {
        return Err(Error::invalid("views render RGBA8 frames"));
    }
    let level = view_level(lod, axes, view.zoom);
    let levels: Vec<(TensorMetaData, Vec<f64>)> = (0..lod.num_levels())
        .map(|l| (lod.level(l).metadata().clone(), lod.embedding(l).spacing.clone()))
        .collect();
    let mut params = ParamWriter::new()
        .u64s(&[axes[0] as u64, axes[1] as u64])
        .u64s(&fixed)
        .f64(view.zoom)
        .f64s(&view.pan)
        .bytes(&background)
        .u64(level as u64);
    params = match &coloring {
        Coloring::Tf(tf) => tf.params(params),
        Coloring::Rgba => params.str("rgba"),
    };
    Ok(Node::new(
        name,
        params.finish(),
        frame_md.clone(),
        None,
        lod.levels().to_vec(),
        Arc::new(PlaneView {
            spacing0: lod.embedding(0).spacing.clone(),
            levels,
            axes,
            fixed,
            view: view.clone(),
            coloring,
            background,
            level,
        }),
    ))
}

/// Axis-aligned slice of a pyramid of scalar tensors with `d >= 3`,
/// orthogonal to `dim` at level-0 index `index`. The two highest remaining
/// dimensions are displayed (rows, columns); any further dimensions are
/// taken from `fixed` (level-0 indices, one per dimension, entries for the
/// displayed dimensions and `dim` are ignored). Pixels outside the tensor
/// get `background` (premultiplied RGBA8).
#[allow(clippy::too_many_arguments)]
pub fn slice_view(
    lod: &LodPyramid,
    dim: usize,
    index: u64,
    fixed: Option<Vec<u64>>,
    view: &PanZoom,
    tf: &TransferFunction,
    background: [u8; 4],
    frame_md: &TensorMetaData,
) -> Result<Node> {
    let md = lod.finest().metadata();
    let d = md.num_dims();
    if d < 3 {
        return Err(Error::invalid("slice views need a tensor with at least 3 dims"));
    }
    if dim >= d {
        return Err(Error::InvalidCoordinate(format!("slice dim {dim} out of range for {d} dims")));
    }
    if index >= md.size()[dim] {
        return Err(Error::InvalidCoordinate(format!(
            "slice index {index} out of range for size {}",
            md.size()[dim]
        )));
    }
    if !md.element_type().is_scalar() {
        return Err(Error::TypeMismatch("slice views need scalar elements".into()));
    }
    tf.validate()?;
    let shown: Vec<usize> = (0..d).filter(|&i| i != dim).collect();
    let axes = [shown[shown.len() - 2], shown[shown.len() - 1]];
    let mut fixed = fixed.unwrap_or_else(|| vec![0; d]);
    if fixed.len() != d {
        return Err(Error::invalid(format!("fixed indices need {d} entries")));
    }
    fixed[dim] = index;
    for i in 0..d {
        if i != axes[0] && i != axes[1] && fixed[i] >= md.size()[i] {
            return Err(Error::InvalidCoordinate(format!(
                "index {} out of range for dim {i} of size {}",
                fixed[i],
                md.size()[i]
            )));
        }
    }
    plane_view("slice_view", lod, axes, fixed, view, Coloring::Tf(tf.clone()), background, frame_md)
}

/// View of a 2-D image pyramid. U8 elements with three or four lanes are
/// shown as RGB(A); scalar elements need a transfer function.
pub fn image_view(
    lod: &LodPyramid,
    view: &PanZoom,
    tf: Option<&TransferFunction>,
    background: [u8; 4],
    frame_md: &TensorMetaData,
) -> Result<Node> {
    let md = lod.finest().metadata();
    if md.num_dims() != 2 {
        return Err(Error::invalid(format!(
            "image views need a 2-D tensor, got {} dims",
            md.num_dims()
        )));
    }
    let t = md.element_type();
    let coloring = if t.is_scalar() {
        let tf = tf.ok_or_else(|| Error::invalid("scalar images need a transfer function"))?;
        tf.validate()?;
        Coloring::Tf(tf.clone())
    } else if t.scalar == ScalarType::U8 && (t.lanes == 3 || t.lanes == 4) {
        Coloring::Rgba
    } else {
        return Err(Error::TypeMismatch(format!("cannot display {t} elements as an image")));
    };
    plane_view("image_view", lod, [0, 1], vec![0, 0], view, coloring, background, frame_md)
}
