use std::any::Any;
use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::{Rc, Weak};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::chunk::{ParamWriter, TensorMetaData};
use crate::dtype::{ElementType, ScalarType};
use crate::engine::{ChunkRef, Reclaimer, TaskContext};
use crate::error::{Error, Result};
use crate::graph::{Node, Operator, TaskFuture};
use crate::operators::{build_const_chunk_table, LodPyramid};
use crate::page_table::{RequestTable, UseKey};
use crate::store::DataState;

use super::camera::{add, norm, scale, sub, Vec3};
use super::eep::EntryExit;
use super::resident::{ResidentSet, Snapshot};
use super::tf::TransferFunction;
use super::{check_frame_md, encode_frame_chunk, join_all};

/// Accumulated opacity at which DVR rays stop.
pub const EARLY_TERMINATION: f64 = 0.99;
/// Rounds without any new samples after which a tile gives up.
const STALL_LIMIT: u32 = 8;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Compositing {
    /// Front-to-back emission-absorption compositing.
    Dvr,
    /// Keeps the sample of maximum opacity.
    Mop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RaycasterConfig {
    pub compositing: Compositing,
    /// Sample distance as a fraction of the smallest spacing of the level
    /// being sampled.
    pub sample_distance_factor: f64,
    pub lod_bias: f64,
    /// Levels added to the target level for the first, low-latency image.
    pub preview_lod_offset: u32,
    /// Skip fetching bricks that the const chunk table marks as uniform.
    pub use_const_table: bool,
    /// March/fetch rounds a tile task runs before emitting a preview.
    pub rounds_per_pass: u32,
}

impl Default for RaycasterConfig {
    fn default() -> Self {
        RaycasterConfig {
            compositing: Compositing::Dvr,
            sample_distance_factor: 0.5,
            lod_bias: 0.0,
            preview_lod_offset: 2,
            use_const_table: true,
            rounds_per_pass: 8,
        }
    }
}

impl RaycasterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sample_distance_factor > 0.0 && self.sample_distance_factor.is_finite()) {
            return Err(Error::invalid("sample distance factor must be positive"));
        }
        if !self.lod_bias.is_finite() {
            return Err(Error::invalid("lod bias must be finite"));
        }
        if self.preview_lod_offset < 1 {
            return Err(Error::invalid("preview lod offset must be at least 1"));
        }
        if self.rounds_per_pass < 1 {
            return Err(Error::invalid("rounds per pass must be at least 1"));
        }
        Ok(())
    }
}

pub(crate) struct Level {
    pub size: [u64; 3],
    pub chunk: [u64; 3],
    pub grid: [u64; 3],
    pub spacing: Vec3,
    pub min_spacing: f64,
    pub scalar: ScalarType,
    pub table: Option<TableInfo>,
}

pub(crate) struct TableInfo {
    pub chunk: [u64; 3],
    pub grid: [u64; 3],
}

/// Everything a marching job needs besides the bricks.
pub(crate) struct Geometry {
    pub levels: Vec<Level>,
    pub physical: Vec3,
    pub pixel_angle: f64,
    pub config: RaycasterConfig,
    pub tf: TransferFunction,
}

fn brick_source(level: usize) -> usize {
    2 * level
}

fn table_source(level: usize) -> usize {
    2 * level + 1
}

fn arr3(v: &[u64]) -> [u64; 3] {
    [v[0], v[1], v[2]]
}

fn lin3(p: [u64; 3], dims: [u64; 3]) -> u64 {
    (p[0] * dims[1] + p[1]) * dims[2] + p[2]
}

impl Geometry {
    /// Level for a sample at distance `t` from the eye.
    pub fn choose_level(&self, t: f64, offset: u32) -> usize {
        let footprint = t * self.pixel_angle;
        let n = self.levels.len();
        let mut base = 0;
        for (i, l) in self.levels.iter().enumerate() {
            if l.min_spacing <= footprint {
                base = i;
            }
        }
        let biased = (base as f64 + self.config.lod_bias).floor().clamp(0.0, (n - 1) as f64) as usize;
        (biased + offset as usize).min(n - 1)
    }

    pub fn voxel(&self, level: usize, p: Vec3) -> [u64; 3] {
        let l = &self.levels[level];
        [0, 1, 2].map(|i| {
            let g = (p[i] / l.spacing[i]).floor().max(0.0) as u64;
            g.min(l.size[i] - 1)
        })
    }
}

enum Brick<'a> {
    Uniform(f64),
    Data(&'a [u8]),
    Missing,
}

struct BrickCache<'a> {
    key: Option<(usize, u64)>,
    brick: Brick<'a>,
}

struct Marcher<'a> {
    g: &'a Geometry,
    snap: &'a Snapshot,
    requests: RequestTable,
    uses: RequestTable,
    cache: BrickCache<'a>,
}

impl<'a> Marcher<'a> {
    fn resolve_brick(&self, level: usize, bp: [u64; 3], index: u64) -> Brick<'a> {
        let l = &self.g.levels[level];
        if let Some(t) = &l.table {
            let tb = [0, 1, 2].map(|i| bp[i] / t.chunk[i]);
            let tl = [0, 1, 2].map(|i| bp[i] % t.chunk[i]);
            let ti = lin3(tb, t.grid);
            let src = table_source(level);
            match self.snap.get(src, ti) {
                None => {
                    self.requests.note_use(UseKey::chunk(ti, src as u8));
                    return Brick::Missing;
                }
                Some(c) => {
                    self.uses.note_use(UseKey::chunk(ti, src as u8));
                    let v = l.scalar.read(c.bytes(), lin3(tl, t.chunk) as usize);
                    if !l.scalar.is_sentinel(v) {
                        return Brick::Uniform(v);
                    }
                }
            }
        }
        let src = brick_source(level);
        match self.snap.get(src, index) {
            None => {
                self.requests.note_use(UseKey::chunk(index, src as u8));
                Brick::Missing
            }
            Some(c) => {
                self.uses.note_use(UseKey::chunk(index, src as u8));
                Brick::Data(c.bytes())
            }
        }
    }

    fn sample(&mut self, level: usize, g: [u64; 3]) -> Option<f64> {
        let l = &self.g.levels[level];
        let bp = [0, 1, 2].map(|i| g[i] / l.chunk[i]);
        let index = lin3(bp, l.grid);
        if self.cache.key != Some((level, index)) {
            self.cache.brick = self.resolve_brick(level, bp, index);
            self.cache.key = Some((level, index));
        }
        match self.cache.brick {
            Brick::Uniform(v) => Some(v),
            Brick::Missing => None,
            Brick::Data(bytes) => {
                let local = [0, 1, 2].map(|i| g[i] % l.chunk[i]);
                Some(l.scalar.read(bytes, lin3(local, l.chunk) as usize))
            }
        }
    }

    /// Advances `ray` until it completes or reaches a missing brick and
    /// returns the number of samples taken.
    fn ray(&mut self, entry: [f64; 4], exit: [f64; 4], offset: u32, ray: &mut RayState) -> u64 {
        let g = self.g;
        if ray.done {
            return 0;
        }
        let p0: Vec3 = [0, 1, 2].map(|i| entry[i] * g.physical[i]);
        let p1: Vec3 = [0, 1, 2].map(|i| exit[i] * g.physical[i]);
        let seg = sub(p1, p0);
        let len = norm(seg);
        if !(len > 0.0) {
            ray.done = true;
            return 0;
        }
        let dir = scale(seg, 1.0 / len);
        let ms0 = g.levels[0].min_spacing;
        let mut acc = ray.acc;
        let mut u = ray.u;
        let mut samples = 0;
        while u < len {
            let level = g.choose_level(entry[3] + u, offset);
            let step = g.config.sample_distance_factor * g.levels[level].min_spacing;
            let p = add(p0, scale(dir, u));
            let Some(v) = self.sample(level, g.voxel(level, p)) else {
                *ray = RayState { u, acc, done: false };
                return samples;
            };
            samples += 1;
            let c = g.tf.eval(v);
            match g.config.compositing {
                Compositing::Dvr => {
                    let a = 1.0 - (1.0 - c[3]).powf(step / ms0);
                    if a > 0.0 {
                        let w = (1.0 - acc[3]) * a;
                        for k in 0..3 {
                            acc[k] += w * c[k];
                        }
                        acc[3] += w;
                        if acc[3] >= EARLY_TERMINATION {
                            break;
                        }
                    }
                }
                Compositing::Mop => {
                    if c[3] > acc[3] {
                        acc = [c[0] * c[3], c[1] * c[3], c[2] * c[3], c[3]];
                        if c[3] >= 1.0 {
                            break;
                        }
                    }
                }
            }
            u += step;
        }
        *ray = RayState { u, acc, done: true };
        samples
    }
}

/// Progress of one ray: distance marched from the entry point and the
/// color accumulated so far.
#[derive(Clone, Copy, Default)]
pub(crate) struct RayState {
    u: f64,
    acc: [f64; 4],
    done: bool,
}

pub(crate) struct March {
    pub image: Vec<[f64; 4]>,
    pub missed: Vec<UseKey>,
    pub uses: Vec<UseKey>,
    pub samples: u64,
    pub complete: bool,
}

fn read_record(t: ScalarType, eep: &[u8], base: usize) -> [f64; 4] {
    [0, 1, 2, 3].map(|k| t.read(eep, base + k))
}

/// Resumes every ray of one tile against the bricks in `snap`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn march_tile(
    g: &Geometry,
    snap: &Snapshot,
    eep: &[u8],
    begin: [u64; 2],
    end: [u64; 2],
    chunk: [u64; 2],
    offset: u32,
    rays: &mut [RayState],
) -> March {
    let mut m = Marcher {
        g,
        snap,
        requests: RequestTable::default(),
        uses: RequestTable::default(),
        cache: BrickCache {
            key: None,
            brick: Brick::Missing,
        },
    };
    let mut image = vec![[0.0; 4]; (chunk[0] * chunk[1]) as usize];
    let mut complete = true;
    let mut samples = 0;
    for r in 0..end[0] - begin[0] {
        for c in 0..end[1] - begin[1] {
            let e = (r * chunk[1] + c) as usize;
            let entry = read_record(ScalarType::F32, eep, e * 8);
            let exit = read_record(ScalarType::F32, eep, e * 8 + 4);
            if exit[3] <= entry[3] {
                continue;
            }
            samples += m.ray(entry, exit, offset, &mut rays[e]);
            image[e] = rays[e].acc;
            complete &= rays[e].done;
        }
    }
    March {
        image,
        missed: m.requests.drain(),
        uses: m.uses.drain(),
        samples,
        complete,
    }
}

#[derive(Clone, Default)]
struct TileState {
    offset: u32,
    queries: Vec<UseKey>,
    rays: Vec<RayState>,
    stalls: u32,
    passes: u64,
}

pub(crate) struct Raycast {
    geometry: Arc<Geometry>,
    levels: usize,
}

async fn fetch(
    ctx: &TaskContext,
    node: &Node,
    levels: usize,
    rs: &ResidentSet,
    keys: &[UseKey],
) -> Result<Vec<(UseKey, ChunkRef)>> {
    let mut pinned = Vec::new();
    let mut by_source: BTreeMap<usize, Vec<UseKey>> = BTreeMap::new();
    for k in keys {
        if !rs.contains(*k) {
            by_source.entry(k.level() as usize).or_default().push(*k);
        }
    }
    let batch = ctx.max_requests_per_task().max(1);
    for (src, keys) in by_source {
        let input = if src % 2 == 0 {
            &node.inputs()[1 + src / 2]
        } else {
            &node.inputs()[1 + levels + src / 2]
        };
        let md = input.metadata();
        for group in keys.chunks(batch) {
            let positions = group.iter().map(|k| md.chunk_pos(k.index())).collect();
            let refs = ctx.request_chunks(input, positions).await?;
            for (k, r) in group.iter().zip(refs) {
                rs.insert(*k, r.clone());
                pinned.push((*k, r));
            }
        }
    }
    Ok(pinned)
}

async fn publish_image(ctx: &TaskContext, pos: &[u64], image: &[[f64; 4]], state: DataState) -> Result<()> {
    let md = ctx.node().metadata().clone();
    let mut alloc = ctx.alloc_chunk().await?;
    encode_frame_chunk(&md, image, &mut alloc);
    ctx.publish(pos, alloc, state)
}

impl Raycast {
    fn resident_set(&self, ctx: &TaskContext) -> Rc<ResidentSet> {
        let rs = ctx.state_cache(u64::MAX, || ResidentSet::new(2 * self.levels));
        if !rs.registered.get() {
            rs.registered.set(true);
            let dynrc: Rc<dyn Reclaimer> = rs.clone();
            let weak: Weak<dyn Reclaimer> = Rc::downgrade(&dynrc);
            ctx.register_reclaimer(weak);
        }
        rs
    }

    async fn tile(self: Arc<Self>, ctx: TaskContext, rs: Rc<ResidentSet>, pos: Vec<u64>) -> Result<()> {
        let node = ctx.node().clone();
        let md = node.metadata().clone();
        let eep = node.inputs()[0].clone();
        let eep_chunk: ChunkRef = ctx.request_chunk(&eep, vec![pos[0], pos[1], 0]).await?;
        let (begin, end) = md.chunk_logical_region(&pos)?;
        let chunk = [md.chunk_size()[0], md.chunk_size()[1]];
        let cfg = &self.geometry.config;
        let initial = if self.levels > 1 { cfg.preview_lod_offset } else { 0 };
        let key = md.chunk_index(&pos);
        let cell: Rc<RefCell<Option<TileState>>> = ctx.state_cache(key, || RefCell::new(None));
        let pixels = (chunk[0] * chunk[1]) as usize;
        let mut state = cell.borrow_mut().take().unwrap_or(TileState {
            offset: initial,
            rays: vec![RayState::default(); pixels],
            ..TileState::default()
        });
        state.passes += 1;
        let mut preview: Option<Vec<[f64; 4]>> = None;
        let mut rounds = 0;
        loop {
            // bricks fetched for this round stay pinned until it has marched
            let pinned = fetch(&ctx, &node, self.levels, &rs, &state.queries).await?;
            let snap = rs.snapshot(pinned);
            let g = self.geometry.clone();
            let e = eep_chunk.clone();
            let offset = state.offset;
            let (b, en) = ([begin[0], begin[1]], [end[0], end[1]]);
            let mut rays = std::mem::take(&mut state.rays);
            rs.begin_job();
            let m = ctx
                .run_job(move || {
                    let m = march_tile(&g, &snap, e.bytes(), b, en, chunk, offset, &mut rays);
                    Ok((m, rays))
                })
                .await;
            rs.end_job();
            let (m, rays) = m?;
            state.rays = rays;
            rs.bump(m.uses);
            rounds += 1;
            if m.complete {
                if state.offset == 0 {
                    return publish_image(&ctx, &pos, &m.image, DataState::Final).await;
                }
                preview = Some(m.image);
                state = TileState {
                    passes: state.passes,
                    rays: vec![RayState::default(); pixels],
                    ..TileState::default()
                };
            } else {
                if m.samples > 0 {
                    state.stalls = 0;
                } else {
                    state.stalls += 1;
                    if state.stalls >= STALL_LIMIT {
                        return Err(Error::MemoryExhausted(format!(
                            "raycast tile {pos:?} made no progress in {STALL_LIMIT} rounds; \
                             its bricks do not fit the store"
                        )));
                    }
                }
                state.queries = m.missed;
                if rounds >= cfg.rounds_per_pass {
                    let img = preview.unwrap_or(m.image);
                    *cell.borrow_mut() = Some(state);
                    return publish_image(&ctx, &pos, &img, DataState::Preview).await;
                }
            }
        }
    }
}

impl Operator for Raycast {
    fn compute(self: Arc<Self>, ctx: TaskContext, positions: Vec<Vec<u64>>) -> TaskFuture {
        Box::pin(async move {
            let rs = self.resident_set(&ctx);
            let tiles = positions
                .into_iter()
                .map(|p| self.clone().tile(ctx.clone(), rs.clone(), p))
                .collect();
            join_all(tiles).await
        })
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// Volume raycaster over an LOD pyramid of a 3-D scalar tensor.
///
/// `eep` must come from [`super::entry_exit_points`] with the same frame size
/// and tiling as `frame_md`, whose element type selects the output: U8x4
/// (premultiplied RGBA8) or F32x4 (premultiplied, unquantized). Tiles are
/// emitted as previews while bricks they sample are not resident and become
/// final once every sample could be taken at its target level.
pub fn raycast(
    lod: &LodPyramid,
    eep: &Node,
    config: &RaycasterConfig,
    tf: &TransferFunction,
    frame_md: &TensorMetaData,
) -> Result<Node> {
    config.validate()?;
    tf.validate()?;
    check_frame_md(frame_md)?;
    let ee = eep
        .downcast::<EntryExit>()
        .ok_or_else(|| Error::invalid("raycast needs an entry_exit_points node"))?;
    let emd = eep.metadata();
    if emd.size()[..2] != frame_md.size()[..] || emd.chunk_size()[..2] != frame_md.chunk_size()[..] {
        return Err(Error::ShapeMismatch(format!(
            "entry-exit points {:?}/{:?} do not match frame {:?}/{:?}",
            emd.size(),
            emd.chunk_size(),
            frame_md.size(),
            frame_md.chunk_size()
        )));
    }
    let mut levels = Vec::new();
    let mut tables = Vec::new();
    for (i, node) in lod.levels().iter().enumerate() {
        let md = node.metadata();
        if md.num_dims() != 3 || !md.element_type().is_scalar() {
            return Err(Error::invalid("raycast needs a pyramid of 3-D scalar tensors"));
        }
        let spacing = lod.embedding(i).spacing.clone();
        let table = if config.use_const_table {
            let t = match lod.const_table(i) {
                Some(t) => t.clone(),
                None => build_const_chunk_table(node, None)?,
            };
            let info = TableInfo {
                chunk: arr3(t.metadata().chunk_size()),
                grid: arr3(&t.metadata().chunk_grid_dims()),
            };
            tables.push(t);
            Some(info)
        } else {
            None
        };
        levels.push(Level {
            size: arr3(md.size()),
            chunk: arr3(md.chunk_size()),
            grid: arr3(&md.chunk_grid_dims()),
            spacing: [spacing[0], spacing[1], spacing[2]],
            min_spacing: spacing.iter().copied().fold(f64::INFINITY, f64::min),
            scalar: md.element_type().scalar,
            table,
        });
    }
    let p = lod.embedding(0).physical_size(lod.finest().metadata());
    let physical = [p[0], p[1], p[2]];
    for i in 0..3 {
        if (physical[i] - ee.physical[i]).abs() > 1e-9 * physical[i].abs().max(1.0) {
            return Err(Error::ShapeMismatch(
                "entry-exit points were computed for a different volume extent".into(),
            ));
        }
    }
    let geometry = Geometry {
        levels,
        physical,
        pixel_angle: ee.camera.pixel_angle(ee.frame[0]),
        config: config.clone(),
        tf: tf.clone(),
    };
    let c = config;
    let params = tf
        .params(
            ParamWriter::new()
                .u64(c.compositing as u64)
                .f64(c.sample_distance_factor)
                .f64(c.lod_bias)
                .u64(c.preview_lod_offset as u64)
                .u64(c.use_const_table as u64)
                .u64(c.rounds_per_pass as u64),
        )
        .finish();
    let n = lod.num_levels();
    let mut inputs = vec![eep.clone()];
    inputs.extend(lod.levels().iter().cloned());
    inputs.extend(tables);
    Ok(Node::new(
        "raycast",
        params,
        frame_md.clone(),
        None,
        inputs,
        Arc::new(Raycast {
            geometry: Arc::new(geometry),
            levels: n,
        }),
    ))
}

/// RGBA8 frame metadata of `width` x `height` pixels in tiles of
/// `tile_width` x `tile_height`. Dimension 0 is the row.
pub fn frame_metadata(width: u64, height: u64, tile_width: u64, tile_height: u64) -> Result<TensorMetaData> {
    TensorMetaData::new(
        vec![height, width],
        vec![tile_height.min(height).max(1), tile_width.min(width).max(1)],
        ElementType::vec(ScalarType::U8, 4)?,
    )
}
