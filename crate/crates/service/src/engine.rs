use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::mpsc;
use std::sync::Arc;

use serde::Serialize;
use tokio::sync::oneshot;

use tessera::io::open_pyramid;
use tessera::operators::LodPyramid;
use tessera::{DataState, EngineConfig, Error, Location, Node, Result, Runtime, TensorMetaData};

use crate::image::{encode_png, tile_pixels};
use crate::params::{build_view, ViewKind, ViewParams};

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct DatasetInfo {
    pub id: String,
    pub dims: usize,
    pub size: Vec<u64>,
    pub chunk_size: Vec<u64>,
    pub spacing: Vec<f64>,
    pub levels: usize,
    pub element_type: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct SessionCreated {
    pub session: String,
    pub generation: u64,
}

#[derive(Clone, Debug)]
pub struct Tile {
    pub png: Arc<Vec<u8>>,
    pub state: DataState,
    pub generation: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct StoreOccupancy {
    pub used: u64,
    pub high_water: u64,
    pub capacity: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SessionStatus {
    pub generation: u64,
    pub tiles_total: u64,
    pub tiles_final: u64,
    pub bytes_read: u64,
    pub store: StoreOccupancy,
}

/// A failed request: HTTP status, message and, for stale generations, the
/// current one.
#[derive(Clone, Debug)]
pub struct ApiError {
    pub status: u16,
    pub message: String,
    pub generation: Option<u64>,
}

impl ApiError {
    pub fn new(status: u16, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
            generation: None,
        }
    }

    fn from_engine(e: Error) -> Self {
        let status = match e {
            Error::InvalidCoordinate(_)
            | Error::InvalidArgument(_)
            | Error::ShapeMismatch(_)
            | Error::TypeMismatch(_) => 400,
            _ => 500,
        };
        ApiError::new(status, e.to_string())
    }
}

pub type Reply<T> = oneshot::Sender<std::result::Result<T, ApiError>>;

pub enum Command {
    Datasets(oneshot::Sender<Vec<DatasetInfo>>),
    CreateSession {
        dataset: String,
        kind: ViewKind,
        params: ViewParams,
        reply: Reply<SessionCreated>,
    },
    UpdateParams {
        session: String,
        params: ViewParams,
        reply: Reply<u64>,
    },
    Tile {
        session: String,
        x: u64,
        y: u64,
        generation: Option<u64>,
        reply: Reply<Tile>,
    },
    Status {
        session: String,
        reply: Reply<SessionStatus>,
    },
}

struct Dataset {
    info: DatasetInfo,
    lod: LodPyramid,
}

struct Session {
    dataset: usize,
    kind: ViewKind,
    generation: u64,
    frame: TensorMetaData,
    node: Node,
    /// Final tiles of the current generation, keyed by (row, column).
    finals: HashMap<(u64, u64), Arc<Vec<u8>>>,
}

struct Engine {
    rt: Runtime,
    datasets: Vec<Dataset>,
    sessions: BTreeMap<String, Session>,
    next_session: u64,
    tile_size: u64,
}

fn dataset_id(path: &PathBuf, taken: &[Dataset]) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let mut id = stem.clone();
    let mut n = 2;
    while taken.iter().any(|d| d.info.id == id) {
        id = format!("{stem}-{n}");
        n += 1;
    }
    id
}

impl Engine {
    fn open(config: EngineConfig, manifests: &[PathBuf], tile_size: u64) -> Result<Engine> {
        if tile_size == 0 {
            return Err(Error::invalid("tile size must be positive"));
        }
        let rt = Runtime::new(config)?;
        let mut datasets: Vec<Dataset> = Vec::new();
        for path in manifests {
            let lod = open_pyramid(path)?;
            let md = lod.finest().metadata();
            let info = DatasetInfo {
                id: dataset_id(path, &datasets),
                dims: md.num_dims(),
                size: md.size().to_vec(),
                chunk_size: md.chunk_size().to_vec(),
                spacing: lod.embedding(0).spacing.clone(),
                levels: lod.num_levels(),
                element_type: md.element_type().to_string(),
            };
            datasets.push(Dataset { info, lod });
        }
        Ok(Engine {
            rt,
            datasets,
            sessions: BTreeMap::new(),
            next_session: 1,
            tile_size,
        })
    }

    fn session(&mut self, id: &str) -> std::result::Result<&mut Session, ApiError> {
        self.sessions
            .get_mut(id)
            .ok_or_else(|| ApiError::new(404, format!("unknown session `{id}`")))
    }

    fn create(&mut self, dataset: &str, kind: ViewKind, params: &ViewParams) -> std::result::Result<SessionCreated, ApiError> {
        let d = self
            .datasets
            .iter()
            .position(|d| d.info.id == dataset)
            .ok_or_else(|| ApiError::new(404, format!("unknown dataset `{dataset}`")))?;
        let (frame, node) =
            build_view(&self.datasets[d].lod, kind, params, self.tile_size).map_err(ApiError::from_engine)?;
        let id = format!("s{}", self.next_session);
        self.next_session += 1;
        self.sessions.insert(
            id.clone(),
            Session {
                dataset: d,
                kind,
                generation: 0,
                frame,
                node,
                finals: HashMap::new(),
            },
        );
        Ok(SessionCreated {
            session: id,
            generation: 0,
        })
    }

    fn update(&mut self, id: &str, params: &ViewParams) -> std::result::Result<u64, ApiError> {
        let tile = self.tile_size;
        let (dataset, kind) = {
            let s = self.session(id)?;
            (s.dataset, s.kind)
        };
        let (frame, node) = build_view(&self.datasets[dataset].lod, kind, params, tile).map_err(ApiError::from_engine)?;
        let s = self.session(id)?;
        s.generation += 1;
        s.frame = frame;
        s.node = node;
        s.finals.clear();
        Ok(s.generation)
    }

    fn tile(&mut self, id: &str, x: u64, y: u64, generation: Option<u64>) -> std::result::Result<Tile, ApiError> {
        let s = self.sessions.get(id).ok_or_else(|| ApiError::new(404, format!("unknown session `{id}`")))?;
        if let Some(g) = generation {
            if g != s.generation {
                return Err(ApiError {
                    status: 409,
                    message: format!("generation {g} is stale"),
                    generation: Some(s.generation),
                });
            }
        }
        let grid = s.frame.chunk_grid_dims();
        if y >= grid[0] || x >= grid[1] {
            return Err(ApiError::new(
                400,
                format!("tile ({x}, {y}) outside the {}x{} tile grid", grid[1], grid[0]),
            ));
        }
        if let Some(png) = s.finals.get(&(y, x)) {
            return Ok(Tile {
                png: png.clone(),
                state: DataState::Final,
                generation: s.generation,
            });
        }
        let pos = vec![y, x];
        let chunk = self
            .rt
            .resolve_at(&s.node, &[pos.clone()], Location::Ram, DataState::Preview)
            .map_err(ApiError::from_engine)?
            .remove(0);
        let (w, h, px) = tile_pixels(&s.frame, &pos, chunk.bytes()).map_err(ApiError::from_engine)?;
        let png = Arc::new(encode_png(w, h, &px).map_err(ApiError::from_engine)?);
        let state = chunk.state();
        drop(chunk);
        let s = self.sessions.get_mut(id).expect("checked above");
        if state == DataState::Final {
            s.finals.insert((y, x), png.clone());
        }
        Ok(Tile {
            png,
            state,
            generation: s.generation,
        })
    }

    fn status(&mut self, id: &str) -> std::result::Result<SessionStatus, ApiError> {
        let (used, high_water, capacity) = self.rt.store_usage(Location::Ram).unwrap_or_default();
        let bytes_read = self.rt.stats().bytes_read;
        let s = self.session(id)?;
        Ok(SessionStatus {
            generation: s.generation,
            tiles_total: s.frame.num_chunks(),
            tiles_final: s.finals.len() as u64,
            bytes_read,
            store: StoreOccupancy {
                used,
                high_water,
                capacity,
            },
        })
    }

    fn handle(&mut self, cmd: Command) {
        match cmd {
            Command::Datasets(reply) => {
                let _ = reply.send(self.datasets.iter().map(|d| d.info.clone()).collect());
            }
            Command::CreateSession {
                dataset,
                kind,
                params,
                reply,
            } => {
                let _ = reply.send(self.create(&dataset, kind, &params));
            }
            Command::UpdateParams { session, params, reply } => {
                let _ = reply.send(self.update(&session, &params));
            }
            Command::Tile {
                session,
                x,
                y,
                generation,
                reply,
            } => {
                let _ = reply.send(self.tile(&session, x, y, generation));
            }
            Command::Status { session, reply } => {
                let _ = reply.send(self.status(&session));
            }
        }
    }
}

/// Starts the engine thread. Fails if a manifest cannot be opened.
pub fn spawn(config: EngineConfig, manifests: Vec<PathBuf>, tile_size: u64) -> Result<mpsc::Sender<Command>> {
    let (tx, rx) = mpsc::channel::<Command>();
    let (ready_tx, ready_rx) = mpsc::channel();
    std::thread::Builder::new()
        .name("tessera-engine".into())
        .spawn(move || {
            let mut engine = match Engine::open(config, &manifests, tile_size) {
                Ok(e) => {
                    let _ = ready_tx.send(Ok(()));
                    e
                }
                Err(e) => {
                    let _ = ready_tx.send(Err(e));
                    return;
                }
            };
            while let Ok(cmd) = rx.recv() {
                engine.handle(cmd);
            }
        })
        .map_err(|e| Error::Job(format!("cannot start engine thread: {e}")))?;
    ready_rx
        .recv()
        .map_err(|_| Error::Job("engine thread exited during startup".into()))??;
    Ok(tx)
}
