mod args;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use tessera::io::{build_lod_offline, import_raw, open_chunked, ChunkedFileHeader, PyramidManifest};
use tessera::operators::{single_level_lod, LodPyramid};
use tessera::render::{
    entry_exit_points, frame_metadata, grey_ramp, raycast, CameraState, Compositing, RaycasterConfig,
};
use tessera::store::StoreConfig;
use tessera::{ElementType, EmbeddingData, EngineConfig, Error, Result, Runtime, TensorMetaData};
use tessera_service::{encode_png, listen_address, serve, Service, ServiceConfig, DEFAULT_TILE_SIZE};

use args::{Camera, List};

#[derive(Parser)]
#[command(name = "tessera", version, about = "Out-of-core chunked tensors: import, build pyramids, render, serve")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Budgets {
    /// RAM store capacity, e.g. 512M or 4G.
    #[arg(long, value_parser = args::bytes, default_value = "1G")]
    ram_budget: u64,
    /// Device store capacity.
    #[arg(long, value_parser = args::bytes, default_value = "1G")]
    device_budget: u64,
    /// Chunk requests per task.
    #[arg(long, default_value_t = 32)]
    max_requests: usize,
    /// Concurrently active tasks per operator.
    #[arg(long, default_value_t = 4)]
    max_active: usize,
}

impl Budgets {
    fn engine(&self) -> EngineConfig {
        EngineConfig {
            max_requests_per_task: self.max_requests,
            max_active_tasks_per_operator: self.max_active,
            devices: vec![StoreConfig::with_capacity(self.device_budget)],
            ..EngineConfig::default().with_ram_capacity(self.ram_budget)
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Converts a dense row-major raw array into a chunked file.
    Import {
        /// Tensor size, slowest dimension first, e.g. 256x256x256.
        #[arg(long, value_parser = args::dim_list)]
        shape: List<u64>,
        /// Chunk size with the same number of dimensions.
        #[arg(long, value_parser = args::dim_list)]
        chunk: List<u64>,
        /// Element type: u8, i16, u16, f32 or f64, optionally with lanes (u8x3).
        #[arg(long = "type", default_value = "f32")]
        element_type: ElementType,
        /// Physical spacing per dimension, comma separated (default 1).
        #[arg(long, value_parser = args::float_list)]
        spacing: Option<List<f64>>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Builds the LOD pyramid of a chunked file and writes a manifest.
    BuildLod {
        #[arg(long)]
        input: PathBuf,
        /// Manifest path; level files are written next to it.
        #[arg(long)]
        output: PathBuf,
        /// Also write const chunk tables for empty-space skipping.
        #[arg(long)]
        const_table: bool,
        #[command(flatten)]
        budgets: Budgets,
    },
    /// Raycasts one frame of a volume to a PNG.
    Render {
        /// Pyramid manifest (.json) or a single chunked file.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_parser = args::pair, default_value = "1000x1000")]
        frame: (u64, u64),
        #[arg(long, value_parser = args::pair, default_value = "512x512")]
        tile: (u64, u64),
        /// Vertical field of view in degrees.
        #[arg(long, default_value_t = 30.0)]
        fov: f64,
        /// `auto` or EYE;LOOK_AT;UP, each as z,y,x physical coordinates.
        #[arg(long, value_parser = args::camera, default_value = "auto")]
        camera: Camera,
        #[arg(long, value_parser = args::compositing, default_value = "dvr")]
        compositing: Compositing,
        /// Grey ramp transfer function range.
        #[arg(long, value_parser = args::range, default_value = "0,1")]
        tf: (f64, f64),
        /// Empty-space skipping with const chunk tables.
        #[arg(long, value_parser = args::on_off, default_value = "on", action = clap::ArgAction::Set)]
        es: bool,
        #[arg(long, default_value_t = 0.5)]
        sample_distance: f64,
        #[arg(long, default_value_t = 0.0)]
        lod_bias: f64,
        /// Print the wall time and brick bytes read.
        #[arg(long)]
        timing: bool,
        #[command(flatten)]
        budgets: Budgets,
    },
    /// Prints the metadata of a chunked file or pyramid manifest.
    Info { path: PathBuf },
    /// Serves datasets over HTTP.
    Serve {
        /// Pyramid manifests to serve (repeatable).
        #[arg(long = "manifest")]
        manifests: Vec<PathBuf>,
        /// Listen address; defaults to $TESSERA_LISTEN, then 127.0.0.1:8080.
        #[arg(long)]
        listen: Option<String>,
        #[arg(long, default_value_t = DEFAULT_TILE_SIZE)]
        tile: u64,
        #[command(flatten)]
        budgets: Budgets,
    },
}

fn is_manifest(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

fn open_lod(path: &Path) -> Result<LodPyramid> {
    if is_manifest(path) {
        PyramidManifest::load(path)?.open(path)
    } else {
        Ok(single_level_lod(&open_chunked(path)?))
    }
}

fn import(
    shape: Vec<u64>,
    chunk: Vec<u64>,
    t: ElementType,
    spacing: Option<Vec<f64>>,
    input: &Path,
    output: &Path,
) -> Result<()> {
    let md = TensorMetaData::new(shape, chunk, t)?;
    let emb = spacing.map(EmbeddingData::new).transpose()?;
    let h = import_raw(input, &md, emb.as_ref(), output)?;
    println!("{}: {} chunks, {} bytes", output.display(), h.present_chunks(), std::fs::metadata(output).map_err(|e| Error::io(output, e))?.len());
    Ok(())
}

fn build(input: &Path, output: &Path, const_table: bool, budgets: &Budgets) -> Result<()> {
    let rt = Runtime::new(budgets.engine())?;
    let m = build_lod_offline(&rt, input, output, const_table)?;
    println!("{}: {} levels", output.display(), m.levels.len());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn render(
    manifest: &Path,
    output: &Path,
    frame: (u64, u64),
    tile: (u64, u64),
    fov: f64,
    camera: &Camera,
    config: RaycasterConfig,
    tf: (f64, f64),
    timing: bool,
    budgets: &Budgets,
) -> Result<()> {
    let lod = open_lod(manifest)?;
    let md = lod.finest().metadata();
    let emb = lod.embedding(0);
    let cam = camera.resolve(|| CameraState::for_volume(md, emb, fov), fov)?;
    let fmd = frame_metadata(frame.0, frame.1, tile.0, tile.1)?;
    let eep = entry_exit_points(md, emb, &fmd, &cam)?;
    let node = raycast(&lod, &eep, &config, &grey_ramp(tf.0, tf.1)?, &fmd)?;
    let rt = Runtime::new(budgets.engine())?;
    let start = Instant::now();
    let pixels = rt.resolve_dense(&node)?;
    let elapsed = start.elapsed();
    let png = encode_png(frame.0 as u32, frame.1 as u32, &pixels)?;
    std::fs::write(output, png).map_err(|e| Error::io(output, e))?;
    if timing {
        println!(
            "render {}x{}: {:.3} s cold cache, {} brick bytes read",
            frame.0,
            frame.1,
            elapsed.as_secs_f64(),
            rt.stats().bytes_read
        );
    }
    Ok(())
}

fn print_header(h: &ChunkedFileHeader) {
    let md = &h.metadata;
    println!("type: {}", md.element_type());
    println!("size: {:?}", md.size());
    println!("chunk: {:?}", md.chunk_size());
    println!("grid: {:?} ({} chunks, {} present)", md.chunk_grid_dims(), md.num_chunks(), h.present_chunks());
    println!("spacing: {:?}", h.spacing);
}

fn info(path: &Path) -> Result<()> {
    if !is_manifest(path) {
        println!("file: {}", path.display());
        print_header(&ChunkedFileHeader::read(path)?);
        return Ok(());
    }
    let m = PyramidManifest::load(path)?;
    let lod = m.open(path)?;
    println!("manifest: {}", path.display());
    println!("levels: {}", lod.num_levels());
    for (i, l) in m.levels.iter().enumerate() {
        let md = lod.level(i).metadata();
        let table = if lod.const_table(i).is_some() { ", const table" } else { "" };
        println!(
            "level {i}: {} size {:?} chunk {:?} spacing {:?}{table}",
            l.path.display(),
            md.size(),
            md.chunk_size(),
            l.spacing
        );
    }
    Ok(())
}

fn run_serve(manifests: Vec<PathBuf>, listen: Option<String>, tile: u64, budgets: &Budgets) -> Result<()> {
    let service = Service::start(ServiceConfig {
        manifests,
        tile_size: tile,
        engine: budgets.engine(),
    })?;
    let addr = listen_address(listen.as_deref());
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::Job(format!("cannot start the async runtime: {e}")))?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| Error::io(Path::new(&addr), e))?;
        let local = listener.local_addr().map_err(|e| Error::io(Path::new(&addr), e))?;
        println!("listening on http://{local}");
        serve(service, listener).await.map_err(|e| Error::io(Path::new(&addr), e))
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let r = match cli.command {
        Command::Import {
            shape,
            chunk,
            element_type,
            spacing,
            input,
            output,
        } => import(shape.0, chunk.0, element_type, spacing.map(|s| s.0), &input, &output),
        Command::BuildLod {
            input,
            output,
            const_table,
            budgets,
        } => build(&input, &output, const_table, &budgets),
        Command::Render {
            manifest,
            output,
            frame,
            tile,
            fov,
            camera,
            compositing,
            tf,
            es,
            sample_distance,
            lod_bias,
            timing,
            budgets,
        } => {
            let config = RaycasterConfig {
                compositing,
                sample_distance_factor: sample_distance,
                lod_bias,
                use_const_table: es,
                ..RaycasterConfig::default()
            };
            render(&manifest, &output, frame, tile, fov, &camera, config, tf, timing, &budgets)
        }
        Command::Info { path } => info(&path),
        Command::Serve {
            manifests,
            listen,
            tile,
            budgets,
        } => run_serve(manifests, listen, tile, &budgets),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
