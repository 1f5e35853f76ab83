//! Tile-based rendering: entry-exit points, volume raycasting, slice and
//! image views, and transfer functions.
//!
//! Frames are 2-D tensors of shape `[height, width]` chunked into tiles.
//! Pixels are premultiplied RGBA, stored row-major as RGBA8 (or F32x4 for
//! raycasts that ask for unquantized output).

mod camera;
mod eep;
mod raycast;
mod resident;
mod tf;
mod view;

use std::future::Future;
use std::pin::Pin;
use std::task::{Context, Poll};

pub use camera::{ray_box, CameraState, Vec3};
pub use eep::{entry_exit_points, ray_segment, EEP_LANES};
pub use raycast::{frame_metadata, raycast, Compositing, RaycasterConfig, EARLY_TERMINATION};
pub use tf::{grey_ramp, to_rgba8, TransferFunction};
pub use view::{image_view, slice_view, view_level, PanZoom};

use crate::chunk::TensorMetaData;
use crate::dtype::ScalarType;
use crate::error::{Error, Result};

pub(crate) fn check_frame_md(md: &TensorMetaData) -> Result<()> {
    let t = md.element_type();
    if md.num_dims() != 2 || t.lanes != 4 || !matches!(t.scalar, ScalarType::U8 | ScalarType::F32) {
        return Err(Error::invalid(
            "frames are 2-D tensors with RGBA8 or F32x4 elements",
        ));
    }
    Ok(())
}

/// Writes premultiplied colors (row-major over the chunk) into a frame chunk.
pub(crate) fn encode_frame_chunk(md: &TensorMetaData, image: &[[f64; 4]], out: &mut [u8]) {
    match md.element_type().scalar {
        ScalarType::F32 => {
            for (i, px) in image.iter().enumerate() {
                for k in 0..4 {
                    ScalarType::F32.write(out, i * 4 + k, px[k]);
                }
            }
        }
        _ => {
            for (i, px) in image.iter().enumerate() {
                out[i * 4..i * 4 + 4].copy_from_slice(&to_rgba8(*px));
            }
        }
    }
}

type Boxed = Pin<Box<dyn Future<Output = Result<()>>>>;

struct JoinAll {
    futures: Vec<Option<Boxed>>,
}

impl Future for JoinAll {
    type Output = Result<()>;

    fn poll(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<Result<()>> {
        let mut pending = false;
        for slot in self.futures.iter_mut() {
            if let Some(f) = slot {
                match f.as_mut().poll(cx) {
                    Poll::Ready(Ok(())) => *slot = None,
                    Poll::Ready(Err(e)) => return Poll::Ready(Err(e)),
                    Poll::Pending => pending = true,
                }
            }
        }
        if pending {
            Poll::Pending
        } else {
            Poll::Ready(Ok(()))
        }
    }
}

/// Runs the futures of one task concurrently.
pub(crate) fn join_all<F: Future<Output = Result<()>> + 'static>(futures: Vec<F>) -> impl Future<Output = Result<()>> {
    JoinAll {
        futures: futures
            .into_iter()
            .map(|f| Some(Box::pin(f) as Boxed))
            .collect(),
    }
}
