use serde::{Deserialize, Serialize};

use tessera::operators::LodPyramid;
use tessera::render::{
    entry_exit_points, frame_metadata, grey_ramp, image_view, raycast, slice_view, CameraState, PanZoom,
    RaycasterConfig, TransferFunction,
};
use tessera::{Error, Node, Result, TensorMetaData};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewKind {
    Image,
    Slice,
    Raycast,
}

/// Parameters of a view. Fields that do not apply to the session's kind are
/// ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViewParams {
    pub width: u64,
    pub height: u64,
    /// Raycast camera; `None` frames the whole volume with `fov`.
    pub camera: Option<CameraState>,
    pub fov: f64,
    pub config: RaycasterConfig,
    /// Defaults to a grey ramp over `[0, 1]`; optional for RGB(A) images.
    pub tf: Option<TransferFunction>,
    /// Pan/zoom of image and slice views.
    pub view: PanZoom,
    /// Slice orthogonal to `dim` at level-0 index `index`.
    pub dim: usize,
    pub index: u64,
    /// Level-0 indices of the remaining dimensions of >3-D slices (e.g. time).
    pub fixed: Option<Vec<u64>>,
    pub background: [u8; 4],
}

impl Default for ViewParams {
    fn default() -> Self {
        ViewParams {
            width: 512,
            height: 512,
            camera: None,
            fov: 30.0,
            config: RaycasterConfig::default(),
            tf: None,
            view: PanZoom::default(),
            dim: 0,
            index: 0,
            fixed: None,
            background: [0; 4],
        }
    }
}

pub const MAX_FRAME_SIDE: u64 = 1 << 15;

/// The frame metadata and the node computing it.
pub fn build_view(lod: &LodPyramid, kind: ViewKind, p: &ViewParams, tile: u64) -> Result<(TensorMetaData, Node)> {
    if p.width == 0 || p.height == 0 || p.width > MAX_FRAME_SIDE || p.height > MAX_FRAME_SIDE {
        return Err(Error::invalid(format!(
            "frame size {}x{} outside 1..={MAX_FRAME_SIDE}",
            p.width, p.height
        )));
    }
    let frame = frame_metadata(p.width, p.height, tile, tile)?;
    let ramp = || grey_ramp(0.0, 1.0).expect("valid ramp");
    let node = match kind {
        ViewKind::Raycast => {
            let md = lod.finest().metadata();
            if md.num_dims() != 3 {
                return Err(Error::invalid("raycast views need a 3-D dataset"));
            }
            let camera = match &p.camera {
                Some(c) => {
                    c.validate()?;
                    c.clone()
                }
                None => CameraState::for_volume(md, lod.embedding(0), p.fov)?,
            };
            let eep = entry_exit_points(md, lod.embedding(0), &frame, &camera)?;
            raycast(lod, &eep, &p.config, &p.tf.clone().unwrap_or_else(ramp), &frame)?
        }
        ViewKind::Slice => {
            p.view.validate()?;
            let tf = p.tf.clone().unwrap_or_else(ramp);
            slice_view(lod, p.dim, p.index, p.fixed.clone(), &p.view, &tf, p.background, &frame)?
        }
        ViewKind::Image => {
            p.view.validate()?;
            let scalar = lod.finest().metadata().element_type().is_scalar();
            let tf = p.tf.clone().or_else(|| scalar.then(ramp));
            image_view(lod, &p.view, tf.as_ref(), p.background, &frame)?
        }
    };
    Ok((frame, node))
}
