use std::fs;
use std::path::Path;

use ndarray::{s, Array2};

use crate::error::{QpiError, Result};
use crate::forward_model::{CellClass, PerChannel, PhaseMap};
use crate::imaging::{resize_bilinear, BoundingBox, Component};

/// Side of a normalised patch in pixels.
pub const PATCH_SIDE: usize = 60;

const MAGIC: &[u8; 4] = b"QPA1";
const SUBJECT_LEN: usize = 16;
const UNLABELED: u8 = 0xff;

pub type PatchLabel = Option<CellClass>;

/// One cell cropped from the three co-registered phase maps.
#[derive(Debug, Clone, PartialEq)]
pub struct RbcPatch {
    pub channels: PerChannel<Array2<f64>>,
    pub label: PatchLabel,
    pub subject_id: String,
    /// Crop box in source coordinates.
    pub bbox: BoundingBox,
    pub normalized: bool,
}

impl RbcPatch {
    pub fn shape(&self) -> (usize, usize) {
        self.channels.red.dim()
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.shape();
        if self.channels.iter().any(|(_, c)| c.dim() != shape) {
            return Err(QpiError::Shape("patch channels differ in shape".into()));
        }
        if self.normalized && shape != (PATCH_SIDE, PATCH_SIDE) {
            return Err(QpiError::Shape(format!(
                "normalised patch must be {PATCH_SIDE}x{PATCH_SIDE}, found {}x{}",
                shape.0, shape.1
            )));
        }
        Ok(())
    }
}

/// Crops every component from all three maps (tight box plus `margin`,
/// clamped) and resamples to 60×60. Returns the patches and the number of
/// empty components skipped.
pub fn crop_patches(
    components: &[Component],
    phases: &PerChannel<PhaseMap>,
    subject_id: &str,
    margin: usize,
) -> Result<(Vec<RbcPatch>, usize)> {
    let shape = phases.red.shape();
    if phases.iter().any(|(_, p)| p.shape() != shape) {
        return Err(QpiError::Shape("phase maps of one field of view must share a shape".into()));
    }
    let mut patches = Vec::with_capacity(components.len());
    let mut skipped = 0;
    for comp in components {
        if comp.area() == 0 {
            skipped += 1;
            continue;
        }
        let bbox = comp.bbox.expanded(margin, shape.0, shape.1);
        let channels = phases.map(|p| {
            let crop = p
                .values
                .slice(s![bbox.row..bbox.row + bbox.height, bbox.col..bbox.col + bbox.width])
                .to_owned();
            resize_bilinear(&crop, PATCH_SIDE, PATCH_SIDE)
        });
        patches.push(RbcPatch {
            channels,
            label: None,
            subject_id: subject_id.to_string(),
            bbox,
            normalized: true,
        });
    }
    Ok((patches, skipped))
}

/// Writes a normalised patch: magic, label byte, 16-byte subject id, then
/// the red, green and blue planes as little-endian f32.
pub fn write_patch(path: &Path, patch: &RbcPatch) -> Result<()> {
    patch.validate()?;
    if !patch.normalized {
        return Err(QpiError::Contract("only normalised patches can be written".into()));
    }
    let id = patch.subject_id.as_bytes();
    if id.len() > SUBJECT_LEN {
        return Err(QpiError::format(
            path,
            format!("subject id {:?} exceeds {SUBJECT_LEN} bytes", patch.subject_id),
        ));
    }
    let mut out = Vec::with_capacity(4 + 1 + SUBJECT_LEN + 3 * PATCH_SIDE * PATCH_SIDE * 4);
    out.extend_from_slice(MAGIC);
    out.push(patch.label.map_or(UNLABELED, |c| c.index() as u8));
    let mut padded = [0u8; SUBJECT_LEN];
    padded[..id.len()].copy_from_slice(id);
    out.extend_from_slice(&padded);
    for (_, plane) in patch.channels.iter() {
        for &v in plane.iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| QpiError::io(path, e))
}

pub fn read_patch(path: &Path) -> Result<RbcPatch> {
    crate::audit::record_read(path);
    let bytes = fs::read(path).map_err(|e| QpiError::io(path, e))?;
    let plane = PATCH_SIDE * PATCH_SIDE;
    let expected = 4 + 1 + SUBJECT_LEN + 3 * plane * 4;
    if bytes.len() != expected {
        return Err(QpiError::format(path, format!("expected {expected} bytes, found {}", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(QpiError::format(path, "not a patch file"));
    }
    let label = match bytes[4] {
        UNLABELED => None,
        b => Some(
            CellClass::from_index(b as usize)
                .ok_or_else(|| QpiError::format(path, format!("unknown label byte {b}")))?,
        ),
    };
    let id = &bytes[5..5 + SUBJECT_LEN];
    let end = id.iter().position(|&b| b == 0).unwrap_or(SUBJECT_LEN);
    let subject_id = std::str::from_utf8(&id[..end])
        .map_err(|_| QpiError::format(path, "subject id is not UTF-8"))?
        .to_string();
    let data = &bytes[5 + SUBJECT_LEN..];
    let plane_at = |k: usize| {
        Array2::from_shape_fn((PATCH_SIDE, PATCH_SIDE), |(r, c)| {
            let o = (k * plane + r * PATCH_SIDE + c) * 4;
            f32::from_le_bytes([data[o], data[o + 1], data[o + 2], data[o + 3]]) as f64
        })
    };
    let patch = RbcPatch {
        channels: PerChannel::new(plane_at(0), plane_at(1), plane_at(2)),
        label,
        subject_id,
        bbox: BoundingBox {
            row: 0,
            col: 0,
            height: PATCH_SIDE,
            width: PATCH_SIDE,
        },
        normalized: true,
    };
    if patch.channels.iter().any(|(_, p)| p.iter().any(|v| !v.is_finite())) {
        return Err(QpiError::format(path, "patch contains non-finite values"));
    }
    Ok(patch)
}
