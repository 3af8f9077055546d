//! Binary PGM masks of label tables on the patch grid.

use std::collections::HashMap;

use crate::data::{LabelTable, PatchRecord};
use crate::error::{Error, Result};

pub const POSITIVE: u8 = 255;
pub const NEGATIVE: u8 = 0;
pub const NO_PATCH: u8 = 128;

/// P5 image one pixel per grid cell: 255 positive, 0 negative, 128 where no patch exists.
pub fn render_pgm(labels: &LabelTable, patches: &[PatchRecord]) -> Result<Vec<u8>> {
    if patches.is_empty() {
        return Err(Error::InvalidData("no patches to render".into()));
    }
    let by_id: HashMap<&str, u8> = labels
        .entries
        .iter()
        .map(|e| (e.patch_id.as_str(), e.label))
        .collect();
    let w = patches.iter().map(|p| p.grid_x).max().unwrap() as usize + 1;
    let h = patches.iter().map(|p| p.grid_y).max().unwrap() as usize + 1;
    let mut pixels = vec![NO_PATCH; w * h];
    for p in patches {
        let label = by_id.get(p.patch_id.as_str()).ok_or_else(|| {
            Error::InvalidData(format!("patch {:?} missing from label table", p.patch_id))
        })?;
        pixels[p.grid_y as usize * w + p.grid_x as usize] =
            if *label == 1 { POSITIVE } else { NEGATIVE };
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    Ok(out)
}
