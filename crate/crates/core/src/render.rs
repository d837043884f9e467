//! Mask grids as text or binary PPM images.

use crate::error::{Error, Result};
use crate::mask::Mask;

const KEPT: [u8; 3] = [250, 190, 40];
const DROPPED: [u8; 3] = [48, 48, 56];
const PAD: [u8; 3] = [0, 0, 0];

fn rows(n: usize, width: usize) -> Result<usize> {
    if width == 0 {
        return Err(Error::InvalidConfig("grid width must be positive".into()));
    }
    Ok(n.div_ceil(width))
}

/// `#` for kept tokens, `.` for dropped ones, row-major; a short last row is
/// padded with spaces.
pub fn render_text(mask: &Mask, width: usize) -> Result<String> {
    let h = rows(mask.len(), width)?;
    let mut out = String::with_capacity(h * (width + 1));
    for r in 0..h {
        for c in 0..width {
            let i = r * width + c;
            out.push(match i < mask.len() {
                true if mask.get(i) => '#',
                true => '.',
                false => ' ',
            });
        }
        out.push('\n');
    }
    Ok(out)
}

/// Binary PPM with `cell x cell` pixels per token.
pub fn render_ppm(mask: &Mask, width: usize, cell: usize) -> Result<Vec<u8>> {
    let h = rows(mask.len(), width)?;
    let cell = cell.max(1);
    let (pw, ph) = (width * cell, h * cell);
    let mut out = format!("P6\n{pw} {ph}\n255\n").into_bytes();
    out.reserve(pw * ph * 3);
    for y in 0..ph {
        for x in 0..pw {
            let i = (y / cell) * width + x / cell;
            let color = if i >= mask.len() {
                PAD
            } else if mask.get(i) {
                KEPT
            } else {
                DROPPED
            };
            out.extend_from_slice(&color);
        }
    }
    Ok(out)
}
