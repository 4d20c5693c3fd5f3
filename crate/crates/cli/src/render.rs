//! Mid-coronal slice images (binary PGM) with a motion-field arrow overlay.

use respmotion::{DisplacementField, ScalarVolume};

/// Intensity window mapped to 0..255.
const WINDOW: (f64, f64) = (-1000.0, 400.0);
/// Output pixels per voxel.
const ZOOM: usize = 4;
const ARROW_VALUE: u8 = 255;

pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Gray {
    fn set(&mut self, x: i64, y: i64, v: u8) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.pixels[y as usize * self.width + x as usize] = v;
        }
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), v: u8) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.set(x, y, v);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    /// Shaft from `from` to `to` plus two head strokes.
    fn arrow(&mut self, from: (f64, f64), to: (f64, f64)) {
        let r = |p: (f64, f64)| (p.0.round() as i64, p.1.round() as i64);
        let (dx, dy) = (to.0 - from.0, to.1 - from.1);
        let len = (dx * dx + dy * dy).sqrt();
        if len < 0.5 {
            self.set(r(from).0, r(from).1, ARROW_VALUE);
            return;
        }
        self.line(r(from), r(to), ARROW_VALUE);
        let head = (0.35 * len).clamp(2.0, 6.0);
        let (ux, uy) = (dx / len, dy / len);
        for side in [-1.0, 1.0] {
            // Rotate the reversed direction by ±30°.
            let (c, s) = (0.866, 0.5 * side);
            let hx = -(ux * c - uy * s);
            let hy = -(ux * s + uy * c);
            self.line(r(to), r((to.0 + head * hx, to.1 + head * hy)), ARROW_VALUE);
        }
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

/// The x-z plane through the middle of y, superior (high z) at the top,
/// with arrows showing the in-plane displacement on a coarse grid.
pub fn coronal_slice(vol: &ScalarVolume, field: Option<&DisplacementField>) -> Gray {
    let d = vol.domain;
    let [nx, ny, nz] = d.dims;
    let j = ny / 2;
    let (width, height) = (nx * ZOOM, nz * ZOOM);
    let mut img = Gray {
        width,
        height,
        pixels: vec![0; width * height],
    };
    for k in 0..nz {
        for i in 0..nx {
            let v = vol.at(i, j, k);
            let g = ((v - WINDOW.0) / (WINDOW.1 - WINDOW.0) * 255.0)
                .round()
                .clamp(0.0, 255.0) as u8;
            for yy in 0..ZOOM {
                let row = (nz - 1 - k) * ZOOM + yy;
                let start = row * width + i * ZOOM;
                img.pixels[start..start + ZOOM].fill(g);
            }
        }
    }
    if let Some(f) = field {
        let step = (nx.max(nz) / 16).max(2);
        let center = |i: usize, k: usize| {
            (
                (i as f64 + 0.5) * ZOOM as f64,
                ((nz - 1 - k) as f64 + 0.5) * ZOOM as f64,
            )
        };
        for k in (step / 2..nz).step_by(step) {
            for i in (step / 2..nx).step_by(step) {
                let u = f.u[d.index(i, j, k)];
                let from = center(i, k);
                let to = (
                    from.0 + u[0] / d.spacing[0] * ZOOM as f64,
                    from.1 - u[2] / d.spacing[2] * ZOOM as f64,
                );
                img.arrow(from, to);
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use respmotion::GridDomain;

    #[test]
    fn header_size_and_window() {
        let d = GridDomain::cube(8, 1.0).unwrap();
        let vol = ScalarVolume::from_fn(d, -1000.0, |p| if p[2] > 3.5 { 400.0 } else { -1000.0 });
        let img = coronal_slice(&vol, None);
        let pgm = img.to_pgm();
        assert!(pgm.starts_with(b"P5\n32 32\n255\n"));
        assert_eq!(pgm.len(), 13 + 32 * 32);
        // Top rows are high z.
        assert_eq!(img.pixels[0], 255);
        assert_eq!(img.pixels[img.pixels.len() - 1], 0);
    }

    #[test]
    fn arrows_are_drawn() {
        let d = GridDomain::cube(16, 1.0).unwrap();
        let vol = ScalarVolume::filled(d, -1000.0, -1000.0);
        let still = coronal_slice(&vol, Some(&DisplacementField::identity(d)));
        let moving = coronal_slice(&vol, Some(&DisplacementField::constant(d, [0.0, 0.0, 2.0])));
        let lit = |g: &Gray| g.pixels.iter().filter(|&&p| p == ARROW_VALUE).count();
        assert!(lit(&moving) > lit(&still));
        assert!(lit(&still) > 0);
    }
}
