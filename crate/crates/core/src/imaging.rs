//! Small raster utilities shared by several stages: bilinear sampling,
//! resizing, rotation and connected-component labelling on boolean masks.

use ndarray::Array2;

/// Bilinear sample at fractional `(row, col)`; coordinates outside the
/// raster are clamped to the nearest edge pixel.
pub fn sample_bilinear(image: &Array2<f64>, row: f64, col: f64) -> f64 {
    let (rows, cols) = image.dim();
    let r = row.clamp(0.0, (rows - 1) as f64);
    let c = col.clamp(0.0, (cols - 1) as f64);
    let r0 = r.floor() as usize;
    let c0 = c.floor() as usize;
    let r1 = (r0 + 1).min(rows - 1);
    let c1 = (c0 + 1).min(cols - 1);
    let fr = r - r0 as f64;
    let fc = c - c0 as f64;
    let top = image[[r0, c0]] * (1.0 - fc) + image[[r0, c1]] * fc;
    let bottom = image[[r1, c0]] * (1.0 - fc) + image[[r1, c1]] * fc;
    top * (1.0 - fr) + bottom * fr
}

/// Bilinear resize with pixel-centre alignment.
pub fn resize_bilinear(image: &Array2<f64>, out_rows: usize, out_cols: usize) -> Array2<f64> {
    let (rows, cols) = image.dim();
    let sr = rows as f64 / out_rows as f64;
    let sc = cols as f64 / out_cols as f64;
    Array2::from_shape_fn((out_rows, out_cols), |(i, j)| {
        let r = (i as f64 + 0.5) * sr - 0.5;
        let c = (j as f64 + 0.5) * sc - 0.5;
        sample_bilinear(image, r, c)
    })
}

/// Rotates about the raster centre by `degrees` (counter-clockwise on screen).
/// Destination pixels whose source lies outside the raster take `fill`.
pub fn rotate_bilinear(image: &Array2<f64>, degrees: f64, fill: f64) -> Array2<f64> {
    let (rows, cols) = image.dim();
    let cy = (rows as f64 - 1.0) / 2.0;
    let cx = (cols as f64 - 1.0) / 2.0;
    let (sin, cos) = degrees.to_radians().sin_cos();
    let max_r = rows as f64 - 1.0;
    let max_c = cols as f64 - 1.0;
    Array2::from_shape_fn((rows, cols), |(i, j)| {
        // Screen rows grow downward, so a visual CCW rotation maps the
        // destination back through the transposed matrix with y flipped.
        let y = cy - i as f64;
        let x = j as f64 - cx;
        let sx = cos * x + sin * y;
        let sy = -sin * x + cos * y;
        let r = cy - sy;
        let c = cx + sx;
        if r < -1e-9 || c < -1e-9 || r > max_r + 1e-9 || c > max_c + 1e-9 {
            fill
        } else {
            sample_bilinear(image, r, c)
        }
    })
}

/// Median of the outermost ring of pixels.
pub fn border_median(image: &Array2<f64>) -> f64 {
    let (rows, cols) = image.dim();
    let mut ring = Vec::with_capacity(2 * (rows + cols));
    for j in 0..cols {
        ring.push(image[[0, j]]);
        if rows > 1 {
            ring.push(image[[rows - 1, j]]);
        }
    }
    for i in 1..rows.saturating_sub(1) {
        ring.push(image[[i, 0]]);
        if cols > 1 {
            ring.push(image[[i, cols - 1]]);
        }
    }
    median(&mut ring)
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Inclusive-exclusive bounding box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BoundingBox {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl BoundingBox {
    pub fn contains(&self, row: f64, col: f64) -> bool {
        row >= self.row as f64
            && row <= (self.row + self.height - 1) as f64
            && col >= self.col as f64
            && col <= (self.col + self.width - 1) as f64
    }

    pub fn intersects(&self, other: &BoundingBox) -> bool {
        self.row < other.row + other.height
            && other.row < self.row + self.height
            && self.col < other.col + other.width
            && other.col < self.col + self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    /// Grows the box by `margin` on every side, clamped to the raster.
    pub fn expanded(&self, margin: usize, rows: usize, cols: usize) -> BoundingBox {
        let r0 = self.row.saturating_sub(margin);
        let c0 = self.col.saturating_sub(margin);
        let r1 = (self.row + self.height + margin).min(rows);
        let c1 = (self.col + self.width + margin).min(cols);
        BoundingBox {
            row: r0,
            col: c0,
            height: r1 - r0,
            width: c1 - c0,
        }
    }
}

/// A set of pixels forming one connected region.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    /// Pixel coordinates in raster order.
    pub pixels: Vec<(usize, usize)>,
    pub bbox: BoundingBox,
}

impl Component {
    pub fn from_pixels(mut pixels: Vec<(usize, usize)>) -> Option<Self> {
        if pixels.is_empty() {
            return None;
        }
        pixels.sort_unstable();
        let mut r0 = usize::MAX;
        let mut c0 = usize::MAX;
        let mut r1 = 0;
        let mut c1 = 0;
        for &(r, c) in &pixels {
            r0 = r0.min(r);
            c0 = c0.min(c);
            r1 = r1.max(r);
            c1 = c1.max(c);
        }
        Some(Self {
            pixels,
            bbox: BoundingBox {
                row: r0,
                col: c0,
                height: r1 - r0 + 1,
                width: c1 - c0 + 1,
            },
        })
    }

    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    /// Mask of the component over a raster of the given shape.
    pub fn mask(&self, rows: usize, cols: usize) -> Array2<bool> {
        let mut mask = Array2::from_elem((rows, cols), false);
        for &(r, c) in &self.pixels {
            mask[[r, c]] = true;
        }
        mask
    }
}

const NEIGHBORS_8: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// 8-connected component labelling. Components are returned in raster order
/// of their first pixel.
pub fn label_components(mask: &Array2<bool>) -> Vec<Component> {
    let (rows, cols) = mask.dim();
    let mut seen = Array2::from_elem((rows, cols), false);
    let mut components = Vec::new();
    let mut stack = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if !mask[[r, c]] || seen[[r, c]] {
                continue;
            }
            seen[[r, c]] = true;
            stack.push((r, c));
            let mut pixels = Vec::new();
            while let Some((pr, pc)) = stack.pop() {
                pixels.push((pr, pc));
                for (dr, dc) in NEIGHBORS_8 {
                    let nr = pr as isize + dr;
                    let nc = pc as isize + dc;
                    if nr < 0 || nc < 0 || nr >= rows as isize || nc >= cols as isize {
                        continue;
                    }
                    let (nr, nc) = (nr as usize, nc as usize);
                    if mask[[nr, nc]] && !seen[[nr, nc]] {
                        seen[[nr, nc]] = true;
                        stack.push((nr, nc));
                    }
                }
            }
            components.extend(Component::from_pixels(pixels));
        }
    }
    components
}

/// Fills interior holes: every false pixel not 4-connected to the raster
/// border becomes true.
pub fn fill_holes(mask: &Array2<bool>) -> Array2<bool> {
    let (rows, cols) = mask.dim();
    let mut outside = Array2::from_elem((rows, cols), false);
    let mut stack = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let on_border = r == 0 || c == 0 || r + 1 == rows || c + 1 == cols;
            if on_border && !mask[[r, c]] {
                outside[[r, c]] = true;
                stack.push((r, c));
            }
        }
    }
    while let Some((r, c)) = stack.pop() {
        let mut visit = |nr: usize, nc: usize| {
            if !mask[[nr, nc]] && !outside[[nr, nc]] {
                outside[[nr, nc]] = true;
                stack.push((nr, nc));
            }
        };
        if r > 0 {
            visit(r - 1, c);
        }
        if r + 1 < rows {
            visit(r + 1, c);
        }
        if c > 0 {
            visit(r, c - 1);
        }
        if c + 1 < cols {
            visit(r, c + 1);
        }
    }
    outside.mapv(|o| !o)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disk(rows: usize, cols: usize, cy: f64, cx: f64, radius: f64) -> Array2<bool> {
        Array2::from_shape_fn((rows, cols), |(r, c)| {
            let dy = r as f64 - cy;
            let dx = c as f64 - cx;
            dy * dy + dx * dx <= radius * radius
        })
    }

    #[test]
    fn resize_constant_stays_constant() {
        let img = Array2::from_elem((60, 60), 1.25);
        let out = resize_bilinear(&img, 120, 120);
        assert!(out.iter().all(|&v| (v - 1.25).abs() < 1e-12));
    }

    #[test]
    fn rotate_by_ninety_permutes_pixels() {
        let img = Array2::from_shape_fn((5, 5), |(r, c)| (r * 5 + c) as f64);
        let out = rotate_bilinear(&img, 90.0, -1.0);
        // Counter-clockwise: the top-right corner moves to the top-left.
        assert!((out[[0, 0]] - img[[0, 4]]).abs() < 1e-9);
        assert!((out[[4, 0]] - img[[0, 0]]).abs() < 1e-9);
        assert!((out[[2, 2]] - img[[2, 2]]).abs() < 1e-9);
    }

    #[test]
    fn labels_two_disks() {
        let mut mask = disk(40, 80, 20.0, 15.0, 8.0);
        let other = disk(40, 80, 20.0, 60.0, 8.0);
        mask.zip_mut_with(&other, |a, &b| *a |= b);
        let comps = label_components(&mask);
        assert_eq!(comps.len(), 2);
        assert!(!comps[0].bbox.intersects(&comps[1].bbox));
        assert_eq!(comps.iter().map(Component::area).sum::<usize>(), mask.iter().filter(|&&m| m).count());
    }

    #[test]
    fn diagonal_pixels_are_connected() {
        let mut mask = Array2::from_elem((4, 4), false);
        mask[[0, 0]] = true;
        mask[[1, 1]] = true;
        mask[[2, 2]] = true;
        assert_eq!(label_components(&mask).len(), 1);
    }

    #[test]
    fn fill_holes_closes_ring() {
        let outer = disk(30, 30, 15.0, 15.0, 10.0);
        let inner = disk(30, 30, 15.0, 15.0, 4.0);
        let mut ring = outer.clone();
        ring.zip_mut_with(&inner, |a, &b| *a &= !b);
        assert_eq!(fill_holes(&ring), outer);
    }

    #[test]
    fn border_median_of_gradient() {
        let img = Array2::from_shape_fn((3, 3), |(r, c)| (r * 3 + c) as f64);
        // ring: 0 1 2 3 5 6 7 8
        assert!((border_median(&img) - 4.0).abs() < 1e-12);
    }
}
