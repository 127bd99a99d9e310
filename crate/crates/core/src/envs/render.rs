//! Resolution-independent drawing: tasks live in the unit square and are
//! rasterized to whatever frame shape the experiment asks for.

use super::FrameShape;

pub type Color = [f64; 3];

pub struct Canvas<'a> {
    shape: FrameShape,
    pixels: &'a mut [f64],
}

impl<'a> Canvas<'a> {
    pub fn new(shape: FrameShape, pixels: &'a mut [f64]) -> Self {
        debug_assert_eq!(pixels.len(), shape.len());
        Self { shape, pixels }
    }

    fn put(&mut self, y: usize, x: usize, color: Color) {
        let c = self.shape.channels;
        let base = (y * self.shape.width + x) * c;
        if c == 3 {
            self.pixels[base..base + 3].copy_from_slice(&color);
        } else {
            let grey = 0.299 * color[0] + 0.587 * color[1] + 0.114 * color[2];
            self.pixels[base..base + c].iter_mut().for_each(|p| *p = grey);
        }
    }

    pub fn clear(&mut self, color: Color) {
        for y in 0..self.shape.height {
            for x in 0..self.shape.width {
                self.put(y, x, color);
            }
        }
    }

    /// Fills the axis-aligned box `[x, x+w) × [y, y+h)` given in unit
    /// coordinates. Every box covers at least one pixel.
    pub fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, color: Color) {
        let (hh, ww) = (self.shape.height as f64, self.shape.width as f64);
        let span = |lo: f64, len: f64, n: f64| {
            let a = (lo * n).floor().clamp(0.0, n - 1.0) as usize;
            let b = ((lo + len) * n).ceil().clamp(a as f64 + 1.0, n) as usize;
            (a, b)
        };
        let (y0, y1) = span(y, h, hh);
        let (x0, x1) = span(x, w, ww);
        for py in y0..y1 {
            for px in x0..x1 {
                self.put(py, px, color);
            }
        }
    }
}

pub fn grey(v: f64) -> Color {
    [v, v, v]
}
