//! Constant sparse linear maps.
//!
//! Resampling, im2col, rotation, placement and upsampling are all linear in
//! the pixel values once their geometry is fixed, so they share one
//! representation: a CSR matrix applied to a flattened tensor.

#[derive(Debug, Clone, PartialEq)]
pub struct SparseMap {
    in_len: usize,
    offsets: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
}

impl SparseMap {
    pub fn builder(in_len: usize) -> SparseMapBuilder {
        SparseMapBuilder {
            map: SparseMap {
                in_len,
                offsets: vec![0],
                cols: Vec::new(),
                weights: Vec::new(),
            },
        }
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.offsets[r]..self.offsets[r + 1];
        self.cols[span.clone()]
            .iter()
            .copied()
            .zip(self.weights[span].iter().copied())
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.in_len, "sparse map input length");
        (0..self.out_len())
            .map(|r| self.row(r).map(|(c, w)| w * x[c]).sum())
            .collect()
    }

    /// Accumulates `Mᵀ g` into `acc`.
    pub fn apply_transpose_into(&self, g: &[f64], acc: &mut [f64]) {
        assert_eq!(g.len(), self.out_len());
        assert_eq!(acc.len(), self.in_len);
        for (r, &gr) in g.iter().enumerate() {
            if gr == 0.0 {
                continue;
            }
            for (c, w) in self.row(r) {
                acc[c] += w * gr;
            }
        }
    }

    /// Row sums, i.e. the map applied to an all-ones input.
    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.out_len())
            .map(|r| self.row(r).map(|(_, w)| w).sum())
            .collect()
    }
}

pub struct SparseMapBuilder {
    map: SparseMap,
}

impl SparseMapBuilder {
    pub fn push(&mut self, col: usize, weight: f64) {
        debug_assert!(col < self.map.in_len);
        self.map.cols.push(col);
        self.map.weights.push(weight);
    }

    pub fn end_row(&mut self) {
        self.map.offsets.push(self.map.cols.len());
    }

    pub fn build(self) -> SparseMap {
        self.map
    }
}

/// Bilinear interpolation taps at continuous pixel coordinate `(x, y)` on a
/// `width × height` grid, pixel centers at integer coordinates.
///
/// With `zero_pad` the out-of-range taps are dropped (their weight is lost);
/// otherwise they are clamped to the nearest edge pixel.
pub fn bilinear_taps(
    x: f64,
    y: f64,
    width: usize,
    height: usize,
    zero_pad: bool,
) -> impl Iterator<Item = (usize, f64)> {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let taps = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0 + 1, y0, fx * (1.0 - fy)),
        (x0, y0 + 1, (1.0 - fx) * fy),
        (x0 + 1, y0 + 1, fx * fy),
    ];
    let (w, h) = (width as i64, height as i64);
    taps.into_iter().filter_map(move |(tx, ty, weight)| {
        if weight == 0.0 {
            return None;
        }
        let inside = tx >= 0 && ty >= 0 && tx < w && ty < h;
        if !inside && zero_pad {
            return None;
        }
        let cx = tx.clamp(0, w - 1) as usize;
        let cy = ty.clamp(0, h - 1) as usize;
        Some((cy * width + cx, weight))
    })
}

/// im2col for a 3×3, stride-1, zero-padded convolution.
///
/// Input layout is `(height·width, channels)` row-major; output layout is
/// `(height·width, 9·channels)` with column `k·channels + c` holding channel
/// `c` of neighbour `k` (row-major over the 3×3 window).
pub fn im2col_3x3(height: usize, width: usize, channels: usize) -> SparseMap {
    let mut b = SparseMap::builder(height * width * channels);
    for y in 0..height as i64 {
        for x in 0..width as i64 {
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    let (sy, sx) = (y + dy, x + dx);
                    let inside = sy >= 0 && sx >= 0 && sy < height as i64 && sx < width as i64;
                    for c in 0..channels {
                        if inside {
                            b.push((sy as usize * width + sx as usize) * channels + c, 1.0);
                        }
                        b.end_row();
                    }
                }
            }
        }
    }
    b.build()
}

/// Interleaves the four offset planes of a 2×2, stride-2 transposed
/// convolution. Input is the concatenation of four `(height·width, channels)`
/// blocks ordered `(dy, dx) = (0,0), (0,1), (1,0), (1,1)`; output is
/// `(2·height·2·width, channels)`.
pub fn interleave_2x2(height: usize, width: usize, channels: usize) -> SparseMap {
    let block = height * width * channels;
    let (oh, ow) = (2 * height, 2 * width);
    let mut b = SparseMap::builder(4 * block);
    for oy in 0..oh {
        for ox in 0..ow {
            let (y, dy) = (oy / 2, oy % 2);
            let (x, dx) = (ox / 2, ox % 2);
            let plane = dy * 2 + dx;
            for c in 0..channels {
                b.push(plane * block + (y * width + x) * channels + c, 1.0);
                b.end_row();
            }
        }
    }
    b.build()
}

/// Bilinear resize of a `(height·width, channels)` grid to `(out_h·out_w, channels)`
/// using half-pixel centers and edge clamping.
pub fn resize_bilinear(height: usize, width: usize, channels: usize, out_h: usize, out_w: usize) -> SparseMap {
    let mut b = SparseMap::builder(height * width * channels);
    let sy = height as f64 / out_h as f64;
    let sx = width as f64 / out_w as f64;
    for oy in 0..out_h {
        for ox in 0..out_w {
            let y = (oy as f64 + 0.5) * sy - 0.5;
            let x = (ox as f64 + 0.5) * sx - 0.5;
            let taps: Vec<_> = bilinear_taps(x, y, width, height, false).collect();
            for c in 0..channels {
                for &(p, w) in &taps {
                    b.push(p * channels + c, w);
                }
                b.end_row();
            }
        }
    }
    b.build()
}
