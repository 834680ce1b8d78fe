//! Token sequence geometry: a row-major visual grid followed by text tokens.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How distance between two visual tokens is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    /// Euclidean distance between grid coordinates.
    #[default]
    Euclidean2d,
    /// `|i - j|` on sequence indices.
    Sequence1d,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenLayout {
    pub grid_width: usize,
    pub grid_height: usize,
    pub n_text: usize,
}

impl TokenLayout {
    pub fn new(grid_width: usize, grid_height: usize, n_text: usize) -> Result<Self> {
        let layout = Self {
            grid_width,
            grid_height,
            n_text,
        };
        layout.validate()?;
        Ok(layout)
    }

    /// Layout for `n_visual` tokens. Keeps `preferred_rows` rows when it
    /// divides `n_visual`, otherwise uses the most square factorization.
    pub fn with_visual_count(n_visual: usize, n_text: usize, preferred_rows: usize) -> Result<Self> {
        if n_visual == 0 {
            return Self::new(0, 0, n_text);
        }
        let rows = if preferred_rows > 0 && n_visual.is_multiple_of(preferred_rows) {
            preferred_rows
        } else {
            let mut best = 1;
            let mut r = 1;
            while r * r <= n_visual {
                if n_visual.is_multiple_of(r) {
                    best = r;
                }
                r += 1;
            }
            best
        };
        Self::new(n_visual / rows, rows, n_text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_text == 0 {
            return Err(Error::InvalidModelConfig("n_text must be at least 1".into()));
        }
        if (self.grid_width == 0) != (self.grid_height == 0) {
            return Err(Error::InvalidModelConfig(format!(
                "degenerate grid {}x{}: both sides must be zero or both positive",
                self.grid_width, self.grid_height
            )));
        }
        Ok(())
    }

    pub fn n_visual(&self) -> usize {
        self.grid_width * self.grid_height
    }

    pub fn n_tokens(&self) -> usize {
        self.n_visual() + self.n_text
    }

    pub fn is_visual(&self, position: usize) -> bool {
        position < self.n_visual()
    }

    /// Grid coordinates `(x, y)` of visual token `i`.
    pub fn coords(&self, i: usize) -> Result<(usize, usize)> {
        self.check(i)?;
        Ok((i % self.grid_width, i / self.grid_width))
    }

    /// Largest distance between any two visual tokens under `metric`.
    pub fn max_distance(&self, metric: DistanceMetric) -> f64 {
        if self.n_visual() == 0 {
            return 0.0;
        }
        match metric {
            DistanceMetric::Euclidean2d => euclid(self.grid_width - 1, self.grid_height - 1),
            DistanceMetric::Sequence1d => (self.n_visual() - 1) as f64,
        }
    }

    /// Whether `radius` reaches every visual pair.
    pub fn window_is_full(&self, metric: DistanceMetric, radius: f64) -> bool {
        radius >= self.max_distance(metric)
    }

    pub fn distance(&self, metric: DistanceMetric, i: usize, j: usize) -> Result<f64> {
        self.check(i)?;
        self.check(j)?;
        Ok(self.distance_unchecked(metric, i, j))
    }

    #[inline]
    pub(crate) fn distance_unchecked(&self, metric: DistanceMetric, i: usize, j: usize) -> f64 {
        match metric {
            DistanceMetric::Euclidean2d => {
                let w = self.grid_width;
                euclid((i % w).abs_diff(j % w), (i / w).abs_diff(j / w))
            }
            DistanceMetric::Sequence1d => i.abs_diff(j) as f64,
        }
    }

    /// All visual tokens within `radius` of `i` (always includes `i`), ascending.
    pub fn neighbors_within(&self, metric: DistanceMetric, i: usize, radius: f64) -> Result<Vec<usize>> {
        self.check(i)?;
        if radius.is_nan() || radius < 0.0 {
            return Err(Error::InvalidArgument(format!("radius must be >= 0, got {radius}")));
        }
        Ok((0..self.n_visual())
            .filter(|&j| self.distance_unchecked(metric, i, j) <= radius)
            .collect())
    }

    /// Number of ordered visual pairs `(i, j)` with `distance(i, j) <= radius`.
    ///
    /// Counts by offset rather than by pair, so it stays cheap for very large
    /// grids: each offset `(dx, dy)` inside the window occurs
    /// `(W - |dx|) * (H - |dy|)` times.
    pub fn window_pair_count(&self, metric: DistanceMetric, radius: f64) -> u64 {
        let nv = self.n_visual();
        if nv == 0 || radius < 0.0 {
            return 0;
        }
        match metric {
            DistanceMetric::Sequence1d => {
                let reach = radius.floor().min((nv - 1) as f64) as u64;
                let nv = nv as u64;
                // nv for the diagonal plus 2 * sum_{k=1..reach} (nv - k)
                nv + 2 * (reach * nv - reach * (reach + 1) / 2)
            }
            DistanceMetric::Euclidean2d => {
                let (w, h) = (self.grid_width, self.grid_height);
                let mut total = 0u64;
                for dy in 0..h {
                    let row_mult = if dy == 0 { 1 } else { 2 } * (h - dy) as u64;
                    for dx in 0..w {
                        if euclid(dx, dy) > radius {
                            break;
                        }
                        let col_mult = if dx == 0 { 1 } else { 2 } * (w - dx) as u64;
                        total += row_mult * col_mult;
                    }
                }
                total
            }
        }
    }

    fn check(&self, i: usize) -> Result<()> {
        if i >= self.n_visual() {
            return Err(Error::VisualIndexOutOfRange {
                index: i,
                n_visual: self.n_visual(),
            });
        }
        Ok(())
    }
}

#[inline]
fn euclid(dx: usize, dy: usize) -> f64 {
    ((dx * dx + dy * dy) as f64).sqrt()
}
