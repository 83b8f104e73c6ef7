//! 2D axial rotary positional embeddings over real-valued token coordinates,
//! and region-to-region coordinate transplant.
//!
//! Head dimensions are split evenly between the two axes: of the
//! `head_dim / 2` rotation pairs, the first half rotate by the `y`
//! coordinate and the second half by `x`. Pair `i` of an axis with `d` pairs
//! turns by `coord / base^(i / d)` radians.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{contract, shape_check, Result};
use crate::numkit::{PairRotation, Tensor};

pub const DEFAULT_BASE: f64 = 10_000.0;

/// Per-token `(y, x)` coordinates in units of token cells.
///
/// Each token also remembers the coordinate it was created with, which is
/// how transplant finds the tokens of a region and how the native layout is
/// restored afterwards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionGrid {
    coords: Vec<(f64, f64)>,
    native: Vec<(f64, f64)>,
}

impl PositionGrid {
    pub fn from_coords(coords: Vec<(f64, f64)>) -> Result<Self> {
        contract!(
            coords.iter().all(|(y, x)| y.is_finite() && x.is_finite()),
            "position coordinates must be finite"
        );
        Ok(Self {
            native: coords.clone(),
            coords,
        })
    }

    pub fn coords(&self) -> &[(f64, f64)] {
        &self.coords
    }

    pub fn native(&self) -> &[(f64, f64)] {
        &self.native
    }

    /// The grid with every token back on its native coordinate.
    pub fn restored(&self) -> Self {
        Self {
            coords: self.native.clone(),
            native: self.native.clone(),
        }
    }

    pub fn token_count(&self) -> usize {
        self.coords.len()
    }

    /// Tokens reordered so that slot `i` holds token `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            coords: order.iter().map(|&i| self.coords[i]).collect(),
            native: order.iter().map(|&i| self.native[i]).collect(),
        }
    }

    /// Index of the token natively sitting on integer cell `(y, x)`.
    fn find_native_cell(&self, y: usize, x: usize) -> Option<usize> {
        self.native
            .iter()
            .position(|&(cy, cx)| cy == y as f64 && cx == x as f64)
    }
}

/// Row-major coordinates of a `height x width` token grid shifted by `origin`.
pub fn build_grid_positions(
    height_tokens: usize,
    width_tokens: usize,
    origin: (f64, f64),
) -> Result<PositionGrid> {
    contract!(
        height_tokens >= 1 && width_tokens >= 1,
        "grid must be at least 1x1, got {}x{}",
        height_tokens,
        width_tokens
    );
    let mut coords = Vec::with_capacity(height_tokens * width_tokens);
    for y in 0..height_tokens {
        for x in 0..width_tokens {
            coords.push((origin.0 + y as f64, origin.1 + x as f64));
        }
    }
    PositionGrid::from_coords(coords)
}

/// Cosine/sine table for every token and rotation pair.
#[derive(Clone, Debug)]
pub struct RopeTable {
    head_dim: usize,
    base: f64,
    rotation: PairRotation,
}

impl RopeTable {
    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn token_count(&self) -> usize {
        self.rotation.rows()
    }

    /// Pairs per axis; `y` owns pairs `0..axis_pairs`, `x` the rest.
    pub fn axis_pairs(&self) -> usize {
        self.head_dim / 4
    }

    pub fn cos(&self, token: usize, pair: usize) -> f32 {
        self.rotation.cos[token * self.rotation.pairs + pair]
    }

    pub fn sin(&self, token: usize, pair: usize) -> f32 {
        self.rotation.sin[token * self.rotation.pairs + pair]
    }

    pub fn rotation(&self) -> &PairRotation {
        &self.rotation
    }

    /// Stacks tables row-wise (for batched sequences), appending `extra_identity`
    /// unrotated rows after each table.
    pub fn stack(tables: &[&RopeTable], extra_identity: usize) -> Result<PairRotation> {
        let first = tables
            .first()
            .ok_or_else(|| crate::Error::Contract("no tables to stack".into()))?;
        let pairs = first.rotation.pairs;
        let mut cos = Vec::new();
        let mut sin = Vec::new();
        for t in tables {
            shape_check!(
                t.rotation.pairs == pairs,
                "stacked tables differ in head width"
            );
            cos.extend_from_slice(&t.rotation.cos);
            sin.extend_from_slice(&t.rotation.sin);
            cos.extend(std::iter::repeat_n(1.0, extra_identity * pairs));
            sin.extend(std::iter::repeat_n(0.0, extra_identity * pairs));
        }
        Ok(PairRotation {
            pairs,
            cos: cos.into(),
            sin: sin.into(),
        })
    }
}

/// Builds the rotation table for `grid`.
pub fn rope_tables(grid: &PositionGrid, head_dim: usize, base: f64) -> Result<RopeTable> {
    contract!(
        head_dim >= 4 && head_dim.is_multiple_of(4),
        "head_dim {} must be a positive multiple of 4",
        head_dim
    );
    contract!(base > 0.0 && base.is_finite(), "rope base must be positive");
    let d = head_dim / 4;
    let pairs = 2 * d;
    let inv_freq: Vec<f64> = (0..d).map(|i| base.powf(-(i as f64) / d as f64)).collect();
    let mut cos = Vec::with_capacity(grid.token_count() * pairs);
    let mut sin = Vec::with_capacity(grid.token_count() * pairs);
    for &(y, x) in grid.coords() {
        for coord in [y, x] {
            for f in &inv_freq {
                let angle = coord * f;
                cos.push(angle.cos() as f32);
                sin.push(angle.sin() as f32);
            }
        }
    }
    Ok(RopeTable {
        head_dim,
        base,
        rotation: PairRotation {
            pairs,
            cos: Arc::from(cos),
            sin: Arc::from(sin),
        },
    })
}

/// Rotates every head of every token of `x` (`[tokens, k * head_dim]`).
pub fn apply_rope(x: &Tensor, table: &RopeTable) -> Result<Tensor> {
    shape_check!(
        x.cols() > 0 && x.cols().is_multiple_of(table.head_dim),
        "last dimension {} is not a multiple of head_dim {}",
        x.cols(),
        table.head_dim
    );
    shape_check!(
        x.rows() == table.token_count(),
        "{} tokens but the table covers {}",
        x.rows(),
        table.token_count()
    );
    let mut out = x.clone();
    let c = out.cols();
    table.rotation.apply(out.data_mut(), c, false);
    Ok(out)
}

/// Axis-aligned rectangle of token cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenRect {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

impl TokenRect {
    pub fn new(y: usize, x: usize, h: usize, w: usize) -> Self {
        Self { y, x, h, w }
    }

    pub fn area(&self) -> usize {
        self.h * self.w
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y && y < self.y + self.h && x >= self.x && x < self.x + self.w
    }

    pub fn intersects(&self, o: &TokenRect) -> bool {
        self.y < o.y + o.h && o.y < self.y + self.h && self.x < o.x + o.w && o.x < self.x + self.w
    }

    /// Cells in row-major order.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.y..self.y + self.h).flat_map(move |y| (self.x..self.x + self.w).map(move |x| (y, x)))
    }

    pub fn center(&self) -> (f64, f64) {
        (
            self.y as f64 + self.h as f64 / 2.0,
            self.x as f64 + self.w as f64 / 2.0,
        )
    }
}

/// Affine correspondence sending `source` onto `target` edge-to-edge.
///
/// Cell `(y, x)` of the source lands on the continuous coordinate whose cell
/// centre sits at the same relative position inside the target, so equal
/// sizes give a pure translation and a size mismatch gives fractional
/// coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionMap {
    pub source: TokenRect,
    pub target: TokenRect,
}

impl RegionMap {
    pub fn new(source: TokenRect, target: TokenRect) -> Result<Self> {
        contract!(
            source.area() > 0 && target.area() > 0,
            "region map with empty rectangle"
        );
        Ok(Self { source, target })
    }

    pub fn scale(&self) -> (f64, f64) {
        (
            self.target.h as f64 / self.source.h as f64,
            self.target.w as f64 / self.source.w as f64,
        )
    }

    /// Image of the source cell `(y, x)` (absolute token coordinates).
    pub fn map_cell(&self, y: usize, x: usize) -> (f64, f64) {
        let (sy, sx) = self.scale();
        (
            self.target.y as f64 + (y as f64 - self.source.y as f64 + 0.5) * sy - 0.5,
            self.target.x as f64 + (x as f64 - self.source.x as f64 + 0.5) * sx - 0.5,
        )
    }
}

/// Replaces the coordinates of every token in `map.source` by their image in
/// `map.target`. Tokens are identified by their native integer coordinates,
/// so the result is the same whether `grid` is a full canvas grid or a
/// restructured compact one, and applying the same map twice is a no-op.
pub fn transplant(grid: &PositionGrid, map: &RegionMap) -> Result<PositionGrid> {
    let mut coords = grid.coords.clone();
    if map.source == map.target {
        return Ok(grid.clone());
    }
    let mut hits = Vec::with_capacity(map.source.area());
    for (y, x) in map.source.cells() {
        let idx = grid.find_native_cell(y, x).ok_or_else(|| {
            crate::Error::Contract(format!("source cell ({y}, {x}) is not on the grid"))
        })?;
        hits.push((idx, map.map_cell(y, x)));
    }
    for (idx, c) in hits {
        coords[idx] = c;
    }
    Ok(PositionGrid {
        coords,
        native: grid.native.clone(),
    })
}

/// Applies several maps in order (one per reference slot).
pub fn transplant_all(grid: &PositionGrid, maps: &[RegionMap]) -> Result<PositionGrid> {
    maps.iter().try_fold(grid.clone(), |g, m| transplant(&g, m))
}
