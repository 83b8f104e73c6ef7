//! Corner-centred canvas layout and token restructuring.
//!
//! Four reference slots sit in the canvas corners and the background sits in
//! the middle, so an edit region near the background centre is roughly
//! equidistant from every reference. Only the five slots carry information;
//! [`crop_tokens`] gathers their tokens into a compact sequence and
//! [`restructure_positions`] carries each token's original canvas coordinate
//! along with it.

use serde::{Deserialize, Serialize};

use crate::error::{contract, shape_check, Result};
use crate::numkit::Tensor;
use crate::raster::{fit_within, Mask, Raster, Rect};
use crate::rope::{build_grid_positions, PositionGrid, RegionMap, TokenRect};

/// Slot order used everywhere: top-left, top-right, bottom-left, bottom-right.
pub const CORNERS: [&str; 4] = ["TL", "TR", "BL", "BR"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CanvasLayout {
    /// `(height, width)` in pixels.
    pub canvas_px: (usize, usize),
    pub patch: usize,
    /// TL, TR, BL, BR.
    pub corner_slots: [Rect; 4],
    pub center_slot: Rect,
    /// Edit region in canvas coordinates; always inside `center_slot`.
    pub edit_region_px: Rect,
}

/// Places a `background_px` background in the middle of a canvas with a
/// `ref_px` slot in each corner. `edit_region` is relative to the background.
pub fn make_layout(
    background_px: (usize, usize),
    ref_px: (usize, usize),
    edit_region: Rect,
    patch: usize,
) -> Result<CanvasLayout> {
    contract!(patch >= 1, "patch must be positive");
    let (bh, bw) = background_px;
    let (rh, rw) = ref_px;
    for (name, v) in [
        ("background height", bh),
        ("background width", bw),
        ("reference height", rh),
        ("reference width", rw),
    ] {
        contract!(
            v > 0 && v % patch == 0,
            "{} {} is not a positive multiple of patch {}",
            name,
            v,
            patch
        );
    }
    contract!(edit_region.area() > 0, "edit region is empty");
    contract!(
        edit_region.is_aligned(patch),
        "edit region {:?} is not aligned to patch {}",
        edit_region,
        patch
    );
    contract!(
        Rect::new(0, 0, bh, bw).contains_rect(&edit_region),
        "edit region {:?} leaves the {}x{} background",
        edit_region,
        bh,
        bw
    );
    let (ch, cw) = (bh + 2 * rh, bw + 2 * rw);
    let corner_slots = [
        Rect::new(0, 0, rh, rw),
        Rect::new(0, cw - rw, rh, rw),
        Rect::new(ch - rh, 0, rh, rw),
        Rect::new(ch - rh, cw - rw, rh, rw),
    ];
    let center_slot = Rect::new(rh, rw, bh, bw);
    Ok(CanvasLayout {
        canvas_px: (ch, cw),
        patch,
        corner_slots,
        center_slot,
        edit_region_px: edit_region.offset(rh, rw),
    })
}

impl CanvasLayout {
    pub fn token_dims(&self) -> (usize, usize) {
        (self.canvas_px.0 / self.patch, self.canvas_px.1 / self.patch)
    }

    pub fn token_count(&self) -> usize {
        let (h, w) = self.token_dims();
        h * w
    }

    pub fn corner_tokens(&self) -> [TokenRect; 4] {
        self.corner_slots.map(|r| {
            r.to_tokens(self.patch)
                .expect("layout rectangles are patch aligned")
        })
    }

    pub fn center_tokens(&self) -> TokenRect {
        self.center_slot
            .to_tokens(self.patch)
            .expect("layout rectangles are patch aligned")
    }

    pub fn edit_tokens(&self) -> TokenRect {
        self.edit_region_px
            .to_tokens(self.patch)
            .expect("layout rectangles are patch aligned")
    }

    /// The five informative regions in crop order: TL, TR, BL, BR, centre.
    pub fn regions(&self) -> Vec<TokenRect> {
        let mut r = self.corner_tokens().to_vec();
        r.push(self.center_tokens());
        r
    }

    pub fn compact_len(&self) -> usize {
        self.regions().iter().map(TokenRect::area).sum()
    }

    /// Native canvas coordinates of every token, row-major.
    pub fn positions(&self) -> PositionGrid {
        let (h, w) = self.token_dims();
        build_grid_positions(h, w, (0.0, 0.0)).expect("canvas has at least one token")
    }

    /// One map per corner slot, each sending the slot onto the edit region.
    pub fn region_maps(&self) -> Vec<RegionMap> {
        let edit = self.edit_tokens();
        self.corner_tokens()
            .iter()
            .map(|&slot| RegionMap::new(slot, edit).expect("non-empty rectangles"))
            .collect()
    }

    pub fn edit_mask(&self) -> Mask {
        Mask::from_rect(self.canvas_px.0, self.canvas_px.1, &self.edit_region_px)
    }

    /// Euclidean distances (in token cells) from the edit-region centre to each
    /// corner-slot centre.
    pub fn slot_distances(&self) -> [f64; 4] {
        let (ey, ex) = self.edit_tokens().center();
        self.corner_tokens().map(|s| {
            let (sy, sx) = s.center();
            ((sy - ey).powi(2) + (sx - ex).powi(2)).sqrt()
        })
    }
}

/// A reference image and the segmentation mask isolating its object.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceItem {
    pub image: Raster,
    pub seg_mask: Mask,
}

impl ReferenceItem {
    pub fn new(image: Raster, seg_mask: Mask) -> Result<Self> {
        contract!(
            image.dims() == seg_mask.dims(),
            "reference image {:?} and mask {:?} differ in size",
            image.dims(),
            seg_mask.dims()
        );
        contract!(!seg_mask.is_empty(), "reference segmentation mask is empty");
        Ok(Self { image, seg_mask })
    }

    /// Cycles 1-4 references into the four corner slots.
    pub fn fill_slots(refs: &[ReferenceItem]) -> Result<[ReferenceItem; 4]> {
        contract!(
            !refs.is_empty() && refs.len() <= 4,
            "expected 1-4 references, got {}",
            refs.len()
        );
        Ok(std::array::from_fn(|i| refs[i % refs.len()].clone()))
    }

    /// Crops to the mask's bounding box and fits the crop, aspect preserved,
    /// into `slot_h x slot_w` with symmetric zero padding.
    pub fn fit_to_slot(&self, slot_h: usize, slot_w: usize) -> Result<(Raster, Mask)> {
        let bbox = self
            .seg_mask
            .bbox()
            .ok_or_else(|| crate::Error::Contract("reference segmentation mask is empty".into()))?;
        let img = self.image.crop(&bbox)?;
        let mask = self.seg_mask.crop(&bbox)?;
        let (nh, nw) = fit_within(bbox.h, bbox.w, slot_h, slot_w);
        let (img, mask) = (img.resize(nh, nw), mask.resize(nh, nw));
        let (py, px) = ((slot_h - nh) / 2, (slot_w - nw) / 2);
        let mut out = Raster::new(slot_h, slot_w);
        out.paste(&img, py, px)?;
        let mut out_mask = Mask::new(slot_h, slot_w);
        out_mask.paste(&mask, py, px)?;
        Ok((out, out_mask))
    }
}

/// Result of [`compose_canvas`].
#[derive(Clone, Debug, PartialEq)]
pub struct ComposedCanvas {
    pub canvas: Raster,
    /// Set only over the edit region; all-black over the reference slots.
    pub edit_mask: Mask,
    /// Reference-slot pixels outside the fitted segmentation masks.
    pub ref_background: Mask,
}

pub fn compose_canvas(
    layout: &CanvasLayout,
    background: &Raster,
    refs: &[ReferenceItem],
) -> Result<ComposedCanvas> {
    contract!(
        refs.len() == 4,
        "corner layout needs exactly 4 references, got {}",
        refs.len()
    );
    let c = &layout.center_slot;
    contract!(
        background.dims() == (c.h, c.w),
        "background is {:?} but the centre slot is {}x{}",
        background.dims(),
        c.h,
        c.w
    );
    let (ch, cw) = layout.canvas_px;
    let mut canvas = Raster::new(ch, cw);
    let mut ref_background = Mask::new(ch, cw);
    for (slot, item) in layout.corner_slots.iter().zip(refs) {
        let (img, mask) = item.fit_to_slot(slot.h, slot.w)?;
        canvas.paste(&img, slot.y, slot.x)?;
        ref_background.paste(&mask.inverted(), slot.y, slot.x)?;
    }
    canvas.paste(background, c.y, c.x)?;
    Ok(ComposedCanvas {
        canvas,
        edit_mask: layout.edit_mask(),
        ref_background,
    })
}

/// For each compact slot, the row-major index of the canvas token it came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexMap {
    pub compact_to_grid: Vec<usize>,
    pub grid_len: usize,
}

impl IndexMap {
    pub fn len(&self) -> usize {
        self.compact_to_grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.compact_to_grid.is_empty()
    }

    /// Builds the map for `regions` of a grid `grid_width` tokens wide.
    pub fn from_regions(regions: &[TokenRect], grid_dims: (usize, usize)) -> Result<Self> {
        let (gh, gw) = grid_dims;
        let mut seen = vec![false; gh * gw];
        let mut compact_to_grid = Vec::new();
        for r in regions {
            contract!(
                r.y + r.h <= gh && r.x + r.w <= gw,
                "region {:?} overflows the {}x{} grid",
                r,
                gh,
                gw
            );
            for (y, x) in r.cells() {
                let i = y * gw + x;
                contract!(!seen[i], "regions overlap at token ({}, {})", y, x);
                seen[i] = true;
                compact_to_grid.push(i);
            }
        }
        Ok(Self {
            compact_to_grid,
            grid_len: gh * gw,
        })
    }

    pub fn gather(&self, grid_tensor: &Tensor) -> Result<Tensor> {
        shape_check!(
            grid_tensor.rows() == self.grid_len,
            "tensor has {} tokens, the grid has {}",
            grid_tensor.rows(),
            self.grid_len
        );
        grid_tensor.gather_rows(&self.compact_to_grid)
    }

    /// Inverse of [`IndexMap::gather`] on the selected tokens; other tokens are `fill`.
    pub fn scatter(&self, compact: &Tensor, fill: &Tensor) -> Result<Tensor> {
        shape_check!(
            compact.rows() == self.len(),
            "{} rows for a map of {}",
            compact.rows(),
            self.len()
        );
        shape_check!(
            fill.rows() == self.grid_len && fill.cols() == compact.cols(),
            "fill tensor {:?} does not match the grid",
            fill.shape()
        );
        let mut out = fill.clone();
        for (i, &g) in self.compact_to_grid.iter().enumerate() {
            out.row_mut(g).copy_from_slice(compact.row(i));
        }
        Ok(out)
    }
}

/// Gathers the tokens of `regions` (in order, each row-major) from a
/// canvas-sized token tensor.
pub fn crop_regions(
    grid_tensor: &Tensor,
    grid_dims: (usize, usize),
    regions: &[TokenRect],
) -> Result<(Tensor, IndexMap)> {
    let map = IndexMap::from_regions(regions, grid_dims)?;
    Ok((map.gather(grid_tensor)?, map))
}

/// Crops the five layout regions (TL, TR, BL, BR, centre) into a compact sequence.
pub fn crop_tokens(grid_tensor: &Tensor, layout: &CanvasLayout) -> Result<(Tensor, IndexMap)> {
    shape_check!(
        grid_tensor.rows() == layout.token_count(),
        "tensor has {} tokens but the canvas has {}",
        grid_tensor.rows(),
        layout.token_count()
    );
    crop_regions(grid_tensor, layout.token_dims(), &layout.regions())
}

/// Compact positions: slot `i` carries the canvas coordinates of its source token.
pub fn restructure_positions(grid: &PositionGrid, map: &IndexMap) -> Result<PositionGrid> {
    contract!(
        grid.token_count() == map.grid_len,
        "grid has {} tokens, map expects {}",
        grid.token_count(),
        map.grid_len
    );
    Ok(grid.permuted(&map.compact_to_grid))
}
