//! Three browser operations over the toy world, none of which need a trained
//! model: the composed canvas with its compact token map, RoPE attention
//! logits under native and transplanted positions, and a copy-paste insert.

use peswap_core::layout::{compose_canvas, crop_tokens, ReferenceItem};
use peswap_core::numkit::rng::RandomStream;
use peswap_core::numkit::Tensor;
use peswap_core::raster::{Raster, Rect};
use peswap_core::rope::{rope_tables, transplant_all, DEFAULT_BASE};
use peswap_core::toyworld::dataset::eval_scene;
use peswap_core::toyworld::eval::copy_paste_baseline;
use peswap_core::toyworld::WorldGeometry;
use peswap_core::Result;
use wasm_bindgen::prelude::*;

const HEAD_DIM: usize = 32;

/// An RGBA image plus per-token values for overlays.
#[wasm_bindgen]
pub struct Frame {
    width: usize,
    height: usize,
    rgba: Vec<u8>,
    tokens: Vec<f32>,
    token_cols: usize,
}

#[wasm_bindgen]
impl Frame {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    /// Row-major per-token values; meaning depends on the operation.
    pub fn tokens(&self) -> Vec<f32> {
        self.tokens.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn token_cols(&self) -> usize {
        self.token_cols
    }
}

fn rgba(r: &Raster) -> Vec<u8> {
    r.bytes()
        .chunks(3)
        .flat_map(|p| [p[0], p[1], p[2], 255])
        .collect()
}

fn frame(r: &Raster, tokens: Vec<f32>, token_cols: usize) -> Frame {
    let (height, width) = r.dims();
    Frame {
        width,
        height,
        rgba: rgba(r),
        tokens,
        token_cols,
    }
}

fn js(e: peswap_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Edit region `(y, x, size)` in background pixels, snapped to the patch grid.
fn edit_region(geom: &WorldGeometry, y: usize, x: usize, size: usize) -> Rect {
    let p = geom.patch;
    let size = (size / p).clamp(1, geom.background / p) * p;
    let max = geom.background - size;
    Rect::new((y / p * p).min(max), (x / p * p).min(max), size, size)
}

/// Composed canvas of a class's scene; token values are the compact index of
/// each canvas token, or -1 for tokens dropped by restructuring.
pub fn layout_frame(class_id: usize, y: usize, x: usize, size: usize) -> Result<Frame> {
    let geom = WorldGeometry::default();
    let layout = geom.layout(edit_region(&geom, y, x, size))?;
    let scene = eval_scene(&geom, class_id, 7)?;
    let composed = compose_canvas(
        &layout,
        &scene.background,
        &ReferenceItem::fill_slots(&scene.references)?,
    )?;
    let n = layout.token_count();
    let (_, map) = crop_tokens(&Tensor::zeros(&[n, 1]), &layout)?;
    let mut idx = vec![-1.0; n];
    for (i, &g) in map.compact_to_grid.iter().enumerate() {
        idx[g] = i as f32;
    }
    Ok(frame(&composed.canvas, idx, layout.token_dims().1))
}

/// Attention logits of one query at the edit-region centre against the same
/// key vector at every canvas token. With `transplanted` the reference slots
/// carry the edit region's coordinates and light up like its neighbourhood.
pub fn rope_frame(
    class_id: usize,
    y: usize,
    x: usize,
    size: usize,
    transplanted: bool,
) -> Result<Frame> {
    let geom = WorldGeometry::default();
    let layout = geom.layout(edit_region(&geom, y, x, size))?;
    let scene = eval_scene(&geom, class_id, 7)?;
    let composed = compose_canvas(
        &layout,
        &scene.background,
        &ReferenceItem::fill_slots(&scene.references)?,
    )?;
    let native = layout.positions();
    let grid = if transplanted {
        transplant_all(&native, &layout.region_maps())?
    } else {
        native.clone()
    };
    let (th, tw) = layout.token_dims();
    let edit = layout.edit_tokens();
    let query = (edit.y + edit.h / 2) * tw + edit.x + edit.w / 2;
    // a smooth query/key pair: low frequencies dominate so the map decays with distance
    let mut rng = RandomStream::new(1, 0);
    let base: Vec<f32> = (0..HEAD_DIM)
        .map(|i| 1.0 + 0.1 * rng.normal() as f32 / (1.0 + i as f32))
        .collect();
    let rows = Tensor::from_fn(&[th * tw, HEAD_DIM], |i| base[i % HEAD_DIM]);
    let rotated =
        peswap_core::rope::apply_rope(&rows, &rope_tables(&grid, HEAD_DIM, DEFAULT_BASE)?)?;
    let q = rotated.row(query);
    let logits = (0..th * tw)
        .map(|j| {
            rotated
                .row(j)
                .iter()
                .zip(q)
                .map(|(a, b)| a * b)
                .sum::<f32>()
        })
        .collect();
    Ok(frame(&composed.canvas, logits, tw))
}

/// Copy-paste insertion of the class's first reference into the background;
/// token values mark edit-region tokens with 1.
pub fn paste_frame(class_id: usize, y: usize, x: usize, size: usize) -> Result<Frame> {
    let geom = WorldGeometry::default();
    let region = edit_region(&geom, y, x, size);
    let scene = eval_scene(&geom, class_id, 7)?;
    let out = copy_paste_baseline(&scene.background, region, &scene.references[0])?;
    let p = geom.patch;
    let cols = geom.background / p;
    let marks = (0..cols * cols)
        .map(|i| region.contains((i / cols) * p, (i % cols) * p) as u8 as f32)
        .collect();
    Ok(frame(&out, marks, cols))
}

#[wasm_bindgen]
pub fn layout_preview(class_id: usize, y: usize, x: usize, size: usize) -> Result<Frame, JsError> {
    layout_frame(class_id, y, x, size).map_err(js)
}

#[wasm_bindgen]
pub fn rope_heatmap(
    class_id: usize,
    y: usize,
    x: usize,
    size: usize,
    transplanted: bool,
) -> Result<Frame, JsError> {
    rope_frame(class_id, y, x, size, transplanted).map_err(js)
}

#[wasm_bindgen]
pub fn copy_paste_preview(
    class_id: usize,
    y: usize,
    x: usize,
    size: usize,
) -> Result<Frame, JsError> {
    paste_frame(class_id, y, x, size).map_err(js)
}
