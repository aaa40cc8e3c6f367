//! Procedural paired-tile generation with controlled spatial misalignment.
//!
//! A seeded world is a scalar texture field (multi-octave value noise plus
//! Gaussian landmark bumps) sampled on a raster. Tiles are square axis-
//! aligned crops rendered through one of two fixed channel transforms, one
//! per view, so that cross-view matching is learnable but not a pixel copy.
//!
//! Pair overlap is measured by footprint IoU. Training pairs are labeled as
//! matches (`y = 1`); a pair is latently noisy (`z = 1`) exactly when its
//! IoU falls in the semi-positive band `(TAU_S, TAU_M]`.

pub mod io;

use serde::{Deserialize, Serialize};

use rand::Rng;

use crate::rng::{stream, Domain};
use crate::tensor::{Tensor, TensorError};

/// Minimum IoU of a well-aligned (clean) pair.
pub const TAU_M: f64 = 0.39;
/// Minimum IoU of a semi-positive (noisy) pair.
pub const TAU_S: f64 = 0.14;

/// Parameters of the procedural world texture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub seed: u64,
    /// Side length in world units.
    pub size: f64,
    /// Raster resolution per side.
    pub raster: usize,
    pub octaves: usize,
    /// Lattice cells of the coarsest octave.
    pub base_cells: usize,
    pub landmarks: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self { seed: 0, size: 12.0, raster: 512, octaves: 5, base_cells: 6, landmarks: 40 }
    }
}

/// Seeded scalar field over `[0, size]^2`, normalized to `[0, 1]`.
#[derive(Debug, Clone)]
pub struct WorldMap {
    pub config: WorldConfig,
    field: Vec<f64>,
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

impl WorldMap {
    pub fn generate(config: WorldConfig) -> Self {
        let r = config.raster;
        let mut field = vec![0.0f64; r * r];

        for octave in 0..config.octaves {
            let cells = config.base_cells << octave;
            let amplitude = 0.5f64.powi(octave as i32);
            let mut rng = stream(config.seed, Domain::WorldNoise, octave as u64);
            let lat = cells + 1;
            let lattice: Vec<f64> = (0..lat * lat).map(|_| rng.random::<f64>()).collect();
            for gy in 0..r {
                let py = gy as f64 / (r - 1) as f64 * cells as f64;
                let y0 = (py as usize).min(cells - 1);
                let ty = smoothstep(py - y0 as f64);
                for gx in 0..r {
                    let px = gx as f64 / (r - 1) as f64 * cells as f64;
                    let x0 = (px as usize).min(cells - 1);
                    let tx = smoothstep(px - x0 as f64);
                    let v00 = lattice[y0 * lat + x0];
                    let v01 = lattice[y0 * lat + x0 + 1];
                    let v10 = lattice[(y0 + 1) * lat + x0];
                    let v11 = lattice[(y0 + 1) * lat + x0 + 1];
                    let v = v00 * (1.0 - tx) * (1.0 - ty)
                        + v01 * tx * (1.0 - ty)
                        + v10 * (1.0 - tx) * ty
                        + v11 * tx * ty;
                    field[gy * r + gx] += amplitude * v;
                }
            }
        }

        let mut rng = stream(config.seed, Domain::Landmarks, 0);
        for _ in 0..config.landmarks {
            let cx = rng.random::<f64>();
            let cy = rng.random::<f64>();
            let sigma = rng.random_range(0.015..0.05);
            let magnitude = rng.random_range(0.5..1.2);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let amp = sign * magnitude;
            let reach = (3.0 * sigma * (r - 1) as f64).ceil() as isize;
            let icx = (cx * (r - 1) as f64).round() as isize;
            let icy = (cy * (r - 1) as f64).round() as isize;
            for gy in (icy - reach).max(0)..=(icy + reach).min(r as isize - 1) {
                for gx in (icx - reach).max(0)..=(icx + reach).min(r as isize - 1) {
                    let dx = gx as f64 / (r - 1) as f64 - cx;
                    let dy = gy as f64 / (r - 1) as f64 - cy;
                    let d2 = dx * dx + dy * dy;
                    field[gy as usize * r + gx as usize] +=
                        amp * (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }

        let lo = field.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = field.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = (hi - lo).max(1e-12);
        for v in &mut field {
            *v = (*v - lo) / span;
        }
        Self { config, field }
    }

    /// Bilinear sample at world coordinates, clamped to the border.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let r = self.config.raster;
        let gx = (x / self.config.size).clamp(0.0, 1.0) * (r - 1) as f64;
        let gy = (y / self.config.size).clamp(0.0, 1.0) * (r - 1) as f64;
        let x0 = (gx as usize).min(r - 2);
        let y0 = (gy as usize).min(r - 2);
        let tx = gx - x0 as f64;
        let ty = gy - y0 as f64;
        let v00 = self.field[y0 * r + x0];
        let v01 = self.field[y0 * r + x0 + 1];
        let v10 = self.field[(y0 + 1) * r + x0];
        let v11 = self.field[(y0 + 1) * r + x0 + 1];
        v00 * (1.0 - tx) * (1.0 - ty) + v01 * tx * (1.0 - ty) + v10 * (1.0 - tx) * ty + v11 * tx * ty
    }

    pub fn field(&self) -> &[f64] {
        &self.field
    }
}

/// Which channel transform a tile was rendered with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Query,
    Reference,
}

/// Square axis-aligned crop of the world, rendered to `[3, res, res]`.
#[derive(Debug, Clone)]
pub struct Tile {
    pub center: (f64, f64),
    pub extent: f64,
    pub view: View,
    pub pixels: Tensor,
}

/// Per-view channel transforms; both are smooth functions of the underlying
/// field so the views stay mutually predictable.
fn view_channels(f: f64, view: View) -> [f64; 3] {
    match view {
        View::Query => [f, f * f, smoothstep(f)],
        View::Reference => [1.0 - f, f.sqrt(), 4.0 * f * (1.0 - f)],
    }
}

/// Renders a tile. Pixel (v, u) samples the world at the center of the
/// corresponding footprint cell.
pub fn render_tile(
    world: &WorldMap,
    center: (f64, f64),
    extent: f64,
    resolution: usize,
    view: View,
) -> Result<Tile, TensorError> {
    if extent <= 0.0 {
        return Err(TensorError::Domain(format!("tile extent must be positive, got {extent}")));
    }
    let res = resolution;
    let mut data = vec![0.0f64; 3 * res * res];
    let step = extent / res as f64;
    let x0 = center.0 - extent / 2.0 + step / 2.0;
    let y0 = center.1 - extent / 2.0 + step / 2.0;
    for v in 0..res {
        for u in 0..res {
            let f = world.sample(x0 + u as f64 * step, y0 + v as f64 * step);
            let ch = view_channels(f, view);
            for (c, &val) in ch.iter().enumerate() {
                data[c * res * res + v * res + u] = val;
            }
        }
    }
    Ok(Tile { center, extent, view, pixels: Tensor::new(vec![3, res, res], data)? })
}

/// IoU of two square axis-aligned footprints.
pub fn compute_iou(a: &Tile, b: &Tile) -> Result<f64, TensorError> {
    iou_squares(a.center, a.extent, b.center, b.extent)
}

/// IoU from raw centers and extents.
pub fn iou_squares(
    ca: (f64, f64),
    ea: f64,
    cb: (f64, f64),
    eb: f64,
) -> Result<f64, TensorError> {
    if ea <= 0.0 || eb <= 0.0 {
        return Err(TensorError::Domain("footprint extent must be positive".into()));
    }
    let overlap = |c1: f64, e1: f64, c2: f64, e2: f64| {
        let lo = (c1 - e1 / 2.0).max(c2 - e2 / 2.0);
        let hi = (c1 + e1 / 2.0).min(c2 + e2 / 2.0);
        (hi - lo).max(0.0)
    };
    let wx = overlap(ca.0, ea, cb.0, eb);
    let wy = overlap(ca.1, ea, cb.1, eb);
    let inter = wx * wy;
    let union = ea * ea + eb * eb - inter;
    Ok(inter / union)
}

/// Absolute offsets `(dx, dy)` that place two equal squares of the given
/// extent at exactly the target IoU. `axis_ratio` in `[0, 1]` splits the
/// misalignment between the axes: 1 puts it all on x, 0 all on y.
///
/// With per-axis overlap fractions `px = 1 - dx/extent` (likewise `py`),
/// `IoU = px*py / (2 - px*py)`; the target fixes `p = px*py = 2t/(1+t)` and
/// the ratio picks `px = p^r`, `py = p^(1-r)`.
pub fn offset_for_iou(
    target_iou: f64,
    extent: f64,
    axis_ratio: f64,
) -> Result<(f64, f64), TensorError> {
    if !(target_iou > 0.0 && target_iou <= 1.0) {
        return Err(TensorError::Domain(format!(
            "target IoU must be in (0, 1], got {target_iou}"
        )));
    }
    if extent <= 0.0 {
        return Err(TensorError::Domain("extent must be positive".into()));
    }
    if !(0.0..=1.0).contains(&axis_ratio) {
        return Err(TensorError::Domain(format!("axis ratio must be in [0,1], got {axis_ratio}")));
    }
    let p = 2.0 * target_iou / (1.0 + target_iou);
    let px = p.powf(axis_ratio);
    let py = p.powf(1.0 - axis_ratio);
    Ok(((1.0 - px) * extent, (1.0 - py) * extent))
}

/// One training pair: the annotation always claims a match (`y = 1`), the
/// latent flag `z` records whether it is actually semi-positive.
#[derive(Debug, Clone)]
pub struct PairRecord {
    pub id: usize,
    pub query: Tile,
    pub reference: Tile,
    pub iou: f64,
    pub y: u8,
    pub z: u8,
    pub true_offset: (f64, f64),
}

/// Tile geometry of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TileSpec {
    pub resolution: usize,
    pub extent: f64,
}

impl Default for TileSpec {
    fn default() -> Self {
        Self { resolution: 32, extent: 1.0 }
    }
}

/// Generates `n_pairs` records over the whole world. Exactly
/// `round(n_pairs * noise_ratio)` of them are semi-positive with IoU uniform
/// over `(TAU_S, TAU_M]`; the rest are clean with IoU uniform over
/// `(TAU_M, 1]`. Footprints always stay inside the world.
pub fn make_dataset(
    world: &WorldMap,
    n_pairs: usize,
    noise_ratio: f64,
    seed: u64,
    tile: TileSpec,
) -> Result<Vec<PairRecord>, TensorError> {
    if !(0.0..=1.0).contains(&noise_ratio) {
        return Err(TensorError::Domain(format!(
            "noise ratio must be in [0,1], got {noise_ratio}"
        )));
    }
    let size = world.config.size;
    if size < 3.0 * tile.extent {
        return Err(TensorError::Domain(format!(
            "world of size {size} too small for tile extent {}",
            tile.extent
        )));
    }
    let n_noisy = (n_pairs as f64 * noise_ratio).round() as usize;
    let mut flags = vec![false; n_pairs];
    for f in flags.iter_mut().take(n_noisy) {
        *f = true;
    }
    // deterministic placement of the noisy records
    {
        use rand::seq::SliceRandom;
        flags.shuffle(&mut stream(seed, Domain::Shuffle, 0));
    }

    let half = tile.extent / 2.0;
    let lo = half;
    let hi = size - half;
    let mut records = Vec::with_capacity(n_pairs);
    for (id, &noisy) in flags.iter().enumerate() {
        let mut rng = stream(seed, Domain::Pair, id as u64);
        let u: f64 = rng.random();
        // clean targets keep a small margin above TAU_M so float rounding
        // cannot push a computed IoU across the band boundary
        let target = if noisy {
            TAU_M - u * (TAU_M - TAU_S)
        } else {
            1.0 - u * (1.0 - TAU_M - 1e-9)
        };
        let axis_ratio: f64 = rng.random();
        let (dx, dy) = offset_for_iou(target, tile.extent, axis_ratio)?;
        let sx = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let sy = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let offset = (dx * sx, dy * sy);
        let (qc, rc) = loop {
            let qc = (rng.random_range(lo..hi), rng.random_range(lo..hi));
            let rc = (qc.0 + offset.0, qc.1 + offset.1);
            if rc.0 >= lo && rc.0 <= hi && rc.1 >= lo && rc.1 <= hi {
                break (qc, rc);
            }
        };
        let query = render_tile(world, qc, tile.extent, tile.resolution, View::Query)?;
        let reference = render_tile(world, rc, tile.extent, tile.resolution, View::Reference)?;
        let iou = compute_iou(&query, &reference)?;
        debug_assert!((iou - target).abs() < 1e-6);
        let z = u8::from(!(iou > TAU_M));
        debug_assert_eq!(z == 1, noisy);
        records.push(PairRecord { id, query, reference, iou, y: 1, z, true_offset: offset });
    }
    Ok(records)
}

/// Axis-aligned rectangle in world units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn contains_footprint(&self, center: (f64, f64), extent: f64) -> bool {
        let h = extent / 2.0;
        center.0 - h >= self.x0
            && center.0 + h <= self.x1
            && center.1 - h >= self.y0
            && center.1 + h <= self.y1
    }

    pub fn intersects_footprint(&self, center: (f64, f64), extent: f64) -> bool {
        let h = extent / 2.0;
        center.0 + h > self.x0
            && center.0 - h < self.x1
            && center.1 + h > self.y0
            && center.1 - h < self.y1
    }
}

/// Held-out evaluation query with its best gallery tile precomputed from
/// footprint geometry.
#[derive(Debug, Clone)]
pub struct TestQuery {
    pub id: usize,
    pub tile: Tile,
    pub gt_gallery_id: usize,
}

/// Train/test split plus the reference gallery grid.
#[derive(Debug)]
pub struct SplitDataset {
    pub train: Vec<PairRecord>,
    pub test_queries: Vec<TestQuery>,
    pub gallery: Vec<Tile>,
}

fn grid_centers(lo: f64, hi: f64, stride: f64) -> Vec<f64> {
    let mut out = vec![lo];
    let mut x = lo + stride;
    while x < hi - 1e-9 {
        out.push(x);
        x += stride;
    }
    if hi - out[out.len() - 1] > 1e-9 {
        out.push(hi);
    }
    out
}

/// Splits generated records by the holdout region: training pairs must not
/// touch it, test queries must lie entirely inside it. The gallery is a
/// regular grid of reference tiles at stride `extent / 2` covering the
/// holdout, which guarantees every interior query a gallery tile above the
/// clean-IoU threshold.
pub fn split_train_test(
    world: &WorldMap,
    records: Vec<PairRecord>,
    holdout: Rect,
) -> Result<SplitDataset, TensorError> {
    if !(holdout.x0 < holdout.x1 && holdout.y0 < holdout.y1) {
        return Err(TensorError::Domain("holdout rectangle is empty".into()));
    }
    let size = world.config.size;
    if holdout.x0 < 0.0 || holdout.y0 < 0.0 || holdout.x1 > size || holdout.y1 > size {
        return Err(TensorError::Domain("holdout rectangle extends outside the world".into()));
    }
    let spec = records
        .first()
        .map(|r| TileSpec { resolution: r.query.pixels.shape()[1], extent: r.query.extent })
        .ok_or_else(|| TensorError::Domain("no records to split".into()))?;
    let extent = spec.extent;

    let mut train = Vec::new();
    let mut test_source = Vec::new();
    for rec in records {
        let q_in = holdout.contains_footprint(rec.query.center, extent);
        let q_touch = holdout.intersects_footprint(rec.query.center, extent);
        let r_touch = holdout.intersects_footprint(rec.reference.center, extent);
        if !q_touch && !r_touch {
            train.push(rec);
        } else if q_in {
            test_source.push(rec);
        }
        // pairs straddling the boundary are dropped
    }
    if train.is_empty() {
        return Err(TensorError::Domain("empty split: no training pairs outside holdout".into()));
    }
    if test_source.is_empty() {
        return Err(TensorError::Domain("empty split: no test queries inside holdout".into()));
    }

    let half = extent / 2.0;
    let stride = extent / 2.0;
    let xs = grid_centers(holdout.x0 + half, holdout.x1 - half, stride);
    let ys = grid_centers(holdout.y0 + half, holdout.y1 - half, stride);
    let mut gallery = Vec::with_capacity(xs.len() * ys.len());
    for &gy in &ys {
        for &gx in &xs {
            gallery.push(render_tile(world, (gx, gy), extent, spec.resolution, View::Reference)?);
        }
    }

    let mut test_queries = Vec::with_capacity(test_source.len());
    for (id, rec) in test_source.into_iter().enumerate() {
        let mut best = (0usize, -1.0f64);
        for (gid, tile) in gallery.iter().enumerate() {
            let iou = compute_iou(&rec.query, tile)?;
            if iou > best.1 {
                best = (gid, iou);
            }
        }
        test_queries.push(TestQuery { id, tile: rec.query, gt_gallery_id: best.0 });
    }
    Ok(SplitDataset { train, test_queries, gallery })
}
