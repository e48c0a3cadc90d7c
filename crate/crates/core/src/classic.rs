//! Non-learned baselines: ZNCC matching on the sweep spheres with
//! winner-take-all or semi-global aggregation, and a rectify-and-stitch
//! pipeline built on pinhole block matching.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::geometry::{FisheyeCamera, Mat3, Projection, Rig, SphericalCoord, SweepGrid, Vec3};
use crate::par;
use crate::raster::Raster;
use crate::sweeping::{build_lookup, warp_image, SphericalVolume};

/// Patch variance below which ZNCC is undefined.
pub const ZNCC_EPS: f64 = 1e-8;

/// Matching costs, lower is better, `(H, W, D)` row-major with a validity
/// mask. `ladder[k]` is the sphere index of plane `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostVolume {
    pub dims: [usize; 3],
    pub data: Vec<f32>,
    pub mask: Vec<bool>,
    pub ladder: Vec<usize>,
}

impl CostVolume {
    #[inline]
    pub fn at(&self, row: usize, col: usize, k: usize) -> f32 {
        self.data[(row * self.dims[1] + col) * self.dims[2] + k]
    }

    #[inline]
    pub fn valid(&self, row: usize, col: usize, k: usize) -> bool {
        self.mask[(row * self.dims[1] + col) * self.dims[2] + k]
    }
}

/// Moments of a co-registered patch pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchStats {
    /// positions valid in both planes
    pub count: usize,
    pub std_a: f64,
    pub std_b: f64,
    /// `None` when either variance is below [`ZNCC_EPS`]
    pub zncc: Option<f32>,
}

/// Patch statistics of two co-registered planes over `(2 radius + 1)^2`
/// windows.
///
/// Rows are truncated at the top and bottom; columns wrap when `wrap` is
/// set and are truncated otherwise. Only positions valid in both planes
/// take part, a patch needs at least half of its full size, and the
/// center must be valid; otherwise the cell is `None`.
pub fn patch_stats(
    a: &[f32],
    b: &[f32],
    valid: &[bool],
    rows: usize,
    cols: usize,
    radius: usize,
    wrap: bool,
) -> Vec<Option<PatchStats>> {
    let full = (2 * radius + 1) * (2 * radius + 1);
    let r = radius as isize;
    let mut out = vec![None; rows * cols];
    par::for_each_chunk_mut(&mut out, cols, |row, line| {
        for (col, o) in line.iter_mut().enumerate() {
            if !valid[row * cols + col] {
                continue;
            }
            let (mut n, mut sa, mut sb, mut saa, mut sbb, mut sab) = (0usize, 0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
            for dr in -r..=r {
                let rr = row as isize + dr;
                if rr < 0 || rr >= rows as isize {
                    continue;
                }
                for dc in -r..=r {
                    let mut cc = col as isize + dc;
                    if wrap {
                        cc = cc.rem_euclid(cols as isize);
                    } else if cc < 0 || cc >= cols as isize {
                        continue;
                    }
                    let i = rr as usize * cols + cc as usize;
                    if !valid[i] {
                        continue;
                    }
                    let (x, y) = (a[i] as f64, b[i] as f64);
                    n += 1;
                    sa += x;
                    sb += y;
                    saa += x * x;
                    sbb += y * y;
                    sab += x * y;
                }
            }
            if 2 * n < full {
                continue;
            }
            let nf = n as f64;
            let va = (saa / nf - (sa / nf).powi(2)).max(0.0);
            let vb = (sbb / nf - (sb / nf).powi(2)).max(0.0);
            let zncc = (va >= ZNCC_EPS && vb >= ZNCC_EPS).then(|| {
                let cov = sab / nf - sa * sb / (nf * nf);
                (cov / (va * vb).sqrt()).clamp(-1.0, 1.0) as f32
            });
            *o = Some(PatchStats { count: n, std_a: va.sqrt(), std_b: vb.sqrt(), zncc });
        }
    });
    out
}

/// ZNCC per cell under the rules of [`patch_stats`]; `None` where undefined.
pub fn zncc_plane(
    a: &[f32],
    b: &[f32],
    valid: &[bool],
    rows: usize,
    cols: usize,
    radius: usize,
    wrap: bool,
) -> Vec<Option<f32>> {
    patch_stats(a, b, valid, rows, cols, radius, wrap).into_iter().map(|s| s.and_then(|s| s.zncc)).collect()
}

fn plane(v: &SphericalVolume, k: usize) -> (Vec<f32>, Vec<bool>) {
    let [h, w, _] = v.dims;
    let mut vals = Vec::with_capacity(h * w);
    let mut mask = Vec::with_capacity(h * w);
    for row in 0..h {
        for col in 0..w {
            vals.push(v.at(row, col, k, 0));
            mask.push(v.valid(row, col, k));
        }
    }
    (vals, mask)
}

/// `(1 - ZNCC) / 2` between two warped single-channel volumes with
/// `patch x patch` windows.
pub fn zncc_cost(a: &SphericalVolume, b: &SphericalVolume, patch: usize, ladder: &[usize]) -> Result<CostVolume> {
    if a.dims != b.dims || a.channels != 1 || b.channels != 1 {
        return Err(shape_err!("zncc_cost on {:?}x{} and {:?}x{}", a.dims, a.channels, b.dims, b.channels));
    }
    if patch % 2 == 0 {
        return Err(Error::InvalidInput(format!("patch size {patch} must be odd")));
    }
    if ladder.len() != a.dims[2] {
        return Err(shape_err!("{} ladder entries for {} planes", ladder.len(), a.dims[2]));
    }
    let [h, w, d] = a.dims;
    let mut data = vec![0.0f32; h * w * d];
    let mut mask = vec![false; h * w * d];
    for k in 0..d {
        let (pa, ma) = plane(a, k);
        let (pb, mb) = plane(b, k);
        let both: Vec<bool> = ma.iter().zip(&mb).map(|(x, y)| *x && *y).collect();
        for (cell, z) in zncc_plane(&pa, &pb, &both, h, w, patch / 2, true).into_iter().enumerate() {
            if let Some(z) = z {
                data[cell * d + k] = (1.0 - z) / 2.0;
                mask[cell * d + k] = true;
            }
        }
    }
    Ok(CostVolume { dims: a.dims, data, mask, ladder: ladder.to_vec() })
}

/// Mean of the valid pairwise costs; cells without any valid pair are
/// invalid.
pub fn multiview_cost(volumes: &[CostVolume]) -> Result<CostVolume> {
    let first = volumes.first().ok_or_else(|| shape_err!("no cost volumes"))?;
    for v in volumes {
        if v.dims != first.dims || v.ladder != first.ladder {
            return Err(shape_err!("cost volumes {:?} and {:?} differ", v.dims, first.dims));
        }
    }
    let len = first.data.len();
    let mut data = vec![0.0f32; len];
    let mut mask = vec![false; len];
    for i in 0..len {
        let (mut s, mut n) = (0.0f64, 0usize);
        for v in volumes {
            if v.mask[i] {
                s += v.data[i] as f64;
                n += 1;
            }
        }
        if n > 0 {
            data[i] = (s / n as f64) as f32;
            mask[i] = true;
        }
    }
    Ok(CostVolume { dims: first.dims, data, mask, ladder: first.ladder.clone() })
}

/// Per-cell argmin over valid planes (ties to the lower index), as a
/// sphere index; cells with no valid plane are flagged invalid.
pub fn winner_take_all(cost: &CostVolume) -> (Vec<f32>, Vec<bool>) {
    let [h, w, d] = cost.dims;
    let mut idx = vec![0.0f32; h * w];
    let mut valid = vec![false; h * w];
    for cell in 0..h * w {
        let mut best: Option<(usize, f32)> = None;
        for k in 0..d {
            let i = cell * d + k;
            if cost.mask[i] && best.is_none_or(|(_, c)| cost.data[i] < c) {
                best = Some((k, cost.data[i]));
            }
        }
        if let Some((k, _)) = best {
            idx[cell] = cost.ladder[k] as f32;
            valid[cell] = true;
        }
    }
    (idx, valid)
}

/// Semi-global matching parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgmParams {
    /// penalty for a one-plane change between neighbors
    pub p1: f32,
    /// penalty for larger changes
    pub p2: f32,
    /// scan directions as (row step, col step)
    pub paths: Vec<[isize; 2]>,
    /// columns wrap around (equirectangular azimuth)
    pub wrap_theta: bool,
}

impl Default for SgmParams {
    fn default() -> Self {
        SgmParams {
            p1: 0.1,
            p2: 12.0,
            paths: vec![[0, 1], [0, -1], [1, 0], [-1, 0], [1, 1], [1, -1], [-1, 1], [-1, -1]],
            wrap_theta: true,
        }
    }
}

impl SgmParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.p1 >= 0.0 && self.p1 <= self.p2) {
            return Err(Error::Config(format!("SGM penalties need 0 <= p1 <= p2, got {} and {}", self.p1, self.p2)));
        }
        if self.paths.is_empty() || self.paths.iter().any(|p| *p == [0, 0] || p[0].abs() > 1 || p[1].abs() > 1) {
            return Err(Error::Config(format!("bad SGM paths {:?}", self.paths)));
        }
        Ok(())
    }
}

/// Cost substituted for invalid cells during aggregation.
pub const SGM_INVALID_COST: f32 = 1.0;

/// One step of the path recurrence:
/// `L(n) = C(n) + min(Lp(n), Lp(n +- 1) + p1, min Lp + p2) - min Lp`.
fn sgm_step(c: &[f32], prev: &[f32], p1: f32, p2: f32, out: &mut [f32]) {
    let m = prev.iter().copied().fold(f32::INFINITY, f32::min);
    let d = c.len();
    for n in 0..d {
        let mut best = prev[n].min(m + p2);
        if n > 0 {
            best = best.min(prev[n - 1] + p1);
        }
        if n + 1 < d {
            best = best.min(prev[n + 1] + p1);
        }
        out[n] = c[n] + (best - m);
    }
}

/// Aggregates `cost` along every path and sums the path costs. Invalid
/// cells take [`SGM_INVALID_COST`] during aggregation and stay invalid.
pub fn sgm(cost: &CostVolume, params: &SgmParams) -> Result<CostVolume> {
    params.validate()?;
    let [h, w, d] = cost.dims;
    let raw: Vec<f32> = cost
        .data
        .iter()
        .zip(&cost.mask)
        .map(|(&c, &m)| if m { c } else { SGM_INVALID_COST })
        .collect();
    let per_path: Vec<Vec<f32>> = par::map_range(params.paths.len(), |p| aggregate_path(&raw, [h, w, d], params.paths[p], params));
    let mut total = vec![0.0f64; raw.len()];
    for l in &per_path {
        for (t, v) in total.iter_mut().zip(l) {
            *t += *v as f64;
        }
    }
    Ok(CostVolume {
        dims: cost.dims,
        data: total.into_iter().map(|v| v as f32).collect(),
        mask: cost.mask.clone(),
        ladder: cost.ladder.clone(),
    })
}

fn aggregate_path(c: &[f32], [h, w, d]: [usize; 3], dir: [isize; 2], params: &SgmParams) -> Vec<f32> {
    let mut l = vec![0.0f32; c.len()];
    let cell = |r: usize, col: usize| (r * w + col) * d;
    let (p1, p2) = (params.p1, params.p2);
    if dir[0] == 0 {
        // horizontal: with wrap, run two laps and keep the second
        let laps = if params.wrap_theta { 2 } else { 1 };
        let mut prev = vec![0.0f32; d];
        let mut cur = vec![0.0f32; d];
        for r in 0..h {
            for step in 0..laps * w {
                let col = if dir[1] > 0 { step % w } else { w - 1 - step % w };
                let i = cell(r, col);
                if step == 0 {
                    cur.copy_from_slice(&c[i..i + d]);
                } else {
                    sgm_step(&c[i..i + d], &prev, p1, p2, &mut cur);
                }
                if step + w >= laps * w {
                    l[i..i + d].copy_from_slice(&cur);
                }
                std::mem::swap(&mut prev, &mut cur);
            }
        }
    } else {
        let rows: Vec<usize> = if dir[0] > 0 { (0..h).collect() } else { (0..h).rev().collect() };
        let mut cur = vec![0.0f32; d];
        for (s, &r) in rows.iter().enumerate() {
            for col in 0..w {
                let i = cell(r, col);
                let pc = col as isize - dir[1];
                let prev_col = if params.wrap_theta {
                    Some(pc.rem_euclid(w as isize) as usize)
                } else {
                    (0..w as isize).contains(&pc).then_some(pc as usize)
                };
                match (s, prev_col) {
                    (0, _) | (_, None) => l[i..i + d].copy_from_slice(&c[i..i + d]),
                    (_, Some(pcol)) => {
                        let pr = rows[s - 1];
                        let j = cell(pr, pcol);
                        let prev = l[j..j + d].to_vec();
                        sgm_step(&c[i..i + d], &prev, p1, p2, &mut cur);
                        l[i..i + d].copy_from_slice(&cur);
                    }
                }
            }
        }
    }
    l
}

/// Warps every camera image onto all `N` spheres of `grid` (stride 1).
pub fn warp_all(rig: &Rig, grid: &SweepGrid, images: &[Raster]) -> Result<Vec<SphericalVolume>> {
    if images.len() != rig.len() {
        return Err(shape_err!("{} images for {} cameras", images.len(), rig.len()));
    }
    let g1 = grid.clone().with_stride(1);
    let table = build_lookup(rig, &g1, 1)?;
    images.iter().enumerate().map(|(i, img)| warp_image(img, &table, i)).collect()
}

/// All unordered camera pairs.
pub fn camera_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut v = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            v.push((a, b));
        }
    }
    v
}

/// Multi-view ZNCC cost over every sphere of `grid`.
pub fn spherical_zncc(rig: &Rig, grid: &SweepGrid, images: &[Raster], patch: usize) -> Result<CostVolume> {
    let vols = warp_all(rig, grid, images)?;
    let ladder: Vec<usize> = (0..grid.num_spheres).collect();
    let pairs = camera_pairs(vols.len());
    let costs = pairs
        .iter()
        .map(|&(a, b)| zncc_cost(&vols[a], &vols[b], patch, &ladder))
        .collect::<Result<Vec<_>>>()?;
    multiview_cost(&costs)
}

// ------------------------------------------------------------- stitching

/// A rectified virtual pinhole pair. Both views share `rotation`
/// (rig -> view rows: right, down, forward); the baseline runs along
/// "right" from the left to the right camera.
#[derive(Debug, Clone, PartialEq)]
pub struct PinholeView {
    pub left_camera: usize,
    pub right_camera: usize,
    pub size: usize,
    pub fov: f64,
    pub focal: f64,
    pub rotation: Mat3,
    pub left_center: Vec3,
    pub right_center: Vec3,
}

impl PinholeView {
    pub fn principal(&self) -> f64 {
        0.5 * (self.size as f64 - 1.0)
    }

    pub fn baseline(&self) -> f64 {
        (self.right_center - self.left_center).norm()
    }

    /// Rig-frame unit direction of pixel `(u, v)`.
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        let c = self.principal();
        let d = Vec3::new((u - c) / self.focal, (v - c) / self.focal, 1.0);
        (self.rotation.transpose() * d).normalize()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RectifiedPair {
    pub view: PinholeView,
    pub left: Raster,
    pub right: Raster,
    pub left_mask: Vec<bool>,
    pub right_mask: Vec<bool>,
}

fn optical_axis(cam: &FisheyeCamera) -> Vec3 {
    cam.direction_to_rig(&Vec3::new(0.0, 0.0, 1.0))
}

/// The virtual view between adjacent cameras `a` and `b`, looking along
/// the bisector of their optical axes.
pub fn pinhole_view(rig: &Rig, a: usize, b: usize, size: usize, fov: f64) -> PinholeView {
    let (ca, cb) = (&rig.cameras()[a], &rig.cameras()[b]);
    let forward0 = (optical_axis(ca) + optical_axis(cb)).normalize();
    let nominal_right = Vec3::new(0.0, -1.0, 0.0).cross(&forward0);
    let (l, r) = if ca.center().dot(&nominal_right) <= cb.center().dot(&nominal_right) { (a, b) } else { (b, a) };
    let (cl, cr) = (rig.cameras()[l].center(), rig.cameras()[r].center());
    let right = (cr - cl).normalize();
    let forward = (forward0 - right * forward0.dot(&right)).normalize();
    let down = forward.cross(&right);
    let rotation = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
    PinholeView {
        left_camera: l,
        right_camera: r,
        size,
        fov,
        focal: 0.5 * size as f64 / (0.5 * fov).tan(),
        rotation,
        left_center: cl,
        right_center: cr,
    }
}

fn resample(view: &PinholeView, cam: &FisheyeCamera, img: &Raster) -> (Raster, Vec<bool>) {
    let s = view.size;
    let mut out = Raster::new(s, s);
    let mut mask = vec![false; s * s];
    for v in 0..s {
        for u in 0..s {
            if let Projection::Pixel { u: fu, v: fv } = cam.project_direction(&view.ray(u as f64, v as f64)) {
                let (fu, fv) = (fu as f32, fv as f32);
                if FisheyeCamera::footprint_inside(fu as f64, fv as f64, img.rows, img.cols) {
                    out.set(v, u, img.bilinear(fu, fv));
                    mask[v * s + u] = true;
                }
            }
        }
    }
    (out, mask)
}

/// Rectified pinhole pairs for each adjacent camera pair `(i, i + 1)`.
pub fn rectify_pairs(rig: &Rig, images: &[Raster], size: usize, fov: f64) -> Result<Vec<RectifiedPair>> {
    if images.len() != rig.len() {
        return Err(shape_err!("{} images for {} cameras", images.len(), rig.len()));
    }
    let n = rig.len();
    let mut pairs = Vec::with_capacity(n);
    for a in 0..n {
        let b = (a + 1) % n;
        let view = pinhole_view(rig, a, b, size, fov);
        // every border ray must be in view of both cameras
        let last = (size - 1) as f64;
        for t in 0..size {
            let t = t as f64;
            for (u, v) in [(t, 0.0), (t, last), (0.0, t), (last, t)] {
                let ray = view.ray(u, v);
                for c in [view.left_camera, view.right_camera] {
                    if rig.cameras()[c].project_direction(&ray) == Projection::OutOfView {
                        return Err(Error::InvalidInput(format!(
                            "pinhole view of pair ({a}, {b}) is not covered by camera {c}"
                        )));
                    }
                }
            }
        }
        let (left, left_mask) = resample(&view, &rig.cameras()[view.left_camera], &images[view.left_camera]);
        let (right, right_mask) = resample(&view, &rig.cameras()[view.right_camera], &images[view.right_camera]);
        pairs.push(RectifiedPair { view, left, right, left_mask, right_mask });
    }
    Ok(pairs)
}

/// Disparity map of a rectified pair: `disparity[v][u]` pairs left pixel
/// `u` with right pixel `u - disparity`.
#[derive(Debug, Clone, PartialEq)]
pub struct Disparity {
    pub size: usize,
    pub values: Vec<Option<f32>>,
}

/// ZNCC block matching over integer disparities `0..=max_disparity` with
/// a parabolic sub-pixel fit.
pub fn block_match(pair: &RectifiedPair, patch: usize, max_disparity: usize) -> Disparity {
    let s = pair.view.size;
    let radius = patch / 2;
    let mut scores: Vec<Vec<Option<f32>>> = Vec::with_capacity(max_disparity + 1);
    for d in 0..=max_disparity {
        let mut shifted = vec![0.0f32; s * s];
        let mut valid = vec![false; s * s];
        for v in 0..s {
            for u in d..s {
                let i = v * s + u;
                let j = v * s + u - d;
                shifted[i] = pair.right.data[j];
                valid[i] = pair.left_mask[i] && pair.right_mask[j];
            }
        }
        scores.push(zncc_plane(&pair.left.data, &shifted, &valid, s, s, radius, false));
    }
    let mut values = vec![None; s * s];
    for (i, out) in values.iter_mut().enumerate() {
        let mut best: Option<(usize, f32)> = None;
        for (d, sc) in scores.iter().enumerate() {
            if let Some(z) = sc[i] {
                if best.is_none_or(|(_, b)| z > b) {
                    best = Some((d, z));
                }
            }
        }
        if let Some((d, z)) = best {
            let mut disp = d as f32;
            if d > 0 && d < max_disparity {
                if let (Some(zl), Some(zr)) = (scores[d - 1][i], scores[d + 1][i]) {
                    let denom = zl - 2.0 * z + zr;
                    if denom < 0.0 {
                        disp += (0.5 * (zl - zr) / denom).clamp(-0.5, 0.5);
                    }
                }
            }
            *out = Some(disp.max(0.0));
        }
    }
    Disparity { size: s, values }
}

/// A triangulated point in the rig frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StitchPoint {
    Finite(Vec3),
    /// zero disparity: a direction at infinity
    AtInfinity(Vec3),
}

impl StitchPoint {
    pub fn range(&self) -> f64 {
        match self {
            StitchPoint::Finite(p) => p.norm(),
            StitchPoint::AtInfinity(_) => f64::INFINITY,
        }
    }

    fn direction(&self) -> Vec3 {
        match self {
            StitchPoint::Finite(p) => *p,
            StitchPoint::AtInfinity(d) => *d,
        }
    }
}

/// Triangulates every matched left pixel.
pub fn triangulate(pair: &RectifiedPair, disp: &Disparity) -> Vec<StitchPoint> {
    let view = &pair.view;
    let c = view.principal();
    let fb = view.focal * view.baseline();
    let rt = view.rotation.transpose();
    let mut out = Vec::new();
    for v in 0..disp.size {
        for u in 0..disp.size {
            let Some(d) = disp.values[v * disp.size + u] else { continue };
            let ray = Vec3::new((u as f64 - c) / view.focal, (v as f64 - c) / view.focal, 1.0);
            if d <= 0.0 {
                out.push(StitchPoint::AtInfinity((rt * ray).normalize()));
            } else {
                let z = fb / d as f64;
                out.push(StitchPoint::Finite(view.left_center + rt * (ray * z)));
            }
        }
    }
    out
}

/// Merges points into the grid: each cell takes the nearest point whose
/// projection lies strictly within one cell of its center. Cells without points
/// are flagged invalid.
pub fn stitch_points(points: &[StitchPoint], grid: &SweepGrid) -> (Vec<f32>, Vec<bool>) {
    let (h, w) = (grid.height as isize, grid.width as isize);
    let mut best = vec![f64::INFINITY; grid.cells()];
    let mut hit = vec![false; grid.cells()];
    for p in points {
        let dir = p.direction();
        if dir.norm() == 0.0 {
            continue;
        }
        let (row, col) = grid.cell_of(SphericalCoord::from_direction(&dir));
        let range = p.range();
        for r in (row.floor() as isize - 1)..=(row.ceil() as isize + 1) {
            if r < 0 || r >= h {
                continue;
            }
            for c in (col.floor() as isize - 1)..=(col.ceil() as isize + 1) {
                let mut dc = (c as f64 - col).abs();
                dc = dc.min(w as f64 - dc);
                let dr = r as f64 - row;
                if dr * dr + dc * dc >= 1.0 {
                    continue;
                }
                let i = (r * w + c.rem_euclid(w)) as usize;
                if !hit[i] || range < best[i] {
                    best[i] = range;
                    hit[i] = true;
                }
            }
        }
    }
    let top = (grid.num_spheres - 1) as f64;
    let idx = best
        .iter()
        .zip(&hit)
        .map(|(&d, &h)| if h { grid.depth_to_index(d).min(top) as f32 } else { 0.0 })
        .collect();
    (idx, hit)
}

/// Parameters of the rectify-and-stitch baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StitchParams {
    /// rectified raster side, pixels
    pub size: usize,
    /// pinhole field of view, radians
    pub fov: f64,
    pub patch: usize,
}

impl Default for StitchParams {
    fn default() -> Self {
        StitchParams { size: 96, fov: 120f64.to_radians(), patch: 9 }
    }
}

/// Full rectify, match, triangulate and stitch pipeline.
pub fn stitch_estimate(rig: &Rig, grid: &SweepGrid, images: &[Raster], params: &StitchParams) -> Result<(Vec<f32>, Vec<bool>)> {
    let pairs = rectify_pairs(rig, images, params.size, params.fov)?;
    let mut points = Vec::new();
    for pair in &pairs {
        let max_disp = (pair.view.focal * pair.view.baseline() * grid.inv_depth_max).ceil() as usize + 1;
        let disp = block_match(pair, params.patch, max_disp.min(params.size - 1));
        points.extend(triangulate(pair, &disp));
    }
    Ok(stitch_points(&points, grid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vol(h: usize, w: usize, d: usize, data: Vec<f32>) -> SphericalVolume {
        SphericalVolume { dims: [h, w, d], channels: 1, mask: vec![true; data.len()], data }
    }

    #[test]
    fn zncc_identity_negation_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<f32> = (0..9 * 12).map(|_| rng.gen()).collect();
        let neg: Vec<f32> = a.iter().map(|v| 1.0 - v).collect();
        let ladder = [0];
        let same = zncc_cost(&vol(9, 12, 1, a.clone()), &vol(9, 12, 1, a.clone()), 9, &ladder).unwrap();
        let opp = zncc_cost(&vol(9, 12, 1, a.clone()), &vol(9, 12, 1, neg), 9, &ladder).unwrap();
        let flat = zncc_cost(&vol(9, 12, 1, a.clone()), &vol(9, 12, 1, vec![0.5; 108]), 9, &ladder).unwrap();
        for i in 0..108 {
            assert!(same.mask[i] && same.data[i].abs() < 1e-6);
            assert!(opp.mask[i] && (opp.data[i] - 1.0).abs() < 1e-6);
            assert!(!flat.mask[i]);
        }
        // affine invariance
        let affine: Vec<f32> = a.iter().map(|v| 3.0 * v + 0.25).collect();
        let b: Vec<f32> = (0..108).map(|_| rng.gen()).collect();
        let c1 = zncc_cost(&vol(9, 12, 1, a), &vol(9, 12, 1, b.clone()), 9, &ladder).unwrap();
        let c2 = zncc_cost(&vol(9, 12, 1, affine), &vol(9, 12, 1, b), 9, &ladder).unwrap();
        for i in 0..108 {
            assert!((c1.data[i] - c2.data[i]).abs() < 1e-6);
        }
    }

    fn cv(dims: [usize; 3], data: Vec<f32>) -> CostVolume {
        let n = data.len();
        CostVolume { dims, data, mask: vec![true; n], ladder: (0..dims[2]).collect() }
    }

    #[test]
    fn multiview_averages_valid_pairs() {
        let mut a = cv([1, 1, 2], vec![0.2, 0.9]);
        let b = cv([1, 1, 2], vec![0.4, 0.1]);
        a.mask[1] = false;
        let m = multiview_cost(&[a.clone(), b.clone()]).unwrap();
        assert!((m.data[0] - 0.3).abs() < 1e-7);
        assert_eq!(m.data[1], 0.1);
        let only = multiview_cost(&[a.clone()]).unwrap();
        assert_eq!(only.data[0], 0.2);
        assert!(!only.mask[1]);
    }

    #[test]
    fn wta_ties_and_oracle() {
        let mut c = cv([1, 1, 9], vec![0.5; 9]);
        c.data[4] = 0.1;
        c.data[8] = 0.1;
        assert_eq!(winner_take_all(&c).0, vec![4.0]);
        let single = cv([2, 2, 1], vec![0.3; 4]);
        assert_eq!(winner_take_all(&single).0, vec![0.0; 4]);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut r = cv([3, 4, 5], (0..60).map(|_| rng.gen()).collect());
        r.ladder = vec![0, 2, 4, 6, 8];
        for m in r.mask.iter_mut() {
            *m = rng.gen_bool(0.8);
        }
        let (idx, valid) = winner_take_all(&r);
        for cell in 0..12 {
            let mut best = None;
            for k in 0..5 {
                if r.mask[cell * 5 + k] {
                    match best {
                        None => best = Some(k),
                        Some(b) if r.data[cell * 5 + k] < r.data[cell * 5 + b] => best = Some(k),
                        _ => {}
                    }
                }
            }
            assert_eq!(valid[cell], best.is_some());
            if let Some(b) = best {
                assert_eq!(idx[cell], (2 * b) as f32);
            }
        }
    }

    #[test]
    fn sgm_without_penalties_scales_raw_costs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = cv([5, 7, 6], (0..210).map(|_| rng.gen()).collect());
        let p = SgmParams { p1: 0.0, p2: 0.0, ..SgmParams::default() };
        let s = sgm(&c, &p).unwrap();
        for (a, b) in s.data.iter().zip(&c.data) {
            assert_eq!(*a, 8.0 * b);
        }
        assert_eq!(winner_take_all(&s), winner_take_all(&c));
        let s = sgm(&c, &SgmParams::default()).unwrap();
        for cell in 0..35 {
            let lo = (0..6).map(|k| c.data[cell * 6 + k]).fold(f32::INFINITY, f32::min);
            for k in 0..6 {
                assert!(s.data[cell * 6 + k] >= 8.0 * lo - 1e-6);
            }
        }
    }

    #[test]
    fn sgm_single_path_hand_unrolled() {
        // one row of three cells, two planes, left-to-right path
        let c = cv([1, 3, 2], vec![0.0, 1.0, 1.0, 0.0, 0.5, 0.2]);
        let p = SgmParams { p1: 0.3, p2: 2.0, paths: vec![[0, 1]], wrap_theta: false };
        let s = sgm(&c, &p).unwrap();
        // cell 0: L = C = (0, 1)
        // cell 1: prev (0, 1), min 0; n0: min(0, 1.3, 2) = 0 -> 1 + 0 = 1
        //                            n1: min(1, 0.3, 2) = 0.3 -> 0 + 0.3 = 0.3
        // cell 2: prev (1, 0.3), min 0.3; n0: min(1, 0.6, 2.3) - 0.3 = 0.3 -> 0.8
        //                                 n1: min(0.3, 1.3, 2.3) - 0.3 = 0 -> 0.2
        let expect = [0.0, 1.0, 1.0, 0.3, 0.8, 0.2];
        for (a, b) in s.data.iter().zip(expect) {
            assert!((a - b).abs() < 1e-6, "{:?}", s.data);
        }
    }

    #[test]
    fn sgm_wraps_horizontally() {
        // only the last column prefers plane 0; the wrapped scan carries that
        // preference across the seam into column 0
        let w = 6;
        let mut data = vec![0.5f32; w * 3];
        data[(w - 1) * 3] = 0.0;
        let c = cv([1, w, 3], data);
        let p = SgmParams { p1: 0.1, p2: 1.0, paths: vec![[0, 1]], wrap_theta: true };
        let wrapped = sgm(&c, &p).unwrap();
        let open = sgm(&c, &SgmParams { wrap_theta: false, ..p }).unwrap();
        let col0 = |v: &CostVolume| [v.at(0, 0, 0), v.at(0, 0, 1), v.at(0, 0, 2)];
        assert_eq!(col0(&open), [0.5, 0.5, 0.5]);
        let got = col0(&wrapped);
        for (g, e) in got.iter().zip([0.5, 0.6, 1.0]) {
            assert!((g - e).abs() < 1e-6, "{got:?}");
        }
    }

    #[test]
    fn stitch_closest_point_and_gaps() {
        let grid = SweepGrid::cropped(8, 32, 16, 0.5);
        let (row, col) = (3usize, 10usize);
        let dir = *crate::geometry::unit_ray(grid.coord(row, col)).as_vec();
        let (idx, valid) = stitch_points(&[StitchPoint::Finite(dir * 2.0)], &grid);
        assert_eq!(idx[row * 32 + col], 15.0);
        assert!(valid[row * 32 + col]);
        // neighbors sit exactly one cell away, outside the open radius
        assert!(!valid[row * 32 + col + 1]);
        assert!(!valid[(row + 1) * 32 + col]);
        assert_eq!(valid.iter().filter(|&&v| v).count(), 1);
        let (idx, _) = stitch_points(&[StitchPoint::Finite(dir * 5.0), StitchPoint::Finite(dir * 2.0)], &grid);
        assert_eq!(idx[row * 32 + col], 15.0);
        // a point off-center reaches its neighbors within the radius
        let off = *crate::geometry::unit_ray(SphericalCoord::new(grid.theta(col as f64 + 0.5), grid.phi(row as f64)))
            .as_vec();
        let (_, v2) = stitch_points(&[StitchPoint::Finite(off)], &grid);
        assert!(v2[row * 32 + col] && v2[row * 32 + col + 1]);
        assert_eq!(v2.iter().filter(|&&v| v).count(), 2);
        let (_, none) = stitch_points(&[], &grid);
        assert!(none.iter().all(|v| !v));
    }

    #[test]
    fn rectified_rows_agree() {
        let rig = Rig::default_four(128, 128, 220f64.to_radians(), 0.4);
        let view = pinhole_view(&rig, 0, 1, 96, 120f64.to_radians());
        // center ray is the forward axis
        let fwd = view.rotation.row(2).transpose();
        assert!((view.ray(view.principal(), view.principal()) - fwd).norm() < 1e-12);
        let rt = view.rotation.transpose();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let x = view.left_center
                + rt * Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(1.0..4.0));
            let project = |c: Vec3| {
                let p = view.rotation * (x - c);
                (view.focal * p.x / p.z + view.principal(), view.focal * p.y / p.z + view.principal())
            };
            let (_, vl) = project(view.left_center);
            let (_, vr) = project(view.right_center);
            assert!((vl - vr).abs() < 0.5);
        }
        let images = vec![Raster::filled(128, 128, 0.5); 4];
        let pairs = rectify_pairs(&rig, &images, 96, 120f64.to_radians()).unwrap();
        assert_eq!(pairs.len(), 4);
        assert!(pairs[0].left_mask.iter().all(|&m| m));
        assert!(rectify_pairs(&rig, &images, 96, 170f64.to_radians()).is_err());
    }
}
