//! Spherical sweeping: lookup tables from sweep-sphere cells to fisheye
//! source pixels, and bilinear warping of images and feature maps.
//!
//! A table covers the subsampled sphere set `0, stride, 2 * stride, ...`
//! and is built once per rig and grid. Entries whose bilinear footprint is
//! not fully inside the source raster are invalid; warping writes zeros
//! there and back-propagates nothing through them.

use std::path::Path;
use std::sync::Arc;

use crate::autodiff::{GatherPlan, Graph, Tensor, Var};
use crate::calib::rig_grid_hash;
use crate::error::{shape_err, Error, Result};
use crate::geometry::{scaled_size, FisheyeCamera, Projection, Rig, SweepGrid};
use crate::par;
use crate::raster::{bilinear_taps, Raster};

/// Source coordinates for every (camera, subsampled sphere, row, col).
#[derive(Debug, Clone)]
pub struct LookupTable {
    num_cameras: usize,
    num_sub: usize,
    height: usize,
    width: usize,
    scale: usize,
    /// (rows, cols) of each camera's source raster at this scale
    source_sizes: Vec<(usize, usize)>,
    /// `(u, v)` pairs, NaN where invalid
    coords: Vec<f32>,
    plans: Vec<Arc<GatherPlan>>,
    hash: String,
}

impl LookupTable {
    /// `(num_cameras, ceil(N / stride), H, W, 2)`
    pub fn shape(&self) -> [usize; 5] {
        [self.num_cameras, self.num_sub, self.height, self.width, 2]
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn num_cameras(&self) -> usize {
        self.num_cameras
    }

    pub fn source_size(&self, camera: usize) -> (usize, usize) {
        self.source_sizes[camera]
    }

    /// Hash of the rig and grid this table was built for.
    pub fn rig_hash(&self) -> &str {
        &self.hash
    }

    fn offset(&self, camera: usize, k: usize, row: usize, col: usize) -> usize {
        (((camera * self.num_sub + k) * self.height + row) * self.width + col) * 2
    }

    /// Source coordinate of sub-sphere `k`, or `None` when invalid.
    pub fn entry(&self, camera: usize, k: usize, row: usize, col: usize) -> Option<(f32, f32)> {
        let o = self.offset(camera, k, row, col);
        let (u, v) = (self.coords[o], self.coords[o + 1]);
        (!u.is_nan()).then_some((u, v))
    }

    /// Validity mask in `(H, W, ceil(N / stride))` order.
    pub fn mask(&self, camera: usize) -> Vec<bool> {
        self.plans[camera].entries.iter().map(Option::is_some).collect()
    }

    pub fn plan(&self, camera: usize) -> Arc<GatherPlan> {
        self.plans[camera].clone()
    }

    fn finish(
        num_cameras: usize,
        grid: &SweepGrid,
        scale: usize,
        source_sizes: Vec<(usize, usize)>,
        coords: Vec<f32>,
        hash: String,
    ) -> Self {
        let mut t = LookupTable {
            num_cameras,
            num_sub: grid.num_sub(),
            height: grid.height,
            width: grid.width,
            scale,
            source_sizes,
            coords,
            plans: Vec::new(),
            hash,
        };
        t.plans = (0..num_cameras).map(|c| Arc::new(t.build_plan(c))).collect();
        t
    }

    fn build_plan(&self, camera: usize) -> GatherPlan {
        let (rows, cols) = self.source_sizes[camera];
        let mut entries = Vec::with_capacity(self.height * self.width * self.num_sub);
        for row in 0..self.height {
            for col in 0..self.width {
                for k in 0..self.num_sub {
                    entries.push(self.entry(camera, k, row, col).map(|(u, v)| {
                        let (idx, w) = bilinear_taps(u, v, cols);
                        (idx.map(|i| i as u32), w)
                    }));
                }
            }
        }
        GatherPlan { source_rows: rows * cols, entries }
    }

    // -------------------------------------------------------------- cache

    /// Writes the table: `b"OMVSLUT1"`, 16-byte rig hash, u32 scale, five
    /// u64 extents, then the `(u, v)` pairs as little-endian f32 (NaN =
    /// invalid).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(60 + self.coords.len() * 4);
        out.extend_from_slice(b"OMVSLUT1");
        out.extend_from_slice(self.hash.as_bytes());
        out.extend_from_slice(&(self.scale as u32).to_le_bytes());
        for d in self.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &self.coords {
            out.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Loads a cached table if it matches `rig`, `grid` and `scale`;
    /// returns `Ok(None)` for a stale cache.
    pub fn load(path: &Path, rig: &Rig, grid: &SweepGrid, scale: usize) -> Result<Option<Self>> {
        let bytes = std::fs::read(path)?;
        let bad = || Error::Format(format!("{}: not a lookup table", path.display()));
        if bytes.len() < 68 || &bytes[..8] != b"OMVSLUT1" {
            return Err(bad());
        }
        let hash = std::str::from_utf8(&bytes[8..24]).map_err(|_| bad())?.to_string();
        let stored_scale = u32::from_le_bytes(bytes[24..28].try_into().unwrap()) as usize;
        let mut dims = [0usize; 5];
        for (i, d) in dims.iter_mut().enumerate() {
            *d = u64::from_le_bytes(bytes[28 + 8 * i..36 + 8 * i].try_into().unwrap()) as usize;
        }
        if hash != rig_grid_hash(rig, grid) || stored_scale != scale {
            return Ok(None);
        }
        if dims != [rig.len(), grid.num_sub(), grid.height, grid.width, 2] {
            return Err(bad());
        }
        let body = &bytes[68..];
        if body.len() != dims.iter().product::<usize>() * 4 {
            return Err(bad());
        }
        let coords = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let sizes = rig.cameras().iter().map(|c| scaled_size(c.image_size, scale)).collect();
        Ok(Some(Self::finish(rig.len(), grid, scale, sizes, coords, hash)))
    }

    /// Loads from `path` when fresh, otherwise builds and rewrites it.
    pub fn load_or_build(path: &Path, rig: &Rig, grid: &SweepGrid, scale: usize) -> Result<Self> {
        if path.exists() {
            if let Some(t) = Self::load(path, rig, grid, scale)? {
                return Ok(t);
            }
        }
        let t = build_lookup(rig, grid, scale)?;
        t.save(path)?;
        Ok(t)
    }
}

/// Source coordinate of one (camera, sphere, cell), scaled by `1 / scale`,
/// or `None` when out of view or without a full bilinear footprint.
pub fn lookup_entry(
    cam: &FisheyeCamera,
    grid: &SweepGrid,
    scale: usize,
    n: usize,
    row: usize,
    col: usize,
) -> Option<(f32, f32)> {
    let (rows, cols) = scaled_size(cam.image_size, scale);
    match cam.project_sphere_point(&grid.sphere_point(row, col, n)) {
        Projection::Pixel { u, v } => {
            let s = scale as f64;
            let (u, v) = ((u / s) as f32, (v / s) as f32);
            FisheyeCamera::footprint_inside(u as f64, v as f64, rows, cols).then_some((u, v))
        }
        Projection::OutOfView => None,
    }
}

/// Builds the table for every camera of `rig` on the subsampled spheres.
pub fn build_lookup(rig: &Rig, grid: &SweepGrid, scale: usize) -> Result<LookupTable> {
    grid.validate()?;
    if scale == 0 {
        return Err(Error::Config("source scale must be >= 1".into()));
    }
    let subs = grid.sub_indices();
    let plane = grid.height * grid.width * 2;
    let mut coords = vec![f32::NAN; rig.len() * subs.len() * plane];
    par::for_each_chunk_mut(&mut coords, plane, |slot, out| {
        let cam = &rig.cameras()[slot / subs.len()];
        let n = subs[slot % subs.len()];
        for row in 0..grid.height {
            for col in 0..grid.width {
                if let Some((u, v)) = lookup_entry(cam, grid, scale, n, row, col) {
                    let o = (row * grid.width + col) * 2;
                    out[o] = u;
                    out[o + 1] = v;
                }
            }
        }
    });
    let sizes = rig.cameras().iter().map(|c| scaled_size(c.image_size, scale)).collect();
    Ok(LookupTable::finish(rig.len(), grid, scale, sizes, coords, rig_grid_hash(rig, grid)))
}

/// Warped data on the sweep spheres: `(H, W, ceil(N / stride), C)` plus the
/// per-cell validity. Invalid cells are exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SphericalVolume {
    pub dims: [usize; 3],
    pub channels: usize,
    pub data: Vec<f32>,
    pub mask: Vec<bool>,
}

impl SphericalVolume {
    #[inline]
    pub fn at(&self, row: usize, col: usize, k: usize, c: usize) -> f32 {
        self.data[((row * self.dims[1] + col) * self.dims[2] + k) * self.channels + c]
    }

    #[inline]
    pub fn valid(&self, row: usize, col: usize, k: usize) -> bool {
        self.mask[(row * self.dims[1] + col) * self.dims[2] + k]
    }

    pub fn to_tensor(&self) -> Tensor {
        let [h, w, d] = self.dims;
        Tensor::from_vec(&[h, w, d, self.channels], self.data.clone()).expect("consistent volume")
    }
}

fn gather_values(src: &[f32], channels: usize, plan: &GatherPlan) -> Vec<f32> {
    let mut out = vec![0.0f32; plan.entries.len() * channels];
    for (dst, e) in out.chunks_exact_mut(channels).zip(&plan.entries) {
        if let Some((idx, w)) = e {
            for k in 0..4 {
                let s = &src[idx[k] as usize * channels..(idx[k] as usize + 1) * channels];
                for (d, v) in dst.iter_mut().zip(s) {
                    *d += w[k] * v;
                }
            }
        }
    }
    out
}

/// Warps a full-resolution fisheye image of `camera` onto the spheres.
pub fn warp_image(img: &Raster, table: &LookupTable, camera: usize) -> Result<SphericalVolume> {
    if table.scale != 1 {
        return Err(Error::InvalidInput(format!("warp_image needs a scale-1 table, got {}", table.scale)));
    }
    if (img.rows, img.cols) != table.source_size(camera) {
        return Err(shape_err!(
            "image is {}x{}, camera {camera} expects {:?}",
            img.rows,
            img.cols,
            table.source_size(camera)
        ));
    }
    let plan = &table.plans[camera];
    Ok(SphericalVolume {
        dims: [table.height, table.width, table.num_sub],
        channels: 1,
        data: gather_values(&img.data, 1, plan),
        mask: table.mask(camera),
    })
}

/// Warps a `(rows, cols, C)` feature map of `camera` onto the spheres.
pub fn warp_feature_tensor(feat: &Tensor, table: &LookupTable, camera: usize) -> Result<SphericalVolume> {
    check_feature_shape(feat.shape(), table, camera)?;
    let c = feat.channels();
    Ok(SphericalVolume {
        dims: [table.height, table.width, table.num_sub],
        channels: c,
        data: gather_values(feat.data(), c, &table.plans[camera]),
        mask: table.mask(camera),
    })
}

/// Differentiable warp of a graph feature map; returns the
/// `(H, W, ceil(N / stride), C)` volume and its mask.
pub fn warp_features(g: &mut Graph, feat: Var, table: &LookupTable, camera: usize) -> Result<(Var, Vec<bool>)> {
    check_feature_shape(g.shape(feat), table, camera)?;
    let v = g.gather(feat, table.plan(camera), &[table.height, table.width, table.num_sub])?;
    Ok((v, table.mask(camera)))
}

fn check_feature_shape(shape: &[usize], table: &LookupTable, camera: usize) -> Result<()> {
    let (rows, cols) = table.source_size(camera);
    if shape.len() != 3 || shape[0] != rows || shape[1] != cols {
        return Err(shape_err!(
            "feature map {shape:?} does not match camera {camera}'s {rows}x{cols} source raster at scale {}",
            table.scale
        ));
    }
    Ok(())
}

/// Channel-axis concatenation of volumes in `permutation` order.
pub fn concat_volumes(volumes: &[SphericalVolume], permutation: &[usize]) -> Result<Tensor> {
    let first = volumes.first().ok_or_else(|| shape_err!("no volumes to concatenate"))?;
    let mut seen = vec![false; volumes.len()];
    if permutation.len() != volumes.len()
        || permutation.iter().any(|&p| p >= volumes.len() || std::mem::replace(&mut seen[p], true))
    {
        return Err(Error::InvalidInput(format!("{permutation:?} is not a permutation of 0..{}", volumes.len())));
    }
    for v in volumes {
        if v.dims != first.dims || v.channels != first.channels {
            return Err(shape_err!("volume {:?}x{} vs {:?}x{}", v.dims, v.channels, first.dims, first.channels));
        }
    }
    let c = first.channels;
    let cells: usize = first.dims.iter().product();
    let mut out = Vec::with_capacity(cells * c * volumes.len());
    for cell in 0..cells {
        for &p in permutation {
            out.extend_from_slice(&volumes[p].data[cell * c..(cell + 1) * c]);
        }
    }
    let [h, w, d] = first.dims;
    Tensor::from_vec(&[h, w, d, c * volumes.len()], out)
}

/// The cyclic camera orders used for concatenation augmentation:
/// `(0,1,2,3), (1,2,3,0), ...`.
pub fn cyclic_permutations(n: usize) -> Vec<Vec<usize>> {
    (0..n).map(|s| (0..n).map(|i| (i + s) % n).collect()).collect()
}
