//! Rig calibration files.
//!
//! A calibration file is TOML with one `[grid]` table and one `[[camera]]`
//! table per camera:
//!
//! ```toml
//! [grid]
//! height = 32
//! width = 128
//! phi_min = -0.7853981633974483
//! phi_max = 0.7853981633974483
//! num_spheres = 16
//! inv_depth_max = 2.0
//! stride = 2
//!
//! [[camera]]
//! id = 0
//! focal = 33.0
//! principal_point = [63.5, 63.5]   # (u0, v0)
//! image_size = [128, 128]          # (rows, cols)
//! fov = 3.839724354387525          # full cone angle, radians
//! rotation = [1, 0, 0, 0, 1, 0, 0, 0, 1]  # row-major, rig -> camera
//! translation = [0, 0, 0]                 # meters, rig -> camera
//! ```
//!
//! Unknown fields are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{FisheyeCamera, Mat3, Rig, SweepGrid, Vec3};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraEntry {
    id: usize,
    focal: f64,
    principal_point: [f64; 2],
    image_size: [usize; 2],
    fov: f64,
    rotation: [f64; 9],
    translation: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RigDocument {
    grid: SweepGrid,
    camera: Vec<CameraEntry>,
}

/// A rig together with the sweep grid it is used with.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub rig: Rig,
    pub grid: SweepGrid,
}

impl Calibration {
    pub fn from_toml(text: &str) -> Result<Self> {
        let doc: RigDocument =
            toml::from_str(text).map_err(|e| Error::Config(format!("rig file: {e}")))?;
        doc.grid.validate()?;
        let cameras = doc
            .camera
            .iter()
            .map(|c| {
                let r = &c.rotation;
                FisheyeCamera::new(
                    c.id,
                    c.focal,
                    (c.principal_point[0], c.principal_point[1]),
                    (c.image_size[0], c.image_size[1]),
                    c.fov,
                    Mat3::new(r[0], r[1], r[2], r[3], r[4], r[5], r[6], r[7], r[8]),
                    Vec3::new(c.translation[0], c.translation[1], c.translation[2]),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Calibration {
            rig: Rig::new(cameras)?,
            grid: doc.grid,
        })
    }

    pub fn to_toml(&self) -> String {
        let doc = RigDocument {
            grid: self.grid.clone(),
            camera: self
                .rig
                .cameras()
                .iter()
                .map(|c| {
                    let mut rotation = [0.0; 9];
                    for r in 0..3 {
                        for k in 0..3 {
                            rotation[r * 3 + k] = c.rotation[(r, k)];
                        }
                    }
                    CameraEntry {
                        id: c.id,
                        focal: c.focal,
                        principal_point: [c.principal_point.0, c.principal_point.1],
                        image_size: [c.image_size.0, c.image_size.1],
                        fov: c.fov,
                        rotation,
                        translation: [c.translation.x, c.translation.y, c.translation.z],
                    }
                })
                .collect(),
        };
        toml::to_string(&doc).expect("rig document serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }
}

/// Stable content hash of a rig's calibration (hex, 16 chars).
pub fn rig_hash(rig: &Rig) -> String {
    let mut h = Sha256::new();
    for c in rig.cameras() {
        h.update((c.id as u64).to_le_bytes());
        h.update((c.image_size.0 as u64).to_le_bytes());
        h.update((c.image_size.1 as u64).to_le_bytes());
        for v in [c.focal, c.principal_point.0, c.principal_point.1, c.fov]
            .into_iter()
            .chain(c.rotation.iter().copied())
            .chain(c.translation.iter().copied())
        {
            h.update(v.to_le_bytes());
        }
    }
    hex16(&h.finalize())
}

/// Hash of a rig together with a grid.
pub fn rig_grid_hash(rig: &Rig, grid: &SweepGrid) -> String {
    let mut h = Sha256::new();
    h.update(rig_hash(rig).as_bytes());
    for v in [grid.height, grid.width, grid.num_spheres, grid.stride] {
        h.update((v as u64).to_le_bytes());
    }
    for v in [grid.phi_min, grid.phi_max, grid.inv_depth_max] {
        h.update(v.to_le_bytes());
    }
    hex16(&h.finalize())
}

/// Hash of arbitrary text (used for config manifests).
pub fn text_hash(text: &str) -> String {
    hex16(&Sha256::digest(text.as_bytes()))
}

fn hex16(bytes: &[u8]) -> String {
    bytes[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Calibration {
        Calibration {
            rig: Rig::default_four(128, 128, 220f64.to_radians(), 0.4),
            grid: SweepGrid::cropped(32, 128, 16, 2.0),
        }
    }

    #[test]
    fn toml_round_trip() {
        let c = sample();
        let text = c.to_toml();
        let back = Calibration::from_toml(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(rig_hash(&back.rig), rig_hash(&c.rig));
    }

    #[test]
    fn rejects_unknown_fields() {
        let text = sample().to_toml().replace("[grid]", "[grid]\nbogus = 1");
        assert!(matches!(Calibration::from_toml(&text), Err(Error::Config(_))));
        let text = sample().to_toml().replacen("focal =", "skew = 0.0\nfocal =", 1);
        assert!(Calibration::from_toml(&text).is_err());
    }

    #[test]
    fn rejects_invalid_rotation() {
        let text = sample()
            .to_toml()
            .replacen("rotation = [", "rotation = [2.0, ", 1)
            .replacen(", 0.0]\ntranslation", "]\ntranslation", 1);
        assert!(Calibration::from_toml(&text).is_err());
    }

    #[test]
    fn hash_tracks_changes() {
        let c = sample();
        let rotated = c.rig.rotated_yaw(0.01);
        assert_ne!(rig_hash(&c.rig), rig_hash(&rotated));
        let g2 = SweepGrid { num_spheres: 32, ..c.grid.clone() };
        assert_ne!(rig_grid_hash(&c.rig, &c.grid), rig_grid_hash(&c.rig, &g2));
    }
}
