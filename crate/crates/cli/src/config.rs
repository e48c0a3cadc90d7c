//! Run configuration: profile defaults, then the config file, then flags.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use omnimvs::calib::Calibration;
use omnimvs::geometry::{Rig, SweepGrid};
use omnimvs::network::{Augmentation, NetworkConfig};
use omnimvs::pipeline::{ClassicParams, Method};
use omnimvs::synthdata::SceneParams;
use omnimvs::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// 128x128 fisheyes, 32x128x16 grid, small network
    Desk,
    /// 768x800 fisheyes, 160x640x192 grid, full network
    Paper,
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainParams {
    pub lr: f32,
    /// learning rate from `lr_switch_epoch` on
    pub lr_late: f32,
    pub lr_switch_epoch: usize,
    pub momentum: f32,
    pub epochs: usize,
    /// total steps; overrides `epochs` when set
    pub steps: Option<usize>,
    pub permute_cameras: bool,
    pub max_yaw_columns: usize,
    pub checkpoint_every: usize,
}

/// Every field optional; unset fields keep the profile value.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOverrides {
    pub lr: Option<f32>,
    pub lr_late: Option<f32>,
    pub lr_switch_epoch: Option<usize>,
    pub momentum: Option<f32>,
    pub epochs: Option<usize>,
    pub steps: Option<usize>,
    pub permute_cameras: Option<bool>,
    pub max_yaw_columns: Option<usize>,
    pub checkpoint_every: Option<usize>,
}

/// Contents of a `--config` file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub profile: Option<Profile>,
    pub rig: Option<PathBuf>,
    pub grid: Option<String>,
    pub dmax: Option<f64>,
    pub method: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub train: TrainOverrides,
    pub scene: Option<SceneParams>,
    pub classic: Option<ClassicParams>,
    pub network: Option<NetworkConfig>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Values given on the command line or through `OMNIMVS_*` variables.
#[derive(Debug, Clone, Default)]
pub struct FlagValues {
    pub profile: Option<Profile>,
    pub rig: Option<PathBuf>,
    pub grid: Option<String>,
    pub dmax: Option<f64>,
    pub method: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub rig: Rig,
    /// the rig came from a file or flag rather than the profile
    pub rig_given: bool,
    pub grid: SweepGrid,
    pub grid_given: bool,
    pub network: NetworkConfig,
    pub method: Method,
    pub seed: u64,
    pub out: PathBuf,
    pub train: TrainParams,
    pub scene: SceneParams,
    pub classic: ClassicParams,
}

impl RunConfig {
    pub fn augmentation(&self) -> Augmentation {
        Augmentation { permute_cameras: self.train.permute_cameras, max_yaw_columns: self.train.max_yaw_columns }
    }

    /// Replaces the rig and grid (from a corpus) unless they were given
    /// explicitly; explicit values must agree with it.
    pub fn adopt_calibration(&mut self, calib: &Calibration) -> Result<(), Error> {
        if self.rig_given {
            if omnimvs::calib::rig_hash(&self.rig) != omnimvs::calib::rig_hash(&calib.rig) {
                return Err(Error::Config("rig does not match the dataset's rig.toml".into()));
            }
        } else {
            self.rig = calib.rig.clone();
        }
        if !self.grid_given {
            self.grid = calib.grid.clone();
        }
        self.network.grid = self.grid.clone();
        let (rows, cols) = self.rig.cameras()[0].image_size;
        self.network.image_size = [rows, cols];
        Ok(())
    }
}

const FOV_DEG: f64 = 220.0;
const RIG_SIDE: f64 = 0.4;

fn profile_defaults(p: Profile) -> (Rig, NetworkConfig, TrainParams, SceneParams) {
    match p {
        Profile::Desk => (
            Rig::default_four(128, 128, FOV_DEG.to_radians(), RIG_SIDE),
            NetworkConfig::desk(),
            TrainParams {
                lr: 0.01,
                lr_late: 0.001,
                lr_switch_epoch: 20,
                momentum: 0.9,
                epochs: 30,
                steps: None,
                permute_cameras: true,
                max_yaw_columns: 2,
                checkpoint_every: 50,
            },
            SceneParams::default(),
        ),
        Profile::Paper => (
            Rig::default_four(768, 800, FOV_DEG.to_radians(), RIG_SIDE),
            NetworkConfig::paper(),
            TrainParams {
                lr: 0.003,
                lr_late: 0.0003,
                lr_switch_epoch: 20,
                momentum: 0.9,
                epochs: 30,
                steps: None,
                permute_cameras: true,
                max_yaw_columns: 8,
                checkpoint_every: 500,
            },
            SceneParams { num_objects: 64, ..SceneParams::default() },
        ),
    }
}

/// Parses `HxWxN`.
pub fn parse_grid_dims(s: &str) -> Result<(usize, usize, usize), Error> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    let bad = || Error::Config(format!("grid {s:?} is not of the form HxWxN"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let n: Vec<usize> = parts.iter().map(|p| p.trim().parse::<usize>()).collect::<Result<_, _>>().map_err(|_| bad())?;
    Ok((n[0], n[1], n[2]))
}

pub fn resolve(flags: &FlagValues, config_path: Option<&Path>) -> Result<RunConfig, Error> {
    let file = match config_path {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let profile = flags.profile.or(file.profile).unwrap_or(Profile::Desk);
    let (mut rig, mut network, mut train, mut scene) = profile_defaults(profile);

    let mut grid = network.grid.clone();
    let rig_path = flags.rig.clone().or(file.rig.clone());
    let rig_given = rig_path.is_some();
    if let Some(p) = &rig_path {
        let calib = Calibration::load(p)?;
        rig = calib.rig;
        grid = calib.grid;
    }
    if let Some(n) = file.network.clone() {
        network = n;
        if !rig_given {
            grid = network.grid.clone();
        }
    }
    let grid_str = flags.grid.clone().or(file.grid.clone());
    let grid_given = grid_str.is_some() || flags.dmax.is_some() || file.dmax.is_some();
    if let Some(g) = grid_str {
        let (h, w, n) = parse_grid_dims(&g)?;
        grid = SweepGrid { height: h, width: w, num_spheres: n, ..grid };
    }
    if let Some(d) = flags.dmax.or(file.dmax) {
        grid.inv_depth_max = d;
    }
    grid.validate()?;
    network.grid = grid.clone();
    let (rows, cols) = rig.cameras()[0].image_size;
    network.image_size = [rows, cols];
    network.num_cameras = rig.len();

    let t = &file.train;
    train.lr = t.lr.unwrap_or(train.lr);
    train.lr_late = t.lr_late.unwrap_or(train.lr_late);
    train.lr_switch_epoch = t.lr_switch_epoch.unwrap_or(train.lr_switch_epoch);
    train.momentum = t.momentum.unwrap_or(train.momentum);
    train.epochs = t.epochs.unwrap_or(train.epochs);
    train.steps = t.steps.or(train.steps);
    train.permute_cameras = t.permute_cameras.unwrap_or(train.permute_cameras);
    train.max_yaw_columns = t.max_yaw_columns.unwrap_or(train.max_yaw_columns);
    train.checkpoint_every = t.checkpoint_every.unwrap_or(train.checkpoint_every);
    if let Some(s) = file.scene.clone() {
        scene = s;
    }
    let method = flags.method.clone().or(file.method.clone()).unwrap_or_else(|| "zncc-wta".into()).parse::<Method>()?;

    Ok(RunConfig {
        rig,
        rig_given,
        grid,
        grid_given,
        network,
        method,
        seed: flags.seed.or(file.seed).unwrap_or(7),
        out: flags.out.clone().or(file.out.clone()).unwrap_or_else(|| PathBuf::from("out")),
        train,
        scene,
        classic: file.classic.unwrap_or_default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_strings() {
        assert_eq!(parse_grid_dims("32x128x16").unwrap(), (32, 128, 16));
        assert!(parse_grid_dims("32x128").is_err());
        assert!(parse_grid_dims("axbxc").is_err());
    }

    #[test]
    fn flags_beat_file_beats_profile() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 3\ngrid = \"16x64x8\"\n[train]\nlr = 0.5\n").unwrap();
        let from_file = resolve(&FlagValues::default(), Some(&path)).unwrap();
        assert_eq!(from_file.seed, 3);
        assert_eq!((from_file.grid.height, from_file.grid.num_spheres), (16, 8));
        assert_eq!(from_file.train.lr, 0.5);
        assert_eq!(from_file.train.momentum, 0.9);
        let flags = FlagValues { seed: Some(9), dmax: Some(1.0), ..FlagValues::default() };
        let both = resolve(&flags, Some(&path)).unwrap();
        assert_eq!(both.seed, 9);
        assert_eq!(both.grid.inv_depth_max, 1.0);
        assert_eq!(both.network.grid, both.grid);

        std::fs::write(&path, "sed = 3\n").unwrap();
        assert!(matches!(resolve(&FlagValues::default(), Some(&path)), Err(Error::Config(_))));
    }
}
