//! One entry point per depth estimation method.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::classic::{self, CostVolume, SgmParams, StitchParams};
use crate::error::{shape_err, Error, Result};
use crate::geometry::{Rig, SweepGrid};
use crate::network::{normalize_image, predict, Mode, OmniMvsModel, FEATURE_SCALE};
use crate::raster::Raster;
use crate::sweeping::LookupTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Omnimvs,
    ZnccWta,
    ZnccSgm,
    Stitch,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Omnimvs, Method::ZnccWta, Method::ZnccSgm, Method::Stitch];

    pub fn name(self) -> &'static str {
        match self {
            Method::Omnimvs => "omnimvs",
            Method::ZnccWta => "zncc-wta",
            Method::ZnccSgm => "zncc-sgm",
            Method::Stitch => "stitch",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?} (expected omnimvs, zncc-wta, zncc-sgm or stitch)")))
    }
}

/// Settings of the non-learned methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassicParams {
    pub patch: usize,
    pub sgm: SgmParams,
    pub stitch: StitchParams,
}

impl Default for ClassicParams {
    fn default() -> Self {
        ClassicParams { patch: 9, sgm: SgmParams::default(), stitch: StitchParams::default() }
    }
}

/// A depth index map on the sweep grid. Cells with `valid == false` have
/// no estimate (stitching gaps, untextured cells).
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub index: Raster,
    pub valid: Vec<bool>,
    pub cost: Option<CostVolume>,
}

/// Runs a non-learned method on raw camera images.
pub fn estimate_classic(method: Method, rig: &Rig, grid: &SweepGrid, images: &[Raster], params: &ClassicParams) -> Result<Estimate> {
    grid.validate()?;
    let raster = |idx: Vec<f32>| Raster::from_vec(grid.height, grid.width, idx);
    match method {
        Method::ZnccWta | Method::ZnccSgm => {
            let mut cost = classic::spherical_zncc(rig, grid, images, params.patch)?;
            if method == Method::ZnccSgm {
                cost = classic::sgm(&cost, &params.sgm)?;
            }
            let (idx, valid) = classic::winner_take_all(&cost);
            Ok(Estimate { index: raster(idx)?, valid, cost: Some(cost) })
        }
        Method::Stitch => {
            let (idx, valid) = classic::stitch_estimate(rig, grid, images, &params.stitch)?;
            Ok(Estimate { index: raster(idx)?, valid, cost: None })
        }
        Method::Omnimvs => Err(Error::Config("omnimvs needs a trained model".into())),
    }
}

/// Runs the network in eval mode on raw camera images.
pub fn estimate_network(model: &OmniMvsModel, rig: &Rig, table: &LookupTable, images: &[Raster]) -> Result<Estimate> {
    if images.len() != rig.len() {
        return Err(shape_err!("{} images for {} cameras", images.len(), rig.len()));
    }
    if table.scale() != FEATURE_SCALE {
        return Err(Error::Config(format!("lookup table at scale {}, network needs {FEATURE_SCALE}", table.scale())));
    }
    let norm: Vec<Raster> = images.iter().zip(rig.cameras()).map(|(img, cam)| normalize_image(img, cam)).collect();
    let pred = predict(model, &norm, table, Mode::Eval)?;
    let g = &model.config().grid;
    Ok(Estimate { index: Raster::from_vec(g.height, g.width, pred)?, valid: vec![true; g.cells()], cost: None })
}
