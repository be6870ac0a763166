//! End-to-end enhancement: decompose, restore reflectance, fuse, apply light curves, recombine.

use crate::checkpoint::{Checkpoint, Stage};
use crate::curve::{self, CurveMode, LceParams};
use crate::decomposition::{self, DecomParams, RETINEX_EPS};
use crate::error::{Error, Result};
use crate::fusion::{self, FusionInputs, DEFAULT_CROP_FRACTION, DEFAULT_TARGET_MEAN};
use crate::image::Image;
use crate::restoration::{self, RestoreParams};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnhanceOptions {
    pub target_mean: f64,
    pub crop_fraction: f64,
    pub curve_mode: CurveMode,
    pub eps: f64,
}

impl Default for EnhanceOptions {
    fn default() -> Self {
        Self {
            target_mean: DEFAULT_TARGET_MEAN,
            crop_fraction: DEFAULT_CROP_FRACTION,
            curve_mode: CurveMode::Iterative,
            eps: RETINEX_EPS,
        }
    }
}

/// Intermediate maps of one enhancement.
#[derive(Clone, Debug, PartialEq)]
pub struct Enhanced {
    pub i_low: Image,
    pub r_low: Image,
    pub r_out: Image,
    pub i_out: Image,
    pub output: Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pipeline {
    pub decom: DecomParams,
    pub restore: RestoreParams,
    pub illum: LceParams,
    pub options: EnhanceOptions,
}

impl Pipeline {
    pub fn from_checkpoints(
        decom: &Checkpoint,
        restore: &Checkpoint,
        illum: &Checkpoint,
        options: EnhanceOptions,
    ) -> Result<Self> {
        Ok(Self {
            decom: decom.expect_stage(Stage::Decom)?.clone(),
            restore: restore.expect_stage(Stage::Restore)?.clone(),
            illum: illum.expect_stage(Stage::Illum)?.clone(),
            options,
        })
    }

    /// Untrained pipeline with seeded initial weights.
    pub fn random(seed: u64, options: EnhanceOptions) -> Self {
        Self {
            decom: decomposition::init_params(seed),
            restore: restoration::init_params(seed.wrapping_add(1)),
            illum: curve::init_params(seed.wrapping_add(2)),
            options,
        }
    }

    pub fn enhance(&self, img: &Image) -> Result<Enhanced> {
        let d = decomposition::decompose(&self.decom, img)?;
        let r_out = restoration::restore(&self.restore, &d.illumination, &d.reflectance)?;
        let fused = fusion::fuse(&FusionInputs {
            i_low: &d.illumination,
            i_normal: None,
            r_low: &d.reflectance,
            crop_fraction: self.options.crop_fraction,
            target_mean: self.options.target_mean,
            eps: self.options.eps,
        })?;
        let i_out = curve::enhance_illumination(&fused.x_rf, &self.illum, self.options.curve_mode)?;
        let output = compose(&r_out, &i_out)?;
        Ok(Enhanced {
            i_low: d.illumination,
            r_low: d.reflectance,
            r_out,
            i_out,
            output,
        })
    }
}

/// `clamp(R ⊗ I, 0, 1)` with the one-channel illumination broadcast over three channels.
pub fn compose(reflectance: &Image, illumination: &Image) -> Result<Image> {
    if reflectance.channels() != 3
        || illumination.channels() != 1
        || reflectance.height() != illumination.height()
        || reflectance.width() != illumination.width()
    {
        return Err(Error::Shape(
            "compose expects a 3-channel reflectance and matching 1-channel illumination".into(),
        ));
    }
    let n = illumination.data().len();
    let i = illumination.data();
    let data = reflectance
        .data()
        .iter()
        .enumerate()
        .map(|(k, &r)| r * i[k % n])
        .collect();
    Image::from_clamped(reflectance.height(), reflectance.width(), 3, data)
}
