//! Light-curve estimation: a seven-layer convolutional backbone predicts eight per-pixel
//! coefficient maps, each driving the quadratic curve `x + α·x·(1 − x)` on the illumination map.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::fusion::{FUSED_CHANNELS, ILLUM_CHANNEL};
use crate::image::Image;
use crate::nn::{Bound, ConvSpec, Params};

pub const NUM_CURVES: usize = 8;
pub const HIDDEN_WIDTH: usize = 32;

pub type LceParams = Params<f32>;

/// How the eight curve stages combine into one illumination map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CurveMode {
    /// Stages applied in sequence to the illumination channel.
    #[default]
    Iterative,
    /// Each stage applied to the input independently, then sigmoid and channel mean.
    Literal,
}

impl FromStr for CurveMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iterative" => Ok(Self::Iterative),
            "literal" => Ok(Self::Literal),
            other => Err(Error::InvalidArgument(format!(
                "unknown curve mode {other:?} (expected iterative or literal)"
            ))),
        }
    }
}

impl fmt::Display for CurveMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Iterative => "iterative",
            Self::Literal => "literal",
        })
    }
}

pub fn layers() -> Vec<ConvSpec> {
    let w = HIDDEN_WIDTH;
    vec![
        ConvSpec::new("lce1", FUSED_CHANNELS, w),
        ConvSpec::new("lce2", w, w),
        ConvSpec::new("lce3", w, w),
        ConvSpec::new("lce4", w, w),
        ConvSpec::new("lce5", 2 * w, w),
        ConvSpec::new("lce6", 2 * w, w),
        ConvSpec::new("lce7", 2 * w, NUM_CURVES),
    ]
}

pub fn init_params(seed: u64) -> LceParams {
    Params::init(&layers(), seed)
}

/// Eight coefficient maps stacked as an `8 × H × W` tensor, every value in [−1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaStack {
    pub alphas: Tensor<f32>,
}

impl AlphaStack {
    pub fn alpha(&self, i: usize) -> &[f32] {
        let n = self.alphas.shape()[1] * self.alphas.shape()[2];
        &self.alphas.data()[i * n..(i + 1) * n]
    }

    pub fn len(&self) -> usize {
        self.alphas.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Backbone over the fused stack; returns the `8 × H × W` tanh output.
pub fn backbone_graph<T: Real>(g: &mut Graph<T>, p: &Bound, x_rf: Var) -> Result<Var> {
    let (c, _, _) = g.value(x_rf).dims3()?;
    if c != FUSED_CHANNELS {
        return Err(Error::Shape(format!(
            "light-curve backbone expects {FUSED_CHANNELS} channels, got {c}"
        )));
    }
    let relu_conv = |g: &mut Graph<T>, name: &str, x: Var| -> Result<Var> {
        let y = p.conv(g, name, x)?;
        Ok(g.relu(y))
    };
    let x1 = relu_conv(g, "lce1", x_rf)?;
    let x2 = relu_conv(g, "lce2", x1)?;
    let x3 = relu_conv(g, "lce3", x2)?;
    let x4 = relu_conv(g, "lce4", x3)?;
    let cat = g.concat(&[x3, x4])?;
    let x5 = relu_conv(g, "lce5", cat)?;
    let cat = g.concat(&[x2, x5])?;
    let x6 = relu_conv(g, "lce6", cat)?;
    let cat = g.concat(&[x1, x6])?;
    let x7 = p.conv(g, "lce7", cat)?;
    Ok(g.tanh(x7))
}

/// Combines the curve stages on channel 5 of `x_rf` according to `mode`.
pub fn enhance_graph<T: Real>(
    g: &mut Graph<T>,
    x_rf: Var,
    alphas: Var,
    mode: CurveMode,
) -> Result<Var> {
    let y0 = g.slice_channels(x_rf, ILLUM_CHANNEL, 1)?;
    let stages = g.split_channels(alphas)?;
    match mode {
        CurveMode::Iterative => {
            let mut y = y0;
            for a in stages {
                y = g.curve(y, a)?;
            }
            Ok(y)
        }
        CurveMode::Literal => {
            let outs = stages
                .into_iter()
                .map(|a| g.curve(y0, a))
                .collect::<Result<Vec<_>>>()?;
            let cat = g.concat(&outs)?;
            let s = g.sigmoid(cat);
            g.channel_mean(s)
        }
    }
}

/// One curve stage: `x + α·x·(1 − x)`.
#[inline]
pub fn curve_value(x: f64, alpha: f64) -> f64 {
    x + alpha * x * (1.0 - x)
}

/// Applies one stage to a whole map.
pub fn apply_curve_stage(x: &Image, alpha: &[f32]) -> Result<Image> {
    if x.channels() != 1 || alpha.len() != x.data().len() {
        return Err(Error::Shape("curve stage expects matching 1-channel maps".into()));
    }
    let data = x
        .data()
        .iter()
        .zip(alpha)
        .map(|(&v, &a)| curve_value(v as f64, a as f64) as f32)
        .collect();
    Image::from_clamped(x.height(), x.width(), 1, data)
}

pub fn lce_backbone(x_rf: &Tensor<f32>, params: &LceParams) -> Result<AlphaStack> {
    let mut g = Graph::<f32>::new();
    let b = params.bind(&mut g, false);
    let x = g.constant(x_rf.clone());
    let a = backbone_graph(&mut g, &b, x)?;
    Ok(AlphaStack {
        alphas: g.value(a).clone(),
    })
}

/// Full light-curve step on a fused stack: backbone then curve composition.
pub fn enhance_illumination(x_rf: &Tensor<f32>, params: &LceParams, mode: CurveMode) -> Result<Image> {
    let mut g = Graph::<f32>::new();
    let b = params.bind(&mut g, false);
    let x = g.constant(x_rf.clone());
    let a = backbone_graph(&mut g, &b, x)?;
    let y = enhance_graph(&mut g, x, a, mode)?;
    g.value(y).to_image()
}
