//! Stage-wise training: decomposition first, then restoration and illumination on top of a
//! frozen decomposition network.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::checkpoint::{Checkpoint, Stage};
use crate::curve::{self, CurveMode};
use crate::decomposition::{self, DecomWeights, RETINEX_EPS};
use crate::error::{Error, Result};
use crate::fusion::{self, CoeffSource, DEFAULT_CROP_FRACTION};
use crate::image::{CropWindow, Image};
use crate::losses::{illum_total_loss, DEFAULT_BETA};
use crate::nn::Params;
use crate::restoration;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub crop_fraction: f64,
    pub curve_mode: CurveMode,
    pub beta: f64,
    pub lambda_rc: f64,
    pub lambda_is: f64,
    pub lambda_tv_restore: f64,
    /// Weight of the smoothness term in the illumination objective; 0 disables it.
    pub illum_tv_weight: f64,
    pub precision: Precision,
}

impl TrainConfig {
    pub fn new(stage: Stage) -> Self {
        Self {
            stage,
            steps: 2000,
            lr: 1e-3,
            batch: 4,
            seed: 0,
            crop_fraction: DEFAULT_CROP_FRACTION,
            curve_mode: CurveMode::Iterative,
            beta: DEFAULT_BETA,
            lambda_rc: decomposition::DEFAULT_LAMBDA_RC,
            lambda_is: decomposition::DEFAULT_LAMBDA_IS,
            lambda_tv_restore: restoration::DEFAULT_LAMBDA_TV,
            illum_tv_weight: 1.0,
            precision: Precision::F32,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::InvalidArgument("steps and batch must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("lr must be positive, got {}", self.lr)));
        }
        CropWindow::size(64, 64, self.crop_fraction)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub low: Image,
    pub normal: Image,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Synthetic,
    Directory,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairDataset {
    pub pairs: Vec<Pair>,
    pub provenance: Provenance,
}

impl PairDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Reads `low/*.ppm` and `normal/*.ppm` under `dir`, paired by file name.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut names: Vec<_> = fs::read_dir(dir.join("low"))?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name())
            .filter(|n| n.to_string_lossy().ends_with(".ppm"))
            .collect();
        names.sort();
        let mut pairs = Vec::with_capacity(names.len());
        for n in names {
            let low = Image::load_ppm(dir.join("low").join(&n))?;
            let normal = Image::load_ppm(dir.join("normal").join(&n))?;
            if !low.same_dims(&normal) {
                return Err(Error::Shape(format!(
                    "pair {} differs in size",
                    n.to_string_lossy()
                )));
            }
            pairs.push(Pair { low, normal });
        }
        Ok(Self {
            pairs,
            provenance: Provenance::Directory,
        })
    }
}

/// Procedural normal-light image: a tilted colour gradient, a few blended rectangles and
/// low-frequency sinusoidal texture, rescaled to span [0.05, 0.95].
fn procedural_image(size: usize, rng: &mut ChaCha8Rng) -> Image {
    let n = size * size;
    let mut data = vec![0.0f64; 3 * n];
    let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (ct, st) = (theta.cos(), theta.sin());
    let base: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    let slope: [f64; 3] = [
        rng.random_range(-0.8..0.8),
        rng.random_range(-0.8..0.8),
        rng.random_range(-0.8..0.8),
    ];
    for y in 0..size {
        for x in 0..size {
            let t = (x as f64 * ct + y as f64 * st) / size as f64;
            for c in 0..3 {
                data[c * n + y * size + x] = base[c] + slope[c] * t;
            }
        }
    }
    let rects = rng.random_range(2..=4);
    for _ in 0..rects {
        let h = rng.random_range(size / 6..=size / 2);
        let w = rng.random_range(size / 6..=size / 2);
        let y0 = rng.random_range(0..=size - h);
        let x0 = rng.random_range(0..=size - w);
        let color: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        let a: f64 = rng.random_range(0.5..1.0);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                for c in 0..3 {
                    let v = &mut data[c * n + y * size + x];
                    *v = (1.0 - a) * *v + a * color[c];
                }
            }
        }
    }
    for _ in 0..3 {
        let fx: f64 = rng.random_range(0.5..3.0) * std::f64::consts::TAU / size as f64;
        let fy: f64 = rng.random_range(0.5..3.0) * std::f64::consts::TAU / size as f64;
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let amp: [f64; 3] = [
            rng.random_range(0.0..0.08),
            rng.random_range(0.0..0.08),
            rng.random_range(0.0..0.08),
        ];
        for y in 0..size {
            for x in 0..size {
                let s = (fx * x as f64 + fy * y as f64 + phase).sin();
                for c in 0..3 {
                    data[c * n + y * size + x] += amp[c] * s;
                }
            }
        }
    }
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-9);
    let data = data
        .into_iter()
        .map(|v| (0.05 + 0.9 * (v - lo) / span) as f32)
        .collect();
    Image::from_clamped(size, size, 3, data).expect("valid dimensions")
}

pub const SYNTH_GAMMA: (f64, f64) = (2.0, 5.0);
pub const SYNTH_NOISE_SIGMA: f64 = 0.02;

/// `n` procedural normal images, each darkened with `γ ~ U[2, 5]` and noise σ = 0.02.
pub fn make_synthetic_pairs(n: usize, size: usize, seed: u64) -> Result<PairDataset> {
    if size < 16 {
        return Err(Error::InvalidArgument(format!("synthetic size must be >= 16, got {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let normal = procedural_image(size, &mut rng);
        let gamma = rng.random_range(SYNTH_GAMMA.0..=SYNTH_GAMMA.1);
        let low = normal.synth_darken(gamma, SYNTH_NOISE_SIGMA, rng.random())?;
        pairs.push(Pair { low, normal });
    }
    Ok(PairDataset {
        pairs,
        provenance: Provenance::Synthetic,
    })
}

/// First and second moment estimates for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Params<T>,
    pub v: Params<T>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &Params<T>) -> Self {
        Self {
            m: params.zeroed(),
            v: params.zeroed(),
            t: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected adaptive-moment update.
pub fn adam_step<T: Real>(
    params: &mut Params<T>,
    grads: &Params<T>,
    state: &mut AdamState<T>,
    hyper: AdamHyper,
) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    let (b1, b2) = (T::from_f64(hyper.beta1), T::from_f64(hyper.beta2));
    let (ob1, ob2) = (T::from_f64(1.0 - hyper.beta1), T::from_f64(1.0 - hyper.beta2));
    for (name, p) in params.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Shape(format!("no gradient for {name}")))?;
        let m = state.m.get_mut(name).ok_or_else(|| Error::Shape(format!("no state for {name}")))?;
        if g.shape() != p.shape() || m.shape() != p.shape() {
            return Err(Error::Shape(format!("gradient shape mismatch for {name}")));
        }
        for (mi, &gi) in m.data_mut().iter_mut().zip(g.data()) {
            *mi = b1 * *mi + ob1 * gi;
        }
        let v = state.v.get_mut(name).ok_or_else(|| Error::Shape(format!("no state for {name}")))?;
        for (vi, &gi) in v.data_mut().iter_mut().zip(g.data()) {
            *vi = b2 * *vi + ob2 * gi * gi;
        }
        let (m, v) = (state.m.get(name).expect("present"), state.v.get(name).expect("present"));
        for ((pi, &mi), &vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
            let mhat = mi.to_f64() / c1;
            let vhat = vi.to_f64() / c2;
            *pi -= T::from_f64(hyper.lr * mhat / (vhat.sqrt() + hyper.eps));
        }
    }
    Ok(())
}

/// Checkpoints of earlier stages a later stage consumes.
#[derive(Clone, Copy, Debug, Default)]
pub struct Upstream<'a> {
    pub decom: Option<&'a Checkpoint>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Batch-mean loss before each update.
    pub losses: Vec<f64>,
}

/// Frozen-decomposition features of one pair.
struct Cached<T> {
    i_low: Tensor<T>,
    r_low: Tensor<T>,
    i_normal: Tensor<T>,
    r_normal: Tensor<T>,
}

fn decompose_all<T: Real>(decom: &Params<f32>, data: &PairDataset) -> Result<Vec<Cached<T>>> {
    data.pairs
        .iter()
        .map(|p| {
            let l = decomposition::decompose(decom, &p.low)?;
            let n = decomposition::decompose(decom, &p.normal)?;
            Ok(Cached {
                i_low: Tensor::from_image(&l.illumination),
                r_low: Tensor::from_image(&l.reflectance),
                i_normal: Tensor::from_image(&n.illumination),
                r_normal: Tensor::from_image(&n.reflectance),
            })
        })
        .collect()
}

enum StageData<T> {
    Decom(Vec<(Tensor<T>, Tensor<T>)>),
    Features(Vec<Cached<T>>),
}

/// Trains one stage from a fresh seeded initialisation.
pub fn train_stage(config: &TrainConfig, data: &PairDataset, upstream: Upstream<'_>) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training dataset is empty".into()));
    }
    match config.precision {
        Precision::F32 => run::<f32>(config, data, upstream, None),
        Precision::F64 => run::<f64>(config, data, upstream, None),
    }
}

/// Like [`train_stage`] but calls `on_step(step, loss)` after every update.
pub fn train_stage_with<F: FnMut(usize, f64)>(
    config: &TrainConfig,
    data: &PairDataset,
    upstream: Upstream<'_>,
    mut on_step: F,
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training dataset is empty".into()));
    }
    match config.precision {
        Precision::F32 => run::<f32>(config, data, upstream, Some(&mut on_step)),
        Precision::F64 => run::<f64>(config, data, upstream, Some(&mut on_step)),
    }
}

fn run<T: Real>(
    config: &TrainConfig,
    data: &PairDataset,
    upstream: Upstream<'_>,
    mut on_step: Option<&mut dyn FnMut(usize, f64)>,
) -> Result<TrainOutcome> {
    let stage = config.stage;
    let stage_data: StageData<T> = match stage {
        Stage::Decom => StageData::Decom(
            data.pairs
                .iter()
                .map(|p| (Tensor::from_image(&p.low), Tensor::from_image(&p.normal)))
                .collect(),
        ),
        Stage::Restore | Stage::Illum => {
            let decom = upstream.decom.ok_or_else(|| {
                Error::Dependency(format!("stage {stage} needs a trained decom checkpoint"))
            })?;
            StageData::Features(decompose_all(decom.expect_stage(Stage::Decom)?, data)?)
        }
    };

    let mut params: Params<T> = stage.init_params(config.seed).cast();
    let mut state = AdamState::new(&params);
    let hyper = AdamHyper::with_lr(config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_da7a);
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(config.steps);
    let decom_w = DecomWeights {
        lambda_rc: config.lambda_rc,
        lambda_is: config.lambda_is,
    };

    for step in 0..config.steps {
        let mut g = Graph::<T>::new();
        let bound = params.bind(&mut g, true);
        let mut terms: Vec<Var> = Vec::with_capacity(config.batch);
        for _ in 0..config.batch {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
            }
            let idx = order.pop().expect("refilled above");
            let l = match &stage_data {
                StageData::Decom(imgs) => {
                    let (low, normal) = &imgs[idx];
                    let low = g.constant(low.clone());
                    let normal = g.constant(normal.clone());
                    let dl = decomposition::forward(&mut g, &bound, low)?;
                    let dn = decomposition::forward(&mut g, &bound, normal)?;
                    decomposition::decom_loss(&mut g, dl, dn, low, normal, decom_w)?
                }
                StageData::Features(feats) => {
                    let f = &feats[idx];
                    let i_low = g.constant(f.i_low.clone());
                    let r_low = g.constant(f.r_low.clone());
                    if stage == Stage::Restore {
                        let r_normal = g.constant(f.r_normal.clone());
                        let out = restoration::forward(&mut g, &bound, i_low, r_low)?;
                        restoration::restore_loss(&mut g, out, r_normal, config.lambda_tv_restore)?
                    } else {
                        let i_normal = g.constant(f.i_normal.clone());
                        let (_, h, w) = f.i_low.dims3()?;
                        let win = CropWindow::random(h, w, config.crop_fraction, &mut rng)?;
                        let fused = fusion::fuse_graph(
                            &mut g,
                            i_low,
                            r_low,
                            CoeffSource::Paired(i_normal),
                            win,
                            RETINEX_EPS,
                        )?;
                        let alphas = curve::backbone_graph(&mut g, &bound, fused.x_rf)?;
                        let out = curve::enhance_graph(&mut g, fused.x_rf, alphas, config.curve_mode)?;
                        illum_total_loss(&mut g, out, i_normal, config.beta, config.illum_tv_weight)?
                            .total
                    }
                }
            };
            terms.push(l);
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = g.add(total, t)?;
        }
        let loss = g.scale(total, T::from_f64(1.0 / config.batch as f64));
        let value = g.value(loss).item().to_f64();
        if !value.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "loss diverged at step {step} ({value})"
            )));
        }
        g.backward(loss)?;
        let grads = bound.grads(&g);
        adam_step(&mut params, &grads, &mut state, hyper)?;
        losses.push(value);
        if let Some(cb) = on_step.as_deref_mut() {
            cb(step, value);
        }
    }

    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(stage, params.cast()),
        losses,
    })
}

/// Writes `step,loss` rows with a header line.
pub fn write_loss_csv(path: impl AsRef<Path>, losses: &[f64]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "step,loss")?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(f, "{i},{l}")?;
    }
    Ok(())
}
