//! Finite-difference gradient cases (64-bit, h = 1e-4, tolerance 1e-3) shared by the
//! gradient tests and the acceptance runner.

use kind_lce::autodiff::{grad_check, Graph, Tensor, Var};
use kind_lce::curve::{self, CurveMode};
use kind_lce::decomposition::{self, DecomWeights};
use kind_lce::fusion::{self, CoeffSource};
use kind_lce::image::CropWindow;
use kind_lce::losses;
use kind_lce::nn::{Bound, Params};
use kind_lce::restoration;
use kind_lce::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-4;
pub const TOL: f64 = 1e-3;
pub const SEEDS: u64 = 10;

pub type Loss = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;
type Make = Box<dyn Fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Loss)>;

pub struct Case {
    pub name: String,
    make: Make,
}

impl Case {
    /// Worst relative error over all seeds, or a description of the first failing seed.
    pub fn run(&self) -> std::result::Result<f64, String> {
        let mut worst = 0.0f64;
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(7919) + self.name.len() as u64);
            let (params, f) = (self.make)(&mut rng);
            let r = grad_check(&f, &params, H, TOL, None, seed).map_err(|e| format!("{}: {e}", self.name))?;
            if r.checked == 0 {
                return Err(format!("{}: nothing checked", self.name));
            }
            if !r.pass {
                return Err(format!("{} seed {seed}: max rel err {:.3e}", self.name, r.max_rel_err));
            }
            worst = worst.max(r.max_rel_err);
        }
        Ok(worst)
    }
}

/// Every registered op and composite loss.
pub fn registry() -> Vec<Case> {
    let mut cases = Vec::new();
    elementwise_binary(&mut cases);
    elementwise_unary(&mut cases);
    scalar_broadcasts(&mut cases);
    curve_stage(&mut cases);
    conv2d(&mut cases);
    channel_layout_ops(&mut cases);
    spatial_ops(&mut cases);
    reductions(&mut cases);
    pixel_losses(&mut cases);
    illumination_objective(&mut cases);
    decomposition_objective(&mut cases);
    restoration_objective(&mut cases);
    fusion_wrt_reflectance(&mut cases);
    toy_net_illumination_loss(&mut cases);
    literal_curve_mode(&mut cases);
    cases
}

fn add(cases: &mut Vec<Case>, name: &str, make: impl Fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Loss) + 'static) {
    cases.push(Case {
        name: name.to_string(),
        make: Box::new(make),
    });
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values with magnitude in [0.1, 1] and random sign, away from kinks at zero.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = uniform(rng, shape, 0.1, 1.0);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

fn dims(rng: &mut ChaCha8Rng, min_hw: usize) -> [usize; 3] {
    [
        rng.random_range(1..=4),
        rng.random_range(min_hw..=8),
        rng.random_range(min_hw..=8),
    ]
}

/// Contracts `y` with fixed pseudo-random weights so every output element matters.
fn project(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let n: usize = shape.iter().product();
    let w = (0..n).map(|k| (1.3 * k as f64 + 0.7).sin() + 0.2).collect();
    let w = g.constant(Tensor::new(shape, w)?);
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn unary(
    cases: &mut Vec<Case>,
    name: &str,
    gen: fn(&mut ChaCha8Rng, &[usize]) -> Tensor<f64>,
    op: fn(&mut Graph<f64>, Var) -> Var,
) {
    add(cases, name, move |rng| {
        let s = dims(rng, 1);
        let f: Loss = Box::new(move |g, v| {
            let y = op(g, v[0]);
            project(g, y)
        });
        (vec![gen(rng, &s)], f)
    });
}

fn elementwise_binary(cases: &mut Vec<Case>) {
    type Bin = fn(&mut Graph<f64>, Var, Var) -> Result<Var>;
    let ops: [(&str, Bin); 4] = [
        ("add", |g, a, b| g.add(a, b)),
        ("sub", |g, a, b| g.sub(a, b)),
        ("mul", |g, a, b| g.mul(a, b)),
        ("div", |g, a, b| g.div(a, b)),
    ];
    for (name, op) in ops {
        add(cases, name, move |rng| {
            let s = dims(rng, 1);
            let a = off_zero(rng, &s);
            let b = uniform(rng, &s, 0.5, 2.0);
            let f: Loss = Box::new(move |g, v| {
                let y = op(g, v[0], v[1])?;
                project(g, y)
            });
            (vec![a, b], f)
        });
    }
}

fn elementwise_unary(cases: &mut Vec<Case>) {
    unary(cases, "relu", off_zero, |g, x| g.relu(x));
    unary(cases, "abs", off_zero, |g, x| g.abs(x));
    unary(cases, "sigmoid", off_zero, |g, x| g.sigmoid(x));
    unary(cases, "tanh", off_zero, |g, x| g.tanh(x));
    unary(cases, "sqrt", |r, s| uniform(r, s, 0.2, 2.0), |g, x| g.sqrt(x));
    unary(cases, 
        "clamp01",
        |r, s| {
            let mut t = uniform(r, s, 0.05, 0.95);
            for (k, v) in t.data_mut().iter_mut().enumerate() {
                // Exercise both saturated sides too.
                match k % 5 {
                    0 => *v += 1.0,
                    1 => *v -= 1.0,
                    _ => {}
                }
            }
            t
        },
        |g, x| g.clamp01(x),
    );
    unary(cases, "scale", off_zero, |g, x| g.scale(x, -1.7));
    unary(cases, "add_scalar", off_zero, |g, x| g.add_scalar(x, 0.3));
}

fn scalar_broadcasts(cases: &mut Vec<Case>) {
    add(cases, "scale_by", move |rng| {
        let s = dims(rng, 1);
        let f: Loss = Box::new(|g, v| {
            let y = g.scale_by(v[0], v[1])?;
            project(g, y)
        });
        (vec![off_zero(rng, &s), off_zero(rng, &[])], f)
    });
    add(cases, "expand", move |rng| {
        let s = dims(rng, 1);
        let f: Loss = Box::new(move |g, v| {
            let y = g.expand(v[0], &s)?;
            project(g, y)
        });
        (vec![off_zero(rng, &[])], f)
    });
}

fn curve_stage(cases: &mut Vec<Case>) {
    add(cases, "curve", move |rng| {
        let s = [1, rng.random_range(1..=8), rng.random_range(1..=8)];
        let f: Loss = Box::new(|g, v| {
            let y = g.curve(v[0], v[1])?;
            project(g, y)
        });
        (vec![uniform(rng, &s, 0.0, 1.0), uniform(rng, &s, -1.0, 1.0)], f)
    });
}

fn conv2d(cases: &mut Vec<Case>) {
    add(cases, "conv2d", move |rng| {
        let [c, h, w] = dims(rng, 1);
        let o = rng.random_range(1..=4);
        let x = off_zero(rng, &[c, h, w]);
        let k = off_zero(rng, &[o, c, 3, 3]);
        let b = off_zero(rng, &[o]);
        let f: Loss = Box::new(|g, v| {
            let y = g.conv2d(v[0], v[1], v[2])?;
            project(g, y)
        });
        (vec![x, k, b], f)
    });
}

fn channel_layout_ops(cases: &mut Vec<Case>) {
    add(cases, "concat", move |rng| {
        let [c, h, w] = dims(rng, 1);
        let c2 = rng.random_range(1..=4);
        let f: Loss = Box::new(|g, v| {
            let y = g.concat(&[v[0], v[1]])?;
            project(g, y)
        });
        (vec![off_zero(rng, &[c, h, w]), off_zero(rng, &[c2, h, w])], f)
    });
    add(cases, "slice_channels", move |rng| {
        let [c, h, w] = dims(rng, 1);
        let start = rng.random_range(0..c);
        let len = rng.random_range(1..=c - start);
        let f: Loss = Box::new(move |g, v| {
            let y = g.slice_channels(v[0], start, len)?;
            project(g, y)
        });
        (vec![off_zero(rng, &[c, h, w])], f)
    });
    add(cases, "split_channels", move |rng| {
        let s = dims(rng, 1);
        let f: Loss = Box::new(|g, v| {
            let parts = g.split_channels(v[0])?;
            let mut acc = project(g, parts[0])?;
            for (i, &p) in parts.iter().enumerate().skip(1) {
                let q = g.scale(p, 1.0 + i as f64);
                let q = project(g, q)?;
                acc = g.add(acc, q)?;
            }
            Ok(acc)
        });
        (vec![off_zero(rng, &s)], f)
    });
    add(cases, "broadcast_channels", move |rng| {
        let [_, h, w] = dims(rng, 1);
        let c = rng.random_range(1..=4);
        let f: Loss = Box::new(move |g, v| {
            let y = g.broadcast_channels(v[0], c)?;
            project(g, y)
        });
        (vec![off_zero(rng, &[1, h, w])], f)
    });
    add(cases, "channel_mean", move |rng| {
        let s = dims(rng, 1);
        let f: Loss = Box::new(|g, v| {
            let y = g.channel_mean(v[0])?;
            project(g, y)
        });
        (vec![off_zero(rng, &s)], f)
    });
}

fn spatial_ops(cases: &mut Vec<Case>) {
    add(cases, "avg_pool2", move |rng| {
        let c = rng.random_range(1..=4);
        let (h, w) = (2 * rng.random_range(1..=4), 2 * rng.random_range(1..=4));
        let f: Loss = Box::new(|g, v| {
            let y = g.avg_pool2(v[0])?;
            project(g, y)
        });
        (vec![off_zero(rng, &[c, h, w])], f)
    });
    add(cases, "upsample2", move |rng| {
        let c = rng.random_range(1..=4);
        let s = [c, rng.random_range(1..=4), rng.random_range(1..=4)];
        let f: Loss = Box::new(|g, v| {
            let y = g.upsample2(v[0])?;
            project(g, y)
        });
        (vec![off_zero(rng, &s)], f)
    });
    add(cases, "crop", move |rng| {
        let [c, h, w] = dims(rng, 1);
        let win = CropWindow {
            y0: rng.random_range(0..h),
            x0: rng.random_range(0..w),
            height: 1,
            width: 1,
        };
        let win = CropWindow {
            height: rng.random_range(1..=h - win.y0),
            width: rng.random_range(1..=w - win.x0),
            ..win
        };
        let f: Loss = Box::new(move |g, v| {
            let y = g.crop(v[0], win)?;
            project(g, y)
        });
        (vec![off_zero(rng, &[c, h, w])], f)
    });
    add(cases, "pad_reflect", move |rng| {
        let [c, h, w] = dims(rng, 2);
        let (oh, ow) = (rng.random_range(h..2 * h), rng.random_range(w..2 * w));
        let f: Loss = Box::new(move |g, v| {
            let y = g.pad_reflect(v[0], oh, ow)?;
            project(g, y)
        });
        (vec![off_zero(rng, &[c, h, w])], f)
    });
    add(cases, "resize_bilinear", move |rng| {
        let s = dims(rng, 1);
        let (oh, ow) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let f: Loss = Box::new(move |g, v| {
            let y = g.resize_bilinear(v[0], oh, ow)?;
            project(g, y)
        });
        (vec![off_zero(rng, &s)], f)
    });
    add(cases, "diff_x", move |rng| {
        let s = dims(rng, 2);
        let f: Loss = Box::new(|g, v| {
            let y = g.diff_x(v[0])?;
            project(g, y)
        });
        (vec![off_zero(rng, &s)], f)
    });
    add(cases, "diff_y", move |rng| {
        let s = dims(rng, 2);
        let f: Loss = Box::new(|g, v| {
            let y = g.diff_y(v[0])?;
            project(g, y)
        });
        (vec![off_zero(rng, &s)], f)
    });
}

fn reductions(cases: &mut Vec<Case>) {
    add(cases, "sum", move |rng| {
        let s = dims(rng, 1);
        let f: Loss = Box::new(|g, v| {
            let y = g.mul(v[0], v[0])?;
            g.sum(y)
        });
        (vec![off_zero(rng, &s)], f)
    });
    add(cases, "mean", move |rng| {
        let s = dims(rng, 1);
        let f: Loss = Box::new(|g, v| {
            let y = g.mul(v[0], v[0])?;
            g.mean(y)
        });
        (vec![off_zero(rng, &s)], f)
    });
}

fn pixel_losses(cases: &mut Vec<Case>) {
    type L = fn(&mut Graph<f64>, Var, Var) -> Result<Var>;
    let pairs: [(&str, L); 3] = [
        ("mse_loss", losses::mse_loss),
        ("l1_loss", losses::l1_loss),
        ("grad_loss", losses::grad_loss),
    ];
    for (name, l) in pairs {
        add(cases, name, move |rng| {
            let s = dims(rng, 2);
            let f: Loss = Box::new(move |g, v| l(g, v[0], v[1]));
            (vec![uniform(rng, &s, 0.0, 1.0), uniform(rng, &s, 0.0, 1.0)], f)
        });
    }
    type U = fn(&mut Graph<f64>, Var) -> Result<Var>;
    let singles: [(&str, U); 2] = [("tv_raw", losses::tv_raw), ("tv_loss", losses::tv_loss)];
    for (name, l) in singles {
        add(cases, name, move |rng| {
            let s = dims(rng, 2);
            let f: Loss = Box::new(move |g, v| l(g, v[0]));
            (vec![uniform(rng, &s, 0.0, 1.0)], f)
        });
    }
    add(cases, "gradient_magnitude", move |rng| {
        let s = dims(rng, 2);
        let f: Loss = Box::new(|g, v| {
            let m = losses::gradient_magnitude(g, v[0])?;
            project(g, m)
        });
        (vec![uniform(rng, &s, 0.0, 1.0)], f)
    });
}

fn illumination_objective(cases: &mut Vec<Case>) {
    for tv_weight in [1.0, 0.0] {
        add(cases, &format!("illum_total_loss tv={tv_weight}"), move |rng| {
            let s = [1, rng.random_range(2..=8), rng.random_range(2..=8)];
            let f: Loss = Box::new(move |g, v| {
                Ok(losses::illum_total_loss(g, v[0], v[1], losses::DEFAULT_BETA, tv_weight)?.total)
            });
            (vec![uniform(rng, &s, 0.0, 1.0), uniform(rng, &s, 0.0, 1.0)], f)
        });
    }
}

fn decomposition_objective(cases: &mut Vec<Case>) {
    add(cases, "decom_loss", move |rng| {
        let (h, w) = (rng.random_range(2..=8), rng.random_range(2..=8));
        let params = vec![
            uniform(rng, &[1, h, w], 0.1, 0.9),
            uniform(rng, &[3, h, w], 0.1, 0.9),
            uniform(rng, &[1, h, w], 0.1, 0.9),
            uniform(rng, &[3, h, w], 0.1, 0.9),
            uniform(rng, &[3, h, w], 0.0, 1.0),
            uniform(rng, &[3, h, w], 0.0, 1.0),
        ];
        let f: Loss = Box::new(|g, v| {
            decomposition::decom_loss(g, (v[0], v[1]), (v[2], v[3]), v[4], v[5], DecomWeights::default())
        });
        (params, f)
    });
}

fn restoration_objective(cases: &mut Vec<Case>) {
    add(cases, "restore_loss", move |rng| {
        let (h, w) = (rng.random_range(2..=8), rng.random_range(2..=8));
        let params = vec![uniform(rng, &[3, h, w], 0.0, 1.0), uniform(rng, &[3, h, w], 0.0, 1.0)];
        let f: Loss = Box::new(|g, v| restoration::restore_loss(g, v[0], v[1], restoration::DEFAULT_LAMBDA_TV));
        (params, f)
    });
}

fn fusion_wrt_reflectance(cases: &mut Vec<Case>) {
    add(cases, "fuse_graph", move |rng| {
        let (h, w) = (rng.random_range(2..=8), rng.random_range(2..=8));
        let i_low = uniform(rng, &[1, h, w], 0.05, 0.4);
        let i_normal = uniform(rng, &[1, h, w], 0.4, 0.95);
        let win = CropWindow::random(h, w, 0.5, rng).unwrap();
        let f: Loss = Box::new(move |g, v| {
            let fused = fusion::fuse_graph(g, v[0], v[1], CoeffSource::Paired(v[2]), win, 1e-4)?;
            project(g, fused.x_rf)
        });
        (vec![i_low, uniform(rng, &[3, h, w], 0.0, 1.0), i_normal], f)
    });
    add(cases, "mean(x_rf)", move |rng| {
        let (h, w) = (rng.random_range(2..=8), rng.random_range(2..=8));
        let i_low = uniform(rng, &[1, h, w], 0.05, 0.4);
        let i_normal = uniform(rng, &[1, h, w], 0.4, 0.95);
        let f: Loss = Box::new(move |g, v| {
            let il = g.constant(i_low.clone());
            let inorm = g.constant(i_normal.clone());
            let win = CropWindow::center(h, w, 0.5)?;
            let fused = fusion::fuse_graph(g, il, v[0], CoeffSource::Paired(inorm), win, 1e-4)?;
            g.mean(fused.x_rf)
        });
        (vec![uniform(rng, &[3, h, w], 0.0, 1.0)], f)
    });
}

/// Two-channel 4×4 input, one conv producing eight curve maps, iterative curves on channel 1,
/// scored by the full illumination objective.
fn toy_net_illumination_loss(cases: &mut Vec<Case>) {
    add(cases, "toy net", move |rng| {
        let x = uniform(rng, &[2, 4, 4], 0.05, 0.95);
        let target = uniform(rng, &[1, 4, 4], 0.2, 0.9);
        let w = uniform(rng, &[8, 2, 3, 3], -0.4, 0.4);
        let b = uniform(rng, &[8], -0.2, 0.2);
        let f: Loss = Box::new(move |g, v| {
            let xv = g.constant(x.clone());
            let t = g.constant(target.clone());
            let a = g.conv2d(xv, v[0], v[1])?;
            let a = g.tanh(a);
            let mut y = g.slice_channels(xv, 1, 1)?;
            for s in g.split_channels(a)? {
                y = g.curve(y, s)?;
            }
            Ok(losses::illum_total_loss(g, y, t, losses::DEFAULT_BETA, 1.0)?.total)
        });
        (vec![w, b], f)
    });
}

fn literal_curve_mode(cases: &mut Vec<Case>) {
    add(cases, "enhance_graph literal", move |rng| {
        let (h, w) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let x = uniform(rng, &[6, h, w], 0.0, 1.0);
        let a = uniform(rng, &[8, h, w], -1.0, 1.0);
        let f: Loss = Box::new(|g, v| {
            let y = curve::enhance_graph(g, v[0], v[1], CurveMode::Literal)?;
            project(g, y)
        });
        (vec![x, a], f)
    });
}

/// Same wiring as the light-curve backbone, additionally returning every ReLU pre-activation.
fn backbone_with_preacts(g: &mut Graph<f64>, b: &Bound, x: Var) -> Result<(Var, Vec<Var>)> {
    let mut pre = Vec::new();
    let mut relu_conv = |g: &mut Graph<f64>, name: &str, x: Var| -> Result<Var> {
        let y = b.conv(g, name, x)?;
        pre.push(y);
        Ok(g.relu(y))
    };
    let x1 = relu_conv(g, "lce1", x)?;
    let x2 = relu_conv(g, "lce2", x1)?;
    let x3 = relu_conv(g, "lce3", x2)?;
    let x4 = relu_conv(g, "lce4", x3)?;
    let c = g.concat(&[x3, x4])?;
    let x5 = relu_conv(g, "lce5", c)?;
    let c = g.concat(&[x2, x5])?;
    let x6 = relu_conv(g, "lce6", c)?;
    let c = g.concat(&[x1, x6])?;
    let x7 = b.conv(g, "lce7", c)?;
    Ok((g.tanh(x7), pre))
}

/// `mean(α₃)` and the ReLU activation pattern, with layer-1 weights `w1`, `b1`.
fn alpha3_mean(fixed: &Params<f64>, x: &Tensor<f64>, w1: &Tensor<f64>, b1: &Tensor<f64>) -> (f64, Vec<bool>) {
    let mut p = fixed.clone();
    p.insert("lce1.w".into(), w1.clone());
    p.insert("lce1.b".into(), b1.clone());
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let (a, pre) = backbone_with_preacts(&mut g, &b, xv).unwrap();
    let a3 = g.slice_channels(a, 2, 1).unwrap();
    let m = g.mean(a3).unwrap();
    let pattern = pre.iter().flat_map(|&v| g.value(v).data().iter().map(|&z| z > 0.0)).collect();
    (g.value(m).item(), pattern)
}

/// Layer-1 gradient of `mean(α₃)` on a 6×6 input. The backbone is piecewise smooth, so
/// probes whose ±h stencil flips a ReLU are not differentiable there and are excluded; every
/// other probe must match.
pub fn light_curve_first_layer() -> std::result::Result<(f64, usize, usize), String> {
    let mut total_skipped = 0;
    let mut total = 0;
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform(&mut rng, &[6, 6, 6], 0.0, 1.0);
        let params: Params<f64> = curve::init_params(rng.random()).cast();
        let w1 = params.get("lce1.w").unwrap().clone();
        let b1 = params.get("lce1.b").unwrap().clone();

        let mut g = Graph::new();
        let mut bound = params.bind(&mut g, false);
        let (wv, bv) = (g.param(w1.clone()), g.param(b1.clone()));
        bound.set("lce1.w", wv);
        bound.set("lce1.b", bv);
        let xv = g.constant(x.clone());
        let (a, _) = backbone_with_preacts(&mut g, &bound, xv).unwrap();
        let reference = curve::backbone_graph(&mut g, &bound, xv).unwrap();
        if g.value(a) != g.value(reference) {
            return Err("replica diverges from the backbone".into());
        }
        let a3 = g.slice_channels(reference, 2, 1).unwrap();
        let m = g.mean(a3).unwrap();
        g.backward(m).unwrap();
        let analytic = [g.grad(wv).unwrap().clone(), g.grad(bv).unwrap().clone()];

        let (_, base) = alpha3_mean(&params, &x, &w1, &b1);
        let mut work = [w1, b1];
        let mut max_rel = 0.0f64;
        for pi in 0..2 {
            for i in 0..work[pi].numel() {
                let orig = work[pi].data()[i];
                work[pi].data_mut()[i] = orig + H;
                let (fp, pat_p) = alpha3_mean(&params, &x, &work[0], &work[1]);
                work[pi].data_mut()[i] = orig - H;
                let (fm, pat_m) = alpha3_mean(&params, &x, &work[0], &work[1]);
                work[pi].data_mut()[i] = orig;
                total += 1;
                if pat_p != base || pat_m != base {
                    total_skipped += 1;
                    continue;
                }
                let n = (fp - fm) / (2.0 * H);
                let a = analytic[pi].data()[i];
                max_rel = max_rel.max((a - n).abs() / (a.abs() + n.abs() + 1e-12));
            }
        }
        if max_rel > TOL {
            return Err(format!("lce1 seed {seed}: max rel err {max_rel:.3e}"));
        }
        worst = worst.max(max_rel);
    }
    if total_skipped * 10 >= total {
        return Err(format!("{total_skipped} of {total} probes crossed a ReLU kink"));
    }
    Ok((worst, total_skipped, total))
}

