//! Helpers shared by integration tests and the acceptance runner.
#![allow(dead_code)]

pub mod grad_cases;

use kind_lce::fusion::{self, FusionInputs};
use kind_lce::image::Image;
use kind_lce::metrics;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Image {
    Image::new(h, w, c, (0..h * w * c).map(|_| rng.random::<f32>()).collect()).unwrap()
}

/// Zero-padded same-size 3×3 convolution, straight from the definition.
pub fn conv_direct(x: &[f32], c: usize, h: usize, w: usize, k: &[f32], b: &[f32]) -> Vec<f32> {
    let o = b.len();
    let mut out = vec![0.0f32; o * h * w];
    for oc in 0..o {
        for y in 0..h {
            for xx in 0..w {
                let mut s = b[oc] as f64;
                for ic in 0..c {
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let (sy, sx) = (y as isize + dy as isize - 1, xx as isize + dx as isize - 1);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            let v = x[ic * h * w + sy as usize * w + sx as usize] as f64;
                            s += v * k[((oc * c + ic) * 3 + dy) * 3 + dx] as f64;
                        }
                    }
                }
                out[(oc * h + y) * w + xx] = s as f32;
            }
        }
    }
    out
}

pub fn oracle_mse_mae(a: &Image, b: &Image) -> (f64, f64) {
    let (mut se, mut ae, mut n) = (0.0, 0.0, 0usize);
    for c in 0..a.channels() {
        for y in 0..a.height() {
            for x in 0..a.width() {
                let d = 255.0 * (a.get(c, y, x) as f64 - b.get(c, y, x) as f64);
                se += d * d;
                ae += d.abs();
                n += 1;
            }
        }
    }
    (se / n as f64, ae / n as f64)
}

/// Explicit 11×11 windows with full 2-D Gaussian weights.
pub fn oracle_ssim(a: &Image, b: &Image) -> f64 {
    let sigma: f64 = 1.5;
    let mut win = [[0.0f64; 11]; 11];
    let mut norm = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            norm += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for c in 0..a.channels() {
        let mut acc = 0.0;
        let mut count = 0;
        for y0 in 0..=a.height() - 11 {
            for x0 in 0..=a.width() - 11 {
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wgt = win[i][j] / norm;
                        mx += wgt * a.get(c, y0 + i, x0 + j) as f64;
                        my += wgt * b.get(c, y0 + i, x0 + j) as f64;
                    }
                }
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wgt = win[i][j] / norm;
                        let dx = a.get(c, y0 + i, x0 + j) as f64 - mx;
                        let dy = b.get(c, y0 + i, x0 + j) as f64 - my;
                        vx += wgt * dx * dx;
                        vy += wgt * dy * dy;
                        cov += wgt * dx * dy;
                    }
                }
                acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total += acc / count as f64;
    }
    total / a.channels() as f64
}

/// Twenty random 16×16 pairs, each test image a random blend of the reference and noise.
pub fn metric_pairs(seed: u64) -> Vec<(Image, Image)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..20)
        .map(|_| {
            let a = random_image(&mut rng, 16, 16, 3);
            let t: f32 = rng.random();
            let noise = random_image(&mut rng, 16, 16, 3);
            let mixed = a.data().iter().zip(noise.data()).map(|(&x, &n)| x * t + n * (1.0 - t)).collect();
            let b = Image::from_clamped(16, 16, 3, mixed).unwrap();
            (a, b)
        })
        .collect()
}

/// Absolute deviations `[mse, mae, psnr, ssim]` of the library metrics from the oracles.
pub fn metric_deviation(a: &Image, b: &Image) -> [f64; 4] {
    let (mse, mae) = oracle_mse_mae(a, b);
    let psnr = 10.0 * (255.0f64 * 255.0 / mse).log10();
    let r = metrics::evaluate(a, b).unwrap();
    [
        (r.mse - mse).abs(),
        (r.mae - mae).abs(),
        (r.psnr - psnr).abs(),
        (r.ssim - oracle_ssim(a, b)).abs(),
    ]
}

/// Constant maps I_low ≡ 0.2, I_normal ≡ 0.4, R_low ≡ 0.6 at crop fraction 0.5. Returns the
/// largest deviation from the hand values `(t, 0.2, 0.6t, 0.6t, 0.6t, 0.2)` with
/// `t = 0.2 / 0.4001`, and whether channel 5 reproduces I_low bit for bit.
pub fn fusion_example(h: usize, w: usize) -> (f64, bool) {
    let i_low = Image::filled(h, w, 1, 0.2).unwrap();
    let i_normal = Image::filled(h, w, 1, 0.4).unwrap();
    let r_low = Image::filled(h, w, 3, 0.6).unwrap();
    let s = fusion::fuse(&FusionInputs {
        i_low: &i_low,
        i_normal: Some(&i_normal),
        r_low: &r_low,
        crop_fraction: 0.5,
        target_mean: 0.5,
        eps: 1e-4,
    })
    .unwrap();
    let t = 0.2 / 0.4001;
    let expect = [t, 0.2, 0.6 * t, 0.6 * t, 0.6 * t, 0.2];
    let mut dev = (s.t_global - t).abs().max((s.t_local - t).abs());
    for (c, &e) in expect.iter().enumerate() {
        for &v in s.channel(c) {
            dev = dev.max((v as f64 - e).abs());
        }
    }
    (dev, s.channel(5) == i_low.data())
}
