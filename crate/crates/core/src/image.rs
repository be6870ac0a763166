//! Unit-interval raster container and binary PPM (P6) I/O.
//!
//! Samples are stored planar: `data[c * height * width + y * width + x]`.
//! This matches the channels × height × width order used by [`crate::autodiff::Tensor`],
//! so conversion between the two is a plain copy.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    /// Builds an image from planar data, rejecting out-of-range or non-finite samples.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "image dimensions must be positive, got {height}x{width}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "data length {} does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "sample {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Like [`Image::new`] but clamps samples into [0, 1] (NaN becomes 0).
    pub fn from_clamped(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        let data = data.into_iter().map(clamp01).collect();
        Self::new(height, width, channels, data)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![clamp01(value); height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Replicates a single-channel image into three identical channels.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let mut data = Vec::with_capacity(self.data.len() * 3);
        for _ in 0..3 {
            data.extend_from_slice(&self.data);
        }
        Image {
            height: self.height,
            width: self.width,
            channels: 3,
            data,
        }
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Window of `h`×`w` pixels whose top-left corner is `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Image> {
        if h == 0 || w == 0 || y0 + h > self.height || x0 + w > self.width {
            return Err(Error::InvalidArgument(format!(
                "crop window {h}x{w}@({y0},{x0}) outside {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(h * w * self.channels);
        for c in 0..self.channels {
            let plane = self.plane(c);
            for y in y0..y0 + h {
                data.extend_from_slice(&plane[y * self.width + x0..y * self.width + x0 + w]);
            }
        }
        Ok(Image {
            height: h,
            width: w,
            channels: self.channels,
            data,
        })
    }

    pub fn center_crop(&self, fraction: f64) -> Result<Image> {
        let win = CropWindow::center(self.height, self.width, fraction)?;
        self.crop(win.y0, win.x0, win.height, win.width)
    }

    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Result<Image> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::InvalidArgument(format!(
                "resize target must be positive, got {out_h}x{out_w}"
            )));
        }
        let ys = bilinear_taps(self.height, out_h);
        let xs = bilinear_taps(self.width, out_w);
        let mut data = Vec::with_capacity(out_h * out_w * self.channels);
        for c in 0..self.channels {
            let p = self.plane(c);
            for ty in &ys {
                for tx in &xs {
                    let v = bilinear_sample(p, self.width, ty, tx);
                    data.push(clamp01(v as f32));
                }
            }
        }
        Ok(Image {
            height: out_h,
            width: out_w,
            channels: self.channels,
            data,
        })
    }

    /// `clamp(x^gamma + N(0, sigma²), 0, 1)` per sample.
    ///
    /// Noise comes from ChaCha8 seeded via `seed_from_u64(seed)`, drawn in storage order.
    pub fn synth_darken(&self, gamma: f64, noise_sigma: f64, seed: u64) -> Result<Image> {
        if !(gamma >= 1.0) || !(noise_sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "synth_darken needs gamma >= 1 and sigma >= 0, got {gamma}, {noise_sigma}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = self
            .data
            .iter()
            .map(|&v| {
                let mut out = (v as f64).powf(gamma);
                if noise_sigma > 0.0 {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    out += noise_sigma * n;
                }
                clamp01(out as f32)
            })
            .collect();
        Ok(Image {
            data,
            ..self.clone()
        })
    }

    /// Reflect-pads the bottom and right edges up to the given size (no edge repeat).
    pub fn pad_reflect(&self, out_h: usize, out_w: usize) -> Result<Image> {
        if out_h < self.height || out_w < self.width {
            return Err(Error::InvalidArgument("pad target smaller than image".into()));
        }
        let mut data = Vec::with_capacity(out_h * out_w * self.channels);
        for c in 0..self.channels {
            let p = self.plane(c);
            for y in 0..out_h {
                let sy = reflect_index(y, self.height);
                for x in 0..out_w {
                    data.push(p[sy * self.width + reflect_index(x, self.width)]);
                }
            }
        }
        Ok(Image {
            height: out_h,
            width: out_w,
            channels: self.channels,
            data,
        })
    }

    pub fn load_ppm(path: impl AsRef<Path>) -> Result<Image> {
        let bytes = fs::read(path)?;
        Self::decode_ppm(&bytes)
    }

    pub fn save_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.encode_ppm()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
        let mut cur = HeaderCursor { bytes, pos: 0 };
        if bytes.len() < 2 || &bytes[..2] != b"P6" {
            return Err(Error::Parse("missing P6 magic".into()));
        }
        cur.pos = 2;
        let width = cur.next_uint("width")?;
        let height = cur.next_uint("height")?;
        let maxval = cur.next_uint("maxval")?;
        // exactly one whitespace byte separates the header from the raster
        match bytes.get(cur.pos) {
            Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
            _ => return Err(Error::Parse("missing whitespace after maxval".into())),
        }
        if width == 0 || height == 0 {
            return Err(Error::Parse(format!("zero dimension {width}x{height}")));
        }
        if maxval != 255 {
            return Err(Error::UnsupportedFormat(format!("maxval {maxval}, only 255 supported")));
        }
        let n = width * height;
        let raster = &bytes[cur.pos..];
        if raster.len() < n * 3 {
            return Err(Error::Parse(format!(
                "truncated pixel data: {} of {} bytes",
                raster.len(),
                n * 3
            )));
        }
        let mut data = vec![0.0f32; n * 3];
        for (i, px) in raster[..n * 3].chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * n + i] = px[c] as f32 / 255.0;
            }
        }
        Ok(Image {
            height,
            width,
            channels: 3,
            data,
        })
    }

    pub fn encode_ppm(&self) -> Result<Vec<u8>> {
        if self.channels != 3 {
            return Err(Error::ChannelMismatch {
                expected: 3,
                found: self.channels,
            });
        }
        let n = self.height * self.width;
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.reserve(n * 3);
        for i in 0..n {
            for c in 0..3 {
                out.push(quantize(self.data[c * n + i]));
            }
        }
        Ok(out)
    }
}

/// `round(clamp(v, 0, 1) * 255)`, halves rounded away from zero.
pub fn quantize(v: f32) -> u8 {
    (clamp01(v) * 255.0).round() as u8
}

#[inline]
pub(crate) fn clamp01(v: f32) -> f32 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

pub(crate) fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Rectangular window inside an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropWindow {
    pub y0: usize,
    pub x0: usize,
    pub height: usize,
    pub width: usize,
}

impl CropWindow {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            y0: 0,
            x0: 0,
            height,
            width,
        }
    }

    /// Size of a `fraction` crop: `round(fraction * H) x round(fraction * W)`.
    pub fn size(height: usize, width: usize, fraction: f64) -> Result<(usize, usize)> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "crop fraction must lie in (0, 1], got {fraction}"
            )));
        }
        let h = (fraction * height as f64).round() as usize;
        let w = (fraction * width as f64).round() as usize;
        if h == 0 || w == 0 {
            return Err(Error::InvalidArgument(format!(
                "crop fraction {fraction} of {height}x{width} is empty"
            )));
        }
        Ok((h.min(height), w.min(width)))
    }

    pub fn center(height: usize, width: usize, fraction: f64) -> Result<Self> {
        let (h, w) = Self::size(height, width, fraction)?;
        Ok(Self {
            y0: (height - h) / 2,
            x0: (width - w) / 2,
            height: h,
            width: w,
        })
    }

    pub fn random<R: rand::Rng + ?Sized>(
        height: usize,
        width: usize,
        fraction: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let (h, w) = Self::size(height, width, fraction)?;
        Ok(Self {
            y0: rng.random_range(0..=height - h),
            x0: rng.random_range(0..=width - w),
            height: h,
            width: w,
        })
    }
}

/// Source taps for one output coordinate under the half-pixel convention.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub i0: usize,
    pub i1: usize,
    pub frac: f64,
}

pub(crate) fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            Tap {
                i0,
                i1,
                frac: src - i0 as f64,
            }
        })
        .collect()
}

#[inline]
fn bilinear_sample(plane: &[f32], width: usize, ty: &Tap, tx: &Tap) -> f64 {
    let at = |y: usize, x: usize| plane[y * width + x] as f64;
    let top = at(ty.i0, tx.i0) * (1.0 - tx.frac) + at(ty.i0, tx.i1) * tx.frac;
    let bot = at(ty.i1, tx.i0) * (1.0 - tx.frac) + at(ty.i1, tx.i1) * tx.frac;
    top * (1.0 - ty.frac) + bot * ty.frac
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn skip_ws_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&b) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn next_uint(&mut self, what: &str) -> Result<usize> {
        let start = self.pos;
        self.skip_ws_and_comments();
        if self.pos == start {
            return Err(Error::Parse(format!("expected whitespace before {what}")));
        }
        let digits_start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if self.pos == digits_start {
            return Err(Error::Parse(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[digits_start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse(format!("bad {what}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ppm(w: usize, h: usize, px: &[u8]) -> Vec<u8> {
        let mut v = format!("P6\n{w} {h}\n255\n").into_bytes();
        v.extend_from_slice(px);
        v
    }

    #[test]
    fn decode_single_pixels() {
        let img = Image::decode_ppm(&ppm(1, 1, &[0, 0, 0])).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.0));
        let img = Image::decode_ppm(&ppm(1, 1, &[255, 255, 255])).unwrap();
        assert!(img.data().iter().all(|&v| v == 1.0));
        let img = Image::decode_ppm(&ppm(1, 1, &[128, 64, 32])).unwrap();
        let expect = [0.50196, 0.25098, 0.12549];
        for (a, b) in img.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn header_comments_are_skipped() {
        let bytes = b"P6 # a comment\n2 1\n# another\n255\n\x01\x02\x03\x04\x05\x06";
        let img = Image::decode_ppm(bytes).unwrap();
        assert_eq!((img.height(), img.width()), (1, 2));
        assert_eq!(img.encode_ppm().unwrap()[11..], bytes[bytes.len() - 6..]);
    }

    #[test]
    fn decode_errors() {
        assert!(matches!(Image::decode_ppm(b"P5\n1 1\n255\n\0"), Err(Error::Parse(_))));
        assert!(matches!(Image::decode_ppm(b"P6\n1 x\n255\n\0\0\0"), Err(Error::Parse(_))));
        assert!(matches!(Image::decode_ppm(&ppm(2, 2, &[0; 11])), Err(Error::Parse(_))));
        assert!(matches!(
            Image::decode_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0"),
            Err(Error::UnsupportedFormat(_))
        ));
    }

    #[test]
    fn encode_quantizes_half_up() {
        let img = Image::filled(1, 1, 3, 0.5).unwrap();
        let bytes = img.encode_ppm().unwrap();
        assert_eq!(&bytes[bytes.len() - 3..], &[128, 128, 128]);
        let img = Image::filled(2, 2, 3, 0.0).unwrap();
        let bytes = img.encode_ppm().unwrap();
        assert!(bytes[bytes.len() - 12..].iter().all(|&b| b == 0));
    }

    #[test]
    fn encode_rejects_gray() {
        let img = Image::filled(2, 2, 1, 0.3).unwrap();
        assert!(matches!(
            img.encode_ppm(),
            Err(Error::ChannelMismatch { expected: 3, found: 1 })
        ));
    }

    #[test]
    fn new_validates() {
        assert!(Image::new(1, 1, 1, vec![1.5]).is_err());
        assert!(Image::new(1, 2, 1, vec![0.5]).is_err());
        assert!(Image::new(0, 2, 1, vec![]).is_err());
        assert!(Image::new(1, 1, 2, vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = Image::new(2, 3, 1, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let same = img.resize_bilinear(2, 3).unwrap();
        for (a, b) in img.data().iter().zip(same.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        let c = Image::filled(3, 5, 3, 0.3).unwrap();
        for (h, w) in [(1, 1), (7, 2), (12, 13)] {
            let r = c.resize_bilinear(h, w).unwrap();
            assert!(r.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
        }
        assert!(img.resize_bilinear(0, 3).is_err());
    }

    #[test]
    fn resize_half_pixel_weights() {
        let img = Image::new(1, 2, 1, vec![0.0, 1.0]).unwrap();
        let r = img.resize_bilinear(1, 4).unwrap();
        for (a, b) in r.data().iter().zip([0.0, 0.25, 0.75, 1.0]) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn center_crop_rules() {
        let data: Vec<f32> = (0..25).map(|i| i as f32 / 25.0).collect();
        let img = Image::new(5, 5, 1, data).unwrap();
        assert_eq!(img.center_crop(1.0).unwrap(), img);
        let c = img.center_crop(0.5).unwrap();
        assert_eq!((c.height(), c.width()), (3, 3));
        assert_eq!(c.get(0, 0, 0), img.get(0, 1, 1));

        let data: Vec<f32> = (0..16).map(|i| i as f32 / 16.0).collect();
        let img = Image::new(4, 4, 1, data).unwrap();
        let c = img.center_crop(0.5).unwrap();
        assert_eq!(c.data(), &[5.0 / 16.0, 6.0 / 16.0, 9.0 / 16.0, 10.0 / 16.0]);

        assert!(img.center_crop(0.0).is_err());
        assert!(img.center_crop(1.5).is_err());
        assert!(img.center_crop(0.01).is_err());
    }

    #[test]
    fn darken_cases() {
        let img = Image::new(1, 3, 1, vec![0.2, 0.5, 0.9]).unwrap();
        assert_eq!(img.synth_darken(1.0, 0.0, 3).unwrap(), img);
        let d = img.synth_darken(2.0, 0.0, 3).unwrap();
        assert!((d.get(0, 0, 1) - 0.25).abs() < 1e-7);
        let a = img.synth_darken(2.5, 0.1, 42).unwrap();
        let b = img.synth_darken(2.5, 0.1, 42).unwrap();
        assert_eq!(a, b);
        assert!(img.synth_darken(0.5, 0.0, 0).is_err());
    }

    #[test]
    fn reflect_padding() {
        assert_eq!(
            (0..7).map(|i| reflect_index(i, 3)).collect::<Vec<_>>(),
            vec![0, 1, 2, 1, 0, 1, 2]
        );
        let img = Image::new(1, 3, 1, vec![0.1, 0.2, 0.3]).unwrap();
        let p = img.pad_reflect(2, 4).unwrap();
        assert_eq!(p.data(), &[0.1, 0.2, 0.3, 0.2, 0.1, 0.2, 0.3, 0.2]);
    }
}
