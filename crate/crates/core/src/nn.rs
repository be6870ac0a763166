//! Named parameter sets and the small U-shaped network shared by the decomposition and
//! restoration stages.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Parameters keyed by name (`<layer>.w`, `<layer>.b`), iterated in sorted order.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Default for Params<T> {
    fn default() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }
}

impl<T: Real> Params<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor<T>>) -> Self {
        Self { tensors }
    }

    /// Conv layers initialised uniformly in `[−s, s]`, `s = √(1 / (in·9))`, weights then
    /// bias, layers in the given order, from ChaCha8 seeded with `seed`.
    pub fn init(layers: &[ConvSpec], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::new();
        for l in layers {
            let s = (1.0 / (l.in_c * 9) as f64).sqrt();
            let mut draw = |n: usize| -> Vec<T> {
                (0..n).map(|_| T::from_f64(rng.random_range(-s..=s))).collect()
            };
            let w = draw(l.out_c * l.in_c * 9);
            let b = draw(l.out_c);
            p.insert(
                format!("{}.w", l.name),
                Tensor::new(vec![l.out_c, l.in_c, 3, 3], w).expect("consistent"),
            );
            p.insert(format!("{}.b", l.name), Tensor::new(vec![l.out_c], b).expect("consistent"));
        }
        p
    }

    pub fn insert(&mut self, name: String, t: Tensor<T>) {
        self.tensors.insert(name, t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Every parameter multiplied by zero, keeping shapes.
    pub fn zeroed(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// Checks that names and shapes match `layers` exactly.
    pub fn validate(&self, layers: &[ConvSpec]) -> Result<()> {
        if self.tensors.len() != layers.len() * 2 {
            return Err(Error::Shape(format!(
                "expected {} tensors, found {}",
                layers.len() * 2,
                self.tensors.len()
            )));
        }
        for l in layers {
            let check = |name: String, shape: &[usize]| -> Result<()> {
                match self.tensors.get(&name) {
                    Some(t) if t.shape() == shape => Ok(()),
                    Some(t) => Err(Error::Shape(format!(
                        "{name}: expected {shape:?}, found {:?}",
                        t.shape()
                    ))),
                    None => Err(Error::Shape(format!("missing parameter {name}"))),
                }
            };
            check(format!("{}.w", l.name), &[l.out_c, l.in_c, 3, 3])?;
            check(format!("{}.b", l.name), &[l.out_c])?;
        }
        Ok(())
    }

    /// Records every tensor as a graph leaf; tracked when `trainable`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }
}

/// Graph handles for a bound [`Params`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Shape(format!("unbound parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Rebinds `name` to an existing graph node.
    pub fn set(&mut self, name: &str, v: Var) {
        self.vars.insert(name.to_string(), v);
    }

    /// 3×3 convolution with the `<layer>.w` / `<layer>.b` pair.
    pub fn conv<T: Real>(&self, g: &mut Graph<T>, layer: &str, x: Var) -> Result<Var> {
        let w = self.var(&format!("{layer}.w"))?;
        let b = self.var(&format!("{layer}.b"))?;
        g.conv2d(x, w, b)
    }

    /// Collects gradients of all tracked parameters (zeros where none reached them).
    pub fn grads<T: Real>(&self, g: &Graph<T>) -> Params<T> {
        Params::from_map(
            self.vars
                .iter()
                .map(|(k, &v)| {
                    let t = g
                        .grad(v)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(g.value(v).shape()));
                    (k.clone(), t)
                })
                .collect(),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub name: String,
    pub in_c: usize,
    pub out_c: usize,
}

impl ConvSpec {
    pub fn new(name: &str, in_c: usize, out_c: usize) -> Self {
        Self {
            name: name.to_string(),
            in_c,
            out_c,
        }
    }
}

/// Encoder widths of the U-shaped network.
pub const UNET_WIDTHS: [usize; 3] = [16, 32, 32];

/// Three-level encoder with 2×2 average pooling, mirrored decoder with nearest upsampling
/// and skip concatenations, and one sigmoid head per output.
///
/// Inputs are reflect-padded to a multiple of 4 and outputs cropped back.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UNet {
    pub in_channels: usize,
    pub heads: Vec<(String, usize)>,
}

impl UNet {
    pub fn layers(&self) -> Vec<ConvSpec> {
        let [w1, w2, w3] = UNET_WIDTHS;
        let mut v = vec![
            ConvSpec::new("enc1", self.in_channels, w1),
            ConvSpec::new("enc2", w1, w2),
            ConvSpec::new("enc3", w2, w3),
            ConvSpec::new("dec2", w3 + w2, w2),
            ConvSpec::new("dec1", w2 + w1, w1),
        ];
        for (name, c) in &self.heads {
            v.push(ConvSpec::new(name, w1, *c));
        }
        v
    }

    /// One output per head, each `c × H × W` in (0, 1).
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Vec<Var>> {
        let (c, h, w) = g.value(x).dims3()?;
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "network expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let (ph, pw) = (h.div_ceil(4) * 4, w.div_ceil(4) * 4);
        let input = if (ph, pw) != (h, w) {
            g.pad_reflect(x, ph, pw)?
        } else {
            x
        };
        let e1 = p.conv(g, "enc1", input)?;
        let e1 = g.relu(e1);
        let d = g.avg_pool2(e1)?;
        let e2 = p.conv(g, "enc2", d)?;
        let e2 = g.relu(e2);
        let d = g.avg_pool2(e2)?;
        let e3 = p.conv(g, "enc3", d)?;
        let e3 = g.relu(e3);

        let u = g.upsample2(e3)?;
        let u = g.concat(&[u, e2])?;
        let d2 = p.conv(g, "dec2", u)?;
        let d2 = g.relu(d2);
        let u = g.upsample2(d2)?;
        let u = g.concat(&[u, e1])?;
        let d1 = p.conv(g, "dec1", u)?;
        let d1 = g.relu(d1);

        let mut outs = Vec::with_capacity(self.heads.len());
        for (name, _) in &self.heads {
            let y = p.conv(g, name, d1)?;
            let mut y = g.sigmoid(y);
            if (ph, pw) != (h, w) {
                y = g.crop(y, crate::image::CropWindow::full(h, w))?;
            }
            outs.push(y);
        }
        Ok(outs)
    }
}
