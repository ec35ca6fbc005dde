//! A small three-level convolutional encoder-decoder with skip connections.

use ndarray::{concatenate, s, Array1, Array3, Array4, ArrayD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::mask::BinaryMask;

const DICE_SMOOTH: f64 = 1.0;

/// Anything the weak-supervision trainer can fit and snapshot.
pub trait SegModel: Clone + Send + Sync {
    fn num_classes(&self) -> usize;

    /// Per-class probabilities, `classes × H × W`.
    fn predict(&self, image: &ImageTensor) -> Result<Array3<f64>>;

    /// Composite loss on one pair and its gradient, laid out like [`params`](Self::params).
    fn loss_and_grad(&self, image: &ImageTensor, target: &BinaryMask) -> Result<(f64, Vec<ArrayD<f64>>)>;

    fn params(&self) -> Vec<ArrayD<f64>>;

    fn set_params(&mut self, params: Vec<ArrayD<f64>>) -> Result<()>;
}

#[derive(Debug, Clone, PartialEq)]
struct Conv {
    w: Array4<f64>,
    b: Array1<f64>,
}

impl Conv {
    fn init(rng: &mut ChaCha8Rng, cin: usize, cout: usize, k: usize) -> Self {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        Self {
            w: Array4::from_shape_simple_fn((cout, cin, k, k), || normal.sample(rng)),
            b: Array1::zeros(cout),
        }
    }

    fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let (ci, h, w) = x.dim();
        let (co, _, k, _) = self.w.dim();
        let p = k / 2;
        let xs = x.as_slice().expect("standard layout");
        let ws = self.w.as_slice().expect("standard layout");
        let mut out = vec![0.0; co * h * w];
        for o in 0..co {
            let plane = &mut out[o * h * w..(o + 1) * h * w];
            plane.fill(self.b[o]);
            for i in 0..ci {
                let xp = &xs[i * h * w..(i + 1) * h * w];
                for ky in 0..k {
                    let (y0, y1) = (p.saturating_sub(ky), (h + p).saturating_sub(ky).min(h));
                    for kx in 0..k {
                        let (x0, x1) = (p.saturating_sub(kx), (w + p).saturating_sub(kx).min(w));
                        let wv = ws[((o * ci + i) * k + ky) * k + kx];
                        for y in y0..y1 {
                            let src = &xp[(y + ky - p) * w..];
                            let dst = &mut plane[y * w..(y + 1) * w];
                            for xx in x0..x1 {
                                dst[xx] += wv * src[xx + kx - p];
                            }
                        }
                    }
                }
            }
        }
        Array3::from_shape_vec((co, h, w), out).expect("shape matches")
    }

    /// Returns `(dx, dw, db)`.
    fn backward(&self, x: &Array3<f64>, gy: &Array3<f64>) -> (Array3<f64>, Array4<f64>, Array1<f64>) {
        let (ci, h, w) = x.dim();
        let (co, _, k, _) = self.w.dim();
        let p = k / 2;
        let xs = x.as_slice().expect("standard layout");
        let gs = gy.as_slice().expect("standard layout");
        let ws = self.w.as_slice().expect("standard layout");
        let mut gx = vec![0.0; ci * h * w];
        let mut gw = vec![0.0; co * ci * k * k];
        let mut gb = Array1::zeros(co);
        for o in 0..co {
            let gp = &gs[o * h * w..(o + 1) * h * w];
            gb[o] = gp.iter().sum();
            for i in 0..ci {
                let xp = &xs[i * h * w..(i + 1) * h * w];
                let gxp = &mut gx[i * h * w..(i + 1) * h * w];
                for ky in 0..k {
                    let (y0, y1) = (p.saturating_sub(ky), (h + p).saturating_sub(ky).min(h));
                    for kx in 0..k {
                        let (x0, x1) = (p.saturating_sub(kx), (w + p).saturating_sub(kx).min(w));
                        let widx = ((o * ci + i) * k + ky) * k + kx;
                        let wv = ws[widx];
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let row = (y + ky - p) * w;
                            for xx in x0..x1 {
                                let g = gp[y * w + xx];
                                acc += g * xp[row + xx + kx - p];
                                gxp[row + xx + kx - p] += wv * g;
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
        (
            Array3::from_shape_vec((ci, h, w), gx).expect("shape matches"),
            Array4::from_shape_vec((co, ci, k, k), gw).expect("shape matches"),
            gb,
        )
    }
}

fn relu(x: Array3<f64>) -> Array3<f64> {
    x.mapv_into(|v| v.max(0.0))
}

fn relu_back(out: &Array3<f64>, g: Array3<f64>) -> Array3<f64> {
    let mut g = g;
    g.zip_mut_with(out, |gv, &a| {
        if a <= 0.0 {
            *gv = 0.0
        }
    });
    g
}

fn avg_pool2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, h / 2, w / 2), |(k, y, xx)| {
        0.25 * (x[[k, 2 * y, 2 * xx]] + x[[k, 2 * y, 2 * xx + 1]] + x[[k, 2 * y + 1, 2 * xx]] + x[[k, 2 * y + 1, 2 * xx + 1]])
    })
}

fn avg_pool2_back(g: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = g.dim();
    Array3::from_shape_fn((c, 2 * h, 2 * w), |(k, y, x)| 0.25 * g[[k, y / 2, x / 2]])
}

fn upsample2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, 2 * h, 2 * w), |(k, y, xx)| x[[k, y / 2, xx / 2]])
}

fn upsample2_back(g: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = g.dim();
    Array3::from_shape_fn((c, h / 2, w / 2), |(k, y, x)| {
        g[[k, 2 * y, 2 * x]] + g[[k, 2 * y, 2 * x + 1]] + g[[k, 2 * y + 1, 2 * x]] + g[[k, 2 * y + 1, 2 * x + 1]]
    })
}

fn softmax_channels(z: &Array3<f64>) -> Array3<f64> {
    let mut p = z.clone();
    for mut col in p.lanes_mut(Axis(0)) {
        let m = col.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        col.mapv_inplace(|v| (v - m).exp());
        let s = col.sum();
        col.mapv_inplace(|v| v / s);
    }
    p
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    /// Feature channels at full resolution; doubled at the two coarser levels.
    pub channels: usize,
    pub seed: u64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self { channels: 8, seed: 0 }
    }
}

/// Two-class encoder-decoder: full, half and quarter resolution levels
/// joined by average pooling, nearest upsampling and skip concatenation.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyUNet {
    cfg: UNetConfig,
    convs: Vec<Conv>,
}

struct Forward {
    x0: Array3<f64>,
    a1: Array3<f64>,
    p1: Array3<f64>,
    a2: Array3<f64>,
    p2: Array3<f64>,
    a3: Array3<f64>,
    c2: Array3<f64>,
    a4: Array3<f64>,
    c1: Array3<f64>,
    a5: Array3<f64>,
    z: Array3<f64>,
}

impl TinyUNet {
    pub fn new(cfg: UNetConfig) -> Result<Self> {
        if cfg.channels == 0 {
            return Err(Error::InvalidArgument("channels must be positive".into()));
        }
        let c = cfg.channels;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let convs = vec![
            Conv::init(&mut rng, 3, c, 3),
            Conv::init(&mut rng, c, 2 * c, 3),
            Conv::init(&mut rng, 2 * c, 2 * c, 3),
            Conv::init(&mut rng, 4 * c, 2 * c, 3),
            Conv::init(&mut rng, 3 * c, c, 3),
            Conv::init(&mut rng, c, 2, 1),
        ];
        Ok(Self { cfg, convs })
    }

    pub fn config(&self) -> UNetConfig {
        self.cfg
    }

    fn input(image: &ImageTensor) -> Result<Array3<f64>> {
        if image.channels() != 3 {
            return Err(Error::ChannelMismatch(image.channels()));
        }
        let (h, w) = (image.height(), image.width());
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Shape(format!("image sides must be multiples of 4, got {h}x{w}")));
        }
        let px = image.pixels();
        Ok(Array3::from_shape_fn((3, h, w), |(c, y, x)| px[[y, x, c]] - 0.5))
    }

    fn forward(&self, image: &ImageTensor) -> Result<Forward> {
        let x0 = Self::input(image)?;
        let a1 = relu(self.convs[0].forward(&x0));
        let p1 = avg_pool2(&a1);
        let a2 = relu(self.convs[1].forward(&p1));
        let p2 = avg_pool2(&a2);
        let a3 = relu(self.convs[2].forward(&p2));
        let c2 = concatenate![Axis(0), upsample2(&a3), a2];
        let a4 = relu(self.convs[3].forward(&c2));
        let c1 = concatenate![Axis(0), upsample2(&a4), a1];
        let a5 = relu(self.convs[4].forward(&c1));
        let z = self.convs[5].forward(&a5);
        Ok(Forward { x0, a1, p1, a2, p2, a3, c2, a4, c1, a5, z })
    }

    fn backward(&self, f: &Forward, gz: &Array3<f64>) -> Vec<ArrayD<f64>> {
        let c = self.cfg.channels;
        let mut grads: Vec<Option<(Array4<f64>, Array1<f64>)>> = vec![None; 6];
        let (g, gw, gb) = self.convs[5].backward(&f.a5, gz);
        grads[5] = Some((gw, gb));
        let g = relu_back(&f.a5, g);
        let (g, gw, gb) = self.convs[4].backward(&f.c1, &g);
        grads[4] = Some((gw, gb));
        let g_up4 = g.slice(s![..2 * c, .., ..]).to_owned();
        let mut g_a1 = g.slice(s![2 * c.., .., ..]).to_owned();
        let g = relu_back(&f.a4, upsample2_back(&g_up4));
        let (g, gw, gb) = self.convs[3].backward(&f.c2, &g);
        grads[3] = Some((gw, gb));
        let g_up3 = g.slice(s![..2 * c, .., ..]).to_owned();
        let mut g_a2 = g.slice(s![2 * c.., .., ..]).to_owned();
        let g = relu_back(&f.a3, upsample2_back(&g_up3));
        let (g, gw, gb) = self.convs[2].backward(&f.p2, &g);
        grads[2] = Some((gw, gb));
        g_a2 += &avg_pool2_back(&g);
        let g = relu_back(&f.a2, g_a2);
        let (g, gw, gb) = self.convs[1].backward(&f.p1, &g);
        grads[1] = Some((gw, gb));
        g_a1 += &avg_pool2_back(&g);
        let g = relu_back(&f.a1, g_a1);
        let (_, gw, gb) = self.convs[0].backward(&f.x0, &g);
        grads[0] = Some((gw, gb));
        grads
            .into_iter()
            .flat_map(|p| {
                let (w, b) = p.expect("every layer visited");
                [w.into_dyn(), b.into_dyn()]
            })
            .collect()
    }
}

/// Pixelwise cross-entropy plus foreground soft Dice, and the gradient
/// with respect to the two-channel logits.
pub fn composite_loss(z: &Array3<f64>, target: &BinaryMask) -> Result<(f64, Array3<f64>)> {
    let (r, h, w) = z.dim();
    if r != 2 || target.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "logits {r}x{h}x{w} do not match a two-class {}x{} target",
            target.height(),
            target.width()
        )));
    }
    let p = softmax_channels(z);
    let n = (h * w) as f64;
    let (mut ce, mut inter, mut psum, mut ysum) = (0.0, 0.0, 0.0, 0.0);
    for ((y, x), &t) in target.values().indexed_iter() {
        let cls = t as usize;
        ce -= p[[cls, y, x]].max(1e-300).ln();
        let yv = t as u8 as f64;
        inter += p[[1, y, x]] * yv;
        psum += p[[1, y, x]];
        ysum += yv;
    }
    let denom = psum + ysum + DICE_SMOOTH;
    let dice = (2.0 * inter + DICE_SMOOTH) / denom;
    let loss = ce / n + 1.0 - dice;
    let mut gz = Array3::zeros((2, h, w));
    for ((y, x), &t) in target.values().indexed_iter() {
        let yv = t as u8 as f64;
        let (p0, p1) = (p[[0, y, x]], p[[1, y, x]]);
        gz[[0, y, x]] = (p0 - (1.0 - yv)) / n;
        gz[[1, y, x]] = (p1 - yv) / n;
        let gp1 = -(2.0 * yv * denom - (2.0 * inter + DICE_SMOOTH)) / (denom * denom);
        let d = gp1 * p0 * p1;
        gz[[1, y, x]] += d;
        gz[[0, y, x]] -= d;
    }
    Ok((loss, gz))
}

impl SegModel for TinyUNet {
    fn num_classes(&self) -> usize {
        2
    }

    fn predict(&self, image: &ImageTensor) -> Result<Array3<f64>> {
        Ok(softmax_channels(&self.forward(image)?.z))
    }

    fn loss_and_grad(&self, image: &ImageTensor, target: &BinaryMask) -> Result<(f64, Vec<ArrayD<f64>>)> {
        let f = self.forward(image)?;
        let (loss, gz) = composite_loss(&f.z, target)?;
        Ok((loss, self.backward(&f, &gz)))
    }

    fn params(&self) -> Vec<ArrayD<f64>> {
        self.convs
            .iter()
            .flat_map(|c| [c.w.clone().into_dyn(), c.b.clone().into_dyn()])
            .collect()
    }

    fn set_params(&mut self, params: Vec<ArrayD<f64>>) -> Result<()> {
        if params.len() != 2 * self.convs.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, got {}",
                2 * self.convs.len(),
                params.len()
            )));
        }
        let mut convs = Vec::with_capacity(self.convs.len());
        for (conv, pair) in self.convs.iter().zip(params.chunks_exact(2)) {
            if pair[0].shape() != conv.w.shape() || pair[1].shape() != conv.b.shape() {
                return Err(Error::Shape(format!(
                    "parameter shape {:?}/{:?} does not match {:?}/{:?}",
                    pair[0].shape(),
                    pair[1].shape(),
                    conv.w.shape(),
                    conv.b.shape()
                )));
            }
            if pair.iter().any(|t| t.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFinite("non-finite model parameter".into()));
            }
            convs.push(Conv {
                w: pair[0].clone().into_dimensionality().map_err(|e| Error::Shape(e.to_string()))?,
                b: pair[1].clone().into_dimensionality().map_err(|e| Error::Shape(e.to_string()))?,
            });
        }
        self.convs = convs;
        Ok(())
    }
}
