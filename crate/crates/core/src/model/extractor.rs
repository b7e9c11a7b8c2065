use rand::Rng;
use serde::{Deserialize, Serialize};

use super::features::FeatureMap;
use crate::error::{Error, Result};
use crate::par;
use crate::raster::RgbImage;

/// Channels fed to the per-pixel network: RGB, local luminance contrast and
/// local luminance deviation.
pub const INPUT_CHANNELS: usize = 5;

const CONTEXT_GAIN: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub hidden: [usize; 2],
    pub dim: usize,
    /// Half-width of the box filter applied to the network output.
    pub blur_radius: usize,
    /// Half-width of the window for the contrast/deviation input channels.
    pub context_radius: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            hidden: [32, 32],
            dim: 16,
            blur_radius: 1,
            context_radius: 2,
        }
    }
}

impl ExtractorConfig {
    /// `(out, in)` of the three dense layers.
    pub fn layer_shapes(&self) -> [(usize, usize); 3] {
        [
            (self.hidden[0], INPUT_CHANNELS),
            (self.hidden[1], self.hidden[0]),
            (self.dim, self.hidden[1]),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(o, i)| o * i + o).sum()
    }

    fn stride(&self) -> usize {
        self.hidden[0] + self.hidden[1] + self.dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) || self.dim == 0 {
            return Err(Error::invalid("extractor layers must be non-empty"));
        }
        Ok(())
    }
}

/// Network input computed from an RGB image; independent of the parameters
/// so it can be computed once and cropped for training.
#[derive(Debug, Clone, PartialEq)]
pub struct InputChannels {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl InputChannels {
    pub fn from_image(image: &RgbImage, context_radius: usize) -> Result<Self> {
        let (width, height) = (image.width() as usize, image.height() as usize);
        if width == 0 || height == 0 {
            return Err(Error::invalid("image has zero size"));
        }
        let luma: Vec<f64> = image
            .pixels()
            .map(|p| (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0)
            .collect();
        let r = context_radius as isize;
        let rows = par::map_range(height, |y| {
            let mut row = Vec::with_capacity(width * INPUT_CHANNELS);
            for x in 0..width {
                let p = image.get_pixel(x as u32, y as u32);
                let mut sum = 0.0;
                let mut n = 0.0;
                for_window(x, y, r, width, height, |q| {
                    sum += luma[q];
                    n += 1.0;
                });
                let mean = sum / n;
                let mut var = 0.0;
                for_window(x, y, r, width, height, |q| {
                    let d = luma[q] - mean;
                    var += d * d;
                });
                let dev = (var / n).sqrt();
                row.extend_from_slice(&[
                    p[0] as f64 / 127.5 - 1.0,
                    p[1] as f64 / 127.5 - 1.0,
                    p[2] as f64 / 127.5 - 1.0,
                    CONTEXT_GAIN * (luma[y * width + x] - mean),
                    CONTEXT_GAIN * dev,
                ]);
            }
            row
        });
        Ok(Self {
            width,
            height,
            data: rows.concat(),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if w == 0 || h == 0 || x0 + w > self.width || y0 + h > self.height {
            return Err(Error::invalid("crop outside input"));
        }
        let mut data = Vec::with_capacity(w * h * INPUT_CHANNELS);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * INPUT_CHANNELS;
            data.extend_from_slice(&self.data[start..start + w * INPUT_CHANNELS]);
        }
        Ok(Self {
            width: w,
            height: h,
            data,
        })
    }
}

/// Visits the flat indices of the in-bounds pixels in the square window.
#[inline]
fn for_window(x: usize, y: usize, r: isize, width: usize, height: usize, mut f: impl FnMut(usize)) {
    let y_lo = (y as isize - r).max(0) as usize;
    let y_hi = ((y as isize + r) as usize).min(height - 1);
    let x_lo = (x as isize - r).max(0) as usize;
    let x_hi = ((x as isize + r) as usize).min(width - 1);
    for qy in y_lo..=y_hi {
        for qx in x_lo..=x_hi {
            f(qy * width + qx);
        }
    }
}

#[inline]
fn window_len(x: usize, y: usize, r: usize, width: usize, height: usize) -> f64 {
    let w = (x + r).min(width - 1) - x.saturating_sub(r) + 1;
    let h = (y + r).min(height - 1) - y.saturating_sub(r) + 1;
    (w * h) as f64
}

/// Parameters of the per-pixel network, stored flat in layer order
/// `W1, b1, W2, b2, W3, b3` with row-major `(out, in)` weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorParams {
    config: ExtractorConfig,
    values: Vec<f64>,
}

struct Layer<'a> {
    w: &'a [f64],
    b: &'a [f64],
    out: usize,
    inp: usize,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct Activations {
    width: usize,
    height: usize,
    /// Per pixel: hidden 1, hidden 2 (post tanh) and raw output.
    acts: Vec<f64>,
    norms: Vec<f64>,
    pub features: FeatureMap,
}

impl ExtractorParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(config: ExtractorConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut values = Vec::with_capacity(config.param_count());
        for (out, inp) in config.layer_shapes() {
            let limit = (6.0 / (out + inp) as f64).sqrt();
            values.extend((0..out * inp).map(|_| super::to_storage(rng.random_range(-limit..limit))));
            values.extend(std::iter::repeat_n(0.0, out));
        }
        Ok(Self { config, values })
    }

    pub fn from_values(config: ExtractorConfig, values: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if values.len() != config.param_count() {
            return Err(Error::invalid(format!(
                "extractor expects {} parameters, got {}",
                config.param_count(),
                values.len()
            )));
        }
        Ok(Self { config, values })
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    fn layers(&self) -> [Layer<'_>; 3] {
        let mut rest = self.values.as_slice();
        self.config.layer_shapes().map(|(out, inp)| {
            let (w, r) = rest.split_at(out * inp);
            let (b, r) = r.split_at(out);
            rest = r;
            Layer { w, b, out, inp }
        })
    }

    /// Runs the network on every pixel, box-filters the output and
    /// L2-normalizes it.
    pub fn forward(&self, input: &InputChannels) -> Activations {
        let cfg = self.config;
        let (width, height) = (input.width, input.height);
        let stride = cfg.stride();
        let [l1, l2, l3] = self.layers();
        let (h1n, h2n, d) = (cfg.hidden[0], cfg.hidden[1], cfg.dim);

        let mut acts = vec![0.0; width * height * stride];
        par::for_each_chunk_mut(&mut acts, width * stride, |y, row| {
            for (x, a) in row.chunks_mut(stride).enumerate() {
                let xin = &input.data[(y * width + x) * INPUT_CHANNELS..][..INPUT_CHANNELS];
                let (h1, rest) = a.split_at_mut(h1n);
                let (h2, out) = rest.split_at_mut(h2n);
                dense(&l1, xin, h1);
                h1.iter_mut().for_each(|v| *v = v.tanh());
                dense(&l2, h1, h2);
                h2.iter_mut().for_each(|v| *v = v.tanh());
                dense(&l3, h2, out);
            }
        });

        let r = cfg.blur_radius;
        let off = h1n + h2n;
        let mut feats = vec![0.0; width * height * d];
        let mut norms = vec![0.0; width * height];
        par::for_each_chunk_mut(&mut feats, width * d, |y, row| {
            for (x, f) in row.chunks_mut(d).enumerate() {
                for_window(x, y, r as isize, width, height, |q| {
                    let o = &acts[q * stride + off..q * stride + off + d];
                    f.iter_mut().zip(o).for_each(|(a, b)| *a += b);
                });
                let n = window_len(x, y, r, width, height);
                f.iter_mut().for_each(|v| *v /= n);
            }
        });
        for (f, n) in feats.chunks_mut(d).zip(norms.iter_mut()) {
            let len = super::features::norm(f);
            if len > 1e-12 && len.is_finite() {
                f.iter_mut().for_each(|v| *v /= len);
                *n = len;
            } else {
                // A vanishing output has no direction; pin it to the first axis.
                f.iter_mut().for_each(|v| *v = 0.0);
                f[0] = 1.0;
                *n = 0.0;
            }
        }

        Activations {
            width,
            height,
            acts,
            norms,
            features: FeatureMap::from_parts_unchecked(width, height, d, feats),
        }
    }

    /// Gradient of a scalar loss with respect to the flat parameter vector,
    /// given the loss gradient `dfeat` with respect to the normalized
    /// features of `act`.
    pub fn backward(&self, input: &InputChannels, act: &Activations, dfeat: &[f64]) -> Vec<f64> {
        let cfg = self.config;
        let (width, height) = (act.width, act.height);
        let d = cfg.dim;
        let stride = cfg.stride();
        let (h1n, h2n) = (cfg.hidden[0], cfg.hidden[1]);
        assert_eq!(dfeat.len(), width * height * d);

        // through the normalization: dz = (df - f (f . df)) / |z|, scaled by
        // 1/|window| for the transposed box filter below
        let r = cfg.blur_radius;
        let mut dz = vec![0.0; width * height * d];
        for (i, ((g, f), &n)) in dz
            .chunks_mut(d)
            .zip(act.features.pixels())
            .zip(&act.norms)
            .enumerate()
        {
            if n == 0.0 {
                continue;
            }
            let df = &dfeat[i * d..(i + 1) * d];
            let proj = super::features::dot(f, df);
            let scale = 1.0 / (n * window_len(i % width, i / width, r, width, height));
            for k in 0..d {
                g[k] = (df[k] - f[k] * proj) * scale;
            }
        }

        let [l1, l2, l3] = self.layers();
        let layer_offsets = {
            let shapes = cfg.layer_shapes();
            let mut offs = [0usize; 3];
            let mut acc = 0;
            for (o, (out, inp)) in offs.iter_mut().zip(shapes) {
                *o = acc;
                acc += out * inp + out;
            }
            offs
        };
        let total = cfg.param_count();

        const ROWS_PER_TASK: usize = 4;
        let tasks = height.div_ceil(ROWS_PER_TASK);
        let partials = par::map_range(tasks, |t| {
            let mut grad = vec![0.0; total];
            let mut dout = vec![0.0; d];
            let mut dh2 = vec![0.0; h2n];
            let mut dh1 = vec![0.0; h1n];
            for y in t * ROWS_PER_TASK..((t + 1) * ROWS_PER_TASK).min(height) {
                for x in 0..width {
                    let q = y * width + x;
                    // transposed box filter (the window relation is symmetric)
                    dout.iter_mut().for_each(|v| *v = 0.0);
                    for_window(x, y, r as isize, width, height, |p| {
                        dout.iter_mut().zip(&dz[p * d..(p + 1) * d]).for_each(|(a, b)| *a += b);
                    });
                    let a = &act.acts[q * stride..(q + 1) * stride];
                    let (h1, rest) = a.split_at(h1n);
                    let h2 = &rest[..h2n];
                    let xin = &input.data[q * INPUT_CHANNELS..(q + 1) * INPUT_CHANNELS];

                    dense_backward(&l3, h2, &dout, &mut grad[layer_offsets[2]..], Some(&mut dh2));
                    dh2.iter_mut().zip(h2).for_each(|(g, h)| *g *= 1.0 - h * h);
                    dense_backward(&l2, h1, &dh2, &mut grad[layer_offsets[1]..], Some(&mut dh1));
                    dh1.iter_mut().zip(h1).for_each(|(g, h)| *g *= 1.0 - h * h);
                    dense_backward(&l1, xin, &dh1, &mut grad[layer_offsets[0]..], None);
                }
            }
            grad
        });
        let mut grad = vec![0.0; total];
        for p in partials {
            grad.iter_mut().zip(p).for_each(|(a, b)| *a += b);
        }
        grad
    }
}

#[inline]
fn dense(layer: &Layer<'_>, x: &[f64], out: &mut [f64]) {
    for (k, o) in out.iter_mut().enumerate() {
        let w = &layer.w[k * layer.inp..(k + 1) * layer.inp];
        *o = layer.b[k] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// Accumulates `dW += g x^T`, `db += g` into `grad` (which starts at the
/// layer's weights) and optionally writes `W^T g` into `dx`.
#[inline]
fn dense_backward(layer: &Layer<'_>, x: &[f64], g: &[f64], grad: &mut [f64], dx: Option<&mut Vec<f64>>) {
    let (dw, rest) = grad.split_at_mut(layer.out * layer.inp);
    let db = &mut rest[..layer.out];
    for k in 0..layer.out {
        let gk = g[k];
        if gk == 0.0 {
            continue;
        }
        db[k] += gk;
        dw[k * layer.inp..(k + 1) * layer.inp]
            .iter_mut()
            .zip(x)
            .for_each(|(a, b)| *a += gk * b);
    }
    if let Some(dx) = dx {
        dx.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..layer.out {
            let gk = g[k];
            let w = &layer.w[k * layer.inp..(k + 1) * layer.inp];
            dx.iter_mut().zip(w).for_each(|(a, b)| *a += gk * b);
        }
    }
}

/// Maps an RGB image to its unit-norm pixel embeddings.
pub fn extract_features(image: &RgbImage, params: &ExtractorParams) -> Result<FeatureMap> {
    let input = InputChannels::from_image(image, params.config.context_radius)?;
    Ok(params.forward(&input).features)
}
