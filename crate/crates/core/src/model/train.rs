use std::cell::Cell;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::extractor::{Activations, ExtractorConfig, ExtractorParams, InputChannels};
use super::features::norm;
use super::head::{cosine_logits, predict, CosineClassifier, ScoreMap};
use super::loss::{arcface_sum, LossReport};
use super::optim::Adam;
use crate::classes;
use crate::error::{Error, Result};
use crate::par;
use crate::raster::{LabelMap, RgbImage};

thread_local! {
    static BACKWARD_PASSES: Cell<u64> = const { Cell::new(0) };
}

/// Number of backward passes run on the current thread so far.
pub fn backward_passes() -> u64 {
    BACKWARD_PASSES.with(|c| c.get())
}

pub(crate) fn count_backward_pass() {
    BACKWARD_PASSES.with(|c| c.set(c.get() + 1));
}

/// Extractor plus cosine head.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationModel {
    pub extractor: ExtractorParams,
    pub head: CosineClassifier,
}

impl SegmentationModel {
    pub fn init(config: ExtractorConfig, class_names: Vec<String>, margin: f64, scale: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let extractor = ExtractorParams::init(config, &mut rng)?;
        let head = CosineClassifier::random(config.dim, class_names, margin, scale, &mut rng)?;
        Ok(Self { extractor, head })
    }

    pub fn input(&self, image: &RgbImage) -> Result<InputChannels> {
        InputChannels::from_image(image, self.extractor.config().context_radius)
    }

    pub fn scores(&self, image: &RgbImage) -> Result<ScoreMap> {
        let input = self.input(image)?;
        cosine_logits(&self.extractor.forward(&input).features, &self.head)
    }

    /// Raw class prediction (imprinted classes are not folded).
    pub fn predict(&self, image: &RgbImage) -> Result<LabelMap> {
        Ok(predict(&self.scores(image)?))
    }

    /// Prediction with every imprinted class replaced by its root class.
    pub fn predict_folded(&self, image: &RgbImage) -> Result<LabelMap> {
        let raw = self.predict(image)?;
        let folded = raw.as_slice().iter().map(|&c| self.head.root_class(c)).collect();
        LabelMap::new(raw.width(), raw.height(), folded)
    }
}

/// Loss gradients in the same flat layouts as the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub extractor: Vec<f64>,
    pub head: Vec<f64>,
}

impl Gradients {
    pub(crate) fn zeros(model: &SegmentationModel) -> Self {
        Self {
            extractor: vec![0.0; model.extractor.values().len()],
            head: vec![0.0; model.head.weights().len()],
        }
    }

    pub(crate) fn add(&mut self, other: &Gradients) {
        self.extractor.iter_mut().zip(&other.extractor).for_each(|(a, b)| *a += b);
        self.head.iter_mut().zip(&other.head).for_each(|(a, b)| *a += b);
    }

    pub fn norms(&self) -> (f64, f64) {
        (norm(&self.extractor), norm(&self.head))
    }
}

/// Pushes `dscores` (gradient with respect to the cosine scores of one
/// image) back to the head rows and the extractor parameters.
pub(crate) fn backprop_scores(
    model: &SegmentationModel,
    input: &InputChannels,
    act: &Activations,
    dscores: &[f64],
) -> Gradients {
    let head = &model.head;
    let (c, d) = (head.class_count(), head.dim());
    let feats = &act.features;
    let mut dhead = vec![0.0; c * d];
    let mut dfeat = vec![0.0; feats.pixel_count() * d];
    for (i, f) in feats.pixels().enumerate() {
        let g = &dscores[i * c..(i + 1) * c];
        let df = &mut dfeat[i * d..(i + 1) * d];
        for (j, &gj) in g.iter().enumerate() {
            if gj == 0.0 {
                continue;
            }
            let w = head.row(j);
            for k in 0..d {
                dhead[j * d + k] += gj * f[k];
                df[k] += gj * w[k];
            }
        }
    }
    count_backward_pass();
    Gradients {
        extractor: model.extractor.backward(input, act, &dfeat),
        head: dhead,
    }
}

/// Mean ArcFace loss over every pixel of the batch and its gradient.
pub fn loss_and_gradients(
    model: &SegmentationModel,
    batch: &[(&InputChannels, &LabelMap)],
) -> Result<(LossReport, Gradients)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let pixels: usize = batch.iter().map(|(_, l)| l.width() * l.height()).sum();
    let mut total = 0.0;
    let mut grads = Gradients::zeros(model);
    let c = model.head.class_count();
    for (input, labels) in batch {
        let act = model.extractor.forward(input);
        let scores = cosine_logits(&act.features, &model.head)?;
        let mut dscores = vec![0.0; scores.pixel_count() * c];
        total += arcface_sum(
            &scores,
            labels,
            model.head.margin(),
            model.head.scale(),
            Some((&mut dscores, pixels as f64)),
        )?;
        grads.add(&backprop_scores(model, input, &act, &dscores));
    }
    let loss = total / pixels as f64;
    if !loss.is_finite() {
        return Err(Error::NumericalFailure(format!("loss is {loss}")));
    }
    let (en, hn) = grads.norms();
    Ok((
        LossReport {
            loss,
            pixels,
            extractor_grad_norm: Some(en),
            head_grad_norm: Some(hn),
        },
        grads,
    ))
}

/// Plain gradient descent update followed by projection of the classifier
/// rows back onto the unit sphere. Parameters stay at `f32` precision.
pub(crate) fn apply_gradients(model: &mut SegmentationModel, grads: &Gradients, lr: f64) -> Result<()> {
    if grads.extractor.iter().chain(&grads.head).any(|g| !g.is_finite()) {
        return Err(Error::NumericalFailure("non-finite gradient".into()));
    }
    for (p, g) in model.extractor.values_mut().iter_mut().zip(&grads.extractor) {
        *p = super::to_storage(*p - lr * g);
    }
    for (p, g) in model.head.weights_mut().iter_mut().zip(&grads.head) {
        *p = super::to_storage(*p - lr * g);
    }
    model.head.project_rows();
    Ok(())
}

fn train_step_inputs(
    model: &mut SegmentationModel,
    batch: &[(&InputChannels, &LabelMap)],
    lr: f64,
) -> Result<LossReport> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::invalid(format!("learning rate {lr} must be non-negative")));
    }
    let (report, grads) = loss_and_gradients(model, batch)?;
    apply_gradients(model, &grads, lr)?;
    Ok(report)
}

/// One full-batch gradient descent step on the ArcFace loss.
pub fn train_step(model: &mut SegmentationModel, batch: &[(&RgbImage, &LabelMap)], lr: f64) -> Result<LossReport> {
    let inputs = batch
        .iter()
        .map(|(img, _)| model.input(img))
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<_> = inputs.iter().zip(batch.iter().map(|(_, l)| *l)).collect();
    train_step_inputs(model, &pairs, lr)
}

/// An image with per-pixel training labels.
#[derive(Debug, Clone)]
pub struct LabeledScene {
    pub image: RgbImage,
    pub labels: LabelMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// Plain gradient descent, [`train_step`].
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub margin: f64,
    pub scale: f64,
    pub optimizer: Optimizer,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Scenes per gradient step.
    pub batch_size: usize,
    /// Side of the random square crop taken from each scene per step; the
    /// whole image when `None`.
    pub crop: Option<usize>,
    pub extractor: ExtractorConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            margin: CosineClassifier::DEFAULT_MARGIN,
            scale: CosineClassifier::DEFAULT_SCALE,
            optimizer: Optimizer::Adam,
            lr: 0.01,
            epochs: 200,
            seed: 0,
            batch_size: 4,
            crop: Some(48),
            extractor: ExtractorConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: SegmentationModel,
    /// Mean loss of each epoch.
    pub loss_curve: Vec<f64>,
}

/// Trains a fresh three-class model on `dataset` with the ArcFace loss.
pub fn pretrain(dataset: &[LabeledScene], cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let names: Vec<String> = classes::NAMES.iter().map(|s| s.to_string()).collect();
    let mut present = vec![false; names.len()];
    for scene in dataset {
        for &l in scene.labels.as_slice() {
            if l >= names.len() {
                return Err(Error::invalid(format!("label {l} outside the pre-training classes")));
            }
            present[l] = true;
        }
    }
    if present.iter().any(|p| !p) {
        return Err(Error::invalid("dataset does not contain every class"));
    }
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(Error::invalid(format!("learning rate {} must be positive", cfg.lr)));
    }
    let mut model = SegmentationModel::init(cfg.extractor, names, cfg.margin, cfg.scale, cfg.seed)?;
    let mut adam = Adam::new(&model, cfg.lr);
    let inputs = par::map(dataset, |s| model.input(&s.image));
    let inputs = inputs.into_iter().collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let crops: Vec<(InputChannels, LabelMap)> = chunk
                .iter()
                .map(|&i| random_crop(&inputs[i], &dataset[i].labels, cfg.crop, &mut rng))
                .collect::<Result<_>>()?;
            let pairs: Vec<_> = crops.iter().map(|(i, l)| (i, l)).collect();
            epoch_loss += match cfg.optimizer {
                Optimizer::Sgd => train_step_inputs(&mut model, &pairs, cfg.lr)?.loss,
                Optimizer::Adam => {
                    let (report, grads) = loss_and_gradients(&model, &pairs)?;
                    adam.step(&mut model, &grads)?;
                    report.loss
                }
            };
            steps += 1;
        }
        loss_curve.push(epoch_loss / steps as f64);
    }
    Ok(PretrainOutcome { model, loss_curve })
}

fn random_crop(
    input: &InputChannels,
    labels: &LabelMap,
    crop: Option<usize>,
    rng: &mut impl Rng,
) -> Result<(InputChannels, LabelMap)> {
    let (w, h) = (input.width(), input.height());
    let Some(side) = crop.filter(|&s| s < w || s < h) else {
        return Ok((input.clone(), labels.clone()));
    };
    let (cw, ch) = (side.min(w), side.min(h));
    let x0 = rng.random_range(0..=w - cw);
    let y0 = rng.random_range(0..=h - ch);
    let sub = input.crop(x0, y0, cw, ch)?;
    let data = (y0..y0 + ch)
        .flat_map(|y| (x0..x0 + cw).map(move |x| (x, y)))
        .map(|(x, y)| labels.get(x, y))
        .collect();
    Ok((sub, LabelMap::new(cw, ch, data)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model(seed: u64) -> SegmentationModel {
        let cfg = ExtractorConfig {
            hidden: [6, 5],
            dim: 4,
            blur_radius: 1,
            context_radius: 1,
        };
        SegmentationModel::init(cfg, vec!["a".into(), "b".into(), "c".into()], 0.1, 4.0, seed).unwrap()
    }

    fn fixture(seed: u64) -> (RgbImage, LabelMap) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = RgbImage::from_fn(5, 4, |_, _| image::Rgb([rng.random(), rng.random(), rng.random()]));
        let labels = LabelMap::new(5, 4, (0..20).map(|_| rng.random_range(0..3)).collect()).unwrap();
        (img, labels)
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_untouched() {
        let mut model = tiny_model(1);
        let before = model.clone();
        let (img, labels) = fixture(2);
        train_step(&mut model, &[(&img, &labels)], 0.0).unwrap();
        assert_eq!(model, before);
    }

    #[test]
    fn rows_stay_unit_after_step() {
        let mut model = tiny_model(3);
        let (img, labels) = fixture(4);
        for _ in 0..3 {
            train_step(&mut model, &[(&img, &labels)], 5.0).unwrap();
            for j in 0..model.head.class_count() {
                assert!((norm(model.head.row(j)) - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn steps_count_backward_passes() {
        let mut model = tiny_model(5);
        let (img, labels) = fixture(6);
        let before = backward_passes();
        train_step(&mut model, &[(&img, &labels), (&img, &labels)], 0.1).unwrap();
        assert_eq!(backward_passes() - before, 2);
    }

    #[test]
    fn empty_batch_and_dataset() {
        let mut model = tiny_model(7);
        assert!(train_step(&mut model, &[], 0.1).is_err());
        assert!(matches!(pretrain(&[], &PretrainConfig::default()), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn pretrain_needs_every_class() {
        let (img, _) = fixture(8);
        let scene = LabeledScene {
            image: img,
            labels: LabelMap::filled(5, 4, 0),
        };
        assert!(pretrain(&[scene], &PretrainConfig::default()).is_err());
    }
}
