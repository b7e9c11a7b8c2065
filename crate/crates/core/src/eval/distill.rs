//! Output-level knowledge distillation fine-tuning, the gradient-based
//! baseline the imprinting methods are compared against.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::metrics::{confusion_over, metrics, ClassMapping};
use crate::classes::{self, PLANT};
use crate::error::{Error, Result};
use crate::model::{
    arcface_pixel_terms, backprop_scores, cosine_logits, predict, Adam, Gradients, InputChannels, LossReport,
    ScoreMap, SegmentationModel,
};
use crate::raster::{BinaryMask, LabelMap, RgbImage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub distill_weight: f64,
    pub temperature: f64,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            distill_weight: 0.5,
            temperature: 1.0,
            lr: 1e-4,
            batch: 5,
            epochs: 15,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.distill_weight >= 0.0
            && self.temperature > 0.0
            && self.lr > 0.0
            && self.batch > 0
            && self.epochs > 0
            && [self.distill_weight, self.temperature, self.lr].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid distillation config {self:?}")))
        }
    }
}

/// One support image prepared for distillation: the frozen teacher's scores
/// and the pseudo-labels (teacher prediction, plant under the mask).
#[derive(Debug, Clone)]
pub struct DistillSample {
    pub input: InputChannels,
    pub teacher_scores: ScoreMap,
    pub pseudo_labels: LabelMap,
}

impl DistillSample {
    pub fn new(teacher: &SegmentationModel, image: &RgbImage, mask: &BinaryMask) -> Result<Self> {
        let input = teacher.input(image)?;
        let teacher_scores = cosine_logits(&teacher.extractor.forward(&input).features, &teacher.head)?;
        if mask.dims() != (input.width(), input.height()) {
            return Err(Error::invalid("mask does not match support image"));
        }
        let pred = predict(&teacher_scores);
        let labels = pred
            .as_slice()
            .iter()
            .zip(mask.as_slice())
            .map(|(&p, &m)| if m { PLANT } else { teacher.head.root_class(p) })
            .collect();
        Ok(Self {
            input,
            pseudo_labels: LabelMap::new(pred.width(), pred.height(), labels)?,
            teacher_scores,
        })
    }
}

fn softmax_t(cos: &[f64], scale: f64, temperature: f64, out: &mut [f64]) {
    let k = scale / temperature;
    let max = cos.iter().copied().fold(f64::NEG_INFINITY, f64::max) * k;
    let mut sum = 0.0;
    for (o, c) in out.iter_mut().zip(cos) {
        *o = (c * k - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

/// `KL(teacher_T || student_T)` for one pixel's cosines.
pub fn pixel_kl(teacher: &[f64], student: &[f64], scale: f64, temperature: f64) -> f64 {
    let mut pt = vec![0.0; teacher.len()];
    let mut ps = vec![0.0; student.len()];
    softmax_t(teacher, scale, temperature, &mut pt);
    softmax_t(student, scale, temperature, &mut ps);
    pt.iter()
        .zip(&ps)
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, s)| t * (t.ln() - s.ln()))
        .sum()
}

/// Mean over all pixels of `L_arc(student, pseudo) + w * KL(teacher_T || student_T)`
/// and its gradient with respect to the student.
pub fn distill_loss_and_gradients(
    student: &SegmentationModel,
    batch: &[&DistillSample],
    cfg: &DistillConfig,
) -> Result<(LossReport, Gradients)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let head = &student.head;
    let c = head.class_count();
    let pixels: usize = batch.iter().map(|s| s.teacher_scores.pixel_count()).sum();
    let norm = 1.0 / pixels as f64;
    let mut grads = Gradients::zeros(student);
    let mut total = 0.0;
    let (s, t, w) = (head.scale(), cfg.temperature, cfg.distill_weight);
    let mut pt = vec![0.0; c];
    let mut ps = vec![0.0; c];
    for sample in batch {
        if sample.teacher_scores.classes() != c {
            return Err(Error::invalid("teacher and student class counts differ"));
        }
        let act = student.extractor.forward(&sample.input);
        let scores = cosine_logits(&act.features, head)?;
        let mut dscores = vec![0.0; scores.pixel_count() * c];
        for (i, &y) in sample.pseudo_labels.as_slice().iter().enumerate() {
            let sc = scores.at(i);
            let g = &mut dscores[i * c..(i + 1) * c];
            total += arcface_pixel_terms(sc, y, head.margin(), s, Some((g, norm)));
            if w > 0.0 {
                let tc = sample.teacher_scores.at(i);
                softmax_t(tc, s, t, &mut pt);
                softmax_t(sc, s, t, &mut ps);
                total += w * pt
                    .iter()
                    .zip(&ps)
                    .filter(|(a, _)| **a > 0.0)
                    .map(|(a, b)| a * (a.ln() - b.ln()))
                    .sum::<f64>();
                for j in 0..c {
                    g[j] += norm * w * (s / t) * (ps[j] - pt[j]);
                }
            }
        }
        grads.add(&backprop_scores(student, &sample.input, &act, &dscores));
    }
    let loss = total * norm;
    if !loss.is_finite() {
        return Err(Error::NumericalFailure(format!("distillation loss is {loss}")));
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

#[derive(Debug, Clone)]
pub struct DistillOutcome {
    /// Student weights from the epoch with the best validation mean IoU.
    pub model: SegmentationModel,
    /// 1-based.
    pub best_epoch: usize,
    pub epoch_mean_iou: Vec<f64>,
    pub epoch_loss: Vec<f64>,
    /// Wall time spent on teacher targets and forward/backward/update,
    /// excluding validation.
    pub train_ms: f64,
}

/// Fine-tunes a copy of `model` on the support images with the full
/// interaction masks as plant pseudo-labels, distilling from the frozen
/// input model. Validation mean IoU (imprinted classes folded, three
/// evaluation classes) selects the returned epoch.
pub fn distill_finetune(
    model: &SegmentationModel,
    support_images: &[RgbImage],
    masks: &[BinaryMask],
    validation: &[(RgbImage, LabelMap)],
    cfg: &DistillConfig,
) -> Result<DistillOutcome> {
    cfg.validate()?;
    if support_images.is_empty() || support_images.len() != masks.len() {
        return Err(Error::invalid("need one mask per support image"));
    }
    let prep = Instant::now();
    let samples = support_images
        .iter()
        .zip(masks)
        .map(|(img, m)| DistillSample::new(model, img, m))
        .collect::<Result<Vec<_>>>()?;
    let mut student = model.clone();
    let mut adam = Adam::new(&student, cfg.lr);
    let mut best: Option<(f64, usize, SegmentationModel)> = None;
    let mut epoch_mean_iou = Vec::with_capacity(cfg.epochs);
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut train_ms = prep.elapsed().as_secs_f64() * 1e3;
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut losses = Vec::new();
        for chunk in samples.chunks(cfg.batch) {
            let batch: Vec<&DistillSample> = chunk.iter().collect();
            let (report, grads) = distill_loss_and_gradients(&student, &batch, cfg)?;
            adam.step(&mut student, &grads)?;
            losses.push(report.loss);
        }
        train_ms += start.elapsed().as_secs_f64() * 1e3;
        epoch_loss.push(losses.iter().sum::<f64>() / losses.len() as f64);

        let miou = if validation.is_empty() {
            0.0
        } else {
            validation_mean_iou(&student, validation)?
        };
        epoch_mean_iou.push(miou);
        if best.as_ref().is_none_or(|(b, _, _)| miou > *b) {
            best = Some((miou, epoch, student.clone()));
        }
    }
    let (_, best_epoch, model) = best.expect("at least one epoch");
    Ok(DistillOutcome {
        model,
        best_epoch,
        epoch_mean_iou,
        epoch_loss,
        train_ms,
    })
}

fn validation_mean_iou(model: &SegmentationModel, validation: &[(RgbImage, LabelMap)]) -> Result<f64> {
    let pairs = validation
        .iter()
        .map(|(img, gt)| Ok((model.predict(img)?, gt.clone())))
        .collect::<Result<Vec<_>>>()?;
    let mapping = ClassMapping::from_head(&model.head, classes::NAMES.len());
    let conf = confusion_over(&pairs, &mapping)?;
    Ok(metrics(&conf, &classes::NAMES).mean_iou.unwrap_or(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{loss_and_gradients, ExtractorConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64) -> SegmentationModel {
        let cfg = ExtractorConfig {
            hidden: [8, 8],
            dim: 6,
            blur_radius: 1,
            context_radius: 1,
        };
        let names = classes::NAMES.iter().map(|s| s.to_string()).collect();
        SegmentationModel::init(cfg, names, 0.1, 8.0, seed).unwrap()
    }

    fn image(seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_fn(6, 5, |_, _| image::Rgb([rng.random(), rng.random(), rng.random()]))
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let cos = [0.3, -0.2, 0.9];
        assert_eq!(pixel_kl(&cos, &cos, 16.0, 1.0), 0.0);
    }

    #[test]
    fn student_equal_to_teacher_has_zero_distillation_term() {
        let m = model(1);
        let img = image(2);
        let mask = BinaryMask::new(6, 5);
        let sample = DistillSample::new(&m, &img, &mask).unwrap();
        let with = distill_loss_and_gradients(&m, &[&sample], &DistillConfig::default()).unwrap().0;
        let cfg0 = DistillConfig {
            distill_weight: 0.0,
            ..Default::default()
        };
        let without = distill_loss_and_gradients(&m, &[&sample], &cfg0).unwrap().0;
        assert_eq!(with.loss, without.loss);
    }

    #[test]
    fn zero_weight_full_mask_is_plain_fine_tuning() {
        let m = model(3);
        let img = image(4);
        let mask = BinaryMask::from_fn(6, 5, |_, _| true);
        let sample = DistillSample::new(&m, &img, &mask).unwrap();
        let cfg = DistillConfig {
            distill_weight: 0.0,
            ..Default::default()
        };
        let (a, ga) = distill_loss_and_gradients(&m, &[&sample], &cfg).unwrap();
        let plant = LabelMap::filled(6, 5, PLANT);
        let input = m.input(&img).unwrap();
        let (b, gb) = loss_and_gradients(&m, &[(&input, &plant)]).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-12);
        for (x, y) in ga.extractor.iter().chain(&ga.head).zip(gb.extractor.iter().chain(&gb.head)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn small_step_decreases_loss() {
        let m = model(5);
        let teacher = m.clone();
        let img = image(6);
        let mask = BinaryMask::from_fn(6, 5, |x, _| x < 3);
        let sample = DistillSample::new(&teacher, &img, &mask).unwrap();
        let cfg = DistillConfig {
            lr: 1e-6,
            ..Default::default()
        };
        let mut student = m.clone();
        // move the student away from the teacher so both terms are active
        student.extractor.values_mut().iter_mut().for_each(|v| *v *= 1.1);
        let (before, grads) = distill_loss_and_gradients(&student, &[&sample], &cfg).unwrap();
        let mut probe = student.clone();
        for (p, g) in probe.extractor.values_mut().iter_mut().zip(&grads.extractor) {
            *p -= cfg.lr * g;
        }
        for (p, g) in probe.head.weights_mut().iter_mut().zip(&grads.head) {
            *p -= cfg.lr * g;
        }
        let after = distill_loss_and_gradients(&probe, &[&sample], &cfg).unwrap().0;
        assert!(after.loss < before.loss, "{} !< {}", after.loss, before.loss);
    }

    #[test]
    fn returns_best_epoch() {
        let m = model(7);
        let imgs = vec![image(8), image(9)];
        let masks = vec![BinaryMask::from_fn(6, 5, |x, _| x < 2); 2];
        let val = vec![(image(10), LabelMap::filled(6, 5, PLANT))];
        let cfg = DistillConfig {
            epochs: 3,
            lr: 1e-2,
            ..Default::default()
        };
        let out = distill_finetune(&m, &imgs, &masks, &val, &cfg).unwrap();
        assert_eq!(out.epoch_mean_iou.len(), 3);
        let best = out.epoch_mean_iou.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.epoch_mean_iou[out.best_epoch - 1], best);
    }

    #[test]
    fn rejects_bad_config() {
        let m = model(1);
        let cfg = DistillConfig {
            temperature: 0.0,
            ..Default::default()
        };
        assert!(distill_finetune(&m, &[image(1)], &[BinaryMask::new(6, 5)], &[], &cfg).is_err());
    }
}
