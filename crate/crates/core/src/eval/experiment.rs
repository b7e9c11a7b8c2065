//! Desk-scale experiment harness: pre-train on under-labelled synthetic
//! scenes, simulate touches on support scenes, refine with distillation and
//! both imprinting variants, evaluate on held-out scenes.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::distill::{distill_finetune, DistillConfig};
use super::metrics::{confusion_over, metrics, ClassMapping, MetricsReport};
use crate::classes::{self, PLANT};
use crate::error::{Result, StageExt};
use crate::geometry::{
    filter_training_mask, generate_scene, interaction_mask, simulate_touch, SceneSpec, SyntheticScene,
    DEFAULT_TOUCH_RADIUS,
};
use crate::imprinting::{imprint, pool, PoolingMethod};
use crate::model::{
    backward_passes, cosine_logits, predict, pretrain, FeatureMap, LabeledScene, PretrainConfig,
    SegmentationModel,
};
use crate::par;
use crate::raster::{BinaryMask, LabelMap, RgbImage};

pub const MARGINS: [f64; 6] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ExperimentConfig {
    pub seed: u64,
    pub train_scenes: usize,
    pub support_scenes: usize,
    pub test_scenes: usize,
    /// Fraction of the training scenes held out for the distillation
    /// baseline's best-epoch selection.
    pub validation_fraction: f64,
    pub margin: f64,
    pub scale: f64,
    pub strokes: usize,
    pub touch_radius: f64,
    pub scene: SceneSpec,
    pub pretrain: PretrainConfig,
    pub distill: DistillConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            train_scenes: 20,
            support_scenes: 5,
            test_scenes: 15,
            validation_fraction: 0.2,
            margin: 0.1,
            scale: 16.0,
            strokes: 8,
            touch_radius: DEFAULT_TOUCH_RADIUS,
            scene: SceneSpec::default(),
            pretrain: PretrainConfig::default(),
            distill: DistillConfig::default(),
        }
    }
}

impl ExperimentConfig {
    fn validate(&self) -> Result<()> {
        use crate::error::Error;
        if self.support_scenes == 0 || self.test_scenes == 0 {
            return Err(Error::invalid("need support and test scenes"));
        }
        if self.validation_count() >= self.train_scenes {
            return Err(Error::invalid("validation split leaves no training scenes"));
        }
        self.scene.validate()?;
        self.distill.validate()
    }

    fn validation_count(&self) -> usize {
        (self.train_scenes as f64 * self.validation_fraction).round() as usize
    }

    fn scene_seed(&self, split: u64, index: usize) -> u64 {
        self.seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(split << 32)
            .wrapping_add(index as u64)
    }
}

/// Scenes of one experiment, split by role.
#[derive(Debug, Clone)]
pub struct ExperimentScenes {
    pub train: Vec<SyntheticScene>,
    pub validation: Vec<SyntheticScene>,
    pub support: Vec<SyntheticScene>,
    pub test: Vec<SyntheticScene>,
}

pub fn generate_scenes(cfg: &ExperimentConfig) -> Result<ExperimentScenes> {
    cfg.validate()?;
    let make = |split: u64, n: usize| -> Result<Vec<SyntheticScene>> {
        par::map_range(n, |i| generate_scene(cfg.scene_seed(split, i), &cfg.scene).map(|g| g.scene))
            .into_iter()
            .collect()
    };
    let mut train = make(0, cfg.train_scenes)?;
    let validation = train.split_off(cfg.train_scenes - cfg.validation_count());
    Ok(ExperimentScenes {
        train,
        validation,
        support: make(1, cfg.support_scenes)?,
        test: make(2, cfg.test_scenes)?,
    })
}

/// Masks derived from the simulated touches on the support scenes.
#[derive(Debug, Clone)]
pub struct SupportMasks {
    /// Five-frame interaction masks.
    pub interaction: Vec<BinaryMask>,
    pub hand_points: usize,
}

pub fn touch_support(cfg: &ExperimentConfig, support: &[SyntheticScene]) -> Result<SupportMasks> {
    let mut interaction = Vec::with_capacity(support.len());
    let mut hand_points = 0;
    for (i, scene) in support.iter().enumerate() {
        let mut grid = scene.empty_grid()?;
        let touch_seed = cfg.scene_seed(3, i);
        let trajectory = simulate_touch(scene, &grid, touch_seed, cfg.strokes)?;
        hand_points += trajectory.len();
        let mut rng = ChaCha8Rng::seed_from_u64(touch_seed ^ 0x5eed);
        interaction.push(interaction_mask(scene, &trajectory, &mut grid, cfg.touch_radius, &mut rng)?.combined);
    }
    Ok(SupportMasks {
        interaction,
        hand_points,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MaskStats {
    pub hand_points: usize,
    pub interaction_pixels: usize,
    pub training_pixels: usize,
    /// Fraction of interaction-mask pixels whose ground truth is not plant.
    pub interaction_non_plant: f64,
    pub training_non_plant: f64,
    /// Fraction of the withheld plant pixels covered by the training masks.
    pub withheld_coverage: f64,
}

fn non_plant_fraction(masks: &[BinaryMask], scenes: &[SyntheticScene]) -> f64 {
    let (mut on, mut bad) = (0usize, 0usize);
    for (m, s) in masks.iter().zip(scenes) {
        for (&set, &gt) in m.as_slice().iter().zip(s.gt_labels.as_slice()) {
            on += set as usize;
            bad += (set && gt != PLANT) as usize;
        }
    }
    if on == 0 {
        0.0
    } else {
        bad as f64 / on as f64
    }
}

/// Result of imprinting with one pooling method.
#[derive(Debug, Clone)]
pub struct ImprintOutcome {
    pub model: SegmentationModel,
    pub training_masks: Vec<BinaryMask>,
    pub elapsed_ms: f64,
    pub backward_passes: u64,
}

/// Gradient-free refinement: one forward pass per support image gives both
/// the prediction used to filter the interaction mask and the embeddings
/// that are pooled into the new plant prototype.
pub fn imprint_support(
    model: &SegmentationModel,
    images: &[RgbImage],
    interaction: &[BinaryMask],
    method: PoolingMethod,
) -> Result<ImprintOutcome> {
    let passes = backward_passes();
    let start = Instant::now();
    let mut features: Vec<FeatureMap> = Vec::with_capacity(images.len());
    let mut training_masks = Vec::with_capacity(images.len());
    for (img, m) in images.iter().zip(interaction) {
        let feats = model.extractor.forward(&model.input(img)?).features;
        let pred = predict(&cosine_logits(&feats, &model.head)?);
        let folded = LabelMap::new(
            pred.width(),
            pred.height(),
            pred.as_slice().iter().map(|&c| model.head.root_class(c)).collect(),
        )?;
        training_masks.push(filter_training_mask(m, &folded, PLANT)?);
        features.push(feats);
    }
    let prototype = pool(method, &features, &training_masks)?;
    let head = imprint(&model.head, &prototype, PLANT)?;
    let elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(ImprintOutcome {
        model: SegmentationModel {
            extractor: model.extractor.clone(),
            head,
        },
        training_masks,
        elapsed_ms,
        backward_passes: backward_passes() - passes,
    })
}

/// Predictions folded to the three scene classes and the resulting metrics.
pub fn evaluate(model: &SegmentationModel, scenes: &[SyntheticScene]) -> Result<(MetricsReport, Vec<LabelMap>)> {
    let preds = par::map(scenes, |s| model.predict(&s.rgb))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mapping = ClassMapping::from_head(&model.head, classes::NAMES.len());
    let pairs: Vec<(LabelMap, LabelMap)> = preds
        .iter()
        .zip(scenes)
        .map(|(p, s)| (p.clone(), s.gt_labels.clone()))
        .collect();
    let conf = confusion_over(&pairs, &mapping)?;
    let folded = preds
        .into_iter()
        .map(|p| {
            let data = p.as_slice().iter().map(|&c| mapping.map(c).unwrap_or(c)).collect();
            LabelMap::new(p.width(), p.height(), data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((metrics(&conf, &classes::NAMES), folded))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MethodRow {
    pub method: String,
    pub metrics: MetricsReport,
    /// Refinement wall time; zero for the unrefined model.
    pub elapsed_ms: f64,
    pub backward_passes: u64,
    pub gradient_free: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub rows: Vec<MethodRow>,
    pub mask_stats: MaskStats,
    pub pretrain_loss: Vec<f64>,
    pub distill_best_epoch: usize,
    pub distill_epoch_miou: Vec<f64>,
    pub total_ms: f64,
}

impl ExperimentReport {
    pub fn row(&self, method: &str) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// Aligned plain-text tables: per-class IoU and mean IoU, then recall /
    /// precision, then refinement cost.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let pct = |v: Option<f64>| v.map_or("   n/a".to_string(), |v| format!("{:6.2}", 100.0 * v));
        let _ = writeln!(s, "Per-class and mean IoU [%]");
        let _ = writeln!(s, "{:<10} {:>8} {:>17} {:>8} {:>8}", "Method", "Plant", "Artificial obj.", "Ground", "mIoU");
        for r in &self.rows {
            let m = &r.metrics;
            let _ = writeln!(
                s,
                "{:<10} {:>8} {:>17} {:>8} {:>8}",
                r.method,
                pct(m.iou(0)),
                pct(m.iou(1)),
                pct(m.iou(2)),
                pct(m.mean_iou)
            );
        }
        let _ = writeln!(s, "\nRecall / precision [%]");
        let _ = writeln!(s, "{:<10} {:>15} {:>17} {:>15}", "Method", "Plant", "Artificial obj.", "Ground");
        for r in &self.rows {
            let m = &r.metrics;
            let rp = |c| format!("{} / {}", pct(m.recall(c)).trim(), pct(m.precision(c)).trim());
            let _ = writeln!(s, "{:<10} {:>15} {:>17} {:>15}", r.method, rp(0), rp(1), rp(2));
        }
        let _ = writeln!(s, "\nRefinement cost");
        let _ = writeln!(s, "{:<10} {:>12} {:>10} {:>14}", "Method", "time [ms]", "backward", "gradient-free");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<10} {:>12.1} {:>10} {:>14}",
                r.method, r.elapsed_ms, r.backward_passes, r.gradient_free
            );
        }
        let m = &self.mask_stats;
        let _ = writeln!(
            s,
            "\nMasks: {} hand points, {} interaction px ({:.1}% non-plant), {} training px ({:.1}% non-plant), {:.1}% of withheld plant covered",
            m.hand_points,
            m.interaction_pixels,
            100.0 * m.interaction_non_plant,
            m.training_pixels,
            100.0 * m.training_non_plant,
            100.0 * m.withheld_coverage
        );
        s
    }
}

/// Full experiment output: the serializable report plus everything needed
/// to render qualitative results.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    pub scenes: ExperimentScenes,
    pub pretrained: SegmentationModel,
    pub interaction_masks: Vec<BinaryMask>,
    pub training_masks: Vec<BinaryMask>,
    /// Folded test-set predictions, one entry per report row.
    pub predictions: Vec<Vec<LabelMap>>,
}

fn pretrain_config(cfg: &ExperimentConfig, margin: f64) -> PretrainConfig {
    PretrainConfig {
        margin,
        scale: cfg.scale,
        seed: cfg.seed,
        ..cfg.pretrain
    }
}

fn pretrain_on(scenes: &[SyntheticScene], pcfg: &PretrainConfig) -> Result<(SegmentationModel, Vec<f64>)> {
    let data: Vec<LabeledScene> = scenes.iter().map(|s| s.training_sample()).collect();
    let out = pretrain(&data, pcfg)?;
    Ok((out.model, out.loss_curve))
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let start = Instant::now();
    let scenes = generate_scenes(cfg).stage("generate scenes")?;
    let (model, pretrain_loss) = pretrain_on(&scenes.train, &pretrain_config(cfg, cfg.margin)).stage("pretrain")?;
    let touches = touch_support(cfg, &scenes.support).stage("simulate touches")?;
    let support_images: Vec<RgbImage> = scenes.support.iter().map(|s| s.rgb.clone()).collect();

    let mut rows = Vec::new();
    let mut predictions = Vec::new();
    let mut push = |name: &str, model: &SegmentationModel, elapsed_ms: f64, passes: u64| -> Result<()> {
        let (metrics, preds) = evaluate(model, &scenes.test).stage("evaluate")?;
        rows.push(MethodRow {
            method: name.to_string(),
            metrics,
            elapsed_ms,
            backward_passes: passes,
            gradient_free: passes == 0,
        });
        predictions.push(preds);
        Ok(())
    };
    push("Before", &model, 0.0, 0)?;

    let validation: Vec<(RgbImage, LabelMap)> = scenes
        .validation
        .iter()
        .map(|s| (s.rgb.clone(), s.gt_labels.clone()))
        .collect();
    let passes = backward_passes();
    let md = distill_finetune(&model, &support_images, &touches.interaction, &validation, &cfg.distill)
        .stage("distillation")?;
    push("MD", &md.model, md.train_ms, backward_passes() - passes)?;

    let mut training_masks = Vec::new();
    for (name, method) in [("WI-MAP", PoolingMethod::Map), ("WI-RAP", PoolingMethod::Rap)] {
        let wi = imprint_support(&model, &support_images, &touches.interaction, method).stage("imprint")?;
        push(name, &wi.model, wi.elapsed_ms, wi.backward_passes)?;
        training_masks = wi.training_masks;
    }

    let withheld_total: usize = scenes.support.iter().map(|s| s.withheld.count()).sum();
    let withheld_hit: usize = training_masks
        .iter()
        .zip(&scenes.support)
        .map(|(m, s)| m.as_slice().iter().zip(s.withheld.as_slice()).filter(|(a, b)| **a && **b).count())
        .sum();
    let mask_stats = MaskStats {
        hand_points: touches.hand_points,
        interaction_pixels: touches.interaction.iter().map(BinaryMask::count).sum(),
        training_pixels: training_masks.iter().map(BinaryMask::count).sum(),
        interaction_non_plant: non_plant_fraction(&touches.interaction, &scenes.support),
        training_non_plant: non_plant_fraction(&training_masks, &scenes.support),
        withheld_coverage: if withheld_total == 0 {
            0.0
        } else {
            withheld_hit as f64 / withheld_total as f64
        },
    };
    let report = ExperimentReport {
        config: *cfg,
        rows,
        mask_stats,
        pretrain_loss,
        distill_best_epoch: md.best_epoch,
        distill_epoch_miou: md.epoch_mean_iou,
        total_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    Ok(ExperimentOutcome {
        report,
        scenes,
        pretrained: model,
        interaction_masks: touches.interaction,
        training_masks,
        predictions,
    })
}

/// Mean IoU per method (rows `Before`, `WI-MAP`, `WI-RAP`) and margin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SweepReport {
    pub margins: Vec<f64>,
    pub methods: Vec<String>,
    /// `mean_iou[method][margin]`.
    pub mean_iou: Vec<Vec<Option<f64>>>,
}

impl SweepReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Mean IoU [%] by angular margin m");
        let _ = write!(s, "{:<10}", "Method");
        for m in &self.margins {
            let _ = write!(s, " {:>7.1}", m);
        }
        let _ = writeln!(s);
        for (name, row) in self.methods.iter().zip(&self.mean_iou) {
            let _ = write!(s, "{name:<10}");
            for v in row {
                match v {
                    Some(v) => {
                        let _ = write!(s, " {:>7.2}", 100.0 * v);
                    }
                    None => {
                        let _ = write!(s, " {:>7}", "n/a");
                    }
                }
            }
            let _ = writeln!(s);
        }
        s
    }
}

/// Re-runs pre-training and both imprinting variants for every margin on
/// the same scenes and touches.
pub fn margin_sweep(cfg: &ExperimentConfig, margins: &[f64]) -> Result<SweepReport> {
    let scenes = generate_scenes(cfg).stage("generate scenes")?;
    let touches = touch_support(cfg, &scenes.support).stage("simulate touches")?;
    let support_images: Vec<RgbImage> = scenes.support.iter().map(|s| s.rgb.clone()).collect();
    let methods = ["Before", "WI-MAP", "WI-RAP"];
    let mut table = vec![Vec::with_capacity(margins.len()); methods.len()];
    for &m in margins {
        let (model, _) = pretrain_on(&scenes.train, &pretrain_config(cfg, m)).stage("pretrain")?;
        table[0].push(evaluate(&model, &scenes.test)?.0.mean_iou);
        for (row, method) in [(1, PoolingMethod::Map), (2, PoolingMethod::Rap)] {
            let wi = imprint_support(&model, &support_images, &touches.interaction, method).stage("imprint")?;
            table[row].push(evaluate(&wi.model, &scenes.test)?.0.mean_iou);
        }
    }
    Ok(SweepReport {
        margins: margins.to_vec(),
        methods: methods.iter().map(|s| s.to_string()).collect(),
        mean_iou: table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ExtractorConfig;

    pub(crate) fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            train_scenes: 5,
            support_scenes: 2,
            test_scenes: 2,
            scene: SceneSpec::default().with_resolution(40, 32),
            pretrain: PretrainConfig {
                epochs: 40,
                crop: None,
                extractor: ExtractorConfig {
                    hidden: [8, 8],
                    dim: 6,
                    ..Default::default()
                },
                ..Default::default()
            },
            distill: DistillConfig {
                epochs: 2,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn report_shape() {
        let out = run_experiment(&tiny()).unwrap();
        let r = &out.report;
        let names: Vec<&str> = r.rows.iter().map(|r| r.method.as_str()).collect();
        assert_eq!(names, ["Before", "MD", "WI-MAP", "WI-RAP"]);
        for row in &r.rows {
            assert_eq!(row.metrics.classes.len(), 3);
        }
        assert!(!r.row("MD").unwrap().gradient_free);
        assert!(r.row("WI-MAP").unwrap().gradient_free);
        assert!(r.row("WI-RAP").unwrap().gradient_free);
        assert_eq!(out.predictions.len(), 4);
        assert!(r.to_text().contains("Artificial obj."));
        let (before, _) = evaluate(&out.pretrained, &out.scenes.test).unwrap();
        assert_eq!(before, r.rows[0].metrics);
    }

    #[test]
    fn sweep_shape() {
        let cfg = tiny();
        let s = margin_sweep(&cfg, &[0.0, 0.5]).unwrap();
        assert_eq!(s.mean_iou.len(), 3);
        assert!(s.mean_iou.iter().all(|r| r.len() == 2));
        assert!(s.to_text().contains("WI-RAP"));
    }

    #[test]
    fn rejects_empty_split() {
        let cfg = ExperimentConfig {
            test_scenes: 0,
            ..tiny()
        };
        assert!(run_experiment(&cfg).is_err());
    }
}
