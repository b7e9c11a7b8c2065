use touchprint::eval::{confusion_over, metrics, ClassMapping};
use touchprint::geometry::{generate_scene, SceneSpec};
use touchprint::model::{pretrain, ExtractorConfig, LabeledScene, PretrainConfig};

fn scenes(n: u64, spec: &SceneSpec) -> Vec<LabeledScene> {
    (0..n).map(|s| generate_scene(100 + s, spec).unwrap().scene.training_sample()).collect()
}

#[test]
fn same_seed_same_model() {
    let data = scenes(3, &SceneSpec::default().with_resolution(32, 24));
    let cfg = PretrainConfig {
        epochs: 5,
        crop: Some(16),
        extractor: ExtractorConfig {
            hidden: [6, 6],
            dim: 4,
            ..Default::default()
        },
        ..Default::default()
    };
    let a = pretrain(&data, &cfg).unwrap();
    let b = pretrain(&data, &cfg).unwrap();
    assert_eq!(a.loss_curve, b.loss_curve);
    assert_eq!(a.model, b.model);
    let c = pretrain(&data, &PretrainConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.model, c.model);
}

#[test]
fn twenty_scenes_reach_training_miou() {
    let data = scenes(20, &SceneSpec::default());
    let cfg = PretrainConfig::default();
    assert!(cfg.epochs <= 200);
    let out = pretrain(&data, &cfg).unwrap();
    let pairs: Vec<_> = data
        .iter()
        .map(|s| (out.model.predict(&s.image).unwrap(), s.labels.clone()))
        .collect();
    let report = metrics(&confusion_over(&pairs, &ClassMapping::identity(3)).unwrap(), &[]);
    let miou = report.mean_iou.unwrap();
    println!("training mean IoU {miou:.4} after {} epochs", cfg.epochs);
    assert!(miou > 0.7, "training mean IoU {miou}");
}
