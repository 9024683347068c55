// scratch learning probe: straight runs, lr variations
use drnet_core::data::{generate_image, SceneSpec};
use drnet_core::eval::{mean_average_precision, ScoredBox, EVAL_IOU};
use drnet_core::model::{Model, ModelConfig, Variant};
use drnet_core::heads::MultiHeadConfig;
use drnet_core::optim::SgdConfig;
use drnet_core::postprocess::{detect_image, PostprocessConfig};
use drnet_core::training::{train_model, TrainConfig, TrainSample};
use std::time::Instant;

fn tiny(variant: Variant) -> ModelConfig {
    let mut cfg = ModelConfig {
        variant,
        input_size: 64,
        channels: [8, 16, 24, 32],
        fusion_channels: 20,
        strides: [4, 8, 16, 32],
        anchor_scales: [8.0, 16.0, 32.0, 48.0],
        ratios: vec![1.0, 2.0, 0.5],
        num_classes: 3,
        ..ModelConfig::default()
    };
    if variant == Variant::Ssd4s {
        cfg.deform_head = false;
        cfg.feature_refine = drnet_core::model::FeatureRefineMode::Off;
        cfg.head = MultiHeadConfig::single();
    }
    cfg
}

fn eval_ap(model: &Model, eval_set: &[(drnet_core::tensor::Tensor, Vec<(drnet_core::boxes::BBox, usize)>)]) -> f64 {
    let pp = PostprocessConfig::default();
    let mut dets: Vec<Vec<ScoredBox>> = vec![Vec::new(); 3];
    let mut gts = Vec::new();
    for (i, (img, g)) in eval_set.iter().enumerate() {
        gts.push(g.clone());
        for c in detect_image(model, img, &pp) {
            dets[c.class].push(ScoredBox { image: i, score: c.score, bbox: c.bbox });
        }
    }
    mean_average_precision(&dets, &gts, 3, EVAL_IOU).mean
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let variant = match args.get(1).map(|s| s.as_str()).unwrap_or("drnet") {
        "ssd4s" => Variant::Ssd4s,
        _ => Variant::Drnet,
    };
    let steps: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(4000);
    let lr: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let batch: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(4);
    let seed: u64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(0);

    let spec = SceneSpec { seed: 42, ..SceneSpec::default() };
    let train_set: Vec<TrainSample> = (0..500)
        .map(|i| { let (image, gts) = generate_image(&spec, i); TrainSample { image, gts } })
        .collect();
    let eval_spec = SceneSpec { seed: 43, ..SceneSpec::default() };
    let eval_set: Vec<_> = (0..100).map(|i| generate_image(&eval_spec, i)).collect();

    let t0 = Instant::now();
    let mut model = Model::build(tiny(variant), seed);
    let cfg = TrainConfig {
        steps, batch_size: batch, seed,
        sgd: SgdConfig { base_lr: lr, ..Default::default() },
    };
    let log = train_model(&mut model, &train_set, &cfg).unwrap();
    let ap = eval_ap(&model, &eval_set);
    let train_subset: Vec<_> = (0..100).map(|i| (train_set[i].image.clone(), train_set[i].gts.clone())).collect();
    let train_ap = eval_ap(&model, &train_subset);
    let last = log.last().unwrap();
    println!("{:?} steps={} lr={} batch={} seed={}: AP {:.4} (train-AP {:.4}) | final loss {:.3} | {:.1} min",
        variant, steps, lr, batch, seed, ap, train_ap, last.total,
        t0.elapsed().as_secs_f64()/60.0);
}
