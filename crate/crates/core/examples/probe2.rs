// scratch temporal-trend probe
use drnet_core::data::{generate_image, generate_video, SceneSpec, VideoSequence};
use drnet_core::heads::MultiHeadConfig;
use drnet_core::model::{build_pair, ModelConfig, FeatureRefineMode};
use drnet_core::postprocess::PostprocessConfig;
use drnet_core::temporal::sweep;
use drnet_core::training::{train_pair, TrainConfig, TrainSample};
use std::time::Instant;

fn base_config(deform: bool) -> ModelConfig {
    ModelConfig {
        input_size: 64,
        channels: [8, 16, 24, 32],
        fusion_channels: 20,
        strides: [4, 8, 16, 32],
        anchor_scales: [8.0, 16.0, 32.0, 48.0],
        ratios: vec![1.0, 2.0, 0.5],
        num_classes: 3,
        head: MultiHeadConfig::single(),
        deform_head: deform,
        feature_refine: if deform { FeatureRefineMode::FromAnchorOffsets } else { FeatureRefineMode::Off },
        ..ModelConfig::default()
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(2500);
    let seed: u64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0);
    let speed: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(2.0);

    let spec = SceneSpec { seed: 42, ..SceneSpec::default() };
    let train_set: Vec<TrainSample> = (0..500)
        .map(|i| { let (image, gts) = generate_image(&spec, i); TrainSample { image, gts } })
        .collect();
    let video_spec = SceneSpec { seed: 4242, min_speed: 0.5, max_speed: speed, ..SceneSpec::default() };
    let clips: Vec<VideoSequence> = (0..20).map(|c| generate_video(&video_spec, c, 32)).collect();
    let pp = PostprocessConfig::default();

    for (name, deform) in [("trnet", false), ("tdrnet", true)] {
        let t0 = Instant::now();
        let mut pair = build_pair(&base_config(deform), seed);
        let cfg = TrainConfig { steps, batch_size: 4, seed, ..Default::default() };
        train_pair(&mut pair, &train_set, &cfg).unwrap();
        let train_min = t0.elapsed().as_secs_f64() / 60.0;
        let t1 = Instant::now();
        let rows = sweep(&pair, &clips, &[1, 2, 4, 8], &[1.0, 0.5], &pp);
        for r in &rows {
            println!("{} seed{} speed{}: k={} e={} mAP {:.4} rg_calls {} ms/frame {:.2}",
                name, seed, speed, r.k, r.e, r.map, r.rg_calls, r.ms_per_frame);
        }
        let at_cell = |k: usize, e: f64| rows.iter().find(|r| r.k == k && r.e == e).unwrap().map;
        println!("{} seed{}: drop(e=1) {:.4}, drop(e=0.5) {:.4}  [train {:.1} min, sweep {:.1} min]",
            name, seed, at_cell(1, 1.0) - at_cell(8, 1.0), at_cell(1, 0.5) - at_cell(8, 0.5), train_min, t1.elapsed().as_secs_f64()/60.0);
    }
}
