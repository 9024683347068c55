//! Acceptance suite: one test per criterion, each printing a PASS line
//! with its evidence once it holds.
//!
//! Criteria:
//!   c1  oracle equivalence of the numeric kernels and discrete algorithms
//!   c2  finite-difference gradient checks, per op and through the full
//!       micro network
//!   c3  structural reduction chain between the variants
//!   c4  desk-scale learning beats the plain baseline
//!   c5  temporal accuracy trends over the key-frame duration
//!   c6  reference-generator cost accounting
//!   c7  bit-exact determinism of checkpoints, detections, and sweeps
//!   c8  post-processing contract (thresholds, idempotence, validity)

mod support;

use drnet_core::boxes::{BBox, OffsetCoding};
use drnet_core::matching::{hard_negative_mine, match_anchors, MatchResult, MATCH_IOU};
use drnet_core::model::{FeatureRefineMode, Model, Variant};
use drnet_core::postprocess::{nms, Candidate, PostprocessConfig};
use drnet_core::reference;
use drnet_core::tape::Tape;
use drnet_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use support::*;

// ── Criterion 1: oracle equivalence ─────────────────────────────────────

#[test]
fn c1_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC1);
    let instances = 200;

    // conv2d against the six-nested-loop oracle
    for _ in 0..instances {
        let (input, weight, bias, geom) = random_conv_instance(&mut rng);
        let got = drnet_core::conv::conv2d_forward(&input, &weight, &bias, &geom);
        let want = reference::conv2d_naive(&input, &weight, &bias, geom.stride, geom.padding, geom.dilation);
        assert!(got.max_abs_diff(&want) <= 1e-12, "conv2d disagrees with oracle");
    }

    // deformable convolution against the per-tap bilinear oracle
    for _ in 0..instances {
        let (input, weight, bias, offsets, geom) = random_deform_instance(&mut rng, false);
        let got = drnet_core::sampling::deform_conv2d_forward(&input, &weight, &bias, &offsets, &geom);
        let want = reference::deform_conv2d_naive(&input, &weight, &bias, &offsets, geom.stride, geom.padding, geom.dilation);
        assert!(got.max_abs_diff(&want) <= 1e-12, "deform_conv2d disagrees with oracle");
    }

    // the 1x1 offset convolution (feature location refinement path)
    for _ in 0..instances {
        let ci = rng.gen_range(1..=8);
        let co = 2 * 9;
        let (h, w) = (rng.gen_range(1..=5), rng.gen_range(1..=5));
        let ar = random_tensor(&mut rng, vec![1, ci, h, w], 1.5);
        let weight = random_tensor(&mut rng, vec![co, ci, 1, 1], 1.0);
        let bias = random_tensor(&mut rng, vec![co], 0.5);
        let mut tape = Tape::new();
        let ar_id = tape.leaf(ar.clone(), false);
        let w_id = tape.leaf(weight.clone(), false);
        let b_id = tape.leaf(bias.clone(), false);
        let out = drnet_core::heads::feature_location_refine(
            &mut tape,
            ar_id,
            &[drnet_core::heads::ConvParams { weight: w_id, bias: b_id }],
            &drnet_core::heads::MultiHeadConfig::single(),
        )[0];
        let want = reference::conv2d_naive(&ar, &weight, &bias, 1, 0, 1);
        assert!(tape.value(out).max_abs_diff(&want) <= 1e-12, "offset conv disagrees with oracle");
    }

    // greedy NMS against the repeated-scan oracle (exact index sets)
    for _ in 0..instances {
        let n = rng.gen_range(0..40);
        let cands: Vec<Candidate> = (0..n)
            .map(|i| Candidate {
                anchor: i,
                class: 0,
                score: (rng.gen_range(0..60) as f64) / 60.0,
                bbox: random_box(&mut rng),
            })
            .collect();
        let kept: Vec<usize> = nms(&cands, 0.45).iter().map(|c| c.anchor).collect();
        let naive: Vec<(f64, BBox, usize)> = cands.iter().map(|c| (c.score, c.bbox, c.anchor)).collect();
        let want: Vec<usize> = reference::nms_naive(&naive, 0.45).into_iter().map(|i| cands[i].anchor).collect();
        assert_eq!(kept, want, "NMS disagrees with oracle");
    }

    // two-phase matching against the exhaustive oracle
    for _ in 0..instances {
        let n_anchors = rng.gen_range(1..=64);
        let n_gts = rng.gen_range(0..=6);
        let anchors: Vec<BBox> = (0..n_anchors).map(|_| random_box(&mut rng)).collect();
        let gts: Vec<BBox> = (0..n_gts).map(|_| random_box(&mut rng)).collect();
        let got = match_anchors(&anchors, &gts, MATCH_IOU);
        assert_eq!(got.matched_gt, reference::match_naive(&anchors, &gts, MATCH_IOU), "matching disagrees with oracle");
    }

    // hard negative mining against the full-sort oracle
    for _ in 0..instances {
        let n = rng.gen_range(1..60);
        let losses: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..5.0)).collect();
        let mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.25)).collect();
        let matched_gt: Vec<Option<usize>> = mask.iter().map(|&p| p.then_some(0)).collect();
        let positives = mask.iter().filter(|&&p| p).count();
        let m = MatchResult { matched_gt, positives };
        let delta = rng.gen_range(1..4);
        let got = hard_negative_mine(&losses, &m, delta);
        let is_bg: Vec<bool> = mask.iter().map(|&p| !p).collect();
        let want = reference::hard_negatives_naive(&losses, &is_bg, delta * positives);
        assert_eq!(got, want, "mining disagrees with oracle");
    }

    // average precision against the enumeration oracle
    for _ in 0..500 {
        let n_dets = rng.gen_range(0..=10);
        let n_gts = rng.gen_range(1..=4);
        let gts: Vec<BBox> = (0..n_gts).map(|_| random_box(&mut rng)).collect();
        let dets: Vec<(f64, BBox)> = (0..n_dets)
            .map(|_| ((rng.gen_range(0..50) as f64) / 50.0, random_box(&mut rng)))
            .collect();
        let scored: Vec<drnet_core::eval::ScoredBox> = dets
            .iter()
            .map(|&(score, bbox)| drnet_core::eval::ScoredBox { image: 0, score, bbox })
            .collect();
        let got = drnet_core::eval::average_precision(&scored, &[gts.clone()], 0.5).unwrap();
        let want = reference::average_precision_naive(&dets, &gts, 0.5);
        assert!((got - want).abs() <= 1e-10, "AP {} vs oracle {}", got, want);
    }

    println!("[c1] PASS oracle equivalence: conv/deform/offset-conv/NMS/matching/mining x200, AP x500");
}

// ── Criterion 2: gradient suite ─────────────────────────────────────────

#[test]
fn c2_gradient_suite() {
    let n = 20;

    check_op_grads("add", n, |rng| {
        let shape = random_shape(rng);
        vec![random_tensor(rng, shape.clone(), 2.0), random_tensor(rng, shape, 2.0)]
    }, |tape, ids| {
        let y = tape.add(ids[0], ids[1]);
        weighted_sum(tape, y, 0xA)
    });

    check_op_grads("sub", n, |rng| {
        let shape = random_shape(rng);
        vec![random_tensor(rng, shape.clone(), 2.0), random_tensor(rng, shape, 2.0)]
    }, |tape, ids| {
        let y = tape.sub(ids[0], ids[1]);
        weighted_sum(tape, y, 0xB)
    });

    check_op_grads("mul", n, |rng| {
        let shape = random_shape(rng);
        vec![random_tensor(rng, shape.clone(), 2.0), random_tensor(rng, shape, 2.0)]
    }, |tape, ids| {
        let y = tape.mul(ids[0], ids[1]);
        weighted_sum(tape, y, 0xC)
    });

    check_op_grads("scale", n, |rng| {
        let shape = random_shape(rng);
        vec![random_tensor(rng, shape, 2.0)]
    }, |tape, ids| {
        let y = tape.scale(ids[0], 0.37);
        weighted_sum(tape, y, 0xD)
    });

    check_op_grads("relu", n, |rng| {
        let shape = random_shape(rng);
        vec![random_tensor_away_from(rng, shape, 2.0, 0.0, 5e-3)]
    }, |tape, ids| {
        let y = tape.relu(ids[0]);
        weighted_sum(tape, y, 0xE)
    });

    check_op_grads("smooth_l1", n, |rng| {
        let shape = random_shape(rng);
        vec![random_tensor_away_from(rng, shape, 2.5, 1.0, 5e-3)]
    }, |tape, ids| {
        let y = tape.smooth_l1(ids[0]);
        tape.sum(y)
    });

    check_op_grads("conv2d", n, |rng| {
        let (input, weight, bias, _) = random_conv_instance(rng);
        vec![input, weight, bias]
    }, |tape, ids| {
        // geometry is re-derived from the weight shape; keep it simple with
        // stride 1, same padding, dilation 1 for the gradient pass
        let k = tape.value(ids[1]).shape()[2];
        let y = tape.conv2d(ids[0], ids[1], ids[2], 1, k / 2, 1);
        weighted_sum(tape, y, 0xF)
    });

    check_op_grads("conv2d_strided_dilated", n, |rng| {
        let ci = rng.gen_range(1..=2);
        let co = rng.gen_range(1..=2);
        vec![
            random_tensor(rng, vec![1, ci, 7, 7], 1.5),
            random_tensor(rng, vec![co, ci, 3, 3], 1.0),
            random_tensor(rng, vec![co], 0.5),
        ]
    }, |tape, ids| {
        let y = tape.conv2d(ids[0], ids[1], ids[2], 2, 1, 2);
        weighted_sum(tape, y, 0x10)
    });

    check_op_grads("deform_conv2d", n, |rng| {
        let (input, weight, bias, offsets, _) = random_deform_instance(rng, true);
        vec![input, weight, bias, offsets]
    }, |tape, ids| {
        let k = tape.value(ids[1]).shape()[2];
        let y = tape.deform_conv2d(ids[0], ids[1], ids[2], ids[3], 1, k / 2, 1);
        weighted_sum(tape, y, 0x11)
    });

    check_op_grads("upsample_nearest2x", n, |rng| {
        let c = rng.gen_range(1..=3);
        vec![random_tensor(rng, vec![1, c, 3, 2], 2.0)]
    }, |tape, ids| {
        let y = tape.upsample_nearest2x(ids[0]);
        weighted_sum(tape, y, 0x12)
    });

    check_op_grads("max_pool2x", n, |rng| {
        let c = rng.gen_range(1..=3);
        vec![random_tensor_distinct(rng, vec![1, c, 4, 4])]
    }, |tape, ids| {
        let y = tape.max_pool2x(ids[0]);
        weighted_sum(tape, y, 0x13)
    });

    check_op_grads("softmax_channel", n, |rng| {
        let c = rng.gen_range(2..=5);
        vec![random_tensor(rng, vec![1, c, 2, 2], 2.0)]
    }, |tape, ids| {
        let y = tape.softmax_channel(ids[0]);
        weighted_sum(tape, y, 0x14)
    });

    check_op_grads("gather_reshape_sum", n, |rng| {
        vec![random_tensor(rng, vec![2, 3, 2, 2], 2.0)]
    }, |tape, ids| {
        let picked = tape.gather(ids[0], vec![0, 5, 5, 7, 23, 11]);
        let shaped = tape.reshape(picked, vec![3, 2]);
        weighted_sum(tape, shaped, 0x15)
    });

    check_op_grads("cross_entropy", n, |rng| {
        vec![random_tensor(rng, vec![4, 5], 2.0)]
    }, |tape, ids| {
        tape.cross_entropy(ids[0], vec![0, 3, 2, 2])
    });

    check_op_grads("decode_rows", n, |rng| {
        vec![random_tensor(rng, vec![3, 4], 1.2)]
    }, |tape, ids| {
        let anchors = vec![
            BBox::new(4.0, 4.0, 8.0, 6.0),
            BBox::new(10.0, 6.0, 5.0, 9.0),
            BBox::new(7.0, 12.0, 11.0, 4.0),
        ];
        let y = tape.decode_rows(ids[0], anchors, OffsetCoding::default());
        weighted_sum(tape, y, 0x16)
    });

    check_op_grads("encode_rows", n, |rng| {
        let mut t = random_tensor(rng, vec![2, 4], 0.0);
        // center-size anchor rows with safely positive extents
        let data = t.data_mut();
        for k in 0..2 {
            data[k * 4] = rng.gen_range(2.0..10.0);
            data[k * 4 + 1] = rng.gen_range(2.0..10.0);
            data[k * 4 + 2] = rng.gen_range(1.0..6.0);
            data[k * 4 + 3] = rng.gen_range(1.0..6.0);
        }
        vec![t]
    }, |tape, ids| {
        let gts = vec![BBox::new(5.0, 5.0, 4.0, 7.0), BBox::new(8.0, 3.0, 6.0, 2.0)];
        let y = tape.encode_rows(ids[0], gts, OffsetCoding::default());
        weighted_sum(tape, y, 0x17)
    });

    let full = check_full_model_grads(20, false) + check_full_model_grads(4, true);
    println!("[c2] PASS gradient suite: 15 ops x20 instances, full micro network x{} instances", full);
}

// ── Criterion 3: reduction chain ────────────────────────────────────────

#[test]
fn c3_reduction_chain() {
    let image = random_image(0xC3);

    // (a) fresh dual-refinement net (zero-initialized refinement heads)
    // equals the plain baseline under shared trunk and head weights
    let drnet = Model::build(micro_config(Variant::Drnet), 21);
    let mut ssd_cfg = micro_config(Variant::Ssd4s);
    ssd_cfg.deform_head = false;
    ssd_cfg.feature_refine = FeatureRefineMode::Off;
    let mut ssd4s = Model::build(ssd_cfg, 22);
    copy_shared_params(&drnet, &mut ssd4s);
    let dp = drnet.forward(&image, false);
    let sp = ssd4s.forward(&image, false);
    let mut max_diff: f64 = 0.0;
    for (dh, sh) in dp.heads.iter().zip(&sp.heads) {
        max_diff = max_diff.max(dp.tape.value(dh.conf).max_abs_diff(sp.tape.value(sh.conf)));
        max_diff = max_diff.max(dp.tape.value(dh.loc).max_abs_diff(sp.tape.value(sh.loc)));
    }
    assert!(max_diff <= 1e-12, "zeroed DRNet vs SSD4s differ by {}", max_diff);

    // refined anchors of the fresh net are exactly the originals
    let ar: Vec<Tensor> = dp.ar.iter().map(|&i| dp.tape.value(i).clone()).collect();
    let refined = drnet_core::heads::refined_anchor_boxes(&ar, drnet.anchors(), &drnet.config.coding, None);
    assert_eq!(refined, drnet.anchors().boxes());

    // (b) with the anchor refinement free but offsets pinned to zero, the
    // deformable head equals the plain convolution head (anchor refinement
    // without feature refinement)
    let mut refine_net = Model::build(micro_config(Variant::Drnet), 33);
    randomize_refinement(&mut refine_net, 0.2, /*arm_only=*/ true);
    let mut zero_dp_cfg = micro_config(Variant::Drnet);
    zero_dp_cfg.feature_refine = FeatureRefineMode::Off; // explicit zero offsets
    let mut zero_dp = Model::build(zero_dp_cfg, 34);
    copy_shared_params(&refine_net, &mut zero_dp);
    let mut plain_cfg = micro_config(Variant::Drnet);
    plain_cfg.deform_head = false;
    plain_cfg.feature_refine = FeatureRefineMode::Off;
    let mut plain = Model::build(plain_cfg, 35);
    copy_shared_params(&refine_net, &mut plain);
    let a = zero_dp.forward(&image, false);
    let b = plain.forward(&image, false);
    let mut max_diff: f64 = 0.0;
    for (ha, hb) in a.heads.iter().zip(&b.heads) {
        max_diff = max_diff.max(a.tape.value(ha.conf).max_abs_diff(b.tape.value(hb.conf)));
        max_diff = max_diff.max(a.tape.value(ha.loc).max_abs_diff(b.tape.value(hb.loc)));
    }
    assert!(max_diff <= 1e-12, "zero-offset deform head vs plain head differ by {}", max_diff);
    // the anchor refinement itself is genuinely active in this mode
    let ar_norm: f64 = a.ar.iter().map(|&i| a.tape.value(i).data().iter().map(|v| v.abs()).sum::<f64>()).sum();
    assert!(ar_norm > 1e-3, "reduction test needs a non-trivial anchor refinement");

    // (c) a traditional-convolution refinement detector fed an all-zero
    // state is the plain baseline
    let mut rd_cfg = micro_config(Variant::Rd);
    rd_cfg.deform_head = false;
    rd_cfg.feature_refine = FeatureRefineMode::Off;
    let mut rd = Model::build(rd_cfg, 36);
    copy_shared_params(&ssd4s, &mut rd);
    let zp = rd.forward_with_state(&image, &rd.zero_state(), false);
    let mut max_diff: f64 = 0.0;
    for (hr, hs) in zp.heads.iter().zip(&sp.heads) {
        max_diff = max_diff.max(zp.tape.value(hr.conf).max_abs_diff(sp.tape.value(hs.conf)));
        max_diff = max_diff.max(zp.tape.value(hr.loc).max_abs_diff(sp.tape.value(hs.loc)));
    }
    assert!(max_diff <= 1e-12, "zero-state RD vs SSD4s differ by {}", max_diff);
    let det_rd = drnet_core::postprocess::extract_detections(&rd, &zp);
    let det_ssd = drnet_core::postprocess::extract_detections(&ssd4s, &sp);
    for (a, b) in det_rd.boxes.iter().zip(&det_ssd.boxes) {
        assert!((a.cx - b.cx).abs() <= 1e-12 && (a.w - b.w).abs() <= 1e-12);
    }

    println!("[c3] PASS reduction chain: zeroed-DRNet==SSD4s, zero-offset==plain-head, zero-state-RD==SSD4s (<=1e-12)");
}

// ── Criterion 7: determinism ────────────────────────────────────────────

#[test]
fn c7_determinism() {
    let run = || -> (Vec<u8>, String, String) {
        let dir = tempfile::tempdir().unwrap();
        let spec = train_scene_spec(7);
        let data: Vec<drnet_core::training::TrainSample> = (0..24)
            .map(|i| {
                let (image, gts) = drnet_core::data::generate_image(&spec, i);
                drnet_core::training::TrainSample { image, gts }
            })
            .collect();
        let mut model = Model::build(tiny_config(Variant::Drnet), 5);
        let cfg = drnet_core::training::TrainConfig {
            steps: 12,
            batch_size: 2,
            seed: 9,
            ..Default::default()
        };
        drnet_core::training::train_model(&mut model, &data, &cfg).unwrap();
        drnet_core::model::save_checkpoint(dir.path(), "m", &[("", &model)], 12).unwrap();
        let ckpt_bytes = std::fs::read(dir.path().join("m.afw")).unwrap();

        // detections as serialized lines
        let mut det_lines = String::new();
        for i in 0..4 {
            let (image, _) = drnet_core::data::generate_image(&spec, 100 + i);
            for c in drnet_core::postprocess::detect_image(&model, &image, &PostprocessConfig::default()) {
                det_lines.push_str(&format!(
                    "{{\"frame\":{},\"class\":{},\"score\":{},\"cx\":{},\"cy\":{},\"w\":{},\"h\":{}}}\n",
                    i, c.class, c.score, c.bbox.cx, c.bbox.cy, c.bbox.w, c.bbox.h
                ));
            }
        }

        // a small sweep over one clip
        let pair = drnet_core::model::build_pair(&tiny_config(Variant::Drnet), 77);
        let clip = drnet_core::data::generate_video(&spec, 0, 6);
        let rows = drnet_core::temporal::sweep(
            &pair,
            std::slice::from_ref(&clip),
            &[1, 2],
            &[1.0, 0.5],
            &PostprocessConfig::default(),
        );
        let sweep_text: String = rows
            .iter()
            .map(|r| format!("{},{},{:.12},{},{}\n", r.k, r.e, r.map, r.rg_calls, r.rd_calls))
            .collect();
        (ckpt_bytes, det_lines, sweep_text)
    };

    let (c1, d1, s1) = run();
    let (c2, d2, s2) = run();
    assert_eq!(c1, c2, "checkpoint bytes differ between identical runs");
    assert_eq!(d1, d2, "detection outputs differ between identical runs");
    assert_eq!(s1, s2, "sweep tables differ between identical runs");
    println!("[c7] PASS determinism: bit-identical checkpoint, detections, and sweep across two runs");
}

// ── Criterion 8: post-processing contract ───────────────────────────────

#[test]
fn c8_postprocess_contract() {
    // the published defaults
    let cfg = PostprocessConfig::default();
    assert_eq!(cfg.score_threshold, 0.01);
    assert_eq!(cfg.nms_iou, 0.45);
    assert_eq!(cfg.top_k, 200);

    // idempotence of suppression on model outputs, and output validity
    let model = Model::build(tiny_config(Variant::Drnet), 123);
    let spec = train_scene_spec(8);
    let mut total = 0usize;
    for i in 0..6 {
        let (image, _) = drnet_core::data::generate_image(&spec, i);
        let pass = model.forward(&image, false);
        let det = drnet_core::postprocess::extract_detections(&model, &pass);
        let filtered = drnet_core::postprocess::filter_scores(&det, cfg.score_threshold);
        for cls in 0..model.config.num_classes {
            let class_cands: Vec<Candidate> =
                filtered.iter().filter(|c| c.class == cls).copied().collect();
            let once = nms(&class_cands, cfg.nms_iou);
            let twice = nms(&once, cfg.nms_iou);
            assert_eq!(once, twice, "NMS must be idempotent");
        }
        let out = drnet_core::postprocess::postprocess(&det, model.config.num_classes, &cfg);
        total += out.len();
        assert!(out.len() <= cfg.top_k);
        for c in &out {
            assert!(c.class < model.config.num_classes, "background must never be emitted");
            assert!(c.score > cfg.score_threshold);
            assert!(c.bbox.w > 0.0 && c.bbox.h > 0.0);
        }
    }
    assert!(total > 0, "the contract check needs at least one candidate");
    println!("[c8] PASS post-processing contract: defaults 0.01/0.45/200, idempotent NMS, valid outputs");
}
