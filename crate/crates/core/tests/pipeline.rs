use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use segnext::analysis::{bench_latency, cost_report, count_flops, count_params};
use segnext::io::checkpoint::{from_bytes, to_bytes};
use segnext::io::config::RunConfig;
use segnext::io::image::{decode_pgm, encode_pgm, read_pgm, write_pgm};
use segnext::model::{ModelConfig, SegModel, PRESETS};
use segnext::msca::AttentionKind;
use segnext::train::augment::{apply_augment, AugParams};
use segnext::train::data::{synth_sample, target_mix, IGNORE_INDEX};
use segnext::train::optim::{AdamWConfig, OptimState};
use segnext::train::trainer::train;

#[test]
fn class_frequencies_follow_the_target_mix() {
    let classes = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut counts = vec![0u64; classes];
    for _ in 0..100 {
        let s = synth_sample(&mut rng, 64, classes);
        for (c, n) in s.label.class_counts(classes).iter().enumerate() {
            counts[c] += n;
        }
    }
    let total: u64 = counts.iter().sum();
    for (c, target) in target_mix(classes).iter().enumerate() {
        let share = counts[c] as f64 / total as f64;
        assert!((share - target).abs() <= 0.2 * target, "class {c}: {share} vs {target}");
    }
}

#[test]
fn half_scale_augment_shrinks_before_cropping() {
    let s = synth_sample(&mut ChaCha8Rng::seed_from_u64(1), 128, 3);
    let p = AugParams { flip: false, scale: 0.5, offset: (0, 0) };
    let out = apply_augment(&s, &p, 128);
    assert_eq!((out.label.h, out.label.w), (128, 128));
    // The 64x64 scaled image sits in the top-left corner; the rest is padding.
    for y in 0..128 {
        for x in 0..128 {
            let l = out.label.get(y, x);
            if y < 64 && x < 64 {
                assert_ne!(l, IGNORE_INDEX);
                assert!(s.label.data.contains(&l));
            } else {
                assert_eq!(l, IGNORE_INDEX);
            }
        }
    }
}

#[test]
fn checkpoint_size_is_dominated_by_weights() {
    let model = SegModel::<f32>::build(&ModelConfig::preset("segnext-micro").unwrap(), 0).unwrap();
    let bytes = to_bytes(&model, &RunConfig::default(), None);
    let weights = 4 * count_params(&model);
    let rel = (bytes.len() as f64 - weights as f64) / weights as f64;
    assert!((0.0..0.05).contains(&rel), "{} bytes for {weights} weight bytes", bytes.len());
    let loaded = from_bytes(&bytes).unwrap();
    assert_eq!(count_params(&loaded.model), count_params(&model));
}

#[test]
fn label_maps_survive_pgm_export() {
    let s = synth_sample(&mut ChaCha8Rng::seed_from_u64(2), 96, 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("labels.pgm");
    write_pgm(&path, &s.label).unwrap();
    let back = read_pgm(&path).unwrap();
    assert_eq!(back.class_counts(3), s.label.class_counts(3));
    assert_eq!(back, s.label);
    assert_eq!(decode_pgm(&encode_pgm(&s.label)).unwrap(), s.label);
}

#[test]
fn parameter_count_matches_the_optimizer_registry() {
    for preset in ["segnext-micro", "segnext-t"] {
        let model = SegModel::<f32>::build(&ModelConfig::preset(preset).unwrap(), 0).unwrap();
        let optim = OptimState::new(&model.store, AdamWConfig::default());
        let tracked: usize = optim.m.iter().map(|m| m.numel()).sum();
        assert_eq!(tracked, count_params(&model));
        assert_eq!(cost_report(&model, (64, 64)).unwrap().total_params(), count_params(&model));
    }
}

#[test]
fn flops_add_up_across_parts() {
    let model = SegModel::<f32>::build(&ModelConfig::preset("segnext-t").unwrap(), 0).unwrap();
    let report = cost_report(&model, (512, 512)).unwrap();
    let total = report.total_flops();
    assert_eq!(report.flops_under("encoder.") + report.flops_under("decoder."), total);
    let stages: u64 = (1..=4).map(|i| report.flops_under(&format!("encoder.stage{i}."))).sum();
    assert_eq!(stages, report.flops_under("encoder."));
    assert_eq!(count_flops(&model, 512, 512).unwrap(), total);
}

#[test]
fn cost_grows_with_model_size() {
    for family in [&PRESETS[0..4], &PRESETS[4..8]] {
        let costs: Vec<(usize, u64)> = family
            .iter()
            .map(|p| {
                let model = SegModel::<f32>::build(&ModelConfig::preset(p).unwrap(), 0).unwrap();
                (count_params(&model), count_flops(&model, 512, 512).unwrap())
            })
            .collect();
        assert!(costs.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 < w[1].1), "{family:?}: {costs:?}");
    }
}

fn short_config(attention: AttentionKind) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.attention = attention;
    cfg.train.iters = 6;
    cfg.train.batch = 2;
    cfg.train.crop = 64;
    cfg.train.eval_interval = 0;
    cfg.data.train_samples = 4;
    cfg.data.val_samples = 2;
    cfg.data.size = 64;
    cfg
}

#[test]
fn large_kernel_variant_trains() {
    let out = train(&short_config(AttentionKind::LargeKernel), None).unwrap();
    assert_eq!(out.log.len(), 6);
    assert!(out.log.iter().all(|r| r.loss.is_finite()));
    assert!((0.0..=1.0).contains(&out.final_miou));
}

#[test]
fn attention_latency_ratio() {
    let mut cfg = ModelConfig::preset("segnext-t").unwrap();
    let multi = SegModel::<f32>::build(&cfg, 0).unwrap();
    cfg.attention = AttentionKind::LargeKernel;
    let large = SegModel::<f32>::build(&cfg, 0).unwrap();
    let a = bench_latency(&multi, (128, 128), 1, 3).unwrap();
    let b = bench_latency(&large, (128, 128), 1, 3).unwrap();
    // Wall-clock depends on the host, so the ratio is reported only.
    println!("multi-scale {:.2} ms, large-kernel {:.2} ms, ratio {:.3}", a.median_ms, b.median_ms, a.median_ms / b.median_ms);
    assert!(a.median_ms > 0.0 && b.median_ms > 0.0);
}
