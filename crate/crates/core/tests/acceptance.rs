//! Acceptance criteria, one line per criterion.
//!
//! Runs as a plain binary so each verdict is printed as it is reached.
//! Pass criterion numbers as arguments to run a subset.

mod common;

use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use common::oracle::{block_oracle, layer_norm, pip_oracle, Mat};
use common::primitives;
use deepfuse::augment::{apply_pipeline, face_cutout, random_cutout, AugmentConfig, CutoutMode, Image, RgbImage};
use deepfuse::backbones::Preset;
use deepfuse::datapipe::{
    sample_frames, DatasetManifest, FaceFrame, Label, SamplingPolicy, Split, Subset, VideoRecord,
};
use deepfuse::evaluate::{predict_videos, VideoPrediction};
use deepfuse::fusion::{self, encoder_forward, fusion_forward, FusionConfig};
use deepfuse::model::{Forward, HybridModel, HybridModelConfig, ParamStore};
use deepfuse::numerics::{grad_check_inputs, NormMode, Tensor};
use deepfuse::training::{
    early_stop_check, evaluate_loss, fit, load_checkpoint, read_metrics, save_checkpoint, Decision, EpochMetrics,
    MetricsLog, StopReason, TrainConfig,
};
use rand::Rng;

type Verdict = Result<String, String>;

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------

fn gradient_suite() -> Verdict {
    let started = Instant::now();
    let mut worst = (0.0f64, String::new());
    let mut checks = 0;
    for name in primitives::PRIMITIVES {
        for seed in 0..20u64 {
            let (inputs, f) = primitives::primitive_case(name, seed);
            let r = grad_check_inputs(|g, v| f(g, v), &inputs, 1e-5, None).map_err(|e| e.to_string())?;
            checks += r.checked;
            if r.max_rel_error >= worst.0 {
                worst = (r.max_rel_error, format!("{name} seed {seed}"));
            }
        }
    }
    let cfg = HybridModelConfig::preset(Preset::Toy);
    for seed in 0..20u64 {
        let m = HybridModel::<f64>::new(cfg.clone(), seed).map_err(|e| e.to_string())?;
        let x = Tensor::uniform(&[2, 3, 64, 64], -1.0, 1.0, &mut common::rng(1000 + seed));
        let (err, at, n) = common::model_grad_check(&m, &x, &[1.0, 0.0], 1, seed);
        checks += n;
        if err >= worst.0 {
            worst = (err, format!("toy model seed {seed} at {at}"));
        }
    }
    let elapsed = started.elapsed();
    verdict(
        worst.0 <= 1e-4 && elapsed < Duration::from_secs(120),
        format!(
            "{} primitives and the toy model over 20 seeds, {checks} coordinates, worst {:.2e} ({}), {:.0}s",
            primitives::PRIMITIVES.len(),
            worst.0,
            worst.1,
            elapsed.as_secs_f64()
        ),
    )
}

fn paper_shape_chain() -> Verdict {
    let cfg = FusionConfig::preset(Preset::Paper);
    let mut store = ParamStore::<f32>::new();
    fusion::register(&mut store, &cfg, &mut common::rng(2)).map_err(|e| e.to_string())?;
    let mut r = common::rng(3);
    let mut fw = Forward::new(&store, NormMode::Infer, false);
    let a = fw.input(Tensor::uniform(&[1, 162, 768], -1.0, 1.0, &mut r));
    let b = fw.input(Tensor::uniform(&[1, 162, 768], -1.0, 1.0, &mut r));
    let p = fusion_forward(&mut fw, a, b, &cfg).map_err(|e| e.to_string())?;
    let trace = fw.trace().to_vec();
    let want: Vec<(&str, Vec<usize>)> = vec![
        ("tokens_a", vec![1, 162, 768]),
        ("tokens_b", vec![1, 162, 768]),
        ("fused", vec![1, 324, 768]),
        ("with_class", vec![1, 325, 768]),
        ("encoded", vec![1, 325, 768]),
        ("probability", vec![1]),
    ];
    let got: Vec<(&str, Vec<usize>)> = trace.iter().map(|(n, s)| (n.as_str(), s.clone())).collect();
    let prob = fw.graph.value(p).data()[0];
    verdict(got == want && prob > 0.0 && prob < 1.0, format!("162 + 162 -> 324 -> 325 x 768 -> [1], p = {prob:.4}"))
}

fn encoder_oracle() -> Verdict {
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        for l in 1..=3 {
            let cfg = FusionConfig { embed_dim: 6, n_blocks: 1, n_heads: 1, mlp_ratio: 2, max_len: 4 };
            let mut store = ParamStore::<f64>::new();
            let mut r = common::rng(30 + seed);
            fusion::register(&mut store, &cfg, &mut r).map_err(|e| e.to_string())?;
            let names: Vec<String> = store.names().map(str::to_string).collect();
            for n in names {
                let t = store.get_mut(&n).unwrap();
                *t = Tensor::uniform(t.shape(), -0.7, 0.7, &mut r);
            }
            let x = Tensor::uniform(&[1, l, 6], -1.0, 1.0, &mut r);
            let mut fw = Forward::new(&store, NormMode::Infer, false);
            let xv = fw.input(x.clone());
            let y = encoder_forward(&mut fw, xv, &cfg).map_err(|e| e.to_string())?;
            let seq = block_oracle(&Mat { r: l, c: 6, d: x.data().to_vec() }, &store, "fusion.blocks.0", 1);
            let want = layer_norm(&seq, &store, "fusion.norm");
            for (a, b) in fw.graph.value(y).data().iter().zip(&want.d) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    verdict(worst <= 1e-10, format!("L in 1..=3 over 10 seeds, max deviation {worst:.2e}"))
}

fn overfit_sanity() -> Verdict {
    let started = Instant::now();
    let train = common::separable_corpus(32, 64, 1);
    let val = common::separable_corpus(8, 64, 2);
    let mut model = HybridModel::<f32>::new(HybridModelConfig::preset(Preset::Toy), 0).map_err(|e| e.to_string())?;
    let cfg = TrainConfig { augment: AugmentConfig::disabled(), max_epochs: 200, ..TrainConfig::default() };
    let out = fit(&mut model, &train, &val, &cfg, |_| Ok(())).map_err(|e| e.to_string())?;
    let last = out.state.history.last().cloned().ok_or("no epochs ran")?;
    let elapsed = started.elapsed();
    verdict(
        last.train_acc == 1.0
            && out.state.stop_reason == Some(StopReason::TrainAccuracy)
            && elapsed < Duration::from_secs(600),
        format!(
            "train accuracy {:.3} at epoch {}, stop {:?}, {:.0}s",
            last.train_acc,
            last.epoch,
            out.state.stop_reason,
            elapsed.as_secs_f64()
        ),
    )
}

/// Noise faces; fakes carry a saturated square at a fixed position.
fn patch_corpus(n: usize, seed: u64) -> Vec<FaceFrame> {
    const SIZE: usize = 40;
    let mut r = common::rng(seed);
    (0..n)
        .map(|i| {
            let label = if i % 2 == 0 { Label::Real } else { Label::Fake };
            let mut data: Vec<u8> = (0..3 * SIZE * SIZE).map(|_| r.random_range(64..=191u8)).collect();
            if label == Label::Fake {
                for y in 4..20 {
                    for x in 4..20 {
                        data[(y * SIZE + x) * 3..(y * SIZE + x) * 3 + 3].fill(255);
                    }
                }
            }
            let img = RgbImage::new(SIZE, SIZE, data).unwrap();
            FaceFrame::new(img, None, label, format!("p{seed}-{i}"), Subset::Custom, 0).unwrap()
        })
        .collect()
}

fn augmentation_gap() -> Verdict {
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..5u64 {
        let train = patch_corpus(32, 100 + seed);
        let val = patch_corpus(8, 200 + seed);
        let holdout = patch_corpus(32, 300 + seed);
        let mut gaps = [0.0; 2];
        let mut accs = [(0.0, 0.0); 2];
        for (k, (cutout, augment)) in
            [(CutoutMode::None, AugmentConfig::disabled()), (CutoutMode::RandomCutout, AugmentConfig::default())]
                .into_iter()
                .enumerate()
        {
            let mut model =
                HybridModel::<f32>::new(HybridModelConfig::preset(Preset::Toy), seed).map_err(|e| e.to_string())?;
            let cfg = TrainConfig { cutout, augment, max_epochs: 12, batch_size: 8, seed, ..TrainConfig::default() };
            fit(&mut model, &train, &val, &cfg, |_| Ok(())).map_err(|e| e.to_string())?;
            let clean = AugmentConfig::disabled();
            let (_, tr) = evaluate_loss(&model, &train, 16, &clean).map_err(|e| e.to_string())?;
            let (_, ho) = evaluate_loss(&model, &holdout, 16, &clean).map_err(|e| e.to_string())?;
            gaps[k] = tr - ho;
            accs[k] = (tr, ho);
        }
        wins += usize::from(gaps[1] <= gaps[0]);
        rows.push(format!(
            "seed {seed}: cut-out {:.2}-{:.2}={:+.3}, plain {:.2}-{:.2}={:+.3}",
            accs[1].0, accs[1].1, gaps[1], accs[0].0, accs[0].1, gaps[0]
        ));
    }
    verdict(wins >= 4, format!("cut-out gap <= plain gap in {wins}/5 seeds ({})", rows.join("; ")))
}

fn augmentation_determinism_and_locality() -> Verdict {
    let mut mismatches = 0;
    for seed in 0..12u64 {
        let frame = common::noise_frame(48 + seed as usize, seed, Label::Fake);
        for mode in [CutoutMode::None, CutoutMode::FaceCutout, CutoutMode::RandomCutout] {
            let cfg = AugmentConfig { p_cutout: 1.0, ..AugmentConfig::default() };
            let (a, pa) = apply_pipeline::<f64>(&frame, mode, seed, &cfg).map_err(|e| e.to_string())?;
            let (b, pb) = apply_pipeline::<f64>(&frame, mode, seed, &cfg).map_err(|e| e.to_string())?;
            let same = pa == pb && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            mismatches += usize::from(!same);
        }
    }

    let mut violations = 0;
    let mut pixels = 0;
    for seed in 0..40u64 {
        let (w, h) = (40 + seed as usize % 17, 36 + seed as usize % 11);
        let img = Image::from(&common::noise_image(w, h, 1, 255, seed));
        let (out, plan) = random_cutout(&img, seed, 0.0).map_err(|e| e.to_string())?;
        let lm = common::face_landmarks(w, h);
        let (face, fplan) = face_cutout(&img, &lm, seed, 0.0).map_err(|e| e.to_string())?;
        for y in 0..h {
            for x in 0..w {
                let masked = plan.squares.iter().any(|s| {
                    let (x0, y0, x1, y1) = s.span();
                    (x as isize) >= x0 && (x as isize) < x1 && (y as isize) >= y0 && (y as isize) < y1
                });
                let in_poly = pip_oracle(&fplan.polygon, x as f64, y as f64);
                for c in 0..3 {
                    let orig = img.at(c, y, x).to_bits();
                    let ok_r = if masked { out.at(c, y, x) == 0.0 } else { out.at(c, y, x).to_bits() == orig };
                    let ok_f = if in_poly { face.at(c, y, x) == 0.0 } else { face.at(c, y, x).to_bits() == orig };
                    violations += usize::from(!ok_r) + usize::from(!ok_f);
                    pixels += 2;
                }
            }
        }
    }
    verdict(
        mismatches == 0 && violations == 0,
        format!("36 seeded pipelines repeat bitwise ({mismatches} mismatches); {violations} mask violations in {pixels} samples"),
    )
}

fn frame_policy() -> Verdict {
    let record = |id: String, label: Label, split: Split, n: usize| VideoRecord {
        frames: (0..n).map(|i| PathBuf::from(format!("{id}/{i}.png"))).collect(),
        subset: if label == Label::Fake { Subset::Deepfakes } else { Subset::Pristine },
        video_id: id,
        label,
        split,
        landmarks: None,
    };
    let avail = [0usize, 1, 9, 16, 17, 49, 50, 51, 149, 150, 151, 400];
    let mut videos = Vec::new();
    for (split, tag) in [(Split::Train, "tr"), (Split::Val, "va"), (Split::Test, "te")] {
        for label in [Label::Real, Label::Fake] {
            for &n in &avail {
                videos.push(record(format!("{tag}-{label:?}-{n}"), label, split, n));
            }
        }
    }
    let manifest = DatasetManifest::from_records(PathBuf::new(), videos, false).map_err(|e| e.to_string())?;
    let policy = SamplingPolicy::default();
    let mut wrong = Vec::new();
    let mut checked = 0;
    for split in [Split::Train, Split::Val, Split::Test] {
        let sampled = sample_frames(&manifest, split, &policy).map_err(|e| e.to_string())?;
        for v in manifest.split(split) {
            let quota = match (split, v.label) {
                (Split::Test, _) => 16,
                (_, Label::Fake) => 50,
                (_, Label::Real) => 150,
            };
            let want = v.frames.len().min(quota);
            let got = sampled.videos.iter().find(|s| s.video_id == v.video_id).map_or(0, |s| s.frames.len());
            checked += 1;
            if got != want {
                wrong.push(format!("{} got {got} want {want}", v.video_id));
            }
        }
    }
    verdict(wrong.is_empty(), format!("{checked} fixture videos, {} off quota {:?}", wrong.len(), wrong))
}

/// Direct scan of the stopping rule.
fn stop_oracle(losses: &[f64], acc: f64, cfg: &TrainConfig) -> Decision {
    if acc >= cfg.train_acc_stop {
        return Decision::Stop(StopReason::TrainAccuracy);
    }
    let rises = losses.windows(2).rev().take_while(|w| w[1] > w[0]).count();
    if rises >= cfg.patience {
        Decision::Stop(StopReason::ValLossRising)
    } else {
        Decision::Continue
    }
}

fn aggregation_and_stopping() -> Verdict {
    let mut r = common::rng(8);
    let mut worst = 0.0f64;
    for i in 0..2000 {
        let n = r.random_range(1..=40);
        let probs: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
        let mut mean = 0.0;
        for p in &probs {
            mean += p;
        }
        mean /= n as f64;
        let v = VideoPrediction::new(format!("v{i}"), Subset::Custom, Label::Fake, probs).map_err(|e| e.to_string())?;
        worst = worst.max((v.score - mean).abs());
    }

    let mut disagreements = 0;
    for _ in 0..10_000 {
        let len = r.random_range(0..20);
        let coarse = r.random::<bool>();
        let losses: Vec<f64> =
            (0..len).map(|_| if coarse { f64::from(r.random_range(0..4u8)) } else { r.random::<f64>() }).collect();
        let acc = [0.0, 0.5, 0.99, 0.994, 0.995, 1.0][r.random_range(0..6)];
        let cfg = TrainConfig { patience: r.random_range(1..=5), ..TrainConfig::default() };
        disagreements += usize::from(early_stop_check(&losses, acc, &cfg) != stop_oracle(&losses, acc, &cfg));
    }
    verdict(
        worst <= 1e-12 && disagreements == 0,
        format!("mean deviation {worst:.1e} over 2000 videos; {disagreements} stop-rule disagreements in 10000"),
    )
}

fn persistence() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let train = common::separable_corpus(8, 48, 4);
    let mut model = HybridModel::<f32>::new(HybridModelConfig::preset(Preset::Toy), 9).map_err(|e| e.to_string())?;
    let cfg = TrainConfig { max_epochs: 1, batch_size: 4, ..TrainConfig::default() };
    let out = fit(&mut model, &train, &train, &cfg, |_| Ok(())).map_err(|e| e.to_string())?;
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &model, Some(&out.state)).map_err(|e| e.to_string())?;
    let back = load_checkpoint::<f32>(&path, Some(&model.config)).map_err(|e| e.to_string())?;
    let state = back.state.as_ref().ok_or("state missing")?;
    let tensors_equal = back.model.params.bitwise_eq(&model.params)
        && state.velocities.len() == out.state.velocities.len()
        && state
            .velocities
            .iter()
            .zip(&out.state.velocities)
            .all(|(a, b)| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()))
        && state.history == out.state.history;

    let videos: Vec<VideoRecord> = (0..3)
        .map(|i| {
            let label = if i % 2 == 0 { Label::Real } else { Label::Fake };
            common::write_video(dir.path(), &format!("t{i}"), Subset::Custom, label, Split::Test, 4, 40, false)
        })
        .collect();
    let manifest =
        DatasetManifest::load(&common::write_fixture_manifest(dir.path(), &videos)).map_err(|e| e.to_string())?;
    let split = sample_frames(&manifest, Split::Test, &SamplingPolicy::default()).map_err(|e| e.to_string())?;
    let clean = AugmentConfig::disabled();
    let a = predict_videos(&model, &split, &clean, 3).map_err(|e| e.to_string())?;
    let b = predict_videos(&back.model, &split, &clean, 3).map_err(|e| e.to_string())?;
    let scores_equal = a.len() == 3 && a.iter().zip(&b).all(|(x, y)| x.score.to_bits() == y.score.to_bits());
    verdict(
        tensors_equal && scores_equal,
        format!(
            "{} tensors and {} velocity buffers bitwise, {} video scores identical",
            model.params.len() + model.params.running_iter().count() * 2,
            state.velocities.len(),
            a.len()
        ),
    )
}

fn reproducibility() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let train = common::separable_corpus(12, 48, 5);
    let val = common::separable_corpus(4, 48, 6);
    let run = |tag: &str| -> Result<Vec<EpochMetrics>, String> {
        let mut model =
            HybridModel::<f64>::new(HybridModelConfig::preset(Preset::Toy), 3).map_err(|e| e.to_string())?;
        let cfg = TrainConfig {
            cutout: CutoutMode::RandomCutout,
            max_epochs: 3,
            batch_size: 4,
            seed: 17,
            ..TrainConfig::default()
        };
        let path = dir.path().join(format!("{tag}.jsonl"));
        let mut log = MetricsLog::create(&path).map_err(|e| e.to_string())?;
        fit(&mut model, &train, &val, &cfg, |m| log.append(m)).map_err(|e| e.to_string())?;
        read_metrics(&path).map_err(|e| e.to_string())
    };
    let (a, b) = (run("a")?, run("b")?);
    let mut diff = 0.0f64;
    for (x, y) in a.iter().zip(&b) {
        for (p, q) in
            [(x.train_loss, y.train_loss), (x.train_acc, y.train_acc), (x.val_loss, y.val_loss), (x.val_acc, y.val_acc)]
        {
            diff = diff.max((p - q).abs());
        }
    }
    verdict(
        !a.is_empty() && a.len() == b.len() && diff <= 1e-12,
        format!("{} epochs in f64 with augmentation, max divergence {diff:.1e}", a.len()),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 10] = [
        ("gradient suite", gradient_suite),
        ("paper shape chain", paper_shape_chain),
        ("encoder oracle", encoder_oracle),
        ("overfit sanity", overfit_sanity),
        ("augmentation gap trend", augmentation_gap),
        ("augmentation determinism and locality", augmentation_determinism_and_locality),
        ("frame policy", frame_policy),
        ("aggregation exactness", aggregation_and_stopping),
        ("persistence", persistence),
        ("reproducibility", reproducibility),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let started = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(run))
            .unwrap_or_else(|e| Err(e.downcast_ref::<String>().cloned().unwrap_or_else(|| "panicked".into())));
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} FAIL {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
