//! End-to-end acceptance checks. Runs without the test harness so that every
//! criterion prints exactly one PASS or FAIL line; exits non-zero if any fails.

mod common;

use std::collections::BTreeMap;
use std::ops::ControlFlow;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use mmexpr::data::{load_split, segment_video, LabelTrack, Manifest, VideoData, NUM_CLASSES};
use mmexpr::ensemble::{load_prediction_dir, vote, vote_dirs, PredictionTrack};
use mmexpr::evaluation::{confusion_valid, macro_f1};
use mmexpr::models::{Encoder, EncoderKind, LstmState, Mode, Model, ModelConfig, SegmentConfig};
use mmexpr::training::{rdrop_loss, rdrop_value, synth_dataset, train, SynthConfig, TrainConfig, SYNTH_AUDIO, SYNTH_VISUAL};
use mmexpr_tensor::gradcheck::{op_suite, FD_TOL};
use mmexpr_tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("gradient suite", gradient_suite),
        ("lstm carryover equivalence", lstm_carryover),
        ("rdrop identities", rdrop_identities),
        ("macro-F1 oracle", macro_f1_oracle),
        ("segmentation", segmentation),
        ("synthetic end-to-end", synthetic_end_to_end),
        ("ensemble vote", ensemble_vote),
        ("determinism", determinism),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = check();
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {} ({name}): PASS [{secs:.1}s] {detail}", i + 1),
            Err(detail) => {
                println!("criterion {} ({name}): FAIL [{secs:.1}s] {detail}", i + 1);
                failed.push(i + 1);
            }
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}

// 1. Every op and the full fusion, encoder, head and RDrop graph against
//    central differences in f64.
fn gradient_suite() -> Outcome {
    let started = Instant::now();
    let ops = op_suite(20).map_err(|e| e.to_string())?;
    let models = common::model_suite(20);
    let elapsed = started.elapsed();
    let mut worst = ("", 0.0f64);
    for (name, e) in ops.iter().chain(&models) {
        ensure(*e < FD_TOL, || format!("{name}: relative error {e:e} >= {FD_TOL:e}"))?;
        if *e > worst.1 {
            worst = (name, *e);
        }
    }
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{} ops and {} model graphs, 20 instances each, worst {:.2e} ({}), {:.1}s",
        ops.len(),
        models.len(),
        worst.1,
        worst.0,
        elapsed.as_secs_f64()
    ))
}

fn random_video(rng: &mut ChaCha8Rng, id: &str, n: usize, dim: usize) -> VideoData {
    VideoData {
        id: id.into(),
        n_frames: n,
        input_dim: dim,
        inputs: (0..n * dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
        labels: LabelTrack::new(id, (0..n).map(|_| rng.random_range(0..8)).collect()).unwrap(),
    }
}

// 2. Segmented inference with carried state equals one pass over the video.
fn lstm_carryover() -> Outcome {
    let mut worst = 0.0f32;
    let mut runs = 0;
    for l in [4usize, 16, 128] {
        for trial in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(l as u64 * 100 + trial);
            let cfg = ModelConfig {
                encoder: EncoderKind::Lstm,
                segment: SegmentConfig { l, p: l },
                ..ModelConfig::default()
            };
            let dim = rng.random_range(2..40);
            let n = rng.random_range(1..=3 * l + 5);
            let video = random_video(&mut rng, "v", n, dim);
            let (model, params) = Model::new(&cfg, dim, trial).map_err(|e| e.to_string())?;
            let segmented = model.predict_logits(&params, &video).map_err(|e| e.to_string())?;

            let Encoder::Lstm(lstm) = &model.encoder else { unreachable!() };
            let mut g = Graph::frozen(&params);
            let x = g.constant(Tensor::new(&[n, dim], video.inputs.clone()).unwrap());
            let fused = model.fusion.forward(&mut g, x).unwrap();
            let init = LstmState::zeros(lstm.layers.len(), lstm.hidden);
            let (h, _) = lstm.run(&mut g, fused, &init).unwrap();
            let full = model.head.forward(&mut g, h, &mut Mode::Eval).unwrap();
            for (a, b) in segmented.data().iter().zip(g.value(full).data()) {
                worst = worst.max((a - b).abs());
            }
            runs += 1;
        }
    }
    ensure(worst < 1e-5, || format!("max abs logit difference {worst:e}"))?;
    Ok(format!("{runs} random models and videos, max abs difference {worst:.2e}"))
}

fn rand_logits(rng: &mut ChaCha8Rng, rows: usize, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(&[rows, NUM_CLASSES], |_| rng.random_range(-scale..scale))
}

/// Mean cross-entropy over unmasked frames, straight from the definition.
fn mean_ce(z: &Tensor<f64>, y: &[i8]) -> Option<f64> {
    let mut total = 0.0;
    let mut n = 0;
    for (r, &t) in y.iter().enumerate() {
        if t < 0 {
            continue;
        }
        let row = z.row(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[t as usize];
        n += 1;
    }
    (n > 0).then(|| total / n as f64)
}

// 3. RDrop reduces to cross-entropy, is symmetric, nonnegative, and leaves
//    masked frames without gradient.
fn rdrop_identities() -> Outcome {
    let mut worst_alpha0 = 0.0f64;
    let mut worst_same = 0.0f64;
    for trial in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let rows = rng.random_range(1..10);
        let scale = if trial % 4 == 0 { 40.0 } else { 5.0 };
        let a = rand_logits(&mut rng, rows, scale);
        let b = rand_logits(&mut rng, rows, scale);
        let y: Vec<i8> = (0..rows).map(|_| rng.random_range(-1..8)).collect();
        let alpha = rng.random_range(0.0..10.0);

        let ce = |z: &Tensor<f64>| mean_ce(z, &y);
        let rd0 = rdrop_value(&a, &b, &y, 0.0).unwrap();
        let want0 = ce(&a).zip(ce(&b)).map(|(x, z)| (x + z) / 2.0);
        match (rd0, want0) {
            (Some(g), Some(w)) => worst_alpha0 = worst_alpha0.max((g - w).abs()),
            (None, None) => {}
            other => return Err(format!("alpha = 0 masking disagrees: {other:?}")),
        }
        if let (Some(g), Some(w)) = (rdrop_value(&a, &a, &y, alpha).unwrap(), ce(&a)) {
            worst_same = worst_same.max((g - w).abs());
        }

        let to32 = |t: &Tensor<f64>| Tensor::from_fn(t.shape(), |i| t.data()[i] as f32);
        let (a32, b32) = (to32(&a), to32(&b));
        let ab = rdrop_value(&a32, &b32, &y, alpha).unwrap();
        let ba = rdrop_value(&b32, &a32, &y, alpha).unwrap();
        ensure(ab.map(f32::to_bits) == ba.map(f32::to_bits), || {
            format!("trial {trial}: pass order changes the loss, {ab:?} vs {ba:?}")
        })?;
        if let Some(l) = ab {
            ensure(l >= 0.0, || format!("trial {trial}: negative loss {l}"))?;
        }

        let mut g = Graph::<f32>::new();
        let (va, vb) = (g.input(a32), g.input(b32));
        if let Some(loss) = rdrop_loss(&mut g, va, vb, &y, alpha).unwrap() {
            let grads = g.backward(loss).unwrap();
            for v in [va, vb] {
                let gv = grads.input(v).unwrap();
                for (r, &t) in y.iter().enumerate() {
                    ensure(t >= 0 || gv.row(r).iter().all(|&x| x == 0.0), || {
                        format!("trial {trial}: masked frame {r} has gradient {:?}", gv.row(r))
                    })?;
                }
            }
        }
    }
    ensure(worst_alpha0 < 1e-6, || format!("alpha = 0 differs from mean CE by {worst_alpha0:e}"))?;
    ensure(worst_same < 1e-6, || format!("identical passes differ from CE by {worst_same:e}"))?;
    Ok(format!(
        "200 random cases; alpha=0 vs CE {worst_alpha0:.1e}, identical passes vs CE {worst_same:.1e}, \
         symmetric bitwise, L >= 0, masked gradients exactly 0"
    ))
}

/// Per-class F1 as `2 TP / (2 TP + FP + FN)` from a direct scan, 0 when the
/// class is neither present nor predicted.
fn brute_force_macro_f1(y: &[i8], p: &[u8]) -> (f64, [f64; NUM_CLASSES]) {
    let mut per = [0.0; NUM_CLASSES];
    for (c, f) in per.iter_mut().enumerate() {
        let (mut tp, mut fp, mut fne) = (0u64, 0u64, 0u64);
        for (&yi, &pi) in y.iter().zip(p) {
            if yi < 0 {
                continue;
            }
            let (is_y, is_p) = (yi as usize == c, pi as usize == c);
            tp += (is_y && is_p) as u64;
            fp += (!is_y && is_p) as u64;
            fne += (is_y && !is_p) as u64;
        }
        let den = 2 * tp + fp + fne;
        *f = if den == 0 { 0.0 } else { (2 * tp) as f64 / den as f64 };
    }
    (per.iter().sum::<f64>() / NUM_CLASSES as f64, per)
}

// 4. Macro F1 against a brute-force scorer.
fn macro_f1_oracle() -> Outcome {
    let hand = macro_f1(&confusion_valid(&[0, 0, 1, 1, 2], &[0, 1, 1, 1, 2]).unwrap());
    let want = (2.0 / 3.0 + 0.8 + 1.0) / 8.0;
    ensure((hand.macro_f1 - want).abs() < 1e-12, || format!("hand example gives {}", hand.macro_f1))?;

    let mut worst = 0.0f64;
    let mut with_absent = 0;
    for trial in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let n = rng.random_range(0..300);
        // Restricting the alphabet leaves some classes absent on both sides.
        let k = rng.random_range(1..=NUM_CLASSES as u8);
        let y: Vec<i8> = (0..n)
            .map(|_| if rng.random_bool(0.1) { -1 } else { rng.random_range(0..k) as i8 })
            .collect();
        let p: Vec<u8> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let (want, per_want) = brute_force_macro_f1(&y, &p);
        let got = macro_f1(&confusion_valid(&y, &p).map_err(|e| e.to_string())?);
        worst = worst.max((got.macro_f1 - want).abs());
        for (a, b) in got.per_class_f1.iter().zip(per_want) {
            worst = worst.max((a - b).abs());
        }
        with_absent += (k < NUM_CLASSES as u8) as usize;
    }
    ensure(worst < 1e-12, || format!("max difference {worst:e}"))?;
    Ok(format!(
        "1000 random tracks ({with_absent} with absent classes), max difference {worst:.1e}; hand example {:.5}",
        hand.macro_f1
    ))
}

// 5. Windows tile every video exactly once.
fn segmentation() -> Outcome {
    let (l, p) = (128, 128);
    for n in 1..=1000usize {
        let spans = segment_video(n, l, p).map_err(|e| e.to_string())?;
        let mut covered = vec![0u32; n];
        for s in &spans {
            for f in s.rows() {
                covered[f] += 1;
            }
        }
        ensure(covered.iter().all(|&c| c == 1), || format!("n = {n}: coverage {covered:?}"))?;
        let candidates = n / p + 1;
        let pruned = (1..=candidates).filter(|i| (i - 1) * p + 1 > n).count();
        ensure(spans.len() == candidates - pruned, || {
            format!("n = {n}: {} windows, expected {}", spans.len(), candidates - pruned)
        })?;
    }
    for (n, want) in [(300, 3), (256, 2), (100, 1)] {
        let got = segment_video(n, l, p).unwrap().len();
        ensure(got == want, || format!("n = {n}: {got} windows, expected {want}"))?;
    }
    Ok("n = 1..=1000 covered exactly once; 300 -> 3, 256 -> 2, 100 -> 1".into())
}

/// Trains on the training split with default hyperparameters, scoring the
/// same videos after every epoch; stops once `target` is reached.
fn train_to_target(dir: &Path, encoder: EncoderKind, target: f64) -> Result<(usize, f64, Duration), String> {
    let manifest = Manifest::load(&dir.join("manifest.json")).map_err(|e| e.to_string())?;
    let videos = load_split(&manifest, "train", &[SYNTH_VISUAL.into()], &[SYNTH_AUDIO.into()])
        .map_err(|e| e.to_string())?;
    let cfg = ModelConfig {
        encoder,
        ..ModelConfig::default()
    };
    let train_cfg = TrainConfig::default();
    let started = Instant::now();
    let (model, mut params) = Model::new(&cfg, videos[0].input_dim, train_cfg.seed).map_err(|e| e.to_string())?;
    let mut best = 0.0f64;
    let out = train(&model, &mut params, &videos, &[], &train_cfg, None, |r| {
        best = best.max(r.val_macro_f1);
        if r.val_macro_f1 >= target {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    })
    .map_err(|e| e.to_string())?;
    Ok((out.log.len(), best, started.elapsed()))
}

// 6. Both encoders learn the synthetic task at default settings.
fn synthetic_end_to_end() -> Outcome {
    let budget = Duration::from_secs(300);
    let mut total = Duration::ZERO;
    let mut lines = Vec::new();
    let mut problems = Vec::new();
    for (sigma, target) in [(1.0, 0.90), (0.0, 1.0)] {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let synth = SynthConfig {
            sigma,
            ..SynthConfig::default()
        };
        synth_dataset(&synth, dir.path()).map_err(|e| e.to_string())?;
        for encoder in [EncoderKind::Lstm, EncoderKind::Transformer] {
            let (epochs, best, took) = train_to_target(dir.path(), encoder, target)?;
            total += took;
            lines.push(format!(
                "{encoder:?} sigma={sigma}: train macro-F1 {best:.4} after {epochs} epochs in {:.0}s",
                took.as_secs_f64()
            ));
            if best < target {
                problems.push(format!("{encoder:?} sigma={sigma} reached only {best:.4} < {target}"));
            }
        }
    }
    if total >= budget {
        problems.push(format!("total {:.0}s exceeds {}s", total.as_secs_f64(), budget.as_secs()));
    }
    let summary = format!("{}; total {:.0}s", lines.join("; "), total.as_secs_f64());
    if problems.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{}. {summary}", problems.join("; ")))
    }
}

/// Probability rows with entries in multiples of 1/64, so that every sum is
/// exact and ties in the mean are real ties.
fn dyadic_row(rng: &mut ChaCha8Rng) -> [f64; NUM_CLASSES] {
    let mut units = [0u32; NUM_CLASSES];
    for _ in 0..64 {
        units[rng.random_range(0..NUM_CLASSES)] += 1;
    }
    units.map(|u| u as f64 / 64.0)
}

/// Plurality, then highest mean probability, then lowest index.
fn brute_force_vote(labels: &[u8], probs: &[[f64; NUM_CLASSES]]) -> u8 {
    let count = |c: u8| labels.iter().filter(|&&l| l == c).count();
    let mean = |c: u8| probs.iter().map(|p| p[c as usize]).sum::<f64>() / probs.len() as f64;
    let top = (0..NUM_CLASSES as u8).map(count).max().unwrap();
    let tied: Vec<u8> = (0..NUM_CLASSES as u8).filter(|&c| count(c) == top).collect();
    let best = tied.iter().map(|&c| mean(c)).fold(f64::NEG_INFINITY, f64::max);
    *tied.iter().find(|&&c| mean(c) == best).unwrap()
}

fn write_tracks(dir: &Path, tracks: &[PredictionTrack]) -> Result<(), String> {
    for t in tracks {
        t.save(&dir.join(format!("{}.csv", t.video_id))).map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn score(tracks: &[PredictionTrack], labels: &BTreeMap<String, Vec<i8>>) -> f64 {
    let mut cm = mmexpr::evaluation::ConfusionMatrix::new();
    for t in tracks {
        cm.merge(&confusion_valid(&labels[&t.video_id], &t.preds).unwrap());
    }
    macro_f1(&cm).macro_f1
}

// 7. Vote fusion against an exhaustive tally, and a fixture where voting
//    repairs disjoint member errors.
fn ensemble_vote() -> Outcome {
    let mut frames = 0usize;
    for members in 2..=4usize {
        for classes in 1..=NUM_CLASSES {
            for uniform in [false, true] {
                let mut rng = ChaCha8Rng::seed_from_u64((members * 100 + classes) as u64);
                let combos = classes.pow(members as u32);
                let mut preds = vec![Vec::with_capacity(combos); members];
                let mut probs = vec![Vec::with_capacity(combos); members];
                for code in 0..combos {
                    let mut rest = code;
                    for m in 0..members {
                        preds[m].push((rest % classes) as u8);
                        rest /= classes;
                        probs[m].push(if uniform { [1.0 / 8.0; NUM_CLASSES] } else { dyadic_row(&mut rng) });
                    }
                }
                let tracks: Vec<PredictionTrack> = (0..members)
                    .map(|m| PredictionTrack::new("v", preds[m].clone(), probs[m].clone()).unwrap())
                    .collect();
                let fused = vote(&tracks).map_err(|e| e.to_string())?;
                for f in 0..combos {
                    let labels: Vec<u8> = (0..members).map(|m| preds[m][f]).collect();
                    let rows: Vec<[f64; NUM_CLASSES]> = (0..members).map(|m| probs[m][f]).collect();
                    let want = brute_force_vote(&labels, &rows);
                    ensure(fused.preds[f] == want, || {
                        format!("{members} members, votes {labels:?}: got {} want {want}", fused.preds[f])
                    })?;
                }
                frames += combos;
            }
        }
    }

    // Three members, each wrong on its own third of every video.
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut labels = BTreeMap::new();
    let mut member_tracks: Vec<Vec<PredictionTrack>> = vec![Vec::new(); 3];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for v in 0..4 {
        let id = format!("video_{v}");
        let n = 90;
        let y: Vec<i8> = (0..n).map(|f| ((f / 10 + v) % NUM_CLASSES) as i8).collect();
        for (m, tracks) in member_tracks.iter_mut().enumerate() {
            let preds: Vec<u8> = y
                .iter()
                .enumerate()
                .map(|(f, &t)| {
                    if f % 3 == m {
                        (t as u8 + rng.random_range(1..NUM_CLASSES as u8)) % NUM_CLASSES as u8
                    } else {
                        t as u8
                    }
                })
                .collect();
            let probs = preds.iter().map(|&p| {
                let mut row = [0.02; NUM_CLASSES];
                row[p as usize] = 1.0 - 0.02 * 7.0;
                row
            });
            tracks.push(PredictionTrack::new(id.clone(), preds.clone(), probs.collect()).unwrap());
        }
        labels.insert(id, y);
    }
    let mut dirs = Vec::new();
    for (m, tracks) in member_tracks.iter().enumerate() {
        let dir = root.path().join(format!("member_{m}"));
        write_tracks(&dir, tracks)?;
        dirs.push(load_prediction_dir(&dir).map_err(|e| e.to_string())?);
    }
    let fused = vote_dirs(&dirs).map_err(|e| e.to_string())?;
    let fused_score = score(&fused, &labels);
    let member_scores: Vec<f64> = member_tracks.iter().map(|t| score(t, &labels)).collect();
    for (m, s) in member_scores.iter().enumerate() {
        ensure(fused_score >= *s, || format!("ensemble {fused_score:.4} below member {m} {s:.4}"))?;
    }
    let shown: Vec<String> = member_scores.iter().map(|s| format!("{s:.4}")).collect();
    Ok(format!(
        "{frames} enumerated frames match; fixture ensemble {fused_score:.4} vs members [{}]",
        shown.join(", ")
    ))
}

fn mmexpr(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_mmexpr"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("mmexpr {args:?} failed: {}", String::from_utf8_lossy(&out.stderr))
    })
}

/// Log lines with the wall-clock field removed.
fn log_without_wall_time(path: &Path) -> Result<Vec<serde_json::Value>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
    text.lines()
        .map(|line| {
            let mut v: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
            v.as_object_mut().ok_or("log line is not an object")?.remove("wall_ms");
            Ok(v)
        })
        .collect()
}

// 8. Two runs of `train` with the same inputs write identical files.
fn determinism() -> Outcome {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = root.path().join("data");
    let data_s = data.to_str().unwrap();
    mmexpr(&["synth", "--out", data_s, "--videos", "5", "--frames", "70", "--val-videos", "1"])?;
    let manifest = data.join("manifest.json");
    let mut compared = 0;
    for (name, model) in [
        ("lstm", r#"{"encoder": "lstm", "d_model": 32, "lstm": {"hidden": 16}, "head": [16], "segment": {"l": 16, "p": 16}}"#),
        (
            "transformer",
            r#"{"encoder": "transformer", "d_model": 32, "transformer": {"layers": 2, "heads": 4, "ffn_dim": 48},
                "head": [16], "segment": {"l": 16, "p": 8}}"#,
        ),
    ] {
        let config = root.path().join(format!("{name}.json"));
        let text = format!(
            r#"{{"visual": ["{SYNTH_VISUAL}"], "audio": ["{SYNTH_AUDIO}"], "model": {model}, "train": {{"epochs": 3, "seed": 11}}}}"#
        );
        std::fs::write(&config, text).map_err(|e| e.to_string())?;
        let out = root.path().join(format!("run_{name}"));
        let first = root.path().join(format!("run_{name}_first"));
        let args = [
            "train",
            "--config",
            config.to_str().unwrap(),
            "--manifest",
            manifest.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ];
        mmexpr(&args)?;
        std::fs::rename(&out, &first).map_err(|e| e.to_string())?;
        mmexpr(&args)?;
        for file in ["best.ckpt", "last.ckpt", "config.json", "run.json"] {
            let a = std::fs::read(first.join(file)).map_err(|e| format!("{file}: {e}"))?;
            let b = std::fs::read(out.join(file)).map_err(|e| format!("{file}: {e}"))?;
            ensure(a == b, || format!("{name}: {file} differs between runs"))?;
            compared += 1;
        }
        let (a, b) = (
            log_without_wall_time(&first.join("train_log.jsonl"))?,
            log_without_wall_time(&out.join("train_log.jsonl"))?,
        );
        ensure(a.len() == 3 && a == b, || format!("{name}: training logs differ"))?;
        compared += 1;
    }
    Ok(format!("both encoders, {compared} files identical across repeated runs (log compared without wall_ms)"))
}
