//! Acceptance criteria 1-10, one PASS/FAIL line each.
//!
//! Runs as a plain binary so the criteria execute one after another and the
//! timing checks are not disturbed by parallel tests. Numeric arguments select
//! criteria (`cargo test --test acceptance -- 3 5`). `ACCEPTANCE_CHECKPOINT`
//! names a file used to cache the tracking model between runs.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Output};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use siammask_core::config::RunConfig;
use siammask_core::geometry::{convex_hull, mbr_box, min_max_box, rotated_iou, BinaryMask, BoxStrategy, RotatedBox};
use siammask_core::io::{
    decode_pgm, decode_ppm, encode_pgm, encode_ppm, format_box_line, parse_box_line, save_sequence, Image,
    SequenceData,
};
use siammask_core::losses::{label_rows_2b, mask_loss, MaskLossMode, RowLabels};
use siammask_core::metrics::{
    accuracy_robustness, f_measure_stats, format_records, jaccard_stats, miou_map, oracle_boxes, parse_records,
    OracleKind, ResetConfig,
};
use siammask_core::model::{Model, ModelConfig, ParamSet, Variant};
use siammask_core::synth::{gen_sequence, Jitter, SceneConfig, ShapeFamily};
use siammask_core::tensor::{decode_checkpoint, encode_checkpoint};
use siammask_core::tracker::{ResettableTracker, Tracker, TrackerConfig};
use siammask_core::train::{evaluate_pair, synth_pairs, TrainConfig, Trainer};
use siammask_core::Tape;

const GRADCHECK_TOLERANCE: f64 = 1e-3;
const GRADCHECK_BUDGET_S: f64 = 60.0;
const LN2_TOLERANCE: f64 = 1e-6;
const OVERFIT_PAIRS: usize = 50;
const OVERFIT_MASK_LOSS: f64 = 0.1;
const OVERFIT_IOU: f64 = 0.9;
const OVERFIT_STEPS_3B: usize = 2000;
const OVERFIT_STEPS_2B: usize = 3000;
const OVERFIT_BUDGET_S: f64 = 600.0;
const SWEEP_ANGLES: usize = 3600;
const SWEEP_BLOBS: usize = 200;
const MBR_AREA_TOLERANCE: f64 = 0.005;
const RASTER_SIDE: usize = 512;
const RASTER_PAIRS: usize = 500;
const RASTER_TOLERANCE: f64 = 0.01;
const AREA_MASKS: usize = 1000;
const ORDERING_SEQUENCES: u64 = 20;
const ORDERING_LENGTH: usize = 60;
const STRICT_ANGLE_DEG: f64 = 10.0;
const HELD_OUT_SEQUENCES: u64 = 10;
const HELD_OUT_LENGTH: usize = 100;
const E2E_MIOU: f64 = 0.6;
const E2E_DECAY: f64 = 0.1;
const FPS_SPREAD: f64 = 0.2;

/// Tracking model: 3000 steps on 3000 pairs from 200 training scenes.
const TRACK_MODEL_SEED: u64 = 1;
const TRACK_TRAIN_SCENES: usize = 200;
const TRACK_TRAIN_PAIRS: usize = 3000;
const TRACK_TRAIN_STEPS: usize = 3000;
const TRACK_TRAIN_DATA_SEED: u64 = 1000;
const HELD_OUT_SEED: u64 = 900_000;
const ORDERING_SEED: u64 = 500_000;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

struct Ctx {
    work: tempfile::TempDir,
    model: Option<Model>,
    gradcheck_stdout: Option<String>,
}

impl Ctx {
    fn dir(&self, name: &str) -> PathBuf {
        let d = self.work.path().join(name);
        fs::create_dir_all(&d).unwrap();
        d
    }

    fn tracking_model(&mut self) -> &Model {
        if self.model.is_none() {
            let cache = std::env::var_os("ACCEPTANCE_CHECKPOINT").map(PathBuf::from);
            let config = ModelConfig {
                variant: Variant::ThreeBranch,
                ..Default::default()
            };
            let model = match cache.as_deref().filter(|p| p.is_file()) {
                Some(p) => Model::from_parts(config, ParamSet::load(p).unwrap()).unwrap(),
                None => {
                    let t = Instant::now();
                    let pairs = synth_pairs(
                        TRACK_TRAIN_SCENES,
                        40,
                        TRACK_TRAIN_PAIRS,
                        (256, 256),
                        Jitter::DEFAULT,
                        TRACK_TRAIN_DATA_SEED,
                    )
                    .unwrap();
                    let mut model = Model::new(config, TRACK_MODEL_SEED);
                    let cfg = TrainConfig {
                        steps: TRACK_TRAIN_STEPS,
                        ..Default::default()
                    };
                    Trainer::new(&mut model, cfg).unwrap().run(&pairs, |_| {}).unwrap();
                    eprintln!("tracking model trained in {:.1}s", t.elapsed().as_secs_f64());
                    if let Some(p) = &cache {
                        model.params.save(p).unwrap();
                    }
                    model
                }
            };
            self.model = Some(model);
        }
        self.model.as_ref().unwrap()
    }

    /// The tracking model as a `train` output directory.
    fn tracking_checkpoint(&mut self) -> PathBuf {
        let dir = self.work.path().join("model");
        let ckpt = dir.join("checkpoint.bin");
        if !ckpt.is_file() {
            fs::create_dir_all(&dir).unwrap();
            let mut cfg = RunConfig::default();
            cfg.seed = TRACK_MODEL_SEED;
            cfg.model = self.tracking_model().config.clone();
            cfg.save(&dir.join("config.txt")).unwrap();
            self.tracking_model().params.save(&ckpt).unwrap();
        }
        ckpt
    }
}

fn siammask(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_siammask"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("siammask binary")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn records(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn held_out(s: u64) -> SequenceData {
    gen_sequence(&SceneConfig::random(HELD_OUT_SEED + s, 256, 256), HELD_OUT_LENGTH).unwrap()
}

fn gradient_integrity(ctx: &mut Ctx) -> Outcome {
    let t = Instant::now();
    let o = siammask(&["gradcheck"], ctx.work.path());
    let secs = t.elapsed().as_secs_f64();
    let text = stdout(&o);
    let mut worst: Vec<(String, f64)> = Vec::new();
    let mut all_pass = true;
    for (k, v) in records(&text) {
        if let Some(name) = k.strip_prefix("gradcheck.") {
            let err: f64 = v.split_whitespace().next().unwrap().parse().unwrap();
            all_pass &= v.contains("pass=true") && err < GRADCHECK_TOLERANCE;
            worst.push((name.to_string(), err));
        }
    }
    ctx.gradcheck_stdout = Some(text);
    let max_of = |pred: &dyn Fn(&str) -> bool| {
        worst.iter().filter(|(n, _)| pred(n)).map(|(_, e)| *e).fold(0.0, f64::max)
    };
    let has_e2e = worst.iter().any(|(n, _)| n == "loss_2b") && worst.iter().any(|(n, _)| n == "loss_3b");
    let passed = code(&o) == 0 && all_pass && has_e2e && secs < GRADCHECK_BUDGET_S;
    outcome(
        passed,
        format!(
            "{} cases, max rel err ops/losses {:.1e}, L_2B {:.1e}, L_3B {:.1e} (tol {GRADCHECK_TOLERANCE:e}), {secs:.1}s of {GRADCHECK_BUDGET_S}s",
            worst.len(),
            max_of(&|n| n != "loss_2b" && n != "loss_3b"),
            max_of(&|n| n == "loss_2b"),
            max_of(&|n| n == "loss_3b"),
        ),
    )
}

fn mask_loss_hand_check(_: &mut Ctx) -> Outcome {
    let mut tape = Tape::<f64>::new();
    let labels = RowLabels {
        cells: 1,
        k: 1,
        y: vec![1.0],
        masks: [(0, vec![1.0])].into_iter().collect(),
        mask_size: 1,
        box_targets: vec![None],
    };
    let logits = tape.constant(&[1, 1, 1], &[0.0]).unwrap();
    let l = mask_loss(&mut tape, logits, &labels, MaskLossMode::Strict).unwrap();
    let single = tape.item(l);
    let negatives = label_rows_2b((8, 8), -1.0);
    let vals: Vec<f32> = (0..9 * 289).map(|i| ((i * 7919) % 97) as f32 - 48.0).collect();
    let logits = tape.constant(&[9, 17, 17], &vals).unwrap();
    let l = mask_loss(&mut tape, logits, &negatives, MaskLossMode::Strict).unwrap();
    let zero = tape.item(l);
    let err = (single - std::f64::consts::LN_2).abs();
    outcome(
        err < LN2_TOLERANCE && zero == 0.0,
        format!("single RoW {single:.9} (|err| {err:.1e} < {LN2_TOLERANCE:e}), all-negative {zero}"),
    )
}

fn overfit(_: &mut Ctx) -> Outcome {
    let t = Instant::now();
    let pairs = synth_pairs(10, 20, OVERFIT_PAIRS, (256, 256), Jitter::DEFAULT, 7).unwrap();
    let mut passed = true;
    let mut parts = Vec::new();
    for (variant, steps) in [(Variant::ThreeBranch, OVERFIT_STEPS_3B), (Variant::TwoBranch, OVERFIT_STEPS_2B)] {
        let mut model = Model::new(
            ModelConfig {
                variant,
                ..Default::default()
            },
            1,
        );
        let cfg = TrainConfig {
            steps,
            ..Default::default()
        };
        Trainer::new(&mut model, cfg.clone()).unwrap().run(&pairs, |_| {}).unwrap();
        let evals: Vec<_> = pairs.iter().map(|p| evaluate_pair(&model, &cfg, p).unwrap()).collect();
        let loss = mean(&evals.iter().map(|e| e.mask_loss).collect::<Vec<_>>());
        let iou = mean(&evals.iter().map(|e| e.mask_iou).collect::<Vec<_>>());
        passed &= loss < OVERFIT_MASK_LOSS && iou > OVERFIT_IOU;
        parts.push(format!("{} {steps} steps L_mask {loss:.4} IoU {iou:.3}", variant.as_str()));
    }
    let secs = t.elapsed().as_secs_f64();
    passed &= secs < OVERFIT_BUDGET_S;
    outcome(
        passed,
        format!(
            "{} (need < {OVERFIT_MASK_LOSS}, > {OVERFIT_IOU}), {secs:.0}s of {OVERFIT_BUDGET_S}s",
            parts.join("; ")
        ),
    )
}

fn random_convex_blob(rng: &mut ChaCha8Rng, side: usize) -> BinaryMask {
    loop {
        let r = rng.gen_range(6.0..40.0);
        let c = (side as f64 / 2.0, side as f64 / 2.0);
        let pts: Vec<(f64, f64)> = (0..rng.gen_range(3..10))
            .map(|_| (c.0 + rng.gen_range(-r..r), c.1 + rng.gen_range(-r..r)))
            .collect();
        let hull = convex_hull(&pts);
        if hull.len() < 3 {
            continue;
        }
        let m = BinaryMask::from_fn(side, side, |x, y| {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            (0..hull.len()).all(|i| {
                let (a, b) = (hull[i], hull[(i + 1) % hull.len()]);
                (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0) >= 0.0
            })
        })
        .unwrap();
        if m.count() >= 3 {
            return m;
        }
    }
}

/// Smallest padded bounding rectangle over evenly spaced orientations in `[0, pi/2)`.
fn sweep_area(mask: &BinaryMask) -> f64 {
    let pts: Vec<(f64, f64)> = mask.set_pixels().map(|(x, y)| (x as f64 + 0.5, y as f64 + 0.5)).collect();
    (0..SWEEP_ANGLES)
        .map(|i| {
            let t = PI / 2.0 * i as f64 / SWEEP_ANGLES as f64;
            let (c, s) = (t.cos(), t.sin());
            let (mut u0, mut u1, mut v0, mut v1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
            for &(x, y) in &pts {
                let (u, v) = (x * c + y * s, -x * s + y * c);
                u0 = u0.min(u);
                u1 = u1.max(u);
                v0 = v0.min(v);
                v1 = v1.max(v);
            }
            (u1 - u0 + 1.0) * (v1 - v0 + 1.0)
        })
        .fold(f64::MAX, f64::min)
}

fn raster_iou(a: &RotatedBox, b: &RotatedBox) -> f64 {
    let step = 64.0 / RASTER_SIDE as f64;
    let (mut inter, mut union) = (0usize, 0usize);
    for j in 0..RASTER_SIDE {
        for i in 0..RASTER_SIDE {
            let (x, y) = ((i as f64 + 0.5) * step, (j as f64 + 0.5) * step);
            let (ia, ib) = (a.contains(x, y), b.contains(x, y));
            inter += usize::from(ia && ib);
            union += usize::from(ia || ib);
        }
    }
    inter as f64 / union.max(1) as f64
}

fn random_mask(rng: &mut ChaCha8Rng) -> BinaryMask {
    let (w, h) = (rng.gen_range(8..80), rng.gen_range(8..80));
    let blobs: Vec<RotatedBox> = (0..rng.gen_range(1..4))
        .map(|_| {
            RotatedBox::new(
                rng.gen_range(0.0..w as f64),
                rng.gen_range(0.0..h as f64),
                rng.gen_range(1.0..40.0),
                rng.gen_range(1.0..40.0),
                rng.gen_range(-PI..PI),
            )
            .unwrap()
        })
        .collect();
    let noise = rng.gen_range(0.0..0.05);
    let mut m = BinaryMask::from_fn(w, h, |x, y| {
        blobs.iter().any(|b| b.contains(x as f64 + 0.5, y as f64 + 0.5))
    })
    .unwrap();
    for y in 0..h {
        for x in 0..w {
            if rng.gen::<f64>() < noise {
                m.set(x, y, true);
            }
        }
    }
    if m.is_empty() {
        m.set(w / 2, h / 2, true);
    }
    m
}

fn geometry_oracles(_: &mut Ctx) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let worst_mbr = (0..SWEEP_BLOBS)
        .map(|_| {
            let m = random_convex_blob(&mut rng, 96);
            let oracle = sweep_area(&m);
            (mbr_box(&m).unwrap().area() - oracle).abs() / oracle
        })
        .fold(0.0, f64::max);
    let worst_iou = (0..RASTER_PAIRS)
        .map(|_| {
            let mut draw = || {
                RotatedBox::new(
                    rng.gen_range(16.0..48.0),
                    rng.gen_range(16.0..48.0),
                    rng.gen_range(4.0..32.0),
                    rng.gen_range(4.0..32.0),
                    rng.gen_range(-PI..PI),
                )
                .unwrap()
            };
            let (a, b) = (draw(), draw());
            (rotated_iou(&a, &b) - raster_iou(&a, &b)).abs()
        })
        .fold(0.0, f64::max);
    let violations = (0..AREA_MASKS)
        .filter(|_| {
            let m = random_mask(&mut rng);
            mbr_box(&m).unwrap().area() > min_max_box(&m).unwrap().area()
        })
        .count();
    outcome(
        worst_mbr <= MBR_AREA_TOLERANCE && worst_iou < RASTER_TOLERANCE && violations == 0,
        format!(
            "mbr vs {SWEEP_ANGLES}-angle sweep worst {:.3}% on {SWEEP_BLOBS} blobs (<= {}%), rotated_iou vs {RASTER_SIDE}^2 raster worst {worst_iou:.4} on {RASTER_PAIRS} pairs (< {RASTER_TOLERANCE}), area(MBR) > area(Min-max) on {violations}/{AREA_MASKS} masks",
            100.0 * worst_mbr,
            100.0 * MBR_AREA_TOLERANCE
        ),
    )
}

fn ordering_scene(s: u64) -> SceneConfig {
    let mut cfg = SceneConfig::random(ORDERING_SEED + s, 256, 256);
    cfg.shape = ShapeFamily::Rectangle;
    cfg.angular_velocity = (s as f64 - 9.5) * 0.002;
    cfg.deform = 0.1 + 0.01 * s as f64;
    cfg.deform_period = 30.0;
    cfg
}

fn representation_ordering(ctx: &mut Ctx) -> Outcome {
    let mut order_ok = 0;
    let (mut strict_needed, mut strict_ok) = (0, 0);
    let mut per_kind: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let seqs: Vec<_> = (0..ORDERING_SEQUENCES)
        .map(|s| (ordering_scene(s), gen_sequence(&ordering_scene(s), ORDERING_LENGTH).unwrap()))
        .collect();
    for (cfg, seq) in &seqs {
        let miou = |k| miou_map(&oracle_boxes(&seq.boxes, k).unwrap(), &seq.boxes, &[]).unwrap().0;
        let (mbr, mm, far) = (miou(OracleKind::Mbr), miou(OracleKind::MinMax), miou(OracleKind::FixedAr));
        per_kind.entry("mbr").or_default().push(mbr);
        per_kind.entry("min_max").or_default().push(mm);
        per_kind.entry("fixed_ar").or_default().push(far);
        order_ok += usize::from(mbr >= mm && mm >= far);
        let turn = cfg.angular_velocity.abs() * (ORDERING_LENGTH - 1) as f64;
        if turn.to_degrees() >= STRICT_ANGLE_DEG {
            strict_needed += 1;
            strict_ok += usize::from(mbr > mm && mm > far);
        }
    }
    let model = ctx.tracking_model();
    let mut tracked: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for strategy in [BoxStrategy::Mbr, BoxStrategy::MinMax] {
        let tracker = Tracker::new(
            model,
            TrackerConfig {
                box_strategy: strategy,
                ..Default::default()
            },
        );
        for (_, seq) in &seqs {
            let res = tracker.track_sequence(&seq.frames, &min_max_box(&seq.masks[0]).unwrap()).unwrap();
            let ious = siammask_core::metrics::frame_ious(&res.boxes()[1..], &seq.boxes[1..]).unwrap();
            tracked.entry(strategy.as_str()).or_default().extend(ious);
        }
    }
    let (t_mbr, t_mm) = (mean(&tracked["mbr"]), mean(&tracked["minmax"]));
    let n = seqs.len();
    outcome(
        order_ok == n && strict_ok == strict_needed && t_mbr >= t_mm,
        format!(
            "oracle mIoU mbr {:.3} >= min_max {:.3} >= fixed_ar {:.3} on {order_ok}/{n} sequences, strict on {strict_ok}/{strict_needed} turning >= {STRICT_ANGLE_DEG} deg; tracked MBR {t_mbr:.3} vs Min-max {t_mm:.3}",
            mean(&per_kind["mbr"]),
            mean(&per_kind["min_max"]),
            mean(&per_kind["fixed_ar"]),
        ),
    )
}

fn end_to_end(ctx: &mut Ctx) -> Outcome {
    let tracker = Tracker::new(ctx.tracking_model(), TrackerConfig::default());
    let (mut ious, mut failures, mut jd, mut fd) = (Vec::new(), 0, Vec::new(), Vec::new());
    for s in 0..HELD_OUT_SEQUENCES {
        let seq = held_out(s);
        let res = tracker.track_sequence(&seq.frames, &min_max_box(&seq.masks[0]).unwrap()).unwrap();
        ious.extend(siammask_core::metrics::frame_ious(&res.boxes()[1..], &seq.boxes[1..]).unwrap());
        let masks = res.masks();
        jd.push(jaccard_stats(&masks[1..], &seq.masks[1..]).unwrap().decay);
        fd.push(f_measure_stats(&masks[1..], &seq.masks[1..], None).unwrap().decay);
        let mut rt = ResettableTracker::new(&tracker, &seq.frames);
        failures += accuracy_robustness(&seq.boxes, ResetConfig::default(), &mut rt).unwrap().failures;
    }
    let (miou, j, f) = (mean(&ious), mean(&jd), mean(&fd));
    outcome(
        miou > E2E_MIOU && failures == 0 && j < E2E_DECAY && f < E2E_DECAY,
        format!(
            "{HELD_OUT_SEQUENCES} held-out x {HELD_OUT_LENGTH} frames: mIoU {miou:.3} (> {E2E_MIOU}), failures {failures} (= 0), J_decay {j:.3}, F_decay {f:.3} (< {E2E_DECAY})"
        ),
    )
}

const SMALL_CONFIG: &str = "data.sequences=2\ndata.length=12\ndata.width=160\ndata.height=160\ndata.pairs=8\ntrain.steps=3\ntrain.calibration_pairs=2\n";

fn strip_timing(text: &str) -> String {
    text.lines()
        .map(|l| l.split_whitespace().filter(|w| !w.starts_with("seconds=")).collect::<Vec<_>>().join(" "))
        .collect::<Vec<_>>()
        .join("\n")
}

fn causality_determinism(ctx: &mut Ctx) -> Outcome {
    let ckpt = ctx.tracking_checkpoint();
    let dir = ctx.dir("determinism");
    fs::write(dir.join("small.cfg"), SMALL_CONFIG).unwrap();
    fs::write(dir.join("short.cfg"), SMALL_CONFIG.replace("data.length=12", "data.length=5")).unwrap();
    let ck = ckpt.to_str().unwrap();
    let mut failed = Vec::new();
    let mut run = |args: &[&str]| {
        let o = siammask(args, &dir);
        if code(&o) != 0 {
            failed.push(format!("{args:?} exited {}", code(&o)));
        }
        o
    };
    let mut same = BTreeMap::new();
    for tag in ["a", "b"] {
        run(&["synth", "--config", "small.cfg", "--out", &format!("data_{tag}")]);
        run(&["train", "--config", "small.cfg", "--data", "data_a", "--out", &format!("run_{tag}")]);
        run(&["track", "--checkpoint", ck, "--seq", "data_a", "--out", &format!("track_{tag}")]);
        for p in ["tracking", "vos"] {
            run(&["eval", "--protocol", p, "--pred", "track_a", "--gt", "data_a", "--out", &format!("{p}_{tag}")]);
        }
        run(&["eval", "--protocol", "oracle", "--gt", "data_a", "--out", &format!("oracle_{tag}")]);
        let rep = run(&["report", "tracking_a", "vos_a", "oracle_a"]);
        same.insert(format!("report_{tag}"), stdout(&rep));
    }
    let mut checks = Vec::new();
    let trees = |a: &str, b: &str| {
        let (ta, mut tb) = (tree(&dir.join(a)), tree(&dir.join(b)));
        tb.retain(|p, _| ta.contains_key(p));
        ta == tb && !ta.is_empty()
    };
    for name in ["data", "run", "track", "tracking", "vos", "oracle"] {
        checks.push((name.to_string(), trees(&format!("{name}_a"), &format!("{name}_b"))));
    }
    checks.push(("report".into(), same["report_a"] == same["report_b"]));
    let again = siammask(&["gradcheck"], &dir);
    let first = ctx.gradcheck_stdout.clone().unwrap_or_default();
    checks.push((
        "gradcheck".into(),
        !first.is_empty() && strip_timing(&first) == strip_timing(&stdout(&again)),
    ));

    run(&["synth", "--config", "short.cfg", "--out", "data_short"]);
    let long = tree(&dir.join("data_a/seq_000/frames"));
    let short = tree(&dir.join("data_short/seq_000/frames"));
    checks.push(("synth prefix".into(), short.iter().all(|(p, b)| long.get(p) == Some(b)) && short.len() == 5));
    run(&["track", "--checkpoint", ck, "--seq", "data_short/seq_000", "--out", "track_short"]);
    let full_boxes = fs::read_to_string(dir.join("track_a/seq_000/boxes.txt")).unwrap_or_default();
    let short_boxes = fs::read_to_string(dir.join("track_short/boxes.txt")).unwrap_or_default();
    let short_masks = tree(&dir.join("track_short/masks"));
    let full_masks = tree(&dir.join("track_a/seq_000/masks"));
    checks.push((
        "track prefix".into(),
        short_boxes.lines().count() == 4
            && full_boxes.starts_with(&short_boxes)
            && short_masks.iter().all(|(p, b)| full_masks.get(p) == Some(b)),
    ));
    let bad: Vec<_> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| n.as_str()).collect();
    outcome(
        bad.is_empty() && failed.is_empty(),
        if bad.is_empty() && failed.is_empty() {
            format!(
                "bit-identical reruns of synth, train, track, eval x3, report, gradcheck; prefix-equal synth and track ({} checks)",
                checks.len()
            )
        } else {
            format!("mismatch: {bad:?}; command failures: {failed:?}")
        },
    )
}

/// Ground truth laid out as `track` output (frames after the first).
fn gt_as_prediction(gt: &Path, pred: &Path) {
    fs::create_dir_all(pred.join("masks")).unwrap();
    let boxes = fs::read_to_string(gt.join("boxes.txt")).unwrap();
    let tail: String = boxes.lines().skip(1).map(|l| format!("{l}\n")).collect();
    fs::write(pred.join("boxes.txt"), tail).unwrap();
    for m in fs::read_dir(gt.join("masks")).unwrap() {
        let m = m.unwrap().path();
        if m.file_name().unwrap() != "000000.pgm" {
            fs::copy(&m, pred.join("masks").join(m.file_name().unwrap())).unwrap();
        }
    }
}

fn metric_self_consistency(ctx: &mut Ctx) -> Outcome {
    let dir = ctx.dir("self_consistency");
    let seq = held_out(0);
    save_sequence(&dir.join("gt"), &seq).unwrap();
    gt_as_prediction(&dir.join("gt"), &dir.join("pred"));
    let t = records(&stdout(&siammask(
        &["eval", "--protocol", "tracking", "--pred", "pred", "--gt", "gt", "--out", "t"],
        &dir,
    )));
    let v = records(&stdout(&siammask(&["eval", "--protocol", "vos", "--pred", "pred", "--gt", "gt", "--out", "v"], &dir)));
    let num = |r: &BTreeMap<String, String>, k: &str| r.get(k).and_then(|s| s.parse::<f64>().ok()).unwrap_or(f64::NAN);
    let (miou, jm, fm, jd, fdec) = (
        num(&t, "miou"),
        num(&v, "J_mean"),
        num(&v, "F_mean"),
        num(&v, "J_decay"),
        num(&v, "F_decay"),
    );
    let identity = miou == 1.0 && jm == 1.0 && fm == 1.0 && jd == 0.0 && fdec == 0.0;

    let target = RotatedBox::new(5.0, 5.0, 10.0, 10.0, 0.0).unwrap();
    let planted = [1.0, 0.75, 0.5, 0.25, 0.0, 0.5, 0.875, 0.125];
    let preds: Vec<_> = planted
        .iter()
        .map(|&v| {
            if v == 0.0 {
                RotatedBox::new(55.0, 55.0, 10.0, 10.0, 0.0).unwrap()
            } else {
                RotatedBox::new(5.0 * v, 5.0, 10.0 * v, 10.0, 0.0).unwrap()
            }
        })
        .collect();
    let (pm, aps) = miou_map(&preds, &vec![target; planted.len()], &[0.5, 0.7]).unwrap();
    let planted_ok = pm == 0.5 && aps == [5.0 / 8.0, 3.0 / 8.0];
    outcome(
        identity && planted_ok,
        format!(
            "preds = gts: mIoU {miou}, J_mean {jm}, F_mean {fm}, J_decay {jd}, F_decay {fdec}; planted mIoU {pm} (hand 0.5), AP@0.5 {} (hand 0.625), AP@0.7 {} (hand 0.375)",
            aps[0], aps[1]
        ),
    )
}

fn io_round_trips(ctx: &mut Ctx) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut exact = true;
    let mut worst_box: f64 = 0.0;
    for _ in 0..200 {
        let (w, h) = (rng.gen_range(1..40), rng.gen_range(1..40));
        let img = Image::new(w, h, (0..w * h * 3).map(|_| rng.gen()).collect()).unwrap();
        let bytes = encode_ppm(&img);
        exact &= encode_ppm(&decode_ppm(&bytes, "f.ppm").unwrap()) == bytes;
        let m = BinaryMask::from_bits(w, h, (0..w * h).map(|_| rng.gen()).collect()).unwrap();
        let bytes = encode_pgm(&m);
        exact &= encode_pgm(&decode_pgm(&bytes, "m.pgm").unwrap()) == bytes;
        let recs: Vec<(String, f64)> = (0..5).map(|i| (format!("k{i}"), rng.gen::<f64>() * 10f64.powi(rng.gen_range(-30..30)))).collect();
        let back = parse_records(&format_records(&recs)).unwrap();
        exact &= recs.iter().all(|(k, v)| back[k].to_bits() == v.to_bits());
        let b = RotatedBox::new(
            rng.gen_range(-500.0..500.0),
            rng.gen_range(-500.0..500.0),
            rng.gen_range(0.5..300.0),
            rng.gen_range(0.5..300.0),
            rng.gen_range(-PI..PI),
        )
        .unwrap();
        let back = parse_box_line(&format_box_line(&b)).unwrap();
        for (p, q) in b.corners().iter().zip(back.corners().iter()) {
            worst_box = worst_box.max((p.0 - q.0).abs()).max((p.1 - q.1).abs());
        }
    }
    let model = Model::new(ModelConfig::default(), 5);
    let bytes = encode_checkpoint(model.params.iter());
    let decoded = decode_checkpoint(&bytes, "c.bin").unwrap();
    exact &= encode_checkpoint(decoded.iter().map(|(n, t)| (n.as_str(), t))) == bytes;

    let ckpt = ctx.tracking_checkpoint();
    let dir = ctx.dir("corrupted");
    let seq = gen_sequence(&SceneConfig::random(77, 128, 128), 4).unwrap();
    save_sequence(&dir.join("seq"), &seq).unwrap();
    let mut rejected = Vec::new();
    let mut check = |name: &str, args: &[&str], setup: &dyn Fn()| {
        setup();
        let c = code(&siammask(args, &dir));
        rejected.push((name.to_string(), c));
    };
    let ck = ckpt.to_str().unwrap().to_string();
    let frame = dir.join("seq/frames/000002.ppm");
    let original = fs::read(&frame).unwrap();
    check("truncated frame", &["track", "--checkpoint", &ck, "--seq", "seq", "--out", "o1"], &|| {
        fs::write(&frame, &original[..original.len() - 7]).unwrap()
    });
    fs::write(&frame, &original).unwrap();
    let broken = dir.join("broken.bin");
    fs::write(&broken, &bytes[..bytes.len() / 3]).unwrap();
    fs::copy(ckpt.parent().unwrap().join("config.txt"), dir.join("config.txt")).unwrap();
    check("truncated checkpoint", &["track", "--checkpoint", "broken.bin", "--seq", "seq", "--out", "o2"], &|| {});
    let mask = dir.join("seq/masks/000001.pgm");
    let mut mbytes = fs::read(&mask).unwrap();
    let last = mbytes.len() - 1;
    mbytes[last] = 17;
    check("bad mask value", &["eval", "--protocol", "vos", "--pred", "seq", "--gt", "seq", "--out", "o3"], &|| {
        fs::write(&mask, &mbytes).unwrap()
    });
    check("bad box line", &["eval", "--protocol", "oracle", "--gt", "seq", "--out", "o4"], &|| {
        fs::write(dir.join("seq/boxes.txt"), "1,2,3,4\n").unwrap()
    });
    check("bad config", &["synth", "--config", "bad.cfg", "--out", "o5"], &|| {
        fs::write(dir.join("bad.cfg"), "seed=banana\n").unwrap()
    });
    let all_rejected = rejected.iter().all(|(_, c)| *c != 0);
    outcome(
        exact && worst_box < 1e-9 && all_rejected,
        format!(
            "images, masks, records, checkpoints bit-exact: {exact}; box text worst corner error {worst_box:.1e} (< 1e-9); corrupted inputs exit {:?}",
            rejected.iter().map(|(n, c)| format!("{n}={c}")).collect::<Vec<_>>()
        ),
    )
}

fn throughput(ctx: &mut Ctx) -> Outcome {
    let ckpt = ctx.tracking_checkpoint();
    let dir = ctx.dir("throughput");
    save_sequence(&dir.join("seq"), &held_out(1)).unwrap();
    let fps: Vec<f64> = (0..2)
        .map(|i| {
            let o = siammask(
                &["track", "--checkpoint", ckpt.to_str().unwrap(), "--seq", "seq", "--out", &format!("o{i}")],
                &dir,
            );
            records(&stdout(&o)).get("fps").and_then(|v| v.parse().ok()).unwrap_or(0.0)
        })
        .collect();
    let spread = (fps[0] - fps[1]).abs() / (0.5 * (fps[0] + fps[1]));
    outcome(
        fps.iter().all(|f| *f > 0.0) && spread <= FPS_SPREAD,
        format!("fps {:.1} and {:.1}, spread {:.1}% (<= {}%)", fps[0], fps[1], 100.0 * spread, 100.0 * FPS_SPREAD),
    )
}

type Criterion = (usize, &'static str, fn(&mut Ctx) -> Outcome);

const CRITERIA: [Criterion; 10] = [
    (1, "gradient integrity", gradient_integrity),
    (2, "mask loss hand-check", mask_loss_hand_check),
    (3, "overfit", overfit),
    (4, "geometry oracles", geometry_oracles),
    (5, "box representation ordering", representation_ordering),
    (6, "end-to-end tracking", end_to_end),
    (7, "causality and determinism", causality_determinism),
    (8, "metric self-consistency", metric_self_consistency),
    (9, "file formats", io_round_trips),
    (10, "throughput report", throughput),
];

fn main() -> ExitCode {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut ctx = Ctx {
        work: tempfile::tempdir().unwrap(),
        model: None,
        gradcheck_stdout: None,
    };
    let mut failures = 0;
    for (n, name, f) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let o = catch_unwind(AssertUnwindSafe(|| f(&mut ctx))).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        failures += usize::from(!o.passed);
        println!(
            "criterion {n:>2} {name}: {} | {} [{:.1}s]",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed().as_secs_f64()
        );
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criteria failed");
        ExitCode::FAILURE
    }
}
