use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use siammask_core::config::RunConfig;
use siammask_core::geometry::min_max_box;
use siammask_core::io::{
    frame_name, load_boxes, load_masks, load_sequence, parse_key_values, save_boxes, save_mask, save_sequence,
    SequenceData,
};
use siammask_core::metrics::{
    format_records, format_reset_log, frame_ious, oracle_boxes, parse_records, parse_reset_log, replay_reset_log,
    accuracy_robustness, summarize_ious, OracleKind, Recording, ResetOutcome, TrackingReport, VosReport,
};
use siammask_core::synth::gen_sequence;
use siammask_core::tracker::{ResettableTracker, Tracker};
use siammask_core::train::{loss_csv, pairs_from_sequences, Trainer};
use siammask_core::verify::{corrupted_fixture, registry, GRADCHECK_TOLERANCE};
use siammask_core::{AxisBox, Error, Model, ParamSet};

use crate::{Cli, Command, Common, Protocol};

pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOSS_FILE: &str = "loss.csv";
pub const REPORT_FILE: &str = "report.txt";
pub const RESET_FILE: &str = "reset.txt";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => CliError::Usage(e.to_string()),
            Error::NonFinite { .. } | Error::NonDeterministic { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    match cli.command {
        Command::Synth => synth(c),
        Command::Train { data } => train(c, &data),
        Command::Track { checkpoint, seq } => track(c, &checkpoint, &seq),
        Command::Eval { protocol, pred, gt } => eval(c, protocol, pred.as_deref(), &gt),
        Command::Gradcheck { fixture } => gradcheck(c, fixture),
        Command::Report { runs } => report(c, &runs),
    }
}

fn applied(mut cfg: RunConfig, common: &Common) -> Result<RunConfig> {
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        for (k, v) in parse_key_values(&text, &path.display().to_string())? {
            cfg.set(&k, &v)?;
        }
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(v) = common.variant {
        cfg.model.variant = v.into();
    }
    if let Some(s) = common.box_strategy {
        cfg.track.box_strategy = s.into();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Defaults, then --config, then the flags.
fn resolve(common: &Common) -> Result<RunConfig> {
    applied(RunConfig::default(), common)
}

fn out_dir(common: &Common) -> Result<&Path> {
    let out = common
        .out
        .as_deref()
        .ok_or_else(|| CliError::Usage("this command needs --out DIR".into()))?;
    fs::create_dir_all(out).map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
    Ok(out)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Prints the resolved configuration and, with an output directory, writes it there.
fn echo_config(cfg: &RunConfig, out: Option<&Path>) -> Result<()> {
    for (k, v) in cfg.entries() {
        println!("config.{k}={v}");
    }
    if let Some(out) = out {
        write(&out.join(CONFIG_FILE), cfg.to_text())?;
    }
    Ok(())
}

fn record(name: &str, value: impl fmt::Display) {
    println!("{name}={value}");
}

fn is_sequence(dir: &Path) -> bool {
    dir.join("frames").is_dir() || dir.join("boxes.txt").is_file() || dir.join("masks").is_dir()
}

/// `(name, dir)` for a single sequence directory or every sequence below a dataset directory.
fn sequence_dirs(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    if !dir.is_dir() {
        return Err(CliError::Data(format!("{}: not a directory", dir.display())));
    }
    if is_sequence(dir) {
        return Ok(vec![(String::new(), dir.to_path_buf())]);
    }
    let mut subs: Vec<(String, PathBuf)> = fs::read_dir(dir)
        .map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && is_sequence(p))
        .map(|p| (p.file_name().unwrap_or_default().to_string_lossy().into_owned(), p))
        .collect();
    subs.sort();
    if subs.is_empty() {
        return Err(CliError::Data(format!("{}: no sequences found", dir.display())));
    }
    Ok(subs)
}

fn prefixed(name: &str, key: &str) -> String {
    if name.is_empty() {
        key.to_string()
    } else {
        format!("{name}.{key}")
    }
}

fn synth(common: &Common) -> Result<()> {
    let cfg = resolve(common)?;
    let out = out_dir(common)?;
    echo_config(&cfg, Some(out))?;
    let mut frames = 0;
    for i in 0..cfg.data.sequences {
        let seq = gen_sequence(&cfg.scene(i), cfg.data.length)?;
        frames += seq.len();
        save_sequence(&out.join(format!("seq_{i:03}")), &seq)?;
    }
    record("sequences", cfg.data.sequences);
    record("frames", frames);
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<Vec<SequenceData>> {
    sequence_dirs(dir)?
        .iter()
        .map(|(_, d)| load_sequence(d).map_err(CliError::from))
        .collect()
}

fn train(common: &Common, data: &Path) -> Result<()> {
    let cfg = resolve(common)?;
    let out = out_dir(common)?;
    echo_config(&cfg, Some(out))?;
    let seqs = load_dataset(data)?;
    if let Some(i) = seqs.iter().position(|s| s.masks.len() != s.len()) {
        return Err(CliError::Data(format!("sequence {i} of {} has no masks", data.display())));
    }
    let pairs = pairs_from_sequences(&seqs, cfg.data.pairs, cfg.data.jitter(), cfg.seed)?;
    let mut model = Model::new(cfg.model.clone(), cfg.seed);
    let train_cfg = cfg.train_config();
    let steps = train_cfg.steps;
    let mut logs = Vec::with_capacity(steps);
    let start = Instant::now();
    let result = Trainer::new(&mut model, train_cfg)?.run(&pairs, |log| {
        logs.push(*log);
        if (log.step + 1) % 100 == 0 || log.step + 1 == steps {
            eprintln!(
                "step {}/{} loss {:.4} mask {:.4} score {:.4}",
                log.step + 1,
                steps,
                log.total,
                log.mask,
                log.score
            );
        }
    });
    write(&out.join(LOSS_FILE), loss_csv(&logs))?;
    result?;
    model.params.save(&out.join(CHECKPOINT_FILE))?;
    record("steps", logs.len());
    record("pairs", pairs.len());
    if let Some(last) = logs.last() {
        record("final_total", last.total);
        record("final_mask", last.mask);
    }
    record("seconds", format!("{:.3}", start.elapsed().as_secs_f64()));
    Ok(())
}

fn load_model(checkpoint: &Path, common: &Common) -> Result<(Model, RunConfig)> {
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let base = RunConfig::load(&dir.join(CONFIG_FILE)).map_err(|e| CliError::Data(e.to_string()))?;
    let cfg = applied(base, common)?;
    let params = ParamSet::load(checkpoint)?;
    Ok((Model::from_parts(cfg.model.clone(), params)?, cfg))
}

fn init_box(seq: &SequenceData, dir: &Path) -> Result<AxisBox> {
    if let Some(m) = seq.masks.first() {
        return Ok(min_max_box(m)?);
    }
    seq.boxes
        .first()
        .map(|b| b.bounds())
        .ok_or_else(|| CliError::Data(format!("{}: no first-frame mask or box to start from", dir.display())))
}

fn track(common: &Common, checkpoint: &Path, seq_dir: &Path) -> Result<()> {
    let (model, cfg) = load_model(checkpoint, common)?;
    let out = out_dir(common)?;
    echo_config(&cfg, Some(out))?;
    let tracker = Tracker::new(&model, cfg.track);
    let (mut frames, mut seconds) = (0usize, 0.0f64);
    for (name, dir) in sequence_dirs(seq_dir)? {
        let seq = load_sequence(&dir)?;
        let init = init_box(&seq, &dir)?;
        let start = Instant::now();
        let result = tracker.track_sequence(&seq.frames, &init)?;
        let elapsed = start.elapsed().as_secs_f64();
        frames += seq.len();
        seconds += elapsed;

        let target = if name.is_empty() { out.to_path_buf() } else { out.join(&name) };
        let masks = target.join("masks");
        fs::create_dir_all(&masks).map_err(|e| CliError::Data(format!("{}: {e}", masks.display())))?;
        for (i, f) in result.frames.iter().enumerate() {
            save_mask(&masks.join(frame_name(i + 1, "pgm")), &f.mask)?;
        }
        let boxes: Vec<_> = result.frames.iter().map(|f| f.rbox).collect();
        save_boxes(&target.join("boxes.txt"), &boxes)?;
        let scores: String = result.frames.iter().map(|f| format!("{}\n", f.score)).collect();
        write(&target.join("scores.txt"), scores)?;

        if seq.boxes.len() == seq.len() {
            let mut rec = Recording::new(ResettableTracker::new(&tracker, &seq.frames), seq.len());
            let outcome = accuracy_robustness(&seq.boxes, cfg.eval.reset, &mut rec)?;
            write(&target.join(RESET_FILE), format_reset_log(&outcome.status, &rec.boxes))?;
            record(&prefixed(&name, "failures"), outcome.failures);
        }
        record(&prefixed(&name, "frames"), seq.len());
        record(&prefixed(&name, "fps"), format!("{:.2}", seq.len() as f64 / elapsed.max(1e-9)));
    }
    record("frames", frames);
    record("fps", format!("{:.2}", frames as f64 / seconds.max(1e-9)));
    Ok(())
}

/// Prediction and ground-truth directories paired by sequence name.
fn paired(pred: &Path, gt: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let gts = sequence_dirs(gt)?;
    gts.into_iter()
        .map(|(name, g)| {
            let p = if name.is_empty() { pred.to_path_buf() } else { pred.join(&name) };
            if !p.is_dir() {
                return Err(CliError::Data(format!("{}: missing predictions for `{name}`", p.display())));
            }
            Ok((name, p, g))
        })
        .collect()
}

fn mean_of(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn eval(common: &Common, protocol: Protocol, pred: Option<&Path>, gt: &Path) -> Result<()> {
    let cfg = resolve(common)?;
    let out = out_dir(common)?;
    echo_config(&cfg, Some(out))?;
    let mut records: Vec<(String, f64)> = Vec::new();
    match protocol {
        Protocol::Oracle => {
            let mut per_kind = vec![Vec::new(); OracleKind::ALL.len()];
            for (name, dir) in sequence_dirs(gt)? {
                let boxes = load_boxes(&dir.join("boxes.txt"))?;
                for (k, kind) in OracleKind::ALL.iter().enumerate() {
                    let ious = frame_ious(&oracle_boxes(&boxes, *kind)?, &boxes)?;
                    records.push((prefixed(&name, &format!("{}_miou", kind.as_str())), summarize_ious(&ious, &[]).0));
                    per_kind[k].extend(ious);
                }
            }
            for (k, kind) in OracleKind::ALL.iter().enumerate() {
                let (miou, aps) = summarize_ious(&per_kind[k], &[0.5, 0.7]);
                records.push((format!("{}_miou", kind.as_str()), miou));
                records.push((format!("{}_map50", kind.as_str()), aps[0]));
                records.push((format!("{}_map70", kind.as_str()), aps[1]));
            }
        }
        Protocol::Tracking => {
            let pred = pred.ok_or_else(|| CliError::Usage("tracking evaluation needs --pred DIR".into()))?;
            let mut no_reset = Vec::new();
            let mut resets: Vec<ResetOutcome> = Vec::new();
            let mut with_log = 0;
            let pairs = paired(pred, gt)?;
            for (_, p, g) in &pairs {
                let gt_boxes = load_boxes(&g.join("boxes.txt"))?;
                let pred_boxes = load_boxes(&p.join("boxes.txt"))?;
                let tail = gt_boxes.get(1..).unwrap_or(&[]);
                no_reset.push(frame_ious(&pred_boxes, tail)?);
                let log_path = p.join(RESET_FILE);
                if log_path.is_file() {
                    with_log += 1;
                    let log = parse_reset_log(&read_text(&log_path)?)?;
                    resets.push(replay_reset_log(&gt_boxes, cfg.eval.reset, &log)?);
                }
            }
            if with_log != 0 && with_log != pairs.len() {
                return Err(CliError::Data(format!("{RESET_FILE} present for {with_log} of {} sequences", pairs.len())));
            }
            let report = TrackingReport::from_sequences(&no_reset, &resets);
            records = report.records();
            if with_log == 0 {
                records.retain(|(k, _)| matches!(k.as_str(), "miou" | "map50" | "map70" | "eao_simplified"));
            }
        }
        Protocol::Vos => {
            let pred = pred.ok_or_else(|| CliError::Usage("vos evaluation needs --pred DIR".into()))?;
            let mut reports = Vec::new();
            for (name, p, g) in paired(pred, gt)? {
                let gt_masks = load_masks(&g.join("masks"))?;
                let pred_masks = load_masks(&p.join("masks"))?;
                let tail = gt_masks.get(1..).unwrap_or(&[]);
                let r = VosReport::compute(&pred_masks, tail, cfg.eval.f_tolerance)?;
                if !name.is_empty() {
                    records.extend(r.records().into_iter().map(|(k, v)| (prefixed(&name, &k), v)));
                }
                reports.push(r);
            }
            let keys: Vec<String> = reports[0].records().into_iter().map(|(k, _)| k).collect();
            for (i, k) in keys.into_iter().enumerate() {
                records.push((k, mean_of(reports.iter().map(|r| r.records()[i].1))));
            }
        }
    }
    let text = format_records(&records);
    print!("{text}");
    write(&out.join(REPORT_FILE), text)
}

fn gradcheck(common: &Common, fixture: bool) -> Result<()> {
    let cfg = resolve(common)?;
    echo_config(&cfg, common.out.as_deref())?;
    let mut cases = registry();
    if fixture {
        cases.push(corrupted_fixture());
    }
    let mut failed = Vec::new();
    let mut lines = String::new();
    for case in cases {
        let o = case.run(cfg.seed)?;
        let line = format!(
            "gradcheck.{}={:e} group={} checked={} kinks_skipped={} pass={} seconds={:.2}\n",
            o.name,
            o.report.max_rel_error,
            o.group.as_str(),
            o.report.checked,
            o.report.kinks_skipped,
            o.passed,
            o.seconds
        );
        print!("{line}");
        lines.push_str(&line);
        if !o.passed {
            failed.push(o.name);
        }
    }
    record("tolerance", GRADCHECK_TOLERANCE);
    record("failed", failed.len());
    if let Some(out) = &common.out {
        fs::create_dir_all(out).map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
        write(&out.join("gradcheck.txt"), lines)?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn report(common: &Common, runs: &[PathBuf]) -> Result<()> {
    let tables = runs
        .iter()
        .map(|r| parse_records(&read_text(&r.join(REPORT_FILE))?).map_err(CliError::from))
        .collect::<Result<Vec<_>>>()?;
    let mut keys: Vec<&String> = tables.iter().flat_map(|t| t.keys()).collect();
    keys.sort();
    keys.dedup();
    let mut md = String::from("| metric |");
    for r in runs {
        md.push_str(&format!(" {} |", r.display()));
    }
    md.push_str("\n|---|");
    md.push_str(&"---|".repeat(runs.len()));
    md.push('\n');
    for k in keys {
        md.push_str(&format!("| {k} |"));
        for t in &tables {
            match t.get(k) {
                Some(v) => md.push_str(&format!(" {v:.4} |")),
                None => md.push_str(" - |"),
            }
        }
        md.push('\n');
    }
    print!("{md}");
    if let Some(out) = &common.out {
        fs::create_dir_all(out).map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
        write(&out.join("report.md"), md)?;
    }
    Ok(())
}
