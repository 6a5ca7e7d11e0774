//! Subcommand bodies.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use stmatch::features::FrameInput;
use stmatch::io;
use stmatch::model::Model;
use stmatch::sim::{
    ablation_comparisons, gen_sequence, read_dataset, read_sequence, run_benchmark, run_benchmark_on, run_protocol, write_comparisons_csv,
    write_sequence, write_summary_csv, AblationCell, ScenarioConfig,
};
use stmatch::tracker::{init, step, StepOutput};
use stmatch::training::gradcheck::run_gradcheck;
use stmatch::training::{init_model, train, write_loss_csv};

use crate::config::{Cli, Command, RunConfig};
use crate::Failure;

pub fn dispatch(cli: Cli) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    let parallel = matches!(cli.command, Command::Eval(_) | Command::Ablate(_));
    match &cli.command {
        Command::Gen(a) => a.apply(&mut cfg),
        Command::Train(a) => a.apply(&mut cfg),
        Command::Track(a) => a.apply(&mut cfg),
        Command::Eval(a) => a.apply(&mut cfg),
        Command::Gradcheck(a) => a.apply(&mut cfg)?,
        Command::Ablate(a) => a.apply(&mut cfg),
    }
    set_threads(parallel)?;
    match cli.command {
        Command::Gen(_) => gen(&cfg),
        Command::Train(_) => train_cmd(&mut cfg),
        Command::Track(_) => track(&cfg),
        Command::Eval(_) => eval(&cfg),
        Command::Gradcheck(_) => gradcheck(&cfg),
        Command::Ablate(_) => ablate(&cfg),
    }
}

/// Harness subcommands honor `STM_THREADS`; the rest run on one thread.
fn set_threads(parallel: bool) -> Result<(), Failure> {
    let n = match std::env::var("STM_THREADS") {
        Ok(v) if parallel => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| Failure::Usage(anyhow!("STM_THREADS must be a positive integer, got `{v}`")))?,
        _ if parallel => 0,
        _ => 1,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Runtime(anyhow!("thread pool: {e}")))
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, Failure> {
    p.as_deref().ok_or_else(|| Failure::Usage(anyhow!("missing --{flag} (or paths.{} in the config)", flag.replace('-', "_"))))
}

fn validated(cfg: &RunConfig) -> Result<(), Failure> {
    let usage = |e: stmatch::Error| Failure::Usage(e.into());
    cfg.track.validate().map_err(usage)?;
    cfg.train.validate().map_err(usage)?;
    cfg.model.geometry.validate().map_err(usage)?;
    Ok(())
}

/// `<file>` with its extension replaced by `<suffix>`.
fn sibling(file: &Path, suffix: &str) -> PathBuf {
    file.with_extension(suffix)
}

fn echo(cfg: &RunConfig, path: &Path) -> Result<(), Failure> {
    io::write_json(path, cfg)?;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    Ok(())
}

fn load_model(cfg: &RunConfig) -> Result<Model, Failure> {
    let dir = required(&cfg.paths.params, "params")?;
    Ok(Model::load(dir).with_context(|| format!("cannot load parameters from {}", dir.display()))?)
}

fn check_compatible(model: &Model, c: &ScenarioConfig) -> Result<(), Failure> {
    let m = &model.config;
    if c.pixel_mode != m.pixel_input {
        return Err(Failure::Runtime(anyhow!(
            "sequence {} has {} frames but the model expects {}",
            c.seed,
            if c.pixel_mode { "pixel" } else { "feature" },
            if m.pixel_input { "pixels" } else { "features" }
        )));
    }
    if !c.pixel_mode && c.channels != m.channels {
        return Err(Failure::Runtime(anyhow!("sequence {} has {} channels, model has {}", c.seed, c.channels, m.channels)));
    }
    if c.stride != m.geometry.stride {
        return Err(Failure::Runtime(anyhow!("sequence {} has stride {}, model has {}", c.seed, c.stride, m.geometry.stride)));
    }
    Ok(())
}

fn gen(cfg: &RunConfig) -> Result<(), Failure> {
    let out = required(&cfg.paths.out, "out")?;
    if cfg.gen.count == 0 {
        return Err(Failure::Usage(anyhow!("--count must be at least 1")));
    }
    create_dir(out)?;
    let width = cfg.gen.count.saturating_sub(1).to_string().len().max(4);
    for i in 0..cfg.gen.count {
        let seed = cfg.gen.seed + i as u64;
        let seq = gen_sequence(&cfg.family.sample(seed))?;
        write_sequence(&seq, out, &format!("seq_{i:0width$}"))?;
    }
    echo(cfg, &out.join("resolved_config.json"))?;
    eprintln!("wrote {} sequences to {}", cfg.gen.count, out.display());
    Ok(())
}

fn train_cmd(cfg: &mut RunConfig) -> Result<(), Failure> {
    let data_dir = required(&cfg.paths.data, "data")?.to_path_buf();
    let out = required(&cfg.paths.out, "out")?.to_path_buf();
    validated(cfg)?;
    let data = read_dataset(&data_dir).with_context(|| format!("cannot read dataset {}", data_dir.display()))?;
    // input kind follows the data
    cfg.model.pixel_input = data[0].config.pixel_mode;
    if data.iter().any(|s| s.config.pixel_mode != cfg.model.pixel_input) {
        return Err(Failure::Runtime(anyhow!("dataset mixes pixel and feature sequences")));
    }
    let mut model = init_model(cfg.model, cfg.train.seed)?;
    for s in &data {
        check_compatible(&model, &s.config)?;
    }
    create_dir(&out)?;
    let loss_csv = cfg.paths.loss_csv.clone().unwrap_or_else(|| out.join("loss.csv"));
    echo(cfg, &out.join("resolved_config.json"))?;
    let t = Instant::now();
    let steps = cfg.train.steps;
    let log = train(&mut model, &data, &cfg.train, |r| {
        if r.step % 100 == 0 || r.step + 1 == steps {
            eprintln!("step {:5}  L {:.4}  cls {:.4}  arm {:.4}  lr {:.5}", r.step, r.loss.total, r.loss.cls, r.loss.arm, r.lr);
        }
    })?;
    model.save(&out)?;
    write_loss_csv(&log, &loss_csv)?;
    eprintln!("trained {} steps in {:.1}s; parameters in {}", steps, t.elapsed().as_secs_f64(), out.display());
    Ok(())
}

fn track(cfg: &RunConfig) -> Result<(), Failure> {
    let seq_path = required(&cfg.paths.seq, "seq")?;
    let out = required(&cfg.paths.out, "out")?;
    validated(cfg)?;
    let model = load_model(cfg)?;
    let seq = read_sequence(seq_path).with_context(|| format!("cannot read sequence {}", seq_path.display()))?;
    check_compatible(&model, &seq.config)?;
    if seq.len() < 2 {
        return Err(Failure::Runtime(anyhow!("sequence has fewer than two frames")));
    }
    if let Some(d) = &cfg.paths.dump_heatmaps {
        create_dir(d)?;
    }
    echo(cfg, &sibling(out, "resolved.json"))?;

    let mut state = init(&seq.frames[0], &seq.boxes[0], &model, &cfg.track)?;
    let mut outputs = Vec::with_capacity(seq.len() - 1);
    for f in &seq.frames[1..] {
        let (o, next) = step(&state, f, &model, &cfg.track)?;
        if let Some(d) = &cfg.paths.dump_heatmaps {
            dump_heatmaps(d, f, &o)?;
        }
        outputs.push(o);
        state = next;
    }
    write_boxes(out, &outputs)?;
    if let Some(p) = &cfg.paths.candidates {
        write_candidates(p, &outputs)?;
    }
    let switches = outputs.iter().filter(|o| o.k_hat != 1).count();
    eprintln!("tracked {} frames ({} candidate switches) into {}", outputs.len(), switches, out.display());
    Ok(())
}

fn dump_heatmaps(dir: &Path, frame: &FrameInput, o: &StepOutput) -> Result<(), Failure> {
    let i = frame.index;
    io::write_pgm(dir.join(format!("raw_{i:04}.pgm")), &o.raw.heatmap)?;
    io::write_pgm(dir.join(format!("final_{i:04}.pgm")), &o.heatmap)?;
    io::write_st1(dir.join(format!("outputs_{i:04}.st1")), &o.raw.stacked())?;
    Ok(())
}

/// `frame,cx,cy,w,h,confidence,k_hat` for every tracked frame (the
/// initialization frame is not tracked and has no row).
fn write_boxes(path: &Path, outputs: &[StepOutput]) -> Result<(), Failure> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))?;
    w.write_record(["frame", "cx", "cy", "w", "h", "confidence", "k_hat"]).context("boxes csv")?;
    for o in outputs {
        let b = &o.bbox;
        w.write_record([
            o.frame.to_string(),
            format!("{:.6}", b.cx),
            format!("{:.6}", b.cy),
            format!("{:.6}", b.w),
            format!("{:.6}", b.h),
            format!("{:.6}", o.confidence),
            o.k_hat.to_string(),
        ])
        .context("boxes csv")?;
    }
    w.flush().context("boxes csv")?;
    Ok(())
}

/// `frame,k,q_y,q_x,score,chosen`, one row per scored candidate.
fn write_candidates(path: &Path, outputs: &[StepOutput]) -> Result<(), Failure> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))?;
    w.write_record(["frame", "k", "q_y", "q_x", "score", "chosen"]).context("candidates csv")?;
    for o in outputs {
        for (j, c) in o.candidates.iter().enumerate() {
            w.write_record([
                o.frame.to_string(),
                (j + 1).to_string(),
                c.q.y.to_string(),
                c.q.x.to_string(),
                format!("{:.9e}", c.score),
                (j + 1 == o.k_hat).to_string(),
            ])
            .context("candidates csv")?;
        }
    }
    w.flush().context("candidates csv")?;
    Ok(())
}

fn eval(cfg: &RunConfig) -> Result<(), Failure> {
    let out = required(&cfg.paths.out, "out")?;
    validated(cfg)?;
    let model = load_model(cfg)?;
    let report = match &cfg.paths.data {
        Some(dir) => {
            let data = read_dataset(dir).with_context(|| format!("cannot read dataset {}", dir.display()))?;
            for s in &data {
                check_compatible(&model, &s.config)?;
            }
            run_benchmark_on(&model, &cfg.track, &data)?
        }
        None => {
            check_compatible(&model, &cfg.family.sample(cfg.eval.seed_offset))?;
            let seeds: Vec<u64> = (cfg.eval.seed_offset..cfg.eval.seed_offset + cfg.eval.scenarios as u64).collect();
            run_benchmark(&model, &cfg.track, &cfg.family, &seeds)?
        }
    };
    echo(cfg, &sibling(out, "resolved.json"))?;
    report.write_metrics_csv(out)?;
    if let Some(p) = &cfg.paths.frames_csv {
        report.write_frames_csv(p)?;
    }
    eprintln!(
        "{} scenarios: {} failures, mean IoU {:.4}, mean center error {:.3} cells",
        report.scenarios.len(),
        report.total_failures(),
        report.mean_iou(),
        report.mean_center_err()
    );
    Ok(())
}

fn gradcheck(cfg: &RunConfig) -> Result<(), Failure> {
    let opts = &cfg.gradcheck.options;
    match &cfg.paths.out {
        Some(out) => echo(cfg, &sibling(out, "resolved.json"))?,
        None => eprintln!("{}", serde_json::to_string(cfg).context("config echo")?),
    }
    let t = Instant::now();
    let reports = run_gradcheck(&cfg.gradcheck.scopes, opts)?;
    for scope in &cfg.gradcheck.scopes {
        let rows: Vec<_> = reports.iter().filter(|r| r.scope == scope.name()).collect();
        let worst = rows.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
        let ok = rows.iter().all(|r| r.passed);
        eprintln!("{:10} {:3} groups  max rel err {:.3e}  {}", scope.name(), rows.len(), worst, if ok { "ok" } else { "FAIL" });
        for r in rows.iter().filter(|r| !r.passed) {
            eprintln!("  {}: {:.3e} over {} of {} coords", r.group, r.max_rel_err, r.checked, r.total);
        }
    }
    if let Some(out) = &cfg.paths.out {
        let mut w = csv::Writer::from_path(out).with_context(|| format!("cannot write {}", out.display()))?;
        w.write_record(["scope", "group", "checked", "total", "max_rel_err", "passed"]).context("gradcheck csv")?;
        for r in &reports {
            w.write_record([
                r.scope.clone(),
                r.group.clone(),
                r.checked.to_string(),
                r.total.to_string(),
                format!("{:.6e}", r.max_rel_err),
                r.passed.to_string(),
            ])
            .context("gradcheck csv")?;
        }
        w.flush().context("gradcheck csv")?;
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    eprintln!("{} groups checked in {:.1}s", reports.len(), t.elapsed().as_secs_f64());
    if failed > 0 {
        return Err(Failure::Runtime(anyhow!(
            "{failed} groups exceed the tolerance {:e}",
            opts.tolerance
        )));
    }
    Ok(())
}

fn ablate(cfg: &RunConfig) -> Result<(), Failure> {
    let out = required(&cfg.paths.out, "out")?;
    validated(cfg)?;
    let cells = AblationCell::parse_grid(&cfg.ablate.cells).map_err(|e| Failure::Usage(e.into()))?;
    cfg.ablate.protocol.validate().map_err(|e| Failure::Usage(e.into()))?;
    if cfg.model.pixel_input != cfg.family.pixel_mode {
        return Err(Failure::Usage(anyhow!("model.pixel_input must match family.pixel_mode")));
    }
    for d in [&cfg.paths.metrics_dir, &cfg.paths.save_models].into_iter().flatten() {
        create_dir(d)?;
    }
    echo(cfg, &sibling(out, "resolved.json"))?;
    let t = Instant::now();
    let mut saved = Ok(());
    let rows = run_protocol(&cells, &cfg.ablate.protocol, &cfg.family, &cfg.model, &cfg.train, &cfg.track, |matcher, lambda, m| {
        eprintln!("trained {matcher} (lambda_arm {lambda}) at {:.0}s", t.elapsed().as_secs_f64());
        if let (Some(d), Ok(())) = (&cfg.paths.save_models, &saved) {
            saved = m.save(d.join(format!("{matcher}_lambda{lambda}")));
        }
    })?;
    saved?;
    write_summary_csv(&rows, out)?;
    let comparisons = ablation_comparisons(&rows)?;
    let cmp_path = cfg.paths.comparisons.clone().unwrap_or_else(|| sibling(out, "comparisons.csv"));
    write_comparisons_csv(&comparisons, &cmp_path)?;
    if let Some(d) = &cfg.paths.metrics_dir {
        for r in &rows {
            r.report.write_metrics_csv(d.join(format!("{}.csv", r.cell.label())))?;
        }
    }
    for r in &rows {
        eprintln!("{:8} failures {:4}  mean IoU {:.4}", r.cell.label(), r.report.total_failures(), r.report.mean_iou());
    }
    for c in &comparisons {
        eprintln!(
            "{} < {}: {} vs {} failures, sign test {}/{} p = {:.3e}",
            c.better, c.worse, c.better_failures, c.worse_failures, c.test.wins, c.test.losses, c.test.p_value
        );
    }
    eprintln!("done in {:.0}s", t.elapsed().as_secs_f64());
    Ok(())
}
