//! Config assembly, per-mode drivers, and artifact emission.

use crate::{Cli, RunArgs};
use frameadapt_core::bilateral::invert_clip;
use frameadapt_core::denoiser::ToyDenoiser;
use frameadapt_core::grid::NoiseSpec;
use frameadapt_core::harness::{
    ablation_runner, build_conditioning, build_toy_denoiser, run_hooks, standard_cell_runner,
    svg_bar_plot, svg_line_plot, Axis, Backend, Mode, RunConfig,
};
use frameadapt_core::metrics::{clip_metrics, similarity_curve, ClipMetrics, MetricReport};
use frameadapt_core::pipeline::{denoise_clip, edit_clip, synthetic_clip};
use frameadapt_core::schedule::AnalyticGaussianDenoiser;
use frameadapt_core::train::train_driver;
use frameadapt_core::train::StepLog;
use frameadapt_core::{CoreError, Denoiser, Grid, GridShape};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

pub const OUT_ROOT_ENV: &str = "FRAMEADAPT_OUT_ROOT";

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) | CliError::Runtime(msg) => write!(f, "{msg}"),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config(_) => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn io_err(context: &str, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{context}: {e}"))
}

pub enum Outcome {
    Clean,
    /// `(hook name, reason)` for hooks that failed outright. The report is
    /// written regardless.
    HookFailures(Vec<(String, String)>),
}

pub fn dispatch(cli: &Cli) -> Result<Outcome, CliError> {
    let mode = cli.command.mode();
    let args = cli.command.args();
    let cfg = assemble_config(mode, args)?;
    let out = resolve_out_dir(&cfg, mode);
    fs::create_dir_all(&out).map_err(|e| io_err("creating output directory", e))?;
    write_file(&out.join("config.txt"), &cfg.to_text())?;

    match mode {
        Mode::TrainAdapter => run_train(&cfg, &out),
        Mode::Invert => run_invert(&cfg, &out),
        Mode::Sample => run_sample(&cfg, &out),
        Mode::Edit => run_edit(&cfg, &out, args),
        Mode::Metrics => run_metrics(&cfg, &out, args),
        Mode::Ablate => run_ablate(&cfg, &out, args),
    }
}

// ---------------------------------------------------------------- config

fn assemble_config(mode: Mode, args: &RunArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("config file {}: {e}", path.display())))?;
            parse_config_file(mode, &text)?
        }
        None => {
            let mut c = RunConfig::default();
            c.mode = mode;
            c
        }
    };

    for pair in &args.set {
        let (key, value) = split_pair(pair, "--set", '=')?;
        if key == "mode" {
            return Err(CliError::Config("the mode comes from the subcommand".into()));
        }
        scalar_assign(&mut cfg, key, value)?;
    }
    for (key, value) in named_flag_pairs(args) {
        scalar_assign(&mut cfg, key, &value)?;
    }
    if let Some(w) = &args.train_window {
        let (lo, hi) = split_pair(w, "--train-window", ',')?;
        scalar_assign(&mut cfg, "train_window_lo", lo)?;
        scalar_assign(&mut cfg, "train_window_hi", hi)?;
    }
    if let Some(w) = &args.infer_window {
        let (lo, hi) = split_pair(w, "--infer-window", ',')?;
        scalar_assign(&mut cfg, "infer_window_lo", lo)?;
        scalar_assign(&mut cfg, "infer_window_hi", hi)?;
    }
    if args.drop_shared {
        scalar_assign(&mut cfg, "drop_shared", "true")?;
    }
    if args.drop_unshared {
        scalar_assign(&mut cfg, "drop_unshared", "true")?;
    }

    for spec in &args.axis {
        if mode != Mode::Ablate {
            return Err(CliError::Config("--axis requires the ablate subcommand".into()));
        }
        let (key, list) = split_pair(spec, "--axis", '=')?;
        let values: Vec<String> = list.split(',').map(|s| s.trim().to_string()).collect();
        if values.iter().any(String::is_empty) {
            return Err(CliError::Config(format!("--axis {key}: empty value in list")));
        }
        // Each value must survive the same typed parse as a scalar.
        let mut probe = cfg.clone();
        for v in &values {
            probe.assign(key, v)?;
        }
        cfg.axes.retain(|a| a.key != key);
        cfg.axes.push(Axis { key: key.to_string(), values });
    }
    for spec in &args.hook {
        let (name, command) = split_pair(spec, "--hook", '=')?;
        cfg.hooks.insert(name.to_string(), command.to_string());
    }
    if args.clips.is_some() && mode != Mode::Metrics {
        return Err(CliError::Config("--clips only applies to the metrics subcommand".into()));
    }

    cfg.validate()?;
    if mode == Mode::Ablate && cfg.axes.is_empty() {
        return Err(CliError::Config(
            "ablate needs at least one sweep axis (--axis or a list-valued config key)".into(),
        ));
    }
    Ok(cfg)
}

/// Parse a config file in the context of a subcommand: a missing mode line
/// is filled in, a conflicting one is an error.
fn parse_config_file(mode: Mode, text: &str) -> Result<RunConfig, CliError> {
    let file_mode = text.lines().find_map(|line| {
        let line = line.trim();
        line.strip_prefix("mode")
            .and_then(|rest| rest.trim_start().strip_prefix('='))
            .map(|v| v.trim().to_string())
    });
    let full = match file_mode {
        Some(m) if m != mode.as_str() => {
            return Err(CliError::Config(format!(
                "config file sets mode {m} but the subcommand is {}",
                mode.as_str()
            )));
        }
        Some(_) => text.to_string(),
        None => format!("mode = {}\n{text}", mode.as_str()),
    };
    Ok(RunConfig::parse(&full)?)
}

/// Scalar assignment from a flag; overriding a swept key collapses that
/// axis.
fn scalar_assign(cfg: &mut RunConfig, key: &str, value: &str) -> Result<(), CliError> {
    cfg.assign(key, value)?;
    cfg.axes.retain(|a| a.key != key);
    Ok(())
}

fn split_pair<'a>(
    raw: &'a str,
    flag: &str,
    sep: char,
) -> Result<(&'a str, &'a str), CliError> {
    match raw.split_once(sep) {
        Some((k, v)) if !k.trim().is_empty() && !v.trim().is_empty() => {
            Ok((k.trim(), v.trim()))
        }
        _ => Err(CliError::Config(format!("{flag} expects KEY{sep}VALUE, got {raw:?}"))),
    }
}

fn named_flag_pairs(args: &RunArgs) -> Vec<(&'static str, String)> {
    let mut pairs = Vec::new();
    let mut push = |key: &'static str, v: &Option<String>| {
        if let Some(v) = v {
            pairs.push((key, v.clone()));
        }
    };
    push("out_dir", &args.out_dir);
    push("seeds", &args.seeds);
    push("jobs", &args.jobs);
    push("backend", &args.backend);
    push("steps", &args.steps);
    push("kernel_size", &args.kernel_size);
    push("sigma_spatial", &args.sigma_spatial);
    push("sigma_intensity", &args.sigma_intensity);
    push("invert_steps", &args.invert_steps);
    push("filter_direction", &args.filter_direction);
    push("lora_rank", &args.lora_rank);
    push("lambda_temporal", &args.lambda_temporal);
    push("lambda_diffusion", &args.lambda_diffusion);
    push("merge_ratio", &args.merge_ratio);
    push("n_share", &args.n_share);
    push("toy_text_len", &args.toy_text_len);
    push("guided_mode", &args.guided_mode);
    push("unshare_boost", &args.unshare_boost);
    pairs
}

/// Relative output paths live under the `FRAMEADAPT_OUT_ROOT` root;
/// absolute ones are taken as given.
fn resolve_out_dir(cfg: &RunConfig, mode: Mode) -> PathBuf {
    let root = PathBuf::from(std::env::var(OUT_ROOT_ENV).unwrap_or_else(|_| ".".into()));
    let dir = if cfg.out_dir.is_empty() {
        format!("frameadapt-out/{}", mode.as_str())
    } else {
        cfg.out_dir.clone()
    };
    let dir = PathBuf::from(dir);
    if dir.is_absolute() {
        dir
    } else {
        root.join(dir)
    }
}

// ------------------------------------------------------------- artifacts

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_err(&format!("writing {}", path.display()), e))?;
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct GridFile {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl GridFile {
    fn from_grid(g: &Grid<f64>) -> Self {
        let s = g.shape();
        Self { shape: [s.batch, s.channels, s.height, s.width], data: g.data().to_vec() }
    }

    fn to_grid(&self) -> Result<Grid<f64>, CliError> {
        let [b, c, h, w] = self.shape;
        Ok(Grid::from_vec(GridShape::new(b, c, h, w), self.data.clone())?)
    }
}

/// On-disk clip: frames plus an optional clean reference. The same format
/// feeds back into `metrics --clips`.
#[derive(Serialize, Deserialize)]
struct ClipFile {
    id: String,
    frames: GridFile,
    reference: Option<GridFile>,
}

fn write_clip(path: &Path, clip: &ClipFile) -> Result<(), CliError> {
    let json = serde_json::to_string(clip).map_err(CoreError::from)?;
    write_file(path, &json)
}

fn render_table(report: &MetricReport) -> String {
    let ext = report.external_columns();
    let mut header = vec![
        "clip".to_string(),
        "psnr".to_string(),
        "ssim".to_string(),
        "flicker".to_string(),
        "mean_similarity".to_string(),
    ];
    header.extend(ext.iter().cloned());

    let fmt_opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.6}"));
    let mut rows: Vec<Vec<String>> = Vec::with_capacity(report.rows.len() + 1);
    for r in &report.rows {
        let mut row = vec![
            r.clip_id.clone(),
            format!("{:.6}", r.psnr),
            format!("{:.6}", r.ssim),
            format!("{:.6}", r.flicker),
            format!("{:.6}", r.mean_similarity),
        ];
        row.extend(ext.iter().map(|c| fmt_opt(r.external.get(c).copied().flatten())));
        rows.push(row);
    }
    let agg = report.aggregate();
    let mut row = vec![
        "aggregate".to_string(),
        format!("{:.6}", agg.psnr),
        format!("{:.6}", agg.ssim),
        format!("{:.6}", agg.flicker),
        format!("{:.6}", agg.mean_similarity),
    ];
    row.extend(ext.iter().map(|c| fmt_opt(agg.external.get(c).copied().flatten())));
    rows.push(row);

    let mut widths: Vec<usize> = header.iter().map(String::len).collect();
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: &[String]| -> String {
        let mut s = String::new();
        for (i, (cell, w)) in cells.iter().zip(&widths).enumerate() {
            if i > 0 {
                s.push_str("  ");
            }
            if i == 0 {
                s.push_str(&format!("{cell:<w$}"));
            } else {
                s.push_str(&format!("{cell:>w$}"));
            }
        }
        s.push('\n');
        s
    };
    let mut out = line(&header);
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for row in &rows {
        out.push_str(&line(row));
    }
    out
}

/// Write the report pair (CSV + rendered table), print the table, then run
/// any configured hooks. Hook columns land in both files.
fn emit_report(
    cfg: &RunConfig,
    out: &Path,
    mut report: MetricReport,
    clips_dir: Option<&Path>,
    timeout: Duration,
) -> Result<Outcome, CliError> {
    let failures = if cfg.hooks.is_empty() {
        Vec::new()
    } else {
        let subst = hook_substituter(out, clips_dir, report.rows.len());
        run_hooks(cfg, &mut report, &subst, timeout)
    };
    write_file(&out.join("metrics.csv"), &report.to_csv())?;
    let table = render_table(&report);
    write_file(&out.join("table.txt"), &table)?;
    print!("{table}");
    if failures.is_empty() {
        Ok(Outcome::Clean)
    } else {
        Ok(Outcome::HookFailures(failures))
    }
}

fn hook_substituter(
    out: &Path,
    clips_dir: Option<&Path>,
    n_clips: usize,
) -> impl Fn(&str) -> String {
    let out = out.display().to_string();
    let clips = clips_dir.map(|p| p.display().to_string()).unwrap_or_default();
    move |template: &str| {
        template
            .replace("{out_dir}", &out)
            .replace("{clips_dir}", &clips)
            .replace("{n_clips}", &n_clips.to_string())
    }
}

// ------------------------------------------------------------------ modes

enum BuiltDenoiser {
    Oracle(AnalyticGaussianDenoiser),
    Toy(ToyDenoiser),
}

impl BuiltDenoiser {
    fn as_dyn(&self) -> &dyn Denoiser<f64> {
        match self {
            BuiltDenoiser::Oracle(d) => d,
            BuiltDenoiser::Toy(d) => d,
        }
    }
}

/// The oracle's latent statistics; must match the harness cell runner so
/// CLI runs reproduce sweep cells.
const ORACLE_MEAN: f64 = 0.3;
const ORACLE_VAR: f64 = 0.25;

fn build_denoiser(cfg: &RunConfig, seed: u64) -> Result<BuiltDenoiser, CliError> {
    Ok(match cfg.backend {
        Backend::Oracle => BuiltDenoiser::Oracle(AnalyticGaussianDenoiser::new(
            ORACLE_MEAN,
            ORACLE_VAR,
            cfg.schedule()?,
        )?),
        Backend::Toy => BuiltDenoiser::Toy(build_toy_denoiser(cfg, seed)?),
    })
}

fn run_train(cfg: &RunConfig, out: &Path) -> Result<Outcome, CliError> {
    if cfg.backend != Backend::Toy {
        return Err(CliError::Config(
            "train-adapter needs backend = toy; the oracle has no weights".into(),
        ));
    }
    let schedule = cfg.schedule()?;
    let clips: Vec<_> = cfg
        .seeds
        .iter()
        .map(|&seed| synthetic_clip::<f64>(&cfg.clip_spec(seed)).map(|s| s.clip))
        .collect::<Result<_, _>>()?;

    let latent = cfg.codec.latent_shape(GridShape::new(cfg.frames, 1, cfg.height, cfg.width))?;
    let mut model = ToyDenoiser::init(frameadapt_core::ToyDenoiserConfig {
        latent_channels: 1,
        control_channels: 1,
        height: latent.height,
        width: latent.width,
        d_feat: cfg.d_feat,
        d_cond: cfg.d_cond,
        rank: cfg.lora_rank,
        t_total: cfg.t_total,
        seed: cfg.seeds[0],
    })?;
    let outcome = train_driver(&mut model, &clips, &schedule, &cfg.train_config(cfg.seeds[0])?)?;

    write_file(&out.join("checkpoint.json"), &outcome.checkpoint.to_json()?)?;

    let mut csv = String::from("step,t,lr,temporal,diffusion,total,applied\n");
    for log in &outcome.curves {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            log.step, log.t, log.lr, log.temporal, log.diffusion, log.total, log.applied
        ));
    }
    write_file(&out.join("loss.csv"), &csv)?;

    let columns: [(&str, fn(&StepLog) -> f64); 3] = [
        ("temporal", |l| l.temporal),
        ("diffusion", |l| l.diffusion),
        ("total", |l| l.total),
    ];
    let series: Vec<(String, Vec<(f64, f64)>)> = columns
        .iter()
        .map(|(name, f)| {
            (
                name.to_string(),
                outcome.curves.iter().map(|l| (l.step as f64, f(l))).collect(),
            )
        })
        .collect();
    write_file(&out.join("loss.svg"), &svg_line_plot("training loss", &series))?;

    let last = outcome.curves.last().expect("validated steps > 0");
    println!(
        "trained {} steps on {} clips; final total loss {:.6e}",
        cfg.steps,
        clips.len(),
        last.total
    );
    Ok(Outcome::Clean)
}

fn run_invert(cfg: &RunConfig, out: &Path) -> Result<Outcome, CliError> {
    let schedule = cfg.schedule()?;
    let bilateral = cfg.edit_config(0).bilateral;
    let mut csv = String::from("seed,frame,step,variance_before,variance_after\n");
    let mut first_seed_series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();

    for (i, &seed) in cfg.seeds.iter().enumerate() {
        let d = build_denoiser(cfg, seed)?;
        let synth = synthetic_clip::<f64>(&cfg.clip_spec(seed))?;
        let latents = frameadapt_core::pipeline::encode_clip(&synth.clip, cfg.codec)?;
        let frames: Vec<Grid<f64>> = (0..latents.shape().batch)
            .map(|f| frameadapt_core::pipeline::frame_grid(&latents, f))
            .collect::<Result<_, _>>()?;
        let traces = invert_clip(
            &frames,
            cfg.invert_steps,
            &schedule,
            d.as_dyn(),
            &bilateral,
            cfg.filter_direction,
        )?;
        for (f, trace) in traces.iter().enumerate() {
            for step in 0..cfg.invert_steps {
                csv.push_str(&format!(
                    "{seed},{f},{},{},{}\n",
                    step + 1,
                    trace.variance_before[step],
                    trace.variance_after[step]
                ));
            }
            if i == 0 {
                first_seed_series.push((
                    format!("frame-{f}"),
                    trace
                        .variance_after
                        .iter()
                        .enumerate()
                        .map(|(s, &v)| ((s + 1) as f64, v))
                        .collect(),
                ));
            }
        }
    }
    write_file(&out.join("variance.csv"), &csv)?;
    write_file(
        &out.join("variance.svg"),
        &svg_line_plot("filtered latent variance per step", &first_seed_series),
    )?;
    println!(
        "inverted {} seed clip(s) for {} steps at kernel {}",
        cfg.seeds.len(),
        cfg.invert_steps,
        cfg.kernel_size
    );
    Ok(Outcome::Clean)
}

fn run_sample(cfg: &RunConfig, out: &Path) -> Result<Outcome, CliError> {
    let schedule = cfg.schedule()?;
    let clips_dir = out.join("clips");
    fs::create_dir_all(&clips_dir).map_err(|e| io_err("creating clips directory", e))?;
    let latent = cfg.codec.latent_shape(GridShape::new(cfg.frames, 1, cfg.height, cfg.width))?;

    let mut csv = String::from("seed,frame,mean,std,min,max\n");
    let mut sim_series = Vec::new();
    for &seed in &cfg.seeds {
        let d = build_denoiser(cfg, seed)?;
        let top: Grid<f64> = Grid::noise(latent, &NoiseSpec::standard(seed));
        // Conditioning tokens, when requested, come from the seed's
        // synthetic clip: sampling needs some frame context to pool.
        let conditioning = if cfg.d_cond > 0 {
            let synth = synthetic_clip::<f64>(&cfg.clip_spec(seed))?;
            Some(build_conditioning(cfg, &synth.clip.frames, seed)?)
        } else {
            None
        };
        let trace = denoise_clip(
            &top,
            conditioning.as_deref(),
            None,
            &schedule,
            d.as_dyn(),
            cfg.invert_steps,
        )?;
        let decoded = cfg.codec.decode(trace.output())?;

        for f in 0..decoded.shape().batch {
            let frame = frameadapt_core::pipeline::frame_grid(&decoded, f)?;
            let data = frame.data();
            let n = data.len() as f64;
            let mean = data.iter().sum::<f64>() / n;
            let var = data.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &v in data {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            csv.push_str(&format!("{seed},{f},{mean},{},{lo},{hi}\n", var.sqrt()));
        }
        sim_series.push((
            format!("seed-{seed}"),
            similarity_curve(&decoded)?
                .iter()
                .enumerate()
                .map(|(i, &v)| ((i + 1) as f64, v))
                .collect(),
        ));
        write_clip(
            &clips_dir.join(format!("seed-{seed}.json")),
            &ClipFile {
                id: format!("seed-{seed}"),
                frames: GridFile::from_grid(&decoded),
                reference: None,
            },
        )?;
    }
    write_file(&out.join("stats.csv"), &csv)?;
    write_file(
        &out.join("similarity.svg"),
        &svg_line_plot("adjacent-frame similarity of sampled clips", &sim_series),
    )?;
    println!("sampled {} clip(s) over {} steps", cfg.seeds.len(), cfg.invert_steps);
    Ok(Outcome::Clean)
}

fn run_edit(cfg: &RunConfig, out: &Path, args: &RunArgs) -> Result<Outcome, CliError> {
    let schedule = cfg.schedule()?;
    let clips_dir = out.join("clips");
    fs::create_dir_all(&clips_dir).map_err(|e| io_err("creating clips directory", e))?;

    let mut rows: Vec<ClipMetrics> = Vec::with_capacity(cfg.seeds.len());
    let mut sim_series = Vec::new();
    let mut bar_labels = Vec::new();
    let mut bar_values = Vec::new();
    for &seed in &cfg.seeds {
        let d = build_denoiser(cfg, seed)?;
        let synth = synthetic_clip::<f64>(&cfg.clip_spec(seed))?;
        let conditioning = if cfg.d_cond > 0 {
            Some(build_conditioning(cfg, &synth.clip.frames, seed)?)
        } else {
            None
        };
        let edited = edit_clip(
            &synth.clip,
            conditioning.as_deref(),
            &schedule,
            d.as_dyn(),
            &cfg.edit_config(seed),
        )?;
        write_file(
            &out.join(format!("manifest-seed-{seed}.json")),
            &edited.manifest.to_json()?,
        )?;
        write_clip(
            &clips_dir.join(format!("seed-{seed}.json")),
            &ClipFile {
                id: format!("seed-{seed}"),
                frames: GridFile::from_grid(&edited.clip.frames),
                reference: Some(GridFile::from_grid(&synth.clean)),
            },
        )?;
        let row = clip_metrics(format!("seed-{seed}"), &edited.clip.frames, &synth.clean, 1.0)?;
        bar_labels.push(row.clip_id.clone());
        bar_values.push(row.flicker);
        sim_series.push((
            row.clip_id.clone(),
            similarity_curve(&edited.clip.frames)?
                .iter()
                .enumerate()
                .map(|(i, &v)| ((i + 1) as f64, v))
                .collect(),
        ));
        rows.push(row);
    }
    write_file(
        &out.join("similarity.svg"),
        &svg_line_plot("adjacent-frame similarity of edited clips", &sim_series),
    )?;
    write_file(
        &out.join("flicker.svg"),
        &svg_bar_plot("flicker per seed", &bar_labels, &bar_values),
    )?;
    let report = MetricReport::new(rows)?;
    emit_report(cfg, out, report, Some(&clips_dir), Duration::from_secs(args.timeout_secs))
}

fn run_metrics(cfg: &RunConfig, out: &Path, args: &RunArgs) -> Result<Outcome, CliError> {
    let (rows, clips_dir) = match &args.clips {
        Some(dir) => (read_clip_rows(dir)?, Some(dir.clone())),
        None => {
            // Without saved clips, score the raw synthetic clips against
            // their clean frames: a baseline for the edit reports.
            let mut rows = Vec::with_capacity(cfg.seeds.len());
            for &seed in &cfg.seeds {
                let synth = synthetic_clip::<f64>(&cfg.clip_spec(seed))?;
                rows.push(clip_metrics(
                    format!("seed-{seed}"),
                    &synth.clip.frames,
                    &synth.clean,
                    1.0,
                )?);
            }
            (rows, None)
        }
    };
    let report = MetricReport::new(rows)?;
    emit_report(
        cfg,
        out,
        report,
        clips_dir.as_deref(),
        Duration::from_secs(args.timeout_secs),
    )
}

fn read_clip_rows(dir: &Path) -> Result<Vec<ClipMetrics>, CliError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::Config(format!("clips directory {}: {e}", dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Config(format!(
            "no .json clip files in {}",
            dir.display()
        )));
    }
    let mut rows = Vec::with_capacity(paths.len());
    for path in &paths {
        let text = fs::read_to_string(path)
            .map_err(|e| io_err(&format!("reading {}", path.display()), e))?;
        let clip: ClipFile = serde_json::from_str(&text).map_err(|e| {
            CliError::Config(format!("clip file {}: {e}", path.display()))
        })?;
        let frames = clip.frames.to_grid()?;
        // Self-comparison when the reference is absent: PSNR caps out and
        // the temporal columns still carry signal.
        let reference = match &clip.reference {
            Some(r) => r.to_grid()?,
            None => frames.clone(),
        };
        rows.push(clip_metrics(clip.id, &frames, &reference, 1.0)?);
    }
    Ok(rows)
}

fn run_ablate(cfg: &RunConfig, out: &Path, args: &RunArgs) -> Result<Outcome, CliError> {
    let timeout = Duration::from_secs(args.timeout_secs);
    let failures: Mutex<Vec<(String, String)>> = Mutex::new(Vec::new());
    let subst = hook_substituter(out, None, cfg.seeds.len());
    let runner = |cell_cfg: &RunConfig| {
        let mut report = standard_cell_runner(cell_cfg)?;
        if !cell_cfg.hooks.is_empty() {
            let cell_failures = run_hooks(cell_cfg, &mut report, &subst, timeout);
            failures.lock().unwrap().extend(cell_failures);
        }
        Ok(report)
    };
    let outcome = ablation_runner(cfg, &runner)?;

    write_file(&out.join("sweep.csv"), &outcome.to_csv())?;
    let cells_dir = out.join("cells");
    fs::create_dir_all(&cells_dir).map_err(|e| io_err("creating cells directory", e))?;
    for (i, cell) in outcome.cells.iter().enumerate() {
        write_file(&cells_dir.join(format!("cell-{i:03}.csv")), &cell.report.to_csv())?;
    }

    let cell_line = |f: &dyn Fn(&frameadapt_core::metrics::AggregateRow) -> f64| {
        outcome
            .cells
            .iter()
            .enumerate()
            .map(|(i, c)| (i as f64, f(&c.report.aggregate())))
            .collect::<Vec<_>>()
    };
    write_file(
        &out.join("psnr.svg"),
        &svg_line_plot("aggregate psnr per cell", &[("psnr".into(), cell_line(&|a| a.psnr))]),
    )?;
    write_file(
        &out.join("flicker.svg"),
        &svg_line_plot(
            "aggregate flicker per cell",
            &[("flicker".into(), cell_line(&|a| a.flicker))],
        ),
    )?;
    let labels: Vec<String> = (0..outcome.cells.len()).map(|i| format!("c{i}")).collect();
    let flickers: Vec<f64> =
        outcome.cells.iter().map(|c| c.report.aggregate().flicker).collect();
    write_file(
        &out.join("bars.svg"),
        &svg_bar_plot("flicker per cell", &labels, &flickers),
    )?;

    for (metric, &idx) in &outcome.best {
        let settings: Vec<String> = outcome.cells[idx]
            .settings
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect();
        println!("best {metric}: cell {idx} ({})", settings.join(", "));
    }
    let failures = failures.into_inner().unwrap();
    if failures.is_empty() {
        Ok(Outcome::Clean)
    } else {
        Ok(Outcome::HookFailures(failures))
    }
}
