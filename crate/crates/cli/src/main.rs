use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use screendelta::analytics::{self, Provenance, ReportFormat};
use screendelta::features::FeatureSpec;
use screendelta::raster::Raster;
use screendelta::rts::{self, Pairing, RtsModel, TrainConfig, DEFAULT_HIDDEN};
use screendelta::selectors::{
    RetentionMask, SelectorConfig, DEFAULT_COSINE_THRESHOLD, DEFAULT_RTS_THRESHOLD,
};
use screendelta::sequence::{self, Episode, WhitespaceCounter, DEFAULT_HISTORY};
use screendelta::synthgen::{self, RegionStyle, SynthSpec};

/// Overrides `--out` for every subcommand that writes files.
const OUT_DIR_ENV: &str = "SCREENDELTA_OUT_DIR";

#[derive(Parser, Debug)]
#[command(name = "screendelta", version, about = "Redundancy-aware visual token filtering for screenshot trajectories")]
struct Cli {
    /// Omit wall-clock timestamps from reports so reruns are byte-identical.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Measure per-pair redundancy of one or more trajectories.
    Analyze(AnalyzeArgs),
    /// Assemble filtered windows and write their masks.
    Filter(FilterArgs),
    /// Replay a `filter` output directory and check every mask.
    VerifyMasks(VerifyArgs),
    /// Train the redundancy classifier on a samples file.
    TrainRts(TrainArgs),
    /// Evaluate a trained classifier on a samples file.
    EvalRts(EvalArgs),
    /// Generate synthetic trajectories with planted changes.
    Synth(SynthArgs),
    /// Token totals per history length against a budget.
    Budget(BudgetArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum SelectorKind {
    NoDrop,
    Random,
    Spiral,
    Pixel,
    Cosine,
    Rts,
}

#[derive(Args, Debug, Clone)]
struct SelectorArgs {
    /// Selection strategy. `budget` accepts it more than once.
    #[arg(long = "selector", value_enum, default_value = "pixel")]
    selectors: Vec<SelectorKind>,
    /// Pixel selector: max per-sample difference still counted as unchanged.
    #[arg(long, default_value_t = 2)]
    tolerance: u8,
    /// Cosine or RTS threshold [defaults: cosine 0.95, rts 0.5].
    #[arg(long)]
    threshold: Option<f64>,
    /// Random and spiral selectors: fraction of patches to drop.
    #[arg(long, default_value_t = 0.5)]
    drop_fraction: f64,
    /// Random selector seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Trained model, required by the rts selector.
    #[arg(long)]
    model: Option<PathBuf>,
}

impl SelectorArgs {
    fn configs(&self) -> Vec<SelectorConfig> {
        self.selectors.iter().map(|&k| self.config(k)).collect()
    }

    fn config(&self, kind: SelectorKind) -> SelectorConfig {
        match kind {
            SelectorKind::NoDrop => SelectorConfig::NoDrop,
            SelectorKind::Random => SelectorConfig::Random {
                drop_fraction: self.drop_fraction,
                seed: self.seed,
            },
            SelectorKind::Spiral => SelectorConfig::Spiral {
                drop_fraction: self.drop_fraction,
            },
            SelectorKind::Pixel => SelectorConfig::Pixel {
                tolerance: self.tolerance,
            },
            SelectorKind::Cosine => SelectorConfig::Cosine {
                threshold: self.threshold.unwrap_or(DEFAULT_COSINE_THRESHOLD),
            },
            SelectorKind::Rts => SelectorConfig::Rts {
                threshold: self.threshold.unwrap_or(DEFAULT_RTS_THRESHOLD),
            },
        }
    }

    /// Flag combinations that can be rejected before touching the filesystem.
    fn check_usage(&self, multiple_allowed: bool) -> Result<(), String> {
        if !multiple_allowed && self.selectors.len() > 1 {
            return Err("--selector may be given only once for this subcommand".into());
        }
        if self.selectors.contains(&SelectorKind::Rts) && self.model.is_none() {
            return Err("--selector rts requires --model".into());
        }
        Ok(())
    }

    fn load_model(&self) -> anyhow::Result<Option<RtsModel>> {
        self.model
            .as_ref()
            .map(|p| RtsModel::load(p).with_context(|| format!("loading model {}", p.display())))
            .transpose()
    }
}

#[derive(Args, Debug, Clone)]
struct InputArgs {
    /// Trajectory manifest (repeatable).
    #[arg(long = "manifest", required = true)]
    manifests: Vec<PathBuf>,
    /// Patch features: pixel-stats, dct-lowfreq:K, or external:D.
    #[arg(long, default_value = "pixel-stats", value_parser = parse_features)]
    features: FeatureSpec,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    selector: SelectorArgs,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    /// Output directory; the report goes to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FilterArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "pixel-stats", value_parser = parse_features)]
    features: FeatureSpec,
    #[command(flatten)]
    selector: SelectorArgs,
    /// History window size.
    #[arg(long, default_value_t = DEFAULT_HISTORY)]
    k: usize,
    /// Only assemble this 1-based step (default: every step).
    #[arg(long)]
    step: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Directory written by `filter`.
    #[arg(long)]
    dir: PathBuf,
    /// Trained model, needed when the filter run used the rts selector.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Samples file (repeatable).
    #[arg(long = "samples", required = true)]
    samples: Vec<PathBuf>,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    l2: f64,
    /// Hidden widths as H1,H2.
    #[arg(long, default_value = "64,32", value_parser = parse_hidden)]
    hidden: (usize, usize),
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Tie first-layer weights so the classifier sees `cur - prev`.
    #[arg(long)]
    difference: bool,
    /// Train on raw (unstandardized) inputs.
    #[arg(long)]
    no_standardize: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "samples", required = true)]
    samples: Vec<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_RTS_THRESHOLD)]
    threshold: f64,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Style {
    RectBlocks,
    ScatteredPatches,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Grid size as ROWSxCOLS; sets the frame size to whole patches.
    #[arg(long, value_parser = parse_patches, conflicts_with_all = ["width", "height"])]
    patches: Option<(u32, u32)>,
    #[arg(long)]
    width: Option<u32>,
    #[arg(long)]
    height: Option<u32>,
    #[arg(long, default_value_t = 28)]
    patch_size: u32,
    #[arg(long, default_value_t = 3)]
    channels: u32,
    #[arg(long, default_value_t = 8)]
    steps: usize,
    /// Fraction of patches changed per step.
    #[arg(long, default_value_t = 0.25)]
    change: f64,
    #[arg(long, value_enum, default_value = "rect-blocks")]
    style: Style,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of trajectories; seeds are `seed, seed + 1, ...`.
    #[arg(long, default_value_t = 1)]
    trajectories: usize,
    /// Also write `samples.bin` with one training sample per (pair, patch).
    #[arg(long)]
    samples: bool,
    /// Subsample `samples.bin` to equal label counts.
    #[arg(long, requires = "samples")]
    balance: bool,
    #[arg(long, default_value = "pixel-stats", value_parser = parse_features)]
    features: FeatureSpec,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BudgetArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    selector: SelectorArgs,
    /// History lengths to evaluate, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7,8,9,10")]
    ks: Vec<usize>,
    /// Token ceiling per step.
    #[arg(long)]
    budget: u64,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => ReportFormat::Csv,
            Format::Json => ReportFormat::Json,
        }
    }
}

impl Format {
    fn ext(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

fn parse_features(s: &str) -> Result<FeatureSpec, String> {
    let num = |v: &str| v.parse::<usize>().map_err(|e| format!("bad number in {s:?}: {e}"));
    match s.split_once(':') {
        None if s == "pixel-stats" => Ok(FeatureSpec::PixelStats),
        Some(("dct-lowfreq", k)) => Ok(FeatureSpec::DctLowFreq { k: num(k)? }),
        Some(("external", d)) => Ok(FeatureSpec::External { dim: num(d)? }),
        _ => Err(format!("unknown features {s:?}; expected pixel-stats, dct-lowfreq:K or external:D")),
    }
}

fn parse_hidden(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected H1,H2")?;
    Ok((
        a.trim().parse().map_err(|e| format!("{e}"))?,
        b.trim().parse().map_err(|e| format!("{e}"))?,
    ))
}

fn parse_patches(s: &str) -> Result<(u32, u32), String> {
    let (r, c) = s.split_once(['x', 'X']).ok_or("expected ROWSxCOLS")?;
    Ok((
        r.parse().map_err(|e| format!("{e}"))?,
        c.parse().map_err(|e| format!("{e}"))?,
    ))
}

/// A flag combination error, reported with exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(r: Result<(), String>) -> anyhow::Result<()> {
    r.map_err(|m| UsageError(m).into())
}

fn out_dir(flag: &Option<PathBuf>) -> Option<PathBuf> {
    std::env::var_os(OUT_DIR_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .or_else(|| flag.clone())
}

fn require_out_dir(flag: &Option<PathBuf>) -> anyhow::Result<PathBuf> {
    out_dir(flag).ok_or_else(|| UsageError(format!("--out is required (or set {OUT_DIR_ENV})")).into())
}

/// Decodes `.png` through the image crate; everything else is an RVRS raster.
fn load_image(path: &Path) -> screendelta::Result<Raster> {
    let is_png = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if !is_png {
        return Raster::load(path);
    }
    let img = image::open(path).map_err(|e| screendelta::Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if img.color().has_color() {
        let rgb = img.to_rgb8();
        Raster::new(rgb.width(), rgb.height(), 3, rgb.into_raw())
    } else {
        let l = img.to_luma8();
        Raster::new(l.width(), l.height(), 1, l.into_raw())
    }
}

fn load_corpus(input: &InputArgs) -> anyhow::Result<Vec<Episode>> {
    input
        .manifests
        .iter()
        .map(|m| {
            sequence::load_episode(m, &input.features, &load_image)
                .with_context(|| format!("loading trajectory {}", m.display()))
        })
        .collect()
}

struct Run {
    deterministic: bool,
}

impl Run {
    fn provenance(&self, command: &str, extra: Vec<(&str, String)>) -> Provenance {
        let mut p: Provenance = vec![
            ("command".into(), command.into()),
            ("tool_version".into(), env!("CARGO_PKG_VERSION").into()),
        ];
        p.extend(extra.into_iter().map(|(k, v)| (k.to_string(), v)));
        if !self.deterministic {
            let secs = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            p.push(("generated_unix".into(), secs.to_string()));
        }
        p
    }

    fn provenance_json(&self, command: &str, extra: Vec<(&str, String)>) -> serde_json::Value {
        let map: serde_json::Map<_, _> = self
            .provenance(command, extra)
            .into_iter()
            .map(|(k, v)| (k, serde_json::Value::String(v)))
            .collect();
        serde_json::Value::Object(map)
    }
}

fn write_file(path: &Path, contents: &str) -> anyhow::Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn emit(out: Option<PathBuf>, name: &str, contents: &str) -> anyhow::Result<()> {
    match out {
        Some(dir) => {
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            let path = dir.join(name);
            write_file(&path, contents)?;
            eprintln!("wrote {}", path.display());
        }
        None => print!("{contents}"),
    }
    Ok(())
}

fn paths(ps: &[PathBuf]) -> String {
    ps.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(";")
}

fn json_string(v: &FeatureSpec) -> String {
    serde_json::to_string(v).expect("config values serialize")
}

fn analyze(run: &Run, a: AnalyzeArgs) -> anyhow::Result<()> {
    usage(a.selector.check_usage(false))?;
    let sel = a.selector.configs()[0];
    sel.validate()?;
    let model = a.selector.load_model()?;
    let corpus = load_corpus(&a.input)?;
    let report = analytics::measure_corpus(&corpus, &sel, model.as_ref())?;
    let prov = run.provenance(
        "analyze",
        vec![
            ("manifests", paths(&a.input.manifests)),
            ("features", json_string(&a.input.features)),
        ],
    );
    let agg = &report.aggregate;
    eprintln!(
        "{} pairs, avg redundant/image {:.1} of {:.1} ({:.2}%)",
        agg.n_pairs,
        agg.avg_redundant_per_image,
        agg.avg_patches_per_image,
        100.0 * agg.avg_redundant_fraction
    );
    let doc = report.emit(a.format.into(), &prov)?;
    emit(out_dir(&a.out), &format!("redundancy.{}", a.format.ext()), &doc)
}

fn filter(run: &Run, a: FilterArgs) -> anyhow::Result<()> {
    usage(a.selector.check_usage(false))?;
    if a.k == 0 {
        return usage(Err("--k must be >= 1".into()));
    }
    let dir = require_out_dir(&a.out)?;
    let sel = a.selector.configs()[0];
    sel.validate()?;
    let model = a.selector.load_model()?;
    let episode = sequence::load_episode(&a.manifest, &a.features, &load_image)
        .with_context(|| format!("loading trajectory {}", a.manifest.display()))?;
    let steps: Vec<usize> = match a.step {
        Some(s) if s == 0 || s > episode.len() => {
            bail!("step {s} outside 1..={}", episode.len())
        }
        Some(s) => vec![s],
        None => (1..=episode.len()).collect(),
    };

    let masks_dir = dir.join("masks");
    std::fs::create_dir_all(&masks_dir).with_context(|| format!("creating {}", masks_dir.display()))?;
    for t in 2..=episode.len() {
        let mask = sel.select(&episode.pair(t), model.as_ref())?;
        mask.save(masks_dir.join(format!("pair-{t:04}.rvmk")))?;
    }
    let mut sequences = Vec::with_capacity(steps.len());
    for &t in &steps {
        let window = sequence::build_window(&episode.trajectory, t, a.k)?;
        let seq = sequence::assemble(&episode, &window, &sel, model.as_ref(), &WhitespaceCounter)?;
        let totals = sequence::token_totals(&seq);
        eprintln!(
            "step {t}: {} images, {} visual + {} text tokens",
            seq.images.len(),
            totals.visual_tokens,
            totals.text_tokens
        );
        sequences.push(seq);
    }
    let manifest = std::path::absolute(&a.manifest).unwrap_or(a.manifest.clone());
    let doc = json!({
        "schema_version": analytics::REPORT_SCHEMA_VERSION,
        "provenance": run.provenance_json("filter", vec![("k", a.k.to_string())]),
        "manifest": manifest,
        "features": a.features,
        "selector": sel,
        "k": a.k,
        "sequences": sequences,
    });
    write_file(&dir.join("filtered.json"), &(serde_json::to_string_pretty(&doc)? + "\n"))?;
    eprintln!("wrote {}", dir.display());
    Ok(())
}

fn verify_masks(a: VerifyArgs) -> anyhow::Result<()> {
    let path = a.dir.join("filtered.json");
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let doc: serde_json::Value = serde_json::from_str(&text)?;
    let field = |k: &str| doc.get(k).cloned().ok_or_else(|| anyhow!("{} lacks field {k:?}", path.display()));
    let sel: SelectorConfig = serde_json::from_value(field("selector")?)?;
    let features: FeatureSpec = serde_json::from_value(field("features")?)?;
    let manifest: PathBuf = serde_json::from_value(field("manifest")?)?;
    let sequences: Vec<sequence::FilteredSequence> = serde_json::from_value(field("sequences")?)?;
    if matches!(sel, SelectorConfig::Rts { .. }) && a.model.is_none() {
        return usage(Err("replaying an rts filter run requires --model".into()));
    }
    let model = a.model.as_ref().map(RtsModel::load).transpose()?;
    let episode = sequence::load_episode(&manifest, &features, &load_image)?;

    let mut failures = Vec::new();
    for t in 2..=episode.len() {
        let stored = RetentionMask::load(a.dir.join("masks").join(format!("pair-{t:04}.rvmk")))?;
        if stored != sel.select(&episode.pair(t), model.as_ref())? {
            failures.push(format!("pair mask for step {t} differs from replay"));
        }
    }
    for seq in &sequences {
        if let Err(e) = sequence::check_structure(seq) {
            failures.push(format!("step {}: {e}", seq.step));
        }
        if !sequence::comparison_chain_check(seq) {
            failures.push(format!("step {}: comparison chain broken", seq.step));
        }
        let window = sequence::build_window(&episode.trajectory, seq.step, seq.k)?;
        let replay = sequence::assemble(&episode, &window, &sel, model.as_ref(), &WhitespaceCounter)?;
        if &replay != seq {
            failures.push(format!("step {}: assembled window differs from replay", seq.step));
        }
    }
    if failures.is_empty() {
        println!("ok: {} pair masks and {} windows verified", episode.len().saturating_sub(1), sequences.len());
        Ok(())
    } else {
        for f in &failures {
            eprintln!("mismatch: {f}");
        }
        bail!("{} mask verification failures", failures.len())
    }
}

fn load_sample_files(files: &[PathBuf]) -> anyhow::Result<Vec<rts::TrainingSample>> {
    let mut out = Vec::new();
    for f in files {
        out.extend(rts::load_samples(f).with_context(|| format!("loading samples {}", f.display()))?);
    }
    Ok(out)
}

fn train_rts(run: &Run, a: TrainArgs) -> anyhow::Result<()> {
    let dir = require_out_dir(&a.out)?;
    let cfg = TrainConfig {
        learning_rate: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        l2: a.l2,
        hidden: a.hidden,
        pairing: if a.difference { Pairing::Difference } else { Pairing::Concat },
        standardize: !a.no_standardize,
    };
    cfg.validate()?;
    let samples = load_sample_files(&a.samples)?;
    eprintln!(
        "training on {} samples, hidden {:?}, {} epochs",
        samples.len(),
        cfg.hidden,
        cfg.epochs
    );
    let outcome = rts::train(&samples, &cfg)?;
    let train_metrics = rts::evaluate(&outcome.model, &samples, DEFAULT_RTS_THRESHOLD)?;
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    outcome.model.save(dir.join("model.rvml"))?;
    let log = json!({
        "schema_version": analytics::REPORT_SCHEMA_VERSION,
        "provenance": run.provenance_json("train-rts", vec![("samples", paths(&a.samples))]),
        "config": cfg,
        "n_samples": samples.len(),
        "epoch_losses": outcome.epoch_losses,
        "train_metrics": train_metrics,
    });
    write_file(&dir.join("train_log.json"), &(serde_json::to_string_pretty(&log)? + "\n"))?;
    if let Some(last) = outcome.epoch_losses.last() {
        println!("final loss {last:.6}");
    }
    println!("train accuracy {:.4}", train_metrics.accuracy);
    eprintln!("wrote {}", dir.join("model.rvml").display());
    Ok(())
}

fn eval_rts(run: &Run, a: EvalArgs) -> anyhow::Result<()> {
    if !(a.threshold > 0.0 && a.threshold < 1.0) {
        bail!("threshold {} outside (0, 1)", a.threshold);
    }
    let model = RtsModel::load(&a.model).with_context(|| format!("loading model {}", a.model.display()))?;
    if model.hidden_dims() != DEFAULT_HIDDEN {
        eprintln!("note: model hidden widths {:?}", model.hidden_dims());
    }
    let samples = load_sample_files(&a.samples)?;
    let m = rts::evaluate(&model, &samples, a.threshold)?;
    println!(
        "accuracy {:.4} precision {:.4} recall {:.4} (n={})",
        m.accuracy,
        m.precision,
        m.recall,
        samples.len()
    );
    let prov = run.provenance(
        "eval-rts",
        vec![
            ("model", a.model.display().to_string()),
            ("samples", paths(&a.samples)),
            ("threshold", a.threshold.to_string()),
        ],
    );
    let doc = match a.format {
        Format::Json => {
            let map: serde_json::Map<_, _> = prov.into_iter().map(|(k, v)| (k, v.into())).collect();
            serde_json::to_string_pretty(&json!({
                "schema_version": analytics::REPORT_SCHEMA_VERSION,
                "provenance": map,
                "n_samples": samples.len(),
                "metrics": m,
            }))? + "\n"
        }
        Format::Csv => {
            let mut s: String = prov.iter().map(|(k, v)| format!("# {k}: {v}\n")).collect();
            s += &format!("# schema_version: {}\n", analytics::REPORT_SCHEMA_VERSION);
            s += "n_samples,accuracy,precision,recall,true_pos,false_pos,true_neg,false_neg\n";
            s += &format!(
                "{},{},{},{},{},{},{},{}\n",
                samples.len(),
                analytics::fmt_sig6(m.accuracy),
                analytics::fmt_sig6(m.precision),
                analytics::fmt_sig6(m.recall),
                m.true_pos,
                m.false_pos,
                m.true_neg,
                m.false_neg
            );
            s
        }
    };
    match out_dir(&a.out) {
        Some(dir) => emit(Some(dir), &format!("eval.{}", a.format.ext()), &doc),
        None => Ok(()),
    }
}

fn synth(a: SynthArgs) -> anyhow::Result<()> {
    if a.trajectories == 0 {
        return usage(Err("--trajectories must be >= 1".into()));
    }
    let (width, height) = match a.patches {
        Some((r, c)) => (c * a.patch_size, r * a.patch_size),
        None => {
            let d = SynthSpec::default();
            (a.width.unwrap_or(d.width), a.height.unwrap_or(d.height))
        }
    };
    let base = SynthSpec {
        width,
        height,
        channels: a.channels,
        patch_size: a.patch_size,
        n_steps: a.steps,
        change_fraction: a.change,
        region_style: match a.style {
            Style::RectBlocks => RegionStyle::RectBlocks,
            Style::ScatteredPatches => RegionStyle::ScatteredPatches,
        },
        seed: a.seed,
        ..SynthSpec::default()
    };
    base.validate()?;
    let dir = require_out_dir(&a.out)?;
    let mut samples = Vec::new();
    for i in 0..a.trajectories {
        let spec = SynthSpec {
            seed: a.seed.wrapping_add(i as u64),
            ..base.clone()
        };
        let traj = synthgen::generate(&spec)?;
        let sub = if a.trajectories == 1 {
            dir.clone()
        } else {
            dir.join(format!("traj-{i:04}"))
        };
        traj.write_to_dir(&sub)
            .with_context(|| format!("writing {}", sub.display()))?;
        if a.samples {
            samples.extend(synthgen::make_training_set(&spec, &a.features)?);
        }
    }
    if a.samples {
        if a.balance {
            samples = synthgen::balance_samples(samples, a.seed);
        }
        rts::save_samples(dir.join("samples.bin"), &samples)?;
        let pos = samples.iter().filter(|s| s.label).count();
        eprintln!("samples: {} ({} redundant, {} changed)", samples.len(), pos, samples.len() - pos);
    }
    eprintln!(
        "wrote {} trajectories of {} steps, {} changed of {} patches per step, to {}",
        a.trajectories,
        base.n_steps,
        base.changes_per_step(),
        base.n_patches(),
        dir.display()
    );
    Ok(())
}

fn budget(run: &Run, a: BudgetArgs) -> anyhow::Result<()> {
    usage(a.selector.check_usage(true))?;
    if a.ks.is_empty() || a.ks.contains(&0) {
        return usage(Err("--ks must list history lengths >= 1".into()));
    }
    let configs = a.selector.configs();
    for c in &configs {
        c.validate()?;
    }
    let model = a.selector.load_model()?;
    let corpus = load_corpus(&a.input)?;
    let out = out_dir(&a.out);
    let mut reports = Vec::new();
    for sel in &configs {
        let r = analytics::budget_report(&corpus, sel, &a.ks, a.budget, model.as_ref(), &WhitespaceCounter)?;
        eprintln!(
            "{}: max images within {} tokens = {}",
            sel.kind(),
            a.budget,
            r.max_images_within_budget
        );
        let prov = run.provenance(
            "budget",
            vec![
                ("manifests", paths(&a.input.manifests)),
                ("features", json_string(&a.input.features)),
                ("ks", a.ks.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")),
            ],
        );
        let doc = r.emit(a.format.into(), &prov)?;
        emit(out.clone(), &format!("budget-{}.{}", sel.kind(), a.format.ext()), &doc)?;
        reports.push(r);
    }
    if out.is_some() {
        emit(out, "budget-plot.csv", &analytics::plot_csv(&reports)?)?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let run = Run {
        deterministic: cli.deterministic,
    };
    match cli.command {
        Command::Analyze(a) => analyze(&run, a),
        Command::Filter(a) => filter(&run, a),
        Command::VerifyMasks(a) => verify_masks(a),
        Command::TrainRts(a) => train_rts(&run, a),
        Command::EvalRts(a) => eval_rts(&run, a),
        Command::Synth(a) => synth(a),
        Command::Budget(a) => budget(&run, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
