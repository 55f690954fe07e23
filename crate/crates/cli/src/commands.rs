//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::anyhow;
use log::info;
use rayon::prelude::*;
use serde_json::json;

use xovd_core::acquisition::{build_gallery, DatasetIndex, FixtureWebClient, WebImageClient};
use xovd_core::backends::{BackendBundle, BackendRegistry};
use xovd_core::classifier::{detect, read_detections, write_detections, Detection, DetectionRecord};
use xovd_core::config::RunConfig;
use xovd_core::descriptors::{build_store, extend_store, load_store, save_store, StoreOptions};
use xovd_core::eval::{
    cmte_run, coco_ap, composition_sweep, format_report, format_sweep, k_sweep, k_sweep_csv, sigma_sweep,
    sigma_sweep_csv, CmteInputs, EvalDataset, EvalReport,
};
use xovd_core::imageio;
use xovd_core::material::{build_material_db, MaterialDatabase};
use xovd_core::normalize_class_name;
use xovd_core::synth::{generate_micro_dataset, SynthSpec};

/// Print to stdout, ignoring a closed pipe.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

macro_rules! emit {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = write!(std::io::stdout().lock(), $($arg)*);
    }};
}

use crate::failure::{CliResult, ExitKind, Failure, OrExit};
use crate::{Cli, Command, Overrides, SweepKind};

fn config_error(msg: impl Into<String>) -> Failure {
    Failure::new(ExitKind::Config, anyhow!(msg.into()))
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).or_exit(ExitKind::Config)?;
    }
    fs::write(path, text).map_err(|e| Failure::new(ExitKind::Config, anyhow!("cannot write {}: {e}", path.display())))
}

fn pretty<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

/// Loaded configuration plus where this run writes its artifacts.
struct Ctx {
    cfg: RunConfig,
    run_dir: PathBuf,
    dry_run: bool,
}

fn apply_overrides(cfg: &mut RunConfig, o: &Overrides) {
    if let Some(k) = o.k {
        cfg.k = k;
    }
    if let Some(s) = o.sigma {
        cfg.sigma = s;
    }
    if let Some(t) = o.tau {
        cfg.tau = t;
    }
    if let Some(c) = o.composition {
        cfg.composition = c;
    }
    if let Some(seeds) = &o.seeds {
        cfg.seeds = seeds.clone();
    }
}

fn load_ctx(cli: &Cli) -> CliResult<Ctx> {
    let mut cfg = RunConfig::load(&cli.config)?;
    apply_overrides(&mut cfg, &cli.overrides);
    cfg.check_values()?;
    let base = cli.config.parent().unwrap_or(Path::new("."));
    let root = cli.overrides.runs_dir.clone().or_else(|| cfg.paths.runs.clone()).unwrap_or_else(|| base.join("runs"));
    let run_dir = root.join(cfg.short_hash());
    Ok(Ctx { cfg, run_dir, dry_run: cli.dry_run })
}

impl Ctx {
    fn artifact(&self, name: &str) -> PathBuf {
        self.run_dir.join(name)
    }

    fn vocabulary(&self) -> CliResult<&[String]> {
        if self.cfg.vocabulary.is_empty() {
            return Err(config_error("config has an empty `vocabulary`"));
        }
        Ok(&self.cfg.vocabulary)
    }

    fn backends(&self) -> CliResult<BackendBundle> {
        BackendRegistry::with_stubs().build(&self.cfg.backends).or_exit(ExitKind::Config)
    }

    fn in_house(&self) -> CliResult<DatasetIndex> {
        match self.cfg.optional_existing("in_house")? {
            Some(p) => Ok(DatasetIndex::load(p, self.cfg.split_train.as_deref())?),
            None => Ok(DatasetIndex::empty()),
        }
    }

    fn test_set(&self) -> CliResult<EvalDataset> {
        let p = self.cfg.require_existing("test")?;
        EvalDataset::load(p, self.cfg.split_test.as_deref()).or_exit(ExitKind::Evaluation)
    }

    fn web_client(&self) -> CliResult<Option<Box<dyn WebImageClient>>> {
        if let Some(live) = &self.cfg.live_web {
            return live_client(live);
        }
        Ok(self.cfg.optional_existing("web_fixtures")?.map(|p| Box::new(FixtureWebClient::new(p)) as Box<dyn WebImageClient>))
    }

    fn material_db(&self, index: &DatasetIndex, backends: &BackendBundle) -> CliResult<MaterialDatabase> {
        match self.cfg.optional_existing("material_db")? {
            Some(p) if p.is_file() => Ok(MaterialDatabase::load(p)?),
            _ => Ok(build_material_db(index, backends, &self.cfg.material_options())?),
        }
    }

    /// Check everything a command needs before any backend is constructed.
    fn validate(&self, command: &Command) -> CliResult<()> {
        BackendRegistry::with_stubs().validate(&self.cfg.backends).or_exit(ExitKind::Config)?;
        self.cfg.optional_existing("in_house")?;
        self.cfg.optional_existing("web_fixtures")?;
        self.cfg.optional_existing("material_db")?;
        if self.cfg.live_web.is_some() && !cfg!(feature = "live-web") {
            return Err(config_error("`live_web` is configured but this build has no live web client"));
        }
        match command {
            Command::BuildDescriptors { extend, .. } => {
                self.vocabulary()?;
                if let Some(p) = extend {
                    if !p.is_file() {
                        return Err(config_error(format!("store to extend {} does not exist", p.display())));
                    }
                }
            }
            Command::Detect { store, manifest, images, .. } => {
                if store.is_none() {
                    self.cfg.require_existing("store")?;
                }
                if manifest.is_none() && images.is_empty() {
                    return Err(config_error("detect needs image paths or --manifest"));
                }
            }
            Command::Evaluate { .. } | Command::Sweep { .. } => {
                self.vocabulary()?;
                self.cfg.require_existing("test")?;
            }
            Command::BuildMaterials { .. } | Command::MakeFixtures { .. } => {}
        }
        Ok(())
    }

    fn plan(&self, command: &Command) -> String {
        let c = &self.cfg;
        let mut lines = vec![
            format!("command      {}", command_name(command)),
            format!("config hash  {}", c.hash()),
            format!("run dir      {}", self.run_dir.display()),
            format!("vocabulary   {}", c.vocabulary.join(", ")),
            format!("k={} sigma={} tau={} composition={} seeds={:?}", c.k, c.sigma, c.tau, c.composition, c.seeds),
            format!(
                "backends     segmenter={} extractor={} material_oracle={} proposal_source={} rgb_filter={}",
                c.backends.segmenter.name,
                c.backends.extractor.name,
                c.backends.material_oracle.name,
                c.backends.proposal_source.name,
                c.backends.rgb_filter.name
            ),
        ];
        for role in ["in_house", "test", "web_fixtures", "material_db", "store", "runs"] {
            let state = match c.path(role) {
                Some(p) if p.exists() => format!("{} (exists)", p.display()),
                Some(p) => format!("{} (missing)", p.display()),
                None => "unset".into(),
            };
            lines.push(format!("paths.{role:<13}{state}"));
        }
        lines.push("dry run: nothing was executed".into());
        lines.join("\n")
    }

    fn write_run_files(&self, command: &Command, started: u64) -> CliResult<()> {
        write_text(&self.artifact("config.json"), &pretty(&self.cfg))?;
        let meta = json!({
            "command": command_name(command),
            "started_unix": started,
            "finished_unix": unix_now(),
            "threads": rayon::current_num_threads(),
            "version": env!("CARGO_PKG_VERSION"),
        });
        write_text(&self.artifact("meta.json"), &pretty(&meta))
    }
}

#[cfg(feature = "live-web")]
fn live_client(live: &xovd_core::acquisition::LiveSearchConfig) -> CliResult<Option<Box<dyn WebImageClient>>> {
    let client = xovd_core::acquisition::LiveWebClient::new(live.clone())?;
    Ok(Some(Box::new(client)))
}

#[cfg(not(feature = "live-web"))]
fn live_client(_: &xovd_core::acquisition::LiveSearchConfig) -> CliResult<Option<Box<dyn WebImageClient>>> {
    Err(config_error("`live_web` is configured but this build has no live web client"))
}

fn command_name(command: &Command) -> &'static str {
    match command {
        Command::MakeFixtures { .. } => "make-fixtures",
        Command::BuildMaterials { .. } => "build-materials",
        Command::BuildDescriptors { .. } => "build-descriptors",
        Command::Detect { .. } => "detect",
        Command::Evaluate { .. } => "evaluate",
        Command::Sweep { .. } => "sweep",
    }
}

pub fn dispatch(cli: &Cli) -> CliResult<()> {
    if let Command::MakeFixtures { out, seed } = &cli.command {
        return make_fixtures(out, *seed, cli.dry_run);
    }
    let ctx = load_ctx(cli)?;
    ctx.validate(&cli.command)?;
    if ctx.dry_run {
        say!("{}", ctx.plan(&cli.command));
        return Ok(());
    }
    let started = unix_now();
    let result = match &cli.command {
        Command::BuildMaterials { out } => build_materials(&ctx, out.as_deref()),
        Command::BuildDescriptors { allow_partial, extend, out } => {
            build_descriptors(&ctx, *allow_partial, extend.as_deref(), out.as_deref())
        }
        Command::Detect { store, manifest, images, out } => {
            run_detect(&ctx, store.as_deref(), manifest.as_deref(), images, out.as_deref())
        }
        Command::Evaluate { detections } => evaluate(&ctx, detections.as_deref()),
        Command::Sweep { what } => sweep(&ctx, *what),
        Command::MakeFixtures { .. } => unreachable!("handled above"),
    };
    ctx.write_run_files(&cli.command, started)?;
    result
}

fn make_fixtures(out: &Path, seed: u64, dry_run: bool) -> CliResult<()> {
    let spec = SynthSpec { seed, ..SynthSpec::default() };
    if dry_run {
        say!("would write the synthetic benchmark (seed {seed}) and xovd.toml under {}", out.display());
        return Ok(());
    }
    let layout = generate_micro_dataset(out, &spec).or_exit(ExitKind::Config)?;
    let vocab: Vec<String> = layout.vocabulary.iter().map(|c| format!("{c:?}")).collect();
    let config = format!(
        "vocabulary = [{}]\n\n[paths]\nin_house = \"train.jsonl\"\ntest = \"test.jsonl\"\nweb_fixtures = \"web\"\nruns = \"runs\"\n",
        vocab.join(", ")
    );
    write_text(&out.join("xovd.toml"), &config)?;
    say!("wrote synthetic benchmark to {}", out.display());
    say!("config: {}", out.join("xovd.toml").display());
    Ok(())
}

fn build_materials(ctx: &Ctx, out: Option<&Path>) -> CliResult<()> {
    let backends = ctx.backends()?;
    let index = ctx.in_house()?;
    let db = build_material_db(&index, &backends, &ctx.cfg.material_options())?;
    let path = out.map(Path::to_path_buf).or_else(|| ctx.cfg.paths.material_db.clone()).unwrap_or_else(|| ctx.artifact("materials.json"));
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).or_exit(ExitKind::Config)?;
    }
    db.save(&path)?;
    if index.is_empty() {
        say!("in-house index is empty: using the fallback material table");
    }
    for (name, m) in db.materials() {
        let classes = db.clusters().get(name).map(|c| c.join(", ")).unwrap_or_default();
        say!("{name:<12} color [{:.3}, {:.3}, {:.3}] support {:>4}  {classes}", m.color[0], m.color[1], m.color[2], m.support);
    }
    say!("material database: {}", path.display());
    Ok(())
}

fn build_descriptors(ctx: &Ctx, allow_partial: bool, extend: Option<&Path>, out: Option<&Path>) -> CliResult<()> {
    let vocab = ctx.vocabulary()?;
    let backends = ctx.backends()?;
    let index = ctx.in_house()?;
    let web = ctx.web_client()?;
    let db = ctx.material_db(&index, &backends)?;
    let existing = extend.map(load_store).transpose()?;

    let classes: Vec<String> = match &existing {
        Some(store) => {
            let have: Vec<String> = store.class_names().iter().map(|c| normalize_class_name(c)).collect();
            vocab.iter().filter(|c| !have.contains(&normalize_class_name(c))).cloned().collect()
        }
        None => vocab.to_vec(),
    };
    let path = out.map(Path::to_path_buf).or_else(|| ctx.cfg.paths.store.clone()).unwrap_or_else(|| ctx.artifact("store.json"));
    if classes.is_empty() {
        let store = existing.expect("only an extension can have nothing to add");
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).or_exit(ExitKind::Config)?;
        }
        save_store(&store, &path)?;
        say!("store already covers the vocabulary: {}", path.display());
        return Ok(());
    }

    let gallery = build_gallery(&classes, &index, web.as_deref(), &backends, &db, &ctx.cfg.gallery_options())?;
    let summary = gallery.provenance_summary();
    for (class, n, prov) in &summary {
        let prov = prov.map(|p| format!("{p:?}")).unwrap_or_else(|| "missing".into());
        say!("{class:<20} {n:>4} samples  {prov}");
    }
    let missing = gallery.missing_classes();
    if !missing.is_empty() && !allow_partial {
        return Err(Failure::new(
            ExitKind::Gallery,
            anyhow!("no gallery samples for: {} (use --allow-partial to continue without them)", missing.join(", ")),
        ));
    }

    let options = StoreOptions { allow_partial, build_timestamp: None, config_hash: Some(ctx.cfg.hash()) };
    let build = match &existing {
        Some(store) => extend_store(store, &gallery, &backends, &options)?,
        None => build_store(&gallery, &backends, &options)?,
    };
    for (class, why) in &build.failed {
        eprintln!("warning: no descriptor for `{class}`: {why}");
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).or_exit(ExitKind::Config)?;
    }
    save_store(&build.store, &path)?;
    let report = json!({
        "gallery": summary.iter().map(|(c, n, p)| json!({"class": c, "samples": n, "provenance": p})).collect::<Vec<_>>(),
        "failed": build.failed.iter().map(|(c, why)| json!({"class": c, "reason": why})).collect::<Vec<_>>(),
        "store": path,
    });
    write_text(&ctx.artifact("gallery.json"), &pretty(&report))?;
    say!("descriptor store with {} classes: {}", build.store.descriptors().len(), path.display());
    Ok(())
}

fn run_detect(ctx: &Ctx, store: Option<&Path>, manifest: Option<&Path>, images: &[PathBuf], out: Option<&Path>) -> CliResult<()> {
    let store_path = match store {
        Some(p) => p.to_path_buf(),
        None => ctx.cfg.require_existing("store")?.to_path_buf(),
    };
    let store = load_store(&store_path)?;
    let backends = ctx.backends()?;
    let source = &backends.proposal_source;
    store.check_compatible(source.feature_space(), source.dim())?;

    let inputs: Vec<(String, PathBuf)> = match manifest {
        Some(m) => EvalDataset::load(m, None)?.scenes.into_iter().map(|s| (s.image_id, s.image_path)).collect(),
        None => images
            .iter()
            .map(|p| (p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| p.display().to_string()), p.clone()))
            .collect(),
    };
    let per_image: Vec<Vec<DetectionRecord>> = inputs
        .par_iter()
        .map(|(id, path)| -> CliResult<Vec<DetectionRecord>> {
            let image = imageio::load(path).or_exit(ExitKind::Evaluation)?;
            let dets = detect(&image, &backends, &store, ctx.cfg.sigma)?;
            Ok(dets.into_iter().map(|detection| DetectionRecord { image_id: id.clone(), detection }).collect())
        })
        .collect::<CliResult<_>>()?;
    let records: Vec<DetectionRecord> = per_image.into_iter().flatten().collect();
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| ctx.artifact("detections.jsonl"));
    let mut buf = Vec::new();
    write_detections(&mut buf, &records)?;
    write_text(&path, std::str::from_utf8(&buf).expect("JSON is UTF-8"))?;
    say!("{} detections on {} images: {}", records.len(), inputs.len(), path.display());
    Ok(())
}

fn group_detections(records: Vec<DetectionRecord>) -> BTreeMap<String, Vec<Detection>> {
    let mut out: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    for r in records {
        out.entry(r.image_id).or_default().push(r.detection);
    }
    out
}

fn detection_records(dets: &BTreeMap<String, Vec<Detection>>) -> Vec<DetectionRecord> {
    dets.iter()
        .flat_map(|(id, ds)| ds.iter().map(move |d| DetectionRecord { image_id: id.clone(), detection: d.clone() }))
        .collect()
}

fn write_report(ctx: &Ctx, report: &EvalReport) -> CliResult<()> {
    let text = format_report(report);
    write_text(&ctx.artifact("report.json"), &pretty(report))?;
    write_text(&ctx.artifact("report.txt"), &text)?;
    emit!("{text}");
    say!("reports: {}", ctx.run_dir.display());
    Ok(())
}

fn evaluate(ctx: &Ctx, detections: Option<&Path>) -> CliResult<()> {
    let test = ctx.test_set()?;
    let vocab = ctx.vocabulary()?;
    if let Some(path) = detections {
        let file = fs::File::open(path).map_err(|e| config_error(format!("cannot open {}: {e}", path.display())))?;
        let records = read_detections(BufReader::new(file)).or_exit(ExitKind::Evaluation)?;
        let gt = test.gt.clone().with_vocabulary(vocab);
        let mut report = coco_ap(&group_detections(records), &gt, &ctx.cfg.eval);
        report.config_hash = Some(ctx.cfg.hash());
        return write_report(ctx, &report);
    }
    let backends = ctx.backends()?;
    let index = ctx.in_house()?;
    let web = ctx.web_client()?;
    let inputs = CmteInputs { vocabulary: vocab, in_house: &index, test: &test, web: web.as_deref() };
    let outcome = cmte_run(inputs, &backends, &ctx.cfg.cmte_config())?;
    for (class, why) in &outcome.failed_classes {
        eprintln!("warning: no descriptor for `{class}`: {why}");
    }
    let mut buf = Vec::new();
    write_detections(&mut buf, &detection_records(&outcome.detections(ctx.cfg.sigma)))?;
    write_text(&ctx.artifact("detections.jsonl"), std::str::from_utf8(&buf).expect("JSON is UTF-8"))?;
    write_report(ctx, &outcome.report)
}

fn sweep(ctx: &Ctx, what: SweepKind) -> CliResult<()> {
    let test = ctx.test_set()?;
    let vocab = ctx.vocabulary()?;
    let backends = ctx.backends()?;
    let index = ctx.in_house()?;
    let web = ctx.web_client()?;
    let inputs = CmteInputs { vocabulary: vocab, in_house: &index, test: &test, web: web.as_deref() };
    let base = ctx.cfg.cmte_config();
    let sw = &ctx.cfg.sweep;

    if matches!(what, SweepKind::Composition | SweepKind::All) {
        info!("composition sweep over {:?} with seeds {:?}", sw.ratios, ctx.cfg.seeds);
        let (summary, error) = match composition_sweep(&sw.ratios, &ctx.cfg.seeds, inputs, &backends, &base) {
            Ok(s) => (s, None),
            Err((s, e)) => (s, Some(e)),
        };
        let text = format_sweep(&summary);
        write_text(&ctx.artifact("composition_sweep.json"), &pretty(&summary))?;
        write_text(&ctx.artifact("composition_sweep.txt"), &text)?;
        emit!("{text}");
        if let Some(e) = error {
            return Err(e.into());
        }
    }
    if matches!(what, SweepKind::K | SweepKind::All) {
        let points = k_sweep(&sw.ks, inputs, &backends, &base)?;
        let csv = k_sweep_csv(&points);
        write_text(&ctx.artifact("k_sweep.csv"), &csv)?;
        emit!("{csv}");
    }
    if matches!(what, SweepKind::Sigma | SweepKind::All) {
        let outcome = cmte_run(inputs, &backends, &base)?;
        let points = sigma_sweep(&outcome, &test, vocab, &sw.sigmas, &ctx.cfg.eval);
        let csv = sigma_sweep_csv(&points);
        write_text(&ctx.artifact("sigma_sweep.csv"), &csv)?;
        emit!("{csv}");
    }
    say!("sweep artifacts: {}", ctx.run_dir.display());
    Ok(())
}
