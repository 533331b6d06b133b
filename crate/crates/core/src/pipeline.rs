//! File-to-file orchestration: `synth`, `prepare`, `train`, `eval` and
//! `report`, all driven by one [`RunConfig`].
//!
//! Output layout under the run directory:
//!
//! ```text
//! captures/<bw>mhz/<env>_<activity>.csic   captures/<bw>mhz/manifest.csv
//! features/<variant>/<env>/rx<r>.csif      variant = <bw>mhz_<antennas>
//! models/<variant>/rx<r>.csim              models/<variant>/rx<r>_loss.csv
//! models/<variant>/baseline_rx<r>.csim     models/<variant>/split.csv
//! reports/...
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::align::align_streams;
use crate::config::{Config, ConfigError};
use crate::fewshot::{
    classify_embedding, prototypes_from_embeddings, read_model, train, write_model, ArchSpec,
    Classifier, EpisodeSampler, FewShotError, SavedModel, TrainConfig,
};
use crate::fusion::{fuse, ClassProbabilities};
use crate::ingest::{
    binary, parse_capture, prune_subcarriers, Bandwidth, CaptureFormat, CsiStream, PruneMask,
};
use crate::metrics::{report, train_baseline, BaselineConfig, ConfusionMatrix, MetricsReport};
use crate::prepare::{
    prepare_campaign, read_features, write_features, CorrelationFeature, FeatureMode, PrepareConfig,
};
use crate::synth::{generate, inject_loss, SynthSettings};
use crate::Error;

/// Which antennas of every receiver enter the data frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AntennaSelection {
    All,
    /// The `n` lowest antenna ids.
    First(usize),
}

impl AntennaSelection {
    pub fn label(self) -> String {
        match self {
            AntennaSelection::All => "all".into(),
            AntennaSelection::First(n) => format!("{n}ant"),
        }
    }

    /// Keeps the selected antennas of every receiver.
    pub fn apply(self, streams: Vec<CsiStream>) -> Vec<CsiStream> {
        let AntennaSelection::First(n) = self else {
            return streams;
        };
        let mut per_rx: BTreeMap<u8, Vec<u8>> = BTreeMap::new();
        for s in &streams {
            per_rx.entry(s.receiver_id).or_default().push(s.antenna_id);
        }
        for ids in per_rx.values_mut() {
            ids.sort_unstable();
            ids.truncate(n);
        }
        streams
            .into_iter()
            .filter(|s| per_rx[&s.receiver_id].contains(&s.antenna_id))
            .collect()
    }
}

impl std::str::FromStr for AntennaSelection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(AntennaSelection::All);
        }
        match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(AntennaSelection::First(n)),
            _ => Err(format!(
                "expected 'all' or a positive antenna count, got '{s}'"
            )),
        }
    }
}

/// Layer sizes that do not depend on the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelShape {
    pub blocks: usize,
    pub filters: usize,
    pub standardize: bool,
}

impl ModelShape {
    pub fn arch(self, input_size: usize) -> ArchSpec {
        ArchSpec {
            blocks: self.blocks,
            filters: self.filters,
            input_size,
            standardize: self.standardize,
        }
    }
}

impl Default for ModelShape {
    fn default() -> Self {
        let a = ArchSpec::standard(0);
        ModelShape {
            blocks: a.blocks,
            filters: a.filters,
            standardize: a.standardize,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub tasks: usize,
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    /// Use receivers `0..n` (all when `None`).
    pub receivers: Option<usize>,
    /// Environments to test on; empty means every configured environment.
    pub targets: Vec<String>,
    pub baseline: bool,
    /// Write the per-query fusion CSV.
    pub fusion_csv: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            tasks: 1000,
            way: 4,
            shot: 5,
            queries: 5,
            receivers: None,
            targets: Vec::new(),
            baseline: true,
            fusion_csv: true,
        }
    }
}

/// Everything a run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub out: PathBuf,
    pub seed: u64,
    pub synth: SynthSettings,
    /// Per-record drop probability applied to generated captures.
    pub loss_prob: f64,
    pub prepare: PrepareConfig,
    pub masks: HashMap<Bandwidth, PruneMask>,
    /// Bandwidth processed by `prepare`, `train` and `eval`.
    pub bandwidth: Bandwidth,
    pub antennas: AntennaSelection,
    pub model: ModelShape,
    pub train: TrainConfig,
    pub train_fraction: f64,
    /// Environment used for training.
    pub source: String,
    pub baseline: BaselineConfig,
    pub eval: EvalConfig,
}

fn invalid(
    section: &str,
    key: &str,
    value: impl ToString,
    reason: impl Into<String>,
) -> ConfigError {
    ConfigError::Invalid {
        section: section.into(),
        key: key.into(),
        value: value.to_string(),
        reason: reason.into(),
    }
}

fn parse_with<T>(config: &Config, section: &str, key: &str, default: T) -> Result<T, ConfigError>
where
    T: std::str::FromStr,
    T::Err: std::fmt::Display,
{
    match config.get(section, key) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|e: T::Err| invalid(section, key, v, e.to_string())),
    }
}

impl RunConfig {
    /// Builds the run configuration. `[run] seed` and `[run] out` may be
    /// overridden by the caller through [`Config::set`].
    pub fn from_config(config: &Config) -> crate::Result<Self> {
        let seed: u64 = config.parsed_or("run", "seed", 0)?;
        let out = PathBuf::from(config.get("run", "out").unwrap_or("out"));
        let synth = SynthSettings::from_config(config, seed)?;
        let loss_prob: f64 = config.parsed_or("synth", "loss_prob", 0.0)?;
        if !(0.0..1.0).contains(&loss_prob) {
            return Err(invalid("synth", "loss_prob", loss_prob, "must be in [0, 1)").into());
        }

        let prepare = PrepareConfig {
            window: config.parsed_or("prepare", "window", 300usize)?,
            mode: parse_with(config, "prepare", "mode", FeatureMode::Amplitude)?,
        };
        if prepare.window == 0 {
            return Err(invalid("prepare", "window", 0, "must be at least 1").into());
        }
        let mut masks = HashMap::new();
        for bw in [Bandwidth::Mhz20, Bandwidth::Mhz80] {
            let key = format!("mask_{}", bw.mhz());
            let mask = match config.get("prepare", &key) {
                Some(text) => PruneMask::parse(bw, text)
                    .map_err(|e| invalid("prepare", &key, text, e.to_string()))?,
                None => PruneMask::default_for(bw),
            };
            masks.insert(bw, mask);
        }
        let bandwidth = match config.parsed::<u16>("prepare", "bandwidth")? {
            Some(m) => Bandwidth::from_mhz(m)
                .ok_or_else(|| invalid("prepare", "bandwidth", m, "must be 20 or 80"))?,
            None => synth.bandwidths[0],
        };
        let antennas = parse_with(config, "prepare", "antennas", AntennaSelection::All)?;

        let d = ModelShape::default();
        let model = ModelShape {
            blocks: config.parsed_or("model", "blocks", d.blocks)?,
            filters: config.parsed_or("model", "filters", d.filters)?,
            standardize: config.parsed_or("model", "standardize", d.standardize)?,
        };
        model.arch(1 << model.blocks.min(16)).validate()?;

        let t = TrainConfig::default();
        let train = TrainConfig {
            learning_rate: config.parsed_or("train", "learning_rate", t.learning_rate)?,
            lr_halving_interval: config.parsed_or("train", "lr_halving", t.lr_halving_interval)?,
            episodes: config.parsed_or("train", "episodes", t.episodes)?,
            way: config.parsed_or("train", "way", t.way)?,
            shot: config.parsed_or("train", "shot", t.shot)?,
            queries: config.parsed_or("train", "queries", t.queries)?,
            seed,
            pretrain_epochs: config.parsed_or("train", "pretrain_epochs", t.pretrain_epochs)?,
            pretrain_batch: config.parsed_or("train", "pretrain_batch", t.pretrain_batch)?,
        };
        for (key, v) in [
            ("way", train.way),
            ("shot", train.shot),
            ("queries", train.queries),
        ] {
            if v == 0 {
                return Err(invalid("train", key, v, "must be at least 1").into());
            }
        }
        let train_fraction: f64 = config.parsed_or("train", "train_fraction", 0.7)?;
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(invalid(
                "train",
                "train_fraction",
                train_fraction,
                "must be in (0, 1)",
            )
            .into());
        }
        let source = config
            .get("train", "source")
            .map(str::to_string)
            .unwrap_or_else(|| synth.environments[0].name.clone());
        if !synth.environments.iter().any(|e| e.name == source) {
            return Err(invalid("train", "source", &source, "not a configured environment").into());
        }
        let b = BaselineConfig::default();
        let baseline = BaselineConfig {
            epochs: config.parsed_or("baseline", "epochs", b.epochs)?,
            batch_size: config.parsed_or("baseline", "batch", b.batch_size)?,
            learning_rate: config.parsed_or("baseline", "learning_rate", b.learning_rate)?,
            seed,
        };

        let e = EvalConfig::default();
        let eval = EvalConfig {
            tasks: config.parsed_or("eval", "tasks", e.tasks)?,
            way: config.parsed_or("eval", "way", e.way)?,
            shot: config.parsed_or("eval", "shot", e.shot)?,
            queries: config.parsed_or("eval", "queries", e.queries)?,
            receivers: config.parsed("eval", "receivers")?,
            targets: config.list("eval", "targets")?.unwrap_or_default(),
            baseline: config.parsed_or("baseline", "enabled", e.baseline)?,
            fusion_csv: config.parsed_or("eval", "fusion_csv", e.fusion_csv)?,
        };
        for (key, v) in [
            ("tasks", eval.tasks),
            ("way", eval.way),
            ("shot", eval.shot),
            ("queries", eval.queries),
        ] {
            if v == 0 {
                return Err(invalid("eval", key, v, "must be at least 1").into());
            }
        }
        if eval.receivers == Some(0) {
            return Err(invalid("eval", "receivers", 0, "must be at least 1").into());
        }
        for t in &eval.targets {
            if !synth.environments.iter().any(|e| &e.name == t) {
                return Err(invalid("eval", "targets", t, "not a configured environment").into());
            }
        }

        Ok(RunConfig {
            out,
            seed,
            synth,
            loss_prob,
            prepare,
            masks,
            bandwidth,
            antennas,
            model,
            train,
            train_fraction,
            source,
            baseline,
            eval,
        })
    }

    pub fn mask(&self) -> &PruneMask {
        &self.masks[&self.bandwidth]
    }

    pub fn arch(&self) -> ArchSpec {
        self.model.arch(self.mask().len())
    }

    /// `<bw>mhz_<antennas>`: names the feature and model directories.
    pub fn variant(&self) -> String {
        format!("{}mhz_{}", self.bandwidth.mhz(), self.antennas.label())
    }

    pub fn activity_names(&self) -> Vec<String> {
        let mut acts: Vec<_> = self.synth.activities.iter().collect();
        acts.sort_by_key(|a| a.class_id);
        acts.iter().map(|a| a.name.clone()).collect()
    }

    pub fn environment_names(&self) -> Vec<String> {
        self.synth
            .environments
            .iter()
            .map(|e| e.name.clone())
            .collect()
    }

    pub fn targets(&self) -> Vec<String> {
        if self.eval.targets.is_empty() {
            self.environment_names()
        } else {
            self.eval.targets.clone()
        }
    }

    pub fn captures_dir(&self, bw: Bandwidth) -> PathBuf {
        self.out.join("captures").join(format!("{}mhz", bw.mhz()))
    }

    pub fn features_dir(&self, env: &str) -> PathBuf {
        self.out.join("features").join(self.variant()).join(env)
    }

    pub fn models_dir(&self) -> PathBuf {
        self.out.join("models").join(self.variant())
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.out.join("reports")
    }
}

fn create_dir(path: &Path) -> crate::Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> crate::Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> crate::Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// The run directory must exist; subdirectories are created on demand.
fn check_out_dir(cfg: &RunConfig) -> crate::Result<()> {
    if cfg.out.is_dir() {
        Ok(())
    } else {
        Err(Error::io(
            &cfg.out,
            std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "output directory does not exist",
            ),
        ))
    }
}

/// One generated capture.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub environment: String,
    pub activity: String,
    pub class_id: usize,
    pub file: String,
    pub records: usize,
}

fn manifest_csv(entries: &[ManifestEntry]) -> String {
    let mut out = String::from("environment,activity,class_id,file,records\n");
    for e in entries {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            e.environment, e.activity, e.class_id, e.file, e.records
        );
    }
    out
}

/// Reads `manifest.csv` of a capture directory.
pub fn read_manifest(dir: &Path) -> crate::Result<Vec<ManifestEntry>> {
    let path = dir.join("manifest.csv");
    let text = read_text(&path)?;
    let bad = |line: usize, reason: &str| -> Error {
        invalid("manifest", &format!("line {line}"), path.display(), reason).into()
    };
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad(i + 1, "expected 5 fields"));
        }
        entries.push(ManifestEntry {
            environment: f[0].to_string(),
            activity: f[1].to_string(),
            class_id: f[2].parse().map_err(|_| bad(i + 1, "bad class id"))?,
            file: f[3].to_string(),
            records: f[4].parse().map_err(|_| bad(i + 1, "bad record count"))?,
        });
    }
    Ok(entries)
}

/// Generates every (bandwidth, environment, activity) capture.
pub fn cmd_synth(cfg: &RunConfig) -> crate::Result<Vec<ManifestEntry>> {
    check_out_dir(cfg)?;
    let mut all = Vec::new();
    for &bw in &cfg.synth.bandwidths {
        let dir = cfg.captures_dir(bw);
        create_dir(&dir)?;
        let mut entries = Vec::new();
        for (e, env) in cfg.synth.at(bw).iter().enumerate() {
            for activity in &cfg.synth.activities {
                let mut capture = generate(env, activity, cfg.synth.duration_s, cfg.synth.rate_hz)?;
                if cfg.loss_prob > 0.0 {
                    let seed = cfg.seed ^ ((e as u64) << 32) ^ (activity.class_id as u64) ^ 0x1055;
                    capture = inject_loss(&capture, cfg.loss_prob, seed)?;
                }
                let file = format!("{}_{}.csic", env.name, activity.name);
                let path = dir.join(&file);
                std::fs::write(&path, binary::encode(&capture))
                    .map_err(|err| Error::io(&path, err))?;
                log::info!(
                    "wrote {} ({} records)",
                    path.display(),
                    capture.records.len()
                );
                entries.push(ManifestEntry {
                    environment: env.name.clone(),
                    activity: activity.name.clone(),
                    class_id: activity.class_id,
                    file,
                    records: capture.records.len(),
                });
            }
        }
        write_text(&dir.join("manifest.csv"), &manifest_csv(&entries))?;
        all.extend(entries);
    }
    Ok(all)
}

/// Feature counts of one prepared environment.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedEnvironment {
    pub environment: String,
    /// `(receiver_id, feature count)`.
    pub receivers: Vec<(u8, usize)>,
    pub dropped_degenerate: usize,
}

/// Prepares the captures of one environment into per-receiver features.
/// Window ids run on across the environment's captures. Returns the
/// features and the alignment report.
pub fn prepare_environment(
    cfg: &RunConfig,
    entries: &[&ManifestEntry],
    dir: &Path,
) -> crate::Result<(BTreeMap<u8, Vec<CorrelationFeature>>, String, usize)> {
    let mut per_rx: BTreeMap<u8, Vec<CorrelationFeature>> = BTreeMap::new();
    let mut report = String::from(
        "activity,receiver_id,antenna_id,input,kept_micro,dropped_micro,kept_macro,dropped_macro\n",
    );
    let mut next_window = 0u32;
    let mut dropped = 0;
    for entry in entries {
        let path = dir.join(&entry.file);
        let streams = parse_capture(&path, CaptureFormat::from_path(&path))?;
        if streams.is_empty() {
            log::warn!("{} holds no records; skipped", path.display());
            continue;
        }
        let mut pruned = Vec::with_capacity(streams.len());
        for s in &streams {
            pruned.push(prune_subcarriers(s, cfg.mask())?);
        }
        let selected = cfg.antennas.apply(pruned);
        let (campaign, stats) = align_streams(&selected)?;
        for line in stats.to_csv().lines().skip(1) {
            let _ = writeln!(report, "{},{line}", entry.activity);
        }
        let prepared =
            prepare_campaign(&campaign, &cfg.prepare, Some(entry.class_id), next_window)?;
        dropped += prepared.dropped_degenerate;
        let windows = prepared.packets / cfg.prepare.window;
        if windows == 0 {
            log::warn!(
                "{}: {} aligned packets are fewer than one window",
                path.display(),
                prepared.packets
            );
        }
        for (block, feats) in campaign.blocks.iter().zip(prepared.per_receiver) {
            per_rx.entry(block.receiver_id).or_default().extend(feats);
        }
        next_window += windows as u32;
    }
    Ok((per_rx, report, dropped))
}

/// Ingests, aligns and prepares every environment at `cfg.bandwidth`.
pub fn cmd_prepare(cfg: &RunConfig) -> crate::Result<Vec<PreparedEnvironment>> {
    check_out_dir(cfg)?;
    let dir = cfg.captures_dir(cfg.bandwidth);
    let manifest = read_manifest(&dir)?;
    let mut envs: Vec<String> = Vec::new();
    for e in &manifest {
        if !envs.contains(&e.environment) {
            envs.push(e.environment.clone());
        }
    }
    let reports = cfg.reports_dir();
    create_dir(&reports)?;
    let mut out = Vec::new();
    for env in envs {
        let entries: Vec<&ManifestEntry> =
            manifest.iter().filter(|e| e.environment == env).collect();
        let (per_rx, report, dropped) = prepare_environment(cfg, &entries, &dir)?;
        let fdir = cfg.features_dir(&env);
        create_dir(&fdir)?;
        let mut receivers = Vec::new();
        for (rx, feats) in &per_rx {
            write_features(&fdir.join(format!("rx{rx}.csif")), feats)?;
            receivers.push((*rx, feats.len()));
        }
        write_text(
            &reports.join(format!("{}_{env}_alignment.csv", cfg.variant())),
            &report,
        )?;
        log::info!("prepared {env}: {receivers:?}");
        out.push(PreparedEnvironment {
            environment: env,
            receivers,
            dropped_degenerate: dropped,
        });
    }
    Ok(out)
}

/// Loads `rx*.csif` of one environment, keyed by receiver id.
pub fn load_environment(
    cfg: &RunConfig,
    env: &str,
) -> crate::Result<BTreeMap<u8, Vec<CorrelationFeature>>> {
    let dir = cfg.features_dir(env);
    let listing = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut out = BTreeMap::new();
    for entry in listing {
        let entry = entry.map_err(|e| Error::io(&dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(rx) = name
            .strip_prefix("rx")
            .and_then(|n| n.strip_suffix(".csif"))
            .and_then(|n| n.parse::<u8>().ok())
        else {
            continue;
        };
        out.insert(rx, read_features(&entry.path())?);
    }
    if out.is_empty() {
        return Err(Error::io(
            &dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no rx*.csif feature files"),
        ));
    }
    Ok(out)
}

/// Window ids assigned to training, chosen per class with a seeded shuffle
/// so that every class keeps `fraction` of its windows.
pub fn split_windows(features: &[CorrelationFeature], fraction: f64, seed: u64) -> BTreeSet<u32> {
    let mut by_class: BTreeMap<Option<usize>, Vec<u32>> = BTreeMap::new();
    for f in features {
        by_class.entry(f.label).or_default().push(f.window_index);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(11);
    let mut train = BTreeSet::new();
    for ids in by_class.values_mut() {
        ids.sort_unstable();
        ids.dedup();
        ids.shuffle(&mut rng);
        let n = ((ids.len() as f64 * fraction).round() as usize).min(ids.len());
        train.extend(ids[..n].iter().copied());
    }
    train
}

fn split_csv(features: &[CorrelationFeature], train: &BTreeSet<u32>) -> String {
    let mut out = String::from("window_index,label,set\n");
    for f in features {
        let label = f.label.map_or_else(|| "-".to_string(), |l| l.to_string());
        let set = if train.contains(&f.window_index) {
            "train"
        } else {
            "test"
        };
        let _ = writeln!(out, "{},{label},{set}", f.window_index);
    }
    out
}

fn read_split(path: &Path) -> crate::Result<BTreeSet<u32>> {
    let text = read_text(path)?;
    let mut train = BTreeSet::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(invalid(
                "split",
                &format!("line {}", i + 1),
                path.display(),
                "expected 3 fields",
            )
            .into());
        }
        if f[2] == "train" {
            let w = f[0].parse().map_err(|_| {
                invalid(
                    "split",
                    &format!("line {}", i + 1),
                    f[0],
                    "bad window index",
                )
            })?;
            train.insert(w);
        }
    }
    Ok(train)
}

fn class_count(features: &[CorrelationFeature]) -> usize {
    features
        .iter()
        .filter_map(|f| f.label)
        .collect::<BTreeSet<_>>()
        .len()
}

fn receiver_seed(seed: u64, rx: u8) -> u64 {
    seed.wrapping_mul(0x100_0000_01b3)
        .wrapping_add(u64::from(rx) + 1)
}

/// Result of training on one receiver.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedReceiver {
    pub receiver_id: u8,
    pub samples: usize,
    pub final_loss: Option<f64>,
}

/// Trains one model per receiver on the source environment's training split,
/// plus the supervised baseline when enabled.
pub fn cmd_train(cfg: &RunConfig) -> crate::Result<Vec<TrainedReceiver>> {
    check_out_dir(cfg)?;
    let data = load_environment(cfg, &cfg.source)?;
    let first = data
        .values()
        .next()
        .expect("load_environment returns at least one receiver");
    let classes = class_count(first);
    if cfg.train.way > classes {
        return Err(invalid(
            "train",
            "way",
            cfg.train.way,
            format!("only {classes} classes in the data"),
        )
        .into());
    }
    let split = split_windows(first, cfg.train_fraction, cfg.seed);
    let dir = cfg.models_dir();
    create_dir(&dir)?;
    write_text(&dir.join("split.csv"), &split_csv(first, &split))?;
    let arch = cfg.arch();
    let mut out = Vec::new();
    for (&rx, feats) in &data {
        let train_set: Vec<CorrelationFeature> = feats
            .iter()
            .filter(|f| split.contains(&f.window_index))
            .cloned()
            .collect();
        let mut tcfg = cfg.train.clone();
        tcfg.seed = receiver_seed(cfg.seed, rx);
        let (net, log) = train(&train_set, arch, &tcfg)?;
        write_model(
            &dir.join(format!("rx{rx}.csim")),
            &SavedModel {
                net,
                head: Vec::new(),
                classes: Vec::new(),
            },
        )?;
        write_text(&dir.join(format!("rx{rx}_loss.csv")), &log.to_csv())?;
        if cfg.eval.baseline {
            let mut bcfg = cfg.baseline.clone();
            bcfg.seed = receiver_seed(cfg.seed, rx);
            let (clf, _) = train_baseline(&train_set, arch, &bcfg)?;
            write_model(
                &dir.join(format!("baseline_rx{rx}.csim")),
                &SavedModel {
                    net: clf.net,
                    head: clf.head,
                    classes: clf.classes,
                },
            )?;
        }
        log::info!("trained rx{rx} on {} windows", train_set.len());
        out.push(TrainedReceiver {
            receiver_id: rx,
            samples: train_set.len(),
            final_loss: log.episodes.last().map(|r| r.loss),
        });
    }
    Ok(out)
}

/// Scores of one target environment.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub target: String,
    pub receivers: Vec<u8>,
    pub protonet: MetricsReport,
    pub baseline: Option<MetricsReport>,
    /// `sample_id,true_label,pred_label,<receiver probabilities>` rows.
    pub fusion_csv: String,
}

/// Features of the selected receivers restricted to common window ids, in
/// window order.
fn aligned_pool(
    data: &BTreeMap<u8, Vec<CorrelationFeature>>,
    receivers: &[u8],
    keep: impl Fn(u32) -> bool,
) -> crate::Result<Vec<Vec<CorrelationFeature>>> {
    let mut common: Option<BTreeSet<u32>> = None;
    for rx in receivers {
        let ids: BTreeSet<u32> = data[rx]
            .iter()
            .map(|f| f.window_index)
            .filter(|w| keep(*w))
            .collect();
        common = Some(match common {
            None => ids,
            Some(c) => c.intersection(&ids).copied().collect(),
        });
    }
    let common = common.unwrap_or_default();
    let mut out = Vec::with_capacity(receivers.len());
    for rx in receivers {
        let mut feats: Vec<CorrelationFeature> = data[rx]
            .iter()
            .filter(|f| common.contains(&f.window_index))
            .cloned()
            .collect();
        feats.sort_by_key(|f| f.window_index);
        out.push(feats);
    }
    for (feats, rx) in out.iter().zip(receivers).skip(1) {
        for (a, b) in feats.iter().zip(&out[0]) {
            if a.label != b.label {
                return Err(FewShotError::Episode(format!(
                    "window {} is labeled {:?} on rx{rx} but {:?} on rx{}",
                    a.window_index, a.label, b.label, receivers[0]
                ))
                .into());
            }
        }
    }
    Ok(out)
}

/// Few-shot evaluation with probability fusion over receivers, and the
/// baseline on the same queries.
pub fn evaluate_target(
    cfg: &RunConfig,
    target: &str,
    models: &BTreeMap<u8, SavedModel>,
    baselines: &BTreeMap<u8, Classifier>,
    train_windows: &BTreeSet<u32>,
) -> crate::Result<EvalOutcome> {
    let data = load_environment(cfg, target)?;
    let mut receivers: Vec<u8> = data
        .keys()
        .copied()
        .filter(|rx| models.contains_key(rx))
        .collect();
    if let Some(n) = cfg.eval.receivers {
        if n > receivers.len() {
            return Err(invalid(
                "eval",
                "receivers",
                n,
                format!("only {} receivers available", receivers.len()),
            )
            .into());
        }
        receivers.truncate(n);
    }
    if receivers.is_empty() {
        return Err(
            FewShotError::Episode(format!("no receiver of {target} has a trained model")).into(),
        );
    }
    let in_domain = target == cfg.source;
    let pool = aligned_pool(&data, &receivers, |w| {
        !in_domain || !train_windows.contains(&w)
    })?;
    let labels: Vec<usize> = pool[0]
        .iter()
        .enumerate()
        .map(|(i, f)| {
            f.label.ok_or_else(|| {
                Error::from(FewShotError::Episode(format!(
                    "window {} of {target} has no label",
                    pool[0][i].window_index
                )))
            })
        })
        .collect::<crate::Result<_>>()?;
    let sampler = EpisodeSampler::new(&labels);
    let ev = &cfg.eval;
    let classes = sampler.class_count();
    if ev.way > classes {
        return Err(invalid(
            "eval",
            "way",
            ev.way,
            format!("only {classes} classes in {target}"),
        )
        .into());
    }
    sampler.check(ev.way, ev.shot, ev.queries)?;
    let class_total = labels.iter().max().map_or(0, |m| m + 1).max(
        models
            .values()
            .flat_map(|m| m.classes.iter())
            .max()
            .map_or(0, |m| m + 1),
    );

    // Embeddings (and baseline probabilities) are computed once per sample.
    let mut embeddings = Vec::with_capacity(receivers.len());
    let mut base_probs = Vec::with_capacity(receivers.len());
    for (rx, feats) in receivers.iter().zip(&pool) {
        let inputs: Vec<_> = feats.iter().map(|f| &f.matrix).collect();
        embeddings.push(models[rx].net.embed_all(&inputs)?);
        if ev.baseline {
            if let Some(clf) = baselines.get(rx) {
                let mut probs = Vec::with_capacity(feats.len());
                for f in feats {
                    let p = clf.probabilities(&f.matrix)?;
                    let mut full = vec![0.0; class_total];
                    for (c, v) in clf.classes.iter().zip(p) {
                        full[*c] = v;
                    }
                    probs.push(full);
                }
                base_probs.push(probs);
            }
        }
    }
    let use_baseline = ev.baseline && base_probs.len() == receivers.len();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(21);
    let mut cm = ConfusionMatrix::new(class_total);
    let mut cm_base = ConfusionMatrix::new(class_total);
    let mut fusion_csv = String::from("sample_id,true_label,pred_label");
    for rx in &receivers {
        for k in 0..ev.way {
            let _ = write!(fusion_csv, ",rx{rx}_p{k}");
        }
    }
    fusion_csv.push('\n');
    let mut sample_id = 0usize;
    for _ in 0..ev.tasks {
        let episode = sampler.sample(ev.way, ev.shot, ev.queries, &mut rng)?;
        let support_labels: Vec<usize> = episode.support.iter().map(|s| s.1).collect();
        let mut prototypes = Vec::with_capacity(receivers.len());
        for emb in &embeddings {
            let support: Vec<&[f64]> = episode
                .support
                .iter()
                .map(|s| emb[s.0].as_slice())
                .collect();
            prototypes.push(prototypes_from_embeddings(&support, &support_labels)?);
        }
        for &(q, local) in &episode.query {
            let truth = episode.classes[local];
            let mut per_rx = Vec::with_capacity(receivers.len());
            for (r, rx) in receivers.iter().enumerate() {
                let (_, probs) = classify_embedding(&prototypes[r], &embeddings[r][q]);
                per_rx.push(ClassProbabilities::new(*rx, probs));
            }
            let pred = episode.classes[fuse(&per_rx)?];
            cm.add(truth, pred)?;
            if ev.fusion_csv {
                let _ = write!(fusion_csv, "{sample_id},{truth},{pred}");
                for p in &per_rx {
                    for v in &p.probs {
                        let _ = write!(fusion_csv, ",{v:.6}");
                    }
                }
                fusion_csv.push('\n');
            }
            if use_baseline {
                let per_rx: Vec<ClassProbabilities> = receivers
                    .iter()
                    .zip(&base_probs)
                    .map(|(rx, p)| ClassProbabilities::new(*rx, p[q].clone()))
                    .collect();
                cm_base.add(truth, fuse(&per_rx)?)?;
            }
            sample_id += 1;
        }
    }
    Ok(EvalOutcome {
        target: target.to_string(),
        receivers,
        protonet: report(cm),
        baseline: use_baseline.then(|| report(cm_base)),
        fusion_csv,
    })
}

/// Saved models and classifiers per receiver, plus the training split.
pub type LoadedModels = (
    BTreeMap<u8, SavedModel>,
    BTreeMap<u8, Classifier>,
    BTreeSet<u32>,
);

/// Loads the trained models of the current variant.
pub fn load_models(cfg: &RunConfig) -> crate::Result<LoadedModels> {
    let dir = cfg.models_dir();
    let listing = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let arch = cfg.arch();
    let mut models = BTreeMap::new();
    let mut baselines = BTreeMap::new();
    for entry in listing {
        let entry = entry.map_err(|e| Error::io(&dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(stem) = name.strip_suffix(".csim") else {
            continue;
        };
        if let Some(rx) = stem
            .strip_prefix("baseline_rx")
            .and_then(|n| n.parse::<u8>().ok())
        {
            let m = read_model(&entry.path(), Some(&arch))?;
            baselines.insert(
                rx,
                Classifier {
                    net: m.net,
                    head: m.head,
                    classes: m.classes,
                },
            );
        } else if let Some(rx) = stem.strip_prefix("rx").and_then(|n| n.parse::<u8>().ok()) {
            models.insert(rx, read_model(&entry.path(), Some(&arch))?);
        }
    }
    if models.is_empty() {
        return Err(Error::io(
            &dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no trained rx*.csim models"),
        ));
    }
    let split = read_split(&dir.join("split.csv"))?;
    Ok((models, baselines, split))
}

fn eval_stem(cfg: &RunConfig, target: &str, receivers: usize) -> String {
    format!("{}_{target}_{receivers}rx", cfg.variant())
}

/// Evaluates every target environment and writes metrics, confusion grids
/// and fusion tables to `reports/`.
pub fn cmd_eval(cfg: &RunConfig) -> crate::Result<Vec<EvalOutcome>> {
    check_out_dir(cfg)?;
    let (models, baselines, split) = load_models(cfg)?;
    let reports = cfg.reports_dir();
    create_dir(&reports)?;
    let names = cfg.activity_names();
    let mut out = Vec::new();
    for target in cfg.targets() {
        let outcome = evaluate_target(cfg, &target, &models, &baselines, &split)?;
        let stem = eval_stem(cfg, &target, outcome.receivers.len());
        write_text(
            &reports.join(format!("{stem}_metrics.csv")),
            &outcome.protonet.to_csv(&names),
        )?;
        write_text(
            &reports.join(format!("{stem}_confusion.txt")),
            &outcome.protonet.confusion.to_grid(&names),
        )?;
        if cfg.eval.fusion_csv {
            write_text(
                &reports.join(format!("{stem}_fusion.csv")),
                &outcome.fusion_csv,
            )?;
        }
        if let Some(b) = &outcome.baseline {
            write_text(
                &reports.join(format!("{stem}_baseline_metrics.csv")),
                &b.to_csv(&names),
            )?;
            write_text(
                &reports.join(format!("{stem}_baseline_confusion.txt")),
                &b.confusion.to_grid(&names),
            )?;
        }
        log::info!("{target}: accuracy {:.4}", outcome.protonet.accuracy);
        out.push(outcome);
    }
    Ok(out)
}

/// One line of the ablation table.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub bandwidth: Bandwidth,
    pub antennas: AntennaSelection,
    pub receivers: usize,
    pub target: String,
    pub protonet: MetricsReport,
    pub baseline: Option<MetricsReport>,
}

fn features_present(cfg: &RunConfig) -> bool {
    cfg.environment_names()
        .iter()
        .all(|e| cfg.features_dir(e).is_dir())
}

/// Runs prepare/train/eval for every bandwidth, for one antenna and all
/// antennas, and for one receiver and all receivers; writes
/// `reports/ablation.csv` and `reports/comparison.csv`. Existing features
/// and models are reused.
pub fn cmd_report(cfg: &RunConfig) -> crate::Result<Vec<AblationRow>> {
    check_out_dir(cfg)?;
    let mut rows = Vec::new();
    for &bw in &cfg.synth.bandwidths {
        if !cfg.captures_dir(bw).join("manifest.csv").is_file() {
            return Err(Error::io(
                cfg.captures_dir(bw),
                std::io::Error::new(std::io::ErrorKind::NotFound, "no captures; run synth first"),
            ));
        }
        for antennas in [AntennaSelection::First(1), AntennaSelection::All] {
            let mut c = cfg.clone();
            c.bandwidth = bw;
            c.antennas = antennas;
            if !features_present(&c) {
                cmd_prepare(&c)?;
            }
            if !c.models_dir().join("split.csv").is_file() {
                cmd_train(&c)?;
            }
            let (models, baselines, split) = load_models(&c)?;
            let all = models.len();
            let counts: Vec<usize> = if all > 1 { vec![1, all] } else { vec![1] };
            for n in counts {
                c.eval.receivers = Some(n);
                for target in c.targets() {
                    let o = evaluate_target(&c, &target, &models, &baselines, &split)?;
                    rows.push(AblationRow {
                        bandwidth: bw,
                        antennas,
                        receivers: o.receivers.len(),
                        target,
                        protonet: o.protonet,
                        baseline: o.baseline,
                    });
                }
            }
        }
    }
    let reports = cfg.reports_dir();
    create_dir(&reports)?;
    let names = cfg.activity_names();
    write_text(&reports.join("ablation.csv"), &ablation_csv(&rows, &names))?;
    write_text(&reports.join("comparison.csv"), &comparison_csv(cfg, &rows))?;
    Ok(rows)
}

/// `bandwidth_mhz,antennas,receivers,target,<per-class accuracy>,mean,overall`.
pub fn ablation_csv(rows: &[AblationRow], names: &[String]) -> String {
    let mut out = String::from("bandwidth_mhz,antennas,receivers,target");
    for n in names {
        let _ = write!(out, ",{n}");
    }
    out.push_str(",mean,overall\n");
    for r in rows {
        let _ = write!(
            out,
            "{},{},{},{}",
            r.bandwidth.mhz(),
            r.antennas.label(),
            r.receivers,
            r.target
        );
        for m in &r.protonet.per_class {
            let _ = write!(out, ",{:.4}", m.accuracy);
        }
        let _ = writeln!(
            out,
            ",{:.4},{:.4}",
            r.protonet.mean_accuracy, r.protonet.accuracy
        );
    }
    out
}

/// Few-shot model against the baseline with all antennas and receivers:
/// accuracy per target and the drop from the source environment.
pub fn comparison_csv(cfg: &RunConfig, rows: &[AblationRow]) -> String {
    let mut out =
        String::from("bandwidth_mhz,target,protonet,baseline,protonet_drop,baseline_drop\n");
    for &bw in &cfg.synth.bandwidths {
        let full: Vec<&AblationRow> = rows
            .iter()
            .filter(|r| r.bandwidth == bw && r.antennas == AntennaSelection::All)
            .filter(|r| {
                rows.iter().all(|o| {
                    o.bandwidth != bw || o.antennas != r.antennas || o.receivers <= r.receivers
                })
            })
            .collect();
        let source = full.iter().find(|r| r.target == cfg.source);
        for r in &full {
            let b = r.baseline.as_ref().map(|b| b.accuracy);
            let fmt = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v:.4}"));
            let drop_p = source.map(|s| s.protonet.accuracy - r.protonet.accuracy);
            let drop_b = source
                .and_then(|s| s.baseline.as_ref())
                .zip(b)
                .map(|(s, b)| s.accuracy - b);
            let _ = writeln!(
                out,
                "{},{},{:.4},{},{},{}",
                bw.mhz(),
                r.target,
                r.protonet.accuracy,
                fmt(b),
                fmt(drop_p),
                fmt(drop_b)
            );
        }
    }
    out
}
