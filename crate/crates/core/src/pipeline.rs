//! File-artifact pipeline: one function per stage, each reading the previous
//! stages' outputs from the output directory and writing its own atomically.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{self, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::afc::{self, AfcRecord, Calendar, ParseOptions, ReconstructParams, Trip};
use crate::choice::{self, ChoiceLabel, ChoiceRecord, LabelParams, PeakWindows};
use crate::delay::{self, extract_from_log, split_narratives, DelayEvent, ExtractBackend, ExtractionResult};
use crate::eval::{self, compare_models, compute_metrics, MetricsReport, SplitMode};
use crate::impact::{self, AffectedInstance, ImpactParams};
use crate::io::{write_atomic, write_atomic_with};
use crate::llm::{DecodeParams, HttpBackend, HttpConfig, LlmBackend};
use crate::network::{Network, NetworkConfig};
use crate::patterns::{self, ClusterParams, ScreenParams, TravelPattern};
use crate::predictor::{
    fit_tree_ensemble, predict_llm, predict_with_model, EnsembleParams, ForestParams, GbtParams, MajorityClassifier,
    MockBackend, Prediction, PromptTemplate, RunParams,
};
use crate::synth::{self, WorldConfig};

/// Artifact file names inside the output directory.
pub mod artifacts {
    pub const RECORDS: &str = "records.csv";
    pub const TRIPS: &str = "trips.csv";
    pub const INGEST_REPORT: &str = "ingest_report.json";
    pub const EVENTS: &str = "events.jsonl";
    pub const EXTRACTED: &str = "extracted.jsonl";
    pub const REGULARS: &str = "regulars.csv";
    pub const PATTERNS: &str = "patterns.csv";
    pub const AFFECTED: &str = "affected.jsonl";
    pub const LABELS: &str = "labels.csv";
    pub const DATASET: &str = "dataset.csv";
    pub const TEST_SET: &str = "test.csv";
    pub const PREDICTIONS_DIR: &str = "predictions";
    pub const REPORT_TXT: &str = "report.txt";
    pub const REPORT_JSON: &str = "report.json";
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Synth,
    Ingest,
    Delays,
    Mine,
    Affected,
    Label,
    Featurize,
    Predict,
    Eval,
}

impl Stage {
    /// The stages run by `all`, in order.
    pub const CHAIN: [Stage; 8] = [
        Stage::Ingest,
        Stage::Delays,
        Stage::Mine,
        Stage::Affected,
        Stage::Label,
        Stage::Featurize,
        Stage::Predict,
        Stage::Eval,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Ingest => "ingest",
            Stage::Delays => "delays",
            Stage::Mine => "mine",
            Stage::Affected => "affected",
            Stage::Label => "label",
            Stage::Featurize => "featurize",
            Stage::Predict => "predict",
            Stage::Eval => "eval",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [Stage::Synth]
            .into_iter()
            .chain(Stage::CHAIN)
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("stage `{stage}` is missing its input {}: {origin}", path.display())]
    MissingInput { stage: Stage, path: PathBuf, origin: String },
    #[error("strict mode: {0}")]
    Strict(String),
    #[error("config: {0}")]
    Config(String),
    #[error("stage `{stage}`: {msg}")]
    Stage { stage: Stage, msg: String },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::MissingInput { .. } => 2,
            PipelineError::Strict(_) => 3,
            _ => 1,
        }
    }

    fn stage(stage: Stage, e: impl fmt::Display) -> Self {
        PipelineError::Stage { stage, msg: e.to_string() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub network: PathBuf,
    pub calendar: Option<PathBuf>,
    pub afc: PathBuf,
    pub delay_table: Option<PathBuf>,
    pub narratives: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub synth_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            network: "world/network.toml".into(),
            calendar: Some("world/calendar.csv".into()),
            afc: "world/afc.csv".into(),
            delay_table: Some("world/delays.csv".into()),
            narratives: None,
            out_dir: "out".into(),
            synth_dir: "world".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestSection {
    pub max_trip_duration: f64,
    pub delimiter: char,
    pub weekday_filter: bool,
}

impl Default for IngestSection {
    fn default() -> Self {
        IngestSection { max_trip_duration: ReconstructParams::default().max_trip_duration, delimiter: ',', weekday_filter: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventSource {
    Table,
    Narratives,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorKind {
    Rule,
    Llm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DelaysSection {
    pub source: EventSource,
    pub extractor: ExtractorKind,
}

impl Default for DelaysSection {
    fn default() -> Self {
        DelaysSection { source: EventSource::Table, extractor: ExtractorKind::Rule }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MineSection {
    pub day_threshold: usize,
    pub od_day_threshold: usize,
    pub eps_minutes: f64,
    pub min_pts: usize,
    /// Mine on normal days only.
    pub exclude_event_days: bool,
}

impl Default for MineSection {
    fn default() -> Self {
        let (s, c) = (ScreenParams::default(), ClusterParams::default());
        MineSection {
            day_threshold: s.day_threshold,
            od_day_threshold: s.od_day_threshold,
            eps_minutes: c.eps_minutes,
            min_pts: c.min_pts,
            exclude_event_days: true,
        }
    }
}

impl MineSection {
    pub fn screen(&self) -> ScreenParams {
        ScreenParams { day_threshold: self.day_threshold, od_day_threshold: self.od_day_threshold }
    }

    pub fn cluster(&self) -> ClusterParams {
        ClusterParams { eps_minutes: self.eps_minutes, min_pts: self.min_pts }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictSection {
    /// Any of `mock`, `llm`, `rf`, `gbt`, `majority`.
    pub models: Vec<String>,
    pub batch_size: usize,
    pub max_in_flight: usize,
    pub retry_budget: u32,
    pub decode: DecodeParams,
    pub mock_p3_threshold: f64,
    pub split: SplitMode,
    pub train_fraction: f64,
    pub forest: ForestParams,
    pub gbt: GbtParams,
    pub llm: HttpConfig,
    pub template: PromptTemplate,
}

impl Default for PredictSection {
    fn default() -> Self {
        PredictSection {
            models: vec!["mock".into(), "rf".into(), "gbt".into(), "majority".into()],
            batch_size: 10,
            max_in_flight: 4,
            retry_budget: RunParams::default().retry_budget,
            decode: DecodeParams::default(),
            mock_p3_threshold: 6.0,
            split: SplitMode::Stratified,
            train_fraction: 0.7,
            forest: ForestParams::default(),
            gbt: GbtParams::default(),
            llm: HttpConfig::default(),
            template: PromptTemplate::default(),
        }
    }
}

pub const MODEL_IDS: [&str; 5] = ["mock", "llm", "rf", "gbt", "majority"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub strict: bool,
    pub paths: Paths,
    pub ingest: IngestSection,
    pub delays: DelaysSection,
    pub mine: MineSection,
    pub impact: ImpactParams,
    pub label: LabelParams,
    pub features: PeakWindows,
    pub predict: PredictSection,
    /// World generated by the `synth` stage. Its seed is replaced by the
    /// top-level seed.
    pub synth: WorldConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 42,
            strict: false,
            paths: Paths::default(),
            ingest: IngestSection::default(),
            delays: DelaysSection::default(),
            mine: MineSection::default(),
            impact: ImpactParams::default(),
            label: LabelParams::default(),
            features: PeakWindows::default(),
            predict: PredictSection::default(),
            synth: WorldConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Parses TOML, returning the config and the dotted paths of any keys it
    /// did not recognise.
    pub fn parse(text: &str) -> Result<(PipelineConfig, Vec<String>), PipelineError> {
        let mut unknown = Vec::new();
        let de = toml::Deserializer::new(text);
        let cfg: PipelineConfig = serde_ignored::deserialize(de, |p| unknown.push(p.to_string()))
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok((cfg, unknown))
    }

    /// Loads a config file. Relative paths resolve against the file's
    /// directory. Unknown keys are an error in strict mode (from the file or
    /// `strict_override`) and a warning otherwise.
    pub fn load(path: &Path, strict_override: bool) -> Result<PipelineConfig, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io { path: path.into(), source })?;
        let (mut cfg, unknown) = Self::parse(&text)?;
        cfg.strict |= strict_override;
        if !unknown.is_empty() {
            let msg = format!("unknown config key(s): {}", unknown.join(", "));
            if cfg.strict {
                return Err(PipelineError::Strict(msg));
            }
            log::warn!("{msg}");
        }
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let p = &mut self.paths;
        fix(&mut p.network);
        fix(&mut p.afc);
        fix(&mut p.out_dir);
        fix(&mut p.synth_dir);
        for o in [&mut p.calendar, &mut p.delay_table, &mut p.narratives].into_iter().flatten() {
            fix(o);
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if let Some(m) = self.predict.models.iter().find(|m| !MODEL_IDS.contains(&m.as_str())) {
            return bad(format!("unknown model {m:?}; expected one of {MODEL_IDS:?}"));
        }
        if !(0.0..=1.0).contains(&self.predict.train_fraction) {
            return bad("predict.train_fraction must lie in [0, 1]".into());
        }
        if self.predict.batch_size == 0 || self.predict.max_in_flight == 0 {
            return bad("predict.batch_size and predict.max_in_flight must be positive".into());
        }
        if !self.ingest.delimiter.is_ascii() {
            return bad("ingest.delimiter must be a single ASCII character".into());
        }
        Ok(())
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.paths.out_dir.join(name)
    }

    pub fn prediction_path(&self, model: &str) -> PathBuf {
        self.paths.out_dir.join(artifacts::PREDICTIONS_DIR).join(format!("{model}.jsonl"))
    }
}

fn produced_by(name: &str) -> Stage {
    use artifacts::*;
    match name {
        RECORDS | TRIPS | INGEST_REPORT => Stage::Ingest,
        EVENTS | EXTRACTED => Stage::Delays,
        REGULARS | PATTERNS => Stage::Mine,
        AFFECTED => Stage::Affected,
        LABELS => Stage::Label,
        DATASET => Stage::Featurize,
        _ => Stage::Predict,
    }
}

struct Ctx<'a> {
    cfg: &'a PipelineConfig,
    stage: Stage,
}

impl Ctx<'_> {
    fn open_path(&self, path: &Path, origin: impl FnOnce() -> String) -> Result<BufReader<File>, PipelineError> {
        match File::open(path) {
            Ok(f) => Ok(BufReader::new(f)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                Err(PipelineError::MissingInput { stage: self.stage, path: path.into(), origin: origin() })
            }
            Err(source) => Err(PipelineError::Io { path: path.into(), source }),
        }
    }

    /// Opens an artifact written by an earlier stage.
    fn artifact(&self, name: &str) -> Result<BufReader<File>, PipelineError> {
        let producer = produced_by(name);
        self.open_path(&self.cfg.out(name), || format!("produced by the `{producer}` stage; run `{producer}` first"))
    }

    /// Opens a configured input file.
    fn input(&self, path: &Path, key: &str) -> Result<BufReader<File>, PipelineError> {
        self.open_path(path, || format!("configured as paths.{key}"))
    }

    fn write(&self, name: &str, render: impl FnOnce(&mut Vec<u8>) -> io::Result<()>) -> Result<(), PipelineError> {
        let path = self.cfg.out(name);
        write_atomic_with(&path, render).map_err(|source| PipelineError::Io { path, source })
    }

    fn err(&self, e: impl fmt::Display) -> PipelineError {
        PipelineError::stage(self.stage, e)
    }

    fn network(&self) -> Result<Network, PipelineError> {
        let path = &self.cfg.paths.network;
        let mut text = String::new();
        io::Read::read_to_string(&mut self.input(path, "network")?, &mut text)
            .map_err(|source| PipelineError::Io { path: path.clone(), source })?;
        let cfg = NetworkConfig::from_toml_str(&text).map_err(|e| self.err(e))?;
        cfg.build().map_err(|e| self.err(e))
    }

    fn records(&self) -> Result<Vec<AfcRecord>, PipelineError> {
        let opts = ParseOptions { delimiter: b',', weekday_filter: false };
        let (recs, report) = afc::parse_afc(self.artifact(artifacts::RECORDS)?, None, &opts).map_err(|e| self.err(e))?;
        if report.rejected_count() > 0 {
            return Err(self.err(format!("{} corrupt row(s) in {}", report.rejected_count(), artifacts::RECORDS)));
        }
        Ok(recs)
    }

    fn trips(&self) -> Result<Vec<Trip>, PipelineError> {
        afc::read_trips(self.artifact(artifacts::TRIPS)?).map_err(|e| self.err(e))
    }

    fn events(&self) -> Result<Vec<DelayEvent>, PipelineError> {
        delay::read_jsonl(self.artifact(artifacts::EVENTS)?).map_err(|e| self.err(e))
    }

    fn patterns(&self) -> Result<Vec<TravelPattern>, PipelineError> {
        patterns::read_patterns(self.artifact(artifacts::PATTERNS)?).map_err(|e| self.err(e))
    }

    fn affected(&self) -> Result<Vec<AffectedInstance>, PipelineError> {
        delay::read_jsonl(self.artifact(artifacts::AFFECTED)?).map_err(|e| self.err(e))
    }

    fn dataset(&self, name: &str) -> Result<Vec<ChoiceRecord>, PipelineError> {
        choice::read_dataset(self.artifact(name)?).map_err(|e| self.err(e))
    }
}

fn csv_io(e: impl fmt::Display) -> io::Error {
    io::Error::other(e.to_string())
}

/// Problems that fail the run in strict mode and are logged otherwise.
fn strict_check(cfg: &PipelineConfig, stage: Stage, problems: Vec<String>) -> Result<(), PipelineError> {
    if problems.is_empty() {
        return Ok(());
    }
    if cfg.strict {
        return Err(PipelineError::Strict(format!("{stage}: {}", problems.join("; "))));
    }
    for p in problems {
        log::warn!("{stage}: {p}");
    }
    Ok(())
}

pub fn run_stage(stage: Stage, cfg: &PipelineConfig) -> Result<(), PipelineError> {
    log::info!("stage {stage} starting");
    let ctx = Ctx { cfg, stage };
    match stage {
        Stage::Synth => run_synth(&ctx),
        Stage::Ingest => run_ingest(&ctx),
        Stage::Delays => run_delays(&ctx),
        Stage::Mine => run_mine(&ctx),
        Stage::Affected => run_affected(&ctx),
        Stage::Label => run_label(&ctx),
        Stage::Featurize => run_featurize(&ctx),
        Stage::Predict => run_predict(&ctx),
        Stage::Eval => run_eval(&ctx),
    }
}

pub fn run_all(cfg: &PipelineConfig) -> Result<(), PipelineError> {
    for stage in Stage::CHAIN {
        run_stage(stage, cfg)?;
    }
    Ok(())
}

fn run_synth(ctx: &Ctx) -> Result<(), PipelineError> {
    let world_cfg = WorldConfig { seed: ctx.cfg.seed, ..ctx.cfg.synth.clone() };
    let world = synth::generate_world(&world_cfg).map_err(|e| ctx.err(e))?;
    let dir = &ctx.cfg.paths.synth_dir;
    world.write_to(dir).map_err(|e| ctx.err(e))?;
    log::info!(
        "synth: {} records, {} events, {} regulars, {} affected instances -> {}",
        world.records.len(),
        world.events.len(),
        world.truth.regulars.len(),
        world.truth.affected.len(),
        dir.display()
    );
    Ok(())
}

fn run_ingest(ctx: &Ctx) -> Result<(), PipelineError> {
    let cfg = ctx.cfg;
    let calendar = match &cfg.paths.calendar {
        Some(p) => {
            ctx.input(p, "calendar")?;
            Some(Calendar::load(p).map_err(|e| ctx.err(e))?)
        }
        None => None,
    };
    let opts = ParseOptions { delimiter: cfg.ingest.delimiter as u8, weekday_filter: cfg.ingest.weekday_filter };
    let (records, mut report) = afc::parse_afc(ctx.input(&cfg.paths.afc, "afc")?, calendar.as_ref(), &opts).map_err(|e| ctx.err(e))?;
    let net = ctx.network()?;
    let mut unknown: BTreeMap<&str, usize> = BTreeMap::new();
    for r in records.iter().filter(|r| r.txn_type.is_metro()) {
        if net.station_id(&r.location).is_none() {
            *unknown.entry(r.location.as_str()).or_default() += 1;
        }
    }
    let (trips, anomalies) =
        afc::reconstruct_trips(&records, ReconstructParams { max_trip_duration: cfg.ingest.max_trip_duration });
    report.anomalies = anomalies;
    ctx.write(artifacts::RECORDS, |b| afc::write_afc(&records, b).map_err(csv_io))?;
    ctx.write(artifacts::TRIPS, |b| afc::write_trips(&trips, b).map_err(csv_io))?;
    ctx.write(artifacts::INGEST_REPORT, |b| {
        serde_json::to_writer_pretty(&mut *b, &report).map_err(csv_io)?;
        b.push(b'\n');
        Ok(())
    })?;
    log::info!(
        "ingest: {} rows in, {} accepted, {} rejected {:?}; {} trips, anomalies {:?}",
        report.input_rows,
        report.accepted,
        report.rejected_count(),
        report.reject_counts(),
        trips.len(),
        report.anomaly_counts()
    );
    let mut problems = Vec::new();
    if report.rejected_count() > 0 {
        problems.push(format!("{} AFC row(s) rejected", report.rejected_count()));
    }
    if !unknown.is_empty() {
        problems.push(format!("{} metro station name(s) not in the network: {:?}", unknown.len(), unknown.keys().collect::<Vec<_>>()));
    }
    strict_check(cfg, ctx.stage, problems)
}

fn run_delays(ctx: &Ctx) -> Result<(), PipelineError> {
    let cfg = ctx.cfg;
    let net = ctx.network()?;
    let mut problems = Vec::new();
    let table_events = match &cfg.paths.delay_table {
        Some(p) => {
            let (events, rejects) = delay::parse_structured_delays(ctx.input(p, "delay_table")?, Some(&net)).map_err(|e| ctx.err(e))?;
            for r in &rejects {
                log::warn!("delay table: {r:?}");
            }
            if !rejects.is_empty() {
                problems.push(format!("{} delay table row(s) rejected", rejects.len()));
            }
            log::info!("delays: {} events from table, {} rejected", events.len(), rejects.len());
            Some(events)
        }
        None => None,
    };

    let mut extracted: Vec<ExtractionResult> = Vec::new();
    if let Some(p) = &cfg.paths.narratives {
        let mut text = String::new();
        io::Read::read_to_string(&mut ctx.input(p, "narratives")?, &mut text)
            .map_err(|source| PipelineError::Io { path: p.clone(), source })?;
        let http;
        let backend = match cfg.delays.extractor {
            ExtractorKind::Rule => ExtractBackend::Rule,
            ExtractorKind::Llm => {
                http = HttpBackend::from_env(cfg.predict.llm.clone()).map_err(|e| ctx.err(e))?;
                ExtractBackend::Llm { backend: &http, params: cfg.predict.decode.clone(), retry_budget: cfg.predict.retry_budget }
            }
        };
        for (i, n) in split_narratives(&text).iter().enumerate() {
            match extract_from_log(n, &net, &backend, i as u32 + 1) {
                Ok(r) => extracted.push(r),
                Err(e) => problems.push(format!("narrative {}: {e}", i + 1)),
            }
        }
        if let Some(table) = &table_events {
            let by_id: HashMap<u32, &DelayEvent> = table.iter().map(|e| (e.event_id, e)).collect();
            let exact = extracted.iter().filter(|r| by_id.get(&r.event.event_id) == Some(&&r.event)).count();
            log::info!("delays: {} narrative(s) extracted, {exact} match the table field-exactly", extracted.len());
        }
        ctx.write(artifacts::EXTRACTED, |b| delay::write_jsonl(&extracted, b))?;
    }

    let events = match (cfg.delays.source, table_events) {
        (EventSource::Table, Some(t)) => t,
        (EventSource::Table, None) => return Err(PipelineError::Config("delays.source = \"table\" needs paths.delay_table".into())),
        (EventSource::Narratives, _) if cfg.paths.narratives.is_none() => {
            return Err(PipelineError::Config("delays.source = \"narratives\" needs paths.narratives".into()))
        }
        (EventSource::Narratives, _) => extracted.iter().map(|r| r.event.clone()).collect(),
    };
    let mut ids: Vec<u32> = events.iter().map(|e| e.event_id).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != events.len() {
        return Err(ctx.err("duplicate event ids"));
    }
    ctx.write(artifacts::EVENTS, |b| delay::write_jsonl(&events, b))?;
    log::info!("delays: {} events written", events.len());
    strict_check(cfg, ctx.stage, problems)
}

fn run_mine(ctx: &Ctx) -> Result<(), PipelineError> {
    let cfg = ctx.cfg;
    let mut trips = ctx.trips()?;
    let n_in = trips.len();
    if cfg.mine.exclude_event_days {
        let days: std::collections::BTreeSet<_> = ctx.events()?.iter().map(|e| e.date).collect();
        trips.retain(|t| !days.contains(&t.date()));
    }
    let regulars = patterns::mine_regulars(&trips, cfg.mine.screen(), cfg.mine.cluster());
    let pats: Vec<TravelPattern> = regulars.iter().flat_map(|r| r.patterns.iter().cloned()).collect();
    ctx.write(artifacts::REGULARS, |b| {
        let mut w = csv::Writer::from_writer(b);
        w.write_record(["card_id", "travel_days", "patterns"]).map_err(csv_io)?;
        for r in &regulars {
            w.write_record([r.card_id.clone(), r.travel_day_count.to_string(), r.patterns.len().to_string()]).map_err(csv_io)?;
        }
        w.flush()
    })?;
    ctx.write(artifacts::PATTERNS, |b| patterns::write_patterns(&pats, b))?;
    log::info!("mine: {n_in} trips in, {} used, {} regulars, {} patterns", trips.len(), regulars.len(), pats.len());
    Ok(())
}

fn run_affected(ctx: &Ctx) -> Result<(), PipelineError> {
    let pats = ctx.patterns()?;
    let events = ctx.events()?;
    let net = ctx.network()?;
    let affected = impact::identify_affected(&pats, &events, &net, ctx.cfg.impact);
    ctx.write(artifacts::AFFECTED, |b| delay::write_jsonl(&affected, b))?;
    log::info!("affected: {} patterns x {} events -> {} instances", pats.len(), events.len(), affected.len());
    Ok(())
}

struct Joined {
    patterns: HashMap<String, TravelPattern>,
    events: HashMap<u32, DelayEvent>,
    records_by_card: HashMap<String, Vec<AfcRecord>>,
}

/// Patterns by key, events by id, and each card's event-day records.
fn join_inputs(ctx: &Ctx, affected: &[AffectedInstance]) -> Result<Joined, PipelineError> {
    let patterns: HashMap<String, TravelPattern> = ctx.patterns()?.into_iter().map(|p| (p.key(), p)).collect();
    let events: HashMap<u32, DelayEvent> = ctx.events()?.into_iter().map(|e| (e.event_id, e)).collect();
    let cards: std::collections::HashSet<&str> = affected.iter().map(|a| a.card_id.as_str()).collect();
    let days: std::collections::HashSet<_> = events.values().map(|e| e.date).collect();
    let mut records_by_card: HashMap<String, Vec<AfcRecord>> = HashMap::new();
    for r in ctx.records()? {
        if cards.contains(r.card_id.as_str()) && days.contains(&r.timestamp.date()) {
            records_by_card.entry(r.card_id.clone()).or_default().push(r);
        }
    }
    for a in affected {
        if !patterns.contains_key(&a.pattern_key) {
            return Err(ctx.err(format!("affected instance refers to unknown pattern {}", a.pattern_key)));
        }
        if !events.contains_key(&a.event_id) {
            return Err(ctx.err(format!("affected instance refers to unknown event {}", a.event_id)));
        }
    }
    Ok(Joined { patterns, events, records_by_card })
}

pub const LABELS_HEADER: [&str; 5] = ["card_id", "event_id", "label", "bus_corroborated", "conflict"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub card_id: String,
    pub event_id: u32,
    pub label: ChoiceLabel,
    pub bus_corroborated: bool,
    pub conflict: bool,
}

fn run_label(ctx: &Ctx) -> Result<(), PipelineError> {
    let affected = ctx.affected()?;
    let j = join_inputs(ctx, &affected)?;
    let days: std::collections::HashSet<_> = j.events.values().map(|e| e.date).collect();
    let mut trips_by_card: HashMap<String, Vec<Trip>> = HashMap::new();
    for t in ctx.trips()? {
        if j.records_by_card.contains_key(&t.card_id) && days.contains(&t.date()) {
            trips_by_card.entry(t.card_id.clone()).or_default().push(t);
        }
    }
    let rows: Vec<LabelRow> = affected
        .iter()
        .map(|a| {
            let trips = trips_by_card.get(&a.card_id).map_or(&[][..], Vec::as_slice);
            let recs = j.records_by_card.get(&a.card_id).map_or(&[][..], Vec::as_slice);
            let out = choice::label_choice(trips, recs, &j.patterns[&a.pattern_key], &j.events[&a.event_id], ctx.cfg.label);
            LabelRow { card_id: a.card_id.clone(), event_id: a.event_id, label: out.label, bus_corroborated: out.bus_corroborated, conflict: out.conflict }
        })
        .collect();
    ctx.write(artifacts::LABELS, |b| {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(b);
        w.write_record(LABELS_HEADER).map_err(csv_io)?;
        for r in &rows {
            w.serialize((&r.card_id, r.event_id, r.label.as_str(), r.bus_corroborated, r.conflict)).map_err(csv_io)?;
        }
        w.flush()
    })?;
    let abandon = rows.iter().filter(|r| r.label == ChoiceLabel::Abandon).count();
    let conflicts = rows.iter().filter(|r| r.conflict).count();
    log::info!("label: {} instances, {abandon} abandon, {} wait, {conflicts} conflict(s)", rows.len(), rows.len() - abandon);
    Ok(())
}

pub fn read_labels<R: io::Read>(source: R) -> Result<Vec<LabelRow>, csv::Error> {
    csv::Reader::from_reader(source).deserialize().collect()
}

fn run_featurize(ctx: &Ctx) -> Result<(), PipelineError> {
    let affected = ctx.affected()?;
    let j = join_inputs(ctx, &affected)?;
    let labels: HashMap<(String, u32), ChoiceLabel> = read_labels(ctx.artifact(artifacts::LABELS)?)
        .map_err(|e| ctx.err(e))?
        .into_iter()
        .map(|r| ((r.card_id, r.event_id), r.label))
        .collect();
    let mut missing = 0;
    let records: Vec<ChoiceRecord> = affected
        .iter()
        .map(|a| {
            let pattern = &j.patterns[&a.pattern_key];
            let event = &j.events[&a.event_id];
            let recs = j.records_by_card.get(&a.card_id).map_or(&[][..], Vec::as_slice);
            let started = impact::started_before_delay(recs, pattern, event);
            let mut r = choice::featurize(a, pattern, event, started, &ctx.cfg.features);
            r.label = labels.get(&r.key()).copied();
            missing += usize::from(r.label.is_none());
            r
        })
        .collect();
    ctx.write(artifacts::DATASET, |b| choice::write_dataset(&records, b).map_err(csv_io))?;
    log::info!("featurize: {} records, {missing} without a label", records.len());
    strict_check(ctx.cfg, ctx.stage, if missing > 0 { vec![format!("{missing} record(s) have no label")] } else { vec![] })
}

/// Train/test folds according to the configured split.
fn folds(cfg: &PipelineConfig, data: &[ChoiceRecord]) -> Vec<(Vec<ChoiceRecord>, Vec<ChoiceRecord>)> {
    match cfg.predict.split {
        SplitMode::Stratified => vec![eval::stratified_split(data, cfg.predict.train_fraction, cfg.seed)],
        SplitMode::LeaveOneEventOut => eval::leave_one_event_out(data).into_iter().map(|(_, tr, te)| (tr, te)).collect(),
    }
}

fn run_predict(ctx: &Ctx) -> Result<(), PipelineError> {
    let cfg = ctx.cfg;
    let p = &cfg.predict;
    let data: Vec<ChoiceRecord> = ctx.dataset(artifacts::DATASET)?.into_iter().filter(|r| r.label.is_some()).collect();
    let folds = folds(cfg, &data);
    let mut test: Vec<ChoiceRecord> = folds.iter().flat_map(|(_, te)| te.iter().cloned()).collect();
    test.sort_by(|a, b| (a.event_id, &a.card_id).cmp(&(b.event_id, &b.card_id)));
    let events: BTreeMap<u32, DelayEvent> = if p.models.iter().any(|m| m == "mock" || m == "llm") {
        ctx.events()?.into_iter().map(|e| (e.event_id, e)).collect()
    } else {
        BTreeMap::new()
    };
    let run = RunParams { retry_budget: p.retry_budget, decode: p.decode.clone() };
    let mut problems = Vec::new();
    for model in &p.models {
        let preds: Vec<Prediction> = match model.as_str() {
            "mock" | "llm" => {
                let backend: Box<dyn LlmBackend> = if model == "mock" {
                    Box::new(MockBackend::new(p.mock_p3_threshold))
                } else {
                    Box::new(HttpBackend::from_env(p.llm.clone()).map_err(|e| ctx.err(e))?)
                };
                let out = predict_llm(backend.as_ref(), &test, &events, &p.template, &run, p.batch_size, p.max_in_flight)
                    .map_err(|e| ctx.err(e))?;
                if !out.batch_errors.is_empty() {
                    problems.push(format!("{model}: {} batch(es) failed", out.batch_errors.len()));
                }
                let unresolved = out.predictions.iter().filter(|p| !p.is_resolved()).count();
                if unresolved > 0 {
                    problems.push(format!("{model}: {unresolved} unresolved prediction(s)"));
                }
                out.predictions
            }
            "rf" | "gbt" => {
                let params = if model == "rf" { EnsembleParams::RandomForest(p.forest) } else { EnsembleParams::GradientBoosted(p.gbt) };
                let mut all = Vec::new();
                for (train, te) in &folds {
                    if te.is_empty() {
                        continue;
                    }
                    let m = fit_tree_ensemble(train, &params, cfg.seed).map_err(|e| ctx.err(format!("{model}: {e}")))?;
                    if let Some(c) = m.degenerate {
                        log::warn!("{model}: single-class training fold, constant {c} model");
                    }
                    all.extend(predict_with_model(&m, te));
                }
                all
            }
            "majority" => folds.iter().flat_map(|(train, te)| MajorityClassifier::fit(train).predict(te)).collect(),
            other => return Err(PipelineError::Config(format!("unknown model {other:?}"))),
        };
        let mut preds = preds;
        preds.sort_by(|a, b| (a.event_id, &a.card_id).cmp(&(b.event_id, &b.card_id)));
        let path = cfg.prediction_path(model);
        write_atomic_with(&path, |b| delay::write_jsonl(&preds, b)).map_err(|source| PipelineError::Io { path, source })?;
        log::info!("predict: {model} -> {} prediction(s)", preds.len());
    }
    ctx.write(artifacts::TEST_SET, |b| choice::write_dataset(&test, b).map_err(csv_io))?;
    log::info!("predict: {} labelled records, {} in the test set", data.len(), test.len());
    strict_check(cfg, ctx.stage, problems)
}

fn run_eval(ctx: &Ctx) -> Result<(), PipelineError> {
    let cfg = ctx.cfg;
    let truth = ctx.dataset(artifacts::TEST_SET)?;
    let mut reports: Vec<MetricsReport> = Vec::new();
    for model in &cfg.predict.models {
        let path = cfg.prediction_path(model);
        let f = ctx.open_path(&path, || "produced by the `predict` stage; run `predict` first".into())?;
        let preds: Vec<Prediction> = delay::read_jsonl(f).map_err(|e| ctx.err(e))?;
        reports.push(compute_metrics(model, &preds, &truth).map_err(|e| ctx.err(format!("{model}: {e}")))?);
    }
    let cmp = compare_models(&reports);
    let table = cmp.render_table();
    ctx.write(artifacts::REPORT_TXT, |b| {
        b.extend_from_slice(table.as_bytes());
        Ok(())
    })?;
    let json = cmp.to_json();
    write_atomic(&cfg.out(artifacts::REPORT_JSON), format!("{json}\n").as_bytes())
        .map_err(|source| PipelineError::Io { path: cfg.out(artifacts::REPORT_JSON), source })?;
    eprint!("{table}");
    log::info!("eval: {} model(s) over {} test record(s)", reports.len(), truth.len());
    let problems = if cmp.any_inconsistent() { vec!["a report carries an inconsistency flag".to_string()] } else { vec![] };
    strict_check(cfg, ctx.stage, problems)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_file() {
        let (cfg, unknown) = PipelineConfig::parse("").unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        assert!(unknown.is_empty());
    }

    #[test]
    fn unknown_keys_are_reported() {
        let (_, unknown) = PipelineConfig::parse("seed = 1\nbogus = 2\n[mine]\neps = 3\n").unwrap();
        assert_eq!(unknown, vec!["bogus".to_string(), "mine.eps".to_string()]);
    }

    #[test]
    fn default_config_round_trips_through_toml() {
        let text = toml::to_string(&PipelineConfig::default()).unwrap();
        let (cfg, unknown) = PipelineConfig::parse(&text).unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        assert!(unknown.is_empty(), "{unknown:?}");
    }

    #[test]
    fn stage_names_round_trip() {
        for s in [Stage::Synth].into_iter().chain(Stage::CHAIN) {
            assert_eq!(s.as_str().parse::<Stage>().unwrap(), s);
        }
        assert!("bogus".parse::<Stage>().is_err());
    }

    #[test]
    fn missing_patterns_names_mine() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = PipelineConfig::default();
        cfg.resolve_paths(dir.path());
        let err = run_stage(Stage::Affected, &cfg).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("`mine`"), "{err}");
    }
}
