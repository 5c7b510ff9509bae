//! Operator commands: validate a config directory, run channels against a
//! scenario, and inspect the decision log.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::channel::{
    schedule, Channel, ChannelState, ChannelStatus, Clock, CycleObserver, CycleReport,
};
use crate::config::{self, AssemblyErrors, ConfigDocument, ConfigError, ModuleRegistry};
use crate::datablock::{DataBlock, ProductDump, SimTime};
use crate::decision_log::{read_log, DecisionLogWriter, DecisionRecord, LogError, RecordBuilder};
use crate::sim::{Scenario, ScenarioError, SimHandle, SimWorld};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{}: {errors}", path.display())]
    Assembly {
        path: PathBuf,
        errors: AssemblyErrors,
    },
    #[error("channel id `{id}` is declared by both {} and {}", first.display(), second.display())]
    DuplicateChannel {
        id: String,
        first: PathBuf,
        second: PathBuf,
    },
    #[error("config directory {} has no channel files", .0.display())]
    NoChannels(PathBuf),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("decision log {}: {source}", path.display())]
    LogIo {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("no decision record for cycle {0}")]
    UnknownCycle(u64),
}

impl ServiceError {
    pub fn exit_code(&self) -> i32 {
        match self {
            ServiceError::Config(ConfigError::Io { .. })
            | ServiceError::Scenario(ScenarioError::Io { .. })
            | ServiceError::LogIo { .. }
            | ServiceError::Log(_) => EXIT_IO,
            _ => EXIT_VALIDATION,
        }
    }
}

/// Problems found in one channel file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FileReport {
    pub path: PathBuf,
    pub channel_id: Option<String>,
    pub problems: Vec<String>,
}

/// Loads and checks every channel file. With a scenario, modules are also
/// instantiated against a world built from it.
pub fn validate_dir(
    dir: &Path,
    scenario: Option<&Scenario>,
) -> Result<Vec<FileReport>, ServiceError> {
    let files = config::config_files(dir)?;
    if files.is_empty() {
        return Err(ServiceError::NoChannels(dir.to_path_buf()));
    }
    let registry = match scenario {
        Some(s) => ModuleRegistry::with_simulation(&SimHandle::new(SimWorld::new(s, 0))),
        None => ModuleRegistry::with_simulation(&SimHandle::new(SimWorld::new(
            &placeholder_scenario(),
            0,
        ))),
    };
    let mut seen: BTreeMap<String, PathBuf> = BTreeMap::new();
    let mut reports = Vec::new();
    for path in files {
        let mut report = FileReport {
            path: path.clone(),
            channel_id: None,
            problems: Vec::new(),
        };
        match ConfigDocument::load(&path) {
            Err(ConfigError::Io { source, .. }) => {
                return Err(ServiceError::Config(ConfigError::Io { path, source }));
            }
            Err(e) => report.problems.push(e.to_string()),
            Ok(doc) => {
                report.channel_id = Some(doc.channel.id.clone());
                if let Some(first) = seen.insert(doc.channel.id.clone(), path.clone()) {
                    report.problems.push(
                        ServiceError::DuplicateChannel {
                            id: doc.channel.id.clone(),
                            first,
                            second: path.clone(),
                        }
                        .to_string(),
                    );
                }
                let result = if scenario.is_some() {
                    config::assemble(&doc, &registry).map(|_| ())
                } else {
                    config::check(&doc, &registry).map(|_| ())
                };
                if let Err(errs) = result {
                    report
                        .problems
                        .extend(errs.0.iter().map(ToString::to_string));
                }
            }
        }
        reports.push(report);
    }
    Ok(reports)
}

/// A world with no facilities, used to resolve module kinds when no
/// scenario is given.
fn placeholder_scenario() -> Scenario {
    Scenario {
        policy: crate::sim::PolicySpec {
            budget: crate::money::Money::ZERO,
            per_entry_max_request: 1,
            expected_job_walltime_s: 1,
        },
        jobs: Vec::new(),
        job_batches: Vec::new(),
        providers: Vec::new(),
        outages: Vec::new(),
    }
}

/// Loads and assembles every channel in `dir`, in file-name order.
pub fn load_channels(dir: &Path, registry: &ModuleRegistry) -> Result<Vec<Channel>, ServiceError> {
    let files = config::config_files(dir)?;
    if files.is_empty() {
        return Err(ServiceError::NoChannels(dir.to_path_buf()));
    }
    let mut seen: BTreeMap<String, PathBuf> = BTreeMap::new();
    let mut channels = Vec::new();
    for path in files {
        let doc = ConfigDocument::load(&path)?;
        if let Some(first) = seen.insert(doc.channel.id.clone(), path.clone()) {
            return Err(ServiceError::DuplicateChannel {
                id: doc.channel.id,
                first,
                second: path,
            });
        }
        let ch = config::assemble(&doc, registry).map_err(|errors| ServiceError::Assembly {
            path: path.clone(),
            errors,
        })?;
        channels.push(ch);
    }
    Ok(channels)
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub config_dir: PathBuf,
    pub scenario: PathBuf,
    pub cycles: u64,
    pub seed: u64,
    pub log: Option<PathBuf>,
}

/// Everything a run leaves behind, for inspection by callers and tests.
pub struct EngineRun {
    pub datablock: DataBlock,
    pub world: SimHandle,
    pub statuses: Vec<ChannelStatus>,
    pub records: Vec<DecisionRecord>,
    pub reports: Vec<CycleReport>,
}

impl EngineRun {
    pub fn errored_channels(&self) -> Vec<&ChannelStatus> {
        self.statuses
            .iter()
            .filter(|s| s.state == ChannelState::Error)
            .collect()
    }
}

struct RunObserver<'a> {
    world: SimHandle,
    datablock: &'a DataBlock,
    builder: RecordBuilder,
    writer: Option<DecisionLogWriter>,
    write_error: Option<io::Error>,
    records: Vec<DecisionRecord>,
    reports: Vec<CycleReport>,
}

impl CycleObserver for RunObserver<'_> {
    fn before_tick(&mut self, now: SimTime) {
        self.world.lock().advance_to(now);
    }

    fn on_cycle(&mut self, _channel: &Channel, report: &CycleReport) {
        let record = self.builder.build(report, self.datablock);
        if let (Some(w), None) = (self.writer.as_mut(), self.write_error.as_ref()) {
            if let Err(e) = w.append(&record) {
                self.write_error = Some(e);
            }
        }
        self.records.push(record);
        self.reports.push(report.clone());
    }
}

/// Runs every configured channel for `cycles` cycles against the scenario,
/// starting at t=0. Channel errors are reported through `statuses`, not as
/// an `Err`.
pub fn run_engine_with(opts: &RunOptions, scenario: &Scenario) -> Result<EngineRun, ServiceError> {
    let world = SimHandle::new(SimWorld::new(scenario, opts.seed));
    let registry = ModuleRegistry::with_simulation(&world);
    let mut channels = load_channels(&opts.config_dir, &registry)?;
    let writer = match &opts.log {
        Some(path) => {
            Some(
                DecisionLogWriter::create(path).map_err(|source| ServiceError::LogIo {
                    path: path.clone(),
                    source,
                })?,
            )
        }
        None => None,
    };
    let datablock = DataBlock::new();
    let mut clock = Clock::new(0);
    let mut observer = RunObserver {
        world: world.clone(),
        datablock: &datablock,
        builder: RecordBuilder::new(),
        writer,
        write_error: None,
        records: Vec::new(),
        reports: Vec::new(),
    };
    schedule(
        &mut channels,
        &mut clock,
        &datablock,
        opts.cycles,
        &mut observer,
    );
    if let Some(source) = observer.write_error.take() {
        return Err(ServiceError::LogIo {
            path: opts.log.clone().unwrap_or_default(),
            source,
        });
    }
    let RunObserver {
        records, reports, ..
    } = observer;
    Ok(EngineRun {
        statuses: channels.iter().map(|c| c.status().clone()).collect(),
        datablock,
        world,
        records,
        reports,
    })
}

pub fn run_engine(opts: &RunOptions) -> Result<EngineRun, ServiceError> {
    let scenario = Scenario::load(&opts.scenario)?;
    run_engine_with(opts, &scenario)
}

fn report_error(err: &mut dyn Write, e: &ServiceError) -> i32 {
    let _ = writeln!(err, "error: {e}");
    e.exit_code()
}

/// `validate`: exit 0 iff every channel file is valid.
pub fn cmd_validate(
    dir: &Path,
    scenario: Option<&Path>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32 {
    let scenario = match scenario.map(Scenario::load).transpose() {
        Ok(s) => s,
        Err(e) => return report_error(err, &e.into()),
    };
    let reports = match validate_dir(dir, scenario.as_ref()) {
        Ok(r) => r,
        Err(e) => return report_error(err, &e),
    };
    let mut bad = 0;
    for r in &reports {
        for p in &r.problems {
            let _ = writeln!(out, "{}: {p}", r.path.display());
        }
        if !r.problems.is_empty() {
            bad += 1;
        }
    }
    if bad == 0 {
        EXIT_OK
    } else {
        let _ = writeln!(err, "{bad} of {} channel file(s) invalid", reports.len());
        EXIT_VALIDATION
    }
}

/// `run`: exit 0 unless a channel ended in error.
pub fn cmd_run(opts: &RunOptions, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let run = match run_engine(opts) {
        Ok(r) => r,
        Err(e) => return report_error(err, &e),
    };
    for s in &run.statuses {
        let _ = writeln!(
            out,
            "{}: {} after {} cycle(s){}",
            s.channel_id,
            s.state,
            s.cycle_id,
            s.last_error
                .as_deref()
                .map(|e| format!(" ({e})"))
                .unwrap_or_default()
        );
    }
    let errored = run.errored_channels();
    if errored.is_empty() {
        EXIT_OK
    } else {
        let names: Vec<&str> = errored.iter().map(|s| s.channel_id.as_str()).collect();
        let _ = writeln!(
            err,
            "error: channel(s) in error state: {}",
            names.join(", ")
        );
        EXIT_RUNTIME
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShowWhat {
    Products,
    Decisions,
    Status,
}

#[derive(Clone, Debug, Default)]
pub struct ShowFilters {
    pub cycle: Option<u64>,
    pub channel: Option<String>,
    pub product: Option<String>,
    pub json: bool,
}

/// Every logged product generation, keyed by (channel, name, generation).
fn logged_products(records: &[DecisionRecord]) -> BTreeMap<(String, String, u64), ProductDump> {
    let mut out = BTreeMap::new();
    for r in records {
        for c in &r.consumed {
            if let (Some(h), Some(p)) = (&c.header, &c.payload) {
                out.entry((r.channel_id.clone(), c.product.clone(), c.generation))
                    .or_insert_with(|| ProductDump {
                        channel: r.channel_id.clone(),
                        name: c.product.clone(),
                        generation: c.generation,
                        created_at: h.created_at,
                        expiration_at: h.expiration_at,
                        producer: h.producer.clone(),
                        payload: p.clone(),
                    });
            }
        }
    }
    out
}

/// Channel status as recovered from its latest record.
pub fn status_from_log(records: &[DecisionRecord]) -> Vec<ChannelStatus> {
    let mut latest: BTreeMap<&str, &DecisionRecord> = BTreeMap::new();
    let mut last_error: BTreeMap<&str, String> = BTreeMap::new();
    for r in records {
        latest.insert(&r.channel_id, r);
        if let Some(abort) = r
            .incidents
            .iter()
            .rev()
            .find(|i| i.starts_with("cycle aborted: "))
        {
            last_error.insert(
                &r.channel_id,
                abort.trim_start_matches("cycle aborted: ").to_string(),
            );
        }
    }
    latest
        .into_iter()
        .map(|(id, r)| ChannelStatus {
            channel_id: id.to_string(),
            state: r.channel_state,
            cycle_id: r.cycle_id + 1,
            last_error: last_error.get(id).cloned(),
        })
        .collect()
}

fn write_trace(out: &mut dyn Write, r: &DecisionRecord) -> io::Result<()> {
    writeln!(
        out,
        "channel {}  cycle {}  t={}s  state {}",
        r.channel_id, r.cycle_id, r.sim_time_s, r.channel_state
    )?;
    writeln!(out, "  consumed:")?;
    for c in &r.consumed {
        writeln!(
            out,
            "    {} gen {} digest {}",
            c.product, c.generation, c.digest
        )?;
    }
    writeln!(out, "  facts:")?;
    for (k, v) in &r.fact_values {
        writeln!(
            out,
            "    {k} = {}",
            serde_json::to_string(v)
                .unwrap_or_default()
                .trim_matches('"')
        )?;
    }
    writeln!(out, "  fired rules: {}", r.fired_rules.join(", "))?;
    writeln!(out, "  requests:")?;
    for q in &r.requests {
        writeln!(
            out,
            "    {} slots {} cost {} fom {} via {}",
            q.entry_id,
            q.slots,
            q.projected_cost,
            q.fom_value,
            q.fired_rules.join(", ")
        )?;
    }
    writeln!(
        out,
        "  publish: {}  cumulative spend: {}",
        r.publish_status, r.cumulative_spend
    )?;
    for i in &r.incidents {
        writeln!(out, "  incident: {i}")?;
    }
    Ok(())
}

fn show_records(
    records: &[DecisionRecord],
    what: ShowWhat,
    f: &ShowFilters,
    out: &mut dyn Write,
) -> Result<(), ServiceError> {
    let io_err = |source| ServiceError::LogIo {
        path: PathBuf::from("<stdout>"),
        source,
    };
    let selected: Vec<&DecisionRecord> = records
        .iter()
        .filter(|r| f.channel.as_deref().is_none_or(|c| c == r.channel_id))
        .filter(|r| f.cycle.is_none_or(|k| k == r.cycle_id))
        .collect();
    if let Some(k) = f.cycle {
        if selected.is_empty() && what != ShowWhat::Status {
            return Err(ServiceError::UnknownCycle(k));
        }
    }
    match what {
        ShowWhat::Decisions => {
            for r in &selected {
                if f.json {
                    out.write_all(r.to_line().as_bytes()).map_err(io_err)?;
                } else if f.cycle.is_some() {
                    write_trace(out, r).map_err(io_err)?;
                } else {
                    writeln!(
                        out,
                        "{} cycle {} t={}s {} fired=[{}] requests={} publish={} spend={}",
                        r.channel_id,
                        r.cycle_id,
                        r.sim_time_s,
                        r.channel_state,
                        r.fired_rules.join(","),
                        r.requests.len(),
                        r.publish_status,
                        r.cumulative_spend
                    )
                    .map_err(io_err)?;
                }
            }
        }
        ShowWhat::Products => {
            let all = logged_products(records);
            let wanted: BTreeSet<(String, String, u64)> = if f.cycle.is_some() {
                selected
                    .iter()
                    .flat_map(|r| {
                        r.consumed
                            .iter()
                            .map(|c| (r.channel_id.clone(), c.product.clone(), c.generation))
                    })
                    .collect()
            } else {
                all.keys()
                    .filter(|(ch, _, _)| f.channel.as_deref().is_none_or(|c| c == ch))
                    .cloned()
                    .collect()
            };
            for key in wanted {
                if f.product.as_deref().is_some_and(|p| p != key.1) {
                    continue;
                }
                if let Some(dump) = all.get(&key) {
                    let line = serde_json::to_string(dump).expect("dump serializes");
                    writeln!(out, "{line}").map_err(io_err)?;
                }
            }
        }
        ShowWhat::Status => {
            for s in status_from_log(records)
                .into_iter()
                .filter(|s| f.channel.as_deref().is_none_or(|c| c == s.channel_id))
            {
                let line = serde_json::to_string(&s).expect("status serializes");
                writeln!(out, "{line}").map_err(io_err)?;
            }
        }
    }
    Ok(())
}

/// `show`: renders what the log holds. A corrupt line is reported after
/// everything before it has been shown.
pub fn cmd_show(
    log: &Path,
    what: ShowWhat,
    filters: &ShowFilters,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32 {
    let contents = match read_log(log) {
        Ok(c) => c,
        Err(LogError::Io(source)) => {
            return report_error(
                err,
                &ServiceError::LogIo {
                    path: log.to_path_buf(),
                    source,
                },
            )
        }
        Err(e) => return report_error(err, &e.into()),
    };
    let shown = show_records(&contents.records, what, filters, out);
    if let Some((line, message)) = contents.corrupt {
        return report_error(
            err,
            &ServiceError::Log(LogError::CorruptRecord { line, message }),
        );
    }
    match shown {
        Ok(()) => EXIT_OK,
        Err(ServiceError::LogIo { source, .. }) if source.kind() == io::ErrorKind::BrokenPipe => {
            EXIT_OK
        }
        Err(e) => report_error(err, &e),
    }
}
