use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use decision_engine::channel::{
    schedule, transform_cycles, transform_order, Channel, ChannelModules, ChannelSpec,
    ChannelState, Clock, CycleOutcome, ModuleError, ModuleKind, ModuleSpec, Produced,
    PublishContext, Publisher, ReportLog, Source, Transform,
};
use decision_engine::config::PassthroughTransform;
use decision_engine::datablock::{DataBlock, DataBlockSnapshot, Payload, SimTime};
use decision_engine::decision_log::{RecordBuilder, RequestRecord};
use decision_engine::logic::{Fact, Rule};
use decision_engine::money::Money;
use proptest::prelude::*;

struct Feed {
    spot: f64,
    fail: bool,
}

impl Source for Feed {
    fn fetch(&mut self, _now: SimTime) -> Result<Vec<Produced>, ModuleError> {
        if self.fail {
            return Err(ModuleError::new("feed unreachable"));
        }
        Ok(vec![Produced::new(
            "prices",
            Payload::record([("spot", self.spot)]),
        )])
    }
}

/// Pass-through that fails on its `fail_on`-th call (0-based).
struct Flaky {
    inner: PassthroughTransform,
    calls: usize,
    fail_on: Option<usize>,
}

impl Transform for Flaky {
    fn transform(&mut self, inputs: &DataBlockSnapshot) -> Result<Vec<Produced>, ModuleError> {
        let n = self.calls;
        self.calls += 1;
        if Some(n) == self.fail_on {
            return Err(ModuleError::new("scripted failure"));
        }
        self.inner.transform(inputs)
    }
}

struct Counter(Arc<AtomicUsize>);

impl Publisher for Counter {
    fn publish(&mut self, ctx: &PublishContext<'_>) -> Result<Vec<RequestRecord>, ModuleError> {
        self.0.fetch_add(1, Ordering::SeqCst);
        Ok(vec![RequestRecord {
            cycle_id: ctx.cycle_id,
            entry_id: "e".into(),
            slots: 1,
            projected_cost: Money::ZERO,
            fom_value: 0.0,
            fired_rules: ctx.triggered_by.to_vec(),
        }])
    }
}

struct Setup {
    id: String,
    threshold: f64,
    feed_fails: bool,
    transform_fails_on: Option<usize>,
    source_period: Option<u64>,
}

impl Setup {
    fn new(id: &str) -> Self {
        Self {
            id: id.into(),
            threshold: 0.2,
            feed_fails: false,
            transform_fails_on: None,
            source_period: None,
        }
    }

    fn build(&self, published: &Arc<AtomicUsize>) -> Channel {
        let mut spec = ChannelSpec::new(&self.id, 60);
        let mut src = ModuleSpec::new("feed", ModuleKind::Source, "feed").produces(&["prices"]);
        if let Some(p) = self.source_period {
            src = src.period(p);
        }
        let copy = ModuleSpec::new("copy", ModuleKind::Transform, "passthrough")
            .consumes(&["prices"])
            .produces(&["prices_copy"]);
        let out =
            ModuleSpec::new("out", ModuleKind::Publisher, "counter").consumes(&["prices_copy"]);
        spec.sources.push(src);
        spec.transforms.push(copy.clone());
        spec.publishers.push(out);
        spec.facts
            .push(Fact::new("cheap", &format!("prices_copy.spot < {}", self.threshold)).unwrap());
        spec.rules
            .push(Rule::new("go", "cheap", vec!["out".into()], vec![]).unwrap());

        let mut modules = ChannelModules::default();
        modules.sources.insert(
            "feed".into(),
            Box::new(Feed {
                spot: 0.1,
                fail: self.feed_fails,
            }),
        );
        modules.transforms.insert(
            "copy".into(),
            Box::new(Flaky {
                inner: PassthroughTransform::new(&copy).unwrap(),
                calls: 0,
                fail_on: self.transform_fails_on,
            }),
        );
        modules
            .publishers
            .insert("out".into(), Box::new(Counter(published.clone())));
        Channel::new(spec, modules).unwrap()
    }
}

#[test]
fn minimal_channel_publishes_once_per_cycle() {
    let n = Arc::new(AtomicUsize::new(0));
    let mut ch = Setup::new("mini").build(&n);
    let db = DataBlock::new();
    let report = ch.run_cycle(&Clock::new(0), &db).unwrap();
    assert_eq!(n.load(Ordering::SeqCst), 1);
    assert_eq!(report.evaluation.fired_rules, ["go"]);
    assert_eq!(report.requests().count(), 1);
    assert_eq!(ch.status().state, ChannelState::Steady);
}

#[test]
fn false_condition_invokes_no_publisher() {
    let n = Arc::new(AtomicUsize::new(0));
    let mut setup = Setup::new("mini");
    setup.threshold = 0.05;
    let mut ch = setup.build(&n);
    let report = ch.run_cycle(&Clock::new(0), &DataBlock::new()).unwrap();
    assert_eq!(n.load(Ordering::SeqCst), 0);
    assert!(report.publishers.is_empty());
}

#[test]
fn cycles_run_on_the_channel_period() {
    let n = Arc::new(AtomicUsize::new(0));
    let mut channels = vec![Setup::new("a").build(&n)];
    let mut log = ReportLog::default();
    schedule(
        &mut channels,
        &mut Clock::new(0),
        &DataBlock::new(),
        3,
        &mut log,
    );
    let times: Vec<SimTime> = log.0.iter().map(|r| r.sim_time_s).collect();
    assert_eq!(times, [0, 60, 120]);
    assert_eq!(
        log.0.iter().map(|r| r.cycle_id).collect::<Vec<_>>(),
        [0, 1, 2]
    );
}

#[test]
fn slow_source_runs_only_when_due() {
    let n = Arc::new(AtomicUsize::new(0));
    let mut setup = Setup::new("a");
    setup.source_period = Some(120);
    let mut channels = vec![setup.build(&n)];
    let mut log = ReportLog::default();
    schedule(
        &mut channels,
        &mut Clock::new(0),
        &DataBlock::new(),
        3,
        &mut log,
    );
    let ran: Vec<bool> = log
        .0
        .iter()
        .map(|r| r.sources_run.contains(&"feed".to_string()))
        .collect();
    assert_eq!(ran, [true, false, true]);
    // the product from cycle 0 is still valid at cycle 1
    assert!(log.0.iter().all(|r| r.outcome == CycleOutcome::Completed));
}

#[test]
fn transform_failure_skips_only_that_cycle() {
    let k = 2;
    let n = Arc::new(AtomicUsize::new(0));
    let mut setup = Setup::new("a");
    setup.transform_fails_on = Some(k);
    let mut channels = vec![setup.build(&n)];
    let mut log = ReportLog::default();
    let db = DataBlock::new();
    schedule(&mut channels, &mut Clock::new(0), &db, 5, &mut log);
    let mut builder = RecordBuilder::new();
    let records: Vec<_> = log.0.iter().map(|r| builder.build(r, &db)).collect();
    assert_eq!(records.len(), 5);
    for r in &records {
        if r.cycle_id == k as u64 {
            assert!(r.requests.is_empty());
            assert!(r.fired_rules.is_empty());
            assert!(
                r.incidents.iter().any(|i| i.contains("scripted failure")),
                "{:?}",
                r.incidents
            );
        } else {
            assert_eq!(r.requests.len(), 1, "cycle {}", r.cycle_id);
            assert_eq!(r.requests[0].cycle_id, r.cycle_id);
        }
    }
    assert_eq!(n.load(Ordering::SeqCst), 4);
    assert_ne!(channels[0].status().state, ChannelState::Error);
}

#[test]
fn failing_channel_does_not_stop_the_other() {
    let (na, nb) = (Arc::new(AtomicUsize::new(0)), Arc::new(AtomicUsize::new(0)));
    let mut broken = Setup::new("b");
    broken.feed_fails = true;
    let mut channels = vec![broken.build(&nb), Setup::new("a").build(&na)];
    let mut log = ReportLog::default();
    schedule(
        &mut channels,
        &mut Clock::new(0),
        &DataBlock::new(),
        10,
        &mut log,
    );
    assert_eq!(channels[0].status().state, ChannelState::Error);
    assert_eq!(channels[1].status().state, ChannelState::Steady);
    let a_cycles = log.0.iter().filter(|r| r.channel_id == "a").count();
    assert_eq!(a_cycles, 10);
    assert_eq!(na.load(Ordering::SeqCst), 10);
    assert_eq!(nb.load(Ordering::SeqCst), 0);
}

// random transform graphs

fn chain_specs(n: usize, edges: &BTreeSet<(usize, usize)>) -> Vec<ModuleSpec> {
    (0..n)
        .map(|j| {
            let mut consumes: Vec<String> = edges
                .iter()
                .filter(|(_, b)| *b == j)
                .map(|(a, _)| format!("p{a}"))
                .collect();
            if consumes.is_empty() {
                consumes.push("raw".into());
            }
            let mut m = ModuleSpec::new(&format!("t{j}"), ModuleKind::Transform, "x");
            m.consumes = consumes;
            m.produces = vec![format!("p{j}")];
            m
        })
        .collect()
}

/// All simple paths from `from` to `to`, by exhaustive enumeration.
fn paths(n: usize, edges: &BTreeSet<(usize, usize)>, from: usize, to: usize) -> Vec<Vec<usize>> {
    fn walk(
        at: usize,
        to: usize,
        n: usize,
        edges: &BTreeSet<(usize, usize)>,
        path: &mut Vec<usize>,
        out: &mut Vec<Vec<usize>>,
    ) {
        if at == to && path.len() > 1 {
            out.push(path.clone());
            return;
        }
        for next in 0..n {
            if edges.contains(&(at, next)) && (next == to || !path.contains(&next)) {
                path.push(next);
                walk(next, to, n, edges, path, out);
                path.pop();
            }
        }
    }
    let mut out = Vec::new();
    walk(from, to, n, edges, &mut vec![from], &mut out);
    out
}

fn dag() -> impl Strategy<Value = (usize, BTreeSet<(usize, usize)>)> {
    (2usize..9).prop_flat_map(|n| {
        let pairs: Vec<(usize, usize)> = (0..n)
            .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
            .collect();
        let m = pairs.len();
        (
            Just(n),
            proptest::sample::subsequence(pairs, 0..=m).prop_map(|v| v.into_iter().collect()),
        )
    })
}

proptest! {
    #[test]
    fn injected_cycle_is_found_exactly((n, mut edges) in dag(), pick in any::<proptest::sample::Index>()) {
        // close a cycle: add a back edge j -> i over an existing path i ~> j,
        // or a self-loop when there is none
        let reachable: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| i < j)
            .filter(|&(i, j)| !paths(n, &edges, i, j).is_empty())
            .collect();
        let (i, j) = if reachable.is_empty() { (0, 0) } else { reachable[pick.index(reachable.len())] };
        edges.insert((j, i));
        // oracle: nodes on some cycle through the injected edge
        let cycles = paths(n, &edges, i, i);
        let expected: BTreeSet<String> = cycles.iter().flatten().map(|k| format!("t{k}")).collect();
        prop_assert!(!expected.is_empty());

        let found = transform_cycles(&chain_specs(n, &edges));
        prop_assert_eq!(found.len(), 1, "{:?}", found);
        let got: BTreeSet<String> = found[0].iter().cloned().collect();
        prop_assert_eq!(got, expected);
    }

    #[test]
    fn order_respects_every_edge((n, edges) in dag()) {
        let mut spec = ChannelSpec::new("g", 60);
        spec.transforms = chain_specs(n, &edges);
        prop_assert!(transform_cycles(&spec.transforms).is_empty());
        let order = transform_order(&spec).unwrap();
        let pos: BTreeMap<&str, usize> = order.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
        prop_assert_eq!(pos.len(), n);
        for (a, b) in &edges {
            let (ta, tb) = (format!("t{}", a), format!("t{}", b));
            prop_assert!(pos[ta.as_str()] < pos[tb.as_str()], "{} after {}", ta, tb);
        }
    }
}
