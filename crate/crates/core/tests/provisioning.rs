mod common;

use std::collections::BTreeSet;

use decision_engine::channel::{ModuleKind, ModuleSpec, Source};
use decision_engine::decision_log::RequestRecord;
use decision_engine::money::Money;
use decision_engine::provisioning::{
    generate_requests, match_eligibility, publish_requests, rank_by_fom, EntryState, Job, JobState,
    PolicyParams, ProviderKind, ResourceEntry,
};
use decision_engine::service::{run_engine_with, RunOptions};
use decision_engine::sim::{JobQueueSource, Outage, Scenario, SimHandle, SimWorld};
use proptest::prelude::*;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_jobs(rng: &mut impl Rng, n: usize, providers: &[String]) -> Vec<Job> {
    (0..n)
        .map(|i| Job {
            job_id: format!("j{i:03}"),
            cores: rng.random_range(1..=8),
            memory_mb: rng.random_range(500..=6000),
            max_walltime_s: 600,
            site_whitelist: rng.random_bool(0.3).then(|| {
                let k = rng.random_range(1..=providers.len());
                providers.choose_multiple(rng, k).cloned().collect()
            }),
            state: *[
                JobState::Idle,
                JobState::Idle,
                JobState::Idle,
                JobState::Running,
                JobState::Done,
            ]
            .choose(rng)
            .unwrap(),
        })
        .collect()
}

fn with_random_states(rng: &mut impl Rng, mut entries: Vec<ResourceEntry>) -> Vec<ResourceEntry> {
    for e in &mut entries {
        if rng.random_bool(0.15) {
            e.state = EntryState::Down;
        }
        if e.provider_kind == ProviderKind::Hpc {
            e.allocation_core_hours_remaining = Some(rng.random_range(0.0..10.0));
        }
    }
    entries
}

fn eligible(job: &Job, e: &ResourceEntry) -> bool {
    job.state == JobState::Idle
        && e.state == EntryState::Up
        && job.cores <= e.slot_cores
        && job.memory_mb <= e.slot_memory_mb
        && job
            .site_whitelist
            .as_ref()
            .is_none_or(|w| w.contains(&e.provider))
}

#[test]
fn eligibility_matches_pairwise_predicate() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xE11);
    for _ in 0..20 {
        let entries = {
            let raw = common::random_entries(&mut rng, 5);
            with_random_states(&mut rng, raw)
        };
        let providers: Vec<String> = entries.iter().map(|e| e.provider.clone()).collect();
        let jobs = random_jobs(&mut rng, 100, &providers);
        let got = match_eligibility(&jobs, &entries);
        let mut pairs = 0;
        for e in &entries {
            for j in &jobs {
                let listed = got.get(&e.entry_id).is_some_and(|v| v.contains(&j.job_id));
                assert_eq!(listed, eligible(j, e), "{} on {}", j.job_id, e.entry_id);
                pairs += usize::from(listed);
            }
        }
        assert_eq!(pairs, got.values().map(Vec::len).sum::<usize>());
    }
}

/// Slot-at-a-time greedy fill, written from the allocation rules directly.
fn greedy_oracle(
    entries: &[ResourceEntry],
    jobs: &[Job],
    policy: &PolicyParams,
) -> Vec<(String, u64, i64)> {
    let walltime = policy.expected_job_walltime_s;
    let cost = |e: &ResourceEntry, n: u64| -> i64 {
        (n as f64 * e.slot_cores as f64 * e.price_per_core_hour * walltime as f64 / 3600.0
            * 1_000_000.0)
            .round() as i64
    };
    let demand: BTreeSet<&str> = jobs
        .iter()
        .filter(|j| entries.iter().any(|e| eligible(j, e)))
        .map(|j| j.job_id.as_str())
        .collect();
    let mut served: BTreeSet<&str> = BTreeSet::new();
    let mut budget = policy.budget_remaining.micros();
    let mut out = Vec::new();
    for (id, _) in common::rank_oracle(entries) {
        if demand.len() == served.len() || budget == 0 {
            break;
        }
        let e = entries.iter().find(|e| e.entry_id == id).unwrap();
        let waiting: Vec<&str> = jobs
            .iter()
            .filter(|j| eligible(j, e) && !served.contains(j.job_id.as_str()))
            .map(|j| j.job_id.as_str())
            .collect();
        let free = e.max_slots - (e.occupancy * e.max_slots as f64).round() as u64;
        let alloc_core_s = e
            .allocation_core_hours_remaining
            .map(|h| (h * 3600.0).round() as u64);
        let mut n = 0u64;
        loop {
            let m = n + 1;
            let ok = m as usize <= waiting.len()
                && m <= policy.per_entry_max_request
                && m <= free
                && (e.provider_kind != ProviderKind::Hpc
                    || alloc_core_s.is_none_or(|a| m * e.slot_cores * walltime <= a))
                && cost(e, m) <= budget;
            if !ok {
                break;
            }
            n = m;
        }
        if n == 0 {
            continue;
        }
        served.extend(waiting.iter().take(n as usize));
        budget -= cost(e, n);
        out.push((id, n, cost(e, n)));
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn greedy_fill_matches_oracle_and_respects_budget(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = { let raw = common::random_entries(&mut rng, 10); with_random_states(&mut rng, raw) };
        let providers: Vec<String> = entries.iter().map(|e| e.provider.clone()).collect();
        let n_jobs = rng.random_range(0..=50);
        let jobs = random_jobs(&mut rng, n_jobs, &providers);
        let policy = PolicyParams {
            budget_remaining: Money::from_f64(rng.random_range(0.0..5.0)),
            per_entry_max_request: rng.random_range(1..=20),
            expected_job_walltime_s: rng.random_range(60..=7200),
        };
        let elig = match_eligibility(&jobs, &entries);
        let got = generate_requests(&rank_by_fom(&entries), &elig, &jobs, &entries, &policy);
        let want = greedy_oracle(&entries, &jobs, &policy);
        let got_t: Vec<(String, u64, i64)> = got.iter().map(|r| (r.entry_id.clone(), r.slots, r.projected_cost.micros())).collect();
        prop_assert_eq!(&got_t, &want);
        let total: Money = got.iter().map(|r| r.projected_cost).sum();
        prop_assert!(total <= policy.budget_remaining);
    }

    #[test]
    fn ranking_matches_sort_oracle(seed in any::<u64>()) {
        let entries = common::random_entries(&mut ChaCha8Rng::seed_from_u64(seed), 20);
        let got: Vec<(String, f64)> = rank_by_fom(&entries).into_iter().map(|f| (f.entry_id, f.value)).collect();
        prop_assert_eq!(got, common::rank_oracle(&entries));
    }
}

#[test]
fn budget_sweep_never_overspends() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xB5);
    let entries = {
        let raw = common::random_entries(&mut rng, 10);
        with_random_states(&mut rng, raw)
    };
    let providers: Vec<String> = entries.iter().map(|e| e.provider.clone()).collect();
    let jobs = random_jobs(&mut rng, 50, &providers);
    let elig = match_eligibility(&jobs, &entries);
    let ranked = rank_by_fom(&entries);
    let mut last_slots = 0;
    for micros in (0..=2_000_000).step_by(12_345) {
        let policy = PolicyParams {
            budget_remaining: Money::from_micros(micros),
            per_entry_max_request: 50,
            expected_job_walltime_s: 3600,
        };
        let reqs = generate_requests(&ranked, &elig, &jobs, &entries, &policy);
        let total: Money = reqs.iter().map(|r| r.projected_cost).sum();
        assert!(total.micros() <= micros, "{total} over {micros}");
        if micros == 0 {
            assert!(reqs.is_empty());
        }
        let slots: u64 = reqs.iter().map(|r| r.slots).sum();
        last_slots = last_slots.max(slots);
    }
    assert!(last_slots > 0);
}

fn small_scenario(extra: &str) -> Scenario {
    Scenario::parse(&format!(
        r#"
[policy]
budget = 10.0
per_entry_max_request = 32
expected_job_walltime_s = 600

[[job_batches]]
prefix = "job"
count = 20
cores = 1
memory_mb = 1000
max_walltime_s = 600

[[providers]]
name = "cloud"
kind = "cloud"
slot_cores = 1
slot_memory_mb = 2000
performance_score = 10.0
max_slots = 16
price = {{ base_price = 0.1 }}
{extra}
"#
    ))
    .unwrap()
}

fn request(cycle_id: u64, slots: u64, cost: f64) -> RequestRecord {
    RequestRecord {
        cycle_id,
        entry_id: "cloud".into(),
        slots,
        projected_cost: Money::from_f64(cost),
        fom_value: 0.01,
        fired_rules: vec!["provision".into()],
    }
}

#[test]
fn double_publish_is_a_no_op_at_the_sink() {
    let world = SimHandle::new(SimWorld::new(&small_scenario(""), 0));
    let mut sink = world.sink("prov");
    let batch = vec![request(4, 3, 0.03), request(4, 2, 0.02)];
    let first = publish_requests(&batch[..1], &mut sink).unwrap();
    assert_eq!(first.acks.len(), 1);
    assert!(!first.acks[0].duplicate);
    let (ledger, spent) = {
        let w = world.lock();
        (w.ledger().to_vec(), w.spent())
    };
    // same cycle and entry again, even with different contents
    let again = publish_requests(&batch, &mut sink).unwrap();
    assert!(again.acks.iter().all(|a| a.duplicate));
    let w = world.lock();
    assert_eq!(w.ledger(), &ledger[..]);
    assert_eq!(w.spent(), spent);
    assert_eq!(w.job_counts().running, 3);
}

#[test]
fn fulfilled_slots_run_to_completion() {
    let world = SimHandle::new(SimWorld::new(&small_scenario(""), 0));
    let mut sink = world.sink("prov");
    world.lock().advance_to(60);
    publish_requests(&[request(1, 10, 0.1)], &mut sink).unwrap();
    let mut w = world.lock();
    assert_eq!(w.job_counts().running, 10);
    assert_eq!(w.fulfilled_slots("cloud"), Some(10));
    w.advance_to(659);
    assert_eq!(w.job_counts().done, 0);
    w.advance_to(660);
    let c = w.job_counts();
    assert_eq!((c.idle, c.running, c.done), (10, 0, 10));
    assert_eq!(w.fulfilled_slots("cloud"), Some(0));
}

#[test]
fn scripted_outage_fails_one_fetch() {
    let s = small_scenario("");
    let mut s = s;
    s.outages.push(Outage {
        target: "job_queue".into(),
        from_s: 60,
        until_s: Some(61),
        max_failures: None,
    });
    let world = SimHandle::new(SimWorld::new(&s, 0));
    let spec =
        ModuleSpec::new("job_queue", ModuleKind::Source, "sim_job_queue").produces(&["jobs"]);
    let mut src = JobQueueSource::new(&spec, world.clone()).unwrap();
    assert!(src.fetch(0).is_ok());
    world.lock().advance_to(60);
    assert!(src.fetch(60).is_err());
    world.lock().advance_to(120);
    let out = src.fetch(120).unwrap();
    assert_eq!(out[0].payload.as_table().unwrap().len(), 20);
}

#[test]
fn end_to_end_ledger_reconciles_with_log() {
    let tmp = tempfile::tempdir().unwrap();
    let log = tmp.path().join("d.jsonl");
    let opts = RunOptions {
        config_dir: common::reference_config_dir(),
        scenario: common::reference_scenario_path(),
        cycles: 30,
        seed: 3,
        log: Some(log.clone()),
    };
    let run = run_engine_with(&opts, &common::reference_scenario()).unwrap();
    let records = decision_engine::decision_log::read_log(&log)
        .unwrap()
        .into_result()
        .unwrap();
    let logged: Money = records
        .iter()
        .flat_map(|r| &r.requests)
        .map(|q| q.projected_cost)
        .sum();
    let w = run.world.lock();
    assert!(!w.ledger().is_empty());
    assert_eq!(w.ledger_spend(), logged);
    assert_eq!(records.last().unwrap().cumulative_spend, logged);
    let ledger_requests: Vec<&RequestRecord> = w.ledger().iter().map(|l| &l.request).collect();
    let log_requests: Vec<&RequestRecord> = records.iter().flat_map(|r| &r.requests).collect();
    assert_eq!(ledger_requests, log_requests);
}
