//! Lockstep scheduling of channels on a simulated clock.

use super::cycle::{Channel, Clock, CycleReport};
use crate::datablock::{DataBlock, SimTime};

/// Hooks invoked by [`schedule`]. Both default to no-ops.
pub trait CycleObserver {
    /// Called once per distinct tick, after the clock moves and before any
    /// channel runs. External systems advance here.
    fn before_tick(&mut self, _now: SimTime) {}

    fn on_cycle(&mut self, _channel: &Channel, _report: &CycleReport) {}
}

impl CycleObserver for () {}

/// Collects every report.
#[derive(Debug, Default)]
pub struct ReportLog(pub Vec<CycleReport>);

impl CycleObserver for ReportLog {
    fn on_cycle(&mut self, _channel: &Channel, report: &CycleReport) {
        self.0.push(report.clone());
    }
}

/// Runs `n_cycles` cycles of every channel. Channel `i` runs at
/// `start + k * period_i`; channels due at the same tick run in slice order.
/// A channel that leaves the runnable states stops being scheduled without
/// affecting the others.
pub fn schedule(
    channels: &mut [Channel],
    clock: &mut Clock,
    datablock: &DataBlock,
    n_cycles: u64,
    observer: &mut dyn CycleObserver,
) {
    let start = clock.now();
    let mut done = vec![0u64; channels.len()];
    loop {
        let next_tick = channels
            .iter()
            .zip(&done)
            .filter(|(ch, &d)| d < n_cycles && ch.is_runnable())
            .map(|(ch, &d)| start + d * ch.spec().channel_period_s)
            .min();
        let Some(now) = next_tick else { break };
        clock.advance_to(now);
        observer.before_tick(now);
        for (ch, d) in channels.iter_mut().zip(done.iter_mut()) {
            if *d >= n_cycles || !ch.is_runnable() || start + *d * ch.spec().channel_period_s != now
            {
                continue;
            }
            match ch.run_cycle(clock, datablock) {
                Ok(report) => observer.on_cycle(ch, &report),
                Err(e) => tracing::warn!(error = %e, "cycle skipped"),
            }
            *d += 1;
        }
    }
}
