//! Multi-stage threaded execution engine.
//!
//! A pipeline is a chain of stages, each with a worker pool and a bounded
//! input queue; full queues exert backpressure all the way to the source.
//! Handlers run inside a panic guard, so one bad item costs that item, not
//! a worker thread. The engine reports per-stage counts and busy fractions
//! plus whole-run throughput, and can optionally rebalance worker counts
//! between stages at a fixed epoch using observed load.
//!
//! Stages may also carry a fixed simulated service time, which turns the
//! engine into a load generator whose throughput can be checked against the
//! independent queueing simulation in [`crate::qsim`].

use crossbeam_channel::{bounded, Receiver, RecvTimeoutError, Sender};
use serde::{Deserialize, Serialize};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};
use thiserror::Error;

/// Errors from building or running a pipeline.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline spec: {0}")]
    InvalidSpec(String),
    #[error("pipeline did not drain within {waited:?} after the source finished")]
    ShutdownTimeout { waited: Duration },
    #[error("pipeline internal failure: {0}")]
    Internal(String),
    #[error("profile io: {0}")]
    ProfileIo(String),
}

/// Per-item work function: sequence number and payload in, payload out.
/// Returning `Err` fails the item; panicking fails the item and is recorded.
pub type Handler<T> = Arc<dyn Fn(u64, T) -> Result<T, String> + Send + Sync>;

/// A pass-through handler for load-generation runs.
pub fn passthrough<T>() -> Handler<T> {
    Arc::new(|_, item| Ok(item))
}

/// One stage of the pipeline.
#[derive(Clone)]
pub struct StageSpec<T> {
    pub name: String,
    /// Initial worker-pool size.
    pub workers: usize,
    /// Bounded input-queue capacity.
    pub queue_capacity: usize,
    /// Fixed extra service time per item (busy-wait under a millisecond,
    /// sleep above), applied before the handler.
    pub simulated_latency: Option<Duration>,
    pub handler: Handler<T>,
}

impl<T> StageSpec<T> {
    pub fn new(name: &str, workers: usize, queue_capacity: usize, handler: Handler<T>) -> Self {
        Self {
            name: name.to_string(),
            workers,
            queue_capacity,
            simulated_latency: None,
            handler,
        }
    }

    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.simulated_latency = Some(latency);
        self
    }
}

/// How much work to push through the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Workload {
    /// Exactly this many items (or fewer if the source runs dry).
    Items(u64),
    /// Keep feeding until this much wall time has passed, then drain.
    Timed(Duration),
}

/// Periodic worker rebalancing across stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReallocPolicy {
    /// Total workers shared by all stages; every stage always keeps one.
    pub budget: usize,
    /// How often targets are recomputed from observed load.
    pub epoch: Duration,
}

/// Engine run options.
#[derive(Debug, Clone)]
pub struct RunOptions {
    /// How long to wait for in-flight items to drain after the source
    /// finishes before giving up.
    pub shutdown_timeout: Duration,
    pub realloc: Option<ReallocPolicy>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            shutdown_timeout: Duration::from_secs(30),
            realloc: None,
        }
    }
}

/// A handler panic, attributed to its stage and item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PanicRecord {
    pub stage: String,
    pub seq: u64,
    pub message: String,
}

/// Per-stage counters after a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub name: String,
    /// Worker count the stage started with.
    pub workers: usize,
    /// Worker target when the run ended (differs only under reallocation).
    pub final_workers: usize,
    pub received: u64,
    pub emitted: u64,
    pub errors: u64,
    pub panics: u64,
    /// Handler time (plus simulated latency) summed over workers, divided
    /// by initial workers times wall time.
    pub busy_fraction: f64,
    /// Mean handler time per received item.
    pub mean_latency: Duration,
}

/// Whole-run outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub items_in: u64,
    pub items_out: u64,
    /// Items lost to handler errors or panics.
    pub failed: u64,
    pub wall: Duration,
    /// Items out per second of wall time.
    pub fps: f64,
    pub stages: Vec<StageReport>,
    /// Every caught panic, ordered by stage then sequence number.
    pub panics: Vec<PanicRecord>,
}

impl ThroughputReport {
    /// Checks that no item was silently lost: every stage accounts for all
    /// its input, neighbors agree, and the ends add up.
    pub fn is_conserved(&self) -> bool {
        if self.stages.is_empty() {
            return self.items_in == self.items_out && self.failed == 0;
        }
        for s in &self.stages {
            if s.received != s.emitted + s.errors + s.panics {
                return false;
            }
        }
        for pair in self.stages.windows(2) {
            if pair[0].emitted != pair[1].received {
                return false;
            }
        }
        let total_failed: u64 = self.stages.iter().map(|s| s.errors + s.panics).sum();
        self.stages[0].received == self.items_in
            && self.stages.last().expect("nonempty").emitted == self.items_out
            && total_failed == self.failed
            && self.items_in == self.items_out + self.failed
    }

    pub fn to_json(&self) -> Result<String, PipelineError> {
        serde_json::to_string_pretty(self).map_err(|e| PipelineError::Internal(e.to_string()))
    }

    /// One CSV row per stage.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "stage,workers,final_workers,received,emitted,errors,panics,busy_fraction,mean_latency_ms\n",
        );
        for s in &self.stages {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{:.6},{:.3}\n",
                s.name,
                s.workers,
                s.final_workers,
                s.received,
                s.emitted,
                s.errors,
                s.panics,
                s.busy_fraction,
                s.mean_latency.as_secs_f64() * 1e3,
            ));
        }
        out
    }
}

/// Collected items (sorted by sequence number) plus the run report.
pub struct PipelineOutput<T> {
    pub items: Vec<(u64, T)>,
    pub report: ThroughputReport,
}

// ---------------------------------------------------------------------------
// Worker rebalancing
// ---------------------------------------------------------------------------

/// Observed per-stage load: busy fraction times mean service time. A
/// stage's load is proportional to the worker-seconds per second it needs
/// at the current throughput.
pub fn stage_loads(busy_fractions: &[f64], mean_latencies: &[Duration]) -> Vec<f64> {
    busy_fractions
        .iter()
        .zip(mean_latencies)
        .map(|(b, l)| b * l.as_secs_f64())
        .collect()
}

/// Splits `budget` workers across stages proportionally to `loads`, giving
/// every stage at least one worker. Integer shares use largest-remainder
/// rounding (ties to the lower stage index); if the minimums overshoot, the
/// excess is recovered from the largest allocations. The result always sums
/// to exactly `budget`, and a pipeline already in proportion keeps its
/// allocation (the rule is a fixed point of its own observations).
pub fn reallocate_workers(loads: &[f64], budget: usize) -> Result<Vec<usize>, PipelineError> {
    let n = loads.len();
    if n == 0 {
        return Err(PipelineError::InvalidSpec("no stages to allocate".into()));
    }
    if budget < n {
        return Err(PipelineError::InvalidSpec(format!(
            "budget {budget} cannot cover {n} stages at one worker each"
        )));
    }
    if loads.iter().any(|l| !l.is_finite() || *l < 0.0) {
        return Err(PipelineError::InvalidSpec(
            "loads must be finite and non-negative".into(),
        ));
    }
    let total: f64 = loads.iter().sum();
    let quotas: Vec<f64> = if total > 0.0 {
        loads.iter().map(|l| budget as f64 * l / total).collect()
    } else {
        vec![budget as f64 / n as f64; n]
    };

    let mut alloc: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = alloc.iter().sum();
    let mut leftover = budget.saturating_sub(assigned);
    // Largest fractional parts first; ties go to the earlier stage.
    let mut by_frac: Vec<usize> = (0..n).collect();
    by_frac.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).expect("finite").then(a.cmp(&b))
    });
    for &i in &by_frac {
        if leftover == 0 {
            break;
        }
        alloc[i] += 1;
        leftover -= 1;
    }

    // Guarantee the minimum, then pay for it from the largest allocations.
    for a in alloc.iter_mut() {
        if *a == 0 {
            *a = 1;
        }
    }
    while alloc.iter().sum::<usize>() > budget {
        let victim = (0..n)
            .filter(|&i| alloc[i] > 1)
            .max_by(|&a, &b| alloc[a].cmp(&alloc[b]).then(b.cmp(&a)))
            .expect("budget >= stage count keeps this feasible");
        alloc[victim] -= 1;
    }
    Ok(alloc)
}

// ---------------------------------------------------------------------------
// Load-generation profiles
// ---------------------------------------------------------------------------

/// One stage of a load-generation profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileStage {
    pub name: String,
    pub workers: usize,
    pub queue_capacity: usize,
    pub latency_ms: f64,
}

/// A named set of stage timings, loadable from JSON, runnable both on the
/// threaded engine (pass-through handlers plus simulated latency) and on
/// the queueing simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineProfile {
    pub stages: Vec<ProfileStage>,
}

impl PipelineProfile {
    pub fn from_json_str(s: &str) -> Result<Self, PipelineError> {
        let profile: Self =
            serde_json::from_str(s).map_err(|e| PipelineError::ProfileIo(e.to_string()))?;
        profile.validate()?;
        Ok(profile)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| PipelineError::ProfileIo(e.to_string()))?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.stages.is_empty() {
            return Err(PipelineError::InvalidSpec("profile has no stages".into()));
        }
        for s in &self.stages {
            if s.workers == 0 || s.queue_capacity == 0 {
                return Err(PipelineError::InvalidSpec(format!(
                    "profile stage {:?} needs workers and queue capacity",
                    s.name
                )));
            }
            if !(s.latency_ms >= 0.0) {
                return Err(PipelineError::InvalidSpec(format!(
                    "profile stage {:?} has invalid latency",
                    s.name
                )));
            }
        }
        Ok(())
    }

    /// Stage specs with pass-through handlers and the profiled latencies.
    pub fn to_stage_specs(&self) -> Vec<StageSpec<()>> {
        self.stages
            .iter()
            .map(|s| {
                StageSpec::new(&s.name, s.workers, s.queue_capacity, passthrough())
                    .with_latency(Duration::from_secs_f64(s.latency_ms / 1e3))
            })
            .collect()
    }

    /// The same stages for the queueing simulator.
    pub fn to_sim_stages(&self) -> Vec<crate::qsim::SimStage> {
        self.stages
            .iter()
            .map(|s| {
                crate::qsim::SimStage::new(
                    &s.name,
                    s.workers,
                    s.queue_capacity,
                    Duration::from_secs_f64(s.latency_ms / 1e3),
                )
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

/// Busy-waits for sub-millisecond latencies (sleep is too coarse there),
/// sleeps for longer ones.
fn simulate_latency(d: Duration) {
    if d.is_zero() {
        return;
    }
    if d < Duration::from_millis(1) {
        let start = Instant::now();
        while start.elapsed() < d {
            std::hint::spin_loop();
        }
    } else {
        thread::sleep(d);
    }
}

#[derive(Default)]
struct StageStats {
    received: AtomicU64,
    emitted: AtomicU64,
    errors: AtomicU64,
    panics: AtomicU64,
    busy_ns: AtomicU64,
}

fn panic_message(payload: &(dyn std::any::Any + Send)) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "opaque panic payload".to_string()
    }
}

/// How often a worker re-checks its activation target while idle.
const WORKER_POLL: Duration = Duration::from_millis(2);

struct WorkerContext<T> {
    stage_name: String,
    worker_index: usize,
    /// Workers with an index at or above the live target stand down.
    dynamic: bool,
    rx: Receiver<(u64, T)>,
    tx: Sender<(u64, T)>,
    handler: Handler<T>,
    latency: Option<Duration>,
    stats: Arc<StageStats>,
    target: Arc<AtomicUsize>,
    input_closed: Arc<AtomicBool>,
    panics: Arc<Mutex<Vec<PanicRecord>>>,
}

fn process_item<T>(ctx: &WorkerContext<T>, seq: u64, item: T) -> Result<(), ()> {
    ctx.stats.received.fetch_add(1, Ordering::Relaxed);
    let start = Instant::now();
    if let Some(latency) = ctx.latency {
        simulate_latency(latency);
    }
    let result = catch_unwind(AssertUnwindSafe(|| (ctx.handler)(seq, item)));
    ctx.stats
        .busy_ns
        .fetch_add(start.elapsed().as_nanos() as u64, Ordering::Relaxed);
    match result {
        Ok(Ok(out)) => {
            if ctx.tx.send((seq, out)).is_err() {
                // Downstream is gone entirely; stop this worker.
                return Err(());
            }
            ctx.stats.emitted.fetch_add(1, Ordering::Relaxed);
        }
        Ok(Err(_)) => {
            ctx.stats.errors.fetch_add(1, Ordering::Relaxed);
        }
        Err(payload) => {
            ctx.stats.panics.fetch_add(1, Ordering::Relaxed);
            ctx.panics
                .lock()
                .expect("panic log poisoned")
                .push(PanicRecord {
                    stage: ctx.stage_name.clone(),
                    seq,
                    message: panic_message(payload.as_ref()),
                });
        }
    }
    Ok(())
}

fn worker_loop<T>(ctx: WorkerContext<T>) {
    if !ctx.dynamic {
        // Static pool: plain blocking receive until the queue closes.
        while let Ok((seq, item)) = ctx.rx.recv() {
            if process_item(&ctx, seq, item).is_err() {
                return;
            }
        }
        return;
    }
    loop {
        if ctx.worker_index >= ctx.target.load(Ordering::Relaxed) {
            // Deactivated: don't consume input, but keep watching for both
            // reactivation and shutdown.
            if ctx.input_closed.load(Ordering::Relaxed) {
                return;
            }
            thread::sleep(WORKER_POLL);
            continue;
        }
        match ctx.rx.recv_timeout(WORKER_POLL) {
            Ok((seq, item)) => {
                if process_item(&ctx, seq, item).is_err() {
                    return;
                }
            }
            Err(RecvTimeoutError::Timeout) => continue,
            Err(RecvTimeoutError::Disconnected) => {
                ctx.input_closed.store(true, Ordering::Relaxed);
                return;
            }
        }
    }
}

fn validate_stages<T>(stages: &[StageSpec<T>], opts: &RunOptions) -> Result<(), PipelineError> {
    if stages.is_empty() {
        return Err(PipelineError::InvalidSpec("pipeline has no stages".into()));
    }
    for s in stages {
        if s.workers == 0 {
            return Err(PipelineError::InvalidSpec(format!(
                "stage {:?} has zero workers",
                s.name
            )));
        }
        if s.queue_capacity == 0 {
            return Err(PipelineError::InvalidSpec(format!(
                "stage {:?} has zero queue capacity",
                s.name
            )));
        }
    }
    if let Some(policy) = &opts.realloc {
        if policy.budget < stages.len() {
            return Err(PipelineError::InvalidSpec(format!(
                "reallocation budget {} cannot cover {} stages",
                policy.budget,
                stages.len()
            )));
        }
        if policy.epoch.is_zero() {
            return Err(PipelineError::InvalidSpec(
                "reallocation epoch must be positive".into(),
            ));
        }
    }
    Ok(())
}

/// Runs `source` items through the stages and collects what survives.
///
/// The caller's thread feeds the first stage (blocking on its bounded queue
/// for backpressure); worker pools hand items down the chain; the collected
/// output is sorted by sequence number, so output order is deterministic
/// regardless of thread scheduling.
pub fn run_pipeline<T: Send + 'static>(
    stages: Vec<StageSpec<T>>,
    mut source: impl FnMut(u64) -> Option<T>,
    workload: Workload,
    opts: &RunOptions,
) -> Result<PipelineOutput<T>, PipelineError> {
    validate_stages(&stages, opts)?;
    let n_stages = stages.len();

    // Worker-pool sizes: static runs spawn exactly the configured workers;
    // reallocating runs pre-spawn the most any stage could be granted.
    let pool_sizes: Vec<usize> = match &opts.realloc {
        None => stages.iter().map(|s| s.workers).collect(),
        Some(policy) => vec![policy.budget - (n_stages - 1); n_stages],
    };

    // Input queue per stage, plus the collector queue after the last stage.
    let mut stage_txs = Vec::with_capacity(n_stages);
    let mut stage_rxs = Vec::with_capacity(n_stages);
    for s in &stages {
        let (tx, rx) = bounded::<(u64, T)>(s.queue_capacity);
        stage_txs.push(tx);
        stage_rxs.push(rx);
    }
    let collector_cap = stages.last().expect("nonempty").queue_capacity.max(1024);
    let (collect_tx, collect_rx) = bounded::<(u64, T)>(collector_cap);

    // Where each stage's workers send finished items.
    let mut out_txs: Vec<Sender<(u64, T)>> = stage_txs[1..].to_vec();
    out_txs.push(collect_tx);
    let feed_tx = stage_txs.remove(0);
    drop(stage_txs); // workers and the feeder now hold the only senders

    let stats: Vec<Arc<StageStats>> = (0..n_stages)
        .map(|_| Arc::new(StageStats::default()))
        .collect();
    let targets: Vec<Arc<AtomicUsize>> = stages
        .iter()
        .zip(&pool_sizes)
        .map(|(s, &cap)| Arc::new(AtomicUsize::new(s.workers.min(cap))))
        .collect();
    let closed_flags: Vec<Arc<AtomicBool>> = (0..n_stages)
        .map(|_| Arc::new(AtomicBool::new(false)))
        .collect();
    let panics: Arc<Mutex<Vec<PanicRecord>>> = Arc::new(Mutex::new(Vec::new()));
    let dynamic = opts.realloc.is_some();

    let mut worker_handles = Vec::new();
    for (i, spec) in stages.iter().enumerate() {
        for w in 0..pool_sizes[i] {
            let ctx = WorkerContext {
                stage_name: spec.name.clone(),
                worker_index: w,
                dynamic,
                rx: stage_rxs[i].clone(),
                tx: out_txs[i].clone(),
                handler: spec.handler.clone(),
                latency: spec.simulated_latency,
                stats: stats[i].clone(),
                target: targets[i].clone(),
                input_closed: closed_flags[i].clone(),
                panics: panics.clone(),
            };
            worker_handles.push(
                thread::Builder::new()
                    .name(format!("stage-{}-{w}", spec.name))
                    .spawn(move || worker_loop(ctx))
                    .map_err(|e| PipelineError::Internal(format!("spawn failed: {e}")))?,
            );
        }
    }
    drop(stage_rxs);
    drop(out_txs);

    // Optional controller: re-targets worker counts each epoch from the
    // busy time and item counts observed during that epoch.
    let controller_stop = Arc::new(AtomicBool::new(false));
    let controller = opts.realloc.map(|policy| {
        let stats = stats.clone();
        let targets = targets.clone();
        let stop = controller_stop.clone();
        thread::spawn(move || {
            let n = stats.len();
            let mut prev_busy = vec![0u64; n];
            while !stop.load(Ordering::Relaxed) {
                thread::sleep(policy.epoch);
                if stop.load(Ordering::Relaxed) {
                    break;
                }
                let mut loads = Vec::with_capacity(n);
                for i in 0..n {
                    let busy = stats[i].busy_ns.load(Ordering::Relaxed);
                    let d_busy = busy - prev_busy[i];
                    prev_busy[i] = busy;
                    // Worker-seconds consumed this epoch. Every stage sees
                    // the same item rate, so this is proportional to the
                    // per-item service time — exactly the weight an ideal
                    // allocation should follow.
                    loads.push(d_busy as f64 / 1e9);
                }
                if let Ok(alloc) = reallocate_workers(&loads, policy.budget) {
                    for (target, a) in targets.iter().zip(alloc) {
                        target.store(a, Ordering::Relaxed);
                    }
                }
            }
        })
    });

    // Shepherd: waits for the whole pipeline to drain, then hands back the
    // collected items. The main thread can give up on it after a timeout.
    let (done_tx, done_rx) = bounded::<Vec<(u64, T)>>(1);
    let collector = thread::spawn(move || {
        let mut items = Vec::new();
        while let Ok(pair) = collect_rx.recv() {
            items.push(pair);
        }
        items
    });
    let shepherd = {
        let controller_stop = controller_stop.clone();
        thread::spawn(move || {
            for handle in worker_handles {
                let _ = handle.join();
            }
            controller_stop.store(true, Ordering::Relaxed);
            if let Some(c) = controller {
                let _ = c.join();
            }
            let items = collector.join().unwrap_or_default();
            let _ = done_tx.send(items);
        })
    };

    // Feed from the caller's thread; bounded queues provide backpressure.
    let started = Instant::now();
    let mut items_in: u64 = 0;
    let mut seq: u64 = 0;
    let deadline = match workload {
        Workload::Items(_) => None,
        Workload::Timed(d) => Some(started + d),
    };
    let limit = match workload {
        Workload::Items(n) => n,
        Workload::Timed(_) => u64::MAX,
    };
    while seq < limit {
        if let Some(deadline) = deadline {
            if Instant::now() >= deadline {
                break;
            }
        }
        match source(seq) {
            Some(item) => {
                if feed_tx.send((seq, item)).is_err() {
                    break; // every worker of the first stage is gone
                }
                items_in += 1;
                seq += 1;
            }
            None => break,
        }
    }
    drop(feed_tx);

    // Wait for the drain.
    let items = match done_rx.recv_timeout(opts.shutdown_timeout) {
        Ok(items) => items,
        Err(_) => {
            controller_stop.store(true, Ordering::Relaxed);
            return Err(PipelineError::ShutdownTimeout {
                waited: opts.shutdown_timeout,
            });
        }
    };
    let _ = shepherd.join();
    let wall = started.elapsed();

    let mut items = items;
    items.sort_by_key(|(seq, _)| *seq);
    let items_out = items.len() as u64;

    let mut stage_reports = Vec::with_capacity(n_stages);
    for (i, spec) in stages.iter().enumerate() {
        let received = stats[i].received.load(Ordering::Relaxed);
        let busy_ns = stats[i].busy_ns.load(Ordering::Relaxed);
        stage_reports.push(StageReport {
            name: spec.name.clone(),
            workers: spec.workers,
            final_workers: targets[i].load(Ordering::Relaxed),
            received,
            emitted: stats[i].emitted.load(Ordering::Relaxed),
            errors: stats[i].errors.load(Ordering::Relaxed),
            panics: stats[i].panics.load(Ordering::Relaxed),
            busy_fraction: busy_ns as f64
                / (spec.workers as f64 * wall.as_nanos() as f64).max(1.0),
            mean_latency: if received > 0 {
                Duration::from_nanos(busy_ns / received)
            } else {
                Duration::ZERO
            },
        });
    }
    let mut panic_records = panics.lock().expect("panic log poisoned").clone();
    panic_records.sort_by(|a, b| a.stage.cmp(&b.stage).then(a.seq.cmp(&b.seq)));
    let failed: u64 = stage_reports.iter().map(|s| s.errors + s.panics).sum();

    let report = ThroughputReport {
        items_in,
        items_out,
        failed,
        wall,
        fps: if wall.as_secs_f64() > 0.0 {
            items_out as f64 / wall.as_secs_f64()
        } else {
            0.0
        },
        stages: stage_reports,
        panics: panic_records,
    };
    Ok(PipelineOutput { items, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qsim;

    fn ms(v: u64) -> Duration {
        Duration::from_millis(v)
    }

    fn unit_source(_: u64) -> Option<()> {
        Some(())
    }

    #[test]
    fn every_item_is_accounted_for() {
        let stages = vec![
            StageSpec::new("a", 2, 4, passthrough()),
            StageSpec::new("b", 1, 4, passthrough()),
            StageSpec::new("c", 3, 4, passthrough()),
        ];
        let out = run_pipeline(stages, unit_source, Workload::Items(1000), &RunOptions::default())
            .unwrap();
        assert_eq!(out.report.items_in, 1000);
        assert_eq!(out.report.items_out, 1000);
        assert_eq!(out.report.failed, 0);
        assert!(out.report.is_conserved());
        let seqs: Vec<u64> = out.items.iter().map(|(s, _)| *s).collect();
        assert_eq!(seqs, (0..1000).collect::<Vec<_>>(), "sorted and complete");
    }

    #[test]
    fn payload_transforms_flow_through_stages() {
        let stages = vec![
            StageSpec::new("double", 2, 4, Arc::new(|_, x: i64| Ok(x * 2)) as Handler<i64>),
            StageSpec::new("inc", 2, 4, Arc::new(|_, x: i64| Ok(x + 1)) as Handler<i64>),
        ];
        let out = run_pipeline(
            stages,
            |seq| Some(seq as i64),
            Workload::Items(100),
            &RunOptions::default(),
        )
        .unwrap();
        for (seq, value) in &out.items {
            assert_eq!(*value, *seq as i64 * 2 + 1);
        }
    }

    #[test]
    fn throughput_tracks_the_queueing_simulation() {
        let profile = PipelineProfile {
            stages: vec![
                ProfileStage {
                    name: "src".into(),
                    workers: 1,
                    queue_capacity: 4,
                    latency_ms: 10.0,
                },
                ProfileStage {
                    name: "heavy".into(),
                    workers: 4,
                    queue_capacity: 4,
                    latency_ms: 40.0,
                },
                ProfileStage {
                    name: "tail".into(),
                    workers: 2,
                    queue_capacity: 4,
                    latency_ms: 20.0,
                },
            ],
        };
        let items = 200u64;
        let sim = qsim::simulate(&profile.to_sim_stages(), items).unwrap();
        let out = run_pipeline(
            profile.to_stage_specs(),
            unit_source,
            Workload::Items(items),
            &RunOptions::default(),
        )
        .unwrap();
        assert!(out.report.is_conserved());
        let ratio = out.report.fps / sim.fps;
        assert!(
            (0.85..=1.15).contains(&ratio),
            "engine {:.2} fps vs simulated {:.2} fps",
            out.report.fps,
            sim.fps
        );
    }

    #[test]
    fn capacity_one_queues_do_not_deadlock() {
        let stages = vec![
            StageSpec::new("a", 1, 1, passthrough()),
            StageSpec::new("b", 1, 1, passthrough()),
            StageSpec::new("c", 1, 1, passthrough()),
            StageSpec::new("d", 1, 1, passthrough()),
        ];
        let out = run_pipeline(stages, unit_source, Workload::Items(500), &RunOptions::default())
            .unwrap();
        assert_eq!(out.report.items_out, 500);
        assert!(out.report.is_conserved());
    }

    #[test]
    fn panicking_handler_loses_only_its_items() {
        let stages = vec![
            StageSpec::new("ok", 2, 8, passthrough()),
            StageSpec::new(
                "flaky",
                2,
                8,
                Arc::new(|seq: u64, item: ()| {
                    if seq % 97 == 0 {
                        panic!("induced failure at {seq}");
                    }
                    Ok(item)
                }) as Handler<()>,
            ),
            StageSpec::new("sink", 1, 8, passthrough()),
        ];
        let out = run_pipeline(stages, unit_source, Workload::Items(1000), &RunOptions::default())
            .unwrap();
        let expected_failures = (0..1000u64).filter(|s| s % 97 == 0).count() as u64;
        assert_eq!(out.report.failed, expected_failures);
        assert_eq!(out.report.items_out, 1000 - expected_failures);
        assert!(out.report.is_conserved());
        assert_eq!(out.report.panics.len(), expected_failures as usize);
        for p in &out.report.panics {
            assert_eq!(p.stage, "flaky");
            assert_eq!(p.seq % 97, 0);
            assert!(p.message.contains("induced failure"));
        }
        // The failed sequence numbers are exactly the multiples of 97.
        for (seq, _) in &out.items {
            assert_ne!(*seq % 97, 0);
        }
    }

    #[test]
    fn handler_errors_are_counted_separately_from_panics() {
        let stages = vec![StageSpec::new(
            "filter",
            2,
            8,
            Arc::new(|seq: u64, item: ()| {
                if seq % 10 == 3 {
                    Err(format!("rejected {seq}"))
                } else {
                    Ok(item)
                }
            }) as Handler<()>,
        )];
        let out = run_pipeline(stages, unit_source, Workload::Items(100), &RunOptions::default())
            .unwrap();
        assert_eq!(out.report.stages[0].errors, 10);
        assert_eq!(out.report.stages[0].panics, 0);
        assert_eq!(out.report.items_out, 90);
        assert!(out.report.is_conserved());
    }

    #[test]
    fn timed_workload_stops_feeding_at_the_deadline() {
        let stages = vec![
            StageSpec::new("gen", 1, 2, passthrough::<()>()).with_latency(ms(5)),
            StageSpec::new("out", 1, 2, passthrough()),
        ];
        let out = run_pipeline(
            stages,
            unit_source,
            Workload::Timed(Duration::from_millis(300)),
            &RunOptions::default(),
        )
        .unwrap();
        assert!(out.report.is_conserved());
        assert!(
            out.report.items_out >= 10,
            "should process a few items in 300 ms, got {}",
            out.report.items_out
        );
        assert!(
            out.report.wall >= Duration::from_millis(290),
            "must run at least the requested duration, ran {:?}",
            out.report.wall
        );
        assert!(
            out.report.wall < Duration::from_secs(3),
            "drain should be quick, took {:?}",
            out.report.wall
        );
    }

    #[test]
    fn hanging_stage_trips_the_shutdown_timeout() {
        let stages = vec![StageSpec::new(
            "stuck",
            1,
            4,
            Arc::new(|_, item: ()| {
                thread::sleep(Duration::from_secs(30));
                Ok(item)
            }) as Handler<()>,
        )];
        let opts = RunOptions {
            shutdown_timeout: Duration::from_millis(200),
            ..RunOptions::default()
        };
        let err = run_pipeline(stages, unit_source, Workload::Items(2), &opts)
            .err()
            .expect("a stuck worker must trip the timeout");
        assert!(matches!(err, PipelineError::ShutdownTimeout { .. }));
    }

    #[test]
    fn busy_fraction_reflects_the_bottleneck() {
        let profile = PipelineProfile {
            stages: vec![
                ProfileStage {
                    name: "light".into(),
                    workers: 1,
                    queue_capacity: 2,
                    latency_ms: 2.0,
                },
                ProfileStage {
                    name: "heavy".into(),
                    workers: 1,
                    queue_capacity: 2,
                    latency_ms: 20.0,
                },
            ],
        };
        let out = run_pipeline(
            profile.to_stage_specs(),
            unit_source,
            Workload::Items(100),
            &RunOptions::default(),
        )
        .unwrap();
        let light = &out.report.stages[0];
        let heavy = &out.report.stages[1];
        assert!(heavy.busy_fraction > 0.9, "bottleneck busy {}", heavy.busy_fraction);
        assert!(light.busy_fraction < 0.3, "light stage busy {}", light.busy_fraction);
        assert!(heavy.mean_latency >= ms(20) && heavy.mean_latency < ms(30));
    }

    #[test]
    fn csv_report_has_one_row_per_stage() {
        let stages = vec![
            StageSpec::new("a", 1, 2, passthrough::<()>()),
            StageSpec::new("b", 2, 2, passthrough()),
        ];
        let out = run_pipeline(stages, unit_source, Workload::Items(10), &RunOptions::default())
            .unwrap();
        let csv = out.report.to_csv();
        let lines: Vec<&str> = csv.trim_end().lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("stage,workers,final_workers,received,"));
        assert!(lines[1].starts_with("a,1,1,10,"));
        assert!(lines[2].starts_with("b,2,2,10,"));
        // And the JSON form parses back.
        let json = out.report.to_json().unwrap();
        let back: ThroughputReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.items_out, 10);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let no_stages: Vec<StageSpec<()>> = vec![];
        assert!(matches!(
            run_pipeline(no_stages, unit_source, Workload::Items(1), &RunOptions::default()),
            Err(PipelineError::InvalidSpec(_))
        ));
        let zero_workers = vec![StageSpec::new("a", 0, 1, passthrough::<()>())];
        assert!(run_pipeline(zero_workers, unit_source, Workload::Items(1), &RunOptions::default())
            .is_err());
        let zero_cap = vec![StageSpec::new("a", 1, 0, passthrough::<()>())];
        assert!(run_pipeline(zero_cap, unit_source, Workload::Items(1), &RunOptions::default())
            .is_err());
        let small_budget = RunOptions {
            realloc: Some(ReallocPolicy {
                budget: 1,
                epoch: ms(100),
            }),
            ..RunOptions::default()
        };
        let two = vec![
            StageSpec::new("a", 1, 1, passthrough::<()>()),
            StageSpec::new("b", 1, 1, passthrough()),
        ];
        assert!(run_pipeline(two, unit_source, Workload::Items(1), &small_budget).is_err());
    }

    // ---- worker reallocation -------------------------------------------

    #[test]
    fn equal_loads_split_the_budget_evenly() {
        let alloc = reallocate_workers(&[1.0, 1.0, 1.0], 8).unwrap();
        assert_eq!(alloc.iter().sum::<usize>(), 8);
        assert_eq!(alloc, vec![3, 3, 2], "ties go to earlier stages");
        let spread = alloc.iter().max().unwrap() - alloc.iter().min().unwrap();
        assert!(spread <= 1);
    }

    #[test]
    fn single_hot_stage_takes_all_spare_workers() {
        let alloc = reallocate_workers(&[0.8, 0.0, 0.0, 0.0], 8).unwrap();
        assert_eq!(alloc, vec![5, 1, 1, 1]);
    }

    #[test]
    fn minimal_budget_gives_everyone_one_worker() {
        let alloc = reallocate_workers(&[5.0, 0.0, 2.0, 9.0], 4).unwrap();
        assert_eq!(alloc, vec![1, 1, 1, 1]);
    }

    #[test]
    fn balanced_allocation_is_a_fixed_point() {
        // Per-item service times 10/40/20 under allocation (1,4,2) give
        // equal busy fractions, so the observed loads are the service
        // times themselves — and the allocator reproduces (1,4,2).
        let loads = stage_loads(&[1.0, 1.0, 1.0], &[ms(10), ms(40), ms(20)]);
        let alloc = reallocate_workers(&loads, 7).unwrap();
        assert_eq!(alloc, vec![1, 4, 2]);
        let again = reallocate_workers(&loads, 7).unwrap();
        assert_eq!(alloc, again);
    }

    #[test]
    fn allocation_rejects_bad_inputs() {
        assert!(reallocate_workers(&[], 4).is_err());
        assert!(reallocate_workers(&[1.0, 1.0], 1).is_err());
        assert!(reallocate_workers(&[1.0, f64::NAN], 4).is_err());
        assert!(reallocate_workers(&[1.0, -0.5], 4).is_err());
    }

    #[test]
    fn zero_loads_fall_back_to_an_even_split() {
        let alloc = reallocate_workers(&[0.0, 0.0, 0.0], 7).unwrap();
        assert_eq!(alloc.iter().sum::<usize>(), 7);
        let spread = alloc.iter().max().unwrap() - alloc.iter().min().unwrap();
        assert!(spread <= 1);
    }

    #[test]
    fn reallocation_moves_workers_to_the_slow_stage() {
        // Stage "slow" needs 10x the per-item time; start it understaffed
        // and let the epoch controller discover that.
        let stages = vec![
            StageSpec::new("fast-in", 2, 4, passthrough::<()>()).with_latency(ms(4)),
            StageSpec::new("slow", 1, 4, passthrough()).with_latency(ms(40)),
            StageSpec::new("fast-out", 2, 4, passthrough()).with_latency(ms(4)),
        ];
        let opts = RunOptions {
            realloc: Some(ReallocPolicy {
                budget: 6,
                epoch: Duration::from_millis(300),
            }),
            ..RunOptions::default()
        };
        let out = run_pipeline(
            stages,
            unit_source,
            Workload::Timed(Duration::from_millis(2500)),
            &opts,
        )
        .unwrap();
        assert!(out.report.is_conserved());
        let finals: Vec<usize> = out.report.stages.iter().map(|s| s.final_workers).collect();
        assert_eq!(finals.iter().sum::<usize>(), 6, "budget is fully used: {finals:?}");
        assert!(
            finals[1] >= 3,
            "slow stage should end with most workers: {finals:?}"
        );
        assert!(finals[0] >= 1 && finals[2] >= 1);
        assert!(
            out.report.items_out > 100,
            "rebalanced line should clear well over 100 items in 2.5 s, got {}",
            out.report.items_out
        );
    }
}
