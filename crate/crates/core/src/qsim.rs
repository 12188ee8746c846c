//! Virtual-time discrete-event simulation of a linear stage pipeline.
//!
//! Each stage has a pool of identical servers, a bounded FIFO input queue,
//! and a fixed service time. A server that finishes an item must hand it to
//! the next stage's queue; while that queue is full the server stands
//! blocked holding the item (backpressure). The first stage draws from an
//! unlimited supply of work items.
//!
//! Time is integer nanoseconds and every tie is broken deterministically,
//! so a simulation is exactly reproducible. The simulator shares no code
//! with the threaded execution engine, which makes it an independent
//! prediction of what the engine's throughput should be.

use serde::{Deserialize, Serialize};
use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};
use std::time::Duration;
use thiserror::Error;

/// Errors from building or running a simulation.
#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation spec: {0}")]
    InvalidSpec(String),
}

/// One pipeline stage as the simulator sees it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimStage {
    pub name: String,
    /// Parallel servers working this stage.
    pub workers: usize,
    /// Bounded input-queue capacity (items waiting, excluding in-service).
    pub queue_capacity: usize,
    /// Fixed time one server spends on one item.
    pub service: Duration,
}

impl SimStage {
    pub fn new(name: &str, workers: usize, queue_capacity: usize, service: Duration) -> Self {
        Self {
            name: name.to_string(),
            workers,
            queue_capacity,
            service,
        }
    }
}

/// Per-stage outcome of a simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimStageReport {
    pub name: String,
    /// Items whose service completed at this stage.
    pub completed: u64,
    /// Fraction of total worker time spent in service.
    pub busy_fraction: f64,
    /// Fraction of total worker time spent holding a finished item because
    /// the next queue was full.
    pub blocked_fraction: f64,
}

/// Whole-pipeline outcome of a simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    /// Items that left the final stage.
    pub items: u64,
    /// Virtual time from start until the last item left.
    pub virtual_wall: Duration,
    /// Items per second of virtual time.
    pub fps: f64,
    pub stages: Vec<SimStageReport>,
}

/// Steady-state throughput bound: the slowest stage, measured as service
/// time per item divided by its worker count, caps the whole line.
pub fn predicted_fps(stages: &[SimStage]) -> f64 {
    let bottleneck_ns = stages
        .iter()
        .map(|s| s.service.as_nanos() as f64 / s.workers as f64)
        .fold(0.0f64, f64::max);
    if bottleneck_ns <= 0.0 {
        f64::INFINITY
    } else {
        1e9 / bottleneck_ns
    }
}

fn validate(stages: &[SimStage], items: u64) -> Result<(), SimError> {
    if stages.is_empty() {
        return Err(SimError::InvalidSpec("no stages".into()));
    }
    if items == 0 {
        return Err(SimError::InvalidSpec("no items to process".into()));
    }
    for s in stages {
        if s.workers == 0 {
            return Err(SimError::InvalidSpec(format!(
                "stage {:?} has zero workers",
                s.name
            )));
        }
        if s.queue_capacity == 0 {
            return Err(SimError::InvalidSpec(format!(
                "stage {:?} has zero queue capacity",
                s.name
            )));
        }
    }
    Ok(())
}

#[derive(Debug)]
struct StageState {
    free_servers: usize,
    queue: VecDeque<u64>,
    /// Finished items whose servers are stuck on a full next queue,
    /// oldest first: (item, blocked-since time).
    blocked: VecDeque<(u64, u64)>,
    busy_ns: u128,
    blocked_ns: u128,
    completed: u64,
}

/// Runs `items` work items through the pipeline and reports throughput.
pub fn simulate(stages: &[SimStage], items: u64) -> Result<SimReport, SimError> {
    validate(stages, items)?;
    let n_stages = stages.len();
    let service_ns: Vec<u64> = stages.iter().map(|s| s.service.as_nanos() as u64).collect();

    let mut state: Vec<StageState> = stages
        .iter()
        .map(|s| StageState {
            free_servers: s.workers,
            queue: VecDeque::new(),
            blocked: VecDeque::new(),
            busy_ns: 0,
            blocked_ns: 0,
            completed: 0,
        })
        .collect();

    // Service-completion events ordered by (time, stage, sequence); the
    // sequence number makes simultaneous events process in a fixed order.
    let mut events: BinaryHeap<Reverse<(u64, usize, u64, u64)>> = BinaryHeap::new();
    let mut event_seq: u64 = 0;
    let mut remaining_source = items;
    let mut next_item_id: u64 = 0;
    let mut exited: u64 = 0;
    let mut last_exit_ns: u64 = 0;

    // Moves items at `now`: blocked hand-offs whose target queue gained
    // space, and queued items onto free servers. Repeats until nothing
    // moves, so chains of freed space propagate upstream within one instant.
    let settle = |state: &mut Vec<StageState>,
                      events: &mut BinaryHeap<Reverse<(u64, usize, u64, u64)>>,
                      event_seq: &mut u64,
                      remaining_source: &mut u64,
                      next_item_id: &mut u64,
                      now: u64| {
        loop {
            let mut moved = false;
            for i in 0..n_stages {
                // Unblock finished hand-offs into the next queue.
                if i + 1 < n_stages {
                    while !state[i].blocked.is_empty()
                        && state[i + 1].queue.len() < stages[i + 1].queue_capacity
                    {
                        let (item, since) = state[i].blocked.pop_front().expect("checked");
                        state[i].blocked_ns += u128::from(now - since);
                        state[i + 1].queue.push_back(item);
                        state[i].free_servers += 1;
                        moved = true;
                    }
                }
                // Start service on free servers.
                while state[i].free_servers > 0 {
                    let item = if i == 0 {
                        if *remaining_source == 0 {
                            break;
                        }
                        *remaining_source -= 1;
                        let id = *next_item_id;
                        *next_item_id += 1;
                        id
                    } else {
                        match state[i].queue.pop_front() {
                            Some(item) => item,
                            None => break,
                        }
                    };
                    state[i].free_servers -= 1;
                    state[i].busy_ns += u128::from(service_ns[i]);
                    events.push(Reverse((now + service_ns[i], i, *event_seq, item)));
                    *event_seq += 1;
                    moved = true;
                }
            }
            if !moved {
                break;
            }
        }
    };

    settle(
        &mut state,
        &mut events,
        &mut event_seq,
        &mut remaining_source,
        &mut next_item_id,
        0,
    );

    while let Some(Reverse((now, stage, _, item))) = events.pop() {
        state[stage].completed += 1;
        if stage + 1 == n_stages {
            // Item leaves the pipeline.
            state[stage].free_servers += 1;
            exited += 1;
            last_exit_ns = last_exit_ns.max(now);
        } else if state[stage + 1].queue.len() < stages[stage + 1].queue_capacity {
            state[stage + 1].queue.push_back(item);
            state[stage].free_servers += 1;
        } else {
            state[stage].blocked.push_back((item, now));
        }
        settle(
            &mut state,
            &mut events,
            &mut event_seq,
            &mut remaining_source,
            &mut next_item_id,
            now,
        );
    }

    debug_assert_eq!(exited, items, "all items must drain");
    let wall_ns = last_exit_ns;
    let fps = if wall_ns > 0 {
        exited as f64 / (wall_ns as f64 / 1e9)
    } else {
        f64::INFINITY
    };

    let stage_reports = stages
        .iter()
        .zip(&state)
        .map(|(spec, st)| {
            let denom = spec.workers as u128 * u128::from(wall_ns);
            SimStageReport {
                name: spec.name.clone(),
                completed: st.completed,
                busy_fraction: if denom > 0 {
                    st.busy_ns as f64 / denom as f64
                } else {
                    0.0
                },
                blocked_fraction: if denom > 0 {
                    st.blocked_ns as f64 / denom as f64
                } else {
                    0.0
                },
            }
        })
        .collect();

    Ok(SimReport {
        items: exited,
        virtual_wall: Duration::from_nanos(wall_ns),
        fps,
        stages: stage_reports,
    })
}
