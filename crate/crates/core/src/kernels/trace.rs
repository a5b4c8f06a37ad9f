//! Per-rank kernel timeline recorder.
//!
//! Kernels wrap each phase of a tile (compute, local store, remote transfer,
//! signal, wait) in a recorder call. Remote transfers also pass through the
//! recorder's link model, which is where an artificial communication delay is
//! injected.

use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use crate::error::Result;
use crate::runtime::WorldContext;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    Compute,
    LocalStore,
    RemoteStore,
    Put,
    Signal,
    Wait,
}

impl Phase {
    pub fn is_comm(self) -> bool {
        matches!(self, Phase::RemoteStore | Phase::Put)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEvent {
    pub rank: usize,
    pub pid: usize,
    pub tile: usize,
    pub phase: Phase,
    /// Destination rank for transfers.
    pub peer: Option<usize>,
    pub start: Duration,
    pub end: Duration,
}

/// Artificial latency added to every remote transfer.
///
/// Each rank owns `lanes` link lanes. A delayed transfer books the next
/// `per_transfer` window on the earliest-free lane and returns when that
/// window closes, so queued transfers occupy a lane back to back.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommDelay {
    pub per_transfer: Duration,
    pub lanes: usize,
}

impl CommDelay {
    pub fn serial(per_transfer: Duration) -> Self {
        Self {
            per_transfer,
            lanes: 1,
        }
    }
}

struct Link {
    /// Time at which each lane becomes free, relative to the world epoch.
    free_at: Mutex<Vec<Duration>>,
}

pub struct Recorder {
    enabled: bool,
    events: Mutex<Vec<TraceEvent>>,
    delay: Option<CommDelay>,
    link: Link,
}

impl std::fmt::Debug for Recorder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Recorder")
            .field("enabled", &self.enabled)
            .field("delay", &self.delay)
            .finish()
    }
}

impl Default for Recorder {
    fn default() -> Self {
        Self::new(false, None)
    }
}

impl Recorder {
    pub fn new(enabled: bool, delay: Option<CommDelay>) -> Self {
        let lanes = delay.map_or(1, |d| d.lanes.max(1));
        Self {
            enabled,
            events: Mutex::new(Vec::new()),
            delay,
            link: Link {
                free_at: Mutex::new(vec![Duration::ZERO; lanes]),
            },
        }
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    pub fn delay(&self) -> Option<CommDelay> {
        self.delay
    }

    /// Runs `f` and records it as one event.
    pub fn span<R>(
        &self,
        ctx: &WorldContext,
        pid: usize,
        tile: usize,
        phase: Phase,
        peer: Option<usize>,
        f: impl FnOnce() -> R,
    ) -> R {
        if !self.enabled {
            return f();
        }
        let start = ctx.now();
        let out = f();
        let end = ctx.now();
        self.events.lock().unwrap().push(TraceEvent {
            rank: ctx.rank(),
            pid,
            tile,
            phase,
            peer,
            start,
            end,
        });
        out
    }

    /// Runs a transfer from `from_rank` to `to_rank`. Remote transfers also
    /// wait out their booked link window.
    #[allow(clippy::too_many_arguments)]
    pub fn transfer(
        &self,
        ctx: &WorldContext,
        pid: usize,
        tile: usize,
        phase: Phase,
        from_rank: usize,
        to_rank: usize,
        f: impl FnOnce() -> Result<()>,
    ) -> Result<()> {
        let delayed = self.delay.filter(|_| from_rank != to_rank);
        self.span(ctx, pid, tile, phase, Some(to_rank), || {
            let Some(d) = delayed else {
                return f();
            };
            let done = {
                let mut lanes = self.link.free_at.lock().unwrap();
                let lane = (0..lanes.len()).min_by_key(|&i| lanes[i]).unwrap_or(0);
                let end = lanes[lane].max(ctx.now()) + d.per_transfer;
                lanes[lane] = end;
                end
            };
            let r = f();
            let now = ctx.now();
            if done > now {
                thread::sleep(done - now);
            }
            r
        })
    }

    pub fn events(&self) -> Vec<TraceEvent> {
        self.events.lock().unwrap().clone()
    }

    pub fn clear(&self) {
        self.events.lock().unwrap().clear();
    }
}

/// Start-to-end span of the events selected by `pick`, if any.
pub fn span_of(events: &[TraceEvent], pick: impl Fn(&TraceEvent) -> bool) -> Option<(Duration, Duration)> {
    events.iter().filter(|e| pick(e)).fold(None, |acc, e| match acc {
        None => Some((e.start, e.end)),
        Some((s, t)) => Some((s.min(e.start), t.max(e.end))),
    })
}

/// Compute span of a trace: first compute start to last compute end.
pub fn compute_span(events: &[TraceEvent]) -> Option<(Duration, Duration)> {
    span_of(events, |e| e.phase == Phase::Compute)
}

/// Communication span: first to last transfer to a peer rank.
pub fn comm_span(events: &[TraceEvent]) -> Option<(Duration, Duration)> {
    span_of(events, |e| e.phase.is_comm() && e.peer != Some(e.rank))
}
