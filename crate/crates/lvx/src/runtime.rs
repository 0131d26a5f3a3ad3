//! In-process cluster: one OS thread per worker, one mailbox per worker.
//!
//! `send` never blocks. Every envelope carries the instant at which it may
//! be delivered; with [`Transport::Throttled`] that is when its bytes have
//! finished crossing the link, links serializing their own traffic. A
//! receiver waiting on an envelope that is not yet deliverable sleeps until
//! then, so a worker that posts its send before computing overlaps the two.
//!
//! When any worker fails or panics the fabric shuts down and every blocked
//! `recv` returns [`lvx_core::Error::Shutdown`]; the first root-cause error is
//! what [`spawn_cluster`] reports.

use std::collections::{HashMap, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use lvx_core::comm::{Communicator, Message, Tag, COLLECTIVE_TAG_BASE};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TIMEOUT_ENV: &str = "LVX_TIMEOUT_SECS";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transport {
    /// Delivery as soon as the message is posted.
    Instant,
    /// `latency + bytes / bandwidth` seconds per message, serialized per link.
    Throttled { bandwidth: f64, latency: f64 },
}

impl Transport {
    pub fn validate(&self) -> Result<()> {
        if let Transport::Throttled { bandwidth, latency } = *self {
            if !(bandwidth > 0.0 && bandwidth.is_finite()) {
                return Err(Error::config("bandwidth", format!("must be positive, got {}", bandwidth)));
            }
            if !(latency >= 0.0 && latency.is_finite()) {
                return Err(Error::config("latency", format!("must be non-negative, got {}", latency)));
            }
        }
        Ok(())
    }

    /// Seconds a `bytes`-byte message occupies its link.
    pub fn message_time(&self, bytes: u64) -> f64 {
        match *self {
            Transport::Instant => 0.0,
            Transport::Throttled { bandwidth, latency } => latency + bytes as f64 / bandwidth,
        }
    }
}

/// Collective timeout, overridable through `LVX_TIMEOUT_SECS`.
pub fn timeout_from_env() -> Duration {
    std::env::var(TIMEOUT_ENV)
        .ok()
        .and_then(|s| s.trim().parse::<f64>().ok())
        .filter(|s| *s > 0.0 && s.is_finite())
        .map(Duration::from_secs_f64)
        .unwrap_or(DEFAULT_TIMEOUT)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LinkStats {
    pub src: usize,
    pub dst: usize,
    pub bytes_sent: u64,
    pub message_count: u64,
    pub modeled_time_seconds: f64,
}

/// Counters for every ordered pair of distinct workers.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TransportStats {
    pub workers: usize,
    pub links: Vec<LinkStats>,
}

impl TransportStats {
    fn new(workers: usize) -> Self {
        let links = (0..workers)
            .flat_map(|src| (0..workers).map(move |dst| LinkStats { src, dst, ..Default::default() }))
            .collect();
        TransportStats { workers, links }
    }

    pub fn link(&self, src: usize, dst: usize) -> &LinkStats {
        &self.links[src * self.workers + dst]
    }

    pub fn bytes_from(&self, src: usize) -> u64 {
        (0..self.workers).map(|dst| self.link(src, dst).bytes_sent).sum()
    }

    pub fn total_bytes(&self) -> u64 {
        self.links.iter().map(|l| l.bytes_sent).sum()
    }

    pub fn total_messages(&self) -> u64 {
        self.links.iter().map(|l| l.message_count).sum()
    }
}

struct Envelope {
    msg: Message,
    ready_at: Instant,
}

#[derive(Default)]
struct Mailbox {
    queues: Mutex<HashMap<(usize, Tag), VecDeque<Envelope>>>,
    arrived: Condvar,
}

struct Fabric {
    workers: usize,
    transport: Transport,
    timeout: Duration,
    mailboxes: Vec<Mailbox>,
    shutdown: AtomicBool,
    stats: Mutex<TransportStats>,
    link_free_at: Mutex<Vec<Instant>>,
}

impl Fabric {
    fn shut_down(&self) {
        self.shutdown.store(true, Ordering::SeqCst);
        for mb in &self.mailboxes {
            // take the lock so no receiver misses the wakeup between its check and its wait
            let _guard = mb.queues.lock().unwrap_or_else(|e| e.into_inner());
            mb.arrived.notify_all();
        }
    }
}

/// A worker's endpoint on the fabric.
pub struct ThreadComm {
    rank: usize,
    fabric: Arc<Fabric>,
    collective_seq: Tag,
}

impl Communicator for ThreadComm {
    fn rank(&self) -> usize {
        self.rank
    }

    fn size(&self) -> usize {
        self.fabric.workers
    }

    fn send(&mut self, dst: usize, tag: Tag, msg: Message) -> lvx_core::Result<()> {
        let f = &*self.fabric;
        if dst >= f.workers {
            return Err(lvx_core::Error::NoSuchWorker(dst));
        }
        if f.shutdown.load(Ordering::SeqCst) {
            return Err(lvx_core::Error::Shutdown { src: dst });
        }
        let now = Instant::now();
        let ready_at = if dst == self.rank {
            now
        } else {
            let bytes = msg.payload_bytes() as u64;
            let seconds = f.transport.message_time(bytes);
            let ready_at = {
                let mut free = f.link_free_at.lock().unwrap();
                let slot = &mut free[self.rank * f.workers + dst];
                let start = (*slot).max(now);
                *slot = start + Duration::from_secs_f64(seconds);
                *slot
            };
            let mut stats = f.stats.lock().unwrap();
            let idx = self.rank * f.workers + dst;
            let link = &mut stats.links[idx];
            link.bytes_sent += bytes;
            link.message_count += 1;
            link.modeled_time_seconds += seconds;
            ready_at
        };
        let mb = &f.mailboxes[dst];
        mb.queues.lock().unwrap().entry((self.rank, tag)).or_default().push_back(Envelope { msg, ready_at });
        mb.arrived.notify_all();
        Ok(())
    }

    fn recv(&mut self, src: usize, tag: Tag) -> lvx_core::Result<Message> {
        let f = &*self.fabric;
        if src >= f.workers {
            return Err(lvx_core::Error::NoSuchWorker(src));
        }
        let deadline = Instant::now() + f.timeout;
        let mb = &f.mailboxes[self.rank];
        let mut queues = mb.queues.lock().unwrap();
        loop {
            let now = Instant::now();
            let mut wake = deadline;
            if let Some(queue) = queues.get_mut(&(src, tag)) {
                if let Some(front) = queue.front() {
                    if front.ready_at <= now {
                        let env = queue.pop_front().expect("front exists");
                        if queue.is_empty() {
                            queues.remove(&(src, tag));
                        }
                        return Ok(env.msg);
                    }
                    wake = wake.min(front.ready_at);
                }
            }
            if f.shutdown.load(Ordering::SeqCst) {
                return Err(lvx_core::Error::Shutdown { src });
            }
            if now >= deadline {
                return Err(lvx_core::Error::Timeout { src, tag });
            }
            queues = mb.arrived.wait_timeout(queues, wake - now).unwrap().0;
        }
    }

    fn next_collective_tag(&mut self) -> Tag {
        self.collective_seq += 1;
        COLLECTIVE_TAG_BASE + self.collective_seq
    }
}

#[derive(Debug, Clone)]
pub struct ClusterOptions {
    pub transport: Transport,
    pub timeout: Duration,
}

impl ClusterOptions {
    pub fn new(transport: Transport) -> Self {
        ClusterOptions { transport, timeout: timeout_from_env() }
    }
}

impl Default for ClusterOptions {
    fn default() -> Self {
        Self::new(Transport::Instant)
    }
}

#[derive(Debug)]
pub struct ClusterOutput<T> {
    /// Indexed by rank.
    pub results: Vec<T>,
    pub stats: TransportStats,
    pub wall: Duration,
}

fn panic_message(payload: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "non-string panic payload".to_string()
    }
}

/// Runs `body` on `workers` threads, each with its own [`ThreadComm`].
pub fn spawn_cluster<T, F>(workers: usize, options: &ClusterOptions, body: F) -> Result<ClusterOutput<T>>
where
    T: Send,
    F: Fn(&mut ThreadComm) -> lvx_core::Result<T> + Sync,
{
    if workers == 0 {
        return Err(lvx_core::Error::NoWorkers.into());
    }
    options.transport.validate()?;
    let now = Instant::now();
    let fabric = Arc::new(Fabric {
        workers,
        transport: options.transport,
        timeout: options.timeout,
        mailboxes: (0..workers).map(|_| Mailbox::default()).collect(),
        shutdown: AtomicBool::new(false),
        stats: Mutex::new(TransportStats::new(workers)),
        link_free_at: Mutex::new(vec![now; workers * workers]),
    });
    let started = Instant::now();
    let outcomes: Vec<Result<T>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|rank| {
                let fabric = Arc::clone(&fabric);
                let body = &body;
                scope.spawn(move || {
                    let mut comm = ThreadComm { rank, fabric: Arc::clone(&fabric), collective_seq: 0 };
                    let outcome = match catch_unwind(AssertUnwindSafe(|| body(&mut comm))) {
                        Ok(Ok(v)) => Ok(v),
                        Ok(Err(e)) => Err(Error::Core(e)),
                        Err(payload) => Err(Error::WorkerPanic { rank, message: panic_message(payload) }),
                    };
                    if outcome.is_err() {
                        fabric.shut_down();
                    }
                    outcome
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panics are caught")).collect()
    });
    let wall = started.elapsed();

    let mut results = Vec::with_capacity(workers);
    let mut first_err: Option<Error> = None;
    for outcome in outcomes {
        match outcome {
            Ok(v) => results.push(v),
            Err(e) => {
                let secondary = matches!(e, Error::Core(lvx_core::Error::Shutdown { .. }));
                let replace = match &first_err {
                    None => true,
                    Some(Error::Core(lvx_core::Error::Shutdown { .. })) => !secondary,
                    Some(_) => false,
                };
                if replace {
                    first_err = Some(e);
                }
            }
        }
    }
    if let Some(e) = first_err {
        return Err(e);
    }
    let stats = fabric.stats.lock().unwrap().clone();
    Ok(ClusterOutput { results, stats, wall })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn message_time() {
        let t = Transport::Throttled { bandwidth: 1000.0, latency: 0.5 };
        assert_eq!(t.message_time(500), 1.0);
        assert_eq!(Transport::Instant.message_time(1 << 20), 0.0);
        assert!(Transport::Throttled { bandwidth: 0.0, latency: 0.0 }.validate().is_err());
        assert!(Transport::Throttled { bandwidth: 1.0, latency: -1.0 }.validate().is_err());
    }

    #[test]
    fn zero_workers_rejected() {
        let r = spawn_cluster(0, &ClusterOptions::default(), |c| Ok(c.rank()));
        assert!(matches!(r, Err(Error::Core(lvx_core::Error::NoWorkers))));
    }
}
