use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::types::DipId;

/// Work is counted in nano-units so conservation checks are exact.
pub const WORK_SCALE: f64 = 1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DipSpec {
    pub id: DipId,
    pub class: String,
    /// Total service rate, in work units per second.
    pub capacity: f64,
    /// Cap on the rate a single connection can get; `None` is pure
    /// processor sharing.
    pub conn_rate: Option<f64>,
    pub base_latency_ms: f64,
}

impl DipSpec {
    pub fn single_rate(&self) -> f64 {
        match self.conn_rate {
            Some(r) => r.min(self.capacity),
            None => self.capacity,
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Job {
    tag: f64,
    pub id: u64,
    pub arrival: f64,
    pub work: u64,
}

impl PartialEq for Job {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for Job {}
impl PartialOrd for Job {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Job {
    fn cmp(&self, o: &Self) -> Ordering {
        self.tag.total_cmp(&o.tag).then(self.id.cmp(&o.id))
    }
}

#[derive(Clone, Debug, Default)]
pub(crate) struct Window {
    pub admitted: u64,
    pub completed: u64,
    pub aborted: u64,
    pub latency_sum_ms: f64,
    pub busy: f64,
    pub active: f64,
}

/// One backend under limited processor sharing: with N connections each is
/// served at min(conn_rate, capacity / N). Tracked with a virtual clock.
#[derive(Clone, Debug)]
pub(crate) struct DipServer {
    pub spec: DipSpec,
    pub capacity: f64,
    pub failed: bool,
    pub epoch: u64,
    vtime: f64,
    last: f64,
    jobs: BinaryHeap<Reverse<Job>>,
    pub arrived_work: u128,
    pub completed_work: u128,
    pub aborted_work: u128,
    pub window: Window,
}

impl DipServer {
    pub fn new(spec: DipSpec) -> Self {
        DipServer {
            capacity: spec.capacity,
            spec,
            failed: false,
            epoch: 0,
            vtime: 0.0,
            last: 0.0,
            jobs: BinaryHeap::new(),
            arrived_work: 0,
            completed_work: 0,
            aborted_work: 0,
            window: Window::default(),
        }
    }

    pub fn active(&self) -> usize {
        self.jobs.len()
    }

    pub fn in_flight_work(&self) -> u128 {
        self.jobs.iter().map(|j| j.0.work as u128).sum()
    }

    fn per_job_rate(&self) -> f64 {
        let n = self.jobs.len() as f64;
        if n == 0.0 {
            return 0.0;
        }
        let share = self.capacity / n;
        match self.spec.conn_rate {
            Some(r) => r.min(share),
            None => share,
        }
    }

    /// Fraction of capacity in use right now.
    pub fn busy_fraction(&self) -> f64 {
        if self.jobs.is_empty() {
            return 0.0;
        }
        (self.per_job_rate() * self.jobs.len() as f64 / self.capacity).min(1.0)
    }

    pub fn advance(&mut self, now: f64) {
        let dt = now - self.last;
        if dt > 0.0 {
            self.vtime += self.per_job_rate() * dt;
            self.window.busy += self.busy_fraction() * dt;
            self.window.active += self.jobs.len() as f64 * dt;
            self.last = now;
        }
    }

    pub fn admit(&mut self, now: f64, id: u64, work: u64) {
        self.advance(now);
        let tag = self.vtime + work as f64 / WORK_SCALE;
        self.jobs.push(Reverse(Job {
            tag,
            id,
            arrival: now,
            work,
        }));
        self.arrived_work += work as u128;
        self.window.admitted += 1;
        self.epoch += 1;
    }

    pub fn next_departure(&self) -> Option<f64> {
        let top = self.jobs.peek()?;
        let r = self.per_job_rate();
        Some(self.last + ((top.0.tag - self.vtime).max(0.0)) / r)
    }

    /// Completes the job with the smallest finish tag; returns its sojourn.
    pub fn depart(&mut self, now: f64) -> Option<(u64, f64)> {
        self.advance(now);
        let Reverse(job) = self.jobs.pop()?;
        if job.tag > self.vtime {
            self.vtime = job.tag;
        }
        self.completed_work += job.work as u128;
        self.epoch += 1;
        let ms = (now - job.arrival) * 1000.0 + self.spec.base_latency_ms;
        self.window.completed += 1;
        self.window.latency_sum_ms += ms;
        Some((job.id, ms))
    }

    pub fn fail(&mut self, now: f64) -> usize {
        self.advance(now);
        let n = self.jobs.len();
        for Reverse(j) in self.jobs.drain() {
            self.aborted_work += j.work as u128;
        }
        self.window.aborted += n as u64;
        self.failed = true;
        self.epoch += 1;
        n
    }

    pub fn restore(&mut self, now: f64) {
        self.advance(now);
        self.failed = false;
        self.epoch += 1;
    }

    pub fn set_capacity(&mut self, now: f64, c: f64) {
        self.advance(now);
        self.capacity = c;
        self.epoch += 1;
    }

    pub fn take_window(&mut self) -> Window {
        std::mem::take(&mut self.window)
    }
}
