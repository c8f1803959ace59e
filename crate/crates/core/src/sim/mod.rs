//! Discrete-event simulation of an L4 load balancer in front of a DIP pool.

mod dataplane;
mod hist;
mod probe;
mod server;

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{DipId, Weight};

pub use dataplane::Policy;
pub use hist::LatencyHistogram;
pub use probe::{LatencyModel, ProbeConfig, ProbeOutcome};
pub use server::{DipSpec, WORK_SCALE};

use dataplane::Dataplane;
use probe::LoadTrack;
use server::DipServer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum InjectedEvent {
    FailDip(DipId),
    RestoreDip(DipId),
    /// Multiply the DIP's capacity by the factor.
    ScaleCapacity(DipId, f64),
    /// Multiply the arrival rate by the factor.
    ScaleTraffic(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterConfig {
    pub dips: Vec<DipSpec>,
    /// Connections per second.
    pub arrival_rate: f64,
    /// Mean work per connection, exponentially distributed.
    pub mean_work: f64,
    pub policy: Policy,
    pub seed: u64,
    pub probe: ProbeConfig,
    /// Static weights for weighted baselines.
    pub weights: Option<BTreeMap<DipId, Weight>>,
    pub record_events: bool,
}

#[derive(Clone, Debug, PartialEq)]
enum Kind {
    Inject(InjectedEvent),
    Departure { server: usize, epoch: u64 },
    Arrival,
}

impl Kind {
    fn rank(&self) -> u8 {
        match self {
            Kind::Inject(_) => 0,
            Kind::Departure { .. } => 1,
            Kind::Arrival => 2,
        }
    }
}

#[derive(Clone, Debug)]
struct Event {
    time: f64,
    seq: u64,
    kind: Kind,
}

impl PartialEq for Event {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Event {
    fn cmp(&self, o: &Self) -> Ordering {
        self.time
            .total_cmp(&o.time)
            .then(self.kind.rank().cmp(&o.kind.rank()))
            .then(self.seq.cmp(&o.seq))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub time: f64,
    pub kind: String,
    pub dip: Option<DipId>,
    pub conn: Option<u64>,
}

/// Per-DIP statistics for one reporting window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DipWindow {
    pub dip: DipId,
    pub weight: Weight,
    pub utilization: f64,
    pub mean_active: f64,
    pub active: usize,
    pub mean_latency_ms: f64,
    pub admitted: u64,
    pub completed: u64,
    pub aborted: u64,
    pub failed: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WorkLedger {
    pub arrived: u128,
    pub completed: u128,
    pub aborted: u128,
    pub in_flight: u128,
}

pub struct Cluster {
    now: f64,
    servers: Vec<DipServer>,
    index: BTreeMap<DipId, usize>,
    dataplane: Dataplane,
    arrival_rate: f64,
    mean_work: f64,
    probe_cfg: ProbeConfig,
    loads: Vec<LoadTrack>,
    rng_arrival: ChaCha8Rng,
    rng_work: ChaCha8Rng,
    rng_probe: ChaCha8Rng,
    events: BinaryHeap<Reverse<Event>>,
    seq: u64,
    next_conn: u64,
    window_start: f64,
    probe_admitted: Vec<u64>,
    hist: LatencyHistogram,
    rejected: u64,
    digest: u64,
    log: Option<Vec<EventRecord>>,
}

fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(k);
    r
}

impl Cluster {
    pub fn new(cfg: ClusterConfig) -> Result<Cluster> {
        if cfg.dips.is_empty() {
            return Err(Error::Config("cluster needs at least one DIP".into()));
        }
        if !(cfg.arrival_rate >= 0.0 && cfg.mean_work > 0.0) {
            return Err(Error::Config("arrival rate and work must be positive".into()));
        }
        let mut index = BTreeMap::new();
        for (i, d) in cfg.dips.iter().enumerate() {
            if !(d.capacity > 0.0) || d.conn_rate.is_some_and(|r| !(r > 0.0)) {
                return Err(Error::Config(format!("{} has non-positive capacity", d.id)));
            }
            if index.insert(d.id, i).is_some() {
                return Err(Error::Config(format!("duplicate {}", d.id)));
            }
        }
        let n = cfg.dips.len();
        let mut c = Cluster {
            now: 0.0,
            servers: cfg.dips.into_iter().map(DipServer::new).collect(),
            index,
            dataplane: Dataplane::new(cfg.policy, n, stream(cfg.seed, 3)),
            arrival_rate: cfg.arrival_rate,
            mean_work: cfg.mean_work,
            probe_cfg: cfg.probe,
            loads: vec![LoadTrack::default(); n],
            rng_arrival: stream(cfg.seed, 1),
            rng_work: stream(cfg.seed, 2),
            rng_probe: stream(cfg.seed, 4),
            events: BinaryHeap::new(),
            seq: 0,
            next_conn: 0,
            window_start: 0.0,
            probe_admitted: vec![0; n],
            hist: LatencyHistogram::default(),
            rejected: 0,
            digest: 0xcbf2_9ce4_8422_2325,
            log: cfg.record_events.then(Vec::new),
        };
        if let Some(w) = cfg.weights {
            c.set_weights(&w)?;
        } else {
            c.retarget_all();
        }
        c.schedule_next_arrival();
        Ok(c)
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn policy(&self) -> Policy {
        self.dataplane.policy
    }

    pub fn dip_ids(&self) -> Vec<DipId> {
        self.index.keys().copied().collect()
    }

    pub fn spec(&self, dip: DipId) -> Result<&DipSpec> {
        Ok(&self.servers[self.idx(dip)?].spec)
    }

    pub fn capacity(&self, dip: DipId) -> Result<f64> {
        Ok(self.servers[self.idx(dip)?].capacity)
    }

    pub fn is_failed(&self, dip: DipId) -> Result<bool> {
        Ok(self.servers[self.idx(dip)?].failed)
    }

    pub fn active(&self, dip: DipId) -> Result<usize> {
        Ok(self.servers[self.idx(dip)?].active())
    }

    pub fn arrival_rate(&self) -> f64 {
        self.arrival_rate
    }

    pub fn mean_work(&self) -> f64 {
        self.mean_work
    }

    pub fn histogram(&self) -> &LatencyHistogram {
        &self.hist
    }

    pub fn rejected(&self) -> u64 {
        self.rejected
    }

    /// FNV-1a digest over every processed event.
    pub fn digest(&self) -> u64 {
        self.digest
    }

    pub fn event_log(&self) -> Option<&[EventRecord]> {
        self.log.as_deref()
    }

    pub fn weights(&self) -> BTreeMap<DipId, Weight> {
        self.index
            .iter()
            .map(|(&d, &i)| (d, Weight::from_micros(self.dataplane.weights[i].min(1_000_000)).unwrap()))
            .collect()
    }

    fn idx(&self, dip: DipId) -> Result<usize> {
        self.index.get(&dip).copied().ok_or(Error::UnknownDip(dip))
    }

    /// Programs the dataplane. DIPs missing from `w` get weight zero.
    pub fn set_weights(&mut self, w: &BTreeMap<DipId, Weight>) -> Result<()> {
        let mut v = vec![0u32; self.servers.len()];
        for (d, wt) in w {
            v[self.idx(*d)?] = wt.micros();
        }
        self.dataplane.set_weights(v);
        self.retarget_all();
        Ok(())
    }

    pub fn schedule(&mut self, at: f64, ev: InjectedEvent) -> Result<()> {
        if at < self.now {
            return Err(Error::State(format!("event at {at} is in the past ({})", self.now)));
        }
        if let InjectedEvent::FailDip(d)
        | InjectedEvent::RestoreDip(d)
        | InjectedEvent::ScaleCapacity(d, _) = ev
        {
            self.idx(d)?;
        }
        self.push(at, Kind::Inject(ev));
        Ok(())
    }

    pub fn inject(&mut self, ev: InjectedEvent) -> Result<()> {
        let now = self.now;
        self.schedule(now, ev)?;
        let t = self.now;
        self.run_until(t);
        Ok(())
    }

    fn push(&mut self, time: f64, kind: Kind) {
        let seq = self.seq;
        self.seq += 1;
        self.events.push(Reverse(Event { time, seq, kind }));
    }

    fn record(&mut self, kind: &str, dip: Option<usize>, conn: Option<u64>) {
        let mut h = self.digest;
        let mut mix = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        mix(&self.now.to_bits().to_le_bytes());
        mix(kind.as_bytes());
        mix(&dip.map_or(u64::MAX, |d| d as u64).to_le_bytes());
        mix(&conn.unwrap_or(u64::MAX).to_le_bytes());
        self.digest = h;
        if let Some(log) = self.log.as_mut() {
            log.push(EventRecord {
                time: self.now,
                kind: kind.to_string(),
                dip: dip.map(|i| self.servers[i].spec.id),
                conn,
            });
        }
    }

    fn schedule_next_arrival(&mut self) {
        if self.arrival_rate <= 0.0 {
            return;
        }
        let gap = Exp::new(self.arrival_rate).unwrap().sample(&mut self.rng_arrival);
        let t = self.now + gap;
        self.push(t, Kind::Arrival);
    }

    fn schedule_departure(&mut self, i: usize) {
        if let Some(t) = self.servers[i].next_departure() {
            let epoch = self.servers[i].epoch;
            self.push(t.max(self.now), Kind::Departure { server: i, epoch });
        }
    }

    /// Processes every event with time <= `t_end`.
    pub fn run_until(&mut self, t_end: f64) {
        while let Some(Reverse(top)) = self.events.peek() {
            if top.time > t_end {
                break;
            }
            let Reverse(ev) = self.events.pop().unwrap();
            self.now = ev.time;
            match ev.kind {
                Kind::Arrival => self.on_arrival(),
                Kind::Departure { server, epoch } => {
                    if self.servers[server].epoch == epoch {
                        let now = self.now;
                        if let Some((id, ms)) = self.servers[server].depart(now) {
                            self.hist.record(ms);
                            self.record("depart", Some(server), Some(id));
                        }
                        self.schedule_departure(server);
                    }
                }
                Kind::Inject(e) => self.on_inject(e),
            }
        }
        if t_end > self.now {
            self.now = t_end;
        }
        let now = self.now;
        for s in &mut self.servers {
            s.advance(now);
        }
    }

    fn on_arrival(&mut self) {
        let id = self.next_conn;
        self.next_conn += 1;
        let work_units = Exp::new(1.0 / self.mean_work)
            .unwrap()
            .sample(&mut self.rng_work);
        let work = ((work_units * WORK_SCALE).round() as u64).max(1);
        match self.dataplane.pick(&self.servers, id) {
            Some(i) => {
                let now = self.now;
                self.servers[i].admit(now, id, work);
                self.probe_admitted[i] += 1;
                self.record("arrive", Some(i), Some(id));
                self.schedule_departure(i);
            }
            None => {
                self.rejected += 1;
                self.record("reject", None, Some(id));
            }
        }
        self.schedule_next_arrival();
    }

    fn on_inject(&mut self, e: InjectedEvent) {
        let now = self.now;
        match e {
            InjectedEvent::FailDip(d) => {
                let i = self.index[&d];
                self.servers[i].fail(now);
                self.record("fail", Some(i), None);
            }
            InjectedEvent::RestoreDip(d) => {
                let i = self.index[&d];
                self.servers[i].restore(now);
                self.record("restore", Some(i), None);
            }
            InjectedEvent::ScaleCapacity(d, f) => {
                let i = self.index[&d];
                let c = self.servers[i].capacity * f;
                self.servers[i].set_capacity(now, c);
                self.record("capacity", Some(i), None);
                self.schedule_departure(i);
            }
            InjectedEvent::ScaleTraffic(f) => {
                self.arrival_rate *= f;
                self.record("traffic", None, None);
            }
        }
        self.retarget_all();
    }

    fn tau(&self, i: usize) -> f64 {
        if self.probe_cfg.lag {
            self.mean_work / self.servers[i].spec.single_rate()
        } else {
            0.0
        }
    }

    /// Expected share of arrivals per server under the current policy.
    fn static_shares(&self) -> Vec<f64> {
        let n = self.servers.len();
        let live: Vec<bool> = self.servers.iter().map(|s| !s.failed).collect();
        let n_live = live.iter().filter(|&&l| l).count();
        let mut out = vec![0.0; n];
        if n_live == 0 {
            return out;
        }
        let w = &self.dataplane.weights;
        let wsum: u64 = (0..n).filter(|&i| live[i]).map(|i| w[i] as u64).sum();
        for i in 0..n {
            if !live[i] {
                continue;
            }
            out[i] = if self.dataplane.policy.is_weighted() && wsum > 0 {
                w[i] as f64 / wsum as f64
            } else {
                1.0 / n_live as f64
            };
        }
        out
    }

    fn rho_target(&self, i: usize, share: f64) -> f64 {
        share * self.arrival_rate * self.mean_work / self.servers[i].capacity
    }

    fn retarget_all(&mut self) {
        let shares = self.static_shares();
        for i in 0..self.servers.len() {
            let target = self.rho_target(i, shares[i]);
            let tau = self.tau(i);
            self.loads[i].retarget(self.now, target, tau);
        }
    }

    /// Utilization the probe model sees for `dip` right now.
    pub fn model_utilization(&self, dip: DipId) -> Result<f64> {
        let i = self.idx(dip)?;
        if self.dataplane.policy.is_adaptive() {
            let total: u64 = self.probe_admitted.iter().sum();
            if total == 0 {
                return Ok(0.0);
            }
            let share = self.probe_admitted[i] as f64 / total as f64;
            return Ok(self.rho_target(i, share));
        }
        Ok(self.loads[i].at(self.now, self.tau(i)))
    }

    /// Latency probe: `n_requests` noisy requests averaged.
    pub fn probe(&mut self, dip: DipId) -> Result<ProbeOutcome> {
        let i = self.idx(dip)?;
        if self.servers[i].failed {
            return Ok(ProbeOutcome::Failed);
        }
        let rho = self.model_utilization(dip)?;
        let spec = &self.servers[i].spec;
        let rate = spec.conn_rate.unwrap_or(f64::INFINITY).min(self.servers[i].capacity);
        let service_ms = 1000.0 * self.mean_work / rate;
        let servers = self.servers[i].capacity / rate;
        let mean = self.probe_cfg.model.latency(spec.base_latency_ms, service_ms, rho, servers);
        let n = self.probe_cfg.n_requests.max(1);
        let mut acc = 0.0;
        for _ in 0..n {
            let z: f64 = StandardNormal.sample(&mut self.rng_probe);
            acc += mean * (1.0 + self.probe_cfg.noise_frac * z);
        }
        let measured = (acc / n as f64).max(1e-6);
        Ok(ProbeOutcome::Ok {
            mean_latency_ms: measured,
            dropped: rho >= self.probe_cfg.drop_util,
            utilization: rho,
        })
    }

    /// Call once per probe period, after probing, so adaptive policies
    /// measure their split over the most recent period.
    pub fn reset_probe_window(&mut self) {
        self.probe_admitted.iter_mut().for_each(|c| *c = 0);
    }

    /// Statistics since the previous call.
    pub fn take_window(&mut self) -> Vec<DipWindow> {
        let span = (self.now - self.window_start).max(1e-12);
        self.window_start = self.now;
        let weights = self.weights();
        let mut out = Vec::with_capacity(self.servers.len());
        for s in &mut self.servers {
            let w = s.take_window();
            out.push(DipWindow {
                dip: s.spec.id,
                weight: weights[&s.spec.id],
                utilization: w.busy / span,
                mean_active: w.active / span,
                active: s.active(),
                mean_latency_ms: if w.completed > 0 {
                    w.latency_sum_ms / w.completed as f64
                } else {
                    0.0
                },
                admitted: w.admitted,
                completed: w.completed,
                aborted: w.aborted,
                failed: s.failed,
            });
        }
        out
    }

    /// Work totals for one DIP, in `WORK_SCALE` units.
    pub fn dip_ledger(&self, dip: DipId) -> Result<WorkLedger> {
        let s = &self.servers[self.idx(dip)?];
        Ok(WorkLedger {
            arrived: s.arrived_work,
            completed: s.completed_work,
            aborted: s.aborted_work,
            in_flight: s.in_flight_work(),
        })
    }

    pub fn work_ledger(&self) -> WorkLedger {
        let mut l = WorkLedger {
            arrived: 0,
            completed: 0,
            aborted: 0,
            in_flight: 0,
        };
        for s in &self.servers {
            l.arrived += s.arrived_work;
            l.completed += s.completed_work;
            l.aborted += s.aborted_work;
            l.in_flight += s.in_flight_work();
        }
        l
    }
}
