use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::types::{DipId, StoreRecord, VipId, Weight};

/// One probe result as persisted. `latency_ms` is `None` for a failed probe.
#[derive(Clone, Debug, PartialEq)]
pub struct StoreEntry {
    pub vip: VipId,
    pub dip: DipId,
    pub weight: Weight,
    pub latency_ms: Option<f64>,
    pub dropped: bool,
    pub usable: bool,
    pub time: f64,
}

pub const STORE_HEADER: &str = "vip,dip,weight,latency_ms,dropped,usable,time";

/// Append-only latency log keyed by VIP.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LatencyStore {
    entries: BTreeMap<VipId, Vec<StoreEntry>>,
    last: BTreeMap<(VipId, DipId), f64>,
}

impl LatencyStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rejects an entry older than the last one for the same DIP.
    pub fn append(&mut self, e: StoreEntry) -> Result<()> {
        let key = (e.vip, e.dip);
        if let Some(&t) = self.last.get(&key) {
            if !(e.time >= t) {
                return Err(Error::Invariant(format!(
                    "{} {} record at {} after {t}",
                    e.vip, e.dip, e.time
                )));
            }
        }
        self.last.insert(key, e.time);
        self.entries.entry(e.vip).or_default().push(e);
        Ok(())
    }

    pub fn entries(&self, vip: VipId) -> &[StoreEntry] {
        self.entries.get(&vip).map_or(&[], |v| v.as_slice())
    }

    pub fn records(&self, vip: VipId) -> Vec<StoreRecord> {
        self.entries(vip)
            .iter()
            .map(|e| (e.dip, e.latency_ms, e.time))
            .collect()
    }

    pub fn vips(&self) -> impl Iterator<Item = VipId> + '_ {
        self.entries.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(STORE_HEADER);
        s.push('\n');
        for e in self.entries.values().flatten() {
            let lat = e.latency_ms.map(|l| l.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                e.vip.0, e.dip.0, e.weight, lat, e.dropped as u8, e.usable as u8, e.time
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<LatencyStore> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == STORE_HEADER => {}
            _ => return Err(Error::Parse("store log header missing".into())),
        }
        let mut store = LatencyStore::new();
        for (n, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(Error::Parse(format!("store line {}: expected 7 fields", n + 2)));
            }
            let bad = |what: &str| Error::Parse(format!("store line {}: bad {what}", n + 2));
            let weight: f64 = f[2].parse().map_err(|_| bad("weight"))?;
            let micros = (weight * 1e6).round();
            store.append(StoreEntry {
                vip: VipId(f[0].parse().map_err(|_| bad("vip"))?),
                dip: DipId(f[1].parse().map_err(|_| bad("dip"))?),
                weight: Weight::from_micros(micros as u32).map_err(|_| bad("weight"))?,
                latency_ms: if f[3].is_empty() {
                    None
                } else {
                    Some(f[3].parse().map_err(|_| bad("latency"))?)
                },
                dropped: f[4] == "1",
                usable: f[5] == "1",
                time: f[6].parse().map_err(|_| bad("time"))?,
            })?;
        }
        Ok(store)
    }
}
