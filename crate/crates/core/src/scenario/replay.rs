//! Store-log replay and summary verification for finished runs.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::controller::{Controller, ControllerConfig, StoreEntry, DECISION_HEADER, STORE_HEADER};
use crate::error::{Error, Result};
use crate::scenario::{EventKind, Scenario};
use crate::types::{DipId, VipId, Weight};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReplayReport {
    pub ticks: usize,
    pub decisions: usize,
    /// The log ended mid-line or mid-tick; replay stopped at the last whole tick.
    pub truncated: bool,
    pub last_tick: Option<f64>,
}

/// Parses a store log, tolerating a cut-off tail: a last line without its
/// newline is dropped. Malformed lines elsewhere are errors.
pub fn parse_store_lenient(text: &str) -> Result<(Vec<StoreEntry>, bool)> {
    let mut lines: Vec<&str> = text.split_inclusive('\n').collect();
    let mut truncated = false;
    if lines.last().is_some_and(|l| !l.ends_with('\n')) {
        lines.pop();
        truncated = true;
    }
    let mut it = lines.into_iter();
    match it.next() {
        Some(h) if h.trim_end() == STORE_HEADER => {}
        None if truncated => return Ok((vec![], true)),
        _ => return Err(Error::Parse("store log header missing".into())),
    }
    let mut out = Vec::new();
    for (n, line) in it.enumerate() {
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        out.push(parse_entry(line).map_err(|m| Error::Parse(format!("store line {}: {m}", n + 2)))?);
    }
    Ok((out, truncated))
}

fn parse_entry(line: &str) -> std::result::Result<StoreEntry, String> {
    let f: Vec<&str> = line.split(',').collect();
    if f.len() != 7 {
        return Err("expected 7 fields".into());
    }
    let flag = |s: &str, what: &str| match s {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(format!("bad {what}")),
    };
    let weight: f64 = f[2].parse().map_err(|_| "bad weight")?;
    Ok(StoreEntry {
        vip: VipId(f[0].parse().map_err(|_| "bad vip")?),
        dip: DipId(f[1].parse().map_err(|_| "bad dip")?),
        weight: Weight::from_micros((weight * 1e6).round() as u32).map_err(|_| "bad weight")?,
        latency_ms: if f[3].is_empty() {
            None
        } else {
            Some(f[3].parse().map_err(|_| "bad latency")?)
        },
        dropped: flag(f[4], "dropped")?,
        usable: flag(f[5], "usable")?,
        time: f[6].parse().map_err(|_| "bad time")?,
    })
}

fn store_line(e: &StoreEntry) -> String {
    let lat = e.latency_ms.map(|l| l.to_string()).unwrap_or_default();
    format!(
        "{},{},{},{},{},{},{}",
        e.vip.0, e.dip.0, e.weight, lat, e.dropped as u8, e.usable as u8, e.time
    )
}

/// Re-runs the controller on a store log and checks every decision against
/// the recorded trace, tick by tick. The first mismatch is returned as a
/// `ReplayDivergence` naming its tick.
pub fn replay(cfg: &ControllerConfig, store_csv: &str, decisions_csv: &str) -> Result<ReplayReport> {
    let (entries, mut truncated) = parse_store_lenient(store_csv)?;
    let mut recorded: BTreeMap<VipId, Vec<(String, String)>> = BTreeMap::new();
    let mut lines = decisions_csv.lines();
    if lines.next().map(str::trim_end) != Some(DECISION_HEADER) {
        return Err(Error::Parse("decision log header missing".into()));
    }
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let mut f = line.splitn(3, ',');
        let (Some(time), Some(vip)) = (f.next(), f.next()) else {
            return Err(Error::Parse(format!("bad decision line `{line}`")));
        };
        let vip = VipId(vip.parse().map_err(|_| Error::Parse(format!("bad decision line `{line}`")))?);
        recorded.entry(vip).or_default().push((time.to_string(), line.to_string()));
    }

    let mut by_vip: BTreeMap<VipId, Vec<StoreEntry>> = BTreeMap::new();
    for e in entries {
        by_vip.entry(e.vip).or_default().push(e);
    }
    let mut report = ReplayReport { ticks: 0, decisions: 0, truncated: false, last_tick: None };
    for (vip, entries) in by_vip {
        // Ticks are runs of equal time; every tick probes the same DIP set.
        let mut ticks: Vec<Vec<StoreEntry>> = Vec::new();
        for e in entries {
            match ticks.last_mut() {
                Some(t) if t[0].time == e.time => t.push(e),
                _ => ticks.push(vec![e]),
            }
        }
        let dips: Vec<DipId> = ticks.first().map(|t| t.iter().map(|e| e.dip).collect()).unwrap_or_default();
        if ticks.last().is_some_and(|t| t.len() < dips.len()) {
            ticks.pop();
            truncated = true;
        }
        let mut c = Controller::new(cfg.clone())?;
        c.add_vip(vip, &dips);
        let rec = recorded.remove(&vip).unwrap_or_default();
        let mut cursor = 0;
        for tick in &ticks {
            let now = tick[0].time;
            let tick_dips: Vec<DipId> = tick.iter().map(|e| e.dip).collect();
            if tick_dips != dips {
                return Err(diverged(now, &format!("dips {dips:?}"), &format!("dips {tick_dips:?}")));
            }
            let mut fed: Vec<StoreEntry> = tick
                .iter()
                .map(|e| StoreEntry { usable: false, ..e.clone() })
                .collect();
            let programmed = c.vip(vip).map(|v| v.programmed.clone()).unwrap_or_default();
            for e in tick {
                let w = programmed.get(&e.dip).copied().unwrap_or(Weight::ZERO);
                if w != e.weight {
                    let mut ours = e.clone();
                    ours.weight = w;
                    return Err(diverged(now, &store_line(e), &store_line(&ours)));
                }
            }
            let before = c.trace().len();
            c.on_tick(vip, now, &mut fed)?;
            for (a, b) in tick.iter().zip(&fed) {
                if a.usable != b.usable {
                    return Err(diverged(now, &store_line(a), &store_line(b)));
                }
            }
            let stamp = now.to_string();
            let ours: Vec<String> = c.trace()[before..].iter().map(|d| d.to_string()).collect();
            let mut theirs = Vec::new();
            while cursor < rec.len() && rec[cursor].0 == stamp {
                theirs.push(rec[cursor].1.clone());
                cursor += 1;
            }
            if let Some(i) = (0..ours.len().max(theirs.len())).find(|&i| ours.get(i) != theirs.get(i)) {
                let show = |v: Option<&String>| v.cloned().unwrap_or_else(|| "<none>".into());
                return Err(diverged(now, &show(theirs.get(i)), &show(ours.get(i))));
            }
            report.decisions += ours.len();
            report.ticks += 1;
            report.last_tick = Some(report.last_tick.map_or(now, |t: f64| t.max(now)));
        }
        // Recorded decisions past the last replayed tick mean the log was
        // cut at a tick boundary.
        if cursor < rec.len() {
            truncated = true;
        }
    }
    report.truncated = truncated;
    Ok(report)
}

fn diverged(time: f64, expected: &str, got: &str) -> Error {
    Error::ReplayDivergence { time, expected: expected.into(), got: got.into() }
}

fn read(dir: &Path, name: &str) -> Result<String> {
    let p = dir.join(name);
    std::fs::read_to_string(&p).map_err(|e| Error::Io(format!("{}: {e}", p.display())))
}

/// Replays a run directory written by `RunOutput::write`.
pub fn replay_dir(dir: &Path) -> Result<ReplayReport> {
    let sc = Scenario::from_toml(&read(dir, "scenario.toml")?)?;
    replay(&sc.controller, &read(dir, "store.csv")?, &read(dir, "decisions.csv")?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Mismatch {
    pub field: String,
    pub reported: f64,
    pub recomputed: f64,
}

/// Recomputes the summary of a run directory from its metrics and histogram
/// CSVs and returns every field that disagrees with summary.csv.
pub fn verify_dir(dir: &Path) -> Result<Vec<Mismatch>> {
    let sc = Scenario::from_toml(&read(dir, "scenario.toml")?)?;
    let summary = parse_summary(&read(dir, "summary.csv")?)?;
    let classes = sc.class_of();
    let failed_at = failure_intervals(&sc);

    let metrics = read(dir, "metrics.csv")?;
    let mut lines = metrics.lines();
    if lines.next() != Some("time,dip,weight,util,active,mean_latency_ms,completed,aborted") {
        return Err(Error::Parse("metrics header".into()));
    }
    let (mut completed, mut aborted, mut lat_sum) = (0u64, 0u64, 0.0);
    let mut util: BTreeMap<String, (f64, u64)> = BTreeMap::new();
    for (n, line) in lines.enumerate() {
        let bad = || Error::Parse(format!("metrics line {}", n + 2));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(bad());
        }
        let time: f64 = f[0].parse().map_err(|_| bad())?;
        let dip = DipId(f[1].parse::<u32>().map_err(|_| bad())?.checked_sub(1).ok_or_else(bad)?);
        let u: f64 = f[3].parse().map_err(|_| bad())?;
        let mean: f64 = f[5].parse().map_err(|_| bad())?;
        let c: u64 = f[6].parse().map_err(|_| bad())?;
        let a: u64 = f[7].parse().map_err(|_| bad())?;
        if time <= sc.warmup + 1e-9 {
            continue;
        }
        completed += c;
        aborted += a;
        lat_sum += c as f64 * mean;
        let down = failed_at.get(&dip).is_some_and(|iv| iv.iter().any(|&(s, e)| time >= s && time < e));
        if !down {
            let class = classes.get(&dip).ok_or_else(bad)?;
            let e = util.entry(class.clone()).or_default();
            e.0 += u;
            e.1 += 1;
        }
    }
    let class_util: Vec<f64> = util.values().map(|&(s, n)| if n > 0 { s / n as f64 } else { 0.0 }).collect();
    let spread = if class_util.is_empty() {
        0.0
    } else {
        class_util.iter().cloned().fold(f64::MIN, f64::max) - class_util.iter().cloned().fold(f64::MAX, f64::min)
    };

    let hist = read(dir, "latency_hist.csv")?;
    let mut buckets = Vec::new();
    let mut lines = hist.lines();
    if lines.next() != Some("upper_ms,count") {
        return Err(Error::Parse("histogram header".into()));
    }
    for (n, line) in lines.enumerate() {
        let bad = || Error::Parse(format!("histogram line {}", n + 2));
        let (e, c) = line.split_once(',').ok_or_else(bad)?;
        buckets.push((e.parse::<f64>().map_err(|_| bad())?, c.parse::<u64>().map_err(|_| bad())?));
    }
    let total: u64 = buckets.iter().map(|b| b.1).sum();
    let pct = |p: f64| {
        if total == 0 {
            return 0.0;
        }
        let rank = ((p / 100.0) * total as f64).ceil().max(1.0) as u64;
        let mut seen = 0;
        for &(e, c) in &buckets {
            seen += c;
            if seen >= rank {
                return e;
            }
        }
        buckets.last().map_or(0.0, |b| b.0)
    };

    let mean = if completed == 0 { 0.0 } else { lat_sum / completed as f64 };
    let checks = [
        ("completed", completed as f64, 0.0),
        ("histogram_total", total as f64, 0.0),
        ("aborted", aborted as f64, 0.0),
        ("mean_ms", mean, 1e-5),
        ("p50_ms", pct(50.0), 1e-6),
        ("p95_ms", pct(95.0), 1e-6),
        ("p99_ms", pct(99.0), 1e-6),
        ("util_spread", spread, 1e-5),
    ];
    let mut out = Vec::new();
    for (field, recomputed, rel) in checks {
        let key = if field == "histogram_total" { "completed" } else { field };
        let reported = summary.get(key).copied().ok_or_else(|| Error::Parse(format!("summary lacks {key}")))?;
        if (reported - recomputed).abs() > rel * reported.abs().max(1.0) + 1e-6 {
            out.push(Mismatch { field: field.into(), reported, recomputed });
        }
    }
    Ok(out)
}

fn parse_summary(text: &str) -> Result<BTreeMap<String, f64>> {
    let mut lines = text.lines();
    let (Some(head), Some(row)) = (lines.next(), lines.next()) else {
        return Err(Error::Parse("summary.csv needs a header and one row".into()));
    };
    Ok(head
        .split(',')
        .zip(row.split(','))
        .filter_map(|(k, v)| v.parse::<f64>().ok().map(|v| (k.to_string(), v)))
        .collect())
}

/// Per-DIP [fail, restore) windows from the scenario's events.
fn failure_intervals(sc: &Scenario) -> BTreeMap<DipId, Vec<(f64, f64)>> {
    let classes = sc.class_of();
    let mut evs: Vec<(f64, bool, DipId)> = Vec::new();
    for e in &sc.events {
        let up = match e.kind {
            EventKind::Fail => false,
            EventKind::Restore => true,
            _ => continue,
        };
        let mut targets: Vec<DipId> = e.dips.iter().map(|&d| DipId(d - 1)).collect();
        if let Some(c) = &e.class {
            targets.extend(classes.iter().filter(|(_, k)| *k == c).map(|(d, _)| *d));
        }
        evs.extend(targets.into_iter().map(|d| (e.at, up, d)));
    }
    evs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: BTreeMap<DipId, Vec<(f64, f64)>> = BTreeMap::new();
    for (t, up, d) in evs {
        let iv = out.entry(d).or_default();
        let open = iv.last().is_some_and(|l| l.1.is_infinite());
        if up && open {
            iv.last_mut().unwrap().1 = t;
        } else if !up && !open {
            iv.push((t, f64::INFINITY));
        }
    }
    out
}
