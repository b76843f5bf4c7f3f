//! Versioned CSV metrics: per-episode and evaluation records, per-update
//! mixture traces and cross-seed aggregates.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::cpd::{EpisodeStats, UpdateRecord};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    /// A training episode.
    Episode,
    /// Local policy for sub-domain `n` evaluated on `n`.
    EvalLocal,
    /// The final single policy evaluated on sub-domain `n`.
    EvalGlobal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub schema: u32,
    pub kind: RecordKind,
    pub samples: u64,
    pub episode: u64,
    pub visit: usize,
    pub subdomain: usize,
    pub agent: usize,
    #[serde(rename = "return")]
    pub ret: f64,
    pub updates: usize,
    pub m_raw: f64,
    pub m_eff: f64,
    pub rl_loss: f64,
    pub mi_loss: f64,
    pub critic_loss: f64,
    pub alpha: f64,
}

impl MetricsRecord {
    pub fn episode(ev: &EpisodeStats) -> Self {
        Self {
            schema: SCHEMA_VERSION,
            kind: RecordKind::Episode,
            samples: ev.samples,
            episode: ev.episode,
            visit: ev.visit,
            subdomain: ev.subdomain,
            agent: ev.agent,
            ret: ev.ret,
            updates: ev.updates,
            m_raw: ev.m_raw,
            m_eff: ev.m_eff,
            rl_loss: ev.rl_loss,
            mi_loss: ev.mi_loss,
            critic_loss: ev.critic_loss,
            alpha: ev.alpha,
        }
    }

    pub fn eval(kind: RecordKind, samples: u64, episode: u64, subdomain: usize, ret: f64) -> Self {
        Self {
            schema: SCHEMA_VERSION,
            kind,
            samples,
            episode,
            visit: 0,
            subdomain,
            agent: 0,
            ret,
            updates: 0,
            m_raw: f64::NAN,
            m_eff: f64::NAN,
            rl_loss: f64::NAN,
            mi_loss: f64::NAN,
            critic_loss: f64::NAN,
            alpha: f64::NAN,
        }
    }
}

/// One gradient update's mixing diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureRow {
    pub schema: u32,
    pub samples: u64,
    pub visit: usize,
    pub subdomain: usize,
    pub m_raw: f64,
    pub m_eff: f64,
    pub std_err: f64,
    pub rl_loss: f64,
    pub mi_loss: f64,
    pub critic_loss: f64,
    pub alpha: f64,
    pub distill_terms: usize,
}

impl From<&UpdateRecord> for MixtureRow {
    fn from(r: &UpdateRecord) -> Self {
        let s = &r.stats;
        Self {
            schema: SCHEMA_VERSION,
            samples: r.samples,
            visit: r.visit,
            subdomain: r.subdomain,
            m_raw: s.m.raw,
            m_eff: s.m.effective,
            std_err: s.m.std_err,
            rl_loss: s.rl_loss,
            mi_loss: s.mi_loss,
            critic_loss: r.critic_loss,
            alpha: s.alpha,
            distill_terms: s.distill_terms,
        }
    }
}

/// Mean and sample variance of one series across seeds at a sample count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub schema: u32,
    pub series: String,
    pub samples: u64,
    pub n: usize,
    pub mean: f64,
    pub var: f64,
}

/// Wall-clock time at each evaluation; kept apart so metrics stay reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WallClockRow {
    pub samples: u64,
    pub seconds: f64,
}

/// Rows carrying a schema column.
pub trait Versioned {
    fn schema(&self) -> u32;
}

macro_rules! versioned {
    ($($t:ty),*) => {
        $(impl Versioned for $t {
            fn schema(&self) -> u32 {
                self.schema
            }
        })*
    };
}

versioned!(MetricsRecord, MixtureRow, AggregateRow);

pub fn write_rows<W: Write, T: Serialize>(w: W, rows: &[T]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r).map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Metrics(format!("{other:?}")),
    }
}

fn header_of<T: Serialize + Default>() -> Vec<String> {
    let mut wr = csv::Writer::from_writer(Vec::new());
    wr.serialize(T::default()).expect("in-memory write");
    let bytes = wr.into_inner().expect("in-memory flush");
    let text = String::from_utf8(bytes).expect("ascii header");
    text.lines().next().unwrap_or("").split(',').map(str::to_string).collect()
}

/// Read rows, rejecting a header or schema version other than this build's.
pub fn read_rows<R: Read, T: DeserializeOwned + Serialize + Default + Versioned>(r: R) -> Result<Vec<T>> {
    let mut rd = csv::ReaderBuilder::new().from_reader(r);
    let header: Vec<String> = rd.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    let expected = header_of::<T>();
    if header != expected {
        return Err(Error::Metrics(format!("unexpected header `{}`, expected `{}`", header.join(","), expected.join(","))));
    }
    let mut out = Vec::new();
    for (i, row) in rd.deserialize::<T>().enumerate() {
        let row = row.map_err(|e| Error::Metrics(format!("row {}: {e}", i + 2)))?;
        if row.schema() != SCHEMA_VERSION {
            return Err(Error::Metrics(format!("row {}: schema version {}, expected {SCHEMA_VERSION}", i + 2, row.schema())));
        }
        out.push(row);
    }
    Ok(out)
}

impl Default for MetricsRecord {
    fn default() -> Self {
        Self::eval(RecordKind::Episode, 0, 0, 0, 0.0)
    }
}

impl Default for MixtureRow {
    fn default() -> Self {
        Self { schema: SCHEMA_VERSION, samples: 0, visit: 0, subdomain: 0, m_raw: 0.0, m_eff: 0.0, std_err: 0.0, rl_loss: 0.0, mi_loss: 0.0, critic_loss: 0.0, alpha: 0.0, distill_terms: 0 }
    }
}

impl Default for AggregateRow {
    fn default() -> Self {
        Self { schema: SCHEMA_VERSION, series: String::new(), samples: 0, n: 0, mean: 0.0, var: 0.0 }
    }
}

pub fn read_metrics<R: Read>(r: R) -> Result<Vec<MetricsRecord>> {
    let rows: Vec<MetricsRecord> = read_rows(r)?;
    if let Some(w) = rows.windows(2).find(|w| w[1].samples < w[0].samples) {
        return Err(Error::Metrics(format!("sample count decreases from {} to {}", w[0].samples, w[1].samples)));
    }
    Ok(rows)
}

/// `(samples, mean over sub-domains)` for each evaluation of `kind`.
pub fn eval_curve(records: &[MetricsRecord], kind: RecordKind) -> Vec<(u64, f64)> {
    let mut by: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.kind == kind) {
        by.entry(r.samples).or_default().push(r.ret);
    }
    by.into_iter().map(|(s, v)| (s, v.iter().sum::<f64>() / v.len() as f64)).collect()
}

/// Per-sub-domain returns of the last evaluation of `kind`.
pub fn final_returns(records: &[MetricsRecord], kind: RecordKind) -> Vec<f64> {
    let Some(last) = records.iter().filter(|r| r.kind == kind).map(|r| r.samples).max() else {
        return Vec::new();
    };
    let mut rows: Vec<&MetricsRecord> = records.iter().filter(|r| r.kind == kind && r.samples == last).collect();
    rows.sort_by_key(|r| r.subdomain);
    rows.iter().map(|r| r.ret).collect()
}

/// First sample count where the curve reaches `start + frac * (end - start)`,
/// with `start` and `end` the curve's first and last values.
pub fn samples_to_fraction(curve: &[(u64, f64)], frac: f64) -> Option<u64> {
    let (first, last) = (curve.first()?.1, curve.last()?.1);
    let target = first + frac * (last - first);
    curve.iter().find(|(_, v)| *v >= target).map(|(s, _)| *s)
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var)
}

/// Cross-seed mean and variance per series and sample count.
///
/// Series: `return` and `m_eff` from training episodes, `eval_local` and
/// `eval_global` (averaged over sub-domains), and `eval_local/<n>`,
/// `eval_global/<n>` per sub-domain. NaN entries are skipped.
pub fn aggregate(per_seed: &[Vec<MetricsRecord>]) -> Vec<AggregateRow> {
    let mut acc: BTreeMap<(String, u64), Vec<f64>> = BTreeMap::new();
    let mut push = |series: String, samples: u64, v: f64| {
        if !v.is_nan() {
            acc.entry((series, samples)).or_default().push(v);
        }
    };
    for records in per_seed {
        for r in records.iter().filter(|r| r.kind == RecordKind::Episode) {
            push("return".into(), r.samples, r.ret);
            push("m_eff".into(), r.samples, r.m_eff);
        }
        for (kind, name) in [(RecordKind::EvalLocal, "eval_local"), (RecordKind::EvalGlobal, "eval_global")] {
            for (s, v) in eval_curve(records, kind) {
                push(name.into(), s, v);
            }
            for r in records.iter().filter(|r| r.kind == kind) {
                push(format!("{name}/{}", r.subdomain), r.samples, r.ret);
            }
        }
    }
    acc.into_iter()
        .map(|((series, samples), v)| {
            let (mean, var) = mean_var(&v);
            AggregateRow { schema: SCHEMA_VERSION, series, samples, n: v.len(), mean, var }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(kind: RecordKind, samples: u64, sub: usize, ret: f64) -> MetricsRecord {
        let mut r = MetricsRecord::eval(kind, samples, samples / 10, sub, ret);
        if kind == RecordKind::Episode {
            r.m_eff = ret / 100.0;
        }
        r
    }

    #[test]
    fn round_trip_including_nan() {
        let rows = vec![rec(RecordKind::Episode, 150, 1, -300.5), rec(RecordKind::EvalLocal, 150, 2, -1.0 / 3.0)];
        let mut buf = Vec::new();
        write_rows(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("schema,kind,samples,episode,visit,subdomain,agent,return,"));
        assert!(text.contains("eval_local"));
        let back = read_metrics(&buf[..]).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].ret, -1.0 / 3.0);
        assert!(back[1].m_raw.is_nan());
    }

    #[test]
    fn schema_mismatch_is_reported() {
        let mut buf = Vec::new();
        write_rows(&mut buf, &[rec(RecordKind::Episode, 1, 1, 0.0)]).unwrap();
        let text = String::from_utf8(buf).unwrap().replacen("\n1,", "\n2,", 1);
        let err = read_metrics(text.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("schema version 2") && err.contains("expected 1"), "{err}");
        assert!(read_metrics("a,b\n1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn decreasing_samples_are_rejected() {
        let mut buf = Vec::new();
        write_rows(&mut buf, &[rec(RecordKind::Episode, 10, 1, 0.0), rec(RecordKind::Episode, 5, 1, 0.0)]).unwrap();
        assert!(read_metrics(&buf[..]).is_err());
    }

    #[test]
    fn mixture_rows_round_trip() {
        let rows = vec![MixtureRow { samples: 3, m_raw: -0.2, std_err: 0.01, ..Default::default() }];
        let mut buf = Vec::new();
        write_rows(&mut buf, &rows).unwrap();
        assert_eq!(read_rows::<_, MixtureRow>(&buf[..]).unwrap(), rows);
        assert!(read_rows::<_, AggregateRow>(&buf[..]).is_err());
    }

    #[test]
    fn aggregate_matches_recomputed_means() {
        let seeds: Vec<Vec<MetricsRecord>> = (0..5)
            .map(|s| {
                let s = s as f64;
                vec![
                    rec(RecordKind::Episode, 150, 1, -100.0 - s),
                    rec(RecordKind::EvalLocal, 150, 1, -50.0 * s),
                    rec(RecordKind::EvalLocal, 150, 2, -10.0 + s * s),
                    rec(RecordKind::Episode, 300, 2, -90.0 + 2.0 * s),
                ]
            })
            .collect();
        let agg = aggregate(&seeds);
        let get = |name: &str, samples: u64| agg.iter().find(|r| r.series == name && r.samples == samples).unwrap();
        let r = get("return", 150);
        assert_eq!(r.n, 5);
        assert!((r.mean - (-102.0)).abs() < 1e-12);
        assert!((r.var - 2.5).abs() < 1e-12);
        // eval_local: per seed mean of (-50 s, -10 + s^2)
        let expect: f64 = (0..5).map(|s| (-50.0 * s as f64 + (-10.0 + (s * s) as f64)) / 2.0).sum::<f64>() / 5.0;
        assert!((get("eval_local", 150).mean - expect).abs() < 1e-12);
        assert_eq!(get("eval_local/2", 150).mean, (0..5).map(|s| -10.0 + (s * s) as f64).sum::<f64>() / 5.0);
        assert!(agg.iter().all(|r| r.series != "eval_global"));
    }

    #[test]
    fn curve_helpers() {
        let recs = vec![rec(RecordKind::EvalLocal, 100, 1, -10.0), rec(RecordKind::EvalLocal, 100, 2, -20.0), rec(RecordKind::EvalLocal, 200, 2, -2.0), rec(RecordKind::EvalLocal, 200, 1, -4.0)];
        assert_eq!(eval_curve(&recs, RecordKind::EvalLocal), vec![(100, -15.0), (200, -3.0)]);
        assert_eq!(final_returns(&recs, RecordKind::EvalLocal), vec![-4.0, -2.0]);
        assert!(final_returns(&recs, RecordKind::EvalGlobal).is_empty());
        let curve = [(0, -100.0), (10, -60.0), (20, -15.0), (30, -10.0)];
        assert_eq!(samples_to_fraction(&curve, 0.9), Some(20));
        assert_eq!(samples_to_fraction(&curve, 0.0), Some(0));
        assert_eq!(samples_to_fraction(&[], 0.9), None);
    }
}
