//! The cell archive: one record per cell holding the best known trajectory to
//! it, visit counters, and everything needed to return there.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};
use std::str::FromStr;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use indexmap::IndexMap;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cellmap::{downscale, CellError, CellKey, DownscaleParams};
use crate::env::{EnvSnapshot, GrayFrame};

pub const ARCHIVE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("archive is empty")]
    Empty,
    #[error("weight {weight} for cell {key} is not positive and finite")]
    BadWeight { key: String, weight: f64 },
    #[error("montezuma_domain weights need domain keys, found {0}")]
    NotDomainKey(String),
    #[error("record {0} has no representative frame to remap")]
    MissingFrame(String),
    #[error(transparent)]
    Cell(#[from] CellError),
    #[error("archive file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("archive was written for env digest {found:016x}, expected {expected:016x}")]
    EnvMismatch { expected: u64, found: u64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One hop of a collapsed cell path: the cell entered and the number of
/// actions taken since the previous hop.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathHop {
    pub cell: CellKey,
    pub steps: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellRecord {
    pub key: CellKey,
    /// Actions from episode start that reach this cell.
    pub trajectory: Vec<u8>,
    pub score: f64,
    pub length: u32,
    /// Restorable state at the cell (restore-based exploration only).
    pub snapshot: Option<EnvSnapshot>,
    /// Number of exploration steps during which the cell was visited.
    pub c_seen: u64,
    /// Total agent steps spent in the cell.
    pub c_steps: u64,
    /// Raw frame at discovery, kept so the archive can be re-mapped.
    pub representative_frame: Option<GrayFrame>,
    /// Collapsed cell sequence of the trajectory (policy-based mode).
    pub cell_path: Option<Vec<PathHop>>,
}

/// A newly observed way of reaching a cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub trajectory: Vec<u8>,
    pub score: f64,
    pub length: u32,
    pub snapshot: Option<EnvSnapshot>,
    pub frame: Option<GrayFrame>,
    pub cell_path: Option<Vec<PathHop>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateOutcome {
    Inserted,
    Replaced,
    Unchanged,
}

/// True iff (score, length) beats the incumbent: higher score, or equal score
/// and strictly shorter. Ties keep the incumbent.
pub fn is_better(score: f64, length: u32, incumbent_score: f64, incumbent_length: u32) -> bool {
    score > incumbent_score || (score == incumbent_score && length < incumbent_length)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WeightMode {
    Plain,
    MontezumaDomain,
    PolicyBased,
}

impl FromStr for WeightMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "plain" => Ok(WeightMode::Plain),
            "montezuma_domain" => Ok(WeightMode::MontezumaDomain),
            "policy_based" => Ok(WeightMode::PolicyBased),
            other => Err(format!("unknown weight mode `{other}`")),
        }
    }
}

/// Constants of the domain-knowledge weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionWeightConfig {
    pub mode: WeightMode,
    pub level_discount: f64,
    pub key_bonus: f64,
    pub neighbour_divisor: f64,
}

impl SelectionWeightConfig {
    pub fn new(mode: WeightMode) -> Self {
        Self { mode, level_discount: 0.1, key_bonus: 1.0, neighbour_divisor: 10.0 }
    }
}

/// W = 1 / sqrt(C_seen + 1)
pub fn weight_plain(record: &CellRecord) -> f64 {
    1.0 / ((record.c_seen as f64) + 1.0).sqrt()
}

/// W = 1 / (0.5 C_steps + 1)
pub fn weight_policy_based(record: &CellRecord) -> f64 {
    1.0 / (0.5 * record.c_steps as f64 + 1.0)
}

/// Per-archive facts the domain weight needs, computed once per selection.
#[derive(Debug, Default)]
pub struct DomainWeightIndex {
    locations: HashSet<(u32, u32, u32, u32)>,
    max_keys: HashMap<(u32, u32, u32, u32), usize>,
    max_level: u32,
}

impl DomainWeightIndex {
    pub fn build(archive: &Archive) -> Result<Self, ArchiveError> {
        let mut index = Self::default();
        for key in archive.records.keys() {
            match key {
                CellKey::EpisodeEnd => {}
                CellKey::Domain { room, x, y, keys, level } => {
                    let loc = (*level, *room, *x, *y);
                    index.locations.insert(loc);
                    let m = index.max_keys.entry(loc).or_default();
                    *m = (*m).max(keys.len());
                    index.max_level = index.max_level.max(*level);
                }
                other => return Err(ArchiveError::NotDomainKey(other.encode())),
            }
        }
        Ok(index)
    }

    pub fn weight(&self, record: &CellRecord, cfg: &SelectionWeightConfig) -> Result<f64, ArchiveError> {
        let CellKey::Domain { room, x, y, keys, level } = &record.key else {
            return Err(ArchiveError::NotDomainKey(record.key.encode()));
        };
        let mut h = 0u32;
        if *x > 0 && self.locations.contains(&(*level, *room, x - 1, *y)) {
            h += 1;
        }
        if self.locations.contains(&(*level, *room, x + 1, *y)) {
            h += 1;
        }
        let top = self.max_keys.get(&(*level, *room, *x, *y)).copied().unwrap_or(0);
        let k = if keys.len() >= top { cfg.key_bonus } else { 0.0 };
        let location = (2.0 - h as f64) / cfg.neighbour_divisor + k;
        let discount = cfg.level_discount.powi((self.max_level - level) as i32);
        Ok(discount * (weight_plain(record) + location))
    }
}

/// 0.1^(L - l) * (W + (2 - h)/10 + k), see [`DomainWeightIndex`].
pub fn weight_montezuma_domain(record: &CellRecord, archive: &Archive) -> Result<f64, ArchiveError> {
    DomainWeightIndex::build(archive)?.weight(record, &SelectionWeightConfig::new(WeightMode::MontezumaDomain))
}

/// Samples `batch` indices with replacement, proportionally to `weights`.
pub fn sample_weighted<R: Rng + ?Sized>(weights: &[f64], batch: usize, rng: &mut R) -> Result<Vec<usize>, ArchiveError> {
    if weights.is_empty() {
        return Err(ArchiveError::Empty);
    }
    if let Some((i, &w)) = weights.iter().enumerate().find(|(_, w)| !(w.is_finite() && **w > 0.0)) {
        return Err(ArchiveError::BadWeight { key: format!("#{i}"), weight: w });
    }
    let dist = WeightedIndex::new(weights).map_err(|_| ArchiveError::Empty)?;
    Ok((0..batch).map(|_| dist.sample(rng)).collect())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    pub records: IndexMap<CellKey, CellRecord>,
    /// Current downscaling parameters (pixel mode).
    pub params: Option<DownscaleParams>,
    /// Environment frames consumed so far.
    pub frame_budget_used: u64,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, key: &CellKey) -> Option<&CellRecord> {
        self.records.get(key)
    }

    pub fn contains(&self, key: &CellKey) -> bool {
        self.records.contains_key(key)
    }

    /// Number of real (non-virtual) cells.
    pub fn cell_count(&self) -> usize {
        self.records.len() - usize::from(self.records.contains_key(&CellKey::EpisodeEnd))
    }

    /// Real cells, in insertion order.
    pub fn cells(&self) -> impl Iterator<Item = &CellRecord> {
        self.records.values().filter(|r| !r.key.is_episode_end())
    }

    /// Would `candidate` change the archive?
    pub fn would_accept(&self, key: &CellKey, score: f64, length: u32) -> bool {
        match self.records.get(key) {
            None => true,
            Some(rec) => is_better(score, length, rec.score, rec.length),
        }
    }

    /// Inserts or replaces the record for `key` under the better-trajectory
    /// rule. Counters are kept across replacement.
    pub fn update(&mut self, key: CellKey, candidate: Candidate) -> UpdateOutcome {
        match self.records.get_mut(&key) {
            None => {
                let record = CellRecord {
                    key: key.clone(),
                    trajectory: candidate.trajectory,
                    score: candidate.score,
                    length: candidate.length,
                    snapshot: candidate.snapshot,
                    c_seen: 0,
                    c_steps: 0,
                    representative_frame: candidate.frame,
                    cell_path: candidate.cell_path,
                };
                self.records.insert(key, record);
                UpdateOutcome::Inserted
            }
            Some(rec) if is_better(candidate.score, candidate.length, rec.score, rec.length) => {
                rec.trajectory = candidate.trajectory;
                rec.score = candidate.score;
                rec.length = candidate.length;
                rec.snapshot = candidate.snapshot;
                if candidate.frame.is_some() {
                    rec.representative_frame = candidate.frame;
                }
                rec.cell_path = candidate.cell_path;
                UpdateOutcome::Replaced
            }
            Some(_) => UpdateOutcome::Unchanged,
        }
    }

    /// C_seen += 1 for every visited cell, C_steps += steps spent there.
    /// Unknown keys are ignored.
    pub fn bump_counters<'a, I>(&mut self, steps_per_cell: I)
    where
        I: IntoIterator<Item = (&'a CellKey, &'a u64)>,
    {
        for (key, &steps) in steps_per_cell {
            if let Some(rec) = self.records.get_mut(key) {
                rec.c_seen += 1;
                rec.c_steps += steps;
            }
        }
    }

    /// Selection weights of every real cell, in insertion order.
    pub fn selection_weights(&self, cfg: &SelectionWeightConfig) -> Result<Vec<(CellKey, f64)>, ArchiveError> {
        let domain = match cfg.mode {
            WeightMode::MontezumaDomain => Some(DomainWeightIndex::build(self)?),
            _ => None,
        };
        self.cells()
            .map(|rec| {
                let w = match cfg.mode {
                    WeightMode::Plain => weight_plain(rec),
                    WeightMode::PolicyBased => weight_policy_based(rec),
                    WeightMode::MontezumaDomain => domain.as_ref().unwrap().weight(rec, cfg)?,
                };
                Ok((rec.key.clone(), w))
            })
            .collect()
    }

    /// Draws `batch` cells independently with probability proportional to
    /// their selection weight. The virtual end-of-episode cell is never drawn.
    pub fn select_cells<R: Rng + ?Sized>(
        &self,
        batch: usize,
        cfg: &SelectionWeightConfig,
        rng: &mut R,
    ) -> Result<Vec<CellKey>, ArchiveError> {
        let weighted = self.selection_weights(cfg)?;
        if weighted.is_empty() {
            return Err(ArchiveError::Empty);
        }
        if let Some((key, w)) = weighted.iter().find(|(_, w)| !(w.is_finite() && *w > 0.0)) {
            return Err(ArchiveError::BadWeight { key: key.encode(), weight: *w });
        }
        let weights: Vec<f64> = weighted.iter().map(|(_, w)| *w).collect();
        let picks = sample_weighted(&weights, batch, rng)?;
        Ok(picks.into_iter().map(|i| weighted[i].0.clone()).collect())
    }

    pub fn best_end_of_episode_score(&self) -> Option<f64> {
        self.records.get(&CellKey::EpisodeEnd).map(|r| r.score)
    }

    /// Maps every record's representative frame through `new_params`.
    /// Records that collide merge under the update rule with summed counters.
    /// The end-of-episode record is carried over untouched.
    pub fn remap(&self, new_params: DownscaleParams) -> Result<Archive, ArchiveError> {
        let mut out = Archive { records: IndexMap::new(), params: Some(new_params), frame_budget_used: self.frame_budget_used };
        for rec in self.records.values() {
            if rec.key.is_episode_end() {
                out.records.insert(CellKey::EpisodeEnd, rec.clone());
                continue;
            }
            let frame = rec.representative_frame.as_ref().ok_or_else(|| ArchiveError::MissingFrame(rec.key.encode()))?;
            let key = downscale(frame, new_params)?;
            match out.records.get_mut(&key) {
                None => {
                    let mut moved = rec.clone();
                    moved.key = key.clone();
                    out.records.insert(key, moved);
                }
                Some(existing) => {
                    let (seen, steps) = (existing.c_seen + rec.c_seen, existing.c_steps + rec.c_steps);
                    if is_better(rec.score, rec.length, existing.score, existing.length) {
                        *existing = CellRecord { key: key.clone(), ..rec.clone() };
                    }
                    existing.c_seen = seen;
                    existing.c_steps = steps;
                }
            }
        }
        Ok(out)
    }

    /// Writes the line-delimited archive format.
    pub fn write_to<W: Write>(&self, mut out: W, env_digest: u64) -> Result<(), ArchiveError> {
        let params = self.params.map_or_else(|| "none".to_string(), |p| p.to_string());
        writeln!(
            out,
            "#goexplore-archive version={ARCHIVE_FORMAT_VERSION} env={env_digest:016x} params={params} frames={}",
            self.frame_budget_used
        )?;
        for rec in self.records.values() {
            let line = RecordLine::from_record(rec);
            serde_json::to_writer(&mut out, &line).map_err(std::io::Error::other)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Reads an archive written by [`Archive::write_to`]; `expected_digest`
    /// guards against loading an archive from another environment.
    pub fn read_from<R: BufRead>(input: R, expected_digest: Option<u64>) -> Result<Archive, ArchiveError> {
        let mut lines = input.lines();
        let header = lines.next().ok_or(ArchiveError::Parse { line: 1, msg: "missing header".into() })??;
        let perr = |line: usize, msg: &str| ArchiveError::Parse { line, msg: msg.to_string() };
        let fields: HashMap<&str, &str> = header
            .strip_prefix("#goexplore-archive ")
            .ok_or_else(|| perr(1, "not an archive file"))?
            .split(' ')
            .filter_map(|kv| kv.split_once('='))
            .collect();
        let version: u32 = fields.get("version").and_then(|v| v.parse().ok()).ok_or_else(|| perr(1, "bad version"))?;
        if version != ARCHIVE_FORMAT_VERSION {
            return Err(perr(1, &format!("unsupported format version {version}")));
        }
        let digest = fields.get("env").and_then(|v| u64::from_str_radix(v, 16).ok()).ok_or_else(|| perr(1, "bad env digest"))?;
        if let Some(expected) = expected_digest {
            if expected != digest {
                return Err(ArchiveError::EnvMismatch { expected, found: digest });
            }
        }
        let params = match fields.get("params") {
            Some(&"none") => None,
            Some(p) => {
                let v: Vec<_> = p.split(',').map(|x| x.parse::<u64>().ok()).collect::<Option<_>>().ok_or_else(|| perr(1, "bad params"))?;
                if v.len() != 3 {
                    return Err(perr(1, "bad params"));
                }
                Some(DownscaleParams::new(v[0] as usize, v[1] as usize, v[2] as u32))
            }
            None => return Err(perr(1, "missing params")),
        };
        let frames = fields.get("frames").and_then(|v| v.parse().ok()).ok_or_else(|| perr(1, "bad frames"))?;
        let mut archive = Archive { records: IndexMap::new(), params, frame_budget_used: frames };
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let parsed: RecordLine = serde_json::from_str(&line).map_err(|e| perr(i + 2, &e.to_string()))?;
            let rec = parsed.into_record().map_err(|m| perr(i + 2, &m))?;
            archive.records.insert(rec.key.clone(), rec);
        }
        Ok(archive)
    }
}

#[derive(Serialize, Deserialize)]
struct FrameLine {
    w: usize,
    h: usize,
    px: String,
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    key: String,
    score: f64,
    length: u32,
    c_seen: u64,
    c_steps: u64,
    trajectory: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    snapshot: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    snapshot_frame: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    frame: Option<FrameLine>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    path: Option<Vec<(String, u32)>>,
}

impl RecordLine {
    fn from_record(rec: &CellRecord) -> Self {
        Self {
            key: rec.key.encode(),
            score: rec.score,
            length: rec.length,
            c_seen: rec.c_seen,
            c_steps: rec.c_steps,
            trajectory: rec.trajectory.clone(),
            snapshot: rec.snapshot.as_ref().map(|s| B64.encode(&s.bytes)),
            snapshot_frame: rec.snapshot.as_ref().map(|s| s.frame_index),
            frame: rec.representative_frame.as_ref().map(|f| FrameLine { w: f.width, h: f.height, px: B64.encode(&f.pixels) }),
            path: rec.cell_path.as_ref().map(|p| p.iter().map(|h| (h.cell.encode(), h.steps)).collect()),
        }
    }

    fn into_record(self) -> Result<CellRecord, String> {
        let key = CellKey::decode(&self.key).ok_or_else(|| format!("bad cell key `{}`", self.key))?;
        let snapshot = match self.snapshot {
            Some(s) => Some(EnvSnapshot {
                bytes: B64.decode(s).map_err(|e| e.to_string())?,
                frame_index: self.snapshot_frame.unwrap_or(0),
            }),
            None => None,
        };
        let representative_frame = match self.frame {
            Some(f) => {
                let px = B64.decode(f.px).map_err(|e| e.to_string())?;
                if px.len() != f.w * f.h {
                    return Err("frame size mismatch".into());
                }
                Some(GrayFrame::new(f.w, f.h, px))
            }
            None => None,
        };
        let cell_path = match self.path {
            Some(p) => Some(
                p.into_iter()
                    .map(|(k, steps)| CellKey::decode(&k).map(|cell| PathHop { cell, steps }).ok_or_else(|| format!("bad path key `{k}`")))
                    .collect::<Result<Vec<_>, _>>()?,
            ),
            None => None,
        };
        Ok(CellRecord {
            key,
            trajectory: self.trajectory,
            score: self.score,
            length: self.length,
            snapshot,
            c_seen: self.c_seen,
            c_steps: self.c_steps,
            representative_frame,
            cell_path,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cand(score: f64, length: u32) -> Candidate {
        Candidate { trajectory: vec![0; length as usize], score, length, snapshot: None, frame: None, cell_path: None }
    }

    fn rec(key: CellKey, c_seen: u64, c_steps: u64) -> CellRecord {
        CellRecord {
            key,
            trajectory: vec![],
            score: 0.0,
            length: 0,
            snapshot: None,
            c_seen,
            c_steps,
            representative_frame: None,
            cell_path: None,
        }
    }

    #[test]
    fn update_rules() {
        let mut a = Archive::new();
        let k = CellKey::domain(0, 1, 1, vec![], 0);
        assert_eq!(a.update(k.clone(), cand(5.0, 40)), UpdateOutcome::Inserted);
        assert_eq!(a.update(k.clone(), cand(5.0, 30)), UpdateOutcome::Replaced);
        assert_eq!(a.update(k.clone(), cand(5.0, 30)), UpdateOutcome::Unchanged);
        assert_eq!(a.update(k.clone(), cand(4.0, 1)), UpdateOutcome::Unchanged);
        assert_eq!(a.update(k.clone(), cand(6.0, 99)), UpdateOutcome::Replaced);
    }

    #[test]
    fn counters_survive_replacement() {
        let mut a = Archive::new();
        let k = CellKey::domain(0, 1, 1, vec![], 0);
        a.update(k.clone(), cand(1.0, 10));
        let mut steps = IndexMap::new();
        steps.insert(k.clone(), 7u64);
        a.bump_counters(&steps);
        a.update(k.clone(), cand(2.0, 10));
        let r = a.get(&k).unwrap();
        assert_eq!((r.c_seen, r.c_steps), (1, 7));
        a.bump_counters(&steps);
        assert_eq!(a.get(&k).unwrap().c_seen, 2);
    }

    #[test]
    fn plain_and_policy_weights() {
        let k = CellKey::EpisodeEnd;
        assert_eq!(weight_plain(&rec(k.clone(), 0, 0)), 1.0);
        assert_eq!(weight_plain(&rec(k.clone(), 3, 0)), 0.5);
        assert!((weight_plain(&rec(k.clone(), 99, 0)) - 0.1).abs() < 1e-15);
        assert_eq!(weight_policy_based(&rec(k.clone(), 0, 0)), 1.0);
        assert_eq!(weight_policy_based(&rec(k.clone(), 0, 2)), 0.5);
        assert!((weight_policy_based(&rec(k, 0, 18)) - 0.1).abs() < 1e-15);
    }

    fn insert(a: &mut Archive, key: CellKey, c_seen: u64) {
        a.records.insert(key.clone(), rec(key, c_seen, 0));
    }

    #[test]
    fn montezuma_weight_cases() {
        let mut a = Archive::new();
        let centre = CellKey::domain(0, 5, 5, vec![], 1);
        insert(&mut a, centre.clone(), 0);
        insert(&mut a, CellKey::domain(0, 4, 5, vec![], 1), 0);
        insert(&mut a, CellKey::domain(0, 6, 5, vec![], 1), 0);
        // Another cell at the same location with more keys removes the bonus.
        insert(&mut a, CellKey::domain(0, 5, 5, vec![2], 1), 0);
        assert!((weight_montezuma_domain(a.get(&centre).unwrap(), &a).unwrap() - 1.0).abs() < 1e-15);

        let mut b = Archive::new();
        let lone = CellKey::domain(3, 2, 2, vec![1], 0);
        insert(&mut b, lone.clone(), 0);
        assert!((weight_montezuma_domain(b.get(&lone).unwrap(), &b).unwrap() - 2.2).abs() < 1e-12);

        // Two levels below the maximum: 0.01 * inner weight.
        let mut c = Archive::new();
        let low = CellKey::domain(0, 0, 0, vec![], 0);
        insert(&mut c, low.clone(), 3);
        insert(&mut c, CellKey::domain(0, 9, 9, vec![], 2), 0);
        // inner = 0.5 + (2 - 0)/10 + 1 = 1.7
        assert!((weight_montezuma_domain(c.get(&low).unwrap(), &c).unwrap() - 0.017).abs() < 1e-12);
    }

    #[test]
    fn montezuma_rejects_downscaled_keys() {
        let mut a = Archive::new();
        let k = CellKey::Downscaled(vec![1]);
        insert(&mut a, k.clone(), 0);
        assert!(matches!(weight_montezuma_domain(a.get(&k).unwrap(), &a), Err(ArchiveError::NotDomainKey(_))));
    }

    #[test]
    fn selection_errors_and_single_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = SelectionWeightConfig::new(WeightMode::Plain);
        assert!(matches!(Archive::new().select_cells(3, &cfg, &mut rng), Err(ArchiveError::Empty)));
        let mut a = Archive::new();
        let k = CellKey::domain(0, 0, 0, vec![], 0);
        a.update(k.clone(), cand(0.0, 0));
        a.update(CellKey::EpisodeEnd, cand(3.0, 9));
        assert_eq!(a.select_cells(50, &cfg, &mut rng).unwrap(), vec![k; 50]);
    }

    #[test]
    fn selection_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let picks = sample_weighted(&[3.0, 1.0], 100_000, &mut rng).unwrap();
        let a = picks.iter().filter(|&&i| i == 0).count() as f64 / 1e5;
        assert!((0.74..=0.76).contains(&a), "{a}");
        let picks = sample_weighted(&[1.0; 10], 100_000, &mut rng).unwrap();
        for c in 0..10 {
            let f = picks.iter().filter(|&&i| i == c).count() as f64 / 1e5;
            assert!((0.09..=0.11).contains(&f), "{f}");
        }
    }

    #[test]
    fn episode_end_score() {
        let mut a = Archive::new();
        assert_eq!(a.best_end_of_episode_score(), None);
        a.update(CellKey::EpisodeEnd, cand(120.0, 5));
        assert_eq!(a.best_end_of_episode_score(), Some(120.0));
    }

    #[test]
    fn end_score_ignores_intermediate_cells() {
        // Rewards are negative: the best intermediate cell has score 0 but
        // every finished episode ends below it.
        let mut a = Archive::new();
        a.update(CellKey::domain(0, 0, 0, vec![], 0), cand(0.0, 0));
        a.update(CellKey::domain(0, 1, 0, vec![], 0), cand(-1.0, 1));
        a.update(CellKey::EpisodeEnd, cand(-3.0, 4));
        assert_eq!(a.best_end_of_episode_score(), Some(-3.0));
    }

    fn pixel_record(value: u8, score: f64, c_seen: u64, params: DownscaleParams) -> (CellKey, CellRecord) {
        let frame = GrayFrame::filled(4, 4, value);
        let key = downscale(&frame, params).unwrap();
        let mut r = rec(key.clone(), c_seen, c_seen);
        r.score = score;
        r.representative_frame = Some(frame);
        (key, r)
    }

    #[test]
    fn remap_identity_merge_and_collapse() {
        let fine = DownscaleParams::new(4, 4, 255);
        let mut a = Archive { params: Some(fine), ..Archive::default() };
        for (v, s, c) in [(10u8, 3.0, 2u64), (12, 5.0, 4), (200, 1.0, 1)] {
            let (k, r) = pixel_record(v, s, c, fine);
            a.records.insert(k, r);
        }
        a.update(CellKey::EpisodeEnd, cand(7.0, 3));
        let same = a.remap(fine).unwrap();
        assert_eq!(same.records.keys().collect::<Vec<_>>(), a.records.keys().collect::<Vec<_>>());

        // Depth 8 merges 10 and 12 (both map to 0) but keeps 200 apart.
        let coarse = a.remap(DownscaleParams::new(2, 2, 8)).unwrap();
        assert_eq!(coarse.cell_count(), 2);
        let merged = coarse.get(&CellKey::Downscaled(vec![0; 4])).unwrap();
        assert_eq!(merged.score, 5.0);
        assert_eq!(merged.c_seen, 6);
        assert_eq!(coarse.best_end_of_episode_score(), Some(7.0));

        let total = a.remap(DownscaleParams::new(1, 1, 1)).unwrap();
        assert_eq!(total.cell_count(), 1);
        assert_eq!(total.best_end_of_episode_score(), Some(7.0));
    }

    #[test]
    fn remap_without_frames_fails() {
        let mut a = Archive::new();
        a.update(CellKey::Downscaled(vec![0]), cand(0.0, 0));
        assert!(matches!(a.remap(DownscaleParams::new(1, 1, 1)), Err(ArchiveError::MissingFrame(_))));
    }
}
