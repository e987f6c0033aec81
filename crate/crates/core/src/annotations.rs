//! Human annotation ranks → receptacle and room soft scores → ground truth.
//!
//! Each annotator gives a receptacle a signed rank: `r > 0` means ranked
//! `r`-th among "correct" placements, `r < 0` ranked `|r|`-th among
//! "misplaced", `0` means no opinion. Scores are mean reciprocal ranks per
//! polarity, taken over the annotators that expressed that polarity.
//!
//! Means are accumulated as exact rationals and rounded once, so every score
//! is the correctly rounded value of its exact mean regardless of annotator
//! or record order.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One object-room-receptacle tuple with its per-annotator signed ranks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    #[serde(rename = "object")]
    pub object_id: String,
    #[serde(rename = "room")]
    pub room_id: String,
    #[serde(rename = "receptacle")]
    pub receptacle_id: String,
    pub ranks: Vec<i32>,
}

/// Reads JSON-lines annotation records. Blank lines are skipped.
pub fn parse_annotations<R: BufRead>(reader: R) -> Result<Vec<AnnotationRecord>> {
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let file = File::open(path).map_err(Error::io(path))?;
    parse_annotations(BufReader::new(file))
}

pub fn write_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    let file = File::create(path).map_err(Error::io(path))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(Error::io(path))?;
    }
    w.flush().map_err(Error::io(path))
}

/// Checks non-empty ranks, rank magnitude bounded by the number of
/// receptacles seen for the room, and tuple uniqueness.
pub fn validate_records(records: &[AnnotationRecord]) -> Result<()> {
    let mut receptacles_per_room: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for r in records {
        receptacles_per_room
            .entry(&r.room_id)
            .or_default()
            .insert(&r.receptacle_id);
    }
    let mut seen = BTreeSet::new();
    for r in records {
        if r.ranks.is_empty() {
            return Err(Error::InvalidAnnotation(format!(
                "({}, {}, {}) has no ranks",
                r.object_id, r.room_id, r.receptacle_id
            )));
        }
        let limit = receptacles_per_room[r.room_id.as_str()].len() as u64;
        if let Some(bad) = r.ranks.iter().find(|k| k.unsigned_abs() as u64 > limit) {
            return Err(Error::InvalidAnnotation(format!(
                "({}, {}, {}) rank {bad} exceeds the {limit} receptacles of room {}",
                r.object_id, r.room_id, r.receptacle_id, r.room_id
            )));
        }
        if !seen.insert((&r.object_id, &r.room_id, &r.receptacle_id)) {
            return Err(Error::DuplicateAnnotation {
                object: r.object_id.clone(),
                room: r.room_id.clone(),
                receptacle: r.receptacle_id.clone(),
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SoftScoreConfig {
    /// A polarity scores 0 unless at least this many annotators expressed it.
    pub min_opinions: usize,
}

impl Default for SoftScoreConfig {
    fn default() -> Self {
        Self { min_opinions: 1 }
    }
}

fn to_f64(r: &BigRational) -> f64 {
    r.to_f64().expect("soft scores are bounded rationals")
}

/// Mean reciprocal rank over annotators with `rank > 0`, counted per rank
/// value so the result does not depend on annotator order.
fn polarity_mean(ranks: &[i32], positive: bool, min_opinions: usize) -> BigRational {
    let mut counts: BTreeMap<u32, i64> = BTreeMap::new();
    for &r in ranks {
        if (positive && r > 0) || (!positive && r < 0) {
            *counts.entry(r.unsigned_abs()).or_default() += 1;
        }
    }
    let n: i64 = counts.values().sum();
    if n == 0 || (n as usize) < min_opinions {
        return BigRational::zero();
    }
    let sum = counts
        .iter()
        .fold(BigRational::zero(), |acc, (&rank, &count)| {
            acc + BigRational::new(BigInt::from(count), BigInt::from(rank))
        });
    sum / BigInt::from(n)
}

fn reciprocal_exact(ranks: &[i32], min_opinions: usize) -> (BigRational, BigRational) {
    (
        polarity_mean(ranks, true, min_opinions),
        polarity_mean(ranks, false, min_opinions),
    )
}

/// `(pos, neg)` mean reciprocal ranks of one receptacle's annotations.
pub fn receptacle_reciprocal(ranks: &[i32]) -> (f64, f64) {
    receptacle_reciprocal_with(ranks, SoftScoreConfig::default().min_opinions)
}

pub fn receptacle_reciprocal_with(ranks: &[i32], min_opinions: usize) -> (f64, f64) {
    let (p, n) = reciprocal_exact(ranks, min_opinions);
    (to_f64(&p), to_f64(&n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReceptacleScore {
    #[serde(rename = "object")]
    pub object_id: String,
    #[serde(rename = "room")]
    pub room_id: String,
    #[serde(rename = "receptacle")]
    pub receptacle_id: String,
    pub pos: f64,
    pub neg: f64,
}

/// Room-level scores for one object-room pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub pos_score: f64,
    pub neg_score: f64,
    pub max_receptacle_pos: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "SoftScoreFile", into = "SoftScoreFile")]
pub struct SoftScoreTable {
    pairs: BTreeMap<(String, String), PairScore>,
    receptacles: Vec<ReceptacleScore>,
}

#[derive(Serialize, Deserialize)]
struct PairRow {
    object: String,
    room: String,
    #[serde(flatten)]
    score: PairScore,
}

#[derive(Serialize, Deserialize)]
struct SoftScoreFile {
    pairs: Vec<PairRow>,
    receptacles: Vec<ReceptacleScore>,
}

impl From<SoftScoreTable> for SoftScoreFile {
    fn from(t: SoftScoreTable) -> Self {
        Self {
            pairs: t
                .pairs
                .into_iter()
                .map(|((object, room), score)| PairRow {
                    object,
                    room,
                    score,
                })
                .collect(),
            receptacles: t.receptacles,
        }
    }
}

impl TryFrom<SoftScoreFile> for SoftScoreTable {
    type Error = Error;

    fn try_from(f: SoftScoreFile) -> Result<Self> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let mut pairs = BTreeMap::new();
        for row in f.pairs {
            let s = row.score;
            if !(unit(s.pos_score) && unit(s.neg_score) && unit(s.max_receptacle_pos)) {
                return Err(Error::Format(format!(
                    "scores for ({}, {}) outside [0, 1]",
                    row.object, row.room
                )));
            }
            pairs.insert((row.object, row.room), s);
        }
        for r in &f.receptacles {
            if !(unit(r.pos) && unit(r.neg)) {
                return Err(Error::Format(format!(
                    "receptacle scores for ({}, {}, {}) outside [0, 1]",
                    r.object_id, r.room_id, r.receptacle_id
                )));
            }
        }
        Ok(Self {
            pairs,
            receptacles: f.receptacles,
        })
    }
}

type ExactReceptacle = ((String, String, String), BigRational, BigRational);

impl SoftScoreTable {
    fn aggregate(mut exact: Vec<ExactReceptacle>) -> Result<Self> {
        exact.sort_by(|a, b| a.0.cmp(&b.0));
        if let Some(w) = exact.windows(2).find(|w| w[0].0 == w[1].0) {
            let (object, room, receptacle) = w[0].0.clone();
            return Err(Error::DuplicateAnnotation {
                object,
                room,
                receptacle,
            });
        }
        let mut grouped: BTreeMap<(String, String), Vec<(&BigRational, &BigRational)>> =
            BTreeMap::new();
        for ((o, r, _), p, n) in &exact {
            grouped
                .entry((o.clone(), r.clone()))
                .or_default()
                .push((p, n));
        }
        let pairs = grouped
            .into_iter()
            .map(|(key, recs)| {
                let count = BigInt::from(recs.len());
                let pos_sum = recs.iter().fold(BigRational::zero(), |a, (p, _)| a + *p);
                let neg_sum = recs.iter().fold(BigRational::zero(), |a, (_, n)| a + *n);
                let max_pos = recs.iter().map(|(p, _)| *p).max().expect("non-empty group");
                let score = PairScore {
                    pos_score: to_f64(&(pos_sum / count.clone())),
                    neg_score: to_f64(&(neg_sum / count)),
                    max_receptacle_pos: to_f64(max_pos),
                };
                (key, score)
            })
            .collect();
        let receptacles = exact
            .iter()
            .map(|((o, r, c), p, n)| ReceptacleScore {
                object_id: o.clone(),
                room_id: r.clone(),
                receptacle_id: c.clone(),
                pos: to_f64(p),
                neg: to_f64(n),
            })
            .collect();
        Ok(Self { pairs, receptacles })
    }

    /// Aggregates precomputed receptacle scores (each in `[0, 1]`).
    pub fn from_receptacles(receptacles: Vec<ReceptacleScore>) -> Result<Self> {
        let mut exact = Vec::with_capacity(receptacles.len());
        for r in receptacles {
            let unit = |v: f64| (0.0..=1.0).contains(&v);
            if !(unit(r.pos) && unit(r.neg)) {
                return Err(Error::InvalidAnnotation(format!(
                    "receptacle scores for ({}, {}, {}) outside [0, 1]",
                    r.object_id, r.room_id, r.receptacle_id
                )));
            }
            let p = BigRational::from_float(r.pos).expect("finite");
            let n = BigRational::from_float(r.neg).expect("finite");
            exact.push(((r.object_id, r.room_id, r.receptacle_id), p, n));
        }
        Self::aggregate(exact)
    }

    pub fn pair(&self, object: &str, room: &str) -> Option<&PairScore> {
        self.pairs.get(&(object.to_string(), room.to_string()))
    }

    /// `((object, room), score)` in sorted key order.
    pub fn pairs(&self) -> impl Iterator<Item = (&str, &str, &PairScore)> {
        self.pairs
            .iter()
            .map(|((o, r), s)| (o.as_str(), r.as_str(), s))
    }

    pub fn receptacles(&self) -> &[ReceptacleScore] {
        &self.receptacles
    }

    pub fn objects(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.pairs.keys().map(|(o, _)| o).collect();
        set.into_iter().cloned().collect()
    }

    pub fn rooms(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.pairs.keys().map(|(_, r)| r).collect();
        set.into_iter().cloned().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

pub fn compute_soft_scores(records: &[AnnotationRecord]) -> Result<SoftScoreTable> {
    compute_soft_scores_with(records, &SoftScoreConfig::default())
}

pub fn compute_soft_scores_with(
    records: &[AnnotationRecord],
    cfg: &SoftScoreConfig,
) -> Result<SoftScoreTable> {
    validate_records(records)?;
    let exact = records
        .iter()
        .map(|r| {
            let (p, n) = reciprocal_exact(&r.ranks, cfg.min_opinions);
            (
                (
                    r.object_id.clone(),
                    r.room_id.clone(),
                    r.receptacle_id.clone(),
                ),
                p,
                n,
            )
        })
        .collect();
    SoftScoreTable::aggregate(exact)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthEntry {
    pub room: String,
    /// Candidate negative edge weight (the room's `neg_score`) for every
    /// room other than `room`.
    pub negatives: BTreeMap<String, f64>,
}

/// Ground-truth room per object plus negative weights for the other rooms.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroundTruthMap {
    rooms: Vec<String>,
    entries: BTreeMap<String, GroundTruthEntry>,
}

impl GroundTruthMap {
    /// Builds a map from explicit assignments; negative weights are zero.
    pub fn from_assignments<I, S>(rooms: &[String], assignments: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, S)>,
        S: Into<String>,
    {
        let rooms = canonical_rooms(rooms);
        let mut entries = BTreeMap::new();
        for (obj, room) in assignments {
            let room = room.into();
            if !rooms.contains(&room) {
                return Err(Error::InvalidAnnotation(format!("unknown room `{room}`")));
            }
            let negatives = rooms
                .iter()
                .filter(|r| **r != room)
                .map(|r| (r.clone(), 0.0))
                .collect();
            entries.insert(obj.into(), GroundTruthEntry { room, negatives });
        }
        Ok(Self { rooms, entries })
    }

    /// Canonical (sorted) room order.
    pub fn rooms(&self) -> &[String] {
        &self.rooms
    }

    pub fn gt_room(&self, object: &str) -> Option<&str> {
        self.entries.get(object).map(|e| e.room.as_str())
    }

    pub fn entry(&self, object: &str) -> Option<&GroundTruthEntry> {
        self.entries.get(object)
    }

    pub fn negative_weight(&self, object: &str, room: &str) -> Option<f64> {
        self.entries.get(object)?.negatives.get(room).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &GroundTruthEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn canonical_rooms(rooms: &[String]) -> Vec<String> {
    let set: BTreeSet<&String> = rooms.iter().collect();
    set.into_iter().cloned().collect()
}

/// Picks, per object, the room holding its highest positive receptacle
/// score. Ties go to the room that sorts first.
pub fn ground_truth_map(table: &SoftScoreTable, rooms: &[String]) -> Result<GroundTruthMap> {
    let rooms = canonical_rooms(rooms);
    if let Some(r) = table.rooms().into_iter().find(|r| !rooms.contains(r)) {
        return Err(Error::InvalidAnnotation(format!(
            "scored room `{r}` is missing from the room list"
        )));
    }
    let mut entries = BTreeMap::new();
    let mut missing = Vec::new();
    for object in table.objects() {
        let mut best: Option<(&String, f64)> = None;
        for room in &rooms {
            let v = table
                .pair(&object, room)
                .map_or(0.0, |s| s.max_receptacle_pos);
            if v > best.map_or(0.0, |(_, b)| b) {
                best = Some((room, v));
            }
        }
        let Some((gt, _)) = best else {
            missing.push(object);
            continue;
        };
        let negatives = rooms
            .iter()
            .filter(|r| *r != gt)
            .map(|r| {
                let w = table.pair(&object, r).map_or(0.0, |s| s.neg_score);
                (r.clone(), w)
            })
            .collect();
        entries.insert(
            object,
            GroundTruthEntry {
                room: gt.clone(),
                negatives,
            },
        );
    }
    if !missing.is_empty() {
        return Err(Error::NoGroundTruth(missing));
    }
    Ok(GroundTruthMap { rooms, entries })
}
