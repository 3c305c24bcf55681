//! Pairwise human evaluation: pair preparation, vote records and
//! majority-vote tallying. The HTTP surface lives in [`server`].
//!
//! Which side of a pair holds "our" shape is written to a separate key file
//! that only [`prepare_pairs`] and [`tally`] touch. Pair files, assignment
//! payloads and vote files never contain it.

pub mod server;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Votes collected per pair.
pub const VOTES_PER_PAIR: usize = 5;
/// Stamped into every stored vote.
pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    A,
    B,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::A => Side::B,
            Side::B => Side::A,
        }
    }
}

/// One generated or reconstructed shape answering a query image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeEntry {
    pub query_id: String,
    pub category: String,
    pub query_image: PathBuf,
    pub shape: PathBuf,
}

/// Public half of a comparison: safe to hand to the serving layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair_id: String,
    pub category: String,
    pub query_image: PathBuf,
    pub shape_a: PathBuf,
    pub shape_b: PathBuf,
}

/// Sealed half of a comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyRecord {
    pub pair_id: String,
    pub ours: Side,
}

/// A stored vote. Times are milliseconds since the Unix epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub pair_id: String,
    pub annotator_id: String,
    pub realism_choice: Side,
    pub coherence_choice: Side,
    pub realism_at_ms: u64,
    pub coherence_at_ms: u64,
    pub protocol_version: u32,
}

impl VoteRecord {
    /// The coherence answer must not precede the realism answer.
    pub fn validate(&self) -> Result<()> {
        if self.coherence_at_ms < self.realism_at_ms {
            return Err(Error::InvalidArgument(format!(
                "vote on {}: coherence recorded before realism",
                self.pair_id
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct PreparedPairs {
    pub pairs: Vec<PairRecord>,
    pub key: Vec<KeyRecord>,
    /// Candidates skipped because both sides referenced the same shape.
    pub rejected: Vec<String>,
}

impl PreparedPairs {
    /// Fraction of pairs with our shape on side A.
    pub fn side_a_share(&self) -> f64 {
        if self.key.is_empty() {
            return 0.0;
        }
        self.key.iter().filter(|k| k.ours == Side::A).count() as f64 / self.key.len() as f64
    }
}

/// Draws `n_per_category` query images per category that both manifests
/// answer and randomizes which side shows our shape.
///
/// Categories are those of `ours`, or `categories` when given.
pub fn prepare_pairs(
    ours: &[ShapeEntry],
    baseline: &[ShapeEntry],
    categories: Option<&[String]>,
    n_per_category: usize,
    seed: u64,
) -> Result<PreparedPairs> {
    if n_per_category == 0 {
        return Err(Error::InvalidArgument("n_per_category must be positive".into()));
    }
    let base: HashMap<&str, &ShapeEntry> = baseline.iter().map(|e| (e.query_id.as_str(), e)).collect();
    let cats: BTreeSet<String> = match categories {
        Some(c) => c.iter().cloned().collect(),
        None => ours.iter().map(|e| e.category.clone()).collect(),
    };
    if cats.is_empty() {
        return Err(Error::InsufficientItems("no categories to compare".into()));
    }
    let mut rng = rng::stream(seed, "humaneval-pairs");
    let mut out = PreparedPairs::default();
    for cat in &cats {
        let mut cands: Vec<(&ShapeEntry, &ShapeEntry)> = ours
            .iter()
            .filter(|e| &e.category == cat)
            .filter_map(|e| base.get(e.query_id.as_str()).map(|b| (e, *b)))
            .collect();
        cands.sort_by(|x, y| x.0.query_id.cmp(&y.0.query_id));
        cands.dedup_by(|x, y| x.0.query_id == y.0.query_id);
        cands.shuffle(&mut rng);
        let mut taken = 0;
        for (o, b) in cands {
            if taken == n_per_category {
                break;
            }
            if o.shape == b.shape {
                log::warn!("query {}: both sides reference {}; pair rejected", o.query_id, o.shape.display());
                out.rejected.push(o.query_id.clone());
                continue;
            }
            let pair_id = format!("{cat}-{taken:04}");
            let ours_side = if rng.gen_bool(0.5) { Side::A } else { Side::B };
            let (a, bb) = match ours_side {
                Side::A => (&o.shape, &b.shape),
                Side::B => (&b.shape, &o.shape),
            };
            out.pairs.push(PairRecord {
                pair_id: pair_id.clone(),
                category: cat.clone(),
                query_image: o.query_image.clone(),
                shape_a: a.clone(),
                shape_b: bb.clone(),
            });
            out.key.push(KeyRecord { pair_id, ours: ours_side });
            taken += 1;
        }
        if taken < n_per_category {
            return Err(Error::InsufficientItems(format!(
                "category {cat}: {taken} usable query images shared by both manifests, {n_per_category} requested"
            )));
        }
    }
    Ok(out)
}

/// Writes the pair file and the key file. The key file is owner-only on unix.
pub fn write_prepared(prep: &PreparedPairs, pairs_path: &Path, key_path: &Path) -> Result<()> {
    write_jsonl(pairs_path, &prep.pairs)?;
    write_jsonl(key_path, &prep.key)?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        fs::set_permissions(key_path, fs::Permissions::from_mode(0o600)).map_err(|e| Error::io(key_path, e))?;
    }
    Ok(())
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads JSON lines, skipping blank lines.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

/// Appends one record and flushes.
pub fn append_jsonl<T: Serialize>(file: &mut fs::File, row: &T) -> Result<()> {
    let mut line = serde_json::to_vec(row)?;
    line.push(b'\n');
    file.write_all(&line).and_then(|_| file.flush()).map_err(|e| Error::io("<vote log>", e))
}

/// Vote breakdown for one group of pairs. Shares are percentages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub pairs: usize,
    /// Pairs with k of 5 votes for our shape, k = 0..=5.
    pub counts: [usize; VOTES_PER_PAIR + 1],
    pub histogram: [f64; VOTES_PER_PAIR + 1],
    /// Share of pairs where at least 3 of 5 votes went to our shape.
    pub majority: f64,
    /// Share of pairs with all five votes for the same side.
    pub unanimous: f64,
    /// Among unanimous pairs, the share that favored our shape.
    pub unanimous_ours: f64,
}

impl Breakdown {
    pub fn from_counts(counts: [usize; VOTES_PER_PAIR + 1]) -> Self {
        let n: usize = counts.iter().sum();
        let pct = |c: usize| if n == 0 { 0.0 } else { 100.0 * c as f64 / n as f64 };
        let mut histogram = [0.0; VOTES_PER_PAIR + 1];
        for (h, &c) in histogram.iter_mut().zip(&counts) {
            *h = pct(c);
        }
        let maj = counts[VOTES_PER_PAIR / 2 + 1..].iter().sum();
        let una = counts[0] + counts[VOTES_PER_PAIR];
        let unanimous_ours = if una == 0 { 0.0 } else { 100.0 * counts[VOTES_PER_PAIR] as f64 / una as f64 };
        Breakdown { pairs: n, counts, histogram, majority: pct(maj), unanimous: pct(una), unanimous_ours }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriterionReport {
    pub overall: Breakdown,
    pub per_category: BTreeMap<String, Breakdown>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TallyReport {
    pub votes_per_pair: usize,
    pub realism: CriterionReport,
    pub coherence: CriterionReport,
}

/// Majority-vote report. Every pair needs exactly five votes and every vote
/// must name a known pair; offenders are listed in `IncompleteSession`.
pub fn tally(pairs: &[PairRecord], key: &[KeyRecord], votes: &[VoteRecord]) -> Result<TallyReport> {
    let ours: HashMap<&str, Side> = key.iter().map(|k| (k.pair_id.as_str(), k.ours)).collect();
    let mut per_pair: BTreeMap<&str, (usize, usize, usize)> = BTreeMap::new();
    for p in pairs {
        if !ours.contains_key(p.pair_id.as_str()) {
            return Err(Error::Format(format!("pair {} missing from key file", p.pair_id)));
        }
        per_pair.insert(p.pair_id.as_str(), (0, 0, 0));
    }
    let mut bad: BTreeSet<String> = BTreeSet::new();
    for v in votes {
        v.validate()?;
        match per_pair.get_mut(v.pair_id.as_str()) {
            Some(e) => {
                let side = ours[v.pair_id.as_str()];
                e.0 += 1;
                e.1 += (v.realism_choice == side) as usize;
                e.2 += (v.coherence_choice == side) as usize;
            }
            None => {
                bad.insert(v.pair_id.clone());
            }
        }
    }
    bad.extend(per_pair.iter().filter(|(_, e)| e.0 != VOTES_PER_PAIR).map(|(id, _)| id.to_string()));
    if !bad.is_empty() {
        return Err(Error::IncompleteSession(bad.into_iter().collect()));
    }
    let cat_of: HashMap<&str, &str> = pairs.iter().map(|p| (p.pair_id.as_str(), p.category.as_str())).collect();
    let mut real: BTreeMap<String, [usize; VOTES_PER_PAIR + 1]> = BTreeMap::new();
    let mut coh: BTreeMap<String, [usize; VOTES_PER_PAIR + 1]> = BTreeMap::new();
    for (id, &(_, r, c)) in &per_pair {
        let cat = cat_of[id].to_string();
        real.entry(cat.clone()).or_default()[r] += 1;
        coh.entry(cat).or_default()[c] += 1;
    }
    Ok(TallyReport { votes_per_pair: VOTES_PER_PAIR, realism: criterion(real), coherence: criterion(coh) })
}

fn criterion(per_cat: BTreeMap<String, [usize; VOTES_PER_PAIR + 1]>) -> CriterionReport {
    let mut total = [0usize; VOTES_PER_PAIR + 1];
    for c in per_cat.values() {
        for (t, x) in total.iter_mut().zip(c) {
            *t += x;
        }
    }
    CriterionReport {
        overall: Breakdown::from_counts(total),
        per_category: per_cat.into_iter().map(|(k, c)| (k, Breakdown::from_counts(c))).collect(),
    }
}

/// Builds pairs, a key and a complete vote set whose per-pair counts for our
/// shape follow the given per-category histograms (count of pairs with
/// k = 0..=5 realism and coherence votes for ours). Used to exercise the
/// tally against known distributions.
pub fn synthetic_session(
    realism: &BTreeMap<String, [usize; VOTES_PER_PAIR + 1]>,
    coherence: &BTreeMap<String, [usize; VOTES_PER_PAIR + 1]>,
    seed: u64,
) -> Result<(Vec<PairRecord>, Vec<KeyRecord>, Vec<VoteRecord>)> {
    let mut rng = rng::stream(seed, "humaneval-synthetic");
    let (mut pairs, mut key, mut votes) = (Vec::new(), Vec::new(), Vec::new());
    for (cat, rh) in realism {
        let ch = coherence
            .get(cat)
            .ok_or_else(|| Error::InvalidArgument(format!("category {cat} missing from coherence histogram")))?;
        let expand = |h: &[usize; VOTES_PER_PAIR + 1]| -> Vec<usize> {
            h.iter().enumerate().flat_map(|(k, &c)| std::iter::repeat(k).take(c)).collect()
        };
        let mut r = expand(rh);
        let c = expand(ch);
        if r.len() != c.len() {
            return Err(Error::SizeMismatch(format!("category {cat}: {} realism vs {} coherence pairs", r.len(), c.len())));
        }
        r.shuffle(&mut rng);
        for (i, (&rk, &ck)) in r.iter().zip(&c).enumerate() {
            let pair_id = format!("{cat}-{i:04}");
            let side = if rng.gen_bool(0.5) { Side::A } else { Side::B };
            pairs.push(PairRecord {
                pair_id: pair_id.clone(),
                category: cat.clone(),
                query_image: PathBuf::from(format!("{pair_id}.icim")),
                shape_a: PathBuf::from(format!("{pair_id}-a.icvx")),
                shape_b: PathBuf::from(format!("{pair_id}-b.icvx")),
            });
            key.push(KeyRecord { pair_id: pair_id.clone(), ours: side });
            let mut rv: Vec<bool> = (0..VOTES_PER_PAIR).map(|j| j < rk).collect();
            let mut cv: Vec<bool> = (0..VOTES_PER_PAIR).map(|j| j < ck).collect();
            rv.shuffle(&mut rng);
            cv.shuffle(&mut rng);
            for j in 0..VOTES_PER_PAIR {
                let t0 = rng.gen_range(0..1_000_000u64);
                votes.push(VoteRecord {
                    pair_id: pair_id.clone(),
                    annotator_id: format!("{:032x}", rng.gen::<u128>()),
                    realism_choice: if rv[j] { side } else { side.other() },
                    coherence_choice: if cv[j] { side } else { side.other() },
                    realism_at_ms: t0,
                    coherence_at_ms: t0 + rng.gen_range(0..30_000u64),
                    protocol_version: PROTOCOL_VERSION,
                });
            }
        }
    }
    votes.shuffle(&mut rng);
    Ok((pairs, key, votes))
}
