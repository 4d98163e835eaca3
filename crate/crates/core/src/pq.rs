//! Product-quantization docids.
//!
//! Document vectors are split into `g` equal subvectors; each group gets its
//! own `k`-centroid codebook from Lloyd's k-means. A docid is the tuple of
//! nearest-centroid indices, made unique across the corpus by substituting
//! next-nearest centroids from the last group backwards.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::squared_distance;

pub const MAX_LLOYD_ITERATIONS: usize = 100;
const SNAPSHOT_VERSION: u32 = 1;

/// A length-`g` sequence of cluster indices.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Docid(Vec<u32>);

impl Docid {
    pub fn new(codes: Vec<u32>, clusters: usize) -> Result<Self> {
        if let Some(c) = codes.iter().find(|&&c| c as usize >= clusters) {
            return Err(Error::InvalidDocid(format!("code {c} outside [0, {clusters})")));
        }
        Ok(Self(codes))
    }

    /// Wraps codes already known to be in range.
    pub(crate) fn from_codes(codes: Vec<u32>) -> Self {
        Self(codes)
    }

    pub fn codes(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for Docid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(u32::to_string).collect();
        write!(f, "{}", parts.join("-"))
    }
}

/// Maps `(group, cluster)` onto the `g·k` position-specific docid tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DocidVocabulary {
    pub groups: usize,
    pub clusters: usize,
}

impl DocidVocabulary {
    pub fn len(&self) -> usize {
        self.groups * self.clusters
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn global_id(&self, group: usize, cluster: u32) -> usize {
        group * self.clusters + cluster as usize
    }

    pub fn split(&self, global: usize) -> (usize, u32) {
        (global / self.clusters, (global % self.clusters) as u32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub groups: usize,
    pub clusters: usize,
    pub subdim: usize,
    /// `groups × clusters × subdim`, row-major.
    pub centroids: Vec<f64>,
    pub iteration_tag: u64,
}

impl Codebook {
    pub fn dim(&self) -> usize {
        self.groups * self.subdim
    }

    pub fn centroid(&self, group: usize, cluster: usize) -> &[f64] {
        let start = (group * self.clusters + cluster) * self.subdim;
        &self.centroids[start..start + self.subdim]
    }

    fn group_centroids(&self, group: usize) -> Vec<Vec<f64>> {
        (0..self.clusters).map(|c| self.centroid(group, c).to_vec()).collect()
    }

    fn check_dim(&self, vector: &[f64]) -> Result<()> {
        if vector.len() != self.dim() {
            return Err(Error::Shape(format!(
                "vector of dimension {} against codebook of dimension {}",
                vector.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Centroid indices of `group` ordered by distance to the subvector,
    /// ties broken by smaller index.
    pub fn ranked_clusters(&self, group: usize, vector: &[f64]) -> Vec<u32> {
        let sub = &vector[group * self.subdim..(group + 1) * self.subdim];
        let mut ranked: Vec<(f64, u32)> = (0..self.clusters)
            .map(|c| (squared_distance(sub, self.centroid(group, c)), c as u32))
            .collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        ranked.into_iter().map(|(_, c)| c).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(
            path,
            &Versioned {
                version: SNAPSHOT_VERSION,
                body: self,
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let v: Versioned<Codebook> = read_json(path)?;
        check_version(v.version)?;
        let cb = v.body;
        if cb.centroids.len() != cb.groups * cb.clusters * cb.subdim {
            return Err(Error::Format("codebook centroid count mismatch".into()));
        }
        Ok(cb)
    }
}

/// Nearest centroid per group; ties go to the smaller index.
pub fn assign_docid(codebook: &Codebook, vector: &[f64]) -> Result<Docid> {
    codebook.check_dim(vector)?;
    let codes = (0..codebook.groups)
        .map(|g| {
            let sub = &vector[g * codebook.subdim..(g + 1) * codebook.subdim];
            nearest(sub, (0..codebook.clusters).map(|c| codebook.centroid(g, c))).0 as u32
        })
        .collect();
    Ok(Docid(codes))
}

fn nearest<'a>(point: &[f64], centroids: impl Iterator<Item = &'a [f64]>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.enumerate() {
        let d = squared_distance(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Trains a PQ codebook with one k-means problem per group.
///
/// Initialization is k-means++ from `seed`, or the `warm_start` centroids.
/// Lloyd iterations stop at an assignment fixpoint or after 100 rounds.
pub fn train_codebook(
    vectors: &[Vec<f64>],
    groups: usize,
    clusters: usize,
    seed: u64,
    warm_start: Option<&Codebook>,
) -> Result<Codebook> {
    if groups == 0 || clusters == 0 {
        return Err(Error::Config("groups and clusters must be at least 1".into()));
    }
    if vectors.len() < clusters {
        return Err(Error::TooFewVectors {
            got: vectors.len(),
            need: clusters,
        });
    }
    let dim = vectors[0].len();
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::Shape("vectors of unequal dimension".into()));
    }
    if !dim.is_multiple_of(groups) {
        return Err(Error::Config(format!(
            "dimension {dim} is not divisible by groups {groups}"
        )));
    }
    let subdim = dim / groups;
    if let Some(w) = warm_start {
        if w.groups != groups || w.clusters != clusters || w.subdim != subdim {
            return Err(Error::Shape("warm-start codebook has a different shape".into()));
        }
    }

    let mut centroids = Vec::with_capacity(groups * clusters * subdim);
    for g in 0..groups {
        let points: Vec<&[f64]> = vectors.iter().map(|v| &v[g * subdim..(g + 1) * subdim]).collect();
        let init = match warm_start {
            Some(w) => w.group_centroids(g),
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(group_seed(seed, g));
                kmeans_plus_plus(&points, clusters, &mut rng)
            }
        };
        let (group_centroids, _) = lloyd(&points, init, MAX_LLOYD_ITERATIONS);
        for c in group_centroids {
            centroids.extend(c);
        }
    }
    Ok(Codebook {
        groups,
        clusters,
        subdim,
        centroids,
        iteration_tag: warm_start.map_or(0, |w| w.iteration_tag),
    })
}

fn group_seed(seed: u64, group: usize) -> u64 {
    seed ^ (group as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn kmeans_plus_plus(points: &[&[f64]], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut chosen = vec![rng.random_range(0..points.len())];
    let mut d2: Vec<f64> = points.iter().map(|p| squared_distance(p, points[chosen[0]])).collect();
    while chosen.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(dist) => dist.sample(rng),
            // every remaining point coincides with a chosen center
            Err(_) => {
                let free: Vec<usize> = (0..points.len()).filter(|i| !chosen.contains(i)).collect();
                free[rng.random_range(0..free.len())]
            }
        };
        chosen.push(next);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(squared_distance(p, points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i].to_vec()).collect()
}

fn assign_all(points: &[&[f64]], centroids: &[Vec<f64>]) -> Vec<usize> {
    points
        .iter()
        .map(|p| nearest(p, centroids.iter().map(Vec::as_slice)).0)
        .collect()
}

/// Empty clusters take the point farthest from its own centroid, drawn from
/// clusters that keep at least one member.
fn repair_empty(points: &[&[f64]], centroids: &mut [Vec<f64>], assign: &mut [usize]) {
    let k = centroids.len();
    let mut counts = vec![0usize; k];
    for &a in assign.iter() {
        counts[a] += 1;
    }
    for c in 0..k {
        if counts[c] > 0 {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in points.iter().enumerate() {
            if counts[assign[i]] < 2 {
                continue;
            }
            let d = squared_distance(p, &centroids[assign[i]]);
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        let Some((i, _)) = best else { return };
        counts[assign[i]] -= 1;
        counts[c] += 1;
        assign[i] = c;
        centroids[c] = points[i].to_vec();
    }
}

fn means(points: &[&[f64]], assign: &[usize], previous: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let k = previous.len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assign) {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(p.iter()) {
            *s += x;
        }
    }
    sums.into_iter()
        .zip(counts)
        .zip(previous)
        .map(|((s, n), prev)| {
            if n == 0 {
                prev.clone()
            } else {
                s.into_iter().map(|x| x / n as f64).collect()
            }
        })
        .collect()
}

/// Lloyd's algorithm; returns centroids and the final assignment.
pub(crate) fn lloyd(
    points: &[&[f64]],
    mut centroids: Vec<Vec<f64>>,
    max_iterations: usize,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut assign = assign_all(points, &centroids);
    repair_empty(points, &mut centroids, &mut assign);
    for _ in 0..max_iterations {
        centroids = means(points, &assign, &centroids);
        let mut next = assign_all(points, &centroids);
        repair_empty(points, &mut centroids, &mut next);
        if next == assign {
            break;
        }
        assign = next;
    }
    (centroids, assign)
}

/// Bijective doc_key ↔ docid map for one bootstrap iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct DocidTable {
    groups: usize,
    clusters: usize,
    forward: BTreeMap<String, Docid>,
    reverse: BTreeMap<Docid, String>,
    pub iteration_tag: u64,
}

impl DocidTable {
    /// Builds a table from already-unique docids.
    pub fn from_entries(
        groups: usize,
        clusters: usize,
        entries: impl IntoIterator<Item = (String, Docid)>,
        iteration_tag: u64,
    ) -> Result<Self> {
        let mut forward = BTreeMap::new();
        let mut reverse = BTreeMap::new();
        for (key, id) in entries {
            if id.len() != groups || id.codes().iter().any(|&c| c as usize >= clusters) {
                return Err(Error::InvalidDocid(format!("{id} for {key}")));
            }
            if let Some(other) = reverse.insert(id.clone(), key.clone()) {
                return Err(Error::InvalidDocid(format!("{id} shared by {other} and {key}")));
            }
            if forward.insert(key.clone(), id).is_some() {
                return Err(Error::Format(format!("doc_key {key} listed twice")));
            }
        }
        Ok(Self {
            groups,
            clusters,
            forward,
            reverse,
            iteration_tag,
        })
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn clusters(&self) -> usize {
        self.clusters
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn docid(&self, doc_key: &str) -> Option<&Docid> {
        self.forward.get(doc_key)
    }

    pub fn doc_key(&self, docid: &Docid) -> Option<&str> {
        self.reverse.get(docid).map(String::as_str)
    }

    /// Entries ordered by doc_key.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Docid)> {
        self.forward.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Entries ordered by docid.
    pub fn iter_by_docid(&self) -> impl Iterator<Item = (&Docid, &str)> {
        self.reverse.iter().map(|(k, v)| (k, v.as_str()))
    }

    /// Order-sensitive digest of the table contents (FNV-1a).
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (k, id) in &self.forward {
            feed(k.as_bytes());
            feed(&[0xff]);
            for c in id.codes() {
                feed(&c.to_le_bytes());
            }
        }
        h
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let snap = TableSnapshot {
            groups: self.groups,
            clusters: self.clusters,
            iteration_tag: self.iteration_tag,
            docids: self
                .forward
                .iter()
                .map(|(k, v)| TableEntry {
                    doc_key: k.clone(),
                    codes: v.0.clone(),
                })
                .collect(),
        };
        write_json(
            path,
            &Versioned {
                version: SNAPSHOT_VERSION,
                body: &snap,
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let v: Versioned<TableSnapshot> = read_json(path)?;
        check_version(v.version)?;
        let s = v.body;
        Self::from_entries(
            s.groups,
            s.clusters,
            s.docids.into_iter().map(|e| (e.doc_key, Docid(e.codes))),
            s.iteration_tag,
        )
    }
}

#[derive(Serialize, Deserialize)]
struct TableEntry {
    doc_key: String,
    codes: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct TableSnapshot {
    groups: usize,
    clusters: usize,
    iteration_tag: u64,
    docids: Vec<TableEntry>,
}

#[derive(Serialize, Deserialize)]
struct Versioned<T> {
    version: u32,
    #[serde(flatten)]
    body: T,
}

fn check_version(v: u32) -> Result<()> {
    if v != SNAPSHOT_VERSION {
        return Err(Error::Format(format!("unsupported snapshot version {v}")));
    }
    Ok(())
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

/// Assigns raw PQ codes and resolves collisions into a bijection.
///
/// Documents sharing a raw code are ordered by key; the first keeps it. Each
/// later one takes the next-nearest unused centroid in the last group, then
/// the group before it, and so on. When no single-group change is free, the
/// nearest unused code overall is taken, so resolution only fails when every
/// code is in use.
pub fn table_from_vectors(
    keys: &[&str],
    vectors: &[Vec<f64>],
    codebook: &Codebook,
    iteration_tag: u64,
) -> Result<DocidTable> {
    let mut raw: BTreeMap<Docid, Vec<usize>> = BTreeMap::new();
    for (i, v) in vectors.iter().enumerate() {
        raw.entry(assign_docid(codebook, v)?).or_default().push(i);
    }
    let mut used: BTreeSet<Docid> = raw.keys().cloned().collect();
    let mut entries: Vec<(String, Docid)> = Vec::with_capacity(keys.len());
    let mut colliders: Vec<(usize, Docid)> = Vec::new();
    for (code, mut members) in raw {
        members.sort_by(|&a, &b| keys[a].cmp(keys[b]));
        entries.push((keys[members[0]].to_string(), code.clone()));
        colliders.extend(members[1..].iter().map(|&i| (i, code.clone())));
    }
    colliders.sort_by(|a, b| keys[a.0].cmp(keys[b.0]));
    for (i, code) in colliders {
        let resolved =
            substitute(codebook, &vectors[i], &code, &used).ok_or_else(|| Error::CodeSpaceExhausted(code.0.clone()))?;
        used.insert(resolved.clone());
        entries.push((keys[i].to_string(), resolved));
    }
    DocidTable::from_entries(codebook.groups, codebook.clusters, entries, iteration_tag)
}

fn substitute(codebook: &Codebook, vector: &[f64], raw: &Docid, used: &BTreeSet<Docid>) -> Option<Docid> {
    for group in (0..codebook.groups).rev() {
        for &alt in codebook.ranked_clusters(group, vector).iter().skip(1) {
            let mut candidate = raw.clone();
            candidate.0[group] = alt;
            if !used.contains(&candidate) {
                return Some(candidate);
            }
        }
    }
    nearest_unused(codebook, vector, used)
}

/// Every code in order of total squared distance (ties by code order),
/// stopping at the first unused one. Each combination of per-group ranks is
/// pushed once by only advancing groups at or after the last advanced one.
fn nearest_unused(codebook: &Codebook, vector: &[f64], used: &BTreeSet<Docid>) -> Option<Docid> {
    let g = codebook.groups;
    let ranked: Vec<Vec<(f64, u32)>> = (0..g)
        .map(|t| {
            let sub = &vector[t * codebook.subdim..(t + 1) * codebook.subdim];
            codebook
                .ranked_clusters(t, vector)
                .into_iter()
                .map(|c| (squared_distance(sub, codebook.centroid(t, c as usize)), c))
                .collect()
        })
        .collect();
    let cost = |ranks: &[usize]| ranks.iter().enumerate().map(|(t, &r)| ranked[t][r].0).sum::<f64>();
    let code = |ranks: &[usize]| Docid(ranks.iter().enumerate().map(|(t, &r)| ranked[t][r].1).collect());

    #[derive(PartialEq)]
    struct Entry(f64, Docid, Vec<usize>, usize);
    impl Eq for Entry {}
    impl Ord for Entry {
        // min-heap on (cost, code)
        fn cmp(&self, o: &Self) -> std::cmp::Ordering {
            o.0.total_cmp(&self.0).then_with(|| o.1.cmp(&self.1))
        }
    }
    impl PartialOrd for Entry {
        fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
            Some(self.cmp(o))
        }
    }

    let start = vec![0; g];
    let mut heap = std::collections::BinaryHeap::new();
    heap.push(Entry(cost(&start), code(&start), start, 0));
    while let Some(Entry(_, id, ranks, first)) = heap.pop() {
        if !used.contains(&id) {
            return Some(id);
        }
        for t in first..g {
            if ranks[t] + 1 < codebook.clusters {
                let mut next = ranks.clone();
                next[t] += 1;
                heap.push(Entry(cost(&next), code(&next), next, t));
            }
        }
    }
    None
}

/// Encodes every document with `params`.
pub fn encode_corpus(corpus: &Corpus, params: &ModelParams) -> Result<Vec<Vec<f64>>> {
    corpus
        .documents()
        .iter()
        .map(|d| Ok(params.encode(&d.tokens)?.doc_vector))
        .collect()
}

pub fn build_docid_table(corpus: &Corpus, params: &ModelParams, codebook: &Codebook) -> Result<DocidTable> {
    let vectors = encode_corpus(corpus, params)?;
    let keys: Vec<&str> = corpus.documents().iter().map(|d| d.doc_key.as_str()).collect();
    table_from_vectors(&keys, &vectors, codebook, codebook.iteration_tag)
}

/// Re-encodes the corpus, retrains the codebook (warm or fresh) and rebuilds
/// the table with the iteration tag advanced by one.
pub fn update_docids(
    corpus: &Corpus,
    params: &ModelParams,
    previous: &Codebook,
    seed: u64,
    warm_start: bool,
) -> Result<(Codebook, DocidTable)> {
    let vectors = encode_corpus(corpus, params)?;
    let mut codebook = train_codebook(
        &vectors,
        previous.groups,
        previous.clusters,
        seed,
        warm_start.then_some(previous),
    )?;
    codebook.iteration_tag = previous.iteration_tag + 1;
    let keys: Vec<&str> = corpus.documents().iter().map(|d| d.doc_key.as_str()).collect();
    let table = table_from_vectors(&keys, &vectors, &codebook, codebook.iteration_tag)?;
    Ok((codebook, table))
}
