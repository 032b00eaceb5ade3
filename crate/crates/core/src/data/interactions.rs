//! User histories over items with dense embeddings.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::taxonomy::TaxonomyGraph;
use crate::error::{Error, Result};
use crate::seed::rng_for;

pub const MIN_HISTORY: usize = 5;
pub const MAX_HISTORY: usize = 20;

/// Items (sorted identifiers with one vector each) and per-user item
/// sequences in chronological order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InteractionDataset {
    pub items: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
    /// `(user_id, item indices)`, sorted by user id.
    pub sequences: Vec<(String, Vec<usize>)>,
}

impl InteractionDataset {
    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    pub fn item_index(&self, id: &str) -> Option<usize> {
        self.items.binary_search_by(|e| e.as_str().cmp(id)).ok()
    }

    pub fn write_histories<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "user_id\titem_id\ttimestamp")?;
        for (user, seq) in &self.sequences {
            for (ts, &item) in seq.iter().enumerate() {
                writeln!(out, "{user}\t{}\t{ts}", self.items[item])?;
            }
        }
        Ok(())
    }

    pub fn write_embeddings<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (id, v) in self.items.iter().zip(&self.vectors) {
            let line = serde_json::to_string(&EmbeddingRecord {
                item_id: id.clone(),
                vector: v.clone(),
            })?;
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct EmbeddingRecord {
    item_id: String,
    vector: Vec<f64>,
}

/// Read `{item_id, vector}` JSON lines into a sorted map.
pub fn load_embeddings(path: &Path) -> Result<BTreeMap<String, Vec<f64>>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    let mut dim = None;
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EmbeddingRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        match dim {
            None => dim = Some(rec.vector.len()),
            Some(d) if d != rec.vector.len() => {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: rec.vector.len(),
                })
            }
            _ => {}
        }
        out.insert(rec.item_id, rec.vector);
    }
    Ok(out)
}

/// Load histories (`user_id, item_id, timestamp` TSV, header optional) and
/// item embeddings. Histories are ordered by timestamp (stable), users with
/// fewer than 5 items are dropped and the rest keep their 20 most recent.
pub fn load_interactions(histories: &Path, embeddings: &Path) -> Result<InteractionDataset> {
    let emb = load_embeddings(embeddings)?;
    let file = std::fs::File::open(histories).map_err(|e| Error::io(histories, e))?;
    let mut raw: BTreeMap<String, Vec<(f64, String)>> = BTreeMap::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(histories, e))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || Error::Data(format!("{}:{}: expected `user_id<TAB>item_id<TAB>timestamp`", histories.display(), n + 1));
        if f.len() != 3 {
            return Err(bad());
        }
        if n == 0 && f[0] == "user_id" {
            continue;
        }
        let ts: f64 = f[2].trim().parse().map_err(|_| bad())?;
        raw.entry(f[0].to_string()).or_default().push((ts, f[1].to_string()));
    }
    let missing: BTreeSet<&str> = raw
        .values()
        .flatten()
        .map(|(_, item)| item.as_str())
        .filter(|item| !emb.contains_key(*item))
        .collect();
    if !missing.is_empty() {
        let list: Vec<&str> = missing.into_iter().take(20).collect();
        return Err(Error::Data(format!("items without embeddings: {}", list.join(", "))));
    }
    let items: Vec<String> = emb.keys().cloned().collect();
    let vectors: Vec<Vec<f64>> = emb.into_values().collect();
    let index = |id: &str| items.binary_search_by(|e| e.as_str().cmp(id)).unwrap();
    let mut sequences = Vec::new();
    for (user, mut events) in raw {
        if events.len() < MIN_HISTORY {
            continue;
        }
        events.sort_by(|a, b| a.0.total_cmp(&b.0));
        let start = events.len().saturating_sub(MAX_HISTORY);
        let seq = events[start..].iter().map(|(_, item)| index(item)).collect();
        sequences.push((user, seq));
    }
    Ok(InteractionDataset {
        items,
        vectors,
        sequences,
    })
}

/// Knobs of the synthetic interaction generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthInteractions {
    /// Embedding dimension.
    pub dim: usize,
    /// Noise scale of the root's children.
    pub sigma: f64,
    /// Multiplicative noise decay per level below that.
    pub decay: f64,
    /// Depth of the subtree a user's history stays in.
    pub home_depth: usize,
    /// Probability that the next item shares the previous item's parent.
    pub sibling_prob: f64,
    /// Probability that the next item comes from the home subtree otherwise.
    pub home_prob: f64,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for SynthInteractions {
    fn default() -> Self {
        SynthInteractions {
            dim: 16,
            sigma: 0.6,
            decay: 0.6,
            home_depth: 2,
            sibling_prob: 0.4,
            home_prob: 0.8,
            min_len: MIN_HISTORY,
            max_len: MAX_HISTORY,
        }
    }
}

/// Generate items and users from a tree-shaped taxonomy.
///
/// Every node's vector is its parent's vector plus Gaussian noise whose
/// scale shrinks with depth; leaves are the items. Each user draws a home
/// subtree and a length, starts at a random home leaf, and then repeatedly
/// picks a sibling of the previous item, another home leaf, or any leaf.
pub fn synth_interactions(
    taxonomy: &TaxonomyGraph,
    users: usize,
    seed: u64,
    knobs: &SynthInteractions,
) -> Result<InteractionDataset> {
    let leaves = taxonomy.leaves();
    if leaves.len() < 50 {
        return Err(Error::Config(format!(
            "synthetic interactions need at least 50 leaves, taxonomy has {}",
            leaves.len()
        )));
    }
    if knobs.min_len < MIN_HISTORY || knobs.max_len > MAX_HISTORY || knobs.min_len > knobs.max_len {
        return Err(Error::Config("history lengths must satisfy 5 <= min_len <= max_len <= 20".into()));
    }
    let depth = taxonomy.ancestor_counts();
    // direct parent = the ancestor one level up
    let mut parent = vec![None; taxonomy.len()];
    for &(p, c) in taxonomy.edges() {
        if depth[p] + 1 == depth[c] {
            parent[c] = Some(p);
        }
    }
    let mut order: Vec<usize> = (0..taxonomy.len()).collect();
    order.sort_by_key(|&i| (depth[i], i));
    let mut rng = rng_for(seed, "synth_interactions/embeddings");
    let mut node_vec = vec![Vec::new(); taxonomy.len()];
    for &v in &order {
        node_vec[v] = match parent[v] {
            None => vec![0.0; knobs.dim],
            Some(p) => {
                let scale = knobs.sigma * knobs.decay.powi(depth[p] as i32);
                let normal = Normal::new(0.0, scale).map_err(|e| Error::Config(e.to_string()))?;
                node_vec[p].iter().map(|x| x + normal.sample(&mut rng)).collect()
            }
        };
    }
    let items: Vec<String> = leaves.iter().map(|&l| taxonomy.name(l).to_string()).collect();
    let vectors: Vec<Vec<f64>> = leaves.iter().map(|&l| node_vec[l].clone()).collect();

    // leaf positions grouped by their direct parent and by home ancestor
    let ancestor_at = |mut v: usize, d: usize| {
        while depth[v] > d {
            v = parent[v].expect("tree node without parent");
        }
        v
    };
    let mut by_parent: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut by_home: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in leaves.iter().enumerate() {
        by_parent.entry(parent[l].unwrap_or(l)).or_default().push(i);
        by_home.entry(ancestor_at(l, knobs.home_depth.min(depth[l]))).or_default().push(i);
    }
    let homes: Vec<&Vec<usize>> = by_home.values().collect();
    let mut rng = rng_for(seed, "synth_interactions/users");
    let digits = users.max(1).to_string().len();
    let mut sequences = Vec::with_capacity(users);
    for u in 0..users {
        let home = homes[rng.random_range(0..homes.len())];
        let len = rng.random_range(knobs.min_len..=knobs.max_len);
        let mut seq = vec![home[rng.random_range(0..home.len())]];
        while seq.len() < len {
            let prev = leaves[*seq.last().unwrap()];
            let r: f64 = rng.random();
            let pool: &Vec<usize> = if r < knobs.sibling_prob {
                &by_parent[&parent[prev].unwrap_or(prev)]
            } else if r < knobs.sibling_prob + (1.0 - knobs.sibling_prob) * knobs.home_prob {
                home
            } else {
                seq.push(rng.random_range(0..leaves.len()));
                continue;
            };
            seq.push(pool[rng.random_range(0..pool.len())]);
        }
        sequences.push((format!("u{u:0digits$}"), seq));
    }
    // items are sorted by name because taxonomy entities are
    Ok(InteractionDataset {
        items,
        vectors,
        sequences,
    })
}

/// Per-user split: the last item is the test target, the second-to-last
/// the validation target, everything before is training history.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeaveOneOut {
    pub users: Vec<UserSplit>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSplit {
    pub user: String,
    pub train: Vec<usize>,
    pub valid: usize,
    pub test: usize,
}

impl UserSplit {
    pub fn valid_context(&self) -> &[usize] {
        &self.train
    }

    /// Test context: training history followed by the validation item.
    pub fn test_context(&self) -> Vec<usize> {
        let mut c = self.train.clone();
        c.push(self.valid);
        c
    }
}

pub fn leave_one_out(dataset: &InteractionDataset) -> Result<LeaveOneOut> {
    let users = dataset
        .sequences
        .iter()
        .map(|(user, seq)| {
            if seq.len() < MIN_HISTORY {
                return Err(Error::Data(format!("user {user} has fewer than {MIN_HISTORY} items")));
            }
            let n = seq.len();
            Ok(UserSplit {
                user: user.clone(),
                train: seq[..n - 2].to_vec(),
                valid: seq[n - 2],
                test: seq[n - 1],
            })
        })
        .collect::<Result<_>>()?;
    Ok(LeaveOneOut { users })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::taxonomy::synth_tree;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn loader_filters_and_truncates() {
        let dir = tempfile::tempdir().unwrap();
        let mut emb = String::new();
        for i in 0..30 {
            emb.push_str(&format!("{{\"item_id\":\"i{i:02}\",\"vector\":[{i}.0,1.0]}}\n"));
        }
        let mut hist = String::from("user_id\titem_id\ttimestamp\n");
        for t in 0..4 {
            hist.push_str(&format!("short\ti{t:02}\t{t}\n"));
        }
        for t in (0..25).rev() {
            hist.push_str(&format!("long\ti{t:02}\t{t}\n"));
        }
        for t in [3, 1, 2, 0, 4] {
            hist.push_str(&format!("mid\ti{t:02}\t{t}\n"));
        }
        let d = load_interactions(&write(dir.path(), "h.tsv", &hist), &write(dir.path(), "e.jsonl", &emb)).unwrap();
        assert_eq!(d.sequences.len(), 2);
        assert_eq!(d.sequences[0].0, "long");
        assert_eq!(d.sequences[0].1, (5..25).collect::<Vec<_>>());
        assert_eq!(d.sequences[1], ("mid".to_string(), vec![0, 1, 2, 3, 4]));
        assert_eq!(d.dim(), 2);

        let bad = write(dir.path(), "b.tsv", "u\tnope\t1\n");
        let err = load_interactions(&bad, &dir.path().join("e.jsonl")).unwrap_err();
        assert!(matches!(err, Error::Data(ref m) if m.contains("nope")));
    }

    #[test]
    fn leave_one_out_example() {
        let d = InteractionDataset {
            items: (0..5).map(|i| i.to_string()).collect(),
            vectors: vec![vec![0.0]; 5],
            sequences: vec![("u".into(), vec![0, 1, 2, 3, 4])],
        };
        let s = leave_one_out(&d).unwrap();
        assert_eq!(s.users[0].train, vec![0, 1, 2]);
        assert_eq!((s.users[0].valid, s.users[0].test), (3, 4));
        assert_eq!(s.users[0].test_context(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn synthetic_generator_is_deterministic_and_bounded() {
        let tree = synth_tree(4, 3, 1).unwrap();
        let knobs = SynthInteractions::default();
        let a = synth_interactions(&tree, 50, 7, &knobs).unwrap();
        assert_eq!(a, synth_interactions(&tree, 50, 7, &knobs).unwrap());
        assert_eq!(a.items.len(), 64);
        assert!(a.sequences.iter().all(|(_, s)| (5..=20).contains(&s.len())));
        assert!(synth_interactions(&tree, 0, 7, &knobs).unwrap().sequences.is_empty());
        assert!(synth_interactions(&synth_tree(2, 2, 0).unwrap(), 1, 0, &knobs).is_err());
    }
}
