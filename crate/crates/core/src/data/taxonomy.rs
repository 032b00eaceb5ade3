//! Hypernymy graphs.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seed::rng_for;

/// Largest synthetic tree [`synth_tree`] will build.
pub const MAX_SYNTH_NODES: usize = 100_000;

/// Entities (sorted identifiers) and directed `(hypernym, hyponym)` edges
/// between their indices.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TaxonomyGraph {
    entities: Vec<String>,
    edges: BTreeSet<(usize, usize)>,
    closed: bool,
}

impl TaxonomyGraph {
    /// Build from `(hyponym, hypernym)` name pairs. Duplicates collapse;
    /// self-edges are rejected.
    pub fn from_pairs<S: AsRef<str>>(pairs: &[(S, S)]) -> Result<Self> {
        let names: BTreeSet<&str> = pairs.iter().flat_map(|(a, b)| [a.as_ref(), b.as_ref()]).collect();
        let entities: Vec<String> = names.into_iter().map(str::to_string).collect();
        let index = |s: &str| entities.binary_search_by(|e| e.as_str().cmp(s)).unwrap();
        let mut edges = BTreeSet::new();
        for (hypo, hyper) in pairs {
            if hypo.as_ref() == hyper.as_ref() {
                return Err(Error::Data(format!("self-edge on `{}`", hypo.as_ref())));
            }
            edges.insert((index(hyper.as_ref()), index(hypo.as_ref())));
        }
        Ok(TaxonomyGraph {
            entities,
            edges,
            closed: false,
        })
    }

    pub fn entities(&self) -> &[String] {
        &self.entities
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entities[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entities.binary_search_by(|e| e.as_str().cmp(name)).ok()
    }

    /// `(hypernym, hyponym)` index pairs in sorted order.
    pub fn edges(&self) -> &BTreeSet<(usize, usize)> {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn has_edge(&self, hypernym: usize, hyponym: usize) -> bool {
        self.edges.contains(&(hypernym, hyponym))
    }

    /// Entities with no hyponyms.
    pub fn leaves(&self) -> Vec<usize> {
        let parents: BTreeSet<usize> = self.edges.iter().map(|&(p, _)| p).collect();
        (0..self.len()).filter(|i| !parents.contains(i)).collect()
    }

    /// Direct children lists, indexed by entity.
    pub fn children(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.len()];
        for &(p, c) in &self.edges {
            out[p].push(c);
        }
        out
    }

    /// Transitive closure; errors with one offending cycle if the edges are
    /// not acyclic.
    pub fn transitive_closure(&self) -> Result<TaxonomyGraph> {
        let children = self.children();
        let n = self.len();
        // 0 = unvisited, 1 = on stack, 2 = done
        let mut state = vec![0u8; n];
        let mut order = Vec::with_capacity(n);
        for start in 0..n {
            if state[start] != 0 {
                continue;
            }
            let mut stack: Vec<(usize, usize)> = vec![(start, 0)];
            state[start] = 1;
            while let Some(&mut (node, ref mut next)) = stack.last_mut() {
                if let Some(&child) = children[node].get(*next) {
                    *next += 1;
                    match state[child] {
                        0 => {
                            state[child] = 1;
                            stack.push((child, 0));
                        }
                        1 => {
                            let pos = stack.iter().position(|&(v, _)| v == child).unwrap();
                            let mut cycle: Vec<&str> = stack[pos..].iter().map(|&(v, _)| self.name(v)).collect();
                            cycle.push(self.name(child));
                            return Err(Error::Data(format!("cycle in taxonomy: {}", cycle.join(" -> "))));
                        }
                        _ => {}
                    }
                } else {
                    state[node] = 2;
                    order.push(node);
                    stack.pop();
                }
            }
        }
        // `order` is a post-order: children come before parents.
        let mut descendants: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        for &v in &order {
            let mut acc = BTreeSet::new();
            for &c in &children[v] {
                acc.insert(c);
                acc.extend(descendants[c].iter().copied());
            }
            descendants[v] = acc;
        }
        let edges = descendants
            .iter()
            .enumerate()
            .flat_map(|(p, ds)| ds.iter().map(move |&c| (p, c)))
            .collect();
        Ok(TaxonomyGraph {
            entities: self.entities.clone(),
            edges,
            closed: true,
        })
    }

    /// Ancestor count per entity (its depth in a tree).
    pub fn ancestor_counts(&self) -> Vec<usize> {
        let mut out = vec![0; self.len()];
        for &(_, c) in &self.edges {
            out[c] += 1;
        }
        out
    }

    /// Write `hyponym \t hypernym` rows with a header.
    pub fn write_tsv<W: Write>(&self, out: W) -> std::io::Result<()> {
        write_pairs(out, self.edges.iter().map(|&(p, c)| (self.name(c), self.name(p))))
    }
}

pub(crate) fn write_pairs<'a, W: Write>(
    mut out: W,
    pairs: impl Iterator<Item = (&'a str, &'a str)>,
) -> std::io::Result<()> {
    writeln!(out, "hyponym\thypernym")?;
    for (hypo, hyper) in pairs {
        writeln!(out, "{hypo}\t{hyper}")?;
    }
    Ok(())
}

fn is_header(fields: &[&str]) -> bool {
    let f: Vec<String> = fields.iter().map(|s| s.to_ascii_lowercase()).collect();
    matches!(
        (f[0].as_str(), f[1].as_str()),
        ("hyponym", "hypernym") | ("hyponym_id", "hypernym_id")
    )
}

/// Parse `(hyponym, hypernym)` rows from a TSV file; a header row is
/// optional and blank lines are skipped.
pub fn read_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 || fields.iter().any(|f| f.trim().is_empty()) {
            return Err(Error::Data(format!(
                "{}:{}: expected `hyponym<TAB>hypernym`",
                path.display(),
                n + 1
            )));
        }
        if n == 0 && is_header(&fields) {
            continue;
        }
        pairs.push((fields[0].trim().to_string(), fields[1].trim().to_string()));
    }
    Ok(pairs)
}

pub fn load_taxonomy(path: &Path) -> Result<TaxonomyGraph> {
    TaxonomyGraph::from_pairs(&read_pairs(path)?)
}

/// Balanced tree with `branching` children per node and `depth` levels
/// below the root, transitively closed. Labels are shuffled by `seed`.
pub fn synth_tree(branching: usize, depth: usize, seed: u64) -> Result<TaxonomyGraph> {
    if branching < 2 || depth < 1 {
        return Err(Error::Config("synth_tree needs branching >= 2 and depth >= 1".into()));
    }
    let mut n: usize = 1;
    let mut width: usize = 1;
    for _ in 0..depth {
        width = width.saturating_mul(branching);
        n = n.saturating_add(width);
        if n > MAX_SYNTH_NODES {
            return Err(Error::Config(format!(
                "synthetic tree would exceed {MAX_SYNTH_NODES} nodes"
            )));
        }
    }
    let mut labels: Vec<usize> = (0..n).collect();
    labels.shuffle(&mut rng_for(seed, "synth_tree/labels"));
    let digits = n.to_string().len();
    let name = |i: usize| format!("n{:0digits$}", labels[i]);
    // breadth-first numbering: children of node i are i*b+1 ..= i*b+b
    let pairs: Vec<(String, String)> = (1..n).map(|i| (name(i), name((i - 1) / branching))).collect();
    TaxonomyGraph::from_pairs(&pairs)?.transitive_closure()
}

/// Disjoint train/test partition of a graph's edges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationSplit {
    /// `(hypernym, hyponym)` index pairs.
    pub train: Vec<(usize, usize)>,
    pub test: Vec<(usize, usize)>,
}

impl RelationSplit {
    /// Hypernyms of each entity in the given edge list.
    pub fn hypernyms_of(edges: &[(usize, usize)]) -> BTreeMap<usize, BTreeSet<usize>> {
        let mut m: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
        for &(p, c) in edges {
            m.entry(c).or_default().insert(p);
        }
        m
    }

    pub fn write_tsv<W: Write>(graph: &TaxonomyGraph, edges: &[(usize, usize)], out: W) -> std::io::Result<()> {
        write_pairs(out, edges.iter().map(|&(p, c)| (graph.name(c), graph.name(p))))
    }

    /// Read a split back against `graph`; unknown names are data errors.
    pub fn read_edges(graph: &TaxonomyGraph, path: &Path) -> Result<Vec<(usize, usize)>> {
        read_pairs(path)?
            .into_iter()
            .map(|(hypo, hyper)| {
                let find = |s: &str| {
                    graph
                        .index_of(s)
                        .ok_or_else(|| Error::Data(format!("{}: unknown entity `{s}`", path.display())))
                };
                Ok((find(&hyper)?, find(&hypo)?))
            })
            .collect()
    }
}

/// Random edge split with `round(test_fraction * edges)` test edges. Tries
/// up to 100 shuffles to keep every entity in at least one train edge, then
/// warns and keeps the last one.
pub fn split_relations(graph: &TaxonomyGraph, test_fraction: f64, seed: u64) -> Result<RelationSplit> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Config(format!("test fraction must lie in [0, 1), got {test_fraction}")));
    }
    let edges: Vec<(usize, usize)> = graph.edges().iter().copied().collect();
    let n_test = (test_fraction * edges.len() as f64).round() as usize;
    let mut rng = rng_for(seed, "split_relations");
    let mut split = None;
    for _ in 0..100 {
        let mut shuffled = edges.clone();
        shuffled.shuffle(&mut rng);
        let test: Vec<_> = shuffled[..n_test].to_vec();
        let train: Vec<_> = shuffled[n_test..].to_vec();
        let covered: BTreeSet<usize> = train.iter().flat_map(|&(p, c)| [p, c]).collect();
        let complete = (0..graph.len()).all(|i| covered.contains(&i));
        split = Some(RelationSplit { train, test });
        if complete {
            break;
        }
    }
    let mut split = split.unwrap_or(RelationSplit {
        train: Vec::new(),
        test: Vec::new(),
    });
    let covered: BTreeSet<usize> = split.train.iter().flat_map(|&(p, c)| [p, c]).collect();
    if covered.len() < graph.len() {
        log::warn!(
            "{} entities appear in no training relation after 100 attempts",
            graph.len() - covered.len()
        );
    }
    split.train.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(n: usize) -> TaxonomyGraph {
        let pairs: Vec<(String, String)> = (1..n).map(|i| (format!("c{i}"), format!("c{}", i - 1))).collect();
        TaxonomyGraph::from_pairs(&pairs).unwrap()
    }

    #[test]
    fn load_examples() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.tsv");
        std::fs::write(&p, "").unwrap();
        assert!(load_taxonomy(&p).unwrap().is_empty());
        std::fs::write(&p, "hyponym\thypernym\ndog\tanimal\ncat\tanimal\ndog\tanimal\n").unwrap();
        let g = load_taxonomy(&p).unwrap();
        assert_eq!(g.edge_count(), 2);
        assert_eq!(g.len(), 3);
        std::fs::write(&p, "a\tb\nbroken\n").unwrap();
        let err = load_taxonomy(&p).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
    }

    #[test]
    fn chain_closure() {
        let g = chain(5);
        assert_eq!((g.len(), g.edge_count()), (5, 4));
        let c = chain(3).transitive_closure().unwrap();
        assert_eq!(c.edge_count(), 3);
        assert!(c.is_closed());
        assert_eq!(c.transitive_closure().unwrap(), c);
    }

    #[test]
    fn cycle_is_named() {
        let g = TaxonomyGraph::from_pairs(&[("a", "b"), ("b", "c"), ("c", "a")]).unwrap();
        let err = g.transitive_closure().unwrap_err();
        assert!(matches!(err, Error::Data(ref m) if m.contains("cycle")));
    }

    #[test]
    fn synth_tree_sizes() {
        let t = synth_tree(2, 1, 0).unwrap();
        assert_eq!((t.len(), t.edge_count()), (3, 2));
        assert_eq!(synth_tree(4, 5, 1).unwrap().len(), 1365);
        // full binary tree of depth 3: sum over nodes of depth = 34
        let t = synth_tree(2, 3, 2).unwrap();
        assert_eq!((t.len(), t.edge_count()), (15, 34));
        assert_eq!(synth_tree(3, 2, 9).unwrap(), synth_tree(3, 2, 9).unwrap());
        assert!(matches!(synth_tree(10, 5, 0), Err(Error::Config(_))));
    }

    #[test]
    fn split_is_85_15_and_disjoint() {
        // 2-level tree with branching 9 plus closure gives 9 + 81 + 81 = 171 edges
        let g = synth_tree(9, 2, 3).unwrap();
        let s = split_relations(&g, 0.15, 4).unwrap();
        assert_eq!(s.test.len(), (0.15 * g.edge_count() as f64).round() as usize);
        assert_eq!(s.train.len() + s.test.len(), g.edge_count());
        let train: BTreeSet<_> = s.train.iter().collect();
        assert!(s.test.iter().all(|e| !train.contains(e)));
        assert_eq!(s, split_relations(&g, 0.15, 4).unwrap());
    }
}
