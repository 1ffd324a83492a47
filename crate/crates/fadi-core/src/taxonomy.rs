//! Hypernym taxonomy with corpus counts: information content, lowest common
//! subsumer, and Lin similarity between class concepts.
//!
//! A concept's probability is its cumulative corpus count (own count plus
//! all descendants, each counted once) over the root total, and
//! `IC = −ln p`. Lin similarity of two concepts is
//! `2·IC(LCS) / (IC(a) + IC(b))`, which lands in [0, 1].

use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("line {line}: expected `id<TAB>parents<TAB>count`, got {got:?}")]
    BadLine { line: usize, got: String },
    #[error("line {line}: invalid count {got:?}")]
    BadCount { line: usize, got: String },
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("unknown parent {parent:?} of {child:?}")]
    UnknownParent { child: String, parent: String },
    #[error("more than one root: {0:?} and {1:?}")]
    MultipleRoots(String, String),
    #[error("taxonomy has no root")]
    NoRoot,
    #[error("cycle detected through {0:?}")]
    CycleDetected(String),
    #[error("root has zero cumulative count")]
    ZeroRootCount,
    #[error("unknown id {0:?}")]
    UnknownId(String),
    #[error("concept {0:?} was never observed (zero cumulative count)")]
    ZeroCumulativeCount(String),
    #[error("similarity csv line {line}: {msg}")]
    BadCsv { line: usize, msg: String },
    #[error("similarity value {value} at ({novel}, {base}) outside [0, 1]")]
    SimilarityOutOfRange { novel: String, base: String, value: f64 },
    #[error("duplicate name {0:?} on a similarity axis")]
    DuplicateName(String),
}

/// One parsed taxonomy node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynsetNode {
    pub id: String,
    pub parent_ids: Vec<String>,
    pub own_count: u64,
}

/// Immutable hypernym DAG with materialized cumulative counts.
#[derive(Clone, Debug)]
pub struct Taxonomy {
    ids: Vec<String>,
    index: BTreeMap<String, usize>,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
    own_count: Vec<u64>,
    cumulative: Vec<u64>,
    root: usize,
    total: u64,
}

impl Taxonomy {
    /// Parses the line format `id<TAB>comma-separated-parents<TAB>count`.
    /// A blank parent field marks the root; `#` lines and blank lines are
    /// ignored; forward references are allowed.
    pub fn parse(text: &str) -> Result<Taxonomy, TaxonomyError> {
        let mut nodes: Vec<SynsetNode> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(TaxonomyError::BadLine { line: lineno + 1, got: line.to_string() });
            }
            let id = fields[0].trim();
            if id.is_empty() {
                return Err(TaxonomyError::BadLine { line: lineno + 1, got: line.to_string() });
            }
            let parent_ids: Vec<String> = if fields[1].trim().is_empty() {
                Vec::new()
            } else {
                fields[1].split(',').map(|p| p.trim().to_string()).collect()
            };
            let own_count: u64 = fields[2]
                .trim()
                .parse()
                .map_err(|_| TaxonomyError::BadCount { line: lineno + 1, got: fields[2].into() })?;
            nodes.push(SynsetNode { id: id.to_string(), parent_ids, own_count });
        }
        Taxonomy::from_nodes(nodes)
    }

    pub fn from_nodes(nodes: Vec<SynsetNode>) -> Result<Taxonomy, TaxonomyError> {
        let mut index = BTreeMap::new();
        for (i, n) in nodes.iter().enumerate() {
            match index.entry(n.id.clone()) {
                Entry::Vacant(e) => {
                    e.insert(i);
                }
                Entry::Occupied(_) => return Err(TaxonomyError::DuplicateId(n.id.clone())),
            }
        }
        let n = nodes.len();
        let mut parents = vec![Vec::new(); n];
        let mut children = vec![Vec::new(); n];
        let mut root = None;
        for (i, node) in nodes.iter().enumerate() {
            if node.parent_ids.is_empty() {
                match root {
                    None => root = Some(i),
                    Some(r) => {
                        return Err(TaxonomyError::MultipleRoots(
                            nodes[r].id.clone(),
                            node.id.clone(),
                        ))
                    }
                }
            }
            for p in &node.parent_ids {
                let pi = *index
                    .get(p)
                    .ok_or_else(|| TaxonomyError::UnknownParent {
                        child: node.id.clone(),
                        parent: p.clone(),
                    })?;
                parents[i].push(pi);
                children[pi].push(i);
            }
        }
        let root = root.ok_or(TaxonomyError::NoRoot)?;

        // Kahn over the child relation; leftovers sit on a cycle.
        let mut indeg: Vec<usize> = parents.iter().map(Vec::len).collect();
        let mut queue: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut seen = 0;
        while let Some(i) = queue.pop() {
            seen += 1;
            for &c in &children[i] {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    queue.push(c);
                }
            }
        }
        if seen != n {
            let culprit = (0..n).find(|&i| indeg[i] > 0).unwrap();
            return Err(TaxonomyError::CycleDetected(nodes[culprit].id.clone()));
        }

        // Cumulative count: sum of own counts over the descendant closure,
        // each node counted once even when reachable along several paths.
        let own_count: Vec<u64> = nodes.iter().map(|x| x.own_count).collect();
        let mut cumulative = vec![0u64; n];
        let mut visited = vec![usize::MAX; n];
        for i in 0..n {
            let mut sum = 0u64;
            let mut stack = vec![i];
            visited[i] = i;
            while let Some(x) = stack.pop() {
                sum += own_count[x];
                for &c in &children[x] {
                    if visited[c] != i {
                        visited[c] = i;
                        stack.push(c);
                    }
                }
            }
            cumulative[i] = sum;
        }
        let total = cumulative[root];
        if total == 0 {
            return Err(TaxonomyError::ZeroRootCount);
        }

        let ids = nodes.into_iter().map(|x| x.id).collect();
        Ok(Taxonomy { ids, index, parents, children, own_count, cumulative, root, total })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn root_id(&self) -> &str {
        &self.ids[self.root]
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.ids.iter().map(String::as_str)
    }

    fn resolve(&self, id: &str) -> Result<usize, TaxonomyError> {
        self.index.get(id).copied().ok_or_else(|| TaxonomyError::UnknownId(id.to_string()))
    }

    pub fn own_count(&self, id: &str) -> Result<u64, TaxonomyError> {
        Ok(self.own_count[self.resolve(id)?])
    }

    pub fn cumulative_count(&self, id: &str) -> Result<u64, TaxonomyError> {
        Ok(self.cumulative[self.resolve(id)?])
    }

    pub fn children_of(&self, id: &str) -> Result<Vec<&str>, TaxonomyError> {
        Ok(self.children[self.resolve(id)?].iter().map(|&c| self.ids[c].as_str()).collect())
    }

    fn ic_idx(&self, i: usize) -> Result<f64, TaxonomyError> {
        let cum = self.cumulative[i];
        if cum == 0 {
            return Err(TaxonomyError::ZeroCumulativeCount(self.ids[i].clone()));
        }
        Ok(-((cum as f64 / self.total as f64).ln()))
    }

    /// `IC(id) = −ln(cumulative/total)`; 0 for the root.
    pub fn information_content(&self, id: &str) -> Result<f64, TaxonomyError> {
        self.ic_idx(self.resolve(id)?)
    }

    /// Ancestor-or-self ids of a node (unordered).
    pub fn ancestor_ids(&self, id: &str) -> Result<Vec<&str>, TaxonomyError> {
        let i = self.resolve(id)?;
        Ok(self.ancestors(i).into_iter().map(|x| self.ids[x].as_str()).collect())
    }

    /// Ancestor-or-self closure of a node.
    fn ancestors(&self, i: usize) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        let mut stack = vec![i];
        while let Some(x) = stack.pop() {
            if out.insert(x) {
                stack.extend(&self.parents[x]);
            }
        }
        out
    }

    /// Lowest common subsumer: the common ancestor (ancestors include the
    /// node itself) with maximum information content; ties break toward the
    /// lexicographically smallest id. Never-observed ancestors (cumulative
    /// count 0) carry no information and are skipped; the root always
    /// remains.
    pub fn lcs(&self, a: &str, b: &str) -> Result<&str, TaxonomyError> {
        let ia = self.resolve(a)?;
        let ib = self.resolve(b)?;
        let anc_a = self.ancestors(ia);
        let anc_b = self.ancestors(ib);
        let mut best: Option<(f64, &str)> = None;
        for &i in anc_a.intersection(&anc_b) {
            if self.cumulative[i] == 0 {
                continue;
            }
            let ic = self.ic_idx(i)?;
            let id = self.ids[i].as_str();
            best = match best {
                None => Some((ic, id)),
                Some((bic, bid)) => {
                    if ic > bic || (ic == bic && id < bid) {
                        Some((ic, id))
                    } else {
                        Some((bic, bid))
                    }
                }
            };
        }
        best.map(|(_, id)| id).ok_or_else(|| TaxonomyError::ZeroCumulativeCount(a.to_string()))
    }

    /// Lin similarity `2·IC(LCS(a,b)) / (IC(a) + IC(b))`.
    ///
    /// When both information contents are 0 the ratio degenerates to 0/0;
    /// it is defined as 1 for identical arguments and 0 otherwise, which
    /// preserves the identity axiom.
    pub fn lin_similarity(&self, a: &str, b: &str) -> Result<f64, TaxonomyError> {
        let ic_a = self.information_content(a)?;
        let ic_b = self.information_content(b)?;
        let denom = ic_a + ic_b;
        if denom == 0.0 {
            return Ok(if a == b { 1.0 } else { 0.0 });
        }
        let lcs = self.lcs(a, b)?;
        Ok(2.0 * self.information_content(lcs)? / denom)
    }

    /// Dense novel × base Lin similarity matrix.
    pub fn build_similarity_matrix(
        &self,
        novel: &[String],
        base: &[String],
    ) -> Result<SimilarityMatrix, TaxonomyError> {
        let mut values = Vec::with_capacity(novel.len() * base.len());
        for n in novel {
            for b in base {
                values.push(self.lin_similarity(n, b)?);
            }
        }
        SimilarityMatrix::new(novel.to_vec(), base.to_vec(), values)
    }
}

/// Dense novel × base matrix of similarities in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    novel_names: Vec<String>,
    base_names: Vec<String>,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn new(
        novel_names: Vec<String>,
        base_names: Vec<String>,
        values: Vec<f64>,
    ) -> Result<Self, TaxonomyError> {
        assert_eq!(values.len(), novel_names.len() * base_names.len());
        for axis in [&novel_names, &base_names] {
            let mut seen = BTreeSet::new();
            for name in axis {
                if !seen.insert(name) {
                    return Err(TaxonomyError::DuplicateName(name.clone()));
                }
            }
        }
        for (i, &v) in values.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(TaxonomyError::SimilarityOutOfRange {
                    novel: novel_names[i / base_names.len()].clone(),
                    base: base_names[i % base_names.len()].clone(),
                    value: v,
                });
            }
        }
        Ok(SimilarityMatrix { novel_names, base_names, values })
    }

    /// Parses the CSV fixture format: header `,<base1>,<base2>,...`, then
    /// one `<novel>,<v1>,...` row per novel class.
    pub fn from_csv(text: &str) -> Result<Self, TaxonomyError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or(TaxonomyError::BadCsv { line: 1, msg: "empty file".into() })?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 2 || !cols[0].trim().is_empty() {
            return Err(TaxonomyError::BadCsv {
                line: 1,
                msg: "header must start with an empty cell followed by base names".into(),
            });
        }
        let base_names: Vec<String> = cols[1..].iter().map(|s| s.trim().to_string()).collect();
        let mut novel_names = Vec::new();
        let mut values = Vec::new();
        for (lineno, line) in lines {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != base_names.len() + 1 {
                return Err(TaxonomyError::BadCsv {
                    line: lineno,
                    msg: format!("expected {} cells, got {}", base_names.len() + 1, cells.len()),
                });
            }
            novel_names.push(cells[0].trim().to_string());
            for cell in &cells[1..] {
                let v: f64 = cell.trim().parse().map_err(|_| TaxonomyError::BadCsv {
                    line: lineno,
                    msg: format!("non-numeric cell {cell:?}"),
                })?;
                values.push(v);
            }
        }
        SimilarityMatrix::new(novel_names, base_names, values)
    }

    /// Serializes back to the CSV fixture format.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push(',');
        out.push_str(&self.base_names.join(","));
        out.push('\n');
        for (i, novel) in self.novel_names.iter().enumerate() {
            out.push_str(novel);
            for j in 0..self.base_names.len() {
                out.push(',');
                out.push_str(&format!("{}", self.get(i, j)));
            }
            out.push('\n');
        }
        out
    }

    pub fn novel_names(&self) -> &[String] {
        &self.novel_names
    }

    pub fn base_names(&self) -> &[String] {
        &self.base_names
    }

    pub fn num_novel(&self) -> usize {
        self.novel_names.len()
    }

    pub fn num_base(&self) -> usize {
        self.base_names.len()
    }

    pub fn get(&self, novel: usize, base: usize) -> f64 {
        self.values[novel * self.base_names.len() + base]
    }

    pub fn base_index(&self, name: &str) -> Option<usize> {
        self.base_names.iter().position(|b| b == name)
    }

    pub fn novel_index(&self, name: &str) -> Option<usize> {
        self.novel_names.iter().position(|n| n == name)
    }
}
