//! Hierarchical-clustering approximate nearest-neighbor index over unit-norm
//! embeddings, plus an exact brute-force oracle with the same ranking rules.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::seed_for;

const MAGIC: &[u8; 8] = b"TMHCIDX1";
const FORMAT_VERSION: u32 = 1;
const KMEANS_MAX_ITERS: usize = 25;
const UNIT_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchParams {
    pub k: usize,
    pub nprobe: usize,
}

impl SearchParams {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidParameter("k must be at least 1".into()));
        }
        if self.nprobe == 0 {
            return Err(Error::InvalidParameter("nprobe must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchHit {
    pub product_id: u64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub hits: Vec<SearchHit>,
    /// Fewer candidates were visited than requested.
    pub short: bool,
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Internal { centroids: Vec<f64>, children: Vec<Node> },
    Leaf { ids: Vec<u64>, embeddings: Vec<f64> },
}

/// Immutable tree index: `depth` levels of spherical k-means with branching
/// factor `branching`, leaves holding the product postings.
#[derive(Debug, Clone, PartialEq)]
pub struct HCIndex {
    branching: usize,
    depth: usize,
    dim: usize,
    count: usize,
    root: Node,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_unit(v: &[f64], what: &str) -> Result<()> {
    let norm = dot(v, v).sqrt();
    if (norm - 1.0).abs() > UNIT_TOL {
        return Err(Error::Contract(format!("{what} has norm {norm}, expected 1")));
    }
    Ok(())
}

/// Rank candidates by score descending, ties by product id ascending.
fn rank(mut candidates: Vec<SearchHit>, k: usize) -> SearchResult {
    candidates.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("scores are finite")
            .then(a.product_id.cmp(&b.product_id))
    });
    let short = candidates.len() < k;
    candidates.truncate(k);
    SearchResult { hits: candidates, short }
}

/// Exact top-k by inner product over the full catalog.
pub fn brute_force(items: &[(u64, Vec<f64>)], query: &[f64], k: usize) -> Result<SearchResult> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be at least 1".into()));
    }
    let candidates = items
        .iter()
        .map(|(id, e)| {
            if e.len() != query.len() {
                return Err(Error::ShapeMismatch {
                    op: "brute_force",
                    lhs: vec![query.len()],
                    rhs: vec![e.len()],
                });
            }
            Ok(SearchHit { product_id: *id, score: dot(e, query) })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(rank(candidates, k))
}

/// Farthest-point seeding: a seeded first pick, then repeatedly the point
/// least similar to its nearest chosen seed. Ties go to the lowest index.
fn farthest_seeds(points: &[usize], embs: &[Vec<f64>], k: usize, seed: u64) -> Vec<usize> {
    let mut chosen = vec![points[(seed % points.len() as u64) as usize]];
    let mut best_sim: Vec<f64> = points.iter().map(|&p| dot(&embs[p], &embs[chosen[0]])).collect();
    while chosen.len() < k {
        let mut far = 0;
        for i in 1..points.len() {
            if best_sim[i] < best_sim[far] {
                far = i;
            }
        }
        let next = points[far];
        chosen.push(next);
        for (i, &p) in points.iter().enumerate() {
            let s = dot(&embs[p], &embs[next]);
            if s > best_sim[i] {
                best_sim[i] = s;
            }
        }
    }
    chosen
}

/// Spherical k-means over the given point indices. Returns unit centroids and
/// per-point assignments; deterministic for a fixed seed.
fn spherical_kmeans(
    points: &[usize],
    embs: &[Vec<f64>],
    k: usize,
    seed: u64,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let dim = embs[points[0]].len();
    let seeds = farthest_seeds(points, embs, k, seed);
    let mut centroids: Vec<Vec<f64>> = seeds.iter().map(|&p| embs[p].clone()).collect();
    let mut assign = vec![0usize; points.len()];

    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        for (i, &p) in points.iter().enumerate() {
            let mut best = 0;
            let mut best_s = dot(&embs[p], &centroids[0]);
            for (c, cent) in centroids.iter().enumerate().skip(1) {
                let s = dot(&embs[p], cent);
                if s > best_s {
                    best_s = s;
                    best = c;
                }
            }
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, &p) in points.iter().enumerate() {
            counts[assign[i]] += 1;
            for (s, &x) in sums[assign[i]].iter_mut().zip(&embs[p]) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Reseed an empty cluster with the point least similar to
                // its current centroid.
                let mut worst = 0;
                let mut worst_s = f64::INFINITY;
                for (i, &p) in points.iter().enumerate() {
                    let s = dot(&embs[p], &centroids[assign[i]]);
                    if s < worst_s {
                        worst_s = s;
                        worst = i;
                    }
                }
                centroids[c] = embs[points[worst]].clone();
                assign[worst] = c;
                changed = true;
                continue;
            }
            let norm = dot(&sums[c], &sums[c]).sqrt();
            if norm > 1e-12 {
                centroids[c] = sums[c].iter().map(|x| x / norm).collect();
            }
        }

        if !changed {
            break;
        }
    }
    (centroids, assign)
}

fn build_node(
    points: Vec<usize>,
    ids: &[u64],
    embs: &[Vec<f64>],
    branching: usize,
    levels_left: usize,
    seed: u64,
) -> Node {
    if levels_left == 0 {
        let mut sorted = points;
        sorted.sort_by_key(|&p| ids[p]);
        let dim = embs[sorted[0]].len();
        let mut flat = Vec::with_capacity(sorted.len() * dim);
        let mut leaf_ids = Vec::with_capacity(sorted.len());
        for &p in &sorted {
            leaf_ids.push(ids[p]);
            flat.extend_from_slice(&embs[p]);
        }
        return Node::Leaf { ids: leaf_ids, embeddings: flat };
    }
    let k = branching.min(points.len());
    let (centroids, assign) = spherical_kmeans(&points, embs, k, seed);
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &p) in points.iter().enumerate() {
        buckets[assign[i]].push(p);
    }
    let mut flat = Vec::with_capacity(k * centroids[0].len());
    for c in &centroids {
        flat.extend_from_slice(c);
    }
    let children = buckets
        .into_iter()
        .enumerate()
        .map(|(i, bucket)| {
            let child_seed = seed_for(seed, &format!("child{i}"));
            build_node(bucket, ids, embs, branching, levels_left - 1, child_seed)
        })
        .collect();
    Node::Internal { centroids: flat, children }
}

impl HCIndex {
    /// Cluster the catalog into a tree of `depth` levels with at most
    /// `branching` children per node. A node with fewer points than
    /// `branching` gets one centroid per point.
    pub fn build(
        items: &[(u64, Vec<f64>)],
        branching: usize,
        depth: usize,
        seed: u64,
    ) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::DegenerateInput("cannot index an empty catalog".into()));
        }
        if branching < 2 {
            return Err(Error::InvalidParameter(format!(
                "branching factor must be at least 2, got {branching}"
            )));
        }
        if depth == 0 {
            return Err(Error::InvalidParameter("depth must be at least 1".into()));
        }
        let dim = items[0].1.len();
        if dim == 0 {
            return Err(Error::DegenerateInput("zero-dimensional embeddings".into()));
        }
        let mut ids = Vec::with_capacity(items.len());
        let mut embs = Vec::with_capacity(items.len());
        let mut seen = std::collections::BTreeSet::new();
        for (id, e) in items {
            if e.len() != dim {
                return Err(Error::ShapeMismatch {
                    op: "index_build",
                    lhs: vec![dim],
                    rhs: vec![e.len()],
                });
            }
            check_unit(e, &format!("embedding for product {id}"))?;
            if !seen.insert(*id) {
                return Err(Error::Contract(format!("duplicate product id {id} in catalog")));
            }
            ids.push(*id);
            embs.push(e.clone());
        }
        let points: Vec<usize> = (0..items.len()).collect();
        let root = build_node(points, &ids, &embs, branching, depth, seed);
        Ok(HCIndex { branching, depth, dim, count: items.len(), root })
    }

    pub fn branching(&self) -> usize {
        self.branching
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Posting lists of every leaf, in tree order.
    pub fn leaf_postings(&self) -> Vec<Vec<u64>> {
        let mut out = Vec::new();
        fn walk(node: &Node, out: &mut Vec<Vec<u64>>) {
            match node {
                Node::Leaf { ids, .. } => out.push(ids.clone()),
                Node::Internal { children, .. } => {
                    for c in children {
                        walk(c, out);
                    }
                }
            }
        }
        walk(&self.root, &mut out);
        out
    }

    /// Beam descent: at each level every frontier node expands its `nprobe`
    /// best children by centroid similarity; the visited leaves are scored
    /// exhaustively. `nprobe >= branching` therefore visits everything.
    pub fn search(&self, query: &[f64], params: &SearchParams) -> Result<SearchResult> {
        params.validate()?;
        if query.len() != self.dim {
            return Err(Error::ShapeMismatch {
                op: "index_search",
                lhs: vec![self.dim],
                rhs: vec![query.len()],
            });
        }
        check_unit(query, "query embedding")?;

        let mut frontier: Vec<&Node> = vec![&self.root];
        while let Node::Internal { .. } = frontier[0] {
            let mut next = Vec::new();
            for node in &frontier {
                if let Node::Internal { centroids, children } = node {
                    let mut scored: Vec<(f64, usize)> = (0..children.len())
                        .map(|i| (dot(&centroids[i * self.dim..(i + 1) * self.dim], query), i))
                        .collect();
                    scored.sort_by(|a, b| {
                        b.0.partial_cmp(&a.0).expect("scores are finite").then(a.1.cmp(&b.1))
                    });
                    for &(_, i) in scored.iter().take(params.nprobe) {
                        next.push(&children[i]);
                    }
                }
            }
            frontier = next;
        }

        let mut candidates = Vec::new();
        for node in frontier {
            if let Node::Leaf { ids, embeddings } = node {
                for (i, &id) in ids.iter().enumerate() {
                    let e = &embeddings[i * self.dim..(i + 1) * self.dim];
                    candidates.push(SearchHit { product_id: id, score: dot(e, query) });
                }
            }
        }
        Ok(rank(candidates, params.k))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.branching as u32).to_le_bytes());
        buf.extend_from_slice(&(self.depth as u32).to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.count as u64).to_le_bytes());
        write_node(&self.root, &mut buf);
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let mut cur = Cursor { bytes: &bytes, at: 0 };
        let magic = cur.take(8)?;
        if magic != MAGIC {
            return Err(Error::Format(format!("{}: not an index file", path.display())));
        }
        let version = cur.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "{}: unsupported index version {version}",
                path.display()
            )));
        }
        let branching = cur.u32()? as usize;
        let depth = cur.u32()? as usize;
        let dim = cur.u32()? as usize;
        let count = cur.u64()? as usize;
        let root = read_node(&mut cur, dim)?;
        if cur.at != bytes.len() {
            return Err(Error::Format(format!(
                "{}: {} trailing bytes",
                path.display(),
                bytes.len() - cur.at
            )));
        }
        Ok(HCIndex { branching, depth, dim, count, root })
    }
}

fn write_node(node: &Node, buf: &mut Vec<u8>) {
    match node {
        Node::Internal { centroids, children } => {
            buf.push(0);
            buf.extend_from_slice(&(children.len() as u32).to_le_bytes());
            for x in centroids {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            for c in children {
                write_node(c, buf);
            }
        }
        Node::Leaf { ids, embeddings } => {
            buf.push(1);
            buf.extend_from_slice(&(ids.len() as u64).to_le_bytes());
            for id in ids {
                buf.extend_from_slice(&id.to_le_bytes());
            }
            for x in embeddings {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Format("index file truncated".into()));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b: [u8; 4] = self.take(4)?.try_into().unwrap();
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self) -> Result<u64> {
        let b: [u8; 8] = self.take(8)?.try_into().unwrap();
        Ok(u64::from_le_bytes(b))
    }

    fn f64(&mut self) -> Result<f64> {
        let b: [u8; 8] = self.take(8)?.try_into().unwrap();
        Ok(f64::from_le_bytes(b))
    }
}

fn read_node(cur: &mut Cursor, dim: usize) -> Result<Node> {
    let tag = cur.take(1)?[0];
    match tag {
        0 => {
            let k = cur.u32()? as usize;
            let mut centroids = Vec::with_capacity(k * dim);
            for _ in 0..k * dim {
                centroids.push(cur.f64()?);
            }
            let mut children = Vec::with_capacity(k);
            for _ in 0..k {
                children.push(read_node(cur, dim)?);
            }
            Ok(Node::Internal { centroids, children })
        }
        1 => {
            let n = cur.u64()? as usize;
            let mut ids = Vec::with_capacity(n);
            for _ in 0..n {
                ids.push(cur.u64()?);
            }
            let mut embeddings = Vec::with_capacity(n * dim);
            for _ in 0..n * dim {
                embeddings.push(cur.f64()?);
            }
            Ok(Node::Leaf { ids, embeddings })
        }
        t => Err(Error::Format(format!("unknown index node tag {t}"))),
    }
}
