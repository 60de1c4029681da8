//! Offline retrieval metrics with a pluggable relevance oracle: per-row
//! relevance and category precision, and hit-rate recall against click
//! targets.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Product;
use crate::error::{Error, Result};

/// One retrieved product with the category it carries in the catalog.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievedProduct {
    pub product_id: u64,
    pub category: String,
}

/// One evaluated query: its ranked retrieval set and the clicked products.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub query: String,
    pub retrieved: Vec<RetrievedProduct>,
    pub targets: Vec<u64>,
}

/// Stand-in for a relevance model: scores query-product pairs in [0,1] and
/// predicts a category per query.
pub trait RelevanceOracle {
    fn relevance(&self, query: &str, product: &RetrievedProduct) -> Result<f64>;
    fn query_category(&self, query: &str) -> Result<String>;
    fn knows_category(&self, category: &str) -> bool;
}

/// Oracle for synthetic corpora: a product is relevant iff its category
/// equals the category that generated the query.
#[derive(Debug, Clone)]
pub struct CategoryMatchOracle {
    query_category: BTreeMap<String, String>,
    categories: BTreeSet<String>,
}

impl CategoryMatchOracle {
    pub fn from_corpus(products: &[Product]) -> Result<Self> {
        let mut query_category = BTreeMap::new();
        let mut categories = BTreeSet::new();
        for p in products {
            categories.insert(p.category.clone());
            for q in &p.queries {
                if let Some(prev) = query_category.insert(q.clone(), p.category.clone()) {
                    if prev != p.category {
                        return Err(Error::Contract(format!(
                            "query {q:?} generated by both {prev} and {}",
                            p.category
                        )));
                    }
                }
            }
        }
        if query_category.is_empty() {
            return Err(Error::DegenerateInput("corpus has no queries".into()));
        }
        Ok(CategoryMatchOracle { query_category, categories })
    }
}

impl RelevanceOracle for CategoryMatchOracle {
    fn relevance(&self, query: &str, product: &RetrievedProduct) -> Result<f64> {
        Ok(if self.query_category(query)? == product.category { 1.0 } else { 0.0 })
    }

    fn query_category(&self, query: &str) -> Result<String> {
        self.query_category
            .get(query)
            .cloned()
            .ok_or_else(|| Error::UnknownCategory(format!("query not in oracle: {query:?}")))
    }

    fn knows_category(&self, category: &str) -> bool {
        self.categories.contains(category)
    }
}

fn included_rows<'a>(records: &'a [EvalRecord]) -> Vec<&'a EvalRecord> {
    records.iter().filter(|r| !r.retrieved.is_empty()).collect()
}

fn require_rows(rows: &[&EvalRecord]) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::DegenerateInput("no rows with a non-empty retrieval set".into()));
    }
    Ok(())
}

fn row_p_rel(record: &EvalRecord, oracle: &dyn RelevanceOracle) -> Result<f64> {
    let mut sum = 0.0;
    for p in &record.retrieved {
        let f = oracle.relevance(&record.query, p)?;
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::Contract(format!("oracle relevance {f} outside [0,1]")));
        }
        sum += f;
    }
    Ok(sum / record.retrieved.len() as f64)
}

fn row_p_cate(record: &EvalRecord, oracle: &dyn RelevanceOracle) -> Result<f64> {
    let predicted = oracle.query_category(&record.query)?;
    let mut matches = 0usize;
    for p in &record.retrieved {
        if !oracle.knows_category(&p.category) {
            return Err(Error::UnknownCategory(p.category.clone()));
        }
        if p.category == predicted {
            matches += 1;
        }
    }
    Ok(matches as f64 / record.retrieved.len() as f64)
}

/// Mean oracle relevance over each retrieval set, macro-averaged across rows.
/// Rows with an empty retrieval set are skipped.
pub fn p_rel(records: &[EvalRecord], oracle: &dyn RelevanceOracle) -> Result<f64> {
    let rows = included_rows(records);
    require_rows(&rows)?;
    let mut total = 0.0;
    for r in &rows {
        total += row_p_rel(r, oracle)?;
    }
    Ok(total / rows.len() as f64)
}

/// Fraction of retrieved products in the query's predicted category,
/// macro-averaged across rows.
pub fn p_cate(records: &[EvalRecord], oracle: &dyn RelevanceOracle) -> Result<f64> {
    let rows = included_rows(records);
    require_rows(&rows)?;
    let mut total = 0.0;
    for r in &rows {
        total += row_p_cate(r, oracle)?;
    }
    Ok(total / rows.len() as f64)
}

/// Fraction of rows whose top-k retrieval contains at least one clicked
/// product. Rows without targets are skipped; k = 0 is defined as 0.
pub fn recall_at_k(records: &[EvalRecord], k: usize) -> Result<f64> {
    if k == 0 {
        eprintln!("warning: recall at k=0 requested, returning 0");
        return Ok(0.0);
    }
    let rows: Vec<&EvalRecord> = included_rows(records)
        .into_iter()
        .filter(|r| !r.targets.is_empty())
        .collect();
    if rows.is_empty() {
        return Err(Error::DegenerateInput("no rows with click targets".into()));
    }
    let mut hits = 0usize;
    for r in &rows {
        let targets: BTreeSet<u64> = r.targets.iter().copied().collect();
        let hit = r.retrieved.iter().take(k).any(|p| targets.contains(&p.product_id));
        if hit {
            hits += 1;
        }
    }
    Ok(hits as f64 / rows.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub p_rel: f64,
    pub p_cate: f64,
    pub recall_at_k: BTreeMap<usize, f64>,
    pub rows: usize,
    /// Rows skipped everywhere because the retrieval set was empty.
    pub excluded_rows: usize,
    /// Rows additionally skipped by recall because they have no targets.
    pub recall_excluded_rows: usize,
}

/// All metrics in one pass over the records.
pub fn evaluate(
    records: &[EvalRecord],
    oracle: &dyn RelevanceOracle,
    ks: &[usize],
) -> Result<EvalReport> {
    let excluded = records.len() - included_rows(records).len();
    let recall_excluded = included_rows(records)
        .iter()
        .filter(|r| r.targets.is_empty())
        .count();
    let mut recall = BTreeMap::new();
    for &k in ks {
        recall.insert(k, recall_at_k(records, k)?);
    }
    Ok(EvalReport {
        p_rel: p_rel(records, oracle)?,
        p_cate: p_cate(records, oracle)?,
        recall_at_k: recall,
        rows: records.len(),
        excluded_rows: excluded,
        recall_excluded_rows: recall_excluded,
    })
}

pub fn save_report(report: &EvalReport, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report)?;
    std::fs::write(path, json + "\n")?;
    Ok(())
}

pub fn load_report(path: &Path) -> Result<EvalReport> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Per-row diagnostics: query, set sizes, row metrics, and the rank of the
/// first clicked product (empty when no target was retrieved).
pub fn write_row_csv(
    records: &[EvalRecord],
    oracle: &dyn RelevanceOracle,
    path: &Path,
) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "row,query,n_retrieved,n_targets,p_rel,p_cate,first_hit_rank").expect("vec write");
    for (i, r) in records.iter().enumerate() {
        let (rel, cate) = if r.retrieved.is_empty() {
            (String::new(), String::new())
        } else {
            (
                format!("{:.6}", row_p_rel(r, oracle)?),
                format!("{:.6}", row_p_cate(r, oracle)?),
            )
        };
        let targets: BTreeSet<u64> = r.targets.iter().copied().collect();
        let first_hit = r
            .retrieved
            .iter()
            .position(|p| targets.contains(&p.product_id))
            .map(|pos| (pos + 1).to_string())
            .unwrap_or_default();
        let query = r.query.replace(',', " ");
        writeln!(
            out,
            "{i},{query},{},{},{rel},{cate},{first_hit}",
            r.retrieved.len(),
            r.targets.len()
        )
        .expect("vec write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, GenConfig};

    struct ConstOracle(f64);

    impl RelevanceOracle for ConstOracle {
        fn relevance(&self, _: &str, _: &RetrievedProduct) -> Result<f64> {
            Ok(self.0)
        }
        fn query_category(&self, _: &str) -> Result<String> {
            Ok("cat00".into())
        }
        fn knows_category(&self, _: &str) -> bool {
            true
        }
    }

    struct MapOracle {
        rel: BTreeMap<(String, u64), f64>,
        qcat: BTreeMap<String, String>,
        cats: BTreeSet<String>,
    }

    impl RelevanceOracle for MapOracle {
        fn relevance(&self, query: &str, product: &RetrievedProduct) -> Result<f64> {
            Ok(self.rel[&(query.to_string(), product.product_id)])
        }
        fn query_category(&self, query: &str) -> Result<String> {
            Ok(self.qcat[query].clone())
        }
        fn knows_category(&self, category: &str) -> bool {
            self.cats.contains(category)
        }
    }

    fn product(id: u64, category: &str) -> RetrievedProduct {
        RetrievedProduct { product_id: id, category: category.into() }
    }

    fn record(query: &str, retrieved: Vec<RetrievedProduct>, targets: Vec<u64>) -> EvalRecord {
        EvalRecord { query: query.into(), retrieved, targets }
    }

    #[test]
    fn p_rel_constant_oracles() {
        let records = vec![
            record("a", vec![product(1, "x"), product(2, "x")], vec![]),
            record("b", vec![product(3, "x")], vec![]),
        ];
        assert_eq!(p_rel(&records, &ConstOracle(1.0)).unwrap(), 1.0);
        assert_eq!(p_rel(&records, &ConstOracle(0.0)).unwrap(), 0.0);
    }

    #[test]
    fn p_rel_macro_averages_ragged_rows() {
        let mut rel = BTreeMap::new();
        for (id, f) in [(1u64, 1.0), (2, 1.0), (3, 1.0), (4, 1.0), (5, 0.0)] {
            rel.insert(("a".to_string(), id), f);
        }
        for (id, f) in [(6u64, 1.0), (7, 0.2)] {
            rel.insert(("b".to_string(), id), f);
        }
        let oracle = MapOracle { rel, qcat: BTreeMap::new(), cats: BTreeSet::new() };
        let records = vec![
            record("a", (1..=5).map(|i| product(i, "x")).collect(), vec![]),
            record("b", vec![product(6, "x"), product(7, "x")], vec![]),
        ];
        assert!((p_rel(&records, &oracle).unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn empty_retrieval_rows_are_excluded_and_counted() {
        let records = vec![
            record("a", vec![product(1, "cat00")], vec![1]),
            record("b", vec![], vec![2]),
        ];
        assert_eq!(p_rel(&records, &ConstOracle(1.0)).unwrap(), 1.0);
        let report = evaluate(&records, &ConstOracle(1.0), &[1]).unwrap();
        assert_eq!(report.rows, 2);
        assert_eq!(report.excluded_rows, 1);

        let only_empty = vec![record("a", vec![], vec![])];
        assert!(matches!(
            p_rel(&only_empty, &ConstOracle(1.0)),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn p_cate_counts_matches() {
        let mut qcat = BTreeMap::new();
        qcat.insert("a".to_string(), "shoes".to_string());
        let cats: BTreeSet<String> = ["shoes", "hats"].iter().map(|s| s.to_string()).collect();
        let oracle = MapOracle { rel: BTreeMap::new(), qcat, cats };
        let records = vec![record(
            "a",
            vec![
                product(1, "shoes"),
                product(2, "shoes"),
                product(3, "hats"),
                product(4, "shoes"),
            ],
            vec![],
        )];
        assert!((p_cate(&records, &oracle).unwrap() - 0.75).abs() < 1e-12);

        let all_match =
            vec![record("a", vec![product(1, "shoes"), product(2, "shoes")], vec![])];
        assert_eq!(p_cate(&all_match, &oracle).unwrap(), 1.0);
    }

    #[test]
    fn p_cate_rejects_unknown_category() {
        let mut qcat = BTreeMap::new();
        qcat.insert("a".to_string(), "shoes".to_string());
        let cats: BTreeSet<String> = [("shoes".to_string())].into_iter().collect();
        let oracle = MapOracle { rel: BTreeMap::new(), qcat, cats };
        let records = vec![record("a", vec![product(1, "gloves")], vec![])];
        match p_cate(&records, &oracle) {
            Err(Error::UnknownCategory(c)) => assert_eq!(c, "gloves"),
            other => panic!("expected unknown-category error, got {other:?}"),
        }
    }

    #[test]
    fn recall_counts_hit_rows() {
        let records = vec![
            record("a", vec![product(1, "x"), product(2, "x")], vec![1]),
            record("b", vec![product(3, "x"), product(4, "x")], vec![9]),
            record("c", vec![product(5, "x"), product(6, "x")], vec![6]),
            record("d", vec![product(7, "x"), product(8, "x")], vec![99]),
        ];
        assert_eq!(recall_at_k(&records, 1).unwrap(), 0.25);
        assert_eq!(recall_at_k(&records, 2).unwrap(), 0.5);

        let all_first = vec![
            record("a", vec![product(1, "x")], vec![1]),
            record("b", vec![product(2, "x")], vec![2]),
        ];
        assert_eq!(recall_at_k(&all_first, 1).unwrap(), 1.0);
    }

    #[test]
    fn recall_k_zero_is_zero_and_k_monotone() {
        let records = vec![
            record("a", vec![product(1, "x"), product(2, "x"), product(3, "x")], vec![3]),
            record("b", vec![product(4, "x"), product(5, "x"), product(6, "x")], vec![5]),
            record("c", vec![product(7, "x"), product(8, "x"), product(9, "x")], vec![999]),
        ];
        assert_eq!(recall_at_k(&records, 0).unwrap(), 0.0);
        let mut prev = 0.0;
        for k in 1..=4 {
            let r = recall_at_k(&records, k).unwrap();
            assert!(r >= prev);
            prev = r;
        }
    }

    #[test]
    fn recall_skips_rows_without_targets() {
        let records = vec![
            record("a", vec![product(1, "x")], vec![1]),
            record("b", vec![product(2, "x")], vec![]),
        ];
        assert_eq!(recall_at_k(&records, 1).unwrap(), 1.0);
        let report = evaluate(&records, &ConstOracle(1.0), &[1]).unwrap();
        assert_eq!(report.recall_excluded_rows, 1);

        let no_targets = vec![record("a", vec![product(1, "x")], vec![])];
        assert!(matches!(recall_at_k(&no_targets, 1), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn metrics_invariant_to_row_order() {
        let mut rel = BTreeMap::new();
        let mut qcat = BTreeMap::new();
        let mut cats = BTreeSet::new();
        cats.insert("c0".to_string());
        cats.insert("c1".to_string());
        let mut records = Vec::new();
        for i in 0..7u64 {
            let q = format!("q{i}");
            qcat.insert(q.clone(), format!("c{}", i % 2));
            let retrieved: Vec<RetrievedProduct> = (0..3)
                .map(|j| product(i * 10 + j, &format!("c{}", (i + j) % 2)))
                .collect();
            for p in &retrieved {
                rel.insert((q.clone(), p.product_id), ((p.product_id % 3) as f64) / 2.0);
            }
            records.push(record(&q, retrieved, vec![i * 10 + 2]));
        }
        let oracle = MapOracle { rel, qcat, cats };
        let a = evaluate(&records, &oracle, &[1, 2, 3]).unwrap();
        records.reverse();
        records.swap(1, 4);
        let b = evaluate(&records, &oracle, &[1, 2, 3]).unwrap();
        assert!((a.p_rel - b.p_rel).abs() < 1e-12);
        assert!((a.p_cate - b.p_cate).abs() < 1e-12);
        assert_eq!(a.recall_at_k, b.recall_at_k);
    }

    #[test]
    fn synthetic_oracle_makes_p_rel_equal_p_cate() {
        let cfg = GenConfig {
            n_categories: 3,
            products_per_category: 4,
            queries_per_product: 2,
            ..GenConfig::default()
        };
        let products = generate(&cfg).unwrap();
        let oracle = CategoryMatchOracle::from_corpus(&products).unwrap();
        let records: Vec<EvalRecord> = products
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let retrieved: Vec<RetrievedProduct> = products
                    .iter()
                    .skip(i % 3)
                    .step_by(3)
                    .take(4)
                    .map(|q| product_from(q))
                    .collect();
                record(&p.queries[0], retrieved, vec![p.product_id])
            })
            .collect();
        let pr = p_rel(&records, &oracle).unwrap();
        let pc = p_cate(&records, &oracle).unwrap();
        assert_eq!(pr.to_bits(), pc.to_bits());
    }

    fn product_from(p: &Product) -> RetrievedProduct {
        RetrievedProduct { product_id: p.product_id, category: p.category.clone() }
    }

    #[test]
    fn report_round_trips_and_csv_written() {
        let records = vec![
            record("a b", vec![product(1, "cat00"), product(2, "cat00")], vec![2]),
            record("c", vec![product(3, "cat00")], vec![4]),
        ];
        let report = evaluate(&records, &ConstOracle(1.0), &[1, 2]).unwrap();
        assert_eq!(report.p_rel, 1.0);
        assert!(report.recall_at_k[&2] > report.recall_at_k[&1] - 1e-12);

        let dir = tempfile::tempdir().unwrap();
        let jp = dir.path().join("report.json");
        save_report(&report, &jp).unwrap();
        assert_eq!(load_report(&jp).unwrap(), report);

        let cp = dir.path().join("rows.csv");
        write_row_csv(&records, &ConstOracle(1.0), &cp).unwrap();
        let text = std::fs::read_to_string(&cp).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("row,query,"));
        assert!(lines[1].contains("a b"));
        assert!(lines[1].ends_with(",2"), "first hit rank recorded: {}", lines[1]);
    }

    #[test]
    fn oracle_from_corpus_resolves_queries() {
        let cfg = GenConfig {
            n_categories: 2,
            products_per_category: 3,
            queries_per_product: 2,
            ..GenConfig::default()
        };
        let products = generate(&cfg).unwrap();
        let oracle = CategoryMatchOracle::from_corpus(&products).unwrap();
        for p in &products {
            for q in &p.queries {
                assert_eq!(oracle.query_category(q).unwrap(), p.category);
            }
            assert!(oracle.knows_category(&p.category));
        }
        assert!(matches!(
            oracle.query_category("no such query"),
            Err(Error::UnknownCategory(_))
        ));
    }
}
