//! Offline serving paths: embedding export, the modality gate report, and
//! retrieval evaluation against a built index.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use serde_json::json;

use crate::corpus::Product;
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, CategoryMatchOracle, EvalRecord, EvalReport, RetrievedProduct};
use crate::index::{HCIndex, SearchParams};
use crate::model::{product_vector, query_vector, ModelConfig};
use crate::tensor::{load_tensors, save_tensors, ParamStore, Precision, Tensor};
use crate::text::Vocabulary;

/// Computes every product's embedding, in corpus order, from product inputs
/// alone. Returns `(ids, matrix)` where row `i` of the matrix embeds
/// `ids[i]`.
pub fn corpus_embeddings(
    store: &ParamStore,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    corpus: &[Product],
) -> Result<(Vec<u64>, Vec<Vec<f64>>)> {
    let mut ids = Vec::with_capacity(corpus.len());
    let mut rows = Vec::with_capacity(corpus.len());
    for p in corpus {
        let (emb, _) = product_vector(store, cfg, vocab, p)?;
        ids.push(p.product_id);
        rows.push(emb);
    }
    Ok((ids, rows))
}

/// Writes exported embeddings to `path`. Ids live in the header so they
/// round-trip exactly for the full u64 range.
pub fn save_embeddings(ids: &[u64], rows: &[Vec<f64>], path: &Path) -> Result<()> {
    if ids.len() != rows.len() {
        return Err(Error::Contract(format!(
            "{} ids for {} embedding rows",
            ids.len(),
            rows.len()
        )));
    }
    if ids.is_empty() {
        return Err(Error::DegenerateInput("no embeddings to export".into()));
    }
    let dim = rows[0].len();
    let mut flat = Vec::with_capacity(ids.len() * dim);
    for r in rows {
        if r.len() != dim {
            return Err(Error::ShapeMismatch {
                op: "save_embeddings",
                lhs: vec![dim],
                rhs: vec![r.len()],
            });
        }
        flat.extend_from_slice(r);
    }
    let mut tensors = BTreeMap::new();
    tensors.insert(
        "embeddings".to_string(),
        Tensor::new(vec![ids.len(), dim], flat)?,
    );
    let extras = json!({
        "kind": "embeddings",
        "count": ids.len(),
        "dim": dim,
        "ids": ids,
    });
    save_tensors(path, &tensors, Precision::F64, &extras)
}

pub fn load_embeddings(path: &Path) -> Result<Vec<(u64, Vec<f64>)>> {
    let (tensors, _, extras) = load_tensors(path)?;
    if extras.get("kind").and_then(|k| k.as_str()) != Some("embeddings") {
        return Err(Error::Format(format!(
            "{}: not an embedding export",
            path.display()
        )));
    }
    let ids: Vec<u64> = extras
        .get("ids")
        .and_then(|v| v.as_array())
        .map(|a| a.iter().filter_map(|x| x.as_u64()).collect())
        .ok_or_else(|| Error::Format("embedding export missing ids".into()))?;
    let emb = tensors
        .get("embeddings")
        .ok_or_else(|| Error::Format("embedding export missing matrix".into()))?;
    if emb.rows() != ids.len() {
        return Err(Error::Format(format!(
            "{} ids for {} embedding rows",
            ids.len(),
            emb.rows()
        )));
    }
    let dim = emb.cols();
    let out = ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id, emb.data()[i * dim..(i + 1) * dim].to_vec()))
        .collect();
    Ok(out)
}

/// Mean gate weights `[title, image]` per category, keyed by category name.
pub fn category_gate_means(
    store: &ParamStore,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    corpus: &[Product],
) -> Result<BTreeMap<String, [f64; 2]>> {
    let mut sums: BTreeMap<String, ([f64; 2], usize)> = BTreeMap::new();
    for p in corpus {
        let (_, gate) = product_vector(store, cfg, vocab, p)?;
        let entry = sums.entry(p.category.clone()).or_insert(([0.0, 0.0], 0));
        entry.0[0] += gate[0];
        entry.0[1] += gate[1];
        entry.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(cat, (s, n))| (cat, [s[0] / n as f64, s[1] / n as f64]))
        .collect())
}

pub fn write_gate_csv(means: &BTreeMap<String, [f64; 2]>, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "category,a_title,a_image").expect("vec write");
    for (cat, [t, i]) in means {
        writeln!(out, "{cat},{t:.6},{i:.6}").expect("vec write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// One record per (product, query): embed the query, search the index, and
/// mark the originating product as the sole target.
pub fn build_eval_records(
    store: &ParamStore,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    corpus: &[Product],
    index: &HCIndex,
    params: &SearchParams,
) -> Result<Vec<EvalRecord>> {
    let categories: BTreeMap<u64, &str> = corpus
        .iter()
        .map(|p| (p.product_id, p.category.as_str()))
        .collect();
    let mut records = Vec::new();
    for p in corpus {
        for q in &p.queries {
            let u = query_vector(store, cfg, vocab, q)?;
            let result = index.search(&u, params)?;
            let retrieved = result
                .hits
                .iter()
                .map(|h| {
                    let category = categories.get(&h.product_id).ok_or_else(|| {
                        Error::Contract(format!(
                            "index returned product {} absent from the corpus",
                            h.product_id
                        ))
                    })?;
                    Ok(RetrievedProduct {
                        product_id: h.product_id,
                        category: (*category).to_string(),
                    })
                })
                .collect::<Result<_>>()?;
            records.push(EvalRecord {
                query: q.clone(),
                retrieved,
                targets: vec![p.product_id],
            });
        }
    }
    Ok(records)
}

/// Full retrieval evaluation with the category-match oracle.
pub fn run_eval(records: &[EvalRecord], corpus: &[Product], ks: &[usize]) -> Result<EvalReport> {
    let oracle = CategoryMatchOracle::from_corpus(corpus)?;
    evaluate(records, &oracle, ks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, GenConfig};
    use crate::model::fresh_model;
    use crate::tensor::seed_for;

    fn tiny_setup() -> (Vec<Product>, ModelConfig, Vocabulary, ParamStore) {
        let corpus = generate(&GenConfig {
            n_categories: 2,
            products_per_category: 4,
            queries_per_product: 2,
            n_patches: 4,
            d_img: 4,
            title_len: 6,
            ..GenConfig::default()
        })
        .unwrap();
        let cfg = ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            fusion_layers: 1,
            d_embed: 6,
            d_img: 4,
            max_query_len: 8,
            max_title_len: 12,
            max_patches: 4,
            ..ModelConfig::default()
        };
        let (vocab, store) = fresh_model(&corpus, &cfg, 3).unwrap();
        (corpus, cfg, vocab, store)
    }

    #[test]
    fn export_round_trips_bitwise() {
        let (corpus, cfg, vocab, store) = tiny_setup();
        let (ids, rows) = corpus_embeddings(&store, &cfg, &vocab, &corpus).unwrap();
        assert_eq!(ids.len(), corpus.len());
        for r in &rows {
            let norm: f64 = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6, "norm {norm}");
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        save_embeddings(&ids, &rows, &path).unwrap();
        let loaded = load_embeddings(&path).unwrap();
        assert_eq!(loaded.len(), rows.len());
        for ((id, row), (lid, lrow)) in ids.iter().zip(&rows).zip(&loaded) {
            assert_eq!(id, lid);
            let same = row.iter().zip(lrow).all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same);
        }
    }

    #[test]
    fn export_ignores_query_tower() {
        let (corpus, cfg, vocab, store) = tiny_setup();
        let mut altered = store.clone();
        let names: Vec<String> = altered
            .iter()
            .map(|(n, _)| n.to_string())
            .filter(|n| n.starts_with("query.") || n.starts_with("heads.query_proj"))
            .collect();
        assert!(!names.is_empty());
        for (k, name) in names.iter().enumerate() {
            let shape = altered.get(name).unwrap().shape().to_vec();
            let t = Tensor::randn(shape, 0.5, seed_for(99, &format!("perturb{k}")));
            altered.set(name, t).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.bin");
        let b = dir.path().join("b.bin");
        let (ids, rows) = corpus_embeddings(&store, &cfg, &vocab, &corpus).unwrap();
        save_embeddings(&ids, &rows, &a).unwrap();
        let (ids2, rows2) = corpus_embeddings(&altered, &cfg, &vocab, &corpus).unwrap();
        save_embeddings(&ids2, &rows2, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn large_ids_survive_export() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        let ids = vec![(1u64 << 60) + 3, u64::MAX - 1];
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        save_embeddings(&ids, &rows, &path).unwrap();
        let loaded = load_embeddings(&path).unwrap();
        assert_eq!(loaded[0].0, (1u64 << 60) + 3);
        assert_eq!(loaded[1].0, u64::MAX - 1);
    }

    #[test]
    fn load_rejects_other_containers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("other.bin");
        let mut tensors = BTreeMap::new();
        tensors.insert("x".to_string(), Tensor::zeros(vec![2, 2]));
        save_tensors(&path, &tensors, Precision::F64, &json!({"kind": "other"})).unwrap();
        assert!(load_embeddings(&path).is_err());
    }

    #[test]
    fn gate_means_cover_categories_and_sum_to_one() {
        let (corpus, cfg, vocab, store) = tiny_setup();
        let means = category_gate_means(&store, &cfg, &vocab, &corpus).unwrap();
        assert_eq!(means.len(), 2);
        for (_, [t, i]) in &means {
            assert!((t + i - 1.0).abs() < 1e-9);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gate.csv");
        write_gate_csv(&means, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "category,a_title,a_image");
        assert_eq!(lines.len(), 3);
    }

    #[test]
    fn eval_records_search_every_query() {
        let (corpus, cfg, vocab, store) = tiny_setup();
        let (ids, rows) = corpus_embeddings(&store, &cfg, &vocab, &corpus).unwrap();
        let items: Vec<(u64, Vec<f64>)> = ids.into_iter().zip(rows).collect();
        let index = HCIndex::build(&items, 2, 1, 5).unwrap();
        let params = SearchParams { k: 3, nprobe: 2 };
        let records =
            build_eval_records(&store, &cfg, &vocab, &corpus, &index, &params).unwrap();
        assert_eq!(records.len(), corpus.len() * 2);
        for r in &records {
            assert_eq!(r.retrieved.len(), 3);
            assert_eq!(r.targets.len(), 1);
        }
        let report = run_eval(&records, &corpus, &[1, 3]).unwrap();
        assert_eq!(report.rows, records.len());
        assert!(report.p_cate >= 0.0 && report.p_cate <= 1.0);
        assert!(report.recall_at_k.contains_key(&1));
    }
}
