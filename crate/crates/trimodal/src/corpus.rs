//! Product corpus records and their JSONL serialization.
//!
//! One product per line: id, category label, title text, precomputed patch
//! feature vectors, the queries known to lead to the product, and a click
//! frequency used by the popularity correction in the retrieval loss.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::Vocabulary;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Product {
    pub product_id: u64,
    pub category: String,
    pub title: String,
    pub patches: Vec<Vec<f64>>,
    pub queries: Vec<String>,
    pub frequency: u64,
}

pub fn save_corpus(path: &Path, products: &[Product]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for p in products {
        let line = serde_json::to_string(p)?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<Vec<Product>> {
    let f = std::fs::File::open(path)?;
    let mut products = Vec::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: Product = serde_json::from_str(&line).map_err(|e| {
            Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        products.push(p);
    }
    validate_corpus(&products)?;
    Ok(products)
}

/// Checks structural consistency and returns (patch count, patch dimension).
pub fn validate_corpus(products: &[Product]) -> Result<(usize, usize)> {
    let Some(first) = products.first() else {
        return Err(Error::DegenerateInput("corpus is empty".into()));
    };
    let p = first.patches.len();
    let d = first.patches.first().map_or(0, |v| v.len());
    if p == 0 || d == 0 {
        return Err(Error::DegenerateInput(
            "products must carry at least one patch vector".into(),
        ));
    }
    for prod in products {
        if prod.patches.len() != p || prod.patches.iter().any(|v| v.len() != d) {
            return Err(Error::Format(format!(
                "product {} patch grid differs from the first product's {p}x{d}",
                prod.product_id
            )));
        }
        if prod.queries.is_empty() {
            return Err(Error::Format(format!(
                "product {} has no queries",
                prod.product_id
            )));
        }
    }
    Ok((p, d))
}

/// Builds the token vocabulary over every title and query in the corpus.
pub fn build_vocabulary(products: &[Product]) -> Vocabulary {
    let mut tokens: Vec<&str> = Vec::new();
    for p in products {
        tokens.extend(p.title.split_whitespace());
        for q in &p.queries {
            tokens.extend(q.split_whitespace());
        }
    }
    Vocabulary::from_tokens(tokens)
}
