//! Synthetic corpus generator.
//!
//! Each category gets a set of signature tokens and a signature direction in
//! patch-feature space. Queries always draw from the signature tokens, so
//! every query is category-revealing. Whether the *product* side reveals the
//! category through its title, its patches, or both is controlled per
//! category by a modality profile, which is what lets training experiments
//! compare where the product towers learn to look. Product click frequencies
//! follow a power law with a configurable exponent.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::Product;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModalityProfile {
    /// Title tokens reveal the category; patches are pure noise.
    TextDominant,
    /// Patches carry the category direction; titles are category-independent noise.
    ImageDominant,
    /// Both carry a weaker version of the signal.
    Balanced,
}

impl ModalityProfile {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "text-dominant" | "text" => Ok(ModalityProfile::TextDominant),
            "image-dominant" | "image" => Ok(ModalityProfile::ImageDominant),
            "balanced" => Ok(ModalityProfile::Balanced),
            other => Err(Error::Config(format!("unknown modality profile {other:?}"))),
        }
    }
}

/// How modality profiles are assigned across categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProfileMix {
    /// Round-robin text-dominant, image-dominant, balanced.
    Cycle,
    Fixed(ModalityProfile),
}

impl ProfileMix {
    pub fn profile_for(self, category_index: usize) -> ModalityProfile {
        match self {
            ProfileMix::Fixed(p) => p,
            ProfileMix::Cycle => match category_index % 3 {
                0 => ModalityProfile::TextDominant,
                1 => ModalityProfile::ImageDominant,
                _ => ModalityProfile::Balanced,
            },
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        if s == "cycle" {
            Ok(ProfileMix::Cycle)
        } else {
            Ok(ProfileMix::Fixed(ModalityProfile::parse(s)?))
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_categories: usize,
    pub products_per_category: usize,
    pub queries_per_product: usize,
    /// Signature tokens per category.
    pub signature_tokens: usize,
    /// Size of the shared category-independent token pool.
    pub noise_tokens: usize,
    /// Patches per product.
    pub n_patches: usize,
    /// Patch feature dimension.
    pub d_img: usize,
    pub profile_mix: ProfileMix,
    /// Power-law exponent for click frequencies.
    pub skew: f64,
    pub title_len: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_categories: 26,
            products_per_category: 40,
            queries_per_product: 5,
            signature_tokens: 6,
            noise_tokens: 120,
            n_patches: 16,
            d_img: 32,
            profile_mix: ProfileMix::Cycle,
            skew: 1.0,
            title_len: 10,
            seed: 0,
        }
    }
}

impl GenConfig {
    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_categories", self.n_categories),
            ("products_per_category", self.products_per_category),
            ("queries_per_product", self.queries_per_product),
            ("signature_tokens", self.signature_tokens),
            ("noise_tokens", self.noise_tokens),
            ("n_patches", self.n_patches),
            ("d_img", self.d_img),
            ("title_len", self.title_len),
        ] {
            if v == 0 {
                return Err(Error::InvalidParameter(format!("{name} must be positive")));
            }
        }
        if self.skew < 0.0 {
            return Err(Error::InvalidParameter("skew must be nonnegative".into()));
        }
        Ok(())
    }
}

const SYLLABLES: [&str; 20] = [
    "ba", "de", "ki", "lo", "mu", "na", "po", "ri", "sa", "te", "vu", "za", "fe", "go", "hi",
    "ju", "ke", "li", "mo", "nu",
];

/// Injective index-to-pseudoword mapping (base-20 syllable digits).
fn synth_word(index: usize) -> String {
    let mut digits = vec![index % SYLLABLES.len()];
    let mut rest = index / SYLLABLES.len();
    while rest > 0 {
        digits.push(rest % SYLLABLES.len());
        rest /= SYLLABLES.len();
    }
    digits.iter().rev().map(|&d| SYLLABLES[d]).collect()
}

pub fn category_name(index: usize) -> String {
    format!("cat{index:02}")
}

struct CategoryPlan {
    name: String,
    profile: ModalityProfile,
    signature: Vec<String>,
    direction: Vec<f64>,
}

pub fn generate(cfg: &GenConfig) -> Result<Vec<Product>> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    let noise_pool: Vec<String> = (0..cfg.noise_tokens)
        .map(|j| synth_word(cfg.n_categories * cfg.signature_tokens + j))
        .collect();

    let mut plans = Vec::with_capacity(cfg.n_categories);
    for c in 0..cfg.n_categories {
        let signature = (0..cfg.signature_tokens)
            .map(|k| synth_word(c * cfg.signature_tokens + k))
            .collect();
        let mut direction: Vec<f64> = (0..cfg.d_img).map(|_| normal.sample(&mut rng)).collect();
        let norm = direction.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        direction.iter_mut().for_each(|x| *x /= norm);
        plans.push(CategoryPlan {
            name: category_name(c),
            profile: cfg.profile_mix.profile_for(c),
            signature,
            direction,
        });
    }

    let total = cfg.n_categories * cfg.products_per_category;
    let mut ranks: Vec<usize> = (1..=total).collect();
    ranks.shuffle(&mut rng);

    let mut products = Vec::with_capacity(total);
    for (c, plan) in plans.iter().enumerate() {
        for p in 0..cfg.products_per_category {
            let product_id = (c * cfg.products_per_category + p) as u64;
            let title = gen_title(cfg, plan, &noise_pool, &mut rng);
            let patches = gen_patches(cfg, plan, &normal, &mut rng);
            let queries = (0..cfg.queries_per_product)
                .map(|_| gen_query(plan, &mut rng))
                .collect();
            let rank = ranks[product_id as usize] as f64;
            let frequency = (1e5 / rank.powf(cfg.skew)).round().max(1.0) as u64;
            products.push(Product {
                product_id,
                category: plan.name.clone(),
                title,
                patches,
                queries,
                frequency,
            });
        }
    }
    Ok(products)
}

fn gen_title(
    cfg: &GenConfig,
    plan: &CategoryPlan,
    noise_pool: &[String],
    rng: &mut ChaCha20Rng,
) -> String {
    let signature_share = match plan.profile {
        ModalityProfile::TextDominant => 0.6,
        ModalityProfile::Balanced => 0.3,
        ModalityProfile::ImageDominant => 0.0,
    };
    let words: Vec<&str> = (0..cfg.title_len)
        .map(|_| {
            if rng.random::<f64>() < signature_share {
                plan.signature[rng.random_range(0..plan.signature.len())].as_str()
            } else {
                noise_pool[rng.random_range(0..noise_pool.len())].as_str()
            }
        })
        .collect();
    words.join(" ")
}

fn gen_patches(
    cfg: &GenConfig,
    plan: &CategoryPlan,
    normal: &Normal<f64>,
    rng: &mut ChaCha20Rng,
) -> Vec<Vec<f64>> {
    let (signal, noise_std) = match plan.profile {
        ModalityProfile::TextDominant => (0.0, 1.0),
        ModalityProfile::ImageDominant => (2.0, 0.5),
        ModalityProfile::Balanced => (1.2, 0.8),
    };
    (0..cfg.n_patches)
        .map(|_| {
            plan.direction
                .iter()
                .map(|&d| signal * d + noise_std * normal.sample(rng))
                .collect()
        })
        .collect()
}

fn gen_query(plan: &CategoryPlan, rng: &mut ChaCha20Rng) -> String {
    let len = rng.random_range(1..=3usize.min(plan.signature.len()));
    let mut picks: Vec<usize> = (0..plan.signature.len()).collect();
    picks.shuffle(rng);
    picks.truncate(len);
    picks
        .iter()
        .map(|&i| plan.signature[i].as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Sidecar manifest recording how a corpus file was produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenManifest {
    pub config: GenConfig,
    pub n_products: usize,
}

pub fn save_manifest(path: &std::path::Path, manifest: &GenManifest) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest)?;
    std::fs::write(path, json)?;
    Ok(())
}
