//! Synthetic multi-domain click logs with a controllable split between
//! structure shared by all domains and structure owned by one domain.
//!
//! Items are titled "{attribute} {attribute} {noun}". Attribute words come
//! from one pool used by every domain, while nouns and brands belong to a
//! single domain. Every latent quantity that exists in more than one domain
//! (attribute embeddings and qualities, user tastes and activity) is a mix
//! `α·shared + (1−α)·domain-specific`, rescaled to unit variance ratio. The
//! click probability is
//! `sigmoid(γ·⟨u, v⟩ + quality(item) + activity(user) + bias(domain))`
//! where `v` sums the item's attribute embeddings and a brand embedding.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, MIN_DOMAIN_SAMPLES};
use crate::error::{Error, Result};
use crate::layers::mix;
use crate::prompt::InteractionRecord;

const ATTRIBUTES: [&str; 24] = [
    "Red", "Blue", "Green", "Black", "White", "Silver", "Golden", "Vintage", "Classic", "Modern", "Compact", "Deluxe",
    "Premium", "Organic", "Wireless", "Portable", "Soft", "Bright", "Rustic", "Elegant", "Sturdy", "Lightweight",
    "Handmade", "Limited",
];

const THEMES: [(&str, [&str; 8]); 8] = [
    ("Fashion", ["Shirt", "Dress", "Jacket", "Scarf", "Sneakers", "Belt", "Hat", "Skirt"]),
    ("Digital Music", ["Album", "Single", "Remix", "Anthology", "Soundtrack", "Ballad", "Mixtape", "Concerto"]),
    ("Musical Instruments", ["Guitar", "Violin", "Drum", "Keyboard", "Flute", "Ukulele", "Amplifier", "Harmonica"]),
    ("Gift Cards", ["Voucher", "Giftcard", "Certificate", "Coupon", "Pass", "Credit", "Ecard", "Bundle"]),
    ("All Beauty", ["Lipstick", "Serum", "Perfume", "Lotion", "Mascara", "Shampoo", "Cleanser", "Palette"]),
    ("Home and Kitchen", ["Skillet", "Kettle", "Blender", "Teapot", "Knife", "Mug", "Toaster", "Colander"]),
    ("Sports", ["Racket", "Helmet", "Ball", "Glove", "Bicycle", "Skates", "Dumbbell", "Jersey"]),
    ("Toys", ["Puzzle", "Robot", "Doll", "Kite", "Blocks", "Train", "Plush", "Yoyo"]),
];

const BRAND_HEADS: [&str; 12] = ["Nor", "Val", "Zen", "Kor", "Lum", "Tri", "Ost", "Bel", "Cor", "Dex", "Fen", "Gal"];
const BRAND_TAILS: [&str; 8] = ["ex", "ora", "ix", "well", "ton", "ara", "ique", "mo"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Sample count of each domain; its length is the number of domains.
    pub samples_per_domain: Vec<usize>,
    /// Domain names; empty picks built-in themed names.
    pub domain_names: Vec<String>,
    pub latent_dim: usize,
    /// Weight of the shared component of every cross-domain latent.
    pub alpha: f64,
    /// Probability of flipping each sampled label.
    pub noise: f64,
    pub num_users: usize,
    pub items_per_domain: usize,
    pub brands_per_domain: usize,
    /// Number of clicked titles carried in each record's history.
    pub history_len: usize,
    /// Weight γ of the user-item interaction term.
    pub interaction_scale: f64,
    /// Standard deviation of each attribute, noun and brand quality.
    pub quality_scale: f64,
    pub user_bias_scale: f64,
    pub domain_bias_scale: f64,
    /// Weight of the brand embedding in the item vector.
    pub brand_weight: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            samples_per_domain: vec![20_000, 20_000, 1_000],
            domain_names: Vec::new(),
            latent_dim: 8,
            alpha: 0.6,
            noise: 0.05,
            num_users: 200,
            items_per_domain: 300,
            brands_per_domain: 6,
            history_len: 2,
            interaction_scale: 1.0,
            quality_scale: 0.8,
            user_bias_scale: 0.3,
            domain_bias_scale: 0.3,
            brand_weight: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.samples_per_domain.is_empty() {
            return err("at least one domain is required".into());
        }
        if let Some((d, &n)) = self
            .samples_per_domain
            .iter()
            .enumerate()
            .find(|(_, &n)| n < MIN_DOMAIN_SAMPLES)
        {
            return err(format!(
                "domain {d} has {n} samples, at least {MIN_DOMAIN_SAMPLES} are needed for the splits"
            ));
        }
        if !self.domain_names.is_empty() {
            if self.domain_names.len() != self.samples_per_domain.len() {
                return err(format!(
                    "{} domain names for {} sample counts",
                    self.domain_names.len(),
                    self.samples_per_domain.len()
                ));
            }
            for (i, n) in self.domain_names.iter().enumerate() {
                if n.trim().is_empty() || self.domain_names[..i].contains(n) {
                    return err(format!("domain name `{n}` is empty or repeated"));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return err(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return err(format!("noise {} outside [0, 1]", self.noise));
        }
        if self.latent_dim == 0 || self.num_users == 0 || self.items_per_domain == 0 || self.brands_per_domain == 0 {
            return err("latent_dim, num_users, items_per_domain and brands_per_domain must be positive".into());
        }
        for (k, v) in [
            ("interaction_scale", self.interaction_scale),
            ("quality_scale", self.quality_scale),
            ("user_bias_scale", self.user_bias_scale),
            ("domain_bias_scale", self.domain_bias_scale),
            ("brand_weight", self.brand_weight),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return err(format!("{k} must be finite and non-negative"));
            }
        }
        Ok(())
    }

    pub fn names(&self) -> Vec<String> {
        if !self.domain_names.is_empty() {
            return self.domain_names.clone();
        }
        (0..self.samples_per_domain.len())
            .map(|m| match THEMES.get(m) {
                Some((name, _)) => name.to_string(),
                None => format!("Domain {m}"),
            })
            .collect()
    }
}

/// Generated dataset plus the click probability each label was drawn from
/// (before label noise), aligned with `dataset.records`.
#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub dataset: Dataset,
    pub true_probs: Vec<f64>,
}

struct Item {
    title: String,
    brand: String,
    vector: Vec<f64>,
    quality: f64,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let d = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| d.sample(rng)).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Draws the dataset; identical configs give identical output.
pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let k = cfg.latent_dim;
    let a = cfg.alpha;
    let norm = (a * a + (1.0 - a) * (1.0 - a)).sqrt();
    let blend = |s: f64, t: f64| (a * s + (1.0 - a) * t) / norm;
    let blend_vec = |s: &[f64], t: &[f64]| s.iter().zip(t).map(|(&x, &y)| blend(x, y)).collect::<Vec<_>>();
    let names = cfg.names();
    let n_attr = ATTRIBUTES.len();
    let emb_std = 1.0 / (k as f64).sqrt();

    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[cfg.seed, 0]));
    let shared_attr: Vec<Vec<f64>> = (0..n_attr).map(|_| normal_vec(&mut rng, k, emb_std)).collect();
    let shared_attr_q = normal_vec(&mut rng, n_attr, cfg.quality_scale);
    let shared_taste: Vec<Vec<f64>> = (0..cfg.num_users).map(|_| normal_vec(&mut rng, k, 1.0)).collect();
    let shared_activity = normal_vec(&mut rng, cfg.num_users, cfg.user_bias_scale);
    let mut brand_names: Vec<String> = BRAND_HEADS
        .iter()
        .flat_map(|h| BRAND_TAILS.iter().map(move |t| format!("{h}{t}")))
        .collect();
    brand_names.shuffle(&mut rng);

    let mut records = Vec::new();
    let mut true_probs = Vec::new();
    for (m, &count) in cfg.samples_per_domain.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[cfg.seed, 1, m as u64]));
        let nouns: Vec<String> = match THEMES.get(m) {
            Some((_, n)) => n.iter().map(|s| s.to_string()).collect(),
            None => (0..8).map(|j| format!("Thing{m}x{j}")).collect(),
        };
        let attr: Vec<Vec<f64>> = shared_attr
            .iter()
            .map(|s| blend_vec(s, &normal_vec(&mut rng, k, emb_std)))
            .collect();
        let attr_q: Vec<f64> = shared_attr_q
            .iter()
            .map(|&s| blend(s, Normal::new(0.0, cfg.quality_scale).unwrap().sample(&mut rng)))
            .collect();
        let noun_q = normal_vec(&mut rng, nouns.len(), cfg.quality_scale);
        let brands: Vec<(String, Vec<f64>, f64)> = (0..cfg.brands_per_domain)
            .map(|j| {
                let name = brand_names
                    .get(m * cfg.brands_per_domain + j)
                    .cloned()
                    .unwrap_or_else(|| format!("Brand{m}x{j}"));
                let v = normal_vec(&mut rng, k, emb_std);
                let q = Normal::new(0.0, cfg.quality_scale).unwrap().sample(&mut rng);
                (name, v, q)
            })
            .collect();
        let taste: Vec<Vec<f64>> = shared_taste
            .iter()
            .map(|s| blend_vec(s, &normal_vec(&mut rng, k, 1.0)))
            .collect();
        let activity: Vec<f64> = shared_activity
            .iter()
            .map(|&s| blend(s, Normal::new(0.0, cfg.user_bias_scale).unwrap().sample(&mut rng)))
            .collect();
        let domain_bias = Normal::new(0.0, cfg.domain_bias_scale).unwrap().sample(&mut rng);

        let items: Vec<Item> = (0..cfg.items_per_domain)
            .map(|_| {
                let a1 = rng.gen_range(0..n_attr);
                let a2 = (a1 + rng.gen_range(1..n_attr)) % n_attr;
                let noun = rng.gen_range(0..nouns.len());
                let b = rng.gen_range(0..brands.len());
                let vector = (0..k)
                    .map(|c| attr[a1][c] + attr[a2][c] + cfg.brand_weight * brands[b].1[c])
                    .collect();
                Item {
                    title: format!("{} {} {}", ATTRIBUTES[a1], ATTRIBUTES[a2], nouns[noun]),
                    brand: brands[b].0.clone(),
                    vector,
                    quality: attr_q[a1] + attr_q[a2] + noun_q[noun] + brands[b].2,
                }
            })
            .collect();

        let mut clicked: Vec<Vec<usize>> = vec![Vec::new(); cfg.num_users];
        for _ in 0..count {
            let u = rng.gen_range(0..cfg.num_users);
            let j = rng.gen_range(0..items.len());
            let it = &items[j];
            let dot: f64 = taste[u].iter().zip(&it.vector).map(|(x, y)| x * y).sum();
            let p = sigmoid(cfg.interaction_scale * dot + it.quality + activity[u] + domain_bias);
            let mut label = u8::from(rng.gen::<f64>() < p);
            if rng.gen::<f64>() < cfg.noise {
                label = 1 - label;
            }
            let hist = &clicked[u];
            let history = hist[hist.len().saturating_sub(cfg.history_len)..]
                .iter()
                .map(|&h| items[h].title.clone())
                .collect();
            let price = rng.gen_range(5.0..200.0);
            records.push(InteractionRecord {
                domain_name: names[m].clone(),
                user_id: u.to_string(),
                history,
                item_id: (m * cfg.items_per_domain + j).to_string(),
                title: it.title.clone(),
                brand: it.brand.clone(),
                price: format!("{price:.2}"),
                label,
            });
            true_probs.push(p);
            if label == 1 {
                clicked[u].push(j);
            }
        }
    }
    Ok(SynthOutput {
        dataset: Dataset::new(records, mix(&[cfg.seed, 2]))?,
        true_probs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::auc;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            samples_per_domain: vec![3000, 3000],
            seed,
            ..SynthConfig::default()
        }
    }

    fn bayes_auc(out: &SynthOutput, domain: &str) -> f64 {
        let idx: Vec<usize> = (0..out.dataset.len())
            .filter(|&i| out.dataset.records[i].domain_name == domain)
            .collect();
        let s: Vec<f64> = idx.iter().map(|&i| out.true_probs[i]).collect();
        let y: Vec<u8> = idx.iter().map(|&i| out.dataset.records[i].label).collect();
        auc(&s, &y).unwrap()
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate(&small(3)).unwrap();
        let b = generate(&small(3)).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_ne!(a.dataset, generate(&small(4)).unwrap().dataset);
    }

    #[test]
    fn counts_and_names() {
        let out = generate(&SynthConfig {
            samples_per_domain: vec![50, 20, 10],
            ..SynthConfig::default()
        })
        .unwrap();
        assert_eq!(out.dataset.domains(), ["Fashion", "Digital Music", "Musical Instruments"]);
        assert_eq!(out.dataset.count("Digital Music"), 20);
    }

    #[test]
    fn zero_sample_domain_is_config_error() {
        let cfg = SynthConfig {
            samples_per_domain: vec![100, 0],
            ..SynthConfig::default()
        };
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn full_noise_removes_signal() {
        let out = generate(&SynthConfig { noise: 0.5, ..small(5) }).unwrap();
        let a = bayes_auc(&out, "Fashion");
        assert!((a - 0.5).abs() < 0.04, "{a}");
    }

    #[test]
    fn symmetric_domains_have_similar_bayes_auc() {
        let out = generate(&SynthConfig {
            alpha: 1.0,
            noise: 0.0,
            ..small(6)
        })
        .unwrap();
        let (a, b) = (bayes_auc(&out, "Fashion"), bayes_auc(&out, "Digital Music"));
        assert!(a > 0.7 && (a - b).abs() < 0.05, "{a} {b}");
    }

    #[test]
    fn history_holds_earlier_clicks_of_same_user_and_domain() {
        let out = generate(&small(7)).unwrap();
        let recs = &out.dataset.records;
        let later = recs.iter().rposition(|r| r.history.len() == 2).unwrap();
        let r = &recs[later];
        let last_click = recs[..later]
            .iter()
            .rev()
            .find(|p| p.user_id == r.user_id && p.domain_name == r.domain_name && p.label == 1)
            .unwrap();
        assert_eq!(r.history[1], last_click.title);
    }
}
