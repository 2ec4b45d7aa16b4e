//! Small synthetic review corpus with category structure, for offline runs.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::corpus::{Catalog, Interaction};

const CATEGORIES: [(&str, [&str; 15]); 10] = [
    (
        "hair",
        [
            "shampoo",
            "conditioner",
            "dye",
            "serum",
            "mask",
            "spray",
            "gel",
            "oil",
            "mousse",
            "comb",
            "brush",
            "clip",
            "wax",
            "tonic",
            "rinse",
        ],
    ),
    (
        "nail",
        [
            "polish",
            "file",
            "buffer",
            "clipper",
            "topcoat",
            "basecoat",
            "remover",
            "stickers",
            "tips",
            "glue",
            "lamp",
            "drill",
            "cuticle",
            "strengthener",
            "glitter",
        ],
    ),
    (
        "skin",
        [
            "cleanser",
            "moisturizer",
            "toner",
            "sunscreen",
            "exfoliant",
            "retinol",
            "balm",
            "lotion",
            "peel",
            "essence",
            "cream",
            "scrub",
            "patch",
            "mist",
            "ampoule",
        ],
    ),
    (
        "lip",
        [
            "lipstick", "gloss", "liner", "stain", "balm", "plumper", "tint", "crayon", "primer",
            "scrub", "mask", "oil", "pencil", "lacquer", "butter",
        ],
    ),
    (
        "eye",
        [
            "mascara",
            "eyeliner",
            "shadow",
            "palette",
            "lashes",
            "brow",
            "concealer",
            "primer",
            "curler",
            "glitter",
            "kohl",
            "serum",
            "pencil",
            "gel",
            "pomade",
        ],
    ),
    (
        "bath",
        [
            "bomb", "salts", "soap", "sponge", "loofah", "foam", "bubbles", "towel", "robe",
            "pillow", "caddy", "mat", "scrub", "oil", "candle",
        ],
    ),
    (
        "shave",
        [
            "razor",
            "blade",
            "cream",
            "brush",
            "balm",
            "aftershave",
            "trimmer",
            "soap",
            "bowl",
            "strop",
            "stand",
            "gel",
            "tonic",
            "pencil",
            "kit",
        ],
    ),
    (
        "fragrance",
        [
            "perfume",
            "cologne",
            "mist",
            "diffuser",
            "rollerball",
            "atomizer",
            "sachet",
            "incense",
            "candle",
            "sampler",
            "decant",
            "solid",
            "oil",
            "spray",
            "tester",
        ],
    ),
    (
        "tool",
        [
            "tweezers",
            "mirror",
            "dryer",
            "straightener",
            "curler",
            "roller",
            "sharpener",
            "scissors",
            "pouch",
            "organizer",
            "stand",
            "applicator",
            "blender",
            "puff",
            "case",
        ],
    ),
    (
        "vitamin",
        [
            "biotin",
            "collagen",
            "zinc",
            "gummies",
            "capsules",
            "powder",
            "tablets",
            "drops",
            "multivitamin",
            "omega",
            "iron",
            "keratin",
            "probiotic",
            "elixir",
            "tea",
        ],
    ),
];

const ADJECTIVES: [&str; 8] = [
    "gentle",
    "classic",
    "deluxe",
    "travel",
    "organic",
    "professional",
    "daily",
    "vivid",
];

const PRAISE: [&str; 5] = [
    "love this",
    "great",
    "works well",
    "really like this",
    "excellent",
];
const COMPLAINT: [&str; 4] = [
    "not great",
    "disappointing",
    "okay but pricey",
    "did not like this",
];

pub const MINI_USERS: usize = 200;
pub const MINI_SEED: u64 = 20240;

#[derive(Debug, Clone, PartialEq)]
pub struct MiniConfig {
    pub users: usize,
    pub min_length: usize,
    pub max_length: usize,
    /// Probability of staying in the favourite category at each step.
    pub focus: f64,
    pub min_item_count: usize,
    pub seed: u64,
}

impl Default for MiniConfig {
    fn default() -> Self {
        MiniConfig {
            users: MINI_USERS,
            min_length: 7,
            max_length: 13,
            focus: 0.8,
            min_item_count: 5,
            seed: MINI_SEED,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiniCorpus {
    pub catalog: Catalog,
    /// Grouped by user, chronological.
    pub interactions: Vec<Interaction>,
}

pub fn item_id(category: usize, slot: usize) -> String {
    format!("B0MINI{category:02}{slot:02}")
}

fn item_title(category: usize, slot: usize) -> String {
    let (cat, nouns) = CATEGORIES[category];
    let adj = ADJECTIVES[(category * 3 + slot) % ADJECTIVES.len()];
    format!(
        "{} {} {}",
        capitalize(adj),
        capitalize(cat),
        capitalize(nouns[slot])
    )
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

struct Draft {
    favourite: usize,
    items: Vec<(usize, usize, bool)>,
}

pub fn generate_mini(config: &MiniConfig) -> MiniCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let per_cat = CATEGORIES[0].1.len();
    let mut drafts = Vec::with_capacity(config.users);
    for u in 0..config.users {
        let favourite = u % CATEGORIES.len();
        let len = rng.random_range(config.min_length..=config.max_length);
        let mut seen = HashSet::new();
        let mut items = Vec::with_capacity(len);
        let mut pos = rng.random_range(0..per_cat);
        while items.len() < len {
            let on_topic = rng.random_bool(config.focus);
            let (cat, mut slot) = if on_topic {
                pos = (pos + rng.random_range(1..=2)) % per_cat;
                (favourite, pos)
            } else {
                let other = (favourite + rng.random_range(1..CATEGORIES.len())) % CATEGORIES.len();
                (other, rng.random_range(0..per_cat))
            };
            while !seen.insert((cat, slot)) {
                slot = (slot + 1) % per_cat;
            }
            if on_topic {
                pos = slot;
            }
            items.push((cat, slot, on_topic));
        }
        drafts.push(Draft { favourite, items });
    }

    // top up rarely chosen items with fans of their category
    let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for d in &drafts {
        for &(c, s, _) in &d.items {
            *counts.entry((c, s)).or_default() += 1;
        }
    }
    for cat in 0..CATEGORIES.len() {
        for slot in 0..per_cat {
            let mut have = counts.get(&(cat, slot)).copied().unwrap_or(0);
            for d in drafts.iter_mut().filter(|d| d.favourite == cat) {
                if have >= config.min_item_count {
                    break;
                }
                if !d.items.iter().any(|&(c, s, _)| (c, s) == (cat, slot)) {
                    d.items.push((cat, slot, true));
                    have += 1;
                }
            }
        }
    }

    let mut catalog = Catalog::new();
    for cat in 0..CATEGORIES.len() {
        for slot in 0..per_cat {
            catalog.insert(item_id(cat, slot), item_title(cat, slot));
        }
    }
    let mut interactions = Vec::new();
    for (u, d) in drafts.iter().enumerate() {
        let user_id = format!("AMINIU{u:04}");
        let mut ts = 1_500_000_000 + 3_600 * u as i64;
        for &(cat, slot, liked) in &d.items {
            ts += 86_400 * rng.random_range(1..=5);
            let (cat_word, nouns) = CATEGORIES[cat];
            let (rating, phrase) = if liked {
                (
                    rng.random_range(4..=5) as f64,
                    *PRAISE.choose(&mut rng).expect("non-empty"),
                )
            } else {
                (
                    rng.random_range(2..=3) as f64,
                    *COMPLAINT.choose(&mut rng).expect("non-empty"),
                )
            };
            interactions.push(Interaction {
                user_id: user_id.clone(),
                item_id: item_id(cat, slot),
                rating,
                timestamp: ts,
                review_text: format!("{phrase} {cat_word} {}", nouns[slot]),
            });
        }
    }
    MiniCorpus {
        catalog,
        interactions,
    }
}

impl MiniCorpus {
    /// Review lines with the usual public dump field names.
    pub fn write_reviews<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for i in &self.interactions {
            let row = json!({
                "reviewerID": i.user_id,
                "asin": i.item_id,
                "overall": i.rating,
                "unixReviewTime": i.timestamp,
                "reviewText": i.review_text,
            });
            writeln!(out, "{row}")?;
        }
        Ok(())
    }

    pub fn write_metadata<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (id, title) in self.catalog.iter() {
            writeln!(out, "{}", json!({"asin": id, "title": title}))?;
        }
        Ok(())
    }
}
