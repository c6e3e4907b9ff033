//! Stage I supervision set: positive pairs from catalog co-purchases,
//! category stripping from titles, constrained negative sampling, and
//! deterministic splits.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::EntityDictionary;
use crate::error::{Error, Result};
use crate::par::map_items;
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CatalogItem {
    pub item_id: String,
    pub title: String,
    #[serde(default)]
    pub also_buy: Vec<String>,
    #[serde(default)]
    pub category: Option<String>,
}

/// One supervised pair. `label` is 1 for co-purchased pairs, 0 for sampled
/// negatives. Feature strings never contain the item's own category token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairExample {
    pub id_a: String,
    pub id_b: String,
    pub t_a: String,
    pub t_b: String,
    pub c_a: String,
    pub c_b: String,
    pub label: u8,
}

/// Which dictionary match in a title becomes the category. Product titles
/// usually end with the head noun, so `Last` is the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CategoryPosition {
    First,
    Last,
}

fn normalize_word(word: &str) -> String {
    word.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase()
}

/// Split a title into (category, features). The category is the first or
/// last dictionary term in the title; the features are the remaining words
/// with every occurrence of that category's tokens removed and whitespace
/// normalized. Returns None when no dictionary term occurs.
pub fn strip_category(
    title: &str,
    dict: &EntityDictionary,
    position: CategoryPosition,
) -> Option<(String, String)> {
    let words: Vec<&str> = title.split_whitespace().collect();
    let matches: Vec<(usize, String)> = words
        .iter()
        .enumerate()
        .filter_map(|(i, w)| dict.canonical(&normalize_word(w)).map(|c| (i, c.to_string())))
        .collect();
    let (_, category) = match position {
        CategoryPosition::First => matches.first()?,
        CategoryPosition::Last => matches.last()?,
    };
    let features = words
        .iter()
        .filter(|w| dict.canonical(&normalize_word(w)) != Some(category.as_str()))
        .cloned()
        .collect::<Vec<_>>()
        .join(" ");
    Some((category.clone(), features))
}

/// An item with its stripped category and feature string.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategorizedItem {
    pub item_id: String,
    pub category: String,
    pub features: String,
    pub also_buy: Vec<String>,
}

/// Categorize every catalog item, dropping the ones without a dictionary
/// term in their title. Pure per-item, so this fans out in parallel.
pub fn categorize_catalog(
    catalog: &[CatalogItem],
    dict: &EntityDictionary,
    position: CategoryPosition,
) -> Vec<CategorizedItem> {
    map_items(catalog, |item| {
        strip_category(&item.title, dict, position).map(|(category, features)| CategorizedItem {
            item_id: item.item_id.clone(),
            category,
            features,
            also_buy: item.also_buy.clone(),
        })
    })
    .into_iter()
    .flatten()
    .collect()
}

pub fn unordered_key(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

#[derive(Debug, Default, Clone, Serialize)]
pub struct PairStats {
    pub pairs: usize,
    pub dangling_also_buy: usize,
    pub uncategorized_partner: usize,
    pub same_category: usize,
    pub duplicates: usize,
}

/// One positive pair per (i, j in also_buy(i)) where both items are
/// categorized and their categories differ, deduplicated as unordered pairs.
pub fn derive_positive_pairs(items: &[CategorizedItem]) -> (Vec<PairExample>, PairStats) {
    let by_id: BTreeMap<&str, &CategorizedItem> =
        items.iter().map(|i| (i.item_id.as_str(), i)).collect();
    let mut seen: BTreeSet<(String, String)> = BTreeSet::new();
    let mut out = Vec::new();
    let mut stats = PairStats::default();
    for item in items {
        for partner_id in &item.also_buy {
            let Some(partner) = by_id.get(partner_id.as_str()) else {
                stats.dangling_also_buy += 1;
                continue;
            };
            if partner.category == item.category {
                stats.same_category += 1;
                continue;
            }
            if !seen.insert(unordered_key(&item.item_id, &partner.item_id)) {
                stats.duplicates += 1;
                continue;
            }
            out.push(PairExample {
                id_a: item.item_id.clone(),
                id_b: partner.item_id.clone(),
                t_a: item.features.clone(),
                t_b: partner.features.clone(),
                c_a: item.category.clone(),
                c_b: partner.category.clone(),
                label: 1,
            });
        }
    }
    stats.pairs = out.len();
    (out, stats)
}

/// Union of pair sets with global unordered-pair dedup. Sources must use
/// disjoint (prefixed) id namespaces; an id appearing in two sources with
/// conflicting text is a fault.
pub fn merge_sources(sets: &[Vec<PairExample>]) -> Result<(Vec<PairExample>, PairStats)> {
    fn check<'a>(
        item_text: &mut BTreeMap<&'a str, (&'a str, &'a str)>,
        id: &'a str,
        t: &'a str,
        c: &'a str,
    ) -> Result<()> {
        if let Some(&(pt, pc)) = item_text.get(id) {
            if pt != t || pc != c {
                return Err(Error::fault(format!("item id collision across sources: {id}")));
            }
        } else {
            item_text.insert(id, (t, c));
        }
        Ok(())
    }
    let mut item_text: BTreeMap<&str, (&str, &str)> = BTreeMap::new();
    let mut seen: BTreeSet<(String, String)> = BTreeSet::new();
    let mut out = Vec::new();
    let mut stats = PairStats::default();
    for set in sets {
        for pair in set {
            check(&mut item_text, &pair.id_a, &pair.t_a, &pair.c_a)?;
            check(&mut item_text, &pair.id_b, &pair.t_b, &pair.c_b)?;
            if !seen.insert(unordered_key(&pair.id_a, &pair.id_b)) {
                stats.duplicates += 1;
                continue;
            }
            out.push(pair.clone());
        }
    }
    stats.pairs = out.len();
    Ok((out, stats))
}

#[derive(Debug, Clone, Serialize)]
pub struct NegativeSamplingReport {
    pub sampled: usize,
    pub skipped: usize,
}

/// One negative per positive: the positive's first item anchors, the partner
/// is rejection-sampled uniformly from the catalog under the constraints
/// (absent from the positive set as an unordered pair, distinct categories).
/// Anchors with no eligible partner within `max_retries` draws are skipped
/// with a warning.
pub fn sample_negatives(
    positives: &[PairExample],
    items: &[CategorizedItem],
    seed: u64,
    max_retries: usize,
) -> Result<(Vec<PairExample>, NegativeSamplingReport)> {
    let categories: BTreeSet<&str> = items.iter().map(|i| i.category.as_str()).collect();
    if categories.len() < 2 {
        return Err(Error::Precondition("negative sampling needs >= 2 categories".into()));
    }
    let positive_set: BTreeSet<(String, String)> = positives
        .iter()
        .map(|p| unordered_key(&p.id_a, &p.id_b))
        .collect();
    let by_id: BTreeMap<&str, &CategorizedItem> =
        items.iter().map(|i| (i.item_id.as_str(), i)).collect();

    let mut rng = SplitMix64::substream(seed, "negatives");
    let mut out = Vec::new();
    let mut skipped = 0usize;
    for positive in positives {
        let Some(anchor) = by_id.get(positive.id_a.as_str()) else {
            skipped += 1;
            continue;
        };
        let mut found = false;
        for _ in 0..max_retries {
            let candidate = &items[rng.next_below(items.len())];
            if candidate.item_id == anchor.item_id
                || candidate.category == anchor.category
                || positive_set.contains(&unordered_key(&anchor.item_id, &candidate.item_id))
            {
                continue;
            }
            out.push(PairExample {
                id_a: anchor.item_id.clone(),
                id_b: candidate.item_id.clone(),
                t_a: anchor.features.clone(),
                t_b: candidate.features.clone(),
                c_a: anchor.category.clone(),
                c_b: candidate.category.clone(),
                label: 0,
            });
            found = true;
            break;
        }
        if !found {
            eprintln!(
                "warning: no eligible negative partner for anchor {} after {max_retries} draws",
                positive.id_a
            );
            skipped += 1;
        }
    }
    Ok((
        out.clone(),
        NegativeSamplingReport {
            sampled: out.len(),
            skipped,
        },
    ))
}

/// Seeded shuffle, then floor-allocated split sizes with the remainder going
/// to the first part. Parts partition the input exactly.
pub fn split_dataset<T: Clone>(examples: &[T], ratios: &[f64], seed: u64) -> Result<Vec<Vec<T>>> {
    if ratios.is_empty() || ratios.iter().any(|&r| r <= 0.0) {
        return Err(Error::Precondition("split ratios must be positive".into()));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Precondition(format!("split ratios sum to {sum}, expected 1")));
    }
    if examples.len() < ratios.len() {
        return Err(Error::fault(format!(
            "{} examples cannot fill {} split parts",
            examples.len(),
            ratios.len()
        )));
    }
    let n = examples.len();
    let mut sizes: Vec<usize> = ratios.iter().map(|&r| (n as f64 * r).floor() as usize).collect();
    let allocated: usize = sizes.iter().sum();
    sizes[0] += n - allocated;

    let mut order: Vec<usize> = (0..n).collect();
    SplitMix64::substream(seed, "split").shuffle(&mut order);

    let mut parts = Vec::with_capacity(ratios.len());
    let mut cursor = 0usize;
    for size in sizes {
        let part: Vec<T> = order[cursor..cursor + size]
            .iter()
            .map(|&i| examples[i].clone())
            .collect();
        cursor += size;
        parts.push(part);
    }
    Ok(parts)
}

/// FashionVC-style record: one top/bottom outfit per line, mapped to two
/// catalog items plus one positive pair via the `also_buy` link.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FashionVcPair {
    pub top: FashionVcItem,
    pub bottom: FashionVcItem,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FashionVcItem {
    pub item_id: String,
    pub title: String,
}

/// Convert FashionVC pairs into catalog items whose `also_buy` lists encode
/// the outfit links. Ids are prefixed to keep the namespace disjoint from
/// other sources.
pub fn fashionvc_to_catalog(pairs: &[FashionVcPair], prefix: &str) -> Vec<CatalogItem> {
    let mut items: BTreeMap<String, CatalogItem> = BTreeMap::new();
    for pair in pairs {
        let top_id = format!("{prefix}{}", pair.top.item_id);
        let bottom_id = format!("{prefix}{}", pair.bottom.item_id);
        items
            .entry(top_id.clone())
            .or_insert_with(|| CatalogItem {
                item_id: top_id.clone(),
                title: pair.top.title.clone(),
                also_buy: Vec::new(),
                category: None,
            })
            .also_buy
            .push(bottom_id.clone());
        items.entry(bottom_id.clone()).or_insert_with(|| CatalogItem {
            item_id: bottom_id,
            title: pair.bottom.title.clone(),
            also_buy: Vec::new(),
            category: None,
        });
    }
    items.into_values().collect()
}
