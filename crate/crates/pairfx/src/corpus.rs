//! PFE dataset construction funnel: dictionary-driven entity matching over a
//! raw sentence corpus, an entity-count filter, two LLM-backed filter stages
//! (feature extraction and match verification), and record assembly with a
//! funnel log.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::llm::Completer;
use crate::par::map_items;
use crate::text::tokenize;

/// Category vocabulary with naive singular/plural aliases. A plural alias is
/// only generated when the variant is not itself a dictionary term, so
/// "jean" and "jeans" stay distinct canonicals.
#[derive(Debug, Clone)]
pub struct EntityDictionary {
    terms: BTreeSet<String>,
    aliases: BTreeMap<String, String>,
}

impl EntityDictionary {
    pub fn from_terms<I: IntoIterator<Item = String>>(terms: I) -> Result<Self> {
        let mut set = BTreeSet::new();
        for term in terms {
            let term = term.trim().to_lowercase();
            if term.is_empty() {
                continue;
            }
            if term.split_whitespace().count() > 1 {
                return Err(Error::config(format!("dictionary term has whitespace: {term:?}")));
            }
            if !set.insert(term.clone()) {
                return Err(Error::config(format!("duplicate dictionary term: {term:?}")));
            }
        }
        if set.is_empty() {
            return Err(Error::config("dictionary is empty"));
        }
        let mut aliases = BTreeMap::new();
        for term in &set {
            let mut candidates = vec![format!("{term}s")];
            if let Some(singular) = term.strip_suffix('s') {
                if !singular.is_empty() {
                    candidates.push(singular.to_string());
                }
            }
            for alias in candidates {
                if set.contains(&alias) {
                    continue;
                }
                if let Some(existing) = aliases.get(&alias) {
                    if existing != term {
                        return Err(Error::config(format!(
                            "alias {alias:?} is ambiguous between {existing:?} and {term:?}"
                        )));
                    }
                } else {
                    aliases.insert(alias, term.clone());
                }
            }
        }
        Ok(EntityDictionary { terms: set, aliases })
    }

    /// Canonical term for a token, resolving aliases.
    pub fn canonical(&self, token: &str) -> Option<&str> {
        if let Some(term) = self.terms.get(token) {
            Some(term.as_str())
        } else {
            self.aliases.get(token).map(String::as_str)
        }
    }

    pub fn contains(&self, term: &str) -> bool {
        self.terms.contains(term)
    }

    pub fn terms(&self) -> impl Iterator<Item = &String> {
        self.terms.iter()
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }
}

/// Load a dictionary file: one term per line, `#` comments allowed.
pub fn load_entity_dictionary(path: &Path) -> Result<EntityDictionary> {
    let content = fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read dictionary {}: {e}", path.display())))?;
    let terms = content
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim().to_string())
        .filter(|l| !l.is_empty());
    EntityDictionary::from_terms(terms)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawSentence {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityMention {
    pub term: String,
    pub token_index: usize,
}

/// One explanation instance: two (feature, category) slots plus the
/// ground-truth explanation sentence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PFERecord {
    pub features: (String, String),
    pub categories: (String, String),
    pub explanation: String,
    pub source_sentence_id: String,
}

/// Case-insensitive token-level dictionary matching after punctuation
/// stripping. Mentions come back in token order; repeated terms are
/// reported once per occurrence.
pub fn extract_entities(sentence: &RawSentence, dict: &EntityDictionary) -> Vec<EntityMention> {
    tokenize(&sentence.text)
        .iter()
        .enumerate()
        .filter_map(|(idx, token)| {
            dict.canonical(token).map(|term| EntityMention {
                term: term.to_string(),
                token_index: idx,
            })
        })
        .collect()
}

fn distinct_terms_in_order(mentions: &[EntityMention]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for m in mentions {
        if seen.insert(m.term.clone()) {
            out.push(m.term.clone());
        }
    }
    out
}

/// Keep sentences with at least `min_distinct` distinct canonical entities.
/// Order preserved; distinctness counts canonical terms, not occurrences.
pub fn filter_by_entity_count(
    sentences: &[RawSentence],
    dict: &EntityDictionary,
    min_distinct: usize,
) -> Result<Vec<(RawSentence, Vec<EntityMention>)>> {
    if min_distinct < 2 {
        return Err(Error::Precondition(format!("min_distinct must be >= 2, got {min_distinct}")));
    }
    let mentions = map_items(sentences, |s| extract_entities(s, dict));
    Ok(sentences
        .iter()
        .zip(mentions)
        .filter(|(_, m)| distinct_terms_in_order(m).len() >= min_distinct)
        .map(|(s, m)| (s.clone(), m))
        .collect())
}

const FEATURE_PROMPT_TEMPLATE: &str = "Let me give you an example:\n\
Description: The hits run from Poirets stunning 1919 opera coat, made of a single swath of uncut purple silk velvet, to a 2018 kimono printed with oversize manga characters by Comme des Garons founder Rei Kawakubo.\n\
Items: coat, kimono;\n\
Key features:\n\
- coat: purple silk velvet;\n\
- kimono: oversize manga characters;\n\
Then please give the key features concisely following the above structure in the following question:\n\
Description: {sentence}\n\
Items: {items}\n\
Key features:\n";

const MATCH_PROMPT_TEMPLATE: &str = "Could you read this sentence and let me know if it is explaining why two pieces of clothing look good together as an outfit? It's possible that the sentence could be one or several sentences about why the two items complement each other and create a cohesive outfit. If no, then simply answer a \"No\"; If yes, please give a concise reason for how they complement each other in the form of \"Reason: They match because ...\".\n{sentence}";

/// Render the feature-extraction prompt. Items are the distinct canonical
/// terms in mention order, comma-separated.
pub fn build_feature_prompt(sentence: &RawSentence, mentions: &[EntityMention]) -> Result<String> {
    let items = distinct_terms_in_order(mentions);
    if items.len() < 2 {
        return Err(Error::Precondition(format!(
            "feature prompt needs >= 2 mentions, got {}",
            items.len()
        )));
    }
    Ok(FEATURE_PROMPT_TEMPLATE
        .replace("{sentence}", sentence.text.trim())
        .replace("{items}", &items.join(", ")))
}

/// Render the match-verification prompt.
pub fn build_match_prompt(sentence: &RawSentence) -> Result<String> {
    let text = sentence.text.trim();
    if text.is_empty() {
        return Err(Error::Precondition("match prompt needs a non-empty sentence".into()));
    }
    Ok(MATCH_PROMPT_TEMPLATE.replace("{sentence}", text))
}

/// Why a sentence was rejected by an LLM filter stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rejection {
    /// A key feature came back as "not-specified".
    NotSpecified,
    /// The match filter answered "No".
    Negative,
    /// Response did not follow the expected structure.
    Malformed,
}

/// Parse "- item: feature" lines. The whole sentence is rejected when any
/// expected item is missing or any feature is "not-specified".
pub fn parse_feature_response(
    text: &str,
    expected_items: &[String],
) -> std::result::Result<BTreeMap<String, String>, Rejection> {
    let mut features = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        let Some(rest) = line.strip_prefix('-') else {
            continue;
        };
        let Some((item, feature)) = rest.split_once(':') else {
            continue;
        };
        let item = item.trim().to_lowercase();
        let feature = feature.trim().trim_end_matches(';').trim().to_string();
        if feature.eq_ignore_ascii_case("not-specified") {
            return Err(Rejection::NotSpecified);
        }
        if feature.is_empty() {
            continue;
        }
        features.insert(item, feature);
    }
    if features.is_empty() {
        return Err(Rejection::Malformed);
    }
    for item in expected_items {
        if !features.contains_key(item) {
            return Err(Rejection::Malformed);
        }
    }
    Ok(features)
}

/// Parse the match-filter response: leading "No" rejects, otherwise the
/// explanation is everything after "Reason:".
pub fn parse_match_response(text: &str) -> std::result::Result<String, Rejection> {
    let trimmed = text.trim();
    if trimmed.to_lowercase().starts_with("no") {
        return Err(Rejection::Negative);
    }
    if let Some(pos) = trimmed.find("Reason:") {
        let explanation = trimmed[pos + "Reason:".len()..].trim();
        if !explanation.is_empty() {
            return Ok(explanation.to_string());
        }
    }
    Err(Rejection::Malformed)
}

/// Stage names and counts for the funnel log (`funnel.json`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FunnelLog {
    pub stages: Vec<FunnelStage>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FunnelStage {
    pub name: String,
    pub count: usize,
}

impl FunnelLog {
    fn push(&mut self, name: &str, count: usize) {
        self.stages.push(FunnelStage {
            name: name.to_string(),
            count,
        });
    }

    pub fn count(&self, name: &str) -> Option<usize> {
        self.stages.iter().find(|s| s.name == name).map(|s| s.count)
    }
}

pub struct FunnelOutput {
    pub records: Vec<PFERecord>,
    pub log: FunnelLog,
}

/// Run the full funnel: entity filter, feature extraction via the LLM,
/// match verification via the LLM, record assembly. Deterministic given a
/// corpus and cached LLM responses. The first two distinct entities (in
/// token order) with accepted features fill the record's two slots.
pub fn run_funnel(
    sentences: &[RawSentence],
    dict: &EntityDictionary,
    completer: &dyn Completer,
    min_distinct: usize,
) -> Result<FunnelOutput> {
    for s in sentences {
        if s.text.trim().is_empty() {
            return Err(Error::config(format!("sentence {} has empty text", s.id)));
        }
    }
    let mut log = FunnelLog { stages: Vec::new() };
    log.push("input", sentences.len());

    let filtered = filter_by_entity_count(sentences, dict, min_distinct)?;
    log.push("entity_filtered", filtered.len());

    // Feature extraction stage.
    let mut feature_accepted: Vec<(RawSentence, Vec<String>, BTreeMap<String, String>)> = Vec::new();
    for (sentence, mentions) in &filtered {
        let items = distinct_terms_in_order(mentions);
        let prompt = build_feature_prompt(sentence, mentions)?;
        let response = completer.complete(&prompt)?;
        match parse_feature_response(&response, &items) {
            Ok(features) => feature_accepted.push((sentence.clone(), items, features)),
            Err(_) => continue,
        }
    }
    log.push("feature_accepted", feature_accepted.len());

    // Match verification stage + assembly.
    let mut records = Vec::new();
    for (sentence, items, features) in &feature_accepted {
        let prompt = build_match_prompt(sentence)?;
        let response = completer.complete(&prompt)?;
        let explanation = match parse_match_response(&response) {
            Ok(e) => e,
            Err(_) => continue,
        };
        // First two entities with accepted features, in token order.
        let chosen: Vec<&String> = items.iter().filter(|i| features.contains_key(*i)).take(2).collect();
        if chosen.len() < 2 {
            continue;
        }
        records.push(PFERecord {
            features: (features[chosen[0]].clone(), features[chosen[1]].clone()),
            categories: (chosen[0].clone(), chosen[1].clone()),
            explanation,
            source_sentence_id: sentence.id.clone(),
        });
    }
    log.push("match_accepted", records.len());

    Ok(FunnelOutput { records, log })
}

/// Percentage of category slots per canonical term (both slots counted),
/// rounded half-up to two decimals. Percentages sum to 100 up to rounding.
pub fn category_stats(records: &[PFERecord]) -> BTreeMap<String, f64> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for r in records {
        *counts.entry(r.categories.0.clone()).or_insert(0) += 1;
        *counts.entry(r.categories.1.clone()).or_insert(0) += 1;
    }
    let total: usize = counts.values().sum();
    counts
        .into_iter()
        .map(|(term, c)| {
            let pct = 100.0 * c as f64 / total as f64;
            (term, (pct * 100.0).round() / 100.0)
        })
        .collect()
}
