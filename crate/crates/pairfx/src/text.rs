//! Whitespace tokenization shared by the corpus funnel, the extractors, the
//! tiny LM, and the metrics. Lowercases, splits on whitespace, and strips
//! leading/trailing punctuation while keeping interior characters so terms
//! like "t-shirt" and "slip-on" survive intact.

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|raw| {
            let token: &str = raw.trim_matches(|c: char| !c.is_alphanumeric());
            if token.is_empty() {
                None
            } else {
                Some(token.to_lowercase())
            }
        })
        .collect()
}
