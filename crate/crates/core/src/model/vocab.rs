use std::collections::{BTreeSet, HashMap};

/// Placeholders `N0..N{NUMBER_SLOTS-1}` get their own embeddings; higher
/// indices share `<num>`.
pub const NUMBER_SLOTS: usize = 16;
pub const UNK: &str = "<unk>";
pub const NUM: &str = "<num>";

/// Closed token vocabulary; unseen words map to `<unk>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

/// Index `i` if `token` is the placeholder `N<i>`.
pub fn number_slot(token: &str) -> Option<usize> {
    let digits = token.strip_prefix('N')?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

impl Vocab {
    fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Vocab { words, index }
    }

    /// Specials, number placeholders, then the sorted remaining words.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a [String]>) -> Self {
        let mut words = vec![UNK.to_string(), NUM.to_string()];
        words.extend((0..NUMBER_SLOTS).map(|i| format!("N{i}")));
        let rest: BTreeSet<&str> = texts
            .into_iter()
            .flatten()
            .map(String::as_str)
            .filter(|w| number_slot(w).is_none() && *w != UNK && *w != NUM)
            .collect();
        words.extend(rest.into_iter().map(str::to_string));
        Vocab::from_words(words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        let fallback = if number_slot(token).is_some() { NUM } else { UNK };
        self.index.get(fallback).copied().unwrap_or(0)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// One token per line.
    pub fn to_text(&self) -> String {
        let mut s = self.words.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Self {
        Vocab::from_words(text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_and_round_trip() {
        let texts = [vec!["the".to_string(), "sum".into(), "N0".into(), "N20".into()]];
        let v = Vocab::build(texts.iter().map(Vec::as_slice));
        assert_eq!(v.len(), 2 + NUMBER_SLOTS + 2);
        assert_eq!(v.id("N3"), 2 + 3);
        assert_eq!(v.id("N20"), v.id(NUM));
        assert_eq!(v.id("zebra"), v.id(UNK));
        assert_eq!(Vocab::from_text(&v.to_text()), v);
    }

    #[test]
    fn placeholder_detection() {
        assert_eq!(number_slot("N12"), Some(12));
        assert_eq!(number_slot("N"), None);
        assert_eq!(number_slot("Nx"), None);
        assert_eq!(number_slot("n1"), None);
    }
}
