//! Label normalization and word-level matching shared by the knowledge base,
//! the filters and the VQA answer mapper.

use unicode_segmentation::UnicodeSegmentation;

/// Case-folds, trims and collapses internal whitespace runs to one space.
pub fn normalize_label(raw: &str) -> String {
    raw.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Lowercased Unicode words (UAX #29 word boundaries, punctuation dropped).
pub fn tokenize(text: &str) -> Vec<String> {
    text.unicode_words().map(str::to_lowercase).collect()
}

/// True when `phrase` occurs in `haystack` as a contiguous run of whole words.
pub fn contains_phrase(haystack: &[String], phrase: &[String]) -> bool {
    if phrase.is_empty() || phrase.len() > haystack.len() {
        return false;
    }
    haystack.windows(phrase.len()).any(|w| w == phrase)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_case_and_spacing() {
        assert_eq!(
            normalize_label("  Middle-Aged\t  Person "),
            "middle-aged person"
        );
        assert_eq!(normalize_label(""), "");
    }

    #[test]
    fn hyphenated_labels_split_consistently() {
        let caption = tokenize("A middle-aged man rides a horse.");
        assert!(contains_phrase(&caption, &tokenize("middle-aged")));
        assert!(contains_phrase(&caption, &tokenize("Middle Aged")));
    }

    #[test]
    fn no_partial_word_matches() {
        let caption = tokenize("A ladybug on a leaf");
        assert!(!contains_phrase(&caption, &tokenize("lady")));
        assert!(contains_phrase(&caption, &tokenize("ladybug")));
        assert!(!contains_phrase(&caption, &[]));
    }
}
