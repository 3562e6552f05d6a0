//! Text normalization shared by ingestion, evidence checks and CER scoring.

use unicode_normalization::{is_nfc, UnicodeNormalization};
use unicode_properties::{GeneralCategoryGroup, UnicodeGeneralCategory};

/// NFC-normalizes `s`, borrowing nothing when it is already normalized.
pub fn nfc(s: &str) -> String {
    if is_nfc(s) {
        s.to_owned()
    } else {
        s.nfc().collect()
    }
}

pub fn is_normalized(s: &str) -> bool {
    is_nfc(s)
}

pub fn is_punctuation(c: char) -> bool {
    c.general_category_group() == GeneralCategoryGroup::Punctuation
}

/// Characters of `s` after NFC, with whitespace and punctuation removed.
pub fn scoring_chars(s: &str) -> Vec<char> {
    nfc(s)
        .chars()
        .filter(|c| !c.is_whitespace() && !is_punctuation(*c))
        .collect()
}

/// The punctuation marks of `s` in order, after NFC.
pub fn punctuation_marks(s: &str) -> Vec<char> {
    nfc(s).chars().filter(|c| is_punctuation(*c)).collect()
}

/// Verbatim substring test with both sides in NFC.
pub fn contains_verbatim(haystack: &str, needle: &str) -> bool {
    nfc(haystack).contains(&nfc(needle))
}

/// Toneless, spaceless, lowercase pinyin key: "jìn qū" and "jin qu" both map to "jinqu".
pub fn pinyin_key(pinyin: &str) -> String {
    pinyin
        .nfd()
        .filter(|c| c.is_ascii_alphabetic())
        .map(|c| c.to_ascii_lowercase())
        .collect()
}
