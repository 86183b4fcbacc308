//! Arabic text normalization and whitespace tokenization.
//!
//! The pipeline applied by [`normalize`]:
//! - NFC composition
//! - removal of harakat, Quranic marks, superscript alef and tatweel
//! - folding of alef variants, alef maqsura, ta marbuta and hamza carriers
//! - punctuation replaced by a space
//! - whitespace collapsed to single spaces and trimmed
//!
//! Latin letters and digits pass through unchanged.

use std::fmt;

use unicode_general_category::{get_general_category, GeneralCategory};
use unicode_normalization::{is_nfc, UnicodeNormalization};

const TATWEEL: char = '\u{0640}';
const SUPERSCRIPT_ALEF: char = '\u{0670}';

const ARABIC_COMMA: char = '\u{060C}';
const ARABIC_SEMICOLON: char = '\u{061B}';
const ARABIC_QUESTION_MARK: char = '\u{061F}';

/// Harakat, tanween, shadda, sukun and the extended marks up to U+065F,
/// plus superscript alef and tatweel.
#[inline]
pub fn is_stripped_mark(c: char) -> bool {
    matches!(c, '\u{064B}'..='\u{065F}') || c == SUPERSCRIPT_ALEF || c == TATWEEL
}

#[inline]
pub fn is_punctuation(c: char) -> bool {
    if matches!(c, ARABIC_COMMA | ARABIC_SEMICOLON | ARABIC_QUESTION_MARK) {
        return true;
    }
    matches!(
        get_general_category(c),
        GeneralCategory::ConnectorPunctuation
            | GeneralCategory::DashPunctuation
            | GeneralCategory::OpenPunctuation
            | GeneralCategory::ClosePunctuation
            | GeneralCategory::InitialPunctuation
            | GeneralCategory::FinalPunctuation
            | GeneralCategory::OtherPunctuation
    )
}

/// Folds a single codepoint. Anything outside the map is returned unchanged.
#[inline]
pub fn fold_letter(c: char) -> char {
    match c {
        // alef madda, alef hamza above, alef hamza below, alef wasla
        '\u{0622}' | '\u{0623}' | '\u{0625}' | '\u{0671}' => '\u{0627}',
        // alef maqsura
        '\u{0649}' => '\u{064A}',
        // ta marbuta
        '\u{0629}' => '\u{0647}',
        // waw hamza
        '\u{0624}' => '\u{0648}',
        // ya hamza
        '\u{0626}' => '\u{064A}',
        other => other,
    }
}

pub fn strip_diacritics(text: &str) -> String {
    text.chars().filter(|&c| !is_stripped_mark(c)).collect()
}

pub fn normalize_letters(text: &str) -> String {
    text.chars().map(fold_letter).collect()
}

/// Replaces every punctuation codepoint with a single space.
pub fn strip_punctuation(text: &str) -> String {
    text.chars()
        .map(|c| if is_punctuation(c) { ' ' } else { c })
        .collect()
}

fn collapse_whitespace(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for word in text.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

/// Text that has been through [`normalize`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NormalizedText(String);

impl NormalizedText {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn into_string(self) -> String {
        self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Rebuilds text from tokens previously produced by [`tokenize_whitespace`].
    pub fn from_tokens<S: AsRef<str>>(tokens: &[S]) -> Self {
        let joined = tokens
            .iter()
            .map(AsRef::as_ref)
            .collect::<Vec<_>>()
            .join(" ");
        NormalizedText(joined)
    }

    /// Checks every documented invariant. Used by tests and debug assertions.
    pub fn satisfies_invariants(s: &str) -> bool {
        if s.starts_with(char::is_whitespace) || s.ends_with(char::is_whitespace) {
            return false;
        }
        if s.contains("  ") {
            return false;
        }
        s.chars().all(|c| {
            !is_stripped_mark(c) && !is_punctuation(c) && (c == ' ' || !c.is_whitespace())
        })
    }
}

impl fmt::Display for NormalizedText {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for NormalizedText {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

pub fn normalize(text: &str) -> NormalizedText {
    let composed: String = text.nfc().collect();
    let stripped = strip_diacritics(&composed);
    let folded = normalize_letters(&stripped);
    let unpunctuated = strip_punctuation(&folded);
    let mut collapsed = collapse_whitespace(&unpunctuated);
    // Removing a blocking mark can leave a composable pair behind
    // (e.g. `e`, U+0653, U+0301), so compose once more.
    if !is_nfc(&collapsed) {
        collapsed = collapsed.nfc().collect();
    }
    debug_assert!(NormalizedText::satisfies_invariants(&collapsed));
    NormalizedText(collapsed)
}

pub fn tokenize_whitespace(text: &NormalizedText) -> Vec<&str> {
    if text.is_empty() {
        return Vec::new();
    }
    text.as_str().split(' ').collect()
}
