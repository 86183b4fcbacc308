//! Rule-based severity annotation.
//!
//! A question is normalized, split on whitespace, and scanned for lexicon
//! phrases as contiguous token runs. The label is the highest tier among all
//! matches, `Mild` when nothing matches.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::arabic_text::{normalize, tokenize_whitespace};
use crate::dataset::{QaRecord, SeverityStats};
use crate::error::{Error, Result};

/// Longest phrase, in tokens, a lexicon may contain.
pub const MAX_PHRASE_TOKENS: usize = 5;

const DEFAULT_LEXICON_JSON: &str = include_str!("../data/default_lexicon.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeverityLabel {
    Mild,
    Moderate,
    Critical,
}

impl SeverityLabel {
    pub const ALL: [SeverityLabel; 3] = [
        SeverityLabel::Mild,
        SeverityLabel::Moderate,
        SeverityLabel::Critical,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SeverityLabel::Mild => "mild",
            SeverityLabel::Moderate => "moderate",
            SeverityLabel::Critical => "critical",
        }
    }

    /// 1-based curriculum stage at which records of this tier first appear.
    pub fn stage(self) -> usize {
        match self {
            SeverityLabel::Mild => 1,
            SeverityLabel::Moderate => 2,
            SeverityLabel::Critical => 3,
        }
    }
}

impl fmt::Display for SeverityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SeverityLabel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "mild" => Ok(SeverityLabel::Mild),
            "moderate" => Ok(SeverityLabel::Moderate),
            "critical" => Ok(SeverityLabel::Critical),
            other => Err(format!("unknown severity `{other}`")),
        }
    }
}

/// On-disk lexicon document.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LexiconDocument {
    pub critical: Vec<String>,
    pub moderate: Vec<String>,
    pub mild: Vec<String>,
}

/// Three tiers of pre-folded keyword phrases, each stored as a token sequence.
#[derive(Debug, Clone)]
pub struct Lexicon {
    critical: Vec<Vec<String>>,
    moderate: Vec<Vec<String>>,
    mild: Vec<Vec<String>>,
    // first token -> (tier, index into that tier)
    index: HashMap<String, Vec<(SeverityLabel, usize)>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct KeywordMatch {
    pub phrase: String,
    pub tier: SeverityLabel,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MatchResult {
    pub matches: Vec<KeywordMatch>,
    pub resolved: SeverityLabel,
}

impl Lexicon {
    /// The lexicon shipped with the crate: about thirty folded phrases per tier.
    pub fn default_lexicon() -> Lexicon {
        Lexicon::from_json_str(DEFAULT_LEXICON_JSON, "default_lexicon.json")
            .expect("bundled lexicon is well formed")
    }

    pub fn from_json_str(json: &str, source_name: &str) -> Result<Lexicon> {
        let doc: LexiconDocument = serde_json::from_str(json).map_err(|e| {
            Error::parse(source_name, e.line(), e.to_string())
        })?;
        Lexicon::from_document(&doc, source_name)
    }

    pub fn load(path: &std::path::Path) -> Result<Lexicon> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Lexicon::from_json_str(&text, &path.display().to_string())
    }

    pub fn from_document(doc: &LexiconDocument, source_name: &str) -> Result<Lexicon> {
        let mut seen: HashMap<Vec<String>, SeverityLabel> = HashMap::new();
        let mut tiers: [Vec<Vec<String>>; 3] = Default::default();
        let raw = [
            (SeverityLabel::Critical, &doc.critical),
            (SeverityLabel::Moderate, &doc.moderate),
            (SeverityLabel::Mild, &doc.mild),
        ];
        for (slot, (tier, phrases)) in raw.into_iter().enumerate() {
            if phrases.is_empty() {
                log::warn!("{source_name}: {tier} tier is empty");
            }
            for raw_phrase in phrases {
                let norm = normalize(raw_phrase);
                let tokens: Vec<String> =
                    tokenize_whitespace(&norm).into_iter().map(str::to_owned).collect();
                if tokens.is_empty() {
                    log::warn!("{source_name}: dropping phrase `{raw_phrase}` that normalizes to nothing");
                    continue;
                }
                if tokens.len() > MAX_PHRASE_TOKENS {
                    return Err(Error::parse(
                        source_name,
                        0,
                        format!("phrase `{raw_phrase}` has more than {MAX_PHRASE_TOKENS} tokens"),
                    ));
                }
                match seen.get(&tokens) {
                    Some(&other) if other == tier => continue,
                    Some(&other) => {
                        return Err(Error::DuplicateAcrossTiers {
                            phrase: norm.into_string(),
                            first: other,
                            second: tier,
                        })
                    }
                    None => {
                        seen.insert(tokens.clone(), tier);
                        tiers[slot].push(tokens);
                    }
                }
            }
        }
        let [critical, moderate, mild] = tiers;
        Ok(Lexicon::from_tiers(critical, moderate, mild))
    }

    fn from_tiers(
        critical: Vec<Vec<String>>,
        moderate: Vec<Vec<String>>,
        mild: Vec<Vec<String>>,
    ) -> Lexicon {
        let mut index: HashMap<String, Vec<(SeverityLabel, usize)>> = HashMap::new();
        for (tier, phrases) in [
            (SeverityLabel::Critical, &critical),
            (SeverityLabel::Moderate, &moderate),
            (SeverityLabel::Mild, &mild),
        ] {
            for (i, phrase) in phrases.iter().enumerate() {
                index.entry(phrase[0].clone()).or_default().push((tier, i));
            }
        }
        Lexicon {
            critical,
            moderate,
            mild,
            index,
        }
    }

    pub fn tier(&self, label: SeverityLabel) -> &[Vec<String>] {
        match label {
            SeverityLabel::Critical => &self.critical,
            SeverityLabel::Moderate => &self.moderate,
            SeverityLabel::Mild => &self.mild,
        }
    }

    /// Phrases of one tier joined back into strings.
    pub fn phrases(&self, label: SeverityLabel) -> Vec<String> {
        self.tier(label).iter().map(|p| p.join(" ")).collect()
    }

    pub fn len(&self) -> usize {
        self.critical.len() + self.moderate.len() + self.mild.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_document(&self) -> LexiconDocument {
        LexiconDocument {
            critical: self.phrases(SeverityLabel::Critical),
            moderate: self.phrases(SeverityLabel::Moderate),
            mild: self.phrases(SeverityLabel::Mild),
        }
    }
}

pub fn match_keywords<S: AsRef<str>>(tokens: &[S], lexicon: &Lexicon) -> MatchResult {
    let mut matches = Vec::new();
    for (offset, first) in tokens.iter().enumerate() {
        let Some(candidates) = lexicon.index.get(first.as_ref()) else {
            continue;
        };
        for &(tier, i) in candidates {
            let phrase = &lexicon.tier(tier)[i];
            let end = offset + phrase.len();
            if end <= tokens.len()
                && phrase
                    .iter()
                    .zip(&tokens[offset..end])
                    .all(|(p, t)| p == t.as_ref())
            {
                matches.push(KeywordMatch {
                    phrase: phrase.join(" "),
                    tier,
                    offset,
                });
            }
        }
    }
    matches.sort_by(|a, b| {
        a.offset
            .cmp(&b.offset)
            .then(b.tier.cmp(&a.tier))
            .then(a.phrase.cmp(&b.phrase))
    });
    let resolved = matches
        .iter()
        .map(|m| m.tier)
        .max()
        .unwrap_or(SeverityLabel::Mild);
    MatchResult { matches, resolved }
}

pub fn classify(question: &str, lexicon: &Lexicon) -> SeverityLabel {
    let norm = normalize(question);
    match_keywords(&tokenize_whitespace(&norm), lexicon).resolved
}

/// Labels every record from its question. With `keep_existing`, records that
/// already carry a label are left alone.
pub fn annotate_dataset(
    records: &[QaRecord],
    lexicon: &Lexicon,
    keep_existing: bool,
) -> (Vec<QaRecord>, SeverityStats) {
    let annotated: Vec<QaRecord> = records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            if !(keep_existing && r.severity.is_some()) {
                r.severity = Some(classify(&r.question, lexicon));
            }
            r
        })
        .collect();
    let stats = SeverityStats::from_records(&annotated);
    (annotated, stats)
}

/// True when some phrase of a lower tier contains a phrase of a higher tier
/// as a contiguous token run; such a lexicon cannot label its own lower-tier
/// phrases correctly.
pub fn shadowed_phrases(lexicon: &Lexicon) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let labels = SeverityLabel::ALL;
    for (li, &low) in labels.iter().enumerate() {
        for &high in &labels[li + 1..] {
            for lp in lexicon.tier(low) {
                for hp in lexicon.tier(high) {
                    if hp.len() <= lp.len() && lp.windows(hp.len()).any(|w| w == hp.as_slice()) {
                        out.push((lp.join(" "), hp.join(" ")));
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arabic_text::NormalizedText;

    fn tiny() -> Lexicon {
        Lexicon::from_json_str(
            r#"{"critical":["نزيف شديد"],"moderate":["حمى"],"mild":["صداع"]}"#,
            "test",
        )
        .unwrap()
    }

    #[test]
    fn minimal_lexicon_loads() {
        let lex = tiny();
        assert_eq!(lex.tier(SeverityLabel::Critical).len(), 1);
        assert_eq!(lex.tier(SeverityLabel::Moderate).len(), 1);
        assert_eq!(lex.tier(SeverityLabel::Mild).len(), 1);
    }

    #[test]
    fn cross_tier_duplicate_rejected() {
        let err = Lexicon::from_json_str(
            r#"{"critical":["حمى"],"moderate":["حُمّى"],"mild":[]}"#,
            "test",
        )
        .unwrap_err();
        assert!(matches!(
            err,
            Error::DuplicateAcrossTiers {
                first: SeverityLabel::Critical,
                second: SeverityLabel::Moderate,
                ..
            }
        ));
    }

    #[test]
    fn intra_tier_duplicates_dropped_and_diacritics_folded() {
        let lex = Lexicon::from_json_str(
            r#"{"critical":[],"moderate":["حُمَّى", "حمى"],"mild":["صداع"]}"#,
            "test",
        )
        .unwrap();
        assert_eq!(lex.phrases(SeverityLabel::Moderate), vec!["حمي".to_string()]);
    }

    #[test]
    fn malformed_document_is_parse_error() {
        assert!(matches!(
            Lexicon::from_json_str(r#"{"critical":[}"#, "x"),
            Err(Error::Parse { .. })
        ));
        assert!(matches!(
            Lexicon::from_json_str(r#"{"critical":[],"moderate":[]}"#, "x"),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn overlong_phrase_rejected() {
        assert!(Lexicon::from_json_str(
            r#"{"critical":["a b c d e f"],"moderate":[],"mild":[]}"#,
            "x"
        )
        .is_err());
    }

    #[test]
    fn highest_tier_wins() {
        let lex = tiny();
        let q = normalize("عندي حمى ثم نزيف شديد");
        let r = match_keywords(&tokenize_whitespace(&q), &lex);
        assert_eq!(r.resolved, SeverityLabel::Critical);
        assert_eq!(r.matches.len(), 2);
        assert_eq!(r.matches[0].tier, SeverityLabel::Moderate);
        assert_eq!(r.matches[1].offset, 3);
    }

    #[test]
    fn empty_and_unmatched_default_to_mild() {
        let lex = tiny();
        let empty: Vec<&str> = vec![];
        let r = match_keywords(&empty, &lex);
        assert_eq!(r.resolved, SeverityLabel::Mild);
        assert!(r.matches.is_empty());
        assert_eq!(classify("سؤال عام عن التغذيه", &lex), SeverityLabel::Mild);
    }

    #[test]
    fn token_match_does_not_fire_inside_words() {
        let lex = Lexicon::default_lexicon();
        // "التورم" contains "ورم" as a substring only
        assert_eq!(classify("التورم في اللثه", &lex), SeverityLabel::Mild);
        assert_eq!(classify("ورم في اللثه", &lex), SeverityLabel::Critical);
    }

    #[test]
    fn default_lexicon_is_prefolded_and_unshadowed() {
        let lex = Lexicon::default_lexicon();
        for tier in SeverityLabel::ALL {
            let phrases = lex.phrases(tier);
            assert!(phrases.len() >= 25, "{tier} tier too small");
            for p in phrases {
                assert_eq!(normalize(&p).as_str(), p);
                assert!(NormalizedText::satisfies_invariants(&p));
            }
        }
        assert!(shadowed_phrases(&lex).is_empty(), "{:?}", shadowed_phrases(&lex));
    }

    #[test]
    fn annotate_counts_and_keep_existing() {
        let lex = tiny();
        let (out, stats) = annotate_dataset(&[], &lex, false);
        assert!(out.is_empty());
        assert_eq!((stats.mild, stats.moderate, stats.critical), (0, 0, 0));

        let recs = vec![
            QaRecord::new(0, "عندي حمى", "ج"),
            QaRecord::new(1, "نزيف شديد", "ج").with_severity(SeverityLabel::Mild),
        ];
        let (out, stats) = annotate_dataset(&recs, &lex, true);
        assert_eq!(out[0].severity, Some(SeverityLabel::Moderate));
        assert_eq!(out[1].severity, Some(SeverityLabel::Mild));
        assert_eq!(stats.total, 2);
        let (out, _) = annotate_dataset(&recs, &lex, false);
        assert_eq!(out[1].severity, Some(SeverityLabel::Critical));
    }

    #[test]
    fn severity_order_and_parse() {
        assert!(SeverityLabel::Critical > SeverityLabel::Moderate);
        assert!(SeverityLabel::Moderate > SeverityLabel::Mild);
        assert_eq!("moderate".parse::<SeverityLabel>(), Ok(SeverityLabel::Moderate));
        assert!("Severe".parse::<SeverityLabel>().is_err());
    }
}
