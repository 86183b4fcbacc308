//! Templated Arabic QA pairs for desk-scale experiments.
//!
//! A question embeds one symptom phrase from the default lexicon tier in a
//! neutral template. The answer is one of the tier's advice templates,
//! chosen by the phrase's position in the tier, so the answer is a function
//! of the question.

use rand::Rng;

use super::QaRecord;
use crate::seed::component_rng;
use crate::severity::{Lexicon, SeverityLabel};

const SLOT: &str = "{}";

pub struct SynthTemplates {
    pub questions: &'static [&'static str],
    pub mild_answers: &'static [&'static str],
    pub moderate_answers: &'static [&'static str],
    pub critical_answers: &'static [&'static str],
}

pub const TEMPLATES: SynthTemplates = SynthTemplates {
    questions: &["عندي {}", "اعاني من {}", "هل {} خطير", "{} عند طفلي", "اشكو من {}", "ما علاج {}"],
    mild_answers: &["خذ قسطا من الراحه", "اشرب الماء وارتح", "علاج منزلي يكفي"],
    moderate_answers: &["راجع طبيبا قريبا", "تحتاج تحليل دم", "راجع العياده غدا"],
    critical_answers: &["توجه الى الطوارئ فورا", "اتصل بالاسعاف حالا", "اذهب للمستشفى الان"],
};

impl SynthTemplates {
    pub fn answers(&self, tier: SeverityLabel) -> &'static [&'static str] {
        match tier {
            SeverityLabel::Mild => self.mild_answers,
            SeverityLabel::Moderate => self.moderate_answers,
            SeverityLabel::Critical => self.critical_answers,
        }
    }

    pub fn question(&self, template: usize, phrase: &str) -> String {
        self.questions[template].replacen(SLOT, phrase, 1)
    }

    pub fn answer(&self, tier: SeverityLabel, phrase_index: usize) -> &'static str {
        let answers = self.answers(tier);
        answers[phrase_index % answers.len()]
    }
}

/// `n_per_tier` records per tier, interleaved mild, moderate, critical.
/// Records carry the tier they were generated for.
pub fn synth_generate(n_per_tier: usize, seed: u64) -> Vec<QaRecord> {
    let lexicon = Lexicon::default_lexicon();
    let mut rng = component_rng(seed, "synth");
    let mut out = Vec::with_capacity(3 * n_per_tier);
    for _ in 0..n_per_tier {
        for tier in SeverityLabel::ALL {
            let phrases = lexicon.tier(tier);
            let pi = rng.gen_range(0..phrases.len());
            let ti = rng.gen_range(0..TEMPLATES.questions.len());
            let phrase = phrases[pi].join(" ");
            let id = out.len() as u64;
            out.push(
                QaRecord::new(id, TEMPLATES.question(ti, &phrase), TEMPLATES.answer(tier, pi))
                    .with_severity(tier),
            );
        }
    }
    out
}
