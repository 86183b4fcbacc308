//! Answer scoring and the three-regime comparison table.
//!
//! The primary metric is `token_f1`: unigram-overlap F1 with multiset
//! clipping over normalized, whitespace-split tokens. Reports also carry
//! `lcs_f1` (longest-common-subsequence F1) and answer perplexity.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::arabic_text::{normalize, tokenize_whitespace};
use crate::dataset::{dataset_hash, QaRecord};
use crate::error::{Error, Result};
use crate::severity::SeverityLabel;
use crate::tiny_lm::{encode_pair, generate, pair_nll, DecodeMode, StepModel, Vocab};
use crate::trainer::TrainMode;

pub const PRIMARY_METRIC: &str = "token_f1";

fn f1(overlap: usize, cand: usize, reference: usize) -> f64 {
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / cand as f64;
    let r = overlap as f64 / reference as f64;
    2.0 * p * r / (p + r)
}

/// Unigram F1; each candidate token matches at most as many reference
/// copies as exist. Two empty lists score 1.
pub fn token_f1<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> f64 {
    if candidate.is_empty() && reference.is_empty() {
        return 1.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in reference {
        *counts.entry(t.as_ref()).or_default() += 1;
    }
    let mut overlap = 0;
    for t in candidate {
        if let Some(c) = counts.get_mut(t.as_ref()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    f1(overlap, candidate.len(), reference.len())
}

pub fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// F1 of LCS-based precision and recall. Two empty lists score 1.
pub fn lcs_f1<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> f64 {
    if candidate.is_empty() && reference.is_empty() {
        return 1.0;
    }
    f1(lcs_len(candidate, reference), candidate.len(), reference.len())
}

/// `exp(total masked NLL / total masked tokens)` over the answer positions
/// of every encodable record.
pub fn perplexity<M: StepModel>(model: &M, vocab: &Vocab, records: &[QaRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let (mut total, mut count) = (0.0, 0usize);
    for r in records {
        let Some(pair) = encode_pair(r, vocab, model.context_len()) else {
            continue;
        };
        let (nll, n) = pair_nll(model, &pair)?;
        total += nll;
        count += n;
    }
    if count == 0 {
        return Err(Error::EmptyEvalSet);
    }
    Ok((total / count as f64).exp())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub max_new_tokens: usize,
    pub decode: DecodeMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            max_new_tokens: 64,
            decode: DecodeMode::Greedy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordScore {
    pub id: u64,
    pub severity: Option<SeverityLabel>,
    pub reference: String,
    pub generated: String,
    pub token_f1: f64,
    pub lcs_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierScores {
    pub count: usize,
    pub token_f1: f64,
    pub lcs_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// groups reports into one comparison row (e.g. one seed)
    pub run: String,
    pub mode: Option<TrainMode>,
    pub seed: Option<u64>,
    pub metric: String,
    pub eval_set_hash: String,
    pub count: usize,
    pub token_f1: f64,
    pub lcs_f1: f64,
    pub perplexity: f64,
    pub per_tier: BTreeMap<String, TierScores>,
    /// training sample-presentations behind the evaluated model
    pub train_presentations: Option<usize>,
    pub records: Vec<RecordScore>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Who produced a report, copied into it verbatim.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportLabel {
    pub run: String,
    pub mode: Option<TrainMode>,
    pub seed: Option<u64>,
    pub train_presentations: Option<usize>,
}

/// Generates an answer for every record and scores it against the
/// reference on normalized tokens.
pub fn evaluate<M: StepModel>(
    model: &M,
    vocab: &Vocab,
    records: &[QaRecord],
    cfg: &EvalConfig,
    label: ReportLabel,
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let max_question = model.context_len().saturating_sub(2);
    let mut scores = Vec::with_capacity(records.len());
    for r in records {
        // keep the tail of overlong questions, as training does
        let q = normalize(&r.question);
        let chars: Vec<char> = q.as_str().chars().collect();
        let q: String = chars[chars.len().saturating_sub(max_question)..].iter().collect();
        let generated = generate(model, &q, vocab, cfg.max_new_tokens, cfg.decode)?;
        let gen_norm = normalize(&generated);
        let ref_norm = normalize(&r.answer);
        let cand = tokenize_whitespace(&gen_norm);
        let reference = tokenize_whitespace(&ref_norm);
        scores.push(RecordScore {
            id: r.id,
            severity: r.severity,
            reference: ref_norm.as_str().to_string(),
            generated: gen_norm.as_str().to_string(),
            token_f1: token_f1(&cand, &reference),
            lcs_f1: lcs_f1(&cand, &reference),
        });
    }
    let mut per_tier = BTreeMap::new();
    for tier in SeverityLabel::ALL {
        let members: Vec<&RecordScore> = scores.iter().filter(|s| s.severity == Some(tier)).collect();
        if members.is_empty() {
            continue;
        }
        per_tier.insert(
            tier.as_str().to_string(),
            TierScores {
                count: members.len(),
                token_f1: mean(members.iter().map(|s| s.token_f1)),
                lcs_f1: mean(members.iter().map(|s| s.lcs_f1)),
            },
        );
    }
    let unlabeled: Vec<&RecordScore> = scores.iter().filter(|s| s.severity.is_none()).collect();
    if !unlabeled.is_empty() {
        per_tier.insert(
            "unlabeled".to_string(),
            TierScores {
                count: unlabeled.len(),
                token_f1: mean(unlabeled.iter().map(|s| s.token_f1)),
                lcs_f1: mean(unlabeled.iter().map(|s| s.lcs_f1)),
            },
        );
    }
    Ok(EvalReport {
        run: label.run,
        mode: label.mode,
        seed: label.seed,
        metric: PRIMARY_METRIC.to_string(),
        eval_set_hash: dataset_hash(records),
        count: scores.len(),
        token_f1: mean(scores.iter().map(|s| s.token_f1)),
        lcs_f1: mean(scores.iter().map(|s| s.lcs_f1)),
        perplexity: perplexity(model, vocab, records)?,
        per_tier,
        train_presentations: label.train_presentations,
        records: scores,
    })
}

/// `+x.xx` / `-x.xx`, two decimals.
pub fn format_delta(delta: f64) -> String {
    // avoid printing "-0.00" for tiny negative rounding noise
    let rounded = (delta * 100.0).round() / 100.0;
    let rounded = if rounded == 0.0 { 0.0 } else { rounded };
    format!("{rounded:+.2}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub run: String,
    /// percentages, indexed by [`TrainMode::ALL`] order
    pub values: [Option<f64>; 3],
    pub curriculum_minus_baseline: Option<f64>,
    pub curriculum_minus_standard: Option<f64>,
    pub presentations: [Option<usize>; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub metric: String,
    pub rows: Vec<ComparisonRow>,
    /// per-column medians over runs that have the column
    pub median: [Option<f64>; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub eval_set_hash: String,
    pub primary_metric: String,
    pub tables: Vec<MetricTable>,
    /// `(run, mode, metric, value, tier)` rows for plotting
    pub plot_rows: Vec<PlotRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub run: String,
    pub mode: String,
    pub metric: String,
    pub value: f64,
    pub tier: String,
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    })
}

fn mode_index(mode: TrainMode) -> usize {
    TrainMode::ALL.iter().position(|&m| m == mode).unwrap()
}

/// Groups reports into rows by `run` and columns by mode. F1 metrics are
/// shown as percentages.
pub fn compare_report(reports: &[EvalReport]) -> Result<Comparison> {
    if reports.len() < 2 {
        return Err(Error::InvalidConfig("a comparison needs at least two reports".into()));
    }
    let hash = &reports[0].eval_set_hash;
    if let Some(other) = reports.iter().find(|r| &r.eval_set_hash != hash) {
        return Err(Error::EvalSetMismatch(hash.clone(), other.eval_set_hash.clone()));
    }
    let mut runs: Vec<String> = Vec::new();
    for r in reports {
        if !runs.contains(&r.run) {
            runs.push(r.run.clone());
        }
    }
    let metrics: [(&str, fn(&EvalReport) -> f64); 3] = [
        ("token_f1", |r| 100.0 * r.token_f1),
        ("lcs_f1", |r| 100.0 * r.lcs_f1),
        ("perplexity", |r| r.perplexity),
    ];
    let mut tables = Vec::new();
    for (metric, get) in metrics {
        let mut rows = Vec::new();
        for run in &runs {
            let mut values = [None; 3];
            let mut presentations = [None; 3];
            for r in reports.iter().filter(|r| &r.run == run) {
                let Some(mode) = r.mode else { continue };
                values[mode_index(mode)] = Some(get(r));
                presentations[mode_index(mode)] = r.train_presentations;
            }
            let [b, s, c] = values;
            rows.push(ComparisonRow {
                run: run.clone(),
                values,
                curriculum_minus_baseline: c.zip(b).map(|(c, b)| c - b),
                curriculum_minus_standard: c.zip(s).map(|(c, s)| c - s),
                presentations,
            });
        }
        let mut median_row = [None; 3];
        for (i, m) in median_row.iter_mut().enumerate() {
            let mut col: Vec<f64> = rows.iter().filter_map(|r| r.values[i]).collect();
            *m = median(&mut col);
        }
        tables.push(MetricTable {
            metric: metric.to_string(),
            rows,
            median: median_row,
        });
    }
    let mut plot_rows = Vec::new();
    for r in reports {
        let mode = r.mode.map_or("unknown", TrainMode::as_str).to_string();
        for (metric, value) in [("token_f1", r.token_f1), ("lcs_f1", r.lcs_f1), ("perplexity", r.perplexity)] {
            plot_rows.push(PlotRow {
                run: r.run.clone(),
                mode: mode.clone(),
                metric: metric.to_string(),
                value,
                tier: "all".to_string(),
            });
        }
        for (tier, s) in &r.per_tier {
            for (metric, value) in [("token_f1", s.token_f1), ("lcs_f1", s.lcs_f1)] {
                plot_rows.push(PlotRow {
                    run: r.run.clone(),
                    mode: mode.clone(),
                    metric: metric.to_string(),
                    value,
                    tier: tier.clone(),
                });
            }
        }
    }
    Ok(Comparison {
        eval_set_hash: hash.clone(),
        primary_metric: PRIMARY_METRIC.to_string(),
        tables,
        plot_rows,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"))
}

fn delta_cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), format_delta)
}

impl Comparison {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "eval set {}", self.eval_set_hash);
        for table in &self.tables {
            let unit = if table.metric == "perplexity" { "" } else { " (%)" };
            let primary = if table.metric == self.primary_metric { ", primary" } else { "" };
            let _ = writeln!(out, "\n{}{unit}{primary}", table.metric);
            let header = [
                "Run",
                TrainMode::Baseline.title(),
                TrainMode::Standard.title(),
                TrainMode::Curriculum.title(),
                "CL - Base",
                "CL - Std",
            ];
            let mut lines: Vec<[String; 6]> = vec![header.map(str::to_string)];
            for row in &table.rows {
                lines.push([
                    row.run.clone(),
                    cell(row.values[0]),
                    cell(row.values[1]),
                    cell(row.values[2]),
                    delta_cell(row.curriculum_minus_baseline),
                    delta_cell(row.curriculum_minus_standard),
                ]);
            }
            if table.rows.len() > 1 {
                let m = table.median;
                lines.push([
                    "median".to_string(),
                    cell(m[0]),
                    cell(m[1]),
                    cell(m[2]),
                    delta_cell(m[2].zip(m[0]).map(|(c, b)| c - b)),
                    delta_cell(m[2].zip(m[1]).map(|(c, s)| c - s)),
                ]);
            }
            let widths: Vec<usize> = (0..6)
                .map(|i| lines.iter().map(|l| l[i].chars().count()).max().unwrap_or(0))
                .collect();
            for l in &lines {
                let cells: Vec<String> = l
                    .iter()
                    .zip(&widths)
                    .enumerate()
                    .map(|(i, (c, &w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                    .collect();
                let _ = writeln!(out, "{}", cells.join(" | ").trim_end());
            }
        }
        let presentations = &self.tables[0];
        if presentations.rows.iter().any(|r| r.presentations.iter().any(Option::is_some)) {
            let _ = writeln!(out, "\ntraining sample-presentations");
            for row in &presentations.rows {
                let p: Vec<String> = row
                    .presentations
                    .iter()
                    .zip(TrainMode::ALL)
                    .map(|(p, m)| format!("{}={}", m.as_str(), p.map_or("-".to_string(), |x| x.to_string())))
                    .collect();
                let _ = writeln!(out, "{}: {}", row.run, p.join(" "));
            }
        }
        out
    }

    pub fn render_csv(&self) -> String {
        let mut out = String::from("run,mode,metric,value,tier\n");
        for r in &self.plot_rows {
            let _ = writeln!(out, "{},{},{},{},{}", csv_field(&r.run), r.mode, r.metric, r.value, r.tier);
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tiny_lm::EOS;
    use proptest::prelude::*;

    #[test]
    fn token_f1_examples() {
        assert_eq!(token_f1(&["a", "b"], &["a", "b"]), 1.0);
        assert_eq!(token_f1(&["a"], &["b"]), 0.0);
        let empty: [&str; 0] = [];
        assert_eq!(token_f1(&empty, &empty), 1.0);
        assert_eq!(token_f1(&empty, &["a"]), 0.0);
        assert!((token_f1(&["a", "b", "c"], &["a", "c", "d", "e"]) - 4.0 / 7.0).abs() < 1e-12);
        // clipping: two candidate copies, one reference copy
        assert!((token_f1(&["a", "a"], &["a"]) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn lcs_f1_examples() {
        assert_eq!(lcs_f1(&["a", "b"], &["a", "b"]), 1.0);
        assert!((lcs_f1(&["a", "c", "d"], &["a", "b", "c", "d"]) - 6.0 / 7.0).abs() < 1e-12);
        assert!((lcs_f1(&["c", "b", "a"], &["a", "b", "c"]) - 1.0 / 3.0).abs() < 1e-12);
        let empty: [&str; 0] = [];
        assert_eq!(lcs_f1(&empty, &["a"]), 0.0);
    }

    /// Exhaustive LCS over all subsequences of the shorter list.
    fn brute_lcs(a: &[u8], b: &[u8]) -> usize {
        let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
        let mut best = 0;
        for mask in 0u32..(1 << short.len()) {
            let sub: Vec<u8> = (0..short.len()).filter(|i| mask >> i & 1 == 1).map(|i| short[i]).collect();
            let mut it = long.iter();
            if sub.iter().all(|c| it.any(|x| x == c)) {
                best = best.max(sub.len());
            }
        }
        best
    }

    fn brute_overlap(a: &[u8], b: &[u8]) -> usize {
        (0u8..4)
            .map(|t| a.iter().filter(|&&x| x == t).count().min(b.iter().filter(|&&x| x == t).count()))
            .sum()
    }

    fn oracle_f1(overlap: usize, c: usize, r: usize) -> f64 {
        if c == 0 && r == 0 {
            return 1.0;
        }
        if overlap == 0 {
            return 0.0;
        }
        let (p, rc) = (overlap as f64 / c as f64, overlap as f64 / r as f64);
        2.0 * p * rc / (p + rc)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn metrics_match_oracles(a in prop::collection::vec(0u8..4, 0..7), b in prop::collection::vec(0u8..4, 0..7)) {
            let ta: Vec<String> = a.iter().map(|x| x.to_string()).collect();
            let tb: Vec<String> = b.iter().map(|x| x.to_string()).collect();
            let tf = token_f1(&ta, &tb);
            let lf = lcs_f1(&ta, &tb);
            prop_assert!((0.0..=1.0).contains(&tf) && (0.0..=1.0).contains(&lf));
            prop_assert!((tf - oracle_f1(brute_overlap(&a, &b), a.len(), b.len())).abs() < 1e-12);
            prop_assert!((lf - oracle_f1(brute_lcs(&a, &b), a.len(), b.len())).abs() < 1e-12);
        }
    }

    #[test]
    fn delta_formatting() {
        assert_eq!(format_delta(63.21 - 54.04), "+9.17");
        assert_eq!(format_delta(-0.001), "+0.00");
        assert_eq!(format_delta(-1.5), "-1.50");
    }

    /// Forces the reference sequence of `pair` by +1000 logits.
    struct Forcing {
        script: Vec<u32>,
    }

    impl StepModel for Forcing {
        type Cache = usize;
        fn vocab_size(&self) -> usize {
            8
        }
        fn context_len(&self) -> usize {
            32
        }
        fn new_cache(&self) -> usize {
            0
        }
        fn step(&self, pos: &mut usize, _t: u32) -> Result<Vec<f64>> {
            let mut l = vec![0.0; 8];
            l[*self.script.get(*pos).unwrap_or(&EOS) as usize] = 1000.0;
            *pos += 1;
            Ok(l)
        }
    }

    fn fixture() -> (Vocab, Vec<QaRecord>, Forcing) {
        let vocab = Vocab::from_chars("ab ".chars());
        let rec = QaRecord::new(0, "ab", "b a").with_severity(SeverityLabel::Moderate);
        let pair = crate::tiny_lm::encode_pair(&rec, &vocab, 32).unwrap();
        let script = pair.ids[1..].to_vec();
        (vocab, vec![rec], Forcing { script })
    }

    #[test]
    fn forcing_model_is_perfect() {
        let (vocab, recs, model) = fixture();
        assert!((perplexity(&model, &vocab, &recs).unwrap() - 1.0).abs() < 1e-6);
        let rep = evaluate(&model, &vocab, &recs, &EvalConfig::default(), ReportLabel::default()).unwrap();
        assert_eq!(rep.records[0].generated, "b a");
        assert_eq!(rep.token_f1, 1.0);
        assert_eq!(rep.per_tier["moderate"].count, 1);
        assert!(perplexity(&model, &vocab, &[]).is_err());
        assert!(matches!(
            evaluate(&model, &vocab, &[], &EvalConfig::default(), ReportLabel::default()),
            Err(Error::EmptyEvalSet)
        ));
    }

    fn report(run: &str, mode: TrainMode, f: f64, hash: &str) -> EvalReport {
        EvalReport {
            run: run.into(),
            mode: Some(mode),
            seed: None,
            metric: PRIMARY_METRIC.into(),
            eval_set_hash: hash.into(),
            count: 1,
            token_f1: f,
            lcs_f1: f,
            perplexity: 2.0,
            per_tier: BTreeMap::new(),
            train_presentations: None,
            records: Vec::new(),
        }
    }

    #[test]
    fn comparison_layout_and_deltas() {
        let reps = vec![
            report("r", TrainMode::Curriculum, 0.6321, "h"),
            report("r", TrainMode::Baseline, 0.5404, "h"),
            report("r", TrainMode::Standard, 0.6321, "h"),
        ];
        let cmp = compare_report(&reps).unwrap();
        let text = cmp.render_text();
        let header = text.lines().find(|l| l.starts_with("Run")).unwrap();
        let b = header.find("Baseline").unwrap();
        let s = header.find("Standard Fine-Tuning").unwrap();
        let c = header.find("Curriculum Learning").unwrap();
        assert!(b < s && s < c);
        let row = text.lines().find(|l| l.starts_with("r ")).unwrap();
        assert!(row.contains("+9.17") && row.contains("+0.00"), "{row}");
        assert!(cmp.render_csv().starts_with("run,mode,metric,value,tier\n"));
    }

    #[test]
    fn identical_scores_give_zero_deltas() {
        let reps: Vec<EvalReport> = TrainMode::ALL.iter().map(|&m| report("r", m, 0.5, "h")).collect();
        let cmp = compare_report(&reps).unwrap();
        for t in &cmp.tables {
            assert_eq!(t.rows[0].curriculum_minus_baseline, Some(0.0));
            assert_eq!(t.rows[0].curriculum_minus_standard, Some(0.0));
        }
    }

    #[test]
    fn mismatched_eval_sets_are_rejected() {
        let reps = vec![report("r", TrainMode::Baseline, 0.1, "x"), report("r", TrainMode::Standard, 0.2, "y")];
        assert!(matches!(compare_report(&reps), Err(Error::EvalSetMismatch(..))));
    }
}
