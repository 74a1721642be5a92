//! Sentence segmentation and atomic-fact decomposition.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::concurrency::bounded_map;
use crate::corpus::{normalized_words, DecodingConfig, SentenceSpan, SummaryRecord};
use crate::llmclient::{ChatClient, GenerationRequest, LlmError};

/// Prompt sent for LLM decomposition; the sentence follows a blank line.
pub const DECOMPOSE_PROMPT: &str = "Decompose the text into atomic facts.";

const DECOMPOSE_MAX_TOKENS: u32 = 512;

const ABBREVIATIONS: &[&str] = &[
    "dr.", "mr.", "mrs.", "ms.", "prof.", "sr.", "jr.", "st.", "mt.", "fig.", "figs.", "no.",
    "nos.", "vol.", "vs.", "inc.", "ltd.", "co.", "corp.", "jan.", "feb.", "mar.", "apr.", "jun.",
    "jul.", "aug.", "sep.", "sept.", "oct.", "nov.", "dec.", "gen.", "gov.", "sen.", "rep.",
    "rev.", "est.", "approx.", "dept.", "univ.", "eq.", "eqs.", "ch.", "sec.", "pp.", "cf.", "ca.",
    "e.g.", "i.e.", "u.s.", "u.k.", "a.m.", "p.m.",
];

const STOP_WORDS: &[&str] = &[
    "a", "about", "above", "after", "again", "against", "all", "also", "am", "an", "and", "any",
    "are", "as", "at", "be", "because", "been", "before", "being", "below", "between", "both",
    "but", "by", "can", "could", "did", "do", "does", "doing", "down", "during", "each", "few",
    "for", "from", "further", "had", "has", "have", "having", "he", "her", "here", "hers",
    "herself", "him", "himself", "his", "how", "i", "if", "in", "into", "is", "it", "its",
    "itself", "just", "me", "more", "most", "my", "myself", "no", "nor", "not", "now", "of",
    "off", "on", "once", "only", "or", "other", "our", "ours", "ourselves", "out", "over", "own",
    "same", "she", "should", "so", "some", "such", "than", "that", "the", "their", "theirs",
    "them", "themselves", "then", "there", "these", "they", "this", "those", "through", "to",
    "too", "under", "until", "up", "very", "was", "we", "were", "what", "when", "where", "which",
    "while", "who", "whom", "why", "will", "with", "would", "you", "your", "yours", "yourself",
    "yourselves",
];

const OPENERS: &[char] = &['"', '\'', '“', '‘', '(', '[', '{'];
const CLOSERS: &[char] = &['"', '\'', '”', '’', ')', ']', '}'];

pub fn is_stop_word(word: &str) -> bool {
    STOP_WORDS.contains(&word)
}

/// Normalized words of `text` that are not stop words.
pub fn content_words(text: &str) -> Vec<String> {
    normalized_words(text)
        .into_iter()
        .filter(|w| !is_stop_word(w))
        .collect()
}

/// Byte ranges of the whitespace-delimited words of `text`.
fn word_ranges(text: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                out.push((s, i));
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push((s, text.len()));
    }
    out
}

fn is_abbreviation(token: &str, previous: Option<&str>) -> bool {
    let core = token.trim_start_matches(OPENERS).trim_end_matches(CLOSERS);
    let lower = core.to_lowercase();
    if ABBREVIATIONS.contains(&lower.as_str()) {
        return true;
    }
    if lower == "al." && previous.is_some_and(|p| p.eq_ignore_ascii_case("et")) {
        return true;
    }
    let chars: Vec<char> = core.chars().collect();
    // Initials ("J.") and dotted acronyms ("U.N.", "e.g.").
    if chars.len() >= 2
        && chars.len() % 2 == 0
        && chars
            .chunks(2)
            .all(|pair| pair[0].is_alphabetic() && pair[1] == '.')
    {
        return true;
    }
    false
}

fn ends_sentence(token: &str) -> bool {
    token
        .trim_end_matches(CLOSERS)
        .ends_with(['.', '!', '?'])
}

fn starts_sentence(token: &str) -> bool {
    token
        .trim_start_matches(OPENERS)
        .chars()
        .next()
        .is_some_and(|c| c.is_uppercase() || c.is_ascii_digit())
}

/// Splits text into sentences on terminal punctuation followed by whitespace
/// and an uppercase letter or digit. Known abbreviations, initials and
/// dotted acronyms never end a sentence. The spans cover every word.
pub fn split_sentences(text: &str) -> Vec<SentenceSpan> {
    let ranges = word_ranges(text);
    let mut spans = Vec::new();
    let mut start_word = 0;
    for (i, &(s, e)) in ranges.iter().enumerate() {
        let token = &text[s..e];
        let last = i + 1 == ranges.len();
        let boundary = last || {
            let next = &text[ranges[i + 1].0..ranges[i + 1].1];
            let previous = i.checked_sub(1).map(|p| &text[ranges[p].0..ranges[p].1]);
            ends_sentence(token)
                && starts_sentence(next)
                && !(token.trim_end_matches(CLOSERS).ends_with('.') && is_abbreviation(token, previous))
        };
        if boundary {
            spans.push(SentenceSpan {
                index: spans.len(),
                start_word,
                end_word: i + 1,
                start_char: ranges[start_word].0,
                end_char: e,
            });
            start_word = i + 1;
        }
    }
    spans
}

/// Offline decomposition: splits at top-level "and", "but" and semicolons
/// (outside parentheses). Conjunctions are dropped; every other word lands
/// in exactly one fact.
pub fn decompose_facts_rule(sentence: &str) -> Vec<String> {
    let mut segments: Vec<Vec<&str>> = vec![Vec::new()];
    let mut depth: i32 = 0;
    for token in sentence.split_whitespace() {
        let lower = token.to_lowercase();
        let before = depth;
        depth += token.matches('(').count() as i32;
        depth -= token.matches(')').count() as i32;
        depth = depth.max(0);
        if before == 0 && (lower == "and" || lower == "but" || token == ";") {
            segments.push(Vec::new());
        } else if depth == 0 && token.ends_with(';') {
            segments
                .last_mut()
                .expect("at least one segment")
                .push(token.trim_end_matches(';'));
            segments.push(Vec::new());
        } else {
            segments.last_mut().expect("at least one segment").push(token);
        }
    }
    segments
        .into_iter()
        .map(|words| words.join(" ").trim_end_matches([',', ';']).trim().to_owned())
        .filter(|s| s.chars().any(char::is_alphanumeric))
        .collect()
}

/// Parses a decomposition response: one fact per line, list markers
/// ("-", "*", "•", "1.", "1)") removed, headings ending in ':' skipped.
pub fn parse_fact_lines(response: &str) -> Vec<String> {
    response
        .lines()
        .map(|line| strip_list_marker(line.trim()).trim())
        .filter(|line| !line.is_empty() && !line.ends_with(':'))
        .filter(|line| line.chars().any(char::is_alphanumeric))
        .map(str::to_owned)
        .collect()
}

fn strip_list_marker(line: &str) -> &str {
    for marker in ["- ", "* ", "• ", "– "] {
        if let Some(rest) = line.strip_prefix(marker) {
            return rest;
        }
    }
    if matches!(line, "-" | "*" | "•") {
        return "";
    }
    let digits = line.bytes().take_while(u8::is_ascii_digit).count();
    if digits > 0 {
        let rest = &line[digits..];
        if let Some(rest) = rest.strip_prefix(". ").or_else(|| rest.strip_prefix(") ")) {
            return rest;
        }
    }
    line
}

pub fn decompose_prompt(sentence: &str) -> String {
    format!("{DECOMPOSE_PROMPT}\n\n{sentence}")
}

/// Result of one LLM decomposition call.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub facts: Vec<String>,
    /// Set when the response was unusable and the rule-based splitter ran.
    pub warning: Option<String>,
}

/// Asks the chat service to decompose a sentence (greedy decoding). An empty
/// or unparseable response falls back to [`decompose_facts_rule`] with a
/// recorded warning; transport failures are returned as errors.
pub fn decompose_facts_llm(sentence: &str, client: &dyn ChatClient) -> Result<Decomposition, LlmError> {
    if sentence.trim().is_empty() {
        return Ok(Decomposition {
            facts: Vec::new(),
            warning: None,
        });
    }
    let request = GenerationRequest::new(
        client.model(),
        decompose_prompt(sentence),
        DecodingConfig::Greedy,
        DECOMPOSE_MAX_TOKENS,
    );
    let completion = client.complete(&request)?;
    let facts = parse_fact_lines(&completion.text);
    if facts.is_empty() {
        let warning = format!("unparseable decomposition response for sentence {sentence:?}; used rule-based fallback");
        warn!("{warning}");
        return Ok(Decomposition {
            facts: decompose_facts_rule(sentence),
            warning: Some(warning),
        });
    }
    Ok(Decomposition {
        facts,
        warning: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomicFact {
    pub summary_id: String,
    pub sentence_index: usize,
    pub fact_index: usize,
    #[serde(rename = "fact")]
    pub text: String,
    pub position_words: f64,
    pub kept: bool,
}

/// Which filtering rules [`filter_facts`] applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FilterOptions {
    pub drop_duplicates: bool,
    pub min_words: usize,
    pub require_content_word: bool,
}

impl Default for FilterOptions {
    fn default() -> Self {
        FilterOptions {
            drop_duplicates: true,
            min_words: 3,
            require_content_word: true,
        }
    }
}

pub fn filter_facts(facts: &[AtomicFact]) -> Vec<AtomicFact> {
    filter_facts_with(facts, FilterOptions::default())
}

/// Marks facts as not kept when they duplicate an earlier fact (after
/// normalization), are shorter than `min_words`, or hold no content word.
/// A fact already marked not kept stays that way.
pub fn filter_facts_with(facts: &[AtomicFact], opts: FilterOptions) -> Vec<AtomicFact> {
    let mut seen = HashSet::new();
    facts
        .iter()
        .map(|f| {
            let key = normalized_words(&f.text).join(" ");
            let duplicate = !seen.insert(key);
            let mut drop = false;
            if opts.drop_duplicates && duplicate {
                drop = true;
            }
            if f.text.split_whitespace().count() < opts.min_words {
                drop = true;
            }
            if opts.require_content_word && content_words(&f.text).is_empty() {
                drop = true;
            }
            AtomicFact {
                kept: f.kept && !drop,
                ..f.clone()
            }
        })
        .collect()
}

/// How sentences are turned into facts.
pub enum Decomposer<'a> {
    Rule,
    Llm {
        client: &'a dyn ChatClient,
        concurrency: usize,
    },
}

/// Facts of a whole summary, unfiltered, with any fallback warnings.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryFacts {
    pub facts: Vec<AtomicFact>,
    pub warnings: Vec<String>,
}

/// Decomposes every sentence of a summary. Each fact takes the midpoint word
/// offset of its parent sentence as its position. Output is ordered by
/// (sentence_index, fact_index) regardless of completion order.
pub fn decompose_summary(summary: &SummaryRecord, decomposer: &Decomposer<'_>) -> Result<SummaryFacts, LlmError> {
    let sentences: Vec<&SentenceSpan> = summary.sentences.iter().collect();
    let per_sentence: Vec<Decomposition> = match decomposer {
        Decomposer::Rule => sentences
            .iter()
            .map(|s| Decomposition {
                facts: decompose_facts_rule(s.text(&summary.text)),
                warning: None,
            })
            .collect(),
        Decomposer::Llm {
            client,
            concurrency,
        } => bounded_map(&sentences, *concurrency, |s| {
            decompose_facts_llm(s.text(&summary.text), *client)
        })
        .into_iter()
        .collect::<Result<_, _>>()?,
    };
    let mut facts = Vec::new();
    let mut warnings = Vec::new();
    for (span, decomposition) in sentences.iter().zip(per_sentence) {
        if let Some(w) = decomposition.warning {
            warnings.push(w);
        }
        for (j, text) in decomposition.facts.into_iter().enumerate() {
            facts.push(AtomicFact {
                summary_id: summary.id.clone(),
                sentence_index: span.index,
                fact_index: j,
                text,
                position_words: span.midpoint(),
                kept: true,
            });
        }
    }
    Ok(SummaryFacts { facts, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llmclient::{Completion, Usage};
    use proptest::prelude::*;
    use std::sync::Mutex;

    struct Canned {
        reply: String,
        prompts: Mutex<Vec<String>>,
    }

    impl Canned {
        fn new(reply: &str) -> Self {
            Canned {
                reply: reply.to_owned(),
                prompts: Mutex::new(Vec::new()),
            }
        }
    }

    impl ChatClient for Canned {
        fn model(&self) -> &str {
            "canned"
        }
        fn complete(&self, req: &GenerationRequest) -> Result<Completion, LlmError> {
            self.prompts.lock().unwrap().push(req.prompt.clone());
            Ok(Completion {
                text: self.reply.clone(),
                usage: Usage::default(),
                cached: false,
            })
        }
    }

    fn fact(text: &str) -> AtomicFact {
        AtomicFact {
            summary_id: "s".into(),
            sentence_index: 0,
            fact_index: 0,
            text: text.into(),
            position_words: 0.0,
            kept: true,
        }
    }

    fn sentence_strings(text: &str) -> Vec<&str> {
        split_sentences(text).iter().map(|s| s.text(text)).collect()
    }

    #[test]
    fn two_simple_sentences() {
        assert_eq!(sentence_strings("A cat. A dog."), ["A cat.", "A dog."]);
    }

    #[test]
    fn abbreviation_is_not_a_boundary() {
        assert_eq!(
            sentence_strings("Dr. Smith ran. He won."),
            ["Dr. Smith ran.", "He won."]
        );
        assert_eq!(
            sentence_strings("Work by Lee et al. Showed gains. Fig. 2 agrees."),
            ["Work by Lee et al. Showed gains.", "Fig. 2 agrees."]
        );
        assert_eq!(sentence_strings("The U.S. Army left. J. R. Tolkien wrote."), [
            "The U.S. Army left.",
            "J. R. Tolkien wrote."
        ]);
    }

    #[test]
    fn empty_text_has_no_sentences() {
        assert!(split_sentences("").is_empty());
        assert!(split_sentences("   \n ").is_empty());
    }

    #[test]
    fn boundary_needs_capital_or_digit() {
        assert_eq!(sentence_strings("It rose to 3.5 percent. then fell."), [
            "It rose to 3.5 percent. then fell."
        ]);
        assert_eq!(sentence_strings("Wow! 2 more? \"Yes.\" (Done.)"), [
            "Wow!",
            "2 more?",
            "\"Yes.\"",
            "(Done.)"
        ]);
    }

    #[test]
    fn spans_carry_word_offsets() {
        let spans = split_sentences("One two. Three four five.");
        assert_eq!((spans[0].start_word, spans[0].end_word), (0, 2));
        assert_eq!((spans[1].start_word, spans[1].end_word), (2, 5));
        assert_eq!(spans[1].midpoint(), 3.5);
    }

    #[test]
    fn rule_split_on_conjunction() {
        assert_eq!(
            decompose_facts_rule("X was born in 1996 and plays tennis."),
            ["X was born in 1996", "plays tennis."]
        );
        assert_eq!(decompose_facts_rule("X plays tennis."), ["X plays tennis."]);
        assert!(decompose_facts_rule("").is_empty());
    }

    #[test]
    fn rule_split_respects_parentheses_and_semicolons() {
        assert_eq!(
            decompose_facts_rule("She won (with skill and luck); it rained, but nobody left."),
            ["She won (with skill and luck)", "it rained", "nobody left."]
        );
    }

    #[test]
    fn list_markers_stripped() {
        assert_eq!(parse_fact_lines("- A.\n- B."), ["A.", "B."]);
        assert_eq!(
            parse_fact_lines("Here are the facts:\n1. One fact.\n2) Two fact.\n• Three.\n* Four.\n\n"),
            ["One fact.", "Two fact.", "Three.", "Four."]
        );
    }

    #[test]
    fn llm_decomposition_uses_template() {
        let client = Canned::new("- A.\n- B.");
        let d = decompose_facts_llm("Some sentence.", &client).unwrap();
        assert_eq!(d.facts, ["A.", "B."]);
        assert!(d.warning.is_none());
        let prompts = client.prompts.lock().unwrap();
        assert_eq!(prompts[0], "Decompose the text into atomic facts.\n\nSome sentence.");
    }

    #[test]
    fn llm_decomposition_worked_example() {
        let reply = "- Sara Sorribes Tormo is a Spanish professional tennis player.\n\
                     - Sara Sorribes Tormo was born in Spain.\n\
                     - Sara Sorribes Tormo was born on October 8.\n\
                     - Sara Sorribes Tormo was born in 1996.\n\
                     - Sara Sorribes Tormo was born in Castellón de la Plana.";
        let client = Canned::new(reply);
        let sentence = "Sara Sorribes Tormo is a talented Spanish professional tennis player born on October 8, 1996, in Castellón de la Plana, Spain.";
        let d = decompose_facts_llm(sentence, &client).unwrap();
        assert_eq!(d.facts.len(), 5);
        assert_eq!(d.facts[0], "Sara Sorribes Tormo is a Spanish professional tennis player.");
    }

    #[test]
    fn empty_response_falls_back_with_warning() {
        let client = Canned::new("");
        let d = decompose_facts_llm("X was born in 1996 and plays tennis.", &client).unwrap();
        assert_eq!(d.facts, ["X was born in 1996", "plays tennis."]);
        assert!(d.warning.is_some());
    }

    #[test]
    fn filter_marks_duplicates_short_and_stopword_facts() {
        let out = filter_facts(&[
            fact("Sara plays tennis well."),
            fact("sara plays TENNIS well"),
            fact("He is."),
            fact("It was there then."),
            fact("Sara won the title."),
        ]);
        let kept: Vec<bool> = out.iter().map(|f| f.kept).collect();
        assert_eq!(kept, [true, false, false, false, true]);
    }

    #[test]
    fn filter_keeps_distinct_content_facts() {
        let facts: Vec<_> = [
            "Sara is a tennis player.",
            "Sara was born in Spain.",
            "Sara was born in 1996.",
            "Sara has perseverance today.",
            "Sara inspires aspiring players.",
        ]
        .iter()
        .map(|t| fact(t))
        .collect();
        assert!(filter_facts(&facts).iter().all(|f| f.kept));
    }

    #[test]
    fn filter_flags_are_configurable() {
        let opts = FilterOptions {
            drop_duplicates: false,
            min_words: 1,
            require_content_word: false,
        };
        let out = filter_facts_with(&[fact("He is."), fact("He is.")], opts);
        assert!(out.iter().all(|f| f.kept));
    }

    #[test]
    fn summary_decomposition_orders_and_positions() {
        let summary = SummaryRecord::new(
            "s1",
            "d1",
            "Ana sings and Bo dances. Cy paints murals.",
            crate::corpus::Regime::Standard,
            DecodingConfig::Greedy,
            crate::corpus::Provenance::Generated,
        );
        let out = decompose_summary(&summary, &Decomposer::Rule).unwrap();
        let coords: Vec<_> = out
            .facts
            .iter()
            .map(|f| (f.sentence_index, f.fact_index, f.position_words))
            .collect();
        assert_eq!(coords, [(0, 0, 2.5), (0, 1, 2.5), (1, 0, 6.5)]);
        let client = Canned::new("- One fact here.\n- Two facts here.");
        let out = decompose_summary(
            &summary,
            &Decomposer::Llm {
                client: &client,
                concurrency: 2,
            },
        )
        .unwrap();
        assert_eq!(out.facts.len(), 4);
        assert_eq!(out.facts[3].sentence_index, 1);
        assert_eq!(out.facts[3].fact_index, 1);
    }

    proptest! {
        #[test]
        fn spans_reassemble_text(words in prop::collection::vec("[A-Za-z]{1,5}[.!?,]?|Dr\\.|U\\.S\\.|[0-9]{1,3}", 0..40),
                                 seps in prop::collection::vec(prop::sample::select(vec![" ", "  ", "\n", "\t "]), 40)) {
            let mut text = String::new();
            for (i, w) in words.iter().enumerate() {
                if i > 0 { text.push_str(seps[i]); }
                text.push_str(w);
            }
            let spans = split_sentences(&text);
            let mut rebuilt = String::new();
            let mut prev_end = 0;
            for (k, s) in spans.iter().enumerate() {
                prop_assert_eq!(s.index, k);
                prop_assert!(s.start_word < s.end_word);
                prop_assert!(s.start_char >= prev_end);
                let gap = &text[prev_end..s.start_char];
                prop_assert!(gap.chars().all(char::is_whitespace));
                rebuilt.push_str(gap);
                rebuilt.push_str(s.text(&text));
                prev_end = s.end_char;
            }
            rebuilt.push_str(&text[prev_end..]);
            prop_assert_eq!(&rebuilt, &text);
            prop_assert!(text[prev_end..].chars().all(char::is_whitespace));
            let total: usize = spans.iter().map(|s| s.word_len()).sum();
            prop_assert_eq!(total, text.split_whitespace().count());
        }

        #[test]
        fn rule_preserves_content_words(tokens in prop::collection::vec(
            prop::sample::select(vec!["and", "but", "Sara", "tennis", "won", "(the", "cup)", "in", "1996;", ";", "plays", "the", "Spain,", "title."]),
            0..20)) {
            let sentence = tokens.join(" ");
            let facts = decompose_facts_rule(&sentence);
            let mut from_facts: Vec<String> = facts.iter().flat_map(|f| content_words(f)).collect();
            let mut original = content_words(&sentence);
            from_facts.sort();
            original.sort();
            prop_assert_eq!(&from_facts, &original);
            if !original.is_empty() {
                prop_assert!(!facts.is_empty());
            }
        }

        #[test]
        fn filter_idempotent_and_monotone(texts in prop::collection::vec("[a-c]{1,3}( [a-c]{1,3}){0,4}", 0..12),
                                          kept in prop::collection::vec(any::<bool>(), 12)) {
            let facts: Vec<_> = texts.iter().zip(&kept).map(|(t, &k)| AtomicFact { kept: k, ..fact(t) }).collect();
            let once = filter_facts(&facts);
            let twice = filter_facts(&once);
            prop_assert_eq!(&once, &twice);
            let before = facts.iter().filter(|f| f.kept).count();
            let after = once.iter().filter(|f| f.kept).count();
            prop_assert!(after <= before);
        }
    }
}
