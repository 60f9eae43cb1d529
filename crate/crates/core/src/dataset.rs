//! Relations datasets: loading, prompt rendering, filtering, exclusion rules,
//! balanced sampling and train/test splitting.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::ops::Range;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::toymodel::{TokenId, Tokenizer, ToyModel, NEWLINE};

/// Six small synthetic relations used by tests and the CLI fixture config.
pub const BUNDLED_FIXTURE: &str = include_str!("../fixtures/mini_relations.json");

/// Relations with fewer test samples than this are excluded from evaluation.
pub const MIN_TEST_SAMPLES: usize = 5;

/// Number of completed examples prepended to a few-shot prompt.
pub const DEFAULT_SHOTS: usize = 4;

const SLOT: &str = "{}";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Factual,
    Linguistic,
    Commonsense,
    Bias,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationSample {
    pub subject: String,
    pub object: String,
}

impl RelationSample {
    pub fn new(subject: impl Into<String>, object: impl Into<String>) -> Self {
        RelationSample {
            subject: subject.into(),
            object: object.into(),
        }
    }
}

/// A relation in the on-disk JSON shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Relation {
    pub name: String,
    pub category: Category,
    #[serde(rename = "prompt_templates_fewshot")]
    pub fs_templates: Vec<String>,
    #[serde(rename = "prompt_templates_zeroshot")]
    pub zs_templates: Vec<String>,
    pub samples: Vec<RelationSample>,
}

impl Relation {
    pub fn validate(&self) -> Result<()> {
        let schema = |message: String| Error::Schema {
            relation: self.name.clone(),
            message,
        };
        if self.name.trim().is_empty() {
            return Err(schema("relation name is empty".into()));
        }
        if self.samples.is_empty() {
            return Err(schema("samples array is empty".into()));
        }
        if self.fs_templates.is_empty() || self.zs_templates.is_empty() {
            return Err(schema(
                "needs at least one few-shot and one zero-shot template".into(),
            ));
        }
        for t in self.fs_templates.iter().chain(&self.zs_templates) {
            if t.matches(SLOT).count() != 1 {
                return Err(schema(format!(
                    "template {t:?} must contain exactly one \"{{}}\""
                )));
            }
        }
        for (i, s) in self.samples.iter().enumerate() {
            if s.subject.trim().is_empty() || s.object.trim().is_empty() {
                return Err(schema(format!("sample {i} has an empty subject or object")));
            }
        }
        Ok(())
    }

    /// Same relation with a different sample list.
    pub fn with_samples(&self, samples: Vec<RelationSample>) -> Relation {
        Relation {
            samples,
            ..self.clone()
        }
    }

    /// Distinct objects, sorted.
    pub fn objects(&self) -> Vec<String> {
        self.samples
            .iter()
            .map(|s| s.object.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn templates(&self, mode: PromptMode) -> &[String] {
        match mode {
            PromptMode::ZeroShot => &self.zs_templates,
            PromptMode::FewShot => &self.fs_templates,
        }
    }
}

pub fn parse_relations(json: &str) -> Result<Vec<Relation>> {
    let raw: Vec<serde_json::Value> = serde_json::from_str(json)?;
    raw.into_iter()
        .enumerate()
        .map(|(i, v)| {
            let name = v
                .get("name")
                .and_then(|n| n.as_str())
                .map(str::to_string)
                .unwrap_or_else(|| format!("#{i}"));
            let rel: Relation = serde_json::from_value(v).map_err(|e| Error::Schema {
                relation: name,
                message: e.to_string(),
            })?;
            rel.validate()?;
            Ok(rel)
        })
        .collect()
}

/// Load a relations JSON file (a list of relation objects), in file order.
pub fn load_relations(path: &Path) -> Result<Vec<Relation>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_relations(&text)
}

pub fn bundled_fixture() -> Vec<Relation> {
    parse_relations(BUNDLED_FIXTURE).expect("bundled fixture is valid")
}

// ---------------------------------------------------------------------------
// Prompts
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    ZeroShot,
    FewShot,
}

impl PromptMode {
    pub fn label(self) -> &'static str {
        match self {
            PromptMode::ZeroShot => "zs",
            PromptMode::FewShot => "fs",
        }
    }
}

/// A rendered, tokenized prompt.
///
/// `tokens` is the prompt followed by all but the last object token, so that
/// every object token is predicted at one of `object_token_positions` (the
/// positions `prompt_len - 1 .. prompt_len + m - 1` for an `m`-token object).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptInstance {
    pub prompt_id: String,
    pub relation: String,
    pub subject: String,
    pub object: String,
    pub mode: PromptMode,
    pub full_text: String,
    pub tokens: Vec<TokenId>,
    pub prompt_len: usize,
    pub subject_token_span: Range<usize>,
    pub object_tokens: Vec<TokenId>,
    pub object_token_positions: Vec<usize>,
    pub few_shot_examples: Vec<RelationSample>,
}

impl PromptInstance {
    pub fn subject_index(&self) -> usize {
        self.subject_token_span.end - 1
    }

    pub fn prompt_tokens(&self) -> &[TokenId] {
        &self.tokens[..self.prompt_len]
    }

    /// Tokens for teacher-forced scoring of an arbitrary object continuation.
    pub fn with_object_tokens(&self, object: &[TokenId]) -> (Vec<TokenId>, Vec<usize>) {
        let mut toks = self.prompt_tokens().to_vec();
        toks.extend_from_slice(&object[..object.len().saturating_sub(1)]);
        let positions = (self.prompt_len - 1..self.prompt_len - 1 + object.len()).collect();
        (toks, positions)
    }
}

pub fn prompt_id(relation: &str, sample: &RelationSample, mode: PromptMode) -> String {
    format!(
        "{relation}|{}|{}|{}",
        sample.subject,
        sample.object,
        mode.label()
    )
}

fn fill(template: &str, subject: &str) -> String {
    template.replacen(SLOT, subject, 1)
}

fn words_of(text: &str) -> Vec<String> {
    Tokenizer::words(text)
        .into_iter()
        .filter(|w| w != NEWLINE)
        .collect()
}

/// Render a prompt, drawing shots from the relation's own samples.
pub fn render_prompt(
    sample: &RelationSample,
    relation: &Relation,
    mode: PromptMode,
    k_shots: usize,
    seed: u64,
    tokenizer: &Tokenizer,
) -> Result<PromptInstance> {
    render_prompt_from_pool(
        sample,
        relation,
        &relation.samples,
        mode,
        k_shots,
        seed,
        tokenizer,
    )
}

/// Render a prompt, drawing few-shot examples from `pool` (the target sample
/// itself is never used as a shot).
pub fn render_prompt_from_pool(
    sample: &RelationSample,
    relation: &Relation,
    pool: &[RelationSample],
    mode: PromptMode,
    k_shots: usize,
    seed: u64,
    tokenizer: &Tokenizer,
) -> Result<PromptInstance> {
    let templates = relation.templates(mode);
    if templates.is_empty() {
        return Err(Error::Schema {
            relation: relation.name.clone(),
            message: format!("no {} templates", mode.label()),
        });
    }
    let mut rng = stream(
        seed,
        &[
            "prompt",
            mode.label(),
            &relation.name,
            &sample.subject,
            &sample.object,
        ],
    );
    let template = templates.choose(&mut rng).expect("non-empty").clone();

    let shots: Vec<RelationSample> = match mode {
        PromptMode::ZeroShot => Vec::new(),
        PromptMode::FewShot => {
            let others: Vec<&RelationSample> = pool.iter().filter(|s| *s != sample).collect();
            if others.len() < k_shots {
                return Err(Error::InsufficientShots {
                    needed: k_shots,
                    available: others.len(),
                });
            }
            others
                .choose_multiple(&mut rng, k_shots)
                .map(|s| (*s).clone())
                .collect()
        }
    };

    let (prefix, suffix) = template.split_once(SLOT).expect("validated template");
    let mut words: Vec<String> = Vec::new();
    let mut lines: Vec<String> = Vec::new();
    for shot in &shots {
        let line = format!("{} {}", fill(&template, &shot.subject), shot.object);
        words.extend(words_of(&line));
        words.push(NEWLINE.to_string());
        lines.push(line);
    }
    words.extend(words_of(prefix));
    let subject_words = words_of(&sample.subject);
    let start = words.len();
    words.extend(subject_words.iter().cloned());
    let end = words.len();
    words.extend(words_of(suffix));
    let last = fill(&template, &sample.subject);
    lines.push(last);
    let full_text = lines.join("\n");

    if subject_words.is_empty() {
        return Err(Error::Span(format!(
            "subject {:?} has no tokens",
            sample.subject
        )));
    }
    let prompt_tokens = words
        .iter()
        .map(|w| tokenizer.id(w))
        .collect::<Result<Vec<_>>>()?;
    if tokenizer.encode(&full_text)? != prompt_tokens {
        return Err(Error::Span(format!(
            "template {template:?} does not tokenize around the subject slot"
        )));
    }
    let object_tokens = tokenizer.encode(&sample.object)?;
    if object_tokens.is_empty() {
        return Err(Error::Span(format!(
            "object {:?} has no tokens",
            sample.object
        )));
    }
    let prompt_len = prompt_tokens.len();
    let mut tokens = prompt_tokens;
    tokens.extend_from_slice(&object_tokens[..object_tokens.len() - 1]);
    let object_token_positions = (prompt_len - 1..prompt_len - 1 + object_tokens.len()).collect();

    Ok(PromptInstance {
        prompt_id: prompt_id(&relation.name, sample, mode),
        relation: relation.name.clone(),
        subject: sample.subject.clone(),
        object: sample.object.clone(),
        mode,
        full_text,
        tokens,
        prompt_len,
        subject_token_span: start..end,
        object_tokens,
        object_token_positions,
        few_shot_examples: shots,
    })
}

/// Keep the samples whose zero-shot prompt the model completes with the
/// object's token sequence under greedy decoding.
pub fn filter_correct(relation: &Relation, model: &ToyModel, seed: u64) -> Result<Relation> {
    let mut kept = Vec::new();
    for s in &relation.samples {
        let p = render_prompt(
            s,
            relation,
            PromptMode::ZeroShot,
            0,
            seed,
            model.tokenizer(),
        )?;
        let out = model.generate_greedy(p.prompt_tokens(), p.object_tokens.len())?;
        if out == p.object_tokens {
            kept.push(s.clone());
        }
    }
    Ok(relation.with_samples(kept))
}

// ---------------------------------------------------------------------------
// Splits, exclusions, sampling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: Vec<RelationSample>,
    pub test: Vec<RelationSample>,
    pub seed: u64,
}

/// Samples grouped by object, objects in sorted order, samples in input order.
fn by_object(samples: &[RelationSample]) -> BTreeMap<&str, Vec<&RelationSample>> {
    let mut map: BTreeMap<&str, Vec<&RelationSample>> = BTreeMap::new();
    for s in samples {
        map.entry(s.object.as_str()).or_default().push(s);
    }
    map
}

/// Per object, shuffle and put `max(1, ceil(fraction * k))` samples in train.
pub fn make_split(relation: &Relation, fraction: f64, seed: u64) -> Result<SplitPlan> {
    if relation.samples.is_empty() {
        return Err(Error::Empty("relation samples"));
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!(
            "split fraction {fraction} outside [0, 1]"
        )));
    }
    let mut rng = stream(seed, &["split", &relation.name]);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (_, mut group) in by_object(&relation.samples) {
        group.shuffle(&mut rng);
        let k = group.len();
        let n_train = ((fraction * k as f64).ceil() as usize).clamp(1, k);
        train.extend(group[..n_train].iter().map(|s| (*s).clone()));
        test.extend(group[n_train..].iter().map(|s| (*s).clone()));
    }
    Ok(SplitPlan { train, test, seed })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum ExclusionReason {
    OneToOne,
    TooFewTestSamples { n_test: usize },
}

impl std::fmt::Display for ExclusionReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ExclusionReason::OneToOne => write!(f, "one-to-one"),
            ExclusionReason::TooFewTestSamples { n_test } => {
                write!(f, "only {n_test} test samples (need {MIN_TEST_SAMPLES})")
            }
        }
    }
}

/// `None` keeps the relation.
pub fn exclusion_rules(relation: &Relation, split: &SplitPlan) -> Option<ExclusionReason> {
    if is_one_to_one(&relation.samples) {
        return Some(ExclusionReason::OneToOne);
    }
    if split.test.len() < MIN_TEST_SAMPLES {
        return Some(ExclusionReason::TooFewTestSamples {
            n_test: split.test.len(),
        });
    }
    None
}

/// Every object has exactly one subject and every subject exactly one object.
pub fn is_one_to_one(samples: &[RelationSample]) -> bool {
    let mut per_object: HashMap<&str, usize> = HashMap::new();
    let mut per_subject: HashMap<&str, usize> = HashMap::new();
    for s in samples {
        *per_object.entry(&s.object).or_default() += 1;
        *per_subject.entry(&s.subject).or_default() += 1;
    }
    !samples.is_empty()
        && per_object.values().all(|&c| c == 1)
        && per_subject.values().all(|&c| c == 1)
}

/// Round-robin over objects (most samples first, ties by name), drawing
/// without replacement within each object.
pub fn balanced_sample<R: Rng>(
    samples: &[RelationSample],
    n: usize,
    rng: &mut R,
) -> Vec<RelationSample> {
    let mut groups: Vec<Vec<&RelationSample>> = by_object(samples).into_values().collect();
    // stable sort keeps name order among equal sizes
    groups.sort_by_key(|g| std::cmp::Reverse(g.len()));
    for g in &mut groups {
        g.shuffle(rng);
    }
    let target = n.min(samples.len());
    let mut out = Vec::with_capacity(target);
    let mut round = 0;
    while out.len() < target {
        for g in &groups {
            if out.len() == target {
                break;
            }
            if let Some(s) = g.get(round) {
                out.push((*s).clone());
            }
        }
        round += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(samples: Vec<(&str, &str)>) -> Relation {
        Relation {
            name: "r".into(),
            category: Category::Synthetic,
            fs_templates: vec!["{} is in".into()],
            zs_templates: vec!["{} is located in the country of".into()],
            samples: samples
                .into_iter()
                .map(|(s, o)| RelationSample::new(s, o))
                .collect(),
        }
    }

    #[test]
    fn fixture_loads() {
        let rels = bundled_fixture();
        assert_eq!(rels.len(), 6);
    }

    #[test]
    fn schema_errors_name_the_relation() {
        let bad = r#"[{"name":"x","category":"factual","prompt_templates_fewshot":["{} a"],
            "prompt_templates_zeroshot":["{} b"],"samples":[]}]"#;
        match parse_relations(bad) {
            Err(Error::Schema { relation, .. }) => assert_eq!(relation, "x"),
            other => panic!("{other:?}"),
        }
        let bad = r#"[{"name":"y","category":"factual","prompt_templates_fewshot":["X is in"],
            "prompt_templates_zeroshot":["{} b"],"samples":[{"subject":"a","object":"b"}]}]"#;
        assert!(matches!(parse_relations(bad), Err(Error::Schema { .. })));
        let bad = r#"[{"name":"z","category":"factual","prompt_templates_zeroshot":["{} b"],
            "samples":[{"subject":"a","object":"b"}]}]"#;
        match parse_relations(bad) {
            Err(Error::Schema { relation, message }) => {
                assert_eq!(relation, "z");
                assert!(message.contains("prompt_templates_fewshot"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn split_minimum_one_train() {
        let r = rel(vec![("a", "x"), ("b", "y"), ("c", "y")]);
        let sp = make_split(&r, 0.5, 1).unwrap();
        assert_eq!(sp.train.iter().filter(|s| s.object == "x").count(), 1);
        assert_eq!(sp.test.iter().filter(|s| s.object == "x").count(), 0);
        assert_eq!(sp.train.iter().filter(|s| s.object == "y").count(), 1);
        assert_eq!(sp.test.iter().filter(|s| s.object == "y").count(), 1);
    }

    #[test]
    fn balanced_counts() {
        let mut samples = Vec::new();
        for i in 0..10 {
            samples.push(RelationSample::new(format!("a{i}"), "A"));
            samples.push(RelationSample::new(format!("c{i}"), "C"));
        }
        samples.push(RelationSample::new("b0", "B"));
        let mut rng = stream(0, &["t"]);
        let got = balanced_sample(&samples, 5, &mut rng);
        let count = |o: &str| got.iter().filter(|s| s.object == o).count();
        assert_eq!((count("A"), count("B"), count("C")), (2, 1, 2));
        let all = balanced_sample(&samples, 100, &mut rng);
        assert_eq!(all.len(), samples.len());
    }

    #[test]
    fn zero_shot_substitution() {
        let r = rel(vec![("paris", "france")]);
        let vocab = [
            "paris", "is", "located", "in", "the", "country", "of", "france",
        ];
        let t = Tokenizer::new(vocab.iter().map(|s| s.to_string()).collect()).unwrap();
        let p = render_prompt(&r.samples[0], &r, PromptMode::ZeroShot, 0, 0, &t).unwrap();
        assert_eq!(p.full_text, "paris is located in the country of");
        assert_eq!(p.subject_token_span, 0..1);
        assert_eq!(p.object_token_positions, vec![6]);
        assert_eq!(p.tokens.len(), 7);
    }
}
