//! Caption preprocessing: tagging, pruning to the fixed seven-node tree,
//! and entity/relation vocabularies.
//!
//! Node ids follow the tree layout: 1 = subject 1, 2 = sub-relation 1,
//! 3 = object 1, 4 = root relation, 5 = subject 2, 6 = sub-relation 2,
//! 7 = object 2. Leaves (odd ids) hold entities, inner nodes hold relations.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_NODES: usize = 7;
pub const ENTITY_NODES: [usize; 4] = [1, 3, 5, 7];
pub const RELATION_NODES: [usize; 3] = [2, 4, 6];
pub const NULL_WORD: &str = "null";

/// Marker appended to a verb immediately followed by a preposition.
pub const COVERB_SUFFIX: &str = "_P";

const BUNDLED_LEXICON: &str = include_str!("../data/lexicon.tsv");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pos {
    Noun,
    Verb,
    Prep,
    Conj,
    Other,
}

impl Pos {
    fn parse(s: &str) -> Option<Pos> {
        Some(match s {
            "NOUN" => Pos::Noun,
            "VERB" => Pos::Verb,
            "PREP" => Pos::Prep,
            "CONJ" => Pos::Conj,
            "OTHER" => Pos::Other,
            _ => return None,
        })
    }

    pub fn is_relation(self) -> bool {
        matches!(self, Pos::Verb | Pos::Prep | Pos::Conj)
    }
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pos::Noun => "NOUN",
            Pos::Verb => "VERB",
            Pos::Prep => "PREP",
            Pos::Conj => "CONJ",
            Pos::Other => "OTHER",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaggedToken {
    pub surface: String,
    pub lemma: String,
    pub pos: Pos,
}

/// Anything that turns a caption into tagged tokens.
pub trait Tagger {
    fn tag(&self, caption: &str) -> Result<Vec<TaggedToken>>;
}

/// Dictionary tagger over a `surface<TAB>tag<TAB>lemma` lexicon.
///
/// Unknown words ending in a plural or verbal suffix are retried on their
/// stem; anything still unknown is tagged [`Pos::Other`].
#[derive(Clone, Debug)]
pub struct LexiconTagger {
    entries: HashMap<String, (Pos, String)>,
}

impl Default for LexiconTagger {
    fn default() -> Self {
        Self::from_tsv(BUNDLED_LEXICON).expect("bundled lexicon is well formed")
    }
}

impl LexiconTagger {
    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut entries = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut cols = line.split('\t');
            let (Some(surface), Some(tag), Some(lemma)) = (cols.next(), cols.next(), cols.next()) else {
                return Err(Error::Data(format!("lexicon line {}: expected 3 columns", lineno + 1)));
            };
            let pos = Pos::parse(tag)
                .ok_or_else(|| Error::Data(format!("lexicon line {}: unknown tag {tag}", lineno + 1)))?;
            entries.insert(surface.to_lowercase(), (pos, lemma.to_lowercase()));
        }
        Ok(Self { entries })
    }

    fn lookup(&self, word: &str) -> (Pos, String) {
        if let Some((pos, lemma)) = self.entries.get(word) {
            return (*pos, lemma.clone());
        }
        for (suffix, expect) in [("es", Pos::Noun), ("s", Pos::Noun), ("s", Pos::Verb)] {
            if let Some(stem) = word.strip_suffix(suffix) {
                if let Some((pos, lemma)) = self.entries.get(stem) {
                    if *pos == expect {
                        return (*pos, lemma.clone());
                    }
                }
            }
        }
        (Pos::Other, word.to_string())
    }
}

impl Tagger for LexiconTagger {
    fn tag(&self, caption: &str) -> Result<Vec<TaggedToken>> {
        let tokens: Vec<TaggedToken> = caption
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(|w| {
                let surface = w.to_lowercase();
                let (pos, lemma) = self.lookup(&surface);
                TaggedToken { surface, lemma, pos }
            })
            .collect();
        if tokens.is_empty() {
            return Err(Error::EmptyInput("caption has no words".into()));
        }
        Ok(tokens)
    }
}

pub fn tag_caption(caption: &str) -> Result<Vec<TaggedToken>> {
    LexiconTagger::default().tag(caption)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum VocabKind {
    Entity,
    Relation,
}

/// Word list with `"null"` at id 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    pub kind: VocabKind,
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from `words` (in id order after `"null"`).
    /// Duplicates and any `"null"` in the input are dropped.
    pub fn new(kind: VocabKind, words: impl IntoIterator<Item = String>) -> Self {
        let mut v = Vocab {
            kind,
            words: vec![NULL_WORD.to_string()],
            index: HashMap::from([(NULL_WORD.to_string(), 0)]),
        };
        for w in words {
            if !v.index.contains_key(&w) {
                v.index.insert(w.clone(), v.words.len());
                v.words.push(w);
            }
        }
        v
    }

    pub fn null_id(&self) -> usize {
        0
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Id of `word`, or the null id when it is not in the vocabulary.
    pub fn id_or_null(&self, word: &str) -> usize {
        self.id(word).unwrap_or(0)
    }

    /// One word per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.words.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(kind: VocabKind, path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let words: Vec<&str> = text.lines().collect();
        if words.first() != Some(&NULL_WORD) {
            return Err(Error::Data(format!("{}: first line must be \"null\"", path.display())));
        }
        Ok(Vocab::new(kind, words[1..].iter().map(|w| w.to_string())))
    }
}

/// Seven category ids, indexed by node id minus one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CaptionTreeLabels(pub [usize; NUM_NODES]);

impl CaptionTreeLabels {
    pub fn node(&self, node_id: usize) -> usize {
        self.0[node_id - 1]
    }

    pub fn validate(&self, entities: usize, relations: usize) -> Result<()> {
        for node in 1..=NUM_NODES {
            let limit = if is_entity_node(node) { entities } else { relations };
            if self.node(node) >= limit {
                return Err(Error::Label(format!(
                    "node {node} label {} outside vocabulary of {limit}",
                    self.node(node)
                )));
            }
        }
        Ok(())
    }
}

pub fn is_entity_node(node_id: usize) -> bool {
    node_id % 2 == 1
}

/// One extracted item in reading order.
#[derive(Clone, Debug, PartialEq, Eq)]
enum Item {
    Entity(String),
    Relation(String),
}

/// Splits a tagged caption into entities and relation runs.
///
/// A relation run is every verb/preposition/conjunction between two
/// consecutive nouns. Its label is the first verb's lemma, suffixed with
/// [`COVERB_SUFFIX`] when the very next token is a preposition; runs without
/// a verb use their first word.
fn extract_items(tokens: &[TaggedToken]) -> Vec<Item> {
    let mut items = Vec::new();
    let mut seen_noun = false;
    let mut run: Vec<usize> = Vec::new();
    let flush = |run: &mut Vec<usize>, items: &mut Vec<Item>| {
        if let Some(label) = relation_label(tokens, run) {
            items.push(Item::Relation(label));
        }
        run.clear();
    };
    for (i, tok) in tokens.iter().enumerate() {
        match tok.pos {
            Pos::Noun => {
                if seen_noun {
                    flush(&mut run, &mut items);
                }
                seen_noun = true;
                items.push(Item::Entity(tok.lemma.clone()));
            }
            p if p.is_relation() && seen_noun => run.push(i),
            _ => {}
        }
    }
    // A trailing run has no object; it is still a relation of the last noun.
    if seen_noun {
        flush(&mut run, &mut items);
    }
    items
}

fn relation_label(tokens: &[TaggedToken], run: &[usize]) -> Option<String> {
    let first = *run.first()?;
    if let Some(&v) = run.iter().find(|&&i| tokens[i].pos == Pos::Verb) {
        let coverb = tokens.get(v + 1).is_some_and(|t| t.pos == Pos::Prep);
        let lemma = &tokens[v].lemma;
        return Some(if coverb {
            format!("{lemma}{COVERB_SUFFIX}")
        } else {
            lemma.clone()
        });
    }
    Some(tokens[first].lemma.clone())
}

/// Slot strings for the seven nodes, before vocabulary lookup.
pub fn extract_slots(tokens: &[TaggedToken]) -> [Option<String>; NUM_NODES] {
    let mut slots: [Option<String>; NUM_NODES] = Default::default();
    let mut nouns = 0usize;
    for item in extract_items(tokens) {
        match item {
            Item::Entity(w) => {
                if nouns < ENTITY_NODES.len() {
                    slots[ENTITY_NODES[nouns] - 1] = Some(w);
                }
                nouns += 1;
            }
            Item::Relation(w) => {
                // the run following noun k fills relation slot k
                if (1..=RELATION_NODES.len()).contains(&nouns) {
                    let slot = RELATION_NODES[nouns - 1] - 1;
                    if slots[slot].is_none() {
                        slots[slot] = Some(w);
                    }
                }
            }
        }
    }
    slots
}

/// Maps a tagged caption onto the fixed tree. Unfilled nodes and
/// out-of-vocabulary words get the null id.
pub fn prune_to_tree(tokens: &[TaggedToken], entities: &Vocab, relations: &Vocab) -> CaptionTreeLabels {
    let slots = extract_slots(tokens);
    let mut labels = [0usize; NUM_NODES];
    for (i, slot) in slots.iter().enumerate() {
        let vocab = if is_entity_node(i + 1) { entities } else { relations };
        labels[i] = slot.as_deref().map_or(vocab.null_id(), |w| vocab.id_or_null(w));
    }
    CaptionTreeLabels(labels)
}

/// Word counts feeding vocabulary construction.
#[derive(Clone, Debug, Default)]
pub struct VocabCounts {
    pub entities: BTreeMap<String, usize>,
    pub relations: BTreeMap<String, usize>,
}

impl VocabCounts {
    pub fn add_caption(&mut self, tokens: &[TaggedToken], synonyms: Option<&HashMap<String, String>>) {
        let canon = |w: String| synonyms.and_then(|m| m.get(&w).cloned()).unwrap_or(w);
        for item in extract_items(tokens) {
            match item {
                Item::Entity(w) => *self.entities.entry(canon(w)).or_default() += 1,
                Item::Relation(w) => *self.relations.entry(canon(w)).or_default() += 1,
            }
        }
    }

    fn vocab(counts: &BTreeMap<String, usize>, kind: VocabKind, min_freq: usize) -> Vocab {
        let mut kept: Vec<(&String, usize)> = counts
            .iter()
            .filter(|(w, &c)| c >= min_freq && w.as_str() != NULL_WORD)
            .map(|(w, &c)| (w, c))
            .collect();
        // BTreeMap iteration is alphabetical, and the sort is stable
        kept.sort_by_key(|k| std::cmp::Reverse(k.1));
        Vocab::new(kind, kept.into_iter().map(|(w, _)| w.clone()))
    }

    pub fn build(&self, min_freq: usize) -> (Vocab, Vocab) {
        (
            Self::vocab(&self.entities, VocabKind::Entity, min_freq),
            Self::vocab(&self.relations, VocabKind::Relation, min_freq),
        )
    }
}

/// Builds `(entity, relation)` vocabularies: words with frequency at least
/// `min_freq`, ordered by descending frequency then alphabetically, after
/// `"null"`.
pub fn build_vocabs<S: AsRef<str>>(captions: &[S], min_freq: usize) -> Result<(Vocab, Vocab)> {
    build_vocabs_with(captions, min_freq, &LexiconTagger::default(), None)
}

pub fn build_vocabs_with<S: AsRef<str>>(
    captions: &[S],
    min_freq: usize,
    tagger: &dyn Tagger,
    synonyms: Option<&HashMap<String, String>>,
) -> Result<(Vocab, Vocab)> {
    if captions.is_empty() {
        return Err(Error::EmptyInput("caption corpus is empty".into()));
    }
    if min_freq == 0 {
        return Err(Error::Config("min_freq must be at least 1".into()));
    }
    let mut counts = VocabCounts::default();
    for c in captions {
        // captions with no words contribute nothing
        if let Ok(tokens) = tagger.tag(c.as_ref()) {
            counts.add_caption(&tokens, synonyms);
        }
    }
    Ok(counts.build(min_freq))
}

/// Reads a `word<TAB>canonical` synonym file.
pub fn load_synonyms(path: &Path) -> Result<HashMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once('\t'))
        .map(|(a, b)| (a.trim().to_lowercase(), b.trim().to_lowercase()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn render(tokens: &[TaggedToken]) -> Vec<String> {
        tokens.iter().map(|t| format!("{}/{}", t.lemma, t.pos)).collect()
    }

    fn labels_as_words(l: &CaptionTreeLabels, e: &Vocab, r: &Vocab) -> Vec<String> {
        (1..=NUM_NODES)
            .map(|n| {
                let v = if is_entity_node(n) { e } else { r };
                v.word(l.node(n)).unwrap().to_string()
            })
            .collect()
    }

    #[test]
    fn tags_train_caption() {
        let toks = tag_caption("a train stops at the track").unwrap();
        assert_eq!(
            render(&toks),
            [
                "a/OTHER",
                "train/NOUN",
                "stop/VERB",
                "at/PREP",
                "the/OTHER",
                "track/NOUN"
            ]
        );
        assert_eq!(toks[2].surface, "stops");
    }

    #[test]
    fn single_word_and_empty() {
        assert_eq!(render(&tag_caption("cat").unwrap()), ["cat/NOUN"]);
        assert!(matches!(tag_caption(""), Err(Error::EmptyInput(_))));
        assert!(matches!(tag_caption("  ,. "), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn unknown_words_fall_back_to_other() {
        let toks = tag_caption("Zorblax!").unwrap();
        assert_eq!(render(&toks), ["zorblax/OTHER"]);
    }

    #[test]
    fn suffix_retry_finds_plural_nouns() {
        let toks = tag_caption("kites").unwrap();
        assert_eq!(render(&toks), ["kite/NOUN"]);
    }

    #[test]
    fn prunes_coverb_caption() {
        let caption = "a train stops at the track";
        let toks = tag_caption(caption).unwrap();
        let (e, r) = build_vocabs(&[caption], 1).unwrap();
        let labels = prune_to_tree(&toks, &e, &r);
        assert_eq!(
            labels_as_words(&labels, &e, &r),
            ["train", "stop_P", "track", "null", "null", "null", "null"]
        );
    }

    #[test]
    fn prunes_two_triples() {
        let caption = "a man rides a horse on a beach near water";
        let toks = tag_caption(caption).unwrap();
        let (e, r) = build_vocabs(&[caption], 1).unwrap();
        let labels = prune_to_tree(&toks, &e, &r);
        assert_eq!(
            labels_as_words(&labels, &e, &r),
            ["man", "ride", "horse", "on", "beach", "near", "water"]
        );
    }

    #[test]
    fn noun_free_caption_is_all_null() {
        let toks = tag_caption("running quickly").unwrap();
        let (e, r) = build_vocabs(&["a cat"], 1).unwrap();
        assert_eq!(prune_to_tree(&toks, &e, &r), CaptionTreeLabels([0; 7]));
    }

    #[test]
    fn extra_triples_are_truncated() {
        let caption = "a man rides a horse on a beach near water with a dog by a tree";
        let toks = tag_caption(caption).unwrap();
        let slots = extract_slots(&toks);
        assert_eq!(slots[6].as_deref(), Some("water"));
    }

    #[test]
    fn out_of_vocab_words_map_to_null() {
        let toks = tag_caption("a man rides a horse").unwrap();
        let (e, r) = build_vocabs(&["a horse"], 1).unwrap();
        let labels = prune_to_tree(&toks, &e, &r);
        assert_eq!(labels.node(1), e.null_id());
        assert_eq!(labels.node(3), e.id("horse").unwrap());
        assert_eq!(labels.node(2), r.null_id());
    }

    #[test]
    fn frequency_threshold_drops_rare_nouns() {
        let (e, r) = build_vocabs(&["a cat", "a cat", "a dog"], 2).unwrap();
        assert_eq!(e.words(), ["null", "cat"]);
        assert_eq!(e.id("dog"), None);
        assert_eq!(r.words(), ["null"]);
    }

    #[test]
    fn min_freq_one_keeps_every_noun() {
        let corpus = ["a dog and a cat on a bench", "two zebras near a tree"];
        let (e, _) = build_vocabs(&corpus, 1).unwrap();
        for w in ["dog", "cat", "bench", "zebra", "tree"] {
            assert!(e.id(w).is_some(), "{w} missing");
        }
    }

    #[test]
    fn vocab_order_is_frequency_then_alphabetical() {
        let (e, _) = build_vocabs(&["a dog", "a cat", "a bird", "a dog"], 1).unwrap();
        assert_eq!(e.words(), ["null", "dog", "bird", "cat"]);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let empty: [&str; 0] = [];
        assert!(matches!(build_vocabs(&empty, 1), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn synonyms_merge_counts() {
        let syn = HashMap::from([("puppy".to_string(), "dog".to_string())]);
        let tagger = LexiconTagger::from_tsv("puppy\tNOUN\tpuppy\ndog\tNOUN\tdog\na\tOTHER\ta").unwrap();
        let (e, _) = build_vocabs_with(&["a puppy", "a dog"], 2, &tagger, Some(&syn)).unwrap();
        assert_eq!(e.words(), ["null", "dog"]);
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("entities.txt");
        let (e, _) = build_vocabs(&["a man rides a horse on a beach"], 1).unwrap();
        e.save(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("null\n"));
        assert_eq!(Vocab::load(VocabKind::Entity, &path).unwrap(), e);
    }
}
