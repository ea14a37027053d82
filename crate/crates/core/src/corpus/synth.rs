//! A two-language agreement grammar for desk-scale experiments.
//!
//! Nouns carry a lexical class and a number suffix. Verbs carry one of four
//! suffixes agreeing with the subject's class and number. Determiners agree
//! with their noun's class. L1 is verb-final, L2 is verb-medial.

use std::collections::HashSet;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::pipeline::CorpusSource;
use crate::rng::{self, Rng};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phenomenon {
    SubjectVerbNumber,
    SubjectVerbClass,
    DeterminerNounClass,
}

impl Phenomenon {
    pub const ALL: [Phenomenon; 3] =
        [Phenomenon::SubjectVerbNumber, Phenomenon::SubjectVerbClass, Phenomenon::DeterminerNounClass];

    pub fn tag(self) -> &'static str {
        match self {
            Phenomenon::SubjectVerbNumber => "subject-verb-number",
            Phenomenon::SubjectVerbClass => "subject-verb-class",
            Phenomenon::DeterminerNounClass => "determiner-noun-class",
        }
    }

    pub fn from_tag(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.tag() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinimalPair {
    pub good: String,
    pub bad: String,
    pub phenomenon: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WordOrder {
    Sov,
    Svo,
}

/// Spelling and morphology of one language.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub name: String,
    pub consonants: String,
    pub vowels: String,
    pub order: WordOrder,
    /// Noun suffix per number (singular, plural).
    pub noun_suffix: [String; 2],
    /// Verb suffix indexed by `2 * class + number`.
    pub verb_suffix: [String; 4],
    /// Determiner per noun class.
    pub determiner: [String; 2],
}

impl LanguageSpec {
    pub fn l1() -> Self {
        let s = |x: &str| x.to_string();
        LanguageSpec {
            name: s("l1"),
            consonants: s("ktmnrg"),
            vowels: s("aou"),
            order: WordOrder::Sov,
            noun_suffix: [s("ok"), s("um")],
            verb_suffix: [s("ta"), s("tu"), s("ka"), s("ku")],
            determiner: [s("mo"), s("ra")],
        }
    }

    pub fn l2() -> Self {
        let s = |x: &str| x.to_string();
        LanguageSpec {
            name: s("l2"),
            consonants: s("lspdvf"),
            vowels: s("eiy"),
            order: WordOrder::Svo,
            noun_suffix: [s("es"), s("il")],
            verb_suffix: [s("ve"), s("vi"), s("de"), s("di")],
            determiner: [s("le"), s("si")],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrammarConfig {
    pub nouns_per_class: usize,
    pub verbs: usize,
    pub transitive_fraction: f64,
    /// Share of L2 stems copied verbatim from L1.
    pub overlap_fraction: f64,
    pub seed: u64,
    pub l1: LanguageSpec,
    pub l2: LanguageSpec,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        GrammarConfig {
            nouns_per_class: 40,
            verbs: 30,
            transitive_fraction: 0.6,
            overlap_fraction: 0.0,
            seed: 0,
            l1: LanguageSpec::l1(),
            l2: LanguageSpec::l2(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    pub spec: LanguageSpec,
    /// Noun stems per class.
    pub nouns: [Vec<String>; 2],
    pub verbs: Vec<String>,
}

#[derive(Clone, Copy, Debug)]
struct Np {
    class: usize,
    number: usize,
    stem: usize,
}

#[derive(Clone, Debug)]
struct Clause {
    subject: Np,
    object: Option<Np>,
    verb: usize,
}

/// A built grammar: one lexicon per language.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticGrammar {
    pub config: GrammarConfig,
    pub lexicons: [Lexicon; 2],
}

fn stems(spec: &LanguageSpec, rng: &mut Rng, n: usize) -> Result<Vec<String>> {
    let cs: Vec<char> = spec.consonants.chars().collect();
    let vs: Vec<char> = spec.vowels.chars().collect();
    let mut all = Vec::new();
    for &a in &cs {
        for &b in &vs {
            for &c in &cs {
                for &d in &vs {
                    all.push([a, b, c, d].iter().collect::<String>());
                }
            }
        }
    }
    if n > all.len() {
        return Err(Error::config(format!(
            "language {} can spell {} distinct stems, {n} requested",
            spec.name,
            all.len()
        )));
    }
    let picked = rand::seq::index::sample(rng, all.len(), n);
    Ok(picked.into_iter().map(|i| all[i].clone()).collect())
}

impl SyntheticGrammar {
    pub fn new(config: GrammarConfig) -> Result<Self> {
        if config.nouns_per_class == 0 || config.verbs == 0 {
            return Err(Error::config("grammar needs at least one noun per class and one verb"));
        }
        if !(0.0..=1.0).contains(&config.overlap_fraction) || !(0.0..=1.0).contains(&config.transitive_fraction) {
            return Err(Error::config("overlap and transitive fractions must lie in [0, 1]"));
        }
        let need = 2 * config.nouns_per_class + config.verbs;
        let mut r1 = rng::stream(config.seed, &["lexicon", "l1"]);
        let mut r2 = rng::stream(config.seed, &["lexicon", "l2"]);
        let s1 = stems(&config.l1, &mut r1, need)?;
        let mut s2 = stems(&config.l2, &mut r2, need)?;
        let shared = (config.overlap_fraction * need as f64).round() as usize;
        let s1_set: HashSet<&String> = s1.iter().collect();
        for i in 0..shared {
            s2[i] = s1[i].clone();
        }
        if s2[shared..].iter().any(|s| s1_set.contains(s)) {
            return Err(Error::config("language alphabets overlap; non-shared stems collide"));
        }
        let lex = |spec: &LanguageSpec, s: &[String]| {
            let n = config.nouns_per_class;
            Lexicon { spec: spec.clone(), nouns: [s[..n].to_vec(), s[n..2 * n].to_vec()], verbs: s[2 * n..].to_vec() }
        };
        let lexicons = [lex(&config.l1, &s1), lex(&config.l2, &s2)];
        for l in &lexicons {
            let sp = &l.spec;
            let mut morphs: Vec<&String> = sp.noun_suffix.iter().chain(&sp.verb_suffix).collect();
            morphs.sort();
            morphs.dedup();
            if morphs.len() != 6 || sp.determiner[0] == sp.determiner[1] {
                return Err(Error::config(format!("language {} has ambiguous affixes", sp.name)));
            }
        }
        Ok(SyntheticGrammar { config, lexicons })
    }

    fn sample_np(&self, rng: &mut Rng) -> Np {
        Np {
            class: rng.random_range(0..2),
            number: rng.random_range(0..2),
            stem: rng.random_range(0..self.config.nouns_per_class),
        }
    }

    fn sample_clause(&self, rng: &mut Rng) -> Clause {
        let subject = self.sample_np(rng);
        let object = (rng.random::<f64>() < self.config.transitive_fraction).then(|| self.sample_np(rng));
        Clause { subject, object, verb: rng.random_range(0..self.config.verbs) }
    }

    /// Words of a clause with optional corruptions applied to the subject's
    /// determiner class or the verb's agreement features.
    fn render(
        &self,
        lang: usize,
        c: &Clause,
        det_class: Option<usize>,
        verb_feat: Option<(usize, usize)>,
    ) -> Vec<String> {
        let lx = &self.lexicons[lang];
        let sp = &lx.spec;
        let np = |n: &Np, det: usize| {
            [sp.determiner[det].clone(), format!("{}{}", lx.nouns[n.class][n.stem], sp.noun_suffix[n.number])]
        };
        let (vc, vn) = verb_feat.unwrap_or((c.subject.class, c.subject.number));
        let verb = format!("{}{}", lx.verbs[c.verb], sp.verb_suffix[2 * vc + vn]);
        let subj = np(&c.subject, det_class.unwrap_or(c.subject.class));
        let mut words: Vec<String> = subj.to_vec();
        match (sp.order, &c.object) {
            (WordOrder::Sov, Some(o)) => {
                words.extend(np(o, o.class));
                words.push(verb);
            }
            (WordOrder::Svo, Some(o)) => {
                words.push(verb);
                words.extend(np(o, o.class));
            }
            (_, None) => words.push(verb),
        }
        words
    }

    pub fn sentence(&self, lang: usize, rng: &mut Rng) -> String {
        let c = self.sample_clause(rng);
        self.render(lang, &c, None, None).join(" ")
    }

    /// One minimal pair of the given phenomenon. In the verb-final language,
    /// subject-verb pairs come from intransitive clauses so that subject and
    /// verb are adjacent.
    pub fn minimal_pair(&self, lang: usize, ph: Phenomenon, rng: &mut Rng) -> MinimalPair {
        let mut c = self.sample_clause(rng);
        let verb_final = self.lexicons[lang].spec.order == WordOrder::Sov;
        if verb_final && ph != Phenomenon::DeterminerNounClass {
            c.object = None;
        }
        let (s_class, s_num) = (c.subject.class, c.subject.number);
        let bad = match ph {
            Phenomenon::SubjectVerbNumber => self.render(lang, &c, None, Some((s_class, 1 - s_num))),
            Phenomenon::SubjectVerbClass => self.render(lang, &c, None, Some((1 - s_class, s_num))),
            Phenomenon::DeterminerNounClass => self.render(lang, &c, Some(1 - s_class), None),
        };
        MinimalPair {
            good: self.render(lang, &c, None, None).join(" "),
            bad: bad.join(" "),
            phenomenon: ph.tag().into(),
        }
    }

    /// Splits a word into morphemes: determiners are atomic, other words are
    /// a four-letter stem plus suffix.
    pub fn segment(&self, lang: usize, word: &str) -> Vec<String> {
        let sp = &self.lexicons[lang].spec;
        if sp.determiner.iter().any(|d| d == word) || word.chars().count() <= 4 {
            return vec![word.to_string()];
        }
        let cut = word.char_indices().nth(4).map(|(i, _)| i).unwrap_or(word.len());
        vec![word[..cut].to_string(), word[cut..].to_string()]
    }

    /// Sentences per language plus minimal pairs split evenly across
    /// phenomena. Ungrammatical members never equal any corpus line.
    pub fn generate(&self, n_sentences: usize, n_pairs: usize) -> Result<SyntheticData> {
        if n_sentences == 0 {
            return Err(Error::usage("n_sentences must be at least 1"));
        }
        let mut sources = Vec::new();
        let mut pairs = Vec::new();
        for lang in 0..2 {
            let name = &self.lexicons[lang].spec.name;
            let mut r = rng::stream(self.config.seed, &["sentences", name]);
            let lines: Vec<String> = (0..n_sentences).map(|_| self.sentence(lang, &mut r)).collect();
            let mut r = rng::stream(self.config.seed, &["pairs", name]);
            let ps: Vec<MinimalPair> =
                (0..n_pairs).map(|i| self.minimal_pair(lang, Phenomenon::ALL[i % 3], &mut r)).collect();
            sources.push(CorpusSource { domain: "synthetic".into(), language: name.clone(), lines });
            pairs.push(ps);
        }
        let pairs: [Vec<MinimalPair>; 2] = [pairs.remove(0), pairs.remove(0)];
        for (lang, src) in sources.iter().enumerate() {
            let lines: HashSet<&str> = src.lines.iter().map(|s| s.as_str()).collect();
            if let Some(p) = pairs[lang].iter().find(|p| lines.contains(p.bad.as_str())) {
                return Err(Error::Numeric(format!("ungrammatical sentence {:?} occurs in the corpus", p.bad)));
            }
        }
        let mut it = sources.into_iter();
        Ok(SyntheticData { l1: it.next().expect("l1"), l2: it.next().expect("l2"), pairs })
    }

    /// Every word type the grammar can emit for a language.
    pub fn word_types(&self, lang: usize) -> HashSet<String> {
        let lx = &self.lexicons[lang];
        let sp = &lx.spec;
        let mut out: HashSet<String> = sp.determiner.iter().cloned().collect();
        for class in &lx.nouns {
            for s in class {
                for suf in &sp.noun_suffix {
                    out.insert(format!("{s}{suf}"));
                }
            }
        }
        for v in &lx.verbs {
            for suf in &sp.verb_suffix {
                out.insert(format!("{v}{suf}"));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticData {
    pub l1: CorpusSource,
    pub l2: CorpusSource,
    pub pairs: [Vec<MinimalPair>; 2],
}
