//! Synthetic tasks: the seven-template needle-in-a-haystack federation,
//! re-reference streams for long-prompt CE, and a five-domain four-choice
//! shift task.
//!
//! Prompts follow the layout
//!
//! ```text
//! <bos> filler … event … filler … event … filler
//! Question : <question> ?
//! A ) <candidate>
//! …
//! D ) <candidate>
//! Answer :
//! ```
//!
//! and are scored at the final `:`.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::trainer::Sequence;

pub const LETTERS: [char; 4] = ['A', 'B', 'C', 'D'];
pub const NL: &str = "<nl>";
pub const BOS: &str = "<bos>";
pub const PAD: &str = "<pad>";

const SPECIALS: &[&str] = &[PAD, BOS, NL, ".", ",", ":", ")", "-", "?", "'s"];
const TEMPLATE_WORDS: &[&str] = &[
    "Officer", "security", "passkey", "is", "Operational", "access", "code", "for", "device", "filed",
    "the", "registration", "report", "on", "Mission", "activation", "codeword", "State", "base",
    "increment", "decrement", "The", "secret", "Codeword", "Question", "What", "When", "did", "file",
    "final", "state", "modulo", "Answer", "Which", "word", "matches",
];
const NAMES: &[&str] = &[
    "Ada", "Bram", "Cleo", "Dov", "Esme", "Finn", "Gus", "Hana", "Ivo", "Juno", "Kai", "Lena",
];
const DEVICES: &[&str] = &[
    "Kestrel", "Falcon", "Heron", "Osprey", "Merlin", "Plover", "Raven", "Swift", "Tern", "Wren",
    "Egret", "Ibis",
];
const MISSIONS: &[&str] = &[
    "Alpha", "Beta", "Gamma", "Delta", "Epsilon", "Zeta", "Eta", "Theta", "Iota", "Kappa", "Lambda",
    "Mu",
];
const COLORS: &[&str] = &[
    "red", "blue", "green", "amber", "violet", "teal", "ivory", "coral", "olive", "azure", "ochre",
    "slate",
];
const MONTHS: &[&str] = &[
    "Jan", "Feb", "Mar", "Apr", "May", "Jun", "Jul", "Aug", "Sep", "Oct", "Nov", "Dec",
];
const PHRASE_WORDS: &[&str] = &[
    "silver", "harbor", "maple", "comet", "ember", "glacier", "lantern", "meadow", "orbit", "quartz",
    "river", "summit", "thunder", "velvet", "willow", "zephyr",
];
const FILLER: &[&str] = &[
    "a", "an", "and", "or", "but", "with", "from", "into", "over", "under", "near", "after", "before",
    "while", "city", "road", "house", "field", "stone", "light", "water", "market", "garden", "bridge",
    "tower", "valley", "forest", "village", "ship", "train", "letter", "song", "walked", "carried",
    "found", "built", "watched", "opened", "closed", "painted", "old", "small", "bright", "quiet",
    "long", "early", "green", "cold",
];
/// Domain sub-vocabulary size for the shift task.
const DOMAIN_WORDS: usize = 8;
pub const NUM_DOMAINS: usize = 5;

/// Token strings ↔ indices. The layout is fixed, so every experiment shares
/// the same vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::standard()
    }
}

impl Vocab {
    pub fn standard() -> Self {
        let mut tokens: Vec<String> = Vec::new();
        let mut push = |s: &str| tokens.push(s.to_string());
        SPECIALS.iter().for_each(|s| push(s));
        LETTERS.iter().for_each(|c| push(&c.to_string()));
        (0..10).for_each(|d| push(&d.to_string()));
        for list in [TEMPLATE_WORDS, NAMES, DEVICES, MISSIONS, MONTHS, PHRASE_WORDS, FILLER] {
            list.iter().for_each(|s| push(s));
        }
        // Colors collide with filler words ("green"), so they get a prefix.
        COLORS.iter().for_each(|s| push(&format!("key_{s}")));
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::contract(format!("token {token:?} not in vocabulary")))
    }

    fn must(&self, token: &str) -> usize {
        self.index[token]
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, words: &[&str]) -> Result<Vec<usize>> {
        words.iter().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn digit(&self, d: usize) -> usize {
        self.must(&d.to_string())
    }

    pub fn letter_ids(&self) -> [usize; 4] {
        LETTERS.map(|c| self.must(&c.to_string()))
    }

    fn pool(&self, list: &[&str]) -> Vec<usize> {
        list.iter().map(|s| self.must(s)).collect()
    }

    fn color_pool(&self) -> Vec<usize> {
        COLORS.iter().map(|s| self.must(&format!("key_{s}"))).collect()
    }

    pub fn filler_ids(&self) -> Vec<usize> {
        self.pool(FILLER)
    }
}

/// Retrieval template, one per NIAH client.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    Passkey,
    UuidCode,
    NameDate,
    PhraseCode,
    CounterState,
    MkNiah,
    MvNiah,
}

impl Template {
    pub const ALL: [Template; 7] = [
        Template::Passkey,
        Template::UuidCode,
        Template::NameDate,
        Template::PhraseCode,
        Template::CounterState,
        Template::MkNiah,
        Template::MvNiah,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Template::Passkey => "passkey",
            Template::UuidCode => "uuid_code",
            Template::NameDate => "name_date",
            Template::PhraseCode => "phrase_code",
            Template::CounterState => "counter_state",
            Template::MkNiah => "mk_niah",
            Template::MvNiah => "mv_niah",
        }
    }

    fn event_form(self) -> &'static [Slot] {
        use Slot::{Key, Payload, W};
        match self {
            Template::Passkey => &[W("Officer"), Key, W("'s"), W("security"), W("passkey"), W("is"), Payload, W(".")],
            Template::UuidCode => &[
                W("Operational"), W("access"), W("code"), W("for"), W("device"), Key, W("is"), Payload, W("."),
            ],
            Template::NameDate => &[
                W("Officer"), Key, W("filed"), W("the"), W("registration"), W("report"), W("on"), Payload, W("."),
            ],
            Template::PhraseCode => &[W("Mission"), Key, W("'s"), W("activation"), W("codeword"), W("is"), Payload, W(".")],
            Template::CounterState => &[W("State"), W("base"), Payload, W(".")],
            Template::MkNiah => &[W("The"), Key, W("secret"), W("is"), Payload, W(".")],
            Template::MvNiah => &[W("Codeword"), Key, W(":"), Payload, W(".")],
        }
    }

    fn question_form(self) -> &'static [Slot] {
        use Slot::{Key, W};
        match self {
            Template::Passkey => &[W("What"), W("is"), W("Officer"), Key, W("'s"), W("security"), W("passkey"), W("?")],
            Template::UuidCode => &[
                W("What"), W("is"), W("the"), W("access"), W("code"), W("for"), W("device"), Key, W("?"),
            ],
            Template::NameDate => &[
                W("When"), W("did"), W("Officer"), Key, W("file"), W("the"), W("registration"), W("report"), W("?"),
            ],
            Template::PhraseCode => &[W("What"), W("is"), W("Mission"), Key, W("'s"), W("activation"), W("codeword"), W("?")],
            Template::CounterState => &[
                W("What"), W("is"), W("the"), W("final"), W("state"), W("modulo"), W("8"), W("?"),
            ],
            Template::MkNiah => &[W("What"), W("is"), W("the"), Key, W("secret"), W("?")],
            Template::MvNiah => &[W("What"), W("is"), W("Codeword"), Key, W("?")],
        }
    }

    fn key_pool(self, vocab: &Vocab) -> Vec<usize> {
        match self {
            Template::Passkey | Template::NameDate => vocab.pool(NAMES),
            Template::UuidCode => vocab.pool(DEVICES),
            Template::PhraseCode => vocab.pool(MISSIONS),
            Template::MkNiah => vocab.color_pool(),
            Template::MvNiah => (1..=9).map(|d| vocab.digit(d)).collect(),
            Template::CounterState => Vec::new(),
        }
    }

    /// Tokens in one payload.
    pub fn payload_len(self, digits: usize) -> usize {
        match self {
            Template::Passkey | Template::MkNiah | Template::MvNiah => digits,
            Template::UuidCode => 3 * uuid_part(digits) + 2,
            Template::NameDate | Template::PhraseCode => 3,
            Template::CounterState => 1,
        }
    }

    fn sample_payload(self, digits: usize, vocab: &Vocab, rng: &mut Rng) -> Vec<usize> {
        let mut d = |n: usize| -> Vec<usize> { (0..n).map(|_| vocab.digit(rng.below(10))).collect() };
        match self {
            Template::Passkey | Template::MkNiah | Template::MvNiah => d(digits),
            Template::UuidCode => {
                let part = uuid_part(digits);
                let dash = vocab.must("-");
                let mut out = d(part);
                out.push(dash);
                out.extend(d(part));
                out.push(dash);
                out.extend(d(part));
                out
            }
            Template::NameDate => {
                let day = 1 + rng.below(28);
                vec![vocab.must(MONTHS[rng.below(12)]), vocab.digit(day / 10), vocab.digit(day % 10)]
            }
            Template::PhraseCode => vec![
                vocab.must(PHRASE_WORDS[rng.below(PHRASE_WORDS.len())]),
                vocab.must("-"),
                vocab.must(PHRASE_WORDS[rng.below(PHRASE_WORDS.len())]),
            ],
            Template::CounterState => vec![vocab.digit(rng.below(8))],
        }
    }

    fn render(form: &[Slot], key: Option<usize>, payload: &[usize], vocab: &Vocab) -> Vec<usize> {
        let mut out = Vec::with_capacity(form.len() + payload.len());
        for slot in form {
            match slot {
                Slot::W(w) => out.push(vocab.must(w)),
                Slot::Key => out.push(key.expect("template form needs a key")),
                Slot::Payload => out.extend_from_slice(payload),
            }
        }
        out
    }

    /// Tokens of one inserted event.
    pub fn render_event(self, key: Option<usize>, payload: &[usize], vocab: &Vocab) -> Vec<usize> {
        Self::render(self.event_form(), key, payload, vocab)
    }

    pub fn render_question(self, key: Option<usize>, vocab: &Vocab) -> Vec<usize> {
        Self::render(self.question_form(), key, &[], vocab)
    }

    fn parse(form: &[Slot], tokens: &[usize], payload_len: usize, vocab: &Vocab) -> Option<(Option<usize>, Vec<usize>, usize)> {
        let mut key = None;
        let mut payload = Vec::new();
        let mut i = 0;
        for slot in form {
            match slot {
                Slot::W(w) => {
                    if tokens.get(i) != Some(&vocab.must(w)) {
                        return None;
                    }
                    i += 1;
                }
                Slot::Key => {
                    key = Some(*tokens.get(i)?);
                    i += 1;
                }
                Slot::Payload => {
                    payload = tokens.get(i..i + payload_len)?.to_vec();
                    i += payload_len;
                }
            }
        }
        Some((key, payload, i))
    }

    /// Parses an event starting at `tokens[0]`; returns key, payload and the
    /// number of tokens consumed.
    pub fn parse_event(self, tokens: &[usize], digits: usize, vocab: &Vocab) -> Option<(Option<usize>, Vec<usize>, usize)> {
        if self == Template::CounterState {
            for change in ["increment", "decrement"] {
                let form = [Slot::W("State"), Slot::W(change), Slot::W(".")];
                if Self::parse(&form, tokens, 0, vocab).is_some() {
                    let delta = if change == "increment" { 1 } else { 7 };
                    return Some((None, vec![vocab.must(&delta.to_string())], 3));
                }
            }
        }
        Self::parse(self.event_form(), tokens, self.payload_len(digits), vocab)
    }

    pub fn parse_question(self, tokens: &[usize], vocab: &Vocab) -> Option<Option<usize>> {
        Self::parse(self.question_form(), tokens, 0, vocab).map(|(k, _, _)| k)
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Template {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Template::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::contract(format!("unknown template {s:?}")))
    }
}

fn uuid_part(digits: usize) -> usize {
    digits.div_ceil(3).max(1)
}

#[derive(Debug, Clone, Copy)]
enum Slot {
    W(&'static str),
    Key,
    Payload,
}

/// What a prompt was generated from: a retrieval template or a shift-task
/// domain. Serialized as `"passkey"`, …, `"domain_3"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum TaskKind {
    Niah(Template),
    Domain(usize),
}

impl From<TaskKind> for String {
    fn from(t: TaskKind) -> String {
        t.to_string()
    }
}

impl TryFrom<String> for TaskKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskKind::Niah(t) => f.write_str(t.as_str()),
            TaskKind::Domain(d) => write!(f, "domain_{d}"),
        }
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(d) = s.strip_prefix("domain_") {
            let d: usize = d.parse().map_err(|_| Error::contract(format!("bad domain {s:?}")))?;
            if d >= NUM_DOMAINS {
                return Err(Error::contract(format!("domain {d} out of range")));
            }
            return Ok(TaskKind::Domain(d));
        }
        Ok(TaskKind::Niah(s.parse()?))
    }
}

/// Generator knobs shared by every template.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeedleConfig {
    /// Digits in passkey, mk and mv values; uuid parts scale with it.
    #[serde(default = "default_digits")]
    pub payload_digits: usize,
    /// Events in a counter_state haystack, the base included.
    #[serde(default = "default_counter_events")]
    pub counter_events: usize,
}

fn default_digits() -> usize {
    4
}

fn default_counter_events() -> usize {
    6
}

impl Default for NeedleConfig {
    fn default() -> Self {
        Self {
            payload_digits: default_digits(),
            counter_events: default_counter_events(),
        }
    }
}

impl NeedleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.payload_digits == 0 {
            return Err(Error::Config {
                field: "data.needles.payload_digits".into(),
                message: "must be at least 1".into(),
            });
        }
        if self.counter_events < 2 {
            return Err(Error::Config {
                field: "data.needles.counter_events".into(),
                message: "must be at least 2".into(),
            });
        }
        Ok(())
    }
}

pub const DEPTH_FRACTIONS: [f64; 4] = [0.10, 0.30, 0.50, 0.70];

/// A four-choice prompt. Needle events are recovered from `tokens` at
/// `positions`, so the record is self-describing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NiahExample {
    pub client_id: usize,
    pub template: TaskKind,
    /// Haystack length in tokens: filler plus events, excluding `<bos>` and
    /// the question block.
    pub depth: usize,
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
    pub candidates: [Vec<usize>; 4],
    pub gold_letter: char,
}

/// One parsed needle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeedleEvent {
    pub position: usize,
    pub key: Option<usize>,
    pub payload: Vec<usize>,
}

impl NiahExample {
    pub fn gold_index(&self) -> usize {
        LETTERS.iter().position(|&c| c == self.gold_letter).expect("gold letter is A-D")
    }

    pub fn gold_payload(&self) -> &[usize] {
        &self.candidates[self.gold_index()]
    }

    /// Training view: loss only on the answer letter after the final `:`.
    pub fn to_sequence(&self, vocab: &Vocab) -> Sequence {
        let answer = vocab.letter_ids()[self.gold_index()];
        Sequence::answer_only(self.tokens.clone(), answer)
    }

    fn question_start(&self, vocab: &Vocab) -> Option<usize> {
        let q = vocab.must("Question");
        self.tokens.iter().rposition(|&t| t == q)
    }

    /// Re-parses the needle events from the prompt.
    pub fn events(&self, cfg: &NeedleConfig, vocab: &Vocab) -> Option<Vec<NeedleEvent>> {
        let TaskKind::Niah(template) = self.template else {
            return Some(Vec::new());
        };
        self.positions
            .iter()
            .map(|&p| {
                let (key, payload, _) = template.parse_event(self.tokens.get(p..)?, cfg.payload_digits, vocab)?;
                Some(NeedleEvent {
                    position: p,
                    key,
                    payload,
                })
            })
            .collect()
    }

    /// Replays the events through the template's answer rule. `None` when
    /// the prompt does not parse.
    pub fn replay_answer(&self, cfg: &NeedleConfig, vocab: &Vocab) -> Option<Vec<usize>> {
        let TaskKind::Niah(template) = self.template else {
            return None;
        };
        let events = self.events(cfg, vocab)?;
        let qs = self.question_start(vocab)? + 2;
        let key = template.parse_question(&self.tokens[qs..], vocab)?;
        match template {
            Template::CounterState => {
                let digit_of = |t: usize| vocab.token(t)?.parse::<usize>().ok();
                let (first, rest) = events.split_first()?;
                let mut state = digit_of(first.payload[0])?;
                for e in rest {
                    state = (state + digit_of(e.payload[0])?) % 8;
                }
                Some(vec![vocab.digit(state)])
            }
            _ => {
                let mut hits = events.iter().filter(|e| e.key == key);
                let hit = hits.next()?;
                hits.next().is_none().then(|| hit.payload.clone())
            }
        }
    }

    /// Candidate payloads that also occur verbatim in the haystack.
    pub fn candidates_in_haystack(&self, cfg: &NeedleConfig, vocab: &Vocab) -> usize {
        let Some(events) = self.events(cfg, vocab) else {
            return 0;
        };
        self.candidates
            .iter()
            .filter(|c| events.iter().any(|e| &e.payload == *c))
            .count()
    }
}

fn filler_stream(len: usize, pool: &[usize], period: usize, rng: &mut Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(len);
    while out.len() < len {
        let n = 4 + rng.below(6);
        for _ in 0..n {
            out.push(pool[rng.below(pool.len())]);
        }
        out.push(period);
    }
    out.truncate(len);
    out
}

fn distinct<T: PartialEq>(n: usize, mut sample: impl FnMut() -> T) -> Vec<T> {
    let mut out: Vec<T> = Vec::with_capacity(n);
    while out.len() < n {
        let x = sample();
        if !out.contains(&x) {
            out.push(x);
        }
    }
    out
}

fn question_block(template_q: &[usize], candidates: &[Vec<usize>; 4], vocab: &Vocab) -> Vec<usize> {
    let nl = vocab.must(NL);
    let mut out = vec![vocab.must("Question"), vocab.must(":")];
    out.extend_from_slice(template_q);
    out.push(nl);
    for (letter, cand) in vocab.letter_ids().iter().zip(candidates) {
        out.push(*letter);
        out.push(vocab.must(")"));
        out.extend_from_slice(cand);
        out.push(nl);
    }
    out.push(vocab.must("Answer"));
    out.push(vocab.must(":"));
    out
}

/// Smallest haystack that fits a template's events with some filler.
pub fn min_depth(template: Template, cfg: &NeedleConfig) -> usize {
    let events = if template == Template::CounterState {
        4 + 3 * (cfg.counter_events - 1)
    } else {
        4 * (template.event_form().len() - 1 + template.payload_len(cfg.payload_digits))
    };
    events + 10
}

/// One prompt with events at the canonical depth fractions of the filler
/// budget (counter_state spreads its events uniformly).
pub fn generate_niah(
    template: Template,
    target_depth: usize,
    cfg: &NeedleConfig,
    rng: &mut Rng,
    vocab: &Vocab,
) -> Result<NiahExample> {
    cfg.validate()?;
    let min = min_depth(template, cfg);
    if target_depth < min {
        return Err(Error::contract(format!(
            "depth {target_depth} too small for {template}: need at least {min}"
        )));
    }
    let period = vocab.must(".");

    let (events, fractions, candidates, gold, q_key): (Vec<Vec<usize>>, Vec<f64>, [Vec<usize>; 4], usize, Option<usize>) =
        if template == Template::CounterState {
            let n = cfg.counter_events;
            let base = rng.below(8);
            let changes: Vec<usize> = (1..n).map(|_| if rng.below(2) == 0 { 1 } else { 7 }).collect();
            let mut events = vec![template.render_event(None, &[vocab.digit(base)], vocab)];
            let mut partial = vec![base];
            let mut state = base;
            for &c in &changes {
                let word = if c == 1 { "increment" } else { "decrement" };
                events.push(vocab.encode(&["State", word, "."])?);
                state = (state + c) % 8;
                partial.push(state);
            }
            // Hard negatives: states the counter passed through.
            let mut pool: Vec<usize> = Vec::new();
            for &s in &partial {
                if s != state && !pool.contains(&s) {
                    pool.push(s);
                }
            }
            rng.shuffle(&mut pool);
            pool.truncate(3);
            while pool.len() < 3 {
                let s = rng.below(8);
                if s != state && !pool.contains(&s) {
                    pool.push(s);
                }
            }
            let mut states = vec![state];
            states.extend(pool);
            let mut order = [0usize, 1, 2, 3];
            rng.shuffle(&mut order);
            let candidates = order.map(|i| vec![vocab.digit(states[i])]);
            let gold = order.iter().position(|&i| i == 0).unwrap();
            let fractions = (0..n).map(|i| (i + 1) as f64 / (n + 1) as f64).collect();
            (events, fractions, candidates, gold, None)
        } else {
            let keys: Vec<usize> = if template == Template::MvNiah {
                (1..=4).map(|d| vocab.digit(d)).collect()
            } else {
                let pool = template.key_pool(vocab);
                distinct(4, || pool[rng.below(pool.len())])
            };
            let payloads = distinct(4, || template.sample_payload(cfg.payload_digits, vocab, rng));
            let events = keys
                .iter()
                .zip(&payloads)
                .map(|(&k, p)| template.render_event(Some(k), p, vocab))
                .collect();
            let target = rng.below(4);
            let mut order = [0usize, 1, 2, 3];
            rng.shuffle(&mut order);
            let candidates = order.map(|i| payloads[i].clone());
            let gold = order.iter().position(|&i| i == target).unwrap();
            (events, DEPTH_FRACTIONS.to_vec(), candidates, gold, Some(keys[target]))
        };

    let event_tokens: usize = events.iter().map(Vec::len).sum();
    let budget = target_depth - event_tokens;
    let filler = filler_stream(budget, &vocab.filler_ids(), period, rng);
    let mut tokens = vec![vocab.must(BOS)];
    let mut positions = Vec::with_capacity(events.len());
    let mut used = 0;
    for (ev, f) in events.iter().zip(&fractions) {
        let offset = ((f * budget as f64).round() as usize).max(used);
        tokens.extend_from_slice(&filler[used..offset]);
        used = offset;
        positions.push(tokens.len());
        tokens.extend_from_slice(ev);
    }
    tokens.extend_from_slice(&filler[used..]);
    let q = template.render_question(q_key, vocab);
    tokens.extend(question_block(&q, &candidates, vocab));
    Ok(NiahExample {
        client_id: 0,
        template: TaskKind::Niah(template),
        depth: target_depth,
        tokens,
        positions,
        candidates,
        gold_letter: LETTERS[gold],
    })
}

/// Five-domain shift task. Each domain owns eight filler words and a fixed
/// random successor map over them; the question shows a word and asks for
/// its successor, which also appears in a short context of domain pairs.
pub fn generate_domain_item(domain: usize, rng: &mut Rng, vocab: &Vocab) -> Result<NiahExample> {
    if domain >= NUM_DOMAINS {
        return Err(Error::contract(format!("domain {domain} out of range")));
    }
    let words: Vec<usize> = vocab.filler_ids()[domain * DOMAIN_WORDS..(domain + 1) * DOMAIN_WORDS].to_vec();
    let mut map_rng = Rng::derive(0x5eed_d0a1, &[domain as u64]);
    let mut succ: Vec<usize> = (0..DOMAIN_WORDS).collect();
    map_rng.shuffle(&mut succ);
    let period = vocab.must(".");
    let mut tokens = vec![vocab.must(BOS)];
    let mut positions = Vec::new();
    for _ in 0..6 {
        let i = rng.below(DOMAIN_WORDS);
        positions.push(tokens.len());
        tokens.extend([words[i], words[succ[i]], period]);
    }
    let qi = rng.below(DOMAIN_WORDS);
    let gold_word = words[succ[qi]];
    let others: Vec<usize> = distinct(3, || loop {
        let w = words[rng.below(DOMAIN_WORDS)];
        if w != gold_word {
            break w;
        }
    });
    let mut all = vec![gold_word];
    all.extend(others);
    let mut order = [0usize, 1, 2, 3];
    rng.shuffle(&mut order);
    let candidates = order.map(|i| vec![all[i]]);
    let gold = order.iter().position(|&i| i == 0).unwrap();
    let depth = tokens.len() - 1;
    let q = vocab.encode(&["Which", "word", "matches"])?;
    let mut q = q;
    q.push(words[qi]);
    q.push(vocab.must("?"));
    tokens.extend(question_block(&q, &candidates, vocab));
    Ok(NiahExample {
        client_id: 0,
        template: TaskKind::Domain(domain),
        depth,
        tokens,
        positions,
        candidates,
        gold_letter: LETTERS[gold],
    })
}

/// Restricted argmax over the four letter logits; ties go to the earlier
/// letter.
pub fn score_answer(logits: &[f64], vocab: &Vocab) -> char {
    let ids = vocab.letter_ids();
    let mut best = 0;
    for i in 1..4 {
        if logits[ids[i]] > logits[ids[best]] {
            best = i;
        }
    }
    LETTERS[best]
}

/// Federation data layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetsConfig {
    /// One client per entry.
    pub tasks: Vec<TaskKind>,
    pub train_per_client: usize,
    pub eval_per_client: usize,
    /// Haystack depths used for training items, cycled.
    pub train_depths: Vec<usize>,
    pub eval_depths: Vec<usize>,
    #[serde(default)]
    pub needles: NeedleConfig,
}

impl DatasetsConfig {
    pub fn niah(train: usize, eval: usize, train_depths: Vec<usize>, eval_depths: Vec<usize>) -> Self {
        Self {
            tasks: Template::ALL.iter().map(|&t| TaskKind::Niah(t)).collect(),
            train_per_client: train,
            eval_per_client: eval,
            train_depths,
            eval_depths,
            needles: NeedleConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(Error::Config {
                field: format!("data.{field}"),
                message: message.into(),
            })
        };
        if self.tasks.is_empty() {
            return bad("tasks", "at least one client task required");
        }
        if self.train_per_client == 0 {
            return bad("train_per_client", "must be positive");
        }
        if self.eval_per_client == 0 {
            return bad("eval_per_client", "must be positive");
        }
        if self.train_depths.is_empty() {
            return bad("train_depths", "must not be empty");
        }
        if self.eval_depths.is_empty() {
            return bad("eval_depths", "must not be empty");
        }
        self.needles.validate()?;
        for &t in &self.tasks {
            if let TaskKind::Niah(template) = t {
                let min = min_depth(template, &self.needles);
                if let Some(&d) = self.train_depths.iter().chain(&self.eval_depths).find(|&&d| d < min) {
                    return bad("train_depths", &format!("depth {d} below minimum {min} for {template}"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub client_id: usize,
    pub task: TaskKind,
    pub train: Vec<NiahExample>,
    pub eval: Vec<NiahExample>,
}

impl ClientDataset {
    /// Aggregation weight `N_k`.
    pub fn weight(&self) -> usize {
        self.train.len()
    }
}

fn generate_item(task: TaskKind, depth: usize, cfg: &NeedleConfig, rng: &mut Rng, vocab: &Vocab) -> Result<NiahExample> {
    match task {
        TaskKind::Niah(t) => generate_niah(t, depth, cfg, rng, vocab),
        TaskKind::Domain(d) => generate_domain_item(d, rng, vocab),
    }
}

/// One client per configured task. Each item draws from its own substream
/// `(seed, client, split, index)`; eval items are balanced over the depth
/// grid and never repeat a prompt seen anywhere else.
pub fn build_federation(cfg: &DatasetsConfig, seed: u64, vocab: &Vocab) -> Result<Vec<ClientDataset>> {
    cfg.validate()?;
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut clients = Vec::with_capacity(cfg.tasks.len());
    for (k, &task) in cfg.tasks.iter().enumerate() {
        let mut train = Vec::with_capacity(cfg.train_per_client);
        for i in 0..cfg.train_per_client {
            let depth = cfg.train_depths[i % cfg.train_depths.len()];
            let mut rng = Rng::derive(seed, &[k as u64, 0, i as u64]);
            let mut ex = generate_item(task, depth, &cfg.needles, &mut rng, vocab)?;
            ex.client_id = k;
            seen.insert(ex.tokens.clone());
            train.push(ex);
        }
        clients.push(ClientDataset {
            client_id: k,
            task,
            train,
            eval: Vec::new(),
        });
    }
    for (k, client) in clients.iter_mut().enumerate() {
        for i in 0..cfg.eval_per_client {
            let depth = cfg.eval_depths[i % cfg.eval_depths.len()];
            let mut attempt = 0u64;
            let ex = loop {
                let mut rng = Rng::derive(seed, &[k as u64, 1, i as u64, attempt]);
                let mut ex = generate_item(client.task, depth, &cfg.needles, &mut rng, vocab)?;
                ex.client_id = k;
                if seen.insert(ex.tokens.clone()) {
                    break ex;
                }
                attempt += 1;
                if attempt > 1000 {
                    return Err(Error::contract(format!("client {k}: cannot draw a fresh eval prompt")));
                }
            };
            client.eval.push(ex);
        }
    }
    Ok(clients)
}

/// Long prompt whose later bins re-reference earlier needles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    pub template: Template,
    pub length: usize,
    #[serde(default = "default_bin")]
    pub bin_size: usize,
    /// Distinct keys introduced in the first bin.
    #[serde(default = "default_keys")]
    pub keys: usize,
    /// Re-references inserted in every bin after the first.
    #[serde(default = "default_refs")]
    pub refs_per_bin: usize,
    /// Chance that a re-reference rebinds its key to a fresh payload.
    #[serde(default)]
    pub overwrite_prob: f64,
    #[serde(default)]
    pub needles: NeedleConfig,
}

fn default_bin() -> usize {
    128
}

fn default_keys() -> usize {
    4
}

fn default_refs() -> usize {
    2
}

impl StreamConfig {
    pub fn new(template: Template, length: usize) -> Self {
        Self {
            template,
            length,
            bin_size: default_bin(),
            keys: default_keys(),
            refs_per_bin: default_refs(),
            overwrite_prob: 0.0,
            needles: NeedleConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| {
            Err(Error::Config {
                field: format!("stream.{field}"),
                message,
            })
        };
        if self.template == Template::CounterState {
            return bad("template", "counter_state has no keyed payloads to re-reference".into());
        }
        if self.bin_size == 0 {
            return bad("bin_size", "must be positive".into());
        }
        if self.length < 2 * self.bin_size {
            return bad("length", format!("{} is shorter than two bins of {}", self.length, self.bin_size));
        }
        let pool = match self.template {
            Template::MvNiah => 9,
            Template::Passkey | Template::NameDate => NAMES.len(),
            _ => 12,
        };
        if self.keys == 0 || self.keys > pool {
            return bad("keys", format!("must be in 1..={pool}"));
        }
        if !(0.0..=1.0).contains(&self.overwrite_prob) {
            return bad("overwrite_prob", "must be in [0, 1]".into());
        }
        let ev = self.template.event_form().len() - 1 + self.template.payload_len(self.needles.payload_digits);
        if self.keys * ev > self.bin_size || self.refs_per_bin * ev > self.bin_size {
            return bad("bin_size", format!("{} cannot hold the events of one bin", self.bin_size));
        }
        self.needles.validate()
    }
}

/// Token stream with per-position flags. Position `t` is the prediction of
/// `tokens[t]` from the prefix before it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamSequence {
    pub tokens: Vec<usize>,
    /// Positions that count towards CE: event tokens. Filler words are
    /// independent draws and carry no learnable signal.
    pub eligible: Vec<bool>,
    /// Payload tokens of a re-reference that repeats the key's current
    /// binding: predictable only from earlier context.
    pub advantaged: Vec<bool>,
    pub bin_size: usize,
}

impl StreamSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn bins(&self) -> Vec<Range<usize>> {
        (0..self.len())
            .step_by(self.bin_size)
            .map(|s| s..(s + self.bin_size).min(self.len()))
            .collect()
    }

    /// Next-token view: input `tokens[..n−1]`, targets `tokens[1..]`.
    pub fn to_sequence(&self) -> Sequence {
        let n = self.len();
        Sequence {
            tokens: self.tokens[..n - 1].to_vec(),
            targets: self.tokens[1..].to_vec(),
            mask: self.eligible[1..].to_vec(),
        }
    }
}

pub fn streaming_sequence(cfg: &StreamConfig, rng: &mut Rng, vocab: &Vocab) -> Result<StreamSequence> {
    cfg.validate()?;
    let t = cfg.template;
    let digits = cfg.needles.payload_digits;
    let period = vocab.must(".");
    let filler = vocab.filler_ids();
    let keys: Vec<usize> = if t == Template::MvNiah {
        (1..=cfg.keys).map(|d| vocab.digit(d)).collect()
    } else {
        let pool = t.key_pool(vocab);
        distinct(cfg.keys, || pool[rng.below(pool.len())])
    };
    let mut binding: Vec<Vec<usize>> = distinct(cfg.keys, || t.sample_payload(digits, vocab, rng));
    let payload_offset = t.event_form().iter().position(|s| matches!(s, Slot::Payload)).unwrap();
    let prefix_len = |key: usize| t.render_event(Some(key), &[], vocab).len() - (t.event_form().len() - 1 - payload_offset);

    let mut tokens = vec![vocab.must(BOS)];
    let mut advantaged = vec![false];
    let mut eligible = vec![false];
    let nbins = cfg.length.div_ceil(cfg.bin_size);
    for b in 0..nbins {
        let end = ((b + 1) * cfg.bin_size).min(cfg.length);
        let room = end - tokens.len();
        // (key index, overwrite?) events for this bin.
        // The first bin introduces every key, then tops up with re-references
        // so that all bins carry the same number of events.
        let plan: Vec<(usize, bool)> = if b == 0 {
            (0..cfg.keys.max(cfg.refs_per_bin))
                .map(|i| (if i < cfg.keys { i } else { rng.below(cfg.keys) }, false))
                .collect()
        } else {
            (0..cfg.refs_per_bin)
                .map(|_| (rng.below(cfg.keys), rng.uniform() < cfg.overwrite_prob))
                .collect()
        };
        let mut rendered = Vec::new();
        for (j, &(i, overwrite)) in plan.iter().enumerate() {
            if overwrite {
                let old = binding[i].clone();
                binding[i] = loop {
                    let p = t.sample_payload(digits, vocab, rng);
                    if p != old {
                        break p;
                    }
                };
            }
            let ev = t.render_event(Some(keys[i]), &binding[i], vocab);
            let start = prefix_len(keys[i]);
            let mut flags = vec![false; ev.len()];
            if (b > 0 || j >= cfg.keys) && !overwrite {
                for f in &mut flags[start..start + binding[i].len()] {
                    *f = true;
                }
            }
            rendered.push((ev, flags));
        }
        let ev_len: usize = rendered.iter().map(|(e, _)| e.len()).sum();
        let budget = room.saturating_sub(ev_len);
        let fill = filler_stream(budget, &filler, period, rng);
        let mut cuts: Vec<usize> = (0..rendered.len()).map(|_| rng.below(budget + 1)).collect();
        cuts.sort_unstable();
        let mut used = 0;
        for ((ev, flags), cut) in rendered.into_iter().zip(cuts) {
            tokens.extend_from_slice(&fill[used..cut]);
            advantaged.extend(std::iter::repeat_n(false, cut - used));
            eligible.extend(std::iter::repeat_n(false, cut - used));
            used = cut;
            eligible.extend(std::iter::repeat_n(true, ev.len()));
            tokens.extend(ev);
            advantaged.extend(flags);
        }
        tokens.extend_from_slice(&fill[used..]);
        advantaged.extend(std::iter::repeat_n(false, budget - used));
        eligible.extend(std::iter::repeat_n(false, budget - used));
    }
    tokens.truncate(cfg.length);
    advantaged.truncate(cfg.length);
    eligible.truncate(cfg.length);
    eligible[0] = false;
    Ok(StreamSequence {
        tokens,
        eligible,
        advantaged,
        bin_size: cfg.bin_size,
    })
}

/// Streaming-task federation: one stream configuration per client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamTaskConfig {
    pub clients: Vec<StreamConfig>,
    pub train_per_client: usize,
    pub eval_per_client: usize,
}

impl StreamTaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients.is_empty() {
            return Err(Error::Config {
                field: "streams.clients".into(),
                message: "at least one client stream required".into(),
            });
        }
        for (field, n) in [("train_per_client", self.train_per_client), ("eval_per_client", self.eval_per_client)] {
            if n == 0 {
                return Err(Error::Config {
                    field: format!("streams.{field}"),
                    message: "must be positive".into(),
                });
            }
        }
        self.clients.iter().try_for_each(StreamConfig::validate)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamClient {
    pub client_id: usize,
    pub config: StreamConfig,
    pub train: Vec<StreamSequence>,
    pub eval: Vec<StreamSequence>,
}

/// Streams drawn from `(seed, client, split, index)`, split 2 for training
/// and 3 for evaluation so they never share a substream with NIAH items.
pub fn build_stream_federation(cfg: &StreamTaskConfig, seed: u64, vocab: &Vocab) -> Result<Vec<StreamClient>> {
    cfg.validate()?;
    let draw = |k: usize, sc: &StreamConfig, split: u64, n: usize| -> Result<Vec<StreamSequence>> {
        (0..n)
            .map(|i| streaming_sequence(sc, &mut Rng::derive(seed, &[k as u64, split, i as u64]), vocab))
            .collect()
    };
    cfg.clients
        .iter()
        .enumerate()
        .map(|(k, sc)| {
            Ok(StreamClient {
                client_id: k,
                config: sc.clone(),
                train: draw(k, sc, 2, cfg.train_per_client)?,
                eval: draw(k, sc, 3, cfg.eval_per_client)?,
            })
        })
        .collect()
}

/// Writes one JSON record per line.
pub fn write_jsonl<T: Serialize>(items: &[T], mut w: impl Write) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io("<jsonl>", e))?;
    }
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(r: impl BufRead) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<jsonl>", e))?;
        if line.is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            what: "jsonl",
            message: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::standard()
    }

    #[test]
    fn vocab_is_bijective() {
        let v = vocab();
        for i in 0..v.len() {
            assert_eq!(v.id(v.token(i).unwrap()).unwrap(), i);
        }
        assert!(v.len() < 200, "{}", v.len());
        assert!(v.id("nope").is_err());
    }

    #[test]
    fn events_round_trip_through_parse() {
        let v = vocab();
        let cfg = NeedleConfig::default();
        let mut rng = Rng::new(1);
        for t in Template::ALL {
            if t == Template::CounterState {
                continue;
            }
            for _ in 0..50 {
                let key = *rng.choose(&t.key_pool(&v));
                let p = t.sample_payload(cfg.payload_digits, &v, &mut rng);
                let ev = t.render_event(Some(key), &p, &v);
                let (k, got, n) = t.parse_event(&ev, cfg.payload_digits, &v).unwrap();
                assert_eq!((k, got, n), (Some(key), p, ev.len()));
            }
        }
    }

    #[test]
    fn regeneration_is_identical() {
        let v = vocab();
        let cfg = NeedleConfig::default();
        for t in Template::ALL {
            let a = generate_niah(t, 256, &cfg, &mut Rng::new(9), &v).unwrap();
            let b = generate_niah(t, 256, &cfg, &mut Rng::new(9), &v).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.tokens.len() - 1 - question_len(&a, &v), 256);
        }
    }

    fn question_len(ex: &NiahExample, v: &Vocab) -> usize {
        ex.tokens.len() - ex.question_start(v).unwrap()
    }

    #[test]
    fn depth_fractions_are_canonical() {
        let v = vocab();
        let cfg = NeedleConfig::default();
        for t in [Template::Passkey, Template::MkNiah, Template::UuidCode] {
            for depth in [128, 256, 777] {
                let ex = generate_niah(t, depth, &cfg, &mut Rng::new(depth as u64), &v).unwrap();
                let ev_len = t.event_form().len() - 1 + t.payload_len(cfg.payload_digits);
                let budget = depth - 4 * ev_len;
                for (i, &p) in ex.positions.iter().enumerate() {
                    let filler_before = p - 1 - i * ev_len;
                    let f = filler_before as f64 / budget as f64;
                    assert!((f - DEPTH_FRACTIONS[i]).abs() <= 1.0 / budget as f64, "{t} {depth} {i} {f}");
                }
            }
        }
    }

    #[test]
    fn too_shallow_is_rejected() {
        let v = vocab();
        let cfg = NeedleConfig::default();
        assert!(generate_niah(Template::Passkey, 20, &cfg, &mut Rng::new(0), &v).is_err());
    }

    #[test]
    fn counter_replay_by_hand() {
        let v = vocab();
        let cfg = NeedleConfig::default();
        let mut ex = generate_niah(Template::CounterState, 200, &cfg, &mut Rng::new(3), &v).unwrap();
        // Overwrite the six events with base 5 and (+1, +1, −1, +1, +1).
        let words = [["State", "base", "5", "."].as_slice(), &["State", "increment", "."], &["State", "increment", "."], &["State", "decrement", "."], &["State", "increment", "."], &["State", "increment", "."]];
        for (p, w) in ex.positions.clone().iter().zip(words) {
            let ids = v.encode(w).unwrap();
            let old = Template::CounterState.parse_event(&ex.tokens[*p..], 4, &v).unwrap().2;
            assert_eq!(old, ids.len());
            ex.tokens.splice(*p..*p + old, ids);
        }
        assert_eq!(ex.replay_answer(&cfg, &v).unwrap(), vec![v.digit(0)]);
    }

    #[test]
    fn fuzzed_examples_are_answerable() {
        let v = vocab();
        let cfg = NeedleConfig::default();
        for t in Template::ALL {
            let mut counts = [0usize; 4];
            for i in 0..400 {
                let depth = min_depth(t, &cfg) + (i * 7) % 300;
                let ex = generate_niah(t, depth, &cfg, &mut Rng::derive(11, &[i as u64]), &v).unwrap();
                assert_eq!(ex.replay_answer(&cfg, &v).as_deref(), Some(ex.gold_payload()), "{t} #{i}");
                assert!(ex.positions.iter().all(|&p| p < ex.tokens.len()));
                counts[ex.gold_index()] += 1;
                if t != Template::CounterState {
                    assert_eq!(ex.candidates_in_haystack(&cfg, &v), 4);
                }
            }
            assert!(counts.iter().all(|&c| c > 60), "{t} {counts:?}");
        }
    }

    #[test]
    fn score_answer_cases() {
        let v = vocab();
        let ids = v.letter_ids();
        let mut logits = vec![0.0; v.len()];
        logits[ids[2]] = 5.0;
        assert_eq!(score_answer(&logits, &v), 'C');
        let tie = vec![1.0; v.len()];
        assert_eq!(score_answer(&tie, &v), 'A');
        let mut rng = Rng::new(4);
        for _ in 0..200 {
            let logits: Vec<f64> = (0..v.len()).map(|_| rng.normal()).collect();
            let (mut best, mut bv) = (0, f64::NEG_INFINITY);
            for (i, &id) in ids.iter().enumerate() {
                if logits[id] > bv {
                    bv = logits[id];
                    best = i;
                }
            }
            assert_eq!(score_answer(&logits, &v), LETTERS[best]);
        }
    }

    #[test]
    fn federation_layout() {
        let v = vocab();
        let cfg = DatasetsConfig::niah(40, 6, vec![128], vec![256, 512, 1024]);
        let fed = build_federation(&cfg, 5, &v).unwrap();
        assert_eq!(fed.len(), 7);
        let mut prompts = HashSet::new();
        for c in &fed {
            assert_eq!(c.weight(), 40);
            for d in [256, 512, 1024] {
                assert_eq!(c.eval.iter().filter(|e| e.depth == d).count(), 2);
            }
            assert!(c.train.iter().chain(&c.eval).all(|e| e.template == c.task && e.client_id == c.client_id));
            for e in &c.eval {
                assert!(prompts.insert(e.tokens.clone()));
            }
        }
    }

    #[test]
    fn jsonl_reload_is_byte_exact() {
        let v = vocab();
        let cfg = DatasetsConfig::niah(3, 2, vec![100], vec![120]);
        let fed = build_federation(&cfg, 1, &v).unwrap();
        let items: Vec<NiahExample> = fed.iter().flat_map(|c| c.train.clone()).collect();
        let mut buf = Vec::new();
        write_jsonl(&items, &mut buf).unwrap();
        let back: Vec<NiahExample> = read_jsonl(&buf[..]).unwrap();
        assert_eq!(back, items);
        let mut again = Vec::new();
        write_jsonl(&back, &mut again).unwrap();
        assert_eq!(buf, again);
        let first = std::str::from_utf8(&buf).unwrap().lines().next().unwrap();
        for field in ["client_id", "template", "depth", "tokens", "positions", "candidates", "gold_letter"] {
            assert!(first.contains(&format!("\"{field}\"")));
        }
    }

    #[test]
    fn stream_bins_and_refs() {
        let v = vocab();
        let mut cfg = StreamConfig::new(Template::Passkey, 640);
        let s = streaming_sequence(&cfg, &mut Rng::new(2), &v).unwrap();
        assert_eq!(s.len(), 640);
        assert_eq!(s.bins().iter().map(|b| b.len()).sum::<usize>(), 640);
        for bin in &s.bins()[1..] {
            assert!(s.advantaged[bin.clone()].iter().any(|&f| f));
        }
        assert!(!s.advantaged[s.bins()[0].clone()].iter().any(|&f| f));
        cfg.refs_per_bin = 0;
        let z = streaming_sequence(&cfg, &mut Rng::new(2), &v).unwrap();
        assert!(z.advantaged.iter().all(|&f| !f));
        cfg.length = 200;
        assert!(streaming_sequence(&cfg, &mut Rng::new(2), &v).is_err());
    }

    #[test]
    fn domain_items_are_consistent() {
        let v = vocab();
        let mut rng = Rng::new(6);
        for d in 0..NUM_DOMAINS {
            let a = generate_domain_item(d, &mut rng, &v).unwrap();
            let b = generate_domain_item(d, &mut rng, &v).unwrap();
            // Same domain, same successor map.
            for ex in [&a, &b] {
                assert_eq!(ex.template, TaskKind::Domain(d));
                for &p in &ex.positions {
                    assert_eq!(ex.tokens[p + 2], v.id(".").unwrap());
                }
            }
        }
        assert!(generate_domain_item(NUM_DOMAINS, &mut rng, &v).is_err());
    }
}
