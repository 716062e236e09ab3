//! Byte-pair-encoding subword segmentation.
//!
//! Words are split into characters plus an end-of-word marker `</w>`; learned
//! merges join the most frequent adjacent pair, ties going to the
//! lexicographically smallest `(left, right)`. Encoded output marks every
//! non-final unit with a trailing `@@`.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::vocab::Vocabulary;

pub const END_OF_WORD: &str = "</w>";
pub const CONTINUATION: &str = "@@";
const HEADER: &str = "#version: s2s-bpe-1";

/// Learned merges in priority order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MergeTable {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

impl MergeTable {
    pub fn from_pairs(pairs: Vec<(String, String)>) -> Result<Self> {
        let mut ranks = HashMap::with_capacity(pairs.len());
        for (i, p) in pairs.iter().enumerate() {
            if ranks.insert(p.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate merge `{} {}`", p.0, p.1)));
            }
        }
        Ok(MergeTable { merges: pairs, ranks })
    }

    pub fn len(&self) -> usize {
        self.merges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.merges.is_empty()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Segment one word into subword units.
    pub fn apply(&self, word: &str) -> Vec<String> {
        let mut symbols: Vec<String> = word.chars().map(String::from).collect();
        if symbols.is_empty() {
            return Vec::new();
        }
        symbols.push(END_OF_WORD.to_string());

        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())))
                .min()
                .copied();
            let Some(rank) = best else { break };
            let (left, right) = &self.merges[rank];
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && &symbols[i] == left && &symbols[i + 1] == right {
                    merged.push(format!("{left}{right}"));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut symbols[i]));
                    i += 1;
                }
            }
            symbols = merged;
        }
        render(symbols)
    }

    /// Segment a whitespace-tokenized line.
    pub fn apply_line(&self, line: &str) -> Vec<String> {
        line.split_whitespace().flat_map(|w| self.apply(w)).collect()
    }

    pub fn apply_lines(&self, lines: &[String], exec: Exec) -> Vec<Vec<String>> {
        exec.map(lines, |l| self.apply_line(l))
    }

    /// Every unit `apply` can emit for words over `alphabet`: each character
    /// and merged symbol in both its continuation and final form.
    pub fn vocabulary<'a>(&self, alphabet: impl IntoIterator<Item = &'a char>) -> Vocabulary {
        let mut forms = BTreeSet::new();
        let symbols = alphabet
            .into_iter()
            .map(|c| c.to_string())
            .chain(self.merges.iter().map(|(l, r)| format!("{l}{r}")));
        for s in symbols {
            match s.strip_suffix(END_OF_WORD) {
                Some("") => {}
                Some(stem) => {
                    forms.insert(stem.to_string());
                }
                None => {
                    forms.insert(format!("{s}{CONTINUATION}"));
                    forms.insert(s);
                }
            }
        }
        Vocabulary::new(forms)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "{HEADER}")?;
        for (l, r) in &self.merges {
            writeln!(out, "{l} {r}")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines().enumerate();
        let err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        match lines.next() {
            Some((_, h)) if h == HEADER => {}
            _ => return Err(err(1, format!("missing `{HEADER}` header"))),
        }
        let mut pairs = Vec::new();
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => {
                    pairs.push((l.to_string(), r.to_string()))
                }
                _ => return Err(err(i + 1, format!("expected `left right`, got `{line}`"))),
            }
        }
        Self::from_pairs(pairs)
    }
}

fn render(mut symbols: Vec<String>) -> Vec<String> {
    if symbols.last().is_some_and(|s| s == END_OF_WORD) {
        symbols.pop();
    } else if let Some(last) = symbols.last_mut() {
        last.truncate(last.len() - END_OF_WORD.len());
    }
    let n = symbols.len();
    for s in &mut symbols[..n.saturating_sub(1)] {
        s.push_str(CONTINUATION);
    }
    symbols
}

/// Rejoin `@@`-marked units into words.
pub fn debpe<S: AsRef<str>>(tokens: &[S]) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    for t in tokens {
        let t = t.as_ref();
        match t.strip_suffix(CONTINUATION) {
            Some(stem) => current.push_str(stem),
            None => {
                current.push_str(t);
                words.push(std::mem::take(&mut current));
            }
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

pub fn debpe_line(line: &str) -> String {
    let tokens: Vec<&str> = line.split_whitespace().collect();
    debpe(&tokens).join(" ")
}

/// Word frequencies over whitespace-tokenized lines.
pub fn word_counts<S: AsRef<str>>(lines: &[S]) -> BTreeMap<String, u64> {
    let mut counts = BTreeMap::new();
    for line in lines {
        for w in line.as_ref().split_whitespace() {
            *counts.entry(w.to_string()).or_insert(0) += 1;
        }
    }
    counts
}

/// Characters occurring in any word.
pub fn alphabet(counts: &BTreeMap<String, u64>) -> BTreeSet<char> {
    counts.keys().flat_map(|w| w.chars()).collect()
}

#[derive(PartialEq, Eq)]
struct Candidate {
    count: u64,
    left: String,
    right: String,
}

impl Ord for Candidate {
    // Max-heap: higher count first, then the lexicographically smaller pair.
    fn cmp(&self, other: &Self) -> Ordering {
        self.count
            .cmp(&other.count)
            .then_with(|| other.left.cmp(&self.left))
            .then_with(|| other.right.cmp(&self.right))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

type Pair = (u32, u32);

struct Learner {
    names: Vec<String>,
    lookup: HashMap<String, u32>,
    words: Vec<(Vec<u32>, u64)>,
    counts: HashMap<Pair, u64>,
    occurs_in: HashMap<Pair, BTreeSet<usize>>,
    heap: BinaryHeap<Candidate>,
}

impl Learner {
    fn intern(&mut self, s: &str) -> u32 {
        if let Some(&id) = self.lookup.get(s) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(s.to_string());
        self.lookup.insert(s.to_string(), id);
        id
    }

    fn push(&mut self, pair: Pair) {
        let count = self.counts.get(&pair).copied().unwrap_or(0);
        if count > 0 {
            self.heap.push(Candidate {
                count,
                left: self.names[pair.0 as usize].clone(),
                right: self.names[pair.1 as usize].clone(),
            });
        }
    }

    fn pop_best(&mut self) -> Option<(Pair, u64)> {
        while let Some(c) = self.heap.pop() {
            let pair = (self.lookup[&c.left], self.lookup[&c.right]);
            if self.counts.get(&pair) == Some(&c.count) {
                return Some((pair, c.count));
            }
        }
        None
    }

    fn merge(&mut self, pair: Pair) {
        let joined = format!("{}{}", self.names[pair.0 as usize], self.names[pair.1 as usize]);
        let new_sym = self.intern(&joined);
        let affected: Vec<usize> = self.occurs_in.remove(&pair).unwrap_or_default().into_iter().collect();
        let mut touched = BTreeSet::new();
        for w in affected {
            let (old, freq) = self.words[w].clone();
            let mut new = Vec::with_capacity(old.len());
            let mut i = 0;
            while i < old.len() {
                if i + 1 < old.len() && (old[i], old[i + 1]) == pair {
                    new.push(new_sym);
                    i += 2;
                } else {
                    new.push(old[i]);
                    i += 1;
                }
            }
            if new.len() == old.len() {
                continue;
            }
            for p in old.windows(2) {
                let key = (p[0], p[1]);
                let c = self.counts.get_mut(&key).expect("pair was counted");
                *c -= freq;
                touched.insert(key);
            }
            for p in new.windows(2) {
                let key = (p[0], p[1]);
                *self.counts.entry(key).or_insert(0) += freq;
                self.occurs_in.entry(key).or_default().insert(w);
                touched.insert(key);
            }
            self.words[w].0 = new;
        }
        self.counts.remove(&pair);
        for key in touched {
            self.push(key);
        }
    }
}

/// Learn up to `num_merges` merges from word frequencies. Stops early once no
/// pair occurs at least twice.
pub fn learn_bpe(word_counts: &BTreeMap<String, u64>, num_merges: usize) -> Result<MergeTable> {
    if word_counts.is_empty() || word_counts.values().all(|&c| c == 0) {
        return Err(Error::Empty("BPE training corpus"));
    }
    let mut learner = Learner {
        names: Vec::new(),
        lookup: HashMap::new(),
        words: Vec::new(),
        counts: HashMap::new(),
        occurs_in: HashMap::new(),
        heap: BinaryHeap::new(),
    };
    for (word, &freq) in word_counts {
        if word.is_empty() || freq == 0 {
            continue;
        }
        let mut symbols: Vec<u32> = word.chars().map(|c| learner.intern(&c.to_string())).collect();
        symbols.push(learner.intern(END_OF_WORD));
        let idx = learner.words.len();
        for p in symbols.windows(2) {
            *learner.counts.entry((p[0], p[1])).or_insert(0) += freq;
            learner.occurs_in.entry((p[0], p[1])).or_default().insert(idx);
        }
        learner.words.push((symbols, freq));
    }
    let pairs: Vec<Pair> = learner.counts.keys().copied().collect();
    for p in pairs {
        learner.push(p);
    }

    let mut merges = Vec::with_capacity(num_merges);
    while merges.len() < num_merges {
        let Some((pair, count)) = learner.pop_best() else { break };
        if count < 2 {
            break;
        }
        merges.push((
            learner.names[pair.0 as usize].clone(),
            learner.names[pair.1 as usize].clone(),
        ));
        learner.merge(pair);
    }
    MergeTable::from_pairs(merges)
}
