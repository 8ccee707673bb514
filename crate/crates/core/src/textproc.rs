//! Arabic text handling: diacritic stripping, the 15-class label inventory,
//! positional re-insertion and character vocabulary.

use std::collections::HashMap;
use std::fmt;
use std::ops::Range;

use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

pub const FATHATAN: char = '\u{064B}';
pub const DAMMATAN: char = '\u{064C}';
pub const KASRATAN: char = '\u{064D}';
pub const FATHA: char = '\u{064E}';
pub const DAMMA: char = '\u{064F}';
pub const KASRA: char = '\u{0650}';
pub const SHADDA: char = '\u{0651}';
pub const SUKUN: char = '\u{0652}';

pub const NUM_CLASSES: usize = 15;

/// One of the eight labelled combining marks U+064B–U+0652.
pub fn is_mark(c: char) -> bool {
    ('\u{064B}'..='\u{0652}').contains(&c)
}

pub fn is_arabic_letter(c: char) -> bool {
    matches!(c,
        '\u{0621}'..='\u{063A}'
        | '\u{0641}'..='\u{064A}'
        | '\u{0671}'
        | '\u{067E}'
        | '\u{0686}'
        | '\u{06A4}'
        | '\u{06A9}'
        | '\u{06AF}'
        | '\u{06CC}')
}

/// Characters kept as plain text that may sit between a letter and its marks
/// (tatweel, dagger alif, maddah/hamza above/below).
fn is_transparent(c: char) -> bool {
    matches!(c, '\u{0640}' | '\u{0670}' | '\u{0653}'..='\u{0655}')
}

/// NFC normalization applied to every text on ingest.
pub fn normalize(text: &str) -> String {
    text.nfc().collect()
}

/// Diacritic label of one letter. Class 0 is "no diacritic"; 1–7 are the single
/// marks; 8–14 are shadda alone and shadda combined with a vowel or tanween.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DiacriticClass(u8);

const CLASS_MARKS: [&[char]; NUM_CLASSES] = [
    &[],
    &[FATHA],
    &[DAMMA],
    &[KASRA],
    &[SUKUN],
    &[FATHATAN],
    &[DAMMATAN],
    &[KASRATAN],
    &[SHADDA],
    &[SHADDA, FATHA],
    &[SHADDA, DAMMA],
    &[SHADDA, KASRA],
    &[SHADDA, FATHATAN],
    &[SHADDA, DAMMATAN],
    &[SHADDA, KASRATAN],
];

impl DiacriticClass {
    pub const NONE: Self = Self(0);

    pub fn new(id: usize) -> Option<Self> {
        (id < NUM_CLASSES).then_some(Self(id as u8))
    }

    pub fn id(self) -> usize {
        self.0 as usize
    }

    pub fn all() -> impl Iterator<Item = Self> {
        (0..NUM_CLASSES as u8).map(Self)
    }

    /// Canonical mark sequence, shadda first.
    pub fn marks(self) -> &'static [char] {
        CLASS_MARKS[self.0 as usize]
    }

    /// Class of an unordered run of marks; `None` if the combination is not
    /// one of the 15 (two vowels, a repeated mark, shadda with sukun).
    pub fn from_marks(marks: &[char]) -> Option<Self> {
        let shadda = marks.iter().filter(|&&m| m == SHADDA).count();
        let vowels: Vec<char> = marks.iter().copied().filter(|&m| m != SHADDA).collect();
        if shadda > 1 || vowels.len() > 1 {
            return None;
        }
        let vowel_class = match vowels.first() {
            None => 0,
            Some(&v) => 1 + CLASS_MARKS[1..8].iter().position(|m| m[0] == v)?,
        };
        match (shadda, vowel_class) {
            (0, v) => Some(Self(v as u8)),
            (_, 0) => Some(Self(8)),
            (_, 4) => None,
            (_, v) if v < 4 => Some(Self(8 + v as u8)),
            (_, v) => Some(Self(7 + v as u8)),
        }
    }
}

impl fmt::Display for DiacriticClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub fn strip_diacritics(text: &str) -> String {
    text.chars().filter(|&c| !is_mark(c)).collect()
}

/// A whitespace-delimited run of characters containing at least one Arabic letter.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Word {
    /// Character span within the raw text.
    pub chars: Range<usize>,
    /// Span of letter indices (into `letter_positions`).
    pub letters: Range<usize>,
}

impl Word {
    /// Letter index of the case-ending position.
    pub fn case_ending(&self) -> usize {
        self.letters.end - 1
    }
}

/// Undiacritized text plus one diacritic class per Arabic letter.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledText {
    raw: String,
    chars: Vec<char>,
    letter_positions: Vec<usize>,
    labels: Vec<DiacriticClass>,
    words: Vec<Word>,
}

impl LabeledText {
    /// Layout of an undiacritized text with every label set to class 0.
    pub fn unlabeled(raw: &str) -> Result<Self> {
        let chars: Vec<char> = raw.chars().collect();
        if let Some(offset) = chars.iter().position(|&c| is_mark(c)) {
            return Err(Error::MalformedInput {
                offset,
                reason: "undiacritized text contains a diacritic mark".into(),
            });
        }
        let letter_positions: Vec<usize> =
            chars.iter().enumerate().filter(|(_, &c)| is_arabic_letter(c)).map(|(i, _)| i).collect();
        let words = find_words(&chars, &letter_positions);
        let labels = vec![DiacriticClass::NONE; letter_positions.len()];
        Ok(Self { raw: raw.to_string(), chars, letter_positions, labels, words })
    }

    pub fn with_labels(mut self, labels: Vec<DiacriticClass>) -> Result<Self> {
        if labels.len() != self.letter_positions.len() {
            return Err(Error::Invariant {
                invariant: 2,
                detail: format!("{} predictions for {} letters", labels.len(), self.letter_positions.len()),
            });
        }
        self.labels = labels;
        Ok(self)
    }

    pub fn raw(&self) -> &str {
        &self.raw
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn letter_positions(&self) -> &[usize] {
        &self.letter_positions
    }

    pub fn labels(&self) -> &[DiacriticClass] {
        &self.labels
    }

    pub fn words(&self) -> &[Word] {
        &self.words
    }

    pub fn num_letters(&self) -> usize {
        self.letter_positions.len()
    }

    /// Per-letter flag marking the last letter of each word.
    pub fn case_ending_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.letter_positions.len()];
        for w in &self.words {
            mask[w.case_ending()] = true;
        }
        mask
    }

    /// Re-inserts the labels; equivalent to [`insert_diacritics`].
    pub fn to_diacritized(&self) -> Result<String> {
        insert_diacritics(&self.raw, &self.labels)
    }
}

fn find_words(chars: &[char], letters: &[usize]) -> Vec<Word> {
    let mut words = Vec::new();
    let mut next_letter = 0;
    let mut i = 0;
    while i < chars.len() {
        if chars[i].is_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        while i < chars.len() && !chars[i].is_whitespace() {
            i += 1;
        }
        let first = next_letter;
        while next_letter < letters.len() && letters[next_letter] < i {
            next_letter += 1;
        }
        if next_letter > first {
            words.push(Word { chars: start..i, letters: first..next_letter });
        }
    }
    words
}

/// Splits diacritized text into raw characters and per-letter classes.
///
/// Marks attach to the closest preceding Arabic letter, possibly across
/// tatweel, dagger alif or hamza/madda marks; either shadda/vowel order is accepted.
pub fn label_from_diacritized(text: &str) -> Result<LabeledText> {
    let mut raw = String::with_capacity(text.len());
    let mut labels = Vec::new();
    let mut pending: Vec<char> = Vec::new();
    let mut pending_offset = 0;
    let mut attachable = false;
    let flush = |pending: &mut Vec<char>, offset: usize, labels: &mut Vec<DiacriticClass>| -> Result<()> {
        if labels.is_empty() {
            return Ok(());
        }
        let class = DiacriticClass::from_marks(pending).ok_or_else(|| Error::MalformedInput {
            offset,
            reason: format!("mark combination {:?} is not a diacritic class", pending),
        })?;
        *labels.last_mut().expect("letter") = class;
        pending.clear();
        Ok(())
    };
    for (offset, c) in text.chars().enumerate() {
        if is_mark(c) {
            if !attachable {
                return Err(Error::MalformedInput {
                    offset,
                    reason: "diacritic mark without a preceding Arabic letter".into(),
                });
            }
            if pending.is_empty() {
                pending_offset = offset;
            }
            pending.push(c);
            continue;
        }
        if is_arabic_letter(c) {
            flush(&mut pending, pending_offset, &mut labels)?;
            labels.push(DiacriticClass::NONE);
            attachable = true;
        } else if !is_transparent(c) {
            attachable = false;
        }
        raw.push(c);
    }
    flush(&mut pending, pending_offset, &mut labels)?;
    LabeledText::unlabeled(&raw)?.with_labels(labels)
}

/// Rewrites diacritized text with marks placed directly after their letter in
/// canonical (shadda-first) order.
pub fn canonicalize(text: &str) -> Result<String> {
    label_from_diacritized(text)?.to_diacritized()
}

/// Emits `raw` with each Arabic letter followed by its predicted class's marks,
/// then verifies the three post-processing invariants.
pub fn insert_diacritics(raw: &str, predictions: &[DiacriticClass]) -> Result<String> {
    let letters = raw.chars().filter(|&c| is_arabic_letter(c)).count();
    if letters != predictions.len() {
        return Err(Error::Invariant {
            invariant: 2,
            detail: format!("{} predictions for {letters} letter positions", predictions.len()),
        });
    }
    let expected_marks: usize = predictions.iter().map(|p| p.marks().len()).sum();
    let mut out = String::with_capacity(raw.len() + 2 * expected_marks);
    let mut consumed = 0;
    for c in raw.chars() {
        out.push(c);
        if is_arabic_letter(c) {
            if let Some(p) = predictions.get(consumed) {
                out.extend(p.marks());
            }
            consumed += 1;
        }
    }
    let emitted = out.chars().filter(|&c| is_mark(c)).count();
    let raw_marks = raw.chars().filter(|&c| is_mark(c)).count();
    if emitted != expected_marks + raw_marks {
        return Err(Error::Invariant {
            invariant: 2,
            detail: format!("emitted {emitted} marks, predictions call for {expected_marks}"),
        });
    }
    if consumed != predictions.len() {
        return Err(Error::Invariant {
            invariant: 3,
            detail: format!("consumed {consumed} of {} letter positions", predictions.len()),
        });
    }
    if strip_diacritics(&out) != raw {
        return Err(Error::Invariant {
            invariant: 1,
            detail: "stripped output differs from the input text".into(),
        });
    }
    Ok(out)
}

/// Fraction of Arabic letters carrying at least one mark; 0 when there are no letters.
pub fn diacritization_ratio(text: &str) -> f64 {
    let mut letters = 0usize;
    let mut marked = 0usize;
    let mut current_marked = false;
    let mut attachable = false;
    for c in text.chars() {
        if is_mark(c) {
            if attachable && !current_marked {
                current_marked = true;
                marked += 1;
            }
        } else if is_arabic_letter(c) {
            letters += 1;
            current_marked = false;
            attachable = true;
        } else if !is_transparent(c) {
            attachable = false;
        }
    }
    if letters == 0 {
        0.0
    } else {
        marked as f64 / letters as f64
    }
}

/// Training-data filter: keeps texts whose diacritization ratio is not below `threshold`.
pub fn passes_ratio_filter(text: &str, threshold: f64) -> bool {
    diacritization_ratio(text) >= threshold
}

pub const PAD_ID: u32 = 0;
pub const PREFIX_ID: u32 = 1;
pub const UNK_ID: u32 = 2;
const FIRST_CHAR_ID: u32 = 3;

/// Character → token id map with reserved padding, prefix and unknown ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    chars: Vec<char>,
    index: HashMap<char, u32>,
}

impl Default for Vocabulary {
    /// Arabic letters, tatweel, dagger alif, hamza/madda marks, Arabic and Latin
    /// digits, whitespace and common punctuation.
    fn default() -> Self {
        let mut chars: Vec<char> = ('\u{0621}'..='\u{064A}').filter(|&c| c != '\u{0640}' && is_arabic_letter(c)).collect();
        chars.extend(['\u{0671}', '\u{067E}', '\u{0686}', '\u{06A4}', '\u{06A9}', '\u{06AF}', '\u{06CC}']);
        chars.extend(['\u{0640}', '\u{0670}', '\u{0653}', '\u{0654}', '\u{0655}']);
        chars.extend('\u{0660}'..='\u{0669}');
        chars.extend('0'..='9');
        chars.extend([' ', '.', ',', '!', '?', ':', '-', '"', '(', ')', '\u{060C}', '\u{061B}', '\u{061F}']);
        Self::from_chars(chars).expect("default vocabulary is duplicate-free")
    }
}

impl Vocabulary {
    pub fn from_chars(chars: Vec<char>) -> Result<Self> {
        let mut index = HashMap::with_capacity(chars.len());
        for (i, &c) in chars.iter().enumerate() {
            if is_mark(c) || index.insert(c, FIRST_CHAR_ID + i as u32).is_some() {
                return Err(Error::Config(format!("vocabulary entry {c:?} is a mark or duplicate")));
            }
        }
        Ok(Self { chars, index })
    }

    /// Total id space including the reserved ids.
    pub fn len(&self) -> usize {
        self.chars.len() + FIRST_CHAR_ID as usize
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn id(&self, c: char) -> u32 {
        self.index.get(&c).copied().unwrap_or(UNK_ID)
    }

    pub fn char_of(&self, id: u32) -> Option<char> {
        id.checked_sub(FIRST_CHAR_ID).and_then(|i| self.chars.get(i as usize)).copied()
    }

    /// One character per line, in id order.
    pub fn to_lines(&self) -> String {
        self.chars.iter().map(|c| format!("{:04X}\n", *c as u32)).collect()
    }

    pub fn from_lines(text: &str) -> Result<Self> {
        let chars = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                u32::from_str_radix(l.trim(), 16)
                    .ok()
                    .and_then(char::from_u32)
                    .ok_or_else(|| Error::Format(format!("bad vocabulary line {l:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_chars(chars)
    }
}

/// `prefix_len` prefix ids followed by one id per character of `raw`.
pub fn encode_tokens(raw: &str, vocab: &Vocabulary, prefix_len: usize) -> Vec<u32> {
    std::iter::repeat_n(PREFIX_ID, prefix_len).chain(raw.chars().map(|c| vocab.id(c))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn class(id: usize) -> DiacriticClass {
        DiacriticClass::new(id).unwrap()
    }

    #[test]
    fn class_inventory_round_trips() {
        assert_eq!(DiacriticClass::all().count(), 15);
        assert!(DiacriticClass::NONE.marks().is_empty());
        for c in DiacriticClass::all() {
            assert_eq!(DiacriticClass::from_marks(c.marks()), Some(c));
            let mut reversed = c.marks().to_vec();
            reversed.reverse();
            assert_eq!(DiacriticClass::from_marks(&reversed), Some(c));
        }
        assert_eq!(DiacriticClass::from_marks(&[FATHA, KASRA]), None);
        assert_eq!(DiacriticClass::from_marks(&[SHADDA, SUKUN]), None);
        assert_eq!(DiacriticClass::from_marks(&[SHADDA, SHADDA]), None);
        assert_eq!(DiacriticClass::new(15), None);
    }

    #[test]
    fn strip_examples() {
        assert_eq!(strip_diacritics("كَتَبَ"), "كتب");
        assert_eq!(strip_diacritics("hello كتب"), "hello كتب");
    }

    #[test]
    fn strip_dev_example_gold_gives_input() {
        let gold = "الظَّاهِرُ أَنَّهُ لَا خِلَافَ فِي الْحَقِيقَةِ لِلِاتِّفَاقِ عَلَى امْتِنَاعِ إِدْرَاكِ حَقِيقَةِ الذَّاتِ";
        let input = "الظاهر أنه لا خلاف في الحقيقة للاتفاق على امتناع إدراك حقيقة الذات";
        assert_eq!(strip_diacritics(gold), input);
        let labeled = label_from_diacritized(gold).unwrap();
        assert_eq!(labeled.raw(), input);
        assert_eq!(labeled.words().len(), 12);
    }

    #[test]
    fn labeling_examples() {
        let l = label_from_diacritized("كَتَبَ").unwrap();
        assert_eq!(l.raw(), "كتب");
        assert_eq!(l.letter_positions(), &[0, 1, 2]);
        assert_eq!(l.labels(), &[class(1); 3]);
        assert_eq!(l.case_ending_mask(), vec![false, false, true]);

        let l = label_from_diacritized("الظَّاهِرُ").unwrap();
        assert_eq!(l.labels()[2], class(9));
        assert_eq!(l.labels()[0], DiacriticClass::NONE);
    }

    #[test]
    fn vowel_shadda_order_is_canonicalized() {
        for vowel in [FATHA, DAMMA, KASRA, FATHATAN, DAMMATAN, KASRATAN] {
            let a: String = ['ب', SHADDA, vowel].iter().collect();
            let b: String = ['ب', vowel, SHADDA].iter().collect();
            let (la, lb) = (label_from_diacritized(&a).unwrap(), label_from_diacritized(&b).unwrap());
            assert_eq!(la.labels(), lb.labels());
            assert_eq!(canonicalize(&b).unwrap(), a);
        }
    }

    #[test]
    fn labeling_errors_carry_offsets() {
        match label_from_diacritized(" َب") {
            Err(Error::MalformedInput { offset, .. }) => assert_eq!(offset, 1),
            other => panic!("{other:?}"),
        }
        match label_from_diacritized("بَ كَِ") {
            Err(Error::MalformedInput { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn marks_attach_across_tatweel_and_dagger_alif() {
        let l = label_from_diacritized("هٰذَا").unwrap();
        assert_eq!(l.raw(), "هٰذا");
        assert_eq!(l.labels(), &[DiacriticClass::NONE, class(1), DiacriticClass::NONE]);
        let l = label_from_diacritized("بـَ").unwrap();
        assert_eq!(l.labels(), &[class(1)]);
        assert_eq!(canonicalize("بـَ").unwrap(), "بَـ");
    }

    #[test]
    fn insertion_examples() {
        assert_eq!(insert_diacritics("كتب", &[class(1); 3]).unwrap(), "كَتَبَ");
        assert_eq!(insert_diacritics("كتب ok", &[DiacriticClass::NONE; 3]).unwrap(), "كتب ok");
        assert!(matches!(
            insert_diacritics("كتب", &[class(1); 2]),
            Err(Error::Invariant { invariant: 2, .. })
        ));
        assert!(matches!(
            insert_diacritics("كَتب", &[class(1); 3]),
            Err(Error::Invariant { invariant: 1, .. })
        ));
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(diacritization_ratio("كَتَبَ"), 1.0);
        assert!((diacritization_ratio("كَتب") - 1.0 / 3.0).abs() < 1e-12);
        assert!(!passes_ratio_filter("كَتب", 0.6));
        assert_eq!(diacritization_ratio("abc"), 0.0);
        // 3 of 5 letters marked: exactly 0.6 is kept
        assert_eq!(diacritization_ratio("كَتَبَ ذب"), 0.6);
        assert!(passes_ratio_filter("كَتَبَ ذب", 0.6));
    }

    #[test]
    fn token_encoding() {
        let v = Vocabulary::default();
        assert_eq!(encode_tokens("", &v, 150), vec![PREFIX_ID; 150]);
        let plain = encode_tokens("كتب", &v, 0);
        assert_eq!(plain, vec![v.id('ك'), v.id('ت'), v.id('ب')]);
        assert_eq!(
            encode_tokens("كتب", &v, 2),
            vec![PREFIX_ID, PREFIX_ID, v.id('ك'), v.id('ت'), v.id('ب')]
        );
        assert_eq!(v.id('€'), UNK_ID);
        assert!(plain.iter().all(|&id| id >= 3));
    }

    #[test]
    fn vocabulary_serialization_is_stable() {
        let v = Vocabulary::default();
        let back = Vocabulary::from_lines(&v.to_lines()).unwrap();
        assert_eq!(back, v);
        for id in 3..v.len() as u32 {
            assert_eq!(v.id(v.char_of(id).unwrap()), id);
        }
    }

    #[test]
    fn nfc_reorders_marks_but_labels_agree() {
        let text = "بَّ";
        let nfc = normalize(text);
        assert_eq!(label_from_diacritized(&nfc).unwrap().labels(), &[class(9)]);
    }
}
