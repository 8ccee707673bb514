//! DER / WER / SER scoring.
//!
//! A letter position counts unless a flag excludes it: case endings (the
//! last letter of each word) and positions whose gold class is "no
//! diacritic". A word errs when any counted position in it errs, a sentence
//! when any word errs. Corpus scores are micro-averaged.

use std::collections::{BTreeSet, HashMap};
use std::ops::{Add, AddAssign};

use serde::Serialize;

use crate::data::ManifestRecord;
use crate::error::{Error, Result};
use crate::textproc::{is_arabic_letter, is_mark, label_from_diacritized, DiacriticClass, LabeledText};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct MetricFlags {
    pub include_case_endings: bool,
    pub include_no_diacritic: bool,
}

impl MetricFlags {
    /// The ranking setting: case endings and no-diacritic positions both counted.
    pub const PRIMARY: Self = Self { include_case_endings: true, include_no_diacritic: true };

    pub fn all() -> [Self; 4] {
        [
            Self::PRIMARY,
            Self { include_case_endings: false, include_no_diacritic: true },
            Self { include_case_endings: true, include_no_diacritic: false },
            Self { include_case_endings: false, include_no_diacritic: false },
        ]
    }
}

impl Default for MetricFlags {
    fn default() -> Self {
        Self::PRIMARY
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Tallies {
    pub positions: usize,
    pub position_errors: usize,
    pub words: usize,
    pub word_errors: usize,
    pub sentences: usize,
    pub sentence_errors: usize,
}

impl Add for Tallies {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            positions: self.positions + o.positions,
            position_errors: self.position_errors + o.position_errors,
            words: self.words + o.words,
            word_errors: self.word_errors + o.word_errors,
            sentences: self.sentences + o.sentences,
            sentence_errors: self.sentence_errors + o.sentence_errors,
        }
    }
}

impl AddAssign for Tallies {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ScoreReport {
    pub der: f64,
    pub wer: f64,
    pub ser: f64,
    pub flags: MetricFlags,
    pub tallies: Tallies,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ScoreReport {
    pub fn from_tallies(tallies: Tallies, flags: MetricFlags) -> Self {
        Self {
            der: ratio(tallies.position_errors, tallies.positions),
            wer: ratio(tallies.word_errors, tallies.words),
            ser: ratio(tallies.sentence_errors, tallies.sentences),
            flags,
            tallies,
        }
    }

    pub fn to_key_values(&self) -> String {
        let t = &self.tallies;
        format!(
            "der={:.4}\nwer={:.4}\nser={:.4}\ncase_endings={}\nno_diacritic={}\npositions={}\nposition_errors={}\nwords={}\nword_errors={}\nsentences={}\nsentence_errors={}\n",
            self.der * 100.0,
            self.wer * 100.0,
            self.ser * 100.0,
            if self.flags.include_case_endings { "include" } else { "exclude" },
            if self.flags.include_no_diacritic { "include" } else { "exclude" },
            t.positions,
            t.position_errors,
            t.words,
            t.word_errors,
            t.sentences,
            t.sentence_errors,
        )
    }
}

/// Tallies for one sentence given gold labels and predicted classes per letter.
pub fn score_labels(gold: &LabeledText, pred: &[DiacriticClass], flags: MetricFlags) -> Tallies {
    let case_ending = gold.case_ending_mask();
    let counted = |i: usize| {
        (flags.include_case_endings || !case_ending[i])
            && (flags.include_no_diacritic || gold.labels()[i] != DiacriticClass::NONE)
    };
    let mut t = Tallies { sentences: 1, ..Tallies::default() };
    for word in gold.words() {
        let mut word_err = false;
        for i in word.letters.clone() {
            if counted(i) {
                t.positions += 1;
                if pred[i] != gold.labels()[i] {
                    t.position_errors += 1;
                    word_err = true;
                }
            }
        }
        t.words += 1;
        t.word_errors += word_err as usize;
    }
    t.sentence_errors = (t.word_errors > 0) as usize;
    t
}

fn first_divergence(a: &str, b: &str) -> usize {
    a.chars().zip(b.chars()).position(|(x, y)| x != y).unwrap_or_else(|| a.chars().count().min(b.chars().count()))
}

pub fn score_pair(pred: &str, gold: &str, flags: MetricFlags) -> Result<Tallies> {
    let p = label_from_diacritized(pred)?;
    let g = label_from_diacritized(gold)?;
    if p.raw() != g.raw() {
        return Err(Error::Alignment { offset: first_divergence(p.raw(), g.raw()) });
    }
    Ok(score_labels(&g, p.labels(), flags))
}

/// Micro-averaged scores over records matched by id.
pub fn evaluate_corpus(
    pred: &[ManifestRecord],
    gold: &[ManifestRecord],
    flags: MetricFlags,
) -> Result<ScoreReport> {
    let pred_by_id: HashMap<&str, &ManifestRecord> = pred.iter().map(|r| (r.id.as_str(), r)).collect();
    let gold_ids: BTreeSet<&str> = gold.iter().map(|r| r.id.as_str()).collect();
    let missing: Vec<&str> = gold.iter().map(|r| r.id.as_str()).filter(|id| !pred_by_id.contains_key(id)).collect();
    let extra: Vec<&str> = pred.iter().map(|r| r.id.as_str()).filter(|id| !gold_ids.contains(id)).collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::Manifest(format!(
            "prediction ids do not match gold: missing {missing:?}, extra {extra:?}"
        )));
    }
    let mut total = Tallies::default();
    for g in gold {
        let p = pred_by_id[g.id.as_str()];
        total += score_pair(&p.text, &g.text, flags).map_err(|e| match e {
            Error::Alignment { offset } => {
                Error::Manifest(format!("record {}: base texts diverge at offset {offset}", g.id))
            }
            other => other,
        })?;
    }
    Ok(ScoreReport::from_tallies(total, flags))
}

/// Deliberately naive re-implementation of [`score_pair`] that works on raw
/// character groups and mark multisets, without the class inventory. Serves
/// as an independent oracle in tests.
pub fn brute_force_reference(pred: &str, gold: &str, flags: MetricFlags) -> Result<Tallies> {
    fn groups(text: &str) -> Result<Vec<(char, Vec<char>)>> {
        let mut out: Vec<(char, Vec<char>)> = Vec::new();
        for (offset, c) in text.chars().enumerate() {
            if is_mark(c) {
                let mut j = out.len();
                while j > 0 && matches!(out[j - 1].0, '\u{0640}' | '\u{0670}' | '\u{0653}'..='\u{0655}') {
                    j -= 1;
                }
                match out.get_mut(j.wrapping_sub(1)) {
                    Some((base, marks)) if is_arabic_letter(*base) => marks.push(c),
                    _ => {
                        return Err(Error::MalformedInput { offset, reason: "orphan mark".into() });
                    }
                }
            } else {
                out.push((c, Vec::new()));
            }
        }
        for (_, marks) in &mut out {
            marks.sort_unstable();
        }
        Ok(out)
    }

    let p = groups(pred)?;
    let g = groups(gold)?;
    let pb: String = p.iter().map(|x| x.0).collect();
    let gb: String = g.iter().map(|x| x.0).collect();
    if pb != gb {
        return Err(Error::Alignment { offset: first_divergence(&pb, &gb) });
    }

    let mut t = Tallies { sentences: 1, ..Tallies::default() };
    let mut i = 0;
    while i < g.len() {
        if g[i].0.is_whitespace() {
            i += 1;
            continue;
        }
        let mut j = i;
        while j < g.len() && !g[j].0.is_whitespace() {
            j += 1;
        }
        let letters: Vec<usize> = (i..j).filter(|&k| is_arabic_letter(g[k].0)).collect();
        if let Some(&last) = letters.last() {
            t.words += 1;
            let mut bad = false;
            for &k in &letters {
                if k == last && !flags.include_case_endings {
                    continue;
                }
                if g[k].1.is_empty() && !flags.include_no_diacritic {
                    continue;
                }
                t.positions += 1;
                if p[k].1 != g[k].1 {
                    t.position_errors += 1;
                    bad = true;
                }
            }
            if bad {
                t.word_errors += 1;
            }
        }
        i = j;
    }
    if t.word_errors > 0 {
        t.sentence_errors = 1;
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    const NO_CASE: MetricFlags = MetricFlags { include_case_endings: false, include_no_diacritic: true };

    #[test]
    fn identical_texts_score_zero() {
        let t = score_pair("كَتَبَ وَلَدٌ", "كَتَبَ وَلَدٌ", MetricFlags::PRIMARY).unwrap();
        assert_eq!((t.position_errors, t.word_errors, t.sentence_errors), (0, 0, 0));
        assert_eq!((t.positions, t.words, t.sentences), (6, 2, 1));
    }

    #[test]
    fn wrong_case_ending_worked_example() {
        let t = score_pair("كَتَبُ", "كَتَبَ", MetricFlags::PRIMARY).unwrap();
        let r = ScoreReport::from_tallies(t, MetricFlags::PRIMARY);
        assert_eq!((t.position_errors, t.positions), (1, 3));
        assert_eq!((r.der, r.wer, r.ser), (1.0 / 3.0, 1.0, 1.0));

        let t = score_pair("كَتَبُ", "كَتَبَ", NO_CASE).unwrap();
        let r = ScoreReport::from_tallies(t, NO_CASE);
        assert_eq!((t.position_errors, t.positions), (0, 2));
        assert_eq!((r.der, r.wer), (0.0, 0.0));
    }

    #[test]
    fn two_words_one_perfect() {
        let t = score_pair("كَتَبَ وَلَدِ", "كَتَبَ وَلَدٌ", MetricFlags::PRIMARY).unwrap();
        let r = ScoreReport::from_tallies(t, MetricFlags::PRIMARY);
        assert_eq!((r.wer, r.ser), (0.5, 1.0));
    }

    #[test]
    fn base_mismatch_is_an_alignment_error() {
        match score_pair("كَتَبَ", "كَتَمَ", MetricFlags::PRIMARY) {
            Err(Error::Alignment { offset }) => assert_eq!(offset, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn no_diacritic_flag_drops_bare_gold_positions() {
        let flags = MetricFlags { include_case_endings: true, include_no_diacritic: false };
        let t = score_pair("كَتَبَ", "كتَبَ", flags).unwrap();
        assert_eq!((t.positions, t.position_errors), (2, 0));
        let t = score_pair("كَتَبَ", "كتَبَ", MetricFlags::PRIMARY).unwrap();
        assert_eq!((t.positions, t.position_errors), (3, 1));
    }

    #[test]
    fn corpus_ids_must_match() {
        let rec = |id: &str, text: &str| ManifestRecord { id: id.into(), audio: "a.wav".into(), text: text.into(), confidence: None };
        let gold = vec![rec("a", "كَتَبَ"), rec("b", "وَلَدٌ")];
        let pred = vec![rec("a", "كَتَبَ"), rec("c", "وَلَدٌ")];
        let err = evaluate_corpus(&pred, &gold, MetricFlags::PRIMARY).unwrap_err();
        assert!(err.to_string().contains("\"b\"") && err.to_string().contains("\"c\""));

        let r = evaluate_corpus(&gold, &gold, MetricFlags::PRIMARY).unwrap();
        assert_eq!((r.der, r.wer, r.ser), (0.0, 0.0, 0.0));
        let empty = evaluate_corpus(&[], &[], MetricFlags::PRIMARY).unwrap();
        assert_eq!(empty.tallies, Tallies::default());
    }

    #[test]
    fn bare_predictor_der_equals_marked_fraction() {
        let gold = "كَتَبَ وَلَد";
        let pred = "كتب ولد";
        let t = score_pair(pred, gold, MetricFlags::PRIMARY).unwrap();
        // 5 of 6 gold letters carry a mark
        assert_eq!((t.position_errors, t.positions), (5, 6));
        assert_eq!(brute_force_reference(pred, gold, MetricFlags::PRIMARY).unwrap(), t);
    }
}
