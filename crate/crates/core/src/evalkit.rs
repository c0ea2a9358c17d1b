//! Word error rate and the noise-category × SNR evaluation grid.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::AvSample;
use crate::error::{Error, Result};
use crate::seed;
use crate::signal::{contaminate_at, log_mel, MelSpectrogram, NoiseBank, NoiseCategory, Waveform};
use crate::video::LipFrameSequence;

/// The SNR columns of the evaluation grid.
pub const GRID_SNRS: [f64; 4] = [-10.0, 0.0, 10.0, 20.0];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WerCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_words: usize,
}

impl WerCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    pub fn rate(&self) -> f64 {
        self.errors() as f64 / self.ref_words as f64
    }
}

/// Levenshtein alignment on whitespace-separated words with unit costs.
pub fn wer(reference: &str, hypothesis: &str) -> Result<WerCounts> {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    if r.is_empty() {
        return Err(Error::invalid("empty reference"));
    }
    let (n, m) = (r.len(), h.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let mut c = WerCounts {
        ref_words: n,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1]) {
            if r[i - 1] != h[j - 1] {
                c.substitutions += 1;
            }
            i -= 1;
            j -= 1;
        } else if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            c.deletions += 1;
            i -= 1;
        } else {
            c.insertions += 1;
            j -= 1;
        }
    }
    Ok(c)
}

/// Corpus WER in percent: total errors over total reference words.
pub fn corpus_wer(pairs: &[(String, String)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("empty corpus"));
    }
    let mut errors = 0;
    let mut words = 0;
    for (r, h) in pairs {
        let c = wer(r, h)?;
        errors += c.errors();
        words += c.ref_words;
    }
    Ok(100.0 * errors as f64 / words as f64)
}

/// A contaminated test utterance as seen by a system under test.
pub struct NoisyUtterance<'a> {
    pub id: &'a str,
    pub audio: &'a Waveform,
    pub mel: &'a MelSpectrogram,
    pub video: &'a LipFrameSequence,
    pub category: NoiseCategory,
    pub snr_db: f64,
}

pub trait Recognizer: Sync {
    fn transcribe(&self, u: &NoisyUtterance) -> Result<String>;
}

impl<F> Recognizer for F
where
    F: Fn(&NoisyUtterance) -> Result<String> + Sync,
{
    fn transcribe(&self, u: &NoisyUtterance) -> Result<String> {
        self(u)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WerRow {
    pub model_id: String,
    pub category: NoiseCategory,
    pub snr_db: f64,
    pub wer_percent: f64,
    pub n_words: usize,
    pub n_errors: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WerReport {
    pub rows: Vec<WerRow>,
}

/// Seed of the noise drawn for one clip in one grid cell. Shared by every
/// system evaluated with the same grid seed.
pub fn cell_seed(seed: u64, category: NoiseCategory, snr_db: f64, clip: usize) -> u64 {
    seed::derive(
        seed,
        &[seed::tag("grid"), category.index() as u64, snr_db.to_bits(), clip as u64],
    )
}

/// Contaminates every test clip at each (category, SNR) cell and scores each
/// system on it. The same noisy audio is shown to every system.
pub fn eval_grid_many(
    systems: &[(&str, &dyn Recognizer)],
    corpus: &[AvSample],
    bank: &NoiseBank,
    categories: &[NoiseCategory],
    snrs: &[f64],
    seed: u64,
) -> Result<Vec<WerReport>> {
    if corpus.is_empty() {
        return Err(Error::invalid("empty test corpus"));
    }
    let mut reports = vec![WerReport::default(); systems.len()];
    for &cat in categories {
        for &snr in snrs {
            let per_clip: Vec<Result<Vec<WerCounts>>> = corpus
                .par_iter()
                .enumerate()
                .map(|(i, s)| {
                    let noisy = contaminate_at(&s.audio, cat, snr, bank, cell_seed(seed, cat, snr, i))?;
                    let mel = log_mel(&noisy)?;
                    let u = NoisyUtterance {
                        id: &s.id,
                        audio: &noisy,
                        mel: &mel,
                        video: &s.video,
                        category: cat,
                        snr_db: snr,
                    };
                    systems
                        .iter()
                        .map(|(_, sys)| wer(&s.text, &sys.transcribe(&u)?))
                        .collect()
                })
                .collect();
            let mut totals = vec![WerCounts::default(); systems.len()];
            for clip in per_clip {
                for (t, c) in totals.iter_mut().zip(clip?) {
                    t.substitutions += c.substitutions;
                    t.deletions += c.deletions;
                    t.insertions += c.insertions;
                    t.ref_words += c.ref_words;
                }
            }
            for ((report, (id, _)), t) in reports.iter_mut().zip(systems).zip(totals) {
                report.rows.push(WerRow {
                    model_id: id.to_string(),
                    category: cat,
                    snr_db: snr,
                    wer_percent: 100.0 * t.rate(),
                    n_words: t.ref_words,
                    n_errors: t.errors(),
                });
            }
        }
    }
    Ok(reports)
}

pub fn eval_grid(
    model_id: &str,
    system: &dyn Recognizer,
    corpus: &[AvSample],
    bank: &NoiseBank,
    categories: &[NoiseCategory],
    snrs: &[f64],
    seed: u64,
) -> Result<WerReport> {
    let mut v = eval_grid_many(&[(model_id, system)], corpus, bank, categories, snrs, seed)?;
    Ok(v.remove(0))
}

/// Parameter counts shown next to a model in the Markdown table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamColumns {
    pub trainable: usize,
    pub total: usize,
}

/// `18M`, `36k` or the plain count, rounded to whole units.
pub fn human_count(n: usize) -> String {
    if n >= 1_000_000 {
        format!("{}M", (n as f64 / 1e6).round() as usize)
    } else if n >= 1_000 {
        format!("{}k", (n as f64 / 1e3).round() as usize)
    } else {
        n.to_string()
    }
}

impl WerReport {
    pub fn merge(reports: impl IntoIterator<Item = WerReport>) -> WerReport {
        WerReport {
            rows: reports.into_iter().flat_map(|r| r.rows).collect(),
        }
    }

    pub fn get(&self, model_id: &str, category: NoiseCategory, snr_db: f64) -> Option<&WerRow> {
        self.rows
            .iter()
            .find(|r| r.model_id == model_id && r.category == category && r.snr_db == snr_db)
    }

    pub fn model_ids(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.model_id) {
                out.push(r.model_id.clone());
            }
        }
        out
    }

    fn aggregate<K: Ord>(&self, model_id: &str, key: impl Fn(&WerRow) -> K) -> BTreeMap<K, f64> {
        let mut acc: BTreeMap<K, (usize, usize)> = BTreeMap::new();
        for r in self.rows.iter().filter(|r| r.model_id == model_id) {
            let e = acc.entry(key(r)).or_default();
            e.0 += r.n_errors;
            e.1 += r.n_words;
        }
        acc.into_iter()
            .map(|(k, (e, w))| (k, 100.0 * e as f64 / w as f64))
            .collect()
    }

    /// Errors-weighted WER per category.
    pub fn by_category(&self, model_id: &str) -> BTreeMap<NoiseCategory, f64> {
        self.aggregate(model_id, |r| r.category)
    }

    /// Errors-weighted WER per SNR, keyed by the SNR in tenths of a dB.
    pub fn by_snr(&self, model_id: &str) -> BTreeMap<i64, f64> {
        self.aggregate(model_id, |r| (r.snr_db * 10.0).round() as i64)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["model_id", "category", "snr_db", "wer_percent", "n_words", "n_errors"])?;
        for r in &self.rows {
            out.write_record([
                r.model_id.clone(),
                r.category.name().to_string(),
                format!("{}", r.snr_db),
                format!("{:.4}", r.wer_percent),
                r.n_words.to_string(),
                r.n_errors.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<WerReport> {
        let mut rows = Vec::new();
        for rec in csv::Reader::from_reader(r).records() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).ok_or_else(|| Error::invalid("short CSV record"));
            let num = |i: usize| -> Result<f64> {
                field(i)?.parse().map_err(|_| Error::invalid(format!("bad number in column {i}")))
            };
            rows.push(WerRow {
                model_id: field(0)?.to_string(),
                category: field(1)?.parse()?,
                snr_db: num(2)?,
                wer_percent: num(3)?,
                n_words: num(4)? as usize,
                n_errors: num(5)? as usize,
            });
        }
        Ok(WerReport { rows })
    }

    /// Table with one row per model: TrP, ToP, then the four SNR columns of
    /// each category.
    pub fn to_markdown(&self, params: &BTreeMap<String, ParamColumns>) -> String {
        let mut cats: Vec<NoiseCategory> = Vec::new();
        let mut snrs: Vec<f64> = Vec::new();
        for r in &self.rows {
            if !cats.contains(&r.category) {
                cats.push(r.category);
            }
            if !snrs.contains(&r.snr_db) {
                snrs.push(r.snr_db);
            }
        }
        cats.sort();
        snrs.sort_by(f64::total_cmp);
        let mut s = String::from("| Models | TrP | ToP |");
        for c in &cats {
            for snr in &snrs {
                let _ = write!(s, " {} {} |", c.title(), snr);
            }
        }
        s.push_str("\n|---|---|---|");
        for _ in 0..cats.len() * snrs.len() {
            s.push_str("---|");
        }
        s.push('\n');
        for id in self.model_ids() {
            let (trp, top) = params
                .get(&id)
                .map(|p| (human_count(p.trainable), human_count(p.total)))
                .unwrap_or_else(|| ("-".into(), "-".into()));
            let _ = write!(s, "| {id} | {trp} | {top} |");
            for c in &cats {
                for snr in &snrs {
                    match self.get(&id, *c, *snr) {
                        Some(r) => {
                            let _ = write!(s, " {:.1} |", r.wer_percent);
                        }
                        None => s.push_str(" - |"),
                    }
                }
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellDelta {
    pub category: NoiseCategory,
    pub snr_db: f64,
    /// `wer_a − wer_b`.
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub cells: Vec<CellDelta>,
    /// Cells where `a` has strictly lower WER.
    pub a_wins: usize,
    pub b_wins: usize,
    pub ties: usize,
}

/// Per-cell differences between two single-model reports over the same grid.
pub fn compare(a: &WerReport, b: &WerReport) -> Result<Comparison> {
    let key = |r: &WerRow| (r.category, r.snr_db.to_bits());
    let mut ka: Vec<_> = a.rows.iter().map(key).collect();
    let mut kb: Vec<_> = b.rows.iter().map(key).collect();
    ka.sort();
    kb.sort();
    if ka != kb || a.rows.is_empty() {
        return Err(Error::Shape("reports cover different grid cells".into()));
    }
    let mut cells = Vec::with_capacity(a.rows.len());
    let (mut aw, mut bw, mut ties) = (0, 0, 0);
    for ra in &a.rows {
        let rb = b
            .rows
            .iter()
            .find(|r| key(r) == key(ra))
            .expect("same key set");
        let delta = ra.wer_percent - rb.wer_percent;
        if delta < 0.0 {
            aw += 1;
        } else if delta > 0.0 {
            bw += 1;
        } else {
            ties += 1;
        }
        cells.push(CellDelta {
            category: ra.category,
            snr_db: ra.snr_db,
            delta,
        });
    }
    Ok(Comparison {
        cells,
        a_wins: aw,
        b_wins: bw,
        ties,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basic_rates() {
        assert_eq!(wer("a b c", "a b c").unwrap().rate(), 0.0);
        assert!((wer("a b c", "a x c").unwrap().rate() - 1.0 / 3.0).abs() < 1e-12);
        let c = wer("a b c", "").unwrap();
        assert_eq!((c.deletions, c.rate()), (3, 1.0));
        let c = wer("a", "x y z").unwrap();
        assert_eq!(c.errors(), 3);
        assert!(wer("  ", "a").is_err());
    }

    #[test]
    fn corpus_wer_is_errors_weighted() {
        // One error in a 1-word clip, zero in a 9-word clip: 10%, not 50%.
        let pairs = vec![
            ("a".to_string(), "b".to_string()),
            ("a b c d e f g h i".to_string(), "a b c d e f g h i".to_string()),
        ];
        assert!((corpus_wer(&pairs).unwrap() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn human_counts() {
        assert_eq!(human_count(18_400_000), "18M");
        assert_eq!(human_count(36_400), "36k");
        assert_eq!(human_count(512), "512");
    }

    fn report(id: &str, vals: &[f64]) -> WerReport {
        let mut rows = Vec::new();
        let mut k = 0;
        for c in NoiseCategory::ALL {
            for s in GRID_SNRS {
                rows.push(WerRow {
                    model_id: id.into(),
                    category: c,
                    snr_db: s,
                    wer_percent: vals[k % vals.len()],
                    n_words: 10,
                    n_errors: 0,
                });
                k += 1;
            }
        }
        WerReport { rows }
    }

    #[test]
    fn compare_self_and_antisymmetry() {
        let a = report("a", &[1.0, 5.0, 3.0]);
        let b = report("b", &[2.0, 4.0]);
        let s = compare(&a, &a).unwrap();
        assert!(s.cells.iter().all(|c| c.delta == 0.0));
        assert_eq!(s.ties, 16);
        let ab = compare(&a, &b).unwrap();
        let ba = compare(&b, &a).unwrap();
        for (x, y) in ab.cells.iter().zip(&ba.cells) {
            assert_eq!(x.delta, -y.delta);
        }
        assert_eq!(ab.a_wins, ba.b_wins);
        let mut short = b.clone();
        short.rows.pop();
        assert!(compare(&a, &short).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let a = report("a", &[1.25, 100.0, 122.7]);
        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        assert_eq!(WerReport::read_csv(buf.as_slice()).unwrap(), a);
    }
}
