use std::collections::BTreeMap;

use proptest::prelude::*;

use avsr::corpus::AvSample;
use avsr::evalkit::{compare, corpus_wer, eval_grid, wer, NoisyUtterance, ParamColumns, WerReport, WerRow, GRID_SNRS};
use avsr::signal::{NoiseBank, NoiseCategory};

/// Minimum edit distance by trying every alignment recursively.
fn brute_edit(a: &[&str], b: &[&str]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let sub = brute_edit(ra, rb) + usize::from(x != y);
            sub.min(brute_edit(ra, b) + 1).min(brute_edit(a, rb) + 1)
        }
    }
}

fn words(max: usize, min: usize) -> impl Strategy<Value = Vec<&'static str>> {
    prop::collection::vec(prop::sample::select(vec!["go", "red", "sky", "cat", "up"]), min..=max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn wer_equals_exhaustive_edit_distance(r in words(6, 1), h in words(6, 0)) {
        let c = wer(&r.join(" "), &h.join(" ")).unwrap();
        prop_assert_eq!(c.errors(), brute_edit(&r, &h));
        prop_assert_eq!(c.ref_words, r.len());
        prop_assert!(c.substitutions + c.deletions <= r.len());
        prop_assert_eq!(c.deletions + h.len(), r.len() + c.insertions);
    }
}

#[test]
fn corpus_wer_weights_by_words() {
    // One error in a 1-word clip and none in a 9-word clip: 10% overall,
    // not the 50% a mean of per-clip rates would give.
    let pairs = vec![
        ("a".to_string(), "b".to_string()),
        ("a b c d e f g h i".to_string(), "a b c d e f g h i".to_string()),
    ];
    assert!((corpus_wer(&pairs).unwrap() - 10.0).abs() < 1e-12);
}

fn tiny_corpus() -> (Vec<AvSample>, NoiseBank) {
    let corpus = (0..3)
        .map(|i| AvSample::synth(format!("u{i}"), ["red sky", "go up", "cat"][i].into(), i as u64).unwrap())
        .collect();
    let bank = NoiseBank::generate(10, 1).unwrap().test;
    (corpus, bank)
}

#[test]
fn stub_recognizers_give_zero_and_hundred() {
    let (corpus, bank) = tiny_corpus();
    let texts: BTreeMap<String, String> = corpus.iter().map(|s| (s.id.clone(), s.text.clone())).collect();
    let perfect = |u: &NoisyUtterance| Ok(texts[u.id].clone());
    let silent = |_: &NoisyUtterance| Ok(String::new());
    let cats = [NoiseCategory::Music];
    let p = eval_grid("perfect", &perfect, &corpus, &bank, &cats, &[0.0], 3).unwrap();
    let s = eval_grid("silent", &silent, &corpus, &bank, &cats, &[0.0], 3).unwrap();
    assert_eq!(p.rows[0].wer_percent, 0.0);
    assert_eq!(s.rows[0].wer_percent, 100.0);
    assert_eq!(s.rows[0].n_words, 5);
}

#[test]
fn grid_has_sixteen_cells_and_is_deterministic() {
    let (corpus, bank) = tiny_corpus();
    // A recognizer whose output depends on the noisy audio it receives.
    let echo = |u: &NoisyUtterance| Ok(if u.audio.samples()[100] > 0.0 { "red".into() } else { "sky".into() });
    let a = eval_grid("echo", &echo, &corpus, &bank, &NoiseCategory::ALL, &GRID_SNRS, 11).unwrap();
    let b = eval_grid("echo", &echo, &corpus, &bank, &NoiseCategory::ALL, &GRID_SNRS, 11).unwrap();
    assert_eq!(a.rows.len(), 16);
    assert_eq!(a, b);
    assert!(a.rows.iter().all(|r| r.wer_percent >= 0.0 && r.n_words > 0));
}

fn row(id: &str, c: NoiseCategory, snr: f64, wer: f64) -> WerRow {
    WerRow {
        model_id: id.into(),
        category: c,
        snr_db: snr,
        wer_percent: wer,
        n_words: 1000,
        n_errors: (wer * 10.0).round() as usize,
    }
}

#[test]
fn markdown_matches_table_layout_fixture() {
    let values: [(&str, [f64; 16]); 3] = [
        ("full", [60.7, 10.0, 2.9, 2.5, 13.7, 4.1, 2.8, 2.5, 18.8, 4.7, 2.7, 2.4, 16.6, 8.6, 3.7, 2.4]),
        ("babble", [51.5, 8.3, 2.8, 2.6, 48.5, 7.9, 3.3, 2.8, 36.1, 8.3, 3.3, 2.7, 122.7, 79.1, 6.6, 2.8]),
        ("routed-category", [51.6, 8.3, 2.8, 2.6, 11.5, 3.9, 3.0, 2.7, 17.2, 4.4, 2.9, 2.5, 9.2, 5.3, 2.9, 2.6]),
    ];
    let mut report = WerReport::default();
    for (id, v) in values {
        for (k, w) in v.iter().enumerate() {
            report.rows.push(row(id, NoiseCategory::ALL[k / 4], GRID_SNRS[k % 4], *w));
        }
    }
    let params: BTreeMap<String, ParamColumns> = [
        ("full", 18_000_000, 92_000_000),
        ("babble", 18_000_000, 92_000_000),
        ("routed-category", 72_000_000, 146_000_000),
    ]
    .into_iter()
    .map(|(id, t, a)| (id.to_string(), ParamColumns { trainable: t, total: a }))
    .collect();
    let md = report.to_markdown(&params);
    let golden = include_str!("fixtures/table_layout.md");
    assert_eq!(md, golden);
    let full_line = md.lines().find(|l| l.starts_with("| full |")).unwrap();
    let cells: Vec<&str> = full_line.split('|').map(str::trim).collect();
    // Columns: "", model, TrP, ToP, Babble -10, Babble 0, ...
    assert_eq!(cells[5], "10.0");
}

#[test]
fn csv_round_trip_preserves_rows() {
    let mut report = WerReport::default();
    for (k, c) in NoiseCategory::ALL.iter().enumerate() {
        report.rows.push(row("x", *c, GRID_SNRS[k], 12.5 * k as f64));
    }
    let mut buf = Vec::new();
    report.write_csv(&mut buf).unwrap();
    assert_eq!(WerReport::read_csv(buf.as_slice()).unwrap(), report);
}

#[test]
fn compare_counts_wins() {
    let mut a = WerReport::default();
    let mut b = WerReport::default();
    for (k, c) in NoiseCategory::ALL.iter().enumerate() {
        a.rows.push(row("a", *c, 0.0, 10.0 + k as f64));
        b.rows.push(row("b", *c, 0.0, 12.0));
    }
    let cmp = compare(&a, &b).unwrap();
    let back = compare(&b, &a).unwrap();
    for (x, y) in cmp.cells.iter().zip(&back.cells) {
        assert_eq!(x.delta, -y.delta);
    }
    assert_eq!(cmp.a_wins, 2);
}
