//! Scores two stub recognizers on the category x SNR grid and prints the
//! table in Markdown.
use std::collections::BTreeMap;

use avsr::corpus::generate_corpus;
use avsr::evalkit::{compare, eval_grid_many, NoisyUtterance, Recognizer, GRID_SNRS};
use avsr::signal::{NoiseBank, NoiseCategory};

fn main() -> avsr::Result<()> {
    let corpus = generate_corpus("test", 8, 3)?;
    let bank = NoiseBank::generate(10, 3)?.test;
    let truth: BTreeMap<&str, &str> = corpus.iter().map(|s| (s.id.as_str(), s.text.as_str())).collect();
    // Gets everything right above 5 dB and drops the last word below.
    let threshold = |u: &NoisyUtterance| {
        let text = truth[u.id];
        Ok(if u.snr_db > 5.0 {
            text.to_string()
        } else {
            text.rsplit_once(' ').map_or("", |(head, _)| head).to_string()
        })
    };
    let silent = |_: &NoisyUtterance| Ok(String::new());
    let systems: [(&str, &dyn Recognizer); 2] = [("threshold", &threshold), ("silent", &silent)];
    let reports = eval_grid_many(&systems, &corpus, &bank, &NoiseCategory::ALL, &GRID_SNRS, 1)?;
    let all = avsr::evalkit::WerReport::merge(reports.clone());
    print!("{}", all.to_markdown(&BTreeMap::new()));
    let c = compare(&reports[0], &reports[1])?;
    println!("threshold beats silent in {} of {} cells", c.a_wins, c.cells.len());
    Ok(())
}
