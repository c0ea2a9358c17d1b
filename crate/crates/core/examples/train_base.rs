//! Trains the miniature recognizer on a small clean corpus and transcribes a
//! held-out utterance.
use avsr::asr::{train_base, BaseExample, BaseTrainConfig};
use avsr::corpus::generate_corpus;
use avsr::signal::log_mel;

fn main() -> avsr::Result<()> {
    let examples = |name: &str, n: usize| -> avsr::Result<Vec<BaseExample>> {
        generate_corpus(name, n, 1)?
            .into_iter()
            .map(|s| Ok(BaseExample { mel: log_mel(&s.audio)?.frames, text: s.text }))
            .collect()
    };
    let train = examples("train", 256)?;
    let heldout = examples("val", 16)?;
    let cfg = BaseTrainConfig {
        steps: 150,
        warmup: 20,
        ..Default::default()
    };
    let (model, report) = train_base(&train, &heldout, &cfg)?;
    println!(
        "{} parameters, loss {:.3} -> {:.3}, held-out WER {:.1}%",
        model.param_count(),
        report.losses.first().copied().unwrap_or(f64::NAN),
        report.losses.last().copied().unwrap_or(f64::NAN),
        report.heldout_wer.unwrap_or(f64::NAN)
    );
    let probe = generate_corpus("probe", 1, 9)?.remove(0);
    println!("ref: {}\nhyp: {}", probe.text, model.transcribe(&log_mel(&probe.audio)?)?);
    Ok(())
}
