//! The whole workflow through the library: synthesize, train the base, one
//! specialist and the classifiers, then evaluate direct and routed systems on
//! a deliberately tiny configuration in a temporary work directory.
use avsr::config::{RunConfig, RunInfo};
use avsr::pipeline::{self, DistillCorpora, ReportFormat, SystemSpec, Workspace};
use avsr::selector::{Head, RouteMode};
use avsr::signal::{NoiseCategory, NoiseScenario};

fn main() -> avsr::Result<()> {
    let mut cfg = RunConfig::with_seed(11);
    cfg.train_size = 48;
    cfg.test_size = 6;
    cfg.pretrain_size = 16;
    cfg.val_size = 4;
    cfg.noise_clips_per_category = 10;
    cfg.base.steps = 60;
    cfg.base.warmup = 10;
    cfg.schedule.scale_ratio = 2e-4;
    cfg.schedule.batch_size = 4;
    cfg.classifier.steps = 40;
    cfg.classifier.channels = 16;
    cfg.classifier_train_size = 128;
    cfg.classifier_val_size = 32;
    cfg.validate()?;

    let dir = tempfile::tempdir()?;
    let ws = Workspace::new(dir.path());
    let info = RunInfo::new(cfg.clone(), "example");
    let s = pipeline::synth(&ws, &info)?;
    info.write(dir.path())?;
    println!("synth: {} train, {} test", s.train, s.test);

    let (base, report) = pipeline::train_base_stage(&ws, &info)?;
    println!("base: held-out WER {:.1}%", report.heldout_wer.unwrap_or(f64::NAN));

    let corpora = DistillCorpora::prepare(&ws, &cfg, &base)?;
    let noise = pipeline::load_noise(&ws)?;
    let music = NoiseScenario::Category(NoiseCategory::Music);
    let (_, log) = pipeline::train_adapter_stage(&ws, &info, &base, music, &corpora, &noise, |_| {})?;
    let ft = |l: &str| log.validation_at(l).and_then(|b| b.l_ft).unwrap_or(f64::NAN);
    println!("music set: val l_ft {:.3} -> {:.3}", ft("init"), ft("f2"));
    pipeline::train_classifier_stage(&ws, &info, &[Head::Category, Head::Snr])?;

    let systems = [
        SystemSpec::Base,
        SystemSpec::Direct(music),
        SystemSpec::Routed { mode: RouteMode::Category, oracle: true },
    ];
    // Routing needs every category set; reuse the music set for the others.
    for c in NoiseCategory::ALL.into_iter().filter(|c| *c != NoiseCategory::Music) {
        let mut set = pipeline::load_adapters(&ws, music)?;
        set.scenario = NoiseScenario::Category(c);
        set.save(&ws.adapter_dir(set.scenario))?;
    }
    let outcome = pipeline::evaluate(&ws, &cfg, &systems)?;
    let path = pipeline::write_outcome(&ws.reports_dir(), &outcome, ReportFormat::Markdown, &info)?;
    print!("{}", std::fs::read_to_string(path)?);
    Ok(())
}
