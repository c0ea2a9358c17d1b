//! Synthetic audio-visual corpora and their on-disk form: raw `.f32` audio,
//! `.vf32` lip features and a JSON-lines manifest.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::signal::{random_sentence, synth_utterance, NoiseCategory, Split, Waveform};
use crate::tensor::Mat;
use crate::video::{synth_video, LipFrameSequence, VIDEO_DIM};

/// One clean utterance with its time-aligned lip stream.
#[derive(Clone, Debug, PartialEq)]
pub struct AvSample {
    pub id: String,
    pub text: String,
    pub audio: Waveform,
    pub video: LipFrameSequence,
}

impl AvSample {
    pub fn synth(id: String, text: String, seed: u64) -> Result<AvSample> {
        let audio = synth_utterance(&text, seed)?;
        let video = synth_video(&text, audio.len(), seed)?;
        Ok(AvSample { id, text, audio, video })
    }
}

/// `n` utterances of 2–3 lexicon words. `name` prefixes every id and keys
/// the random stream, so corpora with different names never share ids.
pub fn generate_corpus(name: &str, n: usize, seed: u64) -> Result<Vec<AvSample>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let s = seed::derive(seed, &[seed::tag(name), i as u64]);
            let mut rng = seed::rng(s);
            let text = random_sentence(&mut rng, 2, 3);
            AvSample::synth(format!("{name}-{i:05}"), text, rng.random())
        })
        .collect()
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub text: String,
    pub audio_path: String,
    pub video_path: String,
    pub category: Option<NoiseCategory>,
    pub snr_db: Option<f64>,
    pub split: Split,
}

pub fn write_f32(path: &Path, data: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_f32(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    if bytes.len() % 4 != 0 {
        return Err(Error::invalid(format!("{}: size is not a multiple of 4", path.display())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn read_waveform(path: &Path) -> Result<Waveform> {
    Waveform::new(read_f32(path)?)
}

pub fn write_video(path: &Path, v: &LipFrameSequence) -> Result<()> {
    write_f32(path, &v.frames.data)
}

/// Frame count is recovered from the file size.
pub fn read_video(path: &Path) -> Result<LipFrameSequence> {
    let data = read_f32(path)?;
    if data.len() % VIDEO_DIM != 0 {
        return Err(Error::invalid(format!(
            "{}: {} values is not a whole number of {VIDEO_DIM}-dim frames",
            path.display(),
            data.len()
        )));
    }
    LipFrameSequence::new(Mat::from_vec(data.len() / VIDEO_DIM, VIDEO_DIM, data))
}

/// Writes `samples` under `dir/{audio,video}/` and returns manifest records
/// with paths relative to `dir`.
pub fn write_samples(dir: &Path, samples: &[AvSample], split: Split) -> Result<Vec<ManifestRecord>> {
    fs::create_dir_all(dir.join("audio"))?;
    fs::create_dir_all(dir.join("video"))?;
    samples
        .iter()
        .map(|s| {
            let audio_path = format!("audio/{}.f32", s.id);
            let video_path = format!("video/{}.vf32", s.id);
            write_f32(&dir.join(&audio_path), s.audio.samples())?;
            write_video(&dir.join(&video_path), &s.video)?;
            Ok(ManifestRecord {
                id: s.id.clone(),
                text: s.text.clone(),
                audio_path,
                video_path,
                category: None,
                snr_db: None,
                split,
            })
        })
        .collect()
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let f = fs::File::open(path).map_err(|_| Error::Missing(path.to_path_buf()))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Loads the samples of `split` listed in the manifest at `dir/manifest.jsonl`.
pub fn load_split(dir: &Path, split: Split) -> Result<Vec<AvSample>> {
    let records = read_manifest(&dir.join("manifest.jsonl"))?;
    records
        .into_par_iter()
        .filter(|r| r.split == split)
        .map(|r| {
            Ok(AvSample {
                audio: read_waveform(&dir.join(&r.audio_path))?,
                video: read_video(&dir.join(&r.video_path))?,
                id: r.id,
                text: r.text,
            })
        })
        .collect()
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.jsonl")
}
