//! Audio-visual fusion front end. Convolutional stems per modality, the lip
//! stream repeated up to the mel frame rate, cross-attention with audio
//! queries, and a linear head whose output is added to the noisy mel.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Binder};
use crate::params::{ParamStore, Role};
use crate::seed;
use crate::signal::{MelSpectrogram, N_MELS};
use crate::tensor::{sinusoidal_positions, Mat, Real};
use crate::video::{LipFrameSequence, VIDEO_DIM};

/// Mel frames per video frame (100 Hz over 25 Hz).
pub const RATE_RATIO: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_dim: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            d_model: 64,
            heads: 4,
            layers: 2,
            ff_dim: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionModule {
    pub config: FusionConfig,
    /// Every tensor is named `fusion.*` and carries role `Fusion`.
    pub params: ParamStore,
}

/// Video row feeding each of `t` mel frames: `floor(i / 4)`, clamped.
pub fn align_index(t: usize, video_frames: usize) -> Vec<usize> {
    (0..t).map(|i| (i / RATE_RATIO).min(video_frames - 1)).collect()
}

/// Repeats 25 Hz feature rows up to `t` frames at 100 Hz.
pub fn align_rates(video: &Mat<f32>, t: usize) -> Result<Mat<f32>> {
    if video.rows == 0 {
        return Err(Error::invalid("empty video"));
    }
    if t == 0 {
        return Err(Error::invalid("target length must be at least 1"));
    }
    let mut out = Mat::zeros(t, video.cols);
    for (i, src) in align_index(t, video.rows).into_iter().enumerate() {
        out.row_mut(i).copy_from_slice(video.row(src));
    }
    Ok(out)
}

impl FusionModule {
    pub fn new(config: FusionConfig, seed: u64) -> Result<Self> {
        let mut rng = seed::rng_for(seed, &[seed::tag("fusion-init")]);
        let r = &mut rng;
        let d = config.d_model;
        let role = Role::Fusion;
        let mut p = ParamStore::new();
        nn::init_conv(&mut p, r, "fusion.audio.conv1", d, N_MELS, role)?;
        nn::init_conv(&mut p, r, "fusion.audio.conv2", d, d, role)?;
        nn::init_conv(&mut p, r, "fusion.visual.conv1", d, VIDEO_DIM, role)?;
        nn::init_conv(&mut p, r, "fusion.visual.conv2", d, d, role)?;
        for l in 0..config.layers {
            nn::init_layer_norm(&mut p, &format!("fusion.xattn.{l}.ln_q"), d, role)?;
            nn::init_layer_norm(&mut p, &format!("fusion.xattn.{l}.ln_kv"), d, role)?;
            nn::init_attention(&mut p, r, &format!("fusion.xattn.{l}.attn"), d, role)?;
            nn::init_layer_norm(&mut p, &format!("fusion.xattn.{l}.ln_ff"), d, role)?;
            nn::init_feed_forward(&mut p, r, &format!("fusion.xattn.{l}.ff"), d, config.ff_dim, role)?;
        }
        nn::init_layer_norm(&mut p, "fusion.ln_out", d, role)?;
        p.insert_const("fusion.head.weight", &[N_MELS, d], role, 0.0)?;
        p.insert_const("fusion.head.bias", &[N_MELS], role, 0.0)?;
        Ok(FusionModule { config, params: p })
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Fusion graph from `T × 80` mel and `T_v × 32` video nodes.
    pub fn fuse_graph<T: Real>(&self, tape: &mut Tape<T>, b: &Binder, mel: Var, video: Var) -> Var {
        let t = tape.value(mel).rows;
        let tv = tape.value(video).rows;
        let d = self.config.d_model;
        let a = b.conv1d(tape, "fusion.audio.conv1", mel, 1);
        let a = tape.gelu(a);
        let a = b.conv1d(tape, "fusion.audio.conv2", a, 1);
        let a = tape.gelu(a);
        let v = b.conv1d(tape, "fusion.visual.conv1", video, 1);
        let v = tape.gelu(v);
        let v = b.conv1d(tape, "fusion.visual.conv2", v, 1);
        let v = tape.gelu(v);
        let v = tape.gather_rows(v, align_index(t, tv));
        let pos = tape.constant(sinusoidal_positions(t, d));
        let mut x = tape.add(a, pos);
        let v = tape.add(v, pos);
        for l in 0..self.config.layers {
            let q = b.layer_norm(tape, &format!("fusion.xattn.{l}.ln_q"), x);
            let kv = b.layer_norm(tape, &format!("fusion.xattn.{l}.ln_kv"), v);
            let att = b.mha(tape, &format!("fusion.xattn.{l}.attn"), q, kv, self.config.heads, false);
            x = tape.add(x, att);
            let n = b.layer_norm(tape, &format!("fusion.xattn.{l}.ln_ff"), x);
            let f = b.feed_forward(tape, &format!("fusion.xattn.{l}.ff"), n);
            x = tape.add(x, f);
        }
        let x = b.layer_norm(tape, "fusion.ln_out", x);
        let y = b.linear(tape, "fusion.head", x);
        tape.add(y, mel)
    }

    pub fn fuse(&self, noisy: &MelSpectrogram, video: &LipFrameSequence) -> Result<MelSpectrogram> {
        self.fuse_with(&Binder::frozen(&[&self.params]), &noisy.frames, &video.frames)
    }

    pub fn fuse_with(&self, b: &Binder, mel: &Mat<f32>, video: &Mat<f32>) -> Result<MelSpectrogram> {
        check_inputs(mel, video)?;
        let mut tape = Tape::<f32>::new();
        let m = tape.constant(mel.clone());
        let v = tape.constant(video.clone());
        let y = self.fuse_graph(&mut tape, b, m, v);
        MelSpectrogram::new(tape.value(y).clone())
    }
}

/// Mel and video must describe the same stretch of time to within one
/// video frame.
pub fn check_inputs(mel: &Mat<f32>, video: &Mat<f32>) -> Result<()> {
    if mel.cols != N_MELS || video.cols != VIDEO_DIM {
        return Err(Error::Shape(format!(
            "fusion expects T×{N_MELS} mel and T_v×{VIDEO_DIM} video, got {:?} and {:?}",
            mel.shape(),
            video.shape()
        )));
    }
    if mel.rows == 0 || video.rows == 0 {
        return Err(Error::invalid("empty fusion input"));
    }
    let expect = mel.rows.div_ceil(RATE_RATIO);
    if expect.abs_diff(video.rows) > 1 {
        return Err(Error::invalid(format!(
            "{} mel frames need about {expect} video frames, got {}",
            mel.rows, video.rows
        )));
    }
    if !mel.is_finite() || !video.is_finite() {
        return Err(Error::NonFinite("fusion input".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Mat<f32> {
        let mut r = seed::rng(seed);
        Mat::from_vec(rows, cols, (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect())
    }

    /// A module with a live head, so the stems affect the output.
    fn live_module() -> FusionModule {
        let mut f = FusionModule::new(FusionConfig::default(), 3).unwrap();
        let head = f.params.get_mut("fusion.head.weight").unwrap();
        let mut r = seed::rng(9);
        for v in head.data.iter_mut() {
            *v = r.random_range(-0.1..0.1);
        }
        f
    }

    #[test]
    fn align_examples() {
        assert_eq!(align_index(8, 2), vec![0, 0, 0, 0, 1, 1, 1, 1]);
        assert_eq!(align_index(5, 1), vec![0; 5]);
        assert_eq!(*align_index(98, 25).last().unwrap(), 24);
        let v = random(2, 3, 0);
        let a = align_rates(&v, 8).unwrap();
        assert_eq!(a.row(5), v.row(1));
        assert!(align_rates(&Mat::zeros(0, 3), 4).is_err());
    }

    #[test]
    fn shape_is_preserved() {
        let f = live_module();
        for t in [1usize, 98, 500] {
            let mel = MelSpectrogram::new(random(t, N_MELS, t as u64)).unwrap();
            let v = LipFrameSequence::new(random(t.div_ceil(4), VIDEO_DIM, 1)).unwrap();
            let out = f.fuse(&mel, &v).unwrap();
            assert_eq!(out.frames.shape(), (t, N_MELS));
            assert_eq!(out, f.fuse(&mel, &v).unwrap());
        }
    }

    #[test]
    fn video_path_is_live() {
        let f = live_module();
        let mel = MelSpectrogram::new(random(40, N_MELS, 1)).unwrap();
        let v = LipFrameSequence::new(random(10, VIDEO_DIM, 2)).unwrap();
        let zero = LipFrameSequence::new(Mat::zeros(10, VIDEO_DIM)).unwrap();
        let d = f.fuse(&mel, &v).unwrap().frames.max_abs_diff(&f.fuse(&mel, &zero).unwrap().frames);
        assert!(d > 0.0);
    }

    #[test]
    fn zero_head_passes_noisy_mel_through() {
        let f = FusionModule::new(FusionConfig::default(), 5).unwrap();
        let mel = MelSpectrogram::new(random(30, N_MELS, 4)).unwrap();
        let v = LipFrameSequence::new(random(8, VIDEO_DIM, 5)).unwrap();
        assert_eq!(f.fuse(&mel, &v).unwrap(), mel);
    }

    #[test]
    fn duration_mismatch_rejected() {
        let f = FusionModule::new(FusionConfig::default(), 5).unwrap();
        let mel = MelSpectrogram::new(random(98, N_MELS, 4)).unwrap();
        assert!(f.fuse(&mel, &LipFrameSequence::new(random(20, VIDEO_DIM, 1)).unwrap()).is_err());
        assert!(f.fuse(&mel, &LipFrameSequence::new(random(26, VIDEO_DIM, 1)).unwrap()).is_ok());
    }

    #[test]
    fn all_tensors_are_fusion_role() {
        let f = FusionModule::new(FusionConfig::default(), 0).unwrap();
        assert!(f.params.iter().all(|p| p.role == Role::Fusion && p.name.starts_with("fusion.")));
    }
}
