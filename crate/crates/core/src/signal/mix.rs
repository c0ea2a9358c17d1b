use super::Waveform;
use crate::error::{Error, Result};

/// Mean squared amplitude over the whole clip.
pub fn mean_power(x: &[f32]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>() / x.len() as f64
}

/// Gain `g` such that `10·log10(P_clean / P(g·noise)) = snr_db`.
pub fn noise_gain(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<f64> {
    let pc = mean_power(clean.samples());
    let pn = mean_power(noise.samples());
    if pc <= 0.0 {
        return Err(Error::ZeroPower("clean"));
    }
    if pn <= 0.0 {
        return Err(Error::ZeroPower("noise"));
    }
    if !snr_db.is_finite() {
        return Err(Error::invalid(format!("snr {snr_db} dB")));
    }
    Ok((pc / (pn * 10f64.powf(snr_db / 10.0))).sqrt())
}

/// `clean + g·noise` at the requested full-clip SNR.
pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform> {
    if clean.len() != noise.len() {
        return Err(Error::Shape(format!(
            "clean has {} samples, noise {}",
            clean.len(),
            noise.len()
        )));
    }
    let g = noise_gain(clean, noise, snr_db)?;
    let samples = clean
        .samples()
        .iter()
        .zip(noise.samples())
        .map(|(c, n)| (*c as f64 + g * *n as f64) as f32)
        .collect();
    Waveform::new(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gain_at_equal_powers() {
        let a = Waveform::new(vec![0.1, -0.1, 0.1, -0.1]).unwrap();
        let b = Waveform::new(vec![-0.1, 0.1, 0.1, 0.1]).unwrap();
        assert_eq!(noise_gain(&a, &b, 0.0).unwrap(), 1.0);
        assert!((noise_gain(&a, &b, 10.0).unwrap() - 0.316_228).abs() < 1e-6);
        assert!((noise_gain(&a, &b, -10.0).unwrap() - 3.162_278).abs() < 1e-6);
    }

    #[test]
    fn zero_power_and_length_errors() {
        let z = Waveform::new(vec![0.0; 4]).unwrap();
        let a = Waveform::new(vec![0.1; 4]).unwrap();
        assert!(matches!(mix_at_snr(&z, &a, 0.0), Err(Error::ZeroPower("clean"))));
        assert!(matches!(mix_at_snr(&a, &z, 0.0), Err(Error::ZeroPower("noise"))));
        let short = Waveform::new(vec![0.1; 3]).unwrap();
        assert!(mix_at_snr(&a, &short, 0.0).is_err());
    }
}
