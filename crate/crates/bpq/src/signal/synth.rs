//! Synthetic ECG/PPG generator.
//!
//! Each segment draws a heart rate, a pulse-transit delay tau and a pulse
//! amplitude, then renders an ECG as a train of narrow Gaussian R-peaks and a
//! PPG as two-Gaussian (systolic + dicrotic) pulses delayed by tau. Pressure
//! labels follow
//!
//! ```text
//! SBP = 180 - 250*tau + 10*(a - 1) + N(0, 2)
//! DBP = 0.55*SBP + 10 + N(0, 1.5)      (re-drawn until SBP > DBP + 10)
//! ```
//!
//! so transit time carries almost all of the label signal, the way pulse
//! arrival relates to pressure in the real measurement chain. Channels are
//! z-scored per segment.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::{DataError, Result, SegmentDataset, SignalSegment, SAMPLE_RATE, SEQ_LEN};

const ECG_PEAK_SIGMA_S: f64 = 0.02;
const PPG_SYSTOLIC_SIGMA_S: f64 = 0.08;
const PPG_DICROTIC_SIGMA_S: f64 = 0.10;
const PPG_DICROTIC_DELAY_S: f64 = 0.25;
const PPG_DICROTIC_FRACTION: f64 = 0.35;
const CHANNEL_NOISE_SD: f64 = 0.05;

/// Deterministic synthetic dataset: identical `(n, seed)` produce
/// bit-identical output.
pub fn generate_synthetic(n: usize, seed: u64) -> Result<SegmentDataset> {
    if n == 0 {
        return Err(DataError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hr_dist = Uniform::new(50.0f64, 110.0);
    let tau_dist = Uniform::new(0.15f64, 0.35);
    let amp_dist = Uniform::new(0.8f64, 1.2);
    let sbp_noise = Normal::new(0.0f64, 2.0).expect("valid sd");
    let dbp_noise = Normal::new(0.0f64, 1.5).expect("valid sd");
    let chan_noise = Normal::new(0.0f64, CHANNEL_NOISE_SD).expect("valid sd");

    let mut segments = Vec::with_capacity(n);
    for _ in 0..n {
        let hr = hr_dist.sample(&mut rng);
        let tau = tau_dist.sample(&mut rng);
        let amp = amp_dist.sample(&mut rng);

        let sbp = loop {
            let s = 180.0 - 250.0 * tau + 10.0 * (amp - 1.0) + sbp_noise.sample(&mut rng);
            if (60.0..=250.0).contains(&s) {
                break s;
            }
        };
        let dbp = loop {
            let d = 0.55 * sbp + 10.0 + dbp_noise.sample(&mut rng);
            if sbp > d + 10.0 && (30.0..=150.0).contains(&d) {
                break d;
            }
        };

        let period = 60.0 / hr;
        let phase = rng.gen_range(0.0..period);

        let mut ecg = vec![0.0f64; SEQ_LEN];
        let mut ppg = vec![0.0f64; SEQ_LEN];
        // cover beats whose pulses spill into the window from either side
        let first_beat = -2i64;
        let last_beat = ((10.0 + 2.0) / period).ceil() as i64;
        for k in first_beat..=last_beat {
            let t_beat = phase + k as f64 * period;
            add_gaussian(&mut ecg, t_beat, ECG_PEAK_SIGMA_S, 1.0);
            add_gaussian(&mut ppg, t_beat + tau, PPG_SYSTOLIC_SIGMA_S, amp);
            add_gaussian(
                &mut ppg,
                t_beat + tau + PPG_DICROTIC_DELAY_S,
                PPG_DICROTIC_SIGMA_S,
                PPG_DICROTIC_FRACTION * amp,
            );
        }
        for v in ecg.iter_mut() {
            *v += chan_noise.sample(&mut rng);
        }
        for v in ppg.iter_mut() {
            *v += chan_noise.sample(&mut rng);
        }

        segments.push(SignalSegment {
            ecg: zscore(&ecg),
            ppg: zscore(&ppg),
            sbp: sbp as f32,
            dbp: dbp as f32,
        });
    }
    SegmentDataset::new(segments, "synthetic")
}

fn add_gaussian(signal: &mut [f64], center_s: f64, sigma_s: f64, amplitude: f64) {
    let center = center_s * SAMPLE_RATE;
    let sigma = sigma_s * SAMPLE_RATE;
    let lo = ((center - 4.0 * sigma).floor().max(0.0)) as usize;
    let hi = ((center + 4.0 * sigma).ceil().min((SEQ_LEN - 1) as f64)) as usize;
    if center + 4.0 * sigma < 0.0 || lo >= SEQ_LEN {
        return;
    }
    for (i, v) in signal.iter_mut().enumerate().take(hi + 1).skip(lo) {
        let d = (i as f64 - center) / sigma;
        *v += amplitude * (-0.5 * d * d).exp();
    }
}

fn zscore(x: &[f64]) -> Vec<f32> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-12);
    x.iter().map(|v| ((v - mean) / sd) as f32).collect()
}

#[cfg(test)]
pub(crate) mod detector {
    //! Oracle peak/foot detector used only by tests: recovers the
    //! transit delay from the rendered waveforms, independent of the model.

    use super::super::{SignalSegment, SAMPLE_RATE};

    /// Indices of ECG R-peaks: local maxima above 2 z-units, at least 0.4 s
    /// apart.
    pub fn r_peaks(ecg: &[f32]) -> Vec<usize> {
        let min_gap = (0.4 * SAMPLE_RATE) as usize;
        let mut peaks = Vec::new();
        for i in 1..ecg.len() - 1 {
            if ecg[i] > 2.0 && ecg[i] >= ecg[i - 1] && ecg[i] >= ecg[i + 1] {
                if let Some(&last) = peaks.last() {
                    if i - last < min_gap {
                        if ecg[i] > ecg[last] {
                            *peaks.last_mut().unwrap() = i;
                        }
                        continue;
                    }
                }
                peaks.push(i);
            }
        }
        peaks
    }

    /// Mean R-peak -> PPG systolic-peak delay in seconds, plus the mean
    /// pulse height at the detected peak (the amplitude estimate).
    pub fn transit_delay(seg: &SignalSegment) -> Option<(f64, f64)> {
        let window = (0.5 * SAMPLE_RATE) as usize;
        let mut delays = Vec::new();
        let mut heights = Vec::new();
        for &r in r_peaks(&seg.ecg).iter() {
            let end = (r + window).min(seg.ppg.len());
            if end <= r + 2 || end - r < window {
                continue; // pulse would be truncated by the segment edge
            }
            let (argmax, max) = seg.ppg[r..end]
                .iter()
                .enumerate()
                .fold((0usize, f32::NEG_INFINITY), |acc, (i, &v)| {
                    if v > acc.1 {
                        (i, v)
                    } else {
                        acc
                    }
                });
            if argmax > 0 {
                delays.push(argmax as f64 / SAMPLE_RATE);
                heights.push(max as f64);
            }
        }
        if delays.is_empty() {
            return None;
        }
        let tau = delays.iter().sum::<f64>() / delays.len() as f64;
        let amp = heights.iter().sum::<f64>() / heights.len() as f64;
        Some((tau, amp))
    }
}
