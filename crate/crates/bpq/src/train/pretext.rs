//! Masked-patch pretext: self-supervised warm-up of the encoder on synthetic
//! source signals, standing in for large-scale pre-training on another
//! biosignal modality.
//!
//! Source segments are mixtures of 3-8 random sinusoids plus 1/f noise, with
//! channel 1 carrying a delayed copy of part of channel 0 so that
//! cross-channel attention has something to learn. A fraction of patch
//! tokens have their embedding replaced by a learned mask vector; the
//! encoder plus a linear reconstruction head are trained on masked-patch
//! MSE. The head is discarded and the encoder saved as a checkpoint.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::model::{
    insert_params, EncoderModel, ModelConfig, ModelVars, Provenance,
};
use crate::tensor::{GradTape, Tensor, TensorError, Var};

use super::{Adam, Result, TrainError};

#[derive(Debug, Clone)]
pub struct PretextOptions {
    /// Fraction of patch tokens masked per segment, in (0, 1).
    pub mask_fraction: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Source-signal generator parameters.
    pub n_segments: usize,
    pub sinusoids: (usize, usize),
    pub freq_range_hz: (f64, f64),
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for PretextOptions {
    fn default() -> Self {
        Self {
            mask_fraction: 0.5,
            epochs: 20,
            seed: 42,
            n_segments: 512,
            sinusoids: (3, 8),
            freq_range_hz: (0.5, 18.0),
            batch_size: 32,
            learning_rate: 3e-4,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PretextEpoch {
    pub epoch: usize,
    pub recon_loss: f64,
}

#[derive(Debug, Clone, Default)]
pub struct PretextHistory {
    pub epochs: Vec<PretextEpoch>,
}

impl PretextHistory {
    pub fn write_jsonl(&self, path: &std::path::Path) -> std::io::Result<()> {
        let mut out = String::new();
        for rec in &self.epochs {
            out.push_str(&serde_json::to_string(rec).expect("serializable record"));
            out.push('\n');
        }
        std::fs::write(path, out)
    }
}

/// 1/f-ish noise via the classic row-update scheme: K staggered holds of
/// white noise summed together.
fn pink_noise(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    const ROWS: usize = 8;
    let normal = Normal::new(0.0f64, 1.0).expect("sd");
    let mut rows = [0.0f64; ROWS];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        for (k, row) in rows.iter_mut().enumerate() {
            if i % (1usize << k) == 0 {
                *row = normal.sample(rng);
            }
        }
        out.push(rows.iter().sum::<f64>() / (ROWS as f64).sqrt());
    }
    out
}

/// Synthetic 2-channel source segments, z-scored per channel. Distinct from
/// the ECG/PPG generator by construction.
fn generate_source_signals(
    cfg: &ModelConfig,
    opts: &PretextOptions,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<f32>> {
    let seq = cfg.seq_len;
    let dt = 1.0 / crate::signal::SAMPLE_RATE;
    let count_dist = Uniform::new_inclusive(opts.sinusoids.0, opts.sinusoids.1);
    let freq_dist = Uniform::new(opts.freq_range_hz.0, opts.freq_range_hz.1);
    let amp_dist = Uniform::new(0.3f64, 1.0);
    let phase_dist = Uniform::new(0.0f64, std::f64::consts::TAU);

    let mut segments = Vec::with_capacity(opts.n_segments);
    for _ in 0..opts.n_segments {
        let draw_mixture = |rng: &mut ChaCha8Rng| -> Vec<(f64, f64, f64)> {
            let count = count_dist.sample(rng);
            (0..count)
                .map(|_| (freq_dist.sample(rng), amp_dist.sample(rng), phase_dist.sample(rng)))
                .collect()
        };
        let mix_a = draw_mixture(rng);
        let mix_b = draw_mixture(rng);
        let delay = rng.gen_range(0.05..0.30);
        let pink_a = pink_noise(seq, rng);
        let pink_b = pink_noise(seq, rng);

        let eval = |mix: &[(f64, f64, f64)], t: f64| -> f64 {
            mix.iter()
                .map(|&(f, a, ph)| a * (std::f64::consts::TAU * f * t + ph).sin())
                .sum()
        };
        let mut ch0 = Vec::with_capacity(seq);
        let mut ch1 = Vec::with_capacity(seq);
        for i in 0..seq {
            let t = i as f64 * dt;
            ch0.push(eval(&mix_a, t) + 0.4 * pink_a[i]);
            ch1.push(0.6 * eval(&mix_a, t - delay) + 0.7 * eval(&mix_b, t) + 0.4 * pink_b[i]);
        }
        let mut seg = zscore(&ch0);
        seg.extend(zscore(&ch1));
        segments.push(seg);
    }
    segments
}

fn zscore(x: &[f64]) -> Vec<f32> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-12);
    x.iter().map(|v| ((v - mean) / sd) as f32).collect()
}

struct PretextHead {
    mask_vec: Tensor<f32>,
    recon_w: Tensor<f32>,
    recon_b: Tensor<f32>,
}

/// Pretext forward + loss for one batch. Masked token embeddings are
/// replaced by the mask vector before positional/channel embeddings are
/// added; the loss covers masked positions only.
#[allow(clippy::too_many_arguments)]
fn pretext_step(
    model: &EncoderModel<f32>,
    head: &PretextHead,
    batch_data: &[&Vec<f32>],
    masked_tokens: &[Vec<usize>],
    cfg: &ModelConfig,
) -> crate::tensor::Result<(GradTape<f32>, ModelVars, [Var; 3], Var)> {
    let b = batch_data.len();
    let (c, p, l, d) = (
        cfg.num_channels,
        cfg.patches_per_channel(),
        cfg.patch_len,
        cfg.embed_dim,
    );
    let n = b * c * p;

    let mut input = Vec::with_capacity(n * l);
    for seg in batch_data {
        input.extend_from_slice(seg);
    }
    let input = Tensor::from_vec(vec![b, c, cfg.seq_len], input)?;

    // 0/1 row masks over flat tokens
    let mut drop_rows = vec![0.0f32; n];
    for (bi, masked) in masked_tokens.iter().enumerate() {
        for &tok in masked {
            drop_rows[bi * c * p + tok] = 1.0;
        }
    }
    let keep_full: Vec<f32> = drop_rows
        .iter()
        .flat_map(|&m| std::iter::repeat(1.0 - m).take(d))
        .collect();
    let drop_full: Vec<f32> = drop_rows
        .iter()
        .flat_map(|&m| std::iter::repeat(m).take(d))
        .collect();
    let loss_mask: Vec<f32> = drop_rows
        .iter()
        .flat_map(|&m| std::iter::repeat(m).take(l))
        .collect();

    let trainable: std::collections::BTreeSet<String> = model
        .named_tensors()
        .into_iter()
        .map(|(name, _)| name)
        .collect();

    let mut tape = GradTape::new();
    let vars = insert_params(&mut tape, model, &trainable);
    let mask_vec = tape.param(head.mask_vec.clone(), true);
    let recon_w = tape.param(head.recon_w.clone(), true);
    let recon_b = tape.param(head.recon_b.clone(), true);

    let x = tape.constant(input.clone());
    let projected = crate::model::project_patches(&mut tape, &vars, cfg, x)?;
    let keep = tape.constant(Tensor::from_vec(vec![n, d], keep_full)?);
    let drop = tape.constant(Tensor::from_vec(vec![n, d], drop_full)?);
    let visible = tape.mul(projected, keep)?;
    let mask_exp = tape.expand(mask_vec, vec![n, d], vec![1])?;
    let masked_part = tape.mul(mask_exp, drop)?;
    let mixed = tape.add(visible, masked_part)?;

    let tokens = crate::model::add_pos_chan(&mut tape, &vars, cfg, mixed, b)?;
    let (normed, _) = crate::model::encoder_trunk(&mut tape, &vars, cfg, tokens, false)?;

    let flat = tape.reshape(normed, vec![n, d])?;
    let recon = tape.matmul(flat, recon_w)?;
    let rb = tape.expand(recon_b, vec![n, l], vec![1])?;
    let recon = tape.add(recon, rb)?;

    let targets = tape.constant(input.reshaped(vec![n, l])?);
    let mask_t = tape.constant(Tensor::from_vec(vec![n, l], loss_mask)?);
    let loss = tape.masked_mse(recon, targets, mask_t)?;
    Ok((tape, vars, [mask_vec, recon_w, recon_b], loss))
}

/// Train encoder + reconstruction head on masked-patch MSE, discard the
/// head, and return the encoder checkpoint with its per-epoch loss history.
pub fn pretrain_pretext(
    cfg: &ModelConfig,
    opts: &PretextOptions,
) -> Result<(EncoderModel<f32>, PretextHistory)> {
    if !(opts.mask_fraction > 0.0 && opts.mask_fraction < 1.0) {
        return Err(TrainError::Config(format!(
            "mask_fraction must be in (0, 1), got {}",
            opts.mask_fraction
        )));
    }
    if opts.epochs == 0 || opts.n_segments == 0 || opts.batch_size == 0 {
        return Err(TrainError::Config("epochs, segments and batch size must be positive".into()));
    }
    cfg.validate().map_err(TrainError::Model)?;

    let mut model: EncoderModel<f32> = crate::model::init_xavier(cfg, opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(0x9E37_79B9));
    let d = cfg.embed_dim;
    let l = cfg.patch_len;
    let small = Normal::new(0.0f64, 0.02).expect("sd");
    let mut head = PretextHead {
        mask_vec: Tensor::from_vec(
            vec![d],
            (0..d).map(|_| small.sample(&mut rng) as f32).collect(),
        )
        .expect("mask vec"),
        recon_w: {
            let limit = (6.0 / (d + l) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit);
            Tensor::from_vec(
                vec![d, l],
                (0..d * l).map(|_| dist.sample(&mut rng) as f32).collect(),
            )
            .expect("recon w")
        },
        recon_b: Tensor::zeros(vec![l]),
    };

    let data = generate_source_signals(cfg, opts, &mut rng);
    let tokens_per_seg = cfg.num_channels * cfg.patches_per_channel();
    let mask_count = ((opts.mask_fraction * tokens_per_seg as f64).round() as usize)
        .clamp(1, tokens_per_seg - 1);

    let mut adam = Adam::new();
    let mut history = PretextHistory::default();
    for epoch in 0..opts.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_weighted = 0.0f64;
        for chunk in order.chunks(opts.batch_size) {
            let batch: Vec<&Vec<f32>> = chunk.iter().map(|&i| &data[i]).collect();
            let masks: Vec<Vec<usize>> = (0..batch.len())
                .map(|_| {
                    let mut idx: Vec<usize> = (0..tokens_per_seg).collect();
                    idx.shuffle(&mut rng);
                    idx.truncate(mask_count);
                    idx
                })
                .collect();
            let (tape, vars, extra_vars, loss_var) =
                pretext_step(&model, &head, &batch, &masks, cfg).map_err(|e| match e {
                    TensorError::NonFinite { .. } => TrainError::Diverged { epoch },
                    other => TrainError::Tensor(other),
                })?;
            let loss_val = tape.value(loss_var).item() as f64;
            if !loss_val.is_finite() {
                return Err(TrainError::Diverged { epoch });
            }
            let grads = tape.backward(loss_var).map_err(TrainError::Tensor)?;

            adam.begin_step();
            let trainable = super::trainable_set(&model, super::BackboneMode::Unfrozen);
            super::apply_updates(&mut model, &vars, &grads, &trainable, &mut adam, opts.learning_rate);
            let [mask_var, rw_var, rb_var] = extra_vars;
            for (name, tensor, var) in [
                ("pretext.mask_vec", &mut head.mask_vec, mask_var),
                ("pretext.recon.w", &mut head.recon_w, rw_var),
                ("pretext.recon.b", &mut head.recon_b, rb_var),
            ] {
                if let Some(g) = grads.get(var) {
                    adam.update(name, tensor, g, opts.learning_rate);
                }
            }
            loss_weighted += loss_val * batch.len() as f64;
        }
        history.epochs.push(PretextEpoch {
            epoch,
            recon_loss: loss_weighted / data.len() as f64,
        });
    }

    model.meta.provenance = Provenance::Pretext;
    model.meta.epochs = opts.epochs as u32;
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn quick_opts() -> PretextOptions {
        PretextOptions {
            epochs: 6,
            n_segments: 48,
            batch_size: 16,
            seed: 5,
            ..PretextOptions::default()
        }
    }

    #[test]
    fn reconstruction_loss_decreases_over_first_epochs() {
        let (_, history) = pretrain_pretext(&ModelConfig::tiny(), &quick_opts()).unwrap();
        assert_eq!(history.epochs.len(), 6);
        // window-2 smoothing over the first five epochs
        let smoothed: Vec<f64> = history.epochs[..5]
            .windows(2)
            .map(|w| (w[0].recon_loss + w[1].recon_loss) / 2.0)
            .collect();
        for pair in smoothed.windows(2) {
            assert!(
                pair[1] < pair[0],
                "smoothed loss not decreasing: {smoothed:?}"
            );
        }
    }

    #[test]
    fn checkpoint_loads_into_fine_tuning_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pretext.bpmdl");
        let (model, _) = pretrain_pretext(&ModelConfig::tiny(), &quick_opts()).unwrap();
        assert_eq!(model.meta.provenance, Provenance::Pretext);
        crate::model::save_model(&model, &path).unwrap();

        let ds = crate::signal::generate_synthetic(30, 3).unwrap();
        let (tr, va, _) = crate::signal::split(&ds, &crate::signal::SplitSpec::new(1)).unwrap();
        let opts = super::super::TrainOptions {
            epochs: 1,
            batch_size: 8,
            init_mode: super::super::InitMode::Pretrained(path.clone()),
            ..Default::default()
        };
        let start = super::super::prepare_model(&ModelConfig::tiny(), &opts).unwrap();
        let (tuned, history) = super::super::train(start, &tr, &va, &opts).unwrap();
        assert_eq!(history.epochs.len(), 1);
        assert_eq!(tuned.meta.provenance, Provenance::FineTuned);
    }

    #[test]
    fn extreme_mask_fraction_still_runs() {
        let opts = PretextOptions {
            mask_fraction: 0.99,
            epochs: 1,
            n_segments: 8,
            batch_size: 8,
            ..quick_opts()
        };
        let (model, history) = pretrain_pretext(&ModelConfig::tiny(), &opts).unwrap();
        assert_eq!(history.epochs.len(), 1);
        assert!(model.num_params() > 0);
    }

    #[test]
    fn invalid_mask_fraction_is_rejected() {
        let opts = PretextOptions {
            mask_fraction: 1.5,
            ..quick_opts()
        };
        assert!(matches!(
            pretrain_pretext(&ModelConfig::tiny(), &opts),
            Err(TrainError::Config(_))
        ));
    }

    #[test]
    fn pretraining_is_deterministic() {
        let (a, ha) = pretrain_pretext(&ModelConfig::tiny(), &quick_opts()).unwrap();
        let (b, hb) = pretrain_pretext(&ModelConfig::tiny(), &quick_opts()).unwrap();
        for ((_, x), (_, y)) in a.named_tensors().iter().zip(b.named_tensors()) {
            assert!(x.bits_eq(y));
        }
        for (p, q) in ha.epochs.iter().zip(&hb.epochs) {
            assert_eq!(p.recon_loss.to_bits(), q.recon_loss.to_bits());
        }
    }
}
