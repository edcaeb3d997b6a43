//! Input pipeline: log-mel acoustic features, video temporal resampling,
//! SNR-controlled noise mixing, synthetic babble, and the paired synthetic
//! audio/video task used for training and evaluation.
//!
//! All signal math runs in f64 and is cast to the requested tensor dtype at
//! the end, so the f32 and f64 pipelines see identical inputs up to
//! rounding.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::config::FeatureConfig;
use crate::error::{Error, Result};
use crate::rng::{gaussian, rng_for};
use crate::tensor::{Scalar, Tensor};

/// Mono waveform in [-1, 1] at 16 kHz.
#[derive(Debug, Clone)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate_hz: u32,
}

impl AudioClip {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }
}

/// One face track: frames flattened row-major as [frames, H, W, C].
#[derive(Debug, Clone)]
pub struct VideoTrack {
    pub frames: Vec<f32>,
    pub num_frames: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub fps: f64,
    pub track_id: String,
}

impl VideoTrack {
    pub fn frame_len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        let fl = self.frame_len();
        &self.frames[i * fl..(i + 1) * fl]
    }
}

/// One assembled training/eval batch. During training the track axis is the
/// batch axis (M == B) and `true_track[b] == b`.
#[derive(Debug, Clone)]
pub struct FeatureBatch<T> {
    /// B x T x Da
    pub acoustic: Tensor<T>,
    /// M x T x H x W x C
    pub video: Tensor<T>,
    pub true_track: Vec<usize>,
    /// Labels in 1..=vocab per item.
    pub targets: Vec<Vec<usize>>,
    pub t_valid: Vec<usize>,
}

impl<T: Scalar> FeatureBatch<T> {
    pub fn batch_size(&self) -> usize {
        self.acoustic.shape()[0]
    }

    pub fn num_tracks(&self) -> usize {
        self.video.shape()[0]
    }

    pub fn steps(&self) -> usize {
        self.acoustic.shape()[1]
    }
}

// ---- log-mel features -----------------------------------------------------

/// Triangular mel filterbank on DFT magnitude bins (HTK mel scale, no area
/// normalization).
pub struct MelBank {
    /// [n_mels][bins] weights.
    pub weights: Vec<Vec<f64>>,
    pub bins: usize,
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

impl MelBank {
    pub fn new(fc: &FeatureConfig) -> Self {
        let bins = fc.dft_size / 2 + 1;
        let sr = fc.sample_rate_hz as f64;
        let mel_lo = hz_to_mel(fc.fmin_hz);
        let mel_hi = hz_to_mel(fc.fmax_hz);
        let edges: Vec<f64> = (0..fc.n_mels + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (fc.n_mels + 1) as f64))
            .collect();
        let mut weights = vec![vec![0.0; bins]; fc.n_mels];
        for m in 0..fc.n_mels {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            for (k, wk) in weights[m].iter_mut().enumerate() {
                let f = k as f64 * sr / fc.dft_size as f64;
                if f > left && f < center {
                    *wk = (f - left) / (center - left);
                } else if f >= center && f < right {
                    *wk = (right - f) / (right - center);
                }
            }
        }
        MelBank { weights, bins }
    }

    /// Channel whose triangle [left, right] brackets a frequency.
    pub fn channel_bracketing(&self, fc: &FeatureConfig, hz: f64) -> Vec<usize> {
        let mel_lo = hz_to_mel(fc.fmin_hz);
        let mel_hi = hz_to_mel(fc.fmax_hz);
        let edge = |i: usize| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (fc.n_mels + 1) as f64);
        (0..fc.n_mels)
            .filter(|&m| edge(m) < hz && hz < edge(m + 2))
            .collect()
    }
}

/// Raw (unstacked) frame count for a clip length.
pub fn num_raw_frames(fc: &FeatureConfig, samples: usize) -> usize {
    (samples - fc.window) / fc.hop + 1
}

/// Log-mel features, 3-fold stacked: output is T x (stack * n_mels).
/// Remainder frames (raw mod stack) are dropped.
pub fn logmel_features<T: Scalar>(clip: &AudioClip, fc: &FeatureConfig) -> Result<Tensor<T>> {
    if clip.samples.len() < fc.window {
        return Err(Error::Audio(format!(
            "clip of {} samples shorter than one {}-sample window",
            clip.samples.len(),
            fc.window
        )));
    }
    let bank = MelBank::new(fc);
    let raw = num_raw_frames(fc, clip.samples.len());
    // Periodic Hann window.
    let hann: Vec<f64> = (0..fc.window)
        .map(|n| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / fc.window as f64).cos()))
        .collect();
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(fc.dft_size);
    let mut mels = vec![0.0f64; raw * fc.n_mels];
    let mut buf = vec![Complex64::default(); fc.dft_size];
    for fr in 0..raw {
        let start = fr * fc.hop;
        for (n, b) in buf.iter_mut().enumerate() {
            *b = if n < fc.window {
                Complex64::new(clip.samples[start + n] as f64 * hann[n], 0.0)
            } else {
                Complex64::default()
            };
        }
        fft.process(&mut buf);
        let mags: Vec<f64> = buf[..bank.bins].iter().map(|c| c.norm()).collect();
        for (m, w) in bank.weights.iter().enumerate() {
            let mut acc = 0.0;
            for (x, wk) in mags.iter().zip(w) {
                acc += x * wk;
            }
            mels[fr * fc.n_mels + m] = (acc + fc.log_eps).ln();
        }
    }
    let steps = raw / fc.stack;
    let da = fc.da();
    let mut out = Vec::with_capacity(steps * da);
    for s in 0..steps {
        for f in 0..fc.stack {
            let fr = s * fc.stack + f;
            out.extend(mels[fr * fc.n_mels..(fr + 1) * fc.n_mels].iter().map(|&v| T::from_f64(v)));
        }
    }
    Tensor::new(vec![steps, da], out)
}

// ---- video resampling -------------------------------------------------------

/// Nearest-neighbor temporal resampling to `target_hz`, producing exactly
/// `out_len` frames. Indices round half-up (ties take the later frame) with
/// a 1e-9 guard so rate ratios that are exact in real arithmetic do not
/// flip on float rounding; out-of-range indices clamp to the last frame.
pub fn resample_video(track: &VideoTrack, target_hz: f64, out_len: usize) -> Result<VideoTrack> {
    if track.num_frames == 0 {
        return Err(Error::Empty(format!("video track '{}' has no frames", track.track_id)));
    }
    let fl = track.frame_len();
    let mut frames = Vec::with_capacity(out_len * fl);
    for k in 0..out_len {
        let q = k as f64 * track.fps / target_hz;
        let base = q.floor();
        let idx = if q - base >= 0.5 - 1e-9 { base as usize + 1 } else { base as usize };
        let src = idx.min(track.num_frames - 1);
        frames.extend_from_slice(track.frame(src));
    }
    Ok(VideoTrack {
        frames,
        num_frames: out_len,
        h: track.h,
        w: track.w,
        c: track.c,
        fps: target_hz,
        track_id: track.track_id.clone(),
    })
}

// ---- noise ------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct MixStats {
    pub gain: f64,
    /// Fraction of samples clipped to [-1, 1].
    pub clip_fraction: f64,
}

fn mean_square(samples: &[f32]) -> f64 {
    samples.iter().map(|&s| (s as f64) * (s as f64)).sum::<f64>() / samples.len() as f64
}

/// Mix noise into a signal at the requested SNR (dB). Noise shorter than
/// the signal is extended cyclically; the result is clipped to [-1, 1].
pub fn mix_noise(signal: &AudioClip, noise: &AudioClip, snr_db: f64) -> Result<(AudioClip, MixStats)> {
    if signal.samples.is_empty() {
        return Err(Error::Empty("mix_noise: empty signal".into()));
    }
    let p_signal = mean_square(&signal.samples);
    if p_signal == 0.0 {
        return Err(Error::Audio("mix_noise: zero-power signal".into()));
    }
    if noise.samples.is_empty() {
        return Err(Error::Audio("mix_noise: zero-power noise".into()));
    }
    // Noise power over the signal's extent, cyclic extension included.
    let n = signal.samples.len();
    let noise_at = |i: usize| noise.samples[i % noise.samples.len()] as f64;
    let p_noise = (0..n).map(|i| noise_at(i) * noise_at(i)).sum::<f64>() / n as f64;
    if p_noise == 0.0 {
        return Err(Error::Audio("mix_noise: zero-power noise".into()));
    }
    let gain = (p_signal / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let mut clipped = 0usize;
    let samples: Vec<f32> = (0..n)
        .map(|i| {
            let v = signal.samples[i] as f64 + gain * noise_at(i);
            if v.abs() > 1.0 {
                clipped += 1;
            }
            v.clamp(-1.0, 1.0) as f32
        })
        .collect();
    Ok((
        AudioClip { samples, sample_rate_hz: signal.sample_rate_hz },
        MixStats { gain, clip_fraction: clipped as f64 / n as f64 },
    ))
}

/// Babble-like noise: six independent speech-band (100-4000 Hz) filtered
/// noise streams, summed and normalized to peak 0.5.
pub fn synth_babble(length: usize, seed: u64) -> AudioClip {
    assert!(length > 0, "synth_babble: length must be positive");
    const STREAMS: usize = 6;
    const BAND: (f64, f64) = (100.0, 4000.0);
    let sr = 16_000.0;
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(length);
    let inv = planner.plan_fft_inverse(length);
    let mut mix = vec![0.0f64; length];
    for s in 0..STREAMS {
        let mut rng = rng_for(seed, &[0xbabb1e, s as u64]);
        let mut buf: Vec<Complex64> = (0..length)
            .map(|_| Complex64::new(gaussian(&mut rng), 0.0))
            .collect();
        fwd.process(&mut buf);
        for (k, b) in buf.iter_mut().enumerate() {
            // Bin frequency, mirrored for the upper half.
            let f = if k <= length / 2 {
                k as f64 * sr / length as f64
            } else {
                (length - k) as f64 * sr / length as f64
            };
            if !(BAND.0..=BAND.1).contains(&f) {
                *b = Complex64::default();
            }
        }
        inv.process(&mut buf);
        for (m, b) in mix.iter_mut().zip(&buf) {
            *m += b.re / length as f64;
        }
    }
    let peak = mix.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let scale = if peak > 0.0 { 0.5 / peak } else { 0.0 };
    AudioClip {
        samples: mix.iter().map(|&v| (v * scale) as f32).collect(),
        sample_rate_hz: 16_000,
    }
}

// ---- synthetic paired task ---------------------------------------------------

/// Fixed per-vocab signature templates: a band-limited waveform and a pixel
/// pattern per symbol, derived from `template_seed` only.
pub struct TemplateBank {
    fc: FeatureConfig,
    /// [vocab][template_samples]
    audio: Vec<Vec<f64>>,
    /// [vocab][H*W*C]
    video: Vec<Vec<f64>>,
    pub frames_per_token: usize,
}

impl TemplateBank {
    pub fn new(fc: &FeatureConfig) -> Self {
        let samples = fc.template_samples();
        let sr = fc.sample_rate_hz as f64;
        let mut audio = Vec::with_capacity(fc.vocab_size);
        let mut video = Vec::with_capacity(fc.vocab_size);
        for tok in 1..=fc.vocab_size {
            let mut rng = rng_for(fc.template_seed, &[0xa0d10, tok as u64]);
            // Sum of five random in-band sinusoids, peak-normalized to 0.65.
            let partials: Vec<(f64, f64)> = (0..5)
                .map(|_| (rng.gen_range(200.0..3500.0), rng.gen_range(0.0..std::f64::consts::TAU)))
                .collect();
            let mut wave: Vec<f64> = (0..samples)
                .map(|n| {
                    partials
                        .iter()
                        .map(|&(f, ph)| (std::f64::consts::TAU * f * n as f64 / sr + ph).sin())
                        .sum::<f64>()
                })
                .collect();
            let peak = wave.iter().map(|v| v.abs()).fold(0.0, f64::max);
            for v in wave.iter_mut() {
                *v *= 0.65 / peak;
            }
            audio.push(wave);

            let mut rng = rng_for(fc.template_seed, &[0x71d, tok as u64]);
            let pattern: Vec<f64> = (0..fc.frame_h * fc.frame_w * fc.frame_c)
                .map(|_| rng.gen_range(-0.8..0.8))
                .collect();
            video.push(pattern);
        }
        let frames_per_token = ((fc.template_ms / 1000.0) * fc.video_fps).round() as usize;
        TemplateBank { fc: fc.clone(), audio, video, frames_per_token }
    }

    pub fn audio_template(&self, token: usize) -> &[f64] {
        &self.audio[token - 1]
    }

    pub fn video_template(&self, token: usize) -> &[f64] {
        &self.video[token - 1]
    }

    /// Draw a token sequence and synthesize the matching clip and track.
    /// Deterministic per (bank seed, item seed, u).
    pub fn generate_pair(&self, seed: u64, u: usize) -> (AudioClip, VideoTrack, Vec<usize>) {
        assert!(u >= 1, "target length must be >= 1");
        let fc = &self.fc;
        let mut tok_rng = rng_for(seed, &[0x70c5]);
        let tokens: Vec<usize> = (0..u).map(|_| tok_rng.gen_range(1..=fc.vocab_size)).collect();

        let tpl_len = fc.template_samples();
        let mut audio_rng = rng_for(seed, &[0x5150]);
        let mut samples = Vec::with_capacity(u * tpl_len);
        for &tok in &tokens {
            for &v in self.audio_template(tok) {
                let noisy = v + fc.audio_noise_sigma * gaussian(&mut audio_rng);
                samples.push(noisy.clamp(-1.0, 1.0) as f32);
            }
        }

        let fl = fc.frame_h * fc.frame_w * fc.frame_c;
        let mut video_rng = rng_for(seed, &[0xf1f0]);
        let mut frames = Vec::with_capacity(u * self.frames_per_token * fl);
        for &tok in &tokens {
            let pattern = self.video_template(tok);
            for _ in 0..self.frames_per_token {
                for &p in pattern {
                    let noisy = p + fc.video_noise_sigma * gaussian(&mut video_rng);
                    frames.push(noisy.clamp(-1.0, 1.0) as f32);
                }
            }
        }
        let num_frames = u * self.frames_per_token;
        (
            AudioClip { samples, sample_rate_hz: fc.sample_rate_hz },
            VideoTrack {
                frames,
                num_frames,
                h: fc.frame_h,
                w: fc.frame_w,
                c: fc.frame_c,
                fps: fc.video_fps,
                track_id: format!("synth_{seed:016x}"),
            },
            tokens,
        )
    }
}

/// Standalone convenience wrapper around [`TemplateBank::generate_pair`].
pub fn generate_synthetic_pair(
    fc: &FeatureConfig,
    seed: u64,
    u: usize,
) -> (AudioClip, VideoTrack, Vec<usize>) {
    TemplateBank::new(fc).generate_pair(seed, u)
}

// ---- batch assembly -----------------------------------------------------------

/// Featurize, synchronize and zero-pad a set of matched pairs into one
/// training-layout batch (track m belongs to item m).
pub fn assemble_batch<T: Scalar>(
    fc: &FeatureConfig,
    items: &[(AudioClip, VideoTrack, Vec<usize>)],
) -> Result<FeatureBatch<T>> {
    if items.is_empty() {
        return Err(Error::Empty("assemble_batch: empty batch".into()));
    }
    let bsz = items.len();
    let da = fc.da();
    let mut feats = Vec::with_capacity(bsz);
    let mut videos = Vec::with_capacity(bsz);
    let mut t_valid = Vec::with_capacity(bsz);
    for (clip, track, _) in items {
        let f: Tensor<T> = logmel_features(clip, fc)?;
        let steps = f.shape()[0].min(fc.max_t);
        let f = if steps < f.shape()[0] {
            Tensor::new(vec![steps, da], f.data()[..steps * da].to_vec())?
        } else {
            f
        };
        let v = resample_video(track, fc.video_fps, steps)?;
        t_valid.push(steps);
        feats.push(f);
        videos.push(v);
    }
    let t_max = *t_valid.iter().max().unwrap();
    let mut acoustic = Tensor::<T>::zeros(&[bsz, t_max, da]);
    for (b, f) in feats.iter().enumerate() {
        let steps = f.shape()[0];
        acoustic.data_mut()[b * t_max * da..b * t_max * da + steps * da].copy_from_slice(f.data());
    }
    let fl = fc.frame_h * fc.frame_w * fc.frame_c;
    let mut video = Tensor::<T>::zeros(&[bsz, t_max, fc.frame_h, fc.frame_w, fc.frame_c]);
    for (m, v) in videos.iter().enumerate() {
        let frames = v.num_frames;
        let dst = &mut video.data_mut()[m * t_max * fl..m * t_max * fl + frames * fl];
        for (d, &s) in dst.iter_mut().zip(&v.frames) {
            *d = T::from_f64(s as f64);
        }
    }
    Ok(FeatureBatch {
        acoustic,
        video,
        true_track: (0..bsz).collect(),
        targets: items.iter().map(|(_, _, y)| y.clone()).collect(),
        t_valid,
    })
}

// ---- dataset files -------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ManifestItem {
    pub id: String,
    pub seed: u64,
    pub u: usize,
}

pub fn write_manifest(path: &Path, items: &[ManifestItem]) -> Result<()> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestItem>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Headerless little-endian float32 PCM, one channel at 16 kHz.
pub fn write_pcm(path: &Path, clip: &AudioClip) -> Result<()> {
    let mut bytes = Vec::with_capacity(clip.samples.len() * 4);
    for &s in &clip.samples {
        bytes.extend_from_slice(&s.to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_pcm(path: &Path) -> Result<AudioClip> {
    let bytes = std::fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Audio(format!("{}: PCM length not a multiple of 4", path.display())));
    }
    let samples = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(AudioClip { samples, sample_rate_hz: 16_000 })
}

/// Frame tensor file: "AVVT", then u32 LE frames/h/w/c, f64 LE fps, then
/// f32 LE frame data.
pub fn write_video_track(path: &Path, track: &VideoTrack) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(b"AVVT")?;
    for v in [track.num_frames as u32, track.h as u32, track.w as u32, track.c as u32] {
        f.write_all(&v.to_le_bytes())?;
    }
    f.write_all(&track.fps.to_le_bytes())?;
    let mut bytes = Vec::with_capacity(track.frames.len() * 4);
    for &v in &track.frames {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_video_track(path: &Path, track_id: &str) -> Result<VideoTrack> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != b"AVVT" {
        return Err(Error::Audio(format!("{}: bad frame-tensor magic", path.display())));
    }
    let mut u32buf = [0u8; 4];
    let mut dims = [0usize; 4];
    for d in dims.iter_mut() {
        f.read_exact(&mut u32buf)?;
        *d = u32::from_le_bytes(u32buf) as usize;
    }
    let mut f64buf = [0u8; 8];
    f.read_exact(&mut f64buf)?;
    let fps = f64::from_le_bytes(f64buf);
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    let expect = dims.iter().product::<usize>() * 4;
    if bytes.len() != expect {
        return Err(Error::Audio(format!(
            "{}: expected {} data bytes, found {}",
            path.display(),
            expect,
            bytes.len()
        )));
    }
    let frames = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(VideoTrack {
        frames,
        num_frames: dims[0],
        h: dims[1],
        w: dims[2],
        c: dims[3],
        fps,
        track_id: track_id.to_string(),
    })
}
