//! Audio front end: WAV decoding, mono/16 kHz conversion, padding, and
//! log-mel feature extraction.
//!
//! Frames are taken fully inside the signal (no centering pad), so the
//! frame count is floor((N - window) / hop) + 1; a 10 s clip at 16 kHz
//! with window 1024 and hop 664 gives exactly 240 frames.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const FEAT_MAGIC: &[u8; 4] = b"WSED";
const FEAT_VERSION: u32 = 1;

/// Raw waveform. Multichannel audio is interleaved.
#[derive(Clone, Debug)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub channels: usize,
}

impl AudioClip {
    pub fn mono(samples: Vec<f32>, sample_rate: u32) -> Self {
        AudioClip {
            samples,
            sample_rate,
            channels: 1,
        }
    }

    /// Frames per channel.
    pub fn frames(&self) -> usize {
        self.samples.len() / self.channels
    }

    pub fn duration_seconds(&self) -> f64 {
        self.frames() as f64 / self.sample_rate as f64
    }
}

/// Settings for [`featurize`]. `overlap` is in samples; the hop is
/// `window - overlap`.
#[derive(Clone, Debug)]
pub struct FeatureConfig {
    pub window: usize,
    pub overlap: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
    pub target_seconds: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            window: 1024,
            overlap: 360,
            n_mels: 64,
            fmin: 0.0,
            fmax: 8000.0,
            log_floor: 1e-10,
            target_seconds: 10.0,
        }
    }
}

impl FeatureConfig {
    pub fn hop(&self) -> usize {
        self.window - self.overlap
    }
}

/// Log-scaled mel energies, shape [T, F].
#[derive(Clone, Debug, PartialEq)]
pub struct LogMelSpectrogram {
    pub values: Tensor<f32>,
    pub frame_hop: usize,
    pub sample_rate: u32,
}

impl LogMelSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn n_mels(&self) -> usize {
        self.values.shape()[1]
    }

    /// Seconds spanned by one frame hop.
    pub fn frame_seconds(&self) -> f64 {
        self.frame_hop as f64 / self.sample_rate as f64
    }
}

/// Triangular mel filters over FFT bin magnitudes, shape [F, bins].
pub struct MelFilterbank {
    weights: Vec<f64>,
    n_mels: usize,
    n_bins: usize,
    pub fmin: f64,
    pub fmax: f64,
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

impl MelFilterbank {
    pub fn new(n_mels: usize, window: usize, sample_rate: u32, fmin: f64, fmax: f64) -> Result<Self> {
        let n_bins = window / 2 + 1;
        let mel_lo = hz_to_mel(fmin);
        let mel_hi = hz_to_mel(fmax);
        let step = (mel_hi - mel_lo) / (n_mels + 1) as f64;
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(mel_lo + step * i as f64))
            .collect();
        let mut weights = vec![0f64; n_mels * n_bins];
        for m in 0..n_mels {
            let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let mut any = false;
            for k in 0..n_bins {
                let f = k as f64 * sample_rate as f64 / window as f64;
                let w = if f > lo && f < hi {
                    let rise = (f - lo) / (center - lo);
                    let fall = (hi - f) / (hi - center);
                    rise.min(fall)
                } else {
                    0.0
                };
                if w > 0.0 {
                    any = true;
                }
                weights[m * n_bins + k] = w;
            }
            if !any {
                return Err(Error::Config(format!(
                    "mel filter {m} covers no FFT bin; fewer bands or a wider range needed"
                )));
            }
        }
        Ok(MelFilterbank {
            weights,
            n_mels,
            n_bins,
            fmin,
            fmax,
        })
    }

    /// Band center frequencies in Hz.
    pub fn centers(&self, _window: usize) -> Vec<f64> {
        let mel_lo = hz_to_mel(self.fmin);
        let mel_hi = hz_to_mel(self.fmax);
        let step = (mel_hi - mel_lo) / (self.n_mels + 1) as f64;
        (0..self.n_mels)
            .map(|m| mel_to_hz(mel_lo + step * (m + 1) as f64))
            .collect()
    }

    fn apply(&self, spectrum: &[f64], out: &mut [f64]) {
        for m in 0..self.n_mels {
            let row = &self.weights[m * self.n_bins..(m + 1) * self.n_bins];
            let mut acc = 0.0;
            for (w, s) in row.iter().zip(spectrum) {
                acc += w * s;
            }
            out[m] = acc;
        }
    }
}

/// Averages channels and resamples to 16 kHz by linear interpolation.
pub fn to_mono_16k(clip: &AudioClip) -> Result<AudioClip> {
    if clip.samples.is_empty() {
        return Err(Error::EmptyClip);
    }
    if clip.samples.len() % clip.channels != 0 {
        return Err(Error::Data(format!(
            "interleaved sample count {} is not a multiple of {} channels",
            clip.samples.len(),
            clip.channels
        )));
    }
    let frames = clip.frames();
    let mono: Vec<f32> = if clip.channels == 1 {
        clip.samples.clone()
    } else {
        (0..frames)
            .map(|i| {
                let frame = &clip.samples[i * clip.channels..(i + 1) * clip.channels];
                frame.iter().sum::<f32>() / clip.channels as f32
            })
            .collect()
    };
    if clip.sample_rate == 16_000 {
        return Ok(AudioClip::mono(mono, 16_000));
    }
    let ratio = clip.sample_rate as f64 / 16_000.0;
    let n_out = (frames as f64 / ratio).round() as usize;
    let resampled: Vec<f32> = (0..n_out)
        .map(|i| {
            let pos = i as f64 * ratio;
            let i0 = (pos.floor() as usize).min(frames - 1);
            let i1 = (i0 + 1).min(frames - 1);
            let frac = (pos - i0 as f64) as f32;
            let a = mono[i0];
            a + frac * (mono[i1] - a)
        })
        .collect();
    Ok(AudioClip::mono(resampled, 16_000))
}

/// Zero-pads at the end or truncates to exactly `target_seconds`.
pub fn pad_or_truncate(clip: &AudioClip, target_seconds: f64) -> AudioClip {
    let target = (target_seconds * clip.sample_rate as f64).round() as usize * clip.channels;
    let mut samples = clip.samples.clone();
    samples.resize(target, 0.0);
    AudioClip {
        samples,
        sample_rate: clip.sample_rate,
        channels: clip.channels,
    }
}

/// STFT magnitudes through the mel filterbank, log-compressed.
pub fn featurize(clip: &AudioClip, config: &FeatureConfig) -> Result<LogMelSpectrogram> {
    if clip.channels != 1 {
        return Err(Error::Data(format!(
            "featurize expects mono input, got {} channels",
            clip.channels
        )));
    }
    let n = clip.samples.len();
    let window = config.window;
    if n < window {
        return Err(Error::ClipTooShort { samples: n, window });
    }
    let hop = config.hop();
    let t_frames = (n - window) / hop + 1;
    let n_bins = window / 2 + 1;

    let bank = MelFilterbank::new(
        config.n_mels,
        window,
        clip.sample_rate,
        config.fmin,
        config.fmax,
    )?;
    let hamming: Vec<f64> = (0..window)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (window - 1) as f64).cos())
        .collect();

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(window);
    let mut buf = vec![Complex::new(0.0, 0.0); window];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut spectrum = vec![0f64; n_bins];
    let mut mel = vec![0f64; config.n_mels];
    let mut values = Vec::with_capacity(t_frames * config.n_mels);

    for t in 0..t_frames {
        let start = t * hop;
        for i in 0..window {
            buf[i] = Complex::new(clip.samples[start + i] as f64 * hamming[i], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for k in 0..n_bins {
            spectrum[k] = buf[k].norm();
        }
        bank.apply(&spectrum, &mut mel);
        for &e in &mel {
            values.push((e + config.log_floor).ln() as f32);
        }
    }

    let tensor = Tensor::new(vec![t_frames, config.n_mels], values)?;
    if !tensor.is_all_finite() {
        return Err(Error::NonFinite {
            what: "log-mel spectrogram".to_string(),
        });
    }
    Ok(LogMelSpectrogram {
        values: tensor,
        frame_hop: hop,
        sample_rate: clip.sample_rate,
    })
}

/// Decodes a PCM WAV file (8/16/24-bit int or 32-bit float), preserving
/// the channel count and sample rate. Samples are scaled to [-1, 1].
pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let reader = hound::WavReader::open(path)
        .map_err(|e| Error::Wav(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    let sample_rate = spec.sample_rate;
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Wav(format!("{}: {e}", path.display())))?,
        (hound::SampleFormat::Int, bits) if bits <= 32 => {
            let scale = 1.0 / (1i64 << (bits - 1)) as f32;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Wav(format!("{}: {e}", path.display())))?
        }
        (fmt, bits) => {
            return Err(Error::Wav(format!(
                "{}: unsupported format {fmt:?} at {bits} bits",
                path.display()
            )))
        }
    };
    Ok(AudioClip {
        samples,
        sample_rate,
        channels,
    })
}

/// Writes a feature cache: magic "WSED", u32 version, u32 T, u32 F, then
/// T*F row-major little-endian f32.
pub fn write_features(path: &Path, spec: &LogMelSpectrogram) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + spec.values.len() * 4);
    buf.extend_from_slice(FEAT_MAGIC);
    buf.extend_from_slice(&FEAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(spec.n_frames() as u32).to_le_bytes());
    buf.extend_from_slice(&(spec.n_mels() as u32).to_le_bytes());
    for &v in spec.values.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::file(path, e))?;
    file.write_all(&buf).map_err(|e| Error::file(path, e))?;
    Ok(())
}

/// Reads a cache written by [`write_features`]. The hop and rate are not
/// stored in the file; callers supply them from their feature config.
pub fn read_features(path: &Path, frame_hop: usize, sample_rate: u32) -> Result<LogMelSpectrogram> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::file(path, e))?;
    let bad = |msg: &str| Error::Data(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 || &bytes[0..4] != FEAT_MAGIC {
        return Err(bad("not a feature cache (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("len checked"));
    if version != FEAT_VERSION {
        return Err(bad(&format!("unsupported feature cache version {version}")));
    }
    let t = u32::from_le_bytes(bytes[8..12].try_into().expect("len checked")) as usize;
    let f = u32::from_le_bytes(bytes[12..16].try_into().expect("len checked")) as usize;
    let need = 16 + t * f * 4;
    if bytes.len() != need {
        return Err(bad(&format!(
            "expected {need} bytes for a {t}x{f} cache, found {}",
            bytes.len()
        )));
    }
    let data: Vec<f32> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("len checked")))
        .collect();
    Ok(LogMelSpectrogram {
        values: Tensor::new(vec![t, f], data)?,
        frame_hop,
        sample_rate,
    })
}
