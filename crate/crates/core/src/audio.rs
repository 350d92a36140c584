//! Waveforms, MFCC extraction, MFCC windowing per video frame, a spectral
//! flux onset envelope, and onset feature files.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
/// 25 ms analysis window.
pub const MFCC_WINDOW: usize = 400;
/// 10 ms step.
pub const MFCC_HOP: usize = 160;
pub const MFCC_NFFT: usize = 512;
pub const MEL_FILTERS: usize = 26;
pub const CEPSTRA: usize = 13;
/// Cepstra kept per frame (coefficient 0 dropped).
pub const MFCC_DIM: usize = 12;
/// MFCC frames per window fed to the audio encoder.
pub const MFCC_CONTEXT: usize = 28;
pub const LOG_FLOOR: f64 = 1e-10;
pub const ONSET_HOP: usize = 512;
pub const ONSET_WINDOW: usize = 384;
/// Width of the precomputed onset feature files.
pub const ONSET_FILE_DIM: usize = 426;
/// Log band energies in the built-in per-frame onset features.
pub const ONSET_BANDS: usize = 16;
pub const BUILTIN_ONSET_DIM: usize = ONSET_BANDS + 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Validation("waveform is empty".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("sample {i} is not finite")));
        }
        if sample_rate == 0 {
            return Err(Error::Validation("sample rate must be positive".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    fn require_canonical_rate(&self) -> Result<()> {
        if self.sample_rate != SAMPLE_RATE {
            return Err(Error::Validation(format!(
                "sample rate {} Hz unsupported, expected {SAMPLE_RATE} Hz (resample first)",
                self.sample_rate
            )));
        }
        Ok(())
    }

    /// Whole video frames covered at `fps`.
    pub fn video_frames(&self, fps: f64) -> usize {
        (self.duration() * fps + 1e-9).floor() as usize
    }
}

/// Writes 16-bit little-endian PCM mono. Samples are clipped to `[-1, 1]`.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wav_err = |e: hound::Error| Error::Format { path: path.to_path_buf(), msg: e.to_string() };
    let mut wr = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in &w.samples {
        wr.write_sample(pcm16(s)).map_err(wav_err)?;
    }
    wr.finalize().map_err(wav_err)
}

pub fn pcm16(s: f64) -> i16 {
    (s.clamp(-1.0, 1.0) * 32767.0).round() as i16
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let wav_err = |e: hound::Error| Error::Format { path: path.to_path_buf(), msg: e.to_string() };
    let mut rd = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = rd.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!(
                "expected 16-bit PCM mono, got {} channel(s) of {}-bit {:?}",
                spec.channels, spec.bits_per_sample, spec.sample_format
            ),
        });
    }
    let samples = rd
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32767.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(wav_err)?;
    Waveform::new(samples, spec.sample_rate)
}

/// Symmetric Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / (n - 1) as f64).cos()).collect()
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// `filters x (nfft / 2 + 1)` triangular mel filterbank spanning 0 Hz to
/// Nyquist.
pub fn mel_filterbank(filters: usize, nfft: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let bins_n = nfft / 2 + 1;
    let hi = hz_to_mel(sample_rate as f64 / 2.0);
    let bins: Vec<usize> = (0..filters + 2)
        .map(|i| {
            let hz = mel_to_hz(hi * i as f64 / (filters + 1) as f64);
            ((nfft + 1) as f64 * hz / sample_rate as f64).floor() as usize
        })
        .collect();
    (0..filters)
        .map(|m| {
            let (l, c, r) = (bins[m], bins[m + 1], bins[m + 2]);
            let mut f = vec![0.0; bins_n];
            for (k, v) in f.iter_mut().enumerate() {
                if k >= l && k < c && c > l {
                    *v = (k - l) as f64 / (c - l) as f64;
                } else if k >= c && k <= r && r > c {
                    *v = (r - k) as f64 / (r - c) as f64;
                }
            }
            f
        })
        .collect()
}

/// Orthonormal DCT-II.
pub fn dct2(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..n)
        .map(|k| {
            let s: f64 = x
                .iter()
                .enumerate()
                .map(|(i, v)| v * (PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos())
                .sum();
            let scale = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
            s * scale
        })
        .collect()
}

/// Inverse of [`dct2`] (orthonormal DCT-III).
pub fn idct2(c: &[f64]) -> Vec<f64> {
    let n = c.len();
    (0..n)
        .map(|i| {
            c.iter()
                .enumerate()
                .map(|(k, v)| {
                    let scale = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
                    scale * v * (PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos()
                })
                .sum()
        })
        .collect()
}

/// Reusable MFCC front end.
pub struct MfccExtractor {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    filters: Vec<Vec<f64>>,
}

impl Default for MfccExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl MfccExtractor {
    pub fn new() -> Self {
        Self {
            fft: FftPlanner::new().plan_fft_forward(MFCC_NFFT),
            window: hann(MFCC_WINDOW),
            filters: mel_filterbank(MEL_FILTERS, MFCC_NFFT, SAMPLE_RATE),
        }
    }

    /// `|FFT|^2 / nfft` of one Hann-windowed, zero-padded frame.
    pub fn power_spectrum(&self, frame: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); MFCC_NFFT];
        for (i, (s, w)) in frame.iter().zip(&self.window).enumerate() {
            buf[i] = Complex::new(s * w, 0.0);
        }
        self.fft.process(&mut buf);
        buf[..MFCC_NFFT / 2 + 1].iter().map(|c| c.norm_sqr() / MFCC_NFFT as f64).collect()
    }

    pub fn filterbank_energies(&self, frame: &[f64]) -> Vec<f64> {
        let p = self.power_spectrum(frame);
        self.filters.iter().map(|f| f.iter().zip(&p).map(|(a, b)| a * b).sum()).collect()
    }

    /// Cepstra `1..=12` of one frame.
    pub fn frame_mfcc(&self, frame: &[f64]) -> Vec<f64> {
        let logs: Vec<f64> = self.filterbank_energies(frame).iter().map(|e| e.max(LOG_FLOOR).ln()).collect();
        dct2(&logs)[1..CEPSTRA].to_vec()
    }

    /// `frames x 12` track, one frame per 10 ms hop (no padding).
    pub fn mfcc(&self, w: &Waveform) -> Result<Vec<Vec<f64>>> {
        w.require_canonical_rate()?;
        if w.len() < MFCC_WINDOW {
            return Err(Error::Validation(format!(
                "signal of {} samples is shorter than one {MFCC_WINDOW}-sample window",
                w.len()
            )));
        }
        let n = 1 + (w.len() - MFCC_WINDOW) / MFCC_HOP;
        Ok((0..n)
            .map(|i| self.frame_mfcc(&w.samples[i * MFCC_HOP..i * MFCC_HOP + MFCC_WINDOW]))
            .collect())
    }
}

pub fn mfcc(w: &Waveform) -> Result<Vec<Vec<f64>>> {
    MfccExtractor::new().mfcc(w)
}

/// MFCC frames per video frame at `fps` (4 at 25 fps).
pub fn mfcc_frames_per_video_frame(fps: f64) -> f64 {
    SAMPLE_RATE as f64 / MFCC_HOP as f64 / fps
}

/// One `28 x 12` window per video frame, centred on MFCC frame
/// `round(t * 100 / fps)`; indices outside the track replicate the edge.
pub fn mfcc_windows(track: &[Vec<f64>], n_video_frames: usize, fps: f64) -> Result<Vec<Vec<f64>>> {
    if track.len() < MFCC_CONTEXT {
        return Err(Error::Validation(format!(
            "need at least {MFCC_CONTEXT} MFCC frames, got {}",
            track.len()
        )));
    }
    let per = mfcc_frames_per_video_frame(fps);
    let last = track.len() as isize - 1;
    Ok((0..n_video_frames)
        .map(|t| {
            let center = (t as f64 * per).round() as isize;
            let start = center - (MFCC_CONTEXT / 2) as isize;
            let mut win = Vec::with_capacity(MFCC_CONTEXT * MFCC_DIM);
            for i in 0..MFCC_CONTEXT as isize {
                let idx = (start + i).clamp(0, last) as usize;
                win.extend_from_slice(&track[idx]);
            }
            win
        })
        .collect())
}

/// Spectral-flux onset strength, one value per `ONSET_HOP` samples.
#[derive(Clone, Debug, PartialEq)]
pub struct OnsetEnvelope {
    pub strength: Vec<f64>,
    /// Frame indices of detected peaks.
    pub peaks: Vec<usize>,
    pub sample_rate: u32,
}

impl OnsetEnvelope {
    pub fn frame_time(&self, i: usize) -> f64 {
        (i * ONSET_HOP) as f64 / self.sample_rate as f64
    }

    pub fn peak_times(&self) -> Vec<f64> {
        self.peaks.iter().map(|&p| self.frame_time(p)).collect()
    }
}

/// Half-wave-rectified spectral flux of Hann-windowed magnitude spectra.
/// Peaks are strict local maxima (first of a plateau) above mean + 1 std.
pub fn onset_envelope(w: &Waveform) -> Result<OnsetEnvelope> {
    w.require_canonical_rate()?;
    let nfft = ONSET_HOP;
    let fft = FftPlanner::new().plan_fft_forward(nfft);
    let win = hann(ONSET_WINDOW);
    let frames = w.len().div_ceil(ONSET_HOP);
    let mut prev: Option<Vec<f64>> = None;
    let mut strength = Vec::with_capacity(frames);
    for f in 0..frames {
        let start = f * ONSET_HOP;
        let mut buf = vec![Complex::new(0.0, 0.0); nfft];
        for i in 0..ONSET_WINDOW {
            let s = w.samples.get(start + i).copied().unwrap_or(0.0);
            buf[i] = Complex::new(s * win[i], 0.0);
        }
        fft.process(&mut buf);
        let mag: Vec<f64> = buf[..nfft / 2 + 1].iter().map(|c| c.norm()).collect();
        let flux = match &prev {
            Some(p) => mag.iter().zip(p).map(|(a, b)| (a - b).max(0.0)).sum(),
            None => mag.iter().sum(),
        };
        strength.push(flux);
        prev = Some(mag);
    }
    let peaks = pick_peaks(&strength);
    Ok(OnsetEnvelope { strength, peaks, sample_rate: w.sample_rate })
}

/// Local maxima strictly above `mean + std`.
pub fn pick_peaks(x: &[f64]) -> Vec<usize> {
    if x.is_empty() {
        return Vec::new();
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let std = (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    let thr = mean + std;
    (0..x.len())
        .filter(|&i| {
            let left = if i > 0 { x[i - 1] } else { f64::NEG_INFINITY };
            let right = if i + 1 < x.len() { x[i + 1] } else { f64::NEG_INFINITY };
            x[i] > thr && x[i] > left && x[i] >= right
        })
        .collect()
}

/// `T x F` per-frame audio features.
#[derive(Clone, Debug, PartialEq)]
pub struct OnsetTrack {
    dim: usize,
    data: Vec<f64>,
}

impl OnsetTrack {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::Shape(format!("{} values do not form rows of width {dim}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("onset features contain non-finite values".into()));
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Averages consecutive groups of `factor` frames; a trailing partial
    /// group is dropped.
    pub fn pooled(&self, factor: usize) -> OnsetTrack {
        let n = self.len() / factor;
        let mut data = vec![0.0; n * self.dim];
        for i in 0..n {
            for t in i * factor..(i + 1) * factor {
                for (d, v) in data[i * self.dim..(i + 1) * self.dim].iter_mut().zip(self.row(t)) {
                    *d += v / factor as f64;
                }
            }
        }
        OnsetTrack { dim: self.dim, data }
    }

    pub fn slice(&self, start: usize, len: usize) -> Result<OnsetTrack> {
        if start + len > self.len() {
            return Err(Error::Argument(format!("feature slice {start}..{} beyond {} frames", start + len, self.len())));
        }
        Ok(OnsetTrack { dim: self.dim, data: self.data[start * self.dim..(start + len) * self.dim].to_vec() })
    }
}

/// Built-in per-video-frame audio features: the onset strength sampled at
/// the frame time followed by 16 log band energies (log-spaced bands from
/// 100 Hz to Nyquist) of the frame's samples.
pub fn builtin_onset_features(w: &Waveform, n_frames: usize, fps: f64) -> Result<OnsetTrack> {
    w.require_canonical_rate()?;
    let avail = w.video_frames(fps);
    if n_frames > avail {
        return Err(Error::Validation(format!(
            "audio covers {avail} frames at {fps} fps, {n_frames} requested"
        )));
    }
    let env = onset_envelope(w)?;
    let seg = (SAMPLE_RATE as f64 / fps).round() as usize;
    let nfft = seg.next_power_of_two();
    let fft = FftPlanner::new().plan_fft_forward(nfft);
    let win = hann(seg);
    let nyq = SAMPLE_RATE as f64 / 2.0;
    let edges: Vec<f64> = (0..=ONSET_BANDS)
        .map(|i| 100.0 * (nyq / 100.0).powf(i as f64 / ONSET_BANDS as f64))
        .collect();
    let mut data = Vec::with_capacity(n_frames * BUILTIN_ONSET_DIM);
    for t in 0..n_frames {
        let start = (t as f64 * SAMPLE_RATE as f64 / fps).round() as usize;
        let oi = ((start as f64 / ONSET_HOP as f64).round() as usize).min(env.strength.len() - 1);
        data.push(env.strength[oi]);
        let mut buf = vec![Complex::new(0.0, 0.0); nfft];
        for i in 0..seg {
            let s = w.samples.get(start + i).copied().unwrap_or(0.0);
            buf[i] = Complex::new(s * win[i], 0.0);
        }
        fft.process(&mut buf);
        let mut bands = [0.0; ONSET_BANDS];
        for (k, c) in buf[..nfft / 2 + 1].iter().enumerate() {
            let hz = k as f64 * SAMPLE_RATE as f64 / nfft as f64;
            if hz < edges[0] {
                continue;
            }
            let b = edges.partition_point(|&e| e <= hz).saturating_sub(1).min(ONSET_BANDS - 1);
            bands[b] += c.norm_sqr() / nfft as f64;
        }
        data.extend(bands.iter().map(|e| e.max(LOG_FLOOR).ln()));
    }
    OnsetTrack::new(BUILTIN_ONSET_DIM, data)
}

fn parse_matrix(path: &Path, text: &str, header_skip: usize) -> Result<(usize, Vec<f64>)> {
    let mut width = None;
    let mut data = Vec::new();
    for (i, line) in text.lines().enumerate().skip(header_skip) {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|e| Error::Parse { line: i + 1, msg: format!("{s:?}: {e}") })
            })
            .collect::<Result<Vec<_>>>()?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("row has {} values, previous rows have {w}", row.len()),
                })
            }
            _ => {}
        }
        data.extend(row);
    }
    let width = width.ok_or_else(|| Error::Format { path: path.to_path_buf(), msg: "no data rows".into() })?;
    Ok((width, data))
}

/// Reads a text feature matrix, requiring `expected` columns when given.
pub fn load_feature_file(path: &Path, expected: Option<usize>) -> Result<OnsetTrack> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (width, data) = parse_matrix(path, &text, 0)?;
    if let Some(exp) = expected {
        if width != exp {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("expected {exp} features per frame, found {width}"),
            });
        }
    }
    OnsetTrack::new(width, data)
}

/// Reads a precomputed 426-wide onset feature file.
pub fn load_onset_file(path: &Path) -> Result<OnsetTrack> {
    load_feature_file(path, Some(ONSET_FILE_DIM))
}

pub fn write_feature_file(path: &Path, track: &OnsetTrack) -> Result<()> {
    let mut out = String::new();
    for t in 0..track.len() {
        let row: Vec<String> = track.row(t).iter().map(|v| crate::motion::fmt_real(*v)).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// MFCC window cache: a `T 28 12` header line, then one line of 12 values
/// per window row.
pub fn write_mfcc_cache(path: &Path, windows: &[Vec<f64>]) -> Result<()> {
    let mut out = format!("{} {MFCC_CONTEXT} {MFCC_DIM}\n", windows.len());
    for w in windows {
        for row in w.chunks(MFCC_DIM) {
            let vals: Vec<String> = row.iter().map(|v| crate::motion::fmt_real(*v)).collect();
            out.push_str(&vals.join(" "));
            out.push('\n');
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_mfcc_cache(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header: Vec<usize> = text
        .lines()
        .next()
        .unwrap_or("")
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| Error::Parse { line: 1, msg: format!("bad header field {s:?}") }))
        .collect::<Result<_>>()?;
    if header.len() != 3 || header[1] != MFCC_CONTEXT || header[2] != MFCC_DIM {
        return Err(Error::Format { path: path.to_path_buf(), msg: format!("header {header:?} is not `T 28 12`") });
    }
    let (width, data) = parse_matrix(path, &text, 1)?;
    let per = MFCC_CONTEXT * MFCC_DIM;
    if width != MFCC_DIM || data.len() != header[0] * per {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("expected {} windows of {MFCC_CONTEXT}x{MFCC_DIM}", header[0]),
        });
    }
    Ok(data.chunks(per).map(|c| c.to_vec()).collect())
}
