//! The MFCC feature chain: magnitude spectrogram, Mel filter bank, MFCC,
//! and fixed-size overlapping chunk extraction.
//!
//! All stages are pure functions over in-memory samples. WAV decoding
//! lives in the companion crate; this module starts from an
//! [`AudioSignal`].

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_complex::Complex;

use crate::tensor::Tensor;

const PI: f64 = core::f64::consts::PI;

/// Floor added to Mel energies before the log so silent frames stay
/// finite.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DspError {
    #[error("invalid audio signal: {0}")]
    InvalidSignal(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("signal has {got} samples but one window needs {want}")]
    TooShort { got: usize, want: usize },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("negative frequency {0} has no Mel value")]
    NegativeFrequency(f64),
}

/// Mono audio in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioSignal {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioSignal {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, DspError> {
        if sample_rate == 0 {
            return Err(DspError::InvalidSignal("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(DspError::InvalidSignal("signal has no samples".into()));
        }
        if !samples.iter().all(|s| s.is_finite()) {
            return Err(DspError::InvalidSignal("samples must be finite".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
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

    /// Naive linear-interpolation resampler. Adequate for rate adaptation
    /// of speech features; not an anti-aliased converter.
    pub fn resampled(&self, target_rate: u32) -> Result<AudioSignal, DspError> {
        if target_rate == 0 {
            return Err(DspError::InvalidConfig("target rate must be positive".into()));
        }
        if target_rate == self.sample_rate {
            return Ok(self.clone());
        }
        let ratio = target_rate as f64 / self.sample_rate as f64;
        let n_out = libm::round(self.samples.len() as f64 * ratio) as usize;
        let n_out = n_out.max(1);
        let last = self.samples.len() - 1;
        let mut out = Vec::with_capacity(n_out);
        for i in 0..n_out {
            let pos = i as f64 / ratio;
            let i0 = libm::floor(pos) as usize;
            if i0 >= last {
                out.push(self.samples[last]);
            } else {
                let frac = pos - i0 as f64;
                out.push(self.samples[i0] * (1.0 - frac) + self.samples[i0 + 1] * frac);
            }
        }
        AudioSignal::new(out, target_rate)
    }
}

/// Short-time Fourier transform parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftConfig {
    /// Analysis window width M in samples.
    pub window_width: usize,
    /// FFT size N; must be a power of two and at least M.
    pub fft_size: usize,
    /// Frame step in samples.
    pub hop: usize,
}

impl Default for StftConfig {
    /// 25 ms Hann window, 10 ms hop at 16 kHz.
    fn default() -> Self {
        Self {
            window_width: 400,
            fft_size: 512,
            hop: 160,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<(), DspError> {
        if self.window_width == 0 || self.window_width > self.fft_size {
            return Err(DspError::InvalidConfig(alloc::format!(
                "need 0 < window_width <= fft_size, got M={}, N={}",
                self.window_width,
                self.fft_size
            )));
        }
        if !self.fft_size.is_power_of_two() {
            return Err(DspError::InvalidConfig(alloc::format!(
                "fft_size must be a power of two, got {}",
                self.fft_size
            )));
        }
        if self.hop == 0 {
            return Err(DspError::InvalidConfig("hop must be positive".into()));
        }
        Ok(())
    }

    /// Number of frequency bins kept (N/2 + 1).
    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }
}

/// In-place radix-2 decimation-in-time FFT. Length must be a power of
/// two.
pub(crate) fn fft_in_place(buf: &mut [Complex<f64>]) {
    let n = buf.len();
    debug_assert!(n.is_power_of_two());
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            buf.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let ang = -2.0 * PI / len as f64;
        let wlen = Complex::new(libm::cos(ang), libm::sin(ang));
        let half = len / 2;
        let mut start = 0;
        while start < n {
            let mut w = Complex::new(1.0, 0.0);
            for k in 0..half {
                let u = buf[start + k];
                let v = buf[start + k + half] * w;
                buf[start + k] = u + v;
                buf[start + k + half] = u - v;
                w *= wlen;
            }
            start += len;
        }
        len <<= 1;
    }
}

/// Periodic Hann window of width `m`.
fn hann(m: usize) -> Vec<f64> {
    (0..m)
        .map(|i| 0.5 * (1.0 - libm::cos(2.0 * PI * i as f64 / m as f64)))
        .collect()
}

/// Reflect-padded sample lookup: index `k` may run from `-pad` to
/// `len + pad - 1` in signal coordinates.
fn reflect(samples: &[f64], k: isize) -> f64 {
    let len = samples.len() as isize;
    let idx = if k < 0 {
        -k
    } else if k >= len {
        2 * (len - 1) - k
    } else {
        k
    };
    samples[idx as usize]
}

/// Magnitude spectrogram, frames x (N/2+1).
///
/// Frames are centered: frame t covers signal samples
/// `t*hop - M/2 .. t*hop + M/2` with reflection at the edges, giving
/// `ceil(len / hop)` frames.
pub fn spectrogram(signal: &AudioSignal, cfg: &StftConfig) -> Result<Tensor, DspError> {
    cfg.validate()?;
    let m = cfg.window_width;
    let n = cfg.fft_size;
    let len = signal.len();
    if len < m {
        return Err(DspError::TooShort { got: len, want: m });
    }
    let n_frames = len.div_ceil(cfg.hop);
    let n_bins = cfg.n_bins();
    let window = hann(m);
    let pad = (m / 2) as isize;

    let mut out = Tensor::zeros(vec![n_frames, n_bins]);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for t in 0..n_frames {
        let start = (t * cfg.hop) as isize - pad;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < m {
                Complex::new(reflect(signal.samples(), start + i as isize) * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft_in_place(&mut buf);
        for k in 0..n_bins {
            out.set(t, k, libm::sqrt(buf[k].re * buf[k].re + buf[k].im * buf[k].im));
        }
    }
    Ok(out)
}

/// Mel value of a frequency in Hz: 2595 * log10(1 + f/700).
pub fn hz_to_mel(f: f64) -> Result<f64, DspError> {
    if f < 0.0 {
        return Err(DspError::NegativeFrequency(f));
    }
    Ok(2595.0 * libm::log10(1.0 + f / 700.0))
}

/// Inverse of [`hz_to_mel`].
pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (libm::pow(10.0, m / 2595.0) - 1.0)
}

/// Triangular Mel filter bank with unit-peak filters whose centers are
/// equally spaced on the Mel scale.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterBank {
    weights: Tensor,
    f_min: f64,
    f_max: f64,
}

impl MelFilterBank {
    pub fn new(
        n_filters: usize,
        fft_size: usize,
        sample_rate: u32,
        f_min: f64,
        f_max: f64,
    ) -> Result<Self, DspError> {
        if n_filters == 0 {
            return Err(DspError::InvalidConfig("need at least one Mel filter".into()));
        }
        let nyquist = sample_rate as f64 / 2.0;
        if !(0.0 <= f_min && f_min < f_max && f_max <= nyquist) {
            return Err(DspError::InvalidConfig(alloc::format!(
                "need 0 <= f_min < f_max <= {nyquist}, got f_min={f_min}, f_max={f_max}"
            )));
        }
        let n_bins = fft_size / 2 + 1;
        let mel_lo = hz_to_mel(f_min)?;
        let mel_hi = hz_to_mel(f_max)?;
        // n_filters + 2 breakpoints: left foot, centers, right foot.
        let edges: Vec<f64> = (0..n_filters + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_filters + 1) as f64))
            .collect();
        let mut weights = Tensor::zeros(vec![n_filters, n_bins]);
        let bin_hz = sample_rate as f64 / fft_size as f64;
        for f in 0..n_filters {
            let (left, center, right) = (edges[f], edges[f + 1], edges[f + 2]);
            if !(left < center && center < right) {
                return Err(DspError::InvalidConfig(alloc::format!(
                    "filter {f} has degenerate breakpoints ({left}, {center}, {right}); \
                     fewer filters or a larger FFT are needed"
                )));
            }
            let mut any = false;
            for k in 0..n_bins {
                let freq = k as f64 * bin_hz;
                let rise = (freq - left) / (center - left);
                let fall = (right - freq) / (right - center);
                let w = libm::fmax(0.0, libm::fmin(rise, fall));
                if w > 0.0 {
                    any = true;
                }
                weights.set(f, k, w);
            }
            if !any {
                return Err(DspError::InvalidConfig(alloc::format!(
                    "filter {f} covers no FFT bin; fewer filters or a larger FFT are needed"
                )));
            }
        }
        Ok(Self {
            weights,
            f_min,
            f_max,
        })
    }

    pub fn n_filters(&self) -> usize {
        self.weights.rows()
    }

    pub fn n_bins(&self) -> usize {
        self.weights.cols()
    }

    /// Filter matrix, `n_filters` rows by `N/2+1` columns.
    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn f_min(&self) -> f64 {
        self.f_min
    }

    pub fn f_max(&self) -> f64 {
        self.f_max
    }
}

/// Mel spectrogram: MelSpec(t,f) = sum_k Spec(t,k) * b_{f,k}.
pub fn mel_spectrogram(spec: &Tensor, bank: &MelFilterBank) -> Result<Tensor, DspError> {
    if spec.shape().len() != 2 || spec.cols() != bank.n_bins() {
        return Err(DspError::DimMismatch(alloc::format!(
            "spectrogram shape {:?} does not fit a bank with {} bins",
            spec.shape(),
            bank.n_bins()
        )));
    }
    spec.matmul(&bank.weights().transposed())
        .map_err(|e| DspError::DimMismatch(alloc::format!("{e}")))
}

/// How Mel energies become cepstral coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MfccVariant {
    /// Orthonormal DCT-II of the log energies, keeping the lowest
    /// `n_mfcc` coefficients.
    #[default]
    Dct2,
    /// Real part of (1/F) * sum_{f=0}^{F} log(MelSpec(t,f)) *
    /// exp(i 2 pi (m-1) f / (F+1)) for m = 1..n_mfcc.
    ComplexExp,
}

/// Orthonormal DCT-II of one row.
pub fn dct2_ortho(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let norm0 = libm::sqrt(1.0 / n as f64);
    let norm = libm::sqrt(2.0 / n as f64);
    (0..n)
        .map(|k| {
            let mut acc = 0.0;
            for (i, &xi) in x.iter().enumerate() {
                acc += xi * libm::cos(PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64);
            }
            acc * if k == 0 { norm0 } else { norm }
        })
        .collect()
}

/// Orthonormal DCT-III, the inverse of [`dct2_ortho`] on full-length
/// coefficient vectors.
pub fn dct3_ortho(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let norm0 = libm::sqrt(1.0 / n as f64);
    let norm = libm::sqrt(2.0 / n as f64);
    (0..n)
        .map(|i| {
            let mut acc = 0.0;
            for (k, &xk) in x.iter().enumerate() {
                let s = if k == 0 { norm0 } else { norm };
                acc += s * xk * libm::cos(PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64);
            }
            acc
        })
        .collect()
}

/// Cepstral coefficients from a Mel spectrogram, frames x n_mfcc.
pub fn mfcc(melspec: &Tensor, n_mfcc: usize, variant: MfccVariant) -> Result<Tensor, DspError> {
    if melspec.shape().len() != 2 {
        return Err(DspError::DimMismatch("mel spectrogram must be rank 2".into()));
    }
    let n_filters = melspec.cols();
    if n_mfcc == 0 || n_mfcc > n_filters {
        return Err(DspError::InvalidConfig(alloc::format!(
            "need 1 <= n_mfcc <= {n_filters}, got {n_mfcc}"
        )));
    }
    if melspec.data().iter().any(|&v| v < 0.0) {
        return Err(DspError::InvalidConfig(
            "mel spectrogram entries must be nonnegative".into(),
        ));
    }
    let frames = melspec.rows();
    let mut out = Tensor::zeros(vec![frames, n_mfcc]);
    let mut logrow = vec![0.0; n_filters];
    for t in 0..frames {
        for f in 0..n_filters {
            logrow[f] = libm::log(melspec.at(t, f) + LOG_FLOOR);
        }
        match variant {
            MfccVariant::Dct2 => {
                let coeffs = dct2_ortho(&logrow);
                for m in 0..n_mfcc {
                    out.set(t, m, coeffs[m]);
                }
            }
            MfccVariant::ComplexExp => {
                // F is the highest filter index; the sum runs over all
                // F+1 filters and is scaled by 1/F as written.
                let f_top = (n_filters - 1) as f64;
                for m in 0..n_mfcc {
                    let mut acc = 0.0;
                    for (f, &lv) in logrow.iter().enumerate() {
                        let ang = 2.0 * PI * m as f64 * f as f64 / n_filters as f64;
                        acc += lv * libm::cos(ang);
                    }
                    out.set(t, m, acc / f_top);
                }
            }
        }
    }
    Ok(out)
}

/// Fixed-size overlapping windows over an MFCC matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkSet {
    /// Each chunk is `chunk_len` x n_mfcc.
    pub chunks: Vec<Tensor>,
    /// Frame step between chunk starts.
    pub hop_frames: usize,
    /// Frame count of the source matrix.
    pub source_len: usize,
}

/// Splits a frames x n_mfcc matrix into `chunk_len`-frame windows every
/// `round(chunk_len * (1 - overlap))` frames. A source shorter than one
/// chunk yields a single zero-padded chunk; trailing frames that do not
/// fill a chunk are dropped.
pub fn chunk_mfcc(m: &Tensor, chunk_len: usize, overlap: f64) -> Result<ChunkSet, DspError> {
    if chunk_len == 0 {
        return Err(DspError::InvalidConfig("chunk_len must be positive".into()));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(DspError::InvalidConfig(alloc::format!(
            "overlap must be in [0,1), got {overlap}"
        )));
    }
    let hop_frames = libm::round(chunk_len as f64 * (1.0 - overlap)) as usize;
    if hop_frames == 0 {
        return Err(DspError::InvalidConfig(alloc::format!(
            "overlap {overlap} leaves a zero-frame hop for chunk_len {chunk_len}"
        )));
    }
    let frames = m.rows();
    let width = m.cols();
    let mut chunks = Vec::new();
    if frames < chunk_len {
        let mut c = Tensor::zeros(vec![chunk_len, width]);
        for t in 0..frames {
            for j in 0..width {
                c.set(t, j, m.at(t, j));
            }
        }
        chunks.push(c);
    } else {
        let count = (frames - chunk_len) / hop_frames + 1;
        for i in 0..count {
            let start = i * hop_frames;
            let c = Tensor::from_fn(chunk_len, width, |t, j| m.at(start + t, j));
            chunks.push(c);
        }
    }
    Ok(ChunkSet {
        chunks,
        hop_frames,
        source_len: frames,
    })
}

/// Full feature pipeline settings.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub stft: StftConfig,
    pub n_filters: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub n_mfcc: usize,
    pub variant: MfccVariant,
    pub chunk_len: usize,
    pub overlap: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            stft: StftConfig::default(),
            n_filters: 64,
            f_min: 0.0,
            f_max: 8_000.0,
            n_mfcc: 40,
            variant: MfccVariant::Dct2,
            chunk_len: 64,
            overlap: 0.25,
        }
    }
}

/// Chunked features of one signal, with a note of any resampling that
/// was applied on the way in.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkFeatures {
    pub chunks: ChunkSet,
    pub resampled_from: Option<u32>,
}

/// Signal to chunked MFCCs in one call. Signals at a different sample
/// rate are linearly resampled first and the original rate is reported.
pub fn extract_chunks(signal: &AudioSignal, cfg: &FeatureConfig) -> Result<ChunkFeatures, DspError> {
    let (work, resampled_from) = if signal.sample_rate() == cfg.sample_rate {
        (signal.clone(), None)
    } else {
        (signal.resampled(cfg.sample_rate)?, Some(signal.sample_rate()))
    };
    let spec = spectrogram(&work, &cfg.stft)?;
    let bank = MelFilterBank::new(
        cfg.n_filters,
        cfg.stft.fft_size,
        cfg.sample_rate,
        cfg.f_min,
        cfg.f_max,
    )?;
    let mel = mel_spectrogram(&spec, &bank)?;
    let coeffs = mfcc(&mel, cfg.n_mfcc, cfg.variant)?;
    let chunks = chunk_mfcc(&coeffs, cfg.chunk_len, cfg.overlap)?;
    Ok(ChunkFeatures {
        chunks,
        resampled_from,
    })
}
