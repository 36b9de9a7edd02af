//! 40-d log-Mel filterbank features and utterance-mean / segment-variance
//! normalization.

use std::collections::BTreeMap;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Variance floor used by [`normalize`].
pub const VARIANCE_FLOOR: f64 = 1e-8;

/// One utterance's frames `[T, dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub frames: Tensor,
    pub utterance_id: String,
    pub segment_id: String,
    pub sample_rate_src: u32,
}

impl FrameSequence {
    pub fn new(frames: Tensor, utterance_id: impl Into<String>, segment_id: impl Into<String>) -> Result<Self> {
        if frames.rank() != 2 || frames.rows() == 0 {
            return Err(Error::Input(format!("frames {:?} are not a non-empty [T, dim] matrix", frames.shape())));
        }
        if !frames.all_finite() {
            return Err(Error::Input("frames contain non-finite values".into()));
        }
        Ok(Self {
            frames,
            utterance_id: utterance_id.into(),
            segment_id: segment_id.into(),
            sample_rate_src: 0,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.rows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FbankConfig {
    pub window_ms: f64,
    pub hop_ms: f64,
    /// `None` picks the next power of two at or above the window length.
    pub n_fft: Option<usize>,
    pub n_mels: usize,
    pub fmin: f64,
    /// `None` means 0.95 of the Nyquist frequency.
    pub fmax: Option<f64>,
    pub log_floor: f64,
}

impl Default for FbankConfig {
    fn default() -> Self {
        Self {
            window_ms: 25.0,
            hop_ms: 10.0,
            n_fft: None,
            n_mels: 40,
            fmin: 20.0,
            fmax: None,
            log_floor: 1e-10,
        }
    }
}

/// Frame geometry resolved for one sample rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Framing {
    pub window: usize,
    pub hop: usize,
    pub n_fft: usize,
    pub fmin: f64,
    pub fmax: f64,
}

impl FbankConfig {
    pub fn resolve(&self, rate: u32) -> Result<Framing> {
        if rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        let r = rate as f64;
        let window = (self.window_ms * r / 1000.0).round() as usize;
        let hop = (self.hop_ms * r / 1000.0).round() as usize;
        if window == 0 || hop == 0 {
            return Err(Error::Config(format!(
                "window {} ms / hop {} ms give empty frames at {rate} Hz",
                self.window_ms, self.hop_ms
            )));
        }
        let n_fft = self.n_fft.unwrap_or_else(|| window.next_power_of_two());
        if n_fft < window {
            return Err(Error::Config(format!("n_fft {n_fft} is shorter than the window ({window} samples)")));
        }
        let nyquist = r / 2.0;
        let fmax = self.fmax.unwrap_or(0.95 * nyquist);
        if self.n_mels == 0 {
            return Err(Error::Config("n_mels must be positive".into()));
        }
        if !(self.fmin >= 0.0 && self.fmin < fmax && fmax <= nyquist) {
            return Err(Error::Config(format!(
                "need 0 <= fmin < fmax <= {nyquist} Hz, got fmin {} and fmax {fmax}",
                self.fmin
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Config("log_floor must be positive".into()));
        }
        Ok(Framing { window, hop, n_fft, fmin: self.fmin, fmax })
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Centre frequencies (Hz) of the `n_mels` triangular filters.
pub fn mel_centers(n_mels: usize, fmin: f64, fmax: f64) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    (1..=n_mels)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// Triangular Mel filters over the `n_fft / 2 + 1` spectrum bins, `[n_mels][bins]`.
///
/// A filter narrower than one bin keeps a single unit weight at the bin
/// nearest its centre.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, rate: u32, fmin: f64, fmax: f64) -> Vec<Vec<f64>> {
    let bins = n_fft / 2 + 1;
    let bin_hz = rate as f64 / n_fft as f64;
    let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    (0..n_mels)
        .map(|m| {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            let mut row: Vec<f64> = (0..bins)
                .map(|b| {
                    let f = b as f64 * bin_hz;
                    if f > l && f < c {
                        (f - l) / (c - l)
                    } else if f >= c && f < r {
                        (r - f) / (r - c)
                    } else {
                        0.0
                    }
                })
                .collect();
            if row.iter().all(|&v| v == 0.0) {
                let nearest = ((c / bin_hz).round() as usize).min(bins - 1);
                row[nearest] = 1.0;
            }
            row
        })
        .collect()
}

pub fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Number of frames produced for `n_samples`.
pub fn frame_count(n_samples: usize, window: usize, hop: usize) -> usize {
    if n_samples < window {
        0
    } else {
        1 + (n_samples - window) / hop
    }
}

/// Log-Mel filterbank `[T, n_mels]`.
pub fn log_mel_fbank(pcm: &[f64], rate: u32, cfg: &FbankConfig) -> Result<Tensor> {
    let fr = cfg.resolve(rate)?;
    if pcm.len() < fr.window {
        return Err(Error::Input(format!(
            "{} samples is shorter than one {}-sample window",
            pcm.len(),
            fr.window
        )));
    }
    if let Some(i) = pcm.iter().position(|v| !v.is_finite()) {
        return Err(Error::Input(format!("sample {i} is not finite")));
    }
    let n_frames = frame_count(pcm.len(), fr.window, fr.hop);
    let bank = mel_filterbank(cfg.n_mels, fr.n_fft, rate, fr.fmin, fr.fmax);
    let win = hamming(fr.window);
    let fft = FftPlanner::new().plan_fft_forward(fr.n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); fr.n_fft];
    let mut mag = vec![0.0; fr.n_fft / 2 + 1];
    let mut out = Vec::with_capacity(n_frames * cfg.n_mels);
    for t in 0..n_frames {
        let frame = &pcm[t * fr.hop..t * fr.hop + fr.window];
        for (i, c) in buf.iter_mut().enumerate() {
            *c = Complex::new(if i < fr.window { frame[i] * win[i] } else { 0.0 }, 0.0);
        }
        fft.process(&mut buf);
        for (m, c) in mag.iter_mut().zip(&buf) {
            *m = c.norm();
        }
        for row in &bank {
            let e: f64 = row.iter().zip(&mag).map(|(w, m)| w * m).sum();
            out.push(e.max(cfg.log_floor).ln());
        }
    }
    Tensor::matrix(n_frames, cfg.n_mels, out)
}

/// 16-bit mono PCM as samples in [-1, 1) plus the sample rate.
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let mut reader = hound::WavReader::open(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Input(format!(
            "{}: expected 16-bit mono PCM, got {} channel(s) of {}-bit {:?}",
            path.display(),
            spec.channels,
            spec.bits_per_sample,
            spec.sample_format
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    Ok((samples, spec.sample_rate))
}

/// Dimensions whose segment variance hit the floor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NormReport {
    /// `(segment_id, dim)` pairs.
    pub floored: Vec<(String, usize)>,
}

/// Subtracts each utterance's per-dim mean, then divides by the per-dim
/// standard deviation of all mean-normalized frames in the same segment.
pub fn normalize(seqs: &[FrameSequence]) -> Result<(Vec<FrameSequence>, NormReport)> {
    let dim = match seqs.first() {
        Some(s) => s.frames.cols(),
        None => return Ok((Vec::new(), NormReport::default())),
    };
    let mut out = Vec::with_capacity(seqs.len());
    for s in seqs {
        if s.frames.rank() != 2 || s.frames.cols() != dim || s.frames.rows() == 0 {
            return Err(Error::Input(format!(
                "utterance {} has frames {:?}, expected [T >= 1, {dim}]",
                s.utterance_id,
                s.frames.shape()
            )));
        }
        let n = s.frames.rows() as f64;
        let mut mean = vec![0.0; dim];
        for r in 0..s.frames.rows() {
            for (m, v) in mean.iter_mut().zip(s.frames.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut c = s.clone();
        for r in 0..c.frames.rows() {
            for (v, m) in c.frames.row_mut(r).iter_mut().zip(&mean) {
                *v -= m;
            }
        }
        out.push(c);
    }
    // per-segment sums, accumulated in input order
    let mut stats: BTreeMap<&str, (f64, Vec<f64>)> = BTreeMap::new();
    for s in &out {
        let e = stats.entry(s.segment_id.as_str()).or_insert_with(|| (0.0, vec![0.0; dim]));
        e.0 += s.frames.rows() as f64;
        for r in 0..s.frames.rows() {
            for (acc, v) in e.1.iter_mut().zip(s.frames.row(r)) {
                *acc += v * v;
            }
        }
    }
    let mut report = NormReport::default();
    let mut scales: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (seg, (n, sq)) in &stats {
        let sc = sq
            .iter()
            .enumerate()
            .map(|(d, s)| {
                let var = s / n;
                if var < VARIANCE_FLOOR {
                    report.floored.push((seg.to_string(), d));
                    1.0 / VARIANCE_FLOOR.sqrt()
                } else {
                    1.0 / var.sqrt()
                }
            })
            .collect();
        scales.insert(seg.to_string(), sc);
    }
    for s in &mut out {
        let sc = &scales[&s.segment_id];
        for r in 0..s.frames.rows() {
            for (v, k) in s.frames.row_mut(r).iter_mut().zip(sc) {
                *v *= k;
            }
        }
    }
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn defaults_resolve() {
        let f = FbankConfig::default().resolve(16_000).unwrap();
        assert_eq!((f.window, f.hop, f.n_fft), (400, 160, 512));
        assert!((f.fmax - 7600.0).abs() < 1e-9);
    }

    #[test]
    fn silence_hits_floor() {
        let cfg = FbankConfig::default();
        let x = log_mel_fbank(&vec![0.0; 16_000], 16_000, &cfg).unwrap();
        assert_eq!(x.cols(), 40);
        assert!(x.data().iter().all(|&v| v == 1e-10f64.ln()));
    }

    #[test]
    fn frame_arithmetic() {
        let cfg = FbankConfig::default();
        for n in [400, 401, 559, 560, 12_345] {
            let x = log_mel_fbank(&vec![0.1; n], 16_000, &cfg).unwrap();
            assert_eq!(x.rows(), 1 + (n - 400) / 160);
        }
        assert!(matches!(log_mel_fbank(&[0.0; 399], 16_000, &cfg), Err(Error::Input(_))));
        let mut bad = vec![0.0; 800];
        bad[10] = f64::NAN;
        assert!(matches!(log_mel_fbank(&bad, 16_000, &cfg), Err(Error::Input(_))));
    }

    #[test]
    fn tone_lands_in_its_filter() {
        let cfg = FbankConfig::default();
        let centers = mel_centers(40, 20.0, 7600.0);
        for m in [5, 12, 20, 30, 38] {
            let f = centers[m];
            let pcm: Vec<f64> = (0..8000)
                .map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / 16_000.0).sin())
                .collect();
            let x = log_mel_fbank(&pcm, 16_000, &cfg).unwrap();
            for r in 0..x.rows() {
                let row = x.row(r);
                let arg = (0..40).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
                assert_eq!(arg, m, "tone at {f:.1} Hz");
            }
        }
    }

    #[test]
    fn filters_have_compact_positive_support() {
        let bank = mel_filterbank(40, 512, 16_000, 20.0, 7600.0);
        for row in &bank {
            assert!(row.iter().sum::<f64>() > 0.0);
            let nz: Vec<usize> = (0..row.len()).filter(|&i| row[i] > 0.0).collect();
            let (start, end) = (nz[0], *nz.last().unwrap());
            assert!(nz.iter().all(|&i| i >= start && i <= end));
            let peak = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert!(start <= peak && peak <= end);
        }
    }

    #[test]
    fn deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pcm = Tensor::uniform(&[4000], 0.5, &mut rng).into_data();
        let cfg = FbankConfig::default();
        assert_eq!(log_mel_fbank(&pcm, 16_000, &cfg).unwrap(), log_mel_fbank(&pcm, 16_000, &cfg).unwrap());
    }

    fn seq(rows: usize, dim: usize, utt: &str, seg: &str, seed: u64, offset: f64) -> FrameSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor::uniform(&[rows, dim], 2.0, &mut rng);
        t.data_mut().iter_mut().for_each(|v| *v += offset);
        FrameSequence::new(t, utt, seg).unwrap()
    }

    fn col_stats(rows: &[&[f64]], d: usize) -> (f64, f64) {
        let n = rows.len() as f64;
        let m = rows.iter().map(|r| r[d]).sum::<f64>() / n;
        let v = rows.iter().map(|r| (r[d] - m).powi(2)).sum::<f64>() / n;
        (m, v)
    }

    #[test]
    fn single_utterance_is_standardized() {
        let (out, rep) = normalize(&[seq(50, 4, "u", "s", 1, 3.0)]).unwrap();
        assert!(rep.floored.is_empty());
        let rows: Vec<&[f64]> = (0..50).map(|r| out[0].frames.row(r)).collect();
        for d in 0..4 {
            let (m, v) = col_stats(&rows, d);
            assert!(m.abs() < 1e-10 && (v - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn segment_pools_variance() {
        let a = seq(30, 3, "a", "s", 1, 5.0);
        let b = seq(20, 3, "b", "s", 2, -1.0);
        let (out, _) = normalize(&[a, b]).unwrap();
        for s in &out {
            let rows: Vec<&[f64]> = (0..s.n_frames()).map(|r| s.frames.row(r)).collect();
            for d in 0..3 {
                assert!(col_stats(&rows, d).0.abs() < 1e-10);
            }
        }
        let pooled: Vec<&[f64]> = out.iter().flat_map(|s| (0..s.n_frames()).map(move |r| s.frames.row(r))).collect();
        for d in 0..3 {
            let v = pooled.iter().map(|r| r[d] * r[d]).sum::<f64>() / pooled.len() as f64;
            assert!((v - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn constant_dim_is_floored() {
        let mut s = seq(10, 3, "u", "s", 4, 0.0);
        for r in 0..10 {
            s.frames.row_mut(r)[1] = 7.0;
        }
        let (out, rep) = normalize(&[s]).unwrap();
        assert_eq!(rep.floored, vec![("s".to_string(), 1)]);
        assert!((0..10).all(|r| out[0].frames.row(r)[1] == 0.0));
    }

    #[test]
    fn idempotent() {
        let segs = [seq(25, 3, "a", "x", 5, 1.0), seq(15, 3, "b", "x", 6, 0.0), seq(9, 3, "c", "y", 7, 2.0)];
        let (once, _) = normalize(&segs).unwrap();
        let (twice, _) = normalize(&once).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert!(a.frames.max_abs_diff(&b.frames) < 1e-8);
        }
    }
}
