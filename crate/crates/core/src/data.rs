//! Labeled frame datasets: the synthetic spectro-temporal task and the
//! `TDNF` feature archive.
//!
//! Archive layout (little-endian):
//!
//! ```text
//! "TDNF" | version u16 | records u64
//! per record: utt_len u32 | utt utf8 | seg_len u32 | seg utf8 | T u32 | dim u32
//!             | T*dim f32 (row-major) | T u32 labels
//! ```

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::FrameSequence;
use crate::numerics::Tensor;
use crate::tdnn::WindowGeometry;

pub const ARCHIVE_MAGIC: &[u8; 4] = b"TDNF";
pub const ARCHIVE_VERSION: u16 = 1;
pub const FEAT_DIM: usize = 40;
/// Label of frames outside every template.
pub const BACKGROUND: u32 = 0;

/// One utterance with a label per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub seq: FrameSequence,
    pub labels: Vec<u32>,
}

/// Utterances plus a flat frame index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    utterances: Vec<Utterance>,
    /// `offsets[i]` is the global index of utterance `i`'s first frame.
    offsets: Vec<usize>,
    n_frames: usize,
}

impl Dataset {
    pub fn new(utterances: Vec<Utterance>) -> Result<Self> {
        let mut offsets = Vec::with_capacity(utterances.len());
        let mut n = 0;
        for u in &utterances {
            if u.labels.len() != u.seq.n_frames() {
                return Err(Error::Input(format!(
                    "utterance {} has {} frames but {} labels",
                    u.seq.utterance_id,
                    u.seq.n_frames(),
                    u.labels.len()
                )));
            }
            offsets.push(n);
            n += u.labels.len();
        }
        Ok(Self { utterances, offsets, n_frames: n })
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn into_utterances(self) -> Vec<Utterance> {
        self.utterances
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    /// `(utterance, frame)` of a global frame index.
    pub fn locate(&self, i: usize) -> (usize, usize) {
        let u = self.offsets.partition_point(|&o| o <= i) - 1;
        (u, i - self.offsets[u])
    }

    pub fn label(&self, i: usize) -> u32 {
        let (u, t) = self.locate(i);
        self.utterances[u].labels[t]
    }

    /// Largest label plus one.
    pub fn n_labels(&self) -> usize {
        self.utterances
            .iter()
            .flat_map(|u| u.labels.iter())
            .map(|&l| l as usize + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn label_histogram(&self, n: usize) -> Vec<usize> {
        let mut h = vec![0; n];
        for u in &self.utterances {
            for &l in &u.labels {
                if (l as usize) < n {
                    h[l as usize] += 1;
                }
            }
        }
        h
    }

    /// Edge-padded windows `[B, span, dim]` and labels for global frame indices.
    pub fn window_batch(&self, indices: &[usize], geom: &WindowGeometry) -> Result<(Tensor, Vec<usize>)> {
        let w = geom.span() * geom.feat_dim;
        let mut data = vec![0.0; indices.len() * w];
        let mut labels = Vec::with_capacity(indices.len());
        for (out, &i) in data.chunks_exact_mut(w).zip(indices) {
            if i >= self.n_frames {
                return Err(Error::Input(format!("frame index {i} out of {}", self.n_frames)));
            }
            let (u, t) = self.locate(i);
            let utt = &self.utterances[u];
            if utt.seq.frames.cols() != geom.feat_dim {
                return Err(Error::dim(format!(
                    "utterance {} has {} dims, model expects {}",
                    utt.seq.utterance_id,
                    utt.seq.frames.cols(),
                    geom.feat_dim
                )));
            }
            geom.fill_window(utt.seq.frames.data(), utt.seq.n_frames(), t, out);
            labels.push(utt.labels[t] as usize);
        }
        Ok((Tensor::new(vec![indices.len(), geom.span(), geom.feat_dim], data)?, labels))
    }

    /// Deterministic split by a hash of the utterance id; `val_percent` of
    /// 100 hash buckets go to validation.
    pub fn split(&self, val_percent: u32) -> Result<(Dataset, Dataset)> {
        let (val, train): (Vec<_>, Vec<_>) = self
            .utterances
            .iter()
            .cloned()
            .partition(|u| is_validation(&u.seq.utterance_id, val_percent));
        Ok((Dataset::new(train)?, Dataset::new(val)?))
    }
}

pub fn is_validation(utterance_id: &str, val_percent: u32) -> bool {
    let d = Sha256::digest(utterance_id.as_bytes());
    let v = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
    v % 100 < val_percent as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthTaskConfig {
    pub n_classes: usize,
    pub frames_per_utterance: usize,
    pub n_utterances: usize,
    pub pattern_bandwidth: usize,
    pub pattern_duration: usize,
    pub noise_std: f64,
    pub seed: u64,
    /// Ridge peak height.
    pub amplitude: f64,
    pub min_gap: usize,
    pub max_gap: usize,
    /// Utterances per segment id.
    pub utterances_per_segment: usize,
}

impl Default for SynthTaskConfig {
    fn default() -> Self {
        Self {
            n_classes: 8,
            frames_per_utterance: 500,
            n_utterances: 100,
            pattern_bandwidth: 10,
            pattern_duration: 12,
            noise_std: 0.5,
            seed: 0,
            amplitude: 2.0,
            min_gap: 3,
            max_gap: 12,
            utterances_per_segment: 10,
        }
    }
}

impl SynthTaskConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_classes < 2 {
            return fail(format!("n_classes must be at least 2, got {}", self.n_classes));
        }
        if self.pattern_bandwidth < 2 || self.pattern_bandwidth > FEAT_DIM {
            return fail(format!("pattern_bandwidth must be in [2, {FEAT_DIM}], got {}", self.pattern_bandwidth));
        }
        if self.pattern_duration < 2 || self.pattern_duration > 23 {
            return fail(format!("pattern_duration must be in [2, 23], got {}", self.pattern_duration));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return fail("noise_std must be finite and non-negative".into());
        }
        if !(self.amplitude > 0.0 && self.amplitude.is_finite()) {
            return fail("amplitude must be positive".into());
        }
        if self.min_gap == 0 || self.min_gap > self.max_gap {
            return fail(format!("need 1 <= min_gap <= max_gap, got {}..{}", self.min_gap, self.max_gap));
        }
        if self.frames_per_utterance < self.pattern_duration + 2 * self.max_gap {
            return fail("frames_per_utterance too short for one template with gaps".into());
        }
        if self.n_utterances == 0 || self.utterances_per_segment == 0 {
            return fail("n_utterances and utterances_per_segment must be positive".into());
        }
        Ok(())
    }

    /// Template of class `c` in `1..=n_classes`: `[duration][40]`.
    ///
    /// Classes come in pairs sharing a frequency band; the pair members sweep
    /// the band upward and downward.
    pub fn template(&self, c: usize) -> Vec<[f64; FEAT_DIM]> {
        assert!((1..=self.n_classes).contains(&c), "class {c} out of range");
        let n_bands = self.n_classes.div_ceil(2);
        let band = (c - 1) / 2;
        let up = (c - 1) % 2 == 0;
        let bw = self.pattern_bandwidth;
        let room = FEAT_DIM - bw;
        let start = if n_bands == 1 { 0 } else { (band * room + (n_bands - 1) / 2) / (n_bands - 1) };
        let d = self.pattern_duration;
        (0..d)
            .map(|j| {
                let frac = j as f64 / (d - 1) as f64;
                let pos = (bw - 1) as f64 * if up { frac } else { 1.0 - frac };
                let mut row = [0.0; FEAT_DIM];
                for (k, v) in row[start..start + bw].iter_mut().enumerate() {
                    let z = k as f64 - pos;
                    *v = self.amplitude * (-0.5 * z * z).exp();
                }
                row
            })
            .collect()
    }
}

/// Noise-free synthetic utterances with the embedded classes, before noise.
fn layout(cfg: &SynthTaskConfig, rng: &mut ChaCha8Rng) -> Vec<(Vec<f64>, Vec<u32>)> {
    let templates: Vec<_> = (1..=cfg.n_classes).map(|c| cfg.template(c)).collect();
    let mut deck: Vec<usize> = Vec::new();
    let t_len = cfg.frames_per_utterance;
    (0..cfg.n_utterances)
        .map(|_| {
            let mut frames = vec![0.0; t_len * FEAT_DIM];
            let mut labels = vec![BACKGROUND; t_len];
            let mut pos = rng.random_range(cfg.min_gap..=cfg.max_gap);
            while pos + cfg.pattern_duration + cfg.min_gap <= t_len {
                if deck.is_empty() {
                    deck = (1..=cfg.n_classes).collect();
                    deck.shuffle(rng);
                }
                let c = deck.pop().expect("refilled");
                for (j, row) in templates[c - 1].iter().enumerate() {
                    frames[(pos + j) * FEAT_DIM..(pos + j + 1) * FEAT_DIM].copy_from_slice(row);
                    labels[pos + j] = c as u32;
                }
                pos += cfg.pattern_duration + rng.random_range(cfg.min_gap..=cfg.max_gap);
            }
            (frames, labels)
        })
        .collect()
}

/// Deterministic synthetic dataset. Values are rounded to `f32` so that the
/// archive stores them exactly.
pub fn generate(cfg: &SynthTaskConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let clean = layout(cfg, &mut rng);
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut utts = Vec::with_capacity(clean.len());
    for (u, (mut frames, labels)) in clean.into_iter().enumerate() {
        for v in frames.iter_mut() {
            let x = if cfg.noise_std > 0.0 { *v + noise.sample(&mut rng) } else { *v };
            *v = x as f32 as f64;
        }
        let t = labels.len();
        let seq = FrameSequence {
            frames: Tensor::matrix(t, FEAT_DIM, frames)?,
            utterance_id: format!("synth-{u:05}"),
            segment_id: format!("seg-{:04}", u / cfg.utterances_per_segment),
            sample_rate_src: 0,
        };
        utts.push(Utterance { seq, labels });
    }
    Dataset::new(utts)
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

/// Serialized archive bytes.
pub fn encode_archive(ds: &Dataset) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(ARCHIVE_MAGIC);
    out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
    out.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    for u in ds.utterances() {
        let f = &u.seq.frames;
        if f.cols() != FEAT_DIM {
            return Err(Error::dim(format!(
                "utterance {} has {} dims; archives hold {FEAT_DIM}",
                u.seq.utterance_id,
                f.cols()
            )));
        }
        put_str(&mut out, &u.seq.utterance_id);
        put_str(&mut out, &u.seq.segment_id);
        out.extend_from_slice(&(f.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(FEAT_DIM as u32).to_le_bytes());
        for &v in f.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for &l in &u.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_archive(ds: &Dataset, path: &Path) -> Result<()> {
    let bytes = encode_archive(ds)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated {what}: need {n} bytes, {} remain", self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let at = self.pos;
        let n = self.u32(what)? as usize;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::format(at as u64, format!("{what} is not UTF-8")))
    }
}

/// Parses archive bytes; any defect yields an error and no data.
pub fn decode_archive(buf: &[u8]) -> Result<Dataset> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4, "magic")? != ARCHIVE_MAGIC {
        return Err(Error::format(0, "bad magic, not a TDNF archive"));
    }
    let version = u16::from_le_bytes(c.take(2, "version")?.try_into().expect("2 bytes"));
    if version != ARCHIVE_VERSION {
        return Err(Error::format(4, format!("unsupported archive version {version}")));
    }
    let count = u64::from_le_bytes(c.take(8, "record count")?.try_into().expect("8 bytes"));
    let mut utts = Vec::new();
    for _ in 0..count {
        let utt = c.string("utterance id")?;
        let seg = c.string("segment id")?;
        let at = c.pos;
        let t = c.u32("frame count")? as usize;
        let dim_at = c.pos;
        let dim = c.u32("dimension")? as usize;
        if dim != FEAT_DIM {
            return Err(Error::format(dim_at as u64, format!("record {utt} has dim {dim}, expected {FEAT_DIM}")));
        }
        if t == 0 {
            return Err(Error::format(at as u64, format!("record {utt} has no frames")));
        }
        let raw = c.take(t * dim * 4, "frames")?;
        let frames: Vec<f64> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        let labels = c
            .take(t * 4, "labels")?
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let seq = FrameSequence {
            frames: Tensor::matrix(t, dim, frames)?,
            utterance_id: utt,
            segment_id: seg,
            sample_rate_src: 0,
        };
        utts.push(Utterance { seq, labels });
    }
    if c.pos != buf.len() {
        return Err(Error::format(c.pos as u64, "trailing bytes after the last record"));
    }
    Dataset::new(utts)
}

pub fn load_archive(path: &Path) -> Result<Dataset> {
    decode_archive(&std::fs::read(path)?)
}
