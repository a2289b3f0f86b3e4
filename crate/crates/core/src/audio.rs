//! Waveform loading and the two model inputs: a linear-magnitude spectrogram
//! and a pooled utterance-level magnitude spectrum.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{arg_err, Error, Result};
use crate::tensor::Tensor;

macro_rules! text_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.trim() {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::Format(format!(
                        concat!("unknown ", stringify!($name), " `{}`"), other
                    ))),
                }
            }
        }
    };
}

text_enum!(Domain { Source => "source", Target => "target" });
text_enum!(Split { Train => "train", Test => "test" });
text_enum!(Label { Normal => "normal", Anomalous => "anomalous", Unknown => "unknown" });

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClipMeta {
    pub path: String,
    pub machine_type: String,
    pub attribute: String,
    pub domain: Domain,
    pub split: Split,
    pub label: Label,
}

impl ClipMeta {
    pub fn validate(&self) -> Result<()> {
        if self.split == Split::Train && self.label != Label::Normal {
            return Err(arg_err!(
                "training clip `{}` must be labelled normal, found {}",
                self.path,
                self.label
            ));
        }
        Ok(())
    }
}

/// Mono waveform with its metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub meta: ClipMeta,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32, meta: ClipMeta) -> Result<Self> {
        if samples.is_empty() {
            return Err(arg_err!("clip `{}` has no samples", meta.path));
        }
        if sample_rate == 0 {
            return Err(arg_err!("clip `{}` has sample rate 0", meta.path));
        }
        meta.validate()?;
        Ok(Self {
            samples,
            sample_rate,
            meta,
        })
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Number of samples in a clip of `seconds` at `sample_rate`.
pub fn target_len(sample_rate: u32, seconds: f64) -> usize {
    (seconds * sample_rate as f64).round() as usize
}

/// Tiles `samples` end to end and truncates to exactly `len` samples.
pub fn repeat_to_length(samples: &[f64], len: usize) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(arg_err!("cannot condition an empty clip"));
    }
    Ok(samples.iter().copied().cycle().take(len).collect())
}

/// Repeats and clips the waveform to `target_seconds`.
pub fn condition_clip(clip: &AudioClip, target_seconds: f64) -> Result<AudioClip> {
    let len = target_len(clip.sample_rate, target_seconds);
    if len == 0 {
        return Err(arg_err!("target length of {target_seconds} s is empty"));
    }
    Ok(AudioClip {
        samples: repeat_to_length(&clip.samples, len)?,
        sample_rate: clip.sample_rate,
        meta: clip.meta.clone(),
    })
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

/// Frame count of an uncentred STFT.
pub fn frame_count(len: usize, window: usize, hop: usize) -> Option<usize> {
    (len >= window && hop > 0).then(|| (len - window) / hop + 1)
}

/// Spectrogram + spectrum front end with cached FFT plans.
#[derive(Clone)]
pub struct FeatureExtractor {
    window: usize,
    hop: usize,
    signal_len: usize,
    spectrum_bins: usize,
    hann: Vec<f64>,
    frame_fft: Arc<dyn Fft<f64>>,
    full_fft: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for FeatureExtractor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FeatureExtractor")
            .field("window", &self.window)
            .field("hop", &self.hop)
            .field("signal_len", &self.signal_len)
            .field("spectrum_bins", &self.spectrum_bins)
            .finish()
    }
}

/// Spectrogram and pooled spectrum of one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePair {
    /// `[F, T]`, `F = window/2 + 1`.
    pub spectrogram: Tensor,
    /// `[spectrum_bins]`.
    pub spectrum: Tensor,
}

impl FeatureExtractor {
    /// `signal_len` is the conditioned clip length in samples.
    pub fn new(window: usize, hop: usize, signal_len: usize, spectrum_bins: usize) -> Result<Self> {
        if window < 2 || hop == 0 {
            return Err(arg_err!("window {window} / hop {hop} invalid"));
        }
        if signal_len < window {
            return Err(arg_err!("signal length {signal_len} shorter than window {window}"));
        }
        let raw_bins = signal_len / 2 + 1;
        if spectrum_bins == 0 || spectrum_bins > raw_bins {
            return Err(arg_err!(
                "spectrum bins {spectrum_bins} must lie in 1..={raw_bins} for {signal_len} samples"
            ));
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            window,
            hop,
            signal_len,
            spectrum_bins,
            hann: hann(window),
            frame_fft: planner.plan_fft_forward(window),
            full_fft: planner.plan_fft_forward(signal_len),
        })
    }

    pub fn freq_bins(&self) -> usize {
        self.window / 2 + 1
    }

    pub fn frames(&self) -> usize {
        frame_count(self.signal_len, self.window, self.hop).expect("checked in new")
    }

    pub fn signal_len(&self) -> usize {
        self.signal_len
    }

    pub fn spectrum_bins(&self) -> usize {
        self.spectrum_bins
    }

    /// Linear magnitude STFT, Hann window, no centring: `[window/2+1, T]`.
    pub fn stft_magnitude(&self, samples: &[f64]) -> Result<Tensor> {
        let t = frame_count(samples.len(), self.window, self.hop).ok_or_else(|| {
            arg_err!(
                "clip of {} samples is shorter than the {}-sample window",
                samples.len(),
                self.window
            )
        })?;
        let f = self.freq_bins();
        let mut out = vec![0.0; f * t];
        let mut buf = vec![Complex::new(0.0, 0.0); self.window];
        for frame in 0..t {
            let seg = &samples[frame * self.hop..][..self.window];
            for ((b, x), w) in buf.iter_mut().zip(seg).zip(&self.hann) {
                *b = Complex::new(x * w, 0.0);
            }
            self.frame_fft.process(&mut buf);
            for (k, c) in buf[..f].iter().enumerate() {
                out[k * t + frame] = c.norm();
            }
        }
        Tensor::new(&[f, t], out)
    }

    /// Magnitude of the one-sided DFT of the whole conditioned signal.
    pub fn raw_spectrum(&self, samples: &[f64]) -> Result<Vec<f64>> {
        if samples.len() != self.signal_len {
            return Err(arg_err!(
                "utterance spectrum needs a conditioned clip of {} samples, got {}",
                self.signal_len,
                samples.len()
            ));
        }
        let mut buf: Vec<Complex<f64>> = samples.iter().map(|&x| Complex::new(x, 0.0)).collect();
        self.full_fft.process(&mut buf);
        Ok(buf[..self.signal_len / 2 + 1].iter().map(|c| c.norm()).collect())
    }

    /// Raw spectrum mean-pooled into `spectrum_bins` contiguous groups.
    pub fn utterance_spectrum(&self, samples: &[f64]) -> Result<Tensor> {
        let raw = self.raw_spectrum(samples)?;
        Ok(Tensor::vector(mean_pool(&raw, self.spectrum_bins)))
    }

    pub fn extract(&self, samples: &[f64]) -> Result<FeaturePair> {
        Ok(FeaturePair {
            spectrogram: self.stft_magnitude(samples)?,
            spectrum: self.utterance_spectrum(samples)?,
        })
    }
}

/// Averages `v` over `bins` groups `[floor(i·n/bins), floor((i+1)·n/bins))`.
pub fn mean_pool(v: &[f64], bins: usize) -> Vec<f64> {
    let n = v.len();
    (0..bins)
        .map(|i| {
            let lo = i * n / bins;
            let hi = ((i + 1) * n / bins).max(lo + 1);
            v[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Reads a mono PCM16 or float32 WAV into samples in [-1, 1].
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Format(format!(
            "{} has {} channels; mono expected",
            path.display(),
            spec.channels
        )));
    }
    let samples = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(wav_err)?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(wav_err)?,
        (fmt_, bits) => {
            return Err(Error::Format(format!(
                "{}: unsupported sample format {fmt_:?}/{bits} bits",
                path.display()
            )))
        }
    };
    Ok((samples, spec.sample_rate))
}

/// Writes mono PCM16, clamping to [-1, 1].
pub fn write_wav_pcm16(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(v).map_err(wav_err)?;
    }
    w.finalize().map_err(wav_err)
}

pub const MANIFEST_HEADER: [&str; 6] = ["path", "machine_type", "attribute", "domain", "split", "label"];

/// Dataset listing. Relative clip paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub root: PathBuf,
    pub rows: Vec<ClipMeta>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let headers = rdr
            .headers()
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if headers.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
            return Err(Error::Format(format!(
                "{}: manifest header must be `{}`",
                path.display(),
                MANIFEST_HEADER.join(",")
            )));
        }
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Format(format!("{} row {}: {e}", path.display(), i + 2)))?;
            let row = ClipMeta {
                path: rec[0].to_string(),
                machine_type: rec[1].to_string(),
                attribute: rec[2].to_string(),
                domain: rec[3].parse()?,
                split: rec[4].parse()?,
                label: rec[5].parse()?,
            };
            row.validate()?;
            rows.push(row);
        }
        Ok(Self {
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            rows,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let io = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
        w.write_record(MANIFEST_HEADER).map_err(io)?;
        for r in &self.rows {
            w.write_record([
                r.path.as_str(),
                &r.machine_type,
                &r.attribute,
                r.domain.as_str(),
                r.split.as_str(),
                r.label.as_str(),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, row: &ClipMeta) -> PathBuf {
        let p = Path::new(&row.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ClipMeta> {
        self.rows.iter().filter(move |r| r.split == split)
    }

    /// Loads one row's waveform.
    pub fn load(&self, row: &ClipMeta) -> Result<AudioClip> {
        let (samples, sr) = read_wav(&self.resolve(row))?;
        AudioClip::new(samples, sr, row.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> ClipMeta {
        ClipMeta {
            path: "a.wav".into(),
            machine_type: "fan".into(),
            attribute: "a".into(),
            domain: Domain::Source,
            split: Split::Train,
            label: Label::Normal,
        }
    }

    fn clip(n: usize) -> AudioClip {
        AudioClip::new((0..n).map(|i| (i % 7) as f64 / 7.0).collect(), 16000, meta()).unwrap()
    }

    #[test]
    fn conditioning_tiles_and_truncates() {
        let c = condition_clip(&clip(96_000), 18.0).unwrap();
        assert_eq!(c.samples.len(), 288_000);
        assert_eq!(&c.samples[96_000..192_000], &clip(96_000).samples[..]);
        let same = condition_clip(&clip(288_000), 18.0).unwrap();
        assert_eq!(same.samples, clip(288_000).samples);
        let long = clip(320_000);
        let cut = condition_clip(&long, 18.0).unwrap();
        assert_eq!(cut.samples, long.samples[..288_000]);
    }

    #[test]
    fn empty_and_mislabelled_clips_are_rejected() {
        assert!(AudioClip::new(vec![], 16000, meta()).is_err());
        assert!(repeat_to_length(&[], 10).is_err());
        let mut m = meta();
        m.label = Label::Anomalous;
        assert!(AudioClip::new(vec![0.0], 16000, m).is_err());
    }

    #[test]
    fn frame_count_formula() {
        assert_eq!(frame_count(288_000, 1024, 512), Some(561));
        assert_eq!(frame_count(1023, 1024, 512), None);
        assert_eq!(frame_count(1024, 1024, 512), Some(1));
    }

    #[test]
    fn short_clip_is_an_error() {
        let fx = FeatureExtractor::new(1024, 512, 4096, 64).unwrap();
        assert!(fx.stft_magnitude(&[0.0; 100]).is_err());
        assert!(fx.utterance_spectrum(&[0.0; 4000]).is_err());
    }

    #[test]
    fn mean_pool_partitions() {
        assert_eq!(mean_pool(&[1.0, 3.0, 5.0, 7.0], 2), vec![2.0, 6.0]);
        assert_eq!(mean_pool(&[1.0, 2.0, 3.0], 3), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn text_enums_round_trip() {
        for d in [Domain::Source, Domain::Target] {
            assert_eq!(d.as_str().parse::<Domain>().unwrap(), d);
        }
        assert!("sideways".parse::<Split>().is_err());
    }
}
