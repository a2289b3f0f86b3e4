//! Experiment configuration.
//!
//! The file format is UTF-8 text with one `section.key = value` per line;
//! `#` starts a comment. Lists are comma separated. Every key has a default
//! from the chosen preset and unknown keys are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::excitation::{ExcitationWidths, MaskSet};
use crate::ftc::{ChunkAxis, ChunkSpec, EncoderWidths};
use crate::spectrum::SpectrumNetConfig;
use crate::synth::{AnomalyKind, AnomalySpec, DatasetCounts};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Full,
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "desk" => Ok(Preset::Desk),
            "full" => Ok(Preset::Full),
            other => Err(Error::Config(format!("unknown preset `{other}` (desk or full)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioConfig {
    pub sample_rate: u32,
    pub window: usize,
    pub hop: usize,
    pub target_seconds: f64,
    pub spectrum_bins: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChunkingConfig {
    pub freq_chunks: usize,
    pub freq_overlap: f64,
    pub time_chunks: usize,
    pub time_overlap: f64,
}

impl ChunkingConfig {
    pub fn specs(&self) -> Result<(ChunkSpec, ChunkSpec)> {
        Ok((
            ChunkSpec::new(self.freq_chunks, self.freq_overlap, ChunkAxis::Frequency)?,
            ChunkSpec::new(self.time_chunks, self.time_overlap, ChunkAxis::Time)?,
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub ftc: EncoderWidths,
    pub excitation: ExcitationWidths,
    pub embedding_dim: usize,
    pub use_ftc_encoder: bool,
    pub use_excitation_network: bool,
    pub masks: MaskSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub mixup_alpha: f64,
    pub n_subclusters: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoringConfig {
    pub k: usize,
    pub n_target_prototypes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub clip_seconds: f64,
    pub train_source: usize,
    pub train_target: usize,
    pub test_per_machine: usize,
    pub anomalies: Vec<AnomalyKind>,
    pub detune: f64,
    pub extra_tone: f64,
    pub am_rate_change: f64,
    pub transient_clicks: f64,
    pub interference: f64,
}

impl SynthConfig {
    /// The enabled anomaly kinds with their magnitudes.
    pub fn anomaly_specs(&self) -> Result<Vec<AnomalySpec>> {
        self.anomalies
            .iter()
            .map(|&k| {
                let m = match k {
                    AnomalyKind::Detune => self.detune,
                    AnomalyKind::ExtraTone => self.extra_tone,
                    AnomalyKind::AmRateChange => self.am_rate_change,
                    AnomalyKind::TransientClicks => self.transient_clicks,
                };
                AnomalySpec::new(k, m)
            })
            .collect()
    }

    pub fn counts(&self) -> DatasetCounts {
        DatasetCounts {
            train_source: self.train_source,
            train_target: self.train_target,
            test: self.test_per_machine,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub audio: AudioConfig,
    pub chunking: ChunkingConfig,
    pub model: ModelConfig,
    pub spectrum_net: SpectrumNetConfig,
    pub training: TrainingConfig,
    pub scoring: ScoringConfig,
    pub synth: SynthConfig,
    pub paths: PathsConfig,
}

fn list<T: FromStr>(v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(|p| {
            p.trim()
                .parse::<T>()
                .map_err(|_| Error::Config(format!("bad list entry `{p}` in `{v}`")))
        })
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn scalar<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse::<T>()
        .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
}

impl ExperimentConfig {
    /// Full-size network widths and the published protocol values.
    pub fn full() -> Self {
        Self {
            audio: AudioConfig {
                sample_rate: 16_000,
                window: 1024,
                hop: 512,
                target_seconds: 18.0,
                spectrum_bins: 8192,
            },
            chunking: ChunkingConfig {
                freq_chunks: 8,
                freq_overlap: 0.5,
                time_chunks: 8,
                time_overlap: 0.5,
            },
            model: ModelConfig {
                ftc: EncoderWidths::full(),
                excitation: ExcitationWidths::full(),
                embedding_dim: 128,
                use_ftc_encoder: true,
                use_excitation_network: true,
                masks: MaskSet::ALL,
            },
            spectrum_net: SpectrumNetConfig::full(),
            training: TrainingConfig {
                lr: 0.001,
                batch_size: 64,
                epochs: 100,
                mixup_alpha: 0.2,
                n_subclusters: 16,
                seed: 0,
            },
            scoring: ScoringConfig {
                k: 16,
                n_target_prototypes: 10,
            },
            synth: SynthConfig {
                seed: 2024,
                clip_seconds: 10.0,
                train_source: 990,
                train_target: 10,
                test_per_machine: 200,
                anomalies: AnomalyKind::ALL.to_vec(),
                detune: 1.06,
                extra_tone: 0.3,
                am_rate_change: 1.5,
                transient_clicks: 1.0,
                interference: 0.0,
            },
            paths: PathsConfig {
                data_dir: PathBuf::from("data"),
                out_dir: PathBuf::from("runs"),
            },
        }
    }

    /// Minutes-scale CPU preset on 2-second synthetic clips.
    pub fn desk() -> Self {
        let mut c = Self::full();
        c.audio.target_seconds = 2.0;
        c.audio.spectrum_bins = 2048;
        c.chunking.freq_chunks = 4;
        c.chunking.time_chunks = 4;
        c.model.ftc = EncoderWidths {
            stem: 4,
            blocks: vec![8, 8, 16, 16],
        };
        c.model.excitation = ExcitationWidths {
            stem: 4,
            pair: 4,
            stages: vec![8, 8, 16, 32],
        };
        c.model.embedding_dim = 32;
        c.spectrum_net = SpectrumNetConfig {
            conv_channels: vec![8, 16, 32],
            conv_kernels: vec![11, 7, 5],
            conv_strides: vec![4, 4, 4],
            dense_widths: vec![128, 64, 64, 32, 32],
        };
        c.training.batch_size = 32;
        c.training.epochs = 12;
        c.training.n_subclusters = 4;
        c.synth.clip_seconds = 2.0;
        c.synth.train_source = 99;
        c.synth.train_target = 10;
        c.synth.test_per_machine = 40;
        // strong enough nuisance that an untrained embedding is near chance
        c.synth.interference = 2.0;
        c.synth.extra_tone = 1.0;
        c.synth.transient_clicks = 3.0;
        c
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::desk(),
            Preset::Full => Self::full(),
        }
    }

    /// Sets one `section.key` from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "audio.sample_rate" => self.audio.sample_rate = scalar(key, v)?,
            "audio.window" => self.audio.window = scalar(key, v)?,
            "audio.hop" => self.audio.hop = scalar(key, v)?,
            "audio.target_seconds" => self.audio.target_seconds = scalar(key, v)?,
            "audio.spectrum_bins" => self.audio.spectrum_bins = scalar(key, v)?,
            "chunking.freq_chunks" => self.chunking.freq_chunks = scalar(key, v)?,
            "chunking.freq_overlap" => self.chunking.freq_overlap = scalar(key, v)?,
            "chunking.time_chunks" => self.chunking.time_chunks = scalar(key, v)?,
            "chunking.time_overlap" => self.chunking.time_overlap = scalar(key, v)?,
            "model.ftc_stem" => self.model.ftc.stem = scalar(key, v)?,
            "model.ftc_blocks" => self.model.ftc.blocks = list(v)?,
            "model.excitation_stem" => self.model.excitation.stem = scalar(key, v)?,
            "model.excitation_pair" => self.model.excitation.pair = scalar(key, v)?,
            "model.excitation_stages" => self.model.excitation.stages = list(v)?,
            "model.embedding_dim" => self.model.embedding_dim = scalar(key, v)?,
            "model.use_ftc_encoder" => self.model.use_ftc_encoder = scalar(key, v)?,
            "model.use_excitation_network" => self.model.use_excitation_network = scalar(key, v)?,
            "model.masks" => self.model.masks = v.parse()?,
            "spectrum_net.conv_channels" => self.spectrum_net.conv_channels = list(v)?,
            "spectrum_net.conv_kernels" => self.spectrum_net.conv_kernels = list(v)?,
            "spectrum_net.conv_strides" => self.spectrum_net.conv_strides = list(v)?,
            "spectrum_net.dense_widths" => self.spectrum_net.dense_widths = list(v)?,
            "training.lr" => self.training.lr = scalar(key, v)?,
            "training.batch_size" => self.training.batch_size = scalar(key, v)?,
            "training.epochs" => self.training.epochs = scalar(key, v)?,
            "training.mixup_alpha" => self.training.mixup_alpha = scalar(key, v)?,
            "training.n_subclusters" => self.training.n_subclusters = scalar(key, v)?,
            "training.seed" => self.training.seed = scalar(key, v)?,
            "scoring.k" => self.scoring.k = scalar(key, v)?,
            "scoring.n_target_prototypes" => self.scoring.n_target_prototypes = scalar(key, v)?,
            "synth.seed" => self.synth.seed = scalar(key, v)?,
            "synth.clip_seconds" => self.synth.clip_seconds = scalar(key, v)?,
            "synth.train_source" => self.synth.train_source = scalar(key, v)?,
            "synth.train_target" => self.synth.train_target = scalar(key, v)?,
            "synth.test_per_machine" => self.synth.test_per_machine = scalar(key, v)?,
            "synth.anomalies" => self.synth.anomalies = list(v)?,
            "synth.detune" => self.synth.detune = scalar(key, v)?,
            "synth.extra_tone" => self.synth.extra_tone = scalar(key, v)?,
            "synth.am_rate_change" => self.synth.am_rate_change = scalar(key, v)?,
            "synth.transient_clicks" => self.synth.transient_clicks = scalar(key, v)?,
            "synth.interference" => self.synth.interference = scalar(key, v)?,
            "paths.data_dir" => self.paths.data_dir = PathBuf::from(v),
            "paths.out_dir" => self.paths.out_dir = PathBuf::from(v),
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("audio.sample_rate", self.audio.sample_rate.to_string()),
            ("audio.window", self.audio.window.to_string()),
            ("audio.hop", self.audio.hop.to_string()),
            ("audio.target_seconds", self.audio.target_seconds.to_string()),
            ("audio.spectrum_bins", self.audio.spectrum_bins.to_string()),
            ("chunking.freq_chunks", self.chunking.freq_chunks.to_string()),
            ("chunking.freq_overlap", self.chunking.freq_overlap.to_string()),
            ("chunking.time_chunks", self.chunking.time_chunks.to_string()),
            ("chunking.time_overlap", self.chunking.time_overlap.to_string()),
            ("model.ftc_stem", self.model.ftc.stem.to_string()),
            ("model.ftc_blocks", join(&self.model.ftc.blocks)),
            ("model.excitation_stem", self.model.excitation.stem.to_string()),
            ("model.excitation_pair", self.model.excitation.pair.to_string()),
            ("model.excitation_stages", join(&self.model.excitation.stages)),
            ("model.embedding_dim", self.model.embedding_dim.to_string()),
            ("model.use_ftc_encoder", self.model.use_ftc_encoder.to_string()),
            (
                "model.use_excitation_network",
                self.model.use_excitation_network.to_string(),
            ),
            ("model.masks", self.model.masks.to_string()),
            ("spectrum_net.conv_channels", join(&self.spectrum_net.conv_channels)),
            ("spectrum_net.conv_kernels", join(&self.spectrum_net.conv_kernels)),
            ("spectrum_net.conv_strides", join(&self.spectrum_net.conv_strides)),
            ("spectrum_net.dense_widths", join(&self.spectrum_net.dense_widths)),
            ("training.lr", self.training.lr.to_string()),
            ("training.batch_size", self.training.batch_size.to_string()),
            ("training.epochs", self.training.epochs.to_string()),
            ("training.mixup_alpha", self.training.mixup_alpha.to_string()),
            ("training.n_subclusters", self.training.n_subclusters.to_string()),
            ("training.seed", self.training.seed.to_string()),
            ("scoring.k", self.scoring.k.to_string()),
            (
                "scoring.n_target_prototypes",
                self.scoring.n_target_prototypes.to_string(),
            ),
            ("synth.seed", self.synth.seed.to_string()),
            ("synth.clip_seconds", self.synth.clip_seconds.to_string()),
            ("synth.train_source", self.synth.train_source.to_string()),
            ("synth.train_target", self.synth.train_target.to_string()),
            ("synth.test_per_machine", self.synth.test_per_machine.to_string()),
            ("synth.anomalies", join(&self.synth.anomalies)),
            ("synth.detune", self.synth.detune.to_string()),
            ("synth.extra_tone", self.synth.extra_tone.to_string()),
            ("synth.am_rate_change", self.synth.am_rate_change.to_string()),
            ("synth.transient_clicks", self.synth.transient_clicks.to_string()),
            ("synth.interference", self.synth.interference.to_string()),
            ("paths.data_dir", self.paths.data_dir.display().to_string()),
            ("paths.out_dir", self.paths.out_dir.display().to_string()),
        ]
    }

    /// Applies `section.key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `section.key = value`", n + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        self.validate()
    }

    pub fn from_text(base: Preset, text: &str) -> Result<Self> {
        let mut c = Self::preset(base);
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(base: Preset, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(base, &text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut section = "";
        for (k, v) in self.entries() {
            let sec = k.split('.').next().unwrap_or("");
            if sec != section {
                if !section.is_empty() {
                    s.push('\n');
                }
                let _ = writeln!(s, "# {sec}");
                section = sec;
            }
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.audio.sample_rate == 0 || self.audio.window < 2 || self.audio.hop == 0 {
            return bad("audio sample_rate, window and hop must be positive");
        }
        if !(self.audio.target_seconds > 0.0) {
            return bad("audio.target_seconds must be positive");
        }
        self.chunking.specs()?;
        if !self.model.use_ftc_encoder && !self.model.use_excitation_network {
            return bad("at least one spectrogram branch must be enabled");
        }
        if self.model.ftc.blocks.is_empty() || self.model.excitation.stages.is_empty() {
            return bad("encoder block lists must be non-empty");
        }
        if self.model.embedding_dim == 0 {
            return bad("model.embedding_dim must be positive");
        }
        self.spectrum_net.validate()?;
        if !(self.training.lr > 0.0) {
            return bad("training.lr must be positive");
        }
        if self.training.batch_size < 2 {
            return bad("training.batch_size must be at least 2");
        }
        if self.training.mixup_alpha < 0.0 {
            return bad("training.mixup_alpha must be non-negative (0 disables mixup)");
        }
        if self.training.n_subclusters == 0 || self.scoring.k == 0 {
            return bad("sub-cluster and k-means counts must be positive");
        }
        if !(self.synth.clip_seconds > 0.0) || !(self.synth.interference >= 0.0) {
            return bad("synth.clip_seconds must be positive and synth.interference non-negative");
        }
        self.synth.anomaly_specs()?;
        Ok(())
    }

    /// Conditioned clip length in samples.
    pub fn signal_len(&self) -> usize {
        crate::audio::target_len(self.audio.sample_rate, self.audio.target_seconds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        for p in [Preset::Desk, Preset::Full] {
            let c = ExperimentConfig::preset(p);
            let back = ExperimentConfig::from_text(Preset::Full, &c.to_text()).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = ExperimentConfig::from_text(Preset::Desk, "training.lrr = 0.1").unwrap_err();
        assert!(e.to_string().contains("unknown config key"));
        assert!(ExperimentConfig::from_text(Preset::Desk, "training.lr 0.1").is_err());
        assert!(ExperimentConfig::from_text(Preset::Desk, "training.lr = fast").is_err());
    }

    #[test]
    fn overrides_and_comments() {
        let c =
            ExperimentConfig::from_text(Preset::Desk, "# hi\ntraining.epochs = 3 # short\nmodel.masks = c\n").unwrap();
        assert_eq!(c.training.epochs, 3);
        assert_eq!(c.model.masks, MaskSet::CHANNEL);
    }

    #[test]
    fn both_branches_off_is_invalid() {
        let e = ExperimentConfig::from_text(
            Preset::Desk,
            "model.use_ftc_encoder = false\nmodel.use_excitation_network = false",
        );
        assert!(e.is_err());
    }

    #[test]
    fn full_protocol_values() {
        let c = ExperimentConfig::full();
        assert_eq!((c.audio.window, c.audio.hop), (1024, 512));
        assert_eq!(c.audio.target_seconds, 18.0);
        assert_eq!(c.training.lr, 0.001);
        assert_eq!(c.training.batch_size, 64);
        assert_eq!(c.training.epochs, 100);
        assert_eq!((c.scoring.k, c.scoring.n_target_prototypes), (16, 10));
        assert_eq!(c.signal_len(), 288_000);
    }
}
