//! Module and excitation-mechanism ablations on a shared corpus.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::audio::{AudioClip, ClipMeta, Manifest, Split};
use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::evaluate::{evaluate_clips, ScoreReport};
use crate::excitation::MaskSet;
use crate::model::{Detector, LabelMap};
use crate::train::{load_conditioned, train, training_rows, EpochRecord};

/// Conditioned clips of both splits, loaded once.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub labels: LabelMap,
    pub train: Vec<AudioClip>,
    pub test: Vec<AudioClip>,
}

impl Corpus {
    pub fn load(manifest: &Manifest, cfg: &ExperimentConfig) -> Result<Self> {
        let (rows, labels) = training_rows(manifest)?;
        let (sr, secs) = (cfg.audio.sample_rate, cfg.audio.target_seconds);
        let test_rows: Vec<ClipMeta> = manifest.split(Split::Test).cloned().collect();
        Ok(Self {
            labels,
            train: load_conditioned(manifest, &rows, sr, secs)?,
            test: load_conditioned(manifest, &test_rows, sr, secs)?,
        })
    }
}

/// Trains a fresh detector on the corpus.
pub fn fit(cfg: &ExperimentConfig, corpus: &Corpus, log: Option<&Path>) -> Result<(Detector, Vec<EpochRecord>)> {
    let mut det = Detector::new(cfg.clone(), corpus.labels.clone())?;
    let history = train(&mut det, &corpus.train, log)?;
    Ok((det, history))
}

/// Which parts of the spectrogram path a variant keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Switches {
    pub use_ftc_encoder: bool,
    pub use_excitation_network: bool,
    pub masks: MaskSet,
}

impl Switches {
    pub fn apply(self, cfg: &ExperimentConfig) -> ExperimentConfig {
        let mut c = cfg.clone();
        c.model.use_ftc_encoder = self.use_ftc_encoder;
        c.model.use_excitation_network = self.use_excitation_network;
        c.model.masks = self.masks;
        c
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Variant {
    pub table: &'static str,
    pub system: &'static str,
    pub switches: Switches,
}

const fn sw(use_ftc_encoder: bool, use_excitation_network: bool, masks: MaskSet) -> Switches {
    Switches {
        use_ftc_encoder,
        use_excitation_network,
        masks,
    }
}

const C_T: MaskSet = MaskSet {
    channel: true,
    frequency: false,
    time: true,
};
const C_F: MaskSet = MaskSet {
    channel: true,
    frequency: true,
    time: false,
};

/// Rows of both ablation tables; the full model heads each.
pub const VARIANTS: [Variant; 8] = [
    Variant {
        table: "modules",
        system: "FTE-Net",
        switches: sw(true, true, MaskSet::ALL),
    },
    Variant {
        table: "modules",
        system: "w/o FTC-Encoder",
        switches: sw(false, true, MaskSet::ALL),
    },
    Variant {
        table: "modules",
        system: "w/o Excitation Network",
        switches: sw(true, false, MaskSet::ALL),
    },
    Variant {
        table: "modules",
        system: "w/o Both (baseline)",
        switches: sw(false, true, MaskSet::NONE),
    },
    Variant {
        table: "excitation",
        system: "FTE-Net",
        switches: sw(true, true, MaskSet::ALL),
    },
    Variant {
        table: "excitation",
        system: "w/o Both (Vanilla SE)",
        switches: sw(true, true, MaskSet::CHANNEL),
    },
    Variant {
        table: "excitation",
        system: "w/o freq. excitation",
        switches: sw(true, true, C_T),
    },
    Variant {
        table: "excitation",
        system: "w/o time excitation",
        switches: sw(true, true, C_F),
    },
];

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub table: &'static str,
    pub system: &'static str,
    pub mean_auc: Option<f64>,
    pub pauc: Option<f64>,
    pub integrated: Option<f64>,
}

/// Trains each distinct variant once and reports every table row.
///
/// `on_report` sees each distinct variant's report as it completes.
pub fn run_suite(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    mut on_report: impl FnMut(&Variant, &Detector, &ScoreReport) -> Result<()>,
) -> Result<Vec<AblationRow>> {
    // (mean AUC, pAUC, integrated) per distinct variant
    type Scores = (Option<f64>, Option<f64>, Option<f64>);
    let mut done: HashMap<Switches, Scores> = HashMap::new();
    let mut rows = Vec::with_capacity(VARIANTS.len());
    for v in &VARIANTS {
        let (mean_auc, pauc, integrated) = match done.get(&v.switches) {
            Some(r) => *r,
            None => {
                log::info!("ablation: training {} / {}", v.table, v.system);
                let (mut det, _) = fit(&v.switches.apply(cfg), corpus, None)?;
                let rep = evaluate_clips(&mut det, &corpus.train, &corpus.test)?;
                on_report(v, &det, &rep)?;
                let r = (rep.mean_auc(), rep.mean_pauc(), rep.integrated);
                done.insert(v.switches, r);
                r
            }
        };
        rows.push(AblationRow {
            table: v.table,
            system: v.system,
            mean_auc,
            pauc,
            integrated,
        });
    }
    Ok(rows)
}

pub fn rows_csv(rows: &[AblationRow]) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    let mut s = String::from("table,system,mean_auc,pauc,integrated_score\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.table,
            r.system,
            opt(r.mean_auc),
            opt(r.pauc),
            opt(r.integrated)
        );
    }
    s
}
