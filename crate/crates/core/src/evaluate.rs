//! End-to-end scoring of a manifest's test split.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::audio::{AudioClip, ClipMeta, Domain, FeaturePair, Label, Manifest, Split};
use crate::config::ScoringConfig;
use crate::error::{arg_err, Error, Result};
use crate::metrics::{auc, integrated_score, pauc, MachineMetrics, PAUC_MAX_FPR};
use crate::model::Detector;
use crate::scoring::{anomaly_score, PrototypeBank};
use crate::train::load_conditioned;

const EMBED_BATCH: usize = 16;

/// Eval-mode embeddings of conditioned clips, extracted chunk by chunk.
pub fn embed_clips(det: &mut Detector, clips: &[AudioClip]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(clips.len());
    for chunk in clips.chunks(EMBED_BATCH) {
        let fx = &det.features;
        let feats: Vec<FeaturePair> = chunk
            .par_iter()
            .map(|c| fx.extract(&c.samples))
            .collect::<Result<_>>()?;
        let refs: Vec<&FeaturePair> = feats.iter().collect();
        out.extend(det.embed(&refs)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipScore {
    pub meta: ClipMeta,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub scores: Vec<ClipScore>,
    pub machines: Vec<MachineMetrics>,
    /// `(machine, message)` for machines that could not be scored.
    pub errors: Vec<(String, String)>,
    pub integrated: Option<f64>,
}

impl ScoreReport {
    pub fn mean_auc(&self) -> Option<f64> {
        let v: Vec<f64> = self
            .machines
            .iter()
            .flat_map(|m| [m.auc_source, m.auc_target])
            .flatten()
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn mean_pauc(&self) -> Option<f64> {
        let v: Vec<f64> = self.machines.iter().filter_map(|m| m.pauc).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// True when every machine produced all three metrics.
    pub fn complete(&self) -> bool {
        self.errors.is_empty() && self.machines.iter().all(MachineMetrics::is_complete)
    }

    pub fn scores_csv(&self) -> String {
        let mut s = String::from("clip_path,machine_type,domain,label,anomaly_score\n");
        for c in &self.scores {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                c.meta.path, c.meta.machine_type, c.meta.domain, c.meta.label, c.score
            );
        }
        s
    }

    pub fn machines_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let mut s = String::from("machine,auc_source,auc_target,pauc\n");
        for m in &self.machines {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                m.machine,
                opt(m.auc_source),
                opt(m.auc_target),
                opt(m.pauc)
            );
        }
        let _ = writeln!(s, "integrated_score,{}", opt(self.integrated));
        s
    }

    pub fn text(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("   -  ".to_string(), |x| format!("{:6.2}", 100.0 * x));
        let mut s = String::new();
        let _ = writeln!(s, "{:<16} {:>8} {:>8} {:>8}", "machine", "AUC(src)", "AUC(tgt)", "pAUC");
        for m in &self.machines {
            let _ = writeln!(
                s,
                "{:<16} {:>8} {:>8} {:>8}",
                m.machine,
                pct(m.auc_source),
                pct(m.auc_target),
                pct(m.pauc)
            );
        }
        let _ = writeln!(s, "mean AUC         {}", pct(self.mean_auc()));
        let _ = writeln!(s, "mean pAUC        {}", pct(self.mean_pauc()));
        let _ = writeln!(s, "integrated score {}", pct(self.integrated));
        for (m, e) in &self.errors {
            let _ = writeln!(s, "error: {m}: {e}");
        }
        s
    }

    /// Writes `scores.csv`, `machines.csv` and `report.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<[PathBuf; 3]> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = [dir.join("scores.csv"), dir.join("machines.csv"), dir.join("report.txt")];
        for (p, body) in files.iter().zip([self.scores_csv(), self.machines_csv(), self.text()]) {
            std::fs::write(p, body).map_err(|e| Error::io(p, e))?;
        }
        Ok(files)
    }
}

fn split_scores<'a>(scores: impl Iterator<Item = &'a ClipScore>) -> (Vec<f64>, Vec<f64>) {
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for c in scores {
        match c.meta.label {
            Label::Anomalous => pos.push(c.score),
            Label::Normal => neg.push(c.score),
            Label::Unknown => {}
        }
    }
    (pos, neg)
}

/// Per-machine metrics: AUC per domain, pAUC over both domains together.
pub fn machine_metrics(machine: &str, scores: &[ClipScore]) -> MachineMetrics {
    let of = |d: Option<Domain>| {
        split_scores(
            scores
                .iter()
                .filter(|c| c.meta.machine_type == machine && d.is_none_or(|d| c.meta.domain == d)),
        )
    };
    let domain_auc = |d| {
        let (p, n) = of(Some(d));
        auc(&p, &n)
            .inspect_err(|e| log::warn!("{machine} {d} AUC absent: {e}"))
            .ok()
    };
    let (p, n) = of(None);
    MachineMetrics {
        machine: machine.to_string(),
        auc_source: domain_auc(Domain::Source),
        auc_target: domain_auc(Domain::Target),
        pauc: pauc(&p, &n, PAUC_MAX_FPR)
            .inspect_err(|e| log::warn!("{machine} pAUC absent: {e}"))
            .ok(),
    }
}

/// Builds banks from training embeddings and scores the test embeddings.
pub fn score_embeddings(
    train: &[(ClipMeta, Vec<f64>)],
    test: &[(ClipMeta, Vec<f64>)],
    cfg: &ScoringConfig,
    seed: u64,
) -> Result<ScoreReport> {
    type Embeddings = Vec<Vec<f64>>;
    let mut groups: BTreeMap<&str, (Embeddings, Embeddings)> = BTreeMap::new();
    for (m, e) in train {
        if m.label != Label::Normal {
            continue;
        }
        let g = groups.entry(&m.machine_type).or_default();
        match m.domain {
            Domain::Source => g.0.push(e.clone()),
            Domain::Target => g.1.push(e.clone()),
        }
    }
    let mut banks = BTreeMap::new();
    let mut errors = Vec::new();
    for (machine, (src, tgt)) in &groups {
        match PrototypeBank::build(machine, src, tgt, cfg.k, cfg.n_target_prototypes, seed) {
            Ok(b) => {
                banks.insert(machine.to_string(), b);
            }
            Err(e) => errors.push((machine.to_string(), e.to_string())),
        }
    }
    let mut scores = Vec::with_capacity(test.len());
    let mut machines: Vec<String> = Vec::new();
    for (m, e) in test {
        if !machines.contains(&m.machine_type) {
            machines.push(m.machine_type.clone());
        }
        let Some(bank) = banks.get(&m.machine_type) else {
            continue;
        };
        scores.push(ClipScore {
            meta: m.clone(),
            score: anomaly_score(e, bank)?,
        });
    }
    machines.sort();
    let mut metrics = Vec::new();
    for m in &machines {
        if !banks.contains_key(m) {
            if !errors.iter().any(|(n, _)| n == m) {
                errors.push((m.clone(), "no prototype bank (no normal training clips)".into()));
            }
            continue;
        }
        metrics.push(machine_metrics(m, &scores));
    }
    let integrated = if metrics.is_empty() {
        None
    } else {
        integrated_score(&metrics)
            .inspect_err(|e| log::warn!("integrated score absent: {e}"))
            .ok()
    };
    Ok(ScoreReport {
        scores,
        machines: metrics,
        errors,
        integrated,
    })
}

/// Scores conditioned test clips against banks built from conditioned training clips.
pub fn evaluate_clips(det: &mut Detector, train: &[AudioClip], test: &[AudioClip]) -> Result<ScoreReport> {
    if test.is_empty() {
        return Err(arg_err!("no test clips"));
    }
    let train_emb = embed_clips(det, train)?;
    let test_emb = embed_clips(det, test)?;
    let train: Vec<_> = train.iter().map(|c| c.meta.clone()).zip(train_emb).collect();
    let test: Vec<_> = test.iter().map(|c| c.meta.clone()).zip(test_emb).collect();
    score_embeddings(&train, &test, &det.config.scoring, det.config.training.seed)
}

/// Embeds the manifest's train and test splits and scores the test split.
pub fn evaluate(det: &mut Detector, manifest: &Manifest) -> Result<ScoreReport> {
    let (sr, secs) = (det.config.audio.sample_rate, det.config.audio.target_seconds);
    let train_rows: Vec<ClipMeta> = manifest.split(Split::Train).cloned().collect();
    let test_rows: Vec<ClipMeta> = manifest.split(Split::Test).cloned().collect();
    let train = load_conditioned(manifest, &train_rows, sr, secs)?;
    let test = load_conditioned(manifest, &test_rows, sr, secs)?;
    evaluate_clips(det, &train, &test)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(machine: &str, split: Split, domain: Domain, label: Label) -> ClipMeta {
        ClipMeta {
            path: format!("{machine}_{split}_{domain}_{label}.wav"),
            machine_type: machine.into(),
            attribute: "a".into(),
            domain,
            split,
            label,
        }
    }

    #[test]
    fn missing_bank_is_a_per_machine_error() {
        let train = vec![(meta("fan", Split::Train, Domain::Source, Label::Normal), vec![1.0, 0.0])];
        let test = vec![
            (meta("fan", Split::Test, Domain::Source, Label::Normal), vec![1.0, 0.1]),
            (
                meta("fan", Split::Test, Domain::Source, Label::Anomalous),
                vec![0.0, 1.0],
            ),
            (meta("fan", Split::Test, Domain::Target, Label::Normal), vec![1.0, 0.2]),
            (
                meta("fan", Split::Test, Domain::Target, Label::Anomalous),
                vec![0.1, 1.0],
            ),
            (meta("pump", Split::Test, Domain::Source, Label::Normal), vec![1.0, 0.0]),
        ];
        let cfg = ScoringConfig {
            k: 4,
            n_target_prototypes: 2,
        };
        let r = score_embeddings(&train, &test, &cfg, 0).unwrap();
        assert_eq!(r.machines.len(), 1);
        assert_eq!(r.machines[0].auc_source, Some(1.0));
        assert_eq!(r.errors.len(), 1);
        assert_eq!(r.errors[0].0, "pump");
        assert!(!r.complete());
        assert!(r.machines_csv().ends_with("integrated_score,1\n"));
    }
}
