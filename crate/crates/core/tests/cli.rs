//! Smoke tests of the command-line tool on a tiny dataset.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "synth.clip_seconds=0.5",
    "synth.train_source=6",
    "synth.train_target=2",
    "synth.test_per_machine=8",
    "audio.target_seconds=0.5",
    "audio.spectrum_bins=512",
    "spectrum_net.dense_widths=32,16,16,16,16",
    "training.epochs=1",
    "training.batch_size=8",
    "training.n_subclusters=2",
    "scoring.k=2",
];

fn fteasd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fteasd"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn with_tiny(mut args: Vec<&str>) -> Vec<&str> {
    for kv in TINY {
        args.extend(["--set", kv]);
    }
    args
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path) {
    ok(&fteasd(&with_tiny(vec!["synth", "--out", p(dir), "--seed", "5"])));
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((
                    path.strip_prefix(dir).unwrap().to_path_buf(),
                    std::fs::read(&path).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_reproducible_and_counts_rows() {
    let root = tempfile::tempdir().unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    synth(&a);
    synth(&b);
    let manifest = std::fs::read_to_string(a.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 1 + 2 * (6 + 2 + 8));
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), 1 + 32);
    assert!(ta == tb, "same seed, same files");

    let c = root.path().join("c");
    ok(&fteasd(&with_tiny(vec!["synth", "--out", p(&c), "--seed", "6"])));
    assert!(tree(&c) != ta);
}

#[test]
fn bad_arguments_fail_with_a_message() {
    let root = tempfile::tempdir().unwrap();
    let file = root.path().join("occupied");
    std::fs::write(&file, "x").unwrap();
    let out = fteasd(&with_tiny(vec!["synth", "--out", p(&file.join("sub"))]));
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());

    for args in [
        vec!["synth", "--no-such-flag"],
        vec!["synth", "--set", "audio.nonsense=1"],
        vec!["synth", "--set", "training.epochs"],
        vec!["synth", "--preset", "huge"],
        vec!["train", "--masks", "c,x"],
        vec!["frobnicate"],
    ] {
        let out = fteasd(&args);
        assert!(!out.status.success(), "{args:?} succeeded");
        assert!(!out.stderr.is_empty(), "{args:?} printed nothing");
    }

    let out = fteasd(&[
        "evaluate",
        "--checkpoint",
        p(&root.path().join("none.ftea")),
        "--manifest",
        "m.csv",
        "--out",
        "r",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("none.ftea"));
}

#[test]
fn train_evaluate_and_dump_maps() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    synth(&data);
    let manifest = data.join("manifest.csv");
    let ck = root.path().join("run").join("model.ftea");
    ok(&fteasd(&with_tiny(vec![
        "train",
        "--manifest",
        p(&manifest),
        "--out",
        p(&ck),
    ])));
    assert!(ck.exists());
    let log = std::fs::read_to_string(ck.with_extension("loss.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("epoch,loss,seconds"));
    assert_eq!(log.lines().count(), 2);

    let rep = root.path().join("report");
    let text = ok(&fteasd(&[
        "evaluate",
        "--checkpoint",
        p(&ck),
        "--manifest",
        p(&manifest),
        "--out",
        p(&rep),
    ]));
    assert!(text.contains("integrated score"));
    for f in ["scores.csv", "machines.csv", "report.txt"] {
        assert!(rep.join(f).exists(), "{f}");
    }
    assert_eq!(std::fs::read_to_string(rep.join("report.txt")).unwrap(), text);

    let clip = data.join("fan/test/source_normal_speed_low_0000.wav");
    assert!(clip.exists());
    let maps = root.path().join("maps");
    ok(&fteasd(&[
        "dump-maps",
        "--checkpoint",
        p(&ck),
        "--clip",
        p(&clip),
        "--stage",
        "2",
        "--out",
        p(&maps),
    ]));
    for n in ["x", "y", "w_c", "w_f", "w_t"] {
        assert!(maps.join(format!("{n}.bin")).exists() && maps.join(format!("{n}.hdr")).exists());
    }
    let out = fteasd(&[
        "dump-maps",
        "--checkpoint",
        p(&ck),
        "--clip",
        p(&clip),
        "--stage",
        "99",
        "--out",
        p(&maps),
    ]);
    assert!(!out.status.success());
}

#[test]
fn ablation_flags_select_variants() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    synth(&data);
    let manifest = data.join("manifest.csv");
    let run = |extra: &[&str], name: &str| {
        let ck = root.path().join(name);
        let mut args = with_tiny(vec!["train", "--manifest", p(&manifest), "--out", p(&ck)]);
        args.extend(extra);
        ok(&fteasd(&args));
        String::from_utf8_lossy(&std::fs::read(&ck).unwrap()).into_owned()
    };
    // parameter names are stored in the checkpoint
    let no_ftc = run(&["--ablate", "no-ftc"], "a.ftea");
    assert!(!no_ftc.contains("ftc.freq") && no_ftc.contains("excitation.se0.wf"));
    let vanilla = run(&["--masks", "c"], "b.ftea");
    assert!(
        vanilla.contains("ftc.freq") && vanilla.contains("excitation.se0.wc") && !vanilla.contains("excitation.se0.wf")
    );
    let plain = run(&["--ablate", "none"], "c.ftea");
    assert!(!plain.contains("ftc.freq") && !plain.contains("excitation.se0") && plain.contains("excitation.stem"));
}

#[test]
fn ablate_writes_eight_rows_reproducibly() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    synth(&data);
    let manifest = data.join("manifest.csv");
    let mut tables = Vec::new();
    for name in ["t1.csv", "t2.csv"] {
        let out = root.path().join(name);
        let stdout = ok(&fteasd(&with_tiny(vec![
            "ablate",
            "--manifest",
            p(&manifest),
            "--out",
            p(&out),
        ])));
        let table = std::fs::read_to_string(&out).unwrap();
        assert_eq!(stdout, table);
        tables.push(table);
    }
    assert_eq!(tables[0], tables[1]);
    let lines: Vec<&str> = tables[0].lines().collect();
    assert_eq!(lines[0], "table,system,mean_auc,pauc,integrated_score");
    assert_eq!(lines.len(), 9);
    for row in &lines[1..] {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols.len(), 5, "{row}");
        assert!(cols[2..].iter().all(|v| v.parse::<f64>().is_ok()), "{row}");
    }
    // the full model heads both tables and is trained once
    assert_eq!(
        lines[1].split(',').skip(2).collect::<Vec<_>>(),
        lines[5].split(',').skip(2).collect::<Vec<_>>()
    );
}
