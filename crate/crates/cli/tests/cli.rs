use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gfss::eval::EvalReport;
use gfss_cli::export::read_mask;

fn quickstart() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/quickstart.toml")
}

fn gfss(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gfss"))
        .args(args)
        .env(gfss_cli::OUTPUT_ROOT_ENV, root)
        .current_dir(root.parent().unwrap())
        .output()
        .unwrap()
}

/// A copy of the quickstart config with a smaller training budget.
fn tiny_config(dir: &Path, edit: impl Fn(String) -> String) -> PathBuf {
    let text = std::fs::read_to_string(quickstart())
        .unwrap()
        .replace("epochs = 15", "epochs = 2")
        .replace("epochs = 40", "epochs = 4")
        .replace("eval_every = 10", "eval_every = 2");
    let path = dir.join("tiny.toml");
    std::fs::write(&path, edit(text)).unwrap();
    path
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn unknown_method_exits_2_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), |t| t.replace("\"triplet_all\"", "\"meta_learning\""));
    let out = gfss(&["run", cfg.to_str().unwrap()], &dir.path().join("out"));
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("tiny.toml:3:"), "{}", stderr(&out));
}

#[test]
fn report_on_empty_dir_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = gfss(&["report", dir.path().to_str().unwrap()], &dir.path().join("out"));
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn missing_dataset_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), |t| {
        let start = t.find("[dataset]").unwrap();
        let end = t.find("[network]").unwrap();
        format!(
            "{}[dataset]\nkind = \"path\"\npath = \"does/not/exist\"\n\n{}",
            &t[..start],
            &t[end..]
        )
    });
    let out = gfss(&["run", cfg.to_str().unwrap()], &dir.path().join("out"));
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
}

#[test]
fn run_report_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("out");
    let cfg = tiny_config(dir.path(), |t| t);
    let out = gfss(&["run", cfg.to_str().unwrap()], &root);
    assert!(out.status.success(), "{}", stderr(&out));

    let method = root.join("triplet_all");
    let summary = std::fs::read_to_string(method.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 2 + 2);
    for name in [
        "report.json",
        "stage1.jsonl",
        "stage2.jsonl",
        "episode.json",
        "model.safetensors",
        "confidence.csv",
    ] {
        assert!(method.join("0/5/0").join(name).is_file(), "{name}");
    }

    let out = gfss(&["report", root.to_str().unwrap()], &root);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = std::fs::read_to_string(root.join("report.csv")).unwrap();
    for shots in [1, 5] {
        let text = std::fs::read_to_string(method.join(format!("0/{shots}/0/report.json"))).unwrap();
        let r: EvalReport = serde_json::from_str(&text).unwrap();
        let row = csv
            .lines()
            .find(|l| l.starts_with(&format!("computed,triplet_all,{shots},")))
            .unwrap();
        let cells: Vec<&str> = row.split(',').collect();
        // a single run: the table repeats the JSON values verbatim
        assert_eq!(cells[4].parse::<f64>().unwrap(), r.base_miou.unwrap());
        assert_eq!(cells[5].parse::<f64>().unwrap(), r.novel_miou.unwrap());
        assert_eq!(cells[6].parse::<f64>().unwrap(), r.total_miou);
    }
    assert_eq!(csv.lines().filter(|l| l.starts_with("from paper,GFS-Seg")).count(), 6);
    let md = std::fs::read_to_string(root.join("report.md")).unwrap();
    assert_eq!(md.matches("\n## triplet_all\n").count(), 1);
    assert!(md.contains("from paper"));

    let ckpt = method.join("0/5/0/model.safetensors");
    let masks = [dir.path().join("m1"), dir.path().join("m2")];
    for m in &masks {
        let out = gfss(
            &[
                "export-masks",
                ckpt.to_str().unwrap(),
                m.to_str().unwrap(),
                "--dataset",
                cfg.to_str().unwrap(),
            ],
            &root,
        );
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let mut files: Vec<_> = std::fs::read_dir(&masks[0])
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    assert!(!files.is_empty());
    for f in &files {
        let other = masks[1].join(f.file_name().unwrap());
        assert_eq!(std::fs::read(f).unwrap(), std::fs::read(other).unwrap());
        let mask = read_mask(f).unwrap();
        assert!(mask.iter().all(|&v| v < 8 || v == 255));
    }
}

#[test]
fn sweep_emits_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("out");
    let cfg = tiny_config(dir.path(), |t| t.replace("shots = [1, 5]", "shots = [1]"));
    let out = gfss(
        &[
            "sweep",
            cfg.to_str().unwrap(),
            "--axis",
            "lr",
            "--values",
            "0.1,0.01,1e-5",
        ],
        &root,
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let table = std::fs::read_to_string(root.join("sweep/lr.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "lr,base_1,novel_1,total_1");
    assert_eq!(
        &lines[1..]
            .iter()
            .map(|l| l.split(',').next().unwrap())
            .collect::<Vec<_>>(),
        &["0.1", "0.01", "1e-5"]
    );

    // three novel classes per fold leave room for a shift of -2
    let wide = tiny_config(dir.path(), |t| {
        t.replace("shots = [1, 5]", "shots = [1]")
            .replace("num_classes = 8", "num_classes = 12")
    });
    let out = gfss(
        &[
            "sweep",
            wide.to_str().unwrap(),
            "--axis",
            "ratio-shift",
            "--values=-2,0,2",
        ],
        &root,
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(
        std::fs::read_to_string(root.join("sweep/ratio_shift.csv"))
            .unwrap()
            .lines()
            .count(),
        4
    );

    let out = gfss(
        &[
            "sweep",
            cfg.to_str().unwrap(),
            "--axis",
            "lambda-triplet",
            "--values",
            "0.5",
        ],
        &root,
    );
    assert_eq!(out.status.code(), Some(2));
}
