use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::thread;

use dta_core::datasets::fixtures::{self, FixtureSize};
use dta_core::datasets::Dataset;
use dta_core::training::read_metrics;

fn dta(args: &[&str], data: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dta"))
        .args(args)
        .env("DATA_ROOT", data)
        .env("OUTPUT_ROOT", out)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn config(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(format!("{name}.toml"))
        .display()
        .to_string()
}

fn synthetic_root(train: usize, test: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fixtures::write_synthetic_root(dir.path(), FixtureSize { train, test }, 4).unwrap();
    dir
}

/// Serves files under `root` over HTTP/1.1 until the test process exits.
fn serve(root: PathBuf) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request = String::new();
            if reader.read_line(&mut request).is_err() {
                continue;
            }
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).map_or(true, |n| n == 0) || line == "\r\n" {
                    break;
                }
            }
            let path = request.split_whitespace().nth(1).unwrap_or("/").trim_start_matches('/');
            match std::fs::read(root.join(path)) {
                Ok(body) => {
                    let _ = write!(
                        stream,
                        "HTTP/1.1 200 OK\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                        body.len()
                    );
                    let _ = stream.write_all(&body);
                }
                Err(_) => {
                    let _ = stream.write_all(b"HTTP/1.1 404 Not Found\r\nContent-Length: 0\r\nConnection: close\r\n\r\n");
                }
            }
        }
    });
    format!("http://{addr}")
}

fn md5_hex(path: &Path) -> String {
    use md5::{Digest, Md5};
    format!("{:x}", Md5::digest(std::fs::read(path).unwrap()))
}

#[test]
fn fetch_caches_and_rejects_corrupt_downloads() {
    let upstream = synthetic_root(20, 10);
    let mirror = serve(upstream.path().to_path_buf());
    let sums = tempfile::NamedTempFile::new().unwrap();
    let mut table = String::new();
    for f in Dataset::Mnist.files().iter().chain(Dataset::Usps.files()) {
        let ds = if f.starts_with("usps") { "usps" } else { "mnist" };
        let hash = md5_hex(&upstream.path().join(ds).join(f));
        table.push_str(&format!("\"{ds}/{f}\" = \"{hash}\"\n"));
    }
    std::fs::write(sums.path(), &table).unwrap();
    let cache = tempfile::tempdir().unwrap();
    let sums_arg = sums.path().display().to_string();
    let args = ["fetch", "mnist", "usps", "--mirror", &mirror, "--checksums", &sums_arg];

    let first = dta(&args, cache.path(), cache.path());
    assert!(first.status.success(), "{}", stderr(&first));
    assert_eq!(stdout(&first).matches("downloaded").count(), 6);
    for ds in [Dataset::Mnist, Dataset::Usps] {
        for f in ds.files() {
            assert!(cache.path().join(ds.as_str()).join(f).exists(), "{ds}/{f}");
        }
    }
    let second = dta(&args, cache.path(), cache.path());
    assert!(second.status.success());
    assert_eq!(stdout(&second).matches("cached").count(), 6);
    assert_eq!(stdout(&second).matches("downloaded").count(), 0);

    // wrong expected checksum: nonzero exit, nothing left behind
    let bad = table.replacen(
        &md5_hex(&upstream.path().join("usps/usps.bz2")),
        "00000000000000000000000000000000",
        1,
    );
    std::fs::write(sums.path(), bad).unwrap();
    let fresh = tempfile::tempdir().unwrap();
    let o = dta(&["fetch", "usps", "--mirror", &mirror, "--checksums", &sums_arg], fresh.path(), fresh.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("checksum mismatch"), "{}", stderr(&o));
    let left: Vec<_> = std::fs::read_dir(fresh.path().join("usps")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert!(left.is_empty(), "left behind: {left:?}");
}

#[test]
fn train_one_epoch_then_eval_and_report() {
    let data = synthetic_root(8, 8);
    let out = tempfile::tempdir().unwrap();
    let cfg = config("svhn2mnist");
    let o = dta(&["train", "--config", &cfg, "--set", "epochs=1", "batch_size=4"], data.path(), out.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("root seed: 0"), "{text}");
    assert!(text.contains("final target accuracy:"), "{text}");
    let run = out.path().join("svhn2mnist");
    let rows = read_metrics(&run.join("metrics.csv")).unwrap();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].total.is_finite());
    assert!(run.join("checkpoints/final.ckpt").exists());
    assert!(run.join("experiment.toml").exists());

    let ckpt = run.join("checkpoints/final.ckpt").display().to_string();
    let e = dta(&["eval", "--checkpoint", &ckpt, "--pair", "svhn2mnist"], data.path(), out.path());
    assert!(e.status.success(), "{}", stderr(&e));
    let reported: f64 = stdout(&e)
        .split_whitespace()
        .nth(2)
        .and_then(|s| s.parse().ok())
        .unwrap();
    assert!((reported - rows[0].target_accuracy).abs() < 1e-4);

    // source-only run of another pair on the tiny architecture
    let so = dta(
        &[
            "train",
            "--config",
            &config("mnist2usps"),
            "--set",
            "epochs=2",
            "batch_size=4",
            "arch=tiny-test-c4-h16",
            "config_name=src",
            "lambda1=0",
            "lambda2=0",
            "lambda3=0",
        ],
        data.path(),
        out.path(),
    );
    assert!(so.status.success(), "{}", stderr(&so));
    let src_rows = read_metrics(&out.path().join("src/metrics.csv")).unwrap();
    assert_eq!(src_rows.len(), 2);
    for r in &src_rows {
        assert_eq!((r.fdta, r.cdta, r.entropy, r.vat), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(r.total, r.task);
    }

    let report_dir = out.path().join("report");
    let a = run.join("metrics.csv").display().to_string();
    let b = out.path().join("src/metrics.csv").display().to_string();
    let r = dta(&["report", &a, &b, "--out", &report_dir.display().to_string()], data.path(), out.path());
    assert!(r.status.success(), "{}", stderr(&r));
    let mut summary = csv::Reader::from_path(report_dir.join("summary.csv")).unwrap();
    let recs: Vec<csv::StringRecord> = summary.records().map(|r| r.unwrap()).collect();
    assert_eq!(recs.len(), 2);
    let max_src = src_rows.iter().map(|r| r.target_accuracy).fold(f64::MIN, f64::max);
    assert_eq!(&recs[1][0], "src");
    assert_eq!(&recs[1][2], "source-only");
    assert_eq!(recs[1][4].parse::<f64>().unwrap(), max_src);
    assert_eq!(recs[1][5].parse::<f64>().unwrap(), src_rows[1].target_accuracy);
    assert_eq!(&recs[0][2], "dta");
    for f in ["summary.md", "accuracy.svg", "svhn2mnist-accuracy.svg", "svhn2mnist-loss.svg", "src-loss.svg"] {
        assert!(report_dir.join(f).exists(), "{f}");
    }
}

#[test]
fn train_rejects_unknown_keys_by_name() {
    let data = synthetic_root(4, 4);
    let out = tempfile::tempdir().unwrap();
    let o = dta(&["train", "--config", &config("usps2mnist"), "--set", "lambda4=1"], data.path(), out.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("lambda4"), "{}", stderr(&o));
}

#[test]
fn train_reports_missing_data() {
    let empty = tempfile::tempdir().unwrap();
    let o = dta(&["train", "--config", &config("usps2mnist-30ep")], empty.path(), empty.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("usps"), "{}", stderr(&o));
}

#[test]
fn oracle_passes_at_default_scale() {
    let dir = tempfile::tempdir().unwrap();
    let o = dta(&["oracle"], dir.path(), dir.path());
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("PASS  element solver optimal on the linear proxy (units ≤ 12): 100/100"), "{text}");
    assert!(text.contains("PASS  channel solver optimal on the linear proxy (units ≤ 8): 100/100"), "{text}");
    assert!(!text.contains("FAIL"));

    let z = dta(&["oracle", "--budget", "0", "--trials", "20"], dir.path(), dir.path());
    assert!(stdout(&z).contains("PASS  element zero budget returns the stochastic mask: 20/20"));
    assert!(stdout(&z).contains("PASS  channel zero budget returns the stochastic mask: 20/20"));
}

#[test]
fn report_rejects_malformed_csv() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("metrics.csv");
    std::fs::write(&bad, "epoch,task\n0,notanumber\n").unwrap();
    let o = dta(
        &["report", &bad.display().to_string(), "--out", &dir.path().join("r").display().to_string()],
        dir.path(),
        dir.path(),
    );
    assert!(!o.status.success());
}
