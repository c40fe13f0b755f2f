use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mcfqkd::config::RunConfig;
use mcfqkd::tagfile::{Marker, Record, TagFile};
use mcfqkd_core::link::window_capture;
use mcfqkd_core::sim::FLAG_DARK;

fn mcfqkd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcfqkd")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = mcfqkd(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = mcfqkd(args);
    assert!(!out.status.success(), "{args:?} should fail");
    String::from_utf8(out.stderr).unwrap()
}

fn write_config(dir: &Path, edit: impl FnOnce(&mut RunConfig)) -> String {
    let mut cfg = RunConfig::reference().unwrap();
    cfg.simulate.acquisition_s = 0.2;
    edit(&mut cfg);
    let p = dir.join("config.json");
    fs::write(&p, cfg.to_json()).unwrap();
    p.to_string_lossy().into_owned()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn listing(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn simulate_is_deterministic_and_writes_one_file_per_party() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), |_| {});
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["--config", &cfg, "--seed", "42", "--out", &s(&a), "simulate"]);
    ok(&["--config", &cfg, "--seed", "42", "--out", &s(&b), "simulate"]);
    let files = listing(&a);
    let names: Vec<&str> = files.iter().map(|f| f.0.as_str()).collect();
    assert_eq!(
        names,
        [
            "ground_truth.json",
            "pair0_alice.mcqt",
            "pair0_bob.mcqt",
            "pair1_alice.mcqt",
            "pair1_bob.mcqt",
            "pair2_alice.mcqt",
            "pair2_bob.mcqt"
        ]
    );
    assert_eq!(files, listing(&b));
    let c = tmp.path().join("c");
    ok(&["--config", &cfg, "--seed", "43", "--out", &s(&c), "simulate"]);
    assert_ne!(listing(&c)[1], files[1]);
}

#[test]
fn empty_pair_set_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), |c| c.simulate.pairs.clear());
    let err = fails(&["--config", &cfg, "--out", &s(&tmp.path().join("o")), "simulate"]);
    assert!(err.contains("empty pair set"), "{err}");
}

#[test]
fn schema_errors_name_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&RunConfig::reference().unwrap().to_json()).unwrap();
    v["simulate"]["pairz"] = serde_json::json!([0]);
    let p = tmp.path().join("bad.json");
    fs::write(&p, v.to_string()).unwrap();
    let err = fails(&["--config", &s(&p), "simulate"]);
    assert!(err.contains("simulate.pairz") && err.contains("unknown field"), "{err}");
    let err = fails(&["--config", &s(&tmp.path().join("missing.json")), "simulate"]);
    assert!(err.contains("missing.json"), "{err}");
}

#[test]
fn analyze_recovers_ground_truth() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write_config(tmp.path(), |c| c.simulate.acquisition_s = 0.5);
    let (sim, ana) = (tmp.path().join("sim"), tmp.path().join("ana"));
    ok(&["--config", &cfg_path, "--out", &s(&sim), "simulate"]);
    ok(&["--config", &cfg_path, "--out", &s(&ana), "analyze", &s(&sim)]);

    let truth: serde_json::Value = serde_json::from_slice(&fs::read(sim.join("ground_truth.json")).unwrap()).unwrap();
    let report: serde_json::Value = serde_json::from_slice(&fs::read(ana.join("report.json")).unwrap()).unwrap();
    let cfg = RunConfig::reference().unwrap();
    let link = cfg.experiment.inner.link;
    let capture = window_capture(link.jitter_sigma_ps, link.jitter_sigma_ps, &cfg.experiment.analysis.window);
    for id in 0..3u64 {
        let t = &truth["truth"]["pairs"][id as usize];
        let tallies: Vec<&serde_json::Value> = report["tallies"]
            .as_array()
            .unwrap()
            .iter()
            .filter(|x| x["pair_id"] == id)
            .collect();
        assert_eq!(tallies.len(), 2);
        let matched: u64 = tallies
            .iter()
            .map(|x| ["pp", "pm", "mp", "mm"].iter().map(|k| x["tally"]["counts"][k].as_u64().unwrap()).sum::<u64>())
            .sum();
        let acc: u64 = tallies.iter().map(|x| x["tally"]["accidentals"].as_u64().unwrap()).sum();
        let expected = t["true_coincidences"].as_u64().unwrap() as f64 * capture + acc as f64;
        let tol = 5.0 * expected.sqrt();
        assert!((matched as f64 - expected).abs() < tol, "pair {id}: matched {matched}, expected {expected:.0}");

        // dark-count flags survive the file format exactly; the remaining
        // tags are own photons plus crosstalk from neighboring cores
        let mut photons = 0;
        for (party, key) in [("alice", "alice_dark"), ("bob", "bob_dark")] {
            let f = TagFile::read(&sim.join(format!("pair{id}_{party}.mcqt"))).unwrap();
            let dark = f.tags().iter().filter(|x| x.flags & FLAG_DARK != 0).count() as u64;
            assert_eq!(dark, t[key].as_u64().unwrap());
            photons += f.tags().len() as u64 - dark;
        }
        let own = t["alice_photons"].as_u64().unwrap() + t["bob_photons"].as_u64().unwrap();
        assert_eq!(photons, own + t["crosstalk_in"].as_u64().unwrap());
    }
    let rows = csv_rows(&ana.join("report.csv"));
    assert_eq!(rows[0].join(","), "pair_id,ring,visibility_hv,visibility_da,qber_hv,qber_da,coin_rate_hv,coin_rate_da,skr_bits_s");
    assert_eq!(rows.len(), 4);
    for r in &rows[1..] {
        let q: f64 = r[4].parse().unwrap();
        assert!((0.015..0.04).contains(&q), "{r:?}");
    }
    assert_eq!(csv_rows(&ana.join("tally.csv")).len(), 7);
}

#[test]
fn empty_files_give_a_zero_report() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("in");
    fs::create_dir(&dir).unwrap();
    // inner pair 0 sits on cores 1 and 4
    for (name, core) in [("a.mcqt", 1), ("b.mcqt", 4)] {
        TagFile { core_id: core, records: vec![] }.write(&dir.join(name)).unwrap();
    }
    let out = tmp.path().join("out");
    ok(&["--out", &s(&out), "analyze", &s(&dir)]);
    let rows = csv_rows(&out.join("report.csv"));
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1].join(","), "0,inner,,,,,0.0,0.0,0.0");
    assert_eq!(csv_rows(&out.join("tally.csv")).len(), 1);
}

#[test]
fn corrupt_files_report_the_offset() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("bad.mcqt");
    let mut bytes = TagFile { core_id: 1, records: vec![] }.encode();
    bytes[4] = 9;
    fs::write(&p, &bytes).unwrap();
    let err = fails(&["--out", &s(&tmp.path().join("o")), "analyze", &s(&p)]);
    assert!(err.contains("at byte 4") && err.contains("version 9"), "{err}");
    bytes[4] = 1;
    bytes[0] = b'Z';
    fs::write(&p, &bytes).unwrap();
    let err = fails(&["--out", &s(&tmp.path().join("o")), "analyze", &s(&p)]);
    assert!(err.contains("at byte 0") && err.contains("bad magic"), "{err}");
}

#[test]
fn mismatched_recording_ends_warn_and_use_the_overlap() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), |c| c.simulate.pairs = vec![0]);
    let sim = tmp.path().join("sim");
    ok(&["--config", &cfg, "--out", &s(&sim), "simulate"]);
    let bob_path = sim.join("pair0_bob.mcqt");
    let mut bob = TagFile::read(&bob_path).unwrap();
    let end = bob.end_ps().unwrap();
    let cut = end - 100_000_000_000;
    bob.records.retain(|r| match r {
        Record::Tag(t) => t.time < cut,
        Record::Marker { .. } => true,
    });
    for r in &mut bob.records {
        if let Record::Marker { time, marker: Marker::End } = r {
            *time = cut;
        }
    }
    bob.write(&bob_path).unwrap();
    let out = tmp.path().join("out");
    ok(&["--config", &cfg, "--out", &s(&out), "analyze", &s(&sim.join("pair0_alice.mcqt")), &s(&bob_path)]);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    let w = report["warnings"][0].as_str().unwrap();
    assert!(w.contains("overlap"), "{w}");
    let da = report["tallies"].as_array().unwrap().iter().find(|t| t["tally"]["basis_a"] == "DA").unwrap();
    assert!((da["tally"]["duration_s"].as_f64().unwrap() - 0.1).abs() < 1e-9);

    // a file whose acquisitions start elsewhere is rejected
    let mut shifted = TagFile::read(&bob_path).unwrap();
    for r in &mut shifted.records {
        if let Record::Marker { time, marker: Marker::Start(_) } = r {
            *time += 1;
        }
    }
    shifted.write(&bob_path).unwrap();
    let err = fails(&["--config", &cfg, "--out", &s(&out), "analyze", &s(&sim)]);
    assert!(err.contains("do not line up"), "{err}");
}

#[test]
fn analyze_needs_both_parties() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("a.mcqt");
    TagFile { core_id: 1, records: vec![] }.write(&p).unwrap();
    let err = fails(&["--out", &s(&tmp.path().join("o")), "analyze", &s(&p)]);
    assert!(err.contains("Bob"), "{err}");
    TagFile { core_id: 0, records: vec![] }.write(&p).unwrap();
    let err = fails(&["--out", &s(&tmp.path().join("o")), "analyze", &s(&p)]);
    assert!(err.contains("core 0 carries no pair"), "{err}");
}

#[test]
fn linkbudget_writes_both_curves_and_validates_the_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("lb");
    let text = ok(&["--out", &s(&out), "linkbudget", "--lmax-km", "250", "--step-km", "5"]);
    assert!(text.contains("max length"), "{text}");
    for ring in ["inner", "outer"] {
        let rows = csv_rows(&out.join(format!("linkbudget_{ring}.csv")));
        assert_eq!(rows[0].join(","), "length_km,coin_rate,qber,skr_pair_bits_s,skr_ring_bits_s");
        assert_eq!(rows.len(), 52);
        assert_eq!(rows[1][0], "0.0");
    }
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(out.join("linkbudget.json")).unwrap()).unwrap();
    for r in summary.as_array().unwrap() {
        let l = r["max_length_km"].as_f64().unwrap();
        assert!((150.0..220.0).contains(&l), "{l}");
        assert_eq!(r["reference"]["length_km"].as_f64().unwrap(), 0.411);
    }
    let err = fails(&["--out", &s(&out), "linkbudget", "--step-km=0"]);
    assert!(err.contains("step_km"), "{err}");
    let err = fails(&["--out", &s(&out), "linkbudget", "--step-km=-1"]);
    assert!(err.contains("step_km"), "{err}");
    let err = fails(&["--out", &s(&out), "linkbudget", "--lmax-km", "0.1"]);
    assert!(err.contains("lmax_km"), "{err}");
}

#[test]
fn reproduce_is_byte_identical_and_shaped_like_the_figures() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), |c| c.stability.acquisition_s = 0.02);
    let run = |name: &str, fig: &str| -> PathBuf {
        let out = tmp.path().join(name);
        ok(&["--config", &cfg, "--out", &s(&out), "reproduce", fig]);
        out
    };
    let (a, b) = (run("a2", "fig2"), run("b2", "fig2"));
    assert_eq!(listing(&a), listing(&b));
    let rows = csv_rows(&a.join("fig2.csv"));
    assert_eq!(rows[0].join(","), "length_km,skr_inner_bits_s,skr_outer_bits_s");
    assert_eq!(rows.len(), 252);
    let markers = csv_rows(&a.join("fig2_markers.csv"));
    assert_eq!(markers.len(), 3);
    assert_eq!(markers[1][0], "inner");
    assert_eq!(markers[2][3], "34500.0");
    let svg = fs::read_to_string(a.join("fig2.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 2);
    assert_eq!(svg.matches("<circle").count(), 2);

    let (a, b) = (run("a3", "fig3"), run("b3", "fig3"));
    assert_eq!(listing(&a), listing(&b));
    let rows = csv_rows(&a.join("fig3.csv"));
    assert_eq!(rows.len(), 49);
    assert_eq!(rows[0].join(","), "time_h,qber_hv,qber_da,qber_mean,coin_rate_hv,coin_rate_da,skr_bits_s");
    assert_eq!(rows[48][0], "23.5");
    assert!(a.join("fig3_qber.svg").exists() && a.join("fig3_keyrate.svg").exists());

    let err = fails(&["--out", &s(&a), "reproduce", "fig4"]);
    assert!(err.contains("fig4"), "{err}");
}

#[test]
fn stability_flags_reshape_the_schedule() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), |c| c.stability.acquisition_s = 0.05);
    let out = tmp.path().join("st");
    let text = ok(&["--config", &cfg, "--out", &s(&out), "stability", "--hours", "2", "--switch-min", "20"]);
    assert!(text.starts_with("6 points"), "{text}");
    assert_eq!(csv_rows(&out.join("stability.csv")).len(), 7);
    let err = fails(&["--config", &cfg, "--out", &s(&out), "stability", "--switch-min", "0"]);
    assert!(err.contains("error"), "{err}");
}

#[test]
fn config_verb_matches_the_shipped_reference() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("c");
    ok(&["--out", &s(&out), "config"]);
    let written = fs::read_to_string(out.join("config.json")).unwrap();
    assert_eq!(written, include_str!("../configs/reference.json"));
    let again = tmp.path().join("d");
    ok(&["--config", &s(&out.join("config.json")), "--out", &s(&again), "config"]);
    assert_eq!(fs::read_to_string(again.join("config.json")).unwrap(), written);
}
