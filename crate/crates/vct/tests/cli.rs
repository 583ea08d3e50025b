use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vct::config::CohortConfig;
use vct::ctv;
use vct::manifest::{LoadedManifest, Manifest};
use vct::pipeline;
use vct_core::volume::{structure, LabelMap};

fn vct(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vct")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(out: &Path, n: usize, seed: u64) -> Output {
    vct(&["phantom", "gen", "--n", &n.to_string(), "--seed", &seed.to_string(), "--spacing", "8", "--out", s(out)])
}

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    v.sort();
    v
}

#[test]
fn gen_writes_three_pairs_and_a_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(gen(&a, 1, 9).status.success());
    assert!(gen(&b, 1, 9).status.success());
    let names = files(&a);
    assert_eq!(names.len(), 7, "{names:?}");
    assert_eq!(names.iter().filter(|n| n.ends_with(ctv::HEADER_SUFFIX)).count(), 3);
    assert!(names.contains(&"manifest.json".to_string()));
    assert_eq!(fs::read(a.join("manifest.json")).unwrap(), fs::read(b.join("manifest.json")).unwrap());
}

#[test]
fn zero_subjects_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(gen(tmp.path(), 0, 1).status.code(), Some(2));
}

#[test]
fn malformed_config_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    for body in ["{ not json", r#"{"cohort": {"n": 3, "colour": "red"}}"#] {
        fs::write(&cfg, body).unwrap();
        let out = vct(&["phantom", "gen", "--seed", "1", "--config", s(&cfg), "--out", s(&tmp.path().join("o"))]);
        assert_eq!(out.status.code(), Some(2), "{body}");
    }
}

#[test]
fn empty_manifest_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let m = tmp.path().join("manifest.json");
    Manifest {
        subjects: vec![],
        seed: 0,
        spacing_mm: [8.0; 3],
    }
    .save(&m)
    .unwrap();
    let out = vct(&["measure", "--manifest", s(&m), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_volume_names_the_subject() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("c");
    assert!(gen(&dir, 2, 4).status.success());
    fs::remove_file(dir.join("P0001.tissue.ctv.json")).unwrap();
    let out = vct(&["measure", "--manifest", s(&dir.join("manifest.json")), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("P0001"), "{err}");
    assert!(tmp.path().join("o/P0000.json").exists());
}

#[test]
fn measured_fat_matches_phantom_truth() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("c");
    assert!(gen(&dir, 3, 12).status.success());
    let out_dir = tmp.path().join("m");
    assert!(vct(&["measure", "--manifest", s(&dir.join("manifest.json")), "--out", s(&out_dir)]).status.success());
    let m = LoadedManifest::load(&dir.join("manifest.json")).unwrap();
    let mut rdr = csv::Reader::from_path(out_dir.join("cohort.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let col = headers.iter().position(|h| h == "fat_pct").unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 3);
    for (row, subject) in rows.iter().zip(&m.manifest.subjects) {
        assert_eq!(&row[0], subject.id);
        let fat: f64 = row[col].parse().unwrap();
        let truth = subject.truth.as_ref().unwrap().fat_pct;
        assert!((fat - truth).abs() <= 0.5, "{fat} vs {truth}");
    }
}

#[test]
fn written_phantom_round_trips_bit_for_bit() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(gen(tmp.path(), 1, 21).status.success());
    let cfg = CohortConfig {
        spacing_mm: [8.0; 3],
        ..CohortConfig::default()
    };
    let p = pipeline::cohort_phantom(&cfg, 21, 0).unwrap().phantom;
    let image = ctv::load_volume(&tmp.path().join("P0000.image.ctv.json")).unwrap();
    let tissue = ctv::load_labelmap(&tmp.path().join("P0000.tissue.ctv.json")).unwrap();
    let structure = ctv::load_labelmap(&tmp.path().join("P0000.structure.ctv.json")).unwrap();
    assert_eq!(image, p.image);
    assert_eq!(tissue, p.tissue);
    assert_eq!(structure, p.structure);
}

/// Copy of `m` whose structure maps are rewritten by `edit`; returns the
/// new manifest and, per subject, (|A|, |B|, |A ∩ B|) for `class`.
fn variant(m: &LoadedManifest, dir: &Path, class: u16, edit: impl Fn(&[u16], usize) -> Vec<u16>) -> (PathBuf, Vec<[usize; 3]>) {
    fs::create_dir_all(dir).unwrap();
    let mut manifest = m.manifest.clone();
    let mut counts = Vec::new();
    for sub in &mut manifest.subjects {
        let labels = ctv::load_labelmap(&m.resolve(&sub.structure)).unwrap();
        let src = labels.data();
        let out = edit(src, labels.grid().dims()[0]);
        let count = |v: &[u16]| v.iter().filter(|&&x| x == class).count();
        let inter = src.iter().zip(&out).filter(|(a, b)| **a == class && **b == class).count();
        counts.push([count(src), count(&out), inter]);
        let map = LabelMap::new(labels.grid().clone(), labels.kind(), out, labels.class_table().clone()).unwrap();
        let header = dir.join(format!("{}.structure.ctv.json", sub.id));
        ctv::save_labelmap(&map, &header).unwrap();
        sub.image = s(&m.resolve(&sub.image)).into();
        sub.tissue = s(&m.resolve(&sub.tissue)).into();
        sub.structure = s(&header).into();
    }
    let path = dir.join("manifest.json");
    manifest.save(&path).unwrap();
    (path, counts)
}

fn paired(a: &Path, b: &Path, out: &Path) -> serde_json::Value {
    let o = vct(&["consistency", "--a", s(a), "--b", s(b), "--mode", "paired", "--out", s(out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&fs::read(out.join("consistency.json")).unwrap()).unwrap()
}

fn dice_of(table: &serde_json::Value, class: u16) -> f64 {
    table["per_class"][class.to_string()]["dice_mean"].as_f64().unwrap()
}

#[test]
fn consistency_self_dilated_and_disjoint() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("c");
    assert!(gen(&dir, 3, 8).status.success());
    let ma = dir.join("manifest.json");
    let m = LoadedManifest::load(&ma).unwrap();
    let (liver, spleen) = (structure::LIVER, structure::SPLEEN);

    let same = paired(&ma, &ma, &tmp.path().join("self"));
    let classes = same["per_class"].as_object().unwrap();
    assert!(classes.len() >= 10, "{classes:?}");
    for (id, c) in classes {
        assert_eq!(c["dice_mean"].as_f64(), Some(1.0), "class {id}");
    }

    // Grow the liver one voxel towards +x into background.
    let grow = |src: &[u16], nx: usize| {
        let mut out = src.to_vec();
        for i in 0..src.len() {
            if src[i] == liver && (i % nx) + 1 < nx && src[i + 1] == 0 {
                out[i + 1] = liver;
            }
        }
        out
    };
    let (mb, counts) = variant(&m, &tmp.path().join("grown"), liver, grow);
    let expected = counts.iter().map(|[a, b, i]| 2.0 * *i as f64 / (a + b) as f64).sum::<f64>() / counts.len() as f64;
    let got = dice_of(&paired(&ma, &mb, &tmp.path().join("grown_out")), liver);
    assert!(got > 0.0 && got < 1.0);
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");

    // Swap liver and spleen labels: same-class masks no longer overlap.
    let swap = |src: &[u16], _: usize| {
        src.iter()
            .map(|&v| match v {
                v if v == liver => spleen,
                v if v == spleen => liver,
                v => v,
            })
            .collect()
    };
    let (mc, _) = variant(&m, &tmp.path().join("swapped"), liver, swap);
    let table = paired(&ma, &mc, &tmp.path().join("swapped_out"));
    assert_eq!(dice_of(&table, liver), 0.0);
    assert_eq!(dice_of(&table, spleen), 0.0);
}
