#![allow(dead_code)]

use std::path::Path;

use sigverify::config::RunConfig;
use sigverify::mgrnet::NetConfig;

/// Compact network on a small corpus: quick enough for end-to-end tests.
pub fn small_config(root: &Path) -> RunConfig {
    let mut cfg = RunConfig {
        seed: 3,
        epochs: 2,
        batches_per_epoch: 2,
        split: [0.5, 0.25, 0.25],
        data_dir: root.join("data"),
        out_dir: root.join("run"),
        net: NetConfig::compact(),
        ..RunConfig::default()
    };
    cfg.synth.identities = 8;
    cfg.synth.genuine_per_identity = 6;
    cfg.synth.forged_per_identity = 5;
    cfg.loss.w = 4;
    cfg
}

/// EER (interpolated where FRR - FAR changes sign) and AUC (Mann-Whitney) by
/// sweeping every distinct distance as an acceptance threshold.
pub fn brute_force_metrics(scores: &[(f64, bool)]) -> (f64, f64) {
    let np = scores.iter().filter(|s| s.1).count() as f64;
    let nn = scores.len() as f64 - np;
    let mut ts: Vec<f64> = scores.iter().map(|s| s.0).collect();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    let mut pts = vec![(100.0, 0.0)];
    for t in ts {
        let fr = scores.iter().filter(|s| s.1 && s.0 > t).count() as f64 / np * 100.0;
        let fa = scores.iter().filter(|s| !s.1 && s.0 <= t).count() as f64 / nn * 100.0;
        pts.push((fr, fa));
    }
    let mut eer = f64::NAN;
    for w in pts.windows(2) {
        let (d0, d1) = (w[0].0 - w[0].1, w[1].0 - w[1].1);
        if d0 > 0.0 && d1 <= 0.0 {
            eer = if d1 == 0.0 { w[1].0 } else { w[0].0 + d0 / (d0 - d1) * (w[1].0 - w[0].0) };
            break;
        }
    }
    let mut u = 0.0;
    for p in scores.iter().filter(|s| s.1) {
        for n in scores.iter().filter(|s| !s.1) {
            u += if p.0 < n.0 {
                1.0
            } else if p.0 == n.0 {
                0.5
            } else {
                0.0
            };
        }
    }
    (eer, 100.0 * u / (np * nn))
}

/// `(distance, positive)` rows of an exported `distances.csv`.
pub fn read_distances(path: &Path) -> Vec<(f64, bool)> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    assert_eq!(rdr.headers().unwrap(), vec!["reference", "questioned", "positive", "distance"]);
    rdr.records()
        .map(|r| {
            let r = r.unwrap();
            (r[3].parse().unwrap(), &r[2] == "1")
        })
        .collect()
}

/// `metric -> value` from a `metric,value` CSV.
pub fn read_metrics(path: &Path) -> Vec<(String, String)> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    assert_eq!(rdr.headers().unwrap(), vec!["metric", "value"]);
    rdr.records().map(|r| { let r = r.unwrap(); (r[0].to_string(), r[1].to_string()) }).collect()
}

pub fn metric(rows: &[(String, String)], name: &str) -> f64 {
    rows.iter().find(|(k, _)| k == name).unwrap_or_else(|| panic!("no `{name}` row")).1.parse().unwrap()
}
