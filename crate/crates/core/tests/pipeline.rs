//! End-to-end runs through the public API: generate, persist, integrate, annotate.

use flowtraj::integrate::{integrate_many, to_t_space};
use flowtraj::linalg::dist;
use flowtraj::measure::{gen_three_clusters, seeded_rng, three_cluster_specs};
use flowtraj::schedule::{edm_grid, Tabulated};
use flowtraj::stages::{stage_report, Stage, StageParams};
use flowtraj::{integrate, DiscreteMeasure, IntegrateOptions, Method, Schedule, SigmaGrid};
use rand::Rng;
use rand_distr::StandardNormal;

fn starts(seed: u64, n: usize, scale: f64) -> Vec<Vec<f64>> {
    let mut rng = seeded_rng(seed);
    (0..n)
        .map(|_| (0..2).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect()
}

#[test]
fn measure_survives_csv_and_json_files() {
    let m = gen_three_clusters(11);
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("m.csv");
    m.write_csv(std::fs::File::create(&csv_path).unwrap()).unwrap();
    let from_csv = DiscreteMeasure::read_csv(std::fs::File::open(&csv_path).unwrap()).unwrap();
    assert_eq!(from_csv.digest(), m.digest());
    let from_json = DiscreteMeasure::from_json(&m.to_json().unwrap()).unwrap();
    assert_eq!(from_json, m);
}

#[test]
fn trajectory_csv_reloads_to_the_same_states() {
    let m = gen_three_clusters(7);
    let grid = edm_grid(80.0, 0.002, 7.0, 18).unwrap();
    let t = integrate(&m, &starts(1, 1, 80.0)[0], &grid, IntegrateOptions::default()).unwrap();
    let mut buf = Vec::new();
    t.write_csv(&mut buf).unwrap();
    let mut rdr = csv::Reader::from_reader(buf.as_slice());
    let rows: Vec<Vec<f64>> = rdr
        .records()
        .map(|r| r.unwrap().iter().map(|c| c.parse::<f64>().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), t.len() + 1);
    for (row, (s, x)) in rows.iter().zip(t.sigmas().iter().zip(&t.states)) {
        assert_eq!(row[1], *s);
        assert_eq!(&row[3..], x.as_slice());
    }
    let last = rows.last().unwrap();
    assert_eq!(last[0], -1.0);
    assert_eq!(&last[3..], t.terminal_state.as_slice());
}

#[test]
fn tabulated_linear_schedule_matches_rectified() {
    let ts: Vec<f64> = (0..=200).map(|k| k as f64 / 200.0).collect();
    let tab = Tabulated::new(ts.clone(), ts.clone(), ts.iter().map(|t| 1.0 - t).collect()).unwrap();
    let tab = Schedule::Tabulated(tab);
    let m = gen_three_clusters(7);
    let grid = SigmaGrid::geometric(50.0, 0.01, 30).unwrap();
    let t = integrate(&m, &starts(2, 1, 50.0)[0], &grid, IntegrateOptions::default()).unwrap();
    let a = to_t_space(&t, &Schedule::Rectified).unwrap();
    let b = to_t_space(&t, &tab).unwrap();
    for (u, v) in a.iter().zip(&b) {
        assert!((u.t - v.t).abs() < 1e-9, "{} vs {}", u.t, v.t);
        assert!(dist(&u.x, &v.x) < 1e-9 * (1.0 + u.x.iter().map(|c| c.abs()).sum::<f64>()));
    }
}

#[test]
fn stage_reports_progress_monotonically() {
    let m = gen_three_clusters(7);
    let clusters = three_cluster_specs(&m).unwrap();
    let grid = edm_grid(80.0, 0.002, 7.0, 18).unwrap().extended(1e-5, 10).unwrap();
    let trajs = integrate_many(&m, &starts(3, 8, 80.0), &grid, IntegrateOptions::new(Method::Rk4, 8)).unwrap();
    for t in &trajs {
        let r = stage_report(t, &m, &clusters, StageParams::default()).unwrap();
        assert_eq!(r.per_node.len(), t.len());
        assert_eq!(r.per_node[0].stage, Stage::Initial);
        assert!(r.per_node.windows(2).all(|w| w[0].stage <= w[1].stage));
        assert_eq!(r.per_node.last().unwrap().stage, Stage::Terminal);
        // the run ends on a data point, memorized
        let last = r.per_node.last().unwrap();
        assert!(last.d_nn < 1e-4, "d_nn {}", last.d_nn);
        let json = r.to_json().unwrap();
        let back: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(back["per_node"].as_array().unwrap().len(), t.len());
    }
}
