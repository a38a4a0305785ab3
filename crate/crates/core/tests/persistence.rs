use semvar::adapt::FisherDiag;
use semvar::config::RunConfig;
use semvar::generator::GeneratorParams;
use semvar::io::{self, Checkpoint, CheckpointKind, Persist};
use semvar::metrics::MetricsReport;
use semvar::rng;
use semvar::variations::VariationSet;
use semvar::world::World;
use semvar::Error;

#[test]
fn every_checkpoint_kind_round_trips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let world = RunConfig::default().build_world().unwrap();
    let gen = GeneratorParams::standard(8, 5).unwrap();
    let z = rng::normal_matrix(&mut rng::seeded(1, 0), 6, 16, 1.0);
    let vars = VariationSet { target: world.encode_text("trg").unwrap(), z, epsilon: 1.0 / 3.0 };
    let fisher = FisherDiag { blocks: gen.tensors().iter().map(|t| t.map(|v| v * v * 1e-7)).collect(), samples: 256 };

    let meta = [("seed", "5".to_string())];
    world.save(&dir.path().join("w"), &meta).unwrap();
    gen.save(&dir.path().join("g"), &meta).unwrap();
    vars.save(&dir.path().join("v"), &meta).unwrap();
    fisher.save(&dir.path().join("f"), &meta).unwrap();

    let w2 = World::load(&dir.path().join("w")).unwrap();
    assert_eq!(w2.encoder, world.encoder);
    assert_eq!(w2.domains, world.domains);
    assert_eq!(GeneratorParams::load(&dir.path().join("g")).unwrap(), gen);
    assert_eq!(VariationSet::load(&dir.path().join("v")).unwrap(), vars);
    assert_eq!(FisherDiag::load(&dir.path().join("f")).unwrap(), fisher);

    assert!(matches!(GeneratorParams::load(&dir.path().join("w")), Err(Error::Checkpoint(_))));
    // Outputs are write-once.
    assert!(matches!(gen.save(&dir.path().join("g"), &meta), Err(Error::Io { .. })));
}

#[test]
fn truncated_generator_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let gen = GeneratorParams::standard(8, 1).unwrap();
    let text = gen.to_checkpoint().to_text();
    let lines: Vec<&str> = text.lines().collect();
    let cut = lines[..lines.len() / 2].join("\n");
    let path = dir.path().join("cut");
    std::fs::write(&path, cut).unwrap();
    assert!(GeneratorParams::load(&path).is_err());
}

#[test]
fn config_hash_mismatch_is_tolerated() {
    let ck = Checkpoint::new(CheckpointKind::Generator).with_meta("config_hash", "aaaa");
    assert!(!ck.check_config_hash("bbbb"));
}

#[test]
fn metrics_csv_reproduces_values_to_full_precision() {
    let dir = tempfile::tempdir().unwrap();
    let recs = vec![
        MetricsReport { iter: 0, loss_dir: Some(1.0 / 3.0), loss_total: Some(std::f64::consts::PI), ..Default::default() },
        MetricsReport { iter: 100, sse: Some(1e-300), precision: Some(0.1 + 0.2), recall: Some(-0.0), ..Default::default() },
    ];
    let path = dir.path().join("m.csv");
    io::write_metrics_csv(&recs, &path).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 3);
    let back = io::read_metrics_csv(&path).unwrap();
    assert_eq!(back, recs);
    assert!(matches!(io::write_metrics_csv(&[], &dir.path().join("e.csv")), Err(Error::Usage(_))));
}

#[test]
fn svg_files_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let series = vec![("dir".to_string(), vec![(0.0, 1.0), (100.0, 0.5)]), ("dm".to_string(), vec![(0.0, 1.0), (100.0, 0.8)])];
    let (a, b) = (dir.path().join("a.svg"), dir.path().join("b.svg"));
    io::render_svg_chart("loss", &series, &a).unwrap();
    io::render_svg_chart("loss", &series, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let bad = vec![("x".to_string(), vec![(0.0, f64::INFINITY)])];
    assert!(matches!(io::render_svg_chart("bad", &bad, &dir.path().join("c.svg")), Err(Error::Usage(_))));
}
