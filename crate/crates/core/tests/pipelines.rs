use std::collections::HashSet;
use std::fs;

use tdr_core::commands::{build_world, run, Command, RunConfig, RunSummary, SynthSection};
use tdr_core::datasets::{load_pair, make_split, DatasetSource, RatingFileSpec, RatingFormat, SplitDataset};
use tdr_core::mclab::{
    check_variance_ordering, closed_form_variance, run_bias_variance, Design, MCScenario, MCWorld, MCWorldSpec,
};
use tdr_core::synthgen::{run_table, synthetic_split, LowRankSource, SynthConfig, SyntheticSplitSpec};
use tdr_core::training::TrainData;
use tdr_core::Estimator;

#[test]
fn synthetic_split_partitions_are_disjoint() {
    let s = synthetic_split(&SyntheticSplitSpec::default(), 0.1, 4).unwrap();
    let key = |r: &tdr_core::datasets::Rating| (r.user, r.item);
    let train: HashSet<_> = s.split.train.iter().map(key).collect();
    let val: HashSet<_> = s.split.val.iter().map(key).collect();
    let test: HashSet<_> = s.split.test.iter().map(key).collect();
    assert!(train.is_disjoint(&val) && train.is_disjoint(&test) && val.is_disjoint(&test));
    assert_eq!(s.p_true.len(), 200 * 300);
    let again = synthetic_split(&SyntheticSplitSpec::default(), 0.1, 4).unwrap();
    assert_eq!(again, s);
}

#[test]
fn mnar_training_set_overrepresents_high_ratings() {
    let s = synthetic_split(&SyntheticSplitSpec::default(), 0.1, 0).unwrap();
    let mean = |rs: &[tdr_core::datasets::Rating]| rs.iter().map(|r| r.value).sum::<f64>() / rs.len() as f64;
    assert!(mean(&s.split.train) > mean(&s.split.test) + 0.1);
}

#[test]
fn triple_files_drive_a_train_run() {
    let dir = tempfile::tempdir().unwrap();
    let s = synthetic_split(
        &SyntheticSplitSpec {
            source: LowRankSource {
                n_users: 30,
                n_items: 40,
                ..LowRankSource::default()
            },
            mar_density: 0.2,
            ..SyntheticSplitSpec::default()
        },
        0.1,
        0,
    )
    .unwrap();
    let write = |name: &str, rs: &[tdr_core::datasets::Rating]| {
        let text: String = rs
            .iter()
            .map(|r| format!("u{},i{},{}\n", r.user, r.item, r.value))
            .collect();
        let path = dir.path().join(name);
        fs::write(&path, text).unwrap();
        path
    };
    let mnar: Vec<_> = s.split.train.iter().chain(&s.split.val).copied().collect();
    let src = DatasetSource {
        mnar: write("mnar.csv", &mnar),
        mar: write("mar.csv", &s.split.test),
        spec: RatingFileSpec {
            format: RatingFormat::DelimitedTriples,
            delimiter: Some(','),
            ..RatingFileSpec::default()
        },
    };
    let (a, b) = load_pair(&src.mnar, &src.mar, &src.spec).unwrap();
    assert_eq!(a.ratings.len(), mnar.len());
    let split = make_split(&a, &b, &src.spec, 0.1, 0).unwrap();
    let bytes = {
        let mut v = Vec::new();
        split.write(&mut v).unwrap();
        v
    };
    assert_eq!(SplitDataset::read(bytes.as_slice()).unwrap(), split);
    TrainData::from_split(&split).unwrap();

    let mut cfg = RunConfig {
        command: Command::Train,
        ..RunConfig::default()
    };
    cfg.data.files = Some(src);
    cfg.trainer.max_epochs = 2;
    cfg.trainer.warmup_epochs = 1;
    cfg.trainer.propensity_epochs = 1;
    let out = dir.path().join("run");
    match run(&cfg, &out).unwrap() {
        RunSummary::Train(rows) => assert_eq!(rows.len(), cfg.variants.len()),
        other => panic!("unexpected summary {other:?}"),
    }
    for f in [
        "config.toml",
        "seeds.txt",
        "VERSION",
        "metrics.csv",
        "metrics.json",
        "history.json",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn table_does_not_depend_on_thread_count() {
    let section = SynthSection {
        source: LowRankSource {
            n_users: 30,
            n_items: 40,
            ..LowRankSource::default()
        },
        ..SynthSection::default()
    };
    let world = build_world(&section).unwrap();
    let cfg = SynthConfig {
        n_replicates: 4,
        ..section.config.clone()
    };
    let serial = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| run_table(&world, &cfg).unwrap());
    let wide = rayon::ThreadPoolBuilder::new()
        .num_threads(4)
        .build()
        .unwrap()
        .install(|| run_table(&world, &cfg).unwrap());
    assert_eq!(serial.rows, wide.rows);
    assert_eq!(serial.summary, wide.summary);
}

#[test]
fn oracle_nuisances_keep_dr_close_to_ideal() {
    let section = SynthSection {
        source: LowRankSource {
            n_users: 60,
            n_items: 80,
            ..LowRankSource::default()
        },
        config: SynthConfig {
            oracle: true,
            n_replicates: 6,
            target_obs_rate: Some(0.2),
            ..SynthConfig::default()
        },
        ..SynthSection::default()
    };
    let world = build_world(&section).unwrap();
    let table = run_table(&world, &section.config).unwrap();
    for row in table.summary.iter().filter(|r| r.estimator == Estimator::Dr) {
        let naive = table.cell(row.scenario, Estimator::Naive).mean_re;
        assert!(
            row.mean_re < naive,
            "{}: DR {} vs naive {naive}",
            row.scenario,
            row.mean_re
        );
    }
}

#[test]
fn fixed_design_matches_its_closed_form() {
    let world = MCWorld::generate(&MCWorldSpec {
        n_users: 30,
        n_items: 30,
        ..MCWorldSpec::default()
    })
    .unwrap();
    let report = run_bias_variance(&world, MCScenario::ACCURATE, Design::Fixed, 3000, 5).unwrap();
    let cf = closed_form_variance(&world, Design::Fixed);
    assert_eq!(report.get(Estimator::Ips).closed_form_variance, Some(cf.ips));
    let failed: Vec<_> = check_variance_ordering(&report, 3.0)
        .into_iter()
        .filter(|c| !c.passed)
        .collect();
    assert!(failed.is_empty(), "{failed:?}");
}

#[test]
fn mc_reports_are_seed_deterministic() {
    let world = MCWorld::generate(&MCWorldSpec {
        n_users: 10,
        n_items: 12,
        ..MCWorldSpec::default()
    })
    .unwrap();
    let a = run_bias_variance(&world, MCScenario::ACCURATE, Design::Random, 150, 9).unwrap();
    let b = run_bias_variance(&world, MCScenario::ACCURATE, Design::Random, 150, 9).unwrap();
    let c = run_bias_variance(&world, MCScenario::ACCURATE, Design::Random, 150, 10).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.stats, c.stats);
}
