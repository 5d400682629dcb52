use cirfuse::bundle::{
    load_bundle, synth_bundle, write_bundle, Annotation, Bundle, GalleryChannels, Protocol,
    QueryChannels, SynthSpec,
};
use cirfuse::evalkit::{ablate, ablation_preset, evaluate, ncap_sweep, sweep, RunConfig, Side, SweepGrid};
use cirfuse::fusion::{ChannelSet, FusionWeights};
use cirfuse::matrix::{CaptionTensor, Matrix};
use cirfuse::metrics::{Metric, MetricKey};
use cirfuse::report::ExclusionPolicy;
use cirfuse::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noisy(k: usize, q: usize, seed: u64) -> Bundle {
    synth_bundle(&SynthSpec::new(k, q, 24).captions(4, 3).noise(1.5).planted_fraction(0.8).seed(seed)).unwrap()
}

#[test]
fn sweep_cells_equal_direct_evaluation() {
    let b = noisy(300, 40, 1);
    let base = RunConfig::for_bundle(&b);
    let res = sweep(&b, &SweepGrid::new(0.5, vec![0.0, 0.3]), &base).unwrap();
    assert_eq!(res.cells.len(), 12);
    for cell in &res.cells {
        let w = FusionWeights::new(cell.alpha, cell.beta, cell.gamma);
        let direct = evaluate(&b, &base.clone().with_weights(w)).unwrap();
        assert_eq!(cell.report, direct, "cell {} {} {}", cell.alpha, cell.beta, cell.gamma);
    }
    let csv = res.to_csv();
    assert!(csv.starts_with("alpha,beta,gamma,metric,k,value\n"));
    assert_eq!(csv.lines().count(), 1 + 12 * base.metrics.len());
}

#[test]
fn full_ablation_row_equals_evaluation() {
    let b = noisy(300, 40, 2);
    let base = RunConfig::for_bundle(&b);
    let res = ablate(&b, &base, &ablation_preset()).unwrap();
    assert_eq!(res.rows.len(), 8);
    assert_eq!(res.rows[0].name, "full");
    assert_eq!(res.rows[0].report, evaluate(&b, &base).unwrap());
    for row in &res.rows[1..] {
        let active: ChannelSet = row.report.config.channels.iter().fold(ChannelSet::EMPTY, |s, &c| s.with(c));
        assert!(active.intersection(row.drop).is_empty(), "{}", row.name);
    }
    assert!(res.to_csv().starts_with("row,drop,alpha,beta,gamma,metric,k,value\n"));
}

#[test]
fn ncap_extremes() {
    let b = noisy(250, 30, 3);
    let base = RunConfig::for_bundle(&b);
    let full = evaluate(&b, &base).unwrap();
    for (side, n_max) in [(Side::Query, 3), (Side::Target, 4)] {
        let res = ncap_sweep(&b, &[1, n_max], side, &base).unwrap();
        assert_eq!(res.points[1].report.metrics, full.metrics, "{side}");

        let mut one = b.clone();
        match side {
            Side::Query => one.queries.qm = b.queries.qm.truncated(1).unwrap(),
            Side::Target => one.gallery.tc = b.gallery.tc.truncated(1).unwrap(),
        }
        one.refresh_manifest();
        assert_eq!(res.points[0].report.metrics, evaluate(&one, &base).unwrap().metrics, "{side}");
        assert!(res.to_csv().starts_with("side,n,metric,k,value\n"));
    }
    assert!(matches!(
        ncap_sweep(&b, &[5], Side::Target, &base),
        Err(Error::CaptionCount { requested: 5, available: 4 })
    ));
}

#[test]
fn noise_captions_do_not_help() {
    // caption 0 carries the signal, the rest are unrelated unit vectors
    let mut b = synth_bundle(&SynthSpec::new(600, 200, 32).captions(8, 1).noise(0.8).seed(4)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..b.gallery_count() {
        for c in 1..8 {
            let v: Vec<f32> = (0..32).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            b.gallery.tc.caption_mut(i, c).copy_from_slice(&v);
        }
    }
    let cfg = RunConfig::for_bundle(&b).with_weights(FusionWeights::new(0.6, 0.4, 0.8));
    let res = ncap_sweep(&b, &[1, 2, 4, 8], Side::Target, &cfg).unwrap();
    let key = MetricKey::new(Metric::Map, 10);
    let values: Vec<f64> = res.points.iter().map(|p| p.report.metrics[&key]).collect();
    for w in values.windows(2) {
        assert!(w[1] <= w[0], "{values:?}");
    }
    assert!(values[3] < values[0], "{values:?}");
}

fn unit(d: usize, i: usize) -> Vec<f32> {
    let mut v = vec![0.0; d];
    v[i] = 1.0;
    v
}

/// One query whose reference image is the best match and whose target is second.
fn reference_fixture() -> Bundle {
    let d = 8;
    let gt = {
        let mut v = unit(d, 0);
        v[1] = 0.5;
        v
    };
    let mut tv = vec![unit(d, 0), gt.clone()];
    tv.extend((2..d).map(|i| unit(d, i)));
    let k = tv.len();
    let tv = Matrix::from_rows(d, &tv).unwrap();
    let tc = CaptionTensor::new(k, 1, d, tv.as_slice().to_vec()).unwrap();
    let e0 = Matrix::from_rows(d, &[unit(d, 0)]).unwrap();
    let queries = QueryChannels {
        qv: e0.clone(),
        qf: e0.clone(),
        qm: CaptionTensor::new(1, 1, d, e0.as_slice().to_vec()).unwrap(),
    };
    let ann = vec![Annotation { gt_ids: vec![1], reference_id: Some(0), subset_ids: None }];
    Bundle::from_parts("fixture", Protocol::MultiGt, None, queries, GalleryChannels { tv, tc }, ann)
}

#[test]
fn reference_exclusion_both_ways() {
    let b = reference_fixture();
    let key = MetricKey::new(Metric::Recall, 1);
    let mut cfg = RunConfig::for_bundle(&b);
    cfg.metrics = vec![key, MetricKey::new(Metric::Recall, 7)];
    let excluded = evaluate(&b, &cfg).unwrap();
    assert_eq!(excluded.metrics[&key], 1.0);
    cfg.exclusion = ExclusionPolicy::None;
    let kept = evaluate(&b, &cfg).unwrap();
    assert_eq!(kept.metrics[&key], 0.0);
    // with the reference excluded only K - 1 items remain
    cfg.exclusion = ExclusionPolicy::ExcludeReference;
    cfg.metrics = vec![MetricKey::new(Metric::Recall, 8)];
    assert!(matches!(evaluate(&b, &cfg), Err(e) if e.to_string().contains("k = 8")));
}

#[test]
fn incompatible_configurations() {
    let b = synth_bundle(&SynthSpec::new(100, 10, 16).captions(2, 0)).unwrap();
    let cfg = RunConfig::for_bundle(&b);
    assert!(matches!(evaluate(&b, &cfg), Err(Error::Incompatible(_))));
    let ok = cfg.clone().with_weights(FusionWeights::new(0.0, 0.5, 0.2));
    assert!(evaluate(&b, &ok).is_ok());

    let mut subset = ok.clone();
    subset.metrics = vec![MetricKey::new(Metric::RecallSubset, 1)];
    assert!(evaluate(&b, &subset).is_err());

    let bad = ok.clone().with_weights(FusionWeights::new(0.0, 1.2, 0.2));
    assert!(matches!(evaluate(&b, &bad), Err(Error::InvalidWeights(_))));
    assert!(evaluate(&b, &ok.clone().with_threads(Some(0))).is_err());
}

#[test]
fn results_survive_storage_and_thread_count() {
    let b = synth_bundle(
        &SynthSpec::new(400, 60, 16)
            .captions(3, 2)
            .protocol(Protocol::SingleGt)
            .categories(&["a", "b", "c"])
            .noise(1.0)
            .planted_fraction(0.6),
    )
    .unwrap();
    let tmp = tempfile::tempdir().unwrap();
    write_bundle(&b, tmp.path()).unwrap();
    let back = load_bundle(tmp.path()).unwrap();
    let cfg = RunConfig::for_bundle(&b);
    let json = evaluate(&b, &cfg).unwrap().to_json();
    assert_eq!(evaluate(&back, &cfg).unwrap().to_json(), json);
    for t in [1, 3, 8] {
        assert_eq!(evaluate(&b, &cfg.clone().with_threads(Some(t))).unwrap().to_json(), json);
    }

    let report = evaluate(&b, &cfg).unwrap();
    let cats = report.categories.as_ref().unwrap();
    assert_eq!(cats.values().map(|c| c.query_count).sum::<usize>(), 60);
    for (key, avg) in report.average.as_ref().unwrap() {
        let mean = cats.values().map(|c| c.metrics[key]).sum::<f64>() / 3.0;
        assert!((avg - mean).abs() < 1e-12);
    }
    assert!(report.metrics.contains_key(&MetricKey::new(Metric::RecallSubset, 3)));
}
