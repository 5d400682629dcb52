//! Acceptance suite: one PASS/FAIL line per criterion. Criteria run one after
//! another so timing checks do not compete for cores.

mod common;

use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cirfuse::bundle::{
    load_bundle, read_bundle, synth_bundle, write_bundle, Annotation, Protocol, SynthSpec, Violation,
};
use cirfuse::evalkit::{
    ablate, ablation_preset, evaluate, fuse_bundle, ncap_sweep, sweep, RunConfig, Side, SweepGrid,
};
use cirfuse::fusion::{apply_ablation, Channel, ChannelSet, FusionWeights};
use cirfuse::matrix::{CaptionTensor, Matrix};
use cirfuse::metrics::{map_at_k, recall_at_k, recall_subset_at_k};
use cirfuse::report::to_canonical_json;
use cirfuse::search::{batch_rank, rank_full, rank_subset, Candidates, FusedGallery, RankedList};
use cirfuse::{Bundle, Error};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T>(r: cirfuse::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

// kernel / oracle equivalence

const KERNEL_KS: [usize; 5] = [1, 5, 10, 25, 50];

fn kernel_oracle() -> Check {
    let start = Instant::now();
    let mut flagged = 0;
    let mut lists = 0;
    for seed in 0..50u64 {
        // half the queries planted, half unrelated, so both tight and
        // diffuse score distributions are exercised
        let spec = SynthSpec::new(2000, 200, 128)
            .captions(2, 2)
            .planted_fraction(0.5)
            .seed(1000 + seed);
        let b = ok(synth_bundle(&spec))?;
        let (q, g) = ok(fuse_bundle(&b, &FusionWeights::default()))?;
        let rows: Vec<Vec<f32>> = g.rows().iter_rows().map(<[f32]>::to_vec).collect();
        let excl: Vec<Vec<usize>> = b
            .annotations
            .iter()
            .map(|a| a.reference_id.into_iter().collect())
            .collect();
        let oracle: Vec<Vec<(usize, f64)>> = (0..q.rows())
            .map(|i| common::rank(q.row(i), &rows, &excl[i]))
            .collect();
        let cands: Vec<Candidates> = excl.iter().map(|e| Candidates::All { exclusions: e }).collect();
        for &k in &KERNEL_KS {
            let fast = ok(batch_rank(&q, &g, k, &cands))?;
            for (i, list) in fast.iter().enumerate() {
                let ids: Vec<usize> = list.ids().collect();
                flagged += common::compare_prefix(&ids, &oracle[i], k)
                    .map_err(|e| format!("seed {seed} query {i} k {k}: {e}"))?;
                lists += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:.1?}, limit 60 s");
    Ok(format!("{lists} lists match, {flagged} near-tie flips flagged, {elapsed:.1?}"))
}

// metric oracle

fn random_unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f32>> {
    (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .collect()
}

fn metric_instance(seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k_gallery = rng.random_range(6..=50usize);
    let n_queries = rng.random_range(1..=8usize);
    let d = 8;
    let rows = random_unit_rows(&mut rng, k_gallery, d);
    let queries = random_unit_rows(&mut rng, n_queries, d);
    let mut annotations = Vec::new();
    for _ in 0..n_queries {
        let n_gt = rng.random_range(1..=5usize.min(k_gallery - 1));
        let gt = rand::seq::index::sample(&mut rng, k_gallery, n_gt).into_vec();
        let reference = (0..k_gallery).find(|i| !gt.contains(i)).unwrap();
        let mut subset = vec![gt[0]];
        let size = rng.random_range(3..=6usize);
        while subset.len() < size {
            let r = rng.random_range(0..k_gallery);
            if !subset.contains(&r) {
                subset.push(r);
            }
        }
        annotations.push(Annotation {
            gt_ids: gt,
            reference_id: Some(reference),
            subset_ids: Some(subset),
        });
    }

    let g = ok(FusedGallery::new(ok(Matrix::from_rows(d, &rows))?))?;
    let mut full = Vec::new();
    let mut sub = Vec::new();
    for (q, a) in queries.iter().zip(&annotations) {
        full.push(ok(rank_full(q, &g, &[a.reference_id.unwrap()]))?);
        sub.push(ok(rank_subset(q, &g, a.subset_ids.as_ref().unwrap()))?);
    }
    let map = ok(map_at_k(&full, &annotations, &[5, 10, 25, 50]))?;
    let rec = ok(recall_at_k(&full, &annotations, &[1, 5, 10, 50]))?;
    let rsub = ok(recall_subset_at_k(&sub, &annotations, &[1, 2, 3]))?;

    let oracle_full: Vec<Vec<usize>> = queries
        .iter()
        .zip(&annotations)
        .map(|(q, a)| {
            common::rank(q, &rows, &[a.reference_id.unwrap()])
                .into_iter()
                .map(|(i, _)| i)
                .collect()
        })
        .collect();
    let oracle_sub: Vec<Vec<usize>> = queries
        .iter()
        .zip(&annotations)
        .map(|(q, a)| {
            let s = a.subset_ids.as_ref().unwrap();
            let others: Vec<usize> = (0..k_gallery).filter(|i| !s.contains(i)).collect();
            common::rank(q, &rows, &others).into_iter().map(|(i, _)| i).collect()
        })
        .collect();

    let mut worst = 0.0f64;
    let mut check = |name: &str, k: usize, got: f64, want: f64| -> Result<(), String> {
        let err = (got - want).abs();
        worst = worst.max(err);
        ensure!(err <= 1e-12, "seed {seed} {name}@{k}: {got} vs oracle {want}");
        Ok(())
    };
    for (&k, &v) in &map {
        let want = common::mean(oracle_full.iter().zip(&annotations).map(|(r, a)| common::average_precision(r, &a.gt_ids, k)));
        check("map", k, v, want)?;
    }
    for (&k, &v) in &rec {
        let want = common::mean(oracle_full.iter().zip(&annotations).map(|(r, a)| common::hit(r, &a.gt_ids, k)));
        check("recall", k, v, want)?;
    }
    for (&k, &v) in &rsub {
        let want = common::mean(oracle_sub.iter().zip(&annotations).map(|(r, a)| common::hit(r, &a.gt_ids, k)));
        check("recall_subset", k, v, want)?;
    }
    Ok(worst)
}

fn metric_oracle() -> Check {
    let mut worst = 0.0f64;
    for seed in 0..100 {
        worst = worst.max(metric_instance(seed)?);
    }
    // hand case: ground truth at ranks 1 and 3 of 5
    let list = RankedList {
        query_index: 0,
        entries: [10usize, 11, 12, 13, 14]
            .iter()
            .enumerate()
            .map(|(i, &gallery_index)| cirfuse::search::Hit {
                gallery_index,
                score: 1.0 - 0.1 * i as f64,
            })
            .collect(),
        exclusions: vec![],
    };
    let ann = [Annotation {
        gt_ids: vec![10, 12],
        reference_id: None,
        subset_ids: None,
    }];
    let ap = ok(map_at_k(std::slice::from_ref(&list), &ann, &[5]))?[&5];
    let derived = 0.5 * (1.0 + 2.0 / 3.0);
    ensure!(ap == derived, "hand case AP@5 = {ap}, derived {derived}");
    ensure!(format!("{ap:.6}") == "0.833333", "hand case prints {ap:.6}");
    Ok(format!("100 instances, max |diff| {worst:.1e}; hand case AP@5 = {ap:.6}"))
}

// planted retrieval

fn planted_retrieval() -> Check {
    let mut summary = Vec::new();
    for (dim, protocol) in [
        (32, Protocol::MultiGt),
        (32, Protocol::SingleGt),
        (128, Protocol::MultiGt),
    ] {
        let spec = SynthSpec::new(5000, 1000, dim).protocol(protocol).seed(dim as u64);
        let b = ok(synth_bundle(&spec))?;
        let r = ok(evaluate(&b, &RunConfig::for_bundle(&b)))?;
        for (key, v) in &r.metrics {
            ensure!(*v == 1.0, "d={dim} {protocol}: {key} = {v}");
        }
        summary.push(format!("d={dim} {protocol}: {} metrics at 1.0", r.metrics.len()));
    }
    Ok(format!("1000 queries each; {}", summary.join("; ")))
}

// fusion identities

fn identities() -> Check {
    let spec = SynthSpec::new(1500, 150, 64)
        .captions(4, 3)
        .planted_fraction(0.6)
        .noise(0.9)
        .seed(77);
    let b = ok(synth_bundle(&spec))?;
    let base = RunConfig::for_bundle(&b);
    let report = |w: FusionWeights, bundle: &Bundle| -> Result<String, String> {
        Ok(ok(evaluate(bundle, &base.clone().with_weights(w)))?.to_json())
    };
    let default = FusionWeights::default();

    // gamma = 0 against a gallery that has no caption channel at all
    let gamma0 = report(FusionWeights { gamma: 0.0, ..default }, &b)?;
    let mut image_only = b.clone();
    image_only.gallery.tc = CaptionTensor::empty(b.gallery_count(), b.dim());
    image_only.refresh_manifest();
    let image_gallery = report(default.with_mask(ChannelSet::ALL.without(Channel::Tc)), &image_only)?;
    ensure!(gamma0 == image_gallery, "gamma=0 report differs from the image-only gallery report");

    let drop_tc = report(ok(apply_ablation(&default, ChannelSet::of(&[Channel::Tc])))?, &b)?;
    ensure!(drop_tc == gamma0, "drop{{TC}} report differs from gamma=0");

    let baseline = report(default, &b)?;
    let drop_qv = report(ok(apply_ablation(&default, ChannelSet::of(&[Channel::Qv])))?, &b)?;
    ensure!(drop_qv == baseline, "drop{{QV}} at alpha=0.6, beta=0.4 differs from baseline");
    ensure!(baseline != gamma0, "gamma has no effect; identities would be vacuous");
    Ok("gamma=0 == image-only gallery, drop{TC} == gamma=0, drop{QV} == baseline (byte-identical)".into())
}

// determinism

fn all_outputs(b: &Bundle, threads: usize) -> Result<Vec<String>, String> {
    let cfg = RunConfig::for_bundle(b).with_threads(Some(threads));
    let eval = ok(evaluate(b, &cfg))?.to_json();
    let grid = ok(sweep(b, &SweepGrid::new(0.1, vec![0.1, 0.2]), &cfg))?;
    let abl = ok(ablate(b, &cfg, &ablation_preset()))?;
    let ncap = ok(ncap_sweep(b, &[1, 3, 5], Side::Target, &cfg))?;
    Ok(vec![
        eval,
        to_canonical_json(&grid),
        grid.to_csv(),
        to_canonical_json(&abl),
        abl.to_csv(),
        to_canonical_json(&ncap),
        ncap.to_csv(),
    ])
}

fn determinism() -> Check {
    let spec = SynthSpec::new(2000, 300, 64)
        .captions(5, 5)
        .protocol(Protocol::SingleGt)
        .planted_fraction(0.5)
        .noise(1.0)
        .categories(&["dress", "shirt", "toptee"])
        .seed(9);
    let b = ok(synth_bundle(&spec))?;
    let one = all_outputs(&b, 1)?;
    let eight = all_outputs(&b, 8)?;
    let again = all_outputs(&b, 8)?;
    let names = ["eval", "sweep", "sweep csv", "ablate", "ablate csv", "ncap", "ncap csv"];
    for (i, name) in names.iter().enumerate() {
        ensure!(one[i] == eight[i], "{name}: 1 thread and 8 threads differ");
        ensure!(eight[i] == again[i], "{name}: repeated run differs");
    }
    let bytes: usize = one.iter().map(String::len).sum();
    Ok(format!("eval, sweep, ablate, ncap identical at 1 and 8 threads and across runs ({bytes} bytes)"))
}

// bundle format

fn corrupt(path: &Path, f: impl FnOnce(&mut Vec<u8>)) {
    let mut bytes = std::fs::read(path).unwrap();
    f(&mut bytes);
    std::fs::write(path, bytes).unwrap();
}

fn bundle_format() -> Check {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let mut faults = 0;
    for i in 0..50 {
        let k = rng.random_range(10..200usize);
        let q = rng.random_range(1..10usize);
        let d = rng.random_range(8..40usize);
        let (nt, nq) = (rng.random_range(0..4usize), rng.random_range(0..4usize));
        let protocol = if rng.random_bool(0.5) { Protocol::SingleGt } else { Protocol::MultiGt };
        let spec = SynthSpec::new(k, q, d)
            .captions(nt, nq)
            .protocol(protocol)
            .planted_fraction(rng.random_range(0.0..=1.0))
            .signal(ChannelSet::EMPTY)
            .seed(i);
        let b = ok(synth_bundle(&spec))?;
        let dir = root.path().join(format!("b{i}"));
        ok(write_bundle(&b, &dir))?;
        let back = ok(load_bundle(&dir))?;
        ensure!(back.bit_eq(&b), "round trip {i} is not bitwise equal");

        // truncation of one binary file
        let files = ["gallery.img.bin", "query.qv.bin", "query.qf.bin"];
        let file = files[i as usize % files.len()];
        let fdir = root.path().join(format!("t{i}"));
        ok(write_bundle(&b, &fdir))?;
        corrupt(&fdir.join(file), |v| v.truncate(v.len() - 4));
        match read_bundle(&fdir) {
            Err(Error::SizeMismatch { file: f, .. }) if f == file => faults += 1,
            other => return Err(format!("truncated {file} not located: {:?}", other.err())),
        }

        // NaN at a random gallery coordinate
        let (row, col) = (rng.random_range(0..k), rng.random_range(0..d));
        let ndir = root.path().join(format!("n{i}"));
        ok(write_bundle(&b, &ndir))?;
        corrupt(&ndir.join("gallery.img.bin"), |v| {
            let at = 4 * (row * d + col);
            v[at..at + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        });
        match load_bundle(&ndir) {
            Err(Error::Invalid(Violation::NonFinite { channel: "t_v", coordinate, .. }))
                if coordinate == vec![row, col] =>
            {
                faults += 1
            }
            other => return Err(format!("NaN at (t_v, {row}, {col}) not located: {:?}", other.err())),
        }

        // a ground-truth index one past the gallery
        let query = rng.random_range(0..q);
        let mut bad = b.clone();
        bad.annotations[query].gt_ids[0] = k;
        let adir = root.path().join(format!("a{i}"));
        std::fs::create_dir_all(&adir).map_err(|e| e.to_string())?;
        ok(write_bundle(&b, &adir))?;
        std::fs::write(
            adir.join("annotations.json"),
            serde_json::to_vec(&bad.annotations).map_err(|e| e.to_string())?,
        )
        .map_err(|e| e.to_string())?;
        match load_bundle(&adir) {
            Err(Error::Invalid(Violation::IndexOutOfRange { query: qq, index, .. }))
                if qq == query && index == k =>
            {
                faults += 1
            }
            other => return Err(format!("bad gt index for query {query} not located: {:?}", other.err())),
        }
    }
    Ok(format!("50 round trips bitwise-equal; {faults} single faults detected and located"))
}

// throughput

fn throughput() -> Check {
    let spec = SynthSpec::new(100_000, 1000, 768).captions(1, 1).seed(3);
    let t = Instant::now();
    let b = ok(synth_bundle(&spec))?;
    let build = t.elapsed();
    let cfg = RunConfig::for_bundle(&b);

    let t = Instant::now();
    let report = ok(evaluate(&b, &cfg))?;
    let total = t.elapsed();
    ensure!(
        report.metrics.values().all(|&v| v == 1.0),
        "planted targets not retrieved"
    );
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    ensure!(
        total < Duration::from_secs(10),
        "full evaluation took {total:.2?} on {cores} core(s), limit 10 s"
    );
    Ok(format!(
        "1000 queries x 100000 x 768 evaluated in {total:.2?} on {cores} core(s) (bundle built in {build:.1?})"
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 7] = [
        ("kernel_oracle_equivalence", kernel_oracle),
        ("metric_oracle", metric_oracle),
        ("planted_target_retrieval", planted_retrieval),
        ("fusion_identities", identities),
        ("determinism", determinism),
        ("bundle_format", bundle_format),
        ("throughput", throughput),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|_| Err("panicked".to_string()));
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} [{secs:.1} s]"),
            Err(reason) => {
                failed += 1;
                println!("FAIL {name}: {reason} [{secs:.1} s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
