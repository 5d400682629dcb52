//! Deterministic synthetic bundles with planted ground truth.
//!
//! Every gallery item and every query has a latent unit direction; each of
//! its feature rows is that direction plus isotropic noise, re-normalized.
//! A planted query shares its direction with its ground-truth items, so after
//! fusion those items score well above everything else. Separation is
//! checked under the default weights and violators are regenerated.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{Annotation, Bundle, Category, GalleryChannels, Protocol, QueryChannels};
use crate::error::{Error, Result};
use crate::fusion::{Channel, ChannelSet, FusionWeights, PreparedGallery, PreparedQueries};
use crate::matrix::{CaptionTensor, Matrix};
use crate::search::{error_margin, scan};

/// Query index with its fresh q_v, q_f and q_m rows.
type QueryRows = (usize, Vec<f32>, Vec<f32>, Vec<f32>);

const MIN_DIM: usize = 8;
const MAX_ROUNDS: u32 = 100;
/// Required gap between the weakest planted target and the best other row.
const SEPARATION: f32 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub gallery_count: usize,
    pub query_count: usize,
    pub dim: usize,
    pub captions_per_target: usize,
    pub captions_per_query: usize,
    pub protocol: Protocol,
    /// Fraction of queries whose ground truth is planted; the rest get
    /// unrelated random targets.
    pub planted_fraction: f64,
    pub seed: u64,
    pub dataset: String,
    /// Channels that carry the planted direction. Others are pure noise.
    pub signal: ChannelSet,
    /// Noise norm relative to the unit direction.
    pub noise: f64,
    /// Candidate subset size for `single_gt` bundles.
    pub subset_size: usize,
    /// Category names; queries are split into contiguous, near-equal ranges.
    pub categories: Vec<String>,
}

impl SynthSpec {
    pub fn new(gallery_count: usize, query_count: usize, dim: usize) -> Self {
        Self {
            gallery_count,
            query_count,
            dim,
            captions_per_target: 15,
            captions_per_query: 15,
            protocol: Protocol::MultiGt,
            planted_fraction: 1.0,
            seed: 0,
            dataset: "synthetic".into(),
            signal: ChannelSet::ALL,
            noise: 0.25,
            subset_size: 6,
            categories: Vec::new(),
        }
    }

    pub fn captions(mut self, per_target: usize, per_query: usize) -> Self {
        self.captions_per_target = per_target;
        self.captions_per_query = per_query;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn protocol(mut self, protocol: Protocol) -> Self {
        self.protocol = protocol;
        self
    }

    pub fn planted_fraction(mut self, f: f64) -> Self {
        self.planted_fraction = f;
        self
    }

    pub fn signal(mut self, signal: ChannelSet) -> Self {
        self.signal = signal;
        self
    }

    pub fn noise(mut self, noise: f64) -> Self {
        self.noise = noise;
        self
    }

    pub fn dataset(mut self, name: impl Into<String>) -> Self {
        self.dataset = name.into();
        self
    }

    pub fn categories<S: AsRef<str>>(mut self, names: &[S]) -> Self {
        self.categories = names.iter().map(|s| s.as_ref().to_string()).collect();
        self
    }

    fn planted_count(&self) -> usize {
        (self.planted_fraction * self.query_count as f64).round() as usize
    }

    fn check(&self) -> Result<()> {
        let refuse = |m: String| Err(Error::SynthRefused(m));
        if self.dim < MIN_DIM {
            return refuse(format!(
                "dimension {} is too small to separate planted targets (minimum {MIN_DIM})",
                self.dim
            ));
        }
        if self.query_count == 0 {
            return refuse("query count must be positive".into());
        }
        if self.gallery_count < 2 {
            return refuse("gallery needs at least two items".into());
        }
        if !(0.0..=1.0).contains(&self.planted_fraction) {
            return refuse(format!("planted fraction {} is outside [0, 1]", self.planted_fraction));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return refuse(format!("noise {} must be finite and non-negative", self.noise));
        }
        if self.planted_count() > self.gallery_count {
            return refuse(format!(
                "{} planted queries need at least as many gallery items, got {}",
                self.planted_count(),
                self.gallery_count
            ));
        }
        if self.categories.len() > self.query_count {
            return refuse("more categories than queries".into());
        }
        Ok(())
    }
}

/// Builds the bundle described by `spec`. Same spec, same bytes.
pub fn synth_bundle(spec: &SynthSpec) -> Result<Bundle> {
    synth_with_plan(spec).map(|(b, _)| b)
}

/// Like [`synth_bundle`], also returning the ascending indices of the
/// planted queries.
pub fn synth_with_plan(spec: &SynthSpec) -> Result<(Bundle, Vec<usize>)> {
    spec.check()?;
    let plan = Plan::draw(spec);
    let mut state = State::new(spec, &plan);
    state.generate_all();
    if spec.signal == ChannelSet::ALL && !plan.planted.is_empty() {
        state.separate()?;
    }
    let bundle = state.into_bundle(plan.annotations.clone());
    Ok((bundle, plan.planted))
}

/// Random structure drawn from the master stream: which queries are planted,
/// who owns which gallery rows, and all annotations.
struct Plan {
    planted: Vec<usize>,
    /// Planted query owning each gallery item, if any.
    owner: Vec<Option<usize>>,
    annotations: Vec<Annotation>,
}

impl Plan {
    fn draw(spec: &SynthSpec) -> Self {
        let (k, q) = (spec.gallery_count, spec.query_count);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let single = spec.protocol == Protocol::SingleGt;

        let mut planted: Vec<usize> = index::sample(&mut rng, q, spec.planted_count()).into_vec();
        planted.sort_unstable();
        let mut is_planted = vec![false; q];
        for &j in &planted {
            is_planted[j] = true;
        }

        let mut pool: Vec<usize> = (0..k).collect();
        pool.shuffle(&mut rng);
        let mut next = 0;
        let mut owner = vec![None; k];
        let mut remaining = planted.len();
        let mut gts = vec![Vec::new(); q];
        for j in 0..q {
            let gt = if is_planted[j] {
                remaining -= 1;
                let spare = k - next - remaining;
                let n = if single { 1 } else { rng.random_range(1..=3usize).min(spare) };
                let ids = pool[next..next + n].to_vec();
                next += n;
                for &i in &ids {
                    owner[i] = Some(j);
                }
                ids
            } else {
                let n = if single { 1 } else { rng.random_range(1..=3usize).min(k - 1) };
                index::sample(&mut rng, k, n).into_vec()
            };
            let mut gt = gt;
            gt.sort_unstable();
            gts[j] = gt;
        }

        let annotations = gts
            .into_iter()
            .map(|gt_ids| {
                let reference_id = loop {
                    let r = rng.random_range(0..k);
                    if !gt_ids.contains(&r) {
                        break r;
                    }
                };
                let subset_ids = single.then(|| {
                    let size = spec.subset_size.clamp(1, k);
                    let mut s = gt_ids.clone();
                    while s.len() < size {
                        let r = rng.random_range(0..k);
                        if !s.contains(&r) {
                            s.push(r);
                        }
                    }
                    s.sort_unstable();
                    s
                });
                Annotation {
                    gt_ids,
                    reference_id: Some(reference_id),
                    subset_ids,
                }
            })
            .collect();
        Self {
            planted,
            owner,
            annotations,
        }
    }
}

#[derive(Clone, Copy)]
#[repr(u64)]
enum Stream {
    QueryDirection = 1,
    QueryNoise = 2,
    ItemDirection = 3,
    ItemNoise = 4,
}

fn rng_for(seed: u64, stream: Stream, round: u32, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 60) | (u64::from(round) << 40) | index as u64);
    rng
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn normalize_into(v: &[f64], out: &mut [f32]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for (o, x) in out.iter_mut().zip(v) {
        *o = (x / n) as f32;
    }
}

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v = gaussian(rng, dim);
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Writes `normalize(dir + noise * n)` with `n ~ N(0, I / dim)`, or a fresh
/// random unit vector when `dir` is `None`.
fn observe(rng: &mut ChaCha8Rng, dir: Option<&[f64]>, noise: f64, out: &mut [f32]) {
    let dim = out.len();
    let n = gaussian(rng, dim);
    match dir {
        Some(d) => {
            let s = noise / (dim as f64).sqrt();
            let v: Vec<f64> = d.iter().zip(&n).map(|(a, b)| a + s * b).collect();
            normalize_into(&v, out);
        }
        None => normalize_into(&n, out),
    }
}

struct State<'a> {
    spec: &'a SynthSpec,
    plan: &'a Plan,
    item_round: Vec<u32>,
    query_round: Vec<u32>,
    tv: Vec<f32>,
    tc: Vec<f32>,
    qv: Vec<f32>,
    qf: Vec<f32>,
    qm: Vec<f32>,
}

impl<'a> State<'a> {
    fn new(spec: &'a SynthSpec, plan: &'a Plan) -> Self {
        let (k, q, d) = (spec.gallery_count, spec.query_count, spec.dim);
        Self {
            spec,
            plan,
            item_round: vec![0; k],
            query_round: vec![0; q],
            tv: vec![0.0; k * d],
            tc: vec![0.0; k * spec.captions_per_target * d],
            qv: vec![0.0; q * d],
            qf: vec![0.0; q * d],
            qm: vec![0.0; q * spec.captions_per_query * d],
        }
    }

    fn query_direction(&self, j: usize) -> Vec<f64> {
        let mut rng = rng_for(self.spec.seed, Stream::QueryDirection, self.query_round[j], j);
        unit(&mut rng, self.spec.dim)
    }

    fn generate_all(&mut self) {
        let items: Vec<usize> = (0..self.spec.gallery_count).collect();
        let queries: Vec<usize> = (0..self.spec.query_count).collect();
        self.regenerate(&items, &queries);
    }

    /// Redraws the given gallery items and queries from their current rounds.
    fn regenerate(&mut self, items: &[usize], queries: &[usize]) {
        let spec = self.spec;
        let d = spec.dim;
        let (nt, nq) = (spec.captions_per_target, spec.captions_per_query);
        let has = |c: Channel| spec.signal.contains(c);

        let mut dirs: Vec<Option<Vec<f64>>> = vec![None; spec.query_count];
        let needed = items
            .iter()
            .filter_map(|&i| self.plan.owner[i])
            .chain(queries.iter().copied());
        for j in needed {
            if dirs[j].is_none() {
                dirs[j] = Some(self.query_direction(j));
            }
        }

        let fresh: Vec<(usize, Vec<f32>, Vec<f32>)> = items
            .par_iter()
            .map(|&i| {
                let round = self.item_round[i];
                let dir = match self.plan.owner[i] {
                    Some(j) => dirs[j].clone().expect("direction drawn"),
                    None => unit(&mut rng_for(spec.seed, Stream::ItemDirection, round, i), d),
                };
                let mut rng = rng_for(spec.seed, Stream::ItemNoise, round, i);
                let mut tv = vec![0.0; d];
                observe(&mut rng, has(Channel::Tv).then_some(&dir[..]), spec.noise, &mut tv);
                let mut tc = vec![0.0; nt * d];
                for cap in tc.chunks_exact_mut(d) {
                    observe(&mut rng, has(Channel::Tc).then_some(&dir[..]), spec.noise, cap);
                }
                (i, tv, tc)
            })
            .collect();
        for (i, tv, tc) in fresh {
            self.tv[i * d..(i + 1) * d].copy_from_slice(&tv);
            self.tc[i * nt * d..(i + 1) * nt * d].copy_from_slice(&tc);
        }

        let fresh: Vec<QueryRows> = queries
            .par_iter()
            .map(|&j| {
                let dir = dirs[j].as_deref().expect("direction drawn");
                let mut rng = rng_for(spec.seed, Stream::QueryNoise, self.query_round[j], j);
                let mut qv = vec![0.0; d];
                let mut qf = vec![0.0; d];
                let mut qm = vec![0.0; nq * d];
                observe(&mut rng, has(Channel::Qv).then_some(dir), spec.noise, &mut qv);
                observe(&mut rng, has(Channel::Qf).then_some(dir), spec.noise, &mut qf);
                for cap in qm.chunks_exact_mut(d) {
                    observe(&mut rng, has(Channel::Qm).then_some(dir), spec.noise, cap);
                }
                (j, qv, qf, qm)
            })
            .collect();
        for (j, qv, qf, qm) in fresh {
            self.qv[j * d..(j + 1) * d].copy_from_slice(&qv);
            self.qf[j * d..(j + 1) * d].copy_from_slice(&qf);
            self.qm[j * nq * d..(j + 1) * nq * d].copy_from_slice(&qm);
        }
    }

    fn channels(&self) -> (QueryChannels, GalleryChannels) {
        let s = self.spec;
        let (k, q, d) = (s.gallery_count, s.query_count, s.dim);
        let m = |rows, data: &Vec<f32>| Matrix::new(rows, d, data.clone()).expect("shape");
        let t = |rows, caps, data: &Vec<f32>| {
            CaptionTensor::new(rows, caps, d, data.clone()).expect("shape")
        };
        (
            QueryChannels {
                qv: m(q, &self.qv),
                qf: m(q, &self.qf),
                qm: t(q, s.captions_per_query, &self.qm),
            },
            GalleryChannels {
                tv: m(k, &self.tv),
                tc: t(k, s.captions_per_target, &self.tc),
            },
        )
    }

    /// Regenerates offending rows until every planted query ranks all of its
    /// targets strictly above every other gallery row by `SEPARATION`.
    fn separate(&mut self) -> Result<()> {
        let mut mask = ChannelSet::ALL;
        if self.spec.captions_per_query == 0 {
            mask = mask.without(Channel::Qm);
        }
        if self.spec.captions_per_target == 0 {
            mask = mask.without(Channel::Tc);
        }
        let weights = FusionWeights::default().with_mask(mask);
        let c = weights.coefficients()?;
        for _ in 0..MAX_ROUNDS {
            let (queries, gallery) = self.channels();
            let fq = PreparedQueries::new(&queries, &c, None, true)?.fuse(&c)?;
            let fg = PreparedGallery::new(&gallery, &c, None, true)?.fuse(&c)?;
            let (items, redo) = self.violations(&normalized(fq), &normalized(fg));
            if items.is_empty() && redo.is_empty() {
                return Ok(());
            }
            for &i in &items {
                self.item_round[i] += 1;
            }
            for &j in &redo {
                self.query_round[j] += 1;
            }
            let mut all_items = items;
            for &j in &redo {
                all_items.extend((0..self.spec.gallery_count).filter(|&i| self.plan.owner[i] == Some(j)));
            }
            all_items.sort_unstable();
            all_items.dedup();
            self.regenerate(&all_items, &redo);
        }
        Err(Error::SynthRefused(format!(
            "planted targets still not separated after {MAX_ROUNDS} rounds; \
             increase the dimension or reduce the noise"
        )))
    }

    /// Unowned rows to redraw, and planted queries to redraw with their targets.
    fn violations(&self, fq: &Matrix, fg: &Matrix) -> (Vec<usize>, Vec<usize>) {
        let d = self.spec.dim;
        let slack = SEPARATION + 2.0 * error_margin(d);
        let planted = &self.plan.planted;
        let found: Vec<(Vec<usize>, Vec<usize>)> = planted
            .par_chunks(64)
            .map(|panel| {
                let refs: Vec<&[f32]> = panel.iter().map(|&j| fq.row(j)).collect();
                let k = fg.rows();
                let mut scores = vec![0.0f32; panel.len() * k];
                scan(&refs, fg.as_slice(), d, |qi, r, s| scores[qi * k + r] = s);
                let mut items = Vec::new();
                let mut redo = Vec::new();
                for (qi, &j) in panel.iter().enumerate() {
                    let row = &scores[qi * k..(qi + 1) * k];
                    let gt = &self.plan.annotations[j].gt_ids;
                    let floor = gt.iter().map(|&i| row[i]).fold(f32::INFINITY, f32::min) - slack;
                    for (i, &s) in row.iter().enumerate() {
                        if s >= floor && !gt.contains(&i) {
                            match self.plan.owner[i] {
                                None => items.push(i),
                                Some(_) => redo.push(j),
                            }
                        }
                    }
                }
                (items, redo)
            })
            .collect();
        let (mut items, mut redo): (Vec<usize>, Vec<usize>) = found.into_iter().fold(
            (Vec::new(), Vec::new()),
            |(mut a, mut b), (x, y)| {
                a.extend(x);
                b.extend(y);
                (a, b)
            },
        );
        items.sort_unstable();
        items.dedup();
        redo.sort_unstable();
        redo.dedup();
        (items, redo)
    }

    fn into_bundle(self, annotations: Vec<Annotation>) -> Bundle {
        let (queries, gallery) = self.channels();
        let s = self.spec;
        let categories = (!s.categories.is_empty()).then(|| {
            let n = s.categories.len();
            let q = s.query_count;
            s.categories
                .iter()
                .enumerate()
                .map(|(c, name)| Category::new(name.clone(), c * q / n, (c + 1) * q / n))
                .collect()
        });
        Bundle::from_parts(s.dataset.clone(), s.protocol, categories, queries, gallery, annotations)
    }
}

fn normalized(mut m: Matrix) -> Matrix {
    let d = m.cols();
    for row in m.as_mut_slice().chunks_exact_mut(d) {
        let n = row.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
        if n > 0.0 {
            for x in row {
                *x = (f64::from(*x) / n) as f32;
            }
        }
    }
    m
}
