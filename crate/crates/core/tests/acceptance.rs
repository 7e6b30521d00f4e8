//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL line
//! each, and exits non-zero if any fails. Tolerances are the constants below.

use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use sdaie::augment::{
    random_augment, sample_plan, BLUR_SIGMA_RANGE, DOWNSAMPLE_RATIO_RANGE, JPEG_QUALITY_RANGE,
};
use sdaie::backbone::{ArchConfig, Backbone, ForwardOptions, PatchMode};
use sdaie::binary::{cache_reference_features, loss_reg, reference_stages, train_binary, BinaryConfig};
use sdaie::checkpoint::Model;
use sdaie::dataset::{DatasetManifest, ImageStore, Label, MemoryStore};
use sdaie::eval::{evaluate, fit_one_class, photographic_features, score_manifest, Detector};
use sdaie::filterbank::{apply_bank, build_bank, Prototype, BANK_SIZE};
use sdaie::gmm::{calibrate_threshold, e_step, feature_matrix, fit_gmm, GmmConfig};
use sdaie::imaging::Image;
use sdaie::metrics::{compute_accuracy, compute_ap};
use sdaie::nn::adam::AdamConfig;
use sdaie::nn::conv::covariance_tokens;
use sdaie::nn::Module;
use sdaie::pretext::{loss_rank, rank_probability, rank_with_grad, train_pretext, PretextConfig};
use sdaie::rng::seeded;
use sdaie::synth::{build_suite, GeneratorFamily, SuiteSpec};

const FILTER_BANK_BUDGET: Duration = Duration::from_secs(1);
const PERMUTATION_IMAGES: usize = 100;
const PERMUTATION_REL_TOL: f64 = 1e-5;
const THURSTONE_PAIRS: usize = 10_000;
const THURSTONE_TOL: f64 = 1e-12;
const THURSTONE_GRAD_CASES: usize = 100;
const THURSTONE_GRAD_REL_TOL: f64 = 1e-4;
const EM_DROP_TOL: f64 = 1e-8;
const EM_MEAN_TOL: f64 = 0.1;
const EM_ROWSUM_TOL: f64 = 1e-12;
const EM_BUDGET: Duration = Duration::from_secs(30);
const QUANTILE_TOL: f64 = 1e-9;
const QUANTILE_RHO: f64 = 0.02;
const AP_MAX_LEN: usize = 8;
const GRAD_PARAMS: usize = 60;
const GRAD_REL_TOL: f64 = 1e-3;
/// Both derivatives below this are treated as zero.
const GRAD_ABS_FLOOR: f64 = 1e-8;
const E2E_CAMERA: usize = 2000;
const E2E_GENERATED: usize = 2000;
const E2E_ITERATIONS: u64 = 2000;
const E2E_K: usize = 5;
const E2E_MIN_AP: f64 = 0.90;
const E2E_MIN_ACC: f64 = 0.80;
const E2E_BUDGET: Duration = Duration::from_secs(15 * 60);
const GAMMA_SEEDS: u64 = 5;
const GAMMA_ITERATIONS: u64 = 60;
const GAMMA_EVAL_PER_CLASS: usize = 500;
const AUGMENT_SEEDS: u64 = 10_000;
const AUGMENT_SIGMAS: f64 = 3.0;

/// Desk-scale architecture for the end-to-end runs.
fn desk_arch() -> ArchConfig {
    ArchConfig {
        patch_size: 16,
        train_patches: 4,
        channels: 12,
        conv_blocks: 4,
        encoder_layers: 1,
        attention_heads: 2,
        ffn_width: 64,
    }
}

const DESK_IMAGE_SIDE: usize = 48;

type Verdict = Result<String, String>;

struct Suite {
    passed: usize,
    failed: usize,
}

impl Suite {
    fn run(&mut self, name: &str, f: impl FnOnce() -> Verdict) {
        let t = Instant::now();
        let outcome = f();
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => {
                self.passed += 1;
                println!("PASS  {name} ({secs:.1}s): {detail}");
            }
            Err(detail) => {
                self.failed += 1;
                println!("FAIL  {name} ({secs:.1}s): {detail}");
            }
        }
    }
}

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn filter_bank() -> Verdict {
    let t = Instant::now();
    let bank = build_bank();
    let counts: Vec<usize> = Prototype::ALL
        .iter()
        .map(|p| bank.iter().filter(|k| k.prototype == *p).count())
        .collect();
    // two prototypes × 8, one × 4, two × 4, two singletons
    let decomposition = counts == [8, 8, 4, 4, 4, 1, 1];
    let zero_sum = bank.iter().all(|k| k.tap_sum() == 0);
    let mut constant_zero = true;
    for v in [0.0f32, 0.37, 1.0] {
        let res = apply_bank(&Image::filled(16, 16, v)).map_err(|e| e.to_string())?;
        constant_zero &= res.data.iter().all(|&r| r == 0.0);
    }
    let elapsed = t.elapsed();
    check(
        bank.len() == BANK_SIZE && bank.len() == 30 && decomposition && zero_sum && constant_zero && elapsed < FILTER_BANK_BUDGET,
        format!(
            "{} kernels, per-prototype counts {counts:?}, zero-sum {zero_sum}, constant response exactly 0 {constant_zero}, {elapsed:?}",
            bank.len()
        ),
    )
}

fn permutation_invariance() -> Verdict {
    let bb = Backbone::<f32>::new(ArchConfig::default(), 17).map_err(|e| e.to_string())?;
    let d = bb.token_dim();
    let mut rng = seeded(99);
    let mut worst = 0.0f64;
    for i in 0..PERMUTATION_IMAGES {
        let img = Image::from_fn(96, 96, |_, _, _| rng.random::<f32>());
        let batch = bb.batch(&[bb.patches(&img, PatchMode::Train, i as u64)]).map_err(|e| e.to_string())?;
        let conv = bb.conv_encode(&batch.residuals).map_err(|e| e.to_string())?;
        let (tokens, _) = covariance_tokens(&conv).map_err(|e| e.to_string())?;
        let n = tokens.len() / d;
        let v = bb.transformer_aggregate(&tokens).map_err(|e| e.to_string())?;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let permuted: Vec<f32> = order.iter().flat_map(|&r| tokens[r * d..(r + 1) * d].iter().copied()).collect();
        let w = bb.transformer_aggregate(&permuted).map_err(|e| e.to_string())?;
        let diff: f64 = v.iter().zip(&w).map(|(a, b)| f64::from(a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = v.iter().map(|a| f64::from(*a).powi(2)).sum::<f64>().sqrt();
        worst = worst.max(diff / norm);
    }
    check(
        worst <= PERMUTATION_REL_TOL,
        format!("{PERMUTATION_IMAGES} images × 16 tokens at d={d}, worst relative change {worst:.2e} (tol {PERMUTATION_REL_TOL:e})"),
    )
}

fn thurstone() -> Verdict {
    let mut rng = seeded(5);
    let mut worst_sum = 0.0f64;
    for _ in 0..THURSTONE_PAIRS {
        let x = 3.0 * Distribution::<f64>::sample(&StandardNormal, &mut rng);
        let y = 3.0 * Distribution::<f64>::sample(&StandardNormal, &mut rng);
        worst_sum = worst_sum.max((rank_probability(x, y) + rank_probability(y, x) - 1.0).abs());
    }
    let mut worst_tie = 0.0f64;
    for _ in 0..100 {
        let s: f64 = rng.random_range(-50.0..50.0);
        for label in [0, 1] {
            worst_tie = worst_tie.max((loss_rank(s, s, label) - std::f64::consts::LN_2).abs());
        }
    }
    let mut worst_grad = 0.0f64;
    let h = 1e-6;
    for i in 0..THURSTONE_GRAD_CASES {
        let delta: f64 = rng.random_range(-4.0..4.0);
        let label = (i % 2) as u8;
        let fd = (loss_rank(delta + h, 0.0, label) - loss_rank(delta - h, 0.0, label)) / (2.0 * h);
        let g = rank_with_grad(delta, label).1;
        worst_grad = worst_grad.max((fd - g).abs() / fd.abs().max(g.abs()));
    }
    check(
        worst_sum <= THURSTONE_TOL && worst_tie <= THURSTONE_TOL && worst_grad <= THURSTONE_GRAD_REL_TOL,
        format!(
            "|p(x,y)+p(y,x)−1| ≤ {worst_sum:.1e} over {THURSTONE_PAIRS} pairs; |loss(s,s)−ln2| ≤ {worst_tie:.1e}; gradient rel. err ≤ {worst_grad:.1e} on {THURSTONE_GRAD_CASES} cases"
        ),
    )
}

fn worst_em_drop(ll: &[f64]) -> f64 {
    ll.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::min)
}

/// Two Gaussians 10σ apart in 8 dimensions; returns samples and true means.
fn two_clusters(seed: u64) -> (Array2<f64>, [Vec<f64>; 2]) {
    let mut rng = seeded(seed);
    let d = 8;
    let dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    let m0: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let m1: Vec<f64> = m0.iter().zip(&dir).map(|(a, u)| a + 10.0 * u / norm).collect();
    let mut x = Array2::zeros((2000, d));
    for i in 0..2000 {
        let m = if i % 2 == 0 { &m0 } else { &m1 };
        for j in 0..d {
            let z: f64 = StandardNormal.sample(&mut rng);
            x[[i, j]] = m[j] + z;
        }
    }
    (x, [m0, m1])
}

fn gmm_em() -> Verdict {
    let t = Instant::now();
    let mut worst_drop = 0.0f64;
    let mut worst_ll_drop = 0.0f64;
    let mut worst_mean = 0.0f64;
    let mut worst_rowsum = 0.0f64;
    let mut fits = 0;
    for seed in 0..3 {
        let (x, truth) = two_clusters(100 + seed);
        let (model, report) = fit_gmm(x.view(), &GmmConfig { k: 2, seed, ..Default::default() }).map_err(|e| e.to_string())?;
        fits += 1;
        worst_drop = worst_drop.min(worst_em_drop(&report.objective));
        worst_ll_drop = worst_ll_drop.min(worst_em_drop(&report.log_likelihood));
        // match each true mean to its nearest component
        for m in &truth {
            let err = (0..2)
                .map(|k| model.mu.row(k).iter().zip(m).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
                .fold(f64::INFINITY, f64::min);
            worst_mean = worst_mean.max(err);
        }
        let (q, _) = e_step(x.view(), &model).map_err(|e| e.to_string())?;
        for row in q.rows() {
            worst_rowsum = worst_rowsum.max((row.sum() - 1.0).abs());
        }
        for k in [1, 3, 5] {
            let (_, r) = fit_gmm(x.view(), &GmmConfig { k, seed, ..Default::default() }).map_err(|e| e.to_string())?;
            fits += 1;
            worst_drop = worst_drop.min(worst_em_drop(&r.objective));
            worst_ll_drop = worst_ll_drop.min(worst_em_drop(&r.log_likelihood));
        }
    }
    let elapsed = t.elapsed();
    check(
        worst_drop >= -EM_DROP_TOL && worst_mean <= EM_MEAN_TOL && worst_rowsum <= EM_ROWSUM_TOL && elapsed < EM_BUDGET,
        format!(
            "{fits} fits, largest per-iteration drop of the EM objective {:.1e} (plain LL {:.1e}); mean error (max-abs coordinate) ≤ {worst_mean:.3}; row sums within {worst_rowsum:.1e}; {elapsed:.1?}",
            0.0 - worst_drop,
            0.0 - worst_ll_drop
        ),
    )
}

/// Independent order-statistic interpolation.
fn quantile_oracle(scores: &[f64], rho: f64) -> f64 {
    let mut s = scores.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = rho * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] * (hi as f64 - pos) + s[hi] * (pos - lo as f64) + if lo == hi { s[lo] } else { 0.0 }
}

fn quantile_threshold() -> Verdict {
    let ramp: Vec<f64> = (1..=100).map(f64::from).collect();
    let tau = calibrate_threshold(&ramp, QUANTILE_RHO).map_err(|e| e.to_string())?;
    let oracle = quantile_oracle(&ramp, QUANTILE_RHO);
    let mut worst_fraction = 0.0f64;
    let mut max_oracle_gap = (tau - oracle).abs();
    let mut fits = 0;
    for seed in 0..3 {
        let (x, _) = two_clusters(200 + seed);
        for k in [1, 2, 5] {
            let (model, _) = fit_gmm(x.view(), &GmmConfig { k, seed, ..Default::default() }).map_err(|e| e.to_string())?;
            let scores = model.score_batch(x.view()).map_err(|e| e.to_string())?;
            max_oracle_gap = max_oracle_gap.max((model.tau - quantile_oracle(&scores, QUANTILE_RHO)).abs());
            let below = scores.iter().filter(|&&s| s < model.tau).count();
            worst_fraction = worst_fraction.max(below as f64 / scores.len() as f64);
            fits += 1;
        }
    }
    check(
        (tau - oracle).abs() <= QUANTILE_TOL && max_oracle_gap <= QUANTILE_TOL && worst_fraction <= QUANTILE_RHO,
        format!("τ(1..100) = {tau} (oracle {oracle}); {fits} fits: largest training fraction below τ {worst_fraction:.4}"),
    )
}

fn toy_arch() -> ArchConfig {
    ArchConfig {
        patch_size: 16,
        train_patches: 4,
        channels: 4,
        conv_blocks: 2,
        encoder_layers: 1,
        attention_heads: 2,
        ffn_width: 8,
    }
}

fn regularizer() -> Verdict {
    let (manifest, store) = build_suite(&SuiteSpec {
        size: 32,
        camera: 6,
        generated: vec![(GeneratorFamily::Smooth, 6)],
        seed: 3,
    })
    .map_err(|e| e.to_string())?;
    let model = Model {
        kind: sdaie::checkpoint::ModelKind::Pretext,
        backbone: Backbone::new(toy_arch(), 8).map_err(|e| e.to_string())?,
        heads: Vec::new(),
        tags: None,
        iteration: 0,
        parent_digest: None,
    };
    let cache = cache_reference_features(&manifest, &model, &store).map_err(|e| e.to_string())?;
    let mut max_live = 0.0f64;
    for e in &manifest.entries {
        let live = reference_stages(&model, &e.image_path, &store.load(&e.image_path).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        max_live = max_live.max(loss_reg(&live, cache.get(&e.image_path).unwrap()).map_err(|e| e.to_string())?);
    }
    let cfg = BinaryConfig {
        iterations: 1,
        batch_size: 12,
        augment: false,
        ..Default::default()
    };
    let run = train_binary(&manifest, &store, &model, &cache, &cfg).map_err(|e| e.to_string())?;
    let first_step = run.log[0].1.reg;
    let mut ones_ok = true;
    for d in [1usize, 7, 528] {
        ones_ok &= loss_reg(&[vec![1.0f64; d]], &[vec![0.0f32; d]]).map_err(|e| e.to_string())? == 1.0;
        ones_ok &= loss_reg(&[vec![1.5f64; d]], &[vec![0.5f32; d]]).map_err(|e| e.to_string())? == 1.0;
    }
    check(
        max_live == 0.0 && first_step == 0.0 && ones_ok,
        format!(
            "at θ*: max loss_reg over {} images {max_live:e}, first training step {first_step:e}; all-ones difference gives exactly 1.0: {ones_ok}",
            manifest.len()
        ),
    )
}

/// Brute force over distinct thresholds: no sorting of items, same float operations.
fn ap_oracle(scores: &[f64], positive: &[bool]) -> f64 {
    let total = positive.iter().filter(|&&p| p).count();
    let mut ap = 0.0;
    let mut t = f64::INFINITY;
    // step down to the next distinct score below `t`
    loop {
        let next = scores.iter().copied().filter(|&s| s < t).fold(f64::NEG_INFINITY, f64::max);
        if next == f64::NEG_INFINITY {
            break;
        }
        t = next;
        let (mut seen, mut tp, mut gained) = (0usize, 0usize, 0usize);
        for (&s, &p) in scores.iter().zip(positive) {
            seen += usize::from(s >= t);
            tp += usize::from(s >= t && p);
            gained += usize::from(s == t && p);
        }
        if gained > 0 {
            ap += gained as f64 * (tp as f64 / seen as f64);
        }
    }
    ap / total as f64
}

/// AP as an exact fraction over lcm(1..=8) = 840.
fn ap_rational(scores: &[f64], positive: &[bool]) -> (u64, u64) {
    let total = positive.iter().filter(|&&p| p).count() as u64;
    let mut num = 0u64;
    for (i, &si) in scores.iter().enumerate() {
        if positive[i] {
            let seen = scores.iter().filter(|&&s| s >= si).count() as u64;
            let tp = scores.iter().zip(positive).filter(|(&s, &p)| s >= si && p).count() as u64;
            num += tp * (840 / seen);
        }
    }
    (num, 840 * total)
}

fn ap_exhaustive() -> Verdict {
    let mut configs = 0u64;
    let mut oracle_mismatch = 0u64;
    let mut rational_mismatch = 0u64;
    let mut scores = [0.0f64; AP_MAX_LEN];
    let mut positive = [false; AP_MAX_LEN];
    for n in 1..=AP_MAX_LEN {
        // every weak ordering: levels whose used values are exactly 0..k
        let mut levels = vec![0usize; n];
        loop {
            let max = *levels.iter().max().unwrap();
            let surjective = (0..=max).all(|l| levels.contains(&l));
            if surjective {
                for (s, &l) in scores.iter_mut().zip(&levels) {
                    *s = l as f64;
                }
                for mask in 1u32..(1 << n) {
                    for (i, p) in positive.iter_mut().take(n).enumerate() {
                        *p = mask & (1 << i) != 0;
                    }
                    let (s, p) = (&scores[..n], &positive[..n]);
                    let got = compute_ap(s, p).map_err(|e| e.to_string())?;
                    if got != ap_oracle(s, p) {
                        oracle_mismatch += 1;
                    }
                    let (num, den) = ap_rational(s, p);
                    if (got - num as f64 / den as f64).abs() > 1e-15 {
                        rational_mismatch += 1;
                    }
                    configs += 1;
                }
            }
            // next level assignment in base n
            let mut i = 0;
            while i < n && levels[i] == n - 1 {
                levels[i] = 0;
                i += 1;
            }
            if i == n {
                break;
            }
            levels[i] += 1;
        }
    }
    check(
        oracle_mismatch == 0 && rational_mismatch == 0,
        format!("{configs} score/label configurations up to length {AP_MAX_LEN}: {oracle_mismatch} differ from the brute-force oracle, {rational_mismatch} from the exact fraction"),
    )
}

fn backbone_gradient() -> Verdict {
    let mut bb = Backbone::<f64>::new(toy_arch(), 21).map_err(|e| e.to_string())?;
    let mut rng = seeded(22);
    let img = Image::from_fn(40, 40, |_, _, _| rng.random::<f32>());
    let per = vec![bb.patches(&img, PatchMode::Train, 4)];
    let batch = bb.batch(&per).map_err(|e| e.to_string())?;
    let fwd = bb.forward(&batch, ForwardOptions { stages: true, tape: true }).map_err(|e| e.to_string())?;
    let stage_w: Vec<Vec<f64>> = fwd
        .stages
        .as_ref()
        .unwrap()
        .iter()
        .map(|s| (0..s.len()).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let feat_w: Vec<f64> = (0..bb.token_dim()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let objective = |b: &Backbone<f64>| -> f64 {
        let out = b.forward(&batch, ForwardOptions { stages: true, tape: false }).unwrap();
        let stages: f64 = out.stages.unwrap().iter().zip(&stage_w).map(|(s, w)| s.iter().zip(w).map(|(a, b)| a * b).sum::<f64>()).sum();
        stages + out.features.iter().zip(&feat_w).map(|(a, b)| a * b).sum::<f64>()
    };
    bb.zero_grad();
    bb.backward(fwd.tape.unwrap(), &feat_w, Some(&stage_w));
    let mut params = Vec::new();
    bb.visit(&mut |p| params.push((p.name.clone(), p.len(), p.grad.clone())));
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut worst_name = String::new();
    for _ in 0..GRAD_PARAMS {
        let t = rng.random_range(0..params.len());
        let i = rng.random_range(0..params[t].1);
        let eval = |delta: f64| {
            let mut b = bb.clone();
            let mut k = 0;
            b.visit_mut(&mut |q| {
                if k == t {
                    q.value[i] += delta;
                }
                k += 1;
            });
            objective(&b)
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        let g = params[t].2[i];
        let scale = fd.abs().max(g.abs());
        let rel = if scale < GRAD_ABS_FLOOR { 0.0 } else { (fd - g).abs() / scale };
        if rel > worst {
            worst = rel;
            worst_name = format!("{}[{i}]", params[t].0);
        }
    }
    check(
        worst <= GRAD_REL_TOL,
        format!("{GRAD_PARAMS} sampled parameters of a 4-patch forward, worst relative error {worst:.2e} ({worst_name})"),
    )
}

struct EndToEnd {
    model: Model,
    store: MemoryStore,
    train: DatasetManifest,
    test_camera: DatasetManifest,
}

fn split(manifest: &DatasetManifest, label: Label) -> (Vec<sdaie::dataset::ManifestEntry>, Vec<sdaie::dataset::ManifestEntry>) {
    let all: Vec<_> = manifest.entries.iter().filter(|e| e.label == label).cloned().collect();
    let half = all.len() / 2;
    (all[..half].to_vec(), all[half..].to_vec())
}

fn end_to_end(shared: &mut Option<EndToEnd>) -> Verdict {
    let t = Instant::now();
    let (manifest, store) = build_suite(&SuiteSpec {
        size: DESK_IMAGE_SIDE,
        camera: E2E_CAMERA,
        generated: vec![(GeneratorFamily::Smooth, E2E_GENERATED)],
        seed: 2024,
    })
    .map_err(|e| e.to_string())?;
    let (cam_train, cam_test) = split(&manifest, Label::Photographic);
    let (gen_train, gen_test) = split(&manifest, Label::Generated);
    let pretext_set = DatasetManifest::from_entries(cam_train.clone()).map_err(|e| e.to_string())?;
    let cfg = PretextConfig {
        arch: desk_arch(),
        iterations: E2E_ITERATIONS,
        batch_size: 32,
        micro_batch: 32,
        adam: AdamConfig { lr: 1e-3, ..Default::default() },
        seed: 1,
        ..Default::default()
    };
    let run = train_pretext(&pretext_set, &store, &cfg, None).map_err(|e| e.to_string())?;
    let pretext_secs = t.elapsed().as_secs_f64();
    let gmm_cfg = GmmConfig { k: E2E_K, rho: QUANTILE_RHO, seed: 1, ..Default::default() };
    let (gmm, fit) = fit_one_class(&pretext_set, &store, &run.model, &gmm_cfg).map_err(|e| e.to_string())?;
    let train_scores = gmm
        .score_batch(feature_matrix(&photographic_features(&pretext_set, &store, &run.model).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?.view())
        .map_err(|e| e.to_string())?;
    let below = train_scores.iter().filter(|&&s| s < gmm.tau).count() as f64 / train_scores.len() as f64;
    let detector = Detector::new_one_class(run.model.clone(), gmm).map_err(|e| e.to_string())?;
    let mut test_entries = cam_test.clone();
    test_entries.extend(gen_test);
    let test = DatasetManifest::from_entries(test_entries).map_err(|e| e.to_string())?;
    let summary = evaluate(&test, &store, &detector, None).map_err(|e| e.to_string())?;
    let ap = summary.mean_ap.unwrap_or(0.0);
    let acc = summary.mean_accuracy;
    let elapsed = t.elapsed();
    let mut train_entries = cam_train;
    train_entries.extend(gen_train);
    *shared = Some(EndToEnd {
        model: run.model,
        store,
        train: DatasetManifest::from_entries(train_entries).map_err(|e| e.to_string())?,
        test_camera: DatasetManifest::from_entries(cam_test).map_err(|e| e.to_string())?,
    });
    let drop = 0.0 - worst_em_drop(&fit.objective);
    let ll_drop = 0.0 - worst_em_drop(&fit.log_likelihood);
    check(
        ap >= E2E_MIN_AP && acc >= E2E_MIN_ACC && elapsed < E2E_BUDGET && below <= QUANTILE_RHO && drop <= EM_DROP_TOL,
        format!(
            "held-out AP {ap:.4} (≥ {E2E_MIN_AP}), Acc {acc:.4} (≥ {E2E_MIN_ACC}); photographs kept {:.4}; EM {} iterations, largest objective drop {drop:.1e} (plain LL {ll_drop:.1e}), training fraction below τ {below:.4}; pretext {pretext_secs:.0}s, total {elapsed:.0?}",
            summary.photographic_accuracy.unwrap_or(0.0),
            fit.iterations
        ),
    )
}

fn regularizer_benefit(shared: &Option<EndToEnd>) -> Verdict {
    let e2e = shared.as_ref().ok_or("end-to-end run did not produce a pretext model")?;
    let (other, other_store) = build_suite(&SuiteSpec {
        size: DESK_IMAGE_SIDE,
        camera: 0,
        generated: vec![(GeneratorFamily::Upsampled, GAMMA_EVAL_PER_CLASS)],
        seed: 77,
    })
    .map_err(|e| e.to_string())?;
    let cache = cache_reference_features(&e2e.train, &e2e.model, &e2e.store).map_err(|e| e.to_string())?;
    let cams: Vec<_> = e2e.test_camera.entries[..GAMMA_EVAL_PER_CLASS].to_vec();
    let mut by_gamma = Vec::new();
    for gamma in [0.0, 0.05] {
        let mut accs = Vec::new();
        for seed in 0..GAMMA_SEEDS {
            let cfg = BinaryConfig {
                iterations: GAMMA_ITERATIONS,
                batch_size: 16,
                gamma,
                seed,
                augment_min_side: desk_arch().patch_size,
                ..Default::default()
            };
            let run = train_binary(&e2e.train, &e2e.store, &e2e.model, &cache, &cfg).map_err(|e| e.to_string())?;
            if run.log.iter().any(|(_, r)| !r.reg.is_finite()) {
                return Err(format!("regularizer not finite at γ={gamma}, seed {seed}"));
            }
            let det = Detector::new_binary(run.model).map_err(|e| e.to_string())?;
            let photos = DatasetManifest::from_entries(cams.clone()).map_err(|e| e.to_string())?;
            let mut predicted = Vec::new();
            let mut truth = Vec::new();
            for s in score_manifest(&photos, &e2e.store, &det, None).map_err(|e| e.to_string())? {
                predicted.push(s.generated);
                truth.push(false);
            }
            for s in score_manifest(&other, &other_store, &det, None).map_err(|e| e.to_string())? {
                predicted.push(s.generated);
                truth.push(true);
            }
            accs.push(compute_accuracy(&predicted, &truth).map_err(|e| e.to_string())?);
        }
        by_gamma.push(accs);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (m0, m5) = (mean(&by_gamma[0]), mean(&by_gamma[1]));
    let fmt = |v: &[f64]| v.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>().join(" ");
    check(
        m5 >= m0,
        format!(
            "train camera vs smooth, test camera vs upsampled; mean cross-family Acc γ=0.05 {m5:.4} [{}] vs γ=0 {m0:.4} [{}]",
            fmt(&by_gamma[1]),
            fmt(&by_gamma[0])
        ),
    )
}

fn bin_check(counts: &[u64], n: u64) -> (bool, f64) {
    let p = 1.0 / counts.len() as f64;
    let expect = n as f64 * p;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    let worst = counts.iter().map(|&c| (c as f64 - expect).abs() / sd).fold(0.0, f64::max);
    (worst <= AUGMENT_SIGMAS, worst)
}

fn augmentation() -> Verdict {
    let mut quality = [0u64; 11];
    let mut sigma = [0u64; 10];
    let mut ratio = [0u64; 10];
    let mut flags = [0u64; 3];
    let mut in_range = true;
    for seed in 0..AUGMENT_SEEDS {
        let p = sample_plan(seed);
        in_range &= (JPEG_QUALITY_RANGE.0..=JPEG_QUALITY_RANGE.1).contains(&p.jpeg_quality)
            && (BLUR_SIGMA_RANGE.0..=BLUR_SIGMA_RANGE.1).contains(&p.sigma)
            && (DOWNSAMPLE_RATIO_RANGE.0..=DOWNSAMPLE_RATIO_RANGE.1).contains(&p.ratio);
        quality[usize::from(p.jpeg_quality.saturating_sub(90)).min(10)] += 1;
        sigma[((p.sigma * 10.0) as usize).min(9)] += 1;
        ratio[(((p.ratio - 0.25) / 0.075) as usize).min(9)] += 1;
        flags[0] += u64::from(p.apply_jpeg);
        flags[1] += u64::from(p.apply_downsample);
        flags[2] += u64::from(p.apply_blur);
        if p != sample_plan(seed) {
            return Err(format!("seed {seed} is not deterministic"));
        }
    }
    let ranges = JPEG_QUALITY_RANGE == (90, 100) && BLUR_SIGMA_RANGE == (0.0, 1.0) && DOWNSAMPLE_RATIO_RANGE == (0.25, 1.0);
    let (q_ok, q) = bin_check(&quality, AUGMENT_SEEDS);
    let (s_ok, s) = bin_check(&sigma, AUGMENT_SEEDS);
    let (r_ok, r) = bin_check(&ratio, AUGMENT_SEEDS);
    let flag_sd = (AUGMENT_SEEDS as f64 * 0.25).sqrt();
    let f = flags.iter().map(|&c| (c as f64 - AUGMENT_SEEDS as f64 / 2.0).abs() / flag_sd).fold(0.0, f64::max);
    let mut rng = seeded(8);
    let img = Image::from_fn(128, 128, |_, _, _| rng.random::<f32>());
    let mut same = true;
    for seed in 0..5 {
        same &= random_augment(&img, seed).map_err(|e| e.to_string())? == random_augment(&img, seed).map_err(|e| e.to_string())?;
    }
    check(
        in_range && ranges && q_ok && s_ok && r_ok && f <= AUGMENT_SIGMAS && same,
        format!(
            "{AUGMENT_SEEDS} seeds; worst bin deviation in σ units: quality {q:.2}, blur {s:.2}, ratio {r:.2}, apply flags {f:.2} (limit {AUGMENT_SIGMAS}); repeated seeds identical {same}"
        ),
    )
}

fn main() {
    // `cargo test` passes harness flags such as `--nocapture`; a name filter
    // selects criteria by substring.
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let wanted = |name: &str| filter.as_deref().is_none_or(|f| name.contains(f));
    let mut suite = Suite { passed: 0, failed: 0 };
    let start = Instant::now();
    if wanted("filter_bank") {
        suite.run("filter_bank", filter_bank);
    }
    if wanted("permutation_invariance") {
        suite.run("permutation_invariance", permutation_invariance);
    }
    if wanted("thurstone") {
        suite.run("thurstone", thurstone);
    }
    if wanted("gmm_em") {
        suite.run("gmm_em", gmm_em);
    }
    if wanted("quantile_threshold") {
        suite.run("quantile_threshold", quantile_threshold);
    }
    if wanted("regularizer_exact") {
        suite.run("regularizer_exact", regularizer);
    }
    if wanted("ap_exhaustive") {
        suite.run("ap_exhaustive", ap_exhaustive);
    }
    if wanted("backbone_gradient") {
        suite.run("backbone_gradient", backbone_gradient);
    }
    let mut shared = None;
    if wanted("synthetic_end_to_end") || wanted("regularizer_benefit") {
        suite.run("synthetic_end_to_end", || end_to_end(&mut shared));
    }
    if wanted("regularizer_benefit") {
        suite.run("regularizer_benefit", || regularizer_benefit(&shared));
    }
    if wanted("augmentation") {
        suite.run("augmentation", augmentation);
    }
    println!(
        "acceptance: {} passed, {} failed ({:.0?})",
        suite.passed,
        suite.failed,
        start.elapsed()
    );
    if suite.failed > 0 {
        std::process::exit(1);
    }
}
