//! Acceptance suite: ten numbered criteria covering recovery accuracy,
//! gradient correctness, encoding semantics, split hygiene, determinism,
//! and the sweep protocol. Each test prints one PASS line (or SKIP for the
//! optional dataset-backed check) with its measured numbers.
//!
//! Every tolerance is pinned as a named constant next to the criterion
//! that uses it.

use std::collections::HashSet;
use std::env;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use tempfile::TempDir;

use matten_core::baseline::{self, MlpRegressor, MlpTrainConfig, OneHotEncoder};
use matten_core::cpd::{self, CPModel, CPTrainConfig};
use matten_core::eval::{mae, run_experiment, ExperimentConfig, ModelSpec};
use matten_core::mat::Mat;
use matten_core::neat::{self, NeatModel, NeatTrainConfig};
use matten_core::neural::NetGrads;
use matten_core::rng::Rng;
use matten_core::sptensor::{DedupPolicy, ModeKind, Shape, SparseTensor};
use matten_core::tensorize::{tensorize, TensorizeConfig};
use matten_core::trainer::ValueStats;

// Criterion 1: recover a planted factorization from 20% of its entries.
const RECOVERY_OBSERVED_FRACTION: f64 = 0.2;
const RECOVERY_MAE_FACTOR: f64 = 0.05;
const RECOVERY_TIME_LIMIT: Duration = Duration::from_secs(60);

// Criterion 2: fit a fully observed rank-1 tensor almost exactly.
const EXACT_FIT_MAX_REL: f64 = 1e-3;
const EXACT_FIT_TIME_LIMIT: Duration = Duration::from_secs(10);

// Criterion 3: analytic gradients against central finite differences.
const FD_STEP: f64 = 1e-5;
const GRAD_RTOL: f64 = 1e-4;
const GRAD_ABS_FLOOR: f64 = 1e-6;

// Criterion 4: a strong smoothness weight must flatten count-mode factors
// without giving up more than this factor in held-out accuracy.
const SMOOTH_LAMBDA_STRONG: f64 = 10.0;
const SMOOTH_MAE_FACTOR: f64 = 2.0;

// Criterion 5: metric identities on random inputs.
const MAE_IDENTITY_RTOL: f64 = 1e-12;

// Criterion 9: sweep sizes, ordering, and the runtime budget.
const SWEEP_SIZES: [usize; 3] = [500, 2000, 8000];
const SWEEP_TIME_LIMIT: Duration = Duration::from_secs(300);

// Criterion 10: optional dataset-backed run, flagged above this MAE.
const TASK4_ENV: &str = "MATTEN_TASK4_CSV";
const TASK4_REFERENCE_MAE: f64 = 0.396;
const TASK4_FLAG_THRESHOLD: f64 = 0.55;

fn eecc_shape(dims: [usize; 4]) -> Shape {
    Shape::new(
        dims.to_vec(),
        vec![
            ModeKind::Element,
            ModeKind::Element,
            ModeKind::Count,
            ModeKind::Count,
        ],
    )
    .expect("valid shape")
}

fn all_coords(dims: &[usize]) -> Vec<Vec<usize>> {
    let mut coords = vec![vec![]];
    for &d in dims {
        let mut next = Vec::with_capacity(coords.len() * d);
        for c in &coords {
            for i in 0..d {
                let mut c = c.clone();
                c.push(i);
                next.push(c);
            }
        }
        coords = next;
    }
    coords
}

fn population_std(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    (values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// A planted rank-3 tensor on shape (15,15,10,10), standardized over the
/// full grid, with a uniform 20% observed. Criteria 1 and 4 share it.
struct RecoveryInstance {
    observed: SparseTensor,
    heldout: Vec<(Vec<usize>, f64)>,
    heldout_std: f64,
}

fn planted_recovery_instance() -> RecoveryInstance {
    let shape = eecc_shape([15, 15, 10, 10]);
    let rank = 3;
    let mut rng = Rng::for_domain(11, "acceptance.recovery");
    let factors: Vec<Mat> = shape
        .dims()
        .iter()
        .map(|&d| {
            let mut f = Mat::zeros(d, rank);
            for i in 0..d {
                for j in 0..rank {
                    f.set(i, j, rng.uniform(-1.0, 1.0));
                }
            }
            f
        })
        .collect();

    let coords = all_coords(shape.dims());
    let mut values: Vec<f64> = coords
        .iter()
        .map(|c| {
            (0..rank)
                .map(|r| {
                    c.iter()
                        .enumerate()
                        .map(|(n, &i)| factors[n].get(i, r))
                        .product::<f64>()
                })
                .sum()
        })
        .collect();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    for v in &mut values {
        *v = (*v - mean) / std;
    }

    let mut order: Vec<usize> = (0..coords.len()).collect();
    rng.shuffle(&mut order);
    let observed_count = (coords.len() as f64 * RECOVERY_OBSERVED_FRACTION).round() as usize;

    let mut observed = SparseTensor::with_default_labels(shape);
    for &i in &order[..observed_count] {
        observed
            .insert(coords[i].clone(), values[i])
            .expect("coord in bounds");
    }
    // The coordinates are distinct by construction; dedup only re-marks
    // the tensor as split-ready.
    let (observed, report) = observed.dedup(DedupPolicy::First);
    assert_eq!(report.duplicate_coords, 0);

    let heldout: Vec<(Vec<usize>, f64)> = order[observed_count..]
        .iter()
        .map(|&i| (coords[i].clone(), values[i]))
        .collect();
    let heldout_std = population_std(heldout.iter().map(|(_, v)| *v));
    RecoveryInstance {
        observed,
        heldout,
        heldout_std,
    }
}

fn heldout_mae(model: &CPModel, heldout: &[(Vec<usize>, f64)]) -> f64 {
    let sum: f64 = heldout
        .iter()
        .map(|(c, v)| (model.predict(c).expect("coord in bounds") - v).abs())
        .sum();
    sum / heldout.len() as f64
}

#[test]
fn criterion_01_synthetic_cp_recovery() {
    let started = Instant::now();
    let inst = planted_recovery_instance();
    let cfg = CPTrainConfig {
        rank: 3,
        ..CPTrainConfig::default()
    };
    let model = cpd::init_model(inst.observed.shape(), &cfg);
    let (model, _) = cpd::train(model, &inst.observed, &cfg, None).expect("training succeeds");

    let mae = heldout_mae(&model, &inst.heldout);
    let bound = RECOVERY_MAE_FACTOR * inst.heldout_std;
    let elapsed = started.elapsed();
    assert!(
        mae <= bound,
        "held-out mae {mae:.4} exceeds {bound:.4} ({RECOVERY_MAE_FACTOR} x std {:.4})",
        inst.heldout_std
    );
    assert!(
        elapsed <= RECOVERY_TIME_LIMIT,
        "took {elapsed:.1?}, limit {RECOVERY_TIME_LIMIT:?}"
    );
    println!(
        "criterion 01 synthetic-cp-recovery: PASS (held-out mae {mae:.4} <= {bound:.4}, {:.1}s)",
        elapsed.as_secs_f64()
    );
}

#[test]
fn criterion_02_rank_one_exact_fit() {
    let started = Instant::now();
    let shape = eecc_shape([6, 6, 5, 5]);
    let mut rng = Rng::for_domain(29, "acceptance.exact_fit");
    // The first vector sums to zero, so the planted tensor has exact zero
    // mean and stays rank 1 after standardization. Magnitudes are bounded
    // away from zero to keep relative error well defined.
    let mut vectors: Vec<Vec<f64>> = vec![vec![1.2, -1.2, 0.8, -0.8, 1.0, -1.0]];
    for &d in &shape.dims()[1..] {
        vectors.push((0..d).map(|_| rng.uniform(0.5, 1.5)).collect());
    }

    let mut tensor = SparseTensor::with_default_labels(shape);
    for c in all_coords(tensor.shape().dims()) {
        let v: f64 = c.iter().enumerate().map(|(n, &i)| vectors[n][i]).product();
        tensor.insert(c, v).expect("coord in bounds");
    }
    let (tensor, _) = tensor.dedup(DedupPolicy::First);

    let base = CPTrainConfig {
        rank: 1,
        epochs: 250,
        l2: 0.0,
        seed: 3,
        ..CPTrainConfig::default()
    };
    let mut model = cpd::init_model(tensor.shape(), &base);
    // Adam with a decaying step: coarse fit first, then polish.
    for lr in [0.05, 0.01, 0.002, 0.0004] {
        let cfg = CPTrainConfig {
            learning_rate: lr,
            ..base.clone()
        };
        model = cpd::train(model, &tensor, &cfg, None)
            .expect("training succeeds")
            .0;
    }

    let mut max_rel: f64 = 0.0;
    for entry in tensor.entries() {
        let p = model.predict(entry.coord()).expect("coord in bounds");
        max_rel = max_rel.max((p - entry.value()).abs() / entry.value().abs());
    }
    let elapsed = started.elapsed();
    assert!(
        max_rel < EXACT_FIT_MAX_REL,
        "max relative reconstruction error {max_rel:.2e} not below {EXACT_FIT_MAX_REL:.0e}"
    );
    assert!(
        elapsed <= EXACT_FIT_TIME_LIMIT,
        "took {elapsed:.1?}, limit {EXACT_FIT_TIME_LIMIT:?}"
    );
    println!(
        "criterion 02 rank-one-exact-fit: PASS (max rel err {max_rel:.2e} < {EXACT_FIT_MAX_REL:.0e}, {:.1}s)",
        elapsed.as_secs_f64()
    );
}

/// Relative agreement used by every finite-difference comparison.
fn grad_rel(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(GRAD_ABS_FLOOR)
}

fn flatten_net_grads(g: &NetGrads) -> Vec<f64> {
    let mut out = Vec::new();
    for (w, b) in g.weights.iter().zip(&g.biases) {
        out.extend_from_slice(w.data());
        out.extend_from_slice(b);
    }
    out
}

/// Distinct random coordinates plus standardized targets for a gradcheck
/// batch.
fn gradcheck_batch(shape: &Shape, count: usize, rng: &mut Rng) -> (Vec<Vec<usize>>, Vec<f64>) {
    let mut seen = HashSet::new();
    let mut coords = Vec::with_capacity(count);
    while coords.len() < count {
        let c: Vec<usize> = shape.dims().iter().map(|&d| rng.below(d)).collect();
        if seen.insert(c.clone()) {
            coords.push(c);
        }
    }
    let targets = (0..count).map(|_| rng.uniform(-1.0, 1.0)).collect();
    (coords, targets)
}

#[test]
fn criterion_03_gradient_checks() {
    let stats = ValueStats {
        mean: 0.0,
        std: 1.0,
    };
    let mut rng = Rng::for_domain(31, "acceptance.gradcheck");
    let mut worst: f64 = 0.0;

    // Factorization model, smoothness and l2 terms included.
    {
        let shape = eecc_shape([3, 4, 2, 3]);
        let cfg = CPTrainConfig {
            rank: 2,
            seed: 17,
            ..CPTrainConfig::default()
        };
        let model = cpd::init_model(&shape, &cfg);
        let (coords, targets) = gradcheck_batch(&shape, 6, &mut rng);
        let coord_refs: Vec<&[usize]> = coords.iter().map(|c| c.as_slice()).collect();
        let (l2, lambda) = (0.3, 0.7);
        let ordinal = shape.count_modes();
        let grads = cpd::batch_gradients(&model, &coord_refs, &targets, l2, lambda, &ordinal);
        for m in 0..model.factors().len() {
            for i in 0..model.factors()[m].rows() {
                for j in 0..model.factors()[m].cols() {
                    let probe = |h: f64| {
                        let mut factors = model.factors().to_vec();
                        let perturbed = factors[m].get(i, j) + h;
                        factors[m].set(i, j, perturbed);
                        let probed = CPModel::from_parts(factors, stats).expect("valid factors");
                        cpd::batch_objective(&probed, &coord_refs, &targets, l2, lambda, &ordinal)
                    };
                    let fd = (probe(FD_STEP) - probe(-FD_STEP)) / (2.0 * FD_STEP);
                    let rel = grad_rel(grads[m].get(i, j), fd);
                    assert!(
                        rel <= GRAD_RTOL,
                        "factor grad mode {m} ({i},{j}): analytic {} vs fd {fd} (rel {rel:.2e})",
                        grads[m].get(i, j)
                    );
                    worst = worst.max(rel);
                }
            }
        }
    }

    // Additive neural model: embeddings and per-component net parameters.
    {
        let shape = Shape::new(
            vec![3, 4, 2],
            vec![ModeKind::Element, ModeKind::Element, ModeKind::Count],
        )
        .expect("valid shape");
        let cfg = NeatTrainConfig {
            components: 2,
            embed_dim: 2,
            hidden: 3,
            seed: 9,
            ..NeatTrainConfig::default()
        };
        let model = neat::init_model(&shape, &cfg);
        let (coords, targets) = gradcheck_batch(&shape, 5, &mut rng);
        let coord_refs: Vec<&[usize]> = coords.iter().map(|c| c.as_slice()).collect();
        let l2 = 0.25;
        let grads = neat::batch_gradients(&model, &coord_refs, &targets, l2);

        let rebuild = |embeddings: Vec<Vec<Mat>>,
                       components: Vec<matten_core::neural::DenseNet>| {
            NeatModel::from_parts(embeddings, components, stats).expect("valid parts")
        };
        for r in 0..model.components().len() {
            for n in 0..shape.ndims() {
                let emb = &model.embeddings()[r][n];
                for i in 0..emb.rows() {
                    for j in 0..emb.cols() {
                        let probe = |h: f64| {
                            let mut embeddings = model.embeddings().to_vec();
                            let perturbed = embeddings[r][n].get(i, j) + h;
                            embeddings[r][n].set(i, j, perturbed);
                            let probed = rebuild(embeddings, model.components().to_vec());
                            neat::batch_objective(&probed, &coord_refs, &targets, l2)
                        };
                        let fd = (probe(FD_STEP) - probe(-FD_STEP)) / (2.0 * FD_STEP);
                        let rel = grad_rel(grads.embeddings[r][n].get(i, j), fd);
                        assert!(
                            rel <= GRAD_RTOL,
                            "embedding grad comp {r} mode {n} ({i},{j}): rel {rel:.2e}"
                        );
                        worst = worst.max(rel);
                    }
                }
            }
            let analytic_flat = flatten_net_grads(&grads.nets[r]);
            let params = model.components()[r].params_to_vec();
            for (k, analytic) in analytic_flat.iter().enumerate() {
                let probe = |h: f64| {
                    let mut flat = params.clone();
                    flat[k] += h;
                    let mut net = model.components()[r].clone();
                    net.set_params(&flat).expect("same parameter count");
                    let mut components = model.components().to_vec();
                    components[r] = net;
                    let probed = rebuild(model.embeddings().to_vec(), components);
                    neat::batch_objective(&probed, &coord_refs, &targets, l2)
                };
                let fd = (probe(FD_STEP) - probe(-FD_STEP)) / (2.0 * FD_STEP);
                let rel = grad_rel(*analytic, fd);
                assert!(
                    rel <= GRAD_RTOL,
                    "net grad comp {r} param {k}: rel {rel:.2e}"
                );
                worst = worst.max(rel);
            }
        }
    }

    // One-hot MLP baseline.
    {
        let shape = Shape::new(
            vec![3, 4, 2],
            vec![ModeKind::Element, ModeKind::Element, ModeKind::Count],
        )
        .expect("valid shape");
        let cfg = MlpTrainConfig {
            hidden: vec![3],
            seed: 4,
            ..MlpTrainConfig::default()
        };
        let model = baseline::init_model(&shape, &cfg);
        let (coords, targets) = gradcheck_batch(&shape, 5, &mut rng);
        let coord_refs: Vec<&[usize]> = coords.iter().map(|c| c.as_slice()).collect();
        let l2 = 0.15;
        let analytic_flat = flatten_net_grads(&baseline::batch_gradients(
            &model,
            &coord_refs,
            &targets,
            l2,
        ));
        let params = model.net().params_to_vec();
        for (k, analytic) in analytic_flat.iter().enumerate() {
            let probe = |h: f64| {
                let mut flat = params.clone();
                flat[k] += h;
                let mut net = model.net().clone();
                net.set_params(&flat).expect("same parameter count");
                let probed =
                    MlpRegressor::from_parts(OneHotEncoder::new(shape.clone()), net, stats)
                        .expect("valid parts");
                baseline::batch_objective(&probed, &coord_refs, &targets, l2)
            };
            let fd = (probe(FD_STEP) - probe(-FD_STEP)) / (2.0 * FD_STEP);
            let rel = grad_rel(*analytic, fd);
            assert!(rel <= GRAD_RTOL, "mlp grad param {k}: rel {rel:.2e}");
            worst = worst.max(rel);
        }
    }

    println!(
        "criterion 03 gradient-checks: PASS (all models, worst rel err {worst:.2e} <= {GRAD_RTOL:.0e})"
    );
}

#[test]
fn criterion_04_smoothing_flattens_count_modes() {
    let inst = planted_recovery_instance();
    let count_modes = inst.observed.shape().count_modes();
    let plain_cfg = CPTrainConfig {
        rank: 3,
        seed: 4,
        ..CPTrainConfig::default()
    };
    let smooth_cfg = CPTrainConfig {
        smooth_lambda: Some(SMOOTH_LAMBDA_STRONG),
        ..plain_cfg.clone()
    };

    let (plain, _) = cpd::train(
        cpd::init_model(inst.observed.shape(), &plain_cfg),
        &inst.observed,
        &plain_cfg,
        None,
    )
    .expect("training succeeds");
    let (smooth, _) = cpd::train(
        cpd::init_model(inst.observed.shape(), &smooth_cfg),
        &inst.observed,
        &smooth_cfg,
        None,
    )
    .expect("training succeeds");

    let penalty_plain = plain.smoothness_penalty(&count_modes);
    let penalty_smooth = smooth.smoothness_penalty(&count_modes);
    let mae_plain = heldout_mae(&plain, &inst.heldout);
    let mae_smooth = heldout_mae(&smooth, &inst.heldout);

    assert!(
        penalty_smooth < penalty_plain,
        "smoothness penalty did not shrink: {penalty_smooth:.4} vs {penalty_plain:.4}"
    );
    assert!(
        mae_smooth <= SMOOTH_MAE_FACTOR * mae_plain,
        "regularized mae {mae_smooth:.4} worse than {SMOOTH_MAE_FACTOR} x {mae_plain:.4}"
    );
    println!(
        "criterion 04 smoothing-effect: PASS (penalty {penalty_smooth:.4} < {penalty_plain:.4}, mae {mae_smooth:.4} <= {SMOOTH_MAE_FACTOR} x {mae_plain:.4})"
    );
}

#[test]
fn criterion_05_mae_identities() {
    // Fixed-point check first: |1-2| and |3-5| average to exactly 1.5.
    assert_eq!(mae(&[(1.0, 2.0), (3.0, 5.0)]).expect("non-empty"), 1.5);

    let close = |x: f64, y: f64| {
        let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-30);
        assert!(rel <= MAE_IDENTITY_RTOL, "{x} vs {y} (rel {rel:.2e})");
    };
    let mut rng = Rng::for_domain(7, "acceptance.mae");
    for _ in 0..50 {
        let pairs: Vec<(f64, f64)> = (0..rng.below(20) + 1)
            .map(|_| (rng.uniform(-10.0, 10.0), rng.uniform(-10.0, 10.0)))
            .collect();
        let base = mae(&pairs).expect("non-empty");

        let c = rng.uniform(-5.0, 5.0);
        let shifted: Vec<(f64, f64)> = pairs.iter().map(|&(a, p)| (a + c, p + c)).collect();
        close(mae(&shifted).expect("non-empty"), base);

        let alpha = rng.uniform(-3.0, 3.0);
        let scaled: Vec<(f64, f64)> = pairs.iter().map(|&(a, p)| (alpha * a, alpha * p)).collect();
        close(mae(&scaled).expect("non-empty"), alpha.abs() * base);
    }
    println!("criterion 05 mae-identities: PASS (exact fixed point, translation and homogeneity to {MAE_IDENTITY_RTOL:.0e})");
}

#[test]
fn criterion_06_formula_encoding_and_conservation() {
    // AuBr5 must land on (index(Au), index(Br), index(1), index(5)), with
    // count k stored at index k-1, and the spelling must not matter.
    let records: Vec<(String, f64)> = [("AuBr5", 1.0), ("Br5Au", 3.0), ("NaCl", 0.5)]
        .iter()
        .map(|(f, v)| (f.to_string(), *v))
        .collect();
    let cfg = TensorizeConfig::default();
    let (tensor, report) = tensorize(&records, &cfg).expect("encodes");
    assert_eq!(report.encoded, 3);
    assert_eq!(tensor.len(), 2, "AuBr5 and Br5Au share one cell");

    let im = tensor.index_map();
    let au = im.mode(0).index_of("Au").expect("Au indexed");
    let br = im.mode(1).index_of("Br").expect("Br indexed");
    let one = im.mode(2).index_of("1").expect("count 1 indexed");
    let five = im.mode(3).index_of("5").expect("count 5 indexed");
    assert_eq!(one, 0, "count k sits at index k-1");
    assert_eq!(five, 4, "count k sits at index k-1");
    let entry = tensor
        .entries()
        .iter()
        .find(|e| e.coord() == [au, br, one, five])
        .expect("AuBr5 coordinate present");
    assert_eq!(entry.value(), 2.0, "both spellings merged by mean");

    // Conservation over a corpus with malformed rows mixed in.
    let messy: Vec<(String, f64)> = [
        ("AuBr5", 1.0),
        ("NaCl", 0.5),
        ("Fe2O3", 0.25),
        ("Zz3Br", 9.0), // no such element
        ("not a formula", 9.0),
        ("AuBrCl2", 9.0), // three elements, arity is two
        ("Au9Br", 9.0),   // count above max_count 8
        ("Au1.5Br", 9.0), // fractional count
    ]
    .iter()
    .map(|(f, v)| (f.to_string(), *v))
    .collect();
    let (_, rep) = tensorize(&messy, &cfg).expect("some rows encode");
    assert_eq!(rep.ingested, 8);
    assert_eq!(rep.encoded, 3);
    assert_eq!(rep.parse_error, 2);
    assert_eq!(rep.wrong_arity, 1);
    assert_eq!(rep.count_overflow, 1);
    assert_eq!(rep.noninteger_count, 1);
    assert!(rep.is_conserved(), "ingested != encoded + skipped");

    println!(
        "criterion 06 formula-encoding: PASS (AuBr5 -> ({au},{br},{one},{five}), permutation invariant, skip report conserved)"
    );
}

#[test]
fn criterion_07_dedup_before_split_over_100_seeds() {
    // Adversarial corpus: every coordinate inserted three times with
    // disagreeing values.
    let shape = eecc_shape([4, 4, 3, 3]);
    let mut raw = SparseTensor::with_default_labels(shape);
    let coords: Vec<Vec<usize>> = all_coords(raw.shape().dims())
        .into_iter()
        .step_by(12)
        .take(12)
        .collect();
    for (k, c) in coords.iter().enumerate() {
        for rep in 0..3 {
            raw.insert(c.clone(), k as f64 + rep as f64)
                .expect("coord in bounds");
        }
    }
    assert_eq!(raw.len(), 36);

    let (deduped, report) = raw.dedup(DedupPolicy::Mean);
    assert_eq!(report.duplicate_coords, 12);
    for seed in 0..100u64 {
        let (train, test) = deduped.split(6, seed).expect("split succeeds");
        let train_coords: HashSet<&[usize]> = train.entries().iter().map(|e| e.coord()).collect();
        for entry in test.entries() {
            assert!(
                !train_coords.contains(entry.coord()),
                "seed {seed}: coordinate {:?} appears in both halves",
                entry.coord()
            );
        }
    }

    // Same guarantee through the experiment harness, which dedups
    // internally before every split (it panics on any leak).
    let exp = ExperimentConfig {
        model: ModelSpec::Cpd(CPTrainConfig {
            rank: 1,
            epochs: 0,
            ..CPTrainConfig::default()
        }),
        train_count: 6,
        iterations: 100,
        base_seed: 0,
    };
    let row = run_experiment(&raw, &exp).expect("harness accepts duplicated input");
    assert!(row.mean_mae.is_finite());

    println!("criterion 07 dedup-before-split: PASS (100 direct splits + 100 harness iterations, no leaked coordinate)");
}

// ---------------------------------------------------------------------------
// Criteria 8 to 10 drive the compiled binary.

fn matten(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_matten"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_exit_zero(out: &Output) {
    assert_eq!(
        out.status.code(),
        Some(0),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf8 path")
}

/// Drops the trailing (timing) column of every line.
fn strip_last_column(csv: &str) -> String {
    csv.lines()
        .map(|line| match line.rfind(',') {
            Some(idx) => &line[..idx],
            None => line,
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Writes a synthetic formula,value CSV over all pairs of `symbols` with
/// counts 1..=max_count. Values follow a planted two-component product
/// form, so factorization models can actually learn them.
fn write_synthetic_csv(path: &Path, symbols: &[&str], max_count: usize, seed: u64) -> usize {
    let table = |tag: &str, n: usize| -> Vec<f64> {
        let mut rng = Rng::for_domain(seed, tag);
        (0..n).map(|_| rng.uniform(0.5, 1.5)).collect()
    };
    let elem: [Vec<f64>; 2] = [
        table("synth.elem.0", symbols.len()),
        table("synth.elem.1", symbols.len()),
    ];
    let count: [Vec<f64>; 2] = [
        table("synth.count.0", max_count),
        table("synth.count.1", max_count),
    ];

    let mut csv = String::from("formula,value\n");
    let mut rows = 0;
    for i in 0..symbols.len() {
        for j in (i + 1)..symbols.len() {
            for k1 in 1..=max_count {
                for k2 in 1..=max_count {
                    let v: f64 = (0..2)
                        .map(|r| elem[r][i] * elem[r][j] * count[r][k1 - 1] * count[r][k2 - 1])
                        .sum();
                    csv.push_str(&format!("{}{}{}{},{}\n", symbols[i], k1, symbols[j], k2, v));
                    rows += 1;
                }
            }
        }
    }
    fs::write(path, csv).expect("write synthetic csv");
    rows
}

#[test]
fn criterion_08_benchmark_determinism() {
    let dir = TempDir::new().unwrap();
    let dataset = dir.path().join("synth.csv");
    write_synthetic_csv(&dataset, &["Au", "Br", "Cl", "Fe", "Na"], 4, 23);

    let run = dir.path().join("run.json");
    let doc = serde_json::json!({
        "name": "determinism",
        "dataset": dataset,
        "tensorize": { "max_count": 4 },
        "models": [
            { "kind": "cpd",   "config": { "rank": 2, "epochs": 15 } },
            { "kind": "cpd_s", "config": { "rank": 2, "epochs": 15, "smooth_lambda": 1.0 } },
            { "kind": "neat",  "config": { "components": 2, "embed_dim": 2, "hidden": 4, "epochs": 10 } },
            { "kind": "mlp",   "config": { "hidden": [8], "epochs": 10 } },
        ],
        "train_count": 100,
        "iterations": 2,
        "base_seed": 1,
        "sample_count": 3,
    });
    fs::write(&run, serde_json::to_string_pretty(&doc).unwrap()).unwrap();

    let run_once = |out_dir: &PathBuf| -> (String, String) {
        assert_exit_zero(&matten(&[
            "benchmark",
            "--config",
            path_str(&run),
            "--out-dir",
            path_str(out_dir),
        ]));
        (
            fs::read_to_string(out_dir.join("results.csv")).unwrap(),
            fs::read_to_string(out_dir.join("samples.csv")).unwrap(),
        )
    };
    let (results_a, samples_a) = run_once(&dir.path().join("a"));
    let (results_b, samples_b) = run_once(&dir.path().join("b"));

    assert_eq!(
        strip_last_column(&results_a),
        strip_last_column(&results_b),
        "results.csv differs between identical runs"
    );
    assert_eq!(
        samples_a, samples_b,
        "samples.csv differs between identical runs"
    );
    println!("criterion 08 benchmark-determinism: PASS (two runs byte-identical aside from the timing column)");
}

#[test]
fn criterion_09_efficiency_sweep_shape() {
    let started = Instant::now();
    let dir = TempDir::new().unwrap();
    let dataset = dir.path().join("synth.csv");
    let symbols = [
        "H", "Li", "B", "C", "N", "O", "Na", "Mg", "Al", "Si", "P", "S", "Cl", "K", "Ca", "Ti",
        "Fe", "Cu", "Zn", "Au",
    ];
    let rows = write_synthetic_csv(&dataset, &symbols, 12, 37);
    assert!(rows > SWEEP_SIZES[2], "corpus must exceed the largest size");

    let run = dir.path().join("run.json");
    let doc = serde_json::json!({
        "name": "sweep",
        "dataset": dataset,
        "tensorize": { "max_count": 12 },
        "models": [
            { "kind": "cpd", "config": { "rank": 2, "epochs": 40, "learning_rate": 0.02 } },
            { "kind": "mlp", "config": { "hidden": [16], "epochs": 15, "learning_rate": 0.003 } },
        ],
        "train_count": 500,
        "iterations": 2,
        "base_seed": 0,
        "sweep_sizes": SWEEP_SIZES.to_vec(),
    });
    fs::write(&run, serde_json::to_string_pretty(&doc).unwrap()).unwrap();

    let out_dir = dir.path().join("out");
    assert_exit_zero(&matten(&[
        "sweep",
        "--config",
        path_str(&run),
        "--out-dir",
        path_str(&out_dir),
    ]));

    let csv = fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "model,train_count,mae_mean,train_seconds_mean"
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let expected: Vec<(&str, usize)> = ["cpd", "mlp"]
        .iter()
        .flat_map(|m| SWEEP_SIZES.iter().map(move |&s| (*m, s)))
        .collect();
    assert_eq!(
        rows.iter()
            .map(|r| (r[0], r[1].parse::<usize>().unwrap()))
            .collect::<Vec<_>>(),
        expected,
        "one row per (model, size), sizes ascending"
    );

    let mae_of = |model: &str, size: usize| -> f64 {
        rows.iter()
            .find(|r| r[0] == model && r[1] == size.to_string())
            .expect("row present")[2]
            .parse()
            .expect("mae parses")
    };
    let small = mae_of("cpd", SWEEP_SIZES[0]);
    let large = mae_of("cpd", SWEEP_SIZES[2]);
    assert!(
        large <= small,
        "factorization mae should not get worse with more data: {large} at {} vs {small} at {}",
        SWEEP_SIZES[2],
        SWEEP_SIZES[0]
    );

    let elapsed = started.elapsed();
    assert!(
        elapsed <= SWEEP_TIME_LIMIT,
        "took {elapsed:.1?}, limit {SWEEP_TIME_LIMIT:?}"
    );
    println!(
        "criterion 09 efficiency-sweep: PASS (6 rows, cpd mae {large:.4} at {} <= {small:.4} at {}, {:.0}s)",
        SWEEP_SIZES[2],
        SWEEP_SIZES[0],
        elapsed.as_secs_f64()
    );
}

#[test]
fn criterion_10_dataset_scale_report() {
    // Optional: needs a user-supplied band-gap CSV (formula,value with
    // 2259 two-element records). Skipped, not failed, when absent.
    let Some(path) = env::var_os(TASK4_ENV) else {
        println!(
            "criterion 10 dataset-scale-report: SKIP (set {TASK4_ENV} to a formula,value CSV to enable)"
        );
        return;
    };
    let dataset = PathBuf::from(path);
    assert!(
        dataset.exists(),
        "{TASK4_ENV} points at {}, which does not exist",
        dataset.display()
    );

    let dir = TempDir::new().unwrap();
    let run = dir.path().join("run.json");
    let doc = serde_json::json!({
        "name": "band-gap-1500",
        "dataset": dataset,
        "tensorize": { "max_count": 12 },
        "models": [ { "kind": "cpd_s" } ],
        "train_count": 1500,
        "iterations": 5,
        "base_seed": 0,
        "sample_count": 5,
    });
    fs::write(&run, serde_json::to_string_pretty(&doc).unwrap()).unwrap();

    let out_dir = dir.path().join("out");
    assert_exit_zero(&matten(&[
        "benchmark",
        "--config",
        path_str(&run),
        "--out-dir",
        path_str(&out_dir),
    ]));

    let results = fs::read_to_string(out_dir.join("results.csv")).unwrap();
    let row = results
        .lines()
        .find(|l| l.starts_with("cpd_s,"))
        .expect("cpd_s row present");
    let mean_mae: f64 = row
        .split(',')
        .nth(4)
        .expect("mae column")
        .parse()
        .expect("mae parses");
    assert!(mean_mae.is_finite());

    let flag = if mean_mae > TASK4_FLAG_THRESHOLD {
        format!(" FLAG: above {TASK4_FLAG_THRESHOLD}")
    } else {
        String::new()
    };
    println!(
        "criterion 10 dataset-scale-report: PASS (cpd_s mean mae {mean_mae:.3} over 5 iterations; reference {TASK4_REFERENCE_MAE}{flag})"
    );
}
