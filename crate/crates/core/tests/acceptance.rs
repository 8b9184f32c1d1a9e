//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use hybrid_attn::autograd::{Matrix, Tape};
use hybrid_attn::cka::linear_cka;
use hybrid_attn::curation::{
    balanced_subsample, greedy_dedup, mix_manifests, EmbeddingSet, SourceTransform,
};
use hybrid_attn::data::{synth_shapes, Augment, Image, SHAPE_CLASSES};
use hybrid_attn::distill::{
    attention_kl_from_logits, attention_kl_loss, attention_kl_tape, concat_multilayer_targets,
    distill_loss_tape, run_distillation, DistillCorpus, DistillPlan, HeadAlignment, LossKind,
    Target, PROJ_BIAS, PROJ_WEIGHT,
};
use hybrid_attn::io::{
    parse_manifest, write_manifest, CorpusManifest, ImageRecord, Modality, Provenance,
};
use hybrid_attn::metrics::{dataset_nmi, nmi_head, select_target_layer};
use hybrid_attn::model::{
    bind_params, forward, forward_image, forward_tape, grad, init_params, pretrain_segmenter,
    AdamWConfig, LayerAttention, ModelConfig, ParamStore, PretrainSettings,
};
use hybrid_attn::probe::{
    build_pyramid, train_probe, FeatureMap, ProbeMode, ProbeSettings, PyramidConfig, PyramidParams,
};
use hybrid_attn::{DType, FeatureStack, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

const NMI_EXTREME_SIZES: [usize; 6] = [2, 4, 8, 16, 49, 196];
const NMI_FUZZ_CASES: usize = 1000;
const NMI_FUZZ_MAX_TOKENS: usize = 16;
const NMI_ORACLE_TOL: f64 = 1e-9;
const NMI_PERMUTATION_TOL: f64 = 1e-12;

/// 24 per-layer values: layers 18 and 24 carry 0.1185 and 0.1882,
/// every other latter-half layer is at least 0.15.
const SELECTION_FIXTURE: [f64; 24] = [
    0.030, 0.028, 0.035, 0.041, 0.047, 0.052, 0.058, 0.066, 0.074, 0.081, 0.090, 0.101, 0.215,
    0.196, 0.182, 0.171, 0.158, 0.1185, 0.163, 0.177, 0.189, 0.204, 0.221, 0.1882,
];
const SELECTION_TARGET: usize = 18;
const STABILITY_S: [f64; 7] = [0.06, 0.07, 0.08, 0.09, 0.10, 0.11, 0.12];

const KL_ZERO_TOL: f64 = 1e-10;
const KL_DISTINCT_MIN: f64 = 1e-6;
const KL_ORACLE_TOL: f64 = 1e-9;
const KL_FUZZ_CASES: usize = 200;
const FD_STEP: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-4;
/// Tensors whose numerical gradient stays below this scale (unreached, or
/// shift-invariant such as key biases) are checked absolutely against it.
const FD_ZERO_SCALE: f64 = 1e-8;

const DESK_KL_RATIO: f64 = 0.1;
const DESK_NMI_GAP: f64 = 0.03;
const PROBE_MIOU_MARGIN: f64 = 0.05;

const CKA_TOL: f64 = 1e-9;
const CKA_FUZZ_CASES: usize = 100;

const DEDUP_CASES: usize = 200;
const DEDUP_THRESHOLDS: [f64; 3] = [0.8, 0.9, 0.95];

const MIX_SIZES: [usize; 3] = [541_088, 200_000, 118_287];
const MIX_TOTAL: usize = 859_375;
const MIX_CLASSES: usize = 1000;

const LINEARITY_TOL: f64 = 1e-12;
const LINEARITY_CASES: usize = 500;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn stochastic_rows(rng: &mut ChaCha8Rng, n: usize, style: usize) -> Vec<f64> {
    let mut a = vec![0.0; n * n];
    for row in a.chunks_mut(n) {
        match style % 3 {
            0 => row.iter_mut().for_each(|v| *v = rng.random::<f64>()),
            1 => {
                let temp = rng.random_range(0.5..8.0);
                row.iter_mut()
                    .for_each(|v| *v = (temp * rng.random::<f64>()).exp());
            }
            _ => row.iter_mut().for_each(|v| {
                *v = if rng.random_bool(0.4) {
                    rng.random::<f64>()
                } else {
                    0.0
                }
            }),
        }
        if row.iter().all(|&v| v == 0.0) {
            row[rng.random_range(0..n)] = 1.0;
        }
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    a
}

/// `I(Q;K) / sqrt(H(Q) H(K))` from the joint table `P(q,k) = A[q,k] / N`.
fn nmi_oracle(a: &[f64], n: usize) -> f64 {
    let joint: Vec<Vec<f64>> = (0..n)
        .map(|q| (0..n).map(|k| a[q * n + k] / n as f64).collect())
        .collect();
    let pq: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
    let pk: Vec<f64> = (0..n).map(|k| joint.iter().map(|r| r[k]).sum()).collect();
    let entropy = |p: &[f64]| {
        -p.iter()
            .filter(|&&v| v > 0.0)
            .map(|&v| v * v.ln())
            .sum::<f64>()
    };
    let mut mi = 0.0;
    for q in 0..n {
        for k in 0..n {
            let p = joint[q][k];
            if p > 0.0 {
                mi += p * (p / (pq[q] * pk[k])).ln();
            }
        }
    }
    let (hq, hk) = (entropy(&pq), entropy(&pk));
    if hk <= 0.0 {
        return 0.0;
    }
    (mi / (hq * hk).sqrt()).clamp(0.0, 1.0)
}

fn nmi_extremes() -> Check {
    for &n in &NMI_EXTREME_SIZES {
        let mut eye = vec![0.0; n * n];
        (0..n).for_each(|i| eye[i * n + i] = 1.0);
        let uniform = vec![1.0 / n as f64; n * n];
        let (one, zero) = (ok(nmi_head(&eye))?, ok(nmi_head(&uniform))?);
        ensure!(one == 1.0, "identity N={n} gives {one}");
        ensure!(zero == 0.0, "uniform N={n} gives {zero}");
    }
    Ok(format!(
        "identity = 1 and uniform = 0 exactly for N in {NMI_EXTREME_SIZES:?}"
    ))
}

fn nmi_oracle_equivalence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst, mut worst_perm) = (0.0f64, 0.0f64);
    for case in 0..NMI_FUZZ_CASES {
        let n = rng.random_range(2..=NMI_FUZZ_MAX_TOKENS);
        let a = stochastic_rows(&mut rng, n, case);
        let got = ok(nmi_head(&a))?;
        ensure!(
            (0.0..=1.0).contains(&got),
            "case {case}: NMI {got} outside [0, 1]"
        );
        let err = (got - nmi_oracle(&a, n)).abs();
        ensure!(
            err <= NMI_ORACLE_TOL,
            "case {case} (N={n}): oracle gap {err:e}"
        );
        worst = worst.max(err);

        let mut rows: Vec<usize> = (0..n).collect();
        let mut cols: Vec<usize> = (0..n).collect();
        rows.shuffle(&mut rng);
        cols.shuffle(&mut rng);
        let relabeled: Vec<f64> = (0..n * n)
            .map(|i| a[rows[i / n] * n + rows[i % n]])
            .collect();
        let shuffled: Vec<f64> = (0..n * n)
            .map(|i| a[rows[i / n] * n + cols[i % n]])
            .collect();
        for permuted in [relabeled, shuffled] {
            let gap = (ok(nmi_head(&permuted))? - got).abs();
            ensure!(
                gap <= NMI_PERMUTATION_TOL,
                "case {case}: permutation changes NMI by {gap:e}"
            );
            worst_perm = worst_perm.max(gap);
        }
    }
    Ok(format!(
        "{NMI_FUZZ_CASES} matrices, max oracle gap {worst:.1e} (tol {NMI_ORACLE_TOL:e}), max permutation gap {worst_perm:.1e}"
    ))
}

fn layer_selection_fixture() -> Check {
    ensure!(
        SELECTION_FIXTURE[17] == 0.1185 && SELECTION_FIXTURE[23] == 0.1882,
        "fixture lost its pinned values"
    );
    ensure!(
        (13..=24)
            .filter(|&l| l != 18 && l != 24)
            .all(|l| SELECTION_FIXTURE[l - 1] >= 0.15),
        "fixture latter half has a layer below 0.15"
    );
    for &s in &STABILITY_S {
        let layer = ok(select_target_layer(&SELECTION_FIXTURE, s, true))?;
        ensure!(layer == SELECTION_TARGET, "s = {s} selects layer {layer}");
    }
    Ok(format!(
        "layer {SELECTION_TARGET} selected for every s in {STABILITY_S:?}"
    ))
}

fn random_layer(rng: &mut ChaCha8Rng, heads: usize, tokens: usize) -> LayerAttention {
    random_maps(rng, heads, tokens, 3)
}

/// Student maps come from a softmax and are strictly positive.
fn random_student(rng: &mut ChaCha8Rng, heads: usize, tokens: usize) -> LayerAttention {
    random_maps(rng, heads, tokens, 2)
}

fn random_maps(rng: &mut ChaCha8Rng, heads: usize, tokens: usize, styles: usize) -> LayerAttention {
    let mut values = Vec::with_capacity(heads * tokens * tokens);
    for _ in 0..heads {
        let style = rng.random_range(0..styles);
        values.extend(stochastic_rows(rng, tokens, style));
    }
    LayerAttention {
        heads,
        tokens,
        values,
    }
}

/// `(1/M) sum_m (1/N) sum_i sum_j t ln(max(t, 1e-12) / s)`, skipping `t = 0`.
fn kl_oracle(t: &LayerAttention, s: &LayerAttention) -> f64 {
    let n = t.tokens;
    let mut heads = 0.0;
    for m in 0..t.heads {
        let mut rows = 0.0;
        for i in 0..n {
            for j in 0..n {
                let idx = m * n * n + i * n + j;
                let tv = t.values[idx];
                if tv > 0.0 {
                    rows += tv * (tv.max(1e-12).ln() - s.values[idx].ln());
                }
            }
        }
        heads += rows / n as f64;
    }
    heads / t.heads as f64
}

fn to_f64(params: &ParamStore) -> ParamStore {
    params
        .iter()
        .map(|(k, v)| (k.clone(), v.cast(DType::F64)))
        .collect()
}

fn kl_correctness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for case in 0..KL_FUZZ_CASES {
        let (heads, tokens) = (rng.random_range(1..=4), rng.random_range(2..=12));
        let t = random_layer(&mut rng, heads, tokens);
        let s = random_student(&mut rng, heads, tokens);
        for m in [&t, &s] {
            let same = ok(attention_kl_loss(m, m))?;
            ensure!(
                same.abs() <= KL_ZERO_TOL,
                "case {case}: KL of a map with itself is {same:e}"
            );
        }
        let got = ok(attention_kl_loss(&t, &s))?;
        ensure!(
            got > KL_DISTINCT_MIN,
            "case {case}: distinct maps give KL {got:e}"
        );
        let err = (got - kl_oracle(&t, &s)).abs();
        ensure!(err <= KL_ORACLE_TOL, "case {case}: oracle gap {err:e}");
        worst = worst.max(err);
    }

    let student = ok(ModelConfig::new(2, 16, 4, 4, (16, 16)))?;
    let params = to_f64(&ok(init_params(&student, 21))?);
    let image = synth_shapes(1, 16, 5).remove(0).image;
    let teacher_cfg = ok(ModelConfig::new(2, 16, 4, 4, (16, 16)))?;
    let teacher_params = ok(init_params(&teacher_cfg, 22))?;
    let mut target = ok(forward_image::<f64>(&teacher_cfg, &teacher_params, &image))?
        .attention
        .remove(1);
    // Sharpen the near-uniform maps of a fresh model so the check sees peaked rows.
    for row in target.values.chunks_mut(16) {
        row.iter_mut().for_each(|v| *v = v.powi(40));
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }

    let mut tape = Tape::<f64>::new();
    let vars = ok(bind_params(&mut tape, &params, false))?;
    let trace = ok(forward_tape(&mut tape, &student, &vars, &image))?;
    let logits: Vec<Matrix<f64>> = trace.logits[1]
        .iter()
        .map(|&v| tape.value(v).clone())
        .collect();

    let mut tape = Tape::<f64>::new();
    let leaves: Vec<_> = logits.iter().map(|m| tape.param(m.clone())).collect();
    let loss = ok(attention_kl_tape(&mut tape, &target, &leaves))?;
    let grads = tape.backward(loss);
    let flat = |ls: &[Matrix<f64>]| LayerAttention {
        heads: ls.len(),
        tokens: 16,
        values: ls.iter().flat_map(|m| m.data.iter().copied()).collect(),
    };
    let value = ok(attention_kl_from_logits(&target, &flat(&logits)))?;
    ensure!(
        (tape.scalar_value(loss) - value).abs() <= KL_ORACLE_TOL,
        "tape and direct KL disagree"
    );
    let mut worst_fd = 0.0f64;
    for (m, leaf) in leaves.iter().enumerate() {
        let analytic = &grads.get(*leaf).ok_or("logits unreached")?.data;
        let mut numeric = vec![0.0; analytic.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let mut shifted = logits.clone();
            shifted[m].data[i] += FD_STEP;
            let up = ok(attention_kl_from_logits(&target, &flat(&shifted)))?;
            shifted[m].data[i] -= 2.0 * FD_STEP;
            let down = ok(attention_kl_from_logits(&target, &flat(&shifted)))?;
            *slot = (up - down) / (2.0 * FD_STEP);
        }
        let rel = relative_error(analytic, &numeric);
        ensure!(
            rel <= FD_REL_TOL,
            "head {m}: relative gradient error {rel:e}"
        );
        worst_fd = worst_fd.max(rel);
    }
    Ok(format!(
        "self-KL = 0, {KL_FUZZ_CASES} pairs vs oracle max gap {worst:.1e}, logit gradient rel err {worst_fd:.1e} (tol {FD_REL_TOL:e})"
    ))
}

/// `max |a - n| / max |n|` over one tensor.
fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = numeric.iter().map(|n| n.abs()).fold(0.0, f64::max);
    diff / scale
}

fn random_params(
    config: &ModelConfig,
    extra: &[(&str, [usize; 2])],
    seed: u64,
) -> Result<ParamStore, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weight = Normal::new(0.0, 0.2).map_err(|e| e.to_string())?;
    let offset = Normal::new(0.0, 0.1).map_err(|e| e.to_string())?;
    let mut shapes = config.param_shapes();
    shapes.extend(extra.iter().map(|&(n, s)| (n.to_string(), s)));
    let mut out = ParamStore::new();
    for (name, [r, c]) in shapes {
        let gain = name.contains("norm") && name.ends_with(".weight");
        let values = (0..r * c)
            .map(|_| match (gain, name.ends_with(".bias")) {
                (true, _) => 1.0 + offset.sample(&mut rng),
                (false, true) => offset.sample(&mut rng),
                _ => weight.sample(&mut rng),
            })
            .collect();
        out.insert(name, ok(Tensor::from_f64(vec![r, c], values))?);
    }
    Ok(out)
}

fn loss_value(config: &ModelConfig, params: &ParamStore, image: &Image, target: &Target) -> f64 {
    let mut tape = Tape::<f64>::new();
    let vars = bind_params(&mut tape, params, false).expect("bind");
    let (loss, _) = distill_loss_tape(&mut tape, config, &vars, image, target).expect("loss");
    tape.scalar_value(loss)
}

fn check_model_gradient(
    config: &ModelConfig,
    params: &ParamStore,
    image: &Image,
    target: &Target,
) -> Result<(f64, usize), String> {
    let (_, analytic) = ok(grad::<f64, _>(params, |tape, vars| {
        Ok(distill_loss_tape(tape, config, vars, image, target)?.0)
    }))?;
    let mut worst = 0.0f64;
    let mut zero_tensors = 0;
    for (name, tensor) in params {
        let base = tensor.to_f64_vec();
        let numeric: Vec<f64> = (0..base.len())
            .into_par_iter()
            .map(|i| {
                let mut local = params.clone();
                let mut eval = |delta: f64| {
                    let mut v = base.clone();
                    v[i] += delta;
                    local.insert(
                        name.clone(),
                        Tensor::from_f64(tensor.shape().to_vec(), v).expect("tensor"),
                    );
                    loss_value(config, &local, image, target)
                };
                (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP)
            })
            .collect();
        let a = &analytic[name];
        if numeric.iter().all(|v| v.abs() < FD_ZERO_SCALE) {
            let diff = a
                .iter()
                .zip(&numeric)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            ensure!(
                diff <= FD_ZERO_SCALE,
                "{name}: numeric gradient is near zero but analytic differs by {diff:e}"
            );
            zero_tensors += 1;
            continue;
        }
        let rel = relative_error(a, &numeric);
        ensure!(rel <= FD_REL_TOL, "{name}: relative gradient error {rel:e}");
        worst = worst.max(rel);
    }
    Ok((worst, zero_tensors))
}

fn full_model_gradient() -> Check {
    let config = ok(ModelConfig::new(3, 32, 4, 4, (16, 16)))?;
    let image = synth_shapes(1, 16, 9).remove(0).image;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = config.tokens();

    let kl_params = random_params(&config, &[], 31)?;
    let kl_target = Target::Attention(random_layer(&mut rng, 4, n));
    let (kl_worst, kl_zero) = check_model_gradient(&config, &kl_params, &image, &kl_target)?;

    let teacher_dim = 24;
    let cos_params = random_params(
        &config,
        &[
            (PROJ_WEIGHT, [32, teacher_dim]),
            (PROJ_BIAS, [1, teacher_dim]),
        ],
        32,
    )?;
    let values = (0..n * teacher_dim)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let cos_target = Target::Features {
        dim: teacher_dim,
        values,
    };
    let (cos_worst, cos_zero) = check_model_gradient(&config, &cos_params, &image, &cos_target)?;
    Ok(format!(
        "every entry of {} tensors: KL max rel err {kl_worst:.1e} ({kl_zero} near-zero tensors checked absolutely), cosine {cos_worst:.1e} ({cos_zero} near-zero)",
        kl_params.len()
    ))
}

struct DeskRun {
    student: ModelConfig,
    params: ParamStore,
}

static DESK: OnceLock<DeskRun> = OnceLock::new();

fn desk_convergence() -> Check {
    let teacher = ok(ModelConfig::new(8, 64, 8, 4, (32, 32)))?;
    let pretrain = PretrainSettings {
        steps: 300,
        batch_size: 16,
        base_lr: 0.05,
        warmup_steps: 30,
        classes: SHAPE_CLASSES,
        seed: 1,
        optimizer: AdamWConfig::default(),
    };
    let (teacher_params, _) = ok(pretrain_segmenter(
        &teacher,
        &synth_shapes(256, 32, 1),
        &pretrain,
    ))?;
    let probe_images: Vec<Image> = synth_shapes(32, 32, 2)
        .into_iter()
        .map(|x| x.image)
        .collect();
    let stacks = ok(forward(&teacher, &teacher_params, &probe_images))?
        .iter()
        .map(|o| o.attention_stack())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let teacher_nmi = ok(dataset_nmi(&stacks))?;
    let target_layer = ok(select_target_layer(&teacher_nmi, 0.09, true))?;

    let images: Vec<Image> = synth_shapes(80, 32, 3)
        .into_iter()
        .map(|x| x.image)
        .collect();
    let corpus = DistillCorpus {
        train: images[..64].to_vec(),
        heldout: images[64..].to_vec(),
    };
    let student = ok(ModelConfig::new(4, 32, 4, 4, (32, 32)))?;
    let plan = DistillPlan {
        teacher_target_layer: target_layer,
        loss_kind: LossKind::AttentionKl,
        multilayer_targets: None,
        head_alignment: HeadAlignment::AdaptiveHeads,
        epochs: 25,
        batch_size: 8,
        base_lr: 0.064,
        warmup_epochs: 2,
        optimizer: AdamWConfig::default(),
        augment: Some(Augment::default()),
        seed: 7,
    };
    let first = ok(run_distillation(
        &teacher,
        &teacher_params,
        &student,
        &corpus,
        &plan,
        None,
    ))?;
    let log = &first.log;
    ensure!(
        log.step_loss.len() == 200,
        "ran {} steps, expected 200",
        log.step_loss.len()
    );
    let ratio = log.final_heldout_loss() / log.initial_heldout_loss;
    let gap = (log.final_student_nmi() - log.teacher_nmi).abs();
    ensure!(
        ratio <= DESK_KL_RATIO,
        "held-out KL ratio {ratio:.4} above {DESK_KL_RATIO}"
    );
    ensure!(
        gap <= DESK_NMI_GAP,
        "student NMI {:.4} vs teacher {:.4}",
        log.final_student_nmi(),
        log.teacher_nmi
    );

    let second = ok(run_distillation(
        &teacher,
        &teacher_params,
        &student,
        &corpus,
        &plan,
        None,
    ))?;
    ensure!(second.log == first.log, "rerun log differs");
    ensure!(
        first.params.len() == second.params.len()
            && first
                .params
                .iter()
                .all(|(k, v)| second.params.get(k).is_some_and(|w| w.bitwise_eq(v))),
        "rerun parameters differ"
    );
    let detail = format!(
        "target layer {target_layer}, held-out KL {:.4} -> {:.4} (ratio {ratio:.3} <= {DESK_KL_RATIO}), student NMI {:.4} vs teacher {:.4} (gap {gap:.4} <= {DESK_NMI_GAP}), rerun bitwise-identical",
        log.initial_heldout_loss,
        log.final_heldout_loss(),
        log.final_student_nmi(),
        log.teacher_nmi
    );
    let _ = DESK.set(DeskRun {
        student: first.config,
        params: first.params,
    });
    Ok(detail)
}

fn probe_gain() -> Check {
    let desk = DESK.get().ok_or("desk fixture did not complete")?;
    let random = ok(init_params(&desk.student, 7))?;
    let (train, heldout) = (synth_shapes(64, 32, 11), synth_shapes(32, 32, 12));
    let settings = ProbeSettings {
        epochs: 20,
        batch_size: 8,
        base_lr: 1.0,
        classes: SHAPE_CLASSES,
        seed: 1,
        optimizer: AdamWConfig::default(),
    };
    let distilled = ok(train_probe(
        &desk.student,
        &desk.params,
        &train,
        &heldout,
        &ProbeMode::LlFpn,
        &settings,
    ))?;
    let baseline = ok(train_probe(
        &desk.student,
        &random,
        &train,
        &heldout,
        &ProbeMode::LlFpn,
        &settings,
    ))?;
    let (a, b) = (distilled.iou.mean, baseline.iou.mean);
    ensure!(
        a - b >= PROBE_MIOU_MARGIN,
        "distilled mIoU {a:.4} vs random init {b:.4}"
    );
    Ok(format!(
        "LL-FPN probe mIoU {a:.4} distilled vs {b:.4} random init (margin >= {PROBE_MIOU_MARGIN})"
    ))
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    (0..rows * cols)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect()
}

fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for p in 0..k {
            for j in 0..m {
                out[i * m + j] += a[i * k + p] * b[p * m + j];
            }
        }
    }
    out
}

fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(d);
    while q.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for u in &q {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            q.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    q.concat()
}

/// HSIC ratio on doubly centered Gram matrices.
fn cka_gram_oracle(x: &[f64], dx: usize, y: &[f64], dy: usize) -> f64 {
    let n = x.len() / dx;
    let gram = |z: &[f64], d: usize| {
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                k[i * n + j] = (0..d).map(|c| z[i * d + c] * z[j * d + c]).sum();
            }
        }
        let row: Vec<f64> = (0..n)
            .map(|i| k[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64)
            .collect();
        let all = row.iter().sum::<f64>() / n as f64;
        for i in 0..n {
            for j in 0..n {
                k[i * n + j] += all - row[i] - row[j];
            }
        }
        k
    };
    let (k, l) = (gram(x, dx), gram(y, dy));
    let hsic = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
    hsic(&k, &l) / (hsic(&k, &k) * hsic(&l, &l)).sqrt()
}

fn cka_properties() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for case in 0..CKA_FUZZ_CASES {
        let n = rng.random_range(4..=40);
        let (dx, dy) = (rng.random_range(1..=12), rng.random_range(1..=12));
        let x = random_matrix(&mut rng, n, dx);
        let y = random_matrix(&mut rng, n, dy);
        let cka = |a: &[f64], da: usize, b: &[f64], db: usize| {
            ok(linear_cka(a, da, b, db)).map(|r| r.value)
        };
        let xy = cka(&x, dx, &y, dy)?;
        let q = random_orthogonal(&mut rng, dx);
        let xq = matmul(&x, &q, n, dx, dx);
        let scale = rng.random_range(0.01..100.0);
        let ys: Vec<f64> = y.iter().map(|v| v * scale).collect();
        let checks = [
            ("self", cka(&x, dx, &x, dx)?, 1.0),
            ("symmetry", cka(&y, dy, &x, dx)?, xy),
            ("orthogonal", cka(&xq, dx, &y, dy)?, xy),
            ("rotated self", cka(&x, dx, &xq, dx)?, 1.0),
            ("scale", cka(&x, dx, &ys, dy)?, xy),
            ("gram oracle", xy, cka_gram_oracle(&x, dx, &y, dy)),
        ];
        for (what, got, want) in checks {
            let err = (got - want).abs();
            ensure!(err <= CKA_TOL, "case {case}: {what} off by {err:e}");
            worst = worst.max(err);
        }
    }
    Ok(format!(
        "{CKA_FUZZ_CASES} fuzzed pairs, max deviation {worst:.1e} (tol {CKA_TOL:e})"
    ))
}

fn pyramid_contract() -> Check {
    let (patch, depth, dim) = (16, 12, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for size in [224, 256, 512] {
        let g = size / patch;
        let values = random_matrix(&mut rng, depth * g * g, dim);
        let features = ok(FeatureStack::new(depth, g * g, dim, DType::F64, values))?;
        let params = PyramidParams::identity(dim);
        let modes = [
            PyramidConfig::last_layer(depth),
            ok(PyramidConfig::multi_layer(
                PyramidConfig::default_layers(depth),
                depth,
            ))?,
        ];
        for config in modes {
            let maps: [FeatureMap; 4] = ok(build_pyramid(&features, &config, (g, g), &params))?;
            for (map, stride) in maps.iter().zip([4, 8, 16, 32]) {
                let want = size / stride;
                ensure!(
                    (map.height, map.width, map.channels) == (want, want, dim),
                    "{size}px {:?}: stride {stride} map is {}x{}",
                    config.source_layers,
                    map.height,
                    map.width
                );
            }
        }
    }

    let config = ok(ModelConfig::new(2, 16, 2, 4, (16, 16)))?;
    let params = ok(init_params(&config, 3))?;
    let before = params.clone();
    let data = synth_shapes(8, 16, 4);
    let settings = ProbeSettings {
        epochs: 2,
        batch_size: 4,
        base_lr: 1.0,
        classes: SHAPE_CLASSES,
        seed: 2,
        optimizer: AdamWConfig::default(),
    };
    for mode in [
        ProbeMode::LlFpn,
        ProbeMode::MultiLayer([1, 1, 2, 2]),
        ProbeMode::Lp(vec![1, 2]),
        ProbeMode::Layerwise(1),
    ] {
        ok(train_probe(
            &config,
            &params,
            &data[..6],
            &data[6..],
            &mode,
            &settings,
        ))?;
    }
    ensure!(
        params.iter().all(|(k, v)| before[k].bitwise_eq(v)),
        "backbone changed during probe training"
    );
    Ok("outputs are input/{4,8,16,32} for 224, 256 and 512 in both modes; backbone bitwise-unchanged after probing".into())
}

/// Full pairwise similarity table, then the streaming keep rule over it.
fn dedup_oracle(rows: &[Vec<f64>], t: f64) -> Vec<usize> {
    let unit: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / norm).collect()
        })
        .collect();
    let n = unit.len();
    let sim: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect();
    let mut kept = Vec::new();
    for i in 0..n {
        if kept.iter().all(|&j: &usize| sim[i][j] < t) {
            kept.push(i);
        }
    }
    kept
}

fn dedup_oracle_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut total, mut kept_total) = (0usize, 0usize);
    for case in 0..DEDUP_CASES {
        let n = rng.random_range(1..=100);
        let d = rng.random_range(3..=8);
        let t = DEDUP_THRESHOLDS[case % DEDUP_THRESHOLDS.len()];
        let centers: Vec<Vec<f64>> = (0..rng.random_range(1..=10))
            .map(|_| random_matrix(&mut rng, 1, d))
            .collect();
        let noise = [0.02, 0.1, 0.3, 1.0][rng.random_range(0..4)];
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let c = &centers[rng.random_range(0..centers.len())];
                c.iter()
                    .map(|v| v + noise * rng.random_range(-1.0..1.0))
                    .collect()
            })
            .collect();
        let set = ok(EmbeddingSet::new(
            (0..n).map(|i| i.to_string()).collect(),
            d,
            rows.concat(),
        ))?;
        let kept = ok(greedy_dedup(&set, t))?;
        ensure!(
            kept == dedup_oracle(&rows, t),
            "case {case} (n={n}, t={t}): kept set differs from oracle"
        );
        let mut unit = set.clone();
        ok(unit.normalize())?;
        for (x, &i) in kept.iter().enumerate() {
            for &j in &kept[..x] {
                let s: f64 = unit
                    .row(i)
                    .iter()
                    .zip(unit.row(j))
                    .map(|(a, b)| a * b)
                    .sum();
                ensure!(
                    s < t,
                    "case {case}: kept pair ({j}, {i}) has similarity {s}"
                );
            }
        }
        total += n;
        kept_total += kept.len();
    }
    Ok(format!("{DEDUP_CASES} instances equal the brute-force greedy; {kept_total} of {total} records kept"))
}

fn manifest_arithmetic() -> Check {
    let [a_size, b_size, c_size] = MIX_SIZES;
    let infrared = (0..a_size)
        .map(|i| {
            ImageRecord::new(format!("infpre/{i}.png"), "infpre", Modality::Infrared)
                .with_frame(format!("seq{}", i / 1000), (i % 1000) as u64)
        })
        .collect();
    let mut a = ok(CorpusManifest::new(infrared))?;
    a.provenance
        .push(Provenance::new("interval_sample", "pre-sampled sequences"));

    let per_class = b_size / MIX_CLASSES + 10;
    let labeled = (0..MIX_CLASSES * per_class)
        .map(|i| {
            ImageRecord::new(format!("in1k/{i}.jpg"), "imagenet", Modality::Rgb)
                .with_class(format!("n{:05}", i % MIX_CLASSES))
        })
        .collect();
    let b = ok(balanced_subsample(
        &ok(CorpusManifest::new(labeled))?,
        b_size,
        13,
    ))?;
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &b.records {
        *counts
            .entry(r.class_label.as_deref().unwrap_or_default())
            .or_default() += 1;
    }
    ensure!(
        counts.len() == MIX_CLASSES && counts.values().all(|&c| c == b_size / MIX_CLASSES),
        "balanced subsample is uneven"
    );
    let c = ok(CorpusManifest::new(
        (0..c_size)
            .map(|i| ImageRecord::new(format!("coco/{i}.jpg"), "coco", Modality::Rgb))
            .collect(),
    ))?;

    let mixed = ok(mix_manifests(&[
        (a, SourceTransform::None),
        (b, SourceTransform::Grayscale),
        (c, SourceTransform::Grayscale),
    ]))?;
    ensure!(
        mixed.len() == MIX_TOTAL,
        "mixed manifest has {} records",
        mixed.len()
    );
    let back = ok(parse_manifest(&write_manifest(&mixed)))?;
    ensure!(
        back.len() == MIX_TOTAL && back.provenance == mixed.provenance,
        "manifest round trip lost data"
    );
    let steps: Vec<&str> = back.provenance.iter().map(|p| p.step.as_str()).collect();
    for want in [
        "source0/interval_sample",
        "source1/balanced_subsample",
        "mix",
    ] {
        ensure!(steps.contains(&want), "provenance lacks {want}");
    }
    let grayscale = back
        .provenance
        .iter()
        .filter(|p| p.step == "mix" && p.detail.contains("grayscale"))
        .count();
    ensure!(
        grayscale == 2,
        "{grayscale} sources record the grayscale transform"
    );
    Ok(format!(
        "{a_size} + {b_size} + {c_size} = {} records with {} provenance entries",
        back.len(),
        back.provenance.len()
    ))
}

fn multilayer_linearity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for case in 0..LINEARITY_CASES {
        let (depth, heads, tokens) = (
            rng.random_range(2..=6),
            rng.random_range(1..=4),
            rng.random_range(2..=10),
        );
        let layers: Vec<LayerAttention> = (0..depth)
            .map(|_| random_layer(&mut rng, heads, tokens))
            .collect();
        let mut indices: Vec<usize> = (1..=depth).collect();
        indices.shuffle(&mut rng);
        indices.truncate(rng.random_range(1..=depth));
        let student = random_student(&mut rng, heads * indices.len(), tokens);
        let joint = ok(concat_multilayer_targets(&layers, &indices))?;
        let combined = ok(attention_kl_loss(&joint, &student))?;
        let block = heads * tokens * tokens;
        let mut per_layer = 0.0;
        for (k, &idx) in indices.iter().enumerate() {
            let part = LayerAttention {
                heads,
                tokens,
                values: student.values[k * block..(k + 1) * block].to_vec(),
            };
            per_layer += ok(attention_kl_loss(&layers[idx - 1], &part))?;
        }
        let err = (combined - per_layer / indices.len() as f64).abs();
        ensure!(
            err <= LINEARITY_TOL,
            "case {case}: concatenated loss differs by {err:e}"
        );
        worst = worst.max(err);
    }
    Ok(format!(
        "{LINEARITY_CASES} fuzzed target sets, max gap {worst:.1e} (tol {LINEARITY_TOL:e})"
    ))
}

struct Criterion {
    id: &'static str,
    name: &'static str,
    budget: Duration,
    run: fn() -> Check,
}

const fn criterion(
    id: &'static str,
    name: &'static str,
    secs: u64,
    run: fn() -> Check,
) -> Criterion {
    Criterion {
        id,
        name,
        budget: Duration::from_secs(secs),
        run,
    }
}

const CRITERIA: [Criterion; 12] = [
    criterion("1", "NMI extremes", 1, nmi_extremes),
    criterion("2", "NMI oracle equivalence", 30, nmi_oracle_equivalence),
    criterion("3", "layer selection fixture", 1, layer_selection_fixture),
    criterion("4", "KL loss correctness", 60, kl_correctness),
    criterion("5", "full-model gradient check", 300, full_model_gradient),
    criterion(
        "6",
        "desk-scale distillation convergence",
        600,
        desk_convergence,
    ),
    criterion("7", "CKA properties", 10, cka_properties),
    criterion("8", "pyramid shape contract", 60, pyramid_contract),
    criterion("9", "dedup oracle", 30, dedup_oracle_check),
    criterion("10", "manifest arithmetic", 30, manifest_arithmetic),
    criterion("11", "multilayer-target linearity", 5, multilayer_linearity),
    criterion("S1", "probe gain of the distilled student", 120, probe_gain),
];

fn main() {
    let mut failed = 0;
    for c in &CRITERIA {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let result = match result {
            Ok(_) if elapsed > c.budget => {
                Err(format!("took {elapsed:.1?}, budget {:?}", c.budget))
            }
            other => other,
        };
        let (tag, detail) = match result {
            Ok(d) => ("PASS", d),
            Err(e) => {
                failed += 1;
                ("FAIL", e)
            }
        };
        println!("{tag} [{}] {} ({elapsed:.2?}): {detail}", c.id, c.name);
    }
    println!(
        "acceptance: {} of {} criteria passed",
        CRITERIA.len() - failed,
        CRITERIA.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
