//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion.
//!
//! Criteria 4-8 train the full default pipeline, which takes tens of minutes
//! on one core. Point `SWITCHFOLD_ACCEPTANCE_DIR` at a directory to keep the
//! trained artifacts and reuse them on the next run. Failures are reported
//! but only turn into a non-zero exit with `SWITCHFOLD_ACCEPTANCE_STRICT=1`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use switchfold::analysis::{analyze, attractor_convergence_multi, StateKind};
use switchfold::cae::{grad_check_cae, relative_error, CaeSpec};
use switchfold::checkpoint::{CaeCheckpoint, MtrnnCheckpoint};
use switchfold::config::{Cs0Policy, ExperimentConfig};
use switchfold::mtrnn::{bptt, forward_sequence, forward_step, init_params, Cs0Bank, MtrnnParams, MtrnnSpec, MtrnnState};
use switchfold::numerics::{Rng, Tensor};
use switchfold::pipeline::{build_dataset, cae_frames, evaluate, scheduled_rollout, train_cae_stage, train_mtrnn_stage, Dataset, Model, RolloutReport};
use switchfold::taskworld::{apply_fold, classify_fold, gen_trajectory, valid_subtasks, EpisodeSpec, GarmentState, POSITION_COUNT};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Straight-line leaky integrator over an explicit source vector.
fn oracle_step(w: &[f64], b: &[f64], taus: &[f64], u: &[f64], x: &[f64], input: &[f64]) -> Vec<f64> {
    let n = u.len();
    let mut source = x.to_vec();
    source[..input.len()].copy_from_slice(input);
    let mut next = vec![0.0; n];
    for i in 0..n {
        let mut sum = 0.0;
        for j in 0..n {
            sum += w[i * n + j] * source[j];
        }
        sum += b[i];
        next[i] = (1.0 - 1.0 / taus[i]) * u[i] + sum / taus[i];
    }
    next
}

fn criterion_1() -> Outcome {
    let mut rng = Rng::new(101);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let taus = [1.0, rng.uniform(1.0, 10.0), rng.uniform(10.0, 100.0)];
        let (t_io, t_cf, t_cs) = (taus[0], taus[1].min(taus[2]), taus[1].max(taus[2]));
        let spec = MtrnnSpec::new(2, 2, 2, [t_io, t_cf, t_cs]).unwrap();
        let params = init_params(&spec, &mut rng, 2.0).unwrap();
        let cs0 = [rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0)];
        let mut state = MtrnnState::initial(&spec, &cs0).unwrap();
        for _ in 0..3 {
            let input = [rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)];
            let next = forward_step(&state, &input, &params, &spec).unwrap();
            let expect = oracle_step(params.weights.data(), params.bias.data(), &spec.taus(), &state.u, &state.x, &input);
            for (a, e) in next.u.iter().zip(&expect) {
                worst = worst.max((a - e).abs());
            }
            for (x, u) in next.x.iter().zip(&next.u) {
                worst = worst.max((x - sigmoid(*u)).abs());
            }
            state = next;
        }
    }
    // With every tau at 1 the step is a plain recurrent layer: u = W x + b.
    let spec = MtrnnSpec::new(2, 2, 2, [1.0, 1.0, 1.0]).unwrap();
    let params = init_params(&spec, &mut rng, 1.0).unwrap();
    let state = MtrnnState::initial(&spec, &[0.3, -0.7]).unwrap();
    let input = [0.25, 0.75];
    let next = forward_step(&state, &input, &params, &spec).unwrap();
    let mut source = state.x.clone();
    source[..2].copy_from_slice(&input);
    let vanilla: Vec<f64> = (0..6)
        .map(|i| (0..6).map(|j| params.weights.data()[i * 6 + j] * source[j]).sum::<f64>() + params.bias.data()[i])
        .collect();
    let exact = next.u == vanilla;
    outcome(worst < 1e-12 && exact, format!("max deviation from oracle {worst:.2e}, tau=1 matches vanilla step exactly: {exact}"))
}

fn mean_loss(seq: &Tensor, cs0: &[f64], params: &MtrnnParams, spec: &MtrnnSpec) -> f64 {
    let (out, _) = forward_sequence(seq, cs0, params, spec).unwrap();
    let t = seq.shape()[0];
    let mut sse = 0.0;
    for s in 0..t - 1 {
        for d in 0..spec.io_count {
            sse += (out.row(s)[d] - seq.row(s + 1)[d]).powi(2);
        }
    }
    sse / ((t - 1) * spec.io_count) as f64
}

fn criterion_2() -> Outcome {
    let spec = MtrnnSpec::new(4, 6, 3, [1.0, 3.0, 12.0]).unwrap();
    let mut rng = Rng::new(202);
    let mut params = init_params(&spec, &mut rng, 0.8).unwrap();
    params.bias.data_mut().iter_mut().for_each(|b| *b = rng.uniform(-0.5, 0.5));
    let seq = Tensor::new(vec![10, 4], (0..40).map(|_| rng.uniform(0.1, 0.9)).collect()).unwrap();
    let mut bank = Cs0Bank::zeros(1, 3);
    bank.entries[0] = vec![0.4, -0.6, 0.2];
    let g = bptt(&[(&seq, 0)], &params, &bank, &spec).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mask = spec.mask();
    for k in 0..params.weights.len() {
        if mask[k] == 0.0 {
            continue;
        }
        let orig = params.weights.data()[k];
        params.weights.data_mut()[k] = orig + h;
        let plus = mean_loss(&seq, &bank.entries[0], &params, &spec);
        params.weights.data_mut()[k] = orig - h;
        let minus = mean_loss(&seq, &bank.entries[0], &params, &spec);
        params.weights.data_mut()[k] = orig;
        worst = worst.max(relative_error(g.weights[k], (plus - minus) / (2.0 * h)));
    }
    for k in 0..params.bias.len() {
        let orig = params.bias.data()[k];
        params.bias.data_mut()[k] = orig + h;
        let plus = mean_loss(&seq, &bank.entries[0], &params, &spec);
        params.bias.data_mut()[k] = orig - h;
        let minus = mean_loss(&seq, &bank.entries[0], &params, &spec);
        params.bias.data_mut()[k] = orig;
        worst = worst.max(relative_error(g.bias[k], (plus - minus) / (2.0 * h)));
    }
    for k in 0..3 {
        let mut c = bank.entries[0].clone();
        c[k] += h;
        let plus = mean_loss(&seq, &c, &params, &spec);
        c[k] -= 2.0 * h;
        let minus = mean_loss(&seq, &c, &params, &spec);
        worst = worst.max(relative_error(g.cs0[0][k], (plus - minus) / (2.0 * h)));
    }
    let cae = grad_check_cae(&CaeSpec::tiny(), &mut Rng::new(203)).unwrap();
    outcome(
        worst < 1e-4 && cae.max() < 1e-4,
        format!(
            "BPTT max relative error {worst:.2e}; CAE conv {:.2e} deconv {:.2e} bn {:.2e} dense {:.2e} over {} params",
            cae.conv, cae.deconv, cae.batch_norm, cae.dense, cae.checked
        ),
    )
}

fn criterion_3(config: &ExperimentConfig) -> Outcome {
    let mut checked = 0;
    let mut failures = Vec::new();
    for pos in 1..=POSITION_COUNT {
        let mut seen = BTreeSet::new();
        let mut frontier = vec![GarmentState::fresh(pos).unwrap()];
        while let Some(g) = frontier.pop() {
            if !seen.insert(format!("{g:?}")) {
                continue;
            }
            for s in valid_subtasks(&g) {
                let traj = gen_trajectory(s, &g, config.steps).unwrap();
                checked += 1;
                if classify_fold(&traj.motor, &g) != Some(s) {
                    failures.push(format!("{s}@{pos} from {g:?}"));
                }
                frontier.push(apply_fold(&g, s).unwrap());
            }
        }
    }
    let mut detail = format!("{} of {checked} legal (state, subtask, position) triples round-trip", checked - failures.len());
    if !failures.is_empty() {
        detail.push_str(&format!(", mismatched: {}", failures.join(", ")));
    }
    outcome(failures.is_empty(), detail)
}

struct Trained {
    config: ExperimentConfig,
    model: Model,
    dataset: Dataset,
    pixel_variance: f64,
}

fn train_or_load(root: &Path) -> Trained {
    let mut config = ExperimentConfig::default();
    config.artifacts = root.to_path_buf();
    let paths = config.paths();
    std::fs::create_dir_all(root).unwrap();
    let t = Instant::now();
    let cae = if paths.cae().exists() {
        CaeCheckpoint::load(&paths.cae()).unwrap()
    } else {
        let c = train_cae_stage(&config).unwrap();
        c.save(&paths.cae()).unwrap();
        eprintln!("  cae trained in {:.0?}", t.elapsed());
        c
    };
    let dataset = if paths.dataset().exists() {
        Dataset::load(&paths.dataset()).unwrap()
    } else {
        let d = build_dataset(&config.data.training_episodes().unwrap(), config.steps, &cae).unwrap();
        d.save(&paths.dataset()).unwrap();
        d
    };
    let t = Instant::now();
    let mtrnn = if paths.mtrnn().exists() {
        MtrnnCheckpoint::load(&paths.mtrnn()).unwrap()
    } else {
        let m = train_mtrnn_stage(&config, &dataset, "dataset.bin", &mut |e, loss, _, _| {
            if e % 2000 == 0 {
                eprintln!("  mtrnn epoch {e} loss {loss:.6}");
            }
            true
        })
        .unwrap();
        m.save(&paths.mtrnn()).unwrap();
        eprintln!("  mtrnn trained in {:.0?}", t.elapsed());
        m
    };
    let (_, holdout) = cae_frames(&config.data.training_episodes().unwrap(), config.steps, config.cae.frame_stride, config.cae.holdout_every).unwrap();
    Trained {
        model: Model::new(mtrnn, cae, &dataset).unwrap(),
        pixel_variance: holdout.pixel_variance(),
        config,
        dataset,
    }
}

fn criterion_4(t: &Trained) -> Outcome {
    let mse = t.model.cae.holdout_mse.unwrap_or(f64::NAN);
    outcome(
        mse < 0.005 && mse < t.pixel_variance,
        format!("held-out per-pixel MSE {mse:.5} (pixel variance {:.5})", t.pixel_variance),
    )
}

fn criteria_5_6(t: &Trained) -> (Outcome, Outcome) {
    let episodes = t.config.data.test_episodes().unwrap();
    let (summary, reports) = evaluate(&t.model, &episodes, 10, 0, t.config.rollout.feature_jitter, Cs0Policy::Mean).unwrap();
    let all_branches = reports.iter().filter(|r| r.branches.iter().all(|b| b.matched)).count();
    let c5 = outcome(
        summary.success_rate >= 0.9,
        format!(
            "{} of {} trials with 4/4 branches and the correct final fold ({} with 4/4 branches)",
            summary.trials.iter().filter(|x| x.success).count(),
            summary.trials.len(),
            all_branches
        ),
    );
    let worst = summary.trials.iter().map(|x| x.motor_mse).fold(0.0, f64::max);
    let c6 = outcome(
        summary.mean_motor_mse < 0.01,
        format!("mean normalized motor MSE {:.5} per dim per step (worst trial {worst:.5})", summary.mean_motor_mse),
    );
    (c5, c6)
}

fn pattern4_rollouts(model: &Model, config: &ExperimentConfig, cs0: Cs0Policy) -> Vec<(String, RolloutReport, EpisodeSpec)> {
    (1..=POSITION_COUNT)
        .map(|pos| {
            let ep = EpisodeSpec::pattern(4, pos).unwrap();
            let r = scheduled_rollout(model, &ep, config.rollout.feature_jitter, 0, cs0).unwrap();
            (ep.label(), r, ep)
        })
        .collect()
}

fn criteria_7_8(t: &Trained) -> (Outcome, Outcome) {
    let runs = pattern4_rollouts(&t.model, &t.config, Cs0Policy::Mean);
    let traces: Vec<_> = runs.iter().map(|(l, r, ep)| (l.clone(), &r.trace, ep.subtasks.clone())).collect();
    let (report, _) = analyze(&traces, t.config.steps, StateKind::Internal).unwrap();

    let untrained = train_mtrnn_stage(
        &ExperimentConfig {
            mtrnn: switchfold::config::MtrnnStageConfig {
                train: switchfold::mtrnn::MtrnnTrainConfig {
                    max_epochs: 0,
                    ..t.config.mtrnn.train.clone()
                },
                ..t.config.mtrnn.clone()
            },
            ..t.config.clone()
        },
        &t.dataset,
        "dataset.bin",
        &mut |_, _, _, _| true,
    )
    .unwrap();
    let control_model = Model::new(untrained, t.model.cae.clone(), &t.dataset).unwrap();
    let control_runs = pattern4_rollouts(&control_model, &t.config, Cs0Policy::Mean);
    let control = attractor_convergence_multi(&control_runs.iter().map(|(_, r, _)| &r.trace).collect::<Vec<_>>(), t.config.steps).unwrap();

    let a = &report.attractor;
    let c7 = outcome(
        a.ratio < 0.2 && control.ratio > 0.5,
        format!(
            "trained ratio {:.3} (onset-anchored {:.3}), untrained control {:.3}",
            a.ratio,
            a.onset_ratio.unwrap_or(f64::NAN),
            control.ratio
        ),
    );
    let cf = &report.cf_by_instruction;
    let cs = &report.cs_by_subtask;
    let be = report.cf_by_subtask.distance("B", "E").unwrap_or(f64::NAN);
    let ba = report.cf_by_subtask.distance("B", "A").unwrap_or(f64::NAN);
    let c8 = outcome(
        report.cf_integrates_signals() && cs.groups.len() == 4 && cs.distinct(),
        format!(
            "Cf silhouette {:.3}, d(B,E) {be:.3} vs d(B,A) {ba:.3}; Cs {} groups, min centroid distance {:.3} vs mean spread {:.3}",
            cf.silhouette,
            cs.groups.len(),
            cs.min_between(),
            cs.mean_spread()
        ),
    );
    (c7, c8)
}

fn reduced_config(root: PathBuf) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.artifacts = root;
    c.cae.spec = CaeSpec {
        input_size: 64,
        channels: vec![3, 4, 4, 4],
        dense: vec![16],
        feature_dim: 10,
        batch_norm: vec![true; 3],
    };
    c.cae.train.epochs = 2;
    c.cae.frame_stride = 20;
    c.cae.holdout_every = 4;
    c.data.train_positions = vec![1, 6];
    c.mtrnn.cf_count = 12;
    c.mtrnn.cs_count = 4;
    c.mtrnn.train.max_epochs = 20;
    c
}

fn criterion_9() -> Outcome {
    let run = || {
        let config = reduced_config(PathBuf::from("unused"));
        let cae = train_cae_stage(&config).unwrap();
        let dataset = build_dataset(&config.data.training_episodes().unwrap(), config.steps, &cae).unwrap();
        let mtrnn = train_mtrnn_stage(&config, &dataset, "dataset.bin", &mut |_, _, _, _| true).unwrap();
        let bytes = (
            dataset.to_container().unwrap().to_bytes().unwrap(),
            cae.to_container().unwrap().to_bytes().unwrap(),
            mtrnn.to_container().unwrap().to_bytes().unwrap(),
        );
        let model = Model::new(mtrnn, cae, &dataset).unwrap();
        let ep = EpisodeSpec::pattern(4, 2).unwrap();
        let report = scheduled_rollout(&model, &ep, config.rollout.feature_jitter, 3, Cs0Policy::Mean).unwrap();
        (bytes, serde_json::to_string(&report).unwrap())
    };
    let (a, ra) = run();
    let (b, rb) = run();
    let same = [a.0 == b.0, a.1 == b.1, a.2 == b.2, ra == rb];
    outcome(
        same.iter().all(|s| *s),
        format!("identical dataset {}, cae {}, mtrnn {}, rollout report {}", same[0], same[1], same[2], same[3]),
    )
}

fn main() {
    let strict = std::env::var("SWITCHFOLD_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let kept = std::env::var_os("SWITCHFOLD_ACCEPTANCE_DIR").map(PathBuf::from);
    let temp = tempfile::tempdir().unwrap();
    let root = kept.unwrap_or_else(|| temp.path().join("artifacts"));

    let mut results: Vec<(u8, &str, Outcome)> = Vec::new();
    let mut report = |n: u8, name: &'static str, o: Outcome| {
        println!("criterion {n} {name}: {} - {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    let start = Instant::now();
    report(1, "mtrnn step oracle", criterion_1());
    report(2, "gradient fidelity", criterion_2());
    report(3, "simulator round trip", criterion_3(&ExperimentConfig::default()));
    eprintln!("training the default pipeline under {}", root.display());
    let trained = train_or_load(&root);
    report(4, "cae quality", criterion_4(&trained));
    let (c5, c6) = criteria_5_6(&trained);
    report(5, "end-to-end switching", c5);
    report(6, "motor accuracy", c6);
    let (c7, c8) = criteria_7_8(&trained);
    report(7, "point attractor", c7);
    report(8, "signal integration", c8);
    report(9, "determinism", criterion_9());

    let failed: Vec<u8> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} criteria passed in {:.0?}{}",
        results.len() - failed.len(),
        results.len(),
        start.elapsed(),
        if failed.is_empty() { String::new() } else { format!(", failed {failed:?}") }
    );
    if strict && !failed.is_empty() {
        std::process::exit(1);
    }
}
