//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line each and exits non-zero if any fails.
//!
//! `cargo test --release -p vidprism-cli --test acceptance`

#[path = "../../core/tests/support/grad_suite.rs"]
mod grad_suite;
#[path = "../../core/tests/support/oracle_cases.rs"]
mod oracle_cases;
#[path = "../../core/tests/support/oracles.rs"]
mod oracles;

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng;
use vidprism::dbi::{self, DbiConfig, FusionParams, GateNet, PathwaySet};
use vidprism::feature_io::{generate_synthetic, read_vpf_from, write_vpf_to, Dataset, FeatureSequence, SyntheticSpec};
use vidprism::model::{Model, ModelConfig};
use vidprism::objectives::{self, LossWeights};
use vidprism::params::rng_stream;
use vidprism::rgsta::{self, RgstaConfig, RgstaParams};
use vidprism::trainer::{
    self, batch_forward, linear_probe, split_dataset, AblationAxis, Cohort, RunReport, TrainConfig, TrainSinks,
};
use vidprism::{Graph, ParamStore, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn softmax(x: &[f64]) -> Vec<f64> {
    oracles::softmax(x)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0, String::new());
    for seed in 0..4 {
        for (name, r) in grad_suite::all_reports(seed) {
            if r.coords_checked == 0 {
                return outcome(false, format!("{name} checked no coordinates"));
            }
            if r.max_rel_error >= worst.0 {
                worst = (r.max_rel_error, format!("{name} seed {seed} at {:?}", r.worst));
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst.0 < 1e-4 && elapsed < Duration::from_secs(120),
        format!(
            "max rel error {:.2e} ({}), {:.1} s",
            worst.0,
            worst.1,
            elapsed.as_secs_f64()
        ),
    )
}

fn oracle_equivalence() -> Outcome {
    type ErrorOf = fn(u64) -> f64;
    let cases: [(&str, ErrorOf); 4] = [
        ("soft_merge_group", oracle_cases::soft_merge_error),
        ("expert_forward", oracle_cases::expert_error),
        ("readout", oracle_cases::readout_error),
        ("fast_to_slow", oracle_cases::fast_to_slow_error),
    ];
    let mut parts = Vec::new();
    let mut pass = true;
    for (name, f) in cases {
        let err = (0..20).map(f).fold(0.0, f64::max);
        pass &= err < 1e-10;
        parts.push(format!("{name} {err:.1e}"));
    }
    outcome(pass, format!("20 seeds each: {}", parts.join(", ")))
}

fn shape_law() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for t in [8, 32] {
        for rates in [vec![2, 4, 8], vec![2, 4, 8, 16]] {
            let mut cfg = ModelConfig::new(8, 4);
            cfg.rates = rates.clone();
            cfg.heads = 2;
            let model = Model::new(cfg).unwrap();
            let clip = oracles::random_tensor(t as u64, &[t, 8], 1.0);
            let mut g = Graph::new();
            match model.forward(&mut g, &clip) {
                Ok(out) => {
                    let lens: Vec<usize> = out.expert_outputs.iter().map(|&e| g.shape(e)[0]).collect();
                    let paths: Vec<usize> = out.pathways.iter().map(|&p| g.shape(p)[0]).collect();
                    let expected: Vec<usize> = rates.iter().map(|r| t / r).collect();
                    let total: usize = lens.iter().sum();
                    pass &= lens == expected && paths == expected && total == expected.iter().sum::<usize>();
                    parts.push(format!("T={t} {rates:?} -> {lens:?} sum {total}"));
                }
                // A rate that does not divide T must be refused, not truncated.
                Err(vidprism::Error::Rate { t: et, rate }) => {
                    pass &= t % rate != 0 && et == t;
                    parts.push(format!("T={t} {rates:?} -> rate error ({rate} does not divide {t})"));
                }
                Err(e) => {
                    pass = false;
                    parts.push(format!("T={t} {rates:?} -> {e}"));
                }
            }
        }
    }
    outcome(pass, parts.join("; "))
}

fn loss_invariants() -> Outcome {
    let mut rng = rng_stream(4, 900);
    let mut min_rank = f64::INFINITY;
    let mut max_self = 0.0f64;
    for _ in 0..1000 {
        let t = rng.random_range(2..16);
        let scale = rng.random_range(0.1..10.0);
        let temp = rng.random_range(0.2..4.0);
        let a: Vec<f64> = (0..t).map(|_| rng.random_range(-scale..scale)).collect();
        let b: Vec<f64> = (0..t).map(|_| rng.random_range(-scale..scale)).collect();
        let mut g = Graph::new();
        let p = g.constant(Tensor::from_vec(a));
        let q = g.constant(Tensor::from_vec(b));
        let l = objectives::loss_rank(&mut g, &[p], &[q], temp).unwrap();
        min_rank = min_rank.min(g.value(l).item());
        let same = objectives::loss_rank(&mut g, &[q], &[q], temp).unwrap();
        max_self = max_self.max(g.value(same).item().abs());
    }

    let mut gate_err = 0.0f64;
    for n in 1..=6 {
        for b in [1, 3, 8] {
            let mut g = Graph::new();
            let uniform = g.constant(Tensor::new(&[b, n], vec![1.0 / n as f64; b * n]).unwrap());
            let lu = objectives::loss_gate(&mut g, uniform).unwrap();
            gate_err = gate_err.max((g.value(lu).item() - 1.0).abs());
            let mut hot = vec![0.0; b * n];
            for row in 0..b {
                hot[row * n] = 1.0;
            }
            let one_hot = g.constant(Tensor::new(&[b, n], hot).unwrap());
            let lh = objectives::loss_gate(&mut g, one_hot).unwrap();
            gate_err = gate_err.max((g.value(lh).item() - n as f64).abs());
        }
    }

    let mut g = Graph::new();
    let e = oracles::random_tensor(3, &[4, 6], 2.0);
    let experts: Vec<_> = (0..3).map(|_| g.constant(e.clone())).collect();
    let div = objectives::loss_div(&mut g, &[experts.clone(), experts]).unwrap();
    let div_err = (g.value(div).item() - 1.0).abs();

    let recompose_err = recomposition_error();
    let pass = min_rank >= 0.0 && max_self == 0.0 && gate_err <= 1e-12 && div_err <= 1e-12 && recompose_err <= 1e-12;
    outcome(
        pass,
        format!(
            "rank min {min_rank:.3e} over 1000 trials, self {max_self:.1e}; gate err {gate_err:.1e}; div err {div_err:.1e}; recomposition err {recompose_err:.1e}"
        ),
    )
}

/// Recomputes every loss term of a seeded batch from the forward outputs and
/// compares with the library's breakdown.
fn recomposition_error() -> f64 {
    let spec = SyntheticSpec {
        num_classes: 4,
        clips_per_class: 2,
        t: 16,
        d: 8,
        content_axis_count: 2,
        seed: 11,
        ..Default::default()
    };
    let ds = generate_synthetic(&spec).unwrap();
    let mut mc = ModelConfig::new(8, 4);
    mc.rates = vec![2, 4, 8];
    mc.heads = 2;
    mc.seed = 11;
    let mut model = Model::new(mc).unwrap();
    oracles::randomize(&mut model.params, 11, 0.5);
    let clips: Vec<&FeatureSequence> = ds.clips.iter().collect();
    let w = LossWeights::default();
    let mut g = Graph::new();
    let out = batch_forward(&mut g, &model, &clips, &w).unwrap();

    let (mut cls, mut rank, mut div, mut gate_cols) = (0.0, 0.0, 0.0, vec![0.0; 3]);
    let mut rank_terms = 0usize;
    for clip in &clips {
        let mut h = Graph::new();
        let f = model.forward(&mut h, &clip.frames).unwrap();
        let logits = h.value(f.logits).data().to_vec();
        cls -= softmax(&logits)[clip.label].ln();
        for trace in &f.traces {
            let p = softmax(&trace.s_tgt.iter().map(|v| v / w.rank_temperature).collect::<Vec<_>>());
            let q = softmax(&trace.s_pred.iter().map(|v| v / w.rank_temperature).collect::<Vec<_>>());
            rank += p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum::<f64>();
            rank_terms += 1;
        }
        let means: Vec<Vec<f64>> = f
            .expert_outputs
            .iter()
            .map(|&e| {
                let m = oracles::mat(h.value(e));
                (0..m[0].len())
                    .map(|c| m.iter().map(|r| r[c]).sum::<f64>() / m.len() as f64)
                    .collect()
            })
            .collect();
        let mut pairs = 0.0;
        let mut sims = 0.0;
        for i in 0..means.len() {
            for j in i + 1..means.len() {
                let dot: f64 = means[i].iter().zip(&means[j]).map(|(a, b)| a * b).sum();
                let na = means[i].iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb = means[j].iter().map(|v| v * v).sum::<f64>().sqrt();
                sims += dot / (na * nb).max(objectives::DIV_EPS);
                pairs += 1.0;
            }
        }
        div += sims / pairs;
        for (c, v) in gate_cols.iter_mut().zip(h.value(f.weights).data()) {
            *c += v;
        }
    }
    let b = clips.len() as f64;
    let (cls, rank, div) = (cls / b, rank / rank_terms as f64, div / b);
    let gate = 3.0 * gate_cols.iter().map(|c| (c / b).powi(2)).sum::<f64>();
    let total = cls + w.lambda_rank * rank + w.lambda_div * div + w.lambda_gate * gate;
    let bd = out.breakdown;
    [
        bd.cls - cls,
        bd.rank - rank,
        bd.div - div,
        bd.gate - gate,
        bd.total - total,
        bd.total - (bd.cls + w.lambda_rank * bd.rank + w.lambda_div * bd.div + w.lambda_gate * bd.gate),
    ]
    .iter()
    .map(|d| d.abs())
    .fold(0.0, f64::max)
}

fn degeneracy_laws() -> Outcome {
    let mut hard_ok = true;
    for seed in 0..20 {
        for rate in [2, 4, 8] {
            let mut store = ParamStore::new(seed);
            let params = RgstaParams::new(&mut store, "r", 8, 4);
            oracles::randomize(&mut store, seed, 0.5);
            let mut cfg = RgstaConfig::new(rate, 8);
            cfg.metric_dim = 4;
            cfg.delta = 0.0;
            let frames = oracles::random_tensor(seed, &[16, 8], 1.0);
            let mut g = Graph::new();
            let x = g.constant(frames);
            let (soft, soft_trace, _) = rgsta::aggregate(&mut g, &store, &params, &cfg, x).unwrap();
            let (hard, hard_trace, _) = rgsta::hard_sample(&mut g, &store, &params, &cfg, x).unwrap();
            let same_bits = g
                .value(soft)
                .data()
                .iter()
                .zip(g.value(hard).data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            hard_ok &= same_bits && soft_trace.kept_indices() == hard_trace.kept_indices();
        }
    }

    let mut identity_ok = true;
    for seed in 0..20 {
        let mut store = ParamStore::new(seed);
        let gates = GateNet::new(&mut store, "dbi", 3, 4);
        let fusion = FusionParams::new(&mut store, "dbi", 3, 4, 3);
        oracles::randomize(&mut store, seed, 2.0);
        let inputs: Vec<Tensor> = [2u64, 4, 8]
            .into_iter()
            .map(|r| oracles::random_tensor(seed + r, &[16 / r as usize, 4], 1.0))
            .collect();
        let mut g = Graph::new();
        let vars = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let pset = PathwaySet::new(&g, vars, vec![2, 4, 8]).unwrap();
        let cfg = DbiConfig {
            threshold: 1.01,
            ..Default::default()
        };
        let (out, gm) = dbi::interact(&mut g, &store, &pset, &gates, &fusion, &cfg).unwrap();
        identity_ok &= out.pathways.iter().zip(&inputs).all(|(&p, t)| g.value(p) == t);
        identity_ok &= gm.active.iter().flatten().all(|a| !a);
    }

    let mut single_ok = true;
    for seed in 0..5 {
        let mut mc = ModelConfig::new(8, 3);
        mc.rates = vec![4];
        mc.heads = 2;
        mc.seed = seed;
        let model = Model::new(mc).unwrap();
        let clip = oracles::random_tensor(seed, &[16, 8], 1.0);
        let (_, w) = model.predict(&clip).unwrap();
        single_ok &= w == vec![1.0];
    }
    outcome(
        hard_ok && identity_ok && single_ok,
        format!("delta=0 bit-exact hard sampling {hard_ok}; theta=1.01 identity {identity_ok}; single expert W=1 {single_ok}"),
    )
}

fn determinism(scratch: &Path) -> Outcome {
    let cfg = scratch.join("determinism.toml");
    fs::write(&cfg, "out_dir = \"determinism\"\nclips_per_class = 8\nepochs = 2\n").unwrap();
    let run = || {
        let o = Command::new(env!("CARGO_BIN_EXE_vidprism"))
            .args(["train", "--config", cfg.to_str().unwrap()])
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        fs::read(scratch.join("determinism/report.json")).unwrap()
    };
    let first = run();
    let second = run();
    outcome(
        first == second,
        format!("two runs, {} byte reports, identical: {}", first.len(), first == second),
    )
}

struct DeskRun {
    report: RunReport,
    elapsed: Duration,
}

fn desk_run() -> DeskRun {
    let ds = generate_synthetic(&SyntheticSpec::default()).unwrap();
    let (train_set, eval_set) = split_dataset(&ds, 0.25, 0).unwrap();
    let mut model = Model::new(ModelConfig::new(ds.dim, ds.num_classes)).unwrap();
    let start = Instant::now();
    let report = trainer::train(
        &mut model,
        &train_set,
        &eval_set,
        &TrainConfig::default(),
        &mut TrainSinks::default(),
    )
    .unwrap();
    DeskRun {
        report,
        elapsed: start.elapsed(),
    }
}

fn desk_learning(run: &DeskRun) -> Outcome {
    let ds = generate_synthetic(&SyntheticSpec::default()).unwrap();
    let (train_set, eval_set) = split_dataset(&ds, 0.25, 0).unwrap();
    let probe = linear_probe(&train_set, &eval_set, 500, 0.05, 0).unwrap();
    let r = &run.report;
    let best = r.epochs.iter().filter_map(|e| e.eval_accuracy).fold(0.0, f64::max);
    let first90 = r
        .epochs
        .iter()
        .find(|e| e.eval_accuracy.is_some_and(|a| a >= 0.9))
        .map(|e| e.epoch);
    let pass = r.final_eval_accuracy >= 0.9 && probe.eval_accuracy <= 0.6 && run.elapsed < Duration::from_secs(15 * 60);
    outcome(
        pass,
        format!(
            "model eval {:.4} after {} epochs (best {best:.4}, first >= 0.9 at epoch {first90:?}); frame-mean probe eval {:.4}; {:.0} s",
            r.final_eval_accuracy,
            r.epochs.len(),
            probe.eval_accuracy,
            run.elapsed.as_secs_f64()
        ),
    )
}

const ABLATION_EPOCHS: usize = 3;

fn ablation_direction() -> Outcome {
    let acc = |axis, a: &str, b: &str| -> (Vec<f64>, Vec<f64>) {
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for seed in 0..5 {
            let spec = SyntheticSpec {
                seed,
                ..Default::default()
            };
            let ds: Dataset = generate_synthetic(&spec).unwrap();
            let (tr, ev) = split_dataset(&ds, 0.25, seed).unwrap();
            let mut mc = ModelConfig::new(ds.dim, ds.num_classes);
            mc.seed = seed;
            let cfg = TrainConfig {
                epochs: ABLATION_EPOCHS,
                seed,
                ..Default::default()
            };
            let table = trainer::run_ablation(axis, &mc, &cfg, &tr, &ev).unwrap();
            let get = |name: &str| table.rows.iter().find(|r| r.variant == name).unwrap().eval_accuracy;
            xs.push(get(a));
            ys.push(get(b));
        }
        (xs, ys)
    };
    let (rgsta, hard) = acc(AblationAxis::Aggregation, "rgsta", "hard");
    let (bi, none) = acc(AblationAxis::Interaction, "bidirectional", "none");
    let (mr, mh, mb, mn) = (
        median(rgsta.clone()),
        median(hard.clone()),
        median(bi.clone()),
        median(none.clone()),
    );
    outcome(
        mr >= mh && mb >= mn,
        format!(
            "{ABLATION_EPOCHS} epochs x 5 seeds: median rgsta {mr:.4} vs hard {mh:.4}; bidirectional {mb:.4} vs none {mn:.4} (rgsta {rgsta:.3?}, hard {hard:.3?}, bidirectional {bi:.3?}, none {none:.3?})"
        ),
    )
}

fn expert_heterogeneity(run: &DeskRun) -> Outcome {
    let usage = &run.report.usage;
    let rows: Vec<_> = usage.cohort(Cohort::TestCorrect).collect();
    let mut argmaxes: Vec<usize> = rows.iter().map(|r| rgsta::argmax(&r.weights)).collect();
    argmaxes.sort_unstable();
    argmaxes.dedup();
    let entropy = usage.mean_entropy(Cohort::TestCorrect).unwrap_or(f64::NAN);
    let uniform = (usage.num_experts as f64).ln();
    let pass = argmaxes.len() >= 2 && entropy <= 0.95 * uniform;
    outcome(
        pass,
        format!(
            "{} classes, distinct argmax experts {argmaxes:?}; mean entropy {entropy:.4} vs log N {uniform:.4} (ratio {:.3})",
            rows.len(),
            entropy / uniform
        ),
    )
}

fn golden_dataset() -> Dataset {
    let clip = |id: &str, label, t, data: Vec<f64>| FeatureSequence {
        frames: Tensor::new(&[t, 2], data).unwrap(),
        label,
        clip_id: id.into(),
    };
    Dataset::new(
        vec![
            clip("a", 0, 3, vec![1.0, -2.0, 0.5, 0.25, 3.0, -0.75]),
            clip("ßλ", 2, 1, vec![0.0, 10.0]),
            clip("clip-3", 1, 2, vec![1.5, -1.0, 2.0, 4.0]),
        ],
        3,
        2,
    )
    .unwrap()
}

fn random_dataset(seed: u64) -> Dataset {
    let mut rng = rng_stream(seed, 901);
    let dim = rng.random_range(1..6);
    let n = rng.random_range(0..8);
    let classes = rng.random_range(1..4usize).min(n.max(1));
    let clips = (0..n)
        .map(|i| {
            let t = rng.random_range(0..6);
            let data = (0..t * dim)
                .map(|_| rng.random_range(-100.0f32..100.0) as f64)
                .collect();
            let id: String = (0..rng.random_range(0..12))
                .map(|_| rng.random_range('a'..='ω'))
                .collect();
            FeatureSequence {
                frames: Tensor::new(&[t, dim], data).unwrap(),
                label: i % classes,
                clip_id: id,
            }
        })
        .collect();
    Dataset::new(clips, if n == 0 { 0 } else { classes }, dim).unwrap()
}

fn vpf_format() -> Outcome {
    let golden = fs::read(Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data/golden.vpf")).unwrap();
    let golden_ok =
        write_vpf_to(&golden_dataset()).unwrap() == golden && read_vpf_from(&golden).unwrap() == golden_dataset();
    let mut round_trips = 0;
    for seed in 0..100 {
        let ds = random_dataset(seed);
        let bytes = write_vpf_to(&ds).unwrap();
        let back = read_vpf_from(&bytes).unwrap();
        if back == ds && write_vpf_to(&back).unwrap() == bytes {
            round_trips += 1;
        }
    }
    outcome(
        golden_ok && round_trips == 100,
        format!(
            "golden file ({} bytes) identical {golden_ok}; {round_trips}/100 random round trips exact",
            golden.len()
        ),
    )
}

fn main() {
    let scratch = tempfile::tempdir().unwrap();
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |n, name, o: Outcome| {
        println!(
            "[{}] {n:>2}. {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((n, name, o));
    };
    report(1, "gradient suite", gradient_suite());
    report(2, "oracle equivalence", oracle_equivalence());
    report(3, "shape law", shape_law());
    report(4, "loss invariants", loss_invariants());
    report(5, "degeneracy laws", degeneracy_laws());
    report(6, "determinism", determinism(scratch.path()));
    let desk = desk_run();
    report(7, "desk-scale learning", desk_learning(&desk));
    report(8, "ablation direction", ablation_direction());
    report(9, "expert heterogeneity", expert_heterogeneity(&desk));
    report(10, "VPF format", vpf_format());

    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria pass", results.len());
    } else {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}
