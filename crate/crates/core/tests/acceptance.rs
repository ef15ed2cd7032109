//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line; exits non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use cast_core::alignment::{pcgrad_combine, select_trainable, train_pcgrad, SelectionStrategy, TrainConfig};
use cast_core::autodiff::{Reduction, Tape, Var};
use cast_core::diagnosis::{
    bucketize, conflict_score, functional_sensitivity, optimization_conflict, percentile_rank, Baseline, ConflictMap,
    ConflictRecord, HeadGradient, MapProvenance, ScoreVariant,
};
use cast_core::experiment::{diagnose, pretrain, run_experiment, ExperimentConfig, ExperimentReport};
use cast_core::metrics::{bucket_validity, cost_ratios, spearman, CostRatios, CostTarget, EvalReport};
use cast_core::model::{Batch, BoundParams, HeadId, HeadMask, LayerParam, ModelConfig, ParamId, TransformerModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn desk_config() -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    ExperimentConfig::load(&path).expect("configs/desk.toml loads")
}

// ---------------------------------------------------------------- 1

/// Records the next-token cross-entropy over every position of
/// equal-length prompts; `finals` are the targets after the last token.
fn record_lm_loss(model: &TransformerModel, tape: &mut Tape, prompts: &[Vec<usize>], finals: &[usize]) -> (BoundParams, Var) {
    let p = model.bind(tape, |_| true);
    let batch = Batch::new(prompts, model.config()).unwrap();
    let logits = model.forward_on_tape(tape, &p, &batch, &HeadMask::none()).unwrap();
    let mut targets = Vec::new();
    for (prompt, &last) in prompts.iter().zip(finals) {
        targets.extend_from_slice(&prompt[1..]);
        targets.push(last);
    }
    let keep = vec![true; targets.len()];
    let loss = tape.cross_entropy(logits, &targets, &keep, Reduction::Sum).unwrap();
    (p, loss)
}

fn loss_only(model: &TransformerModel, prompts: &[Vec<usize>], finals: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let (_, loss) = record_lm_loss(model, &mut tape, prompts, finals);
    tape.value(loss)[0]
}

fn gradient_check() -> Outcome {
    let started = Instant::now();
    let cfg = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        vocab_size: 16,
        max_seq_len: 8,
        init_seed: 1234,
    };
    let mut model = TransformerModel::init(cfg).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    // Widen the initial spread so every parameter carries a sizeable gradient.
    for id in 0..model.params().len() {
        for x in model.param_mut(ParamId(id)).data.iter_mut() {
            *x += rng.gen_range(-0.3..0.3);
        }
    }
    let prompts: Vec<Vec<usize>> = (0..4).map(|_| (0..8).map(|_| rng.gen_range(0..16)).collect()).collect();
    let finals: Vec<usize> = (0..4).map(|_| rng.gen_range(0..16)).collect();

    let mut tape = Tape::new();
    let (p, loss) = record_lm_loss(&model, &mut tape, &prompts, &finals);
    tape.backward(loss).map_err(|e| e.to_string())?;
    let grads: Vec<Vec<f64>> = (0..model.params().len()).map(|i| tape.grad(p.get(ParamId(i))).to_vec()).collect();

    let h = 1e-5;
    let sampled = 48;
    let mut worst: f64 = 0.0;
    for _ in 0..sampled {
        let id = rng.gen_range(0..model.params().len());
        let idx = rng.gen_range(0..model.params()[id].data.len());
        let orig = model.params()[id].data[idx];
        model.param_mut(ParamId(id)).data[idx] = orig + h;
        let up = loss_only(&model, &prompts, &finals);
        model.param_mut(ParamId(id)).data[idx] = orig - h;
        let down = loss_only(&model, &prompts, &finals);
        model.param_mut(ParamId(id)).data[idx] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads[id][idx];
        let scale = analytic.abs().max(numeric.abs());
        let rel = if scale == 0.0 { 0.0 } else { (analytic - numeric).abs() / scale };
        worst = worst.max(rel);
    }
    let secs = started.elapsed().as_secs_f64();
    check(
        worst <= 1e-6 && secs < 10.0,
        format!("max relative error {worst:.3e} over {sampled} parameters, {secs:.2} s"),
    )
}

// ---------------------------------------------------------------- 2

fn formula_edges() -> Outcome {
    let g = HeadGradient {
        head: HeadId::new(0, 0),
        vector: vec![0.3, -1.2, 2.5, 0.7],
    };
    let with = |vector: Vec<f64>| HeadGradient { head: g.head, vector };
    let neg = with(g.vector.iter().map(|x| -x).collect());
    let perp = with(vec![1.2, 0.3, 0.0, 0.0]);
    let o = |a: &HeadGradient, b: &HeadGradient| optimization_conflict(a, b).unwrap();
    let e = std::f64::consts::E;
    let s = |a, b| functional_sensitivity(a, b).unwrap();
    let mut failed = Vec::new();
    let mut expect = |name: &str, got: f64, want: f64| {
        if !close(got, want, 1e-12) {
            failed.push(format!("{name}: {got} != {want}"));
        }
    };
    expect("O(g,g)", o(&g, &g), 0.0);
    expect("O(g,-g)", o(&g, &neg), 1.0);
    expect("O(g,perp)", o(&g, &perp), 0.5);
    expect("S(0.5,0.5)", s(0.5, 0.5), 1.0);
    expect("S(1,0)", s(1.0, 0.0), e);
    expect("S(0,1)", s(0.0, 1.0), 1.0 / e);
    expect("C(0,s)", conflict_score(0.0, 2.3).unwrap(), 0.0);
    let other = with(vec![-0.4, 0.9, 1.1, -2.0]);
    let base = o(&g, &other);
    for k in [1e-6, 0.37, 5.0, 1e6] {
        let scaled = with(g.vector.iter().map(|x| x * k).collect());
        expect("O scale invariance", o(&scaled, &other), base);
        let scaled_other = with(other.vector.iter().map(|x| x * k).collect());
        expect("O scale invariance", o(&g, &scaled_other), base);
    }
    check(failed.is_empty(), if failed.is_empty() { "all identities within 1e-12".into() } else { failed.join("; ") })
}

// ---------------------------------------------------------------- 3

fn report(u: f64, m: f64, s: f64) -> EvalReport {
    EvalReport {
        utility: BTreeMap::from([("modular-add".to_string(), m), ("copy".to_string(), 2.0 * u - m)]),
        u,
        m,
        safety: BTreeMap::from([("vanilla-harmful".to_string(), s)]),
        s,
    }
}

fn reference_rows() -> Outcome {
    // Reference base and risky-zone measurements, in percent.
    let base = report(66.10, 59.38, 67.22);
    let risky = report(56.02, 48.52, 91.79);
    let costs = cost_ratios(&base, &risky, 1e-6).map_err(|e| e.to_string())?;

    // Per-bucket mean conflict score against realized UCR.
    let mean_c = [1.27, 0.88, 0.67, 0.47];
    let ucr = [0.41, 0.37, 0.27, 0.19];
    let heads_per_bucket = 4;
    let mut records = Vec::new();
    for (b, &c) in mean_c.iter().enumerate() {
        for j in 0..heads_per_bucket {
            records.push(ConflictRecord {
                layer: b,
                head: j,
                o: 0.5,
                h_gen: 0.0,
                h_safe: 0.0,
                rank_gen: 0.5,
                rank_safe: 0.5,
                s: 1.0,
                c,
            });
        }
    }
    let map = ConflictMap {
        records,
        provenance: MapProvenance {
            model_checksum: String::new(),
            util_samples: 0,
            safe_samples: 0,
            calibration_seeds: vec![],
            baseline: Baseline {
                acc_gen: 0.0,
                ref_safe: 0.0,
            },
            degenerate_heads: vec![],
        },
    };
    let bucketing = bucketize(&map, 4, ScoreVariant::Unified).map_err(|e| e.to_string())?;
    let bucket_costs: Vec<CostRatios> = ucr
        .iter()
        .map(|&u| CostRatios {
            ucr: u,
            task_cr: 0.0,
            eps: 1e-6,
        })
        .collect();
    let rho = bucket_validity(&map, &bucketing, &bucket_costs, CostTarget::Ucr)
        .map_err(|e| e.to_string())?
        .spearman;
    check(
        close(costs.ucr, 0.410, 0.005) && close(costs.task_cr, 0.442, 0.005) && rho == Some(1.0),
        format!("UCR {:.4}, primary-task CR {:.4}, bucket Spearman {rho:?}", costs.ucr, costs.task_cr),
    )
}

// ---------------------------------------------------------------- 4

fn rank_oracle(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    values
        .iter()
        .map(|&v| {
            let smaller = values.iter().filter(|&&x| x < v).count() as f64;
            let equal = values.iter().filter(|&&x| x == v).count() as f64;
            (smaller + (equal - 1.0) / 2.0) / (n - 1) as f64
        })
        .collect()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

fn rank_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.gen_range(2..=50);
        let levels = rng.gen_range(1..=n);
        let values: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 * 0.25 - 3.0).collect();
        let got = percentile_rank(&values).map_err(|e| e.to_string())?;
        for (a, b) in got.iter().zip(rank_oracle(&values)) {
            worst = worst.max((a - b).abs());
        }
    }
    let mut spearman_worst: f64 = 0.0;
    let mut cases = 0;
    for n in 2..=6 {
        let xs: Vec<f64> = (0..n).map(|i| i as f64).collect();
        for perm in permutations(n) {
            let ys: Vec<f64> = perm.iter().map(|&i| i as f64).collect();
            let d2: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - y).powi(2)).sum();
            let nf = n as f64;
            let want = 1.0 - 6.0 * d2 / (nf * (nf * nf - 1.0));
            let got = spearman(&xs, &ys).map_err(|e| e.to_string())?;
            spearman_worst = spearman_worst.max((got - want).abs());
            cases += 1;
        }
    }
    check(
        worst <= 1e-12 && spearman_worst <= 1e-12,
        format!("rank max diff {worst:.1e} on 1000 arrays; Spearman max diff {spearman_worst:.1e} on {cases} permutations"),
    )
}

// ---------------------------------------------------------------- 5

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn pcgrad_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut min_dot = f64::INFINITY;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=32);
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r = pcgrad_combine(&a, &b).map_err(|e| e.to_string())?;
        min_dot = min_dot.min(dot(&r.a, &b)).min(dot(&r.b, &a));
    }
    let hand = pcgrad_combine(&[1.0, 0.0], &[-1.0, 1.0]).map_err(|e| e.to_string())?;
    check(
        min_dot >= -1e-12 && hand.a == vec![0.5, 0.5],
        format!("min post-projection dot {min_dot:.2e}; (1,0) vs (-1,1) projects to {:?}", hand.a),
    )
}

// ---------------------------------------------------------------- 6

/// SHA-256 over the bytes of every parameter outside the trainable query columns.
fn frozen_hash(model: &TransformerModel, trainable: &BTreeSet<HeadId>) -> String {
    let cfg = model.config();
    let dh = cfg.d_model / cfg.n_heads;
    let mut hasher = Sha256::new();
    for (id, t) in model.params().iter().enumerate() {
        let layer = (0..cfg.n_layers).find(|&l| ParamId::layer(l, LayerParam::Wq).0 == id);
        for (i, x) in t.data.iter().enumerate() {
            let col = i % cfg.d_model;
            let skip = layer.is_some_and(|l| trainable.contains(&HeadId::new(l, col / dh)));
            if !skip {
                hasher.update(x.to_le_bytes());
            }
        }
    }
    hex::encode(hasher.finalize())
}

fn freezing_contract(desk: Option<&ExperimentReport>) -> Outcome {
    let mut cfg = desk_config();
    cfg.pretrain.samples_per_task = 128;
    cfg.pretrain.max_epochs = 1;
    cfg.alignment.size = 24;
    cfg.calibration.util_per_task = 16;
    cfg.calibration.safe_per_split = 8;
    let base = pretrain(&cfg).map_err(|e| e.to_string())?.model;
    let doc = diagnose(&base, &cfg, ScoreVariant::Unified).map_err(|e| e.to_string())?;
    let data = cfg.alignment_set().map_err(|e| e.to_string())?;
    let (util_ref, _) = cfg.calibration_sets().map_err(|e| e.to_string())?;
    let mut runs = 0;
    let mut broken = Vec::new();
    for strategy in [
        SelectionStrategy::Full,
        SelectionStrategy::RandomK { fraction: 0.25, seed: 3 },
        SelectionStrategy::Bucket { index: 1 },
        SelectionStrategy::Bucket { index: 4 },
        SelectionStrategy::TopK { fraction: 0.5 },
        SelectionStrategy::BottomK { fraction: 0.125 },
    ] {
        let trainable = select_trainable(&doc.bucketing, &strategy).map_err(|e| e.to_string())?;
        let before = frozen_hash(&base, &trainable);
        for (pcgrad, adapter_rank) in [(false, 0), (true, 0), (false, 4), (true, 4)] {
            let train = TrainConfig {
                epochs: 1,
                pcgrad,
                adapter_rank,
                ..cfg.train.clone()
            };
            let (aligned, _) =
                train_pcgrad(&base, &data, &util_ref, &trainable, &train, None).map_err(|e| e.to_string())?;
            runs += 1;
            let moved = aligned.params() != base.params();
            if frozen_hash(&aligned, &trainable) != before || !moved {
                broken.push(format!("{} pcgrad={pcgrad} rank={adapter_rank}", strategy.label()));
            }
        }
    }
    let desk_flags = desk.map(|r| r.arms.iter().flat_map(|a| &a.runs).map(|run| run.frozen_intact).collect::<Vec<_>>());
    let desk_ok = desk_flags.as_ref().map_or(true, |f| !f.is_empty() && f.iter().all(|&x| x));
    let desk_note = match &desk_flags {
        Some(f) => format!("; {} desk runs report frozen parameters intact: {desk_ok}", f.len()),
        None => String::new(),
    };
    check(
        broken.is_empty() && desk_ok,
        format!("{runs} training runs, {} changed frozen bytes {broken:?}{desk_note}", broken.len()),
    )
}

// ---------------------------------------------------------------- 7

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn desk_run(dir: &Path) -> (Result<ExperimentReport, String>, f64) {
    let cfg = desk_config();
    let started = Instant::now();
    let report = run_experiment(&cfg, dir, |m| eprintln!("  [desk] {m}")).map_err(|e| e.to_string());
    (report, started.elapsed().as_secs_f64())
}

fn desk_ordering(report: &Result<ExperimentReport, String>, secs: f64) -> Outcome {
    let report = report.as_ref().map_err(|e| format!("experiment failed: {e}"))?;
    let zones = report.zones.as_ref().ok_or("no zone comparison")?;
    let validity = report.bucket_validity.as_ref().ok_or("no bucket validity")?;
    let rho = validity.ucr.spearman;
    let pre = &report.pretrain;
    let a = zones.median_safe_acc_gen >= zones.median_risky_acc_gen;
    let b = zones.median_safe_ref_safe >= 0.8 && zones.median_risky_ref_safe >= 0.8;
    let c = rho.is_some_and(|r| r >= 0.5);
    let seeds: Vec<u64> = zones.per_seed.iter().map(|p| p.0).collect();
    check(
        pre.reached_target && pre.report.u >= 0.9 && a && b && c && secs < 900.0 && report.failures.is_empty(),
        format!(
            "seeds {seeds:?}; base acc_gen {:.4}; (a) safe {:.4} >= risky {:.4}: {a}; (b) ref_safe safe {:.4}, risky {:.4} >= 0.8: {b}; \
             (c) Spearman {rho:?} >= 0.5: {c}; per-seed Spearman {:?}; {secs:.0} s",
            pre.report.u,
            zones.median_safe_acc_gen,
            zones.median_risky_acc_gen,
            zones.median_safe_ref_safe,
            zones.median_risky_ref_safe,
            validity.per_seed_spearman_ucr,
        ),
    )
}

/// Secondary observations on the desk run; printed, not gating.
fn desk_notes(report: &ExperimentReport) {
    let med = |name: &str, f: fn(&EvalReport) -> f64| {
        report.arm(name).map(|a| median(a.runs.iter().map(|r| f(&r.report)).collect()))
    };
    let base = &report.pretrain.report;
    println!(
        "  note: base acc_gen {:.4}, ref_safe {:.4}; full SFT median acc_gen {:?}, ref_safe {:?}",
        base.u,
        base.s,
        med("full", |r| r.u),
        med("full", |r| r.s)
    );
    println!(
        "  note: risky zone median acc_gen SFT {:?} vs PCGrad {:?}",
        med("bucket-1", |r| r.u),
        med("bucket-1-pcgrad", |r| r.u)
    );
    if let Some(v) = &report.bucket_validity {
        for row in &v.rows {
            println!("  note: bucket {} mean score {:.4} UCR {:.4} task CR {:.4}", row.bucket, row.mean_score, row.ucr, row.task_cr);
        }
    }
}

// ---------------------------------------------------------------- 8

fn reduced_config() -> ExperimentConfig {
    let mut cfg = desk_config();
    cfg.pretrain.samples_per_task = 256;
    cfg.pretrain.max_epochs = 2;
    cfg.calibration.util_per_task = 32;
    cfg.calibration.safe_per_split = 16;
    cfg.eval.util_per_task = 64;
    cfg.eval.safe_per_split = 32;
    cfg.alignment.size = 32;
    cfg.train.epochs = 1;
    cfg
}

fn determinism() -> Outcome {
    let cfg = reduced_config();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        run_experiment(&cfg, d.path(), |_| {}).map_err(|e| e.to_string())?;
    }
    let files = ["report.json", "arms.csv", "conflict_map.json", "conflict_map.csv", "base.ckpt"];
    let read = |d: &tempfile::TempDir, f: &str| std::fs::read(d.path().join(f)).unwrap_or_default();
    let differing: Vec<&str> = files.iter().copied().filter(|f| read(&dirs[0], f) != read(&dirs[1], f)).collect();
    let size = read(&dirs[0], "report.json").len();
    check(
        differing.is_empty() && size > 0,
        format!("two runs of {} arms x {} seeds; report.json {size} bytes; differing files {differing:?}", cfg.arms.len(), cfg.seeds.len()),
    )
}

// ----------------------------------------------------------------

fn main() -> ExitCode {
    let mut failures = 0;
    let mut emit = |n: usize, name: &str, outcome: Outcome| {
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failures += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {n} ({name}): {tag} - {detail}");
    };
    emit(1, "gradient check", gradient_check());
    emit(2, "formula edge cases", formula_edges());
    emit(3, "reference cost ratios", reference_rows());
    emit(4, "rank and correlation oracles", rank_oracles());
    emit(5, "gradient projection", pcgrad_properties());
    emit(8, "determinism", determinism());

    let dir = tempfile::tempdir().unwrap();
    let (desk, secs) = desk_run(dir.path());
    emit(6, "freezing contract", freezing_contract(desk.as_ref().ok()));
    emit(7, "desk ordering", desk_ordering(&desk, secs));
    if let Ok(r) = &desk {
        desk_notes(r);
    }

    if failures == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failures} criterion/criteria failed");
        ExitCode::FAILURE
    }
}
