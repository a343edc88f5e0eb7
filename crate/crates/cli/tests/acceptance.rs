//! Acceptance checks, one line per criterion. Exits nonzero on any failure.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use star_core::attention::Modality;
use star_core::cost::{delta_total, measured_reduction, ModelDims};
use star_core::pipeline::{resolve_schedule, run_baseline, run_schedule, PruneBackend, PruneSchedule, Strategy};
use star_core::scoring::{cls_attention_scores, keep_count, select_keep, threshold_for_count, ImportanceVector};
use star_core::tensor::{random_tensor, stt};
use star_core::toy::{reference_run, run_against, ToyBackend, ToyConfig, ToyInputs, ToyModel};
use star_core::Prng;

const COST_BUDGET: Duration = Duration::from_secs(1);
const SELECTION_BUDGET: Duration = Duration::from_secs(5);
const TREND_BUDGET: Duration = Duration::from_secs(120);
const RATIO_TOL_PP: f64 = 0.01;
const ROW_SUM_TOL: f64 = 1e-6;
const TREND_SEEDS: u64 = 20;
const TREND_STEPS: usize = 8;
const TREND_TARGETS: [usize; 5] = [57, 32, 12, 6, 3];
const MAX_KL_INVERSIONS: usize = 1;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if $cond {
        } else {
            return Err(format!($($fmt)+));
        }
    };
}

fn llava() -> ModelDims {
    ModelDims {
        hidden: 4096,
        layers: 32,
        visual_tokens: 576,
        text_tokens: 64,
    }
}

fn layer_cost(n: u128, d: u128) -> u128 {
    6 * n * d * d + 2 * n * n * d
}

fn cost_oracle(r: f64, p: f64, k: u64, dims: ModelDims) -> u128 {
    let lv = dims.visual_tokens as f64;
    let (n1, n2) = ((r * lv).round() as u128, (p * lv).round() as u128);
    (1..=dims.layers)
        .map(|layer| layer_cost(if layer <= k { n1 } else { n2 }, dims.hidden as u128))
        .sum()
}

fn cost_model() -> Check {
    let start = Instant::now();
    let dims = llava();
    let got = delta_total(0.1, 0.5, 14, dims).map_err(|e| e.to_string())?.delta_total;
    ensure!(got == 616_193_523_712, "delta_total(0.1, 0.5, 14) = {got}");
    ensure!(got == cost_oracle(0.1, 0.5, 14, dims), "oracle disagrees at the reference schedule");

    let mut prng = Prng::new(1);
    for _ in 0..500 {
        let r = prng.next_below(900) as f64 / 1000.0;
        let p = r + (1 + prng.next_below(999 - (r * 1000.0) as usize)) as f64 / 1000.0;
        let dims = ModelDims {
            hidden: 1 + prng.next_below(8192) as u64,
            layers: 1 + prng.next_below(80) as u64,
            visual_tokens: 1 + prng.next_below(3000) as u64,
            text_tokens: 1 + prng.next_below(256) as u64,
        };
        let k = 1 + prng.next_below(dims.layers as usize) as u64;
        let rep = delta_total(r, p, k, dims).map_err(|e| format!("R={r} P={p} K={k}: {e}"))?;
        ensure!(
            rep.delta_total == cost_oracle(r, p, k, dims),
            "R={r} P={p} K={k} {dims:?}: {} vs oracle",
            rep.delta_total
        );
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < COST_BUDGET, "took {elapsed:?}");
    Ok(format!("616193523712 and 500 random schedules exact in {elapsed:.2?}"))
}

fn ratio_checks() -> Check {
    let mut seen = Vec::new();
    for (method, want_pct) in [(15223.38, 28.71), (11434.42, 46.45), (10965.06, 48.65)] {
        let got = 100.0 * measured_reduction(21353.56, method).map_err(|e| e.to_string())?;
        ensure!((got - want_pct).abs() <= RATIO_TOL_PP, "{method}: {got:.4}% vs {want_pct}%");
        seen.push(format!("{got:.2}%"));
    }
    Ok(seen.join(", "))
}

fn random_scores(prng: &mut Prng) -> Vec<f32> {
    let n = 1 + prng.next_below(1024);
    if prng.next_below(2) == 0 {
        (0..n).map(|_| prng.next_unit()).collect()
    } else {
        let levels = 1 + prng.next_below(8);
        (0..n).map(|_| prng.next_below(levels) as f32 / 8.0).collect()
    }
}

fn count_at_least(s: &[f32], tau: f32) -> usize {
    s.iter().filter(|&&v| v >= tau).count()
}

fn selection() -> Check {
    let start = Instant::now();
    let mut prng = Prng::new(2);
    let mut tied = 0;
    for case in 0..1000 {
        let s = random_scores(&mut prng);
        let n = s.len();
        let v = ImportanceVector::new(s.clone()).map_err(|e| e.to_string())?;
        let ratio = prng.next_below(1000) as f64 / 1000.0;
        let budget = keep_count(ratio, n);

        let tau = threshold_for_count(&v, budget);
        let mut candidates = s.clone();
        candidates.sort_unstable_by(f32::total_cmp);
        candidates.dedup();
        if candidates.len() < n {
            tied += 1;
        }
        let qualifying: Vec<f32> = candidates
            .iter()
            .copied()
            .filter(|&c| count_at_least(&s, c) <= budget)
            .collect();
        match qualifying.first() {
            Some(&min) => ensure!(tau == min, "case {case}: tau {tau} but minimal qualifying {min}"),
            None => ensure!(tau == f32::INFINITY, "case {case}: nothing qualifies but tau {tau}"),
        }

        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
        let mut want = order[..budget].to_vec();
        want.sort_unstable();
        let got = select_keep(&v, budget).map_err(|e| e.to_string())?;
        ensure!(got.indices() == want, "case {case}: select_keep disagrees with full sort");
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < SELECTION_BUDGET, "took {elapsed:?}");
    Ok(format!("1000 vectors ({tied} with ties) in {elapsed:.2?}"))
}

fn budgets() -> Check {
    for target in [288, 115, 58, 29] {
        let r = resolve_schedule(&PruneSchedule::star(0.1, 0.0, 4).with_target(target), 576, 32)
            .map_err(|e| e.to_string())?;
        ensure!(r.stage1_keep == 518, "target {target}: stage 1 keeps {}", r.stage1_keep);
        ensure!(r.final_keep == target, "target {target}: final {}", r.final_keep);
    }
    let err = resolve_schedule(&PruneSchedule::star(0.5, 0.5, 4), 576, 32)
        .err()
        .ok_or("R = P accepted")?
        .to_string();
    ensure!(err.contains("we enforce R < P"), "message: {err}");
    let err = delta_total(0.6, 0.5, 4, llava()).err().ok_or("R > P accepted")?.to_string();
    ensure!(err.contains("we enforce R < P"), "cost message: {err}");
    Ok("518 survivors, finals 288/115/58/29, R >= P rejected".into())
}

fn small_model(prng: &mut Prng, seed: u64) -> ToyModel {
    let heads = [1, 2, 4][prng.next_below(3)];
    let side = 3 + prng.next_below(5);
    ToyModel::init_seeded(ToyConfig {
        d_enc: heads * (2 + prng.next_below(6)),
        d_dec: heads * (2 + prng.next_below(6)),
        heads,
        encoder_layers: 2 + prng.next_below(3),
        decoder_layers: 2 + prng.next_below(5),
        visual_tokens: side * side,
        patch_dim: 4 + prng.next_below(12),
        vocab: 16 + prng.next_below(48),
        seed,
        encoder_attention_layer: None,
    })
    .expect("valid toy config")
}

fn pipeline_invariants() -> Check {
    let mut prng = Prng::new(5);
    let mut ran = 0;
    for run in 0..100u64 {
        let model = small_model(&mut prng, run);
        let (lv, layers) = (model.cfg.visual_tokens, model.cfg.decoder_layers);
        let inputs = ToyInputs::seeded(&model, run, 1 + prng.next_below(4), 1 + prng.next_below(6));
        let strategy = Strategy::ALL[prng.next_below(Strategy::ALL.len())];
        let r = prng.next_below(5) as f64 / 10.0;
        let survivors = keep_count(r, lv);
        // With both stages active the resolved stage-2 ratio must exceed R.
        let mut max_target = survivors;
        while strategy == Strategy::Star && r > 0.0 && 1.0 - max_target as f64 / survivors as f64 <= r {
            max_target -= 1;
        }
        let schedule = PruneSchedule {
            strategy,
            stage1_ratio: r,
            stage2_ratio: 0.0,
            pivot_layer: 1 + prng.next_below(layers),
            seed: prng.next_u64(),
            target_remaining: Some(1 + prng.next_below(max_target)),
        };
        let resolved = resolve_schedule(&schedule, lv, layers).map_err(|e| format!("run {run}: {e}"))?;
        let reference = reference_run(&model, &inputs, 2).map_err(|e| e.to_string())?;
        let out = run_against(&model, &inputs, &schedule, &reference).map_err(|e| format!("run {run}: {e}"))?;
        let t = &out.trace;
        ensure!(t.stage1.kept.windows(2).all(|w| w[0] < w[1]), "run {run}: stage 1 unsorted");
        ensure!(t.stage2.kept.windows(2).all(|w| w[0] < w[1]), "run {run}: stage 2 unsorted");
        ensure!(t.stage1.kept.iter().all(|&i| i < lv), "run {run}: index out of range");
        ensure!(
            t.stage2.kept.iter().all(|i| t.stage1.kept.contains(i)),
            "run {run}: stage 2 not a subset"
        );
        ensure!(
            t.stage1.kept.len() + t.stage1.dropped.len() == lv,
            "run {run}: stage 1 partition"
        );
        ensure!(t.final_count == resolved.final_keep, "run {run}: final count");
        if strategy != Strategy::None {
            ensure!(t.final_count == schedule.target_remaining.unwrap(), "run {run}: target missed");
        }
        ensure!(out.generated.len() == 2, "run {run}: generated length");
        let f = &out.fidelity;
        ensure!(
            (0.0..=1.0).contains(&f.top1_agreement) && f.kl_nats >= 0.0 && f.cosine.abs() <= 1.0 + 1e-9,
            "run {run}: fidelity out of range {f:?}"
        );
        ran += 1;
    }
    Ok(format!("{ran} randomized toy runs"))
}

fn decoder_maps() -> Check {
    let mut prng = Prng::new(6);
    let mut maps = 0;
    for run in 0..50u64 {
        let model = small_model(&mut prng, 1000 + run);
        let inputs = ToyInputs::seeded(&model, run, 1 + prng.next_below(4), 1 + prng.next_below(6));
        let backend = ToyBackend::new(&model, &inputs).map_err(|e| e.to_string())?;
        let visual = backend.visual_tokens().map_err(|e| e.to_string())?;
        let seq = backend.decoder_input(&visual).map_err(|e| e.to_string())?;
        ensure!(seq.count(Modality::Query) == inputs.query.len(), "run {run}: query span");
        let out = model.decode(&seq).map_err(|e| e.to_string())?;
        for (layer, map) in out.maps.iter().enumerate() {
            map.check_stochastic(ROW_SUM_TOL).map_err(|e| format!("run {run} layer {layer}: {e}"))?;
            let n = map.query_len();
            for h in 0..map.num_heads() {
                for i in 0..n {
                    for j in i + 1..n {
                        ensure!(map.weight(h, i, j) == 0.0, "run {run} layer {layer}: ({h}, {i}, {j}) nonzero");
                    }
                }
            }
            maps += 1;
        }
    }
    Ok(format!("{maps} maps causal, rows within {ROW_SUM_TOL:e}"))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn fidelity_trends() -> Check {
    let start = Instant::now();
    let cfg = ToyConfig::default();
    let mut kl = vec![Vec::new(); TREND_TARGETS.len()];
    let (mut top1_k2, mut top1_k4) = (Vec::new(), Vec::new());
    for seed in 0..TREND_SEEDS {
        let model = ToyModel::init_seeded(ToyConfig { seed, ..cfg.clone() }).map_err(|e| e.to_string())?;
        let inputs = ToyInputs::seeded(&model, seed, 4, 8);
        let reference = reference_run(&model, &inputs, TREND_STEPS).map_err(|e| e.to_string())?;
        for (i, &target) in TREND_TARGETS.iter().enumerate() {
            let run = run_against(&model, &inputs, &PruneSchedule::star(0.1, 0.0, 4).with_target(target), &reference)
                .map_err(|e| e.to_string())?;
            kl[i].push(run.fidelity.kl_nats);
            if target == 3 {
                top1_k4.push(run.fidelity.top1_agreement);
            }
        }
        let run = run_against(&model, &inputs, &PruneSchedule::star(0.1, 0.0, 2).with_target(3), &reference)
            .map_err(|e| e.to_string())?;
        top1_k2.push(run.fidelity.top1_agreement);
    }
    let medians: Vec<f64> = kl.into_iter().map(median).collect();
    let inversions = medians.windows(2).filter(|w| w[1] < w[0]).count();
    ensure!(inversions <= MAX_KL_INVERSIONS, "median KL {medians:?} has {inversions} inversions");
    let (m2, m4) = (median(top1_k2), median(top1_k4));
    ensure!(m4 >= m2, "median top-1 at 3 tokens: K=4 {m4} < K=2 {m2}");
    let elapsed = start.elapsed();
    ensure!(elapsed < TREND_BUDGET, "took {elapsed:?}");
    let shown: Vec<String> = medians.iter().map(|m| format!("{m:.4}")).collect();
    Ok(format!("median KL [{}], top-1 K=4 {m4:.3} >= K=2 {m2:.3}, {elapsed:.1?}", shown.join(", ")))
}

fn cli(args: &[&str], out: &std::path::Path) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_star-prune"))
        .args(args)
        .arg("--out")
        .arg(out)
        .arg("--quiet")
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    Ok(())
}

fn reproducibility() -> Check {
    let golden = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden");
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let read = |p: PathBuf| fs::read(&p).map_err(|e| format!("{}: {e}", p.display()));

    cli(&["prune", "--fixtures", golden.to_str().unwrap()], tmp.path())?;
    ensure!(
        read(tmp.path().join("trace.json"))? == read(golden.join("trace.json"))?,
        "fixture trace differs from golden"
    );

    let mut prng = Prng::new(8);
    for _ in 0..50 {
        let rank = 1 + prng.next_below(4);
        let shape: Vec<usize> = (0..rank).map(|_| prng.next_below(7)).collect();
        let t = random_tensor(shape, &mut prng, 1e4);
        let bytes = stt::encode(&t).map_err(|e| e.to_string())?;
        let back = stt::decode(&bytes).map_err(|e| e.to_string())?;
        ensure!(back.shape() == t.shape(), "STT shape changed");
        ensure!(
            back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()),
            "STT payload changed"
        );
    }

    let sweep = ["sweep", "--strategies", "star,fastv", "--K", "2,4", "--seeds", "0,1", "--steps", "2"];
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    cli(&sweep, &a)?;
    cli(&sweep, &b)?;
    ensure!(read(a.join("sweep.csv"))? == read(b.join("sweep.csv"))?, "sweep reruns differ");
    Ok("golden trace, 50 STT round trips, sweep rerun all byte-identical".into())
}

fn baseline_equivalences() -> Check {
    let mut checked = 0;
    for seed in 0..5 {
        let model = ToyModel::init_seeded(ToyConfig { seed, ..ToyConfig::default() }).map_err(|e| e.to_string())?;
        let backend = ToyBackend::new(&model, &ToyInputs::seeded(&model, seed, 4, 8)).map_err(|e| e.to_string())?;
        let lv = model.cfg.visual_tokens;
        let scores = cls_attention_scores(&backend.cls_attention().map_err(|e| e.to_string())?, 0)
            .map_err(|e| e.to_string())?;
        for target in [1, 3, 16, 32, lv] {
            let star = run_schedule(&backend, &PruneSchedule::star(0.0, 0.0, 2).with_target(target))
                .map_err(|e| e.to_string())?;
            let (_, fastv) = run_baseline(&backend, Strategy::Fastv, target, 0).map_err(|e| e.to_string())?;
            ensure!(star.trace.stage2.kept == fastv.stage2.kept, "seed {seed} target {target}: STAR != FastV");

            let (_, fastervlm) = run_baseline(&backend, Strategy::Fastervlm, target, 0).map_err(|e| e.to_string())?;
            let want = select_keep(&scores, target).map_err(|e| e.to_string())?;
            ensure!(
                fastervlm.stage1.kept == want.indices(),
                "seed {seed} target {target}: FasterVLM != CLS top-k"
            );
            checked += 1;
        }
    }
    Ok(format!("{checked} budgets: STAR(R=0, K=2) = FastV, FasterVLM = CLS top-k"))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("FLOPs savings exact against layer-loop oracle", cost_model),
        ("measured-FLOPs reductions", ratio_checks),
        ("dynamic threshold minimal and top-k matches full sort", selection),
        ("remaining-token budgets and R < P constraint", budgets),
        ("end-to-end pipeline invariants", pipeline_invariants),
        ("decoder attention causal and row-stochastic", decoder_maps),
        ("fidelity degrades with budget and favors later pivot", fidelity_trends),
        ("reproducible outputs", reproducibility),
        ("baseline equivalences", baseline_equivalences),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match result {
            Ok(detail) => println!("PASS criterion {}: {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {}: {name}: {why}", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
