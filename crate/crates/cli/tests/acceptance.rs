//! Acceptance checks, one line per criterion. Runs as a plain binary so the
//! lines always show in `cargo test` output; exits non-zero on any failure.

use std::collections::HashSet;
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use steerlab::config::RunConfig;
use steerlab::pipeline::{self, HookSource};
use steerlab_core::checkpoint::{model_to_bytes, sae_to_bytes};
use steerlab_core::game::{enumerate_histories, history_at_index, play_game, Action, Seat};
use steerlab_core::gradcheck::{check_lm, check_sae};
use steerlab_core::lm::{generate_corpus, render_prompt, train_toy_lm, CorpusConfig, ModelConfig, ToyLm, Vocabulary};
use steerlab_core::sae::{dead_features, top_activations, train_sae, HookCorpus, SaeTrainConfig};
use steerlab_core::screening::{
    calibrate_omega, decoder_cosines, green_minus_blue_direction, screen_all, screen_feature, HistoryPanel,
};
use steerlab_core::stats::{four_pl, gmm_fit, ks_test, logistic_fit, mann_whitney, GmmConfig};
use steerlab_core::steering::{steered_distribution, PromptProbe, ProbeDirection, SteeringSpec};
use steerlab_core::{rng, Policy, SaeModel, ScreeningReport};

const SEEDS: [u64; 3] = [1, 2, 3];

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome { pass, detail: detail.into() }
    }
}

struct Stack {
    seed: u64,
    cfg: RunConfig,
    model: ToyLm,
    sae: SaeModel,
    source: HookSource,
    hook: HookCorpus,
    report: ScreeningReport,
}

impl Stack {
    fn build(seed: u64) -> Stack {
        let cfg = RunConfig { seed, ..RunConfig::default() };
        let corpus = pipeline::corpus(&cfg).expect("corpus");
        let model = train_toy_lm(&corpus, cfg.model.clone(), cfg.train.clone(), seed).expect("toy LM").model;
        let source = HookSource::from_config(&cfg, cfg.screen.hook_layer(&model));
        let hook = source.collect_from(&model, &corpus).expect("hook corpus");
        let sae = train_sae(&hook, &cfg.sae, seed).expect("SAE").sae;
        let dead = dead_features(&sae, hook.activations.view()).expect("dead features");
        let report = screen_all(&model, &sae, &cfg.screen, &dead, ("model", "sae"), 1).expect("screen");
        Stack { seed, cfg, model, sae, source, hook, report }
    }

    fn panel(&self) -> HistoryPanel<'_> {
        HistoryPanel::enumerated(&self.model, &self.cfg.screen).expect("panel")
    }

    fn direction(&self, panel: &HistoryPanel<'_>, feature: usize) -> ProbeDirection {
        ProbeDirection::new(&self.model, self.sae.decoder_column(feature).expect("column"), panel.layer).expect("direction")
    }

    /// Top-20 activating tokens that are persona markers, out of 20.
    fn marker_fraction(&self, feature: usize) -> f64 {
        let vocab = self.model.vocab();
        let d = top_activations(&self.sae, feature, &self.hook, vocab, 20, 8, &self.cfg.dashboard.density).expect("dossier");
        let hits = d.top_contexts.iter().filter(|c| vocab.id(&c.token).is_some_and(|id| vocab.is_persona_marker(id))).count();
        hits as f64 / 20.0
    }
}

fn main() {
    let mut failed = 0;
    let mut report = |n: usize, title: &str, budget: Duration, elapsed: Duration, o: Outcome| {
        let in_time = elapsed <= budget;
        let pass = o.pass && in_time;
        if !pass {
            failed += 1;
        }
        let time = if in_time { "" } else { " over budget" };
        println!(
            "[{}] {n:>2} {title}: {} ({:.1}s of {}s{time})",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    };

    let t = Instant::now();
    let o = histories();
    report(1, "three-round histories", Duration::from_secs(1), t.elapsed(), o);

    let t = Instant::now();
    let o = wsls_against_defector();
    report(2, "WSLS against a constant defector", Duration::from_secs(1), t.elapsed(), o);

    // The three default stacks are built once; their cost counts toward
    // criterion 5, whose budget covers training and screening.
    let t = Instant::now();
    let stacks: Vec<Stack> = SEEDS.iter().map(|&s| Stack::build(s)).collect();
    let build_time = t.elapsed();

    let t = Instant::now();
    let o = zero_strength_identity(&stacks[0]);
    report(3, "zero strength leaves distributions untouched", Duration::from_secs(10), t.elapsed(), o);

    let t = Instant::now();
    let o = delta_consistency(&stacks);
    report(4, "delta equals p_plus - p_minus and flips with the strengths", Duration::from_secs(600), t.elapsed(), o);

    let t = Instant::now();
    let o = planted_features(&stacks);
    report(5, "planted persona features are recovered on every seed", Duration::from_secs(600), build_time + t.elapsed(), o);

    let t = Instant::now();
    let o = colour_aligned_features(&stacks);
    report(6, "colour-aligned features move P(blue)", Duration::from_secs(120), t.elapsed(), o);

    let t = Instant::now();
    let o = lambda_sweep(&stacks[0]);
    report(7, "sparsity penalty trades activity for reconstruction", Duration::from_secs(300), t.elapsed(), o);

    let t = Instant::now();
    let o = gradients();
    report(8, "analytic gradients match central differences", Duration::from_secs(60), t.elapsed(), o);

    let t = Instant::now();
    let o = stats_oracles();
    report(9, "statistics oracles", Duration::from_secs(60), t.elapsed(), o);

    let t = Instant::now();
    let o = worker_independence(&stacks[0]);
    report(10, "screen output does not depend on worker count", Duration::from_secs(600), t.elapsed(), o);

    let t = Instant::now();
    let o = coherence_past_bounds(&stacks);
    report(11, "doubling calibrated bounds breaks coherence", Duration::from_secs(120), t.elapsed(), o);

    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn histories() -> Outcome {
    let hs = enumerate_histories(3).expect("enumerate");
    let distinct: HashSet<Vec<(Action, Action)>> =
        hs.iter().map(|h| h.rounds().iter().map(|r| (r.p1, r.p2)).collect()).collect();
    Outcome::new(hs.len() == 64 && distinct.len() == 64, format!("{} histories, {} distinct", hs.len(), distinct.len()))
}

fn wsls_against_defector() -> Outcome {
    let p1 = Policy::WinStayLoseChange(Action::Cooperate);
    let p2 = Policy::Always(Action::Defect);
    let mut bad = Vec::new();
    for n in (2..=200).step_by(2) {
        let h = play_game(&p1, &p2, n, n as u64).expect("game");
        let d = h.actions_of(Seat::One).filter(|a| a.is_defect()).count();
        if d as f64 / n as f64 != 0.5 {
            bad.push(n);
        }
    }
    Outcome::new(bad.is_empty(), format!("even lengths 2..=200, mismatches at {bad:?}"))
}

fn zero_strength_identity(s: &Stack) -> Outcome {
    let mut r = rng::stream(2024, 0);
    let layer = s.cfg.screen.hook_layer(&s.model);
    let window = s.model.config().context_window;
    let panel = s.panel();
    let mut mismatches = 0;
    for _ in 0..100 {
        let rounds = r.random_range(1..=5usize);
        let h = history_at_index(r.random_range(0..1usize << (2 * rounds)), rounds);
        let feature = r.random_range(0..s.sae.d_latent());
        let tokens = render_prompt(s.model.vocab(), &h, window).expect("prompt");
        let plain = s.model.next_token_distribution(&tokens, 1.0, None).expect("plain");
        let steered = steered_distribution(&s.model, &s.sae, &h, &SteeringSpec::new(layer, feature, 0.0), 1.0).expect("steered");
        let same = plain.probs.len() == steered.probs.len()
            && plain.probs.iter().zip(&steered.probs).all(|(a, b)| a.to_bits() == b.to_bits());
        let probe = PromptProbe::new(&s.model, tokens, layer, s.cfg.screen.positions, 1.0).expect("probe");
        let fast = probe.probe(&s.direction(&panel, feature), 0.0).expect("probe at zero");
        let base = probe.baseline();
        let fast_same = fast.p_blue.to_bits() == base.p_blue.to_bits() && fast.p_green.to_bits() == base.p_green.to_bits();
        if !(same && fast_same) {
            mismatches += 1;
        }
    }
    Outcome::new(mismatches == 0, format!("{mismatches} of 100 pairs differ"))
}

fn delta_consistency(stacks: &[Stack]) -> Outcome {
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for s in stacks {
        for r in &s.report.records {
            worst = worst.max((r.delta - (r.p_plus - r.p_minus)).abs());
            checked += 1;
        }
    }
    // Swapping the strengths on every record of the first stack.
    let s = &stacks[0];
    let panel = s.panel();
    let mut flip_worst: f64 = 0.0;
    for r in &s.report.records {
        let dir = s.direction(&panel, r.feature_id);
        let swapped = screen_feature(&panel, &dir, r.feature_id, r.omega_minus, r.omega_plus, &s.cfg.screen).expect("swap");
        flip_worst = flip_worst.max((swapped.delta + r.delta).abs());
    }
    Outcome::new(
        checked > 0 && worst <= 1e-12 && flip_worst <= 1e-12,
        format!(
            "{checked} records, max identity error {worst:.1e}, max sign-swap error {flip_worst:.1e} over {} swaps",
            s.report.records.len()
        ),
    )
}

fn planted_features(stacks: &[Stack]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for s in stacks {
        let mut qualifying = 0;
        let mut best: Option<(usize, f64, f64, f64)> = None;
        for r in s.report.records.iter().filter(|r| r.delta.abs() >= 0.3 && r.monotone_fraction >= 0.9) {
            let m = s.marker_fraction(r.feature_id);
            if m >= 0.8 {
                qualifying += 1;
                if best.is_none_or(|b| r.delta.abs() > b.1.abs()) {
                    best = Some((r.feature_id, r.delta, m, r.monotone_fraction));
                }
            }
        }
        pass &= qualifying > 0;
        parts.push(match best {
            Some((f, d, m, mono)) => {
                format!("seed {}: {qualifying} qualify, strongest f{f} delta {d:.3} markers {m:.2} monotone {mono:.2}", s.seed)
            }
            None => format!("seed {}: none qualify", s.seed),
        });
    }
    Outcome::new(pass, parts.join("; "))
}

/// Judged on the first stack. The other seeds are printed for reference; a
/// baseline mean P(blue) above 0.8 leaves no room for a 0.2 rise.
fn colour_aligned_features(stacks: &[Stack]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (i, s) in stacks.iter().enumerate() {
        let cos = decoder_cosines(&s.sae, &green_minus_blue_direction(&s.model));
        let argmax = (0..cos.len()).max_by(|&a, &b| cos[a].total_cmp(&cos[b])).expect("features");
        let argmin = (0..cos.len()).min_by(|&a, &b| cos[a].total_cmp(&cos[b])).expect("features");
        let panel = s.panel();
        let base = panel.baseline_p_blue().iter().sum::<f64>() / panel.len() as f64;
        let mean_blue = |f: usize| -> f64 {
            let dir = s.direction(&panel, f);
            let w = calibrate_omega(&panel, &dir, &s.cfg.screen).expect("calibrate").plus;
            let total: f64 = panel.probes.iter().map(|p| p.probe(&dir, w).expect("probe").p_blue).sum();
            total / panel.len() as f64
        };
        let green = mean_blue(argmax);
        let blue = mean_blue(argmin);
        let ok = green <= base - 0.2 && blue >= base + 0.2;
        if i == 0 {
            pass = ok;
        }
        let role = if i == 0 { "judged" } else if ok { "reference, meets" } else { "reference, misses" };
        parts.push(format!(
            "seed {} ({role}): baseline {base:.3}, green f{argmax} -> {green:.3}, blue f{argmin} -> {blue:.3}",
            s.seed
        ));
    }
    Outcome::new(pass, parts.join("; "))
}

fn lambda_sweep(s: &Stack) -> Outcome {
    let evals: Vec<_> = [0.0, 1e-3, 1e-2]
        .iter()
        .map(|&l| train_sae(&s.hook, &SaeTrainConfig { lambda_l1: l, ..s.cfg.sae.clone() }, s.seed).expect("SAE").last)
        .collect();
    let active: Vec<f64> = evals.iter().map(|e| e.mean_active).collect();
    let recon: Vec<f64> = evals.iter().map(|e| e.reconstruction).collect();
    let pass = active.windows(2).all(|w| w[1] < w[0]) && recon.windows(2).all(|w| w[1] > w[0]);
    let recon: Vec<String> = recon.iter().map(|r| format!("{r:.2e}")).collect();
    Outcome::new(pass, format!("held-out active {active:.1?}, reconstruction {recon:?}"))
}

fn gradients() -> Outcome {
    let cfg = ModelConfig { n_layers: 2, d_model: 16, n_heads: 2, d_mlp: 32, context_window: 128 };
    let vocab = Vocabulary::game();
    let corpus = generate_corpus(&CorpusConfig { n_sequences: 4, ..CorpusConfig::default() }, &vocab, 128, 3).expect("corpus");
    let mut fractions = Vec::new();
    for (k, seq) in corpus.sequences.iter().take(2).enumerate() {
        let model = ToyLm::initialized(cfg.clone(), vocab.clone(), 0.2, k as u64).expect("model");
        let r = check_lm(&model, &seq.tokens, &seq.loss_weight, 400, 1e-5, 1e-3, 11 + k as u64).expect("check");
        fractions.push(r.pass_fraction());
    }
    let mut r = rng::stream(8, 0);
    let x = Array2::from_shape_simple_fn((12, 16), || r.sample::<f64, _>(StandardNormal));
    let mean = x.mean_axis(Axis(0)).expect("mean");
    for lambda in [0.0, 1e-2, 0.3] {
        let sae = SaeModel::initialized(16, 48, lambda, mean.view(), 5).expect("sae");
        fractions.push(check_sae(&sae, x.view(), 200, 1e-6, 1e-3, 2).expect("check").pass_fraction());
    }
    let pass = fractions.iter().all(|&f| f >= 0.99);
    Outcome::new(pass, format!("pass fractions (2 transformers, 3 SAEs) {fractions:.3?}"))
}

fn brute_u(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .flat_map(|x| b.iter().map(move |y| if x > y { 1.0 } else if x == y { 0.5 } else { 0.0 }))
        .sum()
}

fn stats_oracles() -> Outcome {
    let ks = ks_test(&[1.0, 2.0, 3.0, 4.0], &[1.5, 2.5, 3.5, 4.5]).expect("ks").statistic;

    let mut r = rng::stream(21, 0);
    let mut mw_bad = 0;
    for n in 1..=6 {
        for m in 1..=6 {
            for _ in 0..20 {
                let a: Vec<f64> = (0..n).map(|_| r.random_range(0..5) as f64).collect();
                let b: Vec<f64> = (0..m).map(|_| r.random_range(0..5) as f64).collect();
                let got = mann_whitney(&a, &b).expect("mw");
                if got.u_a != brute_u(&a, &b) || got.u_b != brute_u(&b, &a) {
                    mw_bad += 1;
                }
            }
        }
    }

    let mut r = rng::stream(33, 0);
    let mut em_bad = 0;
    for inst in 0..20u64 {
        let k = 1 + inst as usize % 4;
        let d = 1 + inst as usize % 3;
        let n = 40 + 5 * inst as usize;
        let centres: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| 4.0 * r.random::<f64>()).collect()).collect();
        let x = Array2::from_shape_fn((n, d), |(i, j)| centres[i % k][j] + 0.5 * r.sample::<f64, _>(StandardNormal));
        let fit = gmm_fit(x.view(), &GmmConfig { k, n_init: 1, ..GmmConfig::default() }, inst).expect("gmm");
        if fit.trace.windows(2).any(|w| w[1] < w[0]) {
            em_bad += 1;
        }
    }

    let mut fit_err: f64 = 0.0;
    let mut min_r2: f64 = 1.0;
    for &(lower, upper, mid, slope) in &[(0.1f64, 0.9f64, 0.5f64, 3.0f64), (0.05, 0.7, -2.0, -1.2), (0.2, 0.95, 4.0, 0.8)] {
        let pts: Vec<(f64, f64)> = (0..25)
            .map(|i| {
                let x = mid - 6.0 / slope.abs() + 12.0 / slope.abs() * i as f64 / 24.0;
                (x, four_pl(x, lower, upper, mid, slope))
            })
            .collect();
        let fit = logistic_fit(&pts).expect("4pl");
        min_r2 = min_r2.min(fit.r_squared);
        for (got, want) in [(fit.lower, lower), (fit.upper, upper), (fit.midpoint, mid), (fit.slope, slope)] {
            fit_err = fit_err.max((got - want).abs());
        }
    }

    let pass = ks == 0.25 && mw_bad == 0 && em_bad == 0 && fit_err <= 1e-3 && min_r2 >= 0.999;
    Outcome::new(
        pass,
        format!(
            "KS {ks}, MW mismatches {mw_bad}/720, EM decreases {em_bad}/20, 4PL max error {fit_err:.1e} min r2 {min_r2:.6}"
        ),
    )
}

fn screen_digests(dir: &std::path::Path, config: &std::path::Path, workers: usize) -> Result<serde_json::Value, String> {
    let out = dir.join(format!("screen-w{workers}"));
    let status = Command::new(env!("CARGO_BIN_EXE_steerlab"))
        .args(["screen", "--config"])
        .arg(config)
        .args(["--workers", &workers.to_string(), "--out"])
        .arg(&out)
        .output()
        .map_err(|e| e.to_string())?;
    if !status.status.success() {
        return Err(String::from_utf8_lossy(&status.stderr).into_owned());
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("manifest.json")).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    Ok(manifest["outputs"].clone())
}

fn worker_independence(s: &Stack) -> Outcome {
    let dir = tempfile::tempdir().expect("tempdir");
    let model_path = dir.path().join("model.ckpt");
    let sae_path = dir.path().join("sae.ckpt");
    std::fs::write(&model_path, model_to_bytes(&s.model, None, serde_json::json!({})).expect("model bytes")).expect("write");
    let meta = serde_json::json!({ "hook": s.source });
    std::fs::write(&sae_path, sae_to_bytes(&s.sae, meta).expect("sae bytes")).expect("write");
    let config = dir.path().join("run.toml");
    let text = format!(
        "seed = {}\n[checkpoints]\nmodel = {:?}\nsae = {:?}\n",
        s.seed,
        model_path.display().to_string(),
        sae_path.display().to_string()
    );
    std::fs::write(&config, text).expect("write config");
    match (screen_digests(dir.path(), &config, 1), screen_digests(dir.path(), &config, 8)) {
        (Ok(a), Ok(b)) => {
            let files = a.as_array().map_or(0, Vec::len);
            Outcome::new(files > 0 && a == b, format!("{files} output digests, identical: {}", a == b))
        }
        (a, b) => Outcome::new(false, format!("screen failed: {:?} {:?}", a.err(), b.err())),
    }
}

fn coherence_past_bounds(stacks: &[Stack]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for s in stacks {
        let panel = s.panel();
        let mut records: Vec<_> = s.report.records.iter().collect();
        records.sort_by(|a, b| b.delta.abs().total_cmp(&a.delta.abs()).then(a.feature_id.cmp(&b.feature_id)));
        let mut found = None;
        for r in records {
            let dir = s.direction(&panel, r.feature_id);
            let plus = panel.mean_coherence(&dir, 2.0 * r.omega_plus).expect("coherence");
            let minus = panel.mean_coherence(&dir, 2.0 * r.omega_minus).expect("coherence");
            let c = plus.min(minus);
            if c < 0.5 && s.marker_fraction(r.feature_id) < 0.8 {
                found = Some((r.feature_id, c));
                break;
            }
        }
        pass &= found.is_some();
        parts.push(match found {
            Some((f, c)) => format!("seed {}: non-marker f{f} coherence {c:.3} at twice its bound", s.seed),
            None => format!("seed {}: no non-marker feature loses coherence", s.seed),
        });
    }
    Outcome::new(pass, parts.join("; "))
}
