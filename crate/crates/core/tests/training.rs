use steerlab_core::lm::{generate_corpus, CorpusConfig, ModelConfig, Optimizer, TrainConfig, Trainer, Vocabulary};
use steerlab_core::Error;

fn small_model() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_mlp: 32,
        context_window: 128,
    }
}

fn corpus(n: usize, seed: u64) -> steerlab_core::lm::TranscriptCorpus {
    let cfg = CorpusConfig { n_sequences: n, ..CorpusConfig::default() };
    generate_corpus(&cfg, &Vocabulary::game(), 128, seed).unwrap()
}

#[test]
fn memorises_a_single_sequence() {
    let c = corpus(1, 4);
    let cfg = TrainConfig {
        batch_size: 1,
        learning_rate: 1e-2,
        held_out_fraction: 0.0,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(&c, small_model(), cfg, 1).unwrap();
    let first = t.step().unwrap();
    t.run_until(300).unwrap();
    let last = *t.trace.last().map(|p| &p.train_loss).unwrap();
    assert!(first > 2.0, "{first}");
    assert!(last < 0.05, "{last}");
}

#[test]
fn smoothed_training_loss_falls() {
    let c = corpus(300, 9);
    let mut t = Trainer::new(&c, small_model(), TrainConfig::default(), 2).unwrap();
    t.run_until(150).unwrap();
    let mean = |s: &[steerlab_core::lm::train::TracePoint]| s.iter().map(|p| p.train_loss).sum::<f64>() / s.len() as f64;
    let head = mean(&t.trace[..25]);
    let tail = mean(&t.trace[125..]);
    assert!(tail < 0.5 * head, "head {head} tail {tail}");
}

#[test]
fn resumed_training_is_bit_identical() {
    let c = corpus(60, 1);
    let cfg = TrainConfig { eval_every: 5, ..TrainConfig::default() };
    let mut straight = Trainer::new(&c, small_model(), cfg.clone(), 7).unwrap();
    straight.run_until(20).unwrap();

    let mut first = Trainer::new(&c, small_model(), cfg.clone(), 7).unwrap();
    first.run_until(11).unwrap();
    let (model, state) = first.into_parts();
    let mut second = Trainer::resume(&c, model, state, cfg, 7).unwrap();
    second.run_until(20).unwrap();

    assert_eq!(straight.model().params(), second.model().params());
    assert_eq!(straight.state(), second.state());
}

#[test]
fn divergence_rolls_back_to_last_good_parameters() {
    let c = corpus(20, 2);
    let cfg = TrainConfig {
        learning_rate: 1e300,
        optimizer: Optimizer::Sgd,
        clip_norm: 0.0,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(&c, small_model(), cfg, 3).unwrap();
    let initial = t.model().params().to_vec();
    let err = (0..5).find_map(|_| t.step().err()).expect("training should diverge");
    assert!(matches!(err, Error::Divergence { .. }), "{err}");
    assert_eq!(t.model().params(), &initial[..]);
}
