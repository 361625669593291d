use ndarray::Array1;
use steerlab_core::game::history_at_index;
use steerlab_core::lm::{generate_corpus, render_prompt, CorpusConfig, ModelConfig, ToyLm, Vocabulary};
use steerlab_core::sae::{top_activations, DensityConfig, HookCorpus, ACTIVE_EPS};
use steerlab_core::screening::prompt_active_features;
use steerlab_core::SaeModel;

fn stack() -> (ToyLm, SaeModel) {
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_mlp: 32,
        context_window: 128,
    };
    let model = ToyLm::initialized(cfg, Vocabulary::game(), 0.3, 5).unwrap();
    let mut sae = SaeModel::initialized(16, 64, 0.0, Array1::zeros(16).view(), 6).unwrap();
    sae.b_enc.mapv_inplace(|_| -1.5);
    (model, sae)
}

#[test]
fn top_activations_match_a_full_scan() {
    let (model, sae) = stack();
    let vocab = model.vocab().clone();
    let corpus = generate_corpus(&CorpusConfig { n_sequences: 30, ..CorpusConfig::default() }, &vocab, 128, 2).unwrap();
    let hc = HookCorpus::collect(&model, &corpus.sequences, 1).unwrap();
    for feature in [0, 13, 40] {
        let mut scan: Vec<(f64, usize, usize)> = Vec::new();
        for (s, t) in corpus.sequences.iter().enumerate() {
            let x = model.residual_at(&t.tokens, 1).unwrap();
            for (pos, row) in x.rows().into_iter().enumerate() {
                let a = sae.encode(row).unwrap()[feature];
                if a > 0.0 {
                    scan.push((a, s, pos));
                }
            }
        }
        scan.sort_by(|a, b| b.0.total_cmp(&a.0));
        let got = top_activations(&sae, feature, &hc, &vocab, 20, 4, &DensityConfig::default()).unwrap();
        assert_eq!(got.top_contexts.len(), scan.len().min(20));
        for (rec, want) in got.top_contexts.iter().zip(&scan) {
            assert_eq!((rec.sequence, rec.position), (want.1, want.2));
            assert!((rec.activation - want.0).abs() <= 1e-12);
            let tok = corpus.sequences[want.1].tokens[want.2];
            assert_eq!(rec.token, vocab.token(tok).unwrap());
        }
    }
}

#[test]
fn prompt_prefilter_matches_a_full_scan() {
    let (model, sae) = stack();
    let prompts: Vec<_> = (0..8)
        .map(|i| render_prompt(model.vocab(), &history_at_index(i, 3), 128).unwrap())
        .collect();
    for layer in 0..=model.n_layers() {
        // Residual scale differs by layer, so pick the bias that leaves about
        // half the features able to fire on these prompts.
        let mut sae = sae.clone();
        sae.b_enc.fill(0.0);
        let mut peak = vec![0.0f64; sae.d_latent()];
        for p in &prompts {
            for row in model.residual_at(p, layer).unwrap().rows() {
                for (j, a) in sae.encode(row).unwrap().iter().enumerate() {
                    peak[j] = peak[j].max(*a);
                }
            }
        }
        let mut sorted = peak.clone();
        sorted.sort_by(f64::total_cmp);
        sae.b_enc.fill(-sorted[sorted.len() / 2]);
        let mut want = vec![false; sae.d_latent()];
        for p in &prompts {
            for row in model.residual_at(p, layer).unwrap().rows() {
                for (j, a) in sae.encode(row).unwrap().iter().enumerate() {
                    want[j] |= *a > ACTIVE_EPS;
                }
            }
        }
        let want: Vec<usize> = (0..want.len()).filter(|&j| want[j]).collect();
        assert_eq!(prompt_active_features(&model, &sae, &prompts, layer, ACTIVE_EPS).unwrap(), want);
        assert!(!want.is_empty() && want.len() < sae.d_latent(), "layer {layer}: {}", want.len());
    }
}
