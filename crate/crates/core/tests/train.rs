use lmgrow::growth::{grow_pipeline, GrowthPlan, ScheduleConfig, WidthTargets};
use lmgrow::model::{init_model, loss_next_token, ModelConfig, Model};
use lmgrow::par::Execution;
use lmgrow::train::{
    cache_ref_logits, kto_margins, kto_train, pretrain, response_loss, sft, FrozenReference, KtoConfig,
    LogitCache, OptimizerConfig, PreferenceExample, RefSource, SftExample, TrainConfig,
};
use lmgrow::Error;

fn small() -> ModelConfig {
    ModelConfig {
        max_seq: 48,
        ..ModelConfig::toy(2, 16, 32, 2, 1, 259)
    }
}

fn cfg(steps: usize, batch: usize, lr: f32) -> TrainConfig {
    TrainConfig {
        batch_size: batch,
        learning_rate: lr,
        steps,
        seed: 11,
        ..Default::default()
    }
}

fn pattern_corpus() -> Vec<Vec<usize>> {
    (0..50)
        .map(|i| {
            let text = ["abcabcabc", "xyzxyzxyz", "hello hello"][i % 3].repeat(2);
            lmgrow::data::tokenize(&text, true)
        })
        .collect()
}

#[test]
fn pretraining_reduces_loss_and_is_deterministic() {
    let c = small();
    let w = init_model(&c, 1).unwrap();
    let stream = pattern_corpus();
    let run = |exec| {
        let t = TrainConfig {
            execution: exec,
            ..cfg(200, 4, 1e-2)
        };
        pretrain(&w, &c, &t, &stream, None).unwrap()
    };
    let a = run(Execution::Parallel);
    let first = a.first_loss().unwrap();
    let last = a.last_loss().unwrap();
    assert!(last < 0.5 * first, "{first} -> {last}");
    let b = run(Execution::Serial);
    assert_eq!(a.weights, b.weights);
    assert_eq!(a.log, b.log);
}

#[test]
fn grown_model_starts_at_base_loss() {
    let c = ModelConfig::toy(2, 16, 32, 2, 1, 259);
    let w = init_model(&c, 2).unwrap();
    let plan = GrowthPlan {
        schedule: ScheduleConfig {
            total_steps: 10,
            ..Default::default()
        },
        ..GrowthPlan::width(WidthTargets {
            model_dim: 32,
            ffn_dim: 48,
            attn_heads: 4,
        })
    };
    let grown = grow_pipeline(&w, &c, &plan, 3).unwrap();
    let schedule = grown.schedule.clone().unwrap();
    let stream = pattern_corpus();
    let t = cfg(3, 1, 1e-3);
    let out = pretrain(&grown.weights, &grown.config, &t, &stream, Some(&schedule)).unwrap();
    // Same seed, same corpus size: both runs draw the same first batch.
    let base = pretrain(&w, &c, &TrainConfig { learning_rate: 0.0, ..t.clone() }, &stream, None).unwrap();
    assert!((out.log[0].loss - base.log[0].loss).abs() <= 1e-4, "{:?} {:?}", out.log[0], base.log[0]);
    assert_eq!(out.log[0].mask, Some(0.0));
    assert!(out.log[2].mask.unwrap() > 0.0);
}

#[test]
fn zero_lr_keeps_weights_in_every_loop() {
    let c = small();
    let w = init_model(&c, 4).unwrap();
    let t = TrainConfig {
        optimizer: OptimizerConfig::sgd(),
        ..cfg(3, 2, 0.0)
    };
    assert_eq!(pretrain(&w, &c, &t, &pattern_corpus(), None).unwrap().weights, w);
    let data = vec![SftExample::from_text("q", "a"); 3];
    assert_eq!(sft(&w, &c, &t, &data).unwrap().weights, w);
    let prefs = preference_set(6);
    let frozen = FrozenReference::new(Model::new(c.clone(), w.clone()).unwrap());
    assert_eq!(
        kto_train(&w, &c, &t, &KtoConfig::default(), &prefs, RefSource::Frozen(&frozen)).unwrap().weights,
        w
    );
}

fn instruction_set() -> Vec<SftExample> {
    (0..100)
        .map(|i| {
            let (p, r) = match i % 4 {
                0 => (format!("add {i}"), "sum"),
                1 => (format!("greet {i}"), "hi there"),
                2 => (format!("color {i}"), "blue"),
                _ => (format!("count {i}"), "one two"),
            };
            SftExample::from_text(&p, r)
        })
        .collect()
}

#[test]
fn sft_with_and_without_noise() {
    let c = small();
    let w = init_model(&c, 5).unwrap();
    let data = instruction_set();
    let plain = sft(&w, &c, &cfg(4, 4, 1e-2), &data).unwrap();
    let again = sft(&w, &c, &cfg(4, 4, 1e-2), &data).unwrap();
    assert_eq!(plain.weights, again.weights);
    let noisy = sft(&w, &c, &TrainConfig { neft_alpha: 8.0, ..cfg(4, 4, 1e-2) }, &data).unwrap();
    assert_ne!(noisy.weights, plain.weights);
}

#[test]
fn sft_reduces_response_loss() {
    let c = small();
    let w = init_model(&c, 6).unwrap();
    let data = instruction_set();
    let before = response_loss(&w, &c, &data).unwrap();
    let out = sft(&w, &c, &TrainConfig { neft_alpha: 8.0, ..cfg(100, 4, 1e-2) }, &data).unwrap();
    let after = response_loss(&out.weights, &c, &data).unwrap();
    assert!(after < before, "{before} -> {after}");
}

fn preference_set(n: usize) -> Vec<PreferenceExample> {
    (0..n)
        .map(|i| {
            let desirable = i % 2 == 0;
            let completion = if desirable { "good answer" } else { "bad reply" };
            PreferenceExample::from_text(format!("p{i}"), &format!("question {}", i / 2), completion, desirable)
        })
        .collect()
}

#[test]
fn kto_at_reference_has_analytic_loss() {
    let c = small();
    let w = init_model(&c, 7).unwrap();
    let frozen = FrozenReference::new(Model::new(c.clone(), w.clone()).unwrap());
    let prefs = preference_set(10);
    let k = KtoConfig::default();
    let out = kto_train(&w, &c, &cfg(1, 10, 1e-3), &k, &prefs, RefSource::Frozen(&frozen)).unwrap();
    // Full batch of 5 desirable and 5 undesirable examples.
    let want = 0.5 * (1.375 * 5.0 + 1.0 * 5.0) / 10.0;
    assert_eq!(out.log[0].loss, want);
    assert_eq!(out.log[0].extra["z0"], 0.0);
    assert_eq!(out.log[0].extra["margin_desirable"], 0.0);
}

#[test]
fn kto_raises_the_desirable_margin() {
    let c = small();
    let w = init_model(&c, 8).unwrap();
    let frozen = FrozenReference::new(Model::new(c.clone(), w.clone()).unwrap());
    let prefs = preference_set(32);
    let k = KtoConfig::default();
    let out = kto_train(&w, &c, &cfg(200, 8, 5e-3), &k, &prefs, RefSource::Frozen(&frozen)).unwrap();
    let start = out.log[0].extra["margin_desirable"];
    let end = out.log.last().unwrap().extra["margin_desirable"];
    assert!(end > start, "{start} -> {end}");
    let (d, u) = kto_margins(&out.weights, &c, &k, &prefs, RefSource::Frozen(&frozen), Execution::Parallel).unwrap();
    assert!(d.unwrap() > 0.0 && u.unwrap() < 0.0, "{d:?} {u:?}");
}

#[test]
fn cached_reference_is_transparent() {
    let c = small();
    let w = init_model(&c, 9).unwrap();
    let frozen = FrozenReference::new(Model::new(c.clone(), w.clone()).unwrap());
    let prefs = preference_set(12);
    let k = KtoConfig::default();
    let t = cfg(6, 4, 1e-2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ref.bin");

    let uncached = kto_train(&w, &c, &t, &k, &prefs, RefSource::Frozen(&frozen)).unwrap();
    drop(cache_ref_logits(&frozen, &prefs, &path, Execution::Parallel).unwrap());

    let frozen2 = FrozenReference::new(Model::new(c.clone(), w.clone()).unwrap());
    let cache = LogitCache::open(&path, &frozen2.fingerprint()).unwrap();
    let cached = kto_train(&w, &c, &t, &k, &prefs, RefSource::Cache(&cache)).unwrap();
    assert_eq!(frozen2.forward_passes(), 0);
    assert_eq!(cached.weights, uncached.weights);
    assert_eq!(cached.log, uncached.log);

    // A second hyperparameter round also runs entirely from the cache.
    let k2 = KtoConfig { beta: 0.2, ..k };
    kto_train(&w, &c, &t, &k2, &prefs, RefSource::Cache(&cache)).unwrap();
    assert_eq!(frozen2.forward_passes(), 0);

    // Hits equal recomputation exactly.
    let e = &prefs[3];
    let hit = cache.get(&cache.key(&e.id, &e.prompt, &e.completion)).unwrap();
    assert_eq!(hit, frozen2.token_logps(&e.prompt, &e.completion).unwrap().as_slice());

    // Edited text misses.
    let mut edited = prefs.clone();
    edited[0] = PreferenceExample::from_text("p0", "question zero", "good answer", true);
    match kto_train(&w, &c, &cfg(1, 12, 1e-2), &k, &edited, RefSource::Cache(&cache)) {
        Err(Error::CacheInvalid(msg)) => assert!(msg.contains("p0"), "{msg}"),
        other => panic!("{other:?}"),
    }

    // A different reference model is refused.
    let other = init_model(&c, 10).unwrap();
    let fp = FrozenReference::new(Model::new(c.clone(), other).unwrap()).fingerprint();
    assert!(matches!(LogitCache::open(&path, &fp), Err(Error::CacheInvalid(_))));
}

#[test]
fn kto_losses_are_deterministic() {
    let c = small();
    let w = init_model(&c, 12).unwrap();
    let frozen = FrozenReference::new(Model::new(c.clone(), w.clone()).unwrap());
    let prefs = preference_set(8);
    let k = KtoConfig::default();
    let a = kto_train(&w, &c, &cfg(3, 4, 1e-2), &k, &prefs, RefSource::Frozen(&frozen)).unwrap();
    let t = TrainConfig {
        execution: Execution::Serial,
        ..cfg(3, 4, 1e-2)
    };
    let b = kto_train(&w, &c, &t, &k, &prefs, RefSource::Frozen(&frozen)).unwrap();
    assert_eq!(a.weights, b.weights);
    assert!(loss_next_token(&a.weights, &c, &prefs[0].prompt).is_ok());
}
