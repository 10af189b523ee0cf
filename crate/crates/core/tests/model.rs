use aisllm_core::ais::N_VARS;
use aisllm_core::model::*;
use aisllm_core::training::{sample_loss, AdamW, LossWeights, OptimizerConfig, Sample};
use diffcore::{grad_check_params, DiffError, ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        scales: vec![1, 4],
        d_prompt: 8,
        prompt_layers: 1,
        lm_layers: 1,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

fn random_window(seed: u64, n: usize) -> Vec<[f64; N_VARS]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| std::array::from_fn(|_| rng.gen_range(0.0..1.0))).collect()
}

fn set(model: &mut Model<f64>, name: &str, f: impl Fn(usize) -> f64) {
    let id = model.params.id(name).unwrap();
    for (i, x) in model.params.value_mut(id).data_mut().iter_mut().enumerate() {
        *x = f(i);
    }
}

fn value(model: &Model<f64>, name: &str) -> Tensor<f64> {
    model.params.value(model.params.id(name).unwrap()).clone()
}

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    c
}

#[test]
fn revin_constant_variable_is_zero() {
    let x: Vec<[f64; N_VARS]> = (0..18).map(|i| [0.3, i as f64, 0.7, 2.0 * i as f64]).collect();
    let (xn, st) = revin_normalize(&x);
    assert!(xn.iter().all(|r| r[0].abs() < 1e-9 && r[2].abs() < 1e-9));
    assert_eq!(st.std[0], REVIN_EPS);
}

#[test]
fn revin_statistics_and_round_trip() {
    let x = random_window(3, 18);
    let (xn, st) = revin_normalize(&x);
    for v in 0..N_VARS {
        let mean = xn.iter().map(|r| r[v]).sum::<f64>() / 18.0;
        let var = xn.iter().map(|r| (r[v] - mean).powi(2)).sum::<f64>() / 18.0;
        assert!(mean.abs() < 1e-12);
        assert!((var.sqrt() - 1.0).abs() < 1e-9);
    }
    let back = revin_denormalize(&xn, &st);
    for (a, b) in back.iter().zip(&x) {
        for v in 0..N_VARS {
            assert!((a[v] - b[v]).abs() < 1e-9);
        }
    }
}

#[test]
fn scale_positional_encoding_values() {
    let pe = scale_positional_encoding(5, 64, 4);
    assert_eq!(pe[64], 4f64.sin());
    assert_eq!(pe[65], 4f64.cos());
    assert_eq!(pe[0], 0.0);
    assert_eq!(pe[1], 1.0);
    // Column 2 uses 10000^(2/64).
    assert!((pe[64 + 2] - (4.0 / 10000f64.powf(2.0 / 64.0)).sin()).abs() < 1e-15);
}

#[test]
fn inverted_embedding_with_identity_weights() {
    let cfg = ModelConfig {
        d_model: 32,
        ..tiny()
    };
    let mut model = Model::<f64>::new(cfg.clone(), 1).unwrap();
    set(&mut model, "embed.w", |i| if i / 32 == i % 32 { 1.0 } else { 0.0 });
    set(&mut model, "embed.b", |_| 0.0);
    let x = random_window(4, 18);
    let tape = Tape::new();
    let fwd = Fwd::new(&tape, &model.params, &model.config, Mode::eval());
    let flat: Vec<f64> = x.iter().flatten().copied().collect();
    let xv = tape.constant(Tensor::new(&[18, 4], flat).unwrap());
    let h = fwd.linear(xv.transpose().unwrap(), "embed").unwrap().value();
    assert_eq!(h.shape(), &[4, 32]);
    for v in 0..4 {
        for j in 0..32 {
            let expect = if j < 18 { x[j][v] } else { 0.0 };
            assert_eq!(h.data()[v * 32 + j], expect);
        }
    }
}

#[test]
fn inverted_embedding_is_order_sensitive() {
    let cfg = ModelConfig {
        seq_in: 2,
        scales: vec![1],
        ..tiny()
    };
    let model = Model::<f64>::new(cfg, 2).unwrap();
    let embed = |rows: [[f64; 4]; 2]| {
        let tape = Tape::new();
        let fwd = Fwd::new(&tape, &model.params, &model.config, Mode::eval());
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let x = tape.constant(Tensor::new(&[2, 4], flat).unwrap());
        fwd.linear(x.transpose().unwrap(), "embed").unwrap().value().into_data()
    };
    let a = [[1.0, 2.0, 3.0, 4.0], [5.0, 6.0, 7.0, 8.0]];
    let b = [a[1], a[0]];
    // Direct evaluation: token v = x[0][v] * W[0] + x[1][v] * W[1] + b.
    let w = value(&model, "embed.w");
    let ea = embed(a);
    for v in 0..4 {
        for j in 0..8 {
            let expect = a[0][v] * w.data()[j] + a[1][v] * w.data()[8 + j];
            assert!((ea[v * 8 + j] - expect).abs() < 1e-12);
        }
    }
    assert_ne!(ea, embed(b));
}

fn block_store(d: usize, zero_branches: bool, seed: u64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let mut rand = |shape: &[usize], zero: bool| {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| if zero { 0.0 } else { rng.gen_range(-0.5..0.5) }).collect();
        Tensor::new(shape, data).unwrap()
    };
    for ln in ["ln1", "ln2"] {
        s.insert(format!("b.{ln}.g"), Tensor::full(&[d], 1.0)).unwrap();
        s.insert(format!("b.{ln}.b"), Tensor::zeros(&[d])).unwrap();
    }
    for p in ["q", "k", "v", "o"] {
        let z = zero_branches && p == "o";
        s.insert(format!("b.attn.{p}.w"), rand(&[d, d], z)).unwrap();
        s.insert(format!("b.attn.{p}.b"), rand(&[d], z)).unwrap();
    }
    s.insert("b.ff1.w", rand(&[d, 4 * d], false)).unwrap();
    s.insert("b.ff1.b", rand(&[4 * d], false)).unwrap();
    s.insert("b.ff2.w", rand(&[4 * d, d], zero_branches)).unwrap();
    s.insert("b.ff2.b", rand(&[d], zero_branches)).unwrap();
    s
}

#[test]
fn zero_residual_branches_are_identity() {
    let cfg = ModelConfig {
        d_model: 8,
        n_heads: 2,
        ..tiny()
    };
    let store = block_store(8, true, 5);
    let tape = Tape::new();
    let fwd = Fwd::new(&tape, &store, &cfg, Mode::eval());
    let x = Tensor::new(&[5, 8], (0..40).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let y = fwd.block(tape.constant(x.clone()), "b", false).unwrap().value();
    assert_eq!(y, x);
    let y = fwd.block(tape.constant(x.clone()), "b", true).unwrap().value();
    assert_eq!(y, x);
}

#[test]
fn single_head_attention_by_hand() {
    let cfg = ModelConfig {
        d_model: 2,
        n_heads: 1,
        ..tiny()
    };
    let mut s = ParamStore::new();
    // Wq = diag(1, 2), Wk = I, Wv = [[1, 1], [0, 1]], Wo = I, no biases.
    s.insert("t.q.w", Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap()).unwrap();
    s.insert("t.k.w", Tensor::eye(2)).unwrap();
    s.insert("t.v.w", Tensor::new(&[2, 2], vec![1.0, 1.0, 0.0, 1.0]).unwrap()).unwrap();
    s.insert("t.o.w", Tensor::eye(2)).unwrap();
    let tape = Tape::new();
    let fwd = Fwd::new(&tape, &s, &cfg, Mode::eval());
    let x = tape.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let y = fwd.mha(x, x, "t", false).unwrap().value();
    // q0 = (1, 0), q1 = (0, 2); k = x; v0 = (1, 1), v1 = (0, 1); scale 1/sqrt(2).
    let r = 1.0 / 2f64.sqrt();
    let w0 = [r.exp(), 1.0];
    let w1 = [1.0, (2.0 * r).exp()];
    let row = |w: [f64; 2]| {
        let z = w[0] + w[1];
        [w[0] / z, (w[0] + w[1]) / z]
    };
    let expect = [row(w0), row(w1)].concat();
    for (a, b) in y.data().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12, "{:?} vs {expect:?}", y.data());
    }
    let yc = fwd.mha(x, x, "t", true).unwrap().value();
    // Causal: the first row only sees itself.
    assert!((yc.data()[0] - 1.0).abs() < 1e-12 && (yc.data()[1] - 1.0).abs() < 1e-12);
    assert!((yc.data()[2] - expect[2]).abs() < 1e-12);
}

fn ms_model(scales: Vec<usize>) -> Model<f64> {
    let cfg = ModelConfig {
        scales,
        fusion: Fusion::Add,
        ..tiny()
    };
    let mut m = Model::<f64>::new(cfg, 9).unwrap();
    set(&mut m, "ms.fuse.o.w", |i| if i / 8 == i % 8 { 1.0 } else { 0.0 });
    set(&mut m, "ms.fuse.o.b", |_| 0.0);
    m
}

fn run_multiscale(m: &Model<f64>, x: &[[f64; N_VARS]]) -> (Vec<f64>, Vec<f64>) {
    let tape = Tape::new();
    let fwd = Fwd::new(&tape, &m.params, &m.config, Mode::eval());
    let flat: Vec<f64> = x.iter().flatten().copied().collect();
    let xv = tape.constant(Tensor::new(&[x.len(), 4], flat).unwrap());
    let out = fwd.multiscale(xv).unwrap().value().into_data();
    let xt = fwd.linear(xv, "ms.lift").unwrap().value().into_data();
    (out, xt)
}

#[test]
fn zero_alpha_gives_uniform_attention() {
    let mut m = ms_model(vec![1]);
    set(&mut m, "ms.s1.alpha", |_| 0.0);
    let x = random_window(7, 18);
    let (out, xt) = run_multiscale(&m, &x);
    let pe = scale_positional_encoding(18, 8, 1);
    let pooled: Vec<f64> = xt.iter().zip(&pe).map(|(a, b)| a + b).collect();
    let v = matmul(&pooled, value(&m, "ms.s1.v.w").data(), 18, 8, 8);
    for j in 0..8 {
        let mean = (0..18).map(|i| v[i * 8 + j]).sum::<f64>() / 18.0;
        for i in 0..18 {
            assert!((out[i * 8 + j] - xt[i * 8 + j] - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn coarse_scale_pools_to_one_token() {
    let m = ms_model(vec![32]);
    let x = random_window(8, 18);
    let (out, xt) = run_multiscale(&m, &x);
    // One pooled token: attention returns its value row, upsampled to every step.
    let mean: Vec<f64> = (0..8).map(|j| (0..18).map(|i| xt[i * 8 + j]).sum::<f64>() / 18.0).collect();
    let pe = scale_positional_encoding(1, 8, 32);
    let tok: Vec<f64> = mean.iter().zip(&pe).map(|(a, b)| a + b).collect();
    let v = matmul(&tok, value(&m, "ms.s32.v.w").data(), 1, 8, 8);
    for i in 0..18 {
        for j in 0..8 {
            assert!((out[i * 8 + j] - xt[i * 8 + j] - v[j]).abs() < 1e-12);
        }
    }
}

fn prompt_vec(m: &Model<f64>, text: &str) -> Vec<f64> {
    let tape = Tape::no_grad();
    let fwd = Fwd::new(&tape, &m.params, &m.config, Mode::eval());
    fwd.encode_prompt(text).unwrap().value().into_data()
}

#[test]
fn prompt_encoder_behaviour() {
    let m = Model::<f64>::new(tiny(), 11).unwrap();
    let e = prompt_vec(&m, "");
    assert_eq!(e.len(), 8);
    assert_eq!(e, prompt_vec(&m, ""));
    assert_eq!(prompt_vec(&m, "MARITIME TRAFFIC ANALYSIS"), prompt_vec(&m, "MARITIME TRAFFIC ANALYSIS"));
    assert_ne!(prompt_vec(&m, "NOW 12.0 KN"), prompt_vec(&m, "NOW 12.1 KN"));
    let tape = Tape::no_grad();
    let fwd = Fwd::new(&tape, &m.params, &m.config, Mode::eval());
    let long = "x".repeat(MAX_SEQ + 1);
    assert!(matches!(fwd.encode_prompt(&long), Err(aisllm_core::Error::PromptTooLong(_))));
}

#[test]
fn zero_prompt_projection_is_identity() {
    let mut m = Model::<f64>::new(tiny(), 12).unwrap();
    set(&mut m, "align.proj.w", |_| 0.0);
    set(&mut m, "align.chan.w", |_| 0.0);
    let tape = Tape::new();
    let fwd = Fwd::new(&tape, &m.params, &m.config, Mode::eval());
    let h = Tensor::new(&[4, 8], (0..32).map(|i| i as f64 * 0.1).collect()).unwrap();
    let hp = tape.constant(Tensor::new(&[1, 8], vec![0.5; 8]).unwrap());
    let out = fwd.align(tape.constant(h.clone()), hp).unwrap().value();
    assert_eq!(out, h);
}

#[test]
fn cross_attention_by_hand() {
    let cfg = ModelConfig {
        d_model: 2,
        n_heads: 1,
        d_prompt: 2,
        ..tiny()
    };
    let mut s = ParamStore::new();
    s.insert("align.proj.w", Tensor::new(&[2, 2], vec![1.0, 0.0, 1.0, 1.0]).unwrap()).unwrap();
    s.insert("align.q.w", Tensor::eye(2)).unwrap();
    s.insert("align.k.w", Tensor::eye(2)).unwrap();
    s.insert("align.v.w", Tensor::new(&[2, 2], vec![2.0, 0.0, 0.0, 3.0]).unwrap()).unwrap();
    s.insert("align.o.w", Tensor::eye(2)).unwrap();
    s.insert("align.chan.w", Tensor::new(&[2, 4], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
    let tape = Tape::new();
    let fwd = Fwd::new(&tape, &s, &cfg, Mode::eval());
    let h = Tensor::new(&[4, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
    let hp = tape.constant(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
    let out = fwd.align(tape.constant(h.clone()), hp).unwrap().value();
    // kv = hp·P = (3, 2); a single key gets weight 1, so every query receives v = (6, 6).
    // Channel bias: hp·C = (1, 0, 0, 2), one value per variable token.
    let chan: [f64; 4] = [1.0, 0.0, 0.0, 2.0];
    for v in 0..4 {
        for j in 0..2 {
            let expect = h.data()[v * 2 + j] + 6.0 + chan[v];
            assert!((out.data()[v * 2 + j] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn head_outputs() {
    let mut m = Model::<f64>::new(tiny(), 13).unwrap();
    set(&mut m, "head.coll.w", |_| 0.0);
    set(&mut m, "head.coll.b", |_| 0.0);
    set(&mut m, "head.traj.w", |_| 0.0);
    set(&mut m, "head.traj.b", |_| 0.0);
    let x = random_window(14, 18);
    let tape = Tape::new();
    let out = m
        .forward(&tape, &SampleInput { input: &x, prompt: "p", lm: None }, Mode::eval())
        .unwrap();
    let p = out.anomaly.value().into_data();
    assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
    assert_eq!(out.collision.item(), 0.5);
    let traj = out.trajectory.value();
    assert_eq!(traj.shape(), &[24, 4]);
    for v in 0..4 {
        let mean = x.iter().map(|r| r[v]).sum::<f64>() / 18.0;
        for t in 0..24 {
            assert!((traj.data()[t * 4 + v] - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn decoder_is_causal() {
    let m = Model::<f64>::new(tiny(), 15).unwrap();
    let tape = Tape::no_grad();
    let fwd = Fwd::new(&tape, &m.params, &m.config, Mode::eval());
    let ctx = tape.constant(Tensor::new(&[2, 8], (0..16).map(|i| i as f64 * 0.05).collect()).unwrap());
    let a = tokenize("abcdefgh");
    let mut b = a.clone();
    for t in &mut b[5..] {
        *t = b'z' as usize;
    }
    let la = fwd.lm_logits(ctx, &a).unwrap().value().into_data();
    let lb = fwd.lm_logits(ctx, &b).unwrap().value().into_data();
    let row = VOCAB;
    assert_eq!(la[..5 * row], lb[..5 * row]);
    assert_ne!(la[5 * row..6 * row], lb[5 * row..6 * row]);
}

#[test]
fn loss_rows_cover_target_only() {
    let m = Model::<f64>::new(tiny(), 16).unwrap();
    let tape = Tape::no_grad();
    let fwd = Fwd::new(&tape, &m.params, &m.config, Mode::eval());
    let ctx = tape.constant(Tensor::zeros(&[2, 8]));
    let (l1, t1) = fwd.lm_teacher(ctx, "abc", "defg").unwrap();
    let (l2, t2) = fwd.lm_teacher(ctx, "abcd", "efg").unwrap();
    assert_eq!(t1, vec![100, 101, 102, 103, EOS]);
    assert_eq!(t2.len(), t1.len() - 1);
    assert_eq!(l1.shape(), &[5, VOCAB]);
    assert_eq!(l2.shape(), &[4, VOCAB]);
    // The rows predicting "efg" + EOS are the same in both.
    assert_eq!(l1.value().data()[VOCAB..], l2.value().data()[..]);
    let long = "y".repeat(MAX_SEQ);
    assert!(matches!(fwd.lm_teacher(ctx, "p", &long), Err(aisllm_core::Error::SequenceTooLong(..))));
}

#[test]
fn generation_edge_cases() {
    let m = Model::<f64>::new(tiny(), 17).unwrap();
    let x = random_window(18, 18);
    let s = SampleInput { input: &x, prompt: "p", lm: None };
    assert!(m.generate(&s, "q", 0).unwrap().is_empty());
    let a = m.generate(&s, "q", 12).unwrap();
    assert_eq!(a, m.generate(&s, "q", 12).unwrap());
    assert!(a.len() <= 12);
}

fn two_samples() -> Vec<Sample> {
    (0..2)
        .map(|k| {
            let rows = random_window(20 + k, 42);
            Sample {
                input: rows[..18].to_vec(),
                target: rows[18..].to_vec(),
                label: k as u8,
                cri: 0.2 + 0.5 * k as f64,
                prompt: format!("MARITIME TRAFFIC ANALYSIS {k}"),
                lm_prompt: format!("P{k}"),
                explanation: format!("ok {k}"),
            }
        })
        .collect()
}

#[test]
fn full_model_gradient_check() {
    let model = Model::<f64>::new(tiny(), 21).unwrap();
    let samples = two_samples();
    let weights = LossWeights::default();
    let cfg = model.config.clone();
    let worst = grad_check_params(|tape, store| batch_loss(tape, store, &cfg, &samples, &weights), &model.params, 3).unwrap();
    assert!(worst < 1e-4, "worst relative error {worst}");
}

fn batch_loss<'t>(
    tape: &'t Tape<f64>,
    store: &ParamStore<f64>,
    cfg: &ModelConfig,
    samples: &[Sample],
    weights: &LossWeights,
) -> diffcore::Result<diffcore::Var<'t, f64>> {
    let fwd = Fwd::new(tape, store, cfg, Mode::eval());
    let mut total: Option<diffcore::Var<'t, f64>> = None;
    for s in samples {
        let out = fwd.forward(&s.input_ref(true)).map_err(to_diff)?;
        let l = sample_loss(tape, &out, s, cfg.label_smoothing).map_err(to_diff)?;
        let t = l.total(weights).map_err(to_diff)?.scale(0.5);
        total = Some(match total {
            None => t,
            Some(acc) => t.add(acc)?,
        });
    }
    Ok(total.expect("non-empty batch"))
}

fn to_diff(e: aisllm_core::Error) -> DiffError {
    DiffError::Format(e.to_string())
}

#[test]
fn checkpoint_round_trip() {
    let m = Model::<f32>::new(tiny(), 22).unwrap();
    let mut bytes = Vec::new();
    m.save(&mut bytes).unwrap();
    let back = Model::<f32>::load(bytes.as_slice()).unwrap();
    assert_eq!(back.config, m.config);
    for ((n1, t1), (n2, t2)) in m.params.named_values().zip(back.params.named_values()) {
        assert_eq!(n1, n2);
        assert_eq!(t1, t2);
    }
    assert!(Model::<f32>::load(&bytes[..bytes.len() - 3]).is_err());
}

#[test]
fn variants_change_structure() {
    let names = |v: Variant| {
        let m = Model::<f32>::new(tiny().with_variant(v), 1).unwrap();
        m.params.named_values().map(|(n, _)| n.to_string()).collect::<Vec<_>>()
    };
    let single = names(Variant::NoMultiscale);
    assert!(single.iter().any(|n| n == "ms.s1.alpha"));
    assert!(!single.iter().any(|n| n == "ms.s4.alpha"));
    assert!(!names(Variant::NoAlignment).iter().any(|n| n.starts_with("align.")));
    assert!(!names(Variant::ConcatFusion).iter().any(|n| n == "ms.fuse.q.w"));
    assert_eq!(Variant::NoMultiscale.label(), "w/o Multi-scale (Single)");
    let x = random_window(30, 18);
    for v in std::iter::once(Variant::Full).chain(Variant::ABLATIONS) {
        let m = Model::<f32>::new(ModelConfig::default().with_variant(v), 3).unwrap();
        let tape = Tape::no_grad();
        let out = m.forward(&tape, &SampleInput { input: &x, prompt: "p", lm: None }, Mode::eval()).unwrap();
        assert!(out.trajectory.value().is_finite(), "{}", v.name());
    }
}

#[test]
fn invalid_configs_are_rejected() {
    for bad in [
        ModelConfig { d_model: 10, n_heads: 4, ..ModelConfig::default() },
        ModelConfig { scales: vec![4, 1], ..ModelConfig::default() },
        ModelConfig { scales: vec![], ..ModelConfig::default() },
        ModelConfig { n_vars: 3, ..ModelConfig::default() },
    ] {
        assert!(Model::<f32>::new(bad, 0).is_err());
    }
}

#[test]
fn decoder_memorises_ten_pairs() {
    let cfg = ModelConfig {
        d_model: 64,
        n_heads: 4,
        lm_layers: 2,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let mut model = Model::<f32>::new(cfg.clone(), 23).unwrap();
    let speeds = ["steady speed", "accelerating", "decelerating"];
    let risks = ["minimal collision risk", "moderate collision risk"];
    let pairs: Vec<(String, String)> = (0..10)
        .map(|k| {
            (
                format!("MARITIME TRAFFIC ANALYSIS\nCASE {k:02}\n"),
                format!("Vessel {k:02} is {} with {}.", speeds[k % 3], risks[k % 2]),
            )
        })
        .collect();
    let ctx = Tensor::<f32>::zeros(&[2, 64]);
    let opt = OptimizerConfig {
        weight_decay: 0.0,
        ..OptimizerConfig::default()
    };
    let mut adam = AdamW::new(&model.params);
    let mut ce = f64::INFINITY;
    let mut steps = 0;
    while steps < 500 {
        model.params.zero_grads();
        ce = 0.0;
        for (p, t) in &pairs {
            let tape = Tape::new();
            let fwd = Fwd::new(&tape, &model.params, &model.config, Mode::eval());
            let (logits, targets) = fwd.lm_teacher(tape.constant(ctx.clone()), p, t).unwrap();
            let w = vec![1.0 / targets.len() as f32; targets.len()];
            let loss = logits.cross_entropy_logits(&targets, &w, 0.0).unwrap();
            ce += loss.item() as f64 / pairs.len() as f64;
            let g = tape.backward(loss).unwrap().into_params();
            model.params.accumulate(&g, 1.0 / pairs.len() as f32);
        }
        steps += 1;
        if ce < 0.02 {
            break;
        }
        adam.step(&mut model.params, 1e-3, &opt);
    }
    assert!(ce < 0.1, "cross-entropy {ce} after {steps} steps");
    for (p, t) in &pairs {
        let out = model.generate_from_context(&ctx, p, 80).unwrap();
        assert_eq!(detokenize(&out), *t);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(9))]
    #[test]
    fn forward_shapes_for_any_config(d in prop::sample::select(vec![8usize, 16, 32]), heads in prop::sample::select(vec![1usize, 2, 4]), seed in 0u64..100) {
        let cfg = ModelConfig { d_model: d, d_prompt: d, n_heads: heads, ..tiny() };
        let m = Model::<f32>::new(cfg, seed).unwrap();
        let x = random_window(seed, 18);
        let tape = Tape::no_grad();
        let out = m.forward(&tape, &SampleInput { input: &x, prompt: "MARITIME", lm: Some(("ab", "cde")) }, Mode::eval()).unwrap();
        prop_assert_eq!(out.trajectory.shape(), &[24, 4]);
        prop_assert_eq!(out.anomaly.shape(), &[1, 2]);
        prop_assert_eq!(out.collision.shape(), &[1, 1]);
        prop_assert_eq!(out.aligned.shape(), &[4, d]);
        let (logits, targets) = out.lm.unwrap();
        prop_assert_eq!(logits.shape(), &[4, VOCAB]);
        prop_assert_eq!(targets.len(), 4);
    }
}
