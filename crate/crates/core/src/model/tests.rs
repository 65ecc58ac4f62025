use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{collate, generate_corpus, Corpus, CorpusSpec, Split, Utterance};
use crate::numerics::{grad_check, GradCheckOptions};

fn corpus() -> Corpus {
    generate_corpus(&CorpusSpec {
        train: 12,
        dev: 3,
        test: 3,
        ..Default::default()
    })
    .unwrap()
}

fn tiny(preset: &str, c: &Corpus) -> LupetConfig {
    let vocab = c.vocab().unwrap().len();
    let mut cfg = LupetConfig::preset(preset)
        .unwrap()
        .with_corpus(c.info.d_feat, vocab, c.info.n_languages(), c.info.n_ipa());
    cfg.d_model = 16;
    cfg.heads = 2;
    cfg.d_ff = 32;
    cfg.conv_kernel = 3;
    cfg.n_enc_layers = 4;
    cfg.stage_layers = [1, 2, 3, 4];
    cfg.n_dec_layers = 1;
    cfg.n_experts = 2;
    cfg.quantizer.n_codes = 16;
    cfg.quantizer.d_code = 4;
    cfg.mlm_start_epoch = 0;
    cfg.mask.start_prob = 0.05;
    cfg.mask.span = 8;
    cfg
}

fn train_batch(c: &Corpus, n: usize) -> Batch {
    let utts: Vec<&Utterance> = c.split(Split::Train).into_iter().take(n).collect();
    collate(&utts, 0).unwrap()
}

fn loss(model: &LupetModel, batch: &Batch, epoch: usize) -> LossBreakdown {
    let g = Graph::new();
    let cx = Ctx::new(&g, &model.store);
    model.batch_loss(&cx, batch, epoch).unwrap().breakdown
}

#[test]
fn preset_values() {
    assert_eq!(LupetConfig::preset("lupet").unwrap().w2, 0.07);
    assert_eq!(LupetConfig::preset("lupet_w2_1").unwrap().w2, 1.0);
    assert_eq!(LupetConfig::preset("lupet_Uto50ep").unwrap().mlm_end_epoch, 50);
    let l = LupetConfig::preset("lupet").unwrap();
    assert_eq!((l.lambda_ctc, l.w1, l.w3), (0.3, 0.3, 0.3));
    let p = LupetConfig::preset("lupet_large").unwrap();
    assert_eq!(p.stage_layers, [3, 6, 9, 12]);
    assert_eq!((p.d_model, p.quantizer.n_codes, p.quantizer.d_code, p.n_experts), (512, 8192, 16, 8));
    let moe = LupetConfig::preset("moe").unwrap();
    assert_eq!(moe.effective_router_input(), RouterInput::UpperMiddle);
    assert!(!moe.use_lid);
    let no_lu = LupetConfig::preset("lupet_no_LU").unwrap();
    assert!(!no_lu.use_lid && !no_lu.use_unit && no_lu.use_ipa && no_lu.use_moe);
    assert_eq!(LupetConfig::preset("oracle_lid").unwrap().oracle_lid_dim, 8);
    assert!(LupetConfig::preset("nope").unwrap_err().is_config());
    for name in PRESETS {
        assert_eq!(LupetConfig::preset(name).unwrap().preset, name);
    }
}

#[test]
fn config_toml_round_trip_and_validation() {
    let c = corpus();
    let cfg = tiny("lupet", &c);
    assert_eq!(LupetConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    assert!(LupetConfig::from_toml("bogus_key = 1").unwrap_err().is_config());
    let over = cfg.overlay_toml("w2 = 1.0\n[train]\nepochs = 3\n").unwrap();
    assert_eq!((over.w2, over.train.epochs, over.train.batch_size), (1.0, 3, cfg.train.batch_size));
    assert!(over.use_moe);
    assert!(cfg.overlay_toml("[train]\nnope = 1\n").unwrap_err().is_config());
    let bad = [
        LupetConfig {
            stage_layers: [1, 1, 3, 4],
            ..cfg.clone()
        },
        LupetConfig {
            stage_layers: [1, 2, 3, 5],
            ..cfg.clone()
        },
        LupetConfig { w2: -0.1, ..cfg.clone() },
        LupetConfig {
            lambda_ctc: 1.5,
            ..cfg.clone()
        },
        LupetConfig {
            n_experts: 1,
            ..cfg.clone()
        },
    ];
    for b in bad {
        assert!(LupetModel::new(b).unwrap_err().is_config());
    }
    let mono = tiny("mono", &c);
    assert!(mono.validate().unwrap_err().is_config());
    assert!(LupetConfig { language: Some(1), ..mono }.validate().is_ok());
}

#[test]
fn total_combines_weighted_terms() {
    let cfg = LupetConfig::preset("lupet").unwrap();
    let b = LossBreakdown {
        l_attn: 1.0,
        l_ctc: 2.0,
        l_lid: 1.0,
        l_mlm: 3.0,
        l_ipa: 0.5,
        total: 0.0,
        mlm_active: true,
    };
    assert!((b.combine(&cfg) - 1.96).abs() < 1e-12);
    let off = LossBreakdown { mlm_active: false, ..b };
    assert!((off.combine(&cfg) - (1.96 - 0.21)).abs() < 1e-12);
}

#[test]
fn lid_head_width_is_languages_plus_one() {
    let c = corpus();
    let m = LupetModel::new(tiny("lid_sc", &c)).unwrap();
    let id = m.store.id("lid.head.w").unwrap();
    assert_eq!(m.store.value(id).shape(), &[16, 4]);
    let mut ten = tiny("lid_sc", &c);
    ten.n_lid = 10;
    let m = LupetModel::new(ten).unwrap();
    assert_eq!(m.store.value(m.store.id("lid.head.w").unwrap()).shape(), &[16, 11]);
}

#[test]
fn confident_lid_logits_collapse_to_one_language() {
    // Language 2 (label 3) on most frames, blanks in between.
    let mut rows = Vec::new();
    for t in 0..12 {
        let mut r = vec![-10.0; 4];
        r[if t % 4 == 3 { 0 } else { 3 }] = 10.0;
        rows.push(r);
    }
    let g = Graph::inference();
    let z = g.constant(Tensor::from_rows(&rows).unwrap());
    let lp = g.log_softmax(z, 1).unwrap();
    let out = ctc_greedy_decode(&g.value(lp));
    let mut uniq = out.clone();
    uniq.dedup();
    assert_eq!(uniq, vec![3]);
}

#[test]
fn self_condition_examples() {
    let mut store = ParamStore::new();
    let init = Init::new(3);
    let zero = Linear::new(&mut store, &init, "zero", 5, 6, true);
    let lin = Linear::new(&mut store, &init, "lin", 5, 6, true);
    let zw = store.id("zero.w").unwrap();
    store.get_mut(zw).value = Tensor::zeros(&[5, 6]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = Tensor::randn(&[7, 6], 1.0, &mut rng);
    let z = Tensor::randn(&[7, 5], 1.0, &mut rng);
    let g = Graph::new();
    let cx = Ctx::new(&g, &store);
    for norm in [SelfCondNorm::Softmax, SelfCondNorm::Raw] {
        let (out, _) = self_condition(&cx, g.constant(h.clone()), g.constant(z.clone()), &zero, norm).unwrap();
        assert_eq!(*g.value(out), h);
        let (out, e) = self_condition(&cx, g.constant(h.clone()), g.constant(z.clone()), &lin, norm).unwrap();
        assert_eq!(g.shape(out), vec![7, 6]);
        assert_eq!(g.shape(e), vec![7, 6]);
    }

    // Gradients reach both inputs and agree with central differences.
    let w = Tensor::randn(&[7, 6], 1.0, &mut rng);
    let f = |h: &Tensor, z: &Tensor| -> f64 {
        let g = Graph::inference();
        let cx = Ctx::new(&g, &store);
        let (o, _) = self_condition(&cx, g.constant(h.clone()), g.constant(z.clone()), &lin, SelfCondNorm::Softmax).unwrap();
        g.value(o).data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    };
    let g = Graph::new();
    let cx = Ctx::new(&g, &store);
    let hv = g.leaf(h.clone());
    let zv = g.leaf(z.clone());
    let (o, _) = self_condition(&cx, hv, zv, &lin, SelfCondNorm::Softmax).unwrap();
    let obj = g.sum(g.mul(o, g.constant(w.clone())).unwrap());
    let grads = g.backward(obj).unwrap();
    for (v, x, is_h) in [(hv, &h, true), (zv, &z, false)] {
        let an = grads.get(v).unwrap();
        assert!(an.max_abs() > 0.0);
        for i in 0..x.len() {
            let mut p = x.clone();
            let mut m = x.clone();
            p.data_mut()[i] += 1e-6;
            m.data_mut()[i] -= 1e-6;
            let num = if is_h {
                (f(&p, &z) - f(&m, &z)) / 2e-6
            } else {
                (f(&h, &p) - f(&h, &m)) / 2e-6
            };
            assert!((an.data()[i] - num).abs() < 1e-6, "{} vs {num}", an.data()[i]);
        }
    }
}

#[test]
fn vanilla_equals_flags_off_bit_for_bit() {
    let c = corpus();
    let batch = train_batch(&c, 3);
    let vanilla = LupetModel::new(tiny("vanilla", &c)).unwrap();
    let mut off_cfg = tiny("lupet", &c);
    off_cfg.use_lid = false;
    off_cfg.use_unit = false;
    off_cfg.use_ipa = false;
    off_cfg.use_moe = false;
    off_cfg.preset = "vanilla".into();
    let off = LupetModel::new(off_cfg).unwrap();
    let a = loss(&vanilla, &batch, 7);
    let b = loss(&off, &batch, 7);
    assert_eq!(a, b);
    assert_eq!((a.l_lid, a.l_mlm, a.l_ipa), (0.0, 0.0, 0.0));
    assert_eq!(a.total, 0.7 * a.l_attn + 0.3 * a.l_ctc);
}

#[test]
fn inactive_mlm_means_no_masking() {
    let c = corpus();
    let batch = train_batch(&c, 2);
    let mut cfg = tiny("lupet", &c);
    cfg.mlm_start_epoch = 2;
    cfg.mlm_end_epoch = 4;
    let with_u = LupetModel::new(cfg.clone()).unwrap();
    let without_u = LupetModel::new(LupetConfig {
        use_unit: false,
        ..cfg.clone()
    })
    .unwrap();
    for epoch in [0, 1, 4, 9] {
        let a = loss(&with_u, &batch, epoch);
        assert_eq!(a.l_mlm, 0.0);
        assert!(!a.mlm_active);
        assert_eq!(a, loss(&without_u, &batch, epoch));
    }
    for epoch in [2, 3] {
        let a = loss(&with_u, &batch, epoch);
        assert!(a.mlm_active && a.l_mlm > 0.0);
    }
}

#[test]
fn reported_total_matches_components() {
    let c = corpus();
    for (i, preset) in ["lupet", "lupet_no_P", "lid_sc", "moe", "lupet_no_LU"].iter().enumerate() {
        let mut cfg = tiny(preset, &c);
        cfg.seed = i as u64;
        let m = LupetModel::new(cfg.clone()).unwrap();
        let b = loss(&m, &train_batch(&c, 3), 1);
        assert!((b.combine(&cfg) - b.total).abs() < 1e-9, "{preset}: {b:?}");
        assert!(b.total.is_finite());
    }
}

#[test]
fn router_sees_exactly_the_lid_embedding() {
    let c = corpus();
    let m = LupetModel::new(tiny("lupet", &c)).unwrap();
    let u = &c.utterances[0];
    let g = Graph::new();
    let cx = Ctx::new(&g, &m.store);
    let enc = m.encode_vars(&cx, &u.features, u.lid).unwrap();
    assert_eq!(enc.router_input, enc.lid_emb);
    assert!(enc.lid_emb.is_some());
    assert_eq!(enc.routings.len(), 1);

    let moe = LupetModel::new(tiny("moe", &c)).unwrap();
    let cx = Ctx::new(&g, &moe.store);
    let enc = moe.encode_vars(&cx, &u.features, u.lid).unwrap();
    assert!(enc.lid_emb.is_none() && enc.router_input.is_some());
}

#[test]
fn moe_layers_sit_in_the_deep_block() {
    let c = corpus();
    let mut cfg = tiny("lupet", &c);
    cfg.n_enc_layers = 6;
    cfg.stage_layers = [1, 2, 3, 6];
    let m = LupetModel::new(cfg).unwrap();
    assert_eq!(m.n_moe_layers(), 3);
    assert!(m.store.id("enc.3.moe.expert1.up.w").is_some());
    assert!(m.store.id("enc.3.moe.router.w").is_some());
    assert!(!m.store.iter().any(|(_, p)| p.name.starts_with("enc.2.") && p.name.contains("expert")));
}

#[test]
fn infeasible_targets_name_the_utterance() {
    let c = corpus();
    let m = LupetModel::new(tiny("vanilla", &c)).unwrap();
    let mut batch = train_batch(&c, 2);
    batch.tokens[1] = vec![5; 200];
    let g = Graph::new();
    let cx = Ctx::new(&g, &m.store);
    match m.batch_loss(&cx, &batch, 0) {
        Err(Error::Utterance { id, .. }) => assert_eq!(id, batch.ids[1]),
        Err(e) => panic!("wrong error {e}"),
        Ok(_) => panic!("expected an error"),
    }
}

#[test]
fn padding_does_not_change_the_loss() {
    let c = corpus();
    let m = LupetModel::new(tiny("lupet", &c)).unwrap();
    let utts: Vec<&Utterance> = c.split(Split::Train).into_iter().take(3).collect();
    let a = loss(&m, &collate(&utts, 0).unwrap(), 1);
    let b = loss(&m, &collate(&utts, 23).unwrap(), 1);
    assert_eq!(a, b);
}

#[test]
fn end_to_end_gradient_check() {
    let c = corpus();
    let mut cfg = tiny("lupet", &c);
    cfg.mask.start_prob = 0.1;
    let m = LupetModel::new(cfg).unwrap();
    let batch = train_batch(&c, 2);
    let opts = GradCheckOptions {
        eps: 1e-5,
        max_entries: Some(4),
        seed: 3,
    };
    let report = grad_check::<_, Error>(
        &m.store,
        |g, store| {
            let cx = Ctx::new(g, store);
            let out = m.batch_loss(&cx, &batch, 0)?;
            assert!(out.breakdown.mlm_active);
            Ok(out.total)
        },
        &opts,
    )
    .unwrap();
    let worst = report
        .params
        .iter()
        .filter(|p| !p.name.ends_with(".k.b"))
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .unwrap();
    assert!(worst.max_rel_err <= 1e-3, "{worst:?}");
    assert!(report.params.iter().all(|p| p.name != QUANTIZER_PROJ && p.name != QUANTIZER_CODEBOOK));
}

#[test]
fn checkpoint_round_trip() {
    let c = corpus();
    let m = LupetModel::new(tiny("lupet", &c)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&m, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.config, m.config);
    assert_eq!(back.quantizer(), m.quantizer());
    assert_eq!(back.quantizer().unwrap().sha256_hex(), m.quantizer().unwrap().sha256_hex());
    assert_eq!(checkpoint_bytes(&back), checkpoint_bytes(&m));
    let batch = train_batch(&c, 2);
    assert_eq!(loss(&back, &batch, 1), loss(&m, &batch, 1));

    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], CHECKPOINT_MAGIC);
    let mut bad = bytes.clone();
    bad[100] ^= 1;
    assert!(matches!(parse_checkpoint(&bad), Err(Error::Checkpoint(_))));
    assert!(matches!(parse_checkpoint(&bytes[..50]), Err(Error::Checkpoint(_))));
}

#[test]
fn averaging_checkpoints() {
    let c = corpus();
    let models: Vec<LupetModel> = (0..3)
        .map(|s| {
            let mut cfg = tiny("lupet", &c);
            cfg.seed = s;
            LupetModel::new(cfg).unwrap()
        })
        .collect();
    let one = average_models(&models[..1]).unwrap();
    assert_eq!(one.store, models[0].store);

    let mut neg = models[0].clone();
    let ids: Vec<_> = neg.store.ids().collect();
    for &id in &ids {
        if !neg.store.get(id).frozen {
            neg.store.get_mut(id).value.data_mut().iter_mut().for_each(|x| *x = -*x);
        }
    }
    let zero = average_models(&[models[0].clone(), neg]).unwrap();
    for (_, p) in zero.store.iter() {
        if !p.frozen {
            assert!(p.value.data().iter().all(|&x| x == 0.0), "{}", p.name);
        }
    }

    let dir = tempfile::tempdir().unwrap();
    let paths: Vec<_> = (0..3).map(|i| dir.path().join(format!("{i}.ckpt"))).collect();
    for (m, p) in models.iter().zip(&paths) {
        save_checkpoint(m, p).unwrap();
    }
    let refs: Vec<&std::path::Path> = paths.iter().map(|p| p.as_path()).collect();
    let avg = average_checkpoints(&refs).unwrap();
    for id in ids {
        let p = avg.store.get(id);
        let (a, b, cc) = (models[0].store.value(id), models[1].store.value(id), models[2].store.value(id));
        for i in 0..p.value.len() {
            let expect = if p.frozen {
                a.data()[i]
            } else {
                (a.data()[i] + b.data()[i] + cc.data()[i]) / 3.0
            };
            assert!((p.value.data()[i] - expect).abs() <= 1e-12);
        }
    }

    let other = LupetModel::new(tiny("vanilla", &c)).unwrap();
    assert!(matches!(
        average_models(&[models[0].clone(), other]),
        Err(Error::Checkpoint(_))
    ));
}

#[test]
fn oracle_embedding_is_appended_per_frame() {
    let c = corpus();
    let m = LupetModel::new(tiny("oracle_lid", &c)).unwrap();
    let emb = m.store.value(m.store.id("oracle_lid").unwrap());
    assert_eq!(emb.shape(), &[3, 8]);
    let u = &c.utterances[0];
    let a = m.encode(&u.features, 0).unwrap();
    let b = m.encode(&u.features, 1).unwrap();
    assert_ne!(a.memory, b.memory);
    assert!(m.encode(&u.features, 3).unwrap_err().is_config());
}

#[test]
fn decoding_runs_and_respects_length_cap() {
    let c = corpus();
    let m = LupetModel::new(tiny("lupet", &c)).unwrap();
    let u = &c.utterances[0];
    let enc = m.encode(&u.features, u.lid).unwrap();
    assert_eq!(enc.ctc_log_probs.shape(), &[crate::nnet::subsampled_len(u.n_frames()), m.config.vocab_size]);
    let hyp = m.decode_attention(&u.features, u.lid, 2).unwrap();
    assert!(hyp.tokens.len() <= enc.memory.rows() + 1);
    let g = m.decode_attention(&u.features, u.lid, 1).unwrap();
    let b1 = m.decode_attention_beam(&u.features, u.lid, 1).unwrap();
    assert_eq!(g.tokens, b1.tokens);
    m.decode_ctc_greedy(&u.features, u.lid).unwrap();
}
