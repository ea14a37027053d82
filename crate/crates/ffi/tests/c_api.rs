use std::ffi::{CStr, CString};
use std::ptr;

use cplab::model::{LanguageModel, ModelConfig};
use cplab::tokenizer::{Tokenizer, TrainOptions};
use cplab_ffi::*;

const CORPUS: &str = "the cat sat on the mat. the dog sat on the log. a cat and a dog met on the mat. ";

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(cplab_last_error()) }.to_string_lossy().into_owned()
}

fn corpus() -> CString {
    c(&CORPUS.repeat(40))
}

fn tokenizer() -> *mut CplabTokenizer {
    let mut tok = ptr::null_mut();
    let st = unsafe { cplab_tokenizer_train(corpus().as_ptr(), 300, 2, 0, &mut tok) };
    assert_eq!(st, CplabStatus::Ok, "{}", last_error());
    tok
}

fn model(tok: *const CplabTokenizer, seed: u64) -> *mut CplabModel {
    let mut m = ptr::null_mut();
    let st = unsafe { cplab_model_init(c("mini-causal").as_ptr(), tok, seed, &mut m) };
    assert_eq!(st, CplabStatus::Ok, "{}", last_error());
    m
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(cplab_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn tokenizer_matches_library_and_reports_buffer_size() {
    let tok = tokenizer();
    let text = CORPUS.repeat(40);
    let lib =
        Tokenizer::train(&text, TrainOptions { vocab_size: 300, min_frequency: 2, seed: 0, pre_split: true }).unwrap();
    assert_eq!(unsafe { cplab_tokenizer_vocab_size(tok) }, lib.vocab_size());

    let want = lib.encode("the cat met the dog");
    let mut len = 0usize;
    let st = unsafe { cplab_tokenizer_encode(tok, c("the cat met the dog").as_ptr(), ptr::null_mut(), 0, &mut len) };
    assert_eq!(st, CplabStatus::BufferTooSmall);
    assert_eq!(len, want.len());
    assert!(last_error().contains("do not fit"));

    let mut ids = vec![0u32; len];
    let st = unsafe {
        cplab_tokenizer_encode(tok, c("the cat met the dog").as_ptr(), ids.as_mut_ptr(), ids.len(), &mut len)
    };
    assert_eq!(st, CplabStatus::Ok);
    assert_eq!(ids, want);
    assert_eq!(last_error(), "");

    let dir = tempfile::tempdir().unwrap();
    let path = c(dir.path().join("tok.txt").to_str().unwrap());
    let mut back = ptr::null_mut();
    unsafe {
        assert_eq!(cplab_tokenizer_save(tok, path.as_ptr()), CplabStatus::Ok);
        assert_eq!(cplab_tokenizer_load(path.as_ptr(), &mut back), CplabStatus::Ok);
        assert_eq!(cplab_tokenizer_vocab_size(back), lib.vocab_size());
        cplab_tokenizer_free(back);
        cplab_tokenizer_free(tok);
    }
}

#[test]
fn argument_errors_map_to_status_codes() {
    let tok = tokenizer();
    let mut out = ptr::null_mut();
    let mut len = 0usize;
    unsafe {
        assert_eq!(cplab_tokenizer_train(ptr::null(), 300, 2, 0, &mut out), CplabStatus::NullArgument);
        assert_eq!(last_error(), "text is null");
        let bad = [0xffu8, 0xfe, 0];
        assert_eq!(
            cplab_tokenizer_encode(tok, bad.as_ptr().cast(), ptr::null_mut(), 0, &mut len),
            CplabStatus::InvalidUtf8
        );
        let mut m = ptr::null_mut();
        assert_eq!(cplab_model_init(c("huge-causal").as_ptr(), tok, 0, &mut m), CplabStatus::Config);
        assert!(m.is_null());
        assert_eq!(cplab_model_load(c("/nonexistent/model").as_ptr(), &mut m), CplabStatus::Io);
        assert!(!last_error().is_empty());
        assert_eq!(cplab_tokenizer_vocab_size(ptr::null()), 0);
        assert_eq!(cplab_model_param_count(ptr::null()), 0);
        cplab_tokenizer_free(ptr::null_mut());
        cplab_model_free(ptr::null_mut());
        cplab_fisher_free(ptr::null_mut());
        cplab_tokenizer_free(tok);
    }
}

#[test]
fn model_scores_match_library() {
    let tok = tokenizer();
    let m = model(tok, 7);
    let lib_tok = Tokenizer::train(
        &CORPUS.repeat(40),
        TrainOptions { vocab_size: 300, min_frequency: 2, seed: 0, pre_split: true },
    )
    .unwrap();
    let mut cfg = ModelConfig::preset("mini-causal").unwrap();
    cfg.vocab_size = lib_tok.vocab_size();
    cfg.seed = 7;
    let lib: LanguageModel<f32> = LanguageModel::init(cfg, lib_tok.fingerprint()).unwrap();
    let ids = lib_tok.encode("a dog sat on the mat");
    let want = lib.sequence_logprob(&ids).unwrap();
    unsafe {
        assert_eq!(cplab_model_param_count(m), lib.params.total_dim());
        assert_eq!(cplab_model_context(m), lib.config.n_positions);
        let mut got = 0.0;
        assert_eq!(cplab_model_sequence_logprob(m, ids.as_ptr(), ids.len(), &mut got), CplabStatus::Ok);
        assert_eq!(got, want);
        let mut by_text = 0.0;
        assert_eq!(cplab_model_text_logprob(m, tok, c("a dog sat on the mat").as_ptr(), &mut by_text), CplabStatus::Ok);
        assert_eq!(by_text, want);

        let dir = tempfile::tempdir().unwrap();
        let path = c(dir.path().join("model").to_str().unwrap());
        let mut back = ptr::null_mut();
        assert_eq!(cplab_model_save(m, path.as_ptr()), CplabStatus::Ok, "{}", last_error());
        assert_eq!(cplab_model_load(path.as_ptr(), &mut back), CplabStatus::Ok, "{}", last_error());
        let mut again = 0.0;
        assert_eq!(cplab_model_sequence_logprob(back, ids.as_ptr(), ids.len(), &mut again), CplabStatus::Ok);
        assert_eq!(again, want);

        let other = Tokenizer::bytes_only();
        let mut ob = ptr::null_mut();
        let opath = c(dir.path().join("bytes.txt").to_str().unwrap());
        other.save(std::path::Path::new(opath.to_str().unwrap())).unwrap();
        assert_eq!(cplab_tokenizer_load(opath.as_ptr(), &mut ob), CplabStatus::Ok);
        assert_eq!(cplab_model_text_logprob(m, ob, c("a dog").as_ptr(), &mut again), CplabStatus::Usage);

        cplab_tokenizer_free(ob);
        cplab_model_free(back);
        cplab_model_free(m);
        cplab_tokenizer_free(tok);
    }
}

#[test]
fn ewc_penalty_matches_direct_sum() {
    let tok = tokenizer();
    let anchor = model(tok, 1);
    let moved = model(tok, 2);
    unsafe {
        let mut f = ptr::null_mut();
        assert_eq!(
            cplab_fisher_estimate(anchor, tok, corpus().as_ptr(), 4, 3, &mut f),
            CplabStatus::Ok,
            "{}",
            last_error()
        );
        let dim = cplab_model_param_count(anchor);
        let mut fisher = vec![0.0; dim];
        assert_eq!(cplab_fisher_values(f, fisher.as_mut_ptr(), dim - 1), CplabStatus::BufferTooSmall);
        assert_eq!(cplab_fisher_values(f, fisher.as_mut_ptr(), dim), CplabStatus::Ok);
        assert!(fisher.iter().all(|&x| x >= 0.0) && fisher.iter().any(|&x| x > 0.0));

        let mut p = f64::NAN;
        assert_eq!(cplab_ewc_penalty(anchor, f, 5.0, 0.0, &mut p), CplabStatus::Ok);
        assert_eq!(p, 0.0);

        let dir = tempfile::tempdir().unwrap();
        let save_dir = c(dir.path().join("a").to_str().unwrap());
        assert_eq!(cplab_model_save(anchor, save_dir.as_ptr()), CplabStatus::Ok);
        let a: LanguageModel<f32> = LanguageModel::load(&dir.path().join("a")).unwrap();
        let b_dir = c(dir.path().join("b").to_str().unwrap());
        assert_eq!(cplab_model_save(moved, b_dir.as_ptr()), CplabStatus::Ok);
        let b: LanguageModel<f32> = LanguageModel::load(&dir.path().join("b")).unwrap();
        let (ta, tb) = (a.params.flatten(), b.params.flatten());
        let (lambda, mu) = (3.0, 0.25);
        let mut want = 0.0;
        for i in 0..dim {
            let d = tb[i] as f64 - ta[i] as f64;
            want += lambda * fisher[i] * d * d + mu * (tb[i] as f64).powi(2);
        }
        assert_eq!(cplab_ewc_penalty(moved, f, lambda, mu, &mut p), CplabStatus::Ok);
        assert!((p - want).abs() <= 1e-9 * want.abs().max(1.0), "{p} vs {want}");

        let stem = c(dir.path().join("fisher").to_str().unwrap());
        let mut g = ptr::null_mut();
        assert_eq!(cplab_fisher_save(f, stem.as_ptr()), CplabStatus::Ok, "{}", last_error());
        assert_eq!(cplab_fisher_load(stem.as_ptr(), anchor, &mut g), CplabStatus::Ok, "{}", last_error());
        let mut q = 0.0;
        assert_eq!(cplab_ewc_penalty(moved, g, lambda, mu, &mut q), CplabStatus::Ok);
        assert_eq!(p, q);

        let small_tok = Tokenizer::bytes_only();
        let stp = dir.path().join("bytes.txt");
        small_tok.save(&stp).unwrap();
        let mut bt = ptr::null_mut();
        assert_eq!(cplab_tokenizer_load(c(stp.to_str().unwrap()).as_ptr(), &mut bt), CplabStatus::Ok);
        let small = model(bt, 0);
        assert_eq!(cplab_ewc_penalty(small, f, 1.0, 0.0, &mut q), CplabStatus::Usage);
        assert!(last_error().contains("dimension"));

        cplab_model_free(small);
        cplab_tokenizer_free(bt);
        cplab_fisher_free(g);
        cplab_fisher_free(f);
        cplab_model_free(moved);
        cplab_model_free(anchor);
        cplab_tokenizer_free(tok);
    }
}
