#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use secreq_core::corpus::{ingest_asvs, VrCorpus};
use secreq_core::pipeline::RunConfig;
use secreq_core::text::TokenEmbeddings;

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

/// The 20-VR / 30-FR miniature run config, writing into `out`.
pub fn mini_config(out: &Path) -> RunConfig {
    let mut c = RunConfig::load(&fixture_dir().join("mini/config.json")).expect("mini config");
    c.output_dir = out.to_path_buf();
    c
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `rows` random unit vectors of dimension `dim`.
pub fn random_unit_rows(rng: &mut impl Rng, rows: usize, dim: usize) -> TokenEmbeddings {
    let mut data = Vec::with_capacity(rows * dim);
    for _ in 0..rows {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        data.extend(v.iter().map(|x| x / n));
    }
    TokenEmbeddings::from_rows(data, dim, "test")
}

/// Weighted MaxSim by explicit triple loop with full cosine (norms
/// recomputed), independent of the library's dot-product shortcut.
pub fn naive_score(q: &TokenEmbeddings, d: &TokenEmbeddings, w: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..q.rows() {
        let mut best = f64::NEG_INFINITY;
        for j in 0..d.rows() {
            let (mut num, mut na, mut nb) = (0.0, 0.0, 0.0);
            for k in 0..q.dim() {
                num += q.row(i)[k] * d.row(j)[k];
                na += q.row(i)[k] * q.row(i)[k];
                nb += d.row(j)[k] * d.row(j)[k];
            }
            let v = w[j] * num / (na.sqrt() * nb.sqrt());
            if v > best {
                best = v;
            }
        }
        total += best;
    }
    total
}

/// ASVS export with one chapter and one section holding `descriptions`.
pub fn asvs_doc(chapter: &str, section: &str, descriptions: &[&str]) -> String {
    let items: Vec<serde_json::Value> = descriptions
        .iter()
        .enumerate()
        .map(|(i, d)| {
            serde_json::json!({
                "Shortcode": format!("V1.1.{}", i + 1),
                "Ordinal": i + 1,
                "Description": d,
            })
        })
        .collect();
    serde_json::json!({
        "ShortName": "ASVS",
        "Version": "test",
        "Requirements": [{
            "Shortcode": "V1",
            "Ordinal": 1,
            "Name": chapter,
            "Items": [{"Shortcode": "V1.1", "Ordinal": 1, "Name": section, "Items": items}],
        }],
    })
    .to_string()
}

/// VRs that differ in one qualifying word, and FRs that mostly target the
/// "session" VR. "cookie" only ever appears in a VR that is never the gold
/// answer.
pub fn session_corpus() -> VrCorpus {
    ingest_asvs(&asvs_doc(
        "Tokens",
        "Token Handling",
        &[
            "Verify that session tokens are rotated after every successful login.",
            "Verify that api tokens are rotated after every successful login.",
            "Verify that cookie tokens are rotated after every successful login.",
            "Verify that access tokens are rotated after every successful login.",
        ],
    ))
    .expect("session corpus")
}

pub fn session_pairs() -> Vec<(String, &'static str)> {
    let subjects = [
        "The portal", "The banking app", "The admin console", "The kiosk", "The shop", "The booking site",
        "The gateway", "The mobile client",
    ];
    let mut out = Vec::new();
    for s in subjects {
        out.push((format!("{s} shall rotate session tokens after login."), "1.1.1"));
        out.push((format!("{s} shall keep the session valid after login."), "1.1.1"));
        out.push((format!("{s} shall rotate api keys after login."), "1.1.2"));
        out.push((format!("{s} shall refresh access grants after login."), "1.1.4"));
    }
    out
}
