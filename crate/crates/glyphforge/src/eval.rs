//! Metrics and evaluation protocol: per-region recognition scoring,
//! sentence accuracy, normalized edit distance and report emission.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{load_manifest, load_sample};
use crate::encoding::Alphabet;
use crate::error::{Error, Result};
use crate::glyph::BBox;
use crate::perception::{crop_box, rgb_to_tensor, Recognizer};

/// Levenshtein distance over characters.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Normalized edit-distance similarity:
/// `1 − levenshtein(a,b) / max(|a|,|b|)`, and 1.0 when both strings
/// are empty. Higher is better.
pub fn ned(a: &str, b: &str) -> f64 {
    let la = a.chars().count();
    let lb = b.chars().count();
    let denom = la.max(lb);
    if denom == 0 {
        return 1.0;
    }
    1.0 - levenshtein(a, b) as f64 / denom as f64
}

/// Sidecar written next to every edited image; evaluation reads the
/// replacement text and region back from it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EditSidecar {
    pub sample_id: String,
    /// Replacement text the edit requested.
    pub text: String,
    /// Edited region as `[x0, y0, x1, y1]`.
    pub region: [i32; 4],
    pub seed: u64,
    pub steps: usize,
    pub config_hash: String,
}

impl EditSidecar {
    pub fn region_box(&self) -> Result<BBox> {
        let [x0, y0, x1, y1] = self.region;
        BBox::new(x0, y0, x1, y1)
    }
}

pub fn write_sidecar(path: &Path, sidecar: &EditSidecar) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(sidecar)?)?;
    Ok(())
}

pub fn read_sidecar(path: &Path) -> Result<EditSidecar> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// One scored sample.
#[derive(Debug, Clone, Serialize)]
pub struct EvalRecord {
    pub sample_id: String,
    pub target_text: String,
    pub recognized_text: String,
    pub exact_match: bool,
    pub ned: f64,
    /// Edited image or sidecar absent; scored as a failure.
    pub missing: bool,
}

/// Aggregates over a run.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub n_samples: usize,
    pub n_missing: usize,
    pub acc: f64,
    pub ned_mean: f64,
    /// Non-paper trend diagnostic: mean feature-space L2 between the
    /// original and edited regions under the frozen trunk.
    pub style_distance_mean: Option<f64>,
    pub corpus_config_hash: String,
}

pub struct EvalOutcome {
    pub report: EvalReport,
    pub records: Vec<EvalRecord>,
}

fn csv_field(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

fn write_records_csv(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut out = String::from("sample_id,target_text,recognized_text,exact_match,ned,missing\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{:.6},{}\n",
            csv_field(&r.sample_id),
            csv_field(&r.target_text),
            csv_field(&r.recognized_text),
            r.exact_match,
            r.ned,
            r.missing
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reduces per-sample records to the report aggregates.
pub fn summarize(
    records: &[EvalRecord],
    style_dists: &[f64],
    corpus_config_hash: String,
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::invalid("no samples"));
    }
    let n = records.len();
    Ok(EvalReport {
        n_samples: n,
        n_missing: records.iter().filter(|r| r.missing).count(),
        acc: records.iter().filter(|r| r.exact_match).count() as f64 / n as f64,
        ned_mean: records.iter().map(|r| r.ned).sum::<f64>() / n as f64,
        style_distance_mean: if style_dists.is_empty() {
            None
        } else {
            Some(style_dists.iter().sum::<f64>() / style_dists.len() as f64)
        },
        corpus_config_hash,
    })
}

fn eval_one(
    id: &str,
    edited_dir: &Path,
    corpus_dir: &Path,
    recognizer: &Recognizer,
    alphabet: &Alphabet,
) -> Result<(EvalRecord, Option<f64>)> {
    let device = candle_core::Device::Cpu;
    let img_path = edited_dir.join(format!("{id}.png"));
    let sidecar_path = edited_dir.join(format!("{id}.json"));
    if !img_path.is_file() || !sidecar_path.is_file() {
        return Ok((
            EvalRecord {
                sample_id: id.to_string(),
                target_text: String::new(),
                recognized_text: String::new(),
                exact_match: false,
                ned: 0.0,
                missing: true,
            },
            None,
        ));
    }
    let sidecar = read_sidecar(&sidecar_path)?;
    let edited = image::open(&img_path)?.to_rgb8();
    let region = sidecar.region_box()?;
    let edited_t = rgb_to_tensor(&edited, &device)?;
    let crop = crop_box(&edited_t, &region)?;
    let recognized = recognizer.recognize(&crop, alphabet)?;
    let target = sidecar.text.trim().to_string();
    let got = recognized.trim().to_string();

    let style_dist = match load_sample(&corpus_dir.join(id)) {
        Err(_) => None,
        Ok(orig) => {
            let orig_t = rgb_to_tensor(&orig.image, &device)?;
            let a = recognizer
                .style_features(&recognizer.resize_to_input(&crop_box(&orig_t, &region)?)?)?;
            let b = recognizer.style_features(&recognizer.resize_to_input(&crop)?)?;
            let d = (a - b)?.sqr()?.sum_all()?.to_scalar::<f32>()? as f64;
            Some(d.sqrt())
        }
    };

    Ok((
        EvalRecord {
            sample_id: id.to_string(),
            target_text: target.clone(),
            recognized_text: got.clone(),
            exact_match: got == target,
            ned: ned(&target, &got),
            missing: false,
        },
        style_dist,
    ))
}

/// Scores every manifest sample against its edited image in
/// `edited_dir` (`<id>.png` + `<id>.json` sidecar). Missing outputs
/// are flagged failures, never skipped. Writes `report.json` and
/// `records.csv` into `out_dir` when given. The report is identical
/// for any worker count: per-sample results are reduced in sample-id
/// order.
pub fn evaluate(
    edited_dir: &Path,
    corpus_dir: &Path,
    recognizer: &Recognizer,
    alphabet: &Alphabet,
    out_dir: Option<&Path>,
    workers: usize,
) -> Result<EvalOutcome> {
    let manifest = load_manifest(corpus_dir)?;
    if manifest.sample_ids.is_empty() {
        return Err(Error::invalid("no samples"));
    }
    let mut ids = manifest.sample_ids.clone();
    ids.sort();
    let workers = workers.max(1).min(ids.len());

    let mut scored: Vec<(EvalRecord, Option<f64>)> = if workers == 1 {
        ids.iter()
            .map(|id| eval_one(id, edited_dir, corpus_dir, recognizer, alphabet))
            .collect::<Result<_>>()?
    } else {
        let mut slots: Vec<Option<(EvalRecord, Option<f64>)>> = Vec::new();
        slots.resize_with(ids.len(), || None);
        std::thread::scope(|s| -> Result<()> {
            let mut handles = Vec::with_capacity(workers);
            for w in 0..workers {
                let ids = &ids;
                handles.push(s.spawn(move || -> Result<Vec<(usize, (EvalRecord, Option<f64>))>> {
                    let mut out = Vec::new();
                    let mut i = w;
                    while i < ids.len() {
                        out.push((i, eval_one(&ids[i], edited_dir, corpus_dir, recognizer, alphabet)?));
                        i += workers;
                    }
                    Ok(out)
                }));
            }
            for h in handles {
                for (i, r) in h.join().expect("eval worker panicked")? {
                    slots[i] = Some(r);
                }
            }
            Ok(())
        })?;
        slots.into_iter().map(|s| s.expect("unfilled slot")).collect()
    };

    let mut records = Vec::with_capacity(scored.len());
    let mut style_dists = Vec::new();
    for (r, d) in scored.drain(..) {
        records.push(r);
        style_dists.extend(d);
    }

    let report = summarize(&records, &style_dists, manifest.config_hash.clone())?;

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join("report.json"),
            serde_json::to_string_pretty(&report)?,
        )?;
        write_records_csv(&dir.join("records.csv"), &records)?;
    }
    Ok(EvalOutcome { report, records })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ned_matches_the_worked_examples() {
        assert_eq!(ned("hello", "hello"), 1.0);
        assert!((ned("abc", "abd") - (1.0 - 1.0 / 3.0)).abs() < 1e-12);
        assert_eq!(ned("", "xyz"), 0.0);
        assert_eq!(ned("", ""), 1.0);
    }

    #[test]
    fn ned_is_symmetric_bounded_and_exact_iff_equal() {
        let words = ["", "A", "AB", "HELLO", "HELP", "WORLD", "W RLD", "AB\nCD"];
        for a in words {
            for b in words {
                let v = ned(a, b);
                assert_eq!(v, ned(b, a), "symmetry broke on {a:?}/{b:?}");
                assert!((0.0..=1.0).contains(&v));
                assert_eq!(v == 1.0, a == b, "ned=1 iff equal broke on {a:?}/{b:?}");
            }
        }
    }

    #[test]
    fn levenshtein_matches_a_naive_recursive_oracle() {
        fn naive(a: &[char], b: &[char]) -> usize {
            if a.is_empty() {
                return b.len();
            }
            if b.is_empty() {
                return a.len();
            }
            let sub = naive(&a[1..], &b[1..]) + usize::from(a[0] != b[0]);
            sub.min(naive(&a[1..], b) + 1).min(naive(a, &b[1..]) + 1)
        }
        let words = ["", "A", "CAT", "CART", "KITTEN", "SITTING"];
        for a in words {
            for b in words {
                let ac: Vec<char> = a.chars().collect();
                let bc: Vec<char> = b.chars().collect();
                assert_eq!(levenshtein(a, b), naive(&ac, &bc), "{a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn sidecar_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let s = EditSidecar {
            sample_id: "s000_test".into(),
            text: "AB\nCD".into(),
            region: [3, 4, 40, 30],
            seed: 9,
            steps: 20,
            config_hash: "abc".into(),
        };
        let p = dir.path().join("s.json");
        write_sidecar(&p, &s).unwrap();
        let back = read_sidecar(&p).unwrap();
        assert_eq!(back.text, s.text);
        assert_eq!(back.region, s.region);
        assert_eq!(back.region_box().unwrap(), BBox::new(3, 4, 40, 30).unwrap());
    }

    #[test]
    fn csv_quotes_embedded_newlines_and_quotes() {
        assert_eq!(csv_field("AB\nCD"), "\"AB\nCD\"");
        assert_eq!(csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
    }

    fn record(id: &str, target: &str, got: &str, missing: bool) -> EvalRecord {
        EvalRecord {
            sample_id: id.into(),
            target_text: target.into(),
            recognized_text: got.into(),
            exact_match: !missing && got == target,
            ned: if missing { 0.0 } else { ned(target, got) },
            missing,
        }
    }

    #[test]
    fn summary_matches_a_hand_computed_four_sample_fixture() {
        let records = vec![
            record("a", "HELLO", "HELLO", false),
            record("b", "WORLD", "WORLD", false),
            record("c", "ABC", "ABD", false),
            record("d", "XY", "", true),
        ];
        let report = summarize(&records, &[], "h".into()).unwrap();
        assert_eq!(report.n_samples, 4);
        assert_eq!(report.n_missing, 1);
        assert_eq!(report.acc, 0.5);
        let want_ned = (1.0 + 1.0 + (1.0 - 1.0 / 3.0) + 0.0) / 4.0;
        assert!((report.ned_mean - want_ned).abs() < 1e-12);
        for r in &records {
            if r.exact_match {
                assert_eq!(r.ned, 1.0, "exact match must imply ned = 1");
            }
        }
    }

    #[test]
    fn empty_record_set_is_the_no_samples_error() {
        let err = summarize(&[], &[], "h".into()).unwrap_err();
        assert!(err.to_string().contains("no samples"));
    }
}
