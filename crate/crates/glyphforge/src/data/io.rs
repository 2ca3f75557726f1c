//! Sample and corpus persistence: PNGs plus versioned JSON metadata,
//! byte-reproducible from `(n, seed, config)`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::glyph::{render_glyph, BBox, CharBox, MaskImage};
use crate::rngutil::derive_seed;

use super::{generate_sample, EditSample, StyleSpec};

pub const META_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
struct MetaCharBox {
    ch: char,
    bbox: [i32; 4],
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleMeta {
    schema_version: u32,
    sample_id: String,
    seed: u64,
    text: String,
    char_boxes: Vec<MetaCharBox>,
    edit_box: [i32; 4],
    mask_box: [i32; 4],
    style: StyleSpec,
    glyph_font: String,
    config_hash: String,
}

/// Corpus index written next to the sample directories.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub config_hash: String,
    pub n_requested: usize,
    pub seed: u64,
    pub sample_ids: Vec<String>,
    pub failed: Vec<String>,
}

fn box_arr(b: &BBox) -> [i32; 4] {
    [b.x0, b.y0, b.x1, b.y1]
}

fn arr_box(a: [i32; 4]) -> Result<BBox> {
    BBox::new(a[0], a[1], a[2], a[3])
}

/// Writes one sample directory: `image.png`, `background.png`,
/// `text.png`, `alpha.png`, `glyph.png` and `meta.json`.
pub fn save_sample(dir: &Path, sample: &EditSample, config_hash: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    sample.image.save(dir.join("image.png"))?;
    sample.background.save(dir.join("background.png"))?;
    sample.text_rgb.save(dir.join("text.png"))?;
    sample.alpha.save(dir.join("alpha.png"))?;
    sample.glyph.pixels.to_gray_image().save(dir.join("glyph.png"))?;
    let meta = SampleMeta {
        schema_version: META_SCHEMA_VERSION,
        sample_id: sample.sample_id.clone(),
        seed: sample.seed,
        text: sample.text.clone(),
        char_boxes: sample
            .char_boxes
            .iter()
            .map(|cb| MetaCharBox {
                ch: cb.ch,
                bbox: box_arr(&cb.bbox),
            })
            .collect(),
        edit_box: box_arr(&sample.edit_box),
        mask_box: box_arr(&sample.mask.region),
        style: sample.style.clone(),
        glyph_font: sample.glyph_font.clone(),
        config_hash: config_hash.to_string(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}

/// Reads a sample directory back. The conditioning glyph is re-rendered
/// from the stored text and box, which reproduces the generated raster
/// exactly.
pub fn load_sample(dir: &Path) -> Result<EditSample> {
    let meta_path = dir.join("meta.json");
    let meta: SampleMeta = serde_json::from_str(&fs::read_to_string(&meta_path)?)?;
    if meta.schema_version != META_SCHEMA_VERSION {
        return Err(Error::invalid(format!(
            "unsupported meta.json schema_version {} in {} (expected {})",
            meta.schema_version,
            meta_path.display(),
            META_SCHEMA_VERSION
        )));
    }
    let image = image::open(dir.join("image.png"))?.into_rgb8();
    let background = image::open(dir.join("background.png"))?.into_rgb8();
    let text_rgb = image::open(dir.join("text.png"))?.into_rgb8();
    let alpha = image::open(dir.join("alpha.png"))?.into_luma8();
    let (w, h) = (image.width(), image.height());
    for (name, (iw, ih)) in [
        ("background.png", background.dimensions()),
        ("text.png", text_rgb.dimensions()),
        ("alpha.png", alpha.dimensions()),
    ] {
        if (iw, ih) != (w, h) {
            return Err(Error::invalid(format!(
                "{name} is {iw}x{ih} but image.png is {w}x{h} in {}",
                dir.display()
            )));
        }
    }
    let edit_box = arr_box(meta.edit_box)?;
    let mask = MaskImage::new(h as usize, w as usize, arr_box(meta.mask_box)?)?;
    let glyph = render_glyph(&meta.text, &edit_box, (h as usize, w as usize), &meta.glyph_font)?;
    let char_boxes = meta
        .char_boxes
        .iter()
        .map(|m| {
            Ok(CharBox {
                ch: m.ch,
                bbox: arr_box(m.bbox)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EditSample {
        sample_id: meta.sample_id,
        seed: meta.seed,
        image,
        background,
        text_rgb,
        alpha,
        text: meta.text,
        char_boxes,
        edit_box,
        mask,
        glyph,
        style: meta.style,
        glyph_font: meta.glyph_font,
    })
}

/// Generates `n` samples under `out_dir` (one zero-padded directory per
/// sample) plus a manifest. Sample `i` is derived from `seed` alone, so
/// regeneration with the same arguments is byte-identical. Samples that
/// fail to render are recorded in `failed` and skipped.
pub fn generate_corpus(
    n: usize,
    seed: u64,
    out_dir: &Path,
    cfg: &RunConfig,
    style_override: Option<&StyleSpec>,
) -> Result<Manifest> {
    generate_corpus_with_workers(n, seed, out_dir, cfg, style_override, 1)
}

fn generate_one(
    i: usize,
    seed: u64,
    out_dir: &Path,
    cfg: &RunConfig,
    style_override: Option<&StyleSpec>,
    config_hash: &str,
) -> Result<bool> {
    let id = format!("{i:06}");
    let sample_seed = derive_seed(seed, "sample", i as u64);
    match generate_sample(sample_seed, cfg, style_override) {
        Ok(mut sample) => {
            sample.sample_id = id.clone();
            save_sample(&out_dir.join(&id), &sample, config_hash)?;
            Ok(true)
        }
        Err(_) => Ok(false),
    }
}

/// Same contract as [`generate_corpus`]; sample `i` depends on `seed`
/// alone, so the corpus is byte-identical for any worker count.
pub fn generate_corpus_with_workers(
    n: usize,
    seed: u64,
    out_dir: &Path,
    cfg: &RunConfig,
    style_override: Option<&StyleSpec>,
    workers: usize,
) -> Result<Manifest> {
    fs::create_dir_all(out_dir)?;
    let config_hash = cfg.content_hash();
    let workers = workers.max(1).min(n.max(1));
    let ok: Vec<bool> = if workers == 1 {
        (0..n)
            .map(|i| generate_one(i, seed, out_dir, cfg, style_override, &config_hash))
            .collect::<Result<_>>()?
    } else {
        let mut slots = vec![false; n];
        std::thread::scope(|s| -> Result<()> {
            let mut handles = Vec::with_capacity(workers);
            for w in 0..workers {
                let config_hash = &config_hash;
                handles.push(s.spawn(move || -> Result<Vec<(usize, bool)>> {
                    let mut out = Vec::new();
                    let mut i = w;
                    while i < n {
                        out.push((i, generate_one(i, seed, out_dir, cfg, style_override, config_hash)?));
                        i += workers;
                    }
                    Ok(out)
                }));
            }
            for h in handles {
                for (i, saved) in h.join().expect("corpus worker panicked")? {
                    slots[i] = saved;
                }
            }
            Ok(())
        })?;
        slots
    };
    let mut sample_ids = Vec::with_capacity(n);
    let mut failed = Vec::new();
    for (i, saved) in ok.iter().enumerate() {
        let id = format!("{i:06}");
        if *saved {
            sample_ids.push(id);
        } else {
            failed.push(id);
        }
    }
    let manifest = Manifest {
        schema_version: META_SCHEMA_VERSION,
        config_hash,
        n_requested: n,
        seed,
        sample_ids,
        failed,
    };
    fs::write(
        out_dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&path)?)?;
    if manifest.schema_version != META_SCHEMA_VERSION {
        return Err(Error::invalid(format!(
            "unsupported manifest schema_version {} in {}",
            manifest.schema_version,
            path.display()
        )));
    }
    Ok(manifest)
}

/// Successfully generated sample ids, in corpus order.
pub fn list_sample_ids(dir: &Path) -> Result<Vec<String>> {
    Ok(load_manifest(dir)?.sample_ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    #[test]
    fn sample_round_trips_through_disk() {
        let cfg = RunConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let sample = generate_sample(17, &cfg, None).unwrap();
        save_sample(dir.path(), &sample, &cfg.content_hash()).unwrap();
        let loaded = load_sample(dir.path()).unwrap();
        assert_eq!(loaded.image.as_raw(), sample.image.as_raw());
        assert_eq!(loaded.background.as_raw(), sample.background.as_raw());
        assert_eq!(loaded.text_rgb.as_raw(), sample.text_rgb.as_raw());
        assert_eq!(loaded.alpha.as_raw(), sample.alpha.as_raw());
        assert_eq!(loaded.text, sample.text);
        assert_eq!(loaded.char_boxes, sample.char_boxes);
        assert_eq!(loaded.edit_box, sample.edit_box);
        assert_eq!(loaded.mask.region, sample.mask.region);
        assert_eq!(loaded.style, sample.style);
        assert_eq!(loaded.glyph.pixels, sample.glyph.pixels);
        assert_eq!(loaded.glyph.target_box, sample.glyph.target_box);
    }

    #[test]
    fn corpus_regeneration_is_byte_identical() {
        let cfg = RunConfig::default();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = generate_corpus(3, 7, d1.path(), &cfg, None).unwrap();
        let m2 = generate_corpus(3, 7, d2.path(), &cfg, None).unwrap();
        assert_eq!(m1.sample_ids, m2.sample_ids);
        assert_eq!(m1.sample_ids.len(), 3);
        let b1 = std::fs::read(d1.path().join(MANIFEST_FILE)).unwrap();
        let b2 = std::fs::read(d2.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(b1, b2, "manifest bytes must match");
        for id in &m1.sample_ids {
            for file in ["image.png", "alpha.png", "meta.json"] {
                let p1 = std::fs::read(d1.path().join(id).join(file)).unwrap();
                let p2 = std::fs::read(d2.path().join(id).join(file)).unwrap();
                assert_eq!(p1, p2, "{id}/{file} differs between runs");
            }
        }
    }

    #[test]
    fn empty_corpus_writes_empty_manifest() {
        let cfg = RunConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let m = generate_corpus(0, 1, dir.path(), &cfg, None).unwrap();
        assert!(m.sample_ids.is_empty());
        assert!(m.failed.is_empty());
        let loaded = load_manifest(dir.path()).unwrap();
        assert_eq!(loaded.sample_ids, m.sample_ids);
    }

    #[test]
    fn loader_rejects_unknown_schema_version() {
        let cfg = RunConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let sample = generate_sample(3, &cfg, None).unwrap();
        save_sample(dir.path(), &sample, "h").unwrap();
        let meta_path = dir.path().join("meta.json");
        let bumped = std::fs::read_to_string(&meta_path)
            .unwrap()
            .replace("\"schema_version\": 1", "\"schema_version\": 99");
        std::fs::write(&meta_path, bumped).unwrap();
        let err = load_sample(dir.path()).unwrap_err();
        assert!(err.to_string().contains("schema_version 99"), "{err}");
    }

    #[test]
    fn load_missing_dir_errors() {
        assert!(load_sample(Path::new("/nonexistent/sample")).is_err());
        assert!(load_manifest(Path::new("/nonexistent/corpus")).is_err());
    }

    #[test]
    fn corpus_ids_are_zero_padded_and_ordered() {
        let cfg = RunConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let m = generate_corpus(2, 5, dir.path(), &cfg, None).unwrap();
        assert_eq!(m.sample_ids, vec!["000000", "000001"]);
        assert_eq!(list_sample_ids(dir.path()).unwrap(), m.sample_ids);
    }
}
