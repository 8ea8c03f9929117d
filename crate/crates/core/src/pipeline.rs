//! File-level workflows behind the command-line tool: dataset generation,
//! training with periodic checkpoints, inference dumps and evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::config::RunConfig;
use crate::diffcore::{Checkpoint, ParamStore};
use crate::error::{Error, Result};
use crate::eval::{evaluate_apr, AprReport, Prediction, DEFAULT_THRESHOLDS};
use crate::geometry::BBox;
use crate::model::{check_params, init_params};
use crate::recursion::{predict_final, ImageInference};
use crate::synthdata::{
    format_box, generate_proposals, generate_scene, parse_box, read_dataset, read_pgm, write_dataset, write_pgm,
    write_ppm, Image, Mask, Scene,
};
use crate::training::{StepLog, Trainer};

pub const PREDICTIONS_NAME: &str = "predictions.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSummary {
    pub images: usize,
    /// Instances of class `k` at index `k - 1`.
    pub per_class: Vec<usize>,
}

pub fn summarize(scenes: &[Scene], num_classes: usize) -> DatasetSummary {
    let mut per_class = vec![0; num_classes];
    for inst in scenes.iter().flat_map(|s| &s.instances) {
        if (1..=num_classes).contains(&inst.class) {
            per_class[inst.class - 1] += 1;
        }
    }
    DatasetSummary {
        images: scenes.len(),
        per_class,
    }
}

/// Writes scenes `start .. start + count` of the configured generator.
pub fn generate_dataset(cfg: &RunConfig, dir: &Path, count: usize, start: u64) -> Result<DatasetSummary> {
    let sc = cfg.scene_config();
    sc.validate()?;
    let scenes: Vec<Scene> = (0..count as u64).map(|i| generate_scene(&sc, start + i)).collect();
    write_dataset(dir, &scenes)?;
    Ok(summarize(&scenes, cfg.num_classes))
}

/// Checkpoint metadata: steps done, seed halves, iteration count and every
/// ablation switch as 0/1.
pub fn checkpoint_meta(cfg: &RunConfig, step: usize) -> BTreeMap<String, Vec<f64>> {
    let mut m = BTreeMap::new();
    m.insert("step".to_string(), vec![step as f64]);
    m.insert(
        "seed".to_string(),
        vec![(cfg.seed >> 32) as f64, (cfg.seed & 0xFFFF_FFFF) as f64],
    );
    m.insert("iterations".to_string(), vec![cfg.iterations as f64]);
    for (name, on) in cfg.ablations() {
        m.insert(name.to_string(), vec![on as u8 as f64]);
    }
    m
}

/// Trains from `init` (fresh parameters when `None`), reporting every step
/// and handing out a checkpoint every `checkpoint_every` steps and at the end.
pub fn train(
    cfg: &RunConfig,
    scenes: &[Scene],
    init: Option<ParamStore>,
    mut on_step: impl FnMut(&StepLog),
    mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<Checkpoint> {
    cfg.validate()?;
    let mc = cfg.model_config();
    let params = match init {
        Some(p) => {
            check_params(&p, &mc)?;
            p
        }
        None => init_params(&mc, &cfg.init_config(), cfg.seed)?,
    };
    let mut trainer = Trainer::new(
        scenes,
        cfg.scene_config(),
        mc,
        cfg.recursion_config(),
        cfg.train_config(),
        params,
    )?;
    let every = cfg.checkpoint_every;
    while !trainer.finished() {
        let log = trainer.step()?;
        on_step(&log);
        if every > 0 && log.step % every == 0 && !trainer.finished() {
            on_checkpoint(&Checkpoint {
                params: trainer.params.clone(),
                meta: checkpoint_meta(cfg, log.step),
            })?;
        }
    }
    let ck = Checkpoint {
        params: trainer.params,
        meta: checkpoint_meta(cfg, trainer.step),
    };
    on_checkpoint(&ck)?;
    Ok(ck)
}

/// Loads a checkpoint and checks it against the configured shapes.
pub fn load_model(cfg: &RunConfig, path: &Path) -> Result<ParamStore> {
    let ck = Checkpoint::load(path)?;
    check_params(&ck.params, &cfg.model_config()).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(ck.params)
}

/// Proposals for image `index` of a dataset, then the full test procedure.
pub fn infer_scene(cfg: &RunConfig, params: &ParamStore, scene: &Scene, index: usize) -> Result<ImageInference> {
    let sc = crate::synthdata::SceneConfig {
        img_w: scene.image.width,
        img_h: scene.image.height,
        ..cfg.scene_config()
    };
    let proposals = generate_proposals(&scene.instances, &sc, index as u64);
    predict_final(&scene.image, &proposals, params, &cfg.model_config(), &cfg.recursion_config())
}

pub fn to_eval_predictions(inf: &ImageInference) -> Vec<Prediction> {
    inf.predictions
        .iter()
        .map(|p| Prediction {
            class: p.class,
            confidence: p.confidence,
            mask: p.mask.clone(),
        })
        .collect()
}

/// mAP^r report of `params` on in-memory scenes.
pub fn evaluate_scenes(cfg: &RunConfig, params: &ParamStore, scenes: &[Scene]) -> Result<AprReport> {
    let preds = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| infer_scene(cfg, params, s, i).map(|inf| to_eval_predictions(&inf)))
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<_> = scenes.iter().map(|s| s.instances.clone()).collect();
    evaluate_apr(&preds, &gts, cfg.num_classes, &DEFAULT_THRESHOLDS)
}

/// One line of the predictions manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRecord {
    pub image: String,
    pub class: usize,
    pub confidence: f64,
    pub bbox: BBox,
    pub mask: String,
}

pub fn format_predictions(records: &[PredictionRecord]) -> String {
    let mut s = String::new();
    for r in records {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}",
            r.image,
            r.class,
            r.confidence,
            format_box(&r.bbox),
            r.mask
        );
    }
    s
}

pub fn parse_predictions(text: &str, path: &Path) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let bad = || Error::format(path, format!("line {}: malformed prediction", ln + 1));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(bad());
        }
        out.push(PredictionRecord {
            image: f[0].to_string(),
            class: f[1].parse().map_err(|_| bad())?,
            confidence: f[2].parse().map_err(|_| bad())?,
            bbox: parse_box(f[3]).ok_or_else(bad)?,
            mask: f[4].to_string(),
        });
    }
    Ok(out)
}

const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

/// The image with every predicted instance tinted in its own color.
pub fn composite(image: &Image, masks: &[&Mask]) -> Image {
    let mut out = image.clone();
    for (k, m) in masks.iter().enumerate() {
        let c = PALETTE[k % PALETTE.len()];
        for y in 0..image.height {
            for x in 0..image.width {
                if m.get(x, y) {
                    let p = image.pixel(x, y);
                    let mix = |a: u8, b: u8| ((a as u16 + b as u16) / 2) as u8;
                    out.set_pixel(x, y, [mix(p[0], c[0]), mix(p[1], c[1]), mix(p[2], c[2])]);
                }
            }
        }
    }
    out
}

fn stem(image: &str) -> &str {
    image.rsplit_once('.').map_or(image, |(s, _)| s)
}

/// Writes per-instance masks, one composite per image and the manifest.
pub fn write_predictions(dir: &Path, names: &[String], scenes: &[Scene], results: &[ImageInference]) -> Result<Vec<PredictionRecord>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::new();
    for ((name, scene), inf) in names.iter().zip(scenes).zip(results) {
        let st = stem(name);
        for (k, p) in inf.predictions.iter().enumerate() {
            let mask = format!("{st}_p{k}.pgm");
            write_pgm(&dir.join(&mask), &p.mask)?;
            records.push(PredictionRecord {
                image: name.clone(),
                class: p.class,
                confidence: p.confidence,
                bbox: p.bbox,
                mask,
            });
        }
        let masks: Vec<&Mask> = inf.predictions.iter().map(|p| &p.mask).collect();
        write_ppm(&dir.join(format!("{st}_composite.ppm")), &composite(&scene.image, &masks))?;
    }
    let path = dir.join(PREDICTIONS_NAME);
    std::fs::write(&path, format_predictions(&records)).map_err(|e| Error::io(&path, e))?;
    Ok(records)
}

/// Evaluates a predictions directory against a dataset directory. Images
/// named in the predictions but absent from the dataset are an error.
pub fn evaluate_dirs(cfg: &RunConfig, predictions: &Path, dataset: &Path) -> Result<AprReport> {
    let (records, scenes) = read_dataset(dataset)?;
    let ppath = predictions.join(PREDICTIONS_NAME);
    let text = std::fs::read_to_string(&ppath).map_err(|e| Error::io(&ppath, e))?;
    let preds = parse_predictions(&text, &ppath)?;
    let index: BTreeMap<&str, usize> = records.iter().enumerate().map(|(i, r)| (r.image.as_str(), i)).collect();
    let missing: Vec<&str> = preds
        .iter()
        .map(|p| p.image.as_str())
        .filter(|n| !index.contains_key(n))
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    if !missing.is_empty() {
        return Err(Error::invalid(format!(
            "predictions reference images missing from the dataset: {}",
            missing.join(", ")
        )));
    }
    let mut per_image: Vec<Vec<Prediction>> = vec![Vec::new(); records.len()];
    for p in preds {
        let mask = read_pgm(&predictions.join(&p.mask))?;
        per_image[index[p.image.as_str()]].push(Prediction {
            class: p.class,
            confidence: p.confidence,
            mask,
        });
    }
    let gts: Vec<_> = scenes.into_iter().map(|s| s.instances).collect();
    evaluate_apr(&per_image, &gts, cfg.num_classes, &DEFAULT_THRESHOLDS)
}
