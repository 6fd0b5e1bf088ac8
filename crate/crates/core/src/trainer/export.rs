use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::dataset::{load_manifest, DatasetManifest, GrayImage, Split};
use crate::error::{Error, Result};
use crate::metrics::{compute_metrics, records_from_outputs, EvalMode, RunMetrics};
use crate::model::{route_all_certain, route_prediction, Checkpoint, Dc3Model, Route};

/// Writes one CSV row per manifest item: `image_id`, the embedding, `p_a`,
/// the routed prediction (`certain:<class>` or `fuzzy:<cluster>`) and the
/// soft ground truth (empty cells for unannotated items).
pub fn write_embeddings<W: Write>(
    model: &Dc3Model,
    manifest: &DatasetManifest,
    images: &[GrayImage],
    mode: EvalMode,
    out: W,
) -> Result<usize> {
    let dim = model.head.embedding_dim;
    let k = manifest.num_classes;
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["image_id".to_string()];
    header.extend((0..dim).map(|i| format!("emb_{i}")));
    header.push("p_a".into());
    header.push("prediction".into());
    header.extend((0..k).map(|c| format!("gt_{c}")));
    w.write_record(&header)?;

    let inputs: Vec<&[f64]> = images.iter().map(|i| i.pixels.as_slice()).collect();
    let outputs = model.predict(&inputs);
    for (item, o) in manifest.items.iter().zip(&outputs) {
        let prediction = match mode {
            EvalMode::Routed => route_prediction(o),
            EvalMode::AllCertain => route_all_certain(o),
        };
        let mut row = vec![item.image_id.clone()];
        row.extend(o.embedding.iter().map(|v| v.to_string()));
        row.push(o.p_a.to_string());
        row.push(match prediction.route {
            Route::Certain { class } => format!("certain:{class}"),
            Route::Fuzzy { cluster } => format!("fuzzy:{cluster}"),
        });
        match &item.gt_soft {
            Some(g) => row.extend(g.probs().iter().map(|v| v.to_string())),
            None => row.extend(std::iter::repeat_n(String::new(), k)),
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(outputs.len())
}

/// Loads a checkpoint and a matching manifest. Checkpoints of vanilla runs
/// are paired with all-certain routing.
fn load_pair(checkpoint: &Path, manifest: &Path) -> Result<(Dc3Model, EvalMode, DatasetManifest)> {
    let ck = Checkpoint::load(checkpoint)?;
    let mode = if ck.dc3 { EvalMode::Routed } else { EvalMode::AllCertain };
    let model = ck.into_model()?;
    let manifest = load_manifest(manifest)?;
    if manifest.num_classes != model.head.k {
        return Err(Error::InvalidCheckpoint(format!(
            "checkpoint has {} classes, manifest {}",
            model.head.k, manifest.num_classes
        )));
    }
    Ok((model, mode, manifest))
}

/// Loads a checkpoint and a manifest and writes the embedding table to
/// `out`.
pub fn export_embeddings(checkpoint: &Path, manifest: &Path, out: &Path) -> Result<usize> {
    let (model, mode, manifest) = load_pair(checkpoint, manifest)?;
    let images = manifest.load_images()?;
    let file = File::create(out).map_err(|e| Error::io(out, e))?;
    write_embeddings(&model, &manifest, &images, mode, file)
}

/// Scores a checkpoint on the annotated items of `split`, or on every
/// annotated item when `split` is `None`.
pub fn evaluate_checkpoint(checkpoint: &Path, manifest: &Path, split: Option<Split>) -> Result<RunMetrics> {
    let (model, mode, manifest) = load_pair(checkpoint, manifest)?;
    let items: Vec<_> = manifest
        .items
        .iter()
        .filter(|it| split.is_none_or(|s| it.split == s) && it.gt_soft.is_some())
        .collect();
    let images = items
        .iter()
        .map(|it| GrayImage::load_png(&manifest.resolve(it)))
        .collect::<Result<Vec<_>>>()?;
    let inputs: Vec<&[f64]> = images.iter().map(|i| i.pixels.as_slice()).collect();
    let outputs = model.predict(&inputs);
    let ids: Vec<String> = items.iter().map(|it| it.image_id.clone()).collect();
    let gt: Vec<_> = items.iter().filter_map(|it| it.gt_soft.clone()).collect();
    compute_metrics(&records_from_outputs(&ids, &outputs, &gt, mode), mode)
}
