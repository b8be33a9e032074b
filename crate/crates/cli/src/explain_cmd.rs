use crate::error::{CliError, CliResult};
use crate::invocation::{ClassChoice, ExplainRequest};
use crate::manifest::Outputs;
use crate::model::ModelSource;
use crate::run::Seeds;
use serde::Serialize;
use std::path::Path;
use xplain_core::explain::{
    comparison_sheet, grad_cam, kernel_shap, lime_explain, render, segment_superpixels,
    AttributionResult, RenderStyle, SuperpixelMap,
};
use xplain_core::gateway::{top_class_of, ModelHandle};
use xplain_core::imaging::{
    load_image, normalize, prepare_unit, ImageTensor, NormalizationConstants,
};

/// Share of pixels counted as "most important" when comparing maps.
const TOP_FRACTION: f64 = 0.2;

struct Prepared {
    handle: ModelHandle,
    unit: ImageTensor,
    normalized: ImageTensor,
    probabilities: Vec<f64>,
    target: usize,
}

fn prepare(
    image: &Path,
    model: &ModelSource,
    request: &ExplainRequest,
    needs_gradients: bool,
) -> CliResult<Prepared> {
    // Checked before the model is opened so no request reaches a server.
    if needs_gradients && model.is_remote() {
        return Err(CliError::no_gradients());
    }
    let raw = load_image(image).map_err(|e| CliError::data(format!("{}: {e}", image.display())))?;
    let unit = prepare_unit(&raw)?;
    let normalized = normalize(&unit, &NormalizationConstants::IMAGENET)?;
    let handle = model.open()?;
    let probabilities = handle
        .predict_batch(std::slice::from_ref(&normalized))?
        .remove(0);
    let target = match request.class {
        ClassChoice::Top => top_class_of(&probabilities).0,
        ClassChoice::Index(i) if i < handle.num_classes() => i,
        ClassChoice::Index(i) => {
            return Err(CliError::config(format!(
                "--class {i} is out of range for {} classes",
                handle.num_classes()
            )))
        }
    };
    Ok(Prepared {
        handle,
        unit,
        normalized,
        probabilities,
        target,
    })
}

#[derive(Serialize)]
struct Sidecar<'a> {
    image: &'a Path,
    model: String,
    class_names: &'a [String],
    probabilities: &'a [f64],
    target_class: usize,
    target_name: &'a str,
    request: &'a ExplainRequest,
    superpixels: Option<usize>,
    results: Vec<&'a AttributionResult>,
}

struct Panels {
    segments: Option<SuperpixelMap>,
    lime: Option<AttributionResult>,
    shap: Option<AttributionResult>,
    cam: Option<AttributionResult>,
}

fn run_methods(p: &Prepared, request: &ExplainRequest, out: &mut Outputs) -> CliResult<Panels> {
    let norm = NormalizationConstants::IMAGENET;
    let m = request.method;
    let segments = if m.lime() || m.shap() {
        Some(segment_superpixels(&p.unit, &request.slic)?)
    } else {
        None
    };
    let mut panels = Panels {
        segments,
        lime: None,
        shap: None,
        cam: None,
    };
    let seg = panels.segments.as_ref();
    if m.lime() {
        let sp = seg.expect("segmented above");
        let res = lime_explain(&p.handle, &p.unit, sp, Some(p.target), &request.lime, &norm)?;
        render(&res, &p.unit, Some(sp), RenderStyle::LimeSuperpixelOnly)?
            .save_png(&out.file("lime_superpixels.png"))?;
        render(&res, &p.unit, Some(sp), RenderStyle::LimePosNeg)?
            .save_png(&out.file("lime_posneg.png"))?;
        panels.lime = Some(res);
    }
    if m.shap() {
        let sp = seg.expect("segmented above");
        let res = kernel_shap(&p.handle, &p.unit, sp, Some(p.target), &request.shap, &norm)?;
        render(&res, &p.unit, Some(sp), RenderStyle::ShapRedBlue)?
            .save_png(&out.file("shap.png"))?;
        panels.shap = Some(res);
    }
    if m.gradcam() {
        let res = grad_cam(&p.handle, &p.normalized, Some(p.target), &request.gradcam)?;
        render(&res, &p.unit, None, RenderStyle::CamOverlay)?.save_png(&out.file("gradcam.png"))?;
        panels.cam = Some(res);
    }
    Ok(panels)
}

/// LIME row, SHAP row and Grad-CAM row, each led by the input image.
fn write_sheet(p: &Prepared, panels: &Panels, out: &mut Outputs) -> CliResult<()> {
    let seg = panels.segments.as_ref();
    let (lime, shap, cam) = match (&panels.lime, &panels.shap, &panels.cam) {
        (Some(l), Some(s), Some(c)) => (l, s, c),
        _ => return Ok(()),
    };
    let lime_sp = render(lime, &p.unit, seg, RenderStyle::LimeSuperpixelOnly)?;
    let lime_pn = render(lime, &p.unit, seg, RenderStyle::LimePosNeg)?;
    let shap_img = render(shap, &p.unit, seg, RenderStyle::ShapRedBlue)?;
    let cam_img = render(cam, &p.unit, None, RenderStyle::CamOverlay)?;
    let sheet = comparison_sheet(&[
        vec![&p.unit, &lime_sp, &lime_pn],
        vec![&p.unit, &shap_img],
        vec![&p.unit, &cam_img],
    ])?;
    sheet.save_png(&out.file("sheet.png"))?;
    Ok(())
}

fn seeds(request: &ExplainRequest) -> Seeds {
    Seeds::from([
        ("lime".to_string(), request.lime.seed),
        ("shap".to_string(), request.shap.seed),
        ("superpixels".to_string(), request.slic.seed),
    ])
}

fn sidecar<'a>(
    image: &'a Path,
    model: &ModelSource,
    p: &'a Prepared,
    request: &'a ExplainRequest,
    panels: &'a Panels,
) -> Sidecar<'a> {
    Sidecar {
        image,
        model: model.to_string(),
        class_names: p.handle.class_names(),
        probabilities: &p.probabilities,
        target_class: p.target,
        target_name: &p.handle.class_names()[p.target],
        request,
        superpixels: panels.segments.as_ref().map(|s| s.num_segments()),
        results: [&panels.lime, &panels.shap, &panels.cam]
            .into_iter()
            .flatten()
            .collect(),
    }
}

pub fn explain(
    image: &Path,
    model: &ModelSource,
    request: &ExplainRequest,
    out: &mut Outputs,
) -> CliResult<Seeds> {
    let p = prepare(image, model, request, request.method.gradcam())?;
    let panels = run_methods(&p, request, out)?;
    write_sheet(&p, &panels, out)?;
    out.write_json(
        "explanation.json",
        &sidecar(image, model, &p, request, &panels),
    )?;
    println!(
        "explained class {} ({}) with p = {:.4}",
        p.target,
        p.handle.class_names()[p.target],
        p.probabilities[p.target]
    );
    Ok(seeds(request))
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// Pixels in the top `TOP_FRACTION` by score, ties broken by index.
fn top_set(v: &[f64]) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[j].total_cmp(&v[i]).then(i.cmp(&j)));
    let k = (v.len() as f64 * TOP_FRACTION).round() as usize;
    let mut set = vec![false; v.len()];
    for &i in &idx[..k] {
        set[i] = true;
    }
    set
}

fn iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Serialize)]
struct PairAgreement {
    a: String,
    b: String,
    pearson: f64,
    top_iou: f64,
}

#[derive(Serialize)]
struct ClassShap {
    rank: usize,
    class: usize,
    name: String,
    probability: f64,
    base_value: f64,
    phi_sum: f64,
    file: String,
}

#[derive(Serialize)]
struct Comparison {
    target_class: usize,
    top_fraction: f64,
    agreement: Vec<PairAgreement>,
    shap_by_class: Vec<ClassShap>,
}

pub fn compare(
    image: &Path,
    model: &ModelSource,
    request: &ExplainRequest,
    shap_classes: Option<usize>,
    out: &mut Outputs,
) -> CliResult<Seeds> {
    let p = prepare(image, model, request, true)?;
    let panels = run_methods(&p, request, out)?;
    write_sheet(&p, &panels, out)?;
    out.write_json(
        "explanation.json",
        &sidecar(image, model, &p, request, &panels),
    )?;

    let seg = panels.segments.as_ref();
    let maps: Vec<(&str, Vec<f64>)> = [
        ("lime", &panels.lime),
        ("shap", &panels.shap),
        ("gradcam", &panels.cam),
    ]
    .into_iter()
    .filter_map(|(n, r)| r.as_ref().map(|r| r.pixel_scores(seg).map(|v| (n, v))))
    .collect::<Result<_, _>>()?;
    let mut agreement = Vec::new();
    for i in 0..maps.len() {
        for j in i + 1..maps.len() {
            agreement.push(PairAgreement {
                a: maps[i].0.to_string(),
                b: maps[j].0.to_string(),
                pearson: pearson(&maps[i].1, &maps[j].1),
                top_iou: iou(&top_set(&maps[i].1), &top_set(&maps[j].1)),
            });
        }
    }

    let mut order: Vec<usize> = (0..p.probabilities.len()).collect();
    order.sort_by(|&a, &b| {
        p.probabilities[b]
            .total_cmp(&p.probabilities[a])
            .then(a.cmp(&b))
    });
    order.truncate(shap_classes.unwrap_or(order.len()));
    let sp = seg.expect("compare segments the image");
    let mut shap_by_class = Vec::new();
    for (rank, &class) in order.iter().enumerate() {
        let res = match &panels.shap {
            Some(r) if r.target_class == class => r.clone(),
            _ => kernel_shap(
                &p.handle,
                &p.unit,
                sp,
                Some(class),
                &request.shap,
                &NormalizationConstants::IMAGENET,
            )?,
        };
        let name = p.handle.class_names()[class].clone();
        let file = format!("shap_rank{rank}_class{class}.png");
        render(&res, &p.unit, Some(sp), RenderStyle::ShapRedBlue)?.save_png(&out.file(&file))?;
        shap_by_class.push(ClassShap {
            rank,
            class,
            name,
            probability: p.probabilities[class],
            base_value: res.base_value,
            phi_sum: res.scores.iter().sum(),
            file,
        });
    }
    out.write_json(
        "comparison.json",
        &Comparison {
            target_class: p.target,
            top_fraction: TOP_FRACTION,
            agreement,
            shap_by_class,
        },
    )?;
    Ok(seeds(request))
}
