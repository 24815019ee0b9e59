use std::path::Path;

use selseg_core::image::{encode_image_pgm, encode_pgm, load_image};
use selseg_core::metrics::{score, EvalResult};
use selseg_core::nets::{train as train_net, Checkpoint};
use selseg_core::pipeline::{segment_image, MethodConfig, SegMethod};
use selseg_core::synth::generate;
use selseg_core::MarkerSet;

use crate::fsio::{is_image, list_files, load_mask, stem, write_atomic};
use crate::{EvalArgs, Failure, SegmentArgs, SynthArgs, TrainArgs};

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<MethodConfig, Failure> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::io(p, e))?;
            MethodConfig::parse_kv(&text).map_err(|e| Failure::from(e).context(p))?
        }
        None => MethodConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    let bytes = std::fs::read(path).map_err(|e| Failure::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| Failure::from(e).context(path))
}

fn parse_method(s: &str) -> Result<SegMethod, Failure> {
    Ok(s.parse::<SegMethod>()?)
}

pub fn segment(a: &SegmentArgs) -> Result<(), Failure> {
    let method = parse_method(&a.method)?;
    let weights = match (&a.weights, method.needs_weights()) {
        (Some(p), true) => Some(load_checkpoint(p)?),
        (None, true) => return Err(Failure::usage(format!("--method {method} requires --weights"))),
        (Some(_), false) => return Err(Failure::usage(format!("--method {method} takes no --weights"))),
        (None, false) => None,
    };
    let cfg = load_config(a.config.as_deref(), a.seed)?;
    let f = load_image(&a.image).map_err(|e| Failure::from(e).context(&a.image))?;
    let (h, w) = f.dims();
    let markers = MarkerSet::load(&a.markers, h, w).map_err(|e| Failure::from(e).context(&a.markers))?;
    let gt = a.gt.as_deref().map(load_mask).transpose()?;

    let seg = segment_image(&f, &markers, method, &cfg, weights.as_ref())?;
    let name = stem(&a.image)?;
    let mask_bytes = encode_pgm(h, w, seg.mask.data());
    write_atomic(&a.out.join("masks").join(format!("{name}.pgm")), &mask_bytes)?;
    write_atomic(&a.out.join("u").join(format!("{name}.pgm")), &encode_pgm(h, w, seg.u.data()))?;
    if let Some(csv) = &seg.trace_csv {
        write_atomic(&a.out.join(format!("{name}_trace.csv")), csv.as_bytes())?;
    }
    if let Some(gt) = gt {
        let report = EvalResult::from_scores(vec![score(name.clone(), &seg.mask, &gt)?])?;
        write_atomic(&a.out.join(format!("{name}_metrics.csv")), report.to_csv(method.as_str()).as_bytes())?;
        eprintln!("{name}: dice {:.4} jaccard {:.4}", report.dice, report.jaccard);
    }
    Ok(())
}

/// Image/marker pairs in `dir`, matched by file stem and sorted by name.
fn load_pairs(dir: &Path) -> Result<Vec<(selseg_core::Image, MarkerSet)>, Failure> {
    let files = list_files(dir)?;
    let mut pairs = Vec::new();
    for (name, path) in &files {
        let p = Path::new(name);
        if is_image(p) {
            let s = stem(p)?;
            let markers = files
                .get(&format!("{s}.json"))
                .ok_or_else(|| Failure::usage(format!("{} has no markers file {s}.json", path.display())))?;
            let f = load_image(path).map_err(|e| Failure::from(e).context(path))?;
            let m = MarkerSet::load(markers, f.height(), f.width()).map_err(|e| Failure::from(e).context(markers))?;
            pairs.push((f, m));
        } else if p.extension().is_some_and(|e| e == "json") {
            let s = stem(p)?;
            if !files.contains_key(&format!("{s}.pgm")) && !files.contains_key(&format!("{s}.png")) {
                return Err(Failure::usage(format!("{} has no matching image", path.display())));
            }
        }
    }
    if pairs.is_empty() {
        return Err(Failure::usage(format!("{} contains no image/marker pairs", dir.display())));
    }
    Ok(pairs)
}

pub fn train(a: &TrainArgs) -> Result<(), Failure> {
    let method = match parse_method(&a.method)? {
        SegMethod::Net(m) => m,
        other => return Err(Failure::usage(format!("train expects m1, m2, m3 or m4, not {other}"))),
    };
    let cfg = load_config(a.config.as_deref(), a.seed)?;
    let pairs = load_pairs(&a.data)?;
    let run = train_net(&pairs, method, &cfg.train())?;
    write_atomic(&a.out, &run.checkpoint()?.to_bytes())?;
    write_atomic(&a.out.with_extension("loss.csv"), run.loss_csv().as_bytes())?;
    if let Some(last) = run.loss_trace.last() {
        eprintln!("trained {method} on {} images for {} epochs, final loss {last:.6}", pairs.len(), run.early_stop_epoch);
    }
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Result<(), Failure> {
    for seed in a.seed..a.seed + a.count {
        let fx = generate(a.kind, a.size, a.noise, seed)?;
        let name = format!("{}-{seed}", a.kind);
        write_atomic(&a.out.join(format!("{name}.pgm")), &encode_image_pgm(&fx.image))?;
        write_atomic(&a.out.join(format!("{name}.json")), fx.markers.to_json().as_bytes())?;
        write_atomic(&a.out.join("gt").join(format!("{name}.pgm")), &encode_pgm(a.size, a.size, fx.truth.data()))?;
    }
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<(), Failure> {
    let pred: Vec<_> = list_files(&a.pred)?.into_iter().filter(|(n, _)| is_image(Path::new(n))).collect();
    let gt: Vec<_> = list_files(&a.gt)?.into_iter().filter(|(n, _)| is_image(Path::new(n))).collect();
    let names = |v: &[(String, std::path::PathBuf)]| v.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>();
    let (pn, gn) = (names(&pred), names(&gt));
    let unmatched: Vec<&String> = pn
        .iter()
        .filter(|n| !gn.contains(n))
        .chain(gn.iter().filter(|n| !pn.contains(n)))
        .collect();
    if !unmatched.is_empty() {
        return Err(Failure::usage(format!("unmatched file names: {unmatched:?}")));
    }
    let mut scores = Vec::with_capacity(pred.len());
    for ((name, p), (_, g)) in pred.iter().zip(&gt) {
        let id = stem(Path::new(name))?;
        let s = score(id, &load_mask(p)?, &load_mask(g)?).map_err(|e| Failure::from(e).context(p))?;
        scores.push(s);
    }
    let report = EvalResult::from_scores(scores)?;
    write_atomic(&a.out, report.to_csv(&a.label).as_bytes())?;
    eprintln!("{} images: dice {:.4} ± {:.4}, jaccard {:.4} ± {:.4}", report.per_image.len(), report.dice, report.dice_std, report.jaccard, report.jaccard_std);
    Ok(())
}
