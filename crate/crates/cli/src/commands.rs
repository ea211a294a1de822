use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde_json::json;
use vqnerf_core::brdf::EnvironmentMap;
use vqnerf_core::decompose::{build_segmentation, meanshift_segmentation, rank_and_select, ViewLatents};
use vqnerf_core::edit::{EditOp, EditSession, Lighting, RenderMode};
use vqnerf_core::image::write_png;
use vqnerf_core::metrics::{matched_unit_pair, psnr, seg_scores, ssim, MeanshiftConfig};
use vqnerf_core::scene::{generate_scene, shade_gbuffer, write_bundle, SceneSpec};
use vqnerf_core::train::{StepRecord, Trainer};
use vqnerf_core::vq::{export_segmentation, MaterialEntry, SegmentationMap, BACKGROUND};
use vqnerf_service::AppState;

use crate::checkpoint::{Checkpoint, RunConfig, CONFIG_FILE, JOURNAL_FILE, LOG_FILE, MODEL_FILE};
use crate::{Cli, CkptArgs, Command, EditArgs, EvalArgs, ExportArgs, GenArgs, LengthArgs, RankArgs, RelightArgs, SegmentArgs, ServeArgs, TrainArgs};

pub fn run(cli: &Cli) -> Result<()> {
    let mut echo = serde_json::to_value(cli)?;
    if let Command::Train(a) = &cli.command {
        echo["resolved_train"] = serde_json::to_value(a.train.resolve())?;
    }
    eprintln!("config {echo}");
    match &cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Rank(a) => rank(a),
        Command::Segment(a) => segment(a),
        Command::Eval(a) => eval(a),
        Command::Edit(a) => edit(a),
        Command::Relight(a) => relight(a),
        Command::Serve(a) => serve(a),
        Command::ExportLatents(a) => export_latents(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn gen(a: &GenArgs) -> Result<()> {
    let mut spec = SceneSpec::preset(&a.preset)?;
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(v) = a.views {
        spec.cameras.views = v;
    }
    if let Some(w) = a.width {
        spec.cameras.width = w;
    }
    if let Some(h) = a.height {
        spec.cameras.image_height = h;
    }
    if let Some(r) = a.env_rows {
        spec.env_rows = r;
    }
    if let Some(c) = a.env_cols {
        spec.env_cols = c;
    }
    let bundle = generate_scene(&spec)?;
    create_dir(&a.out)?;
    write_bundle(&bundle, &a.out)?;
    println!("wrote {} views of `{}` to {}", bundle.views.len(), spec.name, a.out.display());
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let cfg = a.train.resolve();
    let bundle = vqnerf_core::scene::read_bundle(&a.scene)?;
    create_dir(&a.out)?;
    let scene = std::fs::canonicalize(&a.scene).with_context(|| format!("resolving {}", a.scene.display()))?;
    let run = RunConfig { scene, train: cfg.clone() };
    let cfg_path = a.out.join(CONFIG_FILE);
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&run)?).with_context(|| format!("writing {}", cfg_path.display()))?;

    let log_path = a.out.join(LOG_FILE);
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let mut trainer = Trainer::new(&bundle, cfg)?;
    let total = trainer.cfg.steps;
    let start = std::time::Instant::now();
    let mut io_err = None;
    let result = trainer.run(|r: &StepRecord| {
        if let Err(e) = serde_json::to_writer(&mut log, r).map_err(std::io::Error::from).and_then(|()| log.write_all(b"\n")) {
            io_err.get_or_insert(e);
        }
        if a.log_every > 0 && (r.step % a.log_every == 0 || r.step + 1 == total) {
            log::info!(
                "step {}/{} L_all {:.5} L_rec_c {:.5} L_rec_d {:.5} usage {:?} ({:.0}s)",
                r.step + 1,
                total,
                r.all,
                r.rec_c,
                r.rec_d,
                r.codeword_usage_histogram,
                start.elapsed().as_secs_f64()
            );
        }
        Ok(())
    });
    let model_path = a.out.join(MODEL_FILE);
    if let Err(e @ vqnerf_core::Error::Diverged { .. }) = result {
        trainer.model.save(&model_path)?;
        log::error!("saved the last finite step to {}", model_path.display());
        return Err(e.into());
    }
    result?;
    if let Some(e) = io_err {
        return Err(e).with_context(|| format!("writing {}", log_path.display()));
    }
    log.flush().with_context(|| format!("writing {}", log_path.display()))?;
    trainer.model.save(&model_path)?;
    println!("checkpoint {} hash {}", model_path.display(), trainer.model.hash());
    Ok(())
}

fn open(c: &CkptArgs) -> Result<Checkpoint> {
    Checkpoint::open(&c.ckpt, c.scene.as_deref())
}

fn rank(a: &RankArgs) -> Result<()> {
    let ck = open(&a.ckpt)?;
    let eps = a.eps.unwrap_or(ck.config.train.eps);
    let curve = rank_and_select(&ck.model, &ck.bundle.views, eps)?;
    println!("k\terr_k");
    for (k, e) in curve.errors.iter().enumerate() {
        println!("{}\t{e:.6e}", k + 1);
    }
    println!("selected M = {} (eps {eps})", curve.selected);
    Ok(())
}

fn session(ck: &Checkpoint, length: &LengthArgs) -> Result<EditSession> {
    let m = ck.length(length.m, length.eps)?;
    Ok(EditSession::new(Arc::new(ck.model.clone()), Arc::new(ck.bundle.clone()), m)?)
}

fn segment(a: &SegmentArgs) -> Result<()> {
    let ck = open(&a.ckpt)?;
    let m = ck.length(a.length.m, a.length.eps)?;
    let attrs = ck.model.codeword_attributes()?;
    let materials: Vec<MaterialEntry> = attrs.iter().take(m).enumerate().map(|(i, a)| MaterialEntry::new(i, a)).collect();
    create_dir(&a.out)?;
    for (i, v) in ck.bundle.views.iter().enumerate() {
        let map = build_segmentation(&ck.model, &v.gbuffer, m)?;
        export_segmentation(&map, &materials, &a.out.join(format!("view_{i:02}")))?;
    }
    println!("wrote {} segmentation maps with M = {m} to {}", ck.bundle.views.len(), a.out.display());
    Ok(())
}

fn pooled_scores(maps: &[SegmentationMap], truth: &[&[u16]]) -> Result<serde_json::Value> {
    let pred: Vec<u16> = maps.iter().flat_map(|s| s.labels.iter().copied()).collect();
    let gt: Vec<u16> = truth.iter().flat_map(|t| t.iter().copied()).collect();
    Ok(serde_json::to_value(seg_scores(&pred, &gt)?)?)
}

fn eval(a: &EvalArgs) -> Result<()> {
    let ck = open(&a.ckpt)?;
    let s = session(&ck, &a.length)?;
    let mut views = Vec::new();
    let mut maps = Vec::new();
    let (mut psnr_sum, mut ssim_sum) = (0.0, 0.0);
    for (i, v) in ck.bundle.views.iter().enumerate() {
        let img = s.render(i, a.branch)?;
        let (p, t) = matched_unit_pair(&img, &v.image);
        let view_psnr = psnr(&p, &t, false)?;
        let view_ssim = ssim(&p, &t, v.gbuffer.width, v.gbuffer.height)?;
        let map = s.segmentation(i)?;
        let seg = seg_scores(&map.labels, &v.labels)?;
        psnr_sum += view_psnr;
        ssim_sum += view_ssim;
        views.push(json!({ "view": i, "psnr": view_psnr, "ssim": view_ssim, "seg": seg }));
        maps.push(map);
    }
    let n = ck.bundle.views.len() as f64;
    let truth: Vec<&[u16]> = ck.bundle.views.iter().map(|v| v.labels.as_slice()).collect();
    let mut report = json!({
        "m": s.m(),
        "branch": a.branch,
        "model_hash": s.model_hash(),
        "views": views,
        "aggregate": { "psnr": psnr_sum / n, "ssim": ssim_sum / n, "seg": pooled_scores(&maps, &truth)? },
    });
    if !a.meanshift.is_empty() {
        let mut baseline = Vec::new();
        for &h in &a.meanshift {
            let maps = meanshift_segmentation(&ck.model, &ck.bundle.views, a.features, &MeanshiftConfig::new(h), a.max_seeds)?;
            let clusters = maps
                .iter()
                .flat_map(|m| m.labels.iter().copied())
                .filter(|&l| l != BACKGROUND)
                .collect::<std::collections::BTreeSet<_>>()
                .len();
            baseline.push(json!({ "bandwidth": h, "clusters": clusters, "seg": pooled_scores(&maps, &truth)? }));
        }
        report["meanshift"] = json!({ "features": a.features, "runs": baseline });
    }
    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    if let Some(out) = &a.out {
        std::fs::write(out, &text).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn render_all(s: &EditSession, mode: RenderMode, out: &Path) -> Result<Vec<Vec<f32>>> {
    create_dir(out)?;
    let mut imgs = Vec::new();
    for (i, v) in s.bundle().views.iter().enumerate() {
        let img = s.render(i, mode)?;
        write_png(&out.join(format!("view_{i:02}.png")), &img, v.gbuffer.width, v.gbuffer.height)?;
        imgs.push(img);
    }
    Ok(imgs)
}

/// Reads a JSON array of ops, or one op per non-empty line.
fn read_ops(path: &Path) -> Result<Vec<EditOp>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if text.trim_start().starts_with('[') {
        return serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()));
    }
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), i + 1)))
        .collect()
}

fn edit(a: &EditArgs) -> Result<()> {
    let ck = open(&a.ckpt)?;
    let mut s = session(&ck, &a.length)?;
    for (i, op) in read_ops(&a.ops)?.iter().enumerate() {
        s.apply(op).with_context(|| format!("op {}", i + 1))?;
    }
    render_all(&s, a.branch, &a.out)?;
    println!("{}", serde_json::to_string_pretty(&s.materials())?);
    Ok(())
}

fn relight(a: &RelightArgs) -> Result<()> {
    let ck = open(&a.ckpt)?;
    let mut s = session(&ck, &a.length)?;
    let lighting = match (&a.lighting.env, &a.lighting.preset) {
        (Some(path), None) => {
            let map = EnvironmentMap::<f32>::load(path)?;
            Lighting::Map {
                rows: map.rows(),
                cols: map.cols(),
                radiance: map.radiance().to_vec(),
            }
        }
        (None, Some(name)) => Lighting::Preset { name: name.clone() },
        _ => bail!("give exactly one of --env or --preset"),
    };
    let env = s.lighting(&lighting, a.intensity)?;
    s.relight(env.clone());
    let imgs = render_all(&s, a.branch, &a.out)?;
    // Ground truth shaded under the same lighting, for scenes that carry it.
    let env64 = env.cast::<f64>();
    let spec = &s.bundle().spec;
    let mut total = 0.0;
    for (v, img) in s.bundle().views.iter().zip(&imgs) {
        let oracle = shade_gbuffer(&v.gbuffer, &v.labels, &spec.materials, &env64);
        let (p, t) = matched_unit_pair(img, &oracle);
        total += psnr(&p, &t, false)?;
    }
    let report = json!({ "m": s.m(), "views": imgs.len(), "psnr_vs_ground_truth": total / imgs.len() as f64 });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn serve(a: &ServeArgs) -> Result<()> {
    let ck = open(&a.ckpt)?;
    let s = session(&ck, &a.length)?;
    let journal = a.journal.clone().unwrap_or_else(|| ck.dir.join(JOURNAL_FILE));
    let state = AppState::open(s, Some(&journal))?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async {
        let listener = vqnerf_service::bind(a.addr).await.with_context(|| format!("binding {}", a.addr))?;
        log::info!("serving on http://{} (journal {})", listener.local_addr()?, journal.display());
        vqnerf_service::serve_on(state, listener).await?;
        Ok(())
    })
}

fn export_latents(a: &ExportArgs) -> Result<()> {
    let ck = open(&a.ckpt)?;
    let m = ck.length(a.length.m, a.length.eps)?;
    let file = File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut w = BufWriter::new(file);
    let dim = ck.model.codebook.dim();
    let mut header = String::from("view,pixel,px,py,pz");
    for d in 0..dim {
        header.push_str(&format!(",z{d}"));
    }
    header.push_str(",u");
    writeln!(w, "{header}")?;
    let mut rows = 0;
    for (vi, v) in ck.bundle.views.iter().enumerate() {
        let lat = ViewLatents::new(&ck.model, &v.gbuffer)?;
        let u = lat.assign(&ck.model, m)?;
        for (r, &i) in lat.pixels.iter().enumerate() {
            let p = v.gbuffer.points[i];
            write!(w, "{vi},{i},{},{},{}", p[0], p[1], p[2])?;
            for z in lat.z.row(r) {
                write!(w, ",{z}")?;
            }
            writeln!(w, ",{}", u[r])?;
            rows += 1;
        }
    }
    w.flush()?;
    println!("wrote {rows} rows with M = {m} to {}", a.out.display());
    Ok(())
}
