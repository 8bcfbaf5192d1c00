use std::path::{Path, PathBuf};

use log::{info, warn};
use nrfc::bitstream::golden::{self, GoldenSet, SymbolStream, TableSet};
use nrfc::bitstream::{decode_symbols, encode_symbols, SceneContainer};
use nrfc::codec::BackboneCheckpoint;
use nrfc::io::archive::write_atomic;
use nrfc::io::dataset::Dataset;
use nrfc::io::image::write_png;
use nrfc::io::report::rd_report;
use nrfc::io::toy::{generate_toy_scene, toy_cameras, ToyConfig};
use nrfc::renderer::RenderSettings;
use nrfc::scene::{decode_scene, encode_scene, scene_breakdown};
use nrfc::training::checkpoint::{
    load_field, load_model, save_decoded, save_field, save_model, RenderableScene,
};
use nrfc::training::{
    self, head_tuning_planes, init_field, pretrain_field, TrainConfig, TrainData, TrainLog,
};
use nrfc::{Error, Result};
use serde::Serialize;

use crate::{BackboneArgs, Command, ConfigArgs, ConformanceAction};

/// Seed of the fallback backbone; fixed so sender and receiver agree.
const RANDOM_BACKBONE_SEED: u64 = 0;
const CACHE_VAR: &str = "NERFCODEC_CACHE";
const LOG_ECHO_EVERY: usize = 100;

fn config(args: &ConfigArgs) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::profile(&args.profile)?,
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn backbone(args: &BackboneArgs, cfg: &TrainConfig) -> Result<BackboneCheckpoint> {
    let (n, m, nz) = cfg.codec.dims();
    let cached = || {
        let dir = std::env::var_os(CACHE_VAR)?;
        let p = PathBuf::from(dir).join(format!("backbone-{}.ntar", cfg.codec.name()));
        p.exists().then_some(p)
    };
    match args.backbone.clone().or_else(cached) {
        Some(p) => Ok(BackboneCheckpoint::load_or_random(Some(&p), n, m, nz, RANDOM_BACKBONE_SEED)?.0),
        None if args.allow_random_backbone => {
            let (bb, note) = BackboneCheckpoint::load_or_random(None, n, m, nz, RANDOM_BACKBONE_SEED)?;
            if let Some(note) = note {
                warn!("{note}");
            }
            Ok(bb)
        }
        None => Err(Error::Config(format!("no backbone checkpoint: pass --backbone, set {CACHE_VAR}, or pass --allow-random-backbone"))),
    }
}

fn train_log(path: Option<&Path>) -> Result<TrainLog> {
    let mut log = match path {
        Some(p) => TrainLog::to_file(p)?,
        None => TrainLog::new(),
    };
    log.echo_every = LOG_ECHO_EVERY;
    Ok(log)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&read(path)?)?)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())
}

/// Result summary on stdout, optionally mirrored to a file.
fn emit(value: &impl Serialize, out: Option<&Path>) -> Result<()> {
    if let Some(p) = out {
        write_json(p, value)?;
    }
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn pretrained(
    data: &Dataset,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<(nrfc::plane_field::PlaneFieldParams, TrainData)> {
    let td = TrainData::new(data, cfg.eval_rays)?;
    let mut field = init_field(&cfg.field, td.bbox, cfg.seed);
    pretrain_field(&mut field, &td, cfg, log)?;
    Ok((field, td))
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::ToyScene {
            out,
            seed,
            views,
            size,
            samples,
        } => {
            let d = ToyConfig::default();
            let cfg = ToyConfig {
                views: views.unwrap_or(d.views),
                size: size.unwrap_or(d.size),
                samples: samples.unwrap_or(d.samples),
                ..d
            };
            info!(
                "rendering {} toy views at {}x{}",
                cfg.views, cfg.size, cfg.size
            );
            let data = generate_toy_scene(seed, &cfg)?;
            data.save(&out)?;
            emit(
                &serde_json::json!({ "out": out, "views": data.views.len() }),
                None,
            )
        }
        Command::Pretrain {
            scene,
            out,
            channels,
            cfg,
            log,
        } => {
            let mut cfg = config(&cfg)?;
            if let Some(c) = channels {
                cfg.field.appearance_channels = c;
            }
            cfg.validate()?;
            let data = Dataset::load(&scene)?;
            let mut log = train_log(log.as_deref())?;
            let (field, td) = pretrained(&data, &cfg, &mut log)?;
            save_field(&field, &out)?;
            let settings = RenderSettings {
                n_samples: cfg.eval_samples,
                background: td.background,
                ..RenderSettings::default()
            };
            let psnr = training::field_psnr(&field, None, &td.eval, &settings)?;
            emit(&serde_json::json!({ "out": out, "psnr_val": psnr }), None)
        }
        Command::Compress {
            scene,
            field,
            out,
            lambda,
            cfg,
            backbone: bb,
            log,
            report,
        } => {
            let mut cfg = config(&cfg)?;
            if let Some(l) = lambda {
                cfg.lambda = l;
            }
            cfg.validate()?;
            let bb = backbone(&bb, &cfg)?;
            let data = Dataset::load(&scene)?;
            let td = TrainData::new(&data, cfg.eval_rays)?;
            let mut log = train_log(log.as_deref())?;
            let (model, rep) = training::compress(load_field(&field)?, &bb, &td, &cfg, &mut log)?;
            save_model(&model, &out)?;
            emit(&rep, report.as_deref())
        }
        Command::Encode {
            model,
            out,
            cfg,
            backbone: bb,
        } => {
            let cfg = config(&cfg)?;
            let bb = backbone(&bb, &cfg)?;
            let (container, est) = encode_scene(&load_model(&model)?, &bb, cfg.weight_bits)?;
            let bytes = container.to_bytes()?;
            write_atomic(&out, &bytes)?;
            let bits_y: f64 = est.iter().map(|e| e.bits_y).sum();
            let bits_z: f64 = est.iter().map(|e| e.bits_z).sum();
            emit(
                &serde_json::json!({ "out": out, "bytes": bytes.len(), "estimated_bits_y": bits_y, "estimated_bits_z": bits_z }),
                None,
            )
        }
        Command::Decode {
            input,
            out,
            cfg,
            backbone: bb,
        } => {
            let cfg = config(&cfg)?;
            let bb = backbone(&bb, &cfg)?;
            let container = SceneContainer::from_bytes(&read(&input)?)?;
            let decoded = decode_scene(&container, &bb)?;
            save_decoded(&decoded, &out)?;
            emit(
                &serde_json::json!({ "out": out, "digest": hex::encode(bb.digest()) }),
                None,
            )
        }
        Command::Render {
            input,
            out,
            scene,
            views,
            size,
            cfg,
            backbone: bb,
        } => {
            let cfg = config(&cfg)?;
            let bb = if is_container(&input)? {
                Some(backbone(&bb, &cfg)?)
            } else {
                None
            };
            let s = RenderableScene::open(&input, bb.as_ref())?;
            let (cameras, near, far) = match scene {
                Some(dir) => {
                    let d = Dataset::load(&dir)?;
                    let mut cams: Vec<_> = d
                        .views(nrfc::io::dataset::Split::Test)
                        .map(|v| v.camera.clone())
                        .collect();
                    if cams.is_empty() {
                        cams = d.views.iter().map(|v| v.camera.clone()).collect();
                    }
                    (cams, d.near, d.far)
                }
                None => {
                    let t = ToyConfig {
                        views,
                        size,
                        ..ToyConfig::default()
                    };
                    (
                        toy_cameras(&t, 0),
                        nrfc::io::dataset::DEFAULT_NEAR,
                        nrfc::io::dataset::DEFAULT_FAR,
                    )
                }
            };
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let mut written = Vec::new();
            for (k, cam) in cameras.iter().enumerate() {
                let p = out.join(format!("view_{k:03}.png"));
                write_png(&p, &s.render_view(cam, near, far)?)?;
                info!("wrote {}", p.display());
                written.push(p);
            }
            emit(&serde_json::json!({ "images": written }), None)
        }
        Command::Eval {
            input,
            scene,
            out,
            cfg,
            backbone: bb,
        } => {
            let cfg = config(&cfg)?;
            let bb = if is_container(&input)? {
                Some(backbone(&bb, &cfg)?)
            } else {
                None
            };
            let m =
                RenderableScene::open(&input, bb.as_ref())?.evaluate(&Dataset::load(&scene)?)?;
            emit(&m, out.as_deref())
        }
        Command::Breakdown {
            input,
            out,
            cfg,
            backbone: bb,
        } => {
            let cfg = config(&cfg)?;
            let bb = backbone(&bb, &cfg)?;
            let b = scene_breakdown(&SceneContainer::from_bytes(&read(&input)?)?, &bb)?;
            emit(&b, out.as_deref())
        }
        Command::Spectrum {
            field,
            out,
            plane,
            cfg,
            backbone: bb,
        } => {
            let cfg = config(&cfg)?;
            let bb = backbone(&bb, &cfg)?;
            let mut log = train_log(None)?;
            let planes = head_tuning_planes(&load_field(&field)?, &bb, &cfg, &mut log)?;
            let report = planes.spectrum(plane)?;
            for v in &report.variants {
                info!("{:<10} high-band ratio {:.6}", v.name, v.high_band_ratio);
            }
            emit(&report, out.as_deref())
        }
        Command::RdSweep {
            scene,
            out,
            field,
            lambda,
            channels,
            cfg,
            backbone: bb,
        } => rd_sweep(
            &scene,
            &out,
            field.as_deref(),
            &lambda,
            &channels,
            &cfg,
            &bb,
        ),
        Command::Conformance { action } => conformance(action),
        Command::InitBackbone { out, cfg } => {
            let cfg = config(&cfg)?;
            let (n, m, nz) = cfg.codec.dims();
            let bb = BackboneCheckpoint::random(n, m, nz, cfg.seed);
            bb.save(&out)?;
            emit(
                &serde_json::json!({ "out": out, "digest": hex::encode(bb.digest()) }),
                None,
            )
        }
    }
}

fn is_container(path: &Path) -> Result<bool> {
    use std::io::Read;
    let mut magic = [0u8; 4];
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(f.read_exact(&mut magic).is_ok() && &magic == nrfc::bitstream::container::MAGIC)
}

fn rd_sweep(
    scene: &Path,
    out: &Path,
    field: Option<&Path>,
    lambdas: &[f64],
    channels: &[usize],
    cfg_args: &ConfigArgs,
    bb_args: &BackboneArgs,
) -> Result<()> {
    let base = config(cfg_args)?;
    let bb = backbone(bb_args, &base)?;
    let data = Dataset::load(scene)?;
    let td = TrainData::new(&data, base.eval_rays)?;
    let given = field.map(load_field).transpose()?;
    let channels = if channels.is_empty() {
        vec![base.field.appearance_channels]
    } else {
        channels.to_vec()
    };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut points = Vec::new();
    for &c in &channels {
        let mut cfg = base.clone();
        cfg.field.appearance_channels = c;
        cfg.validate()?;
        let mut log = train_log(None)?;
        let f = match &given {
            Some(f) if f.appearance_planes[0].channels() == c => f.clone(),
            _ => {
                info!("pretraining a field with {c} appearance channels");
                pretrained(&data, &cfg, &mut log)?.0
            }
        };
        for &l in lambdas {
            cfg.lambda = l;
            let label = format!("c{c}-l{l:e}");
            info!("rate point {label}");
            let run = training::rate_point(&f, &bb, &td, &cfg, &label, &mut log)?;
            write_atomic(&out.join(format!("{label}.nrfc")), &run.container)?;
            points.push(run.point);
        }
    }
    let table = rd_report(&points)?;
    let csv = out.join("rd.csv");
    table.save(&csv)?;
    emit(
        &serde_json::json!({ "table": csv, "rows": table.rows }),
        None,
    )
}

#[derive(Serialize)]
struct ConformanceSummary {
    vectors: usize,
    passed: usize,
    failures: Vec<golden::VectorVerdict>,
}

fn conformance(action: ConformanceAction) -> Result<()> {
    match action {
        ConformanceAction::Generate { out, count, seed } => {
            write_json(&out, &golden::generate(count, seed))?;
            emit(&serde_json::json!({ "out": out, "vectors": count }), None)
        }
        ConformanceAction::Verify { vectors } => {
            let set: GoldenSet = read_json(&vectors)?;
            let verdicts = golden::verify(&set);
            let failures: Vec<_> = verdicts
                .into_iter()
                .filter(|v| !(v.encode_matches && v.decode_matches))
                .collect();
            let summary = ConformanceSummary {
                vectors: set.vectors.len(),
                passed: set.vectors.len() - failures.len(),
                failures,
            };
            emit(&summary, None)?;
            if summary.failures.is_empty() {
                Ok(())
            } else {
                Err(Error::Input(format!(
                    "{} of {} golden vectors failed",
                    summary.failures.len(),
                    summary.vectors
                )))
            }
        }
        ConformanceAction::Encode {
            tables,
            symbols,
            out,
        } => {
            let tables = read_json::<TableSet>(&tables)?.build()?;
            let s: SymbolStream = read_json(&symbols)?;
            let bytes = encode_symbols(&s.symbols, &tables, &s.contexts)?;
            write_atomic(&out, &bytes)?;
            emit(
                &serde_json::json!({ "out": out, "bytes": bytes.len(), "symbols": s.symbols.len() }),
                None,
            )
        }
        ConformanceAction::Decode {
            tables,
            contexts,
            input,
            out,
        } => {
            let tables = read_json::<TableSet>(&tables)?.build()?;
            let s: SymbolStream = read_json(&contexts)?;
            let symbols = decode_symbols(&read(&input)?, &tables, &s.contexts)?;
            write_json(
                &out,
                &SymbolStream {
                    contexts: s.contexts,
                    symbols,
                },
            )?;
            emit(&serde_json::json!({ "out": out }), None)
        }
    }
}
