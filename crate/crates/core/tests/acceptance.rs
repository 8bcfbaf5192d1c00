//! Acceptance run: one line per criterion, nonzero exit if any fails.
//!
//! The training criteria share one pretrained field and one warmed-up
//! codec on the toy scene with the `tiny` profile; expect about ten
//! minutes on a single core.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nrfc::autograd::gradcheck;
use nrfc::bitstream::golden::{random_stream, random_tables};
use nrfc::bitstream::range_coder::{decode_symbols, encode_symbols, table_cost_bits};
use nrfc::bitstream::{SceneContainer, SubstreamId};
use nrfc::codec::entropy::{bits, gaussian_likelihood, quantize};
use nrfc::codec::{BackboneCheckpoint, QuantMode};
use nrfc::io::dataset::{Dataset, Split};
use nrfc::io::toy::{generate_toy_scene, ToyConfig};
use nrfc::renderer::{composite, sample_along_ray, Ray};
use nrfc::scene::{analyze, decode_scene, pack, scene_breakdown, simulate_planes, SceneModel};
use nrfc::tensor::Tensor;
use nrfc::training::checkpoint::RenderableScene;
use nrfc::training::stages::frozen_digests;
use nrfc::training::*;
use nrfc::{Error, Result};

const BACKBONE_SEED: u64 = 0;
const WEIGHT_BITS: u8 = 8;
const SPECTRUM_SLOT: usize = 3;
const FOUR_HOURS: f64 = 4.0 * 3600.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

struct Run {
    failed: usize,
}

impl Run {
    fn check(&mut self, name: &str, f: impl FnOnce() -> Result<Outcome>) {
        let t = Instant::now();
        let o = f().unwrap_or_else(|e| Outcome {
            pass: false,
            detail: format!("error: {e}"),
        });
        if !o.pass {
            self.failed += 1;
        }
        println!(
            "{} {name}: {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed().as_secs_f64()
        );
    }
}

fn coder_conformance() -> Result<Outcome> {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut mismatches, mut out_of_bounds, mut escapes) = (0, 0, 0usize);
    let mut worst = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..1000 {
        let n_tables = rng.random_range(1..=4);
        let tables = random_tables(&mut rng, n_tables, 300);
        let len = rng.random_range(1000..=3000);
        let s = random_stream(&mut rng, &tables, len);
        escapes += s
            .symbols
            .iter()
            .zip(&s.contexts)
            .filter(|(&v, &c)| tables[c].index_of(v).is_none())
            .count();
        let bytes = encode_symbols(&s.symbols, &tables, &s.contexts)?;
        if decode_symbols(&bytes, &tables, &s.contexts)? != s.symbols {
            mismatches += 1;
        }
        let excess = 8.0 * bytes.len() as f64 - table_cost_bits(&s.symbols, &tables, &s.contexts);
        worst = (worst.0.min(excess), worst.1.max(excess));
        if !(-1.0..=64.0).contains(&excess) {
            out_of_bounds += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        mismatches == 0 && out_of_bounds == 0 && secs < 60.0,
        format!(
            "1000 streams, {escapes} escapes, {mismatches} roundtrip mismatches, \
             excess over ideal length {:.1}..{:.1} bits, {out_of_bounds} outside [-1, 64]",
            worst.0, worst.1
        ),
    )
}

fn renderer_oracle() -> Result<Outcome> {
    let mut slab_err: f64 = 0.0;
    let color = [0.8, 0.1, 0.4];
    for (sigma, len) in [(0.5, 1.0), (2.0, 1.5), (8.0, 0.7), (0.05, 3.0)] {
        let ray = Ray::new([0.0; 3], [1.0, 0.0, 0.0], 0.0, len)?;
        let (t, d) = sample_along_ray(&ray, 512, None);
        let c = composite(&vec![sigma; 512], &vec![color; 512], &d, &t, [1.0; 3])?;
        let e = (-sigma * len).exp();
        for k in 0..3 {
            slab_err = slab_err.max((c.rgb[k] - (color[k] * (1.0 - e) + e)).abs());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut unity_err: f64 = 0.0;
    for _ in 0..2000 {
        let n = rng.random_range(1..200);
        let sigmas: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 50.0).collect();
        let deltas: Vec<f64> = (0..n).map(|_| 1e-4 + rng.random::<f64>() * 0.1).collect();
        let ts: Vec<f64> = deltas
            .iter()
            .scan(0.0, |acc, d| {
                *acc += d;
                Some(*acc)
            })
            .collect();
        let c = composite(&sigmas, &vec![[0.5; 3]; n], &deltas, &ts, [0.0; 3])?;
        let sum: f64 =
            (0..n).map(|i| c.transmittance[i] * c.alpha[i]).sum::<f64>() + c.transmittance[n];
        unity_err = unity_err.max((sum - 1.0).abs());
    }
    outcome(
        slab_err <= 1e-3 && unity_err <= 1e-6,
        format!(
            "slab error {slab_err:.2e} at 512 samples, partition of unity error {unity_err:.2e}"
        ),
    )
}

fn gradient_checks() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (b, n) = (3, 8);
    let sigma = Tensor::from_fn(&[b, n], |_| rng.random_range(0.05..4.0));
    let color = Tensor::from_fn(&[b, n, 3], |_| rng.random());
    let deltas = Tensor::from_fn(&[b, n], |_| rng.random_range(0.05..0.3));
    let target = Tensor::from_fn(&[b, 3], |_| rng.random());
    let composite_err = gradcheck::check(&[sigma], |g, v| {
        let c = g.constant(color.clone());
        let rgb = g.composite(v[0], c, &deltas, [1.0; 3]);
        let t = g.constant(target.clone());
        let d = g.sub(rgb, t);
        let s = g.square(d);
        g.sum_all(s)
    });

    let y = Tensor::from_fn(&[2, 4, 4], |_| rng.random_range(-3.0..3.0));
    let mu = Tensor::from_fn(&[2, 4, 4], |_| rng.random_range(-1.0..1.0));
    let scale = Tensor::from_fn(&[2, 4, 4], |_| rng.random_range(0.3..3.0));
    let rate_err = gradcheck::check(&[mu, scale], |g, v| {
        // a fresh generator per evaluation keeps the noise draw fixed
        let mut noise = ChaCha8Rng::seed_from_u64(11);
        let yv = g.constant(y.clone());
        let noisy = quantize(g, yv, None, QuantMode::Noise, &mut noise);
        let lik = gaussian_likelihood(g, noisy, v[0], v[1]);
        bits(g, lik)
    });
    outcome(
        composite_err < 1e-3 && rate_err < 1e-3,
        format!("relative error: composite/sigma {composite_err:.2e}, rate/(mean, scale) {rate_err:.2e}"),
    )
}

struct Pipeline {
    dataset: Dataset,
    data: TrainData,
    cfg: TrainConfig,
    backbone: BackboneCheckpoint,
    field: nrfc::plane_field::PlaneFieldParams,
    initial: SceneModel,
    warmed: SceneModel,
    warmup: WarmupReport,
    model: SceneModel,
    qat: QatReport,
    container: SceneContainer,
    bytes: Vec<u8>,
    estimates: Vec<nrfc::scene::PlaneEstimate>,
    latent_symbols: usize,
    psnr_pretrained: f64,
    psnr_simulated: f64,
    psnr_decoded: f64,
    plane_ratio: f64,
    seconds: f64,
}

fn latent_bytes(c: &SceneContainer) -> usize {
    c.substreams
        .iter()
        .filter(|s| matches!(s.id, SubstreamId::LatentY(_) | SubstreamId::LatentZ(_)))
        .map(|s| s.bytes.len())
        .sum()
}

fn encode(model: &SceneModel, backbone: &BackboneCheckpoint) -> Result<SceneContainer> {
    let (payload, _) = analyze(model, backbone, WEIGHT_BITS)?;
    pack(&payload, backbone)
}

fn pipeline() -> Result<Pipeline> {
    let t = Instant::now();
    let dataset = generate_toy_scene(0, &ToyConfig::default())?;
    let cfg = TrainConfig::tiny();
    let data = TrainData::new(&dataset, cfg.eval_rays)?;
    let (n, m, nz) = cfg.codec.dims();
    let backbone = BackboneCheckpoint::random(n, m, nz, BACKBONE_SEED);
    let mut log = TrainLog::new();

    let mut field = init_field(&cfg.field, data.bbox, cfg.seed);
    pretrain_field(&mut field, &data, &cfg, &mut log)?;
    let mut initial = init_scene_model(field.clone(), &backbone, &cfg);
    initial.render.background = data.background;
    let mut warmed = initial.clone();
    let warmup = warmup_codec(&mut warmed, &cfg, false, &mut log)?;
    let mut model = warmed.clone();
    joint_train(&mut model, &data, &cfg, &mut log)?;
    let qat = qat_stage(&mut model, &data, &cfg, &mut log)?;

    let (payload, estimates) = analyze(&model, &backbone, WEIGHT_BITS)?;
    let latent_symbols = payload.y_symbols.iter().map(Vec::len).sum();
    let container = pack(&payload, &backbone)?;
    let bytes = container.to_bytes()?;
    let decoded = decode_scene(&SceneContainer::from_bytes(&bytes)?, &backbone)?;
    let seconds = t.elapsed().as_secs_f64();

    let pretrained = RenderableScene {
        field: field.clone(),
        compensation: None,
        render: model.render.clone(),
    };
    let psnr_pretrained = pretrained.evaluate(&dataset)?.psnr;
    let psnr_simulated = RenderableScene::simulated(&model)?.evaluate(&dataset)?.psnr;
    let psnr_decoded = RenderableScene::decoded(decoded).evaluate(&dataset)?.psnr;
    let plane_ratio = scene_breakdown(&container, &backbone)?.plane_ratio;
    Ok(Pipeline {
        dataset,
        data,
        cfg,
        backbone,
        field,
        initial,
        warmed,
        warmup,
        model,
        qat,
        container,
        bytes,
        estimates,
        latent_symbols,
        psnr_pretrained,
        psnr_simulated,
        psnr_decoded,
        plane_ratio,
        seconds,
    })
}

fn end_to_end(p: &Pipeline) -> Result<Outcome> {
    let vs_sim = (p.psnr_decoded - p.psnr_simulated).abs();
    let vs_pre = p.psnr_pretrained - p.psnr_decoded;
    outcome(
        vs_sim <= 1.0 && vs_pre <= 3.0 && p.plane_ratio >= 100.0 && p.seconds <= FOUR_HOURS,
        format!(
            "{} test views; PSNR pretrained {:.2}, simulated {:.2}, decoded {:.2} dB; \
             plane ratio {:.0}x; container {} bytes; warmup plane MSE {:.4} -> {:.4}; \
             pipeline {:.0}s",
            p.dataset
                .views
                .iter()
                .filter(|v| v.split == Split::Test)
                .count(),
            p.psnr_pretrained,
            p.psnr_simulated,
            p.psnr_decoded,
            p.plane_ratio,
            p.bytes.len(),
            p.warmup.plane_mse_before,
            p.warmup.plane_mse_after,
            p.seconds
        ),
    )
}

fn rate_fidelity(p: &Pipeline) -> Result<Outcome> {
    let mut actual_total = 0.0;
    let mut estimate_total = 0.0;
    let mut worst: f64 = 0.0;
    let mut within = true;
    for (k, est) in p.estimates.iter().enumerate() {
        let actual = p.container.require(SubstreamId::LatentY(k as u8))?.len() as f64;
        let estimate = est.bits_y / 8.0;
        let gap = (actual - estimate).abs();
        within &= gap <= 0.02 * estimate + 8.0;
        worst = worst.max(gap / estimate);
        actual_total += actual;
        estimate_total += estimate;
    }
    within &= (actual_total - estimate_total).abs() <= 0.02 * estimate_total + 8.0;
    outcome(
        within && p.latent_symbols >= 10_000,
        format!(
            "{} latent symbols; coded {actual_total:.0} bytes vs estimate {estimate_total:.1}; \
             worst plane gap {:.2}%",
            p.latent_symbols,
            100.0 * worst
        ),
    )
}

fn frozen_backbone(p: &Pipeline) -> Result<Outcome> {
    let expected = p.backbone.digest();
    let digests = frozen_digests(&p.model, &p.backbone);
    let unchanged = digests.iter().filter(|d| **d == expected).count();
    outcome(
        unchanged == digests.len(),
        format!(
            "{unchanged}/{} codec groups hash to {} after warmup, joint, and QAT",
            digests.len(),
            &hex::encode(expected)[..16]
        ),
    )
}

fn rate_weight_ablation(p: &Pipeline) -> Result<Outcome> {
    let run = |lambda: f64| -> Result<usize> {
        let mut cfg = p.cfg.clone();
        cfg.lambda = lambda;
        let mut model = p.warmed.clone();
        joint_train(&mut model, &p.data, &cfg, &mut TrainLog::new())?;
        Ok(latent_bytes(&encode(&model, &p.backbone)?))
    };
    let (with_rate, without) = (run(1e-3)?, run(0.0)?);
    outcome(
        with_rate <= without,
        format!(
            "latent bytes after {} joint iterations: {with_rate} with rate weight 1e-3, {without} with 0",
            p.cfg.iters.joint
        ),
    )
}

fn spectrum(p: &Pipeline) -> Result<Outcome> {
    let mut frozen = p.initial.clone();
    let frozen_warmup = warmup_codec(&mut frozen, &p.cfg, true, &mut TrainLog::new())?;
    let planes = HeadTuningPlanes {
        original: p
            .field
            .all_planes()
            .iter()
            .map(|pl| pl.values.clone())
            .collect(),
        frozen: simulate_planes(&frozen)?,
        head_tuned: simulate_planes(&p.warmed)?,
        frozen_warmup,
        tuned_warmup: p.warmup,
    };
    let closer = |k: usize| -> Result<(bool, [f64; 3])> {
        let r = planes.spectrum(k)?;
        let ratio = |name: &str| -> Result<f64> {
            r.variant(name)
                .map(|v| v.high_band_ratio)
                .ok_or_else(|| Error::Input(format!("missing spectrum variant {name}")))
        };
        let (o, f, h) = (ratio("original")?, ratio("frozen")?, ratio("head_tuned")?);
        Ok(((h - o).abs() < (f - o).abs(), [o, f, h]))
    };
    let (pass, [o, f, h]) = closer(SPECTRUM_SLOT)?;
    let mut agree = 0;
    for k in 0..planes.original.len() {
        agree += closer(k)?.0 as usize;
    }
    outcome(
        pass,
        format!(
            "plane {SPECTRUM_SLOT} high-band ratio: original {o:.4}, frozen {f:.4}, head-tuned {h:.4}; \
             head-tuned closer on {agree}/6 planes"
        ),
    )
}

fn qat_property(p: &Pipeline) -> Result<Outcome> {
    let (before, after) = (p.qat.before, p.qat.after);
    outcome(
        after.drop() <= before.drop(),
        format!(
            "quantization drop before QAT {:.4} dB ({:.3} -> {:.3}), after {:.4} dB ({:.3} -> {:.3})",
            before.drop(),
            before.psnr_float,
            before.psnr_quantized,
            after.drop(),
            after.psnr_float,
            after.psnr_quantized
        ),
    )
}

/// Truncations, single-byte flips, and random splats of a real container.
fn fuzz_cases(bytes: &[u8]) -> Vec<Vec<u8>> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut cases = Vec::new();
    for len in (0..bytes.len().min(256)).chain((0..200).map(|_| rng.random_range(0..bytes.len()))) {
        cases.push(bytes[..len].to_vec());
    }
    for _ in 0..600 {
        let mut b = bytes.to_vec();
        let i = rng.random_range(0..b.len());
        b[i] ^= 1 << rng.random_range(0..8);
        cases.push(b);
    }
    for _ in 0..200 {
        let mut b = bytes.to_vec();
        let start = rng.random_range(0..b.len());
        let end = (start + rng.random_range(1..64)).min(b.len());
        b[start..end].iter_mut().for_each(|x| *x = rng.random());
        cases.push(b);
    }
    let mut extended = bytes.to_vec();
    extended.extend_from_slice(&[0xAB; 17]);
    cases.push(extended);
    cases
}

fn container_fuzz(p: &Pipeline) -> Result<Outcome> {
    let cases = fuzz_cases(&p.bytes);
    let hook = std::panic::take_hook();
    std::panic::set_hook(Box::new(|_| {}));
    let (mut panics, mut rejected, mut decoded) = (0, 0, 0);
    for case in &cases {
        let r = catch_unwind(AssertUnwindSafe(|| {
            SceneContainer::from_bytes(case)
                .map_err(Error::from)
                .and_then(|c| decode_scene(&c, &p.backbone))
        }));
        match r {
            Err(_) => panics += 1,
            Ok(Err(_)) => rejected += 1,
            Ok(Ok(_)) => decoded += 1,
        }
    }
    std::panic::set_hook(hook);
    outcome(
        panics == 0,
        format!(
            "{} mutated containers: {rejected} typed errors, {decoded} decoded, {panics} panics",
            cases.len()
        ),
    )
}

fn main() -> ExitCode {
    let mut run = Run { failed: 0 };
    run.check("coder conformance", coder_conformance);
    run.check("renderer oracle", renderer_oracle);
    run.check("gradient checks", gradient_checks);
    let t = Instant::now();
    match pipeline() {
        Ok(p) => {
            println!(
                "     shared pipeline ready [{:.1}s]",
                t.elapsed().as_secs_f64()
            );
            run.check("rate estimate fidelity", || rate_fidelity(&p));
            run.check("frozen backbone", || frozen_backbone(&p));
            run.check("end-to-end pipeline", || end_to_end(&p));
            run.check("rate weight ablation", || rate_weight_ablation(&p));
            run.check("spectrum recovery", || spectrum(&p));
            run.check("qat property", || qat_property(&p));
            run.check("container fuzz", || container_fuzz(&p));
        }
        Err(e) => {
            for name in [
                "rate estimate fidelity",
                "frozen backbone",
                "end-to-end pipeline",
                "rate weight ablation",
                "spectrum recovery",
                "qat property",
                "container fuzz",
            ] {
                run.check(name, || Err(Error::Input(format!("pipeline failed: {e}"))));
            }
        }
    }
    println!("{} of 10 criteria failed", run.failed);
    if run.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
