//! Fast end-to-end consistency checks for an installed binary.

use std::io::Write;

use anyhow::Result;
use slicedit_core::attention::{extended_attention, self_attention, Projections, Tokens};
use slicedit_core::denoisers::{embed_prompt, AnalyticDenoiser, GaussianPrior, ToyUnet};
use slicedit_core::inflated::combine;
use slicedit_core::pipeline::{invert, sample, EditConfig, SamplingPlan};
use slicedit_core::rng;
use slicedit_core::stvolume::{Space, VideoVolume, VolumeDims};

use crate::formats::{decode_stv1, encode_stv1};

type Check = (&'static str, fn() -> Result<(bool, String)>);

fn reconstruction(
    den: &dyn slicedit_core::denoisers::Denoiser,
    channels: usize,
) -> Result<(bool, String)> {
    let d = VolumeDims::new(8, 8, 8, channels);
    let src = VideoVolume::new(
        d,
        Space::Latent,
        rng::normal_vec(&mut rng::stream(1, &[]), d.len()),
    )?;
    let cfg = EditConfig {
        steps: 10,
        t_skip: 0,
        inject_fraction: 1.0,
        seg_len: 8,
        ..EditConfig::default()
    };
    let p = embed_prompt("self check");
    let err = sample(den, &invert(den, &src, &p, &cfg)?, &p, &cfg)?.max_abs_diff(&src);
    Ok((err < 1e-3, format!("max abs error {err:.2e}")))
}

const CHECKS: [Check; 6] = [
    ("analytic reconstruction", || {
        reconstruction(&AnalyticDenoiser::new(GaussianPrior::ar1(0.8, 0.8)?), 2)
    }),
    ("u-net reconstruction", || {
        reconstruction(&ToyUnet::seeded(4, 0)?, 4)
    }),
    ("variance preservation", || {
        let n = 200_000;
        let a = rng::normal_vec(&mut rng::stream(2, &[]), n);
        let b = rng::normal_vec(&mut rng::stream(3, &[]), n);
        let c = combine(&a, &b, 0.8)?;
        let var = c.iter().map(|&x| (x as f64).powi(2)).sum::<f64>() / n as f64;
        Ok(((var - 1.0).abs() < 0.02, format!("variance {var:.4}")))
    }),
    ("extended attention over itself", || {
        let f = Tokens::random(16, 32, 4);
        let p = Projections::seeded(32, 16, 16, 5);
        let d = extended_attention(&f, &[&f], &p)?
            .max_abs_diff(&self_attention(&p.tensors(&f, &[&f])?)?);
        Ok((d < 1e-6, format!("max abs diff {d:.2e}")))
    }),
    ("injection schedule", || {
        let p = SamplingPlan::new(50, 8, 0.85)?;
        Ok((
            p.executed == 42 && p.injected == 36,
            format!("{} executed, {} injected", p.executed, p.injected),
        ))
    }),
    ("STV1 round trip", || {
        let d = VolumeDims::new(2, 3, 4, 2);
        let v = VideoVolume::new(
            d,
            Space::Latent,
            rng::normal_vec(&mut rng::stream(6, &[]), d.len()),
        )?;
        let ok = decode_stv1(&encode_stv1(&v)?)? == v;
        Ok((ok, "exact".into()))
    }),
];

/// Runs every check, printing one `PASS`/`FAIL` line each. Returns whether
/// all passed.
pub fn run_all(out: &mut dyn Write) -> Result<bool> {
    let mut all = true;
    for (name, check) in CHECKS {
        let (ok, detail) = match check() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e:#}")),
        };
        all &= ok;
        writeln!(out, "{} {name}: {detail}", if ok { "PASS" } else { "FAIL" })?;
    }
    Ok(all)
}
