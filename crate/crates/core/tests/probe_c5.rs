//! Temporary calibration probe for the end-to-end training budget.

use std::time::Instant;

use gstego::embed::Payload;
use gstego::image_buf::ImageBuf;
use gstego::render::CameraRig;
use gstego::synth::{synthesize, SynthConfig};
use gstego::train::{TrainConfig, Trainer};

fn smooth_image(side: usize, seed: u64) -> ImageBuf<f32> {
    let mut data = Vec::with_capacity(side * side * 3);
    let s = seed as f32;
    for y in 0..side {
        for x in 0..side {
            let (u, v) = (x as f32 / side as f32, y as f32 / side as f32);
            for c in 0..3 {
                let p = c as f32;
                let val = 0.5
                    + 0.25 * ((6.0 + p) * u + s).sin()
                    + 0.25 * ((4.0 + 2.0 * p) * v + 1.7 * s + p).cos();
                data.push(val.clamp(0.0, 1.0));
            }
        }
    }
    ImageBuf::from_vec(side, side, 3, data).unwrap()
}

fn probe(lr: f64, steps: usize) {
    let scene = synthesize::<f32>(&SynthConfig { seed: 1, ..Default::default() }).unwrap();
    let diam = scene.diameter();
    let rig = CameraRig::orbit(32, 1.6 * diam, 40.0, 128, 128, 45.0).unwrap();
    let payload = Payload::Image(smooth_image(64, 9));
    let cfg = TrainConfig { steps, seed: 5, lr, ..Default::default() };
    let t0 = Instant::now();
    let mut tr = Trainer::new(cfg, rig, 0, scene, payload, None).unwrap();
    for i in 0..steps {
        let row = tr.step().unwrap();
        if (i + 1) % 15 == 0 || i == 0 {
            eprintln!(
                "lr {lr} step {i}: total {:.4} rgb {:.5} dec+ {:.4} dec- {:.4} psnr_h {:.2?} ssim_h {:.3?}",
                row.loss_total,
                row.loss_rgb,
                row.loss_dec_pos,
                row.loss_dec_neg,
                row.psnr_hidden,
                row.ssim_hidden
            );
        }
    }
    let rep = tr.evaluate().unwrap();
    eprintln!(
        "lr {lr} done in {:.1?}: holdout {:.2?} psnr_h {:.2?} ssim_h {:.3?}",
        t0.elapsed(),
        rep.render_psnr_holdout_mean,
        rep.recovery.psnr_hidden,
        rep.recovery.ssim_hidden
    );
}

#[test]
#[ignore]
fn probe_c5_step_time() {
    probe(1e-3, 150);
    probe(3e-3, 150);
}
