// Temporary diagnostic: per-layer estimate vs actual split (y/z) over the
// acceptance corpus. Not part of the shipped test suite.

use compass_core::evalkit;
use compass_core::model::{CompassModel, ModelConfig};
use compass_core::pipeline;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn corpus_image(rng: &mut ChaCha20Rng, h: usize, w: usize, style: usize) -> Array3<f64> {
    match style % 3 {
        0 => Array3::from_shape_fn((h, w, 3), |_| rng.gen::<f64>()),
        1 => {
            let ph = rng.gen::<f64>() * 6.0;
            let fx = 0.05 + rng.gen::<f64>() * 0.4;
            let fy = 0.05 + rng.gen::<f64>() * 0.4;
            Array3::from_shape_fn((h, w, 3), |(r, c, ch)| {
                let v = 0.5
                    + 0.3 * ((r as f64 * fy + ph + ch as f64).sin() * (c as f64 * fx).cos())
                    + 0.1 * ((r + 2 * c) as f64 * 0.31).sin();
                v.clamp(0.0, 1.0)
            })
        }
        _ => {
            let r0 = rng.gen_range(0..h);
            let c0 = rng.gen_range(0..w);
            let lum = rng.gen::<f64>();
            let noise: Array3<f64> = Array3::from_shape_fn((h, w, 3), |_| rng.gen::<f64>());
            Array3::from_shape_fn((h, w, 3), |(r, c, ch)| {
                let base = if r < r0 || c < c0 { lum } else { 1.0 - lum };
                (0.8 * base + 0.2 * noise[(r, c, ch)]).clamp(0.0, 1.0)
            })
        }
    }
}

#[test]
fn probe() {
    let model = CompassModel::init(ModelConfig::tiny(), 0xACCE).expect("model init");
    let mut rng = ChaCha20Rng::seed_from_u64(0xC0DEC);
    let mut min_lower = f64::INFINITY;
    for i in 0..52usize {
        let layers = i % 4;
        let mut h = rng.gen_range(17..=97usize);
        let mut w = rng.gen_range(17..=97usize);
        if i % 2 == 0 {
            h |= 1;
            w |= 1;
        }
        let mut scales = Vec::with_capacity(layers);
        let mut s = 1.0f64;
        for _ in 0..layers {
            s *= rng.gen_range(1.25..1.95);
            scales.push(s);
        }
        let top = corpus_image(&mut rng, h, w, i);
        let targets = evalkit::pyramid_targets(&top, &scales).expect("targets");
        let quality = (i % 251) as u8;
        let enc = pipeline::encode(&model, &targets, quality).expect("encode");
        for (k, st) in enc.stats.iter().enumerate() {
            let est = st.estimated_bits();
            let act = st.actual_payload_bits() as f64;
            let margin = 1.02 * est + 256.0 - act;
            min_lower = min_lower.min(act - est);
            if margin < 150.0 {
                println!(
                    "image {i} ({h}x{w} style {}) layer {k} [{}x{}]: est_y {:.1} act_y {} | est_z {:.1} act_z {} | total est {est:.1} act {act} | bracket margin {margin:.1}",
                    i % 3, st.height, st.width,
                    st.estimated_y_bits, st.actual_y_bits,
                    st.estimated_z_bits, st.actual_z_bits
                );
            }
        }
    }
    println!("min lower margin (act - est): {min_lower:.1} bits");
}
