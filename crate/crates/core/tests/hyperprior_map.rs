use lance_core::decoder::Image;
use lance_core::encoder::{encode, EncodeConfig, OperatingPoint};
use lance_core::eval::{dump_hyperprior, report_breakdown};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Left half a smooth ramp, right half full-range i.i.d. noise.
fn two_region(s: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut data = Vec::with_capacity(3 * s * s);
    for i in 0..s {
        for j in 0..s {
            if j < s / 2 {
                let v = (60 + (i + j) * 100 / (2 * s)) as u8;
                data.extend([v, v, v]);
            } else {
                data.extend([rng.gen::<u8>(), rng.gen(), rng.gen()]);
            }
        }
    }
    Image::new(s, s, data).unwrap()
}

#[test]
fn two_region_content_gives_a_bimodal_hyperprior_and_latent_dominated_file() {
    let s = 64;
    let config = EncodeConfig { lambda: 0.0001, downsampling: 3, operating_point: OperatingPoint::Lop, seed: 1, ..Default::default() }
        .with_iterations(1500);
    let enc = encode(&two_region(s), &config).unwrap();

    let map = dump_hyperprior(&enc.bytes).unwrap();
    assert_eq!((map.width, map.height), (8, 8));
    let mut hist = [0usize; 256];
    for &v in &map.data {
        hist[v as usize] += 1;
    }
    let mut counts: Vec<usize> = hist.iter().copied().filter(|&c| c > 0).collect();
    counts.sort_unstable_by(|a, b| b.cmp(a));
    assert!(counts.len() >= 2, "hyperprior map is flat");
    assert!(10 * (counts[0] + counts[1]) >= 9 * map.data.len(), "levels {:?}", counts);

    let breakdown = report_breakdown(&enc.bytes).unwrap();
    let top = breakdown.shares.iter().max_by_key(|e| e.bytes).unwrap();
    assert_eq!(top.component, "latents", "{:?}", breakdown.shares);
}
