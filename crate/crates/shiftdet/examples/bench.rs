use shiftdet::detector::*;
use shiftdet::img::ImageBuf;
use shiftdet::rng::Rng;
use std::time::Instant;

fn main() {
    let cfg = DetectorConfig::default();
    let (det, params) = Detector::build(&cfg, 1).unwrap();
    println!("params: {}", params.total_params());
    let mut rng = Rng::seed_from(1);
    let mut img = ImageBuf::new(256, 256);
    for v in &mut img.data { *v = rng.uniform() as f32; }
    let imgs: Vec<ImageBuf> = (0..4).map(|_| img.clone()).collect();

    // warmup
    let _ = det.forward_batch(&params, &imgs).unwrap();
    let t = Instant::now();
    let n = 5;
    for _ in 0..n { let _ = det.forward_batch(&params, &imgs).unwrap(); }
    let fwd = t.elapsed().as_secs_f64() / (n * imgs.len()) as f64;
    println!("forward: {:.1} ms/image", fwd * 1e3);

    let fwds = det.forward_batch(&params, &imgs).unwrap();
    let mut r2 = Rng::seed_from(2);
    let t = Instant::now();
    for _ in 0..n {
        use rayon::prelude::*;
        let gsets: Vec<_> = fwds.par_iter().map(|f| {
            let mut g = params.zeros_like();
            let mut tr = Rng::seed_from(3);
            let taps = random_taps(&cfg, &mut tr);
            det.backward_single(&params, &f.trace, &taps, &mut g);
            g
        }).collect();
        std::hint::black_box(&gsets);
    }
    let bwd = t.elapsed().as_secs_f64() / (n * imgs.len()) as f64;
    println!("backward: {:.1} ms/image", bwd * 1e3);
    println!("f+b: {:.1} ms/image", (fwd + bwd) * 1e3);
    let _ = r2.uniform();
}
