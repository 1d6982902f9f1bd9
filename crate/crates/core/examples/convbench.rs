use bmds_core::tensor::{backward, conv3d, Tensor};
use bmds_core::rng::Rng;
use std::time::Instant;

fn t(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::param(shape, (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect()).unwrap()
}

fn main() {
    let mut rng = Rng::new(1);
    let cases: Vec<(&str, Vec<usize>, Vec<usize>, usize)> = vec![
        ("enc1b 16->16 @24", vec![2, 16, 24, 24, 24], vec![16, 16, 3, 3, 3], 1),
        ("dec3a 32->16 @24", vec![2, 32, 24, 24, 24], vec![16, 32, 3, 3, 3], 1),
        ("enc2 32->32 @12", vec![2, 32, 12, 12, 12], vec![32, 32, 3, 3, 3], 1),
        ("dec1a 128->32 @6", vec![2, 128, 6, 6, 6], vec![32, 128, 3, 3, 3], 1),
        ("down1 16->32 s2 @24", vec![2, 16, 24, 24, 24], vec![32, 16, 3, 3, 3], 2),
    ];
    for (name, ish, wsh, stride) in cases {
        let x = t(&ish, &mut rng);
        let w = t(&wsh, &mut rng);
        let b = t(&[wsh[0]], &mut rng);
        let macs = {
            let osp = if stride == 1 { ish[2]*ish[3]*ish[4] } else { (ish[2]/2)*(ish[3]/2)*(ish[4]/2) };
            ish[0] * wsh[0] * wsh[1] * 27 * osp
        };
        let t0 = Instant::now();
        let mut reps = 0;
        while t0.elapsed().as_millis() < 400 {
            let _ = conv3d(&x, &w, Some(&b), stride, 1).unwrap();
            reps += 1;
        }
        let fwd = t0.elapsed().as_secs_f64() / reps as f64;
        let t1 = Instant::now();
        let mut reps2 = 0;
        while t1.elapsed().as_millis() < 600 {
            let out = conv3d(&x, &w, Some(&b), stride, 1).unwrap();
            let loss = out.sum_all();
            backward(&loss).unwrap();
            x.zero_grad(); w.zero_grad(); b.zero_grad();
            reps2 += 1;
        }
        let fb = t1.elapsed().as_secs_f64() / reps2 as f64;
        println!("{name}: fwd {:.1} ms ({:.2} GMAC/s) | fwd+bwd {:.1} ms ({:.2} GMAC/s eq)",
            fwd*1e3, macs as f64 / fwd / 1e9, fb*1e3, 3.0*macs as f64 / fb / 1e9);
    }
}
