// Scratch probe: free-descriptor DVE optimization at several temperatures.
use ndarray::Array2;
use rand::Rng;
use wildreid_core::losskit::{dve_loss_grad, sample_warp, DescriptorGrid, DveBatchInputs};
use wildreid_core::rng::{stream_rng, Stream};

fn renorm(d: &mut Array2<f64>) {
    for mut row in d.rows_mut() {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        row.mapv_inplace(|v| v / n);
    }
}

fn main() {
    let (h, w, dim) = (8usize, 8usize, 16usize);
    for tau in [0.25, 0.125, 0.06, 0.03, 0.015] {
        let mut rng = stream_rng(1, Stream::Test, 0, 0);
        let mut mk = || {
            let mut d = Array2::zeros((h * w, dim));
            for v in d.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            renorm(&mut d);
            d
        };
        let mut phi_x = mk();
        let mut phi_xp = mk();
        let mut phi_aux = mk();
        let field = sample_warp(3, 0, 0, 1.0);
        let grid = field.grid(h, w);
        let lr = 0.5;
        let mut first = 0.0;
        let mut last = 0.0;
        for step in 0..1001 {
            let gx = DescriptorGrid::new(h, w, phi_x.clone()).unwrap();
            let gxp = DescriptorGrid::new(h, w, phi_xp.clone()).unwrap();
            let ga = DescriptorGrid::new(h, w, phi_aux.clone()).unwrap();
            let (out, grads) = dve_loss_grad(&DveBatchInputs {
                phi_x: &gx,
                phi_xprime: &gxp,
                phi_aux: &ga,
                warp_grid: &grid,
                temperature: tau,
            })
            .unwrap();
            if step == 0 {
                first = out.loss;
            }
            last = out.loss;
            phi_x = &phi_x - &(grads.phi_x.mapv(|v| v * lr));
            phi_xp = &phi_xp - &(grads.phi_xprime.mapv(|v| v * lr));
            phi_aux = &phi_aux - &(grads.phi_aux.mapv(|v| v * lr));
            renorm(&mut phi_x);
            renorm(&mut phi_xp);
            renorm(&mut phi_aux);
        }
        println!("tau {tau}: loss {first:.4} -> {last:.4}");
    }
}
