use std::time::Instant;
use vgan_core::autograd::Graph;
use vgan_core::gan::*;
use vgan_core::volume::Volume;

fn vol() -> Volume {
    let n = 32 * 16 * 16;
    let data: Vec<f32> = (0..n).map(|i| ((i * 7919) % 1000) as f32 / 1000.0 - 0.5).collect();
    Volume::new((16, 16, 32), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), data).unwrap()
}

#[test]
#[ignore]
fn time_train_step() {
    let cfg = TrainConfig { steps: 10, seed: 1, ..Default::default() };
    let mut state = TrainState::new(GeneratorConfig::default(), DiscriminatorConfig::default(), cfg).unwrap();
    let mr = vol();
    let ct = vol();
    let t0 = Instant::now();
    for _ in 0..10 {
        train_step(&mut state, &mr, &ct).unwrap();
    }
    let dt = t0.elapsed();
    println!("10 steps: {:?} ({:?}/step)", dt, dt / 10);
}

#[test]
#[ignore]
fn time_pieces() {
    let cfg = TrainConfig { steps: 10, seed: 1, ..Default::default() };
    let state = TrainState::new(GeneratorConfig::default(), DiscriminatorConfig::default(), cfg).unwrap();
    let v = vol();
    let (nx, ny, nz) = v.dims();

    // generator forward only
    let t0 = Instant::now();
    for _ in 0..10 {
        let mut g = Graph::new();
        let ids = state.model.g_mr2ct.insert_params(&mut g, false);
        let input = g.constant(&[1, 1, nz, ny, nx], v.data().to_vec());
        let _ = state.model.g_mr2ct.forward(&mut g, &ids, input).unwrap();
    }
    println!("gen forward (no grad): {:?}/iter", t0.elapsed() / 10);

    // generator forward + backward through mean
    let t0 = Instant::now();
    for _ in 0..10 {
        let mut g = Graph::new();
        let ids = state.model.g_mr2ct.insert_params(&mut g, true);
        let input = g.constant(&[1, 1, nz, ny, nx], v.data().to_vec());
        let out = state.model.g_mr2ct.forward(&mut g, &ids, input).unwrap();
        let a = g.abs(out);
        let m = g.mean(a);
        g.backward(m).unwrap();
    }
    println!("gen forward+backward: {:?}/iter", t0.elapsed() / 10);

    // discriminator forward + backward
    let t0 = Instant::now();
    for _ in 0..10 {
        let mut g = Graph::new();
        let ids = state.model.d_ct.insert_params(&mut g, true);
        let input = g.constant(&[1, 1, nz, ny, nx], v.data().to_vec());
        let out = state.model.d_ct.forward(&mut g, &ids, input).unwrap();
        let m = g.mean(out);
        g.backward(m).unwrap();
    }
    println!("disc forward+backward: {:?}/iter", t0.elapsed() / 10);
}
