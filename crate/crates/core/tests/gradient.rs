use permbasin::net::{build_mlp, build_shallow_cnn, FloatModel, Network, Shape3};
use rand::Rng;

const STEP: f64 = 1e-5;

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7)
}

fn randomise(mut net: Network, seed: u64) -> Network {
    let mut rng = permbasin::seed::rng(seed);
    for l in &mut net.layers {
        if let Some(b) = &mut l.bias {
            b.iter_mut().for_each(|v| *v = rng.random_range(-0.3f32..0.3));
        }
    }
    net
}

fn batch(n: usize, dim: usize, classes: usize, seed: u64) -> (Vec<f32>, Vec<u32>) {
    let mut rng = permbasin::seed::rng(seed);
    let x = (0..n * dim).map(|_| rng.random_range(-1.5f32..1.5)).collect();
    let y = (0..n).map(|_| rng.random_range(0..classes as u32)).collect();
    (x, y)
}

/// Largest relative error over every parameter, or `None` when a ReLU
/// pre-activation sits too close to its kink for finite differences.
fn check(net: &Network, x: &[f32], y: &[u32]) -> Option<f64> {
    let mut model = FloatModel::from_network(net);
    if model.min_abs_preactivation(x) < 1e-3 {
        return None;
    }
    let (_, grad) = model.loss_and_grad(x, y);
    let theta = model.flat_params();
    let mut worst = 0.0f64;
    for k in 0..theta.len() {
        let mut t = theta.clone();
        t[k] = theta[k] + STEP;
        model.set_flat_params(&t).unwrap();
        let up = model.loss(x, y);
        t[k] = theta[k] - STEP;
        model.set_flat_params(&t).unwrap();
        let down = model.loss(x, y);
        worst = worst.max(relative_error(grad[k], (up - down) / (2.0 * STEP)));
    }
    model.set_flat_params(&theta).unwrap();
    Some(worst)
}

#[test]
fn analytic_gradients_match_central_differences() {
    let mut checked = 0;
    let mut seed = 0u64;
    while checked < 20 {
        seed += 1;
        assert!(seed < 500, "too many nets rejected for kinks");
        let (net, dim) = match seed % 4 {
            0 => (build_mlp(1, 5, 4, 3, seed).unwrap(), 4),
            1 => (build_mlp(2, 4, 3, 2, seed).unwrap(), 3),
            2 => (build_mlp(3, 3, 5, 4, seed).unwrap(), 5),
            _ => (build_shallow_cnn(1, 2, Shape3::new(1, 5, 5), 3, seed).unwrap(), 25),
        };
        let net = randomise(net, seed);
        let (x, y) = batch(6, dim, net.num_classes, seed ^ 0xabc);
        if let Some(worst) = check(&net, &x, &y) {
            assert!(worst <= 1e-4, "net {seed}: relative error {worst}");
            checked += 1;
        }
    }
}
