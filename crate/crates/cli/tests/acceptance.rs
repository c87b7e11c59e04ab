//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! `PERMBASIN_ACCEPTANCE=2,7` restricts the run to the listed criteria.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use permbasin::barrier::{indirect_barrier, midpoint_barrier, midpoint_check, BarrierMatrix, Metric};
use permbasin::barrier::{barrier_value, loss_profile};
use permbasin::data::{corrupt_labels, synth_blobs, Dataset, Split};
use permbasin::lab::{member_seed, model_set, theorem1_check, train_member, DatasetSpec, XiRule};
use permbasin::net::{
    build_mlp, build_shallow_cnn, evaluate, forward, ArchKind, FloatModel, Network, Shape3, TrainConfig,
};
use permbasin::perm::{apply, invert, random_perm};
use permbasin::search::{brute_force_match, fd_align, fd_costs, greedy_match, matching_cost, sa_search_reduced, SAConfig};
use rand::Rng;

type Outcome = Result<String, String>;

fn mnist_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist5k")
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Trained networks shared between criteria. Time spent building them is
/// kept in `shared` and reported apart from each criterion's own time.
struct Lab {
    mnist: Option<Dataset>,
    sets: BTreeMap<(usize, usize), Vec<Network>>,
    shared: Duration,
}

impl Lab {
    fn mnist(&mut self) -> Dataset {
        let start = Instant::now();
        let ds = self
            .mnist
            .get_or_insert_with(|| {
                DatasetSpec::mnist(mnist_dir(), Some(4000), Some(1000))
                    .load(None)
                    .expect("MNIST subset under data/mnist5k")
            })
            .clone();
        self.shared += start.elapsed();
        ds
    }

    /// `n` MLPs of the given shape trained on the MNIST subset with the
    /// table's MLP settings (stop at training loss 0.01).
    fn mnist_set(&mut self, width: usize, depth: usize, n: usize) -> Vec<Network> {
        let ds = self.mnist();
        let start = Instant::now();
        let have = self.sets.entry((width, depth)).or_default();
        while have.len() < n {
            let k = have.len();
            let m = train_member(ArchKind::Mlp, width, depth, &ds, &TrainConfig::mlp(true), member_seed(2024, k)).unwrap();
            have.push(m.net);
        }
        let set = have[..n].to_vec();
        self.shared += start.elapsed();
        set
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn mean_pairwise(nets: &[Network], ds: &Dataset) -> f64 {
    let mut vals = Vec::new();
    for i in 0..nets.len() {
        for j in i + 1..nets.len() {
            vals.push(midpoint_barrier(&nets[i], &nets[j], ds, Metric::Loss, Split::Train).unwrap());
        }
    }
    mean(&vals)
}

fn random_inputs(n: usize, dim: usize, seed: u64) -> Vec<f32> {
    let mut rng = permbasin::seed::rng(seed);
    (0..n * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

fn with_random_biases(mut net: Network, seed: u64) -> Network {
    let mut rng = permbasin::seed::rng(seed);
    for l in &mut net.layers {
        if let Some(b) = &mut l.bias {
            b.iter_mut().for_each(|v| *v = rng.random_range(-0.2f32..0.2));
        }
    }
    net
}

fn blobs_net(ds: &Dataset, width: usize, seed: u64, epochs: usize) -> Network {
    let cfg = TrainConfig {
        max_epochs: epochs,
        lr: 0.02,
        stop_loss: f64::INFINITY,
        ..TrainConfig::mlp(false)
    };
    train_member(ArchKind::Mlp, width, 1, ds, &cfg, member_seed(seed, 0)).unwrap().net
}

fn c1_invariance(_: &mut Lab) -> Outcome {
    let mut worst = 0.0f64;
    let mut roundtrip = true;
    for k in 0..50u64 {
        let net = match k % 5 {
            0 => build_mlp(1, 64, 784, 10, k),
            1 => build_mlp(2, 64, 784, 10, k),
            2 => build_mlp(4, 32, 784, 10, k),
            3 => build_shallow_cnn(1, 8, Shape3::new(1, 28, 28), 10, k),
            _ => build_shallow_cnn(2, 8, Shape3::new(1, 28, 28), 10, k),
        }
        .unwrap();
        let net = with_random_biases(net, k);
        let p = random_perm(&net, 100 + k);
        let moved = apply(&net, &p).unwrap();
        let x = random_inputs(100, net.input_numel(), k);
        let (a, b) = (forward(&net, &x).unwrap(), forward(&moved, &x).unwrap());
        worst = a.iter().zip(&b).map(|(u, v)| (u - v).abs()).fold(worst, f64::max);
        roundtrip &= apply(&moved, &invert(&p)).unwrap().layers == net.layers;
    }
    check(worst == 0.0 && roundtrip, format!("max |diff| {worst:e}, round trip exact {roundtrip}"))
}

fn c2_barrier_contract(lab: &mut Lab) -> Outcome {
    let blobs = synth_blobs(400, 5, 3, 2.5, 3).unwrap();
    let nets: Vec<Network> = (0..15).map(|s| blobs_net(&blobs, 8, s, 5)).collect();
    let mut self_zero = true;
    for n in &nets {
        self_zero &= barrier_value(&loss_profile(n, n, &blobs, 11, Metric::Loss, Split::Train).unwrap()) == 0.0;
    }
    let (mut min_b, mut asym) = (f64::INFINITY, 0.0f64);
    let mut count = 0;
    'outer: for i in 0..nets.len() {
        for j in i + 1..nets.len() {
            if count == 100 {
                break 'outer;
            }
            count += 1;
            let ab = barrier_value(&loss_profile(&nets[i], &nets[j], &blobs, 11, Metric::Loss, Split::Train).unwrap());
            let ba = barrier_value(&loss_profile(&nets[j], &nets[i], &blobs, 11, Metric::Loss, Split::Train).unwrap());
            min_b = min_b.min(ab).min(ba);
            asym = asym.max((ab - ba).abs());
        }
    }
    let ds = lab.mnist();
    let mut max_gap = 0.0f64;
    let mut per_width = Vec::new();
    for width in [16, 256] {
        let set = lab.mnist_set(width, 1, 10);
        let worst = (0..10)
            .map(|k| midpoint_check(&set[k], &set[(k + 1) % 10], &ds, 101, Metric::Loss, Split::Train).unwrap().gap)
            .fold(0.0, f64::max);
        max_gap = max_gap.max(worst);
        per_width.push(format!("width {width} {worst:.2e}"));
    }
    check(
        self_zero && min_b >= 0.0 && asym <= 1e-9 && max_gap < 1e-3,
        format!(
            "self barrier zero {self_zero}, min over {count} pairs {min_b:.3e}, max asymmetry {asym:.1e}, \
             max midpoint/grid gap over 20 MNIST pairs {max_gap:.2e} ({})",
            per_width.join(", ")
        ),
    )
}

fn c3_gradients(_: &mut Lab) -> Outcome {
    let mut worst = 0.0f64;
    let (mut checked, mut seed) = (0, 0u64);
    while checked < 20 {
        seed += 1;
        let (net, dim) = match seed % 3 {
            0 => (build_mlp(1, 6, 5, 3, seed).unwrap(), 5),
            1 => (build_mlp(2, 4, 4, 3, seed).unwrap(), 4),
            _ => (build_shallow_cnn(1, 2, Shape3::new(1, 6, 6), 3, seed).unwrap(), 36),
        };
        let mut model = FloatModel::from_network(&with_random_biases(net, seed));
        let x = random_inputs(5, dim, seed);
        let y: Vec<u32> = (0..5).map(|i| (i % 3) as u32).collect();
        if model.min_abs_preactivation(&x) < 1e-3 {
            continue;
        }
        let (_, grad) = model.loss_and_grad(&x, &y);
        let theta = model.flat_params();
        for k in 0..theta.len() {
            let h = 1e-5;
            let mut t = theta.clone();
            t[k] += h;
            model.set_flat_params(&t).unwrap();
            let up = model.loss(&x, &y);
            t[k] = theta[k] - h;
            model.set_flat_params(&t).unwrap();
            let down = model.loss(&x, &y);
            let num = (up - down) / (2.0 * h);
            worst = worst.max((grad[k] - num).abs() / grad[k].abs().max(num.abs()).max(1e-7));
        }
        checked += 1;
    }
    check(worst <= 1e-4, format!("max relative error {worst:.2e} over {checked} nets"))
}

fn c4_dominance(_: &mut Lab) -> Outcome {
    let ds = synth_blobs(400, 5, 3, 2.5, 4).unwrap();
    let cfg = TrainConfig::mlp(false);
    let trained = |seed| train_member(ArchKind::Mlp, 4, 1, &ds, &cfg, member_seed(seed, 0)).unwrap().net;
    let (mut misordered, mut close) = (Vec::new(), 0);
    let mut worst_gap = 0.0f64;
    for k in 0..10u64 {
        let a = trained(2 * k + 100);
        let b = trained(2 * k + 101);
        let mb = |x: &Network| midpoint_barrier(x, &b, &ds, Metric::Loss, Split::Train).unwrap();
        let identity = mb(&a);
        let brute = brute_force_match(&a, &b, &ds, 8, Metric::Loss, Split::Train).unwrap().final_energy;
        let fd = mb(&apply(&a, &fd_align(&a, &b, &ds).unwrap()).unwrap());
        let cfg = SAConfig {
            steps: 5000,
            seed: k,
            ..SAConfig::default()
        };
        let sa = sa_search_reduced(&a, &b, &ds, &cfg).unwrap().final_energy;
        if !(brute <= fd && fd <= identity) {
            misordered.push((k, identity, fd, brute));
        }
        worst_gap = worst_gap.max(sa - brute);
        if sa - brute <= 0.05 {
            close += 1;
        }
    }
    check(
        misordered.is_empty() && close >= 8,
        format!(
            "brute <= fd <= identity on {}/10 (violations as (pair, identity, fd, brute): {misordered:.4?}), \
             annealing within 0.05 on {close}/10 (worst gap {worst_gap:.2e})",
            10 - misordered.len()
        ),
    )
}

fn c5_plant(_: &mut Lab) -> Outcome {
    let ds = synth_blobs(400, 5, 3, 2.5, 5).unwrap();
    let (mut brute_zero, mut fd_zero) = (0, 0);
    let total = 10;
    for k in 0..total {
        let width = 2 + (k as usize % 5);
        let a = blobs_net(&ds, width, 300 + k, 5);
        let planted = random_perm(&a, 400 + k);
        let b = apply(&a, &planted).unwrap();
        let res = brute_force_match(&a, &b, &ds, 8, Metric::Loss, Split::Train).unwrap();
        let found = apply(&a, &res.perms[0]).unwrap();
        let barrier = barrier_value(&loss_profile(&found, &b, &ds, 3, Metric::Loss, Split::Train).unwrap());
        if barrier == 0.0 && res.final_energy <= 0.0 {
            brute_zero += 1;
        }
        let fd = fd_align(&a, &b, &ds).unwrap();
        let costs = fd_costs(&a, &b, &ds, 0).unwrap();
        let g = greedy_match(&costs);
        if fd == planted && matching_cost(&costs, &g) == 0.0 {
            fd_zero += 1;
        }
    }
    check(
        brute_zero == total && fd_zero == total,
        format!("brute-force barrier 0 on {brute_zero}/{total}, zero-cost fd recovery on {fd_zero}/{total}"),
    )
}


fn c6_s_vs_sprime(lab: &mut Lab) -> Outcome {
    let ds = lab.mnist();
    let mut parts = Vec::new();
    let mut ok = true;
    for width in [16, 256] {
        let s = lab.mnist_set(width, 1, 10);
        let sp = model_set(&s[0], 10, permbasin::seed::derive(2024, "s-prime", width as u64)).unwrap();
        let (bs, bsp) = (mean_pairwise(&s, &ds), mean_pairwise(&sp, &ds));
        let rel = (bs - bsp).abs() / bs.abs();
        ok &= rel <= 0.3;
        parts.push(format!("width {width}: S {bs:.4} S' {bsp:.4} rel {rel:.3}"));
    }
    check(ok, parts.join("; "))
}

fn c7_sa_scaling(lab: &mut Lab) -> Outcome {
    let ds = lab.mnist();
    let set = lab.mnist_set(16, 1, 2);
    let mut barriers = Vec::new();
    for steps in [10, 100, 1000, 10_000] {
        let cfg = SAConfig {
            steps,
            seed: 7,
            ..SAConfig::default()
        };
        barriers.push(sa_search_reduced(&set[0], &set[1], &ds, &cfg).unwrap().final_energy);
    }
    let monotone = barriers.windows(2).all(|w| w[1] <= w[0]);
    let ratio = barriers[0] / barriers[3];
    check(
        monotone && ratio >= 1.3,
        format!("barriers {barriers:.4?}, ratio 10/10k {ratio:.3}"),
    )
}

fn c8_trends(lab: &mut Lab) -> Outcome {
    let ds = lab.mnist();
    let mut by_width = Vec::new();
    for width in [8, 64, 1024] {
        let set = lab.mnist_set(width, 1, TREND_NETS);
        by_width.push(mean_pairwise(&set, &ds));
    }
    let peak = by_width.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let deep = mean_pairwise(&lab.mnist_set(1024, 4, TREND_NETS), &ds);
    check(
        by_width[2] < peak && deep > by_width[2],
        format!("widths 8/64/1024: {by_width:.4?}; depth 4 at 1024: {deep:.4}"),
    )
}

const TREND_NETS: usize = 3;

fn c9_theorem(_: &mut Lab) -> Outcome {
    let h_list = [1 << 6, 1 << 8, 1 << 10, 1 << 12, 1 << 14];
    let r = theorem1_check(2, &h_list, 10, 100, XiRule::ProofRate, 11).map_err(|e| e.to_string())?;
    let medians: Vec<f64> = r.series("median").iter().map(|p| p.1).collect();
    let decreasing = medians.windows(2).all(|w| w[1] < w[0]);
    let slope = r.summary["slope"];
    check(
        decreasing && slope < -0.03,
        format!("medians {medians:.4?}, slope {slope:.3} (bound {})", r.summary["predicted_slope"]),
    )
}

fn c10_noisy(lab: &mut Lab) -> Outcome {
    let full = lab.mnist();
    let ds = permbasin::data::subsample(&full, NOISY_TRAIN, 1000, 3).unwrap();
    let cfg = TrainConfig {
        max_epochs: 400,
        ..TrainConfig::mlp(true)
    };
    let mut barriers = Vec::new();
    let mut errors = Vec::new();
    for fraction in [0.0, 0.5] {
        let noisy = corrupt_labels(&ds, fraction, 77).unwrap();
        let nets: Vec<Network> = (0..3)
            .map(|k| train_member(ArchKind::Mlp, 256, 1, &noisy, &cfg, member_seed(99, k)).unwrap().net)
            .collect();
        let worst = nets
            .iter()
            .map(|n| evaluate(n, &noisy, Split::Train).unwrap().error)
            .fold(0.0, f64::max);
        errors.push(worst);
        barriers.push(mean_pairwise(&nets, &noisy));
    }
    check(
        errors.iter().all(|&e| e < 0.02) && barriers[1] >= barriers[0] - 0.02,
        format!("worst train error {errors:.4?}, barriers {barriers:.4?}"),
    )
}

const NOISY_TRAIN: usize = 1000;

fn c11_indirect(_: &mut Lab) -> Outcome {
    let mut mismatches = 0;
    for s in 0..200u64 {
        let mut rng = permbasin::seed::rng(s);
        let mut m = BarrierMatrix::zeros(6);
        for i in 0..6 {
            for j in i + 1..6 {
                m.set_sym(i, j, rng.random_range(0.0..1.0));
            }
        }
        for i in 0..6 {
            for j in 0..6 {
                if i == j {
                    continue;
                }
                let mut oracle = f64::INFINITY;
                for k in (0..6).filter(|&k| k != i && k != j) {
                    oracle = oracle.min(m.get(i, k).max(m.get(k, j)));
                }
                if indirect_barrier(&m, i, j).unwrap() != oracle {
                    mismatches += 1;
                }
            }
        }
    }
    check(mismatches == 0, format!("{mismatches} mismatches over 200 matrices"))
}

fn csv_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "csv") {
            out.insert(p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap());
        }
    }
    out
}

fn c12_determinism(_: &mut Lab) -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let spec = root.path().join("compare.toml");
    std::fs::write(
        &spec,
        format!(
            r#"
kind = "compare"
widths = [16]
n_seeds = 3
search = "sa-reduced"
master_seed = 5

[dataset]
kind = "mnist"
path = "{}"
train = 1000
test = 500

[train]
max_epochs = 3

[sa]
steps = 200
"#,
            mnist_dir().display()
        ),
    )
    .unwrap();
    let mut runs = Vec::new();
    for k in 0..2 {
        let out = root.path().join(format!("run{k}"));
        let status = Command::new(env!("CARGO_BIN_EXE_permbasin"))
            .args(["--threads", "1", "--out-dir"])
            .arg(&out)
            .arg("experiment")
            .arg(&spec)
            .output()
            .unwrap();
        if !status.status.success() {
            return Err(String::from_utf8_lossy(&status.stderr).into_owned());
        }
        runs.push(csv_files(&out));
    }
    check(
        !runs[0].is_empty() && runs[0] == runs[1],
        format!("{} CSV files compared byte for byte", runs[0].len()),
    )
}

struct Criterion {
    id: usize,
    name: &'static str,
    limit: Duration,
    run: fn(&mut Lab) -> Outcome,
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("PERMBASIN_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let min = 60;
    let criteria = [
        Criterion { id: 1, name: "permutation invariance", limit: Duration::from_secs(10), run: c1_invariance },
        Criterion { id: 2, name: "barrier contract", limit: Duration::from_secs(5 * min), run: c2_barrier_contract },
        Criterion { id: 3, name: "gradient check", limit: Duration::from_secs(30), run: c3_gradients },
        Criterion { id: 4, name: "brute-force dominance", limit: Duration::from_secs(10 * min), run: c4_dominance },
        Criterion { id: 5, name: "plant and recover", limit: Duration::from_secs(2 * min), run: c5_plant },
        Criterion { id: 6, name: "S vs S' similarity", limit: Duration::from_secs(60 * min), run: c6_s_vs_sprime },
        Criterion { id: 7, name: "annealing step scaling", limit: Duration::from_secs(30 * min), run: c7_sa_scaling },
        Criterion { id: 8, name: "width and depth trends", limit: Duration::from_secs(60 * min), run: c8_trends },
        Criterion { id: 9, name: "width rate of grid matching", limit: Duration::from_secs(5 * min), run: c9_theorem },
        Criterion { id: 10, name: "noisy labels", limit: Duration::from_secs(30 * min), run: c10_noisy },
        Criterion { id: 11, name: "indirect barrier oracle", limit: Duration::from_secs(1), run: c11_indirect },
        Criterion { id: 12, name: "determinism", limit: Duration::from_secs(10 * min), run: c12_determinism },
    ];
    let mut lab = Lab {
        mnist: None,
        sets: BTreeMap::new(),
        shared: Duration::ZERO,
    };
    let mut failed = 0;
    for c in &criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&c.id)) {
            continue;
        }
        let start = Instant::now();
        let shared_before = lab.shared;
        let outcome = (c.run)(&mut lab);
        let shared = lab.shared - shared_before;
        let took = start.elapsed() - shared;
        let (ok, detail) = match outcome {
            Ok(d) if took <= c.limit => (true, d),
            Ok(d) => (false, format!("{d}; over time limit {:?}", c.limit)),
            Err(d) => (false, d),
        };
        failed += usize::from(!ok);
        println!(
            "{} criterion {:>2} {}: {} [{:.1}s{}]",
            if ok { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            detail,
            took.as_secs_f64(),
            if shared < Duration::from_millis(100) {
                String::new()
            } else {
                format!(", plus {:.1}s training shared networks", shared.as_secs_f64())
            }
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
