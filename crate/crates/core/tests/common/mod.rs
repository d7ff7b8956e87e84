//! Independent reference implementations used by the integration and
//! acceptance tests. Nothing here calls into the library's math.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use snapstack::data::{idx_image_bytes, idx_label_bytes, IdxImages};
use snapstack::nn::{backward, hidden_preactivations, Dataset, MlpArchitecture, ParamVector};
use snapstack::schedule::CycleConfig;
use snapstack::snapshots::{store_bytes, Snapshot, SnapshotStore, SnapshotTag};

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
/// Denominator floor for the relative error of near-zero gradients.
pub const FD_ABS_FLOOR: f64 = 1e-6;
/// Rows with a hidden pre-activation this close to the ReLU kink are
/// resampled; the central difference straddles the kink otherwise.
pub const KINK_MARGIN: f64 = 1e-3;

/// Mean NLL written out loop by loop.
pub fn naive_mean_nll(sizes: &[usize], theta: &[f64], x: &[f64], labels: &[usize]) -> f64 {
    let dim = sizes[0];
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let mut a: Vec<f64> = x[r * dim..(r + 1) * dim].to_vec();
        let mut off = 0;
        for l in 0..sizes.len() - 1 {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let w = &theta[off..off + fan_in * fan_out];
            let b = &theta[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            off += fan_in * fan_out + fan_out;
            let mut z = vec![0.0; fan_out];
            for o in 0..fan_out {
                let mut s = b[o];
                for i in 0..fan_in {
                    s += w[o * fan_in + i] * a[i];
                }
                z[o] = s;
            }
            if l + 2 < sizes.len() {
                a = z.iter().map(|&v| v.max(0.0)).collect();
            } else {
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
                total += lse - z[y];
            }
        }
    }
    total / labels.len() as f64
}

pub struct GradInstance {
    pub params: ParamVector,
    pub batch: Dataset,
}

/// A random small network and batch with no pre-activation near a kink.
pub fn grad_instance(seed: u64) -> GradInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let mut sizes = vec![rng.random_range(2..=5)];
        for _ in 0..rng.random_range(1..=2) {
            sizes.push(rng.random_range(2..=6));
        }
        sizes.push(rng.random_range(2..=4));
        let arch = MlpArchitecture::new(sizes.clone()).unwrap();
        let theta: Vec<f64> = (0..arch.param_count())
            .map(|_| 0.7 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let params = ParamVector::new(theta, arch).unwrap();
        let rows = rng.random_range(1..=8);
        let x: Vec<f64> = (0..rows * sizes[0]).map(|_| rng.sample(StandardNormal)).collect();
        let k = *sizes.last().unwrap();
        let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..k)).collect();
        let batch = Dataset::new(x, sizes[0], labels, k).unwrap();
        let near_kink = (0..rows).any(|r| {
            hidden_preactivations(&params, batch.row(r))
                .unwrap()
                .iter()
                .flatten()
                .any(|z| z.abs() < KINK_MARGIN)
        });
        if !near_kink {
            return GradInstance { params, batch };
        }
    }
}

/// Largest per-coordinate relative error between `backward` and a central
/// difference of [`naive_mean_nll`].
pub fn grad_check(inst: &GradInstance) -> f64 {
    let sizes = inst.params.arch().layer_sizes().to_vec();
    let analytic = backward(&inst.params, &inst.batch).unwrap();
    let x = inst.batch.features();
    let y = inst.batch.labels();
    let mut theta = inst.params.values().to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..theta.len() {
        let orig = theta[i];
        theta[i] = orig + FD_STEP;
        let up = naive_mean_nll(&sizes, &theta, x, y);
        theta[i] = orig - FD_STEP;
        let down = naive_mean_nll(&sizes, &theta, x, y);
        theta[i] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = analytic.values()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_ABS_FLOOR);
        worst = worst.max(rel);
    }
    worst
}

/// A store with random gaps and tied validation losses, for selection tests.
pub fn random_store(seed: u64) -> (SnapshotStore, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cycle_len = rng.random_range(4..=25);
    let cycles = rng.random_range(1..=5);
    let total_iters = cycle_len * cycles + rng.random_range(0..cycle_len);
    let cfg = CycleConfig::new(0.001, 0.1, cycle_len, total_iters).unwrap();
    let half_width = rng.random_range(0..cycle_len.min(6));
    let arch = MlpArchitecture::new(vec![1, 2]).unwrap();
    let drop_rate = if rng.random_bool(0.5) { 0.0 } else { 0.05 };
    let mut snapshots = Vec::new();
    for t in 0..total_iters {
        let phase = t % cycle_len;
        let near_min = phase + half_width + 1 >= cycle_len || phase < half_width;
        if !near_min && !rng.random_bool(0.1) {
            continue;
        }
        if rng.random_bool(drop_rate) {
            continue;
        }
        snapshots.push(Snapshot {
            params: ParamVector::zeros(arch.clone()),
            iter: t,
            lr_at_capture: cfg.lr_at(t).unwrap(),
            train_nll: 1.0,
            // few distinct values so ties are common
            val_nll: f64::from(rng.random_range(0..4u8)) * 0.25,
            tag: if phase == cycle_len - 1 { SnapshotTag::Min } else { SnapshotTag::Window },
        });
    }
    let store = SnapshotStore {
        run_id: format!("random-{seed}"),
        arch,
        cfg,
        snapshots,
    };
    (store, half_width)
}

/// Brute force over the raw snapshot list: for every minimum whose window is
/// fully present, the first snapshot holding the window's smallest loss.
pub fn window_oracle(store: &SnapshotStore, s: usize) -> Vec<usize> {
    let l = store.cfg.cycle_len;
    let mut out = Vec::new();
    let mut m = l - 1;
    while m < store.cfg.total_iters {
        let lo = m - s;
        let hi = m + s;
        let window: Vec<&Snapshot> = store
            .snapshots
            .iter()
            .filter(|x| x.iter >= lo && x.iter <= hi)
            .collect();
        if window.len() == 2 * s + 1 {
            let best = window.iter().map(|x| x.val_nll).fold(f64::INFINITY, f64::min);
            let first = window.iter().find(|x| x.val_nll == best).unwrap();
            out.push(first.iter);
        }
        m += l;
    }
    out
}

/// Which parser a corrupt input is fed to.
pub enum Corrupt {
    Store(Vec<u8>),
    IdxImages(Vec<u8>),
    IdxLabels(Vec<u8>),
    IdxPair(Vec<u8>, Vec<u8>),
}

pub struct CorruptCase {
    pub name: &'static str,
    pub input: Corrupt,
}

fn small_store_bytes() -> Vec<u8> {
    let arch = MlpArchitecture::new(vec![2, 3, 2]).unwrap();
    let cfg = CycleConfig::new(0.01, 0.1, 4, 8).unwrap();
    let n = arch.param_count();
    let snapshots = [3usize, 7]
        .iter()
        .map(|&t| Snapshot {
            params: ParamVector::new((0..n).map(|i| i as f64 * 0.1).collect(), arch.clone()).unwrap(),
            iter: t,
            lr_at_capture: 0.01,
            train_nll: 0.5,
            val_nll: 0.6,
            tag: SnapshotTag::Min,
        })
        .collect();
    store_bytes(&SnapshotStore {
        run_id: "corpus".into(),
        arch,
        cfg,
        snapshots,
    })
}

fn small_images() -> IdxImages {
    IdxImages {
        count: 3,
        rows: 2,
        cols: 2,
        pixels: (0..12).map(|v| v * 20).collect(),
    }
}

/// Ten malformed inputs across the store and IDX formats.
pub fn corrupt_corpus() -> Vec<CorruptCase> {
    let store = small_store_bytes();
    let images = idx_image_bytes(&small_images());
    let labels = idx_label_bytes(&[0, 1, 2]);

    let mut bad_magic = store.clone();
    bad_magic[0] = b'X';
    let mut bad_version = store.clone();
    bad_version[8..12].copy_from_slice(&99u32.to_le_bytes());
    let mut trailing = store.clone();
    trailing.extend_from_slice(&[0, 1, 2]);
    // layer-count field claims billions of layers
    let mut huge_count = store.clone();
    let run_id_len = u32::from_le_bytes(store[12..16].try_into().unwrap()) as usize;
    let layers_at = 16 + run_id_len;
    huge_count[layers_at..layers_at + 4].copy_from_slice(&u32::MAX.to_le_bytes());

    let mut images_bad_magic = images.clone();
    images_bad_magic[3] = 0x01;
    let mut labels_bad_magic = labels.clone();
    labels_bad_magic[3] = 0x03;

    vec![
        CorruptCase { name: "empty store", input: Corrupt::Store(Vec::new()) },
        CorruptCase { name: "store bad magic", input: Corrupt::Store(bad_magic) },
        CorruptCase { name: "store future version", input: Corrupt::Store(bad_version) },
        CorruptCase { name: "store cut mid-snapshot", input: Corrupt::Store(store[..store.len() - 13].to_vec()) },
        CorruptCase { name: "store trailing bytes", input: Corrupt::Store(trailing) },
        CorruptCase { name: "store absurd layer count", input: Corrupt::Store(huge_count) },
        CorruptCase { name: "idx images bad magic", input: Corrupt::IdxImages(images_bad_magic) },
        CorruptCase { name: "idx images short payload", input: Corrupt::IdxImages(images[..images.len() - 5].to_vec()) },
        CorruptCase { name: "idx labels bad magic", input: Corrupt::IdxLabels(labels_bad_magic) },
        CorruptCase {
            name: "idx count mismatch",
            input: Corrupt::IdxPair(images, idx_label_bytes(&[0, 1])),
        },
    ]
}

/// Runs the matching parser; `Err` carries the structured error's message.
pub fn feed(input: &Corrupt) -> Result<(), String> {
    use snapstack::data::{dataset_from_idx, parse_idx_images, parse_idx_labels};
    use snapstack::snapshots::store_from_bytes;
    match input {
        Corrupt::Store(b) => store_from_bytes(b).map(drop).map_err(|e| e.to_string()),
        Corrupt::IdxImages(b) => parse_idx_images(b, "images").map(drop).map_err(|e| e.to_string()),
        Corrupt::IdxLabels(b) => parse_idx_labels(b, "labels").map(drop).map_err(|e| e.to_string()),
        Corrupt::IdxPair(i, l) => {
            let images = parse_idx_images(i, "images").map_err(|e| e.to_string())?;
            let labels = parse_idx_labels(l, "labels").map_err(|e| e.to_string())?;
            dataset_from_idx(&images, &labels, None).map(drop).map_err(|e| e.to_string())
        }
    }
}
