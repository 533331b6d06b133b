//! Acceptance suite: one line per criterion, exit status 1 if any fails.
//!
//! Runs as a plain binary (`harness = false`) so the summary lines are
//! always printed, in order, by `cargo test`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::time::{Duration, Instant};

use csisense::align::{align_streams, micro_align};
use csisense::config::Config;
use csisense::fewshot::{
    episode_gradients, episode_loss, init_net, prototype_loss, trainable_parameters, Episode,
};
use csisense::fusion::{fuse, ClassProbabilities};
use csisense::pipeline::{self, AntennaSelection, RunConfig};
use csisense::prepare::{compact, correlation, svd_thin, CompactFrame, DataFrame};
use csisense::synth::{generate, inject_loss, ActivityClass, EnvironmentParams, EnvironmentSpec};
use csisense::{ArchSpec, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

fn frame(matrix: Matrix, antennas: usize) -> DataFrame {
    DataFrame {
        receiver_id: 0,
        window_index: 0,
        antennas,
        window: matrix.rows() / antennas,
        subcarriers: matrix.cols(),
        matrix,
    }
}

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn dimension_reduction() -> Outcome {
    let (n, w, s) = (4, 300, 242);
    let f = frame(random_matrix(n * w, s, &mut rng(1)), n);
    let input = f.matrix.rows() * f.matrix.cols();
    let feature = correlation(&compact(&f).map_err(|e| e.to_string())?);
    let output = feature.matrix.rows() * feature.matrix.cols();
    let reduction = 100.0 * (1.0 - output as f64 / input as f64);
    let rounded = (reduction * 100.0).round() / 100.0;
    ensure(
        f.matrix.shape() == (1200, 242) && feature.matrix.shape() == (242, 242) && rounded == 79.83,
        format!(
            "{}x{} -> {}x{}, {reduction:.4}% fewer elements",
            1200,
            242,
            feature.size(),
            feature.size()
        ),
    )
}

fn shape_invariance() -> Outcome {
    let mut r = rng(2);
    let mut checked = 0;
    for s in [52, 242] {
        for n in [1, 2, 4] {
            for w in [50, 150, 300] {
                if n * w < s {
                    continue;
                }
                for _ in 0..2 {
                    let f = frame(random_matrix(n * w, s, &mut r), n);
                    let c = compact(&f).map_err(|e| e.to_string())?;
                    let shape = correlation(&c).matrix.shape();
                    if shape != (s, s) || c.zero_padded {
                        return Err(format!("N={n} W={w} S={s} gave {shape:?}"));
                    }
                    checked += 1;
                }
            }
        }
    }
    Ok(format!("{checked} frames, every feature S x S"))
}

/// Singular values from the eigenvalues of the smaller Gram matrix.
fn gram_singular_values(a: &Matrix) -> Vec<f64> {
    let (m, n) = a.shape();
    let am = nalgebra::DMatrix::from_row_slice(m, n, a.as_slice());
    let gram = if m <= n {
        &am * am.transpose()
    } else {
        am.transpose() * &am
    };
    let mut ev: Vec<f64> = nalgebra::SymmetricEigen::new(gram)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

fn svd_oracle() -> Outcome {
    let mut r = rng(3);
    let (mut worst_rel, mut worst_rec) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let (m, n) = (r.gen_range(1..=64), r.gen_range(1..=512));
        let a = random_matrix(m, n, &mut r);
        let svd = svd_thin(&a).map_err(|e| e.to_string())?;
        let oracle = gram_singular_values(&a);
        for (s, o) in svd.sigma.iter().zip(&oracle) {
            worst_rel = worst_rel.max((s - o).abs() / o);
        }
        worst_rec = worst_rec.max(svd.reconstruct().max_abs_diff(&a));
    }
    ensure(
        worst_rel <= 1e-8 && worst_rec <= 1e-8,
        format!("max relative singular value error {worst_rel:.2e}, max reconstruction error {worst_rec:.2e}"),
    )
}

/// Two-pass Pearson correlation; a constant row correlates 0 with others.
fn naive_pcc(m: &Matrix) -> Matrix {
    let (n, len) = m.shape();
    let centered: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mean = m.row(i).iter().sum::<f64>() / len as f64;
            m.row(i).iter().map(|v| v - mean).collect()
        })
        .collect();
    let norms: Vec<f64> = centered
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    Matrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0
        } else if norms[i] == 0.0 || norms[j] == 0.0 {
            0.0
        } else {
            centered[i]
                .iter()
                .zip(&centered[j])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / (norms[i] * norms[j])
        }
    })
}

fn pcc_oracle() -> Outcome {
    let mut r = rng(4);
    let mut worst = 0.0f64;
    for t in 0..200 {
        let s = r.gen_range(4..=64);
        let mut c = if t % 2 == 0 {
            let rows = r.gen_range(s..=3 * s);
            compact(&frame(random_matrix(rows, s, &mut r), 1)).map_err(|e| e.to_string())?
        } else {
            CompactFrame {
                matrix: random_matrix(s, s, &mut r),
                receiver_id: 0,
                window_index: 0,
                zero_padded: false,
            }
        };
        if t % 10 == 1 {
            let row = r.gen_range(0..s);
            c.matrix.row_mut(row).fill(0.25);
        }
        let got = correlation(&c).matrix;
        let want = naive_pcc(&c.matrix);
        worst = worst.max(got.max_abs_diff(&want));
        for i in 0..s {
            if got[(i, i)] != 1.0 {
                return Err(format!("diagonal entry {i} is {}", got[(i, i)]));
            }
            for j in 0..s {
                if got[(i, j)] != got[(j, i)] {
                    return Err(format!("asymmetric at ({i}, {j})"));
                }
            }
        }
    }
    ensure(
        worst <= 1e-10,
        format!("max deviation from the two-pass oracle {worst:.2e}"),
    )
}

fn gradient_check() -> Outcome {
    let arch = ArchSpec {
        blocks: 2,
        filters: 4,
        input_size: 16,
        standardize: false,
    };
    let mut net = init_net(arch, 5).map_err(|e| e.to_string())?;
    let mut r = rng(5);
    let inputs: Vec<Matrix> = (0..8).map(|_| random_matrix(16, 16, &mut r)).collect();
    let refs: Vec<&Matrix> = inputs.iter().collect();
    let episode = Episode {
        way: 2,
        shot: 2,
        queries: 2,
        classes: vec![0, 1],
        support: vec![(0, 0), (1, 0), (2, 1), (3, 1)],
        query: vec![(4, 0), (5, 0), (6, 1), (7, 1)],
    };
    let (_, grads) = episode_gradients(&net, &episode, &refs).map_err(|e| e.to_string())?;
    let tensors = trainable_parameters(&mut net).len();
    if grads.len() != tensors {
        return Err(format!(
            "{} gradient tensors for {tensors} parameter tensors",
            grads.len()
        ));
    }
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut count = 0;
    for (t, g) in grads.iter().enumerate() {
        for (i, analytic) in g.iter().enumerate() {
            let original = trainable_parameters(&mut net)[t][i];
            trainable_parameters(&mut net)[t][i] = original + h;
            let plus = episode_loss(&net, &episode, &refs).map_err(|e| e.to_string())?;
            trainable_parameters(&mut net)[t][i] = original - h;
            let minus = episode_loss(&net, &episode, &refs).map_err(|e| e.to_string())?;
            trainable_parameters(&mut net)[t][i] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2);
            worst = worst.max(rel);
            count += 1;
        }
    }
    ensure(
        worst <= 1e-4,
        format!("{count} parameters in {tensors} tensors, worst relative error {worst:.2e}"),
    )
}

fn loss_identities() -> Outcome {
    let a = [0.3, -1.2, 2.0];
    let b = [1.0, 0.5, -0.7];
    let one =
        prototype_loss(&[&a, &b], &[0, 0], &[&b, &a], &[0, 0], 1).map_err(|e| e.to_string())?;
    // Query at the origin, prototypes at +-e1: equal distances.
    let p0 = [1.0, 0.0];
    let p1 = [-1.0, 0.0];
    let q = [0.0, 0.0];
    let two = prototype_loss(&[&p0, &p1], &[0, 1], &[&q], &[0], 2).map_err(|e| e.to_string())?;
    let err = (two.loss - std::f64::consts::LN_2).abs();
    ensure(
        one.loss == 0.0 && err <= 1e-9,
        format!(
            "K=1 loss {}, equidistant K=2 loss off ln 2 by {err:.1e}",
            one.loss
        ),
    )
}

fn run_config(text: &str, out: &Path) -> Result<RunConfig, String> {
    let mut config = Config::parse(text).map_err(|e| e.to_string())?;
    config.set("run", "out", out.to_string_lossy());
    RunConfig::from_config(&config).map_err(|e| e.to_string())
}

struct Transfer {
    protonet: (f64, f64),
    baseline: (f64, f64),
}

/// Trains on A and evaluates 200 tasks on A (held-out windows) and B.
fn transfer_run() -> Result<Transfer, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = run_config(
        "[run]\nseed = 1\n[synth]\nenvironments = A, B\n[model]\nfilters = 16\n\
         [train]\nepisodes = 200\npretrain_epochs = 15\n[eval]\ntasks = 200\nfusion_csv = false\n",
        dir.path(),
    )?;
    pipeline::cmd_synth(&cfg).map_err(|e| e.to_string())?;
    pipeline::cmd_prepare(&cfg).map_err(|e| e.to_string())?;
    pipeline::cmd_train(&cfg).map_err(|e| e.to_string())?;
    let outcomes = pipeline::cmd_eval(&cfg).map_err(|e| e.to_string())?;
    let find = |t: &str| {
        outcomes
            .iter()
            .find(|o| o.target == t)
            .ok_or(format!("no outcome for {t}"))
    };
    let (a, b) = (find("A")?, find("B")?);
    let base = |o: &pipeline::EvalOutcome| {
        o.baseline
            .as_ref()
            .map(|m| m.accuracy)
            .ok_or("baseline missing".to_string())
    };
    Ok(Transfer {
        protonet: (a.protonet.accuracy, b.protonet.accuracy),
        baseline: (base(a)?, base(b)?),
    })
}

fn in_domain(t: &Result<Transfer, String>) -> Outcome {
    let t = t.as_ref().map_err(Clone::clone)?;
    ensure(
        t.protonet.0 >= 0.90,
        format!("accuracy on A {:.4} (need >= 0.90)", t.protonet.0),
    )
}

fn cross_environment(t: &Result<Transfer, String>) -> Outcome {
    let t = t.as_ref().map_err(Clone::clone)?;
    let drop_p = 100.0 * (t.protonet.0 - t.protonet.1);
    let drop_b = 100.0 * (t.baseline.0 - t.baseline.1);
    ensure(
        drop_p < 15.0 && drop_b > drop_p,
        format!(
            "ProtoNet {:.2}% -> {:.2}% (drop {drop_p:.2}), CNN {:.2}% -> {:.2}% (drop {drop_b:.2})",
            100.0 * t.protonet.0,
            100.0 * t.protonet.1,
            100.0 * t.baseline.0,
            100.0 * t.baseline.1
        ),
    )
}

/// At high SNR every setting saturates near 100% and the ordering is decided
/// by noise, so this runs in a 0 dB environment where diversity matters.
fn diversity_ordering() -> Outcome {
    let labels = ["1rx/1ant", "1rx/4ant", "3rx/1ant", "3rx/4ant"];
    let mut sums = [0.0; 4];
    let seeds = [11u64, 12, 13, 14, 15];
    for seed in seeds {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let cfg = run_config(
            &format!(
                "[run]\nseed = {seed}\n[synth]\nenvironments = A\n[env.A]\nsnr_db = 0\n[model]\nfilters = 8\n\
                 [train]\nepisodes = 150\npretrain_epochs = 10\n[baseline]\nenabled = false\n\
                 [eval]\ntasks = 200\nfusion_csv = false\n"
            ),
            dir.path(),
        )?;
        pipeline::cmd_synth(&cfg).map_err(|e| e.to_string())?;
        let rows = pipeline::cmd_report(&cfg).map_err(|e| e.to_string())?;
        for row in rows {
            let slot = match (row.receivers, row.antennas) {
                (1, AntennaSelection::First(1)) => 0,
                (1, AntennaSelection::All) => 1,
                (3, AntennaSelection::First(1)) => 2,
                (3, AntennaSelection::All) => 3,
                other => return Err(format!("unexpected ablation row {other:?}")),
            };
            sums[slot] += row.protonet.accuracy / seeds.len() as f64;
        }
    }
    let text: Vec<String> = labels
        .iter()
        .zip(&sums)
        .map(|(l, a)| format!("{l} {:.2}%", 100.0 * a))
        .collect();
    ensure(sums.windows(2).all(|w| w[0] <= w[1]), text.join(" -> "))
}

/// First index of the maximum of the receiver-ordered sums.
fn brute_force_fuse(vectors: &[Vec<f64>]) -> usize {
    let k = vectors[0].len();
    let sums: Vec<f64> = (0..k)
        .map(|c| vectors.iter().fold(0.0, |acc, v| acc + v[c]))
        .collect();
    let max = sums.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    sums.iter().position(|s| *s == max).expect("non-empty")
}

fn fusion_correctness() -> Outcome {
    let mut r = rng(10);
    let mut ties = 0;
    for t in 0..10_000 {
        let receivers = r.gen_range(1..=5);
        let k = r.gen_range(2..=8);
        let tie_case = t % 3 == 0;
        let vectors: Vec<Vec<f64>> = (0..receivers)
            .map(|_| {
                let raw: Vec<f64> = if tie_case {
                    (0..k).map(|_| f64::from(r.gen_range(0..3u8))).collect()
                } else {
                    (0..k).map(|_| r.gen_range(0.0..1.0)).collect()
                };
                let sum: f64 = raw.iter().sum();
                if sum == 0.0 {
                    vec![1.0 / k as f64; k]
                } else {
                    raw.iter().map(|v| v / sum).collect()
                }
            })
            .collect();
        let want = brute_force_fuse(&vectors);
        let sums: Vec<f64> = (0..k).map(|c| vectors.iter().map(|v| v[c]).sum()).collect();
        if sums.iter().filter(|s| **s == sums[want]).count() > 1 {
            ties += 1;
        }
        let input: Vec<ClassProbabilities> = vectors
            .into_iter()
            .enumerate()
            .map(|(i, p)| ClassProbabilities::new(i as u8, p))
            .collect();
        let got = fuse(&input).map_err(|e| e.to_string())?;
        if got != want {
            return Err(format!("set {t}: fuse gave {got}, oracle {want}"));
        }
    }
    Ok(format!("10000 sets agree, {ties} with tied maxima"))
}

fn alignment_correctness() -> Outcome {
    let params = EnvironmentParams::default();
    let env = EnvironmentSpec::random("align", 21, &params).map_err(|e| e.to_string())?;
    let activity = &ActivityClass::builtin()[2];
    // 5000 packets always pass through sequence number 4095 -> 0.
    let clean = generate(&env, activity, 50.0, 100.0).map_err(|e| e.to_string())?;
    let per_packet = params.receivers * params.antennas;
    let mut packet_of: HashMap<(u8, u64), usize> = HashMap::new();
    for (i, rec) in clean.records.iter().enumerate() {
        packet_of.insert((rec.receiver_id, rec.timestamp_us), i / per_packet);
    }
    let mut wraps = 0;
    for (p, seed) in [(0.05, 1u64), (0.2, 2), (0.4, 3)] {
        let lossy = inject_loss(&clean, p, seed).map_err(|e| e.to_string())?;
        let streams = lossy.into_streams();
        let kept: BTreeMap<(u8, u8), BTreeSet<usize>> = streams
            .iter()
            .map(|s| {
                let set = s
                    .records
                    .iter()
                    .map(|r| packet_of[&(r.receiver_id, r.timestamp_us)])
                    .collect();
                ((s.receiver_id, s.antenna_id), set)
            })
            .collect();
        let intersect = |filter: &dyn Fn(u8) -> bool| -> Vec<usize> {
            let sets: Vec<&BTreeSet<usize>> = kept
                .iter()
                .filter(|((rx, _), _)| filter(*rx))
                .map(|(_, s)| s)
                .collect();
            sets[0]
                .iter()
                .copied()
                .filter(|i| sets.iter().all(|s| s.contains(i)))
                .collect()
        };
        let packets = |records: &[csisense::CsiRecord]| -> Vec<usize> {
            records
                .iter()
                .map(|r| packet_of[&(r.receiver_id, r.timestamp_us)])
                .collect()
        };
        for rx in 0..params.receivers as u8 {
            let group: Vec<_> = streams
                .iter()
                .filter(|s| s.receiver_id == rx)
                .cloned()
                .collect();
            let block = micro_align(&group).map_err(|e| e.to_string())?;
            let want = intersect(&|r| r == rx);
            for s in &block.per_antenna {
                if packets(&s.records) != want {
                    return Err(format!(
                        "p={p}: micro alignment of rx{rx} differs from the oracle"
                    ));
                }
            }
        }
        let (campaign, _) = align_streams(&streams).map_err(|e| e.to_string())?;
        let want = intersect(&|_| true);
        for block in &campaign.blocks {
            for s in &block.per_antenna {
                if packets(&s.records) != want {
                    return Err(format!(
                        "p={p}: macro alignment of rx{} differs from the oracle",
                        block.receiver_id
                    ));
                }
            }
        }
        wraps += campaign
            .common_seq
            .windows(2)
            .filter(|w| w[1] < w[0])
            .count();
    }
    ensure(
        wraps >= 3,
        format!("3 loss rates, exact intersections, {wraps} wraparounds crossed"),
    )
}

fn files_under(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).expect("readable dir").flatten() {
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path
                    .strip_prefix(root)
                    .expect("under root")
                    .to_string_lossy()
                    .into_owned();
                out.insert(rel, std::fs::read(&path).expect("readable file"));
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let text = "[run]\nseed = 3\n[synth]\nenvironments = A, B\n[model]\nfilters = 8\n\
                [train]\nepisodes = 50\npretrain_epochs = 2\n[baseline]\nepochs = 2\n[eval]\ntasks = 50\n";
    let mut runs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let cfg = run_config(text, dir.path())?;
        pipeline::cmd_synth(&cfg).map_err(|e| e.to_string())?;
        pipeline::cmd_prepare(&cfg).map_err(|e| e.to_string())?;
        pipeline::cmd_train(&cfg).map_err(|e| e.to_string())?;
        pipeline::cmd_eval(&cfg).map_err(|e| e.to_string())?;
        runs.push(files_under(dir.path()));
    }
    let kinds = ["features/", "models/", "reports/"];
    for kind in kinds {
        if !runs[0].keys().any(|k| k.starts_with(kind)) {
            return Err(format!("no {kind} files written"));
        }
    }
    if runs[0].keys().ne(runs[1].keys()) {
        return Err("the two runs wrote different file sets".into());
    }
    let differing: Vec<&String> = runs[0]
        .iter()
        .filter(|(k, v)| runs[1][*k] != **v)
        .map(|(k, _)| k)
        .collect();
    ensure(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} files byte-identical across reruns", runs[0].len())
        } else {
            format!("differing files: {differing:?}")
        },
    )
}

fn main() {
    let mut failed = 0;
    // `spent` is time already used on shared work before `f` runs.
    let mut report =
        |id: usize, name: &str, budget_s: u64, spent: Duration, f: &mut dyn FnMut() -> Outcome| {
            let start = Instant::now();
            let outcome = f();
            let elapsed = spent + start.elapsed();
            let budget = Duration::from_secs(budget_s);
            let (status, detail) = match outcome {
                Ok(d) if elapsed < budget => ("PASS", d),
                Ok(d) => ("FAIL", format!("{d}; over the time budget")),
                Err(d) => ("FAIL", d),
            };
            if status == "FAIL" {
                failed += 1;
            }
            println!(
                "criterion {id:>2} {status} {name}: {detail} [{:.1} s of {budget_s} s]",
                elapsed.as_secs_f64()
            );
        };
    report(
        1,
        "dimension reduction",
        1,
        Duration::ZERO,
        &mut dimension_reduction,
    );
    report(
        2,
        "shape invariance",
        10,
        Duration::ZERO,
        &mut shape_invariance,
    );
    report(3, "SVD oracle", 30, Duration::ZERO, &mut svd_oracle);
    report(4, "PCC oracle", 10, Duration::ZERO, &mut pcc_oracle);
    report(5, "gradient check", 60, Duration::ZERO, &mut gradient_check);
    report(
        6,
        "loss identities",
        1,
        Duration::ZERO,
        &mut loss_identities,
    );
    // Criteria 7 and 8 share one training run.
    let start = Instant::now();
    let transfer = transfer_run();
    let shared = start.elapsed();
    report(7, "in-domain learning", 600, shared, &mut || {
        in_domain(&transfer)
    });
    report(8, "cross-environment", 1200, shared, &mut || {
        cross_environment(&transfer)
    });
    report(
        9,
        "diversity ordering",
        1800,
        Duration::ZERO,
        &mut diversity_ordering,
    );
    report(
        10,
        "fusion correctness",
        5,
        Duration::ZERO,
        &mut fusion_correctness,
    );
    report(
        11,
        "alignment correctness",
        10,
        Duration::ZERO,
        &mut alignment_correctness,
    );
    report(12, "determinism", 600, Duration::ZERO, &mut determinism);
    println!("acceptance: {} of 12 criteria passed", 12 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
