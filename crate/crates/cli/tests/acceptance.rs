//! Acceptance suite. Each criterion prints one PASS/FAIL line; the process
//! exits non-zero when any criterion fails.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use support::dd;
use support::oracles::{brute_auc, brute_distance, dd_eta, dd_pearson, dd_theil, random_table};
use tabsynth::codec::{parse_sentence, serialize_row, ParseOptions};
use tabsynth::eval::{correlation_distance, correlation_ratio, dcr, mle_score, pearson, theil_u, DcrOptions};
use tabsynth::partition::PartitionPlan;
use tabsynth::pipeline::{self, BackendSpec, EvalOptions, LoadedTable, TrainOptions};
use tabsynth::predictor::metrics::auc;
use tabsynth::predictor::{relabel, GbdtParams};
use tabsynth::sampler::{generate_rows, temperature_softmax};
use tabsynth::table::{canonical_category, format_number, validate_column_name, ColumnDomain, ColumnSpec, Row};
use tabsynth::tokenizer::{EncodedExample, BOS};
use tabsynth::{
    make_partition_plan, BackendKind, GenConfig, GenContext, LanguageModel, Metadata, ModelArtifact, NGramParams,
    NeuralConfig, Schema, Table, TaskKind, Value,
};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("codec round-trip", ac1_codec_round_trip),
        ("temperature softmax fidelity", ac2_softmax),
        ("prompt-masked loss", ac3_masked_loss),
        ("memorization sanity", ac4_memorization),
        ("marginal fidelity", ac5_marginals),
        ("metric oracles", ac6_metric_oracles),
        ("discrimination ordering", ac7_discrimination_ordering),
        ("MLE relative check", ac8_mle),
        ("partitioning", ac9_partitioning),
        ("ablation arms run", ac10_ablations),
        ("determinism and persistence", ac11_determinism),
    ];
    // Optional filters such as `AC7`; flags from the test runner are ignored.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    // Only the criterion lines go to stdout; panics are reported there too.
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = format!("AC{}", i + 1);
        if !filters.is_empty() && !filters.iter().any(|f| f.eq_ignore_ascii_case(&id)) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("AC{:<2} PASS  {name} ({detail}; {secs:.1}s)", i + 1),
            Err(why) => {
                failed += 1;
                println!("AC{:<2} FAIL  {name}: {why} ({secs:.1}s)", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn within(limit: Duration, start: Instant, what: &str) -> Result<(), String> {
    let t = start.elapsed();
    if t > limit {
        return Err(format!("{what} took {:.1}s, limit {:.0}s", t.as_secs_f64(), limit.as_secs_f64()));
    }
    Ok(())
}

fn counts<'a>(values: impl Iterator<Item = &'a Value>) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for v in values {
        *m.entry(format!("{v:?}")).or_insert(0) += 1;
    }
    m
}

fn ngram_options(order: usize, seed: u64) -> TrainOptions {
    TrainOptions {
        backend: BackendSpec {
            kind: BackendKind::NGram,
            ngram: NGramParams { order, ..NGramParams::default() },
            ..BackendSpec::default()
        },
        seed,
        ..TrainOptions::default()
    }
}

fn finetune(table: &Table, target: &str, opts: &TrainOptions) -> ModelArtifact {
    let lt = LoadedTable {
        name: "fixture".into(),
        table: table.clone(),
        meta: Metadata::new("Synthetic fixture records", target),
    };
    pipeline::finetune(None, &lt, opts).expect("finetune").0
}

// ---------------------------------------------------------------- AC1

fn random_name(rng: &mut ChaCha8Rng) -> String {
    const FIRST: &[u8] = b"abcdefghijklmnopqrstuvwxyz";
    const MID: &[u8] = b"abcdefghijklmnopqrstuvwxyz_ ";
    const LAST: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789";
    let mut s = String::new();
    s.push(FIRST[rng.gen_range(0..FIRST.len())] as char);
    for _ in 0..rng.gen_range(0..=10) {
        s.push(MID[rng.gen_range(0..MID.len())] as char);
    }
    s.push(LAST[rng.gen_range(0..LAST.len())] as char);
    s
}

fn random_categories(rng: &mut ChaCha8Rng) -> Vec<String> {
    const CHARS: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789 ;:.'()-";
    loop {
        let mut c: Vec<String> = (0..rng.gen_range(1..6))
            .map(|_| {
                let raw: String = (0..rng.gen_range(1..=12)).map(|_| CHARS[rng.gen_range(0..CHARS.len())] as char).collect();
                canonical_category(&raw)
            })
            .filter(|s| !s.is_empty())
            .collect();
        c.sort();
        c.dedup();
        if !c.is_empty() {
            return c;
        }
    }
}

fn random_case(rng: &mut ChaCha8Rng) -> (Schema, Row, Vec<usize>, bool, String) {
    let m = rng.gen_range(1..9);
    let mut names: Vec<String> = Vec::new();
    while names.len() < m {
        let n = random_name(rng);
        if validate_column_name(&n).is_ok() && !names.contains(&n) {
            names.push(n);
        }
    }
    let columns: Vec<ColumnSpec> = names
        .into_iter()
        .map(|name| {
            let domain = if rng.gen_bool(0.5) {
                ColumnDomain::Numeric { min: -1e6, max: 1e6, sig_digits: rng.gen_range(1..=8) }
            } else {
                ColumnDomain::Categorical { categories: random_categories(rng) }
            };
            ColumnSpec { name, domain }
        })
        .collect();
    let target = rng.gen_range(0..m);
    let task = match &columns[target].domain {
        ColumnDomain::Numeric { .. } => TaskKind::Regression,
        ColumnDomain::Categorical { categories } if categories.len() == 2 => TaskKind::BinClass,
        ColumnDomain::Categorical { .. } => TaskKind::MultiClass,
    };
    let schema = Schema::new(columns, target, task).expect("valid schema");
    let row: Row = schema
        .columns()
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if i != target && rng.gen_bool(0.2) {
                return Value::Missing;
            }
            match &c.domain {
                ColumnDomain::Numeric { sig_digits, .. } => {
                    Value::Num(format_number(rng.gen_range(-1e6..1e6), *sig_digits).parse().unwrap())
                }
                ColumnDomain::Categorical { categories } => Value::Cat(categories.choose(rng).unwrap().clone()),
            }
        })
        .collect();
    let label_first = rng.gen_bool(0.5);
    let mut perm: Vec<usize> = (0..if label_first { m - 1 } else { m }).collect();
    perm.shuffle(rng);
    let prompt = ["", "Records of a table.", "A dataset about things; with details. "][rng.gen_range(0..3)].to_string();
    (schema, row, perm, label_first, prompt)
}

fn ac1_codec_round_trip() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for k in 0..1000 {
        let (schema, row, perm, label_first, prompt) = random_case(&mut rng);
        let ex = serialize_row(&row, &schema, &prompt, &perm, label_first).map_err(|e| format!("case {k}: {e}"))?;
        let back = parse_sentence(&ex.text, &schema, ex.prompt_char_len, ParseOptions::default())
            .map_err(|e| format!("case {k}: {e:?} in {:?}", ex.text))?;
        ensure!(back == row, "case {k}: {:?} parsed to {back:?}", ex.text);
    }
    within(Duration::from_secs(5), start, "1000 round-trips")?;
    Ok("1000/1000 triples".into())
}

// ---------------------------------------------------------------- AC2

fn ac2_softmax() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let fixed = [0.1, 0.7, 1.0, 10.0];
    let mut worst = 0.0f64;
    for k in 0..10_000 {
        let n = rng.gen_range(1..64);
        let spread = [1.0, 10.0, 100.0][k % 3];
        let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-spread..spread)).collect();
        let t = if k < 4000 { fixed[k % 4] } else { (rng.gen_range(-3.0f64..3.0)).exp() };
        let got = temperature_softmax(&z, t).map_err(|e| e.to_string())?;
        let want = dd::softmax(&z, t);
        for (g, w) in got.iter().zip(&want) {
            worst = worst.max((g - w).abs());
        }
        // Scaling logits and temperature together, and shifting logits.
        let c = rng.gen_range(0.5..4.0);
        let zs: Vec<f64> = z.iter().map(|x| x * c).collect();
        let scaled = temperature_softmax(&zs, t * c).map_err(|e| e.to_string())?;
        let shift = rng.gen_range(-50.0..50.0);
        let zt: Vec<f64> = z.iter().map(|x| x + shift).collect();
        let shifted = temperature_softmax(&zt, t).map_err(|e| e.to_string())?;
        for i in 0..n {
            ensure!((scaled[i] - got[i]).abs() <= 1e-12, "scale invariance broken at vector {k}");
            ensure!((shifted[i] - got[i]).abs() <= 1e-12, "shift invariance broken at vector {k}");
        }
    }
    ensure!(worst <= 1e-12, "max deviation from oracle {worst:e}");
    Ok(format!("10000 vectors, max error {worst:.1e}"))
}

// ---------------------------------------------------------------- AC3

fn ac3_masked_loss() -> Outcome {
    use tabsynth::NeuralModel64;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = |d: usize, ctx: usize, zero: bool, seed: u64| NeuralConfig {
        d_model: d,
        n_layers: 2,
        n_heads: 2,
        ff_mult: 2,
        context: ctx,
        zero_init_output: zero,
        init_seed: seed,
        ..NeuralConfig::default()
    };
    let example = |rng: &mut ChaCha8Rng, v: u32, len: usize, prompt: usize| EncodedExample {
        ids: (0..len).map(|_| rng.gen_range(0..v)).collect(),
        loss_mask: (0..len).map(|i| u8::from(i > prompt)).collect(),
        unk_count: 0,
    };

    for v in [2usize, 13, 257] {
        let m = NeuralModel64::new(cfg(8, 32, true, v as u64), v);
        let l = m.loss(&example(&mut rng, v as u32, 16, 4)).map_err(|e| e.to_string())?;
        ensure!((l - (v as f64).ln()).abs() <= 1e-10, "fresh loss {l} vs ln {v}");
    }

    let m = NeuralModel64::new(cfg(8, 32, false, 4), 11);
    for _ in 0..50 {
        let len = rng.gen_range(6..24);
        let prompt = rng.gen_range(1..len - 2);
        let ex = example(&mut rng, 11, len, prompt);
        let mask = &ex.loss_mask[1..];
        let base = m.loss_with_targets(&ex.ids[..len - 1], &ex.ids[1..], mask).map_err(|e| e.to_string())?;
        for pos in 0..mask.len() {
            if mask[pos] == 1 {
                continue;
            }
            let mut targets = ex.ids[1..].to_vec();
            targets[pos] = (targets[pos] + rng.gen_range(1..11)) % 11;
            let mutated = m.loss_with_targets(&ex.ids[..len - 1], &targets, mask).map_err(|e| e.to_string())?;
            ensure!(mutated.to_bits() == base.to_bits(), "prompt target {pos} moved the loss");
        }
    }

    let mut m = NeuralModel64::new(cfg(4, 8, false, 5), 2);
    for t in m.params_mut().tensors_mut() {
        for x in t.iter_mut() {
            *x += rng.gen_range(-0.3..0.3);
        }
    }
    let ex = example(&mut rng, 2, 9, 2);
    let (_, grad) = m.loss_and_grad(&ex).map_err(|e| e.to_string())?;
    let analytic: Vec<f64> = grad.tensors().into_iter().flatten().copied().collect();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for k in 0..analytic.len() {
        let bump = |m: &mut NeuralModel64, delta: f64| {
            let mut idx = k;
            for t in m.params_mut().tensors_mut() {
                if idx < t.len() {
                    t[idx] += delta;
                    return;
                }
                idx -= t.len();
            }
        };
        let h = 1e-4;
        bump(&mut m, h);
        let up = m.loss(&ex).unwrap();
        bump(&mut m, -2.0 * h);
        let down = m.loss(&ex).unwrap();
        bump(&mut m, h);
        let numeric = (up - down) / (2.0 * h);
        let scale = analytic[k].abs().max(numeric.abs());
        if scale < 1e-7 {
            continue;
        }
        worst = worst.max((analytic[k] - numeric).abs() / scale);
        checked += 1;
    }
    ensure!(worst <= 1e-4, "gradient relative error {worst:e}");
    Ok(format!("{checked} gradient entries, max rel error {worst:.1e}"))
}

// ---------------------------------------------------------------- AC4

fn ac4_memorization() -> Outcome {
    let rows = support::cells(&[["37.5", "engineer", "north", "approved"]]);
    let real = support::table(&["age", "job", "region", "status"], &rows, "status");
    // Order above the sentence length in tokens.
    let model = finetune(&real, "status", &ngram_options(64, 4));
    let cfg = GenConfig { temperature: 0.01, seed: 4, ..GenConfig::default() };
    let g = pipeline::generate(&model, 100, &cfg, None).map_err(|e| e.to_string())?;
    let exact = g.table.rows().iter().filter(|r| *r == &real.rows()[0]).count();
    ensure!(exact == 100, "{exact}/100 exact copies");
    let d = dcr(&g.table, &real, DcrOptions::default()).map_err(|e| e.to_string())?;
    ensure!(d.iter().all(|&x| x == 0.0), "non-zero DCR");
    Ok("100/100 exact, DCR all 0".into())
}

// ---------------------------------------------------------------- AC5

fn ac5_marginals() -> Outcome {
    let start = Instant::now();
    // f: {a: 0.7, b: 0.3}; P(yes | a) = 0.8, P(yes | b) = 0.3.
    let mut rows = Vec::new();
    for (f, n, yes) in [("a", 700, 560), ("b", 300, 90)] {
        for i in 0..n {
            rows.push(vec![f.to_string(), if i < yes { "yes" } else { "no" }.to_string()]);
        }
    }
    let real = support::table(&["f", "y"], &rows, "y");
    // Enough context to see the label while emitting the feature value.
    let model = finetune(&real, "y", &ngram_options(8, 5));
    let cfg = GenConfig { temperature: 1.0, seed: 5, ..GenConfig::default() };
    let g = pipeline::generate(&model, 10_000, &cfg, None).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for c in 0..2 {
        worst = worst.max(support::tv(&counts(real.column(c)), &counts(g.table.column(c))));
    }
    let joint = |t: &Table| {
        let mut m = BTreeMap::new();
        for r in t.rows() {
            *m.entry(format!("{:?}/{:?}", r[0], r[1])).or_insert(0usize) += 1;
        }
        m
    };
    let jtv = support::tv(&joint(&real), &joint(&g.table));
    ensure!(worst <= 0.05, "marginal TV {worst:.4}");
    ensure!(jtv <= 0.08, "joint TV {jtv:.4}");
    within(Duration::from_secs(60), start, "marginal check")?;
    Ok(format!("marginal TV {worst:.4}, joint TV {jtv:.4}"))
}

// ---------------------------------------------------------------- AC6

fn ac6_metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for case in 0..50 {
        let n_real = rng.gen_range(1..=200);
        let n_syn = rng.gen_range(1..=200);
        let both = random_table(&mut rng, n_real + n_syn);
        let real = both.select(&(0..n_real).collect::<Vec<_>>());
        let syn = both.select(&(n_real..n_real + n_syn).collect::<Vec<_>>());
        let got = dcr(&syn, &real, DcrOptions::default()).map_err(|e| e.to_string())?;
        let cols: Vec<usize> = (0..5).collect();
        for (s, g) in syn.rows().iter().zip(&got) {
            let best = real.rows().iter().map(|r| brute_distance(s, r, &cols, &[1.0; 5])).fold(f64::INFINITY, f64::min);
            ensure!(best.to_bits() == g.to_bits(), "DCR case {case}: {g} vs {best}");
        }
    }
    for case in 0..50 {
        let n = rng.gen_range(2..=200);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0.0f64..1.0) * 20.0).round() / 20.0).collect();
        let a = auc(&scores, &labels).map_err(|e| e.to_string())?;
        ensure!(a.to_bits() == brute_auc(&scores, &labels).to_bits(), "AUC case {case}");
    }
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.gen_range(3..300);
        let x: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng) * 2.0 - 1.0).collect();
        let y: Vec<f64> = x.iter().map(|&a| 0.6 * a + normal.sample(&mut rng)).collect();
        let p: f64 = pearson(&x, &y).map_err(|e| e.to_string())?;
        worst = worst.max((p - dd_pearson(&x, &y)).abs());
        let k = rng.gen_range(2..8u8);
        let cx: Vec<u8> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let cy: Vec<u8> = cx.iter().map(|&a| if rng.gen_bool(0.5) { a } else { rng.gen_range(0..k) }).collect();
        if cx.iter().any(|&v| v != cx[0]) {
            let u: f64 = theil_u(&cx, &cy).map_err(|e| e.to_string())?;
            worst = worst.max((u - dd_theil(&cx, &cy)).abs());
        }
        let num: Vec<f64> = cx.iter().map(|&c| f64::from(c) + normal.sample(&mut rng)).collect();
        let eta: f64 = correlation_ratio(&cx, &num).map_err(|e| e.to_string())?;
        worst = worst.max((eta - dd_eta(&cx, &num)).abs());
    }
    ensure!(worst <= 1e-12, "association error {worst:e}");
    for _ in 0..20 {
        let n = rng.gen_range(2..150);
        let t = random_table(&mut rng, n);
        let d = correlation_distance(&t, &t).map_err(|e| e.to_string())?;
        ensure!(d == 0.0, "correlation_distance(T, T) = {d}");
    }
    Ok(format!("DCR/AUC exact on 50+50, association max error {worst:.1e}"))
}

// ---------------------------------------------------------------- AC7

/// Three-component Gaussian mixture with a component-linked colour.
fn mixture_rows(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<String>> {
    let z = Normal::new(0.0, 1.0).unwrap();
    let centres = [(-4.0, 2.0), (0.0, -3.0), (4.0, 3.0)];
    let colours = ["red", "green", "blue"];
    (0..n)
        .map(|_| {
            let k = rng.gen_range(0..3);
            let (cx, cy) = centres[k];
            let colour = if rng.gen_bool(0.9) { colours[k] } else { colours[rng.gen_range(0..3)] };
            let y = if rng.gen_bool(if k == 1 { 0.8 } else { 0.2 }) { "in" } else { "out" };
            vec![
                format!("{:.1}", cx + z.sample(rng)),
                format!("{:.1}", cy + z.sample(rng)),
                colour.to_string(),
                y.to_string(),
            ]
        })
        .collect()
}

fn ac7_discrimination_ordering() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let all = support::table(&["x", "z", "colour", "group"], &mixture_rows(&mut rng, 2000), "group");
    let train = all.select(&(0..1500).collect::<Vec<_>>());
    let test = all.select(&(1500..2000).collect::<Vec<_>>());

    // Order 4 cannot relate columns more than three tokens apart; much past
    // 10 the model starts replaying training rows verbatim.
    let model = finetune(&train, "group", &ngram_options(8, 7));
    let cfg = GenConfig { temperature: 1.0, seed: 7, ..GenConfig::default() };
    let generated = pipeline::generate(&model, train.len(), &cfg, None).map_err(|e| e.to_string())?.table;

    let mut cols: Vec<Vec<Value>> = (0..4).map(|c| train.column(c).cloned().collect()).collect();
    for (c, col) in cols.iter_mut().enumerate() {
        col.shuffle(&mut ChaCha8Rng::seed_from_u64(70 + c as u64));
    }
    let shuffled_rows: Vec<Row> = (0..train.len()).map(|i| cols.iter().map(|c| c[i].clone()).collect()).collect();
    let shuffled = Table::new(train.schema().clone(), shuffled_rows).map_err(|e| e.to_string())?;

    let opts = EvalOptions { seed: 7, ..EvalOptions::default() };
    let mut acc = Vec::new();
    let mut cd = Vec::new();
    for syn in [&train, &generated, &shuffled] {
        let r = pipeline::evaluate(&train, &test, syn, &opts).map_err(|e| e.to_string())?;
        acc.push(r.discriminator.accuracy);
        cd.push(r.correlation_distance);
    }
    let detail = format!("accuracy copy/ngram/shuffled {:.3}/{:.3}/{:.3}, corr-distance {:.3}/{:.3}/{:.3}", acc[0], acc[1], acc[2], cd[0], cd[1], cd[2]);
    ensure!(acc[0] < acc[1] && acc[1] < acc[2], "accuracy out of order: {detail}");
    ensure!(cd[0] < cd[1] && cd[1] < cd[2], "correlation distance out of order: {detail}");
    Ok(detail)
}

// ---------------------------------------------------------------- AC8

fn logistic_rows(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<String>> {
    let z = Normal::new(0.0, 1.0).unwrap();
    (0..n)
        .map(|_| {
            let (a, b): (f64, f64) = (z.sample(rng), z.sample(rng));
            let p = 1.0 / (1.0 + (-(2.0 * a - 1.5 * b)).exp());
            let y = if rng.gen_bool(p) { "yes" } else { "no" };
            vec![format!("{a:.2}"), format!("{b:.2}"), y.to_string()]
        })
        .collect()
}

fn ac8_mle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let train = support::table(&["a", "b", "y"], &logistic_rows(&mut rng, 2000), "y");
    let test = Table::from_raw(train.schema().clone(), &logistic_rows(&mut rng, 1000)).map_err(|e| e.to_string())?;
    let params = GbdtParams { seed: 8, ..GbdtParams::default() };
    let baseline = mle_score(&train, &test, &params).map_err(|e| e.to_string())?;

    let model = finetune(&train, "y", &ngram_options(NGramParams::default().order, 8));
    let cfg = GenConfig { temperature: 1.0, seed: 8, ..GenConfig::default() };
    let syn = pipeline::generate(&model, train.len(), &cfg, None).map_err(|e| e.to_string())?.table;
    let relabeled = relabel(&syn, &train, &params).map_err(|e| e.to_string())?;
    let on = mle_score(&relabeled, &test, &params).map_err(|e| e.to_string())?;
    let off = mle_score(&syn, &test, &params).map_err(|e| e.to_string())?;
    let detail = format!("baseline {baseline:.3}, relabel on {on:.3}, off {off:.3}");
    ensure!(on >= 0.85 * baseline, "relabeled score below 0.85 x baseline: {detail}");
    ensure!(off <= on, "relabeling lowered the score: {detail}");
    within(Duration::from_secs(120), start, "MLE check")?;
    Ok(detail)
}

// ---------------------------------------------------------------- AC9

/// Seven features and a label; single-digit numbers keep digit runs from
/// crossing between columns.
fn wide_rows(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<String>> {
    (0..n)
        .map(|_| {
            let k = rng.gen_range(0..3);
            let pick = |rng: &mut ChaCha8Rng, opts: &[&str], bias: usize| -> String {
                if rng.gen_bool(0.7) { opts[bias % opts.len()] } else { opts[rng.gen_range(0..opts.len())] }.to_string()
            };
            vec![
                format!("{}", (k * 3 + rng.gen_range(0..3)) % 10),
                pick(rng, &["low", "mid", "high"], k),
                pick(rng, &["north", "south", "east", "west"], k),
                format!("{}", rng.gen_range(0..5)),
                pick(rng, &["car", "bus", "bike"], k + 1),
                pick(rng, &["single", "married"], k),
                format!("{}", (k + rng.gen_range(0..2)) * 2),
                pick(rng, &["yes", "no"], k),
            ]
        })
        .collect()
}

fn ac9_partitioning() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let header = ["age", "tier", "region", "kids", "commute", "status", "rooms", "buys"];
    let real = support::table(&header, &wide_rows(&mut rng, 1000), "buys");
    let cfg = GenConfig { temperature: 1.0, seed: 9, ..GenConfig::default() };
    let mut outputs = BTreeMap::new();
    for n in [1usize, 2, 4] {
        let opts = TrainOptions { partitions: n, overlap: 1, ..ngram_options(NGramParams::default().order, 9) };
        let model = finetune(&real, "buys", &opts);
        let plan = model.table.as_ref().unwrap().plan.clone();
        ensure!(plan == make_partition_plan(real.schema(), n, 1).unwrap(), "stored plan differs for n={n}");
        let g = pipeline::generate(&model, 5000, &cfg, None).map_err(|e| e.to_string())?;
        ensure!(g.table.len() == 5000, "n={n}: {} rows", g.table.len());
        ensure!(
            g.table.rows().iter().all(|r| r.len() == header.len() && r.iter().all(|v| !v.is_missing())),
            "n={n}: merged row with a missing column"
        );
        if n == 1 {
            let state = model.table.as_ref().unwrap();
            let ctx = GenContext {
                schema: &state.schema,
                vocab: &model.vocab,
                prompt: state.prompt.text(),
                label_counts: &state.label_counts,
                required: &state.required,
                label_first: state.label_first,
            };
            let plain = generate_rows(&model.backend, &ctx, 5000, &cfg).map_err(|e| e.to_string())?;
            ensure!(plain.table == g.table && plain.stats == g.stats, "n=1 differs from the unpartitioned path");
            ensure!(plan == PartitionPlan { overlap: 1, ..PartitionPlan::single(real.schema()) }, "n=1 plan is not the whole table");
        }
        outputs.insert(n, g.table);
    }
    let mut worst: f64 = 0.0;
    for c in 0..header.len() {
        worst = worst.max(support::tv(&counts(outputs[&1].column(c)), &counts(outputs[&2].column(c))));
    }
    ensure!(worst <= 0.1, "per-column TV between n=2 and n=1 is {worst:.4}");
    Ok(format!("n in {{1,2,4}} complete, n=1 identical, max TV(n=2, n=1) {worst:.4}"))
}

// ---------------------------------------------------------------- CLI helpers

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/smoke")
}

fn tabsynth(args: &[&str]) -> Result<std::process::Output, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_tabsynth"))
        .args(args)
        .env_remove("AIGT_API_KEY")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("tabsynth {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()));
    }
    Ok(out)
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

// ---------------------------------------------------------------- AC10

fn ac10_ablations() -> Outcome {
    let fx = fixture_dir();
    let (train, test, meta) = (fx.join("train.csv"), fx.join("test.csv"), fx.join("meta.json"));
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let arms: [&[&str]; 4] = [&[], &["--no-prompt"], &["--no-label-first"], &["--no-prompt", "--no-label-first"]];
    let mut runs = 0;
    let mut mle = Vec::new();
    for (a, flags) in arms.iter().enumerate() {
        for parts in ["1", "2"] {
            let tag = format!("{a}-{parts}");
            let model = dir.path().join(format!("m{tag}.bin"));
            let syn = dir.path().join(format!("syn{tag}.csv"));
            let report = dir.path().join(format!("r{tag}.json"));
            let mut ft = vec!["finetune", "--train", s(&train), "--metadata", s(&meta), "--out", s(&model), "--partitions", parts, "--seed", "3"];
            ft.extend_from_slice(flags);
            tabsynth(&ft)?;
            tabsynth(&["generate", "--model", s(&model), "-n", "300", "--out", s(&syn), "--seed", "3", "--real-train", s(&train)])?;
            tabsynth(&[
                "evaluate", "--real-train", s(&train), "--real-test", s(&test), "--metadata", s(&meta), "--syn", s(&syn),
                "--report", s(&report), "--seed", "3",
            ])?;
            let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?;
            for key in ["baseline", "mle", "augmentation", "correlation_distance"] {
                ensure!(v[key].as_f64().is_some_and(f64::is_finite), "arm {tag}: report lacks {key}");
            }
            ensure!(v["discriminator"]["accuracy"].as_f64().is_some(), "arm {tag}: no discriminator");
            if parts == "1" {
                mle.push(format!("{:.3}", v["mle"].as_f64().unwrap()));
            }
            runs += 1;
        }
    }
    Ok(format!("{runs} arms reported; mle full/no-prompt/no-label-first/both {}", mle.join("/")))
}

// ---------------------------------------------------------------- AC11

fn run_all(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let fx = fixture_dir();
    let (train, test, meta) = (fx.join("train.csv"), fx.join("test.csv"), fx.join("meta.json"));
    let p = |name: &str| dir.join(name);
    tabsynth(&["pretrain", "--corpus", s(&fx.join("corpus")), "--out", s(&p("base.bin")), "--seed", "5", "--report", s(&p("pre.json"))])?;
    tabsynth(&[
        "finetune", "--train", s(&train), "--metadata", s(&meta), "--model", s(&p("base.bin")), "--out", s(&p("m.bin")),
        "--partitions", "2", "--seed", "5",
    ])?;
    tabsynth(&[
        "finetune", "--train", s(&train), "--metadata", s(&meta), "--backend", "neural", "--steps", "20", "--out",
        s(&p("neural.bin")), "--seed", "5",
    ])?;
    tabsynth(&["generate", "--model", s(&p("m.bin")), "-n", "200", "--out", s(&p("syn.csv")), "--stats", s(&p("stats.json")), "--seed", "5"])?;
    // A barely trained network rarely finishes a row; a partial result
    // (exit code 1) still has to be reproducible.
    tabsynth(&[
        "generate", "--model", s(&p("neural.bin")), "-n", "4", "--out", s(&p("nsyn.csv")), "--seed", "5",
        "--max-attempt-factor", "3", "--max-tokens", "40",
    ])
        .or_else(|e| if e.contains("partial output written") { Ok(Command::new("true").output().unwrap()) } else { Err(e) })?;
    tabsynth(&["relabel", "--syn", s(&p("syn.csv")), "--real-train", s(&train), "--metadata", s(&meta), "--out", s(&p("rel.csv")), "--seed", "5"])?;
    tabsynth(&[
        "evaluate", "--real-train", s(&train), "--real-test", s(&test), "--metadata", s(&meta), "--syn", s(&p("rel.csv")),
        "--report", s(&p("report.json")), "--dcr-hist", s(&p("hist.csv")), "--gen-stats", s(&p("stats.json")), "--seed", "5",
    ])?;
    let plan = tabsynth(&["plan", "--model", s(&p("m.bin")), "--partitions", "2", "--overlap", "1"])?;
    let mut files = vec![("plan stdout".to_string(), plan.stdout)];
    for name in ["base.bin", "pre.json", "m.bin", "neural.bin", "syn.csv", "stats.json", "nsyn.csv", "rel.csv", "report.json", "hist.csv"] {
        files.push((name.to_string(), std::fs::read(p(name)).map_err(|e| format!("{name}: {e}"))?));
    }
    Ok(files)
}

fn ac11_determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = run_all(a.path())?;
    let second = run_all(b.path())?;
    for ((name, x), (_, y)) in first.iter().zip(&second) {
        ensure!(x == y, "{name} differs between runs");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for name in ["m.bin", "neural.bin"] {
        let model = ModelArtifact::load(a.path().join(name)).map_err(|e| e.to_string())?;
        let path = a.path().join(format!("copy-{name}"));
        model.save(&path).map_err(|e| e.to_string())?;
        let back = ModelArtifact::load(&path).map_err(|e| e.to_string())?;
        let v = model.vocab.len() as u32;
        for _ in 0..100 {
            let prefix: Vec<u32> = std::iter::once(BOS).chain((0..rng.gen_range(0..30)).map(|_| rng.gen_range(2..v))).collect();
            let x = model.backend.next_logits(&prefix).map_err(|e| e.to_string())?;
            let y = back.backend.next_logits(&prefix).map_err(|e| e.to_string())?;
            ensure!(x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits()), "{name}: logits changed after reload");
        }
    }
    Ok(format!("{} outputs byte-identical; 2 x 100 prefixes bitwise after reload", first.len()))
}
