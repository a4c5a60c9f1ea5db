//! Acceptance run. Prints one PASS/FAIL line per criterion, then fails if any
//! criterion failed. The training-heavy criteria share one four-model
//! comparison on the default benchmark.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use ptrag_core::autodiff::gradcheck::{check, project, DEFAULT_STEP};
use ptrag_core::metrics::{energy_distance, energy_distance_var, wasserstein, MetricsReport};
use ptrag_core::model::{loss, Model, ModelConfig, ModelKind, SelectMode};
use ptrag_core::nn::{
    Binding, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamId, ParamStore, TransformerBlock,
    TransformerGenerator,
};
use ptrag_core::retrieval::PerturbationDb;
use ptrag_core::selector::{gumbel_softmax_select, sample_gumbel, GumbelNoise};
use ptrag_core::stats::{benjamini_hochberg, mann_whitney_u, UMethod};
use ptrag_core::synthdata::{BenchmarkConfig, Dataset, Split};
use ptrag_core::trainer::{
    compare, evaluation_pca, jaccard_analysis, mean_loss, train, CompareReport, TrainConfig,
    TrainOutcome,
};
use ptrag_core::{Result, SplitMix64, Tape, Tensor, Var};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn line(n: usize, name: &str, o: &Outcome) {
    // bypasses the test harness capture so the lines always show
    let mut err = std::io::stderr();
    let tag = if o.pass { "PASS" } else { "FAIL" };
    let _ = writeln!(err, "criterion {n} [{tag}] {name}: {}", o.detail);
}

fn uniform(rng: &mut SplitMix64, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| lo + (hi - lo) * rng.next_f64()).collect()).unwrap()
}

/// Fixed non-trivial weights so every output element reaches the loss.
fn weights_for(len: usize) -> Tensor {
    Tensor::vector((0..len).map(|i| (1.3 * i as f64 + 0.7).sin() + 0.1).collect())
}

fn reduce(tape: &Tape, out: Var) -> Result<Var> {
    let len = tape.value(out).len();
    project(tape, out, &weights_for(len))
}

type Build = Box<dyn Fn(&Tape, &[Var]) -> Result<Var>>;

fn primitive_case(op: usize, rng: &mut SplitMix64) -> (Vec<Tensor>, Build) {
    let r = 1 + rng.below(4);
    let c = 2 + rng.below(3);
    let x = uniform(rng, &[r, c], -1.0, 1.0);
    let y = uniform(rng, &[r, c], -1.0, 1.0);
    match op {
        0 => (vec![x, y], Box::new(|t, v| reduce(t, t.add(v[0], v[1])?))),
        1 => (vec![x, uniform(rng, &[c], -1.0, 1.0)], Box::new(|t, v| reduce(t, t.add(v[0], v[1])?))),
        2 => (vec![x, y], Box::new(|t, v| reduce(t, t.sub(v[0], v[1])?))),
        3 => (vec![x, y], Box::new(|t, v| reduce(t, t.mul(v[0], v[1])?))),
        4 => (vec![x], Box::new(|t, v| reduce(t, t.scale(v[0], -1.7)))),
        5 => {
            let k = 1 + rng.below(4);
            let b = uniform(rng, &[c, k], -1.0, 1.0);
            (vec![x, b], Box::new(|t, v| reduce(t, t.matmul(v[0], v[1])?)))
        }
        6 => (vec![x], Box::new(|t, v| reduce(t, t.transpose(v[0])?))),
        7 => (vec![x, y], Box::new(|t, v| reduce(t, t.concat_cols(&[v[0], v[1]])?))),
        8 => (vec![x], Box::new(move |t, v| reduce(t, t.slice_cols(v[0], 1, c)?))),
        9 => {
            let idx: Vec<usize> = (0..r + 2).map(|_| rng.below(r)).collect();
            (vec![x], Box::new(move |t, v| reduce(t, t.gather_rows(v[0], &idx)?)))
        }
        10 => (vec![x], Box::new(|t, v| reduce(t, t.relu(v[0])))),
        11 => (vec![x], Box::new(|t, v| reduce(t, t.exp(v[0])))),
        12 => (vec![uniform(rng, &[r, c], 0.3, 2.0)], Box::new(|t, v| reduce(t, t.log(v[0])?))),
        13 => (vec![x], Box::new(|t, v| reduce(t, t.softmax_rows(v[0])?))),
        14 => (
            vec![x],
            Box::new(|t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.add(t.sum_all(sq), t.mean_all(v[0]))
            }),
        ),
        15 => {
            let axis = rng.below(2);
            (vec![x], Box::new(move |t, v| reduce(t, t.sum_axis(v[0], axis)?)))
        }
        16 => (vec![x], Box::new(|t, v| reduce(t, t.l2_norm_rows(v[0])?))),
        17 => (vec![x], Box::new(|t, v| reduce(t, t.layer_norm_rows(v[0], 1e-5)?))),
        _ => {
            let m = 1 + rng.below(4);
            let b = uniform(rng, &[m, c], -1.0, 1.0);
            (vec![x, b], Box::new(|t, v| reduce(t, t.pairwise_euclidean(v[0], v[1])?)))
        }
    }
}

/// Worst relative error over the parameters of `store` plus `inputs`.
fn module_err<F>(store: &ParamStore, inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&Tape, &Binding, &[Var]) -> Result<Var>,
{
    let n = store.len();
    let mut all: Vec<Tensor> = store.ids().map(|id| store.get(id).clone()).collect();
    all.extend(inputs.iter().cloned());
    check(&all, DEFAULT_STEP, |tape, vars| {
        let b = Binding::from_vars(vars[..n].to_vec());
        let out = f(tape, &b, &vars[n..])?;
        reduce(tape, out)
    })
    .unwrap()
    .max_rel_err
}

fn toy_config(kind: ModelKind, seed: u64) -> ModelConfig {
    ModelConfig {
        kind,
        d: 4,
        genes: 6,
        embed_dim: 5,
        num_perturbations: 6,
        k: 3,
        tau: 1.0,
        lambda_sparse: 0.1,
        depth: 1,
        heads: 2,
        score_hidden: 8,
        include_bias: 0.0,
        seed,
    }
}

fn toy_db(rng: &mut SplitMix64) -> PerturbationDb {
    let ids = (0..6).map(|i| format!("g{i}")).collect();
    PerturbationDb::build(ids, &uniform(rng, &[6, 5], -1.0, 1.0)).unwrap()
}

/// Full models have entries with gradients near 1e-7, where a 1e-5 step is
/// dominated by roundoff; 1e-4 sits near the optimum of truncation vs
/// roundoff for those entries.
const FULL_MODEL_STEP: f64 = 1e-4;

fn model_err(kind: ModelKind, seed: u64) -> f64 {
    let mut rng = SplitMix64::new(seed);
    let db = toy_db(&mut rng);
    let model = Model::new(toy_config(kind, seed)).unwrap();
    let s = 3;
    let x = uniform(&mut rng, &[s, 6], -3.0, 3.0);
    let target = uniform(&mut rng, &[s, 6], -1.0, 1.0);
    let noise = sample_gumbel(&[s * 3, 2], &mut rng);
    let values: Vec<Tensor> = model.store.ids().map(|id| model.store.get(id).clone()).collect();
    check(&values, FULL_MODEL_STEP, |tape, vars| {
        let p = Binding::from_vars(vars.to_vec());
        let pred = if kind == ModelKind::PtRag {
            model
                .forward_pt_rag(tape, &p, &x, 0, &db, GumbelNoise::Frozen(&noise), SelectMode::Soft)?
                .0
        } else {
            model.forward(tape, &p, &x, 0, &db, GumbelNoise::Zero)?.prediction
        };
        Ok(loss(tape, pred, &target, None, 0.0)?.0)
    })
    .unwrap()
    .max_rel_err
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut cases = 0;
    let mut worst_shallow: f64 = 0.0;
    for case in 0..133u64 {
        let mut rng = SplitMix64::derive(1, case);
        let (inputs, f) = primitive_case(case as usize % 19, &mut rng);
        let r = check(&inputs, DEFAULT_STEP, |t, v| f(t, v)).unwrap();
        worst_shallow = worst_shallow.max(r.max_rel_err);
        cases += 1;
    }
    let mut worst_deep: f64 = 0.0;
    for seed in 0..5u64 {
        let mut rng = SplitMix64::derive(2, seed);
        let mut s = ParamStore::new();
        let lin = Linear::new(&mut s, "lin", 5, 3, &mut rng).unwrap();
        let x = uniform(&mut rng, &[4, 5], -1.0, 1.0);
        worst_shallow = worst_shallow.max(module_err(&s, &[x], |t, b, v| lin.forward(t, b, v[0])));

        let mut s = ParamStore::new();
        let ln = LayerNorm::new(&mut s, "ln", 6).unwrap();
        let x = uniform(&mut rng, &[3, 6], -2.0, 2.0);
        worst_shallow = worst_shallow.max(module_err(&s, &[x], |t, b, v| ln.forward(t, b, v[0])));

        let mut s = ParamStore::new();
        let mlp = Mlp::new(&mut s, "mlp", &[6, 8, 2], false, &mut rng).unwrap();
        let x = uniform(&mut rng, &[4, 6], -1.0, 1.0);
        worst_shallow = worst_shallow.max(module_err(&s, &[x], |t, b, v| mlp.forward(t, b, v[0])));

        let mut s = ParamStore::new();
        let attn = MultiHeadAttention::new(&mut s, "attn", 8, 2, &mut rng).unwrap();
        let q = uniform(&mut rng, &[2, 8], -1.5, 1.5);
        let kv = uniform(&mut rng, &[3, 8], -1.5, 1.5);
        worst_shallow =
            worst_shallow.max(module_err(&s, &[q, kv], |t, b, v| attn.forward(t, b, v[0], v[1])));

        let a = uniform(&mut rng, &[4, 3], -1.0, 1.0);
        let bb = uniform(&mut rng, &[5, 3], -1.0, 1.0);
        let r = check(&[a, bb], DEFAULT_STEP, |t, v| energy_distance_var(t, v[0], v[1])).unwrap();
        worst_shallow = worst_shallow.max(r.max_rel_err);

        let mut s = ParamStore::new();
        let block = TransformerBlock::new(&mut s, "blk", 8, 2, &mut rng).unwrap();
        let x = uniform(&mut rng, &[3, 8], -1.5, 1.5);
        worst_deep = worst_deep.max(module_err(&s, &[x], |t, b, v| block.forward(t, b, v[0])));

        let mut s = ParamStore::new();
        let gen = TransformerGenerator::new(&mut s, "gen", 8, 5, 1, 2, &mut rng).unwrap();
        let z = uniform(&mut rng, &[3, 8], -1.5, 1.5);
        worst_deep = worst_deep.max(module_err(&s, &[z], |t, b, v| gen.forward(t, b, v[0])));
        cases += 7;
    }
    for seed in 0..5u64 {
        for kind in ModelKind::ALL {
            worst_deep = worst_deep.max(model_err(kind, 40 + seed));
            cases += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_shallow <= 1e-5 && worst_deep <= 1e-4 && cases >= 100 && secs < 60.0,
        format!(
            "{cases} cases; primitives and single layers max rel err {worst_shallow:.2e} <= 1e-5; \
             blocks and generator (step 1e-5) and full models (step 1e-4) {worst_deep:.2e} <= 1e-4; {secs:.1}s < 60s"
        ),
    )
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn criterion_2() -> Outcome {
    let mut binary = true;
    let mut equal = true;
    let mut checked = 0;
    for seed in 0..50u64 {
        let mut rng = SplitMix64::derive(3, seed);
        let (s, k) = (1 + rng.below(4), 1 + rng.below(5));
        let logits = uniform(&mut rng, &[s * k, 2], -2.0, 2.0);
        let noise = sample_gumbel(&[s * k, 2], &mut rng);
        let w = uniform(&mut rng, &[s * k, 1], -1.0, 1.0);
        let grad = |straight: bool| {
            let tape = Tape::new();
            let l = tape.param(logits.clone());
            let sel = gumbel_softmax_select(&tape, l, s, 0.5, GumbelNoise::Frozen(&noise)).unwrap();
            let weights = if straight { sel.weights } else { sel.soft };
            let out = tape.sum_all(tape.mul(weights, tape.constant(w.clone())).unwrap());
            let g = tape.backward(out).unwrap();
            (g.wrt(l), sel.mask)
        };
        let (g_st, mask) = grad(true);
        let (g_soft, _) = grad(false);
        binary &= mask.hard.data().iter().all(|&v| v.to_bits() == 0f64.to_bits() || v.to_bits() == 1f64.to_bits());
        equal &= bits(&g_st) == bits(&g_soft);
        checked += 1;
    }
    for seed in 0..10u64 {
        let mut rng = SplitMix64::derive(4, seed);
        let db = toy_db(&mut rng);
        let model = Model::new(toy_config(ModelKind::PtRag, seed)).unwrap();
        let x = uniform(&mut rng, &[3, 6], -1.0, 1.0);
        let target = uniform(&mut rng, &[3, 6], -1.0, 1.0);
        let noise = sample_gumbel(&[9, 2], &mut rng);
        let score_ids: Vec<ParamId> = model
            .score
            .as_ref()
            .unwrap()
            .layers
            .iter()
            .flat_map(|l| [Some(l.weight), l.bias].into_iter().flatten())
            .collect();

        let tape = Tape::new();
        let p = model.store.bind(&tape);
        let (pred, sel, _) = model
            .forward_pt_rag(&tape, &p, &x, 0, &db, GumbelNoise::Frozen(&noise), SelectMode::StraightThrough)
            .unwrap();
        binary &= sel.mask.hard.data().iter().all(|&v| v == 0.0 || v == 1.0);
        let (total, _) = loss(&tape, pred, &target, Some(&sel), 0.1).unwrap();
        let g = tape.backward(total).unwrap();
        let upstream = g.wrt(sel.weights);
        let st: Vec<Tensor> = score_ids.iter().map(|&id| g.wrt(p.var(id))).collect();

        // the soft surrogate network: upstream-weighted soft probabilities
        let tape = Tape::new();
        let p = model.store.bind(&tape);
        let (_, sel, _) = model
            .forward_pt_rag(&tape, &p, &x, 0, &db, GumbelNoise::Frozen(&noise), SelectMode::Soft)
            .unwrap();
        let out = project(&tape, sel.soft, &upstream).unwrap();
        let g = tape.backward(out).unwrap();
        for (id, want) in score_ids.iter().zip(&st) {
            equal &= bits(&g.wrt(p.var(*id))) == bits(want);
        }
        checked += 1;
    }
    outcome(
        binary && equal,
        format!(
            "{checked} frozen-noise cases; hard mask bitwise binary: {binary}; \
             straight-through gradients bitwise equal to soft surrogate: {equal}"
        ),
    )
}

fn criterion_3() -> Outcome {
    let mut exact = 0;
    let mut self_excluded = true;
    for case in 0..200u64 {
        let mut rng = SplitMix64::derive(5, case);
        let p = 2 + rng.below(60);
        let e = 1 + rng.below(16);
        let mut raw = uniform(&mut rng, &[p, e], -1.0, 1.0);
        if case % 4 == 0 && p > 2 {
            // duplicated rows force exact similarity ties
            let (src, dst) = (rng.below(p), rng.below(p));
            let row: Vec<f64> = raw.row(src).to_vec();
            raw.data_mut()[dst * e..(dst + 1) * e].copy_from_slice(&row);
        }
        let ids = (0..p).map(|i| format!("p{i}")).collect();
        let db = PerturbationDb::build(ids, &raw).unwrap();
        let query = rng.below(p);
        let k = 1 + rng.below(p - 1);
        let got = db.top_k(&format!("p{query}"), k).unwrap().candidate_indices;

        // oracle: cosine from raw rows, repeated selection of the best
        // remaining row with the lowest index among equals
        let unit: Vec<Vec<f64>> = (0..p)
            .map(|i| {
                let r = raw.row(i);
                let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                r.iter().map(|x| x / n).collect()
            })
            .collect();
        let sim = |i: usize| -> f64 { unit[query].iter().zip(&unit[i]).map(|(a, b)| a * b).sum() };
        let mut remaining: Vec<usize> = (0..p).filter(|&i| i != query).collect();
        let mut want = Vec::new();
        for _ in 0..k {
            let mut best = 0;
            for j in 1..remaining.len() {
                if sim(remaining[j]) > sim(remaining[best]) {
                    best = j;
                }
            }
            want.push(remaining.remove(best));
        }
        self_excluded &= !got.contains(&query);
        if got == want {
            exact += 1;
        }
    }
    outcome(
        exact == 200 && self_excluded,
        format!("{exact}/200 random databases match the brute-force order exactly; query never returned: {self_excluded}"),
    )
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn criterion_4() -> Outcome {
    let mut w_err: f64 = 0.0;
    for case in 0..60u64 {
        let mut rng = SplitMix64::derive(6, case);
        let n = 1 + rng.below(6);
        let d = 1 + rng.below(4);
        let a = uniform(&mut rng, &[n, d], -2.0, 2.0);
        let b = uniform(&mut rng, &[n, d], -2.0, 2.0);
        for order in [1u8, 2] {
            let best = permutations(n)
                .iter()
                .map(|perm| {
                    perm.iter()
                        .enumerate()
                        .map(|(i, &j)| dist(a.row(i), b.row(j)).powi(order as i32))
                        .sum::<f64>()
                        / n as f64
                })
                .fold(f64::INFINITY, f64::min);
            w_err = w_err.max((wasserstein(&a, &b, order).unwrap() - best).abs());
        }
    }

    let mut e_err: f64 = 0.0;
    for case in 0..60u64 {
        let mut rng = SplitMix64::derive(7, case);
        let (n, m, d) = (2 + rng.below(8), 2 + rng.below(8), 1 + rng.below(5));
        let a = uniform(&mut rng, &[n, d], -2.0, 2.0);
        let b = uniform(&mut rng, &[m, d], -2.0, 2.0);
        let mean_pair = |x: &Tensor, y: &Tensor| {
            let mut s = 0.0;
            for i in 0..x.rows() {
                for j in 0..y.rows() {
                    s += dist(x.row(i), y.row(j));
                }
            }
            s / (x.rows() * y.rows()) as f64
        };
        let want = 2.0 * mean_pair(&a, &b) - mean_pair(&a, &a) - mean_pair(&b, &b);
        e_err = e_err.max((energy_distance(&a, &b).unwrap() - want).abs());
    }

    let mut mw_err: f64 = 0.0;
    let mut mw_exact = true;
    for n in 1..=5usize {
        for m in 1..=5usize {
            // null distribution of U over every choice of ranks for sample a
            let total = n + m;
            let mut null: BTreeMap<usize, f64> = BTreeMap::new();
            let mut arrangements = 0.0;
            for mask in 0u32..(1 << total) {
                if mask.count_ones() as usize != n {
                    continue;
                }
                let rank_sum: usize = (0..total).filter(|i| mask >> i & 1 == 1).map(|i| i + 1).sum();
                *null.entry(rank_sum - n * (n + 1) / 2).or_insert(0.0) += 1.0;
                arrangements += 1.0;
            }
            for rep in 0..3u64 {
                let mut rng = SplitMix64::derive(8, (n * 10 + m) as u64 * 10 + rep);
                let a: Vec<f64> = (0..n).map(|_| rng.next_f64()).collect();
                let b: Vec<f64> = (0..m).map(|_| rng.next_f64()).collect();
                let u = a.iter().map(|x| b.iter().filter(|y| x > *y).count()).sum::<usize>();
                let lower: f64 = null.range(..=u).map(|(_, c)| c).sum();
                let upper: f64 = null.range(u..).map(|(_, c)| c).sum();
                let want = (2.0 * lower.min(upper) / arrangements).min(1.0);
                let got = mann_whitney_u(&a, &b).unwrap();
                mw_exact &= got.method == UMethod::Exact && got.u_statistic == u as f64;
                mw_err = mw_err.max((got.p_two_sided - want).abs());
            }
        }
    }

    let bh = benjamini_hochberg(&[0.005, 0.01, 0.03, 0.04], 0.05).unwrap();
    let bh_err = bh
        .adjusted_p
        .iter()
        .zip([0.02, 0.02, 0.04, 0.04])
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    outcome(
        w_err <= 1e-9 && e_err <= 1e-12 && mw_exact && mw_err <= 1e-12 && bh_err <= 1e-12,
        format!(
            "wasserstein vs enumeration {w_err:.1e} <= 1e-9; energy vs double loop {e_err:.1e} <= 1e-12; \
             exact Mann-Whitney vs enumeration {mw_err:.1e} (exact method used: {mw_exact}); \
             BH worked example {bh_err:.1e}"
        ),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn label_index(report: &CompareReport, label: &str) -> usize {
    report.models.iter().position(|m| m.label == label).unwrap()
}

fn criterion_5(base: &TrainConfig, dataset: &Dataset, db: &PerturbationDb, at_default: &[TrainOutcome]) -> Outcome {
    let k = base.k as f64;
    let mut secs: f64 = at_default.iter().take(3).map(|o| o.record.wall_clock_secs).sum();
    let sparse: Vec<f64> = at_default.iter().take(3).map(|o| o.record.final_sampled_selected_count()).collect();
    let sparse_zero_noise: Vec<f64> = at_default.iter().take(3).map(|o| o.record.final_selected_count()).collect();
    let mut dense = Vec::new();
    let mut dense_zero_noise = Vec::new();
    for seed in 0..3 {
        let cfg = TrainConfig { lambda_sparse: 0.0, seed, ..base.clone() };
        let run = train(&cfg, dataset, db).unwrap();
        secs += run.record.wall_clock_secs;
        dense.push(run.record.final_sampled_selected_count());
        dense_zero_noise.push(run.record.final_selected_count());
    }
    let (d, s) = (median(dense.clone()), median(sparse.clone()));
    outcome(
        d >= 0.9 * k && s <= 0.5 * k && secs <= 600.0,
        format!(
            "median selected per cell (sampled noise, final window) at lambda 0: {d:.2} >= {:.1}; \
             at lambda 0.1: {s:.2} <= {:.1}; seeds {dense:.2?} / {sparse:.2?}; \
             zero-noise validation counts {dense_zero_noise:.2?} / {sparse_zero_noise:.2?}; {secs:.0}s <= 600s",
            0.9 * k,
            0.5 * k
        ),
    )
}

fn criterion_6(report: &CompareReport, secs: f64) -> Outcome {
    let pt = &report.models[label_index(report, "pt_rag")];
    let va = &report.models[label_index(report, "vanilla_rag")];
    let (p_pt, p_va) = (pt.median["pearson_deg"], va.median["pearson_deg"]);
    let sig = |metric: &str| report.entry("vanilla_rag", metric).map(|e| e.p_fdr).unwrap_or(1.0);
    let (sig_p, sig_e) = (sig("pearson_deg"), sig("energy"));
    let energy_better = pt.median["energy"] < va.median["energy"];
    let state = report.models.iter().find(|m| m.label == "state").map(|m| m.median["pearson_deg"]);
    outcome(
        p_pt >= p_va + 0.05 && sig_p <= 0.05 && sig_e <= 0.05 && energy_better && secs <= 1800.0,
        format!(
            "median pearson_deg pt_rag {p_pt:.4} vs vanilla_rag {p_va:.4} (margin 0.05); \
             FDR p pearson_deg {sig_p:.2e}, energy {sig_e:.2e} <= 0.05; \
             energy pt_rag {:.4} < vanilla_rag {:.4}; state {:.4}; {secs:.0}s <= 1800s",
            pt.median["energy"],
            va.median["energy"],
            state.unwrap_or(f64::NAN)
        ),
    )
}

fn criterion_7(dataset: &Dataset, db: &PerturbationDb, pt_runs: &[TrainOutcome]) -> Outcome {
    let mut off = Vec::new();
    let mut repeat = Vec::new();
    let mut diagonal = true;
    let mut chance = 0.0;
    for run in pt_runs {
        let j = jaccard_analysis(&run.model, dataset, db, 3, 4, 0).unwrap();
        for (i, row) in j.matrix.values.iter().enumerate() {
            diagonal &= row[i] == 1.0;
        }
        off.push(j.off_diagonal_mean);
        repeat.push(j.repeat_mean);
        chance = j.chance_level;
    }
    let (o, r) = (median(off.clone()), median(repeat.clone()));
    outcome(
        diagonal && o < r && o < 0.6,
        format!(
            "top-3 of K=8 over {} pt_rag seeds; diagonal exactly 1: {diagonal}; median off-diagonal {o:.3} \
             < repeat-seed {r:.3} and < 0.6 (chance {chance:.3}); per seed {off:.3?} / {repeat:.3?}",
            pt_runs.len()
        ),
    )
}

fn criterion_8(dataset: &Dataset, db: &PerturbationDb) -> Outcome {
    let configs: Vec<TrainConfig> = [ModelKind::PtRag, ModelKind::VanillaRag]
        .iter()
        .map(|&kind| TrainConfig { model_kind: kind, max_steps: 60, validate_every: 30, ..TrainConfig::default() })
        .collect();
    let pca = evaluation_pca(dataset).unwrap();
    let run = || {
        let (report, runs) = compare(&configs, dataset, db, &pca, &[0, 1]).unwrap();
        let mut blobs = vec![serde_json::to_vec_pretty(&report).unwrap()];
        for o in runs.iter().flatten() {
            let mut ck = Vec::new();
            o.model.store.write_checkpoint(&mut ck).unwrap();
            blobs.push(ck);
            blobs.push(serde_json::to_vec_pretty(o.record.final_metrics.as_ref().unwrap()).unwrap());
        }
        blobs
    };
    let (a, b) = (run(), run());
    let same = a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x == y);
    outcome(
        same,
        format!("two compare runs (2 models x 2 seeds): {} artifacts bitwise identical: {same}", a.len()),
    )
}

fn criterion_9(dataset: &Dataset, db: &PerturbationDb, runs: &[&TrainOutcome]) -> Outcome {
    let mut rmse_err: f64 = 0.0;
    let mut negative = 0;
    let mut rows = 0;
    let mut self_energy: f64 = 0.0;
    let mut decomposition: f64 = 0.0;
    for run in runs {
        let metrics: &MetricsReport = run.record.final_metrics.as_ref().unwrap();
        for r in &metrics.rows {
            rows += 1;
            rmse_err = rmse_err.max((r.rmse * r.rmse - r.mse).abs());
            for m in ["mse", "rmse", "mae", "mse_pca50", "w1", "w2", "w2_root", "energy", "mmd"] {
                if r.get(m).unwrap() < 0.0 {
                    negative += 1;
                }
            }
        }
        let lambda = run.record.config.lambda_sparse;
        let mut parts = vec![run.record.initial];
        parts.extend(run.record.validations.iter().map(|v| v.train));
        parts.push(mean_loss(&run.model, dataset, db, &dataset.split_indices(Split::Val)).unwrap());
        for b in parts {
            decomposition = decomposition.max((b.total - (b.dist + lambda * b.sparse)).abs());
        }
    }
    for s in dataset.split(Split::Test) {
        self_energy = self_energy.max(energy_distance(&s.x_pert, &s.x_pert).unwrap().abs());
        self_energy = self_energy.max(energy_distance(&s.x_ctrl, &s.x_ctrl).unwrap().abs());
    }
    outcome(
        rmse_err <= 1e-12 && negative == 0 && self_energy == 0.0 && decomposition <= 1e-12,
        format!(
            "{rows} evaluated populations over {} runs; max |rmse^2 - mse| {rmse_err:.1e}; \
             negative distances {negative}; max energy(a,a) {self_energy:e}; \
             max |total - dist - lambda*sparse| {decomposition:.1e}",
            runs.len()
        ),
    )
}

#[test]
fn acceptance() {
    let mut results = Vec::new();
    let c1 = criterion_1();
    line(1, "gradient correctness", &c1);
    results.push(c1);
    let c2 = criterion_2();
    line(2, "straight-through contract", &c2);
    results.push(c2);
    let c3 = criterion_3();
    line(3, "retrieval oracle", &c3);
    results.push(c3);
    let c4 = criterion_4();
    line(4, "OT and statistics oracles", &c4);
    results.push(c4);

    let (dataset, db) = BenchmarkConfig::default().build().unwrap();
    let pca = evaluation_pca(&dataset).unwrap();
    let base = TrainConfig::default();
    let configs: Vec<TrainConfig> = ModelKind::ALL
        .iter()
        .map(|&kind| TrainConfig { model_kind: kind, ..base.clone() })
        .collect();
    let start = Instant::now();
    let (report, runs) = compare(&configs, &dataset, &db, &pca, &[0, 1, 2, 3, 4]).unwrap();
    let compare_secs = start.elapsed().as_secs_f64();
    let pt_runs = &runs[label_index(&report, "pt_rag")];

    let c5 = criterion_5(&base, &dataset, &db, pt_runs);
    line(5, "sparsity ablation", &c5);
    results.push(c5);
    let c6 = criterion_6(&report, compare_secs);
    line(6, "qualitative ordering", &c6);
    results.push(c6);
    let c7 = criterion_7(&dataset, &db, pt_runs);
    line(7, "Jaccard pipeline", &c7);
    results.push(c7);
    let c8 = criterion_8(&dataset, &db);
    line(8, "determinism", &c8);
    results.push(c8);
    let all_runs: Vec<&TrainOutcome> = runs.iter().flatten().collect();
    let c9 = criterion_9(&dataset, &db, &all_runs);
    line(9, "metric identities", &c9);
    results.push(c9);

    let failed: Vec<usize> = results.iter().enumerate().filter(|(_, o)| !o.pass).map(|(i, _)| i + 1).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
