//! Acceptance suite: one test per release criterion, each printing a single
//! PASS/FAIL line (visible with `--nocapture`) and asserting the criterion at
//! its stated tolerance and runtime budget.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use forage::corpus::{tokenize, Corpus, Document};
use forage::datagen::{generate_dataset, export_dataset, verify_min_hops, GenConfig};
use forage::env::oracle_episode;
use forage::eval::{evaluate, EvalPolicy};
use forage::policy::{softmax_from_scores, PolicyParams, FEATURE_DIM, VALUE_FEATURE_DIM};
use forage::reward::{
    efficiency_penalty, exact_match, foraging_objective, information_gain_reward, token_f1,
    total_reward, CoverageCurve, RewardConfig,
};
use forage::train::{
    bc_loss_and_grad, compute_gae, greedy_metrics, ppo_loss_and_grad, train_loop, StepSample,
    TrainConfig,
};
use forage::trajectory::{
    compute_loss_mask, parse_trajectory, serialize_trajectory, Block, MaskOrigin, Trajectory,
};

fn report(criterion: u32, ok: bool, elapsed: Duration, budget: Duration, detail: &str) {
    println!(
        "criterion {} {} — {} ({:.2?} of {:.0?} budget)",
        criterion,
        if ok && elapsed <= budget { "PASS" } else { "FAIL" },
        detail,
        elapsed,
        budget,
    );
    assert!(ok, "criterion {criterion} failed: {detail}");
    assert!(
        elapsed <= budget,
        "criterion {criterion} exceeded budget: {elapsed:.2?} > {budget:.2?}"
    );
}

#[test]
fn criterion_1_reward_component_values() {
    let t0 = Instant::now();
    let cfg = RewardConfig::default();
    let tol = 1e-12;
    let cases = [
        (total_reward(1.0, 1.0, 2, &cfg), 1.2),
        (total_reward(0.0, 0.5, 4, &cfg), 0.09025),
        (total_reward(1.0, 0.0, 5, &cfg), 0.857375),
        (total_reward(1.0, 0.7, 4, &cfg), 1.02885),
        (total_reward(1.0, 1.0, 4, &cfg), 1.083),
        (efficiency_penalty(7, 0.95), 0.95f64.powi(5)),
        (foraging_objective(1.0, 1.0, 4, &cfg), 1.2 * 0.95f64.powi(4)),
    ];
    let mut ok = true;
    for (got, want) in cases {
        ok &= (got - want).abs() <= tol;
    }
    let curve = CoverageCurve::new(vec![1.0 / 3.0, 2.0 / 3.0, 1.0]).unwrap();
    ok &= (information_gain_reward(&curve).unwrap() - 1.0).abs() <= tol;
    ok &= exact_match("The Answer!", &["answer".into()]) == 1.0;
    ok &= exact_match("", &["".into()]) == 1.0;
    ok &= (token_f1("the cat", &["cat".into()]) - 2.0 / 3.0).abs() <= tol;
    ok &= token_f1("", &["".into()]) == 1.0;
    ok &= CoverageCurve::new(vec![0.5, 0.4]).is_err();
    report(
        1,
        ok,
        t0.elapsed(),
        Duration::from_secs(1),
        "reward components match hand-computed values at 1e-12",
    );
}

#[test]
fn criterion_2_gae_matches_double_sum() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=7);
        let rewards: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let gamma = rng.gen_range(0.0..=1.0);
        let lam = rng.gen_range(0.0..=1.0);
        let (adv, ret) = compute_gae(&rewards, &values, gamma, lam);
        for t in 0..n {
            let mut direct = 0.0;
            for l in 0..n - t {
                let next = if t + l + 1 < n { values[t + l + 1] } else { 0.0 };
                let delta = rewards[t + l] + gamma * next - values[t + l];
                direct += (gamma * lam).powi(l as i32) * delta;
            }
            worst = worst.max((adv[t] - direct).abs());
            worst = worst.max((ret[t] - (direct + values[t])).abs());
        }
    }
    report(
        2,
        worst <= 1e-10,
        t0.elapsed(),
        Duration::from_secs(5),
        &format!("GAE equals brute-force double sum on 1000 episodes (worst {worst:.2e})"),
    );
}

/// A batch whose ratios sit at 1.02 — strictly inside the clip band, so the
/// total loss is differentiable at the evaluation point.
fn synthetic_batch(rng: &mut ChaCha8Rng, params: &PolicyParams) -> Vec<StepSample> {
    (0..rng.gen_range(8..=24))
        .map(|_| {
            let n_actions = rng.gen_range(2..=6);
            let feats: Vec<[f64; FEATURE_DIM]> = (0..n_actions)
                .map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0)))
                .collect();
            let chosen = rng.gen_range(0..n_actions);
            let scores: Vec<f64> = feats
                .iter()
                .map(|f| f.iter().zip(&params.theta).map(|(a, b)| a * b).sum())
                .collect();
            let (_, log_probs) = softmax_from_scores(&scores);
            StepSample {
                feats,
                chosen,
                psi: std::array::from_fn(|_| rng.gen_range(-1.0..1.0)),
                old_log_prob: log_probs[chosen] - 1.02f64.ln(),
                advantage: rng.gen_range(-2.0..2.0),
                ret: rng.gen_range(-1.0..1.0),
            }
        })
        .collect()
}

#[test]
fn criterion_3_gradients_match_finite_differences() {
    let t0 = Instant::now();
    let step = 1e-6;
    let rel_tol = 1e-5;
    let (clip, vc, ec) = (0.2, 0.5, 0.01);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let mut params = PolicyParams::default();
        for t in params.theta.iter_mut() {
            *t = rng.gen_range(-0.5..0.5);
        }
        for w in params.w.iter_mut() {
            *w = rng.gen_range(-0.5..0.5);
        }
        let batch = synthetic_batch(&mut rng, &params);
        let (_, g_theta, g_w) = ppo_loss_and_grad(&params, &batch, clip, vc, ec);
        let (_, g_bc) = bc_loss_and_grad(&params, &batch);
        for i in 0..FEATURE_DIM {
            let mut lo = params.clone();
            let mut hi = params.clone();
            lo.theta[i] -= step;
            hi.theta[i] += step;
            let fd = (ppo_loss_and_grad(&hi, &batch, clip, vc, ec).0.total
                - ppo_loss_and_grad(&lo, &batch, clip, vc, ec).0.total)
                / (2.0 * step);
            worst = worst.max((fd - g_theta[i]).abs() / fd.abs().max(g_theta[i].abs()).max(1.0));
            let fd_bc = (bc_loss_and_grad(&hi, &batch).0 - bc_loss_and_grad(&lo, &batch).0)
                / (2.0 * step);
            worst = worst.max((fd_bc - g_bc[i]).abs() / fd_bc.abs().max(g_bc[i].abs()).max(1.0));
        }
        for i in 0..VALUE_FEATURE_DIM {
            let mut lo = params.clone();
            let mut hi = params.clone();
            lo.w[i] -= step;
            hi.w[i] += step;
            let fd = (ppo_loss_and_grad(&hi, &batch, clip, vc, ec).0.total
                - ppo_loss_and_grad(&lo, &batch, clip, vc, ec).0.total)
                / (2.0 * step);
            worst = worst.max((fd - g_w[i]).abs() / fd.abs().max(g_w[i].abs()).max(1.0));
        }
    }
    report(
        3,
        worst <= rel_tol,
        t0.elapsed(),
        Duration::from_secs(30),
        &format!("policy/value/cloning gradients match central differences on 100 batches (worst rel {worst:.2e})"),
    );
}

/// Independent Okapi BM25 implementation used as the retrieval oracle.
fn brute_force_bm25(docs: &[Document], query: &str, k: usize) -> Vec<(String, f64)> {
    let (k1, b) = (1.2, 0.75);
    let n = docs.len() as f64;
    let mut df: BTreeMap<String, f64> = BTreeMap::new();
    for d in docs {
        let mut seen: Vec<String> = tokenize(&d.body);
        seen.sort();
        seen.dedup();
        for t in seen {
            *df.entry(t).or_insert(0.0) += 1.0;
        }
    }
    let avg = docs.iter().map(|d| tokenize(&d.body).len() as f64).sum::<f64>() / n;
    let mut q_terms = tokenize(query);
    q_terms.sort();
    q_terms.dedup();
    let mut scored: Vec<(String, f64)> = docs
        .iter()
        .map(|d| {
            let toks = tokenize(&d.body);
            let len = toks.len() as f64;
            let score = q_terms
                .iter()
                .map(|t| {
                    let tf = toks.iter().filter(|x| *x == t).count() as f64;
                    if tf == 0.0 {
                        return 0.0;
                    }
                    let nt = df.get(t).copied().unwrap_or(0.0);
                    let idf = ((n - nt + 0.5) / (nt + 0.5) + 1.0).ln();
                    idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * len / avg))
                })
                .sum::<f64>();
            (d.doc_id.clone(), score)
        })
        .filter(|(_, s)| *s > 0.0)
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

#[test]
fn criterion_4_retrieval_matches_brute_force() {
    let t0 = Instant::now();
    let set = generate_dataset(&GenConfig::default()).unwrap();
    let docs: Vec<Document> = set.documents.iter().take(200).cloned().collect();
    let corpus = Corpus::build_index(&docs).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut queries: Vec<String> = Vec::new();
    for _ in 0..95 {
        let doc = &docs[rng.gen_range(0..docs.len())];
        let toks = tokenize(&doc.body);
        let n = rng.gen_range(1..=3.min(toks.len()));
        let picked: Vec<String> = (0..n).map(|_| toks[rng.gen_range(0..toks.len())].clone()).collect();
        queries.push(picked.join(" "));
    }
    queries.push(String::new());
    queries.push("zzzunknown token".into());
    queries.push("verified fact noted".into());
    queries.push("archive".into());
    queries.push("the the the".into());
    let mut ok = true;
    for q in &queries {
        for k in [1, 3, 10] {
            let got = corpus.retrieve(q, k);
            let want = brute_force_bm25(&docs, q, k);
            ok &= got.ranked.len() == want.len();
            for ((gid, gs), (wid, ws)) in got.ranked.iter().zip(&want) {
                ok &= gid == wid && (gs - ws).abs() <= 1e-9;
            }
        }
    }
    report(
        4,
        ok,
        t0.elapsed(),
        Duration::from_secs(5),
        &format!("rankings and scores match an independent Okapi BM25 oracle on {} docs x {} queries", docs.len(), queries.len()),
    );
}

fn random_text(rng: &mut ChaCha8Rng) -> String {
    let words = ["alpha", "beta", "gamma", "delta", "epsilon", "zeta", "x9", "q40", "k7"];
    let n = rng.gen_range(1..=5);
    (0..n).map(|_| words[rng.gen_range(0..words.len())]).collect::<Vec<_>>().join(" ")
}

fn random_trajectory(rng: &mut ChaCha8Rng) -> Trajectory {
    let mut blocks = Vec::new();
    for _ in 0..rng.gen_range(0..=5) {
        if rng.gen_bool(0.5) {
            blocks.push(Block::think(random_text(rng)));
        }
        blocks.push(Block::search(random_text(rng)));
        let n_docs = rng.gen_range(1..=3);
        let docs: Vec<(String, String)> = (0..n_docs)
            .map(|i| (format!("d{:03}{}", rng.gen_range(0..999), i), random_text(rng)))
            .collect();
        blocks.push(Block::info(docs.iter().map(|(a, b)| (a.as_str(), b.as_str()))));
    }
    if rng.gen_bool(0.5) {
        blocks.push(Block::think(random_text(rng)));
    }
    blocks.push(Block::answer(random_text(rng)));
    Trajectory::new(random_text(rng), blocks)
}

#[test]
fn criterion_5_trajectory_round_trip_fuzz() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut ok = true;
    for _ in 0..10_000 {
        let traj = random_trajectory(&mut rng);
        let text = serialize_trajectory(&traj).unwrap();
        let parsed = parse_trajectory(&text).unwrap();
        ok &= serialize_trajectory(&parsed).unwrap() == text;
        ok &= parsed.blocks.len() == traj.blocks.len();
        let spans = compute_loss_mask(&traj).unwrap();
        ok &= spans.first().map(|s| s.start) == Some(0);
        ok &= spans.last().map(|s| s.end) == Some(text.len());
        for pair in spans.windows(2) {
            ok &= pair[0].end == pair[1].start;
        }
        for s in &spans {
            ok &= s.start < s.end;
        }
        let injected = spans.iter().filter(|s| s.origin == MaskOrigin::Injected).count();
        let infos = text.matches("<info>").count();
        ok &= injected == infos;
        for s in spans.iter().filter(|s| s.origin == MaskOrigin::Injected) {
            ok &= text[s.start..s.end].contains("<info>") && text[s.start..s.end].ends_with("</info>");
        }
        if !ok {
            break;
        }
    }
    report(
        5,
        ok,
        t0.elapsed(),
        Duration::from_secs(10),
        "10,000 random trajectories: parse∘serialize identity and mask spans partition the text",
    );
}

#[test]
fn criterion_6_dataset_validity() {
    let t0 = Instant::now();
    let cfg = GenConfig::default();
    assert_eq!((cfg.n_tasks, cfg.hops, cfg.distractors_per_task, cfg.seed), (200, 3, 5, 42));
    let set = generate_dataset(&cfg).unwrap();
    let mut ok = set.tasks.len() == 200;
    for task in &set.tasks {
        ok &= verify_min_hops(task, &set.corpus).unwrap();
        let record = oracle_episode(task, &set.corpus, &Default::default()).unwrap();
        ok &= record.reward.outcome == 1.0;
        ok &= record.reward.curve.final_coverage() == 1.0;
    }
    let one_shot = evaluate(&EvalPolicy::OneShotRag, &set.tasks, &set.corpus, &Default::default(), cfg.seed).unwrap();
    ok &= one_shot.mean_em <= 0.05;
    report(
        6,
        ok,
        t0.elapsed(),
        Duration::from_secs(60),
        &format!(
            "200 tasks: min-hop verification 100%, oracle EM/coverage 1.0, one-shot RAG EM {:.4} ≤ 0.05",
            one_shot.mean_em
        ),
    );
}

#[test]
fn criterion_7_end_to_end_learning() {
    let t0 = Instant::now();
    let set = generate_dataset(&GenConfig::default()).unwrap();
    let cfg = TrainConfig::default();
    assert_eq!((cfg.iters, cfg.warm_start_episodes, cfg.seed), (300, 50, 42));
    assert_eq!(
        (cfg.env.reward.alpha, cfg.env.reward.beta, cfg.env.top_k, cfg.env.max_steps),
        (0.2, 0.95, 3, 6)
    );
    let (train_tasks, heldout) = set.tasks.split_at(set.tasks.len() - 50);
    let (params, rep) = train_loop(train_tasks, heldout, &set.corpus, &cfg).unwrap();
    let (em, mean_t, cov) = greedy_metrics(&params, heldout, &set.corpus, &cfg.env).unwrap();
    let ok = rep.rows.len() == 300 && em >= 0.90 && mean_t <= 4.5 && cov >= 0.95;
    report(
        7,
        ok,
        t0.elapsed(),
        Duration::from_secs(300),
        &format!("held-out EM {em:.4} ≥ 0.90, mean T {mean_t:.3} ≤ 4.5, coverage {cov:.4} ≥ 0.95"),
    );
}

fn median(mut xs: Vec<usize>) -> usize {
    xs.sort_unstable();
    xs[xs.len() / 2]
}

#[test]
fn criterion_8_ablation_directions() {
    let t0 = Instant::now();
    let set = generate_dataset(&GenConfig::default()).unwrap();
    let (train_tasks, heldout) = set.tasks.split_at(set.tasks.len() - 50);
    let base = TrainConfig::default();
    let to_em = |cfg: &TrainConfig| {
        let (_, rep) = train_loop(train_tasks, heldout, &set.corpus, cfg).unwrap();
        (
            rep.first_iteration_reaching_em(0.8).unwrap_or(cfg.iters + 1),
            rep.convergence_mean_t(25),
        )
    };
    let (mut d_it, mut a_it, mut c_it) = (Vec::new(), Vec::new(), Vec::new());
    let (mut d_t, mut b_t) = (Vec::new(), Vec::new());
    for seed in 1..=5 {
        let default_arm = TrainConfig { seed, ..base.clone() };
        let (it, t) = to_em(&default_arm);
        d_it.push(it);
        d_t.push(t);

        let mut no_gain = TrainConfig { seed, ..base.clone() };
        no_gain.env.reward.alpha = 0.0;
        a_it.push(to_em(&no_gain).0);

        let mut no_penalty = TrainConfig { seed, ..base.clone() };
        no_penalty.env.reward.beta = 1.0;
        b_t.push(to_em(&no_penalty).1);

        let no_bc = TrainConfig { seed, warm_start: false, ..base.clone() };
        c_it.push(to_em(&no_bc).0);
    }
    let (md, ma, mc) = (median(d_it.clone()), median(a_it.clone()), median(c_it.clone()));
    let mean_d = d_t.iter().sum::<f64>() / 5.0;
    let mean_b = b_t.iter().sum::<f64>() / 5.0;
    let ok = ma > md && mean_b >= mean_d && mc > md;
    report(
        8,
        ok,
        t0.elapsed(),
        Duration::from_secs(1800),
        &format!(
            "median iters to EM 0.8: no-gain {ma} > default {md}; convergence T: no-penalty {mean_b:.3} ≥ default {mean_d:.3}; no-warm-start {mc} > default {md}"
        ),
    );
}

#[test]
fn criterion_9_determinism() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg = GenConfig::default();
    let run = |sub: &str| {
        let set = generate_dataset(&cfg).unwrap();
        let (cp, tp) = export_dataset(&set.tasks, &set.documents, &dir.path().join(sub)).unwrap();
        let (train_tasks, heldout) = set.tasks.split_at(set.tasks.len() - 50);
        let (_, rep) = train_loop(train_tasks, heldout, &set.corpus, &TrainConfig::default()).unwrap();
        (
            std::fs::read(cp).unwrap(),
            std::fs::read(tp).unwrap(),
            rep.to_csv(),
        )
    };
    let (c1, t1, r1) = run("a");
    let (c2, t2, r2) = run("b");
    let ok = c1 == c2 && t1 == t2 && r1 == r2;
    report(
        9,
        ok,
        t0.elapsed(),
        Duration::from_secs(900),
        "dataset files and training report CSV are byte-identical across re-runs",
    );
}
