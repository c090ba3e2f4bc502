use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use slac_core::actor_critic::CriticNets;
use slac_core::autograd::{adam_step_group, Param, Tape};
use slac_core::nn::Bind;
use slac_core::oracle::{soft_value, tabular_soft_value_iteration, TabularMdp};

fn ring_mdp() -> TabularMdp {
    let advance = |s: usize| (s + 1) % 4;
    let mut transition = vec![vec![vec![0.0; 4]; 2]; 4];
    for s in 0..4 {
        transition[s][0][s] += 0.9;
        transition[s][0][advance(s)] += 0.1;
        transition[s][1][s] += 0.2;
        transition[s][1][advance(s)] += 0.8;
    }
    TabularMdp {
        n_states: 4,
        n_actions: 2,
        reward: vec![
            vec![0.0, 0.2],
            vec![0.5, -0.1],
            vec![-0.3, 0.8],
            vec![1.0, 0.0],
        ],
        transition,
    }
}

fn one_hot(s: usize) -> [f64; 4] {
    let mut v = [0.0; 4];
    v[s] = 1.0;
    v
}

const ACTION_VALUES: [f64; 2] = [-1.0, 1.0];

/// Train twin critics by soft Bellman regression with exact soft-value
/// targets over the discrete action set, using the repo's nets/Adam/EMA.
fn train_twin_critics(
    mdp: &TabularMdp,
    alpha: f64,
    gamma: f64,
    updates: usize,
    nu: f64,
    lr: f64,
    seed: u64,
) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let critics = CriticNets::new(&mut rng, 4, 1, &[64, 64]);
    let params: Vec<Param> = critics.params().iter().cloned().collect();

    // All 8 (s, a) pairs as one fixed batch.
    let mut inputs = Vec::new();
    let mut act_in = Vec::new();
    for s in 0..4 {
        for a in 0..2 {
            inputs.extend_from_slice(&one_hot(s));
            act_in.push(ACTION_VALUES[a]);
        }
    }

    let q_table = |net: &slac_core::nn::Mlp| -> Vec<Vec<f64>> {
        let tape = Tape::new();
        let z = tape.leaf(inputs.clone(), &[8, 4]);
        let a = tape.leaf(act_in.clone(), &[8, 1]);
        let x = tape.concat(&[&z, &a], 1);
        let q = net.forward(&tape, &x, Bind::Frozen).value();
        (0..4).map(|s| vec![q[s * 2], q[s * 2 + 1]]).collect()
    };

    for _ in 0..updates {
        // Targets from the EMA copies, exact expectation over transitions.
        let q1t = q_table(&critics.q1_target);
        let q2t = q_table(&critics.q2_target);
        let min_t: Vec<Vec<f64>> = (0..4)
            .map(|s| (0..2).map(|a| q1t[s][a].min(q2t[s][a])).collect())
            .collect();
        let mut targets = Vec::with_capacity(8);
        for s in 0..4 {
            for a in 0..2 {
                let ev: f64 = mdp.transition[s][a]
                    .iter()
                    .enumerate()
                    .map(|(sp, p)| p * soft_value(&min_t[sp], alpha))
                    .sum();
                targets.push(mdp.reward[s][a] + gamma * ev);
            }
        }
        let tape = Tape::new();
        let z = tape.leaf(inputs.clone(), &[8, 4]);
        let a = tape.leaf(act_in.clone(), &[8, 1]);
        let x = tape.concat(&[&z, &a], 1);
        let y = tape.leaf(targets.clone(), &[8, 1]);
        let q1 = critics.q1.forward(&tape, &x, Bind::Trainable);
        let q2 = critics.q2.forward(&tape, &x, Bind::Trainable);
        let loss = ((q1 - &y).square().scale(0.5).mean()
            + (q2 - &y).square().scale(0.5).mean())
        .scale(1.0);
        tape.backward(&loss).unwrap();
        adam_step_group(&tape, &params, lr);
        critics.target_update(nu);
    }

    let q1 = q_table(&critics.q1);
    let q2 = q_table(&critics.q2);
    (0..4).map(|s| (0..2).map(|a| q1[s][a].min(q2[s][a])).collect()).collect()
}

#[test]
fn twin_critics_match_soft_vi() {
    let mdp = ring_mdp();
    let (alpha, gamma) = (0.2, 0.9);
    let exact = tabular_soft_value_iteration(&mdp, alpha, gamma).unwrap();
    let start = std::time::Instant::now();
    let learned = train_twin_critics(&mdp, alpha, gamma, 20_000, 0.01, 1e-3, 1);
    let mut worst = 0.0f64;
    for s in 0..4 {
        for a in 0..2 {
            worst = worst.max((learned[s][a] - exact[s][a]).abs());
        }
    }
    println!("exact {exact:?}");
    println!("learned {learned:?}");
    println!("worst |diff| = {worst:.4} in {:?}", start.elapsed());
    assert!(worst < 5e-2);
}
