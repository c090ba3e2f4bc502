//! Episode-structured replay with fixed-length sequence-window sampling.
//!
//! Observations are stored once per step; sampled windows are materialized
//! views that never span two episodes. Windows ending earlier than `tau`
//! steps into an episode are front-padded with the first real frame (zero
//! actions/rewards) and masked out.

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// One episode: N+1 observations, N actions, N rewards. Append-only; the
/// terminal flag is set at most once and then frozen.
#[derive(Debug, Clone)]
pub struct Episode {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    /// Episode ended (any reason).
    pub terminal: bool,
    /// Ended by failure: the critic must not bootstrap through the last
    /// transition. Time-limit terminations leave this false.
    pub failure: bool,
}

impl Episode {
    fn new(first_obs: Vec<f64>) -> Self {
        Episode {
            observations: vec![first_obs],
            actions: Vec::new(),
            rewards: Vec::new(),
            terminal: false,
            failure: false,
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Fixed-length window: tau+1 observations, tau actions, tau rewards.
#[derive(Debug, Clone)]
pub struct SequenceWindow {
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    /// Validity per observation slot; false marks front padding.
    pub valid_mask: Vec<bool>,
    /// The last transition in the window ends the episode.
    pub terminal: bool,
    /// The last transition is a bootstrap-blocking failure terminal.
    pub failure: bool,
    /// Unique token tying downstream latents back to this sample.
    pub window_id: u64,
}

impl SequenceWindow {
    pub fn tau(&self) -> usize {
        self.actions.len()
    }

    /// Reward attached to the final transition (`r_tau` in the critic target).
    pub fn last_reward(&self) -> f64 {
        *self.rewards.last().expect("window has at least one transition")
    }
}

/// Replay buffer with capacity counted in stored environment steps. When full,
/// whole episodes are evicted oldest-first.
pub struct ReplayBuffer {
    episodes: VecDeque<Episode>,
    capacity_steps: usize,
    stored_steps: usize,
    next_window_id: u64,
    obs_dim: usize,
    action_dim: usize,
}

impl ReplayBuffer {
    pub fn new(capacity_steps: usize, obs_dim: usize, action_dim: usize) -> Self {
        assert!(capacity_steps > 0, "replay capacity must be positive");
        ReplayBuffer {
            episodes: VecDeque::new(),
            capacity_steps,
            stored_steps: 0,
            next_window_id: 0,
            obs_dim,
            action_dim,
        }
    }

    pub fn stored_steps(&self) -> usize {
        self.stored_steps
    }

    pub fn num_episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stored_steps == 0
    }

    pub fn episodes(&self) -> impl DoubleEndedIterator<Item = &Episode> {
        self.episodes.iter()
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    /// Open a new episode with its initial observation.
    pub fn begin_episode(&mut self, first_obs: Vec<f64>) {
        assert_eq!(first_obs.len(), self.obs_dim, "begin_episode: observation dim mismatch");
        self.episodes.push_back(Episode::new(first_obs));
    }

    /// Append one transition to the most recent episode.
    pub fn append_step(
        &mut self,
        action: Vec<f64>,
        reward: f64,
        next_obs: Vec<f64>,
        terminal: bool,
        failure: bool,
    ) -> Result<()> {
        assert_eq!(action.len(), self.action_dim, "append_step: action dim mismatch");
        assert_eq!(next_obs.len(), self.obs_dim, "append_step: observation dim mismatch");
        let ep = self
            .episodes
            .back_mut()
            .ok_or_else(|| Error::Validation("append_step before begin_episode".into()))?;
        if ep.terminal {
            return Err(Error::Validation("append_step after episode terminal".into()));
        }
        ep.actions.push(action);
        ep.rewards.push(reward);
        ep.observations.push(next_obs);
        ep.terminal = terminal;
        ep.failure = failure;
        self.stored_steps += 1;
        self.evict();
        Ok(())
    }

    /// Drop oldest whole episodes while over capacity. The episode currently
    /// being written is never evicted.
    fn evict(&mut self) {
        while self.stored_steps > self.capacity_steps && self.episodes.len() > 1 {
            let ep = self.episodes.pop_front().expect("len > 1");
            self.stored_steps -= ep.len();
        }
    }

    /// Sample `batch_size` windows of length `tau`, uniformly over all end
    /// positions across episodes.
    pub fn sample_windows(
        &mut self,
        batch_size: usize,
        tau: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<SequenceWindow>> {
        assert!(tau >= 1, "tau must be at least 1");
        if self.is_empty() {
            return Err(Error::Validation("sample_windows on an empty buffer".into()));
        }
        let total = self.stored_steps;
        let mut out = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let flat = rng.random_range(0..total);
            out.push(self.window_at_flat(flat, tau));
        }
        Ok(out)
    }

    /// Window whose final transition is the `flat`-th stored step (insertion
    /// order across episodes).
    fn window_at_flat(&mut self, flat: usize, tau: usize) -> SequenceWindow {
        let mut remaining = flat;
        let mut ep_idx = 0;
        for (i, ep) in self.episodes.iter().enumerate() {
            if remaining < ep.len() {
                ep_idx = i;
                break;
            }
            remaining -= ep.len();
        }
        let id = self.next_window_id;
        self.next_window_id += 1;
        build_window(&self.episodes[ep_idx], remaining, tau, id, self.action_dim)
    }

    /// Deterministic enumeration of every window end position (tests and
    /// held-out evaluation).
    pub fn all_windows(&mut self, tau: usize) -> Vec<SequenceWindow> {
        let total = self.stored_steps;
        (0..total).map(|flat| self.window_at_flat(flat, tau)).collect()
    }
}

/// Column-major batch view of sampled windows: per-step flattened buffers
/// ready to become `[batch, dim]` tensor leaves.
#[derive(Debug, Clone)]
pub struct WindowBatch {
    pub batch: usize,
    pub tau: usize,
    pub obs_dim: usize,
    pub action_dim: usize,
    /// Per observation slot t in 0..=tau: `[batch * obs_dim]`.
    pub obs: Vec<Vec<f64>>,
    /// Per transition t in 0..tau: `[batch * action_dim]`.
    pub actions: Vec<Vec<f64>>,
    /// Per transition t in 0..tau: `[batch]`.
    pub rewards: Vec<Vec<f64>>,
    /// Per observation slot t: `[batch]` of 1.0 (valid) / 0.0 (padding).
    pub masks: Vec<Vec<f64>>,
    /// `[batch]`: 0.0 where the final transition blocks bootstrapping.
    pub bootstrap_mask: Vec<f64>,
    pub window_ids: Vec<u64>,
}

impl WindowBatch {
    pub fn from_windows(windows: &[SequenceWindow]) -> Self {
        assert!(!windows.is_empty(), "WindowBatch: empty batch");
        let tau = windows[0].tau();
        assert!(windows.iter().all(|w| w.tau() == tau), "WindowBatch: mixed tau");
        let batch = windows.len();
        let obs_dim = windows[0].obs[0].len();
        let action_dim = windows[0].actions[0].len();

        let mut obs = vec![Vec::with_capacity(batch * obs_dim); tau + 1];
        let mut masks = vec![Vec::with_capacity(batch); tau + 1];
        let mut actions = vec![Vec::with_capacity(batch * action_dim); tau];
        let mut rewards = vec![Vec::with_capacity(batch); tau];
        let mut bootstrap_mask = Vec::with_capacity(batch);
        let mut window_ids = Vec::with_capacity(batch);
        for w in windows {
            for t in 0..=tau {
                obs[t].extend_from_slice(&w.obs[t]);
                masks[t].push(if w.valid_mask[t] { 1.0 } else { 0.0 });
            }
            for t in 0..tau {
                actions[t].extend_from_slice(&w.actions[t]);
                rewards[t].push(w.rewards[t]);
            }
            bootstrap_mask.push(if w.failure { 0.0 } else { 1.0 });
            window_ids.push(w.window_id);
        }
        WindowBatch {
            batch,
            tau,
            obs_dim,
            action_dim,
            obs,
            actions,
            rewards,
            masks,
            bootstrap_mask,
            window_ids,
        }
    }

    /// Rewards of the final transition, `[batch]`.
    pub fn last_rewards(&self) -> &[f64] {
        &self.rewards[self.tau - 1]
    }
}

/// Materialize the window ending at transition `end` (0-based step index
/// within `ep`): observations x_{end-tau+1..=end+1}, front-padded with the
/// episode's first frame when the window starts before the episode does.
fn build_window(
    ep: &Episode,
    end: usize,
    tau: usize,
    window_id: u64,
    action_dim: usize,
) -> SequenceWindow {
    debug_assert!(end < ep.len());
    let mut obs = Vec::with_capacity(tau + 1);
    let mut actions = Vec::with_capacity(tau);
    let mut rewards = Vec::with_capacity(tau);
    let mut valid_mask = Vec::with_capacity(tau + 1);

    // Observation slots t = end+1-tau ..= end+1 in signed episode coordinates.
    for k in 0..=tau {
        let t = end as isize + 1 - tau as isize + k as isize;
        if t < 0 {
            obs.push(ep.observations[0].clone());
            valid_mask.push(false);
        } else {
            obs.push(ep.observations[t as usize].clone());
            valid_mask.push(true);
        }
    }
    // Transition slots t = end-tau+1 ..= end.
    for k in 0..tau {
        let t = end as isize - tau as isize + 1 + k as isize;
        if t < 0 {
            actions.push(vec![0.0; action_dim]);
            rewards.push(0.0);
        } else {
            actions.push(ep.actions[t as usize].clone());
            rewards.push(ep.rewards[t as usize]);
        }
    }
    let is_last = end + 1 == ep.len();
    SequenceWindow {
        obs,
        actions,
        rewards,
        valid_mask,
        terminal: is_last && ep.terminal,
        failure: is_last && ep.failure,
        window_id,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_chacha::rand_core::SeedableRng;

    fn fill_episode(buf: &mut ReplayBuffer, steps: usize, tag: f64) {
        buf.begin_episode(vec![tag, 0.0]);
        for t in 0..steps {
            let last = t + 1 == steps;
            buf.append_step(vec![t as f64], t as f64 * 0.1, vec![tag, (t + 1) as f64], last, false)
                .unwrap();
        }
    }

    #[test]
    fn counting_and_eviction() {
        let mut buf = ReplayBuffer::new(10, 2, 1);
        fill_episode(&mut buf, 5, 1.0);
        assert_eq!(buf.stored_steps(), 5);

        let mut buf = ReplayBuffer::new(10, 2, 1);
        fill_episode(&mut buf, 4, 1.0);
        fill_episode(&mut buf, 4, 2.0);
        fill_episode(&mut buf, 4, 3.0);
        // 12 > 10: oldest whole episode evicted.
        assert_eq!(buf.stored_steps(), 8);
        assert_eq!(buf.num_episodes(), 2);
        assert_eq!(buf.episodes().next().unwrap().observations[0][0], 2.0);
    }

    #[test]
    fn append_after_terminal_rejected() {
        let mut buf = ReplayBuffer::new(10, 1, 1);
        buf.begin_episode(vec![0.0]);
        buf.append_step(vec![0.0], 0.0, vec![1.0], true, true).unwrap();
        let err = buf.append_step(vec![0.0], 0.0, vec![2.0], false, false).unwrap_err();
        assert!(err.to_string().contains("terminal"));
    }

    #[test]
    fn append_before_begin_rejected() {
        let mut buf = ReplayBuffer::new(10, 1, 1);
        assert!(buf.append_step(vec![0.0], 0.0, vec![1.0], false, false).is_err());
    }

    #[test]
    fn empty_buffer_sampling_rejected() {
        let mut buf = ReplayBuffer::new(10, 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(buf.sample_windows(1, 4, &mut rng).is_err());
        buf.begin_episode(vec![0.0]);
        // Still no transitions.
        assert!(buf.sample_windows(1, 4, &mut rng).is_err());
    }

    #[test]
    fn short_episode_windows_are_front_padded() {
        let mut buf = ReplayBuffer::new(100, 2, 1);
        fill_episode(&mut buf, 3, 7.0);
        let tau = 8;
        let windows = buf.all_windows(tau);
        assert_eq!(windows.len(), 3);
        for (end, w) in windows.iter().enumerate() {
            let masked = w.valid_mask.iter().filter(|m| !**m).count();
            assert_eq!(masked, (tau + 1) - (end + 2));
            // Padded slots repeat the first real frame; padded actions/rewards zero.
            for k in 0..masked {
                assert_eq!(w.obs[k], vec![7.0, 0.0]);
                assert_eq!(w.actions[k], vec![0.0]);
                assert_eq!(w.rewards[k], 0.0);
            }
            // Unmasked tail matches the episode exactly.
            for k in masked..=tau {
                assert_eq!(w.obs[k], vec![7.0, (k - masked) as f64]);
            }
        }
    }

    #[test]
    fn long_episode_window_is_contiguous() {
        let mut buf = ReplayBuffer::new(1000, 2, 1);
        fill_episode(&mut buf, 100, 0.0);
        let tau = 8;
        // The window ending at step 50 covers transitions 43..=50 contiguously.
        let w = buf.all_windows(tau).into_iter().nth(50).unwrap();
        assert!(w.valid_mask.iter().all(|m| *m));
        for (k, a) in w.actions.iter().enumerate() {
            assert_eq!(a[0], (43 + k) as f64);
        }
        assert_eq!(w.obs[0][1], 43.0);
        assert_eq!(w.obs[tau][1], 51.0);
        assert_eq!(w.last_reward(), 5.0);
    }

    #[test]
    fn sampling_is_uniform_over_end_positions() {
        let mut buf = ReplayBuffer::new(1000, 2, 1);
        fill_episode(&mut buf, 6, 1.0);
        fill_episode(&mut buf, 10, 2.0);
        let total = 16usize;
        let draws = 100_000usize;
        let mut counts = vec![0usize; total];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..draws {
            let w = &buf.sample_windows(1, 3, &mut rng).unwrap()[0];
            // Recover the end position from the last observation tag.
            let ep_tag = w.obs[3][0] as usize;
            let step = w.obs[3][1] as usize - 1;
            let flat = if ep_tag == 1 { step } else { 6 + step };
            counts[flat] += 1;
        }
        let expected = draws as f64 / total as f64;
        let sigma = (draws as f64 * (1.0 / total as f64) * (1.0 - 1.0 / total as f64)).sqrt();
        for (i, c) in counts.iter().enumerate() {
            assert!(
                (*c as f64 - expected).abs() <= 3.0 * sigma,
                "position {i}: count {c} vs expected {expected:.1} (sigma {sigma:.1})"
            );
        }
    }

    #[test]
    fn terminal_flags_only_on_last_window() {
        let mut buf = ReplayBuffer::new(100, 2, 1);
        buf.begin_episode(vec![0.0, 0.0]);
        for t in 0..4 {
            buf.append_step(vec![0.0], 0.0, vec![0.0, (t + 1) as f64], t == 3, t == 3).unwrap();
        }
        let windows = buf.all_windows(2);
        assert_eq!(windows.len(), 4);
        for (i, w) in windows.iter().enumerate() {
            assert_eq!(w.terminal, i == 3);
            assert_eq!(w.failure, i == 3);
        }
    }

    #[test]
    fn seeded_sampling_is_deterministic() {
        let mut buf = ReplayBuffer::new(100, 2, 1);
        fill_episode(&mut buf, 20, 1.0);
        let draw = |buf: &mut ReplayBuffer| {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let ws = buf.sample_windows(16, 4, &mut rng).unwrap();
            ws.iter().map(|w| w.obs[4][1]).collect::<Vec<f64>>()
        };
        assert_eq!(draw(&mut buf), draw(&mut buf));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn windows_never_cross_episodes_and_capacity_holds(
            lengths in prop::collection::vec(1usize..12, 1..8),
            capacity in 8usize..40,
            tau in 1usize..6,
            seed in 0u64..1000,
        ) {
            let mut buf = ReplayBuffer::new(capacity, 2, 1);
            for (e, len) in lengths.iter().enumerate() {
                buf.begin_episode(vec![e as f64, 0.0]);
                for t in 0..*len {
                    buf.append_step(
                        vec![0.0],
                        1.0,
                        vec![e as f64, (t + 1) as f64],
                        t + 1 == *len,
                        false,
                    ).unwrap();
                    // Capacity holds up to the episode currently being written,
                    // which is never evicted.
                    let open_len = buf.episodes().next_back().unwrap().len();
                    prop_assert!(buf.stored_steps() <= capacity.max(open_len));
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let windows = buf.sample_windows(32, tau, &mut rng).unwrap();
            for w in windows {
                // Every valid frame carries the same episode tag.
                let tags: Vec<f64> = w
                    .obs
                    .iter()
                    .zip(&w.valid_mask)
                    .filter(|(_, m)| **m)
                    .map(|(o, _)| o[0])
                    .collect();
                prop_assert!(tags.windows(2).all(|p| p[0] == p[1]));
                // Round-trip: valid slots are bit-identical to the stored episode.
                let tag = tags[0];
                if let Some(ep) = buf.episodes().find(|e| e.observations[0][0] == tag) {
                    let first_valid = w.valid_mask.iter().position(|m| *m).unwrap();
                    let end_obs = w.obs.last().unwrap()[1] as usize;
                    for (k, o) in w.obs.iter().enumerate().skip(first_valid) {
                        let t = end_obs - (w.obs.len() - 1 - k);
                        prop_assert_eq!(o.clone(), ep.observations[t].clone());
                    }
                }
            }
        }
    }
}
