//! From-scratch RL learning regression on an easy suite: with correction
//! cues visible the policy must solve unseen goals; with feedback disabled
//! the same budget must fall well short, confirming that generalization
//! flows through the cue channel rather than memorized scripts.

use branchlab::harness::{branch_sweep, ExperimentConfig};

fn easy_config() -> ExperimentConfig {
    let mut config = ExperimentConfig::default();
    config.suite.n_train_tasks = 8;
    config.suite.n_heldout_tasks = 2;
    config.suite.horizon_min = 2;
    config.suite.horizon_max = 2;
    config.suite.action_vocab = 4;
    config.suite.train_seed_hi = 300;
    config.suite.heldout_seed_hi = 1080;
    // Pure RL: a single from-scratch branch, no SFT consumed.
    config.expert.n_episodes = 1;
    config.sft.t_sft = 0;
    config.sft.branch_points = vec![0];
    config.rl.t_rl = 400;
    config.eval.episodes_per_split = 50;
    config
}

#[test]
fn rl_from_scratch_solves_the_easy_suite() {
    let dir = tempfile::tempdir().unwrap();
    let out = branch_sweep(&easy_config(), dir.path()).unwrap();
    let point = &out.frontier[0];
    assert_eq!(point.t_b, 0);
    assert!(
        point.heldout_goal_sr >= 0.9,
        "from-scratch RL should reach >= 0.9 on held-out goals, got {}",
        point.heldout_goal_sr
    );
    assert!(
        point.heldout_task_sr >= 0.9,
        "cue copying transfers to held-out tasks, got {}",
        point.heldout_task_sr
    );
    // The run actually consumed RL optimizer steps.
    let history = &out.branches[0].seeds[0].history;
    assert!(history.last().unwrap().rl_flops > 0, "RL FLOPs should be billed");
}

#[test]
fn blind_rollouts_cannot_generalize() {
    let mut config = easy_config();
    config.suite.error_feedback = false;
    config.rl.error_feedback = false;
    let dir = tempfile::tempdir().unwrap();
    let out = branch_sweep(&config, dir.path()).unwrap();
    let point = &out.frontier[0];
    assert!(
        point.heldout_goal_sr <= 0.6,
        "without cues, unseen goals should stay mostly unsolved, got {}",
        point.heldout_goal_sr
    );
}
