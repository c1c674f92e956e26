use std::ffi::CString;

use pyo3::prelude::*;
use pyo3::types::{PyDict, PyModule};

fn with_module(code: &str) {
    Python::initialize();
    Python::attach(|py| {
        let m = PyModule::new(py, "goexplore").unwrap();
        goexplore::goexplore(&m).unwrap();
        let globals = PyDict::new(py);
        globals.set_item("goexplore", m).unwrap();
        let code = CString::new(code).unwrap();
        if let Err(e) = py.run(&code, Some(&globals), None) {
            panic!("{e}");
        }
    });
}

#[test]
fn env_is_deterministic() {
    with_module(
        "
cfg = goexplore.EnvConfig.key_door_world(4, 4, 2, 3)
env, twin = goexplore.Env(cfg), goexplore.Env(cfg)
env.reset()
twin.reset()
for a in [4, 2, 2, 4, 3, 1]:
    assert env.step(a) == twin.step(a)
assert env.snapshot() == twin.snapshot()
assert env.num_actions == 5
try:
    env.step(9)
except ValueError:
    pass
else:
    raise AssertionError('bad action accepted')
",
    );
}

#[test]
fn explore_finds_the_far_goal() {
    with_module(
        "
cfg = goexplore.EnvConfig.deceptive_maze(5, 5, seed=1)
archive, log = goexplore.explore(cfg, 30000, seed=2, explore_steps=30)
assert archive.best_score() == goexplore.Env(cfg).max_score()
frames = [row[0] for row in log]
assert frames == sorted(frames) and frames[-1] == 30000
",
    );
}

#[test]
fn export_requires_equal_frames() {
    with_module(
        "
h = '# env=01\\nrun_id,seed,frames,cells,best_score,success_rate\\n'
try:
    goexplore.export_curves([h + 'r,0,0,1,,\\n', h + 'r,1,5,1,,\\n'])
except Exception:
    pass
else:
    raise AssertionError('misaligned frames accepted')
",
    );
}
