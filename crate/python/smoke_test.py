"""Smoke test for the goexplore extension module.

Build and run from the repository root:

    cargo build --release -p goexplore-py --features extension-module
    cp target/release/libgoexplore.so python/goexplore.so
    python3 python/smoke_test.py
"""

import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import goexplore  # noqa: E402


def main():
    cfg = goexplore.EnvConfig.deceptive_maze(5, 5, seed=1)
    env = goexplore.Env(cfg)
    obs = env.reset()
    assert len(obs) > 0
    feats, reward, done = env.step(4)
    assert reward == 0.0 and not done, (reward, done)
    print("env", cfg, "actions", env.num_actions, "cell", env.cell())

    archive, log = goexplore.explore(cfg, 50_000, seed=0, explore_steps=30)
    assert log[0][1] == 1 and log[-1][0] == 50_000
    assert archive.best_score() == env.max_score()
    print("explore: cells", len(archive), "best", archive.best_score())

    key, score, length, _, _ = archive.cells()[-1]
    replay = goexplore.Env(cfg)
    replay.reset()
    for a in archive.trajectory(key):
        replay.step(a)
    assert len(archive.trajectory(key)) == length

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "archive.txt")
        archive.save(path)
        again = goexplore.Archive.load(path, cfg)
        assert again.cells() == archive.cells()
        try:
            goexplore.Archive.load(path, goexplore.EnvConfig.deceptive_maze(5, 5, seed=2))
        except RuntimeError as e:
            print("digest mismatch rejected:", e)
        else:
            raise AssertionError("loaded an archive into the wrong env")

    model, converged = goexplore.robustify(cfg, archive, 200_000, seed=0, stickiness=0.0)
    mean, stderr, success = model.evaluate(cfg, episodes=20, stickiness=0.0, seed=3)
    print(f"robustify: converged={converged} mean={mean:.2f}±{stderr:.2f} success={success:.2f}")

    metrics = "# env=00\nrun_id,seed,frames,cells,best_score,success_rate\nr,0,0,5,,\n"
    other = "# env=00\nrun_id,seed,frames,cells,best_score,success_rate\nr,1,0,7,,\n"
    curves = goexplore.export_curves([metrics, other])
    assert curves.splitlines()[2].startswith("0,2,6,5,7"), curves
    print("smoke test ok")


if __name__ == "__main__":
    main()
