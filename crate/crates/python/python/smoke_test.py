"""Quick end-to-end check of the extension module."""

import math
import tempfile
from pathlib import Path

import metacritic_py as mc


def main():
    assert mc.pad_for_layer(3) == (4, 4)
    tb = mc.estimate_critic_memory(70_000) / 1e12
    assert abs(tb - 32) / 32 < 0.05, tb
    assert mc.ci95([0.0, 1.0]) == 0.98
    assert mc.format_cell(0.5538, 0.0039) == "55.38 ± 0.39%"

    checks = mc.gradcheck_suite()
    assert checks and all(c["max_rel_err"] <= c["tolerance"] for c in checks), checks

    critic = mc.Critic(4, seed=1, kernels_per_layer=3)
    assert critic.conv_out_lens() == [4] * 5
    assert math.isfinite(critic([0.1, 0.2, 0.3, 0.4]))
    assert critic.input_gradient_norm([0.1, 0.2, 0.3, 0.4]) >= 0

    with tempfile.TemporaryDirectory() as tmp:
        exp = mc.Experiment({
            "run.out": tmp,
            "run.seeds": "0,1",
            "task.dim": 6,
            "episode.way": 3,
            "episode.query": 2,
            "train.epochs": 1,
            "train.steps_per_epoch": 3,
            "train.val_episodes": 3,
            "train.test_episodes": 4,
            "model.blocks": 1,
            "meta.inner_steps": 2,
            "meta.critic_kernels": 2,
            "meta.variant": "sca_pred",
        })
        family = exp.family()
        path = Path(tmp) / "blobs.mcep"
        family.save(path)
        ep = mc.TaskFamily.load(path).sample_episode("train", 0, 3, 1, 2)
        assert len(ep.support_y) == 3 and len(ep.target_y) == 6

        learner = exp.learner(0)
        before = learner.theta()
        metrics = learner.meta_step([ep, family.sample_episode("train", 1, 3, 1, 2)], 0)
        assert learner.theta() != before, metrics
        scores = learner.evaluate(ep)
        print("evaluate:", scores)

        ckpt = Path(tmp) / "learner.ckpt"
        learner.save(ckpt)
        other = exp.learner(9)
        other.load(ckpt)
        assert other.theta() == learner.theta()

        # Adaptation never looks at target labels.
        flipped = ep.with_target_labels([(y + 1) % 3 for y in ep.target_y])
        assert learner.adapted_weights(ep) == learner.adapted_weights(flipped)

        result = exp.run()
        assert len(result["seeds"]) == 2 and result["ci95"] is not None
        print("experiment:", mc.format_cell(result["mean"], result["ci95"]))

    try:
        mc.Experiment({"meta.nope": 1})
    except ValueError as e:
        assert "meta.nope" in str(e)
    else:
        raise AssertionError("unknown key accepted")
    print("smoke test ok")


if __name__ == "__main__":
    main()
