"""Smoke test for the `wog` Python extension.

Build and install it first:

    pip install maturin
    maturin build --release -m crates/py/Cargo.toml -o target/wheels
    pip install --force-reinstall target/wheels/wog-*.whl

Then run `python python/smoke_test.py` or `pytest python/smoke_test.py`.
"""

import math
import os
import tempfile

import wog


def test_config_defaults_and_errors():
    cfg = wog.RunConfig()
    assert cfg.horizon == 16
    assert cfg.exec_horizon == 8
    try:
        cfg.set("model.horizon", "10")
    except ValueError as e:
        assert "divisible by 4" in str(e)
    else:
        raise AssertionError("T=10 accepted")
    assert cfg.horizon == 16
    again = wog.RunConfig.from_toml(cfg.to_toml())
    assert again.horizon == 16


def test_world_and_expert():
    world = wog.World("pick_place", 3)
    h, w, pixels = world.render()
    assert len(pixels) == h * w * 3
    assert len(world.instruction()) == 6
    while not world.success() and world.steps < 80:
        world.step(world.expert_action())
    assert world.success()
    cells = wog.evaluate_expert(["close_door"], ["id", "background"], n_trials=4)
    assert [c["success_rate"] for c in cells] == [1.0, 1.0]


def test_flow_target_and_gradcheck():
    a_tau, v = wog.flow_target([[1.0, -2.0]], [[0.5, 0.5]], 0.25)
    assert a_tau == [0.625, -0.125]
    assert v == [0.5, -2.5]
    errs = wog.gradcheck(trials=1)
    assert "matmul" in errs and max(errs.values()) < 1e-4


def test_two_stages_checkpoint_and_eval():
    cfg = wog.RunConfig()
    for k, v in [
        ("model.dim", "16"), ("model.heads", "2"), ("model.backbone_depth", "1"), ("model.dit_depth", "1"),
        ("model.n_queries", "4"), ("model.cond_dim", "8"), ("model.future_hidden", "16"),
        ("model.future_heads", "2"), ("model.future_blocks", "1"), ("stage1.batch_size", "4"),
        ("stage2.batch_size", "4"),
    ]:
        cfg.set(k, v)
    data = wog.Dataset.generate("pick_place", 2, 1)
    human = wog.Dataset.generate("pick_place", 2, 2, source="human_video", label_fraction=0.0)
    assert human.labeled() == 0
    data.extend(human)
    assert len(data) == 4 and data.labeled() == 2

    s1 = wog.train_stage1(data, cfg, seed=0, steps=2)
    assert s1.stage == "I" and s1.encoder_checksum is None
    s2 = wog.train_stage2(data, cfg, s1, steps=2)
    assert s2.stage == "II" and s2.encoder_checksum

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "s2.wogck")
        s2.save(path)
        back = wog.Checkpoint.load(path)
    assert back.param_names() == s2.param_names()
    name = back.param_names()[0]
    assert back.param(name) == s2.param(name)

    raw = bytearray(s2.to_bytes())
    raw[-1] ^= 0x01
    try:
        wog.Checkpoint.from_bytes(bytes(raw))
    except ValueError as e:
        assert "checksum" in str(e)
    else:
        raise AssertionError("corrupted checkpoint accepted")

    cells = wog.evaluate(s2, ["pick_place"], ["id", "light"], n_trials=2)
    assert len(cells) == 2
    assert all(0.0 <= c["success_rate"] <= 1.0 for c in cells)
    cos = wog.condition_probe(s2, data, samples=4)
    assert math.isfinite(cos) and -1.0 <= cos <= 1.0

    try:
        wog.evaluate(s1, ["pick_place"], ["id"])
    except ValueError:
        pass
    else:
        raise AssertionError("stage-I checkpoint evaluated")


if __name__ == "__main__":
    for name, fn in sorted(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"ok {name}")
