"""End-to-end smoke test of the pysimlink extension on a toy link."""

import os
import sys
import tempfile

import pysimlink as sl

TOY = [
    "system.subcarriers=2",
    "system.users=1",
    "system.user_positions=[[3.0, 0.0, 6.0]]",
    "system.bits_per_user=[4]",
    "sim.layers_tx=1",
    "sim.layers_rx=1",
    "sim.units_tx=[3, 3]",
    "sim.units_rx=[3, 3]",
    "sim.antennas_tx=[2, 2]",
    "sim.antennas_rx=[2, 2]",
    "training.pretrain.epochs=30",
    "training.pretrain.batch_size=64",
    "training.finetune.epochs=10",
    "training.finetune.batch_size=64",
    "evaluation.test_scale=2000",
    "evaluation.monte_carlo=2",
    "evaluation.powers_dbm=[0.0, 30.0]",
]


def main() -> int:
    cfg = sl.Config(TOY)
    cfg.validate("single")
    assert len(cfg.hash()) == 64
    assert cfg.with_overrides(["seed=5"]).seed == 5

    try:
        cfg.with_overrides(["channel.epsilon=2.0"]).validate()
    except sl.SimlinkError as e:
        print("rejected invalid config:", e)
    else:
        raise AssertionError("epsilon=2 should not validate")

    untrained = sl.Model.untrained(cfg)
    model, losses = sl.Model.pretrain(cfg)
    assert len(losses) == 30 and all(l >= 0 for l in losses)
    print(f"pretrain loss {losses[0]:.3f} -> {losses[-1]:.3f}")

    tuned = model.finetune(cfg, channel_index=1, epochs=5)
    assert len(tuned) == 5

    points = model.evaluate(cfg)
    assert [p["power_dbm"] for p in points] == [0.0, 30.0]
    for p in points:
        assert 0.0 <= p["ber"] <= 1.0 and p["bits"] == 2 * 2000 * 4
        print(f"{p['power_dbm']:5.1f} dBm  BER {p['ber']:.4f} +- {p['half_width']:.4f}")
    again = model.evaluate(cfg)
    assert again == points, "evaluation must be deterministic"

    base = untrained.evaluate(cfg.with_overrides(["training.finetune.epochs=0"]), [30.0])
    print(f"untrained BER {base[0]['ber']:.3f}")

    pm = model.quantized(2).phase_map(bits=2)
    assert len([l for l in pm.splitlines() if l and not l.startswith("#")]) >= 9
    assert abs(sl.dbm_to_watts(30.0) - 1.0) < 1e-12

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "toy.toml")
        with open(path, "w") as f:
            f.write(cfg.to_toml())
        out = os.path.join(d, "runs")
        assert sl.run_cli(["train", "--config", path, "--out", out]) == 0
        assert sl.run_cli(["train", "--config", os.path.join(d, "missing.toml")]) != 0

    print("smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
