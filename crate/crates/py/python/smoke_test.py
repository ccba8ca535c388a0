"""Smoke test for the `hat` extension: synth, train, infer, eval on a tiny run.

Build first, e.g. `maturin develop -m crates/py/Cargo.toml --features extension-module`.
"""
import math
import sys
import tempfile
from pathlib import Path

import hat


def main() -> int:
    lam = hat.focal_factors([1.0, 1.0], [1.0, 1.0], 0.025, 0.05)
    assert all(abs(v - 0.05) < 1e-12 for v in lam[:2]), lam
    p = [0.2, 0.3, 0.5]
    ce = hat.adaptive_focal_loss(p, [0.0, 1.0, 0.0], [0.0, 0.0, 0.0])
    assert abs(ce + math.log(0.3)) < 1e-12, ce

    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        hat.synth(str(root / "data"), n=2, steps=60, seed=3)
        losses = hat.train(
            str(root / "data"),
            str(root / "run"),
            toy=True,
            sets=["train.epochs=2", "train.osn_epochs=2"],
        )
        assert len(losses) == 2 and all(math.isfinite(v) for v in losses), losses
        feats = sorted(str(f) for f in (root / "data").glob("*.hatf"))
        psi = hat.infer(str(root / "run" / "checkpoint.hatc"), feats, str(root / "out"), audit=True)
        assert set(psi) == {"synth_000", "synth_001"}, psi.keys()
        for rows in psi.values():
            times = [r[0] for r in rows]
            assert times == sorted(times)
        metrics = hat.evaluate(
            sorted(str(f) for f in (root / "out").glob("*.psi.csv")),
            str(root / "data" / "annotations.csv"),
        )
        assert 0.0 <= metrics["avg_map"] <= 100.0, metrics
    print("smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
