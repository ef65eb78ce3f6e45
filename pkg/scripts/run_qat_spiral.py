"""Quantization-aware training recovery experiment.

Pretrains a float MLP on the two-spiral problem, measures the straight
PTQ accuracy at W4/A8, then fine-tunes through the quantized forward
pass and reports how much of the gap QAT closes. Writes the per-epoch
training log as CSV next to the script output.

Run from the repo root:  python3 scripts/run_qat_spiral.py
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from fixquant import toys
from fixquant.datasets import evaluate
from fixquant.qat import QatOptions, qat_train
from fixquant.quantsim import compute_encodings, create_quantsim


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--epochs", type=int, default=15)
    ap.add_argument("--log", type=Path, default=Path("qat_log.csv"))
    args = ap.parse_args(argv)

    ds = toys.spiral_dataset(n_per_class=120, n_classes=2, seed=0)

    sim_f = create_quantsim(toys.mlp([2, 24, 24, 2], seed=3))
    for spec in list(sim_f.param_quantizers.values()) + list(
        sim_f.activation_quantizers.values()
    ):
        spec.enabled = False
    qat_train(
        sim_f,
        ds.x,
        ds.y,
        options=QatOptions(epochs=80, learning_rate=0.1, lr_decay_every=40),
        seed=args.seed,
    )
    trained = sim_f.graph
    acc_float = evaluate(trained, ds)

    feed = [ds.x[i : i + 64] for i in range(0, len(ds), 64)]

    sim = create_quantsim(trained, default_param_bw=4, default_output_bw=8)
    compute_encodings(sim, feed)
    acc_ptq = evaluate(sim, ds)

    # fresh sim so QAT starts from the same weights PTQ was scored on
    sim = create_quantsim(trained, default_param_bw=4, default_output_bw=8)
    compute_encodings(sim, feed)
    log = qat_train(
        sim,
        ds.x,
        ds.y,
        options=QatOptions(
            epochs=args.epochs,
            learning_rate=0.02,
            lr_decay_every=8,
            log_path=str(args.log),
        ),
        seed=args.seed,
    )
    acc_qat = evaluate(sim, ds)

    print("two-spiral MLP [2, 24, 24, 2], W4/A8")
    print(f"  float    {acc_float:.3f}")
    print(f"  ptq      {acc_ptq:.3f}")
    print(f"  qat      {acc_qat:.3f}   ({args.epochs} epochs)")
    gap = acc_float - acc_ptq
    if gap > 0:
        print(f"recovered {100.0 * (acc_qat - acc_ptq) / gap:.0f}% of the PTQ gap")
    print(f"loss {log[0]['loss']:.4f} -> {log[-1]['loss']:.4f}, log in {args.log}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
